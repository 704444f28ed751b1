//! ShapeWorld: a procedural two-domain segmentation benchmark.
//!
//! Label maps are drawn from per-class pixel quotas so the expected class
//! frequencies equal the configured profile. Thin structures are placed
//! first and the large regions fill around them, which keeps every minority
//! class visible in every image. Source and target share the label process
//! and differ only in how labels are rendered to colour.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PACK_MAGIC: &[u8; 4] = b"FSEG";
pub const PACK_VERSION: u32 = 1;

/// Default pixel-share profile for the eight ShapeWorld classes.
pub const DEFAULT_PROFILE: [f64; 8] = [0.55, 0.18, 0.12, 0.09, 0.02, 0.02, 0.01, 0.01];

const UNSET: u8 = u8::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRole {
    Background,
    Road,
    Building,
    Vegetation,
    Pole,
    Sign,
    Fence,
    RoadBlob,
}

impl ClassRole {
    pub const ALL: [ClassRole; 8] = [
        ClassRole::Background,
        ClassRole::Road,
        ClassRole::Building,
        ClassRole::Vegetation,
        ClassRole::Pole,
        ClassRole::Sign,
        ClassRole::Fence,
        ClassRole::RoadBlob,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassRole::Background => "background",
            ClassRole::Road => "road",
            ClassRole::Building => "building",
            ClassRole::Vegetation => "vegetation",
            ClassRole::Pole => "pole",
            ClassRole::Sign => "sign",
            ClassRole::Fence => "fence",
            ClassRole::RoadBlob => "road_blob",
        }
    }

    pub fn is_thin(self) -> bool {
        matches!(
            self,
            ClassRole::Pole | ClassRole::Sign | ClassRole::Fence | ClassRole::RoadBlob
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Expected pixel share per class; class 0 is the background.
    pub profile: Vec<f64>,
    /// Per-image quotas are scaled by a factor drawn from `1 ± quota_jitter`.
    pub quota_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            profile: DEFAULT_PROFILE.to_vec(),
            quota_jitter: 0.25,
        }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.profile.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn role(&self, class: usize) -> ClassRole {
        ClassRole::ALL[class]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        if !(2..=ClassRole::ALL.len()).contains(&c) {
            return Err(Error::Config(format!(
                "ShapeWorld supports 2..=8 classes, got {c}"
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "image {}x{} is smaller than 16x16",
                self.height, self.width
            )));
        }
        if self.profile.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::Config("profile entries must lie in (0, 1)".into()));
        }
        let total: f64 = self.profile.iter().sum();
        if (total - 1.0).abs() > 0.02 {
            return Err(Error::Config(format!("profile sums to {total}, not 1")));
        }
        if !(0.0..1.0).contains(&self.quota_jitter) {
            return Err(Error::Config("quota_jitter must lie in [0, 1)".into()));
        }
        let road = self.profile.get(1).copied().unwrap_or(0.0);
        if road > 0.45 {
            return Err(Error::Config("road share above 0.45 leaves no sky".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn stream(self) -> u64 {
        match self {
            Domain::Source => 1,
            Domain::Target => 2,
        }
    }
}

/// Appearance model for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainConfig {
    pub domain: Domain,
    pub colors: Vec<[f32; 3]>,
    pub brightness: f32,
    pub noise_std: f32,
    pub texture_amp: f32,
}

const PALETTE: [[f32; 3]; 8] = [
    [0.55, 0.70, 0.90],
    [0.35, 0.35, 0.38],
    [0.62, 0.42, 0.32],
    [0.22, 0.52, 0.20],
    [0.88, 0.80, 0.18],
    [0.90, 0.18, 0.20],
    [0.58, 0.30, 0.68],
    [0.10, 0.16, 0.55],
];

const SHIFT_DIRECTIONS: [[f32; 3]; 8] = [
    [0.7, -0.7, 0.0],
    [0.0, 0.7, -0.7],
    [-0.7, 0.0, 0.7],
    [0.7, 0.0, -0.7],
    [-0.7, 0.7, 0.0],
    [0.0, -0.7, 0.7],
    [0.58, 0.58, -0.58],
    [-0.58, 0.58, 0.58],
];

impl DomainConfig {
    pub fn source(classes: usize) -> Self {
        Self {
            domain: Domain::Source,
            colors: PALETTE[..classes].to_vec(),
            brightness: 0.0,
            noise_std: 0.04,
            texture_amp: 0.03,
        }
    }

    pub fn target(classes: usize) -> Self {
        Self::shifted(classes, 0.12, 0.06, 0.07, 0.06)
    }

    /// Target-style appearance: palette moved by `color_shift` along fixed
    /// per-class directions, plus a global brightness offset.
    pub fn shifted(
        classes: usize,
        color_shift: f32,
        brightness: f32,
        noise_std: f32,
        texture_amp: f32,
    ) -> Self {
        let colors = PALETTE[..classes]
            .iter()
            .zip(SHIFT_DIRECTIONS)
            .map(|(base, dir)| std::array::from_fn(|i| base[i] + color_shift * dir[i]))
            .collect();
        Self {
            domain: Domain::Target,
            colors,
            brightness,
            noise_std,
            texture_amp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class ids, length `H·W`.
    pub label: Vec<u8>,
    pub seed: u64,
}

struct Canvas<'a> {
    labels: Vec<u8>,
    counts: Vec<usize>,
    quotas: Vec<usize>,
    spec: &'a SceneSpec,
}

impl Canvas<'_> {
    fn full(&self, class: usize) -> bool {
        self.counts[class] >= self.quotas[class]
    }

    /// Paints an unset in-bounds pixel if the class quota allows it.
    fn paint(&mut self, row: i64, col: i64, class: usize) -> bool {
        let (h, w) = (self.spec.height as i64, self.spec.width as i64);
        if row < 0 || col < 0 || row >= h || col >= w || self.full(class) {
            return false;
        }
        let k = (row * w + col) as usize;
        if self.labels[k] != UNSET {
            return false;
        }
        self.labels[k] = class as u8;
        self.counts[class] += 1;
        true
    }
}

fn class_of(spec: &SceneSpec, role: ClassRole) -> Option<usize> {
    (0..spec.classes()).find(|&c| spec.role(c) == role)
}

fn draw_labels(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let n = spec.pixels();
    let quotas = spec
        .profile
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            if c == 0 {
                return n;
            }
            let jitter = 1.0 + spec.quota_jitter * rng.random_range(-1.0..=1.0);
            ((p * jitter * n as f64).round() as usize).max(1)
        })
        .collect();
    let mut cv = Canvas {
        labels: vec![UNSET; n],
        counts: vec![0; spec.classes()],
        quotas,
        spec,
    };

    let road = class_of(spec, ClassRole::Road);
    let road_rows = road.map_or(0, |r| (cv.quotas[r] + w / 2) / w);
    let horizon = (h - road_rows).clamp(h / 2, h - 2) as i64;
    let hi = h as i64;
    let wi = w as i64;

    let mut pole_tops = Vec::new();
    if let Some(pole) = class_of(spec, ClassRole::Pole) {
        let mut attempts = 0;
        while !cv.full(pole) && attempts < 64 {
            attempts += 1;
            let thick = rng.random_range(1..=2);
            let col = rng.random_range(2..wi - 3);
            let height = rng.random_range(10..=(horizon - 6).max(11));
            let mut top = horizon;
            for row in (horizon - height..horizon).rev() {
                for dc in 0..thick {
                    cv.paint(row, col + dc, pole);
                }
                top = row;
                if cv.full(pole) {
                    break;
                }
            }
            pole_tops.push((top, col));
        }
    }
    if let Some(sign) = class_of(spec, ClassRole::Sign) {
        let mut spots: Vec<(i64, i64)> = pole_tops.iter().map(|&(t, c)| (t - 2, c)).collect();
        let mut attempts = 0;
        loop {
            if cv.full(sign) || attempts >= 64 {
                break;
            }
            attempts += 1;
            let (row, col) = spots.pop().unwrap_or_else(|| {
                (rng.random_range(2..horizon - 3), rng.random_range(1..wi - 2))
            });
            let (sh, sw) = (rng.random_range(2..=3), rng.random_range(2..=3));
            for dr in 0..sh {
                for dc in 0..sw {
                    cv.paint(row + dr - 1, col + dc - 1, sign);
                }
            }
        }
    }
    if let Some(fence) = class_of(spec, ClassRole::Fence) {
        let mut attempts = 0;
        while !cv.full(fence) && attempts < 64 {
            attempts += 1;
            let row = horizon - rng.random_range(1..=4);
            let len = rng.random_range(8..=20);
            let start = rng.random_range(0..wi - 4);
            for col in start..(start + len).min(wi) {
                cv.paint(row, col, fence);
            }
        }
    }
    if let Some(blob) = class_of(spec, ClassRole::RoadBlob) {
        let mut attempts = 0;
        while !cv.full(blob) && attempts < 64 {
            attempts += 1;
            let row = rng.random_range(horizon + 1..(hi - 1).max(horizon + 2));
            let col = rng.random_range(0..wi - 2);
            let (bh, bw) = (rng.random_range(2..=3), rng.random_range(2..=3));
            for dr in 0..bh {
                for dc in 0..bw {
                    cv.paint(row + dr, col + dc, blob);
                }
            }
        }
    }

    let mut ground = horizon;
    if let Some(road) = road {
        'fill: for row in (0..hi).rev() {
            for col in 0..wi {
                if cv.full(road) {
                    break 'fill;
                }
                if cv.paint(row, col, road) {
                    ground = ground.min(row);
                }
            }
        }
    }
    if let Some(building) = class_of(spec, ClassRole::Building) {
        let mut attempts = 0;
        while !cv.full(building) && attempts < 64 {
            attempts += 1;
            let bw = rng.random_range(5..=16);
            let bh = rng.random_range(8..=(ground - 4).max(9));
            let col = rng.random_range(-4..wi - 2);
            for row in (ground - bh..ground).rev() {
                for c in col..col + bw {
                    cv.paint(row, c, building);
                }
            }
        }
    }
    if let Some(veg) = class_of(spec, ClassRole::Vegetation) {
        let mut attempts = 0;
        while !cv.full(veg) && attempts < 256 {
            attempts += 1;
            let cr = ground - rng.random_range(1..=14);
            let cc = rng.random_range(0..wi);
            let ry = rng.random_range(2.0..5.0f64);
            let rx = rng.random_range(3.0..8.0f64);
            let (ri, ci) = (ry.ceil() as i64, rx.ceil() as i64);
            for row in cr - ri..=cr + ri {
                for col in cc - ci..=cc + ci {
                    let dy = (row - cr) as f64 / ry;
                    let dx = (col - cc) as f64 / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        cv.paint(row, col, veg);
                    }
                }
            }
        }
    }

    for v in cv.labels.iter_mut() {
        if *v == UNSET {
            *v = 0;
        }
    }
    cv.labels
}

fn render(spec: &SceneSpec, dom: &DomainConfig, labels: &[u8], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let c = spec.classes();
    let phases: Vec<(f32, f32, f32)> = (0..c)
        .map(|_| {
            (
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.3..1.2),
                rng.random_range(0.3..1.2),
            )
        })
        .collect();
    let noise = Normal::new(0.0f32, dom.noise_std.max(0.0)).expect("finite noise std");
    let mut data = Vec::with_capacity(spec.pixels() * 3);
    for row in 0..spec.height {
        for col in 0..spec.width {
            let class = labels[row * spec.width + col] as usize;
            let (phase, fy, fx) = phases[class];
            let texture = dom.texture_amp * (fy * row as f32 + fx * col as f32 + phase).sin();
            for ch in 0..3 {
                let v = dom.colors[class][ch] + dom.brightness + texture + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new([spec.height, spec.width, 3], data).expect("image buffer matches shape")
}

/// Draws one labelled image; deterministic in `(spec, dom, seed)`.
pub fn generate_sample(spec: &SceneSpec, dom: &DomainConfig, seed: u64) -> Sample {
    let mut label_rng = ChaCha8Rng::seed_from_u64(seed);
    let label = draw_labels(spec, &mut label_rng);
    let mut paint_rng = ChaCha8Rng::seed_from_u64(seed);
    paint_rng.set_stream(dom.domain.stream());
    let image = render(spec, dom, &label, &mut paint_rng);
    Sample { image, label, seed }
}

/// An in-memory copy of a pack file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPack {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl DatasetPack {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn generate(spec: &SceneSpec, dom: &DomainConfig, n: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if dom.colors.len() != spec.classes() {
            return Err(Error::Config(format!(
                "domain has {} colours for {} classes",
                dom.colors.len(),
                spec.classes()
            )));
        }
        Ok(Self {
            height: spec.height,
            width: spec.width,
            classes: spec.classes(),
            samples: (0..n)
                .map(|i| generate_sample(spec, dom, seed.wrapping_add(i as u64)))
                .collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = Vec::with_capacity(24);
        header.extend_from_slice(PACK_MAGIC);
        for v in [PACK_VERSION, self.len() as u32, self.height as u32, self.width as u32, self.classes as u32] {
            header.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&header).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(self.pixels() * 13);
        for s in &self.samples {
            buf.clear();
            for v in s.image.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&s.label);
            out.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a pack; record seeds are not stored and come back as the index.
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut header = [0u8; 24];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::format(path, "truncated header"))?;
        if &header[..4] != PACK_MAGIC {
            return Err(Error::format(path, "bad magic, expected FSEG"));
        }
        let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let version = field(0) as u32;
        if version != PACK_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let (n, height, width, classes) = (field(1), field(2), field(3), field(4));
        if height == 0 || width == 0 || classes == 0 || classes > 255 {
            return Err(Error::format(path, "degenerate dimensions"));
        }
        let pixels = height * width;
        let mut samples = Vec::with_capacity(n);
        let mut buf = vec![0u8; pixels * 13];
        for i in 0..n {
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::format(path, format!("truncated record {i}")))?;
            let image = buf[..pixels * 12]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let label = buf[pixels * 12..].to_vec();
            if let Some(&bad) = label.iter().find(|&&l| l as usize >= classes) {
                return Err(Error::format(path, format!("record {i} has label {bad}")));
            }
            samples.push(Sample {
                image: Tensor::new([height, width, 3], image)?,
                label,
                seed: i as u64,
            });
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after last record"));
        }
        Ok(Self {
            height,
            width,
            classes,
            samples,
        })
    }
}

/// Generates `n` samples with seeds `seed + i` and writes them to `path`.
pub fn generate_dataset(
    spec: &SceneSpec,
    dom: &DomainConfig,
    n: usize,
    seed: u64,
    path: &Path,
) -> Result<DatasetPack> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let pack = DatasetPack::generate(spec, dom, n, seed)?;
    pack.write(path)?;
    Ok(pack)
}

/// Byte size of a pack file holding `n` records.
pub fn pack_file_size(n: usize, height: usize, width: usize) -> usize {
    24 + n * height * width * 13
}

/// Exact pixel counts per class over all records.
pub fn pixel_class_histogram(pack: &DatasetPack) -> Vec<u64> {
    let mut counts = vec![0u64; pack.classes];
    for s in &pack.samples {
        for &l in &s.label {
            counts[l as usize] += 1;
        }
    }
    counts
}
