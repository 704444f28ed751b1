//! The segmentation network and its per-pixel losses.
//!
//! Pixels travel as rows of a `[B·H·W × channels]` matrix in `(image, row,
//! column)` order. The encoder folds 2×2 patches twice (H/4 × W/4 tokens),
//! mixes each token with its 3×3 neighbourhood, and runs a short transformer
//! over the token grid. The decoder sums linear read-outs of the tokens, the
//! first stage and the raw colour at full resolution, and a direct colour
//! path adds straight into the logits.

use rand::Rng;

use crate::autodiff::{CeTarget, Grid, Tape, Var};
use crate::class_stats::{class_weights, log_ratio, ClassDistribution};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{
    transformer_forward, Bound, Initializer, LayerNormLayer, LinearLayer, NetworkParams,
    TransformerBlock, INIT_STD,
};
use crate::tensor::{Scalar, Tensor};

/// Name prefix of every segmenter tensor.
pub const SEG_PREFIX: &str = "seg.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmenterConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub stem_dim: usize,
    pub mid_dim: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub decoder_dim: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 8,
            stem_dim: 16,
            mid_dim: 48,
            token_dim: 64,
            heads: 4,
            depth: 2,
            decoder_dim: 32,
        }
    }
}

impl SegmenterConfig {
    pub fn token_grid(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "segmenter input {}x{} must be a positive multiple of 4",
                self.height, self.width
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("segmenter needs at least two classes".into()));
        }
        let dims = [self.stem_dim, self.mid_dim, self.token_dim, self.decoder_dim, self.heads];
        if dims.contains(&0) || self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "segmenter dims {dims:?} invalid (token dim must split over heads)"
            )));
        }
        Ok(())
    }
}

/// Layer handles into a [`NetworkParams`] holding the segmenter weights.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    stem: LinearLayer,
    mid: LinearLayer,
    mix: LinearLayer,
    pos: usize,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNormLayer,
    dec_tokens: LinearLayer,
    dec_stem: LinearLayer,
    dec_rgb: LinearLayer,
    head: LinearLayer,
    skip: LinearLayer,
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Segmenter {
    pub fn init<T: Scalar, R: Rng>(
        config: SegmenterConfig,
        params: &mut NetworkParams<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (gh, gw) = c.token_grid();
        let mut init = Initializer { params, rng };
        let stem = LinearLayer::init(&mut init, "seg.stem", 12, c.stem_dim, fan_in_std(12))?;
        let mid_in = 4 * c.stem_dim;
        let mid = LinearLayer::init(&mut init, "seg.mid", mid_in, c.mid_dim, fan_in_std(mid_in))?;
        let mix_in = 9 * c.mid_dim;
        let mix = LinearLayer::init(&mut init, "seg.mix", mix_in, c.token_dim, fan_in_std(mix_in))?;
        let pos = init.normal("seg.pos", &[gh * gw, c.token_dim], INIT_STD)?;
        let blocks = (0..c.depth)
            .map(|l| TransformerBlock::init(&mut init, &format!("seg.block{l}"), c.token_dim, c.heads, c.depth))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNormLayer::init(&mut init, "seg.ln_out", c.token_dim)?;
        let d = c.decoder_dim;
        let dec_tokens = LinearLayer::init(&mut init, "seg.dec_tokens", c.token_dim, d, fan_in_std(c.token_dim))?;
        let dec_stem = LinearLayer::init(&mut init, "seg.dec_stem", c.stem_dim, d, fan_in_std(c.stem_dim))?;
        let dec_rgb = LinearLayer::init(&mut init, "seg.dec_rgb", 3, d, fan_in_std(3))?;
        let head = LinearLayer::init(&mut init, "seg.head", d, c.classes, fan_in_std(d))?;
        let skip = LinearLayer::init(&mut init, "seg.skip", 3, c.classes, INIT_STD)?;
        Ok(Self {
            config,
            stem,
            mid,
            mix,
            pos,
            blocks,
            ln_out,
            dec_tokens,
            dec_stem,
            dec_rgb,
            head,
            skip,
        })
    }

    /// Re-attaches to weights created by [`Segmenter::init`] (e.g. after loading).
    pub fn find<T: Scalar>(config: SegmenterConfig, params: &NetworkParams<T>) -> Result<Self> {
        config.validate()?;
        let pos = params
            .position("seg.pos")
            .ok_or_else(|| Error::contract("missing seg.pos"))?;
        let (gh, gw) = config.token_grid();
        if params.at(pos).shape() != [gh * gw, config.token_dim] {
            return Err(Error::shape("segmenter", "position table mismatches config"));
        }
        let blocks = (0..config.depth)
            .map(|l| TransformerBlock::find(params, &format!("seg.block{l}"), config.heads))
            .collect::<Result<Vec<_>>>()?;
        let seg = Self {
            config,
            stem: LinearLayer::find(params, "seg.stem")?,
            mid: LinearLayer::find(params, "seg.mid")?,
            mix: LinearLayer::find(params, "seg.mix")?,
            pos,
            blocks,
            ln_out: LayerNormLayer::find(params, "seg.ln_out")?,
            dec_tokens: LinearLayer::find(params, "seg.dec_tokens")?,
            dec_stem: LinearLayer::find(params, "seg.dec_stem")?,
            dec_rgb: LinearLayer::find(params, "seg.dec_rgb")?,
            head: LinearLayer::find(params, "seg.head")?,
            skip: LinearLayer::find(params, "seg.skip")?,
        };
        let expect = [
            (seg.stem, 12, config.stem_dim),
            (seg.mid, 4 * config.stem_dim, config.mid_dim),
            (seg.mix, 9 * config.mid_dim, config.token_dim),
            (seg.dec_tokens, config.token_dim, config.decoder_dim),
            (seg.dec_stem, config.stem_dim, config.decoder_dim),
            (seg.dec_rgb, 3, config.decoder_dim),
            (seg.head, config.decoder_dim, config.classes),
            (seg.skip, 3, config.classes),
        ];
        if expect.iter().any(|(l, i, o)| l.in_dim != *i || l.out_dim != *o) {
            return Err(Error::shape("segmenter", "layer sizes mismatch config"));
        }
        Ok(seg)
    }

    /// Per-pixel logits `[B·H·W × C]` for `images` laid out `[B·H·W × 3]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Result<Var> {
        let c = &self.config;
        let rows = tape.value(images).rows();
        if tape.value(images).cols() != 3 || rows % c.pixels() != 0 || rows == 0 {
            return Err(Error::shape(
                "seg_forward",
                format!("images {:?} for {}x{} RGB", tape.value(images).shape(), c.height, c.width),
            ));
        }
        let batch = rows / c.pixels();
        let (gh, gw) = c.token_grid();
        let full = Grid::new(batch, c.height, c.width);
        let half = Grid::new(batch, c.height / 2, c.width / 2);
        let quarter = Grid::new(batch, gh, gw);

        let x = tape.space_to_depth(images, full, 2)?;
        let x = self.stem.forward(tape, p, x)?;
        let stem = tape.gelu(x);
        let x = tape.space_to_depth(stem, half, 2)?;
        let x = self.mid.forward(tape, p, x)?;
        let x = tape.gelu(x);
        let x = tape.neighborhood3(x, quarter)?;
        let x = self.mix.forward(tape, p, x)?;
        let seq = gh * gw;
        let pos = tape.gather_rows(p.var(self.pos), (0..batch * seq).map(|r| r % seq).collect())?;
        let x = tape.add(x, pos)?;
        let x = transformer_forward(&self.blocks, tape, p, x, seq)?;
        let tokens = self.ln_out.forward(tape, p, x)?;

        let t = self.dec_tokens.forward(tape, p, tokens)?;
        let t = tape.upsample(t, quarter, 4)?;
        let s = self.dec_stem.forward(tape, p, stem)?;
        let s = tape.upsample(s, half, 2)?;
        let r = self.dec_rgb.forward(tape, p, images)?;
        let h = tape.add(t, s)?;
        let h = tape.add(h, r)?;
        let h = tape.gelu(h);
        let logits = self.head.forward(tape, p, h)?;
        let direct = self.skip.forward(tape, p, images)?;
        tape.add(logits, direct)
    }

    /// Indices of the direct colour-to-logit layer (weight, bias).
    pub fn skip_indices(&self) -> (usize, usize) {
        (self.skip.weight_index(), self.skip.bias_index())
    }

    /// Indices of the decoder head (weight, bias).
    pub fn head_indices(&self) -> (usize, usize) {
        (self.head.weight_index(), self.head.bias_index())
    }
}

/// Stacks sample images into the `[B·H·W × 3]` pixel-row layout.
pub fn stack_images<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("empty image batch"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("stack_images", "images differ in size"));
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    let rows = data.len() / 3;
    Tensor::new([rows, 3], data)
}

pub fn stack_labels(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.label.iter().copied()).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub logits: Var,
    pub probs: Var,
}

impl Prediction {
    pub fn from_logits<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Self> {
        let probs = tape.softmax(logits)?;
        Ok(Self { logits, probs })
    }

    pub fn hard<T: Scalar>(&self, tape: &Tape<T>) -> Vec<u8> {
        predict_labels(tape.value(self.logits))
    }
}

pub fn seg_forward<T: Scalar>(
    seg: &Segmenter,
    tape: &mut Tape<T>,
    p: &Bound,
    images: Var,
) -> Result<Prediction> {
    let logits = seg.forward(tape, p, images)?;
    Prediction::from_logits(tape, logits)
}

/// Row-wise argmax with ties going to the lowest class id.
pub fn predict_labels<T: Scalar>(scores: &Tensor<T>) -> Vec<u8> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn check_labels(labels: &[u8], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(
            "segmentation loss",
            format!("{} labels for {rows} pixels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Index {
            what: "class id",
            index: bad as usize,
            bound: classes,
        });
    }
    Ok(())
}

/// Mean per-pixel cross-entropy against ground truth.
pub fn loss_supervised<T: Scalar>(tape: &mut Tape<T>, pred: &Prediction, labels: &[u8]) -> Result<Var> {
    let shape = tape.value(pred.logits).shape().to_vec();
    check_labels(labels, shape[0], shape[1])?;
    let targets = labels.iter().map(|&l| l as usize).collect();
    tape.cross_entropy(pred.logits, CeTarget::Index(targets), None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
    pub tau: f64,
}

impl PseudoLabels {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Hard labels where the top probability reaches `tau`.
pub fn pseudo_labels<T: Scalar>(probs: &Tensor<T>, tau: f64) -> Result<PseudoLabels> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("pseudo-label threshold {tau} outside (0, 1)")));
    }
    let labels = predict_labels(probs);
    let valid = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| probs.row(r)[l as usize].to_f64() >= tau)
        .collect();
    Ok(PseudoLabels { labels, valid, tau })
}

/// Cross-entropy with per-pixel weights, averaged over the pixels in `valid`.
fn masked_weighted_ce<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
    valid: Option<&[bool]>,
    class_weight: Option<&[f64]>,
) -> Result<Var> {
    let rows = tape.value(logits).rows();
    check_labels(labels, rows, tape.value(logits).cols())?;
    let keep = |r: usize| valid.is_none_or(|v| v[r]);
    let count = (0..rows).filter(|&r| keep(r)).count();
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let scale = rows as f64 / count as f64;
    let weights = (0..rows)
        .map(|r| {
            if !keep(r) {
                return T::zero();
            }
            let w = class_weight.map_or(1.0, |cw| cw[labels[r] as usize]);
            T::from_f64(w * scale)
        })
        .collect();
    let targets = labels.iter().map(|&l| l as usize).collect();
    tape.cross_entropy(logits, CeTarget::Index(targets), Some(weights))
}

/// Mean cross-entropy over confident pixels; zero when none are confident.
pub fn loss_selftrain<T: Scalar>(tape: &mut Tape<T>, pred: &Prediction, pseudo: &PseudoLabels) -> Result<Var> {
    if pseudo.valid.len() != pseudo.labels.len() {
        return Err(Error::shape("loss_selftrain", "mask and labels differ in length"));
    }
    masked_weighted_ce(tape, pred.logits, &pseudo.labels, Some(&pseudo.valid), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassBalanceForm {
    /// Cross-entropy weighted by `w(label) = 1 / (C·p(label))`.
    WeightCe,
    /// `(1/N) Σ_k Σ_c probs(k,c)·[ln p(c) − ln p'(c)]`.
    MarginalReg,
}

impl ClassBalanceForm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weightCE" | "weight_ce" => Some(Self::WeightCe),
            "marginalReg" | "marginal_reg" => Some(Self::MarginalReg),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::WeightCe => "weightCE",
            Self::MarginalReg => "marginalReg",
        }
    }
}

/// Labels feeding the class-balance term.
#[derive(Debug, Clone, Copy)]
pub enum ClassLabels<'a> {
    Truth(&'a [u8]),
    Pseudo(&'a PseudoLabels),
    Unlabelled,
}

pub fn loss_class_balance<T: Scalar>(
    tape: &mut Tape<T>,
    pred: &Prediction,
    labels: ClassLabels<'_>,
    dist: &ClassDistribution,
    form: ClassBalanceForm,
) -> Result<Var> {
    let classes = tape.value(pred.logits).cols();
    if dist.classes() != classes {
        return Err(Error::shape(
            "loss_class_balance",
            format!("distribution over {} classes for {classes} logits", dist.classes()),
        ));
    }
    match form {
        ClassBalanceForm::WeightCe => {
            let w = class_weights(dist);
            match labels {
                ClassLabels::Truth(l) => masked_weighted_ce(tape, pred.logits, l, None, Some(&w)),
                ClassLabels::Pseudo(ps) => {
                    masked_weighted_ce(tape, pred.logits, &ps.labels, Some(&ps.valid), Some(&w))
                }
                ClassLabels::Unlabelled => Err(Error::contract("weightCE requires labels")),
            }
        }
        ClassBalanceForm::MarginalReg => {
            let coeff: Vec<T> = log_ratio(dist).iter().map(|&v| T::from_f64(-v)).collect();
            let coeff = tape.constant(Tensor::new([classes, 1], coeff)?);
            let per_pixel = tape.matmul(pred.probs, coeff)?;
            Ok(tape.mean(per_pixel))
        }
    }
}
