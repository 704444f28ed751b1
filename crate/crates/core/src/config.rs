//! Flat `key=value` run configuration shared by every command.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::cond::{CondNetConfig, CondTrainConfig, RegimeMix};
use crate::data::{DomainConfig, SceneSpec, DEFAULT_PROFILE};
use crate::error::{Error, Result};
use crate::segmenter::{ClassBalanceForm, SegmenterConfig};
use crate::trainer::{Ablation, SgdConfig, TrainConfig};

/// Seed offsets separating the label maps of the three generated packs.
pub const TARGET_SEED_OFFSET: u64 = 1_000_000;
pub const EVAL_SEED_OFFSET: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub profile: Vec<f64>,
    pub quota_jitter: f64,
    pub color_shift: f64,
    pub brightness: f64,
    pub target_noise: f64,
    pub target_texture: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondSection {
    pub grid: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mix: RegimeMix,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub size: usize,
    pub interval: usize,
    pub group_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub cond: CondSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cond_net = CondNetConfig::default();
        let cond_train = CondTrainConfig::default();
        Self {
            data: DataSection {
                height: 64,
                width: 64,
                classes: DEFAULT_PROFILE.len(),
                n_source: 400,
                n_target: 400,
                profile: DEFAULT_PROFILE.to_vec(),
                quota_jitter: 0.25,
                color_shift: 0.12,
                brightness: 0.06,
                target_noise: 0.07,
                target_texture: 0.06,
                seed: 0,
            },
            cond: CondSection {
                grid: cond_net.grid_h,
                depth: cond_net.depth,
                width: cond_net.dim,
                heads: cond_net.heads,
                steps: cond_train.steps,
                batch: cond_train.batch,
                lr: cond_train.lr,
                mix: cond_train.mix,
                seed: cond_train.seed,
            },
            train: TrainConfig::default(),
            eval: EvalSection { size: 64, interval: 250, group_threshold: 0.05 },
        }
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some((line, raw)) = self.map.remove(key) {
            *slot = raw
                .parse()
                .map_err(|_| Error::Config(format!("line {line}: cannot parse {key}={raw}")))?;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> Option<T>) -> Result<()> {
        if let Some((line, raw)) = self.map.remove(key) {
            *slot = parse(&raw).ok_or_else(|| Error::Config(format!("line {line}: invalid {key}={raw}")))?;
        }
        Ok(())
    }
}

fn float_list(raw: &str) -> Option<Vec<f64>> {
    raw.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Entries { map: BTreeMap::new() };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            let key = key.trim().to_string();
            if entries.map.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }

        let mut cfg = RunConfig::default();
        let e = &mut entries;
        let d = &mut cfg.data;
        e.take("data.height", &mut d.height)?;
        e.take("data.width", &mut d.width)?;
        e.take("data.classes", &mut d.classes)?;
        e.take("data.n_source", &mut d.n_source)?;
        e.take("data.n_target", &mut d.n_target)?;
        e.take_with("data.profile", &mut d.profile, float_list)?;
        e.take("data.quota_jitter", &mut d.quota_jitter)?;
        e.take("data.color_shift", &mut d.color_shift)?;
        e.take("data.brightness", &mut d.brightness)?;
        e.take("data.target_noise", &mut d.target_noise)?;
        e.take("data.target_texture", &mut d.target_texture)?;
        e.take("data.seed", &mut d.seed)?;

        let c = &mut cfg.cond;
        e.take("cond.grid", &mut c.grid)?;
        e.take("cond.depth", &mut c.depth)?;
        e.take("cond.width", &mut c.width)?;
        e.take("cond.heads", &mut c.heads)?;
        e.take("cond.steps", &mut c.steps)?;
        e.take("cond.batch", &mut c.batch)?;
        e.take("cond.lr", &mut c.lr)?;
        e.take_with("cond.mix", &mut c.mix, |raw| match float_list(raw)?.as_slice() {
            &[single, zero, multi] => Some(RegimeMix { single, zero, multi }),
            _ => None,
        })?;
        e.take("cond.seed", &mut c.seed)?;

        let t = &mut cfg.train;
        e.take("train.lr", &mut t.sgd.lr)?;
        e.take("train.momentum", &mut t.sgd.momentum)?;
        e.take("train.weight_decay", &mut t.sgd.weight_decay)?;
        e.take("train.batch", &mut t.batch)?;
        e.take("train.steps", &mut t.steps)?;
        e.take("train.seed", &mut t.seed)?;
        e.take("train.lambda_t", &mut t.lambda_t)?;
        e.take("train.lambda_class", &mut t.lambda_class)?;
        e.take("train.lambda_cond", &mut t.lambda_cond)?;
        e.take("train.lambda_reg", &mut t.lambda_reg)?;
        e.take_with("train.class_form", &mut t.class_form, ClassBalanceForm::parse)?;
        e.take("train.tau", &mut t.tau)?;
        e.take("train.anchors", &mut t.anchors)?;
        e.take_with("train.ablation", &mut t.ablation, Ablation::parse)?;

        let v = &mut cfg.eval;
        e.take("eval.size", &mut v.size)?;
        e.take("eval.interval", &mut v.interval)?;
        e.take("eval.group_threshold", &mut v.group_threshold)?;

        if let Some((key, (line, _))) = entries.map.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {key}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.profile.len() != d.classes {
            return Err(Error::Config(format!(
                "data.profile has {} entries for data.classes={}",
                d.profile.len(),
                d.classes
            )));
        }
        if d.n_source == 0 || d.n_target == 0 || self.eval.size == 0 {
            return Err(Error::Config("pack sizes must be positive".into()));
        }
        self.scene_spec().validate()?;
        self.segmenter_config().validate()?;
        self.cond_config().validate()?;
        self.cond.mix.validate()?;
        if self.cond.batch == 0 || !(self.cond.lr > 0.0) {
            return Err(Error::Config("cond.batch and cond.lr must be positive".into()));
        }
        if d.height % self.cond.grid != 0 || d.width % self.cond.grid != 0 || d.height != d.width {
            return Err(Error::Config(format!(
                "cond.grid={} must divide a square {}x{} image",
                self.cond.grid, d.height, d.width
            )));
        }
        if !(self.eval.group_threshold > 0.0 && self.eval.group_threshold < 1.0) {
            return Err(Error::Config("eval.group_threshold outside (0, 1)".into()));
        }
        self.train.validate()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            height: self.data.height,
            width: self.data.width,
            profile: self.data.profile.clone(),
            quota_jitter: self.data.quota_jitter,
        }
    }

    pub fn source_domain(&self) -> DomainConfig {
        DomainConfig::source(self.data.classes)
    }

    pub fn target_domain(&self) -> DomainConfig {
        let d = &self.data;
        DomainConfig::shifted(
            d.classes,
            d.color_shift as f32,
            d.brightness as f32,
            d.target_noise as f32,
            d.target_texture as f32,
        )
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            height: self.data.height,
            width: self.data.width,
            classes: self.data.classes,
            ..SegmenterConfig::default()
        }
    }

    pub fn cond_config(&self) -> CondNetConfig {
        CondNetConfig {
            grid_h: self.cond.grid,
            grid_w: self.cond.grid,
            classes: self.data.classes,
            dim: self.cond.width,
            depth: self.cond.depth,
            heads: self.cond.heads,
        }
    }

    pub fn cond_train(&self) -> CondTrainConfig {
        CondTrainConfig {
            steps: self.cond.steps,
            batch: self.cond.batch,
            lr: self.cond.lr,
            seed: self.cond.seed,
            mix: self.cond.mix,
        }
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let c = &self.cond;
        let t = &self.train;
        let SgdConfig { lr, momentum, weight_decay } = t.sgd;
        let v = &self.eval;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k}={v}").unwrap();
        put("data.height", d.height.to_string());
        put("data.width", d.width.to_string());
        put("data.classes", d.classes.to_string());
        put("data.n_source", d.n_source.to_string());
        put("data.n_target", d.n_target.to_string());
        put("data.profile", join(&d.profile));
        put("data.quota_jitter", d.quota_jitter.to_string());
        put("data.color_shift", d.color_shift.to_string());
        put("data.brightness", d.brightness.to_string());
        put("data.target_noise", d.target_noise.to_string());
        put("data.target_texture", d.target_texture.to_string());
        put("data.seed", d.seed.to_string());
        put("cond.grid", c.grid.to_string());
        put("cond.depth", c.depth.to_string());
        put("cond.width", c.width.to_string());
        put("cond.heads", c.heads.to_string());
        put("cond.steps", c.steps.to_string());
        put("cond.batch", c.batch.to_string());
        put("cond.lr", c.lr.to_string());
        put("cond.mix", join(&[c.mix.single, c.mix.zero, c.mix.multi]));
        put("cond.seed", c.seed.to_string());
        put("train.lr", lr.to_string());
        put("train.momentum", momentum.to_string());
        put("train.weight_decay", weight_decay.to_string());
        put("train.batch", t.batch.to_string());
        put("train.steps", t.steps.to_string());
        put("train.seed", t.seed.to_string());
        put("train.lambda_t", t.lambda_t.to_string());
        put("train.lambda_class", t.lambda_class.to_string());
        put("train.lambda_cond", t.lambda_cond.to_string());
        put("train.lambda_reg", t.lambda_reg.to_string());
        put("train.class_form", t.class_form.name().to_string());
        put("train.tau", t.tau.to_string());
        put("train.anchors", t.anchors.to_string());
        put("train.ablation", t.ablation.name().to_string());
        put("eval.size", v.size.to_string());
        put("eval.interval", v.interval.to_string());
        put("eval.group_threshold", v.group_threshold.to_string());
        out
    }
}
