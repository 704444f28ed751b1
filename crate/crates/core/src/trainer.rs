//! Optimisers, the adaptation training step and loop, per-class gradient
//! analysis and checkpoints.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::checkpoint::{Checkpoint, RngState};
use crate::class_stats::{ClassDistribution, GroupSplit};
use crate::cond::{loss_cond_structure, CondNet, CondNetConfig, CONDNET_PREFIX};
use crate::data::{DatasetPack, Sample};
use crate::error::{Error, Result};
use crate::metrics::{fairness_report, ClassLossAccumulator, ConfusionMatrix, FairnessReport};
use crate::nn::{Bound, NetworkParams};
use crate::segmenter::{
    loss_class_balance, loss_selftrain, loss_supervised, predict_labels, pseudo_labels,
    seg_forward, stack_images, stack_labels, ClassBalanceForm, ClassLabels, Prediction,
    Segmenter, SegmenterConfig, SEG_PREFIX,
};
use crate::tensor::{Scalar, Tensor};

/// Gradients for every tensor of a bound collection, zeros where the loss
/// did not reach.
pub fn collect_grads<T: Scalar>(grads: &Gradients<T>, bound: &Bound) -> Vec<Tensor<T>> {
    bound.vars().iter().map(|&v| grads.get(v)).collect()
}

fn check_grads<T: Scalar>(params: &NetworkParams<T>, grads: &[Tensor<T>], what: &str) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape(
            "optimizer",
            format!("{} gradients for {} {what} tensors", grads.len(), params.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.at(i).shape() {
            return Err(Error::shape(
                "optimizer",
                format!("gradient {:?} for {} {:?}", g.shape(), params.name(i), params.at(i).shape()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// `v ← momentum·v + g + weight_decay·w`, then `w ← w − lr·v`.
pub fn sgd_update<T: Scalar>(
    params: &mut NetworkParams<T>,
    grads: &[Tensor<T>],
    buffers: &mut NetworkParams<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    check_grads(params, grads, "parameter")?;
    params.check_compatible(buffers)?;
    let (lr, mu, wd) = (T::from_f64(cfg.lr), T::from_f64(cfg.momentum), T::from_f64(cfg.weight_decay));
    for (i, g) in grads.iter().enumerate() {
        let w = params.at_mut(i).data_mut();
        let v = buffers.at_mut(i).data_mut();
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Adam with bias correction; used for the structure network.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: NetworkParams<T>,
    second: NetworkParams<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &NetworkParams<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut NetworkParams<T>, grads: &[Tensor<T>]) -> Result<()> {
        check_grads(params, grads, "parameter")?;
        params.check_compatible(&self.first)?;
        self.step += 1;
        let t = self.step as i32;
        let step = self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one, eps, step) = (T::one(), T::from_f64(self.eps), T::from_f64(step));
        for (i, g) in grads.iter().enumerate() {
            let w = params.at_mut(i).data_mut();
            let m = self.first.at_mut(i).data_mut();
            let v = self.second.at_mut(i).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Supervised and self-training losses only.
    A,
    /// Adds the class-balance term.
    B,
    /// Adds the class-balance and structural terms.
    C,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Self::A),
            "B" | "b" => Some(Self::B),
            "C" | "c" => Some(Self::C),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::C => "C",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub lambda_t: f64,
    pub lambda_class: f64,
    pub lambda_cond: f64,
    pub lambda_reg: f64,
    pub class_form: ClassBalanceForm,
    pub tau: f64,
    pub anchors: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            batch: 4,
            steps: 1000,
            seed: 0,
            lambda_t: 1.0,
            lambda_class: 1.0,
            lambda_cond: 0.03,
            lambda_reg: 0.1,
            class_form: ClassBalanceForm::WeightCe,
            tau: 0.9,
            anchors: 4,
            ablation: Ablation::C,
        }
    }
}

/// Loss weights after applying the ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub target: f64,
    /// Multiplier of the reported class-balance component.
    pub class: f64,
    pub cond: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("train.tau {} outside (0, 1)", self.tau)));
        }
        let lambdas = [self.lambda_t, self.lambda_class, self.lambda_cond, self.lambda_reg];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights {lambdas:?} must be finite and nonnegative")));
        }
        if self.sgd.lr <= 0.0 || !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimiser settings {:?}", self.sgd)));
        }
        let class_on = match self.class_form {
            ClassBalanceForm::WeightCe => self.lambda_class > 0.0,
            ClassBalanceForm::MarginalReg => self.lambda_class > 0.0 && self.lambda_reg > 0.0,
        };
        match self.ablation {
            Ablation::A => {}
            Ablation::B if !class_on => {
                return Err(Error::Config("ablation B needs a positive class-balance weight".into()));
            }
            Ablation::C if !class_on || self.lambda_cond <= 0.0 => {
                return Err(Error::Config("ablation C needs positive class-balance and structure weights".into()));
            }
            Ablation::C if self.anchors == 0 => {
                return Err(Error::Config("ablation C needs at least one anchor".into()));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        let class = match self.class_form {
            ClassBalanceForm::WeightCe => self.lambda_class,
            ClassBalanceForm::MarginalReg => self.lambda_reg,
        };
        match self.ablation {
            Ablation::A => LossWeights { target: self.lambda_t, class: 0.0, cond: 0.0 },
            Ablation::B => LossWeights { target: self.lambda_t, class, cond: 0.0 },
            Ablation::C => LossWeights { target: self.lambda_t, class, cond: self.lambda_cond },
        }
    }
}

/// Unweighted loss components of one step.
///
/// With the weightCE form the class component is the weighted cross-entropy
/// minus the plain cross-entropy (source and target summed). The weighted
/// sum of components equals the optimised objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub selftrain: f64,
    pub class_balance: f64,
    pub cond: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.supervised + w.target * self.selftrain + w.class * self.class_balance + w.cond * self.cond
    }

    fn accumulate(&mut self, other: &Self) {
        self.total += other.total;
        self.supervised += other.supervised;
        self.selftrain += other.selftrain;
        self.class_balance += other.class_balance;
        self.cond += other.cond;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            total: self.total * s,
            supervised: self.supervised * s,
            selftrain: self.selftrain * s,
            class_balance: self.class_balance * s,
            cond: self.cond * s,
        }
    }
}

/// A frozen structure network bound into training.
#[derive(Debug, Clone)]
pub struct FrozenCond {
    pub net: CondNet,
    pub params: NetworkParams<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub seg: Segmenter,
    pub params: NetworkParams<f32>,
    pub momentum: NetworkParams<f32>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub cond: Option<FrozenCond>,
}

impl TrainState {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetworkParams::new();
        let seg = Segmenter::init(config, &mut params, &mut rng)?;
        let momentum = params.zeros_like();
        Ok(Self { seg, params, momentum, step: 0, rng, cond: None })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBreakdown,
    /// Normalised per-class gradient magnitude on the source logits.
    pub grad_per_class: Vec<f64>,
    pub pseudo_valid: usize,
}

fn per_class_magnitude(grad: &Tensor<f32>) -> Vec<f64> {
    let c = grad.cols();
    let mut sums = vec![0.0f64; c];
    for r in 0..grad.rows() {
        for (s, &g) in sums.iter_mut().zip(grad.row(r)) {
            *s += (g as f64).abs();
        }
    }
    let total: f64 = sums.iter().sum();
    if total > 0.0 {
        sums.iter_mut().for_each(|s| *s /= total);
    }
    sums
}

fn value(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item().to_f64()
}

/// Source objective and its class component for one labelled prediction.
fn source_terms(
    tape: &mut Tape<f32>,
    pred: &Prediction,
    labels: &[u8],
    cfg: &TrainConfig,
    weights: &LossWeights,
    dist: &ClassDistribution,
) -> Result<(Var, f64, f64)> {
    let plain = loss_supervised(tape, pred, labels)?;
    let plain_value = value(tape, plain);
    if weights.class == 0.0 {
        return Ok((plain, plain_value, 0.0));
    }
    let class = loss_class_balance(tape, pred, ClassLabels::Truth(labels), dist, cfg.class_form)?;
    match cfg.class_form {
        ClassBalanceForm::WeightCe => {
            let diff = tape.sub(class, plain)?;
            let scaled = tape.scale(diff, weights.class as f32);
            let obj = tape.add(plain, scaled)?;
            Ok((obj, plain_value, value(tape, class) - plain_value))
        }
        ClassBalanceForm::MarginalReg => {
            let scaled = tape.scale(class, weights.class as f32);
            let obj = tape.add(plain, scaled)?;
            Ok((obj, plain_value, value(tape, class)))
        }
    }
}

/// One optimisation step on a source batch and an optional target batch.
///
/// Non-finite values anywhere in the step surface as [`Error::Divergence`].
pub fn train_step(
    state: &mut TrainState,
    source: &[&Sample],
    target: &[&Sample],
    cfg: &TrainConfig,
    dist: &ClassDistribution,
) -> Result<StepOutcome> {
    let step = state.step;
    step_inner(state, source, target, cfg, dist).map_err(|e| match e {
        Error::NonFinite(what) => Error::Divergence { step, detail: format!("non-finite value in {what}") },
        other => other,
    })
}

fn step_inner(
    state: &mut TrainState,
    source: &[&Sample],
    target: &[&Sample],
    cfg: &TrainConfig,
    dist: &ClassDistribution,
) -> Result<StepOutcome> {
    let w = cfg.weights();
    let hw = (state.seg.config.height, state.seg.config.width);
    if w.cond > 0.0 && state.cond.is_none() {
        return Err(Error::Config("structure loss enabled without a structure network".into()));
    }
    let mut tape = Tape::new();
    let p = state.params.bind(&mut tape, true);
    let frozen = match (&state.cond, w.cond > 0.0) {
        (Some(fc), true) => Some((fc, fc.params.bind(&mut tape, false))),
        _ => None,
    };

    let images = tape.constant(stack_images(source)?);
    let pred_s = seg_forward(&state.seg, &mut tape, &p, images)?;
    let labels = stack_labels(source);
    let (mut total, supervised, mut class_balance) = source_terms(&mut tape, &pred_s, &labels, cfg, &w, dist)?;
    let mut breakdown = LossBreakdown { supervised, class_balance, ..Default::default() };
    let mut pseudo_valid = 0;

    let use_target = !target.is_empty() && (w.target > 0.0 || w.class > 0.0 || w.cond > 0.0);
    let mut pred_t = None;
    if use_target {
        let images = tape.constant(stack_images(target)?);
        let pred = seg_forward(&state.seg, &mut tape, &p, images)?;
        let pseudo = pseudo_labels(tape.value(pred.probs), cfg.tau)?;
        pseudo_valid = pseudo.valid_count();
        let self_loss = loss_selftrain(&mut tape, &pred, &pseudo)?;
        breakdown.selftrain = value(&tape, self_loss);
        if w.target > 0.0 {
            let scaled = tape.scale(self_loss, w.target as f32);
            total = tape.add(total, scaled)?;
        }
        if w.class > 0.0 {
            let class = loss_class_balance(&mut tape, &pred, ClassLabels::Pseudo(&pseudo), dist, cfg.class_form)?;
            let (term, reported) = match cfg.class_form {
                ClassBalanceForm::WeightCe => {
                    (tape.sub(class, self_loss)?, value(&tape, class) - breakdown.selftrain)
                }
                ClassBalanceForm::MarginalReg => (class, value(&tape, class)),
            };
            class_balance += reported;
            let scaled = tape.scale(term, w.class as f32);
            total = tape.add(total, scaled)?;
        }
        pred_t = Some(pred);
    }
    breakdown.class_balance = class_balance;

    if let Some((fc, gp)) = &frozen {
        let mut cond_total = 0.0;
        for pred in std::iter::once(pred_s).chain(pred_t) {
            let cond = loss_cond_structure(&fc.net, &mut tape, gp, pred.probs, hw, cfg.anchors, &mut state.rng)?;
            cond_total += value(&tape, cond);
            let scaled = tape.scale(cond, w.cond as f32);
            total = tape.add(total, scaled)?;
        }
        breakdown.cond = cond_total;
    }

    breakdown.total = value(&tape, total);
    if !breakdown.total.is_finite() {
        return Err(Error::Divergence {
            step: state.step,
            detail: format!("non-finite loss, components {breakdown:?}"),
        });
    }
    let grads = tape.backward(total)?;
    let grad_per_class = per_class_magnitude(&grads.get(pred_s.logits));
    sgd_update(&mut state.params, &collect_grads(&grads, &p), &mut state.momentum, &cfg.sgd)?;
    if !state.params.all_finite() {
        return Err(Error::Divergence { step: state.step, detail: "non-finite segmenter weights".into() });
    }
    state.step += 1;
    Ok(StepOutcome { losses: breakdown, grad_per_class, pseudo_valid })
}

/// Normalised mean `|∂loss/∂logit_c|` over the pixels of a labelled batch.
///
/// The loss is plain cross-entropy when `class_weight` is zero, otherwise the
/// configured class-balanced source objective.
pub fn grad_per_class(
    seg: &Segmenter,
    params: &NetworkParams<f32>,
    batch: &[&Sample],
    cfg: &TrainConfig,
    dist: &ClassDistribution,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::contract("gradient report needs a non-empty batch"));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let images = tape.constant(stack_images(batch)?);
    let logits = seg.forward(&mut tape, &p, images)?;
    // Re-register the logits as a leaf so only the loss head is differentiated.
    let logits = tape.param(tape.value(logits).clone());
    let pred = Prediction::from_logits(&mut tape, logits)?;
    let (loss, _, _) = source_terms(&mut tape, &pred, &stack_labels(batch), cfg, &cfg.weights(), dist)?;
    let grads = tape.backward(loss)?;
    Ok(per_class_magnitude(&grads.get(logits)))
}

/// Forward-only evaluation of a segmenter on a labelled pack.
pub fn evaluate(
    seg: &Segmenter,
    params: &NetworkParams<f32>,
    samples: &[Sample],
    groups: &GroupSplit,
) -> Result<FairnessReport> {
    let classes = seg.config.classes;
    let mut cm = ConfusionMatrix::new(classes);
    let mut losses = ClassLossAccumulator::new(classes);
    for chunk in samples.chunks(8) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let images = tape.constant(stack_images(&refs)?);
        let logits = seg.forward(&mut tape, &p, images)?;
        let logp = tape.log_softmax(logits)?;
        let logp = tape.value(logp);
        let labels = stack_labels(&refs);
        cm.update(&predict_labels(logp), &labels)?;
        for (r, &l) in labels.iter().enumerate() {
            losses.add(l as usize, -(logp.row(r)[l as usize] as f64));
        }
    }
    fairness_report(&cm, &losses, groups)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean components since the previous row; NaN before any step.
    pub losses: LossBreakdown,
    pub report: FairnessReport,
}

pub fn metrics_header(classes: usize) -> String {
    let mut h = String::from(
        "step,loss_total,loss_s,loss_t,loss_class,loss_cond,miou,miou_majority,miou_minority,iou_std,fairness_gap",
    );
    for c in 0..classes {
        write!(h, ",iou_class_{c}").unwrap();
    }
    h
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        let r = &self.report;
        let mut line = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            l.total,
            l.supervised,
            l.selftrain,
            l.class_balance,
            l.cond,
            r.iou.miou,
            r.iou.miou_majority,
            r.iou.miou_minority,
            r.iou.iou_std,
            r.fairness_gap
        );
        for v in &r.iou.iou {
            match v {
                Some(v) => write!(line, ",{v}").unwrap(),
                None => line.push_str(",nan"),
            }
        }
        line
    }
}

pub fn metrics_csv(rows: &[MetricsRow], classes: usize) -> String {
    let mut out = metrics_header(classes);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct LoopData<'a> {
    pub source: &'a DatasetPack,
    pub target: Option<&'a DatasetPack>,
    pub eval: &'a [Sample],
    pub dist: &'a ClassDistribution,
    pub groups: &'a GroupSplit,
    pub eval_interval: usize,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub rows: Vec<MetricsRow>,
    /// Per-step normalised source-logit gradient magnitudes.
    pub grad_history: Vec<Vec<f64>>,
}

/// Runs `cfg.steps` steps with evaluation at step 0, every
/// `eval_interval` steps and at the end.
pub fn train_loop(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &LoopData<'_>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<LoopOutcome> {
    cfg.validate()?;
    if data.source.is_empty() || data.eval.is_empty() {
        return Err(Error::contract("training needs source samples and an evaluation split"));
    }
    if cfg.weights().cond > 0.0 && state.cond.is_none() {
        return Err(Error::Config("ablation C requires a pretrained structure network".into()));
    }
    let mut rows = Vec::new();
    let mut grad_history = Vec::with_capacity(cfg.steps);
    let mut window = LossBreakdown::default();
    let mut window_len = 0usize;
    let mut emit = |state: &TrainState, window: &LossBreakdown, len: usize, rows: &mut Vec<MetricsRow>| -> Result<()> {
        let losses = if len == 0 {
            LossBreakdown { total: f64::NAN, supervised: f64::NAN, selftrain: f64::NAN, class_balance: f64::NAN, cond: f64::NAN }
        } else {
            window.scaled(1.0 / len as f64)
        };
        let report = evaluate(&state.seg, &state.params, data.eval, data.groups)?;
        let row = MetricsRow { step: state.step, losses, report };
        on_row(&row);
        rows.push(row);
        Ok(())
    };
    emit(state, &window, 0, &mut rows)?;
    for i in 0..cfg.steps {
        let src: Vec<&Sample> = (0..cfg.batch)
            .map(|_| &data.source.samples[state.rng.random_range(0..data.source.len())])
            .collect();
        let tgt: Vec<&Sample> = match data.target {
            Some(t) if !t.is_empty() => (0..cfg.batch).map(|_| &t.samples[state.rng.random_range(0..t.len())]).collect(),
            _ => Vec::new(),
        };
        let out = train_step(state, &src, &tgt, cfg, data.dist)?;
        window.accumulate(&out.losses);
        window_len += 1;
        grad_history.push(out.grad_per_class);
        let last = i + 1 == cfg.steps;
        if last || (data.eval_interval > 0 && (i + 1) % data.eval_interval == 0) {
            emit(state, &window, window_len, &mut rows)?;
            window = LossBreakdown::default();
            window_len = 0;
        }
    }
    Ok(LoopOutcome { rows, grad_history })
}

const MOMENTUM_PREFIX: &str = "momentum.";

fn meta_usize(ck: &Checkpoint, key: &str) -> Result<usize> {
    ck.meta(key)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks meta {key}")))?
        .parse()
        .map_err(|_| Error::Config(format!("checkpoint meta {key} is not an integer")))
}

fn push_segmenter_meta(ck: &mut Checkpoint, c: &SegmenterConfig) {
    for (k, v) in [
        ("segmenter.height", c.height),
        ("segmenter.width", c.width),
        ("segmenter.classes", c.classes),
        ("segmenter.stem_dim", c.stem_dim),
        ("segmenter.mid_dim", c.mid_dim),
        ("segmenter.token_dim", c.token_dim),
        ("segmenter.heads", c.heads),
        ("segmenter.depth", c.depth),
        ("segmenter.decoder_dim", c.decoder_dim),
    ] {
        ck.push_meta(k, v);
    }
}

fn segmenter_meta(ck: &Checkpoint) -> Result<SegmenterConfig> {
    Ok(SegmenterConfig {
        height: meta_usize(ck, "segmenter.height")?,
        width: meta_usize(ck, "segmenter.width")?,
        classes: meta_usize(ck, "segmenter.classes")?,
        stem_dim: meta_usize(ck, "segmenter.stem_dim")?,
        mid_dim: meta_usize(ck, "segmenter.mid_dim")?,
        token_dim: meta_usize(ck, "segmenter.token_dim")?,
        heads: meta_usize(ck, "segmenter.heads")?,
        depth: meta_usize(ck, "segmenter.depth")?,
        decoder_dim: meta_usize(ck, "segmenter.decoder_dim")?,
    })
}

fn push_cond_meta(ck: &mut Checkpoint, c: &CondNetConfig) {
    for (k, v) in [
        ("condnet.grid_h", c.grid_h),
        ("condnet.grid_w", c.grid_w),
        ("condnet.classes", c.classes),
        ("condnet.dim", c.dim),
        ("condnet.depth", c.depth),
        ("condnet.heads", c.heads),
    ] {
        ck.push_meta(k, v);
    }
}

fn cond_meta(ck: &Checkpoint) -> Result<CondNetConfig> {
    Ok(CondNetConfig {
        grid_h: meta_usize(ck, "condnet.grid_h")?,
        grid_w: meta_usize(ck, "condnet.grid_w")?,
        classes: meta_usize(ck, "condnet.classes")?,
        dim: meta_usize(ck, "condnet.dim")?,
        depth: meta_usize(ck, "condnet.depth")?,
        heads: meta_usize(ck, "condnet.heads")?,
    })
}

/// Checkpoint of a structure network; tensor names keep their `condnet.` prefix.
pub fn cond_checkpoint(cond: &FrozenCond, steps: u64) -> Checkpoint {
    let mut ck = Checkpoint::default();
    push_cond_meta(&mut ck, &cond.net.config);
    ck.counters.push(("step".into(), steps));
    ck.push_params("", &cond.params);
    ck
}

pub fn cond_from_checkpoint(ck: &Checkpoint) -> Result<FrozenCond> {
    let config = cond_meta(ck)?;
    let params = ck.select(CONDNET_PREFIX, false)?;
    let net = CondNet::find(config, &params)?;
    if params.len() != ck.tensors.len() {
        return Err(Error::Config("structure checkpoint holds foreign tensors".into()));
    }
    Ok(FrozenCond { net, params })
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        push_segmenter_meta(&mut ck, &self.seg.config);
        if let Some(fc) = &self.cond {
            push_cond_meta(&mut ck, &fc.net.config);
        }
        ck.counters.push(("step".into(), self.step));
        ck.rng = Some(RngState::capture(&self.rng));
        ck.push_params("", &self.params);
        ck.push_params(MOMENTUM_PREFIX, &self.momentum);
        if let Some(fc) = &self.cond {
            ck.push_params("", &fc.params);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = segmenter_meta(ck)?;
        let params = ck.select(SEG_PREFIX, false)?;
        let seg = Segmenter::find(config, &params)?;
        let momentum = ck.select(MOMENTUM_PREFIX, true)?;
        params.check_compatible(&momentum)?;
        let cond = if ck.meta("condnet.dim").is_some() {
            let config = cond_meta(ck)?;
            let cparams = ck.select(CONDNET_PREFIX, false)?;
            Some(FrozenCond { net: CondNet::find(config, &cparams)?, params: cparams })
        } else {
            None
        };
        let known = params.len() + momentum.len() + cond.as_ref().map_or(0, |c| c.params.len());
        if known != ck.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, state inventory expects {known}",
                ck.tensors.len()
            )));
        }
        let rng = ck.rng.ok_or_else(|| Error::Config("checkpoint lacks rng state".into()))?;
        Ok(Self {
            seg,
            params,
            momentum,
            step: ck.counter("step").unwrap_or(0),
            rng: rng.restore(),
            cond,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
