//! Conditional structure network: a masked-token transformer over pooled
//! label grids, its training loop, and the structural loss it scores.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{CeTarget, Grid, Tape, Var};
use crate::data::DatasetPack;
use crate::error::{Error, Result};
use crate::nn::{
    transformer_forward, Bound, Initializer, LayerNormLayer, LinearLayer, NetworkParams,
    TransformerBlock, INIT_STD,
};
use crate::segmenter::predict_labels;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{collect_grads, Adam};

/// Tensor-name prefix for structure-network weights in checkpoints.
pub const CONDNET_PREFIX: &str = "condnet.";

/// Hard class-id tokens of one pooled label map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<u8>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Majority vote per cell, ties to the lowest class id.
pub fn pool_labels(
    labels: &[u8],
    (height, width): (usize, usize),
    (grid_h, grid_w): (usize, usize),
    classes: usize,
) -> Result<TokenGrid> {
    if labels.len() != height * width {
        return Err(Error::shape("pool_labels", "label map size mismatch"));
    }
    if grid_h == 0 || grid_w == 0 || height % grid_h != 0 || width % grid_w != 0 {
        return Err(Error::shape(
            "pool_labels",
            format!("{height}x{width} map does not divide into {grid_h}x{grid_w} cells"),
        ));
    }
    let (ch, cw) = (height / grid_h, width / grid_w);
    let mut votes = vec![0usize; classes];
    let mut tokens = Vec::with_capacity(grid_h * grid_w);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            votes.iter_mut().for_each(|v| *v = 0);
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    let l = labels[y * width + x] as usize;
                    if l >= classes {
                        return Err(Error::Index { what: "class id", index: l, bound: classes });
                    }
                    votes[l] += 1;
                }
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            tokens.push(best as u8);
        }
    }
    Ok(TokenGrid { height: grid_h, width: grid_w, tokens })
}

/// Pools every label map of a pack.
pub fn pool_pack(pack: &DatasetPack, grid: (usize, usize)) -> Result<Vec<TokenGrid>> {
    pack.samples
        .iter()
        .map(|s| pool_labels(&s.label, (pack.height, pack.width), grid, pack.classes))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRegime {
    /// Exactly one given token.
    Single,
    /// No given tokens: the unconditional model.
    Zero,
    /// `k` given tokens, `2 ≤ k ≤ T−1`.
    Multi(usize),
}

/// `given[t]` is true for tokens the network sees (mask value 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub given: Vec<bool>,
    pub regime: MaskRegime,
}

impl MaskSpec {
    pub fn given_count(&self) -> usize {
        self.given.iter().filter(|&&g| g).count()
    }
}

pub fn sample_mask<R: Rng>(regime: MaskRegime, tokens: usize, rng: &mut R) -> Result<MaskSpec> {
    let k = match regime {
        MaskRegime::Single => 1,
        MaskRegime::Zero => 0,
        MaskRegime::Multi(k) => {
            if k < 2 || k + 1 > tokens {
                return Err(Error::Index { what: "multi-mask size", index: k, bound: tokens });
            }
            k
        }
    };
    if tokens == 0 || k > tokens {
        return Err(Error::contract("mask over an empty grid"));
    }
    let mut given = vec![false; tokens];
    for i in sample_indices(rng, tokens, k) {
        given[i] = true;
    }
    Ok(MaskSpec { given, regime })
}

/// Probabilities of the three masking regimes during structure training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeMix {
    pub single: f64,
    pub zero: f64,
    pub multi: f64,
}

impl Default for RegimeMix {
    fn default() -> Self {
        Self { single: 0.4, zero: 0.2, multi: 0.4 }
    }
}

impl RegimeMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.single, self.zero, self.multi];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("regime mix {parts:?} must be nonnegative and sum to 1")));
        }
        Ok(())
    }

    /// Draws a regime; multi uses `k ~ U[2, max(2, T/4)]`.
    pub fn draw<R: Rng>(&self, tokens: usize, rng: &mut R) -> MaskRegime {
        let u: f64 = rng.random();
        if u < self.single {
            MaskRegime::Single
        } else if u < self.single + self.zero {
            MaskRegime::Zero
        } else {
            MaskRegime::Multi(rng.random_range(2..=(tokens / 4).max(2)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondNetConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub classes: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for CondNetConfig {
    fn default() -> Self {
        Self { grid_h: 16, grid_w: 16, classes: 8, dim: 64, depth: 4, heads: 4 }
    }
}

impl CondNetConfig {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens() < 2 || self.classes < 2 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("invalid structure network config {self:?}")));
        }
        Ok(())
    }
}

/// Handles into the `condnet.*` tensors of a [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct CondNet {
    pub config: CondNetConfig,
    embed: usize,
    pos: usize,
    blocks: Vec<TransformerBlock>,
    ln_out: LayerNormLayer,
    head: LinearLayer,
}

fn cname(s: &str) -> String {
    format!("{CONDNET_PREFIX}{s}")
}

impl CondNet {
    pub fn init<T: Scalar, R: Rng>(
        config: CondNetConfig,
        params: &mut NetworkParams<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut init = Initializer { params, rng };
        let embed = init.normal(&cname("embed"), &[c.classes + 1, c.dim], INIT_STD)?;
        let pos = init.normal(&cname("pos"), &[c.tokens(), c.dim], INIT_STD)?;
        let blocks = (0..c.depth)
            .map(|l| TransformerBlock::init(&mut init, &cname(&format!("block{l}")), c.dim, c.heads, c.depth))
            .collect::<Result<Vec<_>>>()?;
        let ln_out = LayerNormLayer::init(&mut init, &cname("ln_out"), c.dim)?;
        let head = LinearLayer::init(&mut init, &cname("head"), c.dim, c.classes, INIT_STD)?;
        Ok(Self { config, embed, pos, blocks, ln_out, head })
    }

    pub fn find<T: Scalar>(config: CondNetConfig, params: &NetworkParams<T>) -> Result<Self> {
        config.validate()?;
        let lookup = |name: &str, shape: [usize; 2]| -> Result<usize> {
            let i = params
                .position(&cname(name))
                .ok_or_else(|| Error::contract(format!("missing {}", cname(name))))?;
            if params.at(i).shape() != shape {
                return Err(Error::shape("condnet", format!("{name} has shape {:?}", params.at(i).shape())));
            }
            Ok(i)
        };
        let embed = lookup("embed", [config.classes + 1, config.dim])?;
        let pos = lookup("pos", [config.tokens(), config.dim])?;
        let blocks = (0..config.depth)
            .map(|l| TransformerBlock::find(params, &cname(&format!("block{l}")), config.heads))
            .collect::<Result<Vec<_>>>()?;
        let head = LinearLayer::find(params, &cname("head"))?;
        if head.in_dim != config.dim || head.out_dim != config.classes {
            return Err(Error::shape("condnet", "head mismatches config"));
        }
        Ok(Self {
            config,
            embed,
            pos,
            blocks,
            ln_out: LayerNormLayer::find(params, &cname("ln_out"))?,
            head,
        })
    }

    /// Per-token logits `[N·T × C]` for embedded inputs `[N·T × D]`.
    fn encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, inputs: Var) -> Result<Var> {
        let x = transformer_forward(&self.blocks, tape, p, inputs, self.config.tokens())?;
        let x = self.ln_out.forward(tape, p, x)?;
        self.head.forward(tape, p, x)
    }

    fn positions<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, sequences: usize) -> Result<Var> {
        let t = self.config.tokens();
        tape.gather_rows(p.var(self.pos), (0..sequences * t).map(|r| r % t).collect())
    }

    /// Logits for `N` hard grids stacked as `N·T` tokens; hidden tokens use
    /// the MASK embedding.
    pub fn logits_hard<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tokens: &[u8],
        given: &[bool],
    ) -> Result<Var> {
        let (t, c) = (self.config.tokens(), self.config.classes);
        if tokens.len() != given.len() || tokens.is_empty() || tokens.len() % t != 0 {
            return Err(Error::shape("cond_forward", format!("{} tokens for grids of {t}", tokens.len())));
        }
        let idx = tokens
            .iter()
            .zip(given)
            .map(|(&tok, &g)| {
                if tok as usize >= c {
                    return Err(Error::Index { what: "token class", index: tok as usize, bound: c });
                }
                Ok(if g { tok as usize } else { c })
            })
            .collect::<Result<Vec<_>>>()?;
        let emb = tape.gather_rows(p.var(self.embed), idx)?;
        let pos = self.positions(tape, p, tokens.len() / t)?;
        let x = tape.add(emb, pos)?;
        self.encode(tape, p, x)
    }

    /// Logits for soft grids `[N·T × C]`; given tokens embed as the
    /// probability-weighted mean of the class embeddings.
    pub fn logits_soft<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        soft: Var,
        given: &[bool],
    ) -> Result<Var> {
        let (t, c) = (self.config.tokens(), self.config.classes);
        let shape = tape.value(soft).shape().to_vec();
        if shape.len() != 2 || shape[1] != c || shape[0] != given.len() || shape[0] % t != 0 || shape[0] == 0 {
            return Err(Error::shape("cond_forward", format!("soft grid {shape:?} for {t} tokens x {c} classes")));
        }
        let rows = shape[0];
        let table = tape.gather_rows(p.var(self.embed), (0..c).collect())?;
        let expected = tape.matmul(soft, table)?;
        let mask = tape.gather_rows(p.var(self.embed), vec![c; rows])?;
        let both = tape.concat_rows(&[expected, mask])?;
        let pick = given.iter().enumerate().map(|(r, &g)| if g { r } else { rows + r }).collect();
        let emb = tape.gather_rows(both, pick)?;
        let pos = self.positions(tape, p, rows / t)?;
        let x = tape.add(emb, pos)?;
        self.encode(tape, p, x)
    }
}

/// Per-token distribution `[T × C]` for one hard grid under `mask`.
pub fn cond_forward<T: Scalar>(
    net: &CondNet,
    tape: &mut Tape<T>,
    p: &Bound,
    grid: &TokenGrid,
    mask: &MaskSpec,
) -> Result<Var> {
    if grid.len() != net.config.tokens() || mask.given.len() != grid.len() {
        return Err(Error::shape("cond_forward", "grid, mask and network token counts differ"));
    }
    let logits = net.logits_hard(tape, p, &grid.tokens, &mask.given)?;
    tape.softmax(logits)
}

/// Mean cross-entropy over hidden tokens of a batch of hard grids.
pub fn loss_masked_modeling<T: Scalar>(
    net: &CondNet,
    tape: &mut Tape<T>,
    p: &Bound,
    grids: &[&TokenGrid],
    masks: &[&MaskSpec],
) -> Result<Var> {
    if grids.len() != masks.len() || grids.is_empty() {
        return Err(Error::shape("loss_masked_modeling", "grids and masks differ in count"));
    }
    let tokens: Vec<u8> = grids.iter().flat_map(|g| g.tokens.iter().copied()).collect();
    let given: Vec<bool> = masks.iter().flat_map(|m| m.given.iter().copied()).collect();
    let hidden = given.iter().filter(|&&g| !g).count();
    if hidden == 0 {
        return Err(Error::contract("masked modeling needs at least one hidden token"));
    }
    let logits = net.logits_hard(tape, p, &tokens, &given)?;
    let scale = T::from_f64(tokens.len() as f64 / hidden as f64);
    let weights = given.iter().map(|&g| if g { T::zero() } else { scale }).collect();
    let targets = tokens.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, CeTarget::Index(targets), Some(weights))
}

/// Structural loss against a frozen network for a batch of soft grids.
///
/// `soft` is `[B·T × C]`; `anchors[b]` lists the given cell of each
/// single-anchor query for grid `b`. The result is
/// `−1/(B·K·(T−1)) · Σ_b Σ_anchor Σ_{t≠anchor} Σ_c soft(t,c)·ln q(t,c)`.
pub fn cond_structure_with_anchors<T: Scalar>(
    net: &CondNet,
    tape: &mut Tape<T>,
    p: &Bound,
    soft: Var,
    anchors: &[Vec<usize>],
) -> Result<Var> {
    let (t, c) = (net.config.tokens(), net.config.classes);
    let shape = tape.value(soft).shape().to_vec();
    if shape != [anchors.len() * t, c] || anchors.is_empty() {
        return Err(Error::shape("loss_cond_structure", format!("soft grid {shape:?} for {} grids", anchors.len())));
    }
    let k = anchors[0].len();
    if k == 0 || anchors.iter().any(|a| a.len() != k || a.iter().any(|&i| i >= t)) {
        return Err(Error::contract("every grid needs the same number of in-range anchors"));
    }
    let queries = anchors.len() * k;
    let mut rows = Vec::with_capacity(queries * t);
    let mut given = Vec::with_capacity(queries * t);
    for (b, list) in anchors.iter().enumerate() {
        for &a in list {
            rows.extend((0..t).map(|i| b * t + i));
            given.extend((0..t).map(|i| i == a));
        }
    }
    let replicated = tape.gather_rows(soft, rows)?;
    let logits = net.logits_soft(tape, p, replicated, &given)?;
    let logq = tape.log_softmax(logits)?;
    let agree = tape.mul(replicated, logq)?;
    let keep = given
        .iter()
        .flat_map(|&g| std::iter::repeat_n(if g { T::zero() } else { T::one() }, c))
        .collect();
    let agree = tape.mul_const(agree, keep)?;
    let total = tape.sum(agree);
    Ok(tape.scale(total, T::from_f64(-1.0 / (queries * (t - 1)) as f64)))
}

/// `K` distinct anchor cells per grid, uniformly at random.
pub fn sample_anchors<R: Rng>(grids: usize, tokens: usize, k: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > tokens {
        return Err(Error::Index { what: "anchor count", index: k, bound: tokens });
    }
    Ok((0..grids).map(|_| sample_indices(rng, tokens, k).into_vec()).collect())
}

/// Structural loss on segmenter probabilities `[B·H·W × C]`: cell-averaged
/// into the token grid, then scored from `k` random anchors per image.
pub fn loss_cond_structure<T: Scalar>(
    net: &CondNet,
    tape: &mut Tape<T>,
    p: &Bound,
    probs: Var,
    (height, width): (usize, usize),
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let cfg = net.config;
    if height % cfg.grid_h != 0 || width % cfg.grid_w != 0 || height / cfg.grid_h != width / cfg.grid_w {
        return Err(Error::shape("loss_cond_structure", "image does not pool evenly onto the token grid"));
    }
    let rows = tape.value(probs).rows();
    if rows == 0 || rows % (height * width) != 0 {
        return Err(Error::shape("loss_cond_structure", "probabilities are not whole images"));
    }
    let batch = rows / (height * width);
    let soft = tape.pool_mean(probs, Grid::new(batch, height, width), height / cfg.grid_h)?;
    let anchors = sample_anchors(batch, cfg.tokens(), k, rng)?;
    cond_structure_with_anchors(net, tape, p, soft, &anchors)
}

/// One-hot version of the structural loss for a hard grid, as a number.
pub fn score_map<T: Scalar>(
    net: &CondNet,
    params: &NetworkParams<T>,
    grid: &TokenGrid,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = sample_anchors(1, net.config.tokens(), k, &mut rng)?;
    score_with_anchors(net, params, grid, &anchors[0])
}

pub fn score_with_anchors<T: Scalar>(
    net: &CondNet,
    params: &NetworkParams<T>,
    grid: &TokenGrid,
    anchors: &[usize],
) -> Result<f64> {
    let c = net.config.classes;
    if grid.len() != net.config.tokens() {
        return Err(Error::shape("score_map", "grid size mismatches network"));
    }
    let mut onehot = vec![T::zero(); grid.len() * c];
    for (i, &tok) in grid.tokens.iter().enumerate() {
        if tok as usize >= c {
            return Err(Error::Index { what: "token class", index: tok as usize, bound: c });
        }
        onehot[i * c + tok as usize] = T::one();
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let soft = tape.constant(Tensor::new([grid.len(), c], onehot)?);
    let loss = cond_structure_with_anchors(net, &mut tape, &p, soft, &[anchors.to_vec()])?;
    Ok(tape.value(loss).item().to_f64())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CondTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mix: RegimeMix,
}

impl Default for CondTrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 8, lr: 1e-3, seed: 0, mix: RegimeMix::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondTrainReport {
    pub losses: Vec<f64>,
}

impl CondTrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Adam on the masked-modeling loss, one regime per grid per step.
pub fn train_cond<T: Scalar>(
    net: &CondNet,
    params: &mut NetworkParams<T>,
    grids: &[TokenGrid],
    cfg: &CondTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<CondTrainReport> {
    cfg.mix.validate()?;
    if grids.is_empty() {
        return Err(Error::contract("structure training needs at least one grid"));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("cond batch must be positive".into()));
    }
    let t = net.config.tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&TokenGrid> = (0..cfg.batch).map(|_| &grids[rng.random_range(0..grids.len())]).collect();
        let masks = batch
            .iter()
            .map(|_| {
                let regime = cfg.mix.draw(t, &mut rng);
                sample_mask(regime, t, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mask_refs: Vec<&MaskSpec> = masks.iter().collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, true);
        let loss = loss_masked_modeling(net, &mut tape, &p, &batch, &mask_refs)?;
        let value = tape.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step: step as u64, detail: format!("masked-modeling loss {value}") });
        }
        let grads = tape.backward(loss)?;
        adam.update(params, &collect_grads(&grads, &p))?;
        if !params.all_finite() {
            return Err(Error::Divergence { step: step as u64, detail: "non-finite structure weights".into() });
        }
        losses.push(value);
        on_step(step, value);
    }
    Ok(CondTrainReport { losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedAccuracy {
    pub model: f64,
    pub baseline: f64,
    pub hidden_tokens: usize,
}

/// Accuracy on hidden tokens against the majority-class baseline.
///
/// `marginal` is the class frequency used by the baseline (usually the
/// training grids' token histogram); masks follow `mix` under `seed`.
pub fn masked_accuracy<T: Scalar>(
    net: &CondNet,
    params: &NetworkParams<T>,
    grids: &[TokenGrid],
    marginal: &[f64],
    mix: &RegimeMix,
    seed: u64,
) -> Result<MaskedAccuracy> {
    let t = net.config.tokens();
    let majority = (0..marginal.len()).fold(0, |best, c| if marginal[c] > marginal[best] { c } else { best });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut base_hits, mut hidden) = (0usize, 0usize, 0usize);
    for chunk in grids.chunks(8) {
        let masks = chunk
            .iter()
            .map(|_| {
                let regime = mix.draw(t, &mut rng);
                sample_mask(regime, t, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens: Vec<u8> = chunk.iter().flat_map(|g| g.tokens.iter().copied()).collect();
        let given: Vec<bool> = masks.iter().flat_map(|m| m.given.iter().copied()).collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let logits = net.logits_hard(&mut tape, &p, &tokens, &given)?;
        let pred = predict_labels(tape.value(logits));
        for i in 0..tokens.len() {
            if !given[i] {
                hidden += 1;
                hits += usize::from(pred[i] == tokens[i]);
                base_hits += usize::from(tokens[i] as usize == majority);
            }
        }
    }
    if hidden == 0 {
        return Err(Error::contract("no hidden tokens to score"));
    }
    Ok(MaskedAccuracy {
        model: hits as f64 / hidden as f64,
        baseline: base_hits as f64 / hidden as f64,
        hidden_tokens: hidden,
    })
}

/// Token-class frequencies over a set of grids.
pub fn token_marginal(grids: &[TokenGrid], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut total = 0;
    for g in grids {
        for &t in &g.tokens {
            counts[t as usize] += 1;
            total += 1;
        }
    }
    counts.iter().map(|&n| n as f64 / total.max(1) as f64).collect()
}

/// Copy of `grid` with its cells randomly permuted.
pub fn shuffle_cells<R: Rng>(grid: &TokenGrid, rng: &mut R) -> TokenGrid {
    use rand::seq::SliceRandom;
    let mut tokens = grid.tokens.clone();
    tokens.shuffle(rng);
    TokenGrid { tokens, ..grid.clone() }
}
