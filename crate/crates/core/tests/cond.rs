use fairseg::cond::{
    cond_forward, cond_structure_with_anchors, loss_cond_structure, loss_masked_modeling,
    masked_accuracy, pool_labels, sample_anchors, sample_mask, score_map, score_with_anchors,
    shuffle_cells, token_marginal, train_cond, CondTrainConfig, MaskRegime, MaskSpec, RegimeMix,
};
use fairseg::{grad_check, CondNet, CondNetConfig, Error, NetworkParams, Tape, Tensor, TokenGrid, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> CondNetConfig {
    CondNetConfig { grid_h: 2, grid_w: 3, classes: 3, dim: 8, depth: 1, heads: 2 }
}

/// Network whose weights are all drawn at a non-trivial scale.
fn scrambled<T: fairseg::Scalar>(config: CondNetConfig, seed: u64) -> (CondNet, NetworkParams<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::new();
    let net = CondNet::init(config, &mut params, &mut rng).unwrap();
    for i in 0..params.len() {
        params
            .at_mut(i)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::from_f64(rng.random_range(-0.6..0.6)));
    }
    (net, params)
}

fn random_grid(config: &CondNetConfig, rng: &mut ChaCha8Rng) -> TokenGrid {
    TokenGrid {
        height: config.grid_h,
        width: config.grid_w,
        tokens: (0..config.tokens()).map(|_| rng.random_range(0..config.classes as u8)).collect(),
    }
}

/// Zeroes the head weight and sets its bias, so every token gets the same logits.
fn constant_head(params: &mut NetworkParams<f64>, bias: &[f64]) {
    params.get_mut("condnet.head.weight").unwrap().data_mut().fill(0.0);
    params.get_mut("condnet.head.bias").unwrap().data_mut().copy_from_slice(bias);
}

fn forward_rows(net: &CondNet, params: &NetworkParams<f64>, grid: &TokenGrid, mask: &MaskSpec) -> Tensor<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let out = cond_forward(net, &mut tape, &p, grid, mask).unwrap();
    tape.value(out).clone()
}

#[test]
fn pooling_examples() {
    let g = pool_labels(&[1, 1, 1, 2], (2, 2), (1, 1), 3).unwrap();
    assert_eq!(g.tokens, vec![1]);
    let g = pool_labels(&[1, 2, 2, 1], (2, 2), (1, 1), 3).unwrap();
    assert_eq!(g.tokens, vec![1]);
    let labels = [0u8, 2, 1, 1, 2, 0];
    assert_eq!(pool_labels(&labels, (2, 3), (2, 3), 3).unwrap().tokens, labels.to_vec());
    assert!(matches!(pool_labels(&labels, (2, 3), (2, 2), 3), Err(Error::Shape { .. })));
    assert!(matches!(pool_labels(&[0, 5, 0, 0], (2, 2), (1, 1), 3), Err(Error::Index { .. })));
}

#[test]
fn mask_regime_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert_eq!(sample_mask(MaskRegime::Single, 256, &mut rng).unwrap().given_count(), 1);
        assert_eq!(sample_mask(MaskRegime::Zero, 256, &mut rng).unwrap().given_count(), 0);
        assert_eq!(sample_mask(MaskRegime::Multi(5), 256, &mut rng).unwrap().given_count(), 5);
    }
    assert_eq!(sample_mask(MaskRegime::Multi(255), 256, &mut rng).unwrap().given_count(), 255);
    for bad in [0, 1, 256, 300] {
        assert!(matches!(sample_mask(MaskRegime::Multi(bad), 256, &mut rng), Err(Error::Index { .. })));
    }
    let a = sample_mask(MaskRegime::Multi(7), 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = sample_mask(MaskRegime::Multi(7), 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);

    let mix = RegimeMix::default();
    for _ in 0..200 {
        match mix.draw(256, &mut rng) {
            MaskRegime::Multi(k) => assert!((2..=64).contains(&k)),
            MaskRegime::Single | MaskRegime::Zero => {}
        }
    }
    assert!(RegimeMix { single: 0.5, zero: 0.5, multi: 0.5 }.validate().is_err());
}

#[test]
fn forward_contracts() {
    let config = small_config();
    let (net, params) = scrambled::<f64>(config, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = random_grid(&config, &mut rng);
    let mask = sample_mask(MaskRegime::Multi(3), config.tokens(), &mut rng).unwrap();
    let out = forward_rows(&net, &params, &grid, &mask);
    assert_eq!(out.shape(), &[config.tokens(), config.classes]);
    for r in 0..out.rows() {
        assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    // Changing a given token's class moves the output.
    let given = mask.given.iter().position(|&g| g).unwrap();
    let mut changed = grid.clone();
    changed.tokens[given] = (grid.tokens[given] + 1) % config.classes as u8;
    assert!(forward_rows(&net, &params, &changed, &mask).max_abs_diff(&out) > 1e-6);

    // With nothing given the content is invisible.
    let zero = sample_mask(MaskRegime::Zero, config.tokens(), &mut rng).unwrap();
    let base = forward_rows(&net, &params, &grid, &zero);
    for _ in 0..5 {
        let other = random_grid(&config, &mut rng);
        assert_eq!(forward_rows(&net, &params, &other, &zero).data(), base.data());
    }

    let short = TokenGrid { height: 1, width: 2, tokens: vec![0, 1] };
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    assert!(matches!(cond_forward(&net, &mut tape, &p, &short, &mask), Err(Error::Shape { .. })));
}

fn masked_loss(net: &CondNet, params: &NetworkParams<f64>, grids: &[&TokenGrid], masks: &[&MaskSpec]) -> fairseg::Result<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let loss = loss_masked_modeling(net, &mut tape, &p, grids, masks)?;
    Ok(tape.value(loss).item())
}

#[test]
fn masked_modeling_examples() {
    let config = small_config();
    let (net, mut params) = scrambled::<f64>(config, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grids: Vec<TokenGrid> = (0..3).map(|_| random_grid(&config, &mut rng)).collect();
    let masks: Vec<MaskSpec> = (0..3)
        .map(|_| sample_mask(MaskRegime::Multi(2), config.tokens(), &mut rng).unwrap())
        .collect();
    let grid_refs: Vec<&TokenGrid> = grids.iter().collect();
    let mask_refs: Vec<&MaskSpec> = masks.iter().collect();

    // Direct loop over hidden positions of each grid's own forward pass.
    let mut sum = 0.0;
    let mut count = 0;
    for (g, m) in grids.iter().zip(&masks) {
        let q = forward_rows(&net, &params, g, m);
        for t in 0..g.len() {
            if !m.given[t] {
                sum -= q.row(t)[g.tokens[t] as usize].ln();
                count += 1;
            }
        }
    }
    let direct = sum / count as f64;
    let batched = masked_loss(&net, &params, &grid_refs, &mask_refs).unwrap();
    assert!((batched - direct).abs() < 1e-10, "{batched} vs {direct}");

    constant_head(&mut params, &[0.0; 3]);
    let uniform = masked_loss(&net, &params, &grid_refs, &mask_refs).unwrap();
    assert!((uniform - 3f64.ln()).abs() < 1e-5);

    let flat = TokenGrid { tokens: vec![2; config.tokens()], ..grids[0].clone() };
    constant_head(&mut params, &[0.0, 0.0, 60.0]);
    assert!(masked_loss(&net, &params, &[&flat], &[&masks[0]]).unwrap() < 1e-20);

    let all_given = MaskSpec { given: vec![true; config.tokens()], regime: MaskRegime::Multi(config.tokens()) };
    assert!(matches!(masked_loss(&net, &params, &[&flat], &[&all_given]), Err(Error::Contract(_))));
}

fn masked_loss_wrt<'a>(
    net: &'a CondNet,
    params: &'a NetworkParams<f64>,
    index: usize,
    grids: &'a [TokenGrid],
    masks: &'a [MaskSpec],
) -> impl Fn(&mut Tape<f64>, Var) -> fairseg::Result<Var> + 'a {
    move |tape, x| {
        let p = params.bind(tape, false).replace(index, x);
        let g: Vec<&TokenGrid> = grids.iter().collect();
        let m: Vec<&MaskSpec> = masks.iter().collect();
        loss_masked_modeling(net, tape, &p, &g, &m)
    }
}

#[test]
fn masked_modeling_passes_grad_check() {
    let config = small_config();
    for trial in 0..10 {
        let (net, params) = scrambled::<f64>(config, 100 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let grids: Vec<TokenGrid> = (0..2).map(|_| random_grid(&config, &mut rng)).collect();
        let masks: Vec<MaskSpec> = [MaskRegime::Single, MaskRegime::Multi(3)]
            .iter()
            .map(|&r| sample_mask(r, config.tokens(), &mut rng).unwrap())
            .collect();
        for name in ["condnet.embed", "condnet.pos", "condnet.block0.attn.qkv.weight", "condnet.block0.mlp.fc1.weight", "condnet.head.weight"] {
            let index = params.position(name).unwrap();
            let f = masked_loss_wrt(&net, &params, index, &grids, &masks);
            let report = grad_check(f, params.at(index), 1e-5).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{name} trial {trial}: {}", report.max_rel_error);
        }
    }
}

fn random_logits(rows: usize, classes: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new([rows, classes], (0..rows * classes).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn cond_structure_passes_grad_check() {
    let config = small_config();
    // Two 4x6 images pooled by 2 onto the 2x3 grid.
    let (h, w) = (4, 6);
    for trial in 0..10 {
        let (net, params) = scrambled::<f64>(config, 300 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(400 + trial);
        let logits = random_logits(2 * h * w, config.classes, &mut rng);
        let f = |tape: &mut Tape<f64>, x: Var| {
            let p = params.bind(tape, false);
            let probs = tape.softmax(x)?;
            let mut anchors = ChaCha8Rng::seed_from_u64(trial);
            loss_cond_structure(&net, tape, &p, probs, (h, w), 2, &mut anchors)
        };
        let report = grad_check(f, &logits, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4, "trial {trial}: {}", report.max_rel_error);

        // No gradient reaches the frozen network.
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.param(logits.clone());
        let probs = tape.softmax(x).unwrap();
        let loss = loss_cond_structure(&net, &mut tape, &p, probs, (h, w), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(p.vars().iter().all(|&v| !grads.has(v)));
    }
}

#[test]
fn cond_structure_examples() {
    let config = small_config();
    let (net, mut params) = scrambled::<f64>(config, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = config.tokens();

    for _ in 0..10 {
        let grid = random_grid(&config, &mut rng);
        let anchor = rng.random_range(0..t);
        let score = score_with_anchors(&net, &params, &grid, &[anchor]).unwrap();
        assert!(score >= 0.0);
        let mut given = vec![false; t];
        given[anchor] = true;
        let mask = MaskSpec { given, regime: MaskRegime::Single };
        let ce = masked_loss(&net, &params, &[&grid], &[&mask]).unwrap();
        assert!((score - ce).abs() < 1e-10, "{score} vs {ce}");
    }

    // Soft targets never give a negative loss.
    for _ in 0..10 {
        let logits = random_logits(t, config.classes, &mut rng);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(logits);
        let soft = tape.softmax(x).unwrap();
        let loss = cond_structure_with_anchors(&net, &mut tape, &p, soft, &[vec![0, 3]]).unwrap();
        assert!(tape.value(loss).item() >= 0.0);
    }

    // Every anchor at once equals the mean of single-anchor scores.
    let grid = random_grid(&config, &mut rng);
    let singles: f64 = (0..t).map(|a| score_with_anchors(&net, &params, &grid, &[a]).unwrap()).sum::<f64>() / t as f64;
    let all: Vec<usize> = (0..t).collect();
    assert!((score_with_anchors(&net, &params, &grid, &all).unwrap() - singles).abs() < 1e-10);
    let s1 = score_map(&net, &params, &grid, t - 1, 11).unwrap();
    assert_eq!(s1, score_map(&net, &params, &grid, t - 1, 11).unwrap());

    assert!(matches!(score_map(&net, &params, &grid, 0, 1), Err(Error::Index { .. })));
    assert!(matches!(score_map(&net, &params, &grid, t + 1, 1), Err(Error::Index { .. })));
    assert!(sample_anchors(3, t, t, &mut rng).unwrap().iter().all(|a| {
        let mut s = a.clone();
        s.sort_unstable();
        s == all
    }));

    let flat = TokenGrid { tokens: vec![1; t], ..grid.clone() };
    constant_head(&mut params, &[0.0; 3]);
    for g in [&grid, &flat] {
        assert!((score_map(&net, &params, g, 2, 5).unwrap() - 3f64.ln()).abs() < 1e-5);
    }
    constant_head(&mut params, &[0.0, 60.0, 0.0]);
    assert!(score_map(&net, &params, &flat, 2, 5).unwrap() < 1e-20);
}

#[test]
fn training_is_deterministic_and_zero_steps_is_a_no_op() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grids: Vec<TokenGrid> = (0..6).map(|_| random_grid(&config, &mut rng)).collect();
    let (net, params) = scrambled::<f64>(config, 12);

    let mut untouched = params.clone();
    let report = train_cond(&net, &mut untouched, &grids, &CondTrainConfig { steps: 0, ..Default::default() }, |_, _| {}).unwrap();
    assert!(report.losses.is_empty());
    assert!(untouched.iter().zip(params.iter()).all(|((_, a), (_, b))| a.data() == b.data()));

    let cfg = CondTrainConfig { steps: 30, batch: 3, seed: 4, ..Default::default() };
    let mut a = params.clone();
    let mut b = params.clone();
    let ra = train_cond(&net, &mut a, &grids, &cfg, |_, _| {}).unwrap();
    let rb = train_cond(&net, &mut b, &grids, &cfg, |_, _| {}).unwrap();
    assert_eq!(ra, rb);
    assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.data() == y.data()));
    assert!(ra.losses.iter().all(|l| l.is_finite()));
    let head = |l: &[f64]| l.iter().sum::<f64>() / l.len() as f64;
    assert!(head(&ra.losses[20..]) < head(&ra.losses[..10]));
}

#[test]
fn accuracy_baseline_and_shuffling() {
    let config = small_config();
    let grids = vec![
        TokenGrid { height: 2, width: 3, tokens: vec![0, 0, 0, 0, 1, 2] },
        TokenGrid { height: 2, width: 3, tokens: vec![0, 0, 0, 1, 1, 1] },
    ];
    let marginal = token_marginal(&grids, 3);
    assert_eq!(marginal, vec![7.0 / 12.0, 4.0 / 12.0, 1.0 / 12.0]);

    let (net, mut params) = scrambled::<f64>(config, 13);
    constant_head(&mut params, &[40.0, 0.0, 0.0]);
    let acc = masked_accuracy(&net, &params, &grids, &marginal, &RegimeMix::default(), 1).unwrap();
    assert_eq!(acc.model, acc.baseline);
    assert!(acc.hidden_tokens > 0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shuffled = shuffle_cells(&grids[0], &mut rng);
    let mut a = shuffled.tokens.clone();
    let mut b = grids[0].tokens.clone();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}
