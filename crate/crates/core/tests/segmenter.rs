use fairseg::class_stats::ClassDistribution;
use fairseg::data::generate_sample;
use fairseg::segmenter::{
    loss_class_balance, loss_selftrain, loss_supervised, predict_labels, pseudo_labels,
    seg_forward, stack_images, stack_labels, ClassBalanceForm, ClassLabels, Prediction,
    PseudoLabels, Segmenter, SegmenterConfig,
};
use fairseg::{grad_check, CeTarget, DomainConfig, NetworkParams, SceneSpec, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn margin_logits(labels: &[u8], classes: usize, margin: f64) -> Tensor<f64> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        data[r * classes + l as usize] = margin;
    }
    Tensor::new([labels.len(), classes], data).unwrap()
}

fn ce_of(logits: Tensor<f64>, labels: &[u8]) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let pred = Prediction::from_logits(&mut tape, l).unwrap();
    let loss = loss_supervised(&mut tape, &pred, labels).unwrap();
    tape.value(loss).item()
}

#[test]
fn forward_shape_and_determinism() {
    let spec = SceneSpec::default();
    let samples: Vec<_> = (0..2).map(|i| generate_sample(&spec, &DomainConfig::source(8), i)).collect();
    let refs: Vec<_> = samples.iter().collect();
    let images = stack_images::<f32>(&refs).unwrap();

    let mut params = NetworkParams::<f32>::new();
    let seg = Segmenter::init(SegmenterConfig::default(), &mut params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let run = || {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let pred = seg_forward(&seg, &mut tape, &bound, x).unwrap();
        (tape.value(pred.logits).clone(), pred.hard(&tape))
    };
    let (logits, hard) = run();
    assert_eq!(logits.shape(), &[2 * 64 * 64, 8]);
    assert!(logits.all_finite());
    let (again, _) = run();
    assert_eq!(logits, again);

    let mut marginal = [0usize; 8];
    for &h in &hard {
        marginal[h as usize] += 1;
    }
    println!("untrained prediction marginal: {marginal:?}");

    let found = Segmenter::find(SegmenterConfig::default(), &params).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(images);
    let y = found.forward(&mut tape, &bound, x).unwrap();
    assert_eq!(tape.value(y), &logits);

    let wrong = SegmenterConfig { decoder_dim: 16, ..SegmenterConfig::default() };
    assert!(Segmenter::find(wrong, &params).is_err());
}

#[test]
fn rejects_bad_image_shapes() {
    let mut params = NetworkParams::<f32>::new();
    let seg = Segmenter::init(SegmenterConfig::default(), &mut params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros([100, 3]));
    assert!(seg.forward(&mut tape, &bound, x).is_err());
    assert!(SegmenterConfig { height: 30, ..SegmenterConfig::default() }.validate().is_err());
}

#[test]
fn supervised_loss_examples() {
    let labels: Vec<u8> = (0..16).map(|i| (i % 8) as u8).collect();
    assert!((ce_of(Tensor::zeros([16, 8]), &labels) - 8f64.ln()).abs() < 1e-12);

    // Closed form ln(1 + (C−1)·e^−20): 1.44e-8 for C = 8, below 1e-8 for C ≤ 5.
    let eight = ce_of(margin_logits(&labels, 8, 20.0), &labels);
    assert!((eight - (1.0 + 7.0 * (-20f64).exp()).ln()).abs() < 1e-15);
    let binary: Vec<u8> = labels.iter().map(|l| l % 2).collect();
    assert!(ce_of(margin_logits(&binary, 2, 20.0), &binary) <= 1e-8);
    let five: Vec<u8> = labels.iter().map(|l| l % 5).collect();
    assert!(ce_of(margin_logits(&five, 5, 20.0), &five) <= 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random(&[16, 8], &mut rng, 3.0);
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let rows = tape
        .cross_entropy(l, CeTarget::Index(labels.iter().map(|&v| v as usize).collect()), None)
        .unwrap();
    assert_eq!(ce_of(logits, &labels), tape.value(rows).item());

    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros([2, 8]));
    let pred = Prediction::from_logits(&mut tape, l).unwrap();
    assert!(loss_supervised(&mut tape, &pred, &[0, 8]).is_err());
}

#[test]
fn pseudo_label_examples() {
    let probs = Tensor::new([2, 2], vec![0.95, 0.05, 0.6, 0.4]).unwrap();
    let ps = pseudo_labels(&probs, 0.9).unwrap();
    assert_eq!(ps.labels, vec![0, 0]);
    assert_eq!(ps.valid, vec![true, false]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&[50, 2], &mut rng, 4.0);
    let probs = fairseg::softmax_lastdim(&logits).unwrap();
    assert_eq!(pseudo_labels(&probs, 0.5).unwrap().valid_count(), 50);
    assert!(pseudo_labels(&probs, 1.0).is_err());
}

#[test]
fn selftrain_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&[12, 4], &mut rng, 3.0);
    let labels: Vec<u8> = (0..12).map(|i| (i % 4) as u8).collect();

    let none = PseudoLabels { labels: labels.clone(), valid: vec![false; 12], tau: 0.9 };
    let mut tape = Tape::new();
    let l = tape.param(logits.clone());
    let pred = Prediction::from_logits(&mut tape, l).unwrap();
    let loss = loss_selftrain(&mut tape, &pred, &none).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);

    let binary: Vec<u8> = labels.iter().map(|l| l % 2).collect();
    let all = PseudoLabels { labels: binary.clone(), valid: vec![true; 12], tau: 0.9 };
    let mut tape = Tape::new();
    let l = tape.constant(margin_logits(&binary, 2, 20.0));
    let pred = Prediction::from_logits(&mut tape, l).unwrap();
    let loss = loss_selftrain(&mut tape, &pred, &all).unwrap();
    assert!(tape.value(loss).item() <= 1e-8);

    // Restricting to the valid subset gives the supervised loss of that subset.
    let valid: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    let ps = PseudoLabels { labels: labels.clone(), valid: valid.clone(), tau: 0.9 };
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let pred = Prediction::from_logits(&mut tape, l).unwrap();
    let masked = loss_selftrain(&mut tape, &pred, &ps).unwrap();
    let keep: Vec<usize> = (0..12).filter(|&i| valid[i]).collect();
    let sub_rows: Vec<f64> = keep.iter().flat_map(|&i| logits.row(i).to_vec()).collect();
    let sub_labels: Vec<u8> = keep.iter().map(|&i| labels[i]).collect();
    let want = ce_of(Tensor::new([keep.len(), 4], sub_rows).unwrap(), &sub_labels);
    assert!((tape.value(masked).item() - want).abs() < 1e-12);
}

#[test]
fn class_balance_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random(&[20, 3], &mut rng, 2.0);
    let labels: Vec<u8> = (0..20).map(|i| (i % 3) as u8).collect();

    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let pred = Prediction::from_logits(&mut tape, l).unwrap();
    let uniform = ClassDistribution::uniform(3);
    let wce = loss_class_balance(&mut tape, &pred, ClassLabels::Truth(&labels), &uniform, ClassBalanceForm::WeightCe).unwrap();
    let plain = loss_supervised(&mut tape, &pred, &labels).unwrap();
    assert!((tape.value(wce).item() - tape.value(plain).item()).abs() <= 1e-6);
    assert!(loss_class_balance(&mut tape, &pred, ClassLabels::Unlabelled, &uniform, ClassBalanceForm::WeightCe).is_err());

    let skewed = ClassDistribution::from_counts(&[8, 1, 1], 0.0).unwrap();
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(Tensor::zeros([5, 3]));
    let pred = Prediction::from_logits(&mut tape, l).unwrap();
    let reg = loss_class_balance(&mut tape, &pred, ClassLabels::Unlabelled, &skewed, ClassBalanceForm::MarginalReg).unwrap();
    let want = (0.8f64.ln() + 2.0 * 0.1f64.ln()) / 3.0 + 3f64.ln();
    assert!((tape.value(reg).item() - want).abs() < 1e-12);
    // The closed form evaluates to −0.5108.
    assert!((want + 0.510_83).abs() < 1e-5);

    // One-hot predictions: the rarest class gives the minimum.
    let skewed = ClassDistribution::from_counts(&[7, 2, 1], 0.0).unwrap();
    let mut values = Vec::new();
    for c in 0..3u8 {
        let mut tape = Tape::new();
        let l = tape.constant(margin_logits(&[c; 4], 3, 60.0));
        let pred = Prediction::from_logits(&mut tape, l).unwrap();
        let reg = loss_class_balance(&mut tape, &pred, ClassLabels::Unlabelled, &skewed, ClassBalanceForm::MarginalReg).unwrap();
        values.push(tape.value(reg).item());
    }
    assert!(values[2] < values[1] && values[1] < values[0]);
    assert!((values[2] - (0.1f64.ln() - (1.0f64 / 3.0).ln())).abs() < 1e-12);
}

#[test]
fn marginal_reg_gradient_is_constant_in_probs() {
    let dist = ClassDistribution::from_counts(&[50, 30, 15, 5], 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let probs = random(&[6, 4], &mut rng, 1.0).map(f64::abs);
    let f = |t: &mut Tape<f64>, x| {
        let logits = t.constant(Tensor::zeros([6, 4]));
        let pred = Prediction { logits, probs: x };
        loss_class_balance(t, &pred, ClassLabels::Unlabelled, &dist, ClassBalanceForm::MarginalReg)
    };
    let report = grad_check(f, &probs, 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-4);
    for r in 0..6 {
        for c in 0..4 {
            let want = (dist.p[c].ln() - 0.25f64.ln()) / 6.0;
            assert!((report.analytic[r * 4 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn losses_pass_grad_check() {
    let dist = ClassDistribution::from_counts(&[60, 25, 10, 5], 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10 {
        let logits = random(&[9, 4], &mut rng, 2.0);
        let labels: Vec<u8> = (0..9).map(|_| rng.random_range(0..4)).collect();
        let pseudo = PseudoLabels {
            labels: labels.clone(),
            valid: (0..9).map(|_| rng.random_bool(0.6)).collect(),
            tau: 0.9,
        };
        let checks: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, fairseg::Var) -> fairseg::Result<fairseg::Var>>)> = vec![
            ("supervised", Box::new(|t, x| {
                let p = Prediction::from_logits(t, x)?;
                loss_supervised(t, &p, &labels)
            })),
            ("selftrain", Box::new(|t, x| {
                let p = Prediction::from_logits(t, x)?;
                loss_selftrain(t, &p, &pseudo)
            })),
            ("weightCE", Box::new(|t, x| {
                let p = Prediction::from_logits(t, x)?;
                loss_class_balance(t, &p, ClassLabels::Pseudo(&pseudo), &dist, ClassBalanceForm::WeightCe)
            })),
            ("marginalReg", Box::new(|t, x| {
                let p = Prediction::from_logits(t, x)?;
                loss_class_balance(t, &p, ClassLabels::Unlabelled, &dist, ClassBalanceForm::MarginalReg)
            })),
        ];
        for (name, f) in checks {
            let report = grad_check(f, &logits, 1e-5).unwrap();
            assert!(report.max_rel_error <= 1e-4, "{name} trial {trial}: {}", report.max_rel_error);
        }
    }
}

#[test]
fn predict_labels_examples() {
    let t = Tensor::new([3, 2], vec![0.5, 0.5, 0.0, 1.0, 1.0, 0.0]).unwrap();
    assert_eq!(predict_labels(&t), vec![0, 1, 0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&[40, 6], &mut rng, 3.0);
    let base = predict_labels(&logits);
    assert_eq!(predict_labels(&logits.map(|v| v.exp() * 3.0 + 1.0)), base);
    let mut shifted = logits.clone();
    for r in 0..40 {
        let s = rng.random_range(-50.0..50.0);
        for v in &mut shifted.data_mut()[r * 6..(r + 1) * 6] {
            *v += s;
        }
    }
    assert_eq!(predict_labels(&shifted), base);
    assert_eq!(predict_labels(&fairseg::softmax_lastdim(&logits).unwrap()), base);
}

#[test]
fn stacking_keeps_pixel_order() {
    let spec = SceneSpec::default();
    let a = generate_sample(&spec, &DomainConfig::source(8), 1);
    let b = generate_sample(&spec, &DomainConfig::source(8), 2);
    let images = stack_images::<f64>(&[&a, &b]).unwrap();
    assert_eq!(images.shape(), &[2 * 4096, 3]);
    assert_eq!(images.row(4096 + 65)[1], b.image.data()[65 * 3 + 1] as f64);
    let labels = stack_labels(&[&a, &b]);
    assert_eq!(&labels[4096..], b.label.as_slice());
}
