use fairseg::class_stats::GroupSplit;
use fairseg::metrics::{
    bound_check, fairness_gap, fairness_report, iou_report, report_csv, ClassLossAccumulator,
};
use fairseg::{ConfusionMatrix, Error};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn groups(majority: &[usize], minority: &[usize]) -> GroupSplit {
    GroupSplit { threshold: 0.05, majority: majority.to_vec(), minority: minority.to_vec() }
}

fn random_map(rng: &mut ChaCha8Rng, len: usize, classes: u8) -> Vec<u8> {
    (0..len).map(|_| rng.random_range(0..classes)).collect()
}

#[test]
fn confusion_update_counts_pixels() {
    let label = vec![0u8, 1, 2, 2, 1, 0, 0, 2, 1];
    let mut cm = ConfusionMatrix::new(3);
    cm.update(&label, &label).unwrap();
    for g in 0..3 {
        for p in 0..3 {
            let expected = if g == p { label.iter().filter(|&&l| l as usize == g).count() as u64 } else { 0 };
            assert_eq!(cm.get(g, p), expected);
        }
    }
    assert_eq!(cm.total(), 9);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (12, 7);
    let before = cm.total();
    let pred = random_map(&mut rng, h * w, 3);
    let truth = random_map(&mut rng, h * w, 3);
    cm.update(&pred, &truth).unwrap();
    assert_eq!(cm.total() - before, (h * w) as u64);
}

#[test]
fn confusion_matches_loop_oracle_and_merges() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pred = random_map(&mut rng, 500, 5);
    let truth = random_map(&mut rng, 500, 5);
    let mut oracle = [[0u64; 5]; 5];
    for i in 0..500 {
        oracle[truth[i] as usize][pred[i] as usize] += 1;
    }
    let mut whole = ConfusionMatrix::new(5);
    whole.update(&pred, &truth).unwrap();
    let mut left = ConfusionMatrix::new(5);
    left.update(&pred[..200], &truth[..200]).unwrap();
    let mut right = ConfusionMatrix::new(5);
    right.update(&pred[200..], &truth[200..]).unwrap();
    left.merge(&right).unwrap();
    for g in 0..5 {
        for p in 0..5 {
            assert_eq!(whole.get(g, p), oracle[g][p]);
        }
    }
    assert_eq!(left, whole);
}

#[test]
fn confusion_rejects_bad_input() {
    let mut cm = ConfusionMatrix::new(3);
    assert!(matches!(cm.update(&[0, 1], &[0]), Err(Error::Shape { .. })));
    assert!(matches!(cm.update(&[3], &[0]), Err(Error::Index { .. })));
    assert!(matches!(cm.update(&[0], &[7]), Err(Error::Index { .. })));
    assert!(cm.merge(&ConfusionMatrix::new(4)).is_err());
}

#[test]
fn iou_examples() {
    let label = vec![0u8, 1, 2, 3, 3, 2, 1, 0];
    let mut cm = ConfusionMatrix::new(4);
    cm.update(&label, &label).unwrap();
    let r = iou_report(&cm, &groups(&[0, 1], &[2, 3])).unwrap();
    assert!(r.iou.iter().all(|v| *v == Some(1.0)));
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.iou_std, 0.0);

    // [[3,1],[1,3]]: tp=3, fp=1, fn=1 per class.
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&[0, 0, 0, 1, 0, 1, 1, 1], &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (3, 1, 1, 3));
    let r = iou_report(&cm, &groups(&[0], &[1])).unwrap();
    assert_eq!(r.iou, vec![Some(0.6), Some(0.6)]);
    assert!((r.miou - 0.6).abs() < 1e-15);
    assert!((r.miou_majority - 0.6).abs() < 1e-15 && (r.miou_minority - 0.6).abs() < 1e-15);

    assert!(matches!(iou_report(&ConfusionMatrix::new(3), &groups(&[0], &[1, 2])), Err(Error::Contract(_))));
}

#[test]
fn absent_classes_are_excluded() {
    // Class 2 never occurs in ground truth or prediction; class 3 is only predicted.
    let truth = [0u8, 0, 1, 1, 1, 0];
    let pred = [0u8, 0, 1, 1, 3, 0];
    let mut cm = ConfusionMatrix::new(4);
    cm.update(&pred, &truth).unwrap();
    let g = groups(&[0, 1], &[2, 3]);
    let r = iou_report(&cm, &g).unwrap();
    assert_eq!(r.iou[2], None);
    assert_eq!(r.iou[3], None);
    assert_eq!(r.present(), vec![0, 1]);
    let expected = (1.0 + 2.0 / 3.0) / 2.0;
    assert!((r.miou - expected).abs() < 1e-15);
    assert!((r.iou_std - (1.0 / 6.0)).abs() < 1e-15);
    assert!(r.miou_minority.is_nan());

    let mut losses = ClassLossAccumulator::new(4);
    for (&t, l) in truth.iter().zip([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]) {
        losses.add(t as usize, l);
    }
    let report = fairness_report(&cm, &losses, &g).unwrap();
    let csv = report_csv(&report, &g);
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(csv.starts_with("class_id,group,iou,mean_loss\n0,majority,1,"));
}

#[test]
fn gap_and_bound_examples() {
    assert!((fairness_gap(&[1.0, 0.2]).unwrap() - 1.6).abs() < 1e-15);
    let b = bound_check(&[1.0, 0.2]).unwrap();
    assert!((b.gap - 1.6).abs() < 1e-15 && (b.bound - 4.8).abs() < 1e-12 && b.holds);

    let equal = bound_check(&[0.7; 5]).unwrap();
    assert_eq!(equal.gap, 0.0);
    assert!((equal.bound - 2.0 * 25.0 * 0.7).abs() < 1e-12);
    assert!(equal.holds);

    assert!(matches!(fairness_gap(&[1.0]), Err(Error::Contract(_))));
    assert!(matches!(bound_check(&[1.0, -0.1]), Err(Error::Contract(_))));
    assert!(bound_check(&[1.0, f64::NAN]).is_err());
}

#[test]
fn gap_properties_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let c = rng.random_range(2..=12);
        let e: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..5.0)).collect();
        let b = bound_check(&e).unwrap();
        assert!(b.holds, "bound failed for {e:?}");
        let mut shuffled = e.clone();
        shuffled.shuffle(&mut rng);
        assert!((fairness_gap(&shuffled).unwrap() - b.gap).abs() < 1e-9);
        assert!(b.gap > 1e-12, "distinct values must give a positive gap");
    }
    for c in 2..10 {
        assert!(fairness_gap(&vec![1.25; c]).unwrap().abs() <= 1e-12);
    }
}

/// IoU straight from the pixel maps, without a confusion matrix.
fn iou_from_pixels(pred: &[u8], truth: &[u8], c: u8) -> Option<f64> {
    if !truth.contains(&c) {
        return None;
    }
    let inter = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count();
    let union = pred.iter().zip(truth).filter(|(&p, &t)| p == c || t == c).count();
    Some(inter as f64 / union as f64)
}

#[test]
fn iou_report_matches_pixel_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for _ in 0..50 {
        let classes = rng.random_range(2..=6u8);
        let n = rng.random_range(4..80);
        let truth = random_map(&mut rng, n, classes);
        let pred = random_map(&mut rng, n, classes);
        let mut cm = ConfusionMatrix::new(classes as usize);
        cm.update(&pred, &truth).unwrap();
        let g = groups(&[0], &(1..classes as usize).collect::<Vec<_>>());
        let r = iou_report(&cm, &g).unwrap();
        let oracle: Vec<Option<f64>> = (0..classes).map(|c| iou_from_pixels(&pred, &truth, c)).collect();
        assert_eq!(r.iou, oracle);
        let present: Vec<f64> = oracle.iter().flatten().copied().collect();
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        let std = (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / present.len() as f64).sqrt();
        assert!((r.miou - mean).abs() < 1e-12);
        assert!((r.iou_std - std).abs() < 1e-12);
    }
}
