use fairseg::data::DEFAULT_PROFILE;
use fairseg_bench::packs;

#[test]
fn packs_share_label_maps_and_shape() {
    let (source, target, dist) = packs(3).unwrap();
    assert_eq!(source.len(), 3);
    assert_eq!(target.len(), 3);
    assert_eq!((source.height, source.width), (64, 64));
    assert_eq!(dist.classes(), DEFAULT_PROFILE.len());
    assert!((dist.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_ne!(source.samples[0].image, target.samples[0].image);
}

#[test]
fn packs_are_deterministic() {
    let (a, _, _) = packs(2).unwrap();
    let (b, _, _) = packs(2).unwrap();
    assert_eq!(a.samples, b.samples);
}
