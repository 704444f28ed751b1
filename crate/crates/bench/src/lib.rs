//! Shared fixtures for the benchmarks.

use fairseg::class_stats::{estimate_distribution, DEFAULT_SMOOTHING};
use fairseg::{ClassDistribution, DatasetPack, DomainConfig, Result, SceneSpec};

/// Small default-resolution source and target packs with the source class
/// distribution.
pub fn packs(n: usize) -> Result<(DatasetPack, DatasetPack, ClassDistribution)> {
    let spec = SceneSpec::default();
    let source = DatasetPack::generate(&spec, &DomainConfig::source(spec.classes()), n, 0)?;
    let target = DatasetPack::generate(&spec, &DomainConfig::target(spec.classes()), n, 1_000_000)?;
    let dist = estimate_distribution(&source, DEFAULT_SMOOTHING)?;
    Ok((source, target, dist))
}
