use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fairseg::class_stats::{
    distribution_csv, estimate_distribution, split_groups, GroupSplit, DEFAULT_SMOOTHING,
};
use fairseg::cond::{masked_accuracy, pool_pack, token_marginal, train_cond};
use fairseg::config::{EVAL_SEED_OFFSET, TARGET_SEED_OFFSET};
use fairseg::data::{generate_dataset, pixel_class_histogram};
use fairseg::metrics::report_csv;
use fairseg::trainer::{
    cond_checkpoint, cond_from_checkpoint, evaluate, grad_per_class, metrics_csv, train_loop,
    FrozenCond, LoopData,
};
use fairseg::{
    Ablation, Checkpoint, ClassDistribution, CondNet, DatasetPack, Error, NetworkParams,
    RunConfig, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SOURCE_PACK: &str = "source.pack";
const TARGET_PACK: &str = "target.pack";
const EVAL_PACK: &str = "target_eval.pack";
const CONFIG_META_PREFIX: &str = "config.";
const SOURCE_COUNTS_META: &str = "source.counts";

#[derive(Parser)]
#[command(name = "fairseg", version, about = "Class-fair domain adaptation on a synthetic segmentation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source, target and held-out target packs.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pretrain the structure network on source label grids.
    PretrainCond {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt the segmenter under ablation A, B or C.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Ablation,
        #[arg(long)]
        data: PathBuf,
        /// Structure-network checkpoint, required for ablation C.
        #[arg(long)]
        condnet: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class IoU, group means, IoU spread and loss-gap report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A pack file, or a gen-data directory (uses its held-out target pack).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalised per-class gradient magnitudes on a labelled batch.
    GradReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A pack file, or a gen-data directory (uses its source pack).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("expected A, B or C, got {s}"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
            RunConfig::parse(&text).with_context(|| format!("reading config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    eprintln!("# resolved config");
    eprint!("{}", cfg.to_text());
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn read_pack(path: &Path) -> Result<DatasetPack> {
    Ok(DatasetPack::read(path)?)
}

/// A pack path, or `default` inside a directory.
fn pack_path(data: &Path, default: &str) -> PathBuf {
    if data.is_dir() {
        data.join(default)
    } else {
        data.to_path_buf()
    }
}

fn push_config_meta(ck: &mut Checkpoint, cfg: &RunConfig) {
    for line in cfg.to_text().lines() {
        let (k, v) = line.split_once('=').expect("to_text emits key=value lines");
        ck.push_meta(format!("{CONFIG_META_PREFIX}{k}"), v);
    }
}

fn config_from_meta(ck: &Checkpoint) -> Result<Option<RunConfig>> {
    let text: String = ck
        .meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(CONFIG_META_PREFIX).map(|k| format!("{k}={v}\n")))
        .collect();
    if text.is_empty() {
        return Ok(None);
    }
    Ok(Some(RunConfig::parse(&text).context("config stored in checkpoint")?))
}

fn source_distribution(ck: &Checkpoint, fallback: &DatasetPack) -> Result<ClassDistribution> {
    match ck.meta(SOURCE_COUNTS_META) {
        Some(raw) => {
            let counts = raw
                .split(',')
                .map(str::parse)
                .collect::<Result<Vec<u64>, _>>()
                .map_err(|_| Error::Config(format!("bad {SOURCE_COUNTS_META} meta")))?;
            Ok(ClassDistribution::from_counts(&counts, DEFAULT_SMOOTHING)?)
        }
        None => Ok(estimate_distribution(fallback, DEFAULT_SMOOTHING)?),
    }
}

fn check_pack_matches(pack: &DatasetPack, state: &TrainState) -> Result<()> {
    let c = &state.seg.config;
    if (pack.height, pack.width, pack.classes) != (c.height, c.width, c.classes) {
        return Err(Error::Config(format!(
            "pack is {}x{} with {} classes, checkpoint expects {}x{} with {}",
            pack.height, pack.width, pack.classes, c.height, c.width, c.classes
        ))
        .into());
    }
    Ok(())
}

fn gen_data(config: Option<&Path>, out_dir: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    log_config(&cfg);
    create_dir(out_dir)?;
    let spec = cfg.scene_spec();
    let seed = cfg.data.seed;
    let source = generate_dataset(&spec, &cfg.source_domain(), cfg.data.n_source, seed, &out_dir.join(SOURCE_PACK))?;
    generate_dataset(
        &spec,
        &cfg.target_domain(),
        cfg.data.n_target,
        seed.wrapping_add(TARGET_SEED_OFFSET),
        &out_dir.join(TARGET_PACK),
    )?;
    generate_dataset(
        &spec,
        &cfg.target_domain(),
        cfg.eval.size,
        seed.wrapping_add(EVAL_SEED_OFFSET),
        &out_dir.join(EVAL_PACK),
    )?;
    let dist = estimate_distribution(&source, DEFAULT_SMOOTHING)?;
    let groups = split_groups(&dist, cfg.eval.group_threshold)?;
    let csv = distribution_csv(&dist, &groups);
    write_file(&out_dir.join("class_histogram.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn pretrain_cond(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    log_config(&cfg);
    let source = read_pack(&data.join(SOURCE_PACK))?;
    let net_cfg = cfg.cond_config();
    let grids = pool_pack(&source, (net_cfg.grid_h, net_cfg.grid_w))?;
    let mut params = NetworkParams::<f32>::new();
    let net = CondNet::init(net_cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(cfg.cond.seed))?;
    let train_cfg = cfg.cond_train();
    let report = train_cond(&net, &mut params, &grids, &train_cfg, |step, loss| {
        if step % 100 == 0 || step + 1 == train_cfg.steps {
            eprintln!("cond step {step} loss {loss:.5}");
        }
    })?;

    create_dir(out)?;
    let cond = FrozenCond { net, params };
    let mut ck = cond_checkpoint(&cond, report.losses.len() as u64);
    push_config_meta(&mut ck, &cfg);
    ck.save(&out.join("condnet.ckpt"))?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    write_file(&out.join("cond_loss.csv"), &curve)?;

    let held_out = data.join(EVAL_PACK);
    let eval_grids = if held_out.exists() { pool_pack(&read_pack(&held_out)?, (net_cfg.grid_h, net_cfg.grid_w))? } else { grids.clone() };
    let marginal = token_marginal(&grids, net_cfg.classes);
    let acc = masked_accuracy(&cond.net, &cond.params, &eval_grids, &marginal, &train_cfg.mix, cfg.cond.seed ^ 0x5eed)?;
    if let Some(last) = report.final_loss() {
        println!("final training loss {last:.5}");
    }
    println!(
        "masked accuracy {:.4} vs marginal baseline {:.4} ({:+.1} points, {} hidden tokens)",
        acc.model,
        acc.baseline,
        100.0 * (acc.model - acc.baseline),
        acc.hidden_tokens
    );
    Ok(())
}

fn train(config: Option<&Path>, ablation: Ablation, data: &Path, condnet: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.train.ablation = ablation;
    cfg.train.validate()?;
    if ablation == Ablation::C && condnet.is_none() {
        return Err(Error::Config("ablation C requires --condnet".into()).into());
    }
    log_config(&cfg);
    let w = cfg.train.weights();
    eprintln!("# effective loss weights: lambda_t={} class={} cond={}", w.target, w.class, w.cond);

    let source = read_pack(&data.join(SOURCE_PACK))?;
    let target = read_pack(&data.join(TARGET_PACK))?;
    let eval = read_pack(&data.join(EVAL_PACK))?;
    let dist = estimate_distribution(&source, DEFAULT_SMOOTHING)?;
    let groups = split_groups(&dist, cfg.eval.group_threshold)?;

    let mut state = TrainState::new(cfg.segmenter_config(), cfg.train.seed)?;
    for pack in [&source, &target, &eval] {
        check_pack_matches(pack, &state)?;
    }
    if let (Some(path), true) = (condnet, w.cond > 0.0) {
        let cond = cond_from_checkpoint(&Checkpoint::load(path)?)?;
        if cond.net.config.classes != cfg.data.classes {
            return Err(Error::Config("structure network class count differs from the data".into()).into());
        }
        state.cond = Some(cond);
    }

    let loop_data = LoopData {
        source: &source,
        target: Some(&target),
        eval: &eval.samples,
        dist: &dist,
        groups: &groups,
        eval_interval: cfg.eval.interval,
    };
    let outcome = train_loop(&mut state, &cfg.train, &loop_data, |row| {
        let r = &row.report.iou;
        eprintln!(
            "step {} loss {:.4} miou {:.4} majority {:.4} minority {:.4} std {:.4} gap {:.4}",
            row.step, row.losses.total, r.miou, r.miou_majority, r.miou_minority, r.iou_std, row.report.fairness_gap
        );
    })?;

    create_dir(out)?;
    write_file(&out.join("metrics.csv"), &metrics_csv(&outcome.rows, cfg.data.classes))?;
    let mut ck = state.to_checkpoint();
    push_config_meta(&mut ck, &cfg);
    let counts: Vec<String> = pixel_class_histogram(&source).iter().map(u64::to_string).collect();
    ck.push_meta(SOURCE_COUNTS_META, counts.join(","));
    ck.save(&out.join("final.ckpt"))?;
    if let Some(last) = outcome.rows.last() {
        let r = &last.report.iou;
        println!(
            "ablation {} step {}: miou {:.4} majority {:.4} minority {:.4} iou_std {:.4}",
            ablation.name(),
            last.step,
            r.miou,
            r.miou_majority,
            r.miou_minority,
            r.iou_std
        );
    }
    Ok(())
}

fn load_state(path: &Path) -> Result<(Checkpoint, TrainState, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let state = TrainState::from_checkpoint(&ck)?;
    let cfg = config_from_meta(&ck)?.unwrap_or_default();
    Ok((ck, state, cfg))
}

fn groups_for(ck: &Checkpoint, pack: &DatasetPack, cfg: &RunConfig) -> Result<(ClassDistribution, GroupSplit)> {
    let dist = source_distribution(ck, pack)?;
    if dist.classes() != pack.classes {
        return Err(Error::Config("source class counts mismatch the pack".into()).into());
    }
    let groups = split_groups(&dist, cfg.eval.group_threshold)?;
    Ok((dist, groups))
}

fn eval_cmd(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (ck, state, cfg) = load_state(checkpoint)?;
    let pack = read_pack(&pack_path(data, EVAL_PACK))?;
    check_pack_matches(&pack, &state)?;
    let (_, groups) = groups_for(&ck, &pack, &cfg)?;
    let report = evaluate(&state.seg, &state.params, &pack.samples, &groups)?;
    create_dir(out)?;
    write_file(&out.join("report.csv"), &report_csv(&report, &groups))?;
    let r = &report.iou;
    println!("miou {:.6}", r.miou);
    println!("miou_majority {:.6}", r.miou_majority);
    println!("miou_minority {:.6}", r.miou_minority);
    println!("iou_std {:.6}", r.iou_std);
    println!("fairness_gap {:.6}", report.fairness_gap);
    println!(
        "bound_check gap {:.6} <= bound {:.6}: {}",
        report.bound.gap,
        report.bound.bound,
        if report.bound.holds { "holds" } else { "violated" }
    );
    Ok(())
}

fn grad_report(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (ck, state, cfg) = load_state(checkpoint)?;
    let pack = read_pack(&pack_path(data, SOURCE_PACK))?;
    check_pack_matches(&pack, &state)?;
    let (dist, _) = groups_for(&ck, &pack, &cfg)?;
    let batch: Vec<_> = pack.samples.iter().take(cfg.train.batch).collect();
    let magnitudes = grad_per_class(&state.seg, &state.params, &batch, &cfg.train, &dist)?;
    let mut csv = String::from("class_id,normalized_grad_magnitude\n");
    for (c, m) in magnitudes.iter().enumerate() {
        csv.push_str(&format!("{c},{m}\n"));
    }
    create_dir(out)?;
    write_file(&out.join("grad_report.csv"), &csv)?;
    print!("{csv}");
    let max = magnitudes.iter().cloned().fold(f64::MIN, f64::max);
    let min = magnitudes.iter().cloned().fold(f64::MAX, f64::min);
    println!("max/min ratio {:.3} (ablation {})", max / min, cfg.train.ablation.name());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } => 3,
                Error::Divergence { .. } | Error::NonFinite(_) => 4,
                Error::Config(_) | Error::Shape { .. } | Error::Format { .. } | Error::Contract(_) | Error::Index { .. } => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, out_dir } => gen_data(config.as_deref(), out_dir),
        Command::PretrainCond { config, data, out } => pretrain_cond(config.as_deref(), data, out),
        Command::Train { config, ablation, data, condnet, out } => {
            train(config.as_deref(), *ablation, data, condnet.as_deref(), out)
        }
        Command::Eval { checkpoint, data, out } => eval_cmd(checkpoint, data, out),
        Command::GradReport { checkpoint, data, out } => grad_report(checkpoint, data, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
