use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairseg::data::DEFAULT_PROFILE;
use fairseg::{Checkpoint, DatasetPack, DomainConfig, SceneSpec, SegmenterConfig, TrainState};

const SMALL: &str = "\
data.height=16
data.width=16
data.n_source=8
data.n_target=8
cond.grid=4
cond.width=8
cond.depth=1
cond.heads=2
cond.steps=5
cond.batch=2
train.steps=3
train.batch=2
train.anchors=2
eval.size=4
eval.interval=2
";

fn fairseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fairseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    fairseg(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.cfg");
    std::fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--out-dir", s(&data)]);
    Workspace { _dir: dir, root, config, data }
}

#[test]
fn gen_data_is_deterministic() {
    let ws = workspace();
    let again = ws.root.join("again");
    let stdout = ok(&["gen-data", "--config", s(&ws.config), "--out-dir", s(&again)]);
    assert!(stdout.starts_with("class_id,count,p,weight,log_ratio,group"));
    for name in ["source.pack", "target.pack", "target_eval.pack"] {
        let a = std::fs::read(ws.data.join(name)).unwrap();
        assert_eq!(&a[..4], b"FSEG");
        assert_eq!(a, std::fs::read(again.join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn histogram_shares_follow_the_profile() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.cfg");
    std::fs::write(&config, "data.n_source=100\ndata.n_target=1\neval.size=1\n").unwrap();
    let stdout = ok(&["gen-data", "--config", s(&config), "--out-dir", s(dir.path())]);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), DEFAULT_PROFILE.len());
    for (row, want) in rows.iter().zip(DEFAULT_PROFILE) {
        let p: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!((p - want).abs() <= 0.02, "{row} vs {want}");
    }
}

#[test]
fn pretrain_cond_writes_a_loadable_checkpoint() {
    let ws = workspace();
    let zero = ws.root.join("zero.cfg");
    std::fs::write(&zero, format!("{SMALL}cond.steps=0\n").replace("cond.steps=5\n", "")).unwrap();
    let out = ws.root.join("g0");
    ok(&["pretrain-cond", "--config", s(&zero), "--data", s(&ws.data), "--out", s(&out)]);
    let path = out.join("condnet.ckpt");
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.encode().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(ck.counter("step"), Some(0));

    // Zero steps leaves the seeded initial weights.
    use rand::SeedableRng;
    let mut params = fairseg::NetworkParams::<f32>::new();
    let cfg = fairseg::RunConfig::parse(&std::fs::read_to_string(&zero).unwrap()).unwrap();
    fairseg::CondNet::init(cfg.cond_config(), &mut params, &mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.cond.seed)).unwrap();
    assert_eq!(ck.tensors.len(), params.len());
    for ((n, t), (pn, pt)) in ck.tensors.iter().zip(params.iter()) {
        assert_eq!((n.as_str(), t.data()), (pn, pt.data()));
    }

    let trained = ws.root.join("g5");
    let stdout = ok(&["pretrain-cond", "--config", s(&ws.config), "--data", s(&ws.data), "--out", s(&trained)]);
    assert!(stdout.contains("masked accuracy"));
    let curve = std::fs::read_to_string(trained.join("cond_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 5);
}

#[test]
fn train_runs_each_ablation_deterministically() {
    let ws = workspace();
    let run = |ablation: &str, out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&ws.config), "--ablation", ablation, "--data", s(&ws.data), "--out", s(out)];
        args.extend_from_slice(extra);
        fairseg(&args)
    };
    let a1 = ws.root.join("a1");
    let a2 = ws.root.join("a2");
    let first = run("A", &a1, &[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let log = String::from_utf8_lossy(&first.stderr);
    assert!(log.contains("# resolved config") && log.contains("train.ablation=A"));
    assert!(log.contains("class=0 cond=0"));
    assert!(run("A", &a2, &[]).status.success());
    let csv = std::fs::read_to_string(a1.join("metrics.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(a2.join("metrics.csv")).unwrap());
    // Rows at steps 0, 2 and 3.
    assert_eq!(csv.lines().count(), 1 + 3);
    assert!(csv.starts_with("step,loss_total,loss_s,loss_t,loss_class,loss_cond,miou"));

    assert_eq!(run("C", &ws.root.join("c0"), &[]).status.code(), Some(2));
    let g = ws.root.join("g");
    ok(&["pretrain-cond", "--config", s(&ws.config), "--data", s(&ws.data), "--out", s(&g)]);
    let c = run("C", &ws.root.join("c1"), &["--condnet", s(&g.join("condnet.ckpt"))]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    assert!(run("B", &ws.root.join("b1"), &[]).status.success());

    // Gradient report on the trained checkpoint.
    let report = ws.root.join("grad");
    ok(&["grad-report", "--checkpoint", s(&a1.join("final.ckpt")), "--data", s(&ws.data), "--out", s(&report)]);
    let rows = std::fs::read_to_string(report.join("grad_report.csv")).unwrap();
    let sum: f64 = rows.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert_eq!(rows.lines().count(), 1 + 8);

    let empty = ws.root.join("empty.pack");
    DatasetPack { height: 16, width: 16, classes: 8, samples: vec![] }.write(&empty).unwrap();
    assert_eq!(code(&["grad-report", "--checkpoint", s(&a1.join("final.ckpt")), "--data", s(&empty), "--out", s(&report)]), 2);

    let eval_out = ws.root.join("eval");
    let stdout = ok(&["eval", "--checkpoint", s(&a1.join("final.ckpt")), "--data", s(&ws.data), "--out", s(&eval_out)]);
    assert!(stdout.contains("bound_check") && stdout.contains("holds"));
}

#[test]
fn errors_map_to_exit_codes() {
    let ws = workspace();
    let bad = ws.root.join("bad.cfg");
    std::fs::write(&bad, "data.colour=3\n").unwrap();
    assert_eq!(code(&["gen-data", "--config", s(&bad), "--out-dir", s(&ws.root.join("x"))]), 2);
    assert_eq!(code(&["gen-data", "--config", s(&ws.root.join("missing.cfg")), "--out-dir", s(&ws.root.join("x"))]), 3);
    assert_eq!(
        code(&["train", "--config", s(&ws.config), "--ablation", "A", "--data", s(&ws.root.join("nowhere")), "--out", s(&ws.root.join("o"))]),
        3
    );
    let junk = ws.root.join("junk.ckpt");
    std::fs::write(&junk, b"NOPE and more bytes").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", s(&junk), "--data", s(&ws.data), "--out", s(&ws.root.join("e"))]), 2);
    assert_eq!(code(&["train", "--ablation", "D", "--data", "x", "--out", "y"]), 2);
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { height: 16, width: 16, ..SceneSpec::default() };
    let clean = DomainConfig { noise_std: 0.0, texture_amp: 0.0, ..DomainConfig::source(8) };
    let pack_path = dir.path().join("clean.pack");
    let pack = DatasetPack::generate(&spec, &clean, 6, 40).unwrap();
    pack.write(&pack_path).unwrap();

    // Everything zero except the direct colour path, which scores each
    // class by negative squared distance to its palette colour.
    let mut state = TrainState::new(SegmenterConfig { height: 16, width: 16, ..SegmenterConfig::default() }, 0).unwrap();
    for i in 0..state.params.len() {
        state.params.at_mut(i).data_mut().fill(0.0);
    }
    let (w, b) = state.seg.skip_indices();
    let scale = 200.0f32;
    for (c, color) in clean.colors.iter().enumerate() {
        for k in 0..3 {
            state.params.at_mut(w).data_mut()[k * 8 + c] = 2.0 * scale * color[k];
        }
        state.params.at_mut(b).data_mut()[c] = -scale * color.iter().map(|v| v * v).sum::<f32>();
    }
    let ckpt = dir.path().join("oracle.ckpt");
    state.save(&ckpt).unwrap();

    let out = dir.path().join("report");
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&pack_path), "--out", s(&out)]);
    assert!(stdout.contains("miou 1.000000"), "{stdout}");
    assert!(stdout.contains("iou_std 0.000000"), "{stdout}");
    assert!(stdout.contains("holds"));
    let present = {
        let mut seen = [false; 8];
        pack.samples.iter().flat_map(|x| &x.label).for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&v| v).count()
    };
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + present);
}
