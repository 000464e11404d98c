use std::path::{Path, PathBuf};

use mdsrn_cli::{run_with_output, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, EXIT_USAGE};
use mdsrn_core::checkpoint::load_checkpoint;
use mdsrn_core::nn::Parameterized;

const CONFIG: &str = r#"
[volume]
name = "blob"

[volume.synthetic]
dims = [8, 8, 8]
fields = [
  { kind = "gaussian-mixture", centers = [[0.0, 0.0, 0.0]], widths = [0.5], amplitudes = [1.0] },
  { kind = "shell", center = [0.0, 0.0, 0.0], radius = 0.6, thickness = 0.1, amplitude = 0.5 },
]

[train]
kind = "rmdsrn"
steps = 30
batch_size = 256
members = 2
encoder = { kind = "dense", resolution = [4, 4, 4], features = 2 }
decoder = { hidden = [8] }

[schedule]
lambda_max = 2.0
growth_rate = 10.0

[render]
width = 12
height = 10
"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mdsrn").chain(args.iter().copied());
    let code = run_with_output(argv, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(cfg: &Path, out: &Path, extra: &[&str]) -> Run {
    let mut args = vec!["train", "--config", s(cfg), "--out", s(out)];
    for e in extra {
        args.push("--set");
        args.push(e);
    }
    run(&args)
}

#[test]
fn train_then_evaluate_produces_finite_metrics() {
    let (dir, cfg) = setup();
    let ckpt = dir.path().join("m.usrn");
    let r = train(&cfg, &ckpt, &[]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let losses = std::fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    let lines: Vec<_> = losses.lines().collect();
    assert_eq!(lines[0], "step,lr,lambda,L_member,L_var,total");
    assert_eq!(lines.len(), 31);

    let csv = dir.path().join("metrics.csv");
    let r = run(&["evaluate", "-c", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&csv), "--name", "tiny"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let mut lines = r.stdout.lines();
    assert_eq!(lines.next().unwrap(), "model,psnr_db,corr,jist_1pct,jist_5pct,nll");
    let row: Vec<_> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "tiny");
    for v in &row[1..] {
        assert!(v.parse::<f64>().unwrap().is_finite(), "{v}");
    }
    assert_eq!(std::fs::read_to_string(csv).unwrap(), r.stdout);
}

#[test]
fn zero_lambda_max_matches_plain_multi_decoder() {
    let (dir, cfg) = setup();
    let a = dir.path().join("r.usrn");
    let b = dir.path().join("m.usrn");
    assert_eq!(train(&cfg, &a, &["schedule.lambda_max=0"]).code, EXIT_OK);
    assert_eq!(train(&cfg, &b, &["train.kind=mdsrn"]).code, EXIT_OK);
    let (ra, _) = load_checkpoint(&a).unwrap();
    let (rb, _) = load_checkpoint(&b).unwrap();
    assert_eq!(ra.flat_values(), rb.flat_values());
}

#[test]
fn synth_writes_a_loadable_volume() {
    let (dir, cfg) = setup();
    let raw = dir.path().join("blob.raw");
    let r = run(&["synth", "-c", s(&cfg), "--out", s(&raw)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert_eq!(std::fs::metadata(&raw).unwrap().len(), 8 * 8 * 8 * 4);

    // Training from the written file instead of the synthetic section.
    let ckpt = dir.path().join("f.usrn");
    let text = format!("[volume]\npath = \"blob.raw\"\n\n[train]\nsteps = 3\nbatch_size = 64\nmembers = 2\n\
         encoder = {{ kind = \"dense\", resolution = [3, 3, 3], features = 1 }}\ndecoder = {{ hidden = [4] }}\n");
    let file_cfg = dir.path().join("file.toml");
    std::fs::write(&file_cfg, text).unwrap();
    let r = run(&["train", "-c", s(&file_cfg), "--out", s(&ckpt)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
}

#[test]
fn info_and_render_smoke() {
    let (dir, cfg) = setup();
    let ckpt = dir.path().join("m.usrn");
    assert_eq!(train(&cfg, &ckpt, &["train.steps=2"]).code, EXIT_OK);
    let r = run(&["info", "--checkpoint", s(&ckpt)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r.stdout.contains("kind: rmdsrn"));
    assert!(r.stdout.contains("steps completed: 2"));

    let out_dir = dir.path().join("img");
    let r = run(&["render", "-c", s(&cfg), "--checkpoint", s(&ckpt), "--out-dir", s(&out_dir)]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    for name in ["mean.png", "statistical.png", "variance_top.png", "error_top.png"] {
        assert!(out_dir.join(name).is_file(), "{name}");
    }
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let (_dir, cfg) = setup();
    let r = run(&[
        "sweep",
        "-c",
        s(&cfg),
        "--set",
        "train.steps=2",
        "--set",
        "sweep.lambda_max=[0.0, 1.0]",
        "--set",
        "sweep.members=[2, 3]",
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let names: Vec<_> = r
        .stdout
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(names, ["rmdsrn_lmax0_m2", "rmdsrn_lmax0_m3", "rmdsrn_lmax1_m2", "rmdsrn_lmax1_m3"]);
}

#[test]
fn exit_codes() {
    let (dir, cfg) = setup();
    let missing = dir.path().join("nope.usrn");
    let r = run(&["evaluate", "-c", s(&cfg), "--checkpoint", s(&missing)]);
    assert_eq!(r.code, EXIT_MISSING, "{}", r.stderr);
    assert_eq!(run(&["info", "--checkpoint", s(&missing)]).code, EXIT_MISSING);
    assert_eq!(run(&["train", "-c", s(&dir.path().join("none.toml")), "--out", "x"]).code, EXIT_MISSING);

    assert_eq!(run(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(run(&["train"]).code, EXIT_USAGE);
    assert_eq!(run(&["--help"]).code, EXIT_OK);

    let r = train(&cfg, &dir.path().join("x.usrn"), &["train.not_a_key=1"]);
    assert_eq!(r.code, EXIT_CONFIG);
    assert!(r.stderr.contains("not_a_key"), "{}", r.stderr);
    let r = train(&cfg, &dir.path().join("x.usrn"), &["train.members=1"]);
    assert_eq!(r.code, EXIT_CONFIG);
}
