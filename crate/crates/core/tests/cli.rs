use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tactile_guidance::config::RunConfig;

const TINY: &str = r#"
schema_version = 1

[seeds]
root = 5

[scheduler]
family = "flow"

[policy]
hidden = 32
time_frequencies = 4

[policy.train]
epochs = 2
batch_size = 64

[cpm.model]
model_dim = 16
heads = 2
layers = 1
ffn_dim = 32
encoder_hidden = 16
embed_dim = 16
conv_channels = 8
action_hidden = [32, 16]

[cpm.train]
epochs = 2
batch_size = 32

[eval]
rollouts = 6
repeats = 1
"#;

fn tguide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tguide")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Scratch directory with the tiny config, a dataset and trained models.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("tiny.toml"), TINY).unwrap();
        let cfg = f.path("tiny.toml");
        let data = f.path("data");
        let out = tguide(&["collect", "--n", "8", "--seed", "5", "--out", s(&data), "--config", s(&cfg)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        for cmd in ["train-policy", "train-cpm"] {
            let dest = f.path(cmd);
            let out = tguide(&[cmd, "--config", s(&cfg), "--data", s(&data), "--out", s(&dest)]);
            assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        }
        f
    })
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&tguide(&[])), 2);
    assert_eq!(code(&tguide(&["collect", "--bogus"])), 2);
    assert_eq!(code(&tguide(&["eval"])), 2);
    assert_eq!(code(&tguide(&["teleport"])), 2);
    let help = tguide(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("validate-math"));
}

#[test]
fn collect_smoke_and_reproducible_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one");
    let out = tguide(&["collect", "--n", "1", "--seed", "3", "--out", s(&one)]);
    assert_eq!(code(&out), 0);
    let (manifest, eps) = tactile_guidance::episode::load_dataset(&one).unwrap();
    assert_eq!((manifest.count, eps.len()), (1, 1));
    assert!(one.join("config.toml").exists());

    let digest = |name: &str| {
        let p = dir.path().join(name);
        let out = tguide(&["collect", "--n", "100", "--seed", "9", "--out", s(&p)]);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        text.rsplit("sha256 ").next().unwrap().trim_end_matches([')', '\n']).to_string()
    };
    let (a, b) = (digest("a"), digest("b"));
    assert_eq!(a.len(), 64);
    assert_eq!(a, b);

    assert_eq!(code(&tguide(&["collect", "--n", "0", "--out", s(&dir.path().join("z"))])), 1);
    let file = dir.path().join("plain_file");
    std::fs::write(&file, "x").unwrap();
    let bad = file.join("sub");
    let out = tguide(&["collect", "--n", "1", "--out", s(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn output_directories_hold_the_resolved_config() {
    let f = fixture();
    for dir in ["data", "train-policy", "train-cpm"] {
        let cfg = RunConfig::load(f.path(dir).join("config.toml")).unwrap();
        let tiny = RunConfig::load(f.path("tiny.toml")).unwrap();
        assert_eq!(cfg.policy_config(), tiny.policy_config());
        assert_eq!(cfg.guidance(), tiny.guidance());
        assert_eq!(cfg.cpm, tiny.cpm);
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn training_resumes_where_it_stopped() {
    let f = fixture();
    let cfg = f.path("tiny.toml");
    let data = f.path("data");
    let dir = tempfile::tempdir().unwrap();
    for (cmd, file) in [("train-policy", "loss.csv"), ("train-cpm", "metrics.csv")] {
        let out_dir = dir.path().join(cmd);
        let args = |extra: &[&'static str]| {
            let mut v = vec![cmd, "--config", s(&cfg), "--data", s(&data), "--out", s(&out_dir)];
            v.extend_from_slice(extra);
            v.into_iter().map(str::to_string).collect::<Vec<_>>()
        };
        let run = |a: Vec<String>| tguide(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&run(args(&[]))), 0);
        let first = csv_rows(&out_dir.join(file));
        assert_eq!(code(&run(args(&["--resume", "--epochs", "1"]))), 0);
        let all = csv_rows(&out_dir.join(file));
        assert!(all.len() > first.len());
        assert_eq!(&all[..first.len()], &first[..]);
        let steps: Vec<usize> = all.iter().map(|r| r[0].parse().unwrap()).collect();
        assert!(steps.windows(2).all(|w| w[1] == w[0] + 1), "{cmd}: {steps:?}");
    }
    let missing = dir.path().join("nowhere");
    let out = tguide(&["train-policy", "--data", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 1);
}

fn eval_args<'a>(f: &'a Fixture, out: &'a Path, extra: &[&'a str]) -> Vec<String> {
    let policy = f.path("train-policy");
    let cfg = f.path("tiny.toml");
    let mut v: Vec<String> = ["eval", "--policy", s(&policy), "--config", s(&cfg), "--out", s(out), "--seed", "3"]
        .iter()
        .map(|x| x.to_string())
        .collect();
    v.extend(extra.iter().map(|x| x.to_string()));
    v
}

fn run_owned(args: Vec<String>) -> Output {
    tguide(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn eval_with_zero_scale_matches_the_unguided_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain");
    let zero = dir.path().join("zero");
    let cpm = f.path("train-cpm");
    let out = run_owned(eval_args(f, &plain, &[]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("±"));
    let out = run_owned(eval_args(f, &zero, &["--cpm", s(&cpm), "--eta", "0"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read_to_string(plain.join("rollouts.jsonl")).unwrap();
    let b = std::fs::read_to_string(zero.join("rollouts.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 6);
    assert_eq!(a, b);

    let steered = dir.path().join("steered");
    let out = run_owned(eval_args(f, &steered, &["--cpm", s(&cpm), "--eta", "10", "--ktg", "0.3"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_owned(eval_args(f, &steered, &["--cpm", s(&cpm), "--ktg", "1.5"]));
    assert_eq!(code(&out), 1);
}

#[test]
fn validate_math_rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, r#"{"components": []}"#).unwrap();
    assert_eq!(code(&tguide(&["validate-math", "--spec", s(&empty)])), 1);
    let single = dir.path().join("single.json");
    std::fs::write(&single, r#"{"components": [{"mean": 0.0, "variance": 1.0, "weight": 1.0, "label": 0}]}"#).unwrap();
    assert_eq!(code(&tguide(&["validate-math", "--spec", s(&single), "--samples", "1000"])), 1);
    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{").unwrap();
    assert_eq!(code(&tguide(&["validate-math", "--spec", s(&garbled)])), 1);
}

#[test]
fn sweep_rows_and_single_cell_equivalence() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (policy, cpm, cfg) = (f.path("train-policy"), f.path("train-cpm"), f.path("tiny.toml"));
    let out_dir = dir.path().join("sweep");
    let out = tguide(&[
        "sweep", "--policy", s(&policy), "--cpm", s(&cpm), "--config", s(&cfg), "--param", "eta",
        "--grid", "0,1,5,10,20", "--repeats", "1", "--rollouts", "2", "--out", s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&out_dir.join("sweep.csv"));
    assert_eq!(rows.len(), 5);
    let etas: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(etas, ["0", "1", "5", "10", "20"]);

    let one = dir.path().join("one");
    let out = tguide(&[
        "sweep", "--policy", s(&policy), "--cpm", s(&cpm), "--config", s(&cfg), "--param", "ktg",
        "--grid", "0.2", "--fixed", "4", "--repeats", "1", "--rollouts", "6", "--seed", "3", "--out", s(&one),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cell: f64 = csv_rows(&one.join("sweep.csv"))[0][2].parse().unwrap();
    let ev = dir.path().join("eval");
    let out = run_owned(eval_args(f, &ev, &["--cpm", s(&cpm), "--eta", "4", "--ktg", "0.2"]));
    assert_eq!(code(&out), 0);
    let rate: f64 = csv_rows(&ev.join("metrics.csv"))[0][1].parse().unwrap();
    assert_eq!(cell, rate);
}

#[test]
fn latency_reports_each_window() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = tguide(&[
        "latency", "--policy", s(&f.path("train-policy")), "--cpm", s(&f.path("train-cpm")),
        "--config", s(&f.path("tiny.toml")), "--ktg", "0.1,0.5", "--trials", "3", "--out", s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("latency.csv"));
    assert_eq!(rows.len(), 2);
    let steps: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(steps, [1, 5]);
}
