use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn otfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otfs-isac")).args(args).output().expect("spawn")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = r#"
seed = 3

[scenario]
n_groups = 5
n_slots = 18

[predictor]
lookback = 6
width = 8
stacks = 1
blocks_per_stack = 2
max_epochs = 2

[preeq]
hidden = [8, 8, 8]
n_train = 6
n_test = 3
epochs = 2
rho_grid = [1.0, 0.25]

[sweep]
snr_db = [0.0, 10.0]
retrain_per_point = false
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_lists_every_verb() {
    let text = ok(&otfs(&["--help"]));
    for verb in [
        "generate-data",
        "train-predictor",
        "eval-predictor",
        "train-preeq",
        "sweep-power",
        "tradeoff",
        "complexity",
    ] {
        assert!(text.contains(verb), "{verb}");
    }
}

#[test]
fn complexity_table_matches_formula() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&otfs(&["complexity", "--out", out]));
    let csv = fs::read_to_string(dir.path().join("complexity.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("m,n,mn,order,conventional,preeq,reduction_pct"));
    assert!(csv.lines().any(|l| l.starts_with("16,16,256,2,16778240,1024,")));
    assert!(dir.path().join("complexity.config.toml").exists());
    assert!(fs::read_to_string(dir.path().join("version.txt")).unwrap().starts_with("otfs-isac "));
}

#[test]
fn missing_dataset_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = otfs(&["train-predictor", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generate-data"), "{err}");
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[preeq]\nrho_c = 2.0\n").unwrap();
    let out = otfs(&["complexity", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rho"));
}

#[test]
fn generate_data_is_reproducible_and_seed_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    let text = ok(&otfs(&["generate-data", "--config", &cfg, "--out", a.to_str().unwrap()]));
    assert!(text.contains("4 train, 1 test"), "{text}");
    ok(&otfs(&["generate-data", "--config", &cfg, "--out", b.to_str().unwrap()]));
    ok(&otfs(&["generate-data", "--config", &cfg, "--seed", "4", "--out", c.to_str().unwrap()]));
    for f in ["train.bin", "test.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert_ne!(fs::read(a.join(f)).unwrap(), fs::read(c.join(f)).unwrap());
    }
    let snapshot = fs::read_to_string(c.join("generate-data.config.toml")).unwrap();
    assert!(snapshot.contains("seed = 4"));
}

#[test]
fn full_pipeline_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let step = |verb: &str| ok(&otfs(&[verb, "--config", &cfg, "--out", out]));
    step("generate-data");
    step("train-predictor");
    step("eval-predictor");
    let weights = fs::read(Path::new(out).join("predictor.bin")).unwrap();
    let mape = fs::read(Path::new(out).join("mape.csv")).unwrap();
    step("eval-predictor");
    assert_eq!(fs::read(Path::new(out).join("predictor.bin")).unwrap(), weights);
    assert_eq!(fs::read(Path::new(out).join("mape.csv")).unwrap(), mape);

    step("train-preeq");
    let conv = fs::read_to_string(Path::new(out).join("convergence.csv")).unwrap();
    assert_eq!(conv.lines().count(), 1 + 3 + 1);
    step("sweep-power");
    let power = fs::read_to_string(Path::new(out).join("power.csv")).unwrap();
    assert_eq!(power.lines().count(), 1 + 2 * 4);
    step("tradeoff");
    let trade = fs::read_to_string(Path::new(out).join("tradeoff.csv")).unwrap();
    assert_eq!(trade.lines().count(), 1 + 3 * 2);
    let again = fs::read(Path::new(out).join("tradeoff.csv")).unwrap();
    step("tradeoff");
    assert_eq!(fs::read(Path::new(out).join("tradeoff.csv")).unwrap(), again);
}
