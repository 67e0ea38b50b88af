use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_loft-lab"));
    c.env_remove("LOFT_LAB_OUT");
    c
}

const SMOKE: &str = r#"
mode = "system"
seeds = [1]

[dataset]
source = "synthetic_images"
n = 32
n_test = 16
height = 6
width = 6

[schedule]
workers = 2
ell = 2

[pipeline]
protocols = ["loft", "dense"]
ratios = [0.5]
pretrain_epochs = 2
finetune_epochs = 1
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    let out = dir.path().join("out");
    let status = bin().arg("run").arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());
    for f in [
        "results.csv",
        "heatmap.csv",
        "curves.csv",
        "ledger.csv",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = bin().arg("report").arg(&out).output().unwrap();
    assert!(report.status.success());
    let text = String::from_utf8(report.stdout).unwrap();
    assert!(text.contains("ticket accuracy"));
    assert!(text.contains("loft-2"));
}

#[test]
fn env_var_sets_output_dir_and_seed_flag_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let status = bin()
            .env("LOFT_LAB_OUT", out)
            .arg("run")
            .arg(&cfg)
            .args(["--seed", "7"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
    assert!(std::fs::read_to_string(a.join("results.csv"))
        .unwrap()
        .contains("seed7/loft"));
}

#[test]
fn bad_config_reports_line_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "mode = \"system\"\n[pipeline]\nratios = [0.5]\nfinetune_epoch = 3\n",
    );
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn theory_subcommand_rejects_system_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "smoke.toml", SMOKE);
    let out = bin()
        .arg("theory")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn failed_cells_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMOKE.replace(
        "source = \"synthetic_images\"",
        "source = \"csv_file\"\ncsv_train = \"/nonexistent/train.csv\"",
    );
    let cfg = write(dir.path(), "broken.toml", &text);
    let status = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn check_passes() {
    let out = bin().arg("check").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
}
