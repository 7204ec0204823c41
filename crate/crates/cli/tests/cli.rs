use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seeds = [0]

[model]
widths = [4, 6, 8]

[model.filter]
lpf_kind = "mean"
dimensionality = "two_d"
kernel_size = 3
position = 1

[train]
epochs = 1
batch_size = 32

[data]
train_size = 96
val_size = 40
probe_train_size = 60
probe_val_size = 30

[tta]
corruptions = ["gaussian_noise"]
severities = [5]

[probe]
epochs = 1
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edgefilter"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).env_remove("EDGEFILTER_DATA_DIR").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_every_verb() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for verb in ["train", "tta", "ablate", "type-ablation", "control-conv", "probe", "analyze"] {
        assert!(text.contains(verb), "{verb} missing from help");
    }
}

#[test]
fn config_errors_exit_2_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("position = 1", "position = 9"));
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("filter.position"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());

    let cfg = write_config(dir.path(), "[train]\nepochs = 0\n");
    let o = run(&["type-ablation", "--config", cfg.to_str().unwrap(), "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());

    let o = run(&["train", "--config", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--seeds", "2", "--seed-list", "1,2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["tta", "--checkpoints", "nowhere/*/checkpoint.defc"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    fs::write(dir.path().join("junk.defc"), b"DEFCxx").unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = run(&["probe", "--config", cfg.to_str().unwrap(), "--checkpoint", "junk.defc"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let cfg = write_config(dir.path(), &TINY.replace("[data]\n", "[data]\nname = \"mnist\"\n"));
    let o = run(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("EDGEFILTER_DATA_DIR"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY
        .replace("[train]\n", "[train]\noptimizer = \"sgd\"\nlr = 1e38\n")
        .replace("[model]\n", "[model]\nnorm = \"none\"\n");
    let cfg = write_config(dir.path(), &body);
    let o = run(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn train_tta_probe_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();

    let o = run(&["train", "--config", cfg, "--seeds", "2", "--out", "runs", "--jobs", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let mut runs: Vec<String> = fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    runs.sort();
    assert_eq!(runs, ["edge-mean-k3-p1-s0", "edge-mean-k3-p1-s1"]);

    let o = run(&["tta", "--config", cfg, "--out", "runs"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let tta = fs::read_to_string(dir.path().join("runs/tta_results.csv")).unwrap();
    // source + three methods on one stream, per run
    assert_eq!(tta.lines().count(), 1 + 2 * 4);

    let ckpt = "runs/edge-mean-k3-p1-s0/checkpoint.defc";
    let o = run(&["probe", "--config", cfg, "--checkpoint", ckpt, "--out", "probe"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("probe/probe.csv").exists());

    let o = run(&["analyze", "runs"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let stats = fs::read(dir.path().join("runs/stats.csv")).unwrap();
    let o = run(&["analyze", "runs"], dir.path());
    assert!(o.status.success());
    assert_eq!(fs::read(dir.path().join("runs/stats.csv")).unwrap(), stats);
    assert!(dir.path().join("runs/edge-mean-k3-p1-s1/spectrum.csv").exists());
}
