use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use edgefilter::data::CorruptionKind;
use edgefilter::experiment::{
    cmd_analyze, cmd_control_conv, cmd_train, cmd_tta, cmd_type_ablation, config_key, run_id, ExperimentConfig,
    CHECKPOINT_FILE, RUN_CONFIG_FILE,
};
use edgefilter::filters::FilterSpec;
use edgefilter::nn::load_checkpoint;
use edgefilter::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.widths = Some(vec![4, 6, 8]);
    cfg.model.filter = Some(FilterSpec::mean_2d(3).at(1));
    cfg.train.epochs = 1;
    cfg.train.batch_size = 32;
    cfg.data.train_size = 96;
    cfg.data.val_size = 40;
    cfg.tta.corruptions = vec![CorruptionKind::GaussianNoise];
    cfg.tta.severities = vec![5];
    cfg.seeds = vec![0, 1];
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn column(path: &Path, name: &str) -> BTreeSet<String> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].to_string()).collect()
}

#[test]
fn invalid_config_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let mut cfg = tiny(&out);
    cfg.model.filter = Some(FilterSpec::mean_2d(3).at(7));
    let err = cmd_train(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("filter.position"), "{err}");
    assert!(!out.exists());

    let mut cfg = tiny(&out);
    cfg.seeds = vec![3, 3];
    assert!(matches!(cmd_train(&cfg), Err(Error::Config(_))));
    cfg.seeds = vec![0];
    cfg.data.name = "imagenet".into();
    assert!(matches!(cmd_type_ablation(&cfg), Err(Error::Config(_))));
    assert!(!out.exists());
}

#[test]
fn unknown_keys_are_config_errors() {
    let err = ExperimentConfig::from_toml_str("[train]\nepoch = 3\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let cfg = ExperimentConfig::from_toml_str("seeds = [4]\n[train]\nepochs = 3\n").unwrap();
    assert_eq!((cfg.seeds.clone(), cfg.train.epochs), (vec![4], 3));
    assert_eq!(ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap(), cfg);
}

#[test]
fn filter_table_errors_name_the_problem() {
    let partial = "[model.filter]\nlpf_kind = \"mean\"\nkernel_size = 7\nposition = 1\n";
    let err = ExperimentConfig::from_toml_str(partial).unwrap_err();
    assert!(err.to_string().contains("dimensionality"), "{err}");
    let one = "lpf_kind = \"mean\"\ndimensionality = \"two_d\"\nkernel_size = 3\nposition = 1\n";
    let two = format!("[[model.filter]]\n{one}[[model.filter]]\n{one}");
    let err = ExperimentConfig::from_toml_str(&two).unwrap_err();
    assert!(err.to_string().contains("at most one"), "{err}");
    let cfg = ExperimentConfig::from_toml_str(&format!("[[model.filter]]\n{one}")).unwrap();
    assert_eq!(cfg.model.filter.unwrap().kernel_size, 3);
}

#[test]
fn pipeline_files_join_on_run_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let runs = cmd_train(&cfg).unwrap();
    assert_eq!(runs.len(), 2);
    for r in &runs {
        assert_eq!(r.run_id, run_id(&cfg.model, r.seed));
        assert_eq!(config_key(&r.run_id), "edge-mean-k3-p1");
        let m = load_checkpoint(r.dir.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(m.config().seed, r.seed);
        let saved = ExperimentConfig::load(r.dir.join(RUN_CONFIG_FILE)).unwrap();
        assert_eq!(saved.seeds, vec![r.seed]);
    }

    let pattern = format!("{}/*/{CHECKPOINT_FILE}", dir.path().display());
    let records = cmd_tta(&cfg, &pattern).unwrap();
    assert_eq!(records.len(), 2 * cfg.tta.record_count());
    let report = cmd_analyze(dir.path()).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.spectra.len(), 2);

    let ids: BTreeSet<String> = runs.iter().map(|r| r.run_id.clone()).collect();
    assert_eq!(column(&dir.path().join("tta_results.csv"), "run_id"), ids);
    assert_eq!(column(&dir.path().join("density_summary.csv"), "run_id"), ids);
    for r in &runs {
        for file in ["metrics.csv", "density.csv"] {
            assert_eq!(column(&r.dir.join(file), "run_id"), BTreeSet::from([r.run_id.clone()]));
        }
    }
    let keys = column(&dir.path().join("stats.csv"), "config_key");
    assert_eq!(keys, ids.iter().map(|i| config_key(i).to_string()).collect());

    let spectrum = fs::read_to_string(runs[0].dir.join("spectrum.csv")).unwrap();
    assert!(spectrum.starts_with("freq_index,input_amp,output_amp\n"));
    assert_eq!(spectrum.lines().count(), 1 + 14);
}

#[test]
fn analyze_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = vec![0];
    cmd_train(&cfg).unwrap();
    cmd_analyze(dir.path()).unwrap();
    let first = fs::read(dir.path().join("stats.csv")).unwrap();
    cmd_analyze(dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join("stats.csv")).unwrap(), first);
}

#[test]
fn analyze_without_density_says_how_to_get_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = vec![0];
    cfg.train.capture_density = false;
    cmd_train(&cfg).unwrap();
    let err = cmd_analyze(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("capture_density"), "{err}");
}

#[test]
fn control_conv_reports_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = vec![0];
    let rows = cmd_control_conv(&cfg).unwrap();
    let count = |v: &str| rows.iter().find(|r| r.variant == v).unwrap().parameter_count;
    // depthwise 3×3 kernel plus bias on the 6-channel block1 output
    assert_eq!(count("conv"), count("no_filter") + 6 * 9 + 6);
    assert_eq!(count("edge"), count("no_filter"));
    let csv = fs::read_to_string(dir.path().join("control.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + rows.len());
}
