use std::path::Path;
use std::process::Command;

use reidtr_cli::commands::{
    bench_csv, cmd_bench, cmd_eval, cmd_gen_data, cmd_train, CHECKPOINT_DIR, LOSS_CURVE_FILE, RESULTS_FILE,
};
use reidtr_cli::RunConfig;

fn small_config() -> RunConfig {
    RunConfig::from_json(
        r#"{
            "model": {"width": 16, "channels": 16, "heads": 2, "points": 2, "queries": 4},
            "loss": {"identities": 8, "queue_size": 16},
            "optimizer": {"steps": 0, "batch_scenes": 4},
            "data": {"benchmark": {
                "image_size": 128, "channels": 16, "identities": 8, "unlabeled_identities": 8,
                "num_train": 24, "num_gallery": 20, "num_queries": 10
            }}
        }"#,
    )
    .unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reidtr"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json().to_string()).unwrap();
    p
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn gen_data_writes_the_configured_scenes() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let b = cmd_gen_data(&cfg, dir.path()).unwrap();
    assert!(dir.path().join("manifest.json").exists());
    let c = &cfg.data.benchmark;
    assert_eq!(b.scenes.len(), c.num_train + c.num_gallery);
    assert_eq!(b.queries.len(), c.num_queries);
}

#[test]
fn gen_data_manifests_are_byte_identical_per_seed() {
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_gen_data(&cfg, a.path()).unwrap();
    cmd_gen_data(&cfg, b.path()).unwrap();
    let read = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn infeasible_query_count_exits_1() {
    let mut cfg = small_config();
    cfg.data.benchmark.num_queries = 500;
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &cfg);
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("data"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn config_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"depth": 2}}"#).unwrap();
    assert_eq!(exit_code(bin().args(["gradcheck", "--config"]).arg(&bad)), 1);
    let missing = dir.path().join("missing.json");
    assert_eq!(exit_code(bin().args(["gradcheck", "--config"]).arg(&missing)), 2);
    assert_eq!(exit_code(bin().args(["train", "--bogus"])), 1);
    assert_eq!(exit_code(bin().arg("--help")), 0);
}

#[test]
fn zero_steps_saves_the_initialisation() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let out = dir.path().join("run");
    let curve = cmd_train(&cfg, &data, &out, false).unwrap();
    assert_eq!(curve.len(), 1);
    let csv = std::fs::read_to_string(out.join(LOSS_CURVE_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let ck = reidtr::checkpoint::load_checkpoint(&out.join(CHECKPOINT_DIR)).unwrap();
    let fresh = reidtr::reid::ReIDModel::new(cfg.model.clone(), cfg.optimizer.seed).unwrap();
    assert_eq!(ck.model.store(), fresh.store());
    assert_eq!(ck.config, cfg.to_json());
}

#[test]
fn training_is_deterministic() {
    let mut cfg = small_config();
    cfg.optimizer.steps = 10;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let a = cmd_train(&cfg, &data, &dir.path().join("a"), false).unwrap();
    cmd_train(&cfg, &data, &dir.path().join("b"), false).unwrap();
    assert_eq!(a.len(), 11);
    let read = |d: &str| std::fs::read(dir.path().join(d).join(LOSS_CURVE_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn default_toy_run_descends() {
    // the identity loss rises while the lookup table fills, so the run must
    // be long enough to get past that phase
    let mut cfg = RunConfig::default();
    cfg.optimizer.steps = 400;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let curve = cmd_train(&cfg, &data, dir.path(), false).unwrap();
    let (first, last) = (curve[0].total, curve[400].total);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn diverging_training_exits_3() {
    let mut cfg = small_config();
    cfg.optimizer.steps = 5;
    cfg.optimizer.step_size = 1e300;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let path = write_config(dir.path(), &cfg);
    let out = bin()
        .args(["train", "--quiet", "--config"])
        .arg(&path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
}

#[test]
fn cbgm_without_context_budget_matches_baseline() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    cmd_train(&cfg, &data, dir.path(), false).unwrap();
    let ck = dir.path().join(CHECKPOINT_DIR);
    let base = cmd_eval(&cfg, &ck, &data, &dir.path().join("base")).unwrap();
    let mut c = cfg.clone();
    c.eval.cbgm = true;
    c.eval.k2 = 0;
    let re = cmd_eval(&c, &ck, &data, &dir.path().join("cbgm")).unwrap();
    assert_eq!(re.metrics, base.metrics);
    assert_eq!(re.curves, base.curves);
    let read = |d: &str| std::fs::read(dir.path().join(d).join(RESULTS_FILE)).unwrap();
    assert_eq!(read("base"), read("cbgm"));
}

#[test]
fn two_gallery_sizes_give_two_curve_points() {
    let mut cfg = small_config();
    let b = &mut cfg.data.benchmark;
    b.identities = 40;
    b.num_gallery = 60;
    b.num_train = 4;
    cfg.loss.identities = 40;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    cmd_train(&cfg, &data, dir.path(), false).unwrap();
    let path = write_config(dir.path(), &cfg);
    let out = bin()
        .args(["sweep", "--gallery-sizes", "10,50", "--config"])
        .arg(&path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let curves = v["curves"].as_array().unwrap();
    assert_eq!(curves.len(), 2);
    assert_eq!(curves[0]["gallery_size"], 10);
    assert_eq!(curves[1]["gallery_size"], 50);
    assert_eq!(v["config"]["eval"]["gallery_sizes"], serde_json::json!([10, 50]));
}

#[test]
fn eval_rejects_a_channel_mismatch() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    let mut other = cfg.clone();
    other.model.channels = 8;
    other.data.benchmark.channels = 8;
    let other_data = dir.path().join("data8");
    cmd_gen_data(&other, &other_data).unwrap();
    cmd_train(&other, &other_data, dir.path(), false).unwrap();
    let path = write_config(dir.path(), &cfg);
    let code = exit_code(
        bin()
            .args(["eval", "--config"])
            .arg(&path)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(dir.path()),
    );
    assert_eq!(code, 1);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exit_code(&mut bin().arg("gradcheck")), 0);
    assert_eq!(exit_code(bin().args(["gradcheck", "--corrupt-grad"])), 4);
    let minimal = dir.path().join("m1k1.json");
    std::fs::write(&minimal, r#"{"model": {"layers": 1, "cross_layers": 1}}"#).unwrap();
    assert_eq!(exit_code(bin().args(["gradcheck", "--config"]).arg(&minimal)), 0);
}

#[test]
fn bench_reports_each_scheme() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let rows = cmd_bench(&cfg, Some(dir.path())).unwrap();
    let names: Vec<String> = rows.iter().map(|r| r.scheme.to_string()).collect();
    assert_eq!(names, ["shared", "parallel", "multi_scale_3d"]);
    assert_eq!(rows[1].params, 3 * rows[0].params);
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv, bench_csv(&rows));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn bench_ratios_are_stable() {
    let cfg = RunConfig::default();
    let ratio = |rows: &[reidtr_cli::commands::BenchRow]| rows[2].ms_per_scene / rows[0].ms_per_scene;
    let a = ratio(&cmd_bench(&cfg, None).unwrap());
    let b = ratio(&cmd_bench(&cfg, None).unwrap());
    assert!(a / b < 2.0 && b / a < 2.0, "{a} vs {b}");
}
