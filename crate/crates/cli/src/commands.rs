use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use reidtr::checkpoint::{load_checkpoint, save_checkpoint};
use reidtr::eval::{cbgm_rerank, evaluate, gallery_sweep, RankingResult};
use reidtr::gradcheck::{run_suite, BlockReport, SuiteOptions};
use reidtr::pipeline::{build_protocol, detect_scene};
use reidtr::reid::{ReIDModel, Scheme};
use reidtr::synth::{layout_boxes, make_benchmark, render_scene, Benchmark, Identity, IdentityBank, Person, Scene};
use reidtr::train::{loss_curve_csv, StepLoss, Trainer};
use reidtr::Error;

use crate::config::{check_model_fits, RunConfig};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BENCH_FILE: &str = "bench.csv";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Names of the gradient-check blocks over tolerance.
    Gradcheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Config(_) | Error::Invalid(_) | Error::Shape { .. }) => 1,
            CliError::Core(Error::Io { .. } | Error::Format { .. }) => 2,
            CliError::Core(Error::Numeric(_)) => 3,
            CliError::Gradcheck(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Gradcheck(names) => write!(f, "gradient check failed: {}", names.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// `--data` if given, else `data.dir` of the config.
pub fn resolve_data_dir(cfg: &RunConfig, data: Option<&Path>) -> CliResult<PathBuf> {
    data.map(Path::to_path_buf)
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| CliError::Core(Error::Config("no dataset: pass --data or set data.dir".into())))
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<Benchmark> {
    let bench = make_benchmark(&cfg.data.benchmark, cfg.data.seed)?;
    bench.write(out)?;
    Ok(bench)
}

/// Trains from the initialisation seeded by `optimizer.seed` and writes
/// `out/checkpoint/` and `out/loss_curve.csv`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, verbose: bool) -> CliResult<Vec<StepLoss>> {
    let bench = Benchmark::load(data)?;
    cfg.check_benchmark(&bench.config)?;
    let model = ReIDModel::new(cfg.model.clone(), cfg.optimizer.seed)?;
    let mut trainer = Trainer::new(model, cfg.loss.clone(), cfg.optimizer.clone(), cfg.data.detector_noise)?;
    let steps = cfg.optimizer.steps;
    let every = (steps / 20).max(1);
    let curve = trainer.train(&bench, steps, |k, l| {
        if verbose && (k % every == 0 || k == steps) {
            eprintln!("step {k:>5}  loss {:.5}  oim {:.5}", l.total, l.oim);
        }
    })?;
    create_dir(out)?;
    save_checkpoint(&out.join(CHECKPOINT_DIR), &trainer.model, &trainer.oim, &cfg.to_json())?;
    write_file(&out.join(LOSS_CURVE_FILE), &loss_curve_csv(&curve))?;
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
}

impl From<&RankingResult> for Metrics {
    fn from(r: &RankingResult) -> Self {
        Metrics {
            map: r.map,
            top1: r.top1,
            top5: r.top5,
            top10: r.top10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub gallery_size: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub metrics: Metrics,
    pub cbgm: bool,
    pub num_queries: usize,
    pub num_gallery_scenes: usize,
    pub curves: Vec<CurvePoint>,
    pub config: serde_json::Value,
}

/// Evaluates a checkpoint on the gallery of a dataset: `results.csv` holds
/// the full-gallery ranking (re-ranked when `eval.cbgm` is set) and
/// `summary.json` the metrics plus one curve point per `eval.gallery_sizes`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> CliResult<EvalSummary> {
    let ck = load_checkpoint(checkpoint)?;
    let bench = Benchmark::load(data)?;
    check_model_fits(ck.model.config(), &bench.config)?;
    let proto = build_protocol(&ck.model, &bench, ck.model.config().queries, cfg.data.detector_noise, cfg.eval.seed)?;
    let e = &cfg.eval;
    let ranking = if e.cbgm {
        cbgm_rerank(&proto.queries, &proto.gallery, &proto.truth, e.k1, e.k2, e.iou_threshold)?
    } else {
        evaluate(&proto.queries, &proto.gallery, &proto.truth, e.iou_threshold)?
    };
    let curves = gallery_sweep(
        &proto.queries,
        &proto.gallery,
        &proto.truth,
        &e.gallery_sizes,
        e.iou_threshold,
        e.seed,
    )?
    .iter()
    .map(|(size, r)| CurvePoint {
        gallery_size: *size,
        metrics: r.into(),
    })
    .collect();

    let mut config = cfg.to_json();
    config["model"] = serde_json::to_value(ck.model.config()).expect("model config serialises");
    let summary = EvalSummary {
        metrics: (&ranking).into(),
        cbgm: e.cbgm,
        num_queries: proto.queries.len(),
        num_gallery_scenes: proto.gallery.scenes.len(),
        curves,
        config,
    };
    create_dir(out)?;
    ranking.write_csv(&out.join(RESULTS_FILE))?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&out.join(SUMMARY_FILE), &(text + "\n"))?;
    Ok(summary)
}

/// Prints one line per block and fails naming every block over tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig, corrupt: bool) -> CliResult<Vec<BlockReport>> {
    let opts = SuiteOptions {
        model: cfg.model.clone(),
        seed: cfg.optimizer.seed,
        corrupt,
        ..SuiteOptions::default()
    };
    let reports = run_suite(&opts)?;
    for r in &reports {
        println!(
            "{:<30} max_rel_error {:.3e}  tol {:.0e}  coords {:>4}  {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.coords_checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Gradcheck(failed))
    }
}

pub const BENCH_SCHEMES: [Scheme; 3] = [Scheme::Shared, Scheme::Parallel, Scheme::MultiScale3d];
const BENCH_SCENES: usize = 8;
const BENCH_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub scheme: Scheme,
    pub params: usize,
    pub ms_per_scene: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("scheme,params,ms_per_scene\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.4}\n", r.scheme, r.params, r.ms_per_scene));
    }
    out
}

fn bench_scenes(cfg: &RunConfig) -> CliResult<Vec<Scene>> {
    let synth = &cfg.data.benchmark;
    let bank = IdentityBank::generate(synth.identities, 0, synth.channels, synth.decoy_similarity, cfg.data.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    (0..BENCH_SCENES)
        .map(|id| {
            let boxes = layout_boxes(synth.persons_per_scene, synth.occlusion_rate, &mut rng)?;
            let persons: Vec<Person> = boxes
                .into_iter()
                .enumerate()
                .map(|(i, bbox)| Person {
                    bbox,
                    identity: Identity::Labeled((id + i) % synth.identities),
                })
                .collect();
            Ok(render_scene(&bank, &persons, synth, id, cfg.data.seed)?)
        })
        .collect()
}

/// Median wall time of an inference pass per scene for each benchmarked
/// scheme at the configured size; writes `bench.csv` when `out` is given.
pub fn cmd_bench(cfg: &RunConfig, out: Option<&Path>) -> CliResult<Vec<BenchRow>> {
    let scenes = bench_scenes(cfg)?;
    let mut rows = Vec::new();
    for scheme in BENCH_SCHEMES {
        let mut mc = cfg.model.clone();
        mc.scheme = scheme;
        let model = ReIDModel::new(mc, cfg.optimizer.seed)?;
        let refs = scenes
            .iter()
            .map(|s| Ok(detect_scene(s, model.config().queries, cfg.data.detector_noise, cfg.data.seed)?.references()))
            .collect::<CliResult<Vec<_>>>()?;
        let mut times = Vec::with_capacity(BENCH_REPEATS);
        // first pass warms caches and is discarded
        for rep in 0..=BENCH_REPEATS {
            let t0 = Instant::now();
            for (s, r) in scenes.iter().zip(&refs) {
                std::hint::black_box(model.embed(&s.pyramid, r)?);
            }
            if rep > 0 {
                times.push(t0.elapsed().as_secs_f64() * 1e3 / scenes.len() as f64);
            }
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            scheme,
            params: model.transformer_param_count(),
            ms_per_scene: times[times.len() / 2],
        });
    }
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(BENCH_FILE), &csv)?;
    }
    Ok(rows)
}
