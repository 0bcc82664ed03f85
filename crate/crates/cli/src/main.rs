use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reidtr_cli::commands::{
    cmd_bench, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, resolve_data_dir, CHECKPOINT_DIR,
};
use reidtr_cli::{CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "reidtr", version, about = "Synthetic person-search training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed of the configuration
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory [default: OUT/checkpoint]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Re-rank with context bipartite graph matching
    #[arg(long)]
    cbgm: bool,
    #[arg(long, value_delimiter = ',')]
    gallery_sizes: Option<Vec<usize>>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a checkpoint and the loss curve
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the gallery
    Eval(EvalArgs),
    /// Evaluate at several gallery sizes
    Sweep(EvalArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Time inference passes per scheme
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn eval(args: EvalArgs, sweep: bool) -> CliResult<()> {
    let mut cfg = load_config(&args.common)?;
    cfg.eval.cbgm |= args.cbgm;
    if let Some(s) = args.gallery_sizes {
        cfg.eval.gallery_sizes = s;
    }
    if let Some(k) = args.k1 {
        cfg.eval.k1 = k;
    }
    if let Some(k) = args.k2 {
        cfg.eval.k2 = k;
    }
    cfg.validate()?;
    if sweep && cfg.eval.gallery_sizes.is_empty() {
        return Err(reidtr::Error::Config("sweep needs --gallery-sizes or eval.gallery_sizes".into()).into());
    }
    let data = resolve_data_dir(&cfg, args.data.as_deref())?;
    let ck = args.checkpoint.unwrap_or_else(|| args.out.join(CHECKPOINT_DIR));
    let s = cmd_eval(&cfg, &ck, &data, &args.out)?;
    println!(
        "mAP {:.4}  top-1 {:.4}  top-5 {:.4}  top-10 {:.4}",
        s.metrics.map, s.metrics.top1, s.metrics.top5, s.metrics.top10
    );
    for c in &s.curves {
        println!("gallery {:>5}  mAP {:.4}  top-1 {:.4}", c.gallery_size, c.metrics.map, c.metrics.top1);
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let b = cmd_gen_data(&cfg, &out)?;
            println!(
                "{} scenes ({} train, {} gallery, {} queries) in {}",
                b.scenes.len(),
                b.train.len(),
                b.gallery.len(),
                b.queries.len(),
                out.display()
            );
        }
        Command::Train { common, data, out, quiet } => {
            let cfg = load_config(&common)?;
            let data = resolve_data_dir(&cfg, data.as_deref())?;
            let curve = cmd_train(&cfg, &data, &out, !quiet)?;
            let (first, last) = (curve[0].total, curve[curve.len() - 1].total);
            println!("loss {first:.5} -> {last:.5}; checkpoint in {}", out.join(CHECKPOINT_DIR).display());
        }
        Command::Eval(args) => eval(args, false)?,
        Command::Sweep(args) => eval(args, true)?,
        Command::Gradcheck { common, corrupt_grad } => {
            let cfg = load_config(&common)?;
            cmd_gradcheck(&cfg, corrupt_grad)?;
        }
        Command::Bench { common, out } => {
            let cfg = load_config(&common)?;
            cmd_bench(&cfg, out.as_deref().map(Path::new))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
