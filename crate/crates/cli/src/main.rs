use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aphynity::experiment::{self, ExperimentConfig};
use aphynity::metrics::{aggregate, render_table, summary_csv};
use aphynity::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aphynity", version, about = "Physics-augmented dynamics learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate train/valid/test datasets.
    Generate {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Score trained runs on the test split.
    Evaluate {
        /// A run directory, or a directory of `seed-*` runs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
    },
    /// Aggregate every metrics file below a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// generate + train + evaluate + report in one directory.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        seeds: SeedArgs,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

#[derive(Args)]
struct ExpArgs {
    #[arg(long)]
    config: PathBuf,
    /// Use the config's desk-scale overrides.
    #[arg(long)]
    downscale: bool,
}

#[derive(Args)]
struct SeedArgs {
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

enum Failure {
    Usage(String),
    Diverged(String),
    Corrupt(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence(_) => Failure::Diverged(e.to_string()),
            Error::Config(_) | Error::Invalid(_) => Failure::Usage(e.to_string()),
            e if e.is_corruption() => Failure::Corrupt(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(exp: &ExpArgs) -> Result<ExperimentConfig, Failure> {
    let cfg = ExperimentConfig::load(&exp.config).map_err(|e| match e {
        Error::Json { .. } => Failure::Usage(e.to_string()),
        e => e.into(),
    })?;
    Ok(if exp.downscale { cfg.downscaled()? } else { cfg })
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{}: {e}", path.display()))
}

/// Runs `f` with a `.partial` marker in `dir` that is removed on success.
fn guarded(dir: &Path, f: impl FnOnce() -> CmdResult) -> CmdResult {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let marker = dir.join(".partial");
    fs::write(&marker, b"").map_err(io(&marker))?;
    f()?;
    fs::remove_file(&marker).map_err(io(&marker))
}

fn generate(cfg: &ExperimentConfig, out: &Path) -> CmdResult {
    guarded(out, || Ok(experiment::generate(cfg, out)?))?;
    println!("datasets written to {}", out.display());
    Ok(())
}

fn seed_list(cfg: &ExperimentConfig, s: &SeedArgs) -> Vec<u64> {
    match (&s.seeds, s.seed) {
        (Some(v), _) => v.clone(),
        (None, Some(one)) => vec![one],
        (None, None) => cfg.seeds.clone(),
    }
}

fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, seeds: &[u64], parallel: usize) -> CmdResult {
    if seeds.is_empty() {
        return Err(Failure::Usage("empty seed list".into()));
    }
    let results = experiment::fan_out(seeds, parallel, |&seed| {
        let dir = experiment::run_dir(out, seed);
        let mut diverged = None;
        guarded(&dir, || {
            let run = experiment::train(cfg, data, &dir, seed)?;
            match &run.report {
                Some(r) if r.diverged() => {
                    diverged = r.summary.diverged.clone();
                    Err(Failure::Diverged(format!(
                        "seed {seed}: {}",
                        diverged.clone().unwrap_or_default()
                    )))
                }
                Some(r) => {
                    let s = &r.summary;
                    println!(
                        "seed {seed}: lambda {:.4e}  L_traj {}  |Fa|^2 {}  params {:?}  ({} epochs, {:?})",
                        s.final_lambda,
                        s.final_fit_loss.map_or("n/a".into(), |v| format!("{v:.4e}")),
                        s.final_fa_norm_sq.map_or("n/a".into(), |v| format!("{v:.4e}")),
                        s.final_physical_params,
                        s.epochs_run,
                        s.stop
                    );
                    Ok(())
                }
                None => {
                    println!("seed {seed}: fixed model, nothing trained");
                    Ok(())
                }
            }
        })
    });
    // report the most severe failure after every seed has finished
    let mut worst: Option<Failure> = None;
    for r in results {
        if let Err(f) = r {
            let rank = |f: &Failure| match f {
                Failure::Diverged(_) => 1,
                _ => 2,
            };
            match &worst {
                Some(w) if rank(w) >= rank(&f) => report_failure(&f),
                _ => {
                    if let Some(w) = worst.take() {
                        report_failure(&w);
                    }
                    worst = Some(f);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn run_dirs(out: &Path) -> Result<Vec<PathBuf>, Failure> {
    if out.join("run.json").exists() {
        return Ok(vec![out.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(io(out))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::Usage(format!("no trained runs under {}", out.display())));
    }
    Ok(dirs)
}

fn evaluate(out: &Path, data: &Path, horizon: Option<usize>, chunk: usize) -> CmdResult {
    if chunk == 0 {
        return Err(Failure::Usage("--chunk must be positive".into()));
    }
    for dir in run_dirs(out)? {
        let rec = experiment::evaluate_run(&dir, data, horizon, chunk)?;
        let e = &rec.eval;
        println!(
            "{}: log MSE {:.3}  %Err {}  |Fa|^2 {}  ({} blown up)",
            rec.run_id,
            e.log_mse,
            e.avg_param_error_pct.map_or("n/a".into(), |v| format!("{v:.3}")),
            if e.fa_applicable { format!("{:.4e}", e.fa_norm_sq) } else { "n/a".into() },
            e.blown_up
        );
    }
    Ok(())
}

fn report(out: &Path) -> CmdResult {
    if !out.is_dir() {
        return Err(Failure::Usage(format!("{} is not a directory", out.display())));
    }
    let records = experiment::collect_metrics(out)?;
    if records.is_empty() {
        return Err(Failure::Usage(format!("no metrics files under {}", out.display())));
    }
    let rows = aggregate(&records);
    let table = render_table(&rows);
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(io(&p))
    };
    write("summary.csv", summary_csv(&rows))?;
    write("summary.json", serde_json::to_string_pretty(&rows).expect("serializable") + "\n")?;
    write("table.txt", table.clone())?;
    print!("{table}");
    Ok(())
}

fn dispatch(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Generate { exp, out, seed } => {
            let mut cfg = load_config(&exp)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            generate(&cfg, &out)
        }
        Cmd::Train { exp, data, out, seeds } => {
            let cfg = load_config(&exp)?;
            train(&cfg, &data, &out, &seed_list(&cfg, &seeds), seeds.parallel)
        }
        Cmd::Evaluate { out, data, horizon, chunk } => evaluate(&out, &data, horizon, chunk),
        Cmd::Report { out } => report(&out),
        Cmd::Run { exp, out, seeds, horizon } => {
            let cfg = load_config(&exp)?;
            let data = out.join("data");
            let runs = out.join("runs");
            generate(&cfg, &data)?;
            train(&cfg, &data, &runs, &seed_list(&cfg, &seeds), seeds.parallel)?;
            evaluate(&runs, &data, horizon, cfg.eval_chunk)?;
            report(&out)
        }
    }
}

fn report_failure(f: &Failure) {
    let msg = match f {
        Failure::Usage(m) | Failure::Diverged(m) | Failure::Corrupt(m) | Failure::Other(m) => m,
    };
    eprintln!("error: {msg}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("APHYNITY_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report_failure(&f);
            ExitCode::from(match f {
                Failure::Usage(_) => 2,
                Failure::Diverged(_) => 3,
                Failure::Corrupt(_) => 4,
                Failure::Other(_) => 1,
            })
        }
    }
}
