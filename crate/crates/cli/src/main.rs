//! `orthogeo`: train, evaluate and inspect adapters on the synthetic
//! concept-retrieval benchmark.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error, 3 runtime abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use orthogeo::adapters::Adapter;
use orthogeo::analysis::{self, DEFAULT_ABLATION_RANKS};
use orthogeo::bench::{self, BenchError, Checkpoint, Split, TrainedRun};
use orthogeo::config::{Method, RunConfig};
use orthogeo::gradcheck::{self, ORACLE_TOLERANCE};
use orthogeo::metrics;
use orthogeo::optim::DEFAULT_FD_STEP;

const CHECKPOINT_FILE: &str = "checkpoint.json";
const MANIFEST_FILE: &str = "manifest.json";
const CONVERGENCE_FILE: &str = "convergence.csv";
const METRICS_FILE: &str = "metrics.csv";
const SPECTRUM_FILE: &str = "spectrum.csv";
const ABLATION_FILE: &str = "ablation.csv";
const ABLATION_SUMMARY_FILE: &str = "ablation_summary.csv";

/// Largest tolerated gap between internal σ and the SVD of the composed update.
const SIGMA_SVD_TOLERANCE: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "orthogeo", version, about = "Stiefel-constrained low-rank adapters on a synthetic retrieval benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one adapter and write checkpoint, manifest and logs.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory for all artifacts.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and emit the results-table row.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// CSV destination; defaults to metrics.csv beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient oracle suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        step: f64,
        #[arg(long, default_value_t = ORACLE_TOLERANCE)]
        tol: f64,
    },
    /// Singular-value spectra of trained adapters as one CSV.
    Spectrum {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = SPECTRUM_FILE)]
        out: PathBuf,
    },
    /// Train both adapters over a rank × seed grid.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated ranks.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ABLATION_RANKS)]
        ranks: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

/// Config file plus flag overrides; flags win.
#[derive(Args)]
struct ConfigArgs {
    /// `key=value` file or JSON manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    rank: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    sigma_mode: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    /// Any other field, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))
                    .map_err(Failure::input)?;
                RunConfig::parse(&text)
                    .with_context(|| format!("parsing config {}", path.display()))
                    .map_err(Failure::input)?
            }
            None => RunConfig::default(),
        };
        let named = [
            ("method", &self.method),
            ("rank", &self.rank),
            ("seed", &self.seed),
            ("alpha", &self.alpha),
            ("lr", &self.lr),
            ("sigma_mode", &self.sigma_mode),
            ("max_steps", &self.max_steps),
            ("eval_interval", &self.eval_interval),
            ("batch_size", &self.batch_size),
            ("temperature", &self.temperature),
            ("patience", &self.patience),
            ("noise", &self.noise),
        ];
        let mut pairs: Vec<(&str, &str)> = Vec::new();
        for set in &self.sets {
            let (k, v) = set
                .split_once('=')
                .ok_or_else(|| Failure::input(anyhow!("--set expects KEY=VALUE, got `{set}`")))?;
            pairs.push((k.trim(), v.trim()));
        }
        pairs.extend(named.iter().filter_map(|(k, v)| v.as_deref().map(|v| (*k, v))));
        cfg.apply_overrides(pairs).map_err(|e| Failure::input(e.into()))?;
        cfg.validate().map_err(|e| Failure::input(e.into()))?;
        Ok(cfg)
    }
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn check(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }

    fn input(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    fn runtime(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::input)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))
        .map_err(Failure::input)?;
    Checkpoint::from_json(&text)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(Failure::input)
}

fn bench_failure(e: BenchError) -> Failure {
    match e {
        BenchError::Config(_) => Failure::input(e.into()),
        other => Failure::runtime(other.into()),
    }
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> Result<(), Failure> {
    let cfg = args.load()?;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::input)?;
    let run = match bench::train(&cfg) {
        Ok(run) => run,
        Err(BenchError::NonFiniteLoss { step, checkpoint }) => {
            write(&out.join(CHECKPOINT_FILE), &checkpoint.to_json())?;
            return Err(Failure::runtime(anyhow!(
                "loss became non-finite at step {step}; last good state saved to {}",
                out.join(CHECKPOINT_FILE).display()
            )));
        }
        Err(e) => return Err(bench_failure(e)),
    };
    write_run_artifacts(&run, out)?;
    let test = run.evaluate(Split::Test).map_err(bench_failure)?;
    println!(
        "{} r={} seed={}: {} steps ({:?}), test MRR {:.4}, Recall@3 {:.4}",
        cfg.method.label(),
        cfg.rank,
        cfg.seed,
        run.checkpoint.step,
        run.stop,
        test.mrr,
        test.recall(3).unwrap_or(f64::NAN),
    );
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn write_run_artifacts(run: &TrainedRun, out: &Path) -> Result<(), Failure> {
    write(&out.join(CHECKPOINT_FILE), &run.checkpoint.to_json())?;
    let manifest = run.manifest().map_err(bench_failure)?;
    let manifest = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join(MANIFEST_FILE), &format!("{manifest}\n"))?;
    write(&out.join(CONVERGENCE_FILE), &run.convergence_csv())?;
    let test = run.evaluate(Split::Test).map_err(bench_failure)?;
    write(&out.join(METRICS_FILE), &test.table_csv(run.config().method.label()))?;
    let label = run.config().method.label();
    let adapters: Vec<(&str, &Adapter)> = run.encoder().adapter().map(|a| (label, a)).into_iter().collect();
    let report = analysis::spectrum_report(adapters).map_err(|e| Failure::runtime(e.into()))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write(&out.join(SPECTRUM_FILE), &report.to_csv())?;
    Ok(())
}

fn cmd_eval(path: &Path, split: &str, out: Option<&Path>) -> Result<(), Failure> {
    let split: Split = split.parse().map_err(|e: String| Failure::input(anyhow!(e)))?;
    let ck = load_checkpoint(path)?;
    let dataset = bench::build_dataset(&ck.config).map_err(bench_failure)?;
    let report = metrics::evaluate(&ck.encoder, &dataset, split, &metrics::TABLE_KS)
        .map_err(|e| Failure::runtime(e.into()))?;
    let csv = report.table_csv(ck.config.method.label());
    print!("{csv}");
    let csv_path = match out {
        Some(p) => p.to_path_buf(),
        None => path.parent().unwrap_or(Path::new(".")).join(METRICS_FILE),
    };
    write(&csv_path, &csv)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&csv_path.with_extension("json"), &format!("{json}\n"))?;
    Ok(())
}

fn cmd_gradcheck(seeds: u64, probes: usize, step: f64, tol: f64) -> Result<(), Failure> {
    let checks = gradcheck::gradient_suite(seeds, probes, step).map_err(|e| Failure::runtime(e.into()))?;
    let mut names: Vec<&str> = Vec::new();
    for c in &checks {
        if !names.contains(&c.name) {
            names.push(c.name);
        }
    }
    for name in &names {
        let worst = checks
            .iter()
            .filter(|c| c.name == *name)
            .map(|c| c.report.max_rel_error)
            .fold(0.0, f64::max);
        println!("{name:<20} max rel error {worst:.3e}");
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .ok_or_else(|| Failure::input(anyhow!("no checks ran (seeds = 0)")))?;
    println!("overall max rel error {:.3e} (tolerance {tol:.0e})", worst.report.max_rel_error);
    if worst.passed(tol) {
        Ok(())
    } else {
        Err(Failure::check(anyhow!(
            "{} failed: seed {}, shape {:?}, coordinate {}, rel error {:.3e}",
            worst.name,
            worst.seed,
            worst.shape,
            worst.report.worst_index,
            worst.report.max_rel_error
        )))
    }
}

fn cmd_spectrum(paths: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let cks: Vec<Checkpoint> = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<_, _>>()?;
    let mut items = Vec::new();
    for (ck, path) in cks.iter().zip(paths) {
        match ck.encoder.adapter() {
            Some(a) => items.push((ck.config.method.label(), a)),
            None => eprintln!("warning: {} has no adapter, skipped", path.display()),
        }
    }
    let report = analysis::spectrum_report(items.iter().copied()).map_err(|e| Failure::runtime(e.into()))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for r in &report.records {
        println!(
            "{} r={}: effective rank {:.4}, stable rank {:.4}",
            r.method, r.rank, r.effective_rank, r.stable_rank
        );
    }
    write(out, &report.to_csv())?;
    for (ck, path) in cks.iter().zip(paths) {
        if let Some(Adapter::OrthoGeo(a)) = ck.encoder.adapter() {
            let gap = analysis::sigma_svd_gap(a).map_err(|e| Failure::runtime(e.into()))?;
            if gap > SIGMA_SVD_TOLERANCE {
                return Err(Failure::check(anyhow!(
                    "{}: internal sigma differs from the SVD of the update by {gap:.3e}",
                    path.display()
                )));
            }
        }
    }
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, ranks: &[usize], seeds: &[u64], workers: usize, out: &Path) -> Result<(), Failure> {
    let cfg = args.load()?;
    if ranks.is_empty() || seeds.is_empty() {
        return Err(Failure::input(anyhow!("need at least one rank and one seed")));
    }
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::input)?;
    let abl = analysis::rank_ablation(&cfg, ranks, &[Method::OrthoGeo, Method::Lora], seeds, workers)
        .map_err(|e| Failure::input(e.into()))?;
    write(&out.join(ABLATION_FILE), &abl.to_csv())?;
    write(&out.join(ABLATION_SUMMARY_FILE), &abl.summary_csv())?;
    print!("{}", abl.summary_csv());
    let failed: Vec<_> = abl.failures().collect();
    if let Some(first) = failed.first() {
        return Err(Failure::runtime(anyhow!(
            "{} of {} cells failed; first: {} r={} seed={}: {}",
            failed.len(),
            abl.cells.len(),
            first.method.label(),
            first.rank,
            first.seed,
            first.outcome.as_ref().err().map(String::as_str).unwrap_or("")
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval { checkpoint, split, out } => cmd_eval(checkpoint, split, out.as_deref()),
        Command::Gradcheck {
            seeds,
            probes,
            step,
            tol,
        } => cmd_gradcheck(*seeds, *probes, *step, *tol),
        Command::Spectrum { checkpoints, out } => cmd_spectrum(checkpoints, out),
        Command::Ablate {
            config,
            ranks,
            seeds,
            workers,
            out,
        } => cmd_ablate(config, ranks, seeds, *workers, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
