//! `selpred`: loss checks, temperature calibration, threshold sweeps,
//! checkpoint ranking and the synthetic end-to-end pipeline.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
//! validation failure.

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ColorChoice, Parser, Subcommand};
use selpred_core::calibration::{ece, fit_temperature, softmax_probs, TemperatureSearch};
use selpred_core::ingest::{self, CalibrationRecord};
use selpred_core::losses::{
    finite_diff_check, random_embedding_pair, sicova_loss, triplet_loss_with, LossId, LossSpec, SicovaWeights,
    TripletParams,
};
use selpred_core::protocol::{evaluate_manifest, rank_evaluations, validate_coverage, EvaluationProtocol};
use selpred_core::report::{risk_coverage_svg, summary_table, PlotSpec, Series};
use selpred_core::selective::{
    select_operating_point, threshold_grid, threshold_sweep, AbsentClassPolicy, Ranking, DEFAULT_GRID_STEP,
    DEFAULT_TARGET_COVERAGE,
};
use selpred_core::synth::{run_experiment, write_experiment, ExperimentConfig};
use selpred_core::{Error, Result, Rng};

const NO_COLOR_ENV: &str = "SELPRED_NO_COLOR";
const GRADCHECK_PAIRS: u64 = 100;
const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "selpred", version)]
#[command(about = "Calibrated selective prediction across SSL pretraining checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print every loss component on seeded random embeddings
    Losscheck {
        /// Loss: sicova or triplet
        #[arg(long, default_value = "sicova")]
        loss: String,
        /// Batch size (rows per view)
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Embedding dimension
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Triplet margin
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        /// Loss: sicova or triplet (both when omitted)
        #[arg(long)]
        loss: Option<String>,
        /// Largest acceptable relative error
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Triplet margin
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
    },
    /// Run the synthetic pretrain, fine-tune and evaluate pipeline
    Synth {
        /// Experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Override both the run and the data seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for per-checkpoint work (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Fit a temperature on a calibration split
    Calibrate {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Directory for calibration.json
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Sweep confidence thresholds and write curve.csv
    Sweep {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Temperature applied before the softmax
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
        grid_step: f64,
        /// Target coverage of the reported operating point
        #[arg(long, default_value_t = DEFAULT_TARGET_COVERAGE)]
        coverage: f64,
        /// Directory for curve.csv
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Calibrate each manifest checkpoint, then rank by selective macro-F1
    Rank {
        #[arg(long)]
        manifest: PathBuf,
        /// Target coverage (default: the manifest's target_coverage)
        #[arg(long)]
        coverage: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
        grid_step: f64,
        /// Directory for rank.csv
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write summary.csv and risk_coverage.svg for a manifest
    Report {
        #[arg(long)]
        manifest: PathBuf,
        /// Target coverage (default: the manifest's target_coverage)
        #[arg(long)]
        coverage: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
        grid_step: f64,
        /// Directory for summary.csv and risk_coverage.svg
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

struct Style {
    color: bool,
}

impl Style {
    fn detect() -> Self {
        let disabled = std::env::var_os(NO_COLOR_ENV).is_some_and(|v| !v.is_empty());
        Self {
            color: !disabled && std::io::stdout().is_terminal(),
        }
    }

    fn verdict(&self, pass: bool) -> String {
        match (pass, self.color) {
            (true, true) => "\x1b[32mPASS\x1b[0m".into(),
            (false, true) => "\x1b[31mFAIL\x1b[0m".into(),
            (true, false) => "PASS".into(),
            (false, false) => "FAIL".into(),
        }
    }
}

fn loss_spec(name: &str, margin: f64) -> Result<LossSpec> {
    let spec = match name.parse::<LossId>()? {
        LossId::Sicova => LossSpec::Sicova(SicovaWeights::default()),
        LossId::Triplet => LossSpec::Triplet(TripletParams {
            margin,
            ..TripletParams::default()
        }),
    };
    spec.validate()?;
    Ok(spec)
}

fn check_dims(n: usize, d: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Usage(format!("--n must be at least 2, got {n}")));
    }
    if d < 1 {
        return Err(Error::Usage("--d must be at least 1".into()));
    }
    Ok(())
}

fn losscheck(loss: &str, n: usize, d: usize, seed: u64, margin: f64) -> Result<bool> {
    check_dims(n, d)?;
    let spec = loss_spec(loss, margin)?;
    let (z, zp) = random_embedding_pair(n, d, &mut Rng::new(seed));
    println!("loss    {}", spec.id());
    println!("n       {n}");
    println!("d       {d}");
    println!("seed    {seed}");
    match spec {
        LossSpec::Sicova(w) => {
            let b = sicova_loss(&z, &zp, &w)?;
            for (name, v) in [
                ("var_z", b.var_z),
                ("var_zp", b.var_zp),
                ("cov_z", b.cov_z),
                ("cov_zp", b.cov_zp),
                ("intra", b.intra()),
                ("inv", b.inv),
                ("corr", b.corr),
                ("total", b.total),
            ] {
                println!("{name:<7} {v:.12}");
            }
        }
        LossSpec::Triplet(p) => {
            println!("margin  {}", p.margin);
            println!("total   {:.12}", triplet_loss_with(&z, &zp, &p)?);
        }
    }
    Ok(true)
}

fn gradcheck(loss: Option<&str>, tol: f64, n: usize, d: usize, seed: u64, margin: f64, style: &Style) -> Result<bool> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Usage(format!("--tol must be positive, got {tol}")));
    }
    check_dims(n, d)?;
    let specs = match loss {
        Some(name) => vec![loss_spec(name, margin)?],
        None => vec![loss_spec("sicova", margin)?, loss_spec("triplet", margin)?],
    };
    let mut all_pass = true;
    for spec in specs {
        let mut worst: f64 = 0.0;
        for pair in 0..GRADCHECK_PAIRS {
            let (z, zp) = random_embedding_pair(n, d, &mut Rng::stream(seed, pair));
            worst = worst.max(finite_diff_check(&spec, &z, &zp, GRADCHECK_STEP)?);
        }
        let pass = worst < tol;
        all_pass &= pass;
        println!(
            "{:<8} pairs={GRADCHECK_PAIRS} n={n} d={d} h={GRADCHECK_STEP:e}  max_rel_err={worst:.3e}  tol={tol:e}  {}",
            spec.id().to_string(),
            style.verdict(pass)
        );
    }
    Ok(all_pass)
}

fn synth(config: &Path, seed: Option<u64>, out: Option<PathBuf>, jobs: Option<usize>) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let started = Instant::now();
    let result = run_experiment(&cfg, jobs)?;
    write_experiment(&result, &cfg.output_dir)?;
    println!(
        "{} checkpoints, {} loss, seed {}, {:.1}s",
        result.evaluations.len(),
        cfg.loss.kind,
        cfg.seed,
        started.elapsed().as_secs_f64()
    );
    print_ranking(&result.ranking);
    println!("wrote {}", cfg.output_dir.display());
    Ok(true)
}

fn calibrate(logits: &Path, labels: &Path, out: &Path) -> Result<bool> {
    let set = ingest::read_logits_set(logits, labels)?;
    let fit = fit_temperature(&set, &TemperatureSearch::default())?;
    let record = CalibrationRecord::new(&fit, set.len());
    let bins = selpred_core::protocol::DEFAULT_ECE_BINS;
    let before = ece(&softmax_probs(set.logits(), 1.0)?, set.labels(), bins)?;
    let after = ece(&softmax_probs(set.logits(), fit.temperature)?, set.labels(), bins)?;
    let path = out.join("calibration.json");
    ingest::write_calibration_record(&path, &record)?;
    println!("temperature  {:.6}", fit.temperature);
    println!("nll          {:.6}", fit.nll_at_t);
    println!("clamped      {}", fit.clamped);
    println!("n            {}", set.len());
    println!("ece          {before:.4} -> {after:.4}");
    println!("wrote {}", path.display());
    Ok(true)
}

fn sweep(logits: &Path, labels: &Path, temperature: f64, grid_step: f64, coverage: f64, out: &Path) -> Result<bool> {
    validate_coverage(coverage)?;
    let set = ingest::read_logits_set(logits, labels)?;
    let probs = softmax_probs(set.logits(), temperature)?;
    let grid = threshold_grid(grid_step)?;
    let curve = threshold_sweep(
        &probs,
        set.labels(),
        set.n_classes(),
        &grid,
        AbsentClassPolicy::default(),
    )?;
    let op = select_operating_point(&curve, coverage)?;
    let path = out.join("curve.csv");
    ingest::write_curve(&path, &curve)?;
    let p = &op.point;
    println!("{} thresholds, temperature {temperature}", curve.len());
    println!(
        "operating point: threshold={} coverage={:.4} sel_accuracy={} sel_macro_f1={} sel_qwk={}",
        p.threshold,
        p.coverage,
        show(p.sel_accuracy),
        show(p.sel_macro_f1),
        show(p.sel_qwk)
    );
    println!("wrote {}", path.display());
    Ok(true)
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

fn print_ranking(ranking: &Ranking) {
    println!("rank  checkpoint      epoch  threshold  coverage  sel_acc  sel_f1   sel_qwk");
    for r in &ranking.ranked {
        let p = &r.score.operating_point.point;
        println!(
            "{:<5} {:<15} {:<6} {:<10.2} {:<9.4} {:<8} {:<8} {}",
            r.rank,
            r.score.checkpoint_id,
            r.score.pretrain_epoch,
            p.threshold,
            p.coverage,
            show(p.sel_accuracy),
            show(p.sel_macro_f1),
            show(p.sel_qwk)
        );
    }
    for (id, reason) in &ranking.excluded {
        eprintln!("excluded {id}: {reason}");
    }
}

struct ManifestRun {
    run_id: String,
    evaluations: Vec<selpred_core::protocol::CheckpointEvaluation>,
    ranking: Ranking,
}

fn evaluate_manifest_file(
    manifest: &Path,
    coverage: Option<f64>,
    grid_step: f64,
    jobs: Option<usize>,
) -> Result<ManifestRun> {
    let (m, loaded) = ingest::load_manifest(manifest)?;
    let protocol = EvaluationProtocol {
        target_coverage: coverage.unwrap_or(m.target_coverage),
        grid_step,
        ..EvaluationProtocol::default()
    };
    protocol.validate()?;
    let evaluations = evaluate_manifest(&loaded, &protocol, jobs)?;
    let ranking = rank_evaluations(&evaluations);
    Ok(ManifestRun {
        run_id: m.run_id,
        evaluations,
        ranking,
    })
}

fn rank(manifest: &Path, coverage: Option<f64>, grid_step: f64, out: &Path, jobs: Option<usize>) -> Result<bool> {
    let run = evaluate_manifest_file(manifest, coverage, grid_step, jobs)?;
    let path = out.join("rank.csv");
    ingest::write_rank(&path, &run.ranking)?;
    print_ranking(&run.ranking);
    println!("wrote {}", path.display());
    Ok(true)
}

fn report(manifest: &Path, coverage: Option<f64>, grid_step: f64, out: &Path, jobs: Option<usize>) -> Result<bool> {
    let run = evaluate_manifest_file(manifest, coverage, grid_step, jobs)?;
    let series: Vec<Series> = run
        .evaluations
        .iter()
        .map(|e| Series {
            label: e.checkpoint_id.clone(),
            curve: e.curve.clone(),
            operating_point: e.operating_point.point.clone(),
        })
        .collect();
    let spec = PlotSpec {
        title: format!("Risk-coverage, {}", run.run_id),
        ..PlotSpec::default()
    };
    let svg = risk_coverage_svg(&series, &spec)?;
    let table = out.join("summary.csv");
    let plot = out.join("risk_coverage.svg");
    ingest::write_text(&table, &summary_table(&run.run_id, &run.ranking))?;
    ingest::write_text(&plot, &svg)?;
    print_ranking(&run.ranking);
    println!("wrote {}", table.display());
    println!("wrote {}", plot.display());
    Ok(true)
}

fn run(command: Command, style: &Style) -> Result<bool> {
    match command {
        Command::Losscheck {
            loss,
            n,
            d,
            seed,
            margin,
        } => losscheck(&loss, n, d, seed, margin),
        Command::Gradcheck {
            loss,
            tol,
            n,
            d,
            seed,
            margin,
        } => gradcheck(loss.as_deref(), tol, n, d, seed, margin, style),
        Command::Synth {
            config,
            seed,
            out,
            jobs,
        } => synth(&config, seed, out, jobs),
        Command::Calibrate { logits, labels, out } => calibrate(&logits, &labels, &out),
        Command::Sweep {
            logits,
            labels,
            temperature,
            grid_step,
            coverage,
            out,
        } => sweep(&logits, &labels, temperature, grid_step, coverage, &out),
        Command::Rank {
            manifest,
            coverage,
            grid_step,
            out,
            jobs,
        } => rank(&manifest, coverage, grid_step, &out, jobs),
        Command::Report {
            manifest,
            coverage,
            grid_step,
            out,
            jobs,
        } => report(&manifest, coverage, grid_step, &out, jobs),
    }
}

fn main() -> ExitCode {
    let style = Style::detect();
    let color = if style.color {
        ColorChoice::Auto
    } else {
        ColorChoice::Never
    };
    let matches = <Cli as clap::CommandFactory>::command().color(color).get_matches();
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command, &style) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
