//! `qgrom` command-line front end.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 for
//! numerical failures (solver non-convergence, blow-up, training divergence).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use qgrom::grid::fmt_real;
use qgrom::pipeline::{
    self, draw_test_points, evaluate, evaluate_means, predict_coefficients, reconstruct_from, run_fom, split_series,
    training_reference, write_error_csv, write_timing_csv, OfflineConfig, RomArtifacts, RpodSettings, SweepData,
    SweepPlan,
};
use qgrom::reduction::{self, deterministic_pod, Provenance, ReducedBasis};
use qgrom::snapshots::{read_snapshots, write_snapshots};
use qgrom::solver::{run_simulation, PhysParams, QgSolver, SolverSettings, TimeWindow};
use qgrom::{assemble_matrix, write_atomic, SnapshotSeries, StructuredGrid, Variable};

#[derive(Debug, Parser)]
#[command(name = "qgrom", version, about = "Quasi-geostrophic simulation and rPOD-LSTM reduced modelling")]
struct Cli {
    /// Emit log records as JSON lines on stderr.
    #[arg(long, global = true)]
    json_log: bool,

    /// Root directory for artifacts.
    #[arg(long, global = true, env = "QGROM_DATA_DIR", default_value = "qgrom-data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one full order simulation and store its snapshots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to <data-dir>/simulation).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full order model at every sample of a parameter sweep.
    Sweep {
        /// Offline configuration; only its `plan` is used.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Deterministic POD of a stored snapshot matrix.
    Pod {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = pipeline::DEFAULT_RANK)]
        rank: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized POD of a stored snapshot matrix.
    Rpod {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = pipeline::DEFAULT_RANK)]
        rank: usize,
        #[arg(long, default_value_t = reduction::DEFAULT_OVERSAMPLE)]
        oversample: usize,
        #[arg(long, default_value_t = reduction::DEFAULT_POWER)]
        power: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Offline phase: sweep (or cached snapshots), bases and forecasters.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overrides `rpod.rank`.
        #[arg(long)]
        rank: Option<usize>,
        /// Overrides `lstm.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the epoch count of both presets.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Online forecast at a parameter vector over the forecast window.
    Predict {
        /// Parameter vector over the swept axes.
        #[arg(long, num_args = 0.., allow_negative_numbers = true)]
        mu: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every forecast field.
        #[arg(long)]
        fields: bool,
    },
    /// Relative L2 errors of forecast time averages.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Timing of the offline and online phases.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Core(qgrom::Error),
}

impl From<qgrom::Error> for Failure {
    fn from(e: qgrom::Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    grid: StructuredGrid,
    /// Defaults to the double-gyre setup on `grid`.
    #[serde(default)]
    params: Option<PhysParams>,
    dt: f64,
    t_end: f64,
    window: TimeWindow,
    #[serde(default)]
    solver: SolverSettings,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateConfig {
    /// Seed for the out-of-sample draws.
    seed: u64,
    /// Number of uniformly drawn out-of-sample points.
    #[serde(default)]
    test_points: usize,
    /// Extra explicit parameter vectors.
    #[serde(default)]
    points: Vec<Vec<f64>>,
    /// Also report every training sample.
    #[serde(default = "yes")]
    training_samples: bool,
}

fn yes() -> bool {
    true
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> qgrom::Result<()>) -> qgrom::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn init_logging(json: bool) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if json {
        builder.format(|buf, record| {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0.0, |d| d.as_secs_f64());
            let line = serde_json::json!({
                "ts": ts,
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    builder.init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.json_log);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let data = &cli.data_dir;
    match &cli.command {
        Command::Simulate { config, out } => simulate(&read_config(config)?, &out.clone().unwrap_or(data.join("simulation"))),
        Command::Sweep { config, jobs } => {
            let cfg: OfflineConfig = read_config(config)?;
            sweep(&cfg.plan, *jobs, data)
        }
        Command::Pod { input, rank, out } => {
            let m = read_snapshots(input)?;
            let svd = deterministic_pod(m.data())?;
            let basis = ReducedBasis::from_svd(&svd, *rank, m.variable(), m.grid(), Provenance::Deterministic)?
                .with_fingerprint(*m.fingerprint());
            save_basis(&basis, &out.clone().unwrap_or(data.join("pod")))
        }
        Command::Rpod {
            input,
            rank,
            oversample,
            power,
            seed,
            out,
        } => {
            let m = read_snapshots(input)?;
            let cfg = RpodSettings {
                rank: *rank,
                oversample: *oversample,
                power: *power,
                seed: *seed,
            };
            let basis = pipeline::build_basis(&m, &cfg)?;
            save_basis(&basis, &out.clone().unwrap_or(data.join("rpod")))
        }
        Command::Train {
            config,
            jobs,
            rank,
            seed,
            epochs,
        } => {
            let mut cfg: OfflineConfig = read_config(config)?;
            if let Some(r) = rank {
                cfg.rpod.rank = *r;
            }
            if let Some(s) = seed {
                cfg.lstm.seed = *s;
            }
            if let Some(e) = epochs {
                cfg.lstm.q.epochs = *e;
                cfg.lstm.psi.epochs = *e;
            }
            let art = RomArtifacts::offline(&cfg, Some(data), *jobs)?;
            for v in Variable::ALL {
                if let Some(last) = art.losses[v as usize].last() {
                    log::info!("{v}: final train mse {:.3e}, val mse {:.3e}", last.train_mse, last.val_mse);
                }
            }
            Ok(())
        }
        Command::Predict { mu, out, fields } => predict(data, mu, &out.clone().unwrap_or(data.join("predict")), *fields),
        Command::Evaluate { config, out } => {
            let cfg: EvaluateConfig = read_config(config)?;
            evaluate_cmd(data, &cfg, &out.clone().unwrap_or(data.join("errors.csv")))
        }
        Command::Bench { out } => {
            let art = RomArtifacts::load(data)?;
            let rows = pipeline::benchmark(&art)?;
            let path = out.clone().unwrap_or(data.join("timing.csv"));
            write_atomic(&path, &csv_bytes(|b| write_timing_csv(&rows, b))?)?;
            log::info!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn simulate(cfg: &SimulateConfig, out: &Path) -> Outcome {
    cfg.grid.validate()?;
    let params = match cfg.params {
        Some(p) => p,
        None => PhysParams::double_gyre(&cfg.grid),
    };
    let solver = QgSolver::new(&cfg.grid, params, cfg.solver)?;
    let mut series = SnapshotSeries::new(&cfg.grid, Vec::new());
    let summary = run_simulation(&solver, cfg.dt, cfg.t_end, cfg.window, |rec| series.push(rec))?;
    log::info!(
        "{} steps to t={} in {:.2}s, {} snapshots",
        summary.steps,
        summary.final_time,
        summary.wall_seconds,
        summary.snapshots
    );
    if series.is_empty() {
        log::warn!("no instant of the run falls inside the snapshot window; nothing written");
        return Ok(());
    }
    for v in Variable::ALL {
        let m = assemble_matrix(std::slice::from_ref(&series), v)?;
        write_snapshots(&m, &out.join(format!("{v}.qgs")))?;
        write_atomic(&out.join(format!("mean_{v}.csv")), &csv_bytes(|b| m.write_mean_csv(0, b))?)?;
        let last = m.n_snapshots() - 1;
        let field = m.snapshot_field(last);
        write_atomic(&out.join(format!("final_{v}.csv")), &csv_bytes(|b| field.write_csv(b))?)?;
    }
    log::info!("wrote {}", out.display());
    Ok(())
}

fn sweep(plan: &SweepPlan, jobs: usize, data: &Path) -> Outcome {
    let runs = pipeline::run_sweep(plan, jobs)?;
    let sweep = SweepData::from_series(plan, &runs)?;
    pipeline::write_sweep(data, &sweep)?;
    log::info!(
        "{} samples, {} training and {} reference instants each",
        runs.len(),
        sweep.train(Variable::Q1).n_times(),
        sweep.reference(Variable::Q1).n_times()
    );
    Ok(())
}

fn save_basis(basis: &ReducedBasis, out: &Path) -> Outcome {
    let v = basis.variable();
    reduction::write_basis(basis, &out.join(format!("basis_{v}.qgb")))?;
    write_atomic(
        &out.join("spectrum.csv"),
        &csv_bytes(|b| reduction::write_spectrum_csv(basis.spectrum(), b))?,
    )?;
    log::info!("rank-{} basis for {v} written to {}", basis.rank(), out.display());
    Ok(())
}

fn predict(data: &Path, mu: &[f64], out: &Path, fields: bool) -> Outcome {
    let art = RomArtifacts::load(data)?;
    let horizon = art.sweep.reference(Variable::Q1).times().to_vec();
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for v in Variable::ALL {
        let coeffs = predict_coefficients(&art, v, mu, &horizon)?;
        let mut csv = Vec::new();
        let header: Vec<String> = (1..=art.basis(v).rank()).map(|i| format!("a{i}")).collect();
        writeln!(csv, "t,{}", header.join(",")).map_err(qgrom::Error::from)?;
        for (t, c) in horizon.iter().zip(&coeffs) {
            let row: Vec<String> = c.iter().map(|x| fmt_real(*x)).collect();
            writeln!(csv, "{},{}", fmt_real(*t), row.join(",")).map_err(qgrom::Error::from)?;
        }
        files.push((out.join(format!("coefficients_{v}.csv")), csv));
        let recon = reconstruct_from(&art, v, mu, &coeffs)?;
        let mut mean = recon[0].clone();
        for f in &recon[1..] {
            mean = &mean + f;
        }
        let mean = mean.scaled(1.0 / recon.len() as f64);
        files.push((out.join(format!("mean_{v}.csv")), csv_bytes(|b| mean.write_csv(b))?));
        if fields {
            for (p, f) in recon.iter().enumerate() {
                files.push((out.join(format!("{v}_{p:04}.csv")), csv_bytes(|b| f.write_csv(b))?));
            }
        }
    }
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    log::info!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn evaluate_cmd(data: &Path, cfg: &EvaluateConfig, out: &Path) -> Outcome {
    let art = RomArtifacts::load(data)?;
    let plan = &art.config.plan;
    let mut reports = Vec::new();
    if cfg.training_samples {
        for (k, mu) in art.samples().iter().enumerate() {
            let (means, horizon) = training_reference(&art, k);
            reports.push(evaluate_means(&art, mu, &means, &horizon)?);
        }
    }
    let mut points = cfg.points.clone();
    points.extend(draw_test_points(plan, cfg.test_points, cfg.seed));
    for mu in &points {
        let sample = plan.sample_for(mu)?;
        log::info!("reference run at {mu:?}");
        let run = run_fom(plan, &sample)?;
        let (_, reference) = split_series(plan, &run);
        reports.push(evaluate(&art, mu, &reference)?);
    }
    write_atomic(out, &csv_bytes(|b| write_error_csv(&plan.mu_names(), &reports, b))?)?;
    log::info!("wrote {} rows to {}", reports.len(), out.display());
    Ok(())
}
