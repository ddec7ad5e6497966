//! Offline sweep, reduction and training, and the online reduced model:
//! nearest-sample mean plus basis times forecast coefficients.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{fmt_real, l2_norm, Field, StructuredGrid};
use crate::lstm::{self, build_dataset, LossRecord, LstmHyper, LstmModel};
use crate::reduction::{
    deterministic_pod, modal_coefficients, projection_error_of, rpod, CoefficientTable, Provenance, ReducedBasis,
    DEFAULT_OVERSAMPLE, DEFAULT_POWER,
};
use crate::snapshots::{
    assemble_matrix, read_snapshots, time_average, write_snapshots, SnapshotMatrix, SnapshotSeries, Variable,
};
use crate::solver::{run_simulation, Forcing, PhysParams, QgSolver, SolverSettings, TimeWindow};

pub const MANIFEST_NAME: &str = "rom-manifest.json";
pub const DEFAULT_RANK: usize = 10;

/// Swept physical parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Delta,
    Sigma,
    Fr,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Delta => "delta",
            Axis::Sigma => "sigma",
            Axis::Fr => "fr",
        }
    }
}

/// Admissible parameter ranges, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamBox {
    pub delta: [f64; 2],
    pub sigma: [f64; 2],
    pub fr: [f64; 2],
}

impl Default for ParamBox {
    fn default() -> Self {
        Self {
            delta: [0.2, 0.6],
            sigma: [0.006, 0.01],
            fr: [0.07, 0.11],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub delta: f64,
    pub sigma: f64,
    pub fr: f64,
}

impl Sample {
    fn get(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Delta => self.delta,
            Axis::Sigma => self.sigma,
            Axis::Fr => self.fr,
        }
    }
}

fn default_re() -> f64 {
    450.0
}

fn default_ro() -> f64 {
    0.001
}

fn default_forcing() -> Forcing {
    Forcing::DoubleGyre { amplitude: 1.0 }
}

/// Cartesian-product parameter sweep with its time windows.
///
/// Each run starts from rest, records snapshots from `train_window[0]` every
/// `stride` up to `predict_end`; instants up to `train_window[1]` train the
/// reduced model and the rest serve as the reference for the forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub grid: StructuredGrid,
    #[serde(default = "default_re")]
    pub re: f64,
    #[serde(default = "default_ro")]
    pub ro: f64,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub fr: Vec<f64>,
    #[serde(default = "default_forcing")]
    pub forcing: Forcing,
    /// Filter radius of both layers; the grid spacing when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub dt: f64,
    pub train_window: [f64; 2],
    pub stride: f64,
    pub predict_end: f64,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub bounds: ParamBox,
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl SweepPlan {
    /// Three aspect ratios on a 16 x 32 grid, trained on [2, 6] and
    /// forecast to t = 10.
    pub fn desk() -> Self {
        Self {
            grid: StructuredGrid::double_gyre(16).expect("valid grid"),
            re: default_re(),
            ro: default_ro(),
            delta: vec![0.3, 0.45, 0.6],
            sigma: vec![0.006],
            fr: vec![0.1],
            forcing: default_forcing(),
            alpha: None,
            dt: 1e-3,
            train_window: [2.0, 6.0],
            stride: 0.1,
            predict_end: 10.0,
            solver: SolverSettings::default(),
            bounds: ParamBox::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (axis, list, range) in [
            (Axis::Delta, &self.delta, self.bounds.delta),
            (Axis::Sigma, &self.sigma, self.bounds.sigma),
            (Axis::Fr, &self.fr, self.bounds.fr),
        ] {
            if list.is_empty() {
                return Err(Error::invalid(format!("sampling list for {} is empty", axis.name())));
            }
            if !(range[0] <= range[1]) {
                return Err(Error::invalid(format!("bounds for {} are reversed", axis.name())));
            }
            for v in list {
                if !(v.is_finite() && *v >= range[0] && *v <= range[1]) {
                    return Err(Error::invalid(format!(
                        "{} = {v} lies outside the declared box [{}, {}]",
                        axis.name(),
                        range[0],
                        range[1]
                    )));
                }
            }
            let mut sorted = list.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::invalid(format!("sampling list for {} has duplicates", axis.name())));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt must be positive"));
        }
        if !(self.stride > 0.0) {
            return Err(Error::invalid("stride must be positive"));
        }
        let ratio = self.stride / self.dt;
        if !near(ratio, ratio.round()) || ratio.round() < 1.0 {
            return Err(Error::invalid("stride must be an integer multiple of dt"));
        }
        let [t0, t1] = self.train_window;
        if !(t0 >= 0.0 && t1 > t0 && self.predict_end > t1) {
            return Err(Error::invalid(
                "need 0 <= train start < train end < prediction end",
            ));
        }
        for s in self.samples() {
            self.phys(&s).validate()?;
        }
        Ok(())
    }

    /// Samples ordered with delta slowest and Fr fastest.
    pub fn samples(&self) -> Vec<Sample> {
        let mut out = Vec::with_capacity(self.delta.len() * self.sigma.len() * self.fr.len());
        for &delta in &self.delta {
            for &sigma in &self.sigma {
                for &fr in &self.fr {
                    out.push(Sample { delta, sigma, fr });
                }
            }
        }
        out
    }

    /// Axes with more than one sampled value; these form the parameter vector.
    pub fn varied(&self) -> Vec<Axis> {
        [(Axis::Delta, &self.delta), (Axis::Sigma, &self.sigma), (Axis::Fr, &self.fr)]
            .into_iter()
            .filter(|(_, l)| l.len() > 1)
            .map(|(a, _)| a)
            .collect()
    }

    pub fn mu_names(&self) -> Vec<String> {
        self.varied().iter().map(|a| a.name().to_string()).collect()
    }

    pub fn mu_of(&self, s: &Sample) -> Vec<f64> {
        self.varied().iter().map(|a| s.get(*a)).collect()
    }

    /// Sample for a parameter vector over the varied axes.
    pub fn sample_for(&self, mu: &[f64]) -> Result<Sample> {
        let axes = self.varied();
        if mu.len() != axes.len() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, the sweep varies {:?}",
                mu.len(),
                self.mu_names()
            )));
        }
        let mut s = Sample {
            delta: self.delta[0],
            sigma: self.sigma[0],
            fr: self.fr[0],
        };
        for (a, v) in axes.iter().zip(mu) {
            match a {
                Axis::Delta => s.delta = *v,
                Axis::Sigma => s.sigma = *v,
                Axis::Fr => s.fr = *v,
            }
        }
        Ok(s)
    }

    pub fn phys(&self, s: &Sample) -> PhysParams {
        let alpha = self.alpha.unwrap_or_else(|| self.grid.h_max());
        PhysParams {
            re: self.re,
            ro: self.ro,
            fr: s.fr,
            delta: s.delta,
            sigma: s.sigma,
            alpha1: alpha,
            alpha2: alpha,
            forcing: self.forcing,
        }
    }

    /// Per-axis `[min, max]` of the sampled values of the varied axes.
    pub fn sampled_ranges(&self) -> Vec<[f64; 2]> {
        self.varied()
            .iter()
            .map(|a| {
                let list = match a {
                    Axis::Delta => &self.delta,
                    Axis::Sigma => &self.sigma,
                    Axis::Fr => &self.fr,
                };
                let lo = list.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = list.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                [lo, hi]
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON encoding (solver settings included).
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("plan serializes");
        Sha256::digest(&json).into()
    }
}

/// `n` parameter vectors drawn uniformly inside the sampled range of each
/// varied axis.
pub fn draw_test_points(plan: &SweepPlan, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let ranges = plan.sampled_ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ranges.iter().map(|[lo, hi]| rng.random_range(*lo..=*hi)).collect())
        .collect()
}

/// Runs the full order model for one sample over
/// `[train_window[0], predict_end]`.
pub fn run_fom(plan: &SweepPlan, sample: &Sample) -> Result<SnapshotSeries> {
    let params = plan.phys(sample);
    let solver = QgSolver::new(&plan.grid, params, plan.solver)?;
    let mut series = SnapshotSeries::new(&plan.grid, plan.mu_of(sample));
    let window = TimeWindow {
        start: plan.train_window[0],
        stride: plan.stride,
    };
    run_simulation(&solver, plan.dt, plan.predict_end, window, |rec| series.push(rec))?;
    Ok(series)
}

/// Training and reference portions of one run.
pub fn split_series(plan: &SweepPlan, series: &SnapshotSeries) -> (SnapshotSeries, SnapshotSeries) {
    let t1 = plan.train_window[1];
    let cut = t1 + 1e-9 * t1.abs().max(1.0);
    (
        series.restrict(f64::NEG_INFINITY, cut),
        series.restrict(cut, f64::INFINITY),
    )
}

/// Runs every sample with up to `jobs` worker threads; results keep sample order.
pub fn run_sweep(plan: &SweepPlan, jobs: usize) -> Result<Vec<SnapshotSeries>> {
    plan.validate()?;
    let samples = plan.samples();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<SnapshotSeries>>>> = Mutex::new((0..samples.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(samples.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= samples.len() {
                    break;
                }
                log::info!("sweep sample {}/{}: {:?}", k + 1, samples.len(), samples[k]);
                let out = run_fom(plan, &samples[k]);
                slots.lock().expect("sweep results lock")[k] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("sweep results lock")
        .into_iter()
        .map(|s| s.expect("every sample was run"))
        .collect()
}

/// Snapshot matrices of a sweep: training window and forecast reference.
#[derive(Debug, Clone)]
pub struct SweepData {
    pub train: Vec<SnapshotMatrix>,
    pub reference: Vec<SnapshotMatrix>,
}

impl SweepData {
    pub fn from_series(plan: &SweepPlan, runs: &[SnapshotSeries]) -> Result<Self> {
        let fp = plan.fingerprint();
        let (train, reference): (Vec<_>, Vec<_>) = runs.iter().map(|s| split_series(plan, s)).unzip();
        if train.iter().chain(&reference).any(SnapshotSeries::is_empty) {
            return Err(Error::invalid(
                "a run produced no snapshots in the training or forecast window",
            ));
        }
        let build = |set: &[SnapshotSeries]| -> Result<Vec<SnapshotMatrix>> {
            Variable::ALL
                .iter()
                .map(|v| Ok(assemble_matrix(set, *v)?.with_fingerprint(fp)))
                .collect()
        };
        Ok(Self {
            train: build(&train)?,
            reference: build(&reference)?,
        })
    }

    pub fn train(&self, v: Variable) -> &SnapshotMatrix {
        &self.train[v as usize]
    }

    pub fn reference(&self, v: Variable) -> &SnapshotMatrix {
        &self.reference[v as usize]
    }
}

fn train_path(dir: &Path, v: Variable) -> PathBuf {
    dir.join("snapshots").join(format!("train_{v}.qgs"))
}

fn reference_path(dir: &Path, v: Variable) -> PathBuf {
    dir.join("snapshots").join(format!("reference_{v}.qgs"))
}

pub fn write_sweep(dir: &Path, data: &SweepData) -> Result<()> {
    for v in Variable::ALL {
        write_snapshots(data.train(v), &train_path(dir, v))?;
        write_snapshots(data.reference(v), &reference_path(dir, v))?;
    }
    Ok(())
}

fn check_fingerprint(expected: &[u8; 32], found: &[u8; 32]) -> Result<()> {
    if expected != found {
        return Err(Error::FingerprintMismatch {
            expected: hex::encode(expected),
            found: hex::encode(found),
        });
    }
    Ok(())
}

/// Loads cached sweep matrices; `Ok(None)` when the cache is absent.
pub fn load_sweep(dir: &Path, fingerprint: &[u8; 32]) -> Result<Option<SweepData>> {
    let paths: Vec<PathBuf> = Variable::ALL
        .iter()
        .flat_map(|v| [train_path(dir, *v), reference_path(dir, *v)])
        .collect();
    let present = paths.iter().filter(|p| p.exists()).count();
    if present == 0 {
        return Ok(None);
    }
    if present != paths.len() {
        return Err(Error::ArtifactIncomplete(format!(
            "snapshot cache in {} is partial",
            dir.display()
        )));
    }
    let mut train = Vec::new();
    let mut reference = Vec::new();
    for v in Variable::ALL {
        for (path, set) in [(train_path(dir, v), &mut train), (reference_path(dir, v), &mut reference)] {
            let m = read_snapshots(&path)?;
            check_fingerprint(fingerprint, m.fingerprint())?;
            if m.variable() != v {
                return Err(Error::Format(format!("{} holds {}", path.display(), m.variable())));
            }
            set.push(m);
        }
    }
    Ok(Some(SweepData { train, reference }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpodSettings {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    #[serde(default = "default_power")]
    pub power: usize,
    pub seed: u64,
}

fn default_rank() -> usize {
    DEFAULT_RANK
}

fn default_oversample() -> usize {
    DEFAULT_OVERSAMPLE
}

fn default_power() -> usize {
    DEFAULT_POWER
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmSettings {
    #[serde(default = "LstmHyper::m_q")]
    pub q: LstmHyper,
    #[serde(default = "LstmHyper::m_psi")]
    pub psi: LstmHyper,
    pub seed: u64,
}

impl LstmSettings {
    pub fn hyper(&self, v: Variable) -> LstmHyper {
        match v {
            Variable::Q1 | Variable::Q2 => self.q,
            Variable::Psi1 | Variable::Psi2 => self.psi,
        }
    }

    /// Distinct training seed per variable.
    pub fn seed_for(&self, v: Variable) -> u64 {
        self.seed.wrapping_add(v.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub plan: SweepPlan,
    pub rpod: RpodSettings,
    pub lstm: LstmSettings,
}

/// Everything the online phase needs, tied together by the sweep fingerprint.
#[derive(Debug, Clone)]
pub struct RomArtifacts {
    pub config: OfflineConfig,
    pub fingerprint: [u8; 32],
    pub sweep: SweepData,
    pub bases: Vec<ReducedBasis>,
    pub coefficients: Vec<CoefficientTable>,
    pub models: Vec<Option<LstmModel>>,
    pub losses: Vec<Vec<LossRecord>>,
}

/// Randomized basis of the training matrix; the oversampling is reduced if
/// the matrix is too small for `rank + oversample` columns.
pub fn build_basis(matrix: &SnapshotMatrix, cfg: &RpodSettings) -> Result<ReducedBasis> {
    let cap = matrix.n_cells().min(matrix.n_snapshots());
    if cfg.rank > cap {
        return Err(Error::invalid(format!(
            "rank {} exceeds min(N_C, N^s) = {cap}",
            cfg.rank
        )));
    }
    let oversample = cfg.oversample.min(cap - cfg.rank);
    if oversample < cfg.oversample {
        log::warn!(
            "{}: oversampling reduced from {} to {oversample} to fit a {}x{} matrix",
            matrix.variable(),
            cfg.oversample,
            matrix.n_cells(),
            matrix.n_snapshots()
        );
    }
    let svd = rpod(matrix.data(), cfg.rank, oversample, cfg.power, cfg.seed)?;
    let prov = Provenance::Randomized {
        oversample,
        power: cfg.power,
        seed: cfg.seed,
    };
    Ok(ReducedBasis::from_svd(&svd, cfg.rank, matrix.variable(), matrix.grid(), prov)?.with_fingerprint(*matrix.fingerprint()))
}

/// Trains one forecaster on the coefficient table of the training sweep.
pub fn train_model(
    coeffs: &CoefficientTable,
    matrix: &SnapshotMatrix,
    hyper: &LstmHyper,
    seed: u64,
) -> Result<(LstmModel, Vec<LossRecord>)> {
    let ds = build_dataset(coeffs.data.as_ref(), matrix.params(), matrix.times(), hyper.lookback)?;
    lstm::train(&ds, hyper, seed)
}

impl RomArtifacts {
    /// Runs (or loads from `dir`) the sweep, reduces each variable and trains
    /// its forecaster; persists everything to `dir` when given.
    pub fn offline(config: &OfflineConfig, dir: Option<&Path>, jobs: usize) -> Result<Self> {
        config.plan.validate()?;
        for v in Variable::ALL {
            config.lstm.hyper(v).validate()?;
        }
        let fingerprint = config.plan.fingerprint();
        let cached = match dir {
            Some(d) => load_sweep(d, &fingerprint).map_err(|e| e.in_stage("sweep"))?,
            None => None,
        };
        let sweep = match cached {
            Some(s) => {
                log::info!("loaded cached sweep {}", hex::encode(fingerprint));
                s
            }
            None => {
                let runs = run_sweep(&config.plan, jobs).map_err(|e| e.in_stage("sweep"))?;
                let data = SweepData::from_series(&config.plan, &runs).map_err(|e| e.in_stage("sweep"))?;
                if let Some(d) = dir {
                    write_sweep(d, &data).map_err(|e| e.in_stage("sweep"))?;
                }
                data
            }
        };
        let mut art = Self::reduce(config.clone(), sweep).map_err(|e| e.in_stage("reduction"))?;
        art.train_all().map_err(|e| e.in_stage("training"))?;
        if let Some(d) = dir {
            art.save(d).map_err(|e| e.in_stage("persist"))?;
        }
        Ok(art)
    }

    /// Bases and coefficient tables for every variable; no models yet.
    pub fn reduce(config: OfflineConfig, sweep: SweepData) -> Result<Self> {
        let fingerprint = config.plan.fingerprint();
        let mut bases = Vec::new();
        let mut coefficients = Vec::new();
        for v in Variable::ALL {
            let m = sweep.train(v);
            check_fingerprint(&fingerprint, m.fingerprint())?;
            let basis = build_basis(m, &config.rpod)?;
            coefficients.push(modal_coefficients(&basis, m)?);
            bases.push(basis);
        }
        Ok(Self {
            config,
            fingerprint,
            sweep,
            bases,
            coefficients,
            models: vec![None; 4],
            losses: vec![Vec::new(); 4],
        })
    }

    /// Trains the four forecasters, one thread per variable.
    pub fn train_all(&mut self) -> Result<()> {
        let results: Vec<Result<(LstmModel, Vec<LossRecord>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = Variable::ALL
                .iter()
                .map(|&v| {
                    let this = &*self;
                    scope.spawn(move || {
                        log::info!("training {v} forecaster");
                        train_model(
                            &this.coefficients[v as usize],
                            this.sweep.train(v),
                            &this.config.lstm.hyper(v),
                            this.config.lstm.seed_for(v),
                        )
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread")).collect()
        });
        for (v, r) in Variable::ALL.iter().zip(results) {
            let (model, hist) = r?;
            self.models[*v as usize] = Some(model);
            self.losses[*v as usize] = hist;
        }
        Ok(())
    }

    pub fn basis(&self, v: Variable) -> &ReducedBasis {
        &self.bases[v as usize]
    }

    pub fn model(&self, v: Variable) -> Result<&LstmModel> {
        self.models[v as usize]
            .as_ref()
            .ok_or_else(|| Error::ArtifactIncomplete(format!("no trained model for {v}")))
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        self.sweep.train(Variable::Q1).params()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for v in Variable::ALL {
            let b = format!("basis_{v}.qgb");
            crate::reduction::write_basis(self.basis(v), &dir.join(&b))?;
            files.insert(format!("basis_{v}"), b);
            let spec = format!("spectrum_{v}.csv");
            let mut buf = Vec::new();
            crate::reduction::write_spectrum_csv(self.basis(v).spectrum(), &mut buf)?;
            crate::archive::write_atomic(&dir.join(&spec), &buf)?;
            files.insert(format!("spectrum_{v}"), spec);
            let m = format!("model_{v}.qgl");
            lstm::write_model(self.model(v)?, &dir.join(&m))?;
            files.insert(format!("model_{v}"), m);
            let loss = format!("loss_{v}.csv");
            let mut buf = Vec::new();
            lstm::write_loss_csv(&self.losses[v as usize], &mut buf)?;
            crate::archive::write_atomic(&dir.join(&loss), &buf)?;
            files.insert(format!("loss_{v}"), loss);
            for (key, path) in [("train", train_path(dir, v)), ("reference", reference_path(dir, v))] {
                if !path.exists() {
                    let m = if key == "train" { self.sweep.train(v) } else { self.sweep.reference(v) };
                    write_snapshots(m, &path)?;
                }
                let rel = path.strip_prefix(dir).expect("inside dir").to_string_lossy().into_owned();
                files.insert(format!("{key}_{v}"), rel);
            }
        }
        let manifest = Manifest {
            fingerprint: hex::encode(self.fingerprint),
            config: self.config.clone(),
            mu_names: self.config.plan.mu_names(),
            samples: self.samples().to_vec(),
            files,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        crate::archive::write_atomic(&dir.join(MANIFEST_NAME), &json)
    }

    /// Loads artifacts written by [`save`](Self::save), rejecting any file
    /// whose fingerprint differs from the manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let fingerprint = manifest.fingerprint_bytes()?;
        if manifest.config.plan.fingerprint() != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: manifest.fingerprint.clone(),
                found: hex::encode(manifest.config.plan.fingerprint()),
            });
        }
        let file = |key: String| -> Result<PathBuf> {
            let rel = manifest
                .files
                .get(&key)
                .ok_or_else(|| Error::ArtifactIncomplete(format!("manifest lists no {key}")))?;
            let p = dir.join(rel);
            if !p.exists() {
                return Err(Error::ArtifactIncomplete(format!("missing {}", p.display())));
            }
            Ok(p)
        };
        let mut train = Vec::new();
        let mut reference = Vec::new();
        let mut bases = Vec::new();
        let mut models = Vec::new();
        for v in Variable::ALL {
            let t = read_snapshots(&file(format!("train_{v}"))?)?;
            let r = read_snapshots(&file(format!("reference_{v}"))?)?;
            let b = crate::reduction::read_basis(&file(format!("basis_{v}"))?)?;
            for fp in [t.fingerprint(), r.fingerprint(), b.fingerprint()] {
                check_fingerprint(&fingerprint, fp)?;
            }
            train.push(t);
            reference.push(r);
            bases.push(b);
            models.push(Some(lstm::read_model(&file(format!("model_{v}"))?)?));
        }
        let sweep = SweepData { train, reference };
        let coefficients = Variable::ALL
            .iter()
            .map(|v| modal_coefficients(&bases[*v as usize], sweep.train(*v)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: manifest.config,
            fingerprint,
            sweep,
            bases,
            coefficients,
            models,
            losses: vec![Vec::new(); 4],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub fingerprint: String,
    pub config: OfflineConfig,
    pub mu_names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Err(Error::ArtifactIncomplete(format!("missing {}", path.display())));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn fingerprint_bytes(&self) -> Result<[u8; 32]> {
        let raw = hex::decode(&self.fingerprint).map_err(|e| Error::Format(format!("manifest fingerprint: {e}")))?;
        raw.try_into()
            .map_err(|_| Error::Format("manifest fingerprint must be 32 bytes".into()))
    }
}

/// Index of the sample closest to `mu` in Euclidean distance, ties to the
/// lowest index. With `scale`, coordinate `c` is divided by `scale[c]` first.
pub fn nearest_sample(mu: &[f64], samples: &[Vec<f64>], scale: Option<&[f64]>) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to search"));
    }
    if samples.iter().any(|s| s.len() != mu.len()) {
        return Err(Error::invalid(format!(
            "parameter vector has {} entries, samples have {}",
            mu.len(),
            samples[0].len()
        )));
    }
    if let Some(sc) = scale {
        if sc.len() != mu.len() || sc.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("scaling needs one positive factor per coordinate"));
        }
    }
    let dist = |s: &[f64]| -> f64 {
        s.iter()
            .zip(mu)
            .enumerate()
            .map(|(c, (a, b))| {
                let d = (a - b) / scale.map_or(1.0, |sc| sc[c]);
                d * d
            })
            .sum()
    };
    let mut best = 0;
    let mut best_d = dist(&samples[0]);
    for (k, s) in samples.iter().enumerate().skip(1) {
        let d = dist(s);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    Ok(best)
}

/// `||fom - rom|| / ||fom||` in the discrete L2 norm; `None` when the
/// reference has zero norm.
pub fn relative_l2_error(fom: &Field, rom: &Field) -> Option<f64> {
    assert_eq!(fom.grid(), rom.grid(), "fields on different grids");
    let norm = l2_norm(fom);
    if norm == 0.0 {
        return None;
    }
    Some(l2_norm(&(fom - rom)) / norm)
}

/// Forecast coefficients at `horizon`, seeded with the last training
/// coefficients of the sample nearest to `mu`.
pub fn predict_coefficients(art: &RomArtifacts, v: Variable, mu: &[f64], horizon: &[f64]) -> Result<Vec<Vec<f64>>> {
    let model = art.model(v)?;
    let matrix = art.sweep.train(v);
    let k = nearest_sample(mu, matrix.params(), None)?;
    let n_t = matrix.n_times();
    let lb = model.lookback();
    if lb > n_t {
        return Err(Error::invalid("training window shorter than the lookback"));
    }
    let table = &art.coefficients[v as usize];
    let seed: Vec<Vec<f64>> = (n_t - lb..n_t).map(|p| table.column(matrix.column_index(k, p))).collect();
    let seed_times = &matrix.times()[n_t - lb..];
    model.predict_autoregressive(&seed, seed_times, mu, horizon)
}

fn expand_on(basis: &ReducedBasis, mean: &[f64], coeffs: &[f64]) -> Result<Field> {
    let mut v = basis.expand(coeffs)?;
    v.iter_mut().zip(mean).for_each(|(a, m)| *a += m);
    Ok(Field::from_values_unchecked(basis.grid(), v))
}

/// Nearest-sample mean plus basis times forecast coefficients at each
/// horizon time.
pub fn reconstruct(art: &RomArtifacts, v: Variable, mu: &[f64], horizon: &[f64]) -> Result<Vec<Field>> {
    let coeffs = predict_coefficients(art, v, mu, horizon)?;
    reconstruct_from(art, v, mu, &coeffs)
}

/// Reconstruction from given coefficient vectors.
pub fn reconstruct_from(art: &RomArtifacts, v: Variable, mu: &[f64], coeffs: &[Vec<f64>]) -> Result<Vec<Field>> {
    let matrix = art.sweep.train(v);
    let k = nearest_sample(mu, matrix.params(), None)?;
    coeffs.iter().map(|c| expand_on(art.basis(v), matrix.mean(k), c)).collect()
}

/// Time average of the reconstruction over `horizon`.
pub fn rom_mean(art: &RomArtifacts, v: Variable, mu: &[f64], horizon: &[f64]) -> Result<Field> {
    if horizon.is_empty() {
        return Err(Error::invalid("empty forecast horizon"));
    }
    let coeffs = predict_coefficients(art, v, mu, horizon)?;
    let r = art.basis(v).rank();
    let mut avg = vec![0.0; r];
    for c in &coeffs {
        avg.iter_mut().zip(c).for_each(|(a, x)| *a += x);
    }
    avg.iter_mut().for_each(|a| *a /= coeffs.len() as f64);
    let matrix = art.sweep.train(v);
    let k = nearest_sample(mu, matrix.params(), None)?;
    expand_on(art.basis(v), matrix.mean(k), &avg)
}

/// Space-time relative error of training sample `k` reconstructed with its
/// own training coefficients: `sqrt(sum_p ||F_p - R_p||^2 / sum_p ||F_p - mean||^2)`.
pub fn consistency_error(basis: &ReducedBasis, matrix: &SnapshotMatrix, k: usize) -> Result<f64> {
    if k >= matrix.n_samples() {
        return Err(Error::invalid(format!("sample {k} out of range")));
    }
    let coeffs = modal_coefficients(basis, matrix)?;
    let mean = matrix.mean_field(k);
    let mut num = 0.0;
    let mut den = 0.0;
    for p in 0..matrix.n_times() {
        let j = matrix.column_index(k, p);
        let fom = matrix.snapshot_field(j);
        let rom = expand_on(basis, matrix.mean(k), &coeffs.column(j))?;
        num += l2_norm(&(&fom - &rom)).powi(2);
        den += l2_norm(&(&fom - &mean)).powi(2);
    }
    if den == 0.0 {
        return Err(Error::invalid("sample has no fluctuations"));
    }
    Ok((num / den).sqrt())
}

/// Projection error of one sample's fluctuation block.
pub fn sample_projection_error(basis: &ReducedBasis, matrix: &SnapshotMatrix, k: usize) -> Result<f64> {
    projection_error_of(basis.modes(), matrix.block(k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub mu: Vec<f64>,
    /// In `Variable::ALL` order; `None` when the reference mean is zero.
    pub eps: [Option<f64>; 4],
}

/// Errors of the forecast time averages against reference means over the
/// same horizon.
pub fn evaluate_means(art: &RomArtifacts, mu: &[f64], reference: &[Field; 4], horizon: &[f64]) -> Result<ErrorReport> {
    let mut eps = [None; 4];
    for v in Variable::ALL {
        let rom = rom_mean(art, v, mu, horizon)?;
        eps[v as usize] = relative_l2_error(&reference[v as usize], &rom);
    }
    Ok(ErrorReport { mu: mu.to_vec(), eps })
}

/// Errors against a full order run covering the forecast window.
pub fn evaluate(art: &RomArtifacts, mu: &[f64], fom_reference: &SnapshotSeries) -> Result<ErrorReport> {
    if fom_reference.is_empty() {
        return Err(Error::invalid("reference run has no snapshots in the forecast window"));
    }
    let means = [
        time_average(fom_reference, Variable::Q1)?,
        time_average(fom_reference, Variable::Q2)?,
        time_average(fom_reference, Variable::Psi1)?,
        time_average(fom_reference, Variable::Psi2)?,
    ];
    evaluate_means(art, mu, &means, fom_reference.times())
}

/// Forecast-window reference of a training sample, taken from the sweep.
pub fn training_reference(art: &RomArtifacts, k: usize) -> ([Field; 4], Vec<f64>) {
    let means = Variable::ALL.map(|v| art.sweep.reference(v).mean_field(k));
    (means, art.sweep.reference(Variable::Q1).times().to_vec())
}

pub fn write_error_csv<W: Write>(mu_names: &[String], reports: &[ErrorReport], mut out: W) -> Result<()> {
    let mut header: Vec<String> = mu_names.to_vec();
    header.extend(Variable::ALL.iter().map(|v| format!("eps_{v}")));
    writeln!(out, "{}", header.join(","))?;
    for r in reports {
        let mut row: Vec<String> = r.mu.iter().map(|v| fmt_real(*v)).collect();
        row.extend(r.eps.iter().map(|e| e.map_or_else(|| "undefined".to_string(), fmt_real)));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub phase: &'static str,
    pub seconds: f64,
    pub speedup_vs_baseline: f64,
}

/// Times one full order run, both decompositions of the `q1` training
/// matrix and one online forecast of all four variables.
pub fn benchmark(art: &RomArtifacts) -> Result<Vec<TimingRow>> {
    let plan = &art.config.plan;
    let samples = plan.samples();
    let t = Instant::now();
    run_fom(plan, &samples[0])?;
    let fom = t.elapsed().as_secs_f64();

    let m = art.sweep.train(Variable::Q1);
    let t = Instant::now();
    deterministic_pod(m.data())?;
    let pod = t.elapsed().as_secs_f64();
    let t = Instant::now();
    build_basis(m, &art.config.rpod)?;
    let rp = t.elapsed().as_secs_f64();

    let mu = art.samples()[0].clone();
    let horizon = art.sweep.reference(Variable::Q1).times().to_vec();
    let t = Instant::now();
    for v in Variable::ALL {
        reconstruct(art, v, &mu, &horizon)?;
    }
    let online = t.elapsed().as_secs_f64();
    Ok(vec![
        TimingRow {
            phase: "snapshot_generation",
            seconds: fom,
            speedup_vs_baseline: 1.0,
        },
        TimingRow {
            phase: "basis_deterministic_pod",
            seconds: pod,
            speedup_vs_baseline: 1.0,
        },
        TimingRow {
            phase: "basis_rpod",
            seconds: rp,
            speedup_vs_baseline: pod / rp,
        },
        TimingRow {
            phase: "online_rom",
            seconds: online,
            speedup_vs_baseline: fom / online,
        },
    ])
}

pub fn write_timing_csv<W: Write>(rows: &[TimingRow], mut out: W) -> Result<()> {
    writeln!(out, "phase,seconds,speedup_vs_baseline")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.phase, fmt_real(r.seconds), fmt_real(r.speedup_vs_baseline))?;
    }
    Ok(())
}
