//! Subcommands of the `rmprod` binary.
//!
//! Exit codes: 0 pass, 1 statistical failure, 2 usage or config error,
//! 3 numerical non-convergence.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rmprod::bessel::{
    bessel_ratio_asymptotic, bessel_ratio_contour, bessel_ratio_direct, bessel_ratio_multi, hook_schur, BesselError,
    HookIndex, LogSpectrum,
};
use rmprod::measures::{density_from_boundary, MeasureError, SpectralMeasure};
use rmprod::predict::{self, EnsembleModel, Prediction, PredictError, QuadratureConfig, Regime};
use rmprod::simulate::{read_trials_csv, write_trials_csv, Backend, FactorSpec, SimError, TrialCheckpoint, TrialJob, TrialTable};
use rmprod::stats::{self, Comparison, ReportPolicy, StatReport, StatsError, Verdict};

pub const PREDICTIONS_SCHEMA: &str = "rmprod.predictions.v1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<MeasureError> for CliError {
    fn from(e: MeasureError) -> Self {
        match e {
            MeasureError::Invalid(_) | MeasureError::DomainError(_) | MeasureError::Unsupported(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Measure(m) => m.into(),
            PredictError::DomainError(_) | PredictError::OrderViolation { .. } | PredictError::OutOfSupport { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<BesselError> for CliError {
    fn from(e: BesselError) -> Self {
        match e {
            BesselError::DomainError(_) | BesselError::PrefactorPole { .. } => CliError::Config(e.to_string()),
            BesselError::Measure(m) => m.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Numeric(_) => CliError::Numerical(e.to_string()),
            SimError::Io(io) => CliError::Io(io),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Result of a command that did not error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::Fail => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rmprod", version, about = "Spectra of products of random matrices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contour-integral limits of moments and covariances as JSON.
    Predict(PredictArgs),
    /// Monte Carlo trials of a product as CSV.
    Simulate(SimulateArgs),
    /// Compare a predictions file against a trials CSV.
    Compare(CompareArgs),
    /// Cross-check the Bessel ratio formulas.
    BesselCheck(BesselCheckArgs),
    /// Tabulate a density on a grid as CSV.
    Density(DensityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EnsembleKind {
    Ginibre,
    Jacobi,
    Pointmass,
    Atomic,
}

#[derive(Debug, Clone, Args)]
pub struct MeasureArgs {
    #[arg(long, value_enum)]
    pub ensemble: Option<EnsembleKind>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha_hat: Option<f64>,
    #[arg(long)]
    pub r_hat: Option<f64>,
    #[arg(long)]
    pub x0: Option<f64>,
    /// Log-points of an atomic measure.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub points: Vec<f64>,
    /// Weights of an atomic measure (default: equal).
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
}

fn missing(flag: &str) -> CliError {
    CliError::Usage(format!("--{flag} is required for this ensemble"))
}

impl MeasureArgs {
    pub fn measure(&self) -> Result<SpectralMeasure, CliError> {
        let kind = self.ensemble.ok_or_else(|| CliError::Usage("--ensemble or --config is required".into()))?;
        let mu = match kind {
            EnsembleKind::Ginibre => SpectralMeasure::GinibreLimit { gamma: self.gamma.ok_or_else(|| missing("gamma"))? },
            EnsembleKind::Jacobi => SpectralMeasure::JacobiLimit {
                alpha_hat: self.alpha_hat.ok_or_else(|| missing("alpha-hat"))?,
                r_hat: self.r_hat.ok_or_else(|| missing("r-hat"))?,
            },
            EnsembleKind::Pointmass => SpectralMeasure::PointMass { x0: self.x0.ok_or_else(|| missing("x0"))? },
            EnsembleKind::Atomic => {
                if self.points.is_empty() {
                    return Err(missing("points"));
                }
                let w = if self.weights.is_empty() {
                    vec![1.0 / self.points.len() as f64; self.points.len()]
                } else {
                    self.weights.clone()
                };
                SpectralMeasure::atomic(&self.points, &w)?
            }
        };
        mu.validate()?;
        Ok(mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    FixedM,
    Lyapunov,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// JSON config; replaces the ensemble flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub measure: MeasureArgs,
    #[arg(long, value_enum, default_value = "fixed-m")]
    pub regime: RegimeArg,
    /// Number of identical factors (fixed-M regime).
    #[arg(long, default_value_t = 1)]
    pub factors: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    pub moments: Vec<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub measure: SpectralMeasure,
    pub regime: Regime,
    #[serde(default = "one")]
    pub factors: usize,
    pub moments: Vec<u32>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub schema: String,
    pub config: PredictConfig,
    pub predictions: Vec<Prediction>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn with_output<F>(path: Option<&Path>, stdout: &mut dyn Write, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
{
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => f(stdout),
    }
}

impl PredictArgs {
    pub fn resolve(&self) -> Result<PredictConfig, CliError> {
        let cfg = match &self.config {
            Some(p) => read_json::<PredictConfig>(p)?,
            None => PredictConfig {
                measure: self.measure.measure()?,
                regime: match self.regime {
                    RegimeArg::FixedM => Regime::FixedM,
                    RegimeArg::Lyapunov => Regime::Lyapunov,
                },
                factors: self.factors,
                moments: self.moments.clone(),
            },
        };
        cfg.measure.validate()?;
        if cfg.factors == 0 || cfg.moments.is_empty() {
            return Err(CliError::Config("need at least one factor and one moment".into()));
        }
        Ok(cfg)
    }
}

/// Means of every requested moment and covariances of every pair `k ≤ l`.
pub fn predictions_for(cfg: &PredictConfig, q: &QuadratureConfig) -> Result<Vec<Prediction>, CliError> {
    let mut out = Vec::new();
    match cfg.regime {
        Regime::FixedM => {
            let model = EnsembleModel::identical(cfg.measure.clone(), cfg.factors)?;
            for &k in &cfg.moments {
                out.push(Prediction::new("lln_fixed_m", k, None, &predict::lln_moment_fixed_m(&model, k, q)?));
            }
            for (i, &k) in cfg.moments.iter().enumerate() {
                for &l in &cfg.moments[i..] {
                    out.push(Prediction::new("cov_fixed_m", k, Some(l), &predict::clt_cov_fixed_m(&model, k, l, q)?));
                }
            }
        }
        Regime::Lyapunov => {
            let model = EnsembleModel::lyapunov(cfg.measure.clone())?;
            for &k in &cfg.moments {
                out.push(Prediction::new("lln_lyapunov", k, None, &predict::lln_moment_lyapunov(&model, k, q)?));
            }
            for (i, &k) in cfg.moments.iter().enumerate() {
                for &l in &cfg.moments[i..] {
                    out.push(Prediction::new("cov_lyapunov", k, Some(l), &predict::clt_cov_lyapunov(&model, k, l, q)?));
                }
            }
        }
    }
    Ok(out)
}

pub fn cmd_predict(args: &PredictArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let config = args.resolve()?;
    let predictions = predictions_for(&config, &QuadratureConfig::default())?;
    let file = PredictionFile { schema: PREDICTIONS_SCHEMA.into(), config, predictions };
    with_output(args.out.as_deref(), stdout, |w| {
        serde_json::to_writer_pretty(&mut *w, &file).map_err(|e| CliError::Io(e.into()))?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(Outcome::Pass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FactorKindArg {
    Ginibre,
    Jacobi,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Direct,
    Bigfloat,
    Qr,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Direct => Backend::Direct,
            BackendArg::Bigfloat => Backend::Bigfloat,
            BackendArg::Qr => Backend::Qr,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// JSON config; replaces the factor flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ensemble: Option<FactorKindArg>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    /// Log-eigenvalues of a fixed-spectrum factor.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub lambda: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub m: usize,
    #[arg(long, value_enum, default_value = "direct")]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 100)]
    pub trials: u64,
    #[arg(long, required = true)]
    pub seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// RMTP1 file to resume from and update while running.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Trials between checkpoint writes.
    #[arg(long, default_value_t = 32)]
    pub chunk: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub factor: FactorSpec,
    pub m: usize,
    pub backend: Backend,
    pub trials: u64,
}

impl SimulateArgs {
    pub fn resolve(&self) -> Result<SimulateConfig, CliError> {
        if let Some(p) = &self.config {
            let cfg: SimulateConfig = read_json(p)?;
            cfg.factor.validate()?;
            return Ok(cfg);
        }
        let kind = self.ensemble.ok_or_else(|| CliError::Usage("--ensemble or --config is required".into()))?;
        let factor = match kind {
            FactorKindArg::Fixed => FactorSpec::fixed(self.lambda.clone())?,
            FactorKindArg::Ginibre => {
                FactorSpec::ginibre(self.n.ok_or_else(|| missing("n"))?, self.l.ok_or_else(|| missing("l"))?)?
            }
            FactorKindArg::Jacobi => FactorSpec::jacobi(
                self.n.ok_or_else(|| missing("n"))?,
                self.alpha.ok_or_else(|| missing("alpha"))?,
                self.r.ok_or_else(|| missing("r"))?,
            )?,
        };
        Ok(SimulateConfig { factor, m: self.m, backend: self.backend.into(), trials: self.trials })
    }
}

fn write_checkpoint_atomically(path: &Path, ck: &TrialCheckpoint) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        ck.write_to(&mut w)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs (or resumes) all trials and returns them in trial order.
pub fn simulate_rows(cfg: &SimulateConfig, seed: u64, threads: usize, checkpoint: Option<&Path>, chunk: u64) -> Result<Vec<Vec<f64>>, CliError> {
    let job = TrialJob { spec: cfg.factor.clone(), m: cfg.m, backend: cfg.backend, checkpoints: vec![], seed };
    let mut ck = TrialCheckpoint {
        seed,
        backend: cfg.backend,
        m: cfg.m as u32,
        n: cfg.factor.n as u32,
        trials_total: cfg.trials,
        rows: Vec::new(),
    };
    if let Some(p) = checkpoint.filter(|p| p.exists()) {
        let old = TrialCheckpoint::read_from(BufReader::new(File::open(p)?))?;
        if (old.seed, old.backend, old.m, old.n, old.trials_total) != (ck.seed, ck.backend, ck.m, ck.n, ck.trials_total) {
            return Err(CliError::Config(format!("{} belongs to a different run", p.display())));
        }
        ck.rows = old.rows;
    }
    let chunk = chunk.max(1);
    while (ck.rows.len() as u64) < cfg.trials {
        let start = ck.rows.len() as u64;
        let end = (start + chunk).min(cfg.trials);
        let batch = job.run_with_threads(start..end, threads)?;
        ck.rows.extend(batch.into_iter().map(|r| r.log_sv));
        if let Some(p) = checkpoint {
            write_checkpoint_atomically(p, &ck)?;
        }
    }
    Ok(ck.rows)
}

pub fn cmd_simulate(args: &SimulateArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let cfg = args.resolve()?;
    if cfg.m == 0 || cfg.trials == 0 {
        return Err(CliError::Config("need M >= 1 and at least one trial".into()));
    }
    let threads = args.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let rows = simulate_rows(&cfg, args.seed, threads, args.checkpoint.as_deref(), args.chunk)?;
    let table = TrialTable { seed: args.seed, backend: cfg.backend, m: cfg.m, n: cfg.factor.n, rows };
    let results = table.into_results();
    with_output(args.out.as_deref(), stdout, |w| Ok(write_trials_csv(w, args.seed, &results)?))?;
    Ok(Outcome::Pass)
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub trials: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    pub threshold: f64,
    /// Added in quadrature to every standard error.
    #[arg(long, default_value_t = 0.0)]
    pub se_floor: f64,
    /// Report file, JSON when the name ends in `.json`, CSV otherwise.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn compare_reports(file: &PredictionFile, table: TrialTable, policy: ReportPolicy) -> Result<Vec<StatReport>, CliError> {
    let results = table.into_results();
    let mut items = Vec::new();
    for p in &file.predictions {
        let estimate = stats::estimate_statistic(&p.statistic, p.k, p.l, &results)?;
        let label = match p.l {
            Some(l) => format!("{}[{},{}]", p.statistic, p.k, l),
            None => format!("{}[{}]", p.statistic, p.k),
        };
        items.push(Comparison { statistic: label, predicted: p.value, quadrature_error: p.quadrature_error, estimate });
    }
    Ok(stats::compare(&items, policy))
}

pub fn cmd_compare(args: &CompareArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let file: PredictionFile = read_json(&args.predictions)?;
    if file.schema != PREDICTIONS_SCHEMA {
        return Err(CliError::Config(format!("unsupported predictions schema {:?}", file.schema)));
    }
    let csv_file = File::open(&args.trials).map_err(|e| CliError::Config(format!("{}: {e}", args.trials.display())))?;
    let table = read_trials_csv(BufReader::new(csv_file)).map_err(|e| CliError::Config(format!("{}: {e}", args.trials.display())))?;
    let reports = compare_reports(&file, table, ReportPolicy { threshold: args.threshold, se_floor: args.se_floor })?;
    for r in &reports {
        writeln!(
            stdout,
            "{:<20} predicted={:<14.8} estimated={:<14.8} se={:<12.3e} z={:+.2} {}",
            r.statistic,
            r.predicted,
            r.estimated,
            r.std_error,
            r.z_score,
            if r.verdict == Verdict::Pass { "PASS" } else { "FAIL" }
        )?;
    }
    if let Some(p) = &args.report {
        let w = BufWriter::new(File::create(p)?);
        if p.extension().is_some_and(|e| e == "json") {
            serde_json::to_writer_pretty(w, &reports).map_err(|e| CliError::Io(e.into()))?;
        } else {
            stats::write_reports_csv(w, &reports)?;
        }
    }
    Ok(if reports.iter().all(|r| r.verdict == Verdict::Pass) { Outcome::Pass } else { Outcome::Fail })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BesselGrid {
    /// Contour, hook-Schur and multi-hook formulas against the determinant.
    Default,
    /// One eigenvalue: the ratio is `e^{aλ}`.
    Smoke,
    /// Error of the large-N approximant for growing N.
    Asymptotic,
}

#[derive(Debug, Clone, Args)]
pub struct BesselCheckArgs {
    #[arg(long, value_enum, default_value = "default")]
    pub grid: BesselGrid,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Random spectra per (N, a, b) case.
    #[arg(long, default_value_t = 3)]
    pub spectra: usize,
}

/// Maximum relative errors of the exact identities over a grid.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IdentityErrors {
    pub cases: usize,
    pub contour_vs_direct: f64,
    pub schur_vs_direct: f64,
    pub multi_vs_direct: f64,
}

/// Distinct log-spectrum in `[−1, 1]` with gaps of at least `0.05`.
pub fn random_spectrum(n: usize, rng: &mut ChaCha20Rng) -> LogSpectrum {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        if v.windows(2).all(|w| w[0] - w[1] > 0.05) {
            return LogSpectrum::new(v).expect("finite descending spectrum");
        }
    }
}

fn rel_err(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// `s_{(a−N | N−b−1)}(e^λ)·Δ(ρ)/Δ(μ)`, the hook ratio for integer `a ≥ N`.
pub fn hook_schur_ratio(ls: &LogSpectrum, a: usize, b: usize) -> f64 {
    let n = ls.n();
    let x: Vec<f64> = ls.values().iter().map(|l| l.exp()).collect();
    let s = hook_schur(a - n, n - b - 1, &x);
    let mut mu: Vec<f64> = (0..n).rev().filter(|&j| j != b).map(|j| j as f64).collect();
    mu.insert(0, a as f64);
    let vdm = |v: &[f64]| {
        let mut p = 1.0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                p *= v[i] - v[j];
            }
        }
        p
    };
    let rho: Vec<f64> = (0..n).rev().map(|j| j as f64).collect();
    s * vdm(&rho) / vdm(&mu)
}

/// Single hooks with integer `a ∈ {N, …, N+3}` and every `b`, plus one
/// two-hook case per spectrum at `N = 4`.
pub fn bessel_identity_grid(ns: &[usize], spectra: usize, seed: u64) -> Result<IdentityErrors, CliError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut e = IdentityErrors::default();
    for &n in ns {
        for b in 0..n {
            for a in n..n + 4 {
                for _ in 0..spectra {
                    let ls = random_spectrum(n, &mut rng);
                    let hook = HookIndex::new(Complex64::from(a as f64), b);
                    let direct = bessel_ratio_direct(&ls, &[hook])?;
                    let contour = bessel_ratio_contour(&ls, hook)?;
                    let schur = Complex64::from(hook_schur_ratio(&ls, a, b));
                    e.contour_vs_direct = e.contour_vs_direct.max(rel_err(contour, direct));
                    e.schur_vs_direct = e.schur_vs_direct.max(rel_err(schur, direct));
                    e.cases += 1;
                }
            }
        }
    }
    for _ in 0..spectra {
        let ls = random_spectrum(4, &mut rng);
        let a1 = rng.gen_range(4..8);
        let a2 = rng.gen_range(a1 + 1..10);
        let (b1, b2) = (rng.gen_range(0..2), rng.gen_range(2..4));
        let hooks = [HookIndex::new(Complex64::from(a2 as f64), b2), HookIndex::new(Complex64::from(a1 as f64), b1)];
        let direct = bessel_ratio_direct(&ls, &hooks)?;
        e.multi_vs_direct = e.multi_vs_direct.max(rel_err(bessel_ratio_multi(&ls, &hooks)?, direct));
    }
    Ok(e)
}

/// Worst relative error of the approximant over a 3×3 grid of `(ã, b̃)`
/// for the uniform grid spectrum `λ_i = 1 − (i − 1/2)/N`.
pub fn asymptotic_error(n: usize) -> Result<f64, CliError> {
    let pts: Vec<f64> = (0..n).map(|i| 1.0 - (i as f64 + 0.5) / n as f64).collect();
    let mu = SpectralMeasure::empirical(&pts)?;
    let ls = LogSpectrum::new(pts).map_err(CliError::from)?;
    let mut worst: f64 = 0.0;
    for at in [Complex64::new(1.3, 0.0), Complex64::new(0.7, 0.1), Complex64::new(1.1, -0.2)] {
        for bt in [0.25, 0.5, 0.75] {
            let b = (bt * n as f64).round() as usize;
            let direct = bessel_ratio_direct(&ls, &[HookIndex::new(at * n as f64, b)])?;
            let asym = bessel_ratio_asymptotic(&mu, n, &[(at, b as f64 / n as f64)])?;
            worst = worst.max(rel_err(asym, direct));
        }
    }
    Ok(worst)
}

pub fn cmd_bessel_check(args: &BesselCheckArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    match args.grid {
        BesselGrid::Default => {
            let e = bessel_identity_grid(&[2, 3, 4], args.spectra, args.seed)?;
            writeln!(stdout, "cases                 {}", e.cases)?;
            writeln!(stdout, "contour vs direct     {:.3e}", e.contour_vs_direct)?;
            writeln!(stdout, "hook-schur vs direct  {:.3e}", e.schur_vs_direct)?;
            writeln!(stdout, "multi-hook vs direct  {:.3e}", e.multi_vs_direct)?;
            let worst = e.contour_vs_direct.max(e.schur_vs_direct).max(e.multi_vs_direct);
            Ok(if worst < 1e-8 { Outcome::Pass } else { Outcome::Fail })
        }
        BesselGrid::Smoke => {
            let ls = LogSpectrum::new(vec![0.3]).map_err(CliError::from)?;
            let a = Complex64::new(1.7, 0.4);
            let r = bessel_ratio_contour(&ls, HookIndex::new(a, 0))?;
            let err = rel_err(r, (a * 0.3).exp());
            writeln!(stdout, "N=1 contour vs e^(a lambda)  {err:.3e}")?;
            Ok(if err < 1e-8 { Outcome::Pass } else { Outcome::Fail })
        }
        BesselGrid::Asymptotic => {
            let mut errs = Vec::new();
            for n in [8, 16, 32] {
                let e = asymptotic_error(n)?;
                writeln!(stdout, "N={n:<3} max relative error {e:.4e}")?;
                errs.push(e);
            }
            let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
            Ok(if decreasing { Outcome::Pass } else { Outcome::Fail })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DensityKind {
    /// Log-eigenvalue density of the M-fold product.
    Product,
    /// Density of the Lyapunov exponents.
    Lyapunov,
}

#[derive(Debug, Clone, Args)]
pub struct DensityArgs {
    #[command(flatten)]
    pub measure: MeasureArgs,
    #[arg(long, value_enum, default_value = "product")]
    pub kind: DensityKind,
    #[arg(long, default_value_t = 1)]
    pub factors: usize,
    /// Grid interval; defaults to the Lyapunov support for `lyapunov`.
    #[arg(long, allow_hyphen_values = true)]
    pub lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub hi: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub grid_points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_density(args: &DensityArgs, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    let mu = args.measure.measure()?;
    if args.grid_points < 2 {
        return Err(CliError::Config("need at least two grid points".into()));
    }
    let (lo, hi) = match args.kind {
        DensityKind::Lyapunov => {
            let (a, b) = predict::lyapunov_support(&mu)?;
            (args.lo.unwrap_or(a), args.hi.unwrap_or(b))
        }
        DensityKind::Product => match (args.lo, args.hi) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(CliError::Usage("--lo and --hi are required for the product density".into())),
        },
    };
    let product = if args.factors > 1 { SpectralMeasure::FreePower { base: Box::new(mu.clone()), power: args.factors } } else { mu.clone() };
    let mut rows = Vec::with_capacity(args.grid_points);
    for j in 0..args.grid_points {
        let t = lo + (hi - lo) * j as f64 / (args.grid_points - 1) as f64;
        let p = match args.kind {
            DensityKind::Product => density_from_boundary(&product, t)?,
            DensityKind::Lyapunov => match predict::lyapunov_density(&mu, t) {
                Ok(p) => p,
                Err(PredictError::OutOfSupport { .. }) => 0.0,
                Err(e) => return Err(e.into()),
            },
        };
        rows.push((t, p));
    }
    with_output(args.out.as_deref(), stdout, |w| {
        writeln!(w, "t,density")?;
        for (t, p) in &rows {
            writeln!(w, "{t},{p}")?;
        }
        Ok(())
    })?;
    Ok(Outcome::Pass)
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Predict(a) => cmd_predict(a, stdout),
        Command::Simulate(a) => cmd_simulate(a, stdout),
        Command::Compare(a) => cmd_compare(a, stdout),
        Command::BesselCheck(a) => cmd_bessel_check(a, stdout),
        Command::Density(a) => cmd_density(a, stdout),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(Outcome::Pass.exit_code(), 0);
        assert_eq!(Outcome::Fail.exit_code(), 1);
    }
}
