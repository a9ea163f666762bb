//! Monte Carlo engines: factor sampling, log singular values of long
//! products, R-diagonal experiments and additive sums of conjugated matrices.

use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bigfloat::{BigComplex, BigError, BigMatrix};
use crate::measures::{atoms_of, SpectralMeasure};
use crate::rng::RngStream;

pub type CMatrix = DMatrix<Complex64>;

/// Largest predicted log-spread of the direct backend.
pub const DIRECT_SPREAD_LIMIT: f64 = 600.0;
/// Largest dimension of the big-float backend.
pub const BIGFLOAT_MAX_N: usize = 32;
/// Mantissa ceiling of the big-float backend.
pub const BIGFLOAT_MAX_BITS: u64 = 1 << 16;
const GUARD_BITS: u64 = 64;
const REFACTOR_EVERY: usize = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid factor spec: {0}")]
    InvalidSpec(String),
    #[error("direct backend refuses log-spread {predicted:.1} (limit {DIRECT_SPREAD_LIMIT})")]
    OverflowRisk { predicted: f64 },
    #[error("big-float budget exceeded: {bits} bits at N={n}")]
    PrecisionBudgetExceeded { bits: u64, n: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Numeric(#[from] BigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum FactorKind {
    /// Log-eigenvalues of `Y†Y`.
    FixedSpectrum { lambda: Vec<f64> },
    Jacobi { alpha: usize, r: usize },
    Ginibre { l: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorSpec {
    pub kind: FactorKind,
    pub n: usize,
}

impl FactorSpec {
    pub fn fixed(lambda: Vec<f64>) -> Result<Self, SimError> {
        let spec = FactorSpec { n: lambda.len(), kind: FactorKind::FixedSpectrum { lambda } };
        spec.validate()?;
        Ok(spec)
    }

    pub fn jacobi(n: usize, alpha: usize, r: usize) -> Result<Self, SimError> {
        let spec = FactorSpec { n, kind: FactorKind::Jacobi { alpha, r } };
        spec.validate()?;
        Ok(spec)
    }

    pub fn ginibre(n: usize, l: usize) -> Result<Self, SimError> {
        let spec = FactorSpec { n, kind: FactorKind::Ginibre { l } };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::InvalidSpec("N must be positive".into()));
        }
        match &self.kind {
            FactorKind::FixedSpectrum { lambda } => {
                if lambda.len() != self.n || lambda.iter().any(|l| !l.is_finite()) {
                    return Err(SimError::InvalidSpec("need N finite log-eigenvalues".into()));
                }
            }
            FactorKind::Jacobi { alpha, r } => {
                if *alpha < 1 || *r < self.n {
                    return Err(SimError::InvalidSpec(format!("Jacobi needs alpha >= 1 and R >= N, got {alpha}, {r}")));
                }
            }
            FactorKind::Ginibre { l } => {
                if *l < self.n {
                    return Err(SimError::InvalidSpec(format!("Ginibre needs L >= N, got L={l}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Direct,
    Bigfloat,
    Qr,
}

impl Backend {
    fn code(self) -> u8 {
        match self {
            Backend::Direct => 0,
            Backend::Bigfloat => 1,
            Backend::Qr => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Backend::Direct, Backend::Bigfloat, Backend::Qr].into_iter().find(|b| b.code() == c)
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Direct => "direct",
            Backend::Bigfloat => "bigfloat",
            Backend::Qr => "qr",
        })
    }
}

impl FromStr for Backend {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "direct" => Ok(Backend::Direct),
            "bigfloat" => Ok(Backend::Bigfloat),
            "qr" => Ok(Backend::Qr),
            other => Err(SimError::InvalidSpec(format!("unknown backend {other:?}"))),
        }
    }
}

/// Log singular data of one product `Y¹⋯Yᴹ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductResult {
    /// `log μ_i`, descending, where `μ_i` are the eigenvalues of `X = P†P`.
    pub log_sv: Vec<f64>,
    /// `2·log R_kk` of the product's QR factor, in index order.
    pub qr_diag_logs: Option<Vec<f64>>,
    /// `(α, log_sv)` after `⌊αM⌋` factors.
    pub checkpoints: Vec<(f64, Vec<f64>)>,
    pub backend: Backend,
    pub precision_bits: u32,
    pub factors: usize,
}

impl ProductResult {
    pub fn n(&self) -> usize {
        self.log_sv.len()
    }

    pub fn checkpoint(&self, alpha: f64) -> Option<&[f64]> {
        self.checkpoints.iter().find(|(a, _)| (a - alpha).abs() < 1e-12).map(|(_, v)| v.as_slice())
    }
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * sd, im * sd)
}

/// Matrix of i.i.d. complex Gaussians with `E|z|² = var`, filled row by row.
fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMatrix {
    let sd = (0.5 * var).sqrt();
    let data: Vec<Complex64> = (0..rows * cols).map(|_| complex_normal(rng, sd)).collect();
    CMatrix::from_row_slice(rows, cols, &data)
}

/// Haar unitary: QR of a Ginibre matrix with the phases of `R_kk` moved into `Q`.
pub fn sample_haar_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMatrix {
    let qr = gaussian_matrix(n, n, 1.0, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { Complex64::from(1.0) };
        for i in 0..n {
            q[(i, j)] *= phase;
        }
    }
    q
}

/// `L×N` matrix with entries of variance `1/N`.
pub fn sample_ginibre<R: Rng + ?Sized>(l: usize, n: usize, rng: &mut R) -> CMatrix {
    gaussian_matrix(l, n, 1.0 / n as f64, rng)
}

fn hermitian_eigenvalues(h: CMatrix) -> Vec<f64> {
    let h = (&h + h.adjoint()) * Complex64::from(0.5);
    let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Eigenvalues of the double-Wishart matrix `S^{-1/2} A A† S^{-1/2}`, `S = AA† + BB†`.
fn manova_eigenvalues<R: Rng + ?Sized>(n: usize, alpha: usize, r: usize, rng: &mut R) -> Vec<f64> {
    let a = gaussian_matrix(n, alpha + n - 1, 1.0, rng);
    let b = gaussian_matrix(n, r, 1.0, rng);
    let w1 = &a * a.adjoint();
    let s = &w1 + &b * b.adjoint();
    let l = s.cholesky().expect("Wishart sum is positive definite almost surely").l();
    let half = l.solve_lower_triangular(&w1).expect("triangular solve");
    let c = l.solve_lower_triangular(&half.adjoint()).expect("triangular solve");
    hermitian_eigenvalues(c)
}

/// One sampled factor `Y = diag(√eig)·U` together with the spectrum of `Y†Y`.
#[derive(Debug, Clone)]
pub struct FactorSample {
    pub eigenvalues: Vec<f64>,
    pub y: CMatrix,
}

impl FactorSample {
    /// `log(max eig / min eig)`.
    pub fn log_spread(&self) -> f64 {
        let (lo, hi) = self.eigenvalues.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        (hi / lo).ln()
    }

    pub fn log_det(&self) -> f64 {
        self.eigenvalues.iter().map(|x| x.ln()).sum()
    }
}

pub fn sample_factor_with_spectrum<R: Rng + ?Sized>(spec: &FactorSpec, rng: &mut R) -> FactorSample {
    let n = spec.n;
    let eigenvalues = match &spec.kind {
        FactorKind::FixedSpectrum { lambda } => lambda.iter().map(|l| l.exp()).collect(),
        FactorKind::Jacobi { alpha, r } => manova_eigenvalues(n, *alpha, *r, rng),
        FactorKind::Ginibre { l } => {
            let g = sample_ginibre(*l, n, rng);
            hermitian_eigenvalues(g.adjoint() * g)
        }
    };
    let u = sample_haar_unitary(n, rng);
    let mut y = u;
    for (i, ev) in eigenvalues.iter().enumerate() {
        let s = ev.sqrt();
        for j in 0..n {
            y[(i, j)] *= s;
        }
    }
    FactorSample { eigenvalues, y }
}

/// Right-unitarily invariant factor with the spectrum law of `spec`.
pub fn sample_factor<R: Rng + ?Sized>(spec: &FactorSpec, rng: &mut R) -> CMatrix {
    sample_factor_with_spectrum(spec, rng).y
}

/// The `M` factors of one trial; factor `i` reads block `i` of the stream.
pub fn sample_factors(spec: &FactorSpec, m: usize, stream: &RngStream) -> Vec<FactorSample> {
    (0..m).map(|i| sample_factor_with_spectrum(spec, &mut stream.substream(i as u32))).collect()
}

fn checkpoint_steps(m: usize, alphas: &[f64]) -> Result<Vec<(f64, usize)>, SimError> {
    alphas
        .iter()
        .map(|&a| {
            if !(a > 0.0 && a <= 1.0) {
                return Err(SimError::InvalidSpec(format!("checkpoint alpha {a} outside (0, 1]")));
            }
            Ok((a, ((a * m as f64).floor() as usize).max(1)))
        })
        .collect()
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn log_sq_svd(t: &CMatrix, log_scale: f64) -> Vec<f64> {
    let sv = t.clone().svd(false, false).singular_values;
    sorted_desc(sv.iter().map(|s| 2.0 * s.ln() + log_scale).collect())
}

fn direct_product(factors: &[FactorSample], steps: &[(f64, usize)]) -> Result<ProductResult, SimError> {
    let predicted: f64 = factors.iter().map(FactorSample::log_spread).sum();
    if !(predicted < DIRECT_SPREAD_LIMIT) {
        return Err(SimError::OverflowRisk { predicted });
    }
    let n = factors[0].y.nrows();
    let mut t = CMatrix::identity(n, n);
    let mut log_scale = 0.0;
    let mut checkpoints = Vec::new();
    for (i, f) in factors.iter().enumerate() {
        t = &t * &f.y;
        if (i + 1) % REFACTOR_EVERY == 0 {
            t = t.qr().r();
        }
        let c = t.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        t.unscale_mut(c);
        log_scale += 2.0 * c.ln();
        for &(a, k) in steps {
            if k == i + 1 {
                checkpoints.push((a, log_sq_svd(&t, log_scale)));
            }
        }
    }
    Ok(ProductResult {
        log_sv: log_sq_svd(&t, log_scale),
        qr_diag_logs: None,
        checkpoints,
        backend: Backend::Direct,
        precision_bits: 53,
        factors: factors.len(),
    })
}

/// Mantissa for a product whose factors have the given log-spreads.
pub fn bigfloat_bits(spreads: impl IntoIterator<Item = f64>) -> f64 {
    let total: f64 = spreads.into_iter().sum();
    (total / std::f64::consts::LN_2).ceil() + GUARD_BITS as f64
}

fn bigfloat_product(factors: &[FactorSample], steps: &[(f64, usize)]) -> Result<ProductResult, SimError> {
    let n = factors[0].y.nrows();
    let bits = bigfloat_bits(factors.iter().map(FactorSample::log_spread));
    if n > BIGFLOAT_MAX_N || !(bits <= BIGFLOAT_MAX_BITS as f64) {
        return Err(SimError::PrecisionBudgetExceeded { bits: if bits.is_finite() { bits as u64 } else { u64::MAX }, n });
    }
    let prec = bits as u32;
    let first = &factors[0].y;
    let mut p = BigMatrix::from_fn(n, n, prec, |i, j| BigComplex::from_c64(prec, first[(i, j)]));
    let mut checkpoints = Vec::new();
    for (i, f) in factors.iter().enumerate() {
        if i > 0 {
            let row_major: Vec<Complex64> = (0..n * n).map(|k| f.y[(k / n, k % n)]).collect();
            p.mul_right_c64(&row_major);
        }
        for &(a, k) in steps {
            if k == i + 1 {
                checkpoints.push((a, p.log_sq_singular_values()?));
            }
        }
    }
    let log_sv = match steps.iter().position(|&(_, k)| k == factors.len()) {
        Some(pos) => checkpoints[pos].1.clone(),
        None => p.log_sq_singular_values()?,
    };
    Ok(ProductResult { log_sv, qr_diag_logs: None, checkpoints, backend: Backend::Bigfloat, precision_bits: prec, factors: factors.len() })
}

/// `2·log|R_kk|` of `Y¹⋯Yᴹ`, composing QR factors from the right.
pub fn qr_diag_of_product(factors: &[CMatrix]) -> Vec<f64> {
    let n = factors[0].nrows();
    let mut q = CMatrix::identity(n, n);
    let mut acc = vec![0.0; n];
    for y in factors.iter().rev() {
        let qr = (y * &q).qr();
        let r = qr.r();
        for (k, a) in acc.iter_mut().enumerate() {
            *a += 2.0 * r[(k, k)].norm().ln();
        }
        q = qr.q();
    }
    acc
}

fn qr_product(factors: &[FactorSample], steps: &[(f64, usize)]) -> Result<ProductResult, SimError> {
    if !steps.is_empty() {
        return Err(SimError::Unsupported("the qr backend composes from the right and has no prefix checkpoints".into()));
    }
    let ys: Vec<CMatrix> = factors.iter().map(|f| f.y.clone()).collect();
    let diag = qr_diag_of_product(&ys);
    Ok(ProductResult {
        log_sv: sorted_desc(diag.clone()),
        qr_diag_logs: Some(diag),
        checkpoints: Vec::new(),
        backend: Backend::Qr,
        precision_bits: 53,
        factors: factors.len(),
    })
}

/// Log singular values of `Y¹⋯Yᴹ` for one trial stream.
pub fn product_log_singvals(
    spec: &FactorSpec,
    m: usize,
    backend: Backend,
    checkpoints: &[f64],
    stream: &RngStream,
) -> Result<ProductResult, SimError> {
    spec.validate()?;
    if m == 0 {
        return Err(SimError::InvalidSpec("need at least one factor".into()));
    }
    let steps = checkpoint_steps(m, checkpoints)?;
    let factors = sample_factors(spec, m, stream);
    match backend {
        Backend::Direct => direct_product(&factors, &steps),
        Backend::Bigfloat => bigfloat_product(&factors, &steps),
        Backend::Qr => qr_product(&factors, &steps),
    }
}

/// Everything needed to reproduce a batch of trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialJob {
    pub spec: FactorSpec,
    pub m: usize,
    pub backend: Backend,
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    pub seed: u64,
}

impl TrialJob {
    /// Trial `t` uses stream `t`; results come back in trial order.
    pub fn run(&self, trials: Range<u64>) -> Result<Vec<ProductResult>, SimError> {
        let ids: Vec<u64> = trials.collect();
        ids.par_iter()
            .map(|&t| product_log_singvals(&self.spec, self.m, self.backend, &self.checkpoints, &RngStream::new(self.seed, t)))
            .collect()
    }

    pub fn run_with_threads(&self, trials: Range<u64>, threads: usize) -> Result<Vec<ProductResult>, SimError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| SimError::Unsupported(format!("thread pool: {e}")))?;
        pool.install(|| self.run(trials))
    }
}

/// `2·log R_kk` of the Cholesky factor of `X = Y†Y` for one sample, via the
/// QR factor of `Y` (whose diagonal is made positive).
pub fn cholesky_diag_logs<R: Rng + ?Sized>(spec: &FactorSpec, rng: &mut R) -> Vec<f64> {
    let y = sample_factor(spec, rng);
    qr_diag_of_product(&[y])
}

/// `M^{-1/2}(Σ_i U_i diag(mu) U_i† − M·mean(mu)·I)` for independent Haar `U_i`.
pub fn additive_sum_sample<R: Rng + ?Sized>(mu: &[f64], m: usize, rng: &mut R) -> CMatrix {
    let n = mu.len();
    let mean = mu.iter().sum::<f64>() / n as f64;
    let mut x = CMatrix::zeros(n, n);
    for _ in 0..m {
        let u = sample_haar_unitary(n, rng);
        for (k, &a) in mu.iter().enumerate() {
            let col = u.column(k);
            for j in 0..n {
                let cj = col[j].conj() * a;
                for i in 0..n {
                    x[(i, j)] += col[i] * cj;
                }
            }
        }
    }
    for i in 0..n {
        x[(i, i)] -= Complex64::from(m as f64 * mean);
    }
    x.unscale_mut((m as f64).sqrt());
    x
}

/// Per-trial averages of the three covariance cases of the additive sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdditiveCaseSample {
    /// Mean over `i` of `Y_ii²`.
    pub diag: f64,
    /// Mean over `i ≠ j` of `Y_ii·Y_jj`.
    pub diag_pair: f64,
    /// Mean over `i ≠ j` of `Y_ij·Y_ji`.
    pub off_pair: f64,
}

impl AdditiveCaseSample {
    pub fn from_matrix(y: &CMatrix) -> Self {
        let n = y.nrows();
        let pairs = (n * (n - 1)) as f64;
        let mut s = AdditiveCaseSample { diag: 0.0, diag_pair: 0.0, off_pair: 0.0 };
        for i in 0..n {
            s.diag += y[(i, i)].re * y[(i, i)].re;
            for j in 0..n {
                if i != j {
                    s.diag_pair += y[(i, i)].re * y[(j, j)].re;
                    s.off_pair += (y[(i, j)] * y[(j, i)]).re;
                }
            }
        }
        s.diag /= n as f64;
        s.diag_pair /= pairs;
        s.off_pair /= pairs;
        s
    }
}

/// Exact covariances of the additive experiment: `Δ/(N+1)`,
/// `−Δ/((N−1)(N+1))` and `NΔ/((N−1)(N+1))`, with `Δ` the variance of `mu`.
pub fn additive_covariance_targets(mu: &[f64]) -> AdditiveCaseSample {
    let n = mu.len() as f64;
    let m1 = mu.iter().sum::<f64>() / n;
    let m2 = mu.iter().map(|x| x * x).sum::<f64>() / n;
    let delta = m2 - m1 * m1;
    AdditiveCaseSample {
        diag: delta / (n + 1.0),
        diag_pair: -delta / ((n - 1.0) * (n + 1.0)),
        off_pair: n * delta / ((n - 1.0) * (n + 1.0)),
    }
}

/// Midpoint quantiles `F⁻¹((N−i+1/2)/N)`, `i = 1..N`, of an atomic measure, descending.
pub fn quantile_spectrum(mu: &SpectralMeasure, n: usize) -> Result<Vec<f64>, SimError> {
    let atoms = match mu {
        SpectralMeasure::PointMass { x0 } => return Ok(vec![*x0; n]),
        other => atoms_of(other).ok_or_else(|| SimError::Unsupported("quantiles need an atomic measure".into()))?,
    };
    let mut sorted: Vec<(f64, f64)> = atoms.iter().map(|a| (a.0, a.1)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = sorted.iter().map(|a| a.1).sum();
    let quantile = |p: f64| {
        let mut acc = 0.0;
        for &(x, w) in &sorted {
            acc += w / total;
            if acc >= p - 1e-12 {
                return x;
            }
        }
        sorted.last().unwrap().0
    };
    Ok((1..=n).map(|i| quantile((n as f64 - i as f64 + 0.5) / n as f64)).collect())
}

/// Trials read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTable {
    pub seed: u64,
    pub backend: Backend,
    pub m: usize,
    pub n: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TrialTable {
    pub fn into_results(self) -> Vec<ProductResult> {
        let (backend, m) = (self.backend, self.m);
        self.rows
            .into_iter()
            .map(|log_sv| ProductResult { log_sv, qr_diag_logs: None, checkpoints: Vec::new(), backend, precision_bits: 0, factors: m })
            .collect()
    }
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Csv(e.to_string())
}

/// One row per trial: `seed, backend, M, N, log_sv_1, …, log_sv_N`.
pub fn write_trials_csv<W: Write>(out: W, seed: u64, results: &[ProductResult]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let n = results.first().map_or(0, ProductResult::n);
    let mut header = vec!["seed".to_string(), "backend".into(), "M".into(), "N".into()];
    header.extend((1..=n).map(|i| format!("log_sv_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in results {
        if r.n() != n {
            return Err(SimError::Csv("trials with different N".into()));
        }
        let mut rec = vec![seed.to_string(), r.backend.to_string(), r.factors.to_string(), n.to_string()];
        rec.extend(r.log_sv.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv<R: Read>(input: R) -> Result<TrialTable, SimError> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.len() < 5 || &headers[0] != "seed" || &headers[1] != "backend" || &headers[2] != "M" || &headers[3] != "N" {
        return Err(SimError::Csv("header must start with seed,backend,M,N followed by log_sv columns".into()));
    }
    let n = headers.len() - 4;
    let mut table: Option<TrialTable> = None;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row_no = line + 2;
        let field = |i: usize| rec.get(i).ok_or_else(|| SimError::Csv(format!("row {row_no}: missing column {}", i + 1)));
        let bad = |what: &str| SimError::Csv(format!("row {row_no}: cannot parse {what}"));
        let seed: u64 = field(0)?.parse().map_err(|_| bad("seed"))?;
        let backend: Backend = field(1)?.parse().map_err(|_| bad("backend"))?;
        let m: usize = field(2)?.parse().map_err(|_| bad("M"))?;
        let rn: usize = field(3)?.parse().map_err(|_| bad("N"))?;
        if rn != n {
            return Err(SimError::Csv(format!("row {row_no}: N={rn} but header has {n} log_sv columns")));
        }
        let vals = (0..n)
            .map(|i| field(4 + i)?.parse::<f64>().map_err(|_| bad(&format!("log_sv_{}", i + 1))))
            .collect::<Result<Vec<f64>, _>>()?;
        match &mut table {
            None => table = Some(TrialTable { seed, backend, m, n, rows: vec![vals] }),
            Some(t) => {
                if t.seed != seed || t.backend != backend || t.m != m {
                    return Err(SimError::Csv(format!("row {row_no}: seed/backend/M differ from the first row")));
                }
                t.rows.push(vals);
            }
        }
    }
    table.ok_or_else(|| SimError::Csv("no trial rows".into()))
}

const MAGIC: &[u8; 5] = b"RMTP1";
const CHECKPOINT_VERSION: u16 = 1;

/// Resumable state of a long run: little-endian, magic `RMTP1`, then a
/// versioned header and `rows × N` doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialCheckpoint {
    pub seed: u64,
    pub backend: Backend,
    pub m: u32,
    pub n: u32,
    pub trials_total: u64,
    pub rows: Vec<Vec<f64>>,
}

impl TrialCheckpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        w.write_all(MAGIC)?;
        w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u8(self.backend.code())?;
        w.write_u32::<LittleEndian>(self.m)?;
        w.write_u32::<LittleEndian>(self.n)?;
        w.write_u64::<LittleEndian>(self.trials_total)?;
        w.write_u64::<LittleEndian>(self.rows.len() as u64)?;
        for row in &self.rows {
            if row.len() != self.n as usize {
                return Err(SimError::Checkpoint("row length differs from N".into()));
            }
            for &x in row {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SimError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SimError::Checkpoint("bad magic".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(SimError::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>()?;
        let backend = Backend::from_code(r.read_u8()?).ok_or_else(|| SimError::Checkpoint("bad backend code".into()))?;
        let m = r.read_u32::<LittleEndian>()?;
        let n = r.read_u32::<LittleEndian>()?;
        let trials_total = r.read_u64::<LittleEndian>()?;
        let done = r.read_u64::<LittleEndian>()?;
        if done > trials_total {
            return Err(SimError::Checkpoint("more rows than trials".into()));
        }
        let mut rows = Vec::with_capacity(done as usize);
        for _ in 0..done {
            let mut row = vec![0.0; n as usize];
            r.read_f64_into::<LittleEndian>(&mut row)?;
            rows.push(row);
        }
        Ok(TrialCheckpoint { seed, backend, m, n, trials_total, rows })
    }
}
