//! Normalized multivariate Bessel functions `𝓑(μ, λ) / 𝓑(ρ, λ)` with
//! `ρ = (N − 1, …, 1, 0)`.
//!
//! Exact values come from ratios of determinants in MPFR arithmetic. The same
//! quantity is also available through the double contour integral, through
//! the determinant of single-hook ratios, and through the large-N
//! approximants built from the measure transforms.

use num_complex::Complex64;
use rug::Float;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::bigfloat::{BigComplex, BigMatrix};
use crate::contour::{refine, Contour, NotConverged, Refinement};
use crate::measures::{self, MeasureError, SpectralMeasure};
use crate::scalar::Real;

const FIRST_PREC: u32 = 128;
const MAX_PREC: u32 = 16384;
const DIRECT_AGREEMENT: f64 = 1e-12;
const PREFACTOR_GUARD: f64 = 1e-3;
const MAX_DIRECT_N: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BesselError {
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),
    #[error(transparent)]
    QuadratureNotConverged(#[from] NotConverged),
    #[error("a = {a} is within {PREFACTOR_GUARD} of the integer {j}, a pole of the Gamma prefactor")]
    PrefactorPole { a: Complex64, j: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("finite-difference estimates disagree by {0:e}")]
    StepSizeFailure(f64),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Log-spectrum `λ₁ ≥ … ≥ λ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSpectrum {
    lambda: Vec<f64>,
}

impl LogSpectrum {
    pub fn new(lambda: Vec<f64>) -> Result<Self, BesselError> {
        if lambda.is_empty() || lambda.iter().any(|l| !l.is_finite()) {
            return Err(BesselError::DomainError("need a non-empty finite spectrum".into()));
        }
        if lambda.windows(2).any(|p| p[0] < p[1]) {
            return Err(BesselError::DomainError("spectrum must be descending".into()));
        }
        Ok(LogSpectrum { lambda })
    }

    /// Sorts descending and separates ties by `1e-9·i`; the flag reports
    /// whether any entry was moved.
    pub fn jittered(mut lambda: Vec<f64>) -> Result<(Self, bool), BesselError> {
        lambda.sort_by(|a, b| b.total_cmp(a));
        let mut moved = false;
        for i in 1..lambda.len() {
            if lambda[i - 1] - lambda[i] < 1e-8 {
                lambda[i] = lambda[i - 1] - 1e-9 * i as f64 - 1e-8;
                moved = true;
            }
        }
        Ok((Self::new(lambda)?, moved))
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.lambda
    }
}

/// Hook parameter: the row value `a` replaces the entry `b` of `ρ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HookIndex {
    pub a: Complex64,
    pub b: usize,
}

impl HookIndex {
    pub fn new(a: impl Into<Complex64>, b: usize) -> Self {
        HookIndex { a: a.into(), b }
    }
}

/// `μ = (a₁, …, a_k, ρ with the b's removed)`.
pub fn assemble_mu(n: usize, hooks: &[HookIndex]) -> Result<Vec<Complex64>, BesselError> {
    for h in hooks {
        if h.b >= n {
            return Err(BesselError::DomainError(format!("b = {} outside 0..{n}", h.b)));
        }
    }
    let mut bs: Vec<usize> = hooks.iter().map(|h| h.b).collect();
    bs.sort_unstable();
    if bs.windows(2).any(|p| p[0] == p[1]) {
        return Err(BesselError::DomainError("hook b values must be distinct".into()));
    }
    let mut mu: Vec<Complex64> = hooks.iter().map(|h| h.a).collect();
    mu.extend((0..n).rev().filter(|j| !bs.contains(j)).map(|j| Complex64::from(j as f64)));
    Ok(mu)
}

fn big_vandermonde(prec: u32, xs: &[BigComplex]) -> BigComplex {
    let mut out = BigComplex::one(prec);
    let mut tmp = [Float::new(prec), Float::new(prec)];
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let d = BigComplex {
                re: Float::with_val(prec, &xs[i].re - &xs[j].re),
                im: Float::with_val(prec, &xs[i].im - &xs[j].im),
            };
            out.mul_assign(&d, &mut tmp);
        }
    }
    out
}

// det(e^{μ_i λ_j}) Δ(ρ) / (Δ(μ) Δ(e^λ)) at a fixed precision.
fn ratio_at(prec: u32, lambda: &[f64], mu: &[Complex64]) -> Result<Complex64, BesselError> {
    let n = lambda.len();
    let lam: Vec<Float> = lambda.iter().map(|&l| Float::with_val(prec, l)).collect();
    let mus: Vec<BigComplex> = mu.iter().map(|&m| BigComplex::from_c64(prec, m)).collect();
    let mat = BigMatrix::from_fn(n, n, prec, |i, j| {
        let re = Float::with_val(prec, &mus[i].re * &lam[j]);
        let im = Float::with_val(prec, &mus[i].im * &lam[j]);
        BigComplex::exp_of(prec, &re, &im)
    });
    let det = mat.det().map_err(|e| BesselError::IllConditioned(e.to_string()))?;
    let xs: Vec<BigComplex> = lam
        .iter()
        .map(|l| BigComplex { re: Float::with_val(prec, l.exp_ref()), im: Float::new(prec) })
        .collect();
    let rho: Vec<BigComplex> = (0..n).rev().map(|j| BigComplex::from_c64(prec, Complex64::from(j as f64))).collect();
    let mut num = det;
    let mut tmp = [Float::new(prec), Float::new(prec)];
    num.mul_assign(&big_vandermonde(prec, &rho), &mut tmp);
    let mut den = big_vandermonde(prec, &mus);
    den.mul_assign(&big_vandermonde(prec, &xs), &mut tmp);
    if den.norm_sqr().is_zero() {
        return Err(BesselError::DomainError("μ or λ has repeated entries".into()));
    }
    num.mul_assign(&den.recip(), &mut tmp);
    Ok(num.to_c64())
}

/// `𝓑(μ, λ)/𝓑(ρ, λ)` for an arbitrary complex `μ`, with the working
/// precision doubled until two successive values agree.
pub fn bessel_ratio_general(lambda: &[f64], mu: &[Complex64]) -> Result<Complex64, BesselError> {
    let n = lambda.len();
    if mu.len() != n {
        return Err(BesselError::DomainError("μ and λ lengths differ".into()));
    }
    if n > MAX_DIRECT_N {
        return Err(BesselError::IllConditioned(format!("N = {n} exceeds {MAX_DIRECT_N}")));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (lambda[i] - lambda[j]).abs() < 1e-8 {
                return Err(BesselError::DomainError("λ entries closer than 1e-8".into()));
            }
            if (mu[i] - mu[j]).norm() == 0.0 {
                return Err(BesselError::DomainError("μ entries must be distinct".into()));
            }
        }
    }
    let mut prec = FIRST_PREC;
    let mut prev = ratio_at(prec, lambda, mu)?;
    while prec < MAX_PREC {
        prec *= 2;
        let cur = ratio_at(prec, lambda, mu)?;
        if (cur - prev).norm() <= DIRECT_AGREEMENT * cur.norm() {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(BesselError::IllConditioned(format!("no agreement up to {MAX_PREC} bits")))
}

/// Direct determinant evaluation of the hook ratio.
pub fn bessel_ratio_direct(ls: &LogSpectrum, hooks: &[HookIndex]) -> Result<Complex64, BesselError> {
    let n = ls.n();
    let mu = assemble_mu(n, hooks)?;
    let rho: Vec<Complex64> = (0..n).rev().map(|j| Complex64::from(j as f64)).collect();
    let mut sorted_mu = mu.clone();
    let key = |z: &Complex64| (z.re, z.im);
    sorted_mu.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap());
    if sorted_mu == rho {
        return Ok(Complex64::from(1.0));
    }
    bessel_ratio_general(ls.values(), &mu)
}

/// Complete and elementary symmetric polynomials `h_0..=h_k`, `e_0..=e_k`
/// by the product recurrences (every term is non-negative for positive x).
pub fn complete_and_elementary<T: Real>(x: &[T], k: usize) -> (Vec<T>, Vec<T>) {
    let mut h = vec![T::zero(); k + 1];
    let mut e = vec![T::zero(); k + 1];
    h[0] = T::one();
    e[0] = T::one();
    for &xi in x {
        for d in 1..=k {
            h[d] = h[d] + xi * h[d - 1];
        }
        for d in (1..=k).rev() {
            e[d] = e[d] + xi * e[d - 1];
        }
    }
    (h, e)
}

/// Hook Schur polynomial `s_{(α|β)}(x) = Σ_{i≤β} (−1)^i h_{α+1+i} e_{β−i}`.
pub fn hook_schur<T: Real>(alpha: usize, beta: usize, x: &[T]) -> T {
    let (h, e) = complete_and_elementary(x, alpha + beta + 1);
    let mut acc = T::zero();
    for i in 0..=beta {
        let term = h[alpha + 1 + i] * e[beta - i];
        acc = if i % 2 == 0 { acc + term } else { acc - term };
    }
    acc
}

fn small_det<T: Real>(mut a: Vec<Vec<T>>) -> T {
    let n = a.len();
    let mut det = T::one();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap()).unwrap();
        if a[p][c] == T::zero() {
            return T::zero();
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det = det * a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for j in c..n {
                let v = a[c][j];
                a[r][j] = a[r][j] - f * v;
            }
        }
    }
    det
}

/// Schur polynomial from its Frobenius coordinates as a determinant of hooks.
pub fn schur_from_hooks<T: Real>(frobenius: &[(usize, usize)], x: &[T]) -> Result<T, BesselError> {
    if frobenius.windows(2).any(|p| p[0].0 <= p[1].0 || p[0].1 <= p[1].1) {
        return Err(BesselError::DomainError("Frobenius coordinates must be strictly decreasing".into()));
    }
    let m: Vec<Vec<T>> = frobenius
        .iter()
        .map(|&(ai, _)| frobenius.iter().map(|&(_, bj)| hook_schur(ai, bj, x)).collect())
        .collect();
    Ok(small_det(m))
}

/// Contours for the double integral: the z-contour around the `e^λ`, the
/// w-contour a large circle about the origin containing it.
pub fn bessel_contours(ls: &LogSpectrum) -> (Contour<f64>, Contour<f64>) {
    let xs: Vec<f64> = ls.values().iter().map(|l| l.exp()).collect();
    let (lo, hi) = xs.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = hi - lo;
    let center = 0.5 * (lo + hi);
    let margin = 0.1 * spread + 0.25 * lo;
    let r = 0.6 * spread + margin;
    let z = if center - r >= 0.25 * lo {
        Contour::Circle { center: Complex64::from(center), radius: r }
    } else {
        // Too wide for a circle that stays in Re z > 0.
        Contour::Ellipse { center: Complex64::from(center), a: 0.5 * spread + 0.5 * lo, b: r }
    };
    let extent = match z {
        Contour::Ellipse { a, b, .. } => center + a.max(b),
        _ => center + r,
    };
    (z, Contour::Circle { center: Complex64::from(0.0), radius: 2.0 * (hi + extent) })
}

/// The double integral `∮_z ∮_w z^a w^{−b−1}/(z − w) ∏(w − x_i)/(z − x_i)`
/// (both measures `dz/2πi`), without the Gamma prefactor.
pub fn hook_double_integral(ls: &LogSpectrum, hook: HookIndex) -> Result<(Complex64, f64), BesselError> {
    let xs: Vec<f64> = ls.values().iter().map(|l| l.exp()).collect();
    let (zc, wc) = bessel_contours(ls);
    let a = hook.a;
    let b = hook.b as i32;
    let policy = Refinement { start: 64, max: 2048, rel_tol: 1e-11 };
    let conv = refine(policy, |n| -> Result<Complex64, BesselError> {
        let zn: Vec<(Complex64, Complex64)> = zc
            .nodes(n)
            .into_iter()
            .map(|q| {
                let p: Complex64 = xs.iter().map(|&x| 1.0 / (q.z - x)).product();
                (q.z, q.w * q.z.powc(a) * p)
            })
            .collect();
        let wn: Vec<(Complex64, Complex64)> = wc
            .nodes(n)
            .into_iter()
            .map(|q| {
                let p: Complex64 = xs.iter().map(|&x| q.z - x).product();
                (q.z, q.w * p * q.z.powi(-b - 1))
            })
            .collect();
        let mut acc = Complex64::from(0.0);
        for &(z, fz) in &zn {
            let mut inner = Complex64::from(0.0);
            for &(w, fw) in &wn {
                inner += fw / (z - w);
            }
            acc += fz * inner;
        }
        Ok(acc)
    })?;
    Ok((conv.value, conv.error))
}

/// Single-hook ratio from the double contour integral.
pub fn bessel_ratio_contour(ls: &LogSpectrum, hook: HookIndex) -> Result<Complex64, BesselError> {
    let n = ls.n();
    let b = hook.b;
    if b >= n {
        return Err(BesselError::DomainError(format!("b = {b} outside 0..{n}")));
    }
    let a = hook.a;
    let mut denom = Complex64::from(1.0);
    for j in (0..n).filter(|&j| j != b) {
        let d = a - j as f64;
        if d.norm() < PREFACTOR_GUARD {
            return Err(BesselError::PrefactorPole { a, j });
        }
        denom *= d;
    }
    let ln_fact = |k: usize| ln_gamma(k as f64 + 1.0);
    let fact = (ln_fact(n - b - 1) + ln_fact(b)).exp();
    let sign = if (n - b) % 2 == 0 { 1.0 } else { -1.0 };
    let (integral, _) = hook_double_integral(ls, hook)?;
    Ok(sign * fact * integral / denom)
}

/// Determinant of single-hook ratios for `k ≤ 4` hooks.
pub fn bessel_ratio_multi(ls: &LogSpectrum, hooks: &[HookIndex]) -> Result<Complex64, BesselError> {
    let k = hooks.len();
    if k == 0 || hooks.iter().all(|h| h.a == Complex64::from(h.b as f64)) {
        return bessel_ratio_direct(ls, hooks);
    }
    if k > 4 {
        return Err(BesselError::DomainError("at most four hooks".into()));
    }
    if hooks.windows(2).any(|p| p[0].b <= p[1].b) {
        return Err(BesselError::DomainError("hook b values must be strictly decreasing".into()));
    }
    let a: Vec<Complex64> = hooks.iter().map(|h| h.a).collect();
    let b: Vec<f64> = hooks.iter().map(|h| h.b as f64).collect();
    let mut m = vec![vec![Complex64::from(0.0); k]; k];
    for i in 0..k {
        for j in 0..k {
            let single = bessel_ratio_direct(ls, &[HookIndex { a: a[i], b: hooks[j].b }])?;
            m[i][j] = (a[i] - b[i]) / (a[i] - b[j]) * single;
        }
    }
    let mut pref = Complex64::from(1.0);
    for (mi, am) in a.iter().enumerate() {
        for (li, bl) in b.iter().enumerate() {
            if mi != li {
                pref *= am - bl;
            }
        }
    }
    for i in 0..k {
        for j in i + 1..k {
            pref /= (a[i] - a[j]) * (b[i] - b[j]);
        }
    }
    let sign = if (k * (k - 1) / 2) % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * pref * complex_det(m))
}

fn complex_det(mut a: Vec<Vec<Complex64>>) -> Complex64 {
    let n = a.len();
    let mut det = Complex64::from(1.0);
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].norm().partial_cmp(&a[j][c].norm()).unwrap()).unwrap();
        if a[p][c].norm() == 0.0 {
            return Complex64::from(0.0);
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for j in c..n {
                let v = a[c][j];
                a[r][j] -= f * v;
            }
        }
    }
    det
}

/// Large-N approximant of the hook ratio for an atomic spectrum with `n`
/// equally weighted eigenvalues. Hooks are given in scaled form `(ã, b̃)`
/// with `b̃·n` an integer.
pub fn bessel_ratio_asymptotic(
    mu: &SpectralMeasure,
    n: usize,
    hooks_scaled: &[(Complex64, f64)],
) -> Result<Complex64, BesselError> {
    if !matches!(mu, SpectralMeasure::Atomic { .. }) {
        return Err(BesselError::DomainError("asymptotic ratio needs an atomic measure".into()));
    }
    let k = hooks_scaled.len();
    if k == 0 {
        return Ok(Complex64::from(1.0));
    }
    let nf = n as f64;
    for &(_, bt) in hooks_scaled {
        let bn = bt * nf;
        if (bn - bn.round()).abs() > 1e-9 || !(0.0..1.0).contains(&bt) {
            return Err(BesselError::DomainError(format!("b̃ = {bt} is not in {{0, 1/N, …}}")));
        }
    }
    if k > 1 && hooks_scaled.iter().any(|&(_, bt)| bt <= 0.0) {
        return Err(BesselError::DomainError("multi-hook approximant needs b̃ > 0".into()));
    }
    let mut z_a = Vec::with_capacity(k);
    let mut z_b = Vec::with_capacity(k);
    let mut prod = Complex64::from(1.0);
    for &(at, bt) in hooks_scaled {
        let za = measures::m_inverse(mu, at, None)?;
        let mpa = measures::m_prime(mu, za)?;
        let sa = measures::s_transform(mu, at - 1.0)?;
        let pa = measures::psi_tilde(mu, at)?;
        let pb = measures::psi_tilde(mu, Complex64::from(bt))?;
        let sb = measures::s_transform(mu, Complex64::from(bt - 1.0))?;
        let expo = (nf * (pb - pa)).exp() * sb.sqrt() / sa.sqrt();
        let single = if bt == 0.0 {
            // (z_a − z_b)√M′(z_b) → √S(−1) as b̃ → 0.
            at / (sb.sqrt() * mpa.sqrt()) * expo
        } else {
            let zb = measures::m_inverse(mu, Complex64::from(bt), None)?;
            let mpb = measures::m_prime(mu, zb)?;
            z_b.push(zb);
            (at - bt) / (mpa.sqrt() * mpb.sqrt()) * expo
        };
        if k == 1 {
            let scale = if bt == 0.0 { Complex64::from(1.0) } else { 1.0 / (za - z_b[0]) };
            return Ok(single * scale);
        }
        z_a.push(za);
        prod *= single;
    }
    // Cauchy-determinant assembly for several hooks.
    let at: Vec<Complex64> = hooks_scaled.iter().map(|h| h.0).collect();
    let bt: Vec<f64> = hooks_scaled.iter().map(|h| h.1).collect();
    for (m, am) in at.iter().enumerate() {
        for (l, bl) in bt.iter().enumerate() {
            if m != l {
                prod *= am - bl;
            }
        }
    }
    for i in 0..k {
        for j in i + 1..k {
            prod /= (at[i] - at[j]) * (bt[i] - bt[j]);
            prod *= (z_a[i] - z_a[j]) * (z_b[i] - z_b[j]);
        }
    }
    for za in &z_a {
        for zb in &z_b {
            prod /= za - zb;
        }
    }
    Ok(prod)
}

/// Ensembles with a closed-form multivariate Bessel generating function.
#[derive(Debug, Clone, PartialEq)]
pub enum MbgfEnsemble {
    /// Jacobi ensemble with integer parameters `α > 0`, `R ≥ N`.
    Jacobi { n: usize, alpha: u32, r: u32 },
    /// Complex Wishart `G†G/N` with `G` of size `L × N`.
    Wishart { n: usize, l: u32 },
    /// Deterministic spectrum.
    Fixed(LogSpectrum),
}

impl MbgfEnsemble {
    fn n(&self) -> usize {
        match self {
            MbgfEnsemble::Jacobi { n, .. } | MbgfEnsemble::Wishart { n, .. } => *n,
            MbgfEnsemble::Fixed(ls) => ls.n(),
        }
    }

    fn validate(&self) -> Result<(), BesselError> {
        match *self {
            MbgfEnsemble::Jacobi { n, alpha, r } if alpha == 0 || (r as usize) < n || n == 0 => {
                Err(BesselError::DomainError("Jacobi needs alpha > 0 and R ≥ N".into()))
            }
            MbgfEnsemble::Wishart { n, l } if (l as usize) < n || n == 0 => {
                Err(BesselError::DomainError("Wishart needs L ≥ N".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `log φ(s)`.
pub fn log_mbgf(ens: &MbgfEnsemble, s: &[f64]) -> Result<f64, BesselError> {
    ens.validate()?;
    let n = ens.n();
    if s.len() != n {
        return Err(BesselError::DomainError("s has the wrong length".into()));
    }
    match *ens {
        MbgfEnsemble::Jacobi { alpha, r, .. } => {
            let (al, rr) = (alpha as f64, r as f64);
            let mut acc = 0.0;
            for (i0, &si) in s.iter().enumerate() {
                let i = (i0 + 1) as f64;
                if si + al <= 0.0 {
                    return Err(BesselError::DomainError("s_i + α must be positive".into()));
                }
                acc += ln_gamma(i + al - 1.0 + rr) - ln_gamma(i + al - 1.0) + ln_gamma(si + al) - ln_gamma(si + al + rr);
            }
            Ok(acc)
        }
        MbgfEnsemble::Wishart { l, .. } => {
            let (lf, nf) = (l as f64, n as f64);
            let mut acc = 0.0;
            for (i0, &si) in s.iter().enumerate() {
                let i = (i0 + 1) as f64;
                let rho_i = nf - i;
                if lf - nf + si + 1.0 <= 0.0 {
                    return Err(BesselError::DomainError("Gamma argument must be positive".into()));
                }
                acc += ln_gamma(lf - nf + si + 1.0) - ln_gamma(lf - i + 1.0) + (rho_i - si) * nf.ln();
            }
            Ok(acc)
        }
        MbgfEnsemble::Fixed(ref ls) => {
            let mu: Vec<Complex64> = s.iter().map(|&x| Complex64::from(x)).collect();
            let r = bessel_ratio_general(ls.values(), &mu)?;
            if r.re <= 0.0 {
                return Err(BesselError::DomainError("ratio not positive; s too far from ρ".into()));
            }
            Ok(r.re.ln())
        }
    }
}

/// `φ(s)`; equals 1 at `s = ρ`.
pub fn mbgf(ens: &MbgfEnsemble, s: &[f64]) -> Result<f64, BesselError> {
    let n = ens.n();
    if s.iter().enumerate().all(|(i, &x)| x == (n - 1 - i) as f64) {
        ens.validate()?;
        return Ok(1.0);
    }
    Ok(log_mbgf(ens, s)?.exp())
}

// First and second partial derivatives of log φ at ρ by central differences
// with one Richardson step.
fn log_partials(ens: &MbgfEnsemble, h: f64) -> Result<(Vec<f64>, Vec<f64>), BesselError> {
    let n = ens.n();
    let rho: Vec<f64> = (0..n).rev().map(|j| j as f64).collect();
    let l0 = log_mbgf(ens, &rho)?;
    let mut d1 = Vec::with_capacity(n);
    let mut d2 = Vec::with_capacity(n);
    for i in 0..n {
        let at = |step: f64| -> Result<f64, BesselError> {
            let mut s = rho.clone();
            s[i] += step;
            log_mbgf(ens, &s)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(h / 2.0)?, at(-h / 2.0)?);
        let g1 = (p1 - m1) / (2.0 * h);
        let g2 = (p2 - m2) / h;
        let c1 = (p1 - 2.0 * l0 + m1) / (h * h);
        let c2 = (p2 - 2.0 * l0 + m2) / (h * h / 4.0);
        d1.push(g2 + (g2 - g1) / 3.0);
        d2.push(c2 + (c2 - c1) / 3.0);
    }
    Ok((d1, d2))
}

fn moment_from_partials(k: u32, d1: &[f64], d2: &[f64]) -> f64 {
    let n = d1.len();
    match k {
        1 => d1.iter().sum(),
        _ => (0..n)
            .map(|i| {
                let rho_i = (n - 1 - i) as f64;
                let cross: f64 = (0..n).filter(|&a| a != i).map(|a| d1[i] / (rho_i - (n - 1 - a) as f64)).sum();
                d2[i] + d1[i] * d1[i] + 2.0 * cross
            })
            .sum(),
    }
}

/// `E[p_k(log-spectrum)]` for `k ∈ {1, 2}` from derivatives of `φ` at `ρ`.
pub fn moment_via_mbgf(ens: &MbgfEnsemble, k: u32) -> Result<f64, BesselError> {
    if !(1..=2).contains(&k) {
        return Err(BesselError::DomainError("k must be 1 or 2".into()));
    }
    if ens.n() > 6 {
        return Err(BesselError::DomainError("finite differences are limited to N ≤ 6".into()));
    }
    let h = 1e-3;
    let (a1, a2) = log_partials(ens, h)?;
    let (b1, b2) = log_partials(ens, h / 2.0)?;
    let coarse = moment_from_partials(k, &a1, &a2);
    let fine = moment_from_partials(k, &b1, &b2);
    let gap = (coarse - fine).abs();
    if gap > 1e-4 * fine.abs().max(1.0) {
        return Err(BesselError::StepSizeFailure(gap));
    }
    Ok(coarse)
}
