//! Limit shapes and Gaussian fluctuation covariances for log-spectra of
//! products of right unitarily invariant matrices.
//!
//! Moments are contour integrals over stadium curves `Υ_ε` around `[0, 1]`
//! of `Ξ(u) = log(u/(u − 1))`, `Ψ(u) = −Σ log S_i(u − 1)` and the pair term
//! `Λ(u, w)`. Kernels on the real line are expressed through the inverse
//! S-transform and, at finite M, through boundary values of the product's
//! M-transform.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{integrate, refine, Contour, Converged, NotConverged, Refinement};
use crate::measures::{self, atoms_of, MeasureError, SpectralMeasure};

type C = Complex64;

pub const INNER_EPS: f64 = 0.15;
pub const OUTER_EPS: f64 = 0.30;
/// Below this separation `Λ(u, w)` is evaluated through its diagonal limit.
pub const DIAGONAL_GAP: f64 = 1e-3;
const CUT_DISTANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("{0} lies on the cut [0, 1]")]
    OnCut(C),
    #[error(transparent)]
    QuadratureNotConverged(#[from] NotConverged),
    #[error("{t} outside the support [{lo}, {hi}]")]
    OutOfSupport { t: f64, lo: f64, hi: f64 },
    #[error("need beta <= alpha, got alpha = {alpha}, beta = {beta}")]
    OrderViolation { alpha: f64, beta: f64 },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Fixed number of factors, `N → ∞`.
    FixedM,
    /// `M, N → ∞` jointly; statistics of Lyapunov exponents.
    Lyapunov,
}

/// Factor measures of a product together with the asymptotic regime.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    factors: Vec<SpectralMeasure>,
    regime: Regime,
}

impl EnsembleModel {
    /// Product of the given factors at fixed M; free powers are expanded.
    pub fn fixed_m(factors: Vec<SpectralMeasure>) -> Result<Self, PredictError> {
        let mut flat = Vec::new();
        for f in &factors {
            f.validate()?;
            flat.extend(measures::factor_list(f));
        }
        if flat.is_empty() {
            return Err(PredictError::DomainError("no factors".into()));
        }
        Ok(EnsembleModel { factors: flat, regime: Regime::FixedM })
    }

    pub fn identical(mu: SpectralMeasure, m: usize) -> Result<Self, PredictError> {
        Self::fixed_m(vec![mu; m])
    }

    /// Single-factor model for the Lyapunov regime.
    pub fn lyapunov(mu: SpectralMeasure) -> Result<Self, PredictError> {
        let mut m = Self::fixed_m(vec![mu])?;
        m.regime = Regime::Lyapunov;
        Ok(m)
    }

    pub fn factors(&self) -> &[SpectralMeasure] {
        &self.factors
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    /// All factors are point masses, so every fluctuation vanishes.
    pub fn is_degenerate(&self) -> bool {
        self.factors.iter().all(|f| f.is_degenerate())
    }

    fn groups(&self) -> Vec<(&SpectralMeasure, f64)> {
        let mut out: Vec<(&SpectralMeasure, f64)> = Vec::new();
        for f in &self.factors {
            match out.iter_mut().find(|(g, _)| *g == f) {
                Some(entry) => entry.1 += 1.0,
                None => out.push((f, 1.0)),
            }
        }
        out
    }

    fn expect(&self, regime: Regime) -> Result<(), PredictError> {
        if self.regime != regime {
            return Err(PredictError::DomainError(format!("operation needs the {regime:?} regime")));
        }
        Ok(())
    }
}

/// Contour parameters for every prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub inner_eps: f64,
    pub outer_eps: f64,
    pub refinement: Refinement,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            inner_eps: INNER_EPS,
            outer_eps: OUTER_EPS,
            refinement: Refinement { start: 256, max: 4096, rel_tol: 1e-11 },
        }
    }
}

/// A predicted real number with its quadrature error indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicted {
    pub value: f64,
    pub error: f64,
    pub contour: String,
}

impl Predicted {
    fn exact_zero() -> Self {
        Predicted { value: 0.0, error: 0.0, contour: "none (degenerate model)".into() }
    }

    fn from_converged(c: Converged<f64>, contour: String) -> Self {
        // A real quantity: the imaginary residue counts as error.
        Predicted { value: c.value.re, error: c.error.max(c.value.im.abs()), contour }
    }
}

/// Serialized prediction record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub statistic: String,
    pub k: u32,
    pub l: Option<u32>,
    pub value: f64,
    pub quadrature_error: f64,
    pub contour_spec: String,
}

impl Prediction {
    pub fn new(statistic: &str, k: u32, l: Option<u32>, p: &Predicted) -> Self {
        Prediction {
            statistic: statistic.to_string(),
            k,
            l,
            value: p.value,
            quadrature_error: p.error,
            contour_spec: p.contour.clone(),
        }
    }
}

/// Integrand value at a point of the real line, split into a smooth part and
/// the coefficient of the singular delta component there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelValue {
    pub smooth: f64,
    pub delta_coeff: f64,
    /// Set when the support collapses to a point.
    pub degenerate: bool,
}

/// `Ξ(u) = log(u/(u − 1))`, principal branch.
pub fn xi(u: C) -> Result<C, PredictError> {
    if (u - u.re.clamp(0.0, 1.0)).norm() < CUT_DISTANCE {
        return Err(PredictError::OnCut(u));
    }
    Ok((u / (u - 1.0)).ln())
}

/// `Ψ(u) = −Σ_i log S_i(u − 1)`.
pub fn psi(model: &EnsembleModel, u: C) -> Result<C, PredictError> {
    let mut acc = C::from(0.0);
    for (mu, count) in model.groups() {
        acc -= count * measures::s_transform(mu, u - 1.0)?.ln();
    }
    Ok(acc)
}

fn atomic_lambda(atoms: &[measures::Atom], mu: &SpectralMeasure, u: C, w: C) -> Result<C, PredictError> {
    if (u - w).norm() < DIAGONAL_GAP {
        // Schwarzian limit of the two singular pieces.
        let mid = 0.5 * (u + w);
        let z = measures::m_inverse(mu, mid, None)?;
        let d = measures::atomic_m_derivs(atoms, z)?;
        let (m1, m2, m3) = (d[1], d[2], d[3]);
        return Ok((-m3 / m1.powi(3) + 1.5 * m2 * m2 / m1.powi(4)) / 6.0);
    }
    let zu = measures::m_inverse(mu, u, None)?;
    let zw = measures::m_inverse(mu, w, None)?;
    let mpu = measures::atomic_m_derivs(atoms, zu)?[1];
    let mpw = measures::atomic_m_derivs(atoms, zw)?[1];
    Ok(1.0 / (mpu * mpw * (zu - zw) * (zu - zw)) - 1.0 / ((u - w) * (u - w)))
}

/// `Λ(u, w) = Σ_i [1/(M_i′(z_u) M_i′(z_w) (z_u − z_w)²) − 1/(u − w)²]` with
/// `z = M_i⁻¹(· − 1)`. Closed-form families contribute nothing.
pub fn lambda2(model: &EnsembleModel, u: C, w: C) -> Result<C, PredictError> {
    let mut acc = C::from(0.0);
    for (mu, count) in model.groups() {
        if let Some(atoms) = atoms_of(mu) {
            acc += count * atomic_lambda(atoms, mu, u, w)?;
        }
    }
    Ok(acc)
}

/// `(1/2πi) ∮ f` with node doubling.
pub fn contour_integral<F>(f: F, c: &Contour<f64>, policy: Refinement) -> Result<Converged<f64>, PredictError>
where
    F: FnMut(C) -> Result<C, PredictError>,
{
    integrate(c, policy, f)
}

/// `(1/2πi)² ∮_outer ∮_inner f(u, w) du dw` with the same node count on both.
pub fn nested_double_integral<F>(
    mut f: F,
    inner: &Contour<f64>,
    outer: &Contour<f64>,
    policy: Refinement,
) -> Result<Converged<f64>, PredictError>
where
    F: FnMut(C, C) -> Result<C, PredictError>,
{
    refine(policy, |n| {
        let us = inner.nodes(n);
        let ws = outer.nodes(n);
        let mut acc = C::from(0.0);
        for q in &us {
            for r in &ws {
                acc += q.w * r.w * f(q.z, r.z)?;
            }
        }
        Ok(acc)
    })
}

// Everything the integrands need at one quadrature node.
struct Node {
    u: C,
    weight: C,
    xi: C,
    psi: C,
    dpsi: C,
    // (M⁻¹(u − 1), M′ there) for each atomic factor group
    atomic: Vec<(C, C)>,
}

fn node_data(model: &EnsembleModel, contour: &Contour<f64>, n: usize) -> Result<Vec<Node>, PredictError> {
    let quad = contour.nodes(n);
    let mut nodes: Vec<Node> = quad
        .iter()
        .map(|q| {
            Ok(Node {
                u: q.z,
                weight: q.w,
                xi: xi(q.z)?,
                psi: C::from(0.0),
                dpsi: C::from(0.0),
                atomic: Vec::new(),
            })
        })
        .collect::<Result<_, PredictError>>()?;
    let us: Vec<C> = quad.iter().map(|q| q.z).collect();
    for (mu, count) in model.groups() {
        match atoms_of(mu) {
            Some(atoms) => {
                let zs = measures::m_inverse_along(mu, &us)?;
                for (node, z) in nodes.iter_mut().zip(zs) {
                    let mp = measures::atomic_m_derivs(atoms, z)?[1];
                    let w = node.u - 1.0;
                    let s = node.u / w * z;
                    let ds = -z / (w * w) + node.u / (w * mp);
                    node.psi -= count * s.ln();
                    node.dpsi -= count * ds / s;
                    node.atomic.push((z, mp));
                }
            }
            None => {
                for node in nodes.iter_mut() {
                    let w = node.u - 1.0;
                    let s = measures::s_transform(mu, w)?;
                    let ds = measures::s_prime(mu, w)?;
                    node.psi -= count * s.ln();
                    node.dpsi -= count * ds / s;
                }
            }
        }
    }
    Ok(nodes)
}

fn atomic_counts(model: &EnsembleModel) -> Vec<f64> {
    model.groups().into_iter().filter(|(mu, _)| atoms_of(mu).is_some()).map(|(_, c)| c).collect()
}

fn pair_lambda(counts: &[f64], a: &Node, b: &Node) -> C {
    let duw = a.u - b.u;
    let base = 1.0 / (duw * duw);
    let mut acc = C::from(0.0);
    for (i, &count) in counts.iter().enumerate() {
        let (za, ma) = a.atomic[i];
        let (zb, mb) = b.atomic[i];
        let dz = za - zb;
        acc += count * (1.0 / (ma * mb * dz * dz) - base);
    }
    acc
}

fn describe_pair(cfg: &QuadratureConfig, nodes: usize) -> String {
    format!(
        "inner {}; outer {}",
        Contour::stadium(cfg.inner_eps).describe(nodes),
        Contour::stadium(cfg.outer_eps).describe(nodes)
    )
}

/// `𝔭_k = (1/(k + 1)) ∮ (Ξ + Ψ)^{k+1}`, the limit of `(1/N) E p_k` at fixed M.
pub fn lln_moment_fixed_m(model: &EnsembleModel, k: u32, cfg: &QuadratureConfig) -> Result<Predicted, PredictError> {
    model.expect(Regime::FixedM)?;
    let c = Contour::stadium(cfg.inner_eps);
    let conv = refine(cfg.refinement, |n| -> Result<C, PredictError> {
        let nodes = node_data(model, &c, n)?;
        Ok(nodes.iter().map(|q| q.weight * (q.xi + q.psi).powu(k + 1)).sum::<C>() / (k + 1) as f64)
    })?;
    let desc = c.describe(conv.nodes);
    Ok(Predicted::from_converged(conv, desc))
}

/// Limit of `Cov(p_k, p_l)` at fixed M.
pub fn clt_cov_fixed_m(model: &EnsembleModel, k: u32, l: u32, cfg: &QuadratureConfig) -> Result<Predicted, PredictError> {
    model.expect(Regime::FixedM)?;
    if k == 0 || l == 0 || model.is_degenerate() {
        return Ok(Predicted::exact_zero());
    }
    let inner = Contour::stadium(cfg.inner_eps);
    let outer = Contour::stadium(cfg.outer_eps);
    let counts = atomic_counts(model);
    let conv = refine(cfg.refinement, |n| -> Result<C, PredictError> {
        let us = node_data(model, &inner, n)?;
        let ws = node_data(model, &outer, n)?;
        let fu: Vec<C> = us.iter().map(|q| q.weight * (q.xi + q.psi).powu(l)).collect();
        let fw: Vec<C> = ws.iter().map(|q| q.weight * (q.xi + q.psi).powu(k)).collect();
        let mut acc = C::from(0.0);
        for (a, &ga) in us.iter().zip(&fu) {
            let mut row = C::from(0.0);
            for (b, &gb) in ws.iter().zip(&fw) {
                let d = a.u - b.u;
                row += gb * (1.0 / (d * d) + pair_lambda(&counts, a, b));
            }
            acc += ga * row;
        }
        Ok(acc)
    })?;
    let desc = describe_pair(cfg, conv.nodes);
    Ok(Predicted::from_converged(conv, desc))
}

/// `𝔭′_k = ∮ Ξ Ψ^k`, the limit of `(1/N) E p_k(λ/M)` for Lyapunov exponents.
pub fn lln_moment_lyapunov(model: &EnsembleModel, k: u32, cfg: &QuadratureConfig) -> Result<Predicted, PredictError> {
    model.expect(Regime::Lyapunov)?;
    let c = Contour::stadium(cfg.inner_eps);
    let conv = refine(cfg.refinement, |n| -> Result<C, PredictError> {
        let nodes = node_data(model, &c, n)?;
        Ok(nodes.iter().map(|q| q.weight * q.xi * q.psi.powu(k)).sum())
    })?;
    let desc = c.describe(conv.nodes);
    Ok(Predicted::from_converged(conv, desc))
}

// ∮∮ ΞΞ Ψ^{k−1} Ψ^{l−1} Λ + ∮ Ξ Ψ^{k+l−2} Ψ′ (without the kl factor).
fn lyapunov_bracket(model: &EnsembleModel, k: u32, l: u32, cfg: &QuadratureConfig) -> Result<Predicted, PredictError> {
    let inner = Contour::stadium(cfg.inner_eps);
    let outer = Contour::stadium(cfg.outer_eps);
    let counts = atomic_counts(model);
    let conv = refine(cfg.refinement, |n| -> Result<C, PredictError> {
        let us = node_data(model, &inner, n)?;
        let mut acc: C = us.iter().map(|q| q.weight * q.xi * q.psi.powu(k + l - 2) * q.dpsi).sum();
        if !counts.is_empty() {
            let ws = node_data(model, &outer, n)?;
            for a in &us {
                let ga = a.weight * a.xi * a.psi.powu(k - 1);
                let mut row = C::from(0.0);
                for b in &ws {
                    row += b.weight * b.xi * b.psi.powu(l - 1) * pair_lambda(&counts, a, b);
                }
                acc += ga * row;
            }
        }
        Ok(acc)
    })?;
    let desc = describe_pair(cfg, conv.nodes);
    Ok(Predicted::from_converged(conv, desc))
}

/// Limit of `Cov(M^{1/2} p_k(λ/M), M^{1/2} p_l(λ/M))` for Lyapunov exponents.
pub fn clt_cov_lyapunov(model: &EnsembleModel, k: u32, l: u32, cfg: &QuadratureConfig) -> Result<Predicted, PredictError> {
    model.expect(Regime::Lyapunov)?;
    if k == 0 || l == 0 || model.is_degenerate() {
        return Ok(Predicted::exact_zero());
    }
    let mut p = lyapunov_bracket(model, k, l, cfg)?;
    let kl = (k * l) as f64;
    p.value *= kl;
    p.error *= kl;
    Ok(p)
}

/// Covariance of `M^{1/2} p_k` after `⌊αM⌋` factors with `M^{1/2} p_l` after
/// `⌊βM⌋` factors, `0 < β ≤ α ≤ 1`.
pub fn cov_2d(
    model: &EnsembleModel,
    k: u32,
    alpha: f64,
    l: u32,
    beta: f64,
    cfg: &QuadratureConfig,
) -> Result<Predicted, PredictError> {
    if !(beta > 0.0 && alpha <= 1.0) {
        return Err(PredictError::DomainError(format!("need 0 < beta <= alpha <= 1, got {alpha}, {beta}")));
    }
    if beta > alpha {
        return Err(PredictError::OrderViolation { alpha, beta });
    }
    let mut p = clt_cov_lyapunov(model, k, l, cfg)?;
    let scale = alpha.powi(k as i32 - 1) * beta.powi(l as i32);
    p.value *= scale;
    p.error *= scale;
    Ok(p)
}

fn s_real(mu: &SpectralMeasure, w: f64) -> Result<f64, PredictError> {
    Ok(measures::s_transform(mu, C::from(w))?.re)
}

/// `[−log S(−1), −log S(0)]`, the support of the Lyapunov spectrum.
pub fn lyapunov_support(mu: &SpectralMeasure) -> Result<(f64, f64), PredictError> {
    Ok((-s_real(mu, -1.0)?.ln(), -s_real(mu, 0.0)?.ln()))
}

// w ∈ [−1, 0] with S(w) = y; S is strictly decreasing there.
fn s_inverse_real(mu: &SpectralMeasure, y: f64) -> Result<f64, PredictError> {
    match *mu {
        SpectralMeasure::GinibreLimit { gamma } => return Ok(1.0 / y - gamma),
        SpectralMeasure::JacobiLimit { alpha_hat: a, r_hat: r } => return Ok((y * (a + 1.0) - a - r - 1.0) / (1.0 - y)),
        _ => {}
    }
    let (mut lo, mut hi) = (-1.0, 0.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if s_real(mu, mid)? > y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn check_support(mu: &SpectralMeasure, t: f64) -> Result<(), PredictError> {
    let (lo, hi) = lyapunov_support(mu)?;
    let slack = 1e-12 * (1.0 + t.abs());
    if t < lo - slack || t > hi + slack {
        return Err(PredictError::OutOfSupport { t, lo, hi });
    }
    Ok(())
}

// (u(t), ρ(t)) with u = S⁻¹(e^{−t}) + 1 and ρ = du/dt.
fn lyapunov_point(mu: &SpectralMeasure, t: f64) -> Result<(f64, f64), PredictError> {
    let y = (-t).exp();
    let w = s_inverse_real(mu, y)?.clamp(-1.0, 0.0);
    let ds = measures::s_prime(mu, C::from(w))?.re;
    Ok((w + 1.0, -y / ds))
}

/// Density of the Lyapunov exponents, `−e^{−z}/S′(S⁻¹(e^{−z}))`.
pub fn lyapunov_density(mu: &SpectralMeasure, z: f64) -> Result<f64, PredictError> {
    if mu.is_degenerate() {
        return Err(PredictError::DomainError("point mass: the Lyapunov spectrum is a single point".into()));
    }
    check_support(mu, z)?;
    Ok(lyapunov_point(mu, z)?.1)
}

/// Covariance kernel of `M^{1/2}(ℋ(t) − Eℋ(t))` for Lyapunov exponents. The
/// unit white-noise component is reported on the diagonal `t = s`.
pub fn lyapunov_kernel(mu: &SpectralMeasure, t: f64, s: f64) -> Result<KernelValue, PredictError> {
    kernel_2d(mu, t, 1.0, s, 1.0)
}

/// Kernel of the two-dimensional field; the component
/// `α⁻¹ δ(α⁻¹t − β⁻¹s)` is reported where `α⁻¹t = β⁻¹s`.
pub fn kernel_2d(mu: &SpectralMeasure, t: f64, alpha: f64, s: f64, beta: f64) -> Result<KernelValue, PredictError> {
    if !(beta > 0.0 && alpha <= 1.0) {
        return Err(PredictError::DomainError(format!("need 0 < beta <= alpha <= 1, got {alpha}, {beta}")));
    }
    if beta > alpha {
        return Err(PredictError::OrderViolation { alpha, beta });
    }
    let (ts, ss) = (t / alpha, s / beta);
    let on_diagonal = (ts - ss).abs() <= 1e-12 * (1.0 + ts.abs());
    let delta_coeff = if on_diagonal { 1.0 / alpha } else { 0.0 };
    if mu.is_degenerate() {
        return Ok(KernelValue { smooth: 0.0, delta_coeff, degenerate: true });
    }
    check_support(mu, ts)?;
    check_support(mu, ss)?;
    let model = EnsembleModel::lyapunov(mu.clone())?;
    let (ut, rt) = lyapunov_point(mu, ts)?;
    let (us, rs) = lyapunov_point(mu, ss)?;
    let lam = lambda2(&model, C::from(ut), C::from(us))?.re;
    Ok(KernelValue { smooth: lam * rt * rs / alpha, delta_coeff, degenerate: false })
}

fn flat_factors(factors: &[SpectralMeasure]) -> Vec<SpectralMeasure> {
    factors.iter().flat_map(measures::factor_list).collect()
}

fn boundary_with_density(factors: &[SpectralMeasure], t: f64) -> Result<(measures::ProductBoundary, f64), PredictError> {
    let b = measures::product_boundary(factors, t)?;
    let p = b.w.im / PI;
    if p <= 1e-10 {
        return Err(PredictError::OutOfSupport { t, lo: f64::NAN, hi: f64::NAN });
    }
    Ok((b, p))
}

/// Covariance `K(t, s)` of the centered height function at fixed M, for a
/// product of the given factors (free powers are expanded).
pub fn height_kernel_finite_m(factors: &[SpectralMeasure], t: f64, s: f64) -> Result<f64, PredictError> {
    let flat = flat_factors(factors);
    let m = flat.len();
    if m == 0 {
        return Err(PredictError::DomainError("no factors".into()));
    }
    if m == 1 {
        return Ok(0.0);
    }
    if t == s {
        return Err(PredictError::DomainError("K(t, s) diverges at t = s".into()));
    }
    let (bt, _) = boundary_with_density(&flat, t)?;
    let (bs, _) = boundary_with_density(&flat, s)?;
    let ratio = |a: C, b: C| ((a - b) / (a - b.conj())).norm().ln();
    let mut acc = (1.0 - m as f64) * ratio(bt.w, bs.w);
    for (ot, os) in bt.omegas.iter().zip(&bs.omegas) {
        acc += ratio(*ot, *os);
    }
    Ok(-acc / (2.0 * PI * PI))
}

/// `lim_{s→t} [K(t, s) + (1/2π²) log|t − s|]` at fixed M > 1.
pub fn log_corr_constant(factors: &[SpectralMeasure], t: f64) -> Result<f64, PredictError> {
    let flat = flat_factors(factors);
    if flat.len() < 2 {
        return Err(PredictError::DomainError("the log-correlation constant needs M > 1".into()));
    }
    let (b, p) = boundary_with_density(&flat, t)?;
    let two_pi_p = 2.0 * PI * p;
    let mut acc = -(b.dw_dt / two_pi_p).norm().ln();
    for (om, mp) in b.omegas.iter().zip(&b.m_primes) {
        let jump = C::new(0.0, 2.0 * om.im);
        acc += (jump * mp / two_pi_p).norm().ln();
    }
    Ok(acc / (2.0 * PI * PI))
}

/// Largest error of Cauchy reconstructions of `Ψ(p)` and `Λ(p, w₀)` at eight
/// points `p` at distance 0.2 from `[0, 1]`, using the annulus between
/// `Υ_0.1` and `Υ_0.35`.
pub fn holomorphy_defect(model: &EnsembleModel) -> Result<f64, PredictError> {
    let inner = Contour::stadium(0.1);
    let outer = Contour::stadium(0.35);
    let w0 = C::new(0.5, 0.6);
    let probes: Vec<C> = Contour::stadium(0.2).nodes(8).into_iter().map(|q| q.z).collect();
    let n = 2048;
    let a = node_data(model, &inner, n)?;
    let b = node_data(model, &outer, n)?;
    let lam_at = |u: C| lambda2(model, u, w0);
    let la: Vec<C> = a.iter().map(|q| lam_at(q.u)).collect::<Result<_, _>>()?;
    let lb: Vec<C> = b.iter().map(|q| lam_at(q.u)).collect::<Result<_, _>>()?;
    let mut worst = 0.0f64;
    for &p in &probes {
        let recon = |nodes: &[Node], vals: &dyn Fn(usize) -> C| -> C {
            nodes.iter().enumerate().map(|(i, q)| q.weight * vals(i) / (q.u - p)).sum()
        };
        let psi_rec = recon(&b, &|i| b[i].psi) - recon(&a, &|i| a[i].psi);
        let lam_rec = recon(&b, &|i| lb[i]) - recon(&a, &|i| la[i]);
        worst = worst.max((psi_rec - psi(model, p)?).norm()).max((lam_rec - lam_at(p)?).norm());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::SpectralMeasure as Sm;
    use proptest::prelude::*;

    fn ginibre(g: f64) -> Sm {
        Sm::GinibreLimit { gamma: g }
    }

    fn two_atom() -> Sm {
        Sm::atomic(&[0.0, 4f64.ln()], &[0.5, 0.5]).unwrap()
    }

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    // Fejér's first rule on [a, b]: Chebyshev midpoints, spectrally accurate
    // for smooth f and tolerant of square-root end points.
    fn fejer(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|j| {
                let th = PI * (j as f64 + 0.5) / n as f64;
                let corr: f64 = (1..=n / 2).map(|k| (2.0 * k as f64 * th).cos() / (4.0 * (k * k) as f64 - 1.0)).sum();
                let w = 2.0 / n as f64 * (1.0 - 2.0 * corr);
                (a + (b - a) * (1.0 - th.cos()) / 2.0, w * (b - a) / 2.0)
            })
            .collect()
    }

    fn cos_quad(a: f64, b: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
        fejer(a, b, n).into_iter().map(|(x, w)| w * f(x)).sum()
    }

    // Midpoint rule after x = a + (b − a)(1 − cos θ)/2; the Jacobian cancels
    // inverse square-root blow-ups at both end points.
    fn arcsine_quad(a: f64, b: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
        let h = PI / n as f64;
        (0..n)
            .map(|j| {
                let th = (j as f64 + 0.5) * h;
                f(a + (b - a) * (1.0 - th.cos()) / 2.0) * (b - a) / 2.0 * th.sin() * h
            })
            .sum()
    }

    #[test]
    fn xi_examples() {
        assert!((xi(C::from(2.0)).unwrap() - C::from(2f64.ln())).norm() < 1e-15);
        assert!((xi(C::from(1.0 + 1e6)).unwrap().re - 1e-6).abs() < 1e-11);
        assert!((xi(C::new(0.5, 0.5)).unwrap() - C::new(0.0, -PI / 2.0)).norm() < 1e-15);
        assert!(matches!(xi(C::from(0.3)), Err(PredictError::OnCut(_))));
    }

    #[test]
    fn psi_examples() {
        let g = EnsembleModel::identical(ginibre(2.0), 1).unwrap();
        assert!((psi(&g, C::from(2.0)).unwrap() - C::from(3f64.ln())).norm() < 1e-14);
        let j = EnsembleModel::identical(Sm::JacobiLimit { alpha_hat: 1.0, r_hat: 1.0 }, 1).unwrap();
        let u = C::new(0.5, 1.0);
        assert!((psi(&j, u).unwrap() - ((u + 1.0) / (u + 2.0)).ln()).norm() < 1e-14);
        // A single atom is a point mass: Λ cancels through the atomic formula.
        let one = EnsembleModel::identical(Sm::atomic(&[0.4], &[1.0]).unwrap(), 1).unwrap();
        let lam = lambda2(&one, C::new(0.3, 0.4), C::new(0.8, -0.5)).unwrap();
        assert!(lam.norm() < 1e-12, "{lam}");
    }

    #[test]
    fn lambda_diagonal_rule_is_continuous() {
        let m = EnsembleModel::identical(two_atom(), 1).unwrap();
        // Regular formula just outside the gap against the limit at the same midpoint.
        let u = C::new(0.4, 0.3);
        let h = C::new(1.1e-3, 0.0);
        let near = lambda2(&m, u - h, u + h).unwrap();
        let diag = lambda2(&m, u - h / 10.0, u + h / 10.0).unwrap();
        assert!((near - diag).norm() < 1e-5 * near.norm().max(1.0), "{near} {diag}");
    }

    #[test]
    fn contour_integral_examples() {
        let unit = Contour::circle(C::from(0.0), 1.0);
        let p = Refinement::default();
        let r = contour_integral(|u| Ok(1.0 / u), &unit, p).unwrap();
        assert!((r.value - 1.0).norm() < 1e-14);
        let x = contour_integral(xi, &Contour::stadium(INNER_EPS), p).unwrap();
        assert!((x.value - 1.0).norm() < 1e-9);
        let e = contour_integral(|u| Ok(u.exp() * u * u), &unit, p).unwrap();
        assert!(e.value.norm() < 1e-12);
        let d = nested_double_integral(|u, w| Ok(1.0 / (u * w)), &unit, &Contour::circle(C::from(0.0), 2.0), p).unwrap();
        assert!((d.value - 1.0).norm() < 1e-12);
    }

    #[test]
    fn fixed_m_moments() {
        let g = EnsembleModel::identical(ginibre(2.0), 1).unwrap();
        assert!((lln_moment_fixed_m(&g, 0, &cfg()).unwrap().value - 1.0).abs() < 1e-10);
        let p1 = lln_moment_fixed_m(&g, 1, &cfg()).unwrap().value;
        assert!((p1 - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-9, "{p1}");
        let pts = [0.7, 0.2, -0.1, -0.5];
        let det = EnsembleModel::identical(Sm::empirical(&pts).unwrap(), 1).unwrap();
        for k in 1..4 {
            let oracle = pts.iter().map(|s: &f64| s.powi(k as i32)).sum::<f64>() / 4.0;
            let v = lln_moment_fixed_m(&det, k, &cfg()).unwrap().value;
            assert!((v - oracle).abs() < 1e-9, "k={k} {v} {oracle}");
        }
    }

    #[test]
    fn fixed_m_moments_match_product_density() {
        let mu = Sm::free_power(two_atom(), 2).unwrap();
        let model = EnsembleModel::fixed_m(vec![mu.clone()]).unwrap();
        let (a, b) = measures::support_edges(&mu, -0.5, 3.5, 200).unwrap();
        for k in 1..3 {
            let pred = lln_moment_fixed_m(&model, k, &cfg()).unwrap().value;
            let direct = arcsine_quad(a, b, 1500, |s| s.powi(k as i32) * measures::density_from_boundary(&mu, s).unwrap());
            assert!((pred - direct).abs() < 1e-4, "k={k} {pred} {direct}");
        }
    }

    #[test]
    fn fixed_m_covariances() {
        let g = EnsembleModel::identical(ginibre(2.0), 1).unwrap();
        let v = clt_cov_fixed_m(&g, 1, 1, &cfg()).unwrap().value;
        // Var log det of a Wishart tends to Σ ψ′(L − i + 1) → log(γ/(γ − 1)).
        assert!((v - 2f64.ln()).abs() < 1e-8, "{v}");
        let det = EnsembleModel::identical(Sm::empirical(&[0.7, 0.2, -0.1, -0.5]).unwrap(), 1).unwrap();
        for (k, l) in [(1, 1), (1, 2), (2, 3)] {
            assert!(clt_cov_fixed_m(&det, k, l, &cfg()).unwrap().value.abs() < 1e-6);
        }
        let pm = EnsembleModel::identical(Sm::PointMass { x0: 0.3 }, 3).unwrap();
        assert_eq!(clt_cov_fixed_m(&pm, 2, 1, &cfg()).unwrap().value, 0.0);
        let two = EnsembleModel::identical(two_atom(), 2).unwrap();
        let a = clt_cov_fixed_m(&two, 1, 2, &cfg()).unwrap().value;
        let b = clt_cov_fixed_m(&two, 2, 1, &cfg()).unwrap().value;
        assert!((a - b).abs() < 1e-8, "{a} {b}");
    }

    #[test]
    fn fixed_m_gram_matrix_is_psd() {
        let two = EnsembleModel::identical(two_atom(), 2).unwrap();
        let mut g = nalgebra::DMatrix::<f64>::zeros(3, 3);
        for k in 1..=3u32 {
            for l in 1..=3u32 {
                g[((k - 1) as usize, (l - 1) as usize)] = clt_cov_fixed_m(&two, k, l, &cfg()).unwrap().value;
            }
        }
        let sym = (&g + g.transpose()) * 0.5;
        assert!((&g - &sym).abs().max() < 1e-8);
        assert!(sym.symmetric_eigenvalues().min() > -1e-8);
    }

    #[test]
    fn lyapunov_examples() {
        let g = EnsembleModel::lyapunov(ginibre(2.0)).unwrap();
        let p1 = lln_moment_lyapunov(&g, 1, &cfg()).unwrap().value;
        assert!((p1 - 0.386294361).abs() < 1e-8);
        let v = clt_cov_lyapunov(&g, 1, 1, &cfg()).unwrap().value;
        assert!((v - 2f64.ln()).abs() < 1e-9);
        let j = EnsembleModel::lyapunov(Sm::JacobiLimit { alpha_hat: 1.0, r_hat: 1.0 }).unwrap();
        let pj = lln_moment_lyapunov(&j, 1, &cfg()).unwrap().value;
        // ∫₀¹ log((1 + u)/(2 + u)) du
        assert!((pj - (4.0 * 2f64.ln() - 3.0 * 3f64.ln())).abs() < 1e-9, "{pj}");
        let vj = clt_cov_lyapunov(&j, 1, 1, &cfg()).unwrap().value;
        assert!((vj - ((2.0f64 / 3.0).ln() - 0.5f64.ln())).abs() < 1e-9);
        assert!(lln_moment_fixed_m(&g, 1, &cfg()).is_err());
    }

    #[test]
    fn lyapunov_moments_collapse_to_real_integrals() {
        let mu = two_atom();
        let m = EnsembleModel::lyapunov(mu.clone()).unwrap();
        for k in 1..4u32 {
            let pred = lln_moment_lyapunov(&m, k, &cfg()).unwrap().value;
            let real = cos_quad(0.0, 1.0, 400, |u| (-measures::s_transform(&mu, C::from(u - 1.0)).unwrap().re.ln()).powi(k as i32));
            assert!((pred - real).abs() < 1e-8, "k={k} {pred} {real}");
        }
    }

    #[test]
    fn lyapunov_kernel_reproduces_covariances() {
        let mu = two_atom();
        let m = EnsembleModel::lyapunov(mu.clone()).unwrap();
        let (lo, hi) = lyapunov_support(&mu).unwrap();
        let n = 48;
        let grid = fejer(lo, hi, n);
        for (k, l) in [(0u32, 0u32), (1, 0), (1, 1)] {
            let mut smooth = 0.0;
            for &(t, wt) in &grid {
                for &(s, ws) in &grid {
                    smooth += wt * ws * t.powi(k as i32) * s.powi(l as i32) * lyapunov_kernel(&mu, t, s).unwrap().smooth;
                }
            }
            let white: f64 = (hi.powi((k + l + 1) as i32) - lo.powi((k + l + 1) as i32)) / (k + l + 1) as f64;
            let pred = clt_cov_lyapunov(&m, k + 1, l + 1, &cfg()).unwrap().value / ((k + 1) * (l + 1)) as f64;
            assert!((smooth + white - pred).abs() < 1e-6, "({k},{l}) {} {pred}", smooth + white);
        }
    }

    #[test]
    fn lyapunov_density_examples() {
        let g = ginibre(2.0);
        assert!((lyapunov_density(&g, 0.3).unwrap() - 0.3f64.exp()).abs() < 1e-12);
        let (lo, hi) = lyapunov_support(&g).unwrap();
        assert!(lo.abs() < 1e-14 && (hi - 2f64.ln()).abs() < 1e-14);
        assert!(matches!(lyapunov_density(&g, 0.8), Err(PredictError::OutOfSupport { .. })));
        let j = Sm::JacobiLimit { alpha_hat: 1.0, r_hat: 1.0 };
        let (lo, hi) = lyapunov_support(&j).unwrap();
        assert!((lo - 0.5f64.ln()).abs() < 1e-14 && (hi - (2.0f64 / 3.0).ln()).abs() < 1e-14);
        // R̂ e^z/(1 − e^z)², with parameters where R̂ differs from α̂ + R̂ − 1.
        let j2 = Sm::JacobiLimit { alpha_hat: 2.0, r_hat: 1.5 };
        let (lo, hi) = lyapunov_support(&j2).unwrap();
        let z = 0.5 * (lo + hi);
        let closed = 1.5 * z.exp() / (1.0 - z.exp()).powi(2);
        assert!((lyapunov_density(&j2, z).unwrap() - closed).abs() < 1e-10);
        for mu in [j2, two_atom()] {
            let (lo, hi) = lyapunov_support(&mu).unwrap();
            let mass = cos_quad(lo, hi, 400, |z| lyapunov_density(&mu, z).unwrap());
            assert!((mass - 1.0).abs() < 1e-6, "{mass}");
        }
        let mu = two_atom();
        let (lo, hi) = lyapunov_support(&mu).unwrap();
        let exp_neg: f64 = 0.5 * (1.0 + 0.25);
        let exp_pos: f64 = 0.5 * (1.0 + 4.0);
        assert!((lo + exp_neg.ln()).abs() < 1e-10 && (hi - exp_pos.ln()).abs() < 1e-10);
    }

    #[test]
    fn kernel_flags() {
        let pm = lyapunov_kernel(&Sm::PointMass { x0: 0.2 }, -0.2, -0.2).unwrap();
        assert!(pm.degenerate && pm.smooth == 0.0 && pm.delta_coeff == 1.0);
        let g = ginibre(2.0);
        let kv = lyapunov_kernel(&g, 0.3, 0.5).unwrap();
        assert_eq!((kv.smooth, kv.delta_coeff), (0.0, 0.0));
        assert_eq!(kernel_2d(&g, 0.3, 0.6, 0.15, 0.3).unwrap().delta_coeff, 1.0 / 0.6);
        assert_eq!(kernel_2d(&g, 0.3, 0.6, 0.1, 0.3).unwrap().delta_coeff, 0.0);
        assert!(matches!(kernel_2d(&g, 0.1, 0.3, 0.1, 0.6), Err(PredictError::OrderViolation { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn lyapunov_kernel_is_symmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let mu = two_atom();
            let (lo, hi) = lyapunov_support(&mu).unwrap();
            let (t, s) = (lo + (hi - lo) * a, lo + (hi - lo) * b);
            let k1 = lyapunov_kernel(&mu, t, s).unwrap().smooth;
            let k2 = lyapunov_kernel(&mu, s, t).unwrap().smooth;
            prop_assert!((k1 - k2).abs() < 1e-9 * k1.abs().max(1.0));
        }
    }

    #[test]
    fn two_dimensional_covariance() {
        let g = EnsembleModel::lyapunov(ginibre(2.0)).unwrap();
        let v = cov_2d(&g, 1, 1.0, 1, 0.5, &cfg()).unwrap().value;
        assert!((v - 0.5 * 2f64.ln()).abs() < 1e-9);
        let m = EnsembleModel::lyapunov(two_atom()).unwrap();
        let base = clt_cov_lyapunov(&m, 2, 1, &cfg()).unwrap().value;
        let v = cov_2d(&m, 2, 0.7, 1, 0.7, &cfg()).unwrap().value;
        assert!((v - 0.7 * 0.7 * base).abs() < 1e-12);
        assert!(matches!(cov_2d(&g, 1, 0.4, 1, 0.5, &cfg()), Err(PredictError::OrderViolation { .. })));
    }

    #[test]
    fn predictions_are_contour_independent() {
        let wide = QuadratureConfig { inner_eps: 0.3, outer_eps: 0.6, ..cfg() };
        let fixed = EnsembleModel::identical(two_atom(), 2).unwrap();
        let lya = EnsembleModel::lyapunov(two_atom()).unwrap();
        let pairs = [
            (lln_moment_fixed_m(&fixed, 2, &cfg()).unwrap(), lln_moment_fixed_m(&fixed, 2, &wide).unwrap()),
            (clt_cov_fixed_m(&fixed, 1, 2, &cfg()).unwrap(), clt_cov_fixed_m(&fixed, 1, 2, &wide).unwrap()),
            (clt_cov_lyapunov(&lya, 2, 2, &cfg()).unwrap(), clt_cov_lyapunov(&lya, 2, 2, &wide).unwrap()),
        ];
        for (a, b) in pairs {
            assert!((a.value - b.value).abs() < 1e-8 * a.value.abs().max(1.0), "{} {}", a.value, b.value);
        }
    }

    #[test]
    fn models_are_holomorphic_near_the_interval() {
        for m in [EnsembleModel::identical(two_atom(), 2).unwrap(), EnsembleModel::identical(ginibre(2.0), 3).unwrap()] {
            let d = holomorphy_defect(&m).unwrap();
            assert!(d < 1e-8, "{d}");
        }
    }

    #[test]
    fn finite_m_kernel() {
        let single = [two_atom()];
        assert_eq!(height_kernel_finite_m(&single, 0.2, 0.9).unwrap(), 0.0);
        assert!(log_corr_constant(&single, 0.5).is_err());
        let pair = [Sm::free_power(two_atom(), 2).unwrap()];
        let k1 = height_kernel_finite_m(&pair, 0.6, 1.4).unwrap();
        let k2 = height_kernel_finite_m(&pair, 1.4, 0.6).unwrap();
        assert!(k1.is_finite() && (k1 - k2).abs() < 1e-10);
        let t = 1.0;
        let c = log_corr_constant(&pair, t).unwrap();
        let vals: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&h| height_kernel_finite_m(&pair, t, t + h).unwrap() + h.ln() / (2.0 * PI * PI))
            .collect();
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.05 * vals[2].abs(), "{vals:?}");
        assert!((vals[2] - c).abs() < 1e-2, "{vals:?} {c}");
    }

    #[test]
    fn prediction_record_round_trips() {
        let p = Predicted { value: 0.5, error: 1e-12, contour: "stadium".into() };
        let rec = Prediction::new("lln_lyapunov", 1, None, &p);
        let text = serde_json::to_string(&rec).unwrap();
        assert_eq!(serde_json::from_str::<Prediction>(&text).unwrap(), rec);
    }
}
