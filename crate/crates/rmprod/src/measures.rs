//! Spectral measures on the log-eigenvalue axis and their free multiplicative
//! transforms.
//!
//! For a measure `ρ` the M-transform is `M(z) = ∫ eˢ z / (1 − eˢ z) dρ(s)` and
//! the S-transform is `S(w) = ((1 + w)/w) M⁻¹(w)`. Arguments of the inverse
//! follow the shifted convention `m_inverse(u) = M⁻¹(u − 1)`, so the interval
//! `u ∈ (0, 1)` corresponds to `w ∈ (−1, 0)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ComplexPoint = Complex64;

const NEWTON_TOL: f64 = 1e-13;
const ROUND_TRIP_TOL: f64 = 1e-12;
const BRANCH_TOL: f64 = 1e-8;
const REMOVABLE_RADIUS: f64 = 2e-2;
const REMOVABLE_NODES: usize = 32;
const LOCAL_RADIUS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("pole hit: 1 - e^s z vanishes at z = {0}")]
    PoleHit(Complex64),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error("Newton continuation did not converge at {0}")]
    NoConvergence(Complex64),
    #[error("continuation paths disagree at {u} (difference {diff:e})")]
    BranchAmbiguity { u: Complex64, diff: f64 },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid measure: {0}")]
    Invalid(String),
}

/// One atom `(s, weight)` of an atomic log-spectral measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom(pub f64, pub f64);

/// Compactly supported probability measure on the log-eigenvalue axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralMeasure {
    Atomic { atoms: Vec<Atom> },
    PointMass { x0: f64 },
    GinibreLimit { gamma: f64 },
    JacobiLimit { alpha_hat: f64, r_hat: f64 },
    FreePower { base: Box<SpectralMeasure>, power: usize },
}

/// Known value of `M⁻¹` used to continue the branch to nearby points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchSeed {
    pub anchor_u: Complex64,
    pub anchor_value: Complex64,
}

impl SpectralMeasure {
    /// Atomic measure from log-points and weights; equal points are merged.
    pub fn atomic(points: &[f64], weights: &[f64]) -> Result<Self, MeasureError> {
        if points.len() != weights.len() || points.is_empty() {
            return Err(MeasureError::Invalid("points and weights must be non-empty and of equal length".into()));
        }
        let mut atoms: Vec<Atom> = points.iter().zip(weights).map(|(&s, &w)| Atom(s, w)).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == a.0 => last.1 += a.1,
                _ => merged.push(a),
            }
        }
        let m = SpectralMeasure::Atomic { atoms: merged };
        m.validate()?;
        Ok(m)
    }

    /// Equal-weight atoms at the given log-points (an empirical spectrum).
    pub fn empirical(points: &[f64]) -> Result<Self, MeasureError> {
        let w = vec![1.0 / points.len() as f64; points.len()];
        Self::atomic(points, &w)
    }

    pub fn free_power(base: SpectralMeasure, power: usize) -> Result<Self, MeasureError> {
        let m = SpectralMeasure::FreePower { base: Box::new(base), power };
        m.validate()?;
        Ok(m)
    }

    pub fn from_json(text: &str) -> Result<Self, MeasureError> {
        let m: SpectralMeasure =
            serde_json::from_str(text).map_err(|e| MeasureError::Invalid(format!("json: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("measure serializes")
    }

    pub fn validate(&self) -> Result<(), MeasureError> {
        use SpectralMeasure::*;
        match self {
            Atomic { atoms } => {
                if atoms.is_empty() {
                    return Err(MeasureError::Invalid("no atoms".into()));
                }
                if atoms.iter().any(|a| !a.0.is_finite() || !(a.1 > 0.0) || !a.1.is_finite()) {
                    return Err(MeasureError::Invalid("atoms need finite points and positive weights".into()));
                }
                let total: f64 = atoms.iter().map(|a| a.1).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(MeasureError::Invalid(format!("total weight {total} is not 1")));
                }
            }
            PointMass { x0 } if !x0.is_finite() => return Err(MeasureError::Invalid("x0 must be finite".into())),
            PointMass { .. } => {}
            GinibreLimit { gamma } if !(*gamma > 1.0) || !gamma.is_finite() => {
                return Err(MeasureError::Invalid("gamma must exceed 1".into()))
            }
            GinibreLimit { .. } => {}
            JacobiLimit { alpha_hat, r_hat } => {
                if !(*alpha_hat > 0.0) || !(*r_hat >= 1.0) || !alpha_hat.is_finite() || !r_hat.is_finite() {
                    return Err(MeasureError::Invalid("need alpha_hat > 0 and r_hat >= 1".into()));
                }
            }
            FreePower { base, power } => {
                if *power == 0 {
                    return Err(MeasureError::Invalid("power must be positive".into()));
                }
                if matches!(**base, FreePower { .. }) {
                    return Err(MeasureError::Invalid("nested free powers are not supported".into()));
                }
                base.validate()?;
            }
        }
        Ok(())
    }

    /// True when the measure is a single atom, so all fluctuations vanish.
    pub fn is_degenerate(&self) -> bool {
        match self {
            SpectralMeasure::PointMass { .. } => true,
            SpectralMeasure::Atomic { atoms } => atoms.len() == 1,
            SpectralMeasure::FreePower { base, .. } => base.is_degenerate(),
            _ => false,
        }
    }

    /// `∫ eˢ dρ`, which equals `1/S(0)`.
    pub fn mean_exp(&self) -> f64 {
        use SpectralMeasure::*;
        match self {
            Atomic { atoms } => atoms.iter().map(|a| a.1 * a.0.exp()).sum(),
            PointMass { x0 } => x0.exp(),
            GinibreLimit { gamma } => *gamma,
            JacobiLimit { alpha_hat, r_hat } => (alpha_hat + 1.0) / (alpha_hat + r_hat + 1.0),
            FreePower { base, power } => base.mean_exp().powi(*power as i32),
        }
    }

    /// `∫ e⁻ˢ dρ`, which equals `S(−1)`.
    pub fn mean_exp_neg(&self) -> f64 {
        use SpectralMeasure::*;
        match self {
            Atomic { atoms } => atoms.iter().map(|a| a.1 * (-a.0).exp()).sum(),
            PointMass { x0 } => (-x0).exp(),
            GinibreLimit { gamma } => 1.0 / (gamma - 1.0),
            JacobiLimit { alpha_hat, r_hat } => (alpha_hat + r_hat) / alpha_hat,
            FreePower { base, power } => base.mean_exp_neg().powi(*power as i32),
        }
    }

    /// Closed-form S-transform for the named families, `None` otherwise.
    fn closed_s(&self, w: Complex64) -> Option<(Complex64, Complex64)> {
        use SpectralMeasure::*;
        match self {
            PointMass { x0 } => Some((Complex64::from((-x0).exp()), Complex64::from(0.0))),
            GinibreLimit { gamma } => {
                let d = w + gamma;
                Some((1.0 / d, -1.0 / (d * d)))
            }
            JacobiLimit { alpha_hat, r_hat } => {
                let num = w + alpha_hat + r_hat + 1.0;
                let den = w + alpha_hat + 1.0;
                Some((num / den, -r_hat / (den * den)))
            }
            _ => None,
        }
    }
}

/// Atoms of an `Atomic` measure.
pub fn atoms_of(mu: &SpectralMeasure) -> Option<&[Atom]> {
    match mu {
        SpectralMeasure::Atomic { atoms } => Some(atoms),
        _ => None,
    }
}

/// `M(z)` and its first three derivatives for an atomic measure.
pub fn atomic_m_derivs(atoms: &[Atom], z: Complex64) -> Result<[Complex64; 4], MeasureError> {
    let mut out = [Complex64::from(0.0); 4];
    for a in atoms {
        let e = a.0.exp();
        let d = 1.0 - e * z;
        if d.norm() < 1e-14 {
            return Err(MeasureError::PoleHit(z));
        }
        let r = 1.0 / d;
        let er = e * r;
        out[0] += a.1 * er * z;
        out[1] += a.1 * er * r;
        out[2] += a.1 * 2.0 * er * er * r;
        out[3] += a.1 * 6.0 * er * er * er * r;
    }
    Ok(out)
}

/// `M_{ρ̃}(z)`.
pub fn m_transform(mu: &SpectralMeasure, z: Complex64) -> Result<Complex64, MeasureError> {
    use SpectralMeasure::*;
    match mu {
        Atomic { atoms } => Ok(atomic_m_derivs(atoms, z)?[0]),
        PointMass { x0 } => {
            let e = x0.exp();
            let d = 1.0 - e * z;
            if d.norm() < 1e-14 {
                return Err(MeasureError::PoleHit(z));
            }
            Ok(e * z / d)
        }
        GinibreLimit { .. } | JacobiLimit { .. } => Ok(invert_closed(mu, z)?.0),
        FreePower { .. } => Err(MeasureError::Unsupported("M of a free power is only implicit; use m_inverse")),
    }
}

/// `M′(z)`, from the derivative series for atoms and through the inverse
/// function theorem for the named families.
pub fn m_prime(mu: &SpectralMeasure, z: Complex64) -> Result<Complex64, MeasureError> {
    match mu {
        SpectralMeasure::Atomic { atoms } => Ok(atomic_m_derivs(atoms, z)?[1]),
        SpectralMeasure::PointMass { x0 } => {
            let e = x0.exp();
            let d = 1.0 - e * z;
            Ok(e / (d * d))
        }
        SpectralMeasure::GinibreLimit { .. } | SpectralMeasure::JacobiLimit { .. } => {
            let (w, _) = invert_closed(mu, z)?;
            Ok(1.0 / closed_minv(mu, w).1)
        }
        SpectralMeasure::FreePower { .. } => Err(MeasureError::Unsupported("M′ of a free power")),
    }
}

// M⁻¹(w) = (w/(1+w)) S(w) and its derivative for closed-form families.
fn closed_minv(mu: &SpectralMeasure, w: Complex64) -> (Complex64, Complex64) {
    let (s, ds) = mu.closed_s(w).expect("closed-form family");
    let q = w / (1.0 + w);
    let dq = 1.0 / ((1.0 + w) * (1.0 + w));
    (q * s, dq * s + q * ds)
}

// Solves M⁻¹(w) = z by Newton continuation along the segment 0 → z.
// Returns (w, dM⁻¹/dw at w).
fn invert_closed(mu: &SpectralMeasure, z: Complex64) -> Result<(Complex64, Complex64), MeasureError> {
    if z.norm() == 0.0 {
        let d = closed_minv(mu, Complex64::from(0.0)).1;
        return Ok((Complex64::from(0.0), d));
    }
    let f = |w: Complex64| closed_minv(mu, w);
    continue_root(f, Complex64::from(0.0), Complex64::from(0.0), z).map(|w| (w, f(w).1))
}

type Eval = (Complex64, Complex64);

fn nan_pair() -> Eval {
    (Complex64::new(f64::NAN, f64::NAN), Complex64::new(f64::NAN, f64::NAN))
}

// Moves a target linearly from `from` to `to` in adaptive steps. `advance`
// takes the current root and the old and new targets and returns the new root,
// or `None` to ask for a shorter step.
fn track(
    from: Complex64,
    to: Complex64,
    start: Complex64,
    mut advance: impl FnMut(Complex64, Complex64, Complex64) -> Option<Complex64>,
) -> Result<Complex64, MeasureError> {
    let mut tau = 0.0f64;
    let mut step = 0.25f64;
    let mut z = start;
    while tau < 1.0 {
        let next = (tau + step).min(1.0);
        let t_cur = from + (to - from) * tau;
        let t_next = from + (to - from) * next;
        match advance(z, t_cur, t_next) {
            Some(zn) => {
                z = zn;
                tau = next;
                step = (step * 2.0).min(0.5);
            }
            None => {
                step *= 0.5;
                if step < 1e-12 {
                    return Err(MeasureError::NoConvergence(to));
                }
            }
        }
    }
    Ok(z)
}

// Tangent predictor and Newton corrector in one chart. The step is refused
// when the correction is not small next to the predicted move, which is what
// keeps the tracker from hopping between roots.
fn chart_step(f: &impl Fn(Complex64) -> Eval, v: Complex64, t_next: Complex64) -> Option<Complex64> {
    let (fv, dv) = f(v);
    if !fv.is_finite() || !dv.is_finite() || dv.norm() == 0.0 {
        return None;
    }
    let guess = v + (t_next - fv) / dv;
    let vn = newton(f, guess, t_next)?;
    let moved = (guess - v).norm();
    if (vn - guess).norm() <= 0.3 * moved + 1e-10 * (1.0 + v.norm()) {
        Some(vn)
    } else {
        None
    }
}

// Follows the root of f(w) = target as the target moves from `from` to `to`.
fn continue_root(
    f: impl Fn(Complex64) -> Eval,
    from: Complex64,
    w_start: Complex64,
    to: Complex64,
) -> Result<Complex64, MeasureError> {
    track(from, to, w_start, |w, _, t_next| chart_step(&f, w, t_next))
}

fn newton(f: &impl Fn(Complex64) -> Eval, mut w: Complex64, target: Complex64) -> Option<Complex64> {
    for _ in 0..30 {
        let (v, dv) = f(w);
        if !v.is_finite() || !dv.is_finite() || dv.norm() == 0.0 {
            return None;
        }
        let delta = (v - target) / dv;
        w -= delta;
        if delta.norm() <= NEWTON_TOL * (1.0 + w.norm()) {
            let (v, _) = f(w);
            if (v - target).norm() <= ROUND_TRIP_TOL * (1.0 + target.norm()) {
                return Some(w);
            }
        }
    }
    None
}

// Real solve of M(x) = v on the negative axis for v ∈ (−1, 0).
fn atomic_real_anchor(atoms: &[Atom], v: f64) -> Result<f64, MeasureError> {
    let m = |x: f64| -> f64 { atoms.iter().map(|a| a.1 * a.0.exp() * x / (1.0 - a.0.exp() * x)).sum() };
    let mut lo = -1.0;
    while m(lo) > v {
        lo *= 2.0;
        if lo < -1e300 {
            return Err(MeasureError::NoConvergence(Complex64::from(v + 1.0)));
        }
    }
    let mut hi = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if m(mid) > v {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo) <= 1e-15 * lo.abs() {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// M as a function of z.
fn atomic_f(atoms: &[Atom]) -> impl Fn(Complex64) -> Eval + '_ {
    move |z| match atomic_m_derivs(atoms, z) {
        Ok(d) => (d[0], d[1]),
        Err(_) => nan_pair(),
    }
}

// M as a function of y = 1/z: Σ w eˢ/(y − eˢ), regular at y = 0 where M = −1.
fn atomic_g(atoms: &[Atom]) -> impl Fn(Complex64) -> Eval + '_ {
    move |y| {
        let mut v = Complex64::from(0.0);
        let mut dv = Complex64::from(0.0);
        for a in atoms {
            let e = a.0.exp();
            let d = y - e;
            if d.norm() < 1e-14 {
                return nan_pair();
            }
            v += a.1 * e / d;
            dv -= a.1 * e / (d * d);
        }
        (v, dv)
    }
}

// Root of M in whichever of the z or 1/z charts is better scaled.
fn atomic_chart_step(atoms: &[Atom], z: Complex64, t_next: Complex64) -> Option<Complex64> {
    let z_mid = (-(atoms[0].0 + atoms[atoms.len() - 1].0) / 2.0).exp();
    if z.norm() <= z_mid {
        chart_step(&atomic_f(atoms), z, t_next)
    } else {
        let y = chart_step(&atomic_g(atoms), 1.0 / z, t_next)?;
        if y.norm() == 0.0 {
            None
        } else {
            Some(1.0 / y)
        }
    }
}

fn atomic_continue(atoms: &[Atom], w_from: Complex64, z_start: Complex64, w_to: Complex64) -> Result<Complex64, MeasureError> {
    track(w_from, w_to, z_start, |z, _, t_next| atomic_chart_step(atoms, z, t_next))
}

// Atomic M⁻¹(u − 1) continued from the real anchor u₀ = 1/2 along
// 1/2 → 1/2 + ih → Re(u) + ih → u.
fn atomic_inverse_via(atoms: &[Atom], u: Complex64, h: f64) -> Result<Complex64, MeasureError> {
    let u0 = Complex64::from(0.5);
    let z0 = Complex64::from(atomic_real_anchor(atoms, -0.5)?);
    let path = [u0, Complex64::new(0.5, h), Complex64::new(u.re, h), u];
    let mut z = z0;
    for pair in path.windows(2) {
        if pair[0] != pair[1] {
            z = atomic_continue(atoms, pair[0] - 1.0, z, pair[1] - 1.0)?;
        }
    }
    Ok(z)
}

// Local inverse near the zero (u = 1) or the pole (u = 0) of M⁻¹(u − 1).
fn atomic_local(atoms: &[Atom], u: Complex64) -> Option<Complex64> {
    let w = u - 1.0;
    if (u - 1.0).norm() < LOCAL_RADIUS {
        let c: f64 = atoms.iter().map(|a| a.1 * a.0.exp()).sum();
        return newton(&atomic_f(atoms), w / c, w);
    }
    if u.norm() < LOCAL_RADIUS {
        let c: f64 = atoms.iter().map(|a| a.1 * (-a.0).exp()).sum();
        // g(y) ≈ −1 − c y near y = 0
        let y = newton(&atomic_g(atoms), -(w + 1.0) / c, w)?;
        return if y.norm() == 0.0 { None } else { Some(1.0 / y) };
    }
    None
}

/// `M⁻¹(u − 1)` on the branch that is real and negative for `u ∈ (0, 1)`.
pub fn m_inverse(mu: &SpectralMeasure, u: Complex64, seed: Option<BranchSeed>) -> Result<Complex64, MeasureError> {
    if !u.is_finite() {
        return Err(MeasureError::DomainError(format!("non-finite argument {u}")));
    }
    if u.norm() < 1e-14 {
        return Err(MeasureError::DomainError("u = 0 is the pole of M⁻¹(u − 1)".into()));
    }
    let w = u - 1.0;
    use SpectralMeasure::*;
    match mu {
        PointMass { .. } | GinibreLimit { .. } | JacobiLimit { .. } => Ok(closed_minv(mu, w).0),
        FreePower { base, power } => {
            let s = s_transform(base, w)?;
            Ok(w / (1.0 + w) * s.powi(*power as i32))
        }
        Atomic { atoms } => {
            if let Some(seed) = seed {
                return atomic_continue(atoms, seed.anchor_u - 1.0, seed.anchor_value, w);
            }
            if u.im == 0.0 && u.re > 0.0 && u.re < 1.0 {
                let x = atomic_real_anchor(atoms, w.re)?;
                return Ok(newton(&atomic_f(atoms), Complex64::from(x), w).unwrap_or(Complex64::from(x)));
            }
            if let Some(z) = atomic_local(atoms, u) {
                return Ok(z);
            }
            if u.im.abs() >= 0.1 {
                let h = u.im.signum() * u.im.abs().max(0.5);
                return atomic_inverse_via(atoms, u, h);
            }
            // Close to the real axis: go around both ways and insist they agree.
            let up = atomic_inverse_via(atoms, u, 0.5)?;
            let down = atomic_inverse_via(atoms, u, -0.5)?;
            let diff = (up - down).norm();
            if diff > BRANCH_TOL * (1.0 + up.norm()) {
                return Err(MeasureError::BranchAmbiguity { u, diff });
            }
            Ok(if u.im < 0.0 { down } else { up })
        }
    }
}

/// `M⁻¹(u − 1)` at a sequence of nearby points, each continued from the
/// previous one. The first point is solved from the real anchor.
pub fn m_inverse_along(mu: &SpectralMeasure, us: &[Complex64]) -> Result<Vec<Complex64>, MeasureError> {
    if atoms_of(mu).is_none() {
        return us.iter().map(|&u| m_inverse(mu, u, None)).collect();
    }
    let mut out = Vec::with_capacity(us.len());
    let mut seed: Option<BranchSeed> = None;
    for &u in us {
        let z = m_inverse(mu, u, seed)?;
        seed = Some(BranchSeed { anchor_u: u, anchor_value: z });
        out.push(z);
    }
    // A closed loop must come back to where it started.
    if us.len() > 2 {
        let back = m_inverse(mu, us[0], seed)?;
        let diff = (back - out[0]).norm();
        if diff > BRANCH_TOL * (1.0 + out[0].norm()) {
            return Err(MeasureError::BranchAmbiguity { u: us[0], diff });
        }
    }
    Ok(out)
}

/// `S(w) = ((1 + w)/w) M⁻¹(w)`, with the removable points `w = 0` and
/// `w = −1` handled by a small Cauchy mean.
pub fn s_transform(mu: &SpectralMeasure, w: Complex64) -> Result<Complex64, MeasureError> {
    if let Some((s, _)) = mu.closed_s(w) {
        return Ok(s);
    }
    if let SpectralMeasure::FreePower { base, power } = mu {
        return Ok(s_transform(base, w)?.powi(*power as i32));
    }
    let near = w.norm() < REMOVABLE_RADIUS / 2.0 || (w + 1.0).norm() < REMOVABLE_RADIUS / 2.0;
    if near {
        let mut acc = Complex64::from(0.0);
        for j in 0..REMOVABLE_NODES {
            let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.25) / REMOVABLE_NODES as f64;
            let p = w + Complex64::from_polar(REMOVABLE_RADIUS, th);
            acc += s_raw(mu, p)?;
        }
        return Ok(acc / REMOVABLE_NODES as f64);
    }
    s_raw(mu, w)
}

fn s_raw(mu: &SpectralMeasure, w: Complex64) -> Result<Complex64, MeasureError> {
    let z = m_inverse(mu, w + 1.0, None)?;
    Ok((1.0 + w) / w * z)
}

/// `S′(w)` for any supported measure.
pub fn s_prime(mu: &SpectralMeasure, w: Complex64) -> Result<Complex64, MeasureError> {
    if let Some((_, ds)) = mu.closed_s(w) {
        return Ok(ds);
    }
    match mu {
        SpectralMeasure::FreePower { base, power } => {
            let p = *power as i32;
            Ok(p as f64 * s_transform(base, w)?.powi(p - 1) * s_prime(base, w)?)
        }
        SpectralMeasure::Atomic { atoms } => {
            if w.norm() < REMOVABLE_RADIUS / 2.0 || (w + 1.0).norm() < REMOVABLE_RADIUS / 2.0 {
                // derivative by the Cauchy formula on the same small circle
                let mut acc = Complex64::from(0.0);
                for j in 0..REMOVABLE_NODES {
                    let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.25) / REMOVABLE_NODES as f64;
                    let e = Complex64::from_polar(1.0, th);
                    acc += s_raw(mu, w + e * REMOVABLE_RADIUS)? / (e * REMOVABLE_RADIUS);
                }
                return Ok(acc / REMOVABLE_NODES as f64);
            }
            let z = m_inverse(mu, w + 1.0, None)?;
            let mp = atomic_m_derivs(atoms, z)?[1];
            Ok(-z / (w * w) + (1.0 + w) / w / mp)
        }
        _ => unreachable!("closed forms handled above"),
    }
}

/// `Ψ̃(c) = c log S(c − 1) + ∫ log(c/S(c − 1) + (1 − c) eˢ) dρ(s)`.
pub fn psi_tilde(mu: &SpectralMeasure, c: Complex64) -> Result<Complex64, MeasureError> {
    let atoms = atoms_of(mu).ok_or(MeasureError::Unsupported("psi_tilde needs an atomic measure"))?;
    if c.norm() == 0.0 {
        return Ok(Complex64::from(atoms.iter().map(|a| a.1 * a.0).sum::<f64>()));
    }
    let s = s_transform(mu, c - 1.0)?;
    let q = c / s;
    let integral: Complex64 = atoms.iter().map(|a| a.1 * (q + (1.0 - c) * a.0.exp()).ln()).sum();
    Ok(c * s.ln() + integral)
}

/// Boundary data of a free multiplicative product at `x = e^{−t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductBoundary {
    /// `lim M(e^{−t} + i0)`: principal value plus `iπ p(t)`.
    pub w: Complex64,
    /// `d/dt` of `w`.
    pub dw_dt: Complex64,
    /// Subordination values `ω_i = M_i⁻¹(w)`, one per factor.
    pub omegas: Vec<Complex64>,
    /// `M_i′(ω_i)`.
    pub m_primes: Vec<Complex64>,
}

/// The factors of a product measure as a flat list.
pub fn factor_list(mu: &SpectralMeasure) -> Vec<SpectralMeasure> {
    match mu {
        SpectralMeasure::FreePower { base, power } => vec![(**base).clone(); *power],
        other => vec![other.clone()],
    }
}

/// Upper boundary values of the free product of `factors` at `e^{−t}`.
///
/// Identical atomic factors are solved in the subordination variable `ζ`,
/// where everything is explicit; products of closed-form families are solved
/// in `w` directly.
pub fn product_boundary(factors: &[SpectralMeasure], t: f64) -> Result<ProductBoundary, MeasureError> {
    if factors.is_empty() {
        return Err(MeasureError::DomainError("empty factor list".into()));
    }
    let x = (-t).exp();
    let first = &factors[0];
    let identical = factors.iter().all(|f| f == first);
    if identical {
        if let Some(atoms) = atoms_of(first) {
            return atomic_power_boundary(atoms, factors.len(), x);
        }
    }
    if factors.iter().all(|f| f.closed_s(Complex64::from(0.0)).is_some()) {
        return closed_product_boundary(factors, x);
    }
    Err(MeasureError::Unsupported("product boundary needs identical atomic factors or closed-form families"))
}

// Path in the z plane from near 0 to x + i0, approached from above.
fn boundary_path(x: f64) -> Vec<Complex64> {
    let y = x.max(0.5);
    let mut p = vec![Complex64::new(0.0, 1e-3 * y), Complex64::new(0.0, y), Complex64::new(x, y)];
    let mut d = y;
    while d > 1e-10 {
        d *= 0.1;
        p.push(Complex64::new(x, d));
    }
    p.push(Complex64::from(x));
    p
}

// Continues along `path`. At a support edge the root is double and the last
// few steps onto the real axis can fail; the value just above the axis is
// then used instead.
fn follow_to_axis(f: &impl Fn(Complex64) -> Eval, path: &[Complex64], start: Complex64) -> Result<Complex64, MeasureError> {
    let mut v = start;
    for pair in path.windows(2) {
        match continue_root(f, pair[0], v, pair[1]) {
            Ok(next) => v = next,
            Err(_) if pair[1].im < 1e-6 => break,
            Err(e) => return Err(e),
        }
    }
    Ok(v)
}

fn atomic_power_boundary(atoms: &[Atom], p: usize, x: f64) -> Result<ProductBoundary, MeasureError> {
    let pf = p as f64;
    // F(ζ) = (m/(1+m))^{1−p} ζ^p with m = M(ζ); log-derivative is explicit.
    let f = |zeta: Complex64| -> (Complex64, Complex64) {
        match atomic_m_derivs(atoms, zeta) {
            Ok(d) => {
                let (m, dm) = (d[0], d[1]);
                let r = m / (1.0 + m);
                let val = r.powi(1 - p as i32) * zeta.powi(p as i32);
                let dlog = (1.0 - pf) * dm / (m * (1.0 + m)) + pf / zeta;
                (val, val * dlog)
            }
            Err(_) => (Complex64::new(f64::NAN, f64::NAN), Complex64::new(f64::NAN, f64::NAN)),
        }
    };
    let path = boundary_path(x);
    let c = atoms.iter().map(|a| a.1 * a.0.exp()).sum::<f64>();
    let mut zeta = path[0] * c.powi(p as i32 - 1);
    zeta = newton(&f, zeta, path[0]).ok_or(MeasureError::NoConvergence(path[0]))?;
    zeta = follow_to_axis(&f, &path, zeta)?;
    let d = atomic_m_derivs(atoms, zeta)?;
    let dzeta_dt = -x / f(zeta).1;
    Ok(ProductBoundary {
        w: d[0],
        dw_dt: d[1] * dzeta_dt,
        omegas: vec![zeta; p],
        m_primes: vec![d[1]; p],
    })
}

fn closed_product_boundary(factors: &[SpectralMeasure], x: f64) -> Result<ProductBoundary, MeasureError> {
    let g = |w: Complex64| -> (Complex64, Complex64) {
        let q = w / (1.0 + w);
        let dq = 1.0 / ((1.0 + w) * (1.0 + w));
        let mut s = Complex64::from(1.0);
        let mut dlog = Complex64::from(0.0);
        for f in factors {
            let (si, dsi) = f.closed_s(w).expect("closed-form factor");
            s *= si;
            dlog += dsi / si;
        }
        (q * s, dq * s + q * s * dlog)
    };
    let path = boundary_path(x);
    let s0 = g(Complex64::from(0.0)).1;
    let mut w = newton(&g, path[0] / s0, path[0]).ok_or(MeasureError::NoConvergence(path[0]))?;
    w = follow_to_axis(&g, &path, w)?;
    let dw_dt = -x / g(w).1;
    let mut omegas = Vec::with_capacity(factors.len());
    let mut m_primes = Vec::with_capacity(factors.len());
    for f in factors {
        let (om, dminv) = closed_minv(f, w);
        omegas.push(om);
        m_primes.push(1.0 / dminv);
    }
    Ok(ProductBoundary { w, dw_dt, omegas, m_primes })
}

fn check_density_input(mu: &SpectralMeasure) -> Result<(), MeasureError> {
    match mu {
        SpectralMeasure::Atomic { .. } | SpectralMeasure::PointMass { .. } => {
            Err(MeasureError::Unsupported("an atomic measure has no density; wrap it in a free power"))
        }
        SpectralMeasure::FreePower { base, power } if *power == 1 && atoms_of(base).is_some() => {
            Err(MeasureError::Unsupported("a single atomic factor has no density"))
        }
        _ => Ok(()),
    }
}

/// Density `p(t)` of `dρ` at the log-eigenvalue `t`.
pub fn density_from_boundary(mu: &SpectralMeasure, t: f64) -> Result<f64, MeasureError> {
    check_density_input(mu)?;
    let b = product_boundary(&factor_list(mu), t)?;
    let p = b.w.im / std::f64::consts::PI;
    Ok(if p.abs() < 1e-10 { 0.0 } else { p })
}

/// Principal-value `M(e^{−t})` on (or off) the support.
pub fn pv_m_on_support(mu: &SpectralMeasure, t: f64) -> Result<f64, MeasureError> {
    if let Some(atoms) = atoms_of(mu) {
        // Plain sum, skipping atoms at the singular point.
        let x = (-t).exp();
        return Ok(atoms
            .iter()
            .filter(|a| (a.0 - t).abs() > 1e-12)
            .map(|a| a.1 * a.0.exp() * x / (1.0 - a.0.exp() * x))
            .sum());
    }
    Ok(product_boundary(&factor_list(mu), t)?.w.re)
}

/// `lim M_i⁻¹(M(e^{−t} ± i0))` for `mu_prod` a free power of `mu_i`.
pub fn subordination_boundary(
    mu_i: &SpectralMeasure,
    mu_prod: &SpectralMeasure,
    t: f64,
    sign: i32,
) -> Result<Complex64, MeasureError> {
    let factors = factor_list(mu_prod);
    if factors.iter().any(|f| f != mu_i) {
        return Err(MeasureError::Unsupported("mu_prod must be a free power of mu_i"));
    }
    let om = product_boundary(&factors, t)?.omegas[0];
    Ok(if sign < 0 { om.conj() } else { om })
}

/// Endpoints of the support of the density of `mu`, located by scanning
/// `density_from_boundary` on `[lo, hi]` and bisecting the sign changes.
pub fn support_edges(mu: &SpectralMeasure, lo: f64, hi: f64, grid: usize) -> Result<(f64, f64), MeasureError> {
    let ts: Vec<f64> = (0..=grid).map(|j| lo + (hi - lo) * j as f64 / grid as f64).collect();
    let ps: Vec<f64> = ts.iter().map(|&t| density_from_boundary(mu, t)).collect::<Result<_, _>>()?;
    let first = ps.iter().position(|&p| p > 0.0).ok_or(MeasureError::DomainError("no support in range".into()))?;
    let last = ps.iter().rposition(|&p| p > 0.0).unwrap();
    let refine = |mut a: f64, mut b: f64, rising: bool| -> Result<f64, MeasureError> {
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            let inside = density_from_boundary(mu, m)? > 0.0;
            if inside == rising {
                b = m;
            } else {
                a = m;
            }
        }
        Ok(0.5 * (a + b))
    };
    let left = if first == 0 { lo } else { refine(ts[first - 1], ts[first], true)? };
    let right = if last == grid { hi } else { refine(ts[last], ts[last + 1], false)? };
    Ok((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn two_atom() -> SpectralMeasure {
        SpectralMeasure::atomic(&[0.0, 4f64.ln()], &[0.5, 0.5]).unwrap()
    }

    fn uniform_atoms(n: usize) -> SpectralMeasure {
        let pts: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        SpectralMeasure::empirical(&pts).unwrap()
    }

    #[test]
    fn m_transform_examples() {
        let pm = SpectralMeasure::PointMass { x0: 0.0 };
        assert!((m_transform(&pm, c(0.5, 0.0)).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
        assert!((m_transform(&two_atom(), c(-1.0, 0.0)).unwrap() - c(-0.65, 0.0)).norm() < 1e-15);
        assert_eq!(m_transform(&two_atom(), c(0.0, 0.0)).unwrap(), c(0.0, 0.0));
        assert!(matches!(m_transform(&two_atom(), c(1.0, 0.0)), Err(MeasureError::PoleHit(_))));
        let fp = SpectralMeasure::free_power(two_atom(), 2).unwrap();
        assert!(matches!(m_transform(&fp, c(-1.0, 0.0)), Err(MeasureError::Unsupported(_))));
    }

    #[test]
    fn m_inverse_examples() {
        let pm = SpectralMeasure::PointMass { x0: 0.0 };
        assert!((m_inverse(&pm, c(0.5, 0.0), None).unwrap() - c(-1.0, 0.0)).norm() < 1e-14);
        let g = SpectralMeasure::GinibreLimit { gamma: 2.0 };
        assert!((m_inverse(&g, c(0.5, 0.0), None).unwrap() - c(-2.0 / 3.0, 0.0)).norm() < 1e-14);
        // The pole sits at u = 0 and the zero at u = 1.
        let a = two_atom();
        let near0 = m_inverse(&a, c(1e-6, 0.0), None).unwrap();
        let near1 = m_inverse(&a, c(1.0 - 1e-6, 0.0), None).unwrap();
        assert!(near0.re < -1e4, "{near0}");
        assert!(near1.norm() < 1e-5, "{near1}");
    }

    #[test]
    fn atomic_inverse_is_real_negative_on_unit_interval() {
        let a = uniform_atoms(7);
        for j in 1..20 {
            let u = j as f64 / 20.0;
            let z = m_inverse(&a, c(u, 0.0), None).unwrap();
            assert!(z.im == 0.0 && z.re < 0.0);
            assert!((m_transform(&a, z).unwrap() - c(u - 1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trip_on_contour_nodes() {
        use crate::contour::Contour;
        for mu in [two_atom(), uniform_atoms(9), SpectralMeasure::GinibreLimit { gamma: 2.0 }] {
            let nodes: Vec<Complex64> = Contour::stadium(0.3).nodes(64).iter().map(|q| q.z).collect();
            let zs = m_inverse_along(&mu, &nodes).unwrap();
            for (u, z) in nodes.iter().zip(&zs) {
                let back = m_transform(&mu, *z).unwrap();
                assert!((back - (u - 1.0)).norm() < 1e-10, "{mu:?} {u} {back}");
            }
            // Unseeded solves land on the same branch.
            for (u, z) in nodes.iter().zip(&zs).step_by(7) {
                let direct = m_inverse(&mu, *u, None).unwrap();
                assert!((direct - z).norm() < 1e-9, "{u}: {direct} vs {z}");
            }
        }
    }

    #[test]
    fn s_transform_examples_and_endpoints() {
        let pm = SpectralMeasure::PointMass { x0: 0.0 };
        assert!((s_transform(&pm, c(-0.3, 0.1)).unwrap() - c(1.0, 0.0)).norm() < 1e-15);
        let g = SpectralMeasure::GinibreLimit { gamma: 2.0 };
        assert!((s_transform(&g, c(0.0, 0.0)).unwrap() - c(0.5, 0.0)).norm() < 1e-15);
        let j = SpectralMeasure::JacobiLimit { alpha_hat: 1.0, r_hat: 1.0 };
        assert!((s_transform(&j, c(0.0, 0.0)).unwrap() - c(1.5, 0.0)).norm() < 1e-15);
        for mu in [two_atom(), uniform_atoms(11)] {
            let s0 = s_transform(&mu, c(0.0, 0.0)).unwrap();
            let s1 = s_transform(&mu, c(-1.0, 0.0)).unwrap();
            assert!((s0 * mu.mean_exp() - 1.0).norm() < 1e-10, "{s0}");
            assert!((s1 - mu.mean_exp_neg()).norm() < 1e-10, "{s1}");
        }
    }

    #[test]
    fn s_is_positive_and_decreasing_on_interval() {
        let mu = two_atom();
        let mut prev = f64::INFINITY;
        for j in 0..=20 {
            let w = -1.0 + j as f64 / 20.0;
            let s = s_transform(&mu, c(w, 0.0)).unwrap();
            assert!(s.re > 0.0 && s.im.abs() < 1e-12);
            assert!(s.re < prev);
            prev = s.re;
        }
    }

    #[test]
    fn s_prime_matches_difference_quotient() {
        for mu in [two_atom(), SpectralMeasure::JacobiLimit { alpha_hat: 2.0, r_hat: 1.5 }] {
            for w in [c(-0.5, 0.0), c(-0.2, 0.1), c(-0.005, 0.0)] {
                let h = 1e-5;
                let fd = (s_transform(&mu, w + h).unwrap() - s_transform(&mu, w - h).unwrap()) / (2.0 * h);
                let an = s_prime(&mu, w).unwrap();
                assert!((fd - an).norm() < 1e-7 * (1.0 + an.norm()), "{w}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn psi_tilde_examples() {
        let pm = SpectralMeasure::atomic(&[0.0], &[1.0]).unwrap();
        assert!(psi_tilde(&pm, c(0.5, 0.0)).unwrap().norm() < 1e-12);
        let mu = two_atom();
        let at0 = psi_tilde(&mu, c(0.0, 0.0)).unwrap();
        assert!((at0.re - 0.5 * 4f64.ln()).abs() < 1e-14);
        let near0 = psi_tilde(&mu, c(1e-7, 0.0)).unwrap();
        assert!((near0 - at0).norm() < 1e-5);
    }

    #[test]
    fn psi_tilde_matches_definition_by_quadrature() {
        // Ψ̃(c) = ∫ log(c/S + (1−c)eˢ) dρ + c log S with S from an
        // independent real bisection of M.
        let mu = uniform_atoms(9);
        let SpectralMeasure::Atomic { atoms } = &mu else { unreachable!() };
        let cc = 0.5;
        let v = cc - 1.0;
        let m = |x: f64| -> f64 { atoms.iter().map(|a| a.1 * a.0.exp() * x / (1.0 - a.0.exp() * x)).sum() };
        let (mut lo, mut hi) = (-1e6, 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if m(mid) > v {
                hi = mid
            } else {
                lo = mid
            }
        }
        let z = 0.5 * (lo + hi);
        let s = (1.0 + v) / v * z;
        let direct: f64 = cc * s.ln() + atoms.iter().map(|a| a.1 * (cc / s + (1.0 - cc) * a.0.exp()).ln()).sum::<f64>();
        let got = psi_tilde(&mu, c(cc, 0.0)).unwrap();
        assert!((got.re - direct).abs() < 1e-10 && got.im.abs() < 1e-12);
    }

    #[test]
    fn marchenko_pastur_density() {
        let mu = SpectralMeasure::free_power(SpectralMeasure::GinibreLimit { gamma: 2.0 }, 1).unwrap();
        let p = density_from_boundary(&mu, 2f64.ln()).unwrap();
        assert!((p - 2.0 * 7f64.sqrt() / (4.0 * PI)).abs() < 1e-10, "{p}");
        assert_eq!(density_from_boundary(&mu, 5.0).unwrap(), 0.0);
        assert_eq!(density_from_boundary(&mu, -5.0).unwrap(), 0.0);
        // Outside the support the principal value is the plain transform.
        let g = SpectralMeasure::GinibreLimit { gamma: 2.0 };
        let pv = pv_m_on_support(&mu, 3.0).unwrap();
        let plain = m_transform(&g, c((-3.0f64).exp(), 0.0)).unwrap();
        assert!((pv - plain.re).abs() < 1e-10);
    }

    // ∫ p over the support by the substitution t = a + (b − a)(1 − cos θ)/2.
    fn total_mass(mu: &SpectralMeasure, a: f64, b: f64, n: usize) -> f64 {
        let h = PI / n as f64;
        (0..n)
            .map(|j| {
                let th = (j as f64 + 0.5) * h;
                let t = a + (b - a) * (1.0 - th.cos()) / 2.0;
                density_from_boundary(mu, t).unwrap() * (b - a) * th.sin() / 2.0 * h
            })
            .sum()
    }

    #[test]
    fn densities_integrate_to_one() {
        let g = SpectralMeasure::free_power(SpectralMeasure::GinibreLimit { gamma: 2.0 }, 1).unwrap();
        let a = 2.0 * (2f64.sqrt() - 1.0).ln();
        let b = 2.0 * (2f64.sqrt() + 1.0).ln();
        assert!((total_mass(&g, a, b, 400) - 1.0).abs() < 1e-6);
        let fp = SpectralMeasure::free_power(two_atom(), 2).unwrap();
        let (lo, hi) = support_edges(&fp, -1.0, 4.0, 200).unwrap();
        let mass = total_mass(&fp, lo, hi, 800);
        assert!((mass - 1.0).abs() < 1e-4, "{mass} on [{lo}, {hi}]");
        // first moment of the product measure is additive over factors
        let n = 800;
        let h = PI / n as f64;
        let m1: f64 = (0..n)
            .map(|j| {
                let th = (j as f64 + 0.5) * h;
                let t = lo + (hi - lo) * (1.0 - th.cos()) / 2.0;
                t * density_from_boundary(&fp, t).unwrap() * (hi - lo) * th.sin() / 2.0 * h
            })
            .sum();
        assert!((m1 - 4f64.ln()).abs() < 1e-4, "{m1}");
    }

    #[test]
    fn subordination_examples() {
        let a = two_atom();
        let fp1 = SpectralMeasure::free_power(a.clone(), 1).unwrap();
        let t = 0.7;
        let om = subordination_boundary(&a, &fp1, t, 1).unwrap();
        assert!((om - c((-t).exp(), 0.0)).norm() < 1e-12);
        let fp2 = SpectralMeasure::free_power(a.clone(), 2).unwrap();
        let up = subordination_boundary(&a, &fp2, t, 1).unwrap();
        let down = subordination_boundary(&a, &fp2, t, -1).unwrap();
        assert_eq!(down, up.conj());
        let outside = subordination_boundary(&a, &fp2, 6.0, 1).unwrap();
        assert!(outside.im.abs() < 1e-9);
    }

    #[test]
    fn product_boundary_matches_closed_form_ginibre_square() {
        // Free square of the Ginibre law: S = 1/(w+γ)², solved in w directly
        // versus a real-axis check of M⁻¹(w) = x.
        let g = SpectralMeasure::GinibreLimit { gamma: 3.0 };
        let b = product_boundary(&[g.clone(), g.clone()], 1.0).unwrap();
        let w = b.w;
        let resid = w / (1.0 + w) / ((w + 3.0) * (w + 3.0)) - (-1.0f64).exp();
        assert!(resid.norm() < 1e-12 && w.im > 0.0);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = two_atom();
        let back = SpectralMeasure::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        let j = SpectralMeasure::from_json(r#"{"kind":"jacobi_limit","alpha_hat":1.0,"r_hat":1.0}"#).unwrap();
        assert_eq!(j, SpectralMeasure::JacobiLimit { alpha_hat: 1.0, r_hat: 1.0 });
        assert!(SpectralMeasure::from_json(r#"{"kind":"ginibre_limit","gamma":0.5}"#).is_err());
        assert!(SpectralMeasure::from_json(r#"{"kind":"ginibre_limit","gamma":2,"x":1}"#).is_err());
        assert!(SpectralMeasure::atomic(&[0.0, 1.0], &[0.5, 0.4]).is_err());
        let nested = SpectralMeasure::FreePower {
            base: Box::new(SpectralMeasure::free_power(two_atom(), 2).unwrap()),
            power: 2,
        };
        assert!(nested.validate().is_err());
    }

    proptest! {
        #[test]
        fn m_negative_axis_is_increasing_in_range(x1 in -50.0f64..-1e-3, dx in 1e-4f64..1.0) {
            let mu = uniform_atoms(5);
            let a = m_transform(&mu, c(x1, 0.0)).unwrap().re;
            let b = m_transform(&mu, c((x1 + dx).min(-1e-6), 0.0)).unwrap().re;
            prop_assert!(a > -1.0 && a < 0.0);
            prop_assert!(b >= a);
        }

        #[test]
        fn s_multiplicative_over_powers(w in -0.95f64..-0.05, p in 1usize..4) {
            let base = two_atom();
            let fp = SpectralMeasure::free_power(base.clone(), p).unwrap();
            let lhs = s_transform(&fp, c(w, 0.0)).unwrap();
            let rhs = s_transform(&base, c(w, 0.0)).unwrap().powi(p as i32);
            prop_assert!((lhs - rhs).norm() < 1e-10);
        }

        #[test]
        fn named_m_round_trip(re in -3.0f64..-0.01, im in -1.0f64..1.0) {
            for mu in [SpectralMeasure::GinibreLimit { gamma: 2.0 }, SpectralMeasure::JacobiLimit { alpha_hat: 1.0, r_hat: 2.0 }] {
                let z = c(re, im);
                let m = m_transform(&mu, z).unwrap();
                let back = m_inverse(&mu, m + 1.0, None).unwrap();
                prop_assert!((back - z).norm() < 1e-9 * (1.0 + z.norm()));
            }
        }
    }
}
