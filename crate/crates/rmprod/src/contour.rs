//! Closed contours and trapezoid quadrature for `(1/2πi) ∮ f(z) dz`.
//!
//! Circles and ellipses use the plain periodic trapezoid rule. The stadium
//! around `[0, 1]` is only C¹ where its arcs meet the straight sides, so each
//! of its four pieces gets its own graded parameter whose derivative vanishes
//! to sixth order at the piece ends.

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Reported when doubling the node count stops before the tolerance is met.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("quadrature not converged after {nodes} nodes (last change {last_change:e})")]
pub struct NotConverged {
    pub nodes: usize,
    pub last_change: f64,
}

/// Shape of a positively oriented closed contour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Contour<T> {
    /// Boundary of the `eps`-neighbourhood of `[0, 1]`.
    Stadium { eps: T },
    Circle { center: Complex<T>, radius: T },
    /// Axis-aligned ellipse with semi-axes `a` (real) and `b` (imaginary).
    Ellipse { center: Complex<T>, a: T, b: T },
}

/// One quadrature node: `Σ w·f(z)` approximates `(1/2πi) ∮ f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadNode<T> {
    pub z: Complex<T>,
    pub w: Complex<T>,
}

// Graded map on [0, 1] with g' ∝ sin⁶(πτ).
fn graded<T: Real>(tau: T) -> (T, T) {
    let pi = T::PI();
    let s = |k: f64| (T::lit(k) * pi * tau).sin();
    let g = tau - T::lit(3.0) / (T::lit(4.0) * pi) * s(2.0) + T::lit(3.0) / (T::lit(20.0) * pi) * s(4.0)
        - T::one() / (T::lit(60.0) * pi) * s(6.0);
    let sp = (pi * tau).sin();
    let dg = T::lit(16.0 / 5.0) * sp.powi(6);
    (g, dg)
}

impl<T: Real> Contour<T> {
    pub fn stadium(eps: T) -> Self {
        Contour::Stadium { eps }
    }

    pub fn circle(center: Complex<T>, radius: T) -> Self {
        Contour::Circle { center, radius }
    }

    /// Whether `z` lies strictly inside the contour.
    pub fn encloses(&self, z: Complex<T>) -> bool {
        match *self {
            Contour::Stadium { eps } => {
                let x = z.re.max(T::zero()).min(T::one());
                (z - Complex::new(x, T::zero())).norm() < eps
            }
            Contour::Circle { center, radius } => (z - center).norm() < radius,
            Contour::Ellipse { center, a, b } => {
                let d = z - center;
                (d.re / a).powi(2) + (d.im / b).powi(2) < T::one()
            }
        }
    }

    /// Short human readable description, used in prediction records.
    pub fn describe(&self, nodes: usize) -> String {
        match *self {
            Contour::Stadium { eps } => format!("stadium(eps={eps}) nodes={nodes}"),
            Contour::Circle { center, radius } => {
                format!("circle(center={}{:+}i, r={radius}) nodes={nodes}", center.re, center.im)
            }
            Contour::Ellipse { center, a, b } => {
                format!("ellipse(center={}{:+}i, a={a}, b={b}) nodes={nodes}", center.re, center.im)
            }
        }
    }

    /// `n` nodes, ordered along the contour, rotated by a quarter of the
    /// node spacing so that no node sits on the real axis of symmetric shapes.
    pub fn nodes(&self, n: usize) -> Vec<QuadNode<T>> {
        let i2pi = Complex::new(T::zero(), T::lit(2.0) * T::PI());
        let quarter = T::lit(0.25);
        match *self {
            Contour::Circle { center, radius } => (0..n)
                .map(|j| {
                    let h = T::lit(2.0) * T::PI() / T::of_usize(n);
                    let th = (T::of_usize(j) + quarter) * h;
                    let e = Complex::new(th.cos(), th.sin());
                    let z = center + e * radius;
                    let dz = Complex::new(T::zero(), radius) * e;
                    QuadNode { z, w: dz * h / i2pi }
                })
                .collect(),
            Contour::Ellipse { center, a, b } => (0..n)
                .map(|j| {
                    let h = T::lit(2.0) * T::PI() / T::of_usize(n);
                    let th = (T::of_usize(j) + quarter) * h;
                    let z = center + Complex::new(a * th.cos(), b * th.sin());
                    let dz = Complex::new(-a * th.sin(), b * th.cos());
                    QuadNode { z, w: dz * h / i2pi }
                })
                .collect(),
            Contour::Stadium { eps } => {
                // Nodes are shared between the pieces in proportion to length.
                let arc = (eps * T::PI()).to_f64_lossy();
                let total = 2.0 + 2.0 * arc;
                let n_side = ((n as f64 / total).round() as usize).max(4);
                let n_arc = ((n as f64 * arc / total).round() as usize).max(4);
                let mut out = Vec::with_capacity(2 * (n_side + n_arc));
                let one = T::one();
                let zero = T::zero();
                for piece in 0..4 {
                    let per = if piece % 2 == 0 { n_side } else { n_arc };
                    let h = T::one() / T::of_usize(per);
                    for j in 0..per {
                        let tau = (T::of_usize(j) + quarter) * h;
                        let (g, dg) = graded(tau);
                        let (z, dz) = match piece {
                            0 => (Complex::new(g, -eps), Complex::new(one, zero)),
                            1 => {
                                let th = -T::FRAC_PI_2() + T::PI() * g;
                                let e = Complex::new(th.cos(), th.sin());
                                (
                                    Complex::new(one, zero) + e * eps,
                                    Complex::new(zero, eps * T::PI()) * e,
                                )
                            }
                            2 => (Complex::new(one - g, eps), Complex::new(-one, zero)),
                            _ => {
                                let th = T::FRAC_PI_2() + T::PI() * g;
                                let e = Complex::new(th.cos(), th.sin());
                                (e * eps, Complex::new(zero, eps * T::PI()) * e)
                            }
                        };
                        out.push(QuadNode { z, w: dz * dg * h / i2pi });
                    }
                }
                out
            }
        }
    }
}

/// Node-doubling schedule and stopping rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refinement {
    pub start: usize,
    pub max: usize,
    /// Stop when `|I_2n − I_n| ≤ rel_tol · max(|I_2n|, 1)`.
    pub rel_tol: f64,
}

impl Default for Refinement {
    fn default() -> Self {
        Refinement { start: 64, max: 4096, rel_tol: 1e-9 }
    }
}

/// Converged value with the last observed change as its error indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Converged<T> {
    pub value: Complex<T>,
    pub error: T,
    pub nodes: usize,
}

/// Evaluates `approx(n)` for doubling `n` until two successive values agree.
pub fn refine<T, E, F>(policy: Refinement, mut approx: F) -> Result<Converged<T>, E>
where
    T: Real,
    E: From<NotConverged>,
    F: FnMut(usize) -> Result<Complex<T>, E>,
{
    let mut n = policy.start;
    let mut prev = approx(n)?;
    let mut change = f64::INFINITY;
    while n < policy.max {
        n *= 2;
        let cur = approx(n)?;
        let d = (cur - prev).norm();
        change = d.to_f64_lossy();
        if change <= policy.rel_tol * cur.norm().to_f64_lossy().max(1.0) {
            return Ok(Converged { value: cur, error: d, nodes: n });
        }
        prev = cur;
    }
    Err(NotConverged { nodes: n, last_change: change }.into())
}

/// `(1/2πi) ∮ f` on one contour with the default schedule.
pub fn integrate<T, E, F>(contour: &Contour<T>, policy: Refinement, mut f: F) -> Result<Converged<T>, E>
where
    T: Real,
    E: From<NotConverged>,
    F: FnMut(Complex<T>) -> Result<Complex<T>, E>,
{
    refine(policy, |n| {
        let mut acc = Complex::new(T::zero(), T::zero());
        for q in contour.nodes(n) {
            acc = acc + f(q.z)? * q.w;
        }
        Ok(acc)
    })
}
