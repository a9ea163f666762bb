//! Complex arithmetic and dense matrices over MPFR floats.
//!
//! The system MPFR has no MPC companion, so complex numbers are a plain pair
//! of `rug::Float`s. Everything here works in place where it matters because
//! MPFR allocation dominates small operations.

use num_complex::Complex64;
use rug::float::Special;
use rug::ops::NegAssign;
use rug::{Assign, Float};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BigError {
    #[error("one-sided Jacobi did not converge in {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },
    #[error("matrix is exactly singular at {prec} bits")]
    Singular { prec: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigComplex {
    pub re: Float,
    pub im: Float,
}

impl BigComplex {
    pub fn zero(prec: u32) -> Self {
        BigComplex { re: Float::new(prec), im: Float::new(prec) }
    }

    pub fn one(prec: u32) -> Self {
        BigComplex { re: Float::with_val(prec, 1), im: Float::new(prec) }
    }

    pub fn from_c64(prec: u32, z: Complex64) -> Self {
        BigComplex { re: Float::with_val(prec, z.re), im: Float::with_val(prec, z.im) }
    }

    pub fn prec(&self) -> u32 {
        self.re.prec()
    }

    pub fn to_c64(&self) -> Complex64 {
        Complex64::new(self.re.to_f64(), self.im.to_f64())
    }

    /// `exp(z)` for an `f64` complex argument, evaluated at `prec` bits.
    pub fn exp_of(prec: u32, re: &Float, im: &Float) -> Self {
        let mag = Float::with_val(prec, re.exp_ref());
        let (s, c) = Float::with_val(prec, im).sin_cos(Float::new(prec));
        BigComplex { re: c * &mag, im: s * &mag }
    }

    pub fn norm_sqr(&self) -> Float {
        let mut n = Float::with_val(self.prec(), self.re.square_ref());
        n += Float::with_val(self.prec(), self.im.square_ref());
        n
    }

    /// `self *= other`, using `tmp` for scratch.
    pub fn mul_assign(&mut self, other: &BigComplex, tmp: &mut [Float; 2]) {
        let [t0, t1] = tmp;
        t0.assign(&self.re * &other.re);
        t1.assign(&self.im * &other.im);
        *t0 -= &*t1;
        t1.assign(&self.re * &other.im);
        self.im *= &other.re;
        self.im += &*t1;
        self.re.assign(&*t0);
    }

    /// `self += a * b`.
    pub fn add_mul(&mut self, a: &BigComplex, b: &BigComplex, tmp: &mut Float) {
        tmp.assign(&a.re * &b.re);
        self.re += &*tmp;
        tmp.assign(&a.im * &b.im);
        self.re -= &*tmp;
        tmp.assign(&a.re * &b.im);
        self.im += &*tmp;
        tmp.assign(&a.im * &b.re);
        self.im += &*tmp;
    }

    /// `self -= a * b`.
    pub fn sub_mul(&mut self, a: &BigComplex, b: &BigComplex, tmp: &mut Float) {
        tmp.assign(&a.re * &b.re);
        self.re -= &*tmp;
        tmp.assign(&a.im * &b.im);
        self.re += &*tmp;
        tmp.assign(&a.re * &b.im);
        self.im -= &*tmp;
        tmp.assign(&a.im * &b.re);
        self.im -= &*tmp;
    }

    /// `1 / self`.
    pub fn recip(&self) -> Self {
        let n = self.norm_sqr();
        let mut im = Float::with_val(self.prec(), &self.im / &n);
        im.neg_assign();
        BigComplex { re: Float::with_val(self.prec(), &self.re / &n), im }
    }
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BigMatrix {
    rows: usize,
    cols: usize,
    prec: u32,
    data: Vec<BigComplex>,
}

impl BigMatrix {
    pub fn zeros(rows: usize, cols: usize, prec: u32) -> Self {
        BigMatrix { rows, cols, prec, data: (0..rows * cols).map(|_| BigComplex::zero(prec)).collect() }
    }

    pub fn identity(n: usize, prec: u32) -> Self {
        let mut m = Self::zeros(n, n, prec);
        for i in 0..n {
            m.data[i * n + i] = BigComplex::one(prec);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, prec: u32, mut f: impl FnMut(usize, usize) -> BigComplex) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        BigMatrix { rows, cols, prec, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn prec(&self) -> u32 {
        self.prec
    }

    pub fn get(&self, i: usize, j: usize) -> &BigComplex {
        &self.data[i * self.cols + j]
    }

    /// `self ← self · y` for a square `f64` matrix given row-major as `y[k*n + j]`.
    pub fn mul_right_c64(&mut self, y: &[Complex64]) {
        let n = self.cols;
        assert_eq!(y.len(), n * n, "right factor must be square");
        let mut row: Vec<BigComplex> = (0..n).map(|_| BigComplex::zero(self.prec)).collect();
        let mut t = Float::new(self.prec);
        for i in 0..self.rows {
            for (j, out) in row.iter_mut().enumerate() {
                out.re.assign(Special::Zero);
                out.im.assign(Special::Zero);
                for k in 0..n {
                    let p = &self.data[i * n + k];
                    let yk = y[k * n + j];
                    t.assign(&p.re * yk.re);
                    out.re += &t;
                    t.assign(&p.im * yk.im);
                    out.re -= &t;
                    t.assign(&p.re * yk.im);
                    out.im += &t;
                    t.assign(&p.im * yk.re);
                    out.im += &t;
                }
            }
            for (j, v) in row.iter_mut().enumerate() {
                std::mem::swap(&mut self.data[i * n + j], v);
            }
        }
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    pub fn det(&self) -> Result<BigComplex, BigError> {
        assert_eq!(self.rows, self.cols, "determinant of a non-square matrix");
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = BigComplex::one(self.prec);
        let mut tmp2 = [Float::new(self.prec), Float::new(self.prec)];
        let mut t = Float::new(self.prec);
        for col in 0..n {
            let mut piv = col;
            let mut best = a[col * n + col].norm_sqr();
            for r in col + 1..n {
                let v = a[r * n + col].norm_sqr();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best.is_zero() {
                return Err(BigError::Singular { prec: self.prec });
            }
            if piv != col {
                for j in 0..n {
                    a.swap(piv * n + j, col * n + j);
                }
                det.re.neg_assign();
                det.im.neg_assign();
            }
            let pivot = a[col * n + col].clone();
            det.mul_assign(&pivot, &mut tmp2);
            let inv = pivot.recip();
            for r in col + 1..n {
                let mut f = a[r * n + col].clone();
                f.mul_assign(&inv, &mut tmp2);
                for j in col + 1..n {
                    let (upper, lower) = a.split_at_mut(r * n);
                    lower[j].sub_mul(&f, &upper[col * n + j], &mut t);
                }
            }
        }
        Ok(det)
    }

    /// Logarithms of the squared singular values, in descending order, by
    /// one-sided (Hestenes) Jacobi on the columns.
    pub fn log_sq_singular_values(&self) -> Result<Vec<f64>, BigError> {
        const MAX_SWEEPS: usize = 80;
        let prec = self.prec;
        let (m, n) = (self.rows, self.cols);
        let mut cols: Vec<Vec<BigComplex>> =
            (0..n).map(|j| (0..m).map(|i| self.data[i * n + j].clone()).collect()).collect();
        let tol = Float::with_val(prec, 1e-15);
        let mut t = Float::new(prec);
        let mut alpha = Float::new(prec);
        let mut beta = Float::new(prec);
        let mut g = BigComplex::zero(prec);
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    alpha.assign(Special::Zero);
                    beta.assign(Special::Zero);
                    g.re.assign(Special::Zero);
                    g.im.assign(Special::Zero);
                    for k in 0..m {
                        let (ap, aq) = (&cols[p][k], &cols[q][k]);
                        t.assign(ap.re.square_ref());
                        alpha += &t;
                        t.assign(ap.im.square_ref());
                        alpha += &t;
                        t.assign(aq.re.square_ref());
                        beta += &t;
                        t.assign(aq.im.square_ref());
                        beta += &t;
                        // conj(ap) * aq
                        t.assign(&ap.re * &aq.re);
                        g.re += &t;
                        t.assign(&ap.im * &aq.im);
                        g.re += &t;
                        t.assign(&ap.re * &aq.im);
                        g.im += &t;
                        t.assign(&ap.im * &aq.re);
                        g.im -= &t;
                    }
                    let gabs = Float::with_val(prec, g.norm_sqr().sqrt_ref());
                    let scale = Float::with_val(prec, &alpha * &beta).sqrt();
                    if gabs.is_zero() || gabs <= Float::with_val(prec, &tol * &scale) {
                        continue;
                    }
                    rotated = true;
                    // zeta = (beta - alpha) / (2|g|), t = sign/(|zeta| + sqrt(1+zeta²))
                    let zeta = Float::with_val(prec, &beta - &alpha) / Float::with_val(prec, &gabs * 2u32);
                    let root = (Float::with_val(prec, zeta.square_ref()) + 1u32).sqrt();
                    let mut tn = Float::with_val(prec, 1u32) / (Float::with_val(prec, zeta.abs_ref()) + root);
                    if zeta.is_sign_negative() {
                        tn.neg_assign();
                    }
                    let c = Float::with_val(prec, 1u32) / (Float::with_val(prec, tn.square_ref()) + 1u32).sqrt();
                    let s = Float::with_val(prec, &c * &tn);
                    // phase e^{-iφ} = conj(g)/|g|
                    let ph = BigComplex {
                        re: Float::with_val(prec, &g.re / &gabs),
                        im: Float::with_val(prec, -Float::with_val(prec, &g.im / &gabs)),
                    };
                    let cph = BigComplex { re: Float::with_val(prec, &ph.re * &c), im: Float::with_val(prec, &ph.im * &c) };
                    let sph = BigComplex { re: Float::with_val(prec, &ph.re * &s), im: Float::with_val(prec, &ph.im * &s) };
                    let (left, right) = cols.split_at_mut(q);
                    let (cp, cq) = (&mut left[p], &mut right[0]);
                    for k in 0..m {
                        let ap = cp[k].clone();
                        // ap' = c ap - s e^{-iφ} aq ; aq' = s ap + c e^{-iφ} aq
                        cp[k].re *= &c;
                        cp[k].im *= &c;
                        cp[k].sub_mul(&sph, &cq[k], &mut t);
                        let aq = std::mem::replace(&mut cq[k], BigComplex { re: Float::with_val(prec, &ap.re * &s), im: Float::with_val(prec, &ap.im * &s) });
                        cq[k].add_mul(&cph, &aq, &mut t);
                    }
                }
            }
            if !rotated {
                let mut out: Vec<f64> = cols
                    .iter()
                    .map(|col| {
                        let mut nrm = Float::new(prec);
                        for v in col {
                            nrm += v.norm_sqr();
                        }
                        if nrm.is_zero() {
                            f64::NEG_INFINITY
                        } else {
                            nrm.ln().to_f64()
                        }
                    })
                    .collect();
                out.sort_by(|a, b| b.total_cmp(a));
                return Ok(out);
            }
        }
        Err(BigError::SvdNoConvergence { sweeps: MAX_SWEEPS })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sample(n: usize, seed: u64) -> Vec<Complex64> {
        // small deterministic LCG; statistical quality is irrelevant here
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        (0..n * n).map(|_| c(next(), next())).collect()
    }

    #[test]
    fn det_matches_nalgebra() {
        let n = 6;
        let y = sample(n, 3);
        let bm = BigMatrix::from_fn(n, n, 128, |i, j| BigComplex::from_c64(128, y[i * n + j]));
        let d = bm.det().unwrap().to_c64();
        let dm = DMatrix::from_row_slice(n, n, &y).determinant();
        assert!((d - dm).norm() < 1e-12 * dm.norm().max(1.0), "{d} vs {dm}");
    }

    #[test]
    fn singular_matrix_is_reported() {
        let bm = BigMatrix::zeros(3, 3, 64);
        assert!(matches!(bm.det(), Err(BigError::Singular { .. })));
    }

    #[test]
    fn svd_matches_nalgebra() {
        let n = 5;
        let y = sample(n, 11);
        let mut bm = BigMatrix::identity(n, 160);
        bm.mul_right_c64(&y);
        bm.mul_right_c64(&y);
        let logs = bm.log_sq_singular_values().unwrap();
        let ym = DMatrix::from_row_slice(n, n, &y);
        let p = &ym * &ym;
        let mut sv: Vec<f64> = p.singular_values().iter().map(|s| 2.0 * s.ln()).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in logs.iter().zip(&sv) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        let sum: f64 = logs.iter().sum();
        let det = p.determinant().norm_sqr().ln();
        assert!((sum - det).abs() < 1e-10);
    }

    #[test]
    fn svd_resolves_extreme_grading() {
        // diag(1, 1e-200) rotated: far beyond f64, easy at 1024 bits.
        let prec = 1024;
        let th = 0.3f64;
        let u = [c(th.cos(), 0.0), c(-th.sin(), 0.0), c(th.sin(), 0.0), c(th.cos(), 0.0)];
        let mut bm = BigMatrix::identity(2, prec);
        for _ in 0..20 {
            bm.mul_right_c64(&[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1e-10, 0.0)]);
            bm.mul_right_c64(&u);
        }
        let logs = bm.log_sq_singular_values().unwrap();
        let total = 2.0 * 20.0 * (1e-10f64).ln();
        assert!((logs[0] + logs[1] - total).abs() < 1e-8);
        assert!(logs[1] < -800.0);
    }

    #[test]
    fn complex_exp_and_mul() {
        let prec = 100;
        let z = BigComplex::exp_of(prec, &Float::with_val(prec, 0.5), &Float::with_val(prec, 1.2));
        assert!((z.to_c64() - c(0.5, 1.2).exp()).norm() < 1e-14);
        let mut a = BigComplex::from_c64(prec, c(1.0, 2.0));
        let mut tmp = [Float::new(prec), Float::new(prec)];
        a.mul_assign(&BigComplex::from_c64(prec, c(3.0, -1.0)), &mut tmp);
        assert_eq!(a.to_c64(), c(5.0, 5.0));
        assert!((a.recip().to_c64() - c(0.1, -0.1)).norm() < 1e-15);
    }
}
