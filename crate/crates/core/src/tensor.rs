//! Fixed-size 3x3 algebra and the SL(3) / sl(3) constraint utilities.
//!
//! Everything here is generic over [`Real`]; the crate root re-exports the
//! `f64` instantiations (`Mat3`, `SL3Element`, `Sl3Tangent`) used by the
//! homogenization and geometry modules.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Determinant tolerance enforced on SL(3) elements.
pub const SL3_DET_TOL: f64 = 1e-9;
/// Trace tolerance for elements of sl(3).
pub const SL3_TRACE_TOL: f64 = 1e-12;
/// Below this |det| a matrix is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;
/// Retraction by scaling is refused for determinants at or below this value.
pub const RETRACT_MIN_DET: f64 = 1e-8;

/// Dense 3x3 matrix stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Matrix3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Matrix3<T> {
    pub fn new(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn zeros() -> Self {
        Self { m: [[T::zero(); 3]; 3] }
    }

    pub fn identity() -> Self {
        Self::diag(T::one(), T::one(), T::one())
    }

    pub fn diag(a: T, b: T, c: T) -> Self {
        let mut out = Self::zeros();
        out.m[0][0] = a;
        out.m[1][1] = b;
        out.m[2][2] = c;
        out
    }

    /// Builds from 9 entries in row-major order.
    pub fn from_row_slice(v: &[T]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::InvalidInput(format!(
                "expected 9 matrix entries, got {}",
                v.len()
            )));
        }
        let mut out = Self::zeros();
        for (k, x) in v.iter().enumerate() {
            out.m[k / 3][k % 3] = *x;
        }
        Ok(out)
    }

    pub fn to_row_vec(&self) -> Vec<T> {
        self.m.iter().flat_map(|r| r.iter().copied()).collect()
    }

    /// Single-entry basis matrix `e_i ⊗ e_j`.
    pub fn unit(i: usize, j: usize) -> Self {
        let mut out = Self::zeros();
        out.m[i][j] = T::one();
        out
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = self.m[j][i];
            }
        }
        out
    }

    pub fn trace(&self) -> T {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    /// Cofactor expansion along the first row.
    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Matrix of cofactors, `cof(A)_{ij} = (-1)^{i+j} minor_{ij}`.
    pub fn cofactor(&self) -> Self {
        let m = &self.m;
        let mut c = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                // cyclic index ordering absorbs the checkerboard sign
                c.m[i][j] = m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1];
            }
        }
        c
    }

    /// Inverse through `(cof A)^T / det A`.
    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if !(det.abs() > T::lit(SINGULAR_TOL)) {
            return Err(Error::SingularMatrix {
                det: det.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.cofactor().transpose().scale(T::one() / det))
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = *self;
        out.m.iter_mut().flatten().for_each(|x| *x *= s);
        out
    }

    /// Frobenius inner product `tr(A^T B)`.
    pub fn dot(&self, other: &Self) -> T {
        let mut acc = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                acc += self.m[i][j] * other.m[i][j];
            }
        }
        acc
    }

    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }

    /// Frobenius norm.
    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.m
            .iter()
            .flatten()
            .fold(T::zero(), |acc, x| acc.max(x.abs()))
    }

    /// Induced 1-norm (max column sum).
    pub fn norm_1(&self) -> T {
        (0..3)
            .map(|j| (0..3).fold(T::zero(), |a, i| a + self.m[i][j].abs()))
            .fold(T::zero(), T::max)
    }

    pub fn cast<U: Real>(&self) -> Matrix3<U> {
        let mut out = Matrix3::<U>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = U::from_f64(self.m[i][j].to_f64().unwrap()).unwrap();
            }
        }
        out
    }
}

impl<T> Index<(usize, usize)> for Matrix3<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.m[i][j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix3<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.m[i][j]
    }
}

impl<T: Real> Add for Matrix3<T> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl<T: Real> AddAssign for Matrix3<T> {
    fn add_assign(&mut self, rhs: Self) {
        for i in 0..3 {
            for j in 0..3 {
                self.m[i][j] += rhs.m[i][j];
            }
        }
    }
}

impl<T: Real> Sub for Matrix3<T> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self -= rhs;
        self
    }
}

impl<T: Real> SubAssign for Matrix3<T> {
    fn sub_assign(&mut self, rhs: Self) {
        for i in 0..3 {
            for j in 0..3 {
                self.m[i][j] -= rhs.m[i][j];
            }
        }
    }
}

impl<T: Real> Neg for Matrix3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

impl<T: Real> Mul for Matrix3<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc += self.m[i][k] * rhs.m[k][j];
                }
                out.m[i][j] = acc;
            }
        }
        out
    }
}

impl<T: Real> Mul<T> for Matrix3<T> {
    type Output = Self;
    fn mul(self, rhs: T) -> Self {
        self.scale(rhs)
    }
}

/// Trace-free matrix, an element of sl(3) = T_I SL(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix3<T>", into = "Matrix3<T>")]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct TracelessMatrix3<T: Real> {
    value: Matrix3<T>,
}

impl<T: Real> TracelessMatrix3<T> {
    pub fn zero() -> Self {
        Self { value: Matrix3::zeros() }
    }

    /// Accepts `m` only if `|tr m|` is within the sl(3) tolerance.
    pub fn new(m: Matrix3<T>) -> Result<Self> {
        let tr = m.trace();
        if tr.abs() > T::lit(SL3_TRACE_TOL) * (T::one() + m.max_abs()) {
            return Err(Error::NotTangent {
                trace: tr.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { value: m })
    }

    pub fn value(&self) -> &Matrix3<T> {
        &self.value
    }

    pub fn into_inner(self) -> Matrix3<T> {
        self.value
    }

    pub fn scale(&self, s: T) -> Self {
        Self { value: self.value.scale(s) }
    }
}

impl<T: Real> TryFrom<Matrix3<T>> for TracelessMatrix3<T> {
    type Error = Error;
    fn try_from(m: Matrix3<T>) -> Result<Self> {
        Self::new(m)
    }
}

impl<T: Real> From<TracelessMatrix3<T>> for Matrix3<T> {
    fn from(t: TracelessMatrix3<T>) -> Self {
        t.value
    }
}

/// How [`SpecialLinear3::new`] treats a determinant that drifted from one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetPolicy {
    /// Reject inputs with `|det - 1| > SL3_DET_TOL`.
    Strict,
    /// Rescale onto SL(3) by `det^{-1/3}`.
    Retract,
}

/// Matrix with unit determinant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix3<T>", into = "Matrix3<T>")]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct SpecialLinear3<T: Real> {
    value: Matrix3<T>,
}

impl<T: Real> SpecialLinear3<T> {
    pub fn identity() -> Self {
        Self { value: Matrix3::identity() }
    }

    pub fn new(m: Matrix3<T>, policy: DetPolicy) -> Result<Self> {
        match policy {
            DetPolicy::Retract => retract_sl3(&m),
            DetPolicy::Strict => {
                if !m.is_finite() {
                    return Err(Error::InvalidInput("non-finite matrix entry".into()));
                }
                let drift = (m.det() - T::one()).abs();
                if drift > T::lit(SL3_DET_TOL) {
                    return Err(Error::DeterminantDrift {
                        drift: drift.to_f64().unwrap_or(f64::NAN),
                    });
                }
                Ok(Self { value: m })
            }
        }
    }

    pub fn value(&self) -> &Matrix3<T> {
        &self.value
    }

    pub fn into_inner(self) -> Matrix3<T> {
        self.value
    }

    /// Inverse via the cofactor shortcut `(cof P)^T`, exact for `det P = 1`.
    pub fn inverse(&self) -> Self {
        Self { value: self.value.cofactor().transpose() }
    }

    /// Group product, retracted to absorb round-off.
    pub fn compose(&self, other: &Self) -> Self {
        let prod = self.value * other.value;
        retract_sl3(&prod).unwrap_or(Self { value: prod })
    }
}

impl<T: Real> TryFrom<Matrix3<T>> for SpecialLinear3<T> {
    type Error = Error;
    fn try_from(m: Matrix3<T>) -> Result<Self> {
        Self::new(m, DetPolicy::Strict)
    }
}

impl<T: Real> From<SpecialLinear3<T>> for Matrix3<T> {
    fn from(p: SpecialLinear3<T>) -> Self {
        p.value
    }
}

/// Free determinant.
pub fn det<T: Real>(m: &Matrix3<T>) -> T {
    m.det()
}

pub fn inverse<T: Real>(m: &Matrix3<T>) -> Result<Matrix3<T>> {
    m.inverse()
}

/// Orthogonal projection onto sl(3): `m - tr(m)/3 I`.
pub fn project_sl3<T: Real>(m: &Matrix3<T>) -> TracelessMatrix3<T> {
    let shift = m.trace() / T::lit(3.0);
    let mut v = *m;
    for i in 0..3 {
        v.m[i][i] -= shift;
    }
    // one correction pass drives the residual trace to round-off of the diagonal
    let r = v.trace() / T::lit(3.0);
    for i in 0..3 {
        v.m[i][i] -= r;
    }
    TracelessMatrix3 { value: v }
}

/// Rescales `m` by `det(m)^{-1/3}` onto SL(3).
pub fn retract_sl3<T: Real>(m: &Matrix3<T>) -> Result<SpecialLinear3<T>> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let d = m.det();
    if !(d > T::lit(RETRACT_MIN_DET)) {
        return Err(Error::NonPositiveDeterminant {
            det: d.to_f64().unwrap_or(f64::NAN),
        });
    }
    if d == T::one() {
        return Ok(SpecialLinear3 { value: *m });
    }
    let mut v = m.scale(d.cbrt().recip());
    // a second pass removes the rounding left by the cube root
    let d2 = v.det();
    if d2 != T::one() {
        v = v.scale(d2.cbrt().recip());
    }
    Ok(SpecialLinear3 { value: v })
}

/// Matrix exponential by scaling and squaring with a [6/6] Padé approximant.
pub fn mat_exp<T: Real>(a: &Matrix3<T>) -> Matrix3<T> {
    const PADE6: [f64; 7] = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ];
    let norm = a.norm_1();
    let mut squarings = 0u32;
    if norm > T::lit(0.5) {
        let ratio = (norm / T::lit(0.5)).to_f64().unwrap();
        squarings = ratio.log2().ceil().max(0.0) as u32;
    }
    let scaled = a.scale(T::lit(0.5f64.powi(squarings as i32)));
    let mut num = Matrix3::zeros();
    let mut den = Matrix3::zeros();
    let mut power = Matrix3::identity();
    for (k, c) in PADE6.iter().enumerate() {
        let term = power.scale(T::lit(*c));
        num += term;
        if k % 2 == 0 {
            den += term;
        } else {
            den -= term;
        }
        power = power * scaled;
    }
    // |scaled| <= 1/2 keeps the Padé denominator well conditioned
    let mut out = den.inverse().expect("Padé denominator is nonsingular") * num;
    for _ in 0..squarings {
        out = out * out;
    }
    out
}

/// Principal square root by the Denman–Beavers iteration.
pub fn mat_sqrt<T: Real>(a: &Matrix3<T>) -> Result<Matrix3<T>> {
    let mut y = *a;
    let mut z = Matrix3::identity();
    let half = T::lit(0.5);
    for _ in 0..100 {
        let yi = y
            .inverse()
            .map_err(|_| Error::LogDivergence("square-root iterate became singular".into()))?;
        let zi = z
            .inverse()
            .map_err(|_| Error::LogDivergence("square-root iterate became singular".into()))?;
        let y_next = (y + zi).scale(half);
        let z_next = (z + yi).scale(half);
        if !y_next.is_finite() {
            return Err(Error::LogDivergence("square-root iterate overflowed".into()));
        }
        let change = (y_next - y).norm();
        y = y_next;
        z = z_next;
        if change <= T::kernel_eps() * y.norm() {
            return Ok(y);
        }
    }
    Err(Error::LogDivergence(
        "square-root iteration did not contract".into(),
    ))
}

/// Principal logarithm by inverse scaling and squaring.
///
/// Square roots are taken until `|A - I|_F <= 0.2`, then the Gregory series
/// `log A = 2 atanh((A - I)(A + I)^{-1})` is summed.
pub fn mat_log<T: Real>(a: &Matrix3<T>) -> Result<Matrix3<T>> {
    if !a.is_finite() {
        return Err(Error::LogDivergence("non-finite input".into()));
    }
    if !(a.det() > T::zero()) {
        return Err(Error::LogDivergence(
            "determinant is not positive; no real principal logarithm".into(),
        ));
    }
    let id = Matrix3::<T>::identity();
    let mut x = *a;
    let mut roots = 0i32;
    while (x - id).norm() > T::lit(0.2) {
        x = mat_sqrt(&x)?;
        roots += 1;
        if roots > 40 {
            return Err(Error::LogDivergence("inverse scaling did not contract".into()));
        }
    }
    let z = (x - id) * (x + id).inverse()?;
    let z2 = z * z;
    let mut term = z;
    let mut sum = z;
    let mut k = 1;
    loop {
        term = term * z2;
        k += 2;
        let add = term.scale(T::lit(1.0 / k as f64));
        sum += add;
        if add.norm() <= T::epsilon() * sum.norm() || k > 121 {
            break;
        }
    }
    Ok(sum.scale(T::lit(2.0 * 2f64.powi(roots))))
}

fn gauss_legendre_16() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = 16usize;
        let mut rule = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // map [-1, 1] to [0, 1]
            rule.push((0.5 * (x + 1.0), 0.5 * w));
        }
        rule
    })
}

/// Fréchet derivative of the principal logarithm at `a` in direction `e`,
/// `∫_0^1 (t(A-I)+I)^{-1} E (t(A-I)+I)^{-1} dt`, by 16-point Gauss–Legendre.
///
/// Intended for `|A - I|` well inside the unit ball (path segments).
pub fn log_frechet<T: Real>(a: &Matrix3<T>, e: &Matrix3<T>) -> Result<Matrix3<T>> {
    let id = Matrix3::<T>::identity();
    let shift = *a - id;
    if shift.norm() > T::lit(0.75) {
        return Err(Error::LogDivergence(
            "Fréchet quadrature requires |A - I| <= 0.75".into(),
        ));
    }
    let mut acc = Matrix3::zeros();
    for &(t, w) in gauss_legendre_16() {
        let r = (shift.scale(T::lit(t)) + id).inverse()?;
        acc += (r * *e * r).scale(T::lit(w));
    }
    Ok(acc)
}
