//! Coefficient types shared by the exact (Gaussian-rational) and floating
//! code paths.
//!
//! Everything that replays an algebraic identity is written once against
//! [`Scalar`] and then instantiated with [`CQ`] for exact checks and with
//! [`C64`] when the inputs come from sampled fields.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_complex::Complex;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

pub type C64 = Complex<f64>;
pub type CQ = Complex<BigRational>;

pub trait Scalar:
    Clone
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Zero
    + One
    + Send
    + Sync
{
    fn i() -> Self;
    fn from_ratio(num: i64, den: i64) -> Self;
    fn conj(&self) -> Self;
    /// Multiplicative inverse; `None` for zero.
    fn recip(&self) -> Option<Self>;
    /// Magnitude used for pivoting and for tolerance reports.
    fn magnitude(&self) -> f64;
    fn to_c64(&self) -> C64;

    fn scale(&self, num: i64, den: i64) -> Self {
        self.clone() * Self::from_ratio(num, den)
    }
}

impl Scalar for C64 {
    fn i() -> Self {
        C64::new(0.0, 1.0)
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        C64::new(num as f64 / den as f64, 0.0)
    }
    fn conj(&self) -> Self {
        Complex::conj(self)
    }
    fn recip(&self) -> Option<Self> {
        if self.norm_sqr() == 0.0 {
            None
        } else {
            Some(self.inv())
        }
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
    fn to_c64(&self) -> C64 {
        *self
    }
}

impl Scalar for CQ {
    fn i() -> Self {
        Complex::new(BigRational::zero(), BigRational::one())
    }
    fn from_ratio(num: i64, den: i64) -> Self {
        Complex::new(
            BigRational::new(BigInt::from(num), BigInt::from(den)),
            BigRational::zero(),
        )
    }
    fn conj(&self) -> Self {
        Complex::new(self.re.clone(), -self.im.clone())
    }
    fn recip(&self) -> Option<Self> {
        let d = &self.re * &self.re + &self.im * &self.im;
        if d.is_zero() {
            None
        } else {
            Some(Complex::new(&self.re / &d, -(&self.im / &d)))
        }
    }
    fn magnitude(&self) -> f64 {
        self.to_c64().norm()
    }
    fn to_c64(&self) -> C64 {
        C64::new(
            self.re.to_f64().unwrap_or(f64::NAN),
            self.im.to_f64().unwrap_or(f64::NAN),
        )
    }
}

/// Exact complex rational `(a/b) + i (c/d)`.
pub fn cq(re: (i64, i64), im: (i64, i64)) -> CQ {
    Complex::new(
        BigRational::new(re.0.into(), re.1.into()),
        BigRational::new(im.0.into(), im.1.into()),
    )
}

/// Row-major dense square matrix over a [`Scalar`].
#[derive(Clone, Debug, PartialEq)]
pub struct SqMat<C> {
    pub dim: usize,
    pub data: Vec<C>,
}

impl<C: Scalar> SqMat<C> {
    pub fn zeros(dim: usize) -> Self {
        SqMat {
            dim,
            data: vec![C::zero(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for k in 0..dim {
            m.data[k * dim + k] = C::one();
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> C) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            for c in 0..dim {
                data.push(f(r, c));
            }
        }
        SqMat { dim, data }
    }

    pub fn get(&self, r: usize, c: usize) -> &C {
        &self.data[r * self.dim + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: C) {
        self.data[r * self.dim + c] = v;
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.dim;
        Self::from_fn(n, |r, c| {
            let mut acc = C::zero();
            for k in 0..n {
                acc = acc + self.get(r, k).clone() * other.get(k, c).clone();
            }
            acc
        })
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_fn(self.dim, |r, c| {
            self.get(r, c).clone() + other.get(r, c).clone()
        })
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::from_fn(self.dim, |r, c| {
            self.get(r, c).clone() - other.get(r, c).clone()
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.dim, |r, c| self.get(c, r).clone())
    }

    pub fn conj(&self) -> Self {
        Self::from_fn(self.dim, |r, c| self.get(r, c).conj())
    }

    pub fn scale(&self, s: &C) -> Self {
        Self::from_fn(self.dim, |r, c| self.get(r, c).clone() * s.clone())
    }

    /// Gauss-Jordan inverse with largest-magnitude pivoting.
    pub fn inverse(&self) -> Option<Self> {
        let n = self.dim;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        for col in 0..n {
            let pivot = (col..n)
                .filter(|&r| !a.get(r, col).is_zero())
                .max_by(|&x, &y| {
                    a.get(x, col)
                        .magnitude()
                        .partial_cmp(&a.get(y, col).magnitude())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })?;
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                    inv.data.swap(pivot * n + c, col * n + c);
                }
            }
            let p = a.get(col, col).recip()?;
            for c in 0..n {
                let v = a.get(col, c).clone() * p.clone();
                a.set(col, c, v);
                let v = inv.get(col, c).clone() * p.clone();
                inv.set(col, c, v);
            }
            for r in 0..n {
                if r == col || a.get(r, col).is_zero() {
                    continue;
                }
                let f = a.get(r, col).clone();
                for c in 0..n {
                    let v = a.get(r, c).clone() - f.clone() * a.get(col, c).clone();
                    a.set(r, c, v);
                    let v = inv.get(r, c).clone() - f.clone() * inv.get(col, c).clone();
                    inv.set(r, c, v);
                }
            }
        }
        Some(inv)
    }

    /// Leibniz-free determinant by elimination (exact for [`CQ`]).
    pub fn det(&self) -> C {
        let n = self.dim;
        let mut a = self.clone();
        let mut det = C::one();
        for col in 0..n {
            let pivot = match (col..n).find(|&r| !a.get(r, col).is_zero()) {
                Some(p) => p,
                None => return C::zero(),
            };
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                }
                det = -det;
            }
            let p = a.get(col, col).clone();
            det = det * p.clone();
            let pinv = p.recip().expect("nonzero pivot");
            for r in col + 1..n {
                let f = a.get(r, col).clone() * pinv.clone();
                for c in col..n {
                    let v = a.get(r, c).clone() - f.clone() * a.get(col, c).clone();
                    a.set(r, c, v);
                }
            }
        }
        det
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.magnitude()).fold(0.0, f64::max)
    }
}
