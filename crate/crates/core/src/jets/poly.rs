//! Truncated polynomials in `z_1..z_n, z̄_1..z̄_n` and formal order
//! parameters `ε_1..ε_e`, with separate caps on the `z`-degree and the
//! `ε`-degree.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{NijError, Result};
use crate::scalar::{Scalar, SqMat, C64, CQ};

const BITS: u32 = 4;
const MASK: u64 = (1 << BITS) - 1;
const MAX_VARS: usize = 16;
const MAX_EXP: usize = MASK as usize;

/// Shape of a polynomial ring: `n` holomorphic variables (and their
/// conjugates), `n_eps` formal order parameters, and truncation caps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PolyRing {
    pub n: usize,
    pub n_eps: usize,
    pub cap: usize,
    pub eps_cap: usize,
}

/// Packed exponent vector, `BITS` bits per variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial(u64);

impl Monomial {
    pub const ONE: Monomial = Monomial(0);

    pub fn exponent(self, var: usize) -> usize {
        ((self.0 >> (BITS as usize * var)) & MASK) as usize
    }

    fn with_exponent(self, var: usize, e: usize) -> Monomial {
        let shift = BITS as usize * var;
        Monomial((self.0 & !(MASK << shift)) | ((e as u64) << shift))
    }

    pub fn from_exponents(exps: &[usize]) -> Monomial {
        exps.iter().enumerate().fold(Monomial::ONE, |m, (v, &e)| m.with_exponent(v, e))
    }

    fn times(self, other: Monomial) -> Monomial {
        // exponents never overflow a nibble because both factors are capped
        Monomial(self.0 + other.0)
    }
}

impl PolyRing {
    pub fn new(n: usize, cap: usize) -> Self {
        PolyRing { n, n_eps: 0, cap, eps_cap: 0 }
    }

    pub fn with_eps(self, n_eps: usize, eps_cap: usize) -> Self {
        PolyRing { n_eps, eps_cap, ..self }
    }

    pub fn nvars(&self) -> usize {
        2 * self.n + self.n_eps
    }

    pub fn z_var(&self, k: usize) -> usize {
        k
    }

    pub fn zbar_var(&self, k: usize) -> usize {
        self.n + k
    }

    pub fn eps_var(&self, e: usize) -> usize {
        2 * self.n + e
    }

    pub fn z_degree(&self, m: Monomial) -> usize {
        (0..2 * self.n).map(|v| m.exponent(v)).sum()
    }

    pub fn eps_degree(&self, m: Monomial) -> usize {
        (2 * self.n..self.nvars()).map(|v| m.exponent(v)).sum()
    }

    fn admits(&self, m: Monomial) -> bool {
        self.z_degree(m) <= self.cap && self.eps_degree(m) <= self.eps_cap
    }

    /// Rejects rings that do not fit the packed monomial layout.
    pub fn validated(self) -> Result<Self> {
        if self.nvars() > MAX_VARS || self.cap.max(self.eps_cap) * 2 > MAX_EXP {
            return Err(NijError::VariableMismatch(format!("ring {self:?} exceeds the packed monomial layout")));
        }
        Ok(self)
    }

    pub fn zero<C: Scalar>(&self) -> TruncPoly<C> {
        TruncPoly { ring: *self, terms: BTreeMap::new() }
    }

    pub fn constant<C: Scalar>(&self, c: C) -> TruncPoly<C> {
        self.monomial(Monomial::ONE, c)
    }

    pub fn one<C: Scalar>(&self) -> TruncPoly<C> {
        self.constant(C::one())
    }

    pub fn monomial<C: Scalar>(&self, m: Monomial, c: C) -> TruncPoly<C> {
        let mut p = self.zero();
        if self.admits(m) && !c.is_zero() {
            p.terms.insert(m, c);
        }
        p
    }

    pub fn var<C: Scalar>(&self, v: usize) -> TruncPoly<C> {
        self.monomial(Monomial::ONE.with_exponent(v, 1), C::one())
    }

    pub fn z<C: Scalar>(&self, k: usize) -> TruncPoly<C> {
        self.var(self.z_var(k))
    }

    pub fn zbar<C: Scalar>(&self, k: usize) -> TruncPoly<C> {
        self.var(self.zbar_var(k))
    }

    pub fn eps<C: Scalar>(&self, e: usize) -> TruncPoly<C> {
        self.var(self.eps_var(e))
    }

    /// `c + Σ_s (lin[s] z_s + lin_bar[s] z̄_s)`.
    pub fn affine<C: Scalar>(&self, c: C, lin: &[C], lin_bar: &[C]) -> TruncPoly<C> {
        let mut p = self.constant(c);
        for s in 0..self.n {
            p.add_term(Monomial::ONE.with_exponent(self.z_var(s), 1), lin[s].clone());
            p.add_term(Monomial::ONE.with_exponent(self.zbar_var(s), 1), lin_bar[s].clone());
        }
        p
    }
}

#[derive(Clone, PartialEq)]
pub struct TruncPoly<C> {
    ring: PolyRing,
    terms: BTreeMap<Monomial, C>,
}

impl<C: Scalar> fmt::Debug for TruncPoly<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        let mut first = true;
        for (m, c) in &self.terms {
            if !first {
                f.write_str(" + ")?;
            }
            first = false;
            write!(f, "({:?})", c.to_c64())?;
            for v in 0..self.ring.nvars() {
                let e = m.exponent(v);
                if e == 0 {
                    continue;
                }
                let name = if v < self.ring.n {
                    format!("z{}", v + 1)
                } else if v < 2 * self.ring.n {
                    format!("zb{}", v - self.ring.n + 1)
                } else {
                    format!("eps{}", v - 2 * self.ring.n + 1)
                };
                if e == 1 {
                    write!(f, "·{name}")?;
                } else {
                    write!(f, "·{name}^{e}")?;
                }
            }
        }
        Ok(())
    }
}

impl<C: Scalar> TruncPoly<C> {
    pub fn ring(&self) -> PolyRing {
        self.ring
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &C)> {
        self.terms.iter()
    }

    fn add_term(&mut self, m: Monomial, c: C) {
        if c.is_zero() || !self.ring.admits(m) {
            return;
        }
        let entry = self.terms.entry(m).or_insert_with(C::zero);
        *entry = entry.clone() + c;
        if entry.is_zero() {
            self.terms.remove(&m);
        }
    }

    pub fn coefficient(&self, m: Monomial) -> C {
        self.terms.get(&m).cloned().unwrap_or_else(C::zero)
    }

    pub fn constant_term(&self) -> C {
        self.coefficient(Monomial::ONE)
    }

    /// Coefficient of the monomial with the given exponent vector.
    pub fn extract_coefficient(&self, exps: &[usize]) -> Result<C> {
        if exps.len() != self.ring.nvars() {
            return Err(NijError::VariableMismatch(format!(
                "exponent vector of length {} for {} variables",
                exps.len(),
                self.ring.nvars()
            )));
        }
        Ok(self.coefficient(Monomial::from_exponents(exps)))
    }

    pub fn coeff_z(&self, k: usize) -> C {
        self.coefficient(Monomial::ONE.with_exponent(self.ring.z_var(k), 1))
    }

    pub fn coeff_zbar(&self, k: usize) -> C {
        self.coefficient(Monomial::ONE.with_exponent(self.ring.zbar_var(k), 1))
    }

    /// Coefficient of `z_k` times `ε^e` (single order parameter rings).
    pub fn coeff_z_eps(&self, k: usize, var_eps: usize, e: usize) -> C {
        self.coefficient(Monomial::ONE.with_exponent(self.ring.z_var(k), 1).with_exponent(self.ring.eps_var(var_eps), e))
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if self.ring != other.ring {
            return Err(NijError::VariableMismatch(format!("{:?} vs {:?}", self.ring, other.ring)));
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.compatible(other)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(*m, c.clone());
        }
        Ok(out)
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.checked_add(&other.neg())
    }

    pub fn checked_mul(&self, other: &Self) -> Result<Self> {
        self.compatible(other)?;
        let mut out = self.ring.zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let m = ma.times(*mb);
                if self.ring.admits(m) {
                    out.add_term(m, ca.clone() * cb.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn neg(&self) -> Self {
        TruncPoly { ring: self.ring, terms: self.terms.iter().map(|(m, c)| (*m, -c.clone())).collect() }
    }

    pub fn scale(&self, s: &C) -> Self {
        let mut out = self.ring.zero();
        for (m, c) in &self.terms {
            out.add_term(*m, c.clone() * s.clone());
        }
        out
    }

    /// Swaps `z ↔ z̄` and conjugates coefficients; order parameters are real.
    pub fn conj(&self) -> Self {
        let n = self.ring.n;
        let mut out = self.ring.zero();
        for (m, c) in &self.terms {
            let mut swapped = *m;
            for k in 0..n {
                swapped = swapped.with_exponent(k, m.exponent(n + k)).with_exponent(n + k, m.exponent(k));
            }
            out.add_term(swapped, c.conj());
        }
        out
    }

    /// Formal partial derivative in variable `v`.
    pub fn deriv(&self, v: usize) -> Self {
        let mut out = self.ring.zero();
        for (m, c) in &self.terms {
            let e = m.exponent(v);
            if e == 0 {
                continue;
            }
            out.add_term(m.with_exponent(v, e - 1), c.scale(e as i64, 1));
        }
        out
    }

    pub fn dz(&self, k: usize) -> Self {
        self.deriv(self.ring.z_var(k))
    }

    pub fn dzbar(&self, k: usize) -> Self {
        self.deriv(self.ring.zbar_var(k))
    }

    /// Terms of exact `ε`-degree `e`.
    pub fn eps_bucket(&self, e: usize) -> Self {
        TruncPoly {
            ring: self.ring,
            terms: self.terms.iter().filter(|(m, _)| self.ring.eps_degree(**m) == e).map(|(m, c)| (*m, c.clone())).collect(),
        }
    }

    /// Terms of exact `z`-degree `d`.
    pub fn z_homogeneous(&self, d: usize) -> Self {
        TruncPoly {
            ring: self.ring,
            terms: self.terms.iter().filter(|(m, _)| self.ring.z_degree(**m) == d).map(|(m, c)| (*m, c.clone())).collect(),
        }
    }

    /// Composition: every variable `v` is replaced by `images[v]`.
    pub fn substitute(&self, images: &[TruncPoly<C>]) -> Result<Self> {
        if images.len() != self.ring.nvars() {
            return Err(NijError::VariableMismatch(format!(
                "{} images for {} variables",
                images.len(),
                self.ring.nvars()
            )));
        }
        let target = images.first().map(|p| p.ring).unwrap_or(self.ring);
        for img in images {
            if img.ring != target {
                return Err(NijError::VariableMismatch("images live in different rings".into()));
            }
        }
        let mut out = target.zero();
        for (m, c) in &self.terms {
            let mut term = target.constant(c.clone());
            for (v, img) in images.iter().enumerate() {
                for _ in 0..m.exponent(v) {
                    term = term.checked_mul(img)?;
                }
            }
            out = out.checked_add(&term)?;
        }
        Ok(out)
    }

    /// Substitutes `z_k ↦ images[k]` and `z̄_k ↦ conj(images[k])`, leaving the
    /// order parameters fixed.
    pub fn substitute_holomorphic(&self, images: &[TruncPoly<C>]) -> Result<Self> {
        if images.len() != self.ring.n {
            return Err(NijError::VariableMismatch(format!("{} images for {} variables", images.len(), self.ring.n)));
        }
        let mut all: Vec<TruncPoly<C>> = images.to_vec();
        all.extend(images.iter().map(|p| p.conj()));
        for e in 0..self.ring.n_eps {
            all.push(self.ring.eps(e));
        }
        self.substitute(&all)
    }

    /// The same polynomial in a ring with other caps (terms above the new
    /// caps are dropped).
    pub fn recast(&self, ring: PolyRing) -> Result<Self> {
        if ring.n != self.ring.n || ring.n_eps != self.ring.n_eps {
            return Err(NijError::VariableMismatch(format!("{:?} vs {:?}", self.ring, ring)));
        }
        let mut out = ring.zero();
        for (m, c) in &self.terms {
            out.add_term(*m, c.clone());
        }
        Ok(out)
    }

    /// Value at `vals` (one entry per variable, `z̄` entries supplied explicitly).
    pub fn eval(&self, vals: &[C]) -> Result<C> {
        if vals.len() != self.ring.nvars() {
            return Err(NijError::VariableMismatch(format!("{} values for {} variables", vals.len(), self.ring.nvars())));
        }
        let mut acc = C::zero();
        for (m, c) in &self.terms {
            let mut t = c.clone();
            for (v, x) in vals.iter().enumerate() {
                for _ in 0..m.exponent(v) {
                    t = t * x.clone();
                }
            }
            acc = acc + t;
        }
        Ok(acc)
    }

    pub fn map_coeffs<D: Scalar>(&self, f: impl Fn(&C) -> D) -> TruncPoly<D> {
        let mut out = self.ring.zero();
        for (m, c) in &self.terms {
            out.add_term(*m, f(c));
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|c| c.magnitude()).fold(0.0, f64::max)
    }
}

impl TruncPoly<CQ> {
    pub fn to_c64(&self) -> TruncPoly<C64> {
        self.map_coeffs(|c| c.to_c64())
    }
}

macro_rules! poly_binop {
    ($tr:ident, $method:ident, $checked:ident) => {
        impl<C: Scalar> std::ops::$tr<&TruncPoly<C>> for &TruncPoly<C> {
            type Output = TruncPoly<C>;
            fn $method(self, rhs: &TruncPoly<C>) -> TruncPoly<C> {
                self.$checked(rhs).expect("operands from the same ring")
            }
        }
        impl<C: Scalar> std::ops::$tr<TruncPoly<C>> for TruncPoly<C> {
            type Output = TruncPoly<C>;
            fn $method(self, rhs: TruncPoly<C>) -> TruncPoly<C> {
                self.$checked(&rhs).expect("operands from the same ring")
            }
        }
        impl<C: Scalar> std::ops::$tr<&TruncPoly<C>> for TruncPoly<C> {
            type Output = TruncPoly<C>;
            fn $method(self, rhs: &TruncPoly<C>) -> TruncPoly<C> {
                self.$checked(rhs).expect("operands from the same ring")
            }
        }
    };
}

poly_binop!(Add, add, checked_add);
poly_binop!(Sub, sub, checked_sub);
poly_binop!(Mul, mul, checked_mul);

impl<C: Scalar> std::ops::Neg for TruncPoly<C> {
    type Output = TruncPoly<C>;
    fn neg(self) -> TruncPoly<C> {
        TruncPoly::neg(&self)
    }
}

/// Square matrix of truncated polynomials, row-major.
pub type PolyMat<C> = Vec<Vec<TruncPoly<C>>>;

pub fn mat_identity<C: Scalar>(ring: PolyRing, dim: usize) -> PolyMat<C> {
    (0..dim).map(|r| (0..dim).map(|c| if r == c { ring.one() } else { ring.zero() }).collect()).collect()
}

pub fn mat_mul<C: Scalar>(a: &PolyMat<C>, b: &PolyMat<C>) -> PolyMat<C> {
    let n = a.len();
    let ring = a[0][0].ring();
    (0..n)
        .map(|r| {
            (0..n)
                .map(|c| {
                    let mut acc = ring.zero();
                    for k in 0..n {
                        if a[r][k].is_zero() || b[k][c].is_zero() {
                            continue;
                        }
                        acc = acc + &a[r][k] * &b[k][c];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn mat_transpose<C: Scalar>(a: &PolyMat<C>) -> PolyMat<C> {
    let n = a.len();
    (0..n).map(|r| (0..n).map(|c| a[c][r].clone()).collect()).collect()
}

pub fn mat_conj<C: Scalar>(a: &PolyMat<C>) -> PolyMat<C> {
    a.iter().map(|row| row.iter().map(|p| p.conj()).collect()).collect()
}

/// Inverse as a truncated series around the (invertible) constant part.
pub fn mat_inverse<C: Scalar>(a: &PolyMat<C>) -> Result<PolyMat<C>> {
    let n = a.len();
    let ring = a[0][0].ring();
    let a0 = SqMat::from_fn(n, |r, c| a[r][c].constant_term());
    let a0inv = a0
        .inverse()
        .ok_or_else(|| NijError::DegenerateStructure { point: 0, reason: "singular constant part".into() })?;
    let a0inv_p: PolyMat<C> = (0..n).map(|r| (0..n).map(|c| ring.constant(a0inv.get(r, c).clone())).collect()).collect();
    // A = A0 (I + E), E = A0⁻¹ (A - A0)
    let rest: PolyMat<C> =
        (0..n).map(|r| (0..n).map(|c| &a[r][c] - &ring.constant(a[r][c].constant_term())).collect()).collect();
    let e = mat_mul(&a0inv_p, &rest);
    let neg_e: PolyMat<C> = e.iter().map(|row| row.iter().map(|p| p.neg()).collect()).collect();
    let mut series = mat_identity(ring, n);
    let mut power = mat_identity(ring, n);
    for _ in 0..ring.cap + ring.eps_cap {
        power = mat_mul(&power, &neg_e);
        for r in 0..n {
            for c in 0..n {
                series[r][c] = &series[r][c] + &power[r][c];
            }
        }
    }
    Ok(mat_mul(&series, &a0inv_p))
}

/// Leibniz determinant (dimensions are tiny).
pub fn mat_det<C: Scalar>(a: &PolyMat<C>) -> TruncPoly<C> {
    let n = a.len();
    let ring = a[0][0].ring();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut total = ring.zero();
    permute(&mut perm, 0, &mut |p| {
        let sign = permutation_sign(p);
        let mut term = ring.constant(C::from_ratio(sign, 1));
        for (r, &c) in p.iter().enumerate() {
            term = &term * &a[r][c];
        }
        total = &total + &term;
    });
    total
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

fn permutation_sign(p: &[usize]) -> i64 {
    let mut inversions = 0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            if p[i] > p[j] {
                inversions += 1;
            }
        }
    }
    if inversions % 2 == 0 {
        1
    } else {
        -1
    }
}
