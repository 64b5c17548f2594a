//! First-order jet data of a structure at a point and the quadratic
//! coordinate change that makes the chart almost holomorphic and geodesic.
//!
//! Triple-indexed coefficients are stored flat, `x[i][j][k]` at `i·n² + j·n + k`.

use nalgebra::DMatrix;
use rand::Rng;
use serde_json::Value;

use super::poly::{mat_conj, mat_inverse, mat_mul, mat_transpose, PolyMat, PolyRing, TruncPoly};
use crate::acstruct::{point_frame, PointFrame, CONSTRAINT_TOL};
use crate::error::{NijError, Result};
use crate::scalar::{cq, Scalar, C64, CQ};

fn idx(n: usize, i: usize, j: usize, k: usize) -> usize {
    (i * n + j) * n + k
}

/// Coefficients `a, a′` of `∂̄_J z_k = Σ (a_{kjl} z_j + a′_{kjl} z̄_j) conj(∂_J z_l)`
/// and `τ, τ′` of `ω_{ml̄} = δ_{ml} + Σ (τ_{ml̄s} z_s + τ′_{ml̄s̄} z̄_s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JetData<C> {
    pub n: usize,
    pub a: Vec<C>,
    pub a_prime: Vec<C>,
    pub tau: Vec<C>,
    pub tau_prime: Vec<C>,
}

impl<C: Scalar> JetData<C> {
    pub fn zeros(n: usize) -> Self {
        let z = vec![C::zero(); n * n * n];
        JetData { n, a: z.clone(), a_prime: z.clone(), tau: z.clone(), tau_prime: z }
    }

    pub fn a(&self, k: usize, j: usize, l: usize) -> &C {
        &self.a[idx(self.n, k, j, l)]
    }

    pub fn a_prime(&self, k: usize, j: usize, l: usize) -> &C {
        &self.a_prime[idx(self.n, k, j, l)]
    }

    pub fn tau(&self, m: usize, l: usize, s: usize) -> &C {
        &self.tau[idx(self.n, m, l, s)]
    }

    pub fn tau_prime(&self, m: usize, l: usize, s: usize) -> &C {
        &self.tau_prime[idx(self.n, m, l, s)]
    }

    /// `τ′` forced by `ω_{ml̄} = conj(ω_{lm̄})`: `τ′_{ml̄s̄} = conj(τ_{lm̄s})`.
    pub fn hermitian_tau_prime(n: usize, tau: &[C]) -> Vec<C> {
        let mut out = vec![C::zero(); n * n * n];
        for m in 0..n {
            for l in 0..n {
                for s in 0..n {
                    out[idx(n, m, l, s)] = tau[idx(n, l, m, s)].conj();
                }
            }
        }
        out
    }

    /// Builds jet data with `τ′` derived from `τ`.
    pub fn new(n: usize, a: Vec<C>, a_prime: Vec<C>, tau: Vec<C>) -> Result<Self> {
        let len = n * n * n;
        for (name, v) in [("a", &a), ("a_prime", &a_prime), ("tau", &tau)] {
            if v.len() != len {
                return Err(NijError::ShapeMismatch { expected: format!("{name} with {len} entries"), got: v.len().to_string() });
            }
        }
        let tau_prime = Self::hermitian_tau_prime(n, &tau);
        Ok(JetData { n, a, a_prime, tau, tau_prime })
    }

    /// `max |τ′_{ml̄s̄} − conj(τ_{lm̄s})|`.
    pub fn hermitian_residual(&self) -> f64 {
        let expected = Self::hermitian_tau_prime(self.n, &self.tau);
        expected.iter().zip(&self.tau_prime).map(|(e, t)| (e.clone() - t.clone()).magnitude()).fold(0.0, f64::max)
    }

    pub fn map<D: Scalar>(&self, f: impl Fn(&C) -> D) -> JetData<D> {
        let m = |v: &Vec<C>| v.iter().map(&f).collect();
        JetData { n: self.n, a: m(&self.a), a_prime: m(&self.a_prime), tau: m(&self.tau), tau_prime: m(&self.tau_prime) }
    }

    pub fn to_c64(&self) -> JetData<C64> {
        self.map(|c| c.to_c64())
    }
}

/// Quadratic correction `w_k = z_k + Σ α_{klm} z_l z_m + β_{klm} z_l z̄_m + γ_{klm} z̄_l z̄_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordCorrection<C> {
    pub n: usize,
    pub alpha: Vec<C>,
    pub beta: Vec<C>,
    pub gamma: Vec<C>,
}

/// Which closed form of the holomorphic quadratic coefficient to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaForm {
    /// `α_{klm} = ¼(conj a_{lkm} + conj a_{mkl} + τ_{lk̄m} + τ_{mk̄l})`, solving the first-order metric condition.
    Derived,
    /// `α_{klm} = −¼(a_{lkm} + a_{mkl} + τ_{lk̄m} + τ_{mk̄l})`, the closed form with a sign slip; fails the metric condition.
    Displayed,
}

pub fn correction_coeffs<C: Scalar>(jd: &JetData<C>) -> CoordCorrection<C> {
    correction_coeffs_with(jd, AlphaForm::Derived)
}

pub fn correction_coeffs_with<C: Scalar>(jd: &JetData<C>, form: AlphaForm) -> CoordCorrection<C> {
    let n = jd.n;
    let quarter = C::from_ratio(1, 4);
    let mut cc = CoordCorrection { n, alpha: vec![C::zero(); n * n * n], beta: vec![C::zero(); n * n * n], gamma: vec![C::zero(); n * n * n] };
    for k in 0..n {
        for l in 0..n {
            for m in 0..n {
                let taus = jd.tau(l, k, m).clone() + jd.tau(m, k, l).clone();
                cc.alpha[idx(n, k, l, m)] = match form {
                    AlphaForm::Derived => quarter.clone() * (jd.a(l, k, m).conj() + jd.a(m, k, l).conj() + taus),
                    AlphaForm::Displayed => -(quarter.clone() * (jd.a(l, k, m).clone() + jd.a(m, k, l).clone() + taus)),
                };
                cc.beta[idx(n, k, l, m)] = -jd.a(k, l, m).clone();
                cc.gamma[idx(n, k, l, m)] = -(quarter.clone() * (jd.a_prime(k, l, m).clone() + jd.a_prime(k, m, l).clone()));
            }
        }
    }
    cc
}

/// The corrected coordinates as truncated polynomials in `z, z̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedChart<C: Scalar> {
    pub w: Vec<TruncPoly<C>>,
}

impl<C: Scalar> AdaptedChart<C> {
    pub fn new(cc: &CoordCorrection<C>, ring: PolyRing) -> Self {
        let n = cc.n;
        let w = (0..n)
            .map(|k| {
                let mut wk = ring.z(k);
                for l in 0..n {
                    for m in 0..n {
                        let i = idx(n, k, l, m);
                        wk = wk
                            + (&ring.z::<C>(l) * &ring.z(m)).scale(&cc.alpha[i])
                            + (&ring.z::<C>(l) * &ring.zbar(m)).scale(&cc.beta[i])
                            + (&ring.zbar::<C>(l) * &ring.zbar(m)).scale(&cc.gamma[i]);
                    }
                }
                wk
            })
            .collect();
        AdaptedChart { w }
    }
}

/// Exact replay of the chart conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartVerification<C> {
    pub n: usize,
    /// `z_l`-coefficients `b_{klm}` of `∂̄_J w_k` in the frame `conj(∂_J z_m)`.
    pub b: Vec<C>,
    /// `z̄_l`-coefficients `b′_{klm}`.
    pub b_prime: Vec<C>,
    /// `b′_{klm} + b′_{kml}`.
    pub b_prime_sym: Vec<C>,
    /// `(b′_{klm} − b′_{kml}) − (a′_{klm} − a′_{kml})`.
    pub obstruction: Vec<C>,
    /// `c_{ml̄j} + c_{jl̄m}`, `c` the `z_j`-coefficients of `ω_{ml̄}` in the `w` coframe.
    pub omega_sym: Vec<C>,
}

fn max_mag<C: Scalar>(v: &[C]) -> f64 {
    v.iter().map(|c| c.magnitude()).fold(0.0, f64::max)
}

impl<C: Scalar> ChartVerification<C> {
    pub fn residual_holomorphic(&self) -> f64 {
        max_mag(&self.b)
    }

    pub fn residual_symmetric(&self) -> f64 {
        max_mag(&self.b_prime_sym)
    }

    pub fn residual_metric(&self) -> f64 {
        max_mag(&self.omega_sym)
    }

    pub fn residual_obstruction(&self) -> f64 {
        max_mag(&self.obstruction)
    }

    /// Every residual vanishes identically (exact zero, no tolerance).
    pub fn is_exact(&self) -> bool {
        [&self.b, &self.b_prime_sym, &self.omega_sym, &self.obstruction].iter().all(|v| v.iter().all(|c| c.is_zero()))
    }
}

/// `f_{lm} = Σ_j a_{ljm} z_j + a′_{ljm} z̄_j`, so that `∂̄_J z_l = Σ_m f_{lm} conj(∂_J z_m)`.
fn dbar_matrix<C: Scalar>(jd: &JetData<C>, ring: PolyRing) -> PolyMat<C> {
    let n = jd.n;
    (0..n)
        .map(|l| {
            (0..n)
                .map(|m| {
                    let lin: Vec<C> = (0..n).map(|j| jd.a(l, j, m).clone()).collect();
                    let lin_bar: Vec<C> = (0..n).map(|j| jd.a_prime(l, j, m).clone()).collect();
                    ring.affine(C::zero(), &lin, &lin_bar)
                })
                .collect()
        })
        .collect()
}

pub fn verify_chart<C: Scalar>(cc: &CoordCorrection<C>, jd: &JetData<C>) -> Result<ChartVerification<C>> {
    let n = jd.n;
    let len = n * n * n;
    if cc.n != n || [&cc.alpha, &cc.beta, &cc.gamma].iter().any(|v| v.len() != len) {
        return Err(NijError::Inconsistent(format!("correction for n = {} against jet data for n = {n}", cc.n)));
    }
    if [&jd.a, &jd.a_prime, &jd.tau, &jd.tau_prime].iter().any(|v| v.len() != len) {
        return Err(NijError::Inconsistent("jet data arrays have the wrong length".into()));
    }
    let ring = PolyRing::new(n, 2);
    let chart = AdaptedChart::new(cc, ring);
    let f = dbar_matrix(jd, ring);

    // G_{km} = Σ_l ∂w_k/∂z_l f_{lm} + ∂w_k/∂z̄_m
    let mut b = vec![C::zero(); len];
    let mut b_prime = vec![C::zero(); len];
    for k in 0..n {
        for m in 0..n {
            let mut g = chart.w[k].dzbar(m);
            for l in 0..n {
                g = g + &chart.w[k].dz(l) * &f[l][m];
            }
            for l in 0..n {
                b[idx(n, k, l, m)] = g.coeff_z(l);
                b_prime[idx(n, k, l, m)] = g.coeff_zbar(l);
            }
        }
    }
    let mut b_prime_sym = vec![C::zero(); len];
    let mut obstruction = vec![C::zero(); len];
    for k in 0..n {
        for l in 0..n {
            for m in 0..n {
                let i = idx(n, k, l, m);
                let t = idx(n, k, m, l);
                b_prime_sym[i] = b_prime[i].clone() + b_prime[t].clone();
                obstruction[i] = (b_prime[i].clone() - b_prime[t].clone()) - (jd.a_prime[i].clone() - jd.a_prime[t].clone());
            }
        }
    }

    // ∂_J w_m = Σ_l P_{ml} ∂_J z_l with P_{ml} = ∂w_m/∂z_l + Σ_q ∂w_m/∂z̄_q conj(f_{ql})
    let fbar = mat_conj(&f);
    let p: PolyMat<C> = (0..n)
        .map(|m| {
            (0..n)
                .map(|l| {
                    let mut e = chart.w[m].dz(l);
                    for q in 0..n {
                        e = e + &chart.w[m].dzbar(q) * &fbar[q][l];
                    }
                    e
                })
                .collect()
        })
        .collect();
    let omega: PolyMat<C> = (0..n)
        .map(|m| {
            (0..n)
                .map(|l| {
                    let lin: Vec<C> = (0..n).map(|s| jd.tau(m, l, s).clone()).collect();
                    let lin_bar: Vec<C> = (0..n).map(|s| jd.tau_prime(m, l, s).clone()).collect();
                    ring.affine(if m == l { C::one() } else { C::zero() }, &lin, &lin_bar)
                })
                .collect()
        })
        .collect();
    let pinv = mat_inverse(&p)?;
    let omega_w = mat_mul(&mat_mul(&mat_transpose(&pinv), &omega), &mat_conj(&pinv));
    let mut omega_sym = vec![C::zero(); len];
    for m in 0..n {
        for l in 0..n {
            for j in 0..n {
                omega_sym[idx(n, m, l, j)] = omega_w[m][l].coeff_z(j) + omega_w[j][l].coeff_z(m);
            }
        }
    }
    Ok(ChartVerification { n, b, b_prime, b_prime_sym, obstruction, omega_sym })
}

/// Random jet data with small Gaussian-rational entries and Hermitian `τ`.
pub fn random_jetdata<R: Rng>(n: usize, rng: &mut R) -> JetData<CQ> {
    let len = n * n * n;
    let draw = |rng: &mut R| -> Vec<CQ> {
        (0..len)
            .map(|_| cq((rng.gen_range(-6..=6), rng.gen_range(1..=5)), (rng.gen_range(-6..=6), rng.gen_range(1..=5))))
            .collect()
    };
    let a = draw(rng);
    let a_prime = draw(rng);
    let tau = draw(rng);
    JetData::new(n, a, a_prime, tau).expect("consistent lengths")
}

/// Jet data of `J` at grid point `p` from spectral derivatives.
pub fn extract_jetdata(j: &crate::acstruct::ACField, p: usize) -> Result<JetData<C64>> {
    let grid = j.grid();
    if p >= grid.npoints() {
        return Err(NijError::RejectedInput(format!("point {p} outside grid of {} points", grid.npoints())));
    }
    let d = grid.dim();
    let dj = crate::nijenhuis::end_derivatives(j.field());
    let djp: Vec<DMatrix<f64>> = (0..d).map(|a| crate::acstruct::mat_at(&dj[a], p)).collect();
    extract_jetdata_with(&j.matrix(p), &djp)
}

/// `K = Σ_a v^a ∂_a J` for a complex direction `v`.
fn directional(dj: &[DMatrix<f64>], v: &[C64]) -> DMatrix<C64> {
    let d = dj[0].nrows();
    let mut k = DMatrix::<C64>::zeros(d, d);
    for (a, m) in dj.iter().enumerate() {
        k += m.map(|x| C64::new(x, 0.0)) * v[a];
    }
    k
}

/// First-order change of `ω_{ml̄} = g(V_m, V̄_l)`, `V` dual to `(∂_J z, conj ∂_J z)`,
/// along a direction with `dJ = k`.
pub(crate) fn omega_derivative(pf: &PointFrame, k: &DMatrix<C64>) -> DMatrix<C64> {
    let n = pf.n();
    let d = 2 * n;
    let jc = pf.j.map(|x| C64::new(x, 0.0));
    let g = pf.g.map(|x| C64::new(x, 0.0));
    let half_i = C64::new(0.0, 0.5);
    let theta = pf.finv.rows(0, n).into_owned();
    let theta_bar = pf.finv.rows(n, n).into_owned();
    let mut dc = DMatrix::<C64>::zeros(d, d);
    dc.rows_mut(0, n).copy_from(&(&theta * k * (-half_i)));
    dc.rows_mut(n, n).copy_from(&(&theta_bar * k * half_i));
    let dv = -(&pf.f * dc * &pf.f);
    let dg = (k.transpose() * &jc + jc.transpose() * k) * C64::new(0.5, 0.0);
    let v1 = pf.f.columns(0, n);
    let v2 = pf.f.columns(n, n);
    let dv1 = dv.columns(0, n);
    let dv2 = dv.columns(n, n);
    dv1.transpose() * &g * v2 + v1.transpose() * dg * v2 + v1.transpose() * &g * dv2
}

/// Jet data from `J(p)` and its first partials `∂_a J(p)` (analytic or sampled).
pub fn extract_jetdata_with(jp: &DMatrix<f64>, dj: &[DMatrix<f64>]) -> Result<JetData<C64>> {
    let d = jp.nrows();
    let n = d / 2;
    let sq = jp * jp + DMatrix::identity(d, d);
    let residual = sq.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if residual > CONSTRAINT_TOL {
        return Err(NijError::NotAlmostComplex { residual });
    }
    if dj.len() != d {
        return Err(NijError::ShapeMismatch { expected: format!("{d} partial derivatives"), got: dj.len().to_string() });
    }
    let pf = point_frame(jp, 0)?;
    let half_i = C64::new(0.0, 0.5);
    let theta = pf.finv.rows(0, n).into_owned();
    let len = n * n * n;
    let mut jd = JetData::<C64>::zeros(n);
    for s in 0..n {
        let e: Vec<C64> = pf.f.column(s).iter().copied().collect();
        let eb: Vec<C64> = pf.f.column(s + n).iter().copied().collect();
        let ks = directional(dj, &e);
        let kbs = directional(dj, &eb);
        let ak = &theta * &ks * pf.f.columns(n, n) * half_i;
        let akb = &theta * &kbs * pf.f.columns(n, n) * half_i;
        let om = omega_derivative(&pf, &ks);
        let omb = omega_derivative(&pf, &kbs);
        for k in 0..n {
            for l in 0..n {
                jd.a[idx(n, k, s, l)] = ak[(k, l)];
                jd.a_prime[idx(n, k, s, l)] = akb[(k, l)];
                jd.tau[idx(n, k, l, s)] = om[(k, l)];
                jd.tau_prime[idx(n, k, l, s)] = omb[(k, l)];
            }
        }
    }
    debug_assert_eq!(jd.a.len(), len);
    Ok(jd)
}

fn rational_to_json(q: &num_rational::BigRational) -> Value {
    let num: i64 = q.numer().try_into().unwrap_or(i64::MAX);
    let den: i64 = q.denom().try_into().unwrap_or(i64::MAX);
    Value::Array(vec![num.into(), den.into()])
}

fn complex_to_json(c: &CQ) -> Value {
    Value::Array(vec![rational_to_json(&c.re), rational_to_json(&c.im)])
}

fn tensor_to_json(n: usize, v: &[CQ]) -> Value {
    Value::Array(
        (0..n)
            .map(|i| Value::Array((0..n).map(|j| Value::Array((0..n).map(|k| complex_to_json(&v[idx(n, i, j, k)])).collect())).collect()))
            .collect(),
    )
}

fn parse_rational(v: &Value) -> Result<num_rational::BigRational> {
    let pair = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| NijError::RejectedInput(format!("expected [num, den], got {v}")))?;
    let num = pair[0].as_i64().ok_or_else(|| NijError::RejectedInput(format!("non-integer numerator {}", pair[0])))?;
    let den = pair[1].as_i64().ok_or_else(|| NijError::RejectedInput(format!("non-integer denominator {}", pair[1])))?;
    if den == 0 {
        return Err(NijError::RejectedInput("zero denominator".into()));
    }
    Ok(num_rational::BigRational::new(num.into(), den.into()))
}

fn parse_complex(v: &Value) -> Result<CQ> {
    let pair = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| NijError::RejectedInput(format!("expected [re, im], got {v}")))?;
    Ok(CQ::new(parse_rational(&pair[0])?, parse_rational(&pair[1])?))
}

fn parse_tensor(v: &Value, n: usize, name: &str) -> Result<Vec<CQ>> {
    let shape_err = || NijError::ShapeMismatch { expected: format!("{name}: {n}×{n}×{n} array"), got: "other".into() };
    let outer = v.as_array().filter(|a| a.len() == n).ok_or_else(shape_err)?;
    let mut out = Vec::with_capacity(n * n * n);
    for row in outer {
        let row = row.as_array().filter(|a| a.len() == n).ok_or_else(shape_err)?;
        for col in row {
            let col = col.as_array().filter(|a| a.len() == n).ok_or_else(shape_err)?;
            for entry in col {
                out.push(parse_complex(entry)?);
            }
        }
    }
    Ok(out)
}

impl JetData<CQ> {
    /// Parses `{"n", "a", "a_prime", "tau", ["tau_prime"]}`; a supplied `τ′`
    /// must agree with the Hermitian one.
    pub fn from_json(doc: &Value) -> Result<Self> {
        let n = doc.get("n").and_then(Value::as_u64).ok_or_else(|| NijError::RejectedInput("missing integer field n".into()))? as usize;
        if n == 0 || n > 4 {
            return Err(NijError::RejectedInput(format!("n = {n} outside 1..=4")));
        }
        let field = |name: &str| doc.get(name).ok_or_else(|| NijError::RejectedInput(format!("missing field {name}")));
        let jd = JetData::new(n, parse_tensor(field("a")?, n, "a")?, parse_tensor(field("a_prime")?, n, "a_prime")?, parse_tensor(field("tau")?, n, "tau")?)?;
        if let Some(tp) = doc.get("tau_prime") {
            let given = parse_tensor(tp, n, "tau_prime")?;
            if given != jd.tau_prime {
                return Err(NijError::Inconsistent("tau_prime is not the conjugate transpose of tau".into()));
            }
        }
        Ok(jd)
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "n": self.n,
            "a": tensor_to_json(self.n, &self.a),
            "a_prime": tensor_to_json(self.n, &self.a_prime),
            "tau": tensor_to_json(self.n, &self.tau),
            "tau_prime": tensor_to_json(self.n, &self.tau_prime),
        })
    }
}

impl CoordCorrection<CQ> {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "n": self.n,
            "alpha": tensor_to_json(self.n, &self.alpha),
            "beta": tensor_to_json(self.n, &self.beta),
            "gamma": tensor_to_json(self.n, &self.gamma),
        })
    }
}

impl ChartVerification<CQ> {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "n": self.n,
            "exact": self.is_exact(),
            "holomorphic_residual": tensor_to_json(self.n, &self.b),
            "symmetric_residual": tensor_to_json(self.n, &self.b_prime_sym),
            "metric_residual": tensor_to_json(self.n, &self.omega_sym),
            "obstruction_residual": tensor_to_json(self.n, &self.obstruction),
            "unkillable_part": tensor_to_json(self.n, &self.b_prime),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acstruct::{shear_sine, standard_structure};
    use crate::grid::Grid;
    use num_traits::Zero;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_jets_need_no_correction() {
        for n in 1..=3 {
            let jd = JetData::<CQ>::zeros(n);
            let cc = correction_coeffs(&jd);
            assert!(cc.alpha.iter().chain(&cc.beta).chain(&cc.gamma).all(|c| c.is_zero()));
            assert!(verify_chart(&cc, &jd).unwrap().is_exact());
        }
    }

    #[test]
    fn random_rational_jets_verify_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 3] {
            for _ in 0..3 {
                let jd = random_jetdata(n, &mut rng);
                let cc = correction_coeffs(&jd);
                for i in 0..n * n * n {
                    assert_eq!(cc.beta[i], -jd.a[i].clone());
                }
                let v = verify_chart(&cc, &jd).unwrap();
                assert!(v.is_exact(), "n = {n}: {v:?}");
            }
        }
    }

    #[test]
    fn perturbed_beta_shows_in_that_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let jd = random_jetdata(2, &mut rng);
        let mut cc = correction_coeffs(&jd);
        let target = idx(2, 1, 0, 1);
        cc.beta[target] = cc.beta[target].clone() + cq((1, 3), (0, 1));
        let v = verify_chart(&cc, &jd).unwrap();
        for (i, b) in v.b.iter().enumerate() {
            if i == target {
                assert_eq!(*b, cq((1, 3), (0, 1)));
            } else {
                assert!(b.is_zero());
            }
        }
    }

    #[test]
    fn antisymmetric_a_prime_is_not_corrected() {
        let n = 2;
        let mut jd = JetData::<CQ>::zeros(n);
        jd.a_prime[idx(n, 0, 0, 1)] = cq((2, 1), (1, 3));
        jd.a_prime[idx(n, 0, 1, 0)] = cq((-2, 1), (-1, 3));
        let cc = correction_coeffs(&jd);
        assert!(cc.gamma.iter().all(|c| c.is_zero()));
        let v = verify_chart(&cc, &jd).unwrap();
        assert!(v.is_exact());
        assert_eq!(v.b_prime, jd.a_prime);
    }

    #[test]
    fn displayed_alpha_fails_metric_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let jd = random_jetdata(2, &mut rng);
        let v = verify_chart(&correction_coeffs_with(&jd, AlphaForm::Displayed), &jd).unwrap();
        assert_eq!(v.residual_holomorphic(), 0.0);
        assert_eq!(v.residual_symmetric(), 0.0);
        assert!(v.residual_metric() > 1e-3);
    }

    #[test]
    fn floating_adapter_agrees_with_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let jd = random_jetdata(3, &mut rng);
        let exact = verify_chart(&correction_coeffs(&jd), &jd).unwrap();
        let jf = jd.to_c64();
        let cf = correction_coeffs(&jf);
        let float = verify_chart(&cf, &jf).unwrap();
        let ce = correction_coeffs(&jd);
        for (x, y) in ce.alpha.iter().chain(&ce.beta).chain(&ce.gamma).zip(cf.alpha.iter().chain(&cf.beta).chain(&cf.gamma)) {
            assert!((x.to_c64() - y).norm() < 1e-12);
        }
        for (x, y) in exact.b_prime.iter().zip(&float.b_prime) {
            assert!((x.to_c64() - y).norm() < 1e-12);
        }
        assert!(float.residual_metric() < 1e-12 && float.residual_holomorphic() < 1e-12);
    }

    #[test]
    fn json_roundtrip_and_inconsistent_tau_prime() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let jd = random_jetdata(2, &mut rng);
        let doc = jd.to_json();
        assert_eq!(JetData::from_json(&doc).unwrap(), jd);
        let mut bad = doc.clone();
        bad["tau_prime"][0][1][0] = serde_json::json!([[1, 1], [1, 1]]);
        assert!(matches!(JetData::from_json(&bad), Err(NijError::Inconsistent(_))));
        let mut no_tp = doc;
        no_tp.as_object_mut().unwrap().remove("tau_prime");
        assert_eq!(JetData::from_json(&no_tp).unwrap(), jd);
    }

    #[test]
    fn standard_structure_has_zero_jets() {
        let g = Grid::new(2, 8).unwrap();
        let jd = extract_jetdata(&standard_structure(g), 5).unwrap();
        let all = jd.a.iter().chain(&jd.a_prime).chain(&jd.tau).chain(&jd.tau_prime);
        assert!(all.map(|c| c.norm()).fold(0.0, f64::max) < 1e-13);
    }

    /// Canonical frame `e_k = (∂_{2k} − i∂_{2k+1})/√2` of `J₀`: the sheared block
    /// contributes `a_{101} = a′_{101} = i f′(0)/(2√2)`, nothing else.
    #[test]
    fn shear_jets_match_closed_form() {
        let amp = 0.3;
        let fp = amp * 2.0 * std::f64::consts::PI;
        let g = Grid::new(2, 16).unwrap();
        let j = shear_sine(g, amp);
        let spectral = extract_jetdata(&j, 0).unwrap();
        let mut dj = vec![DMatrix::<f64>::zeros(4, 4); 4];
        dj[0][(2, 2)] = fp;
        dj[0][(3, 3)] = -fp;
        let analytic = extract_jetdata_with(&j.matrix(0), &dj).unwrap();

        // phases of the computed frame against the canonical one
        let pf = point_frame(&j.matrix(0), 0).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let canon = |k: usize| {
            let mut v = vec![C64::zero(); 4];
            v[2 * k] = C64::new(s, 0.0);
            v[2 * k + 1] = C64::new(0.0, -s);
            v
        };
        // e_k = Σ_m canon_m U_{mk}; U_{mk} = conj(canon_m)·e_k
        let u = DMatrix::from_fn(2, 2, |m, k| (0..4).map(|a| canon(m)[a].conj() * pf.f[(a, k)]).sum::<C64>());
        let base = C64::new(0.0, fp * s / 2.0);
        let n = 2;
        for k in 0..n {
            for jj in 0..n {
                for l in 0..n {
                    // a_{kjl} → Σ conj(U_{m k}) U_{r j} conj(U_{s l}) a_{mrs}
                    let a_exp = u[(1, k)].conj() * u[(0, jj)] * u[(1, l)].conj() * base;
                    let ap_exp = u[(1, k)].conj() * u[(0, jj)].conj() * u[(1, l)].conj() * base;
                    for jd in [&spectral, &analytic] {
                        assert!((jd.a(k, jj, l) - a_exp).norm() < 1e-10, "a[{k}{jj}{l}]");
                        assert!((jd.a_prime(k, jj, l) - ap_exp).norm() < 1e-10, "a'[{k}{jj}{l}]");
                    }
                }
            }
        }
        assert!(spectral.hermitian_residual() < 1e-12);
        assert!(analytic.hermitian_residual() < 1e-12);
    }

    #[test]
    fn extracted_jets_admit_a_chart() {
        let g = Grid::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let j = crate::acstruct::random_structure(g, &mut rng, 4, 1, 0.5).unwrap();
        let jd = extract_jetdata(&j, 3).unwrap();
        assert!(jd.hermitian_residual() < 1e-12);
        let v = verify_chart(&correction_coeffs(&jd), &jd).unwrap();
        assert!(v.residual_holomorphic() < 1e-12 && v.residual_symmetric() < 1e-12 && v.residual_metric() < 1e-12);
    }
}
