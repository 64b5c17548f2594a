//! Euler–Lagrange data at a point in adapted coordinates: the `g′` pairing
//! components, exact replays of the metric-derivative and product-rule
//! identities, and the tensors `T̃` (for `Ñ`) and `T_𝒩` (for `𝒩`).
//!
//! Capital indices run over `0..2n`: `K < n` stands for `∂/∂w_K`, `K ≥ n` for
//! `∂/∂w̄_{K-n}`. Endomorphism components `E^K_L` sit in row `K`, column `L`.
//! Triple-indexed tensors store `x[a][b][c]` at `(a·n + b)·n + c`; for the
//! Nijenhuis tensor that is `N^k_{īj̄}` at `(k, i, j)`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::acstruct::{gprime_components, point_frame, ACField, PointFrame, TangentField};
use crate::error::{NijError, Result};
use crate::grid::derivative_at;
use crate::jets::poly::{mat_conj, mat_det, mat_inverse, mat_mul, mat_transpose, Monomial, PolyMat, PolyRing, TruncPoly};
use crate::jets::{correction_coeffs, extract_jetdata_with, verify_chart, AdaptedChart, CoordCorrection, JetData};
use crate::nijenhuis::nijenhuis_real;
use crate::scalar::{cq, Scalar, SqMat, C64, CQ};
use crate::variation::{Functional, Variation};

fn idx(n: usize, a: usize, b: usize, c: usize) -> usize {
    (a * n + b) * n + c
}

/// `g′_{KL} = ½ g(f_K, J f_L)` in all four placements, `g` the flat background
/// metric (so that `γ = ½(g(u·,J·) + g(J·,u·))` is the variation of `g_J`).
#[derive(Clone, Debug)]
pub struct GPrime {
    pub n: usize,
    pub m: DMatrix<C64>,
}

impl GPrime {
    pub fn at(pf: &PointFrame) -> Self {
        GPrime { n: pf.n(), m: gprime_components(pf) }
    }

    pub fn get(&self, k: usize, l: usize) -> C64 {
        self.m[(k, l)]
    }

    /// Block `g′_{ij}`, `g′_{īj}`, `g′_{ij̄}` or `g′_{īj̄}`.
    pub fn block(&self, first_barred: bool, second_barred: bool) -> DMatrix<C64> {
        let n = self.n;
        let (r, c) = (if first_barred { n } else { 0 }, if second_barred { n } else { 0 });
        self.m.view((r, c), (n, n)).into_owned()
    }

    /// Largest deviation from `½ g(f_K, J f_L)` evaluated entry by entry.
    pub fn consistency_residual(&self, pf: &PointFrame) -> f64 {
        let d = 2 * self.n;
        let mut worst = 0.0f64;
        for k in 0..d {
            for l in 0..d {
                let mut s = C64::new(0.0, 0.0);
                for a in 0..d {
                    for b in 0..d {
                        let jfl: C64 = (0..d).map(|c| pf.j[(b, c)] * pf.f[(c, l)]).sum();
                        if a == b {
                            s += pf.f[(a, k)] * jfl;
                        }
                    }
                }
                worst = worst.max((s * 0.5 - self.m[(k, l)]).norm());
            }
        }
        worst
    }

    /// `γ_{km̄} = u^V_k g′_{V m̄} + u^V_{m̄} g′_{V k}` from frame components of `u`.
    pub fn gamma(&self, uc: &DMatrix<C64>) -> DMatrix<C64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |k, m| {
            (0..2 * n).map(|v| uc[(v, k)] * self.m[(v, m + n)] + uc[(v, m + n)] * self.m[(v, k)]).sum()
        })
    }

    /// Volume-variation density `tr(γ)·|N|²`.
    pub fn volume_integrand(&self, uc: &DMatrix<C64>, norm2: f64) -> C64 {
        self.gamma(uc).trace() * norm2
    }
}

pub fn gprime(j: &ACField, p: usize) -> Result<GPrime> {
    Ok(GPrime::at(&point_frame(&j.matrix(p), p)?))
}

/// First-order jet of the metric perturbation `γ_{ab̄}` (Hermitian):
/// value `g0[a][b]`, `∂_s` coefficients `g1`, `∂̄_s` coefficients `g1p`.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaJet<C> {
    pub n: usize,
    pub g0: Vec<C>,
    pub g1: Vec<C>,
    pub g1p: Vec<C>,
}

impl<C: Scalar> GammaJet<C> {
    pub fn zeros(n: usize) -> Self {
        GammaJet { n, g0: vec![C::zero(); n * n], g1: vec![C::zero(); n * n * n], g1p: vec![C::zero(); n * n * n] }
    }
}

fn random_cq<R: Rng>(rng: &mut R) -> CQ {
    cq((rng.gen_range(-5..=5), rng.gen_range(1..=4)), (rng.gen_range(-5..=5), rng.gen_range(1..=4)))
}

pub fn random_gamma_jet<R: Rng>(n: usize, rng: &mut R) -> GammaJet<CQ> {
    let mut g = GammaJet::<CQ>::zeros(n);
    for a in 0..n {
        for b in a..n {
            let v = random_cq(rng);
            let v = if a == b { CQ::new(v.re, num_traits::Zero::zero()) } else { v };
            g.g0[a * n + b] = v.clone();
            g.g0[b * n + a] = v.conj();
        }
    }
    for i in 0..n * n * n {
        g.g1[i] = random_cq(rng);
    }
    for a in 0..n {
        for b in 0..n {
            for s in 0..n {
                g.g1p[idx(n, a, b, s)] = g.g1[idx(n, b, a, s)].conj();
            }
        }
    }
    g
}

/// `h_{ab̄} = δ + Σ_s(τ_{ab̄s} w_s + τ′_{ab̄s} w̄_s) + ε γ_{ab̄}(w)`, with the
/// perturbation scale `ε` as the single order parameter.
fn metric_poly<C: Scalar>(n: usize, tau: &[C], tau_prime: &[C], gamma: &GammaJet<C>, ring: PolyRing) -> PolyMat<C> {
    let eps = ring.eps::<C>(0);
    (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    let lin: Vec<C> = (0..n).map(|s| tau[idx(n, a, b, s)].clone()).collect();
                    let lin_bar: Vec<C> = (0..n).map(|s| tau_prime[idx(n, a, b, s)].clone()).collect();
                    let base = ring.affine(if a == b { C::one() } else { C::zero() }, &lin, &lin_bar);
                    let gl: Vec<C> = (0..n).map(|s| gamma.g1[idx(n, a, b, s)].clone()).collect();
                    let glb: Vec<C> = (0..n).map(|s| gamma.g1p[idx(n, a, b, s)].clone()).collect();
                    let g = ring.affine(gamma.g0[a * n + b].clone(), &gl, &glb);
                    base + &eps * &g
                })
                .collect()
        })
        .collect()
}

fn jet_ring(n: usize) -> PolyRing {
    PolyRing::new(n, 1).with_eps(1, 1)
}

/// Coefficient of `var · ε^e` (or of `ε^e` alone when `var` is `None`).
fn coeff<C: Scalar>(p: &TruncPoly<C>, var: Option<usize>, e: usize) -> C {
    let ring = p.ring();
    let mut exps = vec![0; ring.nvars()];
    if let Some(v) = var {
        exps[v] = 1;
    }
    exps[ring.eps_var(0)] = e;
    p.coefficient(Monomial::from_exponents(&exps))
}

/// Replay of the derivative identities for `h` and `h^{rs̄}` at `p`.
#[derive(Clone, Debug)]
pub struct DeriReport<C> {
    pub n: usize,
    /// Order-zero (in `ε`) part of derivative minus the stated value, for
    /// `∂h_{rs̄}`, `∂̄h_{rs̄}`, `∂h^{rs̄}`, `∂̄h^{rs̄}` at `(r, s, i)`.
    pub residual: [Vec<C>; 4],
    /// The same differences at first order in `ε` (the `O(u)` bucket).
    pub u_bucket: [Vec<C>; 4],
    /// Every coefficient of `conj(h⁻¹)` minus the displayed expansion.
    pub inverse_residual: Vec<C>,
}

impl<C: Scalar> DeriReport<C> {
    pub fn is_exact(&self) -> bool {
        self.residual.iter().flatten().chain(&self.inverse_residual).all(|c| c.is_zero())
    }

    pub fn u_bucket_size(&self) -> f64 {
        self.u_bucket.iter().flatten().map(|c| c.magnitude()).fold(0.0, f64::max)
    }
}

pub fn deri_check<C: Scalar>(jd: &JetData<C>, gamma: &GammaJet<C>) -> Result<DeriReport<C>> {
    let n = jd.n;
    if gamma.n != n {
        return Err(NijError::Inconsistent(format!("γ jet for n = {} against jet data for n = {n}", gamma.n)));
    }
    let ring = jet_ring(n);
    let h = metric_poly(n, &jd.tau, &jd.tau_prime, gamma, ring);
    let hup = mat_conj(&mat_inverse(&h)?);

    let len = n * n * n;
    let mut residual: [Vec<C>; 4] = std::array::from_fn(|_| vec![C::zero(); len]);
    let mut u_bucket: [Vec<C>; 4] = std::array::from_fn(|_| vec![C::zero(); len]);
    for r in 0..n {
        for s in 0..n {
            for i in 0..n {
                let t = idx(n, r, s, i);
                let stated = [
                    jd.tau(r, s, i).clone(),
                    jd.tau_prime(r, s, i).clone(),
                    -jd.tau_prime(r, s, i).conj(),
                    -jd.tau(r, s, i).conj(),
                ];
                let polys = [&h[r][s], &h[r][s], &hup[r][s], &hup[r][s]];
                let vars = [ring.z_var(i), ring.zbar_var(i), ring.z_var(i), ring.zbar_var(i)];
                for q in 0..4 {
                    residual[q][t] = coeff(polys[q], Some(vars[q]), 0) - stated[q].clone();
                    u_bucket[q][t] = coeff(polys[q], Some(vars[q]), 1);
                }
            }
        }
    }

    // δ − conj A − conj γ + conj A conj γ + conj γ conj A
    let zero_gamma = GammaJet::<C>::zeros(n);
    let a_only = metric_poly(n, &jd.tau, &jd.tau_prime, &zero_gamma, ring);
    let a_bar: PolyMat<C> = (0..n)
        .map(|r| (0..n).map(|c| (&a_only[r][c] - &ring.constant(if r == c { C::one() } else { C::zero() })).conj()).collect())
        .collect();
    let g_bar: PolyMat<C> = (0..n).map(|r| (0..n).map(|c| (&h[r][c] - &a_only[r][c]).conj()).collect()).collect();
    let ag = mat_mul(&a_bar, &g_bar);
    let ga = mat_mul(&g_bar, &a_bar);
    let mut inverse_residual = Vec::new();
    for r in 0..n {
        for c in 0..n {
            let delta = ring.constant(if r == c { C::one() } else { C::zero() });
            let displayed = delta - &a_bar[r][c] - &g_bar[r][c] + &ag[r][c] + &ga[r][c];
            let diff = &hup[r][c] - &displayed;
            inverse_residual.extend(diff.terms().map(|(_, v)| v.clone()));
        }
    }
    Ok(DeriReport { n, residual, u_bucket, inverse_residual })
}

/// First-order jets at `p` of everything the Euler–Lagrange tensors read.
#[derive(Clone, Debug, PartialEq)]
pub struct ElJet<C> {
    pub n: usize,
    /// `J^K_L(p)`.
    pub j: SqMat<C>,
    /// `∂_M J^K_L(p)`.
    pub dj: Vec<SqMat<C>>,
    /// `N^k_{īj̄}(p)`.
    pub nij: Vec<C>,
    /// `∂_M N^k_{īj̄}(p)`.
    pub dnij: Vec<Vec<C>>,
    /// First-order coefficients of `ω_{ml̄}`: `∂_s ω_{ml̄} = τ_{ml̄s}`, `∂̄_s ω_{ml̄} = τ′_{ml̄s}`.
    pub tau: Vec<C>,
    pub tau_prime: Vec<C>,
    /// `g′_{KL}(p)`.
    pub gprime: SqMat<C>,
}

impl<C: Scalar> ElJet<C> {
    pub fn to_c64(&self) -> ElJet<C64> {
        let v = |x: &Vec<C>| x.iter().map(|c| c.to_c64()).collect::<Vec<_>>();
        let m = |x: &SqMat<C>| SqMat { dim: x.dim, data: v(&x.data) };
        ElJet {
            n: self.n,
            j: m(&self.j),
            dj: self.dj.iter().map(m).collect(),
            nij: v(&self.nij),
            dnij: self.dnij.iter().map(v).collect(),
            tau: v(&self.tau),
            tau_prime: v(&self.tau_prime),
            gprime: m(&self.gprime),
        }
    }

    /// The same jet with `N` and its derivatives set to zero.
    pub fn without_nijenhuis(&self) -> Self {
        let len = self.n * self.n * self.n;
        ElJet { nij: vec![C::zero(); len], dnij: vec![vec![C::zero(); len]; 2 * self.n], ..self.clone() }
    }
}

/// Random exact jets with Hermitian `τ` (`J`, `N`, `g′` unconstrained).
pub fn random_el_jet<R: Rng>(n: usize, rng: &mut R) -> ElJet<CQ> {
    let d = 2 * n;
    let len = n * n * n;
    let mat = |rng: &mut R| SqMat::from_fn(d, |_, _| random_cq(rng));
    let j = mat(rng);
    let dj = (0..d).map(|_| mat(rng)).collect();
    let gprime = mat(rng);
    let nij = (0..len).map(|_| random_cq(rng)).collect();
    let dnij = (0..d).map(|_| (0..len).map(|_| random_cq(rng)).collect()).collect();
    let tau: Vec<CQ> = (0..len).map(|_| random_cq(rng)).collect();
    let tau_prime = JetData::hermitian_tau_prime(n, &tau);
    ElJet { n, j, dj, nij, dnij, tau, tau_prime, gprime }
}

/// Replay of the four product-rule expansions at `p`.
#[derive(Clone, Debug)]
pub struct LibpReport<C> {
    pub n: usize,
    /// Direct derivatives of the bracketed products, order zero in `ε`;
    /// identities 1 and 4 indexed `(k, s)`, identities 2 and 3 `(s, j)`.
    pub lhs: [SqMat<C>; 4],
    /// The displayed closed forms.
    pub rhs: [SqMat<C>; 4],
    /// First order in `ε` of the direct derivatives (the `O(u)` bucket).
    pub u_bucket: [SqMat<C>; 4],
    /// `det h` minus the displayed expansion, through order `|w|` and order `ε`
    /// at `w = 0`.
    pub det_residual: Vec<C>,
    /// `Σ (lhs − rhs)·u` for the supplied `u` values, per identity.
    pub contracted: [C; 4],
}

impl<C: Scalar> LibpReport<C> {
    pub fn differences(&self) -> [SqMat<C>; 4] {
        std::array::from_fn(|q| self.lhs[q].sub(&self.rhs[q]))
    }

    pub fn is_exact(&self) -> bool {
        self.differences().iter().all(|m| m.data.iter().all(|c| c.is_zero()))
            && self.det_residual.iter().all(|c| c.is_zero())
            && self.contracted.iter().all(|c| c.is_zero())
    }
}

/// Per-term right-hand sides of the product-rule expansions (six terms per
/// identity, in display order).
pub fn libp_terms<C: Scalar>(jet: &ElJet<C>) -> [Vec<SqMat<C>>; 4] {
    let n = jet.n;
    let e = Ctx { e: jet, n };
    let tr: Vec<C> = (0..n).map(|i| (0..n).fold(C::zero(), |a, c| a + e.tau(c, c, i))).collect();
    let trp: Vec<C> = (0..n).map(|i| e.dbar_trace(i)).collect();
    let zero = || SqMat::<C>::zeros(n);
    let mut out: [Vec<SqMat<C>>; 4] = std::array::from_fn(|_| (0..6).map(|_| zero()).collect());
    for a in 0..n {
        for b in 0..n {
            let mut t: [[C; 6]; 4] = std::array::from_fn(|_| std::array::from_fn(|_| C::zero()));
            // identity 1, (k, s) = (a, b)
            let (k, s) = (a, b);
            for i in 0..n {
                for j in 0..n {
                    let jij = e.j(i, n + j);
                    for m in 0..n {
                        t[0][0] = t[0][0].clone() - e.taup(s, m, i).conj() * jij.clone() * e.nb(k, m, j);
                        t[0][1] = t[0][1].clone() - e.taup(j, m, i).conj() * jij.clone() * e.nb(k, s, m);
                        t[0][2] = t[0][2].clone() + e.tau(k, m, i) * jij.clone() * e.nb(m, s, j);
                    }
                    t[0][3] = t[0][3].clone() + e.dj(i, i, n + j) * e.nb(k, s, j);
                    t[0][4] = t[0][4].clone() + jij.clone() * e.dnb(i, k, s, j);
                    t[0][5] = t[0][5].clone() + jij * e.nb(k, s, j) * tr[i].clone();
                }
            }
            // identities 2 and 3, (s, j) = (a, b); J^k_s or J^k_{s̄}
            let (s, j) = (a, b);
            for (slot, col) in [(1usize, s), (2usize, n + s)] {
                for i in 0..n {
                    for k in 0..n {
                        let jks = e.j(k, col);
                        for m in 0..n {
                            t[slot][0] = t[slot][0].clone() - e.tau(i, m, i).conj() * jks.clone() * e.nb(k, m, j);
                            t[slot][1] = t[slot][1].clone() - e.tau(j, m, i).conj() * jks.clone() * e.nb(k, i, m);
                            t[slot][2] = t[slot][2].clone() + e.taup(k, m, i) * jks.clone() * e.nb(m, i, j);
                        }
                        t[slot][3] = t[slot][3].clone() + e.dj(n + i, k, col) * e.nb(k, i, j);
                        t[slot][4] = t[slot][4].clone() + jks.clone() * e.dnb(n + i, k, i, j);
                        t[slot][5] = t[slot][5].clone() + jks * e.nb(k, i, j) * trp[i].clone();
                    }
                }
            }
            // identity 4, (k, s) = (a, b)
            let (k, s) = (a, b);
            for i in 0..n {
                for j in 0..n {
                    let jij = e.j(n + i, n + j);
                    for m in 0..n {
                        t[3][0] = t[3][0].clone() - e.tau(s, m, i).conj() * jij.clone() * e.nb(k, m, j);
                        t[3][1] = t[3][1].clone() - e.tau(j, m, i).conj() * jij.clone() * e.nb(k, s, m);
                        t[3][2] = t[3][2].clone() + e.taup(k, m, i) * jij.clone() * e.nb(m, s, j);
                    }
                    t[3][3] = t[3][3].clone() + e.dj(n + i, n + i, n + j) * e.nb(k, s, j);
                    t[3][4] = t[3][4].clone() + jij.clone() * e.dnb(n + i, k, s, j);
                    t[3][5] = t[3][5].clone() + jij * e.nb(k, s, j) * trp[i].clone();
                }
            }
            for q in 0..4 {
                for (term, v) in t[q].iter().enumerate() {
                    out[q][term].set(a, b, v.clone());
                }
            }
        }
    }
    out
}

pub fn libp_check<C: Scalar>(jet: &ElJet<C>, gamma: &GammaJet<C>, u: &SqMat<C>) -> Result<LibpReport<C>> {
    let n = jet.n;
    let d = 2 * n;
    if gamma.n != n || u.dim != d || jet.j.dim != d || jet.dj.len() != d || jet.dnij.len() != d {
        return Err(NijError::Inconsistent("jet shapes disagree".into()));
    }
    let ring = jet_ring(n);
    let h = metric_poly(n, &jet.tau, &jet.tau_prime, gamma, ring);
    let hup = mat_conj(&mat_inverse(&h)?);
    let det = mat_det(&h);
    let lin = |val: &C, grads: &dyn Fn(usize) -> C| -> TruncPoly<C> {
        let l: Vec<C> = (0..n).map(grads).collect();
        let lb: Vec<C> = (0..n).map(|s| grads(n + s)).collect();
        ring.affine(val.clone(), &l, &lb)
    };
    let jp: PolyMat<C> =
        (0..d).map(|r| (0..d).map(|c| lin(jet.j.get(r, c), &|m| jet.dj[m].get(r, c).clone())).collect()).collect();
    let len = n * n * n;
    let nbar: Vec<TruncPoly<C>> = (0..len).map(|t| lin(&jet.nij[t], &|m| jet.dnij[m][t].clone()).conj()).collect();

    // W[q][s][j] = Σ_{m,p} h^{sm̄} h^{jp̄} conj N^q_{m̄p̄};  V[k][s][j] = Σ_q h_{kq̄} W[q][s][j] det h
    let mut w = vec![ring.zero::<C>(); len];
    for q in 0..n {
        for s in 0..n {
            for j in 0..n {
                let mut acc = ring.zero();
                for m in 0..n {
                    for p in 0..n {
                        acc = acc + &(&hup[s][m] * &hup[j][p]) * &nbar[idx(n, q, m, p)];
                    }
                }
                w[idx(n, q, s, j)] = acc;
            }
        }
    }
    let mut v = vec![ring.zero::<C>(); len];
    for k in 0..n {
        for s in 0..n {
            for j in 0..n {
                let mut acc = ring.zero();
                for q in 0..n {
                    acc = acc + &h[k][q] * &w[idx(n, q, s, j)];
                }
                v[idx(n, k, s, j)] = &acc * &det;
            }
        }
    }

    let mut lhs: [SqMat<C>; 4] = std::array::from_fn(|_| SqMat::zeros(n));
    let mut u_bucket: [SqMat<C>; 4] = std::array::from_fn(|_| SqMat::zeros(n));
    let mut put = |q: usize, a: usize, b: usize, p: &TruncPoly<C>, var: usize| {
        lhs[q].set(a, b, lhs[q].get(a, b).clone() + coeff(p, Some(var), 0));
        u_bucket[q].set(a, b, u_bucket[q].get(a, b).clone() + coeff(p, Some(var), 1));
    };
    for a in 0..n {
        for b in 0..n {
            for i in 0..n {
                // 1: ∂_i [Σ_j J^i_{j̄} V[k][s][j]],  4: ∂̄_i [Σ_j J^ī_{j̄} V[k][s][j]]
                let (k, s) = (a, b);
                let mut p1 = ring.zero();
                let mut p4 = ring.zero();
                for j in 0..n {
                    p1 = p1 + &jp[i][n + j] * &v[idx(n, k, s, j)];
                    p4 = p4 + &jp[n + i][n + j] * &v[idx(n, k, s, j)];
                }
                put(0, a, b, &p1, ring.z_var(i));
                put(3, a, b, &p4, ring.zbar_var(i));
                // 2, 3: ∂̄_i [Σ_k J^k_s V[k][i][j]] and with J^k_{s̄}
                let (s, j) = (a, b);
                let mut p2 = ring.zero();
                let mut p3 = ring.zero();
                for k in 0..n {
                    p2 = p2 + &jp[k][s] * &v[idx(n, k, i, j)];
                    p3 = p3 + &jp[k][n + s] * &v[idx(n, k, i, j)];
                }
                put(1, a, b, &p2, ring.zbar_var(i));
                put(2, a, b, &p3, ring.zbar_var(i));
            }
        }
    }

    let terms = libp_terms(jet);
    let rhs: [SqMat<C>; 4] = std::array::from_fn(|q| terms[q].iter().fold(SqMat::zeros(n), |acc, t| acc.add(t)));

    // det h = 1 + Σ(τ_{cc̄m} w_m + τ′_{cc̄m} w̄_m) + Σ γ_{cc̄} + ...
    let mut det_residual = vec![coeff(&det, None, 0) - C::one()];
    let mut trg = C::zero();
    for c in 0..n {
        trg = trg + gamma.g0[c * n + c].clone();
    }
    det_residual.push(coeff(&det, None, 1) - trg);
    for m in 0..n {
        let (mut t, mut tp) = (C::zero(), C::zero());
        for c in 0..n {
            t = t + jet.tau[idx(n, c, c, m)].clone();
            tp = tp + jet.tau_prime[idx(n, c, c, m)].clone();
        }
        det_residual.push(coeff(&det, Some(ring.z_var(m)), 0) - t);
        det_residual.push(coeff(&det, Some(ring.zbar_var(m)), 0) - tp);
    }

    // u^k_{s̄}, u^s_{j̄}, u^{s̄}_{j̄}, u^k_{s̄}
    let diffs: [SqMat<C>; 4] = std::array::from_fn(|q| lhs[q].sub(&rhs[q]));
    let contracted: [C; 4] = std::array::from_fn(|q| {
        let mut acc = C::zero();
        for a in 0..n {
            for b in 0..n {
                let uv = match q {
                    0 | 3 => u.get(a, n + b).clone(),
                    1 => u.get(a, n + b).clone(),
                    _ => u.get(n + a, n + b).clone(),
                };
                acc = acc + diffs[q].get(a, b).clone() * uv;
            }
        }
        acc
    });
    Ok(LibpReport { n, lhs, rhs, u_bucket, det_residual, contracted })
}

/// Reading of the two index slips in the `T^{q̄}_{p̄}` display.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Default)]
pub enum ElReading {
    /// Trace term with `conj(N^m_{p̄j̄})` (the unmatched `m` summed) and the
    /// last term with `∂̄_q J^{ī}_{j̄}`, literally.
    #[default]
    AsPrinted,
    /// Trace term with `conj(N^j_{īp̄})` and last term with `∂̄_q J^i_{j̄}`,
    /// matching the parallel terms.
    Consistent,
}

struct Ctx<'a, C> {
    e: &'a ElJet<C>,
    n: usize,
}

impl<C: Scalar> Ctx<'_, C> {
    fn j(&self, k: usize, l: usize) -> C {
        self.e.j.get(k, l).clone()
    }
    fn dj(&self, m: usize, k: usize, l: usize) -> C {
        self.e.dj[m].get(k, l).clone()
    }
    fn nn(&self, k: usize, i: usize, j: usize) -> C {
        self.e.nij[idx(self.n, k, i, j)].clone()
    }
    fn nb(&self, k: usize, i: usize, j: usize) -> C {
        self.e.nij[idx(self.n, k, i, j)].conj()
    }
    /// `∂_M conj(N^k_{īj̄}) = conj(∂_{M̄} N^k_{īj̄})`.
    fn dnb(&self, m: usize, k: usize, i: usize, j: usize) -> C {
        let mbar = if m < self.n { m + self.n } else { m - self.n };
        self.e.dnij[mbar][idx(self.n, k, i, j)].conj()
    }
    fn tau(&self, m: usize, l: usize, s: usize) -> C {
        self.e.tau[idx(self.n, m, l, s)].clone()
    }
    fn taup(&self, m: usize, l: usize, s: usize) -> C {
        self.e.tau_prime[idx(self.n, m, l, s)].clone()
    }
    fn gp(&self, k: usize, l: usize) -> C {
        self.e.gprime.get(k, l).clone()
    }
    /// `J(∂̄_j) ω_{ml̄} = J^i_{j̄} ∂_i ω_{ml̄} + J^ī_{j̄} ∂̄_i ω_{ml̄}`.
    fn jomega(&self, j: usize, m: usize, l: usize) -> C {
        let n = self.n;
        (0..n).fold(C::zero(), |a, i| a + self.j(i, n + j) * self.tau(m, l, i) + self.j(n + i, n + j) * self.taup(m, l, i))
    }
    fn jomega_trace(&self, j: usize) -> C {
        (0..self.n).fold(C::zero(), |a, c| a + self.jomega(j, c, c))
    }
    /// `Σ_c ∂̄_i ω_{cc̄}`.
    fn dbar_trace(&self, i: usize) -> C {
        (0..self.n).fold(C::zero(), |a, c| a + self.taup(c, c, i))
    }
    fn norm2(&self) -> C {
        self.e.nij.iter().fold(C::zero(), |a, x| a + x.clone() * x.conj())
    }
}

/// Components `T^q_p`, `T^{q̄}_p`, `T^q_{p̄}`, `T^{q̄}_{p̄}`, each at `(q, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ElTensor<C> {
    pub functional: Functional,
    pub tqp: SqMat<C>,
    pub tqbp: SqMat<C>,
    pub tqpb: SqMat<C>,
    pub tqbpb: SqMat<C>,
}

impl<C: Scalar> ElTensor<C> {
    pub fn blocks(&self) -> [&SqMat<C>; 4] {
        [&self.tqp, &self.tqbp, &self.tqpb, &self.tqbpb]
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks().iter().map(|m| m.max_abs()).fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().iter().all(|m| m.data.iter().all(|c| c.is_zero()))
    }

    /// `Σ_{K,S} T^K_S V^K_S`, with `V` given as a full `2n × 2n` component matrix.
    pub fn pair(&self, v: &SqMat<C>) -> C {
        let n = self.tqp.dim;
        let mut acc = C::zero();
        for q in 0..n {
            for p in 0..n {
                acc = acc
                    + self.tqp.get(q, p).clone() * v.get(q, p).clone()
                    + self.tqbp.get(q, p).clone() * v.get(n + q, p).clone()
                    + self.tqpb.get(q, p).clone() * v.get(q, n + p).clone()
                    + self.tqbpb.get(q, p).clone() * v.get(n + q, n + p).clone();
            }
        }
        acc
    }
}

/// `−(2g′_{X j̄} N^v_{īj̄} conj N^v_{īp̄} − g′_{X m̄} N^p_{īj̄} conj N^m_{īj̄})`.
fn metric_block_a<C: Scalar>(e: &Ctx<C>, x: usize, p: usize) -> C {
    let n = e.n;
    let mut acc = C::zero();
    for i in 0..n {
        for j in 0..n {
            for v in 0..n {
                acc = acc - C::from_ratio(2, 1) * e.gp(x, n + j) * e.nn(v, i, j) * e.nb(v, i, p);
                acc = acc + e.gp(x, n + v) * e.nn(p, i, j) * e.nb(v, i, j);
            }
        }
    }
    acc
}

/// `−(2g′_{X m} N^v_{īp̄} conj N^v_{īm̄} − g′_{X v} N^v_{īj̄} conj N^p_{īj̄})`.
fn metric_block_b<C: Scalar>(e: &Ctx<C>, x: usize, p: usize) -> C {
    let n = e.n;
    let mut acc = C::zero();
    for i in 0..n {
        for m in 0..n {
            for v in 0..n {
                acc = acc - C::from_ratio(2, 1) * e.gp(x, m) * e.nn(v, i, p) * e.nb(v, i, m);
                acc = acc + e.gp(x, v) * e.nn(v, i, m) * e.nb(p, i, m);
            }
        }
    }
    acc
}

/// Trace term of `T^{q̄}_{p̄}` without the factor `−4`.
fn qbar_trace<C: Scalar>(e: &Ctx<C>, dens: &Density<C>, q: usize, p: usize, reading: ElReading) -> C {
    let n = e.n;
    let mut acc = C::zero();
    for i in 0..n {
        for j in 0..n {
            let pre = e.j(j, n + q) * dens.dbar[i].clone();
            let nb = match reading {
                ElReading::AsPrinted => (0..n).fold(C::zero(), |a, m| a + e.nb(m, p, j)),
                ElReading::Consistent => e.nb(j, i, p),
            };
            acc = acc + pre * nb;
        }
    }
    acc
}

/// First derivatives at `p` of the log of the integration density in the
/// adapted chart: `d[i] = ∂_i log ρ`, `dbar[i] = ∂̄_i log ρ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Density<C> {
    pub d: Vec<C>,
    pub dbar: Vec<C>,
}

impl<C: Scalar> Density<C> {
    /// `ρ = det h`: `∂_i log ρ = Σ_c τ_{cc̄i}`, `∂̄_i log ρ = Σ_c τ′_{cc̄i}`.
    pub fn metric(jet: &ElJet<C>) -> Self {
        let n = jet.n;
        let tr = |x: &[C], i: usize| (0..n).fold(C::zero(), |a, c| a + x[idx(n, c, c, i)].clone());
        Density { d: (0..n).map(|i| tr(&jet.tau, i)).collect(), dbar: (0..n).map(|i| tr(&jet.tau_prime, i)).collect() }
    }
}

/// The Euler–Lagrange tensor of `Ñ` or `𝒩` from jets at `p`, as displayed:
/// for `𝒩` the `g′|N|²` blocks and the `Σ_c ω_{cc̄}` trace blocks are absent.
pub fn el_tensor_from_jets<C: Scalar>(jet: &ElJet<C>, functional: Functional, reading: ElReading) -> ElTensor<C> {
    match functional {
        Functional::Ntilde => assemble(jet, functional, true, Some(&Density::metric(jet)), reading),
        Functional::N => assemble(jet, functional, false, None, reading),
    }
}

/// The tensor of `𝒩` with the trace blocks kept, fed by the log-derivatives
/// of the flat density `ρ` in the adapted chart instead of `det h`.
pub fn el_tensor_with_density<C: Scalar>(jet: &ElJet<C>, density: &Density<C>, reading: ElReading) -> ElTensor<C> {
    assemble(jet, Functional::N, false, Some(density), reading)
}

fn assemble<C: Scalar>(
    jet: &ElJet<C>,
    functional: Functional,
    vol: bool,
    density: Option<&Density<C>>,
    reading: ElReading,
) -> ElTensor<C> {
    let n = jet.n;
    let e = Ctx { e: jet, n };
    let four = C::from_ratio(4, 1);
    let norm2 = e.norm2();
    let mut t = ElTensor { functional, tqp: SqMat::zeros(n), tqbp: SqMat::zeros(n), tqpb: SqMat::zeros(n), tqbpb: SqMat::zeros(n) };
    for q in 0..n {
        for p in 0..n {
            // T^q_p
            let mut a = C::zero();
            for i in 0..n {
                for j in 0..n {
                    a = a + e.dj(n + i, p, n + j) * e.nb(q, i, j);
                }
            }
            let mut v = four.clone() * a + metric_block_a(&e, q, p);
            if vol {
                v = v + e.gp(q, n + p) * norm2.clone();
            }
            t.tqp.set(q, p, v);

            // T^{q̄}_p
            let mut v = metric_block_a(&e, n + q, p);
            if vol {
                v = v + e.gp(n + q, n + p) * norm2.clone();
            }
            t.tqbp.set(q, p, v);

            // T^q_{p̄}
            let mut b = C::zero();
            for j in 0..n {
                for m in 0..n {
                    b = b + e.jomega(j, m, p) * e.nb(q, m, j);
                    b = b + e.jomega(j, m, j) * e.nb(q, p, m);
                    b = b - e.jomega(j, q, m) * e.nb(m, p, j);
                }
                for i in 0..n {
                    // ∂_i (J^i_{j̄} conj N^q_{p̄j̄}) and ∂̄_i (J^ī_{j̄} conj N^q_{p̄j̄})
                    b = b - e.dj(i, i, n + j) * e.nb(q, p, j) - e.j(i, n + j) * e.dnb(i, q, p, j);
                    b = b - e.dj(n + i, n + i, n + j) * e.nb(q, p, j) - e.j(n + i, n + j) * e.dnb(n + i, q, p, j);
                }
                if let Some(dn) = density {
                    let jt = (0..n).fold(C::zero(), |a, i| {
                        a + e.j(i, n + j) * dn.d[i].clone() + e.j(n + i, n + j) * dn.dbar[i].clone()
                    });
                    b = b - jt * e.nb(q, p, j);
                }
                let mut inner = C::zero();
                for i in 0..n {
                    for m in 0..n {
                        inner = inner + e.taup(m, i, i) * e.nb(j, m, p);
                        inner = inner + e.taup(m, p, i) * e.nb(j, i, m);
                        inner = inner - e.taup(j, m, i) * e.nb(m, i, p);
                    }
                    if let Some(dn) = density {
                        inner = inner - dn.dbar[i].clone() * e.nb(j, i, p);
                    }
                }
                b = b + e.j(j, q) * inner;
                for i in 0..n {
                    // ∂̄_i (J^j_q conj N^j_{īp̄})
                    b = b - e.dj(n + i, j, q) * e.nb(j, i, p) - e.j(j, q) * e.dnb(n + i, j, i, p);
                    b = b - e.dj(q, i, n + j) * e.nb(i, p, j);
                    b = b + e.dj(n + i, n + p, n + j) * e.nb(q, i, j);
                }
            }
            let mut v = four.clone() * b + metric_block_b(&e, q, p);
            if vol {
                v = v + e.gp(q, p) * norm2.clone();
            }
            t.tqpb.set(q, p, v);

            // T^{q̄}_{p̄}
            let mut c = C::zero();
            for j in 0..n {
                let mut inner = C::zero();
                for i in 0..n {
                    for m in 0..n {
                        inner = inner + e.taup(m, i, i) * e.nb(j, m, p);
                        inner = inner + e.taup(m, p, i) * e.nb(j, i, m);
                        inner = inner - e.taup(j, m, i) * e.nb(m, i, p);
                    }
                }
                c = c + e.j(j, n + q) * inner;
                for i in 0..n {
                    c = c - e.dj(n + i, j, n + q) * e.nb(j, i, p) - e.j(j, n + q) * e.dnb(n + i, j, i, p);
                    let upper = match reading {
                        ElReading::AsPrinted => n + i,
                        ElReading::Consistent => i,
                    };
                    c = c - e.dj(n + q, upper, n + j) * e.nb(i, p, j);
                }
            }
            if let Some(dn) = density {
                c = c - qbar_trace(&e, dn, q, p, reading);
            }
            let mut v = four.clone() * c + metric_block_b(&e, n + q, p);
            if vol {
                v = v + e.gp(n + q, p) * norm2.clone();
            }
            t.tqbpb.set(q, p, v);
        }
    }
    t
}

/// The correction terms stated for passing from `Ñ` to `𝒩`, coded from their
/// own display: `−g′_{qp̄}|N|²`, `−g′_{q̄p̄}|N|²`,
/// `4[(J(∂̄_j)Σω_{cc̄}) conj N^q_{p̄j̄} + J^j_q Σ∂̄_iω_{cc̄} conj N^j_{īp̄}] − g′_{qp}|N|²`,
/// `4 J^j_{q̄} Σ∂̄_iω_{cc̄} conj N^m_{p̄j̄} − g′_{q̄p}|N|²`.
pub fn stated_dropped_terms<C: Scalar>(jet: &ElJet<C>, reading: ElReading) -> [SqMat<C>; 4] {
    let n = jet.n;
    let e = Ctx { e: jet, n };
    let four = C::from_ratio(4, 1);
    let norm2 = e.norm2();
    let mut out: [SqMat<C>; 4] = std::array::from_fn(|_| SqMat::zeros(n));
    for q in 0..n {
        for p in 0..n {
            out[0].set(q, p, -(e.gp(q, n + p) * norm2.clone()));
            out[1].set(q, p, -(e.gp(n + q, n + p) * norm2.clone()));
            let mut b = C::zero();
            for j in 0..n {
                b = b + e.jomega_trace(j) * e.nb(q, p, j);
                for i in 0..n {
                    b = b + e.j(j, q) * e.dbar_trace(i) * e.nb(j, i, p);
                }
            }
            out[2].set(q, p, four.clone() * b - e.gp(q, p) * norm2.clone());
            let mut c = C::zero();
            for j in 0..n {
                for i in 0..n {
                    let nb = match reading {
                        ElReading::AsPrinted => (0..n).fold(C::zero(), |a, m| a + e.nb(m, p, j)),
                        ElReading::Consistent => e.nb(j, i, p),
                    };
                    c = c + e.j(j, n + q) * e.dbar_trace(i) * nb;
                }
            }
            out[3].set(q, p, four.clone() * c - e.gp(n + q, p) * norm2.clone());
        }
    }
    out
}

/// `T_𝒩 − T̃` minus the stated corrections, per block (exactly zero when
/// the two assemblies agree with the display).
pub fn functional_switch_residual<C: Scalar>(jet: &ElJet<C>, reading: ElReading) -> [SqMat<C>; 4] {
    let tn = el_tensor_from_jets(jet, Functional::N, reading);
    let tt = el_tensor_from_jets(jet, Functional::Ntilde, reading);
    let dropped = stated_dropped_terms(jet, reading);
    let tb = tn.blocks();
    let ttb = tt.blocks();
    std::array::from_fn(|q| tb[q].sub(ttb[q]).sub(&dropped[q]))
}

/// A probe point with its adapted chart and the jets read there.
#[derive(Clone, Debug)]
pub struct AdaptedPoint {
    pub point: usize,
    pub frame: PointFrame,
    pub jets: JetData<C64>,
    pub correction: CoordCorrection<C64>,
    /// Largest chart-condition residual (floating replay).
    pub chart_residual: f64,
    pub el: ElJet<C64>,
    /// Log-derivatives at `p` of the flat density `|det ∂(z, z̄)/∂(w, w̄)|`.
    pub flat_density: Density<C64>,
    /// `∂(w, w̄)/∂(z, z̄)` as first-order polynomials.
    jacobian: PolyMat<C64>,
}

/// Maximum `‖∂w/∂z − I‖` tolerated on the support of a probe perturbation.
pub const CHART_TOL: f64 = 0.5;

fn cmat(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// Builds the adapted chart at grid point `p` and reads the jets of `J`,
/// `N`, `ω` and `g′` there.
pub fn adapted_point(j: &ACField, p: usize) -> Result<AdaptedPoint> {
    let grid = j.grid();
    if p >= grid.npoints() {
        return Err(NijError::RejectedInput(format!("point {p} outside grid")));
    }
    let d = grid.dim();
    let n = d / 2;
    let jp = j.matrix(p);
    let dj: Vec<DMatrix<f64>> =
        (0..d).map(|a| derivative_at(j.field(), p, a).map(|v| DMatrix::from_row_slice(d, d, &v))).collect::<Result<_>>()?;
    let nreal = nijenhuis_real(j);
    let nval = nreal.at(p).to_vec();
    let dn: Vec<Vec<f64>> = (0..d).map(|a| derivative_at(&nreal, p, a)).collect::<Result<_>>()?;

    let pf = point_frame(&jp, p)?;
    let jets = extract_jetdata_with(&jp, &dj)?;
    let correction = correction_coeffs(&jets);
    let check = verify_chart(&correction, &jets)?;
    let chart_residual = check.residual_holomorphic().max(check.residual_symmetric()).max(check.residual_metric());
    if chart_residual > 1e-8 {
        return Err(NijError::Inconsistent(format!("adapted chart at point {p} fails its conditions ({chart_residual:e})")));
    }

    let ring1 = PolyRing::new(n, 1);
    let ring2 = PolyRing::new(n, 2);
    let chart = AdaptedChart::new(&correction, ring2);
    let mut jac: PolyMat<C64> = vec![vec![ring1.zero(); d]; d];
    for k in 0..n {
        for l in 0..n {
            jac[k][l] = chart.w[k].dz(l).recast(ring1)?;
            jac[k][n + l] = chart.w[k].dzbar(l).recast(ring1)?;
        }
    }
    for k in 0..n {
        for l in 0..n {
            jac[n + k][l] = jac[k][n + l].conj();
            jac[n + k][n + l] = jac[k][l].conj();
        }
    }
    let jac_inv = mat_inverse(&jac)?;

    let f = &pf.f;
    let finv = &pf.finv;
    // directional derivatives along the frame vectors
    let dir = |m: usize, parts: &[DMatrix<C64>]| -> DMatrix<C64> {
        let mut acc = DMatrix::<C64>::zeros(parts[0].nrows(), parts[0].ncols());
        for (a, part) in parts.iter().enumerate() {
            acc += part * f[(a, m)];
        }
        acc
    };
    let djc: Vec<DMatrix<C64>> = dj.iter().map(cmat).collect();
    let kdir: Vec<DMatrix<C64>> = (0..d).map(|m| dir(m, &djc)).collect();
    let affine_mat = |val: &DMatrix<C64>, grads: &[DMatrix<C64>], r: usize, c: usize| -> TruncPoly<C64> {
        let l: Vec<C64> = (0..n).map(|s| grads[s][(r, c)]).collect();
        let lb: Vec<C64> = (0..n).map(|s| grads[n + s][(r, c)]).collect();
        ring1.affine(val[(r, c)], &l, &lb)
    };

    // J in the z frame, then in the w frame
    let jz_val = finv * cmat(&jp) * f;
    let jz_grad: Vec<DMatrix<C64>> = kdir.iter().map(|k| finv * k * f).collect();
    let jz: PolyMat<C64> = (0..d).map(|r| (0..d).map(|c| affine_mat(&jz_val, &jz_grad, r, c)).collect()).collect();
    let jw = mat_mul(&mat_mul(&jac, &jz), &jac_inv);

    // N^K_{LM} in the z frame (all placements), N = −θ(N_std(f_L, f_M))
    let nz_at = |form: &[f64]| -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); d * d * d];
        for kk in 0..d {
            for l in 0..d {
                for m in 0..d {
                    let mut s = C64::new(0.0, 0.0);
                    for c in 0..d {
                        let mut inner = C64::new(0.0, 0.0);
                        for a in 0..d {
                            for b in 0..d {
                                inner += form[c * d * d + a * d + b] * f[(a, l)] * f[(b, m)];
                            }
                        }
                        s += finv[(kk, c)] * inner;
                    }
                    out[(kk * d + l) * d + m] = -s;
                }
            }
        }
        out
    };
    let nz_val = nz_at(&nval);
    let nz_axis: Vec<Vec<C64>> = dn.iter().map(|v| nz_at(v)).collect();
    let nz_grad: Vec<Vec<C64>> =
        (0..d).map(|m| (0..d * d * d).map(|t| (0..d).map(|a| nz_axis[a][t] * f[(a, m)]).sum()).collect()).collect();
    let nz: Vec<TruncPoly<C64>> = (0..d * d * d)
        .map(|t| {
            let l: Vec<C64> = (0..n).map(|s| nz_grad[s][t]).collect();
            let lb: Vec<C64> = (0..n).map(|s| nz_grad[n + s][t]).collect();
            ring1.affine(nz_val[t], &l, &lb)
        })
        .collect();
    let nzi = |kk: usize, l: usize, m: usize| &nz[(kk * d + l) * d + m];
    let len = n * n * n;
    let mut nw = vec![ring1.zero::<C64>(); len];
    for k in 0..n {
        for i in 0..n {
            for jj in 0..n {
                let mut acc = ring1.zero();
                for k2 in 0..d {
                    if jac[k][k2].is_zero() {
                        continue;
                    }
                    let mut inner = ring1.zero();
                    for l2 in 0..d {
                        for m2 in 0..d {
                            inner = inner + &(nzi(k2, l2, m2) * &jac_inv[l2][n + i]) * &jac_inv[m2][n + jj];
                        }
                    }
                    acc = acc + &jac[k][k2] * &inner;
                }
                nw[idx(n, k, i, jj)] = acc;
            }
        }
    }

    // metric g(∂_L, ∂_M): z frame, then w frame
    let jc = cmat(&jp);
    let gz_val = f.transpose() * cmat(&pf.g) * f;
    let gz_grad: Vec<DMatrix<C64>> =
        kdir.iter().map(|k| f.transpose() * ((k.transpose() * &jc + jc.transpose() * k) * C64::new(0.5, 0.0)) * f).collect();
    let gz: PolyMat<C64> = (0..d).map(|r| (0..d).map(|c| affine_mat(&gz_val, &gz_grad, r, c)).collect()).collect();
    let gw = mat_mul(&mat_mul(&mat_transpose(&jac_inv), &gz), &jac_inv);
    let mut tau = vec![C64::new(0.0, 0.0); len];
    let mut tau_prime = vec![C64::new(0.0, 0.0); len];
    for m in 0..n {
        for l in 0..n {
            for s in 0..n {
                tau[idx(n, m, l, s)] = gw[m][n + l].coeff_z(s);
                tau_prime[idx(n, m, l, s)] = gw[m][n + l].coeff_zbar(s);
            }
        }
    }

    let var = |m: usize| if m < n { ring1.z_var(m) } else { ring1.zbar_var(m - n) };
    let lin_coeff = |p: &TruncPoly<C64>, m: usize| {
        let mut exps = vec![0; ring1.nvars()];
        exps[var(m)] = 1;
        p.coefficient(Monomial::from_exponents(&exps))
    };
    let gp = gprime_components(&pf);
    let el = ElJet {
        n,
        j: SqMat::from_fn(d, |r, c| jw[r][c].constant_term()),
        dj: (0..d).map(|m| SqMat::from_fn(d, |r, c| lin_coeff(&jw[r][c], m))).collect(),
        nij: nw.iter().map(|p| p.constant_term()).collect(),
        dnij: (0..d).map(|m| nw.iter().map(|p| lin_coeff(p, m)).collect()).collect(),
        tau,
        tau_prime,
        gprime: SqMat::from_fn(d, |r, c| gp[(r, c)]),
    };
    let det = mat_det(&jac);
    let flat_density = Density {
        d: (0..n).map(|i| -lin_coeff(&det, i)).collect(),
        dbar: (0..n).map(|i| -lin_coeff(&det, n + i)).collect(),
    };
    Ok(AdaptedPoint { point: p, frame: pf, jets, correction, chart_residual, el, flat_density, jacobian: jac })
}

impl AdaptedPoint {
    pub fn el_tensor(&self, functional: Functional, reading: ElReading) -> ElTensor<C64> {
        el_tensor_from_jets(&self.el, functional, reading)
    }

    /// The `𝒩` tensor with the chart's flat-density trace blocks restored.
    pub fn el_tensor_flat_density(&self, reading: ElReading) -> ElTensor<C64> {
        el_tensor_with_density(&self.el, &self.flat_density, reading)
    }

    /// `z_k = θ^k(x − p)` for a displacement on the torus.
    fn z_of(&self, disp: &[f64]) -> Vec<C64> {
        let n = self.frame.n();
        let d = 2 * n;
        let z: Vec<C64> = (0..n).map(|k| (0..d).map(|a| self.frame.finv[(k, a)] * disp[a]).sum()).collect();
        let mut vals = z.clone();
        vals.extend(z.iter().map(|c| c.conj()));
        vals
    }

    /// `∂(w, w̄)/∂(z, z̄)` at a displacement from `p`.
    pub fn jacobian_at(&self, disp: &[f64]) -> Result<DMatrix<C64>> {
        let vals = self.z_of(disp);
        let d = vals.len();
        let mut m = DMatrix::<C64>::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                m[(r, c)] = self.jacobian[r][c].eval(&vals)?;
            }
        }
        Ok(m)
    }

    /// Components of `u(x)` in the coordinate frame of the adapted chart at `x`.
    pub fn pulled_back(&self, u: &DMatrix<f64>, disp: &[f64]) -> Result<DMatrix<C64>> {
        let a = self.jacobian_at(disp)?;
        let ainv = a.clone().try_inverse().ok_or_else(|| NijError::SupportEscapesChart("singular chart Jacobian".into()))?;
        Ok(a * (&self.frame.finv * cmat(u) * &self.frame.f) * ainv)
    }
}

/// Both sides of `dÑ(u) = Re∫⟨T, ū⟩ dV` for one localized perturbation.
#[derive(Clone, Debug, Serialize)]
pub struct ElComparison {
    pub radius: f64,
    pub tensor_side: f64,
    pub variation_side: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
}

/// `Re Σ_x ⟨T, u_w(x)⟩ ρ(x)` with `T` frozen at `p`, `u_w` the adapted-chart
/// components of `u`, and `ρ` the measure of the tensor's functional
/// (`vol_g` for `Ñ`, flat for `𝒩`).
pub fn tensor_pairing(var: &Variation, ap: &AdaptedPoint, t: &ElTensor<C64>, u: &TangentField) -> Result<f64> {
    let grid = var.grid();
    if u.grid() != grid {
        return Err(NijError::ShapeMismatch { expected: format!("{grid:?}"), got: format!("{:?}", u.grid()) });
    }
    let center = grid.coords(ap.point);
    let d = grid.dim();
    let mut acc = 0.0;
    for x in 0..grid.npoints() {
        let ux = u.matrix(x);
        if ux.iter().all(|v| *v == 0.0) {
            continue;
        }
        let disp = grid.displacement(&grid.coords(x), &center);
        let a = ap.jacobian_at(&disp)?;
        let dev = (a - DMatrix::<C64>::identity(d, d)).iter().fold(0.0f64, |m, c| m.max(c.norm()));
        if dev >= CHART_TOL {
            return Err(NijError::SupportEscapesChart(format!("point {x}: chart Jacobian deviates by {dev:.3}")));
        }
        let uw = ap.pulled_back(&ux, &disp)?;
        let uw = SqMat::from_fn(d, |r, c| uw[(r, c)]);
        let rho = match t.functional {
            Functional::N => 1.0,
            Functional::Ntilde => var.frames()[x].vol,
        };
        acc += t.pair(&uw).re * rho;
    }
    Ok(acc * grid.cell_volume())
}

/// Compares the frozen-tensor pairing with the first variation of the functional.
pub fn el_residual_vs_variation(
    var: &Variation,
    ap: &AdaptedPoint,
    u: &TangentField,
    functional: Functional,
    reading: ElReading,
    radius: f64,
) -> Result<ElComparison> {
    compare(var, ap, &ap.el_tensor(functional, reading), u, radius)
}

pub fn compare(var: &Variation, ap: &AdaptedPoint, t: &ElTensor<C64>, u: &TangentField, radius: f64) -> Result<ElComparison> {
    let tensor_side = tensor_pairing(var, ap, t, u)?;
    let variation_side = var.first_variation(u, t.functional)?;
    let abs_gap = (tensor_side - variation_side).abs();
    let rel_gap = abs_gap / variation_side.abs().max(tensor_side.abs()).max(f64::MIN_POSITIVE);
    Ok(ElComparison { radius, tensor_side, variation_side, abs_gap, rel_gap })
}

/// Radius sweep of bump-localized copies of `u0` centred at the probe point.
#[derive(Clone, Debug, Serialize)]
pub struct ElSweep {
    pub point: usize,
    pub functional: Functional,
    pub rows: Vec<ElComparison>,
    /// `rel_gap(r_k) / rel_gap(r_{k+1})`.
    pub ratios: Vec<f64>,
}

pub fn el_radius_sweep(
    j: &ACField,
    p: usize,
    u0: &TangentField,
    radii: &[f64],
    functional: Functional,
    reading: ElReading,
) -> Result<ElSweep> {
    let var = Variation::new(j)?;
    let ap = adapted_point(j, p)?;
    let grid = j.grid();
    let center = grid.coords(p);
    let mut rows = Vec::with_capacity(radii.len());
    for &r in radii {
        let profile = crate::grid::bump(grid, &center, r)?;
        let u = u0.localized(&profile);
        rows.push(el_residual_vs_variation(&var, &ap, &u, functional, reading, r)?);
    }
    let ratios = rows.windows(2).map(|w| w[0].rel_gap / w[1].rel_gap).collect();
    Ok(ElSweep { point: p, functional, rows, ratios })
}
