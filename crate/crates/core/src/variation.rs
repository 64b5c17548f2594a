//! Linearization `dN_J(u)`, the first variations of `𝒩` and `Ñ`, the
//! frame expansion of `⟨dN^{0,2}_J(u), N_J⟩`, finite-difference oracles and the
//! discrete `L²` gradient.
//!
//! All pairings are taken at `g_J`; the change to `g_{J+u}` is second order.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acstruct::{
    anticommutator_residual, end_field_from, gamma_matrix, mat_at, orthogonal_tangent_project_matrix, random_tangent, retract,
    spectral_norm, ACField, PointFrame, TangentField, TANGENT_TOL,
};
use crate::error::{NijError, Result};
use crate::grid::{deriv_many, ComplexField, Field, FieldKind, Grid};
use crate::nijenhuis::{
    end_derivatives, energies, form_components, form_from_point_map, nijenhuis_point, raise_pair,
    squared_norm_real,
};
use crate::scalar::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Functional {
    N,
    Ntilde,
}

impl std::str::FromStr for Functional {
    type Err = NijError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" => Ok(Functional::N),
            "Ntilde" => Ok(Functional::Ntilde),
            other => Err(NijError::InvalidConfig(format!(
                "unknown functional {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Functional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Functional::N => "N",
            Functional::Ntilde => "Ntilde",
        })
    }
}

pub fn energy(j: &ACField, functional: Functional) -> Result<f64> {
    let (e, et) = energies(j)?;
    Ok(match functional {
        Functional::N => e,
        Functional::Ntilde => et,
    })
}

/// Derivative of the real Nijenhuis tensor at `J` in direction `u`, one point.
pub fn nijenhuis_linear_point(
    j: &[f64],
    dj: &[&[f64]],
    u: &[f64],
    du: &[&[f64]],
    d: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; d * d * d];
    for c in 0..d {
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for e in 0..d {
                    s += u[e * d + a] * dj[e][c * d + b] + j[e * d + a] * du[e][c * d + b]
                        - u[e * d + b] * dj[e][c * d + a]
                        - j[e * d + b] * du[e][c * d + a]
                        + u[c * d + e] * (dj[b][e * d + a] - dj[a][e * d + b])
                        + j[c * d + e] * (du[b][e * d + a] - du[a][e * d + b]);
                }
                out[c * d * d + a * d + b] = s;
            }
        }
    }
    out
}

/// Which closed form evaluates `d_{g_J}(‖N‖²)·γ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricTermForm {
    /// `-(2 γ_{jm̄} N^k_{īj̄} conj N^k_{īm̄} - γ_{km̄} N^k_{īj̄} conj N^m_{īj̄})`, which
    /// agrees with differentiating the real contraction.
    Derived,
    /// The same with `conj(γ_{jm̄})` in the first term.
    AsPrinted,
}

/// Closed-form metric derivative of `‖N‖²` for frame components `γ_{km̄}`.
pub fn metric_term(gamma: &DMatrix<C64>, comp: &[C64], form: MetricTermForm) -> f64 {
    let n = gamma.nrows();
    let nn = |k: usize, i: usize, j: usize| comp[k * n * n + i * n + j];
    let mut raise = C64::new(0.0, 0.0);
    let mut lower = C64::new(0.0, 0.0);
    for jj in 0..n {
        for m in 0..n {
            let g = match form {
                MetricTermForm::Derived => gamma[(jj, m)],
                MetricTermForm::AsPrinted => gamma[(jj, m)].conj(),
            };
            for i in 0..n {
                for k in 0..n {
                    raise += g * nn(k, i, jj) * nn(k, i, m).conj();
                }
            }
        }
    }
    for k in 0..n {
        for m in 0..n {
            for i in 0..n {
                for jj in 0..n {
                    lower += gamma[(k, m)] * nn(k, i, jj) * nn(m, i, jj).conj();
                }
            }
        }
    }
    (-(raise * 2.0 - lower)).re
}

/// Real-coordinate metric derivative `(∂_g Q(N,N))·γ` with
/// `Q(N,N) = ½ g_{cd} G^{ae} G^{bf} N^c_{ab} N^d_{ef}`.
pub fn metric_term_real(
    form: &[f64],
    g: &DMatrix<f64>,
    ginv: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
) -> f64 {
    metric_sensitivity(form, g, ginv).dot(gamma)
}

/// Symmetric `S` with `(∂_g Q(N,N))·γ = Σ S_{xy} γ_{xy}`.
pub fn metric_sensitivity(form: &[f64], g: &DMatrix<f64>, ginv: &DMatrix<f64>) -> DMatrix<f64> {
    let d = g.nrows();
    let raised = raise_pair(form, ginv);
    // K_{cd} = G G N^c N^d
    let mut k = DMatrix::zeros(d, d);
    for c in 0..d {
        for dd in 0..d {
            let mut s = 0.0;
            for ab in 0..d * d {
                s += form[c * d * d + ab] * raised[dd * d * d + ab];
            }
            k[(c, dd)] = s;
        }
    }
    // lowered value slot: V_{d,ef} = g_{dc} N^c_{ef}
    // L_{xy} = G^{ax} G^{ye} G^{bf} g_{cd} N^c_{ab} N^d_{ef}
    //        = Σ_{a,e} G^{ax} G^{ye} P_{ae},  P_{ae} = Σ_{b,c} N^c_{ab} (g N G)_{c,e,b}
    let mut lowered = vec![0.0; d * d * d];
    for c in 0..d {
        for e in 0..d {
            for f in 0..d {
                let mut s = 0.0;
                for dd in 0..d {
                    s += g[(c, dd)] * form[dd * d * d + e * d + f];
                }
                lowered[c * d * d + e * d + f] = s;
            }
        }
    }
    let mut p = DMatrix::zeros(d, d);
    for a in 0..d {
        for e in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                for b in 0..d {
                    let nab = form[c * d * d + a * d + b];
                    if nab == 0.0 {
                        continue;
                    }
                    for f in 0..d {
                        s += nab * ginv[(b, f)] * lowered[c * d * d + e * d + f];
                    }
                }
            }
            p[(a, e)] = s;
        }
    }
    let l = ginv * p * ginv;
    let l_sym = (&l + l.transpose()) * 0.5;
    k * 0.5 - l_sym
}

/// Precomputed data of `J` shared by every directional quantity.
pub struct Variation {
    j: ACField,
    dj: Vec<Field>,
    nreal: Field,
    frames: Vec<PointFrame>,
    ncomp: std::sync::OnceLock<Vec<C64>>,
    norm2: Vec<f64>,
}

/// Finite-difference comparison record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub analytic: f64,
    pub oracle: f64,
    pub eps: f64,
    pub rel_err: f64,
    pub order_estimate: f64,
}

pub const REL_FLOOR: f64 = 1e-14;

pub fn relative_error(analytic: f64, oracle: f64) -> f64 {
    (analytic - oracle).abs() / analytic.abs().max(REL_FLOOR)
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

/// Central difference of `f` at 0 with step `eps`, plus an order estimate
/// from the sweep `sweep·{4, 2, 1}`. The sweep base should be large enough
/// for truncation error to dominate roundoff.
pub fn central_difference_report(
    f: impl Fn(f64) -> Result<f64>,
    analytic: f64,
    eps: f64,
    sweep: f64,
) -> Result<VariationReport> {
    let fd = |e: f64| -> Result<f64> { Ok((f(e)? - f(-e)?) / (2.0 * e)) };
    let oracle = fd(eps)?;
    let steps = [4.0 * sweep, 2.0 * sweep, sweep];
    let mut residuals = Vec::with_capacity(3);
    for e in steps {
        residuals.push((fd(e)? - analytic).abs());
    }
    let order_estimate = if residuals.iter().all(|r| *r > 0.0) {
        loglog_slope(&steps, &residuals)
    } else {
        f64::NAN
    };
    Ok(VariationReport {
        analytic,
        oracle,
        eps,
        rel_err: relative_error(analytic, oracle),
        order_estimate,
    })
}

/// Pairings of the `(2,0)` and `(1,1)` parts of `dN(u)` (with `T^{1,0}`
/// values) against `N`, and the norms that bound them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeOrthogonality {
    pub pairing_20: f64,
    pub pairing_11: f64,
    pub norm_n: f64,
    pub norm_dn: f64,
}

impl TypeOrthogonality {
    pub fn passes(&self, tol: f64) -> bool {
        let bound = tol * self.norm_n * self.norm_dn;
        self.pairing_20 <= bound && self.pairing_11 <= bound
    }
}

fn complex_mat(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

impl Variation {
    pub fn new(j: &ACField) -> Result<Self> {
        let grid = j.grid();
        let dj = end_derivatives(j.field());
        let d = grid.dim();
        let nreal = form_from_point_map(grid, |p| {
            let djp: Vec<&[f64]> = dj.iter().map(|f| f.at(p)).collect();
            nijenhuis_point(j.field().at(p), &djp, d)
        });
        let frames = crate::acstruct::frames(j)?;
        let norm2 = (0..grid.npoints())
            .into_par_iter()
            .map(|p| squared_norm_real(nreal.at(p), &frames[p].g, &frames[p].ginv))
            .collect();
        Ok(Variation {
            j: j.clone(),
            dj,
            nreal,
            frames,
            ncomp: std::sync::OnceLock::new(),
            norm2,
        })
    }

    pub fn grid(&self) -> Grid {
        self.j.grid()
    }

    pub fn structure(&self) -> &ACField {
        &self.j
    }

    pub fn frames(&self) -> &[PointFrame] {
        &self.frames
    }

    pub fn nijenhuis_real(&self) -> &Field {
        &self.nreal
    }

    pub fn derivatives(&self) -> &[Field] {
        &self.dj
    }

    /// `N^k_{īj̄}` at a point.
    pub fn components(&self, point: usize) -> &[C64] {
        let n = self.grid().n();
        let all = self.ncomp.get_or_init(|| {
            (0..self.grid().npoints())
                .into_par_iter()
                .flat_map_iter(|p| form_components(self.nreal.at(p), &self.frames[p]))
                .collect()
        });
        &all[point * n * n * n..(point + 1) * n * n * n]
    }

    pub fn norm_squared(&self) -> &[f64] {
        &self.norm2
    }

    fn check_tangent(&self, u: &TangentField) -> Result<()> {
        if u.grid() != self.grid() {
            return Err(NijError::ShapeMismatch {
                expected: format!("{:?}", self.grid()),
                got: format!("{:?}", u.grid()),
            });
        }
        let (point, residual) = anticommutator_residual(&self.j, u.field());
        if residual > TANGENT_TOL * u.field().max_abs().max(1.0) {
            return Err(NijError::NotTangent { point, residual });
        }
        Ok(())
    }

    /// Real `dN_J(u)`.
    pub fn dn_real(&self, u: &TangentField) -> Field {
        let grid = self.grid();
        let d = grid.dim();
        let du = end_derivatives(u.field());
        form_from_point_map(grid, |p| {
            let djp: Vec<&[f64]> = self.dj.iter().map(|f| f.at(p)).collect();
            let dup: Vec<&[f64]> = du.iter().map(|f| f.at(p)).collect();
            nijenhuis_linear_point(self.j.field().at(p), &djp, u.field().at(p), &dup, d)
        })
    }

    /// Frame components `(dN_J(u))^k_{īj̄}` in the convention of `N^k_{īj̄}`.
    pub fn dn_components(&self, dn_real: &Field) -> ComplexField {
        let grid = self.grid();
        let values = (0..grid.npoints())
            .into_par_iter()
            .flat_map_iter(|p| form_components(dn_real.at(p), &self.frames[p]))
            .collect();
        ComplexField {
            grid,
            kind: FieldKind::Form,
            values,
        }
    }

    /// Pointwise `⟨dN^{0,2}_J(u), N_J⟩ = Σ dN^k_{īj̄} conj(N^k_{īj̄})`.
    pub fn direct_pairing(&self, u: &TangentField) -> Vec<C64> {
        let dnc = self.dn_components(&self.dn_real(u));
        let n = self.grid().n();
        let nc = n * n * n;
        (0..self.grid().npoints())
            .map(|p| {
                dnc.values[p * nc..(p + 1) * nc]
                    .iter()
                    .zip(self.components(p))
                    .map(|(a, b)| a * b.conj())
                    .sum()
            })
            .collect()
    }

    /// Right-hand side of the pairing expansion, evaluated at each point in
    /// linear complex coordinates adapted to `J` there.
    pub fn pairing_step(&self, u: &TangentField) -> Result<ComplexField> {
        self.check_tangent(u)?;
        let grid = self.grid();
        let n = grid.n();
        let d = grid.dim();
        let du = end_derivatives(u.field());
        let values: Vec<C64> = (0..grid.npoints())
            .into_par_iter()
            .map(|p| {
                let pf = &self.frames[p];
                let jc = pf.end_components(&self.j.matrix(p));
                let uc = pf.end_components(&u.matrix(p));
                let djc: Vec<DMatrix<C64>> = (0..d)
                    .map(|a| pf.end_components(&mat_at(&self.dj[a], p)))
                    .collect();
                let duc: Vec<DMatrix<C64>> = (0..d)
                    .map(|a| pf.end_components(&mat_at(&du[a], p)))
                    .collect();
                // derivative along the frame vector f_M
                let along = |parts: &[DMatrix<C64>], m: usize| -> DMatrix<C64> {
                    let mut acc = DMatrix::zeros(d, d);
                    for (a, part) in parts.iter().enumerate() {
                        acc += part * pf.f[(a, m)];
                    }
                    acc
                };
                let dj_f: Vec<DMatrix<C64>> = (0..d).map(|m| along(&djc, m)).collect();
                let du_f: Vec<DMatrix<C64>> = (0..d).map(|m| along(&duc, m)).collect();
                let cn =
                    |k: usize, i: usize, j: usize| self.components(p)[k * n * n + i * n + j].conj();
                let mut t_u = C64::new(0.0, 0.0);
                let mut t_j = C64::new(0.0, 0.0);
                let mut t_b = C64::new(0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            for s in 0..n {
                                // J^i_{j̄} ∂_i u^k_{s̄} + ∂̄_i u^k_{s̄} J^{ī}_{j̄}, paired with conj N^k_{s̄j̄}
                                t_u += (jc[(i, n + j)] * du_f[i][(k, n + s)]
                                    + du_f[n + i][(k, n + s)] * jc[(n + i, n + j)])
                                    * cn(k, s, j);
                                // ∂̄_i u^s_{j̄} J^k_s + ∂̄_i u^{s̄}_{j̄} J^k_{s̄}, paired with conj N^k_{īj̄}
                                t_u += (du_f[n + i][(s, n + j)] * jc[(k, s)]
                                    + du_f[n + i][(n + s, n + j)] * jc[(k, n + s)])
                                    * cn(k, i, j);
                                // u^i_{s̄} ∂_i J^k_{j̄} + u^{ī}_{s̄} ∂̄_i J^k_{j̄}
                                t_j += (uc[(i, n + s)] * dj_f[i][(k, n + j)]
                                    + uc[(n + i, n + s)] * dj_f[n + i][(k, n + j)])
                                    * cn(k, s, j);
                                // ⟨u[∂̄_i, J∂̄_j], dw_k⟩
                                t_b += (dj_f[n + i][(s, n + j)] * uc[(k, s)]
                                    + dj_f[n + i][(n + s, n + j)] * uc[(k, n + s)])
                                    * cn(k, i, j);
                            }
                        }
                    }
                }
                (t_u - t_j + t_b) * 2.0
            })
            .collect();
        Ok(ComplexField {
            grid,
            kind: FieldKind::Scalar,
            values,
        })
    }

    /// Pointwise integrand of the closed-form first variation
    /// `2Re⟨dN^{0,2}, N⟩ + d_g(‖N‖²)·γ [+ ‖N‖² tr γ]` in frame components.
    fn closed_form_density(
        &self,
        u: &TangentField,
        functional: Functional,
        form: MetricTermForm,
    ) -> Vec<f64> {
        let grid = self.grid();
        let n = grid.n();
        let pairing = self.direct_pairing(u);
        (0..grid.npoints())
            .into_par_iter()
            .map(|p| {
                let pf = &self.frames[p];
                let gm = gamma_matrix(&pf.j, &u.matrix(p));
                let gc = pf.form_components(&gm);
                let gamma = DMatrix::from_fn(n, n, |k, m| gc[(k, m + n)]);
                let base = 2.0 * pairing[p].re + metric_term(&gamma, self.components(p), form);
                match functional {
                    Functional::N => base,
                    Functional::Ntilde => {
                        let tr: f64 = (0..n).map(|s| gamma[(s, s)].re).sum();
                        (base + self.norm2[p] * tr) * pf.vol
                    }
                }
            })
            .collect()
    }

    /// Pointwise integrand of the exact derivative of the discrete energy,
    /// contracted in real coordinates.
    fn real_density(&self, u: &TangentField, functional: Functional) -> Vec<f64> {
        let grid = self.grid();
        let d = grid.dim();
        let dn = self.dn_real(u);
        (0..grid.npoints())
            .into_par_iter()
            .map(|p| {
                let pf = &self.frames[p];
                let gm = gamma_matrix(&pf.j, &u.matrix(p));
                let raised = raise_pair(self.nreal.at(p), &pf.ginv);
                let dnp = dn.at(p);
                let mut pair = 0.0;
                for c in 0..d {
                    for dd in 0..d {
                        let g = pf.g[(c, dd)];
                        if g == 0.0 {
                            continue;
                        }
                        for ab in 0..d * d {
                            pair += dnp[c * d * d + ab] * g * raised[dd * d * d + ab];
                        }
                    }
                }
                let base = pair + metric_term_real(self.nreal.at(p), &pf.g, &pf.ginv, &gm);
                match functional {
                    Functional::N => base,
                    Functional::Ntilde => (base + self.norm2[p] * 0.5 * pf.ginv.dot(&gm)) * pf.vol,
                }
            })
            .collect()
    }

    /// Closed-form frame expression of the first variation. Agrees with
    /// [`Variation::first_variation`] whenever the discrete `N` is of pure
    /// type, which holds exactly for band-limited structures such as the
    /// shear family.
    pub fn first_variation_closed_form(
        &self,
        u: &TangentField,
        functional: Functional,
        form: MetricTermForm,
    ) -> Result<f64> {
        self.check_tangent(u)?;
        let dens = self.closed_form_density(u, functional, form);
        Ok(dens.iter().sum::<f64>() * self.grid().cell_volume())
    }

    /// `d_J 𝒩(J)(u)` or `d_J Ñ(J)(u)`, the exact derivative of the discrete
    /// energy.
    pub fn first_variation(&self, u: &TangentField, functional: Functional) -> Result<f64> {
        self.check_tangent(u)?;
        let dens = self.real_density(u, functional);
        Ok(dens.iter().sum::<f64>() * self.grid().cell_volume())
    }

    /// Bidegree decomposition check of `dN(u)` against `N`.
    pub fn type_orthogonality(&self, u: &TangentField) -> Result<TypeOrthogonality> {
        self.check_tangent(u)?;
        let grid = self.grid();
        let d = grid.dim();
        let dn = self.dn_real(u);
        let i = C64::new(0.0, 1.0);
        let per_point: Vec<(f64, f64, f64, f64)> = (0..grid.npoints())
            .into_par_iter()
            .map(|p| {
                let pf = &self.frames[p];
                let jm = complex_mat(&pf.j);
                let id = DMatrix::<C64>::identity(d, d);
                let p10 = (&id - &jm * i) * C64::new(0.5, 0.0);
                let p01 = (&id + &jm * i) * C64::new(0.5, 0.0);
                let b = dn.at(p);
                let comp = |vals: &DMatrix<C64>, x: &DMatrix<C64>, y: &DMatrix<C64>| -> Vec<C64> {
                    // vals^c_{c'} B^{c'}_{a'b'} x^{a'}_a y^{b'}_b
                    let mut out = vec![C64::new(0.0, 0.0); d * d * d];
                    for cp in 0..d {
                        let bm = DMatrix::from_row_slice(d, d, &b[cp * d * d..(cp + 1) * d * d]);
                        let slot = x.transpose() * complex_mat(&bm) * y;
                        for c in 0..d {
                            let v = vals[(c, cp)];
                            if v.norm_sqr() == 0.0 {
                                continue;
                            }
                            for a in 0..d {
                                for bb in 0..d {
                                    out[c * d * d + a * d + bb] += v * slot[(a, bb)];
                                }
                            }
                        }
                    }
                    out
                };
                let part20 = comp(&p10, &p10, &p10);
                let a11 = comp(&p10, &p10, &p01);
                let b11 = comp(&p10, &p01, &p10);
                let part11: Vec<C64> = a11.iter().zip(&b11).map(|(x, y)| x + y).collect();
                let n_raised = raise_pair(self.nreal.at(p), &pf.ginv);
                let dn_raised = raise_pair(b, &pf.ginv);
                let pair = |x: &[C64]| -> C64 {
                    let mut s = C64::new(0.0, 0.0);
                    for c in 0..d {
                        for dd in 0..d {
                            let g = pf.g[(c, dd)];
                            if g == 0.0 {
                                continue;
                            }
                            for ab in 0..d * d {
                                s += x[c * d * d + ab] * g * n_raised[dd * d * d + ab];
                            }
                        }
                    }
                    s
                };
                let full = |x: &[f64], raised: &[f64]| -> f64 {
                    let mut s = 0.0;
                    for c in 0..d {
                        for dd in 0..d {
                            for ab in 0..d * d {
                                s += x[c * d * d + ab] * pf.g[(c, dd)] * raised[dd * d * d + ab];
                            }
                        }
                    }
                    s
                };
                (
                    pair(&part20).norm(),
                    pair(&part11).norm(),
                    full(self.nreal.at(p), &n_raised),
                    full(b, &dn_raised),
                )
            })
            .collect();
        let cv = grid.cell_volume();
        let (s20, s11, nn, dd) = per_point.iter().fold(
            (C64::new(0.0, 0.0), C64::new(0.0, 0.0), 0.0, 0.0),
            |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2, acc.3 + x.3),
        );
        Ok(TypeOrthogonality {
            pairing_20: s20.norm() * cv,
            pairing_11: s11.norm() * cv,
            norm_n: (nn * cv).max(0.0).sqrt(),
            norm_dn: (dd * cv).max(0.0).sqrt(),
        })
    }

    /// Riesz representative of `u ↦ first_variation(u)` under the flat `L²`
    /// pairing, restricted to tangent directions.
    pub fn gradient(&self, functional: Functional) -> TangentField {
        let grid = self.grid();
        let d = grid.dim();
        let dd = d * d;
        // per point: A (d×d) and B[e] (d×d) for each e
        let coeffs: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.npoints())
            .into_par_iter()
            .map(|p| {
                let pf = &self.frames[p];
                let w = match functional {
                    Functional::N => 1.0,
                    Functional::Ntilde => pf.vol,
                };
                let form = self.nreal.at(p);
                let j = self.j.field().at(p);
                // W^c_{ab} = g_{cd} G^{ae} G^{bf} N^d_{ef}
                let raised = raise_pair(form, &pf.ginv);
                let mut wt = vec![0.0; d * dd];
                for c in 0..d {
                    for dd2 in 0..d {
                        let g = pf.g[(c, dd2)];
                        if g == 0.0 {
                            continue;
                        }
                        for ab in 0..dd {
                            wt[c * dd + ab] += g * raised[dd2 * dd + ab];
                        }
                    }
                }
                let djp: Vec<&[f64]> = self.dj.iter().map(|f| f.at(p)).collect();
                let mut a_coef = vec![0.0; dd];
                let mut b_coef = vec![0.0; d * dd];
                for c in 0..d {
                    for a in 0..d {
                        for b in 0..d {
                            let wv = 2.0 * w * wt[c * dd + a * d + b];
                            if wv == 0.0 {
                                continue;
                            }
                            for e in 0..d {
                                a_coef[e * d + a] += wv * djp[e][c * d + b];
                                b_coef[e * dd + c * d + b] += wv * j[e * d + a];
                                a_coef[c * d + e] += wv * djp[b][e * d + a];
                                b_coef[b * dd + e * d + a] += wv * j[c * d + e];
                            }
                        }
                    }
                }
                let mut s = metric_sensitivity(form, &pf.g, &pf.ginv);
                if functional == Functional::Ntilde {
                    s += &pf.ginv * (0.5 * self.norm2[p]);
                }
                s *= w;
                for c in 0..d {
                    for x in 0..d {
                        for y in 0..d {
                            a_coef[c * d + x] += s[(x, y)] * j[c * d + y];
                        }
                    }
                }
                (a_coef, b_coef)
            })
            .collect();
        let mut raw: Vec<Vec<f64>> = (0..dd)
            .map(|k| coeffs.iter().map(|(a, _)| a[k]).collect())
            .collect();
        for e in 0..d {
            let arrays: Vec<Vec<f64>> = (0..dd)
                .map(|k| coeffs.iter().map(|(_, b)| b[e * dd + k]).collect())
                .collect();
            let derivs = deriv_many(grid, &arrays, e);
            for (k, dv) in derivs.iter().enumerate() {
                for (r, v) in raw[k].iter_mut().zip(dv) {
                    *r -= v;
                }
            }
        }
        let field = end_field_from(grid, |p| {
            let h = DMatrix::from_fn(d, d, |r, c| raw[r * d + c][p]);
            orthogonal_tangent_project_matrix(&self.frames[p].j, &h)
        });
        TangentField::new(&self.j, field).expect("orthogonal projection is tangent")
    }

    /// Central difference of the energy along the retraction.
    pub fn fd_directional(
        &self,
        u: &TangentField,
        functional: Functional,
        eps: f64,
    ) -> Result<VariationReport> {
        let analytic = self.first_variation(u, functional)?;
        if u.field().max_abs() == 0.0 {
            return Ok(VariationReport {
                analytic,
                oracle: 0.0,
                eps,
                rel_err: 0.0,
                order_estimate: f64::NAN,
            });
        }
        let unorm = (0..self.grid().npoints())
            .map(|p| spectral_norm(&u.matrix(p)))
            .fold(0.0, f64::max);
        let sweep = (16.0 * eps).min(0.125 / unorm).max(eps);
        central_difference_report(
            |t| energy(&retract(&self.j, &u.scaled(t))?, functional),
            analytic,
            eps,
            sweep,
        )
    }
}

/// Random tangents with the normalized gradient mixed in. Gradients of
/// symmetric structures live on few Fourier modes, to which generic random
/// directions are L²-orthogonal.
pub fn probe_directions<R: Rng>(var: &Variation, functional: Functional, rng: &mut R, count: usize) -> Vec<TangentField> {
    let grad = var.gradient(functional);
    let scale = grad.field().max_abs();
    (0..count)
        .map(|_| {
            let u = random_tangent(var.structure(), rng, 4, 2, 1.0);
            if scale > 0.0 {
                u.axpy(1.0 / scale, &grad)
            } else {
                u
            }
        })
        .collect()
}

/// Trace of the real Nijenhuis tensor, `h^c_a = Σ_b N^c_{ab}`, projected to
/// a tangent direction via `J h`.
pub fn nijenhuis_test_direction(var: &Variation) -> TangentField {
    let grid = var.grid();
    let d = grid.dim();
    let h = end_field_from(grid, |p| {
        let n = var.nijenhuis_real().at(p);
        let trace = DMatrix::from_fn(d, d, |c, a| {
            (0..d).map(|b| n[c * d * d + a * d + b]).sum::<f64>()
        });
        let jm = var.structure().matrix(p);
        &jm * trace
    });
    crate::acstruct::tangent_project(var.structure(), &h).expect("same grid")
}

/// `‖N(retract(J, εu)) - N(J) - ε dN(u)‖_{L²}` for each `ε`.
pub fn linearization_residuals(var: &Variation, u: &TangentField, eps: &[f64]) -> Result<Vec<f64>> {
    let dn = var.dn_real(u);
    eps.iter()
        .map(|&e| {
            let je = retract(var.structure(), &u.scaled(e))?;
            let ne = crate::nijenhuis::nijenhuis_real(&je);
            let diff = ne.axpy(-1.0, var.nijenhuis_real()).axpy(-e, &dn);
            Ok(diff.l2_norm())
        })
        .collect()
}

pub fn ensure_scalar(f: &Field) -> Result<()> {
    if f.kind() != FieldKind::Scalar {
        return Err(NijError::ShapeMismatch {
            expected: "scalar field".into(),
            got: format!("{:?}", f.kind()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acstruct::{random_structure, random_tangent, standard_structure};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(res: usize) -> (ACField, Variation) {
        let g = Grid::new(2, res).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let j = random_structure(g, &mut rng, 4, 1, 0.6).unwrap();
        let v = Variation::new(&j).unwrap();
        (j, v)
    }

    /// Real form of pure type with prescribed `N^k_{īj̄}` in the frame `pf`.
    fn typed_form(pf: &PointFrame, comp: &[C64]) -> Vec<f64> {
        let n = pf.n();
        let d = 2 * n;
        let mut out = vec![0.0; d * d * d];
        for c in 0..d {
            for a in 0..d {
                for b in 0..d {
                    let mut s = C64::new(0.0, 0.0);
                    for k in 0..n {
                        for i in 0..n {
                            for j in 0..n {
                                s -= comp[k * n * n + i * n + j]
                                    * pf.f[(c, k)]
                                    * pf.finv[(n + i, a)]
                                    * pf.finv[(n + j, b)];
                            }
                        }
                    }
                    out[c * d * d + a * d + b] = 2.0 * s.re;
                }
            }
        }
        out
    }

    #[test]
    fn metric_closed_form_matches_real_derivative() {
        use crate::acstruct::{point_frame, retract_matrix, tangent_project_matrix};
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [2usize, 3] {
            let d = 2 * n;
            let mut worst_printed = 0.0f64;
            for _ in 0..5 {
                let j0 = crate::acstruct::standard_structure(Grid::new(n, 8).unwrap()).matrix(0);
                let h = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.3..0.3));
                let jm = retract_matrix(&j0, &tangent_project_matrix(&j0, &h)).unwrap();
                let pf = point_frame(&jm, 0).unwrap();
                let mut comp = vec![C64::new(0.0, 0.0); n * n * n];
                for k in 0..n {
                    for i in 0..n {
                        for j in i + 1..n {
                            let z = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                            comp[k * n * n + i * n + j] = z;
                            comp[k * n * n + j * n + i] = -z;
                        }
                    }
                }
                let form = typed_form(&pf, &comp);
                let back = form_components(&form, &pf);
                assert!(back.iter().zip(&comp).all(|(a, b)| (a - b).norm() < 1e-12));
                let uh = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
                let gm = gamma_matrix(&jm, &tangent_project_matrix(&jm, &uh));
                let gc = pf.form_components(&gm);
                let gamma = DMatrix::from_fn(n, n, |k, m| gc[(k, m + n)]);
                let real = metric_term_real(&form, &pf.g, &pf.ginv, &gm);
                let derived = metric_term(&gamma, &comp, MetricTermForm::Derived);
                let printed = metric_term(&gamma, &comp, MetricTermForm::AsPrinted);
                assert!(
                    (real - derived).abs() <= 1e-12 * real.abs().max(1.0),
                    "{real} vs {derived}"
                );
                worst_printed = worst_printed.max((real - printed).abs() / real.abs().max(1e-12));
            }
            if n == 2 {
                // the raised contraction is diagonal in complex dimension two
                assert!(worst_printed < 1e-12);
            } else {
                assert!(
                    worst_printed > 1e-3,
                    "conjugated form unexpectedly agrees: {worst_printed}"
                );
            }
        }
    }

    #[test]
    fn closed_form_matches_real_route_on_shear_family() {
        let g = Grid::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let j = crate::acstruct::shear_sine(g, 0.4);
        let var = Variation::new(&j).unwrap();
        for _ in 0..3 {
            let u = random_tangent(&j, &mut rng, 6, 2, 0.2);
            for f in [Functional::N, Functional::Ntilde] {
                let a = var.first_variation(&u, f).unwrap();
                let b = var
                    .first_variation_closed_form(&u, f, MetricTermForm::Derived)
                    .unwrap();
                assert!(
                    (a - b).abs() <= 1e-10 * a.abs().max(1e-3),
                    "{f}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn linearization_is_linear() {
        let (j, var) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_tangent(&j, &mut rng, 4, 2, 0.2);
        let v = random_tangent(&j, &mut rng, 4, 2, 0.2);
        let lhs = var.dn_real(&u.scaled(2.0).axpy(-3.0, &v));
        let rhs = var.dn_real(&u).scaled(2.0).axpy(-3.0, &var.dn_real(&v));
        let err = lhs.axpy(-1.0, &rhs).max_abs();
        assert!(err <= 1e-12 * rhs.max_abs().max(1.0));
        assert_eq!(var.dn_real(&TangentField::zeros(j.grid())).max_abs(), 0.0);
    }

    #[test]
    fn pairing_step_matches_direct_pairing() {
        let (j, var) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_tangent(&j, &mut rng, 5, 2, 0.2);
        let expanded = var.pairing_step(&u).unwrap();
        let direct = var.direct_pairing(&u);
        let scale = direct.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        for (a, b) in expanded.values.iter().zip(&direct) {
            assert!((a - b).norm() <= 1e-8 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn integrable_structure_is_critical() {
        let g = Grid::new(2, 8).unwrap();
        let j = standard_structure(g);
        let var = Variation::new(&j).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_tangent(&j, &mut rng, 5, 2, 0.2);
        for f in [Functional::N, Functional::Ntilde] {
            assert!(var.first_variation(&u, f).unwrap().abs() <= 1e-13);
            assert!(var.gradient(f).field().max_abs() <= 1e-12);
        }
        assert!(var
            .pairing_step(&u)
            .unwrap()
            .values
            .iter()
            .all(|z| z.norm() == 0.0));
    }

    #[test]
    fn variation_matches_finite_difference() {
        let (j, var) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_tangent(&j, &mut rng, 5, 2, 0.2);
        for f in [Functional::N, Functional::Ntilde] {
            let rep = var.fd_directional(&u, f, 1e-4).unwrap();
            assert!(rep.rel_err <= 1e-6, "{f}: {rep:?}");
            assert!(rep.order_estimate >= 1.9, "{f}: {rep:?}");
        }
    }

    #[test]
    fn test_direction_sign_agrees() {
        let (_, var) = setup(8);
        let u = nijenhuis_test_direction(&var);
        for f in [Functional::N, Functional::Ntilde] {
            let rep = var
                .fd_directional(&u.scaled(1.0 / u.field().max_abs()), f, 1e-4)
                .unwrap();
            assert_eq!(rep.analytic.signum(), rep.oracle.signum());
        }
    }

    #[test]
    fn gradient_is_riesz_representative() {
        let (j, var) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for f in [Functional::N, Functional::Ntilde] {
            let grad = var.gradient(f);
            for _ in 0..3 {
                let u = random_tangent(&j, &mut rng, 5, 2, 0.2);
                let a = grad.dot(&u);
                let b = var.first_variation(&u, f).unwrap();
                assert!(relative_error(b, a) <= 1e-9, "{f}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn polynomial_family_has_second_order_residual() {
        let rep =
            central_difference_report(|t| Ok(t * t * t + 2.0 * t + 1.0), 2.0, 1e-2, 1e-2).unwrap();
        assert!((rep.order_estimate - 2.0).abs() < 1e-6, "{rep:?}");
    }

    #[test]
    fn zero_direction_has_zero_oracle() {
        let (j, var) = setup(8);
        let rep = var
            .fd_directional(&TangentField::zeros(j.grid()), Functional::N, 1e-4)
            .unwrap();
        assert_eq!(rep.oracle, 0.0);
    }
}
