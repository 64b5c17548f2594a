//! Almost complex structures, tangent perturbations, induced Hermitian data
//! and the retraction back onto `{J² = -I}`.
//!
//! Endomorphism fields store `J^c_a` (image component `c` of basis vector
//! `a`) at offset `c·d + a`, i.e. each point holds a row-major `d × d` matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{NijError, Result};
use crate::grid::{random_trig_field, Field, FieldKind, Grid};
use crate::scalar::C64;

/// Maximum tolerated `‖J² + I‖_max` for accepted structures.
pub const CONSTRAINT_TOL: f64 = 1e-11;
/// Maximum tolerated anticommutator residual, relative to `max(1, ‖u‖_max)`.
pub const TANGENT_TOL: f64 = 1e-10;

pub fn mat_at(f: &Field, point: usize) -> DMatrix<f64> {
    let d = f.grid().dim();
    DMatrix::from_row_slice(d, d, f.at(point))
}

fn write_mat(out: &mut [f64], m: &DMatrix<f64>) {
    let d = m.nrows();
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = m[(r, c)];
        }
    }
}

/// Builds an endomorphism field from a per-point map.
pub fn end_field_from(grid: Grid, f: impl Fn(usize) -> DMatrix<f64> + Sync) -> Field {
    let d = grid.dim();
    let mut values = vec![0.0; grid.npoints() * d * d];
    values
        .par_chunks_mut(d * d)
        .enumerate()
        .for_each(|(p, chunk)| write_mat(chunk, &f(p)));
    Field::new(grid, FieldKind::End, values).expect("shape by construction")
}

fn j0_matrix(d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for k in 0..d / 2 {
        m[(2 * k, 2 * k + 1)] = -1.0;
        m[(2 * k + 1, 2 * k)] = 1.0;
    }
    m
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ACField {
    j: Field,
}

impl ACField {
    pub fn new(j: Field) -> Result<Self> {
        if j.kind() != FieldKind::End {
            return Err(NijError::ShapeMismatch {
                expected: "end field".into(),
                got: format!("{:?}", j.kind()),
            });
        }
        j.check_finite()?;
        let ac = ACField { j };
        let residual = ac.constraint_residual();
        if residual > CONSTRAINT_TOL {
            return Err(NijError::NotAlmostComplex { residual });
        }
        Ok(ac)
    }

    pub fn grid(&self) -> Grid {
        self.j.grid()
    }

    pub fn field(&self) -> &Field {
        &self.j
    }

    pub fn matrix(&self, point: usize) -> DMatrix<f64> {
        mat_at(&self.j, point)
    }

    /// `max_x ‖J(x)² + I‖_max`.
    pub fn constraint_residual(&self) -> f64 {
        let d = self.grid().dim();
        (0..self.grid().npoints())
            .into_par_iter()
            .map(|p| {
                let m = self.matrix(p);
                max_abs(&(&m * &m + DMatrix::identity(d, d)))
            })
            .reduce(|| 0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TangentField {
    u: Field,
}

impl TangentField {
    pub fn new(base: &ACField, u: Field) -> Result<Self> {
        if u.kind() != FieldKind::End || u.grid() != base.grid() {
            return Err(NijError::ShapeMismatch {
                expected: format!("end field on {:?}", base.grid()),
                got: format!("{:?} on {:?}", u.kind(), u.grid()),
            });
        }
        let (point, residual) = anticommutator_residual(base, &u);
        if residual > TANGENT_TOL * u.max_abs().max(1.0) {
            return Err(NijError::NotTangent { point, residual });
        }
        Ok(TangentField { u })
    }

    pub fn zeros(grid: Grid) -> Self {
        TangentField {
            u: Field::zeros(grid, FieldKind::End),
        }
    }

    pub fn grid(&self) -> Grid {
        self.u.grid()
    }

    pub fn field(&self) -> &Field {
        &self.u
    }

    pub fn matrix(&self, point: usize) -> DMatrix<f64> {
        mat_at(&self.u, point)
    }

    pub fn scaled(&self, s: f64) -> Self {
        TangentField {
            u: self.u.scaled(s),
        }
    }

    /// `self + a·other`; both must be tangent at the same base.
    pub fn axpy(&self, a: f64, other: &TangentField) -> Self {
        TangentField {
            u: self.u.axpy(a, &other.u),
        }
    }

    /// Flat `L²` pairing `∫ tr(uᵀ v)`.
    pub fn dot(&self, other: &TangentField) -> f64 {
        self.u.dot(&other.u)
    }

    pub fn l2_norm(&self) -> f64 {
        self.u.l2_norm()
    }

    /// Multiplies every point by a scalar profile (keeps tangency).
    pub fn localized(&self, profile: &Field) -> Self {
        let nc = self.u.ncomp();
        let mut values = self.u.values().to_vec();
        for (p, chunk) in values.chunks_mut(nc).enumerate() {
            let s = profile.at(p)[0];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        TangentField {
            u: Field::new(self.grid(), FieldKind::End, values).expect("same shape"),
        }
    }
}

/// Worst point and value of `‖Ju + uJ‖_max`.
pub fn anticommutator_residual(base: &ACField, u: &Field) -> (usize, f64) {
    (0..base.grid().npoints())
        .into_par_iter()
        .map(|p| {
            let j = base.matrix(p);
            let m = mat_at(u, p);
            (p, max_abs(&(&j * &m + &m * &j)))
        })
        .reduce(|| (0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

pub fn standard_structure(grid: Grid) -> ACField {
    let j0 = j0_matrix(grid.dim());
    ACField {
        j: end_field_from(grid, |_| j0.clone()),
    }
}

/// Second 2×2 block of the shear family, `A J₀ A⁻¹` with `A = [[1, f], [0, 1]]`.
pub fn shear_block(f: f64) -> [[f64; 2]; 2] {
    [[f, -(1.0 + f * f)], [1.0, -f]]
}

/// `J₀` on every block except the second, which is sheared by the profile.
pub fn shear_family(grid: Grid, profile: &Field) -> Result<ACField> {
    if profile.kind() != FieldKind::Scalar || profile.grid() != grid {
        return Err(NijError::ShapeMismatch {
            expected: format!("scalar profile on {grid:?}"),
            got: format!("{:?} on {:?}", profile.kind(), profile.grid()),
        });
    }
    profile.check_finite()?;
    let j0 = j0_matrix(grid.dim());
    let j = end_field_from(grid, |p| {
        let mut m = j0.clone();
        let b = shear_block(profile.at(p)[0]);
        for r in 0..2 {
            for c in 0..2 {
                m[(2 + r, 2 + c)] = b[r][c];
            }
        }
        m
    });
    Ok(ACField { j })
}

/// The default non-integrable test structure, profile `amp·sin(2πx₁)`.
pub fn shear_sine(grid: Grid, amp: f64) -> ACField {
    let profile = Field::from_fn(grid, |x| amp * (2.0 * std::f64::consts::PI * x[0]).sin());
    shear_family(grid, &profile).expect("scalar profile")
}

/// `½(h + JhJ)`.
pub fn tangent_project_matrix(j: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    (h + j * h * j) * 0.5
}

pub fn tangent_project(j: &ACField, h: &Field) -> Result<TangentField> {
    if h.kind() != FieldKind::End || h.grid() != j.grid() {
        return Err(NijError::ShapeMismatch {
            expected: format!("end field on {:?}", j.grid()),
            got: format!("{:?} on {:?}", h.kind(), h.grid()),
        });
    }
    let u = end_field_from(j.grid(), |p| {
        tangent_project_matrix(&j.matrix(p), &mat_at(h, p))
    });
    Ok(TangentField { u })
}

/// `K = J ⊗ Jᵀ` acting on row-major flattened endomorphisms, `K·vec(h) = vec(JhJ)`.
fn conjugation_matrix(j: &DMatrix<f64>) -> DMatrix<f64> {
    let d = j.nrows();
    DMatrix::from_fn(d * d, d * d, |row, col| j[(row / d, col / d)] * j[(col % d, row % d)])
}

/// Frobenius-orthogonal projector onto `{h : Jh + hJ = 0}` as a `d² × d²`
/// matrix acting on row-major flattened endomorphisms.
pub fn orthogonal_projector(j: &DMatrix<f64>) -> DMatrix<f64> {
    let dd = j.nrows() * j.nrows();
    let k = conjugation_matrix(j);
    let p = (DMatrix::identity(dd, dd) + &k) * 0.5;
    // P (P + Pᵀ - I)⁻¹ is the orthogonal projector onto range(P)
    let m = &p + p.transpose() - DMatrix::identity(dd, dd);
    let minv = m
        .try_inverse()
        .expect("P + Pᵀ - I is invertible for any projector");
    p * minv
}

macro_rules! project_fixed {
    ($name:ident, $d:literal, $dd:literal) => {
        fn $name(j: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
            let k = nalgebra::SMatrix::<f64, $dd, $dd>::from_fn(|row, col| j[(row / $d, col / $d)] * j[(col % $d, row % $d)]);
            let flat = nalgebra::SVector::<f64, $dd>::from_fn(|i, _| 2.0 * h[(i / $d, i % $d)]);
            let x = (k + k.transpose()).lu().solve(&flat).expect("P + Pᵀ - I is invertible for any projector");
            let out = (x + k * x) * 0.5;
            DMatrix::from_fn($d, $d, |r, c| out[r * $d + c])
        }
    };
}
project_fixed!(project_4, 4, 16);
project_fixed!(project_6, 6, 36);

pub fn orthogonal_tangent_project_matrix(j: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let d = j.nrows();
    match d {
        4 => return project_4(j, h),
        6 => return project_6(j, h),
        _ => {}
    }
    let flat = DMatrix::from_iterator(d * d, 1, (0..d * d).map(|i| h[(i / d, i % d)]));
    let k = conjugation_matrix(j);
    // P + Pᵀ - I = ½(K + Kᵀ) with P = ½(I + K)
    let x = (&k + k.transpose())
        .lu()
        .solve(&(flat * 2.0))
        .expect("P + Pᵀ - I is invertible for any projector");
    let out = (&x + &k * &x) * 0.5;
    DMatrix::from_fn(d, d, |r, c| out[r * d + c])
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let fro = m.norm();
    if fro < 1.0 {
        return fro;
    }
    let eig = SymmetricEigen::new(m.transpose() * m);
    eig.eigenvalues
        .iter()
        .fold(0.0f64, |a, v| a.max(*v))
        .max(0.0)
        .sqrt()
}

/// `M^{-1/2}` by Denman–Beavers iteration.
pub fn inverse_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = m.nrows();
    let mut y = m.clone();
    let mut z = DMatrix::identity(d, d);
    for _ in 0..100 {
        let yi = y.clone().try_inverse()?;
        let zi = z.clone().try_inverse()?;
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&z_next - &z).norm();
        y = y_next;
        z = z_next;
        if delta <= 1e-14 * z.norm() {
            return Some(z);
        }
    }
    None
}

/// `A(-A²)^{-1/2}` with `A = J + u` at one point.
pub fn retract_matrix(j: &DMatrix<f64>, u: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let a = j + u;
    let m = -(&a * &a);
    let z = inverse_sqrt(&m)?;
    Some(a * z)
}

pub fn retract(j: &ACField, u: &TangentField) -> Result<ACField> {
    let grid = j.grid();
    let (point, norm) = (0..grid.npoints())
        .into_par_iter()
        .map(|p| (p, spectral_norm(&u.matrix(p))))
        .reduce(|| (0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if norm >= 1.0 {
        return Err(NijError::StepTooLarge { point, norm });
    }
    let out: Vec<Option<DMatrix<f64>>> = (0..grid.npoints())
        .into_par_iter()
        .map(|p| {
            let um = u.matrix(p);
            if um.iter().all(|v| *v == 0.0) {
                Some(j.matrix(p))
            } else {
                retract_matrix(&j.matrix(p), &um)
            }
        })
        .collect();
    if let Some(bad) = out.iter().position(|m| m.is_none()) {
        return Err(NijError::DegenerateStructure {
            point: bad,
            reason: "square root iteration diverged".into(),
        });
    }
    let field = end_field_from(grid, |p| out[p].clone().expect("checked"));
    ACField::new(field)
}

/// Random band-limited tangent direction, `tangent_project` of a random field.
pub fn random_tangent<R: Rng>(
    j: &ACField,
    rng: &mut R,
    modes: usize,
    kmax: i64,
    amp: f64,
) -> TangentField {
    let grid = j.grid();
    let d = grid.dim();
    let comps: Vec<Field> = (0..d * d)
        .map(|_| random_trig_field(grid, rng, modes, kmax, amp))
        .collect();
    let h = end_field_from(grid, |p| {
        DMatrix::from_fn(d, d, |r, c| comps[r * d + c].at(p)[0])
    });
    tangent_project(j, &h).expect("same grid")
}

/// Generic non-integrable structure: `J₀` pushed along a random band-limited
/// direction whose pointwise spectral norm is at most `size < 1`.
pub fn random_structure<R: Rng>(
    grid: Grid,
    rng: &mut R,
    modes: usize,
    kmax: i64,
    size: f64,
) -> Result<ACField> {
    let j0 = standard_structure(grid);
    let u = random_tangent(&j0, rng, modes, kmax, 1.0);
    let worst = (0..grid.npoints())
        .map(|p| spectral_norm(&u.matrix(p)))
        .fold(0.0, f64::max);
    if worst == 0.0 {
        return Ok(j0);
    }
    retract(&j0, &u.scaled(size / worst))
}

/// `A S J₀ S⁻¹ A⁻¹` with `S = I + [[0, B], [0, 0]]`, `B` a random
/// trigonometric block with modes up to `kmax` and `A` a random constant
/// matrix near the identity. Entries are trigonometric polynomials of degree
/// `2·kmax`, so spectral derivatives are exact when `4·kmax < res`.
pub fn random_trigonometric_structure<R: Rng>(
    grid: Grid,
    rng: &mut R,
    modes: usize,
    kmax: i64,
    amp: f64,
) -> Result<ACField> {
    let d = grid.dim();
    let h = d / 2;
    let block: Vec<Field> = (0..h * h).map(|_| random_trig_field(grid, rng, modes, kmax, amp)).collect();
    let a = DMatrix::from_fn(d, d, |r, c| if r == c { 1.0 } else { 0.0 } + rng.gen_range(-0.25..0.25));
    let a_inv = a.clone().try_inverse().ok_or_else(|| NijError::DegenerateStructure { point: 0, reason: "singular conjugator".into() })?;
    let j0 = j0_matrix(d);
    let j = end_field_from(grid, |p| {
        let mut nil = DMatrix::zeros(d, d);
        for r in 0..h {
            for c in 0..h {
                nil[(r, h + c)] = block[r * h + c].at(p)[0];
            }
        }
        let id = DMatrix::<f64>::identity(d, d);
        &a * (&id + &nil) * &j0 * (&id - &nil) * &a_inv
    });
    ACField::new(j)
}

/// Pointwise Hermitian data of `J`: `g_J`, its inverse, `ω`, a unitary frame
/// of `T^{1,0}` and the volume density.
#[derive(Clone, Debug)]
pub struct PointFrame {
    pub j: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub ginv: DMatrix<f64>,
    /// `ω_{ab} = g_J(J∂_a, ∂_b)`.
    pub omega: DMatrix<f64>,
    /// Columns `e_1..e_n, ē_1..ē_n`.
    pub f: DMatrix<C64>,
    /// Rows `θ^1..θ^n, θ̄^1..θ̄^n`.
    pub finv: DMatrix<C64>,
    /// `ωⁿ/n!` density, the Pfaffian of `ω`.
    pub vol: f64,
}

/// `g_J = ½(I + JᵀJ)` for the flat background metric.
pub fn averaged_metric(j: &DMatrix<f64>) -> DMatrix<f64> {
    let d = j.nrows();
    (DMatrix::identity(d, d) + j.transpose() * j) * 0.5
}

pub fn pfaffian(m: &DMatrix<f64>) -> f64 {
    let d = m.nrows();
    if d == 0 {
        return 1.0;
    }
    let mut acc = 0.0;
    for k in 1..d {
        if m[(0, k)] == 0.0 {
            continue;
        }
        let keep: Vec<usize> = (1..d).filter(|&i| i != k).collect();
        let minor = DMatrix::from_fn(d - 2, d - 2, |r, c| m[(keep[r], keep[c])]);
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        acc += sign * m[(0, k)] * pfaffian(&minor);
    }
    acc
}

fn herm(x: &[C64], g: &DMatrix<f64>, y: &[C64]) -> C64 {
    let d = x.len();
    let mut s = C64::new(0.0, 0.0);
    for a in 0..d {
        for b in 0..d {
            s += x[a] * g[(a, b)] * y[b].conj();
        }
    }
    s
}

/// Frame of `T^{1,0}` by pivoted Gram–Schmidt of the columns of `(I - iJ)/2`
/// under `⟨x, y⟩ = xᵀ g_J ȳ`.
pub fn point_frame(j: &DMatrix<f64>, point: usize) -> Result<PointFrame> {
    let d = j.nrows();
    let n = d / 2;
    let g = averaged_metric(j);
    let mut cands: Vec<Vec<C64>> = (0..d)
        .map(|c| {
            (0..d)
                .map(|r| C64::new(if r == c { 0.5 } else { 0.0 }, -0.5 * j[(r, c)]))
                .collect()
        })
        .collect();
    let mut basis: Vec<Vec<C64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let (best, norm2) = cands
            .iter()
            .enumerate()
            .map(|(i, v)| (i, herm(v, &g, v).re))
            .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
        if norm2 <= 1e-20 {
            return Err(NijError::DegenerateStructure {
                point,
                reason: "rank-deficient (1,0) projector".into(),
            });
        }
        let e: Vec<C64> = cands
            .swap_remove(best)
            .iter()
            .map(|z| z / norm2.sqrt())
            .collect();
        for v in cands.iter_mut() {
            let c = herm(v, &g, &e);
            for (vi, ei) in v.iter_mut().zip(&e) {
                *vi -= c * ei;
            }
        }
        basis.push(e);
    }
    let f = DMatrix::from_fn(d, d, |r, c| {
        if c < n {
            basis[c][r]
        } else {
            basis[c - n][r].conj()
        }
    });
    let finv = f
        .clone()
        .try_inverse()
        .ok_or_else(|| NijError::DegenerateStructure {
            point,
            reason: "frame not invertible".into(),
        })?;
    let ginv = g
        .clone()
        .try_inverse()
        .ok_or_else(|| NijError::DegenerateStructure {
            point,
            reason: "singular averaged metric".into(),
        })?;
    let omega = j.transpose() * &g;
    let vol = pfaffian(&omega);
    Ok(PointFrame {
        j: j.clone(),
        g,
        ginv,
        omega,
        f,
        finv,
        vol,
    })
}

impl PointFrame {
    pub fn n(&self) -> usize {
        self.j.nrows() / 2
    }

    /// Frame vector `e_k` (or `ē_{k-n}` for `k ≥ n`).
    pub fn vector(&self, k: usize) -> Vec<C64> {
        self.f.column(k).iter().copied().collect()
    }

    /// Replaces `e` by `e·U` for a unitary `U` (and `ē` by `ē·Ū`).
    pub fn rotated(&self, unitary: &DMatrix<C64>) -> PointFrame {
        let n = self.n();
        let d = 2 * n;
        let mut big = DMatrix::zeros(d, d);
        for r in 0..n {
            for c in 0..n {
                big[(r, c)] = unitary[(r, c)];
                big[(r + n, c + n)] = unitary[(r, c)].conj();
            }
        }
        let f = &self.f * &big;
        let finv = f
            .clone()
            .try_inverse()
            .expect("unitary change of an invertible frame");
        PointFrame {
            f,
            finv,
            ..self.clone()
        }
    }

    /// Complex components `E^K_L = θ^K(E f_L)` of a real endomorphism.
    pub fn end_components(&self, e: &DMatrix<f64>) -> DMatrix<C64> {
        &self.finv * e.map(|v| C64::new(v, 0.0)) * &self.f
    }

    /// `B(f_K, f_L)` for a real bilinear form.
    pub fn form_components(&self, b: &DMatrix<f64>) -> DMatrix<C64> {
        self.f.transpose() * b.map(|v| C64::new(v, 0.0)) * &self.f
    }
}

pub fn frames(j: &ACField) -> Result<Vec<PointFrame>> {
    (0..j.grid().npoints())
        .into_par_iter()
        .map(|p| point_frame(&j.matrix(p), p))
        .collect()
}

/// `γ_{ab} = ½(g(u∂_a, J∂_b) + g(J∂_a, u∂_b))` for the flat metric.
pub fn gamma_matrix(j: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    (u.transpose() * j + j.transpose() * u) * 0.5
}

/// `g′` in all placements, `g′(f_K, f_L) = ½ g(f_K, J f_L)`.
pub fn gprime_components(pf: &PointFrame) -> DMatrix<C64> {
    let jf = pf.j.map(|v| C64::new(v, 0.0)) * &pf.f;
    pf.f.transpose() * jf * C64::new(0.5, 0.0)
}

/// `γ_{km̄}` assembled from `g′`:
/// `u^v_k g′_{v m̄} + u^{v̄}_k g′_{v̄ m̄} + u^v_{m̄} g′_{v k} + u^{v̄}_{m̄} g′_{v̄ k}`.
pub fn gamma_from_gprime(pf: &PointFrame, u: &DMatrix<f64>) -> DMatrix<C64> {
    let n = pf.n();
    let uc = pf.end_components(u);
    let gp = gprime_components(pf);
    DMatrix::from_fn(n, n, |k, m| {
        let mut s = C64::new(0.0, 0.0);
        for big_v in 0..2 * n {
            s += uc[(big_v, k)] * gp[(big_v, m + n)] + uc[(big_v, m + n)] * gp[(big_v, k)];
        }
        s
    })
}

/// Metric perturbation at each point: the real symmetric form and the frame
/// components `γ_{km̄} = γ(e_k, ē_m)`.
#[derive(Clone, Debug)]
pub struct MetricPerturbation {
    pub real: Field,
    pub comps: Vec<DMatrix<C64>>,
}

pub fn metric_perturbation(
    j: &ACField,
    u: &TangentField,
    frames: &[PointFrame],
) -> Result<MetricPerturbation> {
    if frames.len() != j.grid().npoints() {
        return Err(NijError::FrameMismatch);
    }
    let n = j.grid().n();
    let real = end_field_from(j.grid(), |p| gamma_matrix(&j.matrix(p), &u.matrix(p)));
    let comps = (0..j.grid().npoints())
        .into_par_iter()
        .map(|p| {
            let c = frames[p].form_components(&mat_at(&real, p));
            DMatrix::from_fn(n, n, |k, m| c[(k, m + n)])
        })
        .collect();
    Ok(MetricPerturbation { real, comps })
}

static NEXT_FRAME_ID: AtomicU64 = AtomicU64::new(1);

/// Identifier tying tensor components to the frames they were taken in.
pub fn fresh_frame_id() -> u64 {
    NEXT_FRAME_ID.fetch_add(1, Ordering::Relaxed)
}

/// Hermitian data of `g_{J+u}` to first order in `u`.
#[derive(Clone, Debug)]
pub struct HermitianData {
    pub id: u64,
    pub frames: Vec<PointFrame>,
    /// `h_{ij̄} = (g_J + γ)(e_i, ē_j)`.
    pub h_lower: Vec<DMatrix<C64>>,
    /// Components of `conj(h⁻¹)`.
    pub h_upper: Vec<DMatrix<C64>>,
}

pub fn hermitian_data(j: &ACField, u: Option<&TangentField>) -> Result<HermitianData> {
    let frames = frames(j)?;
    let n = j.grid().n();
    let h_lower: Vec<DMatrix<C64>> = match u {
        None => vec![DMatrix::identity(n, n); frames.len()],
        Some(u) => {
            let (point, residual) = anticommutator_residual(j, u.field());
            if residual > TANGENT_TOL * u.field().max_abs().max(1.0) {
                return Err(NijError::NotTangent { point, residual });
            }
            let mp = metric_perturbation(j, u, &frames)?;
            mp.comps
                .into_iter()
                .map(|c| DMatrix::identity(n, n) + c)
                .collect()
        }
    };
    let h_upper = h_lower
        .iter()
        .enumerate()
        .map(|(p, h)| {
            h.clone()
                .try_inverse()
                .map(|m| m.map(|z| z.conj()))
                .ok_or_else(|| NijError::DegenerateStructure {
                    point: p,
                    reason: "perturbed metric not invertible".into(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HermitianData {
        id: fresh_frame_id(),
        frames,
        h_lower,
        h_upper,
    })
}

impl HermitianData {
    /// Same metric data with every frame rotated by the given unitary.
    pub fn rotated(&self, unitary: &DMatrix<C64>) -> HermitianData {
        let frames: Vec<PointFrame> = self.frames.par_iter().map(|f| f.rotated(unitary)).collect();
        let h_lower: Vec<DMatrix<C64>> = self
            .h_lower
            .iter()
            .map(|h| unitary.adjoint() * h * unitary)
            .collect();
        let h_upper = h_lower
            .iter()
            .map(|h| {
                h.clone()
                    .try_inverse()
                    .expect("invertible")
                    .map(|z| z.conj())
            })
            .collect();
        HermitianData {
            id: fresh_frame_id(),
            frames,
            h_lower,
            h_upper,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(2, 8).unwrap()
    }

    #[test]
    fn trigonometric_structure_has_exact_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for n in [2, 3] {
            let j = random_trigonometric_structure(Grid::new(n, 8).unwrap(), &mut rng, 3, 1, 0.6).unwrap();
            assert!(j.constraint_residual() < 1e-12);
            for axis in 0..2 * n {
                let dj = crate::grid::spectral_derivative(j.field(), axis).unwrap();
                assert!(anticommutator_residual(&j, &dj).1 < 1e-11);
            }
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn standard_squares_to_minus_one() {
        let j = standard_structure(grid());
        assert_eq!(j.constraint_residual(), 0.0);
        let j3 = standard_structure(Grid::new(3, 8).unwrap());
        assert_eq!(j3.constraint_residual(), 0.0);
    }

    #[test]
    fn shear_with_zero_profile_is_standard() {
        let g = grid();
        let s = shear_family(g, &Field::constant(g, 0.0)).unwrap();
        assert_eq!(s, standard_structure(g));
        assert!(shear_sine(g, 0.3).constraint_residual() <= 1e-12);
    }

    #[test]
    fn projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let jm = shear_sine(grid(), 0.3).matrix(37);
        let h = random_matrix(&mut rng, 4);
        let u = tangent_project_matrix(&jm, &h);
        assert!(max_abs(&(&jm * &u + &u * &jm)) <= 1e-13);
        assert!(max_abs(&(tangent_project_matrix(&jm, &u) - &u)) <= 1e-13);
        assert!(max_abs(&tangent_project_matrix(&jm, &jm)) <= 1e-13);
    }

    #[test]
    fn orthogonal_projector_is_symmetric_idempotent_and_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let jm = shear_sine(grid(), 0.3).matrix(3);
        let p = orthogonal_projector(&jm);
        assert!(max_abs(&(&p - p.transpose())) <= 1e-12);
        assert!(max_abs(&(&p * &p - &p)) <= 1e-12);
        let h = random_matrix(&mut rng, 4);
        let u = orthogonal_tangent_project_matrix(&jm, &h);
        assert!(max_abs(&(&jm * &u + &u * &jm)) <= 1e-12);
        // residual is Frobenius-orthogonal to every tangent vector
        let t = tangent_project_matrix(&jm, &random_matrix(&mut rng, 4));
        assert!((&h - &u).dot(&t).abs() <= 1e-12);
    }

    #[test]
    fn retract_zero_is_identity() {
        let j = shear_sine(grid(), 0.3);
        let r = retract(&j, &TangentField::zeros(grid())).unwrap();
        assert_eq!(r, j);
    }

    #[test]
    fn retract_rejects_large_steps() {
        let g = grid();
        let j = standard_structure(g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_tangent(&j, &mut rng, 4, 2, 1.0);
        let big = u.scaled(10.0 / u.field().max_abs());
        assert!(matches!(
            retract(&j, &big),
            Err(NijError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn retraction_is_second_order_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let jm = shear_sine(grid(), 0.3).matrix(21);
        let u = tangent_project_matrix(&jm, &random_matrix(&mut rng, 4));
        let eps = [1e-2, 1e-3, 1e-4];
        let errs: Vec<f64> = eps
            .iter()
            .map(|e| (retract_matrix(&jm, &(&u * *e)).unwrap() - &jm - &u * *e).norm())
            .collect();
        let slope = (errs[0].ln() - errs[2].ln()) / (eps[0].ln() - eps[2].ln());
        assert!((slope - 2.0).abs() <= 0.1, "slope {slope}");
        let r = retract_matrix(&jm, &(&u * 0.1)).unwrap();
        assert!(max_abs(&(&r * &r + DMatrix::identity(4, 4))) <= 1e-12);
    }

    #[test]
    fn frame_is_unitary_and_diagonalizes_j() {
        let j = shear_sine(Grid::new(3, 8).unwrap(), 0.4);
        let pf = point_frame(&j.matrix(100), 100).unwrap();
        let n = pf.n();
        let gc = pf.form_components(&pf.g);
        for k in 0..n {
            for l in 0..n {
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!((gc[(k, l + n)] - expect).norm() <= 1e-12);
                assert!(gc[(k, l)].norm() <= 1e-12);
            }
        }
        let jc = pf.end_components(&pf.j);
        for r in 0..2 * n {
            for c in 0..2 * n {
                let expect = if r != c {
                    C64::new(0.0, 0.0)
                } else if r < n {
                    C64::new(0.0, 1.0)
                } else {
                    C64::new(0.0, -1.0)
                };
                assert!((jc[(r, c)] - expect).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn averaged_metric_is_j_invariant_and_volume_matches() {
        let j = shear_sine(grid(), 0.3);
        for p in [0, 17, 300] {
            let pf = point_frame(&j.matrix(p), p).unwrap();
            let inv = pf.j.transpose() * &pf.g * &pf.j;
            assert!(max_abs(&(inv - &pf.g)) <= 1e-12);
            assert!(max_abs(&(&pf.omega + pf.omega.transpose())) <= 1e-12);
            let jinv = pf.j.transpose() * &pf.omega * &pf.j;
            assert!(max_abs(&(jinv - &pf.omega)) <= 1e-12);
            assert!((pf.vol - pf.g.determinant().sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn standard_hermitian_data_is_identity() {
        let hd = hermitian_data(&standard_structure(grid()), None).unwrap();
        let id = DMatrix::<C64>::identity(2, 2);
        assert!(hd.h_lower.iter().all(|h| *h == id));
        assert!(hd.frames.iter().all(|f| (f.vol - 1.0).abs() < 1e-15));
    }

    #[test]
    fn gamma_routes_agree() {
        let g = grid();
        let j = shear_sine(g, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_tangent(&j, &mut rng, 5, 2, 0.2);
        let fr = frames(&j).unwrap();
        let mp = metric_perturbation(&j, &u, &fr).unwrap();
        for p in [0, 5, 99, 411] {
            let via_gp = gamma_from_gprime(&fr[p], &u.matrix(p));
            assert!((via_gp - &mp.comps[p]).iter().all(|z| z.norm() <= 1e-12));
            let real = mat_at(&mp.real, p);
            assert!(max_abs(&(&real - real.transpose())) == 0.0);
        }
        let zero = metric_perturbation(&j, &TangentField::zeros(g), &fr).unwrap();
        assert_eq!(zero.real.max_abs(), 0.0);
    }

    #[test]
    fn perturbed_metric_is_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let jm = shear_sine(grid(), 0.3).matrix(9);
        let u = tangent_project_matrix(&jm, &random_matrix(&mut rng, 4));
        let eps = [1e-2, 1e-3, 1e-4];
        let errs: Vec<f64> = eps
            .iter()
            .map(|e| {
                let ue = &u * *e;
                let exact = averaged_metric(&(&jm + &ue));
                (exact - averaged_metric(&jm) - gamma_matrix(&jm, &ue)).norm()
            })
            .collect();
        let slope = (errs[0].ln() - errs[2].ln()) / (eps[0].ln() - eps[2].ln());
        assert!((slope - 2.0).abs() <= 0.1, "slope {slope}");
    }
}
