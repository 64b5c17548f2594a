//! Periodic discretization of the flat torus `T^{2n} = R^{2n} / Z^{2n}`.
//!
//! Fields are sampled on a uniform `res^{2n}` lattice, points in row-major
//! order (axis 0 slowest), with all components of a point stored
//! contiguously. Derivatives differentiate the trigonometric interpolant with
//! the Nyquist mode removed, so every derivative operator is a real
//! antisymmetric circulant and discrete integration by parts holds to
//! rounding.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{NijError, Result};
use crate::scalar::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    n: usize,
    res: usize,
}

impl Grid {
    pub fn new(n: usize, res: usize) -> Result<Self> {
        if !(2..=3).contains(&n) {
            return Err(NijError::InvalidGrid(format!(
                "complex dimension {n} not in {{2, 3}}"
            )));
        }
        if res < 8 || !res.is_power_of_two() {
            return Err(NijError::InvalidGrid(format!(
                "res {res} is not a power of two >= 8"
            )));
        }
        Ok(Grid { n, res })
    }

    /// Complex dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Real dimension `2n`.
    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn npoints(&self) -> usize {
        self.res.pow(self.dim() as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        1.0 / self.npoints() as f64
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.res as f64
    }

    /// Index stride of `axis` in the point ordering.
    pub fn stride(&self, axis: usize) -> usize {
        self.res.pow((self.dim() - 1 - axis) as u32)
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let d = self.dim();
        let mut out = vec![0; d];
        for a in (0..d).rev() {
            out[a] = idx % self.res;
            idx /= self.res;
        }
        out
    }

    /// Flat index of a (possibly out-of-range) lattice coordinate, wrapped.
    pub fn index_wrapped(&self, mi: &[i64]) -> usize {
        let r = self.res as i64;
        mi.iter()
            .fold(0usize, |acc, &i| acc * self.res + i.rem_euclid(r) as usize)
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .into_iter()
            .map(|i| i as f64 / self.res as f64)
            .collect()
    }

    /// Nearest lattice point to `x` (coordinates taken modulo 1).
    pub fn nearest_index(&self, x: &[f64]) -> usize {
        let mi: Vec<i64> = x
            .iter()
            .map(|&c| (c * self.res as f64).round() as i64)
            .collect();
        self.index_wrapped(&mi)
    }

    /// Minimal periodic displacement `x - p`, componentwise in `[-1/2, 1/2)`.
    pub fn displacement(&self, x: &[f64], p: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(p)
            .map(|(a, b)| {
                let d = a - b;
                d - (d + 0.5).floor()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    End,
    Form,
}

impl FieldKind {
    /// Components per point of a real field on a `dim`-dimensional torus.
    pub fn real_components(self, dim: usize) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::End => dim * dim,
            FieldKind::Form => dim * dim * dim,
        }
    }

    /// Components per point of a complex field in a frame of complex
    /// dimension `n` (`End` in the basis `(e, ē)`, `Form` as `N^k_{īj̄}`).
    pub fn complex_components(self, n: usize) -> usize {
        match self {
            FieldKind::Scalar => 1,
            FieldKind::End => 4 * n * n,
            FieldKind::Form => n * n * n,
        }
    }
}

/// Real field with `ncomp` components per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    kind: FieldKind,
    values: Vec<f64>,
}

pub type ScalarField = Field;
pub type EndField = Field;
pub type FormField = Field;

impl Field {
    pub fn new(grid: Grid, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        let expected = grid.npoints() * kind.real_components(grid.dim());
        if values.len() != expected {
            return Err(NijError::ShapeMismatch {
                expected: format!("{expected} values"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Field { grid, kind, values })
    }

    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        let len = grid.npoints() * kind.real_components(grid.dim());
        Field {
            grid,
            kind,
            values: vec![0.0; len],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64 + Sync) -> Self {
        let values = (0..grid.npoints())
            .into_par_iter()
            .map(|i| f(&grid.coords(i)))
            .collect();
        Field {
            grid,
            kind: FieldKind::Scalar,
            values,
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Field {
            grid,
            kind: FieldKind::Scalar,
            values: vec![c; grid.npoints()],
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn ncomp(&self) -> usize {
        self.kind.real_components(self.grid.dim())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, point: usize) -> &[f64] {
        let nc = self.ncomp();
        &self.values[point * nc..(point + 1) * nc]
    }

    /// Contiguous copy of one component over all points.
    pub fn component(&self, c: usize) -> Vec<f64> {
        let nc = self.ncomp();
        self.values.iter().skip(c).step_by(nc).copied().collect()
    }

    pub fn set_component(&mut self, c: usize, data: &[f64]) {
        let nc = self.ncomp();
        for (p, v) in data.iter().enumerate() {
            self.values[p * nc + c] = *v;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(NijError::RejectedInput(format!(
                "non-finite value at point {} component {}",
                i / self.ncomp(),
                i % self.ncomp()
            ))),
            None => Ok(()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Field {
        Field {
            grid: self.grid,
            kind: self.kind,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn axpy(&self, a: f64, other: &Field) -> Field {
        assert_eq!(self.values.len(), other.values.len());
        Field {
            grid: self.grid,
            kind: self.kind,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }

    /// Flat-quadrature `L²` inner product summed over components.
    pub fn dot(&self, other: &Field) -> f64 {
        assert_eq!(self.values.len(), other.values.len());
        self.grid.cell_volume()
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Complex per-point data in a frame, e.g. the components `N^k_{īj̄}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    pub grid: Grid,
    pub kind: FieldKind,
    pub values: Vec<C64>,
}

impl ComplexField {
    pub fn ncomp(&self) -> usize {
        self.kind.complex_components(self.grid.n())
    }

    pub fn at(&self, point: usize) -> &[C64] {
        let nc = self.ncomp();
        &self.values[point * nc..(point + 1) * nc]
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(res: usize) -> Arc<Plans> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Plans>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry(res)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(Plans {
                forward: planner.plan_fft_forward(res),
                inverse: planner.plan_fft_inverse(res),
            })
        })
        .clone()
}

/// Spectral wavenumber multipliers `2πi k / res` (inverse normalization
/// folded in), Nyquist removed.
fn multipliers(res: usize) -> Vec<C64> {
    (0..res)
        .map(|j| {
            let k = if j < res / 2 {
                j as f64
            } else if j == res / 2 {
                0.0
            } else {
                j as f64 - res as f64
            };
            C64::new(0.0, 2.0 * std::f64::consts::PI * k / res as f64)
        })
        .collect()
}

/// Differentiates two real scalar arrays along `axis` at once by packing
/// them as the real and imaginary parts of one complex transform.
fn deriv_pair(
    grid: Grid,
    a: &[f64],
    b: Option<&[f64]>,
    axis: usize,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let res = grid.res();
    let stride = grid.stride(axis);
    let block = res * stride;
    let plans = plans(res);
    let mult = multipliers(res);
    let mut packed: Vec<C64> = match b {
        Some(b) => a.iter().zip(b).map(|(x, y)| C64::new(*x, *y)).collect(),
        None => a.iter().map(|x| C64::new(*x, 0.0)).collect(),
    };
    packed.par_chunks_mut(block).for_each(|chunk| {
        let mut line = vec![C64::new(0.0, 0.0); res];
        let mut scratch = vec![C64::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];
        for inner in 0..stride {
            for k in 0..res {
                line[k] = chunk[k * stride + inner];
            }
            plans.forward.process_with_scratch(&mut line, &mut scratch);
            for (v, m) in line.iter_mut().zip(&mult) {
                *v *= m;
            }
            plans.inverse.process_with_scratch(&mut line, &mut scratch);
            for k in 0..res {
                chunk[k * stride + inner] = line[k];
            }
        }
    });
    let da = packed.iter().map(|z| z.re).collect();
    let db = b.map(|_| packed.iter().map(|z| z.im).collect());
    (da, db)
}

/// Spectral derivative of a contiguous scalar array.
pub fn deriv_scalar(grid: Grid, data: &[f64], axis: usize) -> Vec<f64> {
    deriv_pair(grid, data, None, axis).0
}

/// Spectral derivatives of many scalar arrays along one axis.
pub fn deriv_many(grid: Grid, arrays: &[Vec<f64>], axis: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(arrays.len());
    for pair in arrays.chunks(2) {
        let (da, db) = deriv_pair(grid, &pair[0], pair.get(1).map(|v| v.as_slice()), axis);
        out.push(da);
        if let Some(db) = db {
            out.push(db);
        }
    }
    out
}

/// Derivative of the trigonometric interpolant of every component of `f`
/// along `axis`.
pub fn spectral_derivative(f: &Field, axis: usize) -> Result<Field> {
    let grid = f.grid();
    if axis >= grid.dim() {
        return Err(NijError::RejectedInput(format!(
            "axis {axis} out of range for dimension {}",
            grid.dim()
        )));
    }
    f.check_finite()?;
    let comps: Vec<Vec<f64>> = (0..f.ncomp()).map(|c| f.component(c)).collect();
    let derivs = deriv_many(grid, &comps, axis);
    let mut out = Field::zeros(grid, f.kind());
    for (c, d) in derivs.iter().enumerate() {
        out.set_component(c, d);
    }
    Ok(out)
}

/// Spectral derivative of every component of `f` along `axis`, at one point
/// only (a 1D transform of the grid line through `point`).
pub fn derivative_at(f: &Field, point: usize, axis: usize) -> Result<Vec<f64>> {
    let grid = f.grid();
    if axis >= grid.dim() || point >= grid.npoints() {
        return Err(NijError::RejectedInput(format!("axis {axis} / point {point} out of range")));
    }
    let res = grid.res();
    let stride = grid.stride(axis);
    let pos = (point / stride) % res;
    let base = point - pos * stride;
    let plans = plans(res);
    let mult = multipliers(res);
    let mut scratch = vec![C64::new(0.0, 0.0); plans.forward.get_inplace_scratch_len()];
    let nc = f.ncomp();
    let mut out = vec![0.0; nc];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut line: Vec<C64> = (0..res).map(|k| C64::new(f.at(base + k * stride)[c], 0.0)).collect();
        plans.forward.process_with_scratch(&mut line, &mut scratch);
        // value at `pos` of the inverse transform
        let mut acc = C64::new(0.0, 0.0);
        for (k, (v, m)) in line.iter().zip(&mult).enumerate() {
            let phase = 2.0 * std::f64::consts::PI * (k * pos) as f64 / res as f64;
            acc += v * m * C64::new(phase.cos(), phase.sin());
        }
        *slot = acc.re;
    }
    Ok(out)
}

/// `cell_volume · Σ f · vol` over all points.
pub fn integrate(f: &Field, vol: &Field) -> Result<f64> {
    if f.kind() != FieldKind::Scalar || vol.kind() != FieldKind::Scalar || f.grid() != vol.grid() {
        return Err(NijError::ShapeMismatch {
            expected: format!("two scalar fields on {:?}", f.grid()),
            got: format!(
                "{:?} on {:?} and {:?} on {:?}",
                f.kind(),
                f.grid(),
                vol.kind(),
                vol.grid()
            ),
        });
    }
    Ok(f.grid().cell_volume()
        * f.values()
            .iter()
            .zip(vol.values())
            .map(|(a, b)| a * b)
            .sum::<f64>())
}

pub fn integrate_complex(grid: Grid, f: &[C64], vol: &[f64]) -> Result<C64> {
    if f.len() != grid.npoints() || vol.len() != grid.npoints() {
        return Err(NijError::ShapeMismatch {
            expected: format!("{} points", grid.npoints()),
            got: format!("{} and {}", f.len(), vol.len()),
        });
    }
    let s: C64 = f.iter().zip(vol).map(|(a, b)| a * b).sum();
    Ok(s * grid.cell_volume())
}

/// Smooth compactly supported bump `exp(1 - 1/(1 - ρ²))`, `ρ = dist / radius`,
/// with the periodic distance to `center`.
pub fn bump(grid: Grid, center: &[f64], radius: f64) -> Result<Field> {
    if !(radius > 0.0 && radius < 0.5) {
        return Err(NijError::RadiusOutOfRange(radius));
    }
    if center.len() != grid.dim() {
        return Err(NijError::ShapeMismatch {
            expected: format!("center of length {}", grid.dim()),
            got: format!("length {}", center.len()),
        });
    }
    Ok(Field::from_fn(grid, |x| {
        let d2: f64 = grid.displacement(x, center).iter().map(|d| d * d).sum();
        let rho2 = d2 / (radius * radius);
        if rho2 >= 1.0 {
            0.0
        } else {
            (1.0 - 1.0 / (1.0 - rho2)).exp()
        }
    }))
}

/// Random real trigonometric polynomial with wavevectors `|k_a| <= kmax`.
pub fn random_trig_field<R: Rng>(
    grid: Grid,
    rng: &mut R,
    modes: usize,
    kmax: i64,
    amplitude: f64,
) -> Field {
    let d = grid.dim();
    let terms: Vec<(Vec<f64>, f64, f64)> = (0..modes)
        .map(|_| {
            let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-kmax..=kmax) as f64).collect();
            (k, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
        .collect();
    let scale = amplitude / (modes.max(1) as f64).sqrt();
    Field::from_fn(grid, |x| {
        let tau = 2.0 * std::f64::consts::PI;
        terms
            .iter()
            .map(|(k, a, b)| {
                let phase: f64 = tau * k.iter().zip(x).map(|(ki, xi)| ki * xi).sum::<f64>();
                a * phase.cos() + b * phase.sin()
            })
            .sum::<f64>()
            * scale
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub n: usize,
    pub res: usize,
    pub kind: FieldKind,
    pub complex: bool,
}

/// Writes a JSON header line followed by little-endian `f64` payload.
pub fn write_snapshot<W: Write>(mut w: W, f: &Field) -> Result<()> {
    let header = SnapshotHeader {
        n: f.grid().n(),
        res: f.grid().res(),
        kind: f.kind(),
        complex: false,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in f.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_complex_snapshot<W: Write>(mut w: W, f: &ComplexField) -> Result<()> {
    let header = SnapshotHeader {
        n: f.grid.n(),
        res: f.grid.res(),
        kind: f.kind,
        complex: true,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &f.values {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub enum Snapshot {
    Real(Field),
    Complex(ComplexField),
}

pub fn read_snapshot<R: BufRead>(mut r: R) -> Result<Snapshot> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: SnapshotHeader = serde_json::from_str(line.trim_end())?;
    let grid = Grid::new(header.n, header.res)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(NijError::Snapshot(format!(
            "payload of {} bytes is not a multiple of 8",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if header.complex {
        let expected = 2 * grid.npoints() * header.kind.complex_components(grid.n());
        if floats.len() != expected {
            return Err(NijError::Snapshot(format!(
                "expected {expected} floats, found {}",
                floats.len()
            )));
        }
        let values = floats
            .chunks_exact(2)
            .map(|c| C64::new(c[0], c[1]))
            .collect();
        Ok(Snapshot::Complex(ComplexField {
            grid,
            kind: header.kind,
            values,
        }))
    } else {
        Field::new(grid, header.kind, floats)
            .map(Snapshot::Real)
            .map_err(|e| NijError::Snapshot(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn t4() -> Grid {
        Grid::new(2, 16).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(2, 12).is_err());
        assert!(Grid::new(2, 4).is_err());
        assert!(Grid::new(4, 8).is_err());
        assert_eq!(Grid::new(3, 8).unwrap().npoints(), 8usize.pow(6));
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let f = Field::constant(t4(), 1.0);
        let df = spectral_derivative(&f, 2).unwrap();
        assert!(df.max_abs() < 1e-14);
    }

    #[test]
    fn derivative_of_sine_mode() {
        let g = t4();
        let f = Field::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let df = spectral_derivative(&f, 0).unwrap();
        let exact = Field::from_fn(g, |x| 2.0 * PI * (2.0 * PI * x[0]).cos());
        let err = df
            .values()
            .iter()
            .zip(exact.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-12, "err = {err}");
        assert!(spectral_derivative(&f, 1).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn pointwise_derivative_matches_full_transform() {
        let g = Grid::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_trig_field(g, &mut rng, 5, 2, 1.0);
        for axis in 0..g.dim() {
            let full = spectral_derivative(&f, axis).unwrap();
            for p in [0, 77, 1000, g.npoints() - 1] {
                let at = derivative_at(&f, p, axis).unwrap();
                assert!((at[0] - full.at(p)[0]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn derivative_rejects_nan() {
        let mut f = Field::constant(t4(), 0.0);
        f.values_mut()[17] = f64::NAN;
        assert!(matches!(
            spectral_derivative(&f, 0),
            Err(NijError::RejectedInput(_))
        ));
    }

    #[test]
    fn integration_by_parts_is_exact() {
        let g = t4();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for axis in 0..g.dim() {
            let f = random_trig_field(g, &mut rng, 6, 3, 1.0);
            let h = random_trig_field(g, &mut rng, 6, 3, 1.0);
            // oracle: two direct quadratures
            let lhs = spectral_derivative(&f, axis).unwrap().dot(&h);
            let rhs = f.dot(&spectral_derivative(&h, axis).unwrap());
            assert!(
                (lhs + rhs).abs() <= 1e-12 * f.l2_norm() * h.l2_norm(),
                "axis {axis}: {lhs} {rhs}"
            );
        }
    }

    #[test]
    fn pair_packing_matches_single() {
        let g = Grid::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_trig_field(g, &mut rng, 4, 2, 1.0).into_values();
        let b = random_trig_field(g, &mut rng, 4, 2, 1.0).into_values();
        let both = deriv_many(g, &[a.clone(), b.clone()], 1);
        assert_eq!(both[0].len(), a.len());
        let single_b = deriv_scalar(g, &b, 1);
        for (x, y) in both[1].iter().zip(&single_b) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn quadrature_basics() {
        let g = t4();
        let one = Field::constant(g, 1.0);
        assert!((integrate(&one, &one).unwrap() - 1.0).abs() < 1e-15);
        let s = Field::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        assert!(integrate(&s, &one).unwrap().abs() <= 1e-14);
        let c2 = Field::from_fn(g, |x| (2.0 * PI * x[1]).cos().powi(2));
        assert!((integrate(&c2, &one).unwrap() - 0.5).abs() <= 1e-13 * 0.5);
        let other = Field::constant(Grid::new(2, 8).unwrap(), 1.0);
        assert!(integrate(&one, &other).is_err());
    }

    #[test]
    fn bump_normalization_and_support() {
        let g = t4();
        let c = [0.25, 0.25, 0.5, 0.0];
        let b = bump(g, &c, 0.1).unwrap();
        assert!((b.at(g.nearest_index(&c))[0] - 1.0).abs() < 1e-15);
        let anti = [0.75, 0.75, 0.0, 0.5];
        assert!(b.at(g.nearest_index(&anti))[0] < 1e-15);
        assert!(b.values().iter().all(|v| *v >= 0.0));
        assert!(bump(g, &c, 0.5).is_err());
        assert!(bump(g, &c, 0.0).is_err());
    }

    #[test]
    fn bump_integral_scales_with_volume() {
        // quadrature oracle on a finer lattice so the narrow bump is resolved
        let g = Grid::new(2, 32).unwrap();
        let c = [0.5, 0.5, 0.5, 0.5];
        let one = Field::constant(g, 1.0);
        let big = integrate(&bump(g, &c, 0.3).unwrap(), &one).unwrap();
        let small = integrate(&bump(g, &c, 0.15).unwrap(), &one).unwrap();
        let ratio = big / small;
        assert!((ratio / 16.0 - 1.0).abs() < 0.05, "ratio = {ratio}");
    }

    #[test]
    fn snapshot_roundtrip() {
        let g = Grid::new(2, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_trig_field(g, &mut rng, 3, 2, 1.0);
        let mut buf = Vec::new();
        write_snapshot(&mut buf, &f).unwrap();
        let first_line = buf.split(|b| *b == b'\n').next().unwrap();
        assert_eq!(
            std::str::from_utf8(first_line).unwrap(),
            r#"{"n":2,"res":8,"kind":"scalar","complex":false}"#
        );
        match read_snapshot(std::io::Cursor::new(buf)).unwrap() {
            Snapshot::Real(back) => assert_eq!(back, f),
            Snapshot::Complex(_) => panic!("expected real snapshot"),
        }
    }
}
