//! Nijenhuis tensor, its `(0,2)` frame components, pointwise norms and the
//! energies `𝒩` and `Ñ`.
//!
//! The real tensor is `N(X,Y) = [JX,JY] - J[JX,Y] - J[X,JY] - [X,Y]`, stored
//! as `N^c_{ab}` at offset `c·d² + a·d + b`. Frame components follow
//! `N^k_{īj̄} = -θ^k(N(ē_i, ē_j))`, so that in a unitary frame
//! `‖N‖² = Σ_{ijk} |N^k_{īj̄}|²` with every ordered pair `(i, j)` counted.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::acstruct::{point_frame, ACField, HermitianData, PointFrame};
use crate::error::{NijError, Result};
use crate::grid::{deriv_many, ComplexField, Field, FieldKind, Grid};
use crate::scalar::C64;

/// Spatial derivatives `∂_e` of every component of an endomorphism field.
pub fn end_derivatives(f: &Field) -> Vec<Field> {
    let grid = f.grid();
    let comps: Vec<Vec<f64>> = (0..f.ncomp()).map(|c| f.component(c)).collect();
    (0..grid.dim())
        .map(|axis| {
            let ds = deriv_many(grid, &comps, axis);
            let mut out = Field::zeros(grid, f.kind());
            for (c, d) in ds.iter().enumerate() {
                out.set_component(c, d);
            }
            out
        })
        .collect()
}

/// `N^c_{ab}` at one point from `J` and its derivatives `dj[e] = ∂_e J`
/// (row-major `d × d` slices).
pub fn nijenhuis_point(j: &[f64], dj: &[&[f64]], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d * d];
    for c in 0..d {
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for e in 0..d {
                    s += j[e * d + a] * dj[e][c * d + b] - j[e * d + b] * dj[e][c * d + a]
                        + j[c * d + e] * (dj[b][e * d + a] - dj[a][e * d + b]);
                }
                out[c * d * d + a * d + b] = s;
            }
        }
    }
    out
}

/// Real Nijenhuis tensor field.
pub fn nijenhuis_real(j: &ACField) -> Field {
    let grid = j.grid();
    let dj = end_derivatives(j.field());
    form_from_point_map(grid, |p| {
        let djp: Vec<&[f64]> = dj.iter().map(|f| f.at(p)).collect();
        nijenhuis_point(j.field().at(p), &djp, grid.dim())
    })
}

pub(crate) fn form_from_point_map(grid: Grid, f: impl Fn(usize) -> Vec<f64> + Sync) -> Field {
    let d = grid.dim();
    let nc = d * d * d;
    let mut values = vec![0.0; grid.npoints() * nc];
    values
        .par_chunks_mut(nc)
        .enumerate()
        .for_each(|(p, chunk)| chunk.copy_from_slice(&f(p)));
    Field::new(grid, FieldKind::Form, values).expect("shape by construction")
}

/// `N^k_{īj̄} = -θ^k(N(ē_i, ē_j))` stored at `k·n² + i·n + j`; only `i < j`
/// is evaluated, the rest is filled by antisymmetry.
pub fn form_components(form: &[f64], pf: &PointFrame) -> Vec<C64> {
    let n = pf.n();
    let d = 2 * n;
    let mut out = vec![C64::new(0.0, 0.0); n * n * n];
    for i in 0..n {
        for jj in i + 1..n {
            // V^c = N^c(ē_i, ē_j)
            let mut v = vec![C64::new(0.0, 0.0); d];
            for (c, vc) in v.iter_mut().enumerate() {
                for a in 0..d {
                    let ea = pf.f[(a, n + i)];
                    if ea.norm_sqr() == 0.0 {
                        continue;
                    }
                    for b in 0..d {
                        *vc += form[c * d * d + a * d + b] * ea * pf.f[(b, n + jj)];
                    }
                }
            }
            for k in 0..n {
                let s: C64 = (0..d).map(|c| pf.finv[(k, c)] * v[c]).sum();
                out[k * n * n + i * n + jj] = -s;
                out[k * n * n + jj * n + i] = s;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct NijenhuisData {
    pub real: Field,
    pub comp: ComplexField,
    pub frame_id: u64,
}

/// Nijenhuis tensor with components in the frames of `hd`.
pub fn nijenhuis_in(j: &ACField, hd: &HermitianData) -> Result<NijenhuisData> {
    let grid = j.grid();
    if hd.frames.len() != grid.npoints() {
        return Err(NijError::FrameMismatch);
    }
    let real = nijenhuis_real(j);
    Ok(components_in(real, hd))
}

pub(crate) fn components_in(real: Field, hd: &HermitianData) -> NijenhuisData {
    let grid = real.grid();
    let values: Vec<C64> = (0..grid.npoints())
        .into_par_iter()
        .flat_map_iter(|p| form_components(real.at(p), &hd.frames[p]))
        .collect();
    NijenhuisData {
        real,
        comp: ComplexField {
            grid,
            kind: FieldKind::Form,
            values,
        },
        frame_id: hd.id,
    }
}

pub fn nijenhuis(j: &ACField) -> Result<(NijenhuisData, HermitianData)> {
    let hd = crate::acstruct::hermitian_data(j, None)?;
    let nd = nijenhuis_in(j, &hd)?;
    Ok((nd, hd))
}

/// `h^{im̄} h^{jp̄} h_{kq̄} N^k_{īj̄} conj(N^q_{m̄p̄})` for one point.
pub fn squared_norm_point(comp: &[C64], h_lower: &DMatrix<C64>, h_upper: &DMatrix<C64>) -> f64 {
    let n = h_lower.nrows();
    let mut s = C64::new(0.0, 0.0);
    for i in 0..n {
        for m in 0..n {
            for jj in 0..n {
                for p in 0..n {
                    let hh = h_upper[(i, m)] * h_upper[(jj, p)];
                    if hh.norm_sqr() == 0.0 {
                        continue;
                    }
                    for k in 0..n {
                        for q in 0..n {
                            s += hh
                                * h_lower[(k, q)]
                                * comp[k * n * n + i * n + jj]
                                * comp[q * n * n + m * n + p].conj();
                        }
                    }
                }
            }
        }
    }
    s.re
}

pub fn squared_norm(nd: &NijenhuisData, hd: &HermitianData) -> Result<Field> {
    if nd.frame_id != hd.id {
        return Err(NijError::FrameMismatch);
    }
    let grid = nd.comp.grid;
    let values = (0..grid.npoints())
        .into_par_iter()
        .map(|p| squared_norm_point(nd.comp.at(p), &hd.h_lower[p], &hd.h_upper[p]))
        .collect();
    Field::new(grid, FieldKind::Scalar, values)
}

/// `M^c_{ef} = G^{ae} G^{bf} N^c_{ab}` (indices raised with `G = g_J⁻¹`).
pub fn raise_pair(form: &[f64], ginv: &DMatrix<f64>) -> Vec<f64> {
    let d = ginv.nrows();
    let mut out = vec![0.0; d * d * d];
    for c in 0..d {
        let nc = DMatrix::from_row_slice(d, d, &form[c * d * d..(c + 1) * d * d]);
        let m = ginv * nc * ginv;
        for e in 0..d {
            for f in 0..d {
                out[c * d * d + e * d + f] = m[(e, f)];
            }
        }
    }
    out
}

/// Frame-free norm `½ g_{cd} G^{ae} G^{bf} N^c_{ab} N^d_{ef}`.
pub fn squared_norm_real(form: &[f64], g: &DMatrix<f64>, ginv: &DMatrix<f64>) -> f64 {
    let d = g.nrows();
    let raised = raise_pair(form, ginv);
    let mut s = 0.0;
    for c in 0..d {
        for dd in 0..d {
            let gcd = g[(c, dd)];
            if gcd == 0.0 {
                continue;
            }
            let mut t = 0.0;
            for ab in 0..d * d {
                t += form[c * d * d + ab] * raised[dd * d * d + ab];
            }
            s += gcd * t;
        }
    }
    0.5 * s
}

/// Pointwise `(‖N‖², vol_{g_J})` over the grid.
pub fn norm_and_volume(j: &ACField) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = j.grid();
    let real = nijenhuis_real(j);
    let pairs: Vec<(f64, f64)> = (0..grid.npoints())
        .into_par_iter()
        .map(|p| {
            let jm = j.matrix(p);
            let g = crate::acstruct::averaged_metric(&jm);
            let ginv = g
                .clone()
                .try_inverse()
                .ok_or_else(|| NijError::DegenerateStructure {
                    point: p,
                    reason: "singular averaged metric".into(),
                })?;
            let vol = crate::acstruct::pfaffian(&(jm.transpose() * &g));
            Ok((squared_norm_real(real.at(p), &g, &ginv), vol))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Sequential quadrature so that energies are bit-reproducible.
fn quadrature(grid: Grid, f: &[f64], w: Option<&[f64]>) -> f64 {
    let s: f64 = match w {
        None => f.iter().sum(),
        Some(w) => f.iter().zip(w).map(|(a, b)| a * b).sum(),
    };
    s * grid.cell_volume()
}

/// `𝒩(J) = ∫ ‖N_J‖²_{g_J} vol_g`.
pub fn energy_n(j: &ACField) -> Result<f64> {
    let (nrm, _) = norm_and_volume(j)?;
    Ok(quadrature(j.grid(), &nrm, None))
}

/// `Ñ(J) = ∫ ‖N_J‖²_{g_J} vol_{g_J}`.
pub fn energy_ntilde(j: &ACField) -> Result<f64> {
    let (nrm, vol) = norm_and_volume(j)?;
    Ok(quadrature(j.grid(), &nrm, Some(&vol)))
}

/// Both energies from one tensor evaluation.
pub fn energies(j: &ACField) -> Result<(f64, f64)> {
    let (nrm, vol) = norm_and_volume(j)?;
    Ok((
        quadrature(j.grid(), &nrm, None),
        quadrature(j.grid(), &nrm, Some(&vol)),
    ))
}

/// Components of one point in a specified frame.
pub fn point_components(form: &[f64], jm: &DMatrix<f64>) -> Result<Vec<C64>> {
    Ok(form_components(form, &point_frame(jm, 0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acstruct::{shear_family, shear_sine, standard_structure};
    use std::f64::consts::PI;

    #[test]
    fn standard_structure_is_integrable() {
        let g = Grid::new(2, 8).unwrap();
        let (nd, _) = nijenhuis(&standard_structure(g)).unwrap();
        assert!(nd.comp.values.iter().all(|z| z.norm() <= 1e-13));
        let (e, et) = energies(&standard_structure(g)).unwrap();
        assert!(e <= 1e-24 && et <= 1e-24);
    }

    #[test]
    fn constant_shear_is_integrable() {
        let g = Grid::new(2, 8).unwrap();
        let j = shear_family(g, &Field::constant(g, 0.7)).unwrap();
        assert!(nijenhuis_real(&j).max_abs() <= 1e-13);
    }

    #[test]
    fn tensor_is_antisymmetric() {
        let g = Grid::new(2, 8).unwrap();
        let nr = nijenhuis_real(&shear_sine(g, 0.3));
        let d = 4;
        for p in [0, 10, 200] {
            let v = nr.at(p);
            for c in 0..d {
                for a in 0..d {
                    for b in 0..d {
                        assert!((v[c * 16 + a * 4 + b] + v[c * 16 + b * 4 + a]).abs() <= 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn single_entry_norm_counts_both_orderings() {
        let n = 2;
        let c = C64::new(0.3, -0.4);
        let mut comp = vec![C64::new(0.0, 0.0); n * n * n];
        comp[1] = c; // N^1_{1̄2̄}
        comp[2] = -c; // N^1_{2̄1̄}
        let id = DMatrix::<C64>::identity(n, n);
        let brute: f64 = comp.iter().map(|z| z.norm_sqr()).sum();
        let v = squared_norm_point(&comp, &id, &id);
        assert!((v - 2.0 * c.norm_sqr()).abs() <= 1e-15);
        assert!((v - brute).abs() <= 1e-15);
        let scaled: Vec<C64> = comp.iter().map(|z| z * C64::new(0.0, 3.0)).collect();
        assert!((squared_norm_point(&scaled, &id, &id) - 9.0 * v).abs() <= 1e-13);
    }

    #[test]
    fn frame_and_real_norms_agree() {
        let g = Grid::new(2, 8).unwrap();
        let j = shear_sine(g, 0.3);
        let (nd, hd) = nijenhuis(&j).unwrap();
        let nf = squared_norm(&nd, &hd).unwrap();
        for p in 0..g.npoints() {
            let pf = &hd.frames[p];
            let real = squared_norm_real(nd.real.at(p), &pf.g, &pf.ginv);
            assert!(
                (nf.at(p)[0] - real).abs() <= 1e-11 * real.max(1.0),
                "point {p}"
            );
            assert!(nf.at(p)[0] >= -1e-13);
        }
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let g = Grid::new(2, 8).unwrap();
        let j = shear_sine(g, 0.3);
        let (nd, _) = nijenhuis(&j).unwrap();
        let (_, other) = nijenhuis(&j).unwrap();
        assert!(matches!(
            squared_norm(&nd, &other),
            Err(NijError::FrameMismatch)
        ));
    }

    #[test]
    fn shear_tensor_matches_bracket_oracle() {
        // oracle: brackets of explicit vector fields with hand-differentiated J
        let g = Grid::new(2, 16).unwrap();
        let amp = 0.3;
        let j = shear_sine(g, amp);
        let nr = nijenhuis_real(&j);
        let jmat = |x: f64| {
            let f = amp * (2.0 * PI * x).sin();
            let mut m = [[0.0; 4]; 4];
            m[0][1] = -1.0;
            m[1][0] = 1.0;
            m[2][2] = f;
            m[2][3] = -(1.0 + f * f);
            m[3][2] = 1.0;
            m[3][3] = -f;
            m
        };
        let djmat = |x: f64| {
            let f = amp * (2.0 * PI * x).sin();
            let fp = amp * 2.0 * PI * (2.0 * PI * x).cos();
            let mut m = [[0.0; 4]; 4];
            m[2][2] = fp;
            m[2][3] = -2.0 * f * fp;
            m[3][3] = -fp;
            m
        };
        for p in [3usize, 777, 1234, 40000, 65535] {
            let x0 = g.coords(p)[0];
            let jm = jmat(x0);
            let dj = djmat(x0);
            // vector field V = Σ v^c ∂_c with derivative dv[e][c]; [V, W]^c = V^e ∂_e W^c - W^e ∂_e V^c
            let apply = |vec: &[f64; 4]| -> [f64; 4] {
                let mut o = [0.0; 4];
                for c in 0..4 {
                    for a in 0..4 {
                        o[c] += jm[c][a] * vec[a];
                    }
                }
                o
            };
            for a in 0..4 {
                for b in 0..4 {
                    let mut ea = [0.0; 4];
                    ea[a] = 1.0;
                    let mut eb = [0.0; 4];
                    eb[b] = 1.0;
                    let ja = apply(&ea);
                    let jb = apply(&eb);
                    // only x0-derivatives are nonzero: ∂_0 (J∂_b)^c = dj[c][b]
                    let bracket_jj: Vec<f64> = (0..4)
                        .map(|c| ja[0] * dj[c][b] - jb[0] * dj[c][a])
                        .collect();
                    // [J∂_a, ∂_b] = -∂_b(J∂_a) = -δ_{b0} dj[.][a]
                    let jxy: Vec<f64> = (0..4)
                        .map(|c| if b == 0 { -dj[c][a] } else { 0.0 })
                        .collect();
                    let xjy: Vec<f64> = (0..4)
                        .map(|c| if a == 0 { dj[c][b] } else { 0.0 })
                        .collect();
                    for c in 0..4 {
                        let mut v = bracket_jj[c];
                        for e in 0..4 {
                            v -= jm[c][e] * (jxy[e] + xjy[e]);
                        }
                        let got = nr.at(p)[c * 16 + a * 4 + b];
                        assert!(
                            (got - v).abs() <= 1e-10,
                            "p {p} c {c} a {a} b {b}: {got} vs {v}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn energy_is_quadratic_in_amplitude() {
        let g = Grid::new(2, 16).unwrap();
        let e1 = energy_n(&shear_sine(g, 0.05)).unwrap();
        let e2 = energy_n(&shear_sine(g, 0.025)).unwrap();
        assert!((e1 / e2 / 4.0 - 1.0).abs() <= 0.02, "ratio {}", e1 / e2);
    }

    #[test]
    fn energy_matches_refined_grid() {
        let e16 = energy_n(&shear_sine(Grid::new(2, 16).unwrap(), 0.3)).unwrap();
        let e32 = energy_n(&shear_sine(Grid::new(2, 32).unwrap(), 0.3)).unwrap();
        assert!(((e16 - e32) / e32).abs() <= 1e-8, "{e16} vs {e32}");
    }
}
