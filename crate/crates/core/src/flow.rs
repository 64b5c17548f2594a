//! Gradient descent of `𝒩` or `Ñ` on the space of almost complex structures,
//! with a retraction back onto `J² = −I` and backtracking on the step size.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acstruct::{retract, ACField, TangentField};
use crate::error::{NijError, Result};
use crate::grid::write_snapshot;
use crate::variation::{Functional, Variation};

/// Halvings allowed before a step is declared stalled.
pub const MAX_HALVINGS: usize = 40;
/// Clean acceptances in a row before the step size is doubled.
pub const GROW_AFTER: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub functional: Functional,
    pub step0: f64,
    pub factor: f64,
    pub max_steps: usize,
    pub stop_grad_norm: f64,
    /// Write a snapshot every this many accepted steps (0 disables).
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            functional: Functional::Ntilde,
            step0: 0.05,
            factor: 0.5,
            max_steps: 200,
            stop_grad_norm: 1e-8,
            snapshot_every: 0,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return Err(NijError::InvalidConfig(format!("step0 must be positive, got {}", self.step0)));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(NijError::InvalidConfig(format!("backtrack factor must lie in (0, 1), got {}", self.factor)));
        }
        if !(self.stop_grad_norm >= 0.0) {
            return Err(NijError::InvalidConfig(format!("stop_grad_norm must be nonnegative, got {}", self.stop_grad_norm)));
        }
        Ok(())
    }
}

/// State of the structure after `step` accepted steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub step: usize,
    pub energy: f64,
    pub grad_norm: f64,
    pub step_size: f64,
    pub constraint_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxSteps,
    GradientBelowThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    /// State before the first step (`step_size` 0).
    pub initial: FlowRecord,
    /// One record per accepted step.
    pub steps: Vec<FlowRecord>,
    pub stop: StopReason,
    pub snapshots: Vec<PathBuf>,
}

impl FlowTrace {
    pub fn records(&self) -> impl Iterator<Item = &FlowRecord> {
        std::iter::once(&self.initial).chain(&self.steps)
    }

    pub fn is_monotone(&self) -> bool {
        self.records().zip(self.records().skip(1)).all(|(a, b)| b.energy <= a.energy)
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.records().map(|r| r.constraint_residual).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,energy,grad_norm,step_size,constraint_residual")?;
        for r in self.records() {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", r.step, r.energy, r.grad_norm, r.step_size, r.constraint_residual)?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii")
    }
}

/// Outcome of one descent step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub structure: ACField,
    pub record: FlowRecord,
    /// Gradient norm at the starting structure.
    pub start_grad_norm: f64,
    pub halvings: usize,
}

/// `Σ_x |N|²(x) ρ(x)` times the cell volume, from precomputed pointwise data.
pub fn variation_energy(var: &Variation, functional: Functional) -> f64 {
    let cv = var.grid().cell_volume();
    let s: f64 = match functional {
        Functional::N => var.norm_squared().iter().sum(),
        Functional::Ntilde => var.norm_squared().iter().zip(var.frames()).map(|(n, pf)| n * pf.vol).sum(),
    };
    s * cv
}

struct Accepted {
    var: Variation,
    energy: f64,
    step_size: f64,
    halvings: usize,
}

fn descend(var: &Variation, grad: &TangentField, e0: f64, grad_norm: f64, cfg: &FlowConfig, step: f64) -> Result<Accepted> {
    let mut s = step;
    for halvings in 0..=MAX_HALVINGS {
        match retract(var.structure(), &grad.scaled(-s)).and_then(|next| Variation::new(&next)) {
            Ok(next) => {
                let e1 = variation_energy(&next, cfg.functional);
                if e1 <= e0 {
                    return Ok(Accepted { var: next, energy: e1, step_size: s, halvings });
                }
            }
            Err(NijError::StepTooLarge { .. } | NijError::DegenerateStructure { .. } | NijError::NotAlmostComplex { .. }) => {}
            Err(e) => return Err(e),
        }
        s *= cfg.factor;
    }
    Err(NijError::Stall { halvings: MAX_HALVINGS, energy: e0, grad_norm })
}

/// `J′ = retract(J, −s·G)` with `s` halved from `step` until the energy does
/// not increase. A vanishing gradient returns `J` unchanged.
pub fn flow_step(j: &ACField, cfg: &FlowConfig, step: f64, index: usize) -> Result<StepOutcome> {
    cfg.validate()?;
    let var = Variation::new(j)?;
    let grad = var.gradient(cfg.functional);
    let grad_norm = grad.l2_norm();
    let e0 = variation_energy(&var, cfg.functional);
    if grad_norm == 0.0 {
        let record = FlowRecord { step: index, energy: e0, grad_norm, step_size: 0.0, constraint_residual: j.constraint_residual() };
        return Ok(StepOutcome { structure: j.clone(), record, start_grad_norm: grad_norm, halvings: 0 });
    }
    let acc = descend(&var, &grad, e0, grad_norm, cfg, step)?;
    let next = acc.var.structure().clone();
    let record = FlowRecord {
        step: index,
        energy: acc.energy,
        grad_norm: acc.var.gradient(cfg.functional).l2_norm(),
        step_size: acc.step_size,
        constraint_residual: next.constraint_residual(),
    };
    Ok(StepOutcome { structure: next, record, start_grad_norm: grad_norm, halvings: acc.halvings })
}

fn snapshot(dir: &Path, step: usize, j: &ACField) -> Result<PathBuf> {
    let path = dir.join(format!("snap_{step:06}.bin"));
    let mut w = BufWriter::new(File::create(&path)?);
    write_snapshot(&mut w, j.field())?;
    w.flush()?;
    Ok(path)
}

/// Iterates descent steps until `max_steps` or the gradient norm drops below
/// `stop_grad_norm`. A step starts from the last accepted size, doubled
/// (up to `step0`) after [`GROW_AFTER`] consecutive steps accepted without
/// backtracking.
pub fn run_flow(j0: &ACField, cfg: &FlowConfig, snapshot_dir: Option<&Path>) -> Result<(ACField, FlowTrace)> {
    cfg.validate()?;
    let snap = |k: usize, j: &ACField| -> Result<Option<PathBuf>> {
        match snapshot_dir {
            Some(dir) if cfg.snapshot_every > 0 && k.is_multiple_of(cfg.snapshot_every) => {
                std::fs::create_dir_all(dir)?;
                Ok(Some(snapshot(dir, k, j)?))
            }
            _ => Ok(None),
        }
    };
    let mut snapshots: Vec<PathBuf> = snap(0, j0)?.into_iter().collect();
    let mut var = Variation::new(j0)?;
    let mut energy = variation_energy(&var, cfg.functional);
    let mut grad = var.gradient(cfg.functional);
    let mut grad_norm = grad.l2_norm();
    let initial = FlowRecord { step: 0, energy, grad_norm, step_size: 0.0, constraint_residual: j0.constraint_residual() };
    let mut steps = Vec::new();
    let mut s = cfg.step0;
    let mut stop = StopReason::MaxSteps;
    let mut clean = 0;
    for k in 1..=cfg.max_steps {
        if grad_norm <= cfg.stop_grad_norm {
            stop = StopReason::GradientBelowThreshold;
            break;
        }
        let acc = descend(&var, &grad, energy, grad_norm, cfg, s)?;
        clean = if acc.halvings == 0 { clean + 1 } else { 0 };
        s = acc.step_size;
        if clean >= GROW_AFTER {
            s = (2.0 * s).min(cfg.step0);
            clean = 0;
        }
        var = acc.var;
        energy = acc.energy;
        grad = var.gradient(cfg.functional);
        grad_norm = grad.l2_norm();
        steps.push(FlowRecord {
            step: k,
            energy,
            grad_norm,
            step_size: acc.step_size,
            constraint_residual: var.structure().constraint_residual(),
        });
        snapshots.extend(snap(k, var.structure())?);
    }
    Ok((var.structure().clone(), FlowTrace { initial, steps, stop, snapshots }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acstruct::{shear_sine, standard_structure};
    use crate::grid::Grid;

    #[test]
    fn config_validation() {
        assert!(FlowConfig::default().validate().is_ok());
        for (step0, factor) in [(0.0, 0.5), (-1.0, 0.5), (0.1, 1.0), (0.1, 0.0)] {
            let cfg = FlowConfig { step0, factor, ..Default::default() };
            assert!(matches!(cfg.validate(), Err(NijError::InvalidConfig(_))));
        }
        let parsed: FlowConfig = serde_json::from_str(r#"{"functional":"N","max_steps":3}"#).unwrap();
        assert_eq!(parsed.functional, Functional::N);
        assert_eq!(parsed.step0, FlowConfig::default().step0);
        assert!(serde_json::from_str::<FlowConfig>(r#"{"stepzero":1}"#).is_err());
    }

    #[test]
    fn standard_structure_is_fixed_point() {
        let g = Grid::new(2, 8).unwrap();
        let j = standard_structure(g);
        let (out, trace) = run_flow(&j, &FlowConfig::default(), None).unwrap();
        assert!(trace.steps.is_empty());
        assert_eq!(trace.stop, StopReason::GradientBelowThreshold);
        assert_eq!(out.field(), j.field());
    }

    #[test]
    fn shear_descends() {
        let g = Grid::new(2, 8).unwrap();
        let j = shear_sine(g, 0.3);
        let cfg = FlowConfig { max_steps: 4, ..Default::default() };
        let (_, trace) = run_flow(&j, &cfg, None).unwrap();
        assert_eq!(trace.steps.len(), 4);
        assert!(trace.steps[0].energy < trace.initial.energy);
        assert!(trace.is_monotone());
        assert!(trace.max_constraint_residual() <= 1e-11);
        let csv = trace.to_csv();
        assert!(csv.starts_with("step,energy,grad_norm,step_size,constraint_residual\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn snapshots_are_written() {
        let g = Grid::new(2, 8).unwrap();
        let j = shear_sine(g, 0.3);
        let dir = tempfile::tempdir().unwrap();
        let cfg = FlowConfig { max_steps: 2, snapshot_every: 1, ..Default::default() };
        let (_, trace) = run_flow(&j, &cfg, Some(dir.path())).unwrap();
        assert_eq!(trace.snapshots.len(), 3);
        let r = std::io::BufReader::new(File::open(&trace.snapshots[2]).unwrap());
        assert!(matches!(crate::grid::read_snapshot(r).unwrap(), crate::grid::Snapshot::Real(_)));
    }
}
