//! SGD and Adam with checkpointable state.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, UdgError};
use crate::grad::Tensor;
use crate::model::{ParamRecord, PVar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = UdgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(UdgError::Config(format!(
                "optimizer must be `sgd` or `adam`, got `{other}`"
            ))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order updater. Adam keeps one (m, v) slot pair per parameter,
/// allocated on first use; SGD is stateless.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `grads[i]` must have the same element count as
    /// `params[i]`; the pairing is positional, so callers must keep a stable
    /// parameter order across steps.
    pub fn step(&mut self, params: Vec<&mut PVar>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(UdgError::InvalidValue(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.numel() {
                return Err(UdgError::InvalidValue(format!(
                    "gradient for `{}` has {} entries, want {}",
                    p.name,
                    g.numel(),
                    p.numel()
                )));
            }
        }
        if self.kind == OptimizerKind::Adam && self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(UdgError::InvalidValue(format!(
                "optimizer state holds {} slots, step got {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, gv) in p.data.iter_mut().zip(g.data().iter()) {
                        *x -= self.lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for ((x, gv), (mi, vi)) in p
                        .data
                        .iter_mut()
                        .zip(g.data().iter())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gv;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *x -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }

    /// Serialize state as named records (`adam.m.<param>`, `adam.v.<param>`)
    /// plus the step counter. SGD has no state and yields an empty list.
    pub fn to_records(&self, params: &[&PVar]) -> Result<(Vec<ParamRecord>, u64)> {
        if self.kind == OptimizerKind::Sgd || self.m.is_empty() {
            return Ok((Vec::new(), self.step_count));
        }
        if self.m.len() != params.len() {
            return Err(UdgError::Checkpoint(format!(
                "optimizer holds {} slots for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        let mut records = Vec::with_capacity(params.len() * 2);
        for (i, p) in params.iter().enumerate() {
            records.push(ParamRecord::from_values(
                format!("adam.m.{}", p.name),
                p.shape.clone(),
                &self.m[i],
            ));
            records.push(ParamRecord::from_values(
                format!("adam.v.{}", p.name),
                p.shape.clone(),
                &self.v[i],
            ));
        }
        Ok((records, self.step_count))
    }

    /// Restore from checkpoint records. An empty record list resets to fresh
    /// state (correct for SGD and for an Adam run that never stepped).
    pub fn restore(&mut self, records: &[ParamRecord], step: u64, params: &[&PVar]) -> Result<()> {
        self.step_count = step;
        self.m.clear();
        self.v.clear();
        if records.is_empty() {
            return Ok(());
        }
        if self.kind != OptimizerKind::Adam {
            return Err(UdgError::Checkpoint(
                "checkpoint carries adam state but the run uses sgd".into(),
            ));
        }
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params {
            let find = |prefix: &str| -> Result<Vec<f64>> {
                let name = format!("{prefix}.{}", p.name);
                let rec = records
                    .iter()
                    .find(|r| r.name == name)
                    .ok_or_else(|| UdgError::Checkpoint(format!("missing record `{name}`")))?;
                let (_, shape, data) = rec.decode()?;
                if shape != p.shape {
                    return Err(UdgError::Checkpoint(format!(
                        "record `{name}` has shape {shape:?}, parameter has {:?}",
                        p.shape
                    )));
                }
                Ok(data)
            };
            m.push(find("adam.m")?);
            v.push(find("adam.v")?);
        }
        if records.len() != params.len() * 2 {
            return Err(UdgError::Checkpoint(format!(
                "{} optimizer records for {} parameters",
                records.len(),
                params.len()
            )));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Tape, TapeMode};

    fn pvar(name: &str, data: Vec<f64>) -> PVar {
        PVar::new(name, vec![data.len()], data)
    }

    fn grad(tape: &mut Tape, data: Vec<f64>) -> Tensor {
        tape.constant(&[data.len()], data).unwrap()
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let mut p = pvar("w", vec![1.0, 2.0]);
        let g = grad(&mut tape, vec![0.5, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        opt.step(vec![&mut p], &[g]).unwrap();
        assert_eq!(p.data, vec![1.0 - 0.1 * 0.5, 2.0 + 0.1]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let mut p = pvar("w", vec![0.0, 0.0]);
        let g = grad(&mut tape, vec![10.0, -0.003]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01);
        opt.step(vec![&mut p], &[g]).unwrap();
        // bias-corrected first step is lr * g/(|g|+eps) ~ lr * sign(g)
        assert!((p.data[0] + 0.01).abs() < 1e-5, "{}", p.data[0]);
        assert!((p.data[1] - 0.01).abs() < 1e-5, "{}", p.data[1]);
    }

    #[test]
    fn adam_state_roundtrips_through_records() {
        let mut a = Optimizer::new(OptimizerKind::Adam, 0.05);
        let mut b = Optimizer::new(OptimizerKind::Adam, 0.05);
        let mut pa = pvar("w", vec![1.0, -2.0, 3.0]);
        let mut pb = pa.clone();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        for i in 0..3 {
            let g = grad(&mut tape, vec![0.1 * i as f64, -0.2, 0.4]);
            a.step(vec![&mut pa], &[g.clone()]).unwrap();
            b.step(vec![&mut pb], &[g]).unwrap();
        }
        let (records, step) = a.to_records(&[&pa]).unwrap();
        assert_eq!(records.len(), 2);
        let mut restored = Optimizer::new(OptimizerKind::Adam, 0.05);
        restored.restore(&records, step, &[&pa]).unwrap();
        // next steps agree bit for bit
        let g = grad(&mut tape, vec![0.3, 0.2, 0.1]);
        restored.step(vec![&mut pa], &[g.clone()]).unwrap();
        b.step(vec![&mut pb], &[g]).unwrap();
        assert_eq!(pa.data, pb.data);
    }

    #[test]
    fn mismatches_are_rejected() {
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let mut p = pvar("w", vec![1.0, 2.0]);
        let g = grad(&mut tape, vec![0.5]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        assert!(opt.step(vec![&mut p], &[g]).is_err());
        assert!(opt.step(vec![&mut p], &[]).is_err());

        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let rec = ParamRecord::from_values("adam.m.w", vec![2], &[0.0, 0.0]);
        assert!(sgd.restore(&[rec], 1, &[&p]).is_err());
    }
}
