//! AdamW with decoupled weight decay and a log-linear cyclic schedule.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::params::ParamRegistry;

pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-2;

/// Fraction of the run spent ramping up to the peak learning rate.
pub const WARMUP_FRACTION: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CyclicSchedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl Default for CyclicSchedule {
    fn default() -> Self {
        Self {
            lr_start: 1e-4,
            lr_peak: 1e-3,
            lr_end: 1e-8,
            total_steps: 1,
        }
    }
}

impl CyclicSchedule {
    pub fn lr(&self, step: usize) -> Result<f64> {
        cyclic_lr(step, self.total_steps, self.lr_start, self.lr_peak, self.lr_end)
    }
}

/// Piecewise log-linear schedule: `lr0 -> lr_peak` over the first 40% of
/// `total_steps`, then `lr_peak -> lr_end` over the remainder.
pub fn cyclic_lr(step: usize, total_steps: usize, lr0: f64, lr_peak: f64, lr_end: f64) -> Result<f64> {
    if step > total_steps {
        return Err(AutodiffError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if !(lr0 > 0.0 && lr_peak > 0.0 && lr_end > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "cyclic_lr",
            reason: format!("rates must be positive: {lr0}, {lr_peak}, {lr_end}"),
        });
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let t = step as f64;
    let up = WARMUP_FRACTION * total_steps as f64;
    let down = total_steps as f64 - up;
    let lerp_log = |a: f64, b: f64, frac: f64| (a.ln() + (b.ln() - a.ln()) * frac).exp();
    let lr = if step == 0 {
        lr0
    } else if t <= up {
        if t == up {
            lr_peak
        } else {
            lerp_log(lr0, lr_peak, t / up)
        }
    } else if step == total_steps {
        lr_end
    } else {
        lerp_log(lr_peak, lr_end, (t - up) / down)
    };
    Ok(lr)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(DEFAULT_WEIGHT_DECAY)
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `registry` using its accumulated
    /// grad, which is cleared afterwards.
    pub fn step(&mut self, registry: &mut ParamRegistry, lr: f64) -> Result<()> {
        if let Some((name, _)) = registry.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(AutodiffError::MissingGrad(name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in registry.iter_mut() {
            let grad = param.grad.take().expect("checked above");
            let n = grad.len();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = param.data_mut();
            for i in 0..n {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * grad[i];
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
        Ok(())
    }

    /// First and second moments for a parameter, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|m| (m.m.as_slice(), m.v.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_registry(p: f64) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.insert("p", Tensor::scalar(p));
        reg
    }

    #[test]
    fn pure_decay_step() {
        let mut reg = scalar_registry(1.0);
        reg.get_mut("p").unwrap().grad = Some(vec![0.0]);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut reg, 0.1).unwrap();
        let p = reg.get("p").unwrap().data()[0];
        assert!((p - 0.999).abs() < 1e-15, "{p}");
        assert!(reg.get("p").unwrap().grad.is_none());
    }

    #[test]
    fn zero_lr_only_moves_moments() {
        let mut reg = scalar_registry(2.0);
        reg.get_mut("p").unwrap().grad = Some(vec![0.5]);
        let mut opt = AdamW::default();
        opt.step(&mut reg, 0.0).unwrap();
        assert_eq!(reg.get("p").unwrap().data()[0], 2.0);
        let (m, v) = opt.moments("p").unwrap();
        assert!((m[0] - 0.05).abs() < 1e-15);
        assert!((v[0] - 0.00025).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn quadratic_converges() {
        let mut reg = scalar_registry(0.0);
        let mut opt = AdamW::default();
        for _ in 0..100 {
            let p = reg.get("p").unwrap().data()[0];
            reg.get_mut("p").unwrap().grad = Some(vec![2.0 * (p - 3.0)]);
            opt.step(&mut reg, 0.1).unwrap();
        }
        let p = reg.get("p").unwrap().data()[0];
        assert!((p - 3.0).abs() < 0.1, "p = {p}");
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut reg = scalar_registry(0.0);
        reg.insert("q", Tensor::scalar(1.0));
        reg.get_mut("p").unwrap().grad = Some(vec![0.0]);
        let err = AdamW::default().step(&mut reg, 0.1).unwrap_err();
        assert!(err.to_string().contains("`q`"), "{err}");
    }

    #[test]
    fn schedule_anchors() {
        let s = CyclicSchedule {
            total_steps: 100,
            ..CyclicSchedule::default()
        };
        assert_eq!(s.lr(0).unwrap(), 1e-4);
        assert_eq!(s.lr(40).unwrap(), 1e-3);
        assert_eq!(s.lr(100).unwrap(), 1e-8);
        let mid = s.lr(20).unwrap();
        assert!((mid - (1e-4f64 * 1e-3).sqrt()).abs() < 1e-12);
        assert!(s.lr(101).is_err());
    }

    #[test]
    fn schedule_is_unimodal() {
        let s = CyclicSchedule {
            total_steps: 37,
            ..CyclicSchedule::default()
        };
        let lrs: Vec<f64> = (0..=37).map(|i| s.lr(i).unwrap()).collect();
        let peak = lrs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!(lrs[..=peak].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak..].windows(2).all(|w| w[0] >= w[1]));
    }
}
