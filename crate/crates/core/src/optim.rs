//! Adam and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed updates.
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected Adam update of every parameter of `model`.
    ///
    /// All gradients are validated before anything is modified, so a failed
    /// step leaves both the model and the state untouched.
    pub fn step<M: Module<T> + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        let mut problem: Option<Error> = None;
        model.visit("", &mut |name, p| {
            if problem.is_some() {
                return;
            }
            match grads.get(&name) {
                None => problem = Some(Error::MissingGrad(name)),
                Some(g) if g.shape() != p.shape() => {
                    problem = Some(Error::ShapeMismatch(format!(
                        "gradient for {name} is {} but the parameter is {}",
                        g.shape(),
                        p.shape()
                    )))
                }
                Some(g) if !g.is_finite() => problem = Some(Error::NonFiniteGrad(name)),
                Some(_) => {}
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }

        let t = self.t + 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let corr1 = T::from_f64(1.0 - self.beta1.powf(t as f64));
        let corr2 = T::from_f64(1.0 - self.beta2.powf(t as f64));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(self.eps));
        let (ms, vs) = (&mut self.m, &mut self.v);

        model.visit_mut("", &mut |name, p| {
            let g = &grads[&name];
            let shape = p.shape();
            let m = ms.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let v = vs.entry(name).or_insert_with(|| Tensor::zeros(shape));
            let n = p.numel();
            let (mut nm, mut nv, mut np) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                let mhat = mi / corr1;
                let vhat = vi / corr2;
                np.push(p.data()[i] - lr * mhat / (vhat.sqrt() + eps));
                nm.push(mi);
                nv.push(vi);
            }
            *m = Tensor::from_parts(shape, nm);
            *v = Tensor::from_parts(shape, nv);
            *p = Tensor::from_parts(shape, np);
        });
        self.t = t;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
    /// Piecewise constant, geometric drops at equal intervals.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
    /// Number of drops for [`ScheduleKind::Step`].
    pub step_drops: u32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr_start: 1e-4,
            lr_end: 1e-6,
            total_steps: 0,
            kind: ScheduleKind::Cosine,
            step_drops: 2,
        }
    }
}

impl LrSchedule {
    pub fn new(total_steps: u64) -> Self {
        LrSchedule {
            total_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_start.is_finite() && self.lr_end.is_finite() && self.lr_end > 0.0 && self.lr_start >= self.lr_end;
        if !ok {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.kind == ScheduleKind::Step && self.step_drops == 0 {
            return Err(Error::Config("step schedule needs step_drops >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate at `step`; steps past the end clamp to `lr_end`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr_start;
        }
        let step = if step > self.total_steps {
            log::warn!("step {step} beyond schedule length {}; clamping", self.total_steps);
            self.total_steps
        } else {
            step
        };
        let (a, b) = (self.lr_start, self.lr_end);
        if step == 0 {
            return a;
        }
        if step == self.total_steps {
            return b;
        }
        let frac = step as f64 / self.total_steps as f64;
        match self.kind {
            ScheduleKind::Cosine => b + (a - b) * 0.5 * (1.0 + (PI * frac).cos()),
            ScheduleKind::Linear => a + (b - a) * frac,
            ScheduleKind::Step => {
                let k = self.step_drops as f64;
                let stage = (frac * k).floor().min(k);
                a * (b / a).powf(stage / k)
            }
        }
    }
}
