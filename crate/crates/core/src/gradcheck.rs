//! Central finite-difference gradient checking.
//!
//! The numeric side always runs the `f64` instantiation of the function, so
//! the comparison measures the backward rules rather than `f32` rounding.
//! The analytic side runs at the precision chosen in [`GradCheck`].

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// A scalar-valued function of several tensors, generic over precision.
pub trait ScalarFn {
    fn eval<'t, T: Real>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Entries sampled per input tensor; `0` checks every entry.
    pub max_entries: usize,
    pub seed: u64,
    pub analytic: Precision,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            max_entries: 0,
            seed: 0,
            analytic: Precision::F32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over all sampled entries.
    pub rel_error: f64,
    pub per_input: Vec<f64>,
    pub entries: usize,
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn analytic<T: Real, F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::<T>::new();
    let cast: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let vars: Vec<Var<'_, T>> = cast.iter().map(|t| tape.leaf(t)).collect();
    let loss = f.eval(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    Ok(cast
        .iter()
        .map(|t| grads.wrt_or_zeros(t).expect("registered leaf").cast())
        .collect())
}

pub fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::<f64>::no_grad();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f.eval(&tape, &vars)?.value().item()
}

pub fn check_gradients<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>], cfg: &GradCheck) -> Result<GradCheckReport> {
    let grads = match cfg.analytic {
        Precision::F32 => analytic::<f32, F>(f, inputs)?,
        Precision::F64 => analytic::<f64, F>(f, inputs)?,
    };
    let mut rng = Rng::new(cfg.seed);
    let mut all_a = Vec::new();
    let mut all_n = Vec::new();
    let mut per_input = Vec::with_capacity(inputs.len());

    for (i, input) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..input.numel()).collect();
        if cfg.max_entries > 0 && idx.len() > cfg.max_entries {
            rng.shuffle(&mut idx);
            idx.truncate(cfg.max_entries);
            idx.sort_unstable();
        }
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &j in &idx {
            let mut probe = inputs.to_vec();
            let mut data = input.to_vec();
            data[j] = input.data()[j] + cfg.step;
            probe[i] = Tensor::from_vec(input.shape(), data.clone())?;
            let up = eval_f64(f, &probe)?;
            data[j] = input.data()[j] - cfg.step;
            probe[i] = Tensor::from_vec(input.shape(), data)?;
            let down = eval_f64(f, &probe)?;
            n.push((up - down) / (2.0 * cfg.step));
            a.push(grads[i].data()[j]);
        }
        per_input.push(rel_err(&a, &n));
        all_a.extend(a);
        all_n.extend(n);
    }

    Ok(GradCheckReport {
        rel_error: rel_err(&all_a, &all_n),
        per_input,
        entries: all_a.len(),
    })
}
