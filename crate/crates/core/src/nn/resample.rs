//! Bilinear resampling with half-pixel centres.
//!
//! Output sample `i` reads source position `(i + 0.5) * in / out - 0.5`,
//! clamped to the valid range, so constants map to constants and a factor-2
//! reduction reduces to averaging 2x2 blocks.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    w0: T,
    w1: T,
}

fn axis_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == input - 1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                w0: T::from_f64(1.0 - frac),
                w1: T::from_f64(frac),
            }
        })
        .collect()
}

struct Plan<T> {
    from: Shape,
    to: Shape,
    rows: Vec<Tap<T>>,
    cols: Vec<Tap<T>>,
}

impl<T: Real> Plan<T> {
    fn new(from: Shape, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::BadTarget { h, w });
        }
        if from.h == 0 || from.w == 0 {
            return Err(Error::EmptyTensor);
        }
        Ok(Plan {
            from,
            to: Shape::new(from.n, from.c, h, w),
            rows: axis_taps(from.h, h),
            cols: axis_taps(from.w, w),
        })
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        let (f, t) = (self.from, self.to);
        let mut out = Vec::with_capacity(t.numel());
        let mut tmp = vec![T::zero(); f.h * t.w];
        for plane in x.chunks_exact(f.plane()) {
            for (r, line) in plane.chunks_exact(f.w).enumerate() {
                let dst = &mut tmp[r * t.w..(r + 1) * t.w];
                for (o, tap) in dst.iter_mut().zip(&self.cols) {
                    *o = tap.w0 * line[tap.i0] + tap.w1 * line[tap.i1];
                }
            }
            for tap in &self.rows {
                let a = &tmp[tap.i0 * t.w..(tap.i0 + 1) * t.w];
                let b = &tmp[tap.i1 * t.w..(tap.i1 + 1) * t.w];
                out.extend(a.iter().zip(b).map(|(&a, &b)| tap.w0 * a + tap.w1 * b));
            }
        }
        out
    }

    fn backward(&self, g: &[T]) -> Vec<T> {
        let (f, t) = (self.from, self.to);
        let mut out = vec![T::zero(); f.numel()];
        let mut tmp = vec![T::zero(); f.h * t.w];
        for (plane_g, plane_out) in g.chunks_exact(t.plane()).zip(out.chunks_exact_mut(f.plane())) {
            tmp.fill(T::zero());
            for (r, tap) in self.rows.iter().enumerate() {
                let line = &plane_g[r * t.w..(r + 1) * t.w];
                for (j, &v) in line.iter().enumerate() {
                    tmp[tap.i0 * t.w + j] += tap.w0 * v;
                    tmp[tap.i1 * t.w + j] += tap.w1 * v;
                }
            }
            for (r, line) in tmp.chunks_exact(t.w).enumerate() {
                let dst = &mut plane_out[r * f.w..(r + 1) * f.w];
                for (&v, tap) in line.iter().zip(&self.cols) {
                    dst[tap.i0] += tap.w0 * v;
                    dst[tap.i1] += tap.w1 * v;
                }
            }
        }
        out
    }
}

/// Non-differentiable resize used outside the training graph.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::BadTarget { h, w });
    }
    if (s.h, s.w) == (h, w) {
        return Ok(x.clone());
    }
    let plan = Plan::new(s, h, w)?;
    Ok(Tensor::from_parts(plan.to, plan.forward(x.data())))
}

pub fn downsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 || s.w == 0 {
        return Err(Error::OddDimension { h: s.h, w: s.w });
    }
    resize_bilinear(x, s.h / 2, s.w / 2)
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    resize_bilinear(x, s.h * 2, s.w * 2)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if h == 0 || w == 0 {
            return Err(Error::BadTarget { h, w });
        }
        if (s.h, s.w) == (h, w) {
            return Ok(self.clone());
        }
        let plan = Plan::new(s, h, w)?;
        let value = Tensor::from_parts(plan.to, plan.forward(self.value().data()));
        Ok(self.tape().record(value, &[self], move |g, _| {
            vec![Some(Tensor::from_parts(plan.from, plan.backward(g.data())))]
        }))
    }

    pub fn downsample2x(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) || s.h == 0 || s.w == 0 {
            return Err(Error::OddDimension { h: s.h, w: s.w });
        }
        self.resize_bilinear(s.h / 2, s.w / 2)
    }

    pub fn upsample2x(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        self.resize_bilinear(s.h * 2, s.w * 2)
    }
}
