//! Per-channel linear filters used by the structural-similarity losses.

use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn filter_rows<T: Real>(src: &[T], w: usize, taps: &[T], out: &mut [T]) {
    let ow = w + 1 - taps.len();
    for (line, dst) in src.chunks_exact(w).zip(out.chunks_exact_mut(ow)) {
        for (j, o) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                acc += t * line[j + k];
            }
            *o = acc;
        }
    }
}

fn filter_rows_adjoint<T: Real>(g: &[T], w: usize, taps: &[T], out: &mut [T]) {
    let ow = w + 1 - taps.len();
    for (line, dst) in g.chunks_exact(ow).zip(out.chunks_exact_mut(w)) {
        for (j, &v) in line.iter().enumerate() {
            for (k, &t) in taps.iter().enumerate() {
                dst[j + k] += t * v;
            }
        }
    }
}

fn filter_cols<T: Real>(src: &[T], h: usize, w: usize, taps: &[T], out: &mut [T]) {
    let oh = h + 1 - taps.len();
    for i in 0..oh {
        let dst = &mut out[i * w..(i + 1) * w];
        dst.fill(T::zero());
        for (k, &t) in taps.iter().enumerate() {
            let line = &src[(i + k) * w..(i + k + 1) * w];
            for (o, &v) in dst.iter_mut().zip(line) {
                *o += t * v;
            }
        }
    }
}

fn filter_cols_adjoint<T: Real>(g: &[T], h: usize, w: usize, taps: &[T], out: &mut [T]) {
    let oh = h + 1 - taps.len();
    for i in 0..oh {
        let line = &g[i * w..(i + 1) * w];
        for (k, &t) in taps.iter().enumerate() {
            let dst = &mut out[(i + k) * w..(i + k + 1) * w];
            for (o, &v) in dst.iter_mut().zip(line) {
                *o += t * v;
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Valid-mode separable filter: the same 1-D `taps` along width then
    /// height, applied to every channel independently.
    pub fn filter_separable(&self, taps: &[T]) -> Result<Var<'t, T>> {
        let s = self.shape();
        let k = taps.len();
        if k == 0 || s.h < k || s.w < k {
            return Err(Error::TooSmall(format!(
                "{}x{} input for a {k}-tap window",
                s.h, s.w
            )));
        }
        let (oh, ow) = (s.h + 1 - k, s.w + 1 - k);
        let out_shape = Shape::new(s.n, s.c, oh, ow);
        let taps: Arc<[T]> = taps.into();
        let mut tmp = vec![T::zero(); s.h * ow];
        let mut data = vec![T::zero(); out_shape.numel()];
        for (src, dst) in self
            .value()
            .data()
            .chunks_exact(s.plane())
            .zip(data.chunks_exact_mut(oh * ow))
        {
            filter_rows(src, s.w, &taps, &mut tmp);
            filter_cols(&tmp, s.h, ow, &taps, dst);
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let mut out = vec![T::zero(); s.numel()];
            let mut tmp = vec![T::zero(); s.h * ow];
            for (gp, dst) in g.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(s.plane())) {
                tmp.fill(T::zero());
                filter_cols_adjoint(gp, s.h, ow, &taps, &mut tmp);
                filter_rows_adjoint(&tmp, s.w, &taps, dst);
            }
            vec![Some(Tensor::from_parts(s, out))]
        }))
    }

    /// 2x2 average pooling with stride 2; a trailing odd row or column is dropped.
    pub fn avg_pool2x(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let (oh, ow) = (s.h / 2, s.w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::TooSmall(format!("{}x{} input for 2x2 pooling", s.h, s.w)));
        }
        let quarter = T::from_f64(0.25);
        let out_shape = Shape::new(s.n, s.c, oh, ow);
        let mut data = Vec::with_capacity(out_shape.numel());
        for plane in self.value().data().chunks_exact(s.plane()) {
            for i in 0..oh {
                let r0 = &plane[2 * i * s.w..];
                let r1 = &plane[(2 * i + 1) * s.w..];
                for j in 0..ow {
                    data.push(quarter * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]));
                }
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.tape().record(value, &[self], move |g, _| {
            let mut out = vec![T::zero(); s.numel()];
            for (gp, dst) in g.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(s.plane())) {
                for i in 0..oh {
                    for j in 0..ow {
                        let v = quarter * gp[i * ow + j];
                        dst[2 * i * s.w + 2 * j] = v;
                        dst[2 * i * s.w + 2 * j + 1] = v;
                        dst[(2 * i + 1) * s.w + 2 * j] = v;
                        dst[(2 * i + 1) * s.w + 2 * j + 1] = v;
                    }
                }
            }
            vec![Some(Tensor::from_parts(s, out))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::Tape;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn separable_filter_matches_direct_sum() {
        let mut rng = Rng::new(4);
        let x: Tensor<f64> = rng.uniform_tensor([1, 2, 7, 9], -1.0, 1.0);
        let taps = [0.2, 0.5, 0.3];
        let tape = Tape::<f64>::no_grad();
        let y = tape.constant(x.clone()).filter_separable(&taps).unwrap();
        assert_eq!(y.shape().dims(), [1, 2, 5, 7]);
        for c in 0..2 {
            for i in 0..5 {
                for j in 0..7 {
                    let mut acc = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            acc += taps[a] * taps[b] * x.at(0, c, i + a, j + b);
                        }
                    }
                    assert!((acc - y.value().at(0, c, i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn avg_pool_drops_odd_edge() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 5], |_, _, h, w| (h * 5 + w) as f64);
        let tape = Tape::<f64>::no_grad();
        let y = tape.constant(x).avg_pool2x().unwrap();
        assert_eq!(y.value().data(), &[3.0, 5.0]);
    }
}
