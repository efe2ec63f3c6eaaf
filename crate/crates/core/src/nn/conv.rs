//! Direct convolution kernels (im2col + GEMM) and their autograd wrappers.
//!
//! Both directions tile the spatial extent into row blocks so the column
//! buffer stays bounded at any resolution. Every tile produces a private
//! partial result that is folded in tile order, which keeps the reduction
//! order identical whether tiles run serially or on the rayon pool.

use std::ops::Range;

use rayon::prelude::*;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{exec_mode, ExecMode, Real, Shape, Tensor};

/// Upper bound on column-buffer elements per tile.
const TILE_ELEMS: usize = 1 << 20;

/// Geometry of a strided convolution that maps an image of `c x h x w` onto
/// an `oh x ow` grid of receptive fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::ShapeMismatch("kernel and stride must be positive".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} with padding {pad} is smaller than kernel {k}"
            )));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn tiles(&self) -> Vec<Range<usize>> {
        let rows = (TILE_ELEMS / (self.patch_len() * self.ow).max(1)).clamp(1, self.oh.max(1));
        (0..self.oh)
            .step_by(rows)
            .map(|r| r..(r + rows).min(self.oh))
            .collect()
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Gather receptive fields for output rows `rows` into `col`, laid out as
/// `(c*k*k) x (rows.len()*ow)`.
pub(crate) fn im2col<T: Real>(img: &[T], g: &ConvGeom, rows: Range<usize>, col: &mut [T]) {
    let ncols = rows.len() * g.ow;
    debug_assert_eq!(col.len(), g.patch_len() * ncols);
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[r * ncols..(r + 1) * ncols];
                for (j, oy) in rows.clone().enumerate() {
                    let out = &mut dst[j * g.ow..(j + 1) * g.ow];
                    match g.src(oy, ky, g.h) {
                        None => out.fill(T::zero()),
                        Some(iy) => {
                            let line = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = match g.src(ox, kx, g.w) {
                                    Some(ix) => line[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `col` (same layout as [`im2col`]) back onto `img`.
pub(crate) fn col2im<T: Real>(col: &[T], g: &ConvGeom, rows: Range<usize>, img: &mut [T]) {
    let ncols = rows.len() * g.ow;
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &col[r * ncols..(r + 1) * ncols];
                for (j, oy) in rows.clone().enumerate() {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let line = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in src[j * g.ow..(j + 1) * g.ow].iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            line[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c (m x n) = a (m x k) * b (k x n)`, with optional transposes.
fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the row-major (or transposed) layout
    // of slices whose lengths were checked above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn run_tasks<R: Send, I: Send + Sync>(items: &[I], f: impl Fn(&I) -> R + Sync + Send) -> Vec<R> {
    match exec_mode() {
        ExecMode::Deterministic => items.iter().map(f).collect(),
        ExecMode::Fast => items.par_iter().map(f).collect(),
    }
}

fn add_into<T: Real>(acc: &mut [T], part: &[T]) {
    for (a, &b) in acc.iter_mut().zip(part) {
        *a += b;
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let mut acc = vec![T::zero(); s.c];
    for (i, plane) in g.data().chunks_exact(s.plane().max(1)).enumerate() {
        acc[i % s.c] += plane.iter().copied().sum::<T>();
    }
    Tensor::from_parts(Shape::new(s.c, 1, 1, 1), acc)
}

/// Forward strided convolution. `weight` is `(c_out, c_in, k, k)`; `bias`,
/// when present, holds `c_out` values in any shape.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.h != ws.w || ws.c != xs.c {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input {xs} vs weight {ws}"
        )));
    }
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias of {} for {} output channels",
                b.numel(),
                ws.n
            )));
        }
    }
    let g = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, stride, pad)?;
    let c_out = ws.n;
    let out_plane = g.oh * g.ow;
    let in_len = xs.c * xs.h * xs.w;
    let tiles = g.tiles();
    let tasks: Vec<(usize, Range<usize>)> = (0..xs.n)
        .flat_map(|n| tiles.iter().map(move |t| (n, t.clone())))
        .collect();
    let parts = run_tasks(&tasks, |(n, rows)| {
        let ncols = rows.len() * g.ow;
        let mut col = vec![T::zero(); g.patch_len() * ncols];
        im2col(&x.data()[n * in_len..(n + 1) * in_len], &g, rows.clone(), &mut col);
        let mut out = vec![T::zero(); c_out * ncols];
        matmul(c_out, g.patch_len(), ncols, weight.data(), false, &col, false, &mut out);
        out
    });
    let mut data = vec![T::zero(); xs.n * c_out * out_plane];
    for ((n, rows), part) in tasks.iter().zip(parts) {
        let ncols = rows.len() * g.ow;
        for co in 0..c_out {
            let base = (n * c_out + co) * out_plane + rows.start * g.ow;
            data[base..base + ncols].copy_from_slice(&part[co * ncols..(co + 1) * ncols]);
        }
    }
    if let Some(b) = bias {
        for (i, plane) in data.chunks_exact_mut(out_plane).enumerate() {
            let bv = b.data()[i % c_out];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok((Tensor::from_parts(Shape::new(xs.n, c_out, g.oh, g.ow), data), g))
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    gy: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let c_out = weight.shape().n;
    let klen = g.patch_len();
    let in_len = xs.c * xs.h * xs.w;
    let out_plane = g.oh * g.ow;
    let tiles = g.tiles();
    let items: Vec<usize> = (0..xs.n).collect();

    // One task per batch item: the input gradient of item n is private to it,
    // and the weight partial is folded afterwards in batch order.
    let parts = run_tasks(&items, |&n| {
        let mut gx = need_x.then(|| vec![T::zero(); in_len]);
        let mut gw = need_w.then(|| vec![T::zero(); c_out * klen]);
        for rows in &tiles {
            let ncols = rows.len() * g.ow;
            let mut gchunk = vec![T::zero(); c_out * ncols];
            for co in 0..c_out {
                let base = (n * c_out + co) * out_plane + rows.start * g.ow;
                gchunk[co * ncols..(co + 1) * ncols].copy_from_slice(&gy.data()[base..base + ncols]);
            }
            if let Some(gw) = gw.as_mut() {
                let mut col = vec![T::zero(); klen * ncols];
                im2col(&x.data()[n * in_len..(n + 1) * in_len], g, rows.clone(), &mut col);
                let mut part = vec![T::zero(); c_out * klen];
                matmul(c_out, ncols, klen, &gchunk, false, &col, true, &mut part);
                add_into(gw, &part);
            }
            if let Some(gx) = gx.as_mut() {
                let mut gcol = vec![T::zero(); klen * ncols];
                matmul(klen, c_out, ncols, weight.data(), true, &gchunk, false, &mut gcol);
                col2im(&gcol, g, rows.clone(), gx);
            }
        }
        (gx, gw)
    });

    let mut gx_all = need_x.then(|| Vec::with_capacity(xs.numel()));
    let mut gw_all = need_w.then(|| vec![T::zero(); c_out * klen]);
    for (gx, gw) in parts {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend_from_slice(&gx);
        }
        if let (Some(all), Some(gw)) = (gw_all.as_mut(), gw) {
            add_into(all, &gw);
        }
    }
    (
        gx_all.map(|d| Tensor::from_parts(xs, d)),
        gw_all.map(|d| Tensor::from_parts(weight.shape(), d)),
    )
}

/// Transposed convolution. `weight` is `(c_in, c_out, k, k)`. Output size is
/// `(h - 1) * stride - 2 * pad + k + output_padding`.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<(Tensor<T>, ConvGeom)> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.h != ws.w || ws.n != xs.c {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose2d: input {xs} vs weight {ws}"
        )));
    }
    if output_padding >= stride.max(1) {
        return Err(Error::ShapeMismatch(format!(
            "output_padding {output_padding} must be below stride {stride}"
        )));
    }
    let k = ws.h;
    let c_out = ws.c;
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d: bias of {} for {c_out} output channels",
                b.numel()
            )));
        }
    }
    let dim = |i: usize| -> Result<usize> {
        let full = (i.max(1) - 1) * stride + k + output_padding;
        if i == 0 || full < 2 * pad + 1 {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d: input {xs} too small"
            )));
        }
        Ok(full - 2 * pad)
    };
    let (oh, ow) = (dim(xs.h)?, dim(xs.w)?);
    let g = ConvGeom::new(c_out, oh, ow, k, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (xs.h, xs.w));
    let klen = g.patch_len();
    let in_len = xs.c * xs.plane();
    let out_len = c_out * oh * ow;
    let tiles = g.tiles();
    let items: Vec<usize> = (0..xs.n).collect();
    let parts = run_tasks(&items, |&n| {
        let mut y = vec![T::zero(); out_len];
        for rows in &tiles {
            let ncols = rows.len() * g.ow;
            let mut xchunk = vec![T::zero(); xs.c * ncols];
            for ci in 0..xs.c {
                let base = n * in_len + ci * xs.plane() + rows.start * g.ow;
                xchunk[ci * ncols..(ci + 1) * ncols].copy_from_slice(&x.data()[base..base + ncols]);
            }
            let mut col = vec![T::zero(); klen * ncols];
            matmul(klen, xs.c, ncols, weight.data(), true, &xchunk, false, &mut col);
            col2im(&col, &g, rows.clone(), &mut y);
        }
        y
    });
    let mut data = Vec::with_capacity(xs.n * out_len);
    for p in parts {
        data.extend_from_slice(&p);
    }
    if let Some(b) = bias {
        for (i, plane) in data.chunks_exact_mut(oh * ow).enumerate() {
            let bv = b.data()[i % c_out];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok((Tensor::from_parts(Shape::new(xs.n, c_out, oh, ow), data), g))
}

fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
    gy: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let klen = g.patch_len();
    let in_len = xs.c * xs.plane();
    let out_len = g.c * g.h * g.w;
    let tiles = g.tiles();
    let items: Vec<usize> = (0..xs.n).collect();
    let parts = run_tasks(&items, |&n| {
        let mut gx = need_x.then(|| vec![T::zero(); in_len]);
        let mut gw = need_w.then(|| vec![T::zero(); xs.c * klen]);
        for rows in &tiles {
            let ncols = rows.len() * g.ow;
            let mut col = vec![T::zero(); klen * ncols];
            im2col(&gy.data()[n * out_len..(n + 1) * out_len], g, rows.clone(), &mut col);
            if let Some(gx) = gx.as_mut() {
                let mut part = vec![T::zero(); xs.c * ncols];
                matmul(xs.c, klen, ncols, weight.data(), false, &col, false, &mut part);
                for ci in 0..xs.c {
                    let base = ci * xs.plane() + rows.start * g.ow;
                    gx[base..base + ncols].copy_from_slice(&part[ci * ncols..(ci + 1) * ncols]);
                }
            }
            if let Some(gw) = gw.as_mut() {
                let mut xchunk = vec![T::zero(); xs.c * ncols];
                for ci in 0..xs.c {
                    let base = n * in_len + ci * xs.plane() + rows.start * g.ow;
                    xchunk[ci * ncols..(ci + 1) * ncols].copy_from_slice(&x.data()[base..base + ncols]);
                }
                let mut part = vec![T::zero(); xs.c * klen];
                matmul(xs.c, ncols, klen, &xchunk, false, &col, true, &mut part);
                add_into(gw, &part);
            }
        }
        (gx, gw)
    });
    let mut gx_all = need_x.then(|| Vec::with_capacity(xs.numel()));
    let mut gw_all = need_w.then(|| vec![T::zero(); xs.c * klen]);
    for (gx, gw) in parts {
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend_from_slice(&gx);
        }
        if let (Some(all), Some(gw)) = (gw_all.as_mut(), gw) {
            add_into(all, &gw);
        }
    }
    (
        gx_all.map(|d| Tensor::from_parts(xs, d)),
        gw_all.map(|d| Tensor::from_parts(weight.shape(), d)),
    )
}

impl<'t, T: Real> Var<'t, T> {
    /// Cross-correlation with `weight (c_out, c_in, k, k)` plus optional bias.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        let (value, geom) =
            conv2d_forward(self.value(), weight.value(), bias.map(|b| b.value()), stride, pad)?;
        let x = self.value().clone();
        let w = weight.value().clone();
        let bias_shape = bias.map(|b| b.shape());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape().record(value, &inputs, move |gy, needs| {
            let (gx, gw) = conv2d_backward(&x, &w, &geom, gy, needs[0], needs[1]);
            let mut out = vec![gx, gw];
            if let Some(bs) = bias_shape {
                out.push(needs[2].then(|| bias_grad(gy).reshape(bs).unwrap()));
            }
            out
        }))
    }

    /// Transposed convolution with `weight (c_in, c_out, k, k)`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var<'t, T>> {
        let (value, geom) = conv_transpose2d_forward(
            self.value(),
            weight.value(),
            bias.map(|b| b.value()),
            stride,
            pad,
            output_padding,
        )?;
        let x = self.value().clone();
        let w = weight.value().clone();
        let bias_shape = bias.map(|b| b.shape());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        Ok(self.tape().record(value, &inputs, move |gy, needs| {
            let (gx, gw) = conv_transpose2d_backward(&x, &w, &geom, gy, needs[0], needs[1]);
            let mut out = vec![gx, gw];
            if let Some(bs) = bias_shape {
                out.push(needs[2].then(|| bias_grad(gy).reshape(bs).unwrap()));
            }
            out
        }))
    }
}
