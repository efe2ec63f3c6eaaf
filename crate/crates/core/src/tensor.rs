//! Dense NCHW tensors.
//!
//! A [`Tensor`] is an immutable, reference-counted block of reals laid out
//! row-major with width fastest. Cloning is cheap; every transformation
//! allocates a fresh buffer.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar element type. Training runs in `f32`; the `f64` instantiation is
/// the shadow path used by finite-difference oracles and metric evaluation.
pub trait Real:
    Float + Default + AddAssign + MulAssign + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// The strides and dimensions must describe in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Kernel execution mode.
///
/// `Deterministic` runs every kernel on the calling thread. `Fast` lets the
/// convolution kernels fan out over batch items and row tiles with rayon;
/// per-element reduction order is unchanged, so results stay bitwise equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Deterministic,
    Fast,
}

static EXEC_MODE: AtomicU8 = AtomicU8::new(0);

pub fn set_exec_mode(mode: ExecMode) {
    EXEC_MODE.store(mode as u8, Ordering::Relaxed);
}

pub fn exec_mode() -> ExecMode {
    match EXEC_MODE.load(Ordering::Relaxed) {
        0 => ExecMode::Deterministic,
        _ => ExecMode::Fast,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        n: 1,
        c: 1,
        h: 1,
        w: 1,
    };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Real> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels that already sized the buffer.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Tensor::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::SCALAR, value)
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let s = shape.into();
        let mut data = Vec::with_capacity(s.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor::from_parts(s, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| arc.as_ref().clone())
    }

    /// Copy into a buffer that shares nothing with `self`.
    pub fn deep_clone(&self) -> Self {
        Tensor::from_parts(self.shape, self.to_vec())
    }

    /// Stable identity of the underlying buffer.
    pub(crate) fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.data) as *const () as usize
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn item(&self) -> Result<T> {
        if self.shape.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar(self.shape.to_string()))
        }
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor::from_parts(
            self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape,
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> Result<T> {
        if self.numel() == 0 {
            return Err(Error::EmptyTensor);
        }
        Ok(self.sum() / T::from_f64(self.numel() as f64))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        let src = self.data();
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks_exact(s.w.max(1)) {
            data.extend(row.iter().rev());
        }
        Tensor::from_parts(s, data)
    }

    /// Mirror along the height axis.
    pub fn flip_vertical(&self) -> Self {
        let s = self.shape;
        let src = self.data();
        let mut data = Vec::with_capacity(src.len());
        for plane in src.chunks_exact(s.plane().max(1)) {
            for row in plane.chunks_exact(s.w).rev() {
                data.extend_from_slice(row);
            }
        }
        Tensor::from_parts(s, data)
    }

    /// Concatenate along the batch dimension.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyTensor)?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            if (ts.c, ts.h, ts.w) != (s.c, s.h, s.w) {
                return Err(Error::ShapeMismatch(format!(
                    "stack_batch: {ts} vs {s}"
                )));
            }
            n += ts.n;
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::from_parts(Shape::new(n, s.c, s.h, s.w), data))
    }

    /// Concatenate along the channel dimension.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        let (sa, sb) = (a.shape, b.shape);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: {sa} vs {sb}"
            )));
        }
        let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(out.numel());
        let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
        for n in 0..sa.n {
            data.extend_from_slice(&a.data()[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&b.data()[n * pb..(n + 1) * pb]);
        }
        Ok(Tensor::from_parts(out, data))
    }

    /// Channels `[start, start + len)` of every batch item.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::ShapeMismatch(format!(
                "narrow_channels {start}+{len} of {s}"
            )));
        }
        let out = Shape::new(s.n, len, s.h, s.w);
        let plane = s.plane();
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data()[base..base + len * plane]);
        }
        Ok(Tensor::from_parts(out, data))
    }

    /// Batch item `i` as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let s = self.shape;
        if i >= s.n {
            return Err(Error::ShapeMismatch(format!("batch index {i} of {s}")));
        }
        let len = s.c * s.plane();
        Ok(Tensor::from_parts(
            Shape::new(1, s.c, s.h, s.w),
            self.data()[i * len..(i + 1) * len].to_vec(),
        ))
    }

    /// Crop a spatial window `[top, top + h) x [left, left + w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if top + h > s.h || left + w > s.w {
            return Err(Error::ShapeMismatch(format!(
                "crop {h}x{w}@({top},{left}) of {s}"
            )));
        }
        let out = Shape::new(s.n, s.c, h, w);
        let mut data = Vec::with_capacity(out.numel());
        for plane in self.data().chunks_exact(s.plane()) {
            for r in top..top + h {
                data.extend_from_slice(&plane[r * s.w + left..r * s.w + left + w]);
            }
        }
        Ok(Tensor::from_parts(out, data))
    }

    /// Replicate-pad on the bottom and right edges.
    pub fn pad_edge(&self, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if h < s.h || w < s.w || s.h == 0 || s.w == 0 {
            return Err(Error::ShapeMismatch(format!("pad_edge {h}x{w} of {s}")));
        }
        let out = Shape::new(s.n, s.c, h, w);
        let mut data = Vec::with_capacity(out.numel());
        for plane in self.data().chunks_exact(s.plane()) {
            for r in 0..h {
                let row = &plane[r.min(s.h - 1) * s.w..][..s.w];
                data.extend_from_slice(row);
                let last = row[s.w - 1];
                data.extend(std::iter::repeat_n(last, w - s.w));
            }
        }
        Ok(Tensor::from_parts(out, data))
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> Tensor {
        Tensor::from_vec(shape, (0..shape.numel()).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp(Shape::new(2, 3, 4, 5));
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_eq!(t.flip_vertical().flip_vertical(), t);
        assert_eq!(t.flip_horizontal().at(0, 0, 0, 0), 4.0);
        assert_eq!(t.flip_vertical().at(0, 0, 0, 0), 15.0);
    }

    #[test]
    fn channel_concat_and_narrow() {
        let a = ramp(Shape::new(2, 3, 2, 2));
        let b = Tensor::full([2, 1, 2, 2], -1.0);
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 4, 2, 2));
        assert_eq!(cat.narrow_channels(0, 3).unwrap(), a);
        assert_eq!(cat.narrow_channels(3, 1).unwrap(), b);
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let a = ramp(Shape::new(1, 2, 3, 5));
        let p = a.pad_edge(16, 16).unwrap();
        assert_eq!(p.at(0, 1, 15, 15), a.at(0, 1, 2, 4));
        assert_eq!(p.crop(0, 0, 3, 5).unwrap(), a);
    }

    #[test]
    fn stack_batch_concatenates() {
        let a = ramp(Shape::new(1, 2, 2, 2));
        let s = Tensor::stack_batch(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(s.shape().n, 2);
        assert_eq!(s.batch_item(1).unwrap(), a);
    }
}
