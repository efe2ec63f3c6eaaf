//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to [`Var`]s in creation order.
//! [`Tape::backward`] walks the records in strict reverse order, feeding each
//! node's gradient to its backward rule and accumulating into its inputs.
//! The tape is consumed by that pass; build a new one for the next step.
//!
//! Parameters enter the graph through [`Tape::leaf`], which keys the leaf by
//! the identity of the tensor's buffer, so the same weight used twice maps to
//! one leaf and [`Gradients::wrt`] can look it up from the original tensor.

use std::cell::RefCell;
use std::fmt;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{Real, Shape, Tensor};

/// Backward rule: receives the output gradient and a mask of which inputs
/// need a gradient, returns one optional gradient per input.
pub type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Shape,
    // Holds the leaf buffer alive so its identity cannot be reused.
    leaf: Option<Tensor<T>>,
}

struct Inner<T: Real> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<usize, usize>,
    consumed: bool,
}

pub struct Tape<T: Real = f32> {
    recording: bool,
    inner: RefCell<Inner<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            recording: true,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                leaves: HashMap::new(),
                consumed: false,
            }),
        }
    }

    /// A tape that records nothing. Every `Var` is a constant, so forward
    /// passes run without retaining activations.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// Register `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor<T>) -> Var<'_, T> {
        if !self.recording {
            return self.constant(value.clone());
        }
        let mut inner = self.inner.borrow_mut();
        let key = value.buffer_id();
        let id = match inner.leaves.get(&key) {
            Some(&id) => id,
            None => {
                let id = inner.nodes.len();
                inner.nodes.push(Node {
                    inputs: Vec::new(),
                    backward: None,
                    shape: value.shape(),
                    leaf: Some(value.clone()),
                });
                inner.leaves.insert(key, id);
                id
            }
        };
        Var {
            tape: self,
            id: Some(id),
            value: value.clone(),
        }
    }

    /// Record an op result. `backward` is dropped unless some input is tracked.
    pub fn record<'t>(
        &'t self,
        value: Tensor<T>,
        inputs: &[&Var<'t, T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        if !self.recording || ids.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            inputs: ids,
            backward: Some(Box::new(backward)),
            shape: value.shape(),
            leaf: None,
        });
        Var {
            tape: self,
            id: Some(id),
            value,
        }
    }

    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        let root = loss.id.ok_or(Error::DetachedTensor)?;
        if !loss.value.shape().is_scalar() {
            return Err(Error::NotScalar(loss.value.shape().to_string()));
        }
        let (mut nodes, leaves) = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::TapeConsumed);
            }
            inner.consumed = true;
            (
                std::mem::take(&mut inner.nodes),
                std::mem::take(&mut inner.leaves),
            )
        };
        if root >= nodes.len() {
            return Err(Error::DetachedTensor);
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::ones(Shape::SCALAR));
        let mut leaf_grads = HashMap::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut nodes[i];
            debug_assert_eq!(g.shape(), node.shape);
            if node.leaf.is_some() {
                leaf_grads.insert(i, g);
                continue;
            }
            let Some(rule) = node.backward.take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = rule(&g, &needs);
            for (slot, gi) in node.inputs.iter().zip(input_grads) {
                if let (Some(p), Some(gi)) = (slot, gi) {
                    grads[*p] = Some(match grads[*p].take() {
                        None => gi,
                        Some(prev) => accumulate(prev, &gi),
                    });
                }
            }
        }

        let leaf_shapes = leaves
            .iter()
            .map(|(&buf, &id)| (buf, (id, nodes[id].shape)))
            .collect();
        Ok(Gradients {
            by_node: leaf_grads,
            leaves: leaf_shapes,
        })
    }
}

fn accumulate<T: Real>(prev: Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let shape = prev.shape();
    let mut data = prev.into_vec();
    for (a, &b) in data.iter_mut().zip(g.data()) {
        *a += b;
    }
    Tensor::from_parts(shape, data)
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T: Real = f32> {
    by_node: HashMap<usize, Tensor<T>>,
    leaves: HashMap<usize, (usize, Shape)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.by_node.get(&id))
    }

    /// Gradient for a tensor previously registered with [`Tape::leaf`].
    /// `None` means the leaf was registered but never reached.
    pub fn wrt(&self, value: &Tensor<T>) -> Option<&Tensor<T>> {
        let (id, _) = self.leaves.get(&value.buffer_id())?;
        self.by_node.get(id)
    }

    /// Like [`Gradients::wrt`] but yields zeros for registered, unreached leaves.
    pub fn wrt_or_zeros(&self, value: &Tensor<T>) -> Option<Tensor<T>> {
        let (id, shape) = self.leaves.get(&value.buffer_id())?;
        Some(
            self.by_node
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(*shape)),
        )
    }

    pub fn is_connected(&self, value: &Tensor<T>) -> bool {
        self.wrt(value).is_some()
    }

    /// Gradients of every parameter of `module` that took part in the graph,
    /// keyed by parameter name. Registered but unreached leaves get zeros.
    pub fn named<M: Module<T> + ?Sized>(&self, module: &M) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        module.visit("", &mut |name, t| {
            if let Some(g) = self.wrt_or_zeros(t) {
                out.insert(name, g);
            }
        });
        out
    }
}

/// A tensor value bound to a tape.
#[derive(Clone)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: Option<usize>,
    value: Tensor<T>,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.value.shape()).finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value.clone())
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &str) -> Result<()> {
        self.value.expect_same_shape(&other.value, op)
    }

    /// Elementwise sum. `other` may also be `(1|n, c, 1, 1)`, broadcast over
    /// the spatial dims.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            let value = self.value.zip_map(&other.value, |a, b| a + b)?;
            return Ok(self
                .tape
                .record(value, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]));
        }
        let broadcast = sb.c == sa.c && sb.h == 1 && sb.w == 1 && (sb.n == 1 || sb.n == sa.n);
        if !broadcast {
            return Err(Error::ShapeMismatch(format!("add: {sa} vs {sb}")));
        }
        let plane = sa.plane();
        let b = other.value.data();
        let mut data = self.value.to_vec();
        for (i, chunk) in data.chunks_exact_mut(plane.max(1)).enumerate() {
            let (n, c) = (i / sa.c, i % sa.c);
            let bv = b[if sb.n == 1 { c } else { n * sa.c + c }];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::from_parts(sa, data);
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); sb.numel()];
                for (i, chunk) in g.data().chunks_exact(plane.max(1)).enumerate() {
                    let (n, c) = (i / sa.c, i % sa.c);
                    let slot = if sb.n == 1 { c } else { n * sa.c + c };
                    acc[slot] += chunk.iter().copied().sum::<T>();
                }
                Tensor::from_parts(sb, acc)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "sub")?;
        let value = self.value.zip_map(&other.value, |a, b| a - b)?;
        Ok(self.tape.record(value, &[self, other], |g, needs| {
            vec![Some(g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "mul")?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let value = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |g, y| g * y).unwrap()),
                needs[1].then(|| g.zip_map(&a, |g, x| g * x).unwrap()),
            ]
        }))
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "div")?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let value = a.zip_map(&b, |x, y| x / y)?;
        let out = value.clone();
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| g.zip_map(&b, |g, y| g / y).unwrap());
            let gb = needs[1].then(|| {
                let q = g.zip_map(&b, |g, y| g / y).unwrap();
                q.zip_map(&out, |q, o| -q * o).unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn square(&self) -> Var<'t, T> {
        let x = self.value.clone();
        let value = x.map(|v| v * v);
        self.tape.record(value, &[self], move |g, _| {
            let two = T::from_f64(2.0);
            vec![Some(g.zip_map(&x, |g, x| two * g * x).unwrap())]
        })
    }

    pub fn mul_scalar(&self, s: T) -> Result<Var<'t, T>> {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("mul_scalar factor {s}")));
        }
        let value = self.value.scale(s);
        Ok(self.tape.record(value, &[self], move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn add_scalar(&self, s: T) -> Result<Var<'t, T>> {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("add_scalar offset {s}")));
        }
        let value = self.value.map(|v| v + s);
        Ok(self.tape.record(value, &[self], |g, _| vec![Some(g.clone())]))
    }

    /// `max(x, 0)`; the gradient at exactly zero is zero.
    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value.clone();
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.record(value, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |g, x| if x > T::zero() { g } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    /// `|x|`; the subgradient at exactly zero is zero.
    pub fn abs(&self) -> Var<'t, T> {
        let x = self.value.clone();
        let value = x.map(|v| v.abs());
        self.tape.record(value, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
                .unwrap(),
            )]
        })
    }

    /// `x^p` for non-negative `x`. The gradient is defined as zero where
    /// `x <= 0`, where `p * x^(p-1)` is infinite or undefined for `p < 1`.
    pub fn powf(&self, p: T) -> Result<Var<'t, T>> {
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("powf exponent {p}")));
        }
        let x = self.value.clone();
        let value = x.map(|v| if v > T::zero() { v.powf(p) } else if p == T::zero() { T::one() } else { T::zero() });
        Ok(self.tape.record(value, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |g, x| {
                    if x > T::zero() {
                        g * p * x.powf(p - T::one())
                    } else {
                        T::zero()
                    }
                })
                .unwrap(),
            )]
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let shape = self.shape();
        let value = Tensor::scalar(self.value.sum());
        self.tape
            .record(value, &[self], move |g, _| vec![Some(Tensor::full(shape, g.data()[0]))])
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let value = Tensor::scalar(self.value.mean()?);
        let inv = T::one() / T::from_f64(shape.numel() as f64);
        Ok(self
            .tape
            .record(value, &[self], move |g, _| vec![Some(Tensor::full(shape, g.data()[0] * inv))]))
    }

    /// Mean over `h, w`, giving `(n, c, 1, 1)`.
    pub fn mean_spatial(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let plane = s.plane();
        if plane == 0 {
            return Err(Error::EmptyTensor);
        }
        let inv = T::one() / T::from_f64(plane as f64);
        let data = self
            .value
            .data()
            .chunks_exact(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), data);
        Ok(self.tape.record(value, &[self], move |g, _| {
            let mut out = Vec::with_capacity(s.numel());
            for &gv in g.data() {
                out.extend(std::iter::repeat_n(gv * inv, plane));
            }
            vec![Some(Tensor::from_parts(s, out))]
        }))
    }

    pub fn concat_channels(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = Tensor::concat_channels(&self.value, &other.value)?;
        let ca = self.shape().c;
        let cb = other.shape().c;
        Ok(self.tape.record(value, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| g.narrow_channels(0, ca).unwrap()),
                needs[1].then(|| g.narrow_channels(ca, cb).unwrap()),
            ]
        }))
    }

    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        let value = self.value.narrow_channels(start, len)?;
        Ok(self.tape.record(value, &[self], move |g, _| {
            let plane = s.plane();
            let mut out = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                let dst = (n * s.c + start) * plane;
                let src = n * len * plane;
                out[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
            }
            vec![Some(Tensor::from_parts(s, out))]
        }))
    }
}
