use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Shape, Tensor};

/// Anything that owns named learnable tensors.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, t| total += t.numel());
        total
    }

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Kaiming-uniform over fan-in with leaky slope `sqrt(5)`, giving a bound of `1/sqrt(fan_in)`.
fn kaiming_uniform<T: Real>(rng: &mut Rng, shape: Shape, fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    rng.uniform_tensor(shape, -bound, bound)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer<T: Real = f32> {
    /// `(c_out, c_in, k, k)`
    pub weight: Tensor<T>,
    /// `(1, c_out, 1, 1)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2dLayer<T> {
    /// 3x3 convolution with padding 1.
    pub fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        Self::with_kernel(c_in, c_out, 3, stride, 1, rng)
    }

    pub fn with_kernel(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        Conv2dLayer {
            weight: kaiming_uniform(rng, Shape::new(c_out, c_in, k, k), c_in * k * k),
            bias: Tensor::zeros([1, c_out, 1, 1]),
            stride,
            padding,
        }
    }

    pub fn zeroed(&self) -> Self {
        Conv2dLayer {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            ..*self
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        x.conv2d(&tape.leaf(&self.weight), Some(&tape.leaf(&self.bias)), self.stride, self.padding)
    }
}

impl<T: Real> Module<T> for Conv2dLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Learned 2x upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvT2dLayer<T: Real = f32> {
    /// `(c_in, c_out, k, k)`
    pub weight: Tensor<T>,
    /// `(1, c_out, 1, 1)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl<T: Real> ConvT2dLayer<T> {
    /// Stride-2 transposed conv giving exactly 2x spatial size. `kernel` 4
    /// uses padding 1; `kernel` 3 uses padding 1 plus one row/col of output
    /// padding.
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let output_padding = match kernel {
            4 => 0,
            3 => 1,
            k => return Err(Error::Config(format!("transposed-conv kernel must be 3 or 4, got {k}"))),
        };
        // Each output sees about k*k/4 taps per input channel at stride 2.
        let fan_in = (c_in * kernel * kernel / 4).max(1);
        Ok(ConvT2dLayer {
            weight: kaiming_uniform(rng, Shape::new(c_in, c_out, kernel, kernel), fan_in),
            bias: Tensor::zeros([1, c_out, 1, 1]),
            stride: 2,
            padding: 1,
            output_padding,
        })
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        x.conv_transpose2d(
            &tape.leaf(&self.weight),
            Some(&tape.leaf(&self.bias)),
            self.stride,
            self.padding,
            self.output_padding,
        )
    }
}

impl<T: Real> Module<T> for ConvT2dLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// `x + conv2(relu(conv1(x)))`, no activation after the skip.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T: Real = f32> {
    pub conv1: Conv2dLayer<T>,
    pub conv2: Conv2dLayer<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        ResidualBlock {
            conv1: Conv2dLayer::new(channels, channels, 1, rng),
            conv2: Conv2dLayer::new(channels, channels, 1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x.shape().c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "residual block of {} channels given {}",
                self.channels(),
                x.shape()
            )));
        }
        let h = self.conv1.forward(x)?.relu();
        x.add(&self.conv2.forward(&h)?)
    }
}

impl<T: Real> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

impl<T: Real, M: Module<T>> Module<T> for [M] {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

pub fn conv2d<'t, T: Real>(x: &Var<'t, T>, layer: &Conv2dLayer<T>) -> Result<Var<'t, T>> {
    layer.forward(x)
}

pub fn conv_transpose2d<'t, T: Real>(x: &Var<'t, T>, layer: &ConvT2dLayer<T>) -> Result<Var<'t, T>> {
    layer.forward(x)
}

pub fn residual_block<'t, T: Real>(x: &Var<'t, T>, block: &ResidualBlock<T>) -> Result<Var<'t, T>> {
    block.forward(x)
}
