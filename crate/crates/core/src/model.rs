//! The multi-scale hierarchical network and its two-module stack.
//!
//! Three encoder/decoder pairs run coarse to fine over a 3-level bilinear
//! pyramid. Each coarser level hands the next one two things: its decoded
//! residual image, upsampled and added to the finer input image, and its
//! encoded features, upsampled and added to the finer encoder output.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{downsample2x, join, resize_bilinear, Conv2dLayer, ConvT2dLayer, Module, ResidualBlock};
use crate::rng::Rng;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmshnConfig {
    /// Feature widths of the three encoder levels.
    pub channels: [usize; 3],
    /// Add upsampled coarser-level features to each finer encoder output.
    pub use_level_residuals: bool,
    /// Concatenate a depth map to the encoder input at every level.
    pub depth_input: bool,
    /// Transposed-conv kernel in the decoders, 3 or 4.
    pub convt_kernel: usize,
}

impl Default for DmshnConfig {
    fn default() -> Self {
        DmshnConfig {
            channels: [32, 64, 128],
            use_level_residuals: true,
            depth_input: false,
            convt_kernel: 4,
        }
    }
}

impl DmshnConfig {
    pub fn with_channels(channels: [usize; 3]) -> Self {
        DmshnConfig {
            channels,
            ..Self::default()
        }
    }

    pub fn in_channels(&self) -> usize {
        if self.depth_input {
            4
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !matches!(self.convt_kernel, 3 | 4) {
            return Err(Error::Config(format!(
                "convt_kernel must be 3 or 4, got {}",
                self.convt_kernel
            )));
        }
        Ok(())
    }
}

fn blocks<T: Real>(channels: usize, rng: &mut Rng) -> Vec<ResidualBlock<T>> {
    (0..2).map(|_| ResidualBlock::new(channels, rng)).collect()
}

fn run_blocks<'t, T: Real>(blocks: &[ResidualBlock<T>], x: Var<'t, T>) -> Result<Var<'t, T>> {
    blocks.iter().try_fold(x, |x, b| b.forward(&x))
}

/// Image -> features at 1/4 resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderNet<T: Real = f32> {
    pub stem: Conv2dLayer<T>,
    pub level1: Vec<ResidualBlock<T>>,
    pub down1: Conv2dLayer<T>,
    pub level2: Vec<ResidualBlock<T>>,
    pub down2: Conv2dLayer<T>,
    pub level3: Vec<ResidualBlock<T>>,
}

impl<T: Real> EncoderNet<T> {
    pub fn new(in_ch: usize, [c1, c2, c3]: [usize; 3], rng: &mut Rng) -> Self {
        EncoderNet {
            stem: Conv2dLayer::new(in_ch, c1, 1, rng),
            level1: blocks(c1, rng),
            down1: Conv2dLayer::new(c1, c2, 2, rng),
            level2: blocks(c2, rng),
            down2: Conv2dLayer::new(c2, c3, 2, rng),
            level3: blocks(c3, rng),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = run_blocks(&self.level1, self.stem.forward(x)?)?;
        let x = run_blocks(&self.level2, self.down1.forward(&x)?)?;
        run_blocks(&self.level3, self.down2.forward(&x)?)
    }
}

impl<T: Real> Module<T> for EncoderNet<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit(&join(p, "stem"), f);
        self.level1.visit(&join(p, "level1"), f);
        self.down1.visit(&join(p, "down1"), f);
        self.level2.visit(&join(p, "level2"), f);
        self.down2.visit(&join(p, "down2"), f);
        self.level3.visit(&join(p, "level3"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(p, "stem"), f);
        self.level1.visit_mut(&join(p, "level1"), f);
        self.down1.visit_mut(&join(p, "down1"), f);
        self.level2.visit_mut(&join(p, "level2"), f);
        self.down2.visit_mut(&join(p, "down2"), f);
        self.level3.visit_mut(&join(p, "level3"), f);
    }
}

/// Features at 1/4 resolution -> 3-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderNet<T: Real = f32> {
    pub level3: Vec<ResidualBlock<T>>,
    pub up1: ConvT2dLayer<T>,
    pub level2: Vec<ResidualBlock<T>>,
    pub up2: ConvT2dLayer<T>,
    pub level1: Vec<ResidualBlock<T>>,
    pub head: Conv2dLayer<T>,
}

impl<T: Real> DecoderNet<T> {
    pub fn new([c1, c2, c3]: [usize; 3], convt_kernel: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DecoderNet {
            level3: blocks(c3, rng),
            up1: ConvT2dLayer::new(c3, c2, convt_kernel, rng)?,
            level2: blocks(c2, rng),
            up2: ConvT2dLayer::new(c2, c1, convt_kernel, rng)?,
            level1: blocks(c1, rng),
            head: Conv2dLayer::new(c1, 3, 1, rng),
        })
    }

    pub fn forward<'t>(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let x = run_blocks(&self.level3, x.clone())?;
        let x = run_blocks(&self.level2, self.up1.forward(&x)?)?;
        let x = run_blocks(&self.level1, self.up2.forward(&x)?)?;
        self.head.forward(&x)
    }
}

impl<T: Real> Module<T> for DecoderNet<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.level3.visit(&join(p, "level3"), f);
        self.up1.visit(&join(p, "up1"), f);
        self.level2.visit(&join(p, "level2"), f);
        self.up2.visit(&join(p, "up2"), f);
        self.level1.visit(&join(p, "level1"), f);
        self.head.visit(&join(p, "head"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.level3.visit_mut(&join(p, "level3"), f);
        self.up1.visit_mut(&join(p, "up1"), f);
        self.level2.visit_mut(&join(p, "level2"), f);
        self.up2.visit_mut(&join(p, "up2"), f);
        self.level1.visit_mut(&join(p, "level1"), f);
        self.head.visit_mut(&join(p, "head"), f);
    }
}

/// Three-level image pyramid; `levels[0]` is full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidInput<T: Real = f32> {
    pub levels: [Tensor<T>; 3],
}

impl<T: Real> PyramidInput<T> {
    pub fn shape(&self) -> Shape {
        self.levels[0].shape()
    }

    pub fn has_depth(&self) -> bool {
        self.levels[0].shape().c == 4
    }
}

pub fn build_pyramid<T: Real>(image: &Tensor<T>) -> Result<PyramidInput<T>> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::BadDimensions(format!("expected 3 channels, got {s}")));
    }
    if !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) || s.h == 0 || s.w == 0 {
        return Err(Error::BadDimensions(format!(
            "{}x{} is not a multiple of 16",
            s.h, s.w
        )));
    }
    let l1 = downsample2x(image)?;
    let l2 = downsample2x(&l1)?;
    Ok(PyramidInput {
        levels: [image.clone(), l1, l2],
    })
}

/// Append a depth channel, resized to each level.
pub fn attach_depth<T: Real>(p: &PyramidInput<T>, depth: &Tensor<T>) -> Result<PyramidInput<T>> {
    let (s, d) = (p.shape(), depth.shape());
    if d.c != 1 || d.n != s.n || d.h != s.h || d.w != s.w || p.has_depth() {
        return Err(Error::ShapeMismatch(format!(
            "depth {d} for pyramid base {s}"
        )));
    }
    let mut levels = p.levels.clone();
    for level in levels.iter_mut() {
        let ls = level.shape();
        let resized = resize_bilinear(depth, ls.h, ls.w)?;
        *level = Tensor::concat_channels(level, &resized)?;
    }
    Ok(PyramidInput { levels })
}

/// Switches that cut the cross-level paths, for wiring tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace `up(F3)` and `up(F2)` with zeros.
    pub zero_upsampled_features: bool,
    /// Replace `up(res3)` and `up(res2)` with zeros.
    pub zero_upsampled_residuals: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmshnParams<T: Real = f32> {
    pub config: DmshnConfig,
    /// Index 0 is the full-resolution level.
    pub encoders: [EncoderNet<T>; 3],
    pub decoders: [DecoderNet<T>; 3],
}

fn zeros_like<'t, T: Real>(v: &Var<'t, T>) -> Var<'t, T> {
    v.tape().constant(Tensor::zeros(v.shape()))
}

/// `image + res` on the RGB channels, leaving any depth channel untouched.
fn add_residual_image<'t, T: Real>(level: &Var<'t, T>, res: &Var<'t, T>) -> Result<Var<'t, T>> {
    let c = level.shape().c;
    if c == 3 {
        return level.add(res);
    }
    let rgb = level.narrow_channels(0, 3)?.add(res)?;
    rgb.concat_channels(&level.narrow_channels(3, c - 3)?)
}

impl<T: Real> DmshnParams<T> {
    pub fn new(config: DmshnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mk_enc = |rng: &mut Rng| EncoderNet::new(config.in_channels(), config.channels, rng);
        let encoders = [mk_enc(rng), mk_enc(rng), mk_enc(rng)];
        let decoders = [
            DecoderNet::new(config.channels, config.convt_kernel, rng)?,
            DecoderNet::new(config.channels, config.convt_kernel, rng)?,
            DecoderNet::new(config.channels, config.convt_kernel, rng)?,
        ];
        Ok(DmshnParams {
            config,
            encoders,
            decoders,
        })
    }

    /// Forward over pyramid levels already on `tape`. The result is the raw,
    /// unclamped decoder output.
    pub fn forward_levels<'t>(&self, levels: &[Var<'t, T>; 3], opts: ForwardOptions) -> Result<Var<'t, T>> {
        let in_ch = self.config.in_channels();
        if levels.iter().any(|l| l.shape().c != in_ch) {
            return Err(Error::ShapeMismatch(format!(
                "network expects {in_ch} input channels, pyramid base is {}",
                levels[0].shape()
            )));
        }
        let up = |v: &Var<'t, T>, zero: bool| -> Result<Var<'t, T>> {
            let u = v.upsample2x()?;
            Ok(if zero { zeros_like(&u) } else { u })
        };
        let residuals = self.config.use_level_residuals;

        let f3 = self.encoders[2].forward(&levels[2])?;
        let res3 = self.decoders[2].forward(&f3)?;

        let g2 = self.encoders[1].forward(&add_residual_image(
            &levels[1],
            &up(&res3, opts.zero_upsampled_residuals)?,
        )?)?;
        let f2 = if residuals {
            g2.add(&up(&f3, opts.zero_upsampled_features)?)?
        } else {
            g2
        };
        let res2 = self.decoders[1].forward(&f2)?;

        let g1 = self.encoders[0].forward(&add_residual_image(
            &levels[0],
            &up(&res2, opts.zero_upsampled_residuals)?,
        )?)?;
        let f1 = if residuals {
            g1.add(&up(&f2, opts.zero_upsampled_features)?)?
        } else {
            g1
        };
        self.decoders[0].forward(&f1)
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, p: &PyramidInput<T>) -> Result<Var<'t, T>> {
        self.forward_with(tape, p, ForwardOptions::default())
    }

    pub fn forward_with<'t>(&self, tape: &'t Tape<T>, p: &PyramidInput<T>, opts: ForwardOptions) -> Result<Var<'t, T>> {
        let levels = p.levels.clone().map(|l| tape.constant(l));
        self.forward_levels(&levels, opts)
    }

    /// Copy with buffers that share nothing with `self`.
    pub fn deep_clone(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut("", &mut |_, t| *t = t.deep_clone());
        out
    }
}

impl<T: Real> Module<T> for DmshnParams<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit(&join(p, &format!("enc{}", i + 1)), f);
        }
        for (i, d) in self.decoders.iter().enumerate() {
            d.visit(&join(p, &format!("dec{}", i + 1)), f);
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&join(p, &format!("enc{}", i + 1)), f);
        }
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit_mut(&join(p, &format!("dec{}", i + 1)), f);
        }
    }
}

/// Inference forward: no tape, output clamped to `[0, 1]`.
pub fn dmshn_forward<T: Real>(p: &PyramidInput<T>, params: &DmshnParams<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    Ok(params.forward(&tape, p)?.value().clamp(T::zero(), T::one()))
}

pub fn stacked_forward<T: Real>(p: &PyramidInput<T>, net1: &DmshnParams<T>, net2: &DmshnParams<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let out = stacked_graph(&tape, p, net1, net2)?;
    Ok(out.value().clamp(T::zero(), T::one()))
}

pub fn count_params<T: Real>(params: &DmshnParams<T>) -> usize {
    params.param_count()
}

fn stacked_graph<'t, T: Real>(
    tape: &'t Tape<T>,
    p: &PyramidInput<T>,
    net1: &DmshnParams<T>,
    net2: &DmshnParams<T>,
) -> Result<Var<'t, T>> {
    let first = net1.forward(tape, p)?;
    let l1 = first.downsample2x()?;
    let l2 = l1.downsample2x()?;
    let mut levels = [first, l1, l2];
    if net2.config.depth_input {
        if !p.has_depth() {
            return Err(Error::ShapeMismatch("stacked depth model needs a depth pyramid".into()));
        }
        for (level, src) in levels.iter_mut().zip(&p.levels) {
            let depth = tape.constant(src.narrow_channels(3, 1)?);
            *level = level.concat_channels(&depth)?;
        }
    }
    net2.forward_levels(&levels, ForwardOptions::default())
}

/// Two networks in sequence; the second consumes a fresh pyramid built from
/// the first one's raw output.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedDmshn<T: Real = f32> {
    pub net1: DmshnParams<T>,
    pub net2: DmshnParams<T>,
}

impl<T: Real> StackedDmshn<T> {
    /// Both modules start from independent copies of `base`.
    pub fn from_pretrained(base: &DmshnParams<T>) -> Self {
        StackedDmshn {
            net1: base.deep_clone(),
            net2: base.deep_clone(),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, p: &PyramidInput<T>) -> Result<Var<'t, T>> {
        stacked_graph(tape, p, &self.net1, &self.net2)
    }
}

impl<T: Real> Module<T> for StackedDmshn<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.net1.visit(&join(p, "net1"), f);
        self.net2.visit(&join(p, "net2"), f);
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.net1.visit_mut(&join(p, "net1"), f);
        self.net2.visit_mut(&join(p, "net2"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Single,
    Stacked,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Single => "single",
            ModelKind::Stacked => "stacked",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ModelKind::Single),
            "stacked" => Ok(ModelKind::Stacked),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model<T: Real = f32> {
    Single(DmshnParams<T>),
    Stacked(StackedDmshn<T>),
}

impl<T: Real> Model<T> {
    pub fn new(kind: ModelKind, config: DmshnConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            ModelKind::Single => Model::Single(DmshnParams::new(config, rng)?),
            ModelKind::Stacked => Model::Stacked(StackedDmshn {
                net1: DmshnParams::new(config, rng)?,
                net2: DmshnParams::new(config, rng)?,
            }),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Single(_) => ModelKind::Single,
            Model::Stacked(_) => ModelKind::Stacked,
        }
    }

    pub fn config(&self) -> DmshnConfig {
        match self {
            Model::Single(p) => p.config,
            Model::Stacked(s) => s.net1.config,
        }
    }

    /// Raw output on `tape`; no clamping.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, p: &PyramidInput<T>) -> Result<Var<'t, T>> {
        match self {
            Model::Single(m) => m.forward(tape, p),
            Model::Stacked(m) => m.forward(tape, p),
        }
    }

    /// Inference output clamped to `[0, 1]`.
    pub fn infer(&self, p: &PyramidInput<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        Ok(self.forward(&tape, p)?.value().clamp(T::zero(), T::one()))
    }

    /// Rebuild a model from named tensors, checking every name and shape.
    pub fn from_named(kind: ModelKind, config: DmshnConfig, tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut model = Model::new(kind, config, &mut Rng::new(0))?;
        let label = format!("{kind} {:?}", config.channels);
        let mut failure: Option<Error> = None;
        let mut used = 0;
        model.visit_mut("", &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match tensors.get(&name) {
                None => {
                    failure = Some(Error::ShapeMismatchOnLoad {
                        model: label.clone(),
                        tensor: name,
                        detail: "is missing from the checkpoint".into(),
                    })
                }
                Some(t) if t.shape() != slot.shape() => {
                    failure = Some(Error::ShapeMismatchOnLoad {
                        model: label.clone(),
                        tensor: name,
                        detail: format!("expected {}, found {}", slot.shape(), t.shape()),
                    })
                }
                Some(t) => {
                    *slot = t.clone();
                    used += 1;
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if used != tensors.len() {
            let mut known = Vec::new();
            model.visit("", &mut |name, _| known.push(name));
            let extra = tensors.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(Error::ShapeMismatchOnLoad {
                model: label,
                tensor: extra,
                detail: "is not part of the model".into(),
            });
        }
        Ok(model)
    }
}

impl<T: Real> Module<T> for Model<T> {
    fn visit(&self, p: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Model::Single(m) => m.visit(p, f),
            Model::Stacked(m) => m.visit(p, f),
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            Model::Single(m) => m.visit_mut(p, f),
            Model::Stacked(m) => m.visit_mut(p, f),
        }
    }
}
