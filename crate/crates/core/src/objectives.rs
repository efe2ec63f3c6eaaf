//! Training losses and image-quality metrics.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) applied in valid mode,
//! `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, and averages the index map over
//! windows and channels. MS-SSIM takes contrast-structure terms at every
//! scale and the luminance term only at the coarsest, each raised to its
//! scale weight, with 2x2 average pooling between scales.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Canonical five-scale MS-SSIM weights (before normalisation).
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the inputs.
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalised 1-D Gaussian; the 2-D window is its outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    pub ssim: SsimConfig,
    /// Per-scale weights, finest first. Their count is the scale count.
    pub weights: Vec<f64>,
    /// Drop the coarsest scales when the input is too small for all of them.
    pub auto_reduce: bool,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            ssim: SsimConfig::default(),
            weights: MS_SSIM_WEIGHTS.to_vec(),
            auto_reduce: true,
        }
    }
}

impl MsSsimConfig {
    /// The first `scales` canonical weights, renormalised unless all five are kept.
    pub fn with_scales(scales: usize) -> Self {
        let full = Self::default();
        MsSsimConfig {
            weights: full.normalized_weights(scales.clamp(1, 5)),
            ..full
        }
    }

    /// Number of scales usable for an `h x w` input.
    pub fn feasible_scales(&self, h: usize, w: usize) -> usize {
        let mut side = h.min(w);
        let mut m = 0;
        while m < self.weights.len() && side >= self.ssim.window {
            m += 1;
            side /= 2;
        }
        m
    }

    /// Weights for the first `scales` levels. A truncated set is renormalised
    /// to sum to one; the full set is used as given.
    pub fn normalized_weights(&self, scales: usize) -> Vec<f64> {
        if scales >= self.weights.len() {
            return self.weights.clone();
        }
        let w = &self.weights[..scales];
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }
}

fn check_pair<T: Real>(x: &Var<'_, T>, y: &Var<'_, T>, window: usize) -> Result<()> {
    x.value().expect_same_shape(y.value(), "ssim")?;
    let s = x.shape();
    if s.h < window || s.w < window {
        return Err(Error::TooSmall(format!(
            "{}x{} is smaller than the {window}x{window} window",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Luminance and contrast-structure maps over all valid windows.
fn ssim_terms<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>, cfg: &SsimConfig) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let taps: Vec<T> = cfg.taps().into_iter().map(T::from_f64).collect();
    let (c1, c2) = (T::from_f64(cfg.c1()), T::from_f64(cfg.c2()));
    let two = T::from_f64(2.0);

    let mu_x = x.filter_separable(&taps)?;
    let mu_y = y.filter_separable(&taps)?;
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(&mu_y)?;
    let var_x = x.square().filter_separable(&taps)?.sub(&mu_xx)?;
    let var_y = y.square().filter_separable(&taps)?.sub(&mu_yy)?;
    let cov = x.mul(y)?.filter_separable(&taps)?.sub(&mu_xy)?;

    let lum = mu_xy
        .mul_scalar(two)?
        .add_scalar(c1)?
        .div(&mu_xx.add(&mu_yy)?.add_scalar(c1)?)?;
    let cs = cov
        .mul_scalar(two)?
        .add_scalar(c2)?
        .div(&var_x.add(&var_y)?.add_scalar(c2)?)?;
    Ok((lum, cs))
}

pub fn ssim<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>, cfg: &SsimConfig) -> Result<Var<'t, T>> {
    check_pair(x, y, cfg.window)?;
    let (lum, cs) = ssim_terms(x, y, cfg)?;
    lum.mul(&cs)?.mean()
}

/// Per-image, per-channel MS-SSIM averaged over batch and channels.
/// Negative per-scale terms are clipped to zero before exponentiation.
pub fn ms_ssim<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>, cfg: &MsSsimConfig) -> Result<Var<'t, T>> {
    check_pair(x, y, cfg.ssim.window)?;
    let s = x.shape();
    let scales = cfg.feasible_scales(s.h, s.w);
    if scales < cfg.weights.len() && !cfg.auto_reduce {
        return Err(Error::TooSmall(format!(
            "{}x{} supports {scales} of {} MS-SSIM scales",
            s.h,
            s.w,
            cfg.weights.len()
        )));
    }
    if scales == 0 {
        return Err(Error::TooSmall(format!("{}x{} for MS-SSIM", s.h, s.w)));
    }
    let weights = cfg.normalized_weights(scales);
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut product: Option<Var<'t, T>> = None;
    for (j, &w) in weights.iter().enumerate() {
        let (lum, cs) = ssim_terms(&x, &y, &cfg.ssim)?;
        let term = if j + 1 == scales {
            lum.mul(&cs)?.mean_spatial()?
        } else {
            cs.mean_spatial()?
        };
        let term = term.relu().powf(T::from_f64(w))?;
        product = Some(match product {
            None => term,
            Some(p) => p.mul(&term)?,
        });
        if j + 1 < scales {
            x = x.avg_pool2x()?;
            y = y.avg_pool2x()?;
        }
    }
    product.expect("at least one scale").mean()
}

pub fn l1_loss<'t, T: Real>(pred: &Var<'t, T>, gt: &Var<'t, T>) -> Result<Var<'t, T>> {
    pred.value().expect_same_shape(gt.value(), "l1_loss")?;
    pred.sub(gt)?.abs().mean()
}

fn one_minus<'t, T: Real>(v: &Var<'t, T>) -> Result<Var<'t, T>> {
    v.mul_scalar(-T::one())?.add_scalar(T::one())
}

/// `L1 + alpha * (1 - SSIM)`.
pub fn stage1_loss<'t, T: Real>(pred: &Var<'t, T>, gt: &Var<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be a non-negative number, got {alpha}")));
    }
    let l1 = l1_loss(pred, gt)?;
    let ssim_term = one_minus(&ssim(pred, gt, &SsimConfig::default())?)?;
    l1.add(&ssim_term.mul_scalar(T::from_f64(alpha))?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Variant {
    /// `1 - MS-SSIM`
    #[default]
    MsSsimOnly,
    /// `L1 + 0.1 * (1 - MS-SSIM)`
    L1PlusMsSsim,
}

pub fn stage2_loss<'t, T: Real>(pred: &Var<'t, T>, gt: &Var<'t, T>, variant: Stage2Variant) -> Result<Var<'t, T>> {
    let ms = one_minus(&ms_ssim(pred, gt, &MsSsimConfig::default())?)?;
    match variant {
        Stage2Variant::MsSsimOnly => Ok(ms),
        Stage2Variant::L1PlusMsSsim => l1_loss(pred, gt)?.add(&ms.mul_scalar(T::from_f64(0.1))?),
    }
}

/// Reported in place of +inf when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, peak: f64) -> Result<f64> {
    pred.expect_same_shape(gt, "psnr")?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    if pred.numel() == 0 {
        return Err(Error::EmptyTensor);
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    let mse = sse / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// SSIM of two plain tensors, evaluated in `f64` without a graph.
pub fn ssim_value<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let tape = Tape::<f64>::no_grad();
    let (xv, yv) = (tape.constant(x.cast()), tape.constant(y.cast()));
    ssim(&xv, &yv, &SsimConfig::default())?.value().item()
}

#[cfg(test)]
mod tests;
