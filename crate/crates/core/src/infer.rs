//! Whole-image inference: resize to a processing size, pad to the network's
//! stride, run, crop, and resize back to the input's dimensions.

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::imageio::{gray_to_tensor, rgb_to_tensor, tensor_to_rgb};
use crate::model::{attach_depth, build_pyramid, Model};
use crate::nn::resize_bilinear;
use crate::tensor::Tensor;

/// The network's total downsampling factor.
pub const STRIDE: usize = 16;

/// Default processing size, `[height, width]`.
pub const DEFAULT_PROC_SIZE: [usize; 2] = [1024, 1536];

fn round_up(n: usize) -> usize {
    n.div_ceil(STRIDE) * STRIDE
}

/// Runs `model` on a `(1, 3, h, w)` tensor of any size by edge-padding to a
/// multiple of 16. The result is cropped back and clamped to `[0, 1]`.
pub fn infer_tensor(model: &Model, x: &Tensor, depth: Option<&Tensor>) -> Result<Tensor> {
    let s = x.shape();
    let (ph, pw) = (round_up(s.h), round_up(s.w));
    let mut p = build_pyramid(&x.pad_edge(ph, pw)?)?;
    match (model.config().depth_input, depth) {
        (true, Some(d)) => p = attach_depth(&p, &resize_bilinear(d, s.h, s.w)?.pad_edge(ph, pw)?)?,
        (true, None) => return Err(Error::Config("model expects a depth map".into())),
        (false, Some(_)) => log::warn!("model takes no depth input; ignoring the depth map"),
        (false, None) => {}
    }
    model.infer(&p)?.crop(0, 0, s.h, s.w)
}

/// `proc_size` is `[height, width]`.
pub fn infer_image(model: &Model, img: &RgbImage, depth: Option<&GrayImage>, proc_size: [usize; 2]) -> Result<RgbImage> {
    let [ph, pw] = proc_size;
    if ph == 0 || pw == 0 {
        return Err(Error::BadTarget { h: ph, w: pw });
    }
    let x = rgb_to_tensor::<f32>(img);
    let (h, w) = (x.shape().h, x.shape().w);
    let d = depth.map(gray_to_tensor::<f32>);
    let y = infer_tensor(model, &resize_bilinear(&x, ph, pw)?, d.as_ref())?;
    tensor_to_rgb(&resize_bilinear(&y, h, w)?, 0)
}
