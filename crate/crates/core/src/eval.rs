//! PSNR / SSIM over directories of predicted and ground-truth images.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::stem_map;
use crate::error::{Error, Result};
use crate::imageio::{read_rgb, rgb_to_tensor};
use crate::objectives::{psnr, ssim_value};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// Both images go to `[0, 1]` before scoring; PSNR uses peak 1.
pub fn evaluate_pair(pred: &RgbImage, gt: &RgbImage) -> Result<PairMetrics> {
    if pred.dimensions() != gt.dimensions() {
        let ((pw, ph), (gw, gh)) = (pred.dimensions(), gt.dimensions());
        return Err(Error::DimsDiffer(format!("prediction is {pw}x{ph}, ground truth is {gw}x{gh}")));
    }
    let (p, g) = (rgb_to_tensor::<f64>(pred), rgb_to_tensor::<f64>(gt));
    Ok(PairMetrics {
        psnr: psnr(&p, &g, 1.0)?,
        ssim: ssim_value(&p, &g)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub filename: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Sorted by filename.
    pub rows: Vec<EvalRow>,
    /// Files in either directory with no counterpart in the other.
    pub skipped: Vec<PathBuf>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scores every pair of images that share a basename (extension ignored).
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = stem_map(pred_dir)?;
    let gts = stem_map(gt_dir)?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (stem, p) in &preds {
        match gts.get(stem) {
            Some(g) => pairs.push((p.clone(), g.clone())),
            None => skipped.push(p.clone()),
        }
    }
    skipped.extend(gts.iter().filter(|(s, _)| !preds.contains_key(*s)).map(|(_, g)| g.clone()));
    skipped.sort();
    if pairs.is_empty() {
        return Err(Error::NoPairsFound);
    }
    let rows = pairs
        .par_iter()
        .map(|(p, g)| {
            let m = evaluate_pair(&read_rgb(p)?, &read_rgb(g)?).map_err(|e| match e {
                Error::DimsDiffer(msg) => Error::DimsDiffer(format!("{}: {msg}", p.display())),
                e => e,
            })?;
            Ok(EvalRow {
                filename: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                psnr_db: m.psnr,
                ssim: m.ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_psnr: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
        skipped,
    })
}

#[cfg(test)]
mod tests;
