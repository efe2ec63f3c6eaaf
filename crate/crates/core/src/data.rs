//! Paired image datasets, resizing, flip augmentation and seeded batching.
//!
//! Every random decision is drawn from a stream keyed by `(seed, epoch, ...)`,
//! so batch `b` of epoch `e` can be rebuilt without replaying earlier ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{gray_to_tensor, is_image_file, read_gray, read_rgb, rgb_to_tensor};
use crate::nn::resize_bilinear;
use crate::rng::Rng;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_4730;
const CROP_STREAM: u64 = 0x4352_4f50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    /// Bilinear resize of the whole image to the training resolution.
    #[default]
    Resize,
    /// Random window of the training resolution, same offset for the pair.
    RandomCrop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub hflip: f64,
    pub vflip: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { hflip: 0.5, vflip: 0.5 }
    }
}

impl AugmentSpec {
    pub const NONE: AugmentSpec = AugmentSpec { hflip: 0.0, vflip: 0.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `[height, width]`
    pub train_resolution: [usize; 2],
    pub size_mode: SizeMode,
    pub augment: AugmentSpec,
    pub use_depth: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_resolution: [1024, 1024],
            size_mode: SizeMode::Resize,
            augment: AugmentSpec::default(),
            use_depth: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub input: PathBuf,
    pub gt: PathBuf,
    pub depth: Option<PathBuf>,
}

/// One example. Tensors are `(1, c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub gt: Tensor,
    pub depth: Option<Tensor>,
}

/// Stacked examples, `(b, c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub gt: Tensor,
    pub depth: Option<Tensor>,
    /// Dataset indices in batch order.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Source {
    Files(PairRecord),
    Memory(Sample),
}

#[derive(Clone, Debug)]
pub struct PairedDataset {
    items: Vec<Source>,
    pub config: DataConfig,
}

pub(crate) fn stem_map(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        paths.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    paths.sort();
    for path in paths {
        if !is_image_file(&path) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
                log::warn!("{} and {} share a basename; using the latter", prev.display(), path.display());
            }
        }
    }
    Ok(out)
}

impl PairedDataset {
    /// Pairs `<root>/original/X.*` with `<root>/bokeh/X.*` (and `<root>/depth/X.*`
    /// when depth is enabled). Unmatched files are skipped with a warning.
    pub fn from_root(root: &Path, config: DataConfig) -> Result<Self> {
        let originals = stem_map(&root.join("original"))?;
        let bokeh = stem_map(&root.join("bokeh"))?;
        let depth = if config.use_depth {
            Some(stem_map(&root.join("depth"))?)
        } else {
            None
        };
        let mut items = Vec::new();
        for (stem, input) in &originals {
            let Some(gt) = bokeh.get(stem) else {
                log::warn!("no bokeh counterpart for {}", input.display());
                continue;
            };
            let d = match &depth {
                None => None,
                Some(map) => match map.get(stem) {
                    Some(p) => Some(p.clone()),
                    None => {
                        log::warn!("no depth map for {}", input.display());
                        continue;
                    }
                },
            };
            items.push(Source::Files(PairRecord {
                input: input.clone(),
                gt: gt.clone(),
                depth: d,
            }));
        }
        for stem in bokeh.keys().filter(|s| !originals.contains_key(*s)) {
            log::warn!("no original counterpart for bokeh image {stem}");
        }
        Self::finish(items, config)
    }

    /// Manifest lines are `input<TAB>gt[<TAB>depth]`; relative paths resolve
    /// against the manifest's directory. Blank lines and `#` comments are ignored.
    pub fn from_manifest(manifest: &Path, config: DataConfig) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| {
            let p = Path::new(p.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut items = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(Error::Config(format!(
                    "{}:{}: expected 2 or 3 tab-separated paths",
                    manifest.display(),
                    lineno + 1
                )));
            }
            let record = PairRecord {
                input: resolve(cols[0]),
                gt: resolve(cols[1]),
                depth: cols.get(2).map(|p| resolve(p)),
            };
            for p in [Some(&record.input), Some(&record.gt), record.depth.as_ref()].into_iter().flatten() {
                if !p.is_file() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
            if config.use_depth && record.depth.is_none() {
                return Err(Error::Config(format!(
                    "{}:{}: depth is enabled but the line has no depth path",
                    manifest.display(),
                    lineno + 1
                )));
            }
            items.push(Source::Files(record));
        }
        Self::finish(items, config)
    }

    pub fn from_samples(samples: Vec<Sample>, config: DataConfig) -> Result<Self> {
        Self::finish(samples.into_iter().map(Source::Memory).collect(), config)
    }

    fn finish(items: Vec<Source>, config: DataConfig) -> Result<Self> {
        let [h, w] = config.train_resolution;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("train_resolution must be positive, got {h}x{w}")));
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(PairedDataset { items, config })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn records(&self) -> Vec<Option<&PairRecord>> {
        self.items
            .iter()
            .map(|s| match s {
                Source::Files(r) => Some(r),
                Source::Memory(_) => None,
            })
            .collect()
    }

    fn decode(&self, index: usize) -> Result<Sample> {
        match &self.items[index] {
            Source::Memory(s) => Ok(s.clone()),
            Source::Files(r) => {
                let input = rgb_to_tensor(&read_rgb(&r.input)?);
                let gt = rgb_to_tensor(&read_rgb(&r.gt)?);
                if input.shape() != gt.shape() {
                    log::warn!(
                        "{} is {} but {} is {}; both are resized independently",
                        r.input.display(),
                        input.shape(),
                        r.gt.display(),
                        gt.shape()
                    );
                }
                let depth = match (&r.depth, self.config.use_depth) {
                    (Some(p), true) => Some(gray_to_tensor(&read_gray(p)?)),
                    _ => None,
                };
                Ok(Sample { input, gt, depth })
            }
        }
    }

    /// Decoded example at training resolution, before augmentation.
    pub fn load_pair(&self, index: usize, seed: u64, epoch: u64) -> Result<Sample> {
        let s = self.decode(index)?;
        let [h, w] = self.config.train_resolution;
        match self.config.size_mode {
            SizeMode::Resize => {
                let fit = |t: &Tensor| resize_bilinear(t, h, w);
                Ok(Sample {
                    input: fit(&s.input)?,
                    gt: fit(&s.gt)?,
                    depth: s.depth.as_ref().map(fit).transpose()?,
                })
            }
            SizeMode::RandomCrop => {
                let shape = s.input.shape();
                if shape.h < h || shape.w < w {
                    return Err(Error::BadDimensions(format!(
                        "example {index} is {}x{}, smaller than the {h}x{w} crop",
                        shape.h, shape.w
                    )));
                }
                for other in [Some(&s.gt), s.depth.as_ref()].into_iter().flatten() {
                    if (other.shape().h, other.shape().w) != (shape.h, shape.w) {
                        return Err(Error::ShapeMismatch(format!(
                            "example {index}: crop mode needs equal sizes, got {} and {}",
                            shape,
                            other.shape()
                        )));
                    }
                }
                let mut rng = Rng::derive(seed, &[CROP_STREAM, epoch, index as u64]);
                let top = rng.below((shape.h - h + 1) as u64) as usize;
                let left = rng.below((shape.w - w + 1) as u64) as usize;
                let cut = |t: &Tensor| t.crop(top, left, h, w);
                Ok(Sample {
                    input: cut(&s.input)?,
                    gt: cut(&s.gt)?,
                    depth: s.depth.as_ref().map(cut).transpose()?,
                })
            }
        }
    }

    /// Loaded and augmented example `index` as seen in `epoch`.
    pub fn example(&self, index: usize, seed: u64, epoch: u64) -> Result<Sample> {
        let s = self.load_pair(index, seed, epoch)?;
        Ok(augment(s, &self.config.augment, seed, epoch, index as u64))
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        if batch_size == 0 {
            0
        } else {
            self.len() / batch_size
        }
    }

    /// Dataset indices in the order visited during `epoch`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::derive(seed, &[SHUFFLE_STREAM, epoch]).shuffle(&mut order);
        order
    }

    /// Batch `b` of `epoch`. Examples decode in parallel; order is fixed by the shuffle.
    pub fn batch(&self, batch_size: usize, seed: u64, epoch: u64, b: usize) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch(batch_size);
        if per_epoch == 0 {
            return Err(Error::EmptyDataset);
        }
        if b >= per_epoch {
            return Err(Error::Config(format!("batch {b} out of range for {per_epoch} batches per epoch")));
        }
        let order = self.epoch_order(seed, epoch);
        let indices = order[b * batch_size..(b + 1) * batch_size].to_vec();
        let samples: Vec<Sample> = indices
            .par_iter()
            .map(|&i| self.example(i, seed, epoch))
            .collect::<Result<_>>()?;
        let input = Tensor::stack_batch(&samples.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        let gt = Tensor::stack_batch(&samples.iter().map(|s| s.gt.clone()).collect::<Vec<_>>())?;
        let depth = if samples.iter().all(|s| s.depth.is_some()) && self.config.use_depth {
            Some(Tensor::stack_batch(
                &samples.iter().map(|s| s.depth.clone().unwrap()).collect::<Vec<_>>(),
            )?)
        } else {
            None
        };
        Ok(Batch {
            input,
            gt,
            depth,
            indices,
        })
    }

    /// Batch consumed at global training step `step` (0-based).
    pub fn batch_at(&self, batch_size: usize, seed: u64, step: u64) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch(batch_size) as u64;
        if per_epoch == 0 {
            return Err(Error::EmptyDataset);
        }
        self.batch(batch_size, seed, step / per_epoch, (step % per_epoch) as usize)
    }

    /// All full batches of one epoch.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
        let n = self.batches_per_epoch(batch_size);
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok((0..n).map(move |b| self.batch(batch_size, seed, epoch, b)))
    }

    /// Every example at training resolution without augmentation, for validation.
    pub fn all_unaugmented(&self) -> Result<Vec<Sample>> {
        (0..self.len()).into_par_iter().map(|i| self.load_pair(i, 0, 0)).collect()
    }
}

/// Applies the same seeded flips to every tensor of the example.
pub fn augment(s: Sample, spec: &AugmentSpec, seed: u64, epoch: u64, index: u64) -> Sample {
    let mut rng = Rng::derive(seed, &[AUGMENT_STREAM, epoch, index]);
    let h = rng.bernoulli(spec.hflip);
    let v = rng.bernoulli(spec.vflip);
    let apply = |t: Tensor| {
        let t = if h { t.flip_horizontal() } else { t };
        if v {
            t.flip_vertical()
        } else {
            t
        }
    };
    Sample {
        input: apply(s.input),
        gt: apply(s.gt),
        depth: s.depth.map(apply),
    }
}

#[cfg(test)]
mod tests;
