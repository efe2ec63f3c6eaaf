use std::collections::HashSet;

use image::{GrayImage, RgbImage};

use super::*;
use crate::imageio::write_png;
use crate::tensor::Shape;

fn pattern(w: u32, h: u32, salt: u8) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8 ^ salt, (y * 5) as u8, salt.wrapping_mul(3)]))
}

fn write_root(dir: &Path, names: &[&str], w: u32, h: u32) {
    for sub in ["original", "bokeh"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    for (i, n) in names.iter().enumerate() {
        write_png(&dir.join("original").join(format!("{n}.png")), &pattern(w, h, i as u8)).unwrap();
        write_png(&dir.join("bokeh").join(format!("{n}.png")), &pattern(w, h, 100 + i as u8)).unwrap();
    }
}

fn cfg(h: usize, w: usize) -> DataConfig {
    DataConfig {
        train_resolution: [h, w],
        ..DataConfig::default()
    }
}

fn memory(n: usize, shape: Shape) -> PairedDataset {
    let samples = (0..n)
        .map(|i| Sample {
            input: Tensor::from_fn(shape, |_, c, y, x| (i * 100 + c * 10 + y * 3 + x) as f32 / 1000.0),
            gt: Tensor::from_fn(shape, |_, c, y, x| (i * 100 + c * 10 + y * 3 + x) as f32 / 1000.0),
            depth: None,
        })
        .collect();
    PairedDataset::from_samples(samples, cfg(shape.h, shape.w)).unwrap()
}

#[test]
fn pairs_by_basename_and_skips_orphans() {
    let dir = tempfile::tempdir().unwrap();
    write_root(dir.path(), &["b", "a", "c"], 12, 8);
    write_png(&dir.path().join("original/orphan.png"), &pattern(12, 8, 9)).unwrap();
    std::fs::write(dir.path().join("bokeh/notes.txt"), "x").unwrap();
    let ds = PairedDataset::from_root(dir.path(), cfg(8, 12)).unwrap();
    assert_eq!(ds.len(), 3);
    let names: Vec<String> = ds
        .records()
        .iter()
        .map(|r| r.unwrap().input.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a", "b", "c"]);
    let r = ds.records()[1].unwrap();
    assert_eq!(r.gt.file_stem(), r.input.file_stem());
}

#[test]
fn empty_root_and_missing_dirs() {
    let dir = tempfile::tempdir().unwrap();
    write_root(dir.path(), &[], 4, 4);
    assert_eq!(PairedDataset::from_root(dir.path(), cfg(4, 4)).unwrap_err().kind(), "EmptyDataset");
    let other = tempfile::tempdir().unwrap();
    assert_eq!(PairedDataset::from_root(other.path(), cfg(4, 4)).unwrap_err().kind(), "IoError");
}

#[test]
fn manifest_resolution_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_root(dir.path(), &["x", "y"], 6, 4);
    let m = dir.path().join("train.tsv");
    std::fs::write(&m, "# comment\noriginal/x.png\tbokeh/x.png\n\noriginal/y.png\tbokeh/y.png\n").unwrap();
    let ds = PairedDataset::from_manifest(&m, cfg(4, 6)).unwrap();
    assert_eq!(ds.len(), 2);
    std::fs::write(&m, "original/x.png\tbokeh/missing.png\n").unwrap();
    assert_eq!(PairedDataset::from_manifest(&m, cfg(4, 6)).unwrap_err().kind(), "MissingFile");
    std::fs::write(&m, "original/x.png bokeh/x.png\n").unwrap();
    assert_eq!(PairedDataset::from_manifest(&m, cfg(4, 6)).unwrap_err().kind(), "Config");
}

#[test]
fn load_pair_resizes_and_normalises() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("original")).unwrap();
    std::fs::create_dir_all(dir.path().join("bokeh")).unwrap();
    let white = RgbImage::from_pixel(24, 16, image::Rgb([255, 255, 255]));
    let black = RgbImage::from_pixel(24, 16, image::Rgb([0, 0, 0]));
    write_png(&dir.path().join("original/p.png"), &white).unwrap();
    write_png(&dir.path().join("bokeh/p.png"), &black).unwrap();
    let ds = PairedDataset::from_root(dir.path(), cfg(16, 16)).unwrap();
    let s = ds.load_pair(0, 0, 0).unwrap();
    assert_eq!(s.input.shape(), Shape::new(1, 3, 16, 16));
    assert!(s.input.data().iter().all(|&v| v == 1.0));
    assert!(s.gt.data().iter().all(|&v| v == 0.0));
}

#[test]
fn resize_to_native_resolution_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    write_root(dir.path(), &["q"], 10, 6);
    let ds = PairedDataset::from_root(dir.path(), cfg(6, 10)).unwrap();
    let s = ds.load_pair(0, 0, 0).unwrap();
    let raw = rgb_to_tensor::<f32>(&read_rgb(&dir.path().join("original/q.png")).unwrap());
    assert_eq!(s.input, raw);
}

#[test]
fn corrupt_image_reports_decode_error() {
    let dir = tempfile::tempdir().unwrap();
    write_root(dir.path(), &["z"], 4, 4);
    std::fs::write(dir.path().join("bokeh/z.png"), b"garbage").unwrap();
    let ds = PairedDataset::from_root(dir.path(), cfg(4, 4)).unwrap();
    assert_eq!(ds.load_pair(0, 0, 0).unwrap_err().kind(), "DecodeError");
}

#[test]
fn depth_maps_follow_basenames() {
    let dir = tempfile::tempdir().unwrap();
    write_root(dir.path(), &["d", "e"], 8, 8);
    std::fs::create_dir_all(dir.path().join("depth")).unwrap();
    GrayImage::from_pixel(8, 8, image::Luma([51])).save(dir.path().join("depth/d.png")).unwrap();
    let c = DataConfig {
        use_depth: true,
        ..cfg(8, 8)
    };
    let ds = PairedDataset::from_root(dir.path(), c).unwrap();
    assert_eq!(ds.len(), 1);
    let b = ds.batch(1, 0, 0, 0).unwrap();
    let d = b.depth.unwrap();
    assert_eq!(d.shape(), Shape::new(1, 1, 8, 8));
    assert!(d.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
}

#[test]
fn flips_are_shared_and_involutive() {
    let ds = memory(1, Shape::new(1, 3, 5, 7));
    let s = ds.load_pair(0, 0, 0).unwrap();
    let always = AugmentSpec { hflip: 1.0, vflip: 1.0 };
    let once = augment(s.clone(), &always, 1, 2, 3);
    assert_eq!(once.input, once.gt);
    assert_ne!(once.input, s.input);
    let twice = augment(once, &always, 1, 2, 3);
    assert_eq!(twice, s);
    let none = augment(s.clone(), &AugmentSpec::NONE, 1, 2, 3);
    assert_eq!(none, s);
}

#[test]
fn augmentation_is_seeded() {
    let ds = memory(1, Shape::new(1, 3, 4, 6));
    let s = ds.load_pair(0, 0, 0).unwrap();
    let spec = AugmentSpec::default();
    for e in 0..8 {
        assert_eq!(augment(s.clone(), &spec, 42, e, 0), augment(s.clone(), &spec, 42, e, 0));
    }
    let distinct: HashSet<Vec<u32>> = (0..32)
        .map(|e| augment(s.clone(), &spec, 42, e, 0).input.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(distinct.len(), 4, "all four flip combinations appear");
}

#[test]
fn drop_last_batching() {
    let ds = memory(5, Shape::new(1, 3, 4, 4));
    assert_eq!(ds.batches_per_epoch(2), 2);
    let batches: Vec<Batch> = ds.batches(2, 7, 0).unwrap().map(|b| b.unwrap()).collect();
    assert_eq!(batches.len(), 2);
    assert_eq!(batches[0].input.shape(), Shape::new(2, 3, 4, 4));
    let seen: HashSet<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    assert_eq!(seen.len(), 4);
    assert_eq!(ds.batches(6, 7, 0).err().unwrap().kind(), "EmptyDataset");
    assert_eq!(
        PairedDataset::from_samples(vec![], DataConfig::default()).unwrap_err().kind(),
        "EmptyDataset"
    );
}

#[test]
fn batch_stream_is_deterministic() {
    let ds = memory(6, Shape::new(1, 3, 4, 4));
    for epoch in 0..3 {
        assert_eq!(ds.epoch_order(9, epoch), ds.epoch_order(9, epoch));
        let a: Vec<Batch> = ds.batches(2, 9, epoch).unwrap().map(|b| b.unwrap()).collect();
        let b: Vec<Batch> = ds.batches(2, 9, epoch).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(a, b);
    }
    assert_ne!(ds.epoch_order(9, 0), ds.epoch_order(9, 1));
    assert_eq!(ds.batch_at(2, 9, 4).unwrap(), ds.batch(2, 9, 1, 1).unwrap());
}

#[test]
fn random_crop_mode() {
    let shape = Shape::new(1, 3, 10, 12);
    let mut ds = memory(2, shape);
    ds.config.size_mode = SizeMode::RandomCrop;
    ds.config.train_resolution = [4, 6];
    let s = ds.load_pair(1, 3, 0).unwrap();
    assert_eq!(s.input.shape(), Shape::new(1, 3, 4, 6));
    assert_eq!(s.input, s.gt);
    assert_eq!(ds.load_pair(1, 3, 0).unwrap(), s);
    ds.config.train_resolution = [11, 6];
    assert_eq!(ds.load_pair(0, 3, 0).unwrap_err().kind(), "BadDimensions");
}
