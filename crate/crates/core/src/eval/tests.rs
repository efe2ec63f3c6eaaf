use super::*;
use crate::imageio::write_png;
use crate::objectives::PSNR_CAP;

fn noise(w: u32, h: u32, seed: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let v = (x.wrapping_mul(73) ^ y.wrapping_mul(151) ^ seed.wrapping_mul(2_654_435_761)) % 251;
        image::Rgb([v as u8, (v * 3 % 256) as u8, (255 - v) as u8])
    })
}

#[test]
fn identical_images_hit_the_cap() {
    let a = noise(16, 16, 1);
    let m = evaluate_pair(&a, &a).unwrap();
    assert_eq!(m.psnr, PSNR_CAP);
    assert!((m.ssim - 1.0).abs() < 1e-12);
}

#[test]
fn black_versus_white_is_zero_db() {
    let b = RgbImage::from_pixel(12, 12, image::Rgb([0, 0, 0]));
    let w = RgbImage::from_pixel(12, 12, image::Rgb([255, 255, 255]));
    assert_eq!(evaluate_pair(&b, &w).unwrap().psnr, 0.0);
}

#[test]
fn one_level_error_is_about_48_db() {
    let a = RgbImage::from_pixel(12, 12, image::Rgb([100, 100, 100]));
    let b = RgbImage::from_pixel(12, 12, image::Rgb([101, 101, 101]));
    let p = evaluate_pair(&a, &b).unwrap().psnr;
    assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9, "{p}");
}

#[test]
fn size_mismatch_is_reported() {
    let e = evaluate_pair(&noise(12, 12, 0), &noise(13, 12, 0)).unwrap_err();
    assert_eq!(e.kind(), "DimsDiffer");
}

#[test]
fn directories_pair_by_stem_and_sort() {
    let pred = tempfile::tempdir().unwrap();
    let gt = tempfile::tempdir().unwrap();
    for (i, n) in ["c", "a", "b"].iter().enumerate() {
        write_png(&pred.path().join(format!("{n}.png")), &noise(16, 12, i as u32)).unwrap();
        write_png(&gt.path().join(format!("{n}.png")), &noise(16, 12, 7 + i as u32)).unwrap();
    }
    write_png(&pred.path().join("extra.png"), &noise(16, 12, 1)).unwrap();
    write_png(&gt.path().join("lonely.png"), &noise(16, 12, 1)).unwrap();
    let r = evaluate_dirs(pred.path(), gt.path()).unwrap();
    let names: Vec<&str> = r.rows.iter().map(|r| r.filename.as_str()).collect();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
    assert_eq!(r.skipped.len(), 2);
    let mean = r.rows.iter().map(|r| r.ssim).sum::<f64>() / 3.0;
    assert_eq!(r.mean_ssim, mean);
    let csv = r.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "filename,psnr_db,ssim");
    assert!(lines[1].starts_with("a.png,"));
    assert_eq!(lines.len(), 4);

    let same = evaluate_dirs(gt.path(), gt.path()).unwrap();
    assert_eq!(same.mean_psnr, PSNR_CAP);
    assert!((same.mean_ssim - 1.0).abs() < 1e-12);
}

#[test]
fn nothing_to_pair() {
    let pred = tempfile::tempdir().unwrap();
    let gt = tempfile::tempdir().unwrap();
    write_png(&pred.path().join("x.png"), &noise(12, 12, 1)).unwrap();
    write_png(&gt.path().join("y.png"), &noise(12, 12, 1)).unwrap();
    assert_eq!(evaluate_dirs(pred.path(), gt.path()).unwrap_err().kind(), "NoPairsFound");
}
