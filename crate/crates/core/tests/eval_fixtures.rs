use std::path::PathBuf;

use dmshn_core::eval::evaluate_dirs;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval")
}

#[test]
fn shipped_fixtures_match_stored_oracle() {
    let dir = fixtures();
    let expected: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).unwrap()).unwrap();
    let report = evaluate_dirs(&dir.join("pred"), &dir.join("gt")).unwrap();
    let rows = expected["rows"].as_array().unwrap();
    assert_eq!(report.rows.len(), rows.len());
    for (got, want) in report.rows.iter().zip(rows) {
        assert_eq!(got.filename, want["filename"].as_str().unwrap());
        let (p, s) = (want["psnr_db"].as_f64().unwrap(), want["ssim"].as_f64().unwrap());
        assert!((got.psnr_db - p).abs() < 1e-6, "{}: psnr {} vs {p}", got.filename, got.psnr_db);
        assert!((got.ssim - s).abs() < 1e-6, "{}: ssim {} vs {s}", got.filename, got.ssim);
    }
    assert!((report.mean_psnr - expected["mean_psnr"].as_f64().unwrap()).abs() < 1e-6);
    assert!((report.mean_ssim - expected["mean_ssim"].as_f64().unwrap()).abs() < 1e-6);
    let skipped: Vec<String> = report
        .skipped
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(skipped, ["orphan.png"]);
}
