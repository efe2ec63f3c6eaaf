use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::Value;

fn dmshn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmshn"))
        .args(args)
        .env("DMSHN_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dmshn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure and returns the single error line.
fn fails(args: &[&str]) -> String {
    let out = dmshn(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let errors: Vec<&str> = stderr.lines().filter(|l| l.starts_with("error: ")).collect();
    assert_eq!(errors.len(), 1, "{stderr}");
    errors[0].to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn picture(w: u32, h: u32, salt: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb([((x * 7 + salt) % 256) as u8, ((y * 5) % 256) as u8, ((x * y + salt) % 256) as u8]))
}

fn dataset(root: &Path) {
    for sub in ["original", "bokeh"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    for i in 0..2 {
        picture(32, 32, i * 40).save(root.join(format!("original/p{i}.png"))).unwrap();
        picture(32, 32, i * 40 + 9).save(root.join(format!("bokeh/p{i}.png"))).unwrap();
    }
}

struct Toy {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn toy() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    dataset(&root.join("data"));
    let config = root.join("toy.json");
    let text = serde_json::json!({
        "total_steps": 4,
        "channels": [2, 4, 8],
        "train_resolution": [32, 32],
        "lr_start": 1e-3,
        "checkpoint_every": 2,
        "train_data": root.join("data"),
    });
    std::fs::write(&config, text.to_string()).unwrap();
    Toy { _dir: dir, root, config }
}

fn first_json(stdout: &str) -> Value {
    let mut de = serde_json::Deserializer::from_str(stdout).into_iter::<Value>();
    de.next().unwrap().unwrap()
}

#[test]
fn train_echoes_config_and_writes_checkpoints() {
    let t = toy();
    let run = t.root.join("run");
    let stdout = ok(&["train", "--config", s(&t.config), "--out", s(&run), "--seed", "3"]);
    let echoed = first_json(&stdout);
    assert_eq!(echoed["seed"], 3);
    assert_eq!(echoed["stage"], "stage1");
    assert_eq!(echoed["run_dir"], s(&run));
    for f in ["final.dmsn", "step-00000002.dmsn", "train.log", "config.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    // The echo is itself a config that reproduces the run.
    let replay_cfg = t.root.join("echo.json");
    let mut v = echoed.clone();
    v["run_dir"] = Value::String(s(&t.root.join("replay")).into());
    std::fs::write(&replay_cfg, v.to_string()).unwrap();
    ok(&["train", "--config", s(&replay_cfg)]);
    assert_eq!(
        std::fs::read(run.join("final.dmsn")).unwrap(),
        std::fs::read(t.root.join("replay/final.dmsn")).unwrap()
    );

    let header: Value = serde_json::from_str(&ok(&["ckpt-inspect", s(&run.join("final.dmsn"))])).unwrap();
    assert_eq!(header["meta"]["step"], 4);
    assert_eq!(header["tensors"]["enc1.stem.weight"]["dtype"], "f32");
}

#[test]
fn resume_is_bitwise() {
    let t = toy();
    let (a, b) = (t.root.join("a"), t.root.join("b"));
    ok(&["train", "--config", s(&t.config), "--out", s(&a), "--fast"]);
    ok(&[
        "train",
        "--config",
        s(&t.config),
        "--out",
        s(&b),
        "--resume",
        s(&a.join("step-00000002.dmsn")),
        "--deterministic",
    ]);
    assert_eq!(std::fs::read(a.join("final.dmsn")).unwrap(), std::fs::read(b.join("final.dmsn")).unwrap());
    let log = std::fs::read_to_string(b.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn config_errors_come_before_any_work() {
    let t = toy();
    let cfg = t.root.join("bad.json");
    std::fs::write(&cfg, r#"{"channels": [2, 4, 8]}"#).unwrap();
    let run = t.root.join("never");
    let line = fails(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(line.starts_with("error: Config:") && line.contains("total_steps"), "{line}");
    assert!(!run.exists());
    let line = fails(&["train", "--config", s(&t.config), "--set", "no_such_key=1", "--out", s(&run)]);
    assert!(line.starts_with("error: Config:"), "{line}");
    let line = fails(&["finetune", "--config", s(&t.config), "--out", s(&run)]);
    assert!(line.contains("init_checkpoint"), "{line}");
}

#[test]
fn stage_chain_and_model_kinds() {
    let t = toy();
    let (s1, s2, st) = (t.root.join("s1"), t.root.join("s2"), t.root.join("st"));
    ok(&["train", "--config", s(&t.config), "--out", s(&s1)]);
    let s1_ck = s1.join("final.dmsn");
    ok(&["finetune", "--config", s(&t.config), "--ckpt", s(&s1_ck), "--out", s(&s2)]);
    let line = fails(&["finetune", "--config", s(&t.config), "--ckpt", s(&s2.join("final.dmsn")), "--out", s(&st)]);
    assert!(line.starts_with("error: CheckpointStageMismatch:"), "{line}");
    ok(&["stack-finetune", "--config", s(&t.config), "--ckpt", s(&s2.join("final.dmsn")), "--out", s(&st)]);
    let st_ck = st.join("final.dmsn");

    let img = t.root.join("in.png");
    picture(40, 24, 1).save(&img).unwrap();
    let line = fails(&["infer", s(&img), "--ckpt", s(&s1_ck), "--out", s(&t.root.join("x.png")), "--model", "stacked"]);
    assert!(line.starts_with("error: ShapeMismatchOnLoad:"), "{line}");

    let json = |out: String| -> Value { serde_json::from_str(&out).unwrap() };
    let single = json(ok(&["bench", "--ckpt", s(&s1_ck), "--proc-size", "32x16", "--iters", "3"]));
    let stacked = json(ok(&["bench", "--ckpt", s(&st_ck), "--proc-size", "32x16", "--iters", "3"]));
    assert_eq!(stacked["params"].as_u64().unwrap(), 2 * single["params"].as_u64().unwrap());
    assert_eq!(stacked["model"], "stacked");
    let timing = &single["timing"];
    assert!(timing["min_s"].as_f64().unwrap() <= timing["median_s"].as_f64().unwrap());
    assert!(!single["host"].as_str().unwrap().is_empty());
}

#[test]
fn infer_keeps_dims_and_is_deterministic() {
    let t = toy();
    let run = t.root.join("run");
    ok(&["train", "--config", s(&t.config), "--out", s(&run)]);
    let ck = run.join("final.dmsn");
    let img = t.root.join("big.png");
    picture(1152, 768, 2).save(&img).unwrap();
    let (o1, o2) = (t.root.join("o1.png"), t.root.join("o2.png"));
    ok(&["infer", s(&img), "--ckpt", s(&ck), "--out", s(&o1)]);
    ok(&["infer", s(&img), "--ckpt", s(&ck), "--out", s(&o2), "--model", "single"]);
    assert_eq!(image::image_dimensions(&o1).unwrap(), (1152, 768));
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());

    let small = t.root.join("small.png");
    picture(37, 21, 3).save(&small).unwrap();
    let o3 = t.root.join("o3.png");
    ok(&["infer", s(&small), "--ckpt", s(&ck), "--out", s(&o3), "--proc-size", "512x512"]);
    assert_eq!(image::image_dimensions(&o3).unwrap(), (37, 21));

    let outdir = t.root.join("outs");
    let stdout = ok(&["infer", s(&t.root.join("data/original")), "--ckpt", s(&ck), "--out", s(&outdir), "--proc-size", "32x32"]);
    assert!(outdir.join("p0.png").is_file() && outdir.join("p1.png").is_file());
    let lines: Vec<&str> = stdout.lines().collect();
    assert!(lines[0].contains("p0.png") && lines[1].contains("p1.png"));

    let junk = t.root.join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    let line = fails(&["infer", s(&junk), "--ckpt", s(&ck), "--out", s(&o3)]);
    assert!(line.starts_with("error: DecodeError:"), "{line}");
    let line = fails(&["infer", s(&img), "--ckpt", s(&junk), "--out", s(&o3)]);
    assert!(line.starts_with("error: BadMagic:"), "{line}");
}

#[test]
fn eval_reports_and_skips() {
    let t = toy();
    let bokeh = t.root.join("data/bokeh");
    let stdout = ok(&["eval", s(&bokeh), s(&bokeh)]);
    assert!(stdout.starts_with("filename,psnr_db,ssim\np0.png,99"), "{stdout}");
    assert!(stdout.contains("mean_psnr_db=99 mean_ssim=1 pairs=2"), "{stdout}");

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/eval");
    let expected: Value = serde_json::from_str(&std::fs::read_to_string(fixtures.join("expected.json")).unwrap()).unwrap();
    let csv = t.root.join("scores.csv");
    let stdout = ok(&["eval", s(&fixtures.join("pred")), s(&fixtures.join("gt")), "--out", s(&csv)]);
    assert!(stdout.contains("skipped:") && stdout.contains("orphan.png"));
    let mean: f64 = stdout
        .split_whitespace()
        .find_map(|w| w.strip_prefix("mean_ssim="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((mean - expected["mean_ssim"].as_f64().unwrap()).abs() < 1e-6);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let other = t.root.join("empty");
    std::fs::create_dir_all(&other).unwrap();
    let line = fails(&["eval", s(&bokeh), s(&other)]);
    assert!(line.starts_with("error: NoPairsFound:"), "{line}");
}

#[test]
fn bad_thread_setting_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_dmshn"))
        .args(["ckpt-inspect", "nowhere.dmsn"])
        .env("DMSHN_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error: Config:"));
}
