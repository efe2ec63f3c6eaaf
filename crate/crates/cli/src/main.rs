//! `dmshn`: train, fine-tune, run and evaluate bokeh-rendering networks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dmshn_core::bench::{bench_forward, bench_input, host_description};
use dmshn_core::checkpoint::{read_header, Checkpoint, Stage};
use dmshn_core::data::{DataConfig, PairedDataset};
use dmshn_core::eval::evaluate_dirs;
use dmshn_core::imageio::{is_image_file, read_gray, read_rgb, write_png};
use dmshn_core::infer::{infer_image, DEFAULT_PROC_SIZE};
use dmshn_core::model::{DmshnConfig, Model, ModelKind};
use dmshn_core::nn::Module;
use dmshn_core::rng::Rng;
use dmshn_core::tensor::{set_exec_mode, ExecMode};
use dmshn_core::train::{TrainConfig, Trainer};
use dmshn_core::{Error, Result};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "dmshn", version, about = "Multi-scale hierarchical bokeh rendering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train a single network with L1 + SSIM.
    Train(TrainArgs),
    /// Stage 2: continue a stage-1 checkpoint with MS-SSIM.
    Finetune(TrainArgs),
    /// Stack two copies of a trained network and fine-tune them jointly.
    StackFinetune(TrainArgs),
    /// Render an image, or every image in a directory.
    Infer(InferArgs),
    /// PSNR / SSIM between prediction and ground-truth directories.
    Eval(EvalArgs),
    /// Time forward passes.
    Bench(BenchArgs),
    /// Print a checkpoint header.
    CkptInspect {
        path: PathBuf,
    },
}

#[derive(Args, Clone, Copy, Default)]
struct ExecArgs {
    #[arg(long, conflicts_with = "fast")]
    deterministic: bool,
    /// Multithreaded kernels; results are bitwise equal to deterministic mode.
    #[arg(long)]
    fast: bool,
}

impl ExecArgs {
    fn mode(&self) -> Option<ExecMode> {
        match (self.deterministic, self.fast) {
            (true, _) => Some(ExecMode::Deterministic),
            (_, true) => Some(ExecMode::Fast),
            _ => None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to start from (sets `init_checkpoint`).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Run directory for logs and checkpoints (sets `run_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    exec: ExecArgs,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    total_steps: Option<u64>,
    /// Override any config field, e.g. `--set batch_size=4`. Values parse as JSON.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Single,
    Stacked,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Single => ModelKind::Single,
            KindArg::Stacked => ModelKind::Stacked,
        }
    }
}

/// `WxH`, stored as `[height, width]`.
#[derive(Clone, Copy, Debug)]
struct ProcSize([usize; 2]);

impl FromStr for ProcSize {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(w), parse(h)) {
            (Some(w), Some(h)) => Ok(ProcSize([h, w])),
            _ => Err(format!("expected positive WxH, got `{s}`")),
        }
    }
}

#[derive(Args)]
struct InferArgs {
    /// Image file or directory of images.
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output PNG, or output directory when the input is a directory.
    #[arg(long)]
    out: PathBuf,
    /// Expected model kind; defaults to the checkpoint's.
    #[arg(long, value_enum)]
    model: Option<KindArg>,
    /// Processing size, `WxH` (default 1536x1024).
    #[arg(long)]
    proc_size: Option<ProcSize>,
    /// Depth map (file, or directory matched by basename) for depth-input models.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct EvalArgs {
    pred_dir: PathBuf,
    gt_dir: PathBuf,
    /// Also write the per-pair CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialised default network otherwise.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<KindArg>,
    /// Input size, `WxH` (default 1536x1024).
    #[arg(long)]
    proc_size: Option<ProcSize>,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    exec: ExecArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DMSHN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DMSHN_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(Stage::Stage1, &a),
        Command::Finetune(a) => cmd_train(Stage::Stage2, &a),
        Command::StackFinetune(a) => cmd_train(Stage::StackFinetune, &a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::CkptInspect { path } => {
            echo(&json!({"command": "ckpt-inspect", "path": path}));
            println!("{}", serde_json::to_string_pretty(&read_header(&path)?)?);
            Ok(())
        }
    }
}

/// Settings of non-training commands go to stderr so stdout stays parseable.
fn echo(v: &Value) {
    eprintln!("{v}");
}

fn resolve_train_config(stage: Stage, a: &TrainArgs) -> Result<TrainConfig> {
    let mut obj = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            match serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))? {
                Value::Object(m) => m,
                _ => return Err(Error::Config(format!("{}: expected a JSON object", p.display()))),
            }
        }
        None => Map::new(),
    };
    if let Some(Value::String(s)) = obj.get("stage") {
        if s != &stage.to_string() {
            log::warn!("config says stage `{s}`; this subcommand runs `{stage}`");
        }
    }
    obj.insert("stage".into(), json!(stage));
    let mut put = |k: &str, v: Value| {
        obj.insert(k.into(), v);
    };
    if let Some(p) = &a.ckpt {
        put("init_checkpoint", json!(p));
    }
    if let Some(p) = &a.out {
        put("run_dir", json!(p));
    }
    if let Some(s) = a.seed {
        put("seed", json!(s));
    }
    if let Some(m) = a.exec.mode() {
        put("exec_mode", json!(m));
    }
    if let Some(p) = &a.train_data {
        put("train_data", json!(p));
    }
    if let Some(p) = &a.val_data {
        put("val_data", json!(p));
    }
    if let Some(n) = a.total_steps {
        put("total_steps", json!(n));
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        put(k.trim(), value);
    }
    TrainConfig::from_json(&Value::Object(obj).to_string())
}

fn load_dataset(path: &Path, config: DataConfig) -> Result<PairedDataset> {
    if path.is_file() {
        PairedDataset::from_manifest(path, config)
    } else {
        PairedDataset::from_root(path, config)
    }
}

fn cmd_train(stage: Stage, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(stage, a)?;
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    cfg.validate()?;
    if cfg.run_dir.is_none() {
        return Err(Error::Config("`run_dir` (or --out) is required".into()));
    }
    let init = match (&a.resume, stage, &cfg.init_checkpoint) {
        (Some(_), _, _) | (None, Stage::Stage1, _) => None,
        (None, _, Some(p)) => Some(Checkpoint::load(p)?),
        (None, _, None) => {
            return Err(Error::Config(format!("`init_checkpoint` (or --ckpt) is required for {stage}")));
        }
    };
    let train_path = cfg
        .train_data
        .clone()
        .ok_or_else(|| Error::Config("`train_data` is required".into()))?;
    let train = load_dataset(&train_path, cfg.data_config())?;
    let val = cfg
        .val_data
        .as_ref()
        .map(|p| load_dataset(p, cfg.data_config()))
        .transpose()?;
    let mut trainer = match (&a.resume, init) {
        (Some(r), _) => Trainer::resume(&cfg, &train, val.as_ref(), &Checkpoint::load(r)?)?,
        (None, None) => Trainer::stage1(&cfg, &train, val.as_ref())?,
        (None, Some(ck)) if stage == Stage::Stage2 => Trainer::stage2(&cfg, &train, val.as_ref(), &ck)?,
        (None, Some(ck)) => Trainer::stack_finetune(&cfg, &train, val.as_ref(), &ck)?,
    };
    let start = trainer.step;
    let ck = trainer.run()?;
    let losses: Vec<f64> = trainer.records.iter().map(|r| r.loss).collect();
    let summary = json!({
        "stage": stage,
        "steps": [start, ck.meta.step],
        "first_loss": losses.first(),
        "last_loss": losses.last(),
        "checkpoint": cfg.run_dir.as_ref().map(|d| d.join("final.dmsn")),
    });
    println!("{summary}");
    Ok(())
}

fn load_model(path: &Path, kind: Option<KindArg>) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    match kind {
        Some(k) => ck.model_as(k.into(), ck.meta.model_config),
        None => ck.model(),
    }
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let proc = a.proc_size.map(|p| p.0).unwrap_or(DEFAULT_PROC_SIZE);
    let mode = a.exec.mode().unwrap_or(ExecMode::Deterministic);
    echo(&json!({
        "command": "infer",
        "input": a.input,
        "ckpt": a.ckpt,
        "out": a.out,
        "model": a.model.map(|k| ModelKind::from(k).to_string()),
        "proc_size": format!("{}x{}", proc[1], proc[0]),
        "depth": a.depth,
        "exec_mode": mode,
    }));
    set_exec_mode(mode);
    let model = load_model(&a.ckpt, a.model)?;
    let jobs: Vec<(PathBuf, PathBuf, Option<PathBuf>)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
            path: a.out.clone(),
            source: e,
        })?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&a.input)
            .map_err(|e| Error::Io {
                path: a.input.clone(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::NoPairsFound);
        }
        files
            .into_iter()
            .map(|p| {
                let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let depth = a.depth.as_ref().map(|d| find_by_stem(d, &stem)).transpose()?;
                Ok((p, a.out.join(format!("{stem}.png")), depth))
            })
            .collect::<Result<_>>()?
    } else {
        vec![(a.input.clone(), a.out.clone(), a.depth.clone())]
    };
    let done = jobs
        .par_iter()
        .map(|(src, dst, depth)| {
            let img = read_rgb(src)?;
            let d = depth.as_deref().map(read_gray).transpose()?;
            write_png(dst, &infer_image(&model, &img, d.as_ref(), proc)?)?;
            Ok(format!("{} -> {}", src.display(), dst.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    for line in done {
        println!("{line}");
    }
    Ok(())
}

fn find_by_stem(dir: &Path, stem: &str) -> Result<PathBuf> {
    if dir.is_file() {
        return Ok(dir.to_path_buf());
    }
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingFile(dir.join(format!("{stem}.png"))))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    echo(&json!({"command": "eval", "pred_dir": a.pred_dir, "gt_dir": a.gt_dir, "out": a.out}));
    let report = match evaluate_dirs(&a.pred_dir, &a.gt_dir) {
        Err(Error::NoPairsFound) => {
            log::error!("no file in {} has a counterpart in {}", a.pred_dir.display(), a.gt_dir.display());
            return Err(Error::NoPairsFound);
        }
        r => r?,
    };
    let csv = report.to_csv()?;
    if let Some(p) = &a.out {
        std::fs::write(p, &csv).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    print!("{csv}");
    if !report.skipped.is_empty() {
        println!("\nskipped:");
        for p in &report.skipped {
            println!("{}", p.display());
        }
    }
    println!(
        "\nmean_psnr_db={} mean_ssim={} pairs={}",
        report.mean_psnr,
        report.mean_ssim,
        report.rows.len()
    );
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let [h, w] = a.proc_size.map(|p| p.0).unwrap_or(DEFAULT_PROC_SIZE);
    let mode = a.exec.mode().unwrap_or(ExecMode::Deterministic);
    let seed = a.seed.unwrap_or(0);
    echo(&json!({
        "command": "bench",
        "ckpt": a.ckpt,
        "model": a.model.map(|k| ModelKind::from(k).to_string()),
        "proc_size": format!("{w}x{h}"),
        "iters": a.iters,
        "warmup": a.warmup,
        "seed": seed,
        "exec_mode": mode,
    }));
    if a.iters == 0 {
        return Err(Error::Config("--iters must be at least 1".into()));
    }
    set_exec_mode(mode);
    let model = match &a.ckpt {
        Some(p) => load_model(p, a.model)?,
        None => Model::new(
            a.model.map(Into::into).unwrap_or(ModelKind::Single),
            DmshnConfig::default(),
            &mut Rng::new(seed),
        )?,
    };
    if model.config().depth_input {
        return Err(Error::Config("bench does not support depth-input models".into()));
    }
    let input = bench_input(h, w, seed)?;
    let stats = bench_forward(&model, &input, a.warmup, a.iters)?;
    let report = json!({
        "model": model.kind(),
        "channels": model.config().channels,
        "params": model.param_count(),
        "size": format!("{w}x{h}"),
        "warmup": a.warmup,
        "timing": stats,
        "host": host_description(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
