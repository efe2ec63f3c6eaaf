//! Training loops: stage 1 (L1 + SSIM), stage 2 (MS-SSIM) and the stacked
//! fine-tune, with JSON-lines logging, periodic checkpoints and resume.
//!
//! Step `k` (0-based) always trains on `dataset.batch_at(batch_size, seed, k)`
//! at `schedule.lr_at(k)`, so a run resumed from a checkpoint taken after `k`
//! steps replays exactly the same updates as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use crate::checkpoint::Stage;
use crate::checkpoint::{config_hash, AdamMeta, Checkpoint, CheckpointMeta};
use crate::data::{AugmentSpec, Batch, DataConfig, PairedDataset, Sample, SizeMode};
use crate::error::{Error, Result};
use crate::model::{attach_depth, build_pyramid, DmshnConfig, DmshnParams, Model, ModelKind, PyramidInput, StackedDmshn};
use crate::objectives::{psnr, ssim_value, stage1_loss, stage2_loss, Stage2Variant};
use crate::optim::{AdamState, LrSchedule, ScheduleKind};
use crate::rng::Rng;
use crate::tensor::{set_exec_mode, ExecMode, Tensor};
use crate::Tape;

const INIT_STREAM: u64 = 0x494e_4954;

/// Every knob of a training run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub alpha: f64,
    pub stage2_variant: Stage2Variant,
    /// Required; there is no meaningful default.
    pub total_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 disables.
    pub eval_every: u64,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub channels: [usize; 3],
    pub use_level_residuals: bool,
    pub depth_input: bool,
    pub convt_kernel: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_schedule: ScheduleKind,
    pub lr_step_drops: u32,
    /// `[height, width]`
    pub train_resolution: [usize; 2],
    pub size_mode: SizeMode,
    pub augment: bool,
    pub exec_mode: ExecMode,
    /// Dataset root (with `original/` and `bokeh/`) or a TAB manifest.
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    /// Weights to start from (stage 2 and stacked fine-tune).
    pub init_checkpoint: Option<PathBuf>,
    /// Where logs and checkpoints go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = DmshnConfig::default();
        let lr = LrSchedule::default();
        TrainConfig {
            stage: Stage::Stage1,
            alpha: 0.1,
            stage2_variant: Stage2Variant::MsSsimOnly,
            total_steps: None,
            batch_size: 2,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            channels: model.channels,
            use_level_residuals: model.use_level_residuals,
            depth_input: model.depth_input,
            convt_kernel: model.convt_kernel,
            lr_start: lr.lr_start,
            lr_end: lr.lr_end,
            lr_schedule: lr.kind,
            lr_step_drops: lr.step_drops,
            train_resolution: [1024, 1024],
            size_mode: SizeMode::Resize,
            augment: true,
            exec_mode: ExecMode::Deterministic,
            train_data: None,
            val_data: None,
            init_checkpoint: None,
            run_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> DmshnConfig {
        DmshnConfig {
            channels: self.channels,
            use_level_residuals: self.use_level_residuals,
            depth_input: self.depth_input,
            convt_kernel: self.convt_kernel,
        }
    }

    pub fn set_model_config(&mut self, m: DmshnConfig) {
        self.channels = m.channels;
        self.use_level_residuals = m.use_level_residuals;
        self.depth_input = m.depth_input;
        self.convt_kernel = m.convt_kernel;
    }

    pub fn total_steps(&self) -> Result<u64> {
        self.total_steps
            .ok_or_else(|| Error::Config("`total_steps` is required".into()))
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        Ok(LrSchedule {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            total_steps: self.total_steps()?,
            kind: self.lr_schedule,
            step_drops: self.lr_step_drops,
        })
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            train_resolution: self.train_resolution,
            size_mode: self.size_mode,
            augment: if self.augment { AugmentSpec::default() } else { AugmentSpec::NONE },
            use_depth: self.depth_input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.total_steps()?;
        if steps == 0 {
            return Err(Error::Config("`total_steps` must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("`alpha` must be non-negative, got {}", self.alpha)));
        }
        let [h, w] = self.train_resolution;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "`train_resolution` must be positive multiples of 16, got {h}x{w}"
            )));
        }
        self.model_config().validate()?;
        self.schedule()?.validate()
    }

    /// Hash of everything that determines the trajectory (paths excluded).
    pub fn trajectory_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.train_data = None;
        c.val_data = None;
        c.init_checkpoint = None;
        c.run_dir = None;
        c.eval_every = 0;
        c.checkpoint_every = 0;
        c.exec_mode = ExecMode::Deterministic;
        config_hash(&c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub stage: Stage,
    /// Completed updates, including this one.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Network input for a batch: pyramid plus depth when the model takes it.
pub fn batch_input(input: &Tensor, depth: Option<&Tensor>, config: &DmshnConfig) -> Result<PyramidInput> {
    let p = build_pyramid(input)?;
    match (config.depth_input, depth) {
        (false, _) => Ok(p),
        (true, Some(d)) => attach_depth(&p, d),
        (true, None) => Err(Error::Config("model expects a depth map but the data has none".into())),
    }
}

/// Scalar training loss of `stage` for one batch.
pub fn loss_value<'t>(stage: Stage, cfg: &TrainConfig, pred: &crate::Var<'t, f32>, gt: &crate::Var<'t, f32>) -> Result<crate::Var<'t, f32>> {
    match stage {
        Stage::Stage1 => stage1_loss(pred, gt, cfg.alpha),
        Stage::Stage2 | Stage::StackFinetune => stage2_loss(pred, gt, cfg.stage2_variant),
    }
}

/// Loss on raw outputs; PSNR and SSIM on outputs clamped to `[0, 1]`.
pub fn evaluate_model(model: &Model, samples: &[Sample], stage: Stage, cfg: &TrainConfig) -> Result<ValMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let config = model.config();
    let (mut loss, mut p, mut s) = (0.0, 0.0, 0.0);
    for sample in samples {
        let input = batch_input(&sample.input, sample.depth.as_ref(), &config)?;
        let tape = Tape::no_grad();
        let out = model.forward(&tape, &input)?;
        let l = loss_value(stage, cfg, &out, &tape.constant(sample.gt.clone()))?;
        loss += l.value().item()? as f64;
        let clamped = out.value().clamp(0.0, 1.0);
        p += psnr(&clamped, &sample.gt, 1.0)?;
        s += ssim_value(&clamped, &sample.gt)?;
    }
    let n = samples.len() as f64;
    Ok(ValMetrics {
        loss: loss / n,
        psnr: p / n,
        ssim: s / n,
    })
}

struct LogSink {
    file: File,
}

impl LogSink {
    fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LogSink { file })
    }

    fn write(&mut self, record: &TrainLogRecord, path: &Path) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub stage: Stage,
    pub model: Model,
    pub adam: AdamState,
    pub schedule: LrSchedule,
    /// Completed updates.
    pub step: u64,
    dataset: &'d PairedDataset,
    val: Option<Vec<Sample>>,
    hash: String,
    log: Option<LogSink>,
    pub records: Vec<TrainLogRecord>,
}

impl<'d> Trainer<'d> {
    fn build(cfg: &TrainConfig, model: Model, adam: AdamState, step: u64, dataset: &'d PairedDataset, val: Option<&PairedDataset>) -> Result<Self> {
        cfg.validate()?;
        set_exec_mode(cfg.exec_mode);
        let val = val.map(|v| v.all_unaugmented()).transpose()?;
        let mut t = Trainer {
            cfg: cfg.clone(),
            stage: cfg.stage,
            model,
            adam,
            schedule: cfg.schedule()?,
            step,
            dataset,
            val,
            hash: cfg.trajectory_hash()?,
            log: None,
            records: Vec::new(),
        };
        if let Some(dir) = &cfg.run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg_path = dir.join("config.json");
            let text = serde_json::to_string_pretty(cfg)?;
            std::fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;
            t.log = Some(LogSink::open(&dir.join("train.log"))?);
        }
        Ok(t)
    }

    /// Fresh single network, seeded from `cfg.seed`.
    pub fn stage1(cfg: &TrainConfig, dataset: &'d PairedDataset, val: Option<&PairedDataset>) -> Result<Self> {
        let cfg = TrainConfig {
            stage: Stage::Stage1,
            ..cfg.clone()
        };
        cfg.validate()?;
        let mut rng = Rng::derive(cfg.seed, &[INIT_STREAM]);
        let model = Model::new(ModelKind::Single, cfg.model_config(), &mut rng)?;
        Self::build(&cfg, model, AdamState::new(), 0, dataset, val)
    }

    /// Continues a stage-1 network under the MS-SSIM objective.
    pub fn stage2(cfg: &TrainConfig, dataset: &'d PairedDataset, val: Option<&PairedDataset>, init: &Checkpoint) -> Result<Self> {
        if init.meta.stage != Stage::Stage1 {
            return Err(Error::CheckpointStageMismatch {
                expected: Stage::Stage1.to_string(),
                found: init.meta.stage.to_string(),
            });
        }
        let cfg = TrainConfig {
            stage: Stage::Stage2,
            ..cfg.clone()
        };
        let model = init.model_as(ModelKind::Single, cfg.model_config())?;
        Self::build(&cfg, model, AdamState::new(), 0, dataset, val)
    }

    /// Stack of two copies of a trained single network, fine-tuned end to end.
    pub fn stack_finetune(cfg: &TrainConfig, dataset: &'d PairedDataset, val: Option<&PairedDataset>, init: &Checkpoint) -> Result<Self> {
        if init.meta.stage == Stage::StackFinetune || init.meta.model_kind != ModelKind::Single {
            return Err(Error::CheckpointStageMismatch {
                expected: "stage1 or stage2 (single network)".into(),
                found: format!("{} ({})", init.meta.stage, init.meta.model_kind),
            });
        }
        let cfg = TrainConfig {
            stage: Stage::StackFinetune,
            ..cfg.clone()
        };
        let base = match init.model_as(ModelKind::Single, cfg.model_config())? {
            Model::Single(p) => p,
            Model::Stacked(_) => unreachable!("requested a single network"),
        };
        let model = Model::Stacked(StackedDmshn::from_pretrained(&base));
        Self::build(&cfg, model, AdamState::new(), 0, dataset, val)
    }

    /// Picks up a checkpoint written by a run of the same stage and config.
    pub fn resume(cfg: &TrainConfig, dataset: &'d PairedDataset, val: Option<&PairedDataset>, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.stage != cfg.stage {
            return Err(Error::CheckpointStageMismatch {
                expected: cfg.stage.to_string(),
                found: ckpt.meta.stage.to_string(),
            });
        }
        let hash = cfg.trajectory_hash()?;
        if hash != ckpt.meta.config_hash {
            log::warn!("resuming with a config that differs from the one that wrote the checkpoint");
        }
        let kind = match cfg.stage {
            Stage::StackFinetune => ModelKind::Stacked,
            _ => ModelKind::Single,
        };
        let model = ckpt.model_as(kind, cfg.model_config())?;
        Self::build(cfg, model, ckpt.adam_state(), ckpt.meta.step, dataset, val)
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let input = batch_input(&batch.input, batch.depth.as_ref(), &self.model.config())?;
        let tape = Tape::new();
        let out = self.model.forward(&tape, &input)?;
        let loss = loss_value(self.stage, &self.cfg, &out, &tape.constant(batch.gt.clone()))?;
        let value = loss.value().item()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step + 1 });
        }
        let grads = tape.backward(&loss)?;
        Ok((value, grads.named(&self.model)))
    }

    pub fn validate_now(&self) -> Result<Option<ValMetrics>> {
        match &self.val {
            None => Ok(None),
            Some(v) => evaluate_model(&self.model, v, self.stage, &self.cfg).map(Some),
        }
    }

    /// One optimisation step.
    pub fn step_once(&mut self) -> Result<TrainLogRecord> {
        let started = Instant::now();
        let k = self.step;
        let lr = self.schedule.lr_at(k);
        let batch = self.dataset.batch_at(self.cfg.batch_size, self.cfg.seed, k)?;
        let (loss, grads) = self.loss_and_grads(&batch)?;
        self.adam.step(&mut self.model, &grads, lr)?;
        self.step += 1;

        let mut record = TrainLogRecord {
            stage: self.stage,
            step: self.step,
            lr,
            loss,
            alpha: (self.stage == Stage::Stage1).then_some(self.cfg.alpha),
            wall_ms: 0.0,
            val_psnr: None,
            val_ssim: None,
            val_loss: None,
        };
        if self.cfg.eval_every > 0 && self.step.is_multiple_of(self.cfg.eval_every) {
            if let Some(m) = self.validate_now()? {
                record.val_psnr = Some(m.psnr);
                record.val_ssim = Some(m.ssim);
                record.val_loss = Some(m.loss);
            }
        }
        if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
            if let Some(dir) = self.cfg.run_dir.clone() {
                let ck = self.checkpoint();
                ck.save(&dir.join(format!("step-{:08}.dmsn", self.step)))?;
                ck.save(&dir.join("latest.dmsn"))?;
            }
        }
        record.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        if let (Some(sink), Some(dir)) = (self.log.as_mut(), self.cfg.run_dir.as_ref()) {
            sink.write(&record, &dir.join("train.log"))?;
        }
        log::info!("{} step {} lr {:.3e} loss {:.6}", self.stage, self.step, lr, loss);
        self.records.push(record.clone());
        Ok(record)
    }

    /// Steps until `step` updates have completed (or the schedule ends).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        let end = step.min(self.total_steps());
        while self.step < end {
            self.step_once()?;
        }
        Ok(())
    }

    /// Runs to the end of the schedule and writes `final.dmsn` to the run dir.
    pub fn run(&mut self) -> Result<Checkpoint> {
        self.run_until(self.total_steps())?;
        let ck = self.checkpoint();
        if let Some(dir) = &self.cfg.run_dir {
            ck.save(&dir.join("final.dmsn"))?;
            ck.save(&dir.join("latest.dmsn"))?;
        }
        Ok(ck)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            stage: self.stage,
            step: self.step,
            model_kind: self.model.kind(),
            model_config: self.model.config(),
            config_hash: self.hash.clone(),
            schedule: self.schedule,
            adam: AdamMeta {
                t: self.adam.t,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
            },
            seed: self.cfg.seed,
        };
        Checkpoint::capture(&self.model, &self.adam, meta)
    }
}

pub fn run_stage1(cfg: &TrainConfig, dataset: &PairedDataset, val: Option<&PairedDataset>) -> Result<Checkpoint> {
    Trainer::stage1(cfg, dataset, val)?.run()
}

pub fn run_stage2(cfg: &TrainConfig, dataset: &PairedDataset, val: Option<&PairedDataset>, init: &Checkpoint) -> Result<Checkpoint> {
    Trainer::stage2(cfg, dataset, val, init)?.run()
}

pub fn run_stack_finetune(cfg: &TrainConfig, dataset: &PairedDataset, val: Option<&PairedDataset>, init: &Checkpoint) -> Result<Checkpoint> {
    Trainer::stack_finetune(cfg, dataset, val, init)?.run()
}

/// Single network from a checkpoint of either kind (net1 for stacks).
pub fn single_from(ck: &Checkpoint) -> Result<DmshnParams> {
    match ck.model()? {
        Model::Single(p) => Ok(p),
        Model::Stacked(s) => Ok(s.net1),
    }
}
