use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use muralfill_autograd::{Adam, AdamConfig, AdamState, ParamStore, Tape, Var};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::config::{config_diff, TrainConfig};
use super::data::{Batch, TrainingData};
use crate::data::{DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{psnr_from_mse, ssim};
use crate::losses::{d_hinge, g_hinge, generator_total_var, LossReport, LossTerms, Losses, Stage};
use crate::models::archive::{self, Archive};
use crate::models::{composite_var, ModelBundle};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_MODEL: &str = "model.safetensors";
const CHECKPOINT_KIND: &str = "training-checkpoint";

/// Where the schedule stands. Checkpoints store it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    /// Completed epochs within the current stage.
    pub epoch: u32,
    /// Completed batches within the current epoch.
    pub batch: usize,
    /// Optimizer steps over both stages.
    pub step: u64,
    pub stage_step: u64,
    /// Checkpoint that closed stage 1; set once stage 2 starts.
    pub stage1_checkpoint: Option<String>,
    pub best_val_psnr: Option<f64>,
    pub best_val_ssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub progress: Progress,
    pub opt_g1: Adam<f32>,
    pub opt_g2: Adam<f32>,
    pub opt_d: Adam<f32>,
}

impl TrainState {
    fn new(cfg: &TrainConfig) -> Self {
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                beta1: cfg.betas.0,
                beta2: cfg.betas.1,
                eps: cfg.adam_eps,
                clip_norm: cfg.grad_clip,
            })
        };
        TrainState {
            progress: Progress {
                stage: Stage::One,
                epoch: 0,
                batch: 0,
                step: 0,
                stage_step: 0,
                stage1_checkpoint: None,
                best_val_psnr: None,
                best_val_ssim: None,
            },
            opt_g1: adam(cfg.lr_g),
            opt_g2: adam(cfg.lr_g),
            opt_d: adam(cfg.lr_d),
        }
    }

    fn optimizers(&self) -> [(&'static str, &Adam<f32>); 3] {
        [("g1", &self.opt_g1), ("g2", &self.opt_g2), ("d", &self.opt_d)]
    }

    fn optimizers_mut(&mut self) -> [(&'static str, &mut Adam<f32>); 3] {
        [("g1", &mut self.opt_g1), ("g2", &mut self.opt_g2), ("d", &mut self.opt_d)]
    }
}

/// Mean composite metrics over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    /// Mean of per-image PSNR over images that differ from the ground truth;
    /// `None` when every image is reproduced exactly.
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub identical: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub stage: Stage,
    pub epoch: u32,
    pub step: u64,
    #[serde(flatten)]
    pub metrics: SetMetrics,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Step {
        timestamp: f64,
        #[serde(flatten)]
        report: &'a LossReport,
    },
    Validation {
        timestamp: f64,
        #[serde(flatten)]
        record: &'a ValidationRecord,
    },
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Holds the networks, losses and optimizer state of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub losses: Losses<f32>,
    pub state: TrainState,
}

fn split_grads(grads: IndexMap<String, ArrayD<f32>>, store: &ParamStore<f32>) -> IndexMap<String, ArrayD<f32>> {
    grads.into_iter().filter(|(k, _)| store.contains(k)).collect()
}

fn check_finite(term: &str, v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            step,
        })
    }
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut bundle = ModelBundle::new(&config.model, config.seed)?;
        bundle.stage = 1;
        Ok(Trainer {
            config: config.clone(),
            bundle,
            losses: Losses::new(config.losses.clone())?,
            state: TrainState::new(config),
        })
    }

    pub fn stage(&self) -> Stage {
        self.state.progress.stage
    }

    /// Switches to stage 2. `stage1_checkpoint` names the checkpoint that
    /// holds the finished stage-1 weights.
    pub fn begin_stage2(&mut self, stage1_checkpoint: Option<String>) {
        let p = &mut self.state.progress;
        p.stage = Stage::Two;
        p.epoch = 0;
        p.batch = 0;
        p.stage_step = 0;
        p.stage1_checkpoint = stage1_checkpoint;
        self.bundle.stage = 2;
    }

    fn inputs(tape: &Tape<f32>, batch: &Batch) -> (Var<f32>, Var<f32>, Var<f32>, Var<f32>) {
        (
            tape.constant(batch.images.clone()),
            tape.constant(batch.masked_images()),
            tape.constant(batch.lines.clone()),
            tape.constant(batch.masks.clone()),
        )
    }

    /// The image the discriminator judges: G1's raw output in stage 1, the
    /// composite of G2's output in stage 2.
    fn generate(&self, tape: &Tape<f32>, batch: &Batch, stage: Stage, trainable: bool) -> Result<Var<f32>> {
        let (real, masked, line, mask) = Self::inputs(tape, batch);
        let coarse = self.bundle.g1.srn_forward(tape, trainable, &masked, &line, &mask)?.image;
        match stage {
            Stage::One => Ok(coarse),
            Stage::Two => {
                let refined = self.bundle.g2.ccn_forward(tape, trainable, &coarse, &mask)?.image;
                composite_var(&refined, &real, &mask)
            }
        }
    }

    fn d_loss_on(&self, tape: &Tape<f32>, trainable: bool, real: &ArrayD<f32>, fake: &ArrayD<f32>) -> Result<Var<f32>> {
        let r = self.bundle.d.forward(tape, trainable, &tape.constant(real.clone()))?;
        let f = self.bundle.d.forward(tape, trainable, &tape.constant(fake.clone()))?;
        Ok(d_hinge(&r, &f))
    }

    /// Hinge discriminator loss on `batch` with the current weights.
    pub fn discriminator_loss(&self, batch: &Batch, stage: Stage) -> Result<f64> {
        let tape = Tape::inference();
        let fake = self.generate(&tape, batch, stage, false)?.value();
        Ok(self.d_loss_on(&tape, false, &batch.images, &fake)?.item() as f64)
    }

    fn update_d(&mut self, real: &ArrayD<f32>, fake: &ArrayD<f32>) -> Result<f64> {
        let tape = Tape::new();
        let loss = self.d_loss_on(&tape, true, real, fake)?;
        let v = loss.item() as f64;
        check_finite("discriminator", v, self.state.progress.step + 1)?;
        let grads = split_grads(tape.backward(&loss)?.into_params(), &self.bundle.d.params);
        self.state.opt_d.step(&mut self.bundle.d.params, &grads)?;
        self.bundle.d.update_spectral()?;
        Ok(v)
    }

    /// One discriminator update with the generators frozen. Returns the
    /// loss before the update.
    pub fn d_step(&mut self, batch: &Batch, stage: Stage) -> Result<f64> {
        let tape = Tape::inference();
        let fake = self.generate(&tape, batch, stage, false)?.value();
        self.update_d(&batch.images, &fake)
    }

    fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.stage() != stage {
            return Err(Error::Config(format!(
                "a stage {stage} step was requested while training is in stage {}",
                self.stage()
            )));
        }
        Ok(())
    }

    /// D update on (real, G1 output), then a G1 update on the full frame.
    pub fn stage1_step(&mut self, batch: &Batch) -> Result<LossReport> {
        self.require_stage(Stage::One)?;
        self.step(batch, Stage::One)
    }

    /// D update on (real, composite), then a joint G1 + G2 update with
    /// reconstruction terms on the composite and L1 over the hole.
    pub fn stage2_step(&mut self, batch: &Batch) -> Result<LossReport> {
        self.require_stage(Stage::Two)?;
        self.step(batch, Stage::Two)
    }

    fn step(&mut self, batch: &Batch, stage: Stage) -> Result<LossReport> {
        let step = self.state.progress.step + 1;
        let tape = Tape::new();
        let fake = self.generate(&tape, batch, stage, true)?;
        let d_loss = self.update_d(&batch.images, &fake.value())?;

        let real = tape.constant(batch.images.clone());
        let region = match stage {
            Stage::One => None,
            Stage::Two => Some(tape.constant(batch.masks.clone())),
        };
        let mut terms: LossTerms<Var<f32>> = self.losses.reconstruction(&tape, &fake, &real, region.as_ref(), stage)?;
        terms.adversarial = g_hinge(&self.bundle.d.forward(&tape, false, &fake)?);
        let cfg = self.config.losses.for_stage(stage);
        let total = generator_total_var(&terms, stage, &cfg, step)?;
        let grads = tape.backward(&total)?.into_params();
        let g2_grads = split_grads(grads.clone(), &self.bundle.g2.params);
        let g1_grads = split_grads(grads, &self.bundle.g1.params);
        self.state.opt_g1.step(&mut self.bundle.g1.params, &g1_grads)?;
        if stage == Stage::Two {
            self.state.opt_g2.step(&mut self.bundle.g2.params, &g2_grads)?;
        }

        let values = terms.values();
        let p = &mut self.state.progress;
        p.step = step;
        p.stage_step += 1;
        Ok(LossReport {
            stage,
            step,
            adversarial: values.adversarial,
            content: values.content,
            style: values.style,
            l1: values.l1,
            histogram: values.histogram,
            total: total.item() as f64,
            d_loss,
            coefficients: cfg.coefficients(stage)?,
            discriminator_id: self.bundle.d.params.id(),
            lr_g: self.config.lr_g,
            lr_d: self.config.lr_d,
        })
    }

    /// Composite PSNR/SSIM of the current model on `samples`.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<SetMetrics> {
        evaluate_samples(&self.bundle, samples)
    }

    // ---- checkpoints ------------------------------------------------------

    fn checkpoint_tensors(&self) -> Vec<(String, &ArrayD<f32>)> {
        let mut out = self.bundle.tensors();
        for (net, opt) in self.state.optimizers() {
            for (kind, map) in [("m", &opt.state.m), ("v", &opt.state.v)] {
                out.extend(map.iter().map(|(k, v)| (format!("opt.{net}.{kind}.{k}"), v)));
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = self.checkpoint_tensors();
        let mut meta = self.bundle.metadata();
        let opt_steps: BTreeMap<&str, u64> = self
            .state
            .optimizers()
            .iter()
            .map(|(n, o)| (*n, o.state.step))
            .collect();
        meta.extend([
            ("kind".to_string(), CHECKPOINT_KIND.to_string()),
            ("train_config".to_string(), self.config.to_json()),
            ("train_fingerprint".to_string(), self.config.fingerprint()),
            (
                "progress".to_string(),
                serde_json::to_string(&self.state.progress).map_err(|e| Error::Serde(e.to_string()))?,
            ),
            (
                "optimizer_steps".to_string(),
                serde_json::to_string(&opt_steps).map_err(|e| Error::Serde(e.to_string()))?,
            ),
            (
                "state_sha256".to_string(),
                archive::weights_digest(tensors.iter().map(|(k, v)| (k.as_str(), *v))),
            ),
        ]);
        archive::write(path, &meta, &tensors)
    }

    /// Restores a run from a training checkpoint. The checkpoint's config
    /// must match `config` exactly.
    pub fn from_checkpoint(path: &Path, config: &TrainConfig) -> Result<Self> {
        let arc = archive::read(path)?;
        Self::from_archive(&arc, config).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn from_archive(arc: &Archive, config: &TrainConfig) -> Result<Self> {
        let meta = |k: &str| {
            arc.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("not a training checkpoint (missing `{k}`)")))
        };
        if meta("kind")? != CHECKPOINT_KIND {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let stored = meta("train_fingerprint")?;
        let current = config.fingerprint();
        if *stored != current {
            let old: serde_json::Value =
                serde_json::from_str(meta("train_config")?).map_err(|e| Error::Checkpoint(format!("train_config: {e}")))?;
            let new: serde_json::Value = serde_json::from_str(&config.to_json()).expect("config is valid JSON");
            return Err(Error::FingerprintMismatch {
                stored: stored.clone(),
                current,
                diff: config_diff(&old, &new).join("; "),
            });
        }
        let digest = archive::weights_digest(arc.tensors.iter().map(|(k, v)| (k.as_str(), v)));
        if *meta("state_sha256")? != digest {
            return Err(Error::Checkpoint(format!(
                "state fingerprint mismatch: stored {}, computed {digest}",
                meta("state_sha256")?
            )));
        }
        let mut trainer = Trainer::new(config)?;
        trainer.bundle = ModelBundle::from_archive(arc)?;
        trainer.state.progress =
            serde_json::from_str(meta("progress")?).map_err(|e| Error::Checkpoint(format!("progress: {e}")))?;
        let steps: BTreeMap<String, u64> =
            serde_json::from_str(meta("optimizer_steps")?).map_err(|e| Error::Checkpoint(format!("optimizer_steps: {e}")))?;
        for (net, opt) in trainer.state.optimizers_mut() {
            let mut state = AdamState {
                step: steps.get(net).copied().unwrap_or(0),
                ..AdamState::default()
            };
            for (name, t) in &arc.tensors {
                if let Some(rest) = name.strip_prefix(&format!("opt.{net}.")) {
                    if let Some(k) = rest.strip_prefix("m.") {
                        state.m.insert(k.to_string(), t.clone());
                    } else if let Some(k) = rest.strip_prefix("v.") {
                        state.v.insert(k.to_string(), t.clone());
                    }
                }
            }
            opt.state = state;
        }
        Ok(trainer)
    }
}

/// Composite metrics of `bundle` on `samples` in chunks of eight.
pub fn evaluate_samples(bundle: &ModelBundle, samples: &[Sample]) -> Result<SetMetrics> {
    let (mut psnr_sum, mut finite, mut ssim_sum, mut identical) = (0.0, 0usize, 0.0, 0usize);
    for chunk in samples.chunks(8) {
        let outs = bundle.inpaint_batch(
            &chunk.iter().map(|s| &s.image).collect::<Vec<_>>(),
            &chunk.iter().map(|s| &s.line).collect::<Vec<_>>(),
            &chunk.iter().map(|s| &s.mask).collect::<Vec<_>>(),
        )?;
        for (out, s) in outs.iter().zip(chunk) {
            let (a, b) = (out.composite.to_unit(), s.image.to_unit());
            let p = psnr_from_mse(crate::evaluation::mse(&a, &b)?);
            if p.is_finite() {
                psnr_sum += p;
                finite += 1;
            } else {
                identical += 1;
            }
            ssim_sum += ssim(&a, &b)?;
        }
    }
    Ok(SetMetrics {
        psnr: (finite > 0).then(|| psnr_sum / finite as f64),
        ssim: ssim_sum / samples.len().max(1) as f64,
        identical,
        count: samples.len(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Checkpoint and return once this global step has been taken.
    pub stop_after_step: Option<u64>,
    /// Skip per-epoch validation.
    pub skip_validation: bool,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub reports: Vec<LossReport>,
    pub validation: Vec<ValidationRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Whether both stages ran to completion.
    pub finished: bool,
}

struct RunLog {
    file: std::fs::File,
    path: PathBuf,
}

impl RunLog {
    fn open(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunLog { file, path })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Loads the manifest's splits and runs [`train_on`].
pub fn train(manifest: &DatasetManifest, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    train_on(&TrainingData::load(manifest, config)?, config, opts)
}

/// Runs (or resumes) the two-stage schedule.
pub fn train_on(data: &TrainingData, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let ckpt_dir = opts.out_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::from_checkpoint(path, config)?,
        None => Trainer::new(config)?,
    };
    trainer.bundle.dataset_fingerprint = data.dataset_fingerprint().map(str::to_string);
    let mut log = RunLog::open(opts.out_dir.join(LOG_FILE))?;
    let validation_set = if opts.skip_validation || data.val_len() == 0 {
        Vec::new()
    } else {
        data.validation_samples()?
    };
    let (mut reports, mut validation, mut checkpoints) = (Vec::new(), Vec::new(), Vec::new());
    let mut last_checkpoint = opts.resume.clone();
    let save = |trainer: &Trainer, checkpoints: &mut Vec<PathBuf>, last: &mut Option<PathBuf>| -> Result<()> {
        let path = ckpt_dir.join(format!("step-{:08}.safetensors", trainer.state.progress.step));
        trainer.save_checkpoint(&path)?;
        if !checkpoints.contains(&path) {
            checkpoints.push(path.clone());
        }
        *last = Some(path);
        Ok(())
    };

    for stage in [Stage::One, Stage::Two] {
        if trainer.stage() > stage {
            continue;
        }
        let sched = config.schedule(stage);
        while trainer.state.progress.epoch < sched.epochs {
            let epoch = trainer.state.progress.epoch;
            let batches = data.epoch_batches(stage, epoch, sched.batch);
            while trainer.state.progress.batch < batches.len() {
                let batch = data.batch(&batches[trainer.state.progress.batch], stage, epoch)?;
                let report = match trainer.step(&batch, stage) {
                    Ok(r) => r,
                    Err(e @ Error::NonFinite { .. }) => {
                        let diag = ckpt_dir.join(format!("diagnostic-step-{:08}.safetensors", trainer.state.progress.step + 1));
                        trainer.save_checkpoint(&diag)?;
                        log::error!("{e}; diagnostic checkpoint at {}", diag.display());
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                trainer.state.progress.batch += 1;
                log.write(&LogRecord::Step {
                    timestamp: now(),
                    report: &report,
                })?;
                let step = report.step;
                reports.push(report);
                let every = config.checkpoint.every_steps;
                if (every > 0 && step % every == 0) || opts.stop_after_step == Some(step) {
                    save(&trainer, &mut checkpoints, &mut last_checkpoint)?;
                }
                if opts.stop_after_step == Some(step) {
                    return Ok(TrainOutcome {
                        trainer,
                        reports,
                        validation,
                        checkpoints,
                        finished: false,
                    });
                }
            }
            let p = &mut trainer.state.progress;
            p.epoch += 1;
            p.batch = 0;
            if !validation_set.is_empty() {
                let metrics = trainer.evaluate(&validation_set)?;
                let p = &mut trainer.state.progress;
                if let Some(v) = metrics.psnr {
                    p.best_val_psnr = Some(p.best_val_psnr.map_or(v, |b| b.max(v)));
                }
                p.best_val_ssim = Some(p.best_val_ssim.map_or(metrics.ssim, |b| b.max(metrics.ssim)));
                let record = ValidationRecord {
                    stage,
                    epoch: p.epoch,
                    step: p.step,
                    metrics,
                };
                log::info!("stage {stage} epoch {}: validation {:?}", record.epoch, record.metrics);
                log.write(&LogRecord::Validation {
                    timestamp: now(),
                    record: &record,
                })?;
                validation.push(record);
            }
            let every = config.checkpoint.every_epochs;
            let stage_done = trainer.state.progress.epoch == sched.epochs;
            if (every > 0 && trainer.state.progress.epoch % every == 0) || stage_done {
                save(&trainer, &mut checkpoints, &mut last_checkpoint)?;
            }
        }
        if stage == Stage::One {
            trainer.begin_stage2(last_checkpoint.as_ref().map(|p| p.display().to_string()));
        }
    }
    trainer.bundle.save(&opts.out_dir.join(FINAL_MODEL))?;
    Ok(TrainOutcome {
        trainer,
        reports,
        validation,
        checkpoints,
        finished: true,
    })
}
