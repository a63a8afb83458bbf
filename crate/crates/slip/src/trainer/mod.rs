//! The optimization loop.
//!
//! One logical thread owns the model and optimizer. Every step builds
//! its batch from `(seed, step)` alone, runs one differentiable forward
//! on a fresh tape, accumulates gradients across micro-batches when
//! configured, applies AdamW under the cosine schedule, and clamps the
//! logit scale. Combined with checkpoints that carry the optimizer
//! moments and the root seed, a killed run resumes bit-exactly.

mod checkpoint;
mod optim;

pub use checkpoint::{
    load_checkpoint, load_image_encoder, save_checkpoint, CheckpointError, CheckpointMeta,
};
pub use optim::{adamw_step, adamw_step_scaled, cosine_lr, layerwise_lr_scale, AdamState, OptimConfig};

use crate::datapipe::{
    make_batch, AugmentConfig, BatchCtx, BatchMode, BpeVocab, Corpus, DataError, EpochSampler,
    TokenSequence, ViewBundle,
};
use crate::encoders::{EncoderError, ParamKind, SlipModel};
use crate::objectives::{clip_loss, simclr_loss, slip_loss_simclr, EmbeddingBundle, SlipLossConfig, NORM_EPS};
use crate::tensor::{Tape, Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (total = {total})")]
    NonFiniteLoss { step: u64, total: f32 },
    #[error("NaN gradient in parameter {param} at optimizer step {step}")]
    NanGradient { param: String, step: u64 },
    #[error("no layerwise depth mapping for parameter {0}")]
    UnknownParamPath(String),
    #[error("training contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A named, kinded set of trainable tensors; what the optimizer walks.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f32>, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>, ParamKind));
}

impl ParamSet for SlipModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f32>, ParamKind)) {
        self.visit_params(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>, ParamKind)) {
        self.visit_params_mut(f);
    }
}

/// Pre-training objective/mode matrix. `SslThenClip` is a two-phase
/// composition the harness drives via [`load_image_encoder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Slip,
    Clip,
    Simclr,
    Decoupled,
    SslThenClip,
}

impl TrainMode {
    pub fn batch_mode(self) -> BatchMode {
        match self {
            TrainMode::Slip => BatchMode::Slip,
            TrainMode::Clip => BatchMode::ClipOnly,
            TrainMode::Simclr => BatchMode::SslOnly,
            TrainMode::Decoupled => BatchMode::Decoupled,
            TrainMode::SslThenClip => BatchMode::SslOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub total_loss: f32,
    pub clip_loss: f32,
    pub ssl_loss: f32,
    pub logit_scale: f32,
    /// In-batch image-to-text retrieval top-1, when the mode has a
    /// language-image branch.
    pub in_batch_top1: Option<f32>,
}

/// Stacks per-example `[S,S,3]` views into `[B,S,S,3]`.
pub fn stack_views(views: &[&Tensor<f32>]) -> Result<Tensor<f32>, TrainError> {
    let first = views
        .first()
        .ok_or_else(|| TrainError::Contract("empty view stack".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(views.len() * first.len());
    for v in views {
        if v.shape() != shape {
            return Err(TrainError::Contract("ragged view shapes in batch".into()));
        }
        data.extend_from_slice(v.data());
    }
    let mut out_shape = vec![views.len()];
    out_shape.extend(shape);
    Ok(Tensor::from_vec(out_shape, data)?)
}

/// Fraction of rows whose best-matching text is their own pair.
pub fn in_batch_retrieval_top1(zi: &Tensor<f32>, zt: &Tensor<f32>) -> f32 {
    let n = zi.shape()[0];
    let zi = zi.l2_normalize(NORM_EPS).expect("retrieval shapes");
    let zt = zt.l2_normalize(NORM_EPS).expect("retrieval shapes");
    let sims = zi.matmul(&zt.transpose2().expect("2d")).expect("matmul");
    let mut hits = 0usize;
    for (i, row) in sims.data().chunks_exact(n).enumerate() {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == i {
            hits += 1;
        }
    }
    hits as f32 / n as f32
}

struct ForwardOut {
    total: Tensor<f32>,
    clip: f32,
    ssl: f32,
    retrieval: Option<f32>,
}

fn collect<'a>(
    batch: &'a [ViewBundle],
    get: impl Fn(&'a ViewBundle) -> Option<&'a Tensor<f32>>,
    what: &str,
) -> Result<Vec<&'a Tensor<f32>>, TrainError> {
    batch
        .iter()
        .map(|b| get(b).ok_or_else(|| TrainError::Contract(format!("batch is missing {what} views"))))
        .collect()
}

fn forward_batch(
    model: &SlipModel,
    batch: &[ViewBundle],
    mode: TrainMode,
    cfg: &SlipLossConfig,
) -> Result<ForwardOut, TrainError> {
    let b = batch.len();
    match mode {
        TrainMode::Clip => {
            let xi = stack_views(&collect(batch, |v| v.x_i.as_ref(), "global")?)?;
            let seqs: Vec<TokenSequence> = batch
                .iter()
                .map(|v| v.y_t.clone().ok_or_else(|| TrainError::Contract("missing captions".into())))
                .collect::<Result<_, _>>()?;
            let wi = model.image_encode(&xi)?;
            let wt = model.text_encode(&seqs)?;
            let (zi, zt) = model.project_clip(&wi, &wt)?;
            let loss = clip_loss(&zi, &zt, &model.log_logit_scale)?;
            let retrieval = in_batch_retrieval_top1(&zi.detach(), &zt.detach());
            Ok(ForwardOut {
                clip: loss.item(),
                ssl: 0.0,
                total: loss,
                retrieval: Some(retrieval),
            })
        }
        TrainMode::Simclr | TrainMode::SslThenClip => {
            let mut views = collect(batch, |v| v.x_1.as_ref(), "ssl")?;
            views.extend(collect(batch, |v| v.x_2.as_ref(), "ssl")?);
            let w = model.image_encode(&stack_views(&views)?)?;
            let w1 = w.narrow0(0, b)?;
            let w2 = w.narrow0(b, b)?;
            let (z1, z2) = model.project_ssl(&w1, &w2)?;
            let loss = simclr_loss(&z1, &z2, cfg.simclr_temperature, cfg.mask_magnitude)?;
            Ok(ForwardOut {
                ssl: loss.item(),
                clip: 0.0,
                total: loss,
                retrieval: None,
            })
        }
        TrainMode::Slip | TrainMode::Decoupled => {
            let mut views = collect(batch, |v| v.x_i.as_ref(), "global")?;
            views.extend(collect(batch, |v| v.x_1.as_ref(), "ssl")?);
            views.extend(collect(batch, |v| v.x_2.as_ref(), "ssl")?);
            let w = model.image_encode(&stack_views(&views)?)?;
            let wi = w.narrow0(0, b)?;
            let w1 = w.narrow0(b, b)?;
            let w2 = w.narrow0(2 * b, b)?;
            let seqs: Vec<TokenSequence> = batch
                .iter()
                .map(|v| v.y_t.clone().ok_or_else(|| TrainError::Contract("missing captions".into())))
                .collect::<Result<_, _>>()?;
            let wt = model.text_encode(&seqs)?;
            let (zi, zt) = model.project_clip(&wi, &wt)?;
            let (z1, z2) = model.project_ssl(&w1, &w2)?;
            let retrieval = in_batch_retrieval_top1(&zi.detach(), &zt.detach());
            let bundle = EmbeddingBundle {
                zi,
                zt,
                z1,
                z2,
                log_logit_scale: model.log_logit_scale.clone(),
            };
            let out = slip_loss_simclr(&bundle, cfg)?;
            Ok(ForwardOut {
                clip: out.clip_part.item(),
                ssl: out.ssl_part.item(),
                total: out.total,
                retrieval: Some(retrieval),
            })
        }
    }
}

/// Everything a training run reads each step.
pub struct Trainer<'a> {
    pub model: SlipModel,
    pub opt_state: AdamState,
    pub optim: OptimConfig,
    pub loss_cfg: SlipLossConfig,
    pub mode: TrainMode,
    pub corpus: &'a Corpus,
    pub ssl_corpus: Option<&'a Corpus>,
    pub vocab: &'a BpeVocab,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Next step index to execute.
    pub step: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    sampler: EpochSampler,
    ssl_sampler: Option<EpochSampler>,
}

impl<'a> Trainer<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: SlipModel,
        optim: OptimConfig,
        loss_cfg: SlipLossConfig,
        mode: TrainMode,
        corpus: &'a Corpus,
        ssl_corpus: Option<&'a Corpus>,
        vocab: &'a BpeVocab,
        augment: AugmentConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        optim.validate()?;
        loss_cfg.validate()?;
        if matches!(mode, TrainMode::Decoupled) && ssl_corpus.is_none() {
            return Err(TrainError::Data(DataError::Config(
                "decoupled mode requires an ssl manifest".into(),
            )));
        }
        let sampler = EpochSampler::new(corpus.len(), optim.batch_size, seed)?;
        let ssl_sampler = match ssl_corpus {
            Some(c) => Some(EpochSampler::with_label(c.len(), optim.batch_size, seed, "data-ssl")?),
            None => None,
        };
        let opt_steps_per_epoch = (sampler.steps_per_epoch() / optim.grad_accum_steps as u64).max(1);
        let (total_steps, warmup_steps) = optim.schedule(opt_steps_per_epoch);
        Ok(Trainer {
            model,
            opt_state: AdamState::default(),
            optim,
            loss_cfg,
            mode,
            corpus,
            ssl_corpus,
            vocab,
            augment,
            seed,
            step: 0,
            total_steps,
            warmup_steps,
            sampler,
            ssl_sampler,
        })
    }

    pub fn batch_ctx(&self) -> BatchCtx<'_> {
        BatchCtx {
            corpus: self.corpus,
            ssl_corpus: self.ssl_corpus,
            vocab: self.vocab,
            context_length: self.model.text.cfg.context_length,
            augment: &self.augment,
            mode: self.mode.batch_mode(),
            seed: self.seed,
        }
    }

    /// One optimizer step: forward/backward over `grad_accum_steps`
    /// micro-batches, averaged per example, one AdamW update, logit
    /// scale clamp.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        if self.step >= self.total_steps {
            return Err(TrainError::Contract(format!(
                "step {} past schedule end {}",
                self.step, self.total_steps
            )));
        }
        let lr = cosine_lr(
            self.step,
            self.total_steps,
            self.warmup_steps,
            self.optim.base_lr,
            self.optim.min_lr,
        )?;
        let accum = self.optim.grad_accum_steps as u64;
        let inv_accum = 1.0 / accum as f32;
        let mut grad_acc: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut total = 0.0f32;
        let mut clip = 0.0f32;
        let mut ssl = 0.0f32;
        let mut retrieval = None;

        for micro in 0..accum {
            let micro_step = self.step * accum + micro;
            let (epoch, indices) = self.sampler.batch_at(micro_step);
            let ssl_indices = if matches!(self.mode, TrainMode::Decoupled) {
                self.ssl_sampler.as_ref().map(|s| s.batch_at(micro_step).1)
            } else {
                None
            };
            let batch = make_batch(&self.batch_ctx(), epoch, &indices, ssl_indices.as_deref())?;

            let tape = Tape::new();
            let attached = self.model.attach(&tape)?;
            let out = forward_batch(&attached, &batch, self.mode, &self.loss_cfg)?;
            let loss_v = out.total.item();
            if !loss_v.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: self.step,
                    total: loss_v,
                });
            }
            total += loss_v * inv_accum;
            clip += out.clip * inv_accum;
            ssl += out.ssl * inv_accum;
            retrieval = out.retrieval.or(retrieval);

            let grads = out.total.backward()?;
            attached.visit_params(&mut |path, t, _| {
                if let Some(g) = grads.get(t) {
                    let entry = grad_acc
                        .entry(path.to_string())
                        .or_insert_with(|| vec![0.0; t.len()]);
                    for (a, &gv) in entry.iter_mut().zip(g.data()) {
                        *a += gv * inv_accum;
                    }
                }
            });
        }

        adamw_step(&mut self.model, &grad_acc, &mut self.opt_state, lr, &self.optim)?;
        self.model.clamp_logit_scale();
        let metrics = StepMetrics {
            step: self.step,
            lr,
            total_loss: total,
            clip_loss: clip,
            ssl_loss: ssl,
            logit_scale: self.model.log_logit_scale.item(),
            in_batch_top1: retrieval,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Whether the zero-shot monitor runs after `completed` steps have
/// finished. Fires on multiples of `every_n` and always at the end, so
/// an interval longer than the run still evaluates exactly once.
pub fn monitor_due(completed: u64, every_n: u64, total_steps: u64) -> bool {
    if completed == 0 {
        return false;
    }
    completed == total_steps || (every_n > 0 && completed % every_n == 0)
}

/// In-training zero-shot probe over a frozen snapshot of the model.
/// Training randomness is untouched: evaluation draws nothing from the
/// training streams.
pub fn zeroshot_monitor(
    model: &SlipModel,
    data: &crate::eval::ZeroShotData,
    vocab: &BpeVocab,
) -> Result<f64, TrainError> {
    crate::eval::zero_shot_accuracy(model, data, vocab)
        .map_err(|e| TrainError::Contract(format!("zero-shot monitor failed: {e}")))
}

/// Append-only metrics CSV with the fixed header
/// `step,lr,total_loss,clip_loss,ssl_loss,logit_scale,zshot_acc`.
pub struct MetricsWriter {
    file: fs::File,
    path: std::path::PathBuf,
}

pub const METRICS_HEADER: &str = "step,lr,total_loss,clip_loss,ssl_loss,logit_scale,zshot_acc";

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let mut file = fs::File::create(path).map_err(|e| TrainError::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| TrainError::io(path, e))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Reopens an existing log for resume, dropping any rows at or past
    /// `resume_step` (they will be re-emitted identically).
    pub fn resume(path: &Path, resume_step: u64) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let mut kept = String::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != METRICS_HEADER {
                    return Err(TrainError::Contract(format!(
                        "{} is not a metrics log",
                        path.display()
                    )));
                }
                kept.push_str(line);
                kept.push('\n');
                continue;
            }
            let step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| TrainError::Contract(format!("bad metrics row: {line}")))?;
            if step < resume_step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(path, &kept).map_err(|e| TrainError::io(path, e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| TrainError::io(path, e))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write_row(&mut self, m: &StepMetrics, zshot: Option<f64>) -> Result<(), TrainError> {
        let zs = zshot.map_or(String::new(), |v| format!("{v}"));
        writeln!(
            self.file,
            "{},{},{},{},{},{},{}",
            m.step, m.lr, m.total_loss, m.clip_loss, m.ssl_loss, m.logit_scale, zs
        )
        .map_err(|e| TrainError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.file.flush().map_err(|e| TrainError::io(&self.path, e))
    }
}
