//! The three evaluation settings: zero-shot transfer with prompt
//! ensembling, linear probing of frozen features, and end-to-end
//! finetuning with layerwise learning-rate decay.
//!
//! Zero-shot builds one exemplar embedding per class by averaging the
//! (normalized) text embeddings of every filled prompt template, then
//! classifies by cosine similarity. The probe trains only a linear
//! layer on frozen pre-projection encoder features. Finetuning opens
//! all image-encoder weights with exponentially smaller learning rates
//! for earlier layers.

use crate::datapipe::{bpe_encode, BpeVocab, DataError};
use crate::encoders::{trunc_normal, EncoderError, ParamKind, SlipModel, VitEncoder};
use crate::objectives::NORM_EPS;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::trainer::{
    adamw_step_scaled, cosine_lr, layerwise_lr_scale, AdamState, OptimConfig, ParamSet, TrainError,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("eval config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Class exemplars in the shared embedding space; rows are unit-norm.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier {
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    pub class_embeddings: Tensor<f32>,
}

fn validate_templates(templates: &[String]) -> Result<()> {
    if templates.is_empty() {
        return Err(EvalError::Config("no prompt templates".into()));
    }
    for t in templates {
        if t.matches("{}").count() != 1 {
            return Err(EvalError::Config(format!(
                "template {t:?} must contain exactly one {{}} slot"
            )));
        }
    }
    Ok(())
}

/// Fills every template for every class, embeds the prompts, and
/// averages per class. With `normalize_before_average` (the default
/// convention) each prompt embedding is unit-normalized before the mean;
/// the mean is re-normalized either way.
pub fn build_zeroshot_classifier(
    model: &SlipModel,
    class_names: &[String],
    templates: &[String],
    vocab: &BpeVocab,
    normalize_before_average: bool,
) -> Result<ZeroShotClassifier> {
    validate_templates(templates)?;
    if class_names.is_empty() {
        return Err(EvalError::Config("no class names".into()));
    }
    let context = model.text.cfg.context_length;
    let seqs: Vec<_> = class_names
        .iter()
        .flat_map(|name| {
            templates
                .iter()
                .map(|t| bpe_encode(&t.replace("{}", name), vocab, context))
        })
        .collect();
    let wt = model.text_encode(&seqs)?;
    let zt = wt.matmul(&model.clip_text_proj)?;
    let zt = if normalize_before_average {
        zt.l2_normalize(NORM_EPS)?
    } else {
        zt
    };
    let (k, t, d) = (class_names.len(), templates.len(), zt.shape()[1]);
    let mut rows = vec![0.0f32; k * d];
    for c in 0..k {
        for ti in 0..t {
            let row = &zt.data()[(c * t + ti) * d..(c * t + ti + 1) * d];
            for j in 0..d {
                rows[c * d + j] += row[j] / t as f32;
            }
        }
    }
    let class_embeddings = Tensor::from_vec(vec![k, d], rows)?.l2_normalize(NORM_EPS)?;
    Ok(ZeroShotClassifier {
        class_names: class_names.to_vec(),
        templates: templates.to_vec(),
        class_embeddings,
    })
}

/// Cosine-similarity argmax over class exemplars; ties break to the
/// lowest class index.
pub fn zeroshot_predict(
    classifier: &ZeroShotClassifier,
    images: &Tensor<f32>,
    model: &SlipModel,
) -> Result<Vec<usize>> {
    let wi = model.image_encode(images)?;
    let zi = wi.matmul(&model.clip_image_proj)?;
    if zi.shape()[1] != classifier.class_embeddings.shape()[1] {
        return Err(EvalError::Tensor(TensorError::ShapeMismatch {
            op: "zeroshot_predict",
            lhs: zi.shape().to_vec(),
            rhs: classifier.class_embeddings.shape().to_vec(),
        }));
    }
    let zi = zi.l2_normalize(NORM_EPS)?;
    let sims = zi.matmul(&classifier.class_embeddings.transpose2()?)?;
    let k = classifier.class_names.len();
    Ok(sims
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Labeled evaluation batch for zero-shot scoring (and the in-training
/// monitor).
pub struct ZeroShotData {
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    /// `[B,S,S,3]` eval-transformed images.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

pub fn zero_shot_accuracy(model: &SlipModel, data: &ZeroShotData, vocab: &BpeVocab) -> Result<f64> {
    if data.labels.is_empty() {
        return Err(EvalError::Config("empty zero-shot eval set".into()));
    }
    let classifier =
        build_zeroshot_classifier(model, &data.class_names, &data.templates, vocab, true)?;
    let preds = zeroshot_predict(&classifier, &data.images, model)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.labels.len() as f64)
}

/// Frozen pre-projection encoder features (what the probe consumes).
pub fn extract_features(model: &SlipModel, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(model.image_encode(images)?)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Must stay 0; the probe recipe forbids weight decay.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Crop+flip re-extraction per epoch (off at desk scale by default).
    pub augmentation: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 64,
            augmentation: false,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight_decay != 0.0 {
            return Err(EvalError::Config("the linear probe runs without weight decay".into()));
        }
        if self.lr <= 0.0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(EvalError::Config("probe lr/epochs/batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Classes that appear in the test labels but never in training;
    /// their samples can only score as errors.
    pub missing_train_classes: Vec<usize>,
}

/// Trains a single linear layer with SGD + momentum on cross-entropy
/// over frozen features and reports test top-1.
pub fn linear_probe(
    features_train: &Tensor<f32>,
    labels_train: &[usize],
    features_test: &Tensor<f32>,
    labels_test: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    let n = features_train.shape()[0];
    let d = features_train.shape()[1];
    if labels_train.len() != n || labels_test.len() != features_test.shape()[0] {
        return Err(EvalError::Config("feature/label counts disagree".into()));
    }
    let k = labels_train
        .iter()
        .chain(labels_test.iter())
        .copied()
        .max()
        .map_or(0, |m| m + 1);
    if k < 2 {
        return Err(EvalError::Config("need at least two classes".into()));
    }
    let missing_train_classes: Vec<usize> = (0..k)
        .filter(|c| labels_test.contains(c) && !labels_train.contains(c))
        .collect();

    let mut w = Tensor::zeros(vec![d, k]);
    let mut b = Tensor::zeros(vec![k]);
    let mut vel_w = vec![0.0f32; d * k];
    let mut vel_b = vec![0.0f32; k];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = crate::rng::stream(cfg.seed, "probe", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rand::Rng::random_range(&mut rng, 0..=i));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut feats = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                feats.extend_from_slice(&features_train.data()[i * d..(i + 1) * d]);
                labels.push(labels_train[i]);
            }
            let x = Tensor::from_vec(vec![chunk.len(), d], feats)?;
            let tape = Tape::new();
            let wl = tape.leaf(&w)?;
            let bl = tape.leaf(&b)?;
            let logits = x.matmul(&wl)?.add_broadcast(&bl)?;
            let loss = logits.cross_entropy_logits(&labels)?;
            let grads = loss.backward()?;
            let gw = grads.get_or_zero(&wl);
            let gb = grads.get_or_zero(&bl);
            let lr = cfg.lr as f32;
            let mu = cfg.momentum as f32;
            let mut new_w = w.data().to_vec();
            for (i, (&g, p)) in gw.data().iter().zip(new_w.iter_mut()).enumerate() {
                vel_w[i] = mu * vel_w[i] + g;
                *p -= lr * vel_w[i];
            }
            let mut new_b = b.data().to_vec();
            for (i, (&g, p)) in gb.data().iter().zip(new_b.iter_mut()).enumerate() {
                vel_b[i] = mu * vel_b[i] + g;
                *p -= lr * vel_b[i];
            }
            w = Tensor::from_vec(vec![d, k], new_w)?;
            b = Tensor::from_vec(vec![k], new_b)?;
        }
    }

    let logits = features_test.matmul(&w)?.add_broadcast(&b)?;
    let correct = logits
        .data()
        .chunks_exact(k)
        .zip(labels_test)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / labels_test.len().max(1) as f64,
        missing_train_classes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Exponential layerwise decay; 1.0 reduces to uniform finetuning.
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Learning-rate multiplier on the encoder (0 freezes everything
    /// but the head).
    pub encoder_lr_mult: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            base_lr: 1e-3,
            layer_decay: 0.65,
            weight_decay: 0.05,
            batch_size: 32,
            warmup_fraction: 0.1,
            seed: 0,
            encoder_lr_mult: 1.0,
        }
    }
}

/// Image encoder plus a fresh classification head; the unit the
/// finetune recipe optimizes.
pub struct FinetuneModel {
    pub image: VitEncoder,
    pub head_w: Tensor<f32>,
    pub head_b: Tensor<f32>,
}

impl ParamSet for FinetuneModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f32>, ParamKind)) {
        use ParamKind::*;
        f("image.patch.w", &self.image.patch_w, Weight);
        f("image.patch.b", &self.image.patch_b, Bias);
        f("image.cls", &self.image.cls, Weight);
        f("image.pos", &self.image.pos, Weight);
        for (i, b) in self.image.blocks.iter().enumerate() {
            for (suffix, t, kind) in b.params() {
                f(&format!("image.blocks.{i}.{suffix}"), t, kind);
            }
        }
        f("image.ln_f.g", &self.image.lnf_g, Gain);
        f("image.ln_f.b", &self.image.lnf_b, Bias);
        f("head.w", &self.head_w, Weight);
        f("head.b", &self.head_b, Bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>, ParamKind)) {
        use ParamKind::*;
        f("image.patch.w", &mut self.image.patch_w, Weight);
        f("image.patch.b", &mut self.image.patch_b, Bias);
        f("image.cls", &mut self.image.cls, Weight);
        f("image.pos", &mut self.image.pos, Weight);
        for (i, b) in self.image.blocks.iter_mut().enumerate() {
            for (suffix, t, kind) in b.params_mut() {
                f(&format!("image.blocks.{i}.{suffix}"), t, kind);
            }
        }
        f("image.ln_f.g", &mut self.image.lnf_g, Gain);
        f("image.ln_f.b", &mut self.image.lnf_b, Bias);
        f("head.w", &mut self.head_w, Weight);
        f("head.b", &mut self.head_b, Bias);
    }
}

impl FinetuneModel {
    fn attach(&self, tape: &Tape<f32>) -> crate::tensor::Result<FinetuneModel> {
        let mut f = |t: &Tensor<f32>| tape.leaf(t);
        Ok(FinetuneModel {
            image: VitEncoder {
                cfg: self.image.cfg.clone(),
                patch_w: f(&self.image.patch_w)?,
                patch_b: f(&self.image.patch_b)?,
                cls: f(&self.image.cls)?,
                pos: f(&self.image.pos)?,
                blocks: self
                    .image
                    .blocks
                    .iter()
                    .map(|b| b.map(&mut f))
                    .collect::<crate::tensor::Result<_>>()?,
                lnf_g: f(&self.image.lnf_g)?,
                lnf_b: f(&self.image.lnf_b)?,
            },
            head_w: f(&self.head_w)?,
            head_b: f(&self.head_b)?,
        })
    }
}

/// Labeled image set for probe / finetune, already eval-transformed.
pub struct LabeledImages {
    /// `[N,S,S,3]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    fn batch(&self, order: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.shape()[1];
        let stride = s * s * 3;
        let mut data = Vec::with_capacity(order.len() * stride);
        let mut labels = Vec::with_capacity(order.len());
        for &i in order {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(vec![order.len(), s, s, 3], data).expect("batch shape"),
            labels,
        )
    }
}

/// End-to-end finetuning: all image-encoder weights train under
/// AdamW + cosine schedule with per-parameter layerwise multipliers;
/// reports test top-1.
pub fn finetune(
    model: &SlipModel,
    train: &LabeledImages,
    test: &LabeledImages,
    cfg: &FinetuneConfig,
) -> Result<f64> {
    if train.labels.is_empty() || test.labels.is_empty() {
        return Err(EvalError::Config("finetune needs labeled train and test sets".into()));
    }
    let d = model.cfg.vit.width;
    let k = train.num_classes;
    let mut rng = crate::rng::stream(cfg.seed, "finetune-init", &[]);
    let mut ft = FinetuneModel {
        image: model.image.clone(),
        head_w: Tensor::from_vec(vec![d, k], trunc_normal(&mut rng, d * k, 0.02))?,
        head_b: Tensor::zeros(vec![k]),
    };

    let n = train.labels.len();
    let steps_per_epoch = (n / cfg.batch_size.min(n)).max(1) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let warmup = ((total as f64) * cfg.warmup_fraction) as u64;
    let optim = OptimConfig {
        weight_decay: cfg.weight_decay,
        ..OptimConfig::default()
    };
    let depth = ft.image.cfg.depth;

    let mut state = AdamState::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = crate::rng::stream(cfg.seed, "finetune", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rand::Rng::random_range(&mut rng, 0..=i));
        }
        for chunk in order.chunks(cfg.batch_size.min(n)) {
            if chunk.len() < cfg.batch_size.min(n) {
                continue; // drop ragged tail for schedule stability
            }
            let (views, labels) = train.batch(chunk);
            let lr = cosine_lr(step.min(total), total.max(1), warmup, cfg.base_lr, 0.0)?;
            let tape = Tape::new();
            let attached = ft.attach(&tape)?;
            let feats = attached.image.encode(&views)?;
            let logits = feats.matmul(&attached.head_w)?.add_broadcast(&attached.head_b)?;
            let loss = logits.cross_entropy_logits(&labels)?;
            if !loss.item().is_finite() {
                return Err(EvalError::Train(TrainError::NonFiniteLoss {
                    step,
                    total: loss.item(),
                }));
            }
            let grads = loss.backward()?;
            let mut grad_map: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            attached.visit(&mut |path, t, _| {
                if let Some(g) = grads.get(t) {
                    grad_map.insert(path.to_string(), g.data().to_vec());
                }
            });
            let scale = |path: &str| -> f64 {
                let base = layerwise_lr_scale(path, depth, cfg.layer_decay).unwrap_or(1.0);
                if path.starts_with("head.") {
                    base
                } else {
                    base * cfg.encoder_lr_mult
                }
            };
            adamw_step_scaled(&mut ft, &grad_map, &mut state, lr, &scale, &optim)?;
            step += 1;
        }
    }

    // test top-1
    let mut correct = 0usize;
    let total_test = test.labels.len();
    for chunk in (0..total_test).collect::<Vec<_>>().chunks(cfg.batch_size.max(1)) {
        let (views, labels) = test.batch(chunk);
        let feats = ft.image.encode(&views)?;
        let logits = feats.matmul(&ft.head_w)?.add_broadcast(&ft.head_b)?;
        let kk = ft.head_b.len();
        for (row, &label) in logits.data().chunks_exact(kk).zip(&labels) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total_test as f64)
}
