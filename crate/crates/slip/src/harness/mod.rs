//! Experiment configuration and the command-line entry points.
//!
//! A run is described by one JSON config document (unknown keys are
//! errors, so a typo cannot silently change an experiment). All file
//! paths inside a config resolve relative to the config file itself.
//! The resolved config is written into the run directory and its hash
//! is stamped into every checkpoint, which makes a run directory
//! self-describing: resolved config + seed reproduce the metrics log
//! byte for byte.

mod suite;

pub use suite::{run_gradcheck_suite, SuiteReport, SUITE_OPS};

use crate::datapipe::{
    bpe_train, eval_transform, synth_generate, AugmentConfig, BpeVocab, Corpus, DataError,
    SynthSpec,
};
use crate::encoders::{EncoderError, ModelConfig, SlipModel};
use crate::eval::{
    extract_features, finetune, linear_probe, zero_shot_accuracy, EvalError, FinetuneConfig,
    LabeledImages, ProbeConfig, ZeroShotData,
};
use crate::objectives::SlipLossConfig;
use crate::tensor::Tensor;
use crate::trainer::{
    load_checkpoint, monitor_due, save_checkpoint, AdamState, CheckpointError,
    CheckpointMeta, MetricsWriter, OptimConfig, StepMetrics, TrainError, TrainMode, Trainer,
};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numerical abort, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Encoder(EncoderError::Config(_)) => 2,
            HarnessError::Eval(EvalError::Config(_)) => 2,
            HarnessError::Checkpoint(
                CheckpointError::FingerprintMismatch { .. } | CheckpointError::VersionMismatch { .. },
            ) => 2,
            HarnessError::Data(DataError::Config(_)) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Train(TrainError::NonFiniteLoss { .. } | TrainError::NanGradient { .. }) => 4,
            HarnessError::Train(TrainError::Data(DataError::Config(_))) => 2,
            HarnessError::Train(TrainError::Data(_)) => 3,
            HarnessError::Eval(EvalError::Train(
                TrainError::NonFiniteLoss { .. } | TrainError::NanGradient { .. },
            )) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn default_vocab_size() -> usize {
    512
}
fn default_checkpoint_every() -> u64 {
    200
}
fn default_max_eval() -> usize {
    256
}

/// Preset name or explicit architecture (exactly one must be given).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSelect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
}

impl ModelSelect {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match (&self.preset, &self.config) {
            (Some(p), None) => Ok(ModelConfig::preset(p)?),
            (None, Some(c)) => {
                c.validate()?;
                Ok(c.clone())
            }
            _ => Err(HarnessError::Config(
                "model: give exactly one of `preset` or `config`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_manifest: Option<String>,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_file: Option<String>,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub eval_manifest: String,
    pub class_names: String,
    pub templates: String,
    /// Zero-shot monitor cadence in steps; 0 disables it.
    #[serde(default)]
    pub monitor_every: u64,
    #[serde(default = "default_max_eval")]
    pub max_eval_images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: TrainMode,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelSelect,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub loss: SlipLossConfig,
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Phase-1 budget for `ssl_then_clip` (default: half the schedule).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssl_pretrain_steps: Option<u64>,
}

/// Command-line overrides applied before resolution.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub mode: Option<TrainMode>,
}

/// A config with the preset expanded, the augmentation pinned to the
/// model's image size, and all paths made absolute. This is what gets
/// written into the run directory and hashed into checkpoints.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ResolvedConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: SlipLossConfig,
    pub data: DataSection,
    pub eval: Option<EvalSection>,
    pub checkpoint_every: u64,
    pub ssl_pretrain_steps: Option<u64>,
}

fn absolutize(base: &Path, rel: &str) -> String {
    let p = Path::new(rel);
    if p.is_absolute() {
        rel.to_string()
    } else {
        base.join(p).display().to_string()
    }
}

pub fn load_experiment_config(path: &Path, overrides: &Overrides) -> Result<ResolvedConfig> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    resolve_config(cfg, path.parent().unwrap_or(Path::new(".")), overrides)
}

pub fn resolve_config(
    mut cfg: ExperimentConfig,
    base: &Path,
    overrides: &Overrides,
) -> Result<ResolvedConfig> {
    if let Some(seed) = overrides.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &overrides.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = overrides.mode {
        cfg.mode = mode;
    }
    let model = cfg.model.resolve()?;
    cfg.optim.validate()?;
    cfg.loss
        .validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    if cfg.data.vocab_size < 260 {
        return Err(HarnessError::Config(
            "data.vocab_size must be >= 260 (specials + byte alphabet + 1)".into(),
        ));
    }
    if model.text.vocab_size < cfg.data.vocab_size {
        return Err(HarnessError::Config(format!(
            "text vocab_size {} smaller than tokenizer target {}",
            model.text.vocab_size, cfg.data.vocab_size
        )));
    }
    if matches!(cfg.mode, TrainMode::Decoupled) && cfg.data.ssl_manifest.is_none() {
        return Err(HarnessError::Config(
            "decoupled mode requires data.ssl_manifest".into(),
        ));
    }
    let mut data = cfg.data.clone();
    data.manifest = absolutize(base, &data.manifest);
    data.ssl_manifest = data.ssl_manifest.map(|m| absolutize(base, &m));
    data.vocab_file = data.vocab_file.map(|m| absolutize(base, &m));
    data.augment.image_size = model.vit.image_size;
    let eval = cfg.eval.clone().map(|mut e| {
        e.eval_manifest = absolutize(base, &e.eval_manifest);
        e.class_names = absolutize(base, &e.class_names);
        e.templates = absolutize(base, &e.templates);
        e
    });
    Ok(ResolvedConfig {
        mode: cfg.mode,
        seed: cfg.seed,
        out_dir: PathBuf::from(absolutize(base, &cfg.out_dir)),
        model,
        optim: cfg.optim,
        loss: cfg.loss,
        data,
        eval,
        checkpoint_every: cfg.checkpoint_every,
        ssl_pretrain_steps: cfg.ssl_pretrain_steps,
    })
}

/// FNV-1a hash of the canonical resolved-config JSON.
pub fn config_fingerprint(cfg: &ResolvedConfig) -> u64 {
    let json = serde_json::to_string(cfg).expect("resolved config serializes");
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in json.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ---- gen-data ----

#[derive(Debug)]
pub struct GenDataOutcome {
    pub out_dir: PathBuf,
    pub train_records: usize,
    pub eval_records: usize,
    pub classes: usize,
}

/// Renders a synthetic corpus described by a [`SynthSpec`] JSON file.
pub fn cmd_gen_data(spec_path: &Path, out_dir: &Path) -> Result<GenDataOutcome> {
    let text = fs::read_to_string(spec_path).map_err(|e| HarnessError::io(spec_path, e))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", spec_path.display())))?;
    let out = synth_generate(&spec, out_dir)?;
    Ok(GenDataOutcome {
        out_dir: out_dir.to_path_buf(),
        train_records: out.train.len(),
        eval_records: out.eval.len(),
        classes: out.class_names.len(),
    })
}

// ---- shared loaders ----

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Labeled images under the deterministic eval transform; `cap = 0`
/// keeps the whole set.
pub fn load_labeled_images(
    manifest: &Path,
    class_names: &[String],
    aug: &AugmentConfig,
    cap: usize,
) -> Result<LabeledImages> {
    let corpus = Corpus::load(manifest)?;
    let labels_all = corpus.label_indices(class_names)?;
    let n = if cap == 0 { corpus.len() } else { corpus.len().min(cap) };
    if n == 0 {
        return Err(HarnessError::Config(format!("{}: empty labeled set", manifest.display())));
    }
    let s = aug.image_size;
    let mut data = Vec::with_capacity(n * s * s * 3);
    for img in corpus.images.iter().take(n) {
        data.extend_from_slice(eval_transform(img, aug).data());
    }
    Ok(LabeledImages {
        images: Tensor::from_vec(vec![n, s, s, 3], data).expect("image stack"),
        labels: labels_all[..n].to_vec(),
        num_classes: class_names.len(),
    })
}

pub fn load_zeroshot_data(
    manifest: &Path,
    class_file: &Path,
    template_file: &Path,
    aug: &AugmentConfig,
    cap: usize,
) -> Result<ZeroShotData> {
    let class_names = read_lines(class_file)?;
    if class_names.is_empty() {
        return Err(HarnessError::Config(format!("{}: no class names", class_file.display())));
    }
    let templates = read_lines(template_file)?;
    let labeled = load_labeled_images(manifest, &class_names, aug, cap)?;
    Ok(ZeroShotData {
        class_names,
        templates,
        images: labeled.images,
        labels: labeled.labels,
    })
}

fn load_or_train_vocab(cfg: &ResolvedConfig, run_dir: &Path, corpus: &Corpus) -> Result<BpeVocab> {
    if let Some(path) = &cfg.data.vocab_file {
        return Ok(BpeVocab::load(Path::new(path))?);
    }
    let run_vocab = run_dir.join("vocab.txt");
    if run_vocab.exists() {
        return Ok(BpeVocab::load(&run_vocab)?);
    }
    let vocab = bpe_train(&corpus.all_captions(), cfg.data.vocab_size)?;
    vocab.save(&run_vocab)?;
    Ok(vocab)
}

// ---- pretrain ----

struct PhasePlan {
    mode: TrainMode,
    steps: u64,
    offset: u64,
}

fn plan_phases(cfg: &ResolvedConfig, total: u64) -> Vec<PhasePlan> {
    match cfg.mode {
        TrainMode::SslThenClip => {
            let phase1 = cfg
                .ssl_pretrain_steps
                .unwrap_or(total / 2)
                .clamp(1, total.saturating_sub(1).max(1));
            vec![
                PhasePlan {
                    mode: TrainMode::Simclr,
                    steps: phase1,
                    offset: 0,
                },
                PhasePlan {
                    mode: TrainMode::Clip,
                    steps: total - phase1,
                    offset: phase1,
                },
            ]
        }
        mode => vec![PhasePlan {
            mode,
            steps: total,
            offset: 0,
        }],
    }
}

fn ckpt_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt_{step:07}.bin"))
}

/// Newest checkpoint in a run directory, by step.
pub fn latest_checkpoint(run_dir: &Path) -> Option<(u64, PathBuf)> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = fs::read_dir(run_dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok())
        {
            if best.as_ref().map_or(true, |(b, _)| step > *b) {
                best = Some((step, entry.path()));
            }
        }
    }
    best
}

pub struct PretrainOutcome {
    pub run_dir: PathBuf,
    pub total_steps: u64,
    pub final_metrics: Option<StepMetrics>,
    pub last_zeroshot: Option<f64>,
    pub fingerprint: u64,
}

/// Executes (or resumes) the configured pre-training run.
pub fn run_pretrain(cfg: &ResolvedConfig, resume: bool) -> Result<PretrainOutcome> {
    let run_dir = cfg.out_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| HarnessError::io(&run_dir, e))?;
    let fingerprint = config_fingerprint(cfg);
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    let cfg_path = run_dir.join("resolved_config.json");
    fs::write(&cfg_path, &cfg_json).map_err(|e| HarnessError::io(&cfg_path, e))?;

    let corpus = Corpus::load(Path::new(&cfg.data.manifest))?;
    if corpus.dropped > 0 {
        eprintln!("dropped {} records with no usable captions", corpus.dropped);
    }
    let ssl_corpus = match &cfg.data.ssl_manifest {
        Some(m) => Some(Corpus::load(Path::new(m))?),
        None => None,
    };
    let vocab = load_or_train_vocab(cfg, &run_dir, &corpus)?;

    let eval_data = match &cfg.eval {
        Some(e) if e.monitor_every > 0 => Some(load_zeroshot_data(
            Path::new(&e.eval_manifest),
            Path::new(&e.class_names),
            Path::new(&e.templates),
            &cfg.data.augment,
            e.max_eval_images,
        )?),
        _ => None,
    };
    let monitor_every = cfg.eval.as_ref().map_or(0, |e| e.monitor_every);

    // schedule over optimizer steps
    let micro_per_epoch = (corpus.len() / cfg.optim.batch_size) as u64;
    if micro_per_epoch == 0 {
        return Err(HarnessError::Config(format!(
            "corpus of {} records cannot fill batches of {}",
            corpus.len(),
            cfg.optim.batch_size
        )));
    }
    let opt_steps_per_epoch = (micro_per_epoch / cfg.optim.grad_accum_steps as u64).max(1);
    let (total_steps, warmup_steps) = cfg.optim.schedule(opt_steps_per_epoch);
    let phases = plan_phases(cfg, total_steps);

    // starting state
    let (mut model, mut opt_state, mut global_step) = if resume {
        let (step, path) = latest_checkpoint(&run_dir).ok_or_else(|| {
            HarnessError::Config(format!("--resume: no checkpoints under {}", run_dir.display()))
        })?;
        let (model, opt, meta) = load_checkpoint(&path, &cfg.model, fingerprint, false)?;
        debug_assert_eq!(meta.step, step);
        (model, opt, meta.step)
    } else {
        (SlipModel::init(&cfg.model, cfg.seed)?, AdamState::default(), 0)
    };

    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = if resume {
        MetricsWriter::resume(&metrics_path, global_step)?
    } else {
        MetricsWriter::create(&metrics_path)?
    };

    let mut final_metrics = None;
    let mut last_zeroshot = None;

    for phase in &phases {
        let phase_end = phase.offset + phase.steps;
        if global_step >= phase_end {
            continue;
        }
        // crossing into a later phase restarts the towers that the
        // previous phase never trained, keeping the image encoder
        if phase.offset > 0 && global_step == phase.offset {
            let mut fresh = SlipModel::init(&cfg.model, cfg.seed)?;
            fresh.image = model.image.clone();
            model = fresh;
            opt_state = AdamState::default();
        }

        let mut optim = cfg.optim.clone();
        optim.total_steps = Some(phase.steps);
        optim.warmup_steps = Some(warmup_steps.min(phase.steps.saturating_sub(1)));
        let mut trainer = Trainer::new(
            model,
            optim,
            cfg.loss.clone(),
            phase.mode,
            &corpus,
            ssl_corpus.as_ref(),
            &vocab,
            cfg.data.augment.clone(),
            cfg.seed,
        )?;
        trainer.opt_state = opt_state;
        trainer.step = global_step - phase.offset;

        while trainer.step < phase.steps {
            let mut m = trainer.step()?;
            let completed = phase.offset + trainer.step;
            m.step = completed - 1;
            let zshot = match (&eval_data, monitor_due(completed, monitor_every, total_steps)) {
                (Some(data), true) => {
                    let acc = zero_shot_accuracy(&trainer.model, data, &vocab)
                        .map_err(HarnessError::Eval)?;
                    last_zeroshot = Some(acc);
                    Some(acc)
                }
                _ => None,
            };
            metrics.write_row(&m, zshot)?;
            final_metrics = Some(m);

            let at_phase_end = completed == phase_end;
            let cadence = cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0;
            if cadence || at_phase_end || completed == total_steps {
                save_checkpoint(
                    &ckpt_path(&run_dir, completed),
                    &trainer.model,
                    &trainer.opt_state,
                    CheckpointMeta {
                        fingerprint,
                        step: completed,
                        root_seed: cfg.seed,
                    },
                )?;
            }
        }
        metrics.flush()?;
        model = trainer.model;
        opt_state = trainer.opt_state;
        global_step = phase_end;
    }

    Ok(PretrainOutcome {
        run_dir,
        total_steps,
        final_metrics,
        last_zeroshot,
        fingerprint,
    })
}

pub fn cmd_pretrain(config_path: &Path, resume: bool, overrides: &Overrides) -> Result<PretrainOutcome> {
    let cfg = load_experiment_config(config_path, overrides)?;
    run_pretrain(&cfg, resume)
}

// ---- evaluate ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: String,
    pub model: ModelSelect,
    pub vocab_file: String,
    pub eval_manifest: String,
    /// Labeled training split for the probe and finetune settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<String>,
    pub class_names: String,
    pub templates: String,
    #[serde(default)]
    pub augment: AugmentConfig,
    /// Subset of ["zeroshot", "probe", "finetune"]; empty means all.
    #[serde(default)]
    pub settings: Vec<String>,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// 0 keeps every image.
    #[serde(default)]
    pub max_images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSummary {
    pub checkpoint: String,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeroshot_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_acc: Option<f64>,
}

pub fn cmd_evaluate(config_path: &Path, out_path: Option<&Path>) -> Result<EvalSummary> {
    let text = fs::read_to_string(config_path).map_err(|e| HarnessError::io(config_path, e))?;
    let cfg: EvalConfig = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", config_path.display())))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let model_cfg = cfg.model.resolve()?;
    let mut aug = cfg.augment.clone();
    aug.image_size = model_cfg.vit.image_size;

    let ckpt_path = PathBuf::from(absolutize(base, &cfg.checkpoint));
    // evaluation does not know the training fingerprint; shapes are
    // still validated against the model config
    let (model, _opt, meta) = load_checkpoint(&ckpt_path, &model_cfg, 0, true)?;
    let vocab = BpeVocab::load(Path::new(&absolutize(base, &cfg.vocab_file)))?;
    let class_names = read_lines(Path::new(&absolutize(base, &cfg.class_names)))?;
    let templates = read_lines(Path::new(&absolutize(base, &cfg.templates)))?;

    let settings: Vec<String> = if cfg.settings.is_empty() {
        vec!["zeroshot".into(), "probe".into(), "finetune".into()]
    } else {
        cfg.settings.clone()
    };
    for s in &settings {
        if !matches!(s.as_str(), "zeroshot" | "probe" | "finetune") {
            return Err(HarnessError::Config(format!(
                "unknown eval setting {s:?} (zeroshot, probe, finetune)"
            )));
        }
    }

    let eval_manifest = PathBuf::from(absolutize(base, &cfg.eval_manifest));
    let test = load_labeled_images(&eval_manifest, &class_names, &aug, cfg.max_images)?;

    let mut summary = EvalSummary {
        checkpoint: ckpt_path.display().to_string(),
        step: meta.step,
        zeroshot_acc: None,
        probe_acc: None,
        finetune_acc: None,
    };

    if settings.iter().any(|s| s == "zeroshot") {
        let data = ZeroShotData {
            class_names: class_names.clone(),
            templates: templates.clone(),
            images: test.images.clone(),
            labels: test.labels.clone(),
        };
        summary.zeroshot_acc = Some(zero_shot_accuracy(&model, &data, &vocab)?);
    }

    let needs_train = settings.iter().any(|s| s == "probe" || s == "finetune");
    if needs_train {
        let train_manifest = cfg.train_manifest.as_ref().ok_or_else(|| {
            HarnessError::Config("probe/finetune need a labeled train_manifest".into())
        })?;
        let train = load_labeled_images(
            Path::new(&absolutize(base, train_manifest)),
            &class_names,
            &aug,
            cfg.max_images,
        )?;
        if settings.iter().any(|s| s == "probe") {
            let feat_train = extract_features(&model, &train.images)?;
            let feat_test = extract_features(&model, &test.images)?;
            let result = linear_probe(&feat_train, &train.labels, &feat_test, &test.labels, &cfg.probe)?;
            for class in &result.missing_train_classes {
                eprintln!("warning: class {class} present in test but absent in train");
            }
            summary.probe_acc = Some(result.accuracy);
        }
        if settings.iter().any(|s| s == "finetune") {
            summary.finetune_acc = Some(finetune(&model, &train, &test, &cfg.finetune)?);
        }
    }

    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let out = out_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt_path.with_extension("eval.json"));
    fs::write(&out, &summary_json).map_err(|e| HarnessError::io(&out, e))?;

    // append a zero-shot row to the run's metrics log when present
    if let (Some(dir), Some(acc)) = (ckpt_path.parent(), summary.zeroshot_acc) {
        let metrics = dir.join("metrics.csv");
        if metrics.exists() {
            use std::io::Write as _;
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&metrics)
                .map_err(|e| HarnessError::io(&metrics, e))?;
            writeln!(f, "{},,,,,,{acc}", meta.step).map_err(|e| HarnessError::io(&metrics, e))?;
        }
    }
    Ok(summary)
}

// ---- gradcheck command ----

pub struct GradcheckOutcome {
    pub reports: Vec<SuiteReport>,
    pub all_passed: bool,
}

pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckOutcome> {
    let reports = run_gradcheck_suite(seed)?;
    let all_passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckOutcome { reports, all_passed })
}

/// Threads come from `SLIP_THREADS` only; every other knob lives in the
/// config file.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("SLIP_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}
