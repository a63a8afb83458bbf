//! Corpus ingestion and batch construction.
//!
//! A corpus is a JSON-lines manifest of `{image, captions, label?}`
//! records plus image files. Loading cleans every caption and drops
//! records left with none. Batches are built from `(seed, epoch,
//! record index)`-derived sub-streams only, never from worker
//! scheduling, so a batch is a pure function of the sampler position.

pub mod augment;
pub mod bpe;
pub mod caption;
pub mod image;
pub mod synth;

pub use augment::{eval_transform, global_crop, ssl_augment, AugmentConfig};
pub use bpe::{bpe_encode, bpe_train, BpeVocab, TokenSequence};
pub use caption::{clean_caption, sample_caption};
pub use image::ImageBuf;
pub use synth::{synth_generate, SynthSpec};

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: decode failed: {reason}")]
    Decode { path: String, reason: String },
    #[error("degenerate image ({width}x{height})")]
    DegenerateImage { width: usize, height: usize },
    #[error("record has no usable captions")]
    EmptyCaptions,
    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: String,
        line: usize,
        reason: String,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub image: String,
    pub captions: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DataError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("manifest record serializes");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    file.write_all(&out).map_err(|e| DataError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DataError::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CorpusRecord {
    pub image_path: String,
    /// Cleaned, all non-empty.
    pub captions: Vec<String>,
    pub label: Option<String>,
}

/// A manifest with captions cleaned and images decoded into memory.
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub images: Vec<ImageBuf>,
    /// Records dropped because every caption cleaned to empty.
    pub dropped: usize,
    pub root: PathBuf,
}

impl Corpus {
    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let raw = read_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut records = Vec::with_capacity(raw.len());
        let mut images = Vec::with_capacity(raw.len());
        let mut dropped = 0;
        for r in raw {
            let captions: Vec<String> = r
                .captions
                .iter()
                .map(|c| clean_caption(c))
                .filter(|c| !c.is_empty())
                .collect();
            if captions.is_empty() {
                dropped += 1;
                continue;
            }
            images.push(image::load_image(&root.join(&r.image))?);
            records.push(CorpusRecord {
                image_path: r.image,
                captions,
                label: r.label,
            });
        }
        Ok(Corpus {
            records,
            images,
            dropped,
            root,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// All cleaned captions, for tokenizer training.
    pub fn all_captions(&self) -> Vec<String> {
        self.records.iter().flat_map(|r| r.captions.iter().cloned()).collect()
    }

    /// Label index per record against an ordered class-name list.
    pub fn label_indices(&self, class_names: &[String]) -> Result<Vec<usize>, DataError> {
        self.records
            .iter()
            .map(|r| {
                let label = r.label.as_ref().ok_or_else(|| {
                    DataError::Config(format!("record {} has no label", r.image_path))
                })?;
                class_names
                    .iter()
                    .position(|c| c == label)
                    .ok_or_else(|| DataError::Config(format!("label {label:?} not in class list")))
            })
            .collect()
    }
}

/// Which views a training batch carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Global crop + caption + two SSL views per record.
    Slip,
    /// Global crop + caption only.
    ClipOnly,
    /// Two SSL views only.
    SslOnly,
    /// Language-image views from the main corpus, SSL views drawn
    /// independently from a second corpus.
    Decoupled,
}

/// Per-example training views. Fields are present according to the
/// batch mode; `rng_stamp` records the seed material of the record.
pub struct ViewBundle {
    pub x_i: Option<Tensor<f32>>,
    pub x_1: Option<Tensor<f32>>,
    pub x_2: Option<Tensor<f32>>,
    pub y_t: Option<TokenSequence>,
    pub rng_stamp: u64,
    pub image_path: String,
    pub ssl_image_path: Option<String>,
}

/// Everything fixed across the steps of a run that [`make_batch`] needs.
pub struct BatchCtx<'a> {
    pub corpus: &'a Corpus,
    pub ssl_corpus: Option<&'a Corpus>,
    pub vocab: &'a BpeVocab,
    pub context_length: usize,
    pub augment: &'a AugmentConfig,
    pub mode: BatchMode,
    pub seed: u64,
}

/// Builds one batch from record indices. SSL indices are required in
/// decoupled mode and ignored otherwise.
pub fn make_batch(
    ctx: &BatchCtx,
    epoch: u64,
    indices: &[usize],
    ssl_indices: Option<&[usize]>,
) -> Result<Vec<ViewBundle>, DataError> {
    let decoupled_src = match ctx.mode {
        BatchMode::Decoupled => {
            let corpus = ctx.ssl_corpus.ok_or_else(|| {
                DataError::Config("decoupled mode requires an ssl manifest".into())
            })?;
            let idx = ssl_indices.ok_or_else(|| {
                DataError::Config("decoupled mode requires ssl record indices".into())
            })?;
            if idx.len() != indices.len() {
                return Err(DataError::Config(
                    "decoupled ssl batch extent must match requested extent".into(),
                ));
            }
            Some((corpus, idx))
        }
        _ => None,
    };

    let mut out = Vec::with_capacity(indices.len());
    for (slot, &i) in indices.iter().enumerate() {
        let record = &ctx.corpus.records[i];
        let image = &ctx.corpus.images[i];
        let stamp = crate::rng::stamp(ctx.seed, "augment", &[epoch, i as u64]);

        let needs_clip = !matches!(ctx.mode, BatchMode::SslOnly);
        let (x_i, y_t) = if needs_clip {
            let mut crop_rng = crate::rng::stream(ctx.seed, "augment", &[epoch, i as u64, 0]);
            let x_i = global_crop(image, &mut crop_rng, ctx.augment)?;
            let mut cap_rng = crate::rng::stream(ctx.seed, "caption", &[epoch, i as u64]);
            let caption = sample_caption(&record.captions, &mut cap_rng).ok_or(DataError::EmptyCaptions)?;
            let y_t = bpe_encode(caption, ctx.vocab, ctx.context_length);
            (Some(x_i), Some(y_t))
        } else {
            (None, None)
        };

        let (x_1, x_2, ssl_image_path) = match ctx.mode {
            BatchMode::ClipOnly => (None, None, None),
            BatchMode::Decoupled => {
                let (ssl_corpus, ssl_idx) = decoupled_src.expect("checked above");
                let j = ssl_idx[slot];
                let src = &ssl_corpus.images[j];
                let mut r1 = crate::rng::stream(ctx.seed, "augment-ssl", &[epoch, j as u64, 1]);
                let mut r2 = crate::rng::stream(ctx.seed, "augment-ssl", &[epoch, j as u64, 2]);
                (
                    Some(ssl_augment(src, &mut r1, ctx.augment)?),
                    Some(ssl_augment(src, &mut r2, ctx.augment)?),
                    Some(ssl_corpus.records[j].image_path.clone()),
                )
            }
            _ => {
                let mut r1 = crate::rng::stream(ctx.seed, "augment", &[epoch, i as u64, 1]);
                let mut r2 = crate::rng::stream(ctx.seed, "augment", &[epoch, i as u64, 2]);
                (
                    Some(ssl_augment(image, &mut r1, ctx.augment)?),
                    Some(ssl_augment(image, &mut r2, ctx.augment)?),
                    None,
                )
            }
        };

        out.push(ViewBundle {
            x_i,
            x_1,
            x_2,
            y_t,
            rng_stamp: stamp,
            image_path: record.image_path.clone(),
            ssl_image_path,
        });
    }
    Ok(out)
}

/// Deterministic epoch-permutation sampler. `batch_at(step)` is a pure
/// function of `(seed, step)`, which is what makes resume exact.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    label: &'static str,
}

impl EpochSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        Self::with_label(n, batch_size, seed, "data")
    }

    /// Independent sampler stream (the decoupled SSL branch uses one).
    pub fn with_label(
        n: usize,
        batch_size: usize,
        seed: u64,
        label: &'static str,
    ) -> Result<Self, DataError> {
        if batch_size == 0 || n < batch_size {
            return Err(DataError::Config(format!(
                "corpus of {n} records cannot fill batches of {batch_size}"
            )));
        }
        Ok(EpochSampler {
            n,
            batch_size,
            seed,
            label,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.n / self.batch_size) as u64
    }

    pub fn batch_at(&self, step: u64) -> (u64, Vec<usize>) {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let slot = (step % spe) as usize;
        let mut perm: Vec<usize> = (0..self.n).collect();
        let mut rng = crate::rng::stream(self.seed, self.label, &[epoch]);
        for i in (1..perm.len()).rev() {
            let j = rand::Rng::random_range(&mut rng, 0..=i);
            perm.swap(i, j);
        }
        (epoch, perm[slot * self.batch_size..(slot + 1) * self.batch_size].to_vec())
    }
}
