//! Joint language-image and image-only contrastive pre-training of a
//! shared Vision Transformer, small enough to train and evaluate on a
//! CPU in minutes.
//!
//! One image encoder feeds two objectives at once: an InfoNCE loss over
//! matched image/caption pairs and an NT-Xent loss over two augmented
//! views of each image. The crate covers the whole workflow end to end:
//!
//! - [`tensor`] — dense tensors with reverse-mode autodiff and a
//!   finite-difference gradient checker
//! - [`encoders`] — Vision Transformer and causal text transformer with
//!   the projection heads and learnable logit scale
//! - [`objectives`] — the contrastive losses and their combination
//! - [`datapipe`] — corpus manifests, caption cleaning, byte-pair
//!   tokenization, the two augmentation branches, and a synthetic
//!   shapes-and-colors corpus generator
//! - [`trainer`] — AdamW with cosine schedule, checkpointing, metrics,
//!   and the in-training zero-shot monitor
//! - [`eval`] — zero-shot transfer with prompt ensembling, linear
//!   probing of frozen features, and end-to-end finetuning with
//!   layerwise learning-rate decay
//! - [`harness`] — experiment configs and the `gen-data` / `pretrain` /
//!   `evaluate` / `gradcheck` commands
//!
//! The `examples/` directory has one runnable example per capability;
//! start with `pretrain_tiny`.

pub mod datapipe;
pub mod encoders;
pub mod eval;
pub mod harness;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;
