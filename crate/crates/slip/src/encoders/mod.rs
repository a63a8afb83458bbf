//! The shared image encoder, text encoder, and projection heads.
//!
//! One Vision Transformer embeds every image view, whichever branch
//! asked for it; a causal text transformer pools at the EOS token. On
//! top sit two linear language-image projections into the shared
//! contrastive space, a 3-layer MLP head for the self-supervised
//! branch, and the learnable log logit scale (initialized to
//! `ln(1/0.07)`, clamped to `ln(100)` after each optimizer step).
//!
//! Presets scale the paper-size architectures down to desk size; the
//! patch-grid structure, pooling, and head shapes are unchanged.

mod text;
mod transformer;
mod vit;

pub use text::TextEncoder;
pub use transformer::{causal_mask, linear, Block, ParamKind, LN_EPS};
pub use vit::{patchify, VitEncoder};

use crate::datapipe::TokenSequence;
use crate::tensor::{Tape, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(EncoderError::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(EncoderError::Config("depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Patch tokens per image (class token excluded).
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    fn block_param_count(width: usize, mlp_ratio: usize) -> usize {
        let d = width;
        let m = mlp_ratio * d;
        // ln1 + qkv + out proj + ln2 + mlp
        2 * d + 3 * (d * d + d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d)
    }

    /// Closed-form parameter count (kept in lockstep with the weights
    /// by a test).
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let t1 = self.num_patches() + 1;
        self.patch_dim() * d + d            // patch projection
            + d                             // class token
            + t1 * d                        // positional embeddings
            + self.depth * Self::block_param_count(d, self.mlp_ratio)
            + 2 * d                         // final layer norm
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub causal: bool,
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context_length < 3 {
            return Err(EncoderError::Config(
                "context_length must be >= 3 (BOS + token + EOS)".into(),
            ));
        }
        if self.vocab_size < 4 {
            return Err(EncoderError::Config("vocab_size must cover the special ids".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "text width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.width;
        self.vocab_size * d
            + self.context_length * d
            + self.depth * VitConfig::block_param_count(d, self.mlp_ratio)
            + 2 * d
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub text: TextConfig,
    /// Shared language-image embedding width.
    pub clip_dim: usize,
    /// Hidden width of the SSL projector MLP.
    pub ssl_hidden: usize,
    /// Output width of the SSL projector.
    pub ssl_dim: usize,
    pub logit_scale_init: f64,
    pub logit_scale_max: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Smallest preset: 32px images, 8px patches, width 64, depth 4.
    pub fn vit_nano() -> Self {
        ModelConfig {
            vit: VitConfig {
                image_size: 32,
                patch_size: 8,
                width: 64,
                depth: 4,
                heads: 4,
                mlp_ratio: 4,
            },
            text: TextConfig {
                vocab_size: 512,
                context_length: 32,
                width: 64,
                depth: 4,
                heads: 4,
                mlp_ratio: 4,
                causal: true,
            },
            clip_dim: 64,
            ssl_hidden: 128,
            ssl_dim: 32,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            logit_scale_max: 100.0f64.ln(),
            init_std: 0.02,
        }
    }

    /// 64px preset with a wider, deeper image tower.
    pub fn vit_micro() -> Self {
        let mut cfg = Self::vit_nano();
        cfg.vit = VitConfig {
            image_size: 64,
            patch_size: 16,
            width: 128,
            depth: 6,
            heads: 8,
            mlp_ratio: 4,
        };
        cfg
    }

    /// Paper-scale ViT-B/16 with the CLIP text tower; constructable but
    /// far beyond desk budgets.
    pub fn vit_base_paper() -> Self {
        ModelConfig {
            vit: VitConfig {
                image_size: 224,
                patch_size: 16,
                width: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4,
            },
            text: TextConfig {
                vocab_size: 49_152,
                context_length: 77,
                width: 512,
                depth: 12,
                heads: 8,
                mlp_ratio: 4,
                causal: true,
            },
            clip_dim: 512,
            ssl_hidden: 4096,
            ssl_dim: 256,
            logit_scale_init: (1.0f64 / 0.07).ln(),
            logit_scale_max: 100.0f64.ln(),
            init_std: 0.02,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit_nano" => Ok(Self::vit_nano()),
            "vit_micro" => Ok(Self::vit_micro()),
            "vit_base_paper" => Ok(Self::vit_base_paper()),
            other => Err(EncoderError::Config(format!(
                "unknown preset {other:?} (vit_nano, vit_micro, vit_base_paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.text.validate()?;
        if self.clip_dim == 0 || self.ssl_hidden == 0 || self.ssl_dim == 0 {
            return Err(EncoderError::Config("projection dims must be positive".into()));
        }
        if self.logit_scale_max <= 0.0 {
            return Err(EncoderError::Config("logit_scale_max must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.vit.param_count()
            + self.text.param_count()
            + self.vit.width * self.clip_dim
            + self.text.width * self.clip_dim
            + (self.vit.width * self.ssl_hidden + self.ssl_hidden)
            + (self.ssl_hidden * self.ssl_hidden + self.ssl_hidden)
            + (self.ssl_hidden * self.ssl_dim + self.ssl_dim)
            + 1
    }
}

/// 3-layer MLP projection head for the self-supervised branch.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
    pub w3: Tensor<f32>,
    pub b3: Tensor<f32>,
}

impl MlpHead {
    pub fn forward(&self, x: &Tensor<f32>) -> crate::tensor::Result<Tensor<f32>> {
        let h = linear(x, &self.w1, &self.b1)?.gelu()?;
        let h = linear(&h, &self.w2, &self.b2)?.gelu()?;
        linear(&h, &self.w3, &self.b3)
    }

    fn params(&self) -> [(&'static str, &Tensor<f32>, ParamKind); 6] {
        use ParamKind::*;
        [
            ("w1", &self.w1, Weight),
            ("b1", &self.b1, Bias),
            ("w2", &self.w2, Weight),
            ("b2", &self.b2, Bias),
            ("w3", &self.w3, Weight),
            ("b3", &self.b3, Bias),
        ]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Tensor<f32>, ParamKind); 6] {
        use ParamKind::*;
        [
            ("w1", &mut self.w1, Weight),
            ("b1", &mut self.b1, Bias),
            ("w2", &mut self.w2, Weight),
            ("b2", &mut self.b2, Bias),
            ("w3", &mut self.w3, Weight),
            ("b3", &mut self.b3, Bias),
        ]
    }

    fn map(&self, f: &mut impl FnMut(&Tensor<f32>) -> crate::tensor::Result<Tensor<f32>>) -> crate::tensor::Result<MlpHead> {
        Ok(MlpHead {
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
            w3: f(&self.w3)?,
            b3: f(&self.b3)?,
        })
    }
}

/// The full model: shared image encoder, text encoder, projections,
/// SSL head, and the log logit scale.
#[derive(Debug, Clone)]
pub struct SlipModel {
    pub cfg: ModelConfig,
    pub image: VitEncoder,
    pub text: TextEncoder,
    pub clip_image_proj: Tensor<f32>,
    pub clip_text_proj: Tensor<f32>,
    pub ssl_proj: MlpHead,
    pub log_logit_scale: Tensor<f32>,
}

/// Truncated normal: normal(0, std) resampled outside two standard
/// deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let z = (-2.0 * u1.ln()).sqrt() * u2.cos();
        if z.abs() <= 2.0 {
            out.push((z * std) as f32);
        }
    }
    out
}

impl SlipModel {
    /// Fresh model with truncated-normal weights drawn from the `init`
    /// sub-stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<SlipModel> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(seed, "init", &[]);
        let std = cfg.init_std;
        let mut w = |shape: Vec<usize>| -> Tensor<f32> {
            let n = shape.iter().product();
            Tensor::from_vec(shape, trunc_normal(&mut rng, n, std)).expect("init shape")
        };
        let block = |w: &mut dyn FnMut(Vec<usize>) -> Tensor<f32>, d: usize, m: usize| Block {
            ln1_g: Tensor::ones(vec![d]),
            ln1_b: Tensor::zeros(vec![d]),
            wq: w(vec![d, d]),
            bq: Tensor::zeros(vec![d]),
            wk: w(vec![d, d]),
            bk: Tensor::zeros(vec![d]),
            wv: w(vec![d, d]),
            bv: Tensor::zeros(vec![d]),
            wo: w(vec![d, d]),
            bo: Tensor::zeros(vec![d]),
            ln2_g: Tensor::ones(vec![d]),
            ln2_b: Tensor::zeros(vec![d]),
            w1: w(vec![d, m]),
            b1: Tensor::zeros(vec![m]),
            w2: w(vec![m, d]),
            b2: Tensor::zeros(vec![d]),
        };

        let vd = cfg.vit.width;
        let vm = cfg.vit.mlp_ratio * vd;
        let image = VitEncoder {
            cfg: cfg.vit.clone(),
            patch_w: w(vec![cfg.vit.patch_dim(), vd]),
            patch_b: Tensor::zeros(vec![vd]),
            cls: w(vec![vd]),
            pos: w(vec![cfg.vit.num_patches() + 1, vd]),
            blocks: (0..cfg.vit.depth).map(|_| block(&mut w, vd, vm)).collect(),
            lnf_g: Tensor::ones(vec![vd]),
            lnf_b: Tensor::zeros(vec![vd]),
        };

        let td = cfg.text.width;
        let tm = cfg.text.mlp_ratio * td;
        let text = TextEncoder {
            cfg: cfg.text.clone(),
            tok_emb: w(vec![cfg.text.vocab_size, td]),
            pos: w(vec![cfg.text.context_length, td]),
            blocks: (0..cfg.text.depth).map(|_| block(&mut w, td, tm)).collect(),
            lnf_g: Tensor::ones(vec![td]),
            lnf_b: Tensor::zeros(vec![td]),
        };

        Ok(SlipModel {
            image,
            text,
            clip_image_proj: w(vec![vd, cfg.clip_dim]),
            clip_text_proj: w(vec![td, cfg.clip_dim]),
            ssl_proj: MlpHead {
                w1: w(vec![vd, cfg.ssl_hidden]),
                b1: Tensor::zeros(vec![cfg.ssl_hidden]),
                w2: w(vec![cfg.ssl_hidden, cfg.ssl_hidden]),
                b2: Tensor::zeros(vec![cfg.ssl_hidden]),
                w3: w(vec![cfg.ssl_hidden, cfg.ssl_dim]),
                b3: Tensor::zeros(vec![cfg.ssl_dim]),
            },
            log_logit_scale: Tensor::scalar(cfg.logit_scale_init as f32),
            cfg: cfg.clone(),
        })
    }

    /// Class-token embeddings for a `[B,H,W,3]` batch of views.
    pub fn image_encode(&self, views: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.image.encode(views)
    }

    /// EOS-pooled embeddings for a batch of token sequences.
    pub fn text_encode(&self, seqs: &[TokenSequence]) -> Result<Tensor<f32>> {
        self.text.encode(seqs)
    }

    /// The separate learned linear projections into the shared space.
    pub fn project_clip(
        &self,
        wi: &Tensor<f32>,
        wt: &Tensor<f32>,
    ) -> crate::tensor::Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((wi.matmul(&self.clip_image_proj)?, wt.matmul(&self.clip_text_proj)?))
    }

    /// Both SSL views through the same MLP head.
    pub fn project_ssl(
        &self,
        w1: &Tensor<f32>,
        w2: &Tensor<f32>,
    ) -> crate::tensor::Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((self.ssl_proj.forward(w1)?, self.ssl_proj.forward(w2)?))
    }

    /// Applies `s <= ln(logit_scale_max)` after an optimizer step.
    pub fn clamp_logit_scale(&mut self) {
        let max = self.cfg.logit_scale_max as f32;
        let cur = self.log_logit_scale.item();
        if cur > max {
            self.log_logit_scale = Tensor::scalar(max);
        }
    }

    /// Visits every parameter as `(path, tensor, kind)` in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<f32>, ParamKind)) {
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

        f("text.tok_emb", &self.text.tok_emb, Weight);
        f("text.pos", &self.text.pos, Weight);
        for (i, b) in self.text.blocks.iter().enumerate() {
            for (suffix, t, kind) in b.params() {
                f(&format!("text.blocks.{i}.{suffix}"), t, kind);
            }
        }
        f("text.ln_f.g", &self.text.lnf_g, Gain);
        f("text.ln_f.b", &self.text.lnf_b, Bias);

        f("clip_proj.image", &self.clip_image_proj, Weight);
        f("clip_proj.text", &self.clip_text_proj, Weight);
        for (suffix, t, kind) in self.ssl_proj.params() {
            f(&format!("ssl_proj.{suffix}"), t, kind);
        }
        f("logit_scale", &self.log_logit_scale, LogitScale);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>, ParamKind)) {
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

        f("text.tok_emb", &mut self.text.tok_emb, Weight);
        f("text.pos", &mut self.text.pos, Weight);
        for (i, b) in self.text.blocks.iter_mut().enumerate() {
            for (suffix, t, kind) in b.params_mut() {
                f(&format!("text.blocks.{i}.{suffix}"), t, kind);
            }
        }
        f("text.ln_f.g", &mut self.text.lnf_g, Gain);
        f("text.ln_f.b", &mut self.text.lnf_b, Bias);

        f("clip_proj.image", &mut self.clip_image_proj, Weight);
        f("clip_proj.text", &mut self.clip_text_proj, Weight);
        for (suffix, t, kind) in self.ssl_proj.params_mut() {
            f(&format!("ssl_proj.{suffix}"), t, kind);
        }
        f("logit_scale", &mut self.log_logit_scale, LogitScale);
    }

    /// Structural clone with every parameter passed through `f`
    /// (attachment to a tape, precision casts in tests).
    pub fn map_params(
        &self,
        f: &mut impl FnMut(&Tensor<f32>) -> crate::tensor::Result<Tensor<f32>>,
    ) -> crate::tensor::Result<SlipModel> {
        Ok(SlipModel {
            cfg: self.cfg.clone(),
            image: VitEncoder {
                cfg: self.image.cfg.clone(),
                patch_w: f(&self.image.patch_w)?,
                patch_b: f(&self.image.patch_b)?,
                cls: f(&self.image.cls)?,
                pos: f(&self.image.pos)?,
                blocks: self.image.blocks.iter().map(|b| b.map(f)).collect::<crate::tensor::Result<_>>()?,
                lnf_g: f(&self.image.lnf_g)?,
                lnf_b: f(&self.image.lnf_b)?,
            },
            text: TextEncoder {
                cfg: self.text.cfg.clone(),
                tok_emb: f(&self.text.tok_emb)?,
                pos: f(&self.text.pos)?,
                blocks: self.text.blocks.iter().map(|b| b.map(f)).collect::<crate::tensor::Result<_>>()?,
                lnf_g: f(&self.text.lnf_g)?,
                lnf_b: f(&self.text.lnf_b)?,
            },
            clip_image_proj: f(&self.clip_image_proj)?,
            clip_text_proj: f(&self.clip_text_proj)?,
            ssl_proj: self.ssl_proj.map(f)?,
            log_logit_scale: f(&self.log_logit_scale)?,
        })
    }

    /// Registers every parameter as a tape leaf; the returned model runs
    /// the differentiable forward pass of one step.
    pub fn attach(&self, tape: &Tape<f32>) -> crate::tensor::Result<SlipModel> {
        self.map_params(&mut |t| tape.leaf(t))
    }

    /// Actual parameter count, summed over the registry.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t, _| n += t.len());
        n
    }
}
