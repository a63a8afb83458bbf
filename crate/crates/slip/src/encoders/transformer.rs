//! Pre-norm transformer block shared by the image and text encoders.

use crate::tensor::{Result, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Additive attention-mask magnitude for disallowed positions.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
    LogitScale,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: Tensor<f32>,
    pub ln1_b: Tensor<f32>,
    pub wq: Tensor<f32>,
    pub bq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub bk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub bv: Tensor<f32>,
    pub wo: Tensor<f32>,
    pub bo: Tensor<f32>,
    pub ln2_g: Tensor<f32>,
    pub ln2_b: Tensor<f32>,
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

pub fn linear(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f32>> {
    x.matmul(w)?.add_broadcast(b)
}

impl Block {
    pub fn params(&self) -> [(&'static str, &Tensor<f32>, ParamKind); 16] {
        use ParamKind::*;
        [
            ("ln1.g", &self.ln1_g, Gain),
            ("ln1.b", &self.ln1_b, Bias),
            ("attn.wq", &self.wq, Weight),
            ("attn.bq", &self.bq, Bias),
            ("attn.wk", &self.wk, Weight),
            ("attn.bk", &self.bk, Bias),
            ("attn.wv", &self.wv, Weight),
            ("attn.bv", &self.bv, Bias),
            ("attn.wo", &self.wo, Weight),
            ("attn.bo", &self.bo, Bias),
            ("ln2.g", &self.ln2_g, Gain),
            ("ln2.b", &self.ln2_b, Bias),
            ("mlp.w1", &self.w1, Weight),
            ("mlp.b1", &self.b1, Bias),
            ("mlp.w2", &self.w2, Weight),
            ("mlp.b2", &self.b2, Bias),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor<f32>, ParamKind); 16] {
        use ParamKind::*;
        [
            ("ln1.g", &mut self.ln1_g, Gain),
            ("ln1.b", &mut self.ln1_b, Bias),
            ("attn.wq", &mut self.wq, Weight),
            ("attn.bq", &mut self.bq, Bias),
            ("attn.wk", &mut self.wk, Weight),
            ("attn.bk", &mut self.bk, Bias),
            ("attn.wv", &mut self.wv, Weight),
            ("attn.bv", &mut self.bv, Bias),
            ("attn.wo", &mut self.wo, Weight),
            ("attn.bo", &mut self.bo, Bias),
            ("ln2.g", &mut self.ln2_g, Gain),
            ("ln2.b", &mut self.ln2_b, Bias),
            ("mlp.w1", &mut self.w1, Weight),
            ("mlp.b1", &mut self.b1, Bias),
            ("mlp.w2", &mut self.w2, Weight),
            ("mlp.b2", &mut self.b2, Bias),
        ]
    }

    pub fn map(&self, f: &mut impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Block> {
        Ok(Block {
            ln1_g: f(&self.ln1_g)?,
            ln1_b: f(&self.ln1_b)?,
            wq: f(&self.wq)?,
            bq: f(&self.bq)?,
            wk: f(&self.wk)?,
            bk: f(&self.bk)?,
            wv: f(&self.wv)?,
            bv: f(&self.bv)?,
            wo: f(&self.wo)?,
            bo: f(&self.bo)?,
            ln2_g: f(&self.ln2_g)?,
            ln2_b: f(&self.ln2_b)?,
            w1: f(&self.w1)?,
            b1: f(&self.b1)?,
            w2: f(&self.w2)?,
            b2: f(&self.b2)?,
        })
    }

    /// Pre-norm residual block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    /// `mask` is an additive `[S,S]` constant (causal for text).
    pub fn forward(
        &self,
        x: &Tensor<f32>,
        heads: usize,
        mask: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let d = *x.shape().last().unwrap();
        let dh = d / heads;
        let h = x.layer_norm(&self.ln1_g, &self.ln1_b, LN_EPS)?;
        let q = linear(&h, &self.wq, &self.bq)?.split_heads(heads)?;
        let k = linear(&h, &self.wk, &self.bk)?.split_heads(heads)?;
        let v = linear(&h, &self.wv, &self.bv)?.split_heads(heads)?;
        let mut scores = q.bmm_nt(&k)?.scale(1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.add_broadcast(m)?;
        }
        let attn = scores.softmax(2)?;
        let ctx = attn.bmm(&v)?.merge_heads(heads)?;
        let x = x.add(&linear(&ctx, &self.wo, &self.bo)?)?;
        let h2 = x.layer_norm(&self.ln2_g, &self.ln2_b, LN_EPS)?;
        let m = linear(&h2, &self.w1, &self.b1)?.gelu()?;
        x.add(&linear(&m, &self.w2, &self.b2)?)
    }
}

/// `[S,S]` additive causal mask: position i attends to j <= i.
pub fn causal_mask(s: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            data[i * s + j] = MASK_NEG as f32;
        }
    }
    Tensor::from_vec(vec![s, s], data).expect("mask shape")
}
