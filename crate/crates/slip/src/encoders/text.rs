//! Causal text transformer pooled at the EOS token.

use super::transformer::{causal_mask, Block, LN_EPS};
use super::{EncoderError, Result, TextConfig};
use crate::datapipe::TokenSequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    /// `[vocab, width]` token embedding table.
    pub tok_emb: Tensor<f32>,
    /// `[context, width]` learned positional embeddings.
    pub pos: Tensor<f32>,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor<f32>,
    pub lnf_b: Tensor<f32>,
}

impl TextEncoder {
    /// `[B, width]` representation at each sequence's EOS position.
    pub fn encode(&self, seqs: &[TokenSequence]) -> Result<Tensor<f32>> {
        if seqs.is_empty() {
            return Err(EncoderError::Config("empty token batch".into()));
        }
        let s = self.cfg.context_length;
        let b = seqs.len();
        let mut ids = Vec::with_capacity(b * s);
        let mut eos = Vec::with_capacity(b);
        for seq in seqs {
            if seq.ids.len() != s {
                return Err(EncoderError::Config(format!(
                    "sequence length {} does not match context {s}",
                    seq.ids.len()
                )));
            }
            ids.extend(seq.ids.iter().map(|&v| v as usize));
            eos.push(seq.eos_position);
        }
        let d = self.cfg.width;
        let x = self.tok_emb.embedding(&ids)?.reshape(vec![b, s, d])?;
        let mut x = x.add_broadcast(&self.pos.narrow0(0, s)?)?;
        let mask = self.cfg.causal.then(|| causal_mask(s));
        for block in &self.blocks {
            x = block.forward(&x, self.cfg.heads, mask.as_ref())?;
        }
        let x = x.layer_norm(&self.lnf_g, &self.lnf_b, LN_EPS)?;
        Ok(x.gather_rows(&eos)?)
    }
}
