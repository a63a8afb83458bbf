//! Vision Transformer image encoder.

use super::transformer::{Block, LN_EPS};
use super::{EncoderError, Result, VitConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub cfg: VitConfig,
    /// `[patch_dim, width]` linear patch projection.
    pub patch_w: Tensor<f32>,
    pub patch_b: Tensor<f32>,
    /// `[width]` class token.
    pub cls: Tensor<f32>,
    /// `[tokens+1, width]` learned positional embeddings.
    pub pos: Tensor<f32>,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor<f32>,
    pub lnf_b: Tensor<f32>,
}

/// Rearranges `[B,H,W,3]` pixels into `[B, T, patch*patch*3]` rows, one
/// per non-overlapping patch in row-major grid order. Pure data
/// movement; images do not carry gradients.
pub fn patchify(views: &Tensor<f32>, cfg: &VitConfig) -> Result<Tensor<f32>> {
    let shape = views.shape();
    let s = cfg.image_size;
    if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
        return Err(EncoderError::Config(format!(
            "expected [B,{s},{s},3] views, got {shape:?}"
        )));
    }
    let b = shape[0];
    let p = cfg.patch_size;
    let grid = s / p;
    let t = grid * grid;
    let pd = cfg.patch_dim();
    let src = views.data();
    let mut out = vec![0.0f32; b * t * pd];
    for bi in 0..b {
        let img = &src[bi * s * s * 3..(bi + 1) * s * s * 3];
        for py in 0..grid {
            for px in 0..grid {
                let patch = (py * grid + px) * pd;
                let base = bi * t * pd + patch;
                let mut w = 0;
                for dy in 0..p {
                    let row = ((py * p + dy) * s + px * p) * 3;
                    out[base + w..base + w + p * 3].copy_from_slice(&img[row..row + p * 3]);
                    w += p * 3;
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![b, t, pd], out).expect("patch shape"))
}

impl VitEncoder {
    /// Patch + class-token + positional embedding of one `[H,W,3]`
    /// image: the `[T+1, width]` input sequence of the first block.
    pub fn patch_embed(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(EncoderError::Config(format!("expected [H,W,3] image, got {shape:?}")));
        }
        let batch = image.reshape(vec![1, shape[0], shape[1], shape[2]])?;
        let embedded = self.embed(&batch)?;
        let t1 = self.cfg.num_patches() + 1;
        Ok(embedded.reshape(vec![t1, self.cfg.width])?)
    }

    fn embed(&self, views: &Tensor<f32>) -> Result<Tensor<f32>> {
        let b = views.shape()[0];
        let t = self.cfg.num_patches();
        let d = self.cfg.width;
        let patches = patchify(views, &self.cfg)?;
        let x = patches.matmul(&self.patch_w)?.add_broadcast(&self.patch_b)?;
        let cls = self.cls.broadcast_rows(b)?.reshape(vec![b, 1, d])?;
        let x = cls.concat(&x, 1)?;
        debug_assert_eq!(x.shape(), &[b, t + 1, d]);
        Ok(x.add_broadcast(&self.pos)?)
    }

    /// `[B,H,W,3] -> [B, width]` class-token representation after the
    /// final layer norm.
    pub fn encode(&self, views: &Tensor<f32>) -> Result<Tensor<f32>> {
        let b = views.shape()[0];
        let mut x = self.embed(views)?;
        for block in &self.blocks {
            x = block.forward(&x, self.cfg.heads, None)?;
        }
        let x = x.layer_norm(&self.lnf_g, &self.lnf_b, LN_EPS)?;
        Ok(x.gather_rows(&vec![0; b])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ModelConfig, SlipModel};

    #[test]
    fn patch_count_arithmetic() {
        // 32x32 image with 16px patches: 4 patches + 1 class token
        let mut cfg = ModelConfig::vit_nano();
        cfg.vit.patch_size = 16;
        let model = SlipModel::init(&cfg, 0).unwrap();
        let img = Tensor::zeros(vec![32, 32, 3]);
        let rows = model.image.patch_embed(&img).unwrap();
        assert_eq!(rows.shape(), &[5, 64]);
    }

    #[test]
    fn zero_image_zero_bias_rows_equal_pos_embeddings() {
        let cfg = ModelConfig::vit_nano();
        let model = SlipModel::init(&cfg, 1).unwrap();
        // patch_b is zero-initialized; a zero image contributes nothing
        let img = Tensor::zeros(vec![32, 32, 3]);
        let rows = model.image.patch_embed(&img).unwrap();
        let t1 = cfg.vit.num_patches() + 1;
        let d = cfg.vit.width;
        // rows 1.. equal pos rows 1..; row 0 adds the class token
        for r in 1..t1 {
            for j in 0..d {
                assert_eq!(rows.data()[r * d + j], model.image.pos.data()[r * d + j]);
            }
        }
        for j in 0..d {
            let expect = model.image.cls.data()[j] + model.image.pos.data()[j];
            assert_eq!(rows.data()[j], expect);
        }
    }

    #[test]
    fn permuting_patches_permutes_rows_before_position() {
        // two images identical except patches (0,0) and (0,1) swapped:
        // their patch-projection rows swap accordingly.
        let cfg = ModelConfig::vit_nano();
        let model = SlipModel::init(&cfg, 2).unwrap();
        let p = cfg.vit.patch_size;
        let s = cfg.vit.image_size;
        let mut rng = crate::rng::stream(5, "patch-perm", &[]);
        let data: Vec<f32> = (0..s * s * 3)
            .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
            .collect();
        let img = Tensor::from_vec(vec![s, s, 3], data.clone()).unwrap();
        let mut swapped = data;
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..3 {
                    let a = ((dy * s) + dx) * 3 + c;
                    let b = ((dy * s) + p + dx) * 3 + c;
                    swapped.swap(a, b);
                }
            }
        }
        let img_swapped = Tensor::from_vec(vec![s, s, 3], swapped).unwrap();

        let batch = |img: &Tensor<f32>| img.reshape(vec![1, s, s, 3]).unwrap();
        let pa = patchify(&batch(&img), &cfg.vit).unwrap();
        let pb = patchify(&batch(&img_swapped), &cfg.vit).unwrap();
        let pd = cfg.vit.patch_dim();
        // patch 0 of a == patch 1 of b and vice versa
        assert_eq!(&pa.data()[..pd], &pb.data()[pd..2 * pd]);
        assert_eq!(&pa.data()[pd..2 * pd], &pb.data()[..pd]);
        // projecting preserves the row swap
        let ra = pa.matmul(&model.image.patch_w).unwrap();
        let rb = pb.matmul(&model.image.patch_w).unwrap();
        let d = cfg.vit.width;
        assert_eq!(&ra.data()[..d], &rb.data()[d..2 * d]);
    }
}
