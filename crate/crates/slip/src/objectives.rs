//! The two contrastive objectives and their combination.
//!
//! Both losses normalize their inputs internally, so callers hand over
//! raw projection outputs:
//!
//! - [`clip_loss`]: symmetric InfoNCE over the image/text similarity
//!   matrix scaled by `exp(s)`, positives on the diagonal.
//! - [`simclr_loss`]: NT-Xent over two views. Each view's cross-view
//!   similarities are concatenated with its self-similarities (diagonal
//!   masked by subtracting `mask_magnitude`), divided by the
//!   temperature, and scored against labels `0..N`.
//! - [`slip_loss`]: `ssl_scale * ssl + clip`, with the SSL term behind
//!   the [`SslObjective`] seam so other view-based objectives can be
//!   plugged in. Only NT-Xent ships.
//!
//! Everything is generic over the element precision so the `f64` oracle
//! path in the tests exercises the identical code.

use crate::tensor::{Result, Scalar, Tensor, TensorError};
use serde::{Deserialize, Serialize};

/// Row-normalization guard; rows with norm below this come out as zeros.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SlipLossConfig {
    /// Scale `c` on the self-supervised term.
    pub ssl_scale: f64,
    /// NT-Xent temperature.
    pub simclr_temperature: f64,
    /// Magnitude subtracted from self-similarity diagonals.
    pub mask_magnitude: f64,
}

impl Default for SlipLossConfig {
    fn default() -> Self {
        SlipLossConfig {
            ssl_scale: 1.0,
            simclr_temperature: 0.1,
            mask_magnitude: 1e9,
        }
    }
}

impl SlipLossConfig {
    /// A masked logit must land far enough below the live ones that it
    /// underflows a 32-bit softmax.
    pub fn validate(&self) -> Result<()> {
        if self.ssl_scale < 0.0 {
            return Err(TensorError::Contract("ssl_scale must be >= 0".into()));
        }
        if self.simclr_temperature <= 0.0 {
            return Err(TensorError::Contract("simclr_temperature must be > 0".into()));
        }
        if self.mask_magnitude / self.simclr_temperature < 1e3 {
            return Err(TensorError::Contract(
                "mask_magnitude / temperature too small to suppress self-logits".into(),
            ));
        }
        Ok(())
    }
}

/// The per-batch embeddings consumed by [`slip_loss`]. In decoupled
/// mode `z1`/`z2` may carry a batch extent different from `zi`/`zt`.
pub struct EmbeddingBundle<E: Scalar = f32> {
    pub zi: Tensor<E>,
    pub zt: Tensor<E>,
    pub z1: Tensor<E>,
    pub z2: Tensor<E>,
    /// Log logit scale `s` (one element, usually a tape leaf).
    pub log_logit_scale: Tensor<E>,
}

impl<E: Scalar> EmbeddingBundle<E> {
    fn validate(&self) -> Result<()> {
        if self.zi.rank() != 2 || self.zt.rank() != 2 || self.zi.shape()[0] != self.zt.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "slip_loss",
                lhs: self.zi.shape().to_vec(),
                rhs: self.zt.shape().to_vec(),
            });
        }
        if self.z1.shape() != self.z2.shape() || self.z1.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "slip_loss",
                lhs: self.z1.shape().to_vec(),
                rhs: self.z2.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Symmetric InfoNCE between image and text embeddings.
///
/// Rows are L2-normalized, the similarity matrix is scaled by `exp(s)`,
/// and the mean of the image->text and text->image cross-entropies is
/// returned. `s` rides the tape, so the logit scale is learned.
pub fn clip_loss<E: Scalar>(
    zi: &Tensor<E>,
    zt: &Tensor<E>,
    log_logit_scale: &Tensor<E>,
) -> Result<Tensor<E>> {
    if zi.rank() != 2 || zt.rank() != 2 || zi.shape()[0] != zt.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "clip_loss",
            lhs: zi.shape().to_vec(),
            rhs: zt.shape().to_vec(),
        });
    }
    let n = zi.shape()[0];
    let labels: Vec<usize> = (0..n).collect();
    let zi_n = zi.l2_normalize(NORM_EPS)?;
    let zt_n = zt.l2_normalize(NORM_EPS)?;
    let scale = log_logit_scale.exp()?;
    let logits = zi_n.matmul(&zt_n.transpose2()?)?.mul_scalar_tensor(&scale)?;
    let li = logits.cross_entropy_logits(&labels)?;
    let lt = logits.transpose2()?.cross_entropy_logits(&labels)?;
    li.add(&lt)?.scale(0.5)
}

/// NT-Xent between two views of the same images.
///
/// Per view the `N x 2N` logit rows are
/// `[cross-view similarities | masked self-similarities] / tau`
/// and the positive for row `i` is column `i`.
pub fn simclr_loss<E: Scalar>(
    z1: &Tensor<E>,
    z2: &Tensor<E>,
    temperature: f64,
    mask_magnitude: f64,
) -> Result<Tensor<E>> {
    if z1.shape() != z2.shape() || z1.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "simclr_loss",
            lhs: z1.shape().to_vec(),
            rhs: z2.shape().to_vec(),
        });
    }
    if temperature <= 0.0 {
        return Err(TensorError::Contract("simclr temperature must be > 0".into()));
    }
    let n = z1.shape()[0];
    let labels: Vec<usize> = (0..n).collect();
    let mask = Tensor::<E>::eye(n).scale(mask_magnitude)?;
    let inv_tau = 1.0 / temperature;

    let z1n = z1.l2_normalize(NORM_EPS)?;
    let z2n = z2.l2_normalize(NORM_EPS)?;
    let cross = z1n.matmul(&z2n.transpose2()?)?;
    let self1 = z1n.matmul(&z1n.transpose2()?)?.sub(&mask)?;
    let self2 = z2n.matmul(&z2n.transpose2()?)?.sub(&mask)?;

    let logits1 = cross.concat(&self1, 1)?.scale(inv_tau)?;
    let logits2 = cross.transpose2()?.concat(&self2, 1)?.scale(inv_tau)?;
    let l1 = logits1.cross_entropy_logits(&labels)?;
    let l2 = logits2.cross_entropy_logits(&labels)?;
    l1.add(&l2)?.scale(0.5)
}

/// A view-based self-supervised objective: two batches of projected
/// view embeddings in, scalar loss out. NT-Xent is the shipped
/// implementation; alternatives slot in here.
pub trait SslObjective {
    fn name(&self) -> &'static str;
    fn loss<E: Scalar>(&self, z1: &Tensor<E>, z2: &Tensor<E>) -> Result<Tensor<E>>;
}

/// NT-Xent as an [`SslObjective`].
#[derive(Debug, Clone)]
pub struct SimClrObjective {
    pub temperature: f64,
    pub mask_magnitude: f64,
}

impl SimClrObjective {
    pub fn from_config(cfg: &SlipLossConfig) -> Self {
        SimClrObjective {
            temperature: cfg.simclr_temperature,
            mask_magnitude: cfg.mask_magnitude,
        }
    }
}

impl SslObjective for SimClrObjective {
    fn name(&self) -> &'static str {
        "simclr"
    }
    fn loss<E: Scalar>(&self, z1: &Tensor<E>, z2: &Tensor<E>) -> Result<Tensor<E>> {
        simclr_loss(z1, z2, self.temperature, self.mask_magnitude)
    }
}

/// Combined loss components, with the parts kept for logging.
pub struct SlipLossOutput<E: Scalar = f32> {
    pub total: Tensor<E>,
    pub clip_part: Tensor<E>,
    pub ssl_part: Tensor<E>,
}

/// `total = ssl_scale * ssl(z1, z2) + clip(zi, zt)`.
///
/// With `ssl_scale == 0` the SSL term is skipped outright: the total
/// equals the CLIP loss bit for bit and no gradient reaches the SSL
/// projector.
pub fn slip_loss<E: Scalar>(
    bundle: &EmbeddingBundle<E>,
    cfg: &SlipLossConfig,
    ssl: &impl SslObjective,
) -> Result<SlipLossOutput<E>> {
    cfg.validate()?;
    bundle.validate()?;
    let clip_part = clip_loss(&bundle.zi, &bundle.zt, &bundle.log_logit_scale)?;
    if cfg.ssl_scale == 0.0 {
        return Ok(SlipLossOutput {
            total: clip_part.clone(),
            clip_part,
            ssl_part: Tensor::zeros(vec![1]),
        });
    }
    let ssl_part = ssl.loss(&bundle.z1, &bundle.z2)?;
    let total = ssl_part.scale(cfg.ssl_scale)?.add(&clip_part)?;
    Ok(SlipLossOutput {
        total,
        clip_part,
        ssl_part,
    })
}

/// Convenience wrapper using the shipped NT-Xent objective.
pub fn slip_loss_simclr<E: Scalar>(
    bundle: &EmbeddingBundle<E>,
    cfg: &SlipLossConfig,
) -> Result<SlipLossOutput<E>> {
    slip_loss(bundle, cfg, &SimClrObjective::from_config(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Precision, Tape, TensorFn};
    use rand::Rng;

    // ---- direct-formula f64 oracles, independent of the tape path ----

    fn normalize_rows_f64(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        z.iter()
            .map(|row| {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < NORM_EPS {
                    vec![0.0; row.len()]
                } else {
                    row.iter().map(|v| v / n).collect()
                }
            })
            .collect()
    }

    fn ce_rows_f64(logits: &[Vec<f64>]) -> f64 {
        // labels are 0..N; mean over rows of lse(row) - row[i]
        let n = logits.len();
        logits
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[i]
            })
            .sum::<f64>()
            / n as f64
    }

    pub(super) fn clip_oracle_f64(zi: &[Vec<f64>], zt: &[Vec<f64>], s: f64) -> f64 {
        let (zi, zt) = (normalize_rows_f64(zi), normalize_rows_f64(zt));
        let n = zi.len();
        let scale = s.exp();
        let mut logit = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                logit[i][j] = scale * zi[i].iter().zip(&zt[j]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut logit_t = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                logit_t[i][j] = logit[j][i];
            }
        }
        (ce_rows_f64(&logit) + ce_rows_f64(&logit_t)) / 2.0
    }

    pub(super) fn simclr_oracle_f64(
        z1: &[Vec<f64>],
        z2: &[Vec<f64>],
        tau: f64,
        mask: f64,
    ) -> f64 {
        let (z1, z2) = (normalize_rows_f64(z1), normalize_rows_f64(z2));
        let n = z1.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let rows = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            // [a@b^T | a@a^T - mask*I] / tau, explicitly constructed
            (0..n)
                .map(|i| {
                    let mut row = Vec::with_capacity(2 * n);
                    for j in 0..n {
                        row.push(dot(&a[i], &b[j]) / tau);
                    }
                    for j in 0..n {
                        let m = if i == j { mask } else { 0.0 };
                        row.push((dot(&a[i], &a[j]) - m) / tau);
                    }
                    row
                })
                .collect()
        };
        (ce_rows_f64(&rows(&z1, &z2)) + ce_rows_f64(&rows(&z2, &z1))) / 2.0
    }

    fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor<f32> {
        let d = rows[0].len();
        let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
        Tensor::from_vec(vec![rows.len(), d], flat).unwrap()
    }

    fn unit(d: usize, axis: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn clip_identical_embeddings_is_ln_n() {
        for n in [1usize, 2, 5] {
            let rows = vec![vec![0.3, -0.4, 0.8]; n];
            let t = rows_to_tensor(&rows);
            for s in [0.0f32, 1.7, -0.3] {
                let loss = clip_loss(&t, &t, &Tensor::scalar(s)).unwrap();
                assert!(
                    (f64::from(loss.item()) - (n as f64).ln()).abs() < 1e-6,
                    "n={n} s={s}"
                );
            }
        }
    }

    #[test]
    fn clip_orthonormal_matched_pair() {
        // N=2, zi = zt = {e1, e2}, s = 0 -> ln(1 + e^-1)
        let rows = vec![unit(4, 0), unit(4, 1)];
        let t = rows_to_tensor(&rows);
        let loss = clip_loss(&t, &t, &Tensor::scalar(0.0)).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((f64::from(loss.item()) - expect).abs() < 1e-6);
        assert!((expect - 0.31326).abs() < 1e-5);
        assert!((clip_oracle_f64(&rows, &rows, 0.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn clip_anti_matched_pair() {
        // zt rows swapped -> ln(1 + e)
        let zi = vec![unit(4, 0), unit(4, 1)];
        let zt = vec![unit(4, 1), unit(4, 0)];
        let loss = clip_loss(&rows_to_tensor(&zi), &rows_to_tensor(&zt), &Tensor::scalar(0.0)).unwrap();
        let expect = (1.0 + 1.0f64.exp()).ln();
        assert!((f64::from(loss.item()) - expect).abs() < 1e-6);
        assert!((expect - 1.31326).abs() < 1e-5);
    }

    #[test]
    fn clip_zero_embeddings_hit_norm_guard() {
        let z = Tensor::<f32>::zeros(vec![3, 8]);
        let loss = clip_loss(&z, &z, &Tensor::scalar(2.0)).unwrap();
        assert!((f64::from(loss.item()) - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn clip_batch_mismatch_errors() {
        let a = Tensor::<f32>::zeros(vec![3, 4]);
        let b = Tensor::<f32>::zeros(vec![2, 4]);
        assert!(clip_loss(&a, &b, &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn clip_is_transpose_symmetric() {
        let mut rng = crate::rng::stream(11, "test-clip-sym", &[]);
        for _ in 0..10 {
            let n = rng.random_range(1..6);
            let d = rng.random_range(2..9);
            let za: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let zb: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let s = Tensor::scalar(rng.random_range(-0.5..1.5f32));
            let ab = clip_loss(&rows_to_tensor(&za), &rows_to_tensor(&zb), &s).unwrap();
            let ba = clip_loss(&rows_to_tensor(&zb), &rows_to_tensor(&za), &s).unwrap();
            assert_eq!(ab.item().to_bits(), ba.item().to_bits());
        }
    }

    #[test]
    fn simclr_single_pair_is_near_zero() {
        let z1 = rows_to_tensor(&[vec![1.0, 0.0]]);
        let z2 = rows_to_tensor(&[vec![0.6, 0.8]]);
        let loss = simclr_loss(&z1, &z2, 0.1, 1e9).unwrap();
        assert!(loss.item().abs() < 1e-6, "{}", loss.item());
    }

    #[test]
    fn simclr_all_equal_is_ln_2n_minus_1() {
        let rows = vec![vec![0.5, 0.5, 0.0]; 2];
        let t = rows_to_tensor(&rows);
        let loss = simclr_loss(&t, &t, 0.37, 1e9).unwrap();
        assert!((f64::from(loss.item()) - 3.0f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn simclr_orthonormal_views_tau_tenth() {
        // z1 = z2 = {e1, e2}, tau = 0.1 -> ln(1 + 2 e^-10)
        let rows = vec![unit(3, 0), unit(3, 1)];
        let t = rows_to_tensor(&rows);
        let loss = simclr_loss(&t, &t, 0.1, 1e9).unwrap();
        let expect = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        // lse adds ln(s) to a max of 10; f32 granularity there is ~5e-7
        assert!((f64::from(loss.item()) - expect).abs() < 1e-6);
        assert!((expect - 9.08e-5).abs() < 1e-6);
        assert!((simclr_oracle_f64(&rows, &rows, 0.1, 1e9) - expect).abs() < 1e-12);
    }

    #[test]
    fn losses_match_f64_oracle_on_random_batches() {
        let mut rng = crate::rng::stream(23, "test-loss-oracle", &[]);
        for case in 0..20 {
            let n = rng.random_range(1..=8);
            let d = rng.random_range(2..=16);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
            };
            let (zi, zt, z1, z2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let s: f64 = rng.random_range(-0.3..2.0);
            let tau: f64 = rng.random_range(0.05..1.0);

            let clip = clip_loss(&rows_to_tensor(&zi), &rows_to_tensor(&zt), &Tensor::scalar(s as f32)).unwrap();
            let clip_ref = clip_oracle_f64(&zi, &zt, s);
            assert!(
                (f64::from(clip.item()) - clip_ref).abs() < 1e-5,
                "case {case}: clip {} vs oracle {clip_ref}",
                clip.item()
            );

            let sim = simclr_loss(&rows_to_tensor(&z1), &rows_to_tensor(&z2), tau, 1e9).unwrap();
            let sim_ref = simclr_oracle_f64(&z1, &z2, tau, 1e9);
            assert!(
                (f64::from(sim.item()) - sim_ref).abs() < 1e-5,
                "case {case}: simclr {} vs oracle {sim_ref}",
                sim.item()
            );
        }
    }

    #[test]
    fn losses_invariant_under_batch_permutation() {
        let mut rng = crate::rng::stream(31, "test-perm", &[]);
        let n = 6;
        let d = 8;
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (zi, zt) = (draw(&mut rng), draw(&mut rng));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let apply = |z: &[Vec<f64>]| -> Vec<Vec<f64>> { perm.iter().map(|&i| z[i].clone()).collect() };
        let s = Tensor::scalar(0.4f32);
        let base = clip_loss(&rows_to_tensor(&zi), &rows_to_tensor(&zt), &s).unwrap();
        let perm_loss = clip_loss(&rows_to_tensor(&apply(&zi)), &rows_to_tensor(&apply(&zt)), &s).unwrap();
        assert!((base.item() - perm_loss.item()).abs() < 1e-6);

        let sim_base = simclr_loss(&rows_to_tensor(&zi), &rows_to_tensor(&zt), 0.2, 1e9).unwrap();
        let sim_perm =
            simclr_loss(&rows_to_tensor(&apply(&zi)), &rows_to_tensor(&apply(&zt)), 0.2, 1e9).unwrap();
        assert!((sim_base.item() - sim_perm.item()).abs() < 1e-6);
    }

    fn random_rotation(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f64>> {
        // product of Givens rotations: orthogonal by construction
        let mut m: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for a in 0..d {
            for b in (a + 1)..d {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let (s, c) = theta.sin_cos();
                for row in m.iter_mut() {
                    let (ra, rb) = (row[a], row[b]);
                    row[a] = c * ra - s * rb;
                    row[b] = s * ra + c * rb;
                }
            }
        }
        m
    }

    fn rotate(z: &[Vec<f64>], r: &[Vec<f64>]) -> Vec<Vec<f64>> {
        z.iter()
            .map(|row| {
                (0..r.len())
                    .map(|j| row.iter().enumerate().map(|(k, v)| v * r[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn losses_invariant_under_common_rotation_and_row_rescale() {
        let mut rng = crate::rng::stream(41, "test-rot", &[]);
        let (n, d) = (5, 6);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (zi, zt) = (draw(&mut rng), draw(&mut rng));
        let r = random_rotation(d, &mut rng);
        let s = Tensor::scalar(0.2f32);

        let base = clip_loss(&rows_to_tensor(&zi), &rows_to_tensor(&zt), &s).unwrap().item();
        let rot = clip_loss(&rows_to_tensor(&rotate(&zi, &r)), &rows_to_tensor(&rotate(&zt, &r)), &s)
            .unwrap()
            .item();
        assert!((base - rot).abs() < 1e-5);

        let rescale = |z: &[Vec<f64>], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            z.iter()
                .map(|row| {
                    let k: f64 = rng.random_range(0.1..7.0);
                    row.iter().map(|v| v * k).collect()
                })
                .collect()
        };
        let scaled = clip_loss(
            &rows_to_tensor(&rescale(&zi, &mut rng)),
            &rows_to_tensor(&rescale(&zt, &mut rng)),
            &s,
        )
        .unwrap()
        .item();
        assert!((base - scaled).abs() < 1e-5);

        let sim_base = simclr_loss(&rows_to_tensor(&zi), &rows_to_tensor(&zt), 0.3, 1e9).unwrap().item();
        let sim_rot = simclr_loss(
            &rows_to_tensor(&rotate(&zi, &r)),
            &rows_to_tensor(&rotate(&zt, &r)),
            0.3,
            1e9,
        )
        .unwrap()
        .item();
        assert!((sim_base - sim_rot).abs() < 1e-5);
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = crate::rng::stream(53, "test-nonneg", &[]);
        for _ in 0..20 {
            let n = rng.random_range(1..=6);
            let d = rng.random_range(2..=8);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let clip = clip_loss(&rows_to_tensor(&a), &rows_to_tensor(&b), &Tensor::scalar(0.5)).unwrap();
            assert!(clip.item() >= 0.0);
            let sim = simclr_loss(&rows_to_tensor(&a), &rows_to_tensor(&b), 0.2, 1e9).unwrap();
            assert!(sim.item() >= -1e-6, "mask leakage {}", sim.item());
        }
    }

    fn toy_bundle(tape: &Tape<f32>) -> EmbeddingBundle<f32> {
        let mk = |seed: u64, n: usize, d: usize| {
            let mut rng = crate::rng::stream(seed, "test-bundle", &[]);
            let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            tape.leaf(&Tensor::from_vec(vec![n, d], data).unwrap()).unwrap()
        };
        EmbeddingBundle {
            zi: mk(1, 4, 6),
            zt: mk(2, 4, 6),
            z1: mk(3, 4, 5),
            z2: mk(4, 4, 5),
            log_logit_scale: tape.leaf(&Tensor::scalar(0.3)).unwrap(),
        }
    }

    #[test]
    fn slip_c_zero_is_exactly_clip() {
        let tape = Tape::new();
        let bundle = toy_bundle(&tape);
        let cfg = SlipLossConfig {
            ssl_scale: 0.0,
            ..SlipLossConfig::default()
        };
        let out = slip_loss_simclr(&bundle, &cfg).unwrap();
        assert_eq!(out.total.item().to_bits(), out.clip_part.item().to_bits());
        assert_eq!(out.ssl_part.item(), 0.0);
        // no gradient reaches the SSL inputs
        let grads = out.total.backward().unwrap();
        assert!(grads.get(&bundle.z1).is_none());
        assert!(grads.get(&bundle.zi).is_some());
    }

    #[test]
    fn slip_total_is_sum_of_parts() {
        let tape = Tape::new();
        let bundle = toy_bundle(&tape);
        let cfg = SlipLossConfig::default();
        let out = slip_loss_simclr(&bundle, &cfg).unwrap();
        let expect = cfg.ssl_scale * f64::from(out.ssl_part.item()) + f64::from(out.clip_part.item());
        assert!((f64::from(out.total.item()) - expect).abs() < 1e-6);
    }

    #[test]
    fn slip_decoupled_batch_extents_allowed() {
        let tape = Tape::new();
        let mut bundle = toy_bundle(&tape);
        let mut rng = crate::rng::stream(9, "test-dec", &[]);
        let data: Vec<f32> = (0..7 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        bundle.z1 = tape.leaf(&Tensor::from_vec(vec![7, 5], data.clone()).unwrap()).unwrap();
        bundle.z2 = tape.leaf(&Tensor::from_vec(vec![7, 5], data).unwrap()).unwrap();
        assert!(slip_loss_simclr(&bundle, &SlipLossConfig::default()).is_ok());
    }

    struct SlipLossFn {
        cfg: SlipLossConfig,
    }
    impl TensorFn for SlipLossFn {
        fn apply<E: Scalar>(&self, _tape: &Tape<E>, inputs: &[Tensor<E>]) -> Result<Tensor<E>> {
            let bundle = EmbeddingBundle {
                zi: inputs[0].clone(),
                zt: inputs[1].clone(),
                z1: inputs[2].clone(),
                z2: inputs[3].clone(),
                log_logit_scale: inputs[4].clone(),
            };
            Ok(slip_loss_simclr(&bundle, &self.cfg)?.total)
        }
    }

    #[test]
    fn slip_composite_grad_check() {
        let mut rng = crate::rng::stream(67, "test-slip-grad", &[]);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize| {
            let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::<f64>::from_vec(vec![n, d], data).unwrap()
        };
        let inputs = [
            mk(&mut rng, 4, 6),
            mk(&mut rng, 4, 6),
            mk(&mut rng, 4, 5),
            mk(&mut rng, 4, 5),
            Tensor::<f64>::scalar(0.25),
        ];
        let f = SlipLossFn {
            cfg: SlipLossConfig {
                ssl_scale: 1.0,
                simclr_temperature: 0.5,
                mask_magnitude: 1e9,
            },
        };
        let report = grad_check(&f, &inputs, Precision::F32, 1e-4).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn backward_of_clip_loss_is_finite() {
        let tape = Tape::new();
        let bundle = toy_bundle(&tape);
        let loss = clip_loss(&bundle.zi, &bundle.zt, &bundle.log_logit_scale).unwrap();
        let grads = loss.backward().unwrap();
        for t in [&bundle.zi, &bundle.zt, &bundle.log_logit_scale] {
            let g = grads.get(t).unwrap();
            assert!(g.all_finite());
        }
    }

    #[test]
    fn config_validation() {
        assert!(SlipLossConfig::default().validate().is_ok());
        assert!(SlipLossConfig {
            ssl_scale: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SlipLossConfig {
            simclr_temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SlipLossConfig {
            mask_magnitude: 1.0,
            simclr_temperature: 0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
