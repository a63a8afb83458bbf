//! The gradient-check suite behind the `gradcheck` command: every
//! differentiable op plus both contrastive losses, each probed on ten
//! random small instances per precision.

use super::HarnessError;
use crate::objectives::{clip_loss, simclr_loss, slip_loss_simclr, EmbeddingBundle, SlipLossConfig};
use crate::tensor::{grad_check, Precision, Result as TResult, Scalar, Tape, Tensor, TensorFn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct SuiteReport {
    pub op: &'static str,
    pub precision: Precision,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type CaseFn = Box<dyn Fn(&Tape<f64>, &[Tensor<f64>]) -> TResult<Tensor<f64>>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("random tensor")
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: GenericCase,
}

/// One op under test, defined once for both precisions.
enum GenericCase {
    Matmul,
    Bmm,
    BmmNt,
    Softmax(usize),
    CrossEntropy(Vec<usize>),
    LayerNorm(f64),
    Gelu,
    Exp,
    L2Normalize,
    MulScalarTensor,
    AddBroadcast,
    BroadcastRows(usize),
    ConcatAxis(usize),
    GatherRows(Vec<usize>),
    Embedding(Vec<usize>),
    SplitMergeHeads(usize),
    Transpose,
    ClipLoss,
    SimclrLoss { tau: f64 },
    SlipLoss { cfg: SlipLossConfig },
}

impl TensorFn for GenericCase {
    fn apply<E: Scalar>(&self, _tape: &Tape<E>, x: &[Tensor<E>]) -> TResult<Tensor<E>> {
        match self {
            GenericCase::Matmul => x[0].matmul(&x[1])?.sum(),
            GenericCase::Bmm => x[0].bmm(&x[1])?.gelu()?.sum(),
            GenericCase::BmmNt => x[0].bmm_nt(&x[1])?.gelu()?.sum(),
            GenericCase::Softmax(axis) => {
                // weighted sum makes every softmax output matter
                let y = x[0].softmax(*axis)?;
                y.mul(&x[1])?.sum()
            }
            GenericCase::CrossEntropy(labels) => x[0].cross_entropy_logits(labels),
            GenericCase::LayerNorm(eps) => x[0].layer_norm(&x[1], &x[2], *eps)?.mul(&x[3])?.sum(),
            GenericCase::Gelu => x[0].gelu()?.mul(&x[1])?.sum(),
            GenericCase::Exp => x[0].exp()?.mul(&x[1])?.sum(),
            GenericCase::L2Normalize => x[0].l2_normalize(1e-8)?.mul(&x[1])?.sum(),
            GenericCase::MulScalarTensor => x[0].mul_scalar_tensor(&x[1])?.mul(&x[2])?.sum(),
            GenericCase::AddBroadcast => x[0].add_broadcast(&x[1])?.gelu()?.sum(),
            GenericCase::BroadcastRows(n) => x[0].broadcast_rows(*n)?.mul(&x[1])?.sum(),
            GenericCase::ConcatAxis(axis) => x[0].concat(&x[1], *axis)?.gelu()?.sum(),
            GenericCase::GatherRows(idx) => x[0].gather_rows(idx)?.mul(&x[1])?.sum(),
            GenericCase::Embedding(ids) => x[0].embedding(ids)?.mul(&x[1])?.sum(),
            GenericCase::SplitMergeHeads(h) => {
                let split = x[0].split_heads(*h)?;
                let back = split.merge_heads(*h)?;
                back.mul(&x[1])?.gelu()?.sum()
            }
            GenericCase::Transpose => x[0].transpose2()?.mul(&x[1])?.sum(),
            GenericCase::ClipLoss => clip_loss(&x[0], &x[1], &x[2]),
            GenericCase::SimclrLoss { tau } => simclr_loss(&x[0], &x[1], *tau, 1e9),
            GenericCase::SlipLoss { cfg } => {
                let bundle = EmbeddingBundle {
                    zi: x[0].clone(),
                    zt: x[1].clone(),
                    z1: x[2].clone(),
                    z2: x[3].clone(),
                    log_logit_scale: x[4].clone(),
                };
                Ok(slip_loss_simclr(&bundle, cfg)?.total)
            }
        }
    }
}

fn instance(op: &'static str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![m, k], -1.5, 1.5),
                    rand_tensor(rng, vec![k, n], -1.5, 1.5),
                ],
                f: GenericCase::Matmul,
            }
        }
        "bmm" => {
            let (g, m, k, n) = (2, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![g, m, k], -1.0, 1.0),
                    rand_tensor(rng, vec![g, k, n], -1.0, 1.0),
                ],
                f: GenericCase::Bmm,
            }
        }
        "bmm_nt" => {
            let (g, m, k, n) = (2, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![g, m, k], -1.0, 1.0),
                    rand_tensor(rng, vec![g, n, k], -1.0, 1.0),
                ],
                f: GenericCase::BmmNt,
            }
        }
        "softmax" => {
            let (n, c) = (rng.random_range(1..4), rng.random_range(2..6));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n, c], -2.0, 2.0),
                    rand_tensor(rng, vec![n, c], -1.0, 1.0),
                ],
                f: GenericCase::Softmax(1),
            }
        }
        "cross_entropy_logits" => {
            let (n, c) = (rng.random_range(1..5), rng.random_range(2..7));
            let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
            Case {
                inputs: vec![rand_tensor(rng, vec![n, c], -2.0, 2.0)],
                f: GenericCase::CrossEntropy(labels),
            }
        }
        "layer_norm" => {
            let (n, d) = (rng.random_range(1..4), rng.random_range(2..7));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n, d], -1.5, 1.5),
                    rand_tensor(rng, vec![d], 0.5, 1.5),
                    rand_tensor(rng, vec![d], -0.5, 0.5),
                    rand_tensor(rng, vec![n, d], -1.0, 1.0),
                ],
                f: GenericCase::LayerNorm(1e-5),
            }
        }
        "gelu" => {
            let n = rng.random_range(2..12);
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n], -2.5, 2.5),
                    rand_tensor(rng, vec![n], -1.0, 1.0),
                ],
                f: GenericCase::Gelu,
            }
        }
        "exp" => {
            let n = rng.random_range(2..10);
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n], -1.5, 1.5),
                    rand_tensor(rng, vec![n], -1.0, 1.0),
                ],
                f: GenericCase::Exp,
            }
        }
        "l2_normalize" => {
            let (n, d) = (rng.random_range(1..5), rng.random_range(2..9));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n, d], 0.2, 1.5),
                    rand_tensor(rng, vec![n, d], -1.0, 1.0),
                ],
                f: GenericCase::L2Normalize,
            }
        }
        "mul_scalar_tensor" => {
            let n = rng.random_range(2..8);
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n], -1.5, 1.5),
                    rand_tensor(rng, vec![1], 0.3, 1.7),
                    rand_tensor(rng, vec![n], -1.0, 1.0),
                ],
                f: GenericCase::MulScalarTensor,
            }
        }
        "add_broadcast" => {
            let (b, s, d) = (2, rng.random_range(1..4), rng.random_range(2..5));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![b, s, d], -1.0, 1.0),
                    rand_tensor(rng, vec![s, d], -1.0, 1.0),
                ],
                f: GenericCase::AddBroadcast,
            }
        }
        "broadcast_rows" => {
            let (n, d) = (rng.random_range(2..5), rng.random_range(2..6));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![d], -1.0, 1.0),
                    rand_tensor(rng, vec![n, d], -1.0, 1.0),
                ],
                f: GenericCase::BroadcastRows(n),
            }
        }
        "concat" => {
            let (n, a, b) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n, a], -1.0, 1.0),
                    rand_tensor(rng, vec![n, b], -1.0, 1.0),
                ],
                f: GenericCase::ConcatAxis(1),
            }
        }
        "gather_rows" => {
            let (b, s, d) = (rng.random_range(1..4), rng.random_range(2..5), rng.random_range(2..5));
            let idx = (0..b).map(|_| rng.random_range(0..s)).collect();
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![b, s, d], -1.0, 1.0),
                    rand_tensor(rng, vec![b, d], -1.0, 1.0),
                ],
                f: GenericCase::GatherRows(idx),
            }
        }
        "embedding" => {
            let (v, d, l) = (rng.random_range(3..8), rng.random_range(2..5), rng.random_range(1..6));
            let ids = (0..l).map(|_| rng.random_range(0..v)).collect();
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![v, d], -1.0, 1.0),
                    rand_tensor(rng, vec![l, d], -1.0, 1.0),
                ],
                f: GenericCase::Embedding(ids),
            }
        }
        "split_merge_heads" => {
            let (b, s, h, dh) = (2, rng.random_range(1..4), 2, rng.random_range(1..4));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![b, s, h * dh], -1.0, 1.0),
                    rand_tensor(rng, vec![b, s, h * dh], -1.0, 1.0),
                ],
                f: GenericCase::SplitMergeHeads(h),
            }
        }
        "transpose2" => {
            let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![m, n], -1.0, 1.0),
                    rand_tensor(rng, vec![n, m], -1.0, 1.0),
                ],
                f: GenericCase::Transpose,
            }
        }
        "clip_loss" => {
            let (n, d) = (rng.random_range(2..6), rng.random_range(2..8));
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n, d], -1.0, 1.0),
                    rand_tensor(rng, vec![n, d], -1.0, 1.0),
                    rand_tensor(rng, vec![1], -0.3, 0.7),
                ],
                f: GenericCase::ClipLoss,
            }
        }
        "simclr_loss" => {
            let (n, d) = (rng.random_range(2..6), rng.random_range(2..8));
            let tau = rng.random_range(0.5..1.0);
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n, d], -1.0, 1.0),
                    rand_tensor(rng, vec![n, d], -1.0, 1.0),
                ],
                f: GenericCase::SimclrLoss { tau },
            }
        }
        "slip_loss" => {
            let (n, dc, ds) = (rng.random_range(2..5), rng.random_range(2..6), rng.random_range(2..6));
            let cfg = SlipLossConfig {
                ssl_scale: rng.random_range(0.5..1.5),
                simclr_temperature: rng.random_range(0.5..1.0),
                mask_magnitude: 1e9,
            };
            Case {
                inputs: vec![
                    rand_tensor(rng, vec![n, dc], -1.0, 1.0),
                    rand_tensor(rng, vec![n, dc], -1.0, 1.0),
                    rand_tensor(rng, vec![n, ds], -1.0, 1.0),
                    rand_tensor(rng, vec![n, ds], -1.0, 1.0),
                    rand_tensor(rng, vec![1], -0.3, 0.7),
                ],
                f: GenericCase::SlipLoss { cfg },
            }
        }
        other => unreachable!("unknown suite op {other}"),
    }
}

pub const SUITE_OPS: &[&str] = &[
    "matmul",
    "bmm",
    "bmm_nt",
    "softmax",
    "cross_entropy_logits",
    "layer_norm",
    "gelu",
    "exp",
    "l2_normalize",
    "mul_scalar_tensor",
    "add_broadcast",
    "broadcast_rows",
    "concat",
    "gather_rows",
    "embedding",
    "split_merge_heads",
    "transpose2",
    "clip_loss",
    "simclr_loss",
    "slip_loss",
];

/// Runs the whole suite: 10 random instances per op per precision,
/// reporting the max relative error observed per (op, precision).
pub fn run_gradcheck_suite(seed: u64) -> Result<Vec<SuiteReport>, HarnessError> {
    let mut reports = Vec::new();
    for &op in SUITE_OPS {
        for precision in [Precision::F32, Precision::F64] {
            let tolerance = precision.default_tolerance();
            let mut worst = 0.0f64;
            for trial in 0..10u64 {
                let mut rng = crate::rng::stream(seed, "gradcheck", &[fnv_op(op), trial]);
                let case = instance(op, &mut rng);
                let report = grad_check(&case.f, &case.inputs, precision, tolerance)
                    .map_err(|e| HarnessError::Config(format!("gradcheck {op}: {e}")))?;
                worst = worst.max(report.max_rel_err);
            }
            reports.push(SuiteReport {
                op,
                precision,
                max_rel_err: worst,
                tolerance,
                passed: worst < tolerance,
            });
        }
    }
    Ok(reports)
}

fn fnv_op(op: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in op.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[allow(dead_code)]
fn _case_fn_is_object_safe(_: CaseFn) {}
