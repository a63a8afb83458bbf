//! Finite-difference gradient checking.
//!
//! The numeric side always runs in `f64` with a five-point central
//! stencil at step `h = 1e-3 * max(1, |x|)`; the analytic side replays
//! the same function through the tape at the precision under test.
//! Because the checked function is generic over [`Scalar`], both sides
//! share one definition while remaining independent computations.

use super::{Result, Scalar, Tape, Tensor, TensorError};

/// A scalar-valued tensor function that can be instantiated at any
/// element precision. Implemented by each gradient-check case.
pub trait TensorFn {
    fn apply<E: Scalar>(&self, tape: &Tape<E>, inputs: &[Tensor<E>]) -> Result<Tensor<E>>;
}

// Blanket impl so plain structs can be passed by reference.
impl<T: TensorFn + ?Sized> TensorFn for &T {
    fn apply<E: Scalar>(&self, tape: &Tape<E>, inputs: &[Tensor<E>]) -> Result<Tensor<E>> {
        (**self).apply(tape, inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Acceptance tolerance conventionally paired with this precision.
    pub fn default_tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-4,
            Precision::F64 => 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

const MAX_PROBE_ELEMS: usize = 1000;

fn eval_f64(f: &impl TensorFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let out = f.apply(&tape, inputs)?;
    if out.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(TensorError::Probe(format!("f evaluated to {v}")));
    }
    Ok(v)
}

fn analytic_grads<E: Scalar>(
    f: &impl TensorFn,
    inputs: &[Tensor<f64>],
) -> Result<Vec<Vec<f64>>> {
    let tape = Tape::<E>::new();
    let leaves: Vec<Tensor<E>> = inputs
        .iter()
        .map(|t| tape.leaf(&t.cast::<E>()))
        .collect::<Result<_>>()?;
    let out = f.apply(&tape, &leaves)?;
    if out.len() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = out.backward()?;
    Ok(leaves
        .iter()
        .map(|leaf| grads.get_or_zero(leaf).to_f64_vec())
        .collect())
}

/// Compares tape gradients of `f` against central differences at the
/// given input point. `precision` selects the precision of the analytic
/// side; the stencil is always evaluated in `f64`.
pub fn grad_check(
    f: &impl TensorFn,
    inputs: &[Tensor<f64>],
    precision: Precision,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let total: usize = inputs.iter().map(Tensor::len).sum();
    if total >= MAX_PROBE_ELEMS {
        return Err(TensorError::Contract(format!(
            "grad_check probes every element; {total} elements exceeds the {MAX_PROBE_ELEMS} cap"
        )));
    }

    let analytic = match precision {
        Precision::F32 => analytic_grads::<f32>(f, inputs)?,
        Precision::F64 => analytic_grads::<f64>(f, inputs)?,
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut point: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let base = input.to_f64_vec();
        for ei in 0..base.len() {
            let x = base[ei];
            let h = 1e-3 * x.abs().max(1.0);
            let mut probe = |delta: f64| -> Result<f64> {
                let mut d = base.clone();
                d[ei] = x + delta;
                point[ti] = Tensor::from_f64_slice(input.shape().to_vec(), &d)?;
                eval_f64(f, &point)
            };
            let f_p2 = probe(2.0 * h)?;
            let f_p1 = probe(h)?;
            let f_m1 = probe(-h)?;
            let f_m2 = probe(-2.0 * h)?;
            let numeric = (-f_p2 + 8.0 * f_p1 - 8.0 * f_m1 + f_m2) / (12.0 * h);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((ti, ei));
            }
        }
        point[ti] = input.clone();
    }
    Ok(GradCheckReport {
        max_rel_err,
        tolerance,
        worst,
    })
}
