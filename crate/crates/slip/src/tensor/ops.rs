//! Differentiable operations.
//!
//! Shapes are validated loudly; the only broadcasting is the
//! suffix-shape pattern of [`Tensor::add_broadcast`] (bias and
//! positional-embedding adds). Matmul kernels accumulate in a fixed
//! order and may parallelize over independent output rows, so results
//! are bit-identical for a given input regardless of thread count.

use super::{BackFn, Node, NodeRef, Result, Scalar, Tape, Tensor, TensorError};
use rayon::prelude::*;
use std::sync::Arc;

/// Below this many multiply-adds the sequential kernel wins.
const PAR_WORK_THRESHOLD: usize = 1 << 16;

fn tape_of<E: Scalar>(xs: &[&Tensor<E>]) -> Result<Option<Tape<E>>> {
    let mut found: Option<Tape<E>> = None;
    for x in xs {
        if let Some(nr) = &x.node {
            match &found {
                None => found = Some(nr.tape.clone()),
                Some(t) => {
                    if !t.same_tape(&nr.tape) {
                        return Err(TensorError::DisjointTapes);
                    }
                }
            }
        }
    }
    Ok(found)
}

fn make<E: Scalar>(
    tape: Option<Tape<E>>,
    shape: Vec<usize>,
    data: Vec<E>,
    back: impl FnOnce() -> BackFn<E>,
) -> Result<Tensor<E>> {
    match tape {
        None => Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }),
        Some(tape) => {
            let len = data.len();
            let id = tape.push(Node {
                back: Some(back()),
                len,
            })?;
            Ok(Tensor {
                shape,
                data: Arc::new(data),
                node: Some(NodeRef { tape, id }),
            })
        }
    }
}

// ---- raw kernels ----

fn matmul_row<E: Scalar>(a: &[E], b: &[E], i: usize, k: usize, n: usize, row: &mut [E]) {
    for kk in 0..k {
        let aik = a[i * k + kk];
        let brow = &b[kk * n..kk * n + n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o += aik * bv;
        }
    }
}

/// C[M,N] = A[M,K] @ B[K,N]
pub(crate) fn matmul_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    if m * k * n >= PAR_WORK_THRESHOLD && m >= 2 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(a, b, i, k, n, row));
    } else {
        for i in 0..m {
            matmul_row(a, b, i, k, n, &mut out[i * n..(i + 1) * n]);
        }
    }
    out
}

fn matmul_nt_row<E: Scalar>(a: &[E], b: &[E], i: usize, k: usize, _n: usize, row: &mut [E]) {
    let arow = &a[i * k..(i + 1) * k];
    for (j, o) in row.iter_mut().enumerate() {
        let brow = &b[j * k..(j + 1) * k];
        let mut acc = E::ZERO;
        for (&av, &bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
        *o = acc;
    }
}

fn transpose_raw<E: Scalar>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// C[K,N] = A[M,K]^T @ B[M,N]
fn matmul_tn_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let at = transpose_raw(a, m, k);
    matmul_raw(&at, b, k, m, n)
}

fn bmm_each<E: Scalar, F>(groups: usize, out_elems: usize, out: &mut [E], f: F)
where
    F: Fn(usize, &mut [E]) + Send + Sync,
    E: Send + Sync,
{
    if groups * out_elems >= PAR_WORK_THRESHOLD && groups >= 2 {
        out.par_chunks_mut(out_elems).enumerate().for_each(|(g, o)| f(g, o));
    } else {
        for (g, o) in out.chunks_mut(out_elems).enumerate() {
            f(g, o);
        }
    }
}

// ---- ops ----

impl<E: Scalar> Tensor<E> {
    /// Matrix product. `self` may carry leading batch dims (collapsed
    /// into rows); `other` must be 2-D `[K, N]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rank() < 2 || other.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let k = *self.shape.last().unwrap();
        if k != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let n = other.shape[1];
        let m = self.len() / k;
        let out = matmul_raw(&self.data, &other.data, m, k, n);
        let mut out_shape = self.shape.clone();
        *out_shape.last_mut().unwrap() = n;

        let tape = tape_of(&[self, other])?;
        let (aid, bid) = (self.node_id(), other.node_id());
        let (a_data, b_data) = (Arc::clone(&self.data), Arc::clone(&other.data));
        make(tape, out_shape, out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(id) = aid {
                    // dA = dC @ B^T; transposing B first keeps the inner
                    // loop contiguous
                    let bt = transpose_raw(&b_data, k, n);
                    grads.push((id, matmul_raw(g, &bt, m, n, k)));
                }
                if let Some(id) = bid {
                    grads.push((id, matmul_tn_raw(&a_data, g, m, k, n)));
                }
                grads
            })
        })
    }

    /// Grouped matrix product: `[G,M,K] @ [G,K,N] -> [G,M,N]`.
    pub fn bmm(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self, other);
        if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (groups, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
        let mut out = vec![E::ZERO; groups * m * n];
        {
            let (ad, bd) = (&a.data, &b.data);
            bmm_each(groups, m * n, &mut out, |g, o| {
                let ag = &ad[g * m * k..(g + 1) * m * k];
                let bg = &bd[g * k * n..(g + 1) * k * n];
                for i in 0..m {
                    matmul_row(ag, bg, i, k, n, &mut o[i * n..(i + 1) * n]);
                }
            });
        }
        let tape = tape_of(&[a, b])?;
        let (aid, bid) = (a.node_id(), b.node_id());
        let (a_data, b_data) = (Arc::clone(&a.data), Arc::clone(&b.data));
        make(tape, vec![groups, m, n], out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(id) = aid {
                    // dA = dC @ B^T per group
                    let mut ga = vec![E::ZERO; groups * m * k];
                    bmm_each(groups, m * k, &mut ga, |gi, o| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bg = &b_data[gi * k * n..(gi + 1) * k * n];
                        for i in 0..m {
                            matmul_nt_row(gg, bg, i, n, k, &mut o[i * k..(i + 1) * k]);
                        }
                    });
                    grads.push((id, ga));
                }
                if let Some(id) = bid {
                    // dB = A^T @ dC per group
                    let mut gb = vec![E::ZERO; groups * k * n];
                    bmm_each(groups, k * n, &mut gb, |gi, o| {
                        let ag = &a_data[gi * m * k..(gi + 1) * m * k];
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        o.copy_from_slice(&matmul_tn_raw(ag, gg, m, k, n));
                    });
                    grads.push((id, gb));
                }
                grads
            })
        })
    }

    /// Grouped product against a transposed right operand:
    /// `[G,M,K] @ [G,N,K]^T -> [G,M,N]`. This is the attention-score and
    /// contrastive-similarity shape.
    pub fn bmm_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (a, b) = (self, other);
        if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_nt",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let (groups, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[1]);
        let mut out = vec![E::ZERO; groups * m * n];
        {
            let (ad, bd) = (&a.data, &b.data);
            bmm_each(groups, m * n, &mut out, |g, o| {
                let ag = &ad[g * m * k..(g + 1) * m * k];
                let bg = &bd[g * n * k..(g + 1) * n * k];
                for i in 0..m {
                    matmul_nt_row(ag, bg, i, k, n, &mut o[i * n..(i + 1) * n]);
                }
            });
        }
        let tape = tape_of(&[a, b])?;
        let (aid, bid) = (a.node_id(), b.node_id());
        let (a_data, b_data) = (Arc::clone(&a.data), Arc::clone(&b.data));
        make(tape, vec![groups, m, n], out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(id) = aid {
                    // dA = dC @ B per group
                    let mut ga = vec![E::ZERO; groups * m * k];
                    bmm_each(groups, m * k, &mut ga, |gi, o| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bg = &b_data[gi * n * k..(gi + 1) * n * k];
                        for i in 0..m {
                            matmul_row(gg, bg, i, n, k, &mut o[i * k..(i + 1) * k]);
                        }
                    });
                    grads.push((id, ga));
                }
                if let Some(id) = bid {
                    // dB = dC^T @ A per group
                    let mut gb = vec![E::ZERO; groups * n * k];
                    bmm_each(groups, n * k, &mut gb, |gi, o| {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ag = &a_data[gi * m * k..(gi + 1) * m * k];
                        o.copy_from_slice(&matmul_tn_raw(gg, ag, m, n, k));
                    });
                    grads.push((id, gb));
                }
                grads
            })
        })
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose2",
                shape: self.shape.clone(),
                reason: "expected rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let out = transpose_raw(&self.data, r, c);
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        make(tape, vec![c, r], out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => vec![(id, transpose_raw(g, c, r))],
                None => vec![],
            })
        })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count differs from {:?}", self.shape),
            });
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        make(tape, shape, self.data.to_vec(), move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => vec![(id, g.to_vec())],
                None => vec![],
            })
        })
    }

    fn zip_elementwise(
        &self,
        other: &Tensor<E>,
        op: &'static str,
        f: impl Fn(E, E) -> E,
        back_l: impl Fn(E, E, E) -> E + 'static,
        back_r: impl Fn(E, E, E) -> E + 'static,
    ) -> Result<Tensor<E>> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let out: Vec<E> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let tape = tape_of(&[self, other])?;
        let (aid, bid) = (self.node_id(), other.node_id());
        let (a_data, b_data) = (Arc::clone(&self.data), Arc::clone(&other.data));
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(id) = aid {
                    let ga = g
                        .iter()
                        .zip(a_data.iter().zip(b_data.iter()))
                        .map(|(&gv, (&a, &b))| back_l(gv, a, b))
                        .collect();
                    grads.push((id, ga));
                }
                if let Some(id) = bid {
                    let gb = g
                        .iter()
                        .zip(a_data.iter().zip(b_data.iter()))
                        .map(|(&gv, (&a, &b))| back_r(gv, a, b))
                        .collect();
                    grads.push((id, gb));
                }
                grads
            })
        })
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.zip_elementwise(other, "add", |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.zip_elementwise(other, "sub", |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.zip_elementwise(other, "mul", |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    /// Multiplies by a compile-time-known constant.
    pub fn scale(&self, c: f64) -> Result<Tensor<E>> {
        let cv = E::from_f64(c);
        let out = self.data.iter().map(|&v| v * cv).collect();
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => vec![(id, g.iter().map(|&gv| gv * cv).collect())],
                None => vec![],
            })
        })
    }

    /// Multiplies every element by a one-element tensor, with gradient
    /// flowing into both operands (used for the learnable logit scale).
    pub fn mul_scalar_tensor(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        if s.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "mul_scalar_tensor",
                shape: s.shape.clone(),
                reason: "expected one element".into(),
            });
        }
        let sv = s.data[0];
        let out = self.data.iter().map(|&v| v * sv).collect();
        let tape = tape_of(&[self, s])?;
        let (xid, sid) = (self.node_id(), s.node_id());
        let x_data = Arc::clone(&self.data);
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(id) = xid {
                    grads.push((id, g.iter().map(|&gv| gv * sv).collect()));
                }
                if let Some(id) = sid {
                    let mut acc = E::ZERO;
                    for (&gv, &xv) in g.iter().zip(x_data.iter()) {
                        acc += gv * xv;
                    }
                    grads.push((id, vec![acc]));
                }
                grads
            })
        })
    }

    /// Elementwise exponential.
    pub fn exp(&self) -> Result<Tensor<E>> {
        let out: Vec<E> = self.data.iter().map(|&v| v.exp()).collect();
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let y = out.clone();
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => vec![(id, g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect())],
                None => vec![],
            })
        })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<E>> {
        let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = E::from_f64(0.044_715);
        let half = E::from_f64(0.5);
        let mut tanh_u = vec![E::ZERO; self.len()];
        let out: Vec<E> = self
            .data
            .iter()
            .zip(tanh_u.iter_mut())
            .map(|(&x, t)| {
                let u = c * (x + a * x * x * x);
                *t = u.tanh();
                half * x * (E::ONE + *t)
            })
            .collect();
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let x_data = Arc::clone(&self.data);
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let three = E::from_f64(3.0);
                    let gx = g
                        .iter()
                        .zip(x_data.iter().zip(tanh_u.iter()))
                        .map(|(&gv, (&x, &t))| {
                            let du = c * (E::ONE + three * a * x * x);
                            let dy = half * (E::ONE + t) + half * x * (E::ONE - t * t) * du;
                            gv * dy
                        })
                        .collect();
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: self.shape.clone(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let c = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = vec![E::ZERO; self.len()];
        if inner == 1 {
            for (row_out, row_in) in out.chunks_exact_mut(c).zip(self.data.chunks_exact(c)) {
                let mut mx = row_in[0];
                for &v in &row_in[1..] {
                    mx = mx.maximum(v);
                }
                let mut denom = E::ZERO;
                for (o, &v) in row_out.iter_mut().zip(row_in) {
                    let e = (v - mx).exp();
                    *o = e;
                    denom += e;
                }
                for o in row_out.iter_mut() {
                    *o = *o / denom;
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * c * inner + i;
                    let mut mx = self.data[base];
                    for j in 1..c {
                        mx = mx.maximum(self.data[base + j * inner]);
                    }
                    let mut denom = E::ZERO;
                    for j in 0..c {
                        let e = (self.data[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        denom += e;
                    }
                    for j in 0..c {
                        out[base + j * inner] = out[base + j * inner] / denom;
                    }
                }
            }
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let y = out.clone();
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gx = vec![E::ZERO; g.len()];
                    if inner == 1 {
                        for ((gx_row, g_row), y_row) in gx
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(y.chunks_exact(c))
                        {
                            let mut dot = E::ZERO;
                            for (&gv, &yv) in g_row.iter().zip(y_row) {
                                dot += gv * yv;
                            }
                            for ((o, &gv), &yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                                *o = yv * (gv - dot);
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * c * inner + i;
                                let mut dot = E::ZERO;
                                for j in 0..c {
                                    let idx = base + j * inner;
                                    dot += g[idx] * y[idx];
                                }
                                for j in 0..c {
                                    let idx = base + j * inner;
                                    gx[idx] = y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    }
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }

    /// Mean over rows of `logsumexp(row) - row[label]`; the InfoNCE /
    /// NT-Xent substrate.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy_logits",
                shape: self.shape.clone(),
                reason: "expected rank 2".into(),
            });
        }
        let (n, c) = (self.shape[0], self.shape[1]);
        if labels.len() != n {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy_logits",
                shape: self.shape.clone(),
                reason: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        for &l in labels {
            if l >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_logits",
                    index: l,
                    bound: c,
                });
            }
        }
        let mut lses = vec![E::ZERO; n];
        let mut total = E::ZERO;
        for r in 0..n {
            let row = &self.data[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &v in &row[1..] {
                mx = mx.maximum(v);
            }
            let mut s = E::ZERO;
            for &v in row {
                s += (v - mx).exp();
            }
            let lse = mx + s.ln();
            lses[r] = lse;
            total += lse - row[labels[r]];
        }
        let inv_n = E::from_f64(1.0 / n as f64);
        let loss = total * inv_n;
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let x_data = Arc::clone(&self.data);
        let labels = labels.to_vec();
        make(tape, vec![1], vec![loss], move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let go = g[0] * inv_n;
                    let mut gx = vec![E::ZERO; n * c];
                    for r in 0..n {
                        for j in 0..c {
                            let p = (x_data[r * c + j] - lses[r]).exp();
                            let t = if j == labels[r] { E::ONE } else { E::ZERO };
                            gx[r * c + j] = go * (p - t);
                        }
                    }
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }

    /// Normalizes each trailing vector to zero mean / unit variance,
    /// then applies the affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self.shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: self.shape.clone(),
            reason: "rank 0".into(),
        })?;
        if gain.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be > 0".into()));
        }
        let rows = self.len() / d;
        let epsv = E::from_f64(eps);
        let inv_d = E::from_f64(1.0 / d as f64);
        let mut out = vec![E::ZERO; self.len()];
        let mut xhat = vec![E::ZERO; self.len()];
        let mut invs = vec![E::ZERO; rows];
        for r in 0..rows {
            let x = &self.data[r * d..(r + 1) * d];
            let mut mu = E::ZERO;
            for &v in x {
                mu += v;
            }
            mu = mu * inv_d;
            let mut var = E::ZERO;
            for &v in x {
                let dlt = v - mu;
                var += dlt * dlt;
            }
            var = var * inv_d;
            let inv = E::ONE / (var + epsv).sqrt();
            invs[r] = inv;
            for j in 0..d {
                let xh = (x[j] - mu) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gain.data[j] + bias.data[j];
            }
        }
        let tape = tape_of(&[self, gain, bias])?;
        let (xid, gid, bid) = (self.node_id(), gain.node_id(), bias.node_id());
        let gain_data = Arc::clone(&gain.data);
        let xhat = Arc::new(xhat);
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(id) = xid {
                    let mut gx = vec![E::ZERO; rows * d];
                    for r in 0..rows {
                        let mut m1 = E::ZERO;
                        let mut m2 = E::ZERO;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gain_data[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gain_data[j];
                            gx[r * d + j] = invs[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    grads.push((id, gx));
                }
                if let Some(id) = gid {
                    let mut gg = vec![E::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    grads.push((id, gg));
                }
                if let Some(id) = bid {
                    let mut gb = vec![E::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    grads.push((id, gb));
                }
                grads
            })
        })
    }

    /// Scales each row of an `[N, D]` tensor to unit Euclidean norm.
    /// Rows with norm below `eps` map to zeros (and zero gradient).
    pub fn l2_normalize(&self, eps: f64) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "l2_normalize",
                shape: self.shape.clone(),
                reason: "expected rank 2".into(),
            });
        }
        let (n, d) = (self.shape[0], self.shape[1]);
        let epsv = E::from_f64(eps);
        let mut out = vec![E::ZERO; self.len()];
        let mut norms = vec![E::ZERO; n];
        for r in 0..n {
            let x = &self.data[r * d..(r + 1) * d];
            let mut s = E::ZERO;
            for &v in x {
                s += v * v;
            }
            let norm = s.sqrt();
            norms[r] = norm;
            if norm.to_f64() >= epsv.to_f64() {
                let inv = E::ONE / norm;
                for j in 0..d {
                    out[r * d + j] = x[j] * inv;
                }
            }
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let y = out.clone();
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gx = vec![E::ZERO; n * d];
                    for r in 0..n {
                        if norms[r].to_f64() < epsv.to_f64() {
                            continue;
                        }
                        let inv = E::ONE / norms[r];
                        let mut dot = E::ZERO;
                        for j in 0..d {
                            dot += g[r * d + j] * y[r * d + j];
                        }
                        for j in 0..d {
                            gx[r * d + j] = (g[r * d + j] - y[r * d + j] * dot) * inv;
                        }
                    }
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }

    pub fn sum(&self) -> Result<Tensor<E>> {
        let mut s = E::ZERO;
        for &v in self.data.iter() {
            s += v;
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let len = self.len();
        make(tape, vec![1], vec![s], move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => vec![(id, vec![g[0]; len])],
                None => vec![],
            })
        })
    }

    pub fn mean(&self) -> Result<Tensor<E>> {
        let len = self.len();
        self.sum()?.scale(1.0 / len as f64)
    }

    /// Adds `p` broadcast over leading dimensions; `p.shape` must be a
    /// suffix of `self.shape` (the bias / positional-embedding pattern).
    pub fn add_broadcast(&self, p: &Tensor<E>) -> Result<Tensor<E>> {
        let sr = self.rank();
        let pr = p.rank();
        if pr > sr || self.shape[sr - pr..] != p.shape[..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: self.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        let plen = p.len();
        let mut out = self.data.to_vec();
        for chunk in out.chunks_exact_mut(plen) {
            for (o, &pv) in chunk.iter_mut().zip(p.data.iter()) {
                *o += pv;
            }
        }
        let tape = tape_of(&[self, p])?;
        let (xid, pid) = (self.node_id(), p.node_id());
        make(tape, self.shape.clone(), out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                if let Some(id) = xid {
                    grads.push((id, g.to_vec()));
                }
                if let Some(id) = pid {
                    let mut gp = vec![E::ZERO; plen];
                    for chunk in g.chunks_exact(plen) {
                        for (a, &gv) in gp.iter_mut().zip(chunk) {
                            *a += gv;
                        }
                    }
                    grads.push((id, gp));
                }
                grads
            })
        })
    }

    /// Tiles a `[D]` vector into `[n, D]` rows; the gradient sums over rows.
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor<E>> {
        if self.rank() != 1 {
            return Err(TensorError::InvalidShape {
                op: "broadcast_rows",
                shape: self.shape.clone(),
                reason: "expected rank 1".into(),
            });
        }
        let d = self.shape[0];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&self.data);
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        make(tape, vec![n, d], out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gv = vec![E::ZERO; d];
                    for r in 0..n {
                        for j in 0..d {
                            gv[j] += g[r * d + j];
                        }
                    }
                    vec![(id, gv)]
                }
                None => vec![],
            })
        })
    }

    /// Concatenates two tensors along `axis`; all other extents must match.
    pub fn concat(&self, other: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        if self.rank() != other.rank() || axis >= self.rank() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (i, (&a, &b)) in self.shape.iter().zip(other.shape.iter()).enumerate() {
            if i != axis && a != b {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape.clone(),
                    rhs: other.shape.clone(),
                });
            }
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let (ca, cb) = (self.shape[axis], other.shape[axis]);
        let (blk_a, blk_b) = (ca * inner, cb * inner);
        let mut out = Vec::with_capacity(self.len() + other.len());
        for o in 0..outer {
            out.extend_from_slice(&self.data[o * blk_a..(o + 1) * blk_a]);
            out.extend_from_slice(&other.data[o * blk_b..(o + 1) * blk_b]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = ca + cb;
        let tape = tape_of(&[self, other])?;
        let (aid, bid) = (self.node_id(), other.node_id());
        let (alen, blen) = (self.len(), other.len());
        make(tape, shape, out, move || {
            Box::new(move |g: &[E]| {
                let mut grads = Vec::new();
                let blk = blk_a + blk_b;
                if let Some(id) = aid {
                    let mut ga = Vec::with_capacity(alen);
                    for o in 0..outer {
                        ga.extend_from_slice(&g[o * blk..o * blk + blk_a]);
                    }
                    grads.push((id, ga));
                }
                if let Some(id) = bid {
                    let mut gb = Vec::with_capacity(blen);
                    for o in 0..outer {
                        gb.extend_from_slice(&g[o * blk + blk_a..(o + 1) * blk]);
                    }
                    grads.push((id, gb));
                }
                grads
            })
        })
    }

    /// Slice `len` consecutive entries of the leading axis starting at `start`.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        if self.rank() == 0 || start + len > self.shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow0",
                index: start + len,
                bound: *self.shape.first().unwrap_or(&0),
            });
        }
        let stride: usize = self.shape[1..].iter().product();
        let out = self.data[start * stride..(start + len) * stride].to_vec();
        let mut shape = self.shape.clone();
        shape[0] = len;
        let total = self.len();
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        make(tape, shape, out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gx = vec![E::ZERO; total];
                    gx[start * stride..(start + len) * stride].copy_from_slice(g);
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }

    /// Picks one row per batch item: `[B,S,D]` with indices of length B
    /// gives `[B,D]` (class-token and EOS pooling).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 3 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: self.shape.clone(),
                reason: "expected rank 3".into(),
            });
        }
        let (b, s, d) = (self.shape[0], self.shape[1], self.shape[2]);
        if idx.len() != b {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: self.shape.clone(),
                reason: format!("{} indices for batch {}", idx.len(), b),
            });
        }
        for &i in idx {
            if i >= s {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: s,
                });
            }
        }
        let mut out = Vec::with_capacity(b * d);
        for (bi, &si) in idx.iter().enumerate() {
            let off = (bi * s + si) * d;
            out.extend_from_slice(&self.data[off..off + d]);
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let idx = idx.to_vec();
        make(tape, vec![b, d], out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gx = vec![E::ZERO; b * s * d];
                    for (bi, &si) in idx.iter().enumerate() {
                        let off = (bi * s + si) * d;
                        gx[off..off + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
                    }
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }

    /// Embedding lookup: rows of a `[V,D]` table selected by ids. The
    /// gradient scatter-adds into the table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: self.shape.clone(),
                reason: "expected rank 2 table".into(),
            });
        }
        let (v, d) = (self.shape[0], self.shape[1]);
        for &i in ids {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    bound: v,
                });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        let ids = ids.to_vec();
        let n = ids.len();
        make(tape, vec![n, d], out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gt = vec![E::ZERO; v * d];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                    vec![(id, gt)]
                }
                None => vec![],
            })
        })
    }

    /// Rearranges `[B,S,D]` into `[B*heads, S, D/heads]` groups.
    pub fn split_heads(&self, heads: usize) -> Result<Tensor<E>> {
        if self.rank() != 3 || self.shape[2] % heads != 0 {
            return Err(TensorError::InvalidShape {
                op: "split_heads",
                shape: self.shape.clone(),
                reason: format!("not divisible into {heads} heads"),
            });
        }
        let (b, s, d) = (self.shape[0], self.shape[1], self.shape[2]);
        let dh = d / heads;
        let mut out = vec![E::ZERO; self.len()];
        for bi in 0..b {
            for si in 0..s {
                for h in 0..heads {
                    let src = (bi * s + si) * d + h * dh;
                    let dst = ((bi * heads + h) * s + si) * dh;
                    out[dst..dst + dh].copy_from_slice(&self.data[src..src + dh]);
                }
            }
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        make(tape, vec![b * heads, s, dh], out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gx = vec![E::ZERO; b * s * d];
                    for bi in 0..b {
                        for si in 0..s {
                            for h in 0..heads {
                                let dst = (bi * s + si) * d + h * dh;
                                let src = ((bi * heads + h) * s + si) * dh;
                                gx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }

    /// Inverse of [`Tensor::split_heads`].
    pub fn merge_heads(&self, heads: usize) -> Result<Tensor<E>> {
        if self.rank() != 3 || self.shape[0] % heads != 0 {
            return Err(TensorError::InvalidShape {
                op: "merge_heads",
                shape: self.shape.clone(),
                reason: format!("leading extent not divisible by {heads}"),
            });
        }
        let (g0, s, dh) = (self.shape[0], self.shape[1], self.shape[2]);
        let b = g0 / heads;
        let d = dh * heads;
        let mut out = vec![E::ZERO; self.len()];
        for bi in 0..b {
            for si in 0..s {
                for h in 0..heads {
                    let src = ((bi * heads + h) * s + si) * dh;
                    let dst = (bi * s + si) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&self.data[src..src + dh]);
                }
            }
        }
        let tape = tape_of(&[self])?;
        let id = self.node_id();
        make(tape, vec![b, s, d], out, move || {
            Box::new(move |g: &[E]| match id {
                Some(id) => {
                    let mut gx = vec![E::ZERO; g0 * s * dh];
                    for bi in 0..b {
                        for si in 0..s {
                            for h in 0..heads {
                                let dst = ((bi * heads + h) * s + si) * dh;
                                let src = (bi * s + si) * d + h * dh;
                                gx[dst..dst + dh].copy_from_slice(&g[src..src + dh]);
                            }
                        }
                    }
                    vec![(id, gx)]
                }
                None => vec![],
            })
        })
    }
}
