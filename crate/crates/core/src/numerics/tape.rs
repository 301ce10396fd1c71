use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::primitives::{clamp_normalize, clamp_passes, sigmoid};
use super::{masked_softmax, row_kl_divergence, DenseMatrix, NumericsError};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Gradients keyed by parameter name, in name order.
pub type GradientMap = BTreeMap<String, DenseMatrix>;

/// Named parameter matrices in a fixed registration order.
///
/// The order is part of the public behaviour: optimizers and the
/// finite-difference checker walk entries in this order, which keeps
/// runs reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, DenseMatrix)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    /// Appends a named matrix; names must be unique.
    pub fn insert(&mut self, name: &str, value: DenseMatrix) -> Result<(), NumericsError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(NumericsError::DuplicateParam {
                name: name.to_string(),
            });
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseMatrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

enum TapeOp {
    MatMul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    /// `out = a * b^T`
    MatMulTransB {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Scale {
        a: ValueId,
        factor: f64,
        out: ValueId,
    },
    Hadamard {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Relu {
        a: ValueId,
        out: ValueId,
    },
    /// Adds a `1 x cols` bias row to every row of `a`.
    AddRowBias {
        a: ValueId,
        bias: ValueId,
        out: ValueId,
    },
    /// `out[i] = table[indices[i]]` (embedding lookup).
    GatherRows {
        table: ValueId,
        indices: Vec<usize>,
        out: ValueId,
    },
    /// Mean of the listed rows, as a `1 x cols` matrix.
    MeanRows {
        a: ValueId,
        rows: Vec<usize>,
        out: ValueId,
    },
    /// Stacks `1 x 1` values into an `n x 1` column.
    ConcatScalars {
        parts: Vec<ValueId>,
        out: ValueId,
    },
    /// Sum of all entries, as `1 x 1`.
    SumAll {
        a: ValueId,
        out: ValueId,
    },
    MaskedSoftmax {
        logits: ValueId,
        out: ValueId,
    },
    /// Mean row KL divergence over valid rows, as `1 x 1`.
    KlRows {
        p: ValueId,
        q: ValueId,
        valid: Vec<bool>,
        out: ValueId,
    },
    /// Mean sigmoid cross-entropy of an `n x 1` logit column, as `1 x 1`.
    SigmoidCrossEntropy {
        logits: ValueId,
        labels: Vec<f64>,
        out: ValueId,
    },
}

/// Reverse-mode gradient tape over dense matrices.
///
/// Operations compute eagerly and append a record; [`GradTape::backward`]
/// replays the records in reverse, accumulating adjoints. The op set is
/// exactly what the transformer forward pass and its losses need — no
/// general broadcasting, no graph rewriting.
pub struct GradTape {
    values: Vec<DenseMatrix>,
    ops: Vec<TapeOp>,
    params: Vec<(String, ValueId)>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            values: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
        }
    }

    /// Records a constant; no gradient is tracked for it.
    pub fn constant(&mut self, value: DenseMatrix) -> ValueId {
        self.push_value(value)
    }

    /// Records a trainable parameter under a unique name. Gradients for
    /// every registered parameter appear in [`GradTape::backward`]'s
    /// result, as zeros if the loss never touched it.
    pub fn param(&mut self, name: &str, value: DenseMatrix) -> Result<ValueId, NumericsError> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(NumericsError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let id = self.push_value(value);
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn value(&self, id: ValueId) -> &DenseMatrix {
        &self.values[id.0]
    }

    /// Scalar payload of a `1 x 1` value.
    pub fn scalar(&self, id: ValueId) -> Result<f64, NumericsError> {
        let m = self.value(id);
        if m.shape() != (1, 1) {
            return Err(NumericsError::NonScalarLoss {
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        Ok(m.get(0, 0))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::MatMul { a, b, out });
        Ok(out)
    }

    pub fn matmul_transpose_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let value = self.value(a).matmul_transpose_b(self.value(b))?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::MatMulTransB { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let value = self.value(a).add(self.value(b))?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::Add { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId, NumericsError> {
        let value = self.value(a).scaled(factor)?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::Scale { a, factor, out });
        Ok(out)
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumericsError::ShapeMismatch {
                context: "hadamard",
                expected: format!("{}x{}", av.rows(), av.cols()),
                got: format!("{}x{}", bv.rows(), bv.cols()),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = DenseMatrix::from_vec(av.rows(), av.cols(), data)?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::Hadamard { a, b, out });
        Ok(out)
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId, NumericsError> {
        let av = self.value(a);
        let data = av.data().iter().map(|v| v.max(0.0)).collect();
        let value = DenseMatrix::from_vec(av.rows(), av.cols(), data)?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::Relu { a, out });
        Ok(out)
    }

    pub fn add_row_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(NumericsError::ShapeMismatch {
                context: "add_row_bias",
                expected: format!("1x{}", av.cols()),
                got: format!("{}x{}", bv.rows(), bv.cols()),
            });
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bv.row(0)) {
                *v += b;
            }
        }
        let out = self.push_value(value);
        self.ops.push(TapeOp::AddRowBias { a, bias, out });
        Ok(out)
    }

    pub fn gather_rows(
        &mut self,
        table: ValueId,
        indices: &[usize],
    ) -> Result<ValueId, NumericsError> {
        let tv = self.value(table);
        if indices.is_empty() {
            return Err(NumericsError::EmptyInput {
                context: "gather_rows",
            });
        }
        let mut value = DenseMatrix::zeros(indices.len(), tv.cols());
        for (i, &idx) in indices.iter().enumerate() {
            if idx >= tv.rows() {
                return Err(NumericsError::IndexOutOfBounds {
                    context: "gather_rows",
                    index: idx,
                    bound: tv.rows(),
                });
            }
            value.row_mut(i).copy_from_slice(tv.row(idx));
        }
        let out = self.push_value(value);
        self.ops.push(TapeOp::GatherRows {
            table,
            indices: indices.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn mean_rows(&mut self, a: ValueId, rows: &[usize]) -> Result<ValueId, NumericsError> {
        let av = self.value(a);
        if rows.is_empty() {
            return Err(NumericsError::EmptyInput {
                context: "mean_rows",
            });
        }
        let mut acc = vec![0.0; av.cols()];
        for &r in rows {
            if r >= av.rows() {
                return Err(NumericsError::IndexOutOfBounds {
                    context: "mean_rows",
                    index: r,
                    bound: av.rows(),
                });
            }
            for (a_val, s) in av.row(r).iter().zip(acc.iter_mut()) {
                *s += a_val;
            }
        }
        let n = rows.len() as f64;
        let value = DenseMatrix::from_vec(1, av.cols(), acc.iter().map(|s| s / n).collect())?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::MeanRows {
            a,
            rows: rows.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn concat_scalars(&mut self, parts: &[ValueId]) -> Result<ValueId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::EmptyInput {
                context: "concat_scalars",
            });
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape() != (1, 1) {
                return Err(NumericsError::ShapeMismatch {
                    context: "concat_scalars",
                    expected: "1x1".to_string(),
                    got: format!("{}x{}", v.rows(), v.cols()),
                });
            }
            data.push(v.get(0, 0));
        }
        let value = DenseMatrix::from_vec(parts.len(), 1, data)?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::ConcatScalars {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId, NumericsError> {
        let total: f64 = self.value(a).data().iter().sum();
        let value = DenseMatrix::from_vec(1, 1, vec![total])?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::SumAll { a, out });
        Ok(out)
    }

    /// Row-wise softmax of `logits + mask`; forwards through
    /// [`masked_softmax`] so tape values match the free function
    /// exactly, including its all-forbidden-row error.
    pub fn masked_softmax(
        &mut self,
        logits: ValueId,
        mask: &DenseMatrix,
    ) -> Result<ValueId, NumericsError> {
        let value = masked_softmax(self.value(logits), mask)?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::MaskedSoftmax { logits, out });
        Ok(out)
    }

    /// Mean row KL divergence over valid rows; forwards through
    /// [`row_kl_divergence`].
    pub fn kl_rows(
        &mut self,
        p: ValueId,
        q: ValueId,
        valid: &[bool],
    ) -> Result<ValueId, NumericsError> {
        let kl = row_kl_divergence(self.value(p), self.value(q), valid)?;
        let value = DenseMatrix::from_vec(1, 1, vec![kl])?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::KlRows {
            p,
            q,
            valid: valid.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Mean sigmoid cross-entropy of an `n x 1` logit column; forwards
    /// through [`super::sigmoid_cross_entropy`].
    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[f64],
    ) -> Result<ValueId, NumericsError> {
        let lv = self.value(logits);
        if lv.cols() != 1 {
            return Err(NumericsError::ShapeMismatch {
                context: "sigmoid_cross_entropy",
                expected: format!("{}x1", lv.rows()),
                got: format!("{}x{}", lv.rows(), lv.cols()),
            });
        }
        let loss = super::sigmoid_cross_entropy(lv.data(), labels)?;
        let value = DenseMatrix::from_vec(1, 1, vec![loss])?;
        let out = self.push_value(value);
        self.ops.push(TapeOp::SigmoidCrossEntropy {
            logits,
            labels: labels.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Accumulates `d loss / d w` for every registered parameter by
    /// replaying the tape in reverse from `loss`, which must be `1 x 1`.
    /// Parameters the loss never touched get zero gradients.
    pub fn backward(&self, loss: ValueId) -> Result<GradientMap, NumericsError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NumericsError::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut adjoints: Vec<Option<DenseMatrix>> = vec![None; self.values.len()];
        adjoints[loss.0] = Some(DenseMatrix::from_vec(1, 1, vec![1.0])?);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut adjoints)?;
        }
        let mut map = GradientMap::new();
        for (name, id) in &self.params {
            let grad = adjoints[id.0].take().unwrap_or_else(|| {
                let (r, c) = self.values[id.0].shape();
                DenseMatrix::zeros(r, c)
            });
            map.insert(name.clone(), grad);
        }
        Ok(map)
    }

    fn push_value(&mut self, value: DenseMatrix) -> ValueId {
        self.values.push(value);
        ValueId(self.values.len() - 1)
    }

    fn backward_op(
        &self,
        op: &TapeOp,
        adjoints: &mut [Option<DenseMatrix>],
    ) -> Result<(), NumericsError> {
        match op {
            TapeOp::MatMul { a, b, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let d_a = d_out.matmul_transpose_b(self.value(*b))?;
                let d_b = self.value(*a).transposed().matmul(&d_out)?;
                accumulate(adjoints, *a, d_a)?;
                accumulate(adjoints, *b, d_b)?;
            }
            TapeOp::MatMulTransB { a, b, out } => {
                // out = a b^T, so d_a = d_out b and d_b = d_out^T a.
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let d_a = d_out.matmul(self.value(*b))?;
                let d_b = d_out.transposed().matmul(self.value(*a))?;
                accumulate(adjoints, *a, d_a)?;
                accumulate(adjoints, *b, d_b)?;
            }
            TapeOp::Add { a, b, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                accumulate(adjoints, *a, d_out.clone())?;
                accumulate(adjoints, *b, d_out)?;
            }
            TapeOp::Scale { a, factor, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                accumulate(adjoints, *a, d_out.scaled(*factor)?)?;
            }
            TapeOp::Hadamard { a, b, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let mul = |x: &DenseMatrix, y: &DenseMatrix| -> Result<DenseMatrix, NumericsError> {
                    let data = x.data().iter().zip(y.data()).map(|(u, v)| u * v).collect();
                    DenseMatrix::from_vec(x.rows(), x.cols(), data)
                };
                let d_a = mul(&d_out, self.value(*b))?;
                let d_b = mul(&d_out, self.value(*a))?;
                accumulate(adjoints, *a, d_a)?;
                accumulate(adjoints, *b, d_b)?;
            }
            TapeOp::Relu { a, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let av = self.value(*a);
                let data = d_out
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(
                    adjoints,
                    *a,
                    DenseMatrix::from_vec(av.rows(), av.cols(), data)?,
                )?;
            }
            TapeOp::AddRowBias { a, bias, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let mut d_bias = DenseMatrix::zeros(1, d_out.cols());
                for r in 0..d_out.rows() {
                    for (s, d) in d_bias.row_mut(0).iter_mut().zip(d_out.row(r)) {
                        *s += d;
                    }
                }
                accumulate(adjoints, *a, d_out)?;
                accumulate(adjoints, *bias, d_bias)?;
            }
            TapeOp::GatherRows {
                table,
                indices,
                out,
            } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let tv = self.value(*table);
                let mut d_table = DenseMatrix::zeros(tv.rows(), tv.cols());
                for (i, &idx) in indices.iter().enumerate() {
                    for (s, d) in d_table.row_mut(idx).iter_mut().zip(d_out.row(i)) {
                        *s += d;
                    }
                }
                accumulate(adjoints, *table, d_table)?;
            }
            TapeOp::MeanRows { a, rows, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let av = self.value(*a);
                let mut d_a = DenseMatrix::zeros(av.rows(), av.cols());
                let n = rows.len() as f64;
                for &r in rows {
                    for (s, d) in d_a.row_mut(r).iter_mut().zip(d_out.row(0)) {
                        *s += d / n;
                    }
                }
                accumulate(adjoints, *a, d_a)?;
            }
            TapeOp::ConcatScalars { parts, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                for (i, &p) in parts.iter().enumerate() {
                    accumulate(
                        adjoints,
                        p,
                        DenseMatrix::from_vec(1, 1, vec![d_out.get(i, 0)])?,
                    )?;
                }
            }
            TapeOp::SumAll { a, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let g = d_out.get(0, 0);
                let av = self.value(*a);
                let d_a =
                    DenseMatrix::from_vec(av.rows(), av.cols(), vec![g; av.rows() * av.cols()])?;
                accumulate(adjoints, *a, d_a)?;
            }
            TapeOp::MaskedSoftmax { logits, out } => {
                // Per row: d_x = y ⊙ (d_y − ⟨d_y, y⟩). Forbidden
                // positions have y = 0 and therefore d_x = 0; the mask
                // itself is a constant.
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let y = self.value(*out);
                let mut d_x = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = d_out
                        .row(r)
                        .iter()
                        .zip(y.row(r))
                        .map(|(d, v)| d * v)
                        .sum();
                    for ((s, d), v) in d_x.row_mut(r).iter_mut().zip(d_out.row(r)).zip(y.row(r)) {
                        *s = v * (d - dot);
                    }
                }
                accumulate(adjoints, *logits, d_x)?;
            }
            TapeOp::KlRows { p, q, valid, out } => {
                self.backward_kl_rows(*p, *q, valid, *out, adjoints)?;
            }
            TapeOp::SigmoidCrossEntropy { logits, labels, out } => {
                let Some(d_out) = adjoints[out.0].clone() else {
                    return Ok(());
                };
                let g = d_out.get(0, 0);
                let lv = self.value(*logits);
                let n = labels.len() as f64;
                let data = lv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| g * (sigmoid(z) - y) / n)
                    .collect();
                accumulate(
                    adjoints,
                    *logits,
                    DenseMatrix::from_vec(lv.rows(), 1, data)?,
                )?;
            }
        }
        Ok(())
    }

    /// Gradient of the mean row KL divergence with respect to both raw
    /// inputs, through the clamp-and-renormalize applied in the forward
    /// pass. With `p̂ = clamp(p)/s_p`, `q̂ = clamp(q)/s_q` and per-row
    /// divergence `f`:
    ///
    ///   df/d clamp(p)_k = (ln p̂_k − ln q̂_k − f) / s_p
    ///   df/d clamp(q)_k = (1 − p̂_k / q̂_k) / s_q
    ///
    /// and the clamp passes gradient through only where the raw value
    /// sat strictly inside `[ε, 1]`.
    fn backward_kl_rows(
        &self,
        p: ValueId,
        q: ValueId,
        valid: &[bool],
        out: ValueId,
        adjoints: &mut [Option<DenseMatrix>],
    ) -> Result<(), NumericsError> {
        let Some(d_out) = adjoints[out.0].clone() else {
            return Ok(());
        };
        let g = d_out.get(0, 0);
        let (pv, qv) = (self.value(p), self.value(q));
        let n_valid = valid.iter().filter(|v| **v).count() as f64;
        let mut d_p = DenseMatrix::zeros(pv.rows(), pv.cols());
        let mut d_q = DenseMatrix::zeros(qv.rows(), qv.cols());
        for (r, &row_on) in valid.iter().enumerate() {
            if !row_on {
                continue;
            }
            let (p_hat, s_p) = clamp_normalize(pv.row(r));
            let (q_hat, s_q) = clamp_normalize(qv.row(r));
            let f: f64 = p_hat
                .iter()
                .zip(&q_hat)
                .map(|(pk, qk)| pk * (pk.ln() - qk.ln()))
                .sum();
            for k in 0..pv.cols() {
                let scale = g / n_valid;
                if clamp_passes(pv.get(r, k)) {
                    let grad = (p_hat[k].ln() - q_hat[k].ln() - f) / s_p;
                    d_p.row_mut(r)[k] = scale * grad;
                }
                if clamp_passes(qv.get(r, k)) {
                    let grad = (1.0 - p_hat[k] / q_hat[k]) / s_q;
                    d_q.row_mut(r)[k] = scale * grad;
                }
            }
        }
        accumulate(adjoints, p, d_p)?;
        accumulate(adjoints, q, d_q)?;
        Ok(())
    }
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(
    adjoints: &mut [Option<DenseMatrix>],
    id: ValueId,
    delta: DenseMatrix,
) -> Result<(), NumericsError> {
    match &mut adjoints[id.0] {
        Some(existing) => {
            *existing = existing.add(&delta)?;
        }
        slot @ None => {
            *slot = Some(delta);
        }
    }
    Ok(())
}
