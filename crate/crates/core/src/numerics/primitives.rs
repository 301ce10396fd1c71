use super::{DenseMatrix, NumericsError};

/// Additive mask value for forbidden attention positions.
pub const MASK_FORBIDDEN: f64 = -1e9;

/// Entries are clamped to `[KL_EPSILON, 1]` before logs are taken in
/// the KL divergence, then each row is renormalized so it is still a
/// distribution. This keeps the divergence finite and non-negative
/// when a row contains exact zeros (masked positions).
pub const KL_EPSILON: f64 = 1e-12;

/// Anything at or below this after masking counts as forbidden; the
/// mask adds `-1e9`, which dwarfs any realistic logit.
const FORBIDDEN_CUTOFF: f64 = -1e8;

/// Row-wise softmax of `logits + mask`.
///
/// `mask` entries are `0` (allowed) or [`MASK_FORBIDDEN`]. Each row is
/// shifted by its own maximum before exponentiation so large logits
/// cannot overflow. Forbidden positions come out exactly `0`; a row
/// with every position forbidden is an error rather than a NaN row.
pub fn masked_softmax(
    logits: &DenseMatrix,
    mask: &DenseMatrix,
) -> Result<DenseMatrix, NumericsError> {
    if logits.shape() != mask.shape() {
        return Err(NumericsError::ShapeMismatch {
            context: "masked_softmax",
            expected: format!("{}x{}", logits.rows(), logits.cols()),
            got: format!("{}x{}", mask.rows(), mask.cols()),
        });
    }
    let mut out = DenseMatrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let masked: Vec<f64> = logits
            .row(r)
            .iter()
            .zip(mask.row(r))
            .map(|(l, m)| l + m)
            .collect();
        let row_max = masked
            .iter()
            .copied()
            .filter(|v| *v > FORBIDDEN_CUTOFF)
            .fold(f64::NEG_INFINITY, f64::max);
        if row_max == f64::NEG_INFINITY {
            return Err(NumericsError::AllForbidden { row: r });
        }
        let exps: Vec<f64> = masked
            .iter()
            .map(|&v| {
                if v > FORBIDDEN_CUTOFF {
                    (v - row_max).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = exps.iter().sum();
        let out_row = out.row_mut(r);
        for (o, e) in out_row.iter_mut().zip(&exps) {
            *o = e / total;
        }
    }
    Ok(out)
}

/// Mean KL divergence `D(p_row || q_row)` over the selected rows.
///
/// `valid` flags which rows participate (padding rows are skipped).
/// Each participating row of `p` and `q` must already sum to 1 within
/// `1e-6`. Rows are clamped to `[KL_EPSILON, 1]` and renormalized
/// before logs, so exact zeros from masking are safe and the result
/// is always `>= 0`.
pub fn row_kl_divergence(
    p: &DenseMatrix,
    q: &DenseMatrix,
    valid: &[bool],
) -> Result<f64, NumericsError> {
    if p.shape() != q.shape() {
        return Err(NumericsError::ShapeMismatch {
            context: "row_kl_divergence",
            expected: format!("{}x{}", p.rows(), p.cols()),
            got: format!("{}x{}", q.rows(), q.cols()),
        });
    }
    if valid.len() != p.rows() {
        return Err(NumericsError::ShapeMismatch {
            context: "row_kl_divergence",
            expected: format!("{} row flags", p.rows()),
            got: format!("{} row flags", valid.len()),
        });
    }
    let mut total = 0.0;
    let mut n_valid = 0usize;
    for (r, &row_on) in valid.iter().enumerate() {
        if !row_on {
            continue;
        }
        check_stochastic("p", r, p.row(r))?;
        check_stochastic("q", r, q.row(r))?;
        let (p_hat, _) = clamp_normalize(p.row(r));
        let (q_hat, _) = clamp_normalize(q.row(r));
        let mut row_kl = 0.0;
        for (pk, qk) in p_hat.iter().zip(&q_hat) {
            row_kl += pk * (pk.ln() - qk.ln());
        }
        total += row_kl;
        n_valid += 1;
    }
    if n_valid == 0 {
        return Err(NumericsError::NoValidRows);
    }
    Ok(total / n_valid as f64)
}

fn check_stochastic(which: &'static str, row: usize, values: &[f64]) -> Result<(), NumericsError> {
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NumericsError::NotStochastic { which, row, sum });
    }
    Ok(())
}

/// Clamps a row into `[KL_EPSILON, 1]` and renormalizes it; returns
/// the normalized row and the pre-normalization sum. Shared with the
/// tape so forward values and gradients see identical arithmetic.
pub(crate) fn clamp_normalize(row: &[f64]) -> (Vec<f64>, f64) {
    let clamped: Vec<f64> = row.iter().map(|v| v.clamp(KL_EPSILON, 1.0)).collect();
    let sum: f64 = clamped.iter().sum();
    (clamped.iter().map(|v| v / sum).collect(), sum)
}

/// Whether the clamp to `[KL_EPSILON, 1]` passes a perturbation
/// through at `value` (i.e. the value was not pinned to a bound).
pub(crate) fn clamp_passes(value: f64) -> bool {
    (KL_EPSILON..=1.0).contains(&value)
}

/// Mean sigmoid cross-entropy of logits against `{0, 1}` labels.
///
/// Uses the log-sum-exp form `max(z, 0) - y*z + ln(1 + exp(-|z|))`
/// per sample, which stays finite for logits of any magnitude.
pub fn sigmoid_cross_entropy(logits: &[f64], labels: &[f64]) -> Result<f64, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::EmptyInput {
            context: "sigmoid_cross_entropy",
        });
    }
    if logits.len() != labels.len() {
        return Err(NumericsError::ShapeMismatch {
            context: "sigmoid_cross_entropy",
            expected: format!("{} labels", logits.len()),
            got: format!("{} labels", labels.len()),
        });
    }
    let mut total = 0.0;
    for (index, (&z, &y)) in logits.iter().zip(labels).enumerate() {
        if y != 0.0 && y != 1.0 {
            return Err(NumericsError::BadLabel { value: y, index });
        }
        total += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
    }
    Ok(total / logits.len() as f64)
}

/// Numerically safe logistic function.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
