//! Training loop: seeded train/eval split, Adam updates from the tape
//! gradients, and periodic evaluation rows in the report format.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cohort::EncodedVisit;
use crate::eval::{auc_pr, auc_roc, ReportRow};
use crate::numerics::{DenseMatrix, GradientMap, NumericsError};
use crate::seed::derive_seed;

use super::forward::{forward, loss_modified, loss_original};
use super::{GctError, GctModel, LossMode};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    first: BTreeMap<String, DenseMatrix>,
    second: BTreeMap<String, DenseMatrix>,
    t: usize,
}

impl AdamState {
    fn new(model: &GctModel) -> Self {
        let zeros = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        AdamState {
            first: model
                .params()
                .iter()
                .map(|(n, m)| (n.to_string(), zeros(m)))
                .collect(),
            second: model
                .params()
                .iter()
                .map(|(n, m)| (n.to_string(), zeros(m)))
                .collect(),
            t: 0,
        }
    }

    fn apply(
        &mut self,
        model: &mut GctModel,
        grads: &GradientMap,
        learning_rate: f64,
    ) -> Result<(), GctError> {
        self.t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, weights) in model.params_mut().iter_mut() {
            let grad = &grads[name];
            let m = self.first.get_mut(name).expect("state covers params");
            let v = self.second.get_mut(name).expect("state covers params");
            for i in 0..weights.data().len() {
                let g = grad.data()[i];
                let m_new = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * g;
                let v_new = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * g * g;
                m.data_mut()[i] = m_new;
                v.data_mut()[i] = v_new;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                let updated =
                    weights.data()[i] - learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                if !updated.is_finite() {
                    return Err(GctError::Numerics(NumericsError::NonFinite {
                        context: "adam update",
                    }));
                }
                weights.data_mut()[i] = updated;
            }
        }
        Ok(())
    }
}

/// The shuffled 80/20 train/eval split of visit indices that [`train`]
/// uses for a given config seed, clamped so both sides are non-empty.
///
/// Exposed so callers can measure quantities on exactly the visits the
/// trainer optimized (or held out) without re-deriving the shuffle.
pub fn train_eval_split(
    config_seed: u64,
    n_visits: usize,
) -> Result<(Vec<usize>, Vec<usize>), GctError> {
    if n_visits < 2 {
        return Err(GctError::SplitTooSmall { got: n_visits });
    }
    let mut order: Vec<usize> = (0..n_visits).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config_seed, "split"));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n_visits * 4 / 5).clamp(1, n_visits - 1);
    let eval = order.split_off(n_train);
    Ok((order, eval))
}

fn evaluate(
    model: &GctModel,
    encodings: &[EncodedVisit],
    eval_idx: &[usize],
    step: usize,
) -> Result<ReportRow, GctError> {
    let traces: Vec<_> = eval_idx
        .iter()
        .map(|&i| forward(model, &encodings[i]))
        .collect::<Result<_, _>>()?;
    let labels: Vec<u8> = eval_idx.iter().map(|&i| encodings[i].label).collect();
    let scores: Vec<f64> = traces.iter().map(|t| t.logit).collect();
    let loss = match model.config().loss_mode {
        LossMode::Original => loss_original(&traces, &labels, model.config().lambda)?,
        LossMode::Modified => loss_modified(&traces, model.config().lambda)?,
    };
    Ok(ReportRow {
        step,
        auc_pr: auc_pr(&scores, &labels)?,
        auc_roc: auc_roc(&scores, &labels)?,
        loss,
    })
}

/// Trains the model in place on its configured objective.
///
/// Visits are split 80/20 into train/eval by a seed derived from the
/// config seed; each step samples `batch_size` training visits with
/// replacement, backpropagates the batch loss, and applies one Adam
/// update. Every `eval_every` steps a report row is appended with the
/// eval split's AUC-PR, AUC-ROC, and mean loss under the active mode.
/// A non-finite loss aborts with the step number and the rows
/// collected so far. Deterministic for a fixed seed.
pub fn train(model: &mut GctModel, encodings: &[EncodedVisit]) -> Result<Vec<ReportRow>, GctError> {
    model.config().validate()?;
    let cfg = model.config().clone();
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let (train_idx, eval_idx) = train_eval_split(cfg.seed, encodings.len())?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut adam = AdamState::new(model);
    let mut rows = Vec::new();
    for step in 1..=cfg.steps {
        let batch: Vec<&EncodedVisit> = (0..cfg.batch_size)
            .map(|_| &encodings[train_idx[batch_rng.gen_range(0..train_idx.len())]])
            .collect();
        let step_result = super::batch_gradients(model, &batch)
            .and_then(|(_, grads)| adam.apply(model, &grads, cfg.learning_rate));
        if let Err(err) = step_result {
            // A non-finite value anywhere in the step is the
            // divergence signal; anything else is a real error.
            return match err {
                GctError::Numerics(NumericsError::NonFinite { .. }) => Err(GctError::Diverged {
                    step,
                    rows: std::mem::take(&mut rows),
                }),
                other => Err(other),
            };
        }
        if step % cfg.eval_every == 0 {
            rows.push(evaluate(model, encodings, &eval_idx, step)?);
        }
    }
    Ok(rows)
}
