//! The graph convolution transformer.
//!
//! Block 1 uses the visit's fixed prior `P` as its attention weights;
//! every later block computes masked scaled dot-product attention from
//! the previous block's features. Each block applies a two-layer ReLU
//! MLP, and consecutive blocks' attention matrices are tied together
//! by a KL regularization term. Two loss modes exist: the original
//! supervised objective (sigmoid cross-entropy plus λ times the KL
//! sum) and a modified objective that keeps only the KL sum.

mod forward;
mod train;

pub use forward::{forward, loss_modified, loss_original, ForwardTrace};
pub use train::{train, train_eval_split};

use crate::numerics::{GradTape, GradientMap};

/// Batch loss under the model's configured mode, rebuilt from scratch:
/// the objective the trainer and the finite-difference checker probe.
pub fn batch_loss(model: &GctModel, batch: &[&EncodedVisit]) -> Result<f64, GctError> {
    let mut tape = GradTape::new();
    let ids = forward::register_model(&mut tape, model)?;
    let loss = forward::batch_loss_node(&mut tape, &ids, model, batch)?;
    Ok(tape.scalar(loss)?)
}

/// Batch loss plus its gradient for every model parameter (zeros for
/// parameters the objective never touches).
pub fn batch_gradients(
    model: &GctModel,
    batch: &[&EncodedVisit],
) -> Result<(f64, GradientMap), GctError> {
    let mut tape = GradTape::new();
    let ids = forward::register_model(&mut tape, model)?;
    let loss = forward::batch_loss_node(&mut tape, &ids, model, batch)?;
    let value = tape.scalar(loss)?;
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::EncodedVisit;
use crate::eval::{EvalError, ReportRow};
use crate::kg::KnowledgeGraph;
use crate::numerics::{DenseMatrix, NumericsError, ParamSet};

#[derive(Debug, Error)]
pub enum GctError {
    #[error("num_blocks must be at least 2, got {got}")]
    TooFewBlocks { got: usize },
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("vocabulary code {code:?} appears twice")]
    DuplicateVocabCode { code: String },
    #[error("token {code:?} is not in the model vocabulary")]
    UnknownCode { code: String },
    #[error("layer {layer} out of range 1..={num_blocks}")]
    LayerOutOfRange { layer: usize, num_blocks: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("traces and labels differ in length: {traces} vs {labels}")]
    LabelMismatch { traces: usize, labels: usize },
    #[error("traces disagree on block count")]
    InconsistentTraces,
    #[error("need at least 2 visits to split train/eval, got {got}")]
    SplitTooSmall { got: usize },
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize, rows: Vec<ReportRow> },
    #[error("checkpoint {path}: unsupported version {got} (expected {expected})")]
    CheckpointVersion {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("checkpoint {path}: parameter {name:?} has shape {got:?}, expected {expected:?}")]
    CheckpointShape {
        path: String,
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("checkpoint {path}: missing parameter {name:?}")]
    CheckpointMissingParam { path: String, name: String },
    #[error("{path}: {message}")]
    CheckpointParse { path: String, message: String },
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Which objective the trainer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Sigmoid cross-entropy plus λ times the per-block KL sum.
    Original,
    /// λ times the per-block KL sum only; labels are unused.
    Modified,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossMode::Original => write!(f, "original"),
            LossMode::Modified => write!(f, "modified"),
        }
    }
}

/// Model and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GctConfig {
    /// Number of transformer blocks; at least 2, since the KL terms
    /// couple consecutive blocks.
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    /// Weight of the KL regularization sum.
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Append a report row every this many steps.
    pub eval_every: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl Default for GctConfig {
    fn default() -> Self {
        GctConfig {
            num_blocks: 3,
            embed_dim: 16,
            mlp_hidden: 32,
            lambda: 1.0,
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 16,
            eval_every: 100,
            loss_mode: LossMode::Original,
            seed: 0,
        }
    }
}

impl GctConfig {
    pub fn validate(&self) -> Result<(), GctError> {
        if self.num_blocks < 2 {
            return Err(GctError::TooFewBlocks {
                got: self.num_blocks,
            });
        }
        for (field, ok) in [
            ("embed_dim", self.embed_dim >= 1),
            ("mlp_hidden", self.mlp_hidden >= 1),
            ("batch_size", self.batch_size >= 1),
            ("eval_every", self.eval_every >= 1),
        ] {
            if !ok {
                return Err(GctError::NonPositive { field });
            }
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(GctError::NonPositive { field: "lambda" });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GctError::NonPositive {
                field: "learning_rate",
            });
        }
        Ok(())
    }
}

/// One vocabulary entry: a token code and its node type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub code: String,
    pub node_type: String,
}

/// Vocabulary from a knowledge graph's node list (already sorted).
pub fn vocab_from_graph(graph: &KnowledgeGraph) -> Vec<VocabEntry> {
    graph
        .nodes()
        .iter()
        .map(|n| VocabEntry {
            code: n.code.clone(),
            node_type: n.node_type.clone(),
        })
        .collect()
}

/// The trainable model: embedding table, per-block projections and
/// MLP weights, and the linear prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct GctModel {
    config: GctConfig,
    vocab: Vec<VocabEntry>,
    index: BTreeMap<String, usize>,
    params: ParamSet,
}

/// Names and shapes of every parameter, in registration order. Single
/// source of truth shared by initialization and checkpoint validation.
fn expected_param_shapes(cfg: &GctConfig, vocab_len: usize) -> Vec<(String, (usize, usize))> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden;
    let mut out = vec![("embedding".to_string(), (vocab_len, d))];
    for j in 1..=cfg.num_blocks {
        out.push((format!("block{j}.w_q"), (d, d)));
        out.push((format!("block{j}.w_k"), (d, d)));
        out.push((format!("block{j}.w_v"), (d, d)));
        out.push((format!("block{j}.mlp.w1"), (d, h)));
        out.push((format!("block{j}.mlp.b1"), (1, h)));
        out.push((format!("block{j}.mlp.w2"), (h, d)));
        out.push((format!("block{j}.mlp.b2"), (1, d)));
    }
    out.push(("head.w".to_string(), (d, 1)));
    out.push(("head.b".to_string(), (1, 1)));
    out
}

fn build_index(vocab: &[VocabEntry]) -> Result<BTreeMap<String, usize>, GctError> {
    if vocab.is_empty() {
        return Err(GctError::EmptyVocabulary);
    }
    let mut index = BTreeMap::new();
    for (i, entry) in vocab.iter().enumerate() {
        if index.insert(entry.code.clone(), i).is_some() {
            return Err(GctError::DuplicateVocabCode {
                code: entry.code.clone(),
            });
        }
    }
    Ok(index)
}

/// Initializes a model with weights drawn uniformly from
/// `(-1/√d, 1/√d)`, deterministically per `cfg.seed`.
pub fn init_model(cfg: &GctConfig, vocab: &[VocabEntry]) -> Result<GctModel, GctError> {
    cfg.validate()?;
    let index = build_index(vocab)?;
    let bound = 1.0 / (cfg.embed_dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    for (name, (rows, cols)) in expected_param_shapes(cfg, vocab.len()) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        params.insert(&name, DenseMatrix::from_vec(rows, cols, data)?)?;
    }
    Ok(GctModel {
        config: cfg.clone(),
        vocab: vocab.to_vec(),
        index,
        params,
    })
}

impl GctModel {
    pub fn config(&self) -> &GctConfig {
        &self.config
    }

    pub fn vocab(&self) -> &[VocabEntry] {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn vocab_index(&self, code: &str) -> Result<usize, GctError> {
        self.index
            .get(code)
            .copied()
            .ok_or_else(|| GctError::UnknownCode {
                code: code.to_string(),
            })
    }

    pub fn node_type_of(&self, code: &str) -> Result<&str, GctError> {
        let idx = self.vocab_index(code)?;
        Ok(self.vocab[idx].node_type.as_str())
    }

    /// Same model with a replacement parameter set (shapes checked) —
    /// the hook the finite-difference oracle uses to probe the loss.
    pub fn with_params(&self, params: ParamSet) -> Result<GctModel, GctError> {
        for (name, expected) in expected_param_shapes(&self.config, self.vocab.len()) {
            let m = params
                .get(&name)
                .ok_or_else(|| GctError::CheckpointMissingParam {
                    path: "<params>".to_string(),
                    name: name.clone(),
                })?;
            if m.shape() != expected {
                return Err(GctError::CheckpointShape {
                    path: "<params>".to_string(),
                    name,
                    got: m.shape(),
                    expected,
                });
            }
        }
        Ok(GctModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            index: self.index.clone(),
            params,
        })
    }
}

/// Attention matrix of block `j` (1-based) for one visit, trimmed to
/// the visit's real tokens. `j = 1` returns the visit's prior.
pub fn attention_of_layer(
    model: &GctModel,
    enc: &EncodedVisit,
    layer: usize,
) -> Result<DenseMatrix, GctError> {
    if layer < 1 || layer > model.config.num_blocks {
        return Err(GctError::LayerOutOfRange {
            layer,
            num_blocks: model.config.num_blocks,
        });
    }
    let trace = forward(model, enc)?;
    Ok(trace.attentions[layer - 1].top_left(enc.n_tokens))
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: GctConfig,
    vocab: Vec<VocabEntry>,
    params: ParamSet,
}

/// Writes the model as a single versioned JSON file. Reloading with
/// [`load_checkpoint`] reproduces forward outputs bit-exactly.
pub fn save_checkpoint(model: &GctModel, path: &Path) -> Result<(), GctError> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        params: model.params.clone(),
    };
    let json = serde_json::to_string(&file).expect("checkpoint serializes");
    fs::write(path, json).map_err(|source| GctError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint, validating version and parameter shapes.
pub fn load_checkpoint(path: &Path) -> Result<GctModel, GctError> {
    let text = fs::read_to_string(path).map_err(|source| GctError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| GctError::CheckpointParse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(GctError::CheckpointVersion {
            path: path.display().to_string(),
            got: file.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    file.config.validate()?;
    let index = build_index(&file.vocab)?;
    for (name, expected) in expected_param_shapes(&file.config, file.vocab.len()) {
        match file.params.get(&name) {
            None => {
                return Err(GctError::CheckpointMissingParam {
                    path: path.display().to_string(),
                    name,
                });
            }
            Some(m) if m.shape() != expected => {
                return Err(GctError::CheckpointShape {
                    path: path.display().to_string(),
                    name,
                    got: m.shape(),
                    expected,
                });
            }
            Some(_) => {}
        }
    }
    Ok(GctModel {
        config: file.config,
        vocab: file.vocab,
        index,
        params: file.params,
    })
}
