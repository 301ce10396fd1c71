//! Visit sampling and attention priors.
//!
//! A cohort is a list of visit records sampled from the knowledge
//! graph: each visit draws a handful of diagnoses, keeps their linked
//! procedures with high probability, sprinkles in noise procedures,
//! and gets a binary label from a configurable rule. Co-occurrence
//! counts over the cohort yield global conditional probabilities
//! `p(b|a)`, which are reshaped per visit into the row-stochastic
//! prior matrix `P` and additive mask `M` consumed by the first
//! transformer block.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{KnowledgeGraph, NodeType};
use crate::numerics::{DenseMatrix, NumericsError, MASK_FORBIDDEN};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("cohort must contain at least one visit")]
    EmptyCohort,
    #[error("visit {visit_id}: needs at least one diagnosis and one procedure")]
    MissingCodeType { visit_id: u64 },
    #[error("visit {visit_id}: duplicate code {code:?}")]
    DuplicateCode { visit_id: u64, code: String },
    #[error("visit {visit_id}: label {label} is not 0 or 1")]
    BadLabel { visit_id: u64, label: u8 },
    #[error("visit {visit_id}: code {code:?} not in the knowledge graph as {expected:?}")]
    UnknownCode {
        visit_id: u64,
        code: String,
        expected: String,
    },
    #[error("knowledge graph has no {0:?} nodes")]
    NoNodesOfType(String),
    #[error("diagnosis count range {min}..={max} invalid for {available} diagnosis nodes")]
    BadDiagRange {
        min: usize,
        max: usize,
        available: usize,
    },
    #[error("noise rate must be in [0, 1), got {got}")]
    BadNoiseRate { got: f64 },
    #[error("linked-procedure keep probability must be in (0, 1], got {got}")]
    BadKeepProb { got: f64 },
    #[error("target positive fraction must be in [0, 1], got {got}")]
    BadTargetFraction { got: f64 },
    #[error("risk subset contains {code:?}, which is not a procedure in the graph")]
    BadRiskCode { code: String },
    #[error("n_visits must be at least 1")]
    NoVisits,
    #[error("visit {visit_id}: exceeded 1000 consecutive resamples with zero procedures")]
    ResampleExhausted { visit_id: u64 },
    #[error("visit {visit_id}: code {code:?} has no entry in the conditional table")]
    CodeNotInTable { visit_id: u64, code: String },
    #[error("visit {visit_id}: only one code type present, no allowed attention targets")]
    SingleTypeVisit { visit_id: u64 },
    #[error("visit {visit_id}: {n_tokens} tokens exceed max_tokens {max_tokens}")]
    OversizeVisit {
        visit_id: u64,
        n_tokens: usize,
        max_tokens: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One visit: its diagnosis codes, procedure codes, and binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitRecord {
    pub visit_id: u64,
    pub diagnosis_codes: Vec<String>,
    pub procedure_codes: Vec<String>,
    pub label: u8,
}

impl VisitRecord {
    /// Validates the record: at least one code of each kind, no
    /// duplicates across the two lists, label in `{0, 1}`.
    pub fn new(
        visit_id: u64,
        diagnosis_codes: Vec<String>,
        procedure_codes: Vec<String>,
        label: u8,
    ) -> Result<Self, CohortError> {
        if diagnosis_codes.is_empty() || procedure_codes.is_empty() {
            return Err(CohortError::MissingCodeType { visit_id });
        }
        if label > 1 {
            return Err(CohortError::BadLabel { visit_id, label });
        }
        let mut seen = BTreeSet::new();
        for code in diagnosis_codes.iter().chain(&procedure_codes) {
            if !seen.insert(code.as_str()) {
                return Err(CohortError::DuplicateCode {
                    visit_id,
                    code: code.clone(),
                });
            }
        }
        Ok(VisitRecord {
            visit_id,
            diagnosis_codes,
            procedure_codes,
            label,
        })
    }

    /// Token sequence of the visit: diagnoses first, then procedures.
    pub fn token_codes(&self) -> Vec<&str> {
        self.diagnosis_codes
            .iter()
            .chain(&self.procedure_codes)
            .map(String::as_str)
            .collect()
    }

    pub fn n_tokens(&self) -> usize {
        self.diagnosis_codes.len() + self.procedure_codes.len()
    }
}

/// How visit labels are assigned.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelRule {
    /// A "risk" subset of procedure codes is drawn per run; a visit is
    /// positive iff it contains any of them. Procedures are added to
    /// the subset (in shuffled order) until at least
    /// `target_positive_fraction` of visits are positive, which keeps
    /// the prediction task learnable and the classes usable for AUC.
    RiskProcedures { target_positive_fraction: f64 },
    /// A fixed risk subset, for controlled tests.
    ExplicitRisk { codes: Vec<String> },
}

impl Default for LabelRule {
    fn default() -> Self {
        LabelRule::RiskProcedures {
            target_positive_fraction: 0.45,
        }
    }
}

/// Parameters for [`sample_cohort`].
#[derive(Debug, Clone)]
pub struct CohortSpec {
    pub n_visits: usize,
    /// Inclusive range of diagnoses drawn per visit.
    pub diag_per_visit: (usize, usize),
    /// Probability of keeping each KG-linked procedure.
    pub link_keep_prob: f64,
    /// Probability of including each non-linked procedure.
    pub noise_rate: f64,
    pub label_rule: LabelRule,
    /// Node type treated as the diagnosis role.
    pub diagnosis_type: NodeType,
    /// Node type treated as the procedure role.
    pub procedure_type: NodeType,
    pub seed: u64,
}

impl CohortSpec {
    pub fn new(n_visits: usize, seed: u64) -> Self {
        CohortSpec {
            n_visits,
            diag_per_visit: (1, 3),
            link_keep_prob: 0.8,
            noise_rate: 0.05,
            label_rule: LabelRule::default(),
            diagnosis_type: NodeType::new("diagnosis").expect("literal"),
            procedure_type: NodeType::new("procedure").expect("literal"),
            seed,
        }
    }
}

/// Samples a cohort of visit records from the graph.
///
/// Per visit: a uniform draw of distinct diagnoses, each KG-linked
/// procedure kept with `link_keep_prob`, each unlinked procedure
/// included with `noise_rate`. A visit with no procedures is
/// resampled (up to 1000 consecutive tries). Labels are assigned by
/// the label rule after sampling. Deterministic per seed.
pub fn sample_cohort(
    graph: &KnowledgeGraph,
    spec: &CohortSpec,
) -> Result<Vec<VisitRecord>, CohortError> {
    if spec.n_visits == 0 {
        return Err(CohortError::NoVisits);
    }
    let diag_codes = graph.codes_of_type(spec.diagnosis_type.name());
    let proc_codes = graph.codes_of_type(spec.procedure_type.name());
    if diag_codes.is_empty() {
        return Err(CohortError::NoNodesOfType(
            spec.diagnosis_type.name().to_string(),
        ));
    }
    if proc_codes.is_empty() {
        return Err(CohortError::NoNodesOfType(
            spec.procedure_type.name().to_string(),
        ));
    }
    let (min_diag, max_diag) = spec.diag_per_visit;
    if min_diag == 0 || min_diag > max_diag || max_diag > diag_codes.len() {
        return Err(CohortError::BadDiagRange {
            min: min_diag,
            max: max_diag,
            available: diag_codes.len(),
        });
    }
    if !(0.0..1.0).contains(&spec.noise_rate) {
        return Err(CohortError::BadNoiseRate {
            got: spec.noise_rate,
        });
    }
    if !(spec.link_keep_prob > 0.0 && spec.link_keep_prob <= 1.0) {
        return Err(CohortError::BadKeepProb {
            got: spec.link_keep_prob,
        });
    }

    let proc_set: BTreeSet<&str> = proc_codes.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut visits = Vec::with_capacity(spec.n_visits);
    for visit_id in 0..spec.n_visits as u64 {
        let mut failures = 0usize;
        loop {
            let k = rng.gen_range(min_diag..=max_diag);
            let mut order: Vec<usize> = (0..diag_codes.len()).collect();
            for i in 0..k {
                let j = rng.gen_range(i..order.len());
                order.swap(i, j);
            }
            let mut diagnoses: Vec<String> = order[..k]
                .iter()
                .map(|&i| diag_codes[i].to_string())
                .collect();
            diagnoses.sort();

            let mut linked: BTreeSet<&str> = BTreeSet::new();
            for d in &diagnoses {
                for n in graph.neighbors(d) {
                    if proc_set.contains(n) {
                        linked.insert(n);
                    }
                }
            }
            let mut procedures = Vec::new();
            for &p in &proc_codes {
                let keep_prob = if linked.contains(p) {
                    spec.link_keep_prob
                } else {
                    spec.noise_rate
                };
                if rng.gen_bool(keep_prob) {
                    procedures.push(p.to_string());
                }
            }
            if procedures.is_empty() {
                failures += 1;
                if failures > 1000 {
                    return Err(CohortError::ResampleExhausted { visit_id });
                }
                continue;
            }
            visits.push(VisitRecord::new(visit_id, diagnoses, procedures, 0)?);
            break;
        }
    }
    apply_labels(&mut visits, &spec.label_rule, &proc_codes, &mut rng)?;
    Ok(visits)
}

fn apply_labels(
    visits: &mut [VisitRecord],
    rule: &LabelRule,
    proc_codes: &[&str],
    rng: &mut ChaCha8Rng,
) -> Result<(), CohortError> {
    let risk: BTreeSet<String> = match rule {
        LabelRule::ExplicitRisk { codes } => {
            let known: BTreeSet<&str> = proc_codes.iter().copied().collect();
            for code in codes {
                if !known.contains(code.as_str()) {
                    return Err(CohortError::BadRiskCode { code: code.clone() });
                }
            }
            codes.iter().cloned().collect()
        }
        LabelRule::RiskProcedures {
            target_positive_fraction,
        } => {
            if !(0.0..=1.0).contains(target_positive_fraction) {
                return Err(CohortError::BadTargetFraction {
                    got: *target_positive_fraction,
                });
            }
            let mut shuffled: Vec<&str> = proc_codes.to_vec();
            shuffled.shuffle(rng);
            let mut risk = BTreeSet::new();
            let mut positive = vec![false; visits.len()];
            let mut n_positive = 0usize;
            for code in shuffled {
                risk.insert(code.to_string());
                for (i, v) in visits.iter().enumerate() {
                    if !positive[i] && v.procedure_codes.iter().any(|p| p == code) {
                        positive[i] = true;
                        n_positive += 1;
                    }
                }
                if n_positive as f64 / visits.len() as f64 >= *target_positive_fraction {
                    break;
                }
            }
            risk
        }
    };
    for v in visits.iter_mut() {
        v.label = u8::from(v.procedure_codes.iter().any(|p| risk.contains(p)));
    }
    Ok(())
}

/// Checks that every visit code exists in the graph under the expected
/// role type — used when a cohort file and graph file arrive separately.
pub fn validate_cohort(
    cohort: &[VisitRecord],
    graph: &KnowledgeGraph,
    diagnosis_type: &NodeType,
    procedure_type: &NodeType,
) -> Result<(), CohortError> {
    for v in cohort {
        for (codes, expected) in [
            (&v.diagnosis_codes, diagnosis_type.name()),
            (&v.procedure_codes, procedure_type.name()),
        ] {
            for code in codes {
                if graph.node_type_of(code) != Some(expected) {
                    return Err(CohortError::UnknownCode {
                        visit_id: v.visit_id,
                        code: code.clone(),
                        expected: expected.to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Global conditional probabilities from visit co-occurrence.
///
/// `count(a, b)` is the number of visits containing both `a` and `b`,
/// recorded for cross-type pairs only and in both directions;
/// `p(b|a) = count(a,b) / Σ_c count(a,c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalTable {
    counts: BTreeMap<(String, String), u64>,
    probs: BTreeMap<(String, String), f64>,
}

impl ConditionalTable {
    pub fn count(&self, a: &str, b: &str) -> u64 {
        self.counts
            .get(&(a.to_string(), b.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn prob(&self, a: &str, b: &str) -> f64 {
        self.probs
            .get(&(a.to_string(), b.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    /// Whether `code` has at least one counted partner.
    pub fn knows(&self, code: &str) -> bool {
        // Keys are sorted; any entry with this source appears in the
        // half-open range starting at (code, "").
        self.counts
            .range((code.to_string(), String::new())..)
            .next()
            .is_some_and(|((a, _), _)| a == code)
    }

    /// All `(source, target, count, prob)` rows in sorted order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, u64, f64)> {
        self.counts.iter().map(|((a, b), count)| {
            let prob = self.probs[&(a.clone(), b.clone())];
            (a.as_str(), b.as_str(), *count, prob)
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Counts cross-type co-occurrences over the cohort and normalizes
/// them into conditional probabilities.
pub fn count_cooccurrence(cohort: &[VisitRecord]) -> Result<ConditionalTable, CohortError> {
    if cohort.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    for v in cohort {
        for d in &v.diagnosis_codes {
            for p in &v.procedure_codes {
                *counts.entry((d.clone(), p.clone())).or_insert(0) += 1;
                *counts.entry((p.clone(), d.clone())).or_insert(0) += 1;
            }
        }
    }
    let mut row_totals: BTreeMap<&str, u64> = BTreeMap::new();
    for ((a, _), c) in &counts {
        *row_totals.entry(a.as_str()).or_insert(0) += c;
    }
    let probs = counts
        .iter()
        .map(|((a, b), c)| {
            let total = row_totals[a.as_str()];
            ((a.clone(), b.clone()), *c as f64 / total as f64)
        })
        .collect();
    Ok(ConditionalTable { counts, probs })
}

/// Per-visit attention prior: the visit's tokens (diagnoses then
/// procedures), the row-stochastic prior `P`, and the additive mask
/// `M` forbidding same-type attention and the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMatrix {
    pub token_codes: Vec<String>,
    pub n_diagnoses: usize,
    pub p: DenseMatrix,
    pub m: DenseMatrix,
}

/// Builds the prior for one visit from the global table.
///
/// Row `i` of `P` is `p(code_j | code_i)` over the visit's allowed
/// (cross-type) columns, renormalized to sum to 1; a row whose lookups
/// are all zero falls back to uniform over its allowed columns.
pub fn build_visit_prior(
    visit: &VisitRecord,
    table: &ConditionalTable,
) -> Result<PriorMatrix, CohortError> {
    if visit.diagnosis_codes.is_empty() || visit.procedure_codes.is_empty() {
        return Err(CohortError::SingleTypeVisit {
            visit_id: visit.visit_id,
        });
    }
    let token_codes: Vec<String> = visit
        .token_codes()
        .into_iter()
        .map(str::to_string)
        .collect();
    for code in &token_codes {
        if !table.knows(code) {
            return Err(CohortError::CodeNotInTable {
                visit_id: visit.visit_id,
                code: code.clone(),
            });
        }
    }
    let n = token_codes.len();
    let n_diagnoses = visit.diagnosis_codes.len();
    let is_diagnosis = |i: usize| i < n_diagnoses;
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j || is_diagnosis(i) == is_diagnosis(j) {
                m.set(i, j, MASK_FORBIDDEN);
            }
        }
    }
    let mut p = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let allowed: Vec<usize> = (0..n).filter(|&j| m.get(i, j) == 0.0).collect();
        let raw: Vec<f64> = allowed
            .iter()
            .map(|&j| table.prob(&token_codes[i], &token_codes[j]))
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            for (&j, &v) in allowed.iter().zip(&raw) {
                p.set(i, j, v / total);
            }
        } else {
            let uniform = 1.0 / allowed.len() as f64;
            for &j in &allowed {
                p.set(i, j, uniform);
            }
        }
    }
    Ok(PriorMatrix {
        token_codes,
        n_diagnoses,
        p,
        m,
    })
}

/// A visit padded to a fixed token count, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVisit {
    pub visit_id: u64,
    /// Real tokens only (diagnoses then procedures), length `n_tokens`.
    pub token_codes: Vec<String>,
    /// Node type of each real token, parallel to `token_codes`.
    pub token_types: Vec<String>,
    pub n_tokens: usize,
    pub n_diagnoses: usize,
    /// `max_tokens x max_tokens` prior; padding rows self-attend with
    /// probability 1 so every row stays a valid distribution.
    pub prior: DenseMatrix,
    /// `max_tokens x max_tokens` additive mask; valid tokens may not
    /// attend to padding, and padding rows allow only themselves.
    pub mask: DenseMatrix,
    /// Which rows are real tokens; padding rows are excluded from KL
    /// row-averaging and from the pooled prediction features.
    pub valid: Vec<bool>,
    pub label: u8,
}

impl EncodedVisit {
    /// Inverse of encoding: the original (diagnoses, procedures) lists.
    pub fn decode(&self) -> (Vec<String>, Vec<String>) {
        (
            self.token_codes[..self.n_diagnoses].to_vec(),
            self.token_codes[self.n_diagnoses..].to_vec(),
        )
    }
}

/// Encodes visits against the table, padding each to `max_tokens`.
pub fn encode_batch(
    visits: &[VisitRecord],
    table: &ConditionalTable,
    max_tokens: usize,
    diagnosis_type: &NodeType,
    procedure_type: &NodeType,
) -> Result<Vec<EncodedVisit>, CohortError> {
    visits
        .iter()
        .map(|v| encode_visit(v, table, max_tokens, diagnosis_type, procedure_type))
        .collect()
}

fn encode_visit(
    visit: &VisitRecord,
    table: &ConditionalTable,
    max_tokens: usize,
    diagnosis_type: &NodeType,
    procedure_type: &NodeType,
) -> Result<EncodedVisit, CohortError> {
    let n_tokens = visit.n_tokens();
    if n_tokens > max_tokens {
        return Err(CohortError::OversizeVisit {
            visit_id: visit.visit_id,
            n_tokens,
            max_tokens,
        });
    }
    let prior = build_visit_prior(visit, table)?;
    let mut p = DenseMatrix::zeros(max_tokens, max_tokens);
    let mut m = DenseMatrix::zeros(max_tokens, max_tokens);
    for i in 0..max_tokens {
        for j in 0..max_tokens {
            let value = if i < n_tokens && j < n_tokens {
                prior.m.get(i, j)
            } else if i == j {
                // Padding rows attend to themselves: the row softmax
                // needs one allowed column, and the output is ignored.
                0.0
            } else {
                MASK_FORBIDDEN
            };
            m.set(i, j, value);
        }
    }
    for i in 0..max_tokens {
        if i < n_tokens {
            for j in 0..n_tokens {
                p.set(i, j, prior.p.get(i, j));
            }
        } else {
            p.set(i, i, 1.0);
        }
    }
    let mut valid = vec![false; max_tokens];
    valid[..n_tokens].fill(true);
    let token_types = (0..n_tokens)
        .map(|i| {
            if i < prior.n_diagnoses {
                diagnosis_type.name().to_string()
            } else {
                procedure_type.name().to_string()
            }
        })
        .collect();
    Ok(EncodedVisit {
        visit_id: visit.visit_id,
        token_codes: prior.token_codes,
        token_types,
        n_tokens,
        n_diagnoses: prior.n_diagnoses,
        prior: p,
        mask: m,
        valid,
        label: visit.label,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisitLine {
    visit_id: u64,
    diagnoses: Vec<String>,
    procedures: Vec<String>,
    label: u8,
}

/// Writes one JSON visit per line.
pub fn save_cohort(cohort: &[VisitRecord], path: &Path) -> Result<(), CohortError> {
    let io_err = |source| CohortError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for v in cohort {
        let line = VisitLine {
            visit_id: v.visit_id,
            diagnoses: v.diagnosis_codes.clone(),
            procedures: v.procedure_codes.clone(),
            label: v.label,
        };
        let json = serde_json::to_string(&line).expect("visit serializes");
        writeln!(out, "{json}").map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}

/// Reads a cohort written by [`save_cohort`], validating each record.
pub fn load_cohort(path: &Path) -> Result<Vec<VisitRecord>, CohortError> {
    let file = fs::File::open(path).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CohortError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed: VisitLine =
            serde_json::from_str(trimmed).map_err(|e| CohortError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        out.push(VisitRecord::new(
            parsed.visit_id,
            parsed.diagnoses,
            parsed.procedures,
            parsed.label,
        )?);
    }
    if out.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    Ok(out)
}

/// Dumps the table as `source,target,count,prob` CSV for audit.
pub fn write_table_csv(table: &ConditionalTable, path: &Path) -> Result<(), CohortError> {
    let io_err = |source| CohortError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    writeln!(out, "source,target,count,prob").map_err(io_err)?;
    for (a, b, count, prob) in table.entries() {
        writeln!(out, "{a},{b},{count},{prob}").map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}
