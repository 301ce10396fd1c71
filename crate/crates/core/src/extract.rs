//! Knowledge-graph recovery from attention matrices.
//!
//! An [`AttentionView`] wraps one visit's attention matrix as a token
//! transition table: `att(from, to)` is the weight of stepping from
//! token `from` to token `to` (the query row is the "from" side).
//! [`extract_triple`] walks it greedily — from the head, repeatedly
//! step to the unvisited token with maximum attention, accumulating
//! weights, until the tail is stepped on — and [`extract_threshold`]
//! explores every step above a weight threshold with a bounded beam.
//! [`recover_graph`] runs extraction over a whole cohort and
//! aggregates the resulting triples per ordered (head, tail) pair.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::EncodedVisit;
use crate::gct::{attention_of_layer, GctError, GctModel};
use crate::kg::{relation_label, Edge, Node};
use crate::numerics::DenseMatrix;

/// How `AttentionView.weights` is oriented, recorded in the recovered
/// graph's metadata: row index = token stepped from, column = token
/// stepped to.
pub const ORIENTATION_NOTE: &str = "query-row-is-from";

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("attention view has no tokens")]
    EmptyView,
    #[error(
        "view shape mismatch: {codes} codes, {types} types, {rows}x{cols} weight matrix"
    )]
    ViewShapeMismatch {
        codes: usize,
        types: usize,
        rows: usize,
        cols: usize,
    },
    #[error("token {code:?} appears twice in the view")]
    DuplicateToken { code: String },
    #[error("negative attention weight {value} at ({row}, {col})")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("token {code:?} is not in the view")]
    TokenNotInView { code: String },
    #[error("head and tail are the same token {code:?}")]
    HeadEqualsTail { code: String },
    #[error("max_hops must be at least 1")]
    BadMaxHops,
    #[error("beam_width must be at least 1")]
    BadBeamWidth,
    #[error("threshold must lie strictly between 0 and 1, got {tau}")]
    BadThreshold { tau: f64 },
    #[error(
        "relation {relation:?} is neither the {head_type:?}->{tail_type:?} type-pair label nor a via: path"
    )]
    BadRelation {
        relation: String,
        head_type: String,
        tail_type: String,
    },
    #[error("token code {code:?} contains a comma and cannot be written to a via: label")]
    UnencodableCode { code: String },
    #[error("recovered graph file has no #extract metadata line")]
    MissingMeta,
    #[error("{path}:{line}: {message}")]
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
    #[error(transparent)]
    Gct(#[from] GctError),
}

/// One visit's attention matrix, addressable by token.
///
/// Square over the visit's tokens, non-negative entries; walks never
/// consider self-steps regardless of the diagonal's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionView {
    token_codes: Vec<String>,
    token_types: Vec<String>,
    weights: DenseMatrix,
}

impl AttentionView {
    pub fn new(
        token_codes: Vec<String>,
        token_types: Vec<String>,
        weights: DenseMatrix,
    ) -> Result<Self, ExtractError> {
        let n = token_codes.len();
        if n == 0 {
            return Err(ExtractError::EmptyView);
        }
        if token_types.len() != n || weights.rows() != n || weights.cols() != n {
            return Err(ExtractError::ViewShapeMismatch {
                codes: n,
                types: token_types.len(),
                rows: weights.rows(),
                cols: weights.cols(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for code in &token_codes {
            if !seen.insert(code.as_str()) {
                return Err(ExtractError::DuplicateToken { code: code.clone() });
            }
        }
        for row in 0..n {
            for col in 0..n {
                let value = weights.get(row, col);
                if value < 0.0 {
                    return Err(ExtractError::NegativeWeight { row, col, value });
                }
            }
        }
        Ok(AttentionView {
            token_codes,
            token_types,
            weights,
        })
    }

    /// View of one visit through block `layer`'s attention (layer 1 is
    /// the conditional-probability prior).
    pub fn from_visit(
        model: &GctModel,
        enc: &EncodedVisit,
        layer: usize,
    ) -> Result<Self, ExtractError> {
        let weights = attention_of_layer(model, enc, layer)?;
        AttentionView::new(enc.token_codes.clone(), enc.token_types.clone(), weights)
    }

    pub fn len(&self) -> usize {
        self.token_codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_codes.is_empty()
    }

    pub fn token_codes(&self) -> &[String] {
        &self.token_codes
    }

    pub fn token_types(&self) -> &[String] {
        &self.token_types
    }

    /// Weight of stepping from token `from` to token `to` (by index).
    pub fn att(&self, from: usize, to: usize) -> f64 {
        self.weights.get(from, to)
    }

    fn index_of(&self, code: &str) -> Result<usize, ExtractError> {
        self.token_codes
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| ExtractError::TokenNotInView {
                code: code.to_string(),
            })
    }
}

/// A head→tail path read off an attention matrix. `match_score` is the
/// exact sum of the traversed step weights; `intermediates` lists the
/// tokens yielded between head and tail, in walk order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedTriple {
    pub head: String,
    pub intermediates: Vec<String>,
    pub tail: String,
    pub head_type: String,
    pub tail_type: String,
    pub match_score: f64,
}

impl ExtractedTriple {
    /// The relation this path asserts. Direct (0 intermediate) paths
    /// get the head/tail type-pair label — visits carry no relation
    /// tokens, so the types are all that is recoverable — and longer
    /// paths are labeled `via:` plus the comma-joined intermediates.
    pub fn relation_label(&self) -> String {
        if self.intermediates.is_empty() {
            relation_label(&self.head_type, &self.tail_type)
        } else {
            format!("via:{}", self.intermediates.join(","))
        }
    }
}

/// Shared argument validation for the two extraction walks.
fn check_walk_args(
    view: &AttentionView,
    head: &str,
    tail: &str,
    max_hops: usize,
) -> Result<(usize, usize), ExtractError> {
    if max_hops < 1 {
        return Err(ExtractError::BadMaxHops);
    }
    let head_idx = view.index_of(head)?;
    let tail_idx = view.index_of(tail)?;
    if head_idx == tail_idx {
        return Err(ExtractError::HeadEqualsTail {
            code: head.to_string(),
        });
    }
    Ok((head_idx, tail_idx))
}

fn triple_from_path(view: &AttentionView, path: &[usize], match_score: f64) -> ExtractedTriple {
    let head = path[0];
    let tail = *path.last().expect("path has head and tail");
    ExtractedTriple {
        head: view.token_codes[head].clone(),
        intermediates: path[1..path.len() - 1]
            .iter()
            .map(|&i| view.token_codes[i].clone())
            .collect(),
        tail: view.token_codes[tail].clone(),
        head_type: view.token_types[head].clone(),
        tail_type: view.token_types[tail].clone(),
        match_score,
    }
}

/// Greedy walk from `head`: step to the unvisited token with maximum
/// attention from the current one, as an index path plus the summed
/// step weights. Ends when the tail is stepped on; `None` when the
/// walk runs out of candidates or would exceed `max_hops` steps.
fn greedy_path(
    view: &AttentionView,
    head_idx: usize,
    tail_idx: usize,
    max_hops: usize,
) -> Option<(Vec<usize>, f64)> {
    let n = view.len();
    let mut visited = vec![false; n];
    visited[head_idx] = true;
    let mut current = head_idx;
    let mut path = vec![head_idx];
    let mut match_score = 0.0;
    for _ in 0..max_hops {
        // Argmax over unvisited tokens; ties go to the lowest index
        // because only a strictly greater weight replaces the pick.
        let mut best: Option<usize> = None;
        for (next, &seen) in visited.iter().enumerate() {
            if seen {
                continue;
            }
            match best {
                None => best = Some(next),
                Some(b) if view.att(current, next) > view.att(current, b) => best = Some(next),
                Some(_) => {}
            }
        }
        let next = best?;
        match_score += view.att(current, next);
        path.push(next);
        if next == tail_idx {
            return Some((path, match_score));
        }
        visited[next] = true;
        current = next;
    }
    None
}

/// Extracts one triple by the greedy max-attention walk.
///
/// Starting at `head`, each step yields the unvisited token with the
/// highest attention from the current token (ties broken toward the
/// lowest index), adding that weight to the match; the walk stops the
/// moment the tail is the pick. Returns `None` when the tail is not
/// reached within `max_hops` steps or no unvisited candidates remain.
pub fn extract_triple(
    view: &AttentionView,
    head: &str,
    tail: &str,
    max_hops: usize,
) -> Result<Option<ExtractedTriple>, ExtractError> {
    let (head_idx, tail_idx) = check_walk_args(view, head, tail, max_hops)?;
    Ok(greedy_path(view, head_idx, tail_idx, max_hops)
        .map(|(path, score)| triple_from_path(view, &path, score)))
}

/// Partial path in the threshold beam: deterministic ordering is by
/// descending match, then ascending index sequence.
struct Partial {
    path: Vec<usize>,
    match_score: f64,
}

/// Extracts every head→tail path whose steps all carry attention at
/// least `tau`, explored with a per-depth beam of `beam_width` partial
/// paths kept best-match-first. Completed paths do not occupy beam
/// slots. The greedy triple, when it exists and all its steps clear
/// `tau`, is always present in the result even if the beam evicted its
/// prefix. Sorted by match descending (ties: by token order).
pub fn extract_threshold(
    view: &AttentionView,
    head: &str,
    tail: &str,
    tau: f64,
    max_hops: usize,
    beam_width: usize,
) -> Result<Vec<ExtractedTriple>, ExtractError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(ExtractError::BadThreshold { tau });
    }
    if beam_width < 1 {
        return Err(ExtractError::BadBeamWidth);
    }
    let (head_idx, tail_idx) = check_walk_args(view, head, tail, max_hops)?;
    let n = view.len();
    let mut frontier = vec![Partial {
        path: vec![head_idx],
        match_score: 0.0,
    }];
    let mut completions: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_hops {
        let mut expanded: Vec<Partial> = Vec::new();
        for partial in &frontier {
            let current = *partial.path.last().expect("path is never empty");
            for next in 0..n {
                if partial.path.contains(&next) {
                    continue;
                }
                let weight = view.att(current, next);
                if weight < tau {
                    continue;
                }
                let mut path = partial.path.clone();
                path.push(next);
                let match_score = partial.match_score + weight;
                if next == tail_idx {
                    completions.push((path, match_score));
                } else {
                    expanded.push(Partial { path, match_score });
                }
            }
        }
        expanded.sort_by(|a, b| {
            b.match_score
                .partial_cmp(&a.match_score)
                .expect("weights are finite")
                .then_with(|| a.path.cmp(&b.path))
        });
        expanded.truncate(beam_width);
        if expanded.is_empty() {
            break;
        }
        frontier = expanded;
    }
    // Guarantee threshold dominance: a greedy path whose every step
    // clears tau is a valid result even when beam pruning dropped it.
    if let Some((path, score)) = greedy_path(view, head_idx, tail_idx, max_hops) {
        let all_clear = path
            .windows(2)
            .all(|step| view.att(step[0], step[1]) >= tau);
        if all_clear && !completions.iter().any(|(p, _)| *p == path) {
            completions.push((path, score));
        }
    }
    completions.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("weights are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(completions
        .iter()
        .map(|(path, score)| triple_from_path(view, path, *score))
        .collect())
}

/// Which ordered token pairs of a visit are tried as (head, tail).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRule {
    /// Ordered pairs of tokens with different node types.
    #[default]
    CrossTypePairs,
    /// Every ordered pair of distinct tokens.
    AllOrderedPairs,
}

/// How per-visit matches for the same (head, tail) combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Best match observed anywhere (the default).
    #[default]
    Max,
    /// Arithmetic mean of the observed matches.
    Mean,
    /// Sum of the observed matches (mean times observation count).
    CountWeighted,
}

/// Walk extraction with the greedy argmax rule or with a weight
/// threshold and beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractionMode {
    Greedy,
    Threshold { tau: f64 },
}

/// Extraction knobs shared by both modes; `beam_width` only matters in
/// threshold mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub max_hops: usize,
    pub beam_width: usize,
    pub candidate_rule: CandidateRule,
    pub aggregation: Aggregation,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            max_hops: 3,
            beam_width: 4,
            candidate_rule: CandidateRule::default(),
            aggregation: Aggregation::default(),
        }
    }
}

/// One aggregated (head, tail) pair of a recovered graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredEntry {
    /// The best-match path observed for this pair; its `match_score`
    /// is that single path's weight sum.
    pub triple: ExtractedTriple,
    /// Aggregated score across observations, per the run's
    /// [`Aggregation`]; equals `triple.match_score` under `Max`.
    pub score: f64,
    /// How many extracted paths fed this pair.
    pub observations: usize,
}

/// Triples aggregated over a cohort, one entry per ordered
/// (head, tail) pair, ordered by pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecoveredGraph {
    entries: BTreeMap<(String, String), RecoveredEntry>,
}

impl RecoveredGraph {
    pub fn entries(&self) -> impl Iterator<Item = &RecoveredEntry> {
        self.entries.values()
    }

    pub fn get(&self, head: &str, tail: &str) -> Option<&RecoveredEntry> {
        self.entries
            .get(&(head.to_string(), tail.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Accumulates per-pair observations; `finish` resolves the
/// aggregation. Folding is order-independent for `Max` (commutative)
/// and processed in deterministic visit order for the sum-based modes.
#[derive(Default)]
pub(crate) struct RecoveredBuilder {
    accums: BTreeMap<(String, String), Accum>,
}

struct Accum {
    best: ExtractedTriple,
    sum: f64,
    count: usize,
}

impl RecoveredBuilder {
    pub(crate) fn new() -> Self {
        RecoveredBuilder::default()
    }

    pub(crate) fn observe(&mut self, triple: ExtractedTriple) {
        let key = (triple.head.clone(), triple.tail.clone());
        match self.accums.get_mut(&key) {
            None => {
                self.accums.insert(
                    key,
                    Accum {
                        sum: triple.match_score,
                        count: 1,
                        best: triple,
                    },
                );
            }
            Some(accum) => {
                accum.sum += triple.match_score;
                accum.count += 1;
                // Strictly greater keeps the first-seen path on ties.
                if triple.match_score > accum.best.match_score {
                    accum.best = triple;
                }
            }
        }
    }

    pub(crate) fn finish(self, aggregation: Aggregation) -> RecoveredGraph {
        let entries = self
            .accums
            .into_iter()
            .map(|(key, accum)| {
                let score = match aggregation {
                    Aggregation::Max => accum.best.match_score,
                    Aggregation::Mean => accum.sum / accum.count as f64,
                    Aggregation::CountWeighted => accum.sum,
                };
                (
                    key,
                    RecoveredEntry {
                        triple: accum.best,
                        score,
                        observations: accum.count,
                    },
                )
            })
            .collect();
        RecoveredGraph { entries }
    }
}

/// Runs extraction over every candidate pair of every visit at one
/// attention layer and aggregates the triples per (head, tail).
/// Deterministic: visits in slice order, pairs in ascending index
/// order, aggregation keyed by ordered pair.
pub fn recover_graph(
    model: &GctModel,
    encodings: &[EncodedVisit],
    layer: usize,
    mode: ExtractionMode,
    options: &ExtractOptions,
) -> Result<RecoveredGraph, ExtractError> {
    if layer < 1 || layer > model.config().num_blocks {
        return Err(ExtractError::Gct(GctError::LayerOutOfRange {
            layer,
            num_blocks: model.config().num_blocks,
        }));
    }
    if options.max_hops < 1 {
        return Err(ExtractError::BadMaxHops);
    }
    if options.beam_width < 1 {
        return Err(ExtractError::BadBeamWidth);
    }
    if let ExtractionMode::Threshold { tau } = mode {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(ExtractError::BadThreshold { tau });
        }
    }
    let mut builder = RecoveredBuilder::new();
    for enc in encodings {
        let view = AttentionView::from_visit(model, enc, layer)?;
        for head in 0..view.len() {
            for tail in 0..view.len() {
                if head == tail {
                    continue;
                }
                if options.candidate_rule == CandidateRule::CrossTypePairs
                    && view.token_types[head] == view.token_types[tail]
                {
                    continue;
                }
                let head_code = &view.token_codes[head];
                let tail_code = &view.token_codes[tail];
                match mode {
                    ExtractionMode::Greedy => {
                        if let Some(triple) =
                            extract_triple(&view, head_code, tail_code, options.max_hops)?
                        {
                            builder.observe(triple);
                        }
                    }
                    ExtractionMode::Threshold { tau } => {
                        for triple in extract_threshold(
                            &view,
                            head_code,
                            tail_code,
                            tau,
                            options.max_hops,
                            options.beam_width,
                        )? {
                            builder.observe(triple);
                        }
                    }
                }
            }
        }
    }
    Ok(builder.finish(options.aggregation))
}

/// Extraction parameters echoed into the recovered graph file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractMeta {
    pub layer: usize,
    pub mode: ExtractionMode,
    pub max_hops: usize,
    pub beam_width: usize,
    pub candidate_rule: CandidateRule,
    pub aggregation: Aggregation,
    /// What a weight matrix row means; always [`ORIENTATION_NOTE`].
    pub orientation: String,
}

impl ExtractMeta {
    pub fn new(layer: usize, mode: ExtractionMode, options: &ExtractOptions) -> Self {
        ExtractMeta {
            layer,
            mode,
            max_hops: options.max_hops,
            beam_width: options.beam_width,
            candidate_rule: options.candidate_rule,
            aggregation: options.aggregation,
            orientation: ORIENTATION_NOTE.to_string(),
        }
    }
}

const NODES_HEADER: &str = "#nodes ";
const EXTRACT_HEADER: &str = "#extract ";

/// Writes a recovered graph in the knowledge-graph JSONL format: a
/// `#nodes` header over the entry endpoints, an `#extract` metadata
/// line echoing the parameters, then one edge per entry whose `match`
/// field is the aggregated score. Entries are written in pair order,
/// so identical graphs produce byte-identical files.
pub fn save_recovered(
    graph: &RecoveredGraph,
    meta: &ExtractMeta,
    path: &Path,
) -> Result<(), ExtractError> {
    let io_err = |source| ExtractError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut nodes: BTreeMap<&str, &str> = BTreeMap::new();
    for entry in graph.entries() {
        for code in [&entry.triple.head, &entry.triple.tail]
            .into_iter()
            .chain(&entry.triple.intermediates)
        {
            if code.contains(',') {
                return Err(ExtractError::UnencodableCode { code: code.clone() });
            }
        }
        nodes.insert(&entry.triple.head, &entry.triple.head_type);
        nodes.insert(&entry.triple.tail, &entry.triple.tail_type);
    }
    let node_list: Vec<Node> = nodes
        .into_iter()
        .map(|(code, node_type)| Node {
            code: code.to_string(),
            node_type: node_type.to_string(),
        })
        .collect();
    let mut out = Vec::new();
    let nodes_json = serde_json::to_string(&node_list).expect("nodes serialize");
    writeln!(out, "{NODES_HEADER}{nodes_json}").map_err(io_err)?;
    let meta_json = serde_json::to_string(meta).expect("meta serializes");
    writeln!(out, "{EXTRACT_HEADER}{meta_json}").map_err(io_err)?;
    for entry in graph.entries() {
        let edge = Edge {
            head: entry.triple.head.clone(),
            relation: entry.triple.relation_label(),
            tail: entry.triple.tail.clone(),
            head_type: entry.triple.head_type.clone(),
            tail_type: entry.triple.tail_type.clone(),
            match_score: Some(entry.score),
        };
        let line = serde_json::to_string(&edge).expect("edge serializes");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    fs::write(path, out).map_err(io_err)
}

/// Reads a file written by [`save_recovered`].
///
/// The file stores only the aggregate per pair, so each loaded entry
/// reports one observation and its triple's `match_score` equals the
/// stored score. `via:` relations are split back into intermediates;
/// direct relations must equal the type-pair label.
pub fn load_recovered(path: &Path) -> Result<(RecoveredGraph, ExtractMeta), ExtractError> {
    let file = fs::File::open(path).map_err(|source| ExtractError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| ExtractError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut meta: Option<ExtractMeta> = None;
    let mut entries: BTreeMap<(String, String), RecoveredEntry> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| ExtractError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let line_no = idx + 1;
        if let Some(rest) = line.strip_prefix(EXTRACT_HEADER) {
            meta = Some(
                serde_json::from_str(rest).map_err(|e| parse_err(line_no, e.to_string()))?,
            );
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let edge: Edge =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let score = edge
            .match_score
            .ok_or_else(|| parse_err(line_no, "edge has no match field".to_string()))?;
        let intermediates = if let Some(joined) = edge.relation.strip_prefix("via:") {
            joined.split(',').map(str::to_string).collect()
        } else if edge.relation == relation_label(&edge.head_type, &edge.tail_type) {
            Vec::new()
        } else {
            return Err(ExtractError::BadRelation {
                relation: edge.relation,
                head_type: edge.head_type,
                tail_type: edge.tail_type,
            });
        };
        let key = (edge.head.clone(), edge.tail.clone());
        let entry = RecoveredEntry {
            triple: ExtractedTriple {
                head: edge.head,
                intermediates,
                tail: edge.tail,
                head_type: edge.head_type,
                tail_type: edge.tail_type,
                match_score: score,
            },
            score,
            observations: 1,
        };
        if entries.insert(key.clone(), entry).is_some() {
            return Err(parse_err(
                line_no,
                format!("duplicate pair ({}, {})", key.0, key.1),
            ));
        }
    }
    let meta = meta.ok_or(ExtractError::MissingMeta)?;
    Ok((RecoveredGraph { entries }, meta))
}
