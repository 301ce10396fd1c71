//! Run configuration: one TOML file (or the built-in defaults) drives
//! every subcommand. Unknown keys are rejected at parse time so a typo
//! fails before any file is written, and the resolved config has a
//! stable canonical serialization whose FNV-1a hash identifies the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gct_roundtrip::cohort::{CohortSpec, LabelRule};
use gct_roundtrip::extract::{Aggregation, CandidateRule, ExtractOptions, ExtractionMode};
use gct_roundtrip::gct::{GctConfig, LossMode};
use gct_roundtrip::kg::NodeType;
use gct_roundtrip::seed::derive_seed;

/// Anything wrong with the configuration itself; callers map this to
/// the usage/config exit code, distinct from runtime failures.
#[derive(Debug)]
pub enum Error {
    Io { path: String, message: String },
    Parse { path: String, message: String },
    Invalid { message: String },
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Io { path, message } => write!(f, "cannot read config {path}: {message}"),
            Error::Parse { path, message } => write!(f, "cannot parse config {path}: {message}"),
            Error::Invalid { message } => write!(f, "invalid config: {message}"),
        }
    }
}

impl std::error::Error for Error {}

/// Knowledge-graph generation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KgSection {
    pub diagnosis_nodes: usize,
    pub procedure_nodes: usize,
    /// Probability of a cross-type edge, in (0, 1].
    pub edge_density: f64,
    /// Probability that a generated edge also gets its reverse, in [0, 1].
    pub bidirectional: f64,
}

impl Default for KgSection {
    fn default() -> Self {
        KgSection {
            diagnosis_nodes: 20,
            procedure_nodes: 20,
            edge_density: 0.3,
            bidirectional: 0.5,
        }
    }
}

/// Visit-cohort sampling section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSection {
    pub n_visits: usize,
    /// Inclusive (min, max) diagnoses drawn per visit.
    pub diag_per_visit: (usize, usize),
    /// Probability a linked procedure of a drawn diagnosis is kept, in (0, 1].
    pub link_keep_prob: f64,
    /// Probability of injecting an unlinked procedure, in [0, 1).
    pub noise_rate: f64,
    /// Target fraction of positive labels for the risk-procedure rule, in (0, 1).
    pub target_positive_fraction: f64,
    /// Fixed token-matrix size every visit is padded to.
    pub max_tokens: usize,
}

impl Default for CohortSection {
    fn default() -> Self {
        CohortSection {
            n_visits: 500,
            diag_per_visit: (1, 3),
            link_keep_prob: 0.8,
            noise_rate: 0.05,
            target_positive_fraction: 0.45,
            max_tokens: 32,
        }
    }
}

/// Model and training section; mirrors the trainer's hyperparameters.
/// The training seed is derived from the global seed, not set here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Objective for the single-mode `train` / `extract` commands;
    /// `roundtrip` always runs both modes.
    pub loss_mode: LossMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = GctConfig::default();
        ModelSection {
            num_blocks: d.num_blocks,
            embed_dim: d.embed_dim,
            mlp_hidden: d.mlp_hidden,
            lambda: d.lambda,
            learning_rate: d.learning_rate,
            steps: d.steps,
            batch_size: d.batch_size,
            eval_every: d.eval_every,
            loss_mode: d.loss_mode,
        }
    }
}

/// Which walk rule the extraction stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WalkMode {
    Greedy,
    Threshold,
}

/// Graph-recovery section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    /// 1-based attention layer to read; defaults to the last block.
    pub layer: Option<usize>,
    pub mode: WalkMode,
    /// Minimum step weight for threshold mode, in (0, 1).
    pub tau: f64,
    pub max_hops: usize,
    pub beam_width: usize,
    /// Recovered entries below this score are dropped when scoring.
    pub match_floor: f64,
    pub candidate_rule: CandidateRule,
    pub aggregation: Aggregation,
}

impl Default for ExtractSection {
    fn default() -> Self {
        let opts = ExtractOptions::default();
        ExtractSection {
            layer: None,
            mode: WalkMode::Greedy,
            tau: 0.3,
            max_hops: opts.max_hops,
            beam_width: opts.beam_width,
            match_floor: 0.0,
            candidate_rule: opts.candidate_rule,
            aggregation: opts.aggregation,
        }
    }
}

/// Output location section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("runs/default"),
        }
    }
}

/// The whole run configuration. `Default` is the reference setup the
/// repository's experiments and acceptance checks run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; every stage derives its own seed from this one.
    pub seed: u64,
    pub kg: KgSection,
    pub cohort: CohortSection,
    pub model: ModelSection,
    pub extract: ExtractSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            kg: KgSection::default(),
            cohort: CohortSection::default(),
            model: ModelSection::default(),
            extract: ExtractSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Error {
    Error::Invalid {
        message: message.into(),
    }
}

impl RunConfig {
    /// Parses a TOML file; unknown keys anywhere are a parse error.
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Applies command-line overrides and pins the extraction layer to
    /// its effective value so the canonical form is fully explicit.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<&Path>) -> Self {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(dir) = out {
            self.output.directory = dir.to_path_buf();
        }
        self.extract.layer = Some(self.effective_layer());
        self
    }

    /// The 1-based attention layer extraction reads; the last block
    /// unless the config names one.
    pub fn effective_layer(&self) -> usize {
        self.extract.layer.unwrap_or(self.model.num_blocks)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let kg = &self.kg;
        if kg.diagnosis_nodes == 0 || kg.procedure_nodes == 0 {
            return Err(invalid("kg: both node counts must be at least 1"));
        }
        if !(kg.edge_density > 0.0 && kg.edge_density <= 1.0) {
            return Err(invalid(format!(
                "kg.edge_density must be in (0, 1], got {}",
                kg.edge_density
            )));
        }
        if !(0.0..=1.0).contains(&kg.bidirectional) {
            return Err(invalid(format!(
                "kg.bidirectional must be in [0, 1], got {}",
                kg.bidirectional
            )));
        }
        let cohort = &self.cohort;
        if cohort.n_visits < 2 {
            return Err(invalid(
                "cohort.n_visits must be at least 2 (training holds out a split)",
            ));
        }
        let (lo, hi) = cohort.diag_per_visit;
        if lo < 1 || lo > hi {
            return Err(invalid(format!(
                "cohort.diag_per_visit must satisfy 1 <= min <= max, got [{lo}, {hi}]"
            )));
        }
        if !(cohort.link_keep_prob > 0.0 && cohort.link_keep_prob <= 1.0) {
            return Err(invalid(format!(
                "cohort.link_keep_prob must be in (0, 1], got {}",
                cohort.link_keep_prob
            )));
        }
        if !(0.0..1.0).contains(&cohort.noise_rate) {
            return Err(invalid(format!(
                "cohort.noise_rate must be in [0, 1), got {}",
                cohort.noise_rate
            )));
        }
        if !(cohort.target_positive_fraction > 0.0 && cohort.target_positive_fraction < 1.0) {
            return Err(invalid(format!(
                "cohort.target_positive_fraction must be in (0, 1), got {}",
                cohort.target_positive_fraction
            )));
        }
        if cohort.max_tokens < 2 {
            return Err(invalid("cohort.max_tokens must be at least 2"));
        }
        self.gct_config(self.model.loss_mode)
            .validate()
            .map_err(|e| invalid(format!("model: {e}")))?;
        let extract = &self.extract;
        let layer = self.effective_layer();
        if layer < 1 || layer > self.model.num_blocks {
            return Err(invalid(format!(
                "extract.layer must be in [1, {}], got {layer}",
                self.model.num_blocks
            )));
        }
        if extract.mode == WalkMode::Threshold && !(extract.tau > 0.0 && extract.tau < 1.0) {
            return Err(invalid(format!(
                "extract.tau must be in (0, 1) for threshold mode, got {}",
                extract.tau
            )));
        }
        if extract.max_hops < 1 {
            return Err(invalid("extract.max_hops must be at least 1"));
        }
        if extract.beam_width < 1 {
            return Err(invalid("extract.beam_width must be at least 1"));
        }
        if !(extract.match_floor >= 0.0 && extract.match_floor.is_finite()) {
            return Err(invalid(format!(
                "extract.match_floor must be finite and non-negative, got {}",
                extract.match_floor
            )));
        }
        if self.output.directory.as_os_str().is_empty() {
            return Err(invalid("output.directory must not be empty"));
        }
        Ok(())
    }

    /// Canonical serialized form: field order is fixed by the struct
    /// definitions, so identical configs give identical bytes.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a hash (hex) identifying the experiment. The output section
    /// is normalized away first: the same experiment written to two
    /// different directories hashes identically.
    pub fn config_hash(&self) -> String {
        let normalized = Self {
            output: OutputSection::default(),
            ..self.clone()
        };
        format!("{:016x}", fnv1a64(normalized.canonical_toml().as_bytes()))
    }

    /// Seed for a named pipeline stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Node types the synthetic graph and cohort use.
    pub fn node_types(&self) -> (NodeType, NodeType) {
        (
            NodeType::new("diagnosis").expect("literal type name"),
            NodeType::new("procedure").expect("literal type name"),
        )
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        let mut spec = CohortSpec::new(self.cohort.n_visits, self.stage_seed("cohort"));
        spec.diag_per_visit = self.cohort.diag_per_visit;
        spec.link_keep_prob = self.cohort.link_keep_prob;
        spec.noise_rate = self.cohort.noise_rate;
        spec.label_rule = LabelRule::RiskProcedures {
            target_positive_fraction: self.cohort.target_positive_fraction,
        };
        spec
    }

    /// Trainer config for the given mode. Both modes share the derived
    /// training seed, so a round trip compares runs that start from the
    /// same initialization and batch schedule.
    pub fn gct_config(&self, mode: LossMode) -> GctConfig {
        GctConfig {
            num_blocks: self.model.num_blocks,
            embed_dim: self.model.embed_dim,
            mlp_hidden: self.model.mlp_hidden,
            lambda: self.model.lambda,
            learning_rate: self.model.learning_rate,
            steps: self.model.steps,
            batch_size: self.model.batch_size,
            eval_every: self.model.eval_every,
            loss_mode: mode,
            seed: self.stage_seed("train"),
        }
    }

    pub fn extraction_mode(&self) -> ExtractionMode {
        match self.extract.mode {
            WalkMode::Greedy => ExtractionMode::Greedy,
            WalkMode::Threshold => ExtractionMode::Threshold {
                tau: self.extract.tau,
            },
        }
    }

    pub fn extract_options(&self) -> ExtractOptions {
        ExtractOptions {
            max_hops: self.extract.max_hops,
            beam_width: self.extract.beam_width,
            candidate_rule: self.extract.candidate_rule,
            aggregation: self.extract.aggregation,
        }
    }
}

/// 64-bit FNV-1a over raw bytes.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Loads (or defaults), applies overrides, resolves, and validates.
pub fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig, Error> {
    let base = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(seed, out);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_resolve_to_last_layer() {
        let cfg = RunConfig::default().resolve(None, None);
        cfg.validate().unwrap();
        assert_eq!(cfg.extract.layer, Some(3));
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.model.steps, 2000);
        assert_eq!(cfg.cohort.n_visits, 500);
        assert_eq!(cfg.kg.diagnosis_nodes, 20);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = toml::from_str::<RunConfig>("[model]\nsteps = 10\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(toml::from_str::<RunConfig>("[models]\nsteps = 10\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 7\n[model]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.steps, 5);
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.cohort.n_visits, 500);
    }

    #[test]
    fn hash_changes_with_content_and_not_without() {
        let a = RunConfig::default().resolve(None, None);
        let b = RunConfig::default().resolve(None, None);
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig::default().resolve(Some(43), None);
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let a = RunConfig::default().resolve(None, Some(Path::new("runs/a")));
        let b = RunConfig::default().resolve(None, Some(Path::new("runs/b")));
        assert_ne!(a.output.directory, b.output.directory);
        assert_eq!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn seed_override_wins() {
        let cfg: RunConfig = toml::from_str("seed = 7\n").unwrap();
        let cfg = cfg.resolve(Some(99), None);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let mut cfg = RunConfig::default();
        cfg.kg.edge_density = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.extract.layer = Some(9);
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.extract.mode = WalkMode::Threshold;
        cfg.extract.tau = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.cohort.noise_rate = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.model.lambda = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = RunConfig::default().resolve(None, None);
        let text = cfg.canonical_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.canonical_toml(), text);
    }
}
