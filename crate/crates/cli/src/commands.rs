//! Subcommand implementations. Each command takes the resolved
//! [`RunConfig`], works inside its output directory, and returns the
//! `key=value` lines the binary prints, so tests can drive commands
//! in-process and compare printed values against the emitted files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use gct_roundtrip::cohort::{
    count_cooccurrence, encode_batch, load_cohort, sample_cohort, save_cohort, write_table_csv,
    ConditionalTable, EncodedVisit, VisitRecord,
};
use gct_roundtrip::eval::{
    compare_runs, read_report_csv, score_recovery, write_comparison, write_report_csv,
    ComparisonSummary, RecoveryScore, RoundTripReport,
};
use gct_roundtrip::extract::{load_recovered, recover_graph, save_recovered, ExtractMeta};
use gct_roundtrip::gct::{
    init_model, load_checkpoint, save_checkpoint, train, vocab_from_graph, GctError, GctModel,
    LossMode,
};
use gct_roundtrip::kg::{generate_synthetic_kg, load_kg, save_kg, KnowledgeGraph};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const KG_FILE: &str = "kg.jsonl";
pub const COHORT_FILE: &str = "cohort.jsonl";
pub const TABLE_FILE: &str = "conditional_table.csv";
pub const EVALUATION_FILE: &str = "evaluation.txt";
pub const COMPARISON_FILE: &str = "comparison.txt";
/// Recovery read from the first block, whose attention is the fixed
/// conditional-probability prior.
pub const RECOVERED_PRIOR_FILE: &str = "recovered_prior.jsonl";

pub fn checkpoint_file(mode: LossMode) -> String {
    format!("checkpoint_{mode}.json")
}

pub fn report_file(mode: LossMode) -> String {
    format!("report_{mode}.csv")
}

pub fn recovered_file(mode: LossMode) -> String {
    format!("recovered_{mode}.jsonl")
}

/// Ordered `key=value` pairs a command reports on stdout.
#[derive(Debug, Default, Clone)]
pub struct CommandOutput {
    pub lines: Vec<(String, String)>,
}

impl CommandOutput {
    fn kv(&mut self, key: impl Into<String>, value: impl std::fmt::Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn rendered(&self) -> String {
        let mut text = String::new();
        for (k, v) in &self.lines {
            writeln!(text, "{k}={v}").expect("string write");
        }
        text
    }
}

fn run_dir(config: &RunConfig) -> &Path {
    &config.output.directory
}

fn ensure_run_dir(config: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = config.output.directory.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_resolved_config(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config.canonical_toml())
        .with_context(|| format!("writing {}", path.display()))
}

fn encode_visits(
    config: &RunConfig,
    visits: &[VisitRecord],
) -> anyhow::Result<(ConditionalTable, Vec<EncodedVisit>)> {
    let table = count_cooccurrence(visits)?;
    let (diagnosis, procedure) = config.node_types();
    let encoded = encode_batch(
        visits,
        &table,
        config.cohort.max_tokens,
        &diagnosis,
        &procedure,
    )?;
    Ok((table, encoded))
}

struct RunInputs {
    graph: KnowledgeGraph,
    encoded: Vec<EncodedVisit>,
}

/// Loads the graph and cohort a previous `generate` wrote and rebuilds
/// the encoded batch from them.
fn load_run_inputs(config: &RunConfig) -> anyhow::Result<RunInputs> {
    let dir = run_dir(config);
    let kg_path = dir.join(KG_FILE);
    if !kg_path.is_file() {
        bail!(
            "{} not found; run the generate command for this directory first",
            kg_path.display()
        );
    }
    let graph = load_kg(&kg_path)?;
    let visits = load_cohort(&dir.join(COHORT_FILE))?;
    let (_, encoded) = encode_visits(config, &visits)?;
    Ok(RunInputs { graph, encoded })
}

/// Generates the synthetic graph and cohort and writes all three
/// generate-stage artifacts.
fn generate_artifacts(
    config: &RunConfig,
    dir: &Path,
) -> anyhow::Result<(KnowledgeGraph, Vec<VisitRecord>, ConditionalTable)> {
    let (diagnosis, procedure) = config.node_types();
    let graph = generate_synthetic_kg(
        &[
            (diagnosis, config.kg.diagnosis_nodes),
            (procedure, config.kg.procedure_nodes),
        ],
        config.kg.edge_density,
        config.kg.bidirectional,
        config.stage_seed("kg"),
    )?;
    let visits = sample_cohort(&graph, &config.cohort_spec())?;
    let table = count_cooccurrence(&visits)?;
    save_kg(&graph, &dir.join(KG_FILE))?;
    save_cohort(&visits, &dir.join(COHORT_FILE))?;
    write_table_csv(&table, &dir.join(TABLE_FILE))?;
    Ok((graph, visits, table))
}

pub fn cmd_generate(config: &RunConfig) -> anyhow::Result<CommandOutput> {
    let dir = ensure_run_dir(config)?;
    write_resolved_config(config, &dir)?;
    let (graph, visits, table) = generate_artifacts(config, &dir)?;
    let mut out = CommandOutput::default();
    out.kv("nodes", graph.nodes().len());
    out.kv("edges", graph.edges().len());
    out.kv("visits", visits.len());
    out.kv("table_entries", table.len());
    out.kv("kg_file", dir.join(KG_FILE).display());
    out.kv("cohort_file", dir.join(COHORT_FILE).display());
    out.kv("table_file", dir.join(TABLE_FILE).display());
    Ok(out)
}

/// Trains one loss mode and writes its checkpoint and report. On
/// divergence the rows collected so far are still written before the
/// error is raised.
fn train_one(
    config: &RunConfig,
    mode: LossMode,
    dir: &Path,
    graph: &KnowledgeGraph,
    encoded: &[EncodedVisit],
) -> anyhow::Result<(GctModel, RoundTripReport)> {
    let gct_cfg = config.gct_config(mode);
    let hash = config.config_hash();
    let mut model = init_model(&gct_cfg, &vocab_from_graph(graph))?;
    match train(&mut model, encoded) {
        Ok(rows) => {
            let report =
                RoundTripReport::new(rows, &mode.to_string(), gct_cfg.lambda, gct_cfg.seed, &hash)?;
            save_checkpoint(&model, &dir.join(checkpoint_file(mode)))?;
            write_report_csv(&report, &dir.join(report_file(mode)))?;
            Ok((model, report))
        }
        Err(GctError::Diverged { step, rows }) => {
            let report =
                RoundTripReport::new(rows, &mode.to_string(), gct_cfg.lambda, gct_cfg.seed, &hash)?;
            let path = dir.join(report_file(mode));
            write_report_csv(&report, &path)?;
            bail!(
                "training ({mode}) diverged at step {step}; partial report retained at {}",
                path.display()
            );
        }
        Err(other) => Err(other.into()),
    }
}

pub fn cmd_train(config: &RunConfig) -> anyhow::Result<CommandOutput> {
    let inputs = load_run_inputs(config)?;
    let dir = run_dir(config);
    let mode = config.model.loss_mode;
    let (_, report) = train_one(config, mode, dir, &inputs.graph, &inputs.encoded)?;
    let mut out = CommandOutput::default();
    out.kv("loss_mode", mode);
    out.kv("steps", config.model.steps);
    out.kv("report_rows", report.rows.len());
    if let Some(last) = report.rows.last() {
        out.kv("final_loss", last.loss);
        out.kv("final_auc_roc", last.auc_roc);
        out.kv("final_auc_pr", last.auc_pr);
    }
    out.kv("checkpoint_file", dir.join(checkpoint_file(mode)).display());
    out.kv("report_file", dir.join(report_file(mode)).display());
    Ok(out)
}

pub fn cmd_extract(config: &RunConfig) -> anyhow::Result<CommandOutput> {
    let dir = run_dir(config);
    let mode = config.model.loss_mode;
    let ckpt_path = dir.join(checkpoint_file(mode));
    if !ckpt_path.is_file() {
        bail!(
            "{} not found; run the train command for this directory first",
            ckpt_path.display()
        );
    }
    let model = load_checkpoint(&ckpt_path)?;
    let inputs = load_run_inputs(config)?;
    let layer = config.effective_layer();
    let recovered = recover_graph(
        &model,
        &inputs.encoded,
        layer,
        config.extraction_mode(),
        &config.extract_options(),
    )?;
    let meta = ExtractMeta::new(layer, config.extraction_mode(), &config.extract_options());
    let path = dir.join(recovered_file(mode));
    save_recovered(&recovered, &meta, &path)?;
    let mut out = CommandOutput::default();
    out.kv("loss_mode", mode);
    out.kv("layer", layer);
    out.kv("recovered_pairs", recovered.len());
    out.kv("recovered_file", path.display());
    Ok(out)
}

fn push_score(out: &mut CommandOutput, prefix: &str, score: &RecoveryScore) {
    out.kv(format!("{prefix}.edge_precision"), score.edge_precision);
    out.kv(format!("{prefix}.edge_recall"), score.edge_recall);
    out.kv(format!("{prefix}.edge_f1"), score.edge_f1);
    out.kv(
        format!("{prefix}.relation_accuracy"),
        score.relation_accuracy,
    );
    out.kv(format!("{prefix}.true_edges"), score.true_edges);
    out.kv(format!("{prefix}.recovered_edges"), score.recovered_edges);
    out.kv(format!("{prefix}.intersection"), score.intersection);
}

fn write_kv_file(out: &CommandOutput, path: &Path) -> anyhow::Result<()> {
    fs::write(path, out.rendered()).with_context(|| format!("writing {}", path.display()))
}

/// The three recovered-graph files a run can hold, with the prefix
/// their scores carry in `evaluation.txt`.
fn recovered_slots() -> [(&'static str, String); 3] {
    [
        ("original", recovered_file(LossMode::Original)),
        ("modified", recovered_file(LossMode::Modified)),
        ("prior", RECOVERED_PRIOR_FILE.to_string()),
    ]
}

pub fn cmd_evaluate(config: &RunConfig) -> anyhow::Result<CommandOutput> {
    let dir = run_dir(config);
    let truth = load_kg(&dir.join(KG_FILE))?;
    let mut out = CommandOutput::default();
    for (prefix, file) in recovered_slots() {
        let path = dir.join(&file);
        if !path.is_file() {
            continue;
        }
        let (recovered, _) = load_recovered(&path)?;
        let score = score_recovery(&truth, &recovered, config.extract.match_floor);
        push_score(&mut out, prefix, &score);
    }
    if out.lines.is_empty() {
        bail!(
            "no recovered graphs in {}; run extract or roundtrip first",
            dir.display()
        );
    }
    write_kv_file(&out, &dir.join(EVALUATION_FILE))?;
    Ok(out)
}

fn summary_lines(out: &mut CommandOutput, summary: &ComparisonSummary) {
    out.kv("mean_loss_modified", summary.mean_loss_modified);
    out.kv("mean_loss_original", summary.mean_loss_original);
    out.kv("mean_loss_ratio", summary.mean_loss_ratio);
    out.kv("auc_roc_delta", summary.auc_roc_delta);
    out.kv("auc_pr_delta", summary.auc_pr_delta);
    out.kv("finding_loss_collapse", summary.finding_loss_collapse);
    out.kv("finding_auc_drop", summary.finding_auc_drop);
}

pub fn cmd_report(config: &RunConfig) -> anyhow::Result<CommandOutput> {
    let dir = run_dir(config);
    let hash = config.config_hash();
    let train_seed = config.gct_config(LossMode::Original).seed;
    let modified = read_report_csv(
        &dir.join(report_file(LossMode::Modified)),
        "modified",
        config.model.lambda,
        train_seed,
        &hash,
    )?;
    let original = read_report_csv(
        &dir.join(report_file(LossMode::Original)),
        "original",
        config.model.lambda,
        train_seed,
        &hash,
    )?;
    let summary = compare_runs(&modified, &original)?;
    write_comparison(&summary, &dir.join(COMPARISON_FILE))?;
    let mut out = CommandOutput::default();
    summary_lines(&mut out, &summary);
    Ok(out)
}

/// The whole experiment in one command: generate, train both loss
/// modes from the same initialization and batch schedule, recover
/// graphs from the configured layer and from the prior layer, score
/// them against the source graph, and compare the two runs.
pub fn cmd_roundtrip(config: &RunConfig) -> anyhow::Result<CommandOutput> {
    let dir = ensure_run_dir(config)?;
    let mut manifest = RunManifest::start(config);
    let result = roundtrip_pipeline(config, &dir, &mut manifest);
    if result.is_ok() {
        manifest.finish(&dir)?;
    }
    // Persisted on success and failure alike; a failed run's manifest
    // records the stage it died in.
    manifest.save(&dir)?;
    result
}

fn roundtrip_pipeline(
    config: &RunConfig,
    dir: &Path,
    manifest: &mut RunManifest,
) -> anyhow::Result<CommandOutput> {
    manifest.reach("generate");
    write_resolved_config(config, dir)?;
    manifest.record_artifact(CONFIG_FILE);
    let (graph, visits, _) = generate_artifacts(config, dir)?;
    manifest.record_artifact(KG_FILE);
    manifest.record_artifact(COHORT_FILE);
    manifest.record_artifact(TABLE_FILE);
    let (_, encoded) = encode_visits(config, &visits)?;

    manifest.reach("train-original");
    let (model_original, report_original) =
        train_one(config, LossMode::Original, dir, &graph, &encoded)?;
    manifest.record_artifact(&checkpoint_file(LossMode::Original));
    manifest.record_artifact(&report_file(LossMode::Original));

    manifest.reach("train-modified");
    let (model_modified, report_modified) =
        train_one(config, LossMode::Modified, dir, &graph, &encoded)?;
    manifest.record_artifact(&checkpoint_file(LossMode::Modified));
    manifest.record_artifact(&report_file(LossMode::Modified));

    manifest.reach("extract");
    let layer = config.effective_layer();
    let walk = config.extraction_mode();
    let options = config.extract_options();
    let meta = ExtractMeta::new(layer, walk, &options);
    let rec_original = recover_graph(&model_original, &encoded, layer, walk, &options)?;
    save_recovered(
        &rec_original,
        &meta,
        &dir.join(recovered_file(LossMode::Original)),
    )?;
    manifest.record_artifact(&recovered_file(LossMode::Original));
    let rec_modified = recover_graph(&model_modified, &encoded, layer, walk, &options)?;
    save_recovered(
        &rec_modified,
        &meta,
        &dir.join(recovered_file(LossMode::Modified)),
    )?;
    manifest.record_artifact(&recovered_file(LossMode::Modified));
    // The first block's attention is the fixed prior, identical for
    // both trained models, so either checkpoint yields the same file.
    let prior_meta = ExtractMeta::new(1, walk, &options);
    let rec_prior = recover_graph(&model_original, &encoded, 1, walk, &options)?;
    save_recovered(&rec_prior, &prior_meta, &dir.join(RECOVERED_PRIOR_FILE))?;
    manifest.record_artifact(RECOVERED_PRIOR_FILE);

    manifest.reach("evaluate");
    let floor = config.extract.match_floor;
    let score_original = score_recovery(&graph, &rec_original, floor);
    let score_modified = score_recovery(&graph, &rec_modified, floor);
    let score_prior = score_recovery(&graph, &rec_prior, floor);
    let mut eval_out = CommandOutput::default();
    push_score(&mut eval_out, "original", &score_original);
    push_score(&mut eval_out, "modified", &score_modified);
    push_score(&mut eval_out, "prior", &score_prior);
    write_kv_file(&eval_out, &dir.join(EVALUATION_FILE))?;
    manifest.record_artifact(EVALUATION_FILE);

    manifest.reach("compare");
    let summary = compare_runs(&report_modified, &report_original)?;
    write_comparison(&summary, &dir.join(COMPARISON_FILE))?;
    manifest.record_artifact(COMPARISON_FILE);

    let mut out = CommandOutput::default();
    out.kv("run_dir", dir.display());
    out.kv("config_hash", config.config_hash());
    out.kv("true_edges", score_original.true_edges);
    out.kv("original.edge_f1", score_original.edge_f1);
    out.kv("original.relation_accuracy", score_original.relation_accuracy);
    out.kv("modified.edge_f1", score_modified.edge_f1);
    out.kv("modified.relation_accuracy", score_modified.relation_accuracy);
    out.kv("prior.edge_recall", score_prior.edge_recall);
    out.kv("mean_loss_ratio", summary.mean_loss_ratio);
    out.kv("finding_loss_collapse", summary.finding_loss_collapse);
    out.kv("finding_auc_drop", summary.finding_auc_drop);
    Ok(out)
}
