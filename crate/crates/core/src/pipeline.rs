//! Stage wiring: `datagen → graph → train → index → evaluate`, in memory or
//! through files in an output directory with a run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::datagen::{generate_catalog, generate_logs, read_logs, relevance_oracle, write_logs, Catalog, SearchRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ExposureStats, LongTailThreshold, MetricsReport, PopularityBaseline};
use crate::graph::{build_neighbor_graph, build_objective_edges, NeighborGraph};
use crate::retrieval::{build_index, InvertedIndex};
use crate::train::{train, EpochMetrics, InstanceSet};
use crate::{sha256_file, sha256_hex, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Datagen,
    Graph,
    Train,
    Index,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Datagen, Stage::Graph, Stage::Train, Stage::Index, Stage::Evaluate];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Datagen => "datagen",
            Stage::Graph => "graph",
            Stage::Train => "train",
            Stage::Index => "index",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`; valid stages: datagen, graph, train, index, evaluate")))
    }
}

/// File names inside a pipeline output directory.
pub mod files {
    pub const CATALOG: &str = "catalog.json";
    pub const TRAIN_LOGS: &str = "train_logs.jsonl";
    pub const EVAL_LOGS: &str = "eval_logs.jsonl";
    pub const GRAPH: &str = "graph.tsv";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const TRAIN_METRICS: &str = "train_metrics.jsonl";
    pub const INDEX: &str = "index.tsv";
    pub const EXPOSURE: &str = "exposure.json";
    pub const METRICS: &str = "metrics.json";
    pub const BASELINE_METRICS: &str = "baseline_metrics.json";
    pub const MANIFEST: &str = "manifest.json";
}

/// Catalog plus logs split into training days and held-out days.
pub fn generate_data(cfg: &PipelineConfig) -> Result<(Catalog, Vec<SearchRecord>, Vec<SearchRecord>)> {
    let catalog = generate_catalog(&cfg.catalog)?;
    let logs = generate_logs(&catalog, &cfg.logs)?;
    let (train, eval) = split_logs(logs, cfg.last_train_day());
    Ok((catalog, train, eval))
}

/// Records up to and including `last_train_day`, then the rest.
pub fn split_logs(logs: Vec<SearchRecord>, last_train_day: u32) -> (Vec<SearchRecord>, Vec<SearchRecord>) {
    logs.into_iter().partition(|r| r.timestamp_day <= last_train_day)
}

/// Training instances built from `logs` with the configured K, L and seed.
pub fn instances_for(cfg: &PipelineConfig, catalog: &Catalog, logs: &[SearchRecord]) -> Result<InstanceSet> {
    let edges = build_objective_edges(logs);
    crate::train::build_instances(
        logs,
        &edges,
        catalog,
        |i, q| relevance_oracle(i, q, catalog),
        cfg.train.under_impressions,
        cfg.train.random_negatives,
        cfg.train.seed,
    )
}

/// Initializes and trains a model. `graph` must know every catalog item.
pub fn fit(
    cfg: &PipelineConfig,
    catalog: &Catalog,
    train_logs: &[SearchRecord],
    graph: &NeighborGraph,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(Model, Vec<EpochMetrics>)> {
    let set = instances_for(cfg, catalog, train_logs)?;
    let t = &cfg.train;
    let mut model = Model::init(
        catalog.n_items(),
        catalog.categories as usize,
        t.dim,
        t.tau,
        t.init_scale,
        t.seed,
    )?;
    let history = train(&mut model, graph, &catalog.category_map(), &set.instances, t, on_epoch)?;
    Ok((model, history))
}

pub fn exposure_stats(cfg: &PipelineConfig, train_logs: &[SearchRecord]) -> Result<ExposureStats> {
    ExposureStats::from_logs(
        train_logs,
        cfg.longtail_window_days,
        LongTailThreshold::Percentile(cfg.longtail_percentile),
    )
}

fn graph_with_catalog(mut graph: NeighborGraph, catalog: &Catalog) -> Result<NeighborGraph> {
    graph.register_catalog(catalog)?;
    Ok(graph)
}

/// Everything a training run needs that does not depend on training
/// settings; shared across ablation variants of one seed.
pub struct Prepared {
    key: String,
    pub catalog: Catalog,
    pub train_logs: Vec<SearchRecord>,
    pub eval_logs: Vec<SearchRecord>,
    pub graph: NeighborGraph,
    pub stats: ExposureStats,
    pub baseline: PopularityBaseline,
}

/// Result of one in-memory train → index → evaluate run.
pub struct ExperimentOutcome {
    pub metrics: MetricsReport,
    pub baseline: MetricsReport,
    pub history: Vec<EpochMetrics>,
    pub model: Model,
    pub index: InvertedIndex,
}

fn data_key(cfg: &PipelineConfig) -> String {
    cfg.snapshot()
        .into_iter()
        .filter(|(k, _)| k.starts_with("datagen.") || k.starts_with("graph.") || k.starts_with("eval."))
        .map(|(k, v)| format!("{k}={v};"))
        .collect()
}

impl Prepared {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let (catalog, train_logs, eval_logs) = generate_data(cfg)?;
        let graph = graph_with_catalog(build_neighbor_graph(&train_logs, cfg.graph_window_days)?, &catalog)?;
        let stats = exposure_stats(cfg, &train_logs)?;
        let baseline = PopularityBaseline::from_logs(&train_logs, &catalog);
        Ok(Self {
            key: data_key(cfg),
            catalog,
            train_logs,
            eval_logs,
            graph,
            stats,
            baseline,
        })
    }

    pub fn cache() -> PreparedCache {
        PreparedCache { entries: Vec::new() }
    }

    /// Trains, indexes and evaluates with `cfg`'s training settings.
    pub fn run(&self, cfg: &PipelineConfig) -> Result<ExperimentOutcome> {
        let (model, history) = fit(cfg, &self.catalog, &self.train_logs, &self.graph, |_| Ok(()))?;
        let sha = sha256_hex(model.to_checkpoint_string().as_bytes());
        let index = build_index(&model, &self.graph, &self.catalog.category_map(), &cfg.index, sha)?;
        let k = cfg.resolved_eval_k();
        let metrics = evaluate(&index, &self.eval_logs, &self.catalog, k, &self.stats)?;
        let baseline = evaluate(&self.baseline, &self.eval_logs, &self.catalog, k, &self.stats)?;
        Ok(ExperimentOutcome {
            metrics,
            baseline,
            history,
            model,
            index,
        })
    }
}

/// Reuses prepared data for configurations that differ only in training,
/// index or retrieval settings.
pub struct PreparedCache {
    entries: Vec<Prepared>,
}

impl PreparedCache {
    pub fn get(&mut self, cfg: &PipelineConfig) -> Result<&Prepared> {
        let key = data_key(cfg);
        let pos = match self.entries.iter().position(|p| p.key == key) {
            Some(pos) => pos,
            None => {
                self.entries.push(Prepared::new(cfg)?);
                self.entries.len() - 1
            }
        };
        Ok(&self.entries[pos])
    }
}

/// The whole pipeline in memory.
pub fn run_experiment(cfg: &PipelineConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    Prepared::new(cfg)?.run(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub wall_seconds: f64,
}

/// Reproducibility record of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every file a stage read.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file a stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    /// `complete`, `running`, or `failed: <reason>`.
    pub status: String,
}

impl RunManifest {
    fn new(cfg: &PipelineConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.snapshot(),
            seeds: cfg.seeds(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stages: Vec::new(),
            status: "running".into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(path, e.into()))?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "required input file is missing"),
            ));
        }
        self.manifest.inputs.insert(name.to_string(), sha256_file(&path)?);
        Ok(path)
    }

    fn output(&mut self, name: &str) -> Result<()> {
        let hash = sha256_file(self.path(name))?;
        self.manifest.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    fn load_graph(&mut self, catalog: &Catalog) -> Result<NeighborGraph> {
        let path = self.input(files::GRAPH)?;
        graph_with_catalog(NeighborGraph::load(path)?, catalog)
    }

    fn stage(&mut self, stage: Stage) -> Result<()> {
        let cfg = self.cfg;
        match stage {
            Stage::Datagen => {
                let (catalog, train_logs, eval_logs) = generate_data(cfg)?;
                catalog.save(self.path(files::CATALOG))?;
                write_logs(self.path(files::TRAIN_LOGS), &train_logs)?;
                write_logs(self.path(files::EVAL_LOGS), &eval_logs)?;
                for f in [files::CATALOG, files::TRAIN_LOGS, files::EVAL_LOGS] {
                    self.output(f)?;
                }
            }
            Stage::Graph => {
                let logs = read_logs(self.input(files::TRAIN_LOGS)?)?;
                build_neighbor_graph(&logs, cfg.graph_window_days)?.save(self.path(files::GRAPH))?;
                self.output(files::GRAPH)?;
            }
            Stage::Train => {
                let catalog = Catalog::load(self.input(files::CATALOG)?)?;
                let logs = read_logs(self.input(files::TRAIN_LOGS)?)?;
                let graph = self.load_graph(&catalog)?;
                let metrics_path = self.path(files::TRAIN_METRICS);
                let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
                let mut out = BufWriter::new(file);
                let (model, _) = fit(cfg, &catalog, &logs, &graph, |m| {
                    let line = serde_json::to_string(m).map_err(|e| Error::io(&metrics_path, e.into()))?;
                    writeln!(out, "{line}")
                        .and_then(|_| out.flush())
                        .map_err(|e| Error::io(&metrics_path, e))
                })?;
                model.save(self.path(files::CHECKPOINT))?;
                self.output(files::CHECKPOINT)?;
            }
            Stage::Index => {
                let catalog = Catalog::load(self.input(files::CATALOG)?)?;
                let ckpt = self.input(files::CHECKPOINT)?;
                let model = Model::load(&ckpt)?;
                let graph = self.load_graph(&catalog)?;
                let index = build_index(&model, &graph, &catalog.category_map(), &cfg.index, sha256_file(&ckpt)?)?;
                index.save(self.path(files::INDEX))?;
                self.output(files::INDEX)?;
            }
            Stage::Evaluate => {
                let catalog = Catalog::load(self.input(files::CATALOG)?)?;
                let train_logs = read_logs(self.input(files::TRAIN_LOGS)?)?;
                let eval_logs = read_logs(self.input(files::EVAL_LOGS)?)?;
                let index = InvertedIndex::load(self.input(files::INDEX)?)?;
                let stats = exposure_stats(cfg, &train_logs)?;
                stats.save(self.path(files::EXPOSURE))?;
                let k = cfg.resolved_eval_k();
                evaluate(&index, &eval_logs, &catalog, k, &stats)?.save(self.path(files::METRICS))?;
                let baseline = PopularityBaseline::from_logs(&train_logs, &catalog);
                evaluate(&baseline, &eval_logs, &catalog, k, &stats)?.save(self.path(files::BASELINE_METRICS))?;
                for f in [files::EXPOSURE, files::METRICS, files::BASELINE_METRICS] {
                    self.output(f)?;
                }
            }
        }
        Ok(())
    }
}

/// Runs `stages` in dependency order inside `dir`. Stages not requested
/// read their inputs from files a previous run left there. The manifest is
/// rewritten after every stage and on failure.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path, stages: &[Stage]) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut run = Run {
        cfg,
        dir,
        manifest: RunManifest::new(cfg),
    };
    let manifest_path = dir.join(files::MANIFEST);
    for stage in ordered {
        let started = Instant::now();
        if let Err(e) = run.stage(stage) {
            run.manifest.status = format!("failed: {} stage: {e}", stage.name());
            run.manifest.save(&manifest_path)?;
            return Err(e);
        }
        run.manifest.stages.push(StageRecord {
            stage,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        run.manifest.save(&manifest_path)?;
    }
    run.manifest.status = "complete".into();
    run.manifest.save(&manifest_path)?;
    Ok(run.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert!(Stage::parse("deploy").is_err());
    }

    #[test]
    fn split_is_by_day() {
        let cfg = PipelineConfig::default();
        let rec = |day| SearchRecord {
            user_id: 0,
            query_id: 0,
            category_id: 0,
            trigger_items: vec![],
            exposed: vec![],
            timestamp_day: day,
        };
        let (train, eval) = split_logs(vec![rec(0), rec(13), rec(14)], cfg.last_train_day());
        assert_eq!(train.len(), 2);
        assert_eq!(eval.len(), 1);
    }

    #[test]
    fn data_key_ignores_training_settings() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.train.learning_rate = 1.0;
        assert_eq!(data_key(&a), data_key(&b));
        b.logs.n_users = 3;
        assert_ne!(data_key(&a), data_key(&b));
    }
}
