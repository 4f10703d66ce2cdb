use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gclmo::config::PipelineConfig;
use gclmo::datagen::{generate_catalog, generate_logs, read_logs, write_logs, Catalog};
use gclmo::eval::{ablate, evaluate, standard_variants, ExposureStats, LongTailThreshold, PopularityBaseline, Variant};
use gclmo::graph::{build_neighbor_graph, NeighborGraph};
use gclmo::pipeline::{fit, run_pipeline, split_logs, Stage};
use gclmo::retrieval::{build_index, select_triggers, InvertedIndex};
use gclmo::{sha256_file, Error, ItemId, Model, Result};

#[derive(Parser)]
#[command(name = "gclmo", version, about = "Graph contrastive multi-objective item-to-item retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog and search logs.
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        days: Option<u32>,
        #[arg(long)]
        page_size: Option<usize>,
        #[arg(long)]
        skew: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        catalog_out: PathBuf,
        /// Write the trailing `datagen.eval_days` days here instead of `--out`.
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
    /// Build the co-click neighbor graph.
    BuildGraph {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        window_days: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train item embeddings and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics (JSON lines); defaults to `<out>.metrics.jsonl`.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Build the item-to-item inverted index.
    BuildIndex {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        topk: Option<usize>,
        /// Search the whole corpus instead of the item's category.
        #[arg(long)]
        unrestricted: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Look up similar items for a user history and query category.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        /// JSON lines of `{"item_id": .., "day": ..}`.
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        query_category: u32,
        #[arg(long, default_value_t = 100)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        max_triggers: usize,
    },
    /// Compute Recall@K, purchase Recall@K, P_good and P_l.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        eval_logs: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Exposure statistics; computed from `--train-logs` and written
        /// here when the file does not exist.
        #[arg(long)]
        exposure_stats: PathBuf,
        #[arg(long)]
        train_logs: Option<PathBuf>,
        /// Also evaluate the popularity baseline (needs `--train-logs`).
        #[arg(long)]
        baseline_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate configuration variants over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Lines of `name key=value ..`; defaults to the standard loss and
        /// contrastive ablations.
        #[arg(long)]
        variants: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run stages end to end inside an output directory.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated subset of datagen,graph,train,index,evaluate.
        #[arg(long, value_delimiter = ',')]
        stages: Vec<String>,
    },
}

fn resolve(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<PipelineConfig> {
    let mut overrides = Vec::new();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push((k.to_string(), v.clone()));
        }
    }
    PipelineConfig::resolve(args.config.as_deref(), std::env::vars(), &overrides)
}

fn flag<T: ToString>(key: &'static str, v: Option<T>) -> (&'static str, Option<String>) {
    (key, v.map(|x| x.to_string()))
}

fn load_graph(path: &Path, catalog: &Catalog) -> Result<NeighborGraph> {
    let mut graph = NeighborGraph::load(path)?;
    graph.register_catalog(catalog)?;
    Ok(graph)
}

#[derive(serde::Deserialize)]
struct HistoryEntry {
    item_id: ItemId,
    day: u32,
}

fn read_history(path: &Path) -> Result<Vec<(ItemId, u32)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let h: HistoryEntry = serde_json::from_str(&line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        out.push((h.item_id, h.day));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen {
            cfg,
            items,
            categories,
            queries,
            users,
            days,
            page_size,
            skew,
            seed,
            out,
            catalog_out,
            eval_out,
        } => {
            let c = resolve(
                &cfg,
                &[
                    flag("datagen.items", items),
                    flag("datagen.categories", categories),
                    flag("datagen.queries", queries),
                    flag("datagen.users", users),
                    flag("datagen.days", days),
                    flag("datagen.page_size", page_size),
                    flag("datagen.skew", skew),
                    flag("datagen.catalog_seed", seed),
                    flag("datagen.log_seed", seed),
                ],
            )?;
            let catalog = generate_catalog(&c.catalog)?;
            let logs = generate_logs(&catalog, &c.logs)?;
            catalog.save(&catalog_out)?;
            match eval_out {
                Some(eval_path) => {
                    let (train, eval) = split_logs(logs, c.last_train_day());
                    write_logs(&out, &train)?;
                    write_logs(&eval_path, &eval)?;
                }
                None => write_logs(&out, &logs)?,
            }
        }
        Command::BuildGraph {
            cfg,
            logs,
            window_days,
            out,
        } => {
            let c = resolve(&cfg, &[flag("graph.window_days", window_days)])?;
            let records = read_logs(&logs)?;
            let graph = build_neighbor_graph(&records, c.graph_window_days)?;
            graph.save(&out)?;
            eprintln!("graph: {} nodes, {} edges", graph.n_nodes(), graph.n_edges());
        }
        Command::Train {
            cfg,
            logs,
            graph,
            catalog,
            out,
            metrics_out,
        } => {
            let c = resolve(&cfg, &[])?;
            let catalog = Catalog::load(&catalog)?;
            let records = read_logs(&logs)?;
            let graph = load_graph(&graph, &catalog)?;
            let metrics_path = metrics_out.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.jsonl");
                p.into()
            });
            let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
            let mut w = BufWriter::new(file);
            let (model, _) = fit(&c, &catalog, &records, &graph, |m| {
                let line = serde_json::to_string(m).map_err(|e| Error::io(&metrics_path, e.into()))?;
                eprintln!("{line}");
                writeln!(w, "{line}")
                    .and_then(|_| w.flush())
                    .map_err(|e| Error::io(&metrics_path, e))
            })?;
            model.save(&out)?;
        }
        Command::BuildIndex {
            cfg,
            checkpoint,
            graph,
            catalog,
            topk,
            unrestricted,
            out,
        } => {
            let restricted = unrestricted.then_some(false);
            let c = resolve(
                &cfg,
                &[flag("index.topk", topk), flag("index.category_restricted", restricted)],
            )?;
            let catalog = Catalog::load(&catalog)?;
            let model = Model::load(&checkpoint)?;
            let graph = load_graph(&graph, &catalog)?;
            let index = build_index(&model, &graph, &catalog.category_map(), &c.index, sha256_file(&checkpoint)?)?;
            index.save(&out)?;
        }
        Command::Retrieve {
            index,
            history,
            catalog,
            query_category,
            size,
            max_triggers,
        } => {
            let index = InvertedIndex::load(&index)?;
            let catalog = Catalog::load(&catalog)?;
            let history = read_history(&history)?;
            let triggers = select_triggers(&history, query_category, max_triggers, |i| catalog.category_of(i))?;
            let result = index.lookup(&triggers, size)?;
            if result.skipped_triggers > 0 {
                eprintln!("{} trigger(s) missing from the index", result.skipped_triggers);
            }
            println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
        }
        Command::Evaluate {
            cfg,
            index,
            eval_logs,
            catalog,
            k,
            exposure_stats,
            train_logs,
            baseline_out,
            out,
        } => {
            let c = resolve(&cfg, &[flag("eval.k", k)])?;
            let catalog = Catalog::load(&catalog)?;
            let index = InvertedIndex::load(&index)?;
            let eval_records = read_logs(&eval_logs)?;
            let train_records = train_logs.as_deref().map(read_logs).transpose()?;
            let stats = if exposure_stats.is_file() {
                ExposureStats::load(&exposure_stats)?
            } else {
                let records = train_records.as_ref().ok_or_else(|| {
                    Error::config("exposure statistics file is missing; pass --train-logs to compute it")
                })?;
                let s = ExposureStats::from_logs(
                    records,
                    c.longtail_window_days,
                    LongTailThreshold::Percentile(c.longtail_percentile),
                )?;
                s.save(&exposure_stats)?;
                s
            };
            let k = c.resolved_eval_k();
            let report = evaluate(&index, &eval_records, &catalog, k, &stats)?;
            report.save(&out)?;
            if let Some(path) = baseline_out {
                let records = train_records
                    .as_ref()
                    .ok_or_else(|| Error::config("--baseline-out needs --train-logs"))?;
                let baseline = PopularityBaseline::from_logs(records, &catalog);
                evaluate(&baseline, &eval_records, &catalog, k, &stats)?.save(&path)?;
            }
            print!("{}", report.to_json());
        }
        Command::Ablate {
            cfg,
            variants,
            seeds,
            out,
        } => {
            let c = resolve(&cfg, &[])?;
            let variants = match variants {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    Variant::parse_list(&text, &path)?
                }
                None => standard_variants(),
            };
            let table = ablate(&c, &variants, seeds, |row| {
                eprintln!(
                    "{}\tseed {}\trecall@k {:.4}\tp_good {:.4}\tp_l {:.4}",
                    row.variant, row.seed, row.metrics.recall_at_k, row.metrics.p_good, row.metrics.p_l
                );
            })?;
            gclmo::write_atomic(&out, table.to_tsv().as_bytes())?;
        }
        Command::Pipeline { cfg, out_dir, stages } => {
            let c = resolve(&cfg, &[])?;
            let stages = if stages.is_empty() {
                Stage::ALL.to_vec()
            } else {
                stages.iter().map(|s| Stage::parse(s.trim())).collect::<Result<_>>()?
            };
            let manifest = run_pipeline(&c, &out_dir, &stages)?;
            for s in &manifest.stages {
                eprintln!("{}: {:.1}s", s.stage.name(), s.wall_seconds);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
