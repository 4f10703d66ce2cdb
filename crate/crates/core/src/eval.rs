//! Offline metrics: Recall@K, purchase Recall@K, P_good and P_l, the
//! popularity baseline, and seeded ablation tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{relevance_oracle, Catalog, SearchRecord};
use crate::error::{Error, Result};
use crate::retrieval::{RetrievalResult, Retriever};
use crate::{CategoryId, ItemId, QueryId};

/// One held-out search used for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: QueryId,
    pub category_id: CategoryId,
    pub day: u32,
    pub triggers: Vec<ItemId>,
    /// Clicked or purchased items, sorted and deduplicated.
    pub targets: Vec<ItemId>,
    /// Purchased items, sorted and deduplicated.
    pub purchase_targets: Vec<ItemId>,
    pub is_purchase_record: bool,
}

/// Records with at least one trigger and at least one click.
pub fn eval_records(logs: &[SearchRecord]) -> Vec<EvalRecord> {
    logs.iter()
        .filter_map(|r| {
            let targets: BTreeSet<ItemId> = r.clicked().chain(r.purchased()).collect();
            if r.trigger_items.is_empty() || targets.is_empty() {
                return None;
            }
            let purchase_targets: BTreeSet<ItemId> = r.purchased().collect();
            Some(EvalRecord {
                query_id: r.query_id,
                category_id: r.category_id,
                day: r.timestamp_day,
                triggers: r.trigger_items.clone(),
                targets: targets.into_iter().collect(),
                is_purchase_record: !purchase_targets.is_empty(),
                purchase_targets: purchase_targets.into_iter().collect(),
            })
        })
        .collect()
}

/// Share of `targets` found in `retrieved`.
pub fn recall_at_k(retrieved: &[ItemId], targets: &[ItemId]) -> Result<f64> {
    let targets: BTreeSet<ItemId> = targets.iter().copied().collect();
    if targets.is_empty() {
        return Err(Error::contract("recall needs at least one target"));
    }
    let retrieved: BTreeSet<ItemId> = retrieved.iter().copied().collect();
    Ok(targets.intersection(&retrieved).count() as f64 / targets.len() as f64)
}

/// Share of retrieved items the indicator marks relevant.
pub fn p_good(retrieved: &[ItemId], mut relevant: impl FnMut(ItemId) -> Result<bool>) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::contract("P_good needs a non-empty retrieval set"));
    }
    let mut hits = 0usize;
    for &i in retrieved {
        hits += relevant(i)? as usize;
    }
    Ok(hits as f64 / retrieved.len() as f64)
}

/// Share of retrieved items that are long-tail under `stats`.
pub fn p_longtail(retrieved: &[ItemId], stats: &ExposureStats) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::contract("P_l needs a non-empty retrieval set"));
    }
    let tail = retrieved.iter().filter(|&&i| stats.is_long_tail(i)).count();
    Ok(tail as f64 / retrieved.len() as f64)
}

/// Production long-tail definition: fewer than 100 daily exposures on
/// average over the last 30 days.
pub const PRODUCTION_LONGTAIL_WINDOW_DAYS: u32 = 30;
pub const PRODUCTION_LONGTAIL_THRESHOLD: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LongTailThreshold {
    /// Fixed average daily exposure count.
    Absolute(f64),
    /// Quantile of the realized per-item daily exposure averages among
    /// items exposed at least once in the window.
    Percentile(f64),
}

/// Average daily exposure per item over a trailing window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureStats {
    pub window_days: u32,
    /// Last day covered by the source logs.
    pub last_day: u32,
    pub rule: LongTailThreshold,
    /// Items averaging below this are long-tail.
    pub threshold: f64,
    pub production_window_days: u32,
    pub production_threshold: f64,
    pub daily_average: BTreeMap<ItemId, f64>,
}

impl ExposureStats {
    pub fn from_logs(logs: &[SearchRecord], window_days: u32, rule: LongTailThreshold) -> Result<Self> {
        if window_days < 1 {
            return Err(Error::config("long-tail window must be at least one day"));
        }
        let last_day = logs
            .iter()
            .map(|r| r.timestamp_day)
            .max()
            .ok_or_else(|| Error::contract("exposure statistics need at least one record"))?;
        let first_day = (last_day + 1).saturating_sub(window_days);
        let days = (last_day + 1 - first_day) as f64;
        let mut counts: BTreeMap<ItemId, u64> = BTreeMap::new();
        for r in logs.iter().filter(|r| r.timestamp_day >= first_day) {
            for e in &r.exposed {
                *counts.entry(e.item_id).or_default() += 1;
            }
        }
        let daily_average: BTreeMap<ItemId, f64> = counts.into_iter().map(|(i, c)| (i, c as f64 / days)).collect();
        let threshold = match rule {
            LongTailThreshold::Absolute(t) => t,
            LongTailThreshold::Percentile(q) => {
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::config("long-tail percentile must lie in [0, 1]"));
                }
                let mut values: Vec<f64> = daily_average.values().copied().collect();
                values.sort_by(f64::total_cmp);
                let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
                values[rank - 1]
            }
        };
        Ok(Self {
            window_days,
            last_day,
            rule,
            threshold,
            production_window_days: PRODUCTION_LONGTAIL_WINDOW_DAYS,
            production_threshold: PRODUCTION_LONGTAIL_THRESHOLD,
            daily_average,
        })
    }

    /// Unknown items count as never exposed.
    pub fn is_long_tail(&self, item: ItemId) -> bool {
        self.daily_average.get(&item).copied().unwrap_or(0.0) < self.threshold
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::io(path, e.into()))?;
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub recall_at_k: f64,
    pub recall_p_at_k: f64,
    pub p_good: f64,
    pub p_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub recall_p_at_k: f64,
    pub p_good: f64,
    pub p_l: f64,
    pub records: usize,
    pub purchase_records: usize,
    /// Records whose retrieval came back empty; they count as zero recall
    /// and are left out of P_good and P_l.
    pub empty_retrievals: usize,
    pub skipped_triggers: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<(u64, MetricValues)>,
}

impl MetricsReport {
    pub fn values(&self) -> MetricValues {
        MetricValues {
            recall_at_k: self.recall_at_k,
            recall_p_at_k: self.recall_p_at_k,
            p_good: self.p_good,
            p_l: self.p_l,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), self.to_json().as_bytes())
    }
}

struct RecordScore {
    recall: f64,
    recall_p: Option<f64>,
    good_and_tail: Option<(f64, f64)>,
    skipped_triggers: usize,
}

/// Evaluates `retriever` on `eval_logs`. Every eval record must come from a
/// day after the last day of the exposure statistics (the training range).
pub fn evaluate<R: Retriever + ?Sized>(
    retriever: &R,
    eval_logs: &[SearchRecord],
    catalog: &Catalog,
    k: usize,
    stats: &ExposureStats,
) -> Result<MetricsReport> {
    if k < 1 {
        return Err(Error::config("K must be at least 1"));
    }
    if let Some(r) = eval_logs.iter().find(|r| r.timestamp_day <= stats.last_day) {
        return Err(Error::contract(format!(
            "eval record from day {} is not after the training range ending on day {}",
            r.timestamp_day, stats.last_day
        )));
    }
    let records = eval_records(eval_logs);
    if records.is_empty() {
        return Err(Error::contract("no evaluable records (need triggers and clicks)"));
    }
    let scored: Vec<RecordScore> = records
        .par_iter()
        .map(|rec| {
            let result: RetrievalResult = retriever.retrieve(&rec.triggers, rec.category_id, k)?;
            let ids = result.item_ids();
            let recall = recall_at_k(&ids, &rec.targets)?;
            let recall_p = if rec.is_purchase_record {
                Some(recall_at_k(&ids, &rec.purchase_targets)?)
            } else {
                None
            };
            let good_and_tail = if ids.is_empty() {
                None
            } else {
                Some((
                    p_good(&ids, |i| relevance_oracle(i, rec.query_id, catalog))?,
                    p_longtail(&ids, stats)?,
                ))
            };
            Ok(RecordScore {
                recall,
                recall_p,
                good_and_tail,
                skipped_triggers: result.skipped_triggers,
            })
        })
        .collect::<Result<_>>()?;

    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    Ok(MetricsReport {
        k,
        recall_at_k: mean(&mut scored.iter().map(|s| s.recall)),
        recall_p_at_k: mean(&mut scored.iter().filter_map(|s| s.recall_p)),
        p_good: mean(&mut scored.iter().filter_map(|s| s.good_and_tail.map(|g| g.0))),
        p_l: mean(&mut scored.iter().filter_map(|s| s.good_and_tail.map(|g| g.1))),
        records: records.len(),
        purchase_records: records.iter().filter(|r| r.is_purchase_record).count(),
        empty_retrievals: scored.iter().filter(|s| s.good_and_tail.is_none()).count(),
        skipped_triggers: scored.iter().map(|s| s.skipped_triggers).sum(),
        per_seed: Vec::new(),
    })
}

/// Ranks every item of the query's category by its click count in the
/// training logs, ignoring the triggers.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityBaseline {
    ranked: BTreeMap<CategoryId, Vec<(ItemId, f64)>>,
}

impl PopularityBaseline {
    pub fn from_logs(logs: &[SearchRecord], catalog: &Catalog) -> Self {
        let mut clicks: BTreeMap<ItemId, u64> = BTreeMap::new();
        for r in logs {
            for i in r.clicked() {
                *clicks.entry(i).or_default() += 1;
            }
        }
        let ranked = (0..catalog.categories)
            .map(|c| {
                let mut items: Vec<(ItemId, f64)> = catalog
                    .items_in_category(c)
                    .iter()
                    .map(|&i| (i, clicks.get(&i).copied().unwrap_or(0) as f64))
                    .collect();
                items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                (c, items)
            })
            .collect();
        Self { ranked }
    }
}

impl Retriever for PopularityBaseline {
    fn retrieve(&self, triggers: &[ItemId], category: CategoryId, size: usize) -> Result<RetrievalResult> {
        if size < 1 {
            return Err(Error::config("result size must be at least 1"));
        }
        let items = self
            .ranked
            .get(&category)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .filter(|(i, _)| !triggers.contains(i))
            .take(size)
            .map(|&(item_id, score)| crate::retrieval::RetrievedItem {
                item_id,
                score,
                trigger: ItemId::MAX,
            })
            .collect();
        let mut triggers = triggers.to_vec();
        triggers.sort_unstable();
        triggers.dedup();
        Ok(RetrievalResult {
            query_id: None,
            triggers,
            items,
            skipped_triggers: 0,
        })
    }
}

/// A named set of configuration overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Parses `name key=value key=value ..` lines; `#` starts a comment.
    pub fn parse_list(text: &str, origin: &Path) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts.next().expect("non-empty line").to_string();
            let overrides = parts
                .map(|p| {
                    p.split_once('=')
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .ok_or_else(|| Error::parse(origin, idx + 1, format!("expected key=value, found {p:?}")))
                })
                .collect::<Result<_>>()?;
            out.push(Variant { name, overrides });
        }
        Ok(out)
    }
}

/// The loss and contrastive ablations.
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant::new("minus-relevance", &[("train.weight.relevance", "0")]),
        Variant::new("minus-exposure", &[("train.weight.exposure", "0")]),
        Variant::new("minus-click", &[("train.weight.click", "0")]),
        Variant::new("minus-purchase", &[("train.weight.purchase", "0")]),
        Variant::new("gl-mo", &[("train.contrastive", "false")]),
        Variant::new("ap-gcl-mo", &[("train.denominator", "full")]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Sample mean and standard deviation (n − 1 denominator).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn variants(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.variant) {
                seen.push(r.variant.clone());
            }
        }
        seen
    }

    pub fn metric(&self, variant: &str, pick: impl Fn(&MetricValues) -> f64) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.seed, pick(&r.metrics)))
            .collect()
    }

    /// One row per (variant, seed), then a `mean±stdev` row per variant.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tseed\trecall_at_k\trecall_p_at_k\tp_good\tp_l\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.variant, r.seed, m.recall_at_k, m.recall_p_at_k, m.p_good, m.p_l
            );
        }
        let picks: [fn(&MetricValues) -> f64; 4] = [|m| m.recall_at_k, |m| m.recall_p_at_k, |m| m.p_good, |m| m.p_l];
        for v in self.variants() {
            let _ = write!(out, "{v}\tmean±stdev");
            for pick in picks {
                let xs: Vec<f64> = self.metric(&v, pick).into_iter().map(|(_, x)| x).collect();
                let (m, s) = mean_stdev(&xs);
                let _ = write!(out, "\t{m:.6}±{s:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates the base configuration and each variant on
/// `n_seeds` seeds. The base row is always present.
pub fn ablate(
    base: &crate::config::PipelineConfig,
    variants: &[Variant],
    n_seeds: usize,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if n_seeds < 3 {
        return Err(Error::config("ablation needs at least 3 seeds"));
    }
    let mut rows = Vec::new();
    let mut all = vec![Variant::new("base", &[])];
    all.extend(variants.iter().cloned());
    for seed in 0..n_seeds as u64 {
        let seeded = base.with_seed(seed);
        let mut prepared = crate::pipeline::Prepared::cache();
        for v in &all {
            let mut cfg = seeded.clone();
            for (k, val) in &v.overrides {
                cfg.set(k, val)?;
            }
            cfg.validate()?;
            let data = prepared.get(&cfg)?;
            let outcome = data.run(&cfg)?;
            let row = AblationRow {
                variant: v.name.clone(),
                seed,
                metrics: outcome.metrics.values(),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { rows })
}
