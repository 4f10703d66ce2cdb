//! Training instances and the optimization loop.
//!
//! Each (trigger, page) pair becomes one instance whose candidates are the
//! page's impressions, `K` unexposed items of the same category and `L`
//! uniform random negatives. A step scores every candidate against the
//! trigger, runs the loss, and pushes the score gradients back through the
//! cosine and the aggregator.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Catalog, ExposedItem, SearchRecord};
use crate::error::{Error, Result};
use crate::graph::{sample_neighbors, GraphView, NeighborGraph, ObjectiveEdges};
use crate::loss::{
    contrastive_loss_with, multi_objective_loss, Denominator, LossReport, Objective, ObjectiveLabels,
    ObjectiveWeights, ScoredCandidates,
};
use crate::model::{score_with_grad, AggregationTrace, EmbeddingModel, Gradients};
use crate::rng::{rng_for, Rng};
use crate::scalar::Scalar;
use crate::{CategoryId, ItemId, QueryId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub trigger: ItemId,
    /// Index of the source record in the log slice.
    pub record: usize,
    pub query_id: QueryId,
    pub category_id: CategoryId,
    pub impressions: Vec<ExposedItem>,
    pub under_impressions: Vec<ItemId>,
    pub random_negatives: Vec<ItemId>,
    pub labels: ObjectiveLabels,
}

impl TrainingInstance {
    /// Impressions, then under-impressions, then random negatives.
    pub fn candidates(&self) -> Vec<ItemId> {
        self.impressions
            .iter()
            .map(|e| e.item_id)
            .chain(self.under_impressions.iter().copied())
            .chain(self.random_negatives.iter().copied())
            .collect()
    }

    pub fn n_candidates(&self) -> usize {
        self.impressions.len() + self.under_impressions.len() + self.random_negatives.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceSet {
    pub instances: Vec<TrainingInstance>,
    /// Instances that received fewer than `K` under-impressions or fewer
    /// than `L` random negatives because the pool ran out.
    pub shrunk: usize,
}

/// Builds one instance per objective edge. `relevant(item, query)` is the
/// relevance indicator; the Relevance label needs both the candidate and
/// the trigger to be relevant to the record's query.
pub fn build_instances<R>(
    logs: &[SearchRecord],
    edges: &ObjectiveEdges,
    catalog: &Catalog,
    relevant: R,
    under_impressions: usize,
    random_negatives: usize,
    seed: u64,
) -> Result<InstanceSet>
where
    R: Fn(ItemId, QueryId) -> Result<bool> + Sync,
{
    if under_impressions + random_negatives < 1 {
        return Err(Error::config("K + L must be at least 1"));
    }
    let built: Vec<(TrainingInstance, bool)> = edges
        .edges
        .par_iter()
        .enumerate()
        .map(|(pos, &(trigger, record_idx))| {
            let record = logs
                .get(record_idx)
                .ok_or_else(|| Error::contract(format!("objective edge points at missing record {record_idx}")))?;
            let mut rng = rng_for(seed, &[0x1A5, pos as u64]);
            build_one(record, record_idx, trigger, catalog, &relevant, under_impressions, random_negatives, &mut rng)
        })
        .collect::<Result<_>>()?;
    let shrunk = built.iter().filter(|(_, s)| *s).count();
    Ok(InstanceSet {
        instances: built.into_iter().map(|(i, _)| i).collect(),
        shrunk,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_one<R>(
    record: &SearchRecord,
    record_idx: usize,
    trigger: ItemId,
    catalog: &Catalog,
    relevant: &R,
    k: usize,
    l: usize,
    rng: &mut Rng,
) -> Result<(TrainingInstance, bool)>
where
    R: Fn(ItemId, QueryId) -> Result<bool>,
{
    if catalog.category_of(trigger)? != record.category_id {
        return Err(Error::contract(format!(
            "trigger {trigger} is outside the category of record {record_idx}"
        )));
    }
    let impressions: Vec<ExposedItem> = record.exposed.iter().filter(|e| e.item_id != trigger).cloned().collect();
    let mut taken: HashSet<ItemId> = impressions.iter().map(|e| e.item_id).collect();
    taken.insert(trigger);
    for e in &impressions {
        catalog.item(e.item_id)?;
    }

    let pool: Vec<ItemId> = catalog
        .items_in_category(record.category_id)
        .iter()
        .copied()
        .filter(|i| !taken.contains(i))
        .collect();
    let k_eff = k.min(pool.len());
    let under: Vec<ItemId> = index::sample(rng, pool.len(), k_eff).into_iter().map(|p| pool[p]).collect();
    taken.extend(under.iter().copied());

    let n_items = catalog.n_items();
    let l_eff = l.min(n_items.saturating_sub(taken.len()));
    let mut negatives = Vec::with_capacity(l_eff);
    while negatives.len() < l_eff {
        let cand = rng.random_range(0..n_items) as ItemId;
        if taken.insert(cand) {
            negatives.push(cand);
        }
    }

    let trigger_relevant = relevant(trigger, record.query_id)?;
    let all: Vec<ItemId> = impressions
        .iter()
        .map(|e| e.item_id)
        .chain(under.iter().copied())
        .chain(negatives.iter().copied())
        .collect();
    let relevance = all
        .iter()
        .map(|&c| Ok(trigger_relevant && relevant(c, record.query_id)?))
        .collect::<Result<Vec<bool>>>()?;
    let pad = |head: Vec<bool>| {
        let mut v = head;
        v.resize(all.len(), false);
        v
    };
    let labels = ObjectiveLabels::new(
        relevance,
        pad(vec![true; impressions.len()]),
        pad(impressions.iter().map(|e| e.clicked).collect()),
        pad(impressions.iter().map(|e| e.purchased).collect()),
    )?;
    let shrunk = k_eff < k || l_eff < l;
    Ok((
        TrainingInstance {
            trigger,
            record: record_idx,
            query_id: record.query_id,
            category_id: record.category_id,
            impressions,
            under_impressions: under,
            random_negatives: negatives,
            labels,
        },
        shrunk,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub weights: ObjectiveWeights,
    /// Neighbors sampled per item and view.
    pub fan_out: usize,
    pub p_drop: f64,
    pub p_edge: f64,
    /// Under-impressions per instance.
    pub under_impressions: usize,
    /// Random negatives per instance.
    pub random_negatives: usize,
    pub seed: u64,
    pub contrastive: bool,
    pub denominator: Denominator,
    pub momentum: f64,
    pub dim: usize,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            epochs: 5,
            tau: 0.07,
            weights: ObjectiveWeights::default(),
            fan_out: 10,
            p_drop: 0.2,
            p_edge: 0.2,
            under_impressions: 10,
            random_negatives: 10,
            seed: 1,
            contrastive: true,
            denominator: Denominator::ExcludeOtherPositives,
            momentum: 0.0,
            dim: 32,
            init_scale: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size < 1 || self.epochs < 1 || self.fan_out < 1 {
            return bad("batch_size, epochs and fan_out must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(0.0..1.0).contains(&self.p_drop) || !(0.0..1.0).contains(&self.p_edge) {
            return bad("p_drop and p_edge must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.under_impressions + self.random_negatives < 1 {
            return bad("K + L must be at least 1");
        }
        if self.weights.0.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("objective weights must be finite and non-negative");
        }
        if self.dim < 2 || !(self.init_scale >= 0.0) {
            return bad("dim must be at least 2 and init_scale non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveLosses {
    pub relevance: f64,
    pub exposure: f64,
    pub click: f64,
    pub purchase: f64,
}

impl ObjectiveLosses {
    fn from_array(a: [f64; 4]) -> Self {
        Self {
            relevance: a[0],
            exposure: a[1],
            click: a[2],
            purchase: a[3],
        }
    }
}

/// One line of the per-epoch metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean over instances.
    pub loss: ObjectiveLosses,
    pub total_loss: f64,
    pub instances: usize,
    /// Objective terms dropped because the instance had no negative for them.
    pub skipped_objectives: usize,
    pub wall_seconds: f64,
}

/// Loss and parameter gradient of one instance.
#[derive(Debug, Clone)]
pub struct InstanceOutcome<F> {
    pub report: LossReport<F>,
    pub grads: Gradients<F>,
    pub skipped_objectives: usize,
}

fn forward_in<F: Scalar>(
    model: &EmbeddingModel<F>,
    view: &GraphView<'_>,
    item: ItemId,
    categories: &[CategoryId],
    fan_out: usize,
    rng: &mut Rng,
) -> Result<AggregationTrace<F>> {
    let neighbors = sample_neighbors(view, item, fan_out, rng)?;
    model.forward(item, &neighbors, categories)
}

fn scores_of<F: Scalar>(
    trigger: &AggregationTrace<F>,
    others: &[AggregationTrace<F>],
    instance: &TrainingInstance,
    model: &EmbeddingModel<F>,
) -> Result<Vec<F>> {
    let scores: Vec<F> = others.iter().map(|t| crate::model::score(&trigger.output, &t.output)).collect();
    if let Some(pos) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite score for candidate {pos} of trigger {} (record {}); trigger vector finite: {}; model parameters finite: {}",
            instance.trigger,
            instance.record,
            trigger.output.iter().all(|v| v.is_finite()),
            model.is_finite()
        )));
    }
    Ok(scores)
}

/// Scores candidates against the trigger and returns the loss together with
/// the gradient of the weighted total with respect to every parameter.
/// `augmented` is the augmented view; `None` trains on the original view
/// only with the plain multi-objective loss.
pub fn instance_gradient<F: Scalar>(
    model: &EmbeddingModel<F>,
    original: &GraphView<'_>,
    augmented: Option<&GraphView<'_>>,
    categories: &[CategoryId],
    instance: &TrainingInstance,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<InstanceOutcome<F>> {
    let candidates = instance.candidates();
    let tau = model.tau();
    let k = config.fan_out;
    let trigger = forward_in(model, original, instance.trigger, categories, k, rng)?;
    let originals = candidates
        .iter()
        .map(|&c| forward_in(model, original, c, categories, k, rng))
        .collect::<Result<Vec<_>>>()?;

    // Traces that receive gradient, in the same order as the loss scores.
    let mut others: Vec<AggregationTrace<F>> = Vec::with_capacity(2 * candidates.len() + 1);
    let mut skipped = 0;
    let report = match augmented {
        Some(view) => {
            others.push(forward_in(model, view, instance.trigger, categories, k, rng)?);
            others.extend(originals);
            for &c in &candidates {
                others.push(forward_in(model, view, c, categories, k, rng)?);
            }
            let labels = instance.labels.extend_for_contrast();
            let mut weights = config.weights;
            if config.denominator == Denominator::ExcludeOtherPositives {
                for o in Objective::ALL {
                    let y = labels.get(o);
                    if weights.get(o) != 0.0 && y.iter().all(|&p| p) {
                        weights.set(o, 0.0);
                        skipped += 1;
                    }
                }
            }
            let scores = scores_of(&trigger, &others, instance, model)?;
            let n = candidates.len();
            let scored = ScoredCandidates::contrastive(scores[0], &scores[1..=n], &scores[n + 1..]);
            contrastive_loss_with(&scored, &labels, tau, &weights, config.denominator)?
        }
        None => {
            others = originals;
            let scores = scores_of(&trigger, &others, instance, model)?;
            multi_objective_loss(&scores, &instance.labels, tau, &config.weights)?
        }
    };

    let mut grads = Gradients::zeros(model.dim());
    let mut grad_trigger = vec![F::zero(); model.dim()];
    for (trace, &g) in others.iter().zip(&report.grad) {
        if g == F::zero() {
            continue;
        }
        let (_, gv, gu) = score_with_grad(&trigger.output, &trace.output);
        grad_trigger.iter_mut().zip(&gv).for_each(|(a, &b)| *a += g * b);
        let grad_out: Vec<F> = gu.iter().map(|&b| g * b).collect();
        model.backward(trace, &grad_out, categories, &mut grads)?;
    }
    model.backward(&trigger, &grad_trigger, categories, &mut grads)?;
    Ok(InstanceOutcome {
        report,
        grads,
        skipped_objectives: skipped,
    })
}

/// Per-step stream identifiers, so every random draw is a function of the
/// seed and the step coordinates alone.
const SHUFFLE_STREAM: u64 = 0x5F;
const VIEW_STREAM: u64 = 0xA06;
const INSTANCE_STREAM: u64 = 0x1E5;

/// Augmented view used by one batch: node drop, then edge perturbation.
pub fn batch_view<'g>(graph: &'g NeighborGraph, config: &TrainConfig, epoch: usize, batch: usize) -> Result<GraphView<'g>> {
    let mut rng = rng_for(config.seed, &[VIEW_STREAM, epoch as u64, batch as u64]);
    GraphView::identity(graph)
        .with_node_drop(config.p_drop, &mut rng)?
        .with_edge_perturb(config.p_edge, &mut rng)
}

/// Sum of instance gradients for one batch, reduced in batch order.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient<F: Scalar>(
    model: &EmbeddingModel<F>,
    graph: &NeighborGraph,
    augmented: Option<&GraphView<'_>>,
    categories: &[CategoryId],
    instances: &[TrainingInstance],
    batch: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<(Gradients<F>, Vec<InstanceOutcome<F>>)> {
    let original = GraphView::identity(graph);
    let outcomes: Vec<InstanceOutcome<F>> = batch
        .par_iter()
        .map(|&idx| {
            let mut rng = rng_for(config.seed, &[INSTANCE_STREAM, epoch as u64, idx as u64]);
            instance_gradient(model, &original, augmented, categories, &instances[idx], config, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros(model.dim());
    for o in &outcomes {
        total.accumulate(&o.grads);
    }
    Ok((total, outcomes))
}

fn numeric_failure<F: Scalar>(
    epoch: usize,
    batch: usize,
    instances: &[TrainingInstance],
    batch_idx: &[usize],
    outcomes: &[InstanceOutcome<F>],
    model: &EmbeddingModel<F>,
) -> Error {
    let culprit = outcomes
        .iter()
        .zip(batch_idx)
        .find(|(o, _)| !o.report.total.is_finite() || !o.grads.is_finite());
    let detail = match culprit {
        Some((o, &idx)) => {
            let inst = &instances[idx];
            format!(
                "instance {idx} (trigger {}, record {}): per-objective losses {:?}, total {:?}, score grads {:?}",
                inst.trigger,
                inst.record,
                o.report.per_objective.map(|v| v.as_f64()),
                o.report.total.as_f64(),
                o.report.grad.iter().map(|g| g.as_f64()).collect::<Vec<_>>()
            )
        }
        None => "aggregate gradient overflowed".to_string(),
    };
    Error::Numeric(format!(
        "non-finite value at epoch {epoch}, batch {batch}: {detail}; model parameters finite: {}",
        model.is_finite()
    ))
}

/// Runs `config.epochs` epochs of minibatch SGD. Each batch's update is
/// `learning_rate` times the mean instance gradient (with optional
/// momentum). `on_epoch` sees every epoch's metrics as they are produced.
pub fn train<F: Scalar>(
    model: &mut EmbeddingModel<F>,
    graph: &NeighborGraph,
    categories: &[CategoryId],
    instances: &[TrainingInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if model.dim() != config.dim {
        return Err(Error::config(format!(
            "model dimension {} differs from configured {}",
            model.dim(),
            config.dim
        )));
    }
    if instances.is_empty() {
        return Err(Error::config("no training instances"));
    }
    let lr = F::of(config.learning_rate);
    let mut velocity = (config.momentum > 0.0).then(|| Gradients::<F>::zeros(model.dim()));
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut sums = [0.0f64; 4];
        let mut total = 0.0;
        let mut skipped = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let view = if config.contrastive {
                Some(batch_view(graph, config, epoch, b)?)
            } else {
                None
            };
            let (mut grads, outcomes) =
                batch_gradient(model, graph, view.as_ref(), categories, instances, batch, config, epoch).map_err(
                    |e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                        other => other,
                    },
                )?;
            if outcomes.iter().any(|o| !o.report.total.is_finite()) || !grads.is_finite() {
                return Err(numeric_failure(epoch, b, instances, batch, &outcomes, model));
            }
            for o in &outcomes {
                for (s, v) in sums.iter_mut().zip(o.report.per_objective) {
                    *s += v.as_f64();
                }
                total += o.report.total.as_f64();
                skipped += o.skipped_objectives;
            }
            grads.scale(F::one() / F::of(batch.len() as f64));
            match velocity.as_mut() {
                Some(v) => {
                    v.scale(F::of(config.momentum));
                    v.accumulate(&grads);
                    model.apply_gradients(v, lr);
                }
                None => model.apply_gradients(&grads, lr),
            }
            if !model.is_finite() {
                return Err(numeric_failure(epoch, b, instances, batch, &outcomes, model));
            }
        }
        let n = instances.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            loss: ObjectiveLosses::from_array(sums.map(|s| s / n)),
            total_loss: total / n,
            instances: instances.len(),
            skipped_objectives: skipped,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics)?;
        history.push(metrics);
    }
    Ok(history)
}

pub fn checkpoint<F: Scalar>(model: &EmbeddingModel<F>, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn restore<F: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingModel<F>> {
    EmbeddingModel::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_catalog, relevance_oracle, CatalogConfig};
    use crate::graph::build_objective_edges;

    fn catalog() -> Catalog {
        generate_catalog(&CatalogConfig {
            n_items: 60,
            n_categories: 2,
            n_queries: 4,
            dim: 4,
            ..CatalogConfig::default()
        })
        .unwrap()
    }

    fn page(catalog: &Catalog, category: CategoryId, flags: &[(bool, bool)]) -> Vec<ExposedItem> {
        catalog
            .items_in_category(category)
            .iter()
            .skip(1)
            .zip(flags)
            .map(|(&item_id, &(clicked, purchased))| ExposedItem {
                item_id,
                clicked,
                purchased,
            })
            .collect()
    }

    fn record(catalog: &Catalog, flags: &[(bool, bool)]) -> SearchRecord {
        let category = 0;
        SearchRecord {
            user_id: 0,
            query_id: catalog.queries_in_category(category)[0],
            category_id: category,
            trigger_items: vec![catalog.items_in_category(category)[0]],
            exposed: page(catalog, category, flags),
            timestamp_day: 0,
        }
    }

    fn instances_for(logs: &[SearchRecord], catalog: &Catalog, k: usize, l: usize) -> InstanceSet {
        let edges = build_objective_edges(logs);
        build_instances(logs, &edges, catalog, |i, q| relevance_oracle(i, q, catalog), k, l, 3).unwrap()
    }

    #[test]
    fn labels_copy_page_flags() {
        let cat = catalog();
        let logs = vec![record(&cat, &[(true, false), (false, false), (false, false), (false, false)])];
        let set = instances_for(&logs, &cat, 2, 2);
        let inst = &set.instances[0];
        assert_eq!(inst.n_candidates(), 8);
        assert_eq!(inst.labels.positive_count(Objective::Click), 1);
        assert_eq!(inst.labels.positive_count(Objective::Purchase), 0);
        assert_eq!(inst.labels.get(Objective::Exposure), &[true, true, true, true, false, false, false, false]);
        assert!(inst.labels.is_nested());
        let ids = inst.candidates();
        let unique: HashSet<ItemId> = ids.iter().copied().collect();
        assert_eq!(unique.len(), ids.len());
        assert!(!unique.contains(&inst.trigger));
        assert!(inst
            .under_impressions
            .iter()
            .all(|&u| cat.category_of(u).unwrap() == inst.category_id));
    }

    #[test]
    fn irrelevant_trigger_zeroes_relevance() {
        let cat = catalog();
        let logs = vec![record(&cat, &[(true, true), (true, false), (false, false)])];
        let edges = build_objective_edges(&logs);
        let trigger = logs[0].trigger_items[0];
        let set = build_instances(&logs, &edges, &cat, |i, _| Ok(i != trigger), 3, 3, 0).unwrap();
        assert_eq!(set.instances[0].labels.positive_count(Objective::Relevance), 0);
        let set = build_instances(&logs, &edges, &cat, |_, _| Ok(true), 3, 3, 0).unwrap();
        assert_eq!(set.instances[0].labels.positive_count(Objective::Relevance), 9);
    }

    #[test]
    fn small_category_shrinks_k() {
        let cat = catalog();
        let logs = vec![record(&cat, &[(false, false); 4])];
        let set = instances_for(&logs, &cat, 1000, 1);
        assert_eq!(set.shrunk, 1);
        let inst = &set.instances[0];
        assert_eq!(inst.under_impressions.len(), cat.items_in_category(0).len() - 5);
        let edges = build_objective_edges(&logs);
        assert!(build_instances(&logs, &edges, &cat, |_, _| Ok(false), 0, 0, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            p_drop: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
