//! Offline item-to-item index and the trigger → similar-items lookup.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sample_neighbors, GraphView, NeighborGraph};
use crate::model::{score, EmbeddingModel};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::{CategoryId, ItemId, QueryId};

/// Items of `category` from `history`, most recent first, deduplicated and
/// truncated. Later entries win ties on the same day.
pub fn select_triggers<C>(
    history: &[(ItemId, u32)],
    category: CategoryId,
    max_triggers: usize,
    mut category_of: C,
) -> Result<Vec<ItemId>>
where
    C: FnMut(ItemId) -> Result<CategoryId>,
{
    if max_triggers < 1 {
        return Err(Error::config("max_triggers must be at least 1"));
    }
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[b].1.cmp(&history[a].1).then(b.cmp(&a)));
    let mut out = Vec::with_capacity(max_triggers);
    for pos in order {
        let item = history[pos].0;
        if out.contains(&item) || category_of(item)? != category {
            continue;
        }
        out.push(item);
        if out.len() == max_triggers {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    /// Hex SHA-256 of the checkpoint text the vectors came from.
    pub checkpoint_sha256: String,
    pub top_k: usize,
    pub category_restricted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub top_k: usize,
    pub category_restricted: bool,
    /// Neighbors sampled per item when computing its served vector.
    pub fan_out: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            top_k: 100,
            category_restricted: true,
            fan_out: 10,
            seed: 0,
        }
    }
}

/// Per-item list of `(neighbor, score)`, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub meta: IndexMeta,
    lists: Vec<Vec<(ItemId, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub item_id: ItemId,
    pub score: f64,
    /// Trigger whose list supplied the best score.
    pub trigger: ItemId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: Option<QueryId>,
    pub triggers: Vec<ItemId>,
    pub items: Vec<RetrievedItem>,
    /// Triggers missing from the index.
    pub skipped_triggers: usize,
}

impl RetrievalResult {
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|r| r.item_id).collect()
    }
}

/// Anything that maps a trigger set to a ranked item list.
pub trait Retriever: Sync {
    fn retrieve(&self, triggers: &[ItemId], category: CategoryId, size: usize) -> Result<RetrievalResult>;
}

fn by_score_then_id(a: &(ItemId, f64), b: &(ItemId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Output vectors for every item over the base graph, one sampled
/// neighborhood per item.
pub fn item_vectors<F: Scalar>(
    model: &EmbeddingModel<F>,
    graph: &NeighborGraph,
    categories: &[CategoryId],
    fan_out: usize,
    seed: u64,
) -> Result<Vec<Vec<F>>> {
    let view = GraphView::identity(graph);
    (0..model.n_items() as ItemId)
        .into_par_iter()
        .map(|item| {
            let neighbors = if fan_out > 0 && graph.contains(item) {
                let mut rng = rng_for(seed, &[0x1DE, item as u64]);
                sample_neighbors(&view, item, fan_out, &mut rng)?
            } else {
                Vec::new()
            };
            Ok(model.aggregate(item, &neighbors, categories)?.values)
        })
        .collect()
}

/// Exact top-K by cosine score over the candidate scope of each item.
pub fn top_k_from_vectors<F: Scalar>(
    vectors: &[Vec<F>],
    categories: &[CategoryId],
    top_k: usize,
    category_restricted: bool,
) -> Result<Vec<Vec<(ItemId, f64)>>> {
    if top_k < 1 {
        return Err(Error::config("topK must be at least 1"));
    }
    if categories.len() < vectors.len() {
        return Err(Error::contract("category map is shorter than the vector table"));
    }
    let mut by_category: BTreeMap<CategoryId, Vec<ItemId>> = BTreeMap::new();
    for item in 0..vectors.len() {
        by_category.entry(categories[item]).or_default().push(item as ItemId);
    }
    let everyone: Vec<ItemId> = (0..vectors.len() as ItemId).collect();
    Ok((0..vectors.len())
        .into_par_iter()
        .map(|src| {
            let scope = if category_restricted {
                &by_category[&categories[src]]
            } else {
                &everyone
            };
            let mut scored: Vec<(ItemId, f64)> = scope
                .iter()
                .filter(|&&j| j as usize != src)
                .map(|&j| (j, score(&vectors[src], &vectors[j as usize]).as_f64()))
                .collect();
            if scored.len() > top_k {
                scored.select_nth_unstable_by(top_k - 1, by_score_then_id);
                scored.truncate(top_k);
            }
            scored.sort_by(by_score_then_id);
            scored
        })
        .collect())
}

/// Builds the index from a trained model. Vectors are aggregated over the
/// unaugmented graph.
pub fn build_index<F: Scalar>(
    model: &EmbeddingModel<F>,
    graph: &NeighborGraph,
    categories: &[CategoryId],
    config: &IndexConfig,
    checkpoint_sha256: impl Into<String>,
) -> Result<InvertedIndex> {
    let vectors = item_vectors(model, graph, categories, config.fan_out, config.seed)?;
    let lists = top_k_from_vectors(&vectors, categories, config.top_k, config.category_restricted)?;
    Ok(InvertedIndex {
        meta: IndexMeta {
            checkpoint_sha256: checkpoint_sha256.into(),
            top_k: config.top_k,
            category_restricted: config.category_restricted,
        },
        lists,
    })
}

impl InvertedIndex {
    pub fn from_lists(meta: IndexMeta, lists: Vec<Vec<(ItemId, f64)>>) -> Self {
        Self { meta, lists }
    }

    pub fn n_items(&self) -> usize {
        self.lists.len()
    }

    pub fn list(&self, item: ItemId) -> Option<&[(ItemId, f64)]> {
        self.lists.get(item as usize).map(Vec::as_slice)
    }

    pub fn lists(&self) -> &[Vec<(ItemId, f64)>] {
        &self.lists
    }

    /// Union of the triggers' lists with per-item max score, triggers
    /// removed, ranked by score then id.
    pub fn lookup(&self, triggers: &[ItemId], size: usize) -> Result<RetrievalResult> {
        if size < 1 {
            return Err(Error::config("result size must be at least 1"));
        }
        let mut unique: Vec<ItemId> = triggers.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let mut best: BTreeMap<ItemId, (f64, ItemId)> = BTreeMap::new();
        let mut skipped = 0;
        for &t in &unique {
            let Some(list) = self.list(t) else {
                skipped += 1;
                continue;
            };
            for &(item, s) in list {
                if unique.binary_search(&item).is_ok() {
                    continue;
                }
                match best.get(&item) {
                    Some(&(prev, _)) if prev >= s => {}
                    _ => {
                        best.insert(item, (s, t));
                    }
                }
            }
        }
        let mut items: Vec<RetrievedItem> = best
            .into_iter()
            .map(|(item_id, (score, trigger))| RetrievedItem {
                item_id,
                score,
                trigger,
            })
            .collect();
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
        items.truncate(size);
        Ok(RetrievalResult {
            query_id: None,
            triggers: unique,
            items,
            skipped_triggers: skipped,
        })
    }

    /// Text form: a `#` metadata line, then `item<TAB>n:score,n:score,..`
    /// with six-decimal scores.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#checkpoint_sha256={}\ttopk={}\tcategory_restricted={}\n",
            self.meta.checkpoint_sha256, self.meta.top_k, self.meta.category_restricted
        );
        for (item, list) in self.lists.iter().enumerate() {
            let _ = write!(out, "{item}\t");
            for (pos, (n, s)) in list.iter().enumerate() {
                if pos > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{n}:{s:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| Error::parse(path, line, msg.to_string());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty index file"))?;
        let header = header.strip_prefix('#').ok_or_else(|| bad(1, "missing metadata line"))?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for field in header.split('\t') {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(1, "malformed metadata field"))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(1, &format!("missing metadata `{k}`")));
        let meta = IndexMeta {
            checkpoint_sha256: get("checkpoint_sha256")?.to_string(),
            top_k: get("topk")?.parse().map_err(|_| bad(1, "bad topk"))?,
            category_restricted: get("category_restricted")?
                .parse()
                .map_err(|_| bad(1, "bad category_restricted"))?,
        };
        let mut lists = Vec::new();
        for (idx, line) in lines {
            let n = idx + 1;
            let (item, rest) = line.split_once('\t').ok_or_else(|| bad(n, "expected item<TAB>list"))?;
            let item: usize = item.parse().map_err(|_| bad(n, "bad item id"))?;
            if item != lists.len() {
                return Err(bad(n, "item rows must be dense and ascending"));
            }
            let mut list = Vec::new();
            for entry in rest.split(',').filter(|e| !e.is_empty()) {
                let (nb, s) = entry.split_once(':').ok_or_else(|| bad(n, "expected neighbor:score"))?;
                let nb: ItemId = nb.parse().map_err(|_| bad(n, "bad neighbor id"))?;
                let s: f64 = s.parse().map_err(|_| bad(n, "bad score"))?;
                list.push((nb, s));
            }
            if list.len() > meta.top_k {
                return Err(bad(n, "list longer than topk"));
            }
            lists.push(list);
        }
        Ok(Self { meta, lists })
    }
}

impl Retriever for InvertedIndex {
    fn retrieve(&self, triggers: &[ItemId], _category: CategoryId, size: usize) -> Result<RetrievalResult> {
        self.lookup(triggers, size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmbeddingModel;
    use proptest::prelude::*;

    fn same_category(_: ItemId) -> Result<CategoryId> {
        Ok(0)
    }

    #[test]
    fn triggers_filter_by_category() {
        let cat = |i: ItemId| Ok(if i < 10 { 1 } else { 2 });
        assert!(select_triggers(&[(1, 0), (2, 1)], 2, 3, cat).unwrap().is_empty());
    }

    #[test]
    fn triggers_keep_most_recent() {
        let t = select_triggers(&[(1, 0), (2, 3), (3, 5)], 0, 2, same_category).unwrap();
        assert_eq!(t, vec![3, 2]);
    }

    #[test]
    fn duplicate_trigger_keeps_latest_position() {
        let t = select_triggers(&[(7, 5), (1, 2), (2, 3), (7, 1)], 0, 5, same_category).unwrap();
        assert_eq!(t, vec![7, 2, 1]);
        assert!(select_triggers(&[], 0, 0, same_category).is_err());
    }

    fn index_of(lists: Vec<Vec<(ItemId, f64)>>) -> InvertedIndex {
        InvertedIndex::from_lists(
            IndexMeta {
                checkpoint_sha256: String::new(),
                top_k: 10,
                category_restricted: true,
            },
            lists,
        )
    }

    #[test]
    fn two_item_catalog() {
        let model = EmbeddingModel::<f64>::init(2, 1, 4, 0.1, 0.05, 1).unwrap();
        let graph = NeighborGraph::with_nodes(2);
        let config = IndexConfig {
            top_k: 5,
            ..IndexConfig::default()
        };
        let idx = build_index(&model, &graph, &[0, 0], &config, "").unwrap();
        assert_eq!(idx.list(0).unwrap().len(), 1);
        assert_eq!(idx.list(0).unwrap()[0].0, 1);
        assert_eq!(idx.list(1).unwrap()[0].0, 0);
    }

    #[test]
    fn identical_vectors_tie_break_on_id() {
        let vectors = vec![vec![1.0f64, 2.0]; 5];
        let lists = top_k_from_vectors(&vectors, &[0; 5], 3, true).unwrap();
        let ids: Vec<ItemId> = lists[2].iter().map(|&(j, _)| j).collect();
        assert_eq!(ids, vec![0, 1, 3]);
        assert!(lists[2].iter().all(|&(_, s)| (s - 1.0).abs() < 1e-12 && s == lists[2][0].1));
    }

    #[test]
    fn restricted_lists_stay_in_category() {
        let vectors: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64]).collect();
        let cats = [0, 1, 0, 1, 0, 1];
        let lists = top_k_from_vectors(&vectors, &cats, 10, true).unwrap();
        for (src, list) in lists.iter().enumerate() {
            assert_eq!(list.len(), 2);
            assert!(list.iter().all(|&(j, _)| cats[j as usize] == cats[src]));
        }
        let open = top_k_from_vectors(&vectors, &cats, 10, false).unwrap();
        assert!(open.iter().all(|l| l.len() == 5));
    }

    #[test]
    fn single_trigger_truncates() {
        let idx = index_of(vec![vec![(1, 0.9), (2, 0.5), (3, 0.1)], vec![], vec![], vec![]]);
        assert_eq!(idx.lookup(&[0], 2).unwrap().item_ids(), vec![1, 2]);
    }

    #[test]
    fn disjoint_lists_are_merged_by_score() {
        let idx = index_of(vec![vec![(2, 0.9), (3, 0.4)], vec![(4, 0.8), (5, 0.2)], vec![], vec![], vec![], vec![]]);
        assert_eq!(idx.lookup(&[0, 1], 10).unwrap().item_ids(), vec![2, 4, 3, 5]);
    }

    #[test]
    fn shared_item_keeps_max_score() {
        let idx = index_of(vec![vec![(9, 0.9)], vec![(9, 0.7)]]);
        let r = idx.lookup(&[1, 0], 5).unwrap();
        assert_eq!(r.items.len(), 1);
        assert_eq!(r.items[0].score, 0.9);
        assert_eq!(r.items[0].trigger, 0);
    }

    #[test]
    fn triggers_are_excluded_and_unknown_ones_counted() {
        let idx = index_of(vec![vec![(1, 0.9), (2, 0.8)], vec![(0, 0.9)]]);
        let r = idx.lookup(&[0, 1, 42], 5).unwrap();
        assert_eq!(r.item_ids(), vec![2]);
        assert_eq!(r.skipped_triggers, 1);
    }

    #[test]
    fn text_round_trip() {
        let idx = index_of(vec![vec![(1, 0.5), (2, -0.25)], vec![], vec![(0, 1.0)]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.tsv");
        idx.save(&path).unwrap();
        assert_eq!(InvertedIndex::load(&path).unwrap(), idx);
        std::fs::write(&path, "#checkpoint_sha256=\ttopk=3\tcategory_restricted=true\n0\t1:x\n").unwrap();
        assert!(matches!(InvertedIndex::load(&path), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn lookup_ignores_trigger_order(
            lists in prop::collection::vec(prop::collection::vec((0u32..20, -1.0f64..1.0), 0..6), 20),
            triggers in prop::collection::vec(0u32..25, 0..5),
        ) {
            let idx = index_of(lists);
            let a = idx.lookup(&triggers, 8).unwrap();
            let mut reversed = triggers.clone();
            reversed.reverse();
            let b = idx.lookup(&reversed, 8).unwrap();
            prop_assert_eq!(&a, &b);
            let again = idx.lookup(&triggers, 8).unwrap();
            prop_assert_eq!(a, again);
        }
    }
}
