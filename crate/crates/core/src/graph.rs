//! Two-level item graph.
//!
//! The objective level links each trigger to the page it was shown with;
//! the neighbor level is a same-category co-click graph whose edge weight
//! counts the users that clicked both items inside the recent window.
//! Augmented views are overlays on an immutable base graph.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{Binomial, Geometric};
use rustc_hash::{FxHashMap, FxHashSet};

use crate::datagen::{Catalog, SearchRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::{CategoryId, ItemId};

/// Same-category co-click adjacency. Node ids are dense item ids; a node is
/// known once its category has been registered.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<(ItemId, u32)>>,
    categories: Vec<Option<CategoryId>>,
}

impl NeighborGraph {
    pub fn with_nodes(n: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); n],
            categories: vec![None; n],
        }
    }

    fn ensure(&mut self, id: ItemId) {
        let need = id as usize + 1;
        if self.adjacency.len() < need {
            self.adjacency.resize(need, Vec::new());
            self.categories.resize(need, None);
        }
    }

    pub fn set_category(&mut self, id: ItemId, category: CategoryId) -> Result<()> {
        self.ensure(id);
        match self.categories[id as usize] {
            Some(c) if c != category => Err(Error::contract(format!(
                "item {id} seen with categories {c} and {category}"
            ))),
            _ => {
                self.categories[id as usize] = Some(category);
                Ok(())
            }
        }
    }

    /// Registers every catalog item so isolated items become known nodes.
    pub fn register_catalog(&mut self, catalog: &Catalog) -> Result<()> {
        for item in &catalog.items {
            self.set_category(item.item_id, item.category_id)?;
        }
        Ok(())
    }

    /// Adds `weight` to the undirected edge (a, b).
    pub fn add_edge(&mut self, a: ItemId, b: ItemId, weight: u32) -> Result<()> {
        if a == b || weight == 0 {
            return Err(Error::contract(format!("invalid edge ({a}, {b}, {weight})")));
        }
        let (ca, cb) = (self.category(a)?, self.category(b)?);
        if ca != cb {
            return Err(Error::contract(format!("edge ({a}, {b}) crosses categories")));
        }
        for (from, to) in [(a, b), (b, a)] {
            let list = &mut self.adjacency[from as usize];
            match list.binary_search_by_key(&to, |&(n, _)| n) {
                Ok(pos) => list[pos].1 += weight,
                Err(pos) => list.insert(pos, (to, weight)),
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.categories.get(id as usize).is_some_and(Option::is_some)
    }

    pub fn category(&self, id: ItemId) -> Result<CategoryId> {
        self.categories
            .get(id as usize)
            .copied()
            .flatten()
            .ok_or(Error::item(id))
    }

    /// Neighbors of `id` sorted by item id, with co-click weights.
    pub fn neighbors(&self, id: ItemId) -> Result<&[(ItemId, u32)]> {
        self.category(id)?;
        Ok(&self.adjacency[id as usize])
    }

    pub fn weight(&self, a: ItemId, b: ItemId) -> Option<u32> {
        let list = self.adjacency.get(a as usize)?;
        list.binary_search_by_key(&b, |&(n, _)| n).ok().map(|p| list[p].1)
    }

    /// Undirected edges with `a < b`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (ItemId, ItemId, u32)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(a, list)| {
            list.iter()
                .filter(move |&&(b, _)| (a as ItemId) < b)
                .map(move |&(b, w)| (a as ItemId, b, w))
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges().count()
    }

    /// Known node ids grouped by category.
    pub fn nodes_by_category(&self) -> BTreeMap<CategoryId, Vec<ItemId>> {
        let mut out: BTreeMap<CategoryId, Vec<ItemId>> = BTreeMap::new();
        for (id, c) in self.categories.iter().enumerate() {
            if let Some(c) = c {
                out.entry(*c).or_default().push(id as ItemId);
            }
        }
        out
    }

    /// Category map with `u32::MAX` for unknown nodes.
    pub fn category_map(&self) -> Vec<CategoryId> {
        self.categories.iter().map(|c| c.unwrap_or(u32::MAX)).collect()
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for (a, list) in self.adjacency.iter().enumerate() {
            let a = a as ItemId;
            for &(b, w) in list {
                if w < 1 {
                    return Err(format!("edge ({a}, {b}) has zero weight"));
                }
                if self.weight(b, a) != Some(w) {
                    return Err(format!("edge ({a}, {b}) is not symmetric"));
                }
                if self.category(a).ok() != self.category(b).ok() || self.category(a).is_err() {
                    return Err(format!("edge ({a}, {b}) crosses categories"));
                }
            }
        }
        Ok(())
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".categories.tsv");
        PathBuf::from(s)
    }

    /// Writes `a<TAB>b<TAB>w` lines (a < b) plus a `<path>.categories.tsv`
    /// sidecar of `item<TAB>category` lines.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = |p: &Path, body: &mut dyn FnMut(&mut BufWriter<File>) -> std::io::Result<()>| {
            let file = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(file);
            body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(p, e))
        };
        write(path, &mut |w| {
            for (a, b, weight) in self.edges() {
                writeln!(w, "{a}\t{b}\t{weight}")?;
            }
            Ok(())
        })?;
        write(&Self::sidecar(path), &mut |w| {
            for (id, c) in self.categories.iter().enumerate() {
                if let Some(c) = c {
                    writeln!(w, "{id}\t{c}")?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        fn fields<const N: usize>(path: &Path, line_no: usize, line: &str) -> Result<[u32; N]> {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != N {
                return Err(Error::parse(path, line_no, format!("expected {N} tab-separated fields")));
            }
            let mut out = [0u32; N];
            for (slot, p) in out.iter_mut().zip(parts) {
                *slot = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, line_no, format!("not an unsigned integer: {p:?}")))?;
            }
            Ok(out)
        }
        let read_lines = |p: &Path| -> Result<Vec<String>> {
            let file = File::open(p).map_err(|e| Error::io(p, e))?;
            BufReader::new(file)
                .lines()
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(p, e))
        };

        let path = path.as_ref();
        let mut graph = NeighborGraph::default();
        let sidecar = Self::sidecar(path);
        for (idx, line) in read_lines(&sidecar)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let [id, c] = fields::<2>(&sidecar, idx + 1, line)?;
            graph
                .set_category(id, c)
                .map_err(|e| Error::parse(&sidecar, idx + 1, e.to_string()))?;
        }
        let mut seen = HashSet::new();
        for (idx, line) in read_lines(path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let [a, b, w] = fields::<3>(path, idx + 1, line)?;
            if a >= b {
                return Err(Error::parse(path, idx + 1, "edges must be listed once with i < j"));
            }
            if !seen.insert((a, b)) {
                return Err(Error::parse(path, idx + 1, "duplicate edge"));
            }
            graph
                .add_edge(a, b, w)
                .map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        }
        Ok(graph)
    }
}

/// Builds the co-click graph from the records in the last `window_days`
/// days of the log range. Each user contributes at most one unit of weight
/// per item pair. Item categories come from the records' query category.
pub fn build_neighbor_graph(logs: &[SearchRecord], window_days: u32) -> Result<NeighborGraph> {
    if window_days < 1 {
        return Err(Error::config("window_days must be at least 1"));
    }
    let mut graph = NeighborGraph::default();
    for r in logs {
        for e in &r.exposed {
            graph.set_category(e.item_id, r.category_id)?;
        }
        for &t in &r.trigger_items {
            graph.set_category(t, r.category_id)?;
        }
    }
    let Some(last_day) = logs.iter().map(|r| r.timestamp_day).max() else {
        return Ok(graph);
    };
    let first_day = (last_day + 1).saturating_sub(window_days);

    let mut clicks: BTreeMap<(u32, CategoryId), BTreeSet<ItemId>> = BTreeMap::new();
    for r in logs.iter().filter(|r| r.timestamp_day >= first_day) {
        clicks
            .entry((r.user_id, r.category_id))
            .or_default()
            .extend(r.clicked());
    }
    for items in clicks.values() {
        let items: Vec<ItemId> = items.iter().copied().collect();
        for (i, &a) in items.iter().enumerate() {
            for &b in &items[i + 1..] {
                graph.add_edge(a, b, 1)?;
            }
        }
    }
    Ok(graph)
}

/// Trigger → page links: one entry per (trigger, record index).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ObjectiveEdges {
    pub edges: Vec<(ItemId, usize)>,
}

impl ObjectiveEdges {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

pub fn build_objective_edges(logs: &[SearchRecord]) -> ObjectiveEdges {
    let edges = logs
        .iter()
        .enumerate()
        .flat_map(|(idx, r)| r.trigger_items.iter().map(move |&t| (t, idx)))
        .collect();
    ObjectiveEdges { edges }
}

fn edge_key(a: ItemId, b: ItemId) -> (ItemId, ItemId) {
    (a.min(b), a.max(b))
}

/// A perturbed overlay of a [`NeighborGraph`].
#[derive(Debug, Clone)]
pub struct GraphView<'g> {
    base: &'g NeighborGraph,
    /// Indexed by item id; empty in a view without node drop.
    dropped: Vec<bool>,
    n_dropped: usize,
    removed: FxHashSet<(ItemId, ItemId)>,
    added: FxHashMap<ItemId, Vec<ItemId>>,
}

impl<'g> GraphView<'g> {
    pub fn identity(base: &'g NeighborGraph) -> Self {
        Self {
            base,
            dropped: Vec::new(),
            n_dropped: 0,
            removed: FxHashSet::default(),
            added: FxHashMap::default(),
        }
    }

    pub fn base(&self) -> &'g NeighborGraph {
        self.base
    }

    pub fn is_dropped(&self, id: ItemId) -> bool {
        self.dropped.get(id as usize).copied().unwrap_or(false)
    }

    pub fn dropped_count(&self) -> usize {
        self.n_dropped
    }

    pub fn removed_count(&self) -> usize {
        self.removed.len()
    }

    pub fn added_count(&self) -> usize {
        self.added.values().map(Vec::len).sum::<usize>() / 2
    }

    /// Drops each known node independently with probability `p_drop`.
    pub fn with_node_drop(mut self, p_drop: f64, rng: &mut Rng) -> Result<Self> {
        check_probability("p_drop", p_drop)?;
        if p_drop > 0.0 {
            self.dropped.resize(self.base.n_nodes(), false);
            let gap = Geometric::new(p_drop).map_err(|e| Error::contract(format!("geometric: {e}")))?;
            let mut next = gap.sample(rng);
            let known = (0..self.base.n_nodes() as ItemId).filter(|&id| self.base.contains(id));
            for (i, id) in known.enumerate() {
                if i as u64 == next {
                    if !self.dropped[id as usize] {
                        self.dropped[id as usize] = true;
                        self.n_dropped += 1;
                    }
                    next = next.saturating_add(1).saturating_add(gap.sample(rng));
                }
            }
        }
        Ok(self)
    }

    /// Removes each base edge with probability `p_edge` and adds a
    /// Binomial(|E|, p_edge) number of uniformly drawn same-category non-edges
    /// with weight 1.
    pub fn with_edge_perturb(mut self, p_edge: f64, rng: &mut Rng) -> Result<Self> {
        check_probability("p_edge", p_edge)?;
        if p_edge == 0.0 {
            return Ok(self);
        }
        // Gaps between removed edges are geometric, which matches one
        // Bernoulli(p_edge) draw per edge.
        let gap = Geometric::new(p_edge).map_err(|e| Error::contract(format!("geometric: {e}")))?;
        let mut next = gap.sample(rng);
        let mut n_edges = 0usize;
        for (i, (a, b, _)) in self.base.edges().enumerate() {
            n_edges += 1;
            if i as u64 == next {
                self.removed.insert((a, b));
                next = next.saturating_add(1).saturating_add(gap.sample(rng));
            }
        }
        if n_edges == 0 {
            return Ok(self);
        }
        let to_add = Binomial::new(n_edges as u64, p_edge)
            .map_err(|e| Error::contract(format!("binomial: {e}")))?
            .sample(rng) as usize;

        let groups: Vec<Vec<ItemId>> = self.base.nodes_by_category().into_values().collect();
        let pairs: Vec<u64> = groups
            .iter()
            .map(|g| {
                let n = g.len() as u64;
                n * n.saturating_sub(1) / 2
            })
            .collect();
        let mut free: Vec<u64> = groups
            .iter()
            .zip(&pairs)
            .map(|(g, &p)| p - g.iter().map(|&i| self.base.adjacency[i as usize].len() as u64).sum::<u64>() / 2)
            .collect();
        let mut added: FxHashSet<(ItemId, ItemId)> = FxHashSet::default();
        let is_free = |a: ItemId, b: ItemId, added: &FxHashSet<(ItemId, ItemId)>| {
            a != b && self.base.weight(a, b).is_none() && !added.contains(&edge_key(a, b))
        };
        // Uniform over all same-category pairs, rejecting taken ones, is
        // uniform over the free pairs.
        let by_pairs = if pairs.iter().any(|&p| p > 0) {
            Some(WeightedIndex::new(&pairs).expect("some category has a pair"))
        } else {
            None
        };
        for _ in 0..to_add {
            if free.iter().all(|&f| f == 0) {
                break;
            }
            let by_pairs = by_pairs.as_ref().expect("free pairs imply pairs");
            let mut pick = None;
            for _ in 0..256 {
                let g = by_pairs.sample(rng);
                let members = &groups[g];
                let a = members[rng.random_range(0..members.len())];
                let b = members[rng.random_range(0..members.len())];
                if is_free(a, b, &added) {
                    pick = Some((g, edge_key(a, b)));
                    break;
                }
            }
            let (g, key) = match pick {
                Some(p) => p,
                None => {
                    // Dense graph: enumerate the free pairs exactly.
                    let g = WeightedIndex::new(&free).expect("some category has free pairs").sample(rng);
                    let members = &groups[g];
                    let candidates: Vec<(ItemId, ItemId)> = members
                        .iter()
                        .enumerate()
                        .flat_map(|(i, &a)| members[i + 1..].iter().map(move |&b| edge_key(a, b)))
                        .filter(|&(a, b)| is_free(a, b, &added))
                        .collect();
                    (g, candidates[rng.random_range(0..candidates.len())])
                }
            };
            added.insert(key);
            free[g] -= 1;
        }
        let mut ordered: Vec<(ItemId, ItemId)> = added.into_iter().collect();
        ordered.sort_unstable();
        for (a, b) in ordered {
            self.added.entry(a).or_default().push(b);
            self.added.entry(b).or_default().push(a);
        }
        Ok(self)
    }

    /// Live neighbors of `id` with their weights in this view. A dropped
    /// node has none and never appears as a neighbor.
    pub fn live_neighbors(&self, id: ItemId) -> Result<Vec<(ItemId, u32)>> {
        let base = self.base.neighbors(id)?;
        if self.is_dropped(id) {
            return Ok(Vec::new());
        }
        let mut out: Vec<(ItemId, u32)> = base
            .iter()
            .filter(|&&(n, _)| {
                !self.is_dropped(n) && (self.removed.is_empty() || !self.removed.contains(&edge_key(id, n)))
            })
            .copied()
            .collect();
        if let Some(extra) = self.added.get(&id) {
            out.extend(extra.iter().filter(|&&n| !self.is_dropped(n)).map(|&n| (n, 1)));
        }
        Ok(out)
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in [0, 1), got {p}")))
    }
}

pub fn augment_node_drop<'g>(graph: &'g NeighborGraph, p_drop: f64, rng: &mut Rng) -> Result<GraphView<'g>> {
    GraphView::identity(graph).with_node_drop(p_drop, rng)
}

pub fn augment_edge_perturb<'g>(graph: &'g NeighborGraph, p_edge: f64, rng: &mut Rng) -> Result<GraphView<'g>> {
    GraphView::identity(graph).with_edge_perturb(p_edge, rng)
}

/// `k` draws with replacement from `node`'s live neighbors, proportional to
/// edge weight. Returns an empty list for nodes without live neighbors.
pub fn sample_neighbors(view: &GraphView<'_>, node: ItemId, k: usize, rng: &mut Rng) -> Result<Vec<ItemId>> {
    if k < 1 {
        return Err(Error::contract("fan-out k must be at least 1"));
    }
    let live = view.live_neighbors(node)?;
    if live.is_empty() {
        return Ok(Vec::new());
    }
    if live.len() == 1 {
        return Ok(vec![live[0].0; k]);
    }
    let dist = WeightedIndex::new(live.iter().map(|&(_, w)| w)).expect("positive weights");
    Ok((0..k).map(|_| live[dist.sample(rng)].0).collect())
}
