//! Synthetic search-behavior logs.
//!
//! The catalog carries hidden latent vectors for items and queries. Items of
//! a category are grouped into style clusters around the category center.
//! Users hold a persistent taste vector per favorite category, placed near
//! one style; each search mixes the query's latent with that taste into a
//! session intent, which drives both which items the page
//! exposes and which of them get clicked or purchased. Latents are used only
//! by the generator and the relevance oracle; the model never sees them.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::select_triggers;
use crate::rng::{rng_for, Rng};
use crate::{CategoryId, ItemId, QueryId, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: ItemId,
    pub category_id: CategoryId,
    pub popularity: f64,
    pub latent_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMeta {
    pub query_id: QueryId,
    pub category_id: CategoryId,
    pub latent_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub items: Vec<ItemMeta>,
    pub categories: u32,
    pub queries: Vec<QueryMeta>,
    pub dim: usize,
    /// Latent inner product a same-category item must exceed to count as
    /// relevant to a query.
    pub relevance_threshold: f64,
    #[serde(skip)]
    by_category: Vec<Vec<ItemId>>,
    #[serde(skip)]
    queries_by_category: Vec<Vec<QueryId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposedItem {
    pub item_id: ItemId,
    pub clicked: bool,
    pub purchased: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub user_id: UserId,
    pub query_id: QueryId,
    pub category_id: CategoryId,
    pub trigger_items: Vec<ItemId>,
    pub exposed: Vec<ExposedItem>,
    pub timestamp_day: u32,
}

impl SearchRecord {
    pub fn clicked(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.exposed.iter().filter(|e| e.clicked).map(|e| e.item_id)
    }

    pub fn purchased(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.exposed.iter().filter(|e| e.purchased).map(|e| e.item_id)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.exposed.is_empty() {
            return Err("record exposes no items".into());
        }
        if let Some(e) = self.exposed.iter().find(|e| e.purchased && !e.clicked) {
            return Err(format!("item {} purchased without a click", e.item_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub n_items: usize,
    pub n_categories: usize,
    pub n_queries: usize,
    /// Zipf exponent of item popularity.
    pub skew: f64,
    pub dim: usize,
    pub seed: u64,
    pub relevance_threshold: f64,
    /// Style clusters per category; popularity ranks are dealt round-robin
    /// so every style receives a similar Zipf slice.
    pub styles: usize,
    /// Norm of the noise added to a category center to place a style.
    pub style_spread: f64,
    /// Norm of the noise added to a style center to place an item.
    pub item_spread: f64,
    pub query_spread: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            n_items: 10_000,
            n_categories: 20,
            n_queries: 200,
            skew: 1.1,
            dim: 8,
            seed: 7,
            relevance_threshold: 0.55,
            styles: 8,
            style_spread: 1.2,
            item_spread: 0.1,
            query_spread: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogConfig {
    pub n_users: usize,
    pub n_days: u32,
    pub page_size: usize,
    pub seed: u64,
    /// Mean of the Poisson number of searches a user issues per day.
    pub searches_per_day: f64,
    pub favorite_categories: usize,
    pub max_triggers: usize,
    pub query_weight: f64,
    pub taste_weight: f64,
    /// Norm of the noise placing a user's taste around a catalog item.
    pub taste_spread: f64,
    pub intent_noise: f64,
    /// Exponent applied to item popularity in the exposure policy.
    pub exposure_popularity: f64,
    /// Scale of the intent affinity term in the exposure policy.
    pub exposure_affinity: f64,
    pub click_bias: f64,
    pub click_scale: f64,
    pub purchase_bias: f64,
    pub purchase_scale: f64,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            n_users: 2_000,
            n_days: 15,
            page_size: 10,
            seed: 11,
            searches_per_day: 0.6,
            favorite_categories: 3,
            max_triggers: 3,
            query_weight: 0.5,
            taste_weight: 3.0,
            taste_spread: 0.3,
            intent_noise: 0.3,
            exposure_popularity: 0.8,
            exposure_affinity: 12.0,
            click_bias: -4.0,
            click_scale: 4.0,
            purchase_bias: -3.0,
            purchase_scale: 3.0,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn gaussian_vec(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn perturbed_unit(rng: &mut Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let noise = gaussian_vec(rng, center.len(), spread / (center.len() as f64).sqrt());
    let mut v: Vec<f64> = center.iter().zip(&noise).map(|(c, n)| c + n).collect();
    normalize(&mut v);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zipf weights `r^-skew` for ranks `1..=n`, normalized to sum to one.
pub fn zipf_weights(n: usize, skew: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-skew)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

impl Catalog {
    pub fn new(
        items: Vec<ItemMeta>,
        categories: u32,
        queries: Vec<QueryMeta>,
        dim: usize,
        relevance_threshold: f64,
    ) -> Result<Self> {
        let mut catalog = Self {
            items,
            categories,
            queries,
            dim,
            relevance_threshold,
            by_category: Vec::new(),
            queries_by_category: Vec::new(),
        };
        catalog.reindex()?;
        Ok(catalog)
    }

    fn reindex(&mut self) -> Result<()> {
        let n_cat = self.categories as usize;
        self.by_category = vec![Vec::new(); n_cat];
        self.queries_by_category = vec![Vec::new(); n_cat];
        for (pos, item) in self.items.iter().enumerate() {
            if item.item_id as usize != pos {
                return Err(Error::config(format!(
                    "item ids must be dense: position {pos} holds id {}",
                    item.item_id
                )));
            }
            if item.category_id >= self.categories {
                return Err(Error::config(format!(
                    "item {} has category {} outside [0, {})",
                    item.item_id, item.category_id, self.categories
                )));
            }
            if !(item.popularity > 0.0) {
                return Err(Error::config(format!("item {} has non-positive popularity", item.item_id)));
            }
            if item.latent_vector.len() != self.dim {
                return Err(Error::config(format!("item {} latent has wrong dimension", item.item_id)));
            }
            self.by_category[item.category_id as usize].push(item.item_id);
        }
        for (pos, query) in self.queries.iter().enumerate() {
            if query.query_id as usize != pos || query.category_id >= self.categories {
                return Err(Error::config(format!("malformed query entry at position {pos}")));
            }
            if query.latent_vector.len() != self.dim {
                return Err(Error::config(format!("query {pos} latent has wrong dimension")));
            }
            self.queries_by_category[query.category_id as usize].push(query.query_id);
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item(&self, id: ItemId) -> Result<&ItemMeta> {
        self.items.get(id as usize).ok_or(Error::item(id))
    }

    pub fn query(&self, id: QueryId) -> Result<&QueryMeta> {
        self.queries.get(id as usize).ok_or(Error::Lookup {
            kind: "query",
            id: id as u64,
        })
    }

    pub fn category_of(&self, id: ItemId) -> Result<CategoryId> {
        self.item(id).map(|i| i.category_id)
    }

    pub fn items_in_category(&self, category: CategoryId) -> &[ItemId] {
        self.by_category
            .get(category as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn queries_in_category(&self, category: CategoryId) -> &[QueryId] {
        self.queries_by_category
            .get(category as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Item → category lookup table indexed by item id.
    pub fn category_map(&self) -> Vec<CategoryId> {
        self.items.iter().map(|i| i.category_id).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| Error::io(path, e.into()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut catalog: Catalog = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        catalog.reindex().map_err(|e| Error::parse(path, 1, e.to_string()))?;
        Ok(catalog)
    }
}

pub fn generate_catalog(config: &CatalogConfig) -> Result<Catalog> {
    let CatalogConfig {
        n_items,
        n_categories,
        n_queries,
        skew,
        dim,
        seed,
        ..
    } = *config;
    if n_categories < 1 || n_items < n_categories {
        return Err(Error::config("need n_items >= n_categories >= 1"));
    }
    if !(skew > 0.0) {
        return Err(Error::config("skew must be positive"));
    }
    if dim < 2 {
        return Err(Error::config("latent dimension must be at least 2"));
    }
    if config.styles < 1 {
        return Err(Error::config("need at least one style per category"));
    }

    let mut rng = rng_for(seed, &[0xCA7]);
    let centers: Vec<Vec<f64>> = (0..n_categories)
        .map(|_| {
            let mut c = gaussian_vec(&mut rng, dim, 1.0);
            normalize(&mut c);
            c
        })
        .collect();

    // Popularity rank equals item id; categories are a shuffled round-robin
    // so every category receives a Zipf-shaped slice of the ranks.
    let mut slots: Vec<usize> = (0..n_items).collect();
    rand::seq::SliceRandom::shuffle(slots.as_mut_slice(), &mut rng);
    let mut category = vec![0u32; n_items];
    for (pos, &item) in slots.iter().enumerate() {
        category[item] = (pos % n_categories) as u32;
    }

    let style_centers: Vec<Vec<Vec<f64>>> = centers
        .iter()
        .map(|c| {
            (0..config.styles)
                .map(|_| perturbed_unit(&mut rng, c, config.style_spread))
                .collect()
        })
        .collect();
    let mut seen_in_category = vec![0usize; n_categories];
    let popularity = zipf_weights(n_items, skew);
    let items = (0..n_items)
        .map(|i| {
            let c = category[i] as usize;
            let style = seen_in_category[c] % config.styles;
            seen_in_category[c] += 1;
            ItemMeta {
                item_id: i as ItemId,
                category_id: category[i],
                popularity: popularity[i],
                latent_vector: perturbed_unit(&mut rng, &style_centers[c][style], config.item_spread),
            }
        })
        .collect();
    let queries = (0..n_queries)
        .map(|q| {
            let c = q % n_categories;
            QueryMeta {
                query_id: q as QueryId,
                category_id: c as CategoryId,
                latent_vector: perturbed_unit(&mut rng, &centers[c], config.query_spread),
            }
        })
        .collect();
    Catalog::new(items, n_categories as u32, queries, dim, config.relevance_threshold)
}

/// Ground-truth relevance: same category and latent inner product above the
/// catalog threshold.
pub fn relevance_oracle(item_id: ItemId, query_id: QueryId, catalog: &Catalog) -> Result<bool> {
    let item = catalog.item(item_id)?;
    let query = catalog.query(query_id)?;
    Ok(item.category_id == query.category_id
        && dot(&item.latent_vector, &query.latent_vector) > catalog.relevance_threshold)
}

fn generate_user(catalog: &Catalog, config: &LogConfig, user: UserId) -> Result<Vec<SearchRecord>> {
    let mut rng = rng_for(config.seed, &[0x105, user as u64]);
    let dim = catalog.dim;

    let searchable: Vec<CategoryId> = (0..catalog.categories)
        .filter(|&c| !catalog.queries_in_category(c).is_empty())
        .collect();
    let n_fav = config.favorite_categories.clamp(1, searchable.len());
    let favorites: Vec<CategoryId> = searchable.choose_multiple(&mut rng, n_fav).copied().collect();
    let mut tastes = Vec::with_capacity(favorites.len());
    for &c in &favorites {
        let anchor = *catalog
            .items_in_category(c)
            .choose(&mut rng)
            .expect("searchable category has items");
        tastes.push(perturbed_unit(
            &mut rng,
            &catalog.items[anchor as usize].latent_vector,
            config.taste_spread,
        ));
    }

    let poisson = Poisson::new(config.searches_per_day)
        .map_err(|e| Error::config(format!("searches_per_day: {e}")))?;
    let mut history: Vec<(ItemId, u32)> = Vec::new();
    let mut records = Vec::new();
    for day in 0..config.n_days {
        let n_searches = poisson.sample(&mut rng) as usize;
        for _ in 0..n_searches {
            let fav = rng.random_range(0..favorites.len());
            let (category, taste) = (favorites[fav], &tastes[fav]);
            let query_id = *catalog
                .queries_in_category(category)
                .choose(&mut rng)
                .expect("searchable category");
            let query = &catalog.queries[query_id as usize];

            let noise = gaussian_vec(&mut rng, dim, config.intent_noise / (dim as f64).sqrt());
            let mut intent: Vec<f64> = (0..dim)
                .map(|k| {
                    config.query_weight * query.latent_vector[k]
                        + config.taste_weight * taste[k]
                        + noise[k]
                })
                .collect();
            normalize(&mut intent);

            let members = catalog.items_in_category(category);
            let log_w: Vec<f64> = members
                .iter()
                .map(|&i| {
                    let item = &catalog.items[i as usize];
                    config.exposure_popularity * item.popularity.ln()
                        + config.exposure_affinity * dot(&intent, &item.latent_vector)
                })
                .collect();
            let max_w = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weighted: Vec<(ItemId, f64)> = members
                .iter()
                .zip(&log_w)
                .map(|(&i, &lw)| (i, (lw - max_w).exp()))
                .collect();
            let page: Vec<ItemId> = weighted
                .choose_multiple_weighted(&mut rng, config.page_size, |&(_, w)| w)
                .map_err(|e| Error::config(format!("exposure sampling: {e}")))?
                .map(|&(i, _)| i)
                .collect();

            let trigger_items = select_triggers(&history, category, config.max_triggers, |i| {
                catalog.category_of(i)
            })?;

            let exposed: Vec<ExposedItem> = page
                .iter()
                .map(|&item_id| {
                    let affinity = dot(&intent, &catalog.items[item_id as usize].latent_vector);
                    let clicked =
                        rng.random::<f64>() < sigmoid(config.click_bias + config.click_scale * affinity);
                    let purchased = clicked
                        && rng.random::<f64>()
                            < sigmoid(config.purchase_bias + config.purchase_scale * affinity);
                    ExposedItem {
                        item_id,
                        clicked,
                        purchased,
                    }
                })
                .collect();
            history.extend(exposed.iter().filter(|e| e.clicked).map(|e| (e.item_id, day)));
            records.push(SearchRecord {
                user_id: user,
                query_id,
                category_id: category,
                trigger_items,
                exposed,
                timestamp_day: day,
            });
        }
    }
    Ok(records)
}

/// Generates logs ordered by (day, user, record). Users are independent
/// streams, so they are generated in parallel and merged.
pub fn generate_logs(catalog: &Catalog, config: &LogConfig) -> Result<Vec<SearchRecord>> {
    if config.page_size < 1 {
        return Err(Error::config("page_size must be at least 1"));
    }
    if catalog.items.is_empty() || catalog.queries.is_empty() {
        return Err(Error::config("catalog has no items or no queries"));
    }
    if !(config.searches_per_day > 0.0) {
        return Err(Error::config("searches_per_day must be positive"));
    }
    for c in 0..catalog.categories {
        let size = catalog.items_in_category(c).len();
        if !catalog.queries_in_category(c).is_empty() && size < config.page_size {
            return Err(Error::config(format!(
                "category {c} has {size} items, fewer than page size {}",
                config.page_size
            )));
        }
    }
    let per_user: Vec<Vec<SearchRecord>> = (0..config.n_users as UserId)
        .into_par_iter()
        .map(|u| generate_user(catalog, config, u))
        .collect::<Result<_>>()?;
    let mut records: Vec<SearchRecord> = per_user.into_iter().flatten().collect();
    // Stable: keeps each user's within-day order.
    records.sort_by_key(|r| (r.timestamp_day, r.user_id));
    Ok(records)
}

pub fn write_logs(path: impl AsRef<Path>, records: &[SearchRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and fully validates a JSONL log; errors carry the 1-based line.
pub fn read_logs(path: impl AsRef<Path>) -> Result<Vec<SearchRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SearchRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        record.validate().map_err(|m| Error::parse(path, idx + 1, m))?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_catalog() -> Catalog {
        generate_catalog(&CatalogConfig {
            n_items: 400,
            n_categories: 4,
            n_queries: 12,
            seed: 3,
            ..CatalogConfig::default()
        })
        .unwrap()
    }

    fn small_logs(catalog: &Catalog, page_size: usize, seed: u64) -> Vec<SearchRecord> {
        generate_logs(
            catalog,
            &LogConfig {
                n_users: 60,
                n_days: 6,
                page_size,
                seed,
                ..LogConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zipf_matches_definition() {
        let c = generate_catalog(&CatalogConfig {
            n_items: 4,
            n_categories: 1,
            n_queries: 1,
            skew: 1.0,
            ..CatalogConfig::default()
        })
        .unwrap();
        let h = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        for (i, expected) in [1.0, 0.5, 1.0 / 3.0, 0.25].iter().enumerate() {
            assert!((c.items[i].popularity - expected / h).abs() < 1e-15);
        }
    }

    #[test]
    fn single_item_catalog() {
        let c = generate_catalog(&CatalogConfig {
            n_items: 1,
            n_categories: 1,
            n_queries: 1,
            ..CatalogConfig::default()
        })
        .unwrap();
        assert_eq!(c.items.len(), 1);
        assert_eq!(c.items[0].popularity, 1.0);
    }

    #[test]
    fn invalid_catalog_configs() {
        let base = CatalogConfig::default();
        for bad in [
            CatalogConfig { n_categories: 0, ..base.clone() },
            CatalogConfig { n_items: 3, n_categories: 5, ..base.clone() },
            CatalogConfig { skew: 0.0, ..base.clone() },
            CatalogConfig { dim: 1, ..base.clone() },
        ] {
            assert!(matches!(generate_catalog(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn catalog_invariants() {
        let c = small_catalog();
        for item in &c.items {
            assert!(item.category_id < c.categories);
            assert!(item.popularity > 0.0);
            assert_eq!(item.latent_vector.len(), c.dim);
        }
        let total: usize = (0..c.categories).map(|k| c.items_in_category(k).len()).sum();
        assert_eq!(total, c.n_items());
    }

    #[test]
    fn oracle_category_gate_and_threshold() {
        let mut c = small_catalog();
        let q = &c.queries[0];
        let other = c.items.iter().find(|i| i.category_id != q.category_id).unwrap();
        assert!(!relevance_oracle(other.item_id, 0, &c).unwrap());

        // An item whose latent equals the query latent is maximally relevant.
        let same = c.items.iter().position(|i| i.category_id == q.category_id).unwrap();
        c.items[same].latent_vector = q.latent_vector.clone();
        assert!(relevance_oracle(same as ItemId, 0, &c).unwrap());

        c.relevance_threshold = f64::NEG_INFINITY;
        for &i in c.items_in_category(c.queries[0].category_id) {
            assert!(relevance_oracle(i, 0, &c).unwrap());
        }
        assert!(relevance_oracle(99_999, 0, &c).is_err());
        assert!(relevance_oracle(0, 99_999, &c).is_err());
    }

    #[test]
    fn records_respect_invariants() {
        let c = small_catalog();
        let logs = small_logs(&c, 5, 1);
        assert!(!logs.is_empty());
        for r in &logs {
            assert!(r.validate().is_ok());
            assert_eq!(r.exposed.len(), 5);
            for &t in &r.trigger_items {
                assert_eq!(c.category_of(t).unwrap(), r.category_id);
            }
            for e in &r.exposed {
                assert_eq!(c.category_of(e.item_id).unwrap(), r.category_id);
            }
        }
        assert!(logs
            .windows(2)
            .all(|w| (w[0].timestamp_day, w[0].user_id) <= (w[1].timestamp_day, w[1].user_id)));
    }

    #[test]
    fn page_size_one() {
        let c = small_catalog();
        assert!(small_logs(&c, 1, 2).iter().all(|r| r.exposed.len() == 1));
    }

    #[test]
    fn generation_is_deterministic() {
        let c = small_catalog();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_logs(&a, &small_logs(&c, 4, 9)).unwrap();
        write_logs(&b, &small_logs(&c, 4, 9)).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_logs(&a).unwrap(), small_logs(&c, 4, 9));
    }

    #[test]
    fn read_rejects_bad_lines_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&small_logs(&small_catalog(), 2, 3)[0]).unwrap();
        std::fs::write(&p, format!("{good}\n{{not json\n")).unwrap();
        match read_logs(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_nesting = good.replacen("\"clicked\":false,\"purchased\":false", "\"clicked\":false,\"purchased\":true", 1);
        if bad_nesting != good {
            std::fs::write(&p, format!("{bad_nesting}\n")).unwrap();
            assert!(matches!(read_logs(&p), Err(Error::Parse { line: 1, .. })));
        }
    }

    #[test]
    fn catalog_round_trips_through_json() {
        let c = small_catalog();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("catalog.json");
        c.save(&p).unwrap();
        let back = Catalog::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.items_in_category(1), c.items_in_category(1));
    }
}
