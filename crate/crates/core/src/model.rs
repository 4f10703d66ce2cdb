//! Item embedding model.
//!
//! An item's base vector is its id embedding plus its category embedding.
//! The output vector adds a single attention hop over sampled neighbors:
//!
//! ```text
//! h      = id[i] + cat[c(i)]
//! alpha  = softmax_j(<h, h_j> / sqrt(d))
//! z      = W_self h + W_neigh sum_j alpha_j h_j
//! ```
//!
//! Gradients are written out by hand; see [`EmbeddingModel::backward`].

use std::hash::Hash;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rustc_hash::{FxHashMap, FxHashSet};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::{CategoryId, ItemId};

static ZERO_NORM_SCORES: AtomicU64 = AtomicU64::new(0);

/// Number of scores evaluated on a zero-norm vector since process start.
pub fn zero_norm_score_count() -> u64 {
    ZERO_NORM_SCORES.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemVector<F> {
    pub values: Vec<F>,
    pub source_item: ItemId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel<F> {
    dim: usize,
    n_items: usize,
    n_categories: usize,
    tau: F,
    id_embeddings: Vec<F>,
    category_embeddings: Vec<F>,
    w_self: Vec<F>,
    w_neigh: Vec<F>,
}

/// Inner product with four interleaved partial sums, so the loop vectorizes.
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (a4.remainder(), b4.remainder());
    for (x, y) in a4.zip(b4) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail = ra.iter().zip(rb).fold(F::zero(), |s, (&x, &y)| s + x * y);
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matvec<F: Scalar>(w: &[F], x: &[F], out: &mut [F]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o = dot(row, x);
    }
}

fn matvec_transposed_add<F: Scalar>(w: &[F], g: &[F], out: &mut [F]) {
    for (row, &gr) in w.chunks_exact(out.len()).zip(g) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o += x * gr);
    }
}

fn outer_add<F: Scalar>(acc: &mut [F], g: &[F], x: &[F]) {
    for (row, &gr) in acc.chunks_exact_mut(x.len()).zip(g) {
        row.iter_mut().zip(x).for_each(|(a, &xc)| *a += gr * xc);
    }
}

/// Cosine similarity. A zero-norm argument scores 0 and bumps
/// [`zero_norm_score_count`].
pub fn score<F: Scalar>(z_v: &[F], z_u: &[F]) -> F {
    score_with_grad(z_v, z_u).0
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn score_with_grad<F: Scalar>(z_v: &[F], z_u: &[F]) -> (F, Vec<F>, Vec<F>) {
    let nv = dot(z_v, z_v).sqrt();
    let nu = dot(z_u, z_u).sqrt();
    if nv == F::zero() || nu == F::zero() {
        ZERO_NORM_SCORES.fetch_add(1, Ordering::Relaxed);
        return (F::zero(), vec![F::zero(); z_v.len()], vec![F::zero(); z_u.len()]);
    }
    let inv = F::one() / (nv * nu);
    let s = dot(z_v, z_u) * inv;
    let gv = z_v
        .iter()
        .zip(z_u)
        .map(|(&v, &u)| u * inv - s * v / (nv * nv))
        .collect();
    let gu = z_u
        .iter()
        .zip(z_v)
        .map(|(&u, &v)| v * inv - s * u / (nu * nu))
        .collect();
    (s, gv, gu)
}

/// Intermediate values of one aggregation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AggregationTrace<F> {
    pub item: ItemId,
    pub neighbors: Vec<ItemId>,
    h: Vec<F>,
    /// Neighbor base embeddings, row-major `neighbors.len() × d`.
    neighbor_h: Vec<F>,
    pub alpha: Vec<F>,
    mixed: Vec<F>,
    pub output: Vec<F>,
}

impl<F: Scalar> AggregationTrace<F> {
    pub fn vector(&self) -> ItemVector<F> {
        ItemVector {
            values: self.output.clone(),
            source_item: self.item,
        }
    }
}

/// Sparse gradient of the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    dim: usize,
    pub id_rows: FxHashMap<ItemId, Vec<F>>,
    pub category_rows: FxHashMap<CategoryId, Vec<F>>,
    pub w_self: Vec<F>,
    pub w_neigh: Vec<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            id_rows: FxHashMap::default(),
            category_rows: FxHashMap::default(),
            w_self: vec![F::zero(); dim * dim],
            w_neigh: vec![F::zero(); dim * dim],
        }
    }

    fn add_row<K: Hash + Eq>(rows: &mut FxHashMap<K, Vec<F>>, key: K, g: &[F], dim: usize) {
        let row = rows.entry(key).or_insert_with(|| vec![F::zero(); dim]);
        row.iter_mut().zip(g).for_each(|(r, &x)| *r += x);
    }

    /// Adds `other` into `self`. Each row sums in call order, so repeated
    /// accumulation in a fixed order is deterministic.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        for (&k, g) in &other.id_rows {
            Self::add_row(&mut self.id_rows, k, g, self.dim);
        }
        for (&k, g) in &other.category_rows {
            Self::add_row(&mut self.category_rows, k, g, self.dim);
        }
        self.w_self.iter_mut().zip(&other.w_self).for_each(|(a, &b)| *a += b);
        self.w_neigh.iter_mut().zip(&other.w_neigh).for_each(|(a, &b)| *a += b);
    }

    /// Multiplies every entry by `factor`.
    pub fn scale(&mut self, factor: F) {
        self.id_rows
            .values_mut()
            .chain(self.category_rows.values_mut())
            .flatten()
            .chain(self.w_self.iter_mut())
            .chain(self.w_neigh.iter_mut())
            .for_each(|x| *x *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.id_rows
            .values()
            .chain(self.category_rows.values())
            .flatten()
            .chain(&self.w_self)
            .chain(&self.w_neigh)
            .all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Gradients<F>) -> f64 {
        fn rows<F: Scalar, K: Hash + Eq + Copy>(a: &FxHashMap<K, Vec<F>>, b: &FxHashMap<K, Vec<F>>) -> f64 {
            let keys: FxHashSet<K> = a.keys().chain(b.keys()).copied().collect();
            keys.iter()
                .map(|k| {
                    let (x, y) = (a.get(k), b.get(k));
                    let len = x.or(y).map_or(0, Vec::len);
                    (0..len)
                        .map(|i| {
                            let xv = x.map_or(F::zero(), |r| r[i]);
                            let yv = y.map_or(F::zero(), |r| r[i]);
                            (xv - yv).abs().as_f64()
                        })
                        .fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        }
        let dense = |a: &[F], b: &[F]| a.iter().zip(b).map(|(&x, &y)| (x - y).abs().as_f64()).fold(0.0, f64::max);
        rows(&self.id_rows, &other.id_rows)
            .max(rows(&self.category_rows, &other.category_rows))
            .max(dense(&self.w_self, &other.w_self))
            .max(dense(&self.w_neigh, &other.w_neigh))
    }
}

impl<F: Scalar> EmbeddingModel<F> {
    /// Uniform tables in `[-init_scale, init_scale]`; aggregator matrices are
    /// the identity plus noise of the same amplitude.
    pub fn init(n_items: usize, n_categories: usize, dim: usize, tau: f64, init_scale: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::config("embedding dimension must be at least 2"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config("temperature must be positive"));
        }
        if !(init_scale >= 0.0) || !init_scale.is_finite() {
            return Err(Error::config("init_scale must be non-negative"));
        }
        let mut rng = rng_for(seed, &[0x30DE1]);
        let mut uniform = |n: usize| -> Vec<F> {
            (0..n)
                .map(|_| {
                    if init_scale == 0.0 {
                        F::zero()
                    } else {
                        F::of(rng.random_range(-init_scale..=init_scale))
                    }
                })
                .collect()
        };
        let id_embeddings = uniform(n_items * dim);
        let category_embeddings = uniform(n_categories * dim);
        let mut w_self = uniform(dim * dim);
        let mut w_neigh = uniform(dim * dim);
        for i in 0..dim {
            w_self[i * dim + i] += F::one();
            w_neigh[i * dim + i] += F::one();
        }
        Ok(Self {
            dim,
            n_items,
            n_categories,
            tau: F::of(tau),
            id_embeddings,
            category_embeddings,
            w_self,
            w_neigh,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn tau(&self) -> F {
        self.tau
    }

    pub fn id_embedding(&self, item: ItemId) -> &[F] {
        &self.id_embeddings[item as usize * self.dim..(item as usize + 1) * self.dim]
    }

    pub fn id_embedding_mut(&mut self, item: ItemId) -> &mut [F] {
        &mut self.id_embeddings[item as usize * self.dim..(item as usize + 1) * self.dim]
    }

    pub fn category_embedding(&self, category: CategoryId) -> &[F] {
        &self.category_embeddings[category as usize * self.dim..(category as usize + 1) * self.dim]
    }

    pub fn category_embedding_mut(&mut self, category: CategoryId) -> &mut [F] {
        &mut self.category_embeddings[category as usize * self.dim..(category as usize + 1) * self.dim]
    }

    pub fn w_self(&self) -> &[F] {
        &self.w_self
    }

    pub fn w_self_mut(&mut self) -> &mut [F] {
        &mut self.w_self
    }

    pub fn w_neigh(&self) -> &[F] {
        &self.w_neigh
    }

    pub fn w_neigh_mut(&mut self) -> &mut [F] {
        &mut self.w_neigh
    }

    pub fn is_finite(&self) -> bool {
        self.id_embeddings
            .iter()
            .chain(&self.category_embeddings)
            .chain(&self.w_self)
            .chain(&self.w_neigh)
            .all(|x| x.is_finite())
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<G: Scalar>(&self) -> EmbeddingModel<G> {
        let conv = |v: &[F]| v.iter().map(|&x| G::of(x.as_f64())).collect();
        EmbeddingModel {
            dim: self.dim,
            n_items: self.n_items,
            n_categories: self.n_categories,
            tau: G::of(self.tau.as_f64()),
            id_embeddings: conv(&self.id_embeddings),
            category_embeddings: conv(&self.category_embeddings),
            w_self: conv(&self.w_self),
            w_neigh: conv(&self.w_neigh),
        }
    }

    fn category_of(&self, item: ItemId, categories: &[CategoryId]) -> Result<CategoryId> {
        if item as usize >= self.n_items {
            return Err(Error::item(item));
        }
        let c = *categories.get(item as usize).ok_or(Error::item(item))?;
        if c as usize >= self.n_categories {
            return Err(Error::Lookup {
                kind: "category",
                id: c as u64,
            });
        }
        Ok(c)
    }

    fn base_values(&self, item: ItemId, categories: &[CategoryId]) -> Result<Vec<F>> {
        let c = self.category_of(item, categories)?;
        Ok(self
            .id_embedding(item)
            .iter()
            .zip(self.category_embedding(c))
            .map(|(&a, &b)| a + b)
            .collect())
    }

    /// Id embedding plus category embedding.
    pub fn base_embedding(&self, item: ItemId, categories: &[CategoryId]) -> Result<ItemVector<F>> {
        Ok(ItemVector {
            values: self.base_values(item, categories)?,
            source_item: item,
        })
    }

    pub fn aggregate(&self, item: ItemId, neighbors: &[ItemId], categories: &[CategoryId]) -> Result<ItemVector<F>> {
        Ok(self.forward(item, neighbors, categories)?.vector())
    }

    pub fn forward(&self, item: ItemId, neighbors: &[ItemId], categories: &[CategoryId]) -> Result<AggregationTrace<F>> {
        let d = self.dim;
        let h = self.base_values(item, categories)?;
        let mut neighbor_h = Vec::with_capacity(neighbors.len() * d);
        for &n in neighbors {
            let c = self.category_of(n, categories)?;
            neighbor_h.extend(self.id_embedding(n).iter().zip(self.category_embedding(c)).map(|(&a, &b)| a + b));
        }

        let mut output = vec![F::zero(); d];
        matvec(&self.w_self, &h, &mut output);
        let mut mixed = vec![F::zero(); d];
        let mut alpha = Vec::new();
        if !neighbors.is_empty() {
            let scale = F::one() / F::of(d as f64).sqrt();
            alpha = neighbor_h.chunks_exact(d).map(|hj| dot(&h, hj) * scale).collect();
            let max = alpha.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for a in alpha.iter_mut() {
                *a = (*a - max).exp();
                total += *a;
            }
            for a in alpha.iter_mut() {
                *a /= total;
            }
            for (a, hj) in alpha.iter().zip(neighbor_h.chunks_exact(d)) {
                mixed.iter_mut().zip(hj).for_each(|(m, &x)| *m += *a * x);
            }
            let mut from_neighbors = vec![F::zero(); d];
            matvec(&self.w_neigh, &mixed, &mut from_neighbors);
            output.iter_mut().zip(&from_neighbors).for_each(|(o, &x)| *o += x);
        }
        Ok(AggregationTrace {
            item,
            neighbors: neighbors.to_vec(),
            h,
            neighbor_h,
            alpha,
            mixed,
            output,
        })
    }

    /// Accumulates `d loss / d params` given `grad_output = d loss / d z`.
    pub fn backward(
        &self,
        trace: &AggregationTrace<F>,
        grad_output: &[F],
        categories: &[CategoryId],
        grads: &mut Gradients<F>,
    ) -> Result<()> {
        let d = self.dim;
        outer_add(&mut grads.w_self, grad_output, &trace.h);
        let mut grad_h = vec![F::zero(); d];
        matvec_transposed_add(&self.w_self, grad_output, &mut grad_h);

        if !trace.neighbors.is_empty() {
            outer_add(&mut grads.w_neigh, grad_output, &trace.mixed);
            let mut grad_mixed = vec![F::zero(); d];
            matvec_transposed_add(&self.w_neigh, grad_output, &mut grad_mixed);

            let scale = F::one() / F::of(d as f64).sqrt();
            let mut grad_hj = vec![F::zero(); d];
            let grad_alpha: Vec<F> = trace.neighbor_h.chunks_exact(d).map(|hj| dot(&grad_mixed, hj)).collect();
            let mean: F = trace
                .alpha
                .iter()
                .zip(&grad_alpha)
                .fold(F::zero(), |acc, (&a, &g)| acc + a * g);
            for ((&n, hj), (&a, &ga)) in trace
                .neighbors
                .iter()
                .zip(trace.neighbor_h.chunks_exact(d))
                .zip(trace.alpha.iter().zip(&grad_alpha))
            {
                let grad_logit = a * (ga - mean) * scale;
                grad_hj
                    .iter_mut()
                    .zip(grad_mixed.iter().zip(&trace.h))
                    .for_each(|(g, (&gm, &h))| *g = a * gm + grad_logit * h);
                grad_h.iter_mut().zip(hj).for_each(|(g, &x)| *g += grad_logit * x);
                let c = self.category_of(n, categories)?;
                Gradients::add_row(&mut grads.id_rows, n, &grad_hj, d);
                Gradients::add_row(&mut grads.category_rows, c, &grad_hj, d);
            }
        }
        let c = self.category_of(trace.item, categories)?;
        Gradients::add_row(&mut grads.id_rows, trace.item, &grad_h, d);
        Gradients::add_row(&mut grads.category_rows, c, &grad_h, d);
        Ok(())
    }

    /// Plain gradient step `param -= lr * grad`.
    pub fn apply_gradients(&mut self, grads: &Gradients<F>, lr: F) {
        for (&k, g) in &grads.id_rows {
            self.id_embedding_mut(k).iter_mut().zip(g).for_each(|(p, &x)| *p -= lr * x);
        }
        for (&k, g) in &grads.category_rows {
            self.category_embedding_mut(k).iter_mut().zip(g).for_each(|(p, &x)| *p -= lr * x);
        }
        self.w_self.iter_mut().zip(&grads.w_self).for_each(|(p, &x)| *p -= lr * x);
        self.w_neigh.iter_mut().zip(&grads.w_neigh).for_each(|(p, &x)| *p -= lr * x);
    }

    /// Text checkpoint: header `d n_items n_categories tau`, one
    /// `id<TAB>v1 .. vd` row per item and per category, then `W_self` and
    /// `W_neigh` row-major, one matrix row per line.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, values: &[F]| {
            let formatted: Vec<String> = values.iter().map(|v| v.format_sig()).collect();
            out.push_str(&formatted.join(" "));
            out.push('\n');
        };
        writeln!(out, "{} {} {} {}", self.dim, self.n_items, self.n_categories, self.tau.format_sig()).unwrap();
        for i in 0..self.n_items {
            write!(out, "{i}\t").unwrap();
            row(&mut out, self.id_embedding(i as ItemId));
        }
        for c in 0..self.n_categories {
            write!(out, "{c}\t").unwrap();
            row(&mut out, self.category_embedding(c as CategoryId));
        }
        for m in [&self.w_self, &self.w_neigh] {
            for r in 0..self.dim {
                row(&mut out, &m[r * self.dim..(r + 1) * self.dim]);
            }
        }
        out
    }

    pub fn from_checkpoint_str(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        let origin = origin.as_ref();
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut last_line = 0;
        let mut next = |what: &str| -> Result<(usize, &str)> {
            match lines.next() {
                Some((n, l)) => {
                    last_line = n;
                    Ok((n, l))
                }
                None => Err(Error::parse(origin, last_line + 1, format!("unexpected end of file, expected {what}"))),
            }
        };
        let parse_values = |n: usize, s: &str, d: usize| -> Result<Vec<F>> {
            let vals = s
                .split_whitespace()
                .map(|t| F::parse_scalar(t).ok_or_else(|| Error::parse(origin, n, format!("bad number {t:?}"))))
                .collect::<Result<Vec<F>>>()?;
            if vals.len() != d {
                return Err(Error::parse(origin, n, format!("expected {d} values, found {}", vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(origin, n, "non-finite parameter"));
            }
            Ok(vals)
        };

        let (n, header) = next("header")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(origin, n, "header must be `d n_items n_categories tau`"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(origin, n, format!("bad integer {s:?}")));
        let (dim, n_items, n_categories) = (int(fields[0])?, int(fields[1])?, int(fields[2])?);
        let tau = F::parse_scalar(fields[3]).ok_or_else(|| Error::parse(origin, n, "bad temperature"))?;
        if dim < 2 || !(tau > F::zero()) {
            return Err(Error::parse(origin, n, "invalid dimension or temperature"));
        }

        let mut table = |rows: usize, what: &str| -> Result<Vec<F>> {
            let mut out = Vec::with_capacity(rows * dim);
            for expected in 0..rows {
                let (n, line) = next(what)?;
                let (id, values) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::parse(origin, n, format!("{what} row must be `id<TAB>values`")))?;
                if id.trim().parse::<usize>().ok() != Some(expected) {
                    return Err(Error::parse(origin, n, format!("expected {what} id {expected}")));
                }
                out.extend(parse_values(n, values, dim)?);
            }
            Ok(out)
        };
        let id_embeddings = table(n_items, "item")?;
        let category_embeddings = table(n_categories, "category")?;
        let mut matrix = || -> Result<Vec<F>> {
            let mut out = Vec::with_capacity(dim * dim);
            for _ in 0..dim {
                let (n, line) = next("matrix row")?;
                out.extend(parse_values(n, line, dim)?);
            }
            Ok(out)
        };
        let w_self = matrix()?;
        let w_neigh = matrix()?;
        if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(Error::parse(origin, n, format!("trailing content {l:?}")));
        }
        Ok(Self {
            dim,
            n_items,
            n_categories,
            tau,
            id_embeddings,
            category_embeddings,
            w_self,
            w_neigh,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::write_atomic(path.as_ref(), self.to_checkpoint_string().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, path)
    }
}
