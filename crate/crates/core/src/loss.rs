//! Multi-objective clipped softmax loss and its positive-exclusion
//! contrastive variant, with exact gradients.
//!
//! For one objective with positive set `P` over candidate scores `s`:
//!
//! ```text
//! y(k)  = exp(s_k / tau) / sum_{j in D(k)} exp(s_j / tau)
//! y'(k) = min(|P| * y(k), 1)
//! L     = -sum_{k in P} log y'(k)
//! ```
//!
//! The multi-objective loss uses the full candidate set as `D(k)`. The
//! contrastive loss uses `D(k) = negatives ∪ {k}`, so positives never sit
//! in each other's denominator. Once `|P| * y(k) >= 1` the term is clipped
//! to zero and contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{f128, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Objective {
    Relevance,
    Exposure,
    Click,
    Purchase,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Relevance,
        Objective::Exposure,
        Objective::Click,
        Objective::Purchase,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Relevance => "relevance",
            Objective::Exposure => "exposure",
            Objective::Click => "click",
            Objective::Purchase => "purchase",
        }
    }
}

/// Binary labels per objective, one per candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveLabels {
    labels: [Vec<bool>; 4],
}

impl ObjectiveLabels {
    pub fn new(relevance: Vec<bool>, exposure: Vec<bool>, click: Vec<bool>, purchase: Vec<bool>) -> Result<Self> {
        let n = relevance.len();
        if exposure.len() != n || click.len() != n || purchase.len() != n {
            return Err(Error::contract("label vectors differ in length"));
        }
        Ok(Self {
            labels: [relevance, exposure, click, purchase],
        })
    }

    /// Same positives for every objective.
    pub fn uniform(positives: Vec<bool>) -> Self {
        Self {
            labels: [positives.clone(), positives.clone(), positives.clone(), positives],
        }
    }

    pub fn len(&self) -> usize {
        self.labels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, o: Objective) -> &[bool] {
        &self.labels[o.index()]
    }

    pub fn positive_count(&self, o: Objective) -> usize {
        self.get(o).iter().filter(|&&y| y).count()
    }

    /// Purchase ⊆ Click ⊆ Exposure.
    pub fn is_nested(&self) -> bool {
        let (e, c, p) = (self.get(Objective::Exposure), self.get(Objective::Click), self.get(Objective::Purchase));
        (0..self.len()).all(|k| (!p[k] || c[k]) && (!c[k] || e[k]))
    }

    /// Labels for the contrastive candidate list
    /// `[augmented trigger, original candidates.., augmented candidates..]`:
    /// the augmented trigger is positive for every objective and each view
    /// repeats the original labels.
    pub fn extend_for_contrast(&self) -> Self {
        let ext = |y: &Vec<bool>| {
            let mut out = Vec::with_capacity(2 * y.len() + 1);
            out.push(true);
            out.extend_from_slice(y);
            out.extend_from_slice(y);
            out
        };
        Self {
            labels: [
                ext(&self.labels[0]),
                ext(&self.labels[1]),
                ext(&self.labels[2]),
                ext(&self.labels[3]),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights(pub [f64; 4]);

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self([1.0, 0.5, 1.0, 2.0])
    }
}

impl ObjectiveWeights {
    pub fn get(&self, o: Objective) -> f64 {
        self.0[o.index()]
    }

    pub fn set(&mut self, o: Objective, w: f64) {
        self.0[o.index()] = w;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateTag {
    AugmentedTrigger,
    Original(usize),
    Augmented(usize),
}

/// Trigger-relative scores of every candidate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates<F> {
    pub entries: Vec<(CandidateTag, F)>,
}

impl<F: Scalar> ScoredCandidates<F> {
    /// Layout `[augmented trigger, original.., augmented..]`.
    pub fn contrastive(augmented_trigger: F, original: &[F], augmented: &[F]) -> Self {
        let mut entries = Vec::with_capacity(1 + original.len() + augmented.len());
        entries.push((CandidateTag::AugmentedTrigger, augmented_trigger));
        entries.extend(original.iter().enumerate().map(|(i, &s)| (CandidateTag::Original(i), s)));
        entries.extend(augmented.iter().enumerate().map(|(i, &s)| (CandidateTag::Augmented(i), s)));
        Self { entries }
    }

    pub fn scores(&self) -> Vec<F> {
        self.entries.iter().map(|&(_, s)| s).collect()
    }

    fn validate(&self, labels: &ObjectiveLabels) -> Result<()> {
        if labels.len() != self.entries.len() {
            return Err(Error::contract(format!(
                "{} scores but {} labels",
                self.entries.len(),
                labels.len()
            )));
        }
        let mut triggers = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, (t, _))| *t == CandidateTag::AugmentedTrigger);
        let (Some((at, _)), None) = (triggers.next(), triggers.next()) else {
            return Err(Error::contract("exactly one augmented trigger entry is required"));
        };
        if Objective::ALL.iter().any(|&o| !labels.get(o)[at]) {
            return Err(Error::contract("augmented trigger must be positive for every objective"));
        }
        let originals = self.entries.iter().filter(|(t, _)| matches!(t, CandidateTag::Original(_))).count();
        let augmented = self.entries.iter().filter(|(t, _)| matches!(t, CandidateTag::Augmented(_))).count();
        if originals != augmented {
            return Err(Error::contract("views must contribute the same number of candidates"));
        }
        if self.entries.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::contract("non-finite score"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<F> {
    pub per_objective: [F; 4],
    pub total: F,
    /// d total / d score for every input score.
    pub grad: Vec<F>,
}

/// Which candidates share a positive's softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Denominator {
    /// Every candidate (the plain multi-objective form).
    Full,
    /// Negatives plus the positive itself.
    ExcludeOtherPositives,
}

fn check_inputs<F: Scalar>(scores: &[F], tau: F) -> Result<()> {
    if !(tau > F::zero()) {
        return Err(Error::contract("temperature must be positive"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("non-finite score"));
    }
    Ok(())
}

fn max_of<F: Scalar>(it: impl Iterator<Item = F>) -> F {
    it.fold(F::neg_infinity(), F::max)
}

/// Temperature softmax. With `mask = None` every index shares one
/// denominator; otherwise index `k` is normalized over `mask ∪ {k}`.
pub fn softmax_scores<F: Scalar>(scores: &[F], tau: F, mask: Option<&[bool]>) -> Result<Vec<F>> {
    check_inputs(scores, tau)?;
    if scores.is_empty() {
        return Err(Error::contract("empty score list"));
    }
    let full;
    let mask = match mask {
        Some(m) => {
            if m.len() != scores.len() {
                return Err(Error::contract("mask length differs from score count"));
            }
            m
        }
        None => {
            full = vec![true; scores.len()];
            &full
        }
    };
    if !mask.iter().any(|&m| m) {
        return Err(Error::contract("empty denominator mask"));
    }
    let m_max = max_of(scores.iter().zip(mask).filter(|(_, &m)| m).map(|(&s, _)| s));
    let sum: F = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| ((s - m_max) / tau).exp())
        .sum();
    Ok(scores
        .iter()
        .zip(mask)
        .map(|(&s, &inside)| {
            if inside {
                ((s - m_max) / tau).exp() / sum
            } else {
                let top = m_max.max(s);
                let denom = sum * ((m_max - top) / tau).exp() + ((s - top) / tau).exp();
                ((s - top) / tau).exp() / denom
            }
        })
        .collect())
}

/// Loss and gradient of one objective.
fn objective_term<F: Scalar>(scores: &[F], positives: &[bool], tau: F, denominator: Denominator) -> Result<(F, Vec<F>)> {
    let n = scores.len();
    let mut grad = vec![F::zero(); n];
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Ok((F::zero(), grad));
    }
    let ln_p = F::of(n_pos as f64).ln();
    let mut loss = F::zero();
    match denominator {
        Denominator::Full => {
            let top = max_of(scores.iter().copied());
            let exps: Vec<F> = scores.iter().map(|&s| ((s - top) / tau).exp()).collect();
            let sum: F = exps.iter().copied().sum();
            let ln_sum = sum.ln();
            let mut active = 0usize;
            for k in (0..n).filter(|&k| positives[k]) {
                let ln_y = (scores[k] - top) / tau - ln_sum;
                if ln_y + ln_p < F::zero() {
                    loss -= ln_y + ln_p;
                    grad[k] -= F::one() / tau;
                    active += 1;
                }
            }
            if active > 0 {
                let scale = F::of(active as f64) / (tau * sum);
                grad.iter_mut().zip(&exps).for_each(|(g, &e)| *g += scale * e);
            }
        }
        Denominator::ExcludeOtherPositives => {
            let negatives: Vec<usize> = (0..n).filter(|&j| !positives[j]).collect();
            if negatives.is_empty() {
                return Err(Error::contract(
                    "positive-exclusion denominator needs at least one negative",
                ));
            }
            let neg_top = max_of(negatives.iter().map(|&j| scores[j]));
            let neg_exps: Vec<F> = negatives.iter().map(|&j| ((scores[j] - neg_top) / tau).exp()).collect();
            let neg_sum: F = neg_exps.iter().copied().sum();
            for k in (0..n).filter(|&k| positives[k]) {
                let top = neg_top.max(scores[k]);
                let shift = ((neg_top - top) / tau).exp();
                let own = ((scores[k] - top) / tau).exp();
                let denom = neg_sum * shift + own;
                let ln_y = (scores[k] - top) / tau - denom.ln();
                if ln_y + ln_p < F::zero() {
                    loss -= ln_y + ln_p;
                    grad[k] += (own / denom - F::one()) / tau;
                    let scale = shift / (denom * tau);
                    for (&j, &e) in negatives.iter().zip(&neg_exps) {
                        grad[j] += scale * e;
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

fn combine<F: Scalar>(
    scores: &[F],
    labels: &ObjectiveLabels,
    tau: F,
    weights: &ObjectiveWeights,
    denominator: Denominator,
) -> Result<LossReport<F>> {
    check_inputs(scores, tau)?;
    if labels.len() != scores.len() {
        return Err(Error::contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut per_objective = [F::zero(); 4];
    let mut total = F::zero();
    let mut grad = vec![F::zero(); scores.len()];
    for o in Objective::ALL {
        let y = labels.get(o);
        // Without negatives the exclusion term is undefined; a disabled
        // objective reports 0 instead of failing.
        if weights.get(o) == 0.0 && denominator == Denominator::ExcludeOtherPositives && y.iter().all(|&p| p) {
            continue;
        }
        let (l, g) = objective_term(scores, y, tau, denominator)?;
        let w = F::of(weights.get(o));
        per_objective[o.index()] = l;
        total += w * l;
        grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += w * b);
    }
    Ok(LossReport {
        per_objective,
        total,
        grad,
    })
}

/// Weighted sum of clipped softmax losses with a shared full denominator.
pub fn multi_objective_loss<F: Scalar>(
    scores: &[F],
    labels: &ObjectiveLabels,
    tau: F,
    weights: &ObjectiveWeights,
) -> Result<LossReport<F>> {
    combine(scores, labels, tau, weights, Denominator::Full)
}

/// Contrastive loss over both views with positives excluded from each
/// other's denominators. `labels` must already be extended with
/// [`ObjectiveLabels::extend_for_contrast`].
pub fn contrastive_loss<F: Scalar>(
    scores: &ScoredCandidates<F>,
    labels: &ObjectiveLabels,
    tau: F,
    weights: &ObjectiveWeights,
) -> Result<LossReport<F>> {
    contrastive_loss_with(scores, labels, tau, weights, Denominator::ExcludeOtherPositives)
}

/// Contrastive loss with an explicit denominator policy; `Full` keeps every
/// positive in the denominator.
pub fn contrastive_loss_with<F: Scalar>(
    scores: &ScoredCandidates<F>,
    labels: &ObjectiveLabels,
    tau: F,
    weights: &ObjectiveWeights,
    denominator: Denominator,
) -> Result<LossReport<F>> {
    scores.validate(labels)?;
    combine(&scores.scores(), labels, tau, weights, denominator)
}

/// `(logsumexp(scores), max(scores))`.
pub fn lse_max_gap<F: Scalar>(scores: &[F]) -> Result<(F, F)> {
    if scores.is_empty() {
        return Err(Error::contract("empty score list"));
    }
    let top = max_of(scores.iter().copied());
    let sum: F = scores.iter().map(|&s| (s - top).exp()).sum();
    Ok((top + sum.ln(), top))
}

/// A scalar loss of the score vector, evaluable at any precision.
pub trait LossFunction {
    fn value<F: Scalar>(&self, scores: &[F]) -> Result<F>;

    fn value_and_grad(&self, scores: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Whether some clipped term sits close enough to its kink that a
    /// perturbation of size `eps` could cross it.
    fn near_clip_boundary(&self, _scores: &[f64], _eps: f64) -> Result<bool> {
        Ok(false)
    }
}

fn clip_margins(scores: &[f64], labels: &ObjectiveLabels, tau: f64, weights: &ObjectiveWeights, denominator: Denominator) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for o in Objective::ALL.into_iter().filter(|&o| weights.get(o) != 0.0) {
        let positives = labels.get(o);
        let n_pos = positives.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            continue;
        }
        let mask: Option<Vec<bool>> = match denominator {
            Denominator::Full => None,
            Denominator::ExcludeOtherPositives => Some(positives.iter().map(|p| !p).collect()),
        };
        let y = softmax_scores(scores, tau, mask.as_deref())?;
        out.extend(
            (0..scores.len())
                .filter(|&k| positives[k])
                .map(|k| y[k].ln() + (n_pos as f64).ln()),
        );
    }
    Ok(out)
}

/// A multi-objective loss instance with fixed labels.
#[derive(Debug, Clone)]
pub struct MultiObjectiveInstance {
    pub labels: ObjectiveLabels,
    pub tau: f64,
    pub weights: ObjectiveWeights,
}

impl LossFunction for MultiObjectiveInstance {
    fn value<F: Scalar>(&self, scores: &[F]) -> Result<F> {
        Ok(multi_objective_loss(scores, &self.labels, F::of(self.tau), &self.weights)?.total)
    }

    fn value_and_grad(&self, scores: &[f64]) -> Result<(f64, Vec<f64>)> {
        let r = multi_objective_loss(scores, &self.labels, self.tau, &self.weights)?;
        Ok((r.total, r.grad))
    }

    fn near_clip_boundary(&self, scores: &[f64], eps: f64) -> Result<bool> {
        let band = 10.0 * eps / self.tau;
        Ok(clip_margins(scores, &self.labels, self.tau, &self.weights, Denominator::Full)?
            .iter()
            .any(|m| m.abs() <= band))
    }
}

/// A contrastive loss instance; the score vector follows
/// [`ScoredCandidates::contrastive`] layout.
#[derive(Debug, Clone)]
pub struct ContrastiveInstance {
    /// Extended labels.
    pub labels: ObjectiveLabels,
    pub tau: f64,
    pub weights: ObjectiveWeights,
    pub denominator: Denominator,
}

impl ContrastiveInstance {
    fn candidates<F: Scalar>(&self, scores: &[F]) -> Result<ScoredCandidates<F>> {
        if scores.is_empty() || scores.len() % 2 == 0 {
            return Err(Error::contract("contrastive score vector must have odd length 2n+1"));
        }
        let n = (scores.len() - 1) / 2;
        Ok(ScoredCandidates::contrastive(scores[0], &scores[1..=n], &scores[n + 1..]))
    }
}

impl LossFunction for ContrastiveInstance {
    fn value<F: Scalar>(&self, scores: &[F]) -> Result<F> {
        let c = self.candidates(scores)?;
        Ok(contrastive_loss_with(&c, &self.labels, F::of(self.tau), &self.weights, self.denominator)?.total)
    }

    fn value_and_grad(&self, scores: &[f64]) -> Result<(f64, Vec<f64>)> {
        let c = self.candidates(scores)?;
        let r = contrastive_loss_with(&c, &self.labels, self.tau, &self.weights, self.denominator)?;
        Ok((r.total, r.grad))
    }

    fn near_clip_boundary(&self, scores: &[f64], eps: f64) -> Result<bool> {
        let band = 10.0 * eps / self.tau;
        Ok(clip_margins(scores, &self.labels, self.tau, &self.weights, self.denominator)?
            .iter()
            .any(|m| m.abs() <= band))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradCheck {
    Checked { max_rel_error: f64 },
    /// Point skipped because a clipped term is within reach of its kink.
    NearClipBoundary,
}

/// Central finite differences of `loss` (evaluated in quad precision) against
/// its analytic gradient. Relative error per coordinate uses the denominator
/// `max(|g|, |g_fd|, 1e-8)`.
pub fn grad_check<L: LossFunction>(loss: &L, scores: &[f64], eps: f64) -> Result<GradCheck> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::contract("epsilon must lie in (0, 1e-2]"));
    }
    if loss.near_clip_boundary(scores, eps)? {
        return Ok(GradCheck::NearClipBoundary);
    }
    let (_, analytic) = loss.value_and_grad(scores)?;
    let base: Vec<f128> = scores.iter().map(|&s| f128::of(s)).collect();
    let mut max_rel_error = 0.0f64;
    for (i, &g) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[i] += f128::of(eps);
        let mut minus = base.clone();
        minus[i] -= f128::of(eps);
        let fd = ((loss.value(&plus)? - loss.value(&minus)?) / f128::of(2.0 * eps)).as_f64();
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        max_rel_error = max_rel_error.max(rel);
    }
    Ok(GradCheck::Checked { max_rel_error })
}
