//! Sample-adaptive aggregation weights.
//!
//! For a query, find its `n` most similar validation samples (cosine over
//! base-model embeddings), average each adapter's cached loss over them, and
//! turn the averages into weights with `ω_k ∝ exp(-τ · error_k)`.
//!
//! Losses come from a [`ValidationCache`] computed once after training.
//! Retraining an adapter invalidates exactly its row; reading a stale row is
//! an error rather than a silent use of old weights.

use std::fs;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, WeightVector};
use crate::dataset::{Dataset, SampleId};
use crate::error::{ApaError, Result};
use crate::numerics::{dot, norm, softmax_stable, Matrix, Vector};
use crate::partition::{embed_all, ClusterCenters};
use crate::training::{bce_loss, model_forward, BaseModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationLevel {
    /// Weighted sums of `B` and `A` separately.
    #[default]
    Decomposition,
    /// Weighted sum of the dense products `B_k A_k`.
    Nondecomposition,
    /// Concatenated rank-`K·r` adapter; same outputs as non-decomposition.
    Concat,
}

/// How the per-sample weights are chosen. `Adaptive` is the method proper;
/// the others are ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingStrategy {
    #[default]
    Adaptive,
    /// Uniform `1/K`.
    Average,
    /// All weight on the adaptive argmax.
    Major,
    /// `softmax(τ · cos(query, center_k))`.
    Semantic,
}

impl WeightingStrategy {
    pub const ALL: [WeightingStrategy; 4] = [
        WeightingStrategy::Adaptive,
        WeightingStrategy::Average,
        WeightingStrategy::Major,
        WeightingStrategy::Semantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightingStrategy::Adaptive => "adaptive",
            WeightingStrategy::Average => "average",
            WeightingStrategy::Major => "major",
            WeightingStrategy::Semantic => "semantic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub tau: f64,
    pub neighbors: usize,
    pub level: AggregationLevel,
    pub strategy: WeightingStrategy,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            tau: 1000.0,
            neighbors: 20,
            level: AggregationLevel::Decomposition,
            strategy: WeightingStrategy::Adaptive,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(ApaError::Config {
                field: "aggregation.tau".into(),
                message: "must be finite and >= 0".into(),
            });
        }
        if self.neighbors == 0 {
            return Err(ApaError::Config {
                field: "aggregation.neighbors".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// `loss[k][i]` = BCE of adapter `k` on validation sample `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationCache {
    loss: Matrix,
    valid_ids: Vec<SampleId>,
    dirty: Vec<bool>,
}

fn loss_row(base: &BaseModel, adapter: &Adapter, valid: &Dataset) -> Result<Vec<f64>> {
    valid
        .iter()
        .map(|s| Ok(bce_loss(model_forward(base, Some(adapter), &s.features)?, s.label)))
        .collect()
}

/// Losses of every adapter on every validation sample.
pub fn build_cache(base: &BaseModel, adapters: &[Adapter], valid: &Dataset) -> Result<ValidationCache> {
    if valid.is_empty() {
        return Err(ApaError::Empty("validation set".into()));
    }
    if adapters.is_empty() {
        return Err(ApaError::Empty("no adapters to cache".into()));
    }
    let rows: Vec<Vec<f64>> = adapters
        .par_iter()
        .map(|a| loss_row(base, a, valid))
        .collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().collect();
    Ok(ValidationCache {
        loss: Matrix::from_vec(adapters.len(), valid.len(), data)?,
        valid_ids: valid.ids(),
        dirty: vec![false; adapters.len()],
    })
}

impl ValidationCache {
    pub fn k(&self) -> usize {
        self.loss.rows()
    }

    pub fn valid_ids(&self) -> &[SampleId] {
        &self.valid_ids
    }

    pub fn losses(&self) -> &Matrix {
        &self.loss
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.loss.row(k)
    }

    pub fn is_dirty(&self, k: usize) -> bool {
        self.dirty[k]
    }

    pub fn is_fresh(&self) -> bool {
        !self.dirty.iter().any(|&d| d)
    }

    /// Flags row `k` as stale; it stays unusable until [`refresh_row`].
    pub fn mark_dirty(&mut self, k: usize) {
        self.dirty[k] = true;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| ApaError::json("serialize cache", e))?;
        fs::write(path, s).map_err(|e| ApaError::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
        let c: ValidationCache =
            serde_json::from_str(&s).map_err(|e| ApaError::json(format!("parse {}", path.display()), e))?;
        if c.loss.cols() != c.valid_ids.len() || c.dirty.len() != c.loss.rows() {
            return Err(ApaError::Invariant("cache dimensions disagree".into()));
        }
        Ok(c)
    }
}

/// Recomputes row `k` in place and clears its dirty flag.
pub fn refresh_row(
    cache: &mut ValidationCache,
    k: usize,
    base: &BaseModel,
    adapter: &Adapter,
    valid: &Dataset,
) -> Result<()> {
    if k >= cache.k() {
        return Err(ApaError::InvalidArgument(format!("row {k} of {}", cache.k())));
    }
    if valid.ids() != cache.valid_ids {
        return Err(ApaError::Invariant("validation set changed under the cache".into()));
    }
    let row = loss_row(base, adapter, valid)?;
    let cols = cache.loss.cols();
    cache.loss.data_mut()[k * cols..(k + 1) * cols].copy_from_slice(&row);
    cache.dirty[k] = false;
    Ok(())
}

/// Unit-normalized validation embeddings for neighbor search.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationIndex {
    ids: Vec<SampleId>,
    units: Vec<Vector>,
}

impl ValidationIndex {
    pub fn new(ids: Vec<SampleId>, embeddings: Vec<Vector>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(ApaError::Shape(format!(
                "{} ids for {} embeddings",
                ids.len(),
                embeddings.len()
            )));
        }
        let units = embeddings.iter().map(Vector::normalized).collect::<Result<_>>()?;
        Ok(Self { ids, units })
    }

    pub fn from_dataset(base: &BaseModel, valid: &Dataset) -> Result<Self> {
        let embs = embed_all(base, valid)?;
        let ids = embs.iter().map(|e| e.sample_id).collect();
        Self::new(ids, embs.into_iter().map(|e| e.embedding).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }
}

/// Top-`n` validation samples by cosine similarity to a query.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    /// Most similar first.
    pub ids: Vec<SampleId>,
    /// Column of each id in the validation cache.
    pub positions: Vec<usize>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Nearest validation samples; ties go to the smaller id. `n` above the
/// index size is clamped with a warning.
pub fn neighbors(query: &[f64], index: &ValidationIndex, n: usize) -> Result<NeighborSet> {
    if index.is_empty() {
        return Err(ApaError::Empty("validation index".into()));
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(ApaError::ZeroNorm);
    }
    let n = if n > index.len() {
        warn!(
            "neighbor count {n} exceeds {} validation samples; clamping",
            index.len()
        );
        index.len()
    } else {
        n
    };
    let mut scored: Vec<(f64, SampleId, usize)> = index
        .units
        .iter()
        .enumerate()
        .map(|(pos, u)| (dot(query, u) / qn, index.ids[pos], pos))
        .collect();
    let order = |a: &(f64, SampleId, usize), b: &(f64, SampleId, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, order);
        scored.truncate(n);
    }
    scored.sort_unstable_by(order);
    Ok(NeighborSet {
        ids: scored.iter().map(|s| s.1).collect(),
        positions: scored.iter().map(|s| s.2).collect(),
    })
}

/// Mean cached loss of each adapter over the neighbor set.
pub fn adapter_errors(cache: &ValidationCache, nbrs: &NeighborSet) -> Result<Vector> {
    if let Some(k) = cache.dirty.iter().position(|&d| d) {
        return Err(ApaError::StaleCache(k));
    }
    if nbrs.is_empty() {
        return Err(ApaError::Empty("neighbor set".into()));
    }
    let inv = 1.0 / nbrs.len() as f64;
    let errors = (0..cache.k())
        .map(|k| {
            let row = cache.row(k);
            let mut total = 0.0;
            for &p in &nbrs.positions {
                total += row[p];
            }
            total * inv
        })
        .collect();
    Ok(Vector(errors))
}

/// `ω = softmax(-τ · errors)`.
pub fn attention_weights(errors: &[f64], tau: f64) -> Result<WeightVector> {
    let neg: Vec<f64> = errors.iter().map(|e| -e).collect();
    let w = softmax_stable(&neg, tau)?;
    WeightVector::new(w.into_inner())
}

/// `ω = softmax(τ · cos(query, center_k))`.
pub fn semantic_weights(query: &[f64], centers: &ClusterCenters, tau: f64) -> Result<WeightVector> {
    let sims = centers
        .centers
        .iter()
        .map(|c| crate::numerics::cosine_similarity(query, c))
        .collect::<Result<Vec<_>>>()?;
    WeightVector::new(softmax_stable(&sims, tau)?.into_inner())
}
