//! Balanced semantic partitioning of the training set.
//!
//! 1. Embed each sample with the frozen base network (penultimate layer).
//! 2. Run k-means on the embeddings to get `K` centers.
//! 3. List every `(sample, center)` pair with distance `-cos(h_i, a_k)`,
//!    sort ascending, and sweep: a sample still unassigned joins the pair's
//!    shard if that shard holds fewer than `t` samples.
//!
//! The sweep always places every sample when `K·t ≥ n`. If some sample
//! were left over, each of its `K` entries met a full shard; shards never
//! shrink, so all `K` would end full, i.e. `K·t ≥ n` samples placed, which
//! contradicts one of the `n` being missing.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, InstructionSample, SampleId};
use crate::error::{ApaError, Result};
use crate::numerics::{cosine_similarity, dot, norm, SeededRng, Vector};
use crate::training::BaseModel;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSample {
    pub sample_id: SampleId,
    pub embedding: Vector,
}

/// Hidden representation of `s` under the bare base model.
pub fn embed(base: &BaseModel, s: &InstructionSample) -> Result<EmbeddedSample> {
    let embedding = base.hidden(&s.features)?;
    if norm(&embedding) == 0.0 {
        return Err(ApaError::ZeroNorm);
    }
    Ok(EmbeddedSample {
        sample_id: s.id,
        embedding,
    })
}

pub fn embed_all(base: &BaseModel, data: &Dataset) -> Result<Vec<EmbeddedSample>> {
    use rayon::prelude::*;
    data.samples().par_iter().map(|s| embed(base, s)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterCenters {
    pub centers: Vec<Vector>,
}

impl ClusterCenters {
    pub fn new(centers: Vec<Vector>) -> Result<Self> {
        if centers.is_empty() {
            return Err(ApaError::Empty("no cluster centers".into()));
        }
        for (k, c) in centers.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(ApaError::NonFinite(format!("center {k}")));
            }
            if norm(c) == 0.0 {
                return Err(ApaError::Invariant(format!("center {k} has zero norm")));
            }
        }
        Ok(Self { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_euclidean(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding, Euclidean distance.
///
/// Stops after `max_iters` rounds or once assignments stop changing. Empty
/// clusters keep their previous center.
pub fn kmeans(embs: &[EmbeddedSample], k: usize, seed: u64, max_iters: usize) -> Result<ClusterCenters> {
    let n = embs.len();
    if k == 0 {
        return Err(ApaError::InvalidArgument("k must be >= 1".into()));
    }
    if k > n {
        return Err(ApaError::InvalidArgument(format!(
            "cannot form {k} clusters from {n} samples"
        )));
    }
    let points: Vec<&[f64]> = embs.iter().map(|e| &e.embedding[..]).collect();
    let mut rng = SeededRng::new(seed);

    // k-means++ seeding.
    let mut chosen = vec![false; n];
    let first = rng.below(n as u64) as usize;
    chosen[first] = true;
    let mut centers: Vec<Vec<f64>> = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // All remaining points coincide with a center; pick any unchosen one.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len() as u64) as usize]
        };
        chosen[pick] = true;
        centers.push(points[pick].to_vec());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, points[pick]));
        }
    }

    let dim = points[0].len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest_euclidean(p, &centers)).collect();
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for (c, (s, &cnt)) in centers.iter_mut().zip(sums.into_iter().zip(&counts)) {
            if cnt > 0 {
                *c = s.into_iter().map(|v| v / cnt as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest_euclidean(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    ClusterCenters::new(centers.into_iter().map(Vector).collect())
}

/// One entry of the sorted sweep list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceEntry {
    pub sample_id: SampleId,
    pub shard: usize,
    /// `-cos(h_i, a_k)`.
    pub distance: f64,
}

impl DistanceEntry {
    /// Sort key: distance, then sample id, then shard.
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.sample_id.cmp(&other.sample_id))
            .then(self.shard.cmp(&other.shard))
    }
}

/// Partition of the training ids into `K` shards of at most `t` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardAssignment {
    capacity: usize,
    shard_of: BTreeMap<SampleId, usize>,
    /// Members of each shard in ascending id order.
    shard_members: Vec<Vec<SampleId>>,
    centers: ClusterCenters,
}

#[derive(Serialize, Deserialize)]
struct AssignmentFile {
    #[serde(rename = "K")]
    k: usize,
    t: usize,
    centers: Vec<Vec<f64>>,
    shard_of: BTreeMap<SampleId, usize>,
}

impl ShardAssignment {
    /// Builds from an explicit map; members are derived and sorted.
    pub fn from_map(shard_of: BTreeMap<SampleId, usize>, capacity: usize, centers: ClusterCenters) -> Result<Self> {
        let k = centers.k();
        let mut shard_members = vec![Vec::new(); k];
        for (&id, &s) in &shard_of {
            if s >= k {
                return Err(ApaError::Invariant(format!("sample {id} mapped to shard {s} of {k}")));
            }
            shard_members[s].push(id);
        }
        if let Some((s, m)) = shard_members.iter().enumerate().find(|(_, m)| m.len() > capacity) {
            return Err(ApaError::Invariant(format!(
                "shard {s} holds {} samples, capacity {capacity}",
                m.len()
            )));
        }
        Ok(Self {
            capacity,
            shard_of,
            shard_members,
            centers,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.k()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn centers(&self) -> &ClusterCenters {
        &self.centers
    }

    pub fn shard_of(&self, id: SampleId) -> Option<usize> {
        self.shard_of.get(&id).copied()
    }

    pub fn shard_map(&self) -> &BTreeMap<SampleId, usize> {
        &self.shard_of
    }

    pub fn members(&self, shard: usize) -> &[SampleId] {
        &self.shard_members[shard]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shard_members.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.shard_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shard_of.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = AssignmentFile {
            k: self.k(),
            t: self.capacity,
            centers: self.centers.centers.iter().map(|c| c.0.clone()).collect(),
            shard_of: self.shard_of.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| ApaError::json("serialize partition", e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: AssignmentFile = serde_json::from_str(s).map_err(|e| ApaError::json("parse partition", e))?;
        let centers = ClusterCenters::new(file.centers.into_iter().map(Vector).collect())?;
        if centers.k() != file.k {
            return Err(ApaError::Invariant(format!(
                "partition declares K={} but lists {} centers",
                file.k,
                centers.k()
            )));
        }
        Self::from_map(file.shard_of, file.t, centers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| ApaError::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
        Self::from_json(&s)
    }
}

/// Default capacity: `ceil(n / K)`.
pub fn default_capacity(n: usize, k: usize) -> usize {
    n.div_ceil(k.max(1))
}

/// All `(sample, shard, -cos)` entries in sweep order.
pub fn sorted_distances(embs: &[EmbeddedSample], centers: &ClusterCenters) -> Result<Vec<DistanceEntry>> {
    let mut entries = Vec::with_capacity(embs.len() * centers.k());
    for e in embs {
        for (k, c) in centers.centers.iter().enumerate() {
            entries.push(DistanceEntry {
                sample_id: e.sample_id,
                shard: k,
                distance: -cosine_similarity(&e.embedding, c)?,
            });
        }
    }
    entries.sort_by(DistanceEntry::cmp_key);
    Ok(entries)
}

/// Greedy capacity-constrained assignment over the sorted distance list.
pub fn balanced_assign(embs: &[EmbeddedSample], centers: &ClusterCenters, capacity: usize) -> Result<ShardAssignment> {
    let k = centers.k();
    let n = embs.len();
    if k.checked_mul(capacity).is_none_or(|cap| cap < n) {
        return Err(ApaError::InfeasibleCapacity {
            shards: k,
            capacity,
            samples: n,
        });
    }
    let entries = sorted_distances(embs, centers)?;
    let mut sizes = vec![0usize; k];
    let mut shard_of = BTreeMap::new();
    for e in entries {
        if sizes[e.shard] < capacity && !shard_of.contains_key(&e.sample_id) {
            shard_of.insert(e.sample_id, e.shard);
            sizes[e.shard] += 1;
            if shard_of.len() == n {
                break;
            }
        }
    }
    if shard_of.len() != n {
        return Err(ApaError::Invariant(format!(
            "sweep placed {} of {n} samples (duplicate ids?)",
            shard_of.len()
        )));
    }
    ShardAssignment::from_map(shard_of, capacity, centers.clone())
}

/// Nearest center by cosine distance, ignoring capacity. Ties go to the
/// lowest shard index.
pub fn assign_single(emb: &EmbeddedSample, assignment: &ShardAssignment) -> Result<usize> {
    nearest_by_cosine(&emb.embedding, assignment.centers())
}

fn nearest_by_cosine(v: &[f64], centers: &ClusterCenters) -> Result<usize> {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.centers.iter().enumerate() {
        let d = -cosine_similarity(v, c)?;
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(best)
}

/// Random partition for ablations: seeded shuffle, then round-robin. Centers
/// are the mean embeddings of each shard.
pub fn random_assign(embs: &[EmbeddedSample], k: usize, capacity: usize, seed: u64) -> Result<ShardAssignment> {
    let n = embs.len();
    if k == 0 || k.checked_mul(capacity).is_none_or(|cap| cap < n) {
        return Err(ApaError::InfeasibleCapacity {
            shards: k,
            capacity,
            samples: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let dim = embs.first().map_or(0, |e| e.embedding.len());
    let mut sums = vec![vec![0.0; dim]; k];
    let mut shard_of = BTreeMap::new();
    for (i, &idx) in order.iter().enumerate() {
        let s = i % k;
        shard_of.insert(embs[idx].sample_id, s);
        for (acc, v) in sums[s].iter_mut().zip(embs[idx].embedding.iter()) {
            *acc += v;
        }
    }
    let centers = ClusterCenters::new(sums.into_iter().map(Vector).collect())?;
    ShardAssignment::from_map(shard_of, capacity, centers)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStrategy {
    #[default]
    Semantic,
    Random,
}

/// Embeddings in, shard assignment out.
pub fn partition(
    embs: &[EmbeddedSample],
    k: usize,
    capacity: usize,
    strategy: PartitionStrategy,
    seed: u64,
    max_iters: usize,
) -> Result<ShardAssignment> {
    match strategy {
        PartitionStrategy::Semantic => {
            let centers = kmeans(embs, k, seed, max_iters)?;
            balanced_assign(embs, &centers, capacity)
        }
        PartitionStrategy::Random => random_assign(embs, k, capacity, seed),
    }
}

/// Mean pairwise cosine within shards and across shards.
pub fn shard_cohesion(embs: &[EmbeddedSample], assignment: &ShardAssignment) -> Result<(f64, f64)> {
    let units: Vec<(usize, Vector)> = embs
        .iter()
        .map(|e| {
            let s = assignment
                .shard_of(e.sample_id)
                .ok_or(ApaError::UnknownId(e.sample_id))?;
            Ok((s, e.embedding.normalized()?))
        })
        .collect::<Result<_>>()?;
    let (mut within, mut nw, mut across, mut na) = (0.0, 0u64, 0.0, 0u64);
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            let c = dot(&units[i].1, &units[j].1);
            if units[i].0 == units[j].0 {
                within += c;
                nw += 1;
            } else {
                across += c;
                na += 1;
            }
        }
    }
    Ok((within / nw.max(1) as f64, across / na.max(1) as f64))
}
