//! Shard registry and exact deletion.
//!
//! The registry owns the frozen partition, the current member list of every
//! shard, one trained adapter per shard and the validation cache. A deletion
//! request tombstones the ids, retrains only the shards that held them (from
//! scratch, same derived seed) and refreshes those cache rows. Everything
//! else is left untouched, bit for bit.
//!
//! The partition is never recomputed. Surviving samples keep their shard, so
//! the retrained adapter equals what a fresh build would produce on the same
//! partition without the removed data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, Adapter};
use crate::dataset::{load_samples, Dataset, Format, SampleId};
use crate::error::{ApaError, Result};
use crate::partition::{default_capacity, embed_all, partition, PartitionStrategy, ShardAssignment};
use crate::training::{train_adapter, train_shard, BaseModel, TrainConfig};
use crate::weighting::{build_cache, refresh_row, ValidationCache, ValidationIndex};

pub const PARTITION_FILE: &str = "partition.json";
pub const BASE_FILE: &str = "base.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const TRAIN_DATA_FILE: &str = "train.jsonl";
pub const VALID_DATA_FILE: &str = "valid.jsonl";
pub const CACHE_FILE: &str = "cache.json";
pub const TOMBSTONE_FILE: &str = "tombstones.log";
pub const ADAPTER_DIR: &str = "adapters";

pub fn adapter_file(shard: usize) -> String {
    format!("shard_{shard}.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub shards: usize,
    /// Per-shard capacity; `ceil(n / K)` when absent.
    pub capacity: Option<usize>,
    pub strategy: PartitionStrategy,
    pub seed: u64,
    pub kmeans_iters: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            shards: 4,
            capacity: None,
            strategy: PartitionStrategy::Semantic,
            seed: 0,
            kmeans_iters: 100,
        }
    }
}

impl PartitionConfig {
    pub fn capacity_for(&self, n: usize) -> usize {
        self.capacity.unwrap_or_else(|| default_capacity(n, self.shards))
    }
}

/// Ids to erase, deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlearnRequest {
    removed_ids: BTreeSet<SampleId>,
}

impl UnlearnRequest {
    pub fn new(ids: impl IntoIterator<Item = SampleId>) -> Result<Self> {
        let removed_ids: BTreeSet<_> = ids.into_iter().collect();
        if removed_ids.is_empty() {
            return Err(ApaError::Empty("unlearn request names no samples".into()));
        }
        Ok(Self { removed_ids })
    }

    pub fn ids(&self) -> &BTreeSet<SampleId> {
        &self.removed_ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnlearnReport {
    pub affected_shards: BTreeSet<usize>,
    pub retrain_seconds: BTreeMap<usize, f64>,
    pub total_seconds: f64,
    pub samples_removed: usize,
}

/// What readers see: adapters and the cache that scores them.
#[derive(Clone, Debug, PartialEq)]
pub struct ServingState {
    pub adapters: Vec<Adapter>,
    pub cache: ValidationCache,
}

#[derive(Clone, Debug)]
pub struct Registry {
    base: Arc<BaseModel>,
    train: Arc<Dataset>,
    valid: Arc<Dataset>,
    valid_index: Arc<ValidationIndex>,
    assignment: ShardAssignment,
    shard_data: Vec<Vec<SampleId>>,
    state: Arc<ServingState>,
    train_cfg: TrainConfig,
    tombstones: BTreeSet<SampleId>,
    parallel: bool,
}

/// Adapter for shard `k` trained on `ids`, in order. An emptied shard gets
/// its untrained initial adapter, which carries no data at all.
pub fn retrain_shard(
    base: &BaseModel,
    train: &Dataset,
    ids: &[SampleId],
    cfg: &TrainConfig,
    shard: usize,
) -> Result<Adapter> {
    if ids.is_empty() {
        let shard_cfg = TrainConfig {
            seed: cfg.shard_seed(shard),
            learning_rate: 0.0,
            ..cfg.clone()
        };
        let mut rng = crate::numerics::SeededRng::new(shard_cfg.seed);
        let mut ad = init_adapter(&base.adapted_shapes(), cfg.rank, cfg.init_stddev, rng.next_u64())?;
        ad.seed = shard_cfg.seed;
        ad.shard = Some(shard);
        return Ok(ad);
    }
    train_shard(base, &train.subset(ids)?, cfg, shard)
}

impl Registry {
    /// Embeds, partitions, trains every shard and builds the cache.
    pub fn build(
        train: Dataset,
        valid: Dataset,
        base: BaseModel,
        train_cfg: TrainConfig,
        part: &PartitionConfig,
    ) -> Result<Registry> {
        if train.is_empty() {
            return Err(ApaError::Empty("training set".into()));
        }
        let embs = embed_all(&base, &train)?;
        let assignment = partition(
            &embs,
            part.shards,
            part.capacity_for(train.len()),
            part.strategy,
            part.seed,
            part.kmeans_iters,
        )?;
        Registry::train(train, valid, base, assignment, train_cfg, BTreeSet::new())
    }

    /// Trains adapters for an existing partition, skipping tombstoned ids.
    pub fn train(
        train: Dataset,
        valid: Dataset,
        base: BaseModel,
        assignment: ShardAssignment,
        train_cfg: TrainConfig,
        tombstones: BTreeSet<SampleId>,
    ) -> Result<Registry> {
        train_cfg.validate()?;
        for id in assignment.shard_map().keys() {
            if !train.contains(*id) {
                return Err(ApaError::UnknownId(*id));
            }
        }
        let shard_data: Vec<Vec<SampleId>> = (0..assignment.k())
            .map(|k| {
                assignment
                    .members(k)
                    .iter()
                    .copied()
                    .filter(|id| !tombstones.contains(id))
                    .collect()
            })
            .collect();
        let adapters = shard_data
            .par_iter()
            .enumerate()
            .map(|(k, ids)| retrain_shard(&base, &train, ids, &train_cfg, k))
            .collect::<Result<Vec<_>>>()?;
        Registry::from_parts(train, valid, base, assignment, train_cfg, tombstones, adapters, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        train: Dataset,
        valid: Dataset,
        base: BaseModel,
        assignment: ShardAssignment,
        train_cfg: TrainConfig,
        tombstones: BTreeSet<SampleId>,
        adapters: Vec<Adapter>,
        cache: Option<ValidationCache>,
    ) -> Result<Registry> {
        if adapters.len() != assignment.k() {
            return Err(ApaError::Invariant(format!(
                "{} adapters for {} shards",
                adapters.len(),
                assignment.k()
            )));
        }
        let cache = match cache {
            Some(c) => c,
            None => build_cache(&base, &adapters, &valid)?,
        };
        let valid_index = ValidationIndex::from_dataset(&base, &valid)?;
        let shard_data = (0..assignment.k())
            .map(|k| {
                assignment
                    .members(k)
                    .iter()
                    .copied()
                    .filter(|id| !tombstones.contains(id))
                    .collect()
            })
            .collect();
        Ok(Registry {
            base: Arc::new(base),
            train: Arc::new(train),
            valid: Arc::new(valid),
            valid_index: Arc::new(valid_index),
            assignment,
            shard_data,
            state: Arc::new(ServingState { adapters, cache }),
            train_cfg,
            tombstones,
            parallel: true,
        })
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn valid_set(&self) -> &Dataset {
        &self.valid
    }

    pub fn valid_index(&self) -> &ValidationIndex {
        &self.valid_index
    }

    pub fn assignment(&self) -> &ShardAssignment {
        &self.assignment
    }

    pub fn shard_data(&self, k: usize) -> &[SampleId] {
        &self.shard_data[k]
    }

    pub fn k(&self) -> usize {
        self.assignment.k()
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.state.adapters
    }

    pub fn cache(&self) -> &ValidationCache {
        &self.state.cache
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    pub fn tombstones(&self) -> &BTreeSet<SampleId> {
        &self.tombstones
    }

    /// Cheap handle to the current adapters and cache. Stays valid (and
    /// unchanged) across later unlearning.
    pub fn snapshot(&self) -> Arc<ServingState> {
        Arc::clone(&self.state)
    }

    /// Retrain affected shards concurrently (default) or one after another.
    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    /// Ids still used for training, across all shards.
    pub fn surviving_ids(&self) -> Vec<SampleId> {
        self.train
            .ids()
            .into_iter()
            .filter(|id| self.assignment.shard_of(*id).is_some() && !self.tombstones.contains(id))
            .collect()
    }

    fn check_request(&self, req: &UnlearnRequest) -> Result<()> {
        for &id in req.ids() {
            if self.tombstones.contains(&id) {
                return Err(ApaError::AlreadyRemoved(id));
            }
            if self.valid.contains(id) {
                return Err(ApaError::ValidationId(id));
            }
            if self.assignment.shard_of(id).is_none() {
                return Err(ApaError::UnknownId(id));
            }
        }
        Ok(())
    }

    /// Removes the requested samples and retrains each affected shard once.
    pub fn unlearn(&mut self, req: &UnlearnRequest) -> Result<UnlearnReport> {
        let start = Instant::now();
        self.check_request(req)?;
        let affected: BTreeSet<usize> = req
            .ids()
            .iter()
            .map(|id| self.assignment.shard_of(*id).expect("checked above"))
            .collect();

        let mut shard_data = self.shard_data.clone();
        for &k in &affected {
            shard_data[k].retain(|id| !req.ids().contains(id));
        }

        let retrain = |k: usize| -> Result<(usize, Adapter, Duration)> {
            let t = Instant::now();
            let ad = retrain_shard(&self.base, &self.train, &shard_data[k], &self.train_cfg, k)?;
            Ok((k, ad, t.elapsed()))
        };
        let retrained: Vec<(usize, Adapter, Duration)> = if self.parallel {
            affected.par_iter().map(|&k| retrain(k)).collect::<Result<_>>()?
        } else {
            affected.iter().map(|&k| retrain(k)).collect::<Result<_>>()?
        };

        let mut next = ServingState::clone(&self.state);
        let mut retrain_seconds = BTreeMap::new();
        for (k, ad, took) in retrained {
            next.adapters[k] = ad;
            next.cache.mark_dirty(k);
            let t = Instant::now();
            refresh_row(&mut next.cache, k, &self.base, &next.adapters[k], &self.valid)?;
            retrain_seconds.insert(k, (took + t.elapsed()).as_secs_f64());
        }
        if !next.cache.is_fresh() {
            return Err(ApaError::Invariant("cache left stale after unlearning".into()));
        }

        self.tombstones.extend(req.ids().iter().copied());
        self.shard_data = shard_data;
        self.state = Arc::new(next);
        Ok(UnlearnReport {
            affected_shards: affected,
            retrain_seconds,
            total_seconds: start.elapsed().as_secs_f64(),
            samples_removed: req.ids().len(),
        })
    }

    #[cfg(test)]
    pub(crate) fn replace_adapters_for_test(&mut self, adapters: Vec<Adapter>) {
        let cache = build_cache(&self.base, &adapters, &self.valid).unwrap();
        self.state = Arc::new(ServingState { adapters, cache });
    }

    #[cfg(test)]
    pub(crate) fn mark_dirty_for_test(&mut self, k: usize) {
        let mut next = ServingState::clone(&self.state);
        next.cache.mark_dirty(k);
        self.state = Arc::new(next);
    }

    /// Writes the whole registry directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |what: &Path, e| ApaError::io(format!("write {}", what.display()), e);
        fs::create_dir_all(dir.join(ADAPTER_DIR)).map_err(|e| io(dir, e))?;
        self.assignment.save(&dir.join(PARTITION_FILE))?;
        self.base.save_json(&dir.join(BASE_FILE))?;
        save_train_config(&self.train_cfg, &dir.join(TRAIN_CONFIG_FILE))?;
        self.train.write_jsonl(&dir.join(TRAIN_DATA_FILE))?;
        self.valid.write_jsonl(&dir.join(VALID_DATA_FILE))?;
        for (k, ad) in self.adapters().iter().enumerate() {
            ad.save_json(&dir.join(ADAPTER_DIR).join(adapter_file(k)))?;
        }
        self.cache().save(&dir.join(CACHE_FILE))?;
        let tomb = dir.join(TOMBSTONE_FILE);
        let body: String = self.tombstones.iter().map(|id| format!("{id}\n")).collect();
        fs::write(&tomb, body).map_err(|e| io(&tomb, e))
    }

    /// Persists the outcome of one [`Registry::unlearn`]: rewritten adapters
    /// and cache, and the removed ids appended to the tombstone log.
    pub fn persist_unlearn(&self, dir: &Path, req: &UnlearnRequest, report: &UnlearnReport) -> Result<()> {
        for &k in &report.affected_shards {
            self.adapters()[k].save_json(&dir.join(ADAPTER_DIR).join(adapter_file(k)))?;
        }
        self.cache().save(&dir.join(CACHE_FILE))?;
        append_tombstones(&dir.join(TOMBSTONE_FILE), req.ids())
    }

    pub fn load(dir: &Path) -> Result<Registry> {
        let assignment = ShardAssignment::load(&dir.join(PARTITION_FILE))?;
        let base = BaseModel::load_json(&dir.join(BASE_FILE))?;
        let train_cfg = load_train_config(&dir.join(TRAIN_CONFIG_FILE))?;
        let train = load_samples(&dir.join(TRAIN_DATA_FILE), Format::Jsonl, 0.0)?;
        let valid = load_samples(&dir.join(VALID_DATA_FILE), Format::Jsonl, 0.0)?;
        let adapters = (0..assignment.k())
            .map(|k| Adapter::load_json(&dir.join(ADAPTER_DIR).join(adapter_file(k))))
            .collect::<Result<Vec<_>>>()?;
        let cache = ValidationCache::load(&dir.join(CACHE_FILE))?;
        let tombstones = read_tombstones(&dir.join(TOMBSTONE_FILE))?;
        Registry::from_parts(
            train,
            valid,
            base,
            assignment,
            train_cfg,
            tombstones,
            adapters,
            Some(cache),
        )
    }
}

pub fn save_train_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(cfg).map_err(|e| ApaError::json("serialize train config", e))?;
    fs::write(path, s).map_err(|e| ApaError::io(format!("write {}", path.display()), e))
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let s = fs::read_to_string(path).map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
    serde_json::from_str(&s).map_err(|e| ApaError::json(format!("parse {}", path.display()), e))
}

pub fn append_tombstones(path: &Path, ids: &BTreeSet<SampleId>) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ApaError::io(format!("open {}", path.display()), e))?;
    for id in ids {
        writeln!(f, "{id}").map_err(|e| ApaError::io(format!("append {}", path.display()), e))?;
    }
    Ok(())
}

pub fn read_tombstones(path: &Path) -> Result<BTreeSet<SampleId>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let s = fs::read_to_string(path).map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|e| ApaError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("{e}"),
            })
        })
        .collect()
}

/// Retrains the shards that held `removed` from scratch, straight from the
/// frozen partition and the registry's tombstones, and returns the largest
/// absolute deviation from the registry's adapters and cache rows. An empty
/// `removed` checks every shard.
///
/// Zero means the registry is exactly what training without the removed
/// data produces.
pub fn exactness_oracle(
    reg: &Registry,
    train: &Dataset,
    valid: &Dataset,
    base: &BaseModel,
    cfg: &TrainConfig,
    removed: &[SampleId],
) -> Result<f64> {
    let assignment = reg.assignment();
    let shards: BTreeSet<usize> = if removed.is_empty() {
        (0..assignment.k()).collect()
    } else {
        removed
            .iter()
            .map(|id| assignment.shard_of(*id).ok_or(ApaError::UnknownId(*id)))
            .collect::<Result<_>>()?
    };
    let mut worst: f64 = 0.0;
    for k in shards {
        let ids: Vec<SampleId> = assignment
            .members(k)
            .iter()
            .copied()
            .filter(|id| !reg.tombstones().contains(id) && !removed.contains(id))
            .collect();
        let fresh = retrain_shard(base, train, &ids, cfg, k)?;
        worst = worst.max(fresh.max_abs_diff(&reg.adapters()[k]));
        let row = build_cache(base, std::slice::from_ref(&fresh), valid)?;
        for (a, b) in row.row(0).iter().zip(reg.cache().row(k)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchUnlearn {
    pub t_apa: f64,
    pub t_full: f64,
    pub speedup: f64,
    pub report: UnlearnReport,
}

/// Times `reg.unlearn(req)` (sequential shard retraining) against training
/// one adapter on all surviving samples with `full_cfg`.
pub fn bench_unlearn(reg: &mut Registry, req: &UnlearnRequest, full_cfg: &TrainConfig) -> Result<BenchUnlearn> {
    let was_parallel = reg.parallel;
    reg.set_parallel(false);
    let start = Instant::now();
    let report = reg.unlearn(req);
    let t_apa = start.elapsed().as_secs_f64();
    reg.set_parallel(was_parallel);
    let report = report?;

    let survivors = reg.train.subset(&reg.surviving_ids())?;
    let start = Instant::now();
    let full = train_adapter(&reg.base, &survivors, full_cfg)?;
    let _ = build_cache(&reg.base, std::slice::from_ref(&full), &reg.valid)?;
    let t_full = start.elapsed().as_secs_f64();
    Ok(BenchUnlearn {
        t_apa,
        t_full,
        speedup: t_full / t_apa,
        report,
    })
}
