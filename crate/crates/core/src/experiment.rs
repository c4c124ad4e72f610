//! Config-driven pipeline: data, partition, training, evaluation,
//! unlearning and benchmarks, with JSON and CSV reports.
//!
//! All artifacts live under `output_dir`:
//!
//! ```text
//! data/{train,valid,test}.jsonl
//! registry/            partition, base model, adapters, cache, tombstones
//! report.json          metrics only, byte-stable for a fixed config
//! predictions.csv      id, score, label, method
//! timings.csv          method, phase, seconds
//! unlearn.json         last unlearning outcome
//! bench.json           benchmark ratios and the shard-size sweep
//! ```

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_samples, split, Dataset, Format, SampleId, SplitSpec, SynthSpec};
use crate::error::{ApaError, Result};
use crate::numerics::SeededRng;
use crate::partition::{embed_all, partition, ShardAssignment};
use crate::serving::{
    auc_of, bench_inference, predict_sisa, predict_with, ApaPredictor, InferenceTimings, Method, Prediction,
};
use crate::training::{train_adapter, Architecture, BaseModel, TrainConfig};
use crate::unlearning::{
    bench_unlearn, read_tombstones, retrain_shard, PartitionConfig, Registry, UnlearnRequest, BASE_FILE,
    PARTITION_FILE, TOMBSTONE_FILE, TRAIN_DATA_FILE, VALID_DATA_FILE,
};
use crate::weighting::{AggregationConfig, WeightingStrategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Generate data instead of reading files.
    pub synth: Option<SynthSpec>,
    /// How generated data is split.
    pub split: SplitSpec,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// `jsonl` or `csv`; guessed from each extension when absent.
    pub format: Option<String>,
    /// Ratings strictly above this count as positive.
    pub rating_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: Some(SynthSpec::new(1536, 32, 4, 0.3, 0)),
            split: SplitSpec {
                train_size: 1024,
                valid_size: 256,
                test_size: 256,
                seed: 0,
            },
            train: None,
            valid: None,
            test: None,
            format: None,
            rating_threshold: 3.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub architecture: Architecture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Also train one adapter on all surviving data.
    pub retrain_baseline: bool,
    /// Score every weighting strategy, not just the configured one.
    pub ablations: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrain_baseline: true,
            ablations: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Test samples scored one at a time per inference path.
    pub inference_samples: usize,
    pub repeats: usize,
    /// Shard capacities for the sweep; empty skips it.
    pub shard_sizes: Vec<usize>,
    /// Picks the sample removed in the unlearning benchmarks.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            inference_samples: 500,
            repeats: 3,
            shard_sizes: vec![512, 256, 128],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub train: TrainConfig,
    pub aggregation: AggregationConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("apa-out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            partition: PartitionConfig::default(),
            train: TrainConfig::default(),
            aggregation: AggregationConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> ApaError {
    ApaError::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML. Unknown keys and type errors name the offending field.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(s).map_err(|e| config_err("<document>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().message().to_string())
        })
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&s)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.valid, &mut cfg.data.test]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| ApaError::InvalidArgument(format!("serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.aggregation.validate()?;
        if self.partition.shards == 0 {
            return Err(config_err("partition.shards", "must be >= 1"));
        }
        if self.partition.capacity == Some(0) {
            return Err(config_err("partition.capacity", "must be >= 1"));
        }
        let arch = &self.model.architecture;
        if arch.hidden.is_empty() || arch.hidden.contains(&0) || arch.input_dim == 0 {
            return Err(config_err(
                "model.architecture",
                "needs input_dim > 0 and nonzero hidden widths",
            ));
        }
        let files = [
            ("data.train", &self.data.train),
            ("data.valid", &self.data.valid),
            ("data.test", &self.data.test),
        ];
        let any_file = files.iter().any(|(_, p)| p.is_some());
        if any_file {
            for (field, p) in files {
                match p {
                    None => {
                        return Err(config_err(
                            field,
                            "all of train, valid and test are required with file input",
                        ))
                    }
                    Some(p) if !p.exists() => return Err(config_err(field, format!("{} does not exist", p.display()))),
                    _ => {}
                }
            }
            if let Some(f) = &self.data.format {
                f.parse::<Format>()
                    .map_err(|_| config_err("data.format", format!("unknown format `{f}`")))?;
            }
        } else {
            let Some(synth) = &self.data.synth else {
                return Err(config_err("data", "give either [data.synth] or train/valid/test paths"));
            };
            if synth.dim != arch.input_dim {
                return Err(config_err(
                    "data.synth.dim",
                    format!(
                        "is {} but model.architecture.input_dim is {}",
                        synth.dim, arch.input_dim
                    ),
                ));
            }
            let s = self.data.split;
            if s.train_size + s.valid_size + s.test_size > synth.n {
                return Err(config_err(
                    "data.split",
                    format!("needs more than data.synth.n = {}", synth.n),
                ));
            }
        }
        if self.bench.repeats == 0 {
            return Err(config_err("bench.repeats", "must be >= 1"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.output_dir.join("registry")
    }
}

/// A pipeline step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Partition,
    Train,
    Eval,
    /// Score `input` (the stored test split when absent) with the
    /// configured aggregation.
    Predict {
        input: Option<PathBuf>,
    },
    Unlearn {
        ids: Vec<SampleId>,
    },
    Bench,
    /// Synth (or load), partition, train and eval in one go.
    Run,
}

/// Outcome of one [`run_experiment`] call, for the CLI to summarize.
#[derive(Clone, Debug, Serialize)]
pub enum Outcome {
    Data { train: usize, valid: usize, test: usize },
    Partitioned { sizes: Vec<usize> },
    Trained { shards: usize },
    Evaluated(EvalReport),
    Predicted { count: usize, path: PathBuf },
    Unlearned(UnlearnSummary),
    Benchmarked(BenchReport),
}

pub fn run_experiment(cfg: &ExperimentConfig, command: &Command) -> Result<Outcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| ApaError::io(format!("create {}", cfg.output_dir.display()), e))?;
    match command {
        Command::Synth => {
            let (train, valid, test) = materialize_data(cfg)?;
            Ok(Outcome::Data {
                train: train.len(),
                valid: valid.len(),
                test: test.len(),
            })
        }
        Command::Partition => run_partition(cfg).map(|a| Outcome::Partitioned { sizes: a.sizes() }),
        Command::Train => run_train(cfg).map(|r| Outcome::Trained { shards: r.k() }),
        Command::Eval => run_eval(cfg).map(Outcome::Evaluated),
        Command::Predict { input } => run_predict(cfg, input.as_deref()),
        Command::Unlearn { ids } => run_unlearn(cfg, ids).map(Outcome::Unlearned),
        Command::Bench => run_bench(cfg).map(Outcome::Benchmarked),
        Command::Run => {
            materialize_data(cfg)?;
            run_partition(cfg)?;
            run_train(cfg)?;
            run_eval(cfg).map(Outcome::Evaluated)
        }
    }
}

/// Train, validation and test sets per the config, generated or read.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let d = &cfg.data;
    if let (Some(tr), Some(va), Some(te)) = (&d.train, &d.valid, &d.test) {
        let fmt = |p: &Path| match &d.format {
            Some(f) => f.parse::<Format>(),
            None => Ok(Format::from_path(p)),
        };
        let load = |p: &PathBuf| load_samples(p, fmt(p)?, d.rating_threshold);
        let (train, valid, test) = (load(tr)?, load(va)?, load(te)?);
        let train_ids: BTreeSet<_> = train.ids().into_iter().collect();
        for other in [&valid, &test] {
            if let Some(id) = other.ids().into_iter().find(|id| train_ids.contains(id)) {
                return Err(ApaError::InvalidArgument(format!(
                    "sample id {id} appears in the training set and another split"
                )));
            }
        }
        return Ok((train, valid, test));
    }
    let synth = d.synth.as_ref().ok_or_else(|| config_err("data", "no data source"))?;
    split(&synth.generate()?, d.split)
}

/// Writes the three splits to `output_dir/data`.
pub fn materialize_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, valid, test) = prepare_data(cfg)?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).map_err(|e| ApaError::io(format!("create {}", dir.display()), e))?;
    train.write_jsonl(&dir.join("train.jsonl"))?;
    valid.write_jsonl(&dir.join("valid.jsonl"))?;
    test.write_jsonl(&dir.join("test.jsonl"))?;
    Ok((train, valid, test))
}

/// The materialized splits, creating them first if needed.
pub fn stored_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let dir = cfg.data_dir();
    let paths = ["train.jsonl", "valid.jsonl", "test.jsonl"].map(|f| dir.join(f));
    if !paths.iter().all(|p| p.exists()) {
        return materialize_data(cfg);
    }
    let [a, b, c] = paths.map(|p| load_samples(&p, Format::Jsonl, cfg.data.rating_threshold));
    Ok((a?, b?, c?))
}

fn stored_test(cfg: &ExperimentConfig) -> Result<Dataset> {
    let p = cfg.data_dir().join("test.jsonl");
    if !p.exists() {
        return Err(config_err(
            "output_dir",
            format!("{} is missing; run `synth` first", p.display()),
        ));
    }
    load_samples(&p, Format::Jsonl, 0.0)
}

fn run_partition(cfg: &ExperimentConfig) -> Result<ShardAssignment> {
    let (train, valid, _) = stored_data(cfg)?;
    let base = BaseModel::random(&cfg.model.architecture, cfg.model.seed)?;
    let embs = embed_all(&base, &train)?;
    let part = &cfg.partition;
    let assignment = partition(
        &embs,
        part.shards,
        part.capacity_for(train.len()),
        part.strategy,
        part.seed,
        part.kmeans_iters,
    )?;
    let dir = cfg.registry_dir();
    fs::create_dir_all(&dir).map_err(|e| ApaError::io(format!("create {}", dir.display()), e))?;
    assignment.save(&dir.join(PARTITION_FILE))?;
    base.save_json(&dir.join(BASE_FILE))?;
    train.write_jsonl(&dir.join(TRAIN_DATA_FILE))?;
    valid.write_jsonl(&dir.join(VALID_DATA_FILE))?;
    let tomb = dir.join(TOMBSTONE_FILE);
    fs::write(&tomb, "").map_err(|e| ApaError::io(format!("write {}", tomb.display()), e))?;
    Ok(assignment)
}

fn run_train(cfg: &ExperimentConfig) -> Result<Registry> {
    let dir = cfg.registry_dir();
    if !dir.join(PARTITION_FILE).exists() {
        return Err(config_err("output_dir", "no partition found; run `partition` first"));
    }
    let assignment = ShardAssignment::load(&dir.join(PARTITION_FILE))?;
    let base = BaseModel::load_json(&dir.join(BASE_FILE))?;
    let train = load_samples(&dir.join(TRAIN_DATA_FILE), Format::Jsonl, 0.0)?;
    let valid = load_samples(&dir.join(VALID_DATA_FILE), Format::Jsonl, 0.0)?;
    let tombstones = read_tombstones(&dir.join(TOMBSTONE_FILE))?;
    let start = Instant::now();
    let reg = Registry::train(train, valid, base, assignment, cfg.train.clone(), tombstones)?;
    let took = start.elapsed().as_secs_f64();
    reg.save(&dir)?;
    append_timings(cfg, &[TimingRow::new("apa", "train", took)])?;
    Ok(reg)
}

fn load_registry(cfg: &ExperimentConfig) -> Result<Registry> {
    let dir = cfg.registry_dir();
    if !dir.join(crate::unlearning::CACHE_FILE).exists() {
        return Err(config_err("output_dir", "no trained registry found; run `train` first"));
    }
    Registry::load(&dir)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyAuc {
    pub strategy: WeightingStrategy,
    pub auc: f64,
}

/// Metrics written to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub shards: usize,
    pub shard_sizes: Vec<usize>,
    pub removed: usize,
    pub test_samples: usize,
    /// AUC of each shard adapter alone.
    pub sub_adapter_auc: Vec<f64>,
    pub sub_adapter_auc_mean: f64,
    pub apa_auc: f64,
    pub sisa_auc: f64,
    pub retrain_auc: Option<f64>,
    pub ablations: Vec<StrategyAuc>,
    pub aggregation: AggregationConfig,
}

/// AUCs and predictions of every path on `test`.
pub fn evaluate(
    reg: &Registry,
    test: &Dataset,
    agg: &AggregationConfig,
    eval: &EvalConfig,
    full_cfg: &TrainConfig,
) -> Result<(EvalReport, Vec<Prediction>, Vec<TimingRow>)> {
    let mut predictions = Vec::new();
    let mut timings = Vec::new();
    let mut score = |preds: Vec<Prediction>| -> Result<f64> {
        let a = auc_of(&preds, test)?;
        predictions.extend(preds);
        Ok(a)
    };

    let mut sub_adapter_auc = Vec::with_capacity(reg.k());
    for (k, ad) in reg.adapters().iter().enumerate() {
        let preds = test
            .iter()
            .map(|s| predict_with(reg.base(), Some(ad), s, Method::Shard(k)))
            .collect::<Result<Vec<_>>>()?;
        sub_adapter_auc.push(score(preds)?);
    }
    let sub_adapter_auc_mean = sub_adapter_auc.iter().sum::<f64>() / sub_adapter_auc.len() as f64;

    let strategies: Vec<WeightingStrategy> = if eval.ablations {
        WeightingStrategy::ALL.to_vec()
    } else {
        vec![agg.strategy]
    };
    let mut apa_auc = f64::NAN;
    let mut ablations = Vec::new();
    for strategy in strategies {
        let cfg = AggregationConfig {
            strategy,
            ..agg.clone()
        };
        let mut pred = ApaPredictor::new(reg, &cfg)?;
        let preds = test.iter().map(|s| pred.predict(s)).collect::<Result<Vec<_>>>()?;
        let a = score(preds)?;
        if strategy == agg.strategy {
            apa_auc = a;
        }
        ablations.push(StrategyAuc { strategy, auc: a });
    }
    if !eval.ablations {
        ablations.clear();
    }

    let preds = test.iter().map(|s| predict_sisa(reg, s)).collect::<Result<Vec<_>>>()?;
    let sisa_auc = score(preds)?;

    let retrain_auc = if eval.retrain_baseline {
        let survivors = reg.train_set().subset(&reg.surviving_ids())?;
        let start = Instant::now();
        let full = train_adapter(reg.base(), &survivors, full_cfg)?;
        timings.push(TimingRow::new("retrain", "train", start.elapsed().as_secs_f64()));
        let preds = test
            .iter()
            .map(|s| predict_with(reg.base(), Some(&full), s, Method::Retrain))
            .collect::<Result<Vec<_>>>()?;
        Some(score(preds)?)
    } else {
        None
    };

    let report = EvalReport {
        shards: reg.k(),
        shard_sizes: (0..reg.k()).map(|k| reg.shard_data(k).len()).collect(),
        removed: reg.tombstones().len(),
        test_samples: test.len(),
        sub_adapter_auc,
        sub_adapter_auc_mean,
        apa_auc,
        sisa_auc,
        retrain_auc,
        ablations,
        aggregation: agg.clone(),
    };
    Ok((report, predictions, timings))
}

fn run_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let reg = load_registry(cfg)?;
    let test = stored_test(cfg)?;
    let (report, predictions, timings) = evaluate(&reg, &test, &cfg.aggregation, &cfg.eval, &cfg.train)?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    write_predictions(&cfg.output_dir.join("predictions.csv"), &predictions, &test)?;
    append_timings(cfg, &timings)?;
    Ok(report)
}

fn run_predict(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<Outcome> {
    let reg = load_registry(cfg)?;
    let data = match input {
        Some(p) => load_samples(p, Format::from_path(p), cfg.data.rating_threshold)?,
        None => stored_test(cfg)?,
    };
    let mut pred = ApaPredictor::new(&reg, &cfg.aggregation)?;
    let predictions = data.iter().map(|s| pred.predict(s)).collect::<Result<Vec<_>>>()?;
    let path = cfg.output_dir.join("predictions.csv");
    write_predictions(&path, &predictions, &data)?;
    Ok(Outcome::Predicted {
        count: predictions.len(),
        path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnlearnSummary {
    pub removed_ids: Vec<SampleId>,
    pub affected_shards: Vec<usize>,
    pub total_removed: usize,
}

fn run_unlearn(cfg: &ExperimentConfig, ids: &[SampleId]) -> Result<UnlearnSummary> {
    let mut reg = load_registry(cfg)?;
    let req = UnlearnRequest::new(ids.iter().copied())?;
    let report = reg.unlearn(&req)?;
    reg.persist_unlearn(&cfg.registry_dir(), &req, &report)?;
    let summary = UnlearnSummary {
        removed_ids: req.ids().iter().copied().collect(),
        affected_shards: report.affected_shards.iter().copied().collect(),
        total_removed: reg.tombstones().len(),
    };
    write_json(&cfg.output_dir.join("unlearn.json"), &summary)?;
    let mut rows: Vec<TimingRow> = report
        .retrain_seconds
        .iter()
        .map(|(k, s)| TimingRow::new(&format!("shard-{k}"), "unlearn", *s))
        .collect();
    rows.push(TimingRow::new("apa", "unlearn", report.total_seconds));
    append_timings(cfg, &rows)?;
    Ok(summary)
}

/// One point of the shard-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub shard_size: usize,
    pub shards: usize,
    pub apa_auc: f64,
    /// Fastest of the repeated retrains of one shard minus one sample.
    pub retrain_seconds: f64,
}

/// Rebuilds the registry at each shard capacity (`K = ceil(n / size)`),
/// scores APA on `test` and times retraining the shard that holds one
/// seeded-random training sample.
#[allow(clippy::too_many_arguments)]
pub fn shard_size_sweep(
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
    base: &BaseModel,
    train_cfg: &TrainConfig,
    part: &PartitionConfig,
    agg: &AggregationConfig,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    let ids = train.ids();
    let victim = ids[SeededRng::new(seed).below(ids.len() as u64) as usize];
    sizes
        .iter()
        .map(|&size| {
            if size == 0 {
                return Err(config_err("bench.shard_sizes", "sizes must be >= 1"));
            }
            let shards = train.len().div_ceil(size);
            let p = PartitionConfig {
                shards,
                capacity: Some(size),
                ..part.clone()
            };
            let reg = Registry::build(train.clone(), valid.clone(), base.clone(), train_cfg.clone(), &p)?;
            let mut pred = ApaPredictor::new(&reg, agg)?;
            let preds = test.iter().map(|s| pred.predict(s)).collect::<Result<Vec<_>>>()?;
            let apa_auc = auc_of(&preds, test)?;
            let k = reg.assignment().shard_of(victim).ok_or(ApaError::UnknownId(victim))?;
            let remaining: Vec<SampleId> = reg.shard_data(k).iter().copied().filter(|&id| id != victim).collect();
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                std::hint::black_box(retrain_shard(reg.base(), reg.train_set(), &remaining, train_cfg, k)?);
                best = best.min(start.elapsed().as_secs_f64());
            }
            Ok(SweepPoint {
                shard_size: size,
                shards,
                apa_auc,
                retrain_seconds: best,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub inference: InferenceTimings,
    pub sisa_over_apa: f64,
    pub sisa_over_k_single: f64,
    pub unlearn_seconds: f64,
    pub full_retrain_seconds: f64,
    pub unlearn_speedup: f64,
    pub sweep: Vec<SweepPoint>,
}

fn run_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let mut reg = load_registry(cfg)?;
    let test = stored_test(cfg)?;
    let sample_ids: Vec<SampleId> = test.ids().into_iter().take(cfg.bench.inference_samples).collect();
    let bench_set = test.subset(&sample_ids)?;
    let inference = bench_inference(&reg, &bench_set, &cfg.aggregation, cfg.bench.repeats)?;

    let survivors = reg.surviving_ids();
    if survivors.is_empty() {
        return Err(ApaError::Empty("every training sample has been removed".into()));
    }
    let victim = survivors[SeededRng::new(cfg.bench.seed).below(survivors.len() as u64) as usize];
    let unlearn = bench_unlearn(&mut reg, &UnlearnRequest::new([victim])?, &cfg.train)?;

    let sweep = if cfg.bench.shard_sizes.is_empty() {
        Vec::new()
    } else {
        let (train, valid, _) = stored_data(cfg)?;
        shard_size_sweep(
            &train,
            &valid,
            &test,
            reg.base(),
            &cfg.train,
            &cfg.partition,
            &cfg.aggregation,
            &cfg.bench.shard_sizes,
            cfg.bench.repeats,
            cfg.bench.seed,
        )?
    };

    let k = reg.k() as f64;
    let report = BenchReport {
        sisa_over_apa: inference.t_sisa / inference.t_apa,
        sisa_over_k_single: inference.t_sisa / (k * inference.t_single),
        unlearn_seconds: unlearn.t_apa,
        full_retrain_seconds: unlearn.t_full,
        unlearn_speedup: unlearn.speedup,
        inference,
        sweep,
    };
    write_json(&cfg.output_dir.join("bench.json"), &report)?;
    let mut rows = vec![
        TimingRow::new("apa", "inference", report.inference.t_apa),
        TimingRow::new("sisa", "inference", report.inference.t_sisa),
        TimingRow::new("single", "inference", report.inference.t_single),
        TimingRow::new("apa", "unlearn", report.unlearn_seconds),
        TimingRow::new("retrain", "unlearn", report.full_retrain_seconds),
    ];
    for p in &report.sweep {
        rows.push(TimingRow::new(
            &format!("apa-t{}", p.shard_size),
            "shard-retrain",
            p.retrain_seconds,
        ));
    }
    append_timings(cfg, &rows)?;
    Ok(report)
}

/// A row of `timings.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub phase: String,
    pub seconds: f64,
}

impl TimingRow {
    pub fn new(method: &str, phase: &str, seconds: f64) -> Self {
        Self {
            method: method.into(),
            phase: phase.into(),
            seconds,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> ApaError {
    ApaError::io(format!("write {}", path.display()), e.into())
}

fn append_timings(cfg: &ExperimentConfig, rows: &[TimingRow]) -> Result<()> {
    let path = cfg.output_dir.join("timings.csv");
    let fresh = !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| ApaError::io(format!("open {}", path.display()), e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(&path, e))?;
    }
    w.flush()
        .map_err(|e| ApaError::io(format!("write {}", path.display()), e))
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: SampleId,
    score: f64,
    label: u8,
    method: &'a Method,
}

fn write_predictions(path: &Path, predictions: &[Prediction], data: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| ApaError::io(format!("create {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    for p in predictions {
        let label = data.get(p.sample_id).ok_or(ApaError::UnknownId(p.sample_id))?.label;
        w.serialize(PredictionRow {
            id: p.sample_id,
            score: p.score,
            label,
            method: &p.method,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()
        .map_err(|e| ApaError::io(format!("write {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| ApaError::json("serialize report", e))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| ApaError::io(format!("write {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml_str(
            r#"
            [data.synth]
            n = 160
            dim = 6
            k_latent = 3
            noise = 0.2
            seed = 1

            [data.split]
            train_size = 100
            valid_size = 30
            test_size = 30
            seed = 2

            [model.architecture]
            input_dim = 6
            hidden = [8, 8]

            [partition]
            shards = 4

            [train]
            epochs = 3
            rank = 2

            [bench]
            inference_samples = 10
            repeats = 1
            shard_sizes = [50, 25]
            "#,
        )
        .unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        let round = ExperimentConfig::from_toml_str(&ExperimentConfig::default().to_toml_string().unwrap()).unwrap();
        assert_eq!(round, ExperimentConfig::default());
    }

    #[test]
    fn documented_schema_is_the_default() {
        let guide = include_str!("../../../book/src/cli.md");
        let start = guide.find("```toml\n").unwrap() + "```toml\n".len();
        let end = start + guide[start..].find("```").unwrap();
        assert_eq!(
            ExperimentConfig::from_toml_str(&guide[start..end]).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[train]\nepochs = \"many\"\n").unwrap_err();
        assert!(
            matches!(&err, ApaError::Config { field, .. } if field == "train.epochs"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml_str("[partition]\nshardz = 3\n").unwrap_err();
        assert!(
            matches!(&err, ApaError::Config { field, .. } if field.starts_with("partition")),
            "{err}"
        );
        let mut cfg = ExperimentConfig::default();
        cfg.train.learning_rate = -1.0;
        assert!(matches!(cfg.validate(), Err(ApaError::Config { field, .. }) if field == "train.learning_rate"));
        let mut cfg = ExperimentConfig::default();
        cfg.data.train = Some("/nonexistent/train.jsonl".into());
        assert!(matches!(cfg.validate(), Err(ApaError::Config { field, .. }) if field == "data.train"));
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn pipeline_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        run_experiment(&cfg, &Command::Synth).unwrap();
        let Outcome::Partitioned { sizes } = run_experiment(&cfg, &Command::Partition).unwrap() else {
            panic!()
        };
        assert_eq!(sizes, vec![25; 4]);
        run_experiment(&cfg, &Command::Train).unwrap();
        let Outcome::Evaluated(report) = run_experiment(&cfg, &Command::Eval).unwrap() else {
            panic!()
        };
        assert_eq!(report.sub_adapter_auc.len(), 4);
        assert_eq!(report.ablations.len(), 4);
        assert!(report.retrain_auc.is_some());
        let first = fs::read(dir.path().join("report.json")).unwrap();
        run_experiment(&cfg, &Command::Eval).unwrap();
        assert_eq!(fs::read(dir.path().join("report.json")).unwrap(), first);

        let preds = fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
        assert!(preds.starts_with("id,score,label,method\n"));
        // 4 shards + 4 strategies + sisa + retrain, 30 test samples each.
        assert_eq!(preds.lines().count(), 1 + 10 * 30);

        let victim = Registry::load(&cfg.registry_dir()).unwrap().assignment().members(1)[0];
        let Outcome::Unlearned(s) = run_experiment(&cfg, &Command::Unlearn { ids: vec![victim] }).unwrap() else {
            panic!()
        };
        assert_eq!(s.affected_shards, vec![1]);
        assert!(matches!(
            run_experiment(&cfg, &Command::Unlearn { ids: vec![victim] }),
            Err(ApaError::AlreadyRemoved(_))
        ));

        let Outcome::Benchmarked(b) = run_experiment(&cfg, &Command::Bench).unwrap() else {
            panic!()
        };
        assert_eq!(b.sweep.len(), 2);
        assert_eq!(b.sweep[1].shards, 4);
        let timings = fs::read_to_string(dir.path().join("timings.csv")).unwrap();
        assert!(timings.starts_with("method,phase,seconds\n"));
        assert!(timings.contains("sisa,inference,"));
        assert_eq!(timings.matches("method,phase").count(), 1);
    }

    #[test]
    fn run_matches_stepwise() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&tiny(a.path()), &Command::Run).unwrap();
        for c in [Command::Synth, Command::Partition, Command::Train, Command::Eval] {
            run_experiment(&tiny(b.path()), &c).unwrap();
        }
        assert_eq!(
            fs::read(a.path().join("report.json")).unwrap(),
            fs::read(b.path().join("report.json")).unwrap()
        );
    }

    #[test]
    fn train_without_partition_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&tiny(dir.path()), &Command::Train).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
