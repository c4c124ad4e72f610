//! Prediction paths, AUC and inference timing.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    aggregate_concat, aggregate_decomposition_into, aggregate_nondecomposition, Adapter, LayerUpdate, WeightVector,
};
use crate::dataset::{Dataset, InstructionSample, SampleId};
use crate::error::{ApaError, Result};
use crate::numerics::sigmoid;
use crate::training::{model_forward, BaseModel};
use crate::unlearning::Registry;
use crate::weighting::{
    adapter_errors, attention_weights, neighbors, semantic_weights, AggregationConfig, AggregationLevel,
    WeightingStrategy,
};

/// Which path produced a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Apa(WeightingStrategy),
    Sisa,
    /// One adapter trained on every surviving sample.
    Retrain,
    /// A single shard's adapter on its own.
    Shard(usize),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Apa(WeightingStrategy::Adaptive) => f.write_str("apa"),
            Method::Apa(s) => write!(f, "apa-{}", s.name()),
            Method::Sisa => f.write_str("sisa"),
            Method::Retrain => f.write_str("retrain"),
            Method::Shard(k) => write!(f, "shard-{k}"),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub sample_id: SampleId,
    /// `σ(logit)`.
    pub score: f64,
    pub method: Method,
}

/// Score of one adapter (or none) on one sample.
pub fn predict_with(
    base: &BaseModel,
    update: Option<&dyn LayerUpdate>,
    sample: &InstructionSample,
    method: Method,
) -> Result<Prediction> {
    Ok(Prediction {
        sample_id: sample.id,
        score: sigmoid(model_forward(base, update, &sample.features)?),
        method,
    })
}

/// Per-sample weights for the registry's adapters under `agg.strategy`.
pub fn sample_weights(reg: &Registry, sample: &InstructionSample, agg: &AggregationConfig) -> Result<WeightVector> {
    let k = reg.k();
    if agg.strategy == WeightingStrategy::Average {
        return Ok(WeightVector::uniform(k));
    }
    let query = reg.base().hidden(&sample.features)?;
    match agg.strategy {
        WeightingStrategy::Semantic => semantic_weights(&query, reg.assignment().centers(), agg.tau),
        WeightingStrategy::Adaptive | WeightingStrategy::Major => {
            let nbrs = neighbors(&query, reg.valid_index(), agg.neighbors)?;
            let errors = adapter_errors(reg.cache(), &nbrs)?;
            let w = attention_weights(&errors, agg.tau)?;
            if agg.strategy == WeightingStrategy::Major {
                Ok(WeightVector::one_hot(k, w.argmax()))
            } else {
                Ok(w)
            }
        }
        WeightingStrategy::Average => unreachable!(),
    }
}

/// Aggregated single-pass predictor. Keeps a buffer for decomposition-level
/// merging so a serving loop does not allocate per sample.
pub struct ApaPredictor<'a> {
    reg: &'a Registry,
    agg: AggregationConfig,
    buffer: Adapter,
}

impl<'a> ApaPredictor<'a> {
    pub fn new(reg: &'a Registry, agg: &AggregationConfig) -> Result<Self> {
        agg.validate()?;
        let buffer = reg
            .adapters()
            .first()
            .ok_or_else(|| ApaError::Empty("registry has no adapters".into()))?
            .zeros_like();
        Ok(Self {
            reg,
            agg: agg.clone(),
            buffer,
        })
    }

    pub fn predict(&mut self, sample: &InstructionSample) -> Result<Prediction> {
        let reg = self.reg;
        let method = Method::Apa(self.agg.strategy);
        let adapters = reg.adapters();
        if adapters.len() == 1 {
            if !reg.cache().is_fresh() {
                return Err(ApaError::StaleCache(0));
            }
            return predict_with(reg.base(), Some(&adapters[0]), sample, method);
        }
        let w = sample_weights(reg, sample, &self.agg)?;
        match self.agg.level {
            AggregationLevel::Decomposition => {
                aggregate_decomposition_into(adapters, &w, &mut self.buffer)?;
                predict_with(reg.base(), Some(&self.buffer), sample, method)
            }
            AggregationLevel::Nondecomposition => {
                let merged = aggregate_nondecomposition(adapters, &w)?;
                predict_with(reg.base(), Some(&merged), sample, method)
            }
            AggregationLevel::Concat => {
                let merged = aggregate_concat(adapters, &w)?;
                predict_with(reg.base(), Some(&merged), sample, method)
            }
        }
    }
}

pub fn predict_apa(reg: &Registry, sample: &InstructionSample, agg: &AggregationConfig) -> Result<Prediction> {
    ApaPredictor::new(reg, agg)?.predict(sample)
}

/// Mean of the `K` per-adapter probabilities.
pub fn predict_sisa(reg: &Registry, sample: &InstructionSample) -> Result<Prediction> {
    let adapters = reg.adapters();
    let mut total = 0.0;
    for ad in adapters {
        total += sigmoid(model_forward(reg.base(), Some(ad), &sample.features)?);
    }
    Ok(Prediction {
        sample_id: sample.id,
        score: total / adapters.len() as f64,
        method: Method::Sisa,
    })
}

/// Probability that a random positive outscores a random negative, ties
/// counting half. Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(ApaError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ApaError::NonFinite("score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(ApaError::InvalidArgument(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps every midrank an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&o| labels[o] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// AUC of a batch of predictions against the dataset's labels.
pub fn auc_of(predictions: &[Prediction], data: &Dataset) -> Result<f64> {
    let labels = predictions
        .iter()
        .map(|p| {
            data.get(p.sample_id)
                .map(|s| s.label)
                .ok_or(ApaError::UnknownId(p.sample_id))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    auc(&scores, &labels)
}

/// Total serial wall-clock seconds for each path over the same samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTimings {
    pub samples: usize,
    pub t_apa: f64,
    pub t_sisa: f64,
    pub t_single: f64,
}

fn time_pass(pass: &mut dyn FnMut() -> Result<f64>) -> Result<f64> {
    let start = Instant::now();
    black_box(pass()?);
    Ok(start.elapsed().as_secs_f64())
}

/// One-at-a-time inference over every sample of `test`, per path. Each
/// path gets an untimed warm-up pass. The three paths then run in turn,
/// `repeats` rounds, and each reports its fastest pass. `t_single` uses
/// adapter 0 alone.
pub fn bench_inference(
    reg: &Registry,
    test: &Dataset,
    agg: &AggregationConfig,
    repeats: usize,
) -> Result<InferenceTimings> {
    let mut apa = ApaPredictor::new(reg, agg)?;
    let single = &reg.adapters()[0];
    let mut apa_pass = || {
        let mut acc = 0.0;
        for s in test {
            acc += apa.predict(s)?.score;
        }
        Ok(acc)
    };
    let mut sisa_pass = || {
        let mut acc = 0.0;
        for s in test {
            acc += predict_sisa(reg, s)?.score;
        }
        Ok(acc)
    };
    let mut single_pass = || {
        let mut acc = 0.0;
        for s in test {
            acc += predict_with(reg.base(), Some(single), s, Method::Shard(0))?.score;
        }
        Ok(acc)
    };
    let mut passes: [&mut dyn FnMut() -> Result<f64>; 3] = [&mut apa_pass, &mut sisa_pass, &mut single_pass];
    for pass in passes.iter_mut() {
        black_box(pass()?);
    }
    let mut best = [f64::INFINITY; 3];
    for _ in 0..repeats.max(1) {
        for (b, pass) in best.iter_mut().zip(passes.iter_mut()) {
            *b = b.min(time_pass(*pass)?);
        }
    }
    Ok(InferenceTimings {
        samples: test.len(),
        t_apa: best[0],
        t_sisa: best[1],
        t_single: best[2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, synth_generate, SplitSpec};
    use crate::training::{Architecture, TrainConfig};
    use crate::unlearning::PartitionConfig;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn registry(k: usize, seed: u64) -> (Registry, Dataset) {
        let data = synth_generate(200, 6, 3, 0.2, seed).unwrap();
        let (train, valid, test) = split(
            &data,
            SplitSpec {
                train_size: 120,
                valid_size: 40,
                test_size: 40,
                seed,
            },
        )
        .unwrap();
        let base = BaseModel::random(
            &Architecture {
                input_dim: 6,
                hidden: vec![8, 8],
                ..Default::default()
            },
            seed,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            rank: 2,
            seed,
            ..TrainConfig::default()
        };
        let part = PartitionConfig {
            shards: k,
            seed,
            ..PartitionConfig::default()
        };
        (Registry::build(train, valid, base, cfg, &part).unwrap(), test)
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        let (s, l) = ([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]);
        assert_eq!(brute_auc(&s, &l), 0.75);
        assert_eq!(auc(&s, &l).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1], &[1, 0]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(
            pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1 as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }
    }

    #[test]
    fn single_shard_apa_and_sisa_equal_direct() {
        let (reg, test) = registry(1, 3);
        let agg = AggregationConfig::default();
        for s in &test {
            let direct = sigmoid(model_forward(reg.base(), Some(&reg.adapters()[0]), &s.features).unwrap());
            assert_eq!(predict_apa(&reg, s, &agg).unwrap().score, direct);
            assert_eq!(predict_sisa(&reg, s).unwrap().score, direct);
        }
    }

    #[test]
    fn sisa_is_mean_of_adapter_scores() {
        let (reg, test) = registry(4, 4);
        for s in &test {
            let scores: Vec<f64> = reg
                .adapters()
                .iter()
                .map(|a| sigmoid(model_forward(reg.base(), Some(a), &s.features).unwrap()))
                .collect();
            let expected = (scores[0] + scores[1] + scores[2] + scores[3]) / 4.0;
            assert!((predict_sisa(&reg, s).unwrap().score - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_and_dense_levels_agree() {
        let (reg, test) = registry(4, 5);
        let dense = AggregationConfig {
            level: AggregationLevel::Nondecomposition,
            tau: 50.0,
            ..Default::default()
        };
        let concat = AggregationConfig {
            level: AggregationLevel::Concat,
            ..dense.clone()
        };
        for s in &test {
            let a = predict_apa(&reg, s, &dense).unwrap().score;
            let b = predict_apa(&reg, s, &concat).unwrap().score;
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn identical_adapters_collapse_to_one() {
        let (reg, test) = registry(3, 6);
        let mut twin = reg.clone();
        let same = reg.adapters()[1].clone();
        twin.replace_adapters_for_test(vec![same.clone(), same.clone(), same.clone()]);
        for level in [
            AggregationLevel::Decomposition,
            AggregationLevel::Nondecomposition,
            AggregationLevel::Concat,
        ] {
            let agg = AggregationConfig {
                level,
                ..Default::default()
            };
            for s in test.iter().take(10) {
                let single = predict_with(twin.base(), Some(&same), s, Method::Shard(1))
                    .unwrap()
                    .score;
                let merged = predict_apa(&twin, s, &agg).unwrap().score;
                assert!((single - merged).abs() < 1e-12, "{level:?}");
                assert!((predict_sisa(&twin, s).unwrap().score - single).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_temperature_dense_is_uniform_soup() {
        let (reg, test) = registry(4, 7);
        let agg = AggregationConfig {
            tau: 0.0,
            level: AggregationLevel::Nondecomposition,
            ..Default::default()
        };
        let soup = aggregate_nondecomposition(reg.adapters(), &WeightVector::uniform(4)).unwrap();
        for s in &test {
            let expected = predict_with(reg.base(), Some(&soup), s, Method::Sisa).unwrap().score;
            assert_eq!(predict_apa(&reg, s, &agg).unwrap().score, expected);
        }
    }

    #[test]
    fn major_is_exactly_one_adapter() {
        let (reg, test) = registry(4, 8);
        let agg = AggregationConfig {
            strategy: WeightingStrategy::Major,
            ..Default::default()
        };
        let adaptive = AggregationConfig::default();
        for s in &test {
            let hot = sample_weights(&reg, s, &adaptive).unwrap().argmax();
            let expected = predict_with(reg.base(), Some(&reg.adapters()[hot]), s, Method::Shard(hot))
                .unwrap()
                .score;
            assert_eq!(predict_apa(&reg, s, &agg).unwrap().score, expected);
        }
    }

    #[test]
    fn strategies_do_not_touch_state() {
        let (reg, test) = registry(4, 9);
        let before = reg.snapshot();
        for strategy in WeightingStrategy::ALL {
            let agg = AggregationConfig {
                strategy,
                ..Default::default()
            };
            for s in test.iter().take(5) {
                let p = predict_apa(&reg, s, &agg).unwrap();
                assert!(p.score > 0.0 && p.score < 1.0);
            }
        }
        assert_eq!(*reg.snapshot(), *before);
    }

    #[test]
    fn stale_cache_is_refused() {
        let (mut reg, test) = registry(4, 10);
        reg.mark_dirty_for_test(2);
        let s = &test.samples()[0];
        let err = predict_apa(&reg, s, &AggregationConfig::default()).unwrap_err();
        assert!(matches!(err, ApaError::StaleCache(2)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn decomposition_buffer_matches_fresh_merge() {
        let (reg, test) = registry(4, 11);
        let agg = AggregationConfig::default();
        let mut pred = ApaPredictor::new(&reg, &agg).unwrap();
        for s in &test {
            let w = sample_weights(&reg, s, &agg).unwrap();
            let fresh = crate::adapter::aggregate_decomposition(reg.adapters(), &w).unwrap();
            let expected = predict_with(reg.base(), Some(&fresh), s, Method::Sisa).unwrap().score;
            assert_eq!(pred.predict(s).unwrap().score, expected);
        }
    }

    #[test]
    fn bench_reports_positive_times() {
        let (reg, test) = registry(2, 12);
        let t = bench_inference(&reg, &test, &AggregationConfig::default(), 1).unwrap();
        assert_eq!(t.samples, test.len());
        assert!(t.t_apa > 0.0 && t.t_sisa > 0.0 && t.t_single > 0.0);
    }

    #[test]
    fn method_tags() {
        assert_eq!(Method::Apa(WeightingStrategy::Adaptive).to_string(), "apa");
        assert_eq!(Method::Apa(WeightingStrategy::Major).to_string(), "apa-major");
        assert_eq!(Method::Shard(3).to_string(), "shard-3");
    }
}
