//! Partitioned low-rank adapters over a frozen base network, with exact
//! unlearning and per-query adapter merging.
//!
//! The training set is split into balanced, semantically coherent shards
//! ([`partition`]). Each shard trains its own adapter ([`training`]).
//! Removing data retrains only the shards that held it ([`unlearning`]).
//! At inference the shard adapters are merged with weights derived from
//! validation losses near the query ([`weighting`], [`adapter`]) and the
//! merged adapter scores the query in one pass ([`serving`]).
//!
//! ```
//! use apa::dataset::{split, SplitSpec, SynthSpec};
//! use apa::serving::predict_apa;
//! use apa::training::{Architecture, BaseModel, TrainConfig};
//! use apa::unlearning::{PartitionConfig, Registry, UnlearnRequest};
//! use apa::weighting::AggregationConfig;
//!
//! # fn main() -> apa::Result<()> {
//! let data = SynthSpec::new(120, 4, 2, 0.1, 0).generate()?;
//! let (train, valid, test) = split(&data, SplitSpec { train_size: 80, valid_size: 20, test_size: 20, seed: 0 })?;
//! let base = BaseModel::random(&Architecture { input_dim: 4, hidden: vec![8], ..Default::default() }, 0)?;
//! let cfg = TrainConfig { epochs: 5, rank: 2, ..Default::default() };
//! let mut reg = Registry::build(train, valid, base, cfg, &PartitionConfig { shards: 2, ..Default::default() })?;
//!
//! let p = predict_apa(&reg, &test.samples()[0], &AggregationConfig::default())?;
//! assert!(p.score > 0.0 && p.score < 1.0);
//! reg.unlearn(&UnlearnRequest::new([reg.assignment().members(0)[0]])?)?;
//! # Ok(())
//! # }
//! ```
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doctests of this crate.

pub mod adapter;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod partition;
pub mod serving;
pub mod training;
pub mod unlearning;
pub mod weighting;

pub use error::{ApaError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/adapters.md")]
    struct Adapters;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/partition.md")]
    struct Partition;
    #[doc = include_str!("../../../book/src/weighting.md")]
    struct Weighting;
    #[doc = include_str!("../../../book/src/unlearning.md")]
    struct Unlearning;
    #[doc = include_str!("../../../book/src/serving.md")]
    struct Serving;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../README.md")]
    struct Readme;
}
