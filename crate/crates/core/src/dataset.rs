//! Samples, file ingestion, splitting and a synthetic generator.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ApaError, Result};
use crate::numerics::{norm, SeededRng, Vector};

pub type SampleId = u64;

/// One example: a feature vector and a like (1) / dislike (0) label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: SampleId,
    pub features: Vector,
    pub label: u8,
}

impl InstructionSample {
    pub fn new(id: SampleId, features: Vec<f64>, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(ApaError::InvalidArgument(format!(
                "sample {id}: label must be 0 or 1, got {label}"
            )));
        }
        Ok(Self {
            id,
            features: Vector::new(features)?,
            label,
        })
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// Ordered samples sharing one feature dimension, with unique ids.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<InstructionSample>,
    dim: usize,
    index: HashMap<SampleId, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.samples == other.samples
    }
}

impl Dataset {
    pub fn new(samples: Vec<InstructionSample>) -> Result<Self> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut index = HashMap::with_capacity(samples.len());
        for (pos, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(ApaError::Shape(format!(
                    "sample {} has {} features, expected {dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if index.insert(s.id, pos).is_some() {
                return Err(ApaError::InvalidArgument(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { samples, dim, index })
    }

    pub fn samples(&self) -> &[InstructionSample] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: SampleId) -> Option<&InstructionSample> {
        self.index.get(&id).map(|&i| &self.samples[i])
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, InstructionSample> {
        self.samples.iter()
    }

    /// Samples for `ids`, in the order given.
    pub fn subset(&self, ids: &[SampleId]) -> Result<Dataset> {
        let samples = ids
            .iter()
            .map(|&id| self.get(id).cloned().ok_or(ApaError::UnknownId(id)))
            .collect::<Result<Vec<_>>>()?;
        let mut d = Dataset::new(samples)?;
        if d.is_empty() {
            d.dim = self.dim;
        }
        Ok(d)
    }

    /// Writes the canonical JSONL form (`label` records).
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| ApaError::io(format!("create {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        for s in &self.samples {
            let rec = Record {
                id: s.id,
                features: s.features.0.clone(),
                rating: None,
                label: Some(s.label),
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| ApaError::json("write sample", e))?;
            out.write_all(b"\n")
                .map_err(|e| ApaError::io(format!("write {}", path.display()), e))?;
        }
        out.flush()
            .map_err(|e| ApaError::io(format!("write {}", path.display()), e))
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a InstructionSample;
    type IntoIter = std::slice::Iter<'a, InstructionSample>;
    fn into_iter(self) -> Self::IntoIter {
        self.samples.iter()
    }
}

/// `rating > threshold` is a like; the boundary itself is a dislike.
pub fn binarize(rating: f64, threshold: f64) -> u8 {
    u8::from(rating > threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guess from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = ApaError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(ApaError::InvalidArgument(format!("unknown data format `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: SampleId,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

fn record_label(rating: Option<f64>, label: Option<u8>, threshold: f64) -> std::result::Result<u8, String> {
    match (label, rating) {
        (Some(l @ (0 | 1)), _) => Ok(l),
        (Some(l), _) => Err(format!("label must be 0 or 1, got {l}")),
        (None, Some(r)) if r.is_finite() => Ok(binarize(r, threshold)),
        (None, Some(r)) => Err(format!("rating is {r}")),
        (None, None) => Err("record has neither `rating` nor `label`".into()),
    }
}

/// Reads a dataset. Ratings are binarized with `rating_threshold`; explicit
/// labels are taken as is.
pub fn load_samples(path: &Path, format: Format, rating_threshold: f64) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| ApaError::io(format!("open {}", path.display()), e))?;
    let parse_err = |line: usize, message: String| ApaError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    let mut arity: Option<usize> = None;
    let mut push = |line: usize, id: SampleId, features: Vec<f64>, label: u8| -> Result<()> {
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(parse_err(line, format!("feature {pos} is not finite")));
        }
        match arity {
            None => arity = Some(features.len()),
            Some(a) if a != features.len() => {
                return Err(parse_err(
                    line,
                    format!("expected {a} features, found {}", features.len()),
                ))
            }
            _ => {}
        }
        samples.push(InstructionSample {
            id,
            features: Vector(features),
            label,
        });
        Ok(())
    };

    match format {
        Format::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let lineno = i + 1;
                let line = line.map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
                let label = record_label(rec.rating, rec.label, rating_threshold).map_err(|m| parse_err(lineno, m))?;
                push(lineno, rec.id, rec.features, label)?;
            }
        }
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
            let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
            let col = |name: &str| headers.iter().position(|h| h == name);
            let id_col = col("id").ok_or_else(|| parse_err(1, "missing `id` column".into()))?;
            let rating_col = col("rating");
            let label_col = col("label");
            let feature_cols: Vec<usize> = (0..)
                .map(|j| col(&format!("f{j}")))
                .take_while(Option::is_some)
                .flatten()
                .collect();
            if feature_cols.is_empty() {
                return Err(parse_err(1, "no feature columns `f0`, `f1`, ...".into()));
            }
            for (i, row) in reader.records().enumerate() {
                let lineno = i + 2;
                let row = row.map_err(|e| parse_err(lineno, e.to_string()))?;
                let field = |c: usize| row.get(c).unwrap_or("");
                let id: SampleId = field(id_col)
                    .parse()
                    .map_err(|e| parse_err(lineno, format!("id: {e}")))?;
                let num = |c: usize, what: &str| -> Result<f64> {
                    field(c)
                        .parse::<f64>()
                        .map_err(|e| parse_err(lineno, format!("{what}: {e}")))
                };
                let rating = rating_col.map(|c| num(c, "rating")).transpose()?;
                let label = label_col
                    .map(|c| {
                        field(c)
                            .parse::<u8>()
                            .map_err(|e| parse_err(lineno, format!("label: {e}")))
                    })
                    .transpose()?;
                let label = record_label(rating, label, rating_threshold).map_err(|m| parse_err(lineno, m))?;
                let features = feature_cols
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| num(c, &format!("f{j}")))
                    .collect::<Result<Vec<_>>>()?;
                push(lineno, id, features, label)?;
            }
        }
    }

    if samples.is_empty() {
        return Err(ApaError::Empty(format!("no samples in {}", path.display())));
    }
    Dataset::new(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Seeded shuffle followed by contiguous train / valid / test slices.
pub fn split(d: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let need = spec.train_size + spec.valid_size + spec.test_size;
    if need > d.len() {
        return Err(ApaError::InvalidArgument(format!(
            "split needs {need} samples but the dataset has {}",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    SeededRng::new(spec.seed).shuffle(&mut order);
    let take = |range: std::ops::Range<usize>| {
        let samples = order[range].iter().map(|&i| d.samples[i].clone()).collect();
        let mut out = Dataset::new(samples)?;
        out.dim = d.dim;
        Ok::<_, ApaError>(out)
    };
    let a = spec.train_size;
    let b = a + spec.valid_size;
    Ok((take(0..a)?, take(a..b)?, take(b..need)?))
}

/// Parameters of the synthetic clustered recommendation task.
///
/// Features come from `k_latent` Gaussian blobs. Each blob has its own
/// unit-norm labelling direction, a blend of a shared direction and a
/// blob-specific one weighted by `heterogeneity`. A sample is liked when
/// `w_c · (x - center_c) / spread + noise · ε > 0`, with `ε ~ N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub dim: usize,
    pub k_latent: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_spread")]
    pub cluster_spread: f64,
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
}

fn default_spread() -> f64 {
    0.5
}

fn default_heterogeneity() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn new(n: usize, dim: usize, k_latent: usize, noise: f64, seed: u64) -> Self {
        Self {
            n,
            dim,
            k_latent,
            noise,
            seed,
            cluster_spread: default_spread(),
            heterogeneity: default_heterogeneity(),
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.generate_with_latent().map(|(d, _)| d)
    }

    /// Dataset plus the latent blob index of every sample.
    pub fn generate_with_latent(&self) -> Result<(Dataset, Vec<usize>)> {
        if self.n == 0 || self.dim == 0 || self.k_latent == 0 {
            return Err(ApaError::InvalidArgument(format!(
                "synthetic data needs n, dim, k_latent > 0 (got {}, {}, {})",
                self.n, self.dim, self.k_latent
            )));
        }
        if !(self.noise >= 0.0 && self.cluster_spread > 0.0 && self.heterogeneity >= 0.0) {
            return Err(ApaError::InvalidArgument(
                "noise and heterogeneity must be >= 0, spread > 0".into(),
            ));
        }
        let mut rng = SeededRng::new(self.seed);
        let unit = |rng: &mut SeededRng| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..self.dim).map(|_| rng.standard_normal()).collect();
                let n = norm(&v);
                if n > 0.0 {
                    return v.into_iter().map(|x| x / n).collect();
                }
            }
        };
        let centers: Vec<Vec<f64>> = (0..self.k_latent)
            .map(|_| (0..self.dim).map(|_| rng.standard_normal()).collect())
            .collect();
        let shared = unit(&mut rng);
        let directions: Vec<Vec<f64>> = (0..self.k_latent)
            .map(|_| {
                let own = unit(&mut rng);
                let blend: Vec<f64> = shared
                    .iter()
                    .zip(&own)
                    .map(|(s, o)| s + self.heterogeneity * o)
                    .collect();
                let n = norm(&blend);
                if n == 0.0 {
                    shared.clone()
                } else {
                    blend.into_iter().map(|x| x / n).collect()
                }
            })
            .collect();

        let mut samples = Vec::with_capacity(self.n);
        let mut latent = Vec::with_capacity(self.n);
        for id in 0..self.n {
            let c = rng.below(self.k_latent as u64) as usize;
            let offset: Vec<f64> = (0..self.dim)
                .map(|_| self.cluster_spread * rng.standard_normal())
                .collect();
            let features: Vec<f64> = centers[c].iter().zip(&offset).map(|(a, b)| a + b).collect();
            let margin = crate::numerics::dot(&directions[c], &offset) / self.cluster_spread;
            let eps = rng.standard_normal();
            let label = u8::from(margin + self.noise * eps > 0.0);
            samples.push(InstructionSample {
                id: id as SampleId,
                features: Vector(features),
                label,
            });
            latent.push(c);
        }
        Ok((Dataset::new(samples)?, latent))
    }
}

/// Shorthand for [`SynthSpec::new`] with default spread and heterogeneity.
pub fn synth_generate(n: usize, dim: usize, k_latent: usize, noise: f64, seed: u64) -> Result<Dataset> {
    SynthSpec::new(n, dim, k_latent, noise, seed).generate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_similarity;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn write_tmp(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn binarize_is_strict() {
        assert_eq!(binarize(4.0, 3.0), 1);
        assert_eq!(binarize(3.0, 3.0), 0);
        assert_eq!(binarize(5.0, 5.0), 0);
        assert_eq!(binarize(5.5, 5.0), 1);
    }

    #[test]
    fn load_three_line_jsonl() {
        let f = write_tmp(
            "{\"id\": 1, \"features\": [0.1, 0.2], \"rating\": 4}\n\
             {\"id\": 2, \"features\": [0.3, 0.4], \"rating\": 2}\n\
             {\"id\": 3, \"features\": [0.5, 0.6], \"label\": 1}\n",
            ".jsonl",
        );
        let d = load_samples(f.path(), Format::Jsonl, 3.0).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        let labels: Vec<u8> = d.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![1, 0, 1]);
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("", ".jsonl");
        let err = load_samples(f.path(), Format::Jsonl, 3.0).unwrap_err();
        assert!(err.to_string().contains("no samples"), "{err}");
    }

    #[test]
    fn nan_feature_is_a_parse_error() {
        let f = write_tmp("{\"id\": 1, \"features\": [NaN], \"rating\": 4}\n", ".jsonl");
        assert!(matches!(
            load_samples(f.path(), Format::Jsonl, 3.0),
            Err(ApaError::Parse { line: 1, .. })
        ));
        let f = write_tmp("id,rating,f0\n1,4,NaN\n", ".csv");
        assert!(matches!(
            load_samples(f.path(), Format::Csv, 3.0),
            Err(ApaError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn arity_mismatch_names_the_line() {
        let f = write_tmp(
            "{\"id\": 1, \"features\": [0.1, 0.2], \"label\": 0}\n{\"id\": 2, \"features\": [0.1], \"label\": 0}\n",
            ".jsonl",
        );
        match load_samples(f.path(), Format::Jsonl, 3.0) {
            Err(ApaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_matches_jsonl() {
        let j = write_tmp(
            "{\"id\": 7, \"features\": [1.0, -2.0], \"rating\": 5}\n{\"id\": 8, \"features\": [0.5, 0.25], \"rating\": 6}\n",
            ".jsonl",
        );
        let c = write_tmp("id,rating,f0,f1\n7,5,1.0,-2.0\n8,6,0.5,0.25\n", ".csv");
        let a = load_samples(j.path(), Format::Jsonl, 5.0).unwrap();
        let b = load_samples(c.path(), Format::from_path(c.path()), 5.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get(7).unwrap().label, 0);
        assert_eq!(a.get(8).unwrap().label, 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = InstructionSample::new(1, vec![0.0], 0).unwrap();
        assert!(Dataset::new(vec![s.clone(), s]).is_err());
    }

    #[test]
    fn jsonl_write_read_roundtrip() {
        let d = synth_generate(20, 3, 2, 0.1, 4).unwrap();
        let f = tempfile::Builder::new().suffix(".jsonl").tempfile().unwrap();
        d.write_jsonl(f.path()).unwrap();
        assert_eq!(load_samples(f.path(), Format::Jsonl, 0.0).unwrap(), d);
    }

    #[test]
    fn small_split_covers_everything() {
        let d = synth_generate(4, 2, 1, 0.0, 1).unwrap();
        let spec = SplitSpec {
            train_size: 2,
            valid_size: 1,
            test_size: 1,
            seed: 3,
        };
        let (tr, va, te) = split(&d, spec).unwrap();
        let mut all: Vec<_> = tr.ids().into_iter().chain(va.ids()).chain(te.ids()).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(split(&d, spec).unwrap(), (tr, va, te));
        assert!(split(
            &d,
            SplitSpec {
                train_size: 4,
                valid_size: 1,
                test_size: 0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn split_at_experiment_scale() {
        let d = synth_generate(2524, 8, 4, 0.5, 9).unwrap();
        let spec = SplitSpec {
            train_size: 1024,
            valid_size: 500,
            test_size: 1000,
            seed: 1,
        };
        let (tr, va, te) = split(&d, spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (1024, 500, 1000));
    }

    #[test]
    fn synth_is_deterministic_and_rejects_zero() {
        assert_eq!(
            synth_generate(50, 4, 3, 0.2, 11).unwrap(),
            synth_generate(50, 4, 3, 0.2, 11).unwrap()
        );
        assert_ne!(
            synth_generate(50, 4, 3, 0.2, 11).unwrap(),
            synth_generate(50, 4, 3, 0.2, 12).unwrap()
        );
        assert!(synth_generate(0, 4, 3, 0.2, 11).is_err());
    }

    #[test]
    fn synth_has_cluster_structure() {
        let (d, latent) = SynthSpec::new(1000, 16, 4, 0.3, 5).generate_with_latent().unwrap();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
        // Stride through pairs to keep this quick.
        for i in (0..d.len()).step_by(3) {
            for j in (i + 1..d.len()).step_by(7) {
                let c = cosine_similarity(&d.samples()[i].features, &d.samples()[j].features).unwrap();
                if latent[i] == latent[j] {
                    within += c;
                    nw += 1;
                } else {
                    across += c;
                    na += 1;
                }
            }
        }
        assert!(within / nw as f64 > across / na as f64);
    }

    proptest! {
        #[test]
        fn binarize_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, t in -5.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(binarize(lo, t) <= binarize(hi, t));
        }

        #[test]
        fn split_is_disjoint(n in 3usize..60, seed in any::<u64>(), a in 0usize..20, b in 0usize..20, c in 0usize..20) {
            let d = synth_generate(n, 2, 2, 0.1, 0).unwrap();
            let spec = SplitSpec { train_size: a, valid_size: b, test_size: c, seed };
            match split(&d, spec) {
                Ok((tr, va, te)) => {
                    let mut seen = HashSet::new();
                    for id in tr.ids().into_iter().chain(va.ids()).chain(te.ids()) {
                        prop_assert!(d.contains(id));
                        prop_assert!(seen.insert(id));
                    }
                }
                Err(_) => prop_assert!(a + b + c > n),
            }
        }
    }
}
