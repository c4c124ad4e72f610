//! Low-rank adapters and parameter-level aggregation.
//!
//! An adapter layer is a pair `(B, A)` with `B: d1×r` and `A: r×d2`, so the
//! adapted layer computes `o = W0·x + B·(A·x)`. Several shard adapters can
//! be merged into one update three ways:
//!
//! * [`aggregate_decomposition`]: `B̄ = Σ ω_k B_k`, `Ā = Σ ω_k A_k`, still
//!   rank `r`;
//! * [`aggregate_nondecomposition`]: `Σ ω_k B_k A_k` as a dense `d1×d2`
//!   matrix ([`MergedDense`]);
//! * [`aggregate_concat`]: `B' = [ω_1 B_1 … ω_K B_K]` stacked against
//!   `A' = [A_1; …; A_K]`, a rank `K·r` adapter whose product equals the
//!   dense sum exactly in exact arithmetic.
//!
//! The first is not equal to the other two in general because `B̄Ā`
//! contains cross terms `ω_i ω_j B_i A_j`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ApaError, Result};
use crate::numerics::{gaussian_matrix, matmul, Matrix, SeededRng, Vector};

/// Anything that adds a per-layer update to the frozen base output.
///
/// `slot` indexes the adapted layers of the base model, in order.
pub trait LayerUpdate {
    fn slot_count(&self) -> usize;

    /// Input and output width of slot `slot`, as `(d1, d2)`.
    fn slot_shape(&self, slot: usize) -> (usize, usize);

    /// `out += ΔW_slot · x`.
    fn add_delta(&self, slot: usize, x: &[f64], out: &mut [f64]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    b: Matrix,
    a: Matrix,
}

impl AdapterLayer {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() || b.cols() == 0 {
            return Err(ApaError::Shape(format!(
                "adapter B is {}x{} but A is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        Ok(Self { b, a })
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// `(d1, d2)`: output and input width.
    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// The dense update `B·A`.
    pub fn product(&self) -> Matrix {
        matmul(&self.b, &self.a).expect("adapter factors conform by construction")
    }

    /// `out += B·(A·x)` through the rank-r bottleneck.
    pub fn add_delta(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let bottleneck = self.a.matvec(x)?;
        self.b.matvec_add_into(&bottleneck, out)
    }

    fn zeros_like(&self) -> Self {
        Self {
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
        }
    }
}

/// `o = W0·x + B·(A·x)`.
pub fn layer_forward(w0: &Matrix, layer: &AdapterLayer, x: &[f64]) -> Result<Vector> {
    if layer.shape() != w0.shape() {
        return Err(ApaError::Shape(format!(
            "adapter layer {:?} does not fit base weight {:?}",
            layer.shape(),
            w0.shape()
        )));
    }
    let mut out = w0.matvec(x)?;
    layer.add_delta(x, &mut out)?;
    Ok(Vector(out))
}

/// One adapter per shard, or the result of merging several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    /// Owning shard; `None` for merged or full-data adapters.
    pub shard: Option<usize>,
    pub seed: u64,
    layers: Vec<AdapterLayer>,
}

impl Adapter {
    pub fn new(layers: Vec<AdapterLayer>, shard: Option<usize>, seed: u64) -> Self {
        Self { shard, seed, layers }
    }

    pub fn layers(&self) -> &[AdapterLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdapterLayer] {
        &mut self.layers
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(AdapterLayer::shape).collect()
    }

    /// Rank of the first layer (all layers share one rank unless built by hand).
    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, AdapterLayer::rank)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.b.data().len() + l.a.data().len()).sum()
    }

    /// All parameters, `B` then `A` per layer.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.b.data().iter().chain(l.a.data()).copied())
    }

    pub fn zeros_like(&self) -> Adapter {
        Adapter {
            shard: self.shard,
            seed: self.seed,
            layers: self.layers.iter().map(AdapterLayer::zeros_like).collect(),
        }
    }

    /// Largest absolute parameter difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Adapter) -> f64 {
        if self.shapes() != other.shapes() || self.layers.iter().zip(&other.layers).any(|(a, b)| a.rank() != b.rank()) {
            return f64::INFINITY;
        }
        self.parameters()
            .zip(other.parameters())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise parameter equality (distinguishes `0.0` from `-0.0`).
    pub fn bit_identical(&self, other: &Adapter) -> bool {
        self.shapes() == other.shapes()
            && self.parameter_count() == other.parameter_count()
            && self
                .parameters()
                .zip(other.parameters())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| ApaError::json("serialize adapter", e))?;
        fs::write(path, s).map_err(|e| ApaError::io(format!("write {}", path.display()), e))
    }

    pub fn load_json(path: &Path) -> Result<Adapter> {
        let s = fs::read_to_string(path).map_err(|e| ApaError::io(format!("read {}", path.display()), e))?;
        let adapter: Adapter =
            serde_json::from_str(&s).map_err(|e| ApaError::json(format!("parse {}", path.display()), e))?;
        adapter.validate()?;
        Ok(adapter)
    }

    fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let l = AdapterLayer::new(l.b.clone(), l.a.clone())?;
            Matrix::from_vec(l.b.rows(), l.b.cols(), l.b.data().to_vec())?;
            Matrix::from_vec(l.a.rows(), l.a.cols(), l.a.data().to_vec())?;
        }
        Ok(())
    }
}

impl LayerUpdate for Adapter {
    fn slot_count(&self) -> usize {
        self.layers.len()
    }

    fn slot_shape(&self, slot: usize) -> (usize, usize) {
        self.layers[slot].shape()
    }

    fn add_delta(&self, slot: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.layers[slot].add_delta(x, out)
    }
}

/// Dense per-layer updates, the result of non-decomposition merging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedDense {
    layers: Vec<Matrix>,
}

impl MergedDense {
    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }
}

impl LayerUpdate for MergedDense {
    fn slot_count(&self) -> usize {
        self.layers.len()
    }

    fn slot_shape(&self, slot: usize) -> (usize, usize) {
        self.layers[slot].shape()
    }

    fn add_delta(&self, slot: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.layers[slot].matvec_add_into(x, out)
    }
}

/// Fresh adapter: `A ~ N(0, stddev²)`, `B = 0`, so `BA = 0`.
///
/// `shapes` lists `(d1, d2)` of every adapted layer.
pub fn init_adapter(shapes: &[(usize, usize)], rank: usize, stddev: f64, seed: u64) -> Result<Adapter> {
    if rank == 0 {
        return Err(ApaError::InvalidArgument("adapter rank must be >= 1".into()));
    }
    let mut rng = SeededRng::new(seed);
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(i, &(d1, d2))| {
            if rank > d1.min(d2) {
                return Err(ApaError::InvalidArgument(format!(
                    "rank {rank} exceeds min({d1}, {d2}) for adapted layer {i}"
                )));
            }
            let a = gaussian_matrix(rank, d2, stddev, &mut rng)?;
            AdapterLayer::new(Matrix::zeros(d1, rank), a)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Adapter::new(layers, None, seed))
}

/// Probability simplex weights, one per adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(ApaError::Empty("weight vector".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(ApaError::InvalidArgument(format!(
                "weights must be finite and >= 0: {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ApaError::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, hot: usize) -> Self {
        let mut w = vec![0.0; k];
        w[hot] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(0, |best, (i, &w)| if w > self.0[best] { i } else { best })
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_conformable(adapters: &[Adapter], weights: &WeightVector) -> Result<()> {
    let first = adapters
        .first()
        .ok_or_else(|| ApaError::Empty("no adapters to aggregate".into()))?;
    if weights.len() != adapters.len() {
        return Err(ApaError::Shape(format!(
            "{} weights for {} adapters",
            weights.len(),
            adapters.len()
        )));
    }
    for (k, ad) in adapters.iter().enumerate().skip(1) {
        let same = ad.layers.len() == first.layers.len()
            && ad
                .layers
                .iter()
                .zip(&first.layers)
                .all(|(a, b)| a.shape() == b.shape() && a.rank() == b.rank());
        if !same {
            return Err(ApaError::Shape(format!("adapter {k} differs in shape from adapter 0")));
        }
    }
    Ok(())
}

/// Weighted sums of `B` and of `A`, independently per layer.
pub fn aggregate_decomposition(adapters: &[Adapter], weights: &WeightVector) -> Result<Adapter> {
    check_conformable(adapters, weights)?;
    let mut out = adapters[0].zeros_like();
    out.shard = None;
    out.seed = 0;
    aggregate_decomposition_into(adapters, weights, &mut out)?;
    Ok(out)
}

/// Same as [`aggregate_decomposition`], writing into a reusable buffer
/// shaped like the inputs.
pub fn aggregate_decomposition_into(adapters: &[Adapter], weights: &WeightVector, out: &mut Adapter) -> Result<()> {
    check_conformable(adapters, weights)?;
    if out.shapes() != adapters[0].shapes() || out.rank() != adapters[0].rank() {
        return Err(ApaError::Shape("aggregation buffer does not match adapters".into()));
    }
    for (slot, dst) in out.layers.iter_mut().enumerate() {
        dst.b.data_mut().fill(0.0);
        dst.a.data_mut().fill(0.0);
        for (ad, &w) in adapters.iter().zip(weights.as_slice()) {
            let src = &ad.layers[slot];
            dst.b.add_scaled(w, &src.b)?;
            dst.a.add_scaled(w, &src.a)?;
        }
    }
    Ok(())
}

/// `Σ ω_k B_k A_k` per layer as dense matrices.
pub fn aggregate_nondecomposition(adapters: &[Adapter], weights: &WeightVector) -> Result<MergedDense> {
    check_conformable(adapters, weights)?;
    let layers = (0..adapters[0].layers.len())
        .map(|slot| {
            let (d1, d2) = adapters[0].layers[slot].shape();
            let mut acc = Matrix::zeros(d1, d2);
            for (ad, &w) in adapters.iter().zip(weights.as_slice()) {
                if w == 0.0 {
                    continue;
                }
                acc.add_scaled(w, &ad.layers[slot].product())?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MergedDense { layers })
}

/// Rank-`K·r` adapter `B' = [ω_1 B_1 … ω_K B_K]`, `A' = [A_1; …; A_K]`.
pub fn aggregate_concat(adapters: &[Adapter], weights: &WeightVector) -> Result<Adapter> {
    check_conformable(adapters, weights)?;
    let k = adapters.len();
    let layers = (0..adapters[0].layers.len())
        .map(|slot| {
            let (d1, d2) = adapters[0].layers[slot].shape();
            let r = adapters[0].layers[slot].rank();
            let mut b = Matrix::zeros(d1, k * r);
            let mut a = Matrix::zeros(k * r, d2);
            for (j, (ad, &w)) in adapters.iter().zip(weights.as_slice()).enumerate() {
                let src = &ad.layers[slot];
                for row in 0..d1 {
                    for c in 0..r {
                        b.set(row, j * r + c, w * src.b.get(row, c));
                    }
                }
                for row in 0..r {
                    a.data_mut()[(j * r + row) * d2..(j * r + row + 1) * d2].copy_from_slice(src.a.row(row));
                }
            }
            AdapterLayer::new(b, a)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Adapter::new(layers, None, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_adapter(shapes: &[(usize, usize)], r: usize, seed: u64) -> Adapter {
        let mut rng = SeededRng::new(seed);
        let layers = shapes
            .iter()
            .map(|&(d1, d2)| {
                AdapterLayer::new(
                    gaussian_matrix(d1, r, 1.0, &mut rng).unwrap(),
                    gaussian_matrix(r, d2, 1.0, &mut rng).unwrap(),
                )
                .unwrap()
            })
            .collect();
        Adapter::new(layers, None, seed)
    }

    fn delta(update: &dyn LayerUpdate, slot: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; update.slot_shape(slot).0];
        update.add_delta(slot, x, &mut out).unwrap();
        out
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let ad = init_adapter(&[(4, 3), (2, 4)], 2, 0.02, 9).unwrap();
        assert!(ad.layers().iter().all(|l| l.b().is_zero() && !l.a().is_zero()));
        assert!(delta(&ad, 0, &[1.0, -2.0, 3.0]).iter().all(|&v| v == 0.0));
        assert_eq!(ad, init_adapter(&[(4, 3), (2, 4)], 2, 0.02, 9).unwrap());
    }

    #[test]
    fn rank_boundary() {
        assert!(init_adapter(&[(4, 3)], 3, 0.02, 0).is_ok());
        assert!(matches!(
            init_adapter(&[(4, 3)], 4, 0.02, 0),
            Err(ApaError::InvalidArgument(_))
        ));
        assert!(init_adapter(&[(4, 3)], 0, 0.02, 0).is_err());
    }

    #[test]
    fn layer_forward_cases() {
        let w0 = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let zero_b = AdapterLayer::new(Matrix::zeros(2, 1), Matrix::from_rows(&[&[5.0, 6.0]])).unwrap();
        assert_eq!(layer_forward(&w0, &zero_b, &[1.0, 1.0]).unwrap().0, vec![3.0, 7.0]);

        let ident = AdapterLayer::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        let x = [0.5, -1.5, 2.0];
        assert_eq!(layer_forward(&Matrix::zeros(3, 3), &ident, &x).unwrap().0, x.to_vec());

        let ad = random_adapter(&[(3, 3)], 2, 4);
        let w0 = gaussian_matrix(3, 3, 1.0, &mut SeededRng::new(5)).unwrap();
        let x = [0.3, -0.7, 1.1];
        let mut dense = w0.clone();
        dense.add_scaled(1.0, &ad.layers()[0].product()).unwrap();
        let expected = dense.matvec(&x).unwrap();
        let got = layer_forward(&w0, &ad.layers()[0], &x).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!(layer_forward(&Matrix::zeros(2, 3), &ad.layers()[0], &x).is_err());
    }

    #[test]
    fn decomposition_fixed_points() {
        let ad = random_adapter(&[(4, 3)], 2, 1);
        let same = vec![ad.clone(), ad.clone(), ad.clone()];
        let w = WeightVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let merged = aggregate_decomposition(&same, &w).unwrap();
        assert!(merged.max_abs_diff(&ad) < 1e-15);

        let others = vec![
            random_adapter(&[(4, 3)], 2, 2),
            ad.clone(),
            random_adapter(&[(4, 3)], 2, 3),
        ];
        let merged = aggregate_decomposition(&others, &WeightVector::one_hot(3, 1)).unwrap();
        assert_eq!(merged.max_abs_diff(&ad), 0.0);
    }

    #[test]
    fn decomposition_half_half_is_elementwise_mean() {
        let a = random_adapter(&[(3, 2)], 1, 10);
        let b = random_adapter(&[(3, 2)], 1, 11);
        let merged = aggregate_decomposition(&[a.clone(), b.clone()], &WeightVector::uniform(2)).unwrap();
        let l = &merged.layers()[0];
        for i in 0..3 {
            let mean = (a.layers()[0].b().get(i, 0) + b.layers()[0].b().get(i, 0)) / 2.0;
            assert!((l.b().get(i, 0) - mean).abs() < 1e-15);
        }
        for j in 0..2 {
            let mean = (a.layers()[0].a().get(0, j) + b.layers()[0].a().get(0, j)) / 2.0;
            assert!((l.a().get(0, j) - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn nondecomposition_cases() {
        let ads: Vec<_> = (0..3).map(|s| random_adapter(&[(4, 5)], 2, 20 + s)).collect();
        let hot = aggregate_nondecomposition(&ads, &WeightVector::one_hot(3, 2)).unwrap();
        assert_eq!(hot.layers()[0], ads[2].layers()[0].product());

        let zeroed: Vec<_> = ads.iter().map(Adapter::zeros_like).collect();
        let z = aggregate_nondecomposition(&zeroed, &WeightVector::uniform(3)).unwrap();
        assert!(z.layers()[0].is_zero());

        let w = WeightVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        let merged = aggregate_nondecomposition(&ads, &w).unwrap();
        // term-by-term oracle: entry (i, j) = Σ_k ω_k Σ_c B_k[i,c] A_k[c,j]
        for i in 0..4 {
            for j in 0..5 {
                let mut expected = 0.0;
                for (k, ad) in ads.iter().enumerate() {
                    let l = &ad.layers()[0];
                    for c in 0..2 {
                        expected += w[k] * l.b().get(i, c) * l.a().get(c, j);
                    }
                }
                assert!((merged.layers()[0].get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_cases() {
        let ad = random_adapter(&[(3, 4)], 2, 30);
        let single = aggregate_concat(std::slice::from_ref(&ad), &WeightVector::one_hot(1, 0)).unwrap();
        assert_eq!(single.layers()[0], ad.layers()[0]);

        let pair = vec![random_adapter(&[(2, 2)], 1, 31), random_adapter(&[(2, 2)], 1, 32)];
        let w = WeightVector::new(vec![0.25, 0.75]).unwrap();
        let cat = aggregate_concat(&pair, &w).unwrap();
        let dense = aggregate_nondecomposition(&pair, &w).unwrap();
        assert_eq!(cat.rank(), 2);
        for x in [[1.0, 0.0], [0.3, -2.0], [-1.0, 5.0]] {
            let a = delta(&cat, 0, &x);
            let b = delta(&dense, 0, &x);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }

        let cat = aggregate_concat(&pair, &WeightVector::one_hot(2, 1)).unwrap();
        let x = [0.7, -0.2];
        assert_eq!(delta(&cat, 0, &x), delta(&pair[1], 0, &x));
    }

    #[test]
    fn decomposition_differs_from_nondecomposition_with_cross_terms() {
        // B_1 A_2 and B_2 A_1 are nonzero, so B̄Ā picks up cross terms.
        let e = |rows: &[&[f64]]| Matrix::from_rows(rows);
        let a1 = Adapter::new(
            vec![AdapterLayer::new(e(&[&[1.0], &[0.0]]), e(&[&[1.0, 0.0]])).unwrap()],
            Some(0),
            0,
        );
        let a2 = Adapter::new(
            vec![AdapterLayer::new(e(&[&[0.0], &[1.0]]), e(&[&[0.0, 1.0]])).unwrap()],
            Some(1),
            0,
        );
        let w = WeightVector::uniform(2);
        let d = aggregate_decomposition(&[a1.clone(), a2.clone()], &w).unwrap();
        let n = aggregate_nondecomposition(&[a1, a2], &w).unwrap();
        let dense_d = d.layers()[0].product();
        assert_eq!(dense_d, e(&[&[0.25, 0.25], &[0.25, 0.25]]));
        assert_eq!(n.layers()[0], e(&[&[0.5, 0.0], &[0.0, 0.5]]));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let a = random_adapter(&[(3, 3)], 1, 1);
        let b = random_adapter(&[(3, 2)], 1, 2);
        let w = WeightVector::uniform(2);
        assert!(aggregate_decomposition(&[a.clone(), b.clone()], &w).is_err());
        assert!(aggregate_nondecomposition(&[a.clone(), b.clone()], &w).is_err());
        assert!(aggregate_concat(&[a.clone(), b], &w).is_err());
        assert!(aggregate_concat(&[a], &w).is_err());
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn scratch_buffer_matches_fresh_allocation() {
        let ads: Vec<_> = (0..4).map(|s| random_adapter(&[(5, 4), (3, 5)], 2, 40 + s)).collect();
        let mut buf = ads[0].zeros_like();
        for w in [vec![0.1, 0.2, 0.3, 0.4], vec![0.7, 0.1, 0.1, 0.1]] {
            let w = WeightVector::new(w).unwrap();
            aggregate_decomposition_into(&ads, &w, &mut buf).unwrap();
            let fresh = aggregate_decomposition(&ads, &w).unwrap();
            assert!(buf.bit_identical(&fresh));
        }
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let mut ad = random_adapter(&[(4, 3), (2, 4)], 2, 77);
        ad.shard = Some(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        ad.save_json(&p).unwrap();
        let back = Adapter::load_json(&p).unwrap();
        assert!(back.bit_identical(&ad));
        assert_eq!(back.shard, Some(3));
    }

    fn weights_strategy(k: usize) -> impl Strategy<Value = WeightVector> {
        prop::collection::vec(0.0f64..1.0, k).prop_map(|raw| {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let mut w: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / total).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            WeightVector::new(w).unwrap()
        })
    }

    proptest! {
        #[test]
        fn concat_matches_dense_sum(
            (k, r, d1, d2, seed, w) in (1usize..=8, 1usize..=4, 4usize..=16, 4usize..=16, any::<u64>())
                .prop_flat_map(|(k, r, d1, d2, s)| (Just(k), Just(r), Just(d1), Just(d2), Just(s), weights_strategy(k)))
        ) {
            let ads: Vec<_> = (0..k).map(|i| random_adapter(&[(d1, d2)], r, seed.wrapping_add(i as u64))).collect();
            let cat = aggregate_concat(&ads, &w).unwrap();
            let dense = aggregate_nondecomposition(&ads, &w).unwrap();
            let mut rng = SeededRng::new(seed ^ 0xABCD);
            for _ in 0..10 {
                let x: Vec<f64> = (0..d2).map(|_| rng.standard_normal()).collect();
                let a = delta(&cat, 0, &x);
                let b = delta(&dense, 0, &x);
                let diff = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                prop_assert!(diff <= 1e-10, "diff {diff}");
            }
        }

        #[test]
        fn one_hot_schemes_agree(k in 1usize..6, hot in 0usize..6, seed in any::<u64>()) {
            let hot = hot % k;
            let ads: Vec<_> = (0..k).map(|i| random_adapter(&[(5, 6)], 2, seed.wrapping_add(i as u64))).collect();
            let w = WeightVector::one_hot(k, hot);
            let d = aggregate_decomposition(&ads, &w).unwrap();
            let n = aggregate_nondecomposition(&ads, &w).unwrap();
            let c = aggregate_concat(&ads, &w).unwrap();
            let x: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.7).collect();
            let reference = delta(&ads[hot], 0, &x);
            prop_assert_eq!(delta(&d, 0, &x), reference.clone());
            prop_assert_eq!(delta(&n, 0, &x), ads[hot].layers()[0].product().matvec(&x).unwrap());
            prop_assert_eq!(delta(&c, 0, &x), reference);
        }

        #[test]
        fn aggregation_is_linear_in_parameters(seed in any::<u64>(), alpha in -2.0f64..2.0) {
            // f(P + αQ) == f(P) + α f(Q) with ω fixed, checked on the dense and decomposition forms.
            let p: Vec<_> = (0..3).map(|i| random_adapter(&[(4, 4)], 2, seed.wrapping_add(i))).collect();
            let q: Vec<_> = (0..3).map(|i| random_adapter(&[(4, 4)], 2, seed.wrapping_add(100 + i))).collect();
            let combo: Vec<_> = p.iter().zip(&q).map(|(a, b)| {
                let mut c = a.clone();
                for (lc, lb) in c.layers.iter_mut().zip(&b.layers) {
                    lc.b.add_scaled(alpha, &lb.b).unwrap();
                    lc.a.add_scaled(alpha, &lb.a).unwrap();
                }
                c
            }).collect();
            let w = WeightVector::new(vec![0.2, 0.3, 0.5]).unwrap();
            let fc = aggregate_decomposition(&combo, &w).unwrap();
            let fp = aggregate_decomposition(&p, &w).unwrap();
            let fq = aggregate_decomposition(&q, &w).unwrap();
            for ((c, a), b) in fc.parameters().zip(fp.parameters()).zip(fq.parameters()) {
                prop_assert!((c - (a + alpha * b)).abs() < 1e-12);
            }
        }
    }
}
