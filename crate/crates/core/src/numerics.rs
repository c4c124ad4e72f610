//! Dense linear algebra, seeded randomness and scalar kernels.
//!
//! Everything here is small and sequential. Reductions always
//! accumulate in a fixed order (row-major, left to right), so two runs over
//! the same inputs produce bit-identical results. Exact unlearning relies on
//! that: a retrained adapter is compared against a from-scratch oracle with
//! `==`, not with a tolerance.
//!
//! # Random stream
//!
//! [`SeededRng`] wraps ChaCha8 (a counter-based generator with a documented,
//! platform-independent output stream). Uniform doubles take the top 53
//! bits of `next_u64`; Gaussians use the Box–Muller transform, consuming two
//! uniforms per pair and caching the second value. Shuffles are Fisher–Yates
//! drawing indices with Lemire's multiply-shift reduction. None of this
//! depends on `rand`'s distribution code, so a seed means the same thing
//! across dependency upgrades.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApaError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            if r > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{:?}", &self.row(r)[..self.cols.min(6)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ApaError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ApaError::NonFinite(format!("matrix entry {pos} is {}", data[pos])));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and docs.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged matrix literal");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `out = self · x`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.cols || out.len() != self.rows {
            return Err(ApaError::Shape(format!(
                "matvec: matrix {}x{} with input {} into output {}",
                self.rows,
                self.cols,
                x.len(),
                out.len()
            )));
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
        Ok(())
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out)?;
        Ok(out)
    }

    /// `out += self · x`.
    pub fn matvec_add_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.cols || out.len() != self.rows {
            return Err(ApaError::Shape(format!(
                "matvec: matrix {}x{} with input {} into output {}",
                self.rows,
                self.cols,
                x.len(),
                out.len()
            )));
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
        Ok(())
    }

    /// `out = selfᵀ · y`, accumulated row by row.
    pub fn matvec_transpose_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        if y.len() != self.rows || out.len() != self.cols {
            return Err(ApaError::Shape(format!(
                "transposed matvec: matrix {}x{} with input {} into output {}",
                self.rows,
                self.cols,
                y.len(),
                out.len()
            )));
        }
        out.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * yr;
            }
        }
        Ok(())
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (m, &vc) in row.iter_mut().zip(v) {
                *m += s * vc;
            }
        }
    }

    /// `self += scale · other` elementwise.
    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ApaError::Shape(format!(
                "add: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix product. Each output entry is a left-to-right dot product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(ApaError::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.cols {
            let mut acc = 0.0;
            for (k, &av) in arow.iter().enumerate() {
                acc += av * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Real vector. Derefs to a slice so kernels can take `&[f64]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Rejects non-finite entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ApaError::NonFinite(format!("vector entry {pos} is {}", data[pos])));
        }
        Ok(Self(data))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Unit-length copy, or an error for the zero vector.
    pub fn normalized(&self) -> Result<Vector> {
        let n = norm(&self.0);
        if n == 0.0 {
            return Err(ApaError::ZeroNorm);
        }
        Ok(Vector(self.0.iter().map(|v| v / n).collect()))
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Cosine of the angle between `u` and `v`, clamped into `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ApaError::Shape(format!("cosine: lengths {} and {}", u.len(), v.len())));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(ApaError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `softmax(temperature · scores)` with max subtraction.
///
/// Temperature zero gives the uniform distribution regardless of scores.
pub fn softmax_stable(scores: &[f64], temperature: f64) -> Result<Vector> {
    if scores.is_empty() {
        return Err(ApaError::Empty("softmax scores".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(ApaError::InvalidArgument(format!(
            "temperature must be finite and >= 0, got {temperature}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ApaError::NonFinite("softmax score".into()));
    }
    let k = scores.len();
    if temperature == 0.0 {
        return Ok(Vector(vec![1.0 / k as f64; k]));
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s * temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Vector(exps.into_iter().map(|e| e / total).collect()))
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// splitmix64 finalizer. Used to derive child seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream. Single owner; derive children with
/// [`SeededRng::child`] for parallel work.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for stream `stream`, not advancing `self`.
    pub fn child(&self, stream: u64) -> SeededRng {
        SeededRng::new(mix_seed(self.seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        // Lemire multiply-shift with rejection for exact uniformity.
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal via Box–Muller.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * theta.sin());
        radius * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, stddev: f64) -> f64 {
        mean + stddev * self.standard_normal()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// i.i.d. `N(0, stddev²)` entries, filled row-major.
pub fn gaussian_matrix(rows: usize, cols: usize, stddev: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if !(stddev > 0.0 && stddev.is_finite()) {
        return Err(ApaError::InvalidArgument(format!(
            "stddev must be positive, got {stddev}"
        )));
    }
    let data = (0..rows * cols).map(|_| rng.normal(0.0, stddev)).collect();
    Ok(Matrix { rows, cols, data })
}

pub fn gaussian_vector(len: usize, stddev: f64, rng: &mut SeededRng) -> Vector {
    Vector((0..len).map(|_| rng.normal(0.0, stddev)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_times_m_is_m() {
        let m = Matrix::from_rows(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn zero_times_m_is_zero() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        assert!(matmul(&Matrix::zeros(4, 2), &m).unwrap().is_zero());
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3 times 2x3"), "{msg}");
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Matrix::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(ApaError::ZeroNorm)
        ));
    }

    #[test]
    fn softmax_examples() {
        let w = softmax_stable(&[3.0, -1.0, 40.0], 0.0).unwrap();
        assert!(w.iter().all(|&v| v == 1.0 / 3.0));
        let w = softmax_stable(&[0.0; 4], 1000.0).unwrap();
        assert!(w.iter().all(|&v| v == 0.25));
        // e^-0.1 / (e^-0.1 + e^-0.9) = 1 / (1 + e^-0.8)
        let w = softmax_stable(&[-0.1, -0.9], 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((w[0] - expected).abs() < 1e-15);
        assert!((w[0] - 0.6900).abs() < 5e-5);
        assert!((w[1] - 0.3100).abs() < 5e-5);
        assert!(softmax_stable(&[1.0], -1.0).is_err());
    }

    #[test]
    fn gaussian_is_deterministic_and_advances() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        let m1 = gaussian_matrix(3, 4, 1.0, &mut a).unwrap();
        assert_eq!(m1, gaussian_matrix(3, 4, 1.0, &mut b).unwrap());
        let m2 = gaussian_matrix(3, 4, 1.0, &mut a).unwrap();
        assert_ne!(m1, m2);
        assert!(gaussian_matrix(1, 1, 0.0, &mut a).is_err());
    }

    #[test]
    fn gaussian_sample_mean_within_four_sigma() {
        let n = 10_000;
        let sd = 0.02;
        let m = gaussian_matrix(100, 100, sd, &mut SeededRng::new(42)).unwrap();
        let mean = m.data().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 * sd / (n as f64).sqrt(), "mean {mean}");
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() / sd - 1.0).abs() < 0.05);
    }

    #[test]
    fn below_is_in_range_and_shuffle_permutes() {
        let mut rng = SeededRng::new(1);
        for b in 1..50u64 {
            assert!(rng.below(b) < b);
        }
        let mut v: Vec<u32> = (0..100).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }

    #[test]
    fn stream_is_pinned() {
        // Guards the documented generator: a change here breaks every
        // persisted seed.
        let mut rng = SeededRng::new(0);
        let first = rng.next_u64();
        let mut again = SeededRng::new(0);
        assert_eq!(first, again.next_u64());
        assert_ne!(SeededRng::new(0).child(1).next_u64(), first);
    }

    #[test]
    fn scalar_kernels() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(m, n, p, q)| {
                (arb_matrix(m, n), arb_matrix(n, p), arb_matrix(p, q))
            })
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().chain(right.data()).fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }

        #[test]
        fn softmax_sums_to_one_at_large_magnitude(
            scores in prop::collection::vec(-1e6f64..1e6, 1..12),
            tau in 0.0f64..10.0,
        ) {
            let w = softmax_stable(&scores, tau).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_preserves_argmax(
            scores in prop::collection::vec(-100.0f64..100.0, 2..10),
            tau in 1e-3f64..100.0,
        ) {
            let w = softmax_stable(&scores, tau).unwrap();
            let arg = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            let s = arg(&scores);
            // Ties in the output are only possible when scores tie or underflow.
            prop_assert!(w[arg(&w)] == w[s]);
        }

        #[test]
        fn cosine_is_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(norm(&u) > 1e-6 && norm(&v) > 1e-6);
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let a = cosine_similarity(&u, &v).unwrap();
            let b = cosine_similarity(&scaled, &v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
