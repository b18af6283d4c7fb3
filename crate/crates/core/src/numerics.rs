//! Small deterministic linear-algebra, selection and random-number primitives.
//!
//! Everything is `f64`. Selection ties are always broken toward the lower index
//! so that every downstream result is reproducible.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::usage(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::usage("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Mat::from_vec(rows.len(), cols, data)
    }

    /// I.i.d. Gaussian entries with the given standard deviation.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Row-vector products `rows[r] * self`, written to `out[r]`. Each entry
    /// accumulates in ascending row order of `self`, so the result matches
    /// repeated [`axpy`] bit for bit.
    pub fn left_mul_rows(&self, rows: &[&[f64]], out: &mut [Vec<f64>]) {
        debug_assert_eq!(rows.len(), out.len());
        let mut r = 0;
        while r + 4 <= rows.len() {
            let (a, o) = (&rows[r..r + 4], &mut out[r..r + 4]);
            self.left_mul_tile::<4>(a.try_into().unwrap(), o.try_into().unwrap());
            r += 4;
        }
        for (a, o) in rows[r..].iter().zip(&mut out[r..]) {
            self.left_mul_tile::<1>(&[a], std::slice::from_mut(o).try_into().unwrap());
        }
    }

    fn left_mul_tile<const R: usize>(&self, rows: &[&[f64]; R], out: &mut [Vec<f64>; R]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: the CPU supports AVX, checked just above.
            return unsafe { self.left_mul_tile_avx(rows, out) };
        }
        self.left_mul_tile_portable(rows, out)
    }

    // Same code with wider registers. No FMA, so rounding is unchanged.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx")]
    unsafe fn left_mul_tile_avx<const R: usize>(&self, rows: &[&[f64]; R], out: &mut [Vec<f64>; R]) {
        self.left_mul_tile_portable(rows, out)
    }

    #[inline(always)]
    fn left_mul_tile_portable<const R: usize>(&self, rows: &[&[f64]; R], out: &mut [Vec<f64>; R]) {
        const W: usize = 8;
        let cols = self.cols;
        let rows: [&[f64]; R] = std::array::from_fn(|r| &rows[r][..self.rows]);
        for o in out.iter_mut() {
            o.clear();
            o.resize(cols, 0.0);
        }
        let mut c0 = 0;
        while c0 + W <= cols {
            let mut acc = [[0.0; W]; R];
            for j in 0..self.rows {
                let b: &[f64; W] = self.data[j * cols + c0..j * cols + c0 + W].try_into().unwrap();
                for (acc, a) in acc.iter_mut().zip(&rows) {
                    let x = a[j];
                    for (v, w) in acc.iter_mut().zip(b) {
                        *v += x * w;
                    }
                }
            }
            for (o, acc) in out.iter_mut().zip(&acc) {
                o[c0..c0 + W].copy_from_slice(acc);
            }
            c0 += W;
        }
        for c in c0..cols {
            for (o, a) in out.iter_mut().zip(&rows) {
                let mut v = 0.0;
                for j in 0..self.rows {
                    v += a[j] * self.data[j * cols + c];
                }
                o[c] = v;
            }
        }
    }

    /// Population standard deviation of all entries.
    pub fn std(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        (self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `acc += scale * x`
#[inline]
pub fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::usage("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::usage("softmax input must be finite"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Descending by score, ties to the lower index.
#[inline]
pub fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `k` largest scores, sorted by descending score with ties
/// going to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::usage(format!(
            "top-k with k={k} over {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    Ok(idx)
}

/// Top-k restricted to a candidate subset, same ordering rule.
pub fn top_k_within(scores: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut idx = candidates.to_vec();
    idx.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    idx.dedup();
    idx.truncate(k);
    idx
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Sample standard deviation (n-1); zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded counter-based generator (ChaCha8 keyed by `seed`, one keystream per
/// `stream`). Equal `(seed, stream)` pairs give bit-identical sequences, and
/// [`Rng::split`] derives child generators purely from the parent's identity,
/// never from how much of the parent stream has been consumed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child generator number `index`.
    pub fn split(&self, index: u64) -> Rng {
        let key = mix64(self.seed ^ mix64(self.stream.wrapping_add(GOLDEN)));
        Rng::with_stream(key, index)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_huge_logit() {
        let p = softmax(&[1e30, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // exp(i) / (e + e^2 + e^3) evaluated with 40 significant digits
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for i in 0..3 {
            assert!((p[i] - expect[i]).abs() < 1e-15, "{i}: {} vs {}", p[i], expect[i]);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.9, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn top_k_full_and_overflow() {
        let s = [0.3, 0.1, 0.2];
        assert_eq!(top_k_indices(&s, 3).unwrap(), vec![0, 2, 1]);
        assert!(top_k_indices(&s, 4).is_err());
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let n = 8 + rng.below(40);
            // coarse values so ties actually happen
            let s: Vec<f64> = (0..n).map(|_| (rng.below(10)) as f64).collect();
            let mut oracle: Vec<usize> = (0..n).collect();
            oracle.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
            oracle.truncate(8);
            assert_eq!(top_k_indices(&s, 8).unwrap(), oracle);
        }
    }

    #[test]
    fn top_k_within_subset() {
        let s = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(top_k_within(&s, &[3, 1, 2], 2), vec![1, 2]);
        assert_eq!(top_k_within(&s, &[3], 2), vec![3]);
    }

    #[test]
    fn argmax_first_max() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn rng_streams_reproducible() {
        let a: Vec<u64> = (0..5).map({
            let mut r = Rng::new(7);
            move |_| r.next_u64()
        }).collect();
        let b: Vec<u64> = (0..5).map({
            let mut r = Rng::new(7);
            move |_| r.next_u64()
        }).collect();
        assert_eq!(a, b);
        let mut s1 = Rng::new(7).split(1);
        let mut s2 = Rng::new(7).split(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
    }

    #[test]
    fn split_ignores_parent_position() {
        let fresh = Rng::new(3);
        let mut used = Rng::new(3);
        for _ in 0..17 {
            used.next_u64();
        }
        assert_eq!(fresh.split(4).next_u64(), used.split(4).next_u64());
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..13).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn left_mul_rows_matches_axpy_exactly() {
        let mut rng = Rng::new(11);
        // 19 columns exercises both the 8-wide blocks and the tail
        let b = Mat::gaussian(7, 19, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..7).map(|_| rng.normal()).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mut out = vec![Vec::new(); rows.len()];
        b.left_mul_rows(&refs, &mut out);
        for (row, got) in rows.iter().zip(&out) {
            let mut want = vec![0.0; 19];
            for (j, &x) in row.iter().enumerate() {
                axpy(&mut want, x, b.row(j));
            }
            assert_eq!(got, &want);
        }
    }
}
