//! Sliding windows over recordings, frame reshaping, and z-normalization.

use serde::{Deserialize, Serialize};

use crate::data::recording::{Recording, CHANNELS};
use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

/// Column-less window storage: `values` holds `len * w * CHANNELS` floats,
/// one contiguous `w x CHANNELS` block per window.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowSet {
    pub w: usize,
    pub values: Vec<f32>,
    pub labels: Vec<u32>,
    pub subjects: Vec<u32>,
    pub domains: Vec<u32>,
}

impl WindowSet {
    pub fn new(w: usize) -> Self {
        WindowSet {
            w,
            values: Vec::new(),
            labels: Vec::new(),
            subjects: Vec::new(),
            domains: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let stride = self.w * CHANNELS;
        &self.values[i * stride..(i + 1) * stride]
    }

    pub fn select(&self, indices: &[usize]) -> WindowSet {
        let mut out = WindowSet::new(self.w);
        for &i in indices {
            out.values.extend_from_slice(self.window(i));
            out.labels.push(self.labels[i]);
            out.subjects.push(self.subjects[i]);
            out.domains.push(self.domains[i]);
        }
        out
    }

    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0usize; k];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// floor((len - w)/stride) + 1 for len >= w, else 0.
pub fn expected_window_count(len: usize, w: usize, stride: usize) -> usize {
    if len < w {
        0
    } else {
        (len - w) / stride + 1
    }
}

fn majority_label(labels: &[u32]) -> u32 {
    let max = *labels.iter().max().expect("non-empty window") as usize;
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let best = *counts.iter().max().expect("non-empty counts");
    counts.iter().position(|&c| c == best).expect("max exists") as u32
}

/// Cuts one recording into labeled windows and appends them to `out`.
/// Stride is round(w * (1 - overlap)), at least 1; a recording shorter than
/// `w` contributes nothing. Returns the number of windows appended.
pub fn make_windows(
    rec: &Recording,
    w: usize,
    overlap: f64,
    subject_id: u32,
    domain_id: u32,
    out: &mut WindowSet,
) -> Result<usize> {
    if w == 0 {
        return Err(Error::config("window length must be positive"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config(format!("overlap {overlap} not in [0, 1)")));
    }
    if out.w != w {
        return Err(Error::shape("make_windows", &[out.w], &[w]));
    }
    let stride = ((w as f64 * (1.0 - overlap)).round() as usize).max(1);
    let count = expected_window_count(rec.len(), w, stride);
    for i in 0..count {
        let start = i * stride;
        out.values
            .extend_from_slice(&rec.samples[start * CHANNELS..(start + w) * CHANNELS]);
        out.labels.push(majority_label(&rec.labels[start..start + w]));
        out.subjects.push(subject_id);
        out.domains.push(domain_id);
    }
    Ok(count)
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    fn from_accumulators(sum: &[f64], sum_sq: &[f64], n: f64) -> ChannelStats {
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        ChannelStats { mean, std }
    }

    pub fn apply(&self, row: &mut [f32]) {
        for (c, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - self.mean[c]) / (self.std[c] + 1e-8)) as f32;
        }
    }
}

/// Training-split statistics per domain. Domains with no training rows get
/// `None` and must not appear outside the training split either.
pub fn compute_stats_per_domain(
    set: &WindowSet,
    train_indices: &[usize],
    n_domains: usize,
) -> Vec<Option<ChannelStats>> {
    let mut sums = vec![[0.0f64; CHANNELS]; n_domains];
    let mut sqs = vec![[0.0f64; CHANNELS]; n_domains];
    let mut counts = vec![0usize; n_domains];
    for &i in train_indices {
        let d = set.domains[i] as usize;
        counts[d] += set.w;
        for row in set.window(i).chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sums[d][c] += row[c] as f64;
                sqs[d][c] += row[c] as f64 * row[c] as f64;
            }
        }
    }
    (0..n_domains)
        .map(|d| {
            (counts[d] > 0)
                .then(|| ChannelStats::from_accumulators(&sums[d], &sqs[d], counts[d] as f64))
        })
        .collect()
}

/// Normalizes every window in place with its domain's statistics.
pub fn apply_stats(set: &mut WindowSet, stats: &[Option<ChannelStats>]) -> Result<()> {
    for i in 0..set.len() {
        let d = set.domains[i] as usize;
        let s = stats
            .get(d)
            .and_then(|s| s.as_ref())
            .ok_or_else(|| {
                Error::config(format!("no training statistics for domain index {d}"))
            })?
            .clone();
        let stride = set.w * CHANNELS;
        for row in set.values[i * stride..(i + 1) * stride].chunks_exact_mut(CHANNELS) {
            s.apply(row);
        }
    }
    Ok(())
}

/// Per-window normalization: each window is standardized by its own
/// per-channel statistics, independent of any split.
pub fn normalize_per_window(set: &mut WindowSet) {
    let stride = set.w * CHANNELS;
    let n = set.w as f64;
    for i in 0..set.len() {
        let win = &mut set.values[i * stride..(i + 1) * stride];
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        for row in win.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sum[c] += row[c] as f64;
                sq[c] += row[c] as f64 * row[c] as f64;
            }
        }
        let stats = ChannelStats::from_accumulators(&sum, &sq, n);
        for row in win.chunks_exact_mut(CHANNELS) {
            stats.apply(row);
        }
    }
}

/// Stacks the selected windows into a (B, w, CHANNELS) tensor.
pub fn batch_tensor<T: Scalar>(set: &WindowSet, indices: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(indices.len() * set.w * CHANNELS);
    for &i in indices {
        data.extend(set.window(i).iter().map(|&v| T::cast_from(v as f64)));
    }
    Tensor::new(vec![indices.len(), set.w, CHANNELS], data).expect("sizes agree by construction")
}

/// (B, W, C) -> (B, N, L, C) with N = W/L. Row-major data is untouched;
/// framing is exactly a reshape.
pub fn frame_batch<T: Scalar>(batch: &Tensor<T>, l: usize) -> Result<Tensor<T>> {
    let s = batch.shape();
    if batch.rank() != 3 {
        return Err(Error::shape("frame", s, &[0, 0, 0]));
    }
    let (b, w, c) = (s[0], s[1], s[2]);
    if l == 0 || w % l != 0 {
        return Err(Error::config(format!(
            "window length {w} is not divisible by frame length {l}"
        )));
    }
    batch.reshaped(&[b, w / l, l, c])
}

/// Inverse of `frame_batch`.
pub fn unframe_batch<T: Scalar>(frames: &Tensor<T>) -> Result<Tensor<T>> {
    let s = frames.shape();
    if frames.rank() != 4 {
        return Err(Error::shape("unframe", s, &[0, 0, 0, 0]));
    }
    frames.reshaped(&[s[0], s[1] * s[2], s[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(len: usize, labels: Vec<u32>) -> Recording {
        Recording {
            id: "r".into(),
            rate: 50.0,
            subject: "s".into(),
            domain: "d".into(),
            samples: (0..len * CHANNELS).map(|i| i as f32).collect(),
            labels,
        }
    }

    #[test]
    fn window_counts_match_the_formula() {
        let mut out = WindowSet::new(128);
        assert_eq!(make_windows(&rec(128, vec![0; 128]), 128, 0.5, 0, 0, &mut out).unwrap(), 1);
        let mut out = WindowSet::new(128);
        assert_eq!(make_windows(&rec(256, vec![0; 256]), 128, 0.5, 0, 0, &mut out).unwrap(), 3);
        let starts: Vec<f32> = (0..3).map(|i| out.window(i)[0]).collect();
        assert_eq!(starts, vec![0.0, (64 * CHANNELS) as f32, (128 * CHANNELS) as f32]);
        let mut out = WindowSet::new(128);
        assert_eq!(make_windows(&rec(100, vec![0; 100]), 128, 0.5, 0, 0, &mut out).unwrap(), 0);
        assert!(out.is_empty());
    }

    #[test]
    fn window_count_matches_enumeration_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = rng.gen_range(1..400);
            let w = rng.gen_range(1..130);
            let overlap = rng.gen_range(0.0..1.0);
            let stride = ((w as f64 * (1.0 - overlap)).round() as usize).max(1);
            // direct enumeration of valid starts
            let mut n = 0usize;
            let mut start = 0usize;
            while start + w <= len {
                n += 1;
                start += stride;
            }
            let mut out = WindowSet::new(w);
            let r = rec(len, vec![0; len]);
            let got = make_windows(&r, w, overlap, 0, 0, &mut out).unwrap();
            assert_eq!(got, n, "len={len} w={w} overlap={overlap}");
            assert_eq!(got, expected_window_count(len, w, stride));
        }
    }

    #[test]
    fn majority_vote_breaks_ties_low() {
        let mut out = WindowSet::new(4);
        let r = rec(4, vec![2, 1, 2, 1]);
        make_windows(&r, 4, 0.0, 0, 0, &mut out).unwrap();
        assert_eq!(out.labels, vec![1]);
        let mut out = WindowSet::new(4);
        let r = rec(4, vec![3, 3, 0, 3]);
        make_windows(&r, 4, 0.0, 0, 0, &mut out).unwrap();
        assert_eq!(out.labels, vec![3]);
    }

    #[test]
    fn invalid_overlap_is_rejected() {
        let mut out = WindowSet::new(4);
        assert!(make_windows(&rec(8, vec![0; 8]), 4, 1.0, 0, 0, &mut out).is_err());
        assert!(make_windows(&rec(8, vec![0; 8]), 4, -0.1, 0, 0, &mut out).is_err());
    }

    #[test]
    fn frame_shapes_and_round_trip() {
        let batch = Tensor::<f32>::new(
            vec![2, 128, CHANNELS],
            (0..2 * 128 * CHANNELS).map(|i| i as f32).collect(),
        )
        .unwrap();
        let framed = frame_batch(&batch, 16).unwrap();
        assert_eq!(framed.shape(), &[2, 8, 16, CHANNELS]);
        assert_eq!(framed.data(), batch.data());
        let back = unframe_batch(&framed).unwrap();
        assert_eq!(back, batch);

        let single = Tensor::<f32>::zeros(&[1, 16, CHANNELS]);
        let framed = frame_batch(&single, 16).unwrap();
        assert_eq!(framed.shape(), &[1, 1, 16, CHANNELS]);

        let err = frame_batch(&Tensor::<f32>::zeros(&[1, 100, CHANNELS]), 16).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("100") && msg.contains("16"), "{msg}");
    }

    fn constant_window_set(values: &[(f32, u32)]) -> WindowSet {
        // one 2-sample window per (value, domain)
        let mut set = WindowSet::new(2);
        for &(v, d) in values {
            set.values.extend(std::iter::repeat(v).take(2 * CHANNELS));
            set.labels.push(0);
            set.subjects.push(0);
            set.domains.push(d);
        }
        set
    }

    #[test]
    fn zero_two_channel_normalizes_to_plus_minus_one() {
        let mut set = constant_window_set(&[(0.0, 0), (2.0, 0)]);
        let idx = [0usize, 1];
        let stats = compute_stats_per_domain(&set, &idx, 1);
        let s = stats[0].as_ref().unwrap();
        assert!(s.mean.iter().all(|&m| (m - 1.0).abs() < 1e-12));
        assert!(s.std.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        apply_stats(&mut set, &stats).unwrap();
        for &v in set.window(0) {
            assert!((v + 1.0).abs() < 1e-6);
        }
        for &v in set.window(1) {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_maps_to_near_zero() {
        let mut set = constant_window_set(&[(5.0, 0), (5.0, 0)]);
        let stats = compute_stats_per_domain(&set, &[0, 1], 1);
        apply_stats(&mut set, &stats).unwrap();
        assert!(set.values.iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn train_split_is_standardized_after_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut set = WindowSet::new(8);
        for i in 0..40 {
            for _ in 0..8 * CHANNELS {
                set.values.push(rng.gen_range(-3.0..5.0));
            }
            set.labels.push(0);
            set.subjects.push(0);
            set.domains.push((i % 2) as u32);
        }
        let train: Vec<usize> = (0..30).collect();
        let stats = compute_stats_per_domain(&set, &train, 2);
        apply_stats(&mut set, &stats).unwrap();
        for d in 0..2u32 {
            let mut sum = [0.0f64; CHANNELS];
            let mut sq = [0.0f64; CHANNELS];
            let mut n = 0.0;
            for &i in &train {
                if set.domains[i] != d {
                    continue;
                }
                n += 8.0;
                for row in set.window(i).chunks_exact(CHANNELS) {
                    for c in 0..CHANNELS {
                        sum[c] += row[c] as f64;
                        sq[c] += (row[c] as f64).powi(2);
                    }
                }
            }
            for c in 0..CHANNELS {
                let mean = sum[c] / n;
                let std = (sq[c] / n - mean * mean).sqrt();
                assert!(mean.abs() <= 1e-5, "domain {d} mean {mean}");
                assert!((std - 1.0).abs() <= 1e-4, "domain {d} std {std}");
            }
        }
    }

    #[test]
    fn missing_domain_statistics_is_an_error() {
        let mut set = constant_window_set(&[(1.0, 0), (2.0, 1)]);
        let stats = compute_stats_per_domain(&set, &[0], 2);
        assert!(stats[1].is_none());
        assert!(apply_stats(&mut set, &stats).is_err());
    }

    #[test]
    fn per_window_mode_standardizes_each_window() {
        let mut set = WindowSet::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            for _ in 0..4 * CHANNELS {
                set.values.push(rng.gen_range(-2.0..9.0));
            }
            set.labels.push(0);
            set.subjects.push(0);
            set.domains.push(0);
        }
        normalize_per_window(&mut set);
        for i in 0..3 {
            for c in 0..CHANNELS {
                let col: Vec<f64> = set.window(i).chunks_exact(CHANNELS).map(|r| r[c] as f64).collect();
                let mean = col.iter().sum::<f64>() / 4.0;
                assert!(mean.abs() < 1e-5);
            }
        }
    }
}
