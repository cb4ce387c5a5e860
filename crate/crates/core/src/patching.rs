//! Segmentation of byte sequences into contiguous patches.
//!
//! A patch boundary is placed *before* byte `i` when the next-byte entropy
//! `H(x_i)` exceeds the threshold. Index 0 is always a boundary, and an
//! optional cap forces a boundary once a patch reaches `max_len` bytes.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// How a [`Patching`] was produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Boundary where entropy (nats) exceeds `threshold`.
    Entropy { threshold: f64 },
    /// Boundaries every `k` bytes.
    FixedStride { k: usize },
    /// Boundary after every ASCII whitespace run.
    Whitespace,
}

/// Strictly increasing patch start offsets over `n` bytes.
///
/// For `n > 0` the boundaries start with 0 and stay below `n`, so the
/// patches tile `[0, n)`. The empty sequence has no patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patching {
    boundaries: Vec<usize>,
    n: usize,
    strategy: Strategy,
}

impl Patching {
    pub fn new(boundaries: Vec<usize>, n: usize, strategy: Strategy) -> Result<Self> {
        if n == 0 {
            if !boundaries.is_empty() {
                return Err(invalid!("empty sequence cannot have patch boundaries"));
            }
        } else {
            if boundaries.first() != Some(&0) {
                return Err(invalid!("patch boundaries must start at 0"));
            }
            if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid!("patch boundaries must be strictly increasing"));
            }
            if let Some(&last) = boundaries.last() {
                if last >= n {
                    return Err(invalid!("boundary {last} out of range for {n} bytes"));
                }
            }
        }
        Ok(Self { boundaries, n, strategy })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// Byte count.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Patch count.
    pub fn m(&self) -> usize {
        self.boundaries.len()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Half-open byte range of every patch.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.m());
        for (j, &b) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(j + 1).copied().unwrap_or(self.n);
            out.push((b, end));
        }
        out
    }

    /// Patch index of every byte.
    pub fn patch_of_bytes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n);
        for (j, (s, e)) in self.ranges().into_iter().enumerate() {
            out.extend(core::iter::repeat_n(j, e - s));
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges().into_iter().map(|(s, e)| e - s).collect()
    }

    pub fn split<'a>(&self, x: &'a [u8]) -> Vec<&'a [u8]> {
        self.ranges().into_iter().map(|(s, e)| &x[s..e]).collect()
    }
}

/// Entropy segmentation over per-position entropies `h` (nats).
pub fn segment_entropy(h: &[f64], threshold: f64, max_len: Option<usize>) -> Result<Patching> {
    if !threshold.is_finite() {
        return Err(invalid!("entropy threshold must be finite, got {threshold}"));
    }
    if max_len == Some(0) {
        return Err(invalid!("max patch length must be positive"));
    }
    let mut boundaries = Vec::new();
    let mut last = 0;
    for (i, &e) in h.iter().enumerate() {
        let capped = max_len.is_some_and(|cap| i - last >= cap);
        if i == 0 || e > threshold || capped {
            boundaries.push(i);
            last = i;
        }
    }
    Patching::new(boundaries, h.len(), Strategy::Entropy { threshold })
}

pub fn segment_fixed(n: usize, k: usize) -> Result<Patching> {
    if k < 1 {
        return Err(invalid!("stride must be at least 1"));
    }
    Patching::new((0..n).step_by(k).collect(), n, Strategy::FixedStride { k })
}

/// Boundary at 0 and right after every whitespace run that is followed by
/// more bytes; a trailing run joins the last patch.
pub fn segment_whitespace(x: &[u8], max_len: Option<usize>) -> Result<Patching> {
    if max_len == Some(0) {
        return Err(invalid!("max patch length must be positive"));
    }
    let mut boundaries = Vec::new();
    let mut last = 0;
    for i in 0..x.len() {
        let after_run = i > 0 && x[i - 1].is_ascii_whitespace() && !x[i].is_ascii_whitespace();
        let capped = max_len.is_some_and(|cap| i - last >= cap);
        if i == 0 || after_run || capped {
            boundaries.push(i);
            last = i;
        }
    }
    Patching::new(boundaries, x.len(), Strategy::Whitespace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchStats {
    pub mean_patch_size: f64,
    /// Patch size -> count.
    pub histogram: BTreeMap<usize, usize>,
    pub patches_per_byte: f64,
    pub total_bytes: usize,
    pub total_patches: usize,
}

/// Aggregate statistics; the mean is `sum(n) / sum(m)`.
pub fn patch_stats<'a, I>(patchings: I) -> Result<PatchStats>
where
    I: IntoIterator<Item = &'a Patching>,
{
    let mut histogram = BTreeMap::new();
    let (mut bytes, mut patches, mut any) = (0usize, 0usize, false);
    for p in patchings {
        any = true;
        bytes += p.n();
        patches += p.m();
        for s in p.sizes() {
            *histogram.entry(s).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Empty("patching stream"));
    }
    if patches == 0 {
        return Err(Error::Empty("patchings contain no bytes"));
    }
    Ok(PatchStats {
        mean_patch_size: bytes as f64 / patches as f64,
        histogram,
        patches_per_byte: patches as f64 / bytes as f64,
        total_bytes: bytes,
        total_patches: patches,
    })
}

fn mean_patch_size(entropies: &[Vec<f64>], threshold: f64, max_len: Option<usize>) -> f64 {
    let (mut n, mut m) = (0usize, 0usize);
    for h in entropies {
        let mut last = 0;
        for (i, &e) in h.iter().enumerate() {
            if i == 0 || e > threshold || max_len.is_some_and(|cap| i - last >= cap) {
                m += 1;
                last = i;
            }
        }
        n += h.len();
    }
    n as f64 / m.max(1) as f64
}

/// Finds a threshold whose mean patch size over the given per-document
/// entropies is within 10% of `target`, by bisection over the sorted
/// distinct entropy values.
pub fn calibrate_threshold_from_entropies(entropies: &[Vec<f64>], target: f64, max_len: Option<usize>) -> Result<f64> {
    if !(target >= 1.0) {
        return Err(invalid!("target mean patch size must be at least 1, got {target}"));
    }
    let mut values: Vec<f64> = entropies.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    if values.is_empty() {
        return Err(Error::Empty("calibration corpus"));
    }
    values.sort_by(f64::total_cmp);
    values.dedup();
    // Candidate k = 0 is "below everything"; candidate k >= 1 sits between
    // values[k-1] and values[k] (or above the maximum for k = len).
    let candidate = |k: usize| -> f64 {
        match k {
            0 => values[0] - 1.0,
            k if k == values.len() => values[k - 1] + 1.0,
            k => 0.5 * (values[k - 1] + values[k]),
        }
    };
    let lo_mean = mean_patch_size(entropies, candidate(0), max_len);
    let hi_mean = mean_patch_size(entropies, candidate(values.len()), max_len);
    if target < lo_mean / 1.1 || target > hi_mean * 1.1 {
        return Err(Error::Unreachable { target, min: lo_mean, max: hi_mean });
    }
    let (mut lo, mut hi) = (0usize, values.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if mean_patch_size(entropies, candidate(mid), max_len) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut best = (candidate(lo), mean_patch_size(entropies, candidate(lo), max_len));
    if lo > 0 {
        let prev = (candidate(lo - 1), mean_patch_size(entropies, candidate(lo - 1), max_len));
        if (prev.1 - target).abs() < (best.1 - target).abs() {
            best = prev;
        }
    }
    if (best.1 - target).abs() > 0.1 * target {
        return Err(Error::Unreachable { target, min: lo_mean, max: hi_mean });
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn fixed_stride_examples() {
        let p = segment_fixed(10, 4).unwrap();
        assert_eq!(p.boundaries(), &[0, 4, 8]);
        assert_eq!(p.m(), 3);
        assert_eq!(segment_fixed(10, 1).unwrap().m(), 10);
        assert_eq!(segment_fixed(10, 100).unwrap().m(), 1);
        assert!(segment_fixed(10, 0).is_err());
    }

    #[test]
    fn whitespace_examples() {
        let p = segment_whitespace(b"ab cd", None).unwrap();
        assert_eq!(p.boundaries(), &[0, 3]);
        assert_eq!(p.split(b"ab cd"), vec![b"ab ".as_slice(), b"cd".as_slice()]);
        assert_eq!(segment_whitespace(b"abcd", None).unwrap().m(), 1);
        assert_eq!(segment_whitespace(b"  ", None).unwrap().m(), 1);
    }

    #[test]
    fn entropy_threshold_extremes() {
        let h = [0.5, 5.5, 0.1, 3.0, 2.0];
        let ln256 = libm::log(256.0);
        assert_eq!(segment_entropy(&h, ln256, None).unwrap().m(), 1);
        assert_eq!(segment_entropy(&h, -0.1, None).unwrap().m(), h.len());
        assert_eq!(segment_entropy(&h, 2.5, None).unwrap().boundaries(), &[0, 1, 3]);
        assert!(segment_entropy(&h, f64::NAN, None).is_err());
    }

    #[test]
    fn cap_forces_boundaries() {
        let h = [0.0; 10];
        assert_eq!(segment_entropy(&h, 1.0, Some(4)).unwrap().boundaries(), &[0, 4, 8]);
    }

    #[test]
    fn stats_examples() {
        let p = segment_fixed(12, 4).unwrap();
        assert_eq!(patch_stats([&p]).unwrap().mean_patch_size, 4.0);
        let ones = segment_fixed(7, 1).unwrap();
        assert_eq!(patch_stats([&ones]).unwrap().mean_patch_size, 1.0);
        // 3 documents: n = 10, 5, 9 with m = 3, 1, 3 -> 24 / 7.
        let docs = [segment_fixed(10, 4).unwrap(), segment_fixed(5, 5).unwrap(), segment_whitespace(b"aa bb cc ", None).unwrap()];
        let s = patch_stats(docs.iter()).unwrap();
        assert_eq!((s.total_bytes, s.total_patches), (24, 7));
        assert!((s.mean_patch_size - 24.0 / 7.0).abs() < 1e-15);
        assert_eq!(s.histogram.get(&3), Some(&3));
        assert!(patch_stats(core::iter::empty::<&Patching>()).is_err());
    }

    #[test]
    fn calibration_edges() {
        let docs = vec![vec![0.3, 2.0, 0.1, 4.0, 1.0, 0.2, 3.0, 0.7]];
        let t = calibrate_threshold_from_entropies(&docs, 1.0, None).unwrap();
        assert!(t < 0.1);
        let t = calibrate_threshold_from_entropies(&docs, 8.0, None).unwrap();
        assert!(t > 4.0);
        let t = calibrate_threshold_from_entropies(&docs, 2.0, None).unwrap();
        let p = segment_entropy(&docs[0], t, None).unwrap();
        let mean = patch_stats([&p]).unwrap().mean_patch_size;
        assert!((mean - 2.0).abs() <= 0.2, "mean {mean}");
        assert!(matches!(calibrate_threshold_from_entropies(&docs, 20.0, None), Err(Error::Unreachable { .. })));
        assert!(calibrate_threshold_from_entropies(&docs, 0.5, None).is_err());
    }

    proptest! {
        #[test]
        fn tiling_and_monotonicity(
            h in proptest::collection::vec(0.0f64..5.6, 1..120),
            t1 in -1.0f64..6.0,
            dt in 0.0f64..3.0,
        ) {
            let t2 = t1 + dt;
            let p1 = segment_entropy(&h, t1, None).unwrap();
            let p2 = segment_entropy(&h, t2, None).unwrap();
            prop_assert_eq!(p1.boundaries()[0], 0);
            prop_assert!(p1.m() <= p1.n());
            prop_assert_eq!(p1.sizes().iter().sum::<usize>(), h.len());
            for b in p2.boundaries() {
                prop_assert!(p1.boundaries().contains(b));
            }
        }
    }
}
