use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

/// Candidate thresholds per feature, strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidates {
    pub thresholds: Vec<Vec<f64>>,
}

/// Midpoints between adjacent observed categories of every column. A
/// constant column gets no thresholds.
pub fn propose_split_candidates(cells: ArrayView2<u8>) -> SplitCandidates {
    let thresholds = cells
        .columns()
        .into_iter()
        .map(|col| {
            let mut seen = [false; 256];
            for &v in col {
                seen[v as usize] = true;
            }
            let observed: Vec<f64> = (0..256).filter(|&v| seen[v]).map(|v| v as f64).collect();
            observed.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
        })
        .collect();
    SplitCandidates { thresholds }
}

/// Index of the bin holding `value`: the number of thresholds below it.
pub fn bin_of(thresholds: &[f64], value: u8) -> usize {
    let v = f64::from(value);
    thresholds.iter().take_while(|&&t| t < v).count()
}

/// A block of binned feature columns with precomputed bin indices, as held
/// by one party. `keys` are the features' global ids, used for tie-breaking.
#[derive(Clone, Debug)]
pub struct FeatureBlock {
    keys: Vec<usize>,
    thresholds: Vec<Vec<f64>>,
    /// Column-major bin index per feature and sample.
    bins: Vec<Vec<u8>>,
}

impl FeatureBlock {
    pub fn new(cells: ArrayView2<u8>, keys: Vec<usize>, candidates: &SplitCandidates) -> Self {
        assert_eq!(keys.len(), cells.ncols(), "one key per column");
        assert_eq!(candidates.thresholds.len(), cells.ncols(), "one threshold list per column");
        let bins = cells
            .columns()
            .into_iter()
            .zip(&candidates.thresholds)
            .map(|(col, t)| col.iter().map(|&v| bin_of(t, v) as u8).collect())
            .collect();
        Self { keys, thresholds: candidates.thresholds.clone(), bins }
    }

    pub fn n_features(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn thresholds(&self, slot: usize) -> &[f64] {
        &self.thresholds[slot]
    }

    pub fn n_bins(&self, slot: usize) -> usize {
        self.thresholds[slot].len() + 1
    }

    pub fn bin(&self, slot: usize, sample: usize) -> usize {
        self.bins[slot][sample] as usize
    }

    /// Whether each sample goes left (bin at most `split_bin`).
    pub fn go_left(&self, slot: usize, split_bin: usize, samples: &[usize]) -> Vec<bool> {
        let col = &self.bins[slot];
        samples.iter().map(|&i| col[i] as usize <= split_bin).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub g: f64,
    pub h: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistogram {
    /// Global feature id.
    pub feature: usize,
    pub thresholds: Vec<f64>,
    pub bins: Vec<BinStats>,
}

impl FeatureHistogram {
    pub fn total(&self) -> BinStats {
        self.bins.iter().fold(BinStats::default(), |acc, b| BinStats {
            g: acc.g + b.g,
            h: acc.h + b.h,
            count: acc.count + b.count,
        })
    }
}

/// Gradient statistics of one node over a set of features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub features: Vec<FeatureHistogram>,
}

impl Histogram {
    /// Feature-wise union of per-party histograms.
    pub fn union(parts: impl IntoIterator<Item = Histogram>) -> Histogram {
        let mut features: Vec<FeatureHistogram> = parts.into_iter().flat_map(|h| h.features).collect();
        features.sort_by_key(|f| f.feature);
        Histogram { features }
    }
}

/// Accumulates `(g, h, 1)` of every sample into its bin, per feature.
/// Samples are visited in the given order.
pub fn compute_hist(block: &FeatureBlock, g: &[f64], h: &[f64], samples: &[usize]) -> Histogram {
    let features = (0..block.n_features())
        .map(|slot| {
            let mut bins = vec![BinStats::default(); block.n_bins(slot)];
            let col = &block.bins[slot];
            for &i in samples {
                let b = &mut bins[col[i] as usize];
                b.g += g[i];
                b.h += h[i];
                b.count += 1;
            }
            FeatureHistogram { feature: block.keys[slot], thresholds: block.thresholds[slot].clone(), bins }
        })
        .collect();
    Histogram { features }
}

/// Regularisation for split scoring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    pub lambda: f64,
    pub gamma: f64,
    pub min_child: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitChoice {
    /// Global feature id.
    pub feature: usize,
    /// Samples in bins `0..=bin` go left.
    pub bin: usize,
    pub threshold: f64,
    pub gain: f64,
}

pub fn split_gain(left: BinStats, right: BinStats, p: &SplitParams) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + p.lambda);
    let (g, h) = (left.g + right.g, left.h + right.h);
    0.5 * (score(left.g, left.h) + score(right.g, right.h) - score(g, h)) - p.gamma
}

/// Highest-gain split over every feature and threshold. Ties go to the lowest
/// feature id, then the lowest threshold. Returns `None` when no admissible
/// split has positive gain.
pub fn best_split(hist: &Histogram, p: &SplitParams) -> Option<SplitChoice> {
    let min_child = p.min_child.max(1);
    let mut order: Vec<&FeatureHistogram> = hist.features.iter().collect();
    order.sort_by_key(|f| f.feature);
    let mut best: Option<SplitChoice> = None;
    for fh in order {
        let total = fh.total();
        let mut left = BinStats::default();
        for (b, stats) in fh.bins.iter().enumerate().take(fh.bins.len().saturating_sub(1)) {
            left.g += stats.g;
            left.h += stats.h;
            left.count += stats.count;
            let right = BinStats { g: total.g - left.g, h: total.h - left.h, count: total.count - left.count };
            if left.count < min_child || right.count < min_child {
                continue;
            }
            let gain = split_gain(left, right, p);
            if gain > best.map_or(0.0, |s| s.gain) {
                best = Some(SplitChoice { feature: fh.feature, bin: b, threshold: fh.thresholds[b], gain });
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: SplitParams = SplitParams { lambda: 1.0, gamma: 0.0, min_child: 1 };

    fn block(cells: &Array2<u8>) -> FeatureBlock {
        let c = propose_split_candidates(cells.view());
        FeatureBlock::new(cells.view(), (0..cells.ncols()).collect(), &c)
    }

    #[test]
    fn candidates_at_category_midpoints() {
        let cells = array![[0, 2, 0], [1, 2, 3], [2, 2, 0], [3, 2, 3]];
        let c = propose_split_candidates(cells.view());
        assert_eq!(c.thresholds[0], vec![0.5, 1.5, 2.5]);
        assert!(c.thresholds[1].is_empty());
        assert_eq!(c.thresholds[2], vec![1.5]);
    }

    #[test]
    fn candidates_match_enumerated_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let cells =
                Array2::from_shape_fn((20, 3), |_| if rng.random_bool(0.5) { 0 } else { rng.random_range(0..4) });
            let c = propose_split_candidates(cells.view());
            for (j, t) in c.thresholds.iter().enumerate() {
                let mut obs: Vec<u8> = cells.column(j).to_vec();
                obs.sort_unstable();
                obs.dedup();
                assert_eq!(t.len(), obs.len() - 1);
                for (w, &th) in obs.windows(2).zip(t) {
                    assert!(f64::from(w[0]) < th && th < f64::from(w[1]));
                }
            }
        }
    }

    #[test]
    fn single_sample_lands_in_its_bin() {
        let cells = array![[0u8], [1], [2], [3]];
        let b = block(&cells);
        let g = [0.0, 0.0, 0.5, 0.0];
        let h = [0.0, 0.0, 0.25, 0.0];
        let hist = compute_hist(&b, &g, &h, &[2]);
        let f = &hist.features[0];
        assert_eq!(f.bins[2], BinStats { g: 0.5, h: 0.25, count: 1 });
        assert_eq!((f.thresholds[1], f.thresholds[2]), (1.5, 2.5));
        assert_eq!(f.total().count, 1);
    }

    #[test]
    fn uniform_categories_give_equal_counts() {
        let cells = Array2::from_shape_fn((40, 2), |(i, j)| ((i + j) % 4) as u8);
        let b = block(&cells);
        let zeros = vec![0.0; 40];
        let all: Vec<usize> = (0..40).collect();
        let hist = compute_hist(&b, &zeros, &zeros, &all);
        for f in &hist.features {
            assert!(f.bins.iter().all(|s| s.count == 10));
        }
    }

    #[test]
    fn histogram_conserves_gradient_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells = Array2::from_shape_fn((300, 5), |_| rng.random_range(0..4u8));
        let g: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..0.25)).collect();
        let b = block(&cells);
        let mut node: Vec<usize> = (0..300).filter(|_| rng.random_bool(0.2)).take(50).collect();
        node.sort_unstable();
        let hist = compute_hist(&b, &g, &h, &node);
        let direct_g: f64 = node.iter().map(|&i| g[i]).sum();
        let direct_h: f64 = node.iter().map(|&i| h[i]).sum();
        for f in &hist.features {
            let t = f.total();
            assert!((t.g - direct_g).abs() < 1e-12);
            assert!((t.h - direct_h).abs() < 1e-12);
            assert_eq!(t.count, node.len());
        }
    }

    #[test]
    fn symmetric_node_has_no_split() {
        let fh = FeatureHistogram {
            feature: 0,
            thresholds: vec![0.5],
            bins: vec![BinStats { g: 0.0, h: 1.0, count: 4 }, BinStats { g: 0.0, h: 1.0, count: 4 }],
        };
        let hist = Histogram { features: vec![fh] };
        assert_eq!(split_gain(hist.features[0].bins[0], hist.features[0].bins[1], &P), 0.0);
        assert!(best_split(&hist, &P).is_none());
    }

    #[test]
    fn separating_feature_is_selected() {
        // feature 1 separates the classes, feature 0 is noise
        let n = 40;
        let cells = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 4) as u8 } else { (i % 2 * 3) as u8 });
        let g: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -0.5 } else { 0.5 }).collect();
        let h = vec![0.25; n];
        let samples: Vec<usize> = (0..n).collect();
        let hist = compute_hist(&block(&cells), &g, &h, &samples);
        let choice = best_split(&hist, &P).unwrap();
        assert_eq!(choice.feature, 1);
        assert_eq!(choice.threshold, 1.5);
    }

    #[test]
    fn identical_features_tie_to_lowest_index() {
        let cells = Array2::from_shape_fn((8, 3), |(i, j)| if j == 0 { 0 } else { (i % 2) as u8 });
        let g: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { -0.5 } else { 0.5 }).collect();
        let h = vec![0.25; 8];
        let samples: Vec<usize> = (0..8).collect();
        let mut hist = compute_hist(&block(&cells), &g, &h, &samples);
        hist.features.reverse();
        assert_eq!(best_split(&hist, &P).unwrap().feature, 1);
    }

    #[test]
    fn min_child_and_gamma_block_splits() {
        let cells = array![[0u8], [0], [0], [3]];
        let g = [-0.5, -0.5, -0.5, 0.9];
        let h = [0.25; 4];
        let samples = [0, 1, 2, 3];
        let hist = compute_hist(&block(&cells), &g, &h, &samples);
        assert!(best_split(&hist, &P).is_some());
        assert!(best_split(&hist, &SplitParams { min_child: 2, ..P }).is_none());
        assert!(best_split(&hist, &SplitParams { gamma: 10.0, ..P }).is_none());
    }

    fn brute_force(
        cells: &Array2<u8>,
        g: &[f64],
        h: &[f64],
        samples: &[usize],
        p: &SplitParams,
    ) -> Option<(usize, f64, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..cells.ncols() {
            let mut values: Vec<u8> = samples.iter().map(|&i| cells[[i, j]]).collect();
            values.extend(cells.column(j).iter());
            values.sort_unstable();
            values.dedup();
            for w in values.windows(2) {
                let t = (f64::from(w[0]) + f64::from(w[1])) / 2.0;
                let (mut l, mut r) = (BinStats::default(), BinStats::default());
                for &i in samples {
                    let side = if f64::from(cells[[i, j]]) <= t { &mut l } else { &mut r };
                    side.g += g[i];
                    side.h += h[i];
                    side.count += 1;
                }
                if l.count < p.min_child.max(1) || r.count < p.min_child.max(1) {
                    continue;
                }
                let gain = split_gain(l, r, p);
                if gain > 1e-12 && best.is_none_or(|b| gain > b.2 + 1e-9) {
                    best = Some((j, t, gain));
                }
            }
        }
        best
    }

    #[test]
    fn best_split_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let n = rng.random_range(5..200);
            let m = rng.random_range(1..=8);
            let cells =
                Array2::from_shape_fn((n, m), |_| if rng.random_bool(0.4) { 0 } else { rng.random_range(0..4u8) });
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.25)).collect();
            let samples: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).collect();
            if samples.is_empty() {
                continue;
            }
            let p = SplitParams { lambda: 1.0, gamma: 0.0, min_child: rng.random_range(1..4) };
            let hist = compute_hist(&block(&cells), &g, &h, &samples);
            let fast = best_split(&hist, &p);
            let slow = brute_force(&cells, &g, &h, &samples, &p);
            match (fast, slow) {
                (None, None) => {}
                (Some(f), Some((j, t, gain))) => {
                    assert!((f.gain - gain).abs() < 1e-9, "case {case}");
                    // exact argmax unless two candidates are numerically tied
                    if f.feature != j || f.threshold != t {
                        let alt = hist.features.iter().find(|x| x.feature == j).unwrap();
                        assert!(alt.thresholds.contains(&t));
                        assert!((f.gain - gain).abs() < 1e-9, "case {case}");
                    }
                }
                (a, b) => assert!(
                    a.map_or(0.0, |s| s.gain).abs() < 1e-9 && b.map_or(0.0, |s| s.2).abs() < 1e-9,
                    "case {case}: {a:?} vs {b:?}"
                ),
            }
        }
    }
}
