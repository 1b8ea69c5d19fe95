use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

/// First and second order gradients of the softmax cross-entropy, per sample
/// and class.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPairs {
    pub g: Array2<f64>,
    pub h: Array2<f64>,
}

/// Row-wise softmax, stabilised by the row maximum.
pub fn softmax_row(scores: ArrayView1<f64>) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax(scores: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(scores.raw_dim());
    for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
        for (k, p) in softmax_row(row).into_iter().enumerate() {
            out[[i, k]] = p;
        }
    }
    out
}

/// `g = p − onehot(y)`, `h = p(1 − p)` with `p = softmax(scores)`.
pub fn update_gradients(labels: &[usize], scores: ArrayView2<f64>) -> GradientPairs {
    let p = softmax(scores);
    let mut g = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    let h = p.mapv(|p| p * (1.0 - p));
    GradientPairs { g, h }
}

/// Resolution of the gradient grid: `2^-GRADIENT_SCALE_BITS`.
pub const GRADIENT_SCALE_BITS: u32 = 40;

/// Rounds gradients and hessians to the `2^-40` grid. Sums of grid values
/// are exact in `f64` while they stay below `2^12` in magnitude, so
/// histogram totals do not depend on summation order and equal the
/// fixed-point sums computed under encryption.
pub fn quantize_gradients(gp: GradientPairs) -> GradientPairs {
    let scale = f64::from(GRADIENT_SCALE_BITS).exp2();
    let q = |v: f64| (v * scale).round() / scale;
    GradientPairs { g: gp.g.mapv(q), h: gp.h.mapv(q) }
}

/// Mean negative log-likelihood of the labels under `softmax(scores)`.
pub fn log_loss(labels: &[usize], scores: ArrayView2<f64>) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = scores
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quantized_sums_are_order_independent() {
        let scores = array![[0.3, -2.0, 1.1], [5.0, 4.0, -3.0], [-1.0, -1.0, 8.0], [0.1, 0.2, 0.3]];
        let gp = quantize_gradients(update_gradients(&[2, 0, 1, 1], scores.view()));
        let col: Vec<f64> = gp.g.column(1).to_vec();
        let forward: f64 = col.iter().sum();
        let backward: f64 = col.iter().rev().sum();
        assert_eq!(forward, backward);
        let scale = f64::from(GRADIENT_SCALE_BITS).exp2();
        assert!(gp.h.iter().all(|&h| (h * scale).fract() == 0.0));
    }

    #[test]
    fn uniform_scores() {
        let gp = update_gradients(&[0], array![[0.0, 0.0, 0.0, 0.0]].view());
        assert_eq!(gp.g.row(0).to_vec(), vec![-0.75, 0.25, 0.25, 0.25]);
        assert_eq!(gp.h.row(0).to_vec(), vec![0.1875; 4]);
    }

    #[test]
    fn confident_correct_prediction() {
        let gp = update_gradients(&[0], array![[60.0, 0.0, 0.0, 0.0]].view());
        assert!(gp.g.iter().all(|g| g.abs() < 1e-20));
    }

    #[test]
    fn gradients_sum_to_zero_and_hessians_bounded() {
        let scores = array![[0.3, -2.0, 1.1, 0.0], [5.0, 4.0, -3.0, 2.2], [-1.0, -1.0, -1.0, 8.0]];
        let gp = update_gradients(&[2, 0, 1], scores.view());
        for row in gp.g.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!(row.iter().all(|g| *g > -1.0 && *g < 1.0));
        }
        assert!(gp.h.iter().all(|&h| h > 0.0 && h <= 0.25));
    }

    #[test]
    fn softmax_large_scores_stay_finite() {
        let p = softmax(array![[1000.0, 999.0]].view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_loss_uniform() {
        let l = log_loss(&[1, 3], Array2::zeros((2, 4)).view());
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }
}
