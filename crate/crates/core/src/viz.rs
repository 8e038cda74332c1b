//! Token-contribution visualization for hydra layers.
//!
//! Sampling the class token's row of the hydra output and distributing the
//! token sum gives each token a contribution phi(Q)^c .* phi(K)^t .* V^t.
//! Projecting onto the gradient g of the predicted-class logit with respect
//! to the layer output (at the class token row) scores how much each token
//! pushes the prediction:
//!
//! score_t = (phi(Q)^c .* phi(K)^t .* V^t)^T g
//!
//! The decomposition is exactly linear, so the scores sum to the class
//! token's projected output. For rendering, negatives clamp to zero and the
//! rest divide by the maximum positive score.

use crate::netpbm::GrayImage;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Raw per-token scores, one per token (class token included at its index).
pub fn token_contributions(
    phi_q_class: &Tensor,
    phi_k: &Tensor,
    v: &Tensor,
    g: &Tensor,
) -> Result<Vec<f64>> {
    let d = phi_k.cols();
    if phi_q_class.len() != d || g.len() != d || phi_k.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "contribution shapes disagree: class row {:?}, phi(K) {:?}, V {:?}, g {:?}",
            phi_q_class.shape(),
            phi_k.shape(),
            v.shape(),
            g.shape()
        )));
    }
    let t = phi_k.rows();
    let qc = phi_q_class.data();
    let gd = g.data();
    let mut scores = Vec::with_capacity(t);
    for tok in 0..t {
        let kr = phi_k.row(tok);
        let vr = v.row(tok);
        let mut s = 0.0;
        for c in 0..d {
            s += qc[c] * kr[c] * vr[c] * gd[c];
        }
        scores.push(s);
    }
    Ok(scores)
}

/// Normalization bookkeeping for a rendered map.
#[derive(Debug, Clone, Copy)]
pub struct NormalizationRecord {
    /// Largest positive raw score (0 when every score is non-positive).
    pub max_positive: f64,
    /// Count of negative scores clamped to zero.
    pub clamped: usize,
}

/// Grid-shaped, normalized contribution scores with the class token split
/// out of the raster.
#[derive(Debug, Clone)]
pub struct ContributionMap {
    /// Normalized scores in [0, 1], row-major over the patch grid
    /// (class token excluded).
    pub grid_scores: Vec<f64>,
    /// (rows, cols) of the patch grid.
    pub grid: (usize, usize),
    /// The class token's own raw contribution, reported numerically.
    pub class_self: f64,
    pub normalization: NormalizationRecord,
}

impl ContributionMap {
    /// Split raw scores into the class token's self-contribution and a
    /// normalized patch grid. `class_index` names the class token's row.
    pub fn from_raw(
        raw: &[f64],
        class_index: usize,
        grid: (usize, usize),
    ) -> Result<ContributionMap> {
        if class_index >= raw.len() {
            return Err(Error::Dimension(format!(
                "class index {class_index} out of range for {} scores",
                raw.len()
            )));
        }
        let (h, w) = grid;
        if raw.len() - 1 != h * w {
            return Err(Error::Dimension(format!(
                "{} grid scores do not fill a {h}x{w} grid",
                raw.len() - 1
            )));
        }
        let class_self = raw[class_index];
        let grid_raw: Vec<f64> = raw
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != class_index)
            .map(|(_, &s)| s)
            .collect();

        let max_positive = grid_raw.iter().cloned().fold(0.0f64, f64::max);
        let clamped = grid_raw.iter().filter(|&&s| s < 0.0).count();
        let grid_scores = if max_positive > 0.0 {
            grid_raw
                .iter()
                .map(|&s| (s.max(0.0) / max_positive).min(1.0))
                .collect()
        } else {
            vec![0.0; grid_raw.len()]
        };
        Ok(ContributionMap {
            grid_scores,
            grid,
            class_self,
            normalization: NormalizationRecord {
                max_positive,
                clamped,
            },
        })
    }
}

/// Render raw grid scores as an 8-bit grayscale image: clamp negatives to
/// zero, divide by the maximum positive score (all-black if none), optional
/// nearest-neighbor upscale.
pub fn render_heatmap(scores: &[f64], grid: (usize, usize), scale: usize) -> Result<GrayImage> {
    let (h, w) = grid;
    if h * w != scores.len() {
        return Err(Error::Dimension(format!(
            "{} scores do not fill a {h}x{w} grid",
            scores.len()
        )));
    }
    if scale == 0 {
        return Err(Error::Spec("scale must be positive".into()));
    }
    let max_positive = scores.iter().cloned().fold(0.0f64, f64::max);
    let shade = |s: f64| -> u8 {
        if max_positive > 0.0 {
            ((s.max(0.0) / max_positive) * 255.0).round() as u8
        } else {
            0
        }
    };
    let mut data = Vec::with_capacity(h * w * scale * scale);
    for y in 0..h * scale {
        for x in 0..w * scale {
            data.push(shade(scores[(y / scale) * w + (x / scale)]));
        }
    }
    Ok(GrayImage {
        width: w * scale,
        height: h * scale,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{self, KernelPair};
    use crate::rng::SeededRng;

    fn setup(seed: u64, t: usize, d: usize) -> (Tensor, Tensor, Tensor, Tensor, Tensor) {
        let mut rng = SeededRng::new(seed);
        let q: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let k: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let v: Tensor = rng.uniform_matrix(t, d, -1.0, 1.0);
        let g = rng.uniform_vector(d, -1.0, 1.0);
        let pair = KernelPair::cosine();
        let phi_q = kernels::apply_feature_map(&q, &pair.q, t).unwrap();
        let phi_k = kernels::apply_feature_map(&k, &pair.k, t).unwrap();
        (q, phi_q, phi_k, v, g)
    }

    #[test]
    fn scores_sum_to_projected_class_output() {
        let (q, phi_q, phi_k, v, g) = setup(13, 5, 4);
        let class = 0usize;
        let qc = phi_q.slice_rows(class, class + 1).unwrap().reshape(&[4]).unwrap();
        let scores = token_contributions(&qc, &phi_k, &v, &g).unwrap();

        let out = crate::attention::hydra(&q, &phi_k, &v, &KernelPair {
            q: crate::kernels::FeatureMapSpec::new(crate::kernels::FeatureMap::CosineL2),
            k: crate::kernels::FeatureMapSpec::new(crate::kernels::FeatureMap::Identity),
        })
        .unwrap();
        let projected: f64 = out
            .row(class)
            .iter()
            .zip(g.data())
            .map(|(&o, &gv)| o * gv)
            .sum();
        let total: f64 = scores.iter().sum();
        assert!((total - projected).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_zeroes_scores() {
        let (_, phi_q, phi_k, v, _) = setup(14, 4, 3);
        let qc = phi_q.slice_rows(0, 1).unwrap().reshape(&[3]).unwrap();
        let g = Tensor::zeros(&[3]);
        let scores = token_contributions(&qc, &phi_k, &v, &g).unwrap();
        assert!(scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn zeroed_v_row_zeroes_its_score() {
        let (_, phi_q, phi_k, mut v, g) = setup(15, 4, 3);
        let qc = phi_q.slice_rows(0, 1).unwrap().reshape(&[3]).unwrap();
        for c in 0..3 {
            v.data_mut()[2 * 3 + c] = 0.0;
        }
        let scores = token_contributions(&qc, &phi_k, &v, &g).unwrap();
        assert_eq!(scores[2], 0.0);
    }

    #[test]
    fn matches_term_wise_oracle_seed_13() {
        let (_, phi_q, phi_k, v, g) = setup(13, 5, 4);
        let qc = phi_q.slice_rows(0, 1).unwrap().reshape(&[4]).unwrap();
        let scores = token_contributions(&qc, &phi_k, &v, &g).unwrap();
        for tok in 0..5 {
            let mut want = 0.0;
            for c in 0..4 {
                want += qc.data()[c] * phi_k.at(tok, c) * v.at(tok, c) * g.data()[c];
            }
            assert!((scores[tok] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn render_all_equal_positive_is_white() {
        let img = render_heatmap(&[0.4, 0.4, 0.4, 0.4], (2, 2), 1).unwrap();
        assert!(img.data.iter().all(|&p| p == 255));
    }

    #[test]
    fn render_single_positive_cell() {
        let img = render_heatmap(&[0.0, 0.0, 2.5, 0.0], (2, 2), 1).unwrap();
        assert_eq!(img.data, vec![0, 0, 255, 0]);
    }

    #[test]
    fn render_all_negative_is_black() {
        let img = render_heatmap(&[-1.0, -0.5, -2.0, -0.1], (2, 2), 2).unwrap();
        assert_eq!(img.width, 4);
        assert_eq!(img.height, 4);
        assert!(img.data.iter().all(|&p| p == 0));
    }

    #[test]
    fn rendered_map_invariant_to_positive_gradient_scaling() {
        let (_, phi_q, phi_k, v, g) = setup(16, 5, 4);
        let qc = phi_q.slice_rows(0, 1).unwrap().reshape(&[4]).unwrap();
        let s1 = token_contributions(&qc, &phi_k, &v, &g).unwrap();
        let s2 = token_contributions(&qc, &phi_k, &v, &g.scale(7.25)).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((b - 7.25 * a).abs() < 1e-12);
        }
        let img1 = render_heatmap(&s1[1..], (2, 2), 1).unwrap();
        let img2 = render_heatmap(&s2[1..], (2, 2), 1).unwrap();
        assert_eq!(img1, img2);
    }

    #[test]
    fn contribution_map_normalizes_and_reports_class() {
        let raw = vec![0.9, -0.2, 0.5, 1.0, 0.25];
        let map = ContributionMap::from_raw(&raw, 0, (2, 2)).unwrap();
        assert_eq!(map.class_self, 0.9);
        assert_eq!(map.normalization.max_positive, 1.0);
        assert_eq!(map.normalization.clamped, 1);
        assert_eq!(map.grid_scores, vec![0.0, 0.5, 1.0, 0.25]);
        assert!(map.grid_scores.iter().cloned().fold(0.0f64, f64::max) == 1.0);
        assert!(ContributionMap::from_raw(&raw, 0, (2, 3)).is_err());
    }
}
