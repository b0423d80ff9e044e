//! Homography-estimation evaluation: DLT and RANSAC estimators, corner
//! reprojection error, AUC of the cumulative error curve, nearest-neighbor
//! baseline matchers, and the attention-span diagnostic.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::gnn::{AttentionRecord, EdgeType};
use crate::linalg;
use crate::matcher::{Match, MatchSet};
use crate::synthgen::{DatasetManifest, Homography, TrainingPair};
use crate::training::evaluate_pr;

/// Point pair `(a, b)` with `b ~ H a`.
pub type Correspondence = ((f64, f64), (f64, f64));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationMethod {
    Dlt,
    Ransac,
}

/// Estimated homography with the correspondences that support it.
#[derive(Debug, Clone)]
pub struct HomographyEstimate {
    pub homography: Homography,
    pub inliers: Vec<usize>,
    pub method: EstimationMethod,
}

/// Reference RANSAC settings: 3000 iterations, 3-pixel inlier threshold.
pub const RANSAC_ITERATIONS: usize = 3000;
pub const RANSAC_INLIER_THRESHOLD: f64 = 3.0;

fn hartley_normalization(points: &[(f64, f64)]) -> Result<(Vec<(f64, f64)>, Homography)> {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (x, y) in points {
        cx += x / n;
        cy += y / n;
    }
    let mean_dist: f64 = points
        .iter()
        .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return Err(Error::Degenerate("all points coincide; cannot normalize".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let transform = Homography {
        h: [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]],
    };
    let normalized = points.iter().map(|&(x, y)| (s * (x - cx), s * (y - cy))).collect();
    Ok((normalized, transform))
}

/// Least-squares homography via the normalized direct linear transform.
///
/// Both point sets are Hartley-normalized, the stacked 2-row constraint
/// system is reduced to its 9x9 Gram matrix, and the smallest eigenvector
/// gives the solution, which is then denormalized and scaled to `h22 = 1`.
pub fn dlt_homography(correspondences: &[Correspondence]) -> Result<Homography> {
    let n = correspondences.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!("DLT needs at least 4 correspondences, got {n}")));
    }
    let src: Vec<(f64, f64)> = correspondences.iter().map(|c| c.0).collect();
    let dst: Vec<(f64, f64)> = correspondences.iter().map(|c| c.1).collect();
    let (src_n, t_src) = hartley_normalization(&src)?;
    let (dst_n, t_dst) = hartley_normalization(&dst)?;

    // Gram matrix of the 2n x 9 design matrix
    let mut gram = vec![vec![0.0f64; 9]; 9];
    let mut accumulate = |row: &[f64; 9]| {
        for i in 0..9 {
            if row[i] == 0.0 {
                continue;
            }
            for j in i..9 {
                gram[i][j] += row[i] * row[j];
            }
        }
    };
    for ((x, y), (u, v)) in src_n.iter().zip(&dst_n) {
        accumulate(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, *u]);
        accumulate(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, *v]);
    }
    for i in 0..9 {
        for j in 0..i {
            gram[i][j] = gram[j][i];
        }
    }

    let (eigenvalues, h_vec) = linalg::smallest_eigenvector_symmetric(&gram)?;
    let scale = eigenvalues.last().copied().unwrap_or(0.0).abs().max(1.0);
    if eigenvalues[1] <= 1e-10 * scale {
        return Err(Error::Degenerate(
            "rank-deficient correspondence configuration (solution not unique)".into(),
        ));
    }

    let h_normalized = Homography {
        h: [
            [h_vec[0], h_vec[1], h_vec[2]],
            [h_vec[3], h_vec[4], h_vec[5]],
            [h_vec[6], h_vec[7], h_vec[8]],
        ],
    };
    let t_dst_inv = t_dst.inverse()?;
    let h = t_dst_inv.compose(&h_normalized).compose(&t_src).normalized();
    if !h.is_invertible() {
        return Err(Error::Degenerate("estimated homography is singular".into()));
    }
    Ok(h)
}

/// Symmetric transfer error: forward and backward reprojection, averaged.
pub fn symmetric_transfer_error(h: &Homography, h_inv: &Homography, c: &Correspondence) -> f64 {
    let ((ax, ay), (bx, by)) = *c;
    let fwd = match h.apply((ax, ay)) {
        Ok((u, v)) => ((u - bx).powi(2) + (v - by).powi(2)).sqrt(),
        Err(_) => return f64::INFINITY,
    };
    let bwd = match h_inv.apply((bx, by)) {
        Ok((u, v)) => ((u - ax).powi(2) + (v - ay).powi(2)).sqrt(),
        Err(_) => return f64::INFINITY,
    };
    (fwd + bwd) / 2.0
}

/// Robust estimation: repeated 4-point DLT fits scored by inlier count under
/// the symmetric transfer error, followed by a DLT refit on the best inliers.
pub fn ransac_homography(
    correspondences: &[Correspondence],
    iterations: usize,
    inlier_threshold: f64,
    rng: &mut ChaCha12Rng,
) -> Result<HomographyEstimate> {
    use rand::Rng;
    let n = correspondences.len();
    if n < 4 {
        return Err(Error::InvalidInput(format!("RANSAC needs at least 4 correspondences, got {n}")));
    }
    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..iterations {
        let mut picks = [0usize; 4];
        let mut filled = 0;
        while filled < 4 {
            let cand = rng.random_range(0..n);
            if !picks[..filled].contains(&cand) {
                picks[filled] = cand;
                filled += 1;
            }
        }
        let sample: Vec<Correspondence> = picks.iter().map(|&i| correspondences[i]).collect();
        let Ok(h) = dlt_homography(&sample) else { continue };
        let Ok(h_inv) = h.inverse() else { continue };
        let inliers: Vec<usize> = correspondences
            .iter()
            .enumerate()
            .filter(|(_, c)| symmetric_transfer_error(&h, &h_inv, c) < inlier_threshold)
            .map(|(i, _)| i)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }
    if best_inliers.len() < 4 {
        return Err(Error::Degenerate(format!(
            "no RANSAC model with at least 4 inliers (best {})",
            best_inliers.len()
        )));
    }
    let support: Vec<Correspondence> = best_inliers.iter().map(|&i| correspondences[i]).collect();
    let refit = dlt_homography(&support)?;
    Ok(HomographyEstimate { homography: refit, inliers: best_inliers, method: EstimationMethod::Ransac })
}

/// Mean reprojection distance of the four image corners between two warps.
pub fn corner_error(h_est: &Homography, h_true: &Homography, image_size: (f64, f64)) -> Result<f64> {
    let (w, h) = image_size;
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let mut total = 0.0;
    for corner in corners {
        let (ex, ey) = h_est.apply(corner)?;
        let (tx, ty) = h_true.apply(corner)?;
        total += ((ex - tx).powi(2) + (ey - ty).powi(2)).sqrt();
    }
    Ok(total / 4.0)
}

/// Area under the cumulative error curve up to `max_threshold`, normalized to
/// [0, 1]. Exact integration of the empirical step function:
/// `mean_i max(0, 1 - e_i / threshold)`, with failed estimations entering as
/// infinite error.
pub fn auc(errors: &[f64], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("empty error curve".into()));
    }
    if max_threshold <= 0.0 {
        return Err(Error::InvalidInput(format!("threshold must be positive, got {max_threshold}")));
    }
    let mut total = 0.0;
    for &e in errors {
        if e.is_nan() || e < 0.0 {
            return Err(Error::InvalidInput(format!("invalid error value {e}")));
        }
        total += (1.0 - e / max_threshold).max(0.0);
    }
    Ok(total / errors.len() as f64)
}

/// Baseline nearest-neighbor match filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NnFilter {
    /// Keep every nearest neighbor.
    Plain,
    /// Keep pairs that are nearest neighbors in both directions.
    Mutual,
    /// Keep pairs whose first-to-second distance ratio is below the bound.
    Ratio(f64),
    /// Keep pairs whose nearest distance is below the bound.
    Distance(f64),
}

/// Nearest-neighbor matching on descriptor rows by Euclidean distance.
///
/// Confidence is `1 - d1 / (d1 + d2)` clamped to (0, 1], where `d1`, `d2`
/// are the nearest and second-nearest distances.
pub fn nn_match(desc_a: &Tensor, desc_b: &Tensor, filter: NnFilter) -> Result<MatchSet> {
    if desc_a.cols() != desc_b.cols() && desc_a.rows() > 0 && desc_b.rows() > 0 {
        return Err(Error::ShapeMismatch {
            op: "nn_match",
            detail: format!("descriptor widths differ: {} vs {}", desc_a.cols(), desc_b.cols()),
        });
    }
    let (m, n) = (desc_a.rows(), desc_b.rows());
    let mut set = MatchSet::default();
    if m == 0 || n == 0 {
        set.unmatched_a = (0..m).collect();
        set.unmatched_b = (0..n).collect();
        return Ok(set);
    }

    let distance = |i: usize, j: usize| -> f64 {
        desc_a
            .row_slice(i)
            .iter()
            .zip(desc_b.row_slice(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    // nearest and second-nearest per A row
    let mut nearest_a: Vec<(usize, f64, f64)> = Vec::with_capacity(m);
    for i in 0..m {
        let (mut j1, mut d1, mut d2) = (0usize, f64::INFINITY, f64::INFINITY);
        for j in 0..n {
            let d = distance(i, j);
            if d < d1 {
                d2 = d1;
                d1 = d;
                j1 = j;
            } else if d < d2 {
                d2 = d;
            }
        }
        nearest_a.push((j1, d1, d2));
    }
    // nearest per B row, for the mutual check
    let nearest_b: Vec<usize> = (0..n)
        .map(|j| {
            (0..m)
                .min_by(|&a, &b| distance(a, j).partial_cmp(&distance(b, j)).unwrap())
                .unwrap()
        })
        .collect();

    let mut matched_b = vec![false; n];
    for (i, &(j1, d1, d2)) in nearest_a.iter().enumerate() {
        let keep = match filter {
            NnFilter::Plain => true,
            NnFilter::Mutual => nearest_b[j1] == i,
            NnFilter::Ratio(r) => {
                if d2.is_finite() {
                    d2 > 0.0 && d1 / d2 < r
                } else {
                    true
                }
            }
            NnFilter::Distance(t) => d1 < t,
        };
        if !keep {
            continue;
        }
        let confidence = if d1 == 0.0 {
            1.0
        } else if d2.is_finite() && d1 + d2 > 0.0 {
            (1.0 - d1 / (d1 + d2)).clamp(f64::MIN_POSITIVE, 1.0)
        } else {
            1.0
        };
        set.matches.push(Match { i, j: j1, confidence });
        matched_b[j1] = true;
    }
    let matched_a: std::collections::HashSet<usize> = set.matches.iter().map(|m| m.i).collect();
    set.unmatched_a = (0..m).filter(|i| !matched_a.contains(i)).collect();
    set.unmatched_b = (0..n).filter(|&j| !matched_b[j]).collect();
    Ok(set)
}

/// Per-pair evaluation record mirroring one row of the report.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PairEvalRecord {
    pub pair: usize,
    pub num_matches: usize,
    pub precision: f64,
    pub recall: f64,
    pub matching_score: f64,
    /// Mean corner reprojection error in pixels; absent when estimation failed.
    pub corner_error_ransac: Option<f64>,
    pub corner_error_dlt: Option<f64>,
}

/// Homography-estimation evaluation report over a dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub num_pairs: usize,
    pub matcher: String,
    pub auc_ransac: f64,
    pub auc_dlt: f64,
    pub precision: f64,
    pub recall: f64,
    pub matching_score: f64,
    pub per_pair: Vec<PairEvalRecord>,
}

/// Estimate the warp from predicted matches with both estimators and score
/// each against the ground truth. Failures surface as `None`.
pub fn estimate_pair_errors(
    pair: &TrainingPair,
    matches: &MatchSet,
    seed: u64,
    pair_index: usize,
) -> (Option<f64>, Option<f64>) {
    let correspondences: Vec<Correspondence> = matches
        .matches
        .iter()
        .map(|m| {
            let a = pair.features_a.keypoints[m.i];
            let b = pair.features_b.keypoints[m.j];
            ((a.x, a.y), (b.x, b.y))
        })
        .collect();
    let image_size = pair.features_a.image_size;
    let mut rng = crate::rng::stream_rng(seed, &[0x72616e736163, pair_index as u64]);
    let ransac_err = ransac_homography(&correspondences, RANSAC_ITERATIONS, RANSAC_INLIER_THRESHOLD, &mut rng)
        .ok()
        .and_then(|est| corner_error(&est.homography, &pair.homography, image_size).ok());
    let dlt_err = dlt_homography(&correspondences)
        .ok()
        .and_then(|h| corner_error(&h, &pair.homography, image_size).ok());
    (ransac_err, dlt_err)
}

/// Evaluate a matcher over every pair of a manifest: per-pair precision,
/// recall, matching score, and homography-estimation AUC with both RANSAC
/// and DLT (failed estimations count as infinite error).
pub fn evaluate_manifest(
    manifest: &DatasetManifest,
    matcher_name: &str,
    predict: impl Fn(&TrainingPair) -> Result<MatchSet> + Sync,
    seed: u64,
    auc_threshold: f64,
) -> Result<EvalReport> {
    if manifest.pairs == 0 {
        return Err(Error::InvalidInput("manifest describes zero pairs".into()));
    }
    let rows: Result<Vec<(TrainingPair, MatchSet, PairEvalRecord)>> = (0..manifest.pairs)
        .into_par_iter()
        .map(|i| -> Result<(TrainingPair, MatchSet, PairEvalRecord)> {
            let pair = manifest.pair(i)?;
            let matches = predict(&pair)?;
            let (ransac_err, dlt_err) = estimate_pair_errors(&pair, &matches, seed, i);
            let (precision, recall, matching_score) =
                evaluate_pr(std::slice::from_ref(&pair), std::slice::from_ref(&matches));
            let record = PairEvalRecord {
                pair: i,
                num_matches: matches.matches.len(),
                precision,
                recall,
                matching_score,
                corner_error_ransac: ransac_err,
                corner_error_dlt: dlt_err,
            };
            Ok((pair, matches, record))
        })
        .collect();
    let rows = rows?;

    let pairs: Vec<TrainingPair> = rows.iter().map(|(p, _, _)| p.clone()).collect();
    let predictions: Vec<MatchSet> = rows.iter().map(|(_, m, _)| m.clone()).collect();
    let (precision, recall, matching_score) = evaluate_pr(&pairs, &predictions);

    let ransac_errors: Vec<f64> = rows
        .iter()
        .map(|(_, _, r)| r.corner_error_ransac.unwrap_or(f64::INFINITY))
        .collect();
    let dlt_errors: Vec<f64> =
        rows.iter().map(|(_, _, r)| r.corner_error_dlt.unwrap_or(f64::INFINITY)).collect();

    Ok(EvalReport {
        num_pairs: manifest.pairs,
        matcher: matcher_name.to_string(),
        auc_ransac: auc(&ransac_errors, auc_threshold)?,
        auc_dlt: auc(&dlt_errors, auc_threshold)?,
        precision,
        recall,
        matching_score,
        per_pair: rows.into_iter().map(|(_, _, r)| r).collect(),
    })
}

/// Attention span of one layer: minimum across heads of the attention-
/// weighted mean pixel distance.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpan {
    pub edge_type: EdgeType,
    pub span: f64,
}

/// Per-layer attention spans from a recorded forward pass.
///
/// Self-attention span: distance between each query keypoint and the
/// keypoints it attends to, weighted by attention, averaged over all queries
/// of both images. Cross-attention span: distance between the predicted
/// match of a query and the attended keypoints, averaged over matched
/// queries. Each layer reports the minimum across heads.
pub fn attention_span(
    record: &AttentionRecord,
    positions_a: &Tensor,
    positions_b: &Tensor,
    matches: &MatchSet,
) -> Result<Vec<LayerSpan>> {
    if record.is_empty() {
        return Err(Error::InvalidInput("attention record is empty".into()));
    }
    let dist = |p: &Tensor, i: usize, q: &Tensor, j: usize| -> f64 {
        ((p.at(i, 0) - q.at(j, 0)).powi(2) + (p.at(i, 1) - q.at(j, 1)).powi(2)).sqrt()
    };
    let mut out = Vec::with_capacity(record.len());
    for layer in record {
        let mut best: Option<f64> = None;
        let heads = layer.weights_a.len();
        for head in 0..heads {
            let wa = &layer.weights_a[head];
            let wb = &layer.weights_b[head];
            let mut total = 0.0;
            let mut queries = 0usize;
            match layer.edge_type {
                EdgeType::SelfEdges => {
                    for i in 0..wa.rows() {
                        total += (0..wa.cols()).map(|j| wa.at(i, j) * dist(positions_a, i, positions_a, j)).sum::<f64>();
                    }
                    queries += wa.rows();
                    for i in 0..wb.rows() {
                        total += (0..wb.cols()).map(|j| wb.at(i, j) * dist(positions_b, i, positions_b, j)).sum::<f64>();
                    }
                    queries += wb.rows();
                }
                EdgeType::CrossEdges => {
                    // A queries attend B keypoints; compare against the
                    // predicted match position, which also lives in B.
                    for m in &matches.matches {
                        total += (0..wa.cols())
                            .map(|j| wa.at(m.i, j) * dist(positions_b, m.j, positions_b, j))
                            .sum::<f64>();
                        queries += 1;
                        total += (0..wb.cols())
                            .map(|i| wb.at(m.j, i) * dist(positions_a, m.i, positions_a, i))
                            .sum::<f64>();
                        queries += 1;
                    }
                }
            }
            if queries == 0 {
                continue;
            }
            let span = total / queries as f64;
            best = Some(best.map_or(span, |b: f64| b.min(span)));
        }
        let span = best.ok_or_else(|| {
            Error::InvalidInput("no queries available for the span (no predicted matches?)".into())
        })?;
        out.push(LayerSpan { edge_type: layer.edge_type, span });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::synthgen::{sample_homography, HomographyConfig};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_correspondences(
        rng: &mut ChaCha12Rng,
        h: &Homography,
        count: usize,
        size: (f64, f64),
    ) -> Vec<Correspondence> {
        (0..count)
            .map(|_| {
                let p = (rng.random_range(0.0..size.0), rng.random_range(0.0..size.1));
                (p, h.apply(p).unwrap())
            })
            .collect()
    }

    #[test]
    fn dlt_identity_from_exact_pairs() {
        let pairs: Vec<Correspondence> = [(10.0, 20.0), (600.0, 30.0), (320.0, 400.0), (50.0, 440.0)]
            .iter()
            .map(|&p| (p, p))
            .collect();
        let h = dlt_homography(&pairs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(h.h[i][j], if i == j { 1.0 } else { 0.0 }, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn dlt_recovers_random_homography() {
        let mut rng = stream_rng(31, &[0]);
        let config = HomographyConfig::default_for((640.0, 480.0));
        for _ in 0..20 {
            let truth = sample_homography(&mut rng, &config, (640.0, 480.0)).unwrap();
            let pairs = random_correspondences(&mut rng, &truth, 20, (640.0, 480.0));
            let est = dlt_homography(&pairs).unwrap();
            let err = corner_error(&est, &truth, (640.0, 480.0)).unwrap();
            assert!(err < 1e-6, "corner error {err}");
        }
    }

    #[test]
    fn dlt_needs_four_pairs() {
        let pairs: Vec<Correspondence> = vec![((0.0, 0.0), (0.0, 0.0)); 3];
        assert!(dlt_homography(&pairs).is_err());
    }

    #[test]
    fn dlt_rejects_collinear_points() {
        let pairs: Vec<Correspondence> = (0..6)
            .map(|i| {
                let p = (i as f64 * 50.0, i as f64 * 25.0); // on one line
                (p, p)
            })
            .collect();
        assert!(matches!(dlt_homography(&pairs), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ransac_on_exact_pairs_marks_all_inliers() {
        let mut rng = stream_rng(31, &[1]);
        let config = HomographyConfig::default_for((640.0, 480.0));
        let truth = sample_homography(&mut rng, &config, (640.0, 480.0)).unwrap();
        let pairs = random_correspondences(&mut rng, &truth, 30, (640.0, 480.0));
        let mut ransac_rng = stream_rng(31, &[2]);
        let est = ransac_homography(&pairs, 200, 3.0, &mut ransac_rng).unwrap();
        assert_eq!(est.inliers.len(), 30);
        let err = corner_error(&est.homography, &truth, (640.0, 480.0)).unwrap();
        assert!(err < 1e-6, "corner error {err}");
    }

    #[test]
    fn ransac_survives_half_gross_outliers() {
        let config = HomographyConfig::default_for((640.0, 480.0));
        for seed in 0..20u64 {
            let mut rng = stream_rng(32, &[seed]);
            let truth = sample_homography(&mut rng, &config, (640.0, 480.0)).unwrap();
            let mut pairs = random_correspondences(&mut rng, &truth, 50, (640.0, 480.0));
            for k in 0..50 {
                if k % 2 == 1 {
                    // replace the target with a uniformly random point
                    pairs[k].1 = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                }
            }
            let mut ransac_rng = stream_rng(33, &[seed]);
            let est = ransac_homography(&pairs, RANSAC_ITERATIONS, RANSAC_INLIER_THRESHOLD, &mut ransac_rng)
                .unwrap();
            let err = corner_error(&est.homography, &truth, (640.0, 480.0)).unwrap();
            assert!(err < 1.0, "seed {seed}: corner error {err}");
        }
    }

    #[test]
    fn ransac_errors_without_any_model() {
        // three points cannot even seed the sampler
        let pairs: Vec<Correspondence> = vec![((0.0, 0.0), (0.0, 0.0)); 3];
        let mut rng = stream_rng(31, &[3]);
        assert!(ransac_homography(&pairs, 10, 3.0, &mut rng).is_err());
    }

    #[test]
    fn corner_error_zero_for_identical_warps() {
        let h = Homography::translation(3.0, 4.0);
        assert_relative_eq!(corner_error(&h, &h, (640.0, 480.0)).unwrap(), 0.0);
    }

    #[test]
    fn corner_error_of_pure_shift_is_the_shift() {
        let truth = Homography::identity();
        let est = Homography::translation(5.0, 0.0);
        assert_relative_eq!(corner_error(&est, &truth, (640.0, 480.0)).unwrap(), 5.0);
    }

    #[test]
    fn corner_error_matches_hand_computation() {
        let mut rng = stream_rng(31, &[4]);
        let config = HomographyConfig::default_for((640.0, 480.0));
        let h1 = sample_homography(&mut rng, &config, (640.0, 480.0)).unwrap();
        let h2 = sample_homography(&mut rng, &config, (640.0, 480.0)).unwrap();
        let corners = [(0.0, 0.0), (640.0, 0.0), (640.0, 480.0), (0.0, 480.0)];
        let mut expect = 0.0;
        for c in corners {
            let a = h1.apply(c).unwrap();
            let b = h2.apply(c).unwrap();
            expect += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() / 4.0;
        }
        assert_relative_eq!(corner_error(&h1, &h2, (640.0, 480.0)).unwrap(), expect);
    }

    #[test]
    fn auc_extremes() {
        assert_relative_eq!(auc(&[0.0, 0.0, 0.0], 10.0).unwrap(), 1.0);
        assert_relative_eq!(auc(&[10.0, 25.0, f64::INFINITY], 10.0).unwrap(), 0.0);
        assert!(auc(&[], 10.0).is_err());
    }

    #[test]
    fn auc_of_uniform_errors_is_half() {
        let mut rng = stream_rng(31, &[5]);
        let errors: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..10.0)).collect();
        let a = auc(&errors, 10.0).unwrap();
        assert!((a - 0.5).abs() < 0.01, "auc {a}");
    }

    #[test]
    fn auc_is_monotone_in_threshold_and_permutation_invariant() {
        let mut rng = stream_rng(31, &[6]);
        let mut errors: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..20.0)).collect();
        let a5 = auc(&errors, 5.0).unwrap();
        let a10 = auc(&errors, 10.0).unwrap();
        let a20 = auc(&errors, 20.0).unwrap();
        assert!(a5 <= a10 && a10 <= a20);
        errors.reverse();
        assert_relative_eq!(auc(&errors, 10.0).unwrap(), a10, max_relative = 1e-12);
    }

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let normalized: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect();
        Tensor::from_rows(&normalized).unwrap()
    }

    #[test]
    fn identical_sets_are_mutual_identity() {
        let d = unit_rows(&[vec![1.0, 0.1, 0.0], vec![0.0, 1.0, 0.2], vec![0.3, 0.0, 1.0]]);
        let set = nn_match(&d, &d, NnFilter::Mutual).unwrap();
        assert_eq!(set.pairs(), vec![(0, 0), (1, 1), (2, 2)]);
        for m in &set.matches {
            assert_relative_eq!(m.confidence, 1.0);
        }
    }

    #[test]
    fn ratio_one_is_plain_nn() {
        let mut rng = stream_rng(31, &[7]);
        let da = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let db = Tensor::matrix(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let plain = nn_match(&da, &db, NnFilter::Plain).unwrap();
        let ratio = nn_match(&da, &db, NnFilter::Ratio(1.0)).unwrap();
        assert_eq!(plain.pairs(), ratio.pairs());
    }

    #[test]
    fn nn_matches_brute_force_oracle() {
        let mut rng = stream_rng(31, &[8]);
        let da = Tensor::matrix(7, 5, (0..35).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let db = Tensor::matrix(9, 5, (0..45).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let got = nn_match(&da, &db, NnFilter::Plain).unwrap();
        for (i, m) in got.matches.iter().enumerate() {
            assert_eq!(m.i, i);
            let mut best = (0usize, f64::INFINITY);
            for j in 0..9 {
                let d: f64 = da
                    .row_slice(i)
                    .iter()
                    .zip(db.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d < best.1 {
                    best = (j, d);
                }
            }
            assert_eq!(m.j, best.0);
        }
    }

    #[test]
    fn mutual_filter_is_symmetric() {
        let mut rng = stream_rng(31, &[9]);
        for _ in 0..10 {
            let da = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let db = Tensor::matrix(8, 4, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let fwd = nn_match(&da, &db, NnFilter::Mutual).unwrap();
            let bwd = nn_match(&db, &da, NnFilter::Mutual).unwrap();
            let mut transposed: Vec<(usize, usize)> = bwd.pairs().iter().map(|&(j, i)| (i, j)).collect();
            transposed.sort_unstable();
            let mut forward = fwd.pairs();
            forward.sort_unstable();
            assert_eq!(forward, transposed);
        }
    }

    #[test]
    fn empty_b_side_gives_empty_result() {
        let da = Tensor::matrix(3, 4, vec![0.0; 12]).unwrap();
        let db = Tensor::zeros(0, 4);
        let set = nn_match(&da, &db, NnFilter::Plain).unwrap();
        assert!(set.matches.is_empty());
        assert_eq!(set.unmatched_a, vec![0, 1, 2]);
    }

    #[test]
    fn self_span_of_concentrated_attention_is_zero() {
        use crate::gnn::LayerAttention;
        let positions = Tensor::from_rows(&[vec![0.0, 0.0], vec![100.0, 0.0]]).unwrap();
        let record = vec![LayerAttention {
            edge_type: EdgeType::SelfEdges,
            weights_a: vec![Tensor::identity(2)],
            weights_b: vec![Tensor::identity(2)],
        }];
        let spans = attention_span(&record, &positions, &positions, &MatchSet::default()).unwrap();
        assert_relative_eq!(spans[0].span, 0.0);
    }

    #[test]
    fn uniform_attention_span_on_segment() {
        use crate::gnn::LayerAttention;
        // two keypoints on a unit segment, uniform attention: each query's
        // weighted distance is 0.5
        let positions = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let uniform = Tensor::filled(2, 2, 0.5);
        let record = vec![LayerAttention {
            edge_type: EdgeType::SelfEdges,
            weights_a: vec![uniform.clone()],
            weights_b: vec![uniform],
        }];
        let spans = attention_span(&record, &positions, &positions, &MatchSet::default()).unwrap();
        assert_relative_eq!(spans[0].span, 0.5);
    }

    #[test]
    fn cross_span_requires_matches() {
        use crate::gnn::LayerAttention;
        let positions = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let uniform = Tensor::filled(2, 2, 0.5);
        let record = vec![LayerAttention {
            edge_type: EdgeType::CrossEdges,
            weights_a: vec![uniform.clone()],
            weights_b: vec![uniform],
        }];
        assert!(attention_span(&record, &positions, &positions, &MatchSet::default()).is_err());
        let matches = MatchSet {
            matches: vec![Match { i: 0, j: 1, confidence: 0.9 }],
            unmatched_a: vec![1],
            unmatched_b: vec![0],
        };
        let spans = attention_span(&record, &positions, &positions, &matches).unwrap();
        // A query 0 matched to B keypoint 1: distances from B1 to (B0, B1)
        // are (1, 0) with uniform weights -> 0.5; same mirrored
        assert_relative_eq!(spans[0].span, 0.5);
    }
}
