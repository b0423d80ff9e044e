//! Synthetic planar-scene generation: random homographies, warped keypoint
//! pairs with descriptor noise, and exact ground-truth correspondence labels.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::features::{Keypoint, LocalFeatureSet};
use crate::linalg;

/// 3x3 projective transform, unit-normalized so `h[2][2] == 1` when nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub h: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self { h: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { h: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]] }
    }

    pub fn from_flat(v: &[f64; 9]) -> Self {
        Self {
            h: [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]],
        }
    }

    pub fn to_flat(&self) -> [f64; 9] {
        let h = &self.h;
        [h[0][0], h[0][1], h[0][2], h[1][0], h[1][1], h[1][2], h[2][0], h[2][1], h[2][2]]
    }

    pub fn det(&self) -> f64 {
        let h = &self.h;
        h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1])
            - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
            + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0])
    }

    pub fn is_invertible(&self) -> bool {
        self.det().abs() > 1e-12
    }

    /// Scale so the bottom-right entry is 1 (when it is nonzero).
    pub fn normalized(&self) -> Self {
        let s = self.h[2][2];
        if s == 0.0 || !s.is_finite() {
            return *self;
        }
        let mut out = *self;
        for row in &mut out.h {
            for v in row {
                *v /= s;
            }
        }
        out
    }

    pub fn compose(&self, rhs: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (i, out_row) in out.iter_mut().enumerate() {
            for (j, out_v) in out_row.iter_mut().enumerate() {
                *out_v = (0..3).map(|k| self.h[i][k] * rhs.h[k][j]).sum();
            }
        }
        Homography { h: out }
    }

    pub fn inverse(&self) -> Result<Homography> {
        let d = self.det();
        if d.abs() <= 1e-12 {
            return Err(Error::Degenerate(format!("homography not invertible (det = {d:e})")));
        }
        let h = &self.h;
        let adj = [
            [
                h[1][1] * h[2][2] - h[1][2] * h[2][1],
                h[0][2] * h[2][1] - h[0][1] * h[2][2],
                h[0][1] * h[1][2] - h[0][2] * h[1][1],
            ],
            [
                h[1][2] * h[2][0] - h[1][0] * h[2][2],
                h[0][0] * h[2][2] - h[0][2] * h[2][0],
                h[0][2] * h[1][0] - h[0][0] * h[1][2],
            ],
            [
                h[1][0] * h[2][1] - h[1][1] * h[2][0],
                h[0][1] * h[2][0] - h[0][0] * h[2][1],
                h[0][0] * h[1][1] - h[0][1] * h[1][0],
            ],
        ];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = adj[i][j] / d;
            }
        }
        Ok(Homography { h: out }.normalized())
    }

    /// Warp a point; errors when the homogeneous depth vanishes.
    pub fn apply(&self, point: (f64, f64)) -> Result<(f64, f64)> {
        apply_homography(self, point)
    }
}

/// Project `(x, y)` through `h`, dividing by the homogeneous depth.
pub fn apply_homography(h: &Homography, point: (f64, f64)) -> Result<(f64, f64)> {
    let (x, y) = point;
    let m = &h.h;
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    if w.abs() <= 1e-12 {
        return Err(Error::Degenerate(format!("point ({x}, {y}) maps to infinity (w = {w:e})")));
    }
    Ok((
        (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
        (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
    ))
}

/// Exact homography mapping four source points to four targets.
pub fn homography_from_four_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Homography> {
    let mut a = vec![vec![0.0; 8]; 8];
    let mut b = vec![0.0; 8];
    for k in 0..4 {
        let (x, y) = src[k];
        let (u, v) = dst[k];
        a[2 * k] = vec![x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y];
        b[2 * k] = u;
        a[2 * k + 1] = vec![0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y];
        b[2 * k + 1] = v;
    }
    let h = linalg::solve(&mut a, &mut b)?;
    Ok(Homography {
        h: [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]],
    })
}

/// Sampling ranges for random homographies.
///
/// Rotation and scale act about the image center; translations and the
/// per-corner perspective jitter are in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomographyConfig {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub translation_x: (f64, f64),
    pub translation_y: (f64, f64),
    pub perspective_jitter: (f64, f64),
    /// Minimum fraction of the source frame that must land inside the target
    /// frame; resampled otherwise.
    pub min_in_frame: f64,
    pub max_retries: usize,
}

impl HomographyConfig {
    /// Wide but solvable warps for a given image size: rotation +/-25 deg,
    /// scale [0.8, 1.25], translation +/-0.2 of each dimension, corner
    /// jitter +/-0.1 of each dimension.
    pub fn default_for(image_size: (f64, f64)) -> Self {
        let (w, h) = image_size;
        let dim = w.max(h);
        Self {
            rotation_deg: (-25.0, 25.0),
            scale: (0.8, 1.25),
            translation_x: (-0.2 * w, 0.2 * w),
            translation_y: (-0.2 * h, 0.2 * h),
            perspective_jitter: (-0.1 * dim, 0.1 * dim),
            min_in_frame: 0.5,
            max_retries: 100,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            translation_x: (0.0, 0.0),
            translation_y: (0.0, 0.0),
            perspective_jitter: (0.0, 0.0),
            min_in_frame: 0.0,
            max_retries: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("translation_x", self.translation_x),
            ("translation_y", self.translation_y),
            ("perspective_jitter", self.perspective_jitter),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!("empty {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn sample_range(rng: &mut ChaCha12Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Fraction of a grid over the source frame that lands inside the target
/// frame after warping.
fn in_frame_fraction(h: &Homography, image_size: (f64, f64)) -> f64 {
    let (w, hh) = image_size;
    const GRID: usize = 16;
    let mut inside = 0usize;
    for gy in 0..GRID {
        for gx in 0..GRID {
            let x = (gx as f64 + 0.5) / GRID as f64 * w;
            let y = (gy as f64 + 0.5) / GRID as f64 * hh;
            if let Ok((u, v)) = h.apply((x, y)) {
                if u >= 0.0 && u < w && v >= 0.0 && v < hh {
                    inside += 1;
                }
            }
        }
    }
    inside as f64 / (GRID * GRID) as f64
}

/// Sample translation . rotation . scale . perspective-jitter, retrying until
/// the warp is invertible and keeps enough of the frame in view.
pub fn sample_homography(
    rng: &mut ChaCha12Rng,
    config: &HomographyConfig,
    image_size: (f64, f64),
) -> Result<Homography> {
    config.validate()?;
    let (w, h) = image_size;
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    for _ in 0..config.max_retries.max(1) {
        let theta = sample_range(rng, config.rotation_deg).to_radians();
        let s = sample_range(rng, config.scale);
        let tx = sample_range(rng, config.translation_x);
        let ty = sample_range(rng, config.translation_y);
        let mut jittered = corners;
        for corner in &mut jittered {
            corner.0 += sample_range(rng, config.perspective_jitter);
            corner.1 += sample_range(rng, config.perspective_jitter);
        }
        let Ok(perspective) = homography_from_four_points(&corners, &jittered) else {
            continue;
        };
        let (cx, cy) = (w / 2.0, h / 2.0);
        let (cos, sin) = (theta.cos(), theta.sin());
        // T(c) . R(theta) . S(s) . T(-c), then the output translation
        let rs = Homography {
            h: [
                [s * cos, -s * sin, cx - s * (cos * cx - sin * cy)],
                [s * sin, s * cos, cy - s * (sin * cx + cos * cy)],
                [0.0, 0.0, 1.0],
            ],
        };
        let candidate = Homography::translation(tx, ty).compose(&rs).compose(&perspective).normalized();
        if !candidate.is_invertible() {
            continue;
        }
        if in_frame_fraction(&candidate, image_size) + 1e-12 >= config.min_in_frame {
            return Ok(candidate);
        }
    }
    Err(Error::InvalidInput(format!(
        "no acceptable homography within {} retries (min_in_frame = {})",
        config.max_retries, config.min_in_frame
    )))
}

/// Supervision for one training pair: matched index pairs plus the keypoints
/// confidently known to be unmatched on each side.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabels {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl GroundTruthLabels {
    /// Each index on each side appears in at most one match.
    pub fn is_partial_bijection(&self) -> bool {
        let mut rows: Vec<usize> = self.matches.iter().map(|m| m.0).collect();
        let mut cols: Vec<usize> = self.matches.iter().map(|m| m.1).collect();
        rows.sort_unstable();
        cols.sort_unstable();
        rows.windows(2).all(|w| w[0] != w[1]) && cols.windows(2).all(|w| w[0] != w[1])
    }
}

/// Label correspondences from a ground-truth homography.
///
/// The reprojection error is symmetrized: `e(i, j)` is the larger of the
/// forward error `|h(p_i) - p_j|` and the backward error `|h^-1(p_j) - p_i|`.
/// Matches must be the strict minimum of both their row and their column and
/// fall below `match_threshold`; a keypoint is unmatched when its best error
/// exceeds `unmatched_threshold`. Keypoints in neither set carry no
/// supervision.
pub fn label_correspondences(
    features_a: &LocalFeatureSet,
    features_b: &LocalFeatureSet,
    h: &Homography,
    match_threshold: f64,
    unmatched_threshold: f64,
) -> Result<GroundTruthLabels> {
    if match_threshold > unmatched_threshold {
        return Err(Error::InvalidInput(format!(
            "match threshold {match_threshold} exceeds unmatched threshold {unmatched_threshold}"
        )));
    }
    let h_inv = h.inverse()?;
    let m = features_a.len();
    let n = features_b.len();
    let mut err = vec![f64::INFINITY; m * n];
    for (i, ka) in features_a.keypoints.iter().enumerate() {
        let fwd = h.apply((ka.x, ka.y)).ok();
        for (j, kb) in features_b.keypoints.iter().enumerate() {
            let bwd = h_inv.apply((kb.x, kb.y)).ok();
            let e_fwd = fwd.map_or(f64::INFINITY, |(u, v)| ((u - kb.x).powi(2) + (v - kb.y).powi(2)).sqrt());
            let e_bwd = bwd.map_or(f64::INFINITY, |(u, v)| ((u - ka.x).powi(2) + (v - ka.y).powi(2)).sqrt());
            err[i * n + j] = e_fwd.max(e_bwd);
        }
    }

    let mut labels = GroundTruthLabels::default();
    for i in 0..m {
        for j in 0..n {
            let e = err[i * n + j];
            if e >= match_threshold {
                continue;
            }
            let strict_row_min = (0..n).all(|jj| jj == j || err[i * n + jj] > e);
            let strict_col_min = (0..m).all(|ii| ii == i || err[ii * n + j] > e);
            if strict_row_min && strict_col_min {
                labels.matches.push((i, j));
            }
        }
    }
    // With an ambiguity band (unmatched_threshold > match_threshold),
    // keypoints whose best error falls inside the band carry no supervision.
    // Without a band, unmatched is simply the complement of the matches, so
    // competition losers are supervised to the dustbin too.
    let band = unmatched_threshold > match_threshold;
    let matched_rows: Vec<bool> = {
        let mut v = vec![false; m];
        for (i, _) in &labels.matches {
            v[*i] = true;
        }
        v
    };
    let matched_cols: Vec<bool> = {
        let mut v = vec![false; n];
        for (_, j) in &labels.matches {
            v[*j] = true;
        }
        v
    };
    for i in 0..m {
        if matched_rows[i] {
            continue;
        }
        let best = (0..n).fold(f64::INFINITY, |acc, j| acc.min(err[i * n + j]));
        if !band || best > unmatched_threshold {
            labels.unmatched_a.push(i);
        }
    }
    for j in 0..n {
        if matched_cols[j] {
            continue;
        }
        let best = (0..m).fold(f64::INFINITY, |acc, i| acc.min(err[i * n + j]));
        if !band || best > unmatched_threshold {
            labels.unmatched_b.push(j);
        }
    }
    Ok(labels)
}

/// One synthesized training/evaluation pair with exact supervision.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub features_a: LocalFeatureSet,
    pub features_b: LocalFeatureSet,
    pub labels: GroundTruthLabels,
    pub homography: Homography,
}

/// Scene synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_points: usize,
    pub image_size: (f64, f64),
    pub descriptor_dim: usize,
    /// Std of the additive Gaussian perturbation applied per descriptor
    /// coordinate on the warped side (stand-in for photometric distortion).
    pub descriptor_noise: f64,
    /// Fraction of true correspondences deleted from one (random) side.
    pub dropout_rate: f64,
    /// Random unmatched keypoints appended to each side.
    pub num_distractors: usize,
    pub match_threshold: f64,
    pub unmatched_threshold: f64,
    pub homography: HomographyConfig,
}

impl SceneConfig {
    pub fn desk_default() -> Self {
        let image_size = (640.0, 480.0);
        Self {
            num_points: 50,
            image_size,
            descriptor_dim: 32,
            descriptor_noise: 0.1,
            dropout_rate: 0.2,
            num_distractors: 10,
            match_threshold: 3.0,
            unmatched_threshold: 3.0,
            homography: HomographyConfig::default_for(image_size),
        }
    }
}

fn random_unit_descriptor(rng: &mut ChaCha12Rng, dim: usize) -> Vec<f64> {
    use rand_distr::Distribution;
    let normal = rand_distr::StandardNormal;
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn renormalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Generate one scene: keypoints in image A, their homography-warped copies
/// in image B with perturbed descriptors, dropout, distractors, and labels.
pub fn generate_scene(rng: &mut ChaCha12Rng, config: &SceneConfig) -> Result<TrainingPair> {
    use rand_distr::Distribution;
    if config.num_points == 0 {
        return Err(Error::InvalidInput("num_points must be at least 1".into()));
    }
    if config.descriptor_dim == 0 {
        return Err(Error::InvalidInput("descriptor_dim must be at least 1".into()));
    }
    let (w, h) = config.image_size;
    let homography = sample_homography(rng, &config.homography, config.image_size)?;
    let normal = rand_distr::StandardNormal;

    let mut kp_a: Vec<Keypoint> = Vec::new();
    let mut desc_a: Vec<Vec<f64>> = Vec::new();
    let mut kp_b: Vec<Keypoint> = Vec::new();
    let mut desc_b: Vec<Vec<f64>> = Vec::new();

    for _ in 0..config.num_points {
        let kp = Keypoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(0.0..=1.0));
        let desc = random_unit_descriptor(rng, config.descriptor_dim);
        let warped = homography.apply((kp.x, kp.y)).ok();
        let in_frame = warped.map_or(false, |(u, v)| u >= 0.0 && u < w && v >= 0.0 && v < h);

        // Sample the dropout decision unconditionally so the random stream
        // does not depend on the warp geometry.
        let dropped = rng.random_range(0.0..1.0) < config.dropout_rate;
        let drop_side_a = rng.random_range(0..2u32) == 0;

        if in_frame && dropped && drop_side_a {
            // correspondence deleted on the A side: keep only the B copy
        } else {
            kp_a.push(kp);
            desc_a.push(desc.clone());
        }
        if in_frame && !(dropped && !drop_side_a) {
            let (u, v) = warped.unwrap();
            kp_b.push(Keypoint::new(u, v, kp.confidence));
            let noise_sample = |rng: &mut ChaCha12Rng| -> f64 { normal.sample(rng) };
            let noisy: Vec<f64> = desc
                .iter()
                .map(|x| x + config.descriptor_noise * noise_sample(rng))
                .collect();
            desc_b.push(renormalize(noisy));
        }
    }

    for _ in 0..config.num_distractors {
        let kp = Keypoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(0.0..=1.0));
        kp_a.push(kp);
        desc_a.push(random_unit_descriptor(rng, config.descriptor_dim));
    }
    for _ in 0..config.num_distractors {
        let kp = Keypoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h), rng.random_range(0.0..=1.0));
        kp_b.push(kp);
        desc_b.push(random_unit_descriptor(rng, config.descriptor_dim));
    }

    if kp_a.is_empty() || kp_b.is_empty() {
        return Err(Error::InvalidInput(format!(
            "scene degenerated to {} keypoints in A and {} in B",
            kp_a.len(),
            kp_b.len()
        )));
    }

    // Shuffle image B so ground-truth partners are not index-aligned.
    let mut perm: Vec<usize> = (0..kp_b.len()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let kp_b: Vec<Keypoint> = perm.iter().map(|&i| kp_b[i]).collect();
    let desc_b: Vec<Vec<f64>> = perm.iter().map(|&i| desc_b[i].clone()).collect();

    let features_a = LocalFeatureSet::new(config.image_size, kp_a, Tensor::from_rows(&desc_a)?);
    let features_b = LocalFeatureSet::new(config.image_size, kp_b, Tensor::from_rows(&desc_b)?);
    let labels = label_correspondences(
        &features_a,
        &features_b,
        &homography,
        config.match_threshold,
        config.unmatched_threshold,
    )?;
    Ok(TrainingPair { features_a, features_b, labels, homography })
}

/// Regenerable dataset description: pairs are derived on demand from the
/// master seed, so parallel and serial generation agree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub pairs: usize,
    pub master_seed: u64,
    pub config: SceneConfig,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn new(pairs: usize, master_seed: u64, config: SceneConfig) -> Self {
        Self { version: MANIFEST_VERSION, pairs, master_seed, config }
    }

    /// Deterministically regenerate one pair of the dataset.
    pub fn pair(&self, index: usize) -> Result<TrainingPair> {
        let mut rng = crate::rng::stream_rng(self.master_seed, &[index as u64]);
        generate_scene(&mut rng, &self.config)
    }
}

/// JSON labels sidecar written next to exported feature files.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsJson {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
    pub homography: [f64; 9],
}

impl LabelsJson {
    pub fn new(labels: &GroundTruthLabels, homography: &Homography) -> Self {
        Self {
            matches: labels.matches.clone(),
            unmatched_a: labels.unmatched_a.clone(),
            unmatched_b: labels.unmatched_b.clone(),
            homography: homography.to_flat(),
        }
    }

    pub fn labels(&self) -> GroundTruthLabels {
        GroundTruthLabels {
            matches: self.matches.clone(),
            unmatched_a: self.unmatched_a.clone(),
            unmatched_b: self.unmatched_b.clone(),
        }
    }
}
