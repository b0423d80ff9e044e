//! Keypoint/descriptor containers, position normalization, and the feature
//! file formats (binary `SGFM` and its JSON mirror).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const SGFM_MAGIC: &[u8; 4] = b"SGFM";
pub const SGFM_VERSION: u32 = 1;

/// Detected interest point: pixel position plus detection confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }
}

/// Local features of one image: keypoints and their descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    /// (width, height) in pixels.
    pub image_size: (f64, f64),
    pub keypoints: Vec<Keypoint>,
    /// One descriptor row per keypoint.
    pub descriptors: Tensor,
}

/// A single invariant violation found by [`validate_feature_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub index: Option<usize>,
    pub field: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.index {
            Some(i) => write!(f, "[{}] {}: {}", i, self.field, self.detail),
            None => write!(f, "{}: {}", self.field, self.detail),
        }
    }
}

impl LocalFeatureSet {
    pub fn new(image_size: (f64, f64), keypoints: Vec<Keypoint>, descriptors: Tensor) -> Self {
        Self { image_size, keypoints, descriptors }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    /// Keypoint positions as an `Mx2` tensor (pixels).
    pub fn positions(&self) -> Tensor {
        let mut t = Tensor::zeros(self.len(), 2);
        for (i, kp) in self.keypoints.iter().enumerate() {
            t.set(i, 0, kp.x);
            t.set(i, 1, kp.y);
        }
        t
    }
}

/// Check every container invariant; violations are data, not errors.
pub fn validate_feature_set(set: &LocalFeatureSet) -> Vec<Violation> {
    let mut out = Vec::new();
    let (w, h) = set.image_size;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        out.push(Violation {
            index: None,
            field: "image_size",
            detail: format!("must be positive and finite, got {w}x{h}"),
        });
    }
    if set.descriptors.rows() != set.keypoints.len() {
        out.push(Violation {
            index: None,
            field: "descriptors",
            detail: format!("{} rows for {} keypoints", set.descriptors.rows(), set.keypoints.len()),
        });
    }
    if set.descriptors.cols() == 0 && !set.keypoints.is_empty() {
        out.push(Violation { index: None, field: "descriptors", detail: "descriptor width is zero".into() });
    }
    for (i, kp) in set.keypoints.iter().enumerate() {
        if !(kp.x >= 0.0 && kp.x < w) || !(kp.y >= 0.0 && kp.y < h) {
            out.push(Violation {
                index: Some(i),
                field: "position",
                detail: format!("({}, {}) outside image {w}x{h}", kp.x, kp.y),
            });
        }
        if !(0.0..=1.0).contains(&kp.confidence) || !kp.confidence.is_finite() {
            out.push(Violation {
                index: Some(i),
                field: "confidence",
                detail: format!("{} not in [0, 1]", kp.confidence),
            });
        }
    }
    let cols = set.descriptors.cols();
    for r in 0..set.descriptors.rows() {
        for c in 0..cols {
            let v = set.descriptors.at(r, c);
            if !v.is_finite() {
                out.push(Violation {
                    index: Some(r),
                    field: "descriptor",
                    detail: format!("non-finite entry at ({r}, {c})"),
                });
            }
        }
    }
    out
}

/// Normalized keypoint positions: center the image at the origin and divide
/// by the largest image dimension. Confidence passes through unchanged.
///
/// Returns an `Mx3` tensor of `(x', y', c)` rows.
pub fn normalize_keypoints(set: &LocalFeatureSet) -> Result<Tensor> {
    let (w, h) = set.image_size;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidInput(format!("image size must be positive, got {w}x{h}")));
    }
    let scale = w.max(h);
    let mut out = Tensor::zeros(set.len(), 3);
    for (i, kp) in set.keypoints.iter().enumerate() {
        out.set(i, 0, (kp.x - w / 2.0) / scale);
        out.set(i, 1, (kp.y - h / 2.0) / scale);
        out.set(i, 2, kp.confidence);
    }
    Ok(out)
}

/// Inverse of [`normalize_keypoints`] for the position columns.
pub fn denormalize_position(image_size: (f64, f64), nx: f64, ny: f64) -> (f64, f64) {
    let (w, h) = image_size;
    let scale = w.max(h);
    (nx * scale + w / 2.0, ny * scale + h / 2.0)
}

// ---- binary SGFM format ----
//
// magic "SGFM", version u32, M u32, D u32, width f32, height f32,
// then M x 3 f32 (x, y, c), then M x D f32 descriptors, all little-endian.

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_sgfm(set: &LocalFeatureSet) -> Result<Vec<u8>> {
    let violations = validate_feature_set(set);
    if !violations.is_empty() {
        return Err(Error::InvalidInput(format!("refusing to encode invalid feature set: {}", violations[0])));
    }
    let m = set.len();
    let d = set.descriptor_dim();
    let mut buf = Vec::with_capacity(24 + m * (3 + d) * 4);
    buf.extend_from_slice(SGFM_MAGIC);
    put_u32(&mut buf, SGFM_VERSION);
    put_u32(&mut buf, m as u32);
    put_u32(&mut buf, d as u32);
    put_f32(&mut buf, set.image_size.0);
    put_f32(&mut buf, set.image_size.1);
    for kp in &set.keypoints {
        put_f32(&mut buf, kp.x);
        put_f32(&mut buf, kp.y);
        put_f32(&mut buf, kp.confidence);
    }
    for r in 0..m {
        for c in 0..d {
            put_f32(&mut buf, set.descriptors.at(r, c));
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated SGFM payload: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn decode_sgfm(bytes: &[u8]) -> Result<LocalFeatureSet> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != SGFM_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"SGFM\"")));
    }
    let version = cur.u32()?;
    if version != SGFM_VERSION {
        return Err(Error::Format(format!("unsupported SGFM version {version}")));
    }
    let m = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let w = cur.f32()?;
    let h = cur.f32()?;
    let mut keypoints = Vec::with_capacity(m);
    for _ in 0..m {
        let x = cur.f32()?;
        let y = cur.f32()?;
        let c = cur.f32()?;
        keypoints.push(Keypoint::new(x, y, c));
    }
    let mut desc = Vec::with_capacity(m * d);
    for _ in 0..m * d {
        desc.push(cur.f32()?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after SGFM payload", bytes.len() - cur.pos)));
    }
    Ok(LocalFeatureSet::new((w, h), keypoints, Tensor::matrix(m, d, desc)?))
}

/// JSON mirror of the binary format, for hand-written fixtures.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureSetJson {
    version: u32,
    width: f64,
    height: f64,
    /// `[x, y, confidence]` per keypoint.
    keypoints: Vec<[f64; 3]>,
    descriptors: Vec<Vec<f64>>,
}

pub fn encode_features_json(set: &LocalFeatureSet) -> Result<String> {
    let m = set.len();
    let json = FeatureSetJson {
        version: SGFM_VERSION,
        width: set.image_size.0,
        height: set.image_size.1,
        keypoints: set.keypoints.iter().map(|k| [k.x, k.y, k.confidence]).collect(),
        descriptors: (0..m).map(|r| set.descriptors.row_slice(r).to_vec()).collect(),
    };
    Ok(serde_json::to_string_pretty(&json)?)
}

pub fn decode_features_json(text: &str) -> Result<LocalFeatureSet> {
    let json: FeatureSetJson = serde_json::from_str(text)?;
    if json.version != SGFM_VERSION {
        return Err(Error::Format(format!("unsupported feature JSON version {}", json.version)));
    }
    let keypoints: Vec<Keypoint> = json.keypoints.iter().map(|k| Keypoint::new(k[0], k[1], k[2])).collect();
    let descriptors = Tensor::from_rows(&json.descriptors)?;
    if descriptors.rows() != keypoints.len() {
        return Err(Error::Format(format!(
            "{} descriptor rows for {} keypoints",
            descriptors.rows(),
            keypoints.len()
        )));
    }
    Ok(LocalFeatureSet::new((json.width, json.height), keypoints, descriptors))
}

/// Read a feature file, sniffing binary SGFM by magic and falling back to the
/// JSON mirror.
pub fn read_features(path: &Path) -> Result<LocalFeatureSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(SGFM_MAGIC) {
        decode_sgfm(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::Format("neither SGFM magic nor UTF-8 JSON".into()))?;
        decode_features_json(text)
    }
}

pub fn write_features(path: &Path, set: &LocalFeatureSet) -> Result<()> {
    let bytes = encode_sgfm(set)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample_set() -> LocalFeatureSet {
        LocalFeatureSet::new(
            (640.0, 480.0),
            vec![Keypoint::new(320.0, 240.0, 0.5), Keypoint::new(10.0, 20.0, 1.0)],
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
    }

    #[test]
    fn center_maps_to_origin() {
        let set = sample_set();
        let n = normalize_keypoints(&set).unwrap();
        assert_eq!(n.at(0, 0), 0.0);
        assert_eq!(n.at(0, 1), 0.0);
        assert_eq!(n.at(0, 2), 0.5);
    }

    #[test]
    fn corner_maps_per_rule() {
        // 640x480, keypoint at (640, 480) -> (0.5, 0.375); out of bounds as a
        // keypoint, but the affine rule itself is what is under test.
        let set = LocalFeatureSet::new(
            (640.0, 480.0),
            vec![Keypoint::new(640.0, 480.0, 1.0)],
            Tensor::zeros(1, 2),
        );
        let n = normalize_keypoints(&set).unwrap();
        assert_eq!(n.at(0, 0), 0.5);
        assert_eq!(n.at(0, 1), 0.375);
        assert_eq!(n.at(0, 2), 1.0);
    }

    #[test]
    fn zero_image_dimension_is_an_error() {
        let mut set = sample_set();
        set.image_size = (0.0, 480.0);
        assert!(normalize_keypoints(&set).is_err());
    }

    #[test]
    fn well_formed_set_has_no_violations() {
        assert!(validate_feature_set(&sample_set()).is_empty());
    }

    #[test]
    fn row_count_mismatch_is_reported() {
        let mut set = sample_set();
        set.descriptors = Tensor::zeros(3, 2);
        let v = validate_feature_set(&set);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "descriptors");
        assert!(v[0].detail.contains('3') && v[0].detail.contains('2'));
    }

    #[test]
    fn nan_descriptor_is_reported_with_position() {
        let mut set = sample_set();
        set.descriptors.set(1, 0, f64::NAN);
        let v = validate_feature_set(&set);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, Some(1));
        assert!(v[0].detail.contains("(1, 0)"));
    }

    #[test]
    fn sgfm_round_trip() {
        let set = sample_set();
        let bytes = encode_sgfm(&set).unwrap();
        assert_eq!(&bytes[..4], SGFM_MAGIC);
        let back = decode_sgfm(&bytes).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let set = sample_set();
        let mut bytes = encode_sgfm(&set).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_sgfm(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let set = sample_set();
        let bytes = encode_sgfm(&set).unwrap();
        assert!(decode_sgfm(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn json_mirror_round_trip() {
        let set = sample_set();
        let text = encode_features_json(&set).unwrap();
        let back = decode_features_json(&text).unwrap();
        assert_eq!(back.keypoints, set.keypoints);
        assert_eq!(back.descriptors, set.descriptors);
    }

    proptest! {
        #[test]
        fn normalization_round_trips(
            w in 1.0f64..4096.0,
            h in 1.0f64..4096.0,
            points in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..40)
        ) {
            let keypoints: Vec<Keypoint> = points
                .iter()
                .map(|(fx, fy, c)| Keypoint::new(fx * w, fy * h, *c))
                .collect();
            let m = keypoints.len();
            let set = LocalFeatureSet::new((w, h), keypoints.clone(), Tensor::zeros(m, 1));
            let n = normalize_keypoints(&set).unwrap();
            for (i, kp) in keypoints.iter().enumerate() {
                let (x, y) = denormalize_position((w, h), n.at(i, 0), n.at(i, 1));
                prop_assert!((x - kp.x).abs() < 1e-12 * w.max(h).max(1.0));
                prop_assert!((y - kp.y).abs() < 1e-12 * w.max(h).max(1.0));
                prop_assert!(n.at(i, 0).abs() <= 0.5 + 1e-12);
                prop_assert!(n.at(i, 1).abs() <= 0.5 + 1e-12);
            }
        }

        #[test]
        fn normalization_is_permutation_equivariant(
            seed in 0u64..1000,
            n_points in 2usize..20
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let keypoints: Vec<Keypoint> = (0..n_points)
                .map(|i| Keypoint::new((i * 13 % 640) as f64, (i * 29 % 480) as f64, 0.5))
                .collect();
            let mut perm: Vec<usize> = (0..n_points).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<Keypoint> = perm.iter().map(|&i| keypoints[i]).collect();

            let set_a = LocalFeatureSet::new((640.0, 480.0), keypoints, Tensor::zeros(n_points, 1));
            let set_b = LocalFeatureSet::new((640.0, 480.0), permuted, Tensor::zeros(n_points, 1));
            let na = normalize_keypoints(&set_a).unwrap();
            let nb = normalize_keypoints(&set_b).unwrap();
            for (out_row, &src_row) in perm.iter().enumerate() {
                for c in 0..3 {
                    prop_assert_eq!(nb.at(out_row, c), na.at(src_row, c));
                }
            }
        }
    }

    #[test]
    fn f32_payload_round_trips_exactly() {
        // Values representable in f32 survive the binary format bit-exactly.
        let set = sample_set();
        let bytes = encode_sgfm(&set).unwrap();
        let back = decode_sgfm(&bytes).unwrap();
        let again = encode_sgfm(&back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn norm_x_equals_expected_value() {
        let set = LocalFeatureSet::new(
            (640.0, 480.0),
            vec![Keypoint::new(0.0, 0.0, 0.25)],
            Tensor::zeros(1, 4),
        );
        let n = normalize_keypoints(&set).unwrap();
        assert_relative_eq!(n.at(0, 0), -0.5);
        assert_relative_eq!(n.at(0, 1), -0.375);
    }
}
