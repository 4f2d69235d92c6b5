//! Core value types shared by every other module: point clouds, part masks,
//! grounded samples, and the material catalog.
//!
//! All types are immutable after construction and freely shareable across
//! threads.

use crate::error::{Error, Result};
use crate::grammar;

/// A single point: unit-ball coordinates plus a color in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Point {
    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// A point cloud of `N` colored points inside the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Validates the construction invariants: at least 8 points, finite
    /// coordinates, max point norm within `1 + 1e-6`, colors in `[0,1]`.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 8 {
            return Err(Error::Validation(format!(
                "point cloud needs at least 8 points, got {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            let vals = [p.x, p.y, p.z, p.r, p.g, p.b];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite value at point {i}")));
            }
            let norm = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
            if norm > 1.0 + 1e-6 {
                return Err(Error::Validation(format!(
                    "point {i} has norm {norm} outside the unit ball"
                )));
            }
            if [p.r, p.g, p.b].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Validation(format!("color out of [0,1] at point {i}")));
            }
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Row-major `N x 3` coordinates.
    pub fn coords(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(Point::coords).collect()
    }
}

/// A binary point-membership mask with the phrase and material it grounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PartMask {
    pub bits: Vec<bool>,
    pub phrase: String,
    pub material: String,
}

impl PartMask {
    pub fn new(bits: Vec<bool>, phrase: impl Into<String>, material: impl Into<String>) -> Result<Self> {
        let phrase = phrase.into();
        if phrase.is_empty() {
            return Err(Error::Validation("part mask phrase must be nonempty".into()));
        }
        Ok(PartMask { bits, phrase, material: material.into() })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of set bits.
    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Intersection-over-union of two equal-length masks.
///
/// Two empty masks have IoU 1 so that a correctly-empty prediction is not
/// punished.
pub fn iou(a: &PartMask, b: &PartMask) -> Result<f64> {
    iou_bits(&a.bits, &b.bits)
}

/// `iou` on raw bit vectors.
pub fn iou_bits(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "iou length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Run-length encodes a bit vector. Runs alternate starting with the count of
/// leading zeros, so an all-ones mask encodes as `[0, n]`.
pub fn encode_rle(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    if runs.len() == 1 && bits.is_empty() {
        runs[0] = 0;
    }
    runs
}

/// Inverse of [`encode_rle`]. The runs must sum to `n`.
pub fn decode_rle(runs: &[usize], n: usize) -> Result<Vec<bool>> {
    let total: usize = runs.iter().sum();
    if total != n {
        return Err(Error::format(format!("rle runs sum to {total}, expected {n}")));
    }
    let mut bits = Vec::with_capacity(n);
    let mut value = false;
    for &run in runs {
        bits.extend(std::iter::repeat(value).take(run));
        value = !value;
    }
    Ok(bits)
}

/// Task subset a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Papgd,
    Direct,
    Reasoning,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Papgd => "papgd",
            Task::Direct => "direct",
            Task::Reasoning => "reasoning",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "papgd" => Ok(Task::Papgd),
            "direct" => Ok(Task::Direct),
            "reasoning" => Ok(Task::Reasoning),
            other => Err(Error::Validation(format!("unknown task {other:?}"))),
        }
    }
}

/// One corpus record: an instruction, a grounded caption, and the ordered
/// part masks its `[SEG]` tokens refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedSample {
    pub id: String,
    pub task: Task,
    pub cloud: PointCloud,
    pub instruction: String,
    pub caption: String,
    pub masks: Vec<PartMask>,
}

impl GroundedSample {
    /// Checks the cross-field invariants: caption `[SEG]` count equals mask
    /// count, mask lengths match the cloud, ground-truth masks are nonempty,
    /// the task-specific mask-count bounds hold, and masks for distinct
    /// phrases are pairwise disjoint.
    pub fn new(
        id: impl Into<String>,
        task: Task,
        cloud: PointCloud,
        instruction: impl Into<String>,
        caption: impl Into<String>,
        masks: Vec<PartMask>,
    ) -> Result<Self> {
        let caption = caption.into();
        let seg_count = grammar::count_seg(&caption);
        if seg_count != masks.len() {
            return Err(Error::Validation(format!(
                "caption has {seg_count} [SEG] tokens but {} masks",
                masks.len()
            )));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != cloud.len() {
                return Err(Error::Validation(format!(
                    "mask {i} has length {} but the cloud has {} points",
                    m.len(),
                    cloud.len()
                )));
            }
            if m.cardinality() == 0 {
                return Err(Error::Validation(format!("ground-truth mask {i} is empty")));
            }
        }
        match task {
            Task::Papgd => {
                if masks.is_empty() || masks.len() > 6 {
                    return Err(Error::Validation(format!(
                        "papgd samples carry 1..=6 masks, got {}",
                        masks.len()
                    )));
                }
            }
            Task::Direct | Task::Reasoning => {
                if masks.len() != 1 {
                    return Err(Error::Validation(format!(
                        "single-part samples carry exactly 1 mask, got {}",
                        masks.len()
                    )));
                }
            }
        }
        // Distinct phrases must not claim the same point.
        for i in 0..masks.len() {
            for j in (i + 1)..masks.len() {
                if masks[i].phrase.eq_ignore_ascii_case(&masks[j].phrase) {
                    continue;
                }
                if masks[i].bits.iter().zip(&masks[j].bits).any(|(&a, &b)| a && b) {
                    return Err(Error::Validation(format!(
                        "masks for {:?} and {:?} overlap",
                        masks[i].phrase, masks[j].phrase
                    )));
                }
            }
        }
        Ok(GroundedSample {
            id: id.into(),
            task,
            cloud,
            instruction: instruction.into(),
            caption,
            masks,
        })
    }
}

/// An entry of the material catalog: a name, its base color, and the
/// per-point color jitter used at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialCatalogEntry {
    pub name: String,
    pub base_color: (f64, f64, f64),
    pub color_jitter: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn mask(bits: &[u8]) -> PartMask {
        PartMask::new(bits.iter().map(|&b| b != 0).collect(), "p", "m").unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask(&[0, 0, 1, 1]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn iou_hand_case() {
        // intersection = 1, union = 3, by enumeration
        let a = mask(&[1, 1, 0, 0]);
        let b = mask(&[0, 1, 1, 0]);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn iou_empty_both() {
        let a = mask(&[0, 0]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn iou_length_mismatch_is_error() {
        let a = mask(&[1, 0]);
        let b = mask(&[1, 0, 0]);
        assert!(iou(&a, &b).is_err());
    }

    #[test]
    fn iou_symmetric_and_monotone() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 32;
            let a: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let b: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let ab = iou_bits(&a, &b).unwrap();
            let ba = iou_bits(&b, &a).unwrap();
            assert_eq!(ab, ba);
            // Growing the intersection on a fixed union cannot lower IoU:
            // flip one a-only bit of b on, keeping the union identical.
            if let Some(i) = (0..n).find(|&i| a[i] && !b[i]) {
                let mut b2 = b.clone();
                b2[i] = true;
                assert!(iou_bits(&a, &b2).unwrap() >= ab);
            }
        }
    }

    #[test]
    fn rle_hand_cases() {
        assert_eq!(encode_rle(&[false, false, true, true]), vec![2, 2]);
        assert_eq!(encode_rle(&[false; 5]), vec![5]);
        assert_eq!(encode_rle(&[true, true]), vec![0, 2]);
        assert_eq!(decode_rle(&[2, 2], 4).unwrap(), vec![false, false, true, true]);
    }

    #[test]
    fn rle_round_trip_randomized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(0..=4096);
            let bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let runs = encode_rle(&bits);
            assert_eq!(decode_rle(&runs, n).unwrap(), bits);
        }
    }

    #[test]
    fn rle_sum_mismatch_is_error() {
        assert!(decode_rle(&[2, 1], 4).is_err());
    }

    #[test]
    fn cloud_rejects_bad_inputs() {
        let p = Point { x: 0.0, y: 0.0, z: 0.0, r: 0.5, g: 0.5, b: 0.5 };
        assert!(PointCloud::new(vec![p; 4]).is_err());
        let mut far = p;
        far.x = 2.0;
        let mut pts = vec![p; 8];
        pts[0] = far;
        assert!(PointCloud::new(pts).is_err());
    }

    #[test]
    fn sample_rejects_seg_mask_mismatch() {
        let p = Point { x: 0.0, y: 0.0, z: 0.0, r: 0.5, g: 0.5, b: 0.5 };
        let cloud = PointCloud::new(vec![p; 8]).unwrap();
        let m = PartMask::new(vec![true; 8], "seat", "wood").unwrap();
        let err = GroundedSample::new(
            "s0",
            Task::Papgd,
            cloud,
            "describe",
            "no seg markers here",
            vec![m],
        );
        assert!(err.is_err());
    }
}
