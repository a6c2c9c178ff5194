//! Body-part regions from 18 pose keypoints.
//!
//! Joint numbering (zero-based here, one-based in the region definitions):
//!
//! | idx | joint          | idx | joint          |
//! |-----|----------------|-----|----------------|
//! | 0   | nose           | 9   | left elbow     |
//! | 1   | right eye      | 10  | right wrist    |
//! | 2   | left eye       | 11  | left wrist     |
//! | 3   | right ear      | 12  | right hip      |
//! | 4   | left ear       | 13  | left hip       |
//! | 5   | neck           | 14  | right knee     |
//! | 6   | right shoulder | 15  | left knee      |
//! | 7   | left shoulder  | 16  | right ankle    |
//! | 8   | right elbow    | 17  | left ankle     |
//!
//! The joints are ordered top to bottom so that the five regions are the
//! contiguous index ranges `K1..K18`, `K1..K8`, `K6..K14`, `K13..K16` and `K15..K18`.

use std::ops::Range;

use reid_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINT_COUNT: usize = 18;

pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "nose",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
    "neck",
    "right_shoulder",
    "left_shoulder",
    "right_elbow",
    "left_elbow",
    "right_wrist",
    "left_wrist",
    "right_hip",
    "left_hip",
    "right_knee",
    "left_knee",
    "right_ankle",
    "left_ankle",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("degenerate crop: box {0:?} is empty inside a {1}x{2} image")]
    DegenerateCrop(RegionBox, usize, usize),
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Image-space joint: origin top-left, y grows downward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Joint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoints18 {
    joints: [Joint; JOINT_COUNT],
}

impl Keypoints18 {
    pub fn new(joints: [Joint; JOINT_COUNT]) -> Result<Self> {
        for (i, j) in joints.iter().enumerate() {
            if !(j.x.is_finite() && j.y.is_finite()) {
                return Err(GeometryError::InvalidKeypoints(format!(
                    "joint {i} has non-finite coordinates"
                )));
            }
            if !(0.0..=1.0).contains(&j.confidence) {
                return Err(GeometryError::InvalidKeypoints(format!(
                    "joint {i} confidence {} outside [0, 1]",
                    j.confidence
                )));
            }
        }
        Ok(Self { joints })
    }

    pub fn from_slice(joints: &[Joint]) -> Result<Self> {
        let joints: [Joint; JOINT_COUNT] = joints.try_into().map_err(|_| {
            GeometryError::InvalidKeypoints(format!(
                "expected {JOINT_COUNT} joints, got {}",
                joints.len()
            ))
        })?;
        Self::new(joints)
    }

    pub fn joints(&self) -> &[Joint; JOINT_COUNT] {
        &self.joints
    }

    pub fn map(&self, f: impl Fn(Joint) -> Joint) -> Self {
        Self {
            joints: self.joints.map(f),
        }
    }

    fn ys(&self, set: Range<usize>) -> impl Iterator<Item = f64> + '_ {
        self.joints[set].iter().map(|j| j.y)
    }

    fn min_y(&self, set: Range<usize>) -> f64 {
        self.ys(set).fold(f64::INFINITY, f64::min)
    }

    fn max_y(&self, set: Range<usize>) -> f64 {
        self.ys(set).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartId {
    Whole,
    Head,
    UpperBody,
    UpperLeg,
    LowerLeg,
}

impl PartId {
    pub const ALL: [PartId; 5] = [
        PartId::Whole,
        PartId::Head,
        PartId::UpperBody,
        PartId::UpperLeg,
        PartId::LowerLeg,
    ];
    pub const PARTS: [PartId; 4] = [
        PartId::Head,
        PartId::UpperBody,
        PartId::UpperLeg,
        PartId::LowerLeg,
    ];

    /// Zero-based joint indices defining the region.
    pub fn joints(self) -> Range<usize> {
        match self {
            PartId::Whole => 0..18,
            PartId::Head => 0..8,
            PartId::UpperBody => 5..14,
            PartId::UpperLeg => 12..16,
            PartId::LowerLeg => 14..18,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartId::Whole => "whole",
            PartId::Head => "head",
            PartId::UpperBody => "upper_body",
            PartId::UpperLeg => "upper_leg",
            PartId::LowerLeg => "lower_leg",
        }
    }
}

/// Height, centre and horizontal extent of the whole-body region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyFrame {
    pub height: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub x_left: f64,
    pub x_right: f64,
    /// Extrapolated top of the head, `2·min_head(y) − max_head(y)`.
    pub top: f64,
    /// Extrapolated sole of the feet, `(4·max_lower_leg(y) − min_lower_leg(y)) / 3`.
    pub bottom: f64,
}

pub fn body_frame(kps: &Keypoints18) -> Result<BodyFrame> {
    let head = PartId::Head.joints();
    let legs = PartId::LowerLeg.joints();
    let top = 2.0 * kps.min_y(head.clone()) - kps.max_y(head);
    let bottom = (4.0 * kps.max_y(legs.clone()) - kps.min_y(legs)) / 3.0;
    let height = bottom - top;
    if !(height > 0.0) {
        return Err(GeometryError::DegeneratePose(format!(
            "body height {height} is not positive"
        )));
    }
    let n = JOINT_COUNT as f64;
    let center_x = kps.joints.iter().map(|j| j.x).sum::<f64>() / n;
    let center_y = kps.joints.iter().map(|j| j.y).sum::<f64>() / n;
    let min_x = kps.joints.iter().map(|j| j.x).fold(f64::INFINITY, f64::min);
    let max_x = kps.joints.iter().map(|j| j.x).fold(f64::NEG_INFINITY, f64::max);
    Ok(BodyFrame {
        height,
        center_x,
        center_y,
        x_left: (center_x - height / 4.0).min(min_x),
        x_right: (center_x + height / 4.0).max(max_x),
        top,
        bottom,
    })
}

/// Axis-aligned box in pixel coordinates (continuous edges).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionBox {
    pub part: PartId,
    pub x_left: f64,
    pub y_top: f64,
    pub x_right: f64,
    pub y_bottom: f64,
}

impl RegionBox {
    pub fn width(&self) -> f64 {
        self.x_right - self.x_left
    }

    pub fn height(&self) -> f64 {
        self.y_bottom - self.y_top
    }

    pub fn is_empty(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clamp(&self, width: usize, height: usize) -> RegionBox {
        let (w, h) = (width as f64, height as f64);
        RegionBox {
            part: self.part,
            x_left: self.x_left.clamp(0.0, w),
            y_top: self.y_top.clamp(0.0, h),
            x_right: self.x_right.clamp(0.0, w),
            y_bottom: self.y_bottom.clamp(0.0, h),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_left && x <= self.x_right && y >= self.y_top && y <= self.y_bottom
    }
}

/// Vertical overlap between neighbouring part boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Overlap {
    /// Fraction of the body height.
    Fraction(f64),
    Pixels(f64),
}

impl Default for Overlap {
    fn default() -> Self {
        Overlap::Fraction(0.1)
    }
}

impl Overlap {
    pub fn pixels(self, body_height: f64) -> f64 {
        match self {
            Overlap::Fraction(f) => f * body_height,
            Overlap::Pixels(p) => p,
        }
    }
}

/// The whole-body box followed by the head, upper-body, upper-leg and lower-leg boxes, unclamped.
pub fn region_boxes(kps: &Keypoints18, overlap: Overlap) -> Result<[RegionBox; 5]> {
    let frame = body_frame(kps)?;
    let beta = overlap.pixels(frame.height);
    let (xl, xr) = (frame.x_left, frame.x_right);
    let make = |part, y_top, y_bottom| RegionBox {
        part,
        x_left: xl,
        y_top,
        x_right: xr,
        y_bottom,
    };
    let span = |part: PartId| (kps.min_y(part.joints()), kps.max_y(part.joints()));
    let (_, head_max) = span(PartId::Head);
    let (ub_min, ub_max) = span(PartId::UpperBody);
    let (ul_min, ul_max) = span(PartId::UpperLeg);
    let (ll_min, _) = span(PartId::LowerLeg);
    Ok([
        make(PartId::Whole, frame.top, frame.bottom),
        make(PartId::Head, frame.top, head_max + beta),
        make(PartId::UpperBody, ub_min - beta, ub_max + beta),
        make(PartId::UpperLeg, ul_min - beta, ul_max + beta),
        make(PartId::LowerLeg, ll_min - beta, frame.bottom),
    ])
}

/// Four equal horizontal strips covering the image, top to bottom.
pub fn fixed_strips(height: usize, width: usize) -> [RegionBox; 4] {
    let step = height as f64 / 4.0;
    let mut k = 0;
    PartId::PARTS.map(|part| {
        let y_top = step * k as f64;
        k += 1;
        RegionBox {
            part,
            x_left: 0.0,
            y_top,
            x_right: width as f64,
            y_bottom: if k == 4 { height as f64 } else { step * k as f64 },
        }
    })
}

/// Template joint positions in a unit-height frame: x centred on zero, y from
/// 0 (top of head) to 1 (soles), plus the confidence threshold below which a
/// detected joint is replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalPose {
    pub joints: [(f64, f64); JOINT_COUNT],
    pub threshold: f64,
}

impl Default for CanonicalPose {
    fn default() -> Self {
        Self::standing()
    }
}

impl CanonicalPose {
    /// Upright frontal pedestrian. The head and lower-leg joints are placed so
    /// that the body-frame formulas give top 0 and bottom 1 exactly.
    pub fn standing() -> Self {
        Self {
            joints: [
                (0.0, 0.11),
                (-0.02, 0.085),
                (0.02, 0.085),
                (-0.035, 0.09),
                (0.035, 0.09),
                (0.0, 0.16),
                (-0.10, 0.17),
                (0.10, 0.17),
                (-0.12, 0.33),
                (0.12, 0.33),
                (-0.12, 0.48),
                (0.12, 0.48),
                (-0.06, 0.50),
                (0.06, 0.50),
                (-0.06, 0.72),
                (0.06, 0.72),
                (-0.06, 0.93),
                (0.06, 0.93),
            ],
            threshold: 0.2,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }
}

pub const MIN_CONFIDENT_JOINTS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub keypoints: Keypoints18,
    /// Indices of joints replaced from the template.
    pub replaced: Vec<usize>,
}

/// Fills low-confidence joints from the canonical pose.
///
/// A uniform scale and translation is fitted by least squares on the joints at
/// or above the threshold; every other joint is replaced by the mapped template
/// joint and given confidence equal to the threshold.
pub fn complete_keypoints(kps: &Keypoints18, canonical: &CanonicalPose) -> Result<Completion> {
    let tau = canonical.threshold;
    let confident: Vec<usize> = (0..JOINT_COUNT)
        .filter(|&i| kps.joints[i].confidence >= tau)
        .collect();
    if confident.len() == JOINT_COUNT {
        return Ok(Completion {
            keypoints: kps.clone(),
            replaced: Vec::new(),
        });
    }
    if confident.len() < MIN_CONFIDENT_JOINTS {
        return Err(GeometryError::DegeneratePose(format!(
            "{} joints at confidence ≥ {tau}, need {MIN_CONFIDENT_JOINTS}",
            confident.len()
        )));
    }
    let n = confident.len() as f64;
    let (mut cx, mut cy, mut kx, mut ky) = (0.0, 0.0, 0.0, 0.0);
    for &i in &confident {
        cx += canonical.joints[i].0;
        cy += canonical.joints[i].1;
        kx += kps.joints[i].x;
        ky += kps.joints[i].y;
    }
    let (cx, cy, kx, ky) = (cx / n, cy / n, kx / n, ky / n);
    let (mut num, mut den) = (0.0, 0.0);
    for &i in &confident {
        let (dx, dy) = (canonical.joints[i].0 - cx, canonical.joints[i].1 - cy);
        num += dx * (kps.joints[i].x - kx) + dy * (kps.joints[i].y - ky);
        den += dx * dx + dy * dy;
    }
    let scale = num / den;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(GeometryError::DegeneratePose(format!(
            "template alignment scale {scale} is not positive"
        )));
    }
    let (tx, ty) = (kx - scale * cx, ky - scale * cy);
    let mut joints = kps.joints;
    let mut replaced = Vec::new();
    for (i, joint) in joints.iter_mut().enumerate() {
        if joint.confidence < tau {
            let (px, py) = canonical.joints[i];
            *joint = Joint::new(scale * px + tx, scale * py + ty, tau);
            replaced.push(i);
        }
    }
    Ok(Completion {
        keypoints: Keypoints18 { joints },
        replaced,
    })
}

/// Bilinear resampling of `region` (clamped to the image) to `target = (height, width)`.
///
/// `image` is `[h, w, c]`. Target pixel centres map linearly onto the box; samples
/// outside the image replicate the border.
pub fn crop_resize(
    image: &Tensor<f32>,
    region: &RegionBox,
    target: (usize, usize),
) -> Result<Tensor<f32>> {
    let &[h, w, c] = image.shape() else {
        return Err(GeometryError::InvalidKeypoints(format!(
            "crop source must be [h, w, c], got {:?}",
            image.shape()
        )));
    };
    let clamped = region.clamp(w, h);
    if clamped.is_empty() || target.0 == 0 || target.1 == 0 {
        return Err(GeometryError::DegenerateCrop(clamped, w, h));
    }
    let (th, tw) = target;
    let sy = clamped.height() / th as f64;
    let sx = clamped.width() / tw as f64;
    let src = image.data();
    let mut out = Vec::with_capacity(th * tw * c);
    let axis = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, p - lo as f64)
    };
    for ty in 0..th {
        let (y0, y1, fy) = axis(clamped.y_top + (ty as f64 + 0.5) * sy - 0.5, h);
        for tx in 0..tw {
            let (x0, x1, fx) = axis(clamped.x_left + (tx as f64 + 0.5) * sx - 0.5, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(Tensor::new(&[th, tw, c], out).expect("sized above"))
}
