//! Procedurally rendered pedestrians with exact ground-truth keypoints.
//!
//! Each identity has fixed clothing colours and body proportions; each image
//! adds pose sway, placement jitter, a noisy background and sometimes an
//! occluding bar. Camera 1 renders people 10% smaller and hue-rotated.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use reid_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{Manifest, ManifestRecord, Split};
use crate::data::ppm::save_image;
use crate::error::{ReidError, Result};
use crate::geometry::{Joint, Keypoints18, JOINT_COUNT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub ids: usize,
    pub per_id: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Probability that an image has one to three joints reported at low confidence.
    pub degrade_fraction: f64,
    pub occlusion_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            ids: 16,
            per_id: 20,
            height: 128,
            width: 64,
            seed: 7,
            degrade_fraction: 0.1,
            occlusion_prob: 0.1,
        }
    }
}

pub const MIN_HEIGHT: usize = 32;
pub const MIN_WIDTH: usize = 16;
/// Hue rotation applied by camera 1, in degrees.
pub const CAMERA_HUE_SHIFT: f64 = 25.0;
pub const CAMERA_SCALE: f64 = 0.9;
/// Upper bound for the confidence of a degraded joint.
pub const DEGRADED_CONFIDENCE: f64 = 0.15;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids < 2 {
            return Err(ReidError::Config(format!(
                "need at least 2 identities, got {}",
                self.ids
            )));
        }
        if self.per_id < 2 {
            return Err(ReidError::Config(format!(
                "need at least 2 images per identity, got {}",
                self.per_id
            )));
        }
        if self.height < MIN_HEIGHT || self.width < MIN_WIDTH {
            return Err(ReidError::Config(format!(
                "image {}x{} too small to render a figure (minimum {MIN_HEIGHT}x{MIN_WIDTH})",
                self.height, self.width
            )));
        }
        for (name, p) in [
            ("degrade_fraction", self.degrade_fraction),
            ("occlusion_prob", self.occlusion_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ReidError::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn camera(&self, index: usize) -> u32 {
        (index % 2) as u32
    }

    /// The first three fifths of an identity's images train; of the rest the
    /// first two (one per camera) are queries when at least three remain.
    pub fn split_of(&self, index: usize) -> Split {
        let train = self.per_id * 3 / 5;
        let rest = self.per_id - train;
        let queries = if rest >= 3 { 2 } else { 1 };
        if index < train {
            Split::Train
        } else if index < train + queries {
            Split::Query
        } else {
            Split::Gallery
        }
    }
}

/// Per-identity constants.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub torso: [f32; 3],
    pub legs: [f32; 3],
    pub shoes: [f32; 3],
    /// Body height as a fraction of the image height.
    pub stature: f64,
    pub shoulder_width: f64,
    pub hip_width: f64,
    pub leg_length: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn colour(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

pub fn appearance(id: usize, seed: u64) -> Appearance {
    let mut rng = stream_rng(seed, (id as u64 + 1) << 32);
    let tone = rng.random_range(0.35f32..0.9);
    Appearance {
        skin: [tone, tone * 0.8, tone * 0.65],
        hair: colour(&mut rng, 0.02, 0.4),
        torso: colour(&mut rng, 0.05, 0.95),
        legs: colour(&mut rng, 0.05, 0.95),
        shoes: colour(&mut rng, 0.0, 0.5),
        stature: rng.random_range(0.78..0.88),
        shoulder_width: rng.random_range(0.9..1.1),
        hip_width: rng.random_range(0.9..1.1),
        leg_length: rng.random_range(0.96..1.04),
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub id: u32,
    pub cam: u32,
    pub split: Split,
    pub image: Tensor<f32>,
    /// Reported keypoints: exact coordinates, some confidences possibly degraded.
    pub keypoints: Keypoints18,
    /// Row-major figure mask after occlusion.
    pub foreground: Vec<bool>,
}

enum Shape {
    Disc { c: (f64, f64), r: f64 },
    /// Upper half of a disc, split at `c.1 - cut`.
    Cap { c: (f64, f64), r: f64, cut: f64 },
    Capsule { a: (f64, f64), b: (f64, f64), r: f64 },
    /// Convex polygon, vertices in order.
    Quad([(f64, f64); 4]),
}

impl Shape {
    fn hit(&self, p: (f64, f64)) -> bool {
        match *self {
            Shape::Disc { c, r } => (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r,
            Shape::Cap { c, r, cut } => {
                p.1 <= c.1 - cut && (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2) <= r * r
            }
            Shape::Capsule { a, b, r } => {
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
                (p.0 - qx).powi(2) + (p.1 - qy).powi(2) <= r * r
            }
            Shape::Quad(v) => {
                let mut sign = 0.0f64;
                for i in 0..4 {
                    let (a, b) = (v[i], v[(i + 1) % 4]);
                    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
        }
    }
}

fn rotate(v: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

fn add(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 + b.0, a.1 + b.1)
}

/// Joint positions in body units: x centred on the body axis, y from the top of the head.
fn body_joints(app: &Appearance, rng: &mut ChaCha8Rng) -> [(f64, f64); JOINT_COUNT] {
    let head_dx = rng.random_range(-0.01..0.01);
    let arm = rng.random_range(-0.1..0.1);
    let bend = [rng.random_range(0.0..0.08), rng.random_range(0.0..0.08)];
    let leg = rng.random_range(-0.06..0.06);
    let sw = 0.10 * app.shoulder_width;
    let hw = 0.06 * app.hip_width;
    let ll = app.leg_length;
    let mut j = [(0.0, 0.0); JOINT_COUNT];
    j[0] = (head_dx, 0.11);
    j[1] = (head_dx - 0.02, 0.085);
    j[2] = (head_dx + 0.02, 0.085);
    j[3] = (head_dx - 0.035, 0.09);
    j[4] = (head_dx + 0.035, 0.09);
    j[5] = (0.0, 0.16);
    for (side, sign) in [(0usize, -1.0), (1, 1.0)] {
        // Arms swing in opposition; the forearm may bend forward a little more.
        let swing = sign * arm;
        let shoulder = (sign * sw, 0.17);
        let elbow = add(shoulder, rotate((sign * 0.02, 0.16), swing));
        let wrist = add(elbow, rotate((0.0, 0.15), swing + sign * bend[side]));
        let hip = (sign * hw, 0.5);
        let knee = add(hip, rotate((0.0, 0.22 * ll), -sign * leg));
        let ankle = add(knee, rotate((0.0, 0.21 * ll), -sign * leg));
        j[6 + side] = shoulder;
        j[8 + side] = elbow;
        j[10 + side] = wrist;
        j[12 + side] = hip;
        j[14 + side] = knee;
        j[16 + side] = ankle;
    }
    j
}

fn hue_matrix(degrees: f64) -> [[f32; 3]; 3] {
    let (s, c) = (degrees * PI / 180.0).sin_cos();
    let third: f64 = 1.0 / 3.0;
    let root = third.sqrt();
    let a = c + (1.0 - c) * third;
    let b = third * (1.0 - c) - root * s;
    let d = third * (1.0 - c) + root * s;
    [
        [a as f32, b as f32, d as f32],
        [d as f32, a as f32, b as f32],
        [b as f32, d as f32, a as f32],
    ]
}

/// Renders image `index` of identity `id`. Pure in `(config, id, index)`.
pub fn render_sample(cfg: &SyntheticConfig, id: usize, index: usize) -> SyntheticSample {
    let app = appearance(id, cfg.seed);
    let mut rng = stream_rng(cfg.seed, ((id as u64 + 1) << 32) | (index as u64 + 1));
    let cam = cfg.camera(index);
    let (h, w) = (cfg.height, cfg.width);

    let unit = body_joints(&app, &mut rng);
    let cam_scale = if cam == 1 { CAMERA_SCALE } else { 1.0 };
    let size = app.stature * rng.random_range(0.95..1.05) * cam_scale * h as f64;
    let cx = w as f64 / 2.0 + rng.random_range(-0.05..0.05) * w as f64;
    let top = (h as f64 - size) / 2.0 + rng.random_range(-0.03..0.03) * h as f64;
    let px = |p: (f64, f64)| (cx + p.0 * size, top + p.1 * size);
    let joints = unit.map(px);

    let head = px((unit[0].0, 0.09));
    let (sw, hw) = (0.10 * app.shoulder_width, 0.06 * app.hip_width);
    let torso = Shape::Quad([
        px((-sw - 0.02, 0.16)),
        px((sw + 0.02, 0.16)),
        px((hw + 0.035, 0.52)),
        px((-hw - 0.035, 0.52)),
    ]);
    let limb = |a: usize, b: usize, width: f64| Shape::Capsule {
        a: joints[a],
        b: joints[b],
        r: width * size / 2.0,
    };
    // Later entries paint over earlier ones.
    let parts: Vec<(Shape, [f32; 3])> = vec![
        (limb(12, 14, 0.075), app.legs),
        (limb(13, 15, 0.075), app.legs),
        (limb(14, 16, 0.06), app.legs),
        (limb(15, 17, 0.06), app.legs),
        (Shape::Disc { c: joints[16], r: 0.03 * size }, app.shoes),
        (Shape::Disc { c: joints[17], r: 0.03 * size }, app.shoes),
        (limb(5, 0, 0.04), app.skin),
        (torso, app.torso),
        (limb(6, 8, 0.05), app.torso),
        (limb(7, 9, 0.05), app.torso),
        (limb(8, 10, 0.04), app.skin),
        (limb(9, 11, 0.04), app.skin),
        (Shape::Disc { c: head, r: 0.075 * size }, app.skin),
        (
            Shape::Cap {
                c: head,
                r: 0.078 * size,
                cut: 0.02 * size,
            },
            app.hair,
        ),
    ];

    let grey = rng.random_range(0.3f32..0.7);
    let base = [0; 3].map(|_| grey + rng.random_range(-0.08f32..0.08));
    let noise = Normal::new(0.0f32, 0.02).expect("valid sigma");
    let occluder = (rng.random::<f64>() < cfg.occlusion_prob).then(|| {
        let y0 = top + rng.random_range(0.2..0.8) * size;
        (y0, y0 + 0.12 * size, colour(&mut rng, 0.0, 1.0))
    });

    let mut data = vec![0.0f32; h * w * 3];
    let mut foreground = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = base;
            let mut fg = false;
            for (shape, c) in &parts {
                if shape.hit(p) {
                    rgb = *c;
                    fg = true;
                }
            }
            if let Some((y0, y1, c)) = occluder {
                if p.1 >= y0 && p.1 < y1 {
                    rgb = c;
                    fg = false;
                }
            }
            if !fg {
                for v in rgb.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            foreground[y * w + x] = fg;
            data[(y * w + x) * 3..][..3].copy_from_slice(&rgb);
        }
    }
    if cam == 1 {
        let m = hue_matrix(CAMERA_HUE_SHIFT);
        for px in data.chunks_exact_mut(3) {
            let v = [px[0], px[1], px[2]];
            for (o, row) in px.iter_mut().zip(&m) {
                *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
            }
        }
    }
    // Quantize so the in-memory sample equals what a pixmap round trip yields.
    for v in data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    let mut confidence = [1.0f64; JOINT_COUNT];
    if rng.random::<f64>() < cfg.degrade_fraction {
        let count = rng.random_range(1..=3);
        let mut picked = Vec::new();
        while picked.len() < count {
            let j = rng.random_range(0..JOINT_COUNT);
            if !picked.contains(&j) {
                picked.push(j);
                confidence[j] = rng.random_range(0.0..DEGRADED_CONFIDENCE);
            }
        }
    }
    let mut kp = [Joint::default(); JOINT_COUNT];
    for i in 0..JOINT_COUNT {
        kp[i] = Joint::new(joints[i].0, joints[i].1, confidence[i]);
    }

    SyntheticSample {
        id: id as u32,
        cam,
        split: cfg.split_of(index),
        image: Tensor::new(&[h, w, 3], data).expect("sized above"),
        keypoints: Keypoints18::new(kp).expect("finite joints, confidences in range"),
        foreground,
    }
}

pub fn image_name(id: usize, index: usize) -> PathBuf {
    PathBuf::from(format!("images/{id:04}_{index:03}.ppm"))
}

/// Renders every sample in memory, in (identity, index) order.
pub fn generate_in_memory(cfg: &SyntheticConfig) -> Result<Vec<(PathBuf, SyntheticSample)>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.ids * cfg.per_id);
    for id in 0..cfg.ids {
        for index in 0..cfg.per_id {
            out.push((image_name(id, index), render_sample(cfg, id, index)));
        }
    }
    Ok(out)
}

/// Writes `images/*.ppm` and `manifest.jsonl` under `out`; returns the manifest.
pub fn generate_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| ReidError::io(&images, e))?;
    let mut records = Vec::with_capacity(cfg.ids * cfg.per_id);
    for id in 0..cfg.ids {
        for index in 0..cfg.per_id {
            let s = render_sample(cfg, id, index);
            let name = image_name(id, index);
            save_image(&out.join(&name), &s.image)?;
            records.push(ManifestRecord {
                image: name,
                id: s.id,
                cam: s.cam,
                split: s.split,
                keypoints: s.keypoints,
            });
        }
    }
    let manifest = Manifest {
        root: out.to_path_buf(),
        records,
    };
    manifest.save(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}
