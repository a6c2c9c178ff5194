//! Image to network input: region extraction, resampling and normalization.

use log::warn;
use reid_autodiff::Tensor;

use crate::data::manifest::{Manifest, Split};
use crate::data::ppm::load_image;
use crate::data::synthetic::{generate_in_memory, SyntheticConfig};
use crate::evaluation::{l2_normalize, EvalRecord, Role};
use crate::network::ReidModel;
use crate::error::Result;
use crate::geometry::{
    complete_keypoints, crop_resize, fixed_strips, region_boxes, CanonicalPose, Keypoints18,
    Overlap, PartId, RegionBox,
};
use crate::network::PresetDims;

#[derive(Clone, Debug, PartialEq)]
pub struct PartOptions {
    pub overlap: Overlap,
    pub canonical: CanonicalPose,
}

impl Default for PartOptions {
    fn default() -> Self {
        Self {
            overlap: Overlap::default(),
            canonical: CanonicalPose::standing(),
        }
    }
}

impl PartOptions {
    pub fn new(beta_frac: f64, tau: f64) -> Self {
        Self {
            overlap: Overlap::Fraction(beta_frac),
            canonical: CanonicalPose::standing().with_threshold(tau),
        }
    }
}

/// How the five regions of one image were obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum RegionSource {
    /// Pose regions; the number of joints filled from the canonical pose.
    Pose { completed: usize },
    /// Fixed strips requested by the variant.
    Strips,
    /// Fixed strips because the pose was unusable.
    Fallback(String),
}

/// Whole-body box then the four part boxes, clamped to the image.
pub fn extract_regions(
    image_hw: (usize, usize),
    keypoints: &Keypoints18,
    pose_parts: bool,
    options: &PartOptions,
) -> ([RegionBox; 5], RegionSource) {
    let (h, w) = image_hw;
    let strips = || {
        let s = fixed_strips(h, w);
        let whole = RegionBox {
            part: PartId::Whole,
            x_left: 0.0,
            y_top: 0.0,
            x_right: w as f64,
            y_bottom: h as f64,
        };
        [whole, s[0], s[1], s[2], s[3]]
    };
    if !pose_parts {
        return (strips(), RegionSource::Strips);
    }
    let attempt = || -> std::result::Result<([RegionBox; 5], usize), String> {
        let done = complete_keypoints(keypoints, &options.canonical).map_err(|e| e.to_string())?;
        let boxes = region_boxes(&done.keypoints, options.overlap).map_err(|e| e.to_string())?;
        let clamped = boxes.map(|b| b.clamp(w, h));
        if let Some(b) = clamped.iter().find(|b| b.is_empty()) {
            return Err(format!("{} box is empty inside the image", b.part.name()));
        }
        Ok((clamped, done.replaced.len()))
    };
    match attempt() {
        Ok((boxes, completed)) => (boxes, RegionSource::Pose { completed }),
        Err(reason) => (strips(), RegionSource::Fallback(reason)),
    }
}

/// Pixel values in `[0, 1]` are multiplied by this after mean subtraction,
/// bringing typical inputs to about unit spread.
pub const INPUT_SCALE: f32 = 4.0;

/// Subtracts each channel's mean over the image, then scales by
/// [`INPUT_SCALE`], in place. `image` is `[h, w, c]`.
pub fn normalize_channels(image: &mut Tensor<f32>) {
    let c = *image.shape().last().expect("rank ≥ 1");
    let n = image.len() / c;
    let mut means = vec![0.0f64; c];
    for px in image.data().chunks_exact(c) {
        for (m, &v) in means.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    let means: Vec<f32> = means.iter().map(|m| (m / n as f64) as f32).collect();
    for px in image.data_mut().chunks_exact_mut(c) {
        for (v, m) in px.iter_mut().zip(&means) {
            *v = (*v - m) * INPUT_SCALE;
        }
    }
}

/// Normalized network inputs for one image.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: u32,
    pub cam: u32,
    pub split: Split,
    pub whole: Tensor<f32>,
    pub parts: [Tensor<f32>; 4],
    pub source: RegionSource,
}

pub fn prepare_image(
    image: &Tensor<f32>,
    keypoints: &Keypoints18,
    dims: &PresetDims,
    pose_parts: bool,
    options: &PartOptions,
) -> Result<([Tensor<f32>; 5], RegionSource)> {
    let s = image.shape();
    let (mut boxes, mut source) = extract_regions((s[0], s[1]), keypoints, pose_parts, options);
    let crop_all = |boxes: &[RegionBox; 5]| -> Result<Vec<Tensor<f32>>> {
        boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let target = if i == 0 { dims.whole } else { dims.part };
                let mut t = crop_resize(image, b, target)?;
                normalize_channels(&mut t);
                Ok(t)
            })
            .collect()
    };
    let crops = match crop_all(&boxes) {
        Ok(c) => c,
        Err(e) if pose_parts => {
            (boxes, _) = extract_regions((s[0], s[1]), keypoints, false, options);
            source = RegionSource::Fallback(e.to_string());
            crop_all(&boxes)?
        }
        Err(e) => return Err(e),
    };
    let mut it = crops.into_iter();
    let mut next = || it.next().expect("five crops");
    Ok(([next(), next(), next(), next(), next()], source))
}

/// Loads and prepares every record of `split`; unreadable images are skipped
/// with a warning and returned by path.
pub fn prepare_split(
    manifest: &Manifest,
    split: Split,
    dims: &PresetDims,
    pose_parts: bool,
    options: &PartOptions,
) -> Result<(Vec<PreparedSample>, Vec<String>)> {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for record in manifest.split(split) {
        let path = manifest.resolve(record);
        let image = match load_image(&path) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push(path.display().to_string());
                continue;
            }
        };
        let (crops, source) = prepare_image(&image, &record.keypoints, dims, pose_parts, options)?;
        if let RegionSource::Fallback(reason) = &source {
            warn!("{}: fixed strips used ({reason})", path.display());
        }
        let [whole, p1, p2, p3, p4] = crops;
        out.push(PreparedSample {
            id: record.id,
            cam: record.cam,
            split,
            whole,
            parts: [p1, p2, p3, p4],
            source,
        });
    }
    Ok((out, skipped))
}

/// Prepares in-memory synthetic samples in (identity, index) order.
pub fn prepare_synthetic(
    cfg: &SyntheticConfig,
    dims: &PresetDims,
    pose_parts: bool,
    options: &PartOptions,
) -> Result<Vec<PreparedSample>> {
    let mut out = Vec::new();
    for (_, s) in generate_in_memory(cfg)? {
        let (crops, source) = prepare_image(&s.image, &s.keypoints, dims, pose_parts, options)?;
        let [whole, p1, p2, p3, p4] = crops;
        out.push(PreparedSample {
            id: s.id,
            cam: s.cam,
            split: s.split,
            whole,
            parts: [p1, p2, p3, p4],
            source,
        });
    }
    Ok(out)
}

/// Unit-length final descriptors in inference mode; query and gallery roles
/// follow the samples' splits.
pub fn embed_samples(
    model: &ReidModel<f32>,
    samples: &[&PreparedSample],
    batch_size: usize,
) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (whole, parts) = stack_batch(chunk)?;
        for (s, e) in chunk.iter().zip(model.embed(&whole, &parts)?) {
            let mut embedding = e.final_feature;
            l2_normalize(&mut embedding);
            out.push(EvalRecord {
                id: s.id,
                cam: s.cam,
                role: if s.split == Split::Query {
                    Role::Query
                } else {
                    Role::Gallery
                },
                embedding,
            });
        }
    }
    Ok(out)
}

/// Stacks samples into batched whole-body and part tensors.
pub fn stack_batch(samples: &[&PreparedSample]) -> Result<(Tensor<f32>, [Tensor<f32>; 4])> {
    let whole = Tensor::stack(&samples.iter().map(|s| &s.whole).collect::<Vec<_>>())?;
    let part = |k: usize| Tensor::stack(&samples.iter().map(|s| &s.parts[k]).collect::<Vec<_>>());
    Ok((whole, [part(0)?, part(1)?, part(2)?, part(3)?]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_means_become_zero() {
        let mut t = Tensor::from_fn(&[3, 2, 3], |i| (i * 7 % 5) as f32);
        normalize_channels(&mut t);
        for ch in 0..3 {
            let s: f32 = t.data().iter().skip(ch).step_by(3).sum();
            assert!(s.abs() < 1e-5);
        }
    }
}
