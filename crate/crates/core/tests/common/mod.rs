#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use reid_autodiff::{Real, Tensor};
use reid_core::network::{build_model, ModelSpec, Preset, ReidModel, Variant};

/// Redraws every parameter: He-scaled weights, small random biases.
pub fn randomize<T: Real>(model: &mut ReidModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.values_mut() {
        let shape = t.shape().to_vec();
        let std = if shape.len() >= 2 {
            let fan_in = t.len() / shape[shape.len() - 1];
            (2.0 / fan_in as f64).sqrt()
        } else {
            0.1
        };
        let normal = Normal::new(0.0, std).unwrap();
        for v in t.data_mut() {
            *v = T::of(normal.sample(&mut rng));
        }
    }
}

pub fn desk_model<T: Real>(variant: Variant, q: usize, seed: u64) -> ReidModel<T> {
    let spec = ModelSpec {
        preset: Preset::Desk,
        q,
        flags: variant.flags(),
    };
    build_model(spec, seed).unwrap()
}

/// Random whole-body and part batches at the model's input sizes.
pub fn random_inputs<T: Real>(model: &ReidModel<T>, batch: usize, seed: u64) -> (Tensor<T>, [Tensor<T>; 4]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = model.dims();
    let mut draw = |(h, w): (usize, usize)| {
        Tensor::from_fn(&[batch, h, w, 3], |_| T::of(rng.random_range(-2.0..2.0)))
    };
    let whole = draw(dims.whole);
    let parts = [0; 4].map(|_| draw(dims.part));
    (whole, parts)
}

pub mod oracle {
    use rand::Rng;
    use reid_core::evaluation::{EvalRecord, Role};

    pub fn record(id: u32, cam: u32, role: Role, embedding: Vec<f32>) -> EvalRecord {
        EvalRecord { id, cam, role, embedding }
    }

    /// Small-integer embeddings so that distance ties are frequent and exact.
    pub fn instance(rng: &mut impl Rng) -> (Vec<EvalRecord>, Vec<EvalRecord>) {
        let dim = rng.random_range(1..4);
        let ids = rng.random_range(1..8);
        let nq = rng.random_range(1..=10);
        let ng = rng.random_range(1..=50);
        let mut draw = |role| {
            let e = (0..dim).map(|_| rng.random_range(-2i32..3) as f32).collect();
            record(rng.random_range(0..ids), rng.random_range(0..3), role, e)
        };
        let q = (0..nq).map(|_| draw(Role::Query)).collect();
        let g = (0..ng).map(|_| draw(Role::Gallery)).collect();
        (q, g)
    }

    /// CMC up to `max_rank` and mAP by counting, without sorting. A gallery
    /// entry's rank is one plus the number of eligible entries strictly closer,
    /// or equally close with a lower index.
    pub fn brute_force(queries: &[EvalRecord], gallery: &[EvalRecord], max_rank: usize) -> (Vec<f64>, f64, usize) {
        let eligible = |q: &EvalRecord, g: &EvalRecord| !(g.id == q.id && g.cam == q.cam);
        let dist = |a: &[f32], b: &[f32]| -> f64 {
            let mut s = 0.0;
            for i in 0..a.len() {
                let d = a[i] as f64 - b[i] as f64;
                s += d * d;
            }
            s
        };
        let mut firsts = Vec::new();
        let mut aps = Vec::new();
        for q in queries {
            let pool: Vec<usize> = (0..gallery.len()).filter(|&i| eligible(q, &gallery[i])).collect();
            if pool.is_empty() {
                continue;
            }
            let rank_of = |i: usize| {
                let di = dist(&q.embedding, &gallery[i].embedding);
                1 + pool
                    .iter()
                    .filter(|&&j| {
                        let dj = dist(&q.embedding, &gallery[j].embedding);
                        dj < di || (dj == di && j < i)
                    })
                    .count()
            };
            let mut hits: Vec<usize> = pool.iter().filter(|&&i| gallery[i].id == q.id).map(|&i| rank_of(i)).collect();
            hits.sort_unstable();
            firsts.push(hits.first().copied());
            let mut sum = 0.0;
            for (k, &r) in hits.iter().enumerate() {
                sum += (k + 1) as f64 / r as f64;
            }
            aps.push(if hits.is_empty() { 0.0 } else { sum / hits.len() as f64 });
        }
        let n = firsts.len();
        let cmc = (1..=max_rank)
            .map(|k| {
                if n == 0 {
                    0.0
                } else {
                    firsts.iter().filter(|f| matches!(f, Some(r) if *r <= k)).count() as f64 / n as f64
                }
            })
            .collect();
        let map = if n == 0 { 0.0 } else { aps.iter().sum::<f64>() / n as f64 };
        (cmc, map, n)
    }
}

/// Randomized write/read cycles; each returns the first mismatch found.
pub mod roundtrip {
    use std::path::{Path, PathBuf};

    use rand::Rng;
    use reid_autodiff::Tensor;
    use reid_core::checkpoint::{decode_checkpoint, encode_checkpoint};
    use reid_core::data::embeddings::{decode_embeddings, encode_embeddings};
    use reid_core::data::manifest::{Manifest, ManifestRecord, Split};
    use reid_core::data::ppm::{decode_ppm, encode_ppm};
    use reid_core::evaluation::{EvalRecord, Role};
    use reid_core::geometry::{Joint, Keypoints18};
    use reid_core::network::{build_model, ModelSpec, Preset, Variant};

    fn finite(rng: &mut impl Rng) -> f64 {
        match rng.random_range(0..4) {
            0 => rng.random_range(-1e4..1e4),
            1 => f64::from_bits(rng.random::<u64>() & !(0x7ff << 52) | (rng.random_range(900u64..1100) << 52)),
            2 => rng.random_range(0..1000) as f64,
            _ => rng.random::<f64>() * 1e-300,
        }
    }

    fn path_name(rng: &mut impl Rng, k: usize) -> String {
        const PIECES: [&str; 8] = ["a", "Z", "dir/", "ü", " ", "\"q\"", "\\", "\u{1F600}"];
        let mut s = String::new();
        for _ in 0..rng.random_range(0..6) {
            s.push_str(PIECES[rng.random_range(0..PIECES.len())]);
        }
        format!("{s}{k}.ppm")
    }

    pub fn manifest(rng: &mut impl Rng) -> Result<(), String> {
        let n = rng.random_range(0..20);
        let q = rng.random_range(1..5u32);
        let mut trained = 0;
        let records: Vec<ManifestRecord> = (0..n)
            .map(|k| {
                let split = [Split::Train, Split::Query, Split::Gallery][rng.random_range(0..3)];
                let id = if split == Split::Train {
                    trained += 1;
                    (trained - 1) % q
                } else {
                    rng.random()
                };
                let joints: Vec<Joint> = (0..18)
                    .map(|_| Joint::new(finite(rng), finite(rng), rng.random_range(0.0..=1.0)))
                    .collect();
                ManifestRecord {
                    image: PathBuf::from(path_name(rng, k)),
                    id,
                    cam: rng.random(),
                    split,
                    keypoints: Keypoints18::from_slice(&joints).expect("finite"),
                }
            })
            .collect();
        let m = Manifest {
            root: PathBuf::from("/data/set"),
            records,
        };
        let text = m.to_jsonl().map_err(|e| e.to_string())?;
        let back = Manifest::parse(&text, Path::new("/data/set/manifest.jsonl")).map_err(|e| e.to_string())?;
        if back != m {
            return Err("manifest records differ after a round trip".into());
        }
        if back.to_jsonl().map_err(|e| e.to_string())? != text {
            return Err("manifest text differs after a second write".into());
        }
        Ok(())
    }

    pub fn ppm(rng: &mut impl Rng) -> Result<(), String> {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let image = Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0..=255u8) as f32 / 255.0);
        let bytes = encode_ppm(&image)?;
        let back = decode_ppm(&bytes)?;
        if back != image {
            return Err(format!("{h}x{w} pixmap changed after a round trip"));
        }
        if encode_ppm(&back)? != bytes {
            return Err(format!("{h}x{w} pixmap bytes changed after a second write"));
        }
        Ok(())
    }

    pub fn embeddings(rng: &mut impl Rng) -> Result<(), String> {
        let dim = rng.random_range(0..40);
        let records: Vec<EvalRecord> = (0..rng.random_range(0..30))
            .map(|_| EvalRecord {
                id: rng.random(),
                cam: rng.random(),
                role: if rng.random() { Role::Query } else { Role::Gallery },
                embedding: (0..dim).map(|_| f32::from_bits(rng.random())).collect(),
            })
            .collect();
        let bytes = encode_embeddings(&records)?;
        let back = decode_embeddings(&bytes)?;
        let bits = |r: &[EvalRecord]| -> Vec<(u32, u32, Role, Vec<u32>)> {
            r.iter()
                .map(|x| (x.id, x.cam, x.role, x.embedding.iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        if bits(&back) != bits(&records) || encode_embeddings(&back)? != bytes {
            return Err("embedding container changed after a round trip".into());
        }
        Ok(())
    }

    pub fn checkpoint(rng: &mut impl Rng) -> Result<(), String> {
        let variant = Variant::ALL[rng.random_range(0..5)];
        let mut flags = variant.flags();
        flags.global_weight = rng.random_bool(0.2) && flags.fusion == reid_core::fusion::FusionMode::InterAttention;
        let spec = ModelSpec {
            preset: Preset::Desk,
            q: rng.random_range(2..40),
            flags,
        };
        let mut model = build_model::<f32>(spec, rng.random()).map_err(|e| e.to_string())?;
        for t in model.params.values_mut() {
            for v in t.data_mut() {
                *v = f32::from_bits(rng.random());
            }
        }
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes)?;
        if back.spec != model.spec {
            return Err(format!("{variant}: header changed"));
        }
        for ((na, a), (nb, b)) in model.params.iter().zip(back.params.iter()) {
            let same = na == nb
                && a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(format!("{variant}: parameter {na} changed"));
            }
        }
        if encode_checkpoint(&back) != bytes {
            return Err(format!("{variant}: bytes changed after a second write"));
        }
        Ok(())
    }
}

pub mod geometry {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use reid_core::geometry::{Joint, Keypoints18, RegionBox};

    /// Box edges `(x_left, y_top, x_right, y_bottom)` written out joint by joint,
    /// with one-based joint numbers as in the region definitions.
    pub fn oracle(p: &[(f64, f64); 18], beta_frac: f64) -> [(f64, f64, f64, f64); 5] {
        let y = |k: usize| p[k - 1].1;
        let lo = |a: usize, b: usize| (a..=b).map(y).fold(f64::MAX, f64::min);
        let hi = |a: usize, b: usize| (a..=b).map(y).fold(f64::MIN, f64::max);
        let top = 2.0 * lo(1, 8) - hi(1, 8);
        let bottom = (4.0 * hi(15, 18) - lo(15, 18)) / 3.0;
        let h = bottom - top;
        let mut sx = 0.0;
        let mut min_x = f64::MAX;
        let mut max_x = f64::MIN;
        for &(x, _) in p {
            sx += x;
            min_x = min_x.min(x);
            max_x = max_x.max(x);
        }
        let cx = sx / 18.0;
        let xl = (cx - h / 4.0).min(min_x);
        let xr = (cx + h / 4.0).max(max_x);
        let beta = beta_frac * h;
        [
            (xl, top, xr, bottom),
            (xl, top, xr, hi(1, 8) + beta),
            (xl, lo(6, 14) - beta, xr, hi(6, 14) + beta),
            (xl, lo(13, 16) - beta, xr, hi(13, 16) + beta),
            (xl, lo(15, 18) - beta, xr, bottom),
        ]
    }

    pub fn keypoints(p: &[(f64, f64); 18]) -> Keypoints18 {
        Keypoints18::new(p.map(|(x, y)| Joint::new(x, y, 1.0))).unwrap()
    }

    pub fn edges(b: &RegionBox) -> (f64, f64, f64, f64) {
        (b.x_left, b.y_top, b.x_right, b.y_bottom)
    }

    /// A loosely upright pose: y increases on average with the joint index.
    pub fn random_pose(rng: &mut ChaCha8Rng) -> [(f64, f64); 18] {
        let height = rng.random_range(40.0..400.0);
        let (x0, y0) = (rng.random_range(-50.0..200.0), rng.random_range(-50.0..100.0));
        std::array::from_fn(|i| {
            let t = i as f64 / 17.0;
            (
                x0 + rng.random_range(-0.3..0.3) * height,
                y0 + t * height + rng.random_range(-0.08..0.08) * height,
            )
        })
    }
}
