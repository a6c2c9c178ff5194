//! Intra-attention blocks.
//!
//! A block runs two paths from its input `v`: the feature path produces `a`,
//! the mask path runs an hourglass encoder-decoder to `A` and turns it into a
//! mask `m ∈ (0,1)`. The block output is `(1 + m) ⊗ a`, so a zero mask passes
//! the feature path through unchanged.

use reid_autodiff::{Padding, Real, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::network::layers::{Bottleneck, Builder, Conv};
use crate::network::params::{Ctx, MaskMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Spatial map times channel vector, mixed by a 1×1 convolution.
    Decomposed,
    /// One 1×1 convolution over the full encoder-decoder output.
    Monolithic,
}

/// `S = W_s * A + b_s`: 1×1 convolution to one channel, `[b,h,w,c] -> [b,h,w,1]`.
pub fn spatial_attention<T: Real>(tape: &Tape<T>, a: Var, w: Var, b: Var) -> Result<Var> {
    Ok(tape.conv2d(a, w, Some(b), (1, 1), Padding::Same)?)
}

/// `C = W_c * avgpool(A) + b_c`: `[b,h,w,c] -> [b,1,1,c]`.
pub fn channel_attention<T: Real>(tape: &Tape<T>, a: Var, w: Var, b: Var) -> Result<Var> {
    let v = tape.global_avg_pool(a)?;
    Ok(tape.conv2d(v, w, Some(b), (1, 1), Padding::Same)?)
}

/// `m = sigmoid(W_m * (S ⊗ C) + b_m)` with `S ⊗ C` broadcast to `[b,h,w,c]`.
pub fn combine_attention<T: Real>(tape: &Tape<T>, s: Var, c: Var, w: Var, b: Var) -> Result<Var> {
    let outer = tape.mul(s, c)?;
    let z = tape.conv2d(outer, w, Some(b), (1, 1), Padding::Same)?;
    Ok(tape.sigmoid(z))
}

/// `m = sigmoid(W * A + b)` without the spatial/channel factorization.
pub fn monolithic_attention<T: Real>(tape: &Tape<T>, a: Var, w: Var, b: Var) -> Result<Var> {
    let z = tape.conv2d(a, w, Some(b), (1, 1), Padding::Same)?;
    Ok(tape.sigmoid(z))
}

/// `(1 + m) ⊗ a`.
pub fn apply_residual_mask<T: Real>(tape: &Tape<T>, a: Var, m: Var) -> Result<Var> {
    let (sa, sm) = (tape.shape(a), tape.shape(m));
    if sa != sm {
        return Err(reid_autodiff::TensorError::ShapeMismatch {
            op: "residual mask",
            lhs: sa,
            rhs: sm,
        }
        .into());
    }
    Ok(tape.mul(tape.add_scalar(m, T::one()), a)?)
}

/// Stacked residual units applied in order.
pub fn feature_path<T: Real>(ctx: &Ctx<T>, units: &[Bottleneck], v: Var) -> Result<Var> {
    units.iter().try_fold(v, |x, u| u.forward(ctx, x))
}

/// Hourglass with `depth` pooling levels and additive skips.
///
/// Pooling rounds odd extents up; after each upsampling the map is cropped
/// back to the skip's extent, so the output always matches the input shape.
#[derive(Clone, Debug)]
pub struct EncoderDecoder {
    pub down: Vec<Bottleneck>,
    pub bottom: Bottleneck,
    pub up: Vec<Bottleneck>,
}

/// Extents at each encoder level, finest first, for an input extent.
pub fn encoder_extents(hw: (usize, usize), depth: usize) -> Vec<(usize, usize)> {
    let mut out = vec![hw];
    for _ in 0..depth {
        let (h, w) = *out.last().expect("non-empty");
        out.push((h.div_ceil(2), w.div_ceil(2)));
    }
    out
}

impl EncoderDecoder {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        channels: usize,
        depth: usize,
        hw: (usize, usize),
        gain: f64,
    ) -> Result<Self> {
        let levels = encoder_extents(hw, depth);
        if let Some(&(h, w)) = levels[..depth].iter().find(|&&(h, w)| h < 2 || w < 2) {
            return Err(ReidError::Config(format!(
                "{name}: a {h}x{w} map cannot be pooled ({depth} levels from {}x{})",
                hw.0, hw.1
            )));
        }
        let mid = (channels / 4).max(1);
        let unit = |b: &mut Builder<T>, tag: String| {
            Bottleneck::build(b, &tag, channels, mid, channels, (1, 1), gain)
        };
        let down = (0..depth)
            .map(|i| unit(b, format!("{name}.down{i}")))
            .collect::<Result<_>>()?;
        let bottom = unit(b, format!("{name}.bottom"))?;
        let up = (0..depth)
            .map(|i| unit(b, format!("{name}.up{i}")))
            .collect::<Result<_>>()?;
        Ok(Self { down, bottom, up })
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, v: Var) -> Result<Var> {
        let t = ctx.tape;
        let mut skips = Vec::with_capacity(self.depth());
        let mut x = v;
        for unit in &self.down {
            let s = unit.forward(ctx, x)?;
            skips.push(s);
            x = t.max_pool(s, (2, 2), (2, 2), Padding::Same)?;
        }
        x = self.bottom.forward(ctx, x)?;
        for (unit, &skip) in self.up.iter().zip(skips.iter().rev()) {
            let shape = t.shape(skip);
            let up = t.crop(t.upsample2(x)?, shape[1], shape[2])?;
            x = unit.forward(ctx, t.add(up, skip)?)?;
        }
        Ok(x)
    }

    pub fn cost(&self, hw: (usize, usize)) -> u64 {
        let levels = encoder_extents(hw, self.depth());
        let mut total = 0;
        for (i, unit) in self.down.iter().enumerate() {
            total += unit.cost(levels[i]).1;
        }
        total += self.bottom.cost(levels[self.depth()]).1;
        for (i, unit) in self.up.iter().enumerate() {
            total += unit.cost(levels[self.depth() - 1 - i]).1;
        }
        total
    }
}

#[derive(Clone, Debug)]
pub enum AttentionHead {
    Decomposed {
        spatial: Conv,
        channel: Conv,
        combine: Conv,
    },
    Monolithic {
        conv: Conv,
    },
}

impl AttentionHead {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        kind: AttentionKind,
        c: usize,
    ) -> Result<Self> {
        Ok(match kind {
            AttentionKind::Decomposed => AttentionHead::Decomposed {
                spatial: b.conv(&format!("{name}.spatial"), 1, c, 1, (1, 1), 1.0)?,
                channel: b.conv(&format!("{name}.channel"), 1, c, c, (1, 1), 1.0)?,
                combine: b.conv(&format!("{name}.combine"), 1, c, c, (1, 1), 0.0)?,
            },
            AttentionKind::Monolithic => AttentionHead::Monolithic {
                conv: b.conv(&format!("{name}.mask"), 1, c, c, (1, 1), 0.0)?,
            },
        })
    }

    /// Mask from the encoder-decoder output, plus `(S, C)` when decomposed.
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, a: Var) -> Result<(Var, Option<(Var, Var)>)> {
        let t = ctx.tape;
        let s = t.shape(a);
        let positions = (s[0] * s[1] * s[2]) as u64;
        match self {
            AttentionHead::Decomposed {
                spatial,
                channel,
                combine,
            } => {
                let sm = spatial_attention(t, a, ctx.p(spatial.w), ctx.p(spatial.b))?;
                let cv = channel_attention(t, a, ctx.p(channel.w), ctx.p(channel.b))?;
                let m = combine_attention(t, sm, cv, ctx.p(combine.w), ctx.p(combine.b))?;
                ctx.count_macs(
                    positions * (spatial.macs_per_position() + combine.macs_per_position())
                        + s[0] as u64 * channel.macs_per_position(),
                );
                Ok((m, Some((sm, cv))))
            }
            AttentionHead::Monolithic { conv } => {
                let m = monolithic_attention(t, a, ctx.p(conv.w), ctx.p(conv.b))?;
                ctx.count_macs(positions * conv.macs_per_position());
                Ok((m, None))
            }
        }
    }

    pub fn cost(&self, hw: (usize, usize)) -> u64 {
        let positions = (hw.0 * hw.1) as u64;
        match self {
            AttentionHead::Decomposed {
                spatial,
                channel,
                combine,
            } => {
                positions * (spatial.macs_per_position() + combine.macs_per_position())
                    + channel.macs_per_position()
            }
            AttentionHead::Monolithic { conv } => positions * conv.macs_per_position(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MaskPath {
    pub trunk: EncoderDecoder,
    pub head: AttentionHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockConfig {
    /// 1-based block index; block 1 never has attention.
    pub index: usize,
    pub cin: usize,
    pub mid: usize,
    pub cout: usize,
    pub stride: (usize, usize),
    pub units: usize,
    pub depth: usize,
    pub attention: Option<AttentionKind>,
}

/// Pooling levels of the mask path for a block index.
pub fn encoder_depth(index: usize) -> usize {
    match index {
        2 => 2,
        3 | 4 => 1,
        _ => 0,
    }
}

/// Intermediate values of one block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct BlockState {
    pub v: Var,
    pub a: Var,
    pub encoded: Option<Var>,
    pub spatial: Option<Var>,
    pub channel: Option<Var>,
    pub mask: Option<Var>,
    pub out: Var,
}

/// One network stage: the first unit changes resolution and width and yields
/// `v`; the remaining units form the feature path.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub config: AttentionBlockConfig,
    pub units: Vec<Bottleneck>,
    pub mask: Option<MaskPath>,
}

impl AttentionBlock {
    /// `hw` is the block's input extent; `gain` scales the last convolution of
    /// every residual branch at initialization.
    pub(crate) fn build<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        config: AttentionBlockConfig,
        hw: (usize, usize),
        gain: f64,
    ) -> Result<Self> {
        if config.units < 1 {
            return Err(ReidError::Config(format!("{name}: a block needs at least one unit")));
        }
        if config.attention.is_some() && config.index == 1 {
            return Err(ReidError::Config(format!("{name}: block 1 has no attention")));
        }
        let mut units = Vec::with_capacity(config.units);
        for i in 0..config.units {
            let (cin, stride) = if i == 0 {
                (config.cin, config.stride)
            } else {
                (config.cout, (1, 1))
            };
            units.push(Bottleneck::build(
                b,
                &format!("{name}.unit{i}"),
                cin,
                config.mid,
                config.cout,
                stride,
                gain,
            )?);
        }
        let mask = match config.attention {
            Some(kind) => {
                let vhw = units[0].reduce.output(hw);
                Some(MaskPath {
                    trunk: EncoderDecoder::build(
                        b,
                        &format!("{name}.mask"),
                        config.cout,
                        config.depth,
                        vhw,
                        gain,
                    )?,
                    head: AttentionHead::build(b, &format!("{name}.attend"), kind, config.cout)?,
                })
            }
            None => None,
        };
        Ok(Self {
            config,
            units,
            mask,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: Var, tag: &str) -> Result<Var> {
        Ok(self.forward_state(ctx, x, tag)?.out)
    }

    pub fn forward_state<T: Real>(&self, ctx: &Ctx<T>, x: Var, tag: &str) -> Result<BlockState> {
        let t = ctx.tape;
        let v = self.units[0].forward(ctx, x)?;
        let a = feature_path(ctx, &self.units[1..], v)?;
        let Some(mask) = &self.mask else {
            return Ok(BlockState {
                v,
                a,
                encoded: None,
                spatial: None,
                channel: None,
                mask: None,
                out: a,
            });
        };
        let encoded = mask.trunk.forward(ctx, v)?;
        let (m, sc) = mask.head.forward(ctx, encoded)?;
        debug_assert!(
            t.value(m).data().iter().all(|&x| x > T::zero() && x < T::one()),
            "attention mask left (0, 1)"
        );
        let m = match ctx.mask_mode {
            MaskMode::Learned => m,
            MaskMode::Zero => t.constant(reid_autodiff::Tensor::zeros(&t.shape(m))),
        };
        ctx.record_mask(tag, m);
        let out = apply_residual_mask(t, a, m)?;
        Ok(BlockState {
            v,
            a,
            encoded: Some(encoded),
            spatial: sc.map(|p| p.0),
            channel: sc.map(|p| p.1),
            mask: Some(m),
            out,
        })
    }

    pub fn output(&self, hw: (usize, usize)) -> (usize, usize) {
        self.units[0].reduce.output(hw)
    }

    /// Multiply-accumulates for one image with input extent `hw`.
    pub fn cost(&self, hw: (usize, usize)) -> u64 {
        let (vhw, mut total) = self.units[0].cost(hw);
        for u in &self.units[1..] {
            total += u.cost(vhw).1;
        }
        if let Some(mask) = &self.mask {
            total += mask.trunk.cost(vhw) + mask.head.cost(vhw);
        }
        total
    }
}
