//! Five-branch network: one whole-body branch and four part branches sharing
//! the first convolution, each ending in a reduced embedding and a classifier.

pub mod layers;
pub mod params;

use std::fmt;
use std::str::FromStr;

use reid_autodiff::{Padding, Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::attention::{encoder_depth, AttentionBlock, AttentionBlockConfig, AttentionKind};
use crate::error::{ReidError, Result};
use crate::fusion::{FusionLayer, FusionMode, FusionOutput};
use crate::geometry::PartId;
use layers::{Builder, Conv, Linear};
pub use params::{Ctx, MaskMode, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    /// Channels and input extents divided by four.
    Desk,
}

impl Preset {
    pub fn dims(self) -> PresetDims {
        match self {
            Preset::Paper => PresetDims {
                whole: (384, 192),
                part: (96, 192),
                conv1: 32,
                stages: [(32, 64), (64, 128), (128, 256), (256, 512)],
                global_dim: 256,
                part_dim: 128,
            },
            Preset::Desk => PresetDims {
                whole: (96, 48),
                part: (24, 48),
                conv1: 8,
                stages: [(8, 16), (16, 32), (32, 64), (64, 128)],
                global_dim: 64,
                part_dim: 32,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Preset::Paper => 0,
            Preset::Desk => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Preset::Paper),
            1 => Some(Preset::Desk),
            _ => None,
        }
    }
}

impl FromStr for Preset {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(ReidError::Config(format!("unknown preset {other:?} (paper, desk)"))),
        }
    }
}

/// Sizes of one preset. Part branches use half of every global stage width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PresetDims {
    /// Whole-body input `(h, w)`.
    pub whole: (usize, usize),
    /// Part input `(h, w)`.
    pub part: (usize, usize),
    pub conv1: usize,
    /// Global-branch `(bottleneck width, output channels)` per stage.
    pub stages: [(usize, usize); 4],
    pub global_dim: usize,
    pub part_dim: usize,
}

impl PresetDims {
    pub fn final_dim(&self) -> usize {
        self.global_dim + 4 * self.part_dim
    }
}

/// Stage strides; the last stage keeps its resolution.
pub const STAGE_STRIDES: [(usize, usize); 4] = [(1, 1), (2, 2), (2, 2), (1, 1)];
pub const UNITS_PER_STAGE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "aligned")]
    Aligned,
    #[serde(rename = "intra")]
    Intra,
    #[serde(rename = "inter")]
    Inter,
    #[serde(rename = "intra+inter")]
    IntraInter,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Aligned,
        Variant::Intra,
        Variant::Inter,
        Variant::IntraInter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Aligned => "aligned",
            Variant::Intra => "intra",
            Variant::Inter => "inter",
            Variant::IntraInter => "intra+inter",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Aligned => "Aligned",
            Variant::Intra => "Intra",
            Variant::Inter => "Inter",
            Variant::IntraInter => "Intra+inter",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let (pose_parts, attention, fusion) = match self {
            Variant::Baseline => (false, None, FusionMode::Concat),
            Variant::Aligned => (true, None, FusionMode::Concat),
            Variant::Intra => (true, Some(AttentionKind::Decomposed), FusionMode::Concat),
            Variant::Inter => (true, None, FusionMode::InterAttention),
            Variant::IntraInter => (
                true,
                Some(AttentionKind::Decomposed),
                FusionMode::InterAttention,
            ),
        };
        VariantFlags {
            pose_parts,
            attention,
            fusion,
            global_weight: false,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                ReidError::Config(format!(
                    "unknown variant {s:?} (baseline, aligned, intra, inter, intra+inter)"
                ))
            })
    }
}

/// Subsystem switches behind a variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantFlags {
    /// Pose-derived part regions; fixed strips otherwise.
    pub pose_parts: bool,
    pub attention: Option<AttentionKind>,
    pub fusion: FusionMode,
    /// Learn a weight for the global feature as well.
    pub global_weight: bool,
}

impl VariantFlags {
    pub fn to_bits(self) -> u32 {
        let mut bits = self.pose_parts as u32;
        bits |= match self.attention {
            None => 0,
            Some(AttentionKind::Decomposed) => 1 << 1,
            Some(AttentionKind::Monolithic) => 2 << 1,
        };
        bits |= match self.fusion {
            FusionMode::Concat => 0,
            FusionMode::Fc => 1 << 3,
            FusionMode::InterAttention => 2 << 3,
        };
        bits | (self.global_weight as u32) << 5
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        if bits >> 6 != 0 {
            return None;
        }
        let attention = match (bits >> 1) & 3 {
            0 => None,
            1 => Some(AttentionKind::Decomposed),
            2 => Some(AttentionKind::Monolithic),
            _ => return None,
        };
        let fusion = match (bits >> 3) & 3 {
            0 => FusionMode::Concat,
            1 => FusionMode::Fc,
            2 => FusionMode::InterAttention,
            _ => return None,
        };
        Some(Self {
            pose_parts: bits & 1 == 1,
            attention,
            fusion,
            global_weight: (bits >> 5) & 1 == 1,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub preset: Preset,
    /// Number of training identities.
    pub q: usize,
    pub flags: VariantFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchRole {
    Global,
    Part(PartId),
}

impl BranchRole {
    pub const ALL: [BranchRole; 5] = [
        BranchRole::Global,
        BranchRole::Part(PartId::Head),
        BranchRole::Part(PartId::UpperBody),
        BranchRole::Part(PartId::UpperLeg),
        BranchRole::Part(PartId::LowerLeg),
    ];

    pub fn name(self) -> &'static str {
        match self {
            BranchRole::Global => "global",
            BranchRole::Part(p) => p.name(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub role: BranchRole,
    pub input: (usize, usize),
    pub pool_stride: (usize, usize),
    pub blocks: Vec<AttentionBlock>,
    pub reduce: Linear,
    pub head: Linear,
}

pub const POOL_WINDOW: (usize, usize) = (3, 3);

impl Branch {
    fn forward<T: Real>(&self, ctx: &Ctx<T>, conv1: &Conv, x: Var) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let mut h = t.relu(conv1.forward(ctx, x)?);
        h = t.max_pool(h, POOL_WINDOW, self.pool_stride, Padding::Same)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, h, &format!("{}.block{}", self.role.name(), i + 1))?;
        }
        let s = t.shape(h);
        let pooled = t.reshape(t.global_avg_pool(h)?, &[s[0], s[3]])?;
        let embedding = self.reduce.forward(ctx, pooled)?;
        let logits = self.head.forward(ctx, ctx.dropout(embedding)?)?;
        Ok((embedding, logits))
    }

    /// Extent entering each block, then the final extent.
    pub fn extents(&self, conv1: &Conv) -> Vec<(usize, usize)> {
        let c = conv1.output(self.input);
        let p = (
            c.0.div_ceil(self.pool_stride.0),
            c.1.div_ceil(self.pool_stride.1),
        );
        let mut out = vec![p];
        for b in &self.blocks {
            out.push(b.output(*out.last().expect("non-empty")));
        }
        out
    }

    /// Multiply-accumulates for one image, classifier excluded.
    pub fn cost(&self, conv1: &Conv) -> u64 {
        let ext = self.extents(conv1);
        let mut total = conv1.cost(self.input).1;
        for (b, &hw) in self.blocks.iter().zip(&ext) {
            total += b.cost(hw);
        }
        total + self.reduce.macs()
    }
}

pub struct ReidModel<T: Real = f32> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    pub conv1: Conv,
    pub branches: Vec<Branch>,
    pub fusion: FusionLayer,
    /// Classifier on the fused descriptor; absent for concatenation.
    pub fused_head: Option<Linear>,
}

/// Tape variables produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub global: Var,
    pub parts: [Var; 4],
    pub fusion: FusionOutput,
    pub intra_logits: [Var; 5],
    pub fused_logits: Option<Var>,
}

/// Per-image features of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub global: Vec<f32>,
    pub parts: [Vec<f32>; 4],
    pub local: Vec<f32>,
    /// `[global, local]`, unnormalized.
    pub final_feature: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub params_total: usize,
    /// Parameters excluding the identity classifiers.
    pub params_trunk: usize,
    /// Multiply-accumulates for one forward pass of all five branches and the
    /// fusion layer, classifiers excluded.
    pub macs: u64,
}

impl CostReport {
    /// Floating-point operations counted as multiply-accumulates.
    pub fn flops(&self) -> u64 {
        self.macs
    }

    /// Multiplications and additions counted separately.
    pub fn flops_two_per_mac(&self) -> u64 {
        2 * self.macs
    }
}

pub fn is_classifier(name: &str) -> bool {
    name.starts_with("head.")
}

pub fn build_model<T: Real>(spec: ModelSpec, seed: u64) -> Result<ReidModel<T>> {
    if spec.q < 2 {
        return Err(ReidError::Config(format!(
            "need at least 2 identities, got q = {}",
            spec.q
        )));
    }
    let dims = spec.preset.dims();
    let mut b = Builder::<T>::new(seed);
    let conv1 = b.conv("conv1", 3, 3, dims.conv1, (2, 2), 1.0)?;

    // Residual branches start at zero, so every unit begins as identity plus relu.
    let gain = 0.0;

    let mut branches = Vec::with_capacity(5);
    for role in BranchRole::ALL {
        let (input, pool_stride, halve, dim) = match role {
            BranchRole::Global => (dims.whole, (2, 2), 1, dims.global_dim),
            BranchRole::Part(_) => (dims.part, (1, 2), 2, dims.part_dim),
        };
        let name = role.name();
        let c = conv1.output(input);
        let mut hw = (c.0.div_ceil(pool_stride.0), c.1.div_ceil(pool_stride.1));
        let mut cin = dims.conv1;
        let mut blocks = Vec::with_capacity(4);
        for (i, &(mid, out)) in dims.stages.iter().enumerate() {
            let index = i + 1;
            let attention = if index > 1 { spec.flags.attention } else { None };
            let config = AttentionBlockConfig {
                index,
                cin,
                mid: mid / halve,
                cout: out / halve,
                stride: STAGE_STRIDES[i],
                units: UNITS_PER_STAGE,
                depth: if attention.is_some() { encoder_depth(index) } else { 0 },
                attention,
            };
            let block = AttentionBlock::build(&mut b, &format!("{name}.block{index}"), config, hw, gain)?;
            hw = block.output(hw);
            cin = out / halve;
            blocks.push(block);
        }
        let reduce = b.linear(&format!("{name}.reduce"), cin, dim, 1.0)?;
        branches.push(Branch {
            role,
            input,
            pool_stride,
            blocks,
            reduce,
            head: Linear {
                w: ParamId(usize::MAX),
                b: ParamId(usize::MAX),
                din: dim,
                dout: spec.q,
            },
        });
    }
    let fusion = FusionLayer::build(
        &mut b,
        spec.flags.fusion,
        dims.global_dim,
        dims.part_dim,
        spec.flags.global_weight,
    )?;
    // Classifiers last so the trunk's initial values do not depend on q.
    for branch in &mut branches {
        branch.head = b.linear(
            &format!("head.{}", branch.role.name()),
            branch.head.din,
            spec.q,
            0.0,
        )?;
    }
    let fused_head = if spec.flags.fusion.trains_fused_head() {
        Some(b.linear("head.fused", dims.final_dim(), spec.q, 0.0)?)
    } else {
        None
    };
    Ok(ReidModel {
        spec,
        params: b.store,
        conv1,
        branches,
        fusion,
        fused_head,
    })
}

impl<T: Real> ReidModel<T> {
    pub fn dims(&self) -> PresetDims {
        self.spec.preset.dims()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ReidModel<U> {
        ReidModel {
            spec: self.spec,
            params: self.params.cast(),
            conv1: self.conv1.clone(),
            branches: self.branches.clone(),
            fusion: self.fusion.clone(),
            fused_head: self.fused_head.clone(),
        }
    }

    /// `whole` is `[b, H, W, 3]`, each part `[b, h, w, 3]`, all at preset sizes.
    pub fn forward(&self, ctx: &Ctx<T>, whole: Var, parts: [Var; 4]) -> Result<ForwardOutput> {
        let t = ctx.tape;
        let inputs = [whole, parts[0], parts[1], parts[2], parts[3]];
        let batch = t.shape(whole)[0];
        let mut embeddings = [whole; 5];
        let mut logits = [whole; 5];
        for (i, (branch, &x)) in self.branches.iter().zip(&inputs).enumerate() {
            let s = t.shape(x);
            let want = [batch, branch.input.0, branch.input.1, 3];
            if s != want {
                return Err(ReidError::Config(format!(
                    "{} branch expects input {want:?} for the {} preset, got {s:?}",
                    branch.role.name(),
                    self.spec.preset.name()
                )));
            }
            let (e, l) = branch.forward(ctx, &self.conv1, x)?;
            embeddings[i] = e;
            logits[i] = l;
        }
        let part_feats = [embeddings[1], embeddings[2], embeddings[3], embeddings[4]];
        let fusion = self.fusion.forward(ctx, embeddings[0], &part_feats)?;
        let fused_logits = match &self.fused_head {
            Some(head) => Some(head.forward(ctx, ctx.dropout(fusion.final_feature)?)?),
            None => None,
        };
        Ok(ForwardOutput {
            global: embeddings[0],
            parts: part_feats,
            fusion,
            intra_logits: logits,
            fused_logits,
        })
    }

    /// Inference-mode features for a batch.
    pub fn embed(&self, whole: &Tensor<T>, parts: &[Tensor<T>; 4]) -> Result<Vec<EmbeddingSet>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, self.params.bind(&tape, false), false, 0.0, 0);
        let w = tape.constant(whole.clone());
        let p = [0, 1, 2, 3].map(|i| tape.constant(parts[i].clone()));
        let out = self.forward(&ctx, w, p)?;
        let rows = |v: Var| -> Vec<Vec<f32>> {
            let t = tape.value(v);
            let d = t.shape()[1];
            t.data()
                .chunks_exact(d)
                .map(|r| r.iter().map(|x| x.as_f64() as f32).collect())
                .collect()
        };
        let g = rows(out.global);
        let ps = out.parts.map(rows);
        let l = rows(out.fusion.local);
        let f = rows(out.fusion.final_feature);
        Ok((0..g.len())
            .map(|i| EmbeddingSet {
                global: g[i].clone(),
                parts: [0, 1, 2, 3].map(|k| ps[k][i].clone()),
                local: l[i].clone(),
                final_feature: f[i].clone(),
            })
            .collect())
    }

    pub fn cost(&self) -> CostReport {
        let macs = self
            .branches
            .iter()
            .map(|b| b.cost(&self.conv1))
            .sum::<u64>()
            + self.fusion.cost();
        CostReport {
            params_total: self.params.count(|_| true),
            params_trunk: self.params.count(|n| !is_classifier(n)),
            macs,
        }
    }
}
