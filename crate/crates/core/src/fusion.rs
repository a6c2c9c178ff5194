//! Inter-attention fusion of the four part features.
//!
//! Each part feature `E_i` gets a scalar weight `μ_i = sigmoid(w_i · E_i + b_i)`
//! and is scaled by `1 + μ_i`; the scaled parts are concatenated into `E_l`
//! and the descriptor is `[E_g, E_l]`.

use std::str::FromStr;

use reid_autodiff::{Real, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};
use crate::network::layers::{Builder, Linear};
use crate::network::params::Ctx;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Unweighted concatenation, assembled at test time only (no fused head).
    Concat,
    /// A trained fully-connected layer over the concatenated parts.
    Fc,
    InterAttention,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Fc => "fc",
            FusionMode::InterAttention => "inter-attention",
        }
    }

    /// Whether the fused descriptor is trained through its own classifier.
    pub fn trains_fused_head(self) -> bool {
        self != FusionMode::Concat
    }
}

impl FromStr for FusionMode {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "fc" => Ok(FusionMode::Fc),
            "inter-attention" | "inter" => Ok(FusionMode::InterAttention),
            other => Err(ReidError::Config(format!(
                "unknown fusion mode {other:?} (concat, fc, inter-attention)"
            ))),
        }
    }
}

/// `μ_i = sigmoid(E_i · w_i + b_i)` for each part, each `[b, 1]`.
pub fn part_weights<T: Real>(
    tape: &Tape<T>,
    parts: &[Var; 4],
    weights: &[(Var, Var); 4],
) -> Result<[Var; 4]> {
    let mut out = [parts[0]; 4];
    for i in 0..4 {
        let z = tape.linear(parts[i], weights[i].0, Some(weights[i].1))?;
        out[i] = tape.sigmoid(z);
    }
    Ok(out)
}

/// `E_l = [(1 + μ_1) E_1, …, (1 + μ_4) E_4]`.
pub fn fuse_parts<T: Real>(tape: &Tape<T>, parts: &[Var; 4], mu: &[Var; 4]) -> Result<Var> {
    let mut scaled = Vec::with_capacity(4);
    for i in 0..4 {
        scaled.push(tape.mul(parts[i], tape.add_scalar(mu[i], T::one()))?);
    }
    Ok(tape.concat(&scaled)?)
}

/// `[E_g, E_l]` with unit weights.
pub fn assemble_final<T: Real>(tape: &Tape<T>, global: Var, local: Var) -> Result<Var> {
    Ok(tape.concat(&[global, local])?)
}

#[derive(Clone, Debug)]
pub enum FusionLayer {
    Concat,
    Fc(Linear),
    InterAttention {
        parts: [Linear; 4],
        /// Optional weight for the global feature, off by default.
        global: Option<Linear>,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `μ_1..μ_4` when inter-attention is active, each `[b, 1]`.
    pub mu: Option<[Var; 4]>,
    pub mu_global: Option<Var>,
    pub local: Var,
    pub final_feature: Var,
}

impl FusionLayer {
    pub(crate) fn build<T: Real>(
        b: &mut Builder<T>,
        mode: FusionMode,
        global_dim: usize,
        part_dim: usize,
        global_weight: bool,
    ) -> Result<Self> {
        Ok(match mode {
            FusionMode::Concat => FusionLayer::Concat,
            FusionMode::Fc => {
                // Starts as the identity, i.e. as plain concatenation.
                let d = 4 * part_dim;
                let eye = Tensor::from_fn(&[d, d], |k| {
                    if k / d == k % d {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                FusionLayer::Fc(b.linear_with("fusion.fc", eye)?)
            }
            FusionMode::InterAttention => {
                let mut mk = |i: usize| b.linear(&format!("fusion.part{}", i + 1), part_dim, 1, 1.0);
                let parts = [mk(0)?, mk(1)?, mk(2)?, mk(3)?];
                let global = if global_weight {
                    Some(b.linear("fusion.global", global_dim, 1, 1.0)?)
                } else {
                    None
                };
                FusionLayer::InterAttention { parts, global }
            }
        })
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            FusionLayer::Concat => FusionMode::Concat,
            FusionLayer::Fc(_) => FusionMode::Fc,
            FusionLayer::InterAttention { .. } => FusionMode::InterAttention,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, global: Var, parts: &[Var; 4]) -> Result<FusionOutput> {
        let t = ctx.tape;
        match self {
            FusionLayer::Concat => {
                let local = t.concat(parts)?;
                Ok(FusionOutput {
                    mu: None,
                    mu_global: None,
                    local,
                    final_feature: assemble_final(t, global, local)?,
                })
            }
            FusionLayer::Fc(fc) => {
                let local = fc.forward(ctx, t.concat(parts)?)?;
                Ok(FusionOutput {
                    mu: None,
                    mu_global: None,
                    local,
                    final_feature: assemble_final(t, global, local)?,
                })
            }
            FusionLayer::InterAttention { parts: w, global: gw } => {
                let bound = [0, 1, 2, 3].map(|i| (ctx.p(w[i].w), ctx.p(w[i].b)));
                let mu = part_weights(t, parts, &bound)?;
                let batch = t.shape(global)[0] as u64;
                ctx.count_macs(batch * w.iter().map(Linear::macs).sum::<u64>());
                let local = fuse_parts(t, parts, &mu)?;
                let (g, mu_global) = match gw {
                    Some(gw) => {
                        let m = t.sigmoid(gw.forward(ctx, global)?);
                        (t.mul(global, t.add_scalar(m, T::one()))?, Some(m))
                    }
                    None => (global, None),
                };
                Ok(FusionOutput {
                    mu: Some(mu),
                    mu_global,
                    local,
                    final_feature: assemble_final(t, g, local)?,
                })
            }
        }
    }

    pub fn cost(&self) -> u64 {
        match self {
            FusionLayer::Concat => 0,
            FusionLayer::Fc(fc) => fc.macs(),
            FusionLayer::InterAttention { parts, global } => {
                parts.iter().map(Linear::macs).sum::<u64>() + global.as_ref().map_or(0, Linear::macs)
            }
        }
    }
}
