//! Joint optimization of the five branch classifiers and the fused classifier.
//!
//! The loss is `λ·Σ_j l_intra^j + l_inter`, each term a mean softmax
//! cross-entropy over the batch; with concatenation fusion there is no fused
//! classifier and `l_inter` is zero.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reid_autodiff::{Real, Sgd, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::checkpoint::save_checkpoint;
use crate::error::{ReidError, Result};
use crate::fusion::FusionMode;
use crate::network::{build_model, Ctx, ModelSpec, Preset, ReidModel, Variant, VariantFlags};
use crate::pipeline::{stack_batch, PartOptions, PreparedSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub variant: Variant,
    /// Mask form when the variant uses intra-attention.
    pub attention: AttentionKind,
    /// Overrides the variant's fusion mode.
    pub fusion: Option<FusionMode>,
    pub global_weight: bool,
    pub lambda: f64,
    pub lr: f64,
    /// Epochs between learning-rate divisions.
    pub lr_step: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub beta_frac: f64,
    pub tau: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let (epochs, lr_step, batch_size, momentum) = match preset {
            Preset::Paper => (100, 40, 32, 0.0),
            // Far fewer steps and no normalization layers: momentum is needed
            // to converge within the budget.
            Preset::Desk => (30, 20, 16, 0.9),
        };
        Self {
            preset,
            variant: Variant::IntraInter,
            attention: AttentionKind::Decomposed,
            fusion: None,
            global_weight: false,
            lambda: 0.5,
            lr: 0.01,
            lr_step,
            lr_factor: 0.1,
            epochs,
            batch_size,
            dropout: 0.5,
            momentum,
            weight_decay: 0.0,
            seed: 7,
            beta_frac: 0.1,
            tau: 0.2,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ReidError::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be ≥ 0", self.lambda));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.lr_step == 0 {
            return bad("lr_step must be ≥ 1".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr_factor {} outside (0, 1]", self.lr_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be ≥ 0".into());
        }
        if !(self.beta_frac >= 0.0) || !(0.0..=1.0).contains(&self.tau) {
            return bad("beta_frac must be ≥ 0 and tau in [0, 1]".into());
        }
        Ok(())
    }

    pub fn flags(&self) -> VariantFlags {
        let mut f = self.variant.flags();
        if f.attention.is_some() {
            f.attention = Some(self.attention);
        }
        if let Some(mode) = self.fusion {
            f.fusion = mode;
        }
        f.global_weight = self.global_weight && f.fusion == FusionMode::InterAttention;
        f
    }

    pub fn part_options(&self) -> PartOptions {
        PartOptions::new(self.beta_frac, self.tau)
    }

    /// Step schedule: `lr · factor^(epoch / step)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr * self.lr_factor.powi((epoch / self.lr_step) as i32)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub intra: [f64; 5],
    pub inter: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        for (a, b) in self.intra.iter_mut().zip(other.intra) {
            *a += weight * b;
        }
        self.inter += weight * other.inter;
        self.total += weight * other.total;
    }
}

/// Recorded total loss and its components.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    intra_logits: &[Var; 5],
    fused_logits: Option<Var>,
    labels: &[usize],
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let mut sum: Option<Var> = None;
    for (j, &logits) in intra_logits.iter().enumerate() {
        let l = tape.softmax_cross_entropy(logits, labels)?;
        breakdown.intra[j] = tape.value(l).item().as_f64();
        sum = Some(match sum {
            Some(s) => tape.add(s, l)?,
            None => l,
        });
    }
    let mut total = tape.mul_scalar(sum.expect("five heads"), T::of(lambda));
    if let Some(f) = fused_logits {
        let l = tape.softmax_cross_entropy(f, labels)?;
        breakdown.inter = tape.value(l).item().as_f64();
        total = tape.add(total, l)?;
    }
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-size weighted means.
    pub loss: LossBreakdown,
    pub batches: usize,
    pub wall_seconds: f64,
    pub images_per_second: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,intra1,intra2,intra3,intra4,intra5,inter,total,wall_s";

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        let mut s = format!("{},{:e}", self.epoch, self.lr);
        for l in self.loss.intra {
            write!(s, ",{l:.6}").expect("string write");
        }
        write!(
            s,
            ",{:.6},{:.6},{:.3}",
            self.loss.inter, self.loss.total, self.wall_seconds
        )
        .expect("string write");
        s
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample order for an epoch; a function of the seed and epoch only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1 + epoch as u64));
    order
}

/// Training state: model and optimizer.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ReidModel<f32>,
    optimizer: Sgd<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig, q: usize) -> Result<Self> {
        config.validate()?;
        let spec = ModelSpec {
            preset: config.preset,
            q,
            flags: config.flags(),
        };
        let model = build_model(spec, config.seed)?;
        let optimizer = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self {
            config,
            model,
            optimizer,
        })
    }

    /// One forward/backward/update on a batch; returns the pre-update loss.
    pub fn step(&mut self, batch: &[&PreparedSample], lr: f64, dropout_seed: u64) -> Result<LossBreakdown> {
        let labels: Vec<usize> = batch.iter().map(|s| s.id as usize).collect();
        let (whole, parts) = stack_batch(batch)?;
        let tape = Tape::new();
        let params = self.model.params.bind(&tape, true);
        let ctx = Ctx::new(&tape, params.clone(), true, self.config.dropout, dropout_seed);
        let w = tape.constant(whole);
        let p = parts.map(|t| tape.constant(t));
        let out = self.model.forward(&ctx, w, p)?;
        let (loss, breakdown) = total_loss(
            &tape,
            &out.intra_logits,
            out.fused_logits,
            &labels,
            self.config.lambda,
        )?;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<_> = params.iter().map(|&v| grads.take(v)).collect();
        drop(ctx);
        drop(tape);
        self.optimizer.step(self.model.params.values_mut(), &grads, lr)?;
        Ok(breakdown)
    }

    pub fn train_epoch(&mut self, samples: &[PreparedSample], epoch: usize) -> Result<EpochMetrics> {
        if samples.is_empty() {
            return Err(ReidError::Data("no training samples".into()));
        }
        let start = Instant::now();
        let lr = self.config.learning_rate(epoch);
        let order = epoch_order(samples.len(), self.config.seed, epoch);
        let mut mean = LossBreakdown::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let dropout_seed = self
                .config
                .seed
                .wrapping_add(((epoch as u64) << 32) | b as u64);
            let l = self.step(&batch, lr, dropout_seed)?;
            mean.accumulate(&l, chunk.len() as f64 / samples.len() as f64);
            batches += 1;
        }
        let wall = start.elapsed().as_secs_f64();
        Ok(EpochMetrics {
            epoch,
            lr,
            loss: mean,
            batches,
            wall_seconds: wall,
            images_per_second: samples.len() as f64 / wall.max(1e-9),
        })
    }

    /// Runs every epoch. With `out_dir`, writes `train_log.csv` and checkpoints there.
    pub fn fit(&mut self, samples: &[PreparedSample], out_dir: Option<&Path>) -> Result<Vec<EpochMetrics>> {
        let mut log = String::from(LOG_HEADER);
        log.push('\n');
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let m = self.train_epoch(samples, epoch)?;
            info!("{}", m.csv_line());
            log.push_str(&m.csv_line());
            log.push('\n');
            if let Some(dir) = out_dir {
                let path = dir.join("train_log.csv");
                fs::write(&path, &log).map_err(|e| ReidError::io(&path, e))?;
                let every = self.config.checkpoint_every;
                if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < self.config.epochs {
                    save_checkpoint(&self.model, &dir.join(format!("checkpoint_{:03}.reid", epoch + 1)))?;
                }
            }
            history.push(m);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.model, &dir.join("checkpoint.reid"))?;
        }
        Ok(history)
    }
}
