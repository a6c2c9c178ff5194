//! End-to-end runs: data preparation, training, evaluation and ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{info, warn};
use reid_autodiff::{Tape, Tensor};

use crate::checkpoint::encode_checkpoint;
use crate::config::RunConfig;
use crate::data::manifest::{load_manifest, Split};
use crate::data::ppm::save_image;
use crate::error::{ReidError, Result};
use crate::evaluation::{evaluate, EvalRecord, EvalReport, Role};
use crate::network::{Ctx, ReidModel, Variant};
use crate::pipeline::{
    embed_samples, prepare_split, prepare_synthetic, stack_batch, PreparedSample, RegionSource,
};
use crate::training::{EpochMetrics, Trainer};

/// Prepared splits of one dataset.
pub struct Dataset {
    pub train: Vec<PreparedSample>,
    pub query: Vec<PreparedSample>,
    pub gallery: Vec<PreparedSample>,
    /// Number of training identities.
    pub q: usize,
    /// Images that could not be read.
    pub skipped: Vec<String>,
}

impl Dataset {
    /// Records whose pose was unusable and fell back to fixed strips.
    pub fn fallbacks(&self) -> usize {
        self.all()
            .filter(|s| matches!(s.source, RegionSource::Fallback(_)))
            .count()
    }

    fn all(&self) -> impl Iterator<Item = &PreparedSample> {
        self.train.iter().chain(&self.query).chain(&self.gallery)
    }
}

/// Loads the configured manifest, or the synthetic dataset without one, with
/// part regions as the configured variant requires.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let train_config = config.train_config();
    let dims = config.model.preset.dims();
    let pose_parts = train_config.flags().pose_parts;
    let options = train_config.part_options();
    let (mut train, mut query, mut gallery) = (Vec::new(), Vec::new(), Vec::new());
    let (q, skipped) = match &config.data.manifest {
        Some(path) => {
            let manifest = load_manifest(path)?;
            manifest.check_dense_labels()?;
            let mut skipped = Vec::new();
            for (split, out) in [
                (Split::Train, &mut train),
                (Split::Query, &mut query),
                (Split::Gallery, &mut gallery),
            ] {
                let (samples, bad) = prepare_split(&manifest, split, &dims, pose_parts, &options)?;
                *out = samples;
                skipped.extend(bad);
            }
            (manifest.num_identities(), skipped)
        }
        None => {
            for s in prepare_synthetic(&config.synthetic, &dims, pose_parts, &options)? {
                match s.split {
                    Split::Train => train.push(s),
                    Split::Query => query.push(s),
                    Split::Gallery => gallery.push(s),
                }
            }
            (config.synthetic.ids, Vec::new())
        }
    };
    if train.is_empty() {
        return Err(ReidError::Data("the training split is empty".into()));
    }
    let data = Dataset {
        train,
        query,
        gallery,
        q,
        skipped,
    };
    let fallbacks = data.fallbacks();
    if fallbacks > 0 {
        warn!("{fallbacks} records used fixed strips instead of pose regions");
    }
    Ok(data)
}

/// Final descriptors of the query and gallery splits.
pub fn embed_splits(
    model: &ReidModel<f32>,
    query: &[PreparedSample],
    gallery: &[PreparedSample],
    batch_size: usize,
) -> Result<(Vec<EvalRecord>, Vec<EvalRecord>)> {
    let mut q = embed_samples(model, &query.iter().collect::<Vec<_>>(), batch_size)?;
    let mut g = embed_samples(model, &gallery.iter().collect::<Vec<_>>(), batch_size)?;
    q.iter_mut().for_each(|r| r.role = Role::Query);
    g.iter_mut().for_each(|r| r.role = Role::Gallery);
    Ok((q, g))
}

pub struct RunResult {
    pub model: ReidModel<f32>,
    pub history: Vec<EpochMetrics>,
    pub report: EvalReport,
}

/// Trains on `data.train` and evaluates on its query/gallery splits. With
/// `out_dir`, writes the training log, checkpoint and `results.csv` there.
pub fn train_and_evaluate(
    config: &RunConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    max_rank: usize,
) -> Result<RunResult> {
    let train_config = config.train_config();
    let flags = train_config.flags();
    info!(
        "training {} ({} parts, attention {}, fusion {}) on {} images of {} identities",
        train_config.variant,
        if flags.pose_parts { "pose" } else { "fixed-strip" },
        flags
            .attention
            .map_or("disabled".to_string(), |k| format!("{k:?}").to_lowercase()),
        flags.fusion.name(),
        data.train.len(),
        data.q
    );
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
    }
    let mut trainer = Trainer::new(train_config.clone(), data.q)?;
    let history = trainer.fit(&data.train, out_dir)?;
    let model = trainer.model;
    let (q, g) = embed_splits(&model, &data.query, &data.gallery, train_config.batch_size)?;
    let report = evaluate(&q, &g, max_rank);
    if let Some(dir) = out_dir {
        let path = dir.join("results.csv");
        fs::write(&path, report.to_csv()).map_err(|e| ReidError::io(&path, e))?;
    }
    Ok(RunResult {
        model,
        history,
        report,
    })
}

pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    /// `REID1` bytes of the trained model.
    pub checkpoint: Vec<u8>,
}

/// Trains and evaluates every variant with the configured seed. With
/// `out_dir`, each run writes into a subdirectory named after its variant.
pub fn ablate(config: &RunConfig, out_dir: Option<&Path>, max_rank: usize) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut c = config.clone();
        c.model.variant = variant;
        let data = load_dataset(&c)?;
        let dir = out_dir.map(|d| d.join(variant.name().replace('+', "_")));
        let run = train_and_evaluate(&c, &data, dir.as_deref(), max_rank)?;
        info!("{}: R1 {:.4} mAP {:.4}", variant.label(), run.report.rank(1), run.report.map);
        rows.push(AblationRow {
            variant,
            checkpoint: encode_checkpoint(&run.model),
            report: run.report,
        });
    }
    Ok(rows)
}

/// Variant comparison as CSV under a comment header naming the shared settings.
pub fn ablation_table(config: &RunConfig, rows: &[AblationRow]) -> String {
    let mut out = format!(
        "# seed={} preset={} epochs={}\nvariant,R1,R5,R10,R20,mAP\n",
        config.train.seed,
        config.model.preset.name(),
        config.train.epochs
    );
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
            r.variant.label(),
            r.report.rank(1),
            r.report.rank(5),
            r.report.rank(10),
            r.report.rank(20),
            r.report.map
        )
        .expect("string write");
    }
    out
}

/// Writes each attention mask of the first `limit` samples as a grayscale
/// image of its channel mean; returns the number of files written.
pub fn dump_attention(
    model: &ReidModel<f32>,
    samples: &[PreparedSample],
    limit: usize,
    dir: &Path,
) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
    let mut written = 0;
    for (n, sample) in samples.iter().take(limit).enumerate() {
        let (whole, parts) = stack_batch(&[sample])?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, model.params.bind(&tape, false), false, 0.0, 0);
        let p = parts.map(|t| tape.constant(t));
        model.forward(&ctx, tape.constant(whole), p)?;
        for (tag, m) in ctx.masks() {
            let map = tape.value(m);
            let &[_, h, w, c] = map.shape() else {
                continue;
            };
            let grey: Vec<f32> = map
                .data()
                .chunks_exact(c)
                .flat_map(|px| [px.iter().sum::<f32>() / c as f32; 3])
                .collect();
            let path = dir.join(format!("{n:03}_{tag}.ppm"));
            save_image(&path, &Tensor::new(&[h, w, 3], grey)?)?;
            written += 1;
        }
    }
    Ok(written)
}
