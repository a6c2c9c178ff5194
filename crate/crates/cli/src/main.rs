//! `reid`: synthetic data, part extraction, training, evaluation, ablation
//! and model statistics.
//!
//! Exit codes: 0 success, 1 data-quality failure, 2 usage or configuration error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use reid_core::checkpoint::load_checkpoint;
use reid_core::config::RunConfig;
use reid_core::data::ppm::save_image;
use reid_core::data::{generate_synthetic, load_image, load_manifest, write_embeddings, Split, SyntheticConfig};
use reid_core::evaluation::evaluate;
use reid_core::experiment::{ablate, ablation_table, dump_attention, embed_splits, load_dataset};
use reid_core::geometry::{crop_resize, RegionBox};
use reid_core::network::{build_model, ModelSpec, Preset, Variant};
use reid_core::pipeline::{extract_regions, prepare_split, PartOptions, RegionSource};
use reid_core::training::Trainer;
use reid_core::ReidError;

#[derive(Parser)]
#[command(name = "reid", version, about = "Pose-aligned attention person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Extract the five body regions of every manifest record.
    Parts(PartsArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest's query and gallery splits.
    Eval(EvalArgs),
    /// Train and evaluate all five variants with one seed.
    Ablate(AblateArgs),
    /// Parameter counts and FLOPs of the base and full models.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    ids: usize,
    #[arg(long, default_value_t = 20)]
    per_id: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "128x64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Probability that an image reports some joints at low confidence.
    #[arg(long, default_value_t = 0.1)]
    degrade: f64,
    #[arg(long, default_value_t = 0.1)]
    occlusion: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PartsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Region overlap as a fraction of the body height.
    #[arg(long, default_value_t = 0.1)]
    beta_frac: f64,
    /// Confidence below which joints are filled from the canonical pose.
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    /// Crop sizes of this preset.
    #[arg(long, default_value = "paper")]
    preset: Preset,
    #[arg(long)]
    out: PathBuf,
    /// Also write each image with its five boxes drawn.
    #[arg(long)]
    overlay: bool,
}

/// Config file plus flag overrides shared by `train` and `ablate`.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults of the preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Any other field, as section.key=value; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Deepest rank of the CMC curve.
    #[arg(long, default_value_t = 20)]
    topk: usize,
    /// Write `per_query.csv` with each query's top matches flagged correct or not.
    #[arg(long)]
    report_per_query: bool,
    /// Write the attention masks of this many queries as grayscale images.
    #[arg(long, num_args = 0..=1, default_missing_value = "4")]
    dump_attention: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    beta_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, default_value = "paper")]
    preset: Preset,
    /// Identities the classifiers are sized for.
    #[arg(long, default_value_t = 751)]
    q: usize,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(h)?, num(w)?))
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<ReidError>() {
            Some(ReidError::Config(_)) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<ReidError> for Failure {
    fn from(e: ReidError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn usage(message: String) -> Failure {
    Failure {
        code: 2,
        error: anyhow::anyhow!(message),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Parts(a) => parts(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = SyntheticConfig {
        ids: a.ids,
        per_id: a.per_id,
        height: a.size.0,
        width: a.size.1,
        seed: a.seed,
        degrade_fraction: a.degrade,
        occlusion_prob: a.occlusion,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = generate_synthetic(&cfg, &a.out)?;
    let count = |s| manifest.split(s).count();
    println!(
        "{} images, {} ids (train {}, query {}, gallery {}) in {}",
        manifest.records.len(),
        cfg.ids,
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery),
        a.out.display()
    );
    Ok(())
}

const OVERLAY_COLOURS: [[f32; 3]; 5] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.3, 0.5, 1.0],
    [1.0, 1.0, 0.2],
];

fn draw_box(image: &mut reid_autodiff::Tensor<f32>, b: &RegionBox, colour: [f32; 3]) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let clampi = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
    let (x0, x1) = (clampi(b.x_left, w), clampi(b.x_right - 1.0, w));
    let (y0, y1) = (clampi(b.y_top, h), clampi(b.y_bottom - 1.0, h));
    let data = image.data_mut();
    let mut put = |x: usize, y: usize| data[(y * w + x) * 3..][..3].copy_from_slice(&colour);
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn parts(a: PartsArgs) -> Result<(), Failure> {
    if !(a.beta_frac >= 0.0) || !(0.0..=1.0).contains(&a.tau) {
        return Err(usage("--beta-frac must be ≥ 0 and --tau in [0, 1]".into()));
    }
    let manifest = load_manifest(&a.manifest)?;
    let options = PartOptions::new(a.beta_frac, a.tau);
    let dims = a.preset.dims();
    fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let (mut completed_records, mut completed_joints, mut degenerate) = (0, 0, 0);
    for record in &manifest.records {
        let path = manifest.resolve(record);
        let image = load_image(&path)?;
        let s = image.shape();
        let (boxes, source) = extract_regions((s[0], s[1]), &record.keypoints, true, &options);
        match &source {
            RegionSource::Pose { completed } if *completed > 0 => {
                completed_records += 1;
                completed_joints += completed;
            }
            RegionSource::Fallback(reason) => {
                degenerate += 1;
                warn!("{}: {reason}", path.display());
            }
            _ => {}
        }
        let stem = record
            .image
            .with_extension("")
            .to_string_lossy()
            .replace(['/', '\\'], "_");
        for (i, b) in boxes.iter().enumerate() {
            let target = if i == 0 { dims.whole } else { dims.part };
            let crop = crop_resize(&image, b, target).map_err(ReidError::from)?;
            save_image(&a.out.join(format!("{stem}_r{i}.ppm")), &crop)?;
        }
        if a.overlay {
            let mut canvas = image.clone();
            for (b, c) in boxes.iter().zip(OVERLAY_COLOURS) {
                draw_box(&mut canvas, b, c);
            }
            save_image(&a.out.join(format!("{stem}_overlay.ppm")), &canvas)?;
        }
    }
    let n = manifest.records.len();
    println!(
        "{n} records: {completed_joints} joints completed in {completed_records} records, {degenerate} degenerate"
    );
    if 2 * degenerate > n {
        return Err(Failure {
            code: 1,
            error: anyhow::anyhow!("{degenerate} of {n} records are degenerate"),
        });
    }
    Ok(())
}

fn resolve_config(run: &RunArgs, variant: Option<Variant>) -> Result<RunConfig, Failure> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &run.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects SECTION.KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let quoted = |s: &str| format!("{s:?}");
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    push("model.preset", run.preset.as_deref().map(quoted));
    push("model.variant", variant.map(|v| quoted(v.name())));
    push("data.manifest", run.manifest.as_ref().map(|p| quoted(&p.to_string_lossy())));
    push("data.out_dir", run.out.as_ref().map(|p| quoted(&p.to_string_lossy())));
    push("train.epochs", run.epochs.map(|v| v.to_string()));
    push("train.seed", run.seed.map(|v| v.to_string()));
    push("train.lr", run.lr.map(|v| format!("{v:?}")));
    push("train.lambda", run.lambda.map(|v| format!("{v:?}")));
    let config = match &run.config {
        Some(path) => RunConfig::load(path, &overrides)?,
        None => RunConfig::resolve("", &overrides)?,
    };
    Ok(config)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let config = resolve_config(&a.run, a.variant)?;
    let echo = config.echo()?;
    info!("resolved configuration written to {}", echo.display());
    let data = load_dataset(&config)?;
    let train_config = config.train_config();
    let flags = train_config.flags();
    println!(
        "variant {}: {} parts, attention {}, fusion {}",
        train_config.variant,
        if flags.pose_parts { "pose-aligned" } else { "fixed-strip" },
        flags
            .attention
            .map_or("disabled".to_string(), |k| format!("{k:?}").to_lowercase()),
        flags.fusion.name()
    );
    let mut trainer = Trainer::new(train_config, data.q)?;
    let out = config.data.out_dir.clone();
    let history = trainer.fit(&data.train, Some(&out))?;
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs; final loss {:.4}; checkpoint {}",
            history.len(),
            last.loss.total,
            out.join("checkpoint.reid").display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    if a.topk == 0 {
        return Err(usage("--topk must be ≥ 1".into()));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.manifest)?;
    let dims = model.spec.preset.dims();
    let options = PartOptions::new(a.beta_frac, a.tau);
    let pose = model.spec.flags.pose_parts;
    let (query, skipped_q) = prepare_split(&manifest, Split::Query, &dims, pose, &options)?;
    let (gallery, skipped_g) = prepare_split(&manifest, Split::Gallery, &dims, pose, &options)?;
    let skipped = skipped_q.len() + skipped_g.len();
    if query.is_empty() || gallery.is_empty() {
        return Err(ReidError::Data("the manifest needs query and gallery records".into()).into());
    }
    let (q, g) = embed_splits(&model, &query, &gallery, a.batch)?;
    let report = evaluate(&q, &g, a.topk);
    fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let write = |name: &str, text: String| -> Result<(), Failure> {
        let path = a.out.join(name);
        fs::write(&path, text).with_context(|| path.display().to_string())?;
        Ok(())
    };
    write("results.csv", report.to_csv())?;
    let all: Vec<_> = q.iter().chain(&g).cloned().collect();
    write_embeddings(&all, &a.out.join("embeddings.emb"))?;
    if a.report_per_query {
        write("per_query.csv", report.per_query_csv(&q, &g, a.topk))?;
    }
    if let Some(n) = a.dump_attention {
        if model.spec.flags.attention.is_none() {
            warn!("the checkpoint has no attention blocks; nothing to dump");
        } else {
            let files = dump_attention(&model, &query, n, &a.out.join("attention"))?;
            info!("wrote {files} attention maps");
        }
    }
    for k in [1, 5, 10, 20].into_iter().filter(|&k| k <= a.topk) {
        println!("R{k} {:.4}", report.rank(k));
    }
    println!("mAP {:.4}", report.map);
    if skipped > 0 {
        warn!("{skipped} images could not be read");
    }
    Ok(())
}

fn run_ablation(a: AblateArgs) -> Result<(), Failure> {
    let config = resolve_config(&a.run, None)?;
    config.echo()?;
    let out = config.data.out_dir.clone();
    let rows = ablate(&config, Some(&out), 20)?;
    let table = ablation_table(&config, &rows);
    let path = out.join("ablation.csv");
    fs::write(&path, &table).with_context(|| path.display().to_string())?;
    print!("{table}");
    Ok(())
}

fn stats(a: StatsArgs) -> Result<(), Failure> {
    if a.q < 2 {
        return Err(usage("--q must be ≥ 2".into()));
    }
    println!("preset {} (classifiers sized for q = {})", a.preset.name(), a.q);
    println!("model,params_trunk,params_total,flops_macs,flops_2x");
    for (label, variant) in [("base", Variant::Aligned), ("full", Variant::IntraInter)] {
        let spec = ModelSpec {
            preset: a.preset,
            q: a.q,
            flags: variant.flags(),
        };
        let model = build_model::<f32>(spec, 0)?;
        let c = model.cost();
        println!(
            "{label},{},{},{},{}",
            c.params_trunk,
            c.params_total,
            c.flops(),
            c.flops_two_per_mac()
        );
    }
    Ok(())
}
