//! Single-binary interface to the anatomy-guided attention pipeline.
//!
//! Exit codes: 0 ok, 1 internal, 2 input format, 3 domain, 4 verification
//! failure.

mod manifest;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use aga3d_core::error::{Error, Result};
use aga3d_core::grounding::{
    build_table_from_registry, load_embedding_table, top_k, EmbeddingTable, PhraseQuery,
};
use aga3d_core::net::ModelParams;
use aga3d_core::objective::{metrics_csv_header, metrics_csv_row};
use aga3d_core::pipeline::{
    generate_phantoms, prepare_samples, score_samples, split_prepared, train_prepared,
    PhantomSpec, TrainConfig,
};
use aga3d_core::prior::{build_prior_channel, Fusion, PriorParams};
use aga3d_core::roialign::{fit_transform, transform_box, BoundingBox3D, GlobalExtent};
use aga3d_core::volgrid::{load_label_map, store_label_map, store_volume};

use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(name = "aga3d", version, about = "Anatomy-guided attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground phrases and write the fused Gaussian prior channel.
    Prior(PriorArgs),
    /// Ground phrases against a label embedding table (no prior volume).
    Ground(GroundArgs),
    /// Transfer a reference ROI box into a target subject's frame.
    RoiTransfer(RoiTransferArgs),
    /// Materialize a synthetic phantom dataset directory.
    Synth(SynthArgs),
    /// Train on the configured phantom task and save the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of the configured phantom task.
    Eval(EvalArgs),
    /// Run the gradient verification suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PriorArgs {
    /// Label map (AVOL stem or .json path).
    #[arg(long)]
    labels: PathBuf,
    /// Phrase list, one phrase per line.
    #[arg(long)]
    phrases: PathBuf,
    /// Embedding table TSV, or "auto" to embed registry names.
    #[arg(long, default_value = "auto")]
    table: String,
    /// Gaussian smoothing scale (voxels).
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    /// Top-K matches kept per phrase.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Fusion rule across region priors: max or sum-clamped.
    #[arg(long, default_value = "max")]
    fusion: String,
    /// Toy embedder dimensionality (auto table only).
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    phrases: PathBuf,
    /// Embedding table TSV; omit to build one from --labels.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Label map used when no table file is given.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RoiTransferArgs {
    /// Reference global extent JSON {"center":[..],"sides":[..]}.
    #[arg(long)]
    ref_extent: PathBuf,
    /// Target global extent JSON.
    #[arg(long)]
    tgt_extent: PathBuf,
    /// Reference ROI box JSON.
    #[arg(long = "box")]
    box_path: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// PhantomSpec JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed (falls back to AGA3D_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config JSON: {"train": TrainConfig, "phantom": PhantomSpec}.
    #[arg(long)]
    config: PathBuf,
    /// Overrides both train and phantom seeds (falls back to AGA3D_SEED).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run config JSON, identical to the one used for training.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to score: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write scores.svg and roc.svg.
    #[arg(long)]
    plot: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// 3 seeds per op and a smaller model sample instead of the full suite.
    #[arg(long)]
    quick: bool,
    /// Optional directory for a JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct RunConfig {
    train: TrainConfig,
    phantom: PhantomSpec,
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Format { .. }
        | Error::UnsupportedDtype(_)
        | Error::Io { .. }
        | Error::InvalidVolume(_)
        | Error::Contract(_) => 2,
        Error::EmptyRegion(_)
        | Error::UnknownLabel(_)
        | Error::EmptyPhrase
        | Error::ZeroVector(_)
        | Error::DegenerateExtent(_)
        | Error::OutOfBounds
        | Error::DegenerateBatch(_)
        | Error::Split(_)
        | Error::Placement(_)
        | Error::Numerical(_)
        | Error::TrainingDiverged { .. }
        | Error::Shape { .. } => 3,
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Prior(args) => cmd_prior(args),
        Command::Ground(args) => cmd_ground(args),
        Command::RoiTransfer(args) => cmd_roi_transfer(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("AGA3D_SEED").ok().and_then(|s| s.parse().ok())
}

fn resolve_seed(flag: Option<u64>) -> Option<u64> {
    flag.or_else(env_seed)
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.column() as u64, e.to_string()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Contract(format!("serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_phrases(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

#[derive(Serialize)]
struct GroundingMatch {
    label_id: u32,
    label_name: String,
    score: f64,
}

#[derive(Serialize)]
struct GroundingRecord {
    phrase: String,
    matches: Vec<GroundingMatch>,
}

fn ground_phrases(
    phrases: &[String],
    table: &EmbeddingTable,
    k: usize,
) -> Result<(Vec<GroundingRecord>, Vec<u32>)> {
    let names: std::collections::BTreeMap<u32, &str> = table
        .entries
        .iter()
        .map(|e| (e.id, e.name.as_str()))
        .collect();
    let mut records = Vec::new();
    let mut selected = Vec::new();
    for phrase in phrases {
        let q = PhraseQuery::from_phrase(phrase, table.dim)?;
        let (grounding, warning) = top_k(&q, table, k)?;
        if let Some(w) = warning {
            eprintln!("warning: {w}");
        }
        let matches = grounding
            .ranked
            .iter()
            .map(|&(id, score)| GroundingMatch {
                label_id: id,
                label_name: names.get(&id).unwrap_or(&"?").to_string(),
                score,
            })
            .collect();
        selected.extend(grounding.ranked.iter().map(|r| r.0));
        records.push(GroundingRecord {
            phrase: phrase.clone(),
            matches,
        });
    }
    selected.sort_unstable();
    selected.dedup();
    Ok((records, selected))
}

fn parse_fusion(name: &str) -> Result<Fusion> {
    match name {
        "max" => Ok(Fusion::Max),
        "sum-clamped" => Ok(Fusion::SumClamped),
        other => Err(Error::Contract(format!(
            "unknown fusion {other:?}, expected max or sum-clamped"
        ))),
    }
}

fn cmd_prior(args: PriorArgs) -> Result<i32> {
    ensure_out_dir(&args.out)?;
    let mut mf = ManifestBuilder::new("prior", resolve_seed(None).unwrap_or(0));
    mf.input(&args.labels);
    mf.input(&args.phrases);

    let lm = load_label_map(&args.labels)?;
    let phrases = read_phrases(&args.phrases)?;
    let table = if args.table == "auto" {
        build_table_from_registry(&lm, args.dim)?
    } else {
        let path = PathBuf::from(&args.table);
        mf.input(&path);
        load_embedding_table(&path)?
    };
    let params = PriorParams {
        sigma: args.sigma,
        fusion: parse_fusion(&args.fusion)?,
    };
    mf.config(&serde_json::json!({
        "sigma": args.sigma,
        "k": args.k,
        "fusion": args.fusion,
        "dim": args.dim,
        "table": args.table,
    }));

    if phrases.is_empty() {
        eprintln!("warning: empty phrase list; writing an all-zero prior channel");
    }
    let (records, selected) = ground_phrases(&phrases, &table, args.k)?;
    let (channel, warnings) = build_prior_channel(&lm, &selected, &params)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let prior_path = args.out.join("prior");
    store_volume(&channel, &prior_path)?;
    let grounding_path = args.out.join("grounding.json");
    write_json(&records, &grounding_path)?;
    mf.output(&args.out.join("prior.json"));
    mf.output(&args.out.join("prior.raw"));
    mf.output(&grounding_path);
    mf.write(&args.out)?;
    println!(
        "prior channel over {} phrase(s), {} region(s) -> {}",
        phrases.len(),
        selected.len(),
        prior_path.display()
    );
    Ok(0)
}

fn cmd_ground(args: GroundArgs) -> Result<i32> {
    ensure_out_dir(&args.out)?;
    let mut mf = ManifestBuilder::new("ground", resolve_seed(None).unwrap_or(0));
    mf.input(&args.phrases);
    let table = match (&args.table, &args.labels) {
        (Some(path), _) => {
            mf.input(path);
            load_embedding_table(path)?
        }
        (None, Some(labels)) => {
            mf.input(labels);
            let lm = load_label_map(labels)?;
            build_table_from_registry(&lm, args.dim)?
        }
        (None, None) => return Err(Error::Contract("ground needs --table or --labels".into())),
    };
    let phrases = read_phrases(&args.phrases)?;
    let (records, _) = ground_phrases(&phrases, &table, args.k)?;
    let grounding_path = args.out.join("grounding.json");
    write_json(&records, &grounding_path)?;
    mf.config(&serde_json::json!({"k": args.k, "dim": args.dim}));
    mf.output(&grounding_path);
    mf.write(&args.out)?;
    println!(
        "grounded {} phrase(s) -> {}",
        phrases.len(),
        grounding_path.display()
    );
    Ok(0)
}

fn cmd_roi_transfer(args: RoiTransferArgs) -> Result<i32> {
    ensure_out_dir(&args.out)?;
    let mut mf = ManifestBuilder::new("roi-transfer", 0);
    mf.input(&args.ref_extent);
    mf.input(&args.tgt_extent);
    mf.input(&args.box_path);
    let g_ref: GlobalExtent = read_json(&args.ref_extent)?;
    let g_tgt: GlobalExtent = read_json(&args.tgt_extent)?;
    let b: BoundingBox3D = read_json(&args.box_path)?;
    b.validate()?;
    for extent in [&g_ref, &g_tgt] {
        if extent.sides.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::DegenerateExtent(format!("{extent:?}")));
        }
    }
    let t = fit_transform(&g_ref, &g_tgt)?;
    let mapped = transform_box(&t, &b);
    let box_path = args.out.join("box_target.json");
    let transform_path = args.out.join("transform.json");
    write_json(&mapped, &box_path)?;
    write_json(&t, &transform_path)?;
    mf.output(&box_path);
    mf.output(&transform_path);
    mf.write(&args.out)?;
    println!(
        "alpha = [{:.6}, {:.6}, {:.6}] -> {}",
        t.alpha[0],
        t.alpha[1],
        t.alpha[2],
        box_path.display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct DatasetIndexEntry {
    mri: String,
    labels: String,
    phrases: Vec<String>,
    patient: String,
    label: bool,
}

#[derive(Serialize)]
struct DatasetIndex {
    region_names: Vec<String>,
    scans: Vec<DatasetIndexEntry>,
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    ensure_out_dir(&args.out)?;
    let mut spec: PhantomSpec = read_json(&args.config)?;
    if let Some(seed) = resolve_seed(args.seed) {
        spec.seed = seed;
    }
    let mut mf = ManifestBuilder::new("synth", spec.seed);
    mf.input(&args.config);
    mf.config(&spec);

    let dataset = generate_phantoms(&spec)?;
    let scans_dir = args.out.join("scans");
    ensure_out_dir(&scans_dir)?;
    let mut index = DatasetIndex {
        region_names: dataset.region_names.clone(),
        scans: Vec::new(),
    };
    for (i, scan) in dataset.scans.iter().enumerate() {
        let stem = format!("scan_{:04}", i + 1);
        let mri_path = scans_dir.join(format!("{stem}_mri"));
        let labels_path = scans_dir.join(format!("{stem}_labels"));
        let phrases_path = scans_dir.join(format!("{stem}_phrases.txt"));
        store_volume(&scan.mri, &mri_path)?;
        store_label_map(&scan.labels, &labels_path)?;
        fs::write(&phrases_path, scan.phrases.join("\n") + "\n")
            .map_err(|e| Error::io(phrases_path.display().to_string(), e))?;
        index.scans.push(DatasetIndexEntry {
            mri: format!("scans/{stem}_mri"),
            labels: format!("scans/{stem}_labels"),
            phrases: scan.phrases.clone(),
            patient: scan.patient.clone(),
            label: scan.label,
        });
    }
    let index_path = args.out.join("dataset.json");
    write_json(&index, &index_path)?;
    mf.output(&index_path);
    mf.output(&scans_dir);
    mf.write(&args.out)?;
    println!(
        "{} scans across {} patients -> {}",
        dataset.scans.len(),
        spec.patients,
        args.out.display()
    );
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    ensure_out_dir(&args.out)?;
    let mut run: RunConfig = read_json(&args.config)?;
    if let Some(seed) = resolve_seed(args.seed) {
        run.train.seed = seed;
        run.train.net.seed = seed;
        run.phantom.seed = seed;
    }
    run.train.net.input_dims = run.phantom.dims;
    let mut mf = ManifestBuilder::new("train", run.train.seed);
    mf.input(&args.config);
    mf.config(&run);

    let dataset = generate_phantoms(&run.phantom)?;
    let samples = prepare_samples(&dataset, &run.train)?;
    eprintln!(
        "prepared {} scans ({} patients); training up to {} epochs",
        samples.len(),
        run.phantom.patients,
        run.train.epochs
    );
    let outcome = train_prepared(&run.train, &samples)?;
    for rec in &outcome.log {
        eprintln!(
            "epoch {:>3}  lr {:.3e}  train loss {:.5}  val auc {}",
            rec.epoch,
            rec.lr,
            rec.train_loss,
            rec.val
                .auc
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "undefined".into())
        );
    }

    let ckpt_path = args.out.join("checkpoint.agap");
    outcome.params.save_agap(&ckpt_path)?;
    let log_path = args.out.join("log.jsonl");
    let mut log_text = String::new();
    for rec in &outcome.log {
        log_text
            .push_str(&serde_json::to_string(rec).map_err(|e| Error::Contract(e.to_string()))?);
        log_text.push('\n');
    }
    fs::write(&log_path, log_text).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    let split_path = args.out.join("split.json");
    write_json(
        &serde_json::json!({
            "train": outcome.split.train,
            "val": outcome.split.val,
            "test": outcome.split.test,
            "best_epoch": outcome.best_epoch,
        }),
        &split_path,
    )?;
    mf.output(&ckpt_path);
    mf.output(&log_path);
    mf.output(&split_path);
    mf.write(&args.out)?;
    println!(
        "best epoch {} -> {}",
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    ensure_out_dir(&args.out)?;
    let mut run: RunConfig = read_json(&args.config)?;
    if let Some(seed) = resolve_seed(args.seed) {
        run.train.seed = seed;
        run.train.net.seed = seed;
        run.phantom.seed = seed;
    }
    run.train.net.input_dims = run.phantom.dims;
    let mut mf = ManifestBuilder::new("eval", run.train.seed);
    mf.input(&args.config);
    mf.input(&args.checkpoint);
    mf.config(&run);

    let dataset = generate_phantoms(&run.phantom)?;
    let samples = prepare_samples(&dataset, &run.train)?;
    let split = split_prepared(&samples, run.train.fractions, run.train.seed)?;
    let indices = match args.split.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => {
            return Err(Error::Contract(format!(
                "unknown split {other:?}, expected train, val, or test"
            )))
        }
    };
    let mut net_cfg = run.train.net.clone();
    net_cfg.input_dims = run.phantom.dims;
    let params = ModelParams::load_agap(&net_cfg, &args.checkpoint)?;
    let (scores, labels) = score_samples(&params, &samples, indices)?;
    let metrics = aga3d_core::objective::compute_metrics(&scores, &labels, run.train.threshold)?;

    let metrics_path = args.out.join("metrics.json");
    write_json(&metrics, &metrics_path)?;
    let csv_path = args.out.join("metrics.csv");
    let csv = format!("{}\n{}\n", metrics_csv_header(), metrics_csv_row(&metrics));
    fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    mf.output(&metrics_path);
    mf.output(&csv_path);
    if args.plot {
        let scores_path = args.out.join("scores.svg");
        let roc_path = args.out.join("roc.svg");
        fs::write(
            &scores_path,
            plot::scores_svg(&scores, &labels, run.train.threshold),
        )
        .map_err(|e| Error::io(scores_path.display().to_string(), e))?;
        fs::write(&roc_path, plot::roc_svg(&scores, &labels))
            .map_err(|e| Error::io(roc_path.display().to_string(), e))?;
        mf.output(&scores_path);
        mf.output(&roc_path);
    }
    mf.write(&args.out)?;
    println!(
        "split {} ({} scans): acc {:.4}, auc {}",
        args.split,
        indices.len(),
        metrics.acc,
        metrics
            .auc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "undefined".into())
    );
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let seeds = if args.quick { 3 } else { 20 };
    let sample_fraction = if args.quick { 0.002 } else { 0.01 };
    let mut all_pass = true;
    let mut checks = Vec::new();
    for name in aga3d_core::verify::OP_NAMES {
        let check = aga3d_core::verify::check_op(name, seeds)?;
        println!(
            "op {:<20} seeds {:>2}  max rel err {:.3e}  {}",
            check.op,
            check.seeds,
            check.max_rel_err,
            if check.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= check.pass;
        checks.push(check);
    }
    let cfg = aga3d_core::verify::reduced_model_config(17);
    let model = aga3d_core::verify::full_model_check(&cfg, sample_fraction, 17)?;
    println!(
        "full model: {} of {} params sampled, max rel err {:.3e}  {}",
        model.params_sampled,
        model.params_total,
        model.max_rel_err,
        if model.pass { "PASS" } else { "FAIL" }
    );
    all_pass &= model.pass;

    if let Some(out) = &args.out {
        ensure_out_dir(out)?;
        let report_path = out.join("gradcheck.json");
        write_json(
            &serde_json::json!({"ops": checks, "full_model": model}),
            &report_path,
        )?;
        let mut mf = ManifestBuilder::new("gradcheck", 0);
        mf.output(&report_path);
        mf.write(out)?;
    }
    Ok(if all_pass { 0 } else { 4 })
}
