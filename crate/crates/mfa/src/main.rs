//! Command-line surface over the library: dataset validation and splitting,
//! synthetic corpus generation, adapter training, retrieval evaluation, and
//! 2-D projection export.
//!
//! Exit codes: 0 on success, 1 when a validation run finds mismatches (the
//! report is still printed), 2 on usage, config, or runtime errors. All
//! artifacts are written atomically (temp file + rename) and are
//! byte-reproducible for a fixed seed. Setting `MFA_TEST_MODE=1` suppresses
//! wall-clock timing lines so that even progress output is byte-stable.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mfa::dataset::{
    generate_synthetic, load_manifest, load_manifest_file, make_intra_splits, make_loo_splits,
    reference_expected_table, save_manifest, validate_dataset, write_reference_corpus,
    DatasetManifest, ExpectedTable, FeatureStore, SingleImagePolicy, SplitFractions,
    SplitManifest, SyntheticConfig, ValidationReport,
};
use mfa::encoders::load_embeddings;
use mfa::eval::{
    aggregate_runs, evaluate_retrieval, tsne_embed, write_tsne_csv, DistanceMetric, EvalProtocol,
    EvalReport, RetrievalSet, TsneConfig,
};
use mfa::metadata::DEFAULT_TEMPERATURE_RANGE;
use mfa::training::{run_training, TrainConfig, TrainOutcome, TrainingData};

#[derive(Debug, Parser)]
#[command(name = "mfa", version, about = "Metadata-aware animal re-identification")]
#[command(
    long_about = "Metadata-aware animal re-identification: fuses environmental \
metadata (temperature, circadian phase, face orientation) into visual embeddings \
through a gated cross-attention adapter, and evaluates retrieval with mAP/CMC.\n\n\
Exit codes: 0 success, 1 validation mismatches, 2 usage or runtime errors.\n\
Set MFA_TEST_MODE=1 to suppress timing output; artifacts are byte-reproducible \
for a fixed seed either way."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset directory against expected per-species counts
    Validate(ValidateArgs),
    /// Create a train/gallery/query split with disjoint identities
    Split(SplitArgs),
    /// Generate a synthetic corpus, or the bundled reference corpus
    Synth(SynthArgs),
    /// Train the fusion adapter and evaluate retrieval on the held-out split
    Train(TrainArgs),
    /// Evaluate dumped embeddings, or aggregate reports across runs
    Eval(EvalArgs),
    /// Project an embedding dump to 2-D coordinates for plotting
    Tsne(TsneArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for DistanceMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => DistanceMetric::Cosine,
            MetricArg::Euclidean => DistanceMetric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    /// Train and evaluate on disjoint identities of one species
    Intra,
    /// Train on all other species, evaluate on the target species
    Lodo,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Dataset root holding one directory of image/sidecar pairs per species
    #[arg(long)]
    root: PathBuf,
    /// Validate a single species instead of every expected one
    #[arg(long)]
    species: Option<String>,
    /// Expected-counts table (TOML); defaults to the bundled reference table
    #[arg(long)]
    expect: Option<PathBuf>,
    /// Write the reports as JSON in addition to printing them
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Dataset root holding one directory per species
    #[arg(long)]
    root: PathBuf,
    /// Species to split (intra protocol)
    #[arg(long, required_unless_present = "target_species")]
    species: Option<String>,
    /// Train/gallery/query fractions
    #[arg(long, default_value = "0.5,0.3,0.2", value_parser = parse_fractions)]
    fractions: SplitFractions,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split protocol
    #[arg(long, value_enum, default_value_t = ProtocolArg::Intra)]
    protocol: ProtocolArg,
    /// Held-out species for the lodo protocol
    #[arg(long)]
    target_species: Option<String>,
    /// Output path; defaults to <root>/<species>.split.json
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Species label for the generated records
    #[arg(long, default_value = "synthetic")]
    species: String,
    #[arg(long, default_value_t = 8)]
    identities: usize,
    #[arg(long, default_value_t = 12)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    /// Per-image appearance noise around each identity's latent
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Probability that an image carries its identity's metadata profile
    #[arg(long, default_value_t = 0.9)]
    correlation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train/gallery/query fractions for the saved split
    #[arg(long, default_value = "0.5,0.3,0.2", value_parser = parse_fractions)]
    fractions: SplitFractions,
    /// Write the bundled reference corpus (image/sidecar files) instead
    #[arg(long, conflicts_with_all = ["identities", "images_per_identity", "feature_dim", "noise", "correlation"])]
    reference: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config (TOML); unset fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding one directory per species
    #[arg(long, required_unless_present = "manifest")]
    root: Option<PathBuf>,
    /// Species within --root (intra protocol)
    #[arg(long)]
    species: Option<String>,
    /// Manifest CSV, as written by synth (alternative to --root/--species)
    #[arg(long, conflicts_with = "root")]
    manifest: Option<PathBuf>,
    /// Feature store for --manifest; omit to encode image bytes instead
    #[arg(long, requires = "manifest")]
    features: Option<PathBuf>,
    /// Existing split file; otherwise a split is derived from --fractions
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value = "0.5,0.3,0.2", value_parser = parse_fractions)]
    fractions: SplitFractions,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Intra)]
    protocol: ProtocolArg,
    /// Held-out species for the lodo protocol
    #[arg(long)]
    target_species: Option<String>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Train this many seeds (seed, seed+1, ...) and aggregate their mAP
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Output directory (per-run subdirectories when --runs > 1)
    #[arg(long)]
    out: PathBuf,
    /// Force the fusion gate to zero (gate ablation)
    #[arg(long)]
    gate_off: bool,
    /// Disable the metadata path entirely (visual-only baseline)
    #[arg(long)]
    no_metadata: bool,
    /// Overrides the config's evaluation metric
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Only count gallery matches from a different camera
    #[arg(long)]
    cross_camera: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Query embedding dump
    #[arg(long, required_unless_present = "aggregate")]
    query: Option<PathBuf>,
    /// Gallery embedding dump
    #[arg(long, required_unless_present = "aggregate")]
    gallery: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::Cosine)]
    metric: MetricArg,
    /// Only count gallery matches from a different camera
    #[arg(long)]
    cross_camera: bool,
    /// Deepest CMC rank to report
    #[arg(long, default_value_t = 10)]
    max_rank: usize,
    /// Write the report (or the aggregate) as JSON
    #[arg(long)]
    out: Option<PathBuf>,
    /// Aggregate mAP across existing report files instead of evaluating
    #[arg(long, num_args = 2.., conflicts_with_all = ["query", "gallery"])]
    aggregate: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct TsneArgs {
    /// Embedding dump to project
    #[arg(long)]
    embeddings: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long, default_value_t = 200.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_fractions(text: &str) -> Result<SplitFractions, String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated fractions, e.g. 0.5,0.3,0.2".into());
    }
    let mut values = [0.0f64; 3];
    for (slot, part) in values.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad fraction {part:?}: {e}"))?;
    }
    SplitFractions::new(values[0], values[1], values[2]).map_err(|e| e.to_string())
}

fn timing_enabled() -> bool {
    std::env::var_os("MFA_TEST_MODE").is_none_or(|v| v.is_empty())
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Split(args) => cmd_split(args).map(|()| 0),
        Command::Synth(args) => cmd_synth(args).map(|()| 0),
        Command::Train(args) => cmd_train(args).map(|()| 0),
        Command::Eval(args) => cmd_eval(args).map(|()| 0),
        Command::Tsne(args) => cmd_tsne(args).map(|()| 0),
    }
}

// ===== validate =====

fn load_species_manifest(root: &Path, species: &str) -> Result<DatasetManifest> {
    let dir = root.join(species);
    let load = load_manifest(&dir, species, &DEFAULT_TEMPERATURE_RANGE)
        .with_context(|| format!("loading species directory {}", dir.display()))?;
    for warning in &load.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(load.manifest)
}

fn cmd_validate(args: ValidateArgs) -> Result<i32> {
    let table = match &args.expect {
        Some(path) => ExpectedTable::load(path)
            .with_context(|| format!("loading expected counts from {}", path.display()))?,
        None => reference_expected_table(),
    };
    let species: Vec<String> = match &args.species {
        Some(s) => {
            table.get(s)?;
            vec![s.clone()]
        }
        None => table
            .species()
            .filter(|s| args.root.join(s).is_dir())
            .map(String::from)
            .collect(),
    };
    if species.is_empty() {
        bail!(
            "no expected species directories found under {}",
            args.root.display()
        );
    }
    let mut reports: Vec<ValidationReport> = Vec::new();
    for name in &species {
        let manifest = load_species_manifest(&args.root, name)?;
        let split_path = args.root.join(format!("{name}.split.json"));
        let split = if split_path.is_file() {
            Some(SplitManifest::load(&split_path)?)
        } else {
            None
        };
        let report = validate_dataset(&manifest, split.as_ref(), table.get(name)?)?;
        print!("{report}");
        reports.push(report);
    }
    if let Some(out) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&reports)?;
        bytes.push(b'\n');
        atomic_write_cli(out, &bytes)?;
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        println!("{failed} of {} species mismatched", reports.len());
        Ok(1)
    } else {
        println!("all {} species match the expected counts", reports.len());
        Ok(0)
    }
}

// ===== split =====

fn species_dirs(root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(root)
        .with_context(|| format!("reading dataset root {}", root.display()))?
    {
        let entry = entry?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        bail!("no species directories under {}", root.display());
    }
    Ok(names)
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    match args.protocol {
        ProtocolArg::Intra => {
            let species = args
                .species
                .as_deref()
                .context("--species is required for the intra protocol")?;
            let manifest = load_species_manifest(&args.root, species)?;
            let split = make_intra_splits(
                &manifest,
                args.fractions,
                args.seed,
                SingleImagePolicy::Strict,
            )?;
            let out = args
                .out
                .unwrap_or_else(|| args.root.join(format!("{species}.split.json")));
            split.save(&out)?;
            println!(
                "{species}: {} train / {} gallery / {} query -> {}",
                split.train.len(),
                split.gallery.len(),
                split.query.len(),
                out.display()
            );
        }
        ProtocolArg::Lodo => {
            let target = args
                .target_species
                .as_deref()
                .context("--target-species is required for the lodo protocol")?;
            let mut manifests = Vec::new();
            for name in species_dirs(&args.root)? {
                manifests.push(load_species_manifest(&args.root, &name)?);
            }
            let lodo = make_loo_splits(
                &manifests,
                target,
                args.fractions,
                args.seed,
                SingleImagePolicy::Strict,
            )?;
            let out = args
                .out
                .unwrap_or_else(|| args.root.join(format!("{target}.lodo.json")));
            let mut bytes = serde_json::to_vec_pretty(&lodo)?;
            bytes.push(b'\n');
            atomic_write_cli(&out, &bytes)?;
            let train_images: usize = lodo.train_manifests.iter().map(|m| m.len()).sum();
            println!(
                "lodo target {target}: {} train images from {} species, \
                 {} gallery / {} query -> {}",
                train_images,
                lodo.train_manifests.len(),
                lodo.eval_split.gallery.len(),
                lodo.eval_split.query.len(),
                out.display()
            );
        }
    }
    Ok(())
}

// ===== synth =====

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.reference {
        let species = (args.species != "synthetic").then_some(args.species.as_str());
        write_reference_corpus(&args.out, species)?;
        println!(
            "wrote reference corpus ({}) under {}",
            species.unwrap_or("all species"),
            args.out.display()
        );
        return Ok(());
    }
    let config = SyntheticConfig {
        species: args.species.clone(),
        identities: args.identities,
        images_per_identity: args.images_per_identity,
        feature_dim: args.feature_dim,
        noise_scale: args.noise,
        metadata_correlation: args.correlation,
        seed: args.seed,
    };
    let (manifest, features) = generate_synthetic(&config)?;
    let split = make_intra_splits(
        &manifest,
        args.fractions,
        args.seed,
        SingleImagePolicy::Strict,
    )?;
    // Materialize the records as an on-disk corpus (stub images plus JSON
    // sidecars) so the saved manifest loads like any real dataset.
    let species_dir = args.out.join(&args.species);
    std::fs::create_dir_all(&species_dir)
        .with_context(|| format!("creating {}", species_dir.display()))?;
    for record in manifest.records() {
        let stem = record.stem();
        atomic_write_cli(
            &species_dir.join(format!("{stem}.png")),
            format!("{stem}\n").as_bytes(),
        )?;
        let mut sidecar = serde_json::to_vec(&record.metadata)?;
        sidecar.push(b'\n');
        atomic_write_cli(&species_dir.join(format!("{stem}.json")), &sidecar)?;
    }
    let base = args.out.join(&args.species);
    save_manifest(&manifest, &base.with_extension("manifest.csv"))?;
    features.save(&base.with_extension("features.bin"))?;
    split.save(&base.with_extension("split.json"))?;
    println!(
        "{}: {} images / {} identities ({} train / {} gallery / {} query) -> {}",
        args.species,
        manifest.len(),
        manifest.identity_count(),
        split.train.len(),
        split.gallery.len(),
        split.query.len(),
        args.out.display()
    );
    Ok(())
}

// ===== train =====

fn assemble_data(args: &TrainArgs, config: &TrainConfig) -> Result<TrainingData> {
    let split_seed = args.seed.unwrap_or(config.seed);
    if let Some(manifest_path) = &args.manifest {
        let load = load_manifest_file(manifest_path, &DEFAULT_TEMPERATURE_RANGE)?;
        for warning in &load.warnings {
            eprintln!("warning: {warning}");
        }
        let features = match &args.features {
            Some(path) => Some(FeatureStore::load(path)?),
            None => None,
        };
        let split = match &args.split {
            Some(path) => SplitManifest::load(path)?,
            None => make_intra_splits(
                &load.manifest,
                args.fractions,
                split_seed,
                SingleImagePolicy::Strict,
            )?,
        };
        return Ok(TrainingData::from_split(
            &load.manifest,
            &split,
            features.as_ref(),
            &config.identity_token,
        )?);
    }
    let root = args.root.as_deref().expect("clap enforces root or manifest");
    match args.protocol {
        ProtocolArg::Intra => {
            let species = args
                .species
                .as_deref()
                .context("--species is required for the intra protocol")?;
            let manifest = load_species_manifest(root, species)?;
            let split = match &args.split {
                Some(path) => SplitManifest::load(path)?,
                None => make_intra_splits(
                    &manifest,
                    args.fractions,
                    split_seed,
                    SingleImagePolicy::Strict,
                )?,
            };
            Ok(TrainingData::from_split(
                &manifest,
                &split,
                None,
                &config.identity_token,
            )?)
        }
        ProtocolArg::Lodo => {
            let target = args
                .target_species
                .as_deref()
                .context("--target-species is required for the lodo protocol")?;
            let mut manifests = Vec::new();
            for name in species_dirs(root)? {
                manifests.push(load_species_manifest(root, &name)?);
            }
            let lodo = make_loo_splits(
                &manifests,
                target,
                args.fractions,
                split_seed,
                SingleImagePolicy::Strict,
            )?;
            let target_manifest = manifests
                .iter()
                .find(|m| m.species() == target)
                .expect("make_loo_splits validated the target");
            let train_refs: Vec<&DatasetManifest> = lodo.train_manifests.iter().collect();
            Ok(TrainingData::from_lodo(
                &train_refs,
                target_manifest,
                &lodo.eval_split,
                &config.identity_token,
            )?)
        }
    }
}

fn report_line(report: &EvalReport) -> String {
    format!(
        "mAP {:.4}, rank-1 {:.4} ({} queries, {} gallery)",
        report.map,
        report.cmc_at(1).unwrap_or(0.0),
        report.num_queries,
        report.num_gallery
    )
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)
            .with_context(|| format!("loading run config {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.gate_off {
        config.force_gate_off = true;
    }
    if args.no_metadata {
        config.use_metadata = false;
    }
    if let Some(metric) = args.metric {
        config.eval.metric = metric.into();
    }
    if args.cross_camera {
        config.eval.cross_camera_only = true;
    }
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }

    let data = assemble_data(&args, &config)?;
    let started = Instant::now();
    let mut maps = Vec::new();
    for run in 0..args.runs {
        let mut run_config = config.clone();
        run_config.seed = config.seed + run as u64;
        let out_dir = if args.runs == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("run-{run:03}"))
        };
        let outcome: TrainOutcome = run_training(&run_config, &data, &out_dir)?;
        match &outcome.report {
            Some(report) => {
                println!(
                    "run {run} (seed {}): {} -> {}",
                    run_config.seed,
                    report_line(report),
                    out_dir.display()
                );
                maps.push(report.map);
            }
            None => println!(
                "run {run} (seed {}): trained {} epochs (no eval split) -> {}",
                run_config.seed,
                outcome.epochs.len(),
                out_dir.display()
            ),
        }
    }
    if maps.len() >= 2 {
        // Aggregate on the percent scale, matching how retrieval scores are
        // usually quoted.
        let percents: Vec<f64> = maps.iter().map(|m| m * 100.0).collect();
        let aggregate = aggregate_runs(&percents)?;
        let mut value = serde_json::to_value(&aggregate)?;
        value["metric"] = serde_json::Value::from("mAP percent");
        value["values"] = serde_json::Value::from(percents);
        let mut bytes = serde_json::to_vec_pretty(&value)?;
        bytes.push(b'\n');
        atomic_write_cli(&args.out.join("aggregate.json"), &bytes)?;
        println!("mAP over {} runs: {aggregate} %", aggregate.runs);
    }
    if timing_enabled() {
        eprintln!("finished in {:.1}s", started.elapsed().as_secs_f64());
    }
    Ok(())
}

// ===== eval =====

/// Splits dump stems back into identities and cameras. Stems follow the
/// `identity_camera_index` filename layout.
fn stems_to_labels(stems: &[String]) -> Result<(Vec<u32>, Vec<String>)> {
    let mut identities = Vec::with_capacity(stems.len());
    let mut cameras = Vec::with_capacity(stems.len());
    for stem in stems {
        let (identity, camera, _) = mfa::dataset::parse_image_name(stem)
            .with_context(|| format!("dump stem {stem:?}"))?;
        identities.push(identity);
        cameras.push(camera);
    }
    Ok((identities, cameras))
}

fn load_retrieval_side(path: &Path) -> Result<(ndarray::Array2<f64>, Vec<u32>, Vec<String>)> {
    let (header, rows) =
        load_embeddings(path).with_context(|| format!("loading {}", path.display()))?;
    let (identities, cameras) = stems_to_labels(&header.stems)?;
    let mut matrix = ndarray::Array2::zeros((header.count, header.dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            matrix[[i, j]] = *v;
        }
    }
    Ok((matrix, identities, cameras))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if !args.aggregate.is_empty() {
        let mut percents = Vec::new();
        for path in &args.aggregate {
            let report = EvalReport::load(path)
                .with_context(|| format!("loading report {}", path.display()))?;
            percents.push(report.map * 100.0);
        }
        let aggregate = aggregate_runs(&percents)?;
        println!("mAP over {} runs: {aggregate} %", aggregate.runs);
        if let Some(out) = &args.out {
            let mut value = serde_json::to_value(&aggregate)?;
            value["metric"] = serde_json::Value::from("mAP percent");
            value["values"] = serde_json::Value::from(percents);
            let mut bytes = serde_json::to_vec_pretty(&value)?;
            bytes.push(b'\n');
            atomic_write_cli(out, &bytes)?;
        }
        return Ok(());
    }
    let query_path = args.query.as_deref().expect("clap enforces query");
    let gallery_path = args.gallery.as_deref().expect("clap enforces gallery");
    let (query_emb, query_ids, query_cams) = load_retrieval_side(query_path)?;
    let (gallery_emb, gallery_ids, gallery_cams) = load_retrieval_side(gallery_path)?;
    let protocol = EvalProtocol {
        metric: args.metric.into(),
        cross_camera_only: args.cross_camera,
    };
    let report = evaluate_retrieval(
        RetrievalSet {
            embeddings: &query_emb,
            identities: &query_ids,
            cameras: &query_cams,
        },
        RetrievalSet {
            embeddings: &gallery_emb,
            identities: &gallery_ids,
            cameras: &gallery_cams,
        },
        protocol,
        args.max_rank,
    )?;
    println!("{}", report_line(&report));
    if let Some(out) = &args.out {
        report.save(out)?;
    }
    Ok(())
}

// ===== tsne =====

fn cmd_tsne(args: TsneArgs) -> Result<()> {
    let (header, rows) = load_embeddings(&args.embeddings)
        .with_context(|| format!("loading {}", args.embeddings.display()))?;
    let (identities, _) = stems_to_labels(&header.stems)?;
    let mut matrix = ndarray::Array2::zeros((header.count, header.dim));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            matrix[[i, j]] = *v;
        }
    }
    let config = TsneConfig {
        perplexity: args.perplexity,
        iterations: args.iterations,
        learning_rate: args.learning_rate,
        seed: args.seed,
        ..TsneConfig::default()
    };
    let coords = tsne_embed(&matrix, &config)?;
    write_tsne_csv(&args.out, &coords, &identities)?;
    println!("wrote {} points to {}", coords.nrows(), args.out.display());
    Ok(())
}

/// Atomic write (temp + rename) for the CLI's own JSON artifacts.
fn atomic_write_cli(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            tempfile::NamedTempFile::new_in(dir)?
        }
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    std::fs::write(tmp.path(), bytes)?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
