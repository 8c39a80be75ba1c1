//! Command-line surface: dataset synthesis, feature extraction, fold
//! construction and leakage auditing, training, evaluation, report
//! building, and gradient verification.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use emofuse_core::dsp::{extract_lld_sequence, write_feature_cache, FrameSpec};
use emofuse_core::embeddings::{pseudo_embedding_store, save_embeddings, PseudoEmbeddingKind};
use emofuse_core::folds::{audit_leakage, load_folds, make_folds, save_folds, FoldCriterion};
use emofuse_core::harness::{
    evaluate_run, load_config, load_run_record, render_table, run_experiment, select_epochs,
    write_reports, DataPaths, ExperimentConfig,
};
use emofuse_core::manifest::load_manifest;
use emofuse_core::models::{
    audit_model_gradients, AudioDims, ModelConfig, SizeVariant, SystemKind, TextDims,
};
use emofuse_core::synth::{load_tokens, synth_dataset, SynthSpec};
use emofuse_core::wav::read_wav;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "emofuse",
    version,
    about = "Bimodal speech emotion recognition: train and evaluate acoustic, text, and fusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio+text emotion dataset.
    SynthData(SynthDataArgs),
    /// Extract acoustic descriptor sequences into a feature cache.
    ExtractFeatures(ExtractFeaturesArgs),
    /// Build cross-validation folds from a manifest.
    MakeFolds(MakeFoldsArgs),
    /// Audit a fold assignment for speaker and script leakage.
    AuditFolds(AuditFoldsArgs),
    /// Train one system across all folds and seeds.
    Train(TrainArgs),
    /// Recompute metrics and reports from a completed run's scores.
    Evaluate(EvaluateArgs),
    /// Build comparison artifacts from one or more completed runs.
    Report(ReportArgs),
    /// Verify analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    utterances: usize,
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    scripts: usize,
    /// Probability that a waveform's pitch and energy match its label.
    #[arg(long, default_value_t = 0.8)]
    audio_informativeness: f64,
    /// Probability that the class-keyed token matches the label.
    #[arg(long, default_value_t = 0.8)]
    text_informativeness: f64,
    /// Probability that the class cue is negated in context.
    #[arg(long, default_value_t = 0.0)]
    negation_rate: f64,
    /// Probability that an utterance opens with its script's fixed line.
    #[arg(long, default_value_t = 0.0)]
    style_strength: f64,
    /// Probability that an utterance is improvised instead of scripted.
    #[arg(long, default_value_t = 0.0)]
    improv_rate: f64,
    /// Waveform length in seconds.
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write pseudo-embedding stores: static, contextual, or both
    /// (comma-separated).
    #[arg(long, value_delimiter = ',')]
    embed: Vec<String>,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
}

#[derive(Args)]
struct ExtractFeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Feature cache file to write.
    #[arg(long)]
    out: PathBuf,
    /// Directory audio references resolve against (default: the
    /// manifest's directory).
    #[arg(long)]
    audio_root: Option<PathBuf>,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
    #[arg(long, default_value_t = 0.032)]
    window_secs: f64,
    #[arg(long, default_value_t = 0.010)]
    hop_secs: f64,
}

#[derive(Args)]
struct MakeFoldsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Fold assignment file to write.
    #[arg(long)]
    out: PathBuf,
    /// Split criterion: rand, sp, or sp_sc.
    #[arg(long, default_value = "rand")]
    criterion: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Script held out for testing (sp_sc only).
    #[arg(long)]
    test_script: Option<String>,
    /// Keep improvised utterances out of sp_sc training pools.
    #[arg(long)]
    exclude_improv: bool,
}

#[derive(Args)]
struct AuditFoldsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    /// Exit nonzero if any fold shares speakers or scripts across its
    /// train/test boundary.
    #[arg(long)]
    require_clean: bool,
}

/// Experiment configuration: a TOML file, flags, or a file with flag
/// overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// System kind: audio_only, text_only, ef_cs, ef_pt, ef_ws, lf_cs,
    /// lf_pt, or lf_ws.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Fold criterion: rand, sp, or sp_sc.
    #[arg(long)]
    fold: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    fold_seed: Option<u64>,
    /// Script held out for testing (sp_sc only).
    #[arg(long)]
    test_script: Option<String>,
    /// Keep improvised utterances out of sp_sc training pools.
    #[arg(long)]
    exclude_improv: bool,
    /// Base learning rate override.
    #[arg(long)]
    lr: Option<f64>,
    /// Warmup steps override.
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    max_text_len: Option<usize>,
    #[arg(long)]
    max_audio_len: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Precomputed fold assignment file (overrides the fold criterion).
    #[arg(long)]
    folds_file: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Worker threads for (fold, seed) jobs; 0 means one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Candidate epoch budgets (comma-separated); the budget with the
    /// best median AvAUC over the selection seeds is trained in full.
    #[arg(long, value_delimiter = ',')]
    select_epochs: Vec<usize>,
    /// Seeds for epoch selection (default 0-4).
    #[arg(long, value_delimiter = ',')]
    selection_seeds: Vec<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Completed run directories, in table order.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    /// Directory for the comparison artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::SynthData(args) => synth_data(args),
        Command::ExtractFeatures(args) => extract_features(args),
        Command::MakeFolds(args) => make_folds_cmd(args),
        Command::AuditFolds(args) => audit_folds(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Report(args) => report(args),
        Command::Gradcheck(args) => gradcheck(args),
    }
}

fn synth_data(args: SynthDataArgs) -> Result<()> {
    let spec = SynthSpec {
        n_utterances: args.utterances,
        n_speakers: args.speakers,
        n_scripts: args.scripts,
        audio_informativeness: args.audio_informativeness,
        text_informativeness: args.text_informativeness,
        negation_rate: args.negation_rate,
        seed: args.seed,
        script_style_strength: args.style_strength,
        improv_rate: args.improv_rate,
        utterance_secs: args.seconds,
    };
    let manifest = synth_dataset(&spec, &args.out)
        .with_context(|| format!("synthesizing dataset in {}", args.out.display()))?;
    println!(
        "wrote {} utterances ({} speakers, {} scripts) to {}",
        manifest.records.len(),
        args.speakers,
        args.scripts,
        args.out.display()
    );

    if !args.embed.is_empty() {
        let tokens = load_tokens(args.out.join("tokens.jsonl"))?;
        for name in &args.embed {
            let kind = PseudoEmbeddingKind::parse(name)?;
            let items = tokens.iter().map(|r| (r.id.as_str(), r.tokens.as_slice()));
            let store = pseudo_embedding_store(items, kind, args.embed_dim, args.embed_seed)?;
            let path = args.out.join(format!("embeddings_{}.bin", kind.name()));
            save_embeddings(&path, &store)?;
            println!(
                "wrote {} {}-dim {} embedding sequences to {}",
                store.len(),
                store.dim(),
                kind.name(),
                path.display()
            );
        }
    }
    Ok(())
}

fn extract_features(args: ExtractFeaturesArgs) -> Result<()> {
    let loaded = load_manifest(&args.manifest)?;
    if loaded.discarded > 0 {
        println!("{} records discarded during label mapping", loaded.discarded);
    }
    let audio_root = match args.audio_root {
        Some(dir) => dir,
        None => args
            .manifest
            .parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let spec = FrameSpec {
        sample_rate: args.sample_rate,
        window_secs: args.window_secs,
        hop_secs: args.hop_secs,
    };

    let mut seqs = Vec::with_capacity(loaded.manifest.records.len());
    for record in &loaded.manifest.records {
        let path = audio_root.join(&record.audio_ref);
        let wave = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
        let seq = extract_lld_sequence(record.id.clone(), &wave, &spec)
            .with_context(|| format!("extracting features for '{}'", record.id))?;
        seqs.push(seq);
    }
    let records: Vec<_> = seqs.iter().map(|s| (s.id.as_str(), &s.frames)).collect();
    write_feature_cache(&args.out, &records)?;
    println!("cached {} feature sequences to {}", records.len(), args.out.display());
    Ok(())
}

fn build_criterion(
    name: &str,
    test_script: Option<String>,
    exclude_improv: bool,
) -> Result<FoldCriterion> {
    match name {
        "rand" => Ok(FoldCriterion::Rand),
        "sp" => Ok(FoldCriterion::Sp),
        "sp_sc" => {
            let test_script =
                test_script.context("the sp_sc criterion requires --test-script")?;
            Ok(FoldCriterion::SpSc {
                test_script,
                train_includes_improv: !exclude_improv,
            })
        }
        other => bail!("unknown fold criterion '{other}' (expected rand, sp, or sp_sc)"),
    }
}

fn make_folds_cmd(args: MakeFoldsArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?.manifest;
    let criterion = build_criterion(&args.criterion, args.test_script, args.exclude_improv)?;
    let assignment = make_folds(&manifest, &criterion, args.k, args.seed)?;
    save_folds(&args.out, &assignment)?;
    for fold in &assignment.folds {
        println!(
            "fold {}: {} train / {} test",
            fold.index,
            fold.train_ids.len(),
            fold.test_ids.len()
        );
    }
    println!("wrote {} folds to {}", assignment.folds.len(), args.out.display());
    Ok(())
}

fn audit_folds(args: AuditFoldsArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?.manifest;
    let assignment = load_folds(&args.folds)?;
    let report = audit_leakage(&assignment, &manifest)?;
    print!("{}", report.to_table());
    if report.clean {
        println!("clean: no speaker or script crosses a train/test boundary");
    } else {
        println!("leakage detected");
        if args.require_clean {
            bail!("fold assignment leaks groups across train/test boundaries");
        }
    }
    Ok(())
}

fn resolve_config(args: ConfigArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            load_config(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            let system = args
                .system
                .as_deref()
                .context("either --config or --system is required")?;
            let system = SystemKind::parse(system)?;
            let manifest = args
                .manifest
                .clone()
                .context("--manifest is required without --config")?;
            let output_dir = args
                .output_dir
                .clone()
                .context("--output-dir is required without --config")?;
            ExperimentConfig::for_system(
                system,
                DataPaths {
                    manifest,
                    features: args.features.clone().unwrap_or_default(),
                    embeddings: args.embeddings.clone().unwrap_or_default(),
                    folds: None,
                    output_dir,
                },
            )
        }
    };

    if let Some(system) = &args.system {
        config.system = SystemKind::parse(system)?;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(batch_size) = args.batch_size {
        config.batch_size = batch_size;
    }
    if let Some(seeds) = args.seeds {
        config.seeds = seeds;
    }
    if let Some(fold) = &args.fold {
        config.fold = build_criterion(fold, args.test_script.clone(), args.exclude_improv)?;
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(fold_seed) = args.fold_seed {
        config.fold_seed = fold_seed;
    }
    if args.lr.is_some() || args.warmup.is_some() {
        let mut policy = config.lr_policy();
        if let Some(base_lr) = args.lr {
            policy.base_lr = base_lr;
        }
        if let Some(warmup_steps) = args.warmup {
            policy.warmup_steps = warmup_steps;
        }
        config.lr = Some(policy);
    }
    if let Some(len) = args.max_text_len {
        config.max_seq_len.text = len;
    }
    if let Some(len) = args.max_audio_len {
        config.max_seq_len.audio = len;
    }
    if let Some(path) = args.manifest {
        config.paths.manifest = path;
    }
    if let Some(path) = args.features {
        config.paths.features = path;
    }
    if let Some(path) = args.embeddings {
        config.paths.embeddings = path;
    }
    if let Some(path) = args.folds_file {
        config.paths.folds = Some(path);
    }
    if let Some(path) = args.output_dir {
        config.paths.output_dir = path;
    }
    config.validate()?;
    Ok(config)
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = resolve_config(args.config)?;

    if !args.select_epochs.is_empty() {
        let selection_seeds = if args.selection_seeds.is_empty() {
            (0..5).collect()
        } else {
            args.selection_seeds.clone()
        };
        let best = select_epochs(&config, &args.select_epochs, &selection_seeds, args.threads)?;
        println!(
            "selected {best} epochs from {:?} over {} selection seeds",
            args.select_epochs,
            selection_seeds.len()
        );
        config.epochs = best;
    }

    let record = run_experiment(&config, args.threads)?;
    println!("run directory: {}", config.run_dir().display());
    print!("{}", render_table(std::slice::from_ref(&record)));
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let config = resolve_config(args.config)?;
    let record = evaluate_run(&config)?;
    println!("run directory: {}", config.run_dir().display());
    print!("{}", render_table(std::slice::from_ref(&record)));
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut records = Vec::with_capacity(args.run.len());
    for dir in &args.run {
        records.push(
            load_run_record(dir).with_context(|| format!("loading run {}", dir.display()))?,
        );
    }
    write_reports(&args.out, &records)?;
    println!("wrote comparison artifacts to {}", args.out.display());
    print!("{}", render_table(&records));
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let compact = ModelConfig {
        size_variant: SizeVariant::Small,
        text: TextDims {
            reduce_dim: 6,
            conv_filters: 5,
            kernel: 3,
        },
        audio: AudioDims {
            conv_filters: 4,
            kernel: 3,
        },
        ef_hidden: 6,
        dropout_rate: 0.5,
        lf_scalar_combine: false,
    };
    let mut scalar_lf = compact.clone();
    scalar_lf.lf_scalar_combine = true;
    let d_text = 7;

    let checks = [
        (SystemKind::TextOnly, &compact, "dense combiner"),
        (SystemKind::AudioOnly, &compact, "dense combiner"),
        (SystemKind::EfCs, &compact, "dense combiner"),
        (SystemKind::LfCs, &compact, "dense combiner"),
        (SystemKind::LfCs, &scalar_lf, "scalar combiner"),
    ];
    let mut worst = 0f64;
    for (kind, config, variant) in checks {
        let err = audit_model_gradients(kind, config, d_text, args.seed)?;
        let label = if kind.is_late_fusion() {
            format!("{} ({variant})", kind.name())
        } else {
            kind.name().to_string()
        };
        println!("{label}: max relative error {err:.3e}");
        worst = worst.max(err);
    }
    if worst >= 1e-4 {
        bail!("gradient mismatch: max relative error {worst:.3e} exceeds 1e-4");
    }
    println!("all gradients match central differences (worst {worst:.3e})");
    Ok(())
}
