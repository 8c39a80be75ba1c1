//! Experiment orchestration: configuration files keyed by content hash,
//! per-(fold, seed) training jobs with resumable on-disk state, branch
//! pretraining with lineage checks, seed aggregation, and report
//! rendering.

use crate::dsp::{finalize_features, fit_norm_stats, read_feature_cache, FeatureSequence, LldSequence};
use crate::embeddings::{load_embeddings_autodim, EmbeddingStore};
use crate::error::{Error, Result};
use crate::folds::{fold_signature, load_folds, make_folds, save_folds, Fold, FoldCriterion};
use crate::manifest::{class_weights, load_manifest, Manifest};
use crate::metrics::{
    aggregate_seeds, median, merge_fold_scores, metric_report, quantile, MetricReport,
    ScoredPrediction, SeedAggregate,
};
use crate::models::{
    build_model, encode_checkpoint, load_checkpoint, pad_batch, train_step, Checkpoint,
    CheckpointLineage, ModelConfig, PretrainedBranches, SerModel, Strategy, SystemKind,
};
use crate::nn::{Adam, AdamConfig, MaskedBatch};
use crate::util::{derive_rng, sha256_hex, shuffle};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Learning rate policy: linear warmup from zero over `warmup_steps`
/// optimizer steps, then constant at `base_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPolicy {
    pub base_lr: f64,
    pub warmup_steps: u64,
}

impl LrPolicy {
    pub fn default_for(system: SystemKind) -> LrPolicy {
        let (base_lr, warmup_steps) = system.default_learning_rate();
        LrPolicy {
            base_lr,
            warmup_steps,
        }
    }
}

/// Per-modality sequence truncation limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqLimits {
    pub text: usize,
    pub audio: usize,
}

impl Default for SeqLimits {
    fn default() -> Self {
        SeqLimits {
            text: 64,
            audio: 1200,
        }
    }
}

/// Input and output locations. Excluded from the config hash so a run
/// moved to another directory resumes under the same key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPaths {
    pub manifest: PathBuf,
    /// Cache of raw per-utterance descriptor sequences.
    #[serde(default)]
    pub features: PathBuf,
    /// Embedding store keyed by each record's text_ref.
    #[serde(default)]
    pub embeddings: PathBuf,
    /// Optional precomputed fold assignment (for datasets that ship
    /// their own train/test definitions). When set, the fold criterion,
    /// k, and fold_seed in the config are ignored.
    #[serde(default)]
    pub folds: Option<PathBuf>,
    pub output_dir: PathBuf,
}

fn default_epochs() -> usize {
    20
}

fn default_batch_size() -> usize {
    32
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_fold_criterion() -> FoldCriterion {
    FoldCriterion::Rand
}

fn default_k() -> usize {
    5
}

/// Everything a run needs. The hash covers the experimental choices
/// (system, model, schedule, seeds, folds, limits) and not the paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    #[serde(default = "ModelConfig::base")]
    pub model: ModelConfig,
    /// Omitted in files to take the system's default policy.
    #[serde(default)]
    pub lr: Option<LrPolicy>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_fold_criterion")]
    pub fold: FoldCriterion,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub fold_seed: u64,
    #[serde(default)]
    pub max_seq_len: SeqLimits,
    pub paths: DataPaths,
}

#[derive(Serialize)]
struct ConfigDigest<'a> {
    system: SystemKind,
    model: &'a ModelConfig,
    lr: LrPolicy,
    epochs: usize,
    batch_size: usize,
    seeds: &'a [u64],
    fold: &'a FoldCriterion,
    k: usize,
    fold_seed: u64,
    max_seq_len: SeqLimits,
}

impl ExperimentConfig {
    /// A config with every default for the given system.
    pub fn for_system(system: SystemKind, paths: DataPaths) -> ExperimentConfig {
        ExperimentConfig {
            system,
            model: ModelConfig::base(),
            lr: Some(LrPolicy::default_for(system)),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seeds: default_seeds(),
            fold: default_fold_criterion(),
            k: default_k(),
            fold_seed: 0,
            max_seq_len: SeqLimits::default(),
            paths,
        }
    }

    /// The effective learning rate policy (the system default when the
    /// config leaves it unset).
    pub fn lr_policy(&self) -> LrPolicy {
        self.lr.unwrap_or_else(|| LrPolicy::default_for(self.system))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".to_string()));
        }
        let mut unique = self.seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds contain duplicates".to_string()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".to_string()));
        }
        if self.max_seq_len.text == 0 || self.max_seq_len.audio == 0 {
            return Err(Error::Config("sequence limits must be positive".to_string()));
        }
        let policy = self.lr_policy();
        if !(policy.base_lr > 0.0) || !policy.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr {} must be positive and finite",
                policy.base_lr
            )));
        }
        Ok(())
    }

    /// Content hash of the experimental choices; the key for the run
    /// directory and for binding outputs to their configuration.
    pub fn config_hash(&self) -> String {
        let digest = ConfigDigest {
            system: self.system,
            model: &self.model,
            lr: self.lr_policy(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            seeds: &self.seeds,
            fold: &self.fold,
            k: self.k,
            fold_seed: self.fold_seed,
            max_seq_len: self.max_seq_len,
        };
        let bytes = serde_json::to_vec(&digest).expect("config digest serialization");
        sha256_hex(&bytes)
    }

    /// The run directory for this config under the output directory.
    pub fn run_dir(&self) -> PathBuf {
        let hash = self.config_hash();
        self.paths
            .output_dir
            .join(format!("{}-{}", self.system.name(), &hash[..12]))
    }
}

/// Parse a TOML experiment config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Read a TOML experiment config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Completed experiment: per-seed merged-fold metrics and their
/// aggregate, bound to the producing config by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub system: SystemKind,
    pub seeds: Vec<u64>,
    pub fold_signatures: Vec<String>,
    pub per_seed: Vec<MetricReport>,
    pub aggregate: SeedAggregate,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn scores_to_string(scores: &[ScoredPrediction]) -> String {
    let mut out = String::new();
    for s in scores {
        out.push_str(&serde_json::to_string(s).expect("score serialization"));
        out.push('\n');
    }
    out
}

fn load_scores(path: &Path) -> Result<Vec<ScoredPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut scores = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: ScoredPrediction = serde_json::from_str(line)
            .map_err(|e| Error::format("scores", format!("line {}: {e}", lineno + 1)))?;
        scores.push(s);
    }
    Ok(scores)
}

fn mix_seed(seed: u64, fold_index: usize) -> u64 {
    seed ^ (fold_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shared read-only state for all (fold, seed) jobs of one run.
struct JobContext<'a> {
    config: &'a ExperimentConfig,
    config_hash: String,
    run_dir: PathBuf,
    manifest: &'a Manifest,
    folds: &'a [Fold],
    fold_signatures: &'a [String],
    fold_features: &'a [Option<Arc<BTreeMap<String, FeatureSequence>>>],
    embeddings: Option<&'a EmbeddingStore>,
}

impl JobContext<'_> {
    fn d_text(&self) -> usize {
        self.embeddings.map_or(0, |e| e.dim())
    }
}

fn assemble_batch(
    ids: &[String],
    ctx: &JobContext<'_>,
    system: SystemKind,
    fold_index: usize,
) -> Result<(Option<MaskedBatch<f32>>, Option<MaskedBatch<f32>>, usize, usize)> {
    let labels: Vec<_> = ids
        .iter()
        .map(|id| {
            ctx.manifest
                .get(id)
                .map(|r| r.label)
                .ok_or_else(|| Error::Training(format!("id '{id}' not in manifest")))
        })
        .collect::<Result<_>>()?;

    let mut truncated_audio = 0;
    let mut truncated_text = 0;
    let audio = if system.needs_audio() {
        let features = ctx.fold_features[fold_index]
            .as_ref()
            .expect("audio features prepared for this fold");
        let mut refs = Vec::with_capacity(ids.len());
        for id in ids {
            let seq = features
                .get(id)
                .ok_or_else(|| Error::Training(format!("no cached features for '{id}'")))?;
            if seq.frames.nrows() > ctx.config.max_seq_len.audio {
                truncated_audio += 1;
            }
            refs.push(&seq.frames);
        }
        Some(pad_batch(&refs, Some(&labels), ctx.config.max_seq_len.audio)?)
    } else {
        None
    };
    let text = if system.needs_text() {
        let store = ctx.embeddings.expect("embeddings loaded for this system");
        let mut refs = Vec::with_capacity(ids.len());
        for id in ids {
            let record = ctx
                .manifest
                .get(id)
                .ok_or_else(|| Error::Training(format!("id '{id}' not in manifest")))?;
            let seq = store.get(&record.text_ref).ok_or_else(|| {
                Error::Training(format!(
                    "no embeddings for '{}' (text_ref '{}')",
                    id, record.text_ref
                ))
            })?;
            if seq.vectors.nrows() > ctx.config.max_seq_len.text {
                truncated_text += 1;
            }
            refs.push(&seq.vectors);
        }
        Some(pad_batch(&refs, Some(&labels), ctx.config.max_seq_len.text)?)
    } else {
        None
    };
    Ok((audio, text, truncated_audio, truncated_text))
}

fn train_model_core(
    ctx: &JobContext<'_>,
    system: SystemKind,
    lr: LrPolicy,
    fold_index: usize,
    seed: u64,
    pretrained: Option<&PretrainedBranches<'_>>,
) -> Result<SerModel<f32>> {
    let fold = &ctx.folds[fold_index];
    let train_set: HashSet<String> = fold.train_ids.iter().cloned().collect();
    let train_manifest = ctx.manifest.subset(&train_set);
    let weights = class_weights(&train_manifest)?;

    let mut model = build_model::<f32>(
        system,
        &ctx.config.model,
        ctx.d_text(),
        mix_seed(seed, fold_index),
        pretrained,
    )?;
    let mut adam = Adam::new(AdamConfig::new(lr.base_lr, lr.warmup_steps));
    let fold_tag = fold_index.to_string();
    let mut dropout_rng = derive_rng(seed, &["harness-dropout", system.name(), &fold_tag]);

    let mut truncated = (0usize, 0usize);
    for epoch in 0..ctx.config.epochs {
        let epoch_tag = epoch.to_string();
        let mut shuffle_rng = derive_rng(
            seed,
            &["harness-shuffle", system.name(), &fold_tag, &epoch_tag],
        );
        let mut order = fold.train_ids.clone();
        shuffle(&mut shuffle_rng, &mut order);
        for batch_ids in order.chunks(ctx.config.batch_size) {
            let (audio, text, ta, tt) = assemble_batch(batch_ids, ctx, system, fold_index)?;
            if epoch == 0 {
                truncated.0 += ta;
                truncated.1 += tt;
            }
            train_step(
                &mut model,
                audio.as_ref(),
                text.as_ref(),
                &weights,
                &mut adam,
                &mut dropout_rng,
            )?;
        }
    }
    if truncated.0 > 0 || truncated.1 > 0 {
        log::info!(
            "{} fold {} seed {}: truncated {} audio and {} text sequences to the configured limits",
            system.name(),
            fold_index,
            seed,
            truncated.0,
            truncated.1
        );
    }
    Ok(model)
}

fn score_fold(
    model: &mut SerModel<f32>,
    ctx: &JobContext<'_>,
    fold_index: usize,
) -> Result<Vec<ScoredPrediction>> {
    let fold = &ctx.folds[fold_index];
    let system = model.kind();
    let mut rng = derive_rng(0, &["harness-eval"]);
    let mut out = Vec::with_capacity(fold.test_ids.len());
    for batch_ids in fold.test_ids.chunks(ctx.config.batch_size) {
        let (audio, text, _, _) = assemble_batch(batch_ids, ctx, system, fold_index)?;
        let result = model.forward(audio.as_ref(), text.as_ref(), false, &mut rng, false)?;
        for (row, id) in result.probs.rows().into_iter().zip(batch_ids.iter()) {
            let mut probs = [0f64; 4];
            let mut sum = 0f64;
            for (slot, v) in probs.iter_mut().zip(row.iter()) {
                *slot = (*v as f64).max(0.0);
                sum += *slot;
            }
            for slot in probs.iter_mut() {
                *slot /= sum;
            }
            let label = ctx
                .manifest
                .get(id)
                .expect("scored id is in the manifest")
                .label;
            out.push(ScoredPrediction::new(id.clone(), probs, label)?);
        }
    }
    Ok(out)
}

fn branch_checkpoint_path(ctx: &JobContext<'_>, kind: SystemKind, fold_index: usize, seed: u64) -> PathBuf {
    ctx.run_dir
        .join("branches")
        .join(format!("{}_fold{}_seed{}.ckpt", kind.name(), fold_index, seed))
}

/// Train a single-modality branch for (fold, seed), or load it when the
/// file already exists, refusing checkpoints whose lineage does not
/// match this run, fold, and seed.
fn ensure_branch(
    ctx: &JobContext<'_>,
    kind: SystemKind,
    fold_index: usize,
    seed: u64,
) -> Result<Checkpoint> {
    let path = branch_checkpoint_path(ctx, kind, fold_index, seed);
    if path.exists() {
        let ckpt = load_checkpoint(&path)?;
        let lineage = &ckpt.header.lineage;
        if ckpt.header.kind != kind
            || ckpt.header.config != ctx.config.model
            || lineage.config_hash != ctx.config_hash
            || lineage.fold_signature != ctx.fold_signatures[fold_index]
            || lineage.seed != seed
        {
            return Err(Error::Training(format!(
                "stale branch checkpoint {}: lineage does not match this run",
                path.display()
            )));
        }
        return Ok(ckpt);
    }
    let lr = LrPolicy::default_for(kind);
    let mut model = train_model_core(ctx, kind, lr, fold_index, seed, None)?;
    let lineage = CheckpointLineage {
        config_hash: ctx.config_hash.clone(),
        fold_index,
        fold_signature: ctx.fold_signatures[fold_index].clone(),
        seed,
    };
    let bytes = encode_checkpoint(&mut model, &lineage);
    write_atomic(&path, &bytes)?;
    Ok(crate::models::parse_checkpoint(&bytes)?)
}

/// Train one (fold, seed) job and score the fold's test set, reusing
/// previously persisted scores when present. Pretrained and warm-start
/// systems first train (or load) their branch models on the same fold's
/// training data.
fn train_single(ctx: &JobContext<'_>, fold_index: usize, seed: u64) -> Result<Vec<ScoredPrediction>> {
    let scores_path = ctx
        .run_dir
        .join("scores")
        .join(format!("fold{fold_index}_seed{seed}.jsonl"));
    if scores_path.exists() {
        return load_scores(&scores_path);
    }

    let needs_branches = matches!(
        ctx.config.system.strategy(),
        Some(Strategy::PreTrained) | Some(Strategy::WarmStart)
    );
    let branches = if needs_branches {
        let text = ensure_branch(ctx, SystemKind::TextOnly, fold_index, seed)?;
        let audio = ensure_branch(ctx, SystemKind::AudioOnly, fold_index, seed)?;
        Some((text, audio))
    } else {
        None
    };
    let pretrained = branches.as_ref().map(|(text, audio)| PretrainedBranches { text, audio });

    let mut model = train_model_core(
        ctx,
        ctx.config.system,
        ctx.config.lr_policy(),
        fold_index,
        seed,
        pretrained.as_ref(),
    )?;

    let lineage = CheckpointLineage {
        config_hash: ctx.config_hash.clone(),
        fold_index,
        fold_signature: ctx.fold_signatures[fold_index].clone(),
        seed,
    };
    let model_path = ctx
        .run_dir
        .join("models")
        .join(format!("fold{fold_index}_seed{seed}.ckpt"));
    write_atomic(&model_path, &encode_checkpoint(&mut model, &lineage))?;

    let scores = score_fold(&mut model, ctx, fold_index)?;
    write_atomic(&scores_path, scores_to_string(&scores).as_bytes())?;
    Ok(scores)
}

fn prepare_fold_features(
    raw: &BTreeMap<String, LldSequence>,
    fold: &Fold,
) -> Result<BTreeMap<String, FeatureSequence>> {
    let train_seqs: Vec<&LldSequence> = fold
        .train_ids
        .iter()
        .map(|id| {
            raw.get(id)
                .ok_or_else(|| Error::Training(format!("no cached features for '{id}'")))
        })
        .collect::<Result<_>>()?;
    let stats = fit_norm_stats(&train_seqs)?;
    let mut out = BTreeMap::new();
    for id in fold.train_ids.iter().chain(fold.test_ids.iter()) {
        let seq = raw
            .get(id)
            .ok_or_else(|| Error::Training(format!("no cached features for '{id}'")))?;
        out.insert(id.clone(), finalize_features(seq, &stats)?);
    }
    Ok(out)
}

/// Run a complete experiment: build folds, train every (fold, seed) job
/// (in parallel on `threads` workers; 0 means one per core), merge fold
/// scores per seed, aggregate across seeds, and persist scores,
/// checkpoints, and reports under the config-hash run directory.
/// Completed jobs found on disk are reused, so resuming is idempotent
/// and the final report is independent of worker count.
pub fn run_experiment(config: &ExperimentConfig, threads: usize) -> Result<RunRecord> {
    config.validate()?;
    let config_hash = config.config_hash();
    let run_dir = config.run_dir();
    for sub in ["scores", "models", "branches", "reports"] {
        let dir = run_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let echo = serde_json::to_string_pretty(config).expect("config echo serialization");
    write_atomic(&run_dir.join("config.json"), format!("{echo}\n").as_bytes())?;

    let loaded = load_manifest(&config.paths.manifest)?;
    let manifest = loaded.manifest;
    manifest.require_all_classes()?;
    if loaded.discarded > 0 {
        log::info!("{} records discarded during label mapping", loaded.discarded);
    }

    let assignment = match &config.paths.folds {
        Some(path) => {
            let assignment = load_folds(path)?;
            assignment.validate()?;
            for fold in &assignment.folds {
                if fold.train_ids.is_empty() || fold.test_ids.is_empty() {
                    return Err(Error::Folds(format!(
                        "fold {} in {} has an empty train or test set",
                        fold.index,
                        path.display()
                    )));
                }
                for id in fold.train_ids.iter().chain(fold.test_ids.iter()) {
                    if manifest.get(id).is_none() {
                        return Err(Error::Folds(format!(
                            "fold file {} references '{id}', which is not in the manifest",
                            path.display()
                        )));
                    }
                }
            }
            assignment
        }
        None => make_folds(&manifest, &config.fold, config.k, config.fold_seed)?,
    };
    let folds_path = run_dir.join("folds.jsonl");
    if folds_path.exists() {
        let prior = load_folds(&folds_path)?;
        if prior != assignment {
            return Err(Error::Config(format!(
                "run directory {} holds results for a different fold assignment; \
                 use a fresh output directory",
                run_dir.display()
            )));
        }
    } else {
        save_folds(&folds_path, &assignment)?;
    }
    let fold_signatures: Vec<String> = assignment.folds.iter().map(fold_signature).collect();

    let raw_features: Option<BTreeMap<String, LldSequence>> = if config.system.needs_audio() {
        let records = read_feature_cache(&config.paths.features)?;
        let mut map = BTreeMap::new();
        for (id, frames) in records {
            map.insert(id.clone(), LldSequence::new(id, frames)?);
        }
        Some(map)
    } else {
        None
    };
    let embeddings = if config.system.needs_text() {
        Some(load_embeddings_autodim(&config.paths.embeddings)?)
    } else {
        None
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Training(format!("worker pool: {e}")))?;

    let fold_features: Vec<Option<Arc<BTreeMap<String, FeatureSequence>>>> =
        pool.install(|| match &raw_features {
            Some(raw) => assignment
                .folds
                .par_iter()
                .map(|fold| prepare_fold_features(raw, fold).map(|m| Some(Arc::new(m))))
                .collect::<Result<Vec<_>>>(),
            None => Ok(vec![None; assignment.folds.len()]),
        })?;

    let ctx = JobContext {
        config,
        config_hash: config_hash.clone(),
        run_dir: run_dir.clone(),
        manifest: &manifest,
        folds: &assignment.folds,
        fold_signatures: &fold_signatures,
        fold_features: &fold_features,
        embeddings: embeddings.as_ref(),
    };

    let mut jobs: Vec<(usize, u64)> = Vec::new();
    for fold_index in 0..assignment.folds.len() {
        for &seed in &config.seeds {
            jobs.push((fold_index, seed));
        }
    }
    let results: Vec<((usize, u64), Vec<ScoredPrediction>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(fold_index, seed)| {
                train_single(&ctx, fold_index, seed).map(|scores| ((fold_index, seed), scores))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let by_job: BTreeMap<(usize, u64), Vec<ScoredPrediction>> = results.into_iter().collect();
    let record = build_record(config, config_hash, fold_signatures, &by_job)?;
    write_reports(&run_dir.join("reports"), std::slice::from_ref(&record))?;
    Ok(record)
}

fn build_record(
    config: &ExperimentConfig,
    config_hash: String,
    fold_signatures: Vec<String>,
    by_job: &BTreeMap<(usize, u64), Vec<ScoredPrediction>>,
) -> Result<RunRecord> {
    let n_folds = fold_signatures.len();
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let fold_scores: Vec<Vec<ScoredPrediction>> = (0..n_folds)
            .map(|fold_index| by_job[&(fold_index, seed)].clone())
            .collect();
        let merged = merge_fold_scores(&fold_scores)?;
        per_seed.push(metric_report(&merged)?);
    }
    let aggregate = aggregate_seeds(&per_seed)?;
    Ok(RunRecord {
        config_hash,
        system: config.system,
        seeds: config.seeds.clone(),
        fold_signatures,
        per_seed,
        aggregate,
    })
}

/// Recompute metrics and reports from the score files a previous run
/// persisted, without training anything. Errors when any (fold, seed)
/// job has no scores yet.
pub fn evaluate_run(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let config_hash = config.config_hash();
    let run_dir = config.run_dir();
    let folds_path = run_dir.join("folds.jsonl");
    if !folds_path.exists() {
        return Err(Error::Config(format!(
            "no completed run under {} (missing folds.jsonl); train first",
            run_dir.display()
        )));
    }
    let assignment = load_folds(&folds_path)?;
    let fold_signatures: Vec<String> = assignment.folds.iter().map(fold_signature).collect();

    let mut by_job = BTreeMap::new();
    for fold_index in 0..assignment.folds.len() {
        for &seed in &config.seeds {
            let path = run_dir
                .join("scores")
                .join(format!("fold{fold_index}_seed{seed}.jsonl"));
            if !path.exists() {
                return Err(Error::Config(format!(
                    "missing scores for fold {fold_index} seed {seed} under {}; train first",
                    run_dir.display()
                )));
            }
            by_job.insert((fold_index, seed), load_scores(&path)?);
        }
    }
    let record = build_record(config, config_hash, fold_signatures, &by_job)?;
    write_reports(&run_dir.join("reports"), std::slice::from_ref(&record))?;
    Ok(record)
}

/// Load the persisted RunRecord of a completed experiment.
pub fn load_run_record(run_dir: impl AsRef<Path>) -> Result<RunRecord> {
    let path = run_dir.as_ref().join("reports").join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("metrics.json", e.to_string()))
}

/// Pick the epoch budget with the best score; ties go to the smallest
/// budget.
pub fn pick_epoch(results: &[(usize, f64)]) -> Result<usize> {
    if results.is_empty() {
        return Err(Error::Config("no epoch candidates".to_string()));
    }
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|(epochs, _)| *epochs);
    let mut best = sorted[0];
    for &(epochs, value) in &sorted[1..] {
        if value > best.1 {
            best = (epochs, value);
        }
    }
    Ok(best.0)
}

/// Run the experiment once per candidate epoch budget over the selection
/// seeds and return the budget with the highest median AvAUC (ties to
/// the smallest).
pub fn select_epochs(
    base: &ExperimentConfig,
    candidates: &[usize],
    selection_seeds: &[u64],
    threads: usize,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Config("no epoch candidates".to_string()));
    }
    if selection_seeds.is_empty() {
        return Err(Error::Config("no selection seeds".to_string()));
    }
    let mut unique: Vec<usize> = candidates.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let mut results = Vec::with_capacity(unique.len());
    for &epochs in &unique {
        let mut config = base.clone();
        config.epochs = epochs;
        config.seeds = selection_seeds.to_vec();
        let record = run_experiment(&config, threads)?;
        results.push((epochs, record.aggregate.av_auc_median));
    }
    pick_epoch(&results)
}

/// Five-number summary of one system's per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub system: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Summarize a value set for box-plot rendering.
pub fn box_summary(system: &str, values: &[f64]) -> Result<BoxSummary> {
    if values.is_empty() {
        return Err(Error::Metrics("no values to summarize".to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(BoxSummary {
        system: system.to_string(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: median(&sorted),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    })
}

/// Per-metric box summaries for every system in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBoxes {
    pub av_rec: Vec<BoxSummary>,
    pub av_auc: Vec<BoxSummary>,
}

/// Render the comparison table: one row per run, median ± IQR columns.
pub fn render_table(records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>6} {:>20} {:>20}\n",
        "system", "seeds", "AvRec % (med ± IQR)", "AvAUC (med ± IQR)"
    ));
    for r in records {
        let a = &r.aggregate;
        out.push_str(&format!(
            "{:<12} {:>6} {:>20} {:>20}\n",
            r.system.name(),
            r.seeds.len(),
            format!("{:.1} ± {:.1}", a.av_rec_median * 100.0, a.av_rec_iqr * 100.0),
            format!("{:.3} ± {:.3}", a.av_auc_median, a.av_auc_iqr),
        ));
    }
    out
}

/// Render box plots of the per-seed values as a standalone SVG.
pub fn render_box_svg(summaries: &[BoxSummary], title: &str) -> String {
    let rows = summaries.len().max(1);
    let margin_left = 130.0;
    let plot_w = 540.0;
    let row_h = 52.0;
    let top = 56.0;
    let width = margin_left + plot_w + 40.0;
    let height = top + rows as f64 * row_h + 44.0;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in summaries {
        lo = lo.min(s.min);
        hi = hi.max(s.max);
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let span = (hi - lo).max(1e-9);
    lo -= span * 0.08;
    hi += span * 0.08;
    let x = |v: f64| margin_left + (v - lo) / (hi - lo) * plot_w;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" font-size=\"15\" font-weight=\"bold\">{title}</text>\n",
        margin_left
    ));
    let axis_y = top + rows as f64 * row_h + 8.0;
    svg.push_str(&format!(
        "<line x1=\"{:.1}\" y1=\"{axis_y:.1}\" x2=\"{:.1}\" y2=\"{axis_y:.1}\" stroke=\"#333\"/>\n",
        margin_left,
        margin_left + plot_w
    ));
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let xi = x(v);
        svg.push_str(&format!(
            "<line x1=\"{xi:.1}\" y1=\"{axis_y:.1}\" x2=\"{xi:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
            axis_y + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{xi:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>\n",
            axis_y + 20.0
        ));
    }
    for (i, s) in summaries.iter().enumerate() {
        let cy = top + i as f64 * row_h + row_h / 2.0;
        let box_top = cy - 12.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            margin_left - 10.0,
            cy + 4.0,
            s.system
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{cy:.1}\" x2=\"{:.1}\" y2=\"{cy:.1}\" stroke=\"#333\"/>\n",
            x(s.min),
            x(s.q1)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{cy:.1}\" x2=\"{:.1}\" y2=\"{cy:.1}\" stroke=\"#333\"/>\n",
            x(s.q3),
            x(s.max)
        ));
        for v in [s.min, s.max] {
            svg.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
                x(v),
                cy - 7.0,
                x(v),
                cy + 7.0
            ));
        }
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{box_top:.1}\" width=\"{:.1}\" height=\"24\" \
             fill=\"#9dbede\" stroke=\"#333\"/>\n",
            x(s.q1),
            (x(s.q3) - x(s.q1)).max(0.5)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{box_top:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"#333\" stroke-width=\"2\"/>\n",
            x(s.median),
            x(s.median),
            box_top + 24.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write the comparison artifacts for one or more runs into `dir`:
/// `metrics.json`, `report.txt`, `boxes.json`, and `boxplot.svg`.
pub fn write_reports(dir: &Path, records: &[RunRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no run records to report".to_string()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = if records.len() == 1 {
        serde_json::to_string_pretty(&records[0]).expect("record serialization")
    } else {
        serde_json::to_string_pretty(records).expect("record serialization")
    };
    write_atomic(&dir.join("metrics.json"), format!("{metrics}\n").as_bytes())?;
    write_atomic(&dir.join("report.txt"), render_table(records).as_bytes())?;

    let mut av_rec = Vec::with_capacity(records.len());
    let mut av_auc = Vec::with_capacity(records.len());
    for r in records {
        av_rec.push(box_summary(r.system.name(), &r.aggregate.av_rec_values)?);
        av_auc.push(box_summary(r.system.name(), &r.aggregate.av_auc_values)?);
    }
    let boxes = ReportBoxes { av_rec, av_auc };
    let boxes_json = serde_json::to_string_pretty(&boxes).expect("box serialization");
    write_atomic(&dir.join("boxes.json"), format!("{boxes_json}\n").as_bytes())?;
    write_atomic(
        &dir.join("boxplot.svg"),
        render_box_svg(&boxes.av_auc, "AvAUC per seed").as_bytes(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paths(tag: &str) -> DataPaths {
        DataPaths {
            manifest: PathBuf::from(format!("/data/{tag}/manifest.jsonl")),
            features: PathBuf::from(format!("/data/{tag}/features.bin")),
            embeddings: PathBuf::from(format!("/data/{tag}/embeddings.bin")),
            folds: None,
            output_dir: PathBuf::from(format!("/data/{tag}/out")),
        }
    }

    #[test]
    fn defaults_match_the_documented_schedule() {
        let config = ExperimentConfig::for_system(SystemKind::EfCs, paths("a"));
        assert_eq!(config.lr_policy().base_lr, 0.0007);
        assert_eq!(config.lr_policy().warmup_steps, 40);
        assert_eq!(config.epochs, 20);
        assert_eq!(config.batch_size, 32);
        assert_eq!(config.seeds.len(), 10);
        assert_eq!(config.max_seq_len.text, 64);
        assert_eq!(config.max_seq_len.audio, 1200);
        assert!(config.validate().is_ok());

        let ws = ExperimentConfig::for_system(SystemKind::LfWs, paths("a"));
        assert_eq!(ws.lr_policy().base_lr, 0.0001);
        assert_eq!(ws.lr_policy().warmup_steps, 40);
        let lf_pt = ExperimentConfig::for_system(SystemKind::LfPt, paths("a"));
        assert_eq!(lf_pt.lr_policy().base_lr, 0.01);
        assert_eq!(lf_pt.lr_policy().warmup_steps, 0);
    }

    #[test]
    fn hash_ignores_paths_and_tracks_choices() {
        let a = ExperimentConfig::for_system(SystemKind::TextOnly, paths("a"));
        let b = ExperimentConfig::for_system(SystemKind::TextOnly, paths("b"));
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.epochs = 21;
        assert_ne!(a.config_hash(), c.config_hash());
        let mut d = a.clone();
        d.lr = Some(LrPolicy {
            base_lr: 0.0007,
            warmup_steps: 40,
        });
        assert_eq!(a.config_hash(), d.config_hash());
        assert!(a.run_dir().to_string_lossy().contains("text_only-"));
    }

    #[test]
    fn toml_config_fills_defaults() {
        let text = r#"
            system = "ef_ws"

            [fold]
            kind = "sp_sc"
            test_script = "scr01"

            [paths]
            manifest = "/data/m.jsonl"
            features = "/data/f.bin"
            embeddings = "/data/e.bin"
            output_dir = "/data/out"
        "#;
        let config = parse_config(text).unwrap();
        assert_eq!(config.system, SystemKind::EfWs);
        assert_eq!(config.lr_policy().base_lr, 0.0001);
        assert_eq!(config.epochs, 20);
        match &config.fold {
            FoldCriterion::SpSc {
                test_script,
                train_includes_improv,
            } => {
                assert_eq!(test_script, "scr01");
                assert!(*train_includes_improv);
            }
            other => panic!("wrong criterion {other:?}"),
        }
        assert!(parse_config("system = \"nope\"").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = ExperimentConfig::for_system(SystemKind::TextOnly, paths("a"));
        config.batch_size = 0;
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::for_system(SystemKind::TextOnly, paths("a"));
        config.seeds = vec![3, 3];
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::for_system(SystemKind::TextOnly, paths("a"));
        config.seeds.clear();
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::for_system(SystemKind::TextOnly, paths("a"));
        config.lr = Some(LrPolicy {
            base_lr: 0.0,
            warmup_steps: 0,
        });
        assert!(config.validate().is_err());
    }

    #[test]
    fn epoch_picker_prefers_best_then_smallest() {
        assert_eq!(pick_epoch(&[(10, 0.8)]).unwrap(), 10);
        assert_eq!(pick_epoch(&[(5, 0.7), (10, 0.9), (20, 0.8)]).unwrap(), 10);
        assert_eq!(pick_epoch(&[(20, 0.8), (5, 0.8), (10, 0.8)]).unwrap(), 5);
        assert!(pick_epoch(&[]).is_err());
    }

    #[test]
    fn box_summary_follows_the_quantile_convention() {
        let s = box_summary("text_only", &[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.min, 1.0);
        assert_eq!(s.q1, 1.75);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.q3, 3.25);
        assert_eq!(s.max, 4.0);
        let single = box_summary("x", &[0.6]).unwrap();
        assert_eq!(single.q1, 0.6);
        assert_eq!(single.q3, 0.6);
    }

    #[test]
    fn table_and_svg_are_deterministic_text() {
        let record = RunRecord {
            config_hash: "cafe".to_string(),
            system: SystemKind::AudioOnly,
            seeds: vec![0, 1, 2],
            fold_signatures: vec!["sig".to_string()],
            per_seed: Vec::new(),
            aggregate: SeedAggregate {
                av_rec_median: 0.612,
                av_rec_iqr: 0.034,
                av_auc_median: 0.8125,
                av_auc_iqr: 0.021,
                av_rec_values: vec![0.6, 0.612, 0.65],
                av_auc_values: vec![0.79, 0.8125, 0.83],
            },
        };
        let table = render_table(std::slice::from_ref(&record));
        assert!(table.contains("audio_only"));
        assert!(table.contains("61.2 ± 3.4"));
        assert!(table.contains("0.812 ± 0.021"));

        let boxes = vec![
            box_summary("audio_only", &record.aggregate.av_auc_values).unwrap(),
            box_summary("text_only", &[0.7, 0.72, 0.75]).unwrap(),
        ];
        let svg = render_box_svg(&boxes, "AvAUC per seed");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("audio_only"));
        assert_eq!(svg.matches("<rect").count(), 2);
        assert_eq!(svg, render_box_svg(&boxes, "AvAUC per seed"));
    }

    #[test]
    fn seed_mixing_separates_folds() {
        let mixed: Vec<u64> = (0..4).map(|i| mix_seed(7, i)).collect();
        let mut unique = mixed.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 4);
    }
}
