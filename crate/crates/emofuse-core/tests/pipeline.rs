//! End-to-end pipeline checks: synthesize a dataset, cache features and
//! embeddings, run experiments through the harness, and verify learning,
//! resumability, and thread-count independence.

use emofuse_core::dsp::{extract_lld_sequence, write_feature_cache, FrameSpec};
use emofuse_core::embeddings::{pseudo_embedding_store, save_embeddings, PseudoEmbeddingKind};
use emofuse_core::folds::FoldCriterion;
use emofuse_core::harness::{load_run_record, run_experiment, DataPaths, ExperimentConfig, LrPolicy};
use emofuse_core::manifest::save_manifest;
use emofuse_core::models::{load_checkpoint, ModelConfig, SystemKind};
use emofuse_core::synth::{synth_corpus, SynthSpec};
use ndarray::Array2;
use std::path::Path;

const EMBED_DIM: usize = 16;

fn corpus_spec(n: usize, secs: f64) -> SynthSpec {
    SynthSpec {
        n_utterances: n,
        n_speakers: 10,
        n_scripts: 4,
        audio_informativeness: 1.0,
        text_informativeness: 1.0,
        negation_rate: 0.0,
        seed: 42,
        script_style_strength: 0.0,
        improv_rate: 0.0,
        utterance_secs: secs,
    }
}

/// Write manifest, pseudo-static embeddings, and (optionally) the raw
/// feature cache for one synthetic corpus into `data_dir`.
fn build_fixture(data_dir: &Path, spec: &SynthSpec, with_audio: bool) -> DataPaths {
    std::fs::create_dir_all(data_dir).unwrap();
    let corpus = synth_corpus(spec).unwrap();

    let manifest_path = data_dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &corpus.manifest).unwrap();

    let embeddings_path = data_dir.join("embeddings.bin");
    let items = corpus
        .tokens
        .iter()
        .map(|r| (r.id.as_str(), r.tokens.as_slice()));
    let store = pseudo_embedding_store(items, PseudoEmbeddingKind::Static, EMBED_DIM, 7).unwrap();
    save_embeddings(&embeddings_path, &store).unwrap();

    let features_path = data_dir.join("features.bin");
    if with_audio {
        let frame = FrameSpec::default();
        let seqs: Vec<(String, Array2<f32>)> = corpus
            .waves
            .iter()
            .map(|(id, wave)| {
                let seq = extract_lld_sequence(id.clone(), wave, &frame).unwrap();
                (id.clone(), seq.frames)
            })
            .collect();
        let records: Vec<(&str, &Array2<f32>)> =
            seqs.iter().map(|(id, m)| (id.as_str(), m)).collect();
        write_feature_cache(&features_path, &records).unwrap();
    }

    DataPaths {
        manifest: manifest_path,
        features: features_path,
        embeddings: embeddings_path,
        folds: None,
        output_dir: data_dir.join("out"),
    }
}

fn text_config(paths: DataPaths) -> ExperimentConfig {
    let mut config = ExperimentConfig::for_system(SystemKind::TextOnly, paths);
    config.model = ModelConfig::small();
    config.lr = Some(LrPolicy {
        base_lr: 0.002,
        warmup_steps: 10,
    });
    config.epochs = 4;
    config.batch_size = 16;
    config.seeds = vec![0, 1];
    config.fold = FoldCriterion::Rand;
    config.k = 2;
    config
}

#[test]
fn text_system_learns_and_resumes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let paths = build_fixture(&dir.path().join("data"), &corpus_spec(200, 0.25), false);
    let config = text_config(paths.clone());

    let record = run_experiment(&config, 2).unwrap();
    assert!(
        record.aggregate.av_auc_median > 0.8,
        "fully informative cues should be learnable, got AvAUC {}",
        record.aggregate.av_auc_median
    );
    assert_eq!(record.per_seed.len(), 2);
    assert_eq!(record.fold_signatures.len(), 2);

    let run_dir = config.run_dir();
    for artifact in [
        "config.json",
        "folds.jsonl",
        "reports/metrics.json",
        "reports/report.txt",
        "reports/boxes.json",
        "reports/boxplot.svg",
    ] {
        assert!(run_dir.join(artifact).exists(), "missing {artifact}");
    }
    assert_eq!(load_run_record(&run_dir).unwrap(), record);

    // Resume path: with the score files present, a rerun must load them
    // instead of retraining. Deleting a model checkpoint proves it: the
    // rerun leaves it missing because no training happens.
    let model_ckpt = run_dir.join("models").join("fold0_seed0.ckpt");
    assert!(model_ckpt.exists());
    std::fs::remove_file(&model_ckpt).unwrap();
    let resumed = run_experiment(&config, 2).unwrap();
    assert_eq!(resumed, record);
    assert!(!model_ckpt.exists(), "resume retrained a finished job");

    // Worker count must not leak into results: a fresh run of the same
    // data on one thread produces byte-identical reports.
    let mut solo = config.clone();
    solo.paths.output_dir = dir.path().join("data").join("out-solo");
    let solo_record = run_experiment(&solo, 1).unwrap();
    assert_eq!(solo_record, record);
    let a = std::fs::read(run_dir.join("reports/metrics.json")).unwrap();
    let b = std::fs::read(solo.run_dir().join("reports/metrics.json")).unwrap();
    assert_eq!(a, b, "metrics.json differs across worker counts");
}

#[test]
fn untrained_models_score_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let paths = build_fixture(&dir.path().join("data"), &corpus_spec(200, 0.25), false);
    let mut config = text_config(paths);
    config.epochs = 0;

    let record = run_experiment(&config, 2).unwrap();
    let auc = record.aggregate.av_auc_median;
    assert!(
        (0.35..=0.65).contains(&auc),
        "untrained AvAUC should sit near 0.5, got {auc}"
    );
}

#[test]
fn pretrained_fusion_builds_branch_checkpoints_with_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let paths = build_fixture(&dir.path().join("data"), &corpus_spec(120, 0.4), true);

    let mut config = ExperimentConfig::for_system(SystemKind::EfPt, paths);
    config.model = ModelConfig::small();
    config.epochs = 2;
    config.batch_size = 16;
    config.seeds = vec![0];
    config.k = 2;

    let record = run_experiment(&config, 2).unwrap();
    assert_eq!(record.system, SystemKind::EfPt);

    let run_dir = config.run_dir();
    for fold in 0..2 {
        for kind in [SystemKind::TextOnly, SystemKind::AudioOnly] {
            let path = run_dir
                .join("branches")
                .join(format!("{}_fold{fold}_seed0.ckpt", kind.name()));
            let ckpt = load_checkpoint(&path).unwrap();
            assert_eq!(ckpt.header.kind, kind);
            assert_eq!(ckpt.header.lineage.fold_index, fold);
            assert_eq!(ckpt.header.lineage.seed, 0);
            assert_eq!(ckpt.header.lineage.config_hash, record.config_hash);
            assert_eq!(
                ckpt.header.lineage.fold_signature,
                record.fold_signatures[fold]
            );
        }
        let main = run_dir
            .join("models")
            .join(format!("fold{fold}_seed0.ckpt"));
        let ckpt = load_checkpoint(&main).unwrap();
        assert_eq!(ckpt.header.kind, SystemKind::EfPt);
    }

    // A rerun reuses both the scores and the branch checkpoints.
    let resumed = run_experiment(&config, 1).unwrap();
    assert_eq!(resumed, record);
}
