//! Dataset manifests: labeled utterance records, label mapping, and
//! class-frequency weights for cost-sensitive training.
//!
//! A manifest file is line-delimited JSON, one record per line, with named
//! fields `id, speaker_id, session_id, script_id, raw_label, audio_ref,
//! text_ref`. Field order is irrelevant and unknown fields are ignored.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

/// Script id used for improvised (unscripted) material. All improvised
/// utterances share this one group id for leakage accounting.
pub const IMPROV_SCRIPT: &str = "improv";

/// The four target emotion classes, with a stable 0..3 encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Happy = 0,
    Sad = 1,
    Angry = 2,
    Neutral = 3,
}

pub const NUM_CLASSES: usize = 4;

impl EmotionLabel {
    pub const ALL: [EmotionLabel; NUM_CLASSES] = [
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
        EmotionLabel::Neutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<EmotionLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Neutral => "neutral",
        }
    }
}

/// Result of mapping a raw annotation string onto the target classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappedLabel {
    Keep(EmotionLabel),
    Discard,
}

/// Map a raw annotation onto one of the four target classes, or discard.
///
/// Total and deterministic: any input string yields a value, never an
/// error. Excitement is folded into happy; annotations outside the target
/// set (including no-agreement markers) are discarded.
pub fn map_label(raw_label: &str) -> MappedLabel {
    match raw_label.trim().to_ascii_lowercase().as_str() {
        "happy" | "happiness" | "hap" | "excitement" | "excited" | "exc" => {
            MappedLabel::Keep(EmotionLabel::Happy)
        }
        "sad" | "sadness" => MappedLabel::Keep(EmotionLabel::Sad),
        "angry" | "anger" | "ang" => MappedLabel::Keep(EmotionLabel::Angry),
        "neutral" | "neu" => MappedLabel::Keep(EmotionLabel::Neutral),
        _ => MappedLabel::Discard,
    }
}

/// One labeled utterance. `label` is the mapped target class; `raw_label`
/// is kept verbatim for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker_id: String,
    pub session_id: String,
    pub script_id: String,
    pub raw_label: String,
    pub label: EmotionLabel,
    pub audio_ref: String,
    pub text_ref: String,
}

/// Wire form of a record: exactly the named fields, label derived on load.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine<'a> {
    id: &'a str,
    speaker_id: &'a str,
    session_id: &'a str,
    script_id: &'a str,
    raw_label: &'a str,
    audio_ref: &'a str,
    text_ref: &'a str,
}

/// An ordered collection of utterance records.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub records: Vec<UtteranceRecord>,
}

/// Outcome of loading a manifest: surviving records plus a count of
/// records whose raw label mapped outside the target classes.
#[derive(Debug, Clone)]
pub struct ManifestLoad {
    pub manifest: Manifest,
    pub discarded: usize,
}

impl Manifest {
    /// Look up a record by utterance id.
    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Per-class record counts, indexed by class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }

    /// Distinct session ids in first-appearance order.
    pub fn session_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.session_id.clone()) {
                out.push(r.session_id.clone());
            }
        }
        out
    }

    /// A sub-manifest restricted to the given ids, in this manifest's order.
    pub fn subset(&self, ids: &HashSet<String>) -> Manifest {
        Manifest {
            name: self.name.clone(),
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(&r.id))
                .cloned()
                .collect(),
        }
    }

    /// Validate that all four classes are present (required for training).
    pub fn require_all_classes(&self) -> Result<()> {
        let counts = self.class_counts();
        for label in EmotionLabel::ALL {
            if counts[label.index()] == 0 {
                return Err(Error::Manifest(format!(
                    "manifest '{}' has no '{}' records",
                    self.name,
                    label.name()
                )));
            }
        }
        Ok(())
    }
}

/// Load a manifest from a line-delimited file.
///
/// Records whose raw label maps to [`MappedLabel::Discard`] are excluded
/// and counted. Duplicate ids, missing fields, and an empty survivor set
/// are errors.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ManifestLoad> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".to_string());
    parse_manifest(&text, &name)
}

/// Parse manifest text (one JSON record per line; blank lines skipped).
pub fn parse_manifest(text: &str, name: &str) -> Result<ManifestLoad> {
    let mut records = Vec::new();
    let mut discarded = 0usize;
    let mut seen_ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let wire: RecordLine = serde_json::from_str(line).map_err(|e| {
            Error::format("manifest", format!("line {}: {e}", lineno + 1))
        })?;
        if !seen_ids.insert(wire.id.to_string()) {
            return Err(Error::Manifest(format!(
                "duplicate utterance id '{}' (line {})",
                wire.id,
                lineno + 1
            )));
        }
        match map_label(wire.raw_label) {
            MappedLabel::Keep(label) => records.push(UtteranceRecord {
                id: wire.id.to_string(),
                speaker_id: wire.speaker_id.to_string(),
                session_id: wire.session_id.to_string(),
                script_id: wire.script_id.to_string(),
                raw_label: wire.raw_label.to_string(),
                label,
                audio_ref: wire.audio_ref.to_string(),
                text_ref: wire.text_ref.to_string(),
            }),
            MappedLabel::Discard => discarded += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!(
            "manifest '{name}' has zero surviving records after label filtering"
        )));
    }
    Ok(ManifestLoad {
        manifest: Manifest {
            name: name.to_string(),
            records,
        },
        discarded,
    })
}

/// Serialize a manifest in canonical form (fixed field order, one record
/// per line). `save` followed by `load` round-trips byte-identically.
pub fn manifest_to_string(manifest: &Manifest) -> String {
    let mut out = String::new();
    for r in &manifest.records {
        let wire = RecordLine {
            id: &r.id,
            speaker_id: &r.speaker_id,
            session_id: &r.session_id,
            script_id: &r.script_id,
            raw_label: &r.raw_label,
            audio_ref: &r.audio_ref,
            text_ref: &r.text_ref,
        };
        out.push_str(&serde_json::to_string(&wire).expect("record serialization"));
        out.push('\n');
    }
    out
}

/// Write a manifest to disk in canonical form.
pub fn save_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_string(manifest)).map_err(|e| Error::io(path, e))
}

/// Per-class loss weights, normalized to mean 1 under the empirical class
/// distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: [f64; NUM_CLASSES],
}

impl ClassWeights {
    /// Uniform weights (all 1), for balanced or unweighted training.
    pub fn uniform() -> Self {
        ClassWeights {
            weights: [1.0; NUM_CLASSES],
        }
    }

    pub fn weight(&self, label: EmotionLabel) -> f64 {
        self.weights[label.index()]
    }
}

/// Inverse-frequency class weights: weight_k = N / (K * n_k).
///
/// The normalization keeps the mean weight under the empirical class
/// distribution at exactly 1, so weighting changes relative class
/// emphasis without rescaling the overall loss magnitude.
pub fn class_weights(manifest: &Manifest) -> Result<ClassWeights> {
    let counts = manifest.class_counts();
    let total: usize = counts.iter().sum();
    let mut weights = [0.0f64; NUM_CLASSES];
    for label in EmotionLabel::ALL {
        let n_k = counts[label.index()];
        if n_k == 0 {
            return Err(Error::Manifest(format!(
                "cannot weight classes: no '{}' records",
                label.name()
            )));
        }
        weights[label.index()] = total as f64 / (NUM_CLASSES as f64 * n_k as f64);
    }
    Ok(ClassWeights { weights })
}

/// Records grouped by session id (sorted by session id).
pub fn records_by_session(manifest: &Manifest) -> BTreeMap<String, Vec<&UtteranceRecord>> {
    let mut map: BTreeMap<String, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in &manifest.records {
        map.entry(r.session_id.clone()).or_default().push(r);
    }
    map
}
