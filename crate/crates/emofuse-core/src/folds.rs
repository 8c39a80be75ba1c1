//! Cross-validation fold construction under grouping criteria, plus a
//! leakage audit that reports speaker and script overlap between each
//! fold's train and test sides.

use crate::error::{Error, Result};
use crate::manifest::{Manifest, UtteranceRecord, IMPROV_SCRIPT};
use crate::util::{derive_rng, sha256_hex, shuffle};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

/// How utterances are grouped when splitting into folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FoldCriterion {
    /// Uniform random split, no grouping.
    Rand,
    /// One fold per session: both of a session's speakers are held out
    /// together.
    Sp,
    /// One fold per session, tested only on the designated script; that
    /// script is excluded from every training pool.
    SpSc {
        test_script: String,
        /// Whether improvised utterances join the training pools. They
        /// are never eligible for SP&SC test sets.
        #[serde(default = "default_true")]
        train_includes_improv: bool,
    },
}

fn default_true() -> bool {
    true
}

impl FoldCriterion {
    pub fn name(&self) -> &'static str {
        match self {
            FoldCriterion::Rand => "rand",
            FoldCriterion::Sp => "sp",
            FoldCriterion::SpSc { .. } => "sp_sc",
        }
    }
}

/// One train/test split. Id lists are sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// A complete k-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: Vec<Fold>,
}

impl FoldAssignment {
    /// Check structural invariants: per-fold train/test disjointness and
    /// no utterance tested in more than one fold.
    pub fn validate(&self) -> Result<()> {
        let mut tested: HashSet<&str> = HashSet::new();
        for fold in &self.folds {
            let train: HashSet<&str> = fold.train_ids.iter().map(String::as_str).collect();
            for id in &fold.test_ids {
                if train.contains(id.as_str()) {
                    return Err(Error::Folds(format!(
                        "fold {} has '{id}' in both train and test",
                        fold.index
                    )));
                }
                if !tested.insert(id) {
                    return Err(Error::Folds(format!(
                        "utterance '{id}' is tested in more than one fold"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Content hash of one fold's id lists, for checkpoint lineage checks.
pub fn fold_signature(fold: &Fold) -> String {
    let mut text = format!("fold:{}\ntrain:\n", fold.index);
    for id in &fold.train_ids {
        text.push_str(id);
        text.push('\n');
    }
    text.push_str("test:\n");
    for id in &fold.test_ids {
        text.push_str(id);
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

fn sorted(mut ids: Vec<String>) -> Vec<String> {
    ids.sort();
    ids
}

/// Distinct session ids in lexicographic order, with their records.
fn sessions_in_order(manifest: &Manifest) -> Vec<(String, Vec<&UtteranceRecord>)> {
    let mut by_session: HashMap<&str, Vec<&UtteranceRecord>> = HashMap::new();
    for r in &manifest.records {
        by_session.entry(&r.session_id).or_default().push(r);
    }
    let mut names: Vec<&str> = by_session.keys().copied().collect();
    names.sort_unstable();
    names
        .into_iter()
        .map(|name| (name.to_string(), by_session.remove(name).unwrap()))
        .collect()
}

/// Split a manifest into k folds under the given criterion.
///
/// RAND shuffles lexicographically sorted ids with a seed-keyed
/// permutation and deals them into k nearly equal test shares. SP and
/// SP&SC require k to equal the session count and hold out one session
/// per fold; SP&SC additionally restricts tests to the designated script
/// and drops that script from every training pool.
pub fn make_folds(
    manifest: &Manifest,
    criterion: &FoldCriterion,
    k: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Folds("fold count must be positive".to_string()));
    }
    let assignment = match criterion {
        FoldCriterion::Rand => make_rand_folds(manifest, k, seed)?,
        FoldCriterion::Sp => make_session_folds(manifest, k, None, true)?,
        FoldCriterion::SpSc {
            test_script,
            train_includes_improv,
        } => make_session_folds(manifest, k, Some(test_script), *train_includes_improv)?,
    };
    for fold in &assignment.folds {
        if fold.test_ids.is_empty() {
            return Err(Error::Folds(format!("fold {} has an empty test set", fold.index)));
        }
        if fold.train_ids.is_empty() {
            return Err(Error::Folds(format!("fold {} has an empty train set", fold.index)));
        }
    }
    assignment.validate()?;
    Ok(assignment)
}

fn make_rand_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut ids: Vec<String> = manifest.records.iter().map(|r| r.id.clone()).collect();
    ids.sort();
    if ids.len() < k {
        return Err(Error::Folds(format!(
            "cannot split {} utterances into {k} folds",
            ids.len()
        )));
    }
    let mut rng = derive_rng(seed, &["folds", "rand"]);
    shuffle(&mut rng, &mut ids);

    let n = ids.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0usize;
    for index in 0..k {
        let size = base + usize::from(index < extra);
        let test: HashSet<&str> = ids[start..start + size].iter().map(String::as_str).collect();
        let test_ids = sorted(test.iter().map(|s| s.to_string()).collect());
        let train_ids = sorted(
            ids.iter()
                .filter(|id| !test.contains(id.as_str()))
                .cloned()
                .collect(),
        );
        folds.push(Fold {
            index,
            train_ids,
            test_ids,
        });
        start += size;
    }
    Ok(FoldAssignment { folds })
}

fn make_session_folds(
    manifest: &Manifest,
    k: usize,
    test_script: Option<&str>,
    train_includes_improv: bool,
) -> Result<FoldAssignment> {
    let sessions = sessions_in_order(manifest);
    if sessions.len() != k {
        return Err(Error::Folds(format!(
            "k = {k} but the manifest has {} sessions",
            sessions.len()
        )));
    }
    if let Some(script) = test_script {
        if script == IMPROV_SCRIPT {
            return Err(Error::Folds(
                "improvised material cannot be the designated test script".to_string(),
            ));
        }
        for (name, records) in &sessions {
            if !records.iter().any(|r| r.script_id == script) {
                return Err(Error::Folds(format!(
                    "session '{name}' has no utterances of test script '{script}'"
                )));
            }
        }
    }

    let mut folds = Vec::with_capacity(k);
    for (index, (session, _)) in sessions.iter().enumerate() {
        let mut train_ids = Vec::new();
        let mut test_ids = Vec::new();
        for r in &manifest.records {
            let held_out = r.session_id == *session;
            match test_script {
                None => {
                    if held_out {
                        test_ids.push(r.id.clone());
                    } else {
                        train_ids.push(r.id.clone());
                    }
                }
                Some(script) => {
                    let is_improv = r.script_id == IMPROV_SCRIPT;
                    if held_out {
                        if r.script_id == script {
                            test_ids.push(r.id.clone());
                        }
                    } else if r.script_id != script && (!is_improv || train_includes_improv) {
                        train_ids.push(r.id.clone());
                    }
                }
            }
        }
        folds.push(Fold {
            index,
            train_ids: sorted(train_ids),
            test_ids: sorted(test_ids),
        });
    }
    Ok(FoldAssignment { folds })
}

/// Speaker and script overlap between one fold's train and test sides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldLeakage {
    pub fold: usize,
    pub shared_speakers: Vec<String>,
    pub shared_scripts: Vec<String>,
}

/// Audit outcome across all folds. `clean` means no fold shares a
/// speaker or a script between train and test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub per_fold: Vec<FoldLeakage>,
    pub clean: bool,
}

impl LeakageReport {
    /// Render as a fixed-width text table, one row per fold.
    pub fn to_table(&self) -> String {
        let mut out = String::from("fold  shared speakers            shared scripts\n");
        for f in &self.per_fold {
            let speakers = if f.shared_speakers.is_empty() {
                "-".to_string()
            } else {
                f.shared_speakers.join(",")
            };
            let scripts = if f.shared_scripts.is_empty() {
                "-".to_string()
            } else {
                f.shared_scripts.join(",")
            };
            out.push_str(&format!("{:<5} {:<26} {}\n", f.fold, speakers, scripts));
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.clean { "clean" } else { "LEAKAGE" }
        ));
        out
    }
}

/// Compute exact speaker and script intersections between each fold's
/// train and test sides. Improvised utterances participate in script
/// accounting under their shared group id.
pub fn audit_leakage(assignment: &FoldAssignment, manifest: &Manifest) -> Result<LeakageReport> {
    let by_id: HashMap<&str, &UtteranceRecord> =
        manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let groups = |ids: &[String]| -> Result<(BTreeSet<String>, BTreeSet<String>)> {
        let mut speakers = BTreeSet::new();
        let mut scripts = BTreeSet::new();
        for id in ids {
            let r = by_id.get(id.as_str()).ok_or_else(|| {
                Error::Folds(format!("fold references unknown utterance '{id}'"))
            })?;
            speakers.insert(r.speaker_id.clone());
            scripts.insert(r.script_id.clone());
        }
        Ok((speakers, scripts))
    };

    let mut per_fold = Vec::with_capacity(assignment.folds.len());
    let mut clean = true;
    for fold in &assignment.folds {
        let (train_speakers, train_scripts) = groups(&fold.train_ids)?;
        let (test_speakers, test_scripts) = groups(&fold.test_ids)?;
        let shared_speakers: Vec<String> =
            train_speakers.intersection(&test_speakers).cloned().collect();
        let shared_scripts: Vec<String> =
            train_scripts.intersection(&test_scripts).cloned().collect();
        if !shared_speakers.is_empty() || !shared_scripts.is_empty() {
            clean = false;
        }
        per_fold.push(FoldLeakage {
            fold: fold.index,
            shared_speakers,
            shared_scripts,
        });
    }
    Ok(LeakageReport { per_fold, clean })
}

/// Write a fold assignment as line-delimited JSON, one fold per line.
pub fn save_folds(path: impl AsRef<Path>, assignment: &FoldAssignment) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for fold in &assignment.folds {
        out.push_str(&serde_json::to_string(fold).expect("fold serialization"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Load and validate a fold assignment written by [`save_folds`].
pub fn load_folds(path: impl AsRef<Path>) -> Result<FoldAssignment> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut folds = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fold: Fold = serde_json::from_str(line)
            .map_err(|e| Error::format("fold file", format!("line {}: {e}", lineno + 1)))?;
        folds.push(fold);
    }
    if folds.is_empty() {
        return Err(Error::format("fold file", "no folds".to_string()));
    }
    let assignment = FoldAssignment { folds };
    assignment.validate()?;
    Ok(assignment)
}
