//! Synthetic bimodal corpus generation.
//!
//! Produces waveforms whose pitch and energy statistics depend on the
//! emotion label, token lists whose cue words depend on the label (with
//! optional negation that flips the surface cue), and a manifest with
//! round-robin speaker, session, and script assignments so grouping
//! constraints can be exercised. Everything is a pure function of the
//! seed.
//!
//! A negation marker only flips the cue when it stands ahead of it;
//! unflipped cues are followed by a decoy marker at the same rate, so
//! the marker's presence in the bag of tokens carries no information and
//! only its position relative to the cue decides the reading.

use crate::error::{Error, Result};
use crate::manifest::{
    manifest_to_string, EmotionLabel, Manifest, UtteranceRecord, IMPROV_SCRIPT, NUM_CLASSES,
};
use crate::util::{bernoulli, derive_rng, shuffle, standard_normal, uniform_below, Rng};
use crate::wav::{write_wav, Waveform};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Fundamental frequency in Hz keyed by class, chosen well inside the
/// pitch tracker's 60..500 Hz search band.
const CLASS_F0: [f64; NUM_CLASSES] = [240.0, 130.0, 320.0, 180.0];

/// Peak amplitude keyed by class.
const CLASS_AMP: [f64; NUM_CLASSES] = [0.55, 0.2, 0.85, 0.4];

const SAMPLE_RATE: u32 = 16_000;

const FILLER_VOCAB: usize = 20;
const STYLE_TOKENS_PER_SCRIPT: usize = 12;
const LINES_PER_CELL: usize = 2;

/// Generation parameters. Informativeness values control how often each
/// modality's class cue matches the true label (the remainder is
/// resampled uniformly); the negation rate controls how often the text
/// cue is expressed as a negated opposite, and equally how often an
/// unnegated cue is trailed by a decoy marker; the script style strength
/// controls how often a scripted utterance repeats one of its script's
/// fixed class-keyed token lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub n_scripts: usize,
    pub audio_informativeness: f64,
    pub text_informativeness: f64,
    pub negation_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub script_style_strength: f64,
    #[serde(default)]
    pub improv_rate: f64,
    #[serde(default = "default_utterance_secs")]
    pub utterance_secs: f64,
}

fn default_utterance_secs() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances < NUM_CLASSES {
            return Err(Error::Config(format!(
                "need at least {NUM_CLASSES} utterances, got {}",
                self.n_utterances
            )));
        }
        if self.n_speakers == 0 || self.n_scripts == 0 {
            return Err(Error::Config(
                "need at least one speaker and one script".to_string(),
            ));
        }
        for (name, v) in [
            ("audio_informativeness", self.audio_informativeness),
            ("text_informativeness", self.text_informativeness),
            ("negation_rate", self.negation_rate),
            ("script_style_strength", self.script_style_strength),
            ("improv_rate", self.improv_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(self.utterance_secs >= 0.1) {
            return Err(Error::Config(format!(
                "utterance_secs {} below 0.1",
                self.utterance_secs
            )));
        }
        Ok(())
    }
}

/// One utterance's token list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub tokens: Vec<String>,
}

/// A generated corpus held in memory: manifest plus aligned waveforms
/// and token lists.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub waves: Vec<(String, Waveform)>,
    pub tokens: Vec<TokenRecord>,
}

/// The class whose cue a negation points at: negating happy yields sad
/// and vice versa, negating angry yields neutral and vice versa.
pub fn negation_opposite(label: EmotionLabel) -> EmotionLabel {
    match label {
        EmotionLabel::Happy => EmotionLabel::Sad,
        EmotionLabel::Sad => EmotionLabel::Happy,
        EmotionLabel::Angry => EmotionLabel::Neutral,
        EmotionLabel::Neutral => EmotionLabel::Angry,
    }
}

pub fn cue_token(label: EmotionLabel) -> String {
    format!("cue_{}", label.name())
}

/// The negation marker. Ahead of a cue token (within two positions) it
/// flips the cue's meaning; after a cue it is an inert decoy.
pub const NEGATION_TOKEN: &str = "neg";

fn random_label(rng: &mut Rng) -> EmotionLabel {
    EmotionLabel::from_index(uniform_below(rng, NUM_CLASSES as u64) as usize)
        .expect("index below class count")
}

fn filler(rng: &mut Rng) -> String {
    format!("filler_{:02}", uniform_below(rng, FILLER_VOCAB as u64))
}

/// Fixed token lines per (script, class) cell, built once per corpus so
/// same-script same-class utterances can repeat each other verbatim.
fn build_line_banks(n_scripts: usize, seed: u64) -> Vec<Vec<Vec<Vec<String>>>> {
    let mut banks = Vec::with_capacity(n_scripts);
    for script in 0..n_scripts {
        let mut per_class = Vec::with_capacity(NUM_CLASSES);
        for class in 0..NUM_CLASSES {
            let tag = format!("lines:{script}:{class}");
            let mut rng = derive_rng(seed, &["synth", &tag]);
            let mut lines = Vec::with_capacity(LINES_PER_CELL);
            for _ in 0..LINES_PER_CELL {
                let len = 3 + uniform_below(&mut rng, 3) as usize;
                let line: Vec<String> = (0..len)
                    .map(|_| {
                        format!(
                            "style_s{script:02}_{:02}",
                            uniform_below(&mut rng, STYLE_TOKENS_PER_SCRIPT as u64)
                        )
                    })
                    .collect();
                lines.push(line);
            }
            per_class.push(lines);
        }
        banks.push(per_class);
    }
    banks
}

fn synth_wave(
    label_f0: f64,
    label_amp: f64,
    speaker_factor: f64,
    secs: f64,
    rng: &mut Rng,
) -> Waveform {
    let f0 = label_f0 * speaker_factor * (1.0 + 0.02 * standard_normal(rng));
    let amp = (label_amp * (1.0 + 0.1 * standard_normal(rng))).clamp(0.05, 0.95);
    let phases: Vec<f64> = (0..3)
        .map(|_| crate::util::uniform_f64(rng) * std::f64::consts::TAU)
        .collect();
    let n = (secs * SAMPLE_RATE as f64).round() as usize;
    let fade = (SAMPLE_RATE as f64 * 0.01) as usize;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / SAMPLE_RATE as f64;
        let mut v = 0.0;
        for (h, phase) in phases.iter().enumerate() {
            let harmonic = (h + 1) as f64;
            let gain = 0.5f64.powi(h as i32);
            v += gain * (std::f64::consts::TAU * f0 * harmonic * t + phase).sin();
        }
        v = amp * v / 1.75 + 0.01 * standard_normal(rng);
        let mut envelope = 1.0;
        if i < fade {
            envelope = i as f64 / fade as f64;
        }
        if n - 1 - i < fade {
            envelope = envelope.min((n - 1 - i) as f64 / fade as f64);
        }
        samples.push(v * envelope);
    }
    Waveform {
        sample_rate: SAMPLE_RATE,
        samples,
    }
}

fn synth_tokens(
    label: EmotionLabel,
    script: Option<usize>,
    spec: &SynthSpec,
    banks: &[Vec<Vec<Vec<String>>>],
    rng: &mut Rng,
) -> Vec<String> {
    let cue_class = if bernoulli(rng, spec.text_informativeness) {
        label
    } else {
        random_label(rng)
    };
    let mut fragment: Vec<String> = Vec::new();
    if bernoulli(rng, spec.negation_rate) {
        fragment.push(NEGATION_TOKEN.to_string());
        if bernoulli(rng, 0.5) {
            fragment.push(filler(rng));
        }
        fragment.push(cue_token(negation_opposite(cue_class)));
    } else {
        fragment.push(cue_token(cue_class));
        // Mirror the negated shape after the cue so marker presence and
        // utterance length are balanced across both readings.
        if bernoulli(rng, spec.negation_rate) {
            if bernoulli(rng, 0.5) {
                fragment.push(filler(rng));
            }
            fragment.push(NEGATION_TOKEN.to_string());
        }
    }

    let mut prefix: Vec<String> = Vec::new();
    if let Some(script) = script {
        if bernoulli(rng, spec.script_style_strength) {
            let lines = &banks[script][label.index()];
            let line = &lines[uniform_below(rng, lines.len() as u64) as usize];
            prefix.extend(line.iter().cloned());
        }
    }
    let n_lead = 1 + uniform_below(rng, 3) as usize;
    let n_tail = 1 + uniform_below(rng, 3) as usize;
    let mut tokens = prefix;
    for _ in 0..n_lead {
        tokens.push(filler(rng));
    }
    tokens.extend(fragment);
    for _ in 0..n_tail {
        tokens.push(filler(rng));
    }
    tokens
}

/// Generate a corpus in memory. Utterance `i` has class `i mod 4`;
/// speakers cycle next, then scripts, so every (class, speaker) pair is
/// covered before any script repeats. Sessions pair consecutive
/// speakers. A bernoulli draw at `improv_rate` reassigns an utterance's
/// script to the improvisation sentinel.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let banks = build_line_banks(spec.n_scripts, spec.seed);
    let mut rng = derive_rng(spec.seed, &["synth", "corpus"]);
    let speaker_factors: Vec<f64> = (0..spec.n_speakers)
        .map(|_| 1.0 + 0.06 * standard_normal(&mut rng))
        .collect();

    let mut records = Vec::with_capacity(spec.n_utterances);
    let mut waves = Vec::with_capacity(spec.n_utterances);
    let mut tokens = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let label = EmotionLabel::from_index(i % NUM_CLASSES).expect("class index");
        let j = i / NUM_CLASSES;
        let speaker = j % spec.n_speakers;
        let script_slot = (j / spec.n_speakers) % spec.n_scripts;
        let improv = bernoulli(&mut rng, spec.improv_rate);
        let script = if improv { None } else { Some(script_slot) };

        let audio_class = if bernoulli(&mut rng, spec.audio_informativeness) {
            label
        } else {
            random_label(&mut rng)
        };
        let wave = synth_wave(
            CLASS_F0[audio_class.index()],
            CLASS_AMP[audio_class.index()],
            speaker_factors[speaker],
            spec.utterance_secs,
            &mut rng,
        );
        let toks = synth_tokens(label, script, spec, &banks, &mut rng);

        let id = format!("utt_{i:05}");
        records.push(UtteranceRecord {
            id: id.clone(),
            speaker_id: format!("sp{speaker:02}"),
            session_id: format!("ses{:02}", speaker / 2),
            script_id: script
                .map(|s| format!("scr{s:02}"))
                .unwrap_or_else(|| IMPROV_SCRIPT.to_string()),
            raw_label: label.name().to_string(),
            label,
            audio_ref: format!("audio/{id}.wav"),
            text_ref: id.clone(),
        });
        waves.push((id.clone(), wave));
        tokens.push(TokenRecord { id, tokens: toks });
    }
    let manifest = Manifest {
        name: format!("synth-{}", spec.seed),
        records,
    };
    manifest.require_all_classes()?;
    Ok(SynthCorpus {
        manifest,
        waves,
        tokens,
    })
}

/// Serialize token records as line-delimited JSON.
pub fn tokens_to_string(records: &[TokenRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("token record serialization"));
        out.push('\n');
    }
    out
}

/// Parse line-delimited token records.
pub fn parse_tokens(text: &str) -> Result<Vec<TokenRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TokenRecord = serde_json::from_str(line)
            .map_err(|e| Error::format("tokens", format!("line {}: {e}", lineno + 1)))?;
        records.push(r);
    }
    Ok(records)
}

/// Read a token file written by [`save_tokens`].
pub fn load_tokens(path: impl AsRef<Path>) -> Result<Vec<TokenRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&text)
}

/// Write token records as line-delimited JSON.
pub fn save_tokens(path: impl AsRef<Path>, records: &[TokenRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(tokens_to_string(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Generate a corpus and write it under `out_dir`: `manifest.jsonl`,
/// `tokens.jsonl`, and one WAV per utterance in `audio/`. Returns the
/// manifest. Byte-identical for a fixed spec.
pub fn synth_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let corpus = synth_corpus(spec)?;
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    for (id, wave) in &corpus.waves {
        write_wav(audio_dir.join(format!("{id}.wav")), wave)?;
    }
    save_tokens(out_dir.join("tokens.jsonl"), &corpus.tokens)?;
    let manifest_path = out_dir.join("manifest.jsonl");
    fs::write(&manifest_path, manifest_to_string(&corpus.manifest))
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(corpus.manifest)
}

/// Split utterance ids into disjoint train and test sets with a shuffled
/// per-class round-robin, keeping both sides class-balanced. Useful for
/// quick experiments outside the fold machinery.
pub fn balanced_split(
    manifest: &Manifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); NUM_CLASSES];
    for r in &manifest.records {
        by_class[r.label.index()].push(&r.id);
    }
    let mut rng = derive_rng(seed, &["synth", "split"]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ids in &mut by_class {
        ids.sort_unstable();
        shuffle(&mut rng, ids);
        let n_test = ((ids.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.clamp(1, ids.len().saturating_sub(1).max(1));
        for (pos, id) in ids.iter().enumerate() {
            if pos < n_test {
                test.push(id.to_string());
            } else {
                train.push(id.to_string());
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
