//! Acoustic feature extraction.
//!
//! A waveform is cut into overlapping frames and each frame yields 18
//! low-level descriptors: 13 MFCCs, pitch, jitter, shimmer, logHNR, and
//! loudness. Sequences are z-normalized with statistics fitted on training
//! utterances only, and first-order deltas are appended for a final width
//! of 36 per frame.

pub mod mfcc;
pub mod pitch;

use crate::error::{Error, Result};
use crate::wav::Waveform;
use ndarray::Array2;
use std::path::Path;

use mfcc::MfccExtractor;
use pitch::{PitchConfig, PitchDetector};

/// Raw descriptors per frame.
pub const LLD_DIM: usize = 18;
/// Normalized descriptors plus deltas.
pub const FEATURE_DIM: usize = 2 * LLD_DIM;

/// Relative amplitude changes below this are treated as measurement ripple
/// (a window rarely spans an integer number of pitch periods, so frame RMS
/// wobbles slightly even for a perfectly steady tone) and report shimmer 0.
pub const SHIMMER_DEAD_BAND: f64 = 0.02;

const HNR_CLAMP_DB: f64 = 60.0;
const STD_FLOOR: f64 = 1e-6;
const CACHE_MAGIC: &[u8; 8] = b"EMFFEAT1";

/// Framing parameters. Inputs at a different sample rate are rejected, not
/// resampled.
#[derive(Debug, Clone)]
pub struct FrameSpec {
    pub sample_rate: u32,
    pub window_secs: f64,
    pub hop_secs: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            sample_rate: 16_000,
            window_secs: 0.032,
            hop_secs: 0.010,
        }
    }
}

impl FrameSpec {
    pub fn window_len(&self) -> usize {
        (self.window_secs * self.sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.hop_secs * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.window_len();
        let hop = self.hop_len();
        if win < 64 {
            return Err(Error::Dsp(format!("window of {win} samples is too short")));
        }
        if hop == 0 || hop > win {
            return Err(Error::Dsp(format!(
                "hop {hop} must be in 1..={win} samples"
            )));
        }
        Ok(())
    }
}

/// Slice a signal into overlapping frames. No padding: the tail that does
/// not fill a whole window is dropped.
pub fn frame_signal<'a>(samples: &'a [f64], spec: &FrameSpec) -> Result<Vec<&'a [f64]>> {
    spec.validate()?;
    let win = spec.window_len();
    let hop = spec.hop_len();
    if samples.len() < win {
        return Err(Error::Dsp(format!(
            "signal of {} samples is shorter than one {win}-sample window",
            samples.len()
        )));
    }
    let count = (samples.len() - win) / hop + 1;
    Ok((0..count).map(|i| &samples[i * hop..i * hop + win]).collect())
}

/// The 18 descriptors for one frame.
///
/// Flattened order: mfcc[0..13], pitch_hz, jitter, shimmer, log_hnr,
/// loudness.
#[derive(Debug, Clone, Copy)]
pub struct LldFrame {
    pub mfcc: [f64; mfcc::NUM_COEFFS],
    /// Fundamental frequency in Hz; 0 on unvoiced frames.
    pub pitch_hz: f64,
    /// Relative change of the pitch period between consecutive voiced
    /// frames; 0 elsewhere.
    pub jitter: f64,
    /// Relative change of frame RMS between consecutive voiced frames,
    /// gated by [`SHIMMER_DEAD_BAND`]; 0 elsewhere.
    pub shimmer: f64,
    /// 10·log10(r / (1 − r)) at the pitch lag, clamped to ±60 dB; −60 on
    /// unvoiced frames.
    pub log_hnr: f64,
    /// Frame RMS raised to the 0.3 power.
    pub loudness: f64,
}

impl LldFrame {
    pub fn to_array(self) -> [f64; LLD_DIM] {
        let mut out = [0.0; LLD_DIM];
        out[..mfcc::NUM_COEFFS].copy_from_slice(&self.mfcc);
        out[13] = self.pitch_hz;
        out[14] = self.jitter;
        out[15] = self.shimmer;
        out[16] = self.log_hnr;
        out[17] = self.loudness;
        out
    }
}

/// Extract the per-frame descriptors for a whole waveform.
pub fn extract_lld(wave: &Waveform, spec: &FrameSpec) -> Result<Vec<LldFrame>> {
    if wave.sample_rate != spec.sample_rate {
        return Err(Error::Dsp(format!(
            "waveform at {} Hz, expected {} Hz (resampling is not supported)",
            wave.sample_rate, spec.sample_rate
        )));
    }
    let frames = frame_signal(&wave.samples, spec)?;
    let sr = spec.sample_rate as f64;
    let win = spec.window_len();
    let mfcc_ex = MfccExtractor::new(sr, win);
    let detector = PitchDetector::new(sr, win, PitchConfig::default());

    let mut mfccs = Vec::with_capacity(frames.len());
    let mut pitches = Vec::with_capacity(frames.len());
    let mut rms_vals = Vec::with_capacity(frames.len());
    for frame in &frames {
        mfccs.push(mfcc_ex.extract(frame));
        pitches.push(detector.analyze(frame));
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        rms_vals.push((energy / frame.len() as f64).sqrt());
    }

    let mut out = Vec::with_capacity(frames.len());
    for t in 0..frames.len() {
        let p = pitches[t];
        let prev_voiced = t > 0 && pitches[t - 1].voiced;

        let jitter = if p.voiced && prev_voiced {
            let t0 = p.period_samples as f64 / sr;
            let t0_prev = pitches[t - 1].period_samples as f64 / sr;
            (t0 - t0_prev).abs() / ((t0 + t0_prev) / 2.0)
        } else {
            0.0
        };

        let shimmer = if p.voiced && prev_voiced {
            let (a, b) = (rms_vals[t], rms_vals[t - 1]);
            let mean = (a + b) / 2.0;
            let raw = if mean > 0.0 { (a - b).abs() / mean } else { 0.0 };
            if raw < SHIMMER_DEAD_BAND {
                0.0
            } else {
                raw
            }
        } else {
            0.0
        };

        let log_hnr = if p.voiced {
            let r = p.correlation;
            if r >= 1.0 {
                HNR_CLAMP_DB
            } else if r <= 0.0 {
                -HNR_CLAMP_DB
            } else {
                (10.0 * (r / (1.0 - r)).log10()).clamp(-HNR_CLAMP_DB, HNR_CLAMP_DB)
            }
        } else {
            -HNR_CLAMP_DB
        };

        out.push(LldFrame {
            mfcc: mfccs[t],
            pitch_hz: p.pitch_hz,
            jitter,
            shimmer,
            log_hnr,
            loudness: rms_vals[t].powf(0.3),
        });
    }
    Ok(out)
}

/// Raw descriptor sequence for one utterance, T × 18, stored in single
/// precision so the in-memory and cached paths are bit-identical.
#[derive(Debug, Clone)]
pub struct LldSequence {
    pub id: String,
    pub frames: Array2<f32>,
}

impl LldSequence {
    pub fn new(id: impl Into<String>, frames: Array2<f32>) -> Result<Self> {
        if frames.ncols() != LLD_DIM || frames.nrows() == 0 {
            return Err(Error::shape(
                "LldSequence::new",
                format!("want T×{LLD_DIM} with T ≥ 1, got {:?}", frames.dim()),
            ));
        }
        Ok(LldSequence {
            id: id.into(),
            frames,
        })
    }

    pub fn from_frames(id: impl Into<String>, frames: &[LldFrame]) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len() * LLD_DIM);
        for f in frames {
            data.extend(f.to_array().iter().map(|&v| v as f32));
        }
        let arr = Array2::from_shape_vec((frames.len(), LLD_DIM), data)
            .map_err(|e| Error::shape("LldSequence::from_frames", e.to_string()))?;
        LldSequence::new(id, arr)
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Extract and package the descriptors for one utterance.
pub fn extract_lld_sequence(
    id: impl Into<String>,
    wave: &Waveform,
    spec: &FrameSpec,
) -> Result<LldSequence> {
    let frames = extract_lld(wave, spec)?;
    LldSequence::from_frames(id, &frames)
}

/// Per-dimension z-normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Fit pooled mean and standard deviation over every frame of the given
/// sequences (population convention, std floored at 1e-6).
///
/// Sequences are reduced in utterance-id order, so the result does not
/// depend on the order the caller assembled them in.
pub fn fit_norm_stats(sequences: &[&LldSequence]) -> Result<NormStats> {
    if sequences.is_empty() {
        return Err(Error::Dsp("cannot fit normalization on an empty pool".into()));
    }
    let mut ordered: Vec<&&LldSequence> = sequences.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let total: usize = ordered.iter().map(|s| s.len()).sum();
    let n = total as f64;

    let mut mean = vec![0.0f64; LLD_DIM];
    for seq in &ordered {
        for row in seq.frames.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
    }
    for m in &mut mean {
        *m /= n;
    }

    let mut ssd = vec![0.0f64; LLD_DIM];
    for seq in &ordered {
        for row in seq.frames.rows() {
            for (s, (&v, m)) in ssd.iter_mut().zip(row.iter().zip(&mean)) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
    }
    let std = ssd
        .iter()
        .map(|s| (s / n).sqrt().max(STD_FLOOR))
        .collect();

    Ok(NormStats { mean, std })
}

/// Normalized sequence with first-order deltas, T × 36.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub id: String,
    pub frames: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, frames: Array2<f32>) -> Result<Self> {
        if frames.ncols() != FEATURE_DIM || frames.nrows() == 0 {
            return Err(Error::shape(
                "FeatureSequence::new",
                format!("want T×{FEATURE_DIM} with T ≥ 1, got {:?}", frames.dim()),
            ));
        }
        Ok(FeatureSequence {
            id: id.into(),
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Apply z-normalization and append deltas: row t becomes
/// [x̂_t, x̂_t − x̂_{t−1}] with the delta of the first row all zeros.
pub fn finalize_features(seq: &LldSequence, stats: &NormStats) -> Result<FeatureSequence> {
    if stats.dim() != LLD_DIM {
        return Err(Error::shape(
            "finalize_features",
            format!("stats dimension {} != {LLD_DIM}", stats.dim()),
        ));
    }
    let t_len = seq.len();
    let mut norm = vec![0.0f64; t_len * LLD_DIM];
    for (t, row) in seq.frames.rows().into_iter().enumerate() {
        for (d, &v) in row.iter().enumerate() {
            norm[t * LLD_DIM + d] = (v as f64 - stats.mean[d]) / stats.std[d];
        }
    }
    let mut out = Array2::<f32>::zeros((t_len, FEATURE_DIM));
    for t in 0..t_len {
        for d in 0..LLD_DIM {
            let z = norm[t * LLD_DIM + d];
            out[[t, d]] = z as f32;
            let delta = if t == 0 {
                0.0
            } else {
                z - norm[(t - 1) * LLD_DIM + d]
            };
            out[[t, LLD_DIM + d]] = delta as f32;
        }
    }
    FeatureSequence::new(seq.id.clone(), out)
}

/// Write per-utterance frame matrices to a binary cache: magic, record
/// count, then per record {id, frame count, dimension, row-major f32 LE
/// payload}. The dimension is stored per record so the same container
/// holds raw (18) and finalized (36) features.
pub fn write_feature_cache(path: &Path, records: &[(&str, &Array2<f32>)]) -> Result<()> {
    crate::util::write_matrix_records(path, CACHE_MAGIC, records)
}

/// Read a cache written by [`write_feature_cache`].
pub fn read_feature_cache(path: &Path) -> Result<Vec<(String, Array2<f32>)>> {
    crate::util::read_matrix_records(path, CACHE_MAGIC)
}
