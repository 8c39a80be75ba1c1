//! Fundamental-frequency estimation on a single analysis frame.
//!
//! Uses the normalized cross-correlation function (NCCF): for lag tau,
//!
//! ```text
//! r(tau) = sum_{t<N-tau} x_t * x_{t+tau} / sqrt(sum_{t<N-tau} x_t^2 * sum_{t>=tau} x_t^2)
//! ```
//!
//! which stays near 1 for periodic signals regardless of window position.
//! Candidates are local maxima of r within the search band; among
//! candidates within a small tolerance of the global peak the lowest lag
//! wins, which suppresses subharmonic (octave-down) picks whose
//! correlation is nearly as high as the true period's. The numerator is
//! computed for all lags at once via FFT autocorrelation.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Search band and decision thresholds for the pitch tracker.
#[derive(Debug, Clone)]
pub struct PitchConfig {
    /// Lowest detectable fundamental, Hz.
    pub f_min: f64,
    /// Highest detectable fundamental, Hz.
    pub f_max: f64,
    /// A frame is voiced when the best candidate's correlation reaches this.
    pub voicing_threshold: f64,
    /// Candidates within this fraction of the global peak compete; the
    /// lowest lag among them is chosen.
    pub peak_tolerance: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            f_min: 60.0,
            f_max: 500.0,
            voicing_threshold: 0.45,
            peak_tolerance: 0.95,
        }
    }
}

/// Per-frame pitch decision.
#[derive(Debug, Clone, Copy)]
pub struct PitchFrame {
    /// Refined fundamental frequency in Hz; 0 when unvoiced.
    pub pitch_hz: f64,
    /// Integer period in samples backing the estimate; 0 when unvoiced.
    pub period_samples: usize,
    /// NCCF value at the chosen lag; 0 when unvoiced.
    pub correlation: f64,
    pub voiced: bool,
}

impl PitchFrame {
    fn unvoiced() -> Self {
        PitchFrame {
            pitch_hz: 0.0,
            period_samples: 0,
            correlation: 0.0,
            voiced: false,
        }
    }
}

/// NCCF-based pitch detector with a reusable FFT plan.
pub struct PitchDetector {
    sample_rate: f64,
    config: PitchConfig,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl PitchDetector {
    pub fn new(sample_rate: f64, frame_len: usize, config: PitchConfig) -> Self {
        // zero-pad to at least 2N so the circular autocorrelation is linear
        let fft_len = (2 * frame_len).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        PitchDetector {
            sample_rate,
            config,
            fft_len,
            forward,
            inverse,
        }
    }

    /// Analyze one frame. The frame mean is removed internally so constant
    /// offsets read as unvoiced rather than trivially periodic.
    pub fn analyze(&self, frame: &[f64]) -> PitchFrame {
        let n = frame.len();
        let mean = frame.iter().sum::<f64>() / n as f64;
        let x: Vec<f64> = frame.iter().map(|&v| v - mean).collect();
        let energy: f64 = x.iter().map(|v| v * v).sum();
        if energy <= 1e-24 {
            return PitchFrame::unvoiced();
        }

        let lag_min = (self.sample_rate / self.config.f_max).floor() as usize;
        let lag_max = (self.sample_rate / self.config.f_min).ceil() as usize;
        let lag_min = lag_min.max(2);
        let lag_max = lag_max.min(n.saturating_sub(2));
        if lag_max <= lag_min {
            return PitchFrame::unvoiced();
        }

        // raw autocorrelation numerator for every lag via FFT
        let auto = self.autocorrelation(&x);

        // prefix sums of x^2 for the NCCF denominators
        let mut cum = vec![0.0f64; n + 1];
        for t in 0..n {
            cum[t + 1] = cum[t] + x[t] * x[t];
        }

        let nccf = |tau: usize| -> f64 {
            let e_head = cum[n - tau]; // sum over t in [0, n-tau)
            let e_tail = cum[n] - cum[tau]; // sum over t in [tau, n)
            let denom = (e_head * e_tail).sqrt();
            if denom <= 1e-24 {
                0.0
            } else {
                auto[tau] / denom
            }
        };

        // evaluate one lag beyond each end for local-maximum tests and
        // parabolic refinement
        let lo = lag_min - 1;
        let hi = (lag_max + 1).min(n - 1);
        let r: Vec<f64> = (lo..=hi).map(nccf).collect();
        let at = |tau: usize| r[tau - lo];

        // candidate lags: local maxima within the band
        let mut candidates: Vec<usize> = Vec::new();
        let mut best = f64::NEG_INFINITY;
        for tau in lag_min..=lag_max.min(hi - 1) {
            let v = at(tau);
            if v >= at(tau - 1) && v >= at(tau + 1) {
                candidates.push(tau);
                if v > best {
                    best = v;
                }
            }
        }
        if candidates.is_empty() || best < self.config.voicing_threshold {
            return PitchFrame::unvoiced();
        }

        // lowest lag within tolerance of the global peak
        let cutoff = best * self.config.peak_tolerance;
        let tau = *candidates
            .iter()
            .find(|&&t| at(t) >= cutoff)
            .expect("at least the argmax qualifies");

        // parabolic interpolation around the integer peak
        let (rm, r0, rp) = (at(tau - 1), at(tau), at(tau + 1));
        let denom = rm - 2.0 * r0 + rp;
        let delta = if denom.abs() < 1e-12 {
            0.0
        } else {
            (0.5 * (rm - rp) / denom).clamp(-0.5, 0.5)
        };
        let refined = tau as f64 + delta;

        PitchFrame {
            pitch_hz: self.sample_rate / refined,
            period_samples: tau,
            correlation: r0,
            voiced: true,
        }
    }

    fn autocorrelation(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for (b, &v) in buf.iter_mut().zip(x.iter()) {
            b.re = v;
        }
        self.forward.process(&mut buf);
        for b in buf.iter_mut() {
            *b = Complex::new(b.norm_sqr(), 0.0);
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.fft_len as f64;
        buf.iter().take(x.len()).map(|c| c.re * scale).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: f64, n: usize, phase: f64, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|t| amp * (std::f64::consts::TAU * freq * t as f64 / sr + phase).sin())
            .collect()
    }

    #[test]
    fn detects_440hz_not_subharmonic() {
        let det = PitchDetector::new(16_000.0, 512, PitchConfig::default());
        for phase in [0.0, 0.7, 1.9, 3.1] {
            let frame = sine(440.0, 16_000.0, 512, phase, 1.0);
            let p = det.analyze(&frame);
            assert!(p.voiced);
            assert!(
                (p.pitch_hz - 440.0).abs() < 5.0,
                "got {} Hz at phase {}",
                p.pitch_hz,
                phase
            );
            assert_eq!(p.period_samples, 36);
        }
    }

    #[test]
    fn detects_low_pitch() {
        let det = PitchDetector::new(16_000.0, 512, PitchConfig::default());
        let frame = sine(110.0, 16_000.0, 512, 0.3, 0.8);
        let p = det.analyze(&frame);
        assert!(p.voiced);
        assert!((p.pitch_hz - 110.0).abs() < 3.0, "got {}", p.pitch_hz);
    }

    #[test]
    fn silence_is_unvoiced() {
        let det = PitchDetector::new(16_000.0, 512, PitchConfig::default());
        let p = det.analyze(&vec![0.0; 512]);
        assert!(!p.voiced);
        assert_eq!(p.pitch_hz, 0.0);
    }

    #[test]
    fn dc_offset_is_unvoiced() {
        let det = PitchDetector::new(16_000.0, 512, PitchConfig::default());
        let p = det.analyze(&vec![0.5; 512]);
        assert!(!p.voiced);
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let det = PitchDetector::new(16_000.0, 512, PitchConfig::default());
        let mut rng = crate::util::derive_rng(11, &["noise"]);
        let mut voiced = 0;
        for _ in 0..20 {
            let frame: Vec<f64> = (0..512)
                .map(|_| crate::util::standard_normal(&mut rng) * 0.1)
                .collect();
            if det.analyze(&frame).voiced {
                voiced += 1;
            }
        }
        assert!(voiced <= 3, "{voiced}/20 noise frames read as voiced");
    }

    #[test]
    fn amplitude_scaling_preserves_period() {
        let det = PitchDetector::new(16_000.0, 512, PitchConfig::default());
        let frame = sine(220.0, 16_000.0, 512, 0.2, 1.0);
        let scaled: Vec<f64> = frame.iter().map(|v| v * 0.037).collect();
        let a = det.analyze(&frame);
        let b = det.analyze(&scaled);
        assert_eq!(a.period_samples, b.period_samples);
        assert!((a.pitch_hz - b.pitch_hz).abs() < 1e-6 * a.pitch_hz);
    }

    #[test]
    fn correlation_near_one_for_pure_tone() {
        let det = PitchDetector::new(16_000.0, 512, PitchConfig::default());
        let frame = sine(200.0, 16_000.0, 512, 0.0, 1.0);
        let p = det.analyze(&frame);
        assert!(p.correlation > 0.99, "r = {}", p.correlation);
    }
}
