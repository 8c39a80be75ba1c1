//! Mel-frequency cepstral coefficients for one analysis frame.
//!
//! Pipeline: Hamming window, power spectrum, 26 triangular mel filters
//! spanning 0 Hz to Nyquist, natural log, orthonormal DCT-II, first 13
//! coefficients (c0 included).

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub const NUM_FILTERS: usize = 26;
pub const NUM_COEFFS: usize = 13;

const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed windowing, filterbank, and DCT for a fixed frame length.
pub struct MfccExtractor {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    fft_len: usize,
    /// per filter: sparse (bin, weight) taps
    filters: Vec<Vec<(usize, f64)>>,
    /// dct[i][m] applied to the 26 log energies
    dct: Vec<[f64; NUM_FILTERS]>,
}

impl MfccExtractor {
    pub fn new(sample_rate: f64, frame_len: usize) -> Self {
        let fft_len = frame_len.next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(fft_len);

        let window: Vec<f64> = (0..frame_len)
            .map(|n| {
                0.54 - 0.46
                    * (std::f64::consts::TAU * n as f64 / (frame_len as f64 - 1.0)).cos()
            })
            .collect();

        // filter corner frequencies, equally spaced on the mel scale
        let mel_hi = hz_to_mel(sample_rate / 2.0);
        let corners_hz: Vec<f64> = (0..NUM_FILTERS + 2)
            .map(|i| mel_to_hz(mel_hi * i as f64 / (NUM_FILTERS + 1) as f64))
            .collect();
        let bin_hz = sample_rate / fft_len as f64;
        let n_bins = fft_len / 2 + 1;
        let mut filters = Vec::with_capacity(NUM_FILTERS);
        for m in 0..NUM_FILTERS {
            let (lo, mid, hi) = (corners_hz[m], corners_hz[m + 1], corners_hz[m + 2]);
            let mut taps = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if f >= mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            filters.push(taps);
        }

        // orthonormal DCT-II
        let m_f = NUM_FILTERS as f64;
        let mut dct = Vec::with_capacity(NUM_COEFFS);
        for i in 0..NUM_COEFFS {
            let alpha = if i == 0 {
                (1.0 / m_f).sqrt()
            } else {
                (2.0 / m_f).sqrt()
            };
            let mut row = [0.0f64; NUM_FILTERS];
            for (m, v) in row.iter_mut().enumerate() {
                *v = alpha
                    * (std::f64::consts::PI * i as f64 * (2.0 * m as f64 + 1.0) / (2.0 * m_f))
                        .cos();
            }
            dct.push(row);
        }

        MfccExtractor {
            window,
            fft,
            fft_len,
            filters,
            dct,
        }
    }

    /// Compute the 13 cepstral coefficients for one frame.
    pub fn extract(&self, frame: &[f64]) -> [f64; NUM_COEFFS] {
        assert_eq!(frame.len(), self.window.len(), "frame length mismatch");
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.fft.process(&mut buf);

        let n_bins = self.fft_len / 2 + 1;
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();

        let mut log_energies = [0.0f64; NUM_FILTERS];
        for (m, taps) in self.filters.iter().enumerate() {
            let e: f64 = taps.iter().map(|&(k, w)| power[k] * w).sum();
            log_energies[m] = e.max(LOG_FLOOR).ln();
        }

        let mut coeffs = [0.0f64; NUM_COEFFS];
        for (i, row) in self.dct.iter().enumerate() {
            coeffs[i] = row
                .iter()
                .zip(&log_energies)
                .map(|(d, e)| d * e)
                .sum::<f64>();
        }
        coeffs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|t| (std::f64::consts::TAU * freq * t as f64 / sr).sin())
            .collect()
    }

    #[test]
    fn distinct_tones_yield_distinct_cepstra() {
        let ex = MfccExtractor::new(16_000.0, 512);
        let a = ex.extract(&sine(200.0, 16_000.0, 512));
        let b = ex.extract(&sine(2_000.0, 16_000.0, 512));
        let dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 1.0, "cepstra too close: {dist}");
    }

    #[test]
    fn extraction_is_deterministic() {
        let ex = MfccExtractor::new(16_000.0, 512);
        let frame = sine(313.0, 16_000.0, 512);
        let a = ex.extract(&frame);
        let b = ex.extract(&frame);
        assert_eq!(a, b);
    }

    #[test]
    fn silence_hits_log_floor() {
        let ex = MfccExtractor::new(16_000.0, 512);
        let c = ex.extract(&vec![0.0; 512]);
        // all filter energies at the floor: only c0 is nonzero
        assert!((c[0] - (NUM_FILTERS as f64).sqrt() * LOG_FLOOR.ln()).abs() < 1e-9);
        for &v in &c[1..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn filters_tile_the_band_between_first_and_last_peak() {
        let sr = 16_000.0;
        let ex = MfccExtractor::new(sr, 512);
        let n_bins = ex.fft_len / 2 + 1;
        let mut coverage = vec![0.0f64; n_bins];
        for taps in &ex.filters {
            for &(k, w) in taps {
                coverage[k] += w;
            }
        }
        // between adjacent filter peaks the fall of one triangle and the
        // rise of the next are complementary, so total weight is 1
        let mel_hi = hz_to_mel(sr / 2.0);
        let first_peak = mel_to_hz(mel_hi / (NUM_FILTERS + 1) as f64);
        let last_peak = mel_to_hz(mel_hi * NUM_FILTERS as f64 / (NUM_FILTERS + 1) as f64);
        let bin_hz = sr / ex.fft_len as f64;
        for (k, &w) in coverage.iter().enumerate() {
            let f = k as f64 * bin_hz;
            if f > first_peak && f < last_peak {
                assert!((w - 1.0).abs() < 1e-9, "bin {k} ({f} Hz) weight {w}");
            }
        }
    }
}
