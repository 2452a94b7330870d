//! Short-time spectral analysis shared by the encoder targets, the MFCC fallback encoder and
//! the cepstral distortion metric.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels` rows over `n_fft / 2 + 1` bins.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II, keeping the first `n_out` coefficients.
pub fn dct_ii(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        x * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos()
                    })
                    .sum::<f64>()
        })
        .collect()
}

/// Windowed power spectra of frames centred at arbitrary sample positions (zero-padded at the
/// clip edges).
pub struct SpectralAnalyzer {
    win_len: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectralAnalyzer {
    pub fn new(win_len: usize) -> Self {
        let n_fft = win_len.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            win_len,
            n_fft,
            window: hann(win_len),
            fft,
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn power(&self, samples: &[f64], center: usize) -> Vec<f64> {
        let start = center as isize - (self.win_len / 2) as isize;
        let mut buf: Vec<Complex<f64>> = (0..self.n_fft)
            .map(|i| {
                let v = if i < self.win_len {
                    let j = start + i as isize;
                    if j >= 0 && (j as usize) < samples.len() {
                        samples[j as usize] * self.window[i]
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                Complex::new(v, 0.0)
            })
            .collect();
        self.fft.process(&mut buf);
        buf[..self.n_bins()].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Mel-frequency cepstra on the natural-log amplitude scale.
pub struct MelCepstrum {
    analyzer: SpectralAnalyzer,
    filters: Vec<Vec<f64>>,
    n_coeffs: usize,
    floor: f64,
}

impl MelCepstrum {
    /// `n_coeffs` includes `c0`.
    pub fn new(win_len: usize, n_mels: usize, n_coeffs: usize, sample_rate: f64) -> Self {
        let analyzer = SpectralAnalyzer::new(win_len);
        let filters = mel_filterbank(n_mels, analyzer.n_fft(), sample_rate, 0.0, sample_rate / 2.0);
        Self {
            analyzer,
            filters,
            n_coeffs,
            floor: 1e-10,
        }
    }

    /// Log mel energies (half log power, i.e. log amplitude).
    pub fn log_mel(&self, samples: &[f64], center: usize) -> Vec<f64> {
        let p = self.analyzer.power(samples, center);
        self.filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(&p).map(|(w, v)| w * v).sum();
                0.5 * e.max(self.floor).ln()
            })
            .collect()
    }

    pub fn cepstrum(&self, samples: &[f64], center: usize) -> Vec<f64> {
        dct_ii(&self.log_mel(samples, center), self.n_coeffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_of_constant_is_c0_only() {
        let c = dct_ii(&[2.0; 40], 25);
        assert!((c[0] - 2.0 * 40f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mel_scale_round_trip() {
        for hz in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn power_spectrum_peaks_at_tone() {
        let sr = 16000.0;
        let x: Vec<f64> = (0..4000)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr).sin())
            .collect();
        let a = SpectralAnalyzer::new(400);
        let p = a.power(&x, 2000);
        let peak = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
        assert_eq!(peak, 32); // 1000 Hz / (16000 / 512)
    }
}
