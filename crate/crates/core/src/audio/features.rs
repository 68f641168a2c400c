use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::dsp::{block_entropy, dct_matrix, hamming, mel_filterbank};
use super::{frame_signal, SpeechConfig, Waveform, SAMPLE_RATE};
use crate::error::Result;
use crate::tensor::Tensor;

/// Column names of a default-configured speech feature row.
pub const COLUMNS: [&str; 34] = [
    "mfcc0", "mfcc1", "mfcc2", "mfcc3", "mfcc4", "mfcc5", "mfcc6", "mfcc7", "mfcc8", "mfcc9",
    "mfcc10", "mfcc11", "mfcc12", "chroma_a", "chroma_a#", "chroma_b", "chroma_c", "chroma_c#",
    "chroma_d", "chroma_d#", "chroma_e", "chroma_f", "chroma_f#", "chroma_g", "chroma_g#",
    "chroma_std", "zcr", "energy", "energy_entropy", "spectral_centroid", "spectral_spread",
    "spectral_entropy", "spectral_flux", "spectral_rolloff",
];

/// Lowest frequency folded into the chromagram (A0).
const CHROMA_REF_HZ: f64 = 27.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeechFeatures {
    pub tensor: Tensor,
    pub valid_frames: usize,
    /// Input was shorter than one analysis window.
    pub short: bool,
}

/// Precomputed window, FFT plan, mel filterbank and DCT for one config.
pub struct SpeechExtractor {
    cfg: SpeechConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    pitch_class: Vec<Option<usize>>,
}

impl SpeechExtractor {
    pub fn new(cfg: SpeechConfig) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.spectral;
        let fft = FftPlanner::new().plan_fft_forward(s.fft_size);
        let window = hamming(cfg.frame.window_samples());
        let filters = mel_filterbank(s.n_mels, s.fft_size, SAMPLE_RATE as f64, s.mel_fmin, s.mel_fmax);
        let dct = dct_matrix(s.n_mels);
        let bin_hz = SAMPLE_RATE as f64 / s.fft_size as f64;
        let pitch_class = (0..s.fft_size / 2 + 1)
            .map(|k| {
                let f = k as f64 * bin_hz;
                (f >= CHROMA_REF_HZ).then(|| (12.0 * (f / CHROMA_REF_HZ).log2()).round() as usize % 12)
            })
            .collect();
        Ok(SpeechExtractor {
            cfg,
            fft,
            window,
            filters,
            dct,
            pitch_class,
        })
    }

    pub fn config(&self) -> &SpeechConfig {
        &self.cfg
    }

    /// Magnitude spectrum (`fft_size / 2 + 1` bins) of the Hamming-windowed,
    /// zero-padded frame.
    pub fn magnitude_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let n = self.cfg.spectral.fft_size;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i].re = x * w;
        }
        self.fft.process(&mut buf);
        buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    pub fn mfcc(&self, frame: &[f64]) -> Vec<f64> {
        self.mfcc_from_spectrum(&self.magnitude_spectrum(frame))
    }

    fn mfcc_from_spectrum(&self, mag: &[f64]) -> Vec<f64> {
        let floor = self.cfg.spectral.log_floor;
        let log_mel: Vec<f64> = self
            .filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().zip(mag).map(|(w, m)| w * m * m).sum();
                e.max(floor).ln()
            })
            .collect();
        self.dct[..self.cfg.spectral.n_mfcc]
            .iter()
            .map(|row| row.iter().zip(&log_mel).map(|(d, l)| d * l).sum())
            .collect()
    }

    /// 12 pitch-class energy shares followed by their standard deviation.
    pub fn chroma(&self, frame: &[f64]) -> Vec<f64> {
        self.chroma_from_spectrum(&self.magnitude_spectrum(frame))
    }

    fn chroma_from_spectrum(&self, mag: &[f64]) -> Vec<f64> {
        let total: f64 = mag.iter().map(|m| m * m).sum();
        let denom = total.max(self.cfg.spectral.log_floor);
        let mut bins = [0.0; 12];
        for (m, class) in mag.iter().zip(&self.pitch_class) {
            if let Some(c) = class {
                bins[*c] += m * m;
            }
        }
        let mut out: Vec<f64> = bins.iter().map(|b| b / denom).collect();
        let mean = out.iter().sum::<f64>() / 12.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        out.push(var.sqrt());
        out
    }

    /// Zero-crossing rate, energy, energy entropy, spectral centroid, spread,
    /// entropy, flux and rolloff. Time-domain terms use the raw frame.
    pub fn time_spectral(&self, frame: &[f64], prev_spectrum: Option<&[f64]>) -> Vec<f64> {
        self.time_spectral_from(frame, &self.magnitude_spectrum(frame), prev_spectrum)
    }

    fn time_spectral_from(&self, frame: &[f64], mag: &[f64], prev: Option<&[f64]>) -> Vec<f64> {
        let s = &self.cfg.spectral;
        let floor = s.log_floor;
        let n = frame.len();

        let crossings = frame.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
        let zcr = crossings as f64 / (n - 1).max(1) as f64;
        let squares: Vec<f64> = frame.iter().map(|x| x * x).collect();
        let energy = squares.iter().sum::<f64>() / n as f64;
        let energy_entropy = block_entropy(&squares, s.entropy_blocks, floor);

        let last = (mag.len() - 1) as f64;
        let mag_sum: f64 = mag.iter().sum();
        let (centroid, spread) = if mag_sum > 0.0 {
            let c = mag.iter().enumerate().map(|(k, m)| k as f64 / last * m).sum::<f64>() / mag_sum;
            let v = mag
                .iter()
                .enumerate()
                .map(|(k, m)| (k as f64 / last - c).powi(2) * m)
                .sum::<f64>()
                / mag_sum;
            (c, v.sqrt())
        } else {
            (0.0, 0.0)
        };

        let power: Vec<f64> = mag.iter().map(|m| m * m).collect();
        let spectral_entropy = block_entropy(&power, s.entropy_blocks, floor);

        let flux = match prev {
            Some(p) => {
                let (a, b) = (mag_sum.max(floor), p.iter().sum::<f64>().max(floor));
                mag.iter().zip(p).map(|(x, y)| (x / a - y / b).powi(2)).sum()
            }
            None => 0.0,
        };

        let total: f64 = power.iter().sum();
        let rolloff = if total > 0.0 {
            let threshold = s.rolloff * total;
            let mut acc = 0.0;
            let k = power
                .iter()
                .position(|p| {
                    acc += p;
                    acc >= threshold
                })
                .unwrap_or(power.len() - 1);
            k as f64 / last
        } else {
            0.0
        };

        vec![zcr, energy, energy_entropy, centroid, spread, spectral_entropy, flux, rolloff]
    }

    /// `(max_frames, width)` matrix, rows past the last frame zero.
    pub fn featurize(&self, w: &Waveform) -> SpeechFeatures {
        let frames = frame_signal(w, &self.cfg.frame);
        let width = self.cfg.width();
        let rows = self.cfg.frame.max_frames;
        let mut data = vec![0.0; rows * width];
        let mut prev: Option<Vec<f64>> = None;
        for (i, frame) in frames.frames.iter().enumerate() {
            let mag = self.magnitude_spectrum(frame);
            let row = &mut data[i * width..(i + 1) * width];
            let mut values = self.mfcc_from_spectrum(&mag);
            values.extend(self.chroma_from_spectrum(&mag));
            values.extend(self.time_spectral_from(frame, &mag, prev.as_deref()));
            row.copy_from_slice(&values);
            prev = Some(mag);
        }
        SpeechFeatures {
            tensor: Tensor::new(vec![rows, width], data).expect("sized above"),
            valid_frames: frames.frames.len(),
            short: frames.short,
        }
    }
}

/// One-shot convenience over [`SpeechExtractor::featurize`].
pub fn featurize_speech(w: &Waveform, cfg: &SpeechConfig) -> Result<SpeechFeatures> {
    Ok(SpeechExtractor::new(cfg.clone())?.featurize(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn extractor() -> SpeechExtractor {
        SpeechExtractor::new(SpeechConfig::default()).unwrap()
    }

    fn tone(freq: f64, amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin())
            .collect()
    }

    #[test]
    fn silent_frame_mfcc_is_pure_c0() {
        let m = extractor().mfcc(&[0.0; 3200]);
        assert_eq!(m.len(), 13);
        let expect = 26f64.sqrt() * 1e-10f64.ln();
        assert!((m[0] - expect).abs() < 1e-9, "{} vs {expect}", m[0]);
        assert!(m[1..].iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn silent_frame_chroma_is_zero() {
        let c = extractor().chroma(&[0.0; 3200]);
        assert_eq!(c, vec![0.0; 13]);
    }

    #[test]
    fn a440_lands_in_pitch_class_a() {
        let c = extractor().chroma(&tone(440.0, 0.5, 3200));
        assert!(c[0] > 0.9, "{c:?}");
    }

    #[test]
    fn zcr_and_energy_definitions() {
        let ex = extractor();
        let alt: Vec<f64> = (0..3200).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert_eq!(ex.time_spectral(&alt, None)[0], 1.0);
        let flat = ex.time_spectral(&[0.5; 3200], None);
        assert_eq!(flat[0], 0.0);
        assert!((flat[1] - 0.25).abs() < 1e-15);
        assert_eq!(flat[6], 0.0, "first-frame flux");
    }

    #[test]
    fn centroid_of_4khz_tone_is_half_band() {
        let ts = extractor().time_spectral(&tone(4000.0, 0.8, 3200), None);
        assert!((ts[3] - 0.5).abs() < 1e-3, "{}", ts[3]);
    }

    #[test]
    fn featurize_pads_rows_after_last_frame() {
        let w = Waveform::new(tone(300.0, 0.3, 48000), SAMPLE_RATE).unwrap();
        let f = extractor().featurize(&w);
        assert_eq!(f.tensor.shape(), &[100, 34]);
        assert_eq!(f.valid_frames, 29);
        assert!(f.tensor.data()[29 * 34..].iter().all(|&v| v == 0.0));
        assert!(f.tensor.row(28).iter().any(|&v| v != 0.0));
        assert!(f.tensor.is_finite());
    }
}
