//! Speech featurization: 16 kHz waveform to a `(frames, 34)` matrix of
//! MFCC, chroma and time/spectral descriptors.

mod dsp;
mod features;
pub mod wav;

pub use dsp::{dct_matrix, hz_to_mel, mel_filterbank, mel_to_hz};
pub use features::{featurize_speech, SpeechExtractor, SpeechFeatures, COLUMNS};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono samples in `[-1, 1]` at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Data(format!(
                "waveform must be {SAMPLE_RATE} Hz, got {sample_rate} Hz"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Data("empty waveform".into()));
        }
        Ok(Waveform { samples })
    }

    /// Linearly resamples to 16 kHz when needed.
    pub fn resampled(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate 0".into()));
        }
        if sample_rate == SAMPLE_RATE {
            return Waveform::new(samples, sample_rate);
        }
        Waveform::new(resample_linear(&samples, sample_rate, SAMPLE_RATE), SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let out_len = ((samples.len() as f64) * to as f64 / from as f64).round().max(1.0) as usize;
    let step = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let j = t.floor() as usize;
            if j + 1 >= samples.len() {
                return samples[samples.len() - 1];
            }
            let frac = t - j as f64;
            samples[j] * (1.0 - frac) + samples[j + 1] * frac
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub max_frames: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            window_seconds: 0.2,
            hop_seconds: 0.1,
            max_frames: 100,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_seconds > self.hop_seconds && self.hop_seconds > 0.0) || self.max_frames == 0 {
            return Err(Error::Config(format!("invalid frame config {self:?}")));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_seconds * SAMPLE_RATE as f64).round() as usize
    }

    /// `min(max_frames, floor((n - window) / hop) + 1)`, and 1 for signals
    /// shorter than a window.
    pub fn frame_count(&self, n: usize) -> usize {
        let (win, hop) = (self.window_samples(), self.hop_samples());
        if n < win {
            return 1;
        }
        ((n - win) / hop + 1).min(self.max_frames)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralConfig {
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub rolloff: f64,
    pub entropy_blocks: usize,
    pub log_floor: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            fft_size: 4096,
            n_mels: 26,
            n_mfcc: 13,
            mel_fmin: 0.0,
            mel_fmax: 8000.0,
            rolloff: 0.90,
            entropy_blocks: 10,
            log_floor: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeechConfig {
    pub frame: FrameConfig,
    pub spectral: SpectralConfig,
}

impl SpeechConfig {
    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        let s = &self.spectral;
        let win = self.frame.window_samples();
        if s.fft_size < win
            || s.n_mfcc == 0
            || s.n_mfcc > s.n_mels
            || s.entropy_blocks == 0
            || !(0.0..=1.0).contains(&s.rolloff)
            || s.mel_fmax <= s.mel_fmin
            || s.mel_fmax > SAMPLE_RATE as f64 / 2.0
        {
            return Err(Error::Config(format!("invalid spectral config {s:?}")));
        }
        Ok(())
    }

    /// Row width: MFCC + 12 chroma + chroma deviation + 8 time/spectral.
    pub fn width(&self) -> usize {
        self.spectral.n_mfcc + 13 + 8
    }
}

/// Frames produced by [`frame_signal`].
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub frames: Vec<Vec<f64>>,
    /// Set when the signal was shorter than one window and was zero padded.
    pub short: bool,
}

pub fn frame_signal(w: &Waveform, cfg: &FrameConfig) -> Frames {
    let (win, hop) = (cfg.window_samples(), cfg.hop_samples());
    let s = w.samples();
    if s.len() < win {
        let mut frame = s.to_vec();
        frame.resize(win, 0.0);
        return Frames {
            frames: vec![frame],
            short: true,
        };
    }
    let frames = (0..cfg.frame_count(s.len()))
        .map(|i| s[i * hop..i * hop + win].to_vec())
        .collect();
    Frames {
        frames,
        short: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn silence(seconds: f64) -> Waveform {
        Waveform::new(vec![0.0; (seconds * 16000.0).round() as usize], SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_counts_at_named_durations() {
        let cfg = FrameConfig::default();
        assert_eq!(frame_signal(&silence(3.0), &cfg).frames.len(), 29);
        assert_eq!(frame_signal(&silence(10.1), &cfg).frames.len(), 100);
        assert_eq!(frame_signal(&silence(0.2), &cfg).frames.len(), 1);
        assert_eq!(frame_signal(&silence(30.0), &cfg).frames.len(), 100);
    }

    #[test]
    fn short_signal_is_padded_and_flagged() {
        let w = Waveform::new(vec![0.5; 1000], SAMPLE_RATE).unwrap();
        let f = frame_signal(&w, &FrameConfig::default());
        assert!(f.short);
        assert_eq!(f.frames.len(), 1);
        assert_eq!(f.frames[0].len(), 3200);
        assert_eq!(f.frames[0][999], 0.5);
        assert_eq!(f.frames[0][1000], 0.0);
    }

    #[test]
    fn waveform_rejects_wrong_rate_and_empty() {
        assert!(Waveform::new(vec![0.0; 10], 8000).is_err());
        assert!(Waveform::new(vec![], SAMPLE_RATE).is_err());
        let w = Waveform::resampled(vec![0.0, 1.0, 0.0, -1.0], 8000).unwrap();
        assert_eq!(w.samples().len(), 8);
        assert!((w.samples()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut f = FrameConfig::default();
        f.hop_seconds = 0.3;
        assert!(f.validate().is_err());
        let mut s = SpeechConfig::default();
        s.spectral.fft_size = 1024;
        assert!(s.validate().is_err());
        assert_eq!(SpeechConfig::default().width(), 34);
    }
}
