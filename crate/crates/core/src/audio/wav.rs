//! PCM WAV ingestion and emission.

use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

/// Reads integer PCM, averages channels to mono, resamples to 16 kHz.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Data(format!("{}: only integer PCM supported", path.display())));
    }
    let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
    let raw: Vec<i32> = reader
        .samples::<i32>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_err(path, e))?;
    let ch = spec.channels as usize;
    let mono: Vec<f64> = raw
        .chunks(ch)
        .map(|c| c.iter().map(|&s| s as f64 / scale).sum::<f64>() / ch as f64)
        .collect();
    Waveform::resampled(mono, spec.sample_rate)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Writes mono PCM16 at 16 kHz, clamping to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
