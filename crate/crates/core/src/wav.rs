//! 16-bit PCM mono WAV files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Waveform;

const FULL_SCALE: f64 = 32768.0;

/// Rounds a sample to the 16-bit grid used on disk.
pub fn quantize(x: f64) -> i16 {
    (x * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn dequantize(q: i16) -> f64 {
    q as f64 / FULL_SCALE
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Wav { path: path.to_path_buf(), msg: e.to_string() };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &x in &w.samples {
        writer.write_sample(quantize(x)).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// Sample rate from the header, without reading the samples.
pub fn probe_sample_rate(path: &Path) -> Result<u32> {
    hound::WavReader::open(path)
        .map(|r| r.spec().sample_rate)
        .map_err(|e| Error::Wav { path: path.to_path_buf(), msg: e.to_string() })
}

/// Number of samples per channel, from the header.
pub fn probe_len(path: &Path) -> Result<usize> {
    hound::WavReader::open(path)
        .map(|r| r.duration() as usize)
        .map_err(|e| Error::Wav { path: path.to_path_buf(), msg: e.to_string() })
}

/// Reads a mono 16-bit file; `expected_rate` rejects files at any other rate.
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let wav_err = |msg: String| Error::Wav { path: path.to_path_buf(), msg };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    if let Some(expected) = expected_rate {
        if spec.sample_rate != expected {
            return Err(Error::SampleRateMismatch { expected, actual: spec.sample_rate });
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(dequantize))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    Waveform::new(samples, spec.sample_rate)
}
