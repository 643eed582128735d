//! Feature geometry and per-file preparation of network inputs and targets.

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::loss::{MiKind, MiTarget};
use crate::masking::{ideal_binary_mask, wiener_like_mask, LabelMatrix};
use crate::signal::{
    apply_mel, delta, hann, mel_filterbank, stft, ComplexSpectrogram, MelFilterbank, MelSpectrogram, Waveform,
};

/// Magnitude floor before log compression of the network input.
pub const LOG_FLOOR: f64 = 1e-3;

/// Analysis geometry shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
    pub n_mel: usize,
    pub use_delta: bool,
}

impl FeatureConfig {
    /// 8 kHz, 512/128 STFT, 32 mel bands, deltas on.
    pub fn desk() -> Self {
        Self { sample_rate: 8000, window_size: 512, hop_size: 128, n_mel: 32, use_delta: true }
    }

    /// 16 kHz, 512/128 STFT, 150 mel bands, deltas on.
    pub fn paper() -> Self {
        Self { sample_rate: 16000, window_size: 512, hop_size: 128, n_mel: 150, use_delta: true }
    }

    /// Parses names like `16k-1024-256-mel150` (no deltas, as in those runs).
    pub fn from_preset(name: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown feature preset '{name}'"));
        let parts: Vec<&str> = name.split('-').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let sample_rate = match parts[0] {
            "8k" => 8000,
            "16k" => 16000,
            "22k" => 22050,
            "44k" => 44100,
            _ => return Err(bad()),
        };
        let window_size = parts[1].parse().map_err(|_| bad())?;
        let hop_size = parts[2].parse().map_err(|_| bad())?;
        let n_mel = parts[3].strip_prefix("mel").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let cfg = Self { sample_rate, window_size, hop_size, n_mel, use_delta: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window_size == 0 || !self.window_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument("bad sample rate or window size".into()));
        }
        if self.hop_size == 0 || self.hop_size > self.window_size / 2 {
            return Err(Error::InvalidArgument("hop must be in 1..=window/2".into()));
        }
        if self.n_mel == 0 || self.n_mel > self.window_size / 2 {
            return Err(Error::TooManyMelBands { n_mel: self.n_mel, n_lin: self.window_size / 2 + 1 });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        if self.use_delta {
            2 * self.n_mel
        } else {
            self.n_mel
        }
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        mel_filterbank(self.n_mel, self.window_size, self.sample_rate)
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop_size as f64
    }

    /// Zeros placed before a signal so its first sample is fully overlapped.
    pub fn edge_padding(&self) -> usize {
        self.window_size - self.hop_size
    }

    /// Frames produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.edge_padding();
        1 + (padded - self.window_size).div_ceil(self.hop_size)
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// STFT and mel magnitudes of one signal, analyzed with edge padding.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub spectrogram: ComplexSpectrogram,
    /// Mel magnitudes divided by the window sum, so a full-scale sinusoid
    /// peaks near 0.5.
    pub mel: MelSpectrogram,
    /// Length of the unpadded signal.
    pub signal_len: usize,
}

impl Analysis {
    /// Cuts a resynthesized signal back to the span of the original.
    pub fn unpad(&self, w: &Waveform) -> Waveform {
        let pad = self.spectrogram.window_size - self.spectrogram.hop_size;
        let end = (pad + self.signal_len).min(w.len());
        Waveform { samples: w.samples[pad.min(end)..end].to_vec(), sample_rate: w.sample_rate }
    }
}

/// Pads `w` with `window - hop` zeros in front and enough behind that the
/// last sample is also fully overlapped, so resynthesis is exact over the
/// whole original span.
pub fn pad_signal(cfg: &FeatureConfig, w: &Waveform) -> Waveform {
    let pad = cfg.edge_padding();
    let padded = w.len() + 2 * pad;
    let tail = pad + (cfg.hop_size - (padded - cfg.window_size) % cfg.hop_size) % cfg.hop_size;
    let mut samples = vec![0.0; pad];
    samples.extend_from_slice(&w.samples);
    samples.resize(pad + w.len() + tail, 0.0);
    Waveform { samples, sample_rate: w.sample_rate }
}

/// Padded STFT and mel analysis. Signals shorter than one window are
/// rejected.
pub fn analyze(cfg: &FeatureConfig, fb: &MelFilterbank, w: &Waveform) -> Result<Analysis> {
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch { expected: cfg.sample_rate, actual: w.sample_rate });
    }
    if w.len() < cfg.window_size {
        return Err(Error::InputTooShort { len: w.len(), needed: cfg.window_size });
    }
    let spectrogram = stft(&pad_signal(cfg, w), cfg.window_size, cfg.hop_size)?;
    let mut mel = apply_mel(fb, &spectrogram)?;
    let window_sum: f64 = hann(cfg.window_size).iter().sum();
    mel.mags.mapv_inplace(|m| m / window_sum);
    Ok(Analysis { spectrogram, mel, signal_len: w.len() })
}

/// Log-compressed mel magnitudes, optionally with deltas, each column
/// normalized to zero mean and unit variance over the file.
pub fn network_input(cfg: &FeatureConfig, mel: ArrayView2<f64>) -> Array2<f64> {
    let log_mel = mel.mapv(|m| (m + LOG_FLOOR).ln());
    let mut feats = if cfg.use_delta {
        let d = delta(log_mel.view());
        concatenate(Axis(1), &[log_mel.view(), d.view()]).expect("same frame count")
    } else {
        log_mel
    };
    let n = feats.nrows() as f64;
    for mut col in feats.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-3);
        col.mapv_inplace(|x| (x - mean) / std);
    }
    feats
}

/// Everything the losses need for one file or segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub labels: LabelMatrix,
    /// Mixture mel magnitudes S, (T, F).
    pub mixture: Array2<f64>,
    /// Source mel magnitudes R, (C, T, F).
    pub sources: Array3<f64>,
    /// Wiener-like reference masks O, (C, T, F).
    pub reference: Array3<f64>,
}

impl Targets {
    pub fn n_frames(&self) -> usize {
        self.mixture.nrows()
    }

    pub fn mi_target(&self, kind: MiKind) -> MiTarget<'_> {
        match kind {
            MiKind::Msa => MiTarget::Msa(self.sources.view()),
            MiKind::Mmsa => MiTarget::Mmsa(self.reference.view()),
        }
    }

    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            labels: self.labels.slice_frames(range.clone()),
            mixture: self.mixture.slice(ndarray::s![range.clone(), ..]).to_owned(),
            sources: self.sources.slice(ndarray::s![.., range.clone(), ..]).to_owned(),
            reference: self.reference.slice(ndarray::s![.., range, ..]).to_owned(),
        }
    }
}

/// A file ready for training: network input plus targets.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub feats: Array2<f64>,
    pub targets: Targets,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.feats.nrows()
    }
}

/// Builds network input and all targets from a mixture and its sources.
pub fn prepare_utterance(
    cfg: &FeatureConfig,
    fb: &MelFilterbank,
    id: &str,
    mixture: &Waveform,
    sources: &[Waveform],
) -> Result<Utterance> {
    let mix = analyze(cfg, fb, mixture)?;
    let source_mels = sources.iter().map(|s| analyze(cfg, fb, s).map(|a| a.mel)).collect::<Result<Vec<_>>>()?;
    let (labels, _) = ideal_binary_mask(&source_mels)?;
    let reference = wiener_like_mask(&source_mels)?.masks;
    let views: Vec<_> = source_mels.iter().map(|m| m.mags.view()).collect();
    let sources =
        ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(format!("source spectrograms: {e}")))?;
    Ok(Utterance {
        id: id.to_string(),
        feats: network_input(cfg, mix.mel.mags.view()),
        targets: Targets { labels, mixture: mix.mel.mags, sources, reference },
    })
}
