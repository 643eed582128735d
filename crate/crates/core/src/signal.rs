//! Time-frequency analysis and synthesis.
//!
//! STFT with a periodic Hann window, weighted overlap-add resynthesis,
//! HTK-style triangular mel filterbanks, first-order deltas and the
//! mask-domain inverse used to turn mel masks back into waveforms.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{ensure_shape, Error, Result};

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self { samples: self.samples.iter().map(|x| x * gain).collect(), sample_rate: self.sample_rate }
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self { samples: self.samples[..len.min(self.samples.len())].to_vec(), sample_rate: self.sample_rate }
    }
}

/// One-sided STFT, frames along axis 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub window_size: usize,
    pub hop_size: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.bins.ncols()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    /// Number of samples produced by [`istft`].
    pub fn output_len(&self) -> usize {
        (self.n_frames() - 1) * self.hop_size + self.window_size
    }
}

/// Triangular filters, one row per mel band.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub weights: Array2<f64>,
    pub sample_rate: u32,
    pub window_size: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Center frequency of each band in Hz, strictly increasing.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mel(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_lin(&self) -> usize {
        self.weights.ncols()
    }

    /// Linear-frequency lifting matrix (F_lin × F_mel).
    ///
    /// Each linear bin's row sums to one: an all-ones mel mask lifts to an
    /// all-ones linear mask. Bins no filter touches (DC, Nyquist) follow
    /// the band whose center is nearest.
    pub fn lifting_matrix(&self) -> Array2<f64> {
        let n_lin = self.n_lin();
        let mut lift = self.weights.t().to_owned();
        for k in 0..n_lin {
            let mut row = lift.row_mut(k);
            let total: f64 = row.sum();
            if total > 0.0 {
                row /= total;
            } else {
                let f = bin_frequency(k, self.window_size, self.sample_rate);
                let nearest = nearest_index(&self.centers, f);
                row[nearest] = 1.0;
            }
        }
        lift
    }
}

/// Nonnegative mel-band magnitudes, frames along axis 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub mags: Array2<f64>,
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop_size: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.mags.nrows()
    }

    pub fn n_mel(&self) -> usize {
        self.mags.ncols()
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

fn bin_frequency(k: usize, window_size: usize, sample_rate: u32) -> f64 {
    k as f64 * sample_rate as f64 / window_size as f64
}

fn nearest_index(sorted: &[f64], x: f64) -> usize {
    sorted.iter().enumerate().min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs())).map(|(i, _)| i).unwrap_or(0)
}

pub fn n_frames_for(len: usize, window_size: usize, hop_size: usize) -> usize {
    1 + (len - window_size) / hop_size
}

fn check_geometry(window_size: usize, hop_size: usize) -> Result<()> {
    if window_size == 0 || !window_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("window size must be even and positive, got {window_size}")));
    }
    if hop_size == 0 || hop_size > window_size {
        return Err(Error::InvalidArgument(format!("hop size must be in 1..={window_size}, got {hop_size}")));
    }
    Ok(())
}

pub fn stft(w: &Waveform, window_size: usize, hop_size: usize) -> Result<ComplexSpectrogram> {
    check_geometry(window_size, hop_size)?;
    if w.len() < window_size {
        return Err(Error::InputTooShort { len: w.len(), needed: window_size });
    }
    let n_frames = n_frames_for(w.len(), window_size, hop_size);
    let n_bins = window_size / 2 + 1;
    let window = hann(window_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_size);

    let mut bins = Array2::<Complex64>::zeros((n_frames, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    for (t, mut row) in bins.outer_iter_mut().enumerate() {
        let start = t * hop_size;
        for (slot, (x, win)) in buf.iter_mut().zip(w.samples[start..start + window_size].iter().zip(&window)) {
            *slot = Complex64::new(x * win, 0.0);
        }
        fft.process(&mut buf);
        for (dst, src) in row.iter_mut().zip(&buf[..n_bins]) {
            *dst = *src;
        }
    }
    Ok(ComplexSpectrogram { bins, window_size, hop_size, sample_rate: w.sample_rate })
}

/// Weighted overlap-add resynthesis normalized by the summed squared window.
///
/// Samples no window covers (only sample 0 with a periodic Hann window)
/// come out as zero.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    check_geometry(s.window_size, s.hop_size)?;
    let n = s.window_size;
    ensure_shape(s.n_bins() == n / 2 + 1, || format!("{} bins for window {}", s.n_bins(), n))?;
    if s.n_frames() == 0 {
        return Err(Error::InvalidArgument("spectrogram has no frames".into()));
    }
    let window = hann(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let out_len = s.output_len();
    let mut out = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;

    for (t, row) in s.bins.outer_iter().enumerate() {
        for k in 0..=n / 2 {
            buf[k] = row[k];
        }
        for k in n / 2 + 1..n {
            buf[k] = row[n - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * s.hop_size;
        for i in 0..n {
            out[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    let overlap = n - s.hop_size.min(n);
    let interior = overlap..out_len.saturating_sub(overlap);
    for (i, (x, d)) in out.iter_mut().zip(&norm).enumerate() {
        if *d > 1e-10 {
            *x /= d;
        } else {
            assert!(
                !interior.contains(&i) || s.hop_size > n / 2,
                "zero overlap-add normalization inside the interior at sample {i}"
            );
            *x = 0.0;
        }
    }
    Ok(Waveform { samples: out, sample_rate: s.sample_rate })
}

/// The fully overlapped sample range of a signal of `len` samples.
pub fn interior_range(len: usize, window_size: usize, hop_size: usize) -> std::ops::Range<usize> {
    let overlap = window_size - hop_size;
    overlap.min(len)..len.saturating_sub(overlap).max(overlap.min(len))
}

pub fn mel_filterbank(n_mel: usize, window_size: usize, sample_rate: u32) -> Result<MelFilterbank> {
    let n_lin = window_size / 2 + 1;
    if n_mel == 0 {
        return Err(Error::InvalidArgument("need at least one mel band".into()));
    }
    if n_mel >= n_lin {
        return Err(Error::TooManyMelBands { n_mel, n_lin });
    }
    if sample_rate == 0 {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    let f_min = 0.0;
    let f_max = sample_rate as f64 / 2.0;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let mut edges: Vec<f64> =
        (0..n_mel + 2).map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mel + 1) as f64)).collect();
    edges[0] = f_min;
    edges[n_mel + 1] = f_max;
    let freqs: Vec<f64> = (0..n_lin).map(|k| bin_frequency(k, window_size, sample_rate)).collect();

    let mut weights = Array2::<f64>::zeros((n_mel, n_lin));
    for m in 0..n_mel {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut row = weights.row_mut(m);
        for (k, &f) in freqs.iter().enumerate() {
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            row[k] = w.max(0.0);
        }
        // Narrow low-frequency triangles can fall between two bins.
        if row.iter().all(|&w| w <= 0.0) {
            row[nearest_index(&freqs, center)] = 1.0;
        }
    }
    Ok(MelFilterbank { weights, sample_rate, window_size, f_min, f_max, centers: edges[1..=n_mel].to_vec() })
}

pub fn apply_mel(fb: &MelFilterbank, s: &ComplexSpectrogram) -> Result<MelSpectrogram> {
    ensure_shape(fb.n_lin() == s.n_bins(), || {
        format!("filterbank has {} linear bins, spectrogram {}", fb.n_lin(), s.n_bins())
    })?;
    let mags = s.magnitudes().dot(&fb.weights.t());
    Ok(MelSpectrogram { mags, sample_rate: s.sample_rate, window_size: s.window_size, hop_size: s.hop_size })
}

/// Central-difference slope along frames, edges replicated.
pub fn delta(features: ArrayView2<f64>) -> Array2<f64> {
    let t_len = features.nrows();
    let mut out = Array2::<f64>::zeros(features.raw_dim());
    for t in 0..t_len {
        let next = features.row((t + 1).min(t_len - 1));
        let prev = features.row(t.saturating_sub(1));
        Zip::from(out.row_mut(t)).and(next).and(prev).for_each(|d, &n, &p| *d = 0.5 * (n - p));
    }
    out
}

/// Lifts a mel-domain mask to linear frequency, applies it to the mixture
/// (keeping mixture phase) and resynthesizes.
pub fn mel_reconstruct(
    mel_mask: ArrayView2<f64>,
    mixture: &ComplexSpectrogram,
    fb: &MelFilterbank,
) -> Result<Waveform> {
    ensure_shape(mel_mask.nrows() == mixture.n_frames() && mel_mask.ncols() == fb.n_mel(), || {
        format!("mask {:?} vs {} frames x {} mel bands", mel_mask.dim(), mixture.n_frames(), fb.n_mel())
    })?;
    ensure_shape(fb.n_lin() == mixture.n_bins(), || {
        format!("filterbank has {} linear bins, spectrogram {}", fb.n_lin(), mixture.n_bins())
    })?;
    let lin_mask = mel_mask.dot(&fb.lifting_matrix().t());
    let mut masked = mixture.clone();
    Zip::from(&mut masked.bins).and(&lin_mask).for_each(|b, &m| *b *= m);
    istft(&masked)
}

/// Total energy of a one-sided spectrogram expressed over the full
/// two-sided spectrum.
pub fn spectrogram_energy(s: &ComplexSpectrogram) -> f64 {
    let n = s.window_size;
    s.bins
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(k, col)| {
            let w = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
            w * col.iter().map(|c| c.norm_sqr()).sum::<f64>()
        })
        .sum()
}
