//! Synthetic corpus generation, remixing and segmentation.
//!
//! Vocals are harmonic tones with a wandering pitch and vibrato, phrased
//! with pauses. Accompaniment is filtered noise, drum hits and sustained
//! chords. Both are trimmed of silence and mixed at a fixed SNR so the
//! two sources overlap everywhere.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::Targets;
use crate::masking::{LabelMatrix, MaskSet};
use crate::signal::Waveform;
use crate::wav::{dequantize, probe_sample_rate, quantize, read_wav, write_wav};

/// Silence detector defaults.
pub const TRIM_FRAME: usize = 512;
pub const TRIM_HOP: usize = 128;
pub const TRIM_THRESHOLD_DB: f64 = -40.0;

/// Peak level generated mixtures are scaled down to before quantization.
const HEADROOM: f64 = 0.95;

/// Source names in generator order.
pub const SOURCE_NAMES: [&str; 2] = ["vocals", "accompaniment"];

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub id: String,
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
}

impl MixtureExample {
    /// Checks equal lengths and rates and that the mixture is the sum of
    /// the sources to within `tol` (max abs).
    pub fn check(&self, tol: f64) -> Result<()> {
        let n = self.mixture.len();
        for s in &self.sources {
            if s.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "{}: source has {} samples, mixture {}",
                    self.id,
                    s.len(),
                    n
                )));
            }
            if s.sample_rate != self.mixture.sample_rate {
                return Err(Error::SampleRateMismatch { expected: self.mixture.sample_rate, actual: s.sample_rate });
            }
        }
        let err = (0..n)
            .map(|i| (self.mixture.samples[i] - self.sources.iter().map(|s| s.samples[i]).sum::<f64>()).abs())
            .fold(0.0, f64::max);
        if err > tol {
            return Err(Error::InvalidArgument(format!(
                "{}: mixture differs from the sum of sources by {err:.3e}",
                self.id
            )));
        }
        Ok(())
    }
}

fn check_duration(duration: f64, sample_rate: u32) -> Result<usize> {
    if duration.is_nan() || duration <= 0.0 || sample_rate == 0 {
        return Err(Error::InvalidArgument(format!(
            "need positive duration and sample rate, got {duration} s at {sample_rate} Hz"
        )));
    }
    Ok(((duration * sample_rate as f64).round() as usize).max(1))
}

fn peak_normalize(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

fn raised_cosine(x: f64) -> f64 {
    0.5 - 0.5 * (PI * x.clamp(0.0, 1.0)).cos()
}

/// Phrase envelope: on for 0.8 to 2.5 s, off for 0.15 to 0.6 s, with
/// 40 ms ramps.
fn phrase_envelope(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut env = vec![0.0; n];
    let ramp = 0.04 * sr;
    let mut t = 0;
    while t < n {
        let on = (rng.random_range(0.8..2.5) * sr) as usize;
        for i in 0..on.min(n - t) {
            let edge = (i as f64).min((on - i) as f64);
            env[t + i] = raised_cosine(edge / ramp);
        }
        t += on + (rng.random_range(0.15..0.6) * sr) as usize;
    }
    env
}

/// Samples and instantaneous fundamental (Hz) of a synthetic voice.
pub(crate) fn vocal_parts(n: usize, sample_rate: u32, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Note-level random walk in semitones, kept inside the vibrato-safe band.
    let mut base = Vec::with_capacity(n);
    let mut prev: f64 = rng.random_range(150.0..300.0);
    let glide = 0.03 * sr;
    while base.len() < n {
        let len = ((rng.random_range(0.15..0.5) * sr) as usize).max(1);
        let step = rng.random_range(-4i32..=4) as f64;
        let next = (prev * 2f64.powf(step / 12.0)).clamp(125.0, 385.0);
        for i in 0..len.min(n - base.len()) {
            let a = raised_cosine(i as f64 / glide);
            base.push(prev + (next - prev) * a);
        }
        prev = next;
    }

    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let f0: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, &f)| f * (1.0 + 0.02 * (2.0 * PI * 5.0 * i as f64 / sr + vib_phase).sin()))
        .collect();

    let env = phrase_envelope(n, sr, &mut rng);
    let cutoff = 0.45 * sr;
    let taper = 0.05 * sr;
    let mut phase = 0.0;
    let mut out = vec![0.0; n];
    for i in 0..n {
        let f = f0[i];
        let mut x = 0.0;
        let mut k = 1;
        while (k as f64) * f < cutoff {
            let kf = k as f64;
            let w = ((cutoff - kf * f) / taper).min(1.0);
            x += w * kf.powf(-1.2) * (kf * phase).sin();
            k += 1;
        }
        out[i] = env[i] * x;
        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI * 1e6);
    }
    peak_normalize(&mut out, 0.5);
    (out, f0)
}

/// A sung-like harmonic tone with pauses. Deterministic in `seed`.
pub fn synth_vocal(duration: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let n = check_duration(duration, sample_rate)?;
    Ok(Waveform { samples: vocal_parts(n, sample_rate, seed).0, sample_rate })
}

fn unit_rms(x: &mut [f64]) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
}

/// Low-passed noise, drum hits and sustained chords. Deterministic in `seed`.
pub fn synth_accompaniment(duration: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let n = check_duration(duration, sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut noise = vec![0.0; n];
    let a = 1.0 - (-2.0 * PI * rng.random_range(300.0..800.0) / sr).exp();
    let mut y = 0.0;
    for v in noise.iter_mut() {
        y += a * (rng.random_range(-1.0..1.0) - y);
        *v = y;
    }
    unit_rms(&mut noise);

    let mut drums = vec![0.0; n];
    let beat = 60.0 / rng.random_range(90.0..140.0) * sr;
    let mut beat_idx = 0usize;
    loop {
        let start = (beat_idx as f64 * beat) as usize;
        if start >= n {
            break;
        }
        if beat_idx.is_multiple_of(2) {
            // Kick: a pitch-dropping sine.
            let len = ((0.25 * sr) as usize).min(n - start);
            let mut ph = 0.0;
            for i in 0..len {
                let t = i as f64 / sr;
                let f = 50.0 + 70.0 * (-t / 0.03).exp();
                ph += 2.0 * PI * f / sr;
                drums[start + i] += 1.5 * (-t / 0.08).exp() * ph.sin();
            }
        } else {
            // Snare: a decaying noise burst.
            let len = ((0.2 * sr) as usize).min(n - start);
            for i in 0..len {
                let t = i as f64 / sr;
                drums[start + i] += (-t / 0.04).exp() * rng.random_range(-1.0..1.0);
            }
        }
        beat_idx += 1;
    }
    unit_rms(&mut drums);

    let mut chords = vec![0.0; n];
    let chord_len = (2.0 * sr) as usize;
    let fade = 0.02 * sr;
    for start in (0..n).step_by(chord_len.max(1)) {
        let root = 45.0 * 2f64.powf(rng.random_range(0..12) as f64 / 12.0);
        let third = if rng.random_bool(0.5) { 4.0 } else { 3.0 };
        let len = chord_len.min(n - start);
        for semis in [0.0, third, 7.0, 12.0] {
            let f = root * 2f64.powf(semis / 12.0);
            let ph0 = rng.random_range(0.0..2.0 * PI);
            for k in 1..=3 {
                let kf = k as f64;
                if kf * f >= 0.45 * sr {
                    break;
                }
                for i in 0..len {
                    let edge = (i as f64).min((len - i) as f64);
                    let t = (start + i) as f64 / sr;
                    chords[start + i] += raised_cosine(edge / fade) / kf * (2.0 * PI * kf * f * t + kf * ph0).sin();
                }
            }
        }
    }
    unit_rms(&mut chords);

    let mut out: Vec<f64> = (0..n).map(|i| 0.3 * noise[i] + 0.8 * drums[i] + 0.5 * chords[i]).collect();
    peak_normalize(&mut out, 0.5);
    Ok(Waveform { samples: out, sample_rate })
}

fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Drops low-energy stretches. The signal is cut into hop-sized blocks; a
/// block survives when both its own mean power and that of the analysis
/// frame starting at it reach `threshold_db` relative to the loudest frame.
/// Surviving blocks are concatenated. An all-silent input gives an empty
/// waveform.
pub fn trim_silence(w: &Waveform, frame: usize, hop: usize, threshold_db: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("cannot trim an empty waveform".into()));
    }
    if frame == 0 || hop == 0 || hop > frame {
        return Err(Error::InvalidArgument(format!("bad frame/hop {frame}/{hop}")));
    }
    let x = &w.samples;
    let n = x.len();
    let starts: Vec<usize> = (0..n).step_by(hop).collect();
    let frame_power: Vec<f64> = starts.iter().map(|&s| mean_power(&x[s..(s + frame).min(n)])).collect();
    let full: Vec<f64> =
        starts.iter().zip(&frame_power).filter(|(&s, _)| s + frame <= n || n < frame).map(|(_, &p)| p).collect();
    let peak = full.iter().copied().fold(0.0, f64::max);
    let mut samples = Vec::with_capacity(n);
    if peak > 0.0 {
        let thr = peak * 10f64.powf(threshold_db / 10.0);
        for (&s, &fp) in starts.iter().zip(&frame_power) {
            let block = &x[s..(s + hop).min(n)];
            if fp >= thr && mean_power(block) >= thr {
                samples.extend_from_slice(block);
            }
        }
    }
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Scales `b` so that `a` is `snr_db` louder, truncates both to the
/// shorter length and sums them. If the mixture would clip, the mixture
/// and both sources share one gain bringing the peak to 1.
pub fn mix_at_snr(a: &Waveform, b: &Waveform, snr_db: f64) -> Result<MixtureExample> {
    if a.sample_rate != b.sample_rate {
        return Err(Error::SampleRateMismatch { expected: a.sample_rate, actual: b.sample_rate });
    }
    let n = a.len().min(b.len());
    let a = a.truncated(n);
    let b = b.truncated(n);
    let (ra, rb) = (a.rms(), b.rms());
    if ra == 0.0 || rb == 0.0 {
        return Err(Error::SilentInput("cannot mix a silent source".into()));
    }
    let b = b.scaled(ra / rb * 10f64.powf(-snr_db / 20.0));
    let mixture: Vec<f64> = a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect();
    let mut ex = MixtureExample {
        id: String::new(),
        mixture: Waveform { samples: mixture, sample_rate: a.sample_rate },
        sources: vec![a, b],
    };
    let peak = ex.mixture.peak();
    if peak > 1.0 {
        ex.mixture = ex.mixture.scaled(1.0 / peak);
        ex.sources = ex.sources.iter().map(|s| s.scaled(1.0 / peak)).collect();
    }
    Ok(ex)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

/// One manifest line. Paths are as written, relative to the manifest root
/// unless absolute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub sources: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    /// Shared by every file; `None` for an empty manifest.
    pub sample_rate: Option<u32>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.id);
            for p in std::iter::once(&e.mixture).chain(&e.sources) {
                out.push('\t');
                out.push_str(&p.to_string_lossy());
            }
            out.push('\n');
        }
        out
    }
}

/// Reads a manifest. The split is taken from the file stem (`train.tsv`,
/// `val.tsv`, `test.tsv`); any other name is treated as a test list.
/// Every referenced file must exist and all must share one sample rate.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let split = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()).unwrap_or(Split::Test);
    let bad = |line: usize, msg: String| Error::Manifest { path: path.to_path_buf(), line, msg };
    let mut entries = Vec::new();
    let mut sample_rate = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(bad(
                line_no,
                format!("expected id, mixture and at least two sources, got {} fields", fields.len()),
            ));
        }
        let entry = ManifestEntry {
            id: fields[0].to_string(),
            mixture: PathBuf::from(fields[1]),
            sources: fields[2..].iter().map(PathBuf::from).collect(),
        };
        for p in std::iter::once(&entry.mixture).chain(&entry.sources) {
            let full = root.join(p);
            if !full.is_file() {
                return Err(bad(line_no, format!("missing file {}", full.display())));
            }
            let rate = probe_sample_rate(&full)?;
            match sample_rate {
                None => sample_rate = Some(rate),
                Some(r) if r != rate => {
                    return Err(bad(line_no, format!("{} is {rate} Hz, expected {r} Hz", full.display())));
                }
                Some(_) => {}
            }
        }
        entries.push(entry);
    }
    Ok(DatasetManifest { root, split, sample_rate, entries })
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    fs::write(path, m.to_tsv()).map_err(|e| Error::io(path, e))
}

pub fn load_example(m: &DatasetManifest, e: &ManifestEntry) -> Result<MixtureExample> {
    let mixture = read_wav(&m.resolve(&e.mixture), m.sample_rate)?;
    let sources = e.sources.iter().map(|p| read_wav(&m.resolve(p), m.sample_rate)).collect::<Result<Vec<_>>>()?;
    let ex = MixtureExample { id: e.id.clone(), mixture, sources };
    let n = ex.mixture.len();
    if ex.sources.iter().any(|s| s.len() != n) {
        return Err(Error::ShapeMismatch(format!("{}: files differ in length", ex.id)));
    }
    Ok(ex)
}

pub fn load_examples(m: &DatasetManifest) -> Result<Vec<MixtureExample>> {
    m.entries.par_iter().map(|e| load_example(m, e)).collect()
}

/// Generator settings for a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Seconds per example.
    pub duration: f64,
    pub sample_rate: u32,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_train: 40, n_val: 8, n_test: 10, duration: 10.0, sample_rate: 8000, snr_db: 0.0, seed: 0 }
    }
}

impl CorpusConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }
}

/// The three manifests of a generated corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn total_duration_secs(&self) -> f64 {
        Split::ALL
            .iter()
            .map(|&s| {
                let m = self.split(s);
                m.sample_rate.map_or(0.0, |sr| {
                    m.entries.iter().filter_map(|e| crate::wav::probe_len(&m.resolve(&e.mixture)).ok()).sum::<usize>()
                        as f64
                        / sr as f64
                })
            })
            .sum()
    }
}

fn example_seed(seed: u64, split: Split, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 40) | index as u64);
    rng.random()
}

/// Synthesizes one example in memory. Sources land on the 16-bit grid and
/// the mixture is their exact sum, so the files on disk satisfy the
/// mixture invariant without rounding error.
pub fn synth_example(id: &str, cfg: &CorpusConfig, seed: u64) -> Result<MixtureExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = check_duration(cfg.duration, cfg.sample_rate)?;
    let long = cfg.duration * 1.5;
    let trim = |w: Waveform| trim_silence(&w, TRIM_FRAME, TRIM_HOP, TRIM_THRESHOLD_DB);
    let vocals = trim(synth_vocal(long, cfg.sample_rate, rng.random())?)?;
    let accomp = trim(synth_accompaniment(long, cfg.sample_rate, rng.random())?)?;
    let mut ex = mix_at_snr(&vocals.truncated(target), &accomp.truncated(target), cfg.snr_db)?;
    ex.id = id.to_string();
    let peak = ex.mixture.peak();
    let gain = if peak > HEADROOM { HEADROOM / peak } else { 1.0 };
    for s in &mut ex.sources {
        s.samples.iter_mut().for_each(|x| *x = dequantize(quantize(*x * gain)));
    }
    let n = ex.mixture.len();
    ex.mixture.samples = (0..n).map(|i| ex.sources.iter().map(|s| s.samples[i]).sum()).collect();
    Ok(ex)
}

/// All examples of one split, in memory. Identical to what
/// [`build_dataset`] writes for that split.
pub fn synth_split(cfg: &CorpusConfig, split: Split) -> Result<Vec<MixtureExample>> {
    (0..cfg.count(split))
        .into_par_iter()
        .map(|i| synth_example(&format!("{}_{i:04}", split.name()), cfg, example_seed(cfg.seed, split, i)))
        .collect()
}

/// Generates and writes a corpus under `out_root`: one directory of WAV
/// files and one manifest per split.
pub fn build_dataset(cfg: &CorpusConfig, out_root: &Path) -> Result<Corpus> {
    let mut manifests = Vec::with_capacity(3);
    for split in Split::ALL {
        let n = cfg.count(split);
        let dir = out_root.join(split.name());
        if n > 0 {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        } else {
            fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
        }
        let entries = synth_split(cfg, split)?
            .into_par_iter()
            .map(|ex| {
                let rel = |suffix: &str| PathBuf::from(split.name()).join(format!("{}.{suffix}.wav", ex.id));
                let entry = ManifestEntry {
                    id: ex.id.clone(),
                    mixture: rel("mix"),
                    sources: (0..ex.sources.len()).map(|c| rel(&format!("src{c}"))).collect(),
                };
                write_wav(&out_root.join(&entry.mixture), &ex.mixture)?;
                for (p, s) in entry.sources.iter().zip(&ex.sources) {
                    write_wav(&out_root.join(p), s)?;
                }
                Ok(entry)
            })
            .collect::<Result<Vec<_>>>()?;
        let m = DatasetManifest {
            root: out_root.to_path_buf(),
            split,
            sample_rate: (n > 0).then_some(cfg.sample_rate),
            entries,
        };
        write_manifest(&out_root.join(format!("{}.tsv", split.name())), &m)?;
        manifests.push(m);
    }
    let mut it = manifests.into_iter();
    let (train, val, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(Corpus { train, val, test })
}

/// Anything indexed by frame along one axis.
pub trait Frames: Sized {
    fn n_frames(&self) -> usize;
    fn slice_frames(&self, range: std::ops::Range<usize>) -> Self;
}

impl Frames for Array2<f64> {
    fn n_frames(&self) -> usize {
        self.nrows()
    }

    fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        self.slice(s![range, ..]).to_owned()
    }
}

/// (C, T, F) stacks, frames on axis 1.
impl Frames for Array3<f64> {
    fn n_frames(&self) -> usize {
        self.shape()[1]
    }

    fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        self.slice(s![.., range, ..]).to_owned()
    }
}

impl Frames for LabelMatrix {
    fn n_frames(&self) -> usize {
        self.n_frames
    }

    fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        LabelMatrix::slice_frames(self, range)
    }
}

impl Frames for MaskSet {
    fn n_frames(&self) -> usize {
        self.shape().0
    }

    fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        MaskSet::slice_frames(self, range)
    }
}

impl Frames for Targets {
    fn n_frames(&self) -> usize {
        Targets::n_frames(self)
    }

    fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        Targets::slice_frames(self, range)
    }
}

/// Cuts paired inputs and targets into non-overlapping windows of `len`
/// frames. A trailing partial window is dropped.
pub fn segment<A: Frames, B: Frames>(feats: &A, targets: &B, len: usize) -> Result<Vec<(A, B)>> {
    if len == 0 {
        return Err(Error::InvalidArgument("segment length must be at least one frame".into()));
    }
    let t = feats.n_frames();
    if targets.n_frames() != t {
        return Err(Error::ShapeMismatch(format!("{} input frames vs {} target frames", t, targets.n_frames())));
    }
    if t < len {
        log::warn!("{t} frames is shorter than one {len}-frame segment; nothing to train on");
    }
    Ok((0..t / len)
        .map(|k| {
            let r = k * len..(k + 1) * len;
            (feats.slice_frames(r.clone()), targets.slice_frames(r))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::stft;

    #[test]
    fn generators_are_deterministic_and_bounded() {
        for synth in [synth_vocal, synth_accompaniment] {
            let a = synth(2.0, 8000, 5).unwrap();
            assert_eq!(a, synth(2.0, 8000, 5).unwrap());
            assert_ne!(a, synth(2.0, 8000, 6).unwrap());
            assert_eq!(a.len(), 16000);
            let rms = a.rms();
            assert!(rms > 0.0 && rms < 1.0);
            assert!(a.peak() <= 1.0);
        }
        assert!(synth_vocal(0.0, 8000, 1).is_err());
    }

    #[test]
    fn vocal_spectral_peak_tracks_f0() {
        let sr = 8000;
        let (x, f0) = vocal_parts(3 * sr as usize, sr, 11);
        let w = Waveform::new(x, sr).unwrap();
        let spec = stft(&w, 1024, 256).unwrap();
        let mags = spec.magnitudes();
        let bin_hz = sr as f64 / 1024.0;
        let mut checked = 0;
        for (t, row) in mags.outer_iter().enumerate() {
            let frame = &w.samples[t * 256..t * 256 + 1024];
            if mean_power(frame) < 1e-3 {
                continue;
            }
            let span = &f0[t * 256..t * 256 + 1024];
            let lo = span.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = span.iter().copied().fold(0.0, f64::max);
            let peak_hz = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as f64 * bin_hz;
            assert!(
                peak_hz >= lo - 2.0 * bin_hz && peak_hz <= hi + 2.0 * bin_hz,
                "frame {t}: peak {peak_hz} Hz, f0 in [{lo}, {hi}] Hz"
            );
            checked += 1;
        }
        assert!(checked > 20);
        assert!(f0.iter().all(|&f| (120.0..=400.0).contains(&f)));
    }

    fn flatness(w: &Waveform) -> f64 {
        let p = stft(w, 512, 128).unwrap().magnitudes().mapv(|m| m * m + 1e-12);
        let mean_spec = p.mean_axis(ndarray::Axis(0)).unwrap();
        let geo = mean_spec.mapv(f64::ln).mean().unwrap().exp();
        geo / mean_spec.mean().unwrap()
    }

    #[test]
    fn accompaniment_is_flatter_than_vocals() {
        for seed in 0..3 {
            let v = synth_vocal(3.0, 8000, seed).unwrap();
            let a = synth_accompaniment(3.0, 8000, seed).unwrap();
            assert!(flatness(&a) > flatness(&v), "seed {seed}");
        }
    }

    fn tone(n: usize, sr: u32) -> Vec<f64> {
        (0..n).map(|i| 0.9 * (2.0 * PI * 440.0 * i as f64 / sr as f64).sin()).collect()
    }

    #[test]
    fn trim_handles_silence_and_steady_tones() {
        let silent = Waveform::zeros(4000, 8000);
        assert!(trim_silence(&silent, 512, 128, -40.0).unwrap().is_empty());
        let t = Waveform::new(tone(8000, 8000), 8000).unwrap();
        let out = trim_silence(&t, 512, 128, -40.0).unwrap();
        assert!(t.len() - out.len() <= 512);
        assert!(trim_silence(&Waveform::zeros(0, 8000), 512, 128, -40.0).is_err());
    }

    #[test]
    fn trim_removes_padding() {
        let sr = 8000;
        let n_tone = 12_345;
        let mut x = vec![0.0; sr as usize];
        x.extend(tone(n_tone, sr));
        x.extend(vec![0.0; sr as usize]);
        let out = trim_silence(&Waveform::new(x, sr).unwrap(), 512, 128, -40.0).unwrap();
        assert!(out.len().abs_diff(n_tone) <= 128, "{} vs {n_tone}", out.len());
    }

    #[test]
    fn mixing_sets_the_level_ratio() {
        let a = synth_vocal(1.0, 8000, 1).unwrap();
        let b = synth_accompaniment(1.2, 8000, 2).unwrap();
        let ex = mix_at_snr(&a, &b, 0.0).unwrap();
        assert_eq!(ex.mixture.len(), 8000);
        assert!((ex.sources[0].rms() - ex.sources[1].rms()).abs() < 1e-9);
        ex.check(1e-12).unwrap();

        // Quiet enough that no normalization gain is applied.
        let ex6 = mix_at_snr(&a.scaled(0.5), &b, 6.0).unwrap();
        assert!(ex6.mixture.peak() <= 1.0);
        let ratio = ex6.sources[0].rms() / ex6.sources[1].rms();
        assert!((ratio - 10f64.powf(0.3)).abs() < 1e-9);
        for (i, m) in ex6.mixture.samples.iter().enumerate() {
            assert_eq!(*m, ex6.sources[0].samples[i] + ex6.sources[1].samples[i]);
        }

        assert!(matches!(mix_at_snr(&a, &Waveform::zeros(100, 8000), 0.0), Err(Error::SilentInput(_))));
        assert!(mix_at_snr(&a, &Waveform::zeros(100, 16000), 0.0).is_err());
    }

    #[test]
    fn loud_mixtures_are_normalized_jointly() {
        let a = Waveform::new(vec![0.8, -0.8, 0.8, -0.8], 8000).unwrap();
        let b = Waveform::new(vec![0.8, -0.8, 0.8, -0.8], 8000).unwrap();
        let ex = mix_at_snr(&a, &b, 0.0).unwrap();
        assert!((ex.mixture.peak() - 1.0).abs() < 1e-12);
        assert!((ex.sources[0].samples[0] - 0.5).abs() < 1e-12);
        ex.check(1e-15).unwrap();
    }

    #[test]
    fn empty_corpus_writes_empty_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { n_train: 0, n_val: 0, n_test: 0, ..Default::default() };
        let corpus = build_dataset(&cfg, dir.path()).unwrap();
        assert!(corpus.train.is_empty() && corpus.val.is_empty() && corpus.test.is_empty());
        let back = load_manifest(&dir.path().join("val.tsv")).unwrap();
        assert_eq!(back.split, Split::Val);
        assert!(back.is_empty());
    }

    #[test]
    fn corpus_reloads_and_satisfies_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { n_train: 2, n_val: 1, n_test: 1, duration: 1.0, ..Default::default() };
        let corpus = build_dataset(&cfg, dir.path()).unwrap();
        let train = load_manifest(&dir.path().join("train.tsv")).unwrap();
        assert_eq!(train, corpus.train);
        assert_eq!(train.sample_rate, Some(8000));
        for ex in load_examples(&train).unwrap() {
            assert_eq!(ex.sources.len(), 2);
            assert_eq!(ex.mixture.len(), 8000);
            ex.check(1e-6).unwrap();
            ex.check(0.0).unwrap();
        }
        assert!((corpus.total_duration_secs() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.tsv");
        fs::write(&path, "# comment\nid\ta.wav\tb.wav\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "id\ta.wav\tb.wav\tc.wav\n").unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn segmentation_counts_and_slices() {
        let feats = Array2::from_shape_fn((250, 3), |(t, k)| (t * 3 + k) as f64);
        let targets = Array3::from_shape_fn((2, 250, 4), |(c, t, f)| (c * 1000 + t * 4 + f) as f64);
        let segs = segment(&feats, &targets, 100).unwrap();
        assert_eq!(segs.len(), 2);
        for (k, (x, y)) in segs.iter().enumerate() {
            assert_eq!(x, &feats.slice(s![k * 100..(k + 1) * 100, ..]));
            assert_eq!(y, &targets.slice(s![.., k * 100..(k + 1) * 100, ..]));
        }
        let exact = feats.slice(s![..100, ..]).to_owned();
        assert_eq!(segment(&exact, &targets.slice_frames(0..100), 100).unwrap().len(), 1);
        assert!(segment(&exact, &targets.slice_frames(0..100), 101).unwrap().is_empty());
        assert!(segment(&exact, &targets, 10).is_err());
        assert!(segment(&exact, &exact, 0).is_err());
    }

    #[test]
    fn label_segments_follow_frames() {
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let y = LabelMatrix::from_assignments(&labels, 10, 3, 2).unwrap();
        let feats = Array2::<f64>::zeros((10, 2));
        let segs = segment(&feats, &y, 4).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].1.assignments(), labels[12..24].to_vec());
    }
}
