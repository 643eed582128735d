//! K-means over embeddings and the segment-wise inference pipeline.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure_shape, Error, Result};
use crate::features::{analyze, network_input, FeatureConfig};
use crate::masking::MaskSet;
use crate::model::{forward, ChimeraParams};
use crate::signal::{mel_reconstruct, ComplexSpectrogram, MelFilterbank, MelSpectrogram, Waveform};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Independent k-means++ initializations per call.
pub const RESTARTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// (k, D)
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment pass; non-increasing.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lower index) and distances.
fn assign(points: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let cs: Vec<&[f64]> = centroids.outer_iter().map(|c| c.to_slice().expect("contiguous")).collect();
    points
        .outer_iter()
        .map(|p| {
            let p = p.to_slice().expect("contiguous");
            let mut best = (0, f64::INFINITY);
            for (j, c) in cs.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

fn plus_plus_init(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> =
        points.outer_iter().map(|p| sq_dist(p.to_slice().unwrap(), centroids.row(0).to_slice().unwrap())).collect();
    for j in 1..k {
        let idx = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every point coincides with a chosen centroid.
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(j).assign(&points.row(idx));
        let c = centroids.row(j).to_owned();
        for (d, p) in d2.iter_mut().zip(points.outer_iter()) {
            *d = d.min(sq_dist(p.to_slice().unwrap(), c.as_slice().unwrap()));
        }
    }
    centroids
}

/// K-means with k-means++ seeding and Lloyd iterations. Each run stops
/// when no centroid moves more than `tol` (Euclidean) or after `max_iter`
/// passes; an emptied cluster is reseeded at the point farthest from its
/// centroid. The best of [`RESTARTS`] seeded runs is returned.
pub fn kmeans(v: ArrayView2<f64>, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let n = v.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("k-means needs 1 <= k <= points, got k={k}, {n} points")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let points = v.as_standard_layout().into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..RESTARTS {
        let run = lloyd(&points, k, &mut rng, max_iter, tol);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

fn lloyd(points: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng, max_iter: usize, tol: f64) -> KMeansResult {
    let n = points.nrows();
    let mut centroids = plus_plus_init(points, k, rng);
    let (mut assignments, mut dists) = assign(points, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &a) in points.outer_iter().zip(&assignments) {
            sums.row_mut(a).scaled_add(1.0, &p);
            counts[a] += 1;
        }
        let mut next = centroids.clone();
        for (j, &count) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
            next.row_mut(j).assign(&(&sums.row(j) / count as f64));
        }
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let far = (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a))).expect("non-empty");
            next.row_mut(j).assign(&points.row(far));
            dists[far] = 0.0;
        }
        let shift = centroids
            .outer_iter()
            .zip(next.outer_iter())
            .map(|(a, b)| sq_dist(a.to_slice().unwrap(), b.to_slice().unwrap()).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (a, d) = assign(points, &centroids);
        assignments = a;
        dists = d;
        let inertia = dists.iter().sum::<f64>();
        let prev = *history.last().expect("seeded");
        assert!(inertia <= prev + 1e-9 * prev.max(1.0), "k-means inertia rose from {prev} to {inertia}");
        history.push(inertia);
        if shift < tol {
            break;
        }
    }
    let inertia = *history.last().expect("non-empty");
    KMeansResult { assignments, centroids, inertia, iterations, history }
}

/// Binary masks from cluster labels over a `t`×`f` plane in (t, f) order.
pub fn embeddings_to_masks(r: &KMeansResult, t: usize, f: usize) -> Result<MaskSet> {
    ensure_shape(r.assignments.len() == t * f, || format!("{} assignments for a {t}x{f} plane", r.assignments.len()))?;
    let mut masks = Array3::zeros((r.k(), t, f));
    for (i, &a) in r.assignments.iter().enumerate() {
        masks[[a, i / f, i % f]] = 1.0;
    }
    Ok(MaskSet::new(masks))
}

/// Clusters embeddings (T·F, D) into `k` binary masks.
pub fn masks_from_embeddings(v: ArrayView2<f64>, t: usize, f: usize, k: usize, seed: u64) -> Result<MaskSet> {
    let r = kmeans(v, k, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    embeddings_to_masks(&r, t, f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Head {
    /// Deep clustering: K-means over the embeddings of the whole signal.
    Dc,
    /// Mask inference: the softmax masks as they are.
    #[default]
    Mi,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Dc => "dc",
            Head::Mi => "mi",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dc" => Ok(Head::Dc),
            "mi" => Ok(Head::Mi),
            _ => Err(Error::InvalidArgument(format!("unknown head '{s}', expected dc or mi"))),
        }
    }
}

/// Inference settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceConfig {
    pub head: Head,
    /// Frames per independently processed segment; the last segment may be
    /// shorter.
    pub segment_frames: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { head: Head::Mi, segment_frames: 100, seed: 0 }
    }
}

fn check_compat(p: &ChimeraParams, fcfg: &FeatureConfig) -> Result<()> {
    let cfg = p.config;
    ensure_shape(cfg.input_dim == fcfg.input_dim() && cfg.n_freq == fcfg.n_mel, || {
        format!(
            "model expects {} inputs over {} bands, features give {} over {}",
            cfg.input_dim,
            cfg.n_freq,
            fcfg.input_dim(),
            fcfg.n_mel
        )
    })
}

/// Mel-domain masks (C, T, F) for a mixture mel spectrogram.
pub fn infer_masks(
    p: &ChimeraParams,
    fcfg: &FeatureConfig,
    mel: &MelSpectrogram,
    icfg: &InferenceConfig,
) -> Result<MaskSet> {
    check_compat(p, fcfg)?;
    if icfg.segment_frames == 0 {
        return Err(Error::InvalidArgument("segment length must be at least one frame".into()));
    }
    let feats = network_input(fcfg, mel.mags.view());
    let t_len = feats.nrows();
    let starts: Vec<usize> = (0..t_len).step_by(icfg.segment_frames).collect();
    let outputs = starts
        .par_iter()
        .map(|&s0| forward(p, feats.slice(s![s0..(s0 + icfg.segment_frames).min(t_len), ..])))
        .collect::<Result<Vec<_>>>()?;
    match icfg.head {
        Head::Mi => {
            let views: Vec<_> = outputs.iter().map(|o| o.masks.view()).collect();
            let masks = concatenate(Axis(1), &views).expect("same C and F");
            Ok(MaskSet::new(masks))
        }
        Head::Dc => {
            let views: Vec<_> = outputs.iter().map(|o| o.embeddings.view()).collect();
            let v = concatenate(Axis(0), &views).expect("same D");
            masks_from_embeddings(v.view(), t_len, p.config.n_freq, p.config.n_sources, icfg.seed)
        }
    }
}

/// Separated signals, as long as the input, with the masks that produced
/// them.
#[derive(Debug, Clone)]
pub struct Separation {
    pub sources: Vec<Waveform>,
    pub masks: MaskSet,
}

/// Applies each mel mask to the mixture spectrogram and resynthesizes.
pub fn reconstruct_all(masks: &MaskSet, spec: &ComplexSpectrogram, fb: &MelFilterbank) -> Result<Vec<Waveform>> {
    (0..masks.n_sources()).map(|c| mel_reconstruct(masks.mask(c), spec, fb)).collect()
}

pub fn separate(
    p: &ChimeraParams,
    fcfg: &FeatureConfig,
    fb: &MelFilterbank,
    mixture: &Waveform,
    icfg: &InferenceConfig,
) -> Result<Separation> {
    check_compat(p, fcfg)?;
    let a = analyze(fcfg, fb, mixture)?;
    let masks = infer_masks(p, fcfg, &a.mel, icfg)?;
    let sources = reconstruct_all(&masks, &a.spectrogram, fb)?.iter().map(|w| a.unpad(w)).collect();
    Ok(Separation { sources, masks })
}
