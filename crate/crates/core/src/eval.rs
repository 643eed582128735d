//! Test-set scoring of trained models and oracle masks.

use itertools::Itertools;
use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;

use crate::cluster::{infer_masks, reconstruct_all, InferenceConfig};
use crate::data::MixtureExample;
use crate::error::{ensure_shape, Result};
use crate::features::{analyze, prepare_utterance, FeatureConfig, Utterance};
use crate::masking::{ideal_binary_mask, MaskSet};
use crate::metrics::{best_permutation_sdri, EvalRecord};
use crate::model::ChimeraParams;
use crate::signal::{MelFilterbank, Waveform};

/// Where the masks applied to a test mixture come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    Model {
        params: &'a ChimeraParams,
        inference: InferenceConfig,
    },
    /// Ideal binary masks computed from the reference sources.
    OracleIbm,
}

/// Masks for one example plus the waveforms they produce.
#[derive(Debug, Clone)]
pub struct ExampleOutput {
    pub masks: MaskSet,
    pub estimates: Vec<Waveform>,
}

pub fn run_example(
    ex: &MixtureExample,
    fcfg: &FeatureConfig,
    fb: &MelFilterbank,
    source: MaskSource<'_>,
) -> Result<ExampleOutput> {
    let mix = analyze(fcfg, fb, &ex.mixture)?;
    let masks = match source {
        MaskSource::Model { params, inference } => infer_masks(params, fcfg, &mix.mel, &inference)?,
        MaskSource::OracleIbm => {
            let mels = ex.sources.iter().map(|s| analyze(fcfg, fb, s).map(|a| a.mel)).collect::<Result<Vec<_>>>()?;
            ideal_binary_mask(&mels)?.1
        }
    };
    let estimates = reconstruct_all(&masks, &mix.spectrogram, fb)?.iter().map(|w| mix.unpad(w)).collect();
    Ok(ExampleOutput { masks, estimates })
}

/// Separates and scores one example.
pub fn evaluate_example(
    ex: &MixtureExample,
    fcfg: &FeatureConfig,
    fb: &MelFilterbank,
    source: MaskSource<'_>,
) -> Result<EvalRecord> {
    let out = run_example(ex, fcfg, fb, source)?;
    let mut rec = best_permutation_sdri(&out.estimates, &ex.sources, &ex.mixture)?;
    rec.id = ex.id.clone();
    Ok(rec)
}

pub fn evaluate_set(
    examples: &[MixtureExample],
    fcfg: &FeatureConfig,
    fb: &MelFilterbank,
    source: MaskSource<'_>,
) -> Result<Vec<EvalRecord>> {
    examples.par_iter().map(|ex| evaluate_example(ex, fcfg, fb, source)).collect()
}

/// Network inputs and targets for every example.
pub fn prepare_set(examples: &[MixtureExample], fcfg: &FeatureConfig, fb: &MelFilterbank) -> Result<Vec<Utterance>> {
    examples.par_iter().map(|ex| prepare_utterance(fcfg, fb, &ex.id, &ex.mixture, &ex.sources)).collect()
}

/// Fraction of the loudest quarter of mixture bins on which the masks'
/// winning source matches the oracle label, under the best relabeling of
/// the masks.
pub fn top_quartile_agreement(masks: &MaskSet, oracle: &MaskSet, mixture_mel: ArrayView2<f64>) -> Result<f64> {
    ensure_shape(masks.masks.dim() == oracle.masks.dim() && masks.shape() == mixture_mel.dim(), || {
        format!("masks {:?}, oracle {:?}, mixture {:?}", masks.masks.dim(), oracle.masks.dim(), mixture_mel.dim())
    })?;
    let mut mags: Vec<f64> = mixture_mel.iter().copied().collect();
    mags.sort_by(f64::total_cmp);
    let threshold = mags[(3 * mags.len()) / 4];
    let winner = |m: &MaskSet| {
        m.masks.map_axis(Axis(0), |v| {
            v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).map_or(0, |(i, _)| i)
        })
    };
    let got = winner(masks);
    let want = winner(oracle);
    let selected: Vec<(usize, usize)> =
        mixture_mel.indexed_iter().filter(|(_, &m)| m >= threshold).map(|(ix, _)| (got[ix], want[ix])).collect();
    let c = masks.n_sources();
    let best =
        (0..c).permutations(c).map(|perm| selected.iter().filter(|(g, w)| perm[*g] == *w).count()).max().unwrap_or(0);
    Ok(best as f64 / selected.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    #[test]
    fn agreement_counts_only_loud_bins_and_relabels() {
        let mix = Array2::from_shape_fn((2, 4), |(t, f)| (t * 4 + f) as f64);
        // Loud quarter: bins (1,2) and (1,3).
        let oracle = MaskSet::new(Array3::from_shape_fn((2, 2, 4), |(c, _, f)| ((f % 2) == c) as u8 as f64));
        let swapped = MaskSet::new(Array3::from_shape_fn((2, 2, 4), |(c, _, f)| ((f % 2) != c) as u8 as f64));
        assert_eq!(top_quartile_agreement(&swapped, &oracle, mix.view()).unwrap(), 1.0);
        let half = MaskSet::new(Array3::from_shape_fn((2, 2, 4), |(c, t, f)| {
            if t == 1 && f == 3 {
                (c == 0) as u8 as f64
            } else {
                ((f % 2) == c) as u8 as f64
            }
        }));
        assert_eq!(top_quartile_agreement(&half, &oracle, mix.view()).unwrap(), 0.5);
        assert!(top_quartile_agreement(&half, &oracle, mix.t()).is_err());
    }
}
