//! Training targets and mask bookkeeping.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{ensure_shape, Error, Result};
use crate::signal::{MelFilterbank, MelSpectrogram};

/// Floor in the Wiener-like denominator so silent bins stay finite.
pub const WIENER_EPS: f64 = 1e-10;

/// Largest TF for which an explicit TF×TF matrix may be built.
pub const AFFINITY_GUARD: usize = 4096;

/// Upper edge of the band used to tell accompaniment from vocals.
pub const LOW_BAND_HZ: f64 = 200.0;

/// One-hot dominance labels, one row per T-F bin in (t, f) row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub rows: Array2<f64>,
    pub n_frames: usize,
    pub n_freq: usize,
}

impl LabelMatrix {
    pub fn from_assignments(assignments: &[usize], n_frames: usize, n_freq: usize, n_sources: usize) -> Result<Self> {
        ensure_shape(assignments.len() == n_frames * n_freq, || {
            format!("{} labels for {}x{} bins", assignments.len(), n_frames, n_freq)
        })?;
        if n_sources < 2 {
            return Err(Error::InvalidArgument("need at least two sources".into()));
        }
        let mut rows = Array2::zeros((assignments.len(), n_sources));
        for (i, &c) in assignments.iter().enumerate() {
            if c >= n_sources {
                return Err(Error::InvalidArgument(format!("label {c} >= {n_sources}")));
            }
            rows[[i, c]] = 1.0;
        }
        Ok(Self { rows, n_frames, n_freq })
    }

    pub fn n_sources(&self) -> usize {
        self.rows.ncols()
    }

    pub fn n_bins(&self) -> usize {
        self.rows.nrows()
    }

    pub fn assignments(&self) -> Vec<usize> {
        self.rows.outer_iter().map(|r| r.iter().position(|&v| v == 1.0).unwrap_or(0)).collect()
    }

    /// Frames `range` of the label matrix.
    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        let rows = self.rows.slice(ndarray::s![range.start * self.n_freq..range.end * self.n_freq, ..]).to_owned();
        Self { rows, n_frames: range.len(), n_freq: self.n_freq }
    }
}

/// C masks over the T×F plane, stored as a (C, T, F) array.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Array3<f64>,
    pub source_names: Option<Vec<String>>,
}

impl MaskSet {
    pub fn new(masks: Array3<f64>) -> Self {
        Self { masks, source_names: None }
    }

    pub fn n_sources(&self) -> usize {
        self.masks.len_of(Axis(0))
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, t, f) = self.masks.dim();
        (t, f)
    }

    pub fn mask(&self, c: usize) -> ArrayView2<'_, f64> {
        self.masks.index_axis(Axis(0), c)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.source_names.as_ref()?.iter().position(|n| n == name)
    }

    pub fn slice_frames(&self, range: std::ops::Range<usize>) -> Self {
        Self { masks: self.masks.slice(ndarray::s![.., range, ..]).to_owned(), source_names: self.source_names.clone() }
    }
}

fn check_sources(source_mels: &[MelSpectrogram]) -> Result<(usize, usize)> {
    let first = source_mels.first().ok_or_else(|| Error::InvalidArgument("no sources given".into()))?;
    let dim = first.mags.dim();
    for (c, s) in source_mels.iter().enumerate() {
        ensure_shape(s.mags.dim() == dim, || format!("source {c} is {:?}, source 0 is {:?}", s.mags.dim(), dim))?;
    }
    Ok(dim)
}

/// Dominant-source labels; ties go to the lowest source index.
pub fn ideal_binary_mask(source_mels: &[MelSpectrogram]) -> Result<(LabelMatrix, MaskSet)> {
    let (t_len, f_len) = check_sources(source_mels)?;
    let n_sources = source_mels.len();
    if n_sources < 2 {
        return Err(Error::InvalidArgument("need at least two sources".into()));
    }
    let mut assignments = Vec::with_capacity(t_len * f_len);
    let mut masks = Array3::zeros((n_sources, t_len, f_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let mut best = 0;
            for c in 1..n_sources {
                if source_mels[c].mags[[t, f]] > source_mels[best].mags[[t, f]] {
                    best = c;
                }
            }
            masks[[best, t, f]] = 1.0;
            assignments.push(best);
        }
    }
    let labels = LabelMatrix::from_assignments(&assignments, t_len, f_len, n_sources)?;
    Ok((labels, MaskSet::new(masks)))
}

/// Squared-magnitude ratio reference masks.
pub fn wiener_like_mask(source_mels: &[MelSpectrogram]) -> Result<MaskSet> {
    let (t_len, f_len) = check_sources(source_mels)?;
    let n_sources = source_mels.len();
    let mut masks = Array3::zeros((n_sources, t_len, f_len));
    for t in 0..t_len {
        for f in 0..f_len {
            let denom: f64 = source_mels.iter().map(|s| s.mags[[t, f]].powi(2)).sum::<f64>() + WIENER_EPS;
            for (c, s) in source_mels.iter().enumerate() {
                masks[[c, t, f]] = s.mags[[t, f]].powi(2) / denom;
            }
        }
    }
    Ok(MaskSet::new(masks))
}

/// Names a two-mask set: the mask owning more than half of the nonzero
/// low-band (< 200 Hz) entries is the accompaniment.
pub fn assign_vocals_by_low_freq(ms: &MaskSet, fb: &MelFilterbank) -> Result<MaskSet> {
    if ms.n_sources() != 2 {
        return Err(Error::InvalidArgument(format!("vocal naming needs exactly 2 masks, got {}", ms.n_sources())));
    }
    let (_, f_len) = ms.shape();
    ensure_shape(f_len == fb.n_mel(), || format!("masks have {f_len} bands, filterbank {}", fb.n_mel()))?;
    let low: Vec<usize> = (0..f_len).filter(|&f| fb.centers[f] < LOW_BAND_HZ).collect();
    let counts: Vec<usize> = (0..2)
        .map(|c| {
            let m = ms.mask(c);
            m.outer_iter().map(|row| low.iter().filter(|&&f| row[f] != 0.0).count()).sum()
        })
        .collect();
    let total = counts[0] + counts[1];
    let accompaniment = if 2 * counts[0] > total {
        0
    } else if 2 * counts[1] > total {
        1
    } else {
        log::warn!("low-band rule is tied ({} vs {} nonzero bins); naming mask 0 accompaniment", counts[0], counts[1]);
        0
    };
    let mut names = vec![String::new(), String::new()];
    names[accompaniment] = "accompaniment".into();
    names[1 - accompaniment] = "vocals".into();
    Ok(MaskSet { masks: ms.masks.clone(), source_names: Some(names) })
}

/// Explicit A = YYᵀ. Only for small problems and tests.
pub fn affinity(y: &LabelMatrix) -> Result<Array2<f64>> {
    if y.n_bins() > AFFINITY_GUARD {
        return Err(Error::SizeGuard { rows: y.n_bins(), limit: AFFINITY_GUARD });
    }
    Ok(y.rows.dot(&y.rows.t()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mel(mags: Array2<f64>) -> MelSpectrogram {
        MelSpectrogram { mags, sample_rate: 8000, window_size: 512, hop_size: 128 }
    }

    #[test]
    fn uniform_dominance_and_ties() {
        let a = mel(Array2::from_elem((2, 3), 1.0));
        let b = mel(Array2::from_elem((2, 3), 2.0));
        let (y, masks) = ideal_binary_mask(&[a.clone(), b]).unwrap();
        assert!(y.rows.column(1).iter().all(|&v| v == 1.0));
        assert!(masks.mask(0).iter().all(|&v| v == 0.0));

        let (y, _) = ideal_binary_mask(&[a.clone(), a]).unwrap();
        assert!(y.assignments().iter().all(|&c| c == 0));
    }

    #[test]
    fn ibm_matches_brute_force_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let srcs: Vec<_> = (0..2).map(|_| mel(Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0..1.0)))).collect();
        let (y, masks) = ideal_binary_mask(&srcs).unwrap();
        for t in 0..3 {
            for f in 0..4 {
                let expect = if srcs[1].mags[[t, f]] > srcs[0].mags[[t, f]] { 1 } else { 0 };
                let row = y.rows.row(t * 4 + f);
                assert_eq!(row.sum(), 1.0);
                assert_eq!(row[expect], 1.0);
                assert_eq!(masks.masks[[expect, t, f]], 1.0);
            }
        }
        let bad = mel(Array2::zeros((3, 5)));
        assert!(ideal_binary_mask(&[srcs[0].clone(), bad]).is_err());
    }

    #[test]
    fn wiener_like_cases() {
        let same = mel(Array2::from_elem((2, 2), 0.7));
        let o = wiener_like_mask(&[same.clone(), same.clone()]).unwrap();
        assert!(o.masks.iter().all(|&v| (v - 0.5).abs() < 1e-9));

        let zero = mel(Array2::zeros((2, 2)));
        let o = wiener_like_mask(&[same, zero]).unwrap();
        assert!(o.mask(0).iter().all(|&v| (v - 1.0).abs() < 1e-9));

        let o = wiener_like_mask(&[mel(array![[3.0]]), mel(array![[4.0]])]).unwrap();
        assert!((o.masks[[0, 0, 0]] - 9.0 / 25.0).abs() < 1e-9);
        assert!((o.masks[[1, 0, 0]] - 16.0 / 25.0).abs() < 1e-9);

        let silent = mel(Array2::zeros((1, 1)));
        let o = wiener_like_mask(&[silent.clone(), silent]).unwrap();
        assert!(o.masks.iter().all(|&v| v == 0.0));
    }

    fn toy_fb() -> MelFilterbank {
        crate::signal::mel_filterbank(32, 512, 8000).unwrap()
    }

    #[test]
    fn low_band_owner_is_accompaniment() {
        let fb = toy_fb();
        let low = fb.centers.iter().filter(|&&c| c < LOW_BAND_HZ).count();
        assert!(low > 0);
        let mut masks = Array3::zeros((2, 4, 32));
        for t in 0..4 {
            for f in 0..32 {
                masks[[if f < low { 0 } else { 1 }, t, f]] = 1.0;
            }
        }
        let named = assign_vocals_by_low_freq(&MaskSet::new(masks.clone()), &fb).unwrap();
        assert_eq!(named.index_of("accompaniment"), Some(0));
        assert_eq!(named.index_of("vocals"), Some(1));

        masks.invert_axis(Axis(0));
        let named = assign_vocals_by_low_freq(&MaskSet::new(masks), &fb).unwrap();
        assert_eq!(named.index_of("accompaniment"), Some(1));

        let tie = assign_vocals_by_low_freq(&MaskSet::new(Array3::zeros((2, 4, 32))), &fb).unwrap();
        assert_eq!(tie.index_of("accompaniment"), Some(0));

        assert!(assign_vocals_by_low_freq(&MaskSet::new(Array3::zeros((3, 4, 32))), &fb).is_err());
    }

    #[test]
    fn affinity_small_cases() {
        let same = LabelMatrix::from_assignments(&[1, 1], 1, 2, 2).unwrap();
        assert_eq!(affinity(&same).unwrap(), Array2::from_elem((2, 2), 1.0));
        let diff = LabelMatrix::from_assignments(&[0, 1], 1, 2, 2).unwrap();
        assert_eq!(affinity(&diff).unwrap(), Array2::eye(2));

        let assign = [0, 1, 1, 0, 1, 0];
        let y = LabelMatrix::from_assignments(&assign, 2, 3, 2).unwrap();
        let a = affinity(&y).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = if assign[i] == assign[j] { 1.0 } else { 0.0 };
                assert_eq!(a[[i, j]], expect);
            }
        }

        let big = LabelMatrix::from_assignments(&vec![0; 4097], 4097, 1, 2).unwrap();
        assert!(matches!(affinity(&big), Err(Error::SizeGuard { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

        proptest! {
            #[test]
            fn ibm_rows_one_hot(seed in any::<u64>(), n_src in 2usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let srcs: Vec<_> = (0..n_src)
                    .map(|_| mel(Array2::from_shape_fn((3, 5), |_| rng.random_range(0.0..1.0))))
                    .collect();
                let (y, _) = ideal_binary_mask(&srcs).unwrap();
                for row in y.rows.outer_iter() {
                    prop_assert_eq!(row.sum(), 1.0);
                    prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
                }
            }

            #[test]
            fn affinity_ignores_column_order(assign in proptest::collection::vec(0usize..3, 8)) {
                let y = LabelMatrix::from_assignments(&assign, 2, 4, 3).unwrap();
                let mut permuted = y.clone();
                permuted.rows = y.rows.select(Axis(1), &[2, 0, 1]);
                prop_assert_eq!(affinity(&y).unwrap(), affinity(&permuted).unwrap());
            }

            #[test]
            fn wiener_rows_sum_to_one(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let srcs: Vec<_> = (0..3)
                    .map(|_| mel(Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..2.0))))
                    .collect();
                let o = wiener_like_mask(&srcs).unwrap();
                for t in 0..4 {
                    for f in 0..4 {
                        let energy: f64 = srcs.iter().map(|s| s.mags[[t, f]].powi(2)).sum();
                        let total: f64 = (0..3).map(|c| o.masks[[c, t, f]]).sum();
                        if energy > WIENER_EPS {
                            prop_assert!((total - 1.0).abs() < 1e-6);
                        }
                        prop_assert!((0..3).all(|c| (0.0..=1.0).contains(&o.masks[[c, t, f]])));
                    }
                }
            }
        }
    }
}
