//! Objectives for both heads, each with its exact gradient.
//!
//! Shapes: embeddings `V` are TF×D, labels `Y` TF×C (rows in (t, f)
//! row-major order), masks and source magnitudes (C, T, F), the mixture
//! magnitude T×F. All losses are sums over bins.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Zip};

use crate::error::{ensure_shape, Error, Result};
use crate::masking::AFFINITY_GUARD;

/// Value and gradient with respect to the loss's network-output argument.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<G> {
    pub value: f64,
    pub grad: G,
}

/// Which mask-inference objective to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MiKind {
    /// Mask times mixture against the clean source magnitude.
    #[default]
    Msa,
    /// Mask against a reference mask, weighted by the mixture magnitude.
    Mmsa,
}

impl fmt::Display for MiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiKind::Msa => "msa",
            MiKind::Mmsa => "mmsa",
        })
    }
}

impl FromStr for MiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msa" => Ok(MiKind::Msa),
            "mmsa" => Ok(MiKind::Mmsa),
            other => Err(Error::InvalidArgument(format!("unknown objective '{other}'"))),
        }
    }
}

/// Target of the mask-inference head.
#[derive(Debug, Clone, Copy)]
pub enum MiTarget<'a> {
    /// Clean source magnitudes R, (C, T, F).
    Msa(ArrayView3<'a, f64>),
    /// Reference masks O, (C, T, F).
    Mmsa(ArrayView3<'a, f64>),
}

/// Combined objective and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ChimeraReport {
    pub value: f64,
    /// Unnormalized deep clustering loss.
    pub dc: f64,
    /// Mask-inference loss.
    pub mi: f64,
    pub grad_v: Array2<f64>,
    pub grad_m: Array3<f64>,
}

fn check_dc_shapes(v: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<()> {
    ensure_shape(v.nrows() == y.nrows(), || format!("embeddings have {} rows, labels {}", v.nrows(), y.nrows()))
}

/// Explicit TF×TF evaluation, kept as an oracle for [`dc_loss`].
pub fn dc_loss_naive(v: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<LossReport<Array2<f64>>> {
    check_dc_shapes(&v, &y)?;
    if v.nrows() > AFFINITY_GUARD {
        return Err(Error::SizeGuard { rows: v.nrows(), limit: AFFINITY_GUARD });
    }
    let diff = v.dot(&v.t()) - y.dot(&y.t());
    let value = diff.iter().map(|d| d * d).sum();
    let grad = diff.dot(&v) * 4.0;
    Ok(LossReport { value, grad })
}

/// ‖VVᵀ − YYᵀ‖²_F through D×D, D×C and C×C Gram matrices.
pub fn dc_loss(v: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<LossReport<Array2<f64>>> {
    check_dc_shapes(&v, &y)?;
    if v.iter().chain(y.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("deep clustering loss input".into()));
    }
    let vtv = gram(&v, &v);
    let vty = gram(&v, &y);
    let yty = gram(&y, &y);
    let value = (sorted_square_sum(&vtv) - 2.0 * sorted_square_sum(&vty) + sorted_square_sum(&yty)).max(0.0);
    let grad = (v.dot(&vtv) - y.dot(&vty.t())) * 4.0;
    Ok(LossReport { value, grad })
}

/// AᵀB accumulated row by row, so every entry's rounding is independent of
/// its column position.
fn gram(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut g = Array2::zeros((a.ncols(), b.ncols()));
    for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
        for (p, &x) in ra.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (q, &z) in rb.iter().enumerate() {
                g[[p, q]] += x * z;
            }
        }
    }
    g
}

/// Squared Frobenius norm summed in sorted order (invariant to permutations).
fn sorted_square_sum(m: &Array2<f64>) -> f64 {
    let mut sq: Vec<f64> = m.iter().map(|x| x * x).collect();
    sq.sort_by(f64::total_cmp);
    sq.iter().sum()
}

fn check_mask_shapes(m: &ArrayView3<f64>, s: &ArrayView2<f64>, other: &ArrayView3<f64>) -> Result<()> {
    let (_, t, f) = m.dim();
    ensure_shape((t, f) == s.dim(), || format!("masks {:?} vs mixture {:?}", m.dim(), s.dim()))?;
    ensure_shape(m.dim() == other.dim(), || format!("masks {:?} vs targets {:?}", m.dim(), other.dim()))
}

/// Σ_c ‖R_c − M_c ⊙ S‖².
pub fn msa_loss(m: ArrayView3<f64>, s: ArrayView2<f64>, r: ArrayView3<f64>) -> Result<LossReport<Array3<f64>>> {
    check_mask_shapes(&m, &s, &r)?;
    let s3 = s.broadcast(m.dim()).expect("checked shape");
    let mut grad = Array3::zeros(m.dim());
    let mut value = 0.0;
    Zip::from(&mut grad).and(&m).and(&r).and(&s3).for_each(|g, &mask, &src, &mix| {
        let e = src - mask * mix;
        value += e * e;
        *g = -2.0 * e * mix;
    });
    Ok(LossReport { value, grad })
}

/// Σ_c ‖(O_c − M_c) ⊙ S‖².
pub fn mmsa_loss(m: ArrayView3<f64>, s: ArrayView2<f64>, o: ArrayView3<f64>) -> Result<LossReport<Array3<f64>>> {
    check_mask_shapes(&m, &s, &o)?;
    let s3 = s.broadcast(m.dim()).expect("checked shape");
    let mut grad = Array3::zeros(m.dim());
    let mut value = 0.0;
    Zip::from(&mut grad).and(&m).and(&o).and(&s3).for_each(|g, &mask, &reference, &mix| {
        let e = (reference - mask) * mix;
        value += e * e;
        *g = -2.0 * (reference - mask) * mix * mix;
    });
    Ok(LossReport { value, grad })
}

pub fn mi_loss(m: ArrayView3<f64>, s: ArrayView2<f64>, target: MiTarget<'_>) -> Result<LossReport<Array3<f64>>> {
    match target {
        MiTarget::Msa(r) => msa_loss(m, s, r),
        MiTarget::Mmsa(o) => mmsa_loss(m, s, o),
    }
}

/// α·L_DC/(T·F) + (1 − α)·L_MI.
pub fn chimera_loss(
    alpha: f64,
    v: ArrayView2<f64>,
    y: ArrayView2<f64>,
    m: ArrayView3<f64>,
    s: ArrayView2<f64>,
    target: MiTarget<'_>,
) -> Result<ChimeraReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (_, t, f) = m.dim();
    ensure_shape(v.nrows() == t * f, || format!("{} embedding rows for {}x{} bins", v.nrows(), t, f))?;
    let bins = (t * f) as f64;
    let dc = dc_loss(v, y)?;
    let mi = mi_loss(m, s, target)?;
    Ok(ChimeraReport {
        value: alpha * dc.value / bins + (1.0 - alpha) * mi.value,
        dc: dc.value,
        mi: mi.value,
        grad_v: dc.grad * (alpha / bins),
        grad_m: mi.grad * (1.0 - alpha),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut v = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        for mut row in v.outer_iter_mut() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row /= norm;
        }
        v
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
        let mut y = Array2::zeros((n, c));
        for i in 0..n {
            y[[i, rng.random_range(0..c)]] = 1.0;
        }
        y
    }

    fn pair_sum(v: &Array2<f64>, y: &Array2<f64>) -> f64 {
        let n = v.nrows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a_hat: f64 = (0..v.ncols()).map(|d| v[[i, d]] * v[[j, d]]).sum();
                let a: f64 = (0..y.ncols()).map(|c| y[[i, c]] * y[[j, c]]).sum();
                total += (a_hat - a).powi(2);
            }
        }
        total
    }

    fn fd_check<D: ndarray::Dimension>(
        x: &ndarray::Array<f64, D>,
        analytic: &ndarray::Array<f64, D>,
        f: impl Fn(&ndarray::Array<f64, D>) -> f64,
    ) {
        let h = 1e-5;
        for (i, &g) in analytic.iter().enumerate() {
            let mut plus = x.clone();
            *plus.iter_mut().nth(i).unwrap() += h;
            let mut minus = x.clone();
            *minus.iter_mut().nth(i).unwrap() -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let err = (numeric - g).abs() / numeric.abs().max(g.abs()).max(1e-3);
            assert!(err <= 1e-6, "fd {numeric} vs analytic {g}");
        }
    }

    #[test]
    fn perfect_embeddings_cost_nothing() {
        let y = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(dc_loss(y.view(), y.view()).unwrap().value, 0.0);
        assert_eq!(dc_loss_naive(y.view(), y.view()).unwrap().value, 0.0);
    }

    #[test]
    fn column_permutation_of_labels_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_unit_rows(&mut rng, 6, 2);
        let y = random_labels(&mut rng, 6, 2);
        let swapped = y.select(Axis(1), &[1, 0]);
        assert_eq!(dc_loss(v.view(), y.view()).unwrap().value, dc_loss(v.view(), swapped.view()).unwrap().value);
        assert_eq!(
            dc_loss_naive(v.view(), y.view()).unwrap().value,
            dc_loss_naive(v.view(), swapped.view()).unwrap().value
        );
    }

    #[test]
    fn naive_matches_pair_sum_and_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = random_unit_rows(&mut rng, 6, 2);
        let y = random_labels(&mut rng, 6, 2);
        let naive = dc_loss_naive(v.view(), y.view()).unwrap();
        let fast = dc_loss(v.view(), y.view()).unwrap();
        let oracle = pair_sum(&v, &y);
        assert!((naive.value - oracle).abs() <= 1e-12 * (1.0 + oracle));
        assert!((fast.value - naive.value).abs() <= 1e-10 * naive.value.max(1.0));
        for (a, b) in fast.grad.iter().zip(naive.grad.iter()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn dc_errors() {
        let v = Array2::<f64>::zeros((3, 2));
        let y = Array2::<f64>::zeros((4, 2));
        assert!(matches!(dc_loss(v.view(), y.view()), Err(Error::ShapeMismatch(_))));
        let big = Array2::<f64>::zeros((4097, 2));
        assert!(matches!(dc_loss_naive(big.view(), big.view()), Err(Error::SizeGuard { .. })));
        assert!(dc_loss(big.view(), big.view()).is_ok());
        let mut nan = Array2::<f64>::zeros((3, 2));
        nan[[0, 0]] = f64::NAN;
        assert!(matches!(dc_loss(nan.view(), nan.view()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn dc_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_unit_rows(&mut rng, 5, 3);
        let y = random_labels(&mut rng, 5, 2);
        let fast = dc_loss(v.view(), y.view()).unwrap();
        fd_check(&v, &fast.grad, |x| dc_loss(x.view(), y.view()).unwrap().value);
        let naive = dc_loss_naive(v.view(), y.view()).unwrap();
        fd_check(&v, &naive.grad, |x| dc_loss_naive(x.view(), y.view()).unwrap().value);
    }

    #[test]
    fn msa_single_bin() {
        let m = Array3::from_shape_vec((2, 1, 1), vec![0.5, 0.5]).unwrap();
        let s = array![[2.0]];
        let r = Array3::from_shape_vec((2, 1, 1), vec![1.0, 1.5]).unwrap();
        let out = msa_loss(m.view(), s.view(), r.view()).unwrap();
        assert!((out.value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn msa_zero_for_exact_ratio_masks() {
        let r = Array3::from_shape_vec((2, 1, 2), vec![1.0, 3.0, 2.0, 1.0]).unwrap();
        let s = array![[3.0, 4.0]];
        let m = Array3::from_shape_fn((2, 1, 2), |(c, t, f)| r[[c, t, f]] / s[[t, f]]);
        assert!(msa_loss(m.view(), s.view(), r.view()).unwrap().value < 1e-24);
    }

    #[test]
    fn mmsa_single_bin_and_identity() {
        let m = Array3::from_elem((1, 1, 1), 0.5);
        let o = Array3::from_elem((1, 1, 1), 1.0);
        let s = array![[2.0]];
        assert!((mmsa_loss(m.view(), s.view(), o.view()).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(mmsa_loss(o.view(), s.view(), o.view()).unwrap().value, 0.0);
    }

    #[test]
    fn mask_losses_match_loops_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(0.0..1.0));
        let o = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(0.0..1.0));
        let r = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(0.0..2.0));
        let s = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0..2.0));

        let msa = msa_loss(m.view(), s.view(), r.view()).unwrap();
        let mmsa = mmsa_loss(m.view(), s.view(), o.view()).unwrap();
        let (mut msa_loop, mut mmsa_loop) = (0.0, 0.0);
        for c in 0..2 {
            for t in 0..3 {
                for f in 0..4 {
                    msa_loop += (r[[c, t, f]] - m[[c, t, f]] * s[[t, f]]).powi(2);
                    mmsa_loop += ((o[[c, t, f]] - m[[c, t, f]]) * s[[t, f]]).powi(2);
                }
            }
        }
        assert!((msa.value - msa_loop).abs() < 1e-12);
        assert!((mmsa.value - mmsa_loop).abs() < 1e-12);

        fd_check(&m, &msa.grad, |x| msa_loss(x.view(), s.view(), r.view()).unwrap().value);
        fd_check(&m, &mmsa.grad, |x| mmsa_loss(x.view(), s.view(), o.view()).unwrap().value);

        let wrong = Array2::zeros((3, 5));
        assert!(msa_loss(m.view(), wrong.view(), r.view()).is_err());
    }

    struct Fixture {
        v: Array2<f64>,
        y: Array2<f64>,
        m: Array3<f64>,
        s: Array2<f64>,
        r: Array3<f64>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Fixture {
            v: random_unit_rows(&mut rng, 6, 3),
            y: random_labels(&mut rng, 6, 2),
            m: Array3::from_shape_fn((2, 2, 3), |_| rng.random_range(0.0..1.0)),
            s: Array2::from_shape_fn((2, 3), |_| rng.random_range(0.0..2.0)),
            r: Array3::from_shape_fn((2, 2, 3), |_| rng.random_range(0.0..2.0)),
        }
    }

    #[test]
    fn chimera_endpoints_gate_the_heads() {
        let fx = fixture(4);
        let target = MiTarget::Msa(fx.r.view());
        let dc = dc_loss(fx.v.view(), fx.y.view()).unwrap();
        let mi = msa_loss(fx.m.view(), fx.s.view(), fx.r.view()).unwrap();

        let pure_dc = chimera_loss(1.0, fx.v.view(), fx.y.view(), fx.m.view(), fx.s.view(), target).unwrap();
        assert!((pure_dc.value - dc.value / 6.0).abs() < 1e-12);
        assert!(pure_dc.grad_m.iter().all(|&g| g == 0.0));

        let pure_mi = chimera_loss(0.0, fx.v.view(), fx.y.view(), fx.m.view(), fx.s.view(), target).unwrap();
        assert!((pure_mi.value - mi.value).abs() < 1e-12);
        assert!(pure_mi.grad_v.iter().all(|&g| g == 0.0));
        assert_eq!(pure_mi.dc, dc.value);
        assert_eq!(pure_mi.mi, mi.value);

        assert!(chimera_loss(1.5, fx.v.view(), fx.y.view(), fx.m.view(), fx.s.view(), target).is_err());
        assert!(chimera_loss(f64::NAN, fx.v.view(), fx.y.view(), fx.m.view(), fx.s.view(), target).is_err());
    }

    #[test]
    fn chimera_weighting_arithmetic() {
        // L_DC = 3 over TF = 6 bins, L_MI = 0.5, alpha = 0.5.
        let (dc, mi, bins, alpha) = (3.0, 0.5, 6.0, 0.5);
        assert_eq!(alpha * dc / bins + (1.0 - alpha) * mi, 0.5);

        let fx = fixture(12);
        let target = MiTarget::Mmsa(fx.r.view());
        let out = chimera_loss(0.5, fx.v.view(), fx.y.view(), fx.m.view(), fx.s.view(), target).unwrap();
        assert!((out.value - (0.5 * out.dc / 6.0 + 0.5 * out.mi)).abs() < 1e-12);
    }

    #[test]
    fn chimera_gradients_match_finite_differences() {
        let fx = fixture(21);
        let target = MiTarget::Msa(fx.r.view());
        let out = chimera_loss(0.3, fx.v.view(), fx.y.view(), fx.m.view(), fx.s.view(), target).unwrap();
        fd_check(&fx.v, &out.grad_v, |v| {
            chimera_loss(0.3, v.view(), fx.y.view(), fx.m.view(), fx.s.view(), target).unwrap().value
        });
        fd_check(&fx.m, &out.grad_m, |m| {
            chimera_loss(0.3, fx.v.view(), fx.y.view(), m.view(), fx.s.view(), target).unwrap().value
        });
    }

    #[test]
    fn mi_kind_parses() {
        assert_eq!("mMSA".parse::<MiKind>().unwrap(), MiKind::Mmsa);
        assert_eq!(MiKind::Msa.to_string().parse::<MiKind>().unwrap(), MiKind::Msa);
        assert!("psa".parse::<MiKind>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn low_rank_agrees_with_naive(seed in any::<u64>(), n in 1usize..=64, d in 1usize..6, c in 2usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = random_unit_rows(&mut rng, n, d);
                let y = random_labels(&mut rng, n, c);
                let naive = dc_loss_naive(v.view(), y.view()).unwrap();
                let fast = dc_loss(v.view(), y.view()).unwrap();
                prop_assert!((fast.value - naive.value).abs() <= 1e-9 * (1.0 + naive.value));
                let worst = fast.grad.iter().zip(naive.grad.iter())
                    .map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(worst <= 1e-9);
                prop_assert!(fast.value >= 0.0 && naive.value >= 0.0);
            }

            #[test]
            fn permuting_label_columns_is_exact(seed in any::<u64>(), n in 1usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = random_unit_rows(&mut rng, n, 3);
                let y = random_labels(&mut rng, n, 3);
                let permuted = y.select(Axis(1), &[2, 0, 1]);
                prop_assert_eq!(
                    dc_loss(v.view(), y.view()).unwrap().value,
                    dc_loss(v.view(), permuted.view()).unwrap().value
                );
            }
        }
    }
}
