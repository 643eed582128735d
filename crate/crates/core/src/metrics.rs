//! Scale-invariant SDR, permutation-resolved improvement and
//! length-weighted aggregation.

use std::fmt::Write as _;

use itertools::Itertools;

use crate::error::{ensure_shape, Error, Result};
use crate::signal::Waveform;

/// Scores are clamped to ±this many dB.
pub const SDR_CAP_DB: f64 = 100.0;

/// SI-SDR of `est` against `reference` on raw samples.
pub fn si_sdr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    ensure_shape(est.len() == reference.len(), || {
        format!("estimate has {} samples, reference {}", est.len(), reference.len())
    })?;
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(Error::SilentInput("reference is all zeros".into()));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / rr;
    let target: f64 = alpha * alpha * rr;
    let noise: f64 = est.iter().zip(reference).map(|(e, r)| (e - alpha * r).powi(2)).sum();
    let db = if target == 0.0 {
        -SDR_CAP_DB
    } else if noise == 0.0 {
        SDR_CAP_DB
    } else {
        10.0 * (target / noise).log10()
    };
    if db.is_nan() {
        return Err(Error::NonFinite("si-sdr".into()));
    }
    Ok(db.clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_samples(&est.samples, &reference.samples)
}

/// Scores of one file.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    /// Per reference source, in reference order.
    pub sdr: Vec<f64>,
    pub sdri: Vec<f64>,
    /// SI-SDR of the unprocessed mixture against each reference.
    pub mixture_sdr: Vec<f64>,
    /// `permutation[c]` is the estimate matched to reference `c`.
    pub permutation: Vec<usize>,
    /// Samples scored.
    pub length: usize,
}

/// Scores every pairing of estimates to references and keeps the one with
/// the highest mean SI-SDR; ties keep the first in lexicographic order.
pub fn best_permutation_sdri(estimates: &[Waveform], refs: &[Waveform], mixture: &Waveform) -> Result<EvalRecord> {
    let c = refs.len();
    ensure_shape(estimates.len() == c && c > 0, || format!("{} estimates for {} references", estimates.len(), c))?;
    let n = mixture.len();
    for w in estimates.iter().chain(refs) {
        ensure_shape(w.len() == n, || format!("signal of {} samples, mixture {}", w.len(), n))?;
    }
    // scores[r][e] = SI-SDR of estimate e against reference r.
    let scores = refs
        .iter()
        .map(|r| estimates.iter().map(|e| si_sdr(e, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..c).permutations(c) {
        let mean = perm.iter().enumerate().map(|(r, &e)| scores[r][e]).sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|(b, _)| mean > *b) {
            best = Some((mean, perm));
        }
    }
    let (_, permutation) = best.expect("at least one permutation");
    let mixture_sdr = refs.iter().map(|r| si_sdr(mixture, r)).collect::<Result<Vec<_>>>()?;
    let sdr: Vec<f64> = permutation.iter().enumerate().map(|(r, &e)| scores[r][e]).collect();
    let sdri = sdr.iter().zip(&mixture_sdr).map(|(s, m)| s - m).collect();
    Ok(EvalRecord { id: String::new(), sdr, sdri, mixture_sdr, permutation, length: n })
}

/// Length-weighted means over a test set, per source.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub sdr: Vec<f64>,
    pub sdri: Vec<f64>,
    pub files: usize,
    pub total_length: usize,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Summary> {
    let first = records.first().ok_or(Error::EmptyDataset)?;
    let c = first.sdri.len();
    if records.iter().any(|r| r.sdri.len() != c || r.sdr.len() != c) {
        return Err(Error::ShapeMismatch("records differ in source count".into()));
    }
    let total: usize = records.iter().map(|r| r.length).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("records have zero total length".into()));
    }
    let weighted = |pick: fn(&EvalRecord) -> &Vec<f64>| {
        (0..c)
            .map(|s| records.iter().map(|r| r.length as f64 * pick(r)[s]).sum::<f64>() / total as f64)
            .collect::<Vec<_>>()
    };
    Ok(Summary { sdr: weighted(|r| &r.sdr), sdri: weighted(|r| &r.sdri), files: records.len(), total_length: total })
}

/// Machine-readable records, one tab-separated row per file: method, id,
/// then SDR and SDRi per source, then the scored length.
pub fn records_tsv(method: &str, records: &[EvalRecord], source_names: &[&str]) -> String {
    let mut out = String::from("method\tid");
    for name in source_names {
        let _ = write!(out, "\t{name}_sdr_db\t{name}_sdri_db");
    }
    out.push_str("\tlength\n");
    for r in records {
        let _ = write!(out, "{method}\t{}", r.id);
        for (sdr, sdri) in r.sdr.iter().zip(&r.sdri) {
            let _ = write!(out, "\t{sdr:.4}\t{sdri:.4}");
        }
        let _ = writeln!(out, "\t{}", r.length);
    }
    out
}

/// One row per labelled summary, one SDRi column per source.
pub fn sdri_table(rows: &[(String, Summary)], source_names: &[&str]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "method");
    for name in source_names {
        let _ = write!(out, "  {:>14}", format!("{name} SDRi"));
    }
    out.push('\n');
    for (label, s) in rows {
        let _ = write!(out, "{label:<width$}");
        for v in &s.sdri {
            let _ = write!(out, "  {v:>14.2}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(x: Vec<f64>) -> Waveform {
        Waveform::new(x, 8000).unwrap()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn perfect_and_scaled_estimates_hit_the_cap() {
        let r = wave(random(100, 1));
        assert_eq!(si_sdr(&r, &r).unwrap(), SDR_CAP_DB);
        assert_eq!(si_sdr(&r.scaled(2.0), &r).unwrap(), si_sdr(&r, &r).unwrap());
        assert_eq!(si_sdr(&Waveform::zeros(100, 8000), &r).unwrap(), -SDR_CAP_DB);
    }

    #[test]
    fn orthogonal_noise_gives_ten_db() {
        let r: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        // Orthogonal to r with a tenth of its energy.
        let g = (0.1f64).sqrt();
        let n: Vec<f64> = (0..8).map(|i| if i < 4 { g } else { -g }).collect();
        assert_abs_diff_eq!(r.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>(), 0.0);
        let est: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert_abs_diff_eq!(si_sdr_samples(&est, &r).unwrap(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn errors() {
        let r = wave(random(10, 1));
        assert!(matches!(si_sdr(&r, &Waveform::zeros(10, 8000)), Err(Error::SilentInput(_))));
        assert!(si_sdr(&r, &wave(random(11, 2))).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn swapped_estimates_are_recovered() {
        let a = wave(random(200, 1));
        let b = wave(random(200, 2));
        let mix = wave(a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect());
        let rec = best_permutation_sdri(&[b.clone(), a.clone()], &[a.clone(), b.clone()], &mix).unwrap();
        assert_eq!(rec.permutation, vec![1, 0]);
        assert_eq!(rec.sdr, vec![SDR_CAP_DB, SDR_CAP_DB]);

        let rec = best_permutation_sdri(&[mix.clone(), mix.clone()], &[a, b], &mix).unwrap();
        assert_eq!(rec.sdri, vec![0.0, 0.0]);
    }

    #[test]
    fn permutation_matches_explicit_pairings() {
        for seed in 0..20 {
            let refs = [wave(random(64, seed)), wave(random(64, seed + 100))];
            let mix = wave(refs[0].samples.iter().zip(&refs[1].samples).map(|(x, y)| x + y).collect());
            let ests = [wave(random(64, seed + 200)), wave(random(64, seed + 300))];
            let s = |e: usize, r: usize| si_sdr(&ests[e], &refs[r]).unwrap();
            let straight = (s(0, 0) + s(1, 1)) / 2.0;
            let crossed = (s(1, 0) + s(0, 1)) / 2.0;
            let rec = best_permutation_sdri(&ests, &refs, &mix).unwrap();
            let (perm, sdr) = if crossed > straight {
                (vec![1, 0], vec![s(1, 0), s(0, 1)])
            } else {
                (vec![0, 1], vec![s(0, 0), s(1, 1)])
            };
            assert_eq!(rec.permutation, perm);
            assert_eq!(rec.sdr, sdr);
            for c in 0..2 {
                assert_eq!(rec.sdri[c], sdr[c] - si_sdr(&mix, &refs[c]).unwrap());
            }
        }
    }

    fn record(length: usize, sdri: f64) -> EvalRecord {
        EvalRecord {
            id: "x".into(),
            sdr: vec![sdri; 2],
            sdri: vec![sdri; 2],
            mixture_sdr: vec![0.0; 2],
            permutation: vec![0, 1],
            length,
        }
    }

    #[test]
    fn aggregation_is_length_weighted() {
        assert_eq!(aggregate(&[record(5, 1.5)]).unwrap().sdri, vec![1.5, 1.5]);
        assert_eq!(aggregate(&[record(10, 2.0), record(10, 4.0)]).unwrap().sdri, vec![3.0, 3.0]);
        let s = aggregate(&[record(8000, 0.0), record(24000, 4.0)]).unwrap();
        assert_eq!(s.sdri, vec![3.0, 3.0]);
        assert_eq!(s.total_length, 32000);
    }

    #[test]
    fn report_formats() {
        let recs = [record(10, 1.0), record(20, 2.0)];
        let tsv = records_tsv("MI", &recs, &["vocals", "accompaniment"]);
        assert_eq!(tsv.lines().count(), 1 + 2);
        assert!(tsv.starts_with("method\tid\tvocals_sdr_db\tvocals_sdri_db\taccompaniment_sdr_db"));
        assert_eq!(tsv.lines().nth(1).unwrap().split('\t').count(), 2 + 4 + 1);
        let table = sdri_table(&[("MI".into(), aggregate(&recs).unwrap())], &["vocals", "accompaniment"]);
        assert_eq!(table.lines().count(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn scale_invariance(seed in 0u64..1000, gain in 1e-3f64..1e3, negate: bool) {
            let r = random(50, seed);
            let e = random(50, seed + 1);
            let g = if negate { -gain } else { gain };
            let scaled: Vec<f64> = e.iter().map(|x| x * g).collect();
            let a = si_sdr_samples(&e, &r).unwrap();
            let b = si_sdr_samples(&scaled, &r).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn estimate_order_does_not_matter(seed in 0u64..1000) {
            let refs = [wave(random(40, seed)), wave(random(40, seed + 1))];
            let mix = wave(refs[0].samples.iter().zip(&refs[1].samples).map(|(x, y)| x + y).collect());
            let ests = [wave(random(40, seed + 2)), wave(random(40, seed + 3))];
            let a = best_permutation_sdri(&ests, &refs, &mix).unwrap();
            let b = best_permutation_sdri(&[ests[1].clone(), ests[0].clone()], &refs, &mix).unwrap();
            prop_assert!(a.sdri == b.sdri);
        }
    }
}
