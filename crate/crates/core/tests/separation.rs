use chimera::cluster::{separate, Head, InferenceConfig};
use chimera::data::{build_dataset, load_examples, CorpusConfig};
use chimera::eval::{evaluate_set, MaskSource};
use chimera::features::FeatureConfig;
use chimera::model::{ChimeraParams, ModelConfig};
use chimera::signal::Waveform;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_params(fcfg: &FeatureConfig, seed: u64) -> ChimeraParams {
    let cfg = ModelConfig {
        n_layers: 1,
        hidden: 6,
        n_freq: fcfg.n_mel,
        input_dim: fcfg.input_dim(),
        embed_dim: 3,
        n_sources: 2,
        seed,
    };
    ChimeraParams::init(cfg).unwrap()
}

fn noise(len: usize, rate: u32, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), rate).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mask_head_outputs_sum_to_the_mixture(len in 512usize..3000, seed in any::<u64>(), seg in 1usize..40) {
        let fcfg = FeatureConfig::desk();
        let fb = fcfg.filterbank().unwrap();
        let p = toy_params(&fcfg, seed);
        let mix = noise(len, fcfg.sample_rate, seed);
        let icfg = InferenceConfig { head: Head::Mi, segment_frames: seg, seed };
        let sep = separate(&p, &fcfg, &fb, &mix, &icfg).unwrap();
        prop_assert_eq!(sep.sources.len(), 2);
        for s in &sep.sources {
            prop_assert_eq!(s.len(), len);
            prop_assert_eq!(s.sample_rate, fcfg.sample_rate);
        }
        for (i, &x) in mix.samples.iter().enumerate() {
            let sum: f64 = sep.sources.iter().map(|s| s.samples[i]).sum();
            prop_assert!((sum - x).abs() < 1e-9, "sample {}: {} vs {}", i, sum, x);
        }
    }

    #[test]
    fn clustering_head_gives_binary_partitions(len in 600usize..3000, seed in any::<u64>()) {
        let fcfg = FeatureConfig::desk();
        let fb = fcfg.filterbank().unwrap();
        let p = toy_params(&fcfg, seed);
        let mix = noise(len, fcfg.sample_rate, seed ^ 1);
        let icfg = InferenceConfig { head: Head::Dc, segment_frames: 25, seed };
        let sep = separate(&p, &fcfg, &fb, &mix, &icfg).unwrap();
        let (t, f) = sep.masks.shape();
        for ti in 0..t {
            for fi in 0..f {
                let col: Vec<f64> = (0..2).map(|c| sep.masks.mask(c)[[ti, fi]]).collect();
                prop_assert!(col.iter().all(|&m| m == 0.0 || m == 1.0));
                prop_assert_eq!(col.iter().sum::<f64>(), 1.0);
            }
        }
    }
}

#[test]
fn separation_is_reproducible() {
    let fcfg = FeatureConfig::desk();
    let fb = fcfg.filterbank().unwrap();
    let p = toy_params(&fcfg, 3);
    let mix = noise(4000, fcfg.sample_rate, 9);
    for head in [Head::Mi, Head::Dc] {
        let icfg = InferenceConfig { head, segment_frames: 10, seed: 5 };
        let a = separate(&p, &fcfg, &fb, &mix, &icfg).unwrap();
        let b = separate(&p, &fcfg, &fb, &mix, &icfg).unwrap();
        assert_eq!(a.sources, b.sources);
    }
}

#[test]
fn input_shorter_than_a_window_is_rejected() {
    let fcfg = FeatureConfig::desk();
    let fb = fcfg.filterbank().unwrap();
    let p = toy_params(&fcfg, 0);
    let mix = noise(fcfg.window_size - 1, fcfg.sample_rate, 0);
    assert!(matches!(
        separate(&p, &fcfg, &fb, &mix, &InferenceConfig::default()),
        Err(chimera::Error::InputTooShort { .. })
    ));
}

#[test]
fn incompatible_model_is_rejected() {
    let fcfg = FeatureConfig::desk();
    let fb = fcfg.filterbank().unwrap();
    let other = FeatureConfig { n_mel: 20, ..fcfg };
    let p = toy_params(&other, 0);
    let mix = noise(2000, fcfg.sample_rate, 0);
    assert!(separate(&p, &fcfg, &fb, &mix, &InferenceConfig::default()).is_err());
}

#[test]
fn written_corpus_loads_back_consistently() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig { n_train: 2, n_val: 1, n_test: 2, duration: 1.5, ..CorpusConfig::default() };
    let corpus = build_dataset(&cfg, tmp.path()).unwrap();
    assert_eq!((corpus.train.len(), corpus.val.len(), corpus.test.len()), (2, 1, 2));
    let examples = load_examples(&corpus.test).unwrap();
    for ex in &examples {
        ex.check(2.0 / 32768.0).unwrap();
        assert_eq!(ex.sources.len(), 2);
    }
    let fcfg = FeatureConfig::desk();
    let fb = fcfg.filterbank().unwrap();
    let records = evaluate_set(&examples, &fcfg, &fb, MaskSource::OracleIbm).unwrap();
    assert!(records.iter().all(|r| r.sdri.iter().all(|&s| s > 0.0)), "{records:?}");
}
