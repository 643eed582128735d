//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use chimera::cluster::{infer_masks, reconstruct_all, Head, InferenceConfig};
use chimera::data::{build_dataset, load_examples, load_manifest, CorpusConfig, SOURCE_NAMES};
use chimera::eval::{evaluate_set, prepare_set, MaskSource};
use chimera::features::{analyze, FeatureConfig};
use chimera::loss::{dc_loss, dc_loss_naive};
use chimera::masking::{assign_vocals_by_low_freq, LabelMatrix, AFFINITY_GUARD};
use chimera::metrics::{aggregate, records_tsv, sdri_table, Summary};
use chimera::model::{
    load_checkpoint, save_checkpoint, train_with, Checkpoint, ChimeraParams, RmsProp, TrainingLog, TrainingSet,
};
use chimera::signal::Waveform;
use chimera::wav::{read_wav, write_wav};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ConfigError, RunConfig};

pub struct GenDataArgs {
    pub out: PathBuf,
    pub corpus: CorpusConfig,
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let corpus = build_dataset(&args.corpus, &args.out)?;
    println!(
        "wrote {} train, {} val, {} test examples to {} ({:.1} s of audio)",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        args.out.display(),
        corpus.total_duration_secs()
    );
    Ok(())
}

/// Writes through a temporary file next to `path` and renames it into
/// place, so an interrupted write never leaves a truncated file behind.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> chimera::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    write(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("moving {} into place", path.display()))?;
    Ok(())
}

fn checkpoint_features(ckpt: &Checkpoint) -> (FeatureConfig, chimera::signal::MelFilterbank) {
    let fb = ckpt.features.filterbank().expect("checkpoint features were validated on load");
    (ckpt.features, fb)
}

pub struct TrainArgs {
    pub config: RunConfig,
    pub resume: Option<PathBuf>,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = &args.config;
    cfg.validate()?;
    let fcfg = cfg.features;
    let fb = fcfg.filterbank()?;
    let load = |name: &str| -> Result<Vec<chimera::features::Utterance>> {
        let m = load_manifest(&cfg.data.join(format!("{name}.tsv")))?;
        let examples = load_examples(&m)?;
        Ok(prepare_set(&examples, &fcfg, &fb)?)
    };
    let data = TrainingSet { train: load("train")?, val: load("val")? };
    log::info!("{} training and {} validation files", data.train.len(), data.val.len());

    let schedule = cfg.schedule();
    let (params, optimizer) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.features != fcfg || ckpt.params.config != cfg.model_config() {
                return Err(chimera::Error::ShapeMismatch(format!(
                    "checkpoint {} was trained with {:?} / {:?}, configuration asks for {:?} / {:?}",
                    path.display(),
                    ckpt.params.config,
                    ckpt.features,
                    cfg.model_config(),
                    fcfg
                ))
                .into());
            }
            let mut opt = RmsProp::new(&ckpt.params, schedule.optimizer);
            if let Some(ms) = ckpt.optimizer {
                opt.mean_square = ms;
            }
            (ckpt.params, opt)
        }
        None => {
            let p = ChimeraParams::init(cfg.model_config())?;
            let opt = RmsProp::new(&p, schedule.optimizer);
            (p, opt)
        }
    };

    let conf_path = cfg.checkpoint.with_extension("conf");
    write_atomic(&conf_path, |p| {
        fs::write(p, cfg.emit()).map_err(|e| chimera::Error::Io { path: p.into(), source: e })
    })?;

    let mut log = TrainingLog::default();
    let result = train_with(params, optimizer, &data, &schedule, |end| {
        log.records.push(*end.record);
        let tsv = log.to_tsv();
        let write_log = |p: &Path| fs::write(p, &tsv).map_err(|e| chimera::Error::Io { path: p.into(), source: e });
        let io = |e: anyhow::Error| chimera::Error::Checkpoint(format!("{e:#}"));
        write_atomic(&cfg.log, write_log).map_err(io)?;
        if end.improved {
            let ckpt = Checkpoint {
                params: end.params.clone(),
                features: fcfg,
                optimizer: Some(end.optimizer.mean_square.clone()),
            };
            write_atomic(&cfg.checkpoint, |p| save_checkpoint(p, &ckpt)).map_err(io)?;
        }
        let total =
            |b: Option<chimera::model::LossBreakdown>| b.map_or("-".to_string(), |b| format!("{:.4e}", b.total));
        println!(
            "epoch {:>3}  frames {:>4}  train {:>11}  val {:>11}{}",
            end.record.epoch,
            end.record.segment_frames,
            total(end.record.train),
            total(end.record.val),
            if end.improved { "  *" } else { "" }
        );
        Ok(())
    });
    match result {
        Ok(outcome) => {
            if outcome.log.records.is_empty() {
                // No epochs ran; store the initial network as the baseline.
                let ckpt =
                    Checkpoint { params: outcome.best, features: fcfg, optimizer: Some(outcome.optimizer.mean_square) };
                write_atomic(&cfg.checkpoint, |p| save_checkpoint(p, &ckpt))?;
            }
            println!(
                "best epoch {} of {}; checkpoint {}, log {}",
                outcome.best_epoch,
                schedule.epochs,
                cfg.checkpoint.display(),
                cfg.log.display()
            );
            Ok(())
        }
        Err(e) => {
            if e.is_numerical() && cfg.checkpoint.exists() {
                eprintln!("keeping last good checkpoint {}", cfg.checkpoint.display());
            }
            Err(e.into())
        }
    }
}

/// Output names for each mask: the low-band rule for the clustering head,
/// training order otherwise.
fn source_names(head: Head, masks: &chimera::masking::MaskSet, fb: &chimera::signal::MelFilterbank) -> Vec<String> {
    let c = masks.n_sources();
    let fallback = || {
        (0..c)
            .map(|i| if c == SOURCE_NAMES.len() { SOURCE_NAMES[i].to_string() } else { format!("source{i}") })
            .collect()
    };
    if head == Head::Dc && c == 2 {
        if let Ok(named) = assign_vocals_by_low_freq(masks, fb) {
            if let Some(names) = named.source_names {
                return names;
            }
        }
    }
    fallback()
}

pub struct SeparateArgs {
    pub checkpoint: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub inference: InferenceConfig,
}

pub fn separate(args: &SeparateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (fcfg, fb) = checkpoint_features(&ckpt);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let written = args
        .inputs
        .par_iter()
        .map(|input| -> Result<Vec<PathBuf>> {
            let mixture = read_wav(input, Some(fcfg.sample_rate))?;
            let a = analyze(&fcfg, &fb, &mixture)?;
            let masks = infer_masks(&ckpt.params, &fcfg, &a.mel, &args.inference)?;
            let names = source_names(args.inference.head, &masks, &fb);
            let sources: Vec<Waveform> =
                reconstruct_all(&masks, &a.spectrogram, &fb)?.iter().map(|w| a.unpad(w)).collect();
            let stem = input.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned());
            let stem = stem.strip_suffix(".mix").unwrap_or(&stem);
            let mut paths = Vec::new();
            for (name, w) in names.iter().zip(&sources) {
                let path = args.out.join(format!("{stem}.{name}.wav"));
                write_wav(&path, w)?;
                paths.push(path);
            }
            Ok(paths)
        })
        .collect::<Result<Vec<_>>>()?;
    for p in written.iter().flatten() {
        println!("{}", p.display());
    }
    Ok(())
}

pub struct EvaluateArgs {
    pub config: RunConfig,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub heads: Vec<Head>,
    pub oracle: bool,
    pub records: Option<PathBuf>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.checkpoint.is_none() && !args.oracle {
        return Err(ConfigError("evaluate needs --checkpoint, --oracle ibm, or both".into()).into());
    }
    let manifest_path = args.manifest.clone().unwrap_or_else(|| args.config.data.join("test.tsv"));
    let manifest = load_manifest(&manifest_path)?;
    let examples = load_examples(&manifest)?;
    if examples.is_empty() {
        return Err(chimera::Error::EmptyDataset.into());
    }
    let ckpt = args.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let fcfg = ckpt.as_ref().map_or(args.config.features, |c| c.features);
    let fb = fcfg.filterbank()?;

    let mut rows: Vec<(String, Summary)> = Vec::new();
    let mut records = String::new();
    let mut add = |label: String, source: MaskSource<'_>| -> Result<()> {
        let recs = evaluate_set(&examples, &fcfg, &fb, source)?;
        let tsv = records_tsv(&label, &recs, &SOURCE_NAMES);
        let body = if records.is_empty() { tsv.as_str() } else { tsv.split_once('\n').map_or("", |(_, b)| b) };
        records.push_str(body);
        rows.push((label, aggregate(&recs)?));
        Ok(())
    };
    if args.oracle {
        add("oracle-ibm".into(), MaskSource::OracleIbm)?;
    }
    if let (Some(ckpt), Some(path)) = (&ckpt, &args.checkpoint) {
        let stem = path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
        for &head in &args.heads {
            let inference = InferenceConfig { head, ..args.config.inference() };
            add(format!("{stem}-{head}"), MaskSource::Model { params: &ckpt.params, inference })?;
        }
    }
    print!("{}", sdri_table(&rows, &SOURCE_NAMES));
    println!("{} test files", examples.len());
    if let Some(path) = &args.records {
        fs::write(path, records).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// The two loss kernels gave different answers.
#[derive(Debug)]
pub struct Disagreement(pub String);

impl std::fmt::Display for Disagreement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Disagreement {}

pub struct BenchArgs {
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub sources: usize,
    pub repeats: usize,
    pub seed: u64,
}

fn median_time(repeats: usize, mut f: impl FnMut()) -> Duration {
    let mut times: Vec<Duration> = (0..repeats.max(1))
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed()
        })
        .collect();
    times.sort();
    times[times.len() / 2]
}

/// Outcome of one benchmark size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub tf: usize,
    pub low_rank: Duration,
    /// Naive time and the relative value difference, when under the guard.
    pub naive: Option<(Duration, f64)>,
}

pub fn bench_rows(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    if args.dim == 0 || args.sources < 2 {
        return Err(ConfigError("--dim must be positive and --sources at least 2".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut rows = Vec::new();
    for &tf in &args.sizes {
        let mut v = Array2::from_shape_fn((tf, args.dim), |_| rng.random_range(-1.0..1.0f64));
        for mut row in v.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        let winners: Vec<usize> = (0..tf).map(|_| rng.random_range(0..args.sources)).collect();
        let y = LabelMatrix::from_assignments(&winners, tf, 1, args.sources)?.rows;
        let fast = dc_loss(v.view(), y.view())?;
        let low_rank = median_time(args.repeats, || {
            std::hint::black_box(dc_loss(v.view(), y.view()).expect("checked above"));
        });
        let naive = if tf <= AFFINITY_GUARD {
            let slow = dc_loss_naive(v.view(), y.view())?;
            let scale = slow.value.abs().max(1.0);
            let mut rel = (fast.value - slow.value).abs() / scale;
            let gscale = slow.grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
            for (a, b) in fast.grad.iter().zip(slow.grad.iter()) {
                rel = rel.max((a - b).abs() / gscale);
            }
            let t = median_time(args.repeats, || {
                std::hint::black_box(dc_loss_naive(v.view(), y.view()).expect("checked above"));
            });
            Some((t, rel))
        } else {
            None
        };
        rows.push(BenchRow { tf, low_rank, naive });
    }
    Ok(rows)
}

pub fn bench_dcloss(args: &BenchArgs) -> Result<()> {
    let rows = bench_rows(args)?;
    println!("{:>8}  {:>12}  {:>12}  {:>8}  {:>10}", "TF", "naive ms", "low-rank ms", "speedup", "rel diff");
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let mut worst = 0.0f64;
    for r in &rows {
        match r.naive {
            Some((t, rel)) => {
                worst = worst.max(rel);
                println!(
                    "{:>8}  {:>12.3}  {:>12.3}  {:>7.1}x  {:>10.2e}",
                    r.tf,
                    ms(t),
                    ms(r.low_rank),
                    t.as_secs_f64() / r.low_rank.as_secs_f64().max(1e-12),
                    rel
                );
            }
            None => println!("{:>8}  {:>12}  {:>12.3}  {:>8}  {:>10}", r.tf, "skipped", ms(r.low_rank), "-", "-"),
        }
    }
    if worst > 1e-9 {
        bail!(Disagreement(format!("low-rank and naive losses disagree by {worst:.2e}")));
    }
    Ok(())
}
