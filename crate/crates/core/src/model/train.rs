//! Segment-level training loop with validation-based model selection.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ModelConfig;
use super::network::{evaluate_loss, loss_and_grad, LossBreakdown};
use super::optim::{RmsProp, RmsPropConfig};
use super::params::ChimeraParams;
use crate::data::segment;
use crate::error::{Error, Result};
use crate::features::{Targets, Utterance};
use crate::loss::MiKind;

#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
}

/// Two-stage segment length schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Curriculum {
    pub first_frames: usize,
    pub second_frames: usize,
    /// First epoch (1-based) trained on `second_frames`.
    pub switch_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub segment_frames: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub mi_kind: MiKind,
    pub curriculum: Option<Curriculum>,
    pub optimizer: RmsPropConfig,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            segment_frames: 100,
            epochs: 30,
            batch_size: 8,
            alpha: 0.1,
            mi_kind: MiKind::Msa,
            curriculum: None,
            optimizer: RmsPropConfig::default(),
            seed: 0,
        }
    }
}

impl Schedule {
    /// Segment length used in `epoch` (1-based; epoch 0 evaluates with the
    /// first epoch's length).
    pub fn frames_for_epoch(&self, epoch: usize) -> usize {
        match self.curriculum {
            Some(c) if epoch.max(1) >= c.switch_epoch => c.second_frames,
            Some(c) => c.first_frames,
            None => self.segment_frames,
        }
    }
}

/// Mean per-segment losses for one epoch. Epoch 0 is the untrained model
/// and has no training pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub segment_frames: usize,
    pub train: Option<LossBreakdown>,
    pub val: Option<LossBreakdown>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// Tab-separated table, one line per epoch.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tframes\ttrain_total\ttrain_dc\ttrain_mi\tval_total\tval_dc\tval_mi\n");
        let cell = |b: Option<LossBreakdown>| match b {
            Some(b) => format!("{:.9e}\t{:.9e}\t{:.9e}", b.total, b.dc, b.mi),
            None => "-\t-\t-".to_string(),
        };
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.segment_frames, cell(r.train), cell(r.val));
        }
        out
    }

    /// Selection loss of a record: validation per frame, else training.
    fn selection_loss(r: &EpochRecord) -> Option<f64> {
        r.val.or(r.train).map(|b| b.total / r.segment_frames as f64)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.records
            .iter()
            .filter_map(|r| Self::selection_loss(r).map(|l| (r.epoch, l)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(e, _)| e)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: ChimeraParams,
    pub best_epoch: usize,
    /// Parameters and optimizer state after the final epoch.
    pub last: ChimeraParams,
    pub optimizer: RmsProp,
    pub log: TrainingLog,
}

struct Segment {
    feats: Array2<f64>,
    targets: Targets,
}

fn segments_of(utts: &[Utterance], frames: usize) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for u in utts {
        for (feats, targets) in segment(&u.feats, &u.targets, frames)? {
            out.push(Segment { feats, targets });
        }
    }
    Ok(out)
}

fn mean_loss(params: &ChimeraParams, segs: &[Segment], schedule: &Schedule) -> Result<Option<LossBreakdown>> {
    if segs.is_empty() {
        return Ok(None);
    }
    let losses = segs
        .par_iter()
        .map(|s| {
            evaluate_loss(
                params,
                s.feats.view(),
                s.targets.labels.rows.view(),
                s.targets.mixture.view(),
                s.targets.mi_target(schedule.mi_kind),
                schedule.alpha,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(average(&losses)))
}

fn average(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len() as f64;
    LossBreakdown {
        total: losses.iter().map(|l| l.total).sum::<f64>() / n,
        dc: losses.iter().map(|l| l.dc).sum::<f64>() / n,
        mi: losses.iter().map(|l| l.mi).sum::<f64>() / n,
    }
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Diverged { epoch, detail },
        other => other,
    }
}

/// Trains a freshly initialized network.
pub fn train(cfg: ModelConfig, data: &TrainingSet, schedule: &Schedule) -> Result<TrainOutcome> {
    let params = ChimeraParams::init(cfg)?;
    let optimizer = RmsProp::new(&params, schedule.optimizer);
    train_from(params, optimizer, data, schedule)
}

/// State handed to the per-epoch callback of [`train_with`].
#[derive(Debug, Clone, Copy)]
pub struct EpochEnd<'a> {
    pub record: &'a EpochRecord,
    pub params: &'a ChimeraParams,
    pub optimizer: &'a RmsProp,
    /// True when this epoch has the lowest selection loss so far.
    pub improved: bool,
}

/// Continues training from given parameters and optimizer state.
pub fn train_from(
    params: ChimeraParams,
    optimizer: RmsProp,
    data: &TrainingSet,
    schedule: &Schedule,
) -> Result<TrainOutcome> {
    train_with(params, optimizer, data, schedule, |_| Ok(()))
}

/// [`train_from`] with a callback after every epoch, including epoch 0.
/// An error from the callback stops training and is returned.
pub fn train_with(
    mut params: ChimeraParams,
    mut optimizer: RmsProp,
    data: &TrainingSet,
    schedule: &Schedule,
    mut on_epoch: impl FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&schedule.alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {}", schedule.alpha)));
    }
    if schedule.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    params.round_to_f32();
    let mut log = TrainingLog::default();
    if schedule.epochs == 0 {
        return Ok(TrainOutcome { best: params.clone(), best_epoch: 0, last: params, optimizer, log });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut cached: Option<(usize, Vec<Segment>, Vec<Segment>)> = None;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;

    for epoch in 0..=schedule.epochs {
        let frames = schedule.frames_for_epoch(epoch);
        if cached.as_ref().map(|c| c.0) != Some(frames) {
            let train_segs = segments_of(&data.train, frames)?;
            if train_segs.is_empty() {
                return Err(Error::EmptyDataset);
            }
            cached = Some((frames, train_segs, segments_of(&data.val, frames)?));
        }
        let (_, train_segs, val_segs) = cached.as_ref().expect("filled above");

        let train_loss = if epoch == 0 {
            None
        } else {
            let mut order: Vec<usize> = (0..train_segs.len()).collect();
            order.shuffle(&mut rng);
            let mut losses = Vec::with_capacity(order.len());
            for batch in order.chunks(schedule.batch_size) {
                let results = batch
                    .par_iter()
                    .map(|&i| {
                        let s = &train_segs[i];
                        loss_and_grad(
                            &params,
                            s.feats.view(),
                            s.targets.labels.rows.view(),
                            s.targets.mixture.view(),
                            s.targets.mi_target(schedule.mi_kind),
                            schedule.alpha,
                        )
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(diverged(epoch))?;
                let mut total = params.zeros_like();
                for (loss, grads) in &results {
                    total.add_scaled(grads, 1.0 / results.len() as f64);
                    losses.push(*loss);
                }
                optimizer.step(&mut params, &total).map_err(diverged(epoch))?;
                params.round_to_f32();
            }
            Some(average(&losses))
        };

        let val_loss = mean_loss(&params, val_segs, schedule).map_err(diverged(epoch))?;
        let record = EpochRecord { epoch, segment_frames: frames, train: train_loss, val: val_loss };
        let selection = match TrainingLog::selection_loss(&record) {
            Some(l) => l,
            // Epoch 0 without validation data: score the training segments.
            None => mean_loss(&params, train_segs, schedule)
                .map_err(diverged(epoch))?
                .map_or(f64::INFINITY, |b| b.total / frames as f64),
        };
        if !selection.is_finite() {
            return Err(Error::Diverged { epoch, detail: "loss is not finite".into() });
        }
        log::info!(
            "epoch {epoch}: frames {frames} train {:?} val {:?}",
            train_loss.map(|l| l.total),
            val_loss.map(|l| l.total)
        );
        let improved = selection < best_loss;
        if improved {
            best_loss = selection;
            best = params.clone();
            best_epoch = epoch;
        }
        on_epoch(EpochEnd { record: &record, params: &params, optimizer: &optimizer, improved })?;
        log.records.push(record);
    }

    Ok(TrainOutcome { best, best_epoch, last: params, optimizer, log })
}
