//! The two-headed network: BLSTM body, linear projection to Z, a deep
//! clustering head and a mask-inference head.

mod checkpoint;
mod config;
mod lstm;
mod network;
mod optim;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::ModelConfig;
pub use network::{backward, evaluate_loss, forward, loss_and_grad, ForwardOutput, LossBreakdown, NORM_EPS};
pub use optim::{rmsprop_update, RmsProp, RmsPropConfig};
pub use params::{BlstmLayer, ChimeraParams, LstmParams, GATE_CELL, GATE_FORGET, GATE_INPUT, GATE_OUTPUT};
pub use train::{
    train, train_from, train_with, Curriculum, EpochEnd, EpochRecord, Schedule, TrainOutcome, TrainingLog, TrainingSet,
};
