//! Run configuration: plain-text `key = value` files, presets, and overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chimera::cluster::{Head, InferenceConfig};
use chimera::features::FeatureConfig;
use chimera::loss::MiKind;
use chimera::model::{Curriculum, ModelConfig, RmsPropConfig, Schedule};

/// A malformed configuration or flag value.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Every knob of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub n_layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub n_sources: usize,
    pub model_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub segment_frames: usize,
    /// Segment length after the curriculum switch; `None` keeps one length.
    pub curriculum_frames: Option<usize>,
    pub curriculum_epoch: usize,
    pub alpha: f64,
    pub objective: MiKind,
    pub lr: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub clip_norm: Option<f64>,
    pub train_seed: u64,
    pub head: Head,
    pub inference_segment_frames: usize,
    pub kmeans_seed: u64,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub output: PathBuf,
}

/// Keys in emission order, with their descriptions.
pub const KEYS: &[(&str, &str)] = &[
    ("sample_rate", "audio sample rate in Hz"),
    ("window_size", "STFT window length in samples"),
    ("hop_size", "STFT hop in samples"),
    ("n_mel", "mel bands (F)"),
    ("use_delta", "append first-order deltas to the network input"),
    ("n_layers", "BLSTM layers"),
    ("hidden", "units per direction in each BLSTM layer"),
    ("embed_dim", "embedding dimension (D)"),
    ("n_sources", "sources to separate (C)"),
    ("model_seed", "parameter initialization seed"),
    ("epochs", "training epochs"),
    ("batch_size", "segments per update"),
    ("segment_frames", "training segment length in frames"),
    ("curriculum_frames", "segment length after the curriculum switch, or off"),
    ("curriculum_epoch", "first epoch trained on curriculum_frames"),
    ("alpha", "weight of the deep clustering loss, in [0, 1]"),
    ("objective", "mask-inference objective: msa or mmsa"),
    ("lr", "RMSprop learning rate"),
    ("rmsprop_decay", "RMSprop decay of the squared-gradient average"),
    ("rmsprop_eps", "RMSprop denominator epsilon"),
    ("clip_norm", "global gradient-norm ceiling, or off"),
    ("train_seed", "segment shuffling seed"),
    ("head", "inference head: dc or mi"),
    ("inference_segment_frames", "segment length at inference time"),
    ("kmeans_seed", "K-means seed for the dc head"),
    ("data", "dataset directory holding train.tsv, val.tsv and test.tsv"),
    ("checkpoint", "model checkpoint path"),
    ("log", "training log path"),
    ("output", "directory for separated audio"),
];

/// Named presets accepted by [`RunConfig::preset`], besides feature rows
/// such as `16k-1024-256-mel150`.
pub const PRESETS: &[&str] = &["desk", "paper"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError(format!("invalid value '{value}' for {key}, expected true or false"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    if value == "off" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "off".to_string(), T::to_string)
}

impl RunConfig {
    /// Desk-scale defaults: 2×64 BLSTM, 32 mel bands at 8 kHz, D = 8.
    pub fn desk() -> Self {
        let m = ModelConfig::desk();
        let s = Schedule::default();
        let i = InferenceConfig::default();
        Self {
            features: FeatureConfig::desk(),
            n_layers: m.n_layers,
            hidden: m.hidden,
            embed_dim: m.embed_dim,
            n_sources: m.n_sources,
            model_seed: m.seed,
            epochs: s.epochs,
            batch_size: s.batch_size,
            segment_frames: s.segment_frames,
            curriculum_frames: None,
            curriculum_epoch: 0,
            alpha: s.alpha,
            objective: s.mi_kind,
            lr: s.optimizer.lr,
            rmsprop_decay: s.optimizer.decay,
            rmsprop_eps: s.optimizer.eps,
            clip_norm: s.optimizer.clip_norm,
            train_seed: s.seed,
            head: i.head,
            inference_segment_frames: i.segment_frames,
            kmeans_seed: i.seed,
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train_log.tsv"),
            output: PathBuf::from("separated"),
        }
    }

    /// Full-size network at 16 kHz with the 100 then 500 frame curriculum.
    pub fn paper() -> Self {
        let m = ModelConfig::paper();
        Self {
            features: FeatureConfig::paper(),
            n_layers: m.n_layers,
            hidden: m.hidden,
            embed_dim: m.embed_dim,
            n_sources: m.n_sources,
            curriculum_frames: Some(500),
            curriculum_epoch: 16,
            ..Self::desk()
        }
    }

    /// `desk`, `paper`, or a feature row such as `16k-1024-256-mel150`
    /// applied on top of the desk settings.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            row => FeatureConfig::from_preset(row).map(|features| Self { features, ..Self::desk() }).map_err(|_| {
                ConfigError(format!(
                    "unknown preset '{row}', expected {} or a feature row like 16k-1024-256-mel150",
                    PRESETS.join(", ")
                ))
            }),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "sample_rate" => self.features.sample_rate = parse(key, v)?,
            "window_size" => self.features.window_size = parse(key, v)?,
            "hop_size" => self.features.hop_size = parse(key, v)?,
            "n_mel" => self.features.n_mel = parse(key, v)?,
            "use_delta" => self.features.use_delta = parse_bool(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "n_sources" => self.n_sources = parse(key, v)?,
            "model_seed" => self.model_seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "segment_frames" => self.segment_frames = parse(key, v)?,
            "curriculum_frames" => self.curriculum_frames = parse_optional(key, v)?,
            "curriculum_epoch" => self.curriculum_epoch = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "objective" => self.objective = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "rmsprop_decay" => self.rmsprop_decay = parse(key, v)?,
            "rmsprop_eps" => self.rmsprop_eps = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse_optional(key, v)?,
            "train_seed" => self.train_seed = parse(key, v)?,
            "head" => self.head = parse(key, v)?,
            "inference_segment_frames" => self.inference_segment_frames = parse(key, v)?,
            "kmeans_seed" => self.kmeans_seed = parse(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "log" => self.log = PathBuf::from(v),
            "output" => self.output = PathBuf::from(v),
            _ => return Err(ConfigError(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let f = &self.features;
        Some(match key {
            "sample_rate" => f.sample_rate.to_string(),
            "window_size" => f.window_size.to_string(),
            "hop_size" => f.hop_size.to_string(),
            "n_mel" => f.n_mel.to_string(),
            "use_delta" => f.use_delta.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "hidden" => self.hidden.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "n_sources" => self.n_sources.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "segment_frames" => self.segment_frames.to_string(),
            "curriculum_frames" => show_optional(&self.curriculum_frames),
            "curriculum_epoch" => self.curriculum_epoch.to_string(),
            "alpha" => self.alpha.to_string(),
            "objective" => self.objective.to_string(),
            "lr" => self.lr.to_string(),
            "rmsprop_decay" => self.rmsprop_decay.to_string(),
            "rmsprop_eps" => self.rmsprop_eps.to_string(),
            "clip_norm" => show_optional(&self.clip_norm),
            "train_seed" => self.train_seed.to_string(),
            "head" => self.head.to_string(),
            "inference_segment_frames" => self.inference_segment_frames.to_string(),
            "kmeans_seed" => self.kmeans_seed.to_string(),
            "data" => self.data.display().to_string(),
            "checkpoint" => self.checkpoint.display().to_string(),
            "log" => self.log.display().to_string(),
            "output" => self.output.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            self.set(key, value).map_err(|e| ConfigError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    /// Every key with its description, in a form [`RunConfig::parse_text`]
    /// reads back to an identical configuration.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            hidden: self.hidden,
            n_freq: self.features.n_mel,
            input_dim: self.features.input_dim(),
            embed_dim: self.embed_dim,
            n_sources: self.n_sources,
            seed: self.model_seed,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            segment_frames: self.segment_frames,
            epochs: self.epochs,
            batch_size: self.batch_size,
            alpha: self.alpha,
            mi_kind: self.objective,
            curriculum: self.curriculum_frames.map(|second| Curriculum {
                first_frames: self.segment_frames,
                second_frames: second,
                switch_epoch: self.curriculum_epoch,
            }),
            optimizer: RmsPropConfig {
                lr: self.lr,
                decay: self.rmsprop_decay,
                eps: self.rmsprop_eps,
                clip_norm: self.clip_norm,
            },
            seed: self.train_seed,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig { head: self.head, segment_frames: self.inference_segment_frames, seed: self.kmeans_seed }
    }

    /// Range checks that parsing alone cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |e: chimera::Error| ConfigError(e.to_string());
        self.features.validate().map_err(err)?;
        self.model_config().validate().map_err(err)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ConfigError(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.segment_frames == 0 || self.inference_segment_frames == 0 {
            return Err(ConfigError("batch_size and segment lengths must be positive".into()));
        }
        if self.curriculum_frames == Some(0) {
            return Err(ConfigError("curriculum_frames must be positive or off".into()));
        }
        if self.curriculum_frames.is_some() && self.curriculum_epoch == 0 {
            return Err(ConfigError("curriculum_epoch must be at least 1".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.rmsprop_decay) || self.rmsprop_eps < 0.0 {
            return Err(ConfigError("lr must be positive, rmsprop_decay in [0, 1), rmsprop_eps non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(ConfigError("clip_norm must be positive or off".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let mut cfg = RunConfig::paper();
        cfg.alpha = 0.37;
        cfg.lr = 1.0 / 3.0;
        cfg.clip_norm = None;
        cfg.objective = MiKind::Mmsa;
        cfg.head = Head::Dc;
        cfg.data = PathBuf::from("some dir/with spaces");
        let text = cfg.emit();
        assert_eq!(RunConfig::parse_text(&text).unwrap(), cfg);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), KEYS.len());
        for (key, _) in KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse_text(&cfg.emit()).unwrap(), cfg);
        assert_eq!(RunConfig::parse_text("").unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_and_malformed_lines_are_rejected() {
        assert!(RunConfig::parse_text("epochz = 3").unwrap_err().0.contains("unknown"));
        assert!(RunConfig::parse_text("epochs 3").is_err());
        assert!(RunConfig::parse_text("epochs = three").is_err());
        assert!(RunConfig::parse_text("epochs = 3\nepochs = 4").unwrap_err().0.contains("duplicate"));
        assert!(RunConfig::parse_text("use_delta = maybe").is_err());
        let cfg = RunConfig::parse_text("# comment\n\nepochs = 3   # trailing\n").unwrap();
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn presets() {
        let row = RunConfig::preset("16k-1024-256-mel150").unwrap();
        assert_eq!(row.features, FeatureConfig::from_preset("16k-1024-256-mel150").unwrap());
        assert_eq!(row.model_config().n_freq, 150);
        assert_eq!(row.model_config().input_dim, 150);
        assert_eq!(RunConfig::preset("paper").unwrap().model_config(), ModelConfig::paper());
        assert_eq!(RunConfig::preset("desk").unwrap().model_config(), ModelConfig::desk());
        assert!(RunConfig::preset("huge").is_err());
        for name in PRESETS {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn schedule_mapping() {
        let mut cfg = RunConfig::desk();
        cfg.apply_text("curriculum_frames = 50\ncurriculum_epoch = 3\nclip_norm = off").unwrap();
        let s = cfg.schedule();
        assert_eq!(s.curriculum, Some(Curriculum { first_frames: 100, second_frames: 50, switch_epoch: 3 }));
        assert_eq!(s.optimizer.clip_norm, None);
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
    }
}
