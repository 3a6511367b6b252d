//! Run configuration: a flat key=value config file plus flag overrides, fully
//! validated before any file or network activity.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::data::PartitionSpec;

#[derive(Debug, Error)]
#[error("config field `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Serve,
    Client,
    LocalSim,
    Baseline,
    Attack,
    Compare,
}

impl Mode {
    fn parse(s: &str) -> Result<Mode, ConfigError> {
        match s {
            "serve" => Ok(Mode::Serve),
            "client" => Ok(Mode::Client),
            "local-sim" => Ok(Mode::LocalSim),
            "baseline" => Ok(Mode::Baseline),
            "attack" => Ok(Mode::Attack),
            "compare" => Ok(Mode::Compare),
            other => Err(ConfigError::new(
                "mode",
                format!("unknown mode {other:?} (serve|client|local-sim|baseline|attack|compare)"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Idx,
    Synthetic,
}

/// Everything a run needs. Defaults are desk-scale.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub clients: u32,
    pub client_id: u32,
    pub depth: u8,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f32,
    pub dataset: DatasetKind,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
    pub synth_samples: usize,
    pub synth_classes: usize,
    pub image_size: usize,
    pub share: bool,
    pub listen: String,
    pub connect: String,
    pub out: PathBuf,
    pub partition: Option<String>,
    pub train_take: Option<usize>,
    pub test_take: Option<usize>,
    pub barrier_timeout: Duration,
    pub attack_steps: usize,
    pub attack_lr: f32,
    pub attack_batch: usize,
    pub attack_samples: usize,
    pub depths: Vec<u8>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::LocalSim,
            seed: 0,
            clients: 3,
            client_id: 1,
            depth: 2,
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            dataset: DatasetKind::Synthetic,
            idx_images: None,
            idx_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            synth_samples: 2048,
            synth_classes: 10,
            image_size: 28,
            share: true,
            listen: "127.0.0.1:7700".into(),
            connect: "127.0.0.1:7700".into(),
            out: PathBuf::from("out"),
            partition: None,
            train_take: None,
            test_take: None,
            barrier_timeout: Duration::from_secs(300),
            attack_steps: 5000,
            attack_lr: 0.01,
            attack_batch: 64,
            attack_samples: 1024,
            depths: vec![1, 2, 3],
            checkpoint: None,
        }
    }
}

/// Parse a flat key=value file: one pair per line, `#` comments, blank lines
/// ignored.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(
                "config-file",
                format!("line {}: expected key=value, got {line:?}", lineno + 1),
            ));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse<T: std::str::FromStr>(field: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::new(field, format!("cannot parse {value:?}")))
}

fn parse_bool(field: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        other => Err(ConfigError::new(
            field,
            format!("expected on/off, got {other:?}"),
        )),
    }
}

impl RunConfig {
    /// Apply key=value pairs in order (file first, then flag overrides).
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<(), ConfigError> {
        for (key, value) in pairs {
            match key.as_str() {
                "mode" => self.mode = Mode::parse(value)?,
                "seed" => self.seed = parse("seed", value)?,
                "clients" => self.clients = parse("clients", value)?,
                "client_id" => self.client_id = parse("client_id", value)?,
                "depth" => self.depth = parse("depth", value)?,
                "epochs" => self.epochs = parse("epochs", value)?,
                "batch_size" => self.batch_size = parse("batch_size", value)?,
                "lr" => self.lr = parse("lr", value)?,
                "dataset" => {
                    self.dataset = match value.as_str() {
                        "idx" => DatasetKind::Idx,
                        "synthetic" => DatasetKind::Synthetic,
                        other => {
                            return Err(ConfigError::new(
                                "dataset",
                                format!("expected idx or synthetic, got {other:?}"),
                            ))
                        }
                    }
                }
                "idx_images" => self.idx_images = Some(PathBuf::from(value)),
                "idx_labels" => self.idx_labels = Some(PathBuf::from(value)),
                "idx_test_images" => self.idx_test_images = Some(PathBuf::from(value)),
                "idx_test_labels" => self.idx_test_labels = Some(PathBuf::from(value)),
                "synth_samples" => self.synth_samples = parse("synth_samples", value)?,
                "synth_classes" => self.synth_classes = parse("synth_classes", value)?,
                "image_size" => self.image_size = parse("image_size", value)?,
                "share" => self.share = parse_bool("share", value)?,
                "listen" => self.listen = value.clone(),
                "connect" => self.connect = value.clone(),
                "out" => self.out = PathBuf::from(value),
                "partition" => self.partition = Some(value.clone()),
                "train_take" => self.train_take = Some(parse("train_take", value)?),
                "test_take" => self.test_take = Some(parse("test_take", value)?),
                "barrier_timeout" => {
                    self.barrier_timeout = Duration::from_secs(parse("barrier_timeout", value)?)
                }
                "attack_steps" => self.attack_steps = parse("attack_steps", value)?,
                "attack_lr" => self.attack_lr = parse("attack_lr", value)?,
                "attack_batch" => self.attack_batch = parse("attack_batch", value)?,
                "attack_samples" => self.attack_samples = parse("attack_samples", value)?,
                "depths" => {
                    let mut depths = Vec::new();
                    for part in value.split(',') {
                        depths.push(parse::<u8>("depths", part.trim())?);
                    }
                    self.depths = depths;
                }
                "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
                other => {
                    return Err(ConfigError::new(
                        other,
                        "unknown config key".to_string(),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn from_sources(
        file: Option<&Path>,
        overrides: &[(String, String)],
    ) -> Result<RunConfig, ConfigError> {
        let mut config = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                ConfigError::new("config", format!("cannot read {}: {e}", path.display()))
            })?;
            config.apply(&parse_config_file(&text)?)?;
        }
        config.apply(overrides)?;
        config.validate()?;
        Ok(config)
    }

    /// Total validation: every reachable error names the offending field. No
    /// side effects happen before this passes.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.clients < 1 {
            return Err(ConfigError::new("clients", "must be >= 1"));
        }
        if !(1..=3).contains(&self.depth) {
            return Err(ConfigError::new("depth", "must be 1, 2, or 3"));
        }
        if self.epochs < 1 {
            return Err(ConfigError::new("epochs", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(ConfigError::new("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(ConfigError::new("lr", "must be > 0"));
        }
        if self.image_size != 28 && self.image_size != 32 {
            return Err(ConfigError::new("image_size", "must be 28 or 32"));
        }
        if self.dataset == DatasetKind::Idx {
            if self.idx_images.is_none() {
                return Err(ConfigError::new("idx_images", "required for dataset=idx"));
            }
            if self.idx_labels.is_none() {
                return Err(ConfigError::new("idx_labels", "required for dataset=idx"));
            }
            if self.idx_test_images.is_some() != self.idx_test_labels.is_some() {
                return Err(ConfigError::new(
                    "idx_test_labels",
                    "test images and labels must be given together",
                ));
            }
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.synth_samples < 1 {
                return Err(ConfigError::new("synth_samples", "must be >= 1"));
            }
            if self.synth_classes < 2 {
                return Err(ConfigError::new("synth_classes", "must be >= 2"));
            }
        }
        if self.mode == Mode::Client && self.client_id < 1 {
            return Err(ConfigError::new("client_id", "must be >= 1"));
        }
        if self.mode == Mode::Attack {
            if self.checkpoint.is_none() {
                return Err(ConfigError::new("checkpoint", "required for mode=attack"));
            }
            if self.depths.is_empty() {
                return Err(ConfigError::new("depths", "must list at least one depth"));
            }
            for &d in &self.depths {
                if !(1..=3).contains(&d) {
                    return Err(ConfigError::new("depths", format!("depth {d} out of range")));
                }
            }
            if self.attack_steps == 0 {
                return Err(ConfigError::new("attack_steps", "must be >= 1"));
            }
            if !(self.attack_lr > 0.0) {
                return Err(ConfigError::new("attack_lr", "must be > 0"));
            }
            if self.attack_batch < 1 {
                return Err(ConfigError::new("attack_batch", "must be >= 1"));
            }
            if self.attack_samples < 1 {
                return Err(ConfigError::new("attack_samples", "must be >= 1"));
            }
        }
        if let Some(spec) = &self.partition {
            self.parse_partition_str(spec)?;
        }
        if self.barrier_timeout.is_zero() {
            return Err(ConfigError::new("barrier_timeout", "must be > 0 seconds"));
        }
        Ok(())
    }

    fn parse_partition_str(&self, spec: &str) -> Result<PartitionSpec, ConfigError> {
        let mut classes = BTreeMap::new();
        let groups: Vec<&str> = spec.split('/').collect();
        if groups.len() != self.clients as usize {
            return Err(ConfigError::new(
                "partition",
                format!(
                    "{} class groups for {} clients (use e.g. 0-3/4-6/7-9)",
                    groups.len(),
                    self.clients
                ),
            ));
        }
        for (i, group) in groups.iter().enumerate() {
            let mut list = Vec::new();
            for piece in group.split(',') {
                let piece = piece.trim();
                if let Some((lo, hi)) = piece.split_once('-') {
                    let lo: usize = parse("partition", lo)?;
                    let hi: usize = parse("partition", hi)?;
                    if hi < lo {
                        return Err(ConfigError::new("partition", format!("bad range {piece:?}")));
                    }
                    list.extend(lo..=hi);
                } else {
                    list.push(parse("partition", piece)?);
                }
            }
            if list.is_empty() {
                return Err(ConfigError::new(
                    "partition",
                    format!("client {} has no classes", i + 1),
                ));
            }
            classes.insert(i as u32 + 1, list);
        }
        Ok(PartitionSpec { classes })
    }

    /// Partition for this run: the explicit spec if given, otherwise
    /// contiguous chunks over the dataset's classes.
    pub fn partition_spec(&self, num_classes: usize) -> Result<PartitionSpec, ConfigError> {
        match &self.partition {
            Some(s) => self.parse_partition_str(s),
            None => Ok(PartitionSpec::contiguous(self.clients, num_classes)),
        }
    }
}
