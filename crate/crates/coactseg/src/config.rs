//! Flat key=value run configuration shared by every CLI command.
//!
//! One `RunConfig` is the union of the phantom, network, training,
//! inference, and metric options plus the working paths. It loads from a
//! plain-text file (`key=value`, `#` comments) and applies command-line
//! overrides on top; unknown keys are rejected, and `dump` round-trips.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::losses::LossWeights;
use crate::network::SegNetConfig;
use crate::phantom::{DatasetCounts, PhantomConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // root
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub report_stem: String,
    pub split: String,
    // phantom
    pub dims: usize,
    pub spacing: f64,
    pub background_level: f64,
    pub noise_std: f64,
    pub lesion_count_min: usize,
    pub lesion_count_max: usize,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub new_lesion_count_min: usize,
    pub new_lesion_count_max: usize,
    pub lesion_contrast: f64,
    pub train_single: usize,
    pub train_two: usize,
    pub val_single: usize,
    pub val_two: usize,
    // network
    pub levels: usize,
    pub base_channels: usize,
    pub head_channels: usize,
    pub prelu_slope_init: f64,
    // training
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_single: usize,
    pub batch_two: usize,
    pub patch_size: usize,
    pub shift_margin: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub switch_iteration: usize,
    pub staged: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    // inference
    pub stride: usize,
    pub threshold: f64,
    // metrics
    pub min_lesion_size: usize,
    pub distance_mm: bool,
    // gradcheck
    pub gradcheck_patch: usize,
    pub gradcheck_coords: usize,
    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
    // ablation
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        let train = TrainConfig::default();
        let net = SegNetConfig::default();
        RunConfig {
            seed: 1337,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
            checkpoint: None,
            report_stem: "eval".into(),
            split: "val".into(),
            dims: phantom.dims.0,
            spacing: phantom.spacing_mm.0,
            background_level: phantom.background_level,
            noise_std: phantom.noise_std,
            lesion_count_min: phantom.lesion_count_range.0,
            lesion_count_max: phantom.lesion_count_range.1,
            lesion_radius_min: phantom.lesion_radius_range_vox.0,
            lesion_radius_max: phantom.lesion_radius_range_vox.1,
            new_lesion_count_min: phantom.new_lesion_count_range.0,
            new_lesion_count_max: phantom.new_lesion_count_range.1,
            lesion_contrast: phantom.lesion_contrast,
            train_single: 2,
            train_two: 2,
            val_single: 0,
            val_two: 2,
            levels: net.levels,
            base_channels: net.base_channels,
            head_channels: net.head_channels,
            prelu_slope_init: net.prelu_slope_init,
            iterations: train.iterations,
            lr: train.lr,
            beta1: train.beta1,
            beta2: train.beta2,
            adam_eps: train.adam_eps,
            batch_single: train.n_single,
            batch_two: train.n_two,
            patch_size: train.patch_size,
            shift_margin: train.shift_margin,
            lambda1: train.weights.lambda1,
            lambda2: train.weights.lambda2,
            switch_iteration: train.weights.switch_iteration,
            staged: false,
            log_every: train.log_every,
            checkpoint_every: train.checkpoint_every,
            stride: 6,
            threshold: 0.5,
            min_lesion_size: crate::metrics::MIN_LESION_SIZE,
            distance_mm: false,
            gradcheck_patch: 8,
            gradcheck_coords: 3,
            gradcheck_eps: 1e-4,
            gradcheck_tol: 1e-4,
            ablate_seeds: 3,
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "seed",
    "data_dir",
    "run_dir",
    "checkpoint",
    "report_stem",
    "split",
    "dims",
    "spacing",
    "background_level",
    "noise_std",
    "lesion_count_min",
    "lesion_count_max",
    "lesion_radius_min",
    "lesion_radius_max",
    "new_lesion_count_min",
    "new_lesion_count_max",
    "lesion_contrast",
    "train_single",
    "train_two",
    "val_single",
    "val_two",
    "levels",
    "base_channels",
    "head_channels",
    "prelu_slope_init",
    "iterations",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_single",
    "batch_two",
    "patch_size",
    "shift_margin",
    "lambda1",
    "lambda2",
    "switch_iteration",
    "staged",
    "log_every",
    "checkpoint_every",
    "stride",
    "threshold",
    "min_lesion_size",
    "distance_mm",
    "gradcheck_patch",
    "gradcheck_coords",
    "gradcheck_eps",
    "gradcheck_tol",
    "ablate_seeds",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{value}` for key `{key}`"))),
    }
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "run_dir" => self.run_dir.display().to_string(),
            "checkpoint" => self
                .checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "report_stem" => self.report_stem.clone(),
            "split" => self.split.clone(),
            "dims" => self.dims.to_string(),
            "spacing" => self.spacing.to_string(),
            "background_level" => self.background_level.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "lesion_count_min" => self.lesion_count_min.to_string(),
            "lesion_count_max" => self.lesion_count_max.to_string(),
            "lesion_radius_min" => self.lesion_radius_min.to_string(),
            "lesion_radius_max" => self.lesion_radius_max.to_string(),
            "new_lesion_count_min" => self.new_lesion_count_min.to_string(),
            "new_lesion_count_max" => self.new_lesion_count_max.to_string(),
            "lesion_contrast" => self.lesion_contrast.to_string(),
            "train_single" => self.train_single.to_string(),
            "train_two" => self.train_two.to_string(),
            "val_single" => self.val_single.to_string(),
            "val_two" => self.val_two.to_string(),
            "levels" => self.levels.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "head_channels" => self.head_channels.to_string(),
            "prelu_slope_init" => self.prelu_slope_init.to_string(),
            "iterations" => self.iterations.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "batch_single" => self.batch_single.to_string(),
            "batch_two" => self.batch_two.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "shift_margin" => self.shift_margin.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "switch_iteration" => self.switch_iteration.to_string(),
            "staged" => self.staged.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "stride" => self.stride.to_string(),
            "threshold" => self.threshold.to_string(),
            "min_lesion_size" => self.min_lesion_size.to_string(),
            "distance_mm" => self.distance_mm.to_string(),
            "gradcheck_patch" => self.gradcheck_patch.to_string(),
            "gradcheck_coords" => self.gradcheck_coords.to_string(),
            "gradcheck_eps" => self.gradcheck_eps.to_string(),
            "gradcheck_tol" => self.gradcheck_tol.to_string(),
            "ablate_seeds" => self.ablate_seeds.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        };
        Ok(v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "run_dir" => self.run_dir = PathBuf::from(value),
            "checkpoint" => {
                self.checkpoint = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "report_stem" => self.report_stem = value.to_string(),
            "split" => {
                if value != "train" && value != "val" {
                    return Err(Error::Config(format!(
                        "split must be `train` or `val`, got `{value}`"
                    )));
                }
                self.split = value.to_string();
            }
            "dims" => self.dims = parse(key, value)?,
            "spacing" => self.spacing = parse(key, value)?,
            "background_level" => self.background_level = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "lesion_count_min" => self.lesion_count_min = parse(key, value)?,
            "lesion_count_max" => self.lesion_count_max = parse(key, value)?,
            "lesion_radius_min" => self.lesion_radius_min = parse(key, value)?,
            "lesion_radius_max" => self.lesion_radius_max = parse(key, value)?,
            "new_lesion_count_min" => self.new_lesion_count_min = parse(key, value)?,
            "new_lesion_count_max" => self.new_lesion_count_max = parse(key, value)?,
            "lesion_contrast" => self.lesion_contrast = parse(key, value)?,
            "train_single" => self.train_single = parse(key, value)?,
            "train_two" => self.train_two = parse(key, value)?,
            "val_single" => self.val_single = parse(key, value)?,
            "val_two" => self.val_two = parse(key, value)?,
            "levels" => self.levels = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "head_channels" => self.head_channels = parse(key, value)?,
            "prelu_slope_init" => self.prelu_slope_init = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_single" => self.batch_single = parse(key, value)?,
            "batch_two" => self.batch_two = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "shift_margin" => self.shift_margin = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "switch_iteration" => self.switch_iteration = parse(key, value)?,
            "staged" => self.staged = parse_bool(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "min_lesion_size" => self.min_lesion_size = parse(key, value)?,
            "distance_mm" => self.distance_mm = parse_bool(key, value)?,
            "gradcheck_patch" => self.gradcheck_patch = parse(key, value)?,
            "gradcheck_coords" => self.gradcheck_coords = parse(key, value)?,
            "gradcheck_eps" => self.gradcheck_eps = parse(key, value)?,
            "gradcheck_tol" => self.gradcheck_tol = parse(key, value)?,
            "ablate_seeds" => self.ablate_seeds = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }

    /// Apply `key=value` lines from a file on top of `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: expected key=value, got `{line}`",
                    path.display(),
                    ln + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Apply `key=value` command-line overrides; overrides win over the file.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{pair}` is not key=value"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            dims: (self.dims, self.dims, self.dims),
            spacing_mm: (self.spacing, self.spacing, self.spacing),
            background_level: self.background_level,
            noise_std: self.noise_std,
            lesion_count_range: (self.lesion_count_min, self.lesion_count_max),
            lesion_radius_range_vox: (self.lesion_radius_min, self.lesion_radius_max),
            new_lesion_count_range: (self.new_lesion_count_min, self.new_lesion_count_max),
            lesion_contrast: self.lesion_contrast,
            seed: self.seed,
        }
    }

    pub fn dataset_counts(&self) -> DatasetCounts {
        DatasetCounts {
            train_single: self.train_single,
            train_two: self.train_two,
            val_single: self.val_single,
            val_two: self.val_two,
        }
    }

    pub fn net_config(&self) -> SegNetConfig {
        SegNetConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            head_channels: self.head_channels,
            prelu_slope_init: self.prelu_slope_init,
            param_seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            n_single: self.batch_single,
            n_two: self.batch_two,
            patch_size: self.patch_size,
            shift_margin: self.shift_margin,
            weights: LossWeights {
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                switch_iteration: self.switch_iteration,
            },
            seed: self.seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            net: self.net_config(),
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            patch_size: self.patch_size,
            stride: self.stride,
            threshold: self.threshold,
        }
    }
}
