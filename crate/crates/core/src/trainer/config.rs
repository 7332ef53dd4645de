//! Training configuration, named profiles and the flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_MARGIN;
use crate::pyramid::BranchMask;
use crate::scheduler::SchedulerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub parts: usize,
    pub feature_dim: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub p: usize,
    pub k: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub switch_ratio: f64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub lr_halving_epochs: Vec<u64>,
    pub seed: u64,
    pub pyramid_mask: BranchMask,
    /// Alternate random and PK batches and optimize the ID loss only.
    pub no_triplet_alternating: bool,
    pub with_replacement_pk: bool,
    /// Evaluate (never optimize) the triplet loss on ID-only iterations so its average keeps moving.
    pub triplet_in_id_phase: bool,
    pub backbone: BackboneConfig,
    pub classifier_bias: bool,
    pub squared_distance: bool,
    pub checkpoint_epochs: Vec<u64>,
    pub eval_normalize: bool,
}

pub const KEYS: [&str; 24] = [
    "parts",
    "feature_dim",
    "margin",
    "batch_size",
    "p",
    "k",
    "alpha",
    "gamma",
    "switch_ratio",
    "base_lr",
    "momentum",
    "weight_decay",
    "epochs",
    "lr_halving_epochs",
    "seed",
    "pyramid_mask",
    "no_triplet_alternating",
    "with_replacement_pk",
    "triplet_in_id_phase",
    "backbone",
    "classifier_bias",
    "squared_distance",
    "checkpoint_epochs",
    "eval_normalize",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join(values: &[u64]) -> String {
    values.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            parts: 6,
            feature_dim: 16,
            margin: DEFAULT_MARGIN,
            batch_size: 16,
            p: 4,
            k: 4,
            alpha: 0.25,
            gamma: 2.0,
            switch_ratio: 0.16,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            lr_halving_epochs: vec![15, 20, 25],
            seed: 7,
            pyramid_mask: BranchMask::full(6),
            no_triplet_alternating: false,
            with_replacement_pk: false,
            triplet_in_id_phase: true,
            backbone: BackboneConfig::desk(),
            classifier_bias: false,
            squared_distance: false,
            checkpoint_epochs: Vec::new(),
            eval_normalize: false,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            feature_dim: 128,
            batch_size: 64,
            p: 8,
            k: 8,
            epochs: 120,
            lr_halving_epochs: vec![60, 70, 80, 90],
            backbone: BackboneConfig::parse_spec("3:32s2,64s2,128s1").expect("valid spec"),
            ..Self::desk()
        }
    }

    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            switch_ratio: self.switch_ratio,
        }
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "parts" => self.parts.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "margin" => self.margin.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "p" => self.p.to_string(),
            "k" => self.k.to_string(),
            "alpha" => self.alpha.to_string(),
            "gamma" => self.gamma.to_string(),
            "switch_ratio" => self.switch_ratio.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr_halving_epochs" => join(&self.lr_halving_epochs),
            "seed" => self.seed.to_string(),
            "pyramid_mask" => self.pyramid_mask.to_string(),
            "no_triplet_alternating" => self.no_triplet_alternating.to_string(),
            "with_replacement_pk" => self.with_replacement_pk.to_string(),
            "triplet_in_id_phase" => self.triplet_in_id_phase.to_string(),
            "backbone" => self.backbone.to_spec(),
            "classifier_bias" => self.classifier_bias.to_string(),
            "squared_distance" => self.squared_distance.to_string(),
            "checkpoint_epochs" => join(&self.checkpoint_epochs),
            "eval_normalize" => self.eval_normalize.to_string(),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    /// Sets one field from its text form. Changing `parts` resets a mask of the wrong length.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "parts" => {
                self.parts = parse(key, v)?;
                if self.pyramid_mask.levels() != self.parts && self.parts > 0 {
                    self.pyramid_mask = BranchMask::full(self.parts);
                }
            }
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "switch_ratio" => self.switch_ratio = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr_halving_epochs" => self.lr_halving_epochs = parse_list(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "pyramid_mask" => self.pyramid_mask = v.parse()?,
            "no_triplet_alternating" => self.no_triplet_alternating = parse(key, v)?,
            "with_replacement_pk" => self.with_replacement_pk = parse(key, v)?,
            "triplet_in_id_phase" => self.triplet_in_id_phase = parse(key, v)?,
            "backbone" => self.backbone = BackboneConfig::parse_spec(v)?,
            "classifier_bias" => self.classifier_bias = parse(key, v)?,
            "squared_distance" => self.squared_distance = parse(key, v)?,
            "checkpoint_epochs" => self.checkpoint_epochs = parse_list(key, v)?,
            "eval_normalize" => self.eval_normalize = parse(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` of `text` on top of `self`. Section headers are ignored.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        for (_, props) in ini.iter() {
            for (k, v) in props.iter() {
                self.set(k.trim(), v)?;
            }
        }
        Ok(())
    }

    pub fn from_ini(text: &str, base: TrainConfig) -> Result<Self> {
        let mut cfg = base;
        cfg.apply_ini(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, base: TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_ini(&text, base)
    }

    /// Every key in a fixed order, one per line.
    pub fn to_ini(&self) -> String {
        let mut ini = Ini::new();
        {
            let mut section = ini.with_general_section();
            for key in KEYS {
                section.set(key, self.get(key).expect("known key"));
            }
        }
        let mut out = Vec::new();
        ini.write_to(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ini output is utf-8")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.parts == 0 || self.feature_dim == 0 {
            return fail("parts and feature_dim must be positive".into());
        }
        if self.pyramid_mask.levels() != self.parts {
            return fail(format!(
                "pyramid_mask `{}` has {} levels but parts = {}",
                self.pyramid_mask,
                self.pyramid_mask.levels(),
                self.parts
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if self.p * self.k != self.batch_size {
            return fail(format!(
                "p * k = {} must equal batch_size = {}",
                self.p * self.k,
                self.batch_size
            ));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.lr_halving_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lr_halving_epochs must be strictly increasing".into());
        }
        self.scheduler().validate()
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_ini())
    }
}
