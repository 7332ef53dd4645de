//! Checkpoints: every parameter, running statistic, momentum buffer, scheduler value and
//! sampler counter in one `PYRT` container.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::container::{Container, Entry};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PyramidModel};
use crate::scheduler::SchedulerState;

pub const FORMAT: i64 = 1;

/// Hex SHA-256 of everything that determines parameter names and shapes.
pub fn fingerprint(model: &ModelConfig) -> String {
    let text = format!(
        "backbone={};height={};width={};parts={};feature_dim={};num_classes={};classifier_bias={}",
        model.backbone.to_spec(),
        model.image_height,
        model.image_width,
        model.parts,
        model.feature_dim,
        model.num_classes,
        model.classifier_bias
    );
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Sampler and iteration counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counters {
    pub iteration: u64,
    pub random_epoch: u64,
    pub random_cursor: u64,
    pub pk_counter: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    container: Container,
}

fn text_entry(text: &str) -> Entry {
    Entry::ints(text.bytes().map(i64::from).collect())
}

fn entry_text(c: &Container, name: &str) -> Result<String> {
    let bytes = c
        .ints(name)?
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::Checkpoint(format!("`{name}` is not text"))))
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint(format!("`{name}` is not UTF-8")))
}

impl Checkpoint {
    pub(crate) fn build(
        config: &TrainConfig,
        model: &PyramidModel<f32>,
        velocity: &[crate::tensor::Tensor<f32>],
        scheduler: &SchedulerState,
        counters: Counters,
    ) -> Result<Self> {
        let mc = model.config();
        let mut c = Container::new();
        c.insert("meta.format", Entry::ints(vec![FORMAT]))?;
        c.insert("meta.fingerprint", text_entry(&fingerprint(mc)))?;
        c.insert(
            "meta.model",
            Entry::ints(vec![mc.image_height as i64, mc.image_width as i64, mc.num_classes as i64]),
        )?;
        c.insert("meta.config", text_entry(&config.to_ini()))?;
        c.insert(
            "state.counters",
            Entry::ints(
                [counters.iteration, counters.random_epoch, counters.random_cursor, counters.pk_counter]
                    .map(|v| v as i64)
                    .to_vec(),
            ),
        )?;
        let sched = scheduler.encode();
        c.insert("state.scheduler", crate::tensor::Tensor::new(&[sched.len()], sched)?)?;
        for p in model.store().params() {
            c.insert(format!("param.{}", p.name), p.value.clone())?;
        }
        for b in model.store().buffers() {
            c.insert(format!("buffer.{}", b.name), b.value.clone())?;
        }
        for (p, v) in model.store().params().iter().zip(velocity) {
            c.insert(format!("momentum.{}", p.name), v.clone())?;
        }
        Ok(Checkpoint { container: c })
    }

    pub fn from_container(container: Container) -> Result<Self> {
        let format = container.ints("meta.format")?;
        if format != [FORMAT] {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {format:?}")));
        }
        let ck = Checkpoint { container };
        ck.config()?;
        ck.counters()?;
        Ok(ck)
    }

    pub fn container(&self) -> &Container {
        &self.container
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.container.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.container.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_ini(&entry_text(&self.container, "meta.config")?, TrainConfig::desk())
    }

    pub fn fingerprint(&self) -> Result<String> {
        entry_text(&self.container, "meta.fingerprint")
    }

    pub fn counters(&self) -> Result<Counters> {
        match *self.container.ints("state.counters")? {
            [a, b, c, d] if [a, b, c, d].iter().all(|&v| v >= 0) => Ok(Counters {
                iteration: a as u64,
                random_epoch: b as u64,
                random_cursor: c as u64,
                pk_counter: d as u64,
            }),
            _ => Err(Error::Checkpoint("malformed counters".into())),
        }
    }

    pub fn scheduler(&self, config: &TrainConfig) -> Result<SchedulerState> {
        let values = self.container.tensor::<f64>("state.scheduler")?;
        SchedulerState::decode(config.scheduler(), values.data())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = self.config()?;
        let dims = self.container.ints("meta.model")?;
        let [h, w, classes] = *dims else {
            return Err(Error::Checkpoint("malformed model metadata".into()));
        };
        Ok(ModelConfig {
            backbone: cfg.backbone,
            image_height: h as usize,
            image_width: w as usize,
            parts: cfg.parts,
            feature_dim: cfg.feature_dim,
            num_classes: classes as usize,
            classifier_bias: cfg.classifier_bias,
        })
    }

    /// Refuses when the checkpoint was written for a different architecture.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        let stored = self.fingerprint()?;
        let expect = fingerprint(model);
        if stored != expect {
            let have = self.model_config()?;
            return Err(Error::Checkpoint(format!(
                "fingerprint {} does not match {} (checkpoint: n={}, D={}, backbone {}, {} classes, {}x{} images; \
                 requested: n={}, D={}, backbone {}, {} classes, {}x{} images)",
                &stored[..12.min(stored.len())],
                &expect[..12],
                have.parts,
                have.feature_dim,
                have.backbone.to_spec(),
                have.num_classes,
                have.image_height,
                have.image_width,
                model.parts,
                model.feature_dim,
                model.backbone.to_spec(),
                model.num_classes,
                model.image_height,
                model.image_width
            )));
        }
        Ok(())
    }

    /// Copies parameters and running statistics into `model`.
    pub fn restore_model(&self, model: &mut PyramidModel<f32>) -> Result<()> {
        self.check_compatible(model.config())?;
        let store = model.store_mut();
        for p in store.params_mut() {
            let t = self.container.tensor::<f32>(&format!("param.{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter `{}` has the wrong shape", p.name)));
            }
            p.value = t;
        }
        for b in store.buffers_mut() {
            let t = self.container.tensor::<f32>(&format!("buffer.{}", b.name))?;
            if t.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!("buffer `{}` has the wrong shape", b.name)));
            }
            b.value = t;
        }
        Ok(())
    }

    pub fn momentum(&self, model: &PyramidModel<f32>) -> Result<Vec<crate::tensor::Tensor<f32>>> {
        model
            .store()
            .params()
            .iter()
            .map(|p| self.container.tensor::<f32>(&format!("momentum.{}", p.name)))
            .collect()
    }

    /// Rebuilds the trained model on its own.
    pub fn model(&self) -> Result<PyramidModel<f32>> {
        let cfg = self.config()?;
        let mut model = PyramidModel::new(self.model_config()?, cfg.seed)?;
        self.restore_model(&mut model)?;
        Ok(model)
    }
}
