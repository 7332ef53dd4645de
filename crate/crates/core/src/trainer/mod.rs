//! Multi-loss dynamic training.
//!
//! Each iteration picks a phase from the scheduler weights: ID-only iterations draw a
//! random batch and minimize the ID loss; combined iterations draw a P×K batch and minimize
//! the focal-weighted sum of the ID and triplet losses. Epochs are counted in random-batch
//! lengths regardless of phase, so the learning-rate schedule does not depend on it.

mod checkpoint;
mod config;
mod optim;
mod trace;

pub use checkpoint::{fingerprint, Checkpoint, Counters};
pub use config::{Profile, TrainConfig, KEYS};
pub use optim::{lr_schedule, Sgd};
pub use trace::{read_trace, trace_to_string, write_trace, TraceRow, TraceWriter, COLUMNS};

use crate::batching::{MiniBatch, PkPolicy, PkSampler, RandomSampler};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{embed_rows, evaluate_model, shuffled_label_baseline, ChanceBaseline, Metrics};
use crate::losses::{id_loss, triplet_loss, Task};
use crate::model::{ModelConfig, PyramidModel};
use crate::params::Mode;
use crate::pyramid::BranchMask;
use crate::scheduler::{combined_objective, Phase, SchedulerState};
use crate::tensor::{Graph, Tensor};

/// Stacks the listed images of `[N, C, H, W]` into a batch.
pub fn gather_images(images: &Tensor<f32>, indices: &[usize]) -> Result<Tensor<f32>> {
    let item: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(item * indices.len());
    for &i in indices {
        data.extend_from_slice(&images.data()[i * item..(i + 1) * item]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data)
}

pub fn model_config(config: &TrainConfig, dataset: &Dataset) -> Result<ModelConfig> {
    let (c, h, w) = dataset.image_shape();
    if c != config.backbone.in_channels {
        return Err(Error::Config(format!(
            "dataset images have {c} channels, backbone expects {}",
            config.backbone.in_channels
        )));
    }
    let mc = ModelConfig {
        backbone: config.backbone.clone(),
        image_height: h,
        image_width: w,
        parts: config.parts,
        feature_dim: config.feature_dim,
        num_classes: dataset.train_classes().1,
        classifier_bias: config.classifier_bias,
    };
    mc.feature_map_shape()?;
    Ok(mc)
}

pub struct Trainer {
    config: TrainConfig,
    model: PyramidModel<f32>,
    sgd: Sgd<f32>,
    scheduler: SchedulerState,
    random: RandomSampler,
    pk: PkSampler,
    images: Tensor<f32>,
    iteration: u64,
    last_batch: Option<MiniBatch>,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::Dataset("the train split is empty".into()));
        }
        let model = PyramidModel::new(model_config(&config, dataset)?, config.seed)?;
        let (labels, _) = dataset.train_classes();
        let cameras = dataset.train.cameras();
        let policy = if config.with_replacement_pk {
            PkPolicy::WithReplacement
        } else {
            PkPolicy::Exclude
        };
        Ok(Trainer {
            sgd: Sgd::new(model.store(), config.momentum, config.weight_decay)?,
            scheduler: SchedulerState::new(config.scheduler())?,
            random: RandomSampler::new(&labels, &cameras, config.batch_size, config.seed)?,
            pk: PkSampler::new(&labels, &cameras, config.p, config.k, policy, config.seed)?,
            images: dataset.train.images.clone(),
            model,
            config,
            iteration: 0,
            last_batch: None,
        })
    }

    /// Continues from `checkpoint`; `config` may differ from the stored one only in
    /// settings that leave the architecture unchanged (for instance `epochs`).
    pub fn resume(config: TrainConfig, dataset: &Dataset, checkpoint: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config, dataset)?;
        checkpoint.restore_model(&mut t.model)?;
        t.sgd.set_velocity(checkpoint.momentum(&t.model)?)?;
        t.scheduler = checkpoint.scheduler(&t.config)?;
        let c = checkpoint.counters()?;
        t.random.seek(c.random_epoch, c.random_cursor as usize)?;
        t.pk.seek(c.pk_counter);
        t.iteration = c.iteration;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PyramidModel<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut PyramidModel<f32> {
        &mut self.model
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.scheduler
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Batch consumed by the most recent `step`.
    pub fn last_batch(&self) -> Option<&MiniBatch> {
        self.last_batch.as_ref()
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.random.batches_per_epoch() as u64
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.iteration / self.iterations_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch() >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (random_epoch, cursor) = self.random.position();
        Checkpoint::build(
            &self.config,
            &self.model,
            self.sgd.velocity(),
            &self.scheduler,
            Counters {
                iteration: self.iteration,
                random_epoch,
                random_cursor: cursor as u64,
                pk_counter: self.pk.counter(),
            },
        )
    }

    fn next_phase(&mut self) -> Phase {
        if self.config.no_triplet_alternating {
            if self.iteration.is_multiple_of(2) {
                Phase::IdOnly
            } else {
                Phase::Combined
            }
        } else {
            self.scheduler.decide()
        }
    }

    fn next_batch(&mut self, phase: Phase) -> MiniBatch {
        match phase {
            Phase::IdOnly => self.random.next(),
            Phase::Combined => self.pk.next(),
        }
        .expect("samplers are endless")
    }

    /// Runs one iteration and returns its trace row.
    pub fn step(&mut self) -> Result<TraceRow> {
        let tau = self.iteration + 1;
        let lr = lr_schedule(self.epoch(), self.config.base_lr, &self.config.lr_halving_epochs);
        let phase = self.next_phase();
        let batch = self.next_batch(phase);
        let (fl_id, fl_tp) = self.scheduler.weights();
        let alternating = self.config.no_triplet_alternating;
        let mask = self.config.pyramid_mask.clone();

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g);
        let x = g.constant(gather_images(&self.images, &batch.indices)?);
        let fwd = self.model.forward(&mut g, &bound, x, &mask, Mode::Train)?;
        let (l_id, id_value) = id_loss(&mut g, &fwd.logits, &batch.labels)?;
        let diverged = |detail: String| Error::Diverged { iteration: tau, detail };
        if !id_value.value.is_finite() {
            return Err(diverged(format!("ID loss is {}", id_value.value)));
        }

        let want_triplet =
            !alternating && batch.len() >= 2 && (phase == Phase::Combined || self.config.triplet_in_id_phase);
        let (l_tp, tp_value) = if want_triplet {
            let (var, value) = triplet_loss(
                &mut g,
                fwd.embedding,
                &batch.labels,
                self.config.margin,
                self.config.squared_distance,
            )?;
            if !value.value.is_finite() {
                return Err(diverged(format!("triplet loss is {}", value.value)));
            }
            (var, (!value.degenerate).then_some(value.value))
        } else {
            (None, None)
        };

        let objective = match phase {
            Phase::Combined if !alternating => combined_objective(&mut g, l_id, l_tp, fl_id, fl_tp)?,
            _ => Some(l_id),
        };
        if let Some(obj) = objective {
            g.backward(obj)?;
            let grads = self.model.store().grads(&g, &bound);
            self.sgd
                .step(self.model.store_mut(), &grads, lr)
                .map_err(|e| match e {
                    Error::NonFiniteGradient(name) => diverged(format!("non-finite gradient in `{name}`")),
                    other => other,
                })?;
        }

        self.scheduler.observe(Task::Id, id_value.value)?;
        if let Some(v) = tp_value {
            self.scheduler.observe(Task::Triplet, v)?;
        }
        self.scheduler.advance();
        self.iteration = tau;
        self.last_batch = Some(batch);
        let s = &self.scheduler;
        Ok(TraceRow {
            tau,
            phase,
            l_id: id_value.value,
            l_tp: tp_value,
            k_id: s.id.k,
            k_tp: s.tp.k,
            p_id: s.id.p,
            p_tp: s.tp.p,
            fl_id: s.id.fl,
            fl_tp: s.tp.fl,
            lr,
        })
    }

    /// Runs the remaining iterations of the current epoch.
    pub fn run_epoch(&mut self) -> Result<Vec<TraceRow>> {
        let end = (self.epoch() + 1) * self.iterations_per_epoch();
        let mut rows = Vec::with_capacity((end - self.iteration) as usize);
        while self.iteration < end {
            rows.push(self.step()?);
        }
        Ok(rows)
    }

    /// Trains until `epochs` have completed, calling `on_epoch` after each one.
    pub fn run_until(
        &mut self,
        epochs: u64,
        mut on_epoch: impl FnMut(&Trainer, &[TraceRow]) -> Result<()>,
    ) -> Result<Vec<TraceRow>> {
        let mut rows = Vec::new();
        while self.epoch() < epochs {
            let epoch_rows = self.run_epoch()?;
            on_epoch(self, &epoch_rows)?;
            rows.extend(epoch_rows);
        }
        Ok(rows)
    }

    pub fn run(&mut self) -> Result<Vec<TraceRow>> {
        self.run_until(self.config.epochs, |_, _| Ok(()))
    }

    pub fn evaluate(&mut self, dataset: &Dataset) -> Result<Metrics> {
        let mask = self.config.pyramid_mask.clone();
        let normalize = self.config.eval_normalize;
        evaluate_on(&mut self.model, dataset, &mask, normalize)
    }
}

pub fn evaluate_on(
    model: &mut PyramidModel<f32>,
    dataset: &Dataset,
    mask: &BranchMask,
    normalize: bool,
) -> Result<Metrics> {
    evaluate_model(
        model,
        &dataset.query.images,
        &dataset.query.metas(),
        &dataset.gallery.images,
        &dataset.gallery.metas(),
        mask,
        normalize,
    )
}

/// Shuffled-label mAP baseline for the model's current query/gallery embeddings.
pub fn chance_baseline_on(
    model: &mut PyramidModel<f32>,
    dataset: &Dataset,
    mask: &BranchMask,
    normalize: bool,
    shuffles: usize,
    seed: u64,
) -> Result<ChanceBaseline> {
    let (q, dim) = embed_rows(model, &dataset.query.images, mask)?;
    let (g, _) = embed_rows(model, &dataset.gallery.images, mask)?;
    shuffled_label_baseline(
        &q,
        &dataset.query.metas(),
        &g,
        &dataset.gallery.metas(),
        dim,
        normalize,
        shuffles,
        seed,
    )
}

/// Evaluates a stored model; `mask` defaults to the one it was trained with.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, dataset: &Dataset, mask: Option<&BranchMask>) -> Result<Metrics> {
    let cfg = checkpoint.config()?;
    let mut model = checkpoint.model()?;
    let (c, h, w) = dataset.image_shape();
    let mc = model.config();
    if (c, h, w) != (mc.backbone.in_channels, mc.image_height, mc.image_width) {
        return Err(Error::Evaluation(format!(
            "dataset images are {c}x{h}x{w}, checkpoint expects {}x{}x{}",
            mc.backbone.in_channels, mc.image_height, mc.image_width
        )));
    }
    let mask = mask.cloned().unwrap_or(cfg.pyramid_mask);
    evaluate_on(&mut model, dataset, &mask, cfg.eval_normalize)
}

/// Trains a fresh model for the configured epochs.
pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<(Trainer, Vec<TraceRow>)> {
    let mut t = Trainer::new(config, dataset)?;
    let rows = t.run()?;
    Ok((t, rows))
}
