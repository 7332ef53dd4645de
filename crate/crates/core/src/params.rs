//! Named parameter and buffer storage shared by every layer.

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / linear weights; receive weight decay.
    Weight,
    /// Batch-norm scale and shift (and classifier bias); never decayed.
    NoDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

/// Graph handles of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding backed by caller-provided graph nodes, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: String, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.param(p.value.clone())).collect(),
        }
    }

    /// Gradients after `g.backward`, in parameter order.
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .map(|&v| g.grad(v).expect("bound parameters are trainable leaves"))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    kind: p.kind,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.params.len() != self.params.len() || other.buffers.len() != self.buffers.len() {
            return Err(Error::Checkpoint("parameter count differs".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!("parameter `{}` does not match", dst.name)));
            }
            dst.value = src.value.clone();
        }
        for (dst, src) in self.buffers.iter_mut().zip(&other.buffers) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!("buffer `{}` does not match", dst.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over axis 1 with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(
                format!("{prefix}.gamma"),
                Tensor::full(&[channels], T::one()),
                ParamKind::NoDecay,
            ),
            beta: store.add_param(
                format!("{prefix}.beta"),
                Tensor::zeros(&[channels]),
                ParamKind::NoDecay,
            ),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(
                format!("{prefix}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    /// Train mode normalizes with batch statistics and folds them into the running
    /// estimates (unbiased variance, momentum 0.1); eval mode uses the running estimates.
    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (gamma, beta) = (bound.var(self.gamma), bound.var(self.beta));
        let eps = T::lit(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, eps)?;
                self.update_running(store, &stats);
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                store.buffer(self.running_mean).data(),
                store.buffer(self.running_var).data(),
                eps,
            ),
        }
    }

    fn update_running<T: Element>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let correction = if stats.count > 1 {
            T::lit(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        let mean = store.buffers[self.running_mean.0].value.data_mut();
        for (r, &b) in mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        let var = store.buffers[self.running_var.0].value.data_mut();
        for (r, &b) in var.iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * correction;
        }
    }
}
