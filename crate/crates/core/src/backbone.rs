//! Small trainable convolutional feature extractor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BatchNorm, Bound, Mode, ParamId, ParamKind, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Element, Graph, Tensor, Var};

/// One `conv3×3 → batch-norm → ReLU` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<Stage>,
}

impl BackboneConfig {
    /// `(16, s2) → (32, s2) → (64, s1)`: a 48×16 RGB input becomes a 64×12×4 map.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            stages: vec![
                Stage { out_channels: 16, stride: 2 },
                Stage { out_channels: 32, stride: 2 },
                Stage { out_channels: 64, stride: 1 },
            ],
        }
    }

    /// No blocks: inputs are precomputed `channels × H × W` feature maps.
    pub fn identity(channels: usize) -> Self {
        Self {
            in_channels: channels,
            stages: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// Feature-map height and width for an input of `height × width`.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.in_channels == 0 {
            return Err(Error::Config("backbone needs at least one input channel".into()));
        }
        if let Some(s) = self.stages.iter().find(|s| s.stride != 1 && s.stride != 2) {
            return Err(Error::Config(format!("backbone stride {} is not 1 or 2", s.stride)));
        }
        if self.stages.iter().any(|s| s.out_channels == 0) {
            return Err(Error::Config("backbone stage with zero channels".into()));
        }
        let stride = self.total_stride();
        if !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input {height}x{width} is not divisible by the backbone stride {stride}"
            )));
        }
        Ok((height / stride, width / stride))
    }

    /// Compact text form, e.g. `3:16s2,32s2,64s1` or `2048:` for an identity backbone.
    pub fn to_spec(&self) -> String {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}s{}", s.out_channels, s.stride))
            .collect();
        format!("{}:{}", self.in_channels, stages.join(","))
    }

    pub fn parse_spec(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid backbone spec `{text}`"));
        let (inp, rest) = text.split_once(':').ok_or_else(bad)?;
        let in_channels = inp.trim().parse().map_err(|_| bad())?;
        let mut stages = Vec::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (c, s) = part.split_once('s').ok_or_else(bad)?;
            stages.push(Stage {
                out_channels: c.parse().map_err(|_| bad())?,
                stride: s.parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { in_channels, stages })
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: ParamId,
    bn: BatchNorm,
    stride: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    blocks: Vec<ConvBlock>,
}

/// He-uniform bound for a ReLU layer with the given fan-in.
pub(crate) fn he_uniform<T: Element>(rng: &mut StreamRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl Backbone {
    pub fn new<T: Element>(
        config: BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut StreamRng,
    ) -> Self {
        let mut in_c = config.in_channels;
        let blocks = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, stage)| {
                let shape = [stage.out_channels, in_c, 3, 3];
                let conv = store.add_param(
                    format!("backbone.block{i}.conv.weight"),
                    he_uniform(rng, &shape, in_c * 9),
                    ParamKind::Weight,
                );
                let bn = BatchNorm::new(store, &format!("backbone.block{i}.bn"), stage.out_channels);
                in_c = stage.out_channels;
                ConvBlock {
                    conv,
                    bn,
                    stride: stage.stride,
                }
            })
            .collect();
        Self { config, blocks }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[N, C_in, H, W] → [N, C, H/stride, W/stride]`.
    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        g: &mut Graph<T>,
        bound: &Bound,
        images: Var,
        mode: Mode,
    ) -> Result<Var> {
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "expected [N, {}, H, W] input, got {shape:?}",
                    self.config.in_channels
                ),
            ));
        }
        let mut x = images;
        for block in &self.blocks {
            let y = g.conv2d(x, bound.var(block.conv), block.stride, 1)?;
            let y = block.bn.forward(store, g, bound, y, mode)?;
            x = g.relu(y)?;
        }
        Ok(x)
    }
}
