//! Backbone + pyramid head composed into one embedding network.

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, Mode, ParamStore};
use crate::pyramid::{BranchMask, BranchSpec, PyramidHead};
use crate::rng;
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub image_height: usize,
    pub image_width: usize,
    /// Number of basic horizontal parts.
    pub parts: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub classifier_bias: bool,
}

impl ModelConfig {
    /// Validates the geometry and returns the feature-map `(C, H, W)`.
    pub fn feature_map_shape(&self) -> Result<(usize, usize, usize)> {
        let (h, w) = self.backbone.output_size(self.image_height, self.image_width)?;
        if self.parts == 0 || h % self.parts != 0 {
            return Err(Error::Config(format!(
                "feature map height {h} is not divisible by n = {}",
                self.parts
            )));
        }
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("feature_dim and num_classes must be positive".into()));
        }
        Ok((self.backbone.out_channels(), h, w))
    }
}

/// Outputs of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Indices (into the full branch list) of the branches that ran.
    pub branches: Vec<usize>,
    pub features: Vec<Var>,
    pub logits: Vec<Var>,
    /// `[N, D · branches]` concatenation of `features`.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct PyramidModel<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    head: PyramidHead,
}

impl<T: Element> PyramidModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (channels, height, _) = config.feature_map_shape()?;
        let mut store = ParamStore::new();
        let mut init = rng::stream(seed, rng::tag::INIT, 0);
        let backbone = Backbone::new(config.backbone.clone(), &mut store, &mut init);
        let head = PyramidHead::new(
            &mut store,
            &mut init,
            config.parts,
            height,
            channels,
            config.feature_dim,
            config.num_classes,
            config.classifier_bias,
        )?;
        Ok(Self {
            config,
            store,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn head(&self) -> &PyramidHead {
        &self.head
    }

    pub fn branch_specs(&self) -> &[BranchSpec] {
        self.head.specs()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.store.bind(g)
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Element>(&self) -> PyramidModel<U> {
        PyramidModel {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    /// Feature map for `[N, C_in, H, W]` images.
    pub fn feature_map(&mut self, g: &mut Graph<T>, bound: &Bound, images: Var, mode: Mode) -> Result<Var> {
        self.backbone.forward(&mut self.store, g, bound, images, mode)
    }

    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        bound: &Bound,
        images: Var,
        mask: &BranchMask,
        mode: Mode,
    ) -> Result<Forward> {
        let map = self.feature_map(g, bound, images, mode)?;
        let (branches, out) = self.head.forward(&mut self.store, g, bound, map, mask, mode)?;
        let embedding = g.concat(&out.features, 1)?;
        Ok(Forward {
            branches,
            features: out.features,
            logits: out.logits,
            embedding,
        })
    }

    /// Eval-mode embeddings for a stack of images, processed in chunks of `batch`.
    pub fn embed(&mut self, images: &Tensor<T>, mask: &BranchMask, batch: usize) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let item: usize = images.shape()[1..].iter().product();
        let mut rows = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch.max(1)).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, images.data()[start * item..end * item].to_vec())?;
            let mut g = Graph::new();
            let bound = self.bind(&mut g);
            let x = g.constant(chunk);
            let fwd = self.forward(&mut g, &bound, x, mask, Mode::Eval)?;
            let e = g.value(fwd.embedding);
            width = e.shape()[1];
            rows.extend_from_slice(e.data());
        }
        Tensor::new(&[n, width], rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::parse_spec("3:4s2,6s1").unwrap(),
            image_height: 12,
            image_width: 4,
            parts: 3,
            feature_dim: 4,
            num_classes: 5,
            classifier_bias: false,
        }
    }

    #[test]
    fn builds_and_embeds() {
        let mut m = PyramidModel::<f32>::new(tiny_config(), 1).unwrap();
        let imgs = Tensor::full(&[5, 3, 12, 4], 0.5);
        let e = m.embed(&imgs, &BranchMask::full(3), 2).unwrap();
        assert_eq!(e.shape(), &[5, 6 * 4]);
        let e1 = m.embed(&imgs, &"001".parse().unwrap(), 4).unwrap();
        assert_eq!(e1.shape(), &[5, 4]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = PyramidModel::<f32>::new(tiny_config(), 9).unwrap();
        let b = PyramidModel::<f32>::new(tiny_config(), 9).unwrap();
        let c = PyramidModel::<f32>::new(tiny_config(), 10).unwrap();
        let vals = |m: &PyramidModel<f32>| -> Vec<f32> {
            m.store().params().iter().flat_map(|p| p.value.data().to_vec()).collect()
        };
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn classifier_bias_flag_adds_parameters() {
        let mut cfg = tiny_config();
        let plain = PyramidModel::<f32>::new(cfg.clone(), 1).unwrap();
        cfg.classifier_bias = true;
        let biased = PyramidModel::<f32>::new(cfg, 1).unwrap();
        assert_eq!(biased.store().params().len(), plain.store().params().len() + 6);
    }

    proptest! {
        #[test]
        fn accepted_geometry_divides_by_parts(parts in 1usize..7, h in 1usize..40, strides in prop::collection::vec(1usize..=2, 0..3)) {
            let mut cfg = tiny_config();
            cfg.parts = parts;
            cfg.backbone.stages = strides.iter().map(|&s| crate::backbone::Stage { out_channels: 2, stride: s }).collect();
            cfg.image_height = h;
            match cfg.feature_map_shape() {
                Ok((_, fh, _)) => prop_assert_eq!(fh % parts, 0),
                Err(_) => prop_assert!(PyramidModel::<f32>::new(cfg, 0).is_err()),
            }
        }
    }
}
