//! Procedural Re-ID toy data: banded "persons" seen by several cameras, with optional
//! detection-style corruption, and the on-disk split format.

mod store;
mod synth;

pub use store::{load_dataset, save_dataset, MANIFEST_FILE};
pub use synth::{
    apply_misalignment, generate_dataset, render_sample, CameraSpec, Corruption, CorruptionConfig, GenConfig,
    IdentitySpec, Occlusion, PALETTE,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::evaluation::Meta;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Dataset(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub entry_name: String,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
    pub corruption: Corruption,
}

/// Records of one split with their images stacked as `[N, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSet {
    pub records: Vec<SampleRecord>,
    pub images: Tensor<f32>,
}

impl SplitSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn identities(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.camera).collect()
    }

    pub fn metas(&self) -> Vec<Meta> {
        self.records
            .iter()
            .map(|r| Meta {
                identity: r.identity,
                camera: r.camera,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: SplitSet,
    pub query: SplitSet,
    pub gallery: SplitSet,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitSet {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.query.len() + self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, height, width)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.train.images.shape();
        (s[1], s[2], s[3])
    }

    /// Train identities remapped to contiguous class indices, in ascending identity order.
    pub fn train_classes(&self) -> (Vec<usize>, usize) {
        let mut ids = self.train.identities();
        ids.sort_unstable();
        ids.dedup();
        let labels = self
            .train
            .records
            .iter()
            .map(|r| ids.binary_search(&r.identity).expect("identity present"))
            .collect();
        (labels, ids.len())
    }
}
