//! Coarse-to-fine branch set over the backbone feature map.
//!
//! The height axis is cut into `n` basic parts. Level `l` holds every run of
//! `l` adjacent parts (sliding step one), so level 1 is the plain stripe
//! partition and level `n` is the whole map. Each branch pools its slab,
//! reduces it to a `D`-vector and feeds its own identity classifier; the
//! embedding used for retrieval is the concatenation of all enabled branches.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::backbone::he_uniform;
use crate::error::{Error, Result};
use crate::params::{BatchNorm, Bound, Mode, ParamId, ParamKind, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Branch `(level, position)` and its inclusive 1-based row range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub level: usize,
    pub position: usize,
    pub start_row: usize,
    pub end_row: usize,
}

impl BranchSpec {
    pub fn rows(&self) -> usize {
        self.end_row - self.start_row + 1
    }

    /// Short stable name, e.g. `l2k3`.
    pub fn key(&self) -> String {
        format!("l{}k{}", self.level, self.position)
    }
}

pub fn branch_count(n: usize) -> usize {
    n * (n + 1) / 2
}

/// All branches for `n` basic parts of a height-`height` map, level-major then position.
pub fn enumerate_branches(n: usize, height: usize) -> Result<Vec<BranchSpec>> {
    if n == 0 || height == 0 {
        return Err(Error::Config(format!(
            "pyramid needs positive n and height (n = {n}, height = {height})"
        )));
    }
    if !height.is_multiple_of(n) {
        return Err(Error::Config(format!(
            "feature map height {height} is not divisible by n = {n}"
        )));
    }
    let part = height / n;
    let mut specs = Vec::with_capacity(branch_count(n));
    for level in 1..=n {
        for position in 1..=n - level + 1 {
            specs.push(BranchSpec {
                level,
                position,
                start_row: (position - 1) * part + 1,
                end_row: (position - 1) * part + level * part,
            });
        }
    }
    Ok(specs)
}

/// Row slab `C × rows × W` (or `[N, C, rows, W]`) for one branch.
pub fn slice_branch<T: Element>(g: &mut Graph<T>, map: Var, spec: &BranchSpec) -> Result<Var> {
    let shape = g.shape(map);
    let height = shape.get(shape.len().wrapping_sub(2)).copied().unwrap_or(0);
    if shape.len() < 3 || spec.start_row == 0 || spec.end_row > height || spec.start_row > spec.end_row {
        return Err(Error::invalid(
            "slice_branch",
            format!(
                "rows {}..={} do not fit a map of shape {shape:?}",
                spec.start_row, spec.end_row
            ),
        ));
    }
    g.slice_rows(map, spec.start_row - 1, spec.rows())
}

/// Per-level on/off flags, leftmost = level 1 (finest stripes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchMask(Vec<bool>);

impl BranchMask {
    pub fn full(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn new(levels: Vec<bool>) -> Result<Self> {
        if !levels.iter().any(|&b| b) {
            return Err(Error::Config("branch mask must enable at least one level".into()));
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn enabled(&self, level: usize) -> bool {
        level >= 1 && self.0.get(level - 1).copied().unwrap_or(false)
    }

    /// Number of branches kept out of the full `n`-level pyramid.
    pub fn branch_count(&self) -> usize {
        let n = self.0.len();
        (1..=n).filter(|&l| self.enabled(l)).map(|l| n - l + 1).sum()
    }
}

impl FromStr for BranchMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Config(format!("mask `{s}` may only contain '0' and '1'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if levels.is_empty() {
            return Err(Error::Config("empty branch mask".into()));
        }
        Self::new(levels)
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Independent parameters of one branch.
#[derive(Clone, Debug)]
pub struct BranchParams {
    /// 1×1 convolution on the pooled vector, stored as a `[C, D]` matrix, no bias.
    pub reduce: ParamId,
    pub bn: BatchNorm,
    /// `[D, num_classes]`.
    pub classifier: ParamId,
    pub classifier_bias: Option<ParamId>,
}

impl BranchParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut StreamRng,
        prefix: &str,
        channels: usize,
        dim: usize,
        num_classes: usize,
        classifier_bias: bool,
    ) -> Self {
        let reduce = store.add_param(
            format!("{prefix}.reduce.weight"),
            he_uniform(rng, &[channels, dim], channels),
            ParamKind::Weight,
        );
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), dim);
        let bound = (3.0 / dim as f64).sqrt();
        let data = (0..dim * num_classes)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        let classifier = store.add_param(
            format!("{prefix}.classifier.weight"),
            Tensor::new(&[dim, num_classes], data).expect("shape and data agree"),
            ParamKind::Weight,
        );
        let classifier_bias = classifier_bias.then(|| {
            store.add_param(
                format!("{prefix}.classifier.bias"),
                Tensor::zeros(&[num_classes]),
                ParamKind::NoDecay,
            )
        });
        Self {
            reduce,
            bn,
            classifier,
            classifier_bias,
        }
    }
}

/// `GMP(sub) + GAP(sub)`: one value per channel.
pub fn pool_branch<T: Element>(g: &mut Graph<T>, sub: Var) -> Result<Var> {
    let max = g.global_max_pool(sub)?;
    let avg = g.global_avg_pool(sub)?;
    g.add(max, avg)
}

/// `feature = ReLU(BN(reduce(GMP + GAP)))`, `logits = featureᵀ · classifier`.
///
/// `sub` is a batch of slabs `[N, C, rows, W]`; returns `([N, D], [N, classes])`.
pub fn branch_forward<T: Element>(
    store: &mut ParamStore<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    params: &BranchParams,
    sub: Var,
    mode: Mode,
) -> Result<(Var, Var)> {
    let channels = store.param(params.reduce).value.shape()[0];
    let shape = g.shape(sub);
    if shape.len() != 4 || shape[1] != channels {
        return Err(Error::invalid(
            "branch_forward",
            format!("expected [N, {channels}, rows, W] sub-map, got {shape:?}"),
        ));
    }
    let pooled = pool_branch(g, sub)?;
    let reduced = g.matmul(pooled, bound.var(params.reduce))?;
    let normed = params.bn.forward(store, g, bound, reduced, mode)?;
    let feature = g.relu(normed)?;
    let mut logits = g.matmul(feature, bound.var(params.classifier))?;
    if let Some(bias) = params.classifier_bias {
        logits = g.add_bias(logits, bound.var(bias))?;
    }
    Ok((feature, logits))
}

/// Concatenates the features of enabled levels in enumeration order.
///
/// `features` must hold one `[N, D]` feature per branch of the full pyramid.
pub fn assemble_embedding<T: Element>(
    g: &mut Graph<T>,
    features: &[Var],
    specs: &[BranchSpec],
    mask: &BranchMask,
) -> Result<Var> {
    let n = mask.levels();
    if features.len() != specs.len() || specs.len() != branch_count(n) {
        return Err(Error::invalid(
            "assemble_embedding",
            format!(
                "{} features / {} specs for a {n}-level pyramid of {} branches",
                features.len(),
                specs.len(),
                branch_count(n)
            ),
        ));
    }
    let expected = enumerate_branches(n, specs[specs.len() - 1].end_row).ok();
    if expected.as_deref() != Some(specs) {
        return Err(Error::invalid("assemble_embedding", "branch specs are not in enumeration order"));
    }
    let kept: Vec<Var> = features
        .iter()
        .zip(specs)
        .filter(|(_, s)| mask.enabled(s.level))
        .map(|(&f, _)| f)
        .collect();
    let axis = g.shape(kept[0]).len() - 1;
    g.concat(&kept, axis)
}

/// Parameters of every branch plus the geometry they were built for.
#[derive(Clone, Debug)]
pub struct PyramidHead {
    specs: Vec<BranchSpec>,
    branches: Vec<BranchParams>,
    n: usize,
    dim: usize,
}

/// Per-branch outputs of one forward pass, in enumeration order.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub features: Vec<Var>,
    pub logits: Vec<Var>,
}

impl PyramidHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut StreamRng,
        n: usize,
        height: usize,
        channels: usize,
        dim: usize,
        num_classes: usize,
        classifier_bias: bool,
    ) -> Result<Self> {
        let specs = enumerate_branches(n, height)?;
        let branches = specs
            .iter()
            .map(|s| {
                BranchParams::new(
                    store,
                    rng,
                    &format!("pyramid.{}", s.key()),
                    channels,
                    dim,
                    num_classes,
                    classifier_bias,
                )
            })
            .collect();
        Ok(Self {
            specs,
            branches,
            n,
            dim,
        })
    }

    pub fn specs(&self) -> &[BranchSpec] {
        &self.specs
    }

    pub fn branches(&self) -> &[BranchParams] {
        &self.branches
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Runs the branches of enabled levels; disabled branches are skipped and get no output.
    pub fn forward<T: Element>(
        &self,
        store: &mut ParamStore<T>,
        g: &mut Graph<T>,
        bound: &Bound,
        map: Var,
        mask: &BranchMask,
        mode: Mode,
    ) -> Result<(Vec<usize>, HeadOutput)> {
        if mask.levels() != self.n {
            return Err(Error::Config(format!(
                "mask `{mask}` has {} levels, pyramid has {}",
                mask.levels(),
                self.n
            )));
        }
        let mut used = Vec::new();
        let mut out = HeadOutput {
            features: Vec::new(),
            logits: Vec::new(),
        };
        for (i, (spec, params)) in self.specs.iter().zip(&self.branches).enumerate() {
            if !mask.enabled(spec.level) {
                continue;
            }
            let sub = slice_branch(g, map, spec)?;
            let (f, l) = branch_forward(store, g, bound, params, sub, mode)?;
            used.push(i);
            out.features.push(f);
            out.logits.push(l);
        }
        Ok((used, out))
    }
}
