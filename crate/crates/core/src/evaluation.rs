//! Single-query retrieval: ranking with same-identity same-camera exclusion, CMC and mAP.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::PyramidModel;
use crate::pyramid::BranchMask;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Meta {
    pub identity: usize,
    pub camera: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedResult {
    pub query: usize,
    /// Gallery indices, nearest first.
    pub order: Vec<usize>,
    pub distances: Vec<f64>,
    pub matches: Vec<bool>,
}

impl RankedResult {
    /// 1-based position of the first true match.
    pub fn first_match(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|p| p + 1)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `gallery` holds one embedding of width `query_emb.len()` per entry of `gallery_meta`.
pub fn rank_gallery(
    query: usize,
    query_emb: &[f64],
    query_meta: Meta,
    gallery: &[f64],
    gallery_meta: &[Meta],
) -> Result<RankedResult> {
    let dim = query_emb.len();
    if dim == 0 || gallery.len() != dim * gallery_meta.len() {
        return Err(Error::shape("rank_gallery", &[dim], &[gallery.len(), gallery_meta.len()]));
    }
    let mut scored: Vec<(f64, usize)> = gallery_meta
        .iter()
        .enumerate()
        .filter(|(_, m)| !(m.identity == query_meta.identity && m.camera == query_meta.camera))
        .map(|(j, _)| (distance(query_emb, &gallery[j * dim..(j + 1) * dim]), j))
        .collect();
    if scored.is_empty() {
        return Err(Error::Evaluation(format!("query {query} has an empty gallery after filtering")));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(RankedResult {
        query,
        matches: scored.iter().map(|&(_, j)| gallery_meta[j].identity == query_meta.identity).collect(),
        distances: scored.iter().map(|&(d, _)| d).collect(),
        order: scored.into_iter().map(|(_, j)| j).collect(),
    })
}

pub fn rank_all(
    queries: &[f64],
    query_meta: &[Meta],
    gallery: &[f64],
    gallery_meta: &[Meta],
    dim: usize,
) -> Result<Vec<RankedResult>> {
    if dim == 0 || queries.len() != dim * query_meta.len() {
        return Err(Error::shape("rank_all", &[queries.len()], &[query_meta.len(), dim]));
    }
    query_meta
        .iter()
        .enumerate()
        .map(|(i, &m)| rank_gallery(i, &queries[i * dim..(i + 1) * dim], m, gallery, gallery_meta))
        .collect()
}

fn require_match(r: &RankedResult) -> Result<usize> {
    r.first_match()
        .ok_or_else(|| Error::Evaluation(format!("query {} has no true match in its gallery", r.query)))
}

/// `cmc[r - 1]` is the fraction of queries whose first true match is within the top `r`.
pub fn compute_cmc(results: &[RankedResult], max_rank: usize) -> Result<Vec<f64>> {
    if results.is_empty() || max_rank == 0 {
        return Err(Error::Evaluation("CMC needs at least one query and max_rank >= 1".into()));
    }
    let mut hits = vec![0usize; max_rank];
    for r in results {
        let first = require_match(r)?;
        if first <= max_rank {
            hits[first - 1] += 1;
        }
    }
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / results.len() as f64
        })
        .collect())
}

/// Non-interpolated average precision over all true matches.
pub fn average_precision(matches: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut total = 0.0;
    for (i, _) in matches.iter().enumerate().filter(|(_, &m)| m) {
        found += 1;
        total += found as f64 / (i + 1) as f64;
    }
    (found > 0).then(|| total / found as f64)
}

pub fn compute_map(results: &[RankedResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Evaluation("mAP needs at least one query".into()));
    }
    let mut sum = 0.0;
    for r in results {
        require_match(r)?;
        sum += average_precision(&r.matches).expect("checked above");
    }
    Ok(sum / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub map: f64,
    /// CMC at ranks 1..=10 (or the gallery size when smaller, padded with the last value).
    pub cmc: Vec<f64>,
}

impl Metrics {
    pub const MAX_RANK: usize = 10;

    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[r.clamp(1, self.cmc.len()) - 1]
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    pub fn rank5(&self) -> f64 {
        self.rank(5)
    }

    pub fn rank10(&self) -> f64 {
        self.rank(10)
    }
}

pub fn l2_normalize_rows(data: &mut [f64], dim: usize) {
    for row in data.chunks_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

pub fn evaluate_embeddings(
    queries: &[f64],
    query_meta: &[Meta],
    gallery: &[f64],
    gallery_meta: &[Meta],
    dim: usize,
    normalize: bool,
) -> Result<Metrics> {
    let (mut q, mut g) = (queries.to_vec(), gallery.to_vec());
    if normalize {
        l2_normalize_rows(&mut q, dim);
        l2_normalize_rows(&mut g, dim);
    }
    let results = rank_all(&q, query_meta, &g, gallery_meta, dim)?;
    Ok(Metrics {
        map: compute_map(&results)?,
        cmc: compute_cmc(&results, Metrics::MAX_RANK)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChanceBaseline {
    pub maps: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ChanceBaseline {
    /// Distance of `map` from the shuffled mean in standard deviations.
    pub fn z_score(&self, map: f64) -> f64 {
        if self.std == 0.0 {
            if map == self.mean { 0.0 } else { f64::INFINITY }
        } else {
            (map - self.mean).abs() / self.std
        }
    }
}

/// mAP of the same embeddings after randomly permuting the gallery labels.
///
/// Each shuffle permutes `(identity, camera)` pairs jointly over the gallery,
/// so every query keeps at least one cross-camera match.
pub fn shuffled_label_baseline(
    queries: &[f64],
    query_meta: &[Meta],
    gallery: &[f64],
    gallery_meta: &[Meta],
    dim: usize,
    normalize: bool,
    shuffles: usize,
    seed: u64,
) -> Result<ChanceBaseline> {
    use rand::seq::SliceRandom;
    if shuffles < 2 {
        return Err(Error::invalid(
            "shuffled_label_baseline",
            format!("need at least 2 shuffles, got {shuffles}"),
        ));
    }
    let mut maps = Vec::with_capacity(shuffles);
    for i in 0..shuffles {
        let mut metas = gallery_meta.to_vec();
        metas.shuffle(&mut crate::rng::stream(seed, crate::rng::tag::SHUFFLE, i as u64));
        maps.push(evaluate_embeddings(queries, query_meta, gallery, &metas, dim, normalize)?.map);
    }
    let mean = maps.iter().sum::<f64>() / shuffles as f64;
    let var = maps.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (shuffles - 1) as f64;
    Ok(ChanceBaseline { maps, mean, std: var.sqrt() })
}

/// Embeds query and gallery images in eval mode and scores retrieval.
pub fn evaluate_model<T: Element>(
    model: &mut PyramidModel<T>,
    query: &Tensor<T>,
    query_meta: &[Meta],
    gallery: &Tensor<T>,
    gallery_meta: &[Meta],
    mask: &BranchMask,
    normalize: bool,
) -> Result<Metrics> {
    let cfg = model.config();
    for (name, t) in [("query", query), ("gallery", gallery)] {
        let s = t.shape();
        let expect = [cfg.backbone.in_channels, cfg.image_height, cfg.image_width];
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::Evaluation(format!(
                "{name} images have shape {s:?}, model expects [N, {}, {}, {}]",
                expect[0], expect[1], expect[2]
            )));
        }
    }
    let (q, dim) = embed_rows(model, query, mask)?;
    let (g, _) = embed_rows(model, gallery, mask)?;
    evaluate_embeddings(&q, query_meta, &g, gallery_meta, dim, normalize)
}

/// Eval-mode embeddings widened to f64, with the row width.
pub fn embed_rows<T: Element>(
    model: &mut PyramidModel<T>,
    images: &Tensor<T>,
    mask: &BranchMask,
) -> Result<(Vec<f64>, usize)> {
    let e = model.embed(images, mask, 64)?;
    let dim = e.shape()[1];
    Ok((e.data().iter().map(|v| v.to_f64_lossless()).collect(), dim))
}
