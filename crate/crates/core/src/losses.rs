//! Identification loss over per-branch logits and batch-hard triplet loss over embeddings.

use crate::batching::batch_hard_mine;
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

pub const DEFAULT_MARGIN: f64 = 1.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Id,
    Triplet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub task: Task,
    pub value: f64,
    /// Images (id) or valid anchors (triplet) averaged over.
    pub count: usize,
    /// Anchors skipped for lack of a positive or a negative.
    pub skipped: usize,
    pub degenerate: bool,
}

/// Sum over branches of the batch-mean softmax cross-entropy.
///
/// Equivalent to averaging, over images, the per-image sum of branch losses.
pub fn id_loss<T: Element>(
    g: &mut Graph<T>,
    branch_logits: &[Var],
    labels: &[usize],
) -> Result<(Var, LossValue)> {
    if branch_logits.is_empty() {
        return Err(Error::invalid("id_loss", "no branch logits"));
    }
    let mut total: Option<Var> = None;
    for &logits in branch_logits {
        let ce = g.softmax_cross_entropy(logits, labels)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.expect("at least one branch");
    let value = g.value(total).item()?.to_f64_lossless();
    Ok((
        total,
        LossValue {
            task: Task::Id,
            value,
            count: labels.len(),
            skipped: 0,
            degenerate: false,
        },
    ))
}

/// Row-major `n × n` distance matrix of an `[n, d]` row set.
pub fn pairwise_distances<T: Element>(rows: &[T], n: usize, squared: bool) -> Vec<T> {
    let d = if n == 0 { 0 } else { rows.len() / n };
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..i {
            let ss: T = rows[i * d..(i + 1) * d]
                .iter()
                .zip(&rows[j * d..(j + 1) * d])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            let v = if squared { ss } else { ss.sqrt() };
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

pub fn euclidean_distance<T: Element>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("euclidean_distance", &[a.len()], &[b.len()]));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt())
}

/// Batch-hard triplet loss: mean over valid anchors of
/// `max(0, d(a, hardest positive) − d(a, hardest negative) + margin)`.
///
/// Returns `None` for the graph node when no anchor has both a positive and a negative.
pub fn triplet_loss<T: Element>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
    squared: bool,
) -> Result<(Option<Var>, LossValue)> {
    let shape = g.shape(embeddings).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("triplet_loss", &shape, &[labels.len()]));
    }
    if shape[0] < 2 {
        return Err(Error::invalid("triplet_loss", "needs at least two rows"));
    }
    if !(margin > 0.0) {
        return Err(Error::invalid("triplet_loss", "margin must be positive"));
    }
    let n = shape[0];
    let dist = pairwise_distances(g.value(embeddings).data(), n, squared);
    let mined = batch_hard_mine(&dist, labels)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, m) in mined.iter().enumerate() {
        if let (Some(p), Some(q)) = (m.positive, m.negative) {
            pos.push((i, p));
            neg.push((i, q));
        }
    }
    let skipped = n - pos.len();
    if pos.is_empty() {
        return Ok((
            None,
            LossValue {
                task: Task::Triplet,
                value: 0.0,
                count: 0,
                skipped,
                degenerate: true,
            },
        ));
    }
    let d_ap = g.pair_distances(embeddings, &pos, squared)?;
    let d_an = g.pair_distances(embeddings, &neg, squared)?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add_scalar(diff, T::lit(margin))?;
    let hinge = g.hinge(shifted)?;
    let loss = g.mean(hinge)?;
    let value = g.value(loss).item()?.to_f64_lossless();
    Ok((
        Some(loss),
        LossValue {
            task: Task::Triplet,
            value,
            count: pos.len(),
            skipped,
            degenerate: false,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id_value(logits: Vec<Tensor<f64>>, labels: &[usize]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = logits.into_iter().map(|t| g.constant(t)).collect();
        id_loss(&mut g, &vars, labels).unwrap().1.value
    }

    #[test]
    fn id_loss_examples() {
        let zeros = Tensor::new(&[1, 4], vec![0.0; 4]).unwrap();
        assert_abs_diff_eq!(id_value(vec![zeros.clone()], &[2]), 4f64.ln(), epsilon = 1e-12);
        let v = id_value(vec![zeros; 21], &[0]);
        assert_abs_diff_eq!(v, 21.0 * 4f64.ln(), epsilon = 1e-10);
        assert!((v - 29.112).abs() < 1e-3);
        let l = Tensor::new(&[1, 3], vec![2.0, 1.0, 0.0]).unwrap();
        let expect = (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
        assert_abs_diff_eq!(id_value(vec![l], &[0]), expect, epsilon = 1e-12);
        assert!((expect - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn id_loss_errors() {
        let mut g = Graph::<f64>::new();
        assert!(id_loss(&mut g, &[], &[0]).is_err());
        let l = g.constant(Tensor::new(&[1, 3], vec![0.0; 3]).unwrap());
        assert!(id_loss(&mut g, &[l], &[3]).is_err());
    }

    #[test]
    fn id_loss_vanishes_with_confident_target() {
        let mut prev = f64::INFINITY;
        for big in [1.0, 5.0, 20.0, 60.0] {
            let v = id_value(vec![Tensor::new(&[1, 3], vec![big, 0.5, -0.5]).unwrap()], &[0]);
            assert!(v >= 0.0 && v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    fn triplet_value(points: &[Vec<f64>], labels: &[usize], margin: f64) -> LossValue {
        let d = points[0].len();
        let mut g = Graph::new();
        let flat = points.iter().flatten().copied().collect();
        let e = g.param(Tensor::new(&[points.len(), d], flat).unwrap());
        triplet_loss(&mut g, e, labels, margin, false).unwrap().1
    }

    #[test]
    fn triplet_examples() {
        let same = vec![vec![0.3, -0.1]; 6];
        let v = triplet_value(&same, &[0, 0, 1, 1, 2, 2], DEFAULT_MARGIN);
        assert_abs_diff_eq!(v.value, 1.4, epsilon = 1e-12);
        assert_eq!(v.count, 6);

        let separated = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        assert_eq!(triplet_value(&separated, &[0, 0, 1, 1], 1.4).value, 0.0);

        let pts = vec![vec![0.0], vec![1.0], vec![1.5], vec![10.0]];
        let v = triplet_value(&pts, &[0, 0, 1, 1], 1.4);
        // Terms 0.9, 1.9, 9.4, 0.9: the nearest negative of 10 is 1, at distance 9.
        assert_abs_diff_eq!(v.value, 3.275, epsilon = 1e-12);
        assert_abs_diff_eq!(v.value, brute_force_triplet(&pts, &[0, 0, 1, 1], 1.4), epsilon = 1e-12);
    }

    #[test]
    fn triplet_degenerate_and_skips() {
        let v = triplet_value(&[vec![0.0], vec![1.0], vec![2.0]], &[0, 1, 2], 1.0);
        assert!(v.degenerate);
        assert_eq!((v.value, v.count, v.skipped), (0.0, 0, 3));
        let v = triplet_value(&[vec![0.0], vec![1.0], vec![2.0]], &[0, 0, 1], 1.0);
        assert_eq!((v.count, v.skipped), (2, 1));
        let mut g = Graph::<f64>::new();
        let e = g.param(Tensor::new(&[1, 2], vec![0.0; 2]).unwrap());
        assert!(triplet_loss(&mut g, e, &[0], 1.0, false).is_err());
    }

    #[test]
    fn triplet_margin_zero_identical() {
        let mut g = Graph::new();
        let e = g.param(Tensor::new(&[4, 2], vec![1.0; 8]).unwrap());
        let (_, v) = triplet_loss(&mut g, e, &[0, 0, 1, 1], 1e-300, false).unwrap();
        assert!(v.value <= 1e-300);
    }

    /// Enumerates every (anchor, positive, negative) and keeps the worst per anchor.
    fn brute_force_triplet(points: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
        let d = |i: usize, j: usize| euclidean_distance(&points[i], &points[j]).unwrap();
        let mut terms = Vec::new();
        for a in 0..points.len() {
            let mut worst: Option<f64> = None;
            for p in 0..points.len() {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for n in 0..points.len() {
                    if labels[n] == labels[a] {
                        continue;
                    }
                    let t = (d(a, p) - d(a, n) + margin).max(0.0);
                    worst = Some(worst.map_or(t, |w: f64| w.max(t)));
                }
            }
            terms.extend(worst);
        }
        terms.iter().sum::<f64>() / terms.len() as f64
    }

    #[test]
    fn triplet_matches_exhaustive_enumeration() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = r.random_range(4..20);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
            let v = triplet_value(&pts, &labels, 1.4);
            if v.degenerate {
                continue;
            }
            assert_abs_diff_eq!(v.value, brute_force_triplet(&pts, &labels, 1.4), epsilon = 1e-10);
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let p: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
            let (ab, bc, ac) = (
                euclidean_distance(&p[0], &p[1]).unwrap(),
                euclidean_distance(&p[1], &p[2]).unwrap(),
                euclidean_distance(&p[0], &p[2]).unwrap(),
            );
            assert!(ac <= ab + bc + 1e-12);
            assert_eq!(ab, euclidean_distance(&p[1], &p[0]).unwrap());
        }
    }

    proptest! {
        #[test]
        fn triplet_is_translation_invariant(
            pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 8),
            shift in prop::collection::vec(-100.0f64..100.0, 3),
        ) {
            let labels = [0, 0, 1, 1, 2, 2, 3, 3];
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let a = triplet_value(&pts, &labels, 1.4).value;
            let b = triplet_value(&moved, &labels, 1.4).value;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn id_loss_is_shift_invariant(
            logits in prop::collection::vec(-10.0f64..10.0, 12),
            shift in -30.0f64..30.0,
        ) {
            let t = Tensor::new(&[3, 4], logits).unwrap();
            let a = id_value(vec![t.clone()], &[0, 3, 1]);
            let b = id_value(vec![t.map(|v| v + shift)], &[0, 3, 1]);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
