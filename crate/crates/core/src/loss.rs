//! Training objective: affinity, weighted classification, position and
//! relative-distance terms.
//!
//! Every term exists twice: as graph nodes for training and as a plain
//! function on tensors used for reporting and as a cross-check.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agnn::ordered_pairs;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::real::Real;
use crate::tensor::Tensor;

/// Floor applied to supervised probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub aff: f64,
    pub cls: f64,
    pub pos: f64,
    pub rel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            aff: 1.0,
            cls: 1.0,
            pos: 0.1,
            rel: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.aff, self.cls, self.pos, self.rel]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The four loss terms of one pair (or their mean over many).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub aff: T,
    pub cls: T,
    pub pos: T,
    pub rel: T,
}

impl<T: Real> LossParts<T> {
    pub fn total(&self, w: &LossWeights) -> T {
        total_loss(self, w)
    }
}

/// Supervision of one object's position head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionTarget {
    pub offset: [f64; 2],
    pub distance: f64,
    pub box_width: f64,
    pub box_height: f64,
}

impl PositionTarget {
    /// Excluded when the offset exceeds the box extent along either axis.
    pub fn included(&self) -> bool {
        self.offset[0].abs() <= self.box_width && self.offset[1].abs() <= self.box_height
    }
}

/// Ground truth of one pair, indexed like the network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTargets {
    pub m: usize,
    pub n: usize,
    pub matches: Vec<(usize, usize)>,
    pub unmatched1: Vec<usize>,
    pub unmatched2: Vec<usize>,
    /// `M + N` labels, image 1 first.
    pub labels: Vec<usize>,
    /// `M + N` targets, image 1 first.
    pub positions: Vec<PositionTarget>,
    pub rel1: Vec<Vec<f64>>,
    pub rel2: Vec<Vec<f64>>,
}

impl PairTargets {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let total = self.m + self.n;
        if self.labels.len() != total || self.positions.len() != total {
            return Err(Error::invalid(
                "one label and position target per object required",
            ));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {l} >= class count {num_classes}"
            )));
        }
        crate::matcher::check_one_to_one(&self.matches)?;
        let covered1 = self.matches.len() + self.unmatched1.len();
        let covered2 = self.matches.len() + self.unmatched2.len();
        if covered1 != self.m || covered2 != self.n {
            return Err(Error::invalid(
                "matches and unmatched lists must cover every object",
            ));
        }
        let square =
            |r: &Vec<Vec<f64>>, k: usize| r.len() == k && r.iter().all(|row| row.len() == k);
        if !square(&self.rel1, self.m) || !square(&self.rel2, self.n) {
            return Err(Error::invalid("relative distance targets have wrong shape"));
        }
        Ok(())
    }

    /// `(row, col)` entries of the augmented plan supervised by the affinity loss.
    pub fn supervised_entries(&self) -> Vec<(usize, usize)> {
        let mut idx = self.matches.clone();
        idx.extend(self.unmatched1.iter().map(|&i| (i, self.n)));
        idx.extend(self.unmatched2.iter().map(|&j| (self.m, j)));
        idx
    }
}

/// Mean of `-log P_bar` over supervised entries.
pub fn affinity_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    log_p: NodeId,
    targets: &PairTargets,
) -> Result<NodeId> {
    let idx = targets.supervised_entries();
    if idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let picked = g.gather_entries(log_p, &idx)?;
    let floored = g.clamp_min(picked, T::from_f64(num_traits::Float::ln(PROB_FLOOR)));
    let sum = g.sum_all(floored);
    Ok(g.scale(sum, -T::one() / T::from_usize(idx.len())))
}

pub fn affinity_loss<T: Real>(
    p_bar: &Tensor<T>,
    matches: &[(usize, usize)],
    unmatched1: &[usize],
    unmatched2: &[usize],
) -> Result<T> {
    let (m, n) = (p_bar.rows() - 1, p_bar.cols() - 1);
    let mut idx: Vec<(usize, usize)> = matches.to_vec();
    idx.extend(unmatched1.iter().map(|&i| (i, n)));
    idx.extend(unmatched2.iter().map(|&j| (m, j)));
    if idx.is_empty() {
        return Ok(T::zero());
    }
    let floor = T::from_f64(PROB_FLOOR);
    let mut sum = T::zero();
    for (i, j) in idx.iter().copied() {
        if i > m || j > n {
            return Err(Error::invalid(format!(
                "supervised entry ({i},{j}) outside the plan"
            )));
        }
        sum = sum - p_bar[(i, j)].max(floor).ln();
    }
    Ok(sum / T::from_usize(idx.len()))
}

/// Weighted cross entropy averaged over objects.
pub fn classification_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    logits: NodeId,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<NodeId> {
    let c = g.value(logits).cols();
    check_classes(labels, class_weights, c)?;
    if labels.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let logp = g.log_softmax_rows(logits)?;
    let idx: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &l)| (i, l)).collect();
    let picked = g.gather_entries(logp, &idx)?;
    let w: Vec<T> = labels
        .iter()
        .map(|&l| T::from_f64(class_weights[l]))
        .collect();
    let w = g.constant(Tensor::from_vec(labels.len(), 1, w)?);
    let weighted = g.mul(picked, w)?;
    let sum = g.sum_all(weighted);
    Ok(g.scale(sum, -T::one() / T::from_usize(labels.len())))
}

fn check_classes(labels: &[usize], class_weights: &[f64], c: usize) -> Result<()> {
    if class_weights.len() != c {
        return Err(Error::Shape {
            op: "classification_loss",
            lhs: format!("{c} classes"),
            rhs: format!("{} class weights", class_weights.len()),
        });
    }
    if class_weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::invalid("class weights must be strictly positive"));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {l} >= class count {c}")));
    }
    Ok(())
}

pub fn classification_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<T> {
    check_classes(labels, class_weights, logits.cols())?;
    if logits.rows() != labels.len() {
        return Err(Error::Shape {
            op: "classification_loss",
            lhs: logits.shape_string(),
            rhs: format!("{} labels", labels.len()),
        });
    }
    if labels.is_empty() {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        let lse = crate::graph::logsumexp(logits.row(i));
        sum = sum + T::from_f64(class_weights[l]) * (lse - logits[(i, l)]);
    }
    Ok(sum / T::from_usize(labels.len()))
}

/// Inverse class frequency over `labels`, normalized to mean 1. Absent
/// classes count as seen once.
pub fn class_weights(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Vec<f64> {
    let mut counts = alloc::vec![0usize; num_classes];
    for l in labels {
        if l < num_classes {
            counts[l] += 1;
        }
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / num_classes.max(1) as f64;
    inv.iter().map(|w| w / mean).collect()
}

/// Row weights for the position loss: `1/M` or `1/N` for included objects,
/// zero otherwise.
fn position_row_weights(targets: &[PositionTarget], m: usize) -> Vec<f64> {
    let n = targets.len() - m;
    targets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let denom = if k < m { m } else { n };
            if t.included() {
                1.0 / denom as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// `position` is `(M+N) x 3` with image 1 first.
pub fn position_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    position: NodeId,
    targets: &[PositionTarget],
    m: usize,
) -> Result<NodeId> {
    let rows = g.value(position).rows();
    if rows != targets.len() || m > rows {
        return Err(Error::Shape {
            op: "position_loss",
            lhs: g.value(position).shape_string(),
            rhs: format!("{} targets", targets.len()),
        });
    }
    let weights = position_row_weights(targets, m);
    let mut gt = Vec::with_capacity(rows * 3);
    let mut mask = Vec::with_capacity(rows * 3);
    for (t, &w) in targets.iter().zip(&weights) {
        gt.extend([t.offset[0], t.offset[1], t.distance].map(T::from_f64));
        mask.extend([T::from_f64(w); 3]);
    }
    let gt = g.constant(Tensor::from_vec(rows, 3, gt)?);
    let mask = g.constant(Tensor::from_vec(rows, 3, mask)?);
    let diff = g.sub(position, gt)?;
    let sq = g.mul(diff, diff)?;
    let weighted = g.mul(sq, mask)?;
    Ok(g.sum_all(weighted))
}

pub fn position_loss<T: Real>(
    position: &Tensor<T>,
    targets: &[PositionTarget],
    m: usize,
) -> Result<T> {
    if position.rows() != targets.len() || position.cols() != 3 || m > targets.len() {
        return Err(Error::Shape {
            op: "position_loss",
            lhs: position.shape_string(),
            rhs: format!("{} targets", targets.len()),
        });
    }
    let weights = position_row_weights(targets, m);
    let mut sum = T::zero();
    for (k, (t, &w)) in targets.iter().zip(&weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let r = position.row(k);
        let dx = r[0] - T::from_f64(t.offset[0]);
        let dy = r[1] - T::from_f64(t.offset[1]);
        let dd = r[2] - T::from_f64(t.distance);
        sum = sum + T::from_f64(w) * (dx * dx + dy * dy + dd * dd);
    }
    Ok(sum)
}

fn rel_targets<T: Real>(gt: &[Vec<f64>]) -> Tensor<T> {
    let pairs = ordered_pairs(gt.len());
    let data = pairs.iter().map(|&(i, j)| T::from_f64(gt[i][j])).collect();
    Tensor::from_vec(pairs.len(), 1, data).expect("shape")
}

/// Unnormalized squared error over ordered pairs of both images. `rel1` and
/// `rel2` follow `ordered_pairs`.
pub fn rel_distance_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    rel1: NodeId,
    rel2: NodeId,
    gt1: &[Vec<f64>],
    gt2: &[Vec<f64>],
) -> Result<NodeId> {
    let mut total = None;
    for (pred, gt) in [(rel1, gt1), (rel2, gt2)] {
        if gt.len() < 2 {
            continue;
        }
        let target = g.constant(rel_targets(gt));
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum_all(sq);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

/// `pred[k]` is the `n x n` prediction matrix of image `k`; the diagonal is ignored.
pub fn rel_distance_loss<T: Real>(pred: &[&Tensor<T>], gt: &[&[Vec<f64>]]) -> Result<T> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("one prediction matrix per image required"));
    }
    let mut sum = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        let n = g.len();
        if p.shape() != (n, n) {
            return Err(Error::Shape {
                op: "rel_distance_loss",
                lhs: p.shape_string(),
                rhs: format!("{n}x{n}"),
            });
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = p[(i, j)] - T::from_f64(g[i][j]);
                    sum = sum + d * d;
                }
            }
        }
    }
    Ok(sum)
}

pub fn total_loss<T: Real>(parts: &LossParts<T>, w: &LossWeights) -> T {
    T::from_f64(w.aff) * parts.aff
        + T::from_f64(w.cls) * parts.cls
        + T::from_f64(w.pos) * parts.pos
        + T::from_f64(w.rel) * parts.rel
}

/// Weighted sum; terms with weight zero are left out of the graph so they
/// contribute no gradient at all.
pub fn total_loss_graph<T: Real>(
    g: &mut Graph<'_, T>,
    parts: &LossParts<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut total = None;
    for (node, weight) in [
        (parts.aff, w.aff),
        (parts.cls, w.cls),
        (parts.pos, w.pos),
        (parts.rel, w.rel),
    ] {
        if weight == 0.0 {
            continue;
        }
        let term = g.scale(node, T::from_f64(weight));
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn target(offset: [f64; 2], distance: f64) -> PositionTarget {
        PositionTarget {
            offset,
            distance,
            box_width: 0.2,
            box_height: 0.2,
        }
    }

    #[test]
    fn affinity_trivial_values() {
        let ones = t(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(affinity_loss(&ones, &[(0, 0)], &[], &[]).unwrap(), 0.0);
        let half = t(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let l = affinity_loss(&half, &[(0, 0)], &[], &[0]).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-15);
        let zero = t(&[&[0.0, 1.0], &[1.0, 1.0]]);
        let l = affinity_loss(&zero, &[(0, 0)], &[], &[]).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn affinity_graph_agrees_with_plain() {
        let p = t(&[&[0.7, 0.1, 0.2], &[0.05, 0.6, 0.35], &[0.25, 0.3, 1.45]]);
        let targets = PairTargets {
            m: 2,
            n: 2,
            matches: alloc::vec![(0, 0)],
            unmatched1: alloc::vec![1],
            unmatched2: alloc::vec![1],
            labels: alloc::vec![0; 4],
            positions: alloc::vec![target([0.0; 2], 1.0); 4],
            rel1: alloc::vec![alloc::vec![0.0; 2]; 2],
            rel2: alloc::vec![alloc::vec![0.0; 2]; 2],
        };
        targets.validate(2).unwrap();
        let mut g = Graph::new();
        let lp = g.constant(p.map(f64::ln));
        let l = affinity_loss_graph(&mut g, lp, &targets).unwrap();
        let plain = affinity_loss(&p, &[(0, 0)], &[1], &[1]).unwrap();
        assert!((g.scalar_value(l) - plain).abs() < 1e-14);
    }

    #[test]
    fn classification_trivial_values() {
        let uniform = Tensor::<f64>::zeros(3, 5);
        let l = classification_loss(&uniform, &[0, 2, 4], &[1.0; 5]).unwrap();
        assert!((l - 5.0f64.ln()).abs() < 1e-14);
        let sharp = t(&[&[800.0, 0.0, 0.0]]);
        assert!(classification_loss(&sharp, &[0], &[1.0; 3]).unwrap() < 1e-300);
        assert!(classification_loss(&sharp, &[3], &[1.0; 3]).is_err());
        assert!(classification_loss(&sharp, &[0], &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn doubling_a_class_weight_doubles_its_terms() {
        let logits = t(&[&[0.3, -1.0, 2.0], &[1.5, 0.2, -0.7], &[0.0, 0.4, 0.1]]);
        let labels = [0, 1, 0];
        let base = classification_loss(&logits, &labels, &[1.0, 1.0, 1.0]).unwrap();
        let doubled = classification_loss(&logits, &labels, &[2.0, 1.0, 1.0]).unwrap();
        let class0 = classification_loss(&logits.clone(), &labels, &[1.0, 1e-300, 1.0]).unwrap();
        assert!((doubled - (base + class0)).abs() < 1e-14);
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let l = classification_loss_graph(&mut g, x, &labels, &[2.0, 1.0, 1.0]).unwrap();
        assert!((g.scalar_value(l) - doubled).abs() < 1e-14);
    }

    #[test]
    fn class_weights_are_inverse_frequency_with_mean_one() {
        let w = class_weights([0, 0, 0, 1], 2);
        assert!((w[1] / w[0] - 3.0).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
        let w = class_weights([0, 0], 3);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn position_trivial_values() {
        let targets = [target([0.0, 0.0], 2.0)];
        let pred = t(&[&[0.3, 0.4, 2.0]]);
        let l = position_loss(&pred, &targets, 1).unwrap();
        assert!((l - 0.25).abs() < 1e-15);
        let exact = t(&[&[0.0, 0.0, 2.0]]);
        assert_eq!(position_loss(&exact, &targets, 1).unwrap(), 0.0);
        let far = [target([0.25, 0.0], 2.0), target([0.0, -0.3], 1.0)];
        let pred = t(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]);
        assert_eq!(position_loss(&pred, &far, 1).unwrap(), 0.0);
    }

    #[test]
    fn excluded_objects_keep_the_denominator() {
        let targets = [
            target([0.0, 0.0], 1.0),
            target([0.5, 0.0], 1.0),
            target([0.0, 0.0], 1.0),
        ];
        let pred = t(&[&[0.0, 0.0, 2.0], &[9.0, 9.0, 9.0], &[0.0, 0.0, 3.0]]);
        // image 1 holds rows 0 and 1; row 1 is excluded but M stays 2
        let l = position_loss(&pred, &targets, 2).unwrap();
        assert!((l - (1.0 / 2.0 + 4.0 / 1.0)).abs() < 1e-15);
        let mut g = Graph::new();
        let x = g.constant(pred);
        let lg = position_loss_graph(&mut g, x, &targets, 2).unwrap();
        assert!((g.scalar_value(lg) - l).abs() < 1e-15);
    }

    #[test]
    fn rel_distance_trivial_values() {
        let gt = alloc::vec![alloc::vec![0.0, 1.0], alloc::vec![1.0, 0.0]];
        let pred = t(&[&[0.0, 1.5], &[0.5, 0.0]]);
        let empty: Vec<Vec<f64>> = Vec::new();
        let e = Tensor::zeros(0, 0);
        let l = rel_distance_loss(&[&pred, &e], &[&gt, &empty]).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        let l = rel_distance_loss(&[&t(&[&[0.0, 1.0], &[1.0, 0.0]])], &[&gt]).unwrap();
        assert_eq!(l, 0.0);
        let mut g = Graph::new();
        let r1 = g.constant(t(&[&[1.5], &[0.5]]));
        let r2 = g.constant(Tensor::zeros(0, 1));
        let lg = rel_distance_loss_graph(&mut g, r1, r2, &gt, &empty).unwrap();
        assert!((g.scalar_value(lg) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn total_trivial_values() {
        let ones = LossParts {
            aff: 1.0f64,
            cls: 1.0,
            pos: 1.0,
            rel: 1.0,
        };
        assert!((ones.total(&LossWeights::default()) - 2.2).abs() < 1e-15);
        let zero = LossWeights {
            aff: 0.0,
            cls: 0.0,
            pos: 0.0,
            rel: 0.0,
        };
        assert_eq!(ones.total(&zero), 0.0);
        assert!(LossWeights { aff: -1.0, ..zero }.validate().is_err());
    }
}
