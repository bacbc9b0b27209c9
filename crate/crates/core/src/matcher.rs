//! Partial assignment between the objects of two images.
//!
//! Scores are augmented with an outlier row and column, then normalized by
//! log-domain Sinkhorn iterations towards row marginals `(1, .., 1, N)` and
//! column marginals `(1, .., 1, M)`. Hard matches are mutual argmaxes.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{logsumexp, Graph, NodeId};
use crate::real::Real;
use crate::scene::{BBox, KeypointMatch};
use crate::tensor::Tensor;

/// Default number of Sinkhorn iterations for training and matching.
pub const DEFAULT_ITERATIONS: usize = 10;
/// Default weight of keypoint scores in fused matching.
pub const DEFAULT_ALPHA: f64 = 100.0;

/// Hard assignment read off a soft assignment matrix.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Matches {
    pub matches: Vec<(usize, usize)>,
    pub unmatched1: Vec<usize>,
    pub unmatched2: Vec<usize>,
}

/// Soft assignment with its extracted matches.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    /// `(M+1) x (N+1)` transport plan, dustbins last.
    pub p_bar: Tensor<T>,
    pub matches: Matches,
}

/// `S[i][j] = <x1_i, x2_j>`.
pub fn score_matrix<T: Real>(x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Tensor<T>> {
    if x1.cols() != x2.cols() {
        return Err(Error::Shape {
            op: "score_matrix",
            lhs: x1.shape_string(),
            rhs: x2.shape_string(),
        });
    }
    x1.matmul_nt(x2)
}

/// Appends a dustbin row and column filled with `z`.
pub fn augment_dustbin<T: Real>(scores: &Tensor<T>, z: T) -> Tensor<T> {
    let (m, n) = scores.shape();
    let mut out = Tensor::filled(m + 1, n + 1, z);
    for i in 0..m {
        out.row_mut(i)[..n].copy_from_slice(scores.row(i));
    }
    out
}

fn marginals<T: Real>(m: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut log_a = alloc::vec![T::zero(); m + 1];
    log_a[m] = T::from_usize(n).ln();
    let mut log_b = alloc::vec![T::zero(); n + 1];
    log_b[n] = T::from_usize(m).ln();
    (log_a, log_b)
}

fn check_augmented<T: Real>(s: &Tensor<T>, iterations: usize) -> Result<(usize, usize)> {
    if iterations == 0 {
        return Err(Error::invalid("sinkhorn needs at least one iteration"));
    }
    if s.rows() < 2 || s.cols() < 2 {
        return Err(Error::Shape {
            op: "sinkhorn",
            lhs: s.shape_string(),
            rhs: "at least 2x2 (one object per side plus dustbins)".into(),
        });
    }
    if !s.is_finite() {
        return Err(Error::domain("sinkhorn", "non-finite score"));
    }
    Ok((s.rows() - 1, s.cols() - 1))
}

/// Log of the Sinkhorn transport plan for augmented scores.
pub fn sinkhorn_log<T: Real>(s: &Tensor<T>, iterations: usize) -> Result<Tensor<T>> {
    Ok(sinkhorn_run(s, iterations, false)?.0)
}

/// Transport plan `P_bar` for augmented scores.
pub fn sinkhorn<T: Real>(s: &Tensor<T>, iterations: usize) -> Result<Tensor<T>> {
    Ok(sinkhorn_log(s, iterations)?.map(|x| x.exp()))
}

/// Like [`sinkhorn_log`], also returning the L1 marginal residual after every
/// iteration.
pub fn sinkhorn_trace<T: Real>(s: &Tensor<T>, iterations: usize) -> Result<(Tensor<T>, Vec<T>)> {
    sinkhorn_run(s, iterations, true)
}

fn sinkhorn_run<T: Real>(
    s: &Tensor<T>,
    iterations: usize,
    trace: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (m, n) = check_augmented(s, iterations)?;
    let (log_a, log_b) = marginals::<T>(m, n);
    let mut u = alloc::vec![T::zero(); m + 1];
    let mut v = alloc::vec![T::zero(); n + 1];
    let mut buf_r = alloc::vec![T::zero(); n + 1];
    let mut buf_c = alloc::vec![T::zero(); m + 1];
    let mut residuals = Vec::new();
    for _ in 0..iterations {
        for i in 0..=m {
            for (j, b) in buf_r.iter_mut().enumerate() {
                *b = s[(i, j)] + v[j];
            }
            u[i] = log_a[i] - logsumexp(&buf_r);
        }
        for j in 0..=n {
            for (i, b) in buf_c.iter_mut().enumerate() {
                *b = s[(i, j)] + u[i];
            }
            v[j] = log_b[j] - logsumexp(&buf_c);
        }
        if trace {
            let plan = apply_potentials(s, &u, &v).map(|x| x.exp());
            residuals.push(marginal_residual(&plan));
        }
    }
    Ok((apply_potentials(s, &u, &v), residuals))
}

fn apply_potentials<T: Real>(s: &Tensor<T>, u: &[T], v: &[T]) -> Tensor<T> {
    let mut out = s.clone();
    for (i, &ui) in u.iter().enumerate() {
        for (x, &vj) in out.row_mut(i).iter_mut().zip(v) {
            *x = *x + ui + vj;
        }
    }
    out
}

/// Sum of absolute deviations of all row and column sums of a plan from
/// their targets.
pub fn marginal_residual<T: Real>(p: &Tensor<T>) -> T {
    let (m, n) = (p.rows() - 1, p.cols() - 1);
    let (log_a, log_b) = marginals::<T>(m, n);
    let rows = p.row_sums();
    let cols = p.col_sums();
    let r = rows
        .iter()
        .zip(&log_a)
        .fold(T::zero(), |acc, (&s, &la)| acc + (s - la.exp()).abs());
    cols.iter()
        .zip(&log_b)
        .fold(r, |acc, (&s, &lb)| acc + (s - lb.exp()).abs())
}

/// Largest absolute deviation of any row or column sum from its target.
pub fn max_marginal_error<T: Real>(p: &Tensor<T>) -> T {
    let (m, n) = (p.rows() - 1, p.cols() - 1);
    let (log_a, log_b) = marginals::<T>(m, n);
    let mut worst = T::zero();
    for (s, la) in p.row_sums().into_iter().zip(log_a) {
        worst = worst.max((s - la.exp()).abs());
    }
    for (s, lb) in p.col_sums().into_iter().zip(log_b) {
        worst = worst.max((s - lb.exp()).abs());
    }
    worst
}

/// Differentiable Sinkhorn; returns the node of `log P_bar`.
pub fn sinkhorn_graph<T: Real>(
    g: &mut Graph<'_, T>,
    s: NodeId,
    iterations: usize,
) -> Result<NodeId> {
    let (m, n) = check_augmented(g.value(s), iterations)?;
    let (log_a, log_b) = marginals::<T>(m, n);
    let log_a = g.constant(Tensor::from_vec(m + 1, 1, log_a)?);
    let log_b = g.constant(Tensor::from_vec(1, n + 1, log_b)?);
    let mut v = g.constant(Tensor::zeros(1, n + 1));
    let mut u = g.constant(Tensor::zeros(m + 1, 1));
    for _ in 0..iterations {
        let sv = g.add_row(s, v)?;
        let lse_r = g.logsumexp_rows(sv);
        u = g.sub(log_a, lse_r)?;
        let su = g.add_col(s, u)?;
        let lse_c = g.logsumexp_cols(su);
        v = g.sub(log_b, lse_c)?;
    }
    let su = g.add_col(s, u)?;
    g.add_row(su, v)
}

/// Mutual-argmax extraction over object-plus-dustbin candidates.
///
/// Works on `P_bar` or on `log P_bar` alike. Ties go to the lowest index.
pub fn extract_assignment<T: Real>(p: &Tensor<T>) -> Matches {
    let (m, n) = (p.rows().saturating_sub(1), p.cols().saturating_sub(1));
    let row_best: Vec<usize> = (0..m)
        .map(|i| {
            let row = p.row(i);
            let mut best = 0;
            for j in 1..=n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let col_best: Vec<usize> = (0..n)
        .map(|j| {
            let mut best = 0;
            for i in 1..=m {
                if p[(i, j)] > p[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let mut out = Matches::default();
    let mut matched2 = alloc::vec![false; n];
    for (i, &j) in row_best.iter().enumerate() {
        if j < n && col_best[j] == i {
            out.matches.push((i, j));
            matched2[j] = true;
        } else {
            out.unmatched1.push(i);
        }
    }
    out.unmatched2 = (0..n).filter(|&j| !matched2[j]).collect();
    out
}

/// Keypoint evidence per object pair, `ln(1 + count)`, with dustbin entries 1.
///
/// A keypoint pair counts for `(i, j)` when its first point lies in box `i`
/// of image 1 and its second in box `j` of image 2, boundaries included.
pub fn keypoint_scores<T: Real>(
    keypoints: &[KeypointMatch],
    boxes1: &[BBox],
    boxes2: &[BBox],
) -> Tensor<T> {
    let counts = keypoint_counts(keypoints, boxes1, boxes2);
    let (m, n) = (boxes1.len(), boxes2.len());
    let mut out = Tensor::ones(m + 1, n + 1);
    for i in 0..m {
        for j in 0..n {
            out[(i, j)] = T::from_f64(num_traits::Float::ln_1p(counts[i * n + j] as f64));
        }
    }
    out
}

/// Row-major `M x N` keypoint counts.
pub fn keypoint_counts(keypoints: &[KeypointMatch], boxes1: &[BBox], boxes2: &[BBox]) -> Vec<u32> {
    let n = boxes2.len();
    let mut counts = alloc::vec![0u32; boxes1.len() * n];
    for kp in keypoints {
        let js: Vec<usize> = (0..n).filter(|&j| boxes2[j].contains(kp.p2)).collect();
        if js.is_empty() {
            continue;
        }
        for (i, b1) in boxes1.iter().enumerate() {
            if b1.contains(kp.p1) {
                for &j in &js {
                    counts[i * n + j] += 1;
                }
            }
        }
    }
    counts
}

/// Sinkhorn on `S_obj + alpha * S_kp` followed by mutual-argmax extraction.
pub fn fuse_and_match<T: Real>(
    obj: &Tensor<T>,
    kp: &Tensor<T>,
    alpha: T,
    iterations: usize,
) -> Result<Assignment<T>> {
    if obj.shape() != kp.shape() {
        return Err(Error::Shape {
            op: "fuse_and_match",
            lhs: obj.shape_string(),
            rhs: kp.shape_string(),
        });
    }
    let fused = obj.zip_map(kp, |a, b| a + alpha * b);
    match_scores(&fused, iterations)
}

/// Sinkhorn then extraction on already augmented scores.
pub fn match_scores<T: Real>(augmented: &Tensor<T>, iterations: usize) -> Result<Assignment<T>> {
    let log_p = sinkhorn_log(augmented, iterations)?;
    let matches = extract_assignment(&log_p);
    Ok(Assignment {
        p_bar: log_p.map(|x| x.exp()),
        matches,
    })
}

/// Rejects match lists that reuse an index on either side.
pub fn check_one_to_one(matches: &[(usize, usize)]) -> Result<()> {
    let mut left: Vec<usize> = matches.iter().map(|m| m.0).collect();
    let mut right: Vec<usize> = matches.iter().map(|m| m.1).collect();
    left.sort_unstable();
    right.sort_unstable();
    let dup = |v: &[usize]| v.windows(2).find(|w| w[0] == w[1]).map(|w| w[0]);
    if let Some(i) = dup(&left) {
        return Err(Error::invalid(format!(
            "index {i} matched twice in image 1"
        )));
    }
    if let Some(j) = dup(&right) {
        return Err(Error::invalid(format!(
            "index {j} matched twice in image 2"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn orthogonal_scores() {
        let s = score_matrix(&t(&[&[1.0, 0.0]]), &t(&[&[0.0, 1.0]])).unwrap();
        assert_eq!(s.data(), &[0.0]);
    }

    #[test]
    fn scores_match_naive_dot_products() {
        let x1 = random(4, 7, -1.0, 1.0, 1);
        let x2 = random(5, 7, -1.0, 1.0, 2);
        let s = score_matrix(&x1, &x2).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut dot = 0.0;
                for k in 0..7 {
                    dot += x1[(i, k)] * x2[(j, k)];
                }
                assert!((s[(i, j)] - dot).abs() < 1e-12);
            }
        }
        assert!(score_matrix(&x1, &random(2, 6, 0.0, 1.0, 3)).is_err());
    }

    #[test]
    fn identical_near_orthogonal_sets_have_dominant_diagonal() {
        let x = t(&[&[1.0, 0.05, 0.0], &[0.0, 1.0, 0.1], &[0.02, 0.0, 1.0]]);
        let s = score_matrix(&x, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s[(i, j)], s[(j, i)]);
                if i != j {
                    assert!(s[(i, i)] > s[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn augment_layout() {
        let a = augment_dustbin(&t(&[&[2.5]]), 0.0);
        assert_eq!(a.to_f64_rows(), [[2.5, 0.0], [0.0, 0.0]]);
        let b = augment_dustbin(&Tensor::<f64>::zeros(3, 5), 1.0);
        assert_eq!(b.shape(), (4, 6));
    }

    #[test]
    fn uniform_one_by_one_is_half() {
        let p = sinkhorn(&Tensor::<f64>::zeros(2, 2), 10).unwrap();
        for &x in p.data() {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_diagonal_converges_to_identity() {
        let n = 4;
        let mut s = Tensor::<f64>::filled(n, n, -20.0);
        for i in 0..n {
            s[(i, i)] = 20.0;
        }
        let p = sinkhorn(&augment_dustbin(&s, 0.0), 100).unwrap();
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((p[(i, j)] - target).abs() < 1e-2, "{p:?}");
            }
        }
        let m = extract_assignment(&p);
        assert_eq!(m.matches, [(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn marginals_converge_on_random_scores() {
        let s = random(7, 9, -5.0, 5.0, 7);
        let p = sinkhorn(&s, 300).unwrap();
        assert!(max_marginal_error(&p) < 1e-6);
    }

    #[test]
    fn residual_never_increases() {
        for seed in 0..20 {
            let s = random(5, 7, -5.0, 5.0, seed);
            let (_, res) = sinkhorn_trace(&s, 60).unwrap();
            for w in res.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "seed {seed}: {res:?}");
            }
        }
    }

    #[test]
    fn graph_route_agrees_with_plain_route() {
        let s = random(4, 6, -3.0, 3.0, 8);
        let plain = sinkhorn_log(&s, 10).unwrap();
        let mut g = Graph::new();
        let is = g.leaf(&s);
        let lp = sinkhorn_graph(&mut g, is, 10).unwrap();
        assert!(g.value(lp).max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let mut s = Tensor::<f64>::zeros(3, 3);
        assert!(sinkhorn(&s, 0).is_err());
        s[(0, 0)] = f64::INFINITY;
        assert!(sinkhorn(&s, 5).is_err());
        s[(0, 0)] = f64::NAN;
        assert!(sinkhorn(&s, 5).is_err());
        assert!(sinkhorn(&Tensor::<f64>::zeros(1, 3), 5).is_err());
    }

    #[test]
    fn permuting_scores_permutes_plan() {
        let s = random(4, 5, -3.0, 3.0, 9);
        let p = sinkhorn(&augment_dustbin(&s, 0.5), 50).unwrap();
        let rp = [2usize, 0, 3, 1];
        let cp = [4usize, 1, 0, 3, 2];
        let mut sp = Tensor::zeros(4, 5);
        for i in 0..4 {
            for j in 0..5 {
                sp[(i, j)] = s[(rp[i], cp[j])];
            }
        }
        let pp = sinkhorn(&augment_dustbin(&sp, 0.5), 50).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert!((pp[(i, j)] - p[(rp[i], cp[j])]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extract_dominant_entry() {
        let m = extract_assignment(&t(&[&[0.9, 0.1], &[0.1, 0.1]]));
        assert_eq!(m.matches, [(0, 0)]);
        assert!(m.unmatched1.is_empty() && m.unmatched2.is_empty());
    }

    #[test]
    fn extract_uniform_ties_are_deterministic() {
        let u = Tensor::<f64>::filled(3, 3, 0.25);
        let a = extract_assignment(&u);
        assert_eq!(a.matches, [(0, 0)]);
        assert_eq!(a.unmatched1, [1]);
        assert_eq!(a.unmatched2, [1]);
        assert_eq!(a, extract_assignment(&u));
    }

    #[test]
    fn extract_respects_dustbin_and_mutuality() {
        // row 0 prefers col 0, col 0 prefers row 1, row 1 prefers col 0 -> (1,0)
        let p = t(&[&[0.5, 0.1, 0.2], &[0.6, 0.0, 0.1], &[0.1, 0.1, 0.9]]);
        let a = extract_assignment(&p);
        assert_eq!(a.matches, [(1, 0)]);
        assert_eq!(a.unmatched1, [0]);
        assert_eq!(a.unmatched2, [1]);
    }

    #[test]
    fn keypoint_score_cases() {
        let b1 = [BBox::new(0.0, 0.0, 0.4, 0.4), BBox::new(0.5, 0.5, 0.9, 0.9)];
        let b2 = [BBox::new(0.1, 0.1, 0.3, 0.3), BBox::new(0.6, 0.6, 1.0, 1.0)];
        let empty: Tensor<f64> = keypoint_scores(&[], &b1, &b2);
        assert_eq!(
            empty.to_f64_rows(),
            [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]
        );

        let mut kps = Vec::new();
        for _ in 0..5 {
            kps.push(KeypointMatch::new([0.2, 0.2], [0.2, 0.2]));
        }
        for _ in 0..3 {
            kps.push(KeypointMatch::new([0.9, 0.9], [0.6, 0.6]));
        }
        let s: Tensor<f64> = keypoint_scores(&kps, &b1, &b2);
        assert!((s[(0, 0)] - 6f64.ln()).abs() < 1e-15);
        assert!((s[(1, 1)] - 4f64.ln()).abs() < 1e-15);
        assert_eq!((s[(0, 1)], s[(1, 0)]), (0.0, 0.0));
    }

    #[test]
    fn overlapping_boxes_both_count() {
        let b1 = [
            BBox::new(0.0, 0.0, 0.5, 0.5),
            BBox::new(0.25, 0.25, 0.75, 0.75),
        ];
        let b2 = [BBox::new(0.0, 0.0, 1.0, 1.0)];
        let c = keypoint_counts(&[KeypointMatch::new([0.3, 0.3], [0.5, 0.5])], &b1, &b2);
        assert_eq!(c, [1, 1]);
    }

    #[test]
    fn zero_alpha_is_object_only() {
        let obj = augment_dustbin(&random(3, 4, -4.0, 4.0, 12), 1.0);
        let kp = random(4, 5, 0.0, 3.0, 13);
        let fused = fuse_and_match(&obj, &kp, 0.0, 10).unwrap();
        let plain = match_scores(&obj, 10).unwrap();
        assert_eq!(fused, plain);
        assert!(fuse_and_match(&obj, &random(3, 5, 0.0, 1.0, 1), 1.0, 10).is_err());
    }

    #[test]
    fn decisive_keypoints_recover_diagonal() {
        let obj = Tensor::<f64>::zeros(4, 4);
        let b: Vec<BBox> = (0..3)
            .map(|i| BBox::new(0.3 * i as f64, 0.0, 0.3 * i as f64 + 0.2, 0.2))
            .collect();
        let kps: Vec<KeypointMatch> = (0..3)
            .flat_map(|i| {
                let c = 0.3 * i as f64 + 0.1;
                core::iter::repeat_n(KeypointMatch::new([c, 0.1], [c, 0.1]), 6)
            })
            .collect();
        let kp: Tensor<f64> = keypoint_scores(&kps, &b, &b);
        let a = fuse_and_match(&obj, &kp, 100.0, 10).unwrap();
        assert_eq!(a.matches.matches, [(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn empty_keypoints_push_everything_to_the_dustbin() {
        // keypoint dustbins score 1 while empty object cells score ln 1 = 0
        let mut s = Tensor::<f64>::filled(3, 3, -5.0);
        for i in 0..3 {
            s[(i, i)] = 8.0;
        }
        let obj = augment_dustbin(&s, 1.0);
        let boxes: Vec<BBox> = (0..3).map(|_| BBox::new(0.1, 0.1, 0.2, 0.2)).collect();
        let kp: Tensor<f64> = keypoint_scores(&[], &boxes, &boxes);
        let fused = fuse_and_match(&obj, &kp, 100.0, 10).unwrap();
        assert!(fused.matches.matches.is_empty());
        let plain = fuse_and_match(&obj, &kp, 0.0, 10).unwrap();
        assert_eq!(plain.matches.matches, [(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn one_to_one_check() {
        assert!(check_one_to_one(&[(0, 1), (1, 0)]).is_ok());
        assert!(check_one_to_one(&[(0, 1), (0, 2)]).is_err());
        assert!(check_one_to_one(&[(0, 1), (2, 1)]).is_err());
    }
}
