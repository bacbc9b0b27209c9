use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rom_core::eval::{assign_detections_to_gt, match_metrics, MatchMode};
use rom_core::loss::{
    affinity_loss, class_weights, classification_loss, position_loss, rel_distance_loss,
    PositionTarget,
};
use rom_core::matcher::{extract_assignment, max_marginal_error, sinkhorn, sinkhorn_trace};
use rom_core::scene::BBox;
use rom_core::train::subsample_indices;
use rom_core::Tensor;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |data| Tensor::from_vec(rows, cols, data).unwrap())
}

fn sized_matrix(lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    (2usize..7, 2usize..7).prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.05..0.2f64, 0.05..0.2f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

/// Match list of a random partial permutation.
fn match_list(max: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    (
        Just((0..max).collect::<Vec<usize>>()).prop_shuffle(),
        0..=max,
    )
        .prop_map(|(perm, k)| perm.into_iter().take(k).enumerate().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_reaches_marginals(s in matrix(6, 8, -5.0, 5.0)) {
        let log_p = rom_core::matcher::sinkhorn_log(&s, 300).unwrap();
        prop_assert!(max_marginal_error(&log_p.map(f64::exp)) < 1e-6);
    }

    #[test]
    fn sinkhorn_residual_never_increases(s in sized_matrix(-5.0, 5.0)) {
        let (_, trace) = sinkhorn_trace(&s, 100).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn sinkhorn_is_permutation_equivariant(
        s in matrix(5, 6, -3.0, 3.0),
        rp in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        cp in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle(),
    ) {
        // Dustbin row and column stay last.
        let row = |i: usize| if i < 4 { rp[i] } else { 4 };
        let col = |j: usize| if j < 5 { cp[j] } else { 5 };
        let mut permuted = Tensor::zeros(5, 6);
        for i in 0..5 {
            for j in 0..6 {
                permuted[(i, j)] = s[(row(i), col(j))];
            }
        }
        let p = sinkhorn(&s, 10).unwrap();
        let q = sinkhorn(&permuted, 10).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                prop_assert!((q[(i, j)] - p[(row(i), col(j))]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extraction_is_one_to_one_and_complete(p in sized_matrix(0.0, 1.0)) {
        let (m, n) = (p.rows() - 1, p.cols() - 1);
        let out = extract_assignment(&p);
        let mut rows: Vec<usize> = out.matches.iter().map(|x| x.0).chain(out.unmatched1.iter().copied()).collect();
        let mut cols: Vec<usize> = out.matches.iter().map(|x| x.1).chain(out.unmatched2.iter().copied()).collect();
        rows.sort_unstable();
        cols.sort_unstable();
        prop_assert_eq!(rows, (0..m).collect::<Vec<_>>());
        prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn losses_are_non_negative(
        s in matrix(4, 5, -4.0, 4.0),
        logits in matrix(6, 4, -4.0, 4.0),
        pos in matrix(6, 3, -3.0, 3.0),
        labels in prop::collection::vec(0usize..4, 6),
        targets in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.5..8.0f64, 0.01..0.5f64), 6),
        rel in matrix(3, 3, 0.0, 5.0),
    ) {
        let p = sinkhorn(&s, 10).unwrap();
        let aff = affinity_loss(&p, &[(0, 1), (2, 0)], &[1], &[2, 3]).unwrap();
        prop_assert!(aff >= 0.0);
        let w = class_weights(labels.iter().copied(), 4);
        prop_assert!((w.iter().sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
        prop_assert!(classification_loss(&logits, &labels, &w).unwrap() >= 0.0);
        let t: Vec<PositionTarget> = targets
            .iter()
            .map(|&(x, y, d, size)| PositionTarget { offset: [x, y], distance: d, box_width: size, box_height: size })
            .collect();
        prop_assert!(position_loss(&pos, &t, 3).unwrap() >= 0.0);
        let gt = [vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.5], vec![2.0, 1.5, 0.0]];
        prop_assert!(rel_distance_loss(&[&rel], &[&gt[..]]).unwrap() >= 0.0);
    }

    #[test]
    fn adding_a_correct_match_never_lowers_recall(
        gt in match_list(6),
        keep in prop::collection::vec(any::<bool>(), 6),
    ) {
        let pred: Vec<_> = gt.iter().zip(&keep).filter(|x| *x.1).map(|x| *x.0).collect();
        if let Some(&extra) = gt.iter().find(|m| !pred.contains(m)) {
            let mut more = pred.clone();
            more.push(extra);
            for mode in [MatchMode::ObjectWise, MatchMode::FrameWise] {
                let a = match_metrics(std::slice::from_ref(&pred), std::slice::from_ref(&gt), mode).unwrap();
                let b = match_metrics(std::slice::from_ref(&more), std::slice::from_ref(&gt), mode).unwrap();
                prop_assert!(b.recall >= a.recall);
            }
        }
    }

    #[test]
    fn adding_a_wrong_match_never_raises_precision(gt in match_list(5), pred in match_list(5)) {
        // Row 7 and column 9 appear in no ground-truth match.
        let mut more = pred.clone();
        more.push((7, 9));
        for mode in [MatchMode::ObjectWise, MatchMode::FrameWise] {
            let a = match_metrics(std::slice::from_ref(&pred), std::slice::from_ref(&gt), mode).unwrap();
            let b = match_metrics(std::slice::from_ref(&more), std::slice::from_ref(&gt), mode).unwrap();
            prop_assert!(b.precision <= a.precision);
            prop_assert!((0.0..=1.0).contains(&b.f1));
        }
    }

    #[test]
    fn modes_coincide_for_identical_pairs(gt in match_list(5), pred in match_list(5), copies in 1usize..5) {
        let p = vec![pred; copies];
        let g = vec![gt.clone(); copies];
        let o = match_metrics(&p, &g, MatchMode::ObjectWise).unwrap();
        let f = match_metrics(&p, &g, MatchMode::FrameWise).unwrap();
        if !gt.is_empty() {
            prop_assert!((o.precision - f.precision).abs() < 1e-12);
            prop_assert!((o.recall - f.recall).abs() < 1e-12);
            prop_assert!((o.f1 - f.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_assignment_is_injective(
        dets in prop::collection::vec(bbox(), 0..8),
        gt in prop::collection::vec(bbox(), 0..8),
    ) {
        let map = assign_detections_to_gt(&dets, &gt);
        prop_assert_eq!(map.len(), dets.len());
        let mut seen = vec![false; gt.len()];
        for (d, k) in map.iter().enumerate() {
            if let Some(k) = *k {
                prop_assert!(!seen[k]);
                seen[k] = true;
                prop_assert!(dets[d].iou(&gt[k]) > 0.5);
            }
        }
    }

    #[test]
    fn subsampling_never_duplicates(n in 0usize..200, max in 1usize..60, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = subsample_indices(&mut rng, n, max);
        prop_assert_eq!(idx.len(), n.min(max));
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
}
