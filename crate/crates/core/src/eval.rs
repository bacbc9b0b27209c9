//! Match precision/recall/F1, auxiliary-head errors and detection-to-GT
//! assignment.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::argmax;
use crate::error::{Error, Result};
use crate::matcher::{check_one_to_one, fuse_and_match, keypoint_scores, Matches};
use crate::model::Model;
use crate::real::Real;
use crate::scene::{distance, BBox, Camera, Difficulty, ScenePair};
use crate::train::eval_sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Counts pooled over every pair.
    ObjectWise,
    /// Per-pair measures averaged over pairs.
    FrameWise,
}

impl MatchMode {
    pub fn name(self) -> &'static str {
        match self {
            MatchMode::ObjectWise => "object_wise",
            MatchMode::FrameWise => "frame_wise",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    pub pairs: usize,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn count_correct(pred: &[(usize, usize)], gt: &[(usize, usize)]) -> usize {
    pred.iter().filter(|m| gt.contains(m)).count()
}

/// Precision, recall and F1 over pairs of predicted and ground-truth match
/// lists.
///
/// Frame-wise, a pair without ground-truth matches is left out of the recall
/// and F1 averages; its precision is 1 if it also has no predictions.
pub fn match_metrics(
    pred: &[Vec<(usize, usize)>],
    gt: &[Vec<(usize, usize)>],
    mode: MatchMode,
) -> Result<Prf> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "{} predicted and {} ground-truth match lists",
            pred.len(),
            gt.len()
        )));
    }
    for (p, g) in pred.iter().zip(gt) {
        check_one_to_one(p)?;
        check_one_to_one(g)?;
    }
    let mut out = Prf {
        pairs: pred.len(),
        ..Prf::default()
    };
    let (mut p_sum, mut r_sum, mut f_sum, mut with_gt) = (0.0, 0.0, 0.0, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let c = count_correct(p, g);
        out.correct += c;
        out.predicted += p.len();
        out.ground_truth += g.len();
        let prec = if p.is_empty() && g.is_empty() {
            1.0
        } else {
            ratio(c, p.len())
        };
        p_sum += prec;
        if !g.is_empty() {
            let rec = ratio(c, g.len());
            r_sum += rec;
            f_sum += f1_score(prec, rec);
            with_gt += 1;
        }
    }
    match mode {
        MatchMode::ObjectWise => {
            out.precision = ratio(out.correct, out.predicted);
            out.recall = ratio(out.correct, out.ground_truth);
            out.f1 = f1_score(out.precision, out.recall);
        }
        MatchMode::FrameWise => {
            let n = pred.len().max(1) as f64;
            let k = with_gt.max(1) as f64;
            out.precision = p_sum / n;
            out.recall = r_sum / k;
            out.f1 = f_sum / k;
        }
    }
    Ok(out)
}

/// Overall and per-bin metrics in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub mode: MatchMode,
    pub overall: Prf,
    /// Only bins that contain at least one pair, in easy/hard/very hard order.
    pub bins: Vec<(Difficulty, Prf)>,
}

impl MatchReport {
    pub fn bin(&self, d: Difficulty) -> Option<&Prf> {
        self.bins.iter().find(|b| b.0 == d).map(|b| &b.1)
    }
}

pub fn match_report(
    pred: &[Vec<(usize, usize)>],
    gt: &[Vec<(usize, usize)>],
    bins: &[Difficulty],
    mode: MatchMode,
) -> Result<MatchReport> {
    if bins.len() != pred.len() {
        return Err(Error::invalid("one difficulty bin per pair required"));
    }
    let overall = match_metrics(pred, gt, mode)?;
    let mut per_bin = Vec::new();
    for d in Difficulty::ALL {
        let idx: Vec<usize> = (0..bins.len()).filter(|&k| bins[k] == d).collect();
        if idx.is_empty() {
            continue;
        }
        let p: Vec<_> = idx.iter().map(|&k| pred[k].clone()).collect();
        let g: Vec<_> = idx.iter().map(|&k| gt[k].clone()).collect();
        per_bin.push((d, match_metrics(&p, &g, mode)?));
    }
    Ok(MatchReport {
        mode,
        overall,
        bins: per_bin,
    })
}

/// Maps each detection to the ground-truth box of maximal IoU when that IoU
/// exceeds 0.5. A ground-truth box claimed by several detections keeps the
/// one with the highest IoU (lowest index on ties).
pub fn assign_detections_to_gt(detections: &[BBox], gt: &[BBox]) -> Vec<Option<usize>> {
    let claims: Vec<Option<(usize, f64)>> = detections
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gt.iter().enumerate() {
                let iou = d.iou(g);
                if best.is_none_or(|b| iou > b.1) {
                    best = Some((k, iou));
                }
            }
            best.filter(|b| b.1 > 0.5)
        })
        .collect();
    let mut winner: Vec<Option<(usize, f64)>> = alloc::vec![None; gt.len()];
    for (i, c) in claims.iter().enumerate() {
        if let Some((k, iou)) = *c {
            if winner[k].is_none_or(|w| iou > w.1) {
                winner[k] = Some((i, iou));
            }
        }
    }
    claims
        .iter()
        .enumerate()
        .map(|(i, c)| c.and_then(|(k, _)| (winner[k].map(|w| w.0) == Some(i)).then_some(k)))
        .collect()
}

/// Rewrites labels through an integer table (for example from a detector's
/// label space into the training label space).
pub fn relabel(labels: &mut [usize], table: &[usize]) -> Result<()> {
    for l in labels.iter_mut() {
        *l = *table
            .get(*l)
            .ok_or_else(|| Error::invalid(format!("label {l} missing from relabel table")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub within_0_5: f64,
    pub within_1_0: f64,
}

/// Summary of absolute errors in meters. Empty input gives all zeros.
pub fn error_stats(errors: &[f64]) -> ErrorStats {
    if errors.is_empty() {
        return ErrorStats::default();
    }
    let n = errors.len();
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let within = |t: f64| errors.iter().filter(|&&e| e <= t).count() as f64 / n as f64;
    ErrorStats {
        count: n,
        mean: errors.iter().sum::<f64>() / n as f64,
        median,
        within_0_5: within(0.5),
        within_1_0: within(1.0),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxReport {
    pub accuracy: f64,
    pub position: ErrorStats,
    pub distance: ErrorStats,
}

/// Auxiliary-head prediction and ground truth of one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxSample {
    pub camera: Camera,
    pub bbox: BBox,
    pub gt_offset: [f64; 2],
    pub gt_distance: f64,
    pub gt_class: usize,
    pub offset: [f64; 2],
    pub distance: f64,
    pub class: usize,
}

impl AuxSample {
    /// Distance between back-projected predicted and true 3D positions.
    pub fn position_error(&self) -> f64 {
        let p = self
            .camera
            .recover_position(&self.bbox, self.offset, self.distance);
        let q = self
            .camera
            .recover_position(&self.bbox, self.gt_offset, self.gt_distance);
        distance(p, q)
    }

    pub fn distance_error(&self) -> f64 {
        (self.distance - self.gt_distance).abs()
    }
}

pub fn aux_metrics(samples: &[AuxSample]) -> AuxReport {
    let pos: Vec<f64> = samples.iter().map(AuxSample::position_error).collect();
    let dist: Vec<f64> = samples.iter().map(AuxSample::distance_error).collect();
    let correct = samples.iter().filter(|s| s.class == s.gt_class).count();
    AuxReport {
        accuracy: ratio(correct, samples.len()),
        position: error_stats(&pos),
        distance: error_stats(&dist),
    }
}

/// Matching options at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Keypoint weight; zero ignores keypoints.
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            alpha: crate::matcher::DEFAULT_ALPHA,
            iterations: crate::matcher::DEFAULT_ITERATIONS,
        }
    }
}

/// Matches and auxiliary samples of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub matches: Matches,
    pub aux: Vec<AuxSample>,
}

/// Runs the network on a pair, fuses keypoint evidence with weight `alpha`
/// and extracts matches.
pub fn predict_pair<T: Real>(
    model: &Model<T>,
    pair: &ScenePair,
    opts: &MatchOptions,
) -> Result<PairPrediction> {
    let sample = eval_sample::<T>(pair, model.config.d_viz)?;
    let inf = model.infer(&sample.img1, &sample.img2)?;
    let kp = keypoint_scores::<T>(&pair.keypoints, &pair.boxes1(), &pair.boxes2());
    let assignment = fuse_and_match(&inf.scores, &kp, T::from_f64(opts.alpha), opts.iterations)?;
    let mut aux = Vec::with_capacity(pair.m() + pair.n());
    let dets = pair.detections1.iter().map(|d| (d, &pair.camera1));
    let dets = dets.chain(pair.detections2.iter().map(|d| (d, &pair.camera2)));
    for (k, (d, cam)) in dets.enumerate() {
        let row = inf.position.row(k);
        aux.push(AuxSample {
            camera: cam.clone(),
            bbox: d.bbox,
            gt_offset: d.offset,
            gt_distance: d.distance,
            gt_class: d.class,
            offset: [row[0].as_f64(), row[1].as_f64()],
            distance: row[2].as_f64(),
            class: argmax(inf.logits.row(k)),
        });
    }
    Ok(PairPrediction {
        matches: assignment.matches,
        aux,
    })
}

/// Object-wise and frame-wise reports plus auxiliary metrics of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub object_wise: MatchReport,
    pub frame_wise: MatchReport,
    pub aux: AuxReport,
}

pub fn summarize(
    pred: &[Vec<(usize, usize)>],
    pairs: &[ScenePair],
    aux: &[AuxSample],
) -> Result<EvalSummary> {
    let gt: Vec<_> = pairs.iter().map(|p| p.gt_matches.clone()).collect();
    let bins: Vec<_> = pairs.iter().map(|p| p.difficulty).collect();
    Ok(EvalSummary {
        object_wise: match_report(pred, &gt, &bins, MatchMode::ObjectWise)?,
        frame_wise: match_report(pred, &gt, &bins, MatchMode::FrameWise)?,
        aux: aux_metrics(aux),
    })
}

/// Predicts every pair and summarizes.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    pairs: &[ScenePair],
    opts: &MatchOptions,
) -> Result<(Vec<Matches>, EvalSummary)> {
    let mut matches = Vec::with_capacity(pairs.len());
    let mut aux = Vec::new();
    for p in pairs {
        let pp = predict_pair(model, p, opts)?;
        matches.push(pp.matches);
        aux.extend(pp.aux);
    }
    let pred: Vec<_> = matches.iter().map(|m| m.matches.clone()).collect();
    let summary = summarize(&pred, pairs, &aux)?;
    Ok((matches, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let gt = alloc::vec![alloc::vec![(0, 0), (1, 2)], alloc::vec![(2, 1)]];
        for mode in [MatchMode::ObjectWise, MatchMode::FrameWise] {
            let r = match_metrics(&gt, &gt, mode).unwrap();
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn half_right() {
        let gt = alloc::vec![alloc::vec![(0, 0), (1, 1)]];
        let pred = alloc::vec![alloc::vec![(0, 0), (1, 2)]];
        let r = match_metrics(&pred, &gt, MatchMode::ObjectWise).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn frame_wise_averages_per_pair() {
        let gt = alloc::vec![alloc::vec![(0, 0)], alloc::vec![(0, 0), (1, 1), (2, 2)]];
        let pred = alloc::vec![alloc::vec![(0, 0)], alloc::vec![(0, 1)]];
        let f = match_metrics(&pred, &gt, MatchMode::FrameWise).unwrap();
        assert!((f.f1 - 0.5).abs() < 1e-15);
        let o = match_metrics(&pred, &gt, MatchMode::ObjectWise).unwrap();
        assert!((o.f1 - 2.0 * 0.5 * 0.25 / 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_ground_truth_pairs_skip_recall() {
        let gt = alloc::vec![alloc::vec![(0, 0)], alloc::vec![]];
        let pred = alloc::vec![alloc::vec![(0, 0)], alloc::vec![(1, 1)]];
        let f = match_metrics(&pred, &gt, MatchMode::FrameWise).unwrap();
        assert_eq!(f.recall, 1.0);
        assert_eq!(f.precision, 0.5);
        assert_eq!(f.f1, 1.0);
    }

    #[test]
    fn duplicates_are_rejected() {
        let gt = alloc::vec![alloc::vec![(0, 0)]];
        let pred = alloc::vec![alloc::vec![(0, 0), (0, 1)]];
        assert!(match_metrics(&pred, &gt, MatchMode::ObjectWise).is_err());
    }

    #[test]
    fn assignment_rules() {
        let g = BBox::new(0.0, 0.0, 0.4, 0.4);
        assert_eq!(assign_detections_to_gt(&[g], &[g]), [Some(0)]);
        // IoU exactly 0.5: [0,0.4]x[0,0.4] vs [0,0.4]x[0,0.2] -> 0.08 / 0.16
        let half = BBox::new(0.0, 0.0, 0.4, 0.2);
        assert_eq!(g.iou(&half), 0.5);
        assert_eq!(assign_detections_to_gt(&[half], &[g]), [None]);
        let strong = BBox::new(0.0, 0.0, 0.4, 0.36);
        let weak = BBox::new(0.0, 0.0, 0.4, 0.25);
        assert!((g.iou(&strong) - 0.9).abs() < 1e-12);
        assert!(g.iou(&weak) > 0.6);
        assert_eq!(
            assign_detections_to_gt(&[weak, strong], &[g]),
            [None, Some(0)]
        );
        assert_eq!(assign_detections_to_gt(&[g, g], &[g]), [Some(0), None]);
    }

    #[test]
    fn error_stats_counting() {
        let s = error_stats(&[0.2, 0.8, 2.0]);
        assert!((s.within_0_5 - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.within_1_0 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.median, 0.8);
        assert!((s.mean - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_aux_predictions() {
        let camera = Camera::look_at([0.0, 0.0, 1.0], [1.0, 0.0, 1.0], 500.0, 640, 480).unwrap();
        let s = AuxSample {
            camera,
            bbox: BBox::new(0.2, 0.2, 0.5, 0.6),
            gt_offset: [0.01, -0.02],
            gt_distance: 3.0,
            gt_class: 2,
            offset: [0.01, -0.02],
            distance: 3.0,
            class: 2,
        };
        let r = aux_metrics(&[s.clone(), s]);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.position.mean, 0.0);
        assert_eq!((r.distance.within_0_5, r.position.within_1_0), (1.0, 1.0));
    }

    #[test]
    fn relabel_table() {
        let mut l = [0, 2, 1];
        relabel(&mut l, &[5, 6, 7]).unwrap();
        assert_eq!(l, [5, 7, 6]);
        assert!(relabel(&mut l, &[0]).is_err());
    }
}
