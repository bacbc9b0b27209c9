//! Keypoint-match input files and match output files, both JSON Lines.

use std::collections::HashMap;
use std::path::Path;

use rom_core::eval::{AuxSample, MatchOptions};
use rom_core::matcher::{fuse_and_match, keypoint_scores, Matches};
use rom_core::model::{ImageInput, Model};
use rom_core::scene::{KeypointMatch, ScenePair};
use rom_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

pub const MATCH_SCHEMA: u32 = 1;

/// Keypoint matches of one pair as `[[u1, v1], [u2, v2]]` in normalized
/// image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointRecord {
    pub pair_id: u64,
    pub keypoints: Vec<[[f64; 2]; 2]>,
}

impl KeypointRecord {
    pub fn from_pair(pair: &ScenePair) -> Self {
        KeypointRecord {
            pair_id: pair.pair_id,
            keypoints: pair.keypoints.iter().map(|k| [k.p1, k.p2]).collect(),
        }
    }

    pub fn matches(&self) -> Vec<KeypointMatch> {
        self.keypoints
            .iter()
            .map(|&[p1, p2]| KeypointMatch::new(p1, p2))
            .collect()
    }
}

pub fn write_keypoints(path: &Path, records: &[KeypointRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Keypoint lists by pair id; a repeated id is an error.
pub fn read_keypoints(path: &Path) -> Result<HashMap<u64, Vec<KeypointMatch>>> {
    let records: Vec<KeypointRecord> = read_jsonl(path)?;
    let mut out = HashMap::with_capacity(records.len());
    for r in records {
        if out.insert(r.pair_id, r.matches()).is_some() {
            return Err(Error::format(
                path,
                format!("pair {} listed twice", r.pair_id),
            ));
        }
    }
    Ok(out)
}

/// Auxiliary-head outputs for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    pub class: usize,
    pub offset: [f64; 2],
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub alpha: f64,
    pub iterations: usize,
    /// Dustbin score of the object-score matrix.
    pub dustbin: f64,
    /// Soft-assignment mass of each reported match, in match order.
    pub match_probability: Vec<f64>,
    pub mean_match_probability: f64,
}

/// Matching result for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub schema: u32,
    pub pair_id: u64,
    pub matches: Vec<(usize, usize)>,
    pub unmatched_1: Vec<usize>,
    pub unmatched_2: Vec<usize>,
    pub scores: ScoreSummary,
    /// Augmented object scores, `(M+1) x (N+1)`, dustbins last. Needed by
    /// `fuse`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_scores: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects_1: Vec<ObjectPrediction>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objects_2: Vec<ObjectPrediction>,
}

impl MatchRecord {
    /// A record listing exactly the ground-truth matches of `pair`.
    pub fn ground_truth(pair: &ScenePair) -> Self {
        MatchRecord {
            schema: MATCH_SCHEMA,
            pair_id: pair.pair_id,
            matches: pair.gt_matches.clone(),
            unmatched_1: pair.unmatched1(),
            unmatched_2: pair.unmatched2(),
            scores: ScoreSummary {
                alpha: 0.0,
                iterations: 0,
                dustbin: 0.0,
                match_probability: vec![1.0; pair.gt_matches.len()],
                mean_match_probability: 1.0,
            },
            object_scores: None,
            objects_1: Vec::new(),
            objects_2: Vec::new(),
        }
    }

    pub fn to_matches(&self) -> Matches {
        Matches {
            matches: self.matches.clone(),
            unmatched1: self.unmatched_1.clone(),
            unmatched2: self.unmatched_2.clone(),
        }
    }

    /// Auxiliary samples against the ground truth of `pair`, if this record
    /// carries object predictions for every detection.
    pub fn aux_samples(&self, pair: &ScenePair) -> Option<Vec<AuxSample>> {
        if self.objects_1.len() != pair.m() || self.objects_2.len() != pair.n() {
            return None;
        }
        let one = pair
            .detections1
            .iter()
            .zip(&self.objects_1)
            .map(|(d, o)| (d, o, &pair.camera1));
        let two = pair
            .detections2
            .iter()
            .zip(&self.objects_2)
            .map(|(d, o)| (d, o, &pair.camera2));
        Some(
            one.chain(two)
                .map(|(d, o, cam)| AuxSample {
                    camera: cam.clone(),
                    bbox: d.bbox,
                    gt_offset: d.offset,
                    gt_distance: d.distance,
                    gt_class: d.class,
                    offset: o.offset,
                    distance: o.distance,
                    class: o.class,
                })
                .collect(),
        )
    }
}

pub fn write_matches(path: &Path, records: &[MatchRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_matches(path: &Path) -> Result<Vec<MatchRecord>> {
    let records: Vec<MatchRecord> = read_jsonl(path)?;
    for r in &records {
        if r.schema != MATCH_SCHEMA {
            return Err(Error::format(
                path,
                format!(
                    "pair {}: schema {} (expected {MATCH_SCHEMA})",
                    r.pair_id, r.schema
                ),
            ));
        }
    }
    Ok(records)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// Sinkhorn on `object_scores + alpha * keypoint scores` in 64-bit, then
/// mutual-argmax extraction.
pub fn fused_record(
    pair: &ScenePair,
    object_scores: &Tensor<f64>,
    keypoints: &[KeypointMatch],
    opts: &MatchOptions,
) -> Result<MatchRecord> {
    let kp = keypoint_scores::<f64>(keypoints, &pair.boxes1(), &pair.boxes2());
    let a = fuse_and_match(object_scores, &kp, opts.alpha, opts.iterations)?;
    let probs: Vec<f64> = a
        .matches
        .matches
        .iter()
        .map(|&(i, j)| a.p_bar[(i, j)])
        .collect();
    let mean = if probs.is_empty() {
        0.0
    } else {
        probs.iter().sum::<f64>() / probs.len() as f64
    };
    let (m, n) = (pair.m(), pair.n());
    Ok(MatchRecord {
        schema: MATCH_SCHEMA,
        pair_id: pair.pair_id,
        matches: a.matches.matches,
        unmatched_1: a.matches.unmatched1,
        unmatched_2: a.matches.unmatched2,
        scores: ScoreSummary {
            alpha: opts.alpha,
            iterations: opts.iterations,
            dustbin: object_scores[(m, n)],
            match_probability: probs,
            mean_match_probability: mean,
        },
        object_scores: Some(object_scores.to_f64_rows()),
        objects_1: Vec::new(),
        objects_2: Vec::new(),
    })
}

/// Runs the network on `pair` and fuses the given keypoints.
pub fn predict_record(
    model: &Model<f32>,
    pair: &ScenePair,
    keypoints: &[KeypointMatch],
    opts: &MatchOptions,
) -> Result<MatchRecord> {
    let d = model.config.d_viz;
    let img1 = ImageInput::from_f32_rows(&pair.features1, pair.boxes1(), d)?;
    let img2 = ImageInput::from_f32_rows(&pair.features2, pair.boxes2(), d)?;
    let inf = model.infer(&img1, &img2)?;
    let mut rec = fused_record(pair, &inf.scores.cast::<f64>(), keypoints, opts)?;
    let objects: Vec<ObjectPrediction> = (0..pair.m() + pair.n())
        .map(|k| {
            let p = inf.position.row(k);
            ObjectPrediction {
                class: argmax(inf.logits.row(k)),
                offset: [p[0] as f64, p[1] as f64],
                distance: p[2] as f64,
            }
        })
        .collect();
    rec.objects_2 = objects[pair.m()..].to_vec();
    rec.objects_1 = objects[..pair.m()].to_vec();
    Ok(rec)
}

/// Re-fuses a match record's object scores with new keypoints.
pub fn refuse_record(
    record: &MatchRecord,
    pair: &ScenePair,
    keypoints: &[KeypointMatch],
    opts: &MatchOptions,
) -> Result<MatchRecord> {
    let rows = record.object_scores.as_ref().ok_or_else(|| {
        Error::Usage(format!(
            "pair {} has no object scores to fuse",
            record.pair_id
        ))
    })?;
    let scores = Tensor::from_f64_rows(rows)?;
    if scores.shape() != (pair.m() + 1, pair.n() + 1) {
        return Err(Error::Core(rom_core::Error::Shape {
            op: "fuse",
            lhs: scores.shape_string(),
            rhs: format!("{}x{}", pair.m() + 1, pair.n() + 1),
        }));
    }
    let mut out = fused_record(pair, &scores, keypoints, opts)?;
    out.objects_1 = record.objects_1.clone();
    out.objects_2 = record.objects_2.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rom_core::model::ModelConfig;
    use rom_core::scene::{generate_corpus, SceneConfig};

    fn setup() -> (Model<f32>, Vec<ScenePair>) {
        let cfg = SceneConfig {
            d_viz: 8,
            num_classes: 4,
            ..SceneConfig::default()
        };
        (
            Model::new(ModelConfig::tiny(), 1).unwrap(),
            generate_corpus(&cfg, 3, 5).unwrap(),
        )
    }

    #[test]
    fn keypoint_file_round_trip() {
        let (_, pairs) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.jsonl");
        let recs: Vec<_> = pairs.iter().map(KeypointRecord::from_pair).collect();
        write_keypoints(&path, &recs).unwrap();
        let back = read_keypoints(&path).unwrap();
        for p in &pairs {
            assert_eq!(back[&p.pair_id], p.keypoints);
        }
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"pair_id\":0,\"keypoints\":[[["));
    }

    #[test]
    fn refusing_with_same_keypoints_reproduces_match() {
        let (model, pairs) = setup();
        let opts = MatchOptions::default();
        for p in &pairs {
            let rec = predict_record(&model, p, &p.keypoints, &opts).unwrap();
            assert_eq!(rec.objects_1.len(), p.m());
            assert_eq!(refuse_record(&rec, p, &p.keypoints, &opts).unwrap(), rec);
        }
    }

    #[test]
    fn match_file_round_trip() {
        let (model, pairs) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs: Vec<_> = pairs
            .iter()
            .map(|p| predict_record(&model, p, &p.keypoints, &MatchOptions::default()).unwrap())
            .collect();
        write_matches(&path, &recs).unwrap();
        assert_eq!(read_matches(&path).unwrap(), recs);
    }

    #[test]
    fn duplicate_keypoint_pair_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.jsonl");
        let r = KeypointRecord {
            pair_id: 3,
            keypoints: Vec::new(),
        };
        write_keypoints(&path, &[r.clone(), r]).unwrap();
        assert!(read_keypoints(&path).is_err());
    }
}
