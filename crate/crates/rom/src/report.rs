//! Evaluation reports as JSON and as an aligned text table.

use std::collections::HashMap;
use std::fmt::Write as _;

use rom_core::eval::{aux_metrics, match_metrics, AuxReport, MatchMode, Prf};
use rom_core::scene::{Difficulty, ScenePair};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::MatchRecord;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub pairs: usize,
    pub object_wise: Prf,
    pub frame_wise: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSection {
    pub bin: Difficulty,
    #[serde(flatten)]
    pub section: Section,
}

/// Field order is the JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub overall: Section,
    /// Present with `--by-difficulty`; populated bins only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<BinSection>>,
    /// Present when every prediction carries auxiliary outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<AuxReport>,
}

fn section(pred: &[Vec<(usize, usize)>], gt: &[Vec<(usize, usize)>]) -> Result<Section> {
    Ok(Section {
        pairs: pred.len(),
        object_wise: match_metrics(pred, gt, MatchMode::ObjectWise)?,
        frame_wise: match_metrics(pred, gt, MatchMode::FrameWise)?,
    })
}

/// Scores `records` against `pairs`; each pair needs exactly one record.
pub fn build_report(
    pairs: &[ScenePair],
    records: &[MatchRecord],
    by_difficulty: bool,
) -> Result<Report> {
    let mut by_id: HashMap<u64, &MatchRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.pair_id, r).is_some() {
            return Err(Error::Usage(format!("pair {} predicted twice", r.pair_id)));
        }
    }
    if records.len() != pairs.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} corpus pairs",
            records.len(),
            pairs.len()
        )));
    }
    let mut ordered = Vec::with_capacity(pairs.len());
    for p in pairs {
        let r = by_id
            .get(&p.pair_id)
            .ok_or_else(|| Error::Usage(format!("no prediction for pair {}", p.pair_id)))?;
        ordered.push(*r);
    }
    let pred: Vec<_> = ordered.iter().map(|r| r.matches.clone()).collect();
    let gt: Vec<_> = pairs.iter().map(|p| p.gt_matches.clone()).collect();
    let overall = section(&pred, &gt)?;
    let bins = if by_difficulty {
        let mut out = Vec::new();
        for d in Difficulty::ALL {
            let idx: Vec<usize> = (0..pairs.len())
                .filter(|&k| pairs[k].difficulty == d)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let p: Vec<_> = idx.iter().map(|&k| pred[k].clone()).collect();
            let g: Vec<_> = idx.iter().map(|&k| gt[k].clone()).collect();
            out.push(BinSection {
                bin: d,
                section: section(&p, &g)?,
            });
        }
        Some(out)
    } else {
        None
    };
    let mut samples = Vec::new();
    let mut complete = !pairs.is_empty();
    for (r, p) in ordered.iter().zip(pairs) {
        match r.aux_samples(p) {
            Some(s) => samples.extend(s),
            None => complete = false,
        }
    }
    Ok(Report {
        schema: REPORT_SCHEMA,
        overall,
        bins,
        aux: complete.then(|| aux_metrics(&samples)),
    })
}

pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Bins as column groups, object-wise and frame-wise rows, then the
/// auxiliary metrics.
pub fn render_text(report: &Report) -> String {
    let mut cols: Vec<(&str, &Section)> = vec![("all", &report.overall)];
    if let Some(bins) = &report.bins {
        cols.extend(bins.iter().map(|b| (b.bin.name(), &b.section)));
    }
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "");
    for (name, s) in &cols {
        let _ = write!(out, " | {:^20}", format!("{name} ({})", s.pairs));
    }
    out.push('\n');
    let _ = write!(out, "{:<12}", "mode");
    for _ in &cols {
        let _ = write!(out, " | {:>6} {:>6} {:>6}", "P", "R", "F1");
    }
    out.push('\n');
    let width = 12 + cols.len() * 23;
    out.push_str(&"-".repeat(width));
    out.push('\n');
    for mode in [MatchMode::ObjectWise, MatchMode::FrameWise] {
        let _ = write!(out, "{:<12}", mode.name());
        for (_, s) in &cols {
            let p = match mode {
                MatchMode::ObjectWise => &s.object_wise,
                MatchMode::FrameWise => &s.frame_wise,
            };
            let _ = write!(
                out,
                " | {:>6.3} {:>6.3} {:>6.3}",
                p.precision, p.recall, p.f1
            );
        }
        out.push('\n');
    }
    if let Some(aux) = &report.aux {
        out.push('\n');
        let _ = writeln!(out, "classification accuracy {:.3}", aux.accuracy);
        let _ = writeln!(
            out,
            "{:<12} | {:>8} {:>8} {:>8} {:>8}",
            "error [m]", "mean", "median", "<=0.5", "<=1.0"
        );
        for (name, e) in [("position", &aux.position), ("distance", &aux.distance)] {
            let _ = writeln!(
                out,
                "{:<12} | {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
                name, e.mean, e.median, e.within_0_5, e.within_1_0
            );
        }
    }
    out.lines()
        .map(|l| l.trim_end().to_string() + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rom_core::scene::{generate_corpus, SceneConfig};

    fn pairs() -> Vec<ScenePair> {
        let cfg = SceneConfig {
            d_viz: 4,
            ..SceneConfig::default()
        };
        generate_corpus(&cfg, 6, 2).unwrap()
    }

    #[test]
    fn ground_truth_predictions_score_one() {
        let p = pairs();
        let recs: Vec<_> = p.iter().rev().map(MatchRecord::ground_truth).collect();
        let r = build_report(&p, &recs, true).unwrap();
        let bins = r.bins.as_ref().unwrap();
        assert_eq!(bins.len(), 3);
        for s in std::iter::once(&r.overall).chain(bins.iter().map(|b| &b.section)) {
            assert_eq!(s.object_wise.f1, 1.0);
            assert_eq!(s.frame_wise.f1, 1.0);
        }
        assert!(r.aux.is_none());
        let text = render_text(&r);
        assert!(text.contains("very_hard (2)"));
        assert!(report_json(&r).find("\"schema\"") < report_json(&r).find("\"overall\""));
    }

    #[test]
    fn missing_or_duplicate_predictions_are_rejected() {
        let p = pairs();
        let mut recs: Vec<_> = p.iter().map(MatchRecord::ground_truth).collect();
        recs.pop();
        assert!(build_report(&p, &recs, false).is_err());
        recs.push(recs[0].clone());
        assert!(build_report(&p, &recs, false).is_err());
    }

    #[test]
    fn text_rows_align() {
        let p = pairs();
        let recs: Vec<_> = p.iter().map(MatchRecord::ground_truth).collect();
        let text = render_text(&build_report(&p, &recs, true).unwrap());
        let lines: Vec<&str> = text.lines().take(5).collect();
        let bars = |l: &str| l.match_indices('|').map(|(k, _)| k).collect::<Vec<_>>();
        assert!(lines
            .iter()
            .filter(|l| l.contains('|'))
            .all(|l| bars(l) == bars(lines[0])));
    }
}
