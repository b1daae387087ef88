//! Equal error rate over scored trials, and the plain-text score file.
//!
//! Scores are oriented so that higher means more deepfake-like. At a
//! threshold `t` a trial is flagged deepfake when `score >= t`, giving
//!
//! * FAR: fraction of bonafide trials flagged deepfake,
//! * FRR: fraction of deepfake trials not flagged.
//!
//! Swapping which error is called which does not move the crossing point.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    ids: Vec<String>,
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoreSet {
    /// Trials with generated ids.
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        let ids = (0..scores.len()).map(|i| format!("trial-{i}")).collect();
        Self::with_ids(ids, scores, labels)
    }

    pub fn with_ids(ids: Vec<String>, scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::dim("score set", &[ids.len(), scores.len()], &[labels.len()]));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("score of trial {}", ids[i])));
        }
        Ok(Self { ids, scores, labels })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let deepfake = self.labels.iter().filter(|&&l| l == Label::Deepfake).count();
        let bonafide = self.labels.len() - deepfake;
        if bonafide == 0 || deepfake == 0 {
            return Err(Error::MetricUndefined(format!(
                "EER needs both classes, got {bonafide} bonafide and {deepfake} deepfake"
            )));
        }
        Ok((bonafide, deepfake))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at `-inf`, every distinct score in ascending order, and
/// `+inf`. FAR is non-increasing and FRR non-decreasing along the list.
pub fn roc_points(set: &ScoreSet) -> Result<Vec<RocPoint>> {
    let (n_bona, n_fake) = set.class_counts()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    let mut points = Vec::with_capacity(set.len() + 2);
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    });
    // Trials strictly below the current threshold, per class.
    let (mut bona_below, mut fake_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = set.scores[order[i]];
        points.push(RocPoint {
            threshold,
            far: (n_bona - bona_below) as f64 / n_bona as f64,
            frr: fake_below as f64 / n_fake as f64,
        });
        while i < order.len() && set.scores[order[i]] == threshold {
            match set.labels[order[i]] {
                Label::Bonafide => bona_below += 1,
                Label::Deepfake => fake_below += 1,
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Equal error rate in `[0, 1]`. When no operating point has FAR == FRR the
/// crossing is linearly interpolated between the two points bracketing it.
pub fn eer(set: &ScoreSet) -> Result<f64> {
    let points = roc_points(set)?;
    Ok(crossing(&points))
}

/// Crossing of FAR and FRR along operating points ordered by threshold.
pub(crate) fn crossing(points: &[RocPoint]) -> f64 {
    let mut prev = points[0];
    for &p in points {
        let gap = p.far - p.frr;
        if gap == 0.0 {
            return p.far;
        }
        if gap < 0.0 {
            let prev_gap = prev.far - prev.frr;
            let alpha = prev_gap / (prev_gap - gap);
            return prev.far + alpha * (p.far - prev.far);
        }
        prev = p;
    }
    unreachable!("the +inf sentinel always has FAR < FRR")
}

/// Renders `<id> <label> <score>` lines.
pub fn format_scores(set: &ScoreSet) -> String {
    let mut out = String::new();
    for ((id, label), score) in set.ids.iter().zip(&set.labels).zip(&set.scores) {
        writeln!(out, "{id} {label} {score}").expect("writing to a String");
    }
    out
}

pub fn write_scores(set: &ScoreSet, path: &Path) -> Result<()> {
    std::fs::write(path, format_scores(set)).map_err(|e| Error::io(path, e))
}

/// Parses score-file text; `path` only labels error messages.
pub fn parse_scores(text: &str, path: &Path) -> Result<ScoreSet> {
    let (mut ids, mut scores, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: String| Error::format(path, format!("line {}: {why}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, label, score] = fields[..] else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let label: Label = label
            .parse()
            .map_err(|_| bad(format!("label must be bonafide or deepfake, got {label:?}")))?;
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| bad(format!("score {score:?} is not a finite decimal")))?;
        ids.push(id.to_string());
        labels.push(label);
        scores.push(score);
    }
    ScoreSet::with_ids(ids, scores, labels)
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}
