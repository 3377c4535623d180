//! Top-k ranking metrics and stability-based model selection.
//!
//! Rows are ranked by score (descending), then entity id and as-of date (ascending),
//! so the flagged set is a deterministic function of scores and row identity.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::EventLog;
use crate::features::FeatureMatrix;
use crate::labels::{LabelMatrix, PredictionPoint};
use crate::learners::{LearnerError, TrainedModel};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("k_pct must be in (0, 100], got {0}")]
    InvalidK(f64),
    #[error("scores ({scores}), labels ({labels}) and rows ({rows}) differ in length")]
    LengthMismatch {
        scores: usize,
        labels: usize,
        rows: usize,
    },
    #[error("cannot rank an empty set of rows")]
    Empty,
    #[error("score at row {0} is NaN")]
    NaNScore(usize),
    #[error("no evaluation records")]
    NoRecords,
    #[error("missing evaluations for (model_group, split_id): {}", format_pairs(.0))]
    Missing(Vec<(String, usize)>),
    #[error("record for {model_group} split {split_id} has no precision at {k_pct}%")]
    MissingK {
        model_group: String,
        split_id: usize,
        k_pct: f64,
    },
    #[error("invalid selection rule: {0}")]
    InvalidRule(String),
    #[error("feature rows and label rows differ at row {0}")]
    RowMismatch(usize),
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

fn format_pairs(pairs: &[(String, usize)]) -> String {
    pairs
        .iter()
        .map(|(g, s)| format!("({g}, {s})"))
        .collect::<Vec<_>>()
        .join(", ")
}

type Result<T> = std::result::Result<T, EvaluationError>;

fn check_k(k_pct: f64) -> Result<()> {
    if k_pct > 0.0 && k_pct <= 100.0 {
        Ok(())
    } else {
        Err(EvaluationError::InvalidK(k_pct))
    }
}

/// Rows flagged when acting on the top `k_pct` percent of `n`.
pub fn n_flagged(n: usize, k_pct: f64) -> usize {
    let raw = (k_pct * n as f64 / 100.0 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Row indices from highest to lowest priority.
pub fn rank_order(scores: &[f64], rows: &[PredictionPoint]) -> Result<Vec<usize>> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvaluationError::NaNScore(i));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| rows[*a].entity_id.cmp(&rows[*b].entity_id))
            .then_with(|| rows[*a].as_of.cmp(&rows[*b].as_of))
    });
    Ok(order)
}

fn check_lengths(scores: &[f64], labels: &[bool], rows: &[PredictionPoint]) -> Result<()> {
    if scores.len() != labels.len() || scores.len() != rows.len() {
        return Err(EvaluationError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
            rows: rows.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvaluationError::Empty);
    }
    Ok(())
}

/// Mask of rows in the top `k_pct` percent.
pub fn flag_top(scores: &[f64], rows: &[PredictionPoint], k_pct: f64) -> Result<Vec<bool>> {
    check_k(k_pct)?;
    if scores.len() != rows.len() {
        return Err(EvaluationError::LengthMismatch {
            scores: scores.len(),
            labels: rows.len(),
            rows: rows.len(),
        });
    }
    let mut flagged = vec![false; scores.len()];
    if scores.is_empty() {
        return Ok(flagged);
    }
    let order = rank_order(scores, rows)?;
    for i in &order[..n_flagged(scores.len(), k_pct)] {
        flagged[*i] = true;
    }
    Ok(flagged)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k_pct: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_flagged: usize,
    pub n_true: usize,
}

fn top_k_from_order(order: &[usize], labels: &[bool], total_pos: usize, k_pct: f64) -> TopK {
    let n = n_flagged(order.len(), k_pct);
    let n_true = order[..n].iter().filter(|i| labels[**i]).count();
    TopK {
        k_pct,
        precision: n_true as f64 / n as f64,
        recall: if total_pos == 0 {
            1.0
        } else {
            n_true as f64 / total_pos as f64
        },
        n_flagged: n,
        n_true,
    }
}

pub fn top_k(
    scores: &[f64],
    labels: &[bool],
    rows: &[PredictionPoint],
    k_pct: f64,
) -> Result<TopK> {
    Ok(pr_policy_curve(scores, labels, rows, &[k_pct])?[0])
}

/// `(value, n_flagged, n_true)` for the top `k_pct` percent.
pub fn precision_at_pct(
    scores: &[f64],
    labels: &[bool],
    rows: &[PredictionPoint],
    k_pct: f64,
) -> Result<(f64, usize, usize)> {
    let t = top_k(scores, labels, rows, k_pct)?;
    Ok((t.precision, t.n_flagged, t.n_true))
}

/// Share of all positives in the top `k_pct` percent; 1.0 when there are none.
pub fn recall_at_pct(
    scores: &[f64],
    labels: &[bool],
    rows: &[PredictionPoint],
    k_pct: f64,
) -> Result<f64> {
    Ok(top_k(scores, labels, rows, k_pct)?.recall)
}

/// Precision and recall at every `k` of the grid, sorting once.
pub fn pr_policy_curve(
    scores: &[f64],
    labels: &[bool],
    rows: &[PredictionPoint],
    k_grid: &[f64],
) -> Result<Vec<TopK>> {
    check_lengths(scores, labels, rows)?;
    for k in k_grid {
        check_k(*k)?;
    }
    let order = rank_order(scores, rows)?;
    let total_pos = labels.iter().filter(|l| **l).count();
    Ok(k_grid
        .iter()
        .map(|k| top_k_from_order(&order, labels, total_pos, *k))
        .collect())
}

pub fn write_policy_curve_csv<W: Write>(curve: &[TopK], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k_pct", "precision", "recall", "n_flagged", "n_true"])?;
    for t in curve {
        w.write_record([
            t.k_pct.to_string(),
            t.precision.to_string(),
            t.recall.to_string(),
            t.n_flagged.to_string(),
            t.n_true.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub model_group: String,
    pub split_id: usize,
    pub n_rows: usize,
    pub prevalence: f64,
    pub metrics: Vec<TopK>,
}

impl EvaluationRecord {
    pub fn at(&self, k_pct: f64) -> Option<&TopK> {
        self.metrics
            .iter()
            .find(|m| (m.k_pct - k_pct).abs() < 1e-12)
    }

    pub fn precision_at(&self, k_pct: f64) -> Option<f64> {
        self.at(k_pct).map(|m| m.precision)
    }
}

pub fn evaluate_scores(
    model_group: &str,
    split_id: usize,
    scores: &[f64],
    y: &LabelMatrix,
    k_grid: &[f64],
) -> Result<EvaluationRecord> {
    let metrics = pr_policy_curve(scores, &y.labels, &y.rows, k_grid)?;
    Ok(EvaluationRecord {
        model_group: model_group.to_string(),
        split_id,
        n_rows: y.len(),
        prevalence: y.prevalence(),
        metrics,
    })
}

/// Scores the test matrix and computes metrics at every `k` in `k_grid`.
pub fn evaluate_split(
    model: &TrainedModel,
    x_test: &FeatureMatrix,
    y_test: &LabelMatrix,
    log: &EventLog,
    split_id: usize,
    k_grid: &[f64],
) -> Result<EvaluationRecord> {
    if let Some(i) = x_test
        .rows
        .iter()
        .zip(&y_test.rows)
        .position(|(a, b)| a.key() != b.key())
    {
        return Err(EvaluationError::RowMismatch(i));
    }
    if x_test.n_rows() != y_test.len() {
        return Err(EvaluationError::RowMismatch(
            x_test.n_rows().min(y_test.len()),
        ));
    }
    let scores = model.score(x_test, log)?;
    evaluate_scores(&model.model_group, split_id, &scores, y_test, k_grid)
}

pub fn write_evaluations_csv<W: Write>(records: &[EvaluationRecord], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "model_group",
        "split_id",
        "k_pct",
        "precision",
        "recall",
        "n_flagged",
        "n_true",
        "prevalence",
    ])?;
    for r in records {
        for m in &r.metrics {
            w.write_record([
                r.model_group.clone(),
                r.split_id.to_string(),
                m.k_pct.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.n_flagged.to_string(),
                m.n_true.to_string(),
                r.prevalence.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn default_band() -> f64 {
    0.05
}

fn default_last_n() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionRule {
    pub k_pct: f64,
    /// Absolute precision distance from the per-split best that still earns a point.
    #[serde(default = "default_band")]
    pub regret_band: f64,
    #[serde(default = "default_last_n")]
    pub last_n_periods: usize,
}

impl SelectionRule {
    pub fn new(k_pct: f64) -> Self {
        Self {
            k_pct,
            regret_band: default_band(),
            last_n_periods: default_last_n(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_k(self.k_pct)?;
        if !(self.regret_band >= 0.0) {
            return Err(EvaluationError::InvalidRule(
                "regret_band must be >= 0".into(),
            ));
        }
        if self.last_n_periods == 0 {
            return Err(EvaluationError::InvalidRule(
                "last_n_periods must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGroup {
    pub model_group: String,
    pub points: usize,
    pub mean_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub model_group: String,
    /// Split ids that formed the selection window, oldest first.
    pub window: Vec<usize>,
    /// Every candidate, best first.
    pub ranking: Vec<RankedGroup>,
}

/// The last `n` split ids present in `records`, oldest first.
pub fn selection_window(records: &[EvaluationRecord], n: usize) -> Vec<usize> {
    let ids: BTreeSet<usize> = records.iter().map(|r| r.split_id).collect();
    let ids: Vec<usize> = ids.into_iter().collect();
    ids[ids.len().saturating_sub(n)..].to_vec()
}

/// Ranks the model groups in `records` by window points, then mean precision, then id.
pub fn rank_model_groups(records: &[EvaluationRecord], rule: &SelectionRule) -> Result<Selection> {
    rule.validate()?;
    if records.is_empty() {
        return Err(EvaluationError::NoRecords);
    }
    let window = selection_window(records, rule.last_n_periods);
    let groups: BTreeSet<&str> = records.iter().map(|r| r.model_group.as_str()).collect();
    let mut precision: BTreeMap<(&str, usize), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| window.contains(&r.split_id)) {
        let p = r
            .precision_at(rule.k_pct)
            .ok_or_else(|| EvaluationError::MissingK {
                model_group: r.model_group.clone(),
                split_id: r.split_id,
                k_pct: rule.k_pct,
            })?;
        precision.insert((r.model_group.as_str(), r.split_id), p);
    }
    let missing: Vec<(String, usize)> = groups
        .iter()
        .flat_map(|g| window.iter().map(move |s| (*g, *s)))
        .filter(|key| !precision.contains_key(key))
        .map(|(g, s)| (g.to_string(), s))
        .collect();
    if !missing.is_empty() {
        return Err(EvaluationError::Missing(missing));
    }
    let mut points: BTreeMap<&str, usize> = groups.iter().map(|g| (*g, 0)).collect();
    for s in &window {
        let best = groups
            .iter()
            .map(|g| precision[&(*g, *s)])
            .fold(f64::NEG_INFINITY, f64::max);
        for g in &groups {
            if precision[&(*g, *s)] >= best - rule.regret_band - 1e-12 {
                *points.get_mut(g).expect("group present") += 1;
            }
        }
    }
    let mut ranking: Vec<RankedGroup> = groups
        .iter()
        .map(|g| RankedGroup {
            model_group: g.to_string(),
            points: points[g],
            mean_precision: window.iter().map(|s| precision[&(*g, *s)]).sum::<f64>()
                / window.len() as f64,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.points
            .cmp(&a.points)
            .then_with(|| b.mean_precision.total_cmp(&a.mean_precision))
            .then_with(|| a.model_group.cmp(&b.model_group))
    });
    Ok(Selection {
        model_group: ranking[0].model_group.clone(),
        window,
        ranking,
    })
}

/// The model group that most often lands within the regret band of the per-split best.
pub fn select_model(records: &[EvaluationRecord], rule: &SelectionRule) -> Result<String> {
    Ok(rank_model_groups(records, rule)?.model_group)
}
