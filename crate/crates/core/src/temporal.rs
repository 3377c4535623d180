//! Temporal train/test splits and leakage checks.
//!
//! Test periods start `min_train_history` after the feature start and advance by the
//! update frequency. Training uses every as-of date whose outcome window closes by the
//! test start: `[feature_start, test_start - label_window]`.

use std::io::Write;

use chrono::{Duration, Months, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EntityId, EventLog};
use crate::features::{
    EncoderState, FeatureBuilder, FeatureConfig, FeatureError, FeatureMatrix, ZipAttributes,
};
use crate::labels::{LabelMatrix, PredictionPoint};

#[derive(Debug, Error, PartialEq)]
pub enum TemporalError {
    #[error("invalid temporal config: {0}")]
    InvalidConfig(String),
    #[error("no feasible split: data must extend to at least {earliest_data_end} (currently {data_end})")]
    Infeasible {
        data_end: NaiveDate,
        earliest_data_end: NaiveDate,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateFrequency {
    Monthly,
    Yearly,
}

impl UpdateFrequency {
    pub fn months(self) -> u32 {
        match self {
            UpdateFrequency::Monthly => 1,
            UpdateFrequency::Yearly => 12,
        }
    }
}

fn default_min_history() -> u32 {
    12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub feature_start: NaiveDate,
    pub data_end: NaiveDate,
    pub update_frequency: UpdateFrequency,
    /// Length of each test period; defaults to the update frequency.
    #[serde(default)]
    pub test_span_months: Option<u32>,
    pub label_window_days: i64,
    #[serde(default = "default_min_history")]
    pub min_train_history_months: u32,
    /// Train on only the most recent N months instead of all history.
    #[serde(default)]
    pub sliding_window_months: Option<u32>,
}

impl TemporalConfig {
    pub fn new(
        feature_start: NaiveDate,
        data_end: NaiveDate,
        update_frequency: UpdateFrequency,
        label_window_days: i64,
    ) -> Self {
        Self {
            feature_start,
            data_end,
            update_frequency,
            test_span_months: None,
            label_window_days,
            min_train_history_months: default_min_history(),
            sliding_window_months: None,
        }
    }

    pub fn test_span(&self) -> u32 {
        self.test_span_months
            .unwrap_or(self.update_frequency.months())
    }

    pub fn validate(&self) -> Result<(), TemporalError> {
        let bad = |m: &str| Err(TemporalError::InvalidConfig(m.to_string()));
        if self.feature_start >= self.data_end {
            return bad("feature_start must precede data_end");
        }
        if self.label_window_days <= 0 {
            return bad("label_window_days must be positive");
        }
        if self.test_span() == 0 {
            return bad("test_span_months must be positive");
        }
        if self.sliding_window_months == Some(0) {
            return bad("sliding_window_months must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Period {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSplit {
    pub split_id: usize,
    pub train_period: Period,
    pub test_period: Period,
    /// Last day a training outcome window may reach.
    pub train_label_cutoff: NaiveDate,
    /// Last day a test outcome window reaches.
    pub test_label_cutoff: NaiveDate,
    pub label_window_days: i64,
}

impl TimeSplit {
    fn window(&self) -> Duration {
        Duration::days(self.label_window_days)
    }

    /// Indices of rows usable for training. Rows whose window crosses the test start are dropped.
    pub fn train_indices(&self, rows: &[PredictionPoint]) -> Vec<usize> {
        rows.iter()
            .enumerate()
            .filter(|(_, r)| {
                self.train_period.contains(r.as_of)
                    && r.as_of + self.window() <= self.train_label_cutoff
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn test_indices(&self, rows: &[PredictionPoint]) -> Vec<usize> {
        rows.iter()
            .enumerate()
            .filter(|(_, r)| self.test_period.contains(r.as_of))
            .map(|(i, _)| i)
            .collect()
    }
}

fn add_months(date: NaiveDate, months: u32) -> NaiveDate {
    date.checked_add_months(Months::new(months))
        .expect("date arithmetic within chrono range")
}

pub fn generate_splits(config: &TemporalConfig) -> Result<Vec<TimeSplit>, TemporalError> {
    config.validate()?;
    let window = Duration::days(config.label_window_days);
    let first_test = add_months(config.feature_start, config.min_train_history_months);
    let mut splits = Vec::new();
    let mut earliest_data_end = None;
    for k in 0.. {
        let test_start = add_months(first_test, k * config.update_frequency.months());
        let test_end = add_months(test_start, config.test_span()) - Duration::days(1);
        let test_label_cutoff = test_end + window;
        let train_end = test_start - window;
        if train_end < config.feature_start {
            // Not enough history for even one observable training outcome yet.
            continue;
        }
        if test_label_cutoff > config.data_end {
            earliest_data_end.get_or_insert(test_label_cutoff);
            break;
        }
        let train_start = match config.sliding_window_months {
            Some(m) => config.feature_start.max(
                test_start
                    .checked_sub_months(Months::new(m))
                    .expect("date in range"),
            ),
            None => config.feature_start,
        };
        splits.push(TimeSplit {
            split_id: splits.len(),
            train_period: Period {
                start: train_start,
                end: train_end,
            },
            test_period: Period {
                start: test_start,
                end: test_end,
            },
            train_label_cutoff: test_start,
            test_label_cutoff,
            label_window_days: config.label_window_days,
        });
    }
    if splits.is_empty() {
        return Err(TemporalError::Infeasible {
            data_end: config.data_end,
            earliest_data_end: earliest_data_end.expect("loop exits through the cutoff branch"),
        });
    }
    Ok(splits)
}

pub fn write_splits_csv<W: Write>(splits: &[TimeSplit], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "split_id",
        "train_start",
        "train_end",
        "test_start",
        "test_end",
    ])?;
    for s in splits {
        w.write_record([
            s.split_id.to_string(),
            s.train_period.start.to_string(),
            s.train_period.end.to_string(),
            s.test_period.start.to_string(),
            s.test_period.end.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakageKind {
    /// A training outcome window reaches past the test start.
    LabelWindow,
    /// A feature differs when recomputed on the log censored at the row's as-of date.
    FeatureRecompute,
    /// The encoder was fitted on a test row.
    EncoderFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageFinding {
    pub split_id: usize,
    pub kind: LeakageKind,
    pub entity_id: EntityId,
    pub as_of: NaiveDate,
    pub detail: String,
}

/// What is needed to recompute sampled rows from a censored log.
pub struct Recompute<'a> {
    pub config: &'a FeatureConfig,
    pub zip: Option<&'a ZipAttributes>,
    pub log: &'a EventLog,
    /// Rows per matrix to recompute (evenly spaced).
    pub sample: usize,
}

/// Audits one split. An empty result means the split is clean.
pub fn check_leakage(
    split: &TimeSplit,
    train_labels: &LabelMatrix,
    train_features: &FeatureMatrix,
    test_features: &FeatureMatrix,
    encoder: &EncoderState,
    recompute: Option<&Recompute<'_>>,
) -> Result<Vec<LeakageFinding>, FeatureError> {
    let mut findings = Vec::new();
    let window = Duration::days(train_labels.spec.window_days);
    for row in &train_labels.rows {
        let end = row.as_of + window;
        if end > split.test_period.start {
            findings.push(LeakageFinding {
                split_id: split.split_id,
                kind: LeakageKind::LabelWindow,
                entity_id: row.entity_id.clone(),
                as_of: row.as_of,
                detail: format!(
                    "outcome window ends {end}, after test start {}",
                    split.test_period.start
                ),
            });
        }
    }
    if let Some(re) = recompute {
        for matrix in [train_features, test_features] {
            recompute_rows(split, matrix, encoder, re, &mut findings)?;
        }
    }
    for row in &test_features.rows {
        if encoder.was_fitted_on(row) {
            findings.push(LeakageFinding {
                split_id: split.split_id,
                kind: LeakageKind::EncoderFit,
                entity_id: row.entity_id.clone(),
                as_of: row.as_of,
                detail: "encoder fitted on a test row".into(),
            });
        }
    }
    Ok(findings)
}

fn recompute_rows(
    split: &TimeSplit,
    matrix: &FeatureMatrix,
    encoder: &EncoderState,
    re: &Recompute<'_>,
    findings: &mut Vec<LeakageFinding>,
) -> Result<(), FeatureError> {
    let n = matrix.n_rows();
    if n == 0 || re.sample == 0 {
        return Ok(());
    }
    let take = re.sample.min(n);
    let mut picks: Vec<usize> = (0..take).map(|i| i * n / take).collect();
    picks.sort_by_key(|i| matrix.rows[*i].as_of);
    let mut i = 0;
    while i < picks.len() {
        let as_of = matrix.rows[picks[i]].as_of;
        let group: Vec<usize> = picks[i..]
            .iter()
            .copied()
            .take_while(|j| matrix.rows[*j].as_of == as_of)
            .collect();
        i += group.len();
        let censored = re.log.censored(as_of);
        let builder = FeatureBuilder::new(re.config, re.zip, &censored)?;
        let rows: Vec<PredictionPoint> = group.iter().map(|j| matrix.rows[*j].clone()).collect();
        let fresh = builder.build(&rows, encoder)?;
        for (k, j) in group.iter().enumerate() {
            for (c, name) in matrix.columns.iter().enumerate() {
                let (a, b) = (matrix.values[[*j, c]], fresh.values[[k, c]]);
                if (a - b).abs() > 1e-9 * (1.0 + a.abs().max(b.abs())) {
                    findings.push(LeakageFinding {
                        split_id: split.split_id,
                        kind: LeakageKind::FeatureRecompute,
                        entity_id: rows[k].entity_id.clone(),
                        as_of,
                        detail: format!("`{name}` is {a} but {b} on the censored log"),
                    });
                }
            }
        }
    }
    Ok(())
}
