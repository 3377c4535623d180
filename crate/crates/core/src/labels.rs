//! Prediction cohorts and retention/access outcome labels.
//!
//! Outcome windows are `(as_of, as_of + window_days]`: the visit on the as-of day
//! itself never counts. A label of `true` means the outcome failed (not retained, or
//! no access to care).

use std::collections::BTreeSet;
use std::io::Write;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EntityId, EventLog, EventType};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("visit dates are not sorted: {later} appears before {earlier}")]
    Unsorted {
        earlier: NaiveDate,
        later: NaiveDate,
    },
    #[error("outcome window for {entity_id} at {as_of} ends {window_end}, after the data end {data_end}")]
    Unobservable {
        entity_id: EntityId,
        as_of: NaiveDate,
        window_end: NaiveDate,
        data_end: NaiveDate,
    },
    #[error("empty cohort period: {start} > {end}")]
    EmptyPeriod { start: NaiveDate, end: NaiveDate },
    #[error("{date} lies outside the log date range [{start}, {end}]")]
    OutOfRange {
        date: NaiveDate,
        start: NaiveDate,
        end: NaiveDate,
    },
    #[error("invalid label spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionContext {
    ClinicAppointment,
    MonthlyRoster,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PredictionPoint {
    pub entity_id: EntityId,
    pub as_of: NaiveDate,
    pub context: PredictionContext,
}

impl PredictionPoint {
    pub fn new(
        entity_id: impl Into<EntityId>,
        as_of: NaiveDate,
        context: PredictionContext,
    ) -> Self {
        Self {
            entity_id: entity_id.into(),
            as_of,
            context,
        }
    }

    /// Ordering key used for deterministic tie-breaks.
    pub fn key(&self) -> (&EntityId, NaiveDate) {
        (&self.entity_id, self.as_of)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Retention,
    Access,
}

fn default_min_gap() -> i64 {
    90
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub kind: LabelKind,
    pub window_days: i64,
    /// Only used by retention labels.
    #[serde(default = "default_min_gap")]
    pub min_gap_days: i64,
}

impl LabelSpec {
    pub fn retention() -> Self {
        Self {
            kind: LabelKind::Retention,
            window_days: 365,
            min_gap_days: 90,
        }
    }

    pub fn access(window_days: i64) -> Self {
        Self {
            kind: LabelKind::Access,
            window_days,
            min_gap_days: default_min_gap(),
        }
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        if self.window_days <= 0 {
            return Err(LabelError::InvalidSpec(format!(
                "window_days must be positive, got {}",
                self.window_days
            )));
        }
        if self.kind == LabelKind::Retention && self.min_gap_days >= self.window_days {
            return Err(LabelError::InvalidSpec(format!(
                "min_gap_days {} must be below window_days {}",
                self.min_gap_days, self.window_days
            )));
        }
        Ok(())
    }

    pub fn label(&self, visits: &[NaiveDate], as_of: NaiveDate) -> Result<bool, LabelError> {
        match self.kind {
            LabelKind::Retention => {
                retention_label(visits, as_of, self.window_days, self.min_gap_days)
            }
            LabelKind::Access => access_label(visits, as_of, self.window_days),
        }
    }
}

fn check_sorted(visits: &[NaiveDate]) -> Result<(), LabelError> {
    match visits.windows(2).find(|w| w[0] > w[1]) {
        Some(w) => Err(LabelError::Unsorted {
            earlier: w[1],
            later: w[0],
        }),
        None => Ok(()),
    }
}

fn in_window(visits: &[NaiveDate], as_of: NaiveDate, window_days: i64) -> &[NaiveDate] {
    let end = as_of + Duration::days(window_days);
    let lo = visits.partition_point(|v| *v <= as_of);
    let hi = visits.partition_point(|v| *v <= end);
    &visits[lo..hi]
}

/// `false` (retained) iff two visits in the window are more than `min_gap_days` apart.
pub fn retention_label(
    visits: &[NaiveDate],
    as_of: NaiveDate,
    window_days: i64,
    min_gap_days: i64,
) -> Result<bool, LabelError> {
    check_sorted(visits)?;
    let window = in_window(visits, as_of, window_days);
    // The widest pair in a sorted window is (first, last).
    let retained = match (window.first(), window.last()) {
        (Some(first), Some(last)) => (*last - *first).num_days() > min_gap_days,
        _ => false,
    };
    Ok(!retained)
}

/// `false` iff any visit falls in `(as_of, as_of + window_days]`.
pub fn access_label(
    visits: &[NaiveDate],
    as_of: NaiveDate,
    window_days: i64,
) -> Result<bool, LabelError> {
    check_sorted(visits)?;
    Ok(in_window(visits, as_of, window_days).is_empty())
}

fn check_in_log(log: &EventLog, date: NaiveDate) -> Result<(), LabelError> {
    let range = log.date_range();
    if !range.contains(date) {
        return Err(LabelError::OutOfRange {
            date,
            start: range.start,
            end: range.end,
        });
    }
    Ok(())
}

/// One point per distinct (entity, day) with an HIV visit in `[start, end]`.
pub fn build_clinic_cohort(
    log: &EventLog,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<PredictionPoint>, LabelError> {
    if start > end {
        return Err(LabelError::EmptyPeriod { start, end });
    }
    check_in_log(log, start)?;
    check_in_log(log, end)?;
    let mut seen = BTreeSet::new();
    Ok(log
        .events()
        .iter()
        .filter(|e| {
            e.event_type == EventType::HivVisit && start <= e.event_date && e.event_date <= end
        })
        .filter(|e| seen.insert((e.entity_id.clone(), e.event_date)))
        .map(|e| {
            PredictionPoint::new(
                e.entity_id.clone(),
                e.event_date,
                PredictionContext::ClinicAppointment,
            )
        })
        .collect())
}

/// Roster lookback in days.
pub const ROSTER_LOOKBACK_DAYS: i64 = 365;

/// Entities with a CD4 or viral-load test in `[as_of - 365d, as_of]`.
pub fn build_roster_cohort(
    log: &EventLog,
    as_of: NaiveDate,
) -> Result<Vec<PredictionPoint>, LabelError> {
    check_in_log(log, as_of)?;
    let from = as_of - Duration::days(ROSTER_LOOKBACK_DAYS);
    Ok(log
        .entities()
        .filter(|entity| {
            log.events_for(&entity.id)
                .iter()
                .any(|e| e.event_type.is_lab() && from <= e.event_date && e.event_date <= as_of)
        })
        .map(|entity| {
            PredictionPoint::new(entity.id.clone(), as_of, PredictionContext::MonthlyRoster)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub rows: Vec<PredictionPoint>,
    pub labels: Vec<bool>,
    pub spec: LabelSpec,
}

impl LabelMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn prevalence(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| **l).count() as f64 / self.labels.len() as f64
    }

    /// Subset of rows by index, order preserved.
    pub fn select(&self, idx: &[usize]) -> LabelMatrix {
        LabelMatrix {
            rows: idx.iter().map(|i| self.rows[*i].clone()).collect(),
            labels: idx.iter().map(|i| self.labels[*i]).collect(),
            spec: self.spec,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["entity_id", "as_of", "label"])?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            w.write_record([
                row.entity_id.as_str(),
                &row.as_of.to_string(),
                if *label { "1" } else { "0" },
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_label_matrix(
    cohort: &[PredictionPoint],
    log: &EventLog,
    spec: &LabelSpec,
) -> Result<LabelMatrix, LabelError> {
    spec.validate()?;
    let data_end = log.date_range().end;
    let mut labels = Vec::with_capacity(cohort.len());
    for point in cohort {
        let window_end = point.as_of + Duration::days(spec.window_days);
        if window_end > data_end {
            return Err(LabelError::Unobservable {
                entity_id: point.entity_id.clone(),
                as_of: point.as_of,
                window_end,
                data_end,
            });
        }
        let visits = log.dates_for(&point.entity_id, EventType::HivVisit);
        labels.push(spec.label(&visits, point.as_of)?);
    }
    Ok(LabelMatrix {
        rows: cohort.to_vec(),
        labels,
        spec: *spec,
    })
}
