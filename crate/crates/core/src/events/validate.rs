use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::EventLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Unsorted,
    Dangling,
    OutOfRange,
    Chronology,
    NegativeValue,
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FindingKind::Unsorted => "unsorted",
            FindingKind::Dangling => "dangling",
            FindingKind::OutOfRange => "out_of_range",
            FindingKind::Chronology => "chronology",
            FindingKind::NegativeValue => "negative_value",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    /// Index into `EventLog::events()`.
    pub event_index: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<FindingKind, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.findings {
            *counts.entry(f.kind).or_insert(0) += 1;
        }
        counts
    }

    pub fn count(&self, kind: FindingKind) -> usize {
        self.findings.iter().filter(|f| f.kind == kind).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return writeln!(f, "event log is valid");
        }
        for (kind, n) in self.counts() {
            writeln!(f, "{kind}: {n}")?;
        }
        for finding in &self.findings {
            writeln!(
                f,
                "  [{}] event #{}: {}",
                finding.kind, finding.event_index, finding.detail
            )?;
        }
        Ok(())
    }
}

pub fn validate_event_log(log: &EventLog) -> ValidationReport {
    let mut findings = Vec::new();
    let range = log.date_range();
    let events = log.events();
    for (i, event) in events.iter().enumerate() {
        if i > 0 {
            let prev = &events[i - 1];
            if (&prev.entity_id, prev.event_date) > (&event.entity_id, event.event_date) {
                findings.push(Finding {
                    kind: FindingKind::Unsorted,
                    event_index: i,
                    detail: format!(
                        "({}, {}) follows ({}, {})",
                        event.entity_id, event.event_date, prev.entity_id, prev.event_date
                    ),
                });
            }
        }
        let entity = log.entity(&event.entity_id);
        if entity.is_none() {
            findings.push(Finding {
                kind: FindingKind::Dangling,
                event_index: i,
                detail: format!("unknown entity `{}`", event.entity_id),
            });
        }
        if !range.contains(event.event_date) {
            findings.push(Finding {
                kind: FindingKind::OutOfRange,
                event_index: i,
                detail: format!(
                    "{} outside [{}, {}]",
                    event.event_date, range.start, range.end
                ),
            });
        }
        if let Some(birth) = entity.and_then(|e| e.birth_date) {
            if event.event_date < birth {
                findings.push(Finding {
                    kind: FindingKind::Chronology,
                    event_index: i,
                    detail: format!(
                        "{} {} precedes birth date {}",
                        event.event_type, event.event_date, birth
                    ),
                });
            }
        }
        if event.numeric_value.is_some_and(|v| v < 0.0) {
            findings.push(Finding {
                kind: FindingKind::NegativeValue,
                event_index: i,
                detail: format!(
                    "{} value {}",
                    event.event_type,
                    event.numeric_value.unwrap()
                ),
            });
        }
    }
    ValidationReport { findings }
}
