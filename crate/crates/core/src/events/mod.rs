//! Canonical event data model.
//!
//! An [`EventLog`] holds one record per entity (demographics) plus a flat list of
//! day-granular events sorted by `(entity_id, event_date)`. Logs are immutable once
//! built; per-entity event slices are resolved by binary search over the sorted list.

mod csv_io;
pub mod synthetic;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use csv_io::{export_csv, ingest_csv, ingest_csv_with_range, write_ground_truth_csv};
pub use synthetic::{generate_synthetic_cohort, GroundTruth, SyntheticConfig};
pub use validate::{validate_event_log, Finding, FindingKind, ValidationReport};

#[derive(Debug, Error)]
pub enum EventStoreError {
    #[error("{file}:{line}: column `{column}`: {message}")]
    Malformed {
        file: String,
        line: u64,
        column: String,
        message: String,
    },
    #[error("{file}:{line}: column `{column}`: cannot parse date `{literal}`")]
    InvalidDate {
        file: String,
        line: u64,
        column: String,
        literal: String,
    },
    #[error("{file}: header mismatch, expected `{expected}`, found `{found}`")]
    Header {
        file: String,
        expected: String,
        found: String,
    },
    #[error("events reference unknown entity ids: {}", .0.join(", "))]
    DanglingEntities(Vec<String>),
    #[error("duplicate entity id `{0}`")]
    DuplicateEntity(String),
    #[error("empty date range: {start} > {end}")]
    EmptyDateRange { start: NaiveDate, end: NaiveDate },
    #[error("event log has no events and no explicit date range")]
    NoEvents,
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = EventStoreError> = std::result::Result<T, E>;

/// Opaque entity identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_string())
    }
}

impl From<String> for EntityId {
    fn from(s: String) -> Self {
        EntityId(s)
    }
}

/// Closed calendar interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start > end {
            return Err(EventStoreError::EmptyDateRange { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn shifted(&self, days: i64) -> Self {
        Self {
            start: self.start + Duration::days(days),
            end: self.end + Duration::days(days),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    HivVisit,
    OtherVisit,
    ViralLoadTest,
    Cd4Test,
    Diagnosis,
    Medication,
    OpportunisticInfection,
}

impl EventType {
    pub const ALL: [EventType; 7] = [
        EventType::HivVisit,
        EventType::OtherVisit,
        EventType::ViralLoadTest,
        EventType::Cd4Test,
        EventType::Diagnosis,
        EventType::Medication,
        EventType::OpportunisticInfection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::HivVisit => "hiv_visit",
            EventType::OtherVisit => "other_visit",
            EventType::ViralLoadTest => "viral_load_test",
            EventType::Cd4Test => "cd4_test",
            EventType::Diagnosis => "diagnosis",
            EventType::Medication => "medication",
            EventType::OpportunisticInfection => "opportunistic_infection",
        }
    }

    /// Lab tests must carry a value (possibly an explicit missing marker).
    pub fn is_lab(self) -> bool {
        matches!(self, EventType::ViralLoadTest | EventType::Cd4Test)
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        EventType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown event type `{s}`"))
    }
}

/// Demographic attributes usable for one-hot encoding and group audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Demographic {
    Gender,
    Race,
    ZipCode,
    TransmissionCategory,
}

impl Demographic {
    pub const ALL: [Demographic; 4] = [
        Demographic::Gender,
        Demographic::Race,
        Demographic::ZipCode,
        Demographic::TransmissionCategory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Demographic::Gender => "gender",
            Demographic::Race => "race",
            Demographic::ZipCode => "zip_code",
            Demographic::TransmissionCategory => "transmission_category",
        }
    }
}

impl fmt::Display for Demographic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Demographic {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Demographic::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown demographic attribute `{s}`"))
    }
}

/// Group label used for entities whose attribute is not recorded.
pub const MISSING: &str = "missing";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub birth_date: Option<NaiveDate>,
    pub gender: Option<String>,
    pub race: Option<String>,
    pub zip_code: Option<String>,
    pub transmission_category: Option<String>,
    pub diagnosis_date: Option<NaiveDate>,
}

impl Entity {
    pub fn new(id: impl Into<EntityId>) -> Self {
        Self {
            id: id.into(),
            birth_date: None,
            gender: None,
            race: None,
            zip_code: None,
            transmission_category: None,
            diagnosis_date: None,
        }
    }

    pub fn demographic(&self, attr: Demographic) -> Option<&str> {
        match attr {
            Demographic::Gender => self.gender.as_deref(),
            Demographic::Race => self.race.as_deref(),
            Demographic::ZipCode => self.zip_code.as_deref(),
            Demographic::TransmissionCategory => self.transmission_category.as_deref(),
        }
    }

    /// Attribute value with missing mapped to its own group.
    pub fn group(&self, attr: Demographic) -> &str {
        self.demographic(attr).unwrap_or(MISSING)
    }

    /// Age in fractional years at `date`.
    pub fn age_at(&self, date: NaiveDate) -> Option<f64> {
        self.birth_date
            .map(|b| (date - b).num_days() as f64 / 365.25)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub entity_id: EntityId,
    pub event_type: EventType,
    pub event_date: NaiveDate,
    pub numeric_value: Option<f64>,
    pub category_value: Option<String>,
}

impl Event {
    pub fn new(
        entity_id: impl Into<EntityId>,
        event_type: EventType,
        event_date: NaiveDate,
    ) -> Self {
        Self {
            entity_id: entity_id.into(),
            event_type,
            event_date,
            numeric_value: None,
            category_value: None,
        }
    }

    pub fn with_value(mut self, value: f64) -> Self {
        self.numeric_value = Some(value);
        self
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category_value = Some(category.into());
        self
    }
}

/// Immutable, sorted collection of entities and their events.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    entities: BTreeMap<EntityId, Entity>,
    events: Vec<Event>,
    date_range: DateRange,
}

impl EventLog {
    /// Builds a log, sorting events by `(entity_id, event_date)`.
    ///
    /// Rejects duplicate entity ids and events pointing at unknown entities. Softer
    /// invariants (date range, chronology, value signs) are reported by
    /// [`validate_event_log`].
    pub fn new(
        entities: Vec<Entity>,
        mut events: Vec<Event>,
        date_range: DateRange,
    ) -> Result<Self> {
        let entities = index_entities(entities)?;
        let mut dangling: Vec<String> = events
            .iter()
            .filter(|e| !entities.contains_key(&e.entity_id))
            .map(|e| e.entity_id.0.clone())
            .collect();
        if !dangling.is_empty() {
            dangling.sort();
            dangling.dedup();
            return Err(EventStoreError::DanglingEntities(dangling));
        }
        events.sort_by(|a, b| {
            a.entity_id
                .cmp(&b.entity_id)
                .then(a.event_date.cmp(&b.event_date))
        });
        Ok(Self {
            entities,
            events,
            date_range,
        })
    }

    /// Builds a log from events the caller guarantees are already sorted and resolvable.
    ///
    /// Nothing is checked; run [`validate_event_log`] when the source is not trusted.
    pub fn from_presorted(
        entities: Vec<Entity>,
        events: Vec<Event>,
        date_range: DateRange,
    ) -> Result<Self> {
        Ok(Self {
            entities: index_entities(entities)?,
            events,
            date_range,
        })
    }

    pub fn date_range(&self) -> DateRange {
        self.date_range
    }

    pub fn entities(&self) -> impl ExactSizeIterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entity(&self, id: &EntityId) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    /// Events of one entity, in date order.
    pub fn events_for(&self, id: &EntityId) -> &[Event] {
        let lo = self.events.partition_point(|e| e.entity_id < *id);
        let hi = lo + self.events[lo..].partition_point(|e| e.entity_id == *id);
        &self.events[lo..hi]
    }

    /// Distinct dates of one entity's events of `kind`, ascending.
    pub fn dates_for(&self, id: &EntityId, kind: EventType) -> Vec<NaiveDate> {
        let mut dates: Vec<NaiveDate> = self
            .events_for(id)
            .iter()
            .filter(|e| e.event_type == kind)
            .map(|e| e.event_date)
            .collect();
        dates.dedup();
        dates
    }

    /// Appends events, keeping the sorted order. Existing events are never modified.
    pub fn append(&mut self, events: Vec<Event>) -> Result<()> {
        let mut dangling: Vec<String> = events
            .iter()
            .filter(|e| !self.entities.contains_key(&e.entity_id))
            .map(|e| e.entity_id.0.clone())
            .collect();
        if !dangling.is_empty() {
            dangling.sort();
            dangling.dedup();
            return Err(EventStoreError::DanglingEntities(dangling));
        }
        for event in events {
            let at = self.events.partition_point(|e| {
                (&e.entity_id, e.event_date) <= (&event.entity_id, event.event_date)
            });
            self.events.insert(at, event);
        }
        Ok(())
    }

    /// Copy of the log keeping only events dated on or before `as_of`.
    pub fn censored(&self, as_of: NaiveDate) -> EventLog {
        EventLog {
            entities: self.entities.clone(),
            events: self
                .events
                .iter()
                .filter(|e| e.event_date <= as_of)
                .cloned()
                .collect(),
            date_range: self.date_range,
        }
    }

    /// Uniform day offset applied to every date (anonymization transform).
    pub fn shift_dates(&self, days: i64) -> EventLog {
        let shift = Duration::days(days);
        let entities = self
            .entities
            .iter()
            .map(|(id, e)| {
                let mut e = e.clone();
                e.birth_date = e.birth_date.map(|d| d + shift);
                e.diagnosis_date = e.diagnosis_date.map(|d| d + shift);
                (id.clone(), e)
            })
            .collect();
        let events = self
            .events
            .iter()
            .map(|e| Event {
                event_date: e.event_date + shift,
                ..e.clone()
            })
            .collect();
        EventLog {
            entities,
            events,
            date_range: self.date_range.shifted(days),
        }
    }
}

fn index_entities(entities: Vec<Entity>) -> Result<BTreeMap<EntityId, Entity>> {
    let mut map = BTreeMap::new();
    for entity in entities {
        let id = entity.id.clone();
        if map.insert(id.clone(), entity).is_some() {
            return Err(EventStoreError::DuplicateEntity(id.0));
        }
    }
    Ok(map)
}
