use serde::{Deserialize, Serialize};

use crate::events::{EventLog, EventType};
use crate::labels::PredictionPoint;

/// Viral load below this many copies/ml counts as suppressed.
pub const SUPPRESSION_THRESHOLD: f64 = 200.0;

/// Names accepted by [`RawAttributes::get`].
pub const RAW_ATTRIBUTES: [&str; 7] = [
    "age",
    "years_on_art",
    "substance_abuse",
    "last_viral_load",
    "virally_suppressed",
    "last_cd4",
    "days_since_last_visit",
];

/// Unencoded per-row attributes for hand-written rules and ranking baselines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawAttributes {
    pub age: Option<f64>,
    pub years_on_art: Option<f64>,
    pub substance_abuse: f64,
    pub last_viral_load: Option<f64>,
    pub last_cd4: Option<f64>,
    pub days_since_last_visit: Option<f64>,
}

impl RawAttributes {
    pub fn from_log(log: &EventLog, point: &PredictionPoint) -> Self {
        let as_of = point.as_of;
        let history = log
            .events_for(&point.entity_id)
            .iter()
            .filter(|e| e.event_date <= as_of);
        let mut raw = RawAttributes {
            age: log.entity(&point.entity_id).and_then(|e| e.age_at(as_of)),
            ..Default::default()
        };
        let mut first_art = None;
        for e in history {
            match e.event_type {
                EventType::Medication => {
                    first_art.get_or_insert(e.event_date);
                }
                EventType::Diagnosis if e.category_value.as_deref() == Some("substance_abuse") => {
                    raw.substance_abuse = 1.0;
                }
                EventType::ViralLoadTest if e.numeric_value.is_some() => {
                    raw.last_viral_load = e.numeric_value
                }
                EventType::Cd4Test if e.numeric_value.is_some() => raw.last_cd4 = e.numeric_value,
                EventType::HivVisit => {
                    raw.days_since_last_visit = Some((as_of - e.event_date).num_days() as f64)
                }
                _ => {}
            }
        }
        raw.years_on_art = first_art.map(|d| (as_of - d).num_days() as f64 / 365.25);
        raw
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "age" => self.age,
            "years_on_art" => self.years_on_art,
            "substance_abuse" => Some(self.substance_abuse),
            "last_viral_load" => self.last_viral_load,
            "virally_suppressed" => {
                self.last_viral_load
                    .map(|v| if v < SUPPRESSION_THRESHOLD { 1.0 } else { 0.0 })
            }
            "last_cd4" => self.last_cd4,
            "days_since_last_visit" => self.days_since_last_visit,
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;
    use crate::events::{DateRange, Entity, Event};
    use crate::labels::PredictionContext;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn latest_values_before_as_of() {
        let mut e = Entity::new("A");
        e.birth_date = Some(d("1990-01-01"));
        let log = EventLog::new(
            vec![e],
            vec![
                Event::new("A", EventType::ViralLoadTest, d("2015-01-01")).with_value(50000.0),
                Event::new("A", EventType::ViralLoadTest, d("2015-06-01")).with_value(150.0),
                Event::new("A", EventType::ViralLoadTest, d("2016-06-01")).with_value(9999.0),
                Event::new("A", EventType::Medication, d("2014-07-01")).with_category("art"),
                Event::new("A", EventType::Diagnosis, d("2015-02-01"))
                    .with_category("substance_abuse"),
                Event::new("A", EventType::HivVisit, d("2015-06-01")),
            ],
            DateRange::new(d("2014-01-01"), d("2017-01-01")).unwrap(),
        )
        .unwrap();
        let p = PredictionPoint::new("A", d("2015-07-01"), PredictionContext::ClinicAppointment);
        let raw = RawAttributes::from_log(&log, &p);
        assert_eq!(raw.last_viral_load, Some(150.0));
        assert_eq!(raw.get("virally_suppressed"), Some(1.0));
        assert_eq!(raw.get("substance_abuse"), Some(1.0));
        assert_eq!(raw.days_since_last_visit, Some(30.0));
        assert!((raw.years_on_art.unwrap() - 1.0).abs() < 0.01);
        assert!((raw.age.unwrap() - 25.5).abs() < 0.01);
        assert_eq!(raw.get("shoe_size"), None);
    }
}
