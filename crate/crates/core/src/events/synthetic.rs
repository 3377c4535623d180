//! Synthetic cohort generator with a planted, recoverable drop-out mechanism.
//!
//! Every entity draws five independent latent traits from N(0, 1). Each trait always
//! shows up in observable events (visit cadence, viral load values, age, substance-use
//! diagnoses, CD4 counts). The per-visit drop-out probability is a logistic function
//! of the traits listed in `dropout_signal`:
//!
//! ```text
//! p = min(0.95, multiplier * sigmoid(intercept + sum_j weight_j * trait_j))
//! ```
//!
//! where `multiplier` is the group bias factor for entities in the biased group and 1
//! otherwise. Regular gaps between HIV visits never exceed 143 days, while a drop-out
//! either ends the visit history or opens a gap of at least 190 days, so a 183-day
//! access label fails exactly when a drop-out happened at that visit.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::{
    DateRange, Demographic, Entity, EntityId, Event, EventLog, EventStoreError, EventType, Result,
};
use crate::math::sigmoid;

/// Latent entity traits the generator can wire into the drop-out hazard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantedTrait {
    /// Longer, more irregular gaps between HIV visits.
    VisitIrregularity,
    /// Higher (unsuppressed) viral load.
    ViralLoad,
    /// Younger age.
    Youth,
    /// Substance-abuse diagnoses.
    SubstanceUse,
    /// Lower CD4 counts.
    LowCd4,
}

impl PlantedTrait {
    pub const ALL: [PlantedTrait; 5] = [
        PlantedTrait::VisitIrregularity,
        PlantedTrait::ViralLoad,
        PlantedTrait::Youth,
        PlantedTrait::SubstanceUse,
        PlantedTrait::LowCd4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlantedTrait::VisitIrregularity => "visit_irregularity",
            PlantedTrait::ViralLoad => "viral_load",
            PlantedTrait::Youth => "youth",
            PlantedTrait::SubstanceUse => "substance_use",
            PlantedTrait::LowCd4 => "low_cd4",
        }
    }

    /// Whether a feature column is a direct observable of this trait.
    pub fn observed_by(self, feature: &str) -> bool {
        match self {
            PlantedTrait::VisitIrregularity => feature.starts_with("hiv_visit_"),
            PlantedTrait::ViralLoad => feature.starts_with("viral_load_test_"),
            PlantedTrait::Youth => feature == "age",
            PlantedTrait::SubstanceUse => feature.starts_with("diagnosis_"),
            PlantedTrait::LowCd4 => feature.starts_with("cd4_test_"),
        }
    }
}

impl fmt::Display for PlantedTrait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlantedTrait {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PlantedTrait::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown planted trait `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalWeight {
    pub feature: PlantedTrait,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupBias {
    pub attribute: Demographic,
    pub group: String,
    pub multiplier: f64,
}

fn default_intercept() -> f64 {
    -3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub date_range: DateRange,
    pub seed: u64,
    #[serde(default)]
    pub dropout_signal: Vec<SignalWeight>,
    /// Log-odds of drop-out at a visit when every trait sits at its mean.
    #[serde(default = "default_intercept")]
    pub dropout_intercept: f64,
    #[serde(default)]
    pub group_bias: Option<GroupBias>,
}

impl SyntheticConfig {
    pub fn new(n_entities: usize, date_range: DateRange, seed: u64) -> Self {
        Self {
            n_entities,
            date_range,
            seed,
            dropout_signal: Vec::new(),
            dropout_intercept: default_intercept(),
            group_bias: None,
        }
    }

    /// The signal shipped with the example configs.
    pub fn with_default_signal(mut self) -> Self {
        self.dropout_signal = vec![
            SignalWeight {
                feature: PlantedTrait::VisitIrregularity,
                weight: 1.2,
            },
            SignalWeight {
                feature: PlantedTrait::ViralLoad,
                weight: 1.0,
            },
            SignalWeight {
                feature: PlantedTrait::Youth,
                weight: 0.5,
            },
            SignalWeight {
                feature: PlantedTrait::SubstanceUse,
                weight: 0.3,
            },
        ];
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_entities == 0 {
            return Err(EventStoreError::InvalidConfig(
                "n_entities must be at least 1".into(),
            ));
        }
        DateRange::new(self.date_range.start, self.date_range.end)?;
        for s in &self.dropout_signal {
            if !s.weight.is_finite() {
                return Err(EventStoreError::InvalidConfig(format!(
                    "non-finite weight {} for `{}`",
                    s.weight, s.feature
                )));
            }
        }
        if !self.dropout_intercept.is_finite() {
            return Err(EventStoreError::InvalidConfig(
                "non-finite dropout_intercept".into(),
            ));
        }
        if let Some(bias) = &self.group_bias {
            if !bias.multiplier.is_finite() || bias.multiplier < 0.0 {
                return Err(EventStoreError::InvalidConfig(format!(
                    "group bias multiplier must be finite and non-negative, got {}",
                    bias.multiplier
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityTruth {
    pub entity_id: EntityId,
    /// Negated drop-out linear predictor; higher means more adherent.
    pub latent_adherence: f64,
    pub planted_dropout_prob: f64,
    pub traits: BTreeMap<PlantedTrait, f64>,
    /// Visits at which a drop-out draw was made.
    pub n_visits: usize,
    pub n_dropouts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub entities: Vec<EntityTruth>,
    /// Traits with non-zero weight in the drop-out hazard.
    pub planted: Vec<PlantedTrait>,
}

impl GroundTruth {
    pub fn is_planted_feature(&self, feature: &str) -> bool {
        self.planted.iter().any(|t| t.observed_by(feature))
    }

    pub fn get(&self, id: &EntityId) -> Option<&EntityTruth> {
        self.entities
            .binary_search_by(|t| t.entity_id.cmp(id))
            .ok()
            .map(|i| &self.entities[i])
    }
}

const GENDERS: [(&str, f64); 3] = [("M", 0.68), ("F", 0.28), ("TG", 0.02)];
const RACES: [(&str, f64); 4] = [
    ("Black", 0.45),
    ("White", 0.30),
    ("Hispanic", 0.18),
    ("Other", 0.05),
];
const TRANSMISSION: [(&str, f64); 4] = [
    ("msm", 0.50),
    ("heterosexual", 0.30),
    ("idu", 0.12),
    ("perinatal", 0.03),
];
pub const ZIP_CODES: [&str; 10] = [
    "60609", "60612", "60615", "60617", "60619", "60620", "60621", "60624", "60637", "60649",
];

/// Draws from a categorical table; leftover probability mass means "missing".
fn categorical(rng: &mut ChaCha8Rng, table: &[(&str, f64)]) -> Option<String> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (value, p) in table {
        acc += p;
        if u < acc {
            return Some((*value).to_string());
        }
    }
    None
}

fn days(n: f64) -> Duration {
    Duration::days(n.round() as i64)
}

struct Generated {
    entity: Entity,
    events: Vec<Event>,
    truth: EntityTruth,
}

fn generate_entity(config: &SyntheticConfig, index: usize, id: EntityId) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let start = config.date_range.start;
    let end = config.date_range.end;
    let span = (end - start).num_days().max(1) as f64;

    let traits: BTreeMap<PlantedTrait, f64> = PlantedTrait::ALL
        .iter()
        .map(|t| (*t, normal.sample(&mut rng)))
        .collect();
    let z = |t: PlantedTrait| traits[&t];

    let mut entity = Entity::new(id.clone());
    entity.gender = categorical(&mut rng, &GENDERS);
    entity.race = categorical(&mut rng, &RACES);
    entity.transmission_category = categorical(&mut rng, &TRANSMISSION);
    let zip_idx = rng.random_range(0..ZIP_CODES.len());
    let zip_missing = rng.random::<f64>() < 0.03;
    entity.zip_code = (!zip_missing).then(|| ZIP_CODES[zip_idx].to_string());

    let age_years = (42.0 - 11.0 * z(PlantedTrait::Youth)).clamp(18.0, 80.0);
    let birth = start - days(age_years * 365.25 + rng.random_range(0.0..365.0));
    let birth_missing = rng.random::<f64>() < 0.03;
    entity.birth_date = (!birth_missing).then_some(birth);

    let mean_gap = (60.0 * (0.35 * z(PlantedTrait::VisitIrregularity)).exp()).clamp(35.0, 110.0);
    let prevalent = rng.random::<f64>() < 0.7;
    let first_visit = if prevalent {
        start + days(rng.random_range(0.0..mean_gap))
    } else {
        start + days(rng.random_range(0.0..span))
    };
    let diagnosis = first_visit - days(rng.random_range(0.0..3650.0));
    let diagnosis_missing = rng.random::<f64>() < 0.05;
    entity.diagnosis_date = (!diagnosis_missing).then_some(diagnosis.max(birth));

    let uses_substances = rng.random::<f64>() < sigmoid(-1.0 + 2.0 * z(PlantedTrait::SubstanceUse));
    let provider = rng.random_range(1..=8u32);

    let linear: f64 = config
        .dropout_signal
        .iter()
        .map(|s| s.weight * z(s.feature))
        .sum();
    let multiplier = match &config.group_bias {
        Some(bias) if entity.demographic(bias.attribute) == Some(bias.group.as_str()) => {
            bias.multiplier
        }
        _ => 1.0,
    };
    let p_dropout = (multiplier * sigmoid(config.dropout_intercept + linear)).min(0.95);

    let vl_noise = Normal::new(0.0, 0.35).expect("finite sd");
    let cd4_noise = Normal::new(0.0, 70.0).expect("finite sd");
    let return_gap = Exp::new(1.0 / 240.0).expect("positive rate");

    let mut events = Vec::new();
    let mut n_visits = 0;
    let mut n_dropouts = 0;
    let mut t = first_visit;
    while t <= end {
        events.push(
            Event::new(id.clone(), EventType::HivVisit, t)
                .with_category(format!("provider_{provider}")),
        );
        if rng.random::<f64>() < 0.6 {
            let log_vl = 1.7 + 1.1 * z(PlantedTrait::ViralLoad) + vl_noise.sample(&mut rng);
            let vl = 10f64.powf(log_vl).round().max(20.0);
            events.push(Event::new(id.clone(), EventType::ViralLoadTest, t).with_value(vl));
        }
        if rng.random::<f64>() < 0.45 {
            let cd4 = (560.0 - 170.0 * z(PlantedTrait::LowCd4) + cd4_noise.sample(&mut rng))
                .round()
                .max(10.0);
            events.push(Event::new(id.clone(), EventType::Cd4Test, t).with_value(cd4));
        }
        if rng.random::<f64>() < 0.85 {
            events.push(Event::new(id.clone(), EventType::Medication, t).with_category("art"));
        }
        if uses_substances && rng.random::<f64>() < 0.25 {
            events.push(
                Event::new(id.clone(), EventType::Diagnosis, t).with_category("substance_abuse"),
            );
        }
        if rng.random::<f64>() < 0.05 {
            events
                .push(Event::new(id.clone(), EventType::Diagnosis, t).with_category("psychiatric"));
        }
        let oi_rate = if z(PlantedTrait::LowCd4) > 1.5 {
            0.07
        } else {
            0.02
        };
        if rng.random::<f64>() < oi_rate {
            events.push(
                Event::new(id.clone(), EventType::OpportunisticInfection, t)
                    .with_category("pneumonia"),
            );
        }

        n_visits += 1;
        let dropped = rng.random::<f64>() < p_dropout;
        let gap = if dropped {
            n_dropouts += 1;
            if rng.random::<f64>() < 0.4 {
                break;
            }
            190.0 + return_gap.sample(&mut rng)
        } else {
            mean_gap * rng.random_range(0.7..1.3)
        };
        let gap = gap.round().max(1.0);
        if rng.random::<f64>() < 0.3 {
            let other = t + days(rng.random_range(1.0..gap.max(2.0)).floor());
            if other <= end && other < t + days(gap) {
                events.push(
                    Event::new(id.clone(), EventType::OtherVisit, other)
                        .with_category("primary_care"),
                );
            }
        }
        t += days(gap);
    }

    Generated {
        entity,
        events,
        truth: EntityTruth {
            entity_id: id,
            latent_adherence: -linear,
            planted_dropout_prob: p_dropout,
            traits,
            n_visits,
            n_dropouts,
        },
    }
}

/// Generates a cohort; identical configs yield identical logs and ground truth.
pub fn generate_synthetic_cohort(config: &SyntheticConfig) -> Result<(EventLog, GroundTruth)> {
    config.validate()?;
    let width = config.n_entities.to_string().len().max(5);
    let mut entities = Vec::with_capacity(config.n_entities);
    let mut events = Vec::new();
    let mut truths = Vec::with_capacity(config.n_entities);
    for i in 0..config.n_entities {
        let id = EntityId(format!("P{:0width$}", i + 1, width = width));
        let g = generate_entity(config, i, id);
        entities.push(g.entity);
        events.extend(g.events);
        truths.push(g.truth);
    }
    let log = EventLog::new(entities, events, config.date_range)?;
    let planted = PlantedTrait::ALL
        .iter()
        .copied()
        .filter(|t| {
            config
                .dropout_signal
                .iter()
                .any(|s| s.feature == *t && s.weight != 0.0)
        })
        .collect();
    Ok((
        log,
        GroundTruth {
            entities: truths,
            planted,
        },
    ))
}

/// Deterministic zip-level area attributes standing in for census-tract data.
pub fn synthetic_zip_attributes(seed: u64) -> crate::features::ZipAttributes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_5A5A);
    let columns = vec![
        "median_commute_min".to_string(),
        "poverty_rate".to_string(),
        "snap_fraction".to_string(),
    ];
    let rows = ZIP_CODES
        .iter()
        .map(|zip| {
            let commute: f64 = rng.random_range(20.0..50.0);
            let poverty: f64 = rng.random_range(0.05..0.45);
            let snap: f64 = rng.random_range(0.05..0.5);
            (
                zip.to_string(),
                vec![
                    (commute * 10.0).round() / 10.0,
                    (poverty * 1000.0).round() / 1000.0,
                    (snap * 1000.0).round() / 1000.0,
                ],
            )
        })
        .collect();
    crate::features::ZipAttributes { columns, rows }
}

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig::new(
            n,
            DateRange::new(date(2014, 1, 1), date(2017, 12, 31)).unwrap(),
            seed,
        )
        .with_default_signal()
    }

    #[test]
    fn same_seed_same_output() {
        let (a, ta) = generate_synthetic_cohort(&config(50, 7)).unwrap();
        let (b, tb) = generate_synthetic_cohort(&config(50, 7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_synthetic_cohort(&config(50, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn visits_strictly_increase_and_stay_in_range() {
        let (log, _) = generate_synthetic_cohort(&config(200, 3)).unwrap();
        assert!(crate::events::validate_event_log(&log).is_empty());
        for e in log.entities() {
            let visits: Vec<_> = log
                .events_for(&e.id)
                .iter()
                .filter(|ev| ev.event_type == EventType::HivVisit)
                .map(|ev| ev.event_date)
                .collect();
            assert!(visits.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = config(10, 1);
        c.dropout_signal[0].weight = f64::NAN;
        assert!(generate_synthetic_cohort(&c).is_err());
        let mut c = config(10, 1);
        c.date_range = DateRange {
            start: date(2020, 1, 1),
            end: date(2019, 1, 1),
        };
        assert!(generate_synthetic_cohort(&c).is_err());
        let c = config(0, 1);
        assert!(generate_synthetic_cohort(&c).is_err());
    }

    #[test]
    fn planted_traits_follow_nonzero_weights() {
        let (_, truth) = generate_synthetic_cohort(&config(5, 1)).unwrap();
        assert_eq!(
            truth.planted,
            vec![
                PlantedTrait::VisitIrregularity,
                PlantedTrait::ViralLoad,
                PlantedTrait::Youth,
                PlantedTrait::SubstanceUse
            ]
        );
        assert!(truth.is_planted_feature("hiv_visit_count_count_365d"));
        assert!(!truth.is_planted_feature("cd4_test_numeric_value_mean_365d"));
        assert!(!truth.is_planted_feature("zip_hiv_visit_count_count_365d"));
    }

    #[test]
    fn group_bias_doubles_dropout_rate() {
        let mut c = SyntheticConfig::new(
            5000,
            DateRange::new(date(2014, 1, 1), date(2017, 12, 31)).unwrap(),
            11,
        );
        c.dropout_intercept = -2.5;
        c.group_bias = Some(GroupBias {
            attribute: Demographic::Race,
            group: "Black".into(),
            multiplier: 2.0,
        });
        let (log, truth) = generate_synthetic_cohort(&c).unwrap();
        let rate = |group: &str| {
            let (mut visits, mut drops) = (0usize, 0usize);
            for t in &truth.entities {
                if log.entity(&t.entity_id).unwrap().race.as_deref() == Some(group) {
                    visits += t.n_visits;
                    drops += t.n_dropouts;
                }
            }
            drops as f64 / visits as f64
        };
        let ratio = rate("Black") / rate("White");
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }
}
