use std::collections::HashMap;
use std::fmt;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::events::{Event, EventLog, EventType};
use crate::labels::PredictionPoint;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Count,
    NumericValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFunction {
    Count,
    Mean,
    Min,
    Max,
    Stddev,
    DaysSinceLast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Window {
    #[serde(rename = "183d")]
    Days183,
    #[serde(rename = "365d")]
    Days365,
    #[serde(rename = "1095d")]
    Days1095,
    #[serde(rename = "all")]
    AllHistory,
}

impl Window {
    pub fn days(self) -> Option<i64> {
        match self {
            Window::Days183 => Some(183),
            Window::Days365 => Some(365),
            Window::Days1095 => Some(1095),
            Window::AllHistory => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Window::Days183 => "183d",
            Window::Days365 => "365d",
            Window::Days1095 => "1095d",
            Window::AllHistory => "all",
        }
    }

    /// True when `date` lies in `(as_of - window, as_of]`.
    pub fn contains(self, as_of: NaiveDate, date: NaiveDate) -> bool {
        date <= as_of && self.days().is_none_or(|w| date > as_of - Duration::days(w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialGroup {
    #[default]
    None,
    ZipCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSpec {
    pub source: EventType,
    pub quantity: Quantity,
    pub function: AggFunction,
    pub window: Window,
    #[serde(default)]
    pub spatial_group: SpatialGroup,
}

impl AggregateSpec {
    pub fn new(
        source: EventType,
        quantity: Quantity,
        function: AggFunction,
        window: Window,
    ) -> Self {
        Self {
            source,
            quantity,
            function,
            window,
            spatial_group: SpatialGroup::None,
        }
    }

    pub fn by_zip(mut self) -> Self {
        self.spatial_group = SpatialGroup::ZipCode;
        self
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let ok = match self.quantity {
            Quantity::Count => matches!(
                self.function,
                AggFunction::Count | AggFunction::DaysSinceLast
            ),
            Quantity::NumericValue => !matches!(self.function, AggFunction::Count),
        };
        if ok {
            Ok(())
        } else {
            Err(FeatureError::InvalidSpec(format!(
                "{}: function {:?} is incompatible with quantity {:?}",
                self.name(),
                self.function,
                self.quantity
            )))
        }
    }

    /// `{source}_{quantity}_{function}_{window}`, prefixed with `zip_` for spatial aggregates.
    pub fn name(&self) -> String {
        let quantity = match self.quantity {
            Quantity::Count => "count",
            Quantity::NumericValue => "numeric_value",
        };
        let function = match self.function {
            AggFunction::Count => "count",
            AggFunction::Mean => "mean",
            AggFunction::Min => "min",
            AggFunction::Max => "max",
            AggFunction::Stddev => "stddev",
            AggFunction::DaysSinceLast => "days_since_last",
        };
        let prefix = match self.spatial_group {
            SpatialGroup::None => "",
            SpatialGroup::ZipCode => "zip_",
        };
        format!(
            "{prefix}{}_{quantity}_{function}_{}",
            self.source,
            self.window.as_str()
        )
    }

    /// Count aggregates are never missing; everything else may be imputed.
    pub fn imputable(&self) -> bool {
        self.function != AggFunction::Count
    }

    fn uses(&self, event: &Event) -> bool {
        event.event_type == self.source
            && (self.quantity == Quantity::Count || event.numeric_value.is_some())
    }
}

impl fmt::Display for AggregateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Reduces the qualifying `(date, value)` observations, in date order.
fn reduce(spec: &AggregateSpec, as_of: NaiveDate, obs: &[(NaiveDate, f64)]) -> Option<f64> {
    match spec.function {
        AggFunction::Count => Some(obs.len() as f64),
        AggFunction::DaysSinceLast => obs.last().map(|(d, _)| (as_of - *d).num_days() as f64),
        AggFunction::Mean => {
            let values: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
            math::mean(&values)
        }
        AggFunction::Min => obs.iter().map(|(_, v)| *v).reduce(f64::min),
        AggFunction::Max => obs.iter().map(|(_, v)| *v).reduce(f64::max),
        AggFunction::Stddev => {
            let values: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
            math::stddev(&values)
        }
    }
}

fn observations<'a>(
    spec: &AggregateSpec,
    as_of: NaiveDate,
    events: impl Iterator<Item = &'a Event>,
) -> Vec<(NaiveDate, f64)> {
    let mut obs: Vec<(NaiveDate, f64)> = events
        .filter(|e| spec.uses(e) && spec.window.contains(as_of, e.event_date))
        .map(|e| (e.event_date, e.numeric_value.unwrap_or(1.0)))
        .collect();
    obs.sort_by_key(|(d, _)| *d);
    obs
}

/// Aggregate for one prediction point by direct scan of the log.
///
/// Only events dated on or before `point.as_of` and inside the window contribute.
/// Missing (`None`) when nothing qualifies, except counts which are 0.
pub fn compute_aggregate(
    spec: &AggregateSpec,
    log: &EventLog,
    point: &PredictionPoint,
) -> Option<f64> {
    let as_of = point.as_of;
    let obs = match spec.spatial_group {
        SpatialGroup::None => observations(spec, as_of, log.events_for(&point.entity_id).iter()),
        SpatialGroup::ZipCode => {
            let zip = log
                .entity(&point.entity_id)
                .and_then(|e| e.zip_code.as_deref());
            let Some(zip) = zip else {
                return if spec.function == AggFunction::Count {
                    Some(0.0)
                } else {
                    None
                };
            };
            let in_zip = log.events().iter().filter(|e| {
                log.entity(&e.entity_id).and_then(|x| x.zip_code.as_deref()) == Some(zip)
            });
            observations(spec, as_of, in_zip)
        }
    };
    reduce(spec, as_of, &obs)
}

/// Date-sorted series with prefix sums and sparse tables for O(1) window queries.
#[derive(Debug, Clone, Default)]
struct Series {
    dates: Vec<NaiveDate>,
    prefix_sum: Vec<f64>,
    prefix_sumsq: Vec<f64>,
    sparse_min: Vec<Vec<f64>>,
    sparse_max: Vec<Vec<f64>>,
}

impl Series {
    fn new(mut obs: Vec<(NaiveDate, f64)>) -> Self {
        obs.sort_by_key(|(d, _)| *d);
        let dates: Vec<NaiveDate> = obs.iter().map(|(d, _)| *d).collect();
        let values: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
        let mut prefix_sum = Vec::with_capacity(values.len() + 1);
        let mut prefix_sumsq = Vec::with_capacity(values.len() + 1);
        let (mut s, mut ss) = (0.0, 0.0);
        prefix_sum.push(0.0);
        prefix_sumsq.push(0.0);
        for v in &values {
            s += v;
            ss += v * v;
            prefix_sum.push(s);
            prefix_sumsq.push(ss);
        }
        let sparse_min = sparse_table(&values, f64::min);
        let sparse_max = sparse_table(&values, f64::max);
        Self {
            dates,
            prefix_sum,
            prefix_sumsq,
            sparse_min,
            sparse_max,
        }
    }

    fn query(table: &[Vec<f64>], lo: usize, hi: usize, op: fn(f64, f64) -> f64) -> f64 {
        let len = hi - lo;
        let k = usize::BITS as usize - 1 - len.leading_zeros() as usize;
        op(table[k][lo], table[k][hi - (1 << k)])
    }

    fn aggregate(&self, spec: &AggregateSpec, as_of: NaiveDate) -> Option<f64> {
        let hi = self.dates.partition_point(|d| *d <= as_of);
        let lo = match spec.window.days() {
            Some(w) => {
                let from = as_of - Duration::days(w);
                self.dates.partition_point(|d| *d <= from)
            }
            None => 0,
        };
        let n = hi.saturating_sub(lo);
        match spec.function {
            AggFunction::Count => Some(n as f64),
            _ if n == 0 => None,
            AggFunction::DaysSinceLast => Some((as_of - self.dates[hi - 1]).num_days() as f64),
            AggFunction::Mean => Some((self.prefix_sum[hi] - self.prefix_sum[lo]) / n as f64),
            AggFunction::Min => Some(Self::query(&self.sparse_min, lo, hi, f64::min)),
            AggFunction::Max => Some(Self::query(&self.sparse_max, lo, hi, f64::max)),
            AggFunction::Stddev => {
                if n < 2 {
                    return None;
                }
                let sum = self.prefix_sum[hi] - self.prefix_sum[lo];
                let sumsq = self.prefix_sumsq[hi] - self.prefix_sumsq[lo];
                let var = ((sumsq - sum * sum / n as f64) / (n - 1) as f64).max(0.0);
                Some(var.sqrt())
            }
        }
    }
}

fn sparse_table(values: &[f64], op: fn(f64, f64) -> f64) -> Vec<Vec<f64>> {
    let mut table = vec![values.to_vec()];
    let mut width = 1;
    while width * 2 <= values.len() {
        let prev = table.last().expect("non-empty");
        let next: Vec<f64> = (0..=values.len() - width * 2)
            .map(|i| op(prev[i], prev[i + width]))
            .collect();
        table.push(next);
        width *= 2;
    }
    table
}

/// Per-zip event series for every spatial aggregate in a feature config.
#[derive(Debug, Clone, Default)]
pub(crate) struct SpatialIndex {
    series: HashMap<(String, EventType, Quantity), Series>,
}

impl SpatialIndex {
    pub(crate) fn build(log: &EventLog, specs: &[AggregateSpec]) -> Self {
        let mut wanted: Vec<(EventType, Quantity)> = specs
            .iter()
            .filter(|s| s.spatial_group == SpatialGroup::ZipCode)
            .map(|s| (s.source, s.quantity))
            .collect();
        wanted.sort_by_key(|(t, q)| (*t, *q as u8));
        wanted.dedup();
        let mut buckets: HashMap<(String, EventType, Quantity), Vec<(NaiveDate, f64)>> =
            HashMap::new();
        for event in log.events() {
            let Some(zip) = log
                .entity(&event.entity_id)
                .and_then(|e| e.zip_code.clone())
            else {
                continue;
            };
            for (source, quantity) in &wanted {
                if event.event_type != *source {
                    continue;
                }
                let value = match quantity {
                    Quantity::Count => 1.0,
                    Quantity::NumericValue => match event.numeric_value {
                        Some(v) => v,
                        None => continue,
                    },
                };
                buckets
                    .entry((zip.clone(), *source, *quantity))
                    .or_default()
                    .push((event.event_date, value));
            }
        }
        Self {
            series: buckets
                .into_iter()
                .map(|(k, v)| (k, Series::new(v)))
                .collect(),
        }
    }

    pub(crate) fn aggregate(
        &self,
        spec: &AggregateSpec,
        zip: Option<&str>,
        as_of: NaiveDate,
    ) -> Option<f64> {
        let Some(zip) = zip else {
            return (spec.function == AggFunction::Count).then_some(0.0);
        };
        match self
            .series
            .get(&(zip.to_string(), spec.source, spec.quantity))
        {
            Some(series) => series.aggregate(spec, as_of),
            None => (spec.function == AggFunction::Count).then_some(0.0),
        }
    }
}

/// Entity-level aggregate over an already-resolved event slice.
pub(crate) fn entity_aggregate(
    spec: &AggregateSpec,
    events: &[Event],
    as_of: NaiveDate,
) -> Option<f64> {
    reduce(spec, as_of, &observations(spec, as_of, events.iter()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{DateRange, Entity};
    use crate::labels::PredictionContext;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn plus(n: i64) -> NaiveDate {
        d("2016-06-30") + Duration::days(n)
    }

    fn log() -> EventLog {
        let mut a = Entity::new("A");
        a.zip_code = Some("60637".into());
        let mut b = Entity::new("B");
        b.zip_code = Some("60637".into());
        let c = Entity::new("C");
        EventLog::new(
            vec![a, b, c],
            vec![
                Event::new("A", EventType::HivVisit, plus(-30)),
                Event::new("A", EventType::HivVisit, plus(-200)),
                Event::new("A", EventType::HivVisit, plus(10)),
                Event::new("A", EventType::Cd4Test, plus(-100)).with_value(400.0),
                Event::new("A", EventType::Cd4Test, plus(-50)).with_value(600.0),
                Event::new("A", EventType::ViralLoadTest, plus(-20)).with_value(5000.0),
                Event::new("B", EventType::Cd4Test, plus(-10)).with_value(200.0),
                Event::new("B", EventType::HivVisit, plus(0)),
            ],
            DateRange::new(d("2014-01-01"), d("2017-12-31")).unwrap(),
        )
        .unwrap()
    }

    fn point(id: &str) -> PredictionPoint {
        PredictionPoint::new(id, plus(0), PredictionContext::ClinicAppointment)
    }

    #[test]
    fn count_in_six_months() {
        let spec = AggregateSpec::new(
            EventType::HivVisit,
            Quantity::Count,
            AggFunction::Count,
            Window::Days183,
        );
        assert_eq!(compute_aggregate(&spec, &log(), &point("A")), Some(1.0));
        assert_eq!(compute_aggregate(&spec, &log(), &point("C")), Some(0.0));
    }

    #[test]
    fn mean_of_cd4_over_a_year() {
        let spec = AggregateSpec::new(
            EventType::Cd4Test,
            Quantity::NumericValue,
            AggFunction::Mean,
            Window::Days365,
        );
        assert_eq!(compute_aggregate(&spec, &log(), &point("A")), Some(500.0));
        assert_eq!(compute_aggregate(&spec, &log(), &point("C")), None);
    }

    #[test]
    fn stddev_of_single_value_is_missing() {
        let spec = AggregateSpec::new(
            EventType::ViralLoadTest,
            Quantity::NumericValue,
            AggFunction::Stddev,
            Window::AllHistory,
        );
        assert_eq!(compute_aggregate(&spec, &log(), &point("A")), None);
    }

    #[test]
    fn days_since_last_and_window_edges() {
        let spec = AggregateSpec::new(
            EventType::HivVisit,
            Quantity::Count,
            AggFunction::DaysSinceLast,
            Window::AllHistory,
        );
        assert_eq!(compute_aggregate(&spec, &log(), &point("A")), Some(30.0));
        assert_eq!(compute_aggregate(&spec, &log(), &point("B")), Some(0.0));
        // exactly 183 days back is outside (as_of - 183, as_of]
        assert!(!Window::Days183.contains(plus(0), plus(-183)));
        assert!(Window::Days183.contains(plus(0), plus(-182)));
    }

    #[test]
    fn invalid_combinations() {
        assert!(AggregateSpec::new(
            EventType::Cd4Test,
            Quantity::NumericValue,
            AggFunction::Count,
            Window::AllHistory
        )
        .validate()
        .is_err());
        assert!(AggregateSpec::new(
            EventType::Cd4Test,
            Quantity::Count,
            AggFunction::Mean,
            Window::AllHistory
        )
        .validate()
        .is_err());
    }

    #[test]
    fn spatial_index_matches_scan() {
        let log = log();
        let functions = [
            (Quantity::Count, AggFunction::Count),
            (Quantity::Count, AggFunction::DaysSinceLast),
            (Quantity::NumericValue, AggFunction::Mean),
            (Quantity::NumericValue, AggFunction::Min),
            (Quantity::NumericValue, AggFunction::Max),
            (Quantity::NumericValue, AggFunction::Stddev),
        ];
        let specs: Vec<_> = functions
            .iter()
            .flat_map(|(q, f)| {
                [Window::Days183, Window::AllHistory]
                    .into_iter()
                    .map(move |w| AggregateSpec::new(EventType::Cd4Test, *q, *f, w).by_zip())
            })
            .collect();
        let index = SpatialIndex::build(&log, &specs);
        for spec in &specs {
            for id in ["A", "B", "C"] {
                let p = point(id);
                let zip = log.entity(&p.entity_id).unwrap().zip_code.clone();
                let fast = index.aggregate(spec, zip.as_deref(), p.as_of);
                let slow = compute_aggregate(spec, &log, &p);
                match (fast, slow) {
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{spec} {id}")
                    }
                    (a, b) => assert_eq!(a, b, "{spec} {id}"),
                }
            }
        }
        let spec = AggregateSpec::new(
            EventType::Cd4Test,
            Quantity::NumericValue,
            AggFunction::Mean,
            Window::Days183,
        )
        .by_zip();
        assert_eq!(spec.name(), "zip_cd4_test_numeric_value_mean_183d");
        assert_eq!(compute_aggregate(&spec, &log, &point("A")), Some(400.0));
    }
}
