//! As-of-date feature vectors.
//!
//! Numeric columns come from declarative [`AggregateSpec`]s plus age, days since
//! diagnosis and optional zip-level area attributes. Imputable columns are filled with
//! the training mean and paired with a `{name}_imputed` indicator column. Categorical
//! demographics are one-hot encoded against the training vocabulary, with a
//! `{attr}_missing` column absorbing both missing and unseen values. Columns are
//! ordered lexicographically by name.

mod aggregate;
mod raw;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregate::{
    compute_aggregate, AggFunction, AggregateSpec, Quantity, SpatialGroup, Window,
};
pub use raw::{RawAttributes, RAW_ATTRIBUTES, SUPPRESSION_THRESHOLD};

use crate::events::{Demographic, EntityId, EventLog, EventType, MISSING};
use crate::labels::PredictionPoint;
use aggregate::{entity_aggregate, SpatialIndex};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid aggregate spec: {0}")]
    InvalidSpec(String),
    #[error("cannot fit encoders on an empty training set")]
    EmptyTrain,
    #[error("row ({entity_id}, {as_of}) lies outside the log date range [{start}, {end}]")]
    OutOfRange {
        entity_id: EntityId,
        as_of: NaiveDate,
        start: NaiveDate,
        end: NaiveDate,
    },
    #[error("encoder columns do not match the feature config: {0}")]
    EncoderMismatch(String),
    #[error("zip attribute table: {0}")]
    ZipTable(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Static zip-level numeric attributes (census-style area descriptors).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZipAttributes {
    pub columns: Vec<String>,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl ZipAttributes {
    /// Reads `zip_code,<attr>,...`; empty cells are missing.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, FeatureError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("zip_code") {
            return Err(FeatureError::ZipTable(
                "first column must be `zip_code`".into(),
            ));
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = BTreeMap::new();
        for record in r.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let values = record
                .iter()
                .skip(1)
                .map(|v| {
                    if v.trim().is_empty() {
                        Ok(f64::NAN)
                    } else {
                        v.trim().parse::<f64>().map_err(|_| {
                            FeatureError::ZipTable(format!("line {line}: bad number `{v}`"))
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != columns.len() {
                return Err(FeatureError::ZipTable(format!(
                    "line {line}: wrong field count"
                )));
            }
            rows.insert(record[0].to_string(), values);
        }
        Ok(Self { columns, rows })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FeatureError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["zip_code".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (zip, values) in &self.rows {
            let mut rec = vec![zip.clone()];
            rec.extend(values.iter().map(|v| {
                if v.is_nan() {
                    String::new()
                } else {
                    v.to_string()
                }
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    fn value(&self, zip: Option<&str>, col: usize) -> Option<f64> {
        zip.and_then(|z| self.rows.get(z))
            .map(|v| v[col])
            .filter(|v| !v.is_nan())
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub aggregates: Vec<AggregateSpec>,
    #[serde(default)]
    pub categoricals: Vec<Demographic>,
    #[serde(default = "yes")]
    pub include_age: bool,
    #[serde(default = "yes")]
    pub include_days_since_diagnosis: bool,
}

impl FeatureConfig {
    /// Visit history, lab results, diagnoses, medications and zip-level aggregates.
    pub fn standard() -> Self {
        use AggFunction::*;
        use EventType::*;
        use Quantity::{Count as N, NumericValue as V};
        use Window::*;
        let mut aggregates = Vec::new();
        for w in [Days183, Days365, Days1095, AllHistory] {
            aggregates.push(AggregateSpec::new(HivVisit, N, Count, w));
        }
        aggregates.push(AggregateSpec::new(HivVisit, N, DaysSinceLast, AllHistory));
        aggregates.push(AggregateSpec::new(OtherVisit, N, Count, Days365));
        aggregates.push(AggregateSpec::new(OtherVisit, N, Count, AllHistory));
        for lab in [ViralLoadTest, Cd4Test] {
            for w in [Days365, Days1095] {
                for f in [Mean, Min, Max, Stddev] {
                    aggregates.push(AggregateSpec::new(lab, V, f, w));
                }
            }
            aggregates.push(AggregateSpec::new(lab, N, Count, Days365));
            aggregates.push(AggregateSpec::new(lab, N, DaysSinceLast, AllHistory));
        }
        aggregates.push(AggregateSpec::new(Diagnosis, N, Count, AllHistory));
        aggregates.push(AggregateSpec::new(
            OpportunisticInfection,
            N,
            Count,
            AllHistory,
        ));
        aggregates.push(AggregateSpec::new(Medication, N, Count, Days365));
        aggregates.push(AggregateSpec::new(Medication, N, DaysSinceLast, AllHistory));
        aggregates.push(AggregateSpec::new(HivVisit, N, Count, Days365).by_zip());
        aggregates.push(AggregateSpec::new(ViralLoadTest, V, Mean, Days365).by_zip());
        Self {
            aggregates,
            categoricals: Demographic::ALL.to_vec(),
            include_age: true,
            include_days_since_diagnosis: true,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let mut names = BTreeSet::new();
        for spec in &self.aggregates {
            spec.validate()?;
            if !names.insert(spec.name()) {
                return Err(FeatureError::InvalidSpec(format!(
                    "duplicate aggregate `{}`",
                    spec.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NumericSource {
    Aggregate(AggregateSpec),
    Age,
    DaysSinceDiagnosis,
    Zip(usize),
}

#[derive(Debug, Clone, PartialEq)]
struct NumericColumn {
    name: String,
    source: NumericSource,
    imputable: bool,
}

fn numeric_columns(config: &FeatureConfig, zip: Option<&ZipAttributes>) -> Vec<NumericColumn> {
    let mut cols: Vec<NumericColumn> = config
        .aggregates
        .iter()
        .map(|s| NumericColumn {
            name: s.name(),
            source: NumericSource::Aggregate(*s),
            imputable: s.imputable(),
        })
        .collect();
    if config.include_age {
        cols.push(NumericColumn {
            name: "age".into(),
            source: NumericSource::Age,
            imputable: true,
        });
    }
    if config.include_days_since_diagnosis {
        cols.push(NumericColumn {
            name: "days_since_diagnosis".into(),
            source: NumericSource::DaysSinceDiagnosis,
            imputable: true,
        });
    }
    if let Some(zip) = zip {
        for (i, c) in zip.columns.iter().enumerate() {
            cols.push(NumericColumn {
                name: format!("zip_attr_{c}"),
                source: NumericSource::Zip(i),
                imputable: true,
            });
        }
    }
    cols
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericImputation {
    pub name: String,
    pub imputable: bool,
    /// Training mean of the non-missing values (0 for all-missing columns).
    pub constant: f64,
}

/// Everything learned from training rows: imputation constants and vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderState {
    pub numeric: Vec<NumericImputation>,
    pub categories: BTreeMap<Demographic, Vec<String>>,
    pub columns: Vec<String>,
    pub warnings: Vec<String>,
    /// Keys of the rows the encoder was fitted on.
    pub fitted_rows: BTreeSet<(EntityId, NaiveDate)>,
}

impl EncoderState {
    pub fn was_fitted_on(&self, point: &PredictionPoint) -> bool {
        self.fitted_rows
            .contains(&(point.entity_id.clone(), point.as_of))
    }
}

fn one_hot_name(attr: Demographic, value: &str) -> String {
    format!("{}_{}", attr.as_str(), value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<PredictionPoint>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
    /// `(value column, indicator column)` for every imputable column.
    pub imputed_columns: Vec<(usize, usize)>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    /// Indicator matrix aligned to `imputed_columns`.
    pub fn imputed_flags(&self) -> Array2<u8> {
        Array2::from_shape_fn((self.n_rows(), self.imputed_columns.len()), |(r, k)| {
            self.values[[r, self.imputed_columns[k].1]] as u8
        })
    }

    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: idx.iter().map(|i| self.rows[*i].clone()).collect(),
            columns: self.columns.clone(),
            values: self.values.select(ndarray::Axis(0), idx),
            imputed_columns: self.imputed_columns.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["entity_id".to_string(), "as_of".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![row.entity_id.0.clone(), row.as_of.to_string()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct RawRow {
    numeric: Vec<Option<f64>>,
    categorical: Vec<Option<String>>,
}

/// Binds a feature config to one event log, with the zip-level index prebuilt.
pub struct FeatureBuilder<'a> {
    config: &'a FeatureConfig,
    zip: Option<&'a ZipAttributes>,
    log: &'a EventLog,
    numeric: Vec<NumericColumn>,
    spatial: SpatialIndex,
}

impl<'a> FeatureBuilder<'a> {
    pub fn new(
        config: &'a FeatureConfig,
        zip: Option<&'a ZipAttributes>,
        log: &'a EventLog,
    ) -> Result<Self, FeatureError> {
        config.validate()?;
        Ok(Self {
            config,
            zip,
            log,
            numeric: numeric_columns(config, zip),
            spatial: SpatialIndex::build(log, &config.aggregates),
        })
    }

    pub fn log(&self) -> &EventLog {
        self.log
    }

    fn check_row(&self, point: &PredictionPoint) -> Result<(), FeatureError> {
        let range = self.log.date_range();
        if !range.contains(point.as_of) {
            return Err(FeatureError::OutOfRange {
                entity_id: point.entity_id.clone(),
                as_of: point.as_of,
                start: range.start,
                end: range.end,
            });
        }
        Ok(())
    }

    fn raw_row(&self, point: &PredictionPoint) -> RawRow {
        let entity = self.log.entity(&point.entity_id);
        let zip = entity.and_then(|e| e.zip_code.as_deref());
        let events = self.log.events_for(&point.entity_id);
        let numeric = self
            .numeric
            .iter()
            .map(|col| match col.source {
                NumericSource::Aggregate(spec) => match spec.spatial_group {
                    SpatialGroup::None => entity_aggregate(&spec, events, point.as_of),
                    SpatialGroup::ZipCode => self.spatial.aggregate(&spec, zip, point.as_of),
                },
                NumericSource::Age => entity.and_then(|e| e.age_at(point.as_of)),
                NumericSource::DaysSinceDiagnosis => entity
                    .and_then(|e| e.diagnosis_date)
                    .filter(|d| *d <= point.as_of)
                    .map(|d| (point.as_of - d).num_days() as f64),
                NumericSource::Zip(i) => self.zip.and_then(|z| z.value(zip, i)),
            })
            .collect();
        let categorical = self
            .config
            .categoricals
            .iter()
            .map(|attr| {
                entity
                    .and_then(|e| e.demographic(*attr))
                    .map(str::to_string)
            })
            .collect();
        RawRow {
            numeric,
            categorical,
        }
    }

    fn raw_rows(&self, rows: &[PredictionPoint]) -> Result<Vec<RawRow>, FeatureError> {
        for p in rows {
            self.check_row(p)?;
        }
        Ok(rows.par_iter().map(|p| self.raw_row(p)).collect())
    }

    pub fn fit(&self, train_rows: &[PredictionPoint]) -> Result<EncoderState, FeatureError> {
        if train_rows.is_empty() {
            return Err(FeatureError::EmptyTrain);
        }
        let raw = self.raw_rows(train_rows)?;
        let mut warnings = Vec::new();
        let numeric: Vec<NumericImputation> = self
            .numeric
            .iter()
            .enumerate()
            .map(|(j, col)| {
                let observed: Vec<f64> = raw.iter().filter_map(|r| r.numeric[j]).collect();
                let constant = match crate::math::mean(&observed) {
                    Some(m) => m,
                    None => {
                        warnings.push(format!(
                            "column `{}` is missing on every training row; imputing 0",
                            col.name
                        ));
                        0.0
                    }
                };
                NumericImputation {
                    name: col.name.clone(),
                    imputable: col.imputable,
                    constant,
                }
            })
            .collect();
        let mut categories = BTreeMap::new();
        for (k, attr) in self.config.categoricals.iter().enumerate() {
            let seen: BTreeSet<String> = raw
                .iter()
                .filter_map(|r| r.categorical[k].clone())
                .filter(|v| v != MISSING)
                .collect();
            categories.insert(*attr, seen.into_iter().collect::<Vec<_>>());
        }
        let mut columns = Vec::new();
        for col in &numeric {
            columns.push(col.name.clone());
            if col.imputable {
                columns.push(format!("{}_imputed", col.name));
            }
        }
        for (attr, values) in &categories {
            for v in values {
                columns.push(one_hot_name(*attr, v));
            }
            columns.push(one_hot_name(*attr, MISSING));
        }
        columns.sort();
        columns.dedup();
        Ok(EncoderState {
            numeric,
            categories,
            columns,
            warnings,
            fitted_rows: train_rows
                .iter()
                .map(|p| (p.entity_id.clone(), p.as_of))
                .collect(),
        })
    }

    pub fn build(
        &self,
        rows: &[PredictionPoint],
        encoder: &EncoderState,
    ) -> Result<FeatureMatrix, FeatureError> {
        if encoder.numeric.len() != self.numeric.len()
            || encoder
                .numeric
                .iter()
                .zip(&self.numeric)
                .any(|(a, b)| a.name != b.name)
        {
            return Err(FeatureError::EncoderMismatch(
                "numeric columns differ from the fitted encoder".into(),
            ));
        }
        let index: HashMap<&str, usize> = encoder
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let lookup = |name: &str| {
            index.get(name).copied().ok_or_else(|| {
                FeatureError::EncoderMismatch(format!("column `{name}` not in encoder"))
            })
        };
        let mut numeric_slots = Vec::with_capacity(encoder.numeric.len());
        let mut imputed_columns = Vec::new();
        for col in &encoder.numeric {
            let value = lookup(&col.name)?;
            let flag = if col.imputable {
                let f = lookup(&format!("{}_imputed", col.name))?;
                imputed_columns.push((value, f));
                Some(f)
            } else {
                None
            };
            numeric_slots.push((value, flag, col.constant));
        }
        let mut categorical_slots = Vec::new();
        for attr in &self.config.categoricals {
            let vocab = encoder.categories.get(attr).ok_or_else(|| {
                FeatureError::EncoderMismatch(format!("no vocabulary for `{attr}`"))
            })?;
            let mut by_value = HashMap::new();
            for v in vocab {
                by_value.insert(v.clone(), lookup(&one_hot_name(*attr, v))?);
            }
            categorical_slots.push((by_value, lookup(&one_hot_name(*attr, MISSING))?));
        }
        imputed_columns.sort();

        let raw = self.raw_rows(rows)?;
        let n_cols = encoder.columns.len();
        let mut values = Array2::<f64>::zeros((rows.len(), n_cols));
        for (mut out, r) in values.outer_iter_mut().zip(&raw) {
            for ((value, flag, constant), v) in numeric_slots.iter().zip(&r.numeric) {
                match v {
                    Some(x) => out[*value] = *x,
                    None => {
                        out[*value] = *constant;
                        if let Some(f) = flag {
                            out[*f] = 1.0;
                        }
                    }
                }
            }
            for ((by_value, missing), v) in categorical_slots.iter().zip(&r.categorical) {
                match v.as_ref().and_then(|v| by_value.get(v)) {
                    Some(col) => out[*col] = 1.0,
                    None => out[*missing] = 1.0,
                }
            }
        }
        Ok(FeatureMatrix {
            rows: rows.to_vec(),
            columns: encoder.columns.clone(),
            values,
            imputed_columns,
        })
    }
}

pub fn fit_encoders(
    config: &FeatureConfig,
    zip: Option<&ZipAttributes>,
    train_rows: &[PredictionPoint],
    log: &EventLog,
) -> Result<EncoderState, FeatureError> {
    FeatureBuilder::new(config, zip, log)?.fit(train_rows)
}

pub fn build_feature_matrix(
    config: &FeatureConfig,
    zip: Option<&ZipAttributes>,
    rows: &[PredictionPoint],
    log: &EventLog,
    encoder: &EncoderState,
) -> Result<FeatureMatrix, FeatureError> {
    FeatureBuilder::new(config, zip, log)?.build(rows, encoder)
}
