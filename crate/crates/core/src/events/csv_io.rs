use std::fs::File;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use csv::{ReaderBuilder, StringRecord, Writer};

use super::{
    DateRange, Entity, EntityId, Event, EventLog, EventStoreError, EventType, GroundTruth, Result,
};

const ENTITY_HEADER: [&str; 7] = [
    "entity_id",
    "birth_date",
    "gender",
    "race",
    "zip_code",
    "transmission_category",
    "diagnosis_date",
];
const EVENT_HEADER: [&str; 5] = [
    "entity_id",
    "event_type",
    "event_date",
    "numeric_value",
    "category_value",
];
const GROUND_TRUTH_HEADER: [&str; 3] = ["entity_id", "latent_adherence", "planted_dropout_prob"];

/// Loads `entities.csv` and `events.csv`; the date range spans the observed event dates.
pub fn ingest_csv(entities_path: &Path, events_path: &Path) -> Result<EventLog> {
    ingest_csv_with_range(entities_path, events_path, None)
}

/// Like [`ingest_csv`] with an explicit log date range.
pub fn ingest_csv_with_range(
    entities_path: &Path,
    events_path: &Path,
    date_range: Option<DateRange>,
) -> Result<EventLog> {
    let entities = read_entities(entities_path)?;
    let events = read_events(events_path)?;
    let date_range = match date_range {
        Some(r) => r,
        None => {
            let start = events.iter().map(|e| e.event_date).min();
            let end = events.iter().map(|e| e.event_date).max();
            match (start, end) {
                (Some(start), Some(end)) => DateRange::new(start, end)?,
                _ => return Err(EventStoreError::NoEvents),
            }
        }
    };
    EventLog::new(entities, events, date_range)
}

struct RowReader<'a> {
    file: String,
    header: &'a [&'a str],
}

impl RowReader<'_> {
    fn open(&self, path: &Path) -> Result<csv::Reader<File>> {
        let file = File::open(path).map_err(|source| EventStoreError::Io {
            path: self.file.clone(),
            source,
        })?;
        let mut reader = ReaderBuilder::new().flexible(true).from_reader(file);
        let found = reader.headers().map_err(|source| EventStoreError::Csv {
            path: self.file.clone(),
            source,
        })?;
        if found.iter().collect::<Vec<_>>() != self.header {
            return Err(EventStoreError::Header {
                file: self.file.clone(),
                expected: self.header.join(","),
                found: found.iter().collect::<Vec<_>>().join(","),
            });
        }
        Ok(reader)
    }

    fn line(record: &StringRecord) -> u64 {
        record.position().map(|p| p.line()).unwrap_or(0)
    }

    fn check_width(&self, record: &StringRecord) -> Result<()> {
        if record.len() != self.header.len() {
            return Err(EventStoreError::Malformed {
                file: self.file.clone(),
                line: Self::line(record),
                column: self.header[record.len().min(self.header.len() - 1)].to_string(),
                message: format!(
                    "expected {} fields, found {}",
                    self.header.len(),
                    record.len()
                ),
            });
        }
        Ok(())
    }

    fn text(&self, record: &StringRecord, col: usize) -> Option<String> {
        let raw = record[col].trim();
        (!raw.is_empty()).then(|| raw.to_string())
    }

    fn required(&self, record: &StringRecord, col: usize) -> Result<String> {
        self.text(record, col)
            .ok_or_else(|| EventStoreError::Malformed {
                file: self.file.clone(),
                line: Self::line(record),
                column: self.header[col].to_string(),
                message: "value is required".into(),
            })
    }

    fn date(&self, record: &StringRecord, col: usize) -> Result<Option<NaiveDate>> {
        match self.text(record, col) {
            None => Ok(None),
            Some(literal) => {
                literal
                    .parse::<NaiveDate>()
                    .map(Some)
                    .map_err(|_| EventStoreError::InvalidDate {
                        file: self.file.clone(),
                        line: Self::line(record),
                        column: self.header[col].to_string(),
                        literal,
                    })
            }
        }
    }

    fn number(&self, record: &StringRecord, col: usize) -> Result<Option<f64>> {
        match self.text(record, col) {
            None => Ok(None),
            Some(literal) => match literal.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(EventStoreError::Malformed {
                    file: self.file.clone(),
                    line: Self::line(record),
                    column: self.header[col].to_string(),
                    message: format!("`{literal}` is not a finite number"),
                }),
            },
        }
    }
}

fn records(reader: &mut csv::Reader<File>, file: &str) -> Result<Vec<StringRecord>> {
    reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|source| EventStoreError::Csv {
            path: file.to_string(),
            source,
        })
}

fn read_entities(path: &Path) -> Result<Vec<Entity>> {
    let rows = RowReader {
        file: path.display().to_string(),
        header: &ENTITY_HEADER,
    };
    let mut reader = rows.open(path)?;
    let mut entities = Vec::new();
    for record in records(&mut reader, &rows.file)? {
        rows.check_width(&record)?;
        entities.push(Entity {
            id: EntityId(rows.required(&record, 0)?),
            birth_date: rows.date(&record, 1)?,
            gender: rows.text(&record, 2),
            race: rows.text(&record, 3),
            zip_code: rows.text(&record, 4),
            transmission_category: rows.text(&record, 5),
            diagnosis_date: rows.date(&record, 6)?,
        });
    }
    Ok(entities)
}

fn read_events(path: &Path) -> Result<Vec<Event>> {
    let rows = RowReader {
        file: path.display().to_string(),
        header: &EVENT_HEADER,
    };
    let mut reader = rows.open(path)?;
    let mut events = Vec::new();
    for record in records(&mut reader, &rows.file)? {
        rows.check_width(&record)?;
        let event_type = rows
            .required(&record, 1)?
            .parse::<EventType>()
            .map_err(|message| EventStoreError::Malformed {
                file: rows.file.clone(),
                line: RowReader::line(&record),
                column: "event_type".into(),
                message,
            })?;
        let event_date = rows
            .date(&record, 2)?
            .ok_or_else(|| EventStoreError::Malformed {
                file: rows.file.clone(),
                line: RowReader::line(&record),
                column: "event_date".into(),
                message: "value is required".into(),
            })?;
        events.push(Event {
            entity_id: EntityId(rows.required(&record, 0)?),
            event_type,
            event_date,
            numeric_value: rows.number(&record, 3)?,
            category_value: rows.text(&record, 4),
        });
    }
    Ok(events)
}

fn csv_writer(path: &Path) -> Result<Writer<File>> {
    let file = File::create(path).map_err(|source| EventStoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Writer::from_writer(file))
}

fn date_field(date: Option<NaiveDate>, shift: Duration) -> String {
    date.map(|d| (d + shift).to_string()).unwrap_or_default()
}

/// Writes the log as `entities.csv` / `events.csv`, shifting every date by `day_offset`.
pub fn export_csv(
    log: &EventLog,
    entities_path: &Path,
    events_path: &Path,
    day_offset: i64,
) -> Result<()> {
    let shift = Duration::days(day_offset);
    let wrap = |path: &Path| {
        let path = path.display().to_string();
        move |source| EventStoreError::Csv {
            path: path.clone(),
            source,
        }
    };

    let mut w = csv_writer(entities_path)?;
    let err = wrap(entities_path);
    w.write_record(ENTITY_HEADER).map_err(&err)?;
    for e in log.entities() {
        w.write_record([
            e.id.0.clone(),
            date_field(e.birth_date, shift),
            e.gender.clone().unwrap_or_default(),
            e.race.clone().unwrap_or_default(),
            e.zip_code.clone().unwrap_or_default(),
            e.transmission_category.clone().unwrap_or_default(),
            date_field(e.diagnosis_date, shift),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|source| EventStoreError::Io {
        path: entities_path.display().to_string(),
        source,
    })?;

    let mut w = csv_writer(events_path)?;
    let err = wrap(events_path);
    w.write_record(EVENT_HEADER).map_err(&err)?;
    for e in log.events() {
        w.write_record([
            e.entity_id.0.clone(),
            e.event_type.to_string(),
            (e.event_date + shift).to_string(),
            e.numeric_value.map(|v| v.to_string()).unwrap_or_default(),
            e.category_value.clone().unwrap_or_default(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|source| EventStoreError::Io {
        path: events_path.display().to_string(),
        source,
    })
}

pub fn write_ground_truth_csv(truth: &GroundTruth, path: &Path) -> Result<()> {
    let err = |source| EventStoreError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(GROUND_TRUTH_HEADER).map_err(err)?;
    for row in &truth.entities {
        w.write_record([
            row.entity_id.0.clone(),
            row.latent_adherence.to_string(),
            row.planted_dropout_prob.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|source| EventStoreError::Io {
        path: path.display().to_string(),
        source,
    })
}
