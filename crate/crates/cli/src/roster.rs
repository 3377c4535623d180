//! Ranked outreach lists from the selected model.

use std::path::PathBuf;

use anyhow::{bail, Result};
use chrono::NaiveDate;

use retain_core::evaluation::{n_flagged, rank_order};
use retain_core::features::FeatureBuilder;
use retain_core::labels::{build_clinic_cohort, build_roster_cohort};

use crate::config::{ExperimentConfig, Scenario};
use crate::pipeline::{load_data, load_selected};
use crate::store::RunStore;

/// Scores everyone eligible on `as_of` and writes the top `k_pct` percent
/// (the selection k unless overridden) to `roster_<as_of>.csv`.
pub fn score_roster(
    store: &RunStore,
    cfg: &ExperimentConfig,
    as_of: NaiveDate,
    k_pct: Option<f64>,
) -> Result<PathBuf> {
    if store.first_missing_stage().is_some() {
        bail!("run {} has no selected model yet", store.run_id());
    }
    let k = k_pct.unwrap_or(cfg.selection.k_pct);
    if !(k > 0.0 && k <= 100.0) {
        bail!("k_pct must be in (0, 100], got {k}");
    }
    let data = load_data(cfg)?;
    let range = data.log.date_range();
    if !range.contains(as_of) {
        bail!(
            "as_of {as_of} is outside the feature-computable range {} to {}",
            range.start,
            range.end
        );
    }
    let (model, encoder) = load_selected(store, cfg)?;
    let rows = match cfg.scenario {
        Scenario::HealthDepartment => build_roster_cohort(&data.log, as_of)?,
        Scenario::Clinic => build_clinic_cohort(&data.log, as_of, as_of)?,
    };
    let rel = format!("roster_{as_of}.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "entity_id",
        "as_of",
        "score",
        "factor_1",
        "contribution_1",
        "factor_2",
        "contribution_2",
        "factor_3",
        "contribution_3",
    ])?;
    if !rows.is_empty() {
        let builder = FeatureBuilder::new(&cfg.features, data.zip.as_ref(), &data.log)?;
        let x = builder.build(&rows, &encoder)?;
        let scores = model.score(&x, &data.log)?;
        let order = rank_order(&scores, &rows)?;
        for (rank, i) in order[..n_flagged(rows.len(), k)].iter().enumerate() {
            let mut rec = vec![
                (rank + 1).to_string(),
                rows[*i].entity_id.to_string(),
                as_of.to_string(),
                scores[*i].to_string(),
            ];
            let contrib = model.contributions(&x, &data.log, *i)?;
            for j in 0..3 {
                match contrib.get(j) {
                    Some((f, v)) => {
                        rec.push(f.clone());
                        rec.push(v.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(rec)?;
        }
    } else {
        log::warn!("no entities are eligible on {as_of}");
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!(e.to_string()))?;
    store.put(&rel, &bytes)
}
