//! The experiment runner: data, cohort, labels, splits, features, fit, evaluate, audit, select.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Duration, Months, NaiveDate};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use retain_core::evaluation::{
    evaluate_scores, flag_top, rank_model_groups, write_evaluations_csv, EvaluationRecord,
    Selection,
};
use retain_core::events::synthetic::synthetic_zip_attributes;
use retain_core::events::{
    export_csv, generate_synthetic_cohort, ingest_csv, write_ground_truth_csv, EventLog,
    GroundTruth,
};
use retain_core::fairness::{
    audit_model, group_columns, joint_select, write_audits_csv, AuditReport, JointSelection,
};
use retain_core::features::{EncoderState, FeatureBuilder, FeatureMatrix, ZipAttributes};
use retain_core::labels::{
    build_clinic_cohort, build_label_matrix, build_roster_cohort, LabelMatrix, PredictionPoint,
};
use retain_core::learners::{fit, LearnerSpec, TrainedModel};
use retain_core::temporal::{
    check_leakage, generate_splits, write_splits_csv, LeakageFinding, Recompute, TemporalConfig,
    TimeSplit,
};

use crate::config::{DataSource, ExperimentConfig, LeakagePolicy, Scenario};
use crate::store::RunStore;

/// Command-line overrides that are not part of the run id.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub jobs: Option<usize>,
    /// Forces a leakage policy regardless of the config.
    pub leakage: Option<LeakagePolicy>,
}

pub struct Dataset {
    pub log: EventLog,
    pub zip: Option<ZipAttributes>,
    pub truth: Option<GroundTruth>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let (log, truth) = generate_synthetic_cohort(s)?;
            Ok(Dataset {
                log,
                zip: Some(synthetic_zip_attributes(s.seed)),
                truth: Some(truth),
            })
        }
        DataSource::Files {
            entities,
            events,
            zip_attributes,
        } => {
            let log = ingest_csv(entities, events)?;
            let zip = match zip_attributes {
                Some(p) => {
                    let f = std::fs::File::open(p)
                        .with_context(|| format!("opening {}", p.display()))?;
                    Some(ZipAttributes::read_csv(f)?)
                }
                None => None,
            };
            Ok(Dataset {
                log,
                zip,
                truth: None,
            })
        }
    }
}

/// Monthly roster dates whose outcome window is observable.
pub fn roster_dates(t: &TemporalConfig) -> Vec<NaiveDate> {
    let window = Duration::days(t.label_window_days);
    (1..)
        .map_while(|m| t.feature_start.checked_add_months(Months::new(m)))
        .take_while(|d| *d + window <= t.data_end)
        .collect()
}

/// Every prediction point whose label is observable by `data_end`.
pub fn build_cohort(
    scenario: Scenario,
    log: &EventLog,
    t: &TemporalConfig,
) -> Result<Vec<PredictionPoint>> {
    let last = t.data_end - Duration::days(t.label_window_days);
    if last < t.feature_start {
        bail!(
            "no observable outcome windows: data_end {} minus {} days precedes feature_start {}",
            t.data_end,
            t.label_window_days,
            t.feature_start
        );
    }
    Ok(match scenario {
        Scenario::Clinic => build_clinic_cohort(log, t.feature_start, last)?,
        Scenario::HealthDepartment => {
            let mut rows = Vec::new();
            for d in roster_dates(t) {
                rows.extend(build_roster_cohort(log, d)?);
            }
            rows
        }
    })
}

/// File-system-safe name for a model group.
pub fn model_slug(spec: &LearnerSpec) -> String {
    let digest = Sha256::digest(spec.model_group().as_bytes());
    format!("{}_{}", spec.family.as_str(), &hex::encode(digest)[..10])
}

pub fn model_path(split_id: usize, spec: &LearnerSpec) -> String {
    format!("models/split_{split_id:03}/{}.json", model_slug(spec))
}

pub fn encoder_path(split_id: usize) -> String {
    format!("encoders/split_{split_id:03}.json")
}

/// Everything a finished run produced, in memory.
pub struct RunOutcome {
    pub run_id: String,
    pub cached: bool,
    pub splits: Vec<TimeSplit>,
    pub records: Vec<EvaluationRecord>,
    pub audits: Vec<AuditReport>,
    pub performance: Option<Selection>,
    pub joint: Option<JointSelection>,
    pub selected: String,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.with_context(|| format!("stage `{name}` failed"))
}

fn csv_bytes<F>(f: F) -> impl FnOnce(&mut Vec<u8>) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> csv::Result<()>,
{
    move |buf| f(buf).map_err(anyhow::Error::from)
}

fn write_findings(findings: &[LeakageFinding], buf: &mut Vec<u8>) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(["split_id", "kind", "entity_id", "as_of", "detail"])?;
    for f in findings {
        w.write_record([
            f.split_id.to_string(),
            serde_json::to_value(f.kind)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default(),
            f.entity_id.to_string(),
            f.as_of.to_string(),
            f.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct SplitResult {
    records: Vec<EvaluationRecord>,
    audits: Vec<AuditReport>,
    findings: Vec<LeakageFinding>,
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = opts.jobs {
            b = b.num_threads(j.max(1));
        }
        b.build()?
    };
    pool.install(|| run_inner(cfg, opts))
}

fn run_inner(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    let run_id = cfg.run_id();
    let store = RunStore::open(&cfg.output_dir, &run_id)?;
    store.put("config.json", cfg.normalized().as_bytes())?;
    if store.is_done("select") {
        log::info!("run {run_id} already complete; reusing cached results");
        return load_outcome(&store);
    }
    let policy = opts.leakage.unwrap_or(cfg.leakage.on_finding);

    let data = stage("data", load_data(cfg))?;
    if let (DataSource::Synthetic(_), false) = (&cfg.data, store.is_done("data")) {
        std::fs::create_dir_all(store.path("data"))?;
        stage(
            "data",
            export_csv(
                &data.log,
                &store.path("data/entities.csv"),
                &store.path("data/events.csv"),
                0,
            )
            .map_err(anyhow::Error::from),
        )?;
        if let Some(t) = &data.truth {
            write_ground_truth_csv(t, &store.path("data/ground_truth.csv"))?;
        }
    }
    store.mark_done("data")?;
    let log = &data.log;
    let temporal = cfg.temporal_config(log.date_range());
    temporal.validate()?;

    let cohort = stage("cohort", build_cohort(cfg.scenario, log, &temporal))?;
    log::info!("cohort: {} prediction points", cohort.len());
    store.mark_done("cohort")?;

    let labels = stage(
        "labels",
        build_label_matrix(&cohort, log, &cfg.label).map_err(anyhow::Error::from),
    )?;
    store.put_with("labels.csv", csv_bytes(|b| labels.write_csv(b)))?;
    store.mark_done("labels")?;

    let mut splits = stage(
        "splits",
        generate_splits(&temporal).map_err(anyhow::Error::from),
    )?;
    if let Some(n) = cfg.temporal.last_n_splits {
        let drop = splits.len().saturating_sub(n);
        splits.drain(..drop);
    }
    store.put_with("splits.csv", csv_bytes(|b| write_splits_csv(&splits, b)))?;
    store.put("splits.json", serde_json::to_string_pretty(&splits)?.as_bytes())?;
    store.mark_done("splits")?;

    let mut records = Vec::new();
    let mut audits = Vec::new();
    let mut findings = Vec::new();
    for split in &splits {
        let r = run_split(cfg, &store, &data, &labels, split, policy)?;
        records.extend(r.records);
        audits.extend(r.audits);
        findings.extend(r.findings);
    }
    if records.is_empty() {
        bail!("stage `fit` failed: no split had both training and test rows");
    }
    store.put_with("leakage.csv", csv_bytes(|b| write_findings(&findings, b)))?;
    store.mark_done("features")?;
    store.mark_done("fit")?;
    store.put_with(
        "evaluations.csv",
        csv_bytes(|b| write_evaluations_csv(&records, b)),
    )?;
    store.put_with("audits.csv", csv_bytes(|b| write_audits_csv(&audits, b)))?;
    store.mark_done("evaluate")?;

    let outcome = stage("select", select(cfg, &run_id, splits, records, audits))?;
    store.put_with("selection.csv", |b| write_selection(cfg, &outcome, b))?;
    store.put_with("ranking.csv", |b| write_ranking(&outcome, b))?;
    store.mark_done("select")?;
    store.log_line(&format!("selected {}", outcome.selected))?;
    Ok(outcome)
}

fn run_split(
    cfg: &ExperimentConfig,
    store: &RunStore,
    data: &Dataset,
    labels: &LabelMatrix,
    split: &TimeSplit,
    policy: LeakagePolicy,
) -> Result<SplitResult> {
    let id = split.split_id;
    let train_idx = split.train_indices(&labels.rows);
    let test_idx = split.test_indices(&labels.rows);
    let empty = SplitResult {
        records: vec![],
        audits: vec![],
        findings: vec![],
    };
    if train_idx.is_empty() || test_idx.is_empty() {
        log::warn!(
            "split {id}: {} training and {} test rows; skipped",
            train_idx.len(),
            test_idx.len()
        );
        store.log_line(&format!("split {id} skipped: empty train or test set"))?;
        return Ok(empty);
    }
    let y_train = labels.select(&train_idx);
    let y_test = labels.select(&test_idx);
    if y_train.labels.iter().all(|l| *l) || y_train.labels.iter().all(|l| !*l) {
        log::warn!("split {id}: training labels are all one class");
    }

    let started = std::time::Instant::now();
    let (encoder, x_train, x_test, findings) = stage("features", (|| {
        let builder = FeatureBuilder::new(&cfg.features, data.zip.as_ref(), &data.log)?;
        let encoder = builder.fit(&y_train.rows)?;
        let x_train = builder.build(&y_train.rows, &encoder)?;
        let x_test = builder.build(&y_test.rows, &encoder)?;
        let recompute = Recompute {
            config: &cfg.features,
            zip: data.zip.as_ref(),
            log: &data.log,
            sample: cfg.leakage.recompute_sample,
        };
        let findings = check_leakage(
            split,
            &y_train,
            &x_train,
            &x_test,
            &encoder,
            Some(&recompute),
        )?;
        Ok((encoder, x_train, x_test, findings))
    })())?;
    if !findings.is_empty() {
        let first = &findings[0];
        let msg = format!(
            "split {id}: {} leakage finding(s); first: {:?} on ({}, {}): {}",
            findings.len(),
            first.kind,
            first.entity_id,
            first.as_of,
            first.detail
        );
        match policy {
            LeakagePolicy::Abort => bail!("stage `features` failed: {msg}"),
            LeakagePolicy::Warn => {
                log::warn!("{msg}");
                store.log_line(&format!("warning: {msg}"))?;
            }
        }
    }
    for w in &encoder.warnings {
        log::warn!("split {id}: {w}");
    }
    store.put(&encoder_path(id), serde_json::to_string(&encoder)?.as_bytes())?;
    if cfg.write_matrices {
        store.put_with(
            &format!("matrices/split_{id:03}_train.csv"),
            csv_bytes(|b| x_train.write_csv(b)),
        )?;
        store.put_with(
            &format!("matrices/split_{id:03}_test.csv"),
            csv_bytes(|b| x_test.write_csv(b)),
        )?;
    }

    log::info!(
        "split {id}: {} train x {} test rows, {} features in {:.1?}",
        x_train.n_rows(),
        x_test.n_rows(),
        x_train.n_cols(),
        started.elapsed()
    );
    let started = std::time::Instant::now();
    let models: Vec<TrainedModel> = stage(
        "fit",
        cfg.learners
            .par_iter()
            .map(|spec| fit_cached(store, spec, &x_train, &y_train, id))
            .collect(),
    )?;

    let groups = group_columns(&data.log, &y_test.rows, &cfg.audit.attributes);
    let evaluated: Vec<(EvaluationRecord, AuditReport)> = stage(
        "evaluate",
        models
            .par_iter()
            .map(|m| evaluate_model(cfg, m, &x_test, &y_test, &data.log, &groups, id))
            .collect(),
    )?;
    let (records, audits) = evaluated.into_iter().unzip();
    log::info!(
        "split {id}: {} models fitted and evaluated in {:.1?}",
        models.len(),
        started.elapsed()
    );
    Ok(SplitResult {
        records,
        audits,
        findings,
    })
}

fn fit_cached(
    store: &RunStore,
    spec: &LearnerSpec,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    split_id: usize,
) -> Result<TrainedModel> {
    let rel = model_path(split_id, spec);
    if store.exists(&rel) {
        return Ok(TrainedModel::from_json(&store.read(&rel)?)?);
    }
    let started = std::time::Instant::now();
    let model = fit(spec, x, y, split_id)
        .with_context(|| format!("fitting {} on split {split_id}", spec.model_group()))?;
    log::debug!(
        "split {split_id}: fitted {} in {:.1?}",
        model.model_group,
        started.elapsed()
    );
    for w in &model.warnings {
        log::warn!("{} split {split_id}: {w}", model.model_group);
    }
    store.put(&rel, model.to_json()?.as_bytes())?;
    Ok(model)
}

fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    log: &EventLog,
    groups: &BTreeMap<retain_core::events::Demographic, Vec<String>>,
    split_id: usize,
) -> Result<(EvaluationRecord, AuditReport)> {
    let scores = model.score(x, log)?;
    let record = evaluate_scores(&model.model_group, split_id, &scores, y, &cfg.k_grid)?;
    let flagged = flag_top(&scores, &y.rows, cfg.selection.k_pct)?;
    let audit = audit_model(
        &model.model_group,
        split_id,
        &flagged,
        &y.labels,
        groups,
        &cfg.audit,
    )?;
    Ok((record, audit))
}

fn select(
    cfg: &ExperimentConfig,
    run_id: &str,
    splits: Vec<TimeSplit>,
    records: Vec<EvaluationRecord>,
    audits: Vec<AuditReport>,
) -> Result<RunOutcome> {
    let candidates = cfg.candidates();
    let cand_records: Vec<EvaluationRecord> = records
        .iter()
        .filter(|r| candidates.contains(&r.model_group))
        .cloned()
        .collect();
    if cand_records.is_empty() {
        bail!("the grid has no non-baseline learners to select from");
    }
    let performance = rank_model_groups(&cand_records, &cfg.selection)?;
    let joint = if cfg.audit.focus.is_some() {
        let cand_audits: Vec<AuditReport> = audits
            .iter()
            .filter(|a| candidates.contains(&a.model_group))
            .cloned()
            .collect();
        let j = joint_select(&cand_records, &cand_audits, &cfg.selection, &cfg.audit)?;
        if let Some(w) = &j.warning {
            log::warn!("{w}");
        }
        Some(j)
    } else {
        None
    };
    let selected = joint
        .as_ref()
        .map(|j| j.model_group.clone())
        .unwrap_or_else(|| performance.model_group.clone());
    Ok(RunOutcome {
        run_id: run_id.to_string(),
        cached: false,
        splits,
        records,
        audits,
        performance: Some(performance),
        joint,
        selected,
    })
}

fn performance_rationale(cfg: &ExperimentConfig, s: &Selection) -> String {
    let top = &s.ranking[0];
    format!(
        "within {} of the per-split best precision@{}% in {} of {} splits ({:?}); mean precision {:.4}",
        cfg.selection.regret_band,
        cfg.selection.k_pct,
        top.points,
        s.window.len(),
        s.window,
        top.mean_precision
    )
}

fn write_selection(cfg: &ExperimentConfig, o: &RunOutcome, buf: &mut Vec<u8>) -> Result<()> {
    let perf = o
        .performance
        .as_ref()
        .ok_or_else(|| anyhow!("no performance ranking"))?;
    let top = perf
        .ranking
        .iter()
        .find(|r| r.model_group == o.selected)
        .ok_or_else(|| anyhow!("selected group missing from ranking"))?;
    let (rationale, warning) = match &o.joint {
        Some(j) => (j.rationale.clone(), j.warning.clone().unwrap_or_default()),
        None => (performance_rationale(cfg, perf), String::new()),
    };
    let window: Vec<String> = perf.window.iter().map(|s| s.to_string()).collect();
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "model_group",
        "k_pct",
        "regret_band",
        "window",
        "points",
        "mean_precision",
        "fairness_aware",
        "rationale",
        "warning",
    ])?;
    w.write_record([
        o.selected.clone(),
        cfg.selection.k_pct.to_string(),
        cfg.selection.regret_band.to_string(),
        window.join(" "),
        top.points.to_string(),
        top.mean_precision.to_string(),
        o.joint.is_some().to_string(),
        rationale,
        warning,
    ])?;
    w.flush()?;
    Ok(())
}

fn write_ranking(o: &RunOutcome, buf: &mut Vec<u8>) -> Result<()> {
    let perf = o
        .performance
        .as_ref()
        .ok_or_else(|| anyhow!("no performance ranking"))?;
    let in_band: BTreeMap<&str, bool> = o
        .joint
        .iter()
        .flat_map(|j| j.ranking.iter())
        .map(|c| (c.model_group.as_str(), c.in_band))
        .collect();
    let mut w = csv::Writer::from_writer(buf);
    w.write_record([
        "performance_rank",
        "model_group",
        "points",
        "mean_precision",
        "in_band",
    ])?;
    for (i, r) in perf.ranking.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.model_group.clone(),
            r.points.to_string(),
            r.mean_precision.to_string(),
            in_band
                .get(r.model_group.as_str())
                .map(|b| b.to_string())
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a finished run back from disk.
pub fn load_outcome(store: &RunStore) -> Result<RunOutcome> {
    let records = crate::report::read_evaluations(&store.path("evaluations.csv"))?;
    let selected = read_selected(store)?;
    let splits = read_splits(store)?;
    Ok(RunOutcome {
        run_id: store.run_id().to_string(),
        cached: true,
        splits,
        records,
        audits: Vec::new(),
        performance: None,
        joint: None,
        selected,
    })
}

pub fn read_selected(store: &RunStore) -> Result<String> {
    let mut r = csv::Reader::from_path(store.path("selection.csv"))
        .context("run has no selection.csv")?;
    let row = r
        .records()
        .next()
        .ok_or_else(|| anyhow!("selection.csv is empty"))??;
    Ok(row[0].to_string())
}

pub fn read_splits(store: &RunStore) -> Result<Vec<TimeSplit>> {
    Ok(serde_json::from_str(&store.read("splits.json")?)?)
}

/// Human-readable one-paragraph summary of a run.
pub fn summary(o: &RunOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {}", o.run_id);
    if o.cached {
        let _ = writeln!(s, "already complete; reused stored results");
    }
    let _ = writeln!(s, "splits: {}", o.splits.len());
    let _ = writeln!(s, "selected: {}", o.selected);
    if let Some(j) = &o.joint {
        let _ = writeln!(s, "rationale: {}", j.rationale);
        if let Some(w) = &j.warning {
            let _ = writeln!(s, "warning: {w}");
        }
    }
    s
}

/// The selected model and its encoder from the most recent split.
pub fn load_selected(
    store: &RunStore,
    cfg: &ExperimentConfig,
) -> Result<(TrainedModel, EncoderState)> {
    let selected = read_selected(store)?;
    let spec = cfg
        .learners
        .iter()
        .find(|l| l.model_group() == selected)
        .ok_or_else(|| anyhow!("selected group `{selected}` is not in the config grid"))?;
    let splits = read_splits(store)?;
    for split in splits.iter().rev() {
        let rel = model_path(split.split_id, spec);
        if store.exists(&rel) {
            let model = TrainedModel::from_json(&store.read(&rel)?)?;
            let encoder: EncoderState =
                serde_json::from_str(&store.read(&encoder_path(split.split_id))?)?;
            return Ok((model, encoder));
        }
    }
    bail!("no stored model for `{selected}`")
}
