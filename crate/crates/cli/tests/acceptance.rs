//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails if any did.
//! Runs without the libtest harness so the lines always reach stdout.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration as Elapsed, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use chrono::{Duration, NaiveDate};
use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retain_cli::config::{ExperimentConfig, RawConfig};
use retain_cli::pipeline::{
    build_cohort, load_data, load_selected, read_splits, run_experiment, RunOptions,
};
use retain_cli::roster::score_roster;
use retain_cli::store::RunStore;
use retain_core::events::synthetic::{date, GroupBias};
use retain_core::events::{
    generate_synthetic_cohort, DateRange, Demographic, Entity, EventLog, SyntheticConfig,
};
use retain_core::evaluation::{
    flag_top, pr_policy_curve, rank_model_groups, select_model, selection_window,
    EvaluationRecord, SelectionRule, TopK,
};
use retain_core::fairness::{
    audit_model, group_columns, joint_select, AttributeAudit, AuditConfig, AuditReport,
    GroupStats,
};
use retain_core::features::{FeatureBuilder, FeatureMatrix};
use retain_core::labels::{
    access_label, build_clinic_cohort, build_label_matrix, retention_label, LabelMatrix,
    LabelSpec, PredictionContext, PredictionPoint,
};
use retain_core::learners::{
    fit, fit_logistic, LearnerFamily, LearnerSpec, LogisticObjective, LogisticParams,
};
use retain_core::math::sigmoid;
use retain_core::temporal::{check_leakage, generate_splits, LeakageKind, Recompute};

// Pinned sizes and tolerances.
const LABEL_HISTORIES: usize = 10_000;
const LABEL_MAX_VISITS: usize = 8;
const LABEL_TIME_LIMIT: Elapsed = Elapsed::from_secs(10);
const LEAKAGE_CONFIGS: usize = 50;
const LEAKAGE_SPLITS_PER_CONFIG: usize = 4;
const METRIC_INSTANCES: usize = 1_000;
const GRADIENT_PROBLEMS: usize = 20;
const GRADIENT_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;
const FOREST_DATASETS: usize = 20;
const SIGNAL_MIN_LIFT: f64 = 2.0;
const SIGNAL_TIME_LIMIT: Elapsed = Elapsed::from_secs(300);
const TOP_IMPORTANCES: usize = 5;
const MIN_PLANTED_IN_TOP: usize = 3;
const FAIRNESS_ENTITIES: usize = 5_000;
const FAIRNESS_SEED: u64 = 20170801;
const BIAS_MULTIPLIER: f64 = 2.0;
const PARITY_BAND: (f64, f64) = (0.9, 1.1);
const SYMMETRIC_BAND: (f64, f64) = (0.95, 1.05);
const JOINT_GAPS: [f64; 3] = [0.0, 0.01, 0.02];
const PREVALENCE_TOL: f64 = 4.0 * f64::EPSILON;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn day(offset: i64) -> NaiveDate {
    date(2012, 1, 1) + Duration::days(offset)
}

// ---------------------------------------------------------------- 1

fn brute_in_window(visits: &[NaiveDate], as_of: NaiveDate, w: i64) -> Vec<NaiveDate> {
    visits
        .iter()
        .copied()
        .filter(|v| *v > as_of && (*v - as_of).num_days() <= w)
        .collect()
}

fn brute_access(visits: &[NaiveDate], as_of: NaiveDate, w: i64) -> bool {
    brute_in_window(visits, as_of, w).is_empty()
}

fn brute_retention(visits: &[NaiveDate], as_of: NaiveDate, w: i64, gap: i64) -> bool {
    let inside = brute_in_window(visits, as_of, w);
    for a in &inside {
        for b in &inside {
            if (*b - *a).num_days() > gap {
                return false;
            }
        }
    }
    true
}

fn label_oracle() -> Result<String> {
    let start = Instant::now();
    let mut r = rng(1);
    let mut mismatches = 0;
    for _ in 0..LABEL_HISTORIES {
        let w = match r.random_range(0..3) {
            0 => 183,
            1 => 365,
            _ => r.random_range(1..400),
        };
        let gap = if r.random::<f64>() < 0.5 { 90 } else { r.random_range(0..200) };
        let n = r.random_range(0..=LABEL_MAX_VISITS);
        let mut offsets: Vec<i64> = (0..n)
            .map(|_| match r.random_range(0..6) {
                // Boundary days are over-sampled.
                0 => 0,
                1 => w,
                2 => w + 1,
                3 => 1,
                _ => r.random_range(-40..w + 40),
            })
            .collect();
        offsets.sort();
        let visits: Vec<NaiveDate> = offsets.iter().map(|o| day(*o)).collect();
        let as_of = day(0);
        if access_label(&visits, as_of, w)? != brute_access(&visits, as_of, w) {
            mismatches += 1;
        }
        if retention_label(&visits, as_of, w, gap)? != brute_retention(&visits, as_of, w, gap) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(mismatches == 0, "{mismatches} mismatches");
    ensure!(elapsed < LABEL_TIME_LIMIT, "took {elapsed:.1?}");
    Ok(format!(
        "{LABEL_HISTORIES} histories x 2 labels, 0 mismatches in {elapsed:.2?}"
    ))
}

// ---------------------------------------------------------------- 2

fn random_config(r: &mut ChaCha8Rng, seed: u64) -> Result<ExperimentConfig> {
    let health = r.random::<f64>() < 0.5;
    let start_year = r.random_range(2008..=2011);
    let years = r.random_range(4..=7);
    let (kind, window) = match r.random_range(0..3) {
        0 => ("access", 183),
        1 => ("access", 365),
        _ => ("retention", 365),
    };
    let text = format!(
        r#"
scenario = "{}"
seed = {seed}

[data.synthetic]
n_entities = {}
start = "{start_year}-01-01"
end = "{}-12-31"

[label]
kind = "{kind}"
window_days = {window}

[temporal]
update_frequency = "{}"
min_train_history_months = {}
"#,
        if health { "health_department" } else { "clinic" },
        r.random_range(40..=120),
        start_year + years - 1,
        if health && r.random::<f64>() < 0.7 { "monthly" } else { "yearly" },
        r.random_range(6..=18),
    );
    RawConfig::parse(&text)?.resolve(Path::new("."))
}

struct LeakageTrial {
    clean_findings: usize,
    label_detected: bool,
    encoder_detected: bool,
}

fn leakage_trial(cfg: &ExperimentConfig, r: &mut ChaCha8Rng) -> Result<Option<LeakageTrial>> {
    let data = load_data(cfg)?;
    let t = cfg.temporal_config(data.log.date_range());
    let Ok(splits) = generate_splits(&t) else {
        return Ok(None);
    };
    let cohort = build_cohort(cfg.scenario, &data.log, &t)?;
    let labels = build_label_matrix(&cohort, &data.log, &cfg.label)?;
    let builder = FeatureBuilder::new(&cfg.features, data.zip.as_ref(), &data.log)?;
    let window = Duration::days(cfg.label.window_days);

    let mut usable: Vec<usize> = (0..splits.len())
        .filter(|i| {
            let s = &splits[*i];
            !s.train_indices(&labels.rows).is_empty() && !s.test_indices(&labels.rows).is_empty()
        })
        .collect();
    while usable.len() > LEAKAGE_SPLITS_PER_CONFIG {
        usable.remove(r.random_range(0..usable.len()));
    }
    let mut clean_findings = 0;
    let mut corrupt = None;
    for i in &usable {
        let split = &splits[*i];
        let y_train = labels.select(&split.train_indices(&labels.rows));
        let y_test = labels.select(&split.test_indices(&labels.rows));
        let encoder = builder.fit(&y_train.rows)?;
        let x_train = builder.build(&y_train.rows, &encoder)?;
        let x_test = builder.build(&y_test.rows, &encoder)?;
        let recompute = Recompute {
            config: &cfg.features,
            zip: data.zip.as_ref(),
            log: &data.log,
            sample: 10,
        };
        clean_findings += check_leakage(
            split,
            &y_train,
            &x_train,
            &x_test,
            &encoder,
            Some(&recompute),
        )?
        .len();
        // Rows whose outcome window straddles the test start.
        let crossing: Vec<usize> = labels
            .rows
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.as_of >= split.train_period.start
                    && p.as_of < split.test_period.start
                    && p.as_of + window > split.test_period.start
            })
            .map(|(j, _)| j)
            .collect();
        if corrupt.is_none() && !crossing.is_empty() {
            corrupt = Some((*i, crossing, y_train, y_test));
        }
    }
    let Some((i, crossing, y_train, y_test)) = corrupt else {
        return Ok(None);
    };
    let split = &splits[i];

    let mut bad_idx = split.train_indices(&labels.rows);
    bad_idx.extend(crossing);
    bad_idx.sort();
    let y_bad = labels.select(&bad_idx);
    let enc_bad = builder.fit(&y_bad.rows)?;
    let x_bad = builder.build(&y_bad.rows, &enc_bad)?;
    let x_test = builder.build(&y_test.rows, &enc_bad)?;
    let found = check_leakage(split, &y_bad, &x_bad, &x_test, &enc_bad, None)?;
    let label_detected = found.iter().any(|f| f.kind == LeakageKind::LabelWindow);

    let mut both = y_train.rows.clone();
    both.extend(y_test.rows.iter().cloned());
    let enc_all = builder.fit(&both)?;
    let x_train = builder.build(&y_train.rows, &enc_all)?;
    let x_test = builder.build(&y_test.rows, &enc_all)?;
    let found = check_leakage(split, &y_train, &x_train, &x_test, &enc_all, None)?;
    let encoder_detected = found.iter().any(|f| f.kind == LeakageKind::EncoderFit);

    Ok(Some(LeakageTrial {
        clean_findings,
        label_detected,
        encoder_detected,
    }))
}

fn leakage_suite() -> Result<String> {
    let mut r = rng(2);
    let mut trials = Vec::new();
    let mut attempts = 0;
    while trials.len() < LEAKAGE_CONFIGS {
        attempts += 1;
        ensure!(attempts <= 4 * LEAKAGE_CONFIGS, "too few usable configs");
        let cfg = random_config(&mut r, attempts as u64)?;
        if let Some(t) = leakage_trial(&cfg, &mut r)? {
            trials.push(t);
        }
    }
    let clean: usize = trials.iter().map(|t| t.clean_findings).sum();
    let label = trials.iter().filter(|t| t.label_detected).count();
    let encoder = trials.iter().filter(|t| t.encoder_detected).count();
    let both = trials
        .iter()
        .filter(|t| t.label_detected && t.encoder_detected)
        .count();
    ensure!(clean == 0, "{clean} findings on clean splits");
    ensure!(
        both == LEAKAGE_CONFIGS,
        "detected {both}/{LEAKAGE_CONFIGS} (label window {label}, encoder {encoder})"
    );
    Ok(format!(
        "{LEAKAGE_CONFIGS} configs ({attempts} drawn): clean splits 0 findings, corruptions detected {both}/{LEAKAGE_CONFIGS}"
    ))
}

// ---------------------------------------------------------------- 3

/// Sort, slice, count. Flag count is ceil(k * n / 100) in integer tenths of a percent.
fn metric_oracle(
    scores: &[f64],
    labels: &[bool],
    keys: &[(String, NaiveDate)],
    k_tenths: usize,
) -> (f64, f64, usize) {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|a, b| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap()
            .then_with(|| keys[*a].cmp(&keys[*b]))
    });
    let m = (k_tenths * n).div_ceil(1000).clamp(1, n);
    let tp = idx[..m].iter().filter(|i| labels[**i]).count();
    let pos = labels.iter().filter(|l| **l).count();
    let recall = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
    (tp as f64 / m as f64, recall, m)
}

fn metric_oracle_suite() -> Result<String> {
    let mut r = rng(3);
    let mut compared = 0;
    for inst in 0..METRIC_INSTANCES {
        let n = r.random_range(1..=200);
        let levels = match inst % 3 {
            0 => 2,
            1 => 5,
            _ => 0,
        };
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if levels == 0 {
                    r.random::<f64>()
                } else {
                    r.random_range(0..levels) as f64 / levels as f64
                }
            })
            .collect();
        let prevalence = r.random::<f64>();
        let labels: Vec<bool> = (0..n).map(|_| r.random::<f64>() < prevalence).collect();
        let rows: Vec<PredictionPoint> = (0..n)
            .map(|i| {
                PredictionPoint::new(
                    format!("e{:02}", r.random_range(0..20)),
                    day(i as i64),
                    PredictionContext::MonthlyRoster,
                )
            })
            .collect();
        let keys: Vec<(String, NaiveDate)> = rows
            .iter()
            .map(|p| (p.entity_id.as_str().to_string(), p.as_of))
            .collect();
        let mut tenths: Vec<usize> = (0..8).map(|_| r.random_range(1..=1000)).collect();
        tenths.extend([10, 100, 1000]);
        let grid: Vec<f64> = tenths.iter().map(|t| *t as f64 / 10.0).collect();
        let curve = pr_policy_curve(&scores, &labels, &rows, &grid)?;
        for (t, got) in tenths.iter().zip(&curve) {
            let (p, rc, m) = metric_oracle(&scores, &labels, &keys, *t);
            ensure!(
                got.precision == p && got.recall == rc && got.n_flagged == m,
                "instance {inst}, k={}: got ({}, {}, {}), oracle ({p}, {rc}, {m})",
                got.k_pct,
                got.precision,
                got.recall,
                got.n_flagged
            );
            compared += 1;
        }
    }
    Ok(format!(
        "{METRIC_INSTANCES} instances, {compared} (precision, recall, n) triples exactly equal"
    ))
}

// ---------------------------------------------------------------- 4

fn optimizer_check() -> Result<String> {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let mut longest = 0;
    for prob in 0..GRADIENT_PROBLEMS {
        let n = r.random_range(20..=80);
        let p = r.random_range(2..=6);
        let x = Array2::from_shape_fn((n, p), |_| r.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..n)
            .map(|i| (r.random::<f64>() < sigmoid(x[[i, 0]] - 0.5 * x[[i, 1]])) as u8 as f64)
            .collect();
        let lambda = r.random_range(0.0..0.5);
        let theta: Vec<f64> = (0..=p).map(|_| r.random_range(-1.0..1.0)).collect();
        let obj = LogisticObjective {
            x: x.view(),
            y: &y,
            lambda,
        };
        let g = obj.gradient(&theta);
        let fd: Vec<f64> = (0..theta.len())
            .map(|j| {
                let mut hi = theta.clone();
                let mut lo = theta.clone();
                hi[j] += FD_STEP;
                lo[j] -= FD_STEP;
                (obj.value(&hi) - obj.value(&lo)) / (2.0 * FD_STEP)
            })
            .collect();
        let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        let rel = diff / norm;
        worst = worst.max(rel);
        ensure!(rel <= GRADIENT_REL_TOL, "problem {prob}: relative error {rel:e}");

        let m = fit_logistic(
            &x,
            &y,
            (0..p).collect(),
            &LogisticParams {
                l2_lambda: lambda,
                max_iter: 300,
                tol: 1e-8,
            },
        );
        ensure!(
            m.loss_trace.windows(2).all(|w| w[1] <= w[0]),
            "problem {prob}: loss trace increases"
        );
        longest = longest.max(m.loss_trace.len());
    }
    Ok(format!(
        "{GRADIENT_PROBLEMS} problems, worst relative gradient error {worst:.1e} (tol {GRADIENT_REL_TOL:e}); traces monotone (up to {longest} steps)"
    ))
}

// ---------------------------------------------------------------- 5

fn dataset(r: &mut ChaCha8Rng, n: usize, p: usize) -> (FeatureMatrix, LabelMatrix, EventLog) {
    let rows: Vec<PredictionPoint> = (0..n)
        .map(|i| {
            PredictionPoint::new(
                format!("e{i:04}"),
                day(0),
                PredictionContext::MonthlyRoster,
            )
        })
        .collect();
    // Half the columns are coarse, so thresholds tie.
    let values = Array2::from_shape_fn((n, p), |(_, j)| {
        if j % 2 == 0 {
            r.random_range(0..6) as f64
        } else {
            r.random_range(-3.0..3.0)
        }
    });
    let labels: Vec<bool> = (0..n)
        .map(|i| {
            let z = values[[i, 0]] - 2.5 + values[[i, 1 % p]] + r.random_range(-1.5..1.5);
            z > 0.0
        })
        .collect();
    let x = FeatureMatrix {
        rows: rows.clone(),
        columns: (0..p).map(|j| format!("f{j}")).collect(),
        values,
        imputed_columns: Vec::new(),
    };
    let entities: Vec<Entity> = rows.iter().map(|p| Entity::new(p.entity_id.clone())).collect();
    let log = EventLog::new(entities, Vec::new(), DateRange::new(day(-10), day(10)).unwrap())
        .unwrap();
    let y = LabelMatrix {
        rows,
        labels,
        spec: LabelSpec::access(183),
    };
    (x, y, log)
}

fn forest_degeneracy() -> Result<String> {
    let mut r = rng(5);
    let mut scored = 0;
    for ds in 0..FOREST_DATASETS {
        let n = r.random_range(50..=300);
        let p = r.random_range(2..=8);
        let (x, y, log) = dataset(&mut r, n, p);
        let (x_new, _, log_new) = dataset(&mut r, 100, p);
        let depth = r.random_range(1..=8) as f64;
        let min_split = r.random_range(2..=20) as f64;
        let seed = r.random::<u64>();
        let tree = LearnerSpec::new(LearnerFamily::DecisionTree)
            .with("max_depth", depth)
            .with("min_samples_split", min_split)
            .with_seed(seed);
        let forest = LearnerSpec::new(LearnerFamily::RandomForest)
            .with("n_trees", 1.0)
            .with("bootstrap", 0.0)
            .with("max_features", p as f64)
            .with("max_depth", depth)
            .with("min_samples_split", min_split)
            .with_seed(seed);
        let t = fit(&tree, &x, &y, 0)?;
        let f = fit(&forest, &x, &y, 0)?;
        ensure!(
            t.score(&x, &log)? == f.score(&x, &log)?,
            "dataset {ds}: training scores differ"
        );
        ensure!(
            t.score(&x_new, &log_new)? == f.score(&x_new, &log_new)?,
            "dataset {ds}: held-out scores differ"
        );
        scored += n + 100;
    }
    Ok(format!(
        "{FOREST_DATASETS} datasets, {scored} scores bit-identical"
    ))
}

// ---------------------------------------------------------------- 6

fn mean_precision(records: &[EvaluationRecord], group: &str, window: &[usize], k: f64) -> f64 {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.model_group == group && window.contains(&r.split_id))
        .filter_map(|r| r.precision_at(k))
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn group_of(cfg: &ExperimentConfig, family: LearnerFamily) -> Result<String> {
    cfg.learners
        .iter()
        .find(|l| l.family == family)
        .map(LearnerSpec::model_group)
        .ok_or_else(|| anyhow!("no {family} in the grid"))
}

fn signal_recovery() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let mut cfg = ExperimentConfig::load(&workspace().join("configs/clinic_synthetic.cfg"))?;
    cfg.output_dir = dir.path().to_path_buf();
    let n = match &cfg.data {
        retain_cli::config::DataSource::Synthetic(s) => s.n_entities,
        _ => bail!("clinic config is not synthetic"),
    };
    ensure!(n == 5000, "clinic config has {n} entities");
    let start = Instant::now();
    let out = run_experiment(&cfg, RunOptions::default())?;
    let elapsed = start.elapsed();

    let k = cfg.selection.k_pct;
    let window = selection_window(&out.records, cfg.selection.last_n_periods);
    let selected = cfg
        .learners
        .iter()
        .find(|l| l.model_group() == out.selected)
        .context("selected group not in grid")?;
    let sel = mean_precision(&out.records, &out.selected, &window, k);
    let prior = mean_precision(
        &out.records,
        &group_of(&cfg, LearnerFamily::PriorBaseline)?,
        &window,
        k,
    );
    let expert = mean_precision(
        &out.records,
        &group_of(&cfg, LearnerFamily::ExpertRules)?,
        &window,
        k,
    );

    let store = RunStore::existing(&cfg.output_dir.join(&out.run_id))?;
    let (model, _) = load_selected(&store, &cfg)?;
    let truth = load_data(&cfg)?.truth.context("synthetic ground truth")?;
    let top: Vec<String> = model
        .feature_importances()
        .into_iter()
        .take(TOP_IMPORTANCES)
        .map(|(f, _)| f)
        .collect();
    let planted = top.iter().filter(|f| truth.is_planted_feature(f)).count();

    let detail = format!(
        "selected {} at {sel:.3} vs prior {prior:.3} ({:.2}x) and expert rules {expert:.3}; {planted}/{TOP_IMPORTANCES} top features planted {top:?}; {elapsed:.0?}",
        out.selected,
        sel / prior
    );
    ensure!(
        matches!(
            selected.family,
            LearnerFamily::RandomForest | LearnerFamily::GradientBoostedTrees
        ),
        "selected model is not a tree ensemble: {detail}"
    );
    ensure!(sel >= SIGNAL_MIN_LIFT * prior, "lift below {SIGNAL_MIN_LIFT}: {detail}");
    ensure!(sel > expert, "expert rules not beaten: {detail}");
    ensure!(planted >= MIN_PLANTED_IN_TOP, "too few planted features: {detail}");
    ensure!(elapsed < SIGNAL_TIME_LIMIT, "too slow: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn table(k: f64, rows: &[(&str, &[f64])]) -> Vec<EvaluationRecord> {
    let mut out = Vec::new();
    for (group, precisions) in rows {
        for (split, p) in precisions.iter().enumerate() {
            out.push(EvaluationRecord {
                model_group: group.to_string(),
                split_id: split,
                n_rows: 1000,
                prevalence: 0.1,
                metrics: vec![TopK {
                    k_pct: k,
                    precision: *p,
                    recall: 0.0,
                    n_flagged: 100,
                    n_true: (p * 100.0).round() as usize,
                }],
            });
        }
    }
    out
}

fn rule(band: f64, last: usize) -> SelectionRule {
    SelectionRule {
        k_pct: 10.0,
        regret_band: band,
        last_n_periods: last,
    }
}

fn selection_conformance() -> Result<String> {
    // The worked example: best 0.70 puts everything at or above 0.65 in band.
    let example = table(10.0, &[("a", &[0.70]), ("b", &[0.66]), ("c", &[0.65]), ("d", &[0.6499])]);
    let ranked = rank_model_groups(&example, &rule(0.05, 5))?;
    let in_band: Vec<&str> = ranked
        .ranking
        .iter()
        .filter(|g| g.points == 1)
        .map(|g| g.model_group.as_str())
        .collect();
    ensure!(in_band == ["a", "b", "c"], "in-band set {in_band:?}");

    let mut multi_k = table(10.0, &[("a", &[0.8, 0.8]), ("b", &[0.6, 0.6])]);
    multi_k.iter_mut().for_each(|r| {
        let p = if r.model_group == "a" { 0.5 } else { 0.7 };
        r.metrics.insert(
            0,
            TopK {
                k_pct: 5.0,
                precision: p,
                recall: 0.0,
                n_flagged: 50,
                n_true: 0,
            },
        );
    });
    let mut at_5 = rule(0.05, 5);
    at_5.k_pct = 5.0;

    let cases: Vec<(&str, Vec<EvaluationRecord>, SelectionRule, &str)> = vec![
        ("worked example", example, rule(0.05, 5), "a"),
        (
            "stability beats one peak",
            table(10.0, &[("a", &[0.99, 0.64, 0.64, 0.64, 0.64]), ("b", &[0.70; 5])]),
            rule(0.05, 5),
            "b",
        ),
        (
            "only the window counts",
            table(
                10.0,
                &[
                    ("a", &[0.9, 0.9, 0.9, 0.9, 0.6, 0.5, 0.5]),
                    ("b", &[0.5, 0.5, 0.5, 0.6, 0.65, 0.65, 0.65]),
                ],
            ),
            rule(0.05, 3),
            "b",
        ),
        (
            "points tie, mean decides",
            table(10.0, &[("a", &[0.70, 0.68]), ("b", &[0.69, 0.70])]),
            rule(0.05, 5),
            "b",
        ),
        (
            "full tie, name decides",
            table(10.0, &[("beta", &[0.5, 0.6]), ("alpha", &[0.5, 0.6])]),
            rule(0.05, 5),
            "alpha",
        ),
        (
            "band edge earns a point",
            table(10.0, &[("a", &[0.75, 0.50, 0.90]), ("b", &[0.70, 0.56, 0.86])]),
            rule(0.05, 5),
            "b",
        ),
        (
            "zero band counts winners only",
            table(10.0, &[("a", &[0.70, 0.60, 0.60]), ("b", &[0.65, 0.61, 0.61])]),
            rule(0.0, 5),
            "b",
        ),
        ("selection k, not another k", multi_k, at_5, "b"),
        (
            "window longer than history",
            table(10.0, &[("a", &[0.9, 0.35]), ("b", &[0.6, 0.6])]),
            rule(0.05, 5),
            "a",
        ),
        (
            "steady beats alternating",
            table(
                10.0,
                &[
                    ("a", &[0.8, 0.4, 0.4, 0.8, 0.4]),
                    ("b", &[0.62; 5]),
                    ("c", &[0.60; 5]),
                ],
            ),
            rule(0.05, 5),
            "b",
        ),
    ];
    let total = cases.len();
    let mut failures = Vec::new();
    for (name, records, rule, want) in cases {
        let got = select_model(&records, &rule)?;
        if got != want {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(format!("{total}/{total} cases, in-band set at 0.65 = [a, b, c]"))
}

// ---------------------------------------------------------------- 8

/// Black-vs-White FOR ratio of a group-blind risk score flagging the top 10%.
fn group_blind_ratio(multiplier: Option<f64>) -> Result<f64> {
    let range = DateRange::new(date(2008, 1, 1), date(2015, 12, 31))?;
    let mut cfg = SyntheticConfig::new(FAIRNESS_ENTITIES, range, FAIRNESS_SEED).with_default_signal();
    cfg.group_bias = multiplier.map(|m| GroupBias {
        attribute: Demographic::Race,
        group: "Black".into(),
        multiplier: m,
    });
    let (log, truth) = generate_synthetic_cohort(&cfg)?;
    let spec = LabelSpec::access(183);
    let rows = build_clinic_cohort(
        &log,
        range.start,
        range.end - Duration::days(spec.window_days),
    )?;
    let y = build_label_matrix(&rows, &log, &spec)?;
    // The planted risk without any group factor.
    let scores: Vec<f64> = rows
        .iter()
        .map(|p| {
            let t = truth.get(&p.entity_id).expect("truth for every entity");
            sigmoid(cfg.dropout_intercept - t.latent_adherence)
        })
        .collect();
    let flagged = flag_top(&scores, &rows, 10.0)?;
    let groups = group_columns(&log, &rows, &[Demographic::Race]);
    let mut audit = AuditConfig::new(vec![Demographic::Race]);
    audit
        .reference_groups
        .insert(Demographic::Race, "White".into());
    let report = audit_model("group_blind_risk", 0, &flagged, &y.labels, &groups, &audit)?;
    report
        .ratio(Demographic::Race, "Black")
        .context("ratio undefined")
}

fn audit_entry(model: &str, split: usize, ratio: f64) -> AuditReport {
    let stats = |group: &str, ratio: f64| GroupStats {
        group: group.into(),
        n: 500,
        n_flagged: 50,
        false_negatives: 10,
        true_negatives: 440,
        false_omission_rate: Some(0.02 * ratio),
        ratio: Some(ratio),
        in_band: Some(ratio >= PARITY_BAND.0 && ratio <= PARITY_BAND.1),
    };
    AuditReport {
        model_group: model.into(),
        split_id: split,
        parity_band: PARITY_BAND,
        attributes: vec![AttributeAudit {
            attribute: Demographic::Race,
            reference_group: Some("White".into()),
            groups: vec![stats("White", 1.0), stats("Black", ratio)],
            excluded: Vec::new(),
            warnings: Vec::new(),
        }],
    }
}

fn fairness_detection() -> Result<String> {
    let biased = group_blind_ratio(Some(BIAS_MULTIPLIER))?;
    let symmetric = group_blind_ratio(None)?;
    ensure!(
        !(PARITY_BAND.0..=PARITY_BAND.1).contains(&biased),
        "biased cohort ratio {biased:.3} inside {PARITY_BAND:?}"
    );
    ensure!(
        (SYMMETRIC_BAND.0..=SYMMETRIC_BAND.1).contains(&symmetric),
        "symmetric ratio {symmetric:.3} outside {SYMMETRIC_BAND:?}"
    );

    let mut audit = AuditConfig::new(vec![Demographic::Race]);
    audit.focus = Some((Demographic::Race, "Black".into()));
    let sel = rule(0.05, 5);
    for gap in JOINT_GAPS {
        let mut records = table(10.0, &[("fair", &[0.60; 5])]);
        records.extend(table(10.0, &[("unfair", &[0.60 + gap; 5])]));
        let audits: Vec<AuditReport> = (0..5)
            .flat_map(|s| [audit_entry("fair", s, 1.02), audit_entry("unfair", s, 1.25)])
            .collect();
        let perf = select_model(&records, &sel)?;
        let joint = joint_select(&records, &audits, &sel, &audit)?;
        if gap > 0.0 {
            ensure!(perf == "unfair", "gap {gap}: performance picked {perf}");
        }
        ensure!(
            joint.model_group == "fair",
            "gap {gap}: joint picked {}",
            joint.model_group
        );
    }
    Ok(format!(
        "FOR ratio {biased:.3} with bias x{BIAS_MULTIPLIER} (outside {PARITY_BAND:?}), {symmetric:.3} without (inside {SYMMETRIC_BAND:?}); joint selection keeps the in-band model at gaps {JOINT_GAPS:?}"
    ))
}

// ---------------------------------------------------------------- 9

fn policy_menu_shape() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let mut cfg =
        ExperimentConfig::load(&workspace().join("configs/health_department_synthetic.cfg"))?;
    cfg.output_dir = dir.path().to_path_buf();
    let out = run_experiment(&cfg, RunOptions::default())?;

    // Every stored curve.
    for r in &out.records {
        ensure!(
            r.metrics.windows(2).all(|w| w[1].recall >= w[0].recall),
            "{} split {}: recall decreases",
            r.model_group,
            r.split_id
        );
        let full = r.at(100.0).context("k=100 missing")?;
        ensure!(
            (full.precision - r.prevalence).abs() <= PREVALENCE_TOL,
            "{} split {}: precision@100 {} vs prevalence {}",
            r.model_group,
            r.split_id,
            full.precision,
            r.prevalence
        );
    }

    // A fine-grained menu for the selected model on the latest test period.
    let store = RunStore::existing(&cfg.output_dir.join(&out.run_id))?;
    let (model, encoder) = load_selected(&store, &cfg)?;
    let split = *read_splits(&store)?.last().context("no splits")?;
    let data = load_data(&cfg)?;
    let t = cfg.temporal_config(data.log.date_range());
    let cohort = build_cohort(cfg.scenario, &data.log, &t)?;
    let labels = build_label_matrix(&cohort, &data.log, &cfg.label)?;
    let y = labels.select(&split.test_indices(&labels.rows));
    let builder = FeatureBuilder::new(&cfg.features, data.zip.as_ref(), &data.log)?;
    let x = builder.build(&y.rows, &encoder)?;
    let scores = model.score(&x, &data.log)?;
    let grid: Vec<f64> = (1..=400).map(|i| i as f64 / 4.0).collect();
    let curve = pr_policy_curve(&scores, &y.labels, &y.rows, &grid)?;
    ensure!(
        curve.windows(2).all(|w| w[1].recall >= w[0].recall),
        "selected model: recall decreases"
    );
    let last = curve.last().expect("non-empty grid");
    ensure!(
        (last.precision - y.prevalence()).abs() <= PREVALENCE_TOL,
        "selected model: precision@100 {} vs prevalence {}",
        last.precision,
        y.prevalence()
    );
    Ok(format!(
        "{} stored curves and a {}-point menu for {} ({} rows): recall monotone, precision@100 = prevalence {:.4}",
        out.records.len(),
        grid.len(),
        out.selected,
        y.len(),
        y.prevalence()
    ))
}

// ---------------------------------------------------------------- 10

const REPRO_CONFIG: &str = r#"
scenario = "health_department"
seed = 7
output_dir = "runs"

[data.synthetic]
n_entities = 400
start = "2010-01-01"
end = "2014-12-31"

[temporal]
last_n_splits = 3

[selection]
last_n_periods = 3

[audit]
attributes = ["race", "gender"]
focus = ["race", "Black"]

[[learners]]
family = "random_forest"
hyperparameters = { n_trees = 20, max_depth = 5 }

[[learners]]
family = "gradient_boosted_trees"
hyperparameters = { n_rounds = 20, max_depth = 3, learning_rate = 0.1, subsample = 0.8 }

[[learners]]
family = "logistic_regression"
hyperparameters = { l2_lambda = 0.01 }

[[learners]]
family = "expert_rules"

[[learners]]
family = "prior_baseline"
"#;

fn reproducibility() -> Result<String> {
    let as_of = date(2014, 6, 1);
    let mut files: Vec<BTreeMap<&str, Vec<u8>>> = Vec::new();
    let mut ids = Vec::new();
    for jobs in [1, 2] {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("repro.cfg");
        std::fs::write(&path, REPRO_CONFIG)?;
        let cfg = ExperimentConfig::load(&path)?;
        let out = run_experiment(
            &cfg,
            RunOptions {
                jobs: Some(jobs),
                leakage: None,
            },
        )?;
        let store = RunStore::existing(&cfg.output_dir.join(&out.run_id))?;
        let roster = score_roster(&store, &cfg, as_of, None)?;
        let mut map = BTreeMap::new();
        for name in ["selection.csv", "evaluations.csv", "audits.csv", "ranking.csv"] {
            map.insert(name, std::fs::read(store.path(name))?);
        }
        map.insert("roster", std::fs::read(roster)?);
        files.push(map);
        ids.push(out.run_id);
    }
    ensure!(ids[0] == ids[1], "run ids differ: {ids:?}");
    let differing: Vec<&str> = files[0]
        .iter()
        .filter(|(k, v)| files[1].get(*k) != Some(v))
        .map(|(k, _)| *k)
        .collect();
    ensure!(differing.is_empty(), "files differ: {differing:?}");
    Ok(format!(
        "run {} twice (1 and 2 threads): {} files byte-identical",
        ids[0],
        files[0].len()
    ))
}

// ----------------------------------------------------------------

type Criterion = (&'static str, fn() -> Result<String>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("label oracle", label_oracle),
        ("leakage suite", leakage_suite),
        ("metric oracle", metric_oracle_suite),
        ("optimizer check", optimizer_check),
        ("forest degeneracy", forest_degeneracy),
        ("signal recovery", signal_recovery),
        ("selection rule", selection_conformance),
        ("fairness detection", fairness_detection),
        ("policy menu shape", policy_menu_shape),
        ("reproducibility", reproducibility),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {e:#}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
