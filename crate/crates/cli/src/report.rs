//! Report tables and SVG plots for a finished run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;

use retain_core::evaluation::{selection_window, EvaluationRecord, TopK};
use retain_core::events::Demographic;

use crate::config::ExperimentConfig;
use crate::pipeline::{load_selected, read_selected, read_splits};
use crate::store::RunStore;

/// Files written by [`emit_report`], without extensions.
pub const REPORTS: [&str; 5] = [
    "precision_over_time",
    "policy_menu",
    "for_ratio_over_time",
    "for_ratio_vs_precision",
    "feature_importance",
];

pub fn read_evaluations(path: &Path) -> Result<Vec<EvaluationRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out: Vec<EvaluationRecord> = Vec::new();
    for row in r.records() {
        let row = row?;
        let group = row[0].to_string();
        let split_id: usize = row[1].parse()?;
        let m = TopK {
            k_pct: row[2].parse()?,
            precision: row[3].parse()?,
            recall: row[4].parse()?,
            n_flagged: row[5].parse()?,
            n_true: row[6].parse()?,
        };
        let prevalence: f64 = row[7].parse()?;
        match out.last_mut() {
            Some(last) if last.model_group == group && last.split_id == split_id => {
                last.metrics.push(m)
            }
            _ => out.push(EvaluationRecord {
                model_group: group,
                split_id,
                n_rows: 0,
                prevalence,
                metrics: vec![m],
            }),
        }
    }
    for rec in &mut out {
        rec.n_rows = rec.at(100.0).map(|m| m.n_flagged).unwrap_or(0);
    }
    Ok(out)
}

/// One row of `audits.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub model_group: String,
    pub split_id: usize,
    pub attribute: Demographic,
    pub group: String,
    pub n: usize,
    pub false_omission_rate: Option<f64>,
    pub ratio: Option<f64>,
}

pub fn read_audits(path: &Path) -> Result<Vec<AuditRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let opt = |s: &str| -> Result<Option<f64>> {
        Ok(if s.is_empty() { None } else { Some(s.parse()?) })
    };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        out.push(AuditRow {
            model_group: row[0].to_string(),
            split_id: row[1].parse()?,
            attribute: row[2].parse().map_err(|e: String| anyhow!(e))?,
            group: row[3].to_string(),
            n: row[4].parse()?,
            false_omission_rate: opt(&row[7])?,
            ratio: opt(&row[8])?,
        });
    }
    Ok(out)
}

/// The (attribute, group) pairs whose ratios the fairness reports plot.
fn plotted_groups(cfg: &ExperimentConfig, audits: &[AuditRow]) -> Vec<(Demographic, String)> {
    if let Some(f) = &cfg.audit.focus {
        return vec![f.clone()];
    }
    let Some(attr) = cfg.audit.attributes.first().copied() else {
        return Vec::new();
    };
    let reference = cfg.audit.reference_groups.get(&attr).cloned().or_else(|| {
        // Largest group, as the audit picks it.
        let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
        for a in audits.iter().filter(|a| a.attribute == attr) {
            let e = sizes.entry(&a.group).or_default();
            *e = (*e).max(a.n);
        }
        sizes
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(g, _)| g.to_string())
    });
    let mut groups: Vec<String> = audits
        .iter()
        .filter(|a| a.attribute == attr && Some(&a.group) != reference.as_ref())
        .map(|a| a.group.clone())
        .collect();
    groups.sort();
    groups.dedup();
    groups.into_iter().map(|g| (attr, g)).collect()
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow!(e.to_string()))?)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Plot<'a> {
    pub title: String,
    pub x_desc: String,
    pub y_desc: String,
    pub series: Vec<Series>,
    /// Shaded horizontal band, e.g. the parity band.
    pub band: Option<(f64, f64)>,
    pub lines: bool,
    pub x_labels: Option<&'a dyn Fn(&f64) -> String>,
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    let pad = if hi - lo < 1e-9 { 0.5 } else { span * 0.05 };
    (lo - pad, hi + pad)
}

pub fn render(plot: &Plot<'_>) -> Result<String> {
    let mut svg = String::new();
    draw(plot, &mut svg).map_err(|e| anyhow!("plotting `{}`: {e}", plot.title))?;
    Ok(svg)
}

fn draw(plot: &Plot<'_>, svg: &mut String) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let pts = plot.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if let Some((lo, hi)) = plot.band {
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    let (x0, x1) = padded(x0, x1);
    let (y0, y1) = padded(y0, y1);
    let root = SVGBackend::with_string(svg, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&plot.title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(65)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    let mut mesh = chart.configure_mesh();
    mesh.x_desc(plot.x_desc.as_str()).y_desc(plot.y_desc.as_str());
    if let Some(f) = plot.x_labels {
        mesh.x_label_formatter(f);
    }
    mesh.draw()?;
    if let Some((lo, hi)) = plot.band {
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(x0, lo), (x1, hi)],
                RGBColor(128, 0, 128).mix(0.15).filled(),
            )))?
            .label(format!("parity band [{lo}, {hi}]"))
            .legend(|(x, y)| {
                Rectangle::new([(x, y - 5), (x + 20, y + 5)], RGBColor(128, 0, 128).mix(0.3).filled())
            });
    }
    for (i, s) in plot.series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if plot.lines {
            chart.draw_series(LineSeries::new(s.points.clone(), color.stroke_width(2)))?;
        }
        chart
            .draw_series(s.points.iter().map(|p| Circle::new(*p, 4, color.filled())))?
            .label(s.name.as_str())
            .legend(move |(x, y)| Circle::new((x + 10, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()?;
    root.present()?;
    Ok(())
}

fn bar_chart(title: &str, names: &[String], values: &[f64], svg: &mut String) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let n = names.len().max(1);
    let top = values.iter().copied().fold(0.0f64, f64::max).max(1e-9) * 1.05;
    let root = SVGBackend::with_string(svg, (900, 120 + 24 * n as u32)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(260)
        .build_cartesian_2d(0.0..top, 0.0..n as f64)?;
    let label = |y: &f64| {
        let i = n as f64 - y.floor() - 1.0;
        if i >= 0.0 && (i as usize) < names.len() && (y.fract() - 0.5).abs() < 1e-9 {
            names[i as usize].clone()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .x_desc("importance")
        .y_labels(2 * n + 1)
        .y_label_formatter(&label)
        .disable_y_mesh()
        .draw()?;
    chart.draw_series(values.iter().enumerate().map(|(i, v)| {
        let y = (n - i - 1) as f64;
        Rectangle::new([(0.0, y + 0.1), (*v, y + 0.9)], BLUE.mix(0.6).filled())
    }))?;
    root.present()?;
    Ok(())
}

/// Writes the five report tables and plots under `report/`.
pub fn emit_report(store: &RunStore, cfg: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(stage) = store.first_missing_stage() {
        bail!("run {} is incomplete: stage `{stage}` has not finished", store.run_id());
    }
    let k = cfg.selection.k_pct;
    let records = read_evaluations(&store.path("evaluations.csv"))?;
    let audits = read_audits(&store.path("audits.csv"))?;
    let splits = read_splits(store)?;
    let selected = read_selected(store)?;
    let test_start: BTreeMap<usize, String> = splits
        .iter()
        .map(|s| (s.split_id, s.test_period.start.to_string()))
        .collect();
    let split_label = |x: &f64| {
        let id = x.round();
        if (x - id).abs() < 1e-6 && id >= 0.0 {
            test_start.get(&(id as usize)).cloned().unwrap_or_default()
        } else {
            String::new()
        }
    };
    let groups: Vec<String> = cfg.model_groups();

    // (a) precision@k per model group and split.
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for g in &groups {
        let mut pts = Vec::new();
        for r in records.iter().filter(|r| &r.model_group == g) {
            if let Some(p) = r.precision_at(k) {
                rows.push(vec![
                    g.clone(),
                    r.split_id.to_string(),
                    test_start.get(&r.split_id).cloned().unwrap_or_default(),
                    fmt(p),
                ]);
                pts.push((r.split_id as f64, p));
            }
        }
        series.push(Series { name: g.clone(), points: pts });
    }
    store.put(
        "report/precision_over_time.csv",
        &csv_string(&["model_group", "split_id", "test_start", "precision"], rows)?,
    )?;
    let p = Plot {
        title: format!("precision@{k}% over time"),
        x_desc: "test period start".into(),
        y_desc: format!("precision@{k}%"),
        series,
        band: None,
        lines: true,
        x_labels: Some(&split_label),
    };
    store.put("report/precision_over_time.svg", render(&p)?.as_bytes())?;

    // (b) policy menu of the selected group on the latest split.
    let latest = records
        .iter()
        .filter(|r| r.model_group == selected)
        .max_by_key(|r| r.split_id)
        .ok_or_else(|| anyhow!("no evaluations for selected group `{selected}`"))?;
    let rows = latest
        .metrics
        .iter()
        .map(|m| {
            vec![
                fmt(m.k_pct),
                fmt(m.precision),
                fmt(m.recall),
                m.n_flagged.to_string(),
                m.n_true.to_string(),
            ]
        })
        .collect();
    store.put(
        "report/policy_menu.csv",
        &csv_string(&["k_pct", "precision", "recall", "n_flagged", "n_true"], rows)?,
    )?;
    let p = Plot {
        title: format!("policy menu for {selected} (split {}, selection at k={k}%)", latest.split_id),
        x_desc: "k (% of rows flagged)".into(),
        y_desc: "metric value".into(),
        series: vec![
            Series {
                name: "precision".into(),
                points: latest.metrics.iter().map(|m| (m.k_pct, m.precision)).collect(),
            },
            Series {
                name: "recall".into(),
                points: latest.metrics.iter().map(|m| (m.k_pct, m.recall)).collect(),
            },
        ],
        band: None,
        lines: true,
        x_labels: None,
    };
    store.put("report/policy_menu.svg", render(&p)?.as_bytes())?;

    // (c) FOR ratio over time.
    let focus = plotted_groups(cfg, &audits);
    let band = cfg.audit.parity_band;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for g in &groups {
        for (attr, grp) in &focus {
            let mut pts = Vec::new();
            for a in audits
                .iter()
                .filter(|a| &a.model_group == g && a.attribute == *attr && &a.group == grp)
            {
                rows.push(vec![
                    g.clone(),
                    a.split_id.to_string(),
                    test_start.get(&a.split_id).cloned().unwrap_or_default(),
                    attr.to_string(),
                    grp.clone(),
                    a.ratio.map(fmt).unwrap_or_default(),
                ]);
                if let Some(r) = a.ratio {
                    pts.push((a.split_id as f64, r));
                }
            }
            series.push(Series {
                name: format!("{g} {attr}={grp}"),
                points: pts,
            });
        }
    }
    store.put(
        "report/for_ratio_over_time.csv",
        &csv_string(
            &["model_group", "split_id", "test_start", "attribute", "group", "for_ratio"],
            rows,
        )?,
    )?;
    let p = Plot {
        title: format!("FOR ratio over time (flagging top {k}%)"),
        x_desc: "test period start".into(),
        y_desc: "FOR ratio vs reference".into(),
        series,
        band: Some(band),
        lines: true,
        x_labels: Some(&split_label),
    };
    store.put("report/for_ratio_over_time.svg", render(&p)?.as_bytes())?;

    // (d) mean FOR ratio against mean precision over the selection window.
    let window = selection_window(&records, cfg.selection.last_n_periods);
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for g in &groups {
        let precisions: Vec<f64> = records
            .iter()
            .filter(|r| &r.model_group == g && window.contains(&r.split_id))
            .filter_map(|r| r.precision_at(k))
            .collect();
        if precisions.is_empty() {
            continue;
        }
        let mean_p = precisions.iter().sum::<f64>() / precisions.len() as f64;
        for (attr, grp) in &focus {
            let ratios: Vec<f64> = audits
                .iter()
                .filter(|a| {
                    &a.model_group == g
                        && a.attribute == *attr
                        && &a.group == grp
                        && window.contains(&a.split_id)
                })
                .filter_map(|a| a.ratio)
                .collect();
            let mean_r = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
            rows.push(vec![
                g.clone(),
                attr.to_string(),
                grp.clone(),
                fmt(mean_p),
                mean_r.map(fmt).unwrap_or_default(),
                mean_r
                    .map(|r| (r >= band.0 && r <= band.1).to_string())
                    .unwrap_or_default(),
            ]);
            if let Some(r) = mean_r {
                series.push(Series {
                    name: format!("{g} {attr}={grp}"),
                    points: vec![(mean_p, r)],
                });
            }
        }
    }
    store.put(
        "report/for_ratio_vs_precision.csv",
        &csv_string(
            &["model_group", "attribute", "group", "mean_precision", "mean_for_ratio", "in_band"],
            rows,
        )?,
    )?;
    let p = Plot {
        title: format!("FOR ratio vs precision@{k}% (last {} splits)", window.len()),
        x_desc: format!("mean precision@{k}%"),
        y_desc: "mean FOR ratio".into(),
        series,
        band: Some(band),
        lines: false,
        x_labels: None,
    };
    store.put("report/for_ratio_vs_precision.svg", render(&p)?.as_bytes())?;

    // (e) top-20 importances of the selected model.
    let (model, _) = load_selected(store, cfg)?;
    let top: Vec<(String, f64)> = model.feature_importances().into_iter().take(20).collect();
    let rows = top
        .iter()
        .enumerate()
        .map(|(i, (f, v))| vec![(i + 1).to_string(), f.clone(), fmt(*v)])
        .collect();
    store.put(
        "report/feature_importance.csv",
        &csv_string(&["rank", "feature", "importance"], rows)?,
    )?;
    let names: Vec<String> = top.iter().map(|t| t.0.clone()).collect();
    let values: Vec<f64> = top.iter().map(|t| t.1).collect();
    let mut svg = String::new();
    bar_chart(&format!("top features of {selected}"), &names, &values, &mut svg)
        .map_err(|e| anyhow!("plotting importances: {e}"))?;
    store.put("report/feature_importance.svg", svg.as_bytes())?;
    Ok(store.path("report"))
}
