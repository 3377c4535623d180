//! Group disparity audits on false omission rates.
//!
//! FOR is the share of true positives among unflagged rows. A group's FOR ratio is
//! its FOR over the reference group's; ratios inside the parity band count as equitable.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{
    rank_model_groups, selection_window, EvaluationError, EvaluationRecord, SelectionRule,
};
use crate::events::{Demographic, EventLog};
use crate::labels::PredictionPoint;

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error(
        "flagged ({flagged}), labels ({labels}) and group columns ({groups}) differ in length"
    )]
    LengthMismatch {
        flagged: usize,
        labels: usize,
        groups: usize,
    },
    #[error("no group values supplied for attribute `{0}`")]
    MissingAttribute(Demographic),
    #[error("joint selection needs at least one evaluation record and one audit report")]
    EmptyInput,
    #[error("no audit for model group `{0}` in the selection window")]
    MissingAudit(String),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}

type Result<T> = std::result::Result<T, FairnessError>;

/// Positives among unflagged rows of the group; `None` when every group row is flagged.
pub fn false_omission_rate(flagged: &[bool], labels: &[bool], group_mask: &[bool]) -> Option<f64> {
    let (mut fneg, mut neg) = (0usize, 0usize);
    for ((f, l), g) in flagged.iter().zip(labels).zip(group_mask) {
        if *g && !*f {
            neg += 1;
            if *l {
                fneg += 1;
            }
        }
    }
    (neg > 0).then(|| fneg as f64 / neg as f64)
}

/// `group / reference`; 1.0 when both are zero, undefined when only the reference is.
pub fn for_ratio(for_group: f64, for_reference: f64) -> Option<f64> {
    if for_reference > 0.0 {
        Some(for_group / for_reference)
    } else if for_group == 0.0 {
        Some(1.0)
    } else {
        None
    }
}

fn default_min_group() -> usize {
    25
}

fn default_band() -> (f64, f64) {
    (0.9, 1.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub attributes: Vec<Demographic>,
    /// Reference group per attribute; the largest group when absent.
    #[serde(default)]
    pub reference_groups: BTreeMap<Demographic, String>,
    #[serde(default = "default_min_group")]
    pub min_group_size: usize,
    #[serde(default = "default_band")]
    pub parity_band: (f64, f64),
    /// The (attribute, group) ratio that decides band membership in joint selection.
    /// When absent, every audited ratio must be in band.
    #[serde(default)]
    pub focus: Option<(Demographic, String)>,
}

impl AuditConfig {
    pub fn new(attributes: Vec<Demographic>) -> Self {
        Self {
            attributes,
            reference_groups: BTreeMap::new(),
            min_group_size: default_min_group(),
            parity_band: default_band(),
            focus: None,
        }
    }

    pub fn in_band(&self, ratio: f64) -> bool {
        ratio >= self.parity_band.0 && ratio <= self.parity_band.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub n: usize,
    pub n_flagged: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub false_omission_rate: Option<f64>,
    /// Against the reference group; `None` when undefined.
    pub ratio: Option<f64>,
    pub in_band: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAudit {
    pub attribute: Demographic,
    pub reference_group: Option<String>,
    pub groups: Vec<GroupStats>,
    /// Groups below the minimum size, with their sizes.
    pub excluded: Vec<(String, usize)>,
    pub warnings: Vec<String>,
}

impl AttributeAudit {
    pub fn group(&self, name: &str) -> Option<&GroupStats> {
        self.groups.iter().find(|g| g.group == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub model_group: String,
    pub split_id: usize,
    pub parity_band: (f64, f64),
    pub attributes: Vec<AttributeAudit>,
}

impl AuditReport {
    pub fn attribute(&self, attr: Demographic) -> Option<&AttributeAudit> {
        self.attributes.iter().find(|a| a.attribute == attr)
    }

    /// Ratio for one group, if audited and defined.
    pub fn ratio(&self, attr: Demographic, group: &str) -> Option<f64> {
        self.attribute(attr)?.group(group)?.ratio
    }
}

/// Group value of every row for each attribute (`missing` when unknown).
pub fn group_columns(
    log: &EventLog,
    rows: &[PredictionPoint],
    attributes: &[Demographic],
) -> BTreeMap<Demographic, Vec<String>> {
    attributes
        .iter()
        .map(|a| {
            let col = rows
                .iter()
                .map(|r| {
                    log.entity(&r.entity_id)
                        .map(|e| e.group(*a).to_string())
                        .unwrap_or_else(|| crate::events::MISSING.to_string())
                })
                .collect();
            (*a, col)
        })
        .collect()
}

pub fn audit_model(
    model_group: &str,
    split_id: usize,
    flagged: &[bool],
    labels: &[bool],
    groups: &BTreeMap<Demographic, Vec<String>>,
    config: &AuditConfig,
) -> Result<AuditReport> {
    let mut attributes = Vec::new();
    for attr in &config.attributes {
        let col = groups
            .get(attr)
            .ok_or(FairnessError::MissingAttribute(*attr))?;
        if col.len() != flagged.len() || labels.len() != flagged.len() {
            return Err(FairnessError::LengthMismatch {
                flagged: flagged.len(),
                labels: labels.len(),
                groups: col.len(),
            });
        }
        attributes.push(audit_attribute(*attr, flagged, labels, col, config));
    }
    Ok(AuditReport {
        model_group: model_group.to_string(),
        split_id,
        parity_band: config.parity_band,
        attributes,
    })
}

fn audit_attribute(
    attr: Demographic,
    flagged: &[bool],
    labels: &[bool],
    col: &[String],
    config: &AuditConfig,
) -> AttributeAudit {
    let mut warnings = Vec::new();
    let missing = col.iter().filter(|g| *g == crate::events::MISSING).count();
    if !col.is_empty() && missing * 2 > col.len() {
        warnings.push(format!(
            "`{attr}` is missing for {missing} of {} rows; results mostly describe the missing group",
            col.len()
        ));
    }
    let mut counts: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    for ((g, f), l) in col.iter().zip(flagged).zip(labels) {
        let e = counts.entry(g.as_str()).or_default();
        e.0 += 1;
        if *f {
            e.1 += 1;
        } else if *l {
            e.2 += 1;
        } else {
            e.3 += 1;
        }
    }
    let mut excluded = Vec::new();
    let mut stats: Vec<GroupStats> = Vec::new();
    for (g, (n, nf, fneg, tneg)) in &counts {
        if *n < config.min_group_size {
            excluded.push((g.to_string(), *n));
            continue;
        }
        let neg = fneg + tneg;
        stats.push(GroupStats {
            group: g.to_string(),
            n: *n,
            n_flagged: *nf,
            false_negatives: *fneg,
            true_negatives: *tneg,
            false_omission_rate: (neg > 0).then(|| *fneg as f64 / neg as f64),
            ratio: None,
            in_band: None,
        });
    }
    if !excluded.is_empty() {
        let names: Vec<String> = excluded
            .iter()
            .map(|(g, n)| format!("{g} (n={n})"))
            .collect();
        warnings.push(format!(
            "groups below {} rows excluded: {}",
            config.min_group_size,
            names.join(", ")
        ));
    }
    let reference = match config.reference_groups.get(&attr) {
        Some(r) => stats
            .iter()
            .find(|s| &s.group == r)
            .map(|s| s.group.clone())
            .or_else(|| {
                warnings.push(format!(
                    "reference group `{r}` for `{attr}` is absent or too small"
                ));
                None
            }),
        // Largest group; ties go to the lexicographically smaller name.
        None => stats
            .iter()
            .max_by(|a, b| a.n.cmp(&b.n).then_with(|| b.group.cmp(&a.group)))
            .map(|s| s.group.clone()),
    };
    let reference_for = reference
        .as_ref()
        .and_then(|r| stats.iter().find(|s| &s.group == r))
        .and_then(|s| s.false_omission_rate);
    for s in &mut stats {
        s.ratio = match (s.false_omission_rate, reference_for) {
            (Some(g), Some(r)) => for_ratio(g, r),
            _ => None,
        };
        s.in_band = s.ratio.map(|r| config.in_band(r));
    }
    AttributeAudit {
        attribute: attr,
        reference_group: reference,
        groups: stats,
        excluded,
        warnings,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_audits_csv<W: Write>(reports: &[AuditReport], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "model_group",
        "split_id",
        "attribute",
        "group",
        "n",
        "fn",
        "tn",
        "for",
        "ratio",
        "in_band",
    ])?;
    for r in reports {
        for a in &r.attributes {
            for g in &a.groups {
                w.write_record([
                    r.model_group.clone(),
                    r.split_id.to_string(),
                    a.attribute.to_string(),
                    g.group.clone(),
                    g.n.to_string(),
                    g.false_negatives.to_string(),
                    g.true_negatives.to_string(),
                    opt(g.false_omission_rate),
                    opt(g.ratio),
                    g.in_band.map(|b| b.to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCandidate {
    pub model_group: String,
    pub points: usize,
    pub mean_precision: f64,
    /// Mean ratio over the window per audited (attribute, group); `None` if any split was undefined.
    pub mean_ratios: Vec<(Demographic, String, Option<f64>)>,
    pub in_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSelection {
    pub model_group: String,
    /// Best first: in-band models, then out-of-band ones.
    pub ranking: Vec<JointCandidate>,
    pub window: Vec<usize>,
    pub rationale: String,
    pub warning: Option<String>,
}

/// Mean FOR ratios of one model over the window, keyed by (attribute, group).
fn mean_ratios(
    audits: &[&AuditReport],
    config: &AuditConfig,
) -> Vec<(Demographic, String, Option<f64>)> {
    let mut keys: BTreeSet<(Demographic, String)> = BTreeSet::new();
    for a in audits {
        for attr in &a.attributes {
            for g in &attr.groups {
                if Some(&g.group) != attr.reference_group.as_ref() {
                    keys.insert((attr.attribute, g.group.clone()));
                }
            }
        }
    }
    if let Some((attr, group)) = &config.focus {
        keys.retain(|(a, g)| a == attr && g == group);
        keys.insert((*attr, group.clone()));
    }
    keys.into_iter()
        .map(|(attr, group)| {
            let values: Option<Vec<f64>> = audits.iter().map(|a| a.ratio(attr, &group)).collect();
            let mean = values.map(|v| v.iter().sum::<f64>() / v.len() as f64);
            (attr, group, mean)
        })
        .collect()
}

/// Ranks models with in-band mean FOR ratios first, each side ordered by the selection rule.
pub fn joint_select(
    records: &[EvaluationRecord],
    audits: &[AuditReport],
    rule: &SelectionRule,
    config: &AuditConfig,
) -> Result<JointSelection> {
    if records.is_empty() || audits.is_empty() {
        return Err(FairnessError::EmptyInput);
    }
    let window = selection_window(records, rule.last_n_periods);
    let performance = rank_model_groups(records, rule)?;
    let mut candidates = Vec::new();
    for ranked in &performance.ranking {
        let mine: Vec<&AuditReport> = audits
            .iter()
            .filter(|a| a.model_group == ranked.model_group && window.contains(&a.split_id))
            .collect();
        if mine.is_empty() {
            return Err(FairnessError::MissingAudit(ranked.model_group.clone()));
        }
        let ratios = mean_ratios(&mine, config);
        let in_band = ratios
            .iter()
            .all(|(_, _, r)| r.is_some_and(|r| config.in_band(r)));
        candidates.push(JointCandidate {
            model_group: ranked.model_group.clone(),
            points: ranked.points,
            mean_precision: ranked.mean_precision,
            mean_ratios: ratios,
            in_band,
        });
    }
    let in_band: Vec<String> = candidates
        .iter()
        .filter(|c| c.in_band)
        .map(|c| c.model_group.clone())
        .collect();
    let (band_lo, band_hi) = config.parity_band;
    if in_band.is_empty() {
        let best = candidates[0].model_group.clone();
        return Ok(JointSelection {
            rationale: format!(
                "no model has mean FOR ratios within [{band_lo}, {band_hi}]; selected `{best}` on performance alone"
            ),
            warning: Some(format!(
                "every candidate is outside the parity band [{band_lo}, {band_hi}]; review disparity before deployment"
            )),
            model_group: best,
            ranking: candidates,
            window,
        });
    }
    // Re-rank the in-band subset on its own, so the per-split best is taken among them.
    let subset: Vec<EvaluationRecord> = records
        .iter()
        .filter(|r| in_band.contains(&r.model_group))
        .cloned()
        .collect();
    let in_rank = rank_model_groups(&subset, rule)?;
    let mut ranking: Vec<JointCandidate> = Vec::new();
    for r in &in_rank.ranking {
        let mut c = candidates
            .iter()
            .find(|c| c.model_group == r.model_group)
            .expect("in-band candidate")
            .clone();
        c.points = r.points;
        ranking.push(c);
    }
    ranking.extend(candidates.into_iter().filter(|c| !c.in_band));
    let best = ranking[0].model_group.clone();
    let rationale = if best == performance.model_group {
        format!("`{best}` is the top performer and its mean FOR ratios are within [{band_lo}, {band_hi}]")
    } else {
        format!(
            "`{best}` is the best of {} in-band model(s); top performer `{}` is outside [{band_lo}, {band_hi}]",
            in_band.len(),
            performance.model_group
        )
    };
    Ok(JointSelection {
        model_group: best,
        ranking,
        window,
        rationale,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::TopK;

    #[test]
    fn for_examples() {
        let flagged = [false, false, false];
        assert_eq!(
            false_omission_rate(&flagged, &[true, false, false], &[true; 3]),
            Some(1.0 / 3.0)
        );
        assert_eq!(
            false_omission_rate(&flagged, &[false; 3], &[true; 3]),
            Some(0.0)
        );
        assert_eq!(
            false_omission_rate(&[true; 3], &[true, false, false], &[true; 3]),
            None
        );
    }

    #[test]
    fn ratio_examples() {
        let r = for_ratio(0.30, 0.24).unwrap();
        assert!((r - 1.25).abs() < 1e-12);
        assert!(!AuditConfig::new(vec![]).in_band(r));
        assert_eq!(for_ratio(0.2, 0.2), Some(1.0));
        assert_eq!(for_ratio(0.0, 0.0), Some(1.0));
        assert_eq!(for_ratio(0.1, 0.0), None);
    }

    fn groups(col: Vec<&str>) -> BTreeMap<Demographic, Vec<String>> {
        BTreeMap::from([(
            Demographic::Race,
            col.into_iter().map(String::from).collect(),
        )])
    }

    #[test]
    fn under_flagged_group_out_of_band() {
        // 100 rows per group, 20 positives each; group B's positives are never flagged.
        let mut col = Vec::new();
        let mut labels = Vec::new();
        let mut flagged = Vec::new();
        for g in ["A", "B"] {
            for i in 0..100 {
                col.push(g);
                labels.push(i < 20);
                flagged.push(g == "A" && i < 10);
            }
        }
        let mut cfg = AuditConfig::new(vec![Demographic::Race]);
        cfg.reference_groups.insert(Demographic::Race, "A".into());
        let rep = audit_model("m", 0, &flagged, &labels, &groups(col), &cfg).unwrap();
        let b = rep
            .attribute(Demographic::Race)
            .unwrap()
            .group("B")
            .unwrap();
        assert!(b.ratio.unwrap() > 1.1);
        assert_eq!(b.in_band, Some(false));
    }

    #[test]
    fn small_groups_excluded_and_symmetric_groups_equal() {
        let mut col = vec!["A"; 50];
        col.extend(vec!["B"; 50]);
        col.extend(vec!["C"; 5]);
        let labels: Vec<bool> = (0..105).map(|i| i % 5 == 0).collect();
        let flagged = vec![false; 105];
        let cfg = AuditConfig::new(vec![Demographic::Race]);
        let rep = audit_model("m", 0, &flagged, &labels, &groups(col), &cfg).unwrap();
        let a = rep.attribute(Demographic::Race).unwrap();
        assert_eq!(a.excluded, vec![("C".to_string(), 5)]);
        assert!(a.warnings.iter().any(|w| w.contains("C (n=5)")));
        assert_eq!(a.group("B").unwrap().ratio, Some(1.0));
        // Nothing flagged: FOR equals group prevalence.
        assert_eq!(a.group("A").unwrap().false_omission_rate, Some(10.0 / 50.0));
    }

    #[test]
    fn mostly_missing_attribute_warns() {
        let mut col = vec!["missing"; 60];
        col.extend(vec!["A"; 40]);
        let rep = audit_model(
            "m",
            0,
            &[false; 100],
            &[false; 100],
            &groups(col),
            &AuditConfig::new(vec![Demographic::Race]),
        )
        .unwrap();
        assert!(!rep.attributes[0].warnings.is_empty());
    }

    fn record(group: &str, p: f64) -> EvaluationRecord {
        EvaluationRecord {
            model_group: group.into(),
            split_id: 0,
            n_rows: 100,
            prevalence: 0.2,
            metrics: vec![TopK {
                k_pct: 10.0,
                precision: p,
                recall: 0.0,
                n_flagged: 10,
                n_true: 0,
            }],
        }
    }

    fn audit(group: &str, ratio: f64) -> AuditReport {
        AuditReport {
            model_group: group.into(),
            split_id: 0,
            parity_band: (0.9, 1.1),
            attributes: vec![AttributeAudit {
                attribute: Demographic::Race,
                reference_group: Some("White".into()),
                groups: vec![
                    GroupStats {
                        group: "White".into(),
                        n: 100,
                        n_flagged: 10,
                        false_negatives: 10,
                        true_negatives: 80,
                        false_omission_rate: Some(0.1),
                        ratio: Some(1.0),
                        in_band: Some(true),
                    },
                    GroupStats {
                        group: "Black".into(),
                        n: 100,
                        n_flagged: 10,
                        false_negatives: 10,
                        true_negatives: 80,
                        false_omission_rate: Some(0.1 * ratio),
                        ratio: Some(ratio),
                        in_band: Some((0.9..=1.1).contains(&ratio)),
                    },
                ],
                excluded: vec![],
                warnings: vec![],
            }],
        }
    }

    #[test]
    fn in_band_beats_better_out_of_band() {
        let rule = SelectionRule::new(10.0);
        let cfg = AuditConfig::new(vec![Demographic::Race]);
        let sel = joint_select(
            &[record("A", 0.30), record("B", 0.32)],
            &[audit("A", 1.05), audit("B", 1.4)],
            &rule,
            &cfg,
        )
        .unwrap();
        assert_eq!(sel.model_group, "A");
        assert_eq!(sel.ranking[1].model_group, "B");
        assert!(sel.warning.is_none());
        assert!(sel.rationale.contains("in-band"));
    }

    #[test]
    fn all_out_of_band_falls_back_with_warning() {
        let rule = SelectionRule::new(10.0);
        let cfg = AuditConfig::new(vec![Demographic::Race]);
        let sel = joint_select(
            &[record("A", 0.30), record("B", 0.32)],
            &[audit("A", 1.25), audit("B", 1.26)],
            &rule,
            &cfg,
        )
        .unwrap();
        assert_eq!(sel.model_group, "B");
        assert!(sel.warning.is_some());
        let single = joint_select(&[record("A", 0.3)], &[audit("A", 1.0)], &rule, &cfg).unwrap();
        assert_eq!(single.model_group, "A");
        assert!(joint_select(&[], &[], &rule, &cfg).is_err());
    }
}
