//! Experiment configuration: TOML on disk, scenario defaults applied on load.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use retain_core::events::synthetic::{GroupBias, SignalWeight};
use retain_core::events::{DateRange, Demographic, SyntheticConfig};
use retain_core::evaluation::SelectionRule;
use retain_core::fairness::AuditConfig;
use retain_core::features::FeatureConfig;
use retain_core::labels::LabelSpec;
use retain_core::learners::{LearnerFamily, LearnerSpec};
use retain_core::temporal::{TemporalConfig, UpdateFrequency};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Appointment-level predictions, yearly model updates.
    Clinic,
    /// Monthly rosters of entities with a recent lab test.
    HealthDepartment,
}

impl Scenario {
    pub fn update_frequency(self) -> UpdateFrequency {
        match self {
            Scenario::Clinic => UpdateFrequency::Yearly,
            Scenario::HealthDepartment => UpdateFrequency::Monthly,
        }
    }

    pub fn k_pct(self) -> f64 {
        match self {
            Scenario::Clinic => 10.0,
            Scenario::HealthDepartment => 1.0,
        }
    }

    pub fn label(self) -> LabelSpec {
        match self {
            Scenario::Clinic => LabelSpec::access(183),
            Scenario::HealthDepartment => LabelSpec::access(365),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBlock {
    pub n_entities: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Planted drop-out weights; the built-in signal when absent.
    #[serde(default)]
    pub dropout_signal: Option<Vec<SignalWeight>>,
    #[serde(default)]
    pub dropout_intercept: Option<f64>,
    #[serde(default)]
    pub group_bias: Option<GroupBias>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    #[serde(default)]
    pub synthetic: Option<SyntheticBlock>,
    #[serde(default)]
    pub entities: Option<PathBuf>,
    #[serde(default)]
    pub events: Option<PathBuf>,
    #[serde(default)]
    pub zip_attributes: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalBlock {
    #[serde(default)]
    pub feature_start: Option<NaiveDate>,
    #[serde(default)]
    pub data_end: Option<NaiveDate>,
    #[serde(default)]
    pub update_frequency: Option<UpdateFrequency>,
    #[serde(default)]
    pub test_span_months: Option<u32>,
    #[serde(default)]
    pub min_train_history_months: Option<u32>,
    #[serde(default)]
    pub sliding_window_months: Option<u32>,
    /// Keep only the most recent N splits.
    #[serde(default)]
    pub last_n_splits: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakagePolicy {
    #[default]
    Abort,
    Warn,
}

fn default_sample() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakageBlock {
    #[serde(default)]
    pub on_finding: LeakagePolicy,
    /// Rows per matrix recomputed from the censored log.
    #[serde(default = "default_sample")]
    pub recompute_sample: usize,
}

impl Default for LeakageBlock {
    fn default() -> Self {
        Self {
            on_finding: LeakagePolicy::Abort,
            recompute_sample: default_sample(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionBlock {
    #[serde(default)]
    pub k_pct: Option<f64>,
    #[serde(default)]
    pub regret_band: Option<f64>,
    #[serde(default)]
    pub last_n_periods: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Write per-split feature and label matrices to the run store.
    #[serde(default)]
    pub write_matrices: bool,
}

/// The file as written by a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub label: Option<LabelSpec>,
    #[serde(default)]
    pub temporal: TemporalBlock,
    #[serde(default)]
    pub features: Option<FeatureConfig>,
    #[serde(default)]
    pub learners: Option<Vec<LearnerSpec>>,
    #[serde(default)]
    pub selection: SelectionBlock,
    #[serde(default)]
    pub k_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub audit: Option<AuditConfig>,
    #[serde(default)]
    pub leakage: LeakageBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Files {
        entities: PathBuf,
        events: PathBuf,
        zip_attributes: Option<PathBuf>,
    },
}

/// Fully resolved configuration; every default has been filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub data: DataSource,
    pub label: LabelSpec,
    /// Split-level settings; the dates default to the data range once it is known.
    pub temporal: TemporalBlock,
    pub features: FeatureConfig,
    pub learners: Vec<LearnerSpec>,
    pub selection: SelectionRule,
    pub k_grid: Vec<f64>,
    pub audit: AuditConfig,
    pub leakage: LeakageBlock,
    pub write_matrices: bool,
    /// Where run directories are created. Not part of the run id.
    #[serde(skip)]
    pub output_dir: PathBuf,
}

/// Tree ensembles and linear models plus the three baselines.
pub fn default_grid(scenario: Scenario, seed: u64) -> Vec<LearnerSpec> {
    use LearnerFamily::*;
    let mut grid = vec![
        LearnerSpec::new(DecisionTree).with("max_depth", 5.0),
        LearnerSpec::new(RandomForest)
            .with("n_trees", 100.0)
            .with("max_depth", 5.0)
            .with("min_samples_split", 10.0),
        LearnerSpec::new(GradientBoostedTrees)
            .with("n_rounds", 100.0)
            .with("max_depth", 3.0)
            .with("learning_rate", 0.1),
        LearnerSpec::new(LogisticRegression).with("l2_lambda", 0.01),
        LearnerSpec::new(ExpertRules),
        LearnerSpec::new(PriorBaseline),
    ];
    if scenario == Scenario::Clinic {
        // Demographics-only regression standing in for a published clinical model.
        let mut expert_lr = LearnerSpec::new(LogisticRegression).with("l2_lambda", 0.01);
        expert_lr.feature_prefixes = Some(
            [
                "age",
                "days_since_diagnosis",
                "gender_",
                "race_",
                "transmission_category_",
                "zip_code_",
            ]
                .map(String::from)
                .to_vec(),
        );
        grid.push(expert_lr);
    } else {
        grid.push(LearnerSpec::new(ViralLoadRanking));
    }
    grid.into_iter().map(|s| s.with_seed(seed)).collect()
}

pub fn default_k_grid() -> Vec<f64> {
    (1..=100).map(f64::from).collect()
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).context("config does not match the schema")
    }

    pub fn resolve(self, base_dir: &Path) -> Result<ExperimentConfig> {
        let data = match (self.data.synthetic, self.data.entities, self.data.events) {
            (Some(s), None, None) => {
                let range = DateRange::new(s.start, s.end)?;
                let mut cfg = SyntheticConfig::new(s.n_entities, range, self.seed);
                cfg.dropout_signal = match s.dropout_signal {
                    Some(v) => v,
                    None => SyntheticConfig::new(1, range, 0).with_default_signal().dropout_signal,
                };
                if let Some(b) = s.dropout_intercept {
                    cfg.dropout_intercept = b;
                }
                cfg.group_bias = s.group_bias;
                DataSource::Synthetic(cfg)
            }
            (None, Some(entities), Some(events)) => DataSource::Files {
                entities: base_dir.join(entities),
                events: base_dir.join(events),
                zip_attributes: self.data.zip_attributes.map(|p| base_dir.join(p)),
            },
            _ => bail!("[data] needs either a [data.synthetic] block or both `entities` and `events` paths"),
        };
        let label = self.label.unwrap_or(self.scenario.label());
        label.validate()?;
        let features = self.features.unwrap_or_else(FeatureConfig::standard);
        features.validate()?;
        let learners = self
            .learners
            .unwrap_or_else(|| default_grid(self.scenario, self.seed));
        if learners.is_empty() {
            bail!("the learner grid is empty");
        }
        let mut groups = BTreeMap::new();
        for spec in &learners {
            spec.validate()
                .with_context(|| format!("learner `{}`", spec.model_group()))?;
            if groups.insert(spec.model_group(), ()).is_some() {
                bail!("duplicate learner `{}` in the grid", spec.model_group());
            }
        }
        let mut selection = SelectionRule::new(self.selection.k_pct.unwrap_or(self.scenario.k_pct()));
        if let Some(b) = self.selection.regret_band {
            selection.regret_band = b;
        }
        if let Some(n) = self.selection.last_n_periods {
            selection.last_n_periods = n;
        }
        selection.validate()?;
        let mut k_grid = self.k_grid.unwrap_or_else(default_k_grid);
        if !k_grid.iter().any(|k| (k - selection.k_pct).abs() < 1e-12) {
            k_grid.push(selection.k_pct);
        }
        k_grid.sort_by(f64::total_cmp);
        if let Some(k) = k_grid.iter().find(|k| !(**k > 0.0 && **k <= 100.0)) {
            bail!("k_grid values must be in (0, 100], got {k}");
        }
        let audit = self
            .audit
            .unwrap_or_else(|| AuditConfig::new(vec![Demographic::Race, Demographic::Gender]));
        if audit.parity_band.0 > audit.parity_band.1 {
            bail!("audit parity_band must be [low, high]");
        }
        Ok(ExperimentConfig {
            scenario: self.scenario,
            seed: self.seed,
            data,
            label,
            temporal: self.temporal,
            features,
            learners,
            selection,
            k_grid,
            audit,
            leakage: self.leakage,
            write_matrices: self.output.write_matrices,
            output_dir: base_dir.join(self.output_dir.unwrap_or_else(|| PathBuf::from("runs"))),
        })
    }
}

impl ExperimentConfig {
    /// Loads a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RawConfig::parse(&text)
            .and_then(|raw| raw.resolve(base))
            .with_context(|| format!("invalid config {}", path.display()))
    }

    /// Overrides the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        for l in &mut self.learners {
            l.seed = seed;
        }
    }

    /// Split configuration once the data range is known.
    pub fn temporal_config(&self, data: DateRange) -> TemporalConfig {
        let t = &self.temporal;
        let mut cfg = TemporalConfig::new(
            t.feature_start.unwrap_or(data.start),
            t.data_end.unwrap_or(data.end),
            t.update_frequency
                .unwrap_or(self.scenario.update_frequency()),
            self.label.window_days,
        );
        cfg.test_span_months = t.test_span_months;
        if let Some(m) = t.min_train_history_months {
            cfg.min_train_history_months = m;
        }
        cfg.sliding_window_months = t.sliding_window_months;
        cfg
    }

    /// Canonical JSON; the run id hashes this plus the crate version.
    pub fn normalized(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.normalized().as_bytes());
        h.update(b"\0");
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn model_groups(&self) -> Vec<String> {
        self.learners.iter().map(LearnerSpec::model_group).collect()
    }

    /// Model groups that compete in selection.
    pub fn candidates(&self) -> Vec<String> {
        self.learners
            .iter()
            .filter(|l| !l.family.is_baseline())
            .map(LearnerSpec::model_group)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
scenario = "health_department"
seed = 3

[data.synthetic]
n_entities = 10
start = "2010-01-01"
end = "2014-12-31"
"#;

    #[test]
    fn scenario_defaults_apply() {
        let cfg = RawConfig::parse(MINIMAL)
            .unwrap()
            .resolve(Path::new("."))
            .unwrap();
        assert_eq!(cfg.selection.k_pct, 1.0);
        assert_eq!(cfg.label, LabelSpec::access(365));
        assert_eq!(cfg.k_grid.len(), 100);
        assert!(cfg.learners.iter().any(|l| l.family == LearnerFamily::ViralLoadRanking));
        let t = cfg.temporal_config(DateRange::new("2010-01-01".parse().unwrap(), "2014-12-31".parse().unwrap()).unwrap());
        assert_eq!(t.update_frequency, UpdateFrequency::Monthly);
    }

    #[test]
    fn overrides_win() {
        let text = format!("{MINIMAL}\n[selection]\nk_pct = 5\n\n[label]\nkind = \"retention\"\nwindow_days = 365\n");
        let cfg = RawConfig::parse(&text).unwrap().resolve(Path::new(".")).unwrap();
        assert_eq!(cfg.selection.k_pct, 5.0);
        assert_eq!(cfg.label, LabelSpec::retention());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RawConfig::parse(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
    }

    #[test]
    fn run_id_tracks_content_not_output_dir() {
        let a = RawConfig::parse(MINIMAL).unwrap().resolve(Path::new("a")).unwrap();
        let b = RawConfig::parse(MINIMAL).unwrap().resolve(Path::new("b")).unwrap();
        assert_eq!(a.run_id(), b.run_id());
        let mut c = a.clone();
        c.set_seed(4);
        assert_ne!(a.run_id(), c.run_id());
    }

    #[test]
    fn data_source_required() {
        let bad = "scenario = \"clinic\"\n";
        assert!(RawConfig::parse(bad).unwrap().resolve(Path::new(".")).is_err());
    }
}
