//! Model families behind one fit/score contract.
//!
//! Learned families (trees, forests, boosting, logistic regression) read the encoded
//! [`FeatureMatrix`]. Baselines read unencoded attributes from the event log.

mod baselines;
mod ensemble;
mod logistic;
mod tree;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{viral_load_score, Rule, RuleOp, RuleTable};
pub use ensemble::{
    bootstrap_weights, fit_boosted, fit_forest, BoostParams, Boosted, Forest, ForestParams,
};
pub use logistic::{
    fit_logistic, gradient_descent, Descent, Logistic, LogisticObjective, LogisticParams,
};
pub use tree::{grow_tree, BinnedMatrix, Criterion, Node, Targets, Tree, TreeParams};

use crate::events::EventLog;
use crate::features::{FeatureMatrix, RawAttributes};
use crate::labels::{LabelMatrix, PredictionPoint};
use crate::math::fnv1a;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("cannot fit on an empty training set")]
    EmptyTrain,
    #[error("feature rows and label rows differ at row {0}")]
    RowMismatch(usize),
    #[error("non-finite feature value at row {row}, column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("boosting loss became non-finite at round {round}")]
    NonFiniteLoss { round: usize },
    #[error("feature columns differ from the training columns at position {position}: expected `{expected}`, found `{found}`")]
    FeatureMismatch {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("rule references unknown attribute `{0}`")]
    UnknownRuleAttribute(String),
    #[error("unknown learner family `{0}`")]
    UnknownFamily(String),
    #[error("unsupported model format version {0}")]
    FormatVersion(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, LearnerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerFamily {
    DecisionTree,
    RandomForest,
    GradientBoostedTrees,
    LogisticRegression,
    ExpertRules,
    PriorBaseline,
    ViralLoadRanking,
}

impl LearnerFamily {
    pub const ALL: [LearnerFamily; 7] = [
        LearnerFamily::DecisionTree,
        LearnerFamily::RandomForest,
        LearnerFamily::GradientBoostedTrees,
        LearnerFamily::LogisticRegression,
        LearnerFamily::ExpertRules,
        LearnerFamily::PriorBaseline,
        LearnerFamily::ViralLoadRanking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LearnerFamily::DecisionTree => "decision_tree",
            LearnerFamily::RandomForest => "random_forest",
            LearnerFamily::GradientBoostedTrees => "gradient_boosted_trees",
            LearnerFamily::LogisticRegression => "logistic_regression",
            LearnerFamily::ExpertRules => "expert_rules",
            LearnerFamily::PriorBaseline => "prior_baseline",
            LearnerFamily::ViralLoadRanking => "viral_load_ranking",
        }
    }

    /// Baselines are comparators and never take part in model selection.
    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            LearnerFamily::ExpertRules
                | LearnerFamily::PriorBaseline
                | LearnerFamily::ViralLoadRanking
        )
    }

    /// Scores are probabilities in [0, 1].
    pub fn is_probabilistic(self) -> bool {
        !matches!(
            self,
            LearnerFamily::ExpertRules | LearnerFamily::ViralLoadRanking
        )
    }

    fn allowed_hyperparameters(self) -> &'static [&'static str] {
        const TREE: &[&str] = &[
            "max_depth",
            "min_samples_split",
            "min_samples_leaf",
            "max_features",
            "max_bins",
        ];
        match self {
            LearnerFamily::DecisionTree => TREE,
            LearnerFamily::RandomForest => &[
                "n_trees",
                "bootstrap",
                "max_depth",
                "min_samples_split",
                "min_samples_leaf",
                "max_features",
                "max_bins",
            ],
            LearnerFamily::GradientBoostedTrees => &[
                "n_rounds",
                "learning_rate",
                "subsample",
                "max_depth",
                "min_samples_split",
                "min_samples_leaf",
                "max_features",
                "max_bins",
            ],
            LearnerFamily::LogisticRegression => &["l2_lambda", "max_iter", "tol"],
            _ => &[],
        }
    }
}

impl fmt::Display for LearnerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerFamily {
    type Err = LearnerError;

    fn from_str(s: &str) -> Result<Self> {
        LearnerFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| LearnerError::UnknownFamily(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub family: LearnerFamily,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
    /// Restrict the model to columns starting with one of these prefixes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_prefixes: Option<Vec<String>>,
    /// Rule table for `expert_rules`; the default table when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<RuleTable>,
}

impl LearnerSpec {
    pub fn new(family: LearnerFamily) -> Self {
        Self {
            family,
            hyperparameters: BTreeMap::new(),
            seed: 0,
            feature_prefixes: None,
            rules: None,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.hyperparameters.insert(name.to_string(), value);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Stable identifier of family plus hyperparameters, shared across splits.
    pub fn model_group(&self) -> String {
        let mut id = self.family.as_str().to_string();
        if !self.hyperparameters.is_empty() {
            let hp: Vec<String> = self
                .hyperparameters
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            id.push_str(&format!("({})", hp.join(",")));
        }
        if let Some(prefixes) = &self.feature_prefixes {
            id.push_str(&format!("[{}]", prefixes.join("|")));
        }
        if let Some(rules) = &self.rules {
            let r: Vec<String> = rules
                .rules()
                .iter()
                .map(|r| format!("{}{}{}:{}", r.attribute, r.op, r.threshold, r.weight))
                .collect();
            id.push_str(&format!("{{{}}}", r.join(";")));
        }
        id
    }

    fn get(&self, name: &str) -> Option<f64> {
        self.hyperparameters.get(name).copied()
    }

    fn int(&self, name: &str, default: Option<usize>, min: usize) -> Result<Option<usize>> {
        match self.get(name) {
            None => Ok(default),
            Some(v) if v.fract() == 0.0 && v >= min as f64 && v.is_finite() => Ok(Some(v as usize)),
            Some(v) => Err(LearnerError::InvalidHyperparameter(format!(
                "{name} must be an integer >= {min}, got {v}"
            ))),
        }
    }

    fn real(
        &self,
        name: &str,
        default: f64,
        valid: impl Fn(f64) -> bool,
        rule: &str,
    ) -> Result<f64> {
        let v = self.get(name).unwrap_or(default);
        if v.is_finite() && valid(v) {
            Ok(v)
        } else {
            Err(LearnerError::InvalidHyperparameter(format!(
                "{name} must be {rule}, got {v}"
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.family.allowed_hyperparameters();
        if let Some(k) = self
            .hyperparameters
            .keys()
            .find(|k| !allowed.contains(&k.as_str()))
        {
            return Err(LearnerError::InvalidHyperparameter(format!(
                "`{k}` does not apply to {}",
                self.family
            )));
        }
        if self.rules.is_some() && self.family != LearnerFamily::ExpertRules {
            return Err(LearnerError::InvalidHyperparameter(
                "rules only apply to expert_rules".into(),
            ));
        }
        match self.family {
            LearnerFamily::DecisionTree
            | LearnerFamily::RandomForest
            | LearnerFamily::GradientBoostedTrees => {
                self.tree_params(10)?;
                self.int("max_bins", None, 2)?;
                self.int("n_trees", None, 1)?;
                self.int("n_rounds", None, 0)?;
                self.real("learning_rate", 0.1, |v| v >= 0.0, "non-negative")?;
                self.real("subsample", 1.0, |v| v > 0.0 && v <= 1.0, "in (0, 1]")?;
                self.real("bootstrap", 1.0, |v| v == 0.0 || v == 1.0, "0 or 1")?;
            }
            LearnerFamily::LogisticRegression => {
                self.logistic_params()?;
            }
            _ => {}
        }
        Ok(())
    }

    fn tree_params(&self, p: usize) -> Result<TreeParams> {
        let default_depth = match self.family {
            LearnerFamily::GradientBoostedTrees => Some(3),
            _ => None,
        };
        let max_features = match self.get("max_features") {
            None if self.family == LearnerFamily::RandomForest => {
                Some(((p as f64).sqrt() as usize).max(1))
            }
            None => None,
            Some(v) if v > 0.0 && v < 1.0 => Some(((v * p as f64).ceil() as usize).max(1)),
            Some(_) => self.int("max_features", None, 1)?.map(|m| m.min(p.max(1))),
        };
        Ok(TreeParams {
            max_depth: self.int("max_depth", default_depth, 1)?,
            min_samples_split: self.int("min_samples_split", Some(2), 2)?.unwrap_or(2) as f64,
            min_samples_leaf: self.int("min_samples_leaf", Some(1), 1)?.unwrap_or(1) as f64,
            max_features,
        })
    }

    fn logistic_params(&self) -> Result<LogisticParams> {
        Ok(LogisticParams {
            l2_lambda: self.real("l2_lambda", 0.01, |v| v >= 0.0, "non-negative")?,
            max_iter: self.int("max_iter", Some(500), 1)?.unwrap_or(500),
            tol: self.real("tol", 1e-4, |v| v > 0.0, "positive")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedState {
    DecisionTree { tree: Tree },
    RandomForest { forest: Forest },
    GradientBoostedTrees { boosted: Boosted },
    LogisticRegression { logistic: Logistic },
    ExpertRules { rules: RuleTable },
    PriorBaseline { score: f64 },
    ViralLoadRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub spec: LearnerSpec,
    pub model_group: String,
    pub train_split_id: usize,
    pub feature_names: Vec<String>,
    /// Matrix columns the fitted state reads, in order.
    pub columns: Vec<usize>,
    pub state: FittedState,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Hash of an (entity, as-of) pair; keys bootstrap and subsample draws.
pub fn row_key(point: &PredictionPoint) -> u64 {
    fnv1a(format!("{}|{}", point.entity_id, point.as_of).as_bytes())
}

fn check_finite(x: &FeatureMatrix) -> Result<()> {
    for ((r, c), v) in x.values.indexed_iter() {
        if !v.is_finite() {
            return Err(LearnerError::NonFinite {
                row: r,
                column: x.columns[c].clone(),
            });
        }
    }
    Ok(())
}

fn raw_rows(log: &EventLog, rows: &[PredictionPoint]) -> Vec<RawAttributes> {
    rows.par_iter()
        .map(|p| RawAttributes::from_log(log, p))
        .collect()
}

pub fn fit(
    spec: &LearnerSpec,
    x: &FeatureMatrix,
    y: &LabelMatrix,
    split_id: usize,
) -> Result<TrainedModel> {
    spec.validate()?;
    if y.is_empty() {
        return Err(LearnerError::EmptyTrain);
    }
    if x.n_rows() != y.len() {
        return Err(LearnerError::RowMismatch(x.n_rows().min(y.len())));
    }
    if let Some(i) = x
        .rows
        .iter()
        .zip(&y.rows)
        .position(|(a, b)| a.key() != b.key())
    {
        return Err(LearnerError::RowMismatch(i));
    }
    let columns: Vec<usize> = match &spec.feature_prefixes {
        Some(prefixes) => (0..x.n_cols())
            .filter(|c| {
                prefixes
                    .iter()
                    .any(|p| x.columns[*c].starts_with(p.as_str()))
            })
            .collect(),
        None => (0..x.n_cols()).collect(),
    };
    let target: Vec<f64> = y.labels.iter().map(|l| *l as u8 as f64).collect();
    let mut warnings = Vec::new();
    let learned = !spec.family.is_baseline();
    if learned {
        check_finite(x)?;
    }
    let sub = || -> Array2<f64> {
        if columns.len() == x.n_cols() {
            x.values.clone()
        } else {
            x.values.select(Axis(1), &columns)
        }
    };
    let keys = || x.rows.iter().map(row_key).collect::<Vec<_>>();
    let max_bins = spec.int("max_bins", Some(255), 2)?.unwrap_or(255);
    let state = match spec.family {
        LearnerFamily::DecisionTree => {
            let xs = sub();
            let data = BinnedMatrix::new(&xs, max_bins);
            let params = spec.tree_params(xs.ncols())?;
            let w = vec![1.0; target.len()];
            let targets = Targets {
                target: &target,
                hess: None,
                weight: &w,
            };
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(spec.seed);
            FittedState::DecisionTree {
                tree: grow_tree(&data, &targets, Criterion::Gini, &params, &mut rng),
            }
        }
        LearnerFamily::RandomForest => {
            let xs = sub();
            let data = BinnedMatrix::new(&xs, max_bins);
            let params = ForestParams {
                n_trees: spec.int("n_trees", Some(100), 1)?.unwrap_or(100),
                tree: spec.tree_params(xs.ncols())?,
                bootstrap: spec.get("bootstrap").unwrap_or(1.0) == 1.0,
                seed: spec.seed,
            };
            FittedState::RandomForest {
                forest: fit_forest(&data, &target, &keys(), &params),
            }
        }
        LearnerFamily::GradientBoostedTrees => {
            let xs = sub();
            let data = BinnedMatrix::new(&xs, max_bins);
            let params = BoostParams {
                n_rounds: spec.int("n_rounds", Some(100), 0)?.unwrap_or(100),
                learning_rate: spec.real("learning_rate", 0.1, |v| v >= 0.0, "non-negative")?,
                tree: spec.tree_params(xs.ncols())?,
                subsample: spec.real("subsample", 1.0, |v| v > 0.0 && v <= 1.0, "in (0, 1]")?,
                seed: spec.seed,
            };
            FittedState::GradientBoostedTrees {
                boosted: fit_boosted(&xs, &data, &target, &keys(), &params)?,
            }
        }
        LearnerFamily::LogisticRegression => {
            let xs = sub();
            let params = spec.logistic_params()?;
            let logistic = fit_logistic(&xs, &target, (0..xs.ncols()).collect(), &params);
            if !logistic.converged {
                let msg = format!(
                    "logistic regression did not reach tol {} within {} iterations; keeping the best iterate",
                    params.tol, params.max_iter
                );
                log::warn!("{}: {msg}", spec.model_group());
                warnings.push(msg);
            }
            FittedState::LogisticRegression { logistic }
        }
        LearnerFamily::ExpertRules => FittedState::ExpertRules {
            rules: spec.rules.clone().unwrap_or_else(RuleTable::default_table),
        },
        LearnerFamily::PriorBaseline => FittedState::PriorBaseline {
            score: y.prevalence(),
        },
        LearnerFamily::ViralLoadRanking => FittedState::ViralLoadRanking,
    };
    Ok(TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        model_group: spec.model_group(),
        train_split_id: split_id,
        feature_names: x.columns.clone(),
        columns: if learned { columns } else { Vec::new() },
        state,
        warnings,
    })
}

impl TrainedModel {
    pub fn family(&self) -> LearnerFamily {
        self.spec.family
    }

    fn check_columns(&self, x: &FeatureMatrix) -> Result<()> {
        let n = self.feature_names.len().max(x.columns.len());
        for i in 0..n {
            let expected = self
                .feature_names
                .get(i)
                .map(String::as_str)
                .unwrap_or("<none>");
            let found = x.columns.get(i).map(String::as_str).unwrap_or("<none>");
            if expected != found {
                return Err(LearnerError::FeatureMismatch {
                    position: i,
                    expected: expected.to_string(),
                    found: found.to_string(),
                });
            }
        }
        Ok(())
    }

    fn sub(&self, x: &FeatureMatrix) -> Array2<f64> {
        if self.columns.len() == x.n_cols() {
            x.values.clone()
        } else {
            x.values.select(Axis(1), &self.columns)
        }
    }

    /// Scores every row. `log` is read only by baselines.
    pub fn score(&self, x: &FeatureMatrix, log: &EventLog) -> Result<Vec<f64>> {
        self.check_columns(x)?;
        Ok(match &self.state {
            FittedState::DecisionTree { tree } => {
                ensemble::predict_all(&self.sub(x), |r| tree.predict_row(r))
            }
            FittedState::RandomForest { forest } => {
                ensemble::predict_all(&self.sub(x), |r| forest.predict_row(r))
            }
            FittedState::GradientBoostedTrees { boosted } => {
                ensemble::predict_all(&self.sub(x), |r| boosted.predict_row(r))
            }
            FittedState::LogisticRegression { logistic } => {
                ensemble::predict_all(&self.sub(x), |r| logistic.predict_row(r))
            }
            FittedState::ExpertRules { rules } => raw_rows(log, &x.rows)
                .iter()
                .map(|r| rules.score(r))
                .collect(),
            FittedState::PriorBaseline { score } => vec![*score; x.n_rows()],
            FittedState::ViralLoadRanking => raw_rows(log, &x.rows)
                .iter()
                .map(viral_load_score)
                .collect(),
        })
    }

    /// Features ranked by importance. Baselines return an empty list.
    pub fn feature_importances(&self) -> Vec<(String, f64)> {
        let p = self.columns.len();
        let imp = match &self.state {
            FittedState::DecisionTree { tree } => {
                let mut v = vec![0.0; p];
                tree.add_importances(&mut v);
                ensemble::normalize(v)
            }
            FittedState::RandomForest { forest } => forest.importances(p),
            FittedState::GradientBoostedTrees { boosted } => boosted.importances(p),
            FittedState::LogisticRegression { logistic } => logistic.importances(p),
            _ => {
                log::info!("{} has no feature importances", self.family());
                return Vec::new();
            }
        };
        let mut ranked: Vec<(String, f64)> = self
            .columns
            .iter()
            .zip(imp)
            .map(|(c, v)| (self.feature_names[*c].clone(), v))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked
    }

    /// Per-feature contributions to one row's score, largest first.
    ///
    /// Trees use path-based attribution (change in node value at each split); logistic
    /// regression and boosting report log-odds terms.
    pub fn contributions(
        &self,
        x: &FeatureMatrix,
        log: &EventLog,
        row: usize,
    ) -> Result<Vec<(String, f64)>> {
        self.check_columns(x)?;
        let mut out: Vec<(String, f64)> = match &self.state {
            FittedState::ExpertRules { rules } => {
                rules.contributions(&RawAttributes::from_log(log, &x.rows[row]))
            }
            FittedState::ViralLoadRanking => {
                let raw = RawAttributes::from_log(log, &x.rows[row]);
                vec![("last_viral_load".to_string(), viral_load_score(&raw))]
            }
            FittedState::PriorBaseline { .. } => Vec::new(),
            state => {
                let values: Vec<f64> = self.columns.iter().map(|c| x.values[[row, *c]]).collect();
                let r = ndarray::ArrayView1::from(&values);
                let mut contrib = vec![0.0; self.columns.len()];
                match state {
                    FittedState::DecisionTree { tree } => {
                        tree.add_contributions(r, 1.0, &mut contrib)
                    }
                    FittedState::RandomForest { forest } => {
                        forest.add_contributions(r, &mut contrib)
                    }
                    FittedState::GradientBoostedTrees { boosted } => {
                        boosted.add_contributions(r, &mut contrib)
                    }
                    FittedState::LogisticRegression { logistic } => {
                        logistic.add_contributions(r, &mut contrib)
                    }
                    _ => unreachable!("baselines handled above"),
                }
                self.columns
                    .iter()
                    .zip(contrib)
                    .filter(|(_, v)| *v != 0.0)
                    .map(|(c, v)| (self.feature_names[*c].clone(), v))
                    .collect()
            }
        };
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(s)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(LearnerError::FormatVersion(model.format_version));
        }
        Ok(model)
    }
}
