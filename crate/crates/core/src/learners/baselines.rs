//! Comparison baselines: hand-written rules, a constant prior, and viral-load ranking.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::features::{RawAttributes, RAW_ATTRIBUTES, SUPPRESSION_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
}

impl RuleOp {
    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            RuleOp::Lt => a < b,
            RuleOp::Le => a <= b,
            RuleOp::Gt => a > b,
            RuleOp::Ge => a >= b,
            RuleOp::Eq => a == b,
        }
    }
}

impl fmt::Display for RuleOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleOp::Lt => "<",
            RuleOp::Le => "<=",
            RuleOp::Gt => ">",
            RuleOp::Ge => ">=",
            RuleOp::Eq => "==",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub attribute: String,
    pub op: RuleOp,
    pub threshold: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Additive point score. A rule whose attribute is missing for a row does not fire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Rule>", into = "Vec<Rule>")]
pub struct RuleTable {
    rules: Vec<Rule>,
}

impl TryFrom<Vec<Rule>> for RuleTable {
    type Error = LearnerError;

    fn try_from(rules: Vec<Rule>) -> Result<Self, Self::Error> {
        RuleTable::new(rules)
    }
}

impl From<RuleTable> for Vec<Rule> {
    fn from(t: RuleTable) -> Self {
        t.rules
    }
}

impl RuleTable {
    pub fn new(rules: Vec<Rule>) -> Result<Self, LearnerError> {
        for r in &rules {
            if !RAW_ATTRIBUTES.contains(&r.attribute.as_str()) {
                return Err(LearnerError::UnknownRuleAttribute(r.attribute.clone()));
            }
            if !r.threshold.is_finite() || !r.weight.is_finite() {
                return Err(LearnerError::InvalidHyperparameter(format!(
                    "rule on `{}` needs finite threshold and weight",
                    r.attribute
                )));
            }
        }
        Ok(Self { rules })
    }

    /// Age under 30, under a year on ART, substance abuse, not virally suppressed.
    pub fn default_table() -> Self {
        let rule = |attribute: &str, op, threshold| Rule {
            attribute: attribute.into(),
            op,
            threshold,
            weight: 1.0,
        };
        Self {
            rules: vec![
                rule("age", RuleOp::Lt, 30.0),
                rule("years_on_art", RuleOp::Lt, 1.0),
                rule("substance_abuse", RuleOp::Ge, 1.0),
                rule("last_viral_load", RuleOp::Ge, SUPPRESSION_THRESHOLD),
            ],
        }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    fn fired<'a>(&'a self, raw: &'a RawAttributes) -> impl Iterator<Item = &'a Rule> + 'a {
        self.rules.iter().filter(move |r| {
            raw.get(&r.attribute)
                .is_some_and(|v| r.op.holds(v, r.threshold))
        })
    }

    pub fn score(&self, raw: &RawAttributes) -> f64 {
        self.fired(raw).map(|r| r.weight).sum()
    }

    pub fn contributions(&self, raw: &RawAttributes) -> Vec<(String, f64)> {
        self.fired(raw)
            .map(|r| (r.attribute.clone(), r.weight))
            .collect()
    }
}

/// Latest viral load; never-tested rows rank above every observed value.
pub fn viral_load_score(raw: &RawAttributes) -> f64 {
    raw.last_viral_load.unwrap_or(f64::MAX)
}
