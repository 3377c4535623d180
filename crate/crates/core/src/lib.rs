//! Early-warning risk models for retention in HIV care.
//!
//! The pipeline runs bottom-up: an [`events::EventLog`] of visits, labs and
//! diagnoses; binary outcome [`labels`] at as-of dates; as-of [`features`];
//! [`temporal`] cross-validation splits; [`learners`]; top-k [`evaluation`] and
//! model selection; and group-level [`fairness`] audits.

pub mod evaluation;
pub mod events;
pub mod fairness;
pub mod features;
pub mod labels;
pub mod learners;
pub mod math;
pub mod temporal;
