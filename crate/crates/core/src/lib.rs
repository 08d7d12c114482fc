//! Cross-fitted double machine learning for panel data.
//!
//! The pipeline: a [`data_model::PanelDataset`] is featurized per lead
//! ([`featurize`]), first-stage forecasts of the outcome and each treatment
//! are cross-fitted by unit ([`crossfit`], [`learners`]), and the pooled
//! honest residuals feed a second-stage causal regression ([`engine`]).

pub mod crossfit;
pub mod data_model;
pub mod design;
pub mod diagnostics;
pub mod learners;
pub mod linalg;
pub mod engine;
pub mod featurize;
pub mod residuals;
pub mod synth;
pub mod treatments;
