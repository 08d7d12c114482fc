//! Run configuration: one TOML file describing data, schema, featurization,
//! learners, treatment builders and options.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dml_core::data_model::{IngestOptions, PanelDataset, Schema, TimeFormat};
use dml_core::diagnostics::Sign;
use dml_core::engine::{DdmlOptions, SeType};
use dml_core::featurize::{dynamic_featurizer, panel_featurizer, FeatureBuilder};
use dml_core::learners::{
    log_grid, EnsembleParams, LassoParams, Learner, OlsParams, PartialRidgeParams, PredictionTable,
    RidgeParams,
};
use dml_core::data_model::read_table;
use dml_core::synth::SynthConfig;
use dml_core::treatments::{core_treatment_set, OwnVar, PToPVar, TreatmentBuilder};
use serde::{Deserialize, Serialize};

use crate::CliError;

fn yes() -> bool {
    true
}

fn five() -> usize {
    5
}

fn default_significance() -> f64 {
    1.96
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Panel CSV; relative paths resolve against the config file.
    pub data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// |t| above which a coefficient is starred and sign-checked.
    #[serde(default = "default_significance")]
    pub significance: f64,
    pub schema: Option<Schema>,
    #[serde(default)]
    pub ingest: IngestBlock,
    #[serde(default)]
    pub featurizer: FeaturizerBlock,
    #[serde(default = "LearnerConfig::default_baseline")]
    pub baseline: LearnerConfig,
    #[serde(default)]
    pub treatments: Vec<TreatmentConfig>,
    #[serde(default = "LearnerConfig::default_causal")]
    pub causal: LearnerConfig,
    #[serde(default)]
    pub options: OptionsBlock,
    #[serde(default)]
    pub diagnostics: DiagnosticsBlock,
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestBlock {
    pub time_format: TimeFormat,
    pub na_tokens: Vec<String>,
}

impl Default for IngestBlock {
    fn default() -> Self {
        let d = IngestOptions::default();
        Self {
            time_format: d.time_format,
            na_tokens: d.na_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeaturizerKind {
    #[default]
    Panel,
    Dynamic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizerBlock {
    pub kind: FeaturizerKind,
    pub min_lag: usize,
    pub max_lag: usize,
    pub exclude_dummies: Vec<String>,
}

impl Default for FeaturizerBlock {
    fn default() -> Self {
        Self {
            kind: FeaturizerKind::Panel,
            min_lag: 1,
            max_lag: 1,
            exclude_dummies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoBlock {
    pub lambdas: Option<Vec<f64>>,
    pub n_lambdas: usize,
    pub lambda_min_ratio: f64,
    pub cv_folds: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for LassoBlock {
    fn default() -> Self {
        let d = LassoParams::default();
        Self {
            lambdas: d.lambdas,
            n_lambdas: d.n_lambdas,
            lambda_min_ratio: d.lambda_min_ratio,
            cv_folds: d.cv_folds,
            tol: d.tol,
            max_iter: d.max_iter,
            seed: d.seed,
        }
    }
}

impl From<&LassoBlock> for LassoParams {
    fn from(b: &LassoBlock) -> Self {
        LassoParams {
            lambdas: b.lambdas.clone(),
            n_lambdas: b.n_lambdas,
            lambda_min_ratio: b.lambda_min_ratio,
            cv_folds: b.cv_folds,
            tol: b.tol,
            max_iter: b.max_iter,
            seed: b.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerConfig {
    Ols {
        #[serde(default = "yes")]
        intercept: bool,
    },
    Mean,
    RidgeCv {
        lambdas: Option<Vec<f64>>,
        #[serde(default = "five")]
        cv_folds: usize,
        #[serde(default)]
        seed: u64,
    },
    LassoCv(LassoBlock),
    PostLasso(LassoBlock),
    PartialRidge {
        lambda: f64,
        #[serde(default)]
        unpenalized: Vec<String>,
    },
    Bucket {
        learners: Vec<LearnerConfig>,
        #[serde(default = "five")]
        cv_folds: usize,
        #[serde(default)]
        seed: u64,
    },
    Stacking {
        learners: Vec<LearnerConfig>,
        #[serde(default = "five")]
        cv_folds: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Long-format predictions `(unit keys..., time, lead, variable,
    /// prediction)`.
    PrePredicted { path: PathBuf },
}

impl LearnerConfig {
    fn default_baseline() -> Self {
        LearnerConfig::LassoCv(LassoBlock::default())
    }

    fn default_causal() -> Self {
        LearnerConfig::Ols { intercept: true }
    }

    /// Builds the learner; lookup tables are read only when `ds` is given
    /// and are otherwise left empty (enough for validation).
    pub fn build(&self, ds: Option<&PanelDataset>, base: &Path) -> Result<Learner, CliError> {
        Ok(match self {
            LearnerConfig::Ols { intercept } => Learner::Ols(OlsParams {
                intercept: *intercept,
            }),
            LearnerConfig::Mean => Learner::Mean,
            LearnerConfig::RidgeCv {
                lambdas,
                cv_folds,
                seed,
            } => Learner::RidgeCv(RidgeParams {
                lambdas: lambdas.clone().unwrap_or_else(|| log_grid(1e4, 1e-6, 100)),
                cv_folds: *cv_folds,
                seed: *seed,
            }),
            LearnerConfig::LassoCv(b) => Learner::LassoCv(b.into()),
            LearnerConfig::PostLasso(b) => Learner::PostLasso(b.into()),
            LearnerConfig::PartialRidge {
                lambda,
                unpenalized,
            } => Learner::PartialRidge(PartialRidgeParams {
                lambda: *lambda,
                unpenalized: unpenalized.clone(),
            }),
            LearnerConfig::Bucket {
                learners,
                cv_folds,
                seed,
            } => Learner::Bucket(EnsembleParams {
                learners: learners
                    .iter()
                    .map(|l| l.build(ds, base))
                    .collect::<Result<_, _>>()?,
                cv_folds: *cv_folds,
                seed: *seed,
            }),
            LearnerConfig::Stacking {
                learners,
                cv_folds,
                seed,
            } => Learner::Stacking(EnsembleParams {
                learners: learners
                    .iter()
                    .map(|l| l.build(ds, base))
                    .collect::<Result<_, _>>()?,
                cv_folds: *cv_folds,
                seed: *seed,
            }),
            LearnerConfig::PrePredicted { path } => {
                let table = match ds {
                    Some(ds) => {
                        let p = base.join(path);
                        let t = read_table(&p)
                            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                        PredictionTable::from_long_table(&t, ds)
                            .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
                    }
                    None => PredictionTable::new(Vec::new(), Vec::new()),
                };
                Learner::PrePredicted(Arc::new(table))
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TreatmentConfig {
    Own {
        treatment: String,
        #[serde(default)]
        lag: usize,
        #[serde(default)]
        interactions: Vec<Vec<String>>,
        penalized: Option<bool>,
    },
    Peer {
        treatment: String,
        group: String,
        peer_map: BTreeMap<String, Vec<String>>,
        #[serde(default)]
        by_focal: bool,
        penalized: Option<bool>,
    },
}

impl TreatmentConfig {
    pub fn build(&self) -> TreatmentBuilder {
        match self {
            TreatmentConfig::Own {
                treatment,
                lag,
                interactions,
                penalized,
            } => TreatmentBuilder::Own(OwnVar {
                treatment: treatment.clone(),
                lag: *lag,
                interaction_levels: interactions.clone(),
                penalized: *penalized,
            }),
            TreatmentConfig::Peer {
                treatment,
                group,
                peer_map,
                by_focal,
                penalized,
            } => TreatmentBuilder::Peer(PToPVar {
                treatment: treatment.clone(),
                group_col: group.clone(),
                peer_map: peer_map.clone(),
                by_focal: *by_focal,
                penalized: *penalized,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionsBlock {
    pub min_lead: usize,
    pub max_lead: usize,
    pub k: usize,
    pub seed: u64,
    pub se_type: SeType,
    pub intercept: bool,
    pub stratify_folds: bool,
}

impl Default for OptionsBlock {
    fn default() -> Self {
        let d = DdmlOptions::default();
        Self {
            min_lead: d.min_lead,
            max_lead: d.max_lead,
            k: d.k,
            seed: d.seed,
            se_type: d.se_type,
            intercept: d.intercept,
            stratify_folds: d.stratify_folds,
        }
    }
}

impl From<&OptionsBlock> for DdmlOptions {
    fn from(o: &OptionsBlock) -> Self {
        DdmlOptions {
            min_lead: o.min_lead,
            max_lead: o.max_lead,
            k: o.k,
            seed: o.seed,
            se_type: o.se_type,
            intercept: o.intercept,
            stratify_folds: o.stratify_folds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedSign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsBlock {
    /// Largest first-stage residuals listed per (variable, lead).
    pub top_k: usize,
    pub expected_signs: BTreeMap<String, ExpectedSign>,
}

impl Default for DiagnosticsBlock {
    fn default() -> Self {
        Self {
            top_k: 20,
            expected_signs: BTreeMap::new(),
        }
    }
}

impl DiagnosticsBlock {
    pub fn expected(&self) -> Vec<(String, Sign)> {
        self.expected_signs
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    ExpectedSign::Positive => Sign::Positive,
                    ExpectedSign::Negative => Sign::Negative,
                };
                (k.clone(), s)
            })
            .collect()
    }
}

/// Single-line rendering of a TOML error.
fn toml_reason(e: &toml::de::Error) -> String {
    let msg = e.message().trim().replace('\n', " ");
    match e.span() {
        Some(s) => format!("{msg} (at byte {})", s.start),
        None => msg,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(toml_reason(&e)))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn schema(&self) -> Result<&Schema, CliError> {
        self.schema
            .as_ref()
            .ok_or_else(|| CliError::Config("missing field `schema`".into()))
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            time_format: self.ingest.time_format,
            na_tokens: self.ingest.na_tokens.clone(),
        }
    }

    pub fn ddml_options(&self) -> DdmlOptions {
        (&self.options).into()
    }

    pub fn builders(&self) -> Vec<TreatmentBuilder> {
        self.treatments.iter().map(|t| t.build()).collect()
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate_for_fit(&self, base: &Path) -> Result<(), CliError> {
        let cfg = |m: String| CliError::Config(m);
        if self.data.is_none() {
            return Err(cfg("missing field `data`".into()));
        }
        let schema = self.schema()?;
        if !(self.significance > 0.0) {
            return Err(cfg(format!("significance must be positive, got {}", self.significance)));
        }
        let f = &self.featurizer;
        if f.kind == FeaturizerKind::Dynamic && f.min_lag > f.max_lag {
            return Err(cfg(format!(
                "featurizer: min_lag {} exceeds max_lag {}",
                f.min_lag, f.max_lag
            )));
        }
        for c in &f.exclude_dummies {
            if schema.col(c).is_none() {
                return Err(cfg(format!("featurizer.exclude_dummies: unknown column '{c}'")));
            }
        }
        for (name, l) in [("baseline", &self.baseline), ("causal", &self.causal)] {
            l.build(None, base)?
                .validate()
                .map_err(|e| cfg(format!("{name}: {e}")))?;
        }
        if matches!(self.causal, LearnerConfig::PrePredicted { .. }) {
            return Err(cfg("causal: pre_predicted cannot be the causal learner".into()));
        }
        self.ddml_options()
            .validate()
            .map_err(|e| cfg(format!("options: {e}")))?;
        if self.treatments.is_empty() {
            return Err(cfg("treatments: at least one builder is required".into()));
        }
        core_treatment_set(&self.builders(), schema).map_err(|e| cfg(format!("treatments: {e}")))?;
        for t in &self.treatments {
            match t {
                TreatmentConfig::Own { interactions, .. } => {
                    for c in interactions.iter().flatten() {
                        if schema.col(c).is_none() {
                            return Err(cfg(format!("treatments: unknown interaction column '{c}'")));
                        }
                    }
                }
                TreatmentConfig::Peer { group, peer_map, .. } => {
                    if !schema.panel_colnames().contains(group) {
                        return Err(cfg(format!("treatments: peer group '{group}' is not a panel column")));
                    }
                    for (focal, peers) in peer_map {
                        if peers.contains(focal) {
                            return Err(cfg(format!("treatments: level '{focal}' lists itself as a peer")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn feature_builders(&self, ds: &PanelDataset) -> Result<Vec<FeatureBuilder>, CliError> {
        let f = &self.featurizer;
        let r = match f.kind {
            FeaturizerKind::Panel => panel_featurizer(ds, &f.exclude_dummies),
            FeaturizerKind::Dynamic => dynamic_featurizer(ds, f.min_lag, f.max_lag, &f.exclude_dummies),
        };
        r.map_err(|e| CliError::Config(format!("featurizer: {e}")))
    }

    pub fn data_path(&self, base: &Path) -> Option<PathBuf> {
        self.data.as_ref().map(|d| base.join(d))
    }
}
