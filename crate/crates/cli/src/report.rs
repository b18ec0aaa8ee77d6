//! JSON documents written by the tool.

use std::collections::BTreeMap;
use std::path::Path;

use didmed::contrast::{ContrastSpec, EstimationConfig};
use didmed::error::{DataError, EstimationError};
use didmed::estimators::{EffectEstimate, Estimate};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Serialize)]
pub struct EffectRow {
    pub name: String,
    pub effect: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
    pub ci: [f64; 2],
    pub n: usize,
    pub n_trimmed: usize,
    pub n_trimmed_by_group: BTreeMap<String, usize>,
    pub n_excluded: usize,
}

impl From<&EffectEstimate> for EffectRow {
    fn from(e: &EffectEstimate) -> Self {
        Self {
            name: e.name.clone(),
            effect: e.value,
            se: e.std_error,
            t: e.t_stat,
            p: e.p_value,
            ci: [e.ci_low, e.ci_high],
            n: e.n_used,
            n_trimmed: e.n_trimmed.values().sum(),
            n_trimmed_by_group: e.n_trimmed.clone(),
            n_excluded: e.n_excluded,
        }
    }
}

/// Output of `didmed estimate`.
#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub input: String,
    pub contrast: ContrastSpec,
    pub config: EstimationConfig,
    pub estimates: Vec<EffectRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decomposition_residual: Option<f64>,
}

impl EstimateReport {
    pub fn new(input: &Path, contrast: &ContrastSpec, config: &EstimationConfig, est: &Estimate) -> Self {
        Self {
            input: input.display().to_string(),
            contrast: contrast.clone(),
            config: config.clone(),
            estimates: est.effects().into_iter().map(EffectRow::from).collect(),
            decomposition_residual: match est {
                Estimate::Mediation(r) => Some(r.decomposition_residual),
                Estimate::Effect(_) => None,
            },
        }
    }
}

/// A failure with its exit status and machine-readable details.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    kind: &'static str,
    message: String,
    details: Value,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self { code: 2, kind: "usage", message, details: Value::Null }
    }

    pub fn usage_from(e: EstimationError) -> Self {
        Self::usage(e.to_string())
    }

    pub fn io(path: &Path, e: &std::io::Error) -> Self {
        Self {
            code: 2,
            kind: "io",
            message: format!("{}: {e}", path.display()),
            details: json!({ "path": path.display().to_string() }),
        }
    }

    pub fn data(e: DataError) -> Self {
        let details = match &e {
            DataError::MissingColumn(c) => json!({ "column": c }),
            DataError::NonNumericCell { row, column } => json!({ "column": column, "row": row }),
            DataError::MissingValues { column, rows } => json!({ "column": column, "rows": rows }),
            DataError::InvalidPeriod { row } => json!({ "row": row }),
            DataError::InconsistentPanelUnit(u) => json!({ "unit": u }),
            _ => Value::Null,
        };
        Self { code: 2, kind: "data", message: e.to_string(), details }
    }

    pub fn estimation(e: EstimationError) -> Self {
        let (code, details) = match &e {
            EstimationError::InvalidConfig(_) | EstimationError::InvalidContrast(_) => (2, Value::Null),
            EstimationError::EmptyRequiredCell { d, m, t } => (3, json!({ "cell": { "d": d, "m": m, "t": t } })),
            EstimationError::EmptyTrainingCell { id, fold } => (3, json!({ "nuisance": id.to_string(), "fold": fold })),
            EstimationError::TooFewUntrimmed(group) => (3, json!({ "group": group })),
            _ => (3, Value::Null),
        };
        Self { code, kind: "estimation", message: e.to_string(), details }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind, "message": self.message, "details": self.details } })
    }
}
