//! Audit reports and their JSON / CSV encodings.

use serde::{Deserialize, Serialize};

use super::metrics::WorstOfN;
use super::EquivarianceVerdict;
use crate::error::{Error, Result};
use crate::model::ModelSpec;

use super::ShiftSampler;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits_variance: Option<Vec<f64>>,
    /// How vector logits are reduced to one variance per input.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance_reduction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_logit_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_of_n: Option<WorstOfN>,
    pub max_residual: f64,
    pub min_residual: f64,
    pub passed_count: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEnv {
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<ShiftSampler>,
}

/// Raw outcome of one suite. `passed` is the positive-sense verdict (every
/// test within tolerance, plus any metric condition the suite imposes);
/// counterexample suites set `expect_failure` and are judged by
/// [`AuditReport::meets_expectation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub suite: String,
    pub expect_failure: bool,
    pub passed: bool,
    pub tests: Vec<EquivarianceVerdict>,
    pub metrics: Metrics,
    pub env: ReportEnv,
}

impl AuditReport {
    pub(crate) fn new(suite: &str, expect_failure: bool, tests: Vec<EquivarianceVerdict>, env: ReportEnv) -> Self {
        let residuals = tests.iter().map(|t| t.residual);
        let metrics = Metrics {
            max_residual: residuals.clone().fold(0.0, f64::max),
            min_residual: residuals.fold(f64::INFINITY, f64::min),
            passed_count: tests.iter().filter(|t| t.passed).count(),
            total: tests.len(),
            ..Metrics::default()
        };
        let passed = !tests.is_empty() && tests.iter().all(|t| t.passed);
        Self { suite: suite.to_string(), expect_failure, passed, tests, metrics, env }
    }

    /// Positive suites must pass; counterexample suites must fail on every
    /// test with a residual above the floor.
    pub fn meets_expectation(&self) -> bool {
        if self.expect_failure {
            let floor = self.env.floor.unwrap_or(super::COUNTEREXAMPLE_FLOOR);
            !self.tests.is_empty() && self.tests.iter().all(|t| !t.passed && t.residual > floor)
        } else {
            self.passed
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Argument(e.to_string()))
    }
}

/// Header of the flat CSV encoding: one row per verdict.
pub const CSV_HEADER: [&str; 10] = [
    "suite",
    "op_name",
    "input_seed",
    "shift_dy",
    "shift_dx",
    "passed",
    "residual",
    "matched_dy",
    "matched_dx",
    "expect_failure",
];

/// CSV rows (without header) for a report.
pub fn csv_rows(report: &AuditReport) -> Vec<[String; 10]> {
    report
        .tests
        .iter()
        .map(|t| {
            let (mdy, mdx) =
                t.matched_shift.map_or((String::new(), String::new()), |m| (m.dy.to_string(), m.dx.to_string()));
            [
                report.suite.clone(),
                t.op_name.clone(),
                t.input_seed.to_string(),
                t.shift.dy.to_string(),
                t.shift.dx.to_string(),
                t.passed.to_string(),
                format!("{:e}", t.residual),
                mdy,
                mdx,
                report.expect_failure.to_string(),
            ]
        })
        .collect()
}
