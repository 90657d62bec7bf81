//! The `verify` entry point: oracle suites with configurable sizes.

use anyhow::Result;
use durnn::oracle::{bound_suite, verify_suite, OracleReport, VerifyConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyRequest {
    pub suite: VerifyConfig,
    /// Sequence lengths for the norm-bound checks; empty skips them.
    pub bound_lengths: Vec<usize>,
    pub bound_instances: usize,
    pub bound_neurons: usize,
}

impl Default for VerifyRequest {
    fn default() -> Self {
        VerifyRequest {
            suite: VerifyConfig::default(),
            bound_lengths: vec![50, 200],
            bound_instances: 10,
            bound_neurons: 16,
        }
    }
}

pub fn run_verify(req: &VerifyRequest) -> Result<OracleReport> {
    let mut report = verify_suite(&req.suite)?;
    if !req.bound_lengths.is_empty() {
        let bounds = bound_suite(&req.bound_lengths, req.bound_instances, req.bound_neurons, req.suite.seed)?;
        report.extend(bounds.report);
    }
    Ok(report)
}
