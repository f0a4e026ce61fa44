use std::fs;
use std::path::Path;

use serde::Serialize;
use stealthpath::kl_attack::MIN_HEALTHY_ESS;
use stealthpath::{ClosedLoopRecord, GainCertificate};

use crate::config::ExperimentConfig;

/// Effective sample sizes over every replanning decision of a batch.
#[derive(Debug, Clone, Serialize)]
pub struct EssStats {
    pub decisions: usize,
    pub min: f64,
    pub mean: f64,
    pub degenerate: usize,
}

impl EssStats {
    pub fn of(records: &[ClosedLoopRecord]) -> Option<Self> {
        let all: Vec<f64> = records.iter().flat_map(|r| r.decision_ess.iter().copied()).collect();
        if all.is_empty() {
            return None;
        }
        Some(Self {
            decisions: all.len(),
            min: all.iter().copied().fold(f64::INFINITY, f64::min),
            mean: all.iter().sum::<f64>() / all.len() as f64,
            degenerate: all.iter().filter(|e| **e < MIN_HEALTHY_ESS).count(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DetectEcho {
    pub k: Vec<usize>,
    pub sigma: f64,
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub threads: usize,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_crash: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checks_passed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess: Option<EssStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<GainCertificate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detect: Option<DetectEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            wall_time_s: 0.0,
            outputs: Vec::new(),
            p_crash: None,
            mean_kl: None,
            checks_passed: None,
            ess: None,
            certificate: None,
            detect: None,
            config: None,
        }
    }

    /// Writes `manifest.toml` through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = toml::to_string(self).map_err(std::io::Error::other)?;
        let tmp = dir.join(".manifest.toml.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, dir.join("manifest.toml"))
    }
}
