use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Named metric values with the provenance of the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub task: String,
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_tag: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_tags: Vec<usize>,
    pub config_hash: String,
    pub manifest_hash: String,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.metrics.iter().chain(&self.per_tag) {
            if !v.is_finite() {
                return Err(CoreError::invalid(format!("metric {k} is not finite")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(self).map_err(|e| CoreError::invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: MetricReport =
            serde_json::from_str(text).map_err(|e| CoreError::invalid(format!("metric report: {e}")))?;
        report.validate()?;
        Ok(report)
    }

    /// `key=value` sections.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "task={}", self.task);
        let _ = writeln!(s, "split={}", self.split);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "manifest_hash={}", self.manifest_hash);
        let _ = writeln!(s, "\n[metrics]");
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k}={v:.6}");
        }
        if !self.per_tag.is_empty() {
            let _ = writeln!(s, "\n[per_tag]");
            for (k, v) in &self.per_tag {
                let _ = writeln!(s, "{k}={v:.6}");
            }
        }
        if !self.excluded_tags.is_empty() {
            let list: Vec<String> = self.excluded_tags.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(s, "\n[excluded]\ntags={}", list.join(","));
        }
        s
    }
}
