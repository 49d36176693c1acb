use std::io::Write;

use serde::{Deserialize, Serialize};

use super::probe::ProbeHead;
use crate::{Error, Result};

/// Per-seed values of one metric with their mean and population standard
/// deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        // identical values would otherwise pick up rounding from the sum
        let constant = values.windows(2).all(|w| w[0] == w[1]);
        let mean = match values.first() {
            Some(&v) if constant => v,
            _ => values.iter().sum::<f64>() / n,
        };
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MetricSummary {
            name: name.into(),
            values,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Multi-seed result of one probe head on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub head: ProbeHead,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub metrics: Vec<MetricSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Export factor for table-style CSV output.
pub const TABLE_SCALE: f64 = 100.0;

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes one row per report: `task,head,seeds` then `<metric>_mean` and
/// `<metric>_std` columns, all metric values multiplied by 100. Reports
/// must share their metric list.
pub fn write_table_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let Some(first) = reports.first() else {
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        return Ok(());
    };
    let names: Vec<&str> = first.metrics.iter().map(|m| m.name.as_str()).collect();
    let mut header = vec!["task".to_string(), "head".into(), "seeds".into()];
    for n in &names {
        header.push(format!("{n}_mean"));
        header.push(format!("{n}_std"));
    }
    w.write_record(&header)?;
    for r in reports {
        let these: Vec<&str> = r.metrics.iter().map(|m| m.name.as_str()).collect();
        if these != names {
            return Err(Error::Format(format!(
                "report for {}/{} has metrics {these:?}, expected {names:?}",
                r.task, r.head
            )));
        }
        let mut row = vec![r.task.clone(), r.head.to_string(), r.seeds.len().to_string()];
        for m in &r.metrics {
            row.push(format!("{:.2}", m.mean * TABLE_SCALE));
            row.push(format!("{:.2}", m.std * TABLE_SCALE));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
