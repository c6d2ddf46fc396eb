//! Machine-readable run reports (JSON) and tables (CSV).
//!
//! Every command writes a `report.json` shaped by [`Report`]; the schema
//! shipped in `schema/report.schema.json` describes it.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::cost::CostReport;
use crate::error::Result;
use crate::harness::ConfidenceStats;

pub const SCHEMA_VERSION: u32 = 1;

/// The report schema, also shipped as `schema/report.schema.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

#[derive(Clone, Debug, Serialize)]
pub struct NamedConfidence {
    pub name: String,
    pub images: usize,
    #[serde(flatten)]
    pub stats: ConfidenceStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct AccuracyRow {
    pub name: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: Value,
    pub optimizer: Value,
    pub importance: Value,
    pub results: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
    pub accuracies: Vec<AccuracyRow>,
    pub confidence: Vec<NamedConfidence>,
}

impl Report {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config: serde_json::to_value(cfg).expect("config serialises"),
            optimizer: json!({
                "inversion_adam": cfg.inversion.adam,
                "teacher_adam_lr": cfg.train.lr,
                "distill_sgd": cfg.distill.sgd,
            }),
            importance: json!({
                "layer": cfg.model.importance_layer_index(),
                "heads": "mean",
                "cls_to_cls": "excluded, not renormalised",
            }),
            results: json!({}),
            cost: None,
            accuracies: Vec::new(),
            confidence: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::format::write_text(path.as_ref(), &self.to_json())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Comma-separated table with a header row.
pub fn to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn confusion_csv(m: &[Vec<usize>]) -> String {
    let c = m.len();
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..c).map(|i| i.to_string()));
    let rows: Vec<Vec<String>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| std::iter::once(i.to_string()).chain(row.iter().map(|x| x.to_string())).collect())
        .collect();
    to_csv(&header.iter().map(String::as_str).collect::<Vec<_>>(), &rows)
}

pub fn histogram_csv(named: &[NamedConfidence]) -> String {
    let mut rows = Vec::new();
    for n in named {
        for (i, count) in n.stats.counts.iter().enumerate() {
            rows.push(vec![
                n.name.clone(),
                format!("{:?}", n.stats.bin_edges[i]),
                format!("{:?}", n.stats.bin_edges[i + 1]),
                count.to_string(),
            ]);
        }
    }
    to_csv(&["set", "bin_lo", "bin_hi", "count"], &rows)
}

pub fn save_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    crate::format::write_text(path.as_ref(), text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quoting() {
        let s = to_csv(&["a", "b"], &[vec!["1".into(), "x,y".into()]]);
        assert_eq!(s, "a,b\n1,\"x,y\"\n");
    }

    #[test]
    fn default_report_matches_schema() {
        let report = Report::new("cost", &RunConfig::default());
        let value: Value = serde_json::from_str(&report.to_json()).unwrap();
        let schema: Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        let validator = jsonschema::validator_for(&schema).unwrap();
        assert!(validator.is_valid(&value));
        let mut broken = value.clone();
        broken.as_object_mut().unwrap().remove("command");
        assert!(!validator.is_valid(&broken));
    }
}
