//! Metrics reports: a CSV table led by the effective configuration, and
//! an equivalent JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block::PetlConfig;
use crate::encoder::ParamPartition;
use crate::error::Result;
use crate::metrics::RetrievalResult;

pub const REPORT_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 13] = [
    "run_id",
    "seed",
    "sprefix",
    "lora",
    "l_adapter",
    "placement",
    "trainable_params",
    "total_params",
    "r1",
    "r5",
    "r10",
    "map",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run_id: String,
    pub seed: u64,
    pub sprefix: u8,
    pub lora: u8,
    pub l_adapter: u8,
    pub placement: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub wall_time_s: f64,
}

impl ReportRow {
    pub fn new(
        run_id: impl Into<String>,
        seed: u64,
        petl: &PetlConfig,
        partition: &ParamPartition,
        metrics: &RetrievalResult,
        wall_time_s: f64,
    ) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            sprefix: petl.sprefix.into(),
            lora: petl.lora.into(),
            l_adapter: petl.l_adapter.into(),
            placement: petl.placement.name().to_string(),
            trainable_params: partition.trainable_count(),
            total_params: partition.total_count(),
            r1: metrics.r1,
            r5: metrics.r5,
            r10: metrics.r10,
            map: metrics.map,
            wall_time_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub command: String,
    /// Effective configuration the rows were produced under.
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    /// Command-specific detail that does not fit the table.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

impl MetricsReport {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            version: REPORT_VERSION,
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            rows: Vec::new(),
            detail: serde_json::Value::Null,
        })
    }

    /// Two comment lines (format version, compact config), then the table.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = format!(
            "# upt-metrics v{}\n# config: {}\n",
            self.version,
            serde_json::to_string(&self.config)?
        );
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        let body = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv writer emits utf-8"));
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        std::fs::write(stem.with_extension("csv"), self.to_csv()?)?;
        std::fs::write(stem.with_extension("json"), self.to_json()?)?;
        Ok(())
    }
}

/// Parses the table part of [`MetricsReport::to_csv`] output.
pub fn parse_csv_rows(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?)
}

/// The configuration echoed on the second comment line.
pub fn echoed_config(text: &str) -> Option<serde_json::Value> {
    text.lines()
        .find_map(|l| l.strip_prefix("# config: "))
        .and_then(|j| serde_json::from_str(j).ok())
}
