//! Run reports as JSON lines: one header, one record per iteration, one per
//! level and a closing summary. Wall-clock timings go to a separate file so
//! the report itself is reproducible byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::ParameterMap;
use crate::error::{Error, Result};

/// One optimizer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub level: usize,
    pub iteration: usize,
    pub cost: f64,
    pub gain: f64,
    /// Adaptive time of the gain schedule after the step (not wall clock).
    pub time: f64,
    pub rejected: u64,
}

/// Summary of one resolution level (or of the affine stage, `stage = "affine"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub stage: String,
    pub level: usize,
    pub image_spacing: [f64; 3],
    pub grid_spacing: [f64; 3],
    pub iterations: usize,
    pub base_gain: f64,
    /// Cost at the first and last iteration; absent when no iteration ran.
    pub initial_cost: Option<f64>,
    pub final_cost: Option<f64>,
    pub rejected: u64,
    pub trace: Vec<IterationRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub software: String,
    pub seed: u64,
    pub config: ParameterMap,
    pub levels: Vec<LevelRecord>,
    /// Named scalar results in insertion order.
    pub metrics: Vec<(String, f64)>,
    pub status: String,
    pub error: Option<String>,
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    pub fn new(seed: u64, config: ParameterMap) -> Self {
        RunReport {
            software: format!("featreg {}", env!("CARGO_PKG_VERSION")),
            seed,
            config,
            status: "running".into(),
            ..Default::default()
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == name).map(|m| m.1)
    }

    pub fn set_metric(&mut self, name: &str, value: f64) {
        match self.metrics.iter_mut().find(|(k, _)| k == name) {
            Some(m) => m.1 = value,
            None => self.metrics.push((name.to_string(), value)),
        }
    }

    pub fn total_rejected(&self) -> u64 {
        self.levels.iter().map(|l| l.rejected).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let config: Vec<_> = self
            .config
            .keys()
            .map(|k| json!([k, self.config.get(k).unwrap_or(&[])]))
            .collect();
        push_line(
            &mut out,
            &json!({
                "record": "header",
                "software": self.software,
                "seed": self.seed,
                "config": config,
            }),
        );
        for level in &self.levels {
            for it in &level.trace {
                push_line(
                    &mut out,
                    &json!({
                        "record": "iteration",
                        "stage": level.stage,
                        "level": it.level,
                        "iteration": it.iteration,
                        "cost": it.cost,
                        "gain": it.gain,
                        "time": it.time,
                        "rejected": it.rejected,
                    }),
                );
            }
            push_line(
                &mut out,
                &json!({
                    "record": "level",
                    "stage": level.stage,
                    "level": level.level,
                    "image_spacing": level.image_spacing,
                    "grid_spacing": level.grid_spacing,
                    "iterations": level.iterations,
                    "base_gain": level.base_gain,
                    "initial_cost": level.initial_cost,
                    "final_cost": level.final_cost,
                    "rejected": level.rejected,
                }),
            );
        }
        let metrics: Vec<_> = self.metrics.iter().map(|(k, v)| json!([k, v])).collect();
        push_line(
            &mut out,
            &json!({
                "record": "summary",
                "status": self.status,
                "error": self.error,
                "rejected": self.total_rejected(),
                "metrics": metrics,
            }),
        );
        out
    }

    pub fn timings_json(&self) -> String {
        let t: Vec<_> = self.timings.iter().map(|(k, v)| json!([k, v])).collect();
        let mut s = json!({ "timings": t }).to_string();
        s.push('\n');
        s
    }

    pub fn write(&self, report: impl AsRef<Path>, timings: Option<&Path>) -> Result<()> {
        let report = report.as_ref();
        fs::write(report, self.to_jsonl()).map_err(|e| Error::io(report, e))?;
        if let Some(t) = timings {
            fs::write(t, self.timings_json()).map_err(|e| Error::io(t, e))?;
        }
        Ok(())
    }

    /// Parses the output of [`RunReport::to_jsonl`].
    pub fn from_jsonl(text: &str) -> std::result::Result<Self, String> {
        let mut report = RunReport::default();
        let mut pending: Vec<IterationRecord> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
            let bad = |what: &str| format!("line {}: bad {what}", n + 1);
            match v["record"].as_str() {
                Some("header") => {
                    report.software = v["software"].as_str().unwrap_or_default().to_string();
                    report.seed = v["seed"].as_u64().ok_or_else(|| bad("seed"))?;
                    for entry in v["config"].as_array().ok_or_else(|| bad("config"))? {
                        let key = entry[0].as_str().ok_or_else(|| bad("config key"))?;
                        let values = entry[1]
                            .as_array()
                            .ok_or_else(|| bad("config values"))?
                            .iter()
                            .map(|s| s.as_str().unwrap_or_default().to_string())
                            .collect();
                        report.config.set(key, values);
                    }
                }
                Some("iteration") => {
                    pending.push(serde_json::from_value(v).map_err(|e| format!("line {}: {e}", n + 1))?)
                }
                Some("level") => {
                    let mut v = v;
                    v["trace"] = json!([]);
                    let mut level: LevelRecord =
                        serde_json::from_value(v).map_err(|e| format!("line {}: {e}", n + 1))?;
                    level.trace = std::mem::take(&mut pending);
                    report.levels.push(level);
                }
                Some("summary") => {
                    report.status = v["status"].as_str().unwrap_or_default().to_string();
                    report.error = v["error"].as_str().map(str::to_string);
                    for m in v["metrics"].as_array().ok_or_else(|| bad("metrics"))? {
                        let k = m[0].as_str().ok_or_else(|| bad("metric"))?;
                        report.metrics.push((k.to_string(), m[1].as_f64().unwrap_or(f64::NAN)));
                    }
                }
                _ => return Err(bad("record kind")),
            }
        }
        Ok(report)
    }
}

fn push_line(out: &mut String, v: &serde_json::Value) {
    out.push_str(&v.to_string());
    out.push('\n');
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let mut cfg = ParameterMap::new();
        cfg.set_one("Mode", "Static");
        cfg.set("VoxelSize", vec!["1.5".into(); 3]);
        let mut r = RunReport::new(7, cfg);
        r.levels.push(LevelRecord {
            stage: "bspline".into(),
            level: 0,
            image_spacing: [6.0; 3],
            grid_spacing: [64.0; 3],
            iterations: 2,
            base_gain: 0.5,
            initial_cost: Some(1.0),
            final_cost: Some(0.25),
            rejected: 3,
            trace: vec![
                IterationRecord {
                    level: 0,
                    iteration: 0,
                    cost: 1.0,
                    gain: 0.1,
                    time: 0.0,
                    rejected: 1,
                },
                IterationRecord {
                    level: 0,
                    iteration: 1,
                    cost: 0.25,
                    gain: 0.09,
                    time: 0.5,
                    rejected: 2,
                },
            ],
        });
        r.set_metric("mean_displacement", 0.125);
        r.status = "ok".into();
        let text = r.to_jsonl();
        assert_eq!(text.lines().count(), 5);
        let back = RunReport::from_jsonl(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_jsonl(), text);
    }
}
