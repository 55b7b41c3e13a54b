//! CSV and JSON report writers. Floats are written with Rust's shortest
//! round-trip formatting, so re-parsing a report reproduces the in-memory
//! values exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

/// One robustness row: node MAE of both heads under a perturbation, with
/// absolute and relative increases over the clean graph.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RobustnessRow {
    pub mode: String,
    pub fraction: f64,
    pub sum_node_mae: f64,
    pub drlabel_node_mae: f64,
    pub sum_delta: f64,
    pub drlabel_delta: f64,
    pub sum_relative: f64,
    pub drlabel_relative: f64,
}

pub const ROBUSTNESS_HEADER: &str = "mode,fraction,sum_node_mae,drlabel_node_mae,sum_delta,drlabel_delta,sum_relative,drlabel_relative";

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::new();
    out.push_str(ROBUSTNESS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            r.fraction,
            r.sum_node_mae,
            r.drlabel_node_mae,
            r.sum_delta,
            r.drlabel_delta,
            r.sum_relative,
            r.drlabel_relative
        )
        .expect("string write");
    }
    out
}

pub fn parse_robustness_csv(text: &str) -> Result<Vec<RobustnessRow>, CliError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != ROBUSTNESS_HEADER {
                return Err(CliError::validation("unexpected robustness CSV header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(CliError::validation(format!("bad CSV row: {line}")));
        }
        let f = |s: &str| -> Result<f64, CliError> {
            s.parse::<f64>()
                .map_err(|e| CliError::validation(format!("bad float '{s}': {e}")))
        };
        rows.push(RobustnessRow {
            mode: parts[0].to_string(),
            fraction: f(parts[1])?,
            sum_node_mae: f(parts[2])?,
            drlabel_node_mae: f(parts[3])?,
            sum_delta: f(parts[4])?,
            drlabel_delta: f(parts[5])?,
            sum_relative: f(parts[6])?,
            drlabel_relative: f(parts[7])?,
        });
    }
    Ok(rows)
}

pub const HISTORY_HEADER: &str =
    "epoch,train_total,train_graph,train_node,train_edge,val_energy_mae,val_aewt,val_node_mae";

pub fn history_csv(history: &[drlabel::model::EpochStats]) -> String {
    let mut out = String::new();
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for row in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.epoch,
            row.train_total,
            row.train_graph,
            row.train_node,
            row.train_edge,
            row.val_energy_mae,
            row.val_aewt,
            row.val_node_mae
        )
        .expect("string write");
    }
    out
}

pub fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn robustness_csv_round_trips_exactly() {
        let rows = vec![RobustnessRow {
            mode: "drop".into(),
            fraction: 0.3,
            sum_node_mae: 0.123456789012345678,
            drlabel_node_mae: 1.0 / 3.0,
            sum_delta: -2.5e-17,
            drlabel_delta: 7.000000000000001,
            sum_relative: f64::MAX / 2.0,
            drlabel_relative: 1e-300,
        }];
        let text = robustness_csv(&rows);
        let back = parse_robustness_csv(&text).unwrap();
        assert_eq!(back.len(), 1);
        let (a, b) = (&rows[0], &back[0]);
        assert_eq!(a.fraction.to_bits(), b.fraction.to_bits());
        assert_eq!(a.sum_node_mae.to_bits(), b.sum_node_mae.to_bits());
        assert_eq!(a.drlabel_node_mae.to_bits(), b.drlabel_node_mae.to_bits());
        assert_eq!(a.sum_delta.to_bits(), b.sum_delta.to_bits());
        assert_eq!(a.drlabel_delta.to_bits(), b.drlabel_delta.to_bits());
        assert_eq!(a.sum_relative.to_bits(), b.sum_relative.to_bits());
        assert_eq!(a.drlabel_relative.to_bits(), b.drlabel_relative.to_bits());
    }
}
