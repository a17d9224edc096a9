//! Parameter sweeps: one evaluation per setting over shared caches.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::composer::{OrderPolicy, Section};
use crate::error::{Error, Result};
use crate::evaluator::{run_evaluation, DemoPlan, Pipeline, RunOutcome, RunSettings};
use crate::types::DemonstrationCandidate;

pub const SWEEP_CSV_HEADER: &str = "setting,accuracy,n_correct,n_total";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "values")]
pub enum SweepAxis {
    DemoCount(Vec<usize>),
    ContextBudget(Vec<usize>),
    /// Positive demonstration at the head, middle and tail.
    OrderSection,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::DemoCount(_) => "demo_count",
            SweepAxis::ContextBudget(_) => "context_budget",
            SweepAxis::OrderSection => "order_section",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub outcome: Option<RunOutcome>,
}

fn settings_for(axis: &SweepAxis, base: &RunSettings) -> Result<Vec<(String, RunSettings)>> {
    let out: Vec<(String, RunSettings)> = match axis {
        SweepAxis::DemoCount(ns) => ns
            .iter()
            .map(|&n| {
                (
                    n.to_string(),
                    RunSettings {
                        demo_count: n,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        SweepAxis::ContextBudget(bs) => bs
            .iter()
            .map(|&b| {
                (
                    b.to_string(),
                    RunSettings {
                        budget_tokens: Some(b),
                        ..base.clone()
                    },
                )
            })
            .collect(),
        SweepAxis::OrderSection => Section::ALL
            .iter()
            .map(|&s| {
                (
                    s.as_str().to_string(),
                    RunSettings {
                        order: OrderPolicy::PositiveAt(s),
                        ..base.clone()
                    },
                )
            })
            .collect(),
    };
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sweep over {} has no settings",
            axis.name()
        )));
    }
    Ok(out)
}

/// Runs one evaluation per setting of `axis`. A failing setting yields a
/// row with its error and the sweep moves on.
pub fn run_sweep(
    base: &RunSettings,
    pipeline: &Pipeline<'_>,
    tests: &[DemonstrationCandidate],
    axis: &SweepAxis,
) -> Result<Vec<SweepRow>> {
    let mut pipeline = *pipeline;
    if *axis == SweepAxis::OrderSection && matches!(pipeline.plan, DemoPlan::Retrieved) {
        pipeline.plan = DemoPlan::SinglePositive;
    }
    let mut rows = Vec::new();
    for (setting, settings) in settings_for(axis, base)? {
        let row = match run_evaluation(&settings, &pipeline, tests, |_| Ok(())) {
            Ok(o) => SweepRow {
                setting,
                accuracy: o.accuracy,
                n_correct: o.n_correct,
                n_total: o.n_total,
                error: None,
                outcome: Some(o),
            },
            Err(e) => {
                warn!("sweep setting {setting}: {e}");
                SweepRow {
                    setting,
                    accuracy: 0.0,
                    n_correct: 0,
                    n_total: tests.len(),
                    error: Some(e.to_string()),
                    outcome: None,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            r.setting, r.accuracy, r.n_correct, r.n_total
        ));
    }
    out
}

/// Plot-ready form: `{"axis", "settings", "accuracy", "rows"}`.
pub fn sweep_json(axis: &SweepAxis, rows: &[SweepRow]) -> serde_json::Value {
    serde_json::json!({
        "axis": axis.name(),
        "settings": rows.iter().map(|r| r.setting.clone()).collect::<Vec<_>>(),
        "accuracy": rows.iter().map(|r| r.accuracy).collect::<Vec<_>>(),
        "rows": rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape() {
        let rows = vec![SweepRow {
            setting: "head".into(),
            accuracy: 0.5,
            n_correct: 1,
            n_total: 2,
            error: None,
            outcome: None,
        }];
        assert_eq!(
            sweep_csv(&rows),
            "setting,accuracy,n_correct,n_total\nhead,0.500000,1,2\n"
        );
        let j = sweep_json(&SweepAxis::OrderSection, &rows);
        assert_eq!(j["axis"], "order_section");
        assert_eq!(j["accuracy"][0], 0.5);
    }

    #[test]
    fn settings_enumeration() {
        let base = RunSettings::default();
        assert_eq!(
            settings_for(&SweepAxis::OrderSection, &base).unwrap().len(),
            3
        );
        assert!(settings_for(&SweepAxis::DemoCount(vec![]), &base).is_err());
        let s = settings_for(&SweepAxis::ContextBudget(vec![300, 400]), &base).unwrap();
        assert_eq!(s[1].1.budget_tokens, Some(400));
    }
}
