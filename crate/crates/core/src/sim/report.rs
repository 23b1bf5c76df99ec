use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Event, SimReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::InvalidConfig(format!("unknown report format {s:?}"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}%", 100.0 * x))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub fn render(r: &SimReport, format: ReportFormat) -> Result<String> {
    let reduction = r.baseline.as_ref().and_then(|b| b.failure_rate_reduction);
    let base_policy = r.baseline.as_ref().map_or("n/a", |b| b.policy.as_str());
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(r)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from(
                "policy,retrain,requests,successes,failures,failure_rate,mean_accuracy,baseline_policy,failure_rate_reduction,mean_learners,learners_histogram,energy_histogram,harvested_j,consumed_j,final_j,closure_error_j\n",
            );
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{:.9},{:.9},{:.9},{:.3e}",
                r.policy,
                serde_json::to_value(r.retrain)?.as_str().unwrap_or("off"),
                r.requests,
                r.successes,
                r.failures,
                opt(r.failure_rate),
                opt(r.mean_accuracy),
                base_policy,
                opt(reduction),
                opt(r.mean_learners_per_success()),
                join(&r.learners_histogram),
                join(&r.energy_histogram),
                r.energy.ledger.harvested,
                r.energy.ledger.consumed,
                r.energy.final_j,
                r.energy.closure_error_j,
            );
            s
        }
        ReportFormat::Text => {
            let mut s = String::new();
            let _ = writeln!(s, "policy            {}", r.policy);
            let _ = writeln!(s, "requests          {}", r.requests);
            let _ = writeln!(s, "failure rate      {}", pct(r.failure_rate));
            let _ = writeln!(s, "mean accuracy     {}", pct(r.mean_accuracy));
            if let Some(b) = &r.baseline {
                let _ = writeln!(
                    s,
                    "vs {:<14} failure-rate reduction {}, accuracy drop {}",
                    b.policy,
                    pct(b.failure_rate_reduction),
                    b.accuracy_drop
                        .map_or("n/a".into(), |d| format!("{:.2} pp", 100.0 * d))
                );
            }
            let f = &r.failure_breakdown;
            let _ = writeln!(
                s,
                "failures          off {} / dropped {} / insufficient {} / brownout {} / declined {}",
                f.off, f.dropped, f.insufficient, f.brownout, f.declined
            );
            let _ = writeln!(s, "learners/request");
            for (k, c) in r.learners_histogram.iter().enumerate() {
                let _ = writeln!(s, "  {k}  {c:>7}  {}", bar(*c, r.requests));
            }
            let _ = writeln!(s, "battery at arrival");
            for (lvl, c) in ["depleted", "low", "high", "full"]
                .iter()
                .zip(r.energy_histogram)
            {
                let _ = writeln!(s, "  {lvl:<9}{c:>7}  {}", bar(c, r.requests));
            }
            let e = &r.energy;
            let _ = writeln!(
                s,
                "energy (J)        harvested {:.4}, consumed {:.4} (inference {:.4}, retrain {:.4}), spilled {:.4}, final {:.4}, closure {:.1e}",
                e.ledger.harvested, e.ledger.consumed, e.inference_j, e.retrain_j, e.ledger.spilled, e.final_j, e.closure_error_j
            );
            if r.retrain_events > 0 {
                let _ = writeln!(s, "retrain events    {}", r.retrain_events);
            }
            s
        }
    })
}

fn bar(count: usize, total: usize) -> String {
    if total == 0 {
        return String::new();
    }
    "#".repeat((40 * count).div_ceil(total))
}

/// One line of the multi-run comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub policy: String,
    pub requests: usize,
    pub failure_rate: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub baseline_policy: Option<String>,
    pub failure_rate_reduction: Option<f64>,
}

impl ComparisonRow {
    pub fn from_report(run: impl Into<String>, r: &SimReport) -> Self {
        Self {
            run: run.into(),
            policy: r.policy.clone(),
            requests: r.requests,
            failure_rate: r.failure_rate,
            mean_accuracy: r.mean_accuracy,
            baseline_policy: r.baseline.as_ref().map(|b| b.policy.clone()),
            failure_rate_reduction: r.baseline.as_ref().and_then(|b| b.failure_rate_reduction),
        }
    }
}

/// Rows sorted by failure-rate reduction, largest first; `n/a` last.
pub fn render_comparison(rows: &[ComparisonRow], format: ReportFormat) -> Result<String> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        let key = |r: &ComparisonRow| r.failure_rate_reduction.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.run.cmp(&b.run))
    });
    Ok(match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rows)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("run,policy,requests,failure_rate,mean_accuracy,baseline_policy,failure_rate_reduction\n");
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.run,
                    r.policy,
                    r.requests,
                    opt(r.failure_rate),
                    opt(r.mean_accuracy),
                    r.baseline_policy.as_deref().unwrap_or("n/a"),
                    opt(r.failure_rate_reduction)
                );
            }
            s
        }
        ReportFormat::Text => {
            let mut s = format!(
                "{:<24} {:<12} {:>8} {:>12} {:>12} {:>12}\n",
                "run", "policy", "requests", "fail rate", "mean acc", "reduction"
            );
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{:<24} {:<12} {:>8} {:>12} {:>12} {:>12}",
                    r.run,
                    r.policy,
                    r.requests,
                    pct(r.failure_rate),
                    pct(r.mean_accuracy),
                    pct(r.failure_rate_reduction)
                );
            }
            s
        }
    })
}

/// Per-request log: `time,voltage,p_harv,action,learners_run,correct_flag,event_type`.
pub fn write_events_csv(events: &[Event], path: &Path) -> Result<()> {
    let mut s = String::from("time,voltage,p_harv,action,learners_run,correct_flag,event_type\n");
    for e in events {
        let _ = writeln!(
            s,
            "{},{:.6},{:.9},{},{},{},{}",
            e.time,
            e.voltage,
            e.p_harv,
            if e.action.is_empty() { "-" } else { &e.action },
            e.learners_run,
            e.correct.map_or("", |c| if c { "1" } else { "0" }),
            e.event_type.as_str()
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
