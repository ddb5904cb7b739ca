use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Outcome of one transaction, timed from the round's start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxSample {
    pub submitted_at: Duration,
    pub done_at: Duration,
    /// Proposal creation to commit notification; `None` when the
    /// transaction failed or was invalidated.
    pub latency: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub label: String,
    pub submitted: u64,
    pub committed: u64,
    pub failed: u64,
    /// Transactions per second offered.
    pub send_rate_actual: f64,
    /// Committed transactions per second over `duration`.
    pub throughput: f64,
    /// Latencies in milliseconds over committed transactions.
    pub latency_min: Option<f64>,
    pub latency_avg: Option<f64>,
    pub latency_max: Option<f64>,
    pub latency_p95: Option<f64>,
    /// Seconds from the round's start to the last outcome.
    pub duration: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rounds: Vec<RoundMetrics>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn summarize(label: &str, samples: &[TxSample]) -> RoundMetrics {
    let submitted = samples.len() as u64;
    let mut latencies: Vec<f64> = samples
        .iter()
        .filter_map(|s| s.latency)
        .map(|d| d.as_secs_f64() * 1000.0)
        .collect();
    latencies.sort_by(|a, b| a.total_cmp(b));
    let committed = latencies.len() as u64;
    let last_submit = samples.iter().map(|s| s.submitted_at).max().unwrap_or_default();
    let last_done = samples.iter().map(|s| s.done_at).max().unwrap_or_default();
    let rate = |n: u64, d: Duration| if d.is_zero() { 0.0 } else { n as f64 / d.as_secs_f64() };
    RoundMetrics {
        label: label.to_string(),
        submitted,
        committed,
        failed: submitted - committed,
        send_rate_actual: rate(submitted, last_submit),
        throughput: rate(committed, last_done),
        latency_min: latencies.first().copied(),
        latency_avg: (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        latency_max: latencies.last().copied(),
        latency_p95: percentile(&latencies, 95.0),
        duration: last_done.as_secs_f64(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" | "table" | "text-table" => Ok(ReportFormat::Text),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

fn ms(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Text => {
            let header = ["Label", "Send Rate", "Throughput", "Min", "Avg", "Max", "P95"];
            let rows: Vec<[String; 7]> = report
                .rounds
                .iter()
                .map(|r| {
                    [
                        r.label.clone(),
                        format!("{:.1} TPS", r.send_rate_actual),
                        format!("{:.1} TPS", r.throughput),
                        ms(r.latency_min),
                        ms(r.latency_avg),
                        ms(r.latency_max),
                        ms(r.latency_p95),
                    ]
                })
                .collect();
            let mut widths = header.map(str::len);
            for row in &rows {
                for (w, cell) in widths.iter_mut().zip(row) {
                    *w = (*w).max(cell.len());
                }
            }
            let mut out = String::new();
            let line = |out: &mut String, cells: &[String]| {
                let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!(" {c:<w$} ")).collect();
                let _ = writeln!(out, "|{}|", padded.join("|"));
            };
            line(&mut out, &header.map(String::from));
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(w + 2)).collect();
            let _ = writeln!(out, "|{}|", rule.join("|"));
            for row in &rows {
                line(&mut out, row);
            }
            let _ = writeln!(out, "latencies in ms");
            out.into_bytes()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), Some(19.0));
        assert_eq!(percentile(&v, 100.0), Some(20.0));
        assert_eq!(percentile(&[5.0], 95.0), Some(5.0));
        assert_eq!(percentile(&[], 95.0), None);
    }

    #[test]
    fn text_table_columns() {
        let r = summarize(
            "batch-1",
            &[TxSample {
                submitted_at: Duration::from_millis(100),
                done_at: Duration::from_millis(300),
                latency: Some(Duration::from_millis(200)),
            }],
        );
        let text = String::from_utf8(render_report(&MetricsReport { rounds: vec![r] }, ReportFormat::Text)).unwrap();
        let first = text.lines().next().unwrap();
        let cols: Vec<&str> = first.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
        assert_eq!(cols, ["Label", "Send Rate", "Throughput", "Min", "Avg", "Max", "P95"]);
        assert!(text.contains("batch-1"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn json_field_names() {
        let r = summarize("x", &[]);
        let v: serde_json::Value = serde_json::from_slice(&render_report(
            &MetricsReport { rounds: vec![r] },
            ReportFormat::Json,
        ))
        .unwrap();
        let keys: Vec<&str> = v["rounds"][0].as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "submitted", "committed", "failed", "send_rate_actual", "throughput", "latency_min", "latency_avg",
            "latency_max", "latency_p95", "duration",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
    }

    fn sample() -> impl Strategy<Value = TxSample> {
        (1u64..5_000, 0u64..3_000, any::<bool>()).prop_map(|(sub, lat, ok)| TxSample {
            submitted_at: Duration::from_millis(sub),
            done_at: Duration::from_millis(sub + lat),
            latency: ok.then(|| Duration::from_millis(lat)),
        })
    }

    proptest! {
        #[test]
        fn summary_invariants(samples in prop::collection::vec(sample(), 0..60)) {
            let m = summarize("r", &samples);
            prop_assert_eq!(m.committed + m.failed, m.submitted);
            prop_assert!((m.throughput * m.duration - m.committed as f64).abs() <= 1.0);
            prop_assert!(m.throughput <= m.send_rate_actual + 1e-9);
            if m.committed > 0 {
                let (min, avg, max, p95) = (
                    m.latency_min.unwrap(), m.latency_avg.unwrap(), m.latency_max.unwrap(), m.latency_p95.unwrap(),
                );
                prop_assert!(min <= avg + 1e-9 && avg <= max + 1e-9);
                prop_assert!(min <= p95 && p95 <= max);
            }
        }
    }
}
