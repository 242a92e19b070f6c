//! Metrics records (JSON Lines) and the summary report over metrics files.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One metrics line. Optional fields are omitted when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_acc: Option<f64>,
    pub phase: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neglected_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<f64>,
}

impl MetricsRecord {
    pub fn new(phase: &str, step: usize) -> Self {
        Self {
            step,
            loss: None,
            masked_acc: None,
            slot_acc: None,
            phase: phase.to_string(),
            neglected_count: None,
            accuracy: None,
            lambda: None,
            agreement: None,
        }
    }
}

pub fn to_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Final values of one metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub phase: String,
    pub steps: usize,
    pub loss: Option<f64>,
    pub masked_acc: Option<f64>,
    pub slot_acc: Option<f64>,
    pub accuracy: Option<f64>,
    pub neglected_first: Option<usize>,
    pub neglected_last: Option<usize>,
}

impl RunSummary {
    pub fn neglected_delta(&self) -> Option<f64> {
        Some(self.neglected_last? as f64 - self.neglected_first? as f64)
    }
}

pub fn summarize(run: &str, records: &[MetricsRecord]) -> Result<RunSummary> {
    let last = records
        .last()
        .ok_or_else(|| Error::Data(format!("{run}: no metrics records")))?;
    let last_of = |f: fn(&MetricsRecord) -> Option<f64>| records.iter().rev().find_map(f);
    let neglected: Vec<usize> = records.iter().filter_map(|r| r.neglected_count).collect();
    let mut phases: Vec<&str> = Vec::new();
    for r in records {
        if !phases.contains(&r.phase.as_str()) {
            phases.push(&r.phase);
        }
    }
    Ok(RunSummary {
        run: run.to_string(),
        phase: phases.join("+"),
        steps: records.iter().map(|r| r.step).max().unwrap_or(last.step),
        loss: last_of(|r| r.loss),
        masked_acc: last_of(|r| r.masked_acc),
        slot_acc: last_of(|r| r.slot_acc),
        accuracy: last_of(|r| r.accuracy),
        neglected_first: neglected.first().copied(),
        neglected_last: neglected.last().copied(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with one row per run and, for two or more runs, a trailing `median`
/// row. Neglected-token columns appear only when some run recorded scans.
pub fn report_csv(runs: &[RunSummary]) -> String {
    let with_scans = runs.iter().any(|r| r.neglected_first.is_some());
    let mut out = String::from("run,phase,steps,loss,masked_acc,slot_acc,accuracy");
    if with_scans {
        out.push_str(",neglected_count_first,neglected_count_last,neglected_count_delta");
    }
    out.push('\n');

    type Col = fn(&RunSummary) -> Option<f64>;
    let mut cols: Vec<Col> = vec![
        |r| Some(r.steps as f64),
        |r| r.loss,
        |r| r.masked_acc,
        |r| r.slot_acc,
        |r| r.accuracy,
    ];
    if with_scans {
        cols.push(|r| r.neglected_first.map(|v| v as f64));
        cols.push(|r| r.neglected_last.map(|v| v as f64));
        cols.push(RunSummary::neglected_delta);
    }
    for r in runs {
        let _ = write!(out, "{},{}", r.run, r.phase);
        for (i, c) in cols.iter().enumerate() {
            let v = c(r);
            if i == 0 {
                let _ = write!(out, ",{}", r.steps);
            } else if with_scans && (5..=6).contains(&i) {
                let _ = write!(out, ",{}", v.map(|x| (x as i64).to_string()).unwrap_or_default());
            } else {
                let _ = write!(out, ",{}", cell(v));
            }
        }
        out.push('\n');
    }
    if runs.len() >= 2 {
        out.push_str("median,");
        for c in &cols {
            let vals: Vec<f64> = runs.iter().filter_map(c).collect();
            let _ = write!(out, ",{}", cell(median(&vals)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlm_record_format() {
        let mut r = MetricsRecord::new("mlm", 10);
        r.loss = Some(1.5);
        r.masked_acc = Some(0.25);
        r.slot_acc = Some(0.125);
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"step":10,"loss":1.5,"masked_acc":0.25,"slot_acc":0.125,"phase":"mlm"}"#
        );
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let text = "{\"step\":1,\"phase\":\"mlm\"}\n\n{oops\n";
        match parse_jsonl(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_run_gives_one_row() {
        let mut r = MetricsRecord::new("mlm", 5);
        r.loss = Some(2.0);
        let s = summarize("a", &[r]).unwrap();
        let csv = report_csv(&[s]);
        assert_eq!(csv.lines().count(), 2);
        assert!(!csv.contains("neglected"));
    }

    #[test]
    fn evolve_run_reports_neglected_delta() {
        let mut a = MetricsRecord::new("evolve", 0);
        a.neglected_count = Some(40);
        let mut b = MetricsRecord::new("evolve", 100);
        b.neglected_count = Some(25);
        let s = summarize("e", &[a, b]).unwrap();
        let csv = report_csv(&[s]);
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "neglected_count_delta").unwrap();
        assert_eq!(row[col], "-15.000000");
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
