// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attribution::SegmentBreakdown;
use crate::error::{Error, Result};

/// One case as seen by one run (model or checkpoint).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub delta_logit: f64,
    pub segments: SegmentBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub cases: BTreeMap<String, CaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub case_id: String,
    /// `Δℓ` per run, in run order.
    pub delta_logits: Vec<f64>,
    /// `Δℓ_run − Δℓ_baseline`.
    pub shifts: Vec<f64>,
    /// Baseline `Δℓ > 0` and run `Δℓ < 0`; always false for the baseline.
    pub corrected: Vec<bool>,
}

/// Mean normalized segment relevance split by correction status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSplit {
    pub name: String,
    pub corrected: Option<f64>,
    pub uncorrected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub mean_delta_logit: f64,
    pub corrected_count: usize,
    pub corrected_rate: f64,
    pub segments: Vec<SegmentSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run_ids: Vec<String>,
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunSummary>,
    /// Requested cases missing from at least one run.
    pub excluded: Vec<String>,
}

/// Cross-run table against the first run as baseline. Cases missing from
/// any run are dropped and listed in `excluded`.
pub fn compare_runs(case_ids: &[String], runs: &[RunRecord]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::input("comparison needs at least one run"));
    }
    let mut excluded = Vec::new();
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for id in case_ids {
        if !seen.insert(id) {
            continue;
        }
        let Some(records) = runs.iter().map(|r| r.cases.get(id)).collect::<Option<Vec<_>>>() else {
            excluded.push(id.clone());
            continue;
        };
        let deltas: Vec<f64> = records.iter().map(|r| r.delta_logit).collect();
        let base = deltas[0];
        rows.push(ComparisonRow {
            case_id: id.clone(),
            shifts: deltas.iter().map(|d| d - base).collect(),
            corrected: deltas.iter().enumerate().map(|(r, &d)| r > 0 && base > 0.0 && d < 0.0).collect(),
            delta_logits: deltas,
        });
    }

    let summaries = runs
        .iter()
        .enumerate()
        .map(|(r, run)| {
            let count = rows.len().max(1) as f64;
            let mean_delta_logit = rows.iter().map(|row| row.delta_logits[r]).sum::<f64>() / count;
            let corrected_count = rows.iter().filter(|row| row.corrected[r]).count();
            RunSummary {
                run_id: run.run_id.clone(),
                mean_delta_logit,
                corrected_count,
                corrected_rate: corrected_count as f64 / count,
                segments: segment_split(run, &rows, r),
            }
        })
        .collect();
    Ok(Comparison { run_ids: runs.iter().map(|r| r.run_id.clone()).collect(), rows, runs: summaries, excluded })
}

fn segment_split(run: &RunRecord, rows: &[ComparisonRow], r: usize) -> Vec<SegmentSplit> {
    let mut names: Vec<String> = Vec::new();
    let mut sums: BTreeMap<String, [(f64, usize); 2]> = BTreeMap::new();
    for row in rows {
        let slot = usize::from(!row.corrected[r]);
        for seg in &run.cases[&row.case_id].segments.segments {
            if !names.contains(&seg.name) {
                names.push(seg.name.clone());
            }
            let acc = &mut sums.entry(seg.name.clone()).or_default()[slot];
            acc.0 += seg.sum;
            acc.1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    names
        .into_iter()
        .map(|name| {
            let [corrected, uncorrected] = sums[&name];
            SegmentSplit { corrected: mean(corrected), uncorrected: mean(uncorrected), name }
        })
        .collect()
}

impl Comparison {
    /// `case_id` then `<run>_delta_logit` and `<run>_corrected` per run.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["case_id".to_owned()];
        for id in &self.run_ids {
            header.push(format!("{id}_delta_logit"));
            header.push(format!("{id}_corrected"));
        }
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.case_id.clone()];
            for (d, c) in row.delta_logits.iter().zip(&row.corrected) {
                rec.push(format!("{d:?}"));
                rec.push(c.to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::SegmentSum;

    fn run(id: &str, deltas: &[(&str, f64, f64)]) -> RunRecord {
        let cases = deltas
            .iter()
            .map(|&(c, d, seg)| {
                let segments = SegmentBreakdown { segments: vec![SegmentSum { name: "Q".into(), sum: seg, count: 1 }] };
                (c.to_owned(), CaseRecord { delta_logit: d, segments })
            })
            .collect();
        RunRecord { run_id: id.into(), cases }
    }

    #[test]
    fn identical_runs() {
        let a = run("a", &[("x", 2.0, 0.5), ("y", 1.0, 0.2)]);
        let cmp = compare_runs(&["x".into(), "y".into()], &[a.clone(), RunRecord { run_id: "b".into(), ..a }]).unwrap();
        assert!(cmp.rows.iter().all(|r| r.shifts == vec![0.0, 0.0] && !r.corrected[1]));
        assert_eq!(cmp.runs[1].corrected_count, 0);
    }

    #[test]
    fn all_corrected_and_missing_case() {
        let a = run("a", &[("x", 2.0, 1.0), ("y", 1.0, 3.0), ("z", 1.0, 0.0)]);
        let b = run("b", &[("x", -1.0, 0.0), ("y", -0.5, 2.0)]);
        let cmp = compare_runs(&["x".into(), "y".into(), "z".into()], &[a, b]).unwrap();
        assert_eq!(cmp.excluded, vec!["z".to_owned()]);
        assert_eq!(cmp.runs[1].corrected_rate, 1.0);
        assert_eq!(cmp.runs[1].segments[0].corrected, Some(1.0));
        assert_eq!(cmp.runs[1].segments[0].uncorrected, None);
        let csv = cmp.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "case_id,a_delta_logit,a_corrected,b_delta_logit,b_corrected");
        assert_eq!(csv.lines().nth(1).unwrap(), "x,2.0,false,-1.0,true");
    }
}
