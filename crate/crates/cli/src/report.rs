//! Comparison table over run directories.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::run::RunInfo;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    pub metric: String,
    pub seed: Option<u64>,
    pub value: Option<f64>,
    /// Median of `value` over the complete runs of this method and metric.
    pub median: Option<f64>,
    /// Sample standard deviation over those runs divided by the square root of their count.
    pub sem: Option<f64>,
    pub status: String,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn sem(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(var.sqrt() / (n as f64).sqrt())
}

/// One row per (run, numeric result); runs without `run_info.json` give a
/// single incomplete row.
pub fn collect(dirs: &[impl AsRef<Path>]) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for dir in dirs {
        let dir = dir.as_ref();
        let info: Option<RunInfo> = std::fs::read_to_string(dir.join("run_info.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let Some(info) = info else {
            rows.push(Row {
                method: dir.display().to_string(),
                metric: String::new(),
                seed: None,
                value: None,
                median: None,
                sem: None,
                status: "incomplete".into(),
            });
            continue;
        };
        let results = info.results.as_object().cloned().unwrap_or_default();
        for (metric, v) in results {
            if let Some(x) = v.as_f64() {
                rows.push(Row {
                    method: info.method.clone(),
                    metric,
                    seed: Some(info.seed),
                    value: Some(x),
                    median: None,
                    sem: None,
                    status: "complete".into(),
                });
            }
        }
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        if let Some(v) = r.value {
            groups.entry((r.method.clone(), r.metric.clone())).or_default().push(v);
        }
    }
    for r in &mut rows {
        if let Some(xs) = groups.get(&(r.method.clone(), r.metric.clone())) {
            r.median = median(xs);
            r.sem = sem(xs);
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
pub fn from_csv(text: &str) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sem_of_three_is_sample_sd_over_root_three() {
        let xs = [1.0, 2.0, 4.0];
        let mean = 7.0 / 3.0;
        let s = ((1.0f64 - mean).powi(2) + (2.0f64 - mean).powi(2) + (4.0f64 - mean).powi(2)) / 2.0;
        assert!((sem(&xs).unwrap() - s.sqrt() / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(median(&xs), Some(2.0));
        assert_eq!(median(&[3.0, 1.0]), Some(2.0));
        assert_eq!(sem(&[1.0]), None);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            Row {
                method: "mask".into(),
                metric: "dev_bleu".into(),
                seed: Some(1),
                value: Some(12.5),
                median: Some(12.5),
                sem: None,
                status: "complete".into(),
            },
            Row {
                method: "runs/x,y".into(),
                metric: String::new(),
                seed: None,
                value: None,
                median: None,
                sem: None,
                status: "incomplete".into(),
            },
        ];
        assert_eq!(from_csv(&to_csv(&rows).unwrap()).unwrap(), rows);
    }
}
