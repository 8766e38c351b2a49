use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::ArtifactDir;
use crate::error::Result;

pub const RESULT_VERSION: u32 = 1;

/// One measured value. Timestamps live in the run manifest so that result
/// files are byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub version: u32,
    pub experiment: String,
    pub bits: Option<u32>,
    pub f_scale: String,
    pub sigma: Option<f64>,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub version: u32,
    pub experiment: String,
    pub bits: Option<u32>,
    pub f_scale: String,
    pub sigma: Option<f64>,
    pub metric: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Append-only row collection, written once in sort-key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    rows: Vec<ResultRow>,
}

fn sort_key(r: &ResultRow) -> (String, Option<u32>, String, u64, String, u64) {
    (
        r.experiment.clone(),
        r.bits,
        r.f_scale.clone(),
        r.sigma.map_or(0, f64::to_bits),
        r.metric.clone(),
        r.seed,
    )
}

impl ResultTable {
    pub fn append(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn sorted(&self) -> Vec<ResultRow> {
        let mut rows = self.rows.clone();
        rows.sort_by_key(sort_key);
        rows
    }

    /// Groups rows by everything except the seed and summarizes each group.
    pub fn summarize(&self) -> Vec<SummaryRow> {
        let rows = self.sorted();
        let mut out: Vec<SummaryRow> = Vec::new();
        let mut start = 0;
        while start < rows.len() {
            let head = &rows[start];
            let same = |r: &ResultRow| {
                r.experiment == head.experiment
                    && r.bits == head.bits
                    && r.f_scale == head.f_scale
                    && r.sigma.map(f64::to_bits) == head.sigma.map(f64::to_bits)
                    && r.metric == head.metric
            };
            let end = start + rows[start..].iter().take_while(|r| same(r)).count();
            let values: Vec<f64> = rows[start..end].iter().map(|r| r.value).collect();
            let s = Stats::of(&values);
            out.push(SummaryRow {
                version: RESULT_VERSION,
                experiment: head.experiment.clone(),
                bits: head.bits,
                f_scale: head.f_scale.clone(),
                sigma: head.sigma,
                metric: head.metric.clone(),
                count: values.len(),
                min: s.min,
                q1: s.q1,
                median: s.median,
                q3: s.q3,
                max: s.max,
                mean: s.mean,
            });
            start = end;
        }
        out
    }

    pub fn write_csv(&self, dir: &mut ArtifactDir, name: &str) -> Result<()> {
        write_rows(dir, name, &self.sorted())
    }

    pub fn read_csv(path: &Path) -> Result<ResultTable> {
        let mut reader = csv::Reader::from_path(path)?;
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(ResultTable { rows })
    }
}

pub fn write_rows<T: Serialize>(dir: &mut ArtifactDir, name: &str, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in rows {
        writer.serialize(r)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| crate::error::Error::Io(e.into_error()))?;
    dir.write_bytes(name, &bytes)
}

/// Order statistics of a sample; NaN entries are ignored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            return Stats {
                min: f64::NAN,
                q1: f64::NAN,
                median: f64::NAN,
                q3: f64::NAN,
                max: f64::NAN,
                mean: f64::NAN,
            };
        }
        Stats {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

/// Linear interpolation between closest ranks of a sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(sigma: f64, seed: u64, value: f64) -> ResultRow {
        ResultRow {
            version: RESULT_VERSION,
            experiment: "noise".into(),
            bits: Some(2),
            f_scale: "1".into(),
            sigma: Some(sigma),
            seed,
            metric: "test_accuracy".into(),
            value,
        }
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[5.0], 0.75), 5.0);
        let s = Stats::of(&[3.0, f64::NAN, 1.0, 2.0]);
        assert_eq!((s.min, s.median, s.max, s.mean), (1.0, 2.0, 3.0, 2.0));
    }

    #[test]
    fn summary_groups_by_sigma() {
        let mut t = ResultTable::default();
        for (i, v) in [0.9, 0.8, 0.7].iter().enumerate() {
            t.append(row(5.0, i as u64, *v));
        }
        t.append(row(0.0, 0, 1.0));
        let s = t.summarize();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].sigma, Some(0.0));
        assert_eq!(s[1].count, 3);
        assert!((s[1].median - 0.8).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_keeps_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = ArtifactDir::create(dir.path()).unwrap();
        let mut t = ResultTable::default();
        t.append(row(1.0, 2, f64::NAN));
        t.append(row(0.0, 1, 0.5));
        t.write_csv(&mut out, "r.csv").unwrap();
        let back = ResultTable::read_csv(&dir.path().join("r.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.rows()[0].value, 0.5);
        assert!(back.rows()[1].value.is_nan());
        assert!(t.write_csv(&mut out, "r.csv").is_err());
    }
}
