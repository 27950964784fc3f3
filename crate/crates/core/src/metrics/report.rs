use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

/// One metric value for one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub sample_id: String,
    pub metric: String,
    pub value: f64,
    pub dose: f64,
    pub anatomy: String,
}

/// Mean and sample standard deviation of one (metric, dose, anatomy) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub metric: String,
    pub dose: f64,
    pub anatomy: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sample_id: &str, metric: &str, value: f64, dose: f64, anatomy: &str) {
        self.records.push(MetricRecord {
            sample_id: sample_id.to_string(),
            metric: metric.to_string(),
            value,
            dose,
            anatomy: anatomy.to_string(),
        });
    }

    /// Values of `metric` whose record satisfies `keep`.
    pub fn values(&self, metric: &str, keep: impl Fn(&MetricRecord) -> bool) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.metric == metric && keep(r))
            .map(|r| r.value)
            .collect()
    }

    /// Per-cell statistics, sorted by metric, then dose (descending), then anatomy.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut cells: BTreeMap<(String, u64, String), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            // descending dose order via the inverted bit pattern of a positive float
            let key = (r.metric.clone(), u64::MAX - r.dose.to_bits(), r.anatomy.clone());
            cells.entry(key).or_default().push(r.value);
        }
        cells
            .into_iter()
            .map(|((metric, dose, anatomy), vals)| {
                let (mean, std) = mean_std(&vals);
                CellSummary {
                    metric,
                    dose: f64::from_bits(u64::MAX - dose),
                    anatomy,
                    count: vals.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,metric,value,dose,anatomy\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.sample_id, r.metric, r.value, r.dose, r.anatomy);
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
