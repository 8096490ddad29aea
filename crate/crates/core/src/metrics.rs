//! Confusion matrices and prevalence-weighted one-vs-rest metrics.
//!
//! For level `c` with support `n_c` out of `N` samples:
//! `TP = cm[c][c]`, `FN = n_c - TP`, `FP = sum_{i != c} cm[i][c]`,
//! `TN = N - TP - FN - FP`; sensitivity `TP / (TP + FN)`, specificity
//! `TN / (TN + FP)`, accuracy `(TP + TN) / N`. Overall values weight each
//! level by `n_c / N`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::level::{Level, NUM_LEVELS};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`, zero-based level indices.
    counts: [[u64; NUM_LEVELS]; NUM_LEVELS],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; NUM_LEVELS]; NUM_LEVELS]) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[[u64; NUM_LEVELS]; NUM_LEVELS] {
        &self.counts
    }

    pub fn get(&self, truth: Level, predicted: Level) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn record(&mut self, truth: Level, predicted: Level) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn accumulate(&mut self, predictions: &[Level], labels: &[Level]) -> Result<()> {
        if predictions.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        for (&p, &t) in predictions.iter().zip(labels) {
            self.record(t, p);
        }
        Ok(())
    }

    /// Like [`accumulate`](Self::accumulate) for raw level numbers; nothing
    /// is recorded if any value is out of range.
    pub fn accumulate_values(&mut self, predictions: &[i64], labels: &[i64]) -> Result<()> {
        let p = predictions.iter().map(|&v| Level::new(v)).collect::<Result<Vec<_>>>()?;
        let l = labels.iter().map(|&v| Level::new(v)).collect::<Result<Vec<_>>>()?;
        self.accumulate(&p, &l)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn supports(&self) -> [u64; NUM_LEVELS] {
        std::array::from_fn(|c| self.counts[c].iter().sum())
    }
}

/// One-vs-rest metrics of a single level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelMetrics {
    pub level: u8,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub acc: f64,
    /// Undefined when the level has no samples.
    pub se: Option<f64>,
    /// Undefined when every sample belongs to this level.
    pub sp: Option<f64>,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn per_level_metrics(cm: &ConfusionMatrix) -> Result<[LevelMetrics; NUM_LEVELS]> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Config("confusion matrix holds no samples".into()));
    }
    let supports = cm.supports();
    let c = cm.counts();
    Ok(std::array::from_fn(|k| {
        let tp = c[k][k];
        let fn_ = supports[k] - tp;
        let fp: u64 = (0..NUM_LEVELS).filter(|&i| i != k).map(|i| c[i][k]).sum();
        let tn = n - tp - fn_ - fp;
        LevelMetrics {
            level: k as u8 + 1,
            tp,
            fp,
            fn_,
            tn,
            acc: (tp + tn) as f64 / n as f64,
            se: ratio(tp, tp + fn_),
            sp: ratio(tn, tn + fp),
            support: supports[k],
        }
    }))
}

/// Support-weighted mean; undefined entries are dropped and the remaining
/// weights renormalized. `None` if nothing remains.
pub fn weighted_mean(values: &[Option<f64>], supports: &[u64]) -> Option<f64> {
    let (num, den) = values
        .iter()
        .zip(supports)
        .filter_map(|(v, &s)| v.map(|v| (v * s as f64, s as f64)))
        .fold((0.0, 0.0), |(a, b), (x, w)| (a + x, b + w));
    (den > 0.0).then(|| num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub wacc: Option<f64>,
    pub wse: Option<f64>,
    pub wsp: Option<f64>,
}

pub fn weighted_overall(per_level: &[LevelMetrics; NUM_LEVELS]) -> Overall {
    let supports: Vec<u64> = per_level.iter().map(|m| m.support).collect();
    let pick = |f: fn(&LevelMetrics) -> Option<f64>| {
        let v: Vec<Option<f64>> = per_level.iter().map(f).collect();
        weighted_mean(&v, &supports)
    };
    Overall {
        wacc: pick(|m| Some(m.acc)),
        wse: pick(|m| m.se),
        wsp: pick(|m| m.sp),
    }
}

/// Share of misclassifications that land on a neighbouring level; 1.0 when
/// there are none.
pub fn adjacency_stats(cm: &ConfusionMatrix) -> f64 {
    let mut errors = 0u64;
    let mut adjacent = 0u64;
    for (i, row) in cm.counts().iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            if i != j {
                errors += count;
                if i.abs_diff(j) == 1 {
                    adjacent += count;
                }
            }
        }
    }
    ratio(adjacent, errors).unwrap_or(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub level: u8,
    pub acc: f64,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub support: u64,
}

/// Serializable evaluation summary. Rates are fractions; `Display` renders
/// percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_level: Vec<LevelEntry>,
    pub overall: Overall,
    pub confusion: [[u64; NUM_LEVELS]; NUM_LEVELS],
    pub adjacency_error_fraction: f64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let per = per_level_metrics(cm)?;
        Ok(Self {
            overall: weighted_overall(&per),
            per_level: per
                .iter()
                .map(|m| LevelEntry {
                    level: m.level,
                    acc: m.acc,
                    se: m.se,
                    sp: m.sp,
                    support: m.support,
                })
                .collect(),
            confusion: *cm.counts(),
            adjacency_error_fraction: adjacency_stats(cm),
        })
    }

    /// Weighted accuracy, 0 when undefined.
    pub fn wacc(&self) -> f64 {
        self.overall.wacc.unwrap_or(0.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or_else(|| "   n/a".to_string(), |v| format!("{:6.2}", v * 100.0));
        writeln!(f, "metric  level1  level2  level3  level4  overall")?;
        let rows: [(&str, fn(&LevelEntry) -> Option<f64>, Option<f64>); 3] = [
            ("wAcc", |e| Some(e.acc), self.overall.wacc),
            ("wSe", |e| e.se, self.overall.wse),
            ("wSp", |e| e.sp, self.overall.wsp),
        ];
        for (label, get, overall) in rows {
            write!(f, "{label:<6}")?;
            for e in &self.per_level {
                write!(f, "  {}", pct(get(e)))?;
            }
            writeln!(f, "   {}", pct(overall))?;
        }
        writeln!(
            f,
            "adjacent errors: {:.2}%",
            self.adjacency_error_fraction * 100.0
        )
    }
}
