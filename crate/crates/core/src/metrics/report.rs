use std::fmt::Write as _;

use super::{model_uncertainty, predictive_uncertainty, variance_uncertainty, PredictiveDistribution};
use crate::error::{Error, Result};

/// Which per-sample uncertainty a ranking or histogram uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UncertaintyKey {
    Pu,
    Mu,
    VarU,
}

impl UncertaintyKey {
    pub fn name(self) -> &'static str {
        match self {
            UncertaintyKey::Pu => "pu",
            UncertaintyKey::Mu => "mu",
            UncertaintyKey::VarU => "var_u",
        }
    }

    /// Largest attainable value for `k` classes.
    pub fn upper_bound(self, k: usize) -> f64 {
        match self {
            UncertaintyKey::Pu | UncertaintyKey::Mu => (k as f64).ln(),
            UncertaintyKey::VarU => 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub true_label: usize,
    pub pred: usize,
    pub correct: bool,
    pub pu: f64,
    pub mu: f64,
    /// Zero when the distribution has a single sample.
    pub var_u: f64,
}

impl SampleRecord {
    pub fn value(&self, key: UncertaintyKey) -> f64 {
        match key {
            UncertaintyKey::Pu => self.pu,
            UncertaintyKey::Mu => self.mu,
            UncertaintyKey::VarU => self.var_u,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub records: Vec<SampleRecord>,
    pub num_classes: usize,
    pub mean_pu: f64,
    pub mean_mu: f64,
    pub mean_var_u: f64,
    /// Percentage of correct records.
    pub accuracy: f64,
}

pub(crate) fn percent(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

impl UncertaintyReport {
    pub fn from_records(records: Vec<SampleRecord>, num_classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::invalid("uncertainty report needs at least one record"));
        }
        let n = records.len() as f64;
        let mean = |f: fn(&SampleRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
        let (mean_pu, mean_mu, mean_var_u) = (mean(|r| r.pu), mean(|r| r.mu), mean(|r| r.var_u));
        let correct = records.iter().filter(|r| r.correct).count();
        Ok(UncertaintyReport {
            accuracy: percent(correct, records.len()),
            records,
            num_classes,
            mean_pu,
            mean_mu,
            mean_var_u,
        })
    }

    pub fn from_distributions(
        dists: &[PredictiveDistribution],
        labels: &[usize],
        ids: &[usize],
    ) -> Result<Self> {
        if dists.len() != labels.len() || dists.len() != ids.len() {
            return Err(Error::shape(
                "uncertainty_report",
                format!(
                    "{} distributions, {} labels, {} ids",
                    dists.len(),
                    labels.len(),
                    ids.len()
                ),
            ));
        }
        let k = dists.first().map_or(0, |d| d.num_classes());
        let records = dists
            .iter()
            .zip(labels)
            .zip(ids)
            .map(|((d, &true_label), &sample_id)| {
                if d.num_classes() != k {
                    return Err(Error::invalid("distributions disagree on class count"));
                }
                let pred = d.predicted_class();
                Ok(SampleRecord {
                    sample_id,
                    true_label,
                    pred,
                    correct: pred == true_label,
                    pu: predictive_uncertainty(d),
                    mu: model_uncertainty(d),
                    var_u: if d.n() >= 2 { variance_uncertainty(d)? } else { 0.0 },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records, k)
    }

    /// Records matching `keep`, with recomputed means.
    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> Result<Self> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::from_records(records, self.num_classes)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub const CSV_HEADER: &'static str = "sample_id,true,pred,correct,pu,mu,var_u";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.sample_id, r.true_label, r.pred, r.correct as u8, r.pu, r.mu, r.var_u
            );
        }
        s
    }

    /// Parses the layout written by `to_csv`.
    pub fn from_csv(text: &str, num_classes: usize) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Row {
            sample_id: usize,
            #[serde(rename = "true")]
            true_label: usize,
            pred: usize,
            correct: u8,
            pu: f64,
            mu: f64,
            var_u: f64,
        }
        let bad = |reason: String| Error::Format {
            what: "uncertainty report",
            reason,
        };
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| bad(e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != Self::CSV_HEADER {
            return Err(bad(format!("expected header {:?}", Self::CSV_HEADER)));
        }
        let records = reader
            .deserialize::<Row>()
            .map(|row| {
                let r = row.map_err(|e| bad(e.to_string()))?;
                if r.correct > 1 || (r.correct == 1) != (r.pred == r.true_label) {
                    return Err(bad(format!("inconsistent correct flag for sample {}", r.sample_id)));
                }
                Ok(SampleRecord {
                    sample_id: r.sample_id,
                    true_label: r.true_label,
                    pred: r.pred,
                    correct: r.correct == 1,
                    pu: r.pu,
                    mu: r.mu,
                    var_u: r.var_u,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_records(records, num_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionCurve {
    pub key: UncertaintyKey,
    pub fractions: Vec<f64>,
    /// Percentages, one per fraction.
    pub accuracies: Vec<f64>,
}

impl RetentionCurve {
    /// `0.1, 0.2, ..., 1.0`.
    pub fn default_fractions() -> Vec<f64> {
        (1..=10).map(|i| i as f64 / 10.0).collect()
    }

    /// Accuracy at `fraction`, linearly interpolated between grid points.
    pub fn accuracy_at(&self, fraction: f64) -> Option<f64> {
        let i = self.fractions.iter().position(|&f| f >= fraction)?;
        if i == 0 || self.fractions[i] == fraction {
            return Some(self.accuracies[i]);
        }
        let (f0, f1) = (self.fractions[i - 1], self.fractions[i]);
        let (a0, a1) = (self.accuracies[i - 1], self.accuracies[i]);
        Some(a0 + (a1 - a0) * (fraction - f0) / (f1 - f0))
    }

    pub const CSV_HEADER: &'static str = "fraction,accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (f, a) in self.fractions.iter().zip(&self.accuracies) {
            let _ = writeln!(s, "{f},{a}");
        }
        s
    }
}

/// Number of records kept at fraction `f`: `ceil(f N)`, with a small
/// slack so that e.g. `0.3 * 10` keeps 3, clamped to `[1, N]`.
pub(crate) fn retained_count(f: f64, n: usize) -> usize {
    ((f * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Accuracy of the least uncertain fraction of records, for each of the
/// ascending `fractions` in `(0, 1]`. Ties are ranked by record position.
pub fn retention_curve(
    report: &UncertaintyReport,
    fractions: &[f64],
    key: UncertaintyKey,
) -> Result<RetentionCurve> {
    if fractions.is_empty() {
        return Err(Error::invalid("retention curve needs at least one fraction"));
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::invalid("retention fractions must lie in (0, 1]"));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("retention fractions must be strictly ascending"));
    }
    if report.is_empty() {
        return Err(Error::invalid("retention curve needs a non-empty report"));
    }
    let n = report.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&report.records[a], &report.records[b]);
        ra.value(key).total_cmp(&rb.value(key)).then(a.cmp(&b))
    });
    // prefix[i] = number of correct records among the i least uncertain
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0usize);
    for &i in &order {
        prefix.push(prefix.last().unwrap() + report.records[i].correct as usize);
    }
    let accuracies = fractions
        .iter()
        .map(|&f| {
            let m = retained_count(f, n);
            percent(prefix[m], m)
        })
        .collect();
    Ok(RetentionCurve {
        key,
        fractions: fractions.to_vec(),
        accuracies,
    })
}

/// Area under the ROC curve for separating wrong from right predictions
/// by uncertainty (ties count half). `None` when one group is empty.
pub fn uncertainty_auroc(report: &UncertaintyReport, key: UncertaintyKey) -> Option<f64> {
    let (wrong, right): (Vec<_>, Vec<_>) = report.records.iter().partition(|r| !r.correct);
    if wrong.is_empty() || right.is_empty() {
        return None;
    }
    let mut score = 0.0;
    for w in &wrong {
        for r in &right {
            let (a, b) = (w.value(key), r.value(key));
            score += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(score / (wrong.len() * right.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistogramSplit {
    Correctness,
    Label,
}

/// Counts of one uncertainty key in equal-width bins over
/// `[0, upper_bound]`, one row of counts per group.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityHistogram {
    pub key: UncertaintyKey,
    pub edges: Vec<f64>,
    pub groups: Vec<String>,
    /// `counts[group][bin]`.
    pub counts: Vec<Vec<usize>>,
}

impl DensityHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Counts scaled so each non-empty group integrates to 1.
    pub fn densities(&self) -> Vec<Vec<f64>> {
        let widths: Vec<f64> = self.edges.windows(2).map(|w| w[1] - w[0]).collect();
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .zip(&widths)
                    .map(|(&c, w)| if n == 0 { 0.0 } else { c as f64 / (n as f64 * w) })
                    .collect()
            })
            .collect()
    }

    pub const CSV_HEADER: &'static str = "bin_lo,bin_hi,group,count";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (g, row) in self.groups.iter().zip(&self.counts) {
            for (b, c) in row.iter().enumerate() {
                let _ = writeln!(s, "{},{},{g},{c}", self.edges[b], self.edges[b + 1]);
            }
        }
        s
    }
}

/// Values at or beyond the upper edge land in the last bin.
pub fn density_histogram(
    report: &UncertaintyReport,
    bins: usize,
    split: HistogramSplit,
    key: UncertaintyKey,
) -> Result<DensityHistogram> {
    if bins < 2 {
        return Err(Error::invalid("density histogram needs at least 2 bins"));
    }
    let hi = key.upper_bound(report.num_classes.max(2));
    let width = hi / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { i as f64 * width })
        .collect();
    let groups: Vec<String> = match split {
        HistogramSplit::Correctness => vec!["correct".into(), "incorrect".into()],
        HistogramSplit::Label => (0..report.num_classes).map(|c| format!("class_{c}")).collect(),
    };
    let mut counts = vec![vec![0usize; bins]; groups.len()];
    for r in &report.records {
        let g = match split {
            HistogramSplit::Correctness => usize::from(!r.correct),
            HistogramSplit::Label => r.true_label,
        };
        if g >= counts.len() {
            return Err(Error::invalid(format!("label {g} outside report classes")));
        }
        let v = r.value(key).max(0.0);
        let b = ((v / width) as usize).min(bins - 1);
        counts[g][b] += 1;
    }
    Ok(DensityHistogram {
        key,
        edges,
        groups,
        counts,
    })
}
