//! Predictive distributions from repeated stochastic passes and the
//! uncertainty measures derived from them.
//!
//! All entropies use the natural logarithm with `0 ln 0 = 0`.

mod report;

use rand::RngCore;
use rayon::prelude::*;

pub use report::{
    density_histogram, retention_curve, uncertainty_auroc, DensityHistogram, HistogramSplit,
    RetentionCurve, SampleRecord, UncertaintyKey, UncertaintyReport,
};

use crate::bayes::BayesianModel;
use crate::error::{Error, Result};
use crate::nn::{predict_deterministic, DeterministicModel, DropoutModel, LabeledData, EVAL_CHUNK};
use crate::tensor::{xlogx, RngState, Tensor};

/// Tolerance on row sums and on the `[0, 1]` range of entries.
const PROB_TOL: f64 = 1e-9;

/// `n` sampled probability vectors over `K` classes for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    n: usize,
    k: usize,
    samples: Vec<f64>,
    mean_probs: Vec<f64>,
}

impl PredictiveDistribution {
    /// `samples` is row-major `n x k`.
    pub fn new(n: usize, k: usize, samples: Vec<f64>) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::invalid("predictive distribution needs n >= 1 and K >= 1"));
        }
        if samples.len() != n * k {
            return Err(Error::shape(
                "predictive_distribution",
                format!("{} values for {n} x {k}", samples.len()),
            ));
        }
        for (i, row) in samples.chunks(k).enumerate() {
            if row.iter().any(|&p| !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p)) {
                return Err(Error::invalid(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > PROB_TOL {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        let mean_probs = (0..k)
            .map(|c| shifted_mean(samples.chunks(k).map(|r| r[c])))
            .collect();
        Ok(PredictiveDistribution {
            n,
            k,
            samples,
            mean_probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("predictive_distribution", "ragged rows"));
        }
        Self::new(rows.len(), k, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        self.samples.chunks(self.k)
    }

    pub fn mean_probs(&self) -> &[f64] {
        &self.mean_probs
    }

    /// Class with the highest mean probability, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        crate::nn::argmax(&self.mean_probs)
    }
}

/// Mean taken as an offset from the first value, so equal inputs give
/// that value back bit for bit.
fn shifted_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let Some(x0) = it.next() else { return 0.0 };
    let count = values.clone().count() as f64;
    x0 + values.map(|v| v - x0).sum::<f64>() / count
}

/// Entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v.clamp(0.0, 1.0))).sum::<f64>()
}

/// Entropy of the mean prediction, capped at `ln K` to absorb rounding.
pub fn predictive_uncertainty(d: &PredictiveDistribution) -> f64 {
    entropy(d.mean_probs()).min((d.k as f64).ln())
}

/// Mutual information: entropy of the mean minus mean entropy.
pub fn model_uncertainty(d: &PredictiveDistribution) -> f64 {
    let mean_h = shifted_mean(d.rows().map(entropy));
    (predictive_uncertainty(d) - mean_h).max(0.0)
}

/// Mean over classes of the population variance of the sampled
/// probabilities. Exactly zero iff all rows are identical.
pub fn variance_uncertainty(d: &PredictiveDistribution) -> Result<f64> {
    if d.n < 2 {
        return Err(Error::invalid("variance uncertainty needs at least 2 samples"));
    }
    let mut total = 0.0;
    for (c, m) in d.mean_probs.iter().enumerate() {
        let ss: f64 = d.rows().map(|r| (r[c] - m).powi(2)).sum();
        total += ss / d.n as f64;
    }
    Ok(total / d.k as f64)
}

/// Anything that yields one softmax output per call, possibly random.
pub trait StochasticPredictor: Sync {
    fn num_classes(&self) -> usize;

    /// Probabilities `[N, K]` for one pass.
    fn sample_probs(&self, batch: &Tensor, rng: &mut RngState) -> Result<Tensor>;
}

impl StochasticPredictor for BayesianModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn sample_probs(&self, batch: &Tensor, rng: &mut RngState) -> Result<Tensor> {
        BayesianModel::sample_probs(self, batch, rng)
    }
}

impl StochasticPredictor for DropoutModel {
    fn num_classes(&self) -> usize {
        self.model.spec.num_classes
    }

    fn sample_probs(&self, batch: &Tensor, rng: &mut RngState) -> Result<Tensor> {
        DropoutModel::sample_probs(self, batch, rng)
    }
}

/// Plain forward pass; every sample is identical.
impl StochasticPredictor for DeterministicModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn sample_probs(&self, batch: &Tensor, _rng: &mut RngState) -> Result<Tensor> {
        predict_deterministic(self, batch)
    }
}

/// Runs `n` stochastic passes over `batch` and groups them per input.
///
/// One value is drawn from `rng` to seed a base stream; pass `s` uses
/// `base.split(s)`, so results do not depend on scheduling.
pub fn predict_mc<P: StochasticPredictor + ?Sized>(
    model: &P,
    batch: &Tensor,
    n: usize,
    rng: &mut RngState,
) -> Result<Vec<PredictiveDistribution>> {
    if n == 0 {
        return Err(Error::invalid("number of MC samples must be at least 1"));
    }
    let base = RngState::new(rng.next_u64());
    let passes = (0..n)
        .into_par_iter()
        .map(|s| model.sample_probs(batch, &mut base.split(s as u64)))
        .collect::<Result<Vec<Tensor>>>()?;
    let k = model.num_classes();
    let count = batch.shape().first().copied().unwrap_or(0);
    (0..count)
        .map(|i| {
            let mut rows = Vec::with_capacity(n * k);
            for p in &passes {
                rows.extend_from_slice(&p.data()[i * k..(i + 1) * k]);
            }
            PredictiveDistribution::new(n, k, rows)
        })
        .collect()
}

/// Predictive distributions for every sample of `data`, evaluated in
/// fixed-size chunks. Chunk `c` draws from `RngState::new(seed).split(c)`.
pub fn predict_dataset<P: StochasticPredictor + ?Sized>(
    model: &P,
    data: &LabeledData,
    n: usize,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    let root = RngState::new(seed);
    let mut out = Vec::with_capacity(data.len());
    for (c, idx) in data.chunks(EVAL_CHUNK).enumerate() {
        let (x, _) = data.batch(&idx);
        out.extend(predict_mc(model, &x, n, &mut root.split(c as u64))?);
    }
    Ok(out)
}

/// Evaluates `model` on `data` with `n` passes. Sample ids are the
/// positions in `data` unless `ids` is given.
pub fn evaluate<P: StochasticPredictor + ?Sized>(
    model: &P,
    data: &LabeledData,
    n: usize,
    seed: u64,
    ids: Option<&[usize]>,
) -> Result<UncertaintyReport> {
    let dists = predict_dataset(model, data, n, seed)?;
    let default_ids: Vec<usize>;
    let ids = match ids {
        Some(ids) => ids,
        None => {
            default_ids = (0..data.len()).collect();
            &default_ids
        }
    };
    UncertaintyReport::from_distributions(&dists, &data.labels, ids)
}
