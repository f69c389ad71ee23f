use super::model::{cross_entropy, DeterministicModel, DropoutCtx, DropoutMode};
use crate::error::{Error, Result};
use crate::tensor::{Graph, RngState, Tensor};

/// Images with integer class labels, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledData {
    pub sample_shape: [usize; 3],
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(sample_shape: [usize; 3], features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if features.len() != per * labels.len() {
            return Err(Error::shape(
                "labeled_data",
                format!(
                    "{} values for {} samples of {:?}",
                    features.len(),
                    labels.len(),
                    sample_shape
                ),
            ));
        }
        Ok(LabeledData {
            sample_shape,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.features[i * per..(i + 1) * per]
    }

    /// `[len(indices), C, H, W]` tensor plus the matching labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.sample_shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn all(&self) -> Tensor {
        let [c, h, w] = self.sample_shape;
        Tensor::new(vec![self.len(), c, h, w], self.features.clone()).expect("shape")
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        let (t, labels) = self.batch(indices);
        LabeledData {
            sample_shape: self.sample_shape,
            features: t.into_data(),
            labels,
        }
    }

    /// Consecutive index ranges of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |s| (s..(s + size).min(n)).collect())
    }

    fn check_labels(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} = {b} not in (0, 1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid("adam eps must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
///
/// From a fresh state (or any state whose moments are zero) a zero
/// gradient leaves parameters untouched, because both corrected moments
/// are then exactly zero. Once momentum has built up, later steps keep
/// moving parameters even when the current gradient is zero.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, param_sizes: &[usize]) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    /// Loss on the training set before the first step, dropout off.
    pub initial_loss: f64,
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch (training loss when no validation set).
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Something `fit` can optimize.
pub(crate) trait Objective: Clone {
    fn num_classes(&self) -> usize;
    fn param_sizes(&self) -> Vec<usize>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Minibatch loss and its gradient for every parameter, in
    /// `params_mut` order.
    fn loss_and_grads(
        &self,
        x: &Tensor,
        labels: &[usize],
        rng: &mut RngState,
    ) -> Result<(f64, Vec<Tensor>)>;
    /// Loss used for model selection; must be a deterministic function of
    /// the parameters and data.
    fn eval_loss(&self, data: &LabeledData) -> Result<f64>;
}

pub(crate) const EVAL_CHUNK: usize = 128;

pub(crate) fn fit<M: Objective>(
    mut model: M,
    train: &LabeledData,
    val: Option<&LabeledData>,
    cfg: &TrainConfig,
) -> Result<(M, TrainTrace)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    train.check_labels(model.num_classes())?;
    if let Some(v) = val {
        v.check_labels(model.num_classes())?;
    }
    let select_on = val.filter(|v| !v.is_empty()).unwrap_or(train);

    let mut trace = TrainTrace {
        initial_loss: model.eval_loss(train)?,
        ..Default::default()
    };
    let mut adam = Adam::new(cfg, &model.param_sizes());
    let mut rng = RngState::new(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, M)> = None;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.batch(idx);
            let (loss, grads) = model.loss_and_grads(&x, &labels, &mut rng).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (epoch {epoch}, batch {b})"),
                },
                other => other,
            })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("training loss (epoch {epoch}, batch {b})"),
                });
            }
            adam.step(model.params_mut().into_iter(), &grads);
            total += loss;
            batches += 1;
        }
        trace.train_loss.push(total / batches as f64);
        let vl = model.eval_loss(select_on)?;
        if !vl.is_finite() {
            return Err(Error::NonFinite {
                context: format!("validation loss (epoch {epoch})"),
            });
        }
        trace.val_loss.push(vl);
        if best.as_ref().is_none_or(|(b, _)| vl < *b) {
            best = Some((vl, model.clone()));
            trace.best_epoch = epoch;
        }
    }
    Ok((best.expect("at least one epoch").1, trace))
}

impl Objective for DeterministicModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn param_sizes(&self) -> Vec<usize> {
        self.param_tensors().map(Tensor::numel).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.param_tensors_mut().collect()
    }

    fn loss_and_grads(
        &self,
        x: &Tensor,
        labels: &[usize],
        rng: &mut RngState,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let mut ctx = DropoutCtx {
            mode: DropoutMode::Train,
            ratio_override: None,
            rng: Some(rng),
        };
        let (trace, vars) = self.forward(&mut g, xv, true, &mut ctx)?;
        let loss = cross_entropy(&mut g, trace.logits, labels)?;
        g.backward(loss)?;
        let grads = vars
            .iter()
            .flatten()
            .flat_map(|v| [v.weight, v.bias])
            .map(|v| g.grad(v).cloned().expect("parameter gradient"))
            .collect();
        Ok((g.value(loss).item()?, grads))
    }

    fn eval_loss(&self, data: &LabeledData) -> Result<f64> {
        mean_cross_entropy(self, data)
    }
}

/// Dataset-mean cross-entropy with dropout off.
pub fn mean_cross_entropy(model: &DeterministicModel, data: &LabeledData) -> Result<f64> {
    let mut total = 0.0;
    for idx in data.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(&idx);
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let (trace, _) = model.forward(&mut g, xv, false, &mut DropoutCtx::off())?;
        let l = cross_entropy(&mut g, trace.logits, &labels)?;
        total += g.value(l).item()? * idx.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Cross-entropy training with Adam; returns the weights of the epoch with
/// the lowest validation loss (training loss when `val` is `None`).
pub fn train(
    model: DeterministicModel,
    train: &LabeledData,
    val: Option<&LabeledData>,
    cfg: &TrainConfig,
) -> Result<(DeterministicModel, TrainTrace)> {
    fit(model, train, val, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, predict_deterministic, LayerSpec, ModelSpec};

    fn tiny_spec(k: usize) -> ModelSpec {
        ModelSpec {
            input: (1, 4, 4),
            num_classes: k,
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: 8 },
                LayerSpec::Relu,
                LayerSpec::Linear { out_features: k },
            ],
        }
    }

    /// Two Gaussian blobs in pixel space.
    fn blobs(n: usize, seed: u64) -> LabeledData {
        let mut rng = RngState::new(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let center = if label == 0 { -1.0 } else { 1.0 };
            for _ in 0..16 {
                features.push(center + 0.3 * rng.normal());
            }
            labels.push(label);
        }
        LabeledData::new([1, 4, 4], features, labels).unwrap()
    }

    fn accuracy(m: &DeterministicModel, d: &LabeledData) -> f64 {
        let p = predict_deterministic(m, &d.all()).unwrap();
        let hits = p
            .rows()
            .zip(&d.labels)
            .filter(|(r, &l)| crate::nn::argmax(r) == l)
            .count();
        hits as f64 / d.len() as f64
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let data = blobs(200, 1);
        let m = build_model(&tiny_spec(2), &mut RngState::new(2)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 20,
            batch_size: 16,
            ..Default::default()
        };
        let (m, trace) = train(m, &data, None, &cfg).unwrap();
        assert!(accuracy(&m, &data) >= 0.99);
        assert_eq!(trace.train_loss.len(), 20);
        let best = trace.val_loss[trace.best_epoch];
        assert!(trace.val_loss.iter().all(|&v| v >= best));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = blobs(40, 3);
        let m = build_model(&tiny_spec(2), &mut RngState::new(2)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let (trained, _) = train(m.clone(), &data, None, &cfg).unwrap();
        assert_eq!(trained, m);
    }

    #[test]
    fn constant_label_loss_falls_toward_zero() {
        let mut data = blobs(40, 4);
        data.labels.iter_mut().for_each(|l| *l = 1);
        let m = build_model(&tiny_spec(2), &mut RngState::new(5)).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 15,
            batch_size: 8,
            ..Default::default()
        };
        let (m, trace) = train(m, &data, None, &cfg).unwrap();
        assert!(trace.train_loss.windows(2).filter(|w| w[1] < w[0]).count() >= 10);
        let final_loss = mean_cross_entropy(&m, &data).unwrap();
        assert!(final_loss < 0.05 && final_loss < trace.initial_loss, "{final_loss}");
    }

    #[test]
    fn adam_zero_gradient_from_fresh_state_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut p = vec![Tensor::from_vec(vec![0.3, -1.2, 4.0])];
        let before = p.clone();
        let mut adam = Adam::new(&cfg, &[3]);
        for _ in 0..5 {
            adam.step(p.iter_mut(), &[Tensor::zeros(vec![3])]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_epoch_beats_initial_loss_on_most_seeds() {
        let data = blobs(64, 6);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        let improved = (0..20)
            .filter(|&s| {
                let m = build_model(&tiny_spec(2), &mut RngState::new(100 + s)).unwrap();
                let (m2, trace) = train(m, &data, None, &TrainConfig { seed: s, ..cfg.clone() }).unwrap();
                mean_cross_entropy(&m2, &data).unwrap() < trace.initial_loss
            })
            .count();
        assert!(improved >= 19, "{improved}/20");
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_model(&tiny_spec(2), &mut RngState::new(2)).unwrap();
        let empty = LabeledData::new([1, 4, 4], vec![], vec![]).unwrap();
        assert!(train(m.clone(), &empty, None, &TrainConfig::default()).is_err());
        let mut bad = blobs(4, 1);
        bad.labels[0] = 2;
        assert!(train(m.clone(), &bad, None, &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(train(m, &blobs(4, 1), None, &cfg).is_err());
    }

    #[test]
    fn non_finite_loss_reports_position() {
        let mut m = build_model(&tiny_spec(2), &mut RngState::new(2)).unwrap();
        m.params[0].as_mut().unwrap().weight.data_mut()[0] = 1e308;
        let data = blobs(16, 1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let err = train(m, &data, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }
}
