use super::spec::{LayerSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::{softmax, Graph, RngState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    /// Fresh masks, used while fitting.
    Train,
    /// Fresh masks at prediction time (MC dropout).
    McInference,
    Off,
}

/// Weight and bias of one conv/linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Graph handles for one layer's weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Activation after the last convolution (post-ReLU when a ReLU
    /// follows it), `[N, C, H, W]`.
    pub last_conv_activation: Option<Var>,
}

/// Dropout behaviour for one forward pass.
pub struct DropoutCtx<'a> {
    pub mode: DropoutMode,
    /// Replaces every dropout layer's configured ratio when set.
    pub ratio_override: Option<f64>,
    pub rng: Option<&'a mut RngState>,
}

impl DropoutCtx<'_> {
    pub fn off() -> Self {
        DropoutCtx {
            mode: DropoutMode::Off,
            ratio_override: None,
            rng: None,
        }
    }
}

/// Scaled keep-mask: entries are 0 with probability `dr` and `1/(1-dr)`
/// otherwise.
pub fn dropout_mask(shape: &[usize], dr: f64, rng: &mut RngState) -> Tensor {
    let keep = 1.0 / (1.0 - dr);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.uniform() < dr { 0.0 } else { keep })
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Inverted dropout on a plain tensor. `Off`, or `dr == 0`, returns the
/// input unchanged and draws nothing from `rng`.
pub fn dropout_forward(x: &Tensor, dr: f64, mode: DropoutMode, rng: &mut RngState) -> Result<Tensor> {
    if !(0.0..1.0).contains(&dr) {
        return Err(Error::invalid(format!("dropout ratio {dr} not in [0, 1)")));
    }
    if mode == DropoutMode::Off || dr == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), dr, rng);
    let data = x.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
    Tensor::new(x.shape(), data)
}

/// Runs `spec` on the batch `x` (`[N, C, H, W]`) using the given per-layer
/// parameter handles.
pub fn forward_graph(
    g: &mut Graph,
    spec: &ModelSpec,
    x: Var,
    params: &[Option<LayerVars>],
    dropout: &mut DropoutCtx<'_>,
) -> Result<ForwardTrace> {
    let xs = g.value(x).shape().to_vec();
    let (c, h, w) = spec.input;
    if xs.len() != 4 || xs[1..] != [c, h, w] {
        return Err(Error::shape(
            "forward",
            format!("batch {:?} does not match input {:?}", xs, spec.input),
        ));
    }
    let batch = xs[0];
    let last_conv = spec.last_conv();
    let mut act = None;
    let mut hcur = x;
    for (i, layer) in spec.layers.iter().enumerate() {
        hcur = match *layer {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let p = params[i].expect("conv layer has parameters");
                g.conv2d(hcur, p.weight, Some(p.bias), stride, padding)?
            }
            LayerSpec::Linear { out_features } => {
                let p = params[i].expect("linear layer has parameters");
                let y = g.matmul(hcur, p.weight)?;
                let b = g.broadcast(p.bias, &[batch, out_features])?;
                g.add(y, b)?
            }
            LayerSpec::Relu => g.relu(hcur),
            LayerSpec::MaxPool2d { kernel, stride } => g.max_pool2d(hcur, kernel, stride)?,
            LayerSpec::Flatten => {
                let n = g.value(hcur).numel() / batch.max(1);
                g.reshape(hcur, &[batch, n])?
            }
            LayerSpec::GlobalMeanPool => {
                let s = g.value(hcur).shape().to_vec();
                let pooled = g.mean_pool2d(hcur, s[2], s[2])?;
                g.reshape(pooled, &[batch, s[1]])?
            }
            LayerSpec::Dropout { ratio } => {
                let dr = dropout.ratio_override.unwrap_or(ratio);
                if dropout.mode == DropoutMode::Off || dr == 0.0 {
                    hcur
                } else {
                    let rng = dropout
                        .rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::invalid("stochastic dropout needs an rng"))?;
                    let shape = g.value(hcur).shape().to_vec();
                    let mask = g.constant(dropout_mask(&shape, dr, rng))?;
                    g.mul(hcur, mask)?
                }
            }
        };
        if let Some(lc) = last_conv {
            let after_relu = i == lc + 1 && matches!(layer, LayerSpec::Relu);
            let bare = i == lc && !matches!(spec.layers.get(lc + 1), Some(LayerSpec::Relu));
            if after_relu || bare {
                act = Some(hcur);
            }
        }
    }
    Ok(ForwardTrace {
        logits: hcur,
        last_conv_activation: act,
    })
}

/// Mean cross-entropy of `logits` (`[N, K]`) against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} labels", shape, labels.len()),
        ));
    }
    let k = shape[1];
    let mut onehot = Tensor::zeros(shape.clone());
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::invalid(format!("label {l} outside 0..{k}")));
        }
        onehot.data_mut()[r * k + l] = 1.0;
    }
    let ls = g.log_softmax(logits)?;
    let oh = g.constant(onehot)?;
    let picked = g.mul(ls, oh)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicModel {
    pub spec: ModelSpec,
    /// Parameters per layer, `None` for layers without any.
    pub params: Vec<Option<LayerParams>>,
}

/// Builds a model with He-uniform weights (`U(-a, a)`, `a = sqrt(6 / fan_in)`)
/// and zero biases.
pub fn build_model(spec: &ModelSpec, rng: &mut RngState) -> Result<DeterministicModel> {
    let shapes = spec.param_shapes()?;
    let params = shapes
        .into_iter()
        .map(|s| {
            s.map(|(ws, bs)| {
                let fan_in: usize = ws.iter().product::<usize>()
                    / if ws.len() == 4 { ws[0] } else { ws[1] };
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = ws.iter().product();
                let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
                LayerParams {
                    weight: Tensor::new(ws, w).unwrap(),
                    bias: Tensor::zeros(bs),
                }
            })
        })
        .collect();
    Ok(DeterministicModel {
        spec: spec.clone(),
        params,
    })
}

impl DeterministicModel {
    /// Registers the parameters on `g` (as trainable leaves when
    /// `trainable`) and runs the forward pass.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        dropout: &mut DropoutCtx<'_>,
    ) -> Result<(ForwardTrace, Vec<Option<LayerVars>>)> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                p.as_ref()
                    .map(|p| {
                        Ok(LayerVars {
                            weight: g.leaf(p.weight.clone(), trainable)?,
                            bias: g.leaf(p.bias.clone(), trainable)?,
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let trace = forward_graph(g, &self.spec, x, &vars, dropout)?;
        Ok((trace, vars))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let (trace, _) = self.forward(&mut g, x, false, &mut DropoutCtx::off())?;
        Ok(g.value(trace.logits).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.numel() + p.bias.numel())
            .sum()
    }

    pub fn param_tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn param_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }
}

/// Softmax probabilities with dropout off, `[N, K]`.
pub fn predict_deterministic(model: &DeterministicModel, batch: &Tensor) -> Result<Tensor> {
    Ok(softmax(&model.logits(batch)?))
}

/// A deterministic model whose dropout layers stay active at prediction
/// time, optionally with a different ratio than it was trained with.
#[derive(Clone, Debug)]
pub struct DropoutModel {
    pub model: DeterministicModel,
    pub inference_ratio: f64,
}

impl DropoutModel {
    pub fn new(model: DeterministicModel, inference_ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&inference_ratio) {
            return Err(Error::invalid(format!(
                "dropout ratio {inference_ratio} not in [0, 1)"
            )));
        }
        Ok(DropoutModel {
            model,
            inference_ratio,
        })
    }

    /// One stochastic pass: fresh dropout masks, softmax output `[N, K]`.
    pub fn sample_probs(&self, batch: &Tensor, rng: &mut RngState) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone())?;
        let mut ctx = DropoutCtx {
            mode: DropoutMode::McInference,
            ratio_override: Some(self.inference_ratio),
            rng: Some(rng),
        };
        let (trace, _) = self.model.forward(&mut g, x, false, &mut ctx)?;
        Ok(softmax(g.value(trace.logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sample_gaussian;

    fn batch(n: usize, seed: u64) -> Tensor {
        sample_gaussian(&mut RngState::new(seed), &[n, 3, 32, 32]).map(|v| 0.5 + 0.2 * v)
    }

    #[test]
    fn logits_shape_follows_class_count() {
        for k in [2, 6] {
            let m = build_model(&ModelSpec::compact_cnn(k, 0.2), &mut RngState::new(1)).unwrap();
            assert_eq!(m.logits(&batch(3, 2)).unwrap().shape(), &[3, k]);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ModelSpec::compact_cnn(2, 0.2);
        let a = build_model(&spec, &mut RngState::new(5)).unwrap();
        let b = build_model(&spec, &mut RngState::new(5)).unwrap();
        let c = build_model(&spec, &mut RngState::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_final_layer_gives_uniform_probs() {
        let mut m = build_model(&ModelSpec::compact_cnn(4, 0.2), &mut RngState::new(1)).unwrap();
        let last = m.params.last_mut().unwrap().as_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let p = predict_deterministic(&m, &batch(2, 3)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(argmax(&p.data()[..4]), 0);
    }

    #[test]
    fn rows_sum_to_one_and_batch_order_is_irrelevant() {
        let m = build_model(&ModelSpec::compact_cnn(3, 0.2), &mut RngState::new(2)).unwrap();
        let b = batch(4, 9);
        let p = predict_deterministic(&m, &b).unwrap();
        for row in p.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // Reverse the batch and compare rows.
        let per = 3 * 32 * 32;
        let mut rev = Vec::new();
        for i in (0..4).rev() {
            rev.extend_from_slice(&b.data()[i * per..(i + 1) * per]);
        }
        let pr = predict_deterministic(&m, &Tensor::new(vec![4, 3, 32, 32], rev).unwrap()).unwrap();
        for i in 0..4 {
            assert_eq!(&p.data()[i * 3..i * 3 + 3], &pr.data()[(3 - i) * 3..(3 - i) * 3 + 3]);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn batch_shape_checked() {
        let m = build_model(&ModelSpec::compact_cnn(2, 0.2), &mut RngState::new(1)).unwrap();
        let bad = Tensor::zeros(vec![1, 3, 16, 16]);
        assert!(predict_deterministic(&m, &bad).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let x = sample_gaussian(&mut RngState::new(1), &[100]);
        let mut rng = RngState::new(2);
        for mode in [DropoutMode::Train, DropoutMode::McInference, DropoutMode::Off] {
            assert_eq!(dropout_forward(&x, 0.0, mode, &mut rng).unwrap(), x);
        }
        assert_eq!(dropout_forward(&x, 0.7, DropoutMode::Off, &mut rng).unwrap(), x);
        assert!(dropout_forward(&x, 1.0, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_zero_fraction_and_unbiased_mean() {
        let x = Tensor::ones(vec![1_000_000]);
        let y = dropout_forward(&x, 0.5, DropoutMode::Train, &mut RngState::new(3)).unwrap();
        let zeroed = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((0.498..=0.502).contains(&zeroed), "{zeroed}");

        let x = sample_gaussian(&mut RngState::new(4), &[20]).map(|v| v + 2.0);
        let mut rng = RngState::new(5);
        let mut mean = vec![0.0; 20];
        for _ in 0..10_000 {
            let y = dropout_forward(&x, 0.3, DropoutMode::McInference, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(y.data()) {
                *m += v / 10_000.0;
            }
        }
        // Pooled over units the Monte-Carlo error is ~0.15%; per unit ~0.65%.
        let (sm, sx): (f64, f64) = (mean.iter().sum(), x.data().iter().sum());
        assert!((sm - sx).abs() <= 0.01 * sx.abs(), "{sm} vs {sx}");
        for (m, v) in mean.iter().zip(x.data()) {
            assert!((m - v).abs() <= 0.03 * v.abs(), "{m} vs {v}");
        }
    }

    #[test]
    fn mc_dropout_with_zero_ratio_is_deterministic() {
        let m = build_model(&ModelSpec::compact_cnn(2, 0.2), &mut RngState::new(1)).unwrap();
        let dm = DropoutModel::new(m.clone(), 0.0).unwrap();
        let b = batch(2, 4);
        let mut rng = RngState::new(8);
        let a = dm.sample_probs(&b, &mut rng).unwrap();
        let c = dm.sample_probs(&b, &mut rng).unwrap();
        assert_eq!(a, c);
        assert_eq!(a, predict_deterministic(&m, &b).unwrap());
    }

    #[test]
    fn activation_hook_is_after_last_conv_relu() {
        let m = build_model(&ModelSpec::compact_cnn(2, 0.2), &mut RngState::new(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch(1, 1)).unwrap();
        let (trace, _) = m.forward(&mut g, x, false, &mut DropoutCtx::off()).unwrap();
        let a = trace.last_conv_activation.unwrap();
        assert_eq!(g.value(a).shape(), &[1, 64, 8, 8]);
        assert!(g.value(a).data().iter().all(|&v| v >= 0.0));
    }
}
