//! Mean-field Gaussian variational layers.
//!
//! Every conv/linear weight `w` (and bias) of a deterministic model is
//! replaced by an independent Gaussian `N(mu, sigma^2)` with
//! `sigma = softplus(rho) = ln(1 + e^rho)`. Forward passes either sample
//! `w = mu + sigma * eps, eps ~ N(0, 1)` (reparameterization) or use the
//! posterior mean. Training minimizes
//!
//! ```text
//! loss = mean_s CE(x, y; w_s) + kl_factor * KL(q || p) / num_train_samples
//! ```
//!
//! where the KL term is the closed form between diagonal Gaussians. KL
//! annealing is not performed; `kl_factor` is constant over training.

mod checkpoint;

pub use checkpoint::BAYESIAN_MAGIC;

use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, fit, forward_graph, DeterministicModel, DropoutCtx, ForwardTrace, LabeledData,
    LayerParams, LayerVars, ModelSpec, Objective, TrainConfig, TrainTrace, EVAL_CHUNK,
};
use crate::tensor::{sample_gaussian, softmax, softplus, softplus_inv, Graph, RngState, Tensor, Var};

/// Initial `rho` of every posterior when MOPED is disabled.
pub const RHO_INIT: f64 = -3.0;
/// Initial posterior mean when MOPED is disabled.
pub const MU_INIT: f64 = 0.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParam {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl VariationalParam {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::shape(
                "variational_param",
                format!("mu {:?} vs rho {:?}", mu.shape(), rho.shape()),
            ));
        }
        Ok(VariationalParam { mu, rho })
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    pub fn numel(&self) -> usize {
        self.mu.numel()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { mu: 0.0, sigma: 1.0 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite() && self.mu.is_finite()) {
            return Err(Error::invalid(format!(
                "prior N({}, {}^2) needs finite mu and sigma > 0",
                self.mu, self.sigma
            )));
        }
        Ok(())
    }
}

/// Initialization of posteriors from pretrained weights:
/// `mu = w`, `sigma = delta * |w|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MopedConfig {
    pub delta: f64,
    pub enabled: bool,
}

impl Default for MopedConfig {
    fn default() -> Self {
        MopedConfig {
            delta: 0.1,
            enabled: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboConfig {
    /// Weight of the KL term (`beta`).
    pub kl_factor: f64,
    /// Dataset size the KL term is divided by.
    pub num_train_samples: usize,
    /// Weight samples averaged per training step.
    pub mc_train_samples: usize,
}

impl ElboConfig {
    pub fn new(kl_factor: f64, num_train_samples: usize) -> Self {
        ElboConfig {
            kl_factor,
            num_train_samples,
            mc_train_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_factor >= 0.0 && self.kl_factor.is_finite()) {
            return Err(Error::invalid(format!("kl_factor {} must be >= 0", self.kl_factor)));
        }
        if self.num_train_samples == 0 || self.mc_train_samples == 0 {
            return Err(Error::invalid(
                "num_train_samples and mc_train_samples must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesianLayer {
    pub weight: VariationalParam,
    pub bias: VariationalParam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesianModel {
    pub spec: ModelSpec,
    pub layers: Vec<Option<BayesianLayer>>,
    pub prior: PriorConfig,
}

fn moped_param(w: &Tensor, moped: &MopedConfig) -> VariationalParam {
    let rho = w.map(|v| softplus_inv(moped.delta * v.abs().max(1e-6)));
    VariationalParam {
        mu: w.clone(),
        rho,
    }
}

fn default_param(shape: &[usize]) -> VariationalParam {
    VariationalParam {
        mu: Tensor::full(shape, MU_INIT),
        rho: Tensor::full(shape, RHO_INIT),
    }
}

/// Replaces every conv/linear weight and bias of `model` by a Gaussian
/// posterior. With MOPED the posterior is centred on the pretrained value
/// with `sigma = delta * max(|w|, 1e-6)`; otherwise `mu = 0, rho = -3`.
pub fn convert_to_bayesian(
    model: &DeterministicModel,
    prior: PriorConfig,
    moped: MopedConfig,
) -> Result<BayesianModel> {
    prior.validate()?;
    if moped.enabled && !(moped.delta > 0.0 && moped.delta.is_finite()) {
        return Err(Error::invalid(format!("moped delta {} must be > 0", moped.delta)));
    }
    model.spec.validate()?;
    let layers = model
        .params
        .iter()
        .map(|p| {
            p.as_ref().map(|p| {
                if moped.enabled {
                    BayesianLayer {
                        weight: moped_param(&p.weight, &moped),
                        bias: moped_param(&p.bias, &moped),
                    }
                } else {
                    BayesianLayer {
                        weight: default_param(p.weight.shape()),
                        bias: default_param(p.bias.shape()),
                    }
                }
            })
        })
        .collect();
    Ok(BayesianModel {
        spec: model.spec.clone(),
        layers,
        prior,
    })
}

/// Graph handles of one variational tensor.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub mu: Var,
    pub rho: Var,
}

/// How weights are drawn for a forward pass.
pub enum WeightMode<'a> {
    Mean,
    Sample(&'a mut RngState),
}

impl BayesianModel {
    pub fn variational_params(&self) -> impl Iterator<Item = &VariationalParam> {
        self.layers.iter().flatten().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn num_weights(&self) -> usize {
        self.variational_params().map(VariationalParam::numel).sum()
    }

    fn register(
        g: &mut Graph,
        p: &VariationalParam,
        trainable: bool,
        mode: &mut WeightMode<'_>,
    ) -> Result<(Var, ParamVars)> {
        let mu = g.leaf(p.mu.clone(), trainable)?;
        let rho = g.leaf(p.rho.clone(), trainable)?;
        let w = match mode {
            WeightMode::Mean => mu,
            WeightMode::Sample(rng) => {
                let eps = g.constant(sample_gaussian(rng, p.mu.shape()))?;
                let sigma = g.softplus(rho);
                let noise = g.mul(sigma, eps)?;
                g.add(mu, noise)?
            }
        };
        Ok((w, ParamVars { mu, rho }))
    }

    /// One forward pass. Noise is drawn layer by layer, weight before
    /// bias. Returned handles are `(weight, bias)` per parametric layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        mut mode: WeightMode<'_>,
    ) -> Result<(ForwardTrace, Vec<(ParamVars, ParamVars)>)> {
        let mut handles = Vec::new();
        let mut vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            vars.push(match layer {
                None => None,
                Some(l) => {
                    let (w, wv) = Self::register(g, &l.weight, trainable, &mut mode)?;
                    let (b, bv) = Self::register(g, &l.bias, trainable, &mut mode)?;
                    handles.push((wv, bv));
                    Some(LayerVars { weight: w, bias: b })
                }
            });
        }
        let trace = forward_graph(g, &self.spec, x, &vars, &mut DropoutCtx::off())?;
        Ok((trace, handles))
    }

    /// Plain network with weights `mu + sigma * eps`. Noise is drawn in the
    /// same order as [`BayesianModel::forward`], so the realization
    /// reproduces a sampled forward pass with the same `rng` state.
    pub fn sample_realization(&self, rng: &mut RngState) -> DeterministicModel {
        let draw = |p: &VariationalParam, rng: &mut RngState| {
            let eps = sample_gaussian(rng, p.mu.shape());
            let data = p
                .mu
                .data()
                .iter()
                .zip(p.rho.data())
                .zip(eps.data())
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect();
            Tensor::new(p.mu.shape(), data).expect("same shape")
        };
        let params = self
            .layers
            .iter()
            .map(|l| {
                l.as_ref().map(|l| {
                    let weight = draw(&l.weight, rng);
                    let bias = draw(&l.bias, rng);
                    LayerParams { weight, bias }
                })
            })
            .collect();
        DeterministicModel {
            spec: self.spec.clone(),
            params,
        }
    }

    /// Plain network with every weight at its posterior mean.
    pub fn mean_realization(&self) -> DeterministicModel {
        DeterministicModel {
            spec: self.spec.clone(),
            params: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|l| LayerParams {
                        weight: l.weight.mu.clone(),
                        bias: l.bias.mu.clone(),
                    })
                })
                .collect(),
        }
    }

    /// Softmax output of one pass with freshly sampled weights.
    pub fn sample_probs(&self, batch: &Tensor, rng: &mut RngState) -> Result<Tensor> {
        bayesian_forward(self, batch, rng, true)
    }

    /// Adds the closed-form KL to `prior` as a differentiable scalar.
    fn kl_graph(&self, g: &mut Graph, handles: &[(ParamVars, ParamVars)], prior: &PriorConfig) -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut count = 0usize;
        for pv in handles.iter().flat_map(|(w, b)| [w, b]) {
            count += g.value(pv.mu).numel();
            let sigma = g.softplus(pv.rho);
            let log_sigma = g.log(sigma);
            let s2 = g.mul(sigma, sigma)?;
            let d = g.add_scalar(pv.mu, -prior.mu);
            let d2 = g.mul(d, d)?;
            let q = g.add(s2, d2)?;
            let q = g.scale(q, 1.0 / (2.0 * prior.sigma * prior.sigma));
            let t = g.sub(q, log_sigma)?;
            let s = g.sum(t);
            total = Some(match total {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let total = match total {
            Some(t) => t,
            None => g.constant(Tensor::scalar(0.0))?,
        };
        Ok(g.add_scalar(total, count as f64 * (prior.sigma.ln() - 0.5)))
    }

    fn elbo_graph(
        &self,
        g: &mut Graph,
        x: &Tensor,
        labels: &[usize],
        cfg: &ElboConfig,
        rng: &mut RngState,
        trainable: bool,
    ) -> Result<(Var, Vec<(ParamVars, ParamVars)>)> {
        cfg.validate()?;
        let xv = g.constant(x.clone())?;
        let mut ce_total: Option<Var> = None;
        let mut handles = Vec::new();
        for _ in 0..cfg.mc_train_samples {
            let (trace, h) = self.forward(g, xv, trainable, WeightMode::Sample(rng))?;
            let ce = cross_entropy(g, trace.logits, labels)?;
            ce_total = Some(match ce_total {
                None => ce,
                Some(acc) => g.add(acc, ce)?,
            });
            handles.extend(h);
        }
        let ce = g.scale(ce_total.unwrap(), 1.0 / cfg.mc_train_samples as f64);
        if cfg.kl_factor == 0.0 {
            return Ok((ce, handles));
        }
        let prior = self.prior;
        let kl = self.kl_graph(g, &handles[..handles.len() / cfg.mc_train_samples], &prior)?;
        let kl = g.scale(kl, cfg.kl_factor / cfg.num_train_samples as f64);
        Ok((g.add(ce, kl)?, handles))
    }
}

/// Softmax probabilities `[N, K]`. With `sample_weights` each call draws
/// fresh weights `mu + sigma * eps`; otherwise the posterior mean is used.
pub fn bayesian_forward(
    model: &BayesianModel,
    batch: &Tensor,
    rng: &mut RngState,
    sample_weights: bool,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(batch.clone())?;
    let mode = if sample_weights {
        WeightMode::Sample(rng)
    } else {
        WeightMode::Mean
    };
    let (trace, _) = model.forward(&mut g, x, false, mode)?;
    Ok(softmax(g.value(trace.logits)))
}

/// Closed-form `KL(N(mu, sigma^2) || N(mu_p, sigma_p^2))` summed over all
/// weights.
pub fn kl_to_prior(model: &BayesianModel, prior: &PriorConfig) -> f64 {
    let (lp, vp) = (prior.sigma.ln(), prior.sigma * prior.sigma);
    model
        .variational_params()
        .map(|p| {
            p.mu.data()
                .iter()
                .zip(p.rho.data())
                .map(|(&mu, &rho)| {
                    let s = softplus(rho);
                    lp - s.ln() + (s * s + (mu - prior.mu).powi(2)) / (2.0 * vp) - 0.5
                })
                .sum::<f64>()
        })
        .sum()
}

/// ELBO training loss on one batch (see the module docs).
pub fn elbo_loss(
    model: &BayesianModel,
    batch: &Tensor,
    labels: &[usize],
    cfg: &ElboConfig,
    rng: &mut RngState,
) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = model.elbo_graph(&mut g, batch, labels, cfg, rng, false)?;
    let v = g.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            context: "elbo loss".into(),
        });
    }
    Ok(v)
}

/// Loss and gradients with respect to every `(mu, rho)` pair, in
/// `(weight mu, weight rho, bias mu, bias rho)` order per layer.
pub fn elbo_loss_and_grads(
    model: &BayesianModel,
    batch: &Tensor,
    labels: &[usize],
    cfg: &ElboConfig,
    rng: &mut RngState,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let (loss, handles) = model.elbo_graph(&mut g, batch, labels, cfg, rng, true)?;
    g.backward(loss)?;
    let per_pass = handles.len() / cfg.mc_train_samples;
    // Each pass registers its own leaves for the same parameters; their
    // gradients add up.
    let mut grads: Vec<Tensor> = Vec::with_capacity(per_pass * 4);
    for (i, (w, b)) in handles.iter().enumerate() {
        for (j, v) in [w.mu, w.rho, b.mu, b.rho].into_iter().enumerate() {
            let gv = g.grad(v).cloned().expect("parameter gradient");
            let slot = (i % per_pass) * 4 + j;
            if slot < grads.len() {
                grads[slot]
                    .data_mut()
                    .iter_mut()
                    .zip(gv.data())
                    .for_each(|(a, d)| *a += d);
            } else {
                grads.push(gv);
            }
        }
    }
    Ok((g.value(loss).item()?, grads))
}

#[derive(Clone)]
struct ElboObjective {
    model: BayesianModel,
    cfg: ElboConfig,
    selection_seed: u64,
}

impl Objective for ElboObjective {
    fn num_classes(&self) -> usize {
        self.model.spec.num_classes
    }

    fn param_sizes(&self) -> Vec<usize> {
        self.model
            .variational_params()
            .flat_map(|p| [p.mu.numel(), p.rho.numel()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.model
            .layers
            .iter_mut()
            .flatten()
            .flat_map(|l| [&mut l.weight.mu, &mut l.weight.rho, &mut l.bias.mu, &mut l.bias.rho])
            .collect()
    }

    fn loss_and_grads(
        &self,
        x: &Tensor,
        labels: &[usize],
        rng: &mut RngState,
    ) -> Result<(f64, Vec<Tensor>)> {
        elbo_loss_and_grads(&self.model, x, labels, &self.cfg, rng)
    }

    /// Validation ELBO under one fixed noise draw per chunk, so the value
    /// only changes when the parameters do.
    fn eval_loss(&self, data: &LabeledData) -> Result<f64> {
        let mut rng = RngState::new(self.selection_seed);
        let mut ce = 0.0;
        for idx in data.chunks(EVAL_CHUNK) {
            let (x, labels) = data.batch(&idx);
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let (trace, _) = self.model.forward(&mut g, xv, false, WeightMode::Sample(&mut rng))?;
            let l = cross_entropy(&mut g, trace.logits, &labels)?;
            ce += g.value(l).item()? * idx.len() as f64;
        }
        let kl = kl_to_prior(&self.model, &self.model.prior);
        Ok(ce / data.len().max(1) as f64
            + self.cfg.kl_factor * kl / self.cfg.num_train_samples as f64)
    }
}

/// ELBO training with Adam over `(mu, rho)`; keeps the epoch with the
/// lowest validation ELBO. Weight noise is seeded from `cfg.seed`.
pub fn train_bayesian(
    model: BayesianModel,
    train: &LabeledData,
    val: Option<&LabeledData>,
    cfg: &TrainConfig,
    elbo: &ElboConfig,
) -> Result<(BayesianModel, TrainTrace)> {
    elbo.validate()?;
    let obj = ElboObjective {
        model,
        cfg: *elbo,
        selection_seed: RngState::new(cfg.seed).split(0x5e1ec7).seed(),
    };
    let (obj, trace) = fit(obj, train, val, cfg)?;
    Ok((obj.model, trace))
}
