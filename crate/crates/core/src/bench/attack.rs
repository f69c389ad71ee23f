//! Single-step sign-gradient (FGSM) perturbations under an infinity-norm
//! budget, computed on a surrogate model.

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, DeterministicModel, DropoutCtx, EVAL_CHUNK};
use crate::tensor::{Graph, Tensor};

/// Largest budget accepted; images live in `[0, 1]`.
pub const MAX_EPSILON: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialConfig {
    pub epsilon: f64,
    /// Name of the model whose gradients drive the attack.
    pub surrogate: String,
}

impl AdversarialConfig {
    pub fn new(epsilon: f64) -> Self {
        AdversarialConfig {
            epsilon,
            surrogate: "deterministic".into(),
        }
    }

    /// `epsilon = 0` is accepted and leaves inputs unchanged.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_EPSILON).contains(&self.epsilon) {
            return Err(Error::invalid(format!(
                "epsilon {} not in [0, {MAX_EPSILON}]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Gradient of the batch-mean cross-entropy with respect to the input.
pub fn input_gradient(model: &DeterministicModel, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(batch.clone(), true)?;
    let (trace, _) = model.forward(&mut g, x, false, &mut DropoutCtx::off())?;
    let loss = cross_entropy(&mut g, trace.logits, labels)?;
    g.backward(loss)?;
    let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(batch.shape().to_vec()));
    if !grad.is_finite() {
        return Err(Error::NonFinite {
            context: "input gradient of the attack surrogate".into(),
        });
    }
    Ok(grad)
}

/// Moves `v` one step of `eps` in direction `dir`, clamps to `[0, 1]` and
/// pulls the result back by ulps if rounding overshot the budget.
fn step(v: f64, dir: f64, eps: f64) -> f64 {
    let mut out = (v + eps * dir).clamp(0.0, 1.0);
    while (out - v).abs() > eps {
        out = if out > v { out.next_down() } else { out.next_up() };
    }
    out
}

/// `clamp(x + eps * sign(dCE/dx), 0, 1)`, with `|x' - x| <= eps` holding
/// exactly. Zero gradients leave a pixel in place.
pub fn fgsm_attack(
    surrogate: &DeterministicModel,
    batch: &Tensor,
    labels: &[usize],
    cfg: &AdversarialConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let n = batch.shape().first().copied().unwrap_or(0);
    if labels.len() != n {
        return Err(Error::shape("fgsm_attack", format!("{n} inputs but {} labels", labels.len())));
    }
    if cfg.epsilon == 0.0 || n == 0 {
        return Ok(batch.clone());
    }
    let per = batch.numel() / n;
    let mut out = Vec::with_capacity(batch.numel());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = batch.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, batch.data()[start * per..end * per].to_vec())?;
        let grad = input_gradient(surrogate, &chunk, &labels[start..end])?;
        out.extend(
            chunk
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &gv)| if gv == 0.0 { v } else { step(v, gv.signum(), cfg.epsilon) }),
        );
    }
    Tensor::new(batch.shape().to_vec(), out)
}
