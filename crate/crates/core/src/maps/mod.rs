//! Pixel-space explanations: grad-cam saliency, its MC-averaged Bayesian
//! variant, and uncertainty maps (gradient of predictive entropy with
//! respect to the input).

mod render;

use std::fmt;
use std::str::FromStr;

pub use render::{render_map, RenderedFiles};

use crate::bayes::BayesianModel;
use crate::error::{Error, Result};
use crate::nn::{argmax, DeterministicModel, DropoutCtx};
use crate::tensor::{Graph, RngState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    Saliency,
    BayesianSaliency,
    Uncertainty,
}

impl MapKind {
    pub const ALL: [MapKind; 3] = [MapKind::Saliency, MapKind::BayesianSaliency, MapKind::Uncertainty];

    pub fn as_str(self) -> &'static str {
        match self {
            MapKind::Saliency => "saliency",
            MapKind::BayesianSaliency => "bayesian_saliency",
            MapKind::Uncertainty => "uncertainty",
        }
    }

    /// Percentage of pixels kept when rendering.
    pub fn default_cutoff(self) -> f64 {
        match self {
            MapKind::Saliency | MapKind::BayesianSaliency => 20.0,
            MapKind::Uncertainty => 10.0,
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown map kind {s:?}")))
    }
}

/// A nonnegative `height x width` map, max-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub kind: MapKind,
    /// Percentage of pixels kept; 100 means no cutoff was applied.
    pub cutoff_percent: f64,
    pub sample_id: usize,
    /// Maximum before normalization, so map strength stays comparable.
    pub raw_max: f64,
}

impl SpatialMap {
    /// Normalizes `values` so the maximum is 1 (all-zero maps stay zero).
    pub fn new(values: Vec<f64>, height: usize, width: usize, kind: MapKind, sample_id: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("spatial_map", format!("{} values for {height}x{width}", values.len())));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("map values must be finite and nonnegative"));
        }
        let raw_max = values.iter().copied().fold(0.0, f64::max);
        let values = if raw_max > 0.0 {
            values.into_iter().map(|v| v / raw_max).collect()
        } else {
            values
        };
        Ok(SpatialMap {
            values,
            height,
            width,
            kind,
            cutoff_percent: 100.0,
            sample_id,
            raw_max,
        })
    }

    /// Keeps the pixels at or above the `(100 - percent)`-th percentile
    /// (nearest rank) and zeroes the rest, so roughly the top `percent`
    /// of pixels survive. Larger `percent` keeps more pixels.
    pub fn with_cutoff(&self, percent: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&percent) {
            return Err(Error::invalid(format!("cutoff {percent} not in [0, 100]")));
        }
        let mut out = self.clone();
        out.cutoff_percent = percent;
        if percent == 0.0 {
            out.values.iter_mut().for_each(|v| *v = 0.0);
            return Ok(out);
        }
        let threshold = percentile(&self.values, 100.0 - percent);
        for v in &mut out.values {
            if *v < threshold {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    pub fn nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Nearest-rank percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Accepts `[C, H, W]` or `[1, C, H, W]`.
fn as_single(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [_, _, _] => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(s)
        }
        [1, _, _, _] => Ok(x.clone()),
        other => Err(Error::shape("map input", format!("expected one image, got {other:?}"))),
    }
}

/// Bilinear resize of `[h, w]` to `[out_h, out_w]` with half-pixel
/// centers (edges clamped).
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, ty) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, tx) = coord(x, w, out_w);
            let top = (1.0 - tx) * src[y0 * w + x0] + tx * src[y0 * w + x1];
            let bot = (1.0 - tx) * src[y1 * w + x0] + tx * src[y1 * w + x1];
            out.push((1.0 - ty) * top + ty * bot);
        }
    }
    out
}

/// Per-pass grad-cam ingredients: the last conv activation `[K, h, w]`,
/// the spatial mean of `d y_max / d A` per channel, and `y_max`.
struct CamPass {
    activation: Tensor,
    pooled_grad: Vec<f64>,
    y_max: f64,
}

fn cam_pass(model: &DeterministicModel, x: &Tensor) -> Result<CamPass> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    // parameters as gradient leaves make every activation differentiable
    let (trace, _) = model.forward(&mut g, xv, true, &mut DropoutCtx::off())?;
    let a = trace.last_conv_activation.ok_or_else(|| Error::ModelSpec {
        layer: 0,
        reason: "saliency needs a convolutional layer".into(),
    })?;
    let probs = g.softmax(trace.logits)?;
    let pred = argmax(g.value(probs).data());
    let picked = g.slice(probs, 1, pred, pred + 1)?;
    let y = g.sum(picked);
    g.backward(y)?;
    let y_max = g.value(y).item()?;
    let act = g.value(a);
    let [_, k, h, w] = act.shape() else {
        return Err(Error::shape("saliency", format!("activation {:?}", act.shape())));
    };
    let (k, hw) = (*k, h * w);
    let zero = Tensor::zeros(act.shape().to_vec());
    let grad = g.grad(a).unwrap_or(&zero);
    let pooled_grad = grad.data().chunks(hw).take(k).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
    let activation = Tensor::new(vec![k, *h, *w], act.data().to_vec())?;
    Ok(CamPass {
        activation,
        pooled_grad,
        y_max,
    })
}

/// `ReLU(sum_k alpha_k A^k)`, upsampled to the input size.
fn combine(alpha: &[f64], activation: &Tensor, out_h: usize, out_w: usize) -> Vec<f64> {
    let [_, h, w] = activation.shape() else { unreachable!() };
    let hw = h * w;
    let mut s = vec![0.0; hw];
    for (a, plane) in alpha.iter().zip(activation.data().chunks(hw)) {
        for (v, p) in s.iter_mut().zip(plane) {
            *v += a * p;
        }
    }
    s.iter_mut().for_each(|v| *v = v.max(0.0));
    upsample_bilinear(&s, *h, *w, out_h, out_w)
}

fn input_hw(x: &Tensor) -> (usize, usize) {
    let s = x.shape();
    (s[2], s[3])
}

/// Grad-cam map of a plain network (no cutoff applied).
pub fn saliency_map(model: &DeterministicModel, x: &Tensor, sample_id: usize) -> Result<SpatialMap> {
    let x = as_single(x)?;
    let (h, w) = input_hw(&x);
    let pass = cam_pass(model, &x)?;
    let values = combine(&pass.pooled_grad, &pass.activation, h, w);
    SpatialMap::new(values, h, w, MapKind::Saliency, sample_id)
}

/// Which activation maps enter the final Bayesian saliency combination.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActivationSource {
    /// Mean of `A^k` over the MC passes.
    #[default]
    MeanOverPasses,
    /// `A^k` of the final pass only.
    LastPass,
}

/// Grad-cam over `n` weight samples: per pass `alpha_k` is the pooled
/// gradient scaled by that pass's `y_max`; the alphas are averaged and
/// combined with the activations chosen by `source`.
pub fn bayesian_saliency_map(
    model: &BayesianModel,
    x: &Tensor,
    n: usize,
    rng: &mut RngState,
    source: ActivationSource,
    sample_id: usize,
) -> Result<SpatialMap> {
    if n == 0 {
        return Err(Error::invalid("number of MC samples must be at least 1"));
    }
    let x = as_single(x)?;
    let (h, w) = input_hw(&x);
    let mut alpha: Vec<f64> = Vec::new();
    let mut act_sum: Option<Tensor> = None;
    let mut last: Option<Tensor> = None;
    for _ in 0..n {
        let pass = cam_pass(&model.sample_realization(rng), &x)?;
        if alpha.is_empty() {
            alpha = vec![0.0; pass.pooled_grad.len()];
        }
        for (a, g) in alpha.iter_mut().zip(&pass.pooled_grad) {
            *a += pass.y_max * g / n as f64;
        }
        act_sum = Some(match act_sum {
            None => pass.activation.clone(),
            Some(mut s) => {
                s.data_mut().iter_mut().zip(pass.activation.data()).for_each(|(a, b)| *a += b);
                s
            }
        });
        last = Some(pass.activation);
    }
    let activation = match source {
        ActivationSource::LastPass => last.unwrap(),
        ActivationSource::MeanOverPasses => act_sum.unwrap().map(|v| v / n as f64),
    };
    let values = combine(&alpha, &activation, h, w);
    SpatialMap::new(values, h, w, MapKind::BayesianSaliency, sample_id)
}

/// Predictive entropy of the mean softmax over `models`, as a graph node.
fn entropy_graph(g: &mut Graph, models: &[DeterministicModel], x: Var) -> Result<Var> {
    let mut total: Option<Var> = None;
    for m in models {
        let (trace, _) = m.forward(g, x, false, &mut DropoutCtx::off())?;
        let p = g.softmax(trace.logits)?;
        total = Some(match total {
            None => p,
            Some(t) => g.add(t, p)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("need at least one weight sample"))?;
    let mean = g.scale(total, 1.0 / models.len() as f64);
    let plogp = g.xlogx(mean);
    let s = g.sum(plogp);
    Ok(g.scale(s, -1.0))
}

/// Predictive entropy (nats) of one input under fixed weight samples.
pub fn predictive_uncertainty_at(models: &[DeterministicModel], x: &Tensor) -> Result<f64> {
    let x = as_single(x)?;
    let mut g = Graph::new();
    let xv = g.constant(x)?;
    let h = entropy_graph(&mut g, models, xv)?;
    g.value(h).item()
}

/// Signed gradient of the predictive entropy with respect to every input
/// value, `[1, C, H, W]`.
pub fn uncertainty_gradient(models: &[DeterministicModel], x: &Tensor) -> Result<Tensor> {
    let x = as_single(x)?;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true)?;
    let h = entropy_graph(&mut g, models, xv)?;
    g.backward(h)?;
    Ok(g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// `|dH/dx|` reduced over channels by max; normalized, no cutoff.
pub fn uncertainty_map_from_samples(models: &[DeterministicModel], x: &Tensor, sample_id: usize) -> Result<SpatialMap> {
    let grad = uncertainty_gradient(models, x)?;
    let [_, c, h, w] = grad.shape() else { unreachable!() };
    let (c, h, w) = (*c, *h, *w);
    let values = (0..h * w)
        .map(|p| (0..c).map(|ch| grad.data()[ch * h * w + p].abs()).fold(0.0, f64::max))
        .collect();
    SpatialMap::new(values, h, w, MapKind::Uncertainty, sample_id)
}

/// Uncertainty map over `n` fresh weight samples drawn from `rng`.
pub fn uncertainty_map(
    model: &BayesianModel,
    x: &Tensor,
    n: usize,
    rng: &mut RngState,
    sample_id: usize,
) -> Result<SpatialMap> {
    if n == 0 {
        return Err(Error::invalid("number of MC samples must be at least 1"));
    }
    let models: Vec<DeterministicModel> = (0..n).map(|_| model.sample_realization(rng)).collect();
    uncertainty_map_from_samples(&models, x, sample_id)
}
