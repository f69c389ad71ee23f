//! Flat `key = value` experiment configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bench::{GeneratorId, RegionMaskKind, MAX_EPSILON};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    BinaryPerGenerator,
    BinaryAll,
    SourceDetection,
    Loo,
    Region,
    Ablation,
    Attack,
    Maps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UqMethod {
    Bnn,
    McDropout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    N,
    DeltaMoped,
    KlFactor,
    Dr,
}

macro_rules! named_enum {
    ($ty:ident, $what:literal, $($var:ident => $name:literal),+ $(,)?) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$var => $name),+
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let t = s.trim();
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == t)
                    .ok_or_else(|| {
                        let names: Vec<_> = Self::ALL.iter().map(|v| v.as_str()).collect();
                        Error::Config(format!("unknown {} {t:?}, expected one of {}", $what, names.join(", ")))
                    })
            }
        }
    };
}

named_enum!(Task, "task",
    BinaryPerGenerator => "binary_per_generator",
    BinaryAll => "binary_all",
    SourceDetection => "source_detection",
    Loo => "loo",
    Region => "region",
    Ablation => "ablation",
    Attack => "attack",
    Maps => "maps",
);

named_enum!(UqMethod, "uq method", Bnn => "bnn", McDropout => "mc_dropout");

named_enum!(AblationAxis, "ablation axis",
    N => "n",
    DeltaMoped => "delta_moped",
    KlFactor => "kl_factor",
    Dr => "dr",
);

/// The only architecture id currently understood.
pub const COMPACT_CNN: &str = "compact_cnn";

/// Everything one experiment needs. Field comments give the defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `binary_per_generator`.
    pub task: Task,
    /// 600 images per class (real and each generator).
    pub n_per_class: usize,
    /// All five generators, in benchmark order.
    pub generators: Vec<GeneratorId>,
    /// `compact_cnn`.
    pub model: String,
    /// `bnn`.
    pub uq_method: UqMethod,
    /// 40 stochastic passes per prediction.
    pub n: usize,
    /// 1.0.
    pub kl_factor: f64,
    /// 0.1.
    pub delta_moped: f64,
    /// 0.2.
    pub dr: f64,
    /// 1e-4, used for both deterministic training and Bayesian fine-tuning.
    pub learning_rate: f64,
    /// 50.
    pub epochs: usize,
    /// 10 epochs of ELBO fine-tuning after conversion.
    pub bayes_epochs: usize,
    /// 64.
    pub batch_size: usize,
    /// 0.0.
    pub prior_mu: f64,
    /// 1.0.
    pub prior_sigma: f64,
    /// 7.
    pub seed: u64,
    /// `runs/default`.
    pub out: PathBuf,
    /// `no_mouth`; region runs compare it against `full`.
    pub mask: RegionMaskKind,
    /// 0.05.
    pub epsilon: f64,
    /// `delta_moped`.
    pub ablation_axis: AblationAxis,
    /// `0.1,0.5`.
    pub ablation_values: Vec<f64>,
    /// Empty, meaning every generator in turn.
    pub left_out: Vec<GeneratorId>,
    /// `NT`.
    pub maps_generator: GeneratorId,
    /// Empty, meaning the first `map_count` fake test samples.
    pub map_ids: Vec<usize>,
    /// 8.
    pub map_count: usize,
    /// 20.
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::BinaryPerGenerator,
            n_per_class: 600,
            generators: GeneratorId::ALL.to_vec(),
            model: COMPACT_CNN.into(),
            uq_method: UqMethod::Bnn,
            n: 40,
            kl_factor: 1.0,
            delta_moped: 0.1,
            dr: 0.2,
            learning_rate: 1e-4,
            epochs: 50,
            bayes_epochs: 10,
            batch_size: 64,
            prior_mu: 0.0,
            prior_sigma: 1.0,
            seed: 7,
            out: PathBuf::from("runs/default"),
            mask: RegionMaskKind::NoMouth,
            epsilon: 0.05,
            ablation_axis: AblationAxis::DeltaMoped,
            ablation_values: vec![0.1, 0.5],
            left_out: Vec::new(),
            maps_generator: GeneratorId::Nt,
            map_ids: Vec::new(),
            map_count: 8,
            histogram_bins: 20,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn gen_name(g: &GeneratorId) -> String {
    g.as_str()[2..].to_string()
}

fn parse_list<T>(value: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse)
        .collect()
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn detail(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    /// Canonical file form: every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let out = self.out.to_str().unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("task", self.task.to_string()),
            ("n_per_class", self.n_per_class.to_string()),
            ("generators", self.generators.iter().map(gen_name).collect::<Vec<_>>().join(",")),
            ("model", self.model.clone()),
            ("uq_method", self.uq_method.to_string()),
            ("n", self.n.to_string()),
            ("kl_factor", self.kl_factor.to_string()),
            ("delta_moped", self.delta_moped.to_string()),
            ("dr", self.dr.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("bayes_epochs", self.bayes_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("prior_mu", self.prior_mu.to_string()),
            ("prior_sigma", self.prior_sigma.to_string()),
            ("seed", self.seed.to_string()),
            ("out", out.to_string()),
            ("mask", self.mask.as_str().to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("ablation_axis", self.ablation_axis.to_string()),
            ("ablation_values", join(&self.ablation_values)),
            ("left_out", self.left_out.iter().map(gen_name).collect::<Vec<_>>().join(",")),
            ("maps_generator", gen_name(&self.maps_generator)),
            ("map_ids", join(&self.map_ids)),
            ("map_count", self.map_count.to_string()),
            ("histogram_bins", self.histogram_bins.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines over the defaults. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", no + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, detail(e))))?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let generator = |s: &str| s.parse::<GeneratorId>().map_err(config_err);
        match key {
            "task" => self.task = value.parse()?,
            "n_per_class" => self.n_per_class = num(key, value)?,
            "generators" => self.generators = parse_list(value, generator)?,
            "model" => self.model = value.to_string(),
            "uq_method" => self.uq_method = value.parse()?,
            "n" => self.n = num(key, value)?,
            "kl_factor" => self.kl_factor = num(key, value)?,
            "delta_moped" => self.delta_moped = num(key, value)?,
            "dr" => self.dr = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "bayes_epochs" => self.bayes_epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "prior_mu" => self.prior_mu = num(key, value)?,
            "prior_sigma" => self.prior_sigma = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "mask" => self.mask = value.parse().map_err(config_err)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "ablation_axis" => self.ablation_axis = value.parse()?,
            "ablation_values" => self.ablation_values = parse_list(value, |s| num(key, s))?,
            "left_out" => self.left_out = parse_list(value, generator)?,
            "maps_generator" => self.maps_generator = generator(value)?,
            "map_ids" => self.map_ids = parse_list(value, |s| num(key, s))?,
            "map_count" => self.map_count = num(key, value)?,
            "histogram_bins" => self.histogram_bins = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_per_class < 2 {
            return fail(format!("n_per_class must be at least 2, got {}", self.n_per_class));
        }
        if self.generators.is_empty() {
            return fail("generators must name at least one generator".into());
        }
        for (i, g) in self.generators.iter().enumerate() {
            if self.generators[..i].contains(g) {
                return fail(format!("generator {g} listed twice"));
            }
        }
        for g in &self.left_out {
            if !self.generators.contains(g) {
                return fail(format!("left_out generator {g} is not in generators"));
            }
        }
        if self.model != COMPACT_CNN {
            return fail(format!("unknown model {:?}, expected {COMPACT_CNN}", self.model));
        }
        if self.n == 0 || self.epochs == 0 || self.batch_size == 0 || self.map_count == 0 {
            return fail("n, epochs, batch_size and map_count must be positive".into());
        }
        if !(self.kl_factor >= 0.0 && self.kl_factor.is_finite()) {
            return fail(format!("kl_factor must be >= 0, got {}", self.kl_factor));
        }
        if !(self.delta_moped > 0.0 && self.delta_moped.is_finite()) {
            return fail(format!("delta_moped must be > 0, got {}", self.delta_moped));
        }
        if !(0.0..1.0).contains(&self.dr) {
            return fail(format!("dr must be in [0, 1), got {}", self.dr));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.prior_sigma > 0.0 && self.prior_sigma.is_finite() && self.prior_mu.is_finite()) {
            return fail("prior_mu must be finite and prior_sigma > 0".into());
        }
        if !(0.0..=MAX_EPSILON).contains(&self.epsilon) {
            return fail(format!("epsilon must be in [0, {MAX_EPSILON}], got {}", self.epsilon));
        }
        if self.histogram_bins < 2 {
            return fail("histogram_bins must be at least 2".into());
        }
        if self.out.to_str().is_none_or(|s| s.trim().is_empty() || s.trim() != s || s.contains(['\n', '#'])) {
            return fail("out must be a non-empty UTF-8 path without `#` or surrounding spaces".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
