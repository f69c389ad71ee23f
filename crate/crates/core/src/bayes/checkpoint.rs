//! `UQB1` checkpoints: same container as `UQL1`, header is the model spec,
//! a `---` line, then `prior_mu` / `prior_sigma` lines. Values are, per
//! parametric layer, weight mu, weight rho, bias mu, bias rho.

use std::fs;
use std::path::Path;

use super::{BayesianLayer, BayesianModel, PriorConfig, VariationalParam};
use crate::error::{Error, Result};
use crate::nn::{decode_container, encode_container, write_file, ModelSpec, ValueReader};

pub const BAYESIAN_MAGIC: &[u8; 4] = b"UQB1";

impl BayesianModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{}---\nprior_mu {}\nprior_sigma {}\n",
            self.spec.to_text(),
            self.prior.mu,
            self.prior.sigma
        );
        let values: Vec<f64> = self
            .variational_params()
            .flat_map(|p| p.mu.data().iter().chain(p.rho.data()).copied())
            .collect();
        encode_container(BAYESIAN_MAGIC, &header, &values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = decode_container(BAYESIAN_MAGIC, bytes)?;
        let bad = |reason: &str| Error::Format {
            what: "bayesian checkpoint",
            reason: reason.into(),
        };
        let (spec_text, extra) = header
            .split_once("---\n")
            .ok_or_else(|| bad("missing prior section"))?;
        let spec = ModelSpec::from_text(spec_text)?;
        let mut prior = PriorConfig::default();
        let (mut seen_mu, mut seen_sigma) = (false, false);
        for line in extra.lines().filter(|l| !l.trim().is_empty()) {
            let (key, val) = line
                .split_once(' ')
                .ok_or_else(|| bad("prior line without value"))?;
            let v: f64 = val.trim().parse().map_err(|_| bad("prior value is not a number"))?;
            match key {
                "prior_mu" => (prior.mu, seen_mu) = (v, true),
                "prior_sigma" => (prior.sigma, seen_sigma) = (v, true),
                _ => return Err(bad("unknown prior key")),
            }
        }
        if !(seen_mu && seen_sigma) {
            return Err(bad("prior_mu and prior_sigma are required"));
        }
        prior.validate()?;
        let mut reader = ValueReader::new(&values);
        let mut take = |shape: &[usize]| -> Result<VariationalParam> {
            let mu = reader.take(shape)?;
            let rho = reader.take(shape)?;
            VariationalParam::new(mu, rho)
        };
        let layers = spec
            .param_shapes()?
            .into_iter()
            .map(|s| {
                s.map(|(ws, bs)| {
                    Ok(BayesianLayer {
                        weight: take(&ws)?,
                        bias: take(&bs)?,
                    })
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        reader.finish()?;
        Ok(BayesianModel { spec, layers, prior })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
