//! Experiment configuration files (TOML syntax, `.cfg` extension).

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use msll_core::data_gen::BatchProtocol;
use msll_core::ll_integrator::IntegratorOptions;
use msll_core::model::{builtin, BUILTIN_MODELS};
use msll_core::optimizer::OptimizerOptions;
use msll_core::{OdeModel, Vector};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub t0: f64,
    pub t_end: f64,
    pub p_true: Vec<f64>,
    pub x0_true: Vec<f64>,
    pub sigma: f64,
    /// Observation count N.
    pub n: usize,
    /// Shooting node count; 0 integrates one segment from `t0`.
    pub m: usize,
    pub p0: Vec<f64>,
    #[serde(default = "one")]
    pub sigma0: f64,
    /// Hold `s_0` at `x0_true` instead of estimating it.
    #[serde(default)]
    pub fixed_x0: bool,
    #[serde(default = "one_usize")]
    pub batches: usize,
    #[serde(default = "one_usize")]
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Multiplies B and R (rounded up, at least 1).
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub integrator: IntegratorSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub eps_stop: Option<f64>,
    pub max_iter: Option<usize>,
    pub eta: Option<f64>,
    pub alpha_min: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub h_max: Option<f64>,
    pub h_min: Option<f64>,
    pub max_steps: Option<usize>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let Some(model) = builtin(&self.model) else {
            bail!("field `model`: unknown model '{}' (expected one of {})", self.model, BUILTIN_MODELS.join(", "));
        };
        let (d, np) = (model.state_dim(), model.param_dim());
        ensure!(self.p_true.len() == np, "field `p_true`: expected {np} values, got {}", self.p_true.len());
        ensure!(self.p0.len() == np, "field `p0`: expected {np} values, got {}", self.p0.len());
        ensure!(self.x0_true.len() == d, "field `x0_true`: expected {d} values, got {}", self.x0_true.len());
        ensure!(self.t_end > self.t0, "fields `t0`/`t_end`: empty interval");
        ensure!(self.n >= 1, "field `n`: need at least one observation");
        ensure!(self.sigma >= 0.0 && self.sigma.is_finite(), "field `sigma`: must be non-negative");
        ensure!(self.sigma0 > 0.0 && self.sigma0.is_finite(), "field `sigma0`: must be positive");
        ensure!(self.batches >= 1 && self.realizations >= 1, "fields `batches`/`realizations`: must be positive");
        ensure!(self.scale > 0.0 && self.scale.is_finite(), "field `scale`: must be positive");
        self.optimizer_options().validate().map_err(|e| anyhow::anyhow!("section `optimizer`: {e}"))?;
        let io = self.integrator_options();
        ensure!(io.rel_tol > 0.0 && io.abs_tol > 0.0, "section `integrator`: tolerances must be positive");
        Ok(())
    }

    pub fn model(&self) -> Box<dyn OdeModel> {
        builtin(&self.model).expect("validated model name")
    }

    pub fn p_true(&self) -> Vector {
        Vector::from_vec(self.p_true.clone())
    }

    pub fn x0_true(&self) -> Vector {
        Vector::from_vec(self.x0_true.clone())
    }

    pub fn p0(&self) -> Vector {
        Vector::from_vec(self.p0.clone())
    }

    pub fn optimizer_options(&self) -> OptimizerOptions {
        let d = OptimizerOptions::default();
        let o = &self.optimizer;
        OptimizerOptions {
            eps_stop: o.eps_stop.unwrap_or(d.eps_stop),
            max_iter: o.max_iter.unwrap_or(d.max_iter),
            eta: o.eta.unwrap_or(d.eta),
            alpha_min: o.alpha_min.unwrap_or(d.alpha_min),
        }
    }

    pub fn integrator_options(&self) -> IntegratorOptions {
        let d = IntegratorOptions::default();
        let o = &self.integrator;
        IntegratorOptions {
            rel_tol: o.rel_tol.unwrap_or(d.rel_tol),
            abs_tol: o.abs_tol.unwrap_or(d.abs_tol),
            h_max: o.h_max.or(d.h_max),
            h_min: o.h_min.or(d.h_min),
            max_steps: o.max_steps.unwrap_or(d.max_steps),
            ..d
        }
    }

    /// Batch protocol after applying `scale` (or `scale_override`).
    pub fn protocol(&self, scale_override: Option<f64>) -> BatchProtocol {
        let scale = scale_override.unwrap_or(self.scale);
        let scaled = |n: usize| ((n as f64 * scale).ceil() as usize).max(1);
        BatchProtocol {
            batches: scaled(self.batches),
            realizations: scaled(self.realizations),
            master_seed: self.seed,
        }
    }
}
