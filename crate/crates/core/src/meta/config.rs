//! Typed run configuration and its flat `key=value` representation.
//!
//! Every field round-trips through a string map exactly (floats use the
//! shortest representation that parses back to the same bits), so a config
//! echoed into a checkpoint reproduces the run that wrote it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::augment::TauMode;
use crate::error::{Result, UdgError};
use crate::meta::optimizer::OptimizerKind;

/// How gradients flow through the inner adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaGradMode {
    /// Treat the inner gradient as a constant (one backward pass).
    FirstOrder,
    /// Differentiate through the inner update as well.
    Exact,
}

impl fmt::Display for MetaGradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetaGradMode::FirstOrder => "first_order",
            MetaGradMode::Exact => "exact",
        })
    }
}

impl FromStr for MetaGradMode {
    type Err = UdgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_order" => Ok(MetaGradMode::FirstOrder),
            "exact" => Ok(MetaGradMode::Exact),
            other => Err(UdgError::Config(format!(
                "meta_grad must be `first_order` or `exact`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauMode::Relaxed => "relaxed",
            TauMode::Hard => "hard",
        })
    }
}

impl FromStr for TauMode {
    type Err = UdgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relaxed" => Ok(TauMode::Relaxed),
            "hard" => Ok(TauMode::Hard),
            other => Err(UdgError::Config(format!(
                "tau_mode must be `relaxed` or `hard`, got `{other}`"
            ))),
        }
    }
}

/// Switches that remove or randomize one mechanism at a time. They come in
/// three families (perturbation, mixup, strategy); flags within a family are
/// mutually exclusive. The one sanctioned combination is
/// `no_meta + no_adversarial`, which degenerates to the plain baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationFlags {
    /// Perturb with fixed N(0,1) noise instead of the inferred distribution.
    pub random_gaussian: bool,
    /// Use the inferred mean only: h+ = h + softplus(mu).
    pub deterministic_perturbation: bool,
    /// Replace the inferred mean with a fresh random draw each iteration.
    pub random_mu: bool,
    /// Replace the inferred std with a fresh random draw each iteration.
    pub random_sigma: bool,
    /// Use perturbed features directly, no mixing, no label smoothing.
    pub no_mixup: bool,
    /// Mix with lambda ~ U(0,1) and a fixed half-half smoothing chance.
    pub random_mixup: bool,
    /// Skip the adversarial ascent on the noise net.
    pub no_adversarial: bool,
    /// Skip inner adaptation; train the classifier jointly on both views.
    pub no_meta: bool,
    /// Keep the variational penalty's value but give it no gradient.
    pub no_min_phi_p: bool,
}

impl AblationFlags {
    pub const PERTURBATION: [&'static str; 4] = [
        "random_gaussian",
        "deterministic_perturbation",
        "random_mu",
        "random_sigma",
    ];
    pub const MIXUP: [&'static str; 2] = ["no_mixup", "random_mixup"];
    pub const STRATEGY: [&'static str; 3] = ["no_adversarial", "no_meta", "no_min_phi_p"];

    pub fn validate(&self) -> Result<()> {
        let count = |flags: &[bool]| flags.iter().filter(|b| **b).count();
        if count(&[
            self.random_gaussian,
            self.deterministic_perturbation,
            self.random_mu,
            self.random_sigma,
        ]) > 1
        {
            return Err(UdgError::Config(
                "perturbation ablations are mutually exclusive".into(),
            ));
        }
        if count(&[self.no_mixup, self.random_mixup]) > 1 {
            return Err(UdgError::Config(
                "mixup ablations are mutually exclusive".into(),
            ));
        }
        let strat = count(&[self.no_adversarial, self.no_meta, self.no_min_phi_p]);
        let erm_pair = self.no_adversarial && self.no_meta && !self.no_min_phi_p;
        if strat > 1 && !erm_pair {
            return Err(UdgError::Config(
                "strategy ablations are mutually exclusive (except no_meta with no_adversarial)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn any(&self) -> bool {
        self.random_gaussian
            || self.deterministic_perturbation
            || self.random_mu
            || self.random_sigma
            || self.no_mixup
            || self.random_mixup
            || self.no_adversarial
            || self.no_meta
            || self.no_min_phi_p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    /// Inner adaptation step size. Zero is allowed and makes the adapted
    /// parameters equal the originals exactly.
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Monte-Carlo samples per meta-test evaluation.
    pub k_samples: usize,
    /// Displacement penalty weight in the adversarial objective.
    pub beta: f64,
    /// Ascent steps per iteration; 0 skips the ascent entirely.
    pub t_adv: usize,
    pub adv_lr: f64,
    /// Probability mass kept on the true class when smoothing labels.
    pub rho: f64,
    pub kl_weight: f64,
    pub meta_grad: MetaGradMode,
    pub tau_mode: TauMode,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
    /// Hidden layers (by index) that receive feature perturbations.
    pub perturb_layers: Vec<usize>,
    /// Lower bound for inferred scales and mixing shapes.
    pub floor: f64,
    pub aux_hidden: usize,
    /// Persist a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
    /// Record wall-clock time per iteration. Off by default so metrics files
    /// are byte-identical across runs with the same seed.
    pub timing: bool,
    /// Diagnostic pins replacing the inferred values with constants.
    pub override_mu: Option<f64>,
    pub override_sigma: Option<f64>,
    pub override_lambda: Option<f64>,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 2000,
            batch_size: 32,
            inner_lr: 0.05,
            outer_lr: 0.1,
            k_samples: 15,
            beta: 1.0,
            t_adv: 5,
            adv_lr: 0.01,
            rho: 0.9,
            kl_weight: 1.0,
            meta_grad: MetaGradMode::FirstOrder,
            tau_mode: TauMode::Relaxed,
            optimizer: OptimizerKind::Sgd,
            hidden: vec![64, 64],
            perturb_layers: vec![0],
            floor: 1e-6,
            aux_hidden: 32,
            checkpoint_every: 0,
            timing: false,
            override_mu: None,
            override_sigma: None,
            override_lambda: None,
            ablation: AblationFlags::default(),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => fmt_f64(x),
        None => "none".into(),
    }
}

fn fmt_list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Full network widths for a given input dimension and class count.
    pub fn backbone_dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 {
                Ok(())
            } else {
                Err(UdgError::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        let non_negative = |v: f64, name: &str| {
            if v >= 0.0 {
                Ok(())
            } else {
                Err(UdgError::Config(format!("{name} must be >= 0, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(UdgError::Config("batch_size must be >= 1".into()));
        }
        if self.k_samples == 0 {
            return Err(UdgError::Config("k_samples must be >= 1".into()));
        }
        non_negative(self.inner_lr, "inner_lr")?;
        positive(self.outer_lr, "outer_lr")?;
        non_negative(self.beta, "beta")?;
        positive(self.adv_lr, "adv_lr")?;
        non_negative(self.kl_weight, "kl_weight")?;
        positive(self.floor, "floor")?;
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(UdgError::Config(format!(
                "rho must lie strictly between 0 and 1, got {}",
                self.rho
            )));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(UdgError::Config(
                "hidden must list at least one positive layer width".into(),
            ));
        }
        if self.aux_hidden == 0 {
            return Err(UdgError::Config("aux_hidden must be >= 1".into()));
        }
        if self.perturb_layers.is_empty() {
            return Err(UdgError::Config(
                "at least one perturbation layer is required".into(),
            ));
        }
        if !self.perturb_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(UdgError::Config(
                "perturb_layers must be strictly increasing".into(),
            ));
        }
        if let Some(&l) = self.perturb_layers.last() {
            if l >= self.hidden.len() {
                return Err(UdgError::Config(format!(
                    "perturb layer {l} out of range for {} hidden layers",
                    self.hidden.len()
                )));
            }
        }
        if let Some(s) = self.override_sigma {
            positive(s, "override_sigma")?;
        }
        if let Some(l) = self.override_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(UdgError::Config(format!(
                    "override_lambda must lie in [0,1], got {l}"
                )));
            }
        }
        self.ablation.validate()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("iterations", self.iterations.to_string());
        put("batch_size", self.batch_size.to_string());
        put("inner_lr", fmt_f64(self.inner_lr));
        put("outer_lr", fmt_f64(self.outer_lr));
        put("k_samples", self.k_samples.to_string());
        put("beta", fmt_f64(self.beta));
        put("t_adv", self.t_adv.to_string());
        put("adv_lr", fmt_f64(self.adv_lr));
        put("rho", fmt_f64(self.rho));
        put("kl_weight", fmt_f64(self.kl_weight));
        put("meta_grad", self.meta_grad.to_string());
        put("tau_mode", self.tau_mode.to_string());
        put("optimizer", self.optimizer.to_string());
        put("hidden", fmt_list(&self.hidden));
        put("perturb_layers", fmt_list(&self.perturb_layers));
        put("floor", fmt_f64(self.floor));
        put("aux_hidden", self.aux_hidden.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("timing", self.timing.to_string());
        put("override_mu", fmt_opt(self.override_mu));
        put("override_sigma", fmt_opt(self.override_sigma));
        put("override_lambda", fmt_opt(self.override_lambda));
        put("random_gaussian", self.ablation.random_gaussian.to_string());
        put(
            "deterministic_perturbation",
            self.ablation.deterministic_perturbation.to_string(),
        );
        put("random_mu", self.ablation.random_mu.to_string());
        put("random_sigma", self.ablation.random_sigma.to_string());
        put("no_mixup", self.ablation.no_mixup.to_string());
        put("random_mixup", self.ablation.random_mixup.to_string());
        put("no_adversarial", self.ablation.no_adversarial.to_string());
        put("no_meta", self.ablation.no_meta.to_string());
        put("no_min_phi_p", self.ablation.no_min_phi_p.to_string());
        m
    }

    /// Build a config from a flat map, starting from defaults. Unknown keys
    /// are an error so typos never silently train the wrong thing.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| {
            UdgError::Config(format!("config key `{key}`: expected {what}, got `{value}`"))
        };
        fn int<T: FromStr>(value: &str, bad: impl Fn(&str) -> UdgError) -> Result<T> {
            value.parse::<T>().map_err(|_| bad("an integer"))
        }
        fn real(value: &str, bad: impl Fn(&str) -> UdgError) -> Result<f64> {
            let v = value.parse::<f64>().map_err(|_| bad("a real number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad("a finite real number"))
            }
        }
        fn boolean(value: &str, bad: impl Fn(&str) -> UdgError) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad("`true` or `false`")),
            }
        }
        fn opt_real(value: &str, bad: impl Fn(&str) -> UdgError) -> Result<Option<f64>> {
            if value == "none" {
                Ok(None)
            } else {
                real(value, bad).map(Some)
            }
        }
        fn list(value: &str, bad: impl Fn(&str) -> UdgError) -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|s| s.trim().parse::<usize>().map_err(|_| bad("a comma-separated integer list")))
                .collect()
        }
        match key {
            "seed" => self.seed = int(value, bad)?,
            "iterations" => self.iterations = int(value, bad)?,
            "batch_size" => self.batch_size = int(value, bad)?,
            "inner_lr" => self.inner_lr = real(value, bad)?,
            "outer_lr" => self.outer_lr = real(value, bad)?,
            "k_samples" => self.k_samples = int(value, bad)?,
            "beta" => self.beta = real(value, bad)?,
            "t_adv" => self.t_adv = int(value, bad)?,
            "adv_lr" => self.adv_lr = real(value, bad)?,
            "rho" => self.rho = real(value, bad)?,
            "kl_weight" => self.kl_weight = real(value, bad)?,
            "meta_grad" => self.meta_grad = value.parse()?,
            "tau_mode" => self.tau_mode = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "hidden" => self.hidden = list(value, bad)?,
            "perturb_layers" => self.perturb_layers = list(value, bad)?,
            "floor" => self.floor = real(value, bad)?,
            "aux_hidden" => self.aux_hidden = int(value, bad)?,
            "checkpoint_every" => self.checkpoint_every = int(value, bad)?,
            "timing" => self.timing = boolean(value, bad)?,
            "override_mu" => self.override_mu = opt_real(value, bad)?,
            "override_sigma" => self.override_sigma = opt_real(value, bad)?,
            "override_lambda" => self.override_lambda = opt_real(value, bad)?,
            "random_gaussian" => self.ablation.random_gaussian = boolean(value, bad)?,
            "deterministic_perturbation" => {
                self.ablation.deterministic_perturbation = boolean(value, bad)?
            }
            "random_mu" => self.ablation.random_mu = boolean(value, bad)?,
            "random_sigma" => self.ablation.random_sigma = boolean(value, bad)?,
            "no_mixup" => self.ablation.no_mixup = boolean(value, bad)?,
            "random_mixup" => self.ablation.random_mixup = boolean(value, bad)?,
            "no_adversarial" => self.ablation.no_adversarial = boolean(value, bad)?,
            "no_meta" => self.ablation.no_meta = boolean(value, bad)?,
            "no_min_phi_p" => self.ablation.no_min_phi_p = boolean(value, bad)?,
            other => {
                return Err(UdgError::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }
}
