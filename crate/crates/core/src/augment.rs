//! Feature-space and label-space augmentation.
//!
//! Four small differentiable building blocks plus the adversarial loop that
//! tunes the noise net against a frozen classifier:
//!
//! * `perturb_features`: h⁺ = h + softplus(e), e drawn from the learned
//!   Gaussian by the reparameterization trick, so h⁺ is strictly above h
//!   and gradients reach (μ, σ).
//! * `smooth_label`: one-hot → ρ on the true class, (1−ρ)/(c−1) elsewhere.
//! * `sample_lambda`: a mixing ratio in (0,1) with pathwise gradients to
//!   the shape parameters (a, b), via the closed-form Kumaraswamy quantile.
//! * `mixup_domain`: convex combination of clean and perturbed features and
//!   of clean and relabeled targets, with the same λ.
//! * `adversarial_maximize`: gradient ascent on the noise net of
//!   classification loss minus β times the mean squared logit displacement,
//!   with the classifier frozen and the noise draw fixed for the whole call.

use std::collections::BTreeMap;

use crate::error::{Result, UdgError};
use crate::grad::{ops, Rng, Tape, Tensor};
use crate::model::{Backbone, PerturbNet};

/// One Monte-Carlo augmentation of a batch, as tape handles so every part
/// stays differentiable. `h_plus` holds the raw perturbed features (strictly
/// above the clean ones); `h_mix` the λ-blend actually fed downstream;
/// mixup touches only the first registered layer, so deeper layers appear in
/// `h_mix` with their perturbed value unchanged.
pub struct AugmentedBatch {
    pub h_plus: BTreeMap<usize, Tensor>,
    pub h_mix: BTreeMap<usize, Tensor>,
    pub y_plus: Tensor,
    pub lambda: Tensor,
    pub noise: BTreeMap<usize, Tensor>,
    pub smoothing_applied: bool,
}

/// Settings for `adversarial_maximize`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvConfig {
    pub beta: f64,
    pub steps: usize,
    pub lr: f64,
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(UdgError::InvalidValue(format!(
                "constraint weight beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.steps < 1 {
            return Err(UdgError::InvalidValue(
                "adversarial steps must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(UdgError::InvalidValue(format!(
                "adversarial learning rate must be > 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// h⁺ = h + softplus(e) with e ~ N(μ, σ) drawn via reparameterization.
/// (μ, σ) are per-dimension, shared across the batch; so is the draw.
/// Returns (h⁺, e).
pub fn perturb_features(
    tape: &mut Tape,
    h: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let e = tape.gaussian_reparam_sample(mu, sigma, rng)?;
    let bump = ops::softplus(tape, &e)?;
    let h_plus = ops::add(tape, h, &bump)?;
    Ok((h_plus, e))
}

/// Same as [`perturb_features`] but with a caller-supplied standard-normal
/// draw, so repeated calls see identical noise. The adversarial ascent uses
/// this to keep its objective deterministic across steps.
pub fn perturb_features_frozen(
    tape: &mut Tape,
    h: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    eps: &[f64],
) -> Result<(Tensor, Tensor)> {
    if eps.len() != mu.numel() {
        return Err(UdgError::InvalidShape {
            primitive: "perturb_features_frozen".into(),
            message: format!("noise has {} entries, mu has {}", eps.len(), mu.numel()),
        });
    }
    if let Some(&bad) = sigma.data().iter().find(|v| **v <= 0.0) {
        return Err(UdgError::InvalidValue(format!(
            "perturbation requires sigma > 0 elementwise, found {bad}"
        )));
    }
    let eps_t = tape.constant(&mu.shape().to_vec(), eps.to_vec())?;
    let scaled = ops::mul(tape, sigma, &eps_t)?;
    let e = ops::add(tape, mu, &scaled)?;
    let bump = ops::softplus(tape, &e)?;
    let h_plus = ops::add(tape, h, &bump)?;
    Ok((h_plus, e))
}

/// Validate that `y` is exactly one-hot and return the hot index per row.
fn one_hot_indices(y: &[f64], n: usize, c: usize) -> Result<Vec<usize>> {
    let mut idx = Vec::with_capacity(n);
    for i in 0..n {
        let row = &y[i * c..(i + 1) * c];
        let mut hot = None;
        for (j, &v) in row.iter().enumerate() {
            if v == 1.0 {
                if hot.replace(j).is_some() {
                    return Err(UdgError::InvalidValue(format!(
                        "label row {i} has more than one unit entry"
                    )));
                }
            } else if v != 0.0 {
                return Err(UdgError::InvalidValue(format!(
                    "label row {i} is not one-hot: entry {j} = {v}"
                )));
            }
        }
        idx.push(hot.ok_or_else(|| {
            UdgError::InvalidValue(format!("label row {i} has no unit entry"))
        })?);
    }
    Ok(idx)
}

/// ρ on the true class, (1−ρ)/(c−1) on every other class.
pub fn smooth_label_values(y: &[f64], n: usize, c: usize, rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(UdgError::InvalidValue(format!(
            "smoothing mass rho must lie in (0,1), got {rho}"
        )));
    }
    if c < 2 {
        return Err(UdgError::InvalidValue(format!(
            "label smoothing needs at least 2 classes, got {c}"
        )));
    }
    let hot = one_hot_indices(y, n, c)?;
    let off = (1.0 - rho) / (c as f64 - 1.0);
    let mut out = vec![off; n * c];
    for (i, &j) in hot.iter().enumerate() {
        out[i * c + j] = rho;
    }
    Ok(out)
}

/// Tape wrapper over [`smooth_label_values`]; the result is a constant
/// (labels carry no gradient).
pub fn smooth_label(tape: &mut Tape, y: &Tensor, rho: f64) -> Result<Tensor> {
    if y.rank() != 2 {
        return Err(UdgError::InvalidShape {
            primitive: "smooth_label".into(),
            message: format!("labels must be rank 2, got {:?}", y.shape()),
        });
    }
    let (n, c) = (y.shape()[0], y.shape()[1]);
    let vals = smooth_label_values(y.data(), n, c, rho)?;
    tape.constant(&[n, c], vals)
}

/// How the smoothing lottery enters the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    /// Expectation relaxation: the target is τ·smoothed + (1−τ)·clean.
    Relaxed,
    /// Bernoulli(τ) draw with a straight-through gradient to τ.
    Hard,
}

/// The relabeled target ỹ that enters the mixup, together with whether the
/// smoothed branch was (fully) taken. In relaxed mode the blend weight is τ
/// itself; in hard mode it is a 0/1 draw whose gradient passes through to τ.
pub fn effective_target(
    tape: &mut Tape,
    y: &Tensor,
    rho: f64,
    tau: &Tensor,
    mode: TauMode,
    rng: &mut Rng,
) -> Result<(Tensor, bool)> {
    if tau.numel() != 1 {
        return Err(UdgError::InvalidShape {
            primitive: "effective_target".into(),
            message: format!("tau must be a scalar, got {:?}", tau.shape()),
        });
    }
    let smoothed = smooth_label(tape, y, rho)?;
    let (weight, applied) = match mode {
        TauMode::Relaxed => (tau.clone(), true),
        TauMode::Hard => {
            let s = if rng.uniform() < tau.item() { 1.0 } else { 0.0 };
            // value is exactly s, gradient w.r.t. tau is 1
            let jump = tape.scalar(s - tau.item());
            (ops::add(tape, tau, &jump)?, s == 1.0)
        }
    };
    let one = tape.scalar(1.0);
    let anti = ops::sub(tape, &one, &weight)?;
    let a = ops::mul(tape, &weight, &smoothed)?;
    let b = ops::mul(tape, &anti, y)?;
    let y_tilde = ops::add(tape, &a, &b)?;
    Ok((y_tilde, applied))
}

/// λ in (0,1) with pathwise gradients to (a, b), using the Kumaraswamy
/// quantile λ = (1 − (1−u)^{1/b})^{1/a}. The uniform draw is clamped away
/// from the endpoints so the logs stay finite.
pub fn sample_lambda(tape: &mut Tape, a: &Tensor, b: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    for (t, name) in [(a, "a"), (b, "b")] {
        if t.numel() != 1 {
            return Err(UdgError::InvalidShape {
                primitive: "sample_lambda".into(),
                message: format!("shape parameter {name} must be a scalar, got {:?}", t.shape()),
            });
        }
        if !(t.item() > 0.0) {
            return Err(UdgError::InvalidValue(format!(
                "mixing shape parameter {name} must be > 0, got {}",
                t.item()
            )));
        }
    }
    let u = rng.uniform().clamp(1e-9, 1.0 - 1e-9);
    // (1-u)^{1/b} = exp(ln(1-u)/b)
    let ln1mu = tape.scalar((1.0 - u).ln());
    let div_b = ops::div(tape, &ln1mu, b)?;
    let pow_b = ops::exp(tape, &div_b)?;
    let one = tape.scalar(1.0);
    let s = ops::sub(tape, &one, &pow_b)?;
    // s^{1/a} = exp(ln(s)/a); s in (0,1) strictly because u is clamped
    let ln_s = ops::log(tape, &s)?;
    let div_a = ops::div(tape, &ln_s, a)?;
    ops::exp(tape, &div_a)
}

/// h_mix = λ·h + (1−λ)·h⁺ and y⁺ = λ·y + (1−λ)·ỹ.
pub fn mixup_domain(
    tape: &mut Tape,
    h: &Tensor,
    h_plus: &Tensor,
    y: &Tensor,
    y_tilde: &Tensor,
    lambda: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if lambda.numel() != 1 {
        return Err(UdgError::InvalidShape {
            primitive: "mixup_domain".into(),
            message: format!("lambda must be a scalar, got {:?}", lambda.shape()),
        });
    }
    let lv = lambda.item();
    if !(0.0..=1.0).contains(&lv) {
        return Err(UdgError::InvalidValue(format!(
            "mixing ratio lambda must lie in [0,1], got {lv}"
        )));
    }
    let one = tape.scalar(1.0);
    let anti = ops::sub(tape, &one, lambda)?;
    let mut blend = |x: &Tensor, x_plus: &Tensor| -> Result<Tensor> {
        let lx = ops::mul(tape, lambda, x)?;
        let ax = ops::mul(tape, &anti, x_plus)?;
        ops::add(tape, &lx, &ax)
    };
    let h_mix = blend(h, h_plus)?;
    let y_plus = blend(y, y_tilde)?;
    Ok((h_mix, y_plus))
}

/// Gradient-ascent tuning of the noise net against a frozen classifier.
///
/// Objective: cross-entropy of the classifier on perturbed features, minus
/// `beta` times the mean squared displacement of the logits. The standard
/// normal draw behind each layer's perturbation is made once and reused for
/// every step, so each call is a deterministic optimization. Only the noise
/// net's parameters move; the classifier is bound as constants.
///
/// Returns the objective trajectory: entry 0 is the starting value, entry i
/// the value after i update steps (`steps + 1` values in total).
pub fn adversarial_maximize(
    pnet: &mut PerturbNet,
    backbone: &Backbone,
    x: &[f64],
    y: &[f64],
    n: usize,
    cfg: &AdvConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if n == 0 {
        return Err(UdgError::InvalidValue("empty batch".into()));
    }
    // clean pass is independent of the noise net: compute once, raw
    let clean = backbone.forward_raw(x, n, None)?;
    let c = clean.classes;
    if y.len() != n * c {
        return Err(UdgError::InvalidShape {
            primitive: "adversarial_maximize".into(),
            message: format!("labels have {} entries, want {}", y.len(), n * c),
        });
    }
    let layers: Vec<usize> = backbone.perturb_layers().to_vec();
    // one frozen draw per registered layer
    let eps: BTreeMap<usize, Vec<f64>> = layers
        .iter()
        .map(|&l| (l, rng.normal_vec(backbone.layer_width(l))))
        .collect();

    let in_dim = backbone.input_dim();
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut tape = Tape::new(crate::grad::TapeMode::FirstOrder);
        let xt = tape.constant(&[n, in_dim], x.to_vec())?;
        let yt = tape.constant(&[n, c], y.to_vec())?;
        let z_clean = tape.constant(&[n, c], clean.logits.clone())?;
        let bound = pnet.bind(&mut tape, true)?;
        let handles = bound.param_tensors();

        let mut injected: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (pos, &l) in layers.iter().enumerate() {
            // layer features under the injections made so far; the first
            // layer's are the clean ones and can come from the raw pass
            let h = if pos == 0 {
                let d = backbone.layer_width(l);
                tape.constant(&[n, d], clean.features[&l].clone())?
            } else {
                let pass = backbone
                    .bind(&mut tape, false)?
                    .forward_with_features(&mut tape, &xt, &injected)?;
                pass.features[&l].clone()
            };
            let (mu, sigma) = bound.infer_gaussian(&mut tape, &h)?;
            let (h_plus, _e) = perturb_features_frozen(&mut tape, &h, &mu, &sigma, &eps[&l])?;
            injected.insert(l, h_plus);
        }
        let pass = backbone
            .bind(&mut tape, false)?
            .forward_with_features(&mut tape, &xt, &injected)?;
        let ce = ops::softmax_cross_entropy(&mut tape, &pass.z, &yt)?;
        let sq = ops::sq_dist(&mut tape, &z_clean, &pass.z)?;
        let constraint = ops::scale(&mut tape, &sq, cfg.beta / n as f64)?;
        let objective = ops::sub(&mut tape, &ce, &constraint)?;
        if !objective.item().is_finite() {
            return Err(UdgError::NonFinite {
                context: format!("adversarial objective at step {step}"),
            });
        }
        trajectory.push(objective.item());
        if step == cfg.steps {
            break;
        }
        let refs: Vec<&Tensor> = handles.iter().collect();
        let grads = tape.backward(&objective, &refs, false)?;
        for (p, g) in pnet.params_mut().into_iter().zip(grads.iter()) {
            for (v, gv) in p.data.iter_mut().zip(g.data()) {
                *v += cfg.lr * gv;
            }
        }
    }
    Ok(trajectory)
}
