//! The episodic training loop.
//!
//! Each iteration: compute the training loss on a clean batch, take one
//! explicit adaptation step on it, tune the noise net adversarially against
//! the current classifier, then average the cross-entropy of the adapted
//! classifier over K augmented replays of the batch. The update minimizes
//! the mean of training and replay losses plus a weighted KL that anchors
//! the tuned noise distribution to its pre-ascent snapshot.
//!
//! All randomness comes from streams derived off the run seed keyed by
//! (purpose, iteration, sample), so a run is a pure function of its config
//! and any prefix of it can be reproduced from a checkpoint.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::augment::{
    adversarial_maximize, effective_target, mixup_domain, perturb_features, sample_lambda,
    AdvConfig,
};
use crate::domains::DomainDataset;
use crate::error::{Result, UdgError};
use crate::grad::{ops, Rng, Stream, Tape, TapeMode, Tensor};
use crate::meta::config::{MetaGradMode, TrainConfig};
use crate::meta::optimizer::Optimizer;
use crate::model::{save_checkpoint, BoundBackbone, Checkpoint, ModelState};

/// Per-iteration diagnostics, one row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaStepReport {
    pub iteration: u64,
    /// Cross-entropy of the current classifier on the clean batch.
    pub loss_train: f64,
    /// Mean cross-entropy of the adapted classifier over the K replays.
    pub loss_meta_test: f64,
    pub kl: f64,
    /// Mean inferred perturbation scale across sites and dimensions.
    pub mean_sigma: f64,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
    /// Adversarial objective before the ascent and after each step;
    /// empty when the ascent is skipped.
    pub adv_trajectory: Vec<f64>,
    /// 0 unless the run asked for timing (kept deterministic by default).
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "iter,loss_train,loss_meta_test,kl,mean_sigma,a,b,tau,wall_ms";

pub fn metrics_csv(history: &[MetaStepReport]) -> String {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.loss_train,
            r.loss_meta_test,
            r.kl,
            r.mean_sigma,
            r.a,
            r.b,
            r.tau,
            r.wall_ms
        ));
    }
    out
}

/// KL(q || p) between diagonal Gaussians, summed over dimensions:
/// sum_d [ ln(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2 ].
/// Exactly zero when q and p carry identical bits.
pub fn kl_diag_gaussian(
    tape: &mut Tape,
    mu_q: &Tensor,
    sigma_q: &Tensor,
    mu_p: &Tensor,
    sigma_p: &Tensor,
) -> Result<Tensor> {
    let n = mu_q.numel();
    for (t, name) in [(sigma_q, "sigma_q"), (mu_p, "mu_p"), (sigma_p, "sigma_p")] {
        if t.numel() != n {
            return Err(UdgError::InvalidShape {
                primitive: "kl_diag_gaussian".into(),
                message: format!("{name} has {} entries, mu_q has {n}", t.numel()),
            });
        }
    }
    for (t, name) in [(sigma_q, "sigma_q"), (sigma_p, "sigma_p")] {
        if let Some(&bad) = t.data().iter().find(|v| !(**v > 0.0)) {
            return Err(UdgError::InvalidValue(format!(
                "{name} must be positive elementwise, found {bad}"
            )));
        }
    }
    let ratio = ops::div(tape, sigma_p, sigma_q)?;
    let log_term = ops::log(tape, &ratio)?;
    let diff = ops::sub(tape, mu_q, mu_p)?;
    let var_q = ops::mul(tape, sigma_q, sigma_q)?;
    let sq_diff = ops::mul(tape, &diff, &diff)?;
    let num = ops::add(tape, &var_q, &sq_diff)?;
    let var_p = ops::mul(tape, sigma_p, sigma_p)?;
    let denom = ops::scale(tape, &var_p, 2.0)?;
    let frac = ops::div(tape, &num, &denom)?;
    let combined = ops::add(tape, &log_term, &frac)?;
    let per_dim = ops::shift(tape, &combined, -0.5)?;
    ops::sum(tape, &per_dim)
}

/// One explicit gradient step: theta* = theta - alpha * grad(loss). On a
/// second-order tape the result stays differentiable w.r.t. theta; on a
/// first-order tape the gradient enters as a constant. alpha = 0 returns
/// parameters bit-identical to the originals.
pub fn inner_adapt(
    tape: &mut Tape,
    bound: &BoundBackbone,
    loss: &Tensor,
    alpha: f64,
) -> Result<BoundBackbone> {
    if !(alpha >= 0.0) {
        return Err(UdgError::InvalidValue(format!(
            "inner step size must be >= 0, got {alpha}"
        )));
    }
    let theta = bound.param_tensors();
    let refs: Vec<&Tensor> = theta.iter().collect();
    let grads = tape.backward(loss, &refs, false)?;
    let mut star = Vec::with_capacity(theta.len());
    for (p, g) in theta.iter().zip(&grads) {
        let step = ops::scale(tape, g, alpha)?;
        star.push(ops::sub(tape, p, &step)?);
    }
    bound.with_params(&star)
}

/// Run one full training iteration on the given batch and update all
/// parameters in place. `root` is the run-level RNG; every draw inside is
/// keyed by `iter`, never by call order.
pub fn meta_iteration(
    model: &mut ModelState,
    opt: &mut Optimizer,
    config: &TrainConfig,
    x: &[f64],
    y: &[f64],
    n: usize,
    iter: u64,
    root: &Rng,
) -> Result<MetaStepReport> {
    meta_iteration_inner(model, opt, config, x, y, n, iter, root).map_err(|e| match e {
        // numeric faults surface from deep inside op kernels; stamp the
        // iteration on them so a long run's abort is locatable
        UdgError::NonFinite { context } if !context.contains("iteration") => {
            UdgError::NonFinite {
                context: format!("{context} at iteration {iter}"),
            }
        }
        other => other,
    })
}

#[allow(clippy::too_many_arguments)]
fn meta_iteration_inner(
    model: &mut ModelState,
    opt: &mut Optimizer,
    config: &TrainConfig,
    x: &[f64],
    y: &[f64],
    n: usize,
    iter: u64,
    root: &Rng,
) -> Result<MetaStepReport> {
    config.validate()?;
    let fl = config.ablation;
    let d = model.backbone.input_dim();
    let classes = model.backbone.output_dim();
    if n == 0 {
        return Err(UdgError::InvalidValue("empty batch".into()));
    }
    if x.len() != n * d || y.len() != n * classes {
        return Err(UdgError::InvalidValue(format!(
            "batch of {} inputs / {} labels does not match n={n}, d={d}, classes={classes}",
            x.len(),
            y.len()
        )));
    }

    let mode = match config.meta_grad {
        MetaGradMode::Exact => TapeMode::SecondOrder,
        MetaGradMode::FirstOrder => TapeMode::FirstOrder,
    };
    let mut tape = Tape::new(mode);
    let no_inject = BTreeMap::new();

    let bound = model.backbone.bind(&mut tape, true)?;
    let theta = bound.param_tensors();
    let xt = tape.constant(&[n, d], x.to_vec())?;
    let yt = tape.constant(&[n, classes], y.to_vec())?;

    let clean = bound.forward_with_features(&mut tape, &xt, &no_inject)?;
    let l_train = ops::softmax_cross_entropy(&mut tape, &clean.z, &yt)?;

    // adaptation step; under no_meta the classifier trains jointly on the
    // clean batch and its replays, without an inner step
    let adapted;
    let star: &BoundBackbone = if fl.no_meta {
        &bound
    } else {
        adapted = inner_adapt(&mut tape, &bound, &l_train, config.inner_lr)?;
        &adapted
    };
    let star_pass = star.forward_with_features(&mut tape, &xt, &no_inject)?;

    let sites: Vec<usize> = model.backbone.perturb_layers().to_vec();
    let first_site = sites[0];

    // per-iteration random replacements for the ablations that discard the
    // inferred values; drawn once so prior and posterior see the same ones
    let mut abl_draws: BTreeMap<usize, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
    for &l in &sites {
        let w = model.backbone.layer_width(l);
        let mu_draw = fl.random_mu.then(|| {
            let mut r = root.derive(Stream::Noise, &[iter, (1 << 32) + l as u64]);
            r.normal_vec(w)
        });
        let sigma_draw = fl.random_sigma.then(|| {
            let mut r = root.derive(Stream::Noise, &[iter, (2 << 32) + l as u64]);
            r.normal_vec(w)
                .into_iter()
                .map(|v| v.abs() + config.floor)
                .collect::<Vec<f64>>()
        });
        abl_draws.insert(l, (mu_draw, sigma_draw));
    }
    let substitute = |l: usize, mut mu: Vec<f64>, mut sigma: Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        let w = mu.len();
        if fl.random_gaussian {
            mu = vec![0.0; w];
            sigma = vec![1.0; w];
        }
        let (mu_d, sigma_d) = &abl_draws[&l];
        if let Some(v) = mu_d {
            mu = v.clone();
        }
        if let Some(v) = sigma_d {
            sigma = v.clone();
        }
        if let Some(v) = config.override_mu {
            mu = vec![v; w];
        }
        if let Some(v) = config.override_sigma {
            sigma = vec![v; w];
        }
        (mu, sigma)
    };
    let mu_replaced =
        fl.random_gaussian || fl.random_mu || config.override_mu.is_some();
    let sigma_replaced =
        fl.random_gaussian || fl.random_sigma || config.override_sigma.is_some();

    // prior snapshot: the noise net before this iteration's ascent,
    // evaluated on the adapted parameters' clean features
    let mut prior: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &l in &sites {
        let w = model.backbone.layer_width(l);
        let (mu, sigma) = model.pnet.infer_values(star_pass.features[&l].data(), n, w)?;
        prior.insert(l, substitute(l, mu, sigma));
    }

    // adversarial ascent on the noise net (skipped when it cannot matter)
    let phi_bypassed =
        fl.random_gaussian || (config.override_mu.is_some() && config.override_sigma.is_some());
    let mut trajectory = Vec::new();
    if config.t_adv > 0 && !fl.no_adversarial && !phi_bypassed {
        let mut adv_rng = root.derive(Stream::Adversarial, &[iter]);
        let adv = AdvConfig {
            beta: config.beta,
            steps: config.t_adv,
            lr: config.adv_lr,
        };
        trajectory = adversarial_maximize(&mut model.pnet, &model.backbone, x, y, n, &adv, &mut adv_rng)?;
    }

    // bind the (possibly ascended) auxiliary nets and infer the posterior
    let bpnet = model.pnet.bind(&mut tape, true)?;
    let bmnet = model.mnet.bind(&mut tape, true)?;
    let phi_p = bpnet.param_tensors();
    let phi_m = bmnet.param_tensors();

    let mut stats: Vec<(usize, Tensor, Tensor)> = Vec::with_capacity(sites.len());
    for &l in &sites {
        let (mut mu_t, mut sigma_t) = bpnet.infer_gaussian(&mut tape, &star_pass.features[&l])?;
        if mu_replaced || sigma_replaced {
            let w = model.backbone.layer_width(l);
            let (mu_v, sigma_v) = substitute(l, mu_t.data().to_vec(), sigma_t.data().to_vec());
            if mu_replaced {
                mu_t = tape.constant(&[w], mu_v)?;
            }
            if sigma_replaced {
                sigma_t = tape.constant(&[w], sigma_v)?;
            }
        }
        stats.push((l, mu_t, sigma_t));
    }

    // variational penalty, optionally detached from the noise net
    let mut kl_total = tape.scalar(0.0);
    for (l, mu_q, sigma_q) in &stats {
        let (mu_p_v, sigma_p_v) = prior[l].clone();
        let w = mu_p_v.len();
        let mu_p = tape.constant(&[w], mu_p_v)?;
        let sigma_p = tape.constant(&[w], sigma_p_v)?;
        let (kq_mu, kq_sigma) = if fl.no_min_phi_p {
            (
                tape.constant(&[w], mu_q.data().to_vec())?,
                tape.constant(&[w], sigma_q.data().to_vec())?,
            )
        } else {
            (mu_q.clone(), sigma_q.clone())
        };
        let kl_l = kl_diag_gaussian(&mut tape, &kq_mu, &kq_sigma, &mu_p, &sigma_p)?;
        kl_total = ops::add(&mut tape, &kl_total, &kl_l)?;
    }

    // mixing parameters from the first site's statistics
    enum Mix {
        Learned(Tensor, Tensor, Tensor),
        Random(Tensor, Tensor, Tensor),
        Off,
    }
    let mix = if fl.no_mixup {
        Mix::Off
    } else if fl.random_mixup {
        let one_a = tape.scalar(1.0);
        let one_b = tape.scalar(1.0);
        let half = tape.scalar(0.5);
        Mix::Random(one_a, one_b, half)
    } else {
        let (_, mu0, sigma0) = &stats[0];
        let (a, b, tau) = bmnet.infer_mixup_params(&mut tape, mu0, sigma0)?;
        Mix::Learned(a, b, tau)
    };
    let (a_v, b_v, tau_v) = match &mix {
        Mix::Learned(a, b, t) | Mix::Random(a, b, t) => (a.item(), b.item(), t.item()),
        Mix::Off => (0.0, 0.0, 0.0),
    };

    // K augmented replays of the batch under the adapted classifier
    let mut mc_sum: Option<Tensor> = None;
    for k in 0..config.k_samples as u64 {
        let mut noise_rng = root.derive(Stream::Noise, &[iter, k]);
        let mut lambda_rng = root.derive(Stream::Lambda, &[iter, k]);
        let mut tau_rng = root.derive(Stream::Tau, &[iter, k]);
        let mut injected: BTreeMap<usize, Tensor> = BTreeMap::new();
        let mut y_target = yt.clone();
        for (pos, (l, mu, sigma)) in stats.iter().enumerate() {
            // features at this site under all earlier injections
            let h = if pos == 0 {
                star_pass.features[l].clone()
            } else {
                let pass = star.forward_with_features(&mut tape, &xt, &injected)?;
                pass.features[l].clone()
            };
            let h_plus = if fl.deterministic_perturbation {
                let bump = ops::softplus(&mut tape, mu)?;
                ops::add(&mut tape, &h, &bump)?
            } else {
                perturb_features(&mut tape, &h, mu, sigma, &mut noise_rng)?.0
            };
            let site_value = if *l == first_site {
                match &mix {
                    Mix::Off => h_plus,
                    Mix::Learned(a, b, tau) | Mix::Random(a, b, tau) => {
                        let lambda = match config.override_lambda {
                            Some(lv) => tape.scalar(lv),
                            None => sample_lambda(&mut tape, a, b, &mut lambda_rng)?,
                        };
                        let (y_tilde, _) = effective_target(
                            &mut tape,
                            &yt,
                            config.rho,
                            tau,
                            config.tau_mode,
                            &mut tau_rng,
                        )?;
                        let (h_mix, y_plus) =
                            mixup_domain(&mut tape, &h, &h_plus, &yt, &y_tilde, &lambda)?;
                        y_target = y_plus;
                        h_mix
                    }
                }
            } else {
                h_plus
            };
            injected.insert(*l, site_value);
        }
        let aug = star.forward_with_features(&mut tape, &xt, &injected)?;
        let ce = ops::softmax_cross_entropy(&mut tape, &aug.z, &y_target)?;
        mc_sum = Some(match &mc_sum {
            Some(acc) => ops::add(&mut tape, acc, &ce)?,
            None => ce,
        });
    }
    let mc = ops::scale(&mut tape, &mc_sum.unwrap(), 1.0 / config.k_samples as f64)?;

    let joint = ops::add(&mut tape, &l_train, &mc)?;
    let half = ops::scale(&mut tape, &joint, 0.5)?;
    let kl_term = ops::scale(&mut tape, &kl_total, config.kl_weight)?;
    let total = ops::add(&mut tape, &half, &kl_term)?;

    for (what, v) in [
        ("training loss", l_train.item()),
        ("replay loss", mc.item()),
        ("kl", kl_total.item()),
    ] {
        if !v.is_finite() {
            return Err(UdgError::NonFinite {
                context: format!("{what} at iteration {iter}"),
            });
        }
    }

    let handles: Vec<&Tensor> = theta.iter().chain(phi_p.iter()).chain(phi_m.iter()).collect();
    let grads = tape.backward(&total, &handles, true)?;
    if let Some(g) = grads
        .iter()
        .find(|g| g.data().iter().any(|v| !v.is_finite()))
    {
        let _ = g;
        return Err(UdgError::NonFinite {
            context: format!("parameter gradient at iteration {iter}"),
        });
    }

    let mut sig_sum = 0.0;
    let mut sig_n = 0usize;
    for (_, _, sigma_q) in &stats {
        for v in sigma_q.data().iter() {
            sig_sum += v;
            sig_n += 1;
        }
    }

    let report = MetaStepReport {
        iteration: iter,
        loss_train: l_train.item(),
        loss_meta_test: mc.item(),
        kl: kl_total.item(),
        mean_sigma: sig_sum / sig_n as f64,
        a: a_v,
        b: b_v,
        tau: tau_v,
        adv_trajectory: trajectory,
        wall_ms: 0.0,
    };
    opt.step(model.params_mut(), &grads)?;
    Ok(report)
}

#[derive(Default)]
pub struct TrainOptions {
    /// Where periodic and final checkpoints go; none disables persistence.
    pub persist_path: Option<PathBuf>,
    /// Continue a previous run from its checkpoint.
    pub resume: Option<Checkpoint>,
}

pub struct TrainRun {
    pub model: ModelState,
    pub history: Vec<MetaStepReport>,
    pub checkpoint: Checkpoint,
}

fn draw_batch(source: &DomainDataset, batch_size: usize, root: &Rng, iter: u64) -> (Vec<f64>, Vec<f64>, usize) {
    let mut rng = root.derive(Stream::Batch, &[iter]);
    let bs = batch_size.min(source.n);
    let idx: Vec<usize> = (0..bs).map(|_| rng.below(source.n)).collect();
    let (x, y) = source.gather(&idx);
    (x, y, bs)
}

fn build_checkpoint(
    model: &ModelState,
    opt: &Optimizer,
    config: &TrainConfig,
    iteration: u64,
) -> Result<Checkpoint> {
    let root = Rng::new(config.seed);
    let mut ckpt = Checkpoint::from_model(model, iteration, &root, config.to_map());
    let params = model.params();
    let (records, step) = opt.to_records(&params)?;
    ckpt.optimizer = records;
    ckpt.optimizer_step = step;
    Ok(ckpt)
}

/// Train from scratch or resume; a run is fully determined by its config.
/// `iterations` in the config is the total count, so resuming a checkpoint
/// taken at iteration i runs the remaining `iterations - i`.
pub fn train(config: &TrainConfig, source: &DomainDataset, opts: TrainOptions) -> Result<TrainRun> {
    config.validate()?;
    source.validate()?;
    let root = Rng::new(config.seed);
    let dims = config.backbone_dims(source.d, source.classes);
    let mut model = ModelState::init(
        &dims,
        &config.perturb_layers,
        config.aux_hidden,
        config.floor,
        &root,
    )?;
    let mut opt = Optimizer::new(config.optimizer, config.outer_lr);
    let mut start = 0u64;
    if let Some(ckpt) = &opts.resume {
        ckpt.apply_to(&mut model)?;
        let params = model.params();
        opt.restore(&ckpt.optimizer, ckpt.optimizer_step, &params)?;
        start = ckpt.iteration;
        if start > config.iterations {
            return Err(UdgError::Config(format!(
                "checkpoint is at iteration {start}, beyond the configured {}",
                config.iterations
            )));
        }
    }
    let mut history = Vec::with_capacity((config.iterations - start) as usize);
    for iter in start..config.iterations {
        let timer = config.timing.then(std::time::Instant::now);
        let (xb, yb, nb) = draw_batch(source, config.batch_size, &root, iter);
        let mut report = meta_iteration(&mut model, &mut opt, config, &xb, &yb, nb, iter, &root)?;
        if let Some(t0) = timer {
            report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        }
        history.push(report);
        let done = iter + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.iterations
        {
            if let Some(path) = &opts.persist_path {
                let ckpt = build_checkpoint(&model, &opt, config, done)?;
                save_checkpoint(path, &ckpt)?;
            }
        }
    }
    let checkpoint = build_checkpoint(&model, &opt, config, config.iterations)?;
    if let Some(path) = &opts.persist_path {
        save_checkpoint(path, &checkpoint)?;
    }
    Ok(TrainRun {
        model,
        history,
        checkpoint,
    })
}

/// Fine-tune the classifier only (auxiliary nets frozen) with full-batch
/// plain cross-entropy SGD. Returns the loss before each step; `steps = 0`
/// leaves every parameter bit-identical.
pub fn few_shot_adapt(
    model: &mut ModelState,
    target: &DomainDataset,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    target.validate()?;
    if !(lr > 0.0) {
        return Err(UdgError::InvalidValue(format!(
            "adaptation rate must be > 0, got {lr}"
        )));
    }
    if model.backbone.input_dim() != target.d || model.backbone.output_dim() != target.classes {
        return Err(UdgError::InvalidValue(format!(
            "model is {}->{}, target `{}` is {}->{}",
            model.backbone.input_dim(),
            model.backbone.output_dim(),
            target.domain_id,
            target.d,
            target.classes
        )));
    }
    let idx: Vec<usize> = (0..target.n).collect();
    let (x, y) = target.gather(&idx);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = model.backbone.bind(&mut tape, true)?;
        let xt = tape.constant(&[target.n, target.d], x.clone())?;
        let yt = tape.constant(&[target.n, target.classes], y.clone())?;
        let pass = bound.forward_with_features(&mut tape, &xt, &BTreeMap::new())?;
        let loss = ops::softmax_cross_entropy(&mut tape, &pass.z, &yt)?;
        if !loss.item().is_finite() {
            return Err(UdgError::NonFinite {
                context: format!("adaptation step {step}"),
            });
        }
        losses.push(loss.item());
        let handles = bound.param_tensors();
        let refs: Vec<&Tensor> = handles.iter().collect();
        let grads = tape.backward(&loss, &refs, false)?;
        for (p, g) in model.backbone.params_mut().into_iter().zip(&grads) {
            for (v, gv) in p.data.iter_mut().zip(g.data().iter()) {
                *v -= lr * gv;
            }
        }
    }
    Ok(losses)
}

/// Rebuild a model and its config from a checkpoint. The input and class
/// widths are read off the stored backbone shapes.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(ModelState, TrainConfig)> {
    let config = TrainConfig::from_map(&ckpt.config)?;
    config.validate()?;
    let decode_w = |name: &str| -> Result<Vec<usize>> {
        let rec = ckpt
            .params
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| UdgError::Checkpoint(format!("checkpoint lacks `{name}`")))?;
        let (_, shape, _) = rec.decode()?;
        if shape.len() != 2 {
            return Err(UdgError::Checkpoint(format!(
                "`{name}` should be a matrix, found shape {shape:?}"
            )));
        }
        Ok(shape)
    };
    let input_dim = decode_w("backbone.0.w")?[0];
    let classes = decode_w(&format!("backbone.{}.w", config.hidden.len()))?[1];
    let dims = config.backbone_dims(input_dim, classes);
    let mut model = ModelState::init(
        &dims,
        &config.perturb_layers,
        config.aux_hidden,
        config.floor,
        &Rng::new(config.seed),
    )?;
    ckpt.apply_to(&mut model)?;
    Ok((model, config))
}
