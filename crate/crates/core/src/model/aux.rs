//! The two auxiliary networks.
//!
//! `PerturbNet` maps per-dimension batch statistics of a hidden layer to the
//! parameters (μ, σ) of the additive noise distribution for that layer; one
//! subnet per registered layer. `MixupNet` maps the first layer's (μ, σ) to
//! the mixing-ratio distribution parameters (a, b) and the smoothing chance
//! τ. Both keep their output heads zero-initialized so a fresh model starts
//! at μ = 0, σ = softplus(0) + floor, a = b = softplus(0) + floor, τ = 1/2.
//!
//! Every map here avoids a concat primitive by splitting the input weight
//! matrix into one block per input part; the result is identical to matmul
//! against the concatenated vector.

use crate::error::{Result, UdgError};
use crate::grad::{ops, Rng, Tape, Tensor};
use crate::model::PVar;

/// Per-dimension mean and population std of a (batch, width) feature tensor,
/// as differentiable tape expressions. The variance gets a 1e-12 floor so
/// the sqrt stays differentiable on constant batches.
pub fn batch_stats(tape: &mut Tape, h: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = ops::mean_axis0(tape, h)?;
    let diff = ops::sub(tape, h, &mean)?;
    let sq = ops::mul(tape, &diff, &diff)?;
    let var = ops::mean_axis0(tape, &sq)?;
    let var = ops::shift(tape, &var, 1e-12)?;
    let std = ops::sqrt(tape, &var)?;
    Ok((mean, std))
}

/// Raw mirror of [`batch_stats`]: identical arithmetic order, no tape.
pub fn batch_stats_values(h: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += h[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let diff = h[i * d + j] - mean[j];
            var[j] += diff * diff;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / n as f64 + 1e-12).sqrt())
        .collect();
    (mean, std)
}

#[inline]
fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-vector times matrix plus running output: out[j] += sum_k v[k]·w[k,j],
/// in the same accumulation order as the tape's matmul.
fn vecmat_acc(v: &[f64], w: &PVar, out: &mut [f64]) {
    let (rows, cols) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(v.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for k in 0..rows {
        let vk = v[k];
        if vk == 0.0 {
            continue;
        }
        let wrow = &w.data[k * cols..(k + 1) * cols];
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += vk * wv;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PerturbSubnet {
    pub layer: usize,
    pub width: usize,
    w_mean: PVar,
    w_std: PVar,
    b1: PVar,
    w_mu: PVar,
    b_mu: PVar,
    w_sigma: PVar,
    b_sigma: PVar,
}

#[derive(Debug, Clone)]
pub struct PerturbNet {
    subnets: Vec<PerturbSubnet>,
    pub floor: f64,
    pub hidden: usize,
}

impl PerturbNet {
    /// One subnet per (layer index, layer width).
    pub fn new(
        layer_widths: &[(usize, usize)],
        hidden: usize,
        floor: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if layer_widths.is_empty() {
            return Err(UdgError::InvalidValue(
                "perturbation net needs at least one registered layer".into(),
            ));
        }
        let subnets = layer_widths
            .iter()
            .map(|&(layer, d)| {
                let p = |suffix: &str| format!("pnet.l{layer}.{suffix}");
                PerturbSubnet {
                    layer,
                    width: d,
                    w_mean: PVar::he(p("w_mean"), vec![d, hidden], 2 * d, rng),
                    w_std: PVar::he(p("w_std"), vec![d, hidden], 2 * d, rng),
                    b1: PVar::zeros(p("b1"), vec![hidden]),
                    w_mu: PVar::zeros(p("w_mu"), vec![hidden, d]),
                    b_mu: PVar::zeros(p("b_mu"), vec![d]),
                    w_sigma: PVar::zeros(p("w_sigma"), vec![hidden, d]),
                    b_sigma: PVar::zeros(p("b_sigma"), vec![d]),
                }
            })
            .collect();
        Ok(PerturbNet {
            subnets,
            floor,
            hidden,
        })
    }

    pub fn subnets(&self) -> &[PerturbSubnet] {
        &self.subnets
    }

    pub fn params(&self) -> Vec<&PVar> {
        self.subnets
            .iter()
            .flat_map(|s| {
                [
                    &s.w_mean, &s.w_std, &s.b1, &s.w_mu, &s.b_mu, &s.w_sigma, &s.b_sigma,
                ]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut PVar> {
        self.subnets
            .iter_mut()
            .flat_map(|s| {
                [
                    &mut s.w_mean,
                    &mut s.w_std,
                    &mut s.b1,
                    &mut s.w_mu,
                    &mut s.b_mu,
                    &mut s.w_sigma,
                    &mut s.b_sigma,
                ]
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundPerturbNet> {
        let mut subnets = Vec::with_capacity(self.subnets.len());
        for s in &self.subnets {
            subnets.push(BoundPerturbSubnet {
                width: s.width,
                w_mean: s.w_mean.bind(tape, trainable)?,
                w_std: s.w_std.bind(tape, trainable)?,
                b1: s.b1.bind(tape, trainable)?,
                w_mu: s.w_mu.bind(tape, trainable)?,
                b_mu: s.b_mu.bind(tape, trainable)?,
                w_sigma: s.w_sigma.bind(tape, trainable)?,
                b_sigma: s.b_sigma.bind(tape, trainable)?,
            });
        }
        Ok(BoundPerturbNet {
            subnets,
            floor: self.floor,
        })
    }

    /// Tape-free (μ, σ) from raw feature data, mirroring the tape arithmetic
    /// bit for bit. Used by the one-pass scoring path and prior snapshots.
    pub fn infer_values(&self, features: &[f64], n: usize, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self
            .subnets
            .iter()
            .find(|s| s.width == d)
            .ok_or_else(|| UdgError::InvalidShape {
                primitive: "infer_gaussian".into(),
                message: format!("no registered layer of width {d}"),
            })?;
        let (mean, std) = batch_stats_values(features, n, d);
        let mut hidden = vec![0.0; self.hidden];
        vecmat_acc(&mean, &s.w_mean, &mut hidden);
        let mut hs = vec![0.0; self.hidden];
        vecmat_acc(&std, &s.w_std, &mut hs);
        for (j, h) in hidden.iter_mut().enumerate() {
            *h = (*h + hs[j]) + s.b1.data[j];
            if *h < 0.0 {
                *h = 0.0;
            }
        }
        // products first, bias second, matching Add(MatMul(..), b) exactly
        let mut mu = vec![0.0; d];
        vecmat_acc(&hidden, &s.w_mu, &mut mu);
        for (m, b) in mu.iter_mut().zip(&s.b_mu.data) {
            *m += b;
        }
        let mut sigma_raw = vec![0.0; d];
        vecmat_acc(&hidden, &s.w_sigma, &mut sigma_raw);
        let sigma = sigma_raw
            .iter()
            .zip(&s.b_sigma.data)
            .map(|(&v, &b)| stable_softplus(v + b) + self.floor)
            .collect();
        Ok((mu, sigma))
    }
}

pub struct BoundPerturbSubnet {
    pub width: usize,
    w_mean: Tensor,
    w_std: Tensor,
    b1: Tensor,
    w_mu: Tensor,
    b_mu: Tensor,
    w_sigma: Tensor,
    b_sigma: Tensor,
}

pub struct BoundPerturbNet {
    subnets: Vec<BoundPerturbSubnet>,
    pub floor: f64,
}

impl BoundPerturbNet {
    /// Bound parameter handles, same order as [`PerturbNet::params_mut`].
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.subnets
            .iter()
            .flat_map(|s| {
                [
                    s.w_mean.clone(),
                    s.w_std.clone(),
                    s.b1.clone(),
                    s.w_mu.clone(),
                    s.b_mu.clone(),
                    s.w_sigma.clone(),
                    s.b_sigma.clone(),
                ]
            })
            .collect()
    }

    /// (μ, σ) for the layer whose width matches `features`, computed from
    /// the batch statistics of `features`. Differentiable in the subnet
    /// weights and in `features`.
    pub fn infer_gaussian(&self, tape: &mut Tape, features: &Tensor) -> Result<(Tensor, Tensor)> {
        if features.rank() != 2 {
            return Err(UdgError::InvalidShape {
                primitive: "infer_gaussian".into(),
                message: format!("features must be rank 2, got {:?}", features.shape()),
            });
        }
        let d = features.shape()[1];
        let s = self
            .subnets
            .iter()
            .find(|s| s.width == d)
            .ok_or_else(|| UdgError::InvalidShape {
                primitive: "infer_gaussian".into(),
                message: format!("no registered layer of width {d}"),
            })?;
        let (mean, std) = batch_stats(tape, features)?;
        let mean_row = tape.reshape(&mean, &[1, d])?;
        let std_row = tape.reshape(&std, &[1, d])?;
        let lin_m = ops::matmul(tape, &mean_row, &s.w_mean)?;
        let lin_s = ops::matmul(tape, &std_row, &s.w_std)?;
        let lin = ops::add(tape, &lin_m, &lin_s)?;
        let pre = ops::add(tape, &lin, &s.b1)?;
        let hidden = ops::relu(tape, &pre)?;
        let mu_row = ops::matmul(tape, &hidden, &s.w_mu)?;
        let mu_row = ops::add(tape, &mu_row, &s.b_mu)?;
        let mu = tape.reshape(&mu_row, &[d])?;
        let sr_row = ops::matmul(tape, &hidden, &s.w_sigma)?;
        let sr_row = ops::add(tape, &sr_row, &s.b_sigma)?;
        let sp = ops::softplus(tape, &sr_row)?;
        let sigma_row = ops::shift(tape, &sp, self.floor)?;
        let sigma = tape.reshape(&sigma_row, &[d])?;
        Ok((mu, sigma))
    }
}

#[derive(Debug, Clone)]
pub struct MixupNet {
    pub width: usize,
    pub hidden: usize,
    pub floor: f64,
    w_mu_in: PVar,
    w_sigma_in: PVar,
    b1: PVar,
    w_a: PVar,
    b_a: PVar,
    w_b: PVar,
    b_b: PVar,
    w_tau: PVar,
    b_tau: PVar,
}

impl MixupNet {
    pub fn new(width: usize, hidden: usize, floor: f64, rng: &mut Rng) -> Self {
        MixupNet {
            width,
            hidden,
            floor,
            w_mu_in: PVar::he("mnet.w_mu_in", vec![width, hidden], 2 * width, rng),
            w_sigma_in: PVar::he("mnet.w_sigma_in", vec![width, hidden], 2 * width, rng),
            b1: PVar::zeros("mnet.b1", vec![hidden]),
            w_a: PVar::zeros("mnet.w_a", vec![hidden, 1]),
            b_a: PVar::zeros("mnet.b_a", vec![1]),
            w_b: PVar::zeros("mnet.w_b", vec![hidden, 1]),
            b_b: PVar::zeros("mnet.b_b", vec![1]),
            w_tau: PVar::zeros("mnet.w_tau", vec![hidden, 1]),
            b_tau: PVar::zeros("mnet.b_tau", vec![1]),
        }
    }

    pub fn params(&self) -> Vec<&PVar> {
        vec![
            &self.w_mu_in,
            &self.w_sigma_in,
            &self.b1,
            &self.w_a,
            &self.b_a,
            &self.w_b,
            &self.b_b,
            &self.w_tau,
            &self.b_tau,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut PVar> {
        vec![
            &mut self.w_mu_in,
            &mut self.w_sigma_in,
            &mut self.b1,
            &mut self.w_a,
            &mut self.b_a,
            &mut self.w_b,
            &mut self.b_b,
            &mut self.w_tau,
            &mut self.b_tau,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundMixupNet> {
        Ok(BoundMixupNet {
            width: self.width,
            floor: self.floor,
            w_mu_in: self.w_mu_in.bind(tape, trainable)?,
            w_sigma_in: self.w_sigma_in.bind(tape, trainable)?,
            b1: self.b1.bind(tape, trainable)?,
            w_a: self.w_a.bind(tape, trainable)?,
            b_a: self.b_a.bind(tape, trainable)?,
            w_b: self.w_b.bind(tape, trainable)?,
            b_b: self.b_b.bind(tape, trainable)?,
            w_tau: self.w_tau.bind(tape, trainable)?,
            b_tau: self.b_tau.bind(tape, trainable)?,
        })
    }
}

pub struct BoundMixupNet {
    width: usize,
    floor: f64,
    w_mu_in: Tensor,
    w_sigma_in: Tensor,
    b1: Tensor,
    w_a: Tensor,
    b_a: Tensor,
    w_b: Tensor,
    b_b: Tensor,
    w_tau: Tensor,
    b_tau: Tensor,
}

impl BoundMixupNet {
    /// Bound parameter handles, same order as [`MixupNet::params_mut`].
    pub fn param_tensors(&self) -> Vec<Tensor> {
        vec![
            self.w_mu_in.clone(),
            self.w_sigma_in.clone(),
            self.b1.clone(),
            self.w_a.clone(),
            self.b_a.clone(),
            self.w_b.clone(),
            self.b_b.clone(),
            self.w_tau.clone(),
            self.b_tau.clone(),
        ]
    }

    /// (a, b, τ) as rank-0 tensors: a, b > 0 via softplus + floor, τ in (0,1)
    /// via the logistic map exp(x − softplus(x)).
    pub fn infer_mixup_params(
        &self,
        tape: &mut Tape,
        mu: &Tensor,
        sigma: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        if mu.numel() != self.width || sigma.numel() != self.width {
            return Err(UdgError::InvalidShape {
                primitive: "infer_mixup_params".into(),
                message: format!(
                    "(mu, sigma) have {} and {} entries, net expects {}",
                    mu.numel(),
                    sigma.numel(),
                    self.width
                ),
            });
        }
        let d = self.width;
        let mu_row = tape.reshape(mu, &[1, d])?;
        let sigma_row = tape.reshape(sigma, &[1, d])?;
        let lin_m = ops::matmul(tape, &mu_row, &self.w_mu_in)?;
        let lin_s = ops::matmul(tape, &sigma_row, &self.w_sigma_in)?;
        let lin = ops::add(tape, &lin_m, &lin_s)?;
        let pre = ops::add(tape, &lin, &self.b1)?;
        let hidden = ops::relu(tape, &pre)?;

        let head = |tape: &mut Tape, w: &Tensor, b: &Tensor| -> Result<Tensor> {
            let o = ops::matmul(tape, &hidden, w)?;
            let o = ops::add(tape, &o, b)?;
            tape.reshape(&o, &[])
        };
        let a_raw = head(tape, &self.w_a, &self.b_a)?;
        let b_raw = head(tape, &self.w_b, &self.b_b)?;
        let tau_raw = head(tape, &self.w_tau, &self.b_tau)?;

        let positive = |tape: &mut Tape, raw: &Tensor| -> Result<Tensor> {
            let sp = ops::softplus(tape, raw)?;
            ops::shift(tape, &sp, self.floor)
        };
        let a = positive(tape, &a_raw)?;
        let b = positive(tape, &b_raw)?;
        // logistic(x) = exp(x - softplus(x)), finite for all x. The affine
        // squeeze into [floor, 1-floor] keeps tau strictly inside (0,1) even
        // when a wild tau_raw saturates the logistic to an exact 0.0 or 1.0.
        let sp = ops::softplus(tape, &tau_raw)?;
        let diff = ops::sub(tape, &tau_raw, &sp)?;
        let logistic = ops::exp(tape, &diff)?;
        let squeezed = ops::scale(tape, &logistic, 1.0 - 2.0 * self.floor)?;
        let tau = ops::shift(tape, &squeezed, self.floor)?;
        Ok((a, b, tau))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::TapeMode;

    #[test]
    fn zero_initialized_pnet_outputs_floor_values() {
        let mut rng = Rng::new(7);
        let pnet = PerturbNet::new(&[(0, 8)], 32, 1e-6, &mut rng).unwrap();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = pnet.bind(&mut tape, false).unwrap();
        let feats = tape
            .constant(&[4, 8], (0..32).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let (mu, sigma) = bound.infer_gaussian(&mut tape, &feats).unwrap();
        for &m in mu.data() {
            assert_eq!(m, 0.0);
        }
        let expected = 2f64.ln() + 1e-6;
        for &s in sigma.data() {
            assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        }
    }

    #[test]
    fn identical_statistics_give_identical_gaussian() {
        let mut rng = Rng::new(7);
        let mut pnet = PerturbNet::new(&[(0, 2)], 16, 1e-6, &mut rng).unwrap();
        // make outputs non-trivial
        for p in pnet.params_mut() {
            if p.name.ends_with("w_mu") || p.name.ends_with("w_sigma") {
                for (i, v) in p.data.iter_mut().enumerate() {
                    *v = ((i % 5) as f64 - 2.0) * 0.1;
                }
            }
        }
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = pnet.bind(&mut tape, false).unwrap();
        // same per-dimension mean/std, different example order
        let f1 = tape.constant(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let f2 = tape.constant(&[2, 2], vec![2.0, 3.0, 0.0, 1.0]).unwrap();
        let (m1, s1) = bound.infer_gaussian(&mut tape, &f1).unwrap();
        let (m2, s2) = bound.infer_gaussian(&mut tape, &f2).unwrap();
        assert_eq!(m1.data(), m2.data());
        assert_eq!(s1.data(), s2.data());
    }

    #[test]
    fn unregistered_width_is_an_error() {
        let mut rng = Rng::new(7);
        let pnet = PerturbNet::new(&[(0, 8)], 32, 1e-6, &mut rng).unwrap();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = pnet.bind(&mut tape, false).unwrap();
        let feats = tape.constant(&[4, 5], vec![0.0; 20]).unwrap();
        let err = bound.infer_gaussian(&mut tape, &feats).unwrap_err();
        assert!(err.to_string().contains("width 5"), "{err}");
    }

    #[test]
    fn raw_inference_matches_tape_inference_bitwise() {
        let mut rng = Rng::new(19);
        let mut pnet = PerturbNet::new(&[(0, 6)], 16, 1e-6, &mut rng).unwrap();
        for p in pnet.params_mut() {
            // fill the zero heads so both paths exercise real arithmetic
            if p.data.iter().all(|&v| v == 0.0) {
                let mut r = Rng::new(p.data.len() as u64 + 3);
                for v in p.data.iter_mut() {
                    *v = r.normal() * 0.3;
                }
            }
        }
        let feats: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let (mu_raw, sigma_raw) = pnet.infer_values(&feats, 5, 6).unwrap();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = pnet.bind(&mut tape, false).unwrap();
        let ft = tape.constant(&[5, 6], feats).unwrap();
        let (mu_t, sigma_t) = bound.infer_gaussian(&mut tape, &ft).unwrap();
        assert_eq!(mu_raw, mu_t.data());
        assert_eq!(sigma_raw, sigma_t.data());
    }

    #[test]
    fn zero_initialized_mnet_gives_symmetric_defaults() {
        let mut rng = Rng::new(7);
        let mnet = MixupNet::new(8, 32, 1e-6, &mut rng);
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = mnet.bind(&mut tape, false).unwrap();
        let mu = tape.constant(&[8], vec![0.3; 8]).unwrap();
        let sigma = tape.constant(&[8], vec![0.7; 8]).unwrap();
        let (a, b, tau) = bound.infer_mixup_params(&mut tape, &mu, &sigma).unwrap();
        let expected = 2f64.ln() + 1e-6;
        assert!((a.item() - expected).abs() < 1e-12);
        assert!((b.item() - expected).abs() < 1e-12);
        assert!((tau.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mixup_params_respect_range_constraints() {
        // range contract over random nets
        for seed in 0..300u64 {
            let mut rng = Rng::new(seed);
            let mut mnet = MixupNet::new(4, 8, 1e-6, &mut rng);
            for p in mnet.params_mut() {
                for v in p.data.iter_mut() {
                    *v = rng.normal() * 2.0;
                }
            }
            let mut tape = Tape::new(TapeMode::FirstOrder);
            let bound = mnet.bind(&mut tape, false).unwrap();
            let mu_vals: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let sig_vals: Vec<f64> = (0..4).map(|_| rng.normal().abs() + 1e-6).collect();
            let mu = tape.constant(&[4], mu_vals).unwrap();
            let sigma = tape.constant(&[4], sig_vals).unwrap();
            let (a, b, tau) = bound.infer_mixup_params(&mut tape, &mu, &sigma).unwrap();
            assert!(a.item() > 0.0);
            assert!(b.item() > 0.0);
            assert!(tau.item() > 0.0 && tau.item() < 1.0);
        }
    }

    #[test]
    fn mnet_width_mismatch_is_an_error() {
        let mut rng = Rng::new(7);
        let mnet = MixupNet::new(8, 32, 1e-6, &mut rng);
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = mnet.bind(&mut tape, false).unwrap();
        let mu = tape.constant(&[3], vec![0.0; 3]).unwrap();
        let sigma = tape.constant(&[3], vec![1.0; 3]).unwrap();
        assert!(bound.infer_mixup_params(&mut tape, &mu, &sigma).is_err());
    }
}
