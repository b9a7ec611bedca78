//! One-pass domain-uncertainty scoring.
//!
//! The noise net's inferred per-dimension scale is already a measure of how
//! unfamiliar a batch looks, so scoring a dataset needs exactly one forward
//! pass: compute feature statistics at the first perturbation site, read off
//! sigma, average. The score of a target domain is the absolute relative
//! deviation of that statistic from the source's. A repeated-sampling
//! predictive-variance baseline is included for cross-checking the ranking;
//! it is ~30x more work and used only by tests and an opt-in flag.

use crate::domains::{DomainDataset, ShiftSpec};
use crate::error::{Result, UdgError};
use crate::grad::{Rng, Stream};
use crate::model::{Backbone, PerturbNet};

/// Mean inferred sigma at the first perturbation site, over all batches and
/// feature dimensions. Read-only. Full-batch variant: the whole dataset is
/// one batch, which makes the statistic invariant to example order up to
/// accumulation rounding.
pub fn sigma_statistic(pnet: &PerturbNet, backbone: &Backbone, ds: &DomainDataset) -> Result<f64> {
    sigma_statistic_batched(pnet, backbone, ds, ds.n)
}

/// Mini-batch variant for large sets: consecutive chunks of `batch_size`
/// (the last one may be short), statistic averaged over every (batch, dim)
/// pair.
pub fn sigma_statistic_batched(
    pnet: &PerturbNet,
    backbone: &Backbone,
    ds: &DomainDataset,
    batch_size: usize,
) -> Result<f64> {
    ds.validate()?;
    if batch_size == 0 {
        return Err(UdgError::InvalidValue("batch size must be >= 1".into()));
    }
    if backbone.input_dim() != ds.d {
        return Err(UdgError::InvalidValue(format!(
            "model expects {} inputs, dataset `{}` has {}",
            backbone.input_dim(),
            ds.domain_id,
            ds.d
        )));
    }
    let site = *backbone
        .perturb_layers()
        .first()
        .ok_or_else(|| UdgError::InvalidValue("no perturbation site registered".into()))?;
    let width = backbone.layer_width(site);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start < ds.n {
        let end = (start + batch_size).min(ds.n);
        let n = end - start;
        let x = &ds.inputs[start * ds.d..end * ds.d];
        let fwd = backbone.forward_raw(x, n, None)?;
        let (_, sigma) = pnet.infer_values(&fwd.features[&site], n, width)?;
        total += sigma.iter().sum::<f64>();
        count += sigma.len();
        start = end;
    }
    Ok(total / count as f64)
}

/// |(sigma_T - sigma_S) / sigma_S|.
pub fn domain_uncertainty_score(sigma_t: f64, sigma_s: f64) -> Result<f64> {
    if !(sigma_s > 0.0) {
        return Err(UdgError::InvalidValue(format!(
            "source sigma must be > 0, got {sigma_s}"
        )));
    }
    Ok(((sigma_t - sigma_s) / sigma_s).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub domain_id: String,
    pub shift: Option<ShiftSpec>,
    pub sigma_target: f64,
    pub score: f64,
    /// Repeated-sampling predictive variance, when requested.
    pub bayes_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub sigma_source: f64,
    /// Mean target statistic (over domains) and its score; for a single
    /// target these equal the entry's values.
    pub sigma_target: f64,
    pub score: f64,
    pub breakdown: Vec<ScoreEntry>,
}

impl UncertaintyReport {
    /// Structured-text form: pretty JSON with alphabetical keys, stable
    /// across runs of the same scoring.
    pub fn render(&self) -> String {
        let entries: Vec<serde_json::Value> = self
            .breakdown
            .iter()
            .map(|e| {
                let mut v = serde_json::json!({
                    "domain_id": e.domain_id,
                    "sigma_target": e.sigma_target,
                    "score": e.score,
                });
                if let Some(s) = e.shift {
                    v["family"] = serde_json::json!(s.family.to_string());
                    v["severity"] = serde_json::json!(s.severity);
                }
                if let Some(b) = e.bayes_variance {
                    v["bayes_variance"] = serde_json::json!(b);
                }
                v
            })
            .collect();
        let doc = serde_json::json!({
            "sigma_source": self.sigma_source,
            "sigma_target": self.sigma_target,
            "score": self.score,
            "breakdown": entries,
        });
        let mut out = serde_json::to_string_pretty(&doc).expect("report serializes");
        out.push('\n');
        out
    }
}

/// Score each target against the source. Entries are ordered by shift
/// descriptor (unshifted first, then by family and severity) so severity
/// sweeps read top to bottom; ties keep the input order.
pub fn score_domains(
    pnet: &PerturbNet,
    backbone: &Backbone,
    source: &DomainDataset,
    targets: &[&DomainDataset],
    bayes_draws: Option<(usize, u64)>,
) -> Result<UncertaintyReport> {
    if targets.is_empty() {
        return Err(UdgError::InvalidValue("no target domains given".into()));
    }
    let sigma_source = sigma_statistic(pnet, backbone, source)?;
    let mut breakdown = Vec::with_capacity(targets.len());
    for ds in targets {
        let sigma_target = sigma_statistic(pnet, backbone, ds)?;
        let score = domain_uncertainty_score(sigma_target, sigma_source)?;
        let bayes_variance = match bayes_draws {
            Some((draws, seed)) => Some(bayes_uncertainty(pnet, backbone, ds, draws, seed)?),
            None => None,
        };
        breakdown.push(ScoreEntry {
            domain_id: ds.domain_id.clone(),
            shift: ds.shift,
            sigma_target,
            score,
            bayes_variance,
        });
    }
    breakdown.sort_by_key(|e| (e.shift.map(|s| s.family), e.shift.map(|s| s.severity)));
    let sigma_target =
        breakdown.iter().map(|e| e.sigma_target).sum::<f64>() / breakdown.len() as f64;
    let score = domain_uncertainty_score(sigma_target, sigma_source)?;
    Ok(UncertaintyReport {
        sigma_source,
        sigma_target,
        score,
        breakdown,
    })
}

fn softmax_rows(logits: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            out[i * c + j] /= z;
        }
    }
    out
}

/// Repeated-sampling baseline: draw `draws` perturbations from the inferred
/// noise distribution at the first site, forward each, and return the mean
/// (over examples and classes) variance of the softmax probabilities.
pub fn bayes_uncertainty(
    pnet: &PerturbNet,
    backbone: &Backbone,
    ds: &DomainDataset,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    ds.validate()?;
    if draws == 0 {
        return Err(UdgError::InvalidValue("need at least one draw".into()));
    }
    let site = *backbone
        .perturb_layers()
        .first()
        .ok_or_else(|| UdgError::InvalidValue("no perturbation site registered".into()))?;
    let width = backbone.layer_width(site);
    let n = ds.n;
    let clean = backbone.forward_raw(&ds.inputs, n, None)?;
    let c = clean.classes;
    let h = &clean.features[&site];
    let (mu, sigma) = pnet.infer_values(h, n, width)?;
    let root = Rng::new(seed);
    let mut sum = vec![0.0; n * c];
    let mut sum_sq = vec![0.0; n * c];
    for t in 0..draws {
        let mut rng = root.derive(Stream::Score, &[t as u64]);
        let eps = rng.normal_vec(width);
        // h+ = h + softplus(mu + sigma*eps), shared across the batch
        let mut h_plus = vec![0.0; n * width];
        for i in 0..n {
            for j in 0..width {
                let e = mu[j] + sigma[j] * eps[j];
                let sp = if e > 0.0 {
                    e + (-e).exp().ln_1p()
                } else {
                    e.exp().ln_1p()
                };
                h_plus[i * width + j] = h[i * width + j] + sp;
            }
        }
        let fwd = backbone.forward_raw(&ds.inputs, n, Some((site, &h_plus)))?;
        let probs = softmax_rows(&fwd.logits, n, c);
        for (idx, p) in probs.iter().enumerate() {
            sum[idx] += p;
            sum_sq[idx] += p * p;
        }
    }
    let m = draws as f64;
    let mut var_total = 0.0;
    for idx in 0..n * c {
        let mean = sum[idx] / m;
        var_total += (sum_sq[idx] / m - mean * mean).max(0.0);
    }
    Ok(var_total / (n * c) as f64)
}

/// Spearman rank correlation with average ranks for ties. Errors when either
/// side has no rank variation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(UdgError::InvalidValue(format!(
            "rank lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(UdgError::InvalidValue(
            "need at least two observations".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(UdgError::InvalidValue(
            "rank correlation undefined for a constant list".into(),
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite values"));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}
