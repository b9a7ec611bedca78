//! The classifier backbone: a relu MLP whose hidden features are the
//! injection sites for augmentation.

use std::collections::BTreeMap;

use crate::error::{Result, UdgError};
use crate::grad::{ops, Rng, Tape, Tensor};
use crate::model::PVar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Relu => ops::relu(tape, t),
            Activation::Identity => Ok(t.clone()),
        }
    }

    fn apply_raw(self, buf: &mut [f64]) {
        if self == Activation::Relu {
            for v in buf {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub w: PVar,
    pub b: PVar,
    pub activation: Activation,
}

/// MLP with relu hidden layers and an identity final layer, so the last
/// pre-activation is the class-logit vector z.
#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<Layer>,
    perturb_layers: Vec<usize>,
}

impl Backbone {
    /// `dims` = [input, hidden..., classes]; `perturb_layers` index into the
    /// hidden layers (0 = first hidden layer). The final layer cannot be a
    /// perturbation site: its output is the logits.
    pub fn new(dims: &[usize], perturb_layers: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(UdgError::InvalidValue(format!(
                "backbone dims must be >=2 positive entries, got {dims:?}"
            )));
        }
        let n_layers = dims.len() - 1;
        let mut pl: Vec<usize> = perturb_layers.to_vec();
        pl.sort_unstable();
        pl.dedup();
        if let Some(&bad) = pl.iter().find(|&&l| l + 1 >= n_layers) {
            return Err(UdgError::InvalidValue(format!(
                "perturb layer {bad} out of range: net has {} hidden layers",
                n_layers - 1
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let activation = if i + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                w: PVar::he(format!("backbone.{i}.w"), vec![fan_in, fan_out], fan_in, rng),
                b: PVar::zeros(format!("backbone.{i}.b"), vec![fan_out]),
                activation,
            });
        }
        Ok(Backbone {
            layers,
            perturb_layers: pl,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn perturb_layers(&self) -> &[usize] {
        &self.perturb_layers
    }

    pub fn layer_width(&self, layer: usize) -> usize {
        self.layers[layer].w.shape[1]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape[1]
    }

    pub fn params(&self) -> Vec<&PVar> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut PVar> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Put the current weights on a tape, as leaves (trainable) or constants
    /// (frozen).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundBackbone> {
        let mut bound = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            bound.push((l.w.bind(tape, trainable)?, l.b.bind(tape, trainable)?, l.activation));
        }
        Ok(BoundBackbone {
            layers: bound,
            perturb_layers: self.perturb_layers.clone(),
        })
    }

    /// Tape-free forward pass over raw data, for evaluation and scoring
    /// paths that need speed and no gradients. `injected` optionally
    /// replaces one perturb layer's post-activation feature.
    pub fn forward_raw(
        &self,
        x: &[f64],
        n: usize,
        injected: Option<(usize, &[f64])>,
    ) -> Result<RawForward> {
        let d = self.input_dim();
        if x.len() != n * d {
            return Err(UdgError::InvalidValue(format!(
                "input of {} values is not batch {n} x dim {d}",
                x.len()
            )));
        }
        if let Some((l, _)) = injected {
            if !self.perturb_layers.contains(&l) {
                return Err(UdgError::InvalidValue(format!(
                    "layer {l} is not a registered perturbation site"
                )));
            }
        }
        let mut cur: Vec<f64> = x.to_vec();
        let mut cur_dim = d;
        let mut features = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.w.shape[0], layer.w.shape[1]);
            debug_assert_eq!(cur_dim, fan_in);
            let mut out = vec![0.0; n * fan_out];
            for r in 0..n {
                let xrow = &cur[r * fan_in..(r + 1) * fan_in];
                let orow = &mut out[r * fan_out..(r + 1) * fan_out];
                orow.copy_from_slice(&layer.b.data);
                for (k, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &layer.w.data[k * fan_out..(k + 1) * fan_out];
                    for (o, wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
            if i + 1 == self.layers.len() {
                return Ok(RawForward {
                    logits: out,
                    classes: fan_out,
                    features,
                });
            }
            layer.activation.apply_raw(&mut out);
            if self.perturb_layers.contains(&i) {
                features.insert(i, out.clone());
            }
            match injected {
                Some((l, h)) if l == i => {
                    if h.len() != out.len() {
                        return Err(UdgError::InvalidValue(format!(
                            "injected feature for layer {l} has {} values, expected {}",
                            h.len(),
                            out.len()
                        )));
                    }
                    cur = h.to_vec();
                }
                _ => cur = out,
            }
            cur_dim = fan_out;
        }
        unreachable!("loop returns at the last layer")
    }
}

/// Backbone weights bound to one tape.
pub struct BoundBackbone {
    layers: Vec<(Tensor, Tensor, Activation)>,
    perturb_layers: Vec<usize>,
}

/// One forward pass: final logits, the last pre-activation z (equal to the
/// logits for an identity-final net), and the post-activation feature at
/// every perturbation site.
pub struct ForwardPass {
    pub logits: Tensor,
    pub z: Tensor,
    pub features: BTreeMap<usize, Tensor>,
}

/// Tape-free counterpart of [`ForwardPass`].
pub struct RawForward {
    pub logits: Vec<f64>,
    pub classes: usize,
    pub features: BTreeMap<usize, Vec<f64>>,
}

impl BoundBackbone {
    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(w, b, _)| [w.clone(), b.clone()])
            .collect()
    }

    /// Same weights, different parameter tensors (e.g. the inner-adapted
    /// ones). Order must match [`BoundBackbone::param_tensors`].
    pub fn with_params(&self, params: &[Tensor]) -> Result<BoundBackbone> {
        if params.len() != self.layers.len() * 2 {
            return Err(UdgError::InvalidValue(format!(
                "expected {} parameter tensors, got {}",
                self.layers.len() * 2,
                params.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, (_, _, act))| (params[2 * i].clone(), params[2 * i + 1].clone(), *act))
            .collect();
        Ok(BoundBackbone {
            layers,
            perturb_layers: self.perturb_layers.clone(),
        })
    }

    /// Forward `x`, recording every step. When `injected` holds a feature
    /// tensor for a perturbation site, computation downstream of that layer
    /// uses it in place of the layer's own output; the returned feature map
    /// always holds the layer's own (pre-injection) output.
    pub fn forward_with_features(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        injected: &BTreeMap<usize, Tensor>,
    ) -> Result<ForwardPass> {
        for l in injected.keys() {
            if !self.perturb_layers.contains(l) {
                return Err(UdgError::InvalidValue(format!(
                    "layer {l} is not a registered perturbation site"
                )));
            }
        }
        let mut cur = x.clone();
        let mut z = None;
        let mut features = BTreeMap::new();
        let last = self.layers.len() - 1;
        for (i, (w, b, act)) in self.layers.iter().enumerate() {
            let lin = ops::matmul(tape, &cur, w)?;
            let pre = ops::add(tape, &lin, b)?;
            if i == last {
                z = Some(pre.clone());
                cur = act.apply(tape, &pre)?;
                break;
            }
            let post = act.apply(tape, &pre)?;
            if self.perturb_layers.contains(&i) {
                features.insert(i, post.clone());
            }
            cur = match injected.get(&i) {
                Some(h) => {
                    if h.shape() != post.shape() {
                        return Err(UdgError::InvalidValue(format!(
                            "injected feature for layer {i} has shape {:?}, expected {:?}",
                            h.shape(),
                            post.shape()
                        )));
                    }
                    h.clone()
                }
                None => post,
            };
        }
        Ok(ForwardPass {
            logits: cur,
            z: z.expect("at least one layer"),
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::TapeMode;

    fn zero_backbone(dims: &[usize], perturb: &[usize]) -> Backbone {
        let mut rng = Rng::new(0);
        let mut bb = Backbone::new(dims, perturb, &mut rng).unwrap();
        for p in bb.params_mut() {
            if p.name.ends_with(".w") {
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        bb
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut bb = zero_backbone(&[3, 4, 2], &[0]);
        bb.layers_mut_for_test()[1].b.data = vec![0.7, -0.3];
        let out = bb.forward_raw(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.0], 2, None).unwrap();
        assert_eq!(out.logits, vec![0.7, -0.3, 0.7, -0.3]);
    }

    #[test]
    fn injecting_recorded_features_reproduces_plain_forward() {
        let mut rng = Rng::new(9);
        let bb = Backbone::new(&[2, 8, 8, 3], &[0, 1], &mut rng).unwrap();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = bb.bind(&mut tape, false).unwrap();
        let x = tape
            .constant(&[4, 2], vec![0.1, -0.2, 0.5, 1.0, -1.5, 0.3, 2.0, -0.7])
            .unwrap();
        let plain = bound
            .forward_with_features(&mut tape, &x, &BTreeMap::new())
            .unwrap();
        let again = bound
            .forward_with_features(&mut tape, &x, &plain.features)
            .unwrap();
        assert_eq!(plain.logits.data(), again.logits.data());
    }

    #[test]
    fn feature_map_has_perturb_keys_and_shapes() {
        let mut rng = Rng::new(3);
        let bb = Backbone::new(&[2, 16, 16, 3], &[0, 1], &mut rng).unwrap();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = bb.bind(&mut tape, false).unwrap();
        let x = tape.constant(&[4, 2], vec![0.25; 8]).unwrap();
        let fwd = bound
            .forward_with_features(&mut tape, &x, &BTreeMap::new())
            .unwrap();
        assert_eq!(fwd.features.keys().copied().collect::<Vec<_>>(), vec![0, 1]);
        for f in fwd.features.values() {
            assert_eq!(f.shape(), &[4, 16]);
        }
        assert_eq!(fwd.logits.shape(), &[4, 3]);
        assert_eq!(fwd.z.data(), fwd.logits.data());
    }

    #[test]
    fn unknown_injection_site_is_rejected() {
        let mut rng = Rng::new(3);
        let bb = Backbone::new(&[2, 8, 8, 3], &[0], &mut rng).unwrap();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = bb.bind(&mut tape, false).unwrap();
        let x = tape.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
        let fake = tape.constant(&[1, 8], vec![0.0; 8]).unwrap();
        let mut injected = BTreeMap::new();
        injected.insert(1usize, fake);
        assert!(bound.forward_with_features(&mut tape, &x, &injected).is_err());
    }

    #[test]
    fn raw_and_taped_forward_agree() {
        let mut rng = Rng::new(11);
        let bb = Backbone::new(&[3, 8, 2], &[0], &mut rng).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.5).collect();
        let raw = bb.forward_raw(&x, 4, None).unwrap();
        let mut tape = Tape::new(TapeMode::FirstOrder);
        let bound = bb.bind(&mut tape, false).unwrap();
        let xt = tape.constant(&[4, 3], x).unwrap();
        let fwd = bound
            .forward_with_features(&mut tape, &xt, &BTreeMap::new())
            .unwrap();
        assert_eq!(raw.logits, fwd.logits.data());
        assert_eq!(raw.features[&0], fwd.features[&0].data());
    }

    impl Backbone {
        fn layers_mut_for_test(&mut self) -> &mut Vec<Layer> {
            &mut self.layers
        }
    }
}
