//! Model parameters: the classifier backbone plus the two auxiliary nets
//! that drive augmentation (a noise-distribution net and a mixup-parameter
//! net), and checkpoint persistence for all of them.

mod aux;
mod backbone;
mod checkpoint;

pub use aux::{
    batch_stats, batch_stats_values, BoundMixupNet, BoundPerturbNet, MixupNet, PerturbNet,
};
pub use backbone::{Activation, Backbone, BoundBackbone, ForwardPass, RawForward};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ParamRecord, RngState, CHECKPOINT_VERSION,
};

use crate::error::{Result, UdgError};
use crate::grad::{Rng, Stream, Tape, Tensor};

/// A named, shaped parameter array. The single mutable home of every weight;
/// tapes get copies bound as leaves or constants per pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PVar {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl PVar {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let v = PVar {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(v.numel(), v.data.len(), "{}", v.name);
        v
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        PVar::new(name, shape, vec![0.0; n])
    }

    /// He-style init: N(0, 2/fan_in), suited to relu stacks.
    pub fn he(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let scale = (2.0 / fan_in as f64).sqrt();
        let data = (0..n).map(|_| rng.normal() * scale).collect();
        PVar::new(name, shape, data)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Tensor> {
        if trainable {
            tape.leaf(&self.shape, self.data.clone())
        } else {
            tape.constant(&self.shape, self.data.clone())
        }
    }
}

/// The full parameter state: backbone (the task model) plus the two
/// auxiliary nets.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub backbone: Backbone,
    pub pnet: PerturbNet,
    pub mnet: MixupNet,
}

impl ModelState {
    /// Fresh model. `dims` is the full backbone chain including input and
    /// class count; aux nets are sized off the perturbed layer widths.
    pub fn init(
        dims: &[usize],
        perturb_layers: &[usize],
        aux_hidden: usize,
        floor: f64,
        rng: &Rng,
    ) -> Result<Self> {
        let mut init_rng = rng.derive(Stream::Init, &[]);
        let backbone = Backbone::new(dims, perturb_layers, &mut init_rng)?;
        let widths: Vec<(usize, usize)> = backbone
            .perturb_layers()
            .iter()
            .map(|&l| (l, backbone.layer_width(l)))
            .collect();
        let pnet = PerturbNet::new(&widths, aux_hidden, floor, &mut init_rng)?;
        let first_width = widths
            .first()
            .map(|&(_, w)| w)
            .ok_or_else(|| UdgError::InvalidValue("no perturbed layer configured".into()))?;
        let mnet = MixupNet::new(first_width, aux_hidden, floor, &mut init_rng);
        Ok(ModelState {
            backbone,
            pnet,
            mnet,
        })
    }

    /// All parameters in canonical (checkpoint) order.
    pub fn params(&self) -> Vec<&PVar> {
        let mut out = self.backbone.params();
        out.extend(self.pnet.params());
        out.extend(self.mnet.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut PVar> {
        let mut out = self.backbone.params_mut();
        out.extend(self.pnet.params_mut());
        out.extend(self.mnet.params_mut());
        out
    }

    /// Auxiliary (non-backbone) parameter names, for optimizers that need to
    /// distinguish θ from ψ.
    pub fn backbone_param_count(&self) -> usize {
        self.backbone.params().len()
    }

    /// Restore parameter data from named checkpoint arrays. Structure must
    /// already match; this only fills values.
    pub fn load_params(&mut self, stored: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use std::collections::BTreeMap;
        let by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = stored
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        // validate everything first so a mismatch applies no partial state
        for p in self.params() {
            match by_name.get(p.name.as_str()) {
                Some((shape, data)) if **shape == p.shape && data.len() == p.data.len() => {}
                Some((shape, _)) => {
                    return Err(UdgError::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                        p.name, p.shape, shape
                    )))
                }
                None => {
                    return Err(UdgError::Checkpoint(format!(
                        "parameter `{}` missing from checkpoint",
                        p.name
                    )))
                }
            }
        }
        for p in self.params_mut() {
            let (_, data) = by_name[p.name.as_str()];
            p.data.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn param_snapshot(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
            .collect()
    }
}
