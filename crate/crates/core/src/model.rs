//! Backbone + pyramid heads bundled as one trainable model.

use crate::backbone::{Backbone, StageSpec};
use crate::error::{Error, Result};
use crate::pyramid::{binarize, BinaryCode, HashConfig, PyramidActivations, PyramidHeads};
use crate::tensor::{Graph, Tensor, TensorId};

/// The full two-pyramid hashing network.
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub heads: PyramidHeads,
}

/// Which code vector to binarize when emitting retrieval codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeSource {
    /// The consensus code v^c (default).
    Consensus,
    /// The vertical-only code v (ablation baseline).
    Vertical,
}

impl Model {
    pub fn build(stages: Vec<StageSpec>, input_size: usize, cfg: HashConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::build(stages, input_size, seed)?;
        let heads = PyramidHeads::build(
            cfg,
            backbone.stage_channels(2),
            backbone.stage_channels(3),
            backbone.stage_channels(4),
            // distinct stream from the backbone's
            seed ^ 0x9e37_79b9_7f4a_7c15,
        );
        Ok(Model { backbone, heads })
    }

    pub fn q(&self) -> usize {
        self.heads.q
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        self.backbone.params().chain(self.heads.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.backbone.params_mut().chain(self.heads.params_mut()).collect()
    }

    /// Overwrite parameters from a named list (e.g. a loaded checkpoint).
    pub fn load_params(&mut self, loaded: &[(String, Tensor)]) -> Result<()> {
        let mut params = self.params_mut();
        if loaded.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                params.len()
            )));
        }
        for ((name, t), (lname, lt)) in params.iter_mut().zip(loaded) {
            if name != lname || t.shape() != lt.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {lname:?} {:?} does not match model parameter {name:?} {:?}",
                    lt.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(lt.data());
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundModel {
        BoundModel {
            backbone: self.backbone.bind(g, requires_grad),
            heads: self.heads.bind(g, requires_grad),
        }
    }

    /// Rebind to parameter leaves already in a graph, in `params` order.
    pub fn bind_with(&self, ids: &[TensorId]) -> BoundModel {
        let split = self.backbone.num_params();
        BoundModel {
            backbone: self.backbone.bind_with(&ids[..split]),
            heads: self.heads.bind_with(&ids[split..]),
        }
    }

    /// One-shot inference: both codes for a single image.
    pub fn encode_image(&self, image: &Tensor) -> Result<(BinaryCode, BinaryCode)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let img = g.leaf(image.clone(), false);
        let acts = bound.forward(&mut g, img)?;
        let consensus = binarize(g.value(acts.v_c).data())?;
        let vertical = binarize(g.value(acts.v).data())?;
        Ok((consensus, vertical))
    }
}

/// Parameter leaves of a model inside one graph, in `Model::params` order.
pub struct BoundModel {
    pub backbone: crate::backbone::BoundBackbone,
    pub heads: crate::pyramid::BoundHeads,
}

impl BoundModel {
    pub fn forward(&self, g: &mut Graph, image: TensorId) -> Result<PyramidActivations> {
        let maps = self.backbone.forward(g, image)?;
        self.heads.forward(g, maps)
    }

    /// Leaf ids in the same order as `Model::params`.
    pub fn param_ids(&self) -> Vec<TensorId> {
        let mut ids: Vec<TensorId> =
            self.backbone.kernel_ids.iter().flatten().copied().collect();
        ids.extend(self.heads.param_ids());
        ids
    }
}
