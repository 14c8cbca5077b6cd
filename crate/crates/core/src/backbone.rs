//! Staged convolutional backbone with side outputs.
//!
//! Five stages of `blocks x (conv 3x3 + relu)`; a downsampling stage strides
//! its first conv by 2. The default geometry halves the spatial side at every
//! stage, so stages 2, 3, 4 emit feature maps of sides S/8, S/16, S/32 for a
//! square input of side S. Stages 2-4 are the side outputs consumed by the
//! pyramid heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};

/// One backbone stage: `blocks` repetitions of conv 3x3 + relu.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub blocks: usize,
    /// First conv of the stage uses stride 2.
    pub downsample: bool,
}

impl StageSpec {
    fn validate(&self) -> Result<()> {
        if self.out_channels < 1 || self.blocks < 1 {
            return Err(Error::Config(format!(
                "stage needs out_channels >= 1 and blocks >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Desk-scale default: channels (8,16,32,64,128), one block per stage, every
/// stage downsampling, for 64x64 inputs.
pub fn desk_stages() -> Vec<StageSpec> {
    [8, 16, 32, 64, 128]
        .iter()
        .map(|&c| StageSpec { out_channels: c, blocks: 1, downsample: true })
        .collect()
}

/// Full-scale channel layout (224x224 inputs).
pub fn full_scale_stages() -> Vec<StageSpec> {
    [64, 64, 128, 256, 512]
        .iter()
        .map(|&c| StageSpec { out_channels: c, blocks: 1, downsample: true })
        .collect()
}

/// Staged conv net producing the three side-output feature maps.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    /// Kernels per stage, indexed [stage][block]; shape [C_out, C_in, 3, 3].
    kernels: Vec<Vec<Tensor>>,
}

/// Side outputs of one forward pass, as graph node ids.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMaps {
    pub m_s2: TensorId,
    pub m_s3: TensorId,
    pub m_s4: TensorId,
}

/// Handles to backbone parameter leaves inside a graph.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub kernel_ids: Vec<Vec<TensorId>>,
    input_size: usize,
    strides: Vec<Vec<usize>>,
}

const KERNEL: usize = 3;

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape is consistent")
}

impl Backbone {
    /// Build a backbone with fan-in-scaled uniform initialization, reproducible
    /// from `seed`.
    pub fn build(stages: Vec<StageSpec>, input_size: usize, seed: u64) -> Result<Self> {
        if stages.len() != 5 {
            return Err(Error::Config(format!("backbone needs 5 stages, got {}", stages.len())));
        }
        for s in &stages {
            s.validate()?;
        }
        if input_size % 32 != 0 || input_size == 0 {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {input_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kernels = Vec::with_capacity(stages.len());
        let mut c_in = 3;
        for spec in &stages {
            let mut blocks = Vec::with_capacity(spec.blocks);
            for b in 0..spec.blocks {
                let cin = if b == 0 { c_in } else { spec.out_channels };
                let fan_in = cin * KERNEL * KERNEL;
                blocks.push(fan_in_uniform(
                    &mut rng,
                    vec![spec.out_channels, cin, KERNEL, KERNEL],
                    fan_in,
                ));
            }
            kernels.push(blocks);
            c_in = spec.out_channels;
        }
        Ok(Backbone { input_size, stages, kernels })
    }

    /// Spatial side of the stage-`t` output under the configured strides.
    pub fn stage_side(&self, t: usize) -> usize {
        let mut side = self.input_size;
        for spec in &self.stages[..=t] {
            if spec.downsample {
                side /= 2;
            }
        }
        side
    }

    pub fn stage_channels(&self, t: usize) -> usize {
        self.stages[t].out_channels
    }

    /// Iterate `(name, tensor)` over all parameters.
    pub fn params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.kernels.iter().enumerate().flat_map(|(s, blocks)| {
            blocks.iter().enumerate().map(move |(b, t)| (format!("backbone.stage{s}.conv{b}"), t))
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.kernels.iter_mut().enumerate().flat_map(|(s, blocks)| {
            blocks
                .iter_mut()
                .enumerate()
                .map(move |(b, t)| (format!("backbone.stage{s}.conv{b}"), t))
        })
    }

    /// Insert all parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundBackbone {
        let kernel_ids = self
            .kernels
            .iter()
            .map(|blocks| blocks.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect())
            .collect();
        BoundBackbone { kernel_ids, input_size: self.input_size, strides: self.strides() }
    }

    /// Rebind to parameter leaves already in a graph, in `params` order.
    pub fn bind_with(&self, ids: &[TensorId]) -> BoundBackbone {
        assert_eq!(ids.len(), self.num_params());
        let mut it = ids.iter().copied();
        let kernel_ids = self
            .kernels
            .iter()
            .map(|blocks| blocks.iter().map(|_| it.next().unwrap()).collect())
            .collect();
        BoundBackbone { kernel_ids, input_size: self.input_size, strides: self.strides() }
    }

    pub fn num_params(&self) -> usize {
        self.kernels.iter().map(Vec::len).sum()
    }

    fn strides(&self) -> Vec<Vec<usize>> {
        self.stages
            .iter()
            .map(|spec| {
                (0..spec.blocks)
                    .map(|b| if b == 0 && spec.downsample { 2 } else { 1 })
                    .collect()
            })
            .collect()
    }
}

impl BoundBackbone {
    /// Run the backbone on a `[3, S, S]` image node, returning the side
    /// outputs of stages 2-4. The stage-4 map is the final backbone output.
    pub fn forward(&self, g: &mut Graph, image: TensorId) -> Result<FeatureMaps> {
        let shape = g.value(image).shape().to_vec();
        if shape != [3, self.input_size, self.input_size] {
            return Err(Error::dimension(
                "backbone_forward",
                format!("expected [3, {0}, {0}], got {shape:?}", self.input_size),
            ));
        }
        let mut cur = image;
        let mut sides = [0; 5];
        for (s, blocks) in self.kernel_ids.iter().enumerate() {
            for (b, &k) in blocks.iter().enumerate() {
                let conv = g.conv2d(cur, k, self.strides[s][b], 1)?;
                cur = g.relu(conv);
            }
            sides[s] = cur;
        }
        Ok(FeatureMaps { m_s2: sides[2], m_s3: sides[3], m_s4: sides[4] })
    }
}
