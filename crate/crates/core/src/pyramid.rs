//! Vertical hashing head, lateral hashing modules, two-mediator consensus
//! fusion and binarization.
//!
//! Stage t is pooled to a 2^(4-t) x 2^(4-t) map, flattened and mapped by a
//! fully connected layer to a hash feature of q * 2^(4-t) elements. The
//! stage-4 feature is shared between the vertical head and the consensus
//! chain, so each image costs exactly one FC evaluation per stage. The two
//! mediators each halve the lower feature by pairwise average pooling and add
//! the next stage's feature, ending in the q-dimensional consensus feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureMaps;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, TensorId};

/// Code length configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashConfig {
    pub q: usize,
}

impl HashConfig {
    pub fn new(q: usize) -> Result<Self> {
        if q < 8 || q % 4 != 0 {
            return Err(Error::Config(format!("q must be >= 8 and divisible by 4, got {q}")));
        }
        Ok(HashConfig { q })
    }
}

/// Per-stage fully connected hashing heads.
///
/// Output dimensions are q for stage 4, 2q for stage 3 and 4q for stage 2;
/// parameters are independent per stage.
#[derive(Debug, Clone)]
pub struct PyramidHeads {
    pub q: usize,
    fc: [(Tensor, Tensor); 3], // (W, b) for stages 4, 3, 2
}

/// Pooled-side-length for stage t: 1, 2, 4 for stages 4, 3, 2.
pub fn pool_side(stage: usize) -> usize {
    1 << (4 - stage)
}

impl PyramidHeads {
    /// Initialize heads for a backbone with stage channels `(c2, c3, c4)`.
    pub fn build(cfg: HashConfig, c2: usize, c3: usize, c4: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = cfg.q;
        let mut fc_for = |out_dim: usize, in_dim: usize| {
            let bound = (6.0 / in_dim as f64).sqrt();
            let w: Vec<f64> = (0..out_dim * in_dim).map(|_| rng.gen_range(-bound..bound)).collect();
            (
                Tensor::new(vec![out_dim, in_dim], w).expect("fc shape"),
                Tensor::zeros(vec![out_dim]),
            )
        };
        let fc_s4 = fc_for(q, c4);
        let fc_s3 = fc_for(2 * q, c3 * pool_side(3) * pool_side(3));
        let fc_s2 = fc_for(4 * q, c2 * pool_side(2) * pool_side(2));
        PyramidHeads { q, fc: [fc_s4, fc_s3, fc_s2] }
    }

    pub fn params(&self) -> impl Iterator<Item = (String, &Tensor)> {
        [4usize, 3, 2].into_iter().zip(&self.fc).flat_map(|(stage, (w, b))| {
            [(format!("heads.fc_s{stage}.weight"), w), (format!("heads.fc_s{stage}.bias"), b)]
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        [4usize, 3, 2].into_iter().zip(&mut self.fc).flat_map(|(stage, (w, b))| {
            [(format!("heads.fc_s{stage}.weight"), w), (format!("heads.fc_s{stage}.bias"), b)]
        })
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundHeads {
        let ids = self
            .fc
            .iter()
            .map(|(w, b)| (g.leaf(w.clone(), requires_grad), g.leaf(b.clone(), requires_grad)))
            .collect::<Vec<_>>();
        BoundHeads { q: self.q, fc: [ids[0], ids[1], ids[2]] }
    }

    /// Rebind to parameter leaves already in a graph, in `params` order.
    pub fn bind_with(&self, ids: &[TensorId]) -> BoundHeads {
        assert_eq!(ids.len(), 6);
        BoundHeads { q: self.q, fc: [(ids[0], ids[1]), (ids[2], ids[3]), (ids[4], ids[5])] }
    }
}

/// Parameter leaves of the heads inside one graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundHeads {
    pub q: usize,
    fc: [(TensorId, TensorId); 3],
}

/// All intermediate hash features and codes for one image, as node ids.
#[derive(Debug, Clone, Copy)]
pub struct PyramidActivations {
    pub a_s2: TensorId,
    pub a_s3: TensorId,
    pub a_s4: TensorId,
    pub f_s2: TensorId,
    pub f_s3: TensorId,
    pub f_s4: TensorId,
    pub f_m1: TensorId,
    pub f_m2: TensorId,
    /// Vertical hash code, sigmoid(f_s4), in (0,1)^q.
    pub v: TensorId,
    /// Consensus hash code, sigmoid(f_m2), in (0,1)^q.
    pub v_c: TensorId,
}

impl BoundHeads {
    /// Leaf ids in `PyramidHeads::params` order.
    pub fn param_ids(&self) -> Vec<TensorId> {
        self.fc.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Pool a stage map to its target side and apply the stage FC.
    fn stage_feature(&self, g: &mut Graph, m: TensorId, stage: usize) -> Result<(TensorId, TensorId)> {
        let side = pool_side(stage);
        let a = g.avgpool2d(m, side, side)?;
        let flat = g.flatten(a);
        let (w, b) = self.fc[4 - stage];
        let f = g.affine(flat, w, b)?;
        Ok((a, f))
    }

    /// Pairwise-average-pool the lower feature and add the higher one.
    pub fn mediator(&self, g: &mut Graph, f_low: TensorId, f_high: TensorId) -> Result<TensorId> {
        if g.value(f_low).len() != 2 * g.value(f_high).len() {
            return Err(Error::dimension(
                "mediator",
                format!(
                    "low feature has {} elements, expected twice the high feature's {}",
                    g.value(f_low).len(),
                    g.value(f_high).len()
                ),
            ));
        }
        let pooled = g.avgpool1d_pairs(f_low)?;
        g.add(pooled, f_high)
    }

    /// Full per-image pyramid pass: both codes plus all intermediates.
    pub fn forward(&self, g: &mut Graph, maps: FeatureMaps) -> Result<PyramidActivations> {
        let (a_s4, f_s4) = self.stage_feature(g, maps.m_s4, 4)?;
        let v = g.sigmoid(f_s4);
        let (a_s3, f_s3) = self.stage_feature(g, maps.m_s3, 3)?;
        let (a_s2, f_s2) = self.stage_feature(g, maps.m_s2, 2)?;
        let f_m1 = self.mediator(g, f_s2, f_s3)?;
        // stage 4's feature is shared, not recomputed
        let f_m2 = self.mediator(g, f_m1, f_s4)?;
        let v_c = g.sigmoid(f_m2);
        Ok(PyramidActivations { a_s2, a_s3, a_s4, f_s2, f_s3, f_s4, f_m1, f_m2, v, v_c })
    }
}

/// A q-bit code packed little-endian into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    q: usize,
    words: Vec<u64>,
}

pub fn words_per_code(q: usize) -> usize {
    (q + 63) / 64
}

impl BinaryCode {
    /// Build from packed words; padding bits beyond `q` must be zero.
    pub fn from_words(q: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_per_code(q) {
            return Err(Error::contract(
                "binary_code",
                format!("q={q} needs {} words, got {}", words_per_code(q), words.len()),
            ));
        }
        let pad = words.len() * 64 - q;
        if pad > 0 && words[words.len() - 1] >> (64 - pad) != 0 {
            return Err(Error::contract("binary_code", "padding bits must be zero"));
        }
        Ok(BinaryCode { q, words })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.q).map(|i| self.bit(i))
    }
}

/// Threshold a code vector at 0.5 (0.5 itself maps to bit 1) and pack.
pub fn binarize(v_c: &[f64]) -> Result<BinaryCode> {
    if let Some(bad) = v_c.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract("binarize", format!("element {bad} outside [0,1]")));
    }
    let q = v_c.len();
    let mut words = vec![0u64; words_per_code(q)];
    for (i, &v) in v_c.iter().enumerate() {
        if v >= 0.5 {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    Ok(BinaryCode { q, words })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{desk_stages, Backbone};

    fn forward_with(
        q: usize,
        seed: u64,
        image: Tensor,
    ) -> (Graph, PyramidActivations) {
        let net = Backbone::build(desk_stages(), 64, seed).unwrap();
        let heads = PyramidHeads::build(
            HashConfig::new(q).unwrap(),
            net.stage_channels(2),
            net.stage_channels(3),
            net.stage_channels(4),
            seed + 1,
        );
        let mut g = Graph::new();
        let bb = net.bind(&mut g, false);
        let bh = heads.bind(&mut g, false);
        let img = g.leaf(image, false);
        let maps = bb.forward(&mut g, img).unwrap();
        let acts = bh.forward(&mut g, maps).unwrap();
        (g, acts)
    }

    #[test]
    fn dimension_chain() {
        for q in [16usize, 32, 48, 64] {
            let (g, acts) = forward_with(q, 9, Tensor::zeros(vec![3, 64, 64]));
            assert_eq!(g.value(acts.f_s2).len(), 4 * q);
            assert_eq!(g.value(acts.f_s3).len(), 2 * q);
            assert_eq!(g.value(acts.f_m1).len(), 2 * q);
            assert_eq!(g.value(acts.f_s4).len(), q);
            assert_eq!(g.value(acts.f_m2).len(), q);
            assert_eq!(g.value(acts.v).len(), q);
            assert_eq!(g.value(acts.v_c).len(), q);
        }
    }

    #[test]
    fn zero_weights_give_half_codes() {
        let q = 16;
        let net = Backbone::build(desk_stages(), 64, 0).unwrap();
        let mut heads = PyramidHeads::build(HashConfig::new(q).unwrap(), 32, 64, 128, 0);
        for (_, t) in heads.params_mut() {
            t.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let bb = net.bind(&mut g, false);
        let bh = heads.bind(&mut g, false);
        let img = g.leaf(Tensor::zeros(vec![3, 64, 64]), false);
        let maps = bb.forward(&mut g, img).unwrap();
        let acts = bh.forward(&mut g, maps).unwrap();
        assert!(g.value(acts.v).data().iter().all(|&x| x == 0.5));
        assert!(g.value(acts.v_c).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn mediator_hand_case() {
        let heads = PyramidHeads::build(HashConfig::new(8).unwrap(), 4, 4, 4, 0);
        let mut g = Graph::new();
        let bh = heads.bind(&mut g, false);
        let low = g.leaf(Tensor::vector(vec![1.0, 3.0, 2.0, 2.0, 0.0, 4.0, 5.0, 1.0]), false);
        let high = g.leaf(Tensor::vector(vec![1.0, 1.0, 1.0, 1.0]), false);
        let out = bh.mediator(&mut g, low, high).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 3.0, 3.0, 4.0]);

        let zeros = g.leaf(Tensor::vector(vec![0.0; 8]), false);
        let out = bh.mediator(&mut g, zeros, high).unwrap();
        assert_eq!(g.value(out).data(), g.value(high).data());

        let err = bh.mediator(&mut g, high, low).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn codes_strictly_inside_unit_interval() {
        let mut img = Tensor::zeros(vec![3, 64, 64]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 2654435761) % 256) as f64 / 255.0;
        }
        let (g, acts) = forward_with(16, 5, img);
        for &id in [acts.v, acts.v_c].iter() {
            assert!(g.value(id).data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn consensus_depends_on_every_stage() {
        // Perturb each side output and watch v_c move.
        let q = 16;
        let net = Backbone::build(desk_stages(), 64, 11).unwrap();
        let heads = PyramidHeads::build(HashConfig::new(q).unwrap(), 32, 64, 128, 12);
        let mut img = Tensor::zeros(vec![3, 64, 64]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 131) % 255) as f64 / 255.0;
        }
        let base = {
            let mut g = Graph::new();
            let bb = net.bind(&mut g, false);
            let bh = heads.bind(&mut g, false);
            let im = g.leaf(img.clone(), false);
            let maps = bb.forward(&mut g, im).unwrap();
            let acts = bh.forward(&mut g, maps).unwrap();
            g.value(acts.v_c).data().to_vec()
        };
        for stage in [2usize, 3, 4] {
            let mut g = Graph::new();
            let bb = net.bind(&mut g, false);
            let bh = heads.bind(&mut g, false);
            let im = g.leaf(img.clone(), false);
            let maps = bb.forward(&mut g, im).unwrap();
            let bumped = {
                let mut m = g.value(match stage {
                    2 => maps.m_s2,
                    3 => maps.m_s3,
                    _ => maps.m_s4,
                })
                .clone();
                m.data_mut()[0] += 1.0;
                g.leaf(m, false)
            };
            let maps = match stage {
                2 => FeatureMaps { m_s2: bumped, ..maps },
                3 => FeatureMaps { m_s3: bumped, ..maps },
                _ => FeatureMaps { m_s4: bumped, ..maps },
            };
            let acts = bh.forward(&mut g, maps).unwrap();
            assert_ne!(g.value(acts.v_c).data(), &base[..], "stage {stage} has no vote");
        }
    }

    #[test]
    fn binarize_boundary_and_packing() {
        let c = binarize(&[0.5, 0.49, 0.51]).unwrap();
        assert_eq!(c.bits().collect::<Vec<_>>(), vec![true, false, true]);

        let c = binarize(&[0.5; 16]).unwrap();
        assert!(c.bits().all(|b| b));

        // idempotent through unpack/repack
        let vals: Vec<f64> = (0..48).map(|i| if i % 3 == 0 { 0.9 } else { 0.1 }).collect();
        let c = binarize(&vals).unwrap();
        let unpacked: Vec<f64> = c.bits().map(|b| if b { 1.0 } else { 0.0 }).collect();
        assert_eq!(binarize(&unpacked).unwrap(), c);

        assert!(binarize(&[1.5]).is_err());
    }

    #[test]
    fn binarize_tracks_feature_sign() {
        let f: Vec<f64> = vec![-3.0, -0.2, 0.0, 0.2, 3.0];
        let mut g = Graph::new();
        let id = g.leaf(Tensor::vector(f.clone()), false);
        let v = g.sigmoid(id);
        let code = binarize(g.value(v).data()).unwrap();
        for (i, &x) in f.iter().enumerate() {
            assert_eq!(code.bit(i), x >= 0.0);
        }
    }

    #[test]
    fn rejects_bad_q() {
        assert!(HashConfig::new(6).is_err());
        assert!(HashConfig::new(18).is_err());
        assert!(HashConfig::new(16).is_ok());
    }
}
