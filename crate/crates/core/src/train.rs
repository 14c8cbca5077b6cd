//! Triplet sampling, the two ranking losses, and SGD with momentum, weight
//! decay and step learning-rate decay.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Tensor, TensorId};

/// An (anchor, positive, negative) index triple over a batch.
///
/// anchor and positive share a label, the negative differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Hinge margin; the sensible default scales with the code length (q/4).
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate shrinks 10x every `step_size` epochs.
    pub step_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub triplets_per_anchor: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for code length `q`.
    pub fn desk_defaults(q: usize) -> Self {
        TrainConfig {
            margin: q as f64 / 4.0,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 0.0005,
            step_size: 100,
            epochs: 200,
            batch_size: 32,
            triplets_per_anchor: 2,
            seed: 0,
        }
    }

    /// Optimizer settings for the full-scale configuration
    /// (lr 0.001, step 1800, 4000 epochs, batch 100).
    pub fn full_scale_profile(q: usize) -> Self {
        TrainConfig {
            margin: q as f64 / 4.0,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            step_size: 1800,
            epochs: 4000,
            batch_size: 100,
            triplets_per_anchor: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0
            || self.lr <= 0.0
            || self.weight_decay < 0.0
            || self.step_size == 0
            || self.epochs == 0
            || self.batch_size == 0
            || self.triplets_per_anchor == 0
        {
            return Err(Error::Config("all training parameters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.1f64.powi((epoch / self.step_size) as i32)
    }
}

/// max(0, margin + ||v_i - v_j||^2 - ||v_i - v_k||^2) as a graph node.
pub fn triplet_loss(
    g: &mut Graph,
    v_i: TensorId,
    v_j: TensorId,
    v_k: TensorId,
    margin: f64,
) -> Result<TensorId> {
    let n = g.value(v_i).len();
    if g.value(v_j).len() != n || g.value(v_k).len() != n {
        return Err(Error::dimension(
            "triplet_loss",
            format!(
                "code lengths differ: {n}, {}, {}",
                g.value(v_j).len(),
                g.value(v_k).len()
            ),
        ));
    }
    let d_pos = g.squared_distance(v_i, v_j)?;
    let d_neg = g.squared_distance(v_i, v_k)?;
    let diff = g.sub(d_pos, d_neg)?;
    let shifted = g.add_scalar(diff, margin);
    Ok(g.relu(shifted))
}

/// Mean over triplets of the per-triplet losses (one code space).
fn mean_loss(g: &mut Graph, per_triplet: &[TensorId]) -> Result<TensorId> {
    if per_triplet.is_empty() {
        return Err(Error::contract("combined_loss", "empty triplet batch"));
    }
    let mut acc = per_triplet[0];
    for &t in &per_triplet[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / per_triplet.len() as f64))
}

/// Combined objective: mean over M triplets of hinge(v) + hinge(v^c).
///
/// `codes` holds the (v, v_c) node pair per image; triplet indices refer into
/// it. Returns (loss_vertical, loss_consensus, loss_combined).
pub fn combined_loss(
    g: &mut Graph,
    codes: &[(TensorId, TensorId)],
    triplets: &[Triplet],
    margin: f64,
) -> Result<(TensorId, TensorId, TensorId)> {
    if triplets.is_empty() {
        return Err(Error::contract("combined_loss", "empty triplet batch"));
    }
    let mut vert = Vec::with_capacity(triplets.len());
    let mut cons = Vec::with_capacity(triplets.len());
    for t in triplets {
        let (vi, ci) = codes[t.anchor];
        let (vj, cj) = codes[t.positive];
        let (vk, ck) = codes[t.negative];
        vert.push(triplet_loss(g, vi, vj, vk, margin)?);
        cons.push(triplet_loss(g, ci, cj, ck, margin)?);
    }
    let loss_v = mean_loss(g, &vert)?;
    let loss_c = mean_loss(g, &cons)?;
    let total = g.add(loss_v, loss_c)?;
    Ok((loss_v, loss_c, total))
}

/// Sample up to `per_anchor` triplets per anchor from batch labels.
///
/// Anchors without a positive or negative are skipped; an all-one-class or
/// all-distinct batch yields an empty list.
pub fn sample_triplets(labels: &[u32], per_anchor: usize, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let positives: Vec<usize> =
            (0..labels.len()).filter(|&i| i != a && labels[i] == la).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != la).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        for _ in 0..per_anchor {
            out.push(Triplet {
                anchor: a,
                positive: positives[rng.gen_range(0..positives.len())],
                negative: negatives[rng.gen_range(0..negatives.len())],
            });
        }
    }
    out
}

/// Momentum buffers and schedule position, aligned with `Model::params` order.
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    pub iterations: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        OptimizerState {
            velocity: model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            iterations: 0,
        }
    }

    /// v = momentum*v + (grad + wd*param); param -= lr * v
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &[Vec<f64>],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        let mut params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::contract(
                "sgd_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((v, g), (_, p)) in self.velocity.iter_mut().zip(grads).zip(params.iter_mut()) {
            let data = p.data_mut();
            for i in 0..data.len() {
                v[i] = cfg.momentum * v[i] + g[i] + cfg.weight_decay * data[i];
                data[i] -= lr * v[i];
            }
        }
        self.iterations += 1;
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub epoch: usize,
    pub iter: u64,
    pub loss_vertical: f64,
    pub loss_consensus: f64,
    pub loss_combined: f64,
    pub lr: f64,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,iter,loss_vertical,loss_consensus,loss_combined,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.iter, r.loss_vertical, r.loss_consensus, r.loss_combined, r.lr
        ));
    }
    out
}

/// Class-balanced batch of image indices: roughly batch/classes per class,
/// sampled without replacement within each class per batch.
fn balanced_batch(by_class: &[Vec<usize>], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let per_class = (batch_size + by_class.len() - 1) / by_class.len();
    let mut batch = Vec::with_capacity(batch_size);
    for members in by_class {
        let mut pool = members.clone();
        pool.shuffle(rng);
        batch.extend(pool.into_iter().take(per_class.min(members.len())));
    }
    batch.truncate(batch_size);
    batch
}

/// Train the model on `(image, label)` pairs, mutating its parameters.
///
/// Returns the per-batch loss trace. Fully reproducible from `cfg.seed`.
/// Divergence cutoff for parameter magnitudes; 1e40^6 is still well below
/// the f64 overflow threshold.
const PARAM_LIMIT: f64 = 1e40;

pub fn train(model: &mut Model, dataset: &[(Tensor, u32)], cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let mut classes: Vec<u32> = dataset.iter().map(|(_, l)| *l).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 classes, dataset has {}",
            classes.len()
        )));
    }
    let by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..dataset.len()).filter(|&i| dataset[i].1 == c).collect())
        .collect();
    let batches_per_epoch = (dataset.len() + cfg.batch_size - 1) / cfg.batch_size;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for _ in 0..batches_per_epoch {
            let batch = balanced_batch(&by_class, cfg.batch_size, &mut rng);
            let labels: Vec<u32> = batch.iter().map(|&i| dataset[i].1).collect();
            let triplets = sample_triplets(&labels, cfg.triplets_per_anchor, &mut rng);
            if triplets.is_empty() {
                continue;
            }
            // catch divergence while parameters are still small enough that
            // the upcoming forward's products of six layers stay finite
            for (name, p) in model.params() {
                if let Some(&bad) = p.data().iter().find(|v| !v.is_finite() || v.abs() > PARAM_LIMIT) {
                    return Err(Error::Numeric(format!(
                        "training diverged at epoch {epoch}: parameter {name} reached {bad:e}"
                    )));
                }
            }
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let param_ids = bound.param_ids();
            let mut codes = Vec::with_capacity(batch.len());
            for &i in &batch {
                let img = g.leaf(dataset[i].0.clone(), false);
                let acts = bound.forward(&mut g, img)?;
                codes.push((acts.v, acts.v_c));
            }
            let (lv, lc, total) = combined_loss(&mut g, &codes, &triplets, cfg.margin)?;
            let (lv, lc, lt) =
                (g.value(lv).data()[0], g.value(lc).data()[0], g.value(total).data()[0]);
            if !lt.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}: {lt}")));
            }
            g.backward(total)?;
            let grads: Vec<Vec<f64>> = param_ids
                .iter()
                .map(|&id| {
                    g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(id).len()])
                })
                .collect();
            state.step(model, &grads, lr, cfg)?;
            trace.push(TraceRow {
                epoch,
                iter: state.iterations,
                loss_vertical: lv,
                loss_consensus: lc,
                loss_combined: lt,
                lr,
            });
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::StageSpec;
    use crate::model::Model;
    use crate::pyramid::HashConfig;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> TensorId {
        g.leaf(Tensor::vector(v.to_vec()), false)
    }

    #[test]
    fn triplet_loss_hand_cases() {
        let mut g = Graph::new();
        let zero = vec_leaf(&mut g, &[0.0; 4]);
        let ones = vec_leaf(&mut g, &[1.0; 4]);
        // margin 2, d_pos 0, d_neg 4 -> 0
        let l = triplet_loss(&mut g, zero, zero, ones, 2.0).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);

        // d_neg 1 -> max(0, 2 + 0 - 1) = 1
        let near = vec_leaf(&mut g, &[1.0, 0.0, 0.0, 0.0]);
        let l = triplet_loss(&mut g, zero, zero, near, 2.0).unwrap();
        assert_eq!(g.value(l).data(), &[1.0]);

        // v_j == v_k -> loss == margin
        let l = triplet_loss(&mut g, zero, ones, ones, 2.0).unwrap();
        assert_eq!(g.value(l).data(), &[2.0]);

        let short = vec_leaf(&mut g, &[0.5, 0.5]);
        assert!(triplet_loss(&mut g, zero, zero, short, 2.0).is_err());
    }

    #[test]
    fn triplet_loss_bounded_by_margin_plus_q() {
        let mut g = Graph::new();
        let q = 8;
        let a = vec_leaf(&mut g, &vec![0.0; q]);
        let b = vec_leaf(&mut g, &vec![1.0; q]);
        let l = triplet_loss(&mut g, a, b, a, 2.0).unwrap();
        assert!(g.value(l).data()[0] <= 2.0 + q as f64);
    }

    #[test]
    fn combined_loss_is_mean() {
        // two triplets with per-triplet combined sums 1.0 and 3.0 -> 2.0
        let mut g = Graph::new();
        let zero = vec_leaf(&mut g, &[0.0; 4]);
        let e1 = vec_leaf(&mut g, &[1.0, 0.0, 0.0, 0.0]);
        let e3 = vec_leaf(&mut g, &[1.0, 1.0, 1.0, 0.0]);
        // codes: (v, v_c) identical so each space contributes half the sum
        let codes = vec![(zero, zero), (zero, zero), (e1, e1), (e3, e3)];
        // triplet A: anchor 0, pos 1, neg 2 with margin 1.5: max(0, 1.5 - 1) = 0.5 each space
        // triplet B: anchor 0, pos 1, neg 3: max(0, 1.5 - 3) = 0 each space
        let triplets = vec![
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 0, positive: 1, negative: 3 },
        ];
        let (lv, lc, lt) = combined_loss(&mut g, &codes, &triplets, 1.5).unwrap();
        assert_eq!(g.value(lv).data(), &[0.25]);
        assert_eq!(g.value(lc).data(), &[0.25]);
        assert_eq!(g.value(lt).data(), &[0.5]);

        assert!(combined_loss(&mut g, &codes, &[], 1.5).is_err());
    }

    #[test]
    fn sample_triplets_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_triplets(&[0, 0, 1, 1], 1, &mut rng);
        assert_eq!(t.len(), 4);
        for tr in &t {
            assert_ne!(tr.anchor, tr.positive);
        }
        assert!(sample_triplets(&[0, 0, 0, 0], 1, &mut rng).is_empty());

        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(sample_triplets(&[0, 0, 1, 1, 2], 3, &mut r1), sample_triplets(&[0, 0, 1, 1, 2], 3, &mut r2));
    }

    fn tiny_model(seed: u64) -> Model {
        let stages = [2usize, 2, 3, 3, 4]
            .iter()
            .map(|&c| StageSpec { out_channels: c, blocks: 1, downsample: true })
            .collect();
        Model::build(stages, 32, HashConfig::new(8).unwrap(), seed).unwrap()
    }

    fn tiny_dataset(n_per_class: usize) -> Vec<(Tensor, u32)> {
        let mut out = Vec::new();
        for label in 0..2u32 {
            for i in 0..n_per_class {
                let mut t = Tensor::zeros(vec![3, 32, 32]);
                for (j, v) in t.data_mut().iter_mut().enumerate() {
                    *v = (((j * (label as usize * 13 + 7) + i * 31) % 256) as f64) / 255.0;
                }
                out.push((t, label));
            }
        }
        out
    }

    #[test]
    fn sgd_step_hand_cases() {
        let mut model = tiny_model(0);
        let mut cfg = TrainConfig::desk_defaults(8);
        cfg.momentum = 0.0;
        cfg.weight_decay = 0.0;
        cfg.lr = 0.1;
        let mut state = OptimizerState::new(&model);
        let before: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let grads: Vec<Vec<f64>> = before.iter().map(|d| vec![1.0; d.len()]).collect();
        state.step(&mut model, &grads, 0.1, &cfg).unwrap();
        for ((_, t), b) in model.params().iter().zip(&before) {
            for (after, before) in t.data().iter().zip(b) {
                assert!((after - (before - 0.1)).abs() < 1e-15);
            }
        }

        // zero grads, zero wd: parameters unchanged
        let snapshot: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let zeros: Vec<Vec<f64>> = snapshot.iter().map(|d| vec![0.0; d.len()]).collect();
        let mut state = OptimizerState::new(&model);
        state.step(&mut model, &zeros, 0.1, &cfg).unwrap();
        state.step(&mut model, &zeros, 0.1, &cfg).unwrap();
        for ((_, t), b) in model.params().iter().zip(&snapshot) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn lr_schedule_matches_step_decay() {
        let mut cfg = TrainConfig::desk_defaults(16);
        cfg.lr = 0.001;
        cfg.step_size = 1800;
        assert_eq!(cfg.lr_at(0), 0.001);
        assert!((cfg.lr_at(1800) - 0.0001).abs() < 1e-12);
        assert!((cfg.lr_at(3600) - 0.00001).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let dataset = tiny_dataset(4);
        let mut cfg = TrainConfig::desk_defaults(8);
        cfg.epochs = 50;
        cfg.batch_size = 8;
        cfg.step_size = 40;
        cfg.seed = 3;

        let mut m1 = tiny_model(5);
        let t1 = train(&mut m1, &dataset, &cfg).unwrap();
        let head: f64 = t1.iter().take(3).map(|r| r.loss_combined).sum::<f64>() / 3.0;
        let tail: f64 = t1.iter().rev().take(3).map(|r| r.loss_combined).sum::<f64>() / 3.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");

        let mut m2 = tiny_model(5);
        let t2 = train(&mut m2, &dataset, &cfg).unwrap();
        assert_eq!(t1.len(), t2.len());
        for (a, b) in t1.iter().zip(&t2) {
            assert_eq!(a.loss_combined, b.loss_combined);
        }
        for ((_, p1), (_, p2)) in m1.params().iter().zip(m2.params().iter()) {
            assert_eq!(p1.data(), p2.data());
        }
    }

    #[test]
    fn training_rejects_one_class() {
        let dataset: Vec<(Tensor, u32)> =
            tiny_dataset(3).into_iter().map(|(t, _)| (t, 0)).collect();
        let mut model = tiny_model(1);
        let cfg = TrainConfig::desk_defaults(8);
        assert!(matches!(train(&mut model, &dataset, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epoch_equivalent_lr_keeps_params() {
        // lr = 0 is rejected by validate; emulate via momentum-free step with lr 0
        let mut model = tiny_model(2);
        let cfg = TrainConfig::desk_defaults(8);
        let before: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let grads: Vec<Vec<f64>> = before.iter().map(|d| vec![1.0; d.len()]).collect();
        let mut state = OptimizerState::new(&model);
        state.step(&mut model, &grads, 0.0, &cfg).unwrap();
        for ((_, t), b) in model.params().iter().zip(&before) {
            assert_eq!(t.data(), &b[..]);
        }
    }
}
