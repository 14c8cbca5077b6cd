//! Finite-difference verification suite for every differentiable operation
//! and for the full training objective.
//!
//! Each op is checked on 10 seeds at eps = 1e-5 against a tolerance of 1e-6.
//! Samples landing within 1e-3 of a relu/hinge kink are rejected and redrawn,
//! so central differences never straddle a nondifferentiable point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::StageSpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pyramid::HashConfig;
use crate::tensor::{grad_check, Graph, Tensor, TensorId};
use crate::train::{combined_loss, triplet_loss, Triplet};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
pub const SEEDS_PER_OP: u64 = 10;
const MAX_REDRAWS: u64 = 200;

/// All checkable op names, in report order.
pub const ALL_OPS: &[&str] = &[
    "affine",
    "conv2d",
    "avgpool2d",
    "avgpool1d_pairs",
    "sigmoid",
    "relu",
    "add",
    "triplet_loss",
    "combined_loss",
    "end_to_end",
];

/// Outcome for one op across all seeds.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("random tensor shape")
}

/// Run one op's check across seeds, redrawing kink-adjacent samples.
fn check_op<F, G>(sample: F, program: G) -> Result<f64>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    G: Fn(&mut Graph, &[TensorId]) -> Result<TensorId> + Copy,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS_PER_OP {
        let mut accepted = false;
        for redraw in 0..MAX_REDRAWS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * MAX_REDRAWS + redraw);
            let inputs = sample(&mut rng);
            let report = grad_check(program, &inputs, EPS)?;
            if report.near_kink {
                continue;
            }
            worst = worst.max(report.max_relative_error);
            accepted = true;
            break;
        }
        if !accepted {
            return Err(Error::Numeric(format!("could not sample away from kinks after {MAX_REDRAWS} redraws")));
        }
    }
    Ok(worst)
}

fn tiny_model(seed: u64) -> Model {
    let stages = [2usize, 2, 3, 3, 4]
        .iter()
        .map(|&c| StageSpec { out_channels: c, blocks: 1, downsample: true })
        .collect();
    Model::build(stages, 32, HashConfig::new(8).unwrap(), seed).expect("tiny config is valid")
}

fn check_named(name: &'static str) -> Result<f64> {
    match name {
        "affine" => check_op(
            |rng| {
                vec![
                    rand_tensor(rng, &[5], -1.0, 1.0),
                    rand_tensor(rng, &[4, 5], -1.0, 1.0),
                    rand_tensor(rng, &[4], -1.0, 1.0),
                ]
            },
            |g, ids| {
                let y = g.affine(ids[0], ids[1], ids[2])?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            },
        ),
        "conv2d" => check_op(
            |rng| {
                vec![
                    rand_tensor(rng, &[2, 6, 6], -1.0, 1.0),
                    rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0),
                ]
            },
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], 2, 1)?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            },
        ),
        "avgpool2d" => check_op(
            |rng| vec![rand_tensor(rng, &[3, 4, 4], -1.0, 1.0)],
            |g, ids| {
                let y = g.avgpool2d(ids[0], 2, 2)?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            },
        ),
        "avgpool1d_pairs" => check_op(
            |rng| vec![rand_tensor(rng, &[12], -1.0, 1.0)],
            |g, ids| {
                let y = g.avgpool1d_pairs(ids[0])?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            },
        ),
        "sigmoid" => check_op(
            |rng| vec![rand_tensor(rng, &[9], -4.0, 4.0)],
            |g, ids| {
                let y = g.sigmoid(ids[0]);
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        "relu" => check_op(
            |rng| vec![rand_tensor(rng, &[9], -2.0, 2.0)],
            |g, ids| {
                let y = g.relu(ids[0]);
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
        ),
        "add" => check_op(
            |rng| {
                vec![rand_tensor(rng, &[7], -1.0, 1.0), rand_tensor(rng, &[7], -1.0, 1.0)]
            },
            |g, ids| {
                let y = g.add(ids[0], ids[1])?;
                let s = g.sigmoid(y);
                Ok(g.sum(s))
            },
        ),
        "triplet_loss" => check_op(
            |rng| {
                (0..3).map(|_| rand_tensor(rng, &[8], 0.05, 0.95)).collect()
            },
            |g, ids| triplet_loss(g, ids[0], ids[1], ids[2], 2.0),
        ),
        "combined_loss" => check_op(
            |rng| (0..6).map(|_| rand_tensor(rng, &[8], 0.05, 0.95)).collect(),
            |g, ids| {
                let codes =
                    vec![(ids[0], ids[1]), (ids[2], ids[3]), (ids[4], ids[5])];
                let triplets = [Triplet { anchor: 0, positive: 1, negative: 2 }];
                let (_, _, total) = combined_loss(g, &codes, &triplets, 2.0)?;
                Ok(total)
            },
        ),
        "end_to_end" => {
            // Gradient of the full combined objective on one random triplet
            // w.r.t. every network parameter.
            let mut worst: f64 = 0.0;
            for seed in 0..SEEDS_PER_OP {
                let mut accepted = false;
                for redraw in 0..MAX_REDRAWS {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed * MAX_REDRAWS + redraw);
                    let model = tiny_model(rng.gen());
                    let images: Vec<Tensor> =
                        (0..3).map(|_| rand_tensor(&mut rng, &[3, 32, 32], 0.0, 1.0)).collect();
                    let params: Vec<Tensor> =
                        model.params().iter().map(|(_, t)| (*t).clone()).collect();
                    let report = grad_check(
                        |g, ids| {
                            let bound = model.bind_with(ids);
                            let mut codes = Vec::with_capacity(3);
                            for img in &images {
                                let leaf = g.leaf(img.clone(), false);
                                let acts = bound.forward(g, leaf)?;
                                codes.push((acts.v, acts.v_c));
                            }
                            let triplets = [Triplet { anchor: 0, positive: 1, negative: 2 }];
                            let (_, _, total) = combined_loss(g, &codes, &triplets, 2.0)?;
                            Ok(total)
                        },
                        &params,
                        EPS,
                    )?;
                    if report.near_kink {
                        continue;
                    }
                    worst = worst.max(report.max_relative_error);
                    accepted = true;
                    break;
                }
                if !accepted {
                    return Err(Error::Numeric(
                        "end-to-end check could not sample away from kinks".into(),
                    ));
                }
            }
            Ok(worst)
        }
        other => Err(Error::Config(format!("unknown op {other:?}"))),
    }
}

/// Run the suite for the named ops (or all of them).
pub fn run_suite(ops: &[&str]) -> Result<Vec<OpReport>> {
    let selected: Vec<&'static str> = if ops.is_empty() {
        ALL_OPS.to_vec()
    } else {
        let mut out = Vec::new();
        for &want in ops {
            match ALL_OPS.iter().find(|&&n| n == want) {
                Some(&n) => out.push(n),
                None => return Err(Error::Config(format!("unknown op {want:?}; known: {ALL_OPS:?}"))),
            }
        }
        out
    };
    selected
        .into_iter()
        .map(|name| {
            let err = check_named(name)?;
            Ok(OpReport { name, max_relative_error: err, passed: err <= TOLERANCE })
        })
        .collect()
}
