use std::time::Instant;

use fph_core::backbone::{desk_stages, Backbone};
use fph_core::model::Model;
use fph_core::pyramid::HashConfig;
use fph_core::tensor::{Graph, Tensor};
use fph_core::train::{combined_loss, Triplet};

fn main() {
    let model = Model::build(desk_stages(), 64, HashConfig::new(16).unwrap(), 0).unwrap();
    let mut img = Tensor::zeros(vec![3, 64, 64]);
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = ((i * 7919) % 255) as f64 / 255.0;
    }

    // forward only
    let t0 = Instant::now();
    let reps = 32;
    for _ in 0..reps {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let leaf = g.leaf(img.clone(), false);
        bound.forward(&mut g, leaf).unwrap();
    }
    println!("forward only: {:.2} ms/img", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // full batch fwd+bwd like training
    let t0 = Instant::now();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let ids = bound.param_ids();
    let mut codes = Vec::new();
    for _ in 0..32 {
        let leaf = g.leaf(img.clone(), false);
        let a = bound.forward(&mut g, leaf).unwrap();
        codes.push((a.v, a.v_c));
    }
    let t_fwd = t0.elapsed();
    let triplets: Vec<Triplet> = (0..64)
        .map(|i| Triplet { anchor: i % 32, positive: (i + 1) % 32, negative: (i + 2) % 32 })
        .collect();
    let (_, _, total) = combined_loss(&mut g, &codes, &triplets, 4.0).unwrap();
    let t1 = Instant::now();
    g.backward(total).unwrap();
    let t_bwd = t1.elapsed();
    let t2 = Instant::now();
    let _grads: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
    println!(
        "batch32 fwd {:.1} ms, bwd {:.1} ms, grad copy {:.1} ms",
        t_fwd.as_secs_f64() * 1000.0,
        t_bwd.as_secs_f64() * 1000.0,
        t2.elapsed().as_secs_f64() * 1000.0
    );
}
