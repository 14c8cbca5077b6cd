//! Hyperparameter probe for the synthetic retrieval protocol: trains one
//! model and prints the consensus/vertical MAP.
//!
//! Usage: protocol_map <seed> <epochs> <margin> <lr> <triplets_per_anchor>

use fph_core::backbone::desk_stages;
use fph_core::data::{gen_synthetic, load_split, Split, SyntheticSpec};
use fph_core::model::Model;
use fph_core::pyramid::HashConfig;
use fph_core::retrieval::{mean_average_precision, BinaryCodeSet};
use fph_core::train::{self, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args[1].parse().unwrap();
    let epochs: usize = args[2].parse().unwrap();
    let margin: f64 = args[3].parse().unwrap();
    let lr: f64 = args[4].parse().unwrap();
    let tpa: usize = args[5].parse().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_synthetic(&SyntheticSpec::default(), dir.path()).unwrap();
    let train_set = load_split(&manifest, Split::Train, 64).unwrap();
    let query_set = load_split(&manifest, Split::Query, 64).unwrap();

    let mut model = Model::build(desk_stages(), 64, HashConfig::new(16).unwrap(), seed).unwrap();
    let cfg = TrainConfig {
        margin,
        lr,
        epochs,
        triplets_per_anchor: tpa,
        seed,
        ..TrainConfig::desk_defaults(16)
    };
    let trace = train::train(&mut model, &train_set, &cfg).unwrap();

    let encode = |images: &[(fph_core::tensor::Tensor, u32)]| {
        let mut c = BinaryCodeSet::new(16);
        let mut v = BinaryCodeSet::new(16);
        for (img, label) in images {
            let (cc, vv) = model.encode_image(img).unwrap();
            c.push(&cc, *label).unwrap();
            v.push(&vv, *label).unwrap();
        }
        (c, v)
    };
    let (db_c, db_v) = encode(&train_set);
    let (q_c, q_v) = encode(&query_set);
    println!(
        "seed {seed} epochs {epochs} margin {margin} lr {lr} tpa {tpa}: map_c {:.4} map_v {:.4} final_loss {:.4}",
        mean_average_precision(&q_c, &db_c).unwrap(),
        mean_average_precision(&q_v, &db_v).unwrap(),
        trace.last().map(|r| r.loss_combined).unwrap_or(f64::NAN),
    );
}
