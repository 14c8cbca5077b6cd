//! Command line front end for the two-pyramid hashing pipeline.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad input,
//! 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use fph_core::data::{
    gen_synthetic, load_checkpoint, load_codes, load_split, save_checkpoint, save_codes,
    DatasetManifest, Split, SyntheticSpec,
};
use fph_core::gradcheck;
use fph_core::model::{CodeSource, Model};
use fph_core::retrieval::{evaluate, rank_database, BinaryCodeSet};
use fph_core::train::{self, trace_to_csv};
use fph_core::Error;

#[derive(Parser)]
#[command(name = "fph", about = "Pyramid hashing: data generation, training, encoding, retrieval and evaluation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fine-grained PPM dataset with a manifest.
    GenData {
        /// Output directory for images and manifest.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 4)]
        classes_per_group: usize,
        #[arg(long, default_value_t = 40)]
        images_per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Glyph side in pixels (must stay below image_size / 4).
        #[arg(long, default_value_t = 12)]
        detail_size: usize,
        #[arg(long, default_value_t = 2)]
        position_jitter: usize,
        #[arg(long, default_value_t = 0.1)]
        brightness_jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a JSON config; writes checkpoint.ckpt and loss_trace.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Encode a manifest split to a binary code file using a checkpoint.
    Encode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to encode; defaults to the config's manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Which split to encode.
        #[arg(long, default_value = "train")]
        split: String,
        /// Code source: "consensus" (default) or "vertical" (ablation baseline).
        #[arg(long)]
        source: Option<String>,
        /// Output code file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate query codes against database codes; writes the metric CSVs.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated top-N cutoffs; defaults to a spread over the database size.
        #[arg(long)]
        topn: Option<String>,
    },
    /// Print the top-k neighbors of one query code.
    Query {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        db: PathBuf,
        /// Index of the query inside the query code file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 10)]
        topk: usize,
    },
    /// Run the finite-difference gradient check suite.
    Gradcheck {
        /// "all" or a comma-separated subset of ops.
        #[arg(long, default_value = "all")]
        ops: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn bad_input(msg: String) -> Error {
    Error::Config(msg)
}

fn build_model(cfg: &RunConfig) -> Result<Model, Error> {
    Model::build(cfg.stage_specs(), cfg.input_size, cfg.hash_config(), cfg.seed)
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::GenData {
            out,
            groups,
            classes_per_group,
            images_per_class,
            image_size,
            detail_size,
            position_jitter,
            brightness_jitter,
            seed,
        } => {
            let spec = SyntheticSpec {
                groups,
                classes_per_group,
                images_per_class,
                image_size,
                detail_size,
                position_jitter,
                brightness_jitter,
                seed,
            };
            let manifest = gen_synthetic(&spec, &out)?;
            println!(
                "wrote {} images ({} classes) under {}",
                manifest.entries.len(),
                spec.total_classes(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config).map_err(bad_input)?;
            let mut model = build_model(&cfg)?;
            let manifest = DatasetManifest::load(&cfg.manifest)?;
            let dataset = load_split(&manifest, Split::Train, cfg.input_size)?;
            let trace = train::train(&mut model, &dataset, &cfg.train_config())?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
            let ckpt = cfg.output_dir.join("checkpoint.ckpt");
            save_checkpoint(&model.params(), &ckpt)?;
            let trace_path = cfg.output_dir.join("loss_trace.csv");
            std::fs::write(&trace_path, trace_to_csv(&trace)).map_err(|e| Error::io(&trace_path, e))?;
            let last = trace.last().map(|r| r.loss_combined).unwrap_or(f64::NAN);
            println!("trained {} epochs, final combined loss {last:.6}", cfg.epochs);
            println!("checkpoint: {}", ckpt.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Encode { config, checkpoint, manifest, split, source, out } => {
            let cfg = RunConfig::load(&config).map_err(bad_input)?;
            let source = match source.as_deref() {
                None => cfg.code_source().map_err(bad_input)?,
                Some("consensus") => CodeSource::Consensus,
                Some("vertical") => CodeSource::Vertical,
                Some(other) => {
                    return Err(bad_input(format!("--source must be consensus or vertical, got {other:?}")))
                }
            };
            let split = match split.as_str() {
                "train" => Split::Train,
                "query" => Split::Query,
                other => return Err(bad_input(format!("--split must be train or query, got {other:?}"))),
            };
            let mut model = build_model(&cfg)?;
            let loaded = load_checkpoint(&checkpoint)?;
            model.load_params(&loaded)?;
            let manifest_path = manifest.unwrap_or_else(|| cfg.manifest.clone());
            let man = DatasetManifest::load(&manifest_path)?;
            let images = load_split(&man, split, cfg.input_size)?;
            let mut set = BinaryCodeSet::new(cfg.q);
            for (img, label) in &images {
                let (consensus, vertical) = model.encode_image(img)?;
                let code = match source {
                    CodeSource::Consensus => consensus,
                    CodeSource::Vertical => vertical,
                };
                set.push(&code, *label)?;
            }
            save_codes(&set, &out)?;
            println!("encoded {} images to {}", set.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { queries, db, out_dir, topn } => {
            let queries = load_codes(&queries)?;
            let db = load_codes(&db)?;
            if queries.q() != db.q() {
                return Err(bad_input(format!(
                    "code length mismatch: queries q={}, database q={}",
                    queries.q(),
                    db.q()
                )));
            }
            let cutoffs = match topn {
                Some(list) => list
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| bad_input(format!("bad top-N value {s:?}"))))
                    .collect::<Result<Vec<_>, _>>()?,
                None => default_cutoffs(db.len()),
            };
            let report = evaluate(&queries, &db, &cutoffs)?;
            write_report(&report, &out_dir)?;
            println!("MAP {:.4}", report.map);
            println!("precision@radius{} {:.4}", report.radius, report.precision_at_radius);
            println!("report written under {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Query { queries, db, index, topk } => {
            let queries = load_codes(&queries)?;
            let db = load_codes(&db)?;
            if index >= queries.len() {
                return Err(bad_input(format!(
                    "query index {index} out of range (file has {})",
                    queries.len()
                )));
            }
            let ranking = rank_database(&queries.code(index), &db)?;
            println!("query {index} (label {}):", queries.label(index));
            println!("rank\tdb_index\tdistance\tlabel");
            for (rank, &(i, d)) in ranking.entries.iter().take(topk).enumerate() {
                println!("{rank}\t{i}\t{d}\t{}", db.label(i));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { ops } => {
            let selected: Vec<&str> = if ops == "all" {
                Vec::new()
            } else {
                ops.split(',').map(str::trim).collect()
            };
            let reports = gradcheck::run_suite(&selected)?;
            let mut all_pass = true;
            for r in &reports {
                println!(
                    "{:<16} max_rel_err {:>12.3e}  {}",
                    r.name,
                    r.max_relative_error,
                    if r.passed { "pass" } else { "FAIL" }
                );
                all_pass &= r.passed;
            }
            if all_pass {
                println!("all {} ops within tolerance {:.0e}", reports.len(), gradcheck::TOLERANCE);
                Ok(ExitCode::SUCCESS)
            } else {
                let failed: Vec<&str> =
                    reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
                eprintln!("gradcheck failed for: {}", failed.join(", "));
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn default_cutoffs(db_len: usize) -> Vec<usize> {
    [1usize, 2, 5, 10, 20, 50, 100, 200, 500, 1000]
        .into_iter()
        .filter(|&n| n <= db_len)
        .chain(std::iter::once(db_len))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn write_report(report: &fph_core::retrieval::MetricReport, out_dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, content: String| -> Result<(), Error> {
        let p = out_dir.join(name);
        std::fs::write(&p, content).map_err(|e| Error::io(&p, e))
    };
    write("map.csv", format!("map\n{}\n", report.map))?;
    let mut pr = String::from("recall,precision\n");
    for (r, p) in &report.pr_curve {
        pr.push_str(&format!("{r},{p}\n"));
    }
    write("pr_curve.csv", pr)?;
    let mut topn = String::from("N,precision\n");
    for (n, p) in &report.topn_curve {
        topn.push_str(&format!("{n},{p}\n"));
    }
    write("topn.csv", topn)?;
    write("radius.csv", format!("r,precision\n{},{}\n", report.radius, report.precision_at_radius))
}
