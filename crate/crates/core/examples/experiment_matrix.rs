//! Runs every pixel experiment config (baseline, multimodal and multitask
//! role assignments) at reduced scale and prints the comparison table with
//! best and second-best values flagged.
//!
//! `cargo run --release --example experiment_matrix -- [epochs] [out_dir]`

use std::path::{Path, PathBuf};

use modaux::cli::{build_report, read_summary, train_experiment, DatasetSource, ExperimentConfig};
use modaux::synthdata::{GeneratorParams, PixelParams};

fn main() -> modaux::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(Ok(4), |s| s.parse())
        .expect("epochs must be an integer");
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("modaux_matrix"), PathBuf::from);
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/pixel");

    let mut runs = Vec::new();
    for (_, mut cfg) in ExperimentConfig::load_all(&configs)? {
        cfg.train.epochs = epochs;
        cfg.dataset = DatasetSource::Generate(GeneratorParams::Pixel(PixelParams {
            n_fields: 80,
            ..PixelParams::default()
        }));
        let dir = train_experiment(&cfg, &out.join(&cfg.name))?;
        runs.push((cfg.name.clone(), read_summary(&dir)?));
    }
    println!();
    print!("{}", build_report(&runs).to_markdown());
    Ok(())
}
