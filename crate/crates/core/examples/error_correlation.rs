//! Trains a yield + crop model on a coupled and an uncoupled pixel dataset
//! and prints the per-epoch Pearson correlation between crop and yield
//! errors on the test fields.
//!
//! `cargo run --release --example error_correlation -- [epochs]`

use std::collections::BTreeSet;

use modaux::multitask::*;
use modaux::synthdata::{gen_pixel_dataset, PixelParams};
use modaux::xai::correlation_over_epochs;

fn main() -> modaux::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(Ok(6), |s| s.parse())
        .expect("epochs must be an integer");
    let roles = ModalityRoleConfig {
        main_task: "yield".into(),
        modalities: vec![
            ModalityRole {
                name: "satellite".into(),
                role: Role::Input,
                weight: 1.0,
            },
            ModalityRole {
                name: "yield".into(),
                role: Role::Target,
                weight: 0.67,
            },
            ModalityRole {
                name: "crop".into(),
                role: Role::Target,
                weight: 0.33,
            },
        ],
    };
    for kappa in [1.0, 0.0] {
        // Noisier spectra so the crop head makes enough mistakes to correlate.
        let params = PixelParams {
            kappa,
            spectral_noise: 0.4,
            peak_spread: 0.1,
            cloud_prob: 0.3,
            ..PixelParams::default()
        };
        let (dataset, _) = gen_pixel_dataset(&params)?;
        let split = split_grouped_stratified(&dataset.samples, [0.6, 0.2, 0.2], 0)?;
        let out = train(
            &dataset,
            &roles,
            &split,
            &TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
        )?;
        let test: BTreeSet<usize> = split
            .indices(Split::Test)
            .iter()
            .map(|&i| dataset.samples[i].id)
            .collect();
        let report = correlation_over_epochs(&out.log, "yield", &["crop"], &test, 2000, 0)?;
        println!("kappa = {kappa} (best epoch {})", out.best_epoch);
        for row in &report.rows {
            match (row.r, row.p) {
                (Some(r), Some(p)) => println!(
                    "  epoch {:>2}: r = {r:+.3}, p = {p:.4}, n = {}",
                    row.epoch, row.n
                ),
                _ => println!(
                    "  epoch {:>2}: undefined ({})",
                    row.epoch,
                    row.note.as_deref().unwrap_or("")
                ),
            }
        }
    }
    Ok(())
}
