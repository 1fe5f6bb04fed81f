//! Synthetic analogs of the three dataset schemas with planted cross-task
//! couplings, and their on-disk format.

mod common;
pub mod io;
pub mod patch;
pub mod pixel;
pub mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::multitask::Dataset;

pub use io::{read_dataset, read_ledger, read_manifest, write_dataset, DatasetManifest};
pub use patch::{gen_patch_dataset, PatchLedger, PatchParams};
pub use pixel::{bayes_crop_error, coupling_proxy, gen_pixel_dataset, PixelLedger, PixelParams};
pub use tree::{gen_tree_dataset, TreeLedger, TreeParams, PARENT_21, PARENT_32};

/// Generator choice and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorParams {
    Pixel(PixelParams),
    Patch(PatchParams),
    Tree(TreeParams),
}

impl GeneratorParams {
    pub fn seed(&self) -> u64 {
        match self {
            GeneratorParams::Pixel(p) => p.seed,
            GeneratorParams::Patch(p) => p.seed,
            GeneratorParams::Tree(p) => p.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            GeneratorParams::Pixel(p) => p.seed = seed,
            GeneratorParams::Patch(p) => p.seed = seed,
            GeneratorParams::Tree(p) => p.seed = seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorParams::Pixel(p) => p.validate(),
            GeneratorParams::Patch(p) => p.validate(),
            GeneratorParams::Tree(p) => p.validate(),
        }
    }
}

/// A generated dataset with its ledger and a short human-readable summary.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub ledger: serde_json::Value,
    pub summary: Vec<String>,
}

pub fn generate(params: &GeneratorParams) -> Result<Generated> {
    let counts = |ds: &Dataset, label: &str| -> Result<String> {
        let labels = ds.class_labels(label)?;
        let k = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let mut c = vec![0usize; k];
        for &l in labels {
            c[l as usize] += 1;
        }
        Ok(format!("{label} class counts: {c:?}"))
    };
    Ok(match params {
        GeneratorParams::Pixel(p) => {
            let (dataset, ledger) = gen_pixel_dataset(p)?;
            let summary = vec![
                format!(
                    "pixel dataset: {} fields x {} pixels, season length {}",
                    p.n_fields, p.pixels_per_field, p.season_len
                ),
                format!(
                    "kappa {} spectral noise {} yield noise {}",
                    p.kappa, p.spectral_noise, p.yield_noise
                ),
                counts(&dataset, "crop")?,
            ];
            Generated {
                dataset,
                ledger: serde_json::to_value(&ledger)?,
                summary,
            }
        }
        GeneratorParams::Patch(p) => {
            let (dataset, ledger) = gen_patch_dataset(p)?;
            let boundary: usize = ledger.patches.iter().map(|l| l.boundary.len()).sum();
            let summary = vec![
                format!(
                    "patch dataset: {} patches of {}x{}",
                    p.n_patches, p.height, p.width
                ),
                format!("boundary pixels flagged: {boundary}"),
                counts(&dataset, "climate")?,
            ];
            Generated {
                dataset,
                ledger: serde_json::to_value(&ledger)?,
                summary,
            }
        }
        GeneratorParams::Tree(p) => {
            let (dataset, ledger) = gen_tree_dataset(p)?;
            let amb = ledger.ambiguous.iter().filter(|&&a| a).count();
            let summary = vec![
                format!("tree dataset: {} samples", p.n_samples),
                format!("sibling-ambiguous samples: {amb}"),
                counts(&dataset, "l3")?,
            ];
            Generated {
                dataset,
                ledger: serde_json::to_value(&ledger)?,
                summary,
            }
        }
    })
}

/// Generates and writes a dataset directory.
pub fn generate_to(params: &GeneratorParams, dir: &Path) -> Result<(Generated, DatasetManifest)> {
    let g = generate(params)?;
    let manifest = write_dataset(dir, &g.dataset, serde_json::to_value(params)?, &g.ledger)?;
    Ok((g, manifest))
}
