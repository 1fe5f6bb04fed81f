//! U-Net multitask segmentation on synthetic SAR/optical patches with
//! elevation as an auxiliary dense target, then error maps for one test
//! patch.
//!
//! `cargo run --release --example segmentation_mtl -- [epochs] [out_dir]`

use std::path::PathBuf;

use modaux::multitask::*;
use modaux::synthdata::{gen_patch_dataset, PatchParams};
use modaux::xai::error_map_export;

fn main() -> modaux::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args
        .next()
        .map_or(Ok(6), |s| s.parse())
        .expect("epochs must be an integer");
    let out_dir = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("modaux_maps"), PathBuf::from);

    let (dataset, _) = gen_patch_dataset(&PatchParams {
        n_patches: 160,
        ..PatchParams::default()
    })?;
    let split = split_grouped_stratified(&dataset.samples, [0.6, 0.2, 0.2], 0)?;
    let roles = ModalityRoleConfig {
        main_task: "lulc".into(),
        modalities: vec![
            ModalityRole {
                name: "sar".into(),
                role: Role::Input,
                weight: 1.0,
            },
            ModalityRole {
                name: "optical".into(),
                role: Role::Input,
                weight: 1.0,
            },
            ModalityRole {
                name: "lulc".into(),
                role: Role::Target,
                weight: 1.0,
            },
            ModalityRole {
                name: "elevation".into(),
                role: Role::Target,
                weight: 1.0,
            },
        ],
    };
    let out = train(
        &dataset,
        &roles,
        &split,
        &TrainConfig {
            epochs,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
    )?;
    for e in 0..epochs {
        let m = |task: &str, k: MetricKind| out.metric(e, Split::Test, task, k).unwrap();
        println!(
            "epoch {e:>2}  loss {:.4}  LULC acc {:.4}  IoU {:.4}  elevation MAE {:.4}",
            out.train_loss[e],
            m("lulc", MetricKind::Accuracy),
            m("lulc", MetricKind::Iou),
            m("elevation", MetricKind::Mae)
        );
    }

    let sample = dataset.samples[split.indices(Split::Test)[0]].id;
    let bundle = error_map_export(&out.log, sample, out.best_epoch, &out_dir)?;
    println!(
        "maps for sample {sample} at epoch {} in {}",
        out.best_epoch,
        out_dir.display()
    );
    for m in &bundle.maps {
        println!(
            "  {} ({}, mean error {:.4}): {}",
            m.task,
            m.kind,
            m.mean_error,
            m.files.join(", ")
        );
    }
    Ok(())
}
