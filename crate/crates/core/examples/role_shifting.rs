//! Moves the crop modality through all three roles on the pixel dataset and
//! compares yield performance.
//!
//! `cargo run --release --example role_shifting -- [epochs]`

use modaux::multitask::*;
use modaux::synthdata::{gen_pixel_dataset, PixelParams};

fn main() -> modaux::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(Ok(8), |s| s.parse())
        .expect("epochs must be an integer");
    let (dataset, _) = gen_pixel_dataset(&PixelParams::default())?;
    let split = split_grouped_stratified(&dataset.samples, [0.6, 0.2, 0.2], 0)?;
    let base = ModalityRoleConfig {
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
        ],
    };
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };

    println!(
        "{:<8} {:<24} {:>8} {:>8} {:>8}",
        "crop", "inputs", "R2", "MAE", "crop F1"
    );
    for role in [Role::Unused, Role::Input, Role::Target] {
        let mut roles = base.with_role("crop", role);
        if role == Role::Target {
            roles.modalities.last_mut().unwrap().weight = 0.33;
        }
        let out = train(&dataset, &roles, &split, &cfg)?;
        let at = |task: &str, m: MetricKind| out.metric(out.best_epoch, Split::Test, task, m);
        let f1 = at("crop", MetricKind::MicroF1).map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<8} {:<24} {:>8.4} {:>8.4} {:>8}",
            format!("{role:?}").to_lowercase(),
            out.model.input_schema().join("+"),
            at("yield", MetricKind::R2).unwrap(),
            at("yield", MetricKind::Mae).unwrap(),
            f1
        );
    }
    Ok(())
}
