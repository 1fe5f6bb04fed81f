//! Tree species with genus and leaf type as auxiliary tasks: combination
//! counts over epochs, cohort transitions and hierarchy adherence.
//!
//! `cargo run --release --example tree_hierarchy -- [epochs]`

use std::collections::BTreeSet;

use modaux::multitask::*;
use modaux::synthdata::{gen_tree_dataset, TreeParams, PARENT_32};
use modaux::xai::{combo_timeline, hierarchy_adherence, transition_tracking, Combo};

fn main() -> modaux::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .map_or(Ok(8), |s| s.parse())
        .expect("epochs must be an integer");
    let (dataset, _) = gen_tree_dataset(&TreeParams {
        noise: 0.3,
        ..TreeParams::default()
    })?;
    let split = split_grouped_stratified(&dataset.samples, [0.6, 0.2, 0.2], 0)?;
    let r = |name: &str, role, weight| ModalityRole {
        name: name.into(),
        role,
        weight,
    };
    let roles = ModalityRoleConfig {
        main_task: "l3".into(),
        modalities: vec![
            r("aerial", Role::Input, 1.0),
            r("s1", Role::Input, 1.0),
            r("s2", Role::Input, 1.0),
            r("l3", Role::Target, 2.0),
            r("l2", Role::Target, 1.0),
            r("l1", Role::Target, 1.0),
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
    let test: BTreeSet<usize> = split
        .indices(Split::Test)
        .iter()
        .map(|&i| dataset.samples[i].id)
        .collect();

    println!("genus (aux) x species (main) on the test split");
    print!(
        "{}",
        combo_timeline(&out.log, "l2", "l3", Some(&test))?.to_csv()
    );

    let last = epochs - 1;
    for set in [vec![Combo::FF], vec![Combo::CF, Combo::FC]] {
        let t = transition_tracking(&out.log, "l2", "l3", Some(&test), 0, &set)?;
        let name: Vec<&str> = set.iter().map(|c| c.label()).collect();
        println!(
            "epoch-0 {} cohort of {}: CC share at epoch {last} = {:.3}",
            name.join("+"),
            t.cohort.len(),
            t.ratio(last, Combo::CC).unwrap_or(f64::NAN)
        );
    }

    let h = hierarchy_adherence(&out.log, &PARENT_32, "l2", "l3", Some(&test))?;
    println!(
        "hierarchy (genus -> species), violations of CC-in / FC-out: {}",
        h.violations()
    );
    print!("{}", h.to_csv());
    Ok(())
}
