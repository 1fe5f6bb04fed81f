use std::collections::BTreeMap;
use std::path::Path;

use modaux::synthdata::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_pixel(seed: u64) -> GeneratorParams {
    GeneratorParams::Pixel(PixelParams {
        n_fields: 24,
        pixels_per_field: 5,
        seed,
        ..PixelParams::default()
    })
}

fn small_patch(seed: u64) -> GeneratorParams {
    GeneratorParams::Patch(PatchParams {
        n_patches: 12,
        seed,
        ..PatchParams::default()
    })
}

fn small_tree(seed: u64) -> GeneratorParams {
    GeneratorParams::Tree(TreeParams {
        n_samples: 90,
        seed,
        ..TreeParams::default()
    })
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn datasets_roundtrip_through_disk() {
    for params in [small_pixel(1), small_patch(1), small_tree(1)] {
        let tmp = tempfile::tempdir().unwrap();
        let (g, manifest) = generate_to(&params, tmp.path()).unwrap();
        let back = read_dataset(tmp.path()).unwrap();
        assert_eq!(back, g.dataset);
        assert_eq!(read_manifest(tmp.path()).unwrap(), manifest);
        assert_eq!(read_ledger(tmp.path()).unwrap(), g.ledger);
    }
}

#[test]
fn same_params_give_byte_identical_directories() {
    for params in [small_pixel(5), small_patch(5), small_tree(5)] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_to(&params, a.path()).unwrap();
        generate_to(&params, b.path()).unwrap();
        let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
        assert!(fa.len() >= 4);
        assert_eq!(fa, fb);
    }
}

#[test]
fn different_seeds_give_different_data() {
    let a = generate(&small_tree(1)).unwrap().dataset;
    let b = generate(&small_tree(2)).unwrap().dataset;
    assert_ne!(a, b);
}

#[test]
fn truncated_blob_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    generate_to(&small_tree(3), tmp.path()).unwrap();
    let blob = tmp.path().join("age.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
    let err = read_dataset(tmp.path()).unwrap_err();
    assert_eq!(err.code(), "E_FORMAT", "{err}");
}

#[test]
fn coupling_proxy_increases_with_kappa() {
    let at = |kappa: f64| {
        coupling_proxy(&PixelParams {
            n_fields: 40,
            pixels_per_field: 5,
            kappa,
            seed: 2,
            ..PixelParams::default()
        })
        .unwrap()
    };
    let (k0, k5, k1) = (at(0.0), at(0.5), at(1.0));
    assert!(k0.abs() < 1e-9, "kappa 0 proxy {k0}");
    assert!(k0 < k5 && k5 < k1, "{k0} {k5} {k1}");
}

#[test]
fn bayes_crop_error_small_at_defaults() {
    let p = PixelParams {
        n_fields: 60,
        ..PixelParams::default()
    };
    let (ds, ledger) = gen_pixel_dataset(&p).unwrap();
    let e = bayes_crop_error(&ds, &ledger).unwrap();
    assert!(e < 0.02, "Bayes crop error {e}");
}

#[test]
fn tree_genus_is_uniform() {
    let p = TreeParams {
        n_samples: 3000,
        seed: 17,
        ..TreeParams::default()
    };
    let (ds, _) = gen_tree_dataset(&p).unwrap();
    let mut counts = [0f64; 15];
    for &c in ds.class_labels("l3").unwrap() {
        counts[c as usize] += 1.0;
    }
    let expected = p.n_samples as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|o| (o - expected).powi(2) / expected)
        .sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .inverse_cdf(0.99);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn generator_summaries_mention_counts() {
    let g = generate(&small_patch(0)).unwrap();
    assert!(g.summary.iter().any(|l| l.contains("climate class counts")));
}
