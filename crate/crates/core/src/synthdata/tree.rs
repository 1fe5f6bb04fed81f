//! Tree-genus samples with a three-level label hierarchy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ModalityKind, ModalitySpec};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadLayout, HeadSpec};
use crate::multitask::{CatalogEntry, Dataset, MetricKind, ModalityData, SampleMeta, TargetSpec};

use super::common::{noise, stream};

pub const L3_CLASSES: usize = 15;
pub const L2_CLASSES: usize = 9;
pub const L1_CLASSES: usize = 3;
pub const AERIAL_CHANNELS: usize = 3;
pub const S1_CHANNELS: usize = 3;
pub const S2_CHANNELS: usize = 12;

/// Genus to stand type.
pub const PARENT_32: [usize; L3_CLASSES] = [0, 0, 1, 1, 2, 3, 3, 4, 5, 5, 6, 6, 7, 8, 8];
/// Stand type to foliage type.
pub const PARENT_21: [usize; L2_CLASSES] = [0, 0, 0, 1, 1, 1, 1, 2, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub n_samples: usize,
    /// Aerial patch side; at least 16 and a multiple of 8.
    pub aerial_size: usize,
    pub satellite_size: usize,
    pub noise: f64,
    /// Share of samples whose aerial texture belongs to a sibling genus.
    pub ambiguous_share: f64,
    pub parent_32: Vec<usize>,
    pub parent_21: Vec<usize>,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            n_samples: 1500,
            aerial_size: 16,
            satellite_size: 6,
            noise: 0.1,
            ambiguous_share: 0.15,
            parent_32: PARENT_32.to_vec(),
            parent_21: PARENT_21.to_vec(),
            seed: 0,
        }
    }
}

/// Checks that `map` sends each of `children` classes to one of `parents`
/// classes and that every parent has a child.
pub fn validate_parent_map(map: &[usize], children: usize, parents: usize) -> Result<()> {
    if map.len() != children {
        return Err(Error::Config(format!(
            "parent map has {} entries, expected {children}",
            map.len()
        )));
    }
    if let Some(&bad) = map.iter().find(|&&p| p >= parents) {
        return Err(Error::Config(format!(
            "parent class {bad} outside [0, {parents})"
        )));
    }
    if (0..parents).any(|p| !map.contains(&p)) {
        return Err(Error::Config(
            "every parent class needs at least one child".into(),
        ));
    }
    Ok(())
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        validate_parent_map(&self.parent_32, L3_CLASSES, L2_CLASSES)?;
        validate_parent_map(&self.parent_21, L2_CLASSES, L1_CLASSES)?;
        if self.aerial_size < 16 || !self.aerial_size.is_multiple_of(8) || self.satellite_size == 0
        {
            return Err(Error::Config(
                "aerial size must be a multiple of 8 no smaller than 16".into(),
            ));
        }
        if self.n_samples == 0
            || !(self.noise >= 0.0)
            || !(0.0..=1.0).contains(&self.ambiguous_share)
        {
            return Err(Error::Config(
                "invalid sample count, noise or ambiguous share".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeLedger {
    pub params: TreeParams,
    /// Inclusive-exclusive age range per genus.
    pub age_range: Vec<(f64, f64)>,
    /// Genus whose texture was rendered, per sample.
    pub rendered_genus: Vec<usize>,
    pub ambiguous: Vec<bool>,
}

pub fn age_range(l3: usize) -> (f64, f64) {
    let lo = (l3 % 5) as f64 * 0.15;
    (lo, lo + 0.3)
}

/// Texture orientation (per stand type) and frequency (per position among
/// siblings) of a genus.
fn texture(l3: usize, parent_32: &[usize]) -> (f64, f64) {
    let l2 = parent_32[l3];
    let rank = (0..l3).filter(|&g| parent_32[g] == l2).count();
    (
        l2 as f64 * std::f64::consts::PI / L2_CLASSES as f64,
        1.5 + 1.5 * rank as f64,
    )
}

fn signature(class: usize, channel: usize, salt: usize) -> f64 {
    0.2 + 0.6 * (((class + 1) * (channel + salt) * 37 + 11 * class) % 17) as f64 / 16.0
}

pub fn gen_tree_dataset(p: &TreeParams) -> Result<(Dataset, TreeLedger)> {
    p.validate()?;
    let (a, s) = (p.aerial_size, p.satellite_size);
    let n = p.n_samples;
    let mut aerial = Vec::with_capacity(n * AERIAL_CHANNELS * a * a);
    let mut s1 = Vec::with_capacity(n * S1_CHANNELS * s * s);
    let mut s2 = Vec::with_capacity(n * S2_CHANNELS * s * s);
    let (mut l3s, mut l2s, mut l1s, mut ages) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut samples = Vec::with_capacity(n);
    let mut rendered = Vec::with_capacity(n);
    let mut ambiguous = Vec::with_capacity(n);

    for i in 0..n {
        let mut r = stream(p.seed, 20, i as u64);
        let l3 = r.gen_range(0..L3_CLASSES);
        let l2 = p.parent_32[l3];
        let l1 = p.parent_21[l2];
        let (lo, hi) = age_range(l3);
        let age = r.gen_range(lo..hi);
        let siblings: Vec<usize> = (0..L3_CLASSES)
            .filter(|&g| g != l3 && p.parent_32[g] == l2)
            .collect();
        let amb = !siblings.is_empty() && r.gen_bool(p.ambiguous_share);
        let shown = if amb {
            siblings[r.gen_range(0..siblings.len())]
        } else {
            l3
        };
        let (theta, freq) = texture(shown, &p.parent_32);
        let phase = r.gen_range(0.0..std::f64::consts::TAU);
        let brightness = 0.3 * age;
        for c in 0..AERIAL_CHANNELS {
            let tint = signature(l1, c, 3);
            for y in 0..a {
                for x in 0..a {
                    let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / a as f64;
                    let wave = (std::f64::consts::TAU * freq * u + phase).sin();
                    aerial.push(
                        (0.5 * tint + 0.25 * wave + brightness + noise(&mut r, p.noise)) as f32,
                    );
                }
            }
        }
        for c in 0..S1_CHANNELS {
            for _ in 0..s * s {
                s1.push((signature(l1, c, 5) + noise(&mut r, 2.0 * p.noise)) as f32);
            }
        }
        for c in 0..S2_CHANNELS {
            for _ in 0..s * s {
                s2.push((signature(l2, c, 1) + 0.1 * age + noise(&mut r, 3.0 * p.noise)) as f32);
            }
        }
        l3s.push(l3 as u32);
        l2s.push(l2 as u32);
        l1s.push(l1 as u32);
        ages.push(age as f32);
        rendered.push(shown);
        ambiguous.push(amb);
        samples.push(SampleMeta {
            id: i,
            group: i,
            stratum: l3,
        });
    }

    let img = |channels: usize, size: usize, values: Vec<f32>| ModalityData::Images {
        channels,
        height: size,
        width: size,
        values,
    };
    let dataset = Dataset {
        name: "tree".into(),
        samples,
        modalities: vec![
            ("aerial".into(), img(AERIAL_CHANNELS, a, aerial)),
            ("s1".into(), img(S1_CHANNELS, s, s1)),
            ("s2".into(), img(S2_CHANNELS, s, s2)),
            (
                "l3".into(),
                ModalityData::Classes {
                    classes: L3_CLASSES,
                    values: l3s,
                },
            ),
            (
                "l2".into(),
                ModalityData::Classes {
                    classes: L2_CLASSES,
                    values: l2s,
                },
            ),
            (
                "l1".into(),
                ModalityData::Classes {
                    classes: L1_CLASSES,
                    values: l1s,
                },
            ),
            (
                "age".into(),
                ModalityData::Features {
                    dim: 1,
                    values: ages,
                },
            ),
        ],
        catalog: tree_catalog(a, s),
    };
    Ok((
        dataset,
        TreeLedger {
            params: p.clone(),
            age_range: (0..L3_CLASSES).map(age_range).collect(),
            rendered_genus: rendered,
            ambiguous,
        },
    ))
}

fn label_entry(name: &str, classes: usize, layout: HeadLayout) -> CatalogEntry {
    CatalogEntry {
        spec: ModalitySpec {
            name: name.into(),
            kind: ModalityKind::Categorical,
            channels: 0,
            extent: None,
            max_len: None,
            classes: Some(classes),
        },
        encoder: Some(EncoderConfig::Embedding { classes, dim: 32 }),
        target: Some(TargetSpec {
            head: HeadSpec {
                kind: HeadKind::Classification,
                outputs: classes,
                layout,
            },
            metrics: vec![MetricKind::MicroF1, MetricKind::Accuracy],
        }),
        imagery: false,
    }
}

pub fn tree_catalog(aerial: usize, sat: usize) -> Vec<CatalogEntry> {
    let image = |name: &str, channels: usize, size: usize, encoder: EncoderConfig| CatalogEntry {
        spec: ModalitySpec {
            name: name.into(),
            kind: ModalityKind::ImageFlat,
            channels,
            extent: Some([size, size]),
            max_len: None,
            classes: None,
        },
        encoder: Some(encoder),
        target: None,
        imagery: true,
    };
    let flat = |channels: usize| EncoderConfig::FlatMlp {
        channels,
        height: sat,
        width: sat,
        hidden: 256,
        latent: 512,
        dropout: 0.3,
    };
    vec![
        image(
            "aerial",
            AERIAL_CHANNELS,
            aerial,
            EncoderConfig::Cnn {
                channels: AERIAL_CHANNELS,
                latent: 512,
            },
        ),
        image("s1", S1_CHANNELS, sat, flat(S1_CHANNELS)),
        image("s2", S2_CHANNELS, sat, flat(S2_CHANNELS)),
        label_entry("l3", L3_CLASSES, HeadLayout::Linear),
        label_entry(
            "l2",
            L2_CLASSES,
            HeadLayout::Mlp {
                hidden: 256,
                dropout: 0.25,
            },
        ),
        label_entry("l1", L1_CLASSES, HeadLayout::Linear),
        CatalogEntry {
            spec: ModalitySpec {
                name: "age".into(),
                kind: ModalityKind::Tabular,
                channels: 1,
                extent: None,
                max_len: None,
                classes: None,
            },
            encoder: Some(EncoderConfig::Tabular {
                features: 1,
                hidden: 32,
                latent: 32,
            }),
            target: Some(TargetSpec {
                head: HeadSpec {
                    kind: HeadKind::Regression,
                    outputs: 1,
                    layout: HeadLayout::Linear,
                },
                metrics: vec![MetricKind::Mae, MetricKind::R2],
            }),
            imagery: false,
        },
    ]
}
