//! Image patches with terrain-driven land cover, elevation and per-patch
//! climate latents.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ModalityKind, ModalitySpec};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadLayout, HeadSpec};
use crate::multitask::{CatalogEntry, Dataset, MetricKind, ModalityData, SampleMeta, TargetSpec};

use super::common::{gradient_magnitude, noise, smooth_field, stream};

pub const LULC_CLASSES: usize = 12;
/// Land-cover classes assigned by elevation band; the rest are overlays.
pub const ELEVATION_BANDS: usize = 8;
pub const OPTICAL_CHANNELS: usize = 12;
pub const SAR_CHANNELS: usize = 2;
pub const SIGNATURE_CHANNELS: usize = 6;
pub const LAT_TIERS: usize = 4;
pub const ELEV_TIERS: usize = 3;
pub const CLIMATE_ZONES: usize = LAT_TIERS * ELEV_TIERS;
pub const WEATHER_FEATURES: usize = 3;
/// Elevation bands whose reflectance follows the season.
pub const VEGETATION_BANDS: std::ops::Range<usize> = 2..6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchParams {
    pub n_patches: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    /// Share of a patch covered by overlay classes, roughly.
    pub overlay_share: f64,
    pub seed: u64,
}

impl Default for PatchParams {
    fn default() -> Self {
        PatchParams {
            n_patches: 320,
            height: 32,
            width: 32,
            noise: 0.05,
            overlay_share: 0.2,
            seed: 0,
        }
    }
}

impl PatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(16)
            || !self.width.is_multiple_of(16)
        {
            return Err(Error::Config(format!(
                "patch extent {}x{} must be positive multiples of 16",
                self.height, self.width
            )));
        }
        if self.n_patches == 0 {
            return Err(Error::Config("n_patches must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.overlay_share) {
            return Err(Error::Config(
                "noise must be non-negative and overlay share in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-patch latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLatent {
    pub lat_tier: usize,
    pub base_elevation: f64,
    pub mean_elevation: f64,
    pub season: f64,
    /// Row-major indices of the top-decile `|grad elevation|` pixels.
    pub boundary: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLedger {
    pub params: PatchParams,
    /// `LULC_CLASSES x SIGNATURE_CHANNELS` reflectance signatures.
    pub signatures: Vec<Vec<f64>>,
    pub patches: Vec<PatchLatent>,
}

/// Class signatures: a fixed table whose rows differ pairwise by at least
/// 0.3 in Euclidean distance.
pub fn signatures() -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5167);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(LULC_CLASSES);
    while out.len() < LULC_CLASSES {
        let cand: Vec<f64> = (0..SIGNATURE_CHANNELS)
            .map(|_| rng.gen_range(0.05..0.95))
            .collect();
        let far = out.iter().all(|s| {
            s.iter()
                .zip(&cand)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
                >= 0.3
        });
        if far {
            out.push(cand);
        }
    }
    out
}

fn elevation_tier(mean: f64) -> usize {
    if mean < 0.35 {
        0
    } else if mean < 0.6 {
        1
    } else {
        2
    }
}

pub fn gen_patch_dataset(p: &PatchParams) -> Result<(Dataset, PatchLedger)> {
    p.validate()?;
    let (h, w) = (p.height, p.width);
    let px = h * w;
    let sig = signatures();
    let n = p.n_patches;
    let mut sar = Vec::with_capacity(n * SAR_CHANNELS * px);
    let mut optical = Vec::with_capacity(n * OPTICAL_CHANNELS * px);
    let mut elevation = Vec::with_capacity(n * px);
    let mut lulc = Vec::with_capacity(n * px);
    let mut climate = Vec::with_capacity(n);
    let mut season_col = Vec::with_capacity(n);
    let mut weather = Vec::with_capacity(n * WEATHER_FEATURES);
    let mut samples = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);

    for i in 0..n {
        let mut r = stream(p.seed, 10, i as u64);
        let lat_tier = i % LAT_TIERS;
        let base = r.gen_range(0.0..0.6);
        let local = smooth_field(&mut r, h, w, 6);
        let elev: Vec<f64> = local.iter().map(|&v| base + 0.4 * v).collect();
        let overlay = smooth_field(&mut r, h, w, 4);
        let kind = smooth_field(&mut r, h, w, 3);
        let season: f64 = r.gen_range(0.0..1.0);
        let mean_elev = elev.iter().sum::<f64>() / px as f64;

        let classes: Vec<usize> = (0..px)
            .map(|q| {
                if overlay[q] > 1.0 - p.overlay_share {
                    ELEVATION_BANDS + ((kind[q] * 4.0) as usize).min(3)
                } else {
                    ((elev[q] * ELEVATION_BANDS as f64) as usize).min(ELEVATION_BANDS - 1)
                }
            })
            .collect();
        let grad = gradient_magnitude(&elev, h, w);
        let mut sorted = grad.clone();
        sorted.sort_by(f64::total_cmp);
        let cut = sorted[(px * 9) / 10];
        let boundary: Vec<usize> = (0..px)
            .filter(|&q| grad[q] >= cut && grad[q] > 0.0)
            .collect();
        let shade: Vec<f64> = {
            let dx: Vec<f64> = (0..px)
                .map(|q| {
                    let (y, x) = (q / w, q % w);
                    elev[y * w + (x + 1).min(w - 1)] - elev[y * w + x.saturating_sub(1)]
                })
                .collect();
            dx.iter().map(|d| 0.5 + 4.0 * d).collect()
        };

        let lat = lat_tier as f64 / (LAT_TIERS - 1) as f64;
        let veg = |c: usize| VEGETATION_BANDS.contains(&c);
        let mut opt = vec![0f32; OPTICAL_CHANNELS * px];
        for q in 0..px {
            let c = classes[q];
            for (j, s) in sig[c].iter().enumerate() {
                opt[j * px + q] = (s + noise(&mut r, p.noise)) as f32;
            }
            let extra = [
                elev[q],
                shade[q],
                0.3 + 0.4 * lat,
                if veg(c) { 0.2 + 0.6 * season } else { 0.2 },
                if veg(c) { 0.7 - 0.4 * season } else { 0.3 },
                elev[q] * (1.0 - 0.3 * season) + 0.2 * lat,
            ];
            for (j, v) in extra.iter().enumerate() {
                opt[(SIGNATURE_CHANNELS + j) * px + q] = (v + noise(&mut r, p.noise)) as f32;
            }
        }
        let mut s1 = vec![0f32; SAR_CHANNELS * px];
        for q in 0..px {
            s1[q] = (0.5 * sig[classes[q]][0] + 2.0 * grad[q] + noise(&mut r, p.noise)) as f32;
            s1[px + q] = (0.3 * elev[q] + 0.2 * sig[classes[q]][1] + noise(&mut r, p.noise)) as f32;
        }

        sar.extend(s1);
        optical.extend(opt);
        elevation.extend(elev.iter().map(|&v| v as f32));
        lulc.extend(classes.iter().map(|&c| c as u8));
        climate.push((lat_tier * ELEV_TIERS + elevation_tier(mean_elev)) as u32);
        season_col.push(season as f32);
        weather.extend([
            (25.0 - 8.0 * lat - 10.0 * mean_elev
                + 8.0 * (std::f64::consts::PI * season).sin()
                + noise(&mut r, 1.0)) as f32,
            (50.0 + 30.0 * mean_elev + noise(&mut r, 5.0)) as f32,
            (250.0 - 40.0 * lat + 50.0 * season + noise(&mut r, 10.0)) as f32,
        ]);
        samples.push(SampleMeta {
            id: i,
            group: i,
            stratum: lat_tier,
        });
        latents.push(PatchLatent {
            lat_tier,
            base_elevation: base,
            mean_elevation: mean_elev,
            season,
            boundary,
        });
    }

    let dataset = Dataset {
        name: "patch".into(),
        samples,
        modalities: vec![
            (
                "sar".into(),
                ModalityData::Images {
                    channels: SAR_CHANNELS,
                    height: h,
                    width: w,
                    values: sar,
                },
            ),
            (
                "optical".into(),
                ModalityData::Images {
                    channels: OPTICAL_CHANNELS,
                    height: h,
                    width: w,
                    values: optical,
                },
            ),
            (
                "elevation".into(),
                ModalityData::Images {
                    channels: 1,
                    height: h,
                    width: w,
                    values: elevation,
                },
            ),
            (
                "lulc".into(),
                ModalityData::ClassMaps {
                    classes: LULC_CLASSES,
                    height: h,
                    width: w,
                    values: lulc,
                },
            ),
            (
                "climate".into(),
                ModalityData::Classes {
                    classes: CLIMATE_ZONES,
                    values: climate,
                },
            ),
            (
                "season".into(),
                ModalityData::Features {
                    dim: 1,
                    values: season_col,
                },
            ),
            (
                "weather".into(),
                ModalityData::Features {
                    dim: WEATHER_FEATURES,
                    values: weather,
                },
            ),
        ],
        catalog: patch_catalog(h, w),
    };
    Ok((
        dataset,
        PatchLedger {
            params: p.clone(),
            signatures: sig,
            patches: latents,
        },
    ))
}

fn image_entry(name: &str, channels: usize, h: usize, w: usize, base_width: usize) -> CatalogEntry {
    CatalogEntry {
        spec: ModalitySpec {
            name: name.into(),
            kind: ModalityKind::ImageSpatial,
            channels,
            extent: Some([h, w]),
            max_len: None,
            classes: None,
        },
        encoder: Some(EncoderConfig::Unet {
            channels,
            base_width,
            out_channels: 64,
        }),
        target: None,
        imagery: true,
    }
}

fn vector_entry(
    name: &str,
    kind: ModalityKind,
    size: usize,
    encoder: EncoderConfig,
    target: TargetSpec,
) -> CatalogEntry {
    let categorical = kind == ModalityKind::Categorical;
    CatalogEntry {
        spec: ModalitySpec {
            name: name.into(),
            kind,
            channels: if categorical { 0 } else { size },
            extent: None,
            max_len: None,
            classes: categorical.then_some(size),
        },
        encoder: Some(encoder),
        target: Some(target),
        imagery: false,
    }
}

pub fn patch_catalog(h: usize, w: usize) -> Vec<CatalogEntry> {
    let mut elevation = image_entry("elevation", 1, h, w, 4);
    elevation.imagery = false;
    elevation.target = Some(TargetSpec {
        head: HeadSpec {
            kind: HeadKind::DenseSeg,
            outputs: 1,
            layout: HeadLayout::DenseConv { hidden: 16 },
        },
        metrics: vec![MetricKind::Mae, MetricKind::R2],
    });
    vec![
        image_entry("sar", SAR_CHANNELS, h, w, 8),
        image_entry("optical", OPTICAL_CHANNELS, h, w, 8),
        elevation,
        CatalogEntry {
            spec: ModalitySpec {
                name: "lulc".into(),
                kind: ModalityKind::ImageSpatial,
                channels: 1,
                extent: Some([h, w]),
                max_len: None,
                classes: Some(LULC_CLASSES),
            },
            encoder: None,
            target: Some(TargetSpec {
                head: HeadSpec {
                    kind: HeadKind::MulticlassSeg,
                    outputs: LULC_CLASSES,
                    layout: HeadLayout::Pointwise,
                },
                metrics: vec![MetricKind::Accuracy, MetricKind::Iou],
            }),
            imagery: false,
        },
        vector_entry(
            "climate",
            ModalityKind::Categorical,
            CLIMATE_ZONES,
            EncoderConfig::Embedding {
                classes: CLIMATE_ZONES,
                dim: 32,
            },
            TargetSpec {
                head: HeadSpec {
                    kind: HeadKind::Classification,
                    outputs: CLIMATE_ZONES,
                    layout: HeadLayout::Reduce {
                        channels: 16,
                        hidden: None,
                        dropout: 0.5,
                    },
                },
                metrics: vec![MetricKind::MicroF1, MetricKind::Accuracy],
            },
        ),
        vector_entry(
            "season",
            ModalityKind::Tabular,
            1,
            EncoderConfig::Tabular {
                features: 1,
                hidden: 32,
                latent: 32,
            },
            TargetSpec {
                head: HeadSpec {
                    kind: HeadKind::BoundedRegression,
                    outputs: 1,
                    layout: HeadLayout::Reduce {
                        channels: 16,
                        hidden: Some(16),
                        dropout: 0.2,
                    },
                },
                metrics: vec![MetricKind::Mae, MetricKind::R2],
            },
        ),
        vector_entry(
            "weather",
            ModalityKind::Tabular,
            WEATHER_FEATURES,
            EncoderConfig::Tabular {
                features: WEATHER_FEATURES,
                hidden: 32,
                latent: 32,
            },
            TargetSpec {
                head: HeadSpec {
                    kind: HeadKind::Regression,
                    outputs: WEATHER_FEATURES,
                    layout: HeadLayout::Reduce {
                        channels: 16,
                        hidden: None,
                        dropout: 0.0,
                    },
                },
                metrics: vec![MetricKind::R2, MetricKind::Mae],
            },
        ),
    ]
}
