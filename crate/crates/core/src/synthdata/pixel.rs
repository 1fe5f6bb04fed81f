//! Per-pixel crop time series with a planted crop/yield coupling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ModalityKind, ModalitySpec};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadLayout, HeadSpec};
use crate::multitask::{CatalogEntry, Dataset, MetricKind, ModalityData, SampleMeta, TargetSpec};

use super::common::{noise, stream};

pub const CROPS: usize = 3;
pub const SPECTRAL_BANDS: usize = 12;
pub const SCENE_CLASSES: usize = 13;
pub const SERIES_CHANNELS: usize = SPECTRAL_BANDS + SCENE_CLASSES;
/// Scene class of an unobstructed observation.
pub const CLEAR_SCENE: usize = 4;
/// Scene classes of obstructed observations (cloud, cloud shadow).
pub const CLOUD_SCENES: [usize; 2] = [8, 9];
pub const WEATHER_FEATURES: usize = 4;
pub const DEM_FEATURES: usize = 5;

/// Fixed generator constants, written to the manifest and ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelConstants {
    pub crop_prior: [f64; CROPS],
    pub amplitude: [f64; CROPS],
    pub peak_width: f64,
    pub yield_base: f64,
    pub yield_gain: f64,
    /// Field fertility is uniform on this interval.
    pub field_fertility: (f64, f64),
    /// Pixel fertility offsets are uniform on `[-x, x]`.
    pub pixel_offset: f64,
    pub days_per_step: f64,
    pub cloud_level: f64,
}

impl Default for PixelConstants {
    fn default() -> Self {
        PixelConstants {
            crop_prior: [0.28, 0.58, 0.14],
            amplitude: [0.8, 1.0, 1.25],
            peak_width: 0.18,
            yield_base: 2.5,
            yield_gain: 5.0,
            field_fertility: (0.2, 0.8),
            pixel_offset: 0.2,
            days_per_step: 10.0,
            cloud_level: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelParams {
    pub n_fields: usize,
    pub pixels_per_field: usize,
    pub season_len: usize,
    /// Strength of the fertility term in the spectral series, in `[0, 1]`.
    pub kappa: f64,
    pub spectral_noise: f64,
    pub yield_noise: f64,
    pub cloud_prob: f64,
    /// Distance between the seasonal peak positions of neighbouring crops.
    pub peak_spread: f64,
    /// Number of years; fields are assigned to years round-robin.
    pub years: usize,
    pub seed: u64,
}

impl Default for PixelParams {
    fn default() -> Self {
        PixelParams {
            n_fields: 200,
            pixels_per_field: 25,
            season_len: 12,
            kappa: 0.8,
            spectral_noise: 0.02,
            yield_noise: 0.3,
            cloud_prob: 0.1,
            peak_spread: 0.2,
            years: 3,
            seed: 0,
        }
    }
}

impl PixelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if self.season_len < 4 {
            return bad(format!(
                "season length must be at least 4, got {}",
                self.season_len
            ));
        }
        if self.n_fields == 0 || self.pixels_per_field == 0 || self.years == 0 {
            return bad("fields, pixels per field and years must be positive".into());
        }
        if !(self.spectral_noise >= 0.0 && self.yield_noise >= 0.0 && self.peak_spread >= 0.0) {
            return bad("noise scales and peak spread must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.cloud_prob) {
            return bad(format!(
                "cloud probability must lie in [0, 1), got {}",
                self.cloud_prob
            ));
        }
        Ok(())
    }
}

/// Everything needed to recompute the generative posteriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelLedger {
    pub params: PixelParams,
    pub constants: PixelConstants,
    /// `crops x season_len x bands`, row-major.
    pub templates: Vec<f64>,
    /// Latent fertility of every sample.
    pub fertility: Vec<f64>,
    pub field_crop: Vec<usize>,
}

fn band_sensitivity(c: usize, b: usize) -> f64 {
    0.5 + 0.5 * (((b + 1) * (c + 2)) % 7) as f64 / 6.0
}

fn templates(p: &PixelParams, k: &PixelConstants) -> Vec<f64> {
    let t_len = p.season_len;
    let mut out = Vec::with_capacity(CROPS * t_len * SPECTRAL_BANDS);
    for c in 0..CROPS {
        let peak = 0.55 + p.peak_spread * (c as f64 - 1.0);
        for t in 0..t_len {
            let s = t as f64 / (t_len - 1) as f64;
            let bump = (-(s - peak).powi(2) / (2.0 * k.peak_width * k.peak_width)).exp();
            for b in 0..SPECTRAL_BANDS {
                out.push(0.05 + 0.01 * b as f64 + k.amplitude[c] * band_sensitivity(c, b) * bump);
            }
        }
    }
    out
}

/// Generates the dataset and its ledger.
pub fn gen_pixel_dataset(p: &PixelParams) -> Result<(Dataset, PixelLedger)> {
    p.validate()?;
    let k = PixelConstants::default();
    let tpl = templates(p, &k);
    let (t_len, per) = (p.season_len, p.pixels_per_field);
    let n = p.n_fields * per;
    let prior = WeightedIndex::new(k.crop_prior).expect("valid prior");

    let mut samples = Vec::with_capacity(n);
    let mut series = Vec::with_capacity(n * t_len * SERIES_CHANNELS);
    let mut stamps = Vec::with_capacity(n * t_len);
    let mut weather = Vec::with_capacity(n * WEATHER_FEATURES);
    let mut dem = Vec::with_capacity(n * DEM_FEATURES);
    let mut crop = Vec::with_capacity(n);
    let mut yields = Vec::with_capacity(n);
    let mut fertility = Vec::with_capacity(n);
    let mut field_crop = Vec::with_capacity(p.n_fields);

    for f in 0..p.n_fields {
        let mut fr = stream(p.seed, 1, f as u64);
        let c = prior.sample(&mut fr);
        let year = f % p.years;
        let m = fr.gen_range(k.field_fertility.0..k.field_fertility.1);
        let jitter = fr.gen_range(0.0..5.0);
        let field_weather = [
            15.0 + 2.0 * year as f64 + noise(&mut fr, 1.0),
            50.0 + noise(&mut fr, 10.0),
            200.0 + noise(&mut fr, 20.0),
            0.6 + noise(&mut fr, 0.05),
        ];
        let field_dem = [
            300.0 + noise(&mut fr, 50.0),
            fr.gen_range(0.0..10.0),
            fr.gen_range(-1.0f64..1.0),
            fr.gen_range(-1.0f64..1.0),
            m + noise(&mut fr, 0.05),
        ];
        field_crop.push(c);
        for q in 0..per {
            let id = f * per + q;
            let mut r = stream(p.seed, 2, id as u64);
            let phi = m + r.gen_range(-k.pixel_offset..k.pixel_offset);
            let gain = 1.0 + p.kappa * (phi - 0.5);
            for t in 0..t_len {
                let cloudy = r.gen_bool(p.cloud_prob);
                let scene = if cloudy {
                    CLOUD_SCENES[r.gen_range(0..CLOUD_SCENES.len())]
                } else {
                    CLEAR_SCENE
                };
                for b in 0..SPECTRAL_BANDS {
                    let clean = if cloudy {
                        k.cloud_level
                    } else {
                        tpl[(c * t_len + t) * SPECTRAL_BANDS + b] * gain
                    };
                    series.push((clean + noise(&mut r, p.spectral_noise)) as f32);
                }
                series.extend((0..SCENE_CLASSES).map(|s| if s == scene { 1.0f32 } else { 0.0 }));
                stamps.push(((t_len - 1 - t) as f64 * k.days_per_step + jitter) as f32);
            }
            weather.extend(
                field_weather
                    .iter()
                    .map(|&v| (v + noise(&mut r, 0.01 * v.abs().max(1.0))) as f32),
            );
            dem.extend(
                field_dem
                    .iter()
                    .map(|&v| (v + noise(&mut r, 0.01 * v.abs().max(0.1))) as f32),
            );
            let y = (k.yield_base + k.yield_gain * phi + noise(&mut r, p.yield_noise)).max(0.1);
            yields.push(y as f32);
            crop.push(c as u32);
            fertility.push(phi);
            samples.push(SampleMeta {
                id,
                group: f,
                stratum: year,
            });
        }
    }

    let dataset = Dataset {
        name: "pixel".into(),
        samples,
        modalities: vec![
            (
                "satellite".into(),
                ModalityData::Series {
                    steps: t_len,
                    features: SERIES_CHANNELS,
                    values: series,
                    timestamps: stamps,
                    lengths: vec![t_len; n],
                },
            ),
            (
                "weather".into(),
                ModalityData::Features {
                    dim: WEATHER_FEATURES,
                    values: weather,
                },
            ),
            (
                "dem".into(),
                ModalityData::Features {
                    dim: DEM_FEATURES,
                    values: dem,
                },
            ),
            (
                "crop".into(),
                ModalityData::Classes {
                    classes: CROPS,
                    values: crop,
                },
            ),
            (
                "yield".into(),
                ModalityData::Features {
                    dim: 1,
                    values: yields,
                },
            ),
        ],
        catalog: pixel_catalog(t_len),
    };
    let ledger = PixelLedger {
        params: p.clone(),
        constants: k,
        templates: tpl,
        fertility,
        field_crop,
    };
    Ok((dataset, ledger))
}

fn tabular(name: &str, features: usize, hidden: usize) -> CatalogEntry {
    CatalogEntry {
        spec: ModalitySpec {
            name: name.into(),
            kind: ModalityKind::Tabular,
            channels: features,
            extent: None,
            max_len: None,
            classes: None,
        },
        encoder: Some(EncoderConfig::Tabular {
            features,
            hidden: 32,
            latent: 32,
        }),
        target: Some(TargetSpec {
            head: HeadSpec {
                kind: HeadKind::Regression,
                outputs: features,
                layout: HeadLayout::BnMlp { hidden },
            },
            metrics: vec![MetricKind::R2, MetricKind::Mae],
        }),
        imagery: false,
    }
}

pub fn pixel_catalog(season_len: usize) -> Vec<CatalogEntry> {
    let mut yield_entry = tabular("yield", 1, 64);
    yield_entry.encoder = None;
    vec![
        CatalogEntry {
            spec: ModalitySpec {
                name: "satellite".into(),
                kind: ModalityKind::Timeseries,
                channels: SERIES_CHANNELS,
                extent: None,
                max_len: Some(season_len),
                classes: None,
            },
            encoder: Some(EncoderConfig::Transformer {
                features: SERIES_CHANNELS,
                d_model: 32,
                layers: 4,
                ff_dim: 64,
            }),
            target: None,
            imagery: true,
        },
        tabular("weather", WEATHER_FEATURES, 32),
        tabular("dem", DEM_FEATURES, 32),
        CatalogEntry {
            spec: ModalitySpec {
                name: "crop".into(),
                kind: ModalityKind::Categorical,
                channels: 0,
                extent: None,
                max_len: None,
                classes: Some(CROPS),
            },
            encoder: Some(EncoderConfig::Embedding {
                classes: CROPS,
                dim: 32,
            }),
            target: Some(TargetSpec {
                head: HeadSpec {
                    kind: HeadKind::Classification,
                    outputs: CROPS,
                    layout: HeadLayout::BnMlp { hidden: 64 },
                },
                metrics: vec![MetricKind::MicroF1, MetricKind::Accuracy],
            }),
            imagery: false,
        },
        yield_entry,
    ]
}

const GRID: usize = 201;

impl PixelLedger {
    fn template(&self, c: usize, t: usize, b: usize) -> f64 {
        self.templates[(c * self.params.season_len + t) * SPECTRAL_BANDS + b]
    }

    /// Marginal prior density of fertility: field level plus pixel offset.
    pub fn fertility_density(&self, phi: f64) -> f64 {
        let (lo, hi) = self.constants.field_fertility;
        let d = self.constants.pixel_offset;
        let overlap = ((phi + d).min(hi) - (phi - d).max(lo)).max(0.0);
        overlap / ((hi - lo) * 2.0 * d)
    }

    /// Unnormalized log posterior over `(crop, fertility grid point)` for one
    /// `season_len x channels` series; obstructed steps are ignored.
    fn log_posterior(&self, series: &[f32]) -> Vec<[f64; GRID]> {
        let t_len = self.params.season_len;
        let sd = self.params.spectral_noise.max(1e-3);
        let kappa = self.params.kappa;
        (0..CROPS)
            .map(|c| {
                let mut out = [f64::NEG_INFINITY; GRID];
                let log_prior_c = self.constants.crop_prior[c].ln();
                for (g, slot) in out.iter_mut().enumerate() {
                    let phi = g as f64 / (GRID - 1) as f64;
                    let dens = self.fertility_density(phi);
                    if dens <= 0.0 {
                        continue;
                    }
                    let gain = 1.0 + kappa * (phi - 0.5);
                    let mut sse = 0.0;
                    for t in 0..t_len {
                        let row = &series[t * SERIES_CHANNELS..(t + 1) * SERIES_CHANNELS];
                        if row[SPECTRAL_BANDS + CLEAR_SCENE] < 0.5 {
                            continue;
                        }
                        for (b, &x) in row[..SPECTRAL_BANDS].iter().enumerate() {
                            sse += (x as f64 - self.template(c, t, b) * gain).powi(2);
                        }
                    }
                    *slot = log_prior_c + dens.ln() - sse / (2.0 * sd * sd);
                }
                out
            })
            .collect()
    }

    /// Posterior probability of each crop given the series.
    pub fn crop_posterior(&self, series: &[f32]) -> [f64; CROPS] {
        let lp = self.log_posterior(series);
        let max = lp
            .iter()
            .flat_map(|r| r.iter())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut post = [0.0; CROPS];
        for (c, row) in lp.iter().enumerate() {
            post[c] = row.iter().map(|&v| (v - max).exp()).sum();
        }
        let z: f64 = post.iter().sum();
        post.map(|v| v / z)
    }

    /// Posterior mean yield given the series, conditioning on `crop` when
    /// given and marginalizing over crops otherwise.
    pub fn oracle_yield(&self, series: &[f32], crop: Option<usize>) -> f64 {
        let lp = self.log_posterior(series);
        let rows: Vec<usize> = crop.map_or((0..CROPS).collect(), |c| vec![c]);
        let max = rows
            .iter()
            .flat_map(|&c| lp[c].iter())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m) = (0.0, 0.0);
        for &c in &rows {
            for (g, &v) in lp[c].iter().enumerate() {
                let w = (v - max).exp();
                z += w;
                m += w * g as f64 / (GRID - 1) as f64;
            }
        }
        self.constants.yield_base + self.constants.yield_gain * m / z
    }

    /// Prediction of a model that sees nothing: the prior mean yield.
    pub fn floor_yield(&self) -> f64 {
        self.constants.yield_base + self.constants.yield_gain * 0.5
    }
}

/// Satellite series of sample `i`, `steps x channels` row-major.
pub fn series_of(dataset: &Dataset, i: usize) -> Result<&[f32]> {
    match dataset.modality("satellite")? {
        ModalityData::Series {
            steps,
            features,
            values,
            ..
        } => Ok(&values[i * steps * features..(i + 1) * steps * features]),
        _ => Err(Error::Config("satellite is not a series".into())),
    }
}

/// Error rate of the Bayes crop classifier over the whole dataset.
pub fn bayes_crop_error(dataset: &Dataset, ledger: &PixelLedger) -> Result<f64> {
    let labels = dataset.class_labels("crop")?;
    let mut wrong = 0usize;
    for (i, &c) in labels.iter().enumerate() {
        let post = ledger.crop_posterior(series_of(dataset, i)?);
        let best = (0..CROPS)
            .max_by(|&a, &b| post[a].total_cmp(&post[b]))
            .expect("crops");
        wrong += usize::from(best != c as usize);
    }
    Ok(wrong as f64 / labels.len() as f64)
}

/// Mean absolute yield error of the prior-mean predictor minus that of the
/// Bayes oracle told the correct crop: how much yield information the
/// series carries once the crop is known. Yield noise is switched off.
pub fn coupling_proxy(params: &PixelParams) -> Result<f64> {
    let p = PixelParams {
        yield_noise: 0.0,
        ..params.clone()
    };
    let (ds, ledger) = gen_pixel_dataset(&p)?;
    let labels = ds.class_labels("crop")?;
    let floor = ledger.floor_yield();
    let (mut floor_err, mut oracle_err) = (0.0, 0.0);
    for i in 0..ds.len() {
        let y = ledger.constants.yield_base + ledger.constants.yield_gain * ledger.fertility[i];
        floor_err += (y - floor).abs();
        oracle_err += (y - ledger.oracle_yield(series_of(&ds, i)?, Some(labels[i] as usize))).abs();
    }
    Ok((floor_err - oracle_err) / ds.len() as f64)
}
