use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::encoders::ModalityBatch;
use crate::error::{Error, Result};
use crate::heads::HeadKind;

use super::config::CatalogEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: usize,
    /// Samples sharing a group (a field, a patch) are never split apart.
    pub group: usize,
    pub stratum: usize,
}

/// Column storage for one modality over every sample.
#[derive(Debug, Clone, PartialEq)]
pub enum ModalityData {
    /// `steps x features` values per sample, padded; the first `lengths[i]`
    /// steps of sample `i` are valid.
    Series {
        steps: usize,
        features: usize,
        values: Vec<f32>,
        timestamps: Vec<f32>,
        lengths: Vec<usize>,
    },
    Features {
        dim: usize,
        values: Vec<f32>,
    },
    Classes {
        classes: usize,
        values: Vec<u32>,
    },
    Images {
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    },
    ClassMaps {
        classes: usize,
        height: usize,
        width: usize,
        values: Vec<u8>,
    },
}

impl ModalityData {
    pub fn len(&self) -> usize {
        match self {
            ModalityData::Series { lengths, .. } => lengths.len(),
            ModalityData::Features { dim, values } => values.len() / dim,
            ModalityData::Classes { values, .. } => values.len(),
            ModalityData::Images {
                channels,
                height,
                width,
                values,
            } => values.len() / (channels * height * width),
            ModalityData::ClassMaps {
                height,
                width,
                values,
                ..
            } => values.len() / (height * width),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample element count of the stored value column.
    pub fn stride(&self) -> usize {
        match *self {
            ModalityData::Series {
                steps, features, ..
            } => steps * features,
            ModalityData::Features { dim, .. } => dim,
            ModalityData::Classes { .. } => 1,
            ModalityData::Images {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
            ModalityData::ClassMaps { height, width, .. } => height * width,
        }
    }
}

/// Per-channel affine standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn fit(columns: usize, rows: impl Iterator<Item = impl AsRef<[f32]>>) -> Self {
        let mut sum = vec![0.0f64; columns];
        let mut sq = vec![0.0f64; columns];
        let mut n = 0usize;
        for row in rows {
            for (c, &v) in row.as_ref().iter().enumerate() {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() < 1e-8 {
                    1.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, channel: usize, v: f32) -> f32 {
        ((v as f64 - self.mean[channel]) / self.std[channel]) as f32
    }

    pub fn invert(&self, channel: usize, v: f32) -> f32 {
        (v as f64 * self.std[channel] + self.mean[channel]) as f32
    }
}

/// Standardizers keyed by modality name.
pub type Normalization = BTreeMap<String, Standardizer>;

/// Training-time target of one task for one batch.
#[derive(Debug, Clone)]
pub enum TargetBatch {
    /// One class per sample, or per pixel for segmentation.
    Classes(Vec<usize>),
    Values(Tensor<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<SampleMeta>,
    pub modalities: Vec<(String, ModalityData)>,
    pub catalog: Vec<CatalogEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, data) in &self.modalities {
            if data.len() != self.samples.len() {
                return Err(Error::Config(format!(
                    "modality `{name}` holds {} samples, dataset has {}",
                    data.len(),
                    self.samples.len()
                )));
            }
        }
        for e in &self.catalog {
            e.spec.validate()?;
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Result<&ModalityData> {
        self.modalities
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::MissingModality(name.to_string()))
    }

    pub fn catalog_entry(&self, name: &str) -> Result<&CatalogEntry> {
        self.catalog
            .iter()
            .find(|e| e.spec.name == name)
            .ok_or_else(|| Error::MissingModality(name.to_string()))
    }

    /// Fits standardizers on `train` for continuous inputs and unbounded
    /// regression targets among `names`.
    pub fn fit_normalization(
        &self,
        names: &[(&str, Option<HeadKind>)],
        train: &[usize],
    ) -> Result<Normalization> {
        let mut out = Normalization::new();
        for &(name, target_kind) in names {
            let data = self.modality(name)?;
            let st = match (data, target_kind) {
                (
                    ModalityData::Series {
                        steps,
                        features,
                        values,
                        lengths,
                        ..
                    },
                    None,
                ) => {
                    let rows = train.iter().flat_map(|&i| {
                        (0..lengths[i]).map(move |t| {
                            let off = (i * steps + t) * features;
                            &values[off..off + features]
                        })
                    });
                    Some(Standardizer::fit(*features, rows))
                }
                (ModalityData::Features { dim, values }, None | Some(HeadKind::Regression)) => {
                    Some(Standardizer::fit(
                        *dim,
                        train.iter().map(|&i| &values[i * dim..(i + 1) * dim]),
                    ))
                }
                _ => None,
            };
            if let Some(st) = st {
                out.insert(name.to_string(), st);
            }
        }
        Ok(out)
    }

    pub fn input_batch(
        &self,
        name: &str,
        idx: &[usize],
        norm: &Normalization,
    ) -> Result<ModalityBatch<f32>> {
        let st = norm.get(name);
        let b = idx.len();
        Ok(match self.modality(name)? {
            ModalityData::Series {
                steps,
                features,
                values,
                timestamps,
                lengths,
            } => {
                let (t, f) = (*steps, *features);
                let mut v = Vec::with_capacity(b * t * f);
                let mut ts = Vec::with_capacity(b * t);
                let mut mask = Vec::with_capacity(b * t);
                for &i in idx {
                    for step in 0..t {
                        let off = (i * t + step) * f;
                        let valid = step < lengths[i];
                        for (c, &x) in values[off..off + f].iter().enumerate() {
                            v.push(match (st, valid) {
                                (_, false) => 0.0,
                                (Some(st), true) => st.apply(c, x),
                                (None, true) => x,
                            });
                        }
                        ts.push(if valid {
                            timestamps[i * t + step] as f64
                        } else {
                            0.0
                        });
                        mask.push(valid);
                    }
                }
                ModalityBatch::Series {
                    values: Tensor::new(vec![b, t, f], v)?,
                    timestamps: ts,
                    mask,
                }
            }
            ModalityData::Features { dim, values } => {
                let mut v = Vec::with_capacity(b * dim);
                for &i in idx {
                    for (c, &x) in values[i * dim..(i + 1) * dim].iter().enumerate() {
                        v.push(st.map_or(x, |st| st.apply(c, x)));
                    }
                }
                ModalityBatch::Features(Tensor::new(vec![b, *dim], v)?)
            }
            ModalityData::Classes { values, .. } => {
                ModalityBatch::Classes(idx.iter().map(|&i| values[i] as usize).collect())
            }
            ModalityData::Images {
                channels,
                height,
                width,
                values,
            } => {
                let n = channels * height * width;
                let mut v = Vec::with_capacity(b * n);
                for &i in idx {
                    v.extend_from_slice(&values[i * n..(i + 1) * n]);
                }
                ModalityBatch::Images(Tensor::new(vec![b, *channels, *height, *width], v)?)
            }
            ModalityData::ClassMaps { .. } => {
                return Err(Error::Config(format!(
                    "class-map modality `{name}` cannot be an input"
                )))
            }
        })
    }

    pub fn target_batch(
        &self,
        name: &str,
        idx: &[usize],
        norm: &Normalization,
    ) -> Result<TargetBatch> {
        let st = norm.get(name);
        let b = idx.len();
        Ok(match self.modality(name)? {
            ModalityData::Classes { values, .. } => {
                TargetBatch::Classes(idx.iter().map(|&i| values[i] as usize).collect())
            }
            ModalityData::ClassMaps {
                height,
                width,
                values,
                ..
            } => {
                let n = height * width;
                TargetBatch::Classes(
                    idx.iter()
                        .flat_map(|&i| values[i * n..(i + 1) * n].iter().map(|&c| c as usize))
                        .collect(),
                )
            }
            ModalityData::Features { dim, values } => {
                let mut v = Vec::with_capacity(b * dim);
                for &i in idx {
                    for (c, &x) in values[i * dim..(i + 1) * dim].iter().enumerate() {
                        v.push(st.map_or(x, |st| st.apply(c, x)));
                    }
                }
                TargetBatch::Values(Tensor::new(vec![b, *dim], v)?)
            }
            ModalityData::Images {
                channels,
                height,
                width,
                values,
            } => {
                let n = channels * height * width;
                let mut v = Vec::with_capacity(b * n);
                for &i in idx {
                    v.extend_from_slice(&values[i * n..(i + 1) * n]);
                }
                TargetBatch::Values(Tensor::new(vec![b, *channels, *height, *width], v)?)
            }
            ModalityData::Series { .. } => {
                return Err(Error::Config(format!(
                    "series modality `{name}` cannot be a target"
                )))
            }
        })
    }

    /// Class label of every sample for a categorical modality.
    pub fn class_labels(&self, name: &str) -> Result<&[u32]> {
        match self.modality(name)? {
            ModalityData::Classes { values, .. } => Ok(values),
            _ => Err(Error::Config(format!(
                "modality `{name}` is not categorical"
            ))),
        }
    }
}
