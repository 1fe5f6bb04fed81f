//! Dataset directories: `manifest.json`, `samples.csv`, one tensor blob per
//! stored column and `ledger.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::{CatalogEntry, Dataset, ModalityData, SampleMeta};

pub const SCHEMA_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 8] = b"MTAXTNSR";

/// Element type of a tensor blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobData {
    F32,
    U8,
    U32,
}

impl BlobData {
    fn code(self) -> u8 {
        match self {
            BlobData::F32 => 0,
            BlobData::U8 => 1,
            BlobData::U32 => 2,
        }
    }
}

/// Binary tensor: magic, version (u32), element code (u8), rank (u32),
/// dims (u64 each), then little-endian elements.
#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Vec<usize>, Vec<f32>),
    U8(Vec<usize>, Vec<u8>),
    U32(Vec<usize>, Vec<u32>),
}

impl Blob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (kind, shape) = match self {
            Blob::F32(s, _) => (BlobData::F32, s),
            Blob::U8(s, _) => (BlobData::U8, s),
            Blob::U32(s, _) => (BlobData::U32, s),
        };
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.push(kind.code());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self {
            Blob::F32(_, v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Blob::U8(_, v) => out.extend_from_slice(v),
            Blob::U32(_, v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Blob> {
        let bad = |d: &str| Error::format(origin, d.to_string());
        if bytes.len() < 17 || &bytes[..8] != BLOB_MAGIC {
            return Err(bad("not a tensor blob"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(bad(&format!("unsupported blob version {version}")));
        }
        let code = bytes[12];
        let rank = u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
        let mut pos = 17;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = bytes
                .get(pos..pos + 8)
                .ok_or_else(|| bad("truncated shape"))?;
            shape.push(u64::from_le_bytes(d.try_into().expect("8 bytes")) as usize);
            pos += 8;
        }
        let n: usize = shape.iter().product();
        let body = &bytes[pos..];
        let width = match code {
            0 | 2 => 4,
            1 => 1,
            _ => return Err(bad(&format!("unknown element code {code}"))),
        };
        if body.len() != n * width {
            return Err(bad("element count does not match shape"));
        }
        Ok(match code {
            0 => Blob::F32(
                shape,
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                    .collect(),
            ),
            1 => Blob::U8(shape, body.to_vec()),
            _ => Blob::U32(
                shape,
                body.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4")))
                    .collect(),
            ),
        })
    }
}

/// How one modality is laid out on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layout", rename_all = "snake_case")]
pub enum StoredModality {
    Series {
        values: String,
        timestamps: String,
        lengths: String,
    },
    Features {
        values: String,
    },
    Classes {
        classes: usize,
        values: String,
    },
    Images {
        values: String,
    },
    ClassMaps {
        classes: usize,
        values: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub samples: usize,
    /// Generator parameters and constants, as given.
    pub generator: serde_json::Value,
    pub modalities: Vec<(String, StoredModality)>,
    pub catalog: Vec<CatalogEntry>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(dir: &Path, file: &str) -> Result<Blob> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Blob::from_bytes(&bytes, &path)
}

/// Writes `dataset` into `dir` and returns the manifest.
pub fn write_dataset(
    dir: &Path,
    dataset: &Dataset,
    generator: serde_json::Value,
    ledger: &serde_json::Value,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = dataset.len();
    let mut stored = Vec::new();
    for (name, data) in &dataset.modalities {
        let file = |suffix: &str| format!("{name}{suffix}.bin");
        let entry = match data {
            ModalityData::Series {
                steps,
                features,
                values,
                timestamps,
                lengths,
            } => {
                write_file(
                    &dir.join(file("")),
                    &Blob::F32(vec![n, *steps, *features], values.clone()).to_bytes(),
                )?;
                write_file(
                    &dir.join(file(".time")),
                    &Blob::F32(vec![n, *steps], timestamps.clone()).to_bytes(),
                )?;
                let lens = lengths.iter().map(|&l| l as u32).collect();
                write_file(
                    &dir.join(file(".len")),
                    &Blob::U32(vec![n], lens).to_bytes(),
                )?;
                StoredModality::Series {
                    values: file(""),
                    timestamps: file(".time"),
                    lengths: file(".len"),
                }
            }
            ModalityData::Features { dim, values } => {
                write_file(
                    &dir.join(file("")),
                    &Blob::F32(vec![n, *dim], values.clone()).to_bytes(),
                )?;
                StoredModality::Features { values: file("") }
            }
            ModalityData::Classes { classes, values } => {
                write_file(
                    &dir.join(file("")),
                    &Blob::U32(vec![n], values.clone()).to_bytes(),
                )?;
                StoredModality::Classes {
                    classes: *classes,
                    values: file(""),
                }
            }
            ModalityData::Images {
                channels,
                height,
                width,
                values,
            } => {
                write_file(
                    &dir.join(file("")),
                    &Blob::F32(vec![n, *channels, *height, *width], values.clone()).to_bytes(),
                )?;
                StoredModality::Images { values: file("") }
            }
            ModalityData::ClassMaps {
                classes,
                height,
                width,
                values,
            } => {
                write_file(
                    &dir.join(file("")),
                    &Blob::U8(vec![n, *height, *width], values.clone()).to_bytes(),
                )?;
                StoredModality::ClassMaps {
                    classes: *classes,
                    values: file(""),
                }
            }
        };
        stored.push((name.clone(), entry));
    }
    let mut csv = String::from("sample_id,group_id,stratum\n");
    for m in &dataset.samples {
        csv.push_str(&format!("{},{},{}\n", m.id, m.group, m.stratum));
    }
    write_file(&dir.join("samples.csv"), csv.as_bytes())?;
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        name: dataset.name.clone(),
        samples: n,
        generator,
        modalities: stored,
        catalog: dataset.catalog.clone(),
    };
    write_file(
        &dir.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes(),
    )?;
    write_file(
        &dir.join("ledger.json"),
        (serde_json::to_string(ledger)? + "\n").as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported schema version {}", m.schema_version),
        ));
    }
    Ok(m)
}

pub fn read_ledger(dir: &Path) -> Result<serde_json::Value> {
    let path = dir.join("ledger.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let path = dir.join("samples.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("sample_id,group_id,stratum") {
        return Err(Error::format(&path, "unexpected header"));
    }
    let samples = lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<usize> = l
                .split(',')
                .map(|x| x.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(&path, format!("line {}", i + 2)))?;
            match f[..] {
                [id, group, stratum] => Ok(SampleMeta { id, group, stratum }),
                _ => Err(Error::format(&path, format!("line {}", i + 2))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let wrong = |file: &str| Error::format(dir.join(file), "unexpected blob layout");
    let mut modalities = Vec::new();
    for (name, stored) in &manifest.modalities {
        let data = match stored {
            StoredModality::Series {
                values,
                timestamps,
                lengths,
            } => {
                let (Blob::F32(s, v), Blob::F32(_, t), Blob::U32(_, l)) = (
                    read_blob(dir, values)?,
                    read_blob(dir, timestamps)?,
                    read_blob(dir, lengths)?,
                ) else {
                    return Err(wrong(values));
                };
                ModalityData::Series {
                    steps: s[1],
                    features: s[2],
                    values: v,
                    timestamps: t,
                    lengths: l.into_iter().map(|x| x as usize).collect(),
                }
            }
            StoredModality::Features { values } => match read_blob(dir, values)? {
                Blob::F32(s, v) if s.len() == 2 => ModalityData::Features {
                    dim: s[1],
                    values: v,
                },
                _ => return Err(wrong(values)),
            },
            StoredModality::Classes { classes, values } => match read_blob(dir, values)? {
                Blob::U32(_, v) => ModalityData::Classes {
                    classes: *classes,
                    values: v,
                },
                _ => return Err(wrong(values)),
            },
            StoredModality::Images { values } => match read_blob(dir, values)? {
                Blob::F32(s, v) if s.len() == 4 => ModalityData::Images {
                    channels: s[1],
                    height: s[2],
                    width: s[3],
                    values: v,
                },
                _ => return Err(wrong(values)),
            },
            StoredModality::ClassMaps { classes, values } => match read_blob(dir, values)? {
                Blob::U8(s, v) if s.len() == 3 => ModalityData::ClassMaps {
                    classes: *classes,
                    height: s[1],
                    width: s[2],
                    values: v,
                },
                _ => return Err(wrong(values)),
            },
        };
        modalities.push((name.clone(), data));
    }
    let ds = Dataset {
        name: manifest.name,
        samples,
        modalities,
        catalog: manifest.catalog,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_roundtrip_and_corruption() {
        let b = Blob::F32(vec![2, 3], vec![1.0, -2.5, 0.0, 4.0, 5.0, 6.0]);
        let bytes = b.to_bytes();
        assert_eq!(Blob::from_bytes(&bytes, Path::new("x")).unwrap(), b);
        assert!(Blob::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Blob::from_bytes(&bad, Path::new("x")).is_err());
    }
}
