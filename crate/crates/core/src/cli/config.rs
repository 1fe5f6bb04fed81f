use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multitask::{ModalityRoleConfig, TrainConfig};
use crate::synthdata::GeneratorParams;

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.2, 0.2];

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    /// An existing dataset directory.
    Path { path: PathBuf },
    /// Generated into the run directory.
    Generate(GeneratorParams),
}

/// One experiment row: data, modality roles, training setup and seed.
///
/// The top-level `seed` drives generation, the split and training alike;
/// seeds inside `dataset` and `train` are overwritten by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub roles: ModalityRoleConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_split() -> [f64; 3] {
    DEFAULT_SPLIT
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn toml_err(path: &Path, e: toml::de::Error) -> Error {
    Error::format(path, e.message().to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        // Parse the dataset table separately so a bad generator field gets
        // its own message instead of an untagged-enum mismatch.
        let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_err(path, e))?;
        let dataset = table
            .remove("dataset")
            .ok_or_else(|| Error::format(path, "missing [dataset] section"))?;
        let dataset = parse_dataset(dataset, path)?;
        table.insert(
            "dataset".into(),
            toml::Value::try_from(&dataset).map_err(|e| Error::format(path, e.to_string()))?,
        );
        let mut cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| toml_err(path, e))?;
        if let DatasetSource::Path { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?, path)
    }

    /// Every `*.toml` in a directory, sorted by file name, or a single file.
    pub fn load_all(path: &Path) -> Result<Vec<(PathBuf, Self)>> {
        if !path.is_dir() {
            return Ok(vec![(path.to_path_buf(), Self::load(path)?)]);
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!(
                "no .toml experiment configs in {}",
                path.display()
            )));
        }
        files
            .into_iter()
            .map(|f| Self::load(&f).map(|c| (f, c)))
            .collect()
    }

    /// Applies `seed` everywhere it matters.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let DatasetSource::Generate(g) = &mut self.dataset {
            g.set_seed(self.seed);
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

fn parse_dataset(value: toml::Value, path: &Path) -> Result<DatasetSource> {
    let toml::Value::Table(t) = value else {
        return Err(Error::format(path, "[dataset] must be a table"));
    };
    if let Some(p) = t.get("path") {
        if t.len() > 1 {
            return Err(Error::format(
                path,
                "[dataset] takes either `path` or generator parameters, not both",
            ));
        }
        let p = p
            .as_str()
            .ok_or_else(|| Error::format(path, "dataset path must be a string"))?;
        return Ok(DatasetSource::Path { path: p.into() });
    }
    let g: GeneratorParams = t
        .try_into()
        .map_err(|e: toml::de::Error| Error::format(path, format!("[dataset]: {}", e.message())))?;
    g.validate()?;
    Ok(DatasetSource::Generate(g))
}

/// Generator parameters from either a bare generator file or the
/// `[dataset]` section of an experiment config.
pub fn load_generator(path: &Path) -> Result<(String, GeneratorParams)> {
    let text = read_text(path)?;
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| toml_err(path, e))?;
    let name = table
        .get("name")
        .and_then(|v| v.as_str())
        .map(str::to_string);
    let section = match table.remove("dataset") {
        Some(d) => d,
        None => {
            table.remove("name");
            toml::Value::Table(table)
        }
    };
    match parse_dataset(section, path)? {
        DatasetSource::Generate(g) => {
            let name = name.unwrap_or_else(|| kind_name(&g).to_string());
            Ok((name, g))
        }
        DatasetSource::Path { .. } => Err(Error::Config(format!(
            "{} points at an existing dataset; nothing to generate",
            path.display()
        ))),
    }
}

pub fn kind_name(g: &GeneratorParams) -> &'static str {
    match g {
        GeneratorParams::Pixel(_) => "pixel",
        GeneratorParams::Patch(_) => "patch",
        GeneratorParams::Tree(_) => "tree",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PIXEL: &str = r#"
name = "mtl"
seed = 4

[dataset]
kind = "pixel"
n_fields = 20
kappa = 0.5

[roles]
main_task = "yield"
modalities = [
  { name = "satellite", role = "input" },
  { name = "yield", role = "target", weight = 0.67 },
  { name = "crop", role = "target", weight = 0.33 },
]

[train]
epochs = 2
"#;

    #[test]
    fn parses_and_roundtrips() {
        let cfg = ExperimentConfig::from_toml(PIXEL, Path::new("x.toml"))
            .unwrap()
            .with_seed(None);
        let DatasetSource::Generate(GeneratorParams::Pixel(p)) = &cfg.dataset else {
            panic!()
        };
        assert_eq!((p.n_fields, p.kappa, p.seed), (20, 0.5, 4));
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.split, DEFAULT_SPLIT);
        let again =
            ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("x.toml")).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(cfg.clone().with_seed(Some(9)).train.seed, 9);
    }

    #[test]
    fn rejects_bad_generator_and_unknown_fields() {
        let bad = PIXEL.replace("kappa = 0.5", "kappa = 1.5");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad, Path::new("x")),
            Err(Error::Config(_))
        ));
        let typo = PIXEL.replace("kappa = 0.5", "kapa = 0.5");
        let err = ExperimentConfig::from_toml(&typo, Path::new("x"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("kapa"), "{err}");
        let extra = PIXEL.replace("seed = 4", "seed = 4\nepochs = 3");
        assert!(ExperimentConfig::from_toml(&extra, Path::new("x")).is_err());
    }

    #[test]
    fn dataset_path_is_relative_to_config() {
        let text = PIXEL.replace(
            "kind = \"pixel\"\nn_fields = 20\nkappa = 0.5",
            "path = \"data/pixel\"",
        );
        let cfg = ExperimentConfig::from_toml(&text, Path::new("configs/a.toml")).unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSource::Path {
                path: "configs/data/pixel".into()
            }
        );
    }
}
