use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, ModalitySpec};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Target,
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRole {
    pub name: String,
    pub role: Role,
    /// Raw loss weight; only read for targets.
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Which modality feeds the model, which is predicted, which is ignored.
/// Declaration order fixes encoder order in the fused representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRoleConfig {
    pub main_task: String,
    pub modalities: Vec<ModalityRole>,
}

impl ModalityRoleConfig {
    pub fn role(&self, name: &str) -> Role {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .map_or(Role::Unused, |m| m.role)
    }

    pub fn with_role(&self, name: &str, role: Role) -> Self {
        let mut out = self.clone();
        match out.modalities.iter_mut().find(|m| m.name == name) {
            Some(m) => m.role = role,
            None => out.modalities.push(ModalityRole {
                name: name.to_string(),
                role,
                weight: 1.0,
            }),
        }
        out
    }

    pub fn inputs(&self) -> impl Iterator<Item = &ModalityRole> {
        self.modalities.iter().filter(|m| m.role == Role::Input)
    }

    pub fn targets(&self) -> impl Iterator<Item = &ModalityRole> {
        self.modalities.iter().filter(|m| m.role == Role::Target)
    }

    /// Checks the role invariants against a dataset catalog.
    pub fn validate(&self, catalog: &[CatalogEntry]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for m in &self.modalities {
            if !seen.insert(m.name.as_str()) {
                return Err(Error::Config(format!(
                    "modality `{}` declared twice",
                    m.name
                )));
            }
            let entry = catalog
                .iter()
                .find(|e| e.spec.name == m.name)
                .ok_or_else(|| Error::Config(format!("unknown modality `{}`", m.name)))?;
            match m.role {
                Role::Input if entry.encoder.is_none() => {
                    return Err(Error::Config(format!(
                        "modality `{}` cannot be an input",
                        m.name
                    )))
                }
                Role::Target if entry.target.is_none() => {
                    return Err(Error::Config(format!(
                        "modality `{}` cannot be a target",
                        m.name
                    )))
                }
                Role::Target if !(m.weight > 0.0 && m.weight.is_finite()) => {
                    return Err(Error::Config(format!(
                        "task `{}` needs a positive weight",
                        m.name
                    )))
                }
                _ => {}
            }
        }
        if self.role(&self.main_task) != Role::Target {
            return Err(Error::Config(format!(
                "main task `{}` must be a target",
                self.main_task
            )));
        }
        if self.inputs().next().is_none() {
            return Err(Error::Config(
                "at least one modality must be an input".into(),
            ));
        }
        for e in catalog.iter().filter(|e| e.imagery) {
            if self.role(&e.spec.name) != Role::Input {
                return Err(Error::Config(format!(
                    "imagery modality `{}` must stay an input",
                    e.spec.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    R2,
    Mae,
    MicroF1,
    Accuracy,
    Iou,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::R2 => "r2",
            MetricKind::Mae => "mae",
            MetricKind::MicroF1 => "micro_f1",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Iou => "iou",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Mae)
    }
}

/// How a modality is predicted when it is a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub head: HeadSpec,
    pub metrics: Vec<MetricKind>,
}

/// One modality a dataset offers and the ways it may be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub spec: ModalitySpec,
    pub encoder: Option<EncoderConfig>,
    pub target: Option<TargetSpec>,
    /// Remote-sensing imagery stays an input in every configuration.
    #[serde(default)]
    pub imagery: bool,
}

/// A configured prediction target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: HeadKind,
    pub loss: LossKind,
    pub metrics: Vec<MetricKind>,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(name: &str, kind: HeadKind, metrics: Vec<MetricKind>, weight: f64) -> Result<Self> {
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::Config(format!(
                "task `{name}` needs a positive weight, got {weight}"
            )));
        }
        if metrics.is_empty() {
            return Err(Error::Config(format!("task `{name}` has no metric")));
        }
        Ok(TaskSpec {
            name: name.to_string(),
            kind,
            loss: loss_for(kind),
            metrics,
            weight,
        })
    }

    /// The metric used for model selection.
    pub fn primary_metric(&self) -> MetricKind {
        self.metrics[0]
    }
}

pub fn loss_for(kind: HeadKind) -> LossKind {
    if kind.is_classification() {
        LossKind::CrossEntropy
    } else {
        LossKind::Mse
    }
}

/// Scales positive raw weights to sum to one, preserving order.
pub fn normalize_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("no weights to normalize".into()));
    }
    if let Some(bad) = raw.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "weights must be positive, got {bad}"
        )));
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Resolves the tasks of a role configuration against a catalog, in
/// declaration order.
pub fn resolve_tasks(
    roles: &ModalityRoleConfig,
    catalog: &[CatalogEntry],
) -> Result<Vec<TaskSpec>> {
    roles.validate(catalog)?;
    roles
        .targets()
        .map(|m| {
            let entry = catalog
                .iter()
                .find(|e| e.spec.name == m.name)
                .expect("validated");
            let target = entry.target.as_ref().expect("validated");
            TaskSpec::new(&m.name, target.head.kind, target.metrics.clone(), m.weight)
        })
        .collect()
}
