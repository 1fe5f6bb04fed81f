//! Task heads. Classification heads emit raw logits; the only activations
//! applied here are the sigmoids of bounded and dense regression.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchNorm1d, Conv2d, Linear, ParamStore, Real, Session, Var};
use crate::error::{Error, Result};
use crate::fusion::Fused;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Regression,
    BoundedRegression,
    Classification,
    MulticlassSeg,
    DenseSeg,
}

impl HeadKind {
    pub fn is_classification(self) -> bool {
        matches!(self, HeadKind::Classification | HeadKind::MulticlassSeg)
    }

    pub fn is_map(self) -> bool {
        matches!(self, HeadKind::MulticlassSeg | HeadKind::DenseSeg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadLayout {
    /// One linear layer.
    Linear,
    /// Linear, batch norm, ReLU, linear.
    BnMlp { hidden: usize },
    /// Linear, ReLU, dropout, linear.
    Mlp { hidden: usize, dropout: f64 },
    /// From a map: pointwise conv to `channels`, ReLU, spatial mean, then an
    /// optional hidden layer, dropout and a linear output.
    Reduce {
        channels: usize,
        hidden: Option<usize>,
        dropout: f64,
    },
    /// Pointwise conv to per-pixel outputs.
    Pointwise,
    /// Two 3x3 ReLU convs and a pointwise conv.
    DenseConv { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Class count, or number of regressed values.
    pub outputs: usize,
    pub layout: HeadLayout,
}

#[derive(Debug, Clone)]
enum Body {
    Linear(Linear),
    BnMlp(Linear, BatchNorm1d, Linear),
    Mlp(Linear, Linear, f64),
    Reduce {
        conv: Conv2d,
        hidden: Option<Linear>,
        out: Linear,
        dropout: f64,
    },
    Pointwise(Conv2d),
    DenseConv(Conv2d, Conv2d, Conv2d),
}

#[derive(Debug, Clone)]
pub struct Head {
    pub task: String,
    pub spec: HeadSpec,
    pub input_dim: usize,
    body: Body,
}

impl Head {
    /// `input_dim` is the fused vector width or fused channel count;
    /// `map_input` says which of the two the head will receive.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        task: &str,
        spec: &HeadSpec,
        input_dim: usize,
        map_input: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("head.{task}");
        let k = spec.outputs;
        let wants_map = matches!(
            spec.layout,
            HeadLayout::Reduce { .. } | HeadLayout::Pointwise | HeadLayout::DenseConv { .. }
        );
        if wants_map != map_input {
            return Err(Error::Config(format!(
                "head {task}: layout {:?} does not fit a {} input",
                spec.layout,
                if map_input { "map" } else { "vector" }
            )));
        }
        let layout_ok = match spec.kind {
            HeadKind::MulticlassSeg => spec.layout == HeadLayout::Pointwise,
            HeadKind::DenseSeg => matches!(spec.layout, HeadLayout::DenseConv { .. }),
            _ => !matches!(
                spec.layout,
                HeadLayout::Pointwise | HeadLayout::DenseConv { .. }
            ),
        };
        if !layout_ok || k == 0 {
            return Err(Error::Config(format!(
                "head {task}: layout {:?} cannot produce {:?}",
                spec.layout, spec.kind
            )));
        }
        if spec.kind == HeadKind::DenseSeg && k != 1 {
            return Err(Error::Config(format!(
                "head {task}: dense segmentation has one output"
            )));
        }
        let body = match spec.layout {
            HeadLayout::Linear => {
                Body::Linear(Linear::new(store, &format!("{p}.fc"), input_dim, k, rng)?)
            }
            HeadLayout::BnMlp { hidden } => Body::BnMlp(
                Linear::new(store, &format!("{p}.fc0"), input_dim, hidden, rng)?,
                BatchNorm1d::new(store, &format!("{p}.bn"), hidden)?,
                Linear::new(store, &format!("{p}.fc1"), hidden, k, rng)?,
            ),
            HeadLayout::Mlp { hidden, dropout } => Body::Mlp(
                Linear::new(store, &format!("{p}.fc0"), input_dim, hidden, rng)?,
                Linear::new(store, &format!("{p}.fc1"), hidden, k, rng)?,
                dropout,
            ),
            HeadLayout::Reduce {
                channels,
                hidden,
                dropout,
            } => {
                let conv =
                    Conv2d::pointwise(store, &format!("{p}.conv"), input_dim, channels, rng)?;
                let (hidden, last) = match hidden {
                    Some(h) => (
                        Some(Linear::new(store, &format!("{p}.fc0"), channels, h, rng)?),
                        h,
                    ),
                    None => (None, channels),
                };
                Body::Reduce {
                    conv,
                    hidden,
                    out: Linear::new(store, &format!("{p}.fc"), last, k, rng)?,
                    dropout,
                }
            }
            HeadLayout::Pointwise => Body::Pointwise(Conv2d::pointwise(
                store,
                &format!("{p}.conv"),
                input_dim,
                k,
                rng,
            )?),
            HeadLayout::DenseConv { hidden } => Body::DenseConv(
                Conv2d::same3(store, &format!("{p}.conv0"), input_dim, hidden, rng)?,
                Conv2d::same3(store, &format!("{p}.conv1"), hidden, hidden, rng)?,
                Conv2d::pointwise(store, &format!("{p}.out"), hidden, 1, rng)?,
            ),
        };
        Ok(Head {
            task: task.to_string(),
            spec: spec.clone(),
            input_dim,
            body,
        })
    }

    /// Output shapes: `B x K` for vector heads, `B x K x H x W` for maps.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, fused: Fused) -> Result<Var> {
        let x = fused.var();
        let shape = s.graph.shape(x).to_vec();
        let width_ok = match fused {
            Fused::Vector(_) => shape.len() == 2 && shape[1] == self.input_dim,
            Fused::Map(_) => shape.len() == 4 && shape[1] == self.input_dim,
        };
        if !width_ok {
            return Err(Error::ShapeMismatch {
                op: "head",
                lhs: shape,
                rhs: vec![0, self.input_dim],
            });
        }
        let y = match &self.body {
            Body::Linear(fc) => fc.forward(s, x)?,
            Body::BnMlp(fc0, bn, fc1) => {
                let h = fc0.forward(s, x)?;
                let h = bn.forward(s, h)?;
                let h = s.graph.relu(h)?;
                fc1.forward(s, h)?
            }
            Body::Mlp(fc0, fc1, p) => {
                let h = fc0.forward(s, x)?;
                let h = s.graph.relu(h)?;
                let h = s.dropout(h, *p)?;
                fc1.forward(s, h)?
            }
            Body::Reduce {
                conv,
                hidden,
                out,
                dropout,
            } => {
                let h = conv.forward(s, x)?;
                let h = s.graph.relu(h)?;
                let mut h = s.graph.spatial_mean(h)?;
                if let Some(fc) = hidden {
                    h = fc.forward(s, h)?;
                    h = s.graph.relu(h)?;
                }
                let h = s.dropout(h, *dropout)?;
                out.forward(s, h)?
            }
            Body::Pointwise(conv) => conv.forward(s, x)?,
            Body::DenseConv(c0, c1, out) => {
                let h = c0.forward(s, x)?;
                let h = s.graph.relu(h)?;
                let h = c1.forward(s, h)?;
                let h = s.graph.relu(h)?;
                out.forward(s, h)?
            }
        };
        match self.spec.kind {
            HeadKind::BoundedRegression | HeadKind::DenseSeg => s.graph.sigmoid(y),
            _ => Ok(y),
        }
    }
}
