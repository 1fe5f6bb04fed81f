//! Parameterized building blocks over a [`Session`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{BufferId, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

/// One forward pass: the graph being recorded, the parameters it reads, the
/// train/eval flag and the dropout stream.
pub struct Session<'s, T: Real> {
    pub graph: Graph<T>,
    pub store: &'s mut ParamStore<T>,
    pub training: bool,
    pub rng: &'s mut ChaCha8Rng,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, training: bool, rng: &'s mut ChaCha8Rng) -> Self {
        Session {
            graph: Graph::new(),
            store,
            training,
            rng,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.graph.dropout(x, p, self.training, self.rng)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward_into(loss, self.store).map(|_| ())
    }
}

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Fully connected layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "{name}: linear extents must be positive"
            )));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[in_dim, out_dim], bound),
        )?;
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Accepts `[..., in_dim]` and returns `[..., out_dim]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            s.graph.reshape(x, &[rows, self.in_dim])?
        };
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(flat, w)?;
        let y = s.graph.add_bias(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().expect("non-empty") = self.out_dim;
            s.graph.reshape(y, &out)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "{name}: conv extents must be positive"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_channels, in_channels, kernel, kernel], bound),
        )?;
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[out_channels], bound))?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Same-extent 3x3 convolution.
    pub fn same3<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Conv2d::new(store, name, in_channels, out_channels, 3, 1, 1, rng)
    }

    pub fn pointwise<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Conv2d::new(store, name, in_channels, out_channels, 1, 1, 0, rng)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl BatchNorm1d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize) -> Result<Self> {
        Ok(BatchNorm1d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[features]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[features]))?,
            stats: store.add_running_stats(name, features)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let training = s.training;
        s.graph.batch_norm1d(x, g, b, s.store, self.stats, training)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub classes: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "{name}: embedding extents must be positive"
            )));
        }
        let table = store.add(format!("{name}.table"), uniform(rng, &[classes, dim], 1.0))?;
        Ok(Embedding {
            table,
            classes,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = s.param(self.table);
        s.graph.embedding(t, ids)
    }
}
