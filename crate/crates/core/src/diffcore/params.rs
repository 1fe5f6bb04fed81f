use std::collections::HashMap;

use crate::error::{Error, Result};

use super::real::Real;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A named trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Owner of every parameter and non-trainable buffer of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<RunningStats<T>>,
    names: HashMap<String, ()>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.names.insert(name.to_string(), ()).is_some() {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name)?;
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_running_stats(
        &mut self,
        name: impl Into<String>,
        features: usize,
    ) -> Result<BufferId> {
        let name = name.into();
        self.claim(&format!("{name}.running_mean"))?;
        self.claim(&format!("{name}.running_var"))?;
        self.buffers.push(RunningStats {
            name,
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn running_stats(&self, id: BufferId) -> &RunningStats<T> {
        &self.buffers[id.0]
    }

    pub fn running_stats_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        &mut self.buffers[id.0]
    }

    /// Adds `delta` to the gradient of `id`, allocating it on first use.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, &d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                p.grad = Some(Tensor::from_parts(p.value.shape().to_vec(), delta.to_vec()));
            }
        }
    }

    pub fn has_any_grad(&self) -> bool {
        self.params.iter().any(|p| p.grad.is_some())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Every parameter and running statistic as `(name, tensor)` in
    /// registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for b in &self.buffers {
            let n = b.mean.len();
            out.push((
                format!("{}.running_mean", b.name),
                Tensor::from_parts(vec![n], b.mean.clone()),
            ));
            out.push((
                format!("{}.running_var", b.name),
                Tensor::from_parts(vec![n], b.var.clone()),
            ));
        }
        out
    }

    /// Overwrites values from `(name, tensor)` pairs; names and shapes must
    /// match the store exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if lookup.len() != self.names.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                lookup.len(),
                self.names.len()
            )));
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let t = lookup
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "load_named",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            Ok(t.data().to_vec())
        };
        for p in &mut self.params {
            let data = fetch(&p.name, p.value.shape())?;
            p.value.data_mut().copy_from_slice(&data);
        }
        for b in &mut self.buffers {
            let n = b.mean.len();
            b.mean = fetch(&format!("{}.running_mean", b.name), &[n])?;
            b.var = fetch(&format!("{}.running_var", b.name), &[n])?;
        }
        Ok(())
    }
}
