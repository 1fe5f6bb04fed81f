use std::collections::BTreeMap;

use rand::Rng;

use crate::diffcore::{Graph, ParamStore, Real, Session, Tensor, Var};
use crate::encoders::{Encoder, ModalityBatch};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::heads::Head;

use super::config::{
    normalize_weights, resolve_tasks, CatalogEntry, LossKind, ModalityRoleConfig, TaskSpec,
};
use super::data::TargetBatch;

/// Encoders of the input modalities, a fusion block and one head per task.
#[derive(Debug, Clone)]
pub struct MultitaskModel {
    pub encoders: Vec<(String, Encoder)>,
    pub fusion: Fusion,
    pub tasks: Vec<TaskSpec>,
    pub heads: Vec<Head>,
    /// Normalized loss weight per task, aligned with `tasks`.
    pub weights: Vec<f64>,
}

impl MultitaskModel {
    pub fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        roles: &ModalityRoleConfig,
        catalog: &[CatalogEntry],
        rng: &mut R,
    ) -> Result<Self> {
        let tasks = resolve_tasks(roles, catalog)?;
        let mut encoders = Vec::new();
        let mut dims = Vec::new();
        for m in roles.inputs() {
            let entry = catalog
                .iter()
                .find(|e| e.spec.name == m.name)
                .expect("validated");
            let cfg = entry.encoder.as_ref().expect("validated");
            dims.push((cfg.latent_dim(), cfg.produces_map()));
            encoders.push((m.name.clone(), Encoder::build(store, &m.name, cfg, rng)?));
        }
        let fusion = Fusion::build(store, &dims, rng)?;
        let width = fusion.output_dim(&dims);
        let map = matches!(fusion, Fusion::Spatial(_));
        let heads = tasks
            .iter()
            .map(|t| {
                let entry = catalog
                    .iter()
                    .find(|e| e.spec.name == t.name)
                    .expect("validated");
                let spec = &entry.target.as_ref().expect("validated").head;
                Head::new(store, &t.name, spec, width, map, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = normalize_weights(&tasks.iter().map(|t| t.weight).collect::<Vec<_>>())?;
        Ok(MultitaskModel {
            encoders,
            fusion,
            tasks,
            heads,
            weights,
        })
    }

    /// Names of the modalities the model consumes, in fusion order.
    pub fn input_schema(&self) -> Vec<&str> {
        self.encoders.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    /// One output per task, in task order.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        inputs: &BTreeMap<String, ModalityBatch<T>>,
    ) -> Result<Vec<Var>> {
        let mut latents = Vec::with_capacity(self.encoders.len());
        for (name, enc) in &self.encoders {
            let batch = inputs
                .get(name)
                .ok_or_else(|| Error::MissingModality(name.clone()))?;
            latents.push(enc.forward(s, batch)?);
        }
        let fused = self.fusion.forward(s, &latents)?;
        self.heads.iter().map(|h| h.forward(s, fused)).collect()
    }
}

/// Loss of one task's output against its target batch.
pub fn task_loss<T: Real>(
    g: &mut Graph<T>,
    kind: LossKind,
    output: Var,
    target: &TargetBatch,
) -> Result<Var> {
    match (kind, target) {
        (LossKind::CrossEntropy, TargetBatch::Classes(c)) => g.cross_entropy(output, c),
        (LossKind::Mse, TargetBatch::Values(v)) => {
            let t: Tensor<T> = v.cast();
            let t = if t.shape() == g.shape(output) {
                t
            } else {
                t.reshape(g.shape(output).to_vec())?
            };
            let t = g.constant(t);
            g.mse_loss(output, t)
        }
        _ => Err(Error::InvalidArgument(format!(
            "{kind:?} loss does not fit the target batch"
        ))),
    }
}

/// `sum_t w_t * loss_t` on the tape; zero-weight terms are left out so no
/// gradient reaches their heads.
pub fn combine_losses<T: Real>(g: &mut Graph<T>, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if losses.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "combine_losses",
            lhs: vec![losses.len()],
            rhs: vec![weights.len()],
        });
    }
    let terms: Vec<(Var, f64)> = losses
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(&l, &w)| (l, w))
        .collect();
    if terms.is_empty() {
        return Err(Error::InvalidArgument("every task weight is zero".into()));
    }
    g.weighted_sum(&terms)
}

/// `sum_t w_t * loss_t` over named scalar losses.
pub fn total_loss(losses: &BTreeMap<String, f64>, weights: &BTreeMap<String, f64>) -> Result<f64> {
    if losses.len() != weights.len() || losses.keys().any(|k| !weights.contains_key(k)) {
        return Err(Error::InvalidArgument(format!(
            "loss keys {:?} differ from weight keys {:?}",
            losses.keys().collect::<Vec<_>>(),
            weights.keys().collect::<Vec<_>>()
        )));
    }
    Ok(losses.iter().map(|(k, l)| weights[k] * l).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        let l = BTreeMap::from([("a".to_string(), 2.0), ("b".to_string(), 4.0)]);
        let w = BTreeMap::from([("a".to_string(), 0.5), ("b".to_string(), 0.5)]);
        assert_eq!(total_loss(&l, &w).unwrap(), 3.0);
        let single = BTreeMap::from([("a".to_string(), 1.7)]);
        let one = BTreeMap::from([("a".to_string(), 1.0)]);
        assert_eq!(total_loss(&single, &one).unwrap(), 1.7);
        assert!(total_loss(&l, &one).is_err());
    }

    #[test]
    fn zero_weight_term_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(4.0));
        let loss = combine_losses(&mut g, &[a, b], &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 2.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0]);
        assert!(grads.get(b).is_none_or(|d| d == [0.0]));
    }
}
