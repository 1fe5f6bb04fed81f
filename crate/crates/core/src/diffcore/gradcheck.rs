//! Central-difference verification of analytic gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over every input element.
    pub max_rel_error: f64,
    /// Per-input maxima, in input order.
    pub per_input: Vec<f64>,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_gap(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic and central-difference gradients of `op` at `inputs`.
///
/// Non-scalar outputs are contracted with a fixed pseudo-random weighting so
/// every output element contributes to the checked scalar.
pub fn finite_difference_check<F>(
    op: F,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut weights: Option<Vec<f64>> = None;
    let eval = |points: &[Tensor<f64>],
                weights: &mut Option<Vec<f64>>|
     -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|t| g.input(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let n = g.value(out).numel();
        let scalar = if n == 1 {
            out
        } else {
            let w = weights.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
            });
            let wv = g.constant(Tensor::from_parts(g.shape(out).to_vec(), w.clone()));
            let prod = g.mul(out, wv)?;
            g.sum(prod)?
        };
        Ok((g, vars, scalar))
    };

    let (g, vars, scalar) = eval(inputs, &mut weights)?;
    let grads = g.backward(scalar)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut evaluations = 1;
    let mut points: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut worst = 0.0f64;
        for j in 0..inputs[i].numel() {
            let orig = points[i].data()[j];
            points[i].data_mut()[j] = orig + step;
            let (gp, _, sp) = eval(&points, &mut weights)?;
            let fp = gp.value(sp).item()?;
            points[i].data_mut()[j] = orig - step;
            let (gm, _, sm) = eval(&points, &mut weights)?;
            let fm = gm.value(sm).item()?;
            points[i].data_mut()[j] = orig;
            evaluations += 2;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_gap(analytic[j], numeric));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        evaluations,
    })
}

/// One named entry of [`op_suite`].
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    /// Worst report over all sampled points.
    pub worst: GradCheckReport,
    pub points: usize,
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    op: &'static str,
    shapes: Vec<Vec<usize>>,
    sample: Sampler,
    f: OpFn,
}

#[derive(Clone, Copy)]
enum Sampler {
    Uniform,
    /// Values bounded away from zero, for kinks at the origin.
    AwayFromZero,
    /// Well-separated distinct values, so maxima are unique under perturbation.
    Distinct,
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], how: Sampler) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match how {
        Sampler::Uniform => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        Sampler::AwayFromZero => (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen() {
                    v
                } else {
                    -v
                }
            })
            .collect(),
        Sampler::Distinct => {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            order
                .iter()
                .map(|&k| k as f64 * 0.01 - 0.5 + rng.gen_range(0.0..0.002))
                .collect()
        }
    };
    Tensor::from_parts(shape.to_vec(), data)
}

fn case(
    op: &'static str,
    shapes: &[&[usize]],
    sample: Sampler,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        sample,
        f: Box::new(f),
    }
}

fn cases() -> Vec<Case> {
    use Sampler::*;
    vec![
        case("matmul", &[&[4, 3], &[3, 2]], Uniform, |g, v| {
            g.matmul(v[0], v[1])
        }),
        case(
            "batch_matmul",
            &[&[2, 3, 4], &[2, 4, 2]],
            Uniform,
            |g, v| g.batch_matmul(v[0], v[1], false),
        ),
        case(
            "batch_matmul_t",
            &[&[2, 3, 4], &[2, 5, 4]],
            Uniform,
            |g, v| g.batch_matmul(v[0], v[1], true),
        ),
        case("add", &[&[3, 4], &[3, 4]], Uniform, |g, v| {
            g.add(v[0], v[1])
        }),
        case("sub", &[&[3, 4], &[3, 4]], Uniform, |g, v| {
            g.sub(v[0], v[1])
        }),
        case("mul", &[&[3, 4], &[3, 4]], Uniform, |g, v| {
            g.mul(v[0], v[1])
        }),
        case("scale", &[&[5]], Uniform, |g, v| g.scale(v[0], -2.5)),
        case("add_bias", &[&[2, 3, 4], &[4]], Uniform, |g, v| {
            g.add_bias(v[0], v[1])
        }),
        case("relu", &[&[3, 5]], AwayFromZero, |g, v| g.relu(v[0])),
        case("sigmoid", &[&[3, 5]], Uniform, |g, v| g.sigmoid(v[0])),
        case("softmax", &[&[3, 4, 2]], Uniform, |g, v| g.softmax(v[0], 1)),
        case("layer_norm", &[&[3, 6], &[6], &[6]], Uniform, |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        }),
        case("batch_norm1d", &[&[5, 3], &[3], &[3]], Uniform, |g, v| {
            let mut store = super::params::ParamStore::new();
            let stats = store.add_running_stats("bn", 3)?;
            g.batch_norm1d(v[0], v[1], v[2], &mut store, stats, true)
        }),
        case("dropout", &[&[4, 6]], Uniform, |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            g.dropout(v[0], 0.3, true, &mut rng)
        }),
        case("concat", &[&[2, 3, 2], &[2, 1, 2]], Uniform, |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        case("slice", &[&[3, 5]], Uniform, |g, v| g.slice(v[0], 1, 1, 3)),
        case("split", &[&[4, 3]], Uniform, |g, v| {
            let parts = g.split(v[0], 0, &[1, 3])?;
            let a = g.scale(parts[0], 2.0)?;
            let b = g.sum(parts[1])?;
            let a = g.sum(a)?;
            let a = g.reshape(a, &[1])?;
            let b = g.reshape(b, &[1])?;
            g.concat(&[a, b], 0)
        }),
        case("reshape", &[&[2, 6]], Uniform, |g, v| {
            g.reshape(v[0], &[3, 4])
        }),
        case(
            "conv2d",
            &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            Uniform,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "conv2d_strided",
            &[&[1, 2, 6, 6], &[2, 2, 3, 3]],
            Uniform,
            |g, v| g.conv2d(v[0], v[1], None, 2, 0),
        ),
        case(
            "conv2d_pointwise",
            &[&[2, 3, 4, 4], &[2, 3, 1, 1], &[2]],
            Uniform,
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0),
        ),
        case("max_pool2", &[&[2, 2, 4, 4]], Distinct, |g, v| {
            g.max_pool2(v[0])
        }),
        case("upsample2", &[&[1, 2, 3, 3]], Uniform, |g, v| {
            g.upsample2(v[0])
        }),
        case("spatial_mean", &[&[2, 3, 4, 4]], Uniform, |g, v| {
            g.spatial_mean(v[0])
        }),
        case("broadcast_map", &[&[2, 3]], Uniform, |g, v| {
            g.broadcast_map(v[0], 3, 2)
        }),
        case("embedding", &[&[5, 3]], Uniform, |g, v| {
            g.embedding(v[0], &[4, 0, 4, 2])
        }),
        case("masked_mean", &[&[2, 4, 3]], Uniform, |g, v| {
            g.masked_mean(v[0], &[true, false, true, true, true, true, false, false])
        }),
        case("sum", &[&[3, 4]], Uniform, |g, v| g.sum(v[0])),
        case("mean", &[&[3, 4]], Uniform, |g, v| g.mean(v[0])),
        case("weighted_sum", &[&[1], &[1], &[1]], Uniform, |g, v| {
            g.weighted_sum(&[(v[0], 0.5), (v[1], 0.25), (v[2], 2.0)])
        }),
        case("mse_loss", &[&[3, 2], &[3, 2]], Uniform, |g, v| {
            g.mse_loss(v[0], v[1])
        }),
        case("cross_entropy", &[&[4, 3]], Uniform, |g, v| {
            g.cross_entropy(v[0], &[0, 2, 1, 2])
        }),
        case("cross_entropy_map", &[&[2, 3, 2, 2]], Uniform, |g, v| {
            g.cross_entropy(v[0], &[0, 1, 2, 2, 1, 1, 0, 2])
        }),
    ]
}

/// Runs the finite-difference check over every differentiable op at
/// `points` seeded random inputs each.
pub fn op_suite(points: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in cases() {
        let mut worst: Option<GradCheckReport> = None;
        for _ in 0..points {
            let inputs: Vec<Tensor<f64>> = c
                .shapes
                .iter()
                .map(|s| sample(&mut rng, s, c.sample))
                .collect();
            let r = finite_difference_check(&c.f, &inputs, FD_STEP)?;
            if worst
                .as_ref()
                .is_none_or(|w| r.max_rel_error > w.max_rel_error)
            {
                worst = Some(r);
            }
        }
        if let Some(worst) = worst {
            out.push(OpCheck {
                op: c.op,
                worst,
                points,
            });
        }
    }
    Ok(out)
}
