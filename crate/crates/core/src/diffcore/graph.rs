//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. `backward` walks the nodes in reverse insertion order,
//! which is a valid topological order because parents always precede children.

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{BufferId, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
        n_planes: usize,
        h: usize,
        w: usize,
    },
    SpatialMean {
        x: Var,
        plane: usize,
    },
    BroadcastMap {
        x: Var,
        plane: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    MaskedMean {
        x: Var,
        mask: Vec<T>,
        steps: usize,
        dim: usize,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
        inner: usize,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: &[T]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, &d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { param: None },
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked (used for gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { param: None },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf { param: Some(id) },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- linear

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b },
            rg,
        )
    }

    /// Batched product over the leading axis of rank-3 operands. With
    /// `trans_b` the right operand is `[B, n, k]` and used transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let (rsb, csb) = if trans_b {
                    (1, k as isize)
                } else {
                    (n as isize, 1)
                };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bd[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "batch_matmul",
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            rg,
        )
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", t, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", t, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::from_f64(factor);
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| a * factor).collect(),
        );
        let rg = self.rg(x);
        self.push("scale", t, Op::Scale { x, factor }, rg)
    }

    /// Adds a rank-1 bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let f = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != f {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bd = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(f)
            .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
            .collect();
        let t = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", t, Op::AddBias { x, bias }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape().to_vec(),
            v.data()
                .iter()
                .map(|&a| if a > T::zero() { a } else { T::zero() })
                .collect(),
        );
        let rg = self.rg(x);
        self.push("relu", t, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().map(|&a| sigmoid(a)).collect(),
        );
        let rg = self.rg(x);
        self.push("sigmoid", t, Op::Sigmoid { x }, rg)
    }

    /// Softmax along `axis`; every slice along that axis sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "softmax",
                detail: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        softmax_strided(&mut out, outer, dim, inner);
        let rg = self.rg(x);
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            },
            rg,
        )
    }

    // --------------------------------------------------------- normalization

    /// Normalizes over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(NORM_EPS);
        let dn = T::from_f64(d as f64);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Batch normalization of an `N x F` input. Training mode normalizes with
    /// batch statistics and updates the running statistics; eval mode uses
    /// the running statistics unchanged.
    pub fn batch_norm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &mut ParamStore<T>,
        stats: BufferId,
        training: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "batch_norm1d",
                detail: format!("expected N x F, got {shape:?}"),
            });
        }
        let (n, f) = (shape[0], shape[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [f] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm1d",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if training && n < 2 {
            return Err(Error::InvalidShape {
                op: "batch_norm1d",
                detail: "training mode needs at least two samples".into(),
            });
        }
        let eps = T::from_f64(NORM_EPS);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let running = store.running_stats_mut(stats);
        if running.mean.len() != f {
            return Err(Error::ShapeMismatch {
                op: "batch_norm1d",
                lhs: shape.clone(),
                rhs: vec![running.mean.len()],
            });
        }
        let mut mean = vec![T::zero(); f];
        let mut var = vec![T::zero(); f];
        if training {
            let nn = T::from_f64(n as f64);
            for r in 0..n {
                for j in 0..f {
                    mean[j] += xd[r * f + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nn);
            for r in 0..n {
                for j in 0..f {
                    let dv = xd[r * f + j] - mean[j];
                    var[j] += dv * dv;
                }
            }
            let momentum = T::from_f64(BATCHNORM_MOMENTUM);
            let unbias = nn / (nn - T::one());
            for j in 0..f {
                let biased = var[j] / nn;
                running.mean[j] = (T::one() - momentum) * running.mean[j] + momentum * mean[j];
                running.var[j] =
                    (T::one() - momentum) * running.var[j] + momentum * biased * unbias;
                var[j] = biased;
            }
        } else {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..n {
            for j in 0..f {
                let h = (xd[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = gd[j] * h + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "batch_norm1d",
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
            rg,
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` so eval mode is
    /// the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push("dropout", t, Op::Dropout { x, mask }, rg)
    }

    // ------------------------------------------------------------- structure

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
            },
            rg,
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        self.push(
            "slice",
            Tensor::from_parts(out_shape, data),
            Op::Slice {
                x,
                outer,
                dim,
                inner,
                start,
                len,
            },
            rg,
        )
    }

    /// Splits along `axis` into pieces of the given extents.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        if start != self.shape(x)[axis] {
            return Err(Error::InvalidShape {
                op: "split",
                detail: format!(
                    "sizes {sizes:?} do not cover axis extent {}",
                    self.shape(x)[axis]
                ),
            });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push("reshape", t, Op::Reshape { x }, rg)
    }

    // ------------------------------------------------------------- spatial

    fn as_batched(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize, bool)> {
        let s = self.shape(x);
        match s.len() {
            3 => Ok((1, s[0], s[1], s[2], false)),
            4 => Ok((s[0], s[1], s[2], s[3], true)),
            _ => Err(Error::InvalidShape {
                op,
                detail: format!("expected C x H x W or N x C x H x W, got {s:?}"),
            }),
        }
    }

    /// Cross-correlation of `N x C x H x W` (or `C x H x W`) input with
    /// `O x C x k x k` kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, c, h, wd, batched) = self.as_batched("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] || ws[2] == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride must be positive".into(),
            ));
        }
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {k} larger than padded input {h}x{wd} (padding {padding})"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (wd + 2 * padding - k) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (patch, plane) = (geom.patch(), geom.out_plane());
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let mut cols = if geom.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); n * patch * plane]
        };
        let mut out = vec![T::zero(); n * o * plane];
        for s in 0..n {
            let xs = &xd[s * c * h * wd..(s + 1) * c * h * wd];
            let col: &[T] = if geom.pointwise() {
                xs
            } else {
                let dst = &mut cols[s * patch * plane..(s + 1) * patch * plane];
                im2col(xs, &geom, dst);
                &cols[s * patch * plane..(s + 1) * patch * plane]
            };
            T::gemm(
                o,
                patch,
                plane,
                T::one(),
                wdat,
                patch as isize,
                1,
                col,
                plane as isize,
                1,
                T::zero(),
                &mut out[s * o * plane..(s + 1) * o * plane],
                plane as isize,
                1,
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bd[i % o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = if batched {
            vec![n, o, ho, wo]
        } else {
            vec![o, ho, wo]
        };
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            rg,
        )
    }

    /// 2x2 max pooling with stride 2; extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w, batched) = self.as_batched("max_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "max_pool2",
                detail: format!("odd spatial extents {h}x{w}"),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = if batched {
            vec![n, c, ho, wo]
        } else {
            vec![c, ho, wo]
        };
        let rg = self.rg(x);
        self.push(
            "max_pool2",
            Tensor::from_parts(shape, out),
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w, batched) = self.as_batched("upsample2", x)?;
        let xd = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[p * ho * wo + i * wo + j] = xd[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let shape = if batched {
            vec![n, c, ho, wo]
        } else {
            vec![c, ho, wo]
        };
        let rg = self.rg(x);
        self.push(
            "upsample2",
            Tensor::from_parts(shape, out),
            Op::Upsample2 {
                x,
                n_planes: n * c,
                h,
                w,
            },
            rg,
        )
    }

    /// Mean over the spatial extents: `N x C x H x W -> N x C`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w, batched) = self.as_batched("spatial_mean", x)?;
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let shape = if batched { vec![n, c] } else { vec![c] };
        let rg = self.rg(x);
        self.push(
            "spatial_mean",
            Tensor::from_parts(shape, out),
            Op::SpatialMean { x, plane },
            rg,
        )
    }

    /// Expands `N x C` to `N x C x H x W` with each channel constant.
    pub fn broadcast_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if h == 0 || w == 0 || s.is_empty() || s.len() > 2 {
            return Err(Error::InvalidShape {
                op: "broadcast_map",
                detail: format!("cannot expand {s:?} to {h}x{w}"),
            });
        }
        let plane = h * w;
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, plane))
            .collect();
        let mut shape = s;
        shape.extend_from_slice(&[h, w]);
        let rg = self.rg(x);
        self.push(
            "broadcast_map",
            Tensor::from_parts(shape, out),
            Op::BroadcastMap { x, plane },
            rg,
        )
    }

    // --------------------------------------------------------------- lookup

    /// Row lookup in a `K x D` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                detail: format!("table must be K x D, got {s:?}"),
            });
        }
        let (k, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "embedding",
                detail: "no ids".into(),
            });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= k {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    bound: k,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim: d,
            },
            rg,
        )
    }

    /// Mean over valid steps of a `B x T x D` sequence; `mask` holds one
    /// flag per `(b, t)`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::InvalidShape {
                op: "masked_mean",
                detail: format!("shape {s:?} with mask of {}", mask.len()),
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut weights = vec![T::zero(); b * t];
        let mut out = vec![T::zero(); b * d];
        for i in 0..b {
            let valid = mask[i * t..(i + 1) * t].iter().filter(|&&m| m).count();
            if valid == 0 {
                return Err(Error::InvalidShape {
                    op: "masked_mean",
                    detail: format!("sequence {i} has no valid steps"),
                });
            }
            let wv = T::from_f64(1.0 / valid as f64);
            for j in 0..t {
                if mask[i * t + j] {
                    weights[i * t + j] = wv;
                    for k in 0..d {
                        out[i * d + k] += wv * xd[(i * t + j) * d + k];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            "masked_mean",
            Tensor::from_parts(vec![b, d], out),
            Op::MaskedMean {
                x,
                mask: weights,
                steps: t,
                dim: d,
            },
            rg,
        )
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::MeanAll { x }, rg)
    }

    /// `sum_i weights[i] * terms[i]` over single-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("weighted_sum of no terms".into()));
        }
        let mut total = T::zero();
        let mut rec = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            let item = self.value(v).item()?;
            let w = T::from_f64(w);
            total += w * item;
            rec.push((v, w));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum { terms: rec },
            rg,
        )
    }

    // ---------------------------------------------------------------- losses

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = s / T::from_f64(p.len() as f64);
        let rg = self.rg(pred) || self.rg(target);
        self.push(
            "mse_loss",
            Tensor::scalar(loss),
            Op::Mse { pred, target },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under softmax over axis 1
    /// of `N x K` or `N x K x H x W` logits. Targets are laid out as
    /// `N` or `N x H x W` class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                detail: format!("expected N x K[...], got {shape:?}"),
            });
        }
        let (n, k, inner) = split_axis(&shape, 1);
        if targets.len() != n * inner {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::OutOfRange {
                what: "class index",
                index: bad,
                bound: k,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_strided(&mut probs, n, k, inner);
        let mut total = 0.0f64;
        for s in 0..n {
            for i in 0..inner {
                let t = targets[s * inner + i];
                let p = probs[s * k * inner + t * inner + i].as_f64();
                total -= p.max(f64::MIN_POSITIVE).ln();
            }
        }
        let loss = T::from_f64(total / (n * inner) as f64);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                classes: k,
                inner,
            },
            rg,
        )
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass, then adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        self.accumulate(&grads, store);
        Ok(grads)
    }

    pub fn accumulate(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads.grads[i].as_deref() {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }

    fn backward_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let ga = acc(grads, *a, m * k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gout,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, k * n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        1,
                        k as isize,
                        gout,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b {
                    self.shape(*b)[1]
                } else {
                    self.shape(*b)[2]
                };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let ga = acc(grads, *a, batch * m * k);
                    for i in 0..batch {
                        // dA = dC @ B^T, or dC @ B when B was used transposed
                        let (rsb, csb) = if *trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gout[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bd[i * k * n..(i + 1) * k * n],
                            rsb,
                            csb,
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, batch * k * n);
                    for i in 0..batch {
                        let ga_slice = &ad[i * m * k..(i + 1) * m * k];
                        let go = &gout[i * m * n..(i + 1) * m * n];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n x k) = dC^T @ A
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                go,
                                1,
                                n as isize,
                                ga_slice,
                                k as isize,
                                1,
                                T::one(),
                                dst,
                                k as isize,
                                1,
                            );
                        } else {
                            // dB (k x n) = A^T @ dC
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                ga_slice,
                                1,
                                k as isize,
                                go,
                                n as isize,
                                1,
                                T::one(),
                                dst,
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    add_into(grads, *a, gout);
                }
                if self.rg(*b) {
                    add_into(grads, *b, gout);
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    add_into(grads, *a, gout);
                }
                if self.rg(*b) {
                    let g = acc(grads, *b, gout.len());
                    for (d, &v) in g.iter_mut().zip(gout) {
                        *d -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let g = acc(grads, *a, gout.len());
                    for ((d, &go), &y) in g.iter_mut().zip(gout).zip(bv) {
                        *d += go * y;
                    }
                }
                if self.rg(*b) {
                    let g = acc(grads, *b, gout.len());
                    for ((d, &go), &x) in g.iter_mut().zip(gout).zip(av) {
                        *d += go * x;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let g = acc(grads, *x, gout.len());
                for (d, &go) in g.iter_mut().zip(gout) {
                    *d += go * *factor;
                }
            }
            Op::AddBias { x, bias } => {
                if self.rg(*x) {
                    add_into(grads, *x, gout);
                }
                if self.rg(*bias) {
                    let f = self.shape(*bias)[0];
                    let g = acc(grads, *bias, f);
                    for row in gout.chunks(f) {
                        for (d, &go) in g.iter_mut().zip(row) {
                            *d += go;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let g = acc(grads, *x, gout.len());
                for ((d, &go), &v) in g.iter_mut().zip(gout).zip(xv) {
                    if v > T::zero() {
                        *d += go;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let g = acc(grads, *x, gout.len());
                for ((d, &go), &s) in g.iter_mut().zip(gout).zip(y) {
                    *d += go * s * (T::one() - s);
                }
            }
            Op::Softmax {
                x,
                outer,
                dim,
                inner,
            } => {
                let y = node.value.data();
                let g = acc(grads, *x, gout.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| o * dim * inner + j * inner + i;
                        let dot: T = (0..*dim).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*dim {
                            g[idx(j)] += y[idx(j)] * (gout[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let gd = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let g = acc(grads, *gamma, d);
                    for (row_g, row_h) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let g = acc(grads, *beta, d);
                    for row_g in gout.chunks(d) {
                        for j in 0..d {
                            g[j] += row_g[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let dn = T::from_f64(d as f64);
                    let g = acc(grads, *x, gout.len());
                    for (r, is) in inv_std.iter().enumerate() {
                        let go = &gout[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = go[j] * gd[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        for j in 0..d {
                            let dh = go[j] * gd[j];
                            g[r * d + j] += *is / dn * (dn * dh - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = self.shape(*gamma)[0];
                let n = gout.len() / f;
                let gd = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let g = acc(grads, *gamma, f);
                    for r in 0..n {
                        for j in 0..f {
                            g[j] += gout[r * f + j] * xhat[r * f + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let g = acc(grads, *beta, f);
                    for r in 0..n {
                        for j in 0..f {
                            g[j] += gout[r * f + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let g = acc(grads, *x, gout.len());
                    if *batch_stats {
                        let nn = T::from_f64(n as f64);
                        let mut s1 = vec![T::zero(); f];
                        let mut s2 = vec![T::zero(); f];
                        for r in 0..n {
                            for j in 0..f {
                                let dh = gout[r * f + j] * gd[j];
                                s1[j] += dh;
                                s2[j] += dh * xhat[r * f + j];
                            }
                        }
                        for r in 0..n {
                            for j in 0..f {
                                let dh = gout[r * f + j] * gd[j];
                                g[r * f + j] +=
                                    inv_std[j] / nn * (nn * dh - s1[j] - xhat[r * f + j] * s2[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..f {
                                g[r * f + j] += gout[r * f + j] * gd[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let g = acc(grads, *x, gout.len());
                for ((d, &go), &m) in g.iter_mut().zip(gout).zip(mask) {
                    *d += go * m;
                }
            }
            Op::Concat { inputs, outer } => {
                let total: usize =
                    inputs.iter().map(|&v| self.value(v).numel()).sum::<usize>() / outer;
                let mut offset = 0;
                for &v in inputs {
                    let vn = self.value(v).numel() / outer;
                    if self.rg(v) {
                        let g = acc(grads, v, vn * outer);
                        for o in 0..*outer {
                            let src = &gout[o * total + offset..o * total + offset + vn];
                            for (d, &s) in g[o * vn..(o + 1) * vn].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += vn;
                }
            }
            Op::Slice {
                x,
                outer,
                dim,
                inner,
                start,
                len,
            } => {
                let g = acc(grads, *x, outer * dim * inner);
                for o in 0..*outer {
                    let base = o * dim * inner + start * inner;
                    let src = &gout[o * len * inner..(o + 1) * len * inner];
                    for (d, &s) in g[base..base + len * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::Reshape { x } => add_into(grads, *x, gout),
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let (patch, plane) = (geom.patch(), geom.out_plane());
                let in_size = geom.c * geom.h * geom.w;
                let xd = self.value(*x).data();
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let g = acc(grads, *b, geom.o);
                        for (i, chunk) in gout.chunks(plane).enumerate() {
                            g[i % geom.o] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
                if self.rg(*w) {
                    let g = acc(grads, *w, geom.o * patch);
                    for s in 0..geom.n {
                        let col = if geom.pointwise() {
                            &xd[s * in_size..(s + 1) * in_size]
                        } else {
                            &cols[s * patch * plane..(s + 1) * patch * plane]
                        };
                        T::gemm(
                            geom.o,
                            plane,
                            patch,
                            T::one(),
                            &gout[s * geom.o * plane..(s + 1) * geom.o * plane],
                            plane as isize,
                            1,
                            col,
                            1,
                            plane as isize,
                            T::one(),
                            g,
                            patch as isize,
                            1,
                        );
                    }
                }
                if self.rg(*x) {
                    let wd = self.value(*w).data();
                    let g = acc(grads, *x, geom.n * in_size);
                    let mut dcols = vec![T::zero(); patch * plane];
                    for s in 0..geom.n {
                        let go = &gout[s * geom.o * plane..(s + 1) * geom.o * plane];
                        let dst = &mut g[s * in_size..(s + 1) * in_size];
                        if geom.pointwise() {
                            T::gemm(
                                patch,
                                geom.o,
                                plane,
                                T::one(),
                                wd,
                                1,
                                patch as isize,
                                go,
                                plane as isize,
                                1,
                                T::one(),
                                dst,
                                plane as isize,
                                1,
                            );
                        } else {
                            T::gemm(
                                patch,
                                geom.o,
                                plane,
                                T::one(),
                                wd,
                                1,
                                patch as isize,
                                go,
                                plane as isize,
                                1,
                                T::zero(),
                                &mut dcols,
                                plane as isize,
                                1,
                            );
                            col2im(&dcols, geom, dst);
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let g = acc(grads, *x, self.value(*x).numel());
                for (&idx, &go) in argmax.iter().zip(gout) {
                    g[idx] += go;
                }
            }
            Op::Upsample2 { x, n_planes, h, w } => {
                let g = acc(grads, *x, n_planes * h * w);
                let (ho, wo) = (2 * h, 2 * w);
                for p in 0..*n_planes {
                    for i in 0..ho {
                        for j in 0..wo {
                            g[p * h * w + (i / 2) * w + j / 2] += gout[p * ho * wo + i * wo + j];
                        }
                    }
                }
            }
            Op::SpatialMean { x, plane } => {
                let inv = T::from_f64(1.0 / *plane as f64);
                let g = acc(grads, *x, gout.len() * plane);
                for (chunk, &go) in g.chunks_mut(*plane).zip(gout) {
                    chunk.iter_mut().for_each(|d| *d += go * inv);
                }
            }
            Op::BroadcastMap { x, plane } => {
                let g = acc(grads, *x, gout.len() / plane);
                for (d, chunk) in g.iter_mut().zip(gout.chunks(*plane)) {
                    *d += chunk.iter().copied().sum::<T>();
                }
            }
            Op::Embedding { table, ids, dim } => {
                let g = acc(grads, *table, self.value(*table).numel());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..*dim {
                        g[id * dim + j] += gout[r * dim + j];
                    }
                }
            }
            Op::MaskedMean {
                x,
                mask,
                steps,
                dim,
            } => {
                let g = acc(grads, *x, mask.len() * dim);
                for (bt, &wv) in mask.iter().enumerate() {
                    if wv == T::zero() {
                        continue;
                    }
                    let b = bt / steps;
                    for k in 0..*dim {
                        g[bt * dim + k] += wv * gout[b * dim + k];
                    }
                }
            }
            Op::SumAll { x } => {
                let n = self.value(*x).numel();
                let g = acc(grads, *x, n);
                g.iter_mut().for_each(|d| *d += gout[0]);
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let s = gout[0] / T::from_f64(n as f64);
                let g = acc(grads, *x, n);
                g.iter_mut().for_each(|d| *d += s);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let c = T::from_f64(2.0 / p.len() as f64) * gout[0];
                if self.rg(*pred) {
                    let g = acc(grads, *pred, p.len());
                    for ((d, &a), &b) in g.iter_mut().zip(p).zip(t) {
                        *d += c * (a - b);
                    }
                }
                if self.rg(*target) {
                    let g = acc(grads, *target, t.len());
                    for ((d, &a), &b) in g.iter_mut().zip(p).zip(t) {
                        *d -= c * (a - b);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
                inner,
            } => {
                let count = targets.len();
                let c = gout[0] / T::from_f64(count as f64);
                let g = acc(grads, *logits, probs.len());
                for (d, &p) in g.iter_mut().zip(probs) {
                    *d += c * p;
                }
                for (idx, &t) in targets.iter().enumerate() {
                    let (s, i) = (idx / inner, idx % inner);
                    g[s * classes * inner + t * inner + i] -= c;
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.rg(v) {
                        let g = acc(grads, v, 1);
                        g[0] += w * gout[0];
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// In-place numerically stable softmax over the middle axis of an
/// `outer x dim x inner` layout.
pub(crate) fn softmax_strided<T: Real>(data: &mut [T], outer: usize, dim: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * dim * inner + j * inner + i;
            let mut max = data[idx(0)];
            for j in 1..dim {
                max = max.max(data[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..dim {
                let e = (data[idx(j)] - max).exp();
                data[idx(j)] = e;
                sum += e;
            }
            for j in 0..dim {
                data[idx(j)] /= sum;
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[ci * g.h * g.w + ii as usize * g.w
                        ..ci * g.h * g.w + (ii as usize + 1) * g.w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = ci * g.h * g.w + ii as usize * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dx[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}
