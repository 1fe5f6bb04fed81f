//! Intermediate fusion of per-modality latents.

use rand::Rng;

use crate::diffcore::{Conv2d, Graph, ParamStore, Real, Session, Var};
use crate::encoders::Latent;
use crate::error::{Error, Result};

/// Channel count of the fused map.
pub const FUSED_CHANNELS: usize = 64;

/// Concatenates `B x D_i` latents in the given order.
pub fn fuse_vectors<T: Real>(g: &mut Graph<T>, latents: &[Var]) -> Result<Var> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("nothing to fuse".into()));
    }
    g.concat(latents, 1)
}

/// Expands `B x D` to `B x D x H x W` with constant channel planes.
pub fn broadcast_to_map<T: Real>(g: &mut Graph<T>, v: Var, h: usize, w: usize) -> Result<Var> {
    g.broadcast_map(v, h, w)
}

/// Channel concatenation followed by two pointwise ReLU convolutions.
#[derive(Debug, Clone)]
pub struct SpatialFusion {
    reduce: Conv2d,
    mix: Conv2d,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl SpatialFusion {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(SpatialFusion {
            reduce: Conv2d::pointwise(store, "fusion.reduce", in_channels, out_channels, rng)?,
            mix: Conv2d::pointwise(store, "fusion.mix", out_channels, out_channels, rng)?,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, maps: &[Var]) -> Result<Var> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to fuse".into()))?;
        let extent = s.graph.shape(*first)[2..].to_vec();
        for &m in &maps[1..] {
            if s.graph.shape(m)[2..] != extent[..] {
                return Err(Error::ShapeMismatch {
                    op: "fuse_spatial",
                    lhs: s.graph.shape(*first).to_vec(),
                    rhs: s.graph.shape(m).to_vec(),
                });
            }
        }
        let x = s.graph.concat(maps, 1)?;
        let x = self.reduce.forward(s, x)?;
        let x = s.graph.relu(x)?;
        let x = self.mix.forward(s, x)?;
        s.graph.relu(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fused {
    Vector(Var),
    Map(Var),
}

impl Fused {
    pub fn var(self) -> Var {
        match self {
            Fused::Vector(v) | Fused::Map(v) => v,
        }
    }
}

/// Fusion stage chosen at model build time: plain concatenation when every
/// latent is a vector, otherwise broadcast vectors and fuse spatially.
#[derive(Debug, Clone)]
pub enum Fusion {
    Concat,
    Spatial(SpatialFusion),
}

impl Fusion {
    /// `dims` holds each latent's width and whether it is a map.
    pub fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        dims: &[(usize, bool)],
        rng: &mut R,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config(
                "a model needs at least one input modality".into(),
            ));
        }
        if dims.iter().any(|&(_, map)| map) {
            let total = dims.iter().map(|&(d, _)| d).sum();
            Ok(Fusion::Spatial(SpatialFusion::new(
                store,
                total,
                FUSED_CHANNELS,
                rng,
            )?))
        } else {
            Ok(Fusion::Concat)
        }
    }

    /// Width of the fused vector or channel count of the fused map.
    pub fn output_dim(&self, dims: &[(usize, bool)]) -> usize {
        match self {
            Fusion::Concat => dims.iter().map(|&(d, _)| d).sum(),
            Fusion::Spatial(f) => f.out_channels,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, latents: &[Latent]) -> Result<Fused> {
        match self {
            Fusion::Concat => {
                let vars: Vec<Var> = latents
                    .iter()
                    .map(|l| match l {
                        Latent::Vector(v) => Ok(*v),
                        Latent::Map(_) => {
                            Err(Error::InvalidArgument("map latent in vector fusion".into()))
                        }
                    })
                    .collect::<Result<_>>()?;
                fuse_vectors(&mut s.graph, &vars).map(Fused::Vector)
            }
            Fusion::Spatial(f) => {
                let (h, w) = latents
                    .iter()
                    .find_map(|l| match l {
                        Latent::Map(m) => {
                            let sh = s.graph.shape(*m);
                            Some((sh[2], sh[3]))
                        }
                        Latent::Vector(_) => None,
                    })
                    .ok_or_else(|| {
                        Error::InvalidArgument("spatial fusion without a map latent".into())
                    })?;
                let maps = latents
                    .iter()
                    .map(|l| match *l {
                        Latent::Map(m) => Ok(m),
                        Latent::Vector(v) => broadcast_to_map(&mut s.graph, v, h, w),
                    })
                    .collect::<Result<Vec<_>>>()?;
                f.forward(s, &maps).map(Fused::Map)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vector_fusion_concatenates_in_order() {
        let mut g = Graph::<f64>::new();
        let parts: Vec<Var> = (0..3)
            .map(|i| g.constant(Tensor::full(&[2, 512], i as f64)))
            .collect();
        let f = fuse_vectors(&mut g, &parts).unwrap();
        assert_eq!(g.shape(f), &[2, 1536]);
        let row = &g.value(f).data()[..1536];
        assert!(row[..512].iter().all(|&v| v == 0.0));
        assert!(row[1024..].iter().all(|&v| v == 2.0));
        let single = fuse_vectors(&mut g, &parts[..1]).unwrap();
        assert_eq!(g.value(single), g.value(parts[0]));
        assert!(fuse_vectors(&mut g, &[]).is_err());
    }

    #[test]
    fn broadcast_then_mean_recovers_vector() {
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::from_f64(vec![1, 2], &[1.0, 2.0]).unwrap());
        let m = broadcast_to_map(&mut g, v, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[1., 1., 1., 1., 2., 2., 2., 2.]);
        let back = g.spatial_mean(m).unwrap();
        assert_eq!(g.value(back).data(), &[1.0, 2.0]);
        let total = g.sum(m).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn spatial_fusion_preserves_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let fusion = SpatialFusion::new(&mut store, 128, 64, &mut rng).unwrap();
        let mut s = Session::new(&mut store, false, &mut rng);
        let a = s.graph.constant(Tensor::ones(&[1, 64, 32, 32]));
        let b = s.graph.constant(Tensor::ones(&[1, 64, 32, 32]));
        let y = fusion.forward(&mut s, &[a, b]).unwrap();
        assert_eq!(s.graph.shape(y), &[1, 64, 32, 32]);
        let small = s.graph.constant(Tensor::ones(&[1, 64, 16, 16]));
        assert!(matches!(
            fusion.forward(&mut s, &[a, small]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
