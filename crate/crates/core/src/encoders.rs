//! Per-modality encoders. Every encoder is batch-first: vectors come out as
//! `B x D`, maps as `B x C x H x W`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    Conv2d, Embedding, LayerNorm, Linear, ParamStore, Real, Session, Tensor, Var,
};
use crate::error::{Error, Result};

/// Value added to attention scores of padded keys.
const MASKED_SCORE: f64 = -1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Timeseries,
    Tabular,
    Categorical,
    ImageSpatial,
    ImageFlat,
}

/// Shape description of one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// Feature count (series, tabular) or channel count (images).
    #[serde(default)]
    pub channels: usize,
    /// Image height and width.
    #[serde(default)]
    pub extent: Option<[usize; 2]>,
    /// Longest sequence.
    #[serde(default)]
    pub max_len: Option<usize>,
    /// Category count; for images, set when pixels hold class labels.
    #[serde(default)]
    pub classes: Option<usize>,
}

impl ModalitySpec {
    /// Kind-specific fields must be present exactly when the kind needs them.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("modality `{}`: {what}", self.name)));
        let image = matches!(
            self.kind,
            ModalityKind::ImageSpatial | ModalityKind::ImageFlat
        );
        if image != self.extent.is_some() {
            return bad("spatial extent required for images only");
        }
        if (self.kind == ModalityKind::Timeseries) != self.max_len.is_some() {
            return bad("max length required for time series only");
        }
        match self.kind {
            ModalityKind::Categorical if self.classes.is_none() || self.channels != 0 => {
                bad("categorical needs classes and no channels")
            }
            ModalityKind::Timeseries | ModalityKind::Tabular
                if self.classes.is_some() || self.channels == 0 =>
            {
                bad("needs a positive feature count and no classes")
            }
            ModalityKind::ImageSpatial | ModalityKind::ImageFlat if self.channels == 0 => {
                bad("needs a positive channel count")
            }
            _ => Ok(()),
        }
    }
}

/// One batch of a single modality.
#[derive(Debug, Clone)]
pub enum ModalityBatch<T> {
    /// `B x T x F` values, `B * T` timestamps (days) and validity flags.
    Series {
        values: Tensor<T>,
        timestamps: Vec<f64>,
        mask: Vec<bool>,
    },
    /// `B x F`.
    Features(Tensor<T>),
    Classes(Vec<usize>),
    /// `B x C x H x W`.
    Images(Tensor<T>),
}

impl<T: Real> ModalityBatch<T> {
    pub fn len(&self) -> usize {
        match self {
            ModalityBatch::Series { values, .. } => values.shape()[0],
            ModalityBatch::Features(t) | ModalityBatch::Images(t) => t.shape()[0],
            ModalityBatch::Classes(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Latent {
    /// `B x D`.
    Vector(Var),
    /// `B x C x H x W`.
    Map(Var),
}

impl Latent {
    pub fn var(self) -> Var {
        match self {
            Latent::Vector(v) | Latent::Map(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EncoderConfig {
    Transformer {
        features: usize,
        #[serde(default = "d32")]
        d_model: usize,
        #[serde(default = "four")]
        layers: usize,
        #[serde(default = "d64")]
        ff_dim: usize,
    },
    Tabular {
        features: usize,
        #[serde(default = "d32")]
        hidden: usize,
        #[serde(default = "d32")]
        latent: usize,
    },
    Embedding {
        classes: usize,
        #[serde(default = "d32")]
        dim: usize,
    },
    Unet {
        channels: usize,
        #[serde(default = "eight")]
        base_width: usize,
        #[serde(default = "d64")]
        out_channels: usize,
    },
    Cnn {
        channels: usize,
        #[serde(default = "d512")]
        latent: usize,
    },
    FlatMlp {
        channels: usize,
        height: usize,
        width: usize,
        #[serde(default = "d256")]
        hidden: usize,
        #[serde(default = "d512")]
        latent: usize,
        #[serde(default = "p03")]
        dropout: f64,
    },
}

fn d32() -> usize {
    32
}
fn d64() -> usize {
    64
}
fn d256() -> usize {
    256
}
fn d512() -> usize {
    512
}
fn four() -> usize {
    4
}
fn eight() -> usize {
    8
}
fn p03() -> f64 {
    0.3
}

impl EncoderConfig {
    pub fn kind(&self) -> ModalityKind {
        match self {
            EncoderConfig::Transformer { .. } => ModalityKind::Timeseries,
            EncoderConfig::Tabular { .. } => ModalityKind::Tabular,
            EncoderConfig::Embedding { .. } => ModalityKind::Categorical,
            EncoderConfig::Unet { .. } => ModalityKind::ImageSpatial,
            EncoderConfig::Cnn { .. } | EncoderConfig::FlatMlp { .. } => ModalityKind::ImageFlat,
        }
    }

    /// Channel count of the latent map, or the latent vector length.
    pub fn latent_dim(&self) -> usize {
        match *self {
            EncoderConfig::Transformer { d_model, .. } => d_model,
            EncoderConfig::Tabular { latent, .. } => latent,
            EncoderConfig::Embedding { dim, .. } => dim,
            EncoderConfig::Unet { out_channels, .. } => out_channels,
            EncoderConfig::Cnn { latent, .. } | EncoderConfig::FlatMlp { latent, .. } => latent,
        }
    }

    pub fn produces_map(&self) -> bool {
        matches!(self, EncoderConfig::Unet { .. })
    }
}

/// Sinusoidal encoding of a (possibly non-integer) position: even slots hold
/// `sin(pos / 10000^(2i/d))`, odd slots the matching cosine.
pub fn positional_encoding(pos: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm single-head transformer over a masked sequence, mean-pooled.
#[derive(Debug, Clone)]
pub struct TimeseriesEncoder {
    input: Linear,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    pub features: usize,
    pub d_model: usize,
}

impl TimeseriesEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        features: usize,
        d_model: usize,
        layers: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), features, d_model, rng)?;
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(TransformerLayer {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d_model)?,
                    query: Linear::new(store, &format!("{p}.query"), d_model, d_model, rng)?,
                    key: Linear::new(store, &format!("{p}.key"), d_model, d_model, rng)?,
                    value: Linear::new(store, &format!("{p}.value"), d_model, d_model, rng)?,
                    out: Linear::new(store, &format!("{p}.out"), d_model, d_model, rng)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d_model)?,
                    ff1: Linear::new(store, &format!("{p}.ff1"), d_model, ff_dim, rng)?,
                    ff2: Linear::new(store, &format!("{p}.ff2"), ff_dim, d_model, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeseriesEncoder {
            input,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d_model)?,
            features,
            d_model,
        })
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        values: &Tensor<T>,
        timestamps: &[f64],
        mask: &[bool],
    ) -> Result<Var> {
        let shape = values.shape();
        if shape.len() != 3 || shape[2] != self.features {
            return Err(Error::ShapeMismatch {
                op: "encode_timeseries",
                lhs: shape.to_vec(),
                rhs: vec![0, 0, self.features],
            });
        }
        let (b, t, d) = (shape[0], shape[1], self.d_model);
        if timestamps.len() != b * t || mask.len() != b * t {
            return Err(Error::InvalidArgument(format!(
                "series of {b}x{t} steps needs {} timestamps and mask flags",
                b * t
            )));
        }
        if let Some(bad) = timestamps
            .iter()
            .find(|&&ts| !(ts >= 0.0 && ts.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "timestamp {bad} must be nonnegative"
            )));
        }
        for row in mask.chunks(t) {
            if !row.iter().any(|&m| m) {
                return Err(Error::InvalidArgument(
                    "sequence with no valid timestep".into(),
                ));
            }
        }

        let x = s.graph.constant(values.clone());
        let mut h = self.input.forward(s, x)?;
        let pe: Vec<T> = timestamps
            .iter()
            .flat_map(|&ts| positional_encoding(ts, d))
            .map(T::from_f64)
            .collect();
        let pe = s.graph.constant(Tensor::from_parts(vec![b, t, d], pe));
        h = s.graph.add(h, pe)?;

        let mut bias = Vec::with_capacity(b * t * t);
        for row in mask.chunks(t) {
            for _ in 0..t {
                bias.extend(
                    row.iter()
                        .map(|&m| T::from_f64(if m { 0.0 } else { MASKED_SCORE })),
                );
            }
        }
        let bias = s.graph.constant(Tensor::from_parts(vec![b, t, t], bias));
        let scale = 1.0 / (d as f64).sqrt();

        for layer in &self.layers {
            let n = layer.norm1.forward(s, h)?;
            let q = layer.query.forward(s, n)?;
            let k = layer.key.forward(s, n)?;
            let v = layer.value.forward(s, n)?;
            let scores = s.graph.batch_matmul(q, k, true)?;
            let scores = s.graph.scale(scores, scale)?;
            let scores = s.graph.add(scores, bias)?;
            let attn = s.graph.softmax(scores, 2)?;
            let ctx = s.graph.batch_matmul(attn, v, false)?;
            let ctx = layer.out.forward(s, ctx)?;
            h = s.graph.add(h, ctx)?;

            let n = layer.norm2.forward(s, h)?;
            let f = layer.ff1.forward(s, n)?;
            let f = s.graph.relu(f)?;
            let f = layer.ff2.forward(s, f)?;
            h = s.graph.add(h, f)?;
        }
        let h = self.final_norm.forward(s, h)?;
        s.graph.masked_mean(h, mask)
    }
}

/// Two hidden ReLU layers then a linear projection.
#[derive(Debug, Clone)]
pub struct TabularEncoder {
    layers: [Linear; 3],
    pub features: usize,
}

impl TabularEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        features: usize,
        hidden: usize,
        latent: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TabularEncoder {
            layers: [
                Linear::new(store, &format!("{name}.fc0"), features, hidden, rng)?,
                Linear::new(store, &format!("{name}.fc1"), hidden, hidden, rng)?,
                Linear::new(store, &format!("{name}.fc2"), hidden, latent, rng)?,
            ],
            features,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Var> {
        if x.rank() != 2 || x.shape()[1] != self.features {
            return Err(Error::ShapeMismatch {
                op: "encode_tabular",
                lhs: x.shape().to_vec(),
                rhs: vec![0, self.features],
            });
        }
        let mut h = s.graph.constant(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = s.graph.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
}

impl Stage {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Stage {
            conv: Conv2d::same3(store, name, cin, cout, rng)?,
        })
    }

    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        s.graph.relu(y)
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    reduce: Stage,
    merge: Stage,
}

/// Four pooling stages down, four nearest-neighbour stages up with skip
/// connections, then a pointwise projection to the latent channel count.
#[derive(Debug, Clone)]
pub struct UNet {
    down: Vec<Stage>,
    up: Vec<UpStage>,
    head: Conv2d,
    pub channels: usize,
    pub out_channels: usize,
}

pub const UNET_DEPTH: usize = 4;

impl UNet {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        base_width: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let widths: Vec<usize> = (0..=UNET_DEPTH).map(|l| base_width << l).collect();
        let mut down = Vec::new();
        let mut cin = channels;
        for (l, &w) in widths.iter().enumerate() {
            down.push(Stage::new(store, &format!("{name}.down{l}"), cin, w, rng)?);
            cin = w;
        }
        let mut up = Vec::new();
        for l in (0..UNET_DEPTH).rev() {
            let (wide, narrow) = (widths[l + 1], widths[l]);
            up.push(UpStage {
                reduce: Stage::new(store, &format!("{name}.up{l}.reduce"), wide, narrow, rng)?,
                merge: Stage::new(
                    store,
                    &format!("{name}.up{l}.merge"),
                    2 * narrow,
                    narrow,
                    rng,
                )?,
            });
        }
        let head = Conv2d::pointwise(store, &format!("{name}.head"), widths[0], out_channels, rng)?;
        Ok(UNet {
            down,
            up,
            head,
            channels,
            out_channels,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "encode_image_unet",
                lhs: shape.to_vec(),
                rhs: vec![0, self.channels, 0, 0],
            });
        }
        let factor = 1 << UNET_DEPTH;
        if !shape[2].is_multiple_of(factor) || !shape[3].is_multiple_of(factor) {
            return Err(Error::InvalidShape {
                op: "encode_image_unet",
                detail: format!(
                    "extents {}x{} must be divisible by {factor}",
                    shape[2], shape[3]
                ),
            });
        }
        let mut h = s.graph.constant(x.clone());
        let mut skips = Vec::with_capacity(UNET_DEPTH);
        for (l, stage) in self.down.iter().enumerate() {
            if l > 0 {
                h = s.graph.max_pool2(h)?;
            }
            h = stage.forward(s, h)?;
            if l < UNET_DEPTH {
                skips.push(h);
            }
        }
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = s.graph.upsample2(h)?;
            h = stage.reduce.forward(s, h)?;
            h = s.graph.concat(&[h, skip], 1)?;
            h = stage.merge.forward(s, h)?;
        }
        self.head.forward(s, h)
    }
}

/// Three conv/pool blocks, a wide conv and global average pooling.
#[derive(Debug, Clone)]
pub struct ImageCnn {
    blocks: Vec<Conv2d>,
    widen: Conv2d,
    pub channels: usize,
}

pub const CNN_MIN_EXTENT: usize = 16;
const CNN_WIDTHS: [usize; 3] = [16, 32, 64];

impl ImageCnn {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        latent: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut cin = channels;
        for (i, &w) in CNN_WIDTHS.iter().enumerate() {
            blocks.push(Conv2d::same3(
                store,
                &format!("{name}.block{i}"),
                cin,
                w,
                rng,
            )?);
            cin = w;
        }
        let widen = Conv2d::same3(store, &format!("{name}.widen"), cin, latent, rng)?;
        Ok(ImageCnn {
            blocks,
            widen,
            channels,
        })
    }

    /// Extents must be at least 16 and multiples of 8.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "encode_image_cnn",
                lhs: shape.to_vec(),
                rhs: vec![0, self.channels, 0, 0],
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h < CNN_MIN_EXTENT || w < CNN_MIN_EXTENT || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidShape {
                op: "encode_image_cnn",
                detail: format!("image {h}x{w} too small or not a multiple of 8"),
            });
        }
        let mut y = s.graph.constant(x.clone());
        for block in &self.blocks {
            y = block.forward(s, y)?;
            y = s.graph.relu(y)?;
            y = s.graph.max_pool2(y)?;
        }
        y = self.widen.forward(s, y)?;
        y = s.graph.relu(y)?;
        s.graph.spatial_mean(y)
    }
}

/// Flattens a small image and runs three linear layers.
#[derive(Debug, Clone)]
pub struct FlatImageEncoder {
    layers: [Linear; 3],
    dropout: f64,
    pub input_shape: [usize; 3],
}

impl FlatImageEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_shape: [usize; 3],
        hidden: usize,
        latent: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let flat = input_shape.iter().product();
        Ok(FlatImageEncoder {
            layers: [
                Linear::new(store, &format!("{name}.fc0"), flat, hidden, rng)?,
                Linear::new(store, &format!("{name}.fc1"), hidden, hidden, rng)?,
                Linear::new(store, &format!("{name}.fc2"), hidden, latent, rng)?,
            ],
            dropout,
            input_shape,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: &Tensor<T>) -> Result<Var> {
        let flat: usize = self.input_shape.iter().product();
        let shape = x.shape();
        if shape.len() < 2 || shape[1..].iter().product::<usize>() != flat {
            return Err(Error::ShapeMismatch {
                op: "encode_flat_image",
                lhs: shape.to_vec(),
                rhs: std::iter::once(0).chain(self.input_shape).collect(),
            });
        }
        let b = shape[0];
        let mut h = s.graph.constant(x.clone().reshape(vec![b, flat])?);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = s.graph.relu(h)?;
                h = s.dropout(h, self.dropout)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Timeseries(TimeseriesEncoder),
    Tabular(TabularEncoder),
    Categorical(Embedding),
    UNet(UNet),
    Cnn(ImageCnn),
    FlatImage(FlatImageEncoder),
}

impl Encoder {
    pub fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let name = format!("enc.{name}");
        Ok(match *config {
            EncoderConfig::Transformer {
                features,
                d_model,
                layers,
                ff_dim,
            } => Encoder::Timeseries(TimeseriesEncoder::new(
                store, &name, features, d_model, layers, ff_dim, rng,
            )?),
            EncoderConfig::Tabular {
                features,
                hidden,
                latent,
            } => Encoder::Tabular(TabularEncoder::new(
                store, &name, features, hidden, latent, rng,
            )?),
            EncoderConfig::Embedding { classes, dim } => {
                Encoder::Categorical(Embedding::new(store, &name, classes, dim, rng)?)
            }
            EncoderConfig::Unet {
                channels,
                base_width,
                out_channels,
            } => Encoder::UNet(UNet::new(
                store,
                &name,
                channels,
                base_width,
                out_channels,
                rng,
            )?),
            EncoderConfig::Cnn { channels, latent } => {
                Encoder::Cnn(ImageCnn::new(store, &name, channels, latent, rng)?)
            }
            EncoderConfig::FlatMlp {
                channels,
                height,
                width,
                hidden,
                latent,
                dropout,
            } => Encoder::FlatImage(FlatImageEncoder::new(
                store,
                &name,
                [channels, height, width],
                hidden,
                latent,
                dropout,
                rng,
            )?),
        })
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        batch: &ModalityBatch<T>,
    ) -> Result<Latent> {
        match (self, batch) {
            (
                Encoder::Timeseries(e),
                ModalityBatch::Series {
                    values,
                    timestamps,
                    mask,
                },
            ) => e.forward(s, values, timestamps, mask).map(Latent::Vector),
            (Encoder::Tabular(e), ModalityBatch::Features(x)) => {
                e.forward(s, x).map(Latent::Vector)
            }
            (Encoder::Categorical(e), ModalityBatch::Classes(ids)) => {
                e.forward(s, ids).map(Latent::Vector)
            }
            (Encoder::UNet(e), ModalityBatch::Images(x)) => e.forward(s, x).map(Latent::Map),
            (Encoder::Cnn(e), ModalityBatch::Images(x)) => e.forward(s, x).map(Latent::Vector),
            (Encoder::FlatImage(e), ModalityBatch::Images(x)) => {
                e.forward(s, x).map(Latent::Vector)
            }
            _ => Err(Error::InvalidArgument(
                "modality batch does not match encoder kind".into(),
            )),
        }
    }
}
