//! Channel and spatial attention over `C x H x W` feature maps.
//!
//! Channel gate: `g_c = sigmoid(W2 relu(W1 avg) + W2 relu(W1 max))`, with the
//! pools taken over spatial positions. Spatial gate: a single `s x s`
//! convolution over the two channel-pooled planes `[max; mean]` followed by a
//! sigmoid. Gates rescale the map elementwise.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{decode_features, encode_features, write_text};
use crate::linalg::Matrix;
use crate::{Error, Result};

/// Dense 3-D array indexed `(channel, row, column)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "feature map dims must be positive, got ({channels}, {height}, {width})"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a ({channels}, {height}, {width}) map",
                data.len()
            )));
        }
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: p / (height * width),
                col: p % (height * width),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for i in 0..channels {
            for j in 0..height {
                for k in 0..width {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Standard-normal entries.
    pub fn random(channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Self::from_fn(channels, height, width, |_, _, _| n.sample(rng))
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.height + j) * self.width + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The `H x W` plane of channel `i`.
    pub fn plane(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn scaled(&self, alpha: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Logistic function kept strictly inside (0, 1) even where f64 saturates.
#[inline]
pub(crate) fn gate_sigmoid(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Channel-attention MLP weights, `w1: hidden x C` and `w2: C x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionWeights {
    w1: Matrix,
    w2: Matrix,
    reduction: usize,
}

/// Hidden width of the channel MLP; rounds up when `C` is not a multiple of `k`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction.max(1)).max(1)
}

impl ChannelAttentionWeights {
    pub fn new(w1: Matrix, w2: Matrix, reduction: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::ShapeMismatch("reduction ratio must be positive".into()));
        }
        let channels = w1.cols();
        let hidden = hidden_width(channels, reduction);
        if w1.rows() != hidden || w2.rows() != channels || w2.cols() != hidden {
            return Err(Error::ShapeMismatch(format!(
                "channel MLP expects w1 {hidden}x{channels} and w2 {channels}x{hidden}, got {}x{} and {}x{}",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols()
            )));
        }
        Ok(Self { w1, w2, reduction })
    }

    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let h = hidden_width(channels, reduction);
        Self::new(Matrix::zeros(h, channels), Matrix::zeros(channels, h), reduction)
    }

    /// Gaussian init scaled by fan-in.
    pub fn random(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        let h = hidden_width(channels, reduction);
        let n1 = Normal::new(0.0, (1.0 / channels as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / h as f64).sqrt()).unwrap();
        let w1 = Matrix::from_fn(h, channels, |_, _| n1.sample(rng));
        let w2 = Matrix::from_fn(channels, h, |_, _| n2.sample(rng));
        Self::new(w1, w2, reduction)
    }

    pub fn channels(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }
}

/// Single-output convolution over the `[max; mean]` planes, `2 x s x s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionWeights {
    kernel: Vec<f64>,
    size: usize,
}

pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

impl SpatialAttentionWeights {
    pub fn new(kernel: Vec<f64>, size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial kernel size must be odd, got {size}"
            )));
        }
        if kernel.len() != 2 * size * size {
            return Err(Error::ShapeMismatch(format!(
                "spatial kernel of size {size} needs {} weights, got {}",
                2 * size * size,
                kernel.len()
            )));
        }
        Ok(Self { kernel, size })
    }

    pub fn zeros(size: usize) -> Result<Self> {
        Self::new(vec![0.0; 2 * size * size], size)
    }

    pub fn random(size: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = Normal::new(0.0, (1.0 / (2 * size * size) as f64).sqrt()).unwrap();
        Self::new((0..2 * size * size).map(|_| n.sample(rng)).collect(), size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Weight for input plane `c` (0 = max, 1 = mean) at kernel offset `(u, v)`.
    #[inline]
    pub fn weight(&self, c: usize, u: usize, v: usize) -> f64 {
        self.kernel[(c * self.size + u) * self.size + v]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.kernel
    }
}

/// Per-channel (mean, max) over spatial positions.
pub fn channel_pool(x: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let n = (x.height * x.width) as f64;
    (0..x.channels)
        .map(|i| {
            let p = x.plane(i);
            let sum: f64 = p.iter().sum();
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (sum / n, max)
        })
        .unzip()
}

fn mlp(w: &ChannelAttentionWeights, v: &[f64]) -> Vec<f64> {
    let hidden: Vec<f64> = w
        .w1
        .matvec(v)
        .expect("checked shape")
        .into_iter()
        .map(relu)
        .collect();
    w.w2.matvec(&hidden).expect("checked shape")
}

pub fn channel_attention(x: &FeatureMap, w: &ChannelAttentionWeights) -> Result<Vec<f64>> {
    if w.channels() != x.channels {
        return Err(Error::ShapeMismatch(format!(
            "channel weights for {} channels applied to a {}-channel map",
            w.channels(),
            x.channels
        )));
    }
    let (avg, max) = channel_pool(x);
    let a = mlp(w, &avg);
    let m = mlp(w, &max);
    Ok(a.iter().zip(&m).map(|(a, m)| gate_sigmoid(a + m)).collect())
}

pub fn apply_channel_gate(x: &FeatureMap, gate: &[f64]) -> Result<FeatureMap> {
    if gate.len() != x.channels {
        return Err(Error::ShapeMismatch(format!(
            "channel gate of length {} for {} channels",
            gate.len(),
            x.channels
        )));
    }
    let n = x.height * x.width;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(p, v)| v * gate[p / n])
        .collect();
    Ok(FeatureMap { data, ..x.clone() })
}

/// Channel-reduced planes: index 0 is the max, index 1 the mean.
pub fn spatial_pool(x: &FeatureMap) -> FeatureMap {
    let n = x.height * x.width;
    let mut max = vec![f64::NEG_INFINITY; n];
    let mut sum = vec![0.0; n];
    for i in 0..x.channels {
        for (p, &v) in x.plane(i).iter().enumerate() {
            max[p] = max[p].max(v);
            sum[p] += v;
        }
    }
    let c = x.channels as f64;
    max.extend(sum.into_iter().map(|s| s / c));
    FeatureMap {
        channels: 2,
        height: x.height,
        width: x.width,
        data: max,
    }
}

/// Row-major `H x W` gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGate {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SpatialGate {
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.width + k]
    }
}

pub fn spatial_attention(x: &FeatureMap, w: &SpatialAttentionWeights) -> Result<SpatialGate> {
    let pooled = spatial_pool(x);
    let (h, wd) = (x.height, x.width);
    let s = w.size;
    let pad = (s - 1) / 2;
    let mut values = Vec::with_capacity(h * wd);
    for j in 0..h {
        for k in 0..wd {
            let mut acc = 0.0;
            for c in 0..2 {
                for u in 0..s {
                    let Some(jj) = (j + u).checked_sub(pad).filter(|&v| v < h) else {
                        continue;
                    };
                    for v in 0..s {
                        let Some(kk) = (k + v).checked_sub(pad).filter(|&v| v < wd) else {
                            continue;
                        };
                        acc += w.weight(c, u, v) * pooled.get(c, jj, kk);
                    }
                }
            }
            values.push(gate_sigmoid(acc));
        }
    }
    Ok(SpatialGate {
        height: h,
        width: wd,
        values,
    })
}

pub fn apply_spatial_gate(x: &FeatureMap, gate: &SpatialGate) -> Result<FeatureMap> {
    if gate.height != x.height || gate.width != x.width || gate.values.len() != x.height * x.width
    {
        return Err(Error::ShapeMismatch(format!(
            "spatial gate {}x{} for a {}x{} map",
            gate.height, gate.width, x.height, x.width
        )));
    }
    let n = x.height * x.width;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(p, v)| v * gate.values[p % n])
        .collect();
    Ok(FeatureMap { data, ..x.clone() })
}

/// Placement of the two attention sub-modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AttentionOrder {
    #[default]
    ChannelThenSpatial,
    SpatialThenChannel,
    /// Both gates computed from the same input and multiplied in.
    Parallel,
}

impl AttentionOrder {
    pub const ALL: [AttentionOrder; 3] = [
        AttentionOrder::ChannelThenSpatial,
        AttentionOrder::SpatialThenChannel,
        AttentionOrder::Parallel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionOrder::ChannelThenSpatial => "channel-spatial",
            AttentionOrder::SpatialThenChannel => "spatial-channel",
            AttentionOrder::Parallel => "parallel",
        }
    }
}

impl std::str::FromStr for AttentionOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel-spatial" | "channel_then_spatial" => Ok(Self::ChannelThenSpatial),
            "spatial-channel" | "spatial_then_channel" => Ok(Self::SpatialThenChannel),
            "parallel" => Ok(Self::Parallel),
            other => Err(Error::InvalidConfig(format!("unknown attention order `{other}`"))),
        }
    }
}

/// Applies the attention sub-modules in the given order. A missing weight set
/// disables that sub-module (identity gate).
pub fn attention_block(
    x: &FeatureMap,
    channel: Option<&ChannelAttentionWeights>,
    spatial: Option<&SpatialAttentionWeights>,
    order: AttentionOrder,
) -> Result<FeatureMap> {
    let with_channel = |m: &FeatureMap| -> Result<FeatureMap> {
        match channel {
            Some(w) => apply_channel_gate(m, &channel_attention(m, w)?),
            None => Ok(m.clone()),
        }
    };
    let with_spatial = |m: &FeatureMap| -> Result<FeatureMap> {
        match spatial {
            Some(w) => apply_spatial_gate(m, &spatial_attention(m, w)?),
            None => Ok(m.clone()),
        }
    };
    match order {
        AttentionOrder::ChannelThenSpatial => with_spatial(&with_channel(x)?),
        AttentionOrder::SpatialThenChannel => with_channel(&with_spatial(x)?),
        AttentionOrder::Parallel => {
            let out = match channel {
                Some(w) => apply_channel_gate(x, &channel_attention(x, w)?)?,
                None => x.clone(),
            };
            match spatial {
                Some(w) => apply_spatial_gate(&out, &spatial_attention(x, w)?),
                None => Ok(out),
            }
        }
    }
}

// Weight files reuse the feature container (one row holding every weight)
// plus a one-line sidecar declaring the shape:
//   channel channels=<C> reduction=<k> hidden=<h>
//   spatial size=<s>

fn sidecar_fields(text: &str) -> Result<(String, Vec<(String, usize)>)> {
    let line = text.lines().next().unwrap_or("").trim();
    let mut parts = line.split_whitespace();
    let kind = parts
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty weight sidecar".into()))?
        .to_string();
    let mut fields = Vec::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("bad sidecar field `{p}`")))?;
        let v = v
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad sidecar value `{p}`")))?;
        fields.push((k.to_string(), v));
    }
    Ok((kind, fields))
}

fn field(fields: &[(String, usize)], key: &str) -> Result<usize> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::InvalidConfig(format!("weight sidecar lacks `{key}`")))
}

fn read_weight_files(bin: &Path, sidecar: &Path) -> Result<(Vec<f64>, String, Vec<(String, usize)>)> {
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let m = decode_features(&bytes)?;
    let (kind, fields) = sidecar_fields(&text)?;
    Ok((m.into_vec(), kind, fields))
}

pub fn save_channel_weights(w: &ChannelAttentionWeights, bin: &Path, sidecar: &Path) -> Result<()> {
    let mut flat = w.w1.as_slice().to_vec();
    flat.extend_from_slice(w.w2.as_slice());
    let m = Matrix::from_vec(1, flat.len(), flat)?;
    fs::write(bin, encode_features(&m)).map_err(|e| Error::io(bin, e))?;
    write_text(
        sidecar,
        &format!(
            "channel channels={} reduction={} hidden={}\n",
            w.channels(),
            w.reduction,
            w.hidden()
        ),
    )
}

pub fn load_channel_weights(bin: &Path, sidecar: &Path) -> Result<ChannelAttentionWeights> {
    let (flat, kind, fields) = read_weight_files(bin, sidecar)?;
    if kind != "channel" {
        return Err(Error::InvalidConfig(format!("expected channel weights, found `{kind}`")));
    }
    let c = field(&fields, "channels")?;
    let k = field(&fields, "reduction")?;
    let h = field(&fields, "hidden")?;
    if flat.len() != 2 * c * h {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for channels={c} hidden={h}",
            flat.len()
        )));
    }
    let w1 = Matrix::from_vec(h, c, flat[..h * c].to_vec())?;
    let w2 = Matrix::from_vec(c, h, flat[h * c..].to_vec())?;
    ChannelAttentionWeights::new(w1, w2, k)
}

pub fn save_spatial_weights(w: &SpatialAttentionWeights, bin: &Path, sidecar: &Path) -> Result<()> {
    let m = Matrix::from_vec(1, w.kernel.len(), w.kernel.clone())?;
    fs::write(bin, encode_features(&m)).map_err(|e| Error::io(bin, e))?;
    write_text(sidecar, &format!("spatial size={}\n", w.size))
}

pub fn load_spatial_weights(bin: &Path, sidecar: &Path) -> Result<SpatialAttentionWeights> {
    let (flat, kind, fields) = read_weight_files(bin, sidecar)?;
    if kind != "spatial" {
        return Err(Error::InvalidConfig(format!("expected spatial weights, found `{kind}`")));
    }
    SpatialAttentionWeights::new(flat, field(&fields, "size")?)
}
