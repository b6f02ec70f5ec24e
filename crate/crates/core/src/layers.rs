//! Parameterised building blocks.
//!
//! Every layer is constructed by pulling named tensors from a [`ParamSource`].
//! The same construction code therefore drives weight loading, random
//! initialisation and parameter enumeration, so names and shapes cannot drift
//! apart between them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{activation_in_place, conv3d, instance_norm, Activation, ConvSpec, Dims3, Tensor4};

/// What a parameter tensor is used for; drives initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { fan_in: usize },
    ConvBias { fan_in: usize },
    NormGain,
    NormShift,
    /// EMA bases, `[channels, count]`, columns unit-norm.
    Bases,
}

/// Supplies parameter tensors by name.
pub trait ParamSource {
    fn take(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Vec<f32>>;
}

/// A named parameter shape, as enumerated from a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records requested shapes and hands back empty buffers. Layers built from
/// it are only good for shape and cost queries.
#[derive(Debug, Default)]
pub struct ShapeRecorder {
    pub specs: Vec<ParamSpec>,
}

impl ParamSource for ShapeRecorder {
    fn take(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Vec<f32>> {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        });
        Ok(Vec::new())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.into()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normalisation applied inside convolution blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    Instance { eps: f32 },
    Identity,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Instance { eps: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv {
    pub fn build(src: &mut dyn ParamSource, prefix: &str, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.in_channels * spec.kernel.iter().product::<usize>();
        let [kd, kh, kw] = spec.kernel;
        let weight = src.take(
            &join(prefix, "weight"),
            &[spec.out_channels, spec.in_channels, kd, kh, kw],
            ParamKind::ConvWeight { fan_in },
        )?;
        let bias = if spec.has_bias {
            Some(src.take(&join(prefix, "bias"), &[spec.out_channels], ParamKind::ConvBias { fan_in })?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv3d(x, &self.weight, self.bias.as_deref(), &self.spec)
    }

    pub fn macs(&self, input: Dims3) -> Result<u64> {
        self.spec.macs(input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    kind: Normalization,
    gain: Vec<f32>,
    shift: Vec<f32>,
}

impl Norm {
    pub fn build(src: &mut dyn ParamSource, prefix: &str, channels: usize, kind: Normalization) -> Result<Self> {
        let (gain, shift) = match kind {
            Normalization::Instance { .. } => (
                src.take(&join(prefix, "gain"), &[channels], ParamKind::NormGain)?,
                src.take(&join(prefix, "shift"), &[channels], ParamKind::NormShift)?,
            ),
            Normalization::Identity => (Vec::new(), Vec::new()),
        };
        Ok(Self { kind, gain, shift })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        match self.kind {
            Normalization::Instance { eps } => instance_norm(x, &self.gain, &self.shift, eps),
            Normalization::Identity => Ok(x.clone()),
        }
    }
}

/// Shared block settings taken from the network configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockStyle {
    pub norm: Normalization,
    pub leaky_alpha: f32,
}

impl BlockStyle {
    fn act(&self) -> Activation {
        Activation::LeakyRelu(self.leaky_alpha)
    }
}

/// conv -> norm -> leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    conv: Conv,
    norm: Norm,
    act: Activation,
}

impl ConvBlock {
    pub fn build(src: &mut dyn ParamSource, prefix: &str, spec: ConvSpec, style: BlockStyle) -> Result<Self> {
        Ok(Self {
            conv: Conv::build(src, &join(prefix, "conv"), spec)?,
            norm: Norm::build(src, &join(prefix, "norm"), spec.out_channels, style.norm)?,
            act: style.act(),
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = self.norm.forward(&self.conv.forward(x)?)?;
        activation_in_place(&mut y, self.act);
        Ok(y)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.conv.spec
    }

    pub fn macs(&self, input: Dims3) -> Result<u64> {
        self.conv.macs(input)
    }
}

/// Pre-activation residual block:
/// `x + conv2(act(norm2(conv1(act(norm1(x))))))`, 3x3x3 same-padded convs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    norm1: Norm,
    conv1: Conv,
    norm2: Norm,
    conv2: Conv,
    act: Activation,
}

impl ResidualBlock {
    pub fn build(src: &mut dyn ParamSource, prefix: &str, width: usize, style: BlockStyle) -> Result<Self> {
        Ok(Self {
            norm1: Norm::build(src, &join(prefix, "norm1"), width, style.norm)?,
            conv1: Conv::build(src, &join(prefix, "conv1"), ConvSpec::same(width, width, 3))?,
            norm2: Norm::build(src, &join(prefix, "norm2"), width, style.norm)?,
            conv2: Conv::build(src, &join(prefix, "conv2"), ConvSpec::same(width, width, 3))?,
            act: style.act(),
        })
    }

    pub fn width(&self) -> usize {
        self.conv1.spec.in_channels
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        crate::error::ensure_eq("residual block channels", self.width(), x.channels())?;
        let mut h = self.norm1.forward(x)?;
        activation_in_place(&mut h, self.act);
        let h = self.conv1.forward(&h)?;
        let mut h = self.norm2.forward(&h)?;
        activation_in_place(&mut h, self.act);
        let mut out = self.conv2.forward(&h)?;
        out.add_assign(x)?;
        Ok(out)
    }

    pub fn macs(&self, input: Dims3) -> Result<u64> {
        Ok(self.conv1.macs(input)? + self.conv2.macs(input)?)
    }
}

/// Source that serves fixed values, handy for structural tests.
#[derive(Debug, Clone)]
pub struct ConstantSource {
    pub weight: f32,
    pub bias: f32,
}

impl ParamSource for ConstantSource {
    fn take(&mut self, _name: &str, shape: &[usize], kind: ParamKind) -> Result<Vec<f32>> {
        let n: usize = shape.iter().product();
        Ok(match kind {
            ParamKind::ConvWeight { .. } => vec![self.weight; n],
            ParamKind::ConvBias { .. } => vec![self.bias; n],
            ParamKind::NormGain => vec![1.0; n],
            ParamKind::NormShift => vec![0.0; n],
            ParamKind::Bases => {
                // Unit columns: a one-hot per column, cycling over rows.
                let (rows, cols) = (shape[0], shape[1]);
                let mut v = vec![0.0; n];
                for k in 0..cols {
                    v[(k % rows) * cols + k] = 1.0;
                }
                v
            }
        })
    }
}
