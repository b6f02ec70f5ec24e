//! Single and two-stage cascaded high-resolution / non-local networks.
//!
//! The single network encodes at full resolution `r` with two conv blocks,
//! drops to `r/2` with a stride-2 conv block, runs the PMF schedule (growing
//! to four scales, `r/2 .. r/16`), brings every branch back to `r/2` and
//! concatenates them, optionally refines the mix with EMA, projects it to the
//! stem width and upsamples to `r`, adds the encoder features as a long-range
//! residual, decodes with two conv blocks and emits three sigmoid region maps
//! (WT, TC, ET).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ema::{ema_forward, EmaParams};
use crate::error::{ensure_eq, Error, Result};
use crate::layers::{BlockStyle, Conv, ConvBlock, Normalization, ParamSource, ParamSpec, ShapeRecorder};
use crate::pmf::{downscale, PmfConfig, PmfModule, MAX_SCALE};
use crate::tensor::{activation_in_place, trilinear_resize, Activation, ConvSpec, Dims3, Tensor4};
use crate::weights::StoreReader;
use crate::weights::WeightStore;

/// Number of output region channels (WT, TC, ET).
pub const REGION_CHANNELS: usize = 3;

fn default_normalization() -> Normalization {
    Normalization::default()
}

fn default_alpha() -> f32 {
    0.01
}

fn default_multiplier() -> f32 {
    1.0
}

fn default_out() -> usize {
    REGION_CHANNELS
}

/// Architectural hyperparameters of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Channels at full resolution.
    pub stem_width: usize,
    /// Channels at scales `r/2, r/4, r/8, r/16`.
    pub branch_widths: Vec<usize>,
    /// Scale set of each PMF module, in order.
    pub pmf_schedule: Vec<Vec<usize>>,
    pub blocks_per_branch: usize,
    /// EMA base count `K`.
    pub bases: usize,
    /// EM iteration count `T`.
    pub em_iterations: usize,
    pub ema_enabled: bool,
    /// Inner EMA width; half the concatenated width when absent.
    #[serde(default)]
    pub ema_width: Option<usize>,
    #[serde(default = "default_out")]
    pub out_channels: usize,
    #[serde(default = "default_multiplier")]
    pub width_multiplier: f32,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    #[serde(default = "default_alpha")]
    pub leaky_alpha: f32,
}

fn growing_schedule() -> Vec<Vec<usize>> {
    alloc::vec![alloc::vec![1, 2], alloc::vec![1, 2, 3], alloc::vec![1, 2, 3, 4], alloc::vec![1, 2, 3, 4]]
}

impl NetConfig {
    /// Full-size single network.
    pub fn reference_single() -> Self {
        Self {
            in_channels: 4,
            stem_width: 32,
            branch_widths: alloc::vec![32, 64, 128, 256],
            pmf_schedule: growing_schedule(),
            blocks_per_branch: 1,
            bases: 256,
            em_iterations: 3,
            ema_enabled: true,
            ema_width: None,
            out_channels: REGION_CHANNELS,
            width_multiplier: 1.0,
            normalization: Normalization::default(),
            leaky_alpha: 0.01,
        }
    }

    /// Small network for tests and smoke runs.
    pub fn toy_single() -> Self {
        Self {
            stem_width: 8,
            branch_widths: alloc::vec![8, 16, 32, 64],
            blocks_per_branch: 2,
            bases: 8,
            em_iterations: 2,
            ..Self::reference_single()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.out_channels != REGION_CHANNELS {
            return bad(format!("out_channels must be {REGION_CHANNELS}, got {}", self.out_channels));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!("width_multiplier {} outside (0, 1]", self.width_multiplier));
        }
        if self.in_channels == 0 || self.stem_width == 0 {
            return bad("in_channels and stem_width must be positive".into());
        }
        if self.branch_widths.len() != MAX_SCALE || self.branch_widths.contains(&0) {
            return bad(format!("branch_widths needs {MAX_SCALE} positive entries"));
        }
        if self.pmf_schedule.is_empty() {
            return bad("pmf_schedule is empty".into());
        }
        let mut prev: Vec<usize> = alloc::vec![1];
        for (m, scales) in self.pmf_schedule.iter().enumerate() {
            let grows = scales.len() == prev.len() + 1;
            if !(scales.len() == prev.len() || grows) || scales[..prev.len()] != prev[..] {
                return bad(format!("pmf module {m} scales {scales:?} cannot follow {prev:?}"));
            }
            self.pmf_config(scales).validate()?;
            prev = scales.clone();
        }
        if self.ema_enabled && (self.bases == 0 || self.em_iterations == 0) {
            return bad("EMA needs bases >= 1 and em_iterations >= 1".into());
        }
        if matches!(self.normalization, Normalization::Instance { eps } if !(eps > 0.0)) {
            return bad("instance norm eps must be positive".into());
        }
        Ok(())
    }

    fn scaled(&self, width: usize) -> usize {
        (libm::roundf(width as f32 * self.width_multiplier) as usize).max(1)
    }

    pub fn effective_stem_width(&self) -> usize {
        self.scaled(self.stem_width)
    }

    pub fn effective_branch_widths(&self) -> Vec<usize> {
        self.branch_widths.iter().map(|&w| self.scaled(w)).collect()
    }

    fn pmf_config(&self, scales: &[usize]) -> PmfConfig {
        let widths = self.effective_branch_widths();
        PmfConfig {
            branch_scales: scales.to_vec(),
            branch_widths: scales.iter().map(|&s| widths.get(s - 1).copied().unwrap_or(0)).collect(),
            blocks_per_branch: self.blocks_per_branch,
        }
    }

    /// Scales present after the last PMF module.
    pub fn final_scales(&self) -> &[usize] {
        self.pmf_schedule.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Channels of the concatenated multi-scale features.
    pub fn mixed_width(&self) -> usize {
        let widths = self.effective_branch_widths();
        self.final_scales().iter().map(|&s| widths[s - 1]).sum()
    }

    pub fn effective_ema_width(&self) -> usize {
        self.ema_width.unwrap_or_else(|| (self.mixed_width() / 2).max(1))
    }

    /// Spatial dims must be multiples of this.
    pub fn granularity(&self) -> usize {
        let deepest = self.pmf_schedule.iter().flatten().copied().max().unwrap_or(1);
        1 << deepest
    }

    pub fn check_input_dims(&self, dims: Dims3) -> Result<()> {
        let g = self.granularity();
        if dims.iter().any(|&d| d == 0 || d % g != 0) {
            return Err(Error::Granularity {
                d: dims[0],
                h: dims[1],
                w: dims[2],
                granularity: g,
            });
        }
        Ok(())
    }

    fn style(&self) -> BlockStyle {
        BlockStyle {
            norm: self.normalization,
            leaky_alpha: self.leaky_alpha,
        }
    }

    /// Every parameter tensor this configuration needs, in build order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let mut rec = ShapeRecorder::default();
        SingleNet::build(self, &mut rec)?;
        Ok(rec.specs)
    }
}

/// Configuration of the two-stage cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stage1: NetConfig,
    pub stage2: NetConfig,
}

impl CascadeConfig {
    pub fn reference() -> Self {
        Self::narrowed(NetConfig::reference_single(), 0.5)
    }

    pub fn toy() -> Self {
        Self::narrowed(NetConfig::toy_single(), 0.5)
    }

    /// Stage 1 is `base` narrowed by `multiplier` without EMA; stage 2 is
    /// `base` fed with the image plus the stage-1 region maps.
    pub fn narrowed(base: NetConfig, multiplier: f32) -> Self {
        let stage1 = NetConfig {
            width_multiplier: multiplier,
            ema_enabled: false,
            ..base.clone()
        };
        let stage2 = NetConfig {
            in_channels: base.in_channels + base.out_channels,
            ..base
        };
        Self { stage1, stage2 }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        ensure_eq(
            "stage-2 input channels",
            self.stage1.in_channels + self.stage1.out_channels,
            self.stage2.in_channels,
        )?;
        if self.stage1.granularity() != self.stage2.granularity() {
            return Err(Error::InvalidConfig("cascade stages disagree on input granularity".into()));
        }
        Ok(())
    }
}

/// Three-channel sigmoid region probabilities in WT, TC, ET order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProbs(Tensor4);

impl RegionProbs {
    pub fn new(t: Tensor4) -> Result<Self> {
        ensure_eq("region channels", REGION_CHANNELS, t.channels())?;
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("region probability {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }

    pub fn dims(&self) -> Dims3 {
        self.0.dims()
    }
}

/// A built single network with owned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleNet {
    config: NetConfig,
    enc1: ConvBlock,
    enc2: ConvBlock,
    down: ConvBlock,
    pmf: Vec<PmfModule>,
    /// 1x1x1 projection before upsampling each branch beyond the first.
    recover: Vec<Option<Conv>>,
    ema: Option<EmaParams>,
    up: Conv,
    dec1: ConvBlock,
    dec2: ConvBlock,
    head: Conv,
}

impl SingleNet {
    pub fn build(config: &NetConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let style = config.style();
        let stem = config.effective_stem_width();
        let widths = config.effective_branch_widths();

        let enc1 = ConvBlock::build(src, "enc1", ConvSpec::same(config.in_channels, stem, 3), style)?;
        let enc2 = ConvBlock::build(src, "enc2", ConvSpec::same(stem, stem, 3), style)?;
        let down = ConvBlock::build(src, "down", ConvSpec::down(stem, widths[0]), style)?;

        let mut pmf = Vec::with_capacity(config.pmf_schedule.len());
        let mut scales: Vec<usize> = alloc::vec![1];
        for (m, sched) in config.pmf_schedule.iter().enumerate() {
            let in_widths: Vec<usize> = scales.iter().map(|&s| widths[s - 1]).collect();
            pmf.push(PmfModule::build(
                src,
                &format!("pmf{m}"),
                &scales,
                &in_widths,
                &config.pmf_config(sched),
                style,
            )?);
            scales = sched.clone();
        }

        let mut recover = Vec::with_capacity(scales.len());
        for (k, &s) in scales.iter().enumerate() {
            recover.push(if k == 0 {
                None
            } else {
                let w = widths[s - 1];
                Some(Conv::build(src, &format!("recover{k}"), ConvSpec::pointwise(w, w).without_bias())?)
            });
        }

        let mixed = config.mixed_width();
        let ema = if config.ema_enabled {
            Some(EmaParams::build(
                src,
                "ema",
                mixed,
                config.effective_ema_width(),
                config.bases,
                config.em_iterations,
            )?)
        } else {
            None
        };
        let up = Conv::build(src, "up", ConvSpec::pointwise(mixed, stem))?;
        let dec1 = ConvBlock::build(src, "dec1", ConvSpec::same(stem, stem, 3), style)?;
        let dec2 = ConvBlock::build(src, "dec2", ConvSpec::same(stem, stem, 3), style)?;
        let head = Conv::build(src, "head", ConvSpec::pointwise(stem, config.out_channels))?;
        Ok(Self {
            config: config.clone(),
            enc1,
            enc2,
            down,
            pmf,
            recover,
            ema,
            up,
            dec1,
            dec2,
            head,
        })
    }

    /// Builds from a store that must hold exactly the configured parameters.
    pub fn from_store(config: &NetConfig, store: &WeightStore) -> Result<Self> {
        let mut reader = StoreReader::new(store);
        let net = Self::build(config, &mut reader)?;
        reader.finish()?;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Head logits before the sigmoid.
    pub fn logits(&self, input: &Tensor4) -> Result<Tensor4> {
        ensure_eq("input channels", self.config.in_channels, input.channels())?;
        self.config.check_input_dims(input.dims())?;
        let full = input.dims();

        let encoded = self.enc2.forward(&self.enc1.forward(input)?)?;
        let mut branches = alloc::vec![self.down.forward(&encoded)?];
        for module in &self.pmf {
            branches = module.forward(&branches)?;
        }

        let half = branches[0].dims();
        let mut recovered = Vec::with_capacity(branches.len());
        for (b, proj) in branches.iter().zip(&self.recover) {
            recovered.push(match proj {
                None => b.clone(),
                Some(conv) => trilinear_resize(&conv.forward(b)?, half)?,
            });
        }
        let mut mixed = Tensor4::concat_channels(&recovered.iter().collect::<Vec<_>>())?;
        drop(recovered);
        if let Some(ema) = &self.ema {
            mixed = ema_forward(&mixed, ema)?;
        }

        let mut x = trilinear_resize(&self.up.forward(&mixed)?, full)?;
        x.add_assign(&encoded)?;
        let x = self.dec2.forward(&self.dec1.forward(&x)?)?;
        self.head.forward(&x)
    }

    pub fn forward(&self, input: &Tensor4) -> Result<RegionProbs> {
        let mut out = self.logits(input)?;
        activation_in_place(&mut out, Activation::Sigmoid);
        RegionProbs::new(out)
    }

    /// Multiply-accumulates for one forward pass at `dims`.
    pub fn macs(&self, dims: Dims3) -> Result<u64> {
        self.config.check_input_dims(dims)?;
        let half = downscale(dims, 1);
        let mut total = self.enc1.macs(dims)? + self.enc2.macs(dims)? + self.down.macs(dims)?;
        for module in &self.pmf {
            total += module.macs(half)?;
        }
        for (k, proj) in self.recover.iter().enumerate() {
            if let Some(conv) = proj {
                total += conv.macs(downscale(half, k))?;
            }
        }
        if let Some(ema) = &self.ema {
            total += ema.macs(half)?;
        }
        total += self.up.macs(half)?;
        total += self.dec1.macs(dims)? + self.dec2.macs(dims)? + self.head.macs(dims)?;
        Ok(total)
    }
}

/// A built two-stage cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeNet {
    pub stage1: SingleNet,
    pub stage2: SingleNet,
}

/// Both cascade outputs; stage 1 is kept for deep supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub stage1: RegionProbs,
    pub stage2: RegionProbs,
}

impl CascadeNet {
    pub fn build(config: &CascadeConfig, stage1: &mut dyn ParamSource, stage2: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stage1: SingleNet::build(&config.stage1, stage1)?,
            stage2: SingleNet::build(&config.stage2, stage2)?,
        })
    }

    pub fn from_stores(config: &CascadeConfig, stage1: &WeightStore, stage2: &WeightStore) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            stage1: SingleNet::from_store(&config.stage1, stage1)?,
            stage2: SingleNet::from_store(&config.stage2, stage2)?,
        })
    }

    pub fn forward(&self, input: &Tensor4) -> Result<CascadeOutput> {
        let stage1 = self.stage1.forward(input)?;
        let joined = Tensor4::concat_channels(&[input, stage1.tensor()])?;
        let stage2 = self.stage2.forward(&joined)?;
        Ok(CascadeOutput { stage1, stage2 })
    }

    pub fn macs(&self, dims: Dims3) -> Result<u64> {
        Ok(self.stage1.macs(dims)? + self.stage2.macs(dims)?)
    }
}

/// Runs the single network from a weight store.
pub fn single_forward(input: &Tensor4, weights: &WeightStore, config: &NetConfig) -> Result<RegionProbs> {
    SingleNet::from_store(config, weights)?.forward(input)
}

/// Runs the cascade from per-stage weight stores.
pub fn cascade_forward(
    input: &Tensor4,
    weights: (&WeightStore, &WeightStore),
    config: &CascadeConfig,
) -> Result<CascadeOutput> {
    CascadeNet::from_stores(config, weights.0, weights.1)?.forward(input)
}

/// Exact scalar parameter count.
pub fn param_count(config: &NetConfig) -> Result<usize> {
    Ok(config.param_specs()?.iter().map(ParamSpec::len).sum())
}

pub fn cascade_param_count(config: &CascadeConfig) -> Result<usize> {
    config.validate()?;
    Ok(param_count(&config.stage1)? + param_count(&config.stage2)?)
}

/// `2 * MACs` over convolutions and EMA matrix products; interpolation,
/// normalisation and activations are not counted.
pub fn flops(config: &NetConfig, dims: Dims3) -> Result<u64> {
    let net = SingleNet::build(config, &mut ShapeRecorder::default())?;
    Ok(2 * net.macs(dims)?)
}

pub fn cascade_flops(config: &CascadeConfig, dims: Dims3) -> Result<u64> {
    config.validate()?;
    Ok(flops(&config.stage1, dims)? + flops(&config.stage2, dims)?)
}
