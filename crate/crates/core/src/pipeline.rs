//! Whole-study inference: normalisation, fixed-size crop, sliding-window
//! prediction with flip test-time augmentation, ensembling, label
//! conversion, post-processing and the hybrid merge.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_eq, Error, Result};
use crate::labels::{hybrid_merge, postprocess, regions_to_labels, LabelMap, Mask3};
use crate::metrics::percentile_sorted;
use crate::network::{CascadeNet, RegionProbs, SingleNet, REGION_CHANNELS};
use crate::tensor::{sq, flip, pad_or_crop, voxels, Dims3, FlipAxes, Tensor4};

/// Number of MR sequences per study (T1, T1ce, T2, Flair).
pub const MODALITIES: usize = 4;

/// Four co-registered single-channel volumes plus the brain mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    modalities: [Tensor4; MODALITIES],
    brain_mask: Mask3,
}

impl Study {
    /// The brain mask is every voxel that is nonzero in any modality.
    pub fn new(modalities: [Tensor4; MODALITIES]) -> Result<Self> {
        let dims = modalities[0].dims();
        for m in &modalities {
            ensure_eq("modality channels", 1, m.channels())?;
            m.ensure_same_shape(&modalities[0])?;
        }
        let n = voxels(dims);
        let mask = (0..n).map(|i| modalities.iter().any(|m| m.data()[i] != 0.0)).collect();
        Ok(Self {
            modalities,
            brain_mask: Mask3::new(dims, mask)?,
        })
    }

    pub fn with_mask(modalities: [Tensor4; MODALITIES], brain_mask: Mask3) -> Result<Self> {
        for m in &modalities {
            ensure_eq("modality channels", 1, m.channels())?;
            m.ensure_same_shape(&modalities[0])?;
        }
        let dims = modalities[0].dims();
        for axis in 0..3 {
            ensure_eq("brain mask dims", dims[axis], brain_mask.dims()[axis])?;
        }
        Ok(Self { modalities, brain_mask })
    }

    /// Splits a 4-channel volume stacked T1, T1ce, T2, Flair.
    pub fn from_stacked(volume: &Tensor4) -> Result<Self> {
        ensure_eq("study channels", MODALITIES, volume.channels())?;
        Self::new(core::array::from_fn(|c| volume.slice_channels(c, c + 1)))
    }

    pub fn dims(&self) -> Dims3 {
        self.modalities[0].dims()
    }

    pub fn modalities(&self) -> &[Tensor4; MODALITIES] {
        &self.modalities
    }

    pub fn brain_mask(&self) -> &Mask3 {
        &self.brain_mask
    }
}

/// Per-modality clip to the 0.5 / 99.5 percentiles of brain voxels, then
/// z-score over brain voxels; background is set to 0.
pub fn preprocess(study: &Study) -> Result<Tensor4> {
    let mask = study.brain_mask.data();
    let brain = mask.iter().filter(|&&b| b).count();
    if brain == 0 {
        return Err(Error::EmptyBrainMask);
    }
    let dims = study.dims();
    let mut out = Tensor4::zeros(MODALITIES, dims);
    let mut values: Vec<f64> = Vec::with_capacity(brain);
    for (c, m) in study.modalities.iter().enumerate() {
        values.clear();
        values.extend(m.data().iter().zip(mask).filter(|(_, &b)| b).map(|(&v, _)| v as f64));
        let (lo, hi) = percentile_window(&mut values, 0.005, 0.995);
        let clip = |v: f32| (v as f64).clamp(lo, hi);
        let n = brain as f64;
        let mean = m.data().iter().zip(mask).filter(|(_, &b)| b).map(|(&v, _)| clip(v)).sum::<f64>() / n;
        let var = m
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &b)| b)
            .map(|(&v, _)| sq(clip(v) - mean))
            .sum::<f64>()
            / n;
        let std = libm::sqrt(var);
        if !(std > 0.0) {
            return Err(Error::ZeroStd(c));
        }
        for ((o, &v), &b) in out.channel_mut(c).iter_mut().zip(m.data()).zip(mask) {
            *o = if b { ((clip(v) - mean) / std) as f32 } else { 0.0 };
        }
    }
    Ok(out)
}

/// Linear-interpolation percentiles `q_lo` and `q_hi` of `values`
/// (reordered in place).
fn percentile_window(values: &mut [f64], q_lo: f64, q_hi: f64) -> (f64, f64) {
    if values.len() < 4096 {
        values.sort_unstable_by(f64::total_cmp);
        return (percentile_sorted(values, q_lo), percentile_sorted(values, q_hi));
    }
    (select_percentile(values, q_lo), select_percentile(values, q_hi))
}

/// Same as [`percentile_sorted`] but by selection instead of a full sort.
fn select_percentile(values: &mut [f64], q: f64) -> f64 {
    let pos = q * (values.len() - 1) as f64;
    let i = libm::floor(pos) as usize;
    let frac = pos - i as f64;
    let (_, &mut a, rest) = values.select_nth_unstable_by(i, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return a;
    }
    let b = rest.iter().copied().fold(f64::INFINITY, f64::min);
    a + frac * (b - a)
}

/// Patch origins covering a crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub crop_dims: Dims3,
    pub patch_dims: Dims3,
    pub strides: Dims3,
    pub positions: Vec<Dims3>,
}

fn axis_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut origins: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + patch <= len).collect();
    let last = len - patch;
    if origins.last() != Some(&last) {
        origins.push(last);
    }
    origins
}

/// Origins `0, s, 2s, ...` per axis while the patch fits, plus the flush
/// final origin; positions are the Cartesian product in D, H, W order.
pub fn plan_patches(crop_dims: Dims3, patch_dims: Dims3, strides: Dims3) -> Result<PatchPlan> {
    for axis in 0..3 {
        if patch_dims[axis] == 0 || patch_dims[axis] > crop_dims[axis] {
            return Err(Error::Invalid(format!(
                "patch extent {} does not fit crop extent {} on axis {axis}",
                patch_dims[axis], crop_dims[axis]
            )));
        }
        if strides[axis] == 0 || strides[axis] > patch_dims[axis] {
            return Err(Error::Invalid(format!(
                "stride {} on axis {axis} must be in 1..={} to leave no gaps",
                strides[axis], patch_dims[axis]
            )));
        }
    }
    let per_axis: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(crop_dims[a], patch_dims[a], strides[a])).collect();
    let mut positions = Vec::with_capacity(per_axis.iter().map(Vec::len).product());
    for &d in &per_axis[0] {
        for &h in &per_axis[1] {
            for &w in &per_axis[2] {
                positions.push([d, h, w]);
            }
        }
    }
    Ok(PatchPlan {
        crop_dims,
        patch_dims,
        strides,
        positions,
    })
}

/// Identity followed by the seven flips (x), (y), (z), (x, y), (x, z),
/// (y, z), (x, y, z), with x, y, z the depth, height and width axes.
pub fn tta_variants() -> [FlipAxes; 8] {
    [
        FlipAxes::new(false, false, false),
        FlipAxes::new(true, false, false),
        FlipAxes::new(false, true, false),
        FlipAxes::new(false, false, true),
        FlipAxes::new(true, true, false),
        FlipAxes::new(true, false, true),
        FlipAxes::new(false, true, true),
        FlipAxes::new(true, true, true),
    ]
}

/// Which flip variants are averaged per patch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMode {
    /// Unflipped prediction only.
    Off,
    /// Unflipped plus the seven flips.
    #[default]
    Full,
    /// The seven flips without the unflipped prediction.
    FlipsOnly,
}

impl TtaMode {
    pub fn variants(self) -> Vec<FlipAxes> {
        let all = tta_variants();
        match self {
            TtaMode::Off => vec![all[0]],
            TtaMode::Full => all.to_vec(),
            TtaMode::FlipsOnly => all[1..].to_vec(),
        }
    }
}

/// Anything that maps an image patch to region probabilities of the same
/// spatial size.
pub trait Predictor {
    fn predict(&self, patch: &Tensor4) -> Result<Tensor4>;
}

impl<F> Predictor for F
where
    F: Fn(&Tensor4) -> Result<Tensor4>,
{
    fn predict(&self, patch: &Tensor4) -> Result<Tensor4> {
        self(patch)
    }
}

impl Predictor for SingleNet {
    fn predict(&self, patch: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward(patch)?.into_tensor())
    }
}

/// The cascade predicts with its second stage.
impl Predictor for CascadeNet {
    fn predict(&self, patch: &Tensor4) -> Result<Tensor4> {
        Ok(self.forward(patch)?.stage2.into_tensor())
    }
}

fn extract_patch(volume: &Tensor4, origin: Dims3, dims: Dims3) -> Tensor4 {
    let [d0, h0, w0] = origin;
    let mut out = Tensor4::zeros(volume.channels(), dims);
    for c in 0..volume.channels() {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let src = volume.index(c, d0 + z, h0 + y, w0);
                let dst = out.index(c, z, y, 0);
                out.data_mut()[dst..dst + dims[2]].copy_from_slice(&volume.data()[src..src + dims[2]]);
            }
        }
    }
    out
}

/// Averages model predictions over every patch position and flip variant.
///
/// Each patch is flipped, predicted and flipped back before being summed
/// into the covered voxels; the result is the per-voxel mean. Sums run in
/// (position, variant) order with `f64` accumulators.
pub fn sliding_window_infer(model: &dyn Predictor, volume: &Tensor4, plan: &PatchPlan, tta: TtaMode) -> Result<RegionProbs> {
    for axis in 0..3 {
        ensure_eq(&format!("volume axis {axis} vs crop"), plan.crop_dims[axis], volume.dims()[axis])?;
    }
    let dims = volume.dims();
    let n = voxels(dims);
    let mut sum = vec![0.0f64; REGION_CHANNELS * n];
    let mut count = vec![0u32; n];
    let variants = tta.variants();
    let [pd, ph, pw] = plan.patch_dims;

    for &origin in &plan.positions {
        let patch = extract_patch(volume, origin, plan.patch_dims);
        for &axes in &variants {
            let pred = model.predict(&flip(&patch, axes))?;
            ensure_eq("prediction channels", REGION_CHANNELS, pred.channels())?;
            for axis in 0..3 {
                ensure_eq(&format!("prediction axis {axis}"), plan.patch_dims[axis], pred.dims()[axis])?;
            }
            let pred = flip(&pred, axes);
            for c in 0..REGION_CHANNELS {
                let ch = pred.channel(c);
                for z in 0..pd {
                    for y in 0..ph {
                        let dst = (c * dims[0] + origin[0] + z) * dims[1] * dims[2] + (origin[1] + y) * dims[2] + origin[2];
                        let src = (z * ph + y) * pw;
                        for (s, &p) in sum[dst..dst + pw].iter_mut().zip(&ch[src..src + pw]) {
                            *s += p as f64;
                        }
                    }
                }
            }
            for z in 0..pd {
                for y in 0..ph {
                    let dst = (origin[0] + z) * dims[1] * dims[2] + (origin[1] + y) * dims[2] + origin[2];
                    count[dst..dst + pw].iter_mut().for_each(|k| *k += 1);
                }
            }
        }
    }

    if let Some(i) = count.iter().position(|&k| k == 0) {
        return Err(Error::Invalid(format!("voxel {i} not covered by any patch")));
    }
    let data = sum
        .chunks(n)
        .flat_map(|ch| ch.iter().zip(&count).map(|(&s, &k)| (s / k as f64) as f32))
        .collect();
    RegionProbs::new(Tensor4::from_vec(REGION_CHANNELS, dims, data)?)
}

/// Voxelwise mean of the members.
pub fn ensemble(members: &[RegionProbs]) -> Result<RegionProbs> {
    let first = members
        .first()
        .ok_or_else(|| Error::Invalid("ensemble needs at least one member".into()))?;
    if members.len() == 1 {
        return Ok(first.clone());
    }
    for m in &members[1..] {
        first.tensor().ensure_same_shape(m.tensor())?;
    }
    let k = members.len() as f64;
    let data = (0..first.tensor().data().len())
        .map(|i| (members.iter().map(|m| m.tensor().data()[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    RegionProbs::new(Tensor4::from_vec(REGION_CHANNELS, first.dims(), data)?)
}

/// Inference settings. Defaults are the full-size competition settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub crop_dims: Dims3,
    pub patch_dims: Dims3,
    pub strides: Dims3,
    pub tta: TtaMode,
    pub region_threshold: f32,
    pub et_threshold_single: usize,
    pub et_threshold_cascade: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            crop_dims: [224, 160, 155],
            patch_dims: [128, 128, 128],
            strides: [32, 32, 27],
            tta: TtaMode::Full,
            region_threshold: 0.5,
            et_threshold_single: 300,
            et_threshold_cascade: 500,
        }
    }
}

/// Ensemble members per model family.
#[derive(Default)]
pub struct ModelEnsemble<'a> {
    pub single: Vec<&'a dyn Predictor>,
    pub cascade: Vec<&'a dyn Predictor>,
}

fn family_labels(
    members: &[&dyn Predictor],
    volume: &Tensor4,
    plan: &PatchPlan,
    config: &PipelineConfig,
    et_threshold: usize,
) -> Result<LabelMap> {
    let probs = members
        .iter()
        .map(|m| sliding_window_infer(*m, volume, plan, config.tta))
        .collect::<Result<Vec<_>>>()?;
    let mean = ensemble(&probs)?;
    Ok(postprocess(&regions_to_labels(&mean, config.region_threshold), et_threshold))
}

/// Full chain from raw study to a label map in the study's frame.
///
/// With both families present, edema and enhancing tumor come from the
/// single-network ensemble and NCR/NET from the cascade ensemble.
pub fn run_study(study: &Study, models: &ModelEnsemble<'_>, config: &PipelineConfig) -> Result<LabelMap> {
    if models.single.is_empty() && models.cascade.is_empty() {
        return Err(Error::Invalid("no ensemble members given".into()));
    }
    let volume = pad_or_crop(&preprocess(study)?, config.crop_dims, 0.0);
    let plan = plan_patches(config.crop_dims, config.patch_dims, config.strides)?;
    let single = if models.single.is_empty() {
        None
    } else {
        Some(family_labels(&models.single, &volume, &plan, config, config.et_threshold_single)?)
    };
    let cascade = if models.cascade.is_empty() {
        None
    } else {
        Some(family_labels(&models.cascade, &volume, &plan, config, config.et_threshold_cascade)?)
    };
    let merged = match (single, cascade) {
        (Some(s), Some(c)) => hybrid_merge(&s, &c)?,
        (Some(s), None) => s,
        (None, Some(c)) => c,
        (None, None) => unreachable!(),
    };
    Ok(merged.pad_or_crop(study.dims()))
}
