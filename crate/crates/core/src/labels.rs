//! Label maps, region masks and the label-level post-processing steps.
//!
//! Labels follow the BraTS convention: 0 background, 1 necrotic /
//! non-enhancing core, 2 edema, 4 enhancing tumor. Regions nest as
//! WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure_eq, Error, Result};
use crate::network::RegionProbs;
use crate::tensor::{center_resize, voxels, Dims3};

pub const BACKGROUND: u8 = 0;
pub const NCR_NET: u8 = 1;
pub const EDEMA: u8 = 2;
pub const ENHANCING: u8 = 4;

pub fn is_valid_label(v: u8) -> bool {
    matches!(v, BACKGROUND | NCR_NET | EDEMA | ENHANCING)
}

fn check_dims(a: Dims3, b: Dims3) -> Result<()> {
    for (axis, name) in ["depth", "height", "width"].iter().enumerate() {
        ensure_eq(name, a[axis], b[axis])?;
    }
    Ok(())
}

/// Boolean volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask3 {
    dims: Dims3,
    data: Vec<bool>,
}

impl Mask3 {
    pub fn new(dims: Dims3, data: Vec<bool>) -> Result<Self> {
        ensure_eq("mask length", voxels(dims), data.len())?;
        Ok(Self { dims, data })
    }

    pub fn empty(dims: Dims3) -> Self {
        Self {
            dims,
            data: vec![false; voxels(dims)],
        }
    }

    pub fn from_fn(dims: Dims3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(voxels(dims));
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    pub fn ensure_same_dims(&self, other: &Mask3) -> Result<()> {
        check_dims(self.dims, other.dims)
    }
}

/// Label volume with values restricted to {0, 1, 2, 4}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims3,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims3, data: Vec<u8>) -> Result<Self> {
        ensure_eq("label length", voxels(dims), data.len())?;
        if let Some(&bad) = data.iter().find(|&&v| !is_valid_label(v)) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { dims, data })
    }

    pub fn background(dims: Dims3) -> Self {
        Self {
            dims,
            data: vec![BACKGROUND; voxels(dims)],
        }
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Center-aligned crop/pad, filling with background.
    pub fn pad_or_crop(&self, target: Dims3) -> LabelMap {
        if target == self.dims {
            return self.clone();
        }
        LabelMap {
            dims: target,
            data: center_resize(&self.data, 1, self.dims, target, BACKGROUND),
        }
    }
}

/// Nested evaluation regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Mask3,
    pub tc: Mask3,
    pub et: Mask3,
}

/// Thresholds WT/TC/ET probabilities and inverts the nesting with the
/// precedence ET > TC > WT, so the result is nested even when the raw
/// probabilities are not.
pub fn regions_to_labels(probs: &RegionProbs, threshold: f32) -> LabelMap {
    let t = probs.tensor();
    let (wt, tc, et) = (t.channel(0), t.channel(1), t.channel(2));
    let data = (0..t.voxels())
        .map(|i| {
            if et[i] > threshold {
                ENHANCING
            } else if tc[i] > threshold {
                NCR_NET
            } else if wt[i] > threshold {
                EDEMA
            } else {
                BACKGROUND
            }
        })
        .collect();
    LabelMap { dims: t.dims(), data }
}

/// Nested masks from labels; rejects values outside {0, 1, 2, 4}.
pub fn labels_to_regions(labels: &LabelMap) -> Result<RegionMasks> {
    let n = labels.data.len();
    let (mut wt, mut tc, mut et) = (vec![false; n], vec![false; n], vec![false; n]);
    for (i, &v) in labels.data.iter().enumerate() {
        match v {
            BACKGROUND => {}
            NCR_NET => {
                wt[i] = true;
                tc[i] = true;
            }
            EDEMA => wt[i] = true,
            ENHANCING => {
                wt[i] = true;
                tc[i] = true;
                et[i] = true;
            }
            other => return Err(Error::InvalidLabel(other)),
        }
    }
    let dims = labels.dims;
    Ok(RegionMasks {
        wt: Mask3 { dims, data: wt },
        tc: Mask3 { dims, data: tc },
        et: Mask3 { dims, data: et },
    })
}

/// Relabels every enhancing voxel as NCR/NET when fewer than
/// `threshold_voxels` enhancing voxels were predicted.
pub fn postprocess(labels: &LabelMap, threshold_voxels: usize) -> LabelMap {
    let mut out = labels.clone();
    if labels.count(ENHANCING) < threshold_voxels {
        out.data.iter_mut().filter(|v| **v == ENHANCING).for_each(|v| *v = NCR_NET);
    }
    out
}

/// Edema and enhancing tumor from the single model, NCR/NET from the
/// cascade, with precedence ET > NCR/NET > ED.
pub fn hybrid_merge(single: &LabelMap, cascaded: &LabelMap) -> Result<LabelMap> {
    check_dims(single.dims, cascaded.dims)?;
    let data = single
        .data
        .iter()
        .zip(&cascaded.data)
        .map(|(&s, &c)| {
            if s == ENHANCING {
                ENHANCING
            } else if c == NCR_NET {
                NCR_NET
            } else if s == EDEMA {
                EDEMA
            } else {
                BACKGROUND
            }
        })
        .collect();
    Ok(LabelMap { dims: single.dims, data })
}
