//! Losses, learning-rate schedule and overlap / surface-distance metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_eq, Error, Result};
use crate::labels::{Mask3, RegionMasks};
use crate::network::RegionProbs;
use crate::tensor::{sq, Dims3};

/// Linear-interpolation percentile of ascending `sorted` at `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let i = libm::floor(pos) as usize;
            let frac = pos - i as f64;
            if frac == 0.0 || i + 1 >= n {
                sorted[i.min(n - 1)]
            } else {
                sorted[i] + frac * (sorted[i + 1] - sorted[i])
            }
        }
    }
}

fn region_list(target: &RegionMasks) -> [&Mask3; 3] {
    [&target.wt, &target.tc, &target.et]
}

fn check_pred_target(pred: &RegionProbs, target: &RegionMasks) -> Result<()> {
    for (axis, name) in ["depth", "height", "width"].iter().enumerate() {
        for m in region_list(target) {
            ensure_eq(name, pred.dims()[axis], m.dims()[axis])?;
        }
    }
    Ok(())
}

/// Generalized Dice loss over the three regions with inverse squared
/// volume weights `1 / (sum g + eps)^2`.
pub fn generalized_dice_loss(pred: &RegionProbs, target: &RegionMasks, eps: f64) -> Result<f64> {
    check_pred_target(pred, target)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (c, mask) in region_list(target).into_iter().enumerate() {
        let p = pred.tensor().channel(c);
        let g_sum = mask.count() as f64;
        let w = 1.0 / ((g_sum + eps) * (g_sum + eps));
        let (mut inter, mut total) = (0.0f64, 0.0f64);
        for (&pv, &gv) in p.iter().zip(mask.data()) {
            let (pv, gv) = (pv as f64, gv as u8 as f64);
            inter += pv * gv;
            total += pv + gv;
        }
        num += w * inter;
        den += w * total;
    }
    Ok(1.0 - 2.0 * num / (den + eps))
}

/// Mean binary cross-entropy over all voxels and regions.
pub fn bce_loss(pred: &RegionProbs, target: &RegionMasks, eps: f64) -> Result<f64> {
    check_pred_target(pred, target)?;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (c, mask) in region_list(target).into_iter().enumerate() {
        for (&pv, &g) in pred.tensor().channel(c).iter().zip(mask.data()) {
            let p = pv as f64;
            total -= if g { libm::log(p + eps) } else { libm::log(1.0 - p + eps) };
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

pub const LOSS_EPS: f64 = 1e-7;

/// Generalized Dice plus binary cross-entropy, unit weights.
pub fn combined_loss(pred: &RegionProbs, target: &RegionMasks) -> Result<f64> {
    Ok(generalized_dice_loss(pred, target, LOSS_EPS)? + bce_loss(pred, target, LOSS_EPS)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub power: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.0085,
            max_epochs: 450,
            warmup_epochs: 5,
            power: 0.9,
        }
    }
}

/// Linear warmup (`base * (e + 1) / warmup`) then polynomial decay
/// `base * (1 - e / max)^power`.
pub fn poly_lr(epoch: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if cfg.warmup_epochs >= cfg.max_epochs || !(cfg.power > 0.0) {
        return Err(Error::InvalidConfig(format!("bad schedule {cfg:?}")));
    }
    if epoch >= cfg.max_epochs {
        return Err(Error::Invalid(format!("epoch {epoch} outside 0..{}", cfg.max_epochs)));
    }
    Ok(if epoch < cfg.warmup_epochs {
        cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.base_lr * libm::pow(1.0 - epoch as f64 / cfg.max_epochs as f64, cfg.power)
    })
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_score(pred: &Mask3, gt: &Mask3) -> Result<f64> {
    pred.ensure_same_dims(gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

/// Mask voxels with at least one 6-connected neighbour outside the mask
/// (the volume border counts as outside).
pub fn surface(mask: &Mask3) -> Mask3 {
    let [d, h, w] = mask.dims();
    Mask3::from_fn(mask.dims(), |z, y, x| {
        mask.get(z, y, x)
            && (z == 0
                || z + 1 == d
                || y == 0
                || y + 1 == h
                || x == 0
                || x + 1 == w
                || !mask.get(z - 1, y, x)
                || !mask.get(z + 1, y, x)
                || !mask.get(z, y - 1, x)
                || !mask.get(z, y + 1, x)
                || !mask.get(z, y, x - 1)
                || !mask.get(z, y, x + 1))
    })
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample spacing `s2 = spacing^2`. `f` holds infinity where there is no site.
fn edt_1d(f: &[f64], s2: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64)) / (2.0 * s2 * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        *o = s2 * dq * dq + f[p];
    }
}

/// Squared Euclidean distance (mm^2) from every voxel to the nearest site.
pub fn squared_distance_transform(sites: &Mask3, spacing: [f64; 3]) -> Vec<f64> {
    let [nd, nh, nw] = sites.dims();
    let mut g: Vec<f64> = sites.data().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let longest = nd.max(nh).max(nw);
    let (mut f, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (vec![0usize; longest], vec![0.0; longest + 1]);
    // Along W, then H, then D.
    for zz in 0..nd {
        for y in 0..nh {
            let row = (zz * nh + y) * nw;
            f[..nw].copy_from_slice(&g[row..row + nw]);
            edt_1d(&f[..nw], spacing[2] * spacing[2], &mut out[..nw], &mut v, &mut z);
            g[row..row + nw].copy_from_slice(&out[..nw]);
        }
    }
    for zz in 0..nd {
        for x in 0..nw {
            for y in 0..nh {
                f[y] = g[(zz * nh + y) * nw + x];
            }
            edt_1d(&f[..nh], spacing[1] * spacing[1], &mut out[..nh], &mut v, &mut z);
            for y in 0..nh {
                g[(zz * nh + y) * nw + x] = out[y];
            }
        }
    }
    for y in 0..nh {
        for x in 0..nw {
            for zz in 0..nd {
                f[zz] = g[(zz * nh + y) * nw + x];
            }
            edt_1d(&f[..nd], spacing[0] * spacing[0], &mut out[..nd], &mut v, &mut z);
            for zz in 0..nd {
                g[(zz * nh + y) * nw + x] = out[zz];
            }
        }
    }
    g
}

/// Sorted distances from each surface voxel of `from` to the surface of `to`.
pub fn directed_surface_distances(from: &Mask3, to: &Mask3, spacing: [f64; 3]) -> Vec<f64> {
    let dist2 = squared_distance_transform(&surface(to), spacing);
    let mut d: Vec<f64> = surface(from)
        .data()
        .iter()
        .zip(&dist2)
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| libm::sqrt(d2))
        .collect();
    d.sort_unstable_by(f64::total_cmp);
    d
}

/// Symmetric 95th-percentile surface distance in millimetres.
pub fn hd95(pred: &Mask3, gt: &Mask3, spacing: [f64; 3]) -> Result<f64> {
    pred.ensure_same_dims(gt)?;
    if pred.is_empty() {
        return Err(Error::UndefinedDistance("prediction"));
    }
    if gt.is_empty() {
        return Err(Error::UndefinedDistance("ground truth"));
    }
    let ab = percentile_sorted(&directed_surface_distances(pred, gt, spacing), 0.95);
    let ba = percentile_sorted(&directed_surface_distances(gt, pred, spacing), 0.95);
    Ok(ab.max(ba))
}

/// Euclidean length of the volume diagonal, used as the penalty distance
/// when exactly one side of a comparison is empty.
pub fn diagonal_mm(dims: Dims3, spacing: [f64; 3]) -> f64 {
    libm::sqrt((0..3).map(|i| sq(dims[i] as f64 * spacing[i])).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor4;

    fn mask(dims: Dims3, on: &[Dims3]) -> Mask3 {
        Mask3::from_fn(dims, |d, h, w| on.contains(&[d, h, w]))
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_sorted(&v, 0.5), 2.5);
        assert_eq!(percentile_sorted(&v, 1.0), 4.0);
        assert_eq!(percentile_sorted(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn dice_cases() {
        let a = mask([1, 1, 4], &[[0, 0, 0], [0, 0, 1]]);
        let b = mask([1, 1, 4], &[[0, 0, 1], [0, 0, 2]]);
        let c = mask([1, 1, 4], &[[0, 0, 3]]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_score(&Mask3::empty([1, 1, 4]), &Mask3::empty([1, 1, 4])).unwrap(), 1.0);
        assert!(dice_score(&a, &Mask3::empty([1, 1, 5])).is_err());
    }

    #[test]
    fn hd95_single_voxels() {
        let a = mask([1, 1, 4], &[[0, 0, 0]]);
        let b = mask([1, 1, 4], &[[0, 0, 3]]);
        assert_eq!(hd95(&a, &b, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &b, [2.0; 3]).unwrap(), 6.0);
        assert_eq!(hd95(&Mask3::empty([1, 1, 4]), &b, [1.0; 3]), Err(Error::UndefinedDistance("prediction")));
        assert_eq!(hd95(&a, &Mask3::empty([1, 1, 4]), [1.0; 3]), Err(Error::UndefinedDistance("ground truth")));
    }

    #[test]
    fn surface_of_solid_cube() {
        let cube = Mask3::from_fn([5, 5, 5], |d, h, w| (1..4).contains(&d) && (1..4).contains(&h) && (1..4).contains(&w));
        let s = surface(&cube);
        assert_eq!(s.count(), 26);
        assert!(!s.get(2, 2, 2));
    }

    fn probs_from(masks: &RegionMasks, value: impl Fn(bool) -> f32) -> RegionProbs {
        let dims = masks.wt.dims();
        let mut data = Vec::new();
        for m in [&masks.wt, &masks.tc, &masks.et] {
            data.extend(m.data().iter().map(|&g| value(g)));
        }
        RegionProbs::new(Tensor4::from_vec(3, dims, data).unwrap()).unwrap()
    }

    #[test]
    fn gdl_hand_value() {
        // One populated region: g = [1,1,0,0], p = [1,0,0,0]; other regions empty and p = 0.
        let wt = Mask3::new([1, 1, 4], vec![true, true, false, false]).unwrap();
        let empty = Mask3::empty([1, 1, 4]);
        let masks = RegionMasks {
            wt: wt.clone(),
            tc: empty.clone(),
            et: empty,
        };
        let mut data = vec![0.0f32; 12];
        data[0] = 1.0;
        let pred = RegionProbs::new(Tensor4::from_vec(3, [1, 1, 4], data).unwrap()).unwrap();
        // Empty regions carry weight 1/eps^2 but contribute zero to both sums.
        let loss = generalized_dice_loss(&pred, &masks, 1e-12).unwrap();
        assert!((loss - 1.0 / 3.0).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn loss_extremes() {
        let wt = Mask3::new([1, 2, 2], vec![true, true, false, true]).unwrap();
        let tc = Mask3::new([1, 2, 2], vec![true, false, false, true]).unwrap();
        let et = Mask3::new([1, 2, 2], vec![false, false, false, true]).unwrap();
        let masks = RegionMasks { wt, tc, et };
        let perfect = probs_from(&masks, |g| g as u8 as f32);
        assert!(generalized_dice_loss(&perfect, &masks, 1e-9).unwrap().abs() < 1e-6);
        assert!(combined_loss(&perfect, &masks).unwrap() < 1e-4);
        let wrong = probs_from(&masks, |g| (!g) as u8 as f32);
        assert!((generalized_dice_loss(&wrong, &masks, 1e-12).unwrap() - 1.0).abs() < 1e-9);
        let half = probs_from(&masks, |_| 0.5);
        assert!((bce_loss(&half, &masks, 0.0).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_single_positive() {
        let m = Mask3::new([1, 1, 1], vec![true]).unwrap();
        let masks = RegionMasks {
            wt: m.clone(),
            tc: m.clone(),
            et: m,
        };
        let p = RegionProbs::new(Tensor4::full(3, [1, 1, 1], 0.9)).unwrap();
        let expected = -libm::log(0.9f32 as f64);
        assert!((bce_loss(&p, &masks, 0.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn schedule_values() {
        let cfg = ScheduleConfig::default();
        assert!((poly_lr(0, &cfg).unwrap() - 0.0017).abs() < 1e-15);
        assert!((poly_lr(5, &cfg).unwrap() - 0.0084149).abs() < 1e-7);
        let last = poly_lr(449, &cfg).unwrap();
        assert!(last > 0.0 && last < 1e-4);
        assert!(poly_lr(450, &cfg).is_err());
    }
}
