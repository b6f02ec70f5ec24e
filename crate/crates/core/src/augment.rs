//! Training-time augmentations as pure, seed-determined transforms.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{flip, mean_var, FlipAxes, Tensor4};

/// Largest rotation accepted, in degrees.
pub const MAX_ROTATION_DEG: f32 = 30.0;

/// Closed sampling range; `lo == hi` pins the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
}

impl Range {
    pub const fn fixed(v: f32) -> Self {
        Self { lo: v, hi: v }
    }

    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f32 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Probability of flipping each of the D, H, W axes.
    pub flip_probability: f32,
    /// Rotation angles in degrees within the (H, W), (D, W) and (D, H) planes.
    pub rotation_deg: [Range; 3],
    /// Per-channel shift, as a multiple of the channel's standard deviation.
    pub intensity_shift: Range,
    /// Per-channel multiplicative scale.
    pub intensity_scale: Range,
}

impl AugmentSpec {
    /// Settings used for training: random flips, +-10 degree rotations,
    /// +-0.1 shift, 0.9-1.1 scale.
    pub fn training() -> Self {
        Self {
            flip_probability: 0.5,
            rotation_deg: [Range::new(-10.0, 10.0); 3],
            intensity_shift: Range::new(-0.1, 0.1),
            intensity_scale: Range::new(0.9, 1.1),
        }
    }

    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            rotation_deg: [Range::fixed(0.0); 3],
            intensity_shift: Range::fixed(0.0),
            intensity_scale: Range::fixed(1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        for r in &self.rotation_deg {
            if r.lo.abs() > MAX_ROTATION_DEG || r.hi.abs() > MAX_ROTATION_DEG || r.lo > r.hi {
                return Err(Error::Invalid(alloc::format!(
                    "rotation range [{}, {}] exceeds +-{MAX_ROTATION_DEG} degrees",
                    r.lo,
                    r.hi
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Invalid("flip probability outside [0, 1]".into()));
        }
        Ok(())
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation by `deg` in the plane spanned by axes `a` and `b`.
fn plane_rotation(a: usize, b: usize, deg: f64) -> Mat3 {
    let (s, c) = libm::sincos(deg.to_radians());
    let mut m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    m[a][a] = c;
    m[a][b] = -s;
    m[b][a] = s;
    m[b][b] = c;
    m
}

/// Rotates every channel about the volume center, trilinear, zero fill.
fn rotate(input: &Tensor4, rot: &Mat3) -> Tensor4 {
    let dims = input.dims();
    let center = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let mut out = Tensor4::zeros(input.channels(), dims);
    let mut taps: Vec<(usize, f32)> = Vec::with_capacity(8);
    let mut idx = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [d as f64 - center[0], h as f64 - center[1], w as f64 - center[2]];
                // Inverse rotation (transpose) maps output to source coordinates.
                let src: [f64; 3] = core::array::from_fn(|i| (0..3).map(|k| rot[k][i] * p[k]).sum::<f64>() + center[i]);
                taps.clear();
                let base: [f64; 3] = src.map(libm::floor);
                let frac: [f64; 3] = core::array::from_fn(|i| src[i] - base[i]);
                for corner in 0..8 {
                    let mut weight = 1.0f64;
                    let mut inside = true;
                    let mut flat = 0usize;
                    for axis in 0..3 {
                        let hi = (corner >> (2 - axis)) & 1 == 1;
                        let coord = base[axis] as isize + hi as isize;
                        weight *= if hi { frac[axis] } else { 1.0 - frac[axis] };
                        if coord < 0 || coord >= dims[axis] as isize {
                            inside = false;
                        }
                        flat = flat * dims[axis] + coord.max(0) as usize;
                    }
                    if inside && weight > 0.0 {
                        taps.push((flat, weight as f32));
                    }
                }
                let n = out.voxels();
                for c in 0..input.channels() {
                    let ch = input.channel(c);
                    out.data_mut()[c * n + idx] = taps.iter().map(|&(i, wt)| ch[i] * wt).sum();
                }
                idx += 1;
            }
        }
    }
    out
}

/// Applies flips, rotation and per-channel intensity shift/scale drawn from
/// a generator seeded with `seed`.
pub fn augment(input: &Tensor4, spec: &AugmentSpec, seed: u64) -> Result<Tensor4> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coin = || spec.flip_probability > 0.0 && rng.random::<f32>() < spec.flip_probability;
    let axes = FlipAxes::new(coin(), coin(), coin());
    let angles: [f32; 3] = core::array::from_fn(|i| spec.rotation_deg[i].sample(&mut rng));

    let mut out = flip(input, axes);
    if angles.iter().any(|&a| a != 0.0) {
        // Planes (H, W), (D, W), (D, H).
        let rot = matmul(
            &matmul(&plane_rotation(1, 2, angles[0] as f64), &plane_rotation(0, 2, angles[1] as f64)),
            &plane_rotation(0, 1, angles[2] as f64),
        );
        out = rotate(&out, &rot);
    }
    for c in 0..out.channels() {
        let shift = spec.intensity_shift.sample(&mut rng);
        let scale = spec.intensity_scale.sample(&mut rng);
        if shift == 0.0 && scale == 1.0 {
            continue;
        }
        let (_, var) = mean_var(out.channel(c));
        let offset = shift as f64 * libm::sqrt(var);
        for v in out.channel_mut(c) {
            *v = ((*v as f64 + offset) * scale as f64) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor4 {
        Tensor4::from_fn(2, [6, 7, 8], |c, d, h, w| ((c * 31 + d * 7 + h * 3 + w) % 13) as f32 - 6.0)
    }

    #[test]
    fn identity_spec_is_identity() {
        let x = sample();
        assert_eq!(augment(&x, &AugmentSpec::identity(), 9).unwrap(), x);
    }

    #[test]
    fn unit_std_shift() {
        let x = Tensor4::from_fn(1, [2, 2, 2], |_, d, h, w| if (d + h + w) % 2 == 0 { 1.0 } else { -1.0 });
        let spec = AugmentSpec {
            intensity_shift: Range::fixed(0.1),
            ..AugmentSpec::identity()
        };
        let y = augment(&x, &spec, 0).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((b - a - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn seeded_determinism() {
        let x = sample();
        let spec = AugmentSpec::training();
        let a = augment(&x, &spec, 1234).unwrap();
        assert_eq!(a, augment(&x, &spec, 1234).unwrap());
        assert!(a.is_finite());
        assert_ne!(a, augment(&x, &spec, 1235).unwrap());
    }

    #[test]
    fn quarter_turn_moves_voxels() {
        // 90 degrees in the (H, W) plane maps (h, w) -> (w, n-1-h) on a square slice.
        let x = Tensor4::from_fn(1, [1, 3, 3], |_, _, h, w| (h * 3 + w) as f32);
        let spec = AugmentSpec {
            rotation_deg: [Range::fixed(30.0); 3],
            ..AugmentSpec::identity()
        };
        assert!(augment(&x, &spec, 0).is_ok());
        let rot = plane_rotation(1, 2, 90.0);
        let y = rotate(&x, &rot);
        assert!((y.get(0, 0, 1, 1) - 4.0).abs() < 1e-5);
        let moved: f32 = y.data().iter().sum();
        assert!((moved - 36.0).abs() < 1e-4);
    }

    #[test]
    fn oversized_rotation_rejected() {
        let spec = AugmentSpec {
            rotation_deg: [Range::fixed(45.0), Range::fixed(0.0), Range::fixed(0.0)],
            ..AugmentSpec::identity()
        };
        assert!(augment(&sample(), &spec, 0).is_err());
    }
}
