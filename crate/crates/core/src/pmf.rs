//! Parallel multi-scale fusion.
//!
//! A module keeps one branch per scale. Each branch runs a stack of residual
//! blocks at its own resolution, then every output scale receives the sum of
//! all branches resampled to it: finer sources are brought down with chained
//! stride-2 3x3x3 convolutions, coarser sources are projected with a 1x1x1
//! convolution and trilinearly upsampled. The cross-scale paths carry no bias
//! or nonlinearity, so fusion is linear in each branch.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_eq, Error, Result};
use crate::layers::{join, BlockStyle, Conv, ConvBlock, ParamSource, ResidualBlock};
use crate::tensor::{trilinear_resize, ConvSpec, Dims3, Tensor4};

/// Scale indices run from 1 (half input resolution) to 4 (one sixteenth).
pub const MAX_SCALE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmfConfig {
    pub branch_scales: Vec<usize>,
    pub branch_widths: Vec<usize>,
    pub blocks_per_branch: usize,
}

impl PmfConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.branch_scales.len();
        if !(1..=MAX_SCALE).contains(&n) {
            return Err(Error::InvalidConfig(format!("PMF branch count {n} outside 1..={MAX_SCALE}")));
        }
        ensure_eq("PMF branch widths", n, self.branch_widths.len())?;
        if self.branch_widths.contains(&0) {
            return Err(Error::InvalidConfig("PMF branch width must be positive".into()));
        }
        for pair in self.branch_scales.windows(2) {
            if pair[1] != pair[0] + 1 {
                return Err(Error::InvalidConfig(format!(
                    "PMF scales must be consecutive, got {:?}",
                    self.branch_scales
                )));
            }
        }
        if self.branch_scales[0] == 0 || *self.branch_scales.last().unwrap() > MAX_SCALE {
            return Err(Error::InvalidConfig(format!(
                "PMF scales {:?} outside 1..={MAX_SCALE}",
                self.branch_scales
            )));
        }
        Ok(())
    }
}

/// Halves `dims` `steps` times.
pub(crate) fn downscale(dims: Dims3, steps: usize) -> Dims3 {
    dims.map(|d| d >> steps)
}

/// Resampling path from one branch to another inside a fusion block.
#[derive(Debug, Clone, PartialEq)]
enum FusePath {
    Down(Vec<Conv>),
    Up(Conv),
}

/// Fully connected fusion across a fixed list of branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    widths: Vec<usize>,
    /// `paths[i][j]`: source `j` into target `i`; `None` on the diagonal.
    paths: Vec<Vec<Option<FusePath>>>,
}

impl Fusion {
    pub fn build(src: &mut dyn ParamSource, prefix: &str, widths: &[usize]) -> Result<Self> {
        let n = widths.len();
        let mut paths = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                let name = join(prefix, &format!("to{i}_from{j}"));
                row.push(match j.cmp(&i) {
                    core::cmp::Ordering::Equal => None,
                    core::cmp::Ordering::Less => {
                        let steps = i - j;
                        let mut convs = Vec::with_capacity(steps);
                        for s in 0..steps {
                            let out = if s + 1 == steps { widths[i] } else { widths[j] };
                            convs.push(Conv::build(
                                src,
                                &join(&name, &format!("down{s}")),
                                ConvSpec::down(widths[j], out).without_bias(),
                            )?);
                        }
                        Some(FusePath::Down(convs))
                    }
                    core::cmp::Ordering::Greater => Some(FusePath::Up(Conv::build(
                        src,
                        &join(&name, "up"),
                        ConvSpec::pointwise(widths[j], widths[i]).without_bias(),
                    )?)),
                });
            }
            paths.push(row);
        }
        Ok(Self {
            widths: widths.to_vec(),
            paths,
        })
    }

    /// Output `i` is the sum over sources `j` (ascending) of `branch_j`
    /// resampled to branch `i`'s width and resolution.
    pub fn forward(&self, branches: &[Tensor4]) -> Result<Vec<Tensor4>> {
        check_branches(branches, &self.widths)?;
        let mut outputs = Vec::with_capacity(branches.len());
        for (i, row) in self.paths.iter().enumerate() {
            let target = branches[i].dims();
            let mut acc: Option<Tensor4> = None;
            for (j, path) in row.iter().enumerate() {
                let term = match path {
                    None => branches[j].clone(),
                    Some(FusePath::Down(convs)) => {
                        let mut t = convs[0].forward(&branches[j])?;
                        for conv in &convs[1..] {
                            t = conv.forward(&t)?;
                        }
                        t
                    }
                    Some(FusePath::Up(conv)) => trilinear_resize(&conv.forward(&branches[j])?, target)?,
                };
                match acc.as_mut() {
                    None => acc = Some(term),
                    Some(a) => a.add_assign(&term)?,
                }
            }
            outputs.push(acc.expect("fusion has at least one branch"));
        }
        Ok(outputs)
    }

    pub fn macs(&self, base: Dims3) -> Result<u64> {
        let mut total = 0;
        for row in &self.paths {
            for (j, path) in row.iter().enumerate() {
                match path {
                    None => {}
                    Some(FusePath::Down(convs)) => {
                        let mut dims = downscale(base, j);
                        for conv in convs {
                            total += conv.macs(dims)?;
                            dims = conv.spec.output_dims(dims)?;
                        }
                    }
                    Some(FusePath::Up(conv)) => total += conv.macs(downscale(base, j))?,
                }
            }
        }
        Ok(total)
    }
}

/// Branch `k` must be exactly half the resolution of branch `k - 1`.
fn check_branches(branches: &[Tensor4], widths: &[usize]) -> Result<()> {
    ensure_eq("branch count", widths.len(), branches.len())?;
    let base = branches[0].dims();
    for (k, (b, &w)) in branches.iter().zip(widths).enumerate() {
        ensure_eq(&format!("branch {k} channels"), w, b.channels())?;
        for axis in 0..3 {
            if base[axis] % (1 << k) != 0 {
                return Err(Error::Invalid(format!(
                    "branch 0 extent {} on axis {axis} not divisible by {}",
                    base[axis],
                    1 << k
                )));
            }
            ensure_eq(&format!("branch {k} axis {axis}"), base[axis] >> k, b.dims()[axis])?;
        }
    }
    Ok(())
}

/// One PMF module: optional new deepest branch, residual branches, fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct PmfModule {
    config: PmfConfig,
    input_branches: usize,
    grow: Option<ConvBlock>,
    branches: Vec<Vec<ResidualBlock>>,
    fusion: Fusion,
}

impl PmfModule {
    /// `input_scales` are the scales this module will receive; the config may
    /// add exactly one deeper scale, built by a stride-2 conv block from the
    /// deepest input branch before the residual stacks run.
    pub fn build(
        src: &mut dyn ParamSource,
        prefix: &str,
        input_scales: &[usize],
        input_widths: &[usize],
        config: &PmfConfig,
        style: BlockStyle,
    ) -> Result<Self> {
        config.validate()?;
        ensure_eq("PMF input widths", input_scales.len(), input_widths.len())?;
        let n_in = input_scales.len();
        let n = config.branch_scales.len();
        if n_in == 0 || config.branch_scales[..n_in.min(n)] != *input_scales || !(n == n_in || n == n_in + 1) {
            return Err(Error::InvalidConfig(format!(
                "PMF module scales {:?} cannot follow input scales {:?}",
                config.branch_scales, input_scales
            )));
        }
        for (k, (&a, &b)) in input_widths.iter().zip(&config.branch_widths).enumerate() {
            ensure_eq(&format!("PMF branch {k} width"), b, a)?;
        }
        let grow = if n > n_in {
            Some(ConvBlock::build(
                src,
                &join(prefix, "grow"),
                ConvSpec::down(input_widths[n_in - 1], config.branch_widths[n - 1]),
                style,
            )?)
        } else {
            None
        };
        let mut branches = Vec::with_capacity(n);
        for (k, &w) in config.branch_widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_branch);
            for b in 0..config.blocks_per_branch {
                blocks.push(ResidualBlock::build(
                    src,
                    &join(prefix, &format!("branch{k}.block{b}")),
                    w,
                    style,
                )?);
            }
            branches.push(blocks);
        }
        let fusion = Fusion::build(src, &join(prefix, "fuse"), &config.branch_widths)?;
        Ok(Self {
            config: config.clone(),
            input_branches: n_in,
            grow,
            branches,
            fusion,
        })
    }

    pub fn config(&self) -> &PmfConfig {
        &self.config
    }

    pub fn forward(&self, inputs: &[Tensor4]) -> Result<Vec<Tensor4>> {
        check_branches(inputs, &self.config.branch_widths[..self.input_branches])?;
        let mut feats: Vec<Tensor4> = inputs.to_vec();
        if let Some(grow) = &self.grow {
            let deepest = grow.forward(feats.last().expect("non-empty"))?;
            feats.push(deepest);
        }
        for (x, blocks) in feats.iter_mut().zip(&self.branches) {
            for block in blocks {
                *x = block.forward(x)?;
            }
        }
        self.fusion.forward(&feats)
    }

    /// MACs given the resolution of the first branch.
    pub fn macs(&self, base: Dims3) -> Result<u64> {
        let mut total = 0;
        if let Some(grow) = &self.grow {
            total += grow.macs(downscale(base, self.input_branches - 1))?;
        }
        for (k, blocks) in self.branches.iter().enumerate() {
            for block in blocks {
                total += block.macs(downscale(base, k))?;
            }
        }
        Ok(total + self.fusion.macs(base)?)
    }
}
