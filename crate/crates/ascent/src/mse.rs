//! Multi-scale encoder: stacked convolution blocks producing a feature
//! pyramid. The first block is three 3x3 convolutions (batch norm + ReLU)
//! followed by a 2x2 max pool; each further block is a single stride-2
//! convolution with batch norm + ReLU, so every block halves the spatial
//! extent. Channel width equals the backbone embedding width at every level,
//! so the pyramid feeds the fusion stage without extra projections.

use crate::backbone::Registry;
use crate::numerics::{BatchStats, NumericsError, Rng, Tape, Tensor, Var};
use crate::ModelError;

#[derive(Debug, Clone)]
pub struct MseConfig {
    /// S: number of pyramid levels.
    pub num_scales: usize,
    /// Channel width of every level (= backbone dim).
    pub channels: usize,
    pub in_channels: usize,
    pub image_size: usize,
    /// Strides of the three convolutions in block 1. The desk preset keeps
    /// them at 1 (levels at 1/2, 1/4, 1/8 of the input); the published
    /// 224px preset uses (2, 2, 1) to reach 1/8, 1/16, 1/32.
    pub block1_strides: [usize; 3],
}

/// Level sizes as published for the 224px configuration. They do not follow
/// from the stated scale fractions (224/8 = 28 gives 784 positions, not
/// 1024); the constant preserves the published figures verbatim while
/// [`MseConfig::level_sides`] reports the self-consistent arithmetic.
pub const PAPER_STATED_LEVEL_SIZES: [usize; 3] = [1024, 196, 16];

impl MseConfig {
    pub fn desk() -> Self {
        MseConfig {
            num_scales: 3,
            channels: 64,
            in_channels: 1,
            image_size: 32,
            block1_strides: [1, 1, 1],
        }
    }

    pub fn paper() -> Self {
        MseConfig {
            num_scales: 3,
            channels: 1024,
            in_channels: 3,
            image_size: 224,
            block1_strides: [2, 2, 1],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_scales == 0 {
            return Err(ModelError::Config("num_scales must be at least 1".into()));
        }
        if self.image_size < (1 << self.num_scales) {
            return Err(ModelError::Config(format!(
                "image size {} too small for {} scales",
                self.image_size, self.num_scales
            )));
        }
        if self.block1_strides.iter().any(|&s| s == 0) {
            return Err(ModelError::Config("block 1 strides must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of each pyramid level under the conv/pool arithmetic
    /// (3x3 kernels, pad 1: stride 1 preserves extent, stride 2 yields
    /// ceil(n/2); the block-1 max pool halves evenly).
    pub fn level_sides(&self) -> Vec<usize> {
        let mut side = self.image_size;
        for s in self.block1_strides {
            side = conv_out(side, s);
        }
        side /= 2; // max pool 2x2 stride 2
        let mut sides = vec![side];
        for _ in 1..self.num_scales {
            side = conv_out(side, 2);
            sides.push(side);
        }
        sides
    }

    /// Total flattened row count of the pyramid.
    pub fn flat_rows(&self) -> usize {
        self.level_sides().iter().map(|s| s * s).sum()
    }
}

fn conv_out(n: usize, stride: usize) -> usize {
    // kernel 3, pad 1
    (n + 2 - 3) / stride + 1
}

#[derive(Debug, Clone)]
pub struct ConvBnParams {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Running statistics for eval-mode batch norm; updated by the trainer,
    /// never by the optimizer.
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

pub struct ConvBnVars {
    pub w: Var,
    pub b: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl ConvBnParams {
    fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        // He initialization for the ReLU chain.
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let mut w = Tensor::zeros(&[c_out, c_in, 3, 3]);
        rng.fill_normal(w.data_mut(), 0.0, std);
        ConvBnParams {
            w,
            b: Tensor::zeros(&[c_out]),
            gamma: Tensor::full(&[c_out], 1.0),
            beta: Tensor::zeros(&[c_out]),
            running_mean: Tensor::zeros(&[c_out]),
            running_var: Tensor::full(&[c_out], 1.0),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.conv.w"), &self.w);
        f(format!("{prefix}.conv.b"), &self.b);
        f(format!("{prefix}.bn.gamma"), &self.gamma);
        f(format!("{prefix}.bn.beta"), &self.beta);
        f(format!("{prefix}.bn.running_mean"), &self.running_mean);
        f(format!("{prefix}.bn.running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.conv.w"), &mut self.w);
        f(format!("{prefix}.conv.b"), &mut self.b);
        f(format!("{prefix}.bn.gamma"), &mut self.gamma);
        f(format!("{prefix}.bn.beta"), &mut self.beta);
        f(format!("{prefix}.bn.running_mean"), &mut self.running_mean);
        f(format!("{prefix}.bn.running_var"), &mut self.running_var);
    }

    fn bind(&self, tape: &mut Tape, reg: &mut Registry, prefix: &str) -> ConvBnVars {
        ConvBnVars {
            w: reg.bind(tape, format!("{prefix}.conv.w"), &self.w),
            b: reg.bind(tape, format!("{prefix}.conv.b"), &self.b),
            gamma: reg.bind(tape, format!("{prefix}.bn.gamma"), &self.gamma),
            beta: reg.bind(tape, format!("{prefix}.bn.beta"), &self.beta),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MseParams {
    pub block1: Vec<ConvBnParams>,
    pub tail: Vec<ConvBnParams>,
}

pub struct MseVars {
    pub block1: Vec<ConvBnVars>,
    pub tail: Vec<ConvBnVars>,
}

impl MseParams {
    pub fn init(cfg: &MseConfig, rng: &mut Rng) -> Self {
        let c = cfg.channels;
        let block1 = vec![
            ConvBnParams::init(cfg.in_channels, c, rng),
            ConvBnParams::init(c, c, rng),
            ConvBnParams::init(c, c, rng),
        ];
        let tail = (1..cfg.num_scales)
            .map(|_| ConvBnParams::init(c, c, rng))
            .collect();
        MseParams { block1, tail }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, cb) in self.block1.iter().enumerate() {
            cb.visit(&format!("{prefix}.block1.{i}"), f);
        }
        for (i, cb) in self.tail.iter().enumerate() {
            cb.visit(&format!("{prefix}.block{}", i + 2), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, cb) in self.block1.iter_mut().enumerate() {
            cb.visit_mut(&format!("{prefix}.block1.{i}"), f);
        }
        for (i, cb) in self.tail.iter_mut().enumerate() {
            cb.visit_mut(&format!("{prefix}.block{}", i + 2), f);
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Registry, prefix: &str) -> MseVars {
        MseVars {
            block1: self
                .block1
                .iter()
                .enumerate()
                .map(|(i, cb)| cb.bind(tape, reg, &format!("{prefix}.block1.{i}")))
                .collect(),
            tail: self
                .tail
                .iter()
                .enumerate()
                .map(|(i, cb)| cb.bind(tape, reg, &format!("{prefix}.block{}", i + 2)))
                .collect(),
        }
    }

    /// Batch-norm layers in forward order, for running-stat updates.
    pub fn bn_layers_mut(&mut self) -> Vec<&mut ConvBnParams> {
        self.block1.iter_mut().chain(self.tail.iter_mut()).collect()
    }
}

pub const BN_EPS: f64 = 1e-5;

/// One pyramid level living on the tape in `[H*W, C]` row layout.
pub struct PyramidLevel {
    pub rows: Var,
    pub h: usize,
    pub w: usize,
}

/// Per-sample feature pyramid: the levels plus their flattened concatenation.
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
    /// `[sum(H_i*W_i), C]`, level contents in order.
    pub flat: Var,
    /// Start row of each level within `flat`.
    pub offsets: Vec<usize>,
}

/// Batched pyramid forward over `[B, C_in, H, W]`. In training mode batch
/// norm uses batch statistics and returns them (one entry per norm layer, in
/// forward order) so the caller can update running averages.
pub fn forward(
    tape: &mut Tape,
    vars: &MseVars,
    params: &MseParams,
    images: Var,
    cfg: &MseConfig,
    train: bool,
) -> Result<(Vec<Var>, Vec<BatchStats>), ModelError> {
    cfg.validate()?;
    let mut stats = Vec::new();
    let mut x = images;
    for (i, cb) in vars.block1.iter().enumerate() {
        let conv = tape.conv2d(x, cb.w, cb.b, cfg.block1_strides[i], 1)?;
        let normed = bn(tape, conv, cb, &params.block1[i], train, &mut stats)?;
        x = tape.relu(normed);
    }
    x = tape.max_pool2d(x, 2, 2)?;
    let mut levels = vec![x];
    for (i, cb) in vars.tail.iter().enumerate() {
        let conv = tape.conv2d(x, cb.w, cb.b, 2, 1)?;
        let normed = bn(tape, conv, cb, &params.tail[i], train, &mut stats)?;
        x = tape.relu(normed);
        levels.push(x);
    }
    Ok((levels, stats))
}

fn bn(
    tape: &mut Tape,
    x: Var,
    vars: &ConvBnVars,
    params: &ConvBnParams,
    train: bool,
    stats: &mut Vec<BatchStats>,
) -> Result<Var, NumericsError> {
    if train {
        let (y, s) = tape.batch_norm_train(x, vars.gamma, vars.beta, BN_EPS)?;
        stats.push(s);
        Ok(y)
    } else {
        tape.batch_norm_eval(
            x,
            vars.gamma,
            vars.beta,
            params.running_mean.data(),
            params.running_var.data(),
            BN_EPS,
        )
    }
}

/// Slice one sample out of the batched level tensors and flatten it into a
/// per-sample pyramid.
pub fn pyramid_for_sample(
    tape: &mut Tape,
    batched_levels: &[Var],
    sample: usize,
) -> Result<FeaturePyramid, ModelError> {
    let mut levels = Vec::with_capacity(batched_levels.len());
    for &lv in batched_levels {
        let shape = tape.value(lv).shape().to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let one = tape.slice_axis0(lv, sample, 1)?;
        let chw = tape.reshape(one, vec![c, h, w])?;
        let rows = tape.chw_to_rows(chw)?;
        levels.push(PyramidLevel { rows, h, w });
    }
    let (flat, offsets) = flatten_concat(tape, &levels)?;
    Ok(FeaturePyramid {
        levels,
        flat,
        offsets,
    })
}

/// Concatenate per-level `[H_i*W_i, C]` rows into the combined `[sum, C]`
/// feature matrix, recording each level's start offset.
pub fn flatten_concat(
    tape: &mut Tape,
    levels: &[PyramidLevel],
) -> Result<(Var, Vec<usize>), ModelError> {
    if levels.is_empty() {
        return Err(ModelError::Config("empty pyramid".into()));
    }
    let c = tape.value(levels[0].rows).shape()[1];
    let mut offsets = Vec::with_capacity(levels.len());
    let mut acc = 0;
    for l in levels {
        let s = tape.value(l.rows).shape();
        if s[1] != c {
            return Err(ModelError::Numerics(NumericsError::DimensionMismatch {
                op: "flatten_concat",
                lhs: vec![c],
                rhs: s.to_vec(),
            }));
        }
        offsets.push(acc);
        acc += s[0];
    }
    let vars: Vec<Var> = levels.iter().map(|l| l.rows).collect();
    let flat = tape.concat_axis0(&vars)?;
    Ok((flat, offsets))
}
