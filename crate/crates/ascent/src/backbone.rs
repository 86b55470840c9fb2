//! Small ViT backbone: patchify, linear projection with learned positional
//! embeddings and a CLS token, then a stack of pre-norm transformer blocks.

use crate::numerics::{NumericsError, Rng, Tape, Tensor, Var};
use crate::ModelError;

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    /// Square image extent in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Embedding width.
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Whether backbone weights receive gradient updates during training.
    pub finetune: bool,
}

impl BackboneConfig {
    /// Desk-scale default: 32px grayscale images, 4px patches, width 64.
    pub fn desk() -> Self {
        BackboneConfig {
            image_size: 32,
            channels: 1,
            patch_size: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            finetune: true,
        }
    }

    /// Published large-scale settings (224px, 16px patches, width 1024).
    /// Kept for documentation parity; far too big for the test suite.
    pub fn paper() -> Self {
        BackboneConfig {
            image_size: 224,
            channels: 3,
            patch_size: 16,
            dim: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            finetune: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// N: number of patch tokens.
    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// N + 1 with the CLS token.
    pub fn token_count(&self) -> usize {
        self.patch_count() + 1
    }

    /// Flattened patch length fed to the projection.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Split a `[C, H, W]` image into non-overlapping patches, row-major in patch
/// order, each patch flattened channel-major: `[N, C*p*p]`.
pub fn patchify(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor, ModelError> {
    let s = image.shape();
    if s != [cfg.channels, cfg.image_size, cfg.image_size] {
        return Err(ModelError::Config(format!(
            "image shape {s:?} does not match config {}x{}x{}",
            cfg.channels, cfg.image_size, cfg.image_size
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    let (c, hw) = (cfg.channels, cfg.image_size);
    let src = image.data();
    let mut data = Vec::with_capacity(cfg.patch_count() * cfg.patch_dim());
    for pr in 0..side {
        for pc in 0..side {
            for ch in 0..c {
                for y in 0..p {
                    let row = (pr * p + y) * hw + pc * p;
                    data.extend_from_slice(&src[ch * hw * hw + row..ch * hw * hw + row + p]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.patch_count(), cfg.patch_dim()], data)?)
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Registry, prefix: &str) -> LayerNormVars {
        LayerNormVars {
            gain: reg.bind(tape, format!("{prefix}.gain"), &self.gain),
            bias: reg.bind(tape, format!("{prefix}.bias"), &self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(tape: &mut Tape, x: Var, ln: &LayerNormVars) -> Result<Var, NumericsError> {
    tape.layer_norm(x, ln.gain, ln.bias, LAYER_NORM_EPS)
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2: LayerNormParams,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

pub struct BlockVars {
    pub ln1: LayerNormVars,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2: LayerNormVars,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

const INIT_STD: f64 = 0.02;

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 0.0, std);
    t
}

impl BlockParams {
    fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let m = cfg.mlp_dim();
        BlockParams {
            ln1: LayerNormParams::init(d),
            wq: normal_tensor(&[d, d], INIT_STD, rng),
            bq: Tensor::zeros(&[d]),
            wk: normal_tensor(&[d, d], INIT_STD, rng),
            bk: Tensor::zeros(&[d]),
            wv: normal_tensor(&[d, d], INIT_STD, rng),
            bv: Tensor::zeros(&[d]),
            wo: normal_tensor(&[d, d], INIT_STD, rng),
            bo: Tensor::zeros(&[d]),
            ln2: LayerNormParams::init(d),
            mlp_w1: normal_tensor(&[d, m], INIT_STD, rng),
            mlp_b1: Tensor::zeros(&[m]),
            mlp_w2: normal_tensor(&[m, d], INIT_STD, rng),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        for (name, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            f(format!("{prefix}.attn.{name}"), t);
        }
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        for (name, t) in [
            ("w1", &self.mlp_w1),
            ("b1", &self.mlp_b1),
            ("w2", &self.mlp_w2),
            ("b2", &self.mlp_b2),
        ] {
            f(format!("{prefix}.mlp.{name}"), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        for (name, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            f(format!("{prefix}.attn.{name}"), t);
        }
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        for (name, t) in [
            ("w1", &mut self.mlp_w1),
            ("b1", &mut self.mlp_b1),
            ("w2", &mut self.mlp_w2),
            ("b2", &mut self.mlp_b2),
        ] {
            f(format!("{prefix}.mlp.{name}"), t);
        }
    }

    fn bind(&self, tape: &mut Tape, reg: &mut Registry, prefix: &str) -> BlockVars {
        BlockVars {
            ln1: self.ln1.bind(tape, reg, &format!("{prefix}.ln1")),
            wq: reg.bind(tape, format!("{prefix}.attn.wq"), &self.wq),
            bq: reg.bind(tape, format!("{prefix}.attn.bq"), &self.bq),
            wk: reg.bind(tape, format!("{prefix}.attn.wk"), &self.wk),
            bk: reg.bind(tape, format!("{prefix}.attn.bk"), &self.bk),
            wv: reg.bind(tape, format!("{prefix}.attn.wv"), &self.wv),
            bv: reg.bind(tape, format!("{prefix}.attn.bv"), &self.bv),
            wo: reg.bind(tape, format!("{prefix}.attn.wo"), &self.wo),
            bo: reg.bind(tape, format!("{prefix}.attn.bo"), &self.bo),
            ln2: self.ln2.bind(tape, reg, &format!("{prefix}.ln2")),
            mlp_w1: reg.bind(tape, format!("{prefix}.mlp.w1"), &self.mlp_w1),
            mlp_b1: reg.bind(tape, format!("{prefix}.mlp.b1"), &self.mlp_b1),
            mlp_w2: reg.bind(tape, format!("{prefix}.mlp.w2"), &self.mlp_w2),
            mlp_b2: reg.bind(tape, format!("{prefix}.mlp.b2"), &self.mlp_b2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
}

pub struct BackboneVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
}

impl BackboneParams {
    pub fn init(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        BackboneParams {
            patch_w: normal_tensor(&[cfg.patch_dim(), cfg.dim], INIT_STD, rng),
            patch_b: Tensor::zeros(&[cfg.dim]),
            cls: normal_tensor(&[1, cfg.dim], INIT_STD, rng),
            pos: normal_tensor(&[cfg.token_count(), cfg.dim], INIT_STD, rng),
            blocks: (0..cfg.depth).map(|_| BlockParams::init(cfg, rng)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.patch.w"), &self.patch_w);
        f(format!("{prefix}.patch.b"), &self.patch_b);
        f(format!("{prefix}.cls"), &self.cls);
        f(format!("{prefix}.pos"), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.block{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.patch.w"), &mut self.patch_w);
        f(format!("{prefix}.patch.b"), &mut self.patch_b);
        f(format!("{prefix}.cls"), &mut self.cls);
        f(format!("{prefix}.pos"), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.block{i}"), f);
        }
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut Registry, prefix: &str) -> BackboneVars {
        BackboneVars {
            patch_w: reg.bind(tape, format!("{prefix}.patch.w"), &self.patch_w),
            patch_b: reg.bind(tape, format!("{prefix}.patch.b"), &self.patch_b),
            cls: reg.bind(tape, format!("{prefix}.cls"), &self.cls),
            pos: reg.bind(tape, format!("{prefix}.pos"), &self.pos),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(tape, reg, &format!("{prefix}.block{i}")))
                .collect(),
        }
    }
}

/// Name -> Var registry built during binding, used to read gradients back out
/// by parameter name after `backward`.
#[derive(Default)]
pub struct Registry {
    entries: Vec<(String, Var)>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Var {
        let v = tape.param(t);
        self.entries.push((name, v));
        v
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

/// Single-head scaled dot-product attention; the score scale is 1/sqrt of the
/// query width. Returns (output, attention) with the attention rows softmaxed
/// over the key axis.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var), NumericsError> {
    let dk = *tape.value(q).shape().last().unwrap();
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = tape.softmax_last(scaled)?;
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

/// Patch projection, CLS prepend, positional embedding.
pub fn embed(
    tape: &mut Tape,
    vars: &BackboneVars,
    patches: &Tensor,
) -> Result<Var, NumericsError> {
    let p = tape.constant(patches.clone());
    let proj = tape.matmul(p, vars.patch_w)?;
    let proj = tape.add_row_vec(proj, vars.patch_b)?;
    let tokens = tape.concat_axis0(&[vars.cls, proj])?;
    tape.add(tokens, vars.pos)
}

pub struct BackboneOut {
    /// `[(N+1), dim]` token sequence, CLS at row 0.
    pub tokens: Var,
    /// Per block, per head attention matrices (rows softmaxed over keys).
    pub attentions: Vec<Var>,
}

/// Full backbone forward for one image's pre-computed patches.
pub fn forward(
    tape: &mut Tape,
    vars: &BackboneVars,
    patches: &Tensor,
    cfg: &BackboneConfig,
) -> Result<BackboneOut, NumericsError> {
    let mut x = embed(tape, vars, patches)?;
    let mut attentions = Vec::with_capacity(cfg.depth * cfg.heads);
    let dh = cfg.head_dim();
    for block in &vars.blocks {
        // pre-norm attention with residual
        let h = layer_norm(tape, x, &block.ln1)?;
        let q = tape.matmul(h, block.wq)?;
        let q = tape.add_row_vec(q, block.bq)?;
        let k = tape.matmul(h, block.wk)?;
        let k = tape.add_row_vec(k, block.bk)?;
        let v = tape.matmul(h, block.wv)?;
        let v = tape.add_row_vec(v, block.bv)?;
        let mut attn_out: Option<Var> = None;
        for head in 0..cfg.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let (ctx, attn) = attention(tape, qh, kh, vh)?;
            attentions.push(attn);
            let wo_rows = tape.slice_axis0(block.wo, head * dh, dh)?;
            let contrib = tape.matmul(ctx, wo_rows)?;
            attn_out = Some(match attn_out {
                None => contrib,
                Some(acc) => tape.add(acc, contrib)?,
            });
        }
        let attn_out = tape.add_row_vec(attn_out.expect("at least one head"), block.bo)?;
        x = tape.add(x, attn_out)?;
        // pre-norm MLP with residual
        let h2 = layer_norm(tape, x, &block.ln2)?;
        let a = tape.matmul(h2, block.mlp_w1)?;
        let a = tape.add_row_vec(a, block.mlp_b1)?;
        let a = tape.gelu(a);
        let b = tape.matmul(a, block.mlp_w2)?;
        let b = tape.add_row_vec(b, block.mlp_b2)?;
        x = tape.add(x, b)?;
    }
    Ok(BackboneOut {
        tokens: x,
        attentions,
    })
}
