//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations execute eagerly as they are recorded; each record keeps its
//! input ids, output id, and whatever forward by-products the backward rule
//! needs (softmax outputs, pool argmaxes, im2col buffers). [`Tape::backward`]
//! replays the records in reverse, accumulating gradients additively, so a
//! value used twice receives the sum of both contributions.
//!
//! Everything is `f64` and single-threaded per tape; given identical inputs
//! the forward values, the record order, and therefore the gradients are
//! bitwise reproducible.

use super::conv::{
    conv2d_backward, conv2d_forward, max_pool2d_backward, max_pool2d_forward, ConvGeom,
};
use super::gemm::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics produced by a training-mode batch norm; the caller
/// folds them into running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    /// `[R, C] + [C]`, the bias pattern.
    AddRowVec { a: usize, v: usize },
    /// `[R, C] * [C]` broadcast along rows (per-channel gate).
    MulColVec { a: usize, v: usize },
    /// `[R, C]` scaled per row by `[R]`.
    ScaleRows { a: usize, s: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// a[m,k] x b[n,k]T
    MatmulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Reshape { a: usize },
    SliceAxis0 { a: usize, start: usize, chunk: usize },
    ConcatAxis0 { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize, cols: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm {
        a: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu { a: usize },
    Gelu { a: usize },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        batch: usize,
        /// im2col buffers per batch sample; empty when no gradient is needed.
        cols: Vec<Vec<f64>>,
    },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        plane: usize,
        batch: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        channels: usize,
        plane: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Bilinear gather from a `[H*W, C]` map at fractional pixel coords `[P, 2]`.
    GridSample { map: usize, coords: usize, h: usize, w: usize },
    SumGroupRows { a: usize, group: usize, cols: usize },
    MeanAxis0 { a: usize, rows: usize, cols: usize },
    SumAll { a: usize },
    Sqrt { a: usize },
    CrossEntropyLogits { logits: usize, softmax: Vec<f64>, label: usize },
    BceWithTargets { p: usize, targets: Vec<f64> },
    /// `[C, H, W]` -> `[H*W, C]` permutation.
    ChwToRows { a: usize, c: usize, plane: usize },
}

struct Record {
    out: usize,
    op: Op,
}

/// The autodiff arena: node values plus the operation log.
pub struct Tape {
    values: Vec<Tensor>,
    needs: Vec<bool>,
    records: Vec<Record>,
    grads: Vec<Option<Vec<f64>>>,
}

const BCE_EPS: f64 = 1e-12;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            needs: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the last `backward` target with respect to `v`, if one was
    /// tracked for `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Mount a tensor as a differentiable input (data is copied).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(
            Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("tensor is consistent"),
            true,
            Op::Leaf,
        )
    }

    /// Mount a tensor as a constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, NumericsError> {
        Ok(self.constant(Tensor::new(shape.to_vec(), data)?))
    }

    fn push(&mut self, value: Tensor, needs: bool, op: Op) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.needs.push(needs);
        self.records.push(Record { out: id, op });
        self.grads.push(None);
        Var(id)
    }

    fn needs_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs[i])
    }

    // ---- elementwise and broadcast ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same_shape("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same_shape("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_same_shape(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(NumericsError::DimensionMismatch {
                op: opname,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs_any(&[a.0, b.0]);
        Ok(self.push(out, needs, mk(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = &self.values[a.0];
        let data: Vec<f64> = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs[a.0];
        self.push(out, needs, Op::Scale { a: a.0, factor })
    }

    fn rows_cols(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = self.values[v.0].shape();
        if s.len() < 2 {
            return Err(NumericsError::Invalid {
                op,
                msg: format!("expected rank >= 2, got shape {s:?}"),
            });
        }
        let cols = *s.last().unwrap();
        Ok((self.values[v.0].numel() / cols.max(1), cols))
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a, "add_row_vec")?;
        if self.values[v.0].shape() != [cols] {
            return Err(NumericsError::DimensionMismatch {
                op: "add_row_vec",
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[v.0].shape().to_vec(),
            });
        }
        let mut data = self.values[a.0].data().to_vec();
        let vd = self.values[v.0].data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vd[c];
            }
        }
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let needs = self.needs_any(&[a.0, v.0]);
        Ok(self.push(out, needs, Op::AddRowVec { a: a.0, v: v.0 }))
    }

    pub fn mul_col_vec(&mut self, a: Var, v: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a, "mul_col_vec")?;
        if self.values[v.0].shape() != [cols] {
            return Err(NumericsError::DimensionMismatch {
                op: "mul_col_vec",
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[v.0].shape().to_vec(),
            });
        }
        let mut data = self.values[a.0].data().to_vec();
        let vd = self.values[v.0].data();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] *= vd[c];
            }
        }
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let needs = self.needs_any(&[a.0, v.0]);
        Ok(self.push(out, needs, Op::MulColVec { a: a.0, v: v.0 }))
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a, "scale_rows")?;
        if self.values[s.0].numel() != rows {
            return Err(NumericsError::DimensionMismatch {
                op: "scale_rows",
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[s.0].shape().to_vec(),
            });
        }
        let mut data = self.values[a.0].data().to_vec();
        let sd = self.values[s.0].data();
        for r in 0..rows {
            let f = sd[r];
            for c in 0..cols {
                data[r * cols + c] *= f;
            }
        }
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let needs = self.needs_any(&[a.0, s.0]);
        Ok(self.push(out, needs, Op::ScaleRows { a: a.0, s: s.0 }))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm_nn(m, k, n, self.values[a.0].data(), self.values[b.0].data(), &mut data);
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs_any(&[a.0, b.0]);
        Ok(self.push(out, needs, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    /// a[m,k] x b[n,k]T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumericsError::DimensionMismatch {
                op: "matmul_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![0.0; m * n];
        gemm_nt(m, k, n, self.values[a.0].data(), self.values[b.0].data(), &mut data);
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs_any(&[a.0, b.0]);
        Ok(self.push(out, needs, Op::MatmulNT { a: a.0, b: b.0, m, k, n }))
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.values[a.0].numel() {
            return Err(NumericsError::ShapeData {
                shape,
                len: self.values[a.0].numel(),
            });
        }
        let out = Tensor::new(shape, self.values[a.0].data().to_vec())?;
        let needs = self.needs[a.0];
        Ok(self.push(out, needs, Op::Reshape { a: a.0 }))
    }

    /// Contiguous range `[start, start+len)` along the leading axis.
    pub fn slice_axis0(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let s = self.values[a.0].shape();
        if s.is_empty() || start + len > s[0] {
            return Err(NumericsError::Invalid {
                op: "slice_axis0",
                msg: format!("range {start}..{} out of axis 0 of {s:?}", start + len),
            });
        }
        let chunk: usize = s[1..].iter().product();
        let mut shape = s.to_vec();
        shape[0] = len;
        let data = self.values[a.0].data()[start * chunk..(start + len) * chunk].to_vec();
        let out = Tensor::new(shape, data)?;
        let needs = self.needs[a.0];
        Ok(self.push(out, needs, Op::SliceAxis0 { a: a.0, start, chunk }))
    }

    pub fn concat_axis0(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid {
                op: "concat_axis0",
                msg: "no parts".into(),
            });
        }
        let trailing: Vec<usize> = self.values[parts[0].0].shape()[1..].to_vec();
        let mut rows = 0;
        for p in parts {
            let s = self.values[p.0].shape();
            if s[1..] != trailing[..] {
                return Err(NumericsError::DimensionMismatch {
                    op: "concat_axis0",
                    lhs: self.values[parts[0].0].shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(self.values[p.0].data());
        }
        let out = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs_any(&ids);
        Ok(self.push(out, needs, Op::ConcatAxis0 { parts: ids }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a, "slice_cols")?;
        if start + len > cols {
            return Err(NumericsError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of {cols}", start + len),
            });
        }
        let src = self.values[a.0].data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.values[a.0].shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        let needs = self.needs[a.0];
        Ok(self.push(out, needs, Op::SliceCols { a: a.0, start, len, cols }))
    }

    /// `[C, H, W]` -> `[H*W, C]`: spatial positions become rows.
    pub fn chw_to_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.values[a.0].shape();
        if s.len() != 3 {
            return Err(NumericsError::Invalid {
                op: "chw_to_rows",
                msg: format!("expected [C,H,W], got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let src = self.values[a.0].data();
        let mut data = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                data[p * c + ch] = src[ch * plane + p];
            }
        }
        let out = Tensor::new(vec![plane, c], data)?;
        let needs = self.needs[a.0];
        Ok(self.push(out, needs, Op::ChwToRows { a: a.0, c, plane }))
    }

    // ---- nonlinearities and normalization ----

    /// Exp-normalization along `axis` with max subtraction; slices along the
    /// axis sum to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let s = self.values[a.0].shape().to_vec();
        if axis >= s.len() {
            return Err(NumericsError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of rank {}", s.len()),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = self.values[a.0].data().to_vec();
        softmax_slices(&mut data, outer, len, inner);
        let out = Tensor::new(s, data)?;
        let needs = self.needs[a.0];
        Ok(self.push(out, needs, Op::Softmax { a: a.0, outer, len, inner }))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        let rank = self.values[a.0].shape().len();
        self.softmax(a, rank - 1)
    }

    /// Per-row zero-mean unit-variance normalization over the last axis
    /// (variance denominator carries `eps`), then the affine `gain, bias`.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a, "layer_norm")?;
        for v in [gain, bias] {
            if self.values[v.0].shape() != [cols] {
                return Err(NumericsError::DimensionMismatch {
                    op: "layer_norm",
                    lhs: self.values[a.0].shape().to_vec(),
                    rhs: self.values[v.0].shape().to_vec(),
                });
            }
        }
        let src = self.values[a.0].data();
        let g = self.values[gain.0].data();
        let b = self.values[bias.0].data();
        let mut data = vec![0.0; src.len()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            let dst = &mut data[r * cols..(r + 1) * cols];
            for c in 0..cols {
                dst[c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        let out = Tensor::new(self.values[a.0].shape().to_vec(), data)?;
        let needs = self.needs_any(&[a.0, gain.0, bias.0]);
        Ok(self.push(
            out,
            needs,
            Op::LayerNorm {
                a: a.0,
                gain: gain.0,
                bias: bias.0,
                cols,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let data: Vec<f64> = ta.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs[a.0];
        self.push(out, needs, Op::Relu { a: a.0 })
    }

    /// tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let data: Vec<f64> = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs[a.0];
        self.push(out, needs, Op::Gelu { a: a.0 })
    }

    // ---- convolutional ----

    /// Cross-correlation over `[B, C, H, W]` (rank-3 input is treated as a
    /// single sample). `w` is `[O, C, kh, kw]`, `b` is `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let sx = self.values[x.0].shape().to_vec();
        let sw = self.values[w.0].shape().to_vec();
        if sw.len() != 4 {
            return Err(NumericsError::Invalid {
                op: "conv2d",
                msg: format!("kernels must be [O,C,kh,kw], got {sw:?}"),
            });
        }
        let (batch, c_in, h, wd) = match sx.len() {
            4 => (sx[0], sx[1], sx[2], sx[3]),
            3 => (1, sx[0], sx[1], sx[2]),
            _ => {
                return Err(NumericsError::Invalid {
                    op: "conv2d",
                    msg: format!("input must be [B,C,H,W] or [C,H,W], got {sx:?}"),
                })
            }
        };
        if sw[1] != c_in {
            return Err(NumericsError::DimensionMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = ConvGeom::new(c_in, h, wd, sw[0], sw[2], sw[3], stride, pad).ok_or(
            NumericsError::DimensionMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            },
        )?;
        if self.values[b.0].numel() != geom.c_out {
            return Err(NumericsError::DimensionMismatch {
                op: "conv2d",
                lhs: vec![geom.c_out],
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        let needs = self.needs_any(&[x.0, w.0, b.0]);
        let in_plane = c_in * h * wd;
        let out_plane = geom.c_out * geom.oh * geom.ow;
        let mut data = vec![0.0; batch * out_plane];
        let mut cols = Vec::new();
        let mut scratch = vec![0.0; geom.col_rows() * geom.positions()];
        for bi in 0..batch {
            let xb = &self.values[x.0].data()[bi * in_plane..(bi + 1) * in_plane];
            conv2d_forward(
                &geom,
                xb,
                self.values[w.0].data(),
                self.values[b.0].data(),
                &mut scratch,
                &mut data[bi * out_plane..(bi + 1) * out_plane],
            );
            if needs {
                cols.push(scratch.clone());
            }
        }
        let shape = if sx.len() == 4 {
            vec![batch, geom.c_out, geom.oh, geom.ow]
        } else {
            vec![geom.c_out, geom.oh, geom.ow]
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            needs,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                batch,
                cols,
            },
        ))
    }

    /// Windowed spatial max over `[B, C, H, W]` / `[C, H, W]`; ties take the
    /// first occurrence in row-major order.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        window: usize,
        stride: usize,
    ) -> Result<Var, NumericsError> {
        let sx = self.values[x.0].shape().to_vec();
        let (batch, c, h, w) = match sx.len() {
            4 => (sx[0], sx[1], sx[2], sx[3]),
            3 => (1, sx[0], sx[1], sx[2]),
            _ => {
                return Err(NumericsError::Invalid {
                    op: "max_pool2d",
                    msg: format!("input must be [B,C,H,W] or [C,H,W], got {sx:?}"),
                })
            }
        };
        if window == 0 || window > h || window > w || stride == 0 {
            return Err(NumericsError::Invalid {
                op: "max_pool2d",
                msg: format!("window {window} stride {stride} on {h}x{w}"),
            });
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let in_plane = c * h * w;
        let out_plane = c * oh * ow;
        let mut data = vec![0.0; batch * out_plane];
        let mut argmax = vec![0usize; batch * out_plane];
        for bi in 0..batch {
            let xb = &self.values[x.0].data()[bi * in_plane..(bi + 1) * in_plane];
            let out_b = &mut data[bi * out_plane..(bi + 1) * out_plane];
            let arg_b = &mut argmax[bi * out_plane..(bi + 1) * out_plane];
            max_pool2d_forward(c, h, w, window, stride, xb, out_b, arg_b);
            for v in arg_b {
                *v += bi * in_plane;
            }
        }
        let shape = if sx.len() == 4 {
            vec![batch, c, oh, ow]
        } else {
            vec![c, oh, ow]
        };
        let out = Tensor::new(shape, data)?;
        let needs = self.needs[x.0];
        Ok(self.push(out, needs, Op::MaxPool2d { x: x.0, argmax }))
    }

    /// Training-mode batch norm over `[B, C, H, W]`: per-channel statistics
    /// across batch and spatial axes. Returns the batch statistics so the
    /// caller can update running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), NumericsError> {
        let (batch, channels, plane) = self.bn_geometry(x, gamma, beta)?;
        let src = self.values[x.0].data();
        let n = (batch * plane) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for bi in 0..batch {
            for c in 0..channels {
                mean[c] += src[(bi * channels + c) * plane..][..plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..batch {
            for c in 0..channels {
                let m = mean[c];
                var[c] += src[(bi * channels + c) * plane..][..plane]
                    .iter()
                    .map(|x| (x - m) * (x - m))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let off = (bi * channels + c) * plane;
                let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
                for p in 0..plane {
                    data[off + p] = (src[off + p] - m) * is * gc + bc;
                }
            }
        }
        let out = Tensor::new(self.values[x.0].shape().to_vec(), data)?;
        let needs = self.needs_any(&[x.0, gamma.0, beta.0]);
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let v = self.push(
            out,
            needs,
            Op::BatchNormTrain {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                channels,
                plane,
                batch,
                mean,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Inference-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (batch, channels, plane) = self.bn_geometry(x, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(NumericsError::Invalid {
                op: "batch_norm_eval",
                msg: "running statistics length mismatch".into(),
            });
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let src = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut data = vec![0.0; src.len()];
        for bi in 0..batch {
            for c in 0..channels {
                let off = (bi * channels + c) * plane;
                let (m, is, gc, bc) = (running_mean[c], inv_std[c], g[c], b[c]);
                for p in 0..plane {
                    data[off + p] = (src[off + p] - m) * is * gc + bc;
                }
            }
        }
        let out = Tensor::new(self.values[x.0].shape().to_vec(), data)?;
        let needs = self.needs_any(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            needs,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                channels,
                plane,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    fn bn_geometry(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize), NumericsError> {
        let s = self.values[x.0].shape();
        let (batch, channels, plane) = match s.len() {
            4 => (s[0], s[1], s[2] * s[3]),
            3 => (1, s[0], s[1] * s[2]),
            _ => {
                return Err(NumericsError::Invalid {
                    op: "batch_norm",
                    msg: format!("input must be [B,C,H,W] or [C,H,W], got {s:?}"),
                })
            }
        };
        for v in [gamma, beta] {
            if self.values[v.0].numel() != channels {
                return Err(NumericsError::DimensionMismatch {
                    op: "batch_norm",
                    lhs: s.to_vec(),
                    rhs: self.values[v.0].shape().to_vec(),
                });
            }
        }
        Ok((batch, channels, plane))
    }

    // ---- sampling ----

    /// Bilinear interpolation of `map` (`[H*W, C]`, rows in row-major spatial
    /// order) at fractional pixel coordinates `coords` (`[P, 2]` as (x, y)).
    /// Coordinates outside `[0, W-1] x [0, H-1]` clamp to the border.
    /// Differentiable in both the map values and the coordinates.
    pub fn grid_sample(
        &mut self,
        map: Var,
        h: usize,
        w: usize,
        coords: Var,
    ) -> Result<Var, NumericsError> {
        let sm = self.values[map.0].shape().to_vec();
        let sc = self.values[coords.0].shape().to_vec();
        if sm.len() != 2 || sm[0] != h * w {
            return Err(NumericsError::Invalid {
                op: "grid_sample",
                msg: format!("map shape {sm:?} does not match {h}x{w}"),
            });
        }
        if sc.len() != 2 || sc[1] != 2 {
            return Err(NumericsError::Invalid {
                op: "grid_sample",
                msg: format!("coords must be [P,2], got {sc:?}"),
            });
        }
        let channels = sm[1];
        let points = sc[0];
        let md = self.values[map.0].data();
        let cd = self.values[coords.0].data();
        let mut data = vec![0.0; points * channels];
        for p in 0..points {
            let k = Corners::at(cd[2 * p], cd[2 * p + 1], h, w);
            let dst = &mut data[p * channels..(p + 1) * channels];
            for (idx, wgt) in k.taps() {
                let src = &md[idx * channels..(idx + 1) * channels];
                for c in 0..channels {
                    dst[c] += wgt * src[c];
                }
            }
        }
        let out = Tensor::new(vec![points, channels], data)?;
        let needs = self.needs_any(&[map.0, coords.0]);
        Ok(self.push(
            out,
            needs,
            Op::GridSample {
                map: map.0,
                coords: coords.0,
                h,
                w,
            },
        ))
    }

    // ---- reductions ----

    /// Sum consecutive groups of `group` rows: `[R, C]` -> `[R/group, C]`.
    pub fn sum_group_rows(&mut self, a: Var, group: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a, "sum_group_rows")?;
        if group == 0 || rows % group != 0 {
            return Err(NumericsError::Invalid {
                op: "sum_group_rows",
                msg: format!("group {group} does not divide {rows} rows"),
            });
        }
        let out_rows = rows / group;
        let src = self.values[a.0].data();
        let mut data = vec![0.0; out_rows * cols];
        for q in 0..out_rows {
            for j in 0..group {
                let row = &src[(q * group + j) * cols..][..cols];
                let dst = &mut data[q * cols..(q + 1) * cols];
                for c in 0..cols {
                    dst[c] += row[c];
                }
            }
        }
        let out = Tensor::new(vec![out_rows, cols], data)?;
        let needs = self.needs[a.0];
        Ok(self.push(out, needs, Op::SumGroupRows { a: a.0, group, cols }))
    }

    /// Column means: `[R, C]` -> `[C]`.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a, "mean_axis0")?;
        let src = self.values[a.0].data();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += src[r * cols + c];
            }
        }
        data.iter_mut().for_each(|v| *v /= rows as f64);
        let out = Tensor::new(vec![cols], data)?;
        let needs = self.needs[a.0];
        Ok(self.push(out, needs, Op::MeanAxis0 { a: a.0, rows, cols }))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.values[a.0].data().iter().sum();
        let needs = self.needs[a.0];
        self.push(Tensor::scalar(s), needs, Op::SumAll { a: a.0 })
    }

    /// Elementwise square root. The derivative at exactly zero is taken as 0
    /// (the minimal-norm subgradient), which keeps Frobenius-norm losses
    /// finite when the residual vanishes.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let ta = &self.values[a.0];
        let data: Vec<f64> = ta.data().iter().map(|x| x.sqrt()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs[a.0];
        self.push(out, needs, Op::Sqrt { a: a.0 })
    }

    // ---- losses ----

    /// Numerically stable softmax cross-entropy against a class index.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        label: usize,
    ) -> Result<Var, NumericsError> {
        let t = &self.values[logits.0];
        if t.shape().len() != 1 || label >= t.numel() {
            return Err(NumericsError::Invalid {
                op: "cross_entropy_logits",
                msg: format!("logits {:?}, label {label}", t.shape()),
            });
        }
        let x = t.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = z.ln() + max - x[label];
        let needs = self.needs[logits.0];
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::CrossEntropyLogits {
                logits: logits.0,
                softmax,
                label,
            },
        ))
    }

    /// Binary cross-entropy of probabilities against fixed (possibly
    /// fractional) targets, with logs clamped at 1e-12.
    pub fn bce_with_targets(&mut self, p: Var, targets: &[f64]) -> Result<Var, NumericsError> {
        let t = &self.values[p.0];
        if t.numel() != targets.len() {
            return Err(NumericsError::DimensionMismatch {
                op: "bce_with_targets",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut loss = 0.0;
        for (&pv, &tv) in t.data().iter().zip(targets) {
            loss -= tv * pv.max(BCE_EPS).ln() + (1.0 - tv) * (1.0 - pv).max(BCE_EPS).ln();
        }
        let needs = self.needs[p.0];
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::BceWithTargets {
                p: p.0,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar. Every gradient-tracked node reachable from
    /// `loss` has its gradient populated; repeated uses accumulate additively.
    /// Rejects a non-scalar target.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.values[loss.0].numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let Tape {
            values,
            needs,
            records,
            grads,
        } = self;
        for record in records[..=loss.0].iter().rev() {
            if !needs[record.out] {
                continue;
            }
            let Some(dy) = grads[record.out].take() else {
                continue;
            };
            backward_record(values, needs, record, dy, grads);
        }
        Ok(())
    }
}

fn take_grad(grads: &mut [Option<Vec<f64>>], values: &[Tensor], id: usize) -> Vec<f64> {
    match grads[id].take() {
        Some(g) => g,
        None => vec![0.0; values[id].numel()],
    }
}

fn backward_record(
    values: &[Tensor],
    needs: &[bool],
    record: &Record,
    dy: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
) {
    let out = record.out;
    let add_into = |grads: &mut [Option<Vec<f64>>], id: usize, f: &mut dyn FnMut(&mut [f64])| {
        if needs[id] {
            let mut g = take_grad(grads, values, id);
            f(&mut g);
            grads[id] = Some(g);
        }
    };
    match &record.op {
        Op::Leaf => {
            grads[out] = Some(dy);
        }
        Op::Add { a, b } => {
            add_into(grads, *a, &mut |g| {
                g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d)
            });
            add_into(grads, *b, &mut |g| {
                g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d)
            });
        }
        Op::Sub { a, b } => {
            add_into(grads, *a, &mut |g| {
                g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d)
            });
            add_into(grads, *b, &mut |g| {
                g.iter_mut().zip(&dy).for_each(|(g, d)| *g -= d)
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (values[*a].data(), values[*b].data());
            add_into(grads, *a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * bv[i];
                }
            });
            add_into(grads, *b, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * av[i];
                }
            });
        }
        Op::Scale { a, factor } => {
            let f = *factor;
            add_into(grads, *a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * f;
                }
            });
        }
        Op::AddRowVec { a, v } => {
            add_into(grads, *a, &mut |g| {
                g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d)
            });
            let cols = values[*v].numel();
            add_into(grads, *v, &mut |g| {
                for (i, d) in dy.iter().enumerate() {
                    g[i % cols] += d;
                }
            });
        }
        Op::MulColVec { a, v } => {
            let cols = values[*v].numel();
            let vd = values[*v].data();
            let av = values[*a].data();
            add_into(grads, *a, &mut |g| {
                for i in 0..g.len() {
                    g[i] += dy[i] * vd[i % cols];
                }
            });
            add_into(grads, *v, &mut |g| {
                for (i, d) in dy.iter().enumerate() {
                    g[i % cols] += d * av[i];
                }
            });
        }
        Op::ScaleRows { a, s } => {
            let rows = values[*s].numel();
            let cols = values[*a].numel() / rows;
            let sd = values[*s].data();
            let av = values[*a].data();
            add_into(grads, *a, &mut |g| {
                for r in 0..rows {
                    let f = sd[r];
                    for c in 0..cols {
                        g[r * cols + c] += dy[r * cols + c] * f;
                    }
                }
            });
            add_into(grads, *s, &mut |g| {
                for r in 0..rows {
                    g[r] += dot(&dy[r * cols..(r + 1) * cols], &av[r * cols..(r + 1) * cols]);
                }
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (values[*a].data(), values[*b].data());
            add_into(grads, *a, &mut |g| gemm_nt(m, n, k, &dy, bv, g));
            add_into(grads, *b, &mut |g| gemm_tn(k, m, n, av, &dy, g));
        }
        Op::MatmulNT { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (values[*a].data(), values[*b].data());
            add_into(grads, *a, &mut |g| gemm_nn(m, n, k, &dy, bv, g));
            add_into(grads, *b, &mut |g| gemm_tn(n, m, k, &dy, av, g));
        }
        Op::Reshape { a } => {
            add_into(grads, *a, &mut |g| {
                g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d)
            });
        }
        Op::SliceAxis0 { a, start, chunk } => {
            let off = start * chunk;
            add_into(grads, *a, &mut |g| {
                for (i, d) in dy.iter().enumerate() {
                    g[off + i] += d;
                }
            });
        }
        Op::ConcatAxis0 { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = values[p].numel();
                add_into(grads, p, &mut |g| {
                    g.iter_mut().zip(&dy[off..off + len]).for_each(|(g, d)| *g += d)
                });
                off += len;
            }
        }
        Op::SliceCols { a, start, len, cols } => {
            let (start, len, cols) = (*start, *len, *cols);
            let rows = values[*a].numel() / cols;
            add_into(grads, *a, &mut |g| {
                for r in 0..rows {
                    for c in 0..len {
                        g[r * cols + start + c] += dy[r * len + c];
                    }
                }
            });
        }
        Op::Softmax { a, outer, len, inner } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let y = values[out].data();
            add_into(grads, *a, &mut |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dsum = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dsum += dy[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = base + j * inner;
                            g[idx] += (dy[idx] - dsum) * y[idx];
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            a,
            gain,
            bias,
            cols,
            mean,
            inv_std,
        } => {
            let cols = *cols;
            let rows = values[*a].numel() / cols;
            let x = values[*a].data();
            let g = values[*gain].data();
            add_into(grads, *bias, &mut |gb| {
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += dy[r * cols + c];
                    }
                }
            });
            add_into(grads, *gain, &mut |gg| {
                for r in 0..rows {
                    for c in 0..cols {
                        let xhat = (x[r * cols + c] - mean[r]) * inv_std[r];
                        gg[c] += dy[r * cols + c] * xhat;
                    }
                }
            });
            add_into(grads, *a, &mut |ga| {
                let d = cols as f64;
                for r in 0..rows {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let xhat = (x[r * cols + c] - mean[r]) * inv_std[r];
                        let dxhat = dy[r * cols + c] * g[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for c in 0..cols {
                        let xhat = (x[r * cols + c] - mean[r]) * inv_std[r];
                        let dxhat = dy[r * cols + c] * g[c];
                        ga[r * cols + c] +=
                            inv_std[r] * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                    }
                }
            });
        }
        Op::Relu { a } => {
            let x = values[*a].data();
            add_into(grads, *a, &mut |g| {
                for (i, d) in dy.iter().enumerate() {
                    if x[i] > 0.0 {
                        g[i] += d;
                    }
                }
            });
        }
        Op::Gelu { a } => {
            let x = values[*a].data();
            add_into(grads, *a, &mut |g| {
                for (i, d) in dy.iter().enumerate() {
                    g[i] += d * gelu_grad(x[i]);
                }
            });
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            batch,
            cols,
        } => {
            let batch = *batch;
            let in_plane = geom.c_in * geom.h * geom.w;
            let out_plane = geom.c_out * geom.oh * geom.ow;
            let wv = values[*w].data();
            let mut gw_local = vec![0.0; values[*w].numel()];
            let mut gb_local = vec![0.0; geom.c_out];
            let mut gx_local = if needs[*x] {
                Some(vec![0.0; values[*x].numel()])
            } else {
                None
            };
            let mut dcol = vec![0.0; geom.col_rows() * geom.positions()];
            for bi in 0..batch {
                let dyb = &dy[bi * out_plane..(bi + 1) * out_plane];
                conv2d_backward(
                    geom,
                    dyb,
                    wv,
                    &cols[bi],
                    &mut gw_local,
                    &mut gb_local,
                    gx_local
                        .as_mut()
                        .map(|g| &mut g[bi * in_plane..(bi + 1) * in_plane]),
                    &mut dcol,
                );
            }
            add_into(grads, *w, &mut |g| {
                g.iter_mut().zip(&gw_local).for_each(|(g, d)| *g += d)
            });
            add_into(grads, *b, &mut |g| {
                g.iter_mut().zip(&gb_local).for_each(|(g, d)| *g += d)
            });
            if let Some(gx) = gx_local {
                add_into(grads, *x, &mut |g| {
                    g.iter_mut().zip(&gx).for_each(|(g, d)| *g += d)
                });
            }
        }
        Op::MaxPool2d { x, argmax } => {
            add_into(grads, *x, &mut |g| max_pool2d_backward(&dy, argmax, g));
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            channels,
            plane,
            batch,
            mean,
            inv_std,
        } => {
            let (channels, plane, batch) = (*channels, *plane, *batch);
            let xv = values[*x].data();
            let gv = values[*gamma].data();
            let n = (batch * plane) as f64;
            let mut sum_dy = vec![0.0; channels];
            let mut sum_dy_xhat = vec![0.0; channels];
            for bi in 0..batch {
                for c in 0..channels {
                    let off = (bi * channels + c) * plane;
                    let (m, is) = (mean[c], inv_std[c]);
                    for p in 0..plane {
                        let d = dy[off + p];
                        sum_dy[c] += d;
                        sum_dy_xhat[c] += d * (xv[off + p] - m) * is;
                    }
                }
            }
            add_into(grads, *beta, &mut |g| {
                for c in 0..channels {
                    g[c] += sum_dy[c];
                }
            });
            add_into(grads, *gamma, &mut |g| {
                for c in 0..channels {
                    g[c] += sum_dy_xhat[c];
                }
            });
            add_into(grads, *x, &mut |g| {
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * plane;
                        let (m, is, gc) = (mean[c], inv_std[c], gv[c]);
                        let k1 = sum_dy[c] / n;
                        let k2 = sum_dy_xhat[c] / n;
                        for p in 0..plane {
                            let xhat = (xv[off + p] - m) * is;
                            g[off + p] += gc * is * (dy[off + p] - k1 - xhat * k2);
                        }
                    }
                }
            });
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            channels,
            plane,
            mean,
            inv_std,
        } => {
            let (channels, plane) = (*channels, *plane);
            let batch = values[*x].numel() / (channels * plane);
            let xv = values[*x].data();
            let gv = values[*gamma].data();
            add_into(grads, *beta, &mut |g| {
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * plane;
                        g[c] += dy[off..off + plane].iter().sum::<f64>();
                    }
                }
            });
            add_into(grads, *gamma, &mut |g| {
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * plane;
                        for p in 0..plane {
                            g[c] += dy[off + p] * (xv[off + p] - mean[c]) * inv_std[c];
                        }
                    }
                }
            });
            add_into(grads, *x, &mut |g| {
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * plane;
                        let f = gv[c] * inv_std[c];
                        for p in 0..plane {
                            g[off + p] += dy[off + p] * f;
                        }
                    }
                }
            });
        }
        Op::GridSample { map, coords, h, w } => {
            let (h, w) = (*h, *w);
            let channels = values[*map].shape()[1];
            let points = values[*coords].shape()[0];
            let cd = values[*coords].data();
            let md = values[*map].data();
            add_into(grads, *map, &mut |g| {
                for p in 0..points {
                    let k = Corners::at(cd[2 * p], cd[2 * p + 1], h, w);
                    let dyp = &dy[p * channels..(p + 1) * channels];
                    for (idx, wgt) in k.taps() {
                        let dst = &mut g[idx * channels..(idx + 1) * channels];
                        for c in 0..channels {
                            dst[c] += wgt * dyp[c];
                        }
                    }
                }
            });
            add_into(grads, *coords, &mut |g| {
                for p in 0..points {
                    let k = Corners::at(cd[2 * p], cd[2 * p + 1], h, w);
                    let dyp = &dy[p * channels..(p + 1) * channels];
                    let (mut dx, mut dyc) = (0.0, 0.0);
                    for c in 0..channels {
                        let v00 = md[(k.y0 * w + k.x0) * channels + c];
                        let v01 = md[(k.y0 * w + k.x1) * channels + c];
                        let v10 = md[(k.y1 * w + k.x0) * channels + c];
                        let v11 = md[(k.y1 * w + k.x1) * channels + c];
                        dx += dyp[c] * ((1.0 - k.wy) * (v01 - v00) + k.wy * (v11 - v10));
                        dyc += dyp[c] * ((1.0 - k.wx) * (v10 - v00) + k.wx * (v11 - v01));
                    }
                    // Clamped coordinates have zero derivative outside the map.
                    if k.x_inside {
                        g[2 * p] += dx;
                    }
                    if k.y_inside {
                        g[2 * p + 1] += dyc;
                    }
                }
            });
        }
        Op::SumGroupRows { a, group, cols } => {
            let (group, cols) = (*group, *cols);
            let out_rows = dy.len() / cols;
            add_into(grads, *a, &mut |g| {
                for q in 0..out_rows {
                    for j in 0..group {
                        let dst = &mut g[(q * group + j) * cols..][..cols];
                        for c in 0..cols {
                            dst[c] += dy[q * cols + c];
                        }
                    }
                }
            });
        }
        Op::MeanAxis0 { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            let f = 1.0 / rows as f64;
            add_into(grads, *a, &mut |g| {
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] += dy[c] * f;
                    }
                }
            });
        }
        Op::SumAll { a } => {
            let d = dy[0];
            add_into(grads, *a, &mut |g| {
                g.iter_mut().for_each(|g| *g += d)
            });
        }
        Op::Sqrt { a } => {
            let y = values[out].data();
            add_into(grads, *a, &mut |g| {
                for (i, d) in dy.iter().enumerate() {
                    if y[i] > 0.0 {
                        g[i] += d * 0.5 / y[i];
                    }
                }
            });
        }
        Op::CrossEntropyLogits {
            logits,
            softmax,
            label,
        } => {
            let label = *label;
            add_into(grads, *logits, &mut |g| {
                for (i, s) in softmax.iter().enumerate() {
                    let onehot = if i == label { 1.0 } else { 0.0 };
                    g[i] += dy[0] * (s - onehot);
                }
            });
        }
        Op::BceWithTargets { p, targets } => {
            let pv = values[*p].data();
            add_into(grads, *p, &mut |g| {
                for i in 0..pv.len() {
                    let mut d = 0.0;
                    if pv[i] > BCE_EPS {
                        d -= targets[i] / pv[i];
                    }
                    if 1.0 - pv[i] > BCE_EPS {
                        d += (1.0 - targets[i]) / (1.0 - pv[i]);
                    }
                    g[i] += dy[0] * d;
                }
            });
        }
        Op::ChwToRows { a, c, plane } => {
            let (c, plane) = (*c, *plane);
            add_into(grads, *a, &mut |g| {
                for ch in 0..c {
                    for p in 0..plane {
                        g[ch * plane + p] += dy[p * c + ch];
                    }
                }
            });
        }
    }
}

fn softmax_slices(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut z = 0.0;
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                data[base + j * inner] = e;
                z += e;
            }
            for j in 0..len {
                data[base + j * inner] /= z;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Bilinear interpolation footprint of one point, with border clamping.
struct Corners {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    x_inside: bool,
    y_inside: bool,
    row_stride: usize,
}

impl Corners {
    fn at(x: f64, y: f64, h: usize, w: usize) -> Corners {
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        let x_inside = x > 0.0 && x < max_x;
        let y_inside = y > 0.0 && y < max_y;
        let cx = x.clamp(0.0, max_x);
        let cy = y.clamp(0.0, max_y);
        let x0 = (cx.floor() as usize).min(w - 1);
        let y0 = (cy.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        Corners {
            x0,
            x1,
            y0,
            y1,
            wx: cx - x0 as f64,
            wy: cy - y0 as f64,
            x_inside,
            y_inside,
            row_stride: w,
        }
    }

    fn taps(&self) -> [(usize, f64); 4] {
        [
            (
                self.y0 * self.row_stride + self.x0,
                (1.0 - self.wy) * (1.0 - self.wx),
            ),
            (
                self.y0 * self.row_stride + self.x1,
                (1.0 - self.wy) * self.wx,
            ),
            (
                self.y1 * self.row_stride + self.x0,
                self.wy * (1.0 - self.wx),
            ),
            (self.y1 * self.row_stride + self.x1, self.wy * self.wx),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{NumericsError, Rng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(Tensor::eye(2));
        let c = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(12);
        let mut a = vec![0.0; 12];
        let mut b = vec![0.0; 8];
        rng.fill_uniform(&mut a, -2.0, 2.0);
        rng.fill_uniform(&mut b, -2.0, 2.0);
        let mut want = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    want[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(t(&[3, 4], &a));
        let bv = tape.constant(t(&[4, 2], &b));
        let c = tape.matmul(av, bv).unwrap();
        for (got, exp) in tape.value(c).data().iter().zip(&want) {
            assert!((got - exp).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            NumericsError::DimensionMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_analytic_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = tape.softmax_last(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.constant(t(&[1, 2], &[0.0, 3.0f64.ln()]));
        let s2 = tape.softmax_last(b).unwrap();
        let d = tape.value(s2).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_exp_sum_oracle() {
        let mut rng = Rng::new(77);
        let mut x = vec![0.0; 5];
        rng.fill_uniform(&mut x, -4.0, 4.0);
        let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 5], &x));
        let s = tape.softmax_last(a).unwrap();
        let got = tape.value(s).data();
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (g, e) in got.iter().zip(&exps) {
            assert!((g - e / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[0.0, 10.0, 0.0, 10.0]));
        let s = tape.softmax(a, 0).unwrap();
        let d = tape.value(s).data();
        // each column sums to one
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
        assert!((d[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 4], &[5.0, 5.0, 5.0, 5.0]));
        let g = tape.constant(t(&[4], &[1.0; 4]));
        let b = tape.constant(t(&[4], &[0.0; 4]));
        let y = tape.layer_norm(a, g, b, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[-1.0, 1.0]));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.layer_norm(a, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::new(21);
        let mut x = vec![0.0; 8];
        rng.fill_uniform(&mut x, -3.0, 3.0);
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        let eps = 1e-5;
        let want: Vec<f64> = x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 8], &x));
        let g = tape.constant(t(&[8], &[1.0; 8]));
        let b = tape.constant(t(&[8], &[0.0; 8]));
        let y = tape.layer_norm(a, g, b, eps).unwrap();
        for (got, exp) in tape.value(y).data().iter().zip(&want) {
            assert!((got - exp).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_sample_exact_lattice_point() {
        let mut tape = Tape::new();
        // map [[0,1],[2,3]] as [H*W, 1]
        let m = tape.constant(t(&[4, 1], &[0.0, 1.0, 2.0, 3.0]));
        let coords = tape.constant(t(&[1, 2], &[1.0, 0.0])); // (x=1, y=0)
        let s = tape.grid_sample(m, 2, 2, coords).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);
    }

    #[test]
    fn bilinear_sample_center_average() {
        let mut tape = Tape::new();
        let m = tape.constant(t(&[4, 1], &[0.0, 1.0, 2.0, 3.0]));
        let coords = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let s = tape.grid_sample(m, 2, 2, coords).unwrap();
        assert!((tape.value(s).data()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_sample_matches_four_corner_oracle() {
        let mut rng = Rng::new(8);
        let (h, w) = (4, 4);
        let mut map = vec![0.0; h * w];
        rng.fill_uniform(&mut map, -1.0, 1.0);
        for _ in 0..100 {
            let x = rng.uniform(-1.0, w as f64);
            let y = rng.uniform(-1.0, h as f64);
            let cx = x.clamp(0.0, (w - 1) as f64);
            let cy = y.clamp(0.0, (h - 1) as f64);
            let x0 = (cx.floor() as usize).min(w - 1);
            let y0 = (cy.floor() as usize).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (wx, wy) = (cx - x0 as f64, cy - y0 as f64);
            let want = (1.0 - wy) * ((1.0 - wx) * map[y0 * w + x0] + wx * map[y0 * w + x1])
                + wy * ((1.0 - wx) * map[y1 * w + x0] + wx * map[y1 * w + x1]);
            let mut tape = Tape::new();
            let m = tape.constant(t(&[h * w, 1], &map));
            let c = tape.constant(t(&[1, 2], &[x, y]));
            let s = tape.grid_sample(m, h, w, c).unwrap();
            assert!((tape.value(s).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_contract_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
    }

    #[test]
    fn backward_sum_of_squares_gives_two_x() {
        let mut x = t(&[3], &[1.0, -2.0, 0.5]);
        x.set_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_unused_parameter_has_zero_grad() {
        let mut tape = Tape::new();
        let used = tape.param(&t(&[2], &[1.0, 2.0]));
        let unused = tape.param(&t(&[2], &[3.0, 4.0]));
        let sq = tape.mul(used, used).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
        let _ = unused;
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let y = tape.mul(x, x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss { .. }));
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // loss = sum(x) + sum(x) ; grad must be 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let s1 = tape.sum_all(x);
        let s2 = tape.sum_all(x);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_backward_rules() {
        // c = a.b, loss = sum(c): dL/da = ones.bT, dL/db = aT.ones
        let a_data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b_data = [0.5, -1.0, 2.0, 1.5, -0.5, 1.0]; // 3x2
        let mut tape = Tape::new();
        let a = tape.param(&t(&[2, 3], &a_data));
        let b = tape.param(&t(&[3, 2], &b_data));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();
        let gb = tape.grad(b).unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let want: f64 = b_data[k * 2] + b_data[k * 2 + 1];
                assert!((ga[i * 3 + k] - want).abs() < 1e-12);
            }
        }
        for k in 0..3 {
            for j in 0..2 {
                let want: f64 = a_data[k] + a_data[3 + k];
                assert!((gb[k * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let logits = [0.2, -1.3, 2.0];
        let mut tape = Tape::new();
        let l = tape.param(&t(&[3], &logits));
        let loss = tape.cross_entropy_logits(l, 2).unwrap();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let want = z.ln() - logits[2];
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(l).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let soft = logits[i].exp() / z;
            let onehot = if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - (soft - onehot)).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_inputs_yield_finite_outputs() {
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let mut x = vec![0.0; 12];
            rng.fill_uniform(&mut x, -50.0, 50.0);
            let mut tape = Tape::new();
            let a = tape.constant(t(&[3, 4], &x));
            let s = tape.softmax_last(a).unwrap();
            let g = tape.constant(t(&[4], &[1.0; 4]));
            let b = tape.constant(t(&[4], &[0.0; 4]));
            let ln = tape.layer_norm(a, g, b, 1e-5).unwrap();
            let r = tape.relu(a);
            let ge = tape.gelu(a);
            for v in [s, ln, r, ge] {
                assert!(tape.value(v).is_finite());
            }
        }
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let top = tape.slice_axis0(x, 0, 1).unwrap();
        let rest = tape.slice_axis0(x, 1, 2).unwrap();
        let back = tape.concat_axis0(&[top, rest]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        let loss = tape.sum_all(back);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn chw_to_rows_layout() {
        let mut tape = Tape::new();
        // 2 channels, 1x2 spatial
        let x = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 10.0, 20.0]));
        let rows = tape.chw_to_rows(x).unwrap();
        assert_eq!(tape.value(rows).shape(), &[2, 2]);
        assert_eq!(tape.value(rows).data(), &[1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn sum_group_rows_and_scale_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]));
        let s = tape.constant(t(&[4], &[1.0, 0.0, 2.0, 1.0]));
        let scaled = tape.scale_rows(x, s).unwrap();
        let grouped = tape.sum_group_rows(scaled, 2).unwrap();
        assert_eq!(tape.value(grouped).data(), &[1.0, 1.0, 10.0, 10.0]);
    }
}
