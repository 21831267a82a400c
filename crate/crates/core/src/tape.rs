//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every primitive executed during a forward pass. Each
//! node owns its output tensor and enough op metadata to push gradients back
//! to its inputs. [`Tape::backward`] replays the recording in exact reverse
//! execution order, accumulating gradients additively, and returns the
//! gradients of all leaves.
//!
//! The tape is deliberately not a general autodiff system: the op set is
//! exactly what the model needs, each op validates its shapes eagerly, and a
//! single tape is single-threaded. Batch parallelism happens one tape per
//! sample with an ordered reduction (see the training loop).

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{axpy, dot, Real, Tensor};
use std::sync::Arc;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf { param: Option<ParamId> },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// y = mul * x + add, elementwise; only the slope matters to backward.
    Affine { x: ValueId, mul: Real },
    /// m: [rows, cols], v: [cols] -> [rows]
    MatVec { m: ValueId, v: ValueId },
    /// a: [m, k], b: [k, n] -> [m, n]
    MatMul { a: ValueId, b: ValueId },
    Relu(ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    /// Softmax over a flat vector.
    Softmax { x: ValueId },
    /// Softmax over `support` indices of a flat logit vector; zero elsewhere.
    SoftmaxSupport { logits: ValueId, support: Arc<Vec<usize>> },
    Conv2d {
        input: ValueId,
        kernels: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: ValueId,
        /// Input-buffer offset of the winning element per output element.
        argmax: Vec<u32>,
    },
    Lrn {
        input: ValueId,
        radius: usize,
        alpha: Real,
        beta: Real,
        bias: Real,
    },
    /// Keeps the top-left out_h x out_w window of a [H, W, C] grid.
    CropSpatial { x: ValueId, out_h: usize, out_w: usize },
    /// Location-wise outer product of two [K, K, D] grids.
    BilinearOuter { a: ValueId, b: ValueId },
    SignedSqrt(ValueId),
    /// L2-normalizes each contiguous chunk; zero chunks pass through.
    L2NormalizeChunks { x: ValueId, chunk: usize },
    /// Sums a [K, K, D] tube over all locations -> [D].
    SumLocs { tube: ValueId },
    /// Expectation of tube slices under `map` restricted to `support` -> [D].
    Attend {
        tube: ValueId,
        map: ValueId,
        support: Arc<Vec<usize>>,
    },
    Concat { parts: Vec<ValueId> },
    Reshape { x: ValueId },
    /// Elementwise multiply by a fixed mask (inverted-dropout scaling baked in).
    Dropout { x: ValueId, mask: Arc<Vec<Real>> },
    SumAll(ValueId),
    SumSquares(ValueId),
    Dot(ValueId, ValueId),
    /// ln(max(x, eps)) elementwise.
    LogClamped { x: ValueId, eps: Real },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a backward sweep. Interior gradients are freed as
/// the sweep consumes them; leaf gradients stay readable.
pub struct BackwardResult {
    node_grads: Vec<Option<Tensor>>,
    param_leaves: Vec<(ParamId, usize)>,
    param_shapes: Vec<Vec<usize>>,
}

impl BackwardResult {
    /// Gradient of the loss with respect to a leaf value.
    pub fn grad(&self, id: ValueId) -> Option<&Tensor> {
        self.node_grads[id.0].as_ref()
    }

    /// Drains gradients for every parameter leaf on the tape. Parameters the
    /// loss never touched get explicit zero gradients.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::with_capacity(self.param_leaves.len());
        for (i, (pid, node)) in self.param_leaves.iter().enumerate() {
            let g = self.node_grads[*node]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.param_shapes[i]));
            out.push((*pid, g));
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Non-learnable leaf (inputs, labels, fixed masks).
    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.push(t, Op::Leaf { param: None })
    }

    /// Learnable leaf backed by a store entry; shares the parameter's buffer.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> ValueId {
        self.push_shared(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn affine(&mut self, x: ValueId, mul: Real, add: Real) -> ValueId {
        let out = map(self.value(x), |v| mul * v + add);
        self.push(out, Op::Affine { x, mul })
    }

    pub fn scale(&mut self, x: ValueId, k: Real) -> ValueId {
        self.affine(x, k, 0.0)
    }

    pub fn matvec(&mut self, m: ValueId, v: ValueId) -> Result<ValueId> {
        let (ms, vs) = (self.shape(m), self.shape(v));
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(Error::Dimension(format!(
                "matvec: matrix {:?} incompatible with vector {:?} (axis 1 vs axis 0)",
                ms, vs
            )));
        }
        let (rows, cols) = (ms[0], ms[1]);
        let md = self.value(m).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            out[r] = dot(&md[r * cols..(r + 1) * cols], vd);
        }
        let out = Tensor::from_vec(&[rows], out)?;
        Ok(self.push(out, Op::MatVec { m, v }))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: {:?} incompatible with {:?} (axis 1 vs axis 0)",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                axpy(ad[i * k + kk], &bd[kk * n..(kk + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
        }
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let out = map(self.value(x), |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let out = map(self.value(x), |v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let out = map(self.value(x), |v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the whole (flattened) value. Max-shifted, so adding a
    /// constant to all logits leaves the output unchanged.
    pub fn softmax(&mut self, x: ValueId) -> ValueId {
        let xd = self.value(x).data();
        let out = softmax_slice(xd);
        let out = Tensor::from_vec(self.shape(x), out).expect("softmax preserves shape");
        self.push(out, Op::Softmax { x })
    }

    /// Softmax restricted to `support` (sorted, unique indices into the flat
    /// logit vector). Entries outside the support are exactly zero.
    pub fn softmax_support(&mut self, logits: ValueId, support: Arc<Vec<usize>>) -> Result<ValueId> {
        let xd = self.value(logits).data();
        if support.is_empty() {
            return Err(Error::Usage("softmax_support: empty support".into()));
        }
        if let Some(&bad) = support.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::Dimension(format!(
                "softmax_support: index {} out of range for {} logits",
                bad,
                xd.len()
            )));
        }
        let mut out = vec![0.0; xd.len()];
        let max = support.iter().map(|&i| xd[i]).fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for &i in support.iter() {
            let e = (xd[i] - max).exp();
            out[i] = e;
            sum += e;
        }
        for &i in support.iter() {
            out[i] /= sum;
        }
        let out = Tensor::from_vec(self.shape(logits), out)?;
        Ok(self.push(out, Op::SoftmaxSupport { logits, support }))
    }

    /// 2-D convolution over a [H, W, C_in] grid with kernels
    /// [C_out, kH, kW, C_in] and optional [C_out] bias. Zero padding.
    ///
    /// Accumulation order is part of the contract: each output starts from
    /// the bias (or 0.0) and adds contributions in (ky, kx, ci) row-major
    /// order, so the result is bit-identical to a naive direct loop.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernels: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernels).to_vec();
        if ishape.len() != 3 {
            return Err(Error::Dimension(format!(
                "conv2d: input must be [H, W, C], got {:?}",
                ishape
            )));
        }
        if kshape.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d: kernels must be [C_out, kH, kW, C_in], got {:?}",
                kshape
            )));
        }
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let (cout, kh, kw, kcin) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(Error::Dimension(format!(
                "conv2d: kernel depth (axis 3) is {} but input channels (axis 2) is {}",
                kcin, cin
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [cout] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?} does not match {} output channels (axis 0)",
                    bs, cout
                )));
            }
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;

        let id = self.value(input).data();
        let kd = self.value(kernels).data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = bd.as_ref().map_or(0.0, |b| b[co]);
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ib = ((iy as usize * w) + ix as usize) * cin;
                            let kb = ((co * kh + ky) * kw + kx) * cin;
                            for ci in 0..cin {
                                acc += id[ib + ci] * kd[kb + ci];
                            }
                        }
                    }
                    out[(oy * wo + ox) * cout + co] = acc;
                }
            }
        }
        let out = Tensor::from_vec(&[ho, wo, cout], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Max pooling over a [H, W, C] grid. Ties go to the first element in
    /// row-major scan order, which pins the backward routing.
    pub fn maxpool2d(&mut self, input: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 3 {
            return Err(Error::Dimension(format!(
                "maxpool2d: input must be [H, W, C], got {:?}",
                ishape
            )));
        }
        let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
        if window == 0 || stride == 0 {
            return Err(Error::Dimension("maxpool2d: window and stride must be >= 1".into()));
        }
        if window > h || window > w {
            return Err(Error::Dimension(format!(
                "maxpool2d: window {} larger than input extent {}x{}",
                window, h, w
            )));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let id = self.value(input).data();
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = vec![0u32; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_off = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let off = ((oy * stride + ky) * w + (ox * stride + kx)) * c + ch;
                            if id[off] > best {
                                best = id[off];
                                best_off = off;
                            }
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_off as u32;
                }
            }
        }
        let out = Tensor::from_vec(&[ho, wo, c], out)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    /// Cross-channel response normalization:
    /// y_c = x_c / (bias + alpha * sum_{|c'-c| <= radius} x_{c'}^2)^beta.
    pub fn lrn(
        &mut self,
        input: ValueId,
        radius: usize,
        alpha: Real,
        beta: Real,
        bias: Real,
    ) -> Result<ValueId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 3 {
            return Err(Error::Dimension(format!(
                "lrn: input must be [H, W, C], got {:?}",
                ishape
            )));
        }
        let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
        let id = self.value(input).data();
        let mut out = vec![0.0; id.len()];
        for pos in 0..h * w {
            let base = pos * c;
            for ch in 0..c {
                let lo = ch.saturating_sub(radius);
                let hi = (ch + radius).min(c - 1);
                let mut s = 0.0;
                for cc in lo..=hi {
                    s += id[base + cc] * id[base + cc];
                }
                out[base + ch] = id[base + ch] * (bias + alpha * s).powf(-beta);
            }
        }
        let out = Tensor::from_vec(&ishape, out)?;
        Ok(self.push(
            out,
            Op::Lrn {
                input,
                radius,
                alpha,
                beta,
                bias,
            },
        ))
    }

    /// Keeps the top-left out_h x out_w window of a [H, W, C] grid.
    pub fn crop_spatial(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h > s[0] || out_w > s[1] {
            return Err(Error::Dimension(format!(
                "crop_spatial: cannot crop {:?} to {}x{}",
                s, out_h, out_w
            )));
        }
        let (w, c) = (s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(out_h * out_w * c);
        for y in 0..out_h {
            out.extend_from_slice(&xd[(y * w) * c..(y * w + out_w) * c]);
        }
        let out = Tensor::from_vec(&[out_h, out_w, c], out)?;
        Ok(self.push(out, Op::CropSpatial { x, out_h, out_w }))
    }

    /// Location-wise outer product: a [K, K, D_a] and b [K, K, D_b] fuse to
    /// [K, K, D_a * D_b]; slice (u, v) reshaped to D_a x D_b equals the outer
    /// product of the two location vectors.
    pub fn bilinear_outer(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 {
            return Err(Error::Dimension(format!(
                "bilinear_outer: grids must be [K, K, D], got {:?} and {:?}",
                sa, sb
            )));
        }
        if sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(Error::Dimension(format!(
                "bilinear_outer: unaligned grids {}x{} vs {}x{} (axes 0, 1)",
                sa[0], sa[1], sb[0], sb[1]
            )));
        }
        let (locs, da, db) = (sa[0] * sa[1], sa[2], sb[2]);
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; locs * da * db];
        for l in 0..locs {
            let av = &ad[l * da..(l + 1) * da];
            let bv = &bd[l * db..(l + 1) * db];
            let ov = &mut out[l * da * db..(l + 1) * da * db];
            for i in 0..da {
                let ai = av[i];
                for j in 0..db {
                    ov[i * db + j] = ai * bv[j];
                }
            }
        }
        let out = Tensor::from_vec(&[sa[0], sa[1], da * db], out)?;
        Ok(self.push(out, Op::BilinearOuter { a, b }))
    }

    /// sign(x) * sqrt(|x|), elementwise.
    pub fn signed_sqrt(&mut self, x: ValueId) -> ValueId {
        let out = map(self.value(x), |v| v.signum() * v.abs().sqrt());
        self.push(out, Op::SignedSqrt(x))
    }

    /// L2-normalizes each contiguous chunk of length `chunk`; all-zero chunks
    /// pass through unchanged.
    pub fn l2_normalize_chunks(&mut self, x: ValueId, chunk: usize) -> Result<ValueId> {
        let n = self.value(x).numel();
        if chunk == 0 || n % chunk != 0 {
            return Err(Error::Dimension(format!(
                "l2_normalize_chunks: {} elements not divisible into chunks of {}",
                n, chunk
            )));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; n];
        for c in 0..n / chunk {
            let xs = &xd[c * chunk..(c + 1) * chunk];
            let norm = dot(xs, xs).sqrt();
            let os = &mut out[c * chunk..(c + 1) * chunk];
            if norm == 0.0 {
                os.copy_from_slice(xs);
            } else {
                for (o, v) in os.iter_mut().zip(xs) {
                    *o = v / norm;
                }
            }
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(out, Op::L2NormalizeChunks { x, chunk }))
    }

    /// Sums a [K, K, D] tube over all locations into a [D] vector.
    pub fn sum_locs(&mut self, tube: ValueId) -> Result<ValueId> {
        let s = self.shape(tube).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "sum_locs: tube must be [K, K, D], got {:?}",
                s
            )));
        }
        let d = s[2];
        let td = self.value(tube).data();
        let mut out = vec![0.0; d];
        for l in 0..s[0] * s[1] {
            axpy(1.0, &td[l * d..(l + 1) * d], &mut out);
        }
        let out = Tensor::from_vec(&[d], out)?;
        Ok(self.push(out, Op::SumLocs { tube }))
    }

    /// Expected tube slice under an attention map: sum over support indices
    /// of map[idx] * slice(idx). The map is a flat [K*K] vector.
    pub fn attend(
        &mut self,
        tube: ValueId,
        map_vec: ValueId,
        support: Arc<Vec<usize>>,
    ) -> Result<ValueId> {
        let s = self.shape(tube).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "attend: tube must be [K, K, D], got {:?}",
                s
            )));
        }
        let locs = s[0] * s[1];
        if self.value(map_vec).numel() != locs {
            return Err(Error::Dimension(format!(
                "attend: map has {} entries for {} locations",
                self.value(map_vec).numel(),
                locs
            )));
        }
        if let Some(&bad) = support.iter().find(|&&i| i >= locs) {
            return Err(Error::Dimension(format!(
                "attend: support index {} out of range for {} locations",
                bad, locs
            )));
        }
        let d = s[2];
        let td = self.value(tube).data();
        let md = self.value(map_vec).data();
        let mut out = vec![0.0; d];
        for &idx in support.iter() {
            axpy(md[idx], &td[idx * d..(idx + 1) * d], &mut out);
        }
        let out = Tensor::from_vec(&[d], out)?;
        Ok(self.push(
            out,
            Op::Attend {
                tube,
                map: map_vec,
                support,
            },
        ))
    }

    /// Concatenates the flattened parts into one vector.
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat: no parts".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).numel()).sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::from_vec(&[total], out)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Elementwise multiply by a fixed mask; used for inverted dropout, where
    /// mask entries are 0 or 1/(1-rate).
    pub fn dropout_mask(&mut self, x: ValueId, mask: Arc<Vec<Real>>) -> Result<ValueId> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "dropout: mask has {} entries for {} elements",
                mask.len(),
                self.value(x).numel()
            )));
        }
        let xd = self.value(x).data();
        let out: Vec<Real> = xd.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let s: Real = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn sum_squares(&mut self, x: ValueId) -> ValueId {
        let xd = self.value(x).data();
        let s = dot(xd, xd);
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn dot_product(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("dot", a, b)?;
        let s = dot(self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// ln(max(x, eps)), elementwise; the clamp guards log of zero.
    pub fn log_clamped(&mut self, x: ValueId, eps: Real) -> ValueId {
        let out = map(self.value(x), |v| v.max(eps).ln());
        self.push(out, Op::LogClamped { x, eps })
    }

    fn same_shape(&self, op: &str, a: ValueId, b: ValueId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let axis = sa
                .iter()
                .zip(sb.iter())
                .position(|(x, y)| x != y)
                .unwrap_or_else(|| sa.len().min(sb.len()));
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ first at axis {axis}",
                sa, sb
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively;
    /// nodes are visited in exact reverse execution order.
    pub fn backward(&self, loss: ValueId) -> Result<BackwardResult> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let gout = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &gout, &mut grads);
        }

        let mut param_leaves = Vec::new();
        let mut param_shapes = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                param_leaves.push((pid, i));
                param_shapes.push(node.value.shape().to_vec());
            }
        }
        Ok(BackwardResult {
            node_grads: grads,
            param_leaves,
            param_shapes,
        })
    }

    /// Runs backward and adds every parameter gradient into the store.
    pub fn backward_into(&self, loss: ValueId, store: &mut ParameterStore) -> Result<()> {
        let result = self.backward(loss)?;
        store.accumulate(result.into_param_grads());
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let g = gout.data();
        match &node.op {
            Op::Leaf { .. } => unreachable!("leaves are skipped"),
            Op::Add(a, b) => {
                self.accum(grads, *a, |t| axpy(1.0, g, t.data_mut()));
                self.accum(grads, *b, |t| axpy(1.0, g, t.data_mut()));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |t| axpy(1.0, g, t.data_mut()));
                self.accum(grads, *b, |t| axpy(-1.0, g, t.data_mut()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                self.accum(grads, *a, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g[k] * bd[k];
                    }
                });
                self.accum(grads, *b, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g[k] * ad[k];
                    }
                });
            }
            Op::Affine { x, mul } => {
                let m = *mul;
                self.accum(grads, *x, |t| axpy(m, g, t.data_mut()));
            }
            Op::MatVec { m, v } => {
                let cols = self.shape(*v)[0];
                let md = self.value(*m).data();
                let vd = self.value(*v).data();
                self.accum(grads, *m, |t| {
                    let tm = t.data_mut();
                    for (r, gr) in g.iter().enumerate() {
                        axpy(*gr, vd, &mut tm[r * cols..(r + 1) * cols]);
                    }
                });
                self.accum(grads, *v, |t| {
                    let tv = t.data_mut();
                    for (r, gr) in g.iter().enumerate() {
                        axpy(*gr, &md[r * cols..(r + 1) * cols], tv);
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accum(grads, *a, |t| {
                    let ta = t.data_mut();
                    for i2 in 0..m {
                        for kk in 0..k {
                            ta[i2 * k + kk] += dot(&g[i2 * n..(i2 + 1) * n], &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                });
                self.accum(grads, *b, |t| {
                    let tb = t.data_mut();
                    for i2 in 0..m {
                        for kk in 0..k {
                            axpy(ad[i2 * k + kk], &g[i2 * n..(i2 + 1) * n], &mut tb[kk * n..(kk + 1) * n]);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        if y[k] > 0.0 {
                            *tv += g[k];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g[k] * (1.0 - y[k] * y[k]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Softmax { x } => {
                let inner = dot(g, y);
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += y[k] * (g[k] - inner);
                    }
                });
            }
            Op::SoftmaxSupport { logits, support } => {
                let inner: Real = support.iter().map(|&k| g[k] * y[k]).sum();
                self.accum(grads, *logits, |t| {
                    let td = t.data_mut();
                    for &k in support.iter() {
                        td[k] += y[k] * (g[k] - inner);
                    }
                });
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                self.backprop_conv2d(*input, *kernels, *bias, *stride, *padding, i, g, grads);
            }
            Op::MaxPool2d { input, argmax, .. } => {
                self.accum(grads, *input, |t| {
                    let td = t.data_mut();
                    for (o, &off) in argmax.iter().enumerate() {
                        td[off as usize] += g[o];
                    }
                });
            }
            Op::Lrn {
                input,
                radius,
                alpha,
                beta,
                bias,
            } => {
                let xs = self.value(*input);
                let shape = xs.shape();
                let (hw, c) = (shape[0] * shape[1], shape[2]);
                let xd = xs.data();
                let (r, a, b, k0) = (*radius, *alpha, *beta, *bias);
                self.accum(grads, *input, |t| {
                    let td = t.data_mut();
                    for pos in 0..hw {
                        let base = pos * c;
                        // s[c] = bias + alpha * windowed sum of squares
                        let mut s = vec![0.0; c];
                        for ch in 0..c {
                            let lo = ch.saturating_sub(r);
                            let hi = (ch + r).min(c - 1);
                            let mut acc = 0.0;
                            for cc in lo..=hi {
                                acc += xd[base + cc] * xd[base + cc];
                            }
                            s[ch] = k0 + a * acc;
                        }
                        for d in 0..c {
                            let mut acc = g[base + d] * s[d].powf(-b);
                            let lo = d.saturating_sub(r);
                            let hi = (d + r).min(c - 1);
                            let mut cross = 0.0;
                            for cc in lo..=hi {
                                cross += g[base + cc] * xd[base + cc] * s[cc].powf(-b - 1.0);
                            }
                            acc -= 2.0 * a * b * xd[base + d] * cross;
                            td[base + d] += acc;
                        }
                    }
                });
            }
            Op::CropSpatial { x, out_h, out_w } => {
                let s = self.shape(*x);
                let (w, c) = (s[1], s[2]);
                let (oh, ow) = (*out_h, *out_w);
                self.accum(grads, *x, |t| {
                    let td = t.data_mut();
                    for yy in 0..oh {
                        let src = &g[(yy * ow) * c..(yy + 1) * ow * c];
                        axpy(1.0, src, &mut td[(yy * w) * c..(yy * w + ow) * c]);
                    }
                });
            }
            Op::BilinearOuter { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (locs, da, db) = (sa[0] * sa[1], sa[2], sb[2]);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accum(grads, *a, |t| {
                    let td = t.data_mut();
                    for l in 0..locs {
                        let gs = &g[l * da * db..(l + 1) * da * db];
                        let bv = &bd[l * db..(l + 1) * db];
                        for i2 in 0..da {
                            td[l * da + i2] += dot(&gs[i2 * db..(i2 + 1) * db], bv);
                        }
                    }
                });
                self.accum(grads, *b, |t| {
                    let td = t.data_mut();
                    for l in 0..locs {
                        let gs = &g[l * da * db..(l + 1) * da * db];
                        let av = &ad[l * da..(l + 1) * da];
                        let tv = &mut td[l * db..(l + 1) * db];
                        for i2 in 0..da {
                            axpy(av[i2], &gs[i2 * db..(i2 + 1) * db], tv);
                        }
                    }
                });
            }
            Op::SignedSqrt(x) => {
                let xd = self.value(*x).data();
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        let denom = 2.0 * xd[k].abs().max(1e-16).sqrt();
                        *tv += g[k] / denom;
                    }
                });
            }
            Op::L2NormalizeChunks { x, chunk } => {
                let xd = self.value(*x).data();
                let ch = *chunk;
                self.accum(grads, *x, |t| {
                    let td = t.data_mut();
                    for cidx in 0..xd.len() / ch {
                        let rng = cidx * ch..(cidx + 1) * ch;
                        let xs = &xd[rng.clone()];
                        let norm = dot(xs, xs).sqrt();
                        if norm == 0.0 {
                            axpy(1.0, &g[rng.clone()], &mut td[rng.clone()]);
                        } else {
                            let ys = &y[rng.clone()];
                            let gy = dot(&g[rng.clone()], ys);
                            for (k, tv) in td[rng.clone()].iter_mut().enumerate() {
                                *tv += (g[cidx * ch + k] - gy * ys[k]) / norm;
                            }
                        }
                    }
                });
            }
            Op::SumLocs { tube } => {
                let s = self.shape(*tube);
                let (locs, d) = (s[0] * s[1], s[2]);
                self.accum(grads, *tube, |t| {
                    let td = t.data_mut();
                    for l in 0..locs {
                        axpy(1.0, g, &mut td[l * d..(l + 1) * d]);
                    }
                });
            }
            Op::Attend { tube, map, support } => {
                let d = self.shape(*tube)[2];
                let td_tube = self.value(*tube).data();
                let md = self.value(*map).data();
                self.accum(grads, *tube, |t| {
                    let td = t.data_mut();
                    for &idx in support.iter() {
                        axpy(md[idx], g, &mut td[idx * d..(idx + 1) * d]);
                    }
                });
                self.accum(grads, *map, |t| {
                    let td = t.data_mut();
                    for &idx in support.iter() {
                        td[idx] += dot(g, &td_tube[idx * d..(idx + 1) * d]);
                    }
                });
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts.clone() {
                    let n = self.value(p).numel();
                    let slice = &g[off..off + n];
                    self.accum(grads, p, |t| axpy(1.0, slice, t.data_mut()));
                    off += n;
                }
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, |t| axpy(1.0, g, t.data_mut()));
            }
            Op::Dropout { x, mask } => {
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g[k] * mask[k];
                    }
                });
            }
            Op::SumAll(x) => {
                let gs = g[0];
                self.accum(grads, *x, |t| {
                    for tv in t.data_mut().iter_mut() {
                        *tv += gs;
                    }
                });
            }
            Op::SumSquares(x) => {
                let gs = g[0];
                let xd = self.value(*x).data();
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += 2.0 * gs * xd[k];
                    }
                });
            }
            Op::Dot(a, b) => {
                let gs = g[0];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accum(grads, *a, |t| axpy(gs, bd, t.data_mut()));
                self.accum(grads, *b, |t| axpy(gs, ad, t.data_mut()));
            }
            Op::LogClamped { x, eps } => {
                let xd = self.value(*x).data();
                let e = *eps;
                self.accum(grads, *x, |t| {
                    for (k, tv) in t.data_mut().iter_mut().enumerate() {
                        if xd[k] > e {
                            *tv += g[k] / xd[k];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        input: ValueId,
        kernels: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
        node: usize,
        g: &[Real],
        grads: &mut Vec<Option<Tensor>>,
    ) {
        let ishape = self.shape(input);
        let kshape = self.shape(kernels);
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let (cout, kh, kw) = (kshape[0], kshape[1], kshape[2]);
        let oshape = self.nodes[node].value.shape();
        let (ho, wo) = (oshape[0], oshape[1]);
        let id = self.value(input).data();
        let kd = self.value(kernels).data();

        if let Some(b) = bias {
            self.accum(grads, b, |t| {
                let td = t.data_mut();
                for o in 0..ho * wo {
                    for co in 0..cout {
                        td[co] += g[o * cout + co];
                    }
                }
            });
        }
        self.accum(grads, input, |t| {
            let td = t.data_mut();
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let go = g[(oy * wo + ox) * cout + co];
                        if go == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ib = ((iy as usize * w) + ix as usize) * cin;
                                let kb = ((co * kh + ky) * kw + kx) * cin;
                                axpy(go, &kd[kb..kb + cin], &mut td[ib..ib + cin]);
                            }
                        }
                    }
                }
            }
        });
        self.accum(grads, kernels, |t| {
            let td = t.data_mut();
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..cout {
                        let go = g[(oy * wo + ox) * cout + co];
                        if go == 0.0 {
                            continue;
                        }
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ib = ((iy as usize * w) + ix as usize) * cin;
                                let kb = ((co * kh + ky) * kw + kx) * cin;
                                axpy(go, &id[ib..ib + cin], &mut td[kb..kb + cin]);
                            }
                        }
                    }
                }
            }
        });
    }

    fn accum<F: FnOnce(&mut Tensor)>(&self, grads: &mut [Option<Tensor>], id: ValueId, f: F) {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(id)));
        }
        f(slot.as_mut().expect("just inserted"));
    }
}

fn map(t: &Tensor, f: impl Fn(Real) -> Real) -> Tensor {
    Tensor::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect())
        .expect("map preserves shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("zip_map preserves shape")
}

pub(crate) fn softmax_slice(x: &[Real]) -> Vec<Real> {
    let max = x.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut out: Vec<Real> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: Real = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_is_usage_error() {
        let tape = Tape::new();
        let err = tape.backward(ValueId(0));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[3], 1.0));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::filled(&[4], 2.5));
        let loss = tape.sum_all(w);
        let r = tape.backward(loss).unwrap();
        assert_eq!(r.grad(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::filled(&[3], 1.5));
        let s = tape.sum_squares(w);
        let loss = tape.scale(s, 0.0);
        let r = tape.backward(loss).unwrap();
        assert_eq!(r.grad(w).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[4]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let logits = vec![0.3, -1.2, 2.0, 0.0, 0.7];
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_vec(&[5], logits.clone()).unwrap());
        let b = tape.input(Tensor::from_vec(&[5], logits.iter().map(|v| v + 100.0).collect()).unwrap());
        let ya = tape.softmax(a);
        let yb = tape.softmax(b);
        for (x, y) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum: Real = tape.value(ya).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_scalar_case() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap());
        let k = tape.input(Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv2d_sum_of_ones() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[3, 3, 1], 1.0));
        let k = tape.input(Tensor::filled(&[1, 3, 3, 1], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_rejects_depth_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[4, 4, 2]));
        let k = tape.input(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, k, None, 1, 0);
        match err {
            Err(Error::Dimension(msg)) => {
                assert!(msg.contains("axis 3") || msg.contains("axis 2"), "{msg}");
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn maxpool_takes_window_max_and_routes_to_first_tie() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        // constant input: gradient goes to the first-scanned position only
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[2, 2, 1], 7.0));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0]);
        let loss = tape.sum_all(y);
        let r = tape.backward(loss).unwrap();
        assert_eq!(r.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2, 1]));
        assert!(matches!(tape.maxpool2d(x, 3, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_activations_at_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1]));
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
        assert_eq!(tape.value(r).data(), &[0.0]);
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // loss = sum(w * w) uses w twice: d/dw = 2w
        let mut tape = Tape::new();
        let w = tape.input(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let p = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(p);
        let r = tape.backward(loss).unwrap();
        assert_eq!(r.grad(w).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_vec(&[4], vec![0.3, -0.7, 1.1, 0.05]).unwrap());
            let h = tape.tanh(x);
            let s = tape.sum_squares(h);
            let r = tape.backward(s).unwrap();
            r.grad(x).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical runs must produce bit-identical gradients");
    }
}
