//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Forward calls on [`Tape`] record one node per operation and return plain
//! [`Tensor`] values tagged with their node handle. [`Tape::backward`] walks
//! the nodes once in reverse creation order (creation order is already
//! topological) and accumulates adjoints additively, so parameters that feed
//! several consumers receive the sum of their contributions and leaves the
//! loss never reaches keep a zero gradient.
//!
//! The tape is append-only and `backward` never mutates it, so repeated
//! backward passes over the same tape replay bit-identically.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math;
use crate::ssm::{scan_backward, scan_forward, ScanSaved, ScanShape};
use crate::tensor::{strides_of, TapeSlot, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

type Nid = usize;

enum Op {
    Leaf,
    Add(Nid, Nid),
    Sub(Nid, Nid),
    Mul(Nid, Nid),
    Div(Nid, Nid),
    AddScalar(Nid),
    Scale(Nid, f64),
    /// x * s where s is a single-element tensor (learned scalar).
    MulScalarT { x: Nid, s: Nid },
    /// x / s where s is a single-element tensor.
    DivScalarT { x: Nid, s: Nid },
    /// (m,k)·(k,n) matrix product.
    MatMul { a: Nid, b: Nid, m: usize, k: usize, n: usize },
    /// w:(m,k) applied to x:(k) -> (m).
    MatVec { w: Nid, x: Nid, m: usize, k: usize },
    /// x:(rows,in)·w:(out,in)ᵀ -> (rows,out); the convention for weight
    /// matrices stored output-major.
    Linear { x: Nid, w: Nid, rows: usize, d_in: usize, d_out: usize },
    /// Column vector outer product a:(m) ⊗ b:(n) -> (m,n).
    Outer(Nid, Nid),
    /// x:(rows,c) + b:(c) broadcast over rows.
    AddRowBias { x: Nid, b: Nid },
    /// x:(c,h,w) + b:(c) broadcast over the spatial plane.
    AddChanBias { x: Nid, b: Nid },
    Sigmoid(Nid),
    Tanh(Nid),
    Relu(Nid),
    Silu(Nid),
    Gelu(Nid),
    Softplus(Nid),
    Ln(Nid),
    Abs(Nid),
    ClampMin(Nid, f64),
    Clamp(Nid, f64, f64),
    Sum(Nid),
    Reshape(Nid),
    Permute { x: Nid, axes: Vec<usize> },
    /// out[i,:] = x[perm[i],:].
    GatherRows { x: Nid, perm: Arc<Vec<usize>> },
    Row { x: Nid, index: usize },
    StackRows { rows: Vec<Nid> },
    LayerNorm { x: Nid, gamma: Nid, beta: Nid, eps: f64 },
    Conv2d { input: Nid, kernel: Nid, stride: usize, padding: usize, groups: usize },
    ConvTranspose2d { input: Nid, kernel: Nid, stride: usize },
    AvgPool2d { input: Nid, k: usize },
    SelectiveScan {
        x: Nid,
        a_log: Nid,
        w_b: Nid,
        w_c: Nid,
        w_delta: Nid,
        delta_bias: Nid,
        shape: ScanShape,
        saved: ScanSaved,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    out: Arc<Vec<f64>>,
}

/// Per-node adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tensor recorded on the tape
    /// this pass ran over.
    pub fn wrt(&self, t: &Tensor) -> &[f64] {
        let slot = t.tape_id().expect("gradient requested for a tensor not on any tape");
        assert_eq!(slot.tape, self.tape, "gradient requested for a tensor from another tape");
        &self.grads[slot.node]
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn nid(&self, t: &Tensor) -> Nid {
        let slot = t.tape_id().expect("tensor is not recorded on any tape");
        assert_eq!(slot.tape, self.id, "tensor belongs to a different tape");
        slot.node
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let out = Arc::new(data);
        let node = self.nodes.len();
        self.nodes.push(Node { op, shape: shape.clone(), out: Arc::clone(&out) });
        Tensor::from_shared(shape, out).with_tape_id(TapeSlot { tape: self.id, node })
    }

    fn val(&self, id: Nid) -> &[f64] {
        &self.nodes[id].out
    }

    fn shape(&self, id: Nid) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Records an existing tensor value as a leaf (parameter, input, or
    /// constant) and returns the tracked handle.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let out = t.data_arc();
        let node = self.nodes.len();
        self.nodes.push(Node { op: Op::Leaf, shape: t.shape().to_vec(), out: Arc::clone(&out) });
        Tensor::from_shared(t.shape().to_vec(), out)
            .with_tape_id(TapeSlot { tape: self.id, node })
    }

    /// Alias of [`Tape::leaf`] for values that are data rather than
    /// parameters; their gradients are computed and discarded.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.leaf(t)
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, name: &str, a: &Tensor, b: &Tensor) -> (Nid, Nid) {
        assert_eq!(
            a.shape(),
            b.shape(),
            "{name}: shape {:?} does not match shape {:?}",
            a.shape(),
            b.shape()
        );
        (self.nid(a), self.nid(b))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (ia, ib) = self.binary_same_shape("add", a, b);
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.push(Op::Add(ia, ib), a.shape().to_vec(), data)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (ia, ib) = self.binary_same_shape("sub", a, b);
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(ia, ib), a.shape().to_vec(), data)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (ia, ib) = self.binary_same_shape("mul", a, b);
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(ia, ib), a.shape().to_vec(), data)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        let (ia, ib) = self.binary_same_shape("div", a, b);
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        self.push(Op::Div(ia, ib), a.shape().to_vec(), data)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        let ia = self.nid(a);
        let data = a.data().iter().map(|x| x + c).collect();
        self.push(Op::AddScalar(ia), a.shape().to_vec(), data)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let ia = self.nid(a);
        let data = a.data().iter().map(|x| x * c).collect();
        self.push(Op::Scale(ia, c), a.shape().to_vec(), data)
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.scale(a, -1.0)
    }

    /// Multiplies a tensor by a learned single-element tensor.
    pub fn mul_scalar_t(&mut self, x: &Tensor, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "mul_scalar_t: scalar operand has shape {:?}", s.shape());
        let (ix, is) = (self.nid(x), self.nid(s));
        let sv = s.data()[0];
        let data = x.data().iter().map(|v| v * sv).collect();
        self.push(Op::MulScalarT { x: ix, s: is }, x.shape().to_vec(), data)
    }

    pub fn div_scalar_t(&mut self, x: &Tensor, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "div_scalar_t: scalar operand has shape {:?}", s.shape());
        let (ix, is) = (self.nid(x), self.nid(s));
        let sv = s.data()[0];
        let data = x.data().iter().map(|v| v / sv).collect();
        self.push(Op::DivScalarT { x: ix, s: is }, x.shape().to_vec(), data)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(
            a.shape().len() == 2 && b.shape().len() == 2 && a.shape()[1] == b.shape()[0],
            "matmul: lhs shape {:?} incompatible with rhs shape {:?}",
            a.shape(),
            b.shape()
        );
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ia, ib) = (self.nid(a), self.nid(b));
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            for l in 0..k {
                let av = ad[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        self.push(Op::MatMul { a: ia, b: ib, m, k, n }, vec![m, n], out)
    }

    pub fn matvec(&mut self, w: &Tensor, x: &Tensor) -> Tensor {
        assert!(
            w.shape().len() == 2 && x.shape().len() == 1 && w.shape()[1] == x.shape()[0],
            "matvec: matrix shape {:?} incompatible with vector shape {:?}",
            w.shape(),
            x.shape()
        );
        let (m, k) = (w.shape()[0], w.shape()[1]);
        let (iw, ix) = (self.nid(w), self.nid(x));
        let (wd, xd) = (w.data(), x.data());
        let out = (0..m)
            .map(|i| wd[i * k..(i + 1) * k].iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Op::MatVec { w: iw, x: ix, m, k }, vec![m], out)
    }

    /// Applies an output-major weight matrix to every row: (rows,in)·(out,in)ᵀ.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor) -> Tensor {
        assert!(
            x.shape().len() == 2 && w.shape().len() == 2 && x.shape()[1] == w.shape()[1],
            "linear: input shape {:?} incompatible with weight shape {:?}",
            x.shape(),
            w.shape()
        );
        let (rows, d_in, d_out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let (ix, iw) = (self.nid(x), self.nid(w));
        let (xd, wd) = (x.data(), w.data());
        let mut out = vec![0.0; rows * d_out];
        for r in 0..rows {
            let xrow = &xd[r * d_in..(r + 1) * d_in];
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            for o in 0..d_out {
                let wrow = &wd[o * d_in..(o + 1) * d_in];
                orow[o] = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        self.push(Op::Linear { x: ix, w: iw, rows, d_in, d_out }, vec![rows, d_out], out)
    }

    pub fn outer(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert!(
            a.shape().len() == 1 && b.shape().len() == 1,
            "outer: expected vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let (m, n) = (a.shape()[0], b.shape()[0]);
        let (ia, ib) = (self.nid(a), self.nid(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a.data()[i] * b.data()[j];
            }
        }
        self.push(Op::Outer(ia, ib), vec![m, n], out)
    }

    pub fn add_row_bias(&mut self, x: &Tensor, b: &Tensor) -> Tensor {
        assert!(
            x.shape().len() == 2 && b.shape().len() == 1 && x.shape()[1] == b.shape()[0],
            "add_row_bias: input shape {:?} incompatible with bias shape {:?}",
            x.shape(),
            b.shape()
        );
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let (ix, ib) = (self.nid(x), self.nid(b));
        let mut out = x.to_vec();
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] += b.data()[j];
            }
        }
        self.push(Op::AddRowBias { x: ix, b: ib }, x.shape().to_vec(), out)
    }

    pub fn add_channel_bias(&mut self, x: &Tensor, b: &Tensor) -> Tensor {
        assert!(
            x.shape().len() == 3 && b.shape().len() == 1 && x.shape()[0] == b.shape()[0],
            "add_channel_bias: input shape {:?} incompatible with bias shape {:?}",
            x.shape(),
            b.shape()
        );
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ix, ib) = (self.nid(x), self.nid(b));
        let mut out = x.to_vec();
        for ch in 0..c {
            let bv = b.data()[ch];
            for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                *v += bv;
            }
        }
        self.push(Op::AddChanBias { x: ix, b: ib }, x.shape().to_vec(), out)
    }

    // ---- activations and pointwise nonlinearities ----

    fn unary(&mut self, a: &Tensor, f: impl Fn(f64) -> f64, op: impl Fn(Nid) -> Op) -> Tensor {
        let ia = self.nid(a);
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.push(op(ia), a.shape().to_vec(), data)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, math::sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        // explicit NaN propagation: f64::max would silently map NaN to 0
        self.unary(a, |x| if x.is_nan() { x } else { x.max(0.0) }, Op::Relu)
    }

    pub fn silu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, math::silu, Op::Silu)
    }

    pub fn gelu(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, math::gelu, Op::Gelu)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, math::softplus, Op::Softplus)
    }

    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::ln, Op::Ln)
    }

    pub fn abs(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn clamp_min(&mut self, a: &Tensor, min: f64) -> Tensor {
        // explicit NaN propagation: f64::max would silently map NaN to min
        self.unary(a, |x| if x.is_nan() { x } else { x.max(min) }, |i| Op::ClampMin(i, min))
    }

    pub fn clamp(&mut self, a: &Tensor, min: f64, max: f64) -> Tensor {
        assert!(min <= max, "clamp: empty range [{min}, {max}]");
        self.unary(a, |x| x.clamp(min, max), |i| Op::Clamp(i, min, max))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let ia = self.nid(a);
        let total = a.data().iter().sum();
        self.push(Op::Sum(ia), vec![1], vec![total])
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.numel() as f64;
        let s = self.sum(a);
        self.scale(&s, 1.0 / n)
    }

    // ---- shape movement ----

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            a.numel(),
            "reshape: {:?} -> {:?} changes element count",
            a.shape(),
            shape
        );
        let ia = self.nid(a);
        let data = a.to_vec();
        self.push(Op::Reshape(ia), shape, data)
    }

    pub fn permute(&mut self, a: &Tensor, axes: &[usize]) -> Tensor {
        let data = permute_data(a.data(), a.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&ax| a.shape()[ax]).collect();
        let ia = self.nid(a);
        self.push(Op::Permute { x: ia, axes: axes.to_vec() }, shape, data)
    }

    /// Reorders the rows of a (rows, c) tensor: out[i,:] = x[perm[i],:].
    pub fn gather_rows(&mut self, x: &Tensor, perm: Arc<Vec<usize>>) -> Tensor {
        assert_eq!(x.shape().len(), 2, "gather_rows: expected matrix, got {:?}", x.shape());
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(perm.len() * c);
        for &src in perm.iter() {
            assert!(src < rows, "gather_rows: row index {src} out of {rows}");
            out.extend_from_slice(&x.data()[src * c..(src + 1) * c]);
        }
        let ix = self.nid(x);
        let shape = vec![perm.len(), c];
        self.push(Op::GatherRows { x: ix, perm }, shape, out)
    }

    pub fn row(&mut self, x: &Tensor, index: usize) -> Tensor {
        assert_eq!(x.shape().len(), 2, "row: expected matrix, got {:?}", x.shape());
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        assert!(index < rows, "row: index {index} out of {rows}");
        let data = x.data()[index * c..(index + 1) * c].to_vec();
        let ix = self.nid(x);
        self.push(Op::Row { x: ix, index }, vec![c], data)
    }

    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Tensor {
        assert!(!rows.is_empty(), "stack_rows: no rows");
        let c = rows[0].shape()[0];
        let mut data = Vec::with_capacity(rows.len() * c);
        let mut ids = Vec::with_capacity(rows.len());
        for r in rows {
            assert_eq!(r.shape(), &[c], "stack_rows: row shape {:?}, expected [{c}]", r.shape());
            data.extend_from_slice(r.data());
            ids.push(self.nid(r));
        }
        let shape = vec![rows.len(), c];
        self.push(Op::StackRows { rows: ids }, shape, data)
    }

    // ---- normalization ----

    /// Layer normalization over the last axis, with affine parameters.
    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let c = *x.shape().last().expect("layer_norm: scalar input");
        assert!(
            gamma.shape() == [c] && beta.shape() == [c],
            "layer_norm: affine shapes {:?}/{:?} do not match feature width {c}",
            gamma.shape(),
            beta.shape()
        );
        let rows = x.numel() / c;
        let (ix, ig, ib) = (self.nid(x), self.nid(gamma), self.nid(beta));
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[r * c + j] = (xr[j] - mean) * inv * gamma.data()[j] + beta.data()[j];
            }
        }
        self.push(Op::LayerNorm { x: ix, gamma: ig, beta: ib, eps }, x.shape().to_vec(), out)
    }

    // ---- convolution family ----

    /// Grouped 2-D cross-correlation. Input (c_in,h,w), kernel
    /// (c_out, c_in/groups, k, k). The depthwise case is groups == c_in.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Tensor {
        let (c_in, h, w) = dims3(input.shape(), "conv2d input");
        let ks = kernel.shape();
        assert_eq!(ks.len(), 4, "conv2d: kernel shape {ks:?}, expected rank 4");
        let (c_out, kc, k) = (ks[0], ks[1], ks[2]);
        assert_eq!(ks[2], ks[3], "conv2d: kernel shape {ks:?} is not square");
        assert!(
            groups >= 1 && c_in % groups == 0 && c_out % groups == 0 && kc == c_in / groups,
            "conv2d: groups {groups} incompatible with input {:?} and kernel {ks:?}",
            input.shape()
        );
        assert!(stride >= 1, "conv2d: stride must be positive");
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        assert!(
            span_h >= k && span_w >= k && (span_h - k) % stride == 0 && (span_w - k) % stride == 0,
            "conv2d: non-integral output extent for input {:?}, kernel {k}, stride {stride}, padding {padding}",
            input.shape()
        );
        let oh = (span_h - k) / stride + 1;
        let ow = (span_w - k) / stride + 1;
        let (ii, ik) = (self.nid(input), self.nid(kernel));
        let out = conv2d_forward(
            input.data(),
            kernel.data(),
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            groups,
        );
        self.push(
            Op::Conv2d { input: ii, kernel: ik, stride, padding, groups },
            vec![c_out, oh, ow],
            out,
        )
    }

    /// Transposed convolution used for learned upsampling. Input (c_in,h,w),
    /// kernel (c_in, c_out, k, k), no padding: output is ((h-1)·stride + k)².
    pub fn conv_transpose2d(&mut self, input: &Tensor, kernel: &Tensor, stride: usize) -> Tensor {
        let (c_in, h, w) = dims3(input.shape(), "conv_transpose2d input");
        let ks = kernel.shape();
        assert!(
            ks.len() == 4 && ks[0] == c_in && ks[2] == ks[3],
            "conv_transpose2d: kernel shape {ks:?} incompatible with input {:?}",
            input.shape()
        );
        assert!(stride >= 1, "conv_transpose2d: stride must be positive");
        let (c_out, k) = (ks[1], ks[2]);
        let oh = (h - 1) * stride + k;
        let ow = (w - 1) * stride + k;
        let (ii, ik) = (self.nid(input), self.nid(kernel));
        let mut out = vec![0.0; c_out * oh * ow];
        for ci in 0..c_in {
            for iy in 0..h {
                for ix in 0..w {
                    let v = input.data()[(ci * h + iy) * w + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for co in 0..c_out {
                        for ky in 0..k {
                            for kx in 0..k {
                                let kv = kernel.data()[((ci * c_out + co) * k + ky) * k + kx];
                                out[(co * oh + iy * stride + ky) * ow + ix * stride + kx] += v * kv;
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::ConvTranspose2d { input: ii, kernel: ik, stride }, vec![c_out, oh, ow], out)
    }

    /// Non-overlapping k×k average pooling.
    pub fn avg_pool2d(&mut self, input: &Tensor, k: usize) -> Tensor {
        let (c, h, w) = dims3(input.shape(), "avg_pool2d input");
        assert!(
            k >= 1 && h % k == 0 && w % k == 0,
            "avg_pool2d: window {k} does not tile input {:?}",
            input.shape()
        );
        let (oh, ow) = (h / k, w / k);
        let ii = self.nid(input);
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += input.data()[(ch * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        self.push(Op::AvgPool2d { input: ii, k }, vec![c, oh, ow], out)
    }

    // ---- fused selective scan ----

    /// Input-dependent state-space scan; see [`crate::ssm`] for the module
    /// API and parameterization. `x` is (len,d) or (batch,len,d); `a_log` is
    /// (d,n); `w_b`/`w_c` are (n,d); `w_delta` is (d,d); `delta_bias` is (d).
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: &Tensor,
        a_log: &Tensor,
        w_b: &Tensor,
        w_c: &Tensor,
        w_delta: &Tensor,
        delta_bias: &Tensor,
    ) -> Tensor {
        let (batch, len, d) = match *x.shape() {
            [len, d] => (1, len, d),
            [batch, len, d] => (batch, len, d),
            _ => panic!("selective_scan: input shape {:?}, expected (len,d) or (batch,len,d)", x.shape()),
        };
        assert_eq!(a_log.shape().len(), 2, "selective_scan: a_log shape {:?}", a_log.shape());
        assert_eq!(
            a_log.shape()[0],
            d,
            "selective_scan: a_log shape {:?} does not match channel width {d}",
            a_log.shape()
        );
        let n = a_log.shape()[1];
        assert_eq!(
            w_b.shape(),
            &[n, d],
            "selective_scan: w_b shape {:?}, expected [{n}, {d}]",
            w_b.shape()
        );
        assert_eq!(
            w_c.shape(),
            &[n, d],
            "selective_scan: w_c shape {:?}, expected [{n}, {d}]",
            w_c.shape()
        );
        assert_eq!(
            w_delta.shape(),
            &[d, d],
            "selective_scan: w_delta shape {:?}, expected [{d}, {d}]",
            w_delta.shape()
        );
        assert_eq!(
            delta_bias.shape(),
            &[d],
            "selective_scan: delta_bias shape {:?}, expected [{d}]",
            delta_bias.shape()
        );
        let shape = ScanShape { batch, len, d, n };
        let (y, saved) = scan_forward(
            shape,
            x.data(),
            a_log.data(),
            w_b.data(),
            w_c.data(),
            w_delta.data(),
            delta_bias.data(),
        );
        let op = Op::SelectiveScan {
            x: self.nid(x),
            a_log: self.nid(a_log),
            w_b: self.nid(w_b),
            w_c: self.nid(w_c),
            w_delta: self.nid(w_delta),
            delta_bias: self.nid(delta_bias),
            shape,
            saved,
        };
        self.push(op, x.shape().to_vec(), y)
    }

    // ---- backward ----

    /// Reverse pass seeded with ∂loss/∂loss = 1. Returns the adjoint of every
    /// node; nodes the loss does not reach keep zero gradients. The pass does
    /// not mutate the tape, so it can be repeated and replays bit-identically.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be a single element, got shape {:?}",
                loss.shape()
            )));
        }
        let root = self.nid(loss);
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.out.len()]).collect();
        grads[root][0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.backprop_node(id, &g, &mut grads);
            grads[id] = g;
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backprop_node(&self, id: Nid, g: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[*a], g, 1.0);
                accumulate(&mut grads[*b], g, 1.0);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[*a], g, 1.0);
                accumulate(&mut grads[*b], g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                for i in 0..g.len() {
                    grads[*a][i] += g[i] * bv[i];
                }
                for i in 0..g.len() {
                    grads[*b][i] += g[i] * av[i];
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                for i in 0..g.len() {
                    grads[*a][i] += g[i] / bv[i];
                }
                for i in 0..g.len() {
                    grads[*b][i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::AddScalar(a) => accumulate(&mut grads[*a], g, 1.0),
            Op::Scale(a, c) => accumulate(&mut grads[*a], g, *c),
            Op::MulScalarT { x, s } => {
                let (xv, sv) = (self.val(*x), self.val(*s)[0]);
                for i in 0..g.len() {
                    grads[*x][i] += g[i] * sv;
                }
                grads[*s][0] += g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum::<f64>();
            }
            Op::DivScalarT { x, s } => {
                let (xv, sv) = (self.val(*x), self.val(*s)[0]);
                for i in 0..g.len() {
                    grads[*x][i] += g[i] / sv;
                }
                grads[*s][0] -=
                    g.iter().zip(xv).map(|(gi, xi)| gi * xi).sum::<f64>() / (sv * sv);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                // dA = g · Bᵀ
                for i in 0..*m {
                    for l in 0..*k {
                        let mut acc = 0.0;
                        for j in 0..*n {
                            acc += g[i * n + j] * bv[l * n + j];
                        }
                        grads[*a][i * k + l] += acc;
                    }
                }
                // dB = Aᵀ · g
                for l in 0..*k {
                    for i in 0..*m {
                        let av_il = av[i * k + l];
                        if av_il == 0.0 {
                            continue;
                        }
                        for j in 0..*n {
                            grads[*b][l * n + j] += av_il * g[i * n + j];
                        }
                    }
                }
            }
            Op::MatVec { w, x, m, k } => {
                let (wv, xv) = (self.val(*w), self.val(*x));
                for i in 0..*m {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..*k {
                        grads[*w][i * k + j] += gi * xv[j];
                        grads[*x][j] += gi * wv[i * k + j];
                    }
                }
            }
            Op::Linear { x, w, rows, d_in, d_out } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                for r in 0..*rows {
                    for o in 0..*d_out {
                        let go = g[r * d_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        let wrow = &wv[o * d_in..(o + 1) * d_in];
                        let xrow = &xv[r * d_in..(r + 1) * d_in];
                        let gxrow = &mut grads[*x][r * d_in..(r + 1) * d_in];
                        for i in 0..*d_in {
                            gxrow[i] += go * wrow[i];
                        }
                        let gwrow = &mut grads[*w][o * d_in..(o + 1) * d_in];
                        for i in 0..*d_in {
                            gwrow[i] += go * xrow[i];
                        }
                    }
                }
            }
            Op::Outer(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, n) = (av.len(), bv.len());
                for i in 0..m {
                    for j in 0..n {
                        grads[*a][i] += g[i * n + j] * bv[j];
                        grads[*b][j] += g[i * n + j] * av[i];
                    }
                }
            }
            Op::AddRowBias { x, b } => {
                accumulate(&mut grads[*x], g, 1.0);
                let c = self.shape(*b)[0];
                for (i, gi) in g.iter().enumerate() {
                    grads[*b][i % c] += gi;
                }
            }
            Op::AddChanBias { x, b } => {
                accumulate(&mut grads[*x], g, 1.0);
                let plane = self.shape(*x)[1] * self.shape(*x)[2];
                for (i, gi) in g.iter().enumerate() {
                    grads[*b][i / plane] += gi;
                }
            }
            Op::Sigmoid(a) => {
                let yv = self.val(id);
                for i in 0..g.len() {
                    grads[*a][i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            }
            Op::Tanh(a) => {
                let yv = self.val(id);
                for i in 0..g.len() {
                    grads[*a][i] += g[i] * (1.0 - yv[i] * yv[i]);
                }
            }
            Op::Relu(a) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        grads[*a][i] += g[i];
                    }
                }
            }
            Op::Silu(a) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    grads[*a][i] += g[i] * math::silu_d(xv[i]);
                }
            }
            Op::Gelu(a) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    grads[*a][i] += g[i] * math::gelu_d(xv[i]);
                }
            }
            Op::Softplus(a) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    grads[*a][i] += g[i] * math::sigmoid(xv[i]);
                }
            }
            Op::Ln(a) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    grads[*a][i] += g[i] / xv[i];
                }
            }
            Op::Abs(a) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    grads[*a][i] += g[i] * if xv[i] > 0.0 { 1.0 } else if xv[i] < 0.0 { -1.0 } else { 0.0 };
                }
            }
            Op::ClampMin(a, min) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    if xv[i] > *min {
                        grads[*a][i] += g[i];
                    }
                }
            }
            Op::Clamp(a, min, max) => {
                let xv = self.val(*a);
                for i in 0..g.len() {
                    if xv[i] > *min && xv[i] < *max {
                        grads[*a][i] += g[i];
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                for v in grads[*a].iter_mut() {
                    *v += g0;
                }
            }
            Op::Reshape(a) => accumulate(&mut grads[*a], g, 1.0),
            Op::Permute { x, axes } => {
                // Scatter through the inverse permutation.
                let out_shape = &self.nodes[id].shape;
                let in_strides = strides_of(self.shape(*x));
                let out_strides = strides_of(out_shape);
                let rank = axes.len();
                let mut idx = vec![0usize; rank];
                for (flat_out, gi) in g.iter().enumerate() {
                    let mut rem = flat_out;
                    for ax in 0..rank {
                        idx[ax] = rem / out_strides[ax];
                        rem %= out_strides[ax];
                    }
                    let mut flat_in = 0;
                    for ax in 0..rank {
                        flat_in += idx[ax] * in_strides[axes[ax]];
                    }
                    grads[*x][flat_in] += gi;
                }
            }
            Op::GatherRows { x, perm } => {
                let c = self.shape(*x)[1];
                for (i, &src) in perm.iter().enumerate() {
                    for j in 0..c {
                        grads[*x][src * c + j] += g[i * c + j];
                    }
                }
            }
            Op::Row { x, index } => {
                let c = g.len();
                for j in 0..c {
                    grads[*x][index * c + j] += g[j];
                }
            }
            Op::StackRows { rows } => {
                let c = g.len() / rows.len();
                for (r, &rid) in rows.iter().enumerate() {
                    accumulate(&mut grads[rid], &g[r * c..(r + 1) * c], 1.0);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.val(*x);
                let gv = self.val(*gamma);
                let c = gv.len();
                let rows = xv.len() / c;
                for r in 0..rows {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gv[j];
                        grads[*gamma][j] += gr[j] * xhat;
                        grads[*beta][j] += gr[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gv[j];
                        grads[*x][r * c + j] +=
                            inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                    }
                }
            }
            Op::Conv2d { input, kernel, stride, padding, groups } => {
                let ishape = self.shape(*input).to_vec();
                let kshape = self.shape(*kernel).to_vec();
                let oshape = self.nodes[id].shape.clone();
                let iv = self.val(*input);
                let kv = self.val(*kernel);
                let (di, dk) = conv2d_backward(
                    g, iv, kv, &ishape, &kshape, &oshape, *stride, *padding, *groups,
                );
                accumulate(&mut grads[*input], &di, 1.0);
                accumulate(&mut grads[*kernel], &dk, 1.0);
            }
            Op::ConvTranspose2d { input, kernel, stride } => {
                let s = *stride;
                let (c_in, h, w) = dims3(self.shape(*input), "conv_transpose2d input");
                let ks = self.shape(*kernel).to_vec();
                let (c_out, k) = (ks[1], ks[2]);
                let ow = (w - 1) * s + k;
                let iv = self.val(*input);
                let kv = self.val(*kernel);
                for ci in 0..c_in {
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut acc = 0.0;
                            let inv = iv[(ci * h + iy) * w + ix];
                            for co in 0..c_out {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let go = g[(co * ((h - 1) * s + k) + iy * s + ky) * ow
                                            + ix * s
                                            + kx];
                                        let kidx = ((ci * c_out + co) * k + ky) * k + kx;
                                        acc += go * kv[kidx];
                                        grads[*kernel][kidx] += go * inv;
                                    }
                                }
                            }
                            grads[*input][(ci * h + iy) * w + ix] += acc;
                        }
                    }
                }
            }
            Op::AvgPool2d { input, k } => {
                let (c, h, w) = dims3(self.shape(*input), "avg_pool2d input");
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[(ch * oh + oy) * ow + ox] * inv;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    grads[*input][(ch * h + oy * k + dy) * w + ox * k + dx] += go;
                                }
                            }
                        }
                    }
                }
            }
            Op::SelectiveScan { x, a_log, w_b, w_c, w_delta, delta_bias, shape, saved } => {
                let sg = scan_backward(
                    *shape,
                    self.val(*x),
                    self.val(*a_log),
                    self.val(*w_b),
                    self.val(*w_c),
                    self.val(*w_delta),
                    saved,
                    g,
                );
                accumulate(&mut grads[*x], &sg.x, 1.0);
                accumulate(&mut grads[*a_log], &sg.a_log, 1.0);
                accumulate(&mut grads[*w_b], &sg.w_b, 1.0);
                accumulate(&mut grads[*w_c], &sg.w_c, 1.0);
                accumulate(&mut grads[*w_delta], &sg.w_delta, 1.0);
                accumulate(&mut grads[*delta_bias], &sg.delta_bias, 1.0);
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn dims3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "{what}: expected rank 3, got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    assert_eq!(axes.len(), shape.len(), "permute: axes {axes:?} for shape {shape:?}");
    let mut seen = vec![false; axes.len()];
    for &ax in axes {
        assert!(ax < shape.len() && !seen[ax], "permute: invalid axes {axes:?}");
        seen[ax] = true;
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    let rank = axes.len();
    for (flat_out, slot) in out.iter_mut().enumerate() {
        let mut rem = flat_out;
        let mut flat_in = 0;
        for ax in 0..rank {
            let coord = rem / out_strides[ax];
            rem %= out_strides[ax];
            flat_in += coord * in_strides[axes[ax]];
        }
        *slot = data[flat_in];
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Vec<f64> {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let mut out = vec![0.0; c_out * oh * ow];
    for g in 0..groups {
        for ocl in 0..cog {
            let oc = g * cog + ocl;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for icl in 0..cig {
                        let ic = g * cig + icl;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input[(ic * h + iy as usize) * w + ix as usize]
                                    * kernel[((oc * cig + icl) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &[f64],
    input: &[f64],
    kernel: &[f64],
    ishape: &[usize],
    kshape: &[usize],
    oshape: &[usize],
    stride: usize,
    padding: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, k) = (kshape[0], kshape[2]);
    let (oh, ow) = (oshape[1], oshape[2]);
    let cig = c_in / groups;
    let cog = c_out / groups;
    let mut di = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    for grp in 0..groups {
        for ocl in 0..cog {
            let oc = grp * cog + ocl;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(oc * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for icl in 0..cig {
                        let ic = grp * cig + icl;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iidx = (ic * h + iy as usize) * w + ix as usize;
                                let kidx = ((oc * cig + icl) * k + ky) * k + kx;
                                di[iidx] += go * kernel[kidx];
                                dk[kidx] += go * input[iidx];
                            }
                        }
                    }
                }
            }
        }
    }
    (di, dk)
}
