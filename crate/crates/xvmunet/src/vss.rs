//! Four-direction 2D selective scanning and the gated vision block built
//! around it.
//!
//! A feature map is unfolded into four 1D traversals (row-major,
//! column-major, and their reversals), each traversal is run through a
//! selective scan, the four outputs are folded back to the 2D layout, and
//! the maps are summed. The surrounding block normalizes the input, splits
//! it into a scanned branch (linear → depthwise 3×3 conv → SiLU → scan →
//! layernorm) and a gating branch (linear → SiLU), multiplies the two,
//! projects, and adds the result back onto the input.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::ssm::{selective_scan, SelectiveProjections};
use crate::tensor::Tensor;

pub const DIRECTIONS: usize = 4;

/// Flat-index traversal order for direction `dir` over an `h`×`w` map:
/// position `i` of the sequence reads flat index `perm[i]`.
///
/// Direction 0 is row-major, 1 is column-major, 2 and 3 are their reversals.
pub fn direction_perm(dir: usize, h: usize, w: usize) -> Vec<usize> {
    assert!(dir < DIRECTIONS, "direction {dir} out of range");
    assert!(h >= 1 && w >= 1, "degenerate map {h}×{w}");
    let l = h * w;
    match dir {
        0 => (0..l).collect(),
        1 => (0..l).map(|i| (i % h) * w + i / h).collect(),
        2 => (0..l).map(|i| l - 1 - i).collect(),
        _ => (0..l).map(|i| ((l - 1 - i) % h) * w + (l - 1 - i) / h).collect(),
    }
}

/// Inverse of a permutation: `inv[perm[i]] = i`.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// The four per-channel traversals of a feature map, each of length H·W per
/// channel, laid out channel-major.
#[derive(Clone, Debug)]
pub struct DirectionalSequences {
    pub seqs: [Vec<f64>; 4],
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

/// Unfolds a (C,H,W) map into the four directional sequences.
pub fn scan_expand(f: &Tensor) -> DirectionalSequences {
    let shape = f.shape();
    assert_eq!(shape.len(), 3, "scan_expand: expected (C,H,W), got {:?}", shape);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let l = h * w;
    let data = f.data();
    let seqs = std::array::from_fn(|dir| {
        let perm = direction_perm(dir, h, w);
        let mut seq = Vec::with_capacity(c * l);
        for ch in 0..c {
            let plane = &data[ch * l..(ch + 1) * l];
            seq.extend(perm.iter().map(|&p| plane[p]));
        }
        seq
    });
    DirectionalSequences { seqs, channels: c, h, w }
}

/// Folds four processed directional sequences back to a (C,H,W) map: each
/// sequence is inverse-reordered to the 2D layout and the four maps are
/// summed elementwise (pairwise, in direction order, for a fixed rounding
/// pattern).
pub fn scan_merge(seqs: &DirectionalSequences) -> Result<Tensor> {
    let (c, h, w) = (seqs.channels, seqs.h, seqs.w);
    let l = h * w;
    for (dir, s) in seqs.seqs.iter().enumerate() {
        if s.len() != c * l {
            return Err(Error::Contract(format!(
                "scan_merge: direction {dir} has length {}, expected {c}×{h}×{w} = {}",
                s.len(),
                c * l
            )));
        }
    }
    let inv: [Vec<usize>; 4] = std::array::from_fn(|dir| invert_perm(&direction_perm(dir, h, w)));
    let mut out = vec![0.0; c * l];
    for ch in 0..c {
        for j in 0..l {
            let z = |dir: usize| seqs.seqs[dir][ch * l + inv[dir][j]];
            out[ch * l + j] = (z(0) + z(1)) + (z(2) + z(3));
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Differentiable four-direction scan over a channel-last (H·W, C) sequence:
/// expand, selective-scan each direction, fold back, sum. `dirs` holds one
/// projection set per direction, or a single shared set.
pub fn ss2d(
    tape: &mut Tape,
    x: &Tensor,
    h: usize,
    w: usize,
    a_log: &Tensor,
    dirs: &[SelectiveProjections],
) -> Tensor {
    let l = h * w;
    assert_eq!(x.shape()[0], l, "ss2d: {:?} does not have {h}×{w} rows", x.shape());
    assert!(
        dirs.len() == 1 || dirs.len() == DIRECTIONS,
        "ss2d: expected 1 or {DIRECTIONS} projection sets, got {}",
        dirs.len()
    );
    let mut folded = Vec::with_capacity(DIRECTIONS);
    for dir in 0..DIRECTIONS {
        let perm = direction_perm(dir, h, w);
        let inv = Arc::new(invert_perm(&perm));
        let xd = tape.gather_rows(x, Arc::new(perm));
        let p = &dirs[if dirs.len() == 1 { 0 } else { dir }];
        let yd = selective_scan(tape, &xd, a_log, p);
        folded.push(tape.gather_rows(&yd, inv));
    }
    let s01 = tape.add(&folded[0], &folded[1]);
    let s23 = tape.add(&folded[2], &folded[3]);
    tape.add(&s01, &s23)
}

/// Parameters of one vision block over C channels with scan state size N.
#[derive(Clone, Debug)]
pub struct VssParams {
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    /// Gating branch map, (C,C).
    pub w_gate: Tensor,
    /// Scanned branch input map, (C,C).
    pub w_in: Tensor,
    /// Depthwise 3×3 kernel, (C,1,3,3), with per-channel bias.
    pub dw_kernel: Tensor,
    pub dw_bias: Tensor,
    /// Log-magnitude decay parameterization shared by all directions, (C,N).
    pub a_log: Tensor,
    /// One projection set per direction, or a single shared set.
    pub dirs: Vec<SelectiveProjections>,
    pub ln_post_g: Tensor,
    pub ln_post_b: Tensor,
    /// Output map applied after gating, (C,C).
    pub w_out: Tensor,
}

impl VssParams {
    pub fn init(c: usize, n: usize, share_projections: bool, rng: &mut impl Rng) -> VssParams {
        let bound = (6.0 / c as f64).sqrt();
        let mut draw = |count: usize, b: f64| -> Vec<f64> {
            (0..count).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * b).collect()
        };
        let w_gate = Tensor::from_parts(vec![c, c], draw(c * c, bound));
        let w_in = Tensor::from_parts(vec![c, c], draw(c * c, bound));
        let dw_kernel = Tensor::from_parts(vec![c, 1, 3, 3], draw(c * 9, (6.0f64 / 9.0).sqrt()));
        let w_out = Tensor::from_parts(vec![c, c], draw(c * c, bound));
        let a_log = Tensor::from_parts(
            vec![c, n],
            (0..c).flat_map(|_| (0..n).map(|ni| ((ni + 1) as f64).ln())).collect(),
        );
        let count = if share_projections { 1 } else { DIRECTIONS };
        let dirs = (0..count).map(|_| SelectiveProjections::init(c, n, rng)).collect();
        VssParams {
            ln_g: Tensor::full(vec![c], 1.0),
            ln_b: Tensor::zeros(vec![c]),
            w_gate,
            w_in,
            dw_kernel,
            dw_bias: Tensor::zeros(vec![c]),
            a_log,
            dirs,
            ln_post_g: Tensor::full(vec![c], 1.0),
            ln_post_b: Tensor::zeros(vec![c]),
            w_out,
        }
    }

    /// All tensors in a fixed order, with stable field names.
    pub fn fields(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("ln_g".to_string(), self.ln_g.clone()),
            ("ln_b".to_string(), self.ln_b.clone()),
            ("w_gate".to_string(), self.w_gate.clone()),
            ("w_in".to_string(), self.w_in.clone()),
            ("dw_kernel".to_string(), self.dw_kernel.clone()),
            ("dw_bias".to_string(), self.dw_bias.clone()),
            ("a_log".to_string(), self.a_log.clone()),
        ];
        for (i, p) in self.dirs.iter().enumerate() {
            out.push((format!("dir{i}.w_b"), p.w_b.clone()));
            out.push((format!("dir{i}.w_c"), p.w_c.clone()));
            out.push((format!("dir{i}.w_delta"), p.w_delta.clone()));
            out.push((format!("dir{i}.delta_bias"), p.delta_bias.clone()));
        }
        out.push(("ln_post_g".to_string(), self.ln_post_g.clone()));
        out.push(("ln_post_b".to_string(), self.ln_post_b.clone()));
        out.push(("w_out".to_string(), self.w_out.clone()));
        out
    }

    /// Rebuilds the struct from tensors in the exact order `fields` emits.
    pub fn from_fields(tensors: &mut impl Iterator<Item = Tensor>, share_projections: bool) -> VssParams {
        let mut next = || tensors.next().expect("vss params: field stream exhausted");
        let (ln_g, ln_b) = (next(), next());
        let (w_gate, w_in, dw_kernel, dw_bias, a_log) = (next(), next(), next(), next(), next());
        let count = if share_projections { 1 } else { DIRECTIONS };
        let dirs = (0..count)
            .map(|_| SelectiveProjections {
                w_b: next(),
                w_c: next(),
                w_delta: next(),
                delta_bias: next(),
            })
            .collect();
        let (ln_post_g, ln_post_b, w_out) = (next(), next(), next());
        VssParams {
            ln_g,
            ln_b,
            w_gate,
            w_in,
            dw_kernel,
            dw_bias,
            a_log,
            dirs,
            ln_post_g,
            ln_post_b,
            w_out,
        }
    }

    /// Mounts every tensor on a tape.
    pub fn tracked(&self, tape: &mut Tape) -> VssParams {
        let share = self.dirs.len() == 1;
        let mut stream = self.fields().into_iter().map(|(_, t)| tape.leaf(&t)).collect::<Vec<_>>().into_iter();
        VssParams::from_fields(&mut stream, share)
    }
}

/// The gated two-branch block with a residual connection. `x` is channel-last
/// (H,W,C); the output has the same shape.
pub fn vss_block(tape: &mut Tape, x: &Tensor, p: &VssParams) -> Tensor {
    vss_block_core(tape, x, p, &mut |tape, seq, h, w| {
        ss2d(tape, seq, h, w, &p.a_log, &p.dirs)
    })
}

/// Block plumbing with the scan stage injectable, so the gated-MLP reduction
/// (scan = identity) can be checked against a hand-composed oracle.
pub(crate) fn vss_block_core(
    tape: &mut Tape,
    x: &Tensor,
    p: &VssParams,
    scan: &mut dyn FnMut(&mut Tape, &Tensor, usize, usize) -> Tensor,
) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape.len(), 3, "vss_block: expected (H,W,C), got {:?}", shape);
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    assert_eq!(
        p.ln_g.shape(),
        &[c],
        "vss_block: params are for {:?} channels, input has {c}",
        p.ln_g.shape()
    );
    let l = h * w;
    let xs = tape.reshape(x, vec![l, c]);
    let xn = tape.layer_norm(&xs, &p.ln_g, &p.ln_b, 1e-5);

    let gate_lin = tape.linear(&xn, &p.w_gate);
    let gate = tape.silu(&gate_lin);

    let b_lin = tape.linear(&xn, &p.w_in);
    let b_hwc = tape.reshape(&b_lin, vec![h, w, c]);
    let b_chw = tape.permute(&b_hwc, &[2, 0, 1]);
    let b_conv = tape.conv2d(&b_chw, &p.dw_kernel, 1, 1, c);
    let b_conv = tape.add_channel_bias(&b_conv, &p.dw_bias);
    let b_act = tape.silu(&b_conv);
    let b_back = tape.permute(&b_act, &[1, 2, 0]);
    let b_seq = tape.reshape(&b_back, vec![l, c]);

    let scanned = scan(tape, &b_seq, h, w);
    let normed = tape.layer_norm(&scanned, &p.ln_post_g, &p.ln_post_b, 1e-5);

    let fused = tape.mul(&normed, &gate);
    let projected = tape.linear(&fused, &p.w_out);
    let residual = tape.add(&xs, &projected);
    tape.reshape(&residual, vec![h, w, c])
}
