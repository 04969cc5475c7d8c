//! Extended-LSTM sequence cells: a scalar-memory cell with a normalization
//! state (sLSTM) and a matrix-memory cell with query/key/value retrieval
//! (mLSTM), each wrapped in an up-project / gate / down-project block with a
//! residual connection.
//!
//! Gate activations are sigmoid and the candidate path is tanh. The sLSTM
//! hidden state is the gated cell value divided by a running normalizer
//! (clamped at 1e-8); its recurrent maps are block-diagonal with a
//! configurable head count, enforced with a structural mask so off-block
//! entries receive exactly zero gradient. The mLSTM computes its scalar
//! input/forget gates and vector output gate from the current input only,
//! stores a d×d outer-product memory, and normalizes retrieval by
//! max(|nᵀq|, 1).

use rand::Rng;

use crate::autodiff::Tape;
use crate::tensor::Tensor;

/// Up-projection width for the block wrapper: ⌈4·d/3⌉.
pub fn up_width(d: usize) -> usize {
    (4 * d).div_ceil(3)
}

/// Block-diagonal mask with `heads` equal square blocks along the diagonal.
pub fn block_mask(d: usize, heads: usize) -> Tensor {
    assert!(heads >= 1 && d % heads == 0, "width {d} not divisible into {heads} heads");
    let hs = d / heads;
    let mut m = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            if r / hs == c / hs {
                m[r * d + c] = 1.0;
            }
        }
    }
    Tensor::from_parts(vec![d, d], m)
}

fn kaiming(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / cols as f64).sqrt();
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect(),
    )
}

// ---- sLSTM ----

/// Scalar-memory cell parameters over width D, including the block wrapper.
#[derive(Clone, Debug)]
pub struct SlstmParams {
    pub w_z: Tensor,
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    /// Recurrent maps; only the block-diagonal entries are live.
    pub r_z: Tensor,
    pub r_i: Tensor,
    pub r_f: Tensor,
    pub r_o: Tensor,
    pub b_z: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub w_up_left: Tensor,
    pub w_up_right: Tensor,
    pub w_down: Tensor,
    pub heads: usize,
}

/// Cell value, normalizer, and hidden output, each of width D.
#[derive(Clone, Debug)]
pub struct SlstmState {
    pub c: Tensor,
    pub n: Tensor,
    pub h: Tensor,
}

impl SlstmParams {
    pub fn init(d: usize, heads: usize, rng: &mut impl Rng) -> SlstmParams {
        assert!(heads >= 1 && d % heads == 0, "width {d} not divisible into {heads} heads");
        let p = up_width(d);
        let zero = || Tensor::zeros(vec![d]);
        let mask = block_mask(d, heads);
        let mut recurrent = || -> Tensor {
            let full = kaiming(rng, d, d);
            let data =
                full.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect::<Vec<_>>();
            Tensor::from_parts(vec![d, d], data)
        };
        let r_z = recurrent();
        let r_i = recurrent();
        let r_f = recurrent();
        let r_o = recurrent();
        SlstmParams {
            w_z: kaiming(rng, d, d),
            w_i: kaiming(rng, d, d),
            w_f: kaiming(rng, d, d),
            w_o: kaiming(rng, d, d),
            r_z,
            r_i,
            r_f,
            r_o,
            b_z: zero(),
            b_i: zero(),
            b_f: zero(),
            b_o: zero(),
            w_up_left: kaiming(rng, p, d),
            w_up_right: kaiming(rng, p, d),
            w_down: kaiming(rng, d, p),
            heads,
        }
    }

    pub fn fields(&self) -> Vec<(String, Tensor)> {
        [
            ("w_z", &self.w_z),
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_o", &self.w_o),
            ("r_z", &self.r_z),
            ("r_i", &self.r_i),
            ("r_f", &self.r_f),
            ("r_o", &self.r_o),
            ("b_z", &self.b_z),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("up_left", &self.w_up_left),
            ("up_right", &self.w_up_right),
            ("down", &self.w_down),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
    }

    pub fn from_fields(tensors: &mut impl Iterator<Item = Tensor>, heads: usize) -> SlstmParams {
        let mut next = || tensors.next().expect("slstm params: field stream exhausted");
        SlstmParams {
            w_z: next(),
            w_i: next(),
            w_f: next(),
            w_o: next(),
            r_z: next(),
            r_i: next(),
            r_f: next(),
            r_o: next(),
            b_z: next(),
            b_i: next(),
            b_f: next(),
            b_o: next(),
            w_up_left: next(),
            w_up_right: next(),
            w_down: next(),
            heads,
        }
    }

    pub fn tracked(&self, tape: &mut Tape) -> SlstmParams {
        let mut stream =
            self.fields().into_iter().map(|(_, t)| tape.leaf(&t)).collect::<Vec<_>>().into_iter();
        SlstmParams::from_fields(&mut stream, self.heads)
    }
}

/// Zeroed cell/normalizer/hidden state mounted as tape constants.
pub fn slstm_zero_state(tape: &mut Tape, d: usize) -> SlstmState {
    let z = Tensor::zeros(vec![d]);
    SlstmState { c: tape.constant(&z), n: tape.constant(&z), h: tape.constant(&z) }
}

/// The state transition given already-activated gates and candidate:
/// c ← f·c + i·z, n ← f·n + i, h = o·c/max(n, 1e-8). Exposed so forced-gate
/// behavior can be exercised exactly.
pub fn slstm_update(
    tape: &mut Tape,
    i: &Tensor,
    f: &Tensor,
    o: &Tensor,
    z: &Tensor,
    s: &SlstmState,
) -> SlstmState {
    let fc = tape.mul(f, &s.c);
    let iz = tape.mul(i, z);
    let c = tape.add(&fc, &iz);
    let fn_ = tape.mul(f, &s.n);
    let n = tape.add(&fn_, i);
    let guard = tape.clamp_min(&n, 1e-8);
    let ratio = tape.div(&c, &guard);
    let h = tape.mul(o, &ratio);
    SlstmState { c, n, h }
}

fn gate_preact(
    tape: &mut Tape,
    w: &Tensor,
    x: &Tensor,
    r: &Tensor,
    mask: &Tensor,
    h_prev: &Tensor,
    b: &Tensor,
) -> Tensor {
    let wx = tape.matvec(w, x);
    let rm = tape.mul(r, mask);
    let rh = tape.matvec(&rm, h_prev);
    let s = tape.add(&wx, &rh);
    tape.add(&s, b)
}

/// One scalar-memory step: sigmoid gates and tanh candidate from the input
/// and the previous hidden state (through the masked recurrent maps), then
/// the normalized update.
pub fn slstm_step(
    tape: &mut Tape,
    p: &SlstmParams,
    mask: &Tensor,
    s: &SlstmState,
    x_t: &Tensor,
) -> SlstmState {
    let zp = gate_preact(tape, &p.w_z, x_t, &p.r_z, mask, &s.h, &p.b_z);
    let ip = gate_preact(tape, &p.w_i, x_t, &p.r_i, mask, &s.h, &p.b_i);
    let fp = gate_preact(tape, &p.w_f, x_t, &p.r_f, mask, &s.h, &p.b_f);
    let op = gate_preact(tape, &p.w_o, x_t, &p.r_o, mask, &s.h, &p.b_o);
    let z = tape.tanh(&zp);
    let i = tape.sigmoid(&ip);
    let f = tape.sigmoid(&fp);
    let o = tape.sigmoid(&op);
    slstm_update(tape, &i, &f, &o, &z, s)
}

fn projection_wrapper(
    tape: &mut Tape,
    h: &Tensor,
    x: &Tensor,
    up_left: &Tensor,
    up_right: &Tensor,
    down: &Tensor,
) -> Tensor {
    let left = tape.linear(h, up_left);
    let right = tape.linear(h, up_right);
    let gated_right = tape.gelu(&right);
    let gated = tape.mul(&left, &gated_right);
    let y = tape.linear(&gated, down);
    tape.add(&y, x)
}

/// Runs the cell over a (L,D) sequence from zero state and applies the
/// up/gate/down projection with a residual: F_t = W_down(left ⊙ GELU(right)) + x_t.
pub fn slstm_block(tape: &mut Tape, p: &SlstmParams, x: &Tensor) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape.len(), 2, "slstm_block: expected (L,D) sequence, got {:?}", shape);
    let (l, d) = (shape[0], shape[1]);
    assert_eq!(
        p.w_z.shape()[1],
        d,
        "slstm_block: params are for width {}, input has {d}",
        p.w_z.shape()[1]
    );
    let mask_t = block_mask(d, p.heads);
    let mask = tape.constant(&mask_t);
    let mut state = slstm_zero_state(tape, d);
    let mut rows = Vec::with_capacity(l);
    for t in 0..l {
        let xt = tape.row(x, t);
        state = slstm_step(tape, p, &mask, &state, &xt);
        rows.push(state.h.clone());
    }
    let hmat = tape.stack_rows(&rows);
    projection_wrapper(tape, &hmat, x, &p.w_up_left, &p.w_up_right, &p.w_down)
}

// ---- mLSTM ----

/// Matrix-memory cell parameters over width D (inner head width d = D),
/// including the block wrapper. The input and forget gates are scalars, the
/// output gate is a vector.
#[derive(Clone, Debug)]
pub struct MlstmParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub b_q: Tensor,
    pub b_k: Tensor,
    pub b_v: Tensor,
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_up_left: Tensor,
    pub w_up_right: Tensor,
    pub w_down: Tensor,
}

/// Matrix memory (D,D), normalizer vector (D), and hidden output (D).
#[derive(Clone, Debug)]
pub struct MlstmState {
    pub c: Tensor,
    pub n: Tensor,
    pub h: Tensor,
}

impl MlstmParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> MlstmParams {
        let p = up_width(d);
        MlstmParams {
            w_q: kaiming(rng, d, d),
            w_k: kaiming(rng, d, d),
            w_v: kaiming(rng, d, d),
            b_q: Tensor::zeros(vec![d]),
            b_k: Tensor::zeros(vec![d]),
            b_v: Tensor::zeros(vec![d]),
            w_i: kaiming(rng, 1, d),
            b_i: Tensor::zeros(vec![1]),
            w_f: kaiming(rng, 1, d),
            b_f: Tensor::zeros(vec![1]),
            w_o: kaiming(rng, d, d),
            b_o: Tensor::zeros(vec![d]),
            w_up_left: kaiming(rng, p, d),
            w_up_right: kaiming(rng, p, d),
            w_down: kaiming(rng, d, p),
        }
    }

    pub fn fields(&self) -> Vec<(String, Tensor)> {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("b_v", &self.b_v),
            ("w_i", &self.w_i),
            ("b_i", &self.b_i),
            ("w_f", &self.w_f),
            ("b_f", &self.b_f),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("up_left", &self.w_up_left),
            ("up_right", &self.w_up_right),
            ("down", &self.w_down),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
    }

    pub fn from_fields(tensors: &mut impl Iterator<Item = Tensor>) -> MlstmParams {
        let mut next = || tensors.next().expect("mlstm params: field stream exhausted");
        MlstmParams {
            w_q: next(),
            w_k: next(),
            w_v: next(),
            b_q: next(),
            b_k: next(),
            b_v: next(),
            w_i: next(),
            b_i: next(),
            w_f: next(),
            b_f: next(),
            w_o: next(),
            b_o: next(),
            w_up_left: next(),
            w_up_right: next(),
            w_down: next(),
        }
    }

    pub fn tracked(&self, tape: &mut Tape) -> MlstmParams {
        let mut stream =
            self.fields().into_iter().map(|(_, t)| tape.leaf(&t)).collect::<Vec<_>>().into_iter();
        MlstmParams::from_fields(&mut stream)
    }
}

/// Zeroed matrix memory, normalizer, and hidden state as tape constants.
pub fn mlstm_zero_state(tape: &mut Tape, d: usize) -> MlstmState {
    MlstmState {
        c: tape.constant(&Tensor::zeros(vec![d, d])),
        n: tape.constant(&Tensor::zeros(vec![d])),
        h: tape.constant(&Tensor::zeros(vec![d])),
    }
}

/// The matrix-memory transition given activated gates and projections:
/// C ← f·C + i·v kᵀ, n ← f·n + i·k, h = o ⊙ C q / max(|nᵀq|, 1).
/// `i` and `f` are scalars (shape [1]); exposed for exact forced-gate tests.
#[allow(clippy::too_many_arguments)]
pub fn mlstm_update(
    tape: &mut Tape,
    i: &Tensor,
    f: &Tensor,
    o: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    s: &MlstmState,
) -> MlstmState {
    let fc = tape.mul_scalar_t(&s.c, f);
    let vk = tape.outer(v, k);
    let ivk = tape.mul_scalar_t(&vk, i);
    let c = tape.add(&fc, &ivk);
    let fn_ = tape.mul_scalar_t(&s.n, f);
    let ik = tape.mul_scalar_t(k, i);
    let n = tape.add(&fn_, &ik);
    let cq = tape.matvec(&c, q);
    let nq_prod = tape.mul(&n, q);
    let nq = tape.sum(&nq_prod);
    let nq_abs = tape.abs(&nq);
    let denom = tape.clamp_min(&nq_abs, 1.0);
    let scaled = tape.div_scalar_t(&cq, &denom);
    let h = tape.mul(o, &scaled);
    MlstmState { c, n, h }
}

/// One matrix-memory step: q/k/v from the input (keys scaled by 1/√d before
/// the bias), scalar sigmoid input/forget gates and a vector sigmoid output
/// gate from the input only, then the normalized retrieval update.
pub fn mlstm_step(tape: &mut Tape, p: &MlstmParams, s: &MlstmState, x_t: &Tensor) -> MlstmState {
    let d = x_t.shape()[0];
    let qw = tape.matvec(&p.w_q, x_t);
    let q = tape.add(&qw, &p.b_q);
    let kw = tape.matvec(&p.w_k, x_t);
    let ks = tape.scale(&kw, 1.0 / (d as f64).sqrt());
    let k = tape.add(&ks, &p.b_k);
    let vw = tape.matvec(&p.w_v, x_t);
    let v = tape.add(&vw, &p.b_v);
    let ip = tape.matvec(&p.w_i, x_t);
    let ib = tape.add(&ip, &p.b_i);
    let i = tape.sigmoid(&ib);
    let fp = tape.matvec(&p.w_f, x_t);
    let fb = tape.add(&fp, &p.b_f);
    let f = tape.sigmoid(&fb);
    let op = tape.matvec(&p.w_o, x_t);
    let ob = tape.add(&op, &p.b_o);
    let o = tape.sigmoid(&ob);
    mlstm_update(tape, &i, &f, &o, &q, &k, &v, s)
}

/// Runs the matrix-memory cell over a (L,D) sequence from zero state with
/// the same projection/residual wrapper as the scalar-memory block.
pub fn mlstm_block(tape: &mut Tape, p: &MlstmParams, x: &Tensor) -> Tensor {
    let shape = x.shape();
    assert_eq!(shape.len(), 2, "mlstm_block: expected (L,D) sequence, got {:?}", shape);
    let (l, d) = (shape[0], shape[1]);
    assert_eq!(
        p.w_q.shape()[1],
        d,
        "mlstm_block: params are for width {}, input has {d}",
        p.w_q.shape()[1]
    );
    let mut state = mlstm_zero_state(tape, d);
    let mut rows = Vec::with_capacity(l);
    for t in 0..l {
        let xt = tape.row(x, t);
        state = mlstm_step(tape, p, &state, &xt);
        rows.push(state.h.clone());
    }
    let hmat = tape.stack_rows(&rows);
    projection_wrapper(tape, &hmat, x, &p.w_up_left, &p.w_up_right, &p.w_down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gelu, sigmoid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn up_width_is_four_thirds_rounded_up() {
        assert_eq!(up_width(3), 4);
        assert_eq!(up_width(16), 22);
        assert_eq!(up_width(128), 171);
    }

    #[test]
    fn block_mask_marks_square_diagonal_blocks() {
        let m = block_mask(4, 2);
        #[rustfmt::skip]
        let want = vec![
            1.0, 1.0, 0.0, 0.0,
            1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(m.data(), &want[..]);
    }

    #[test]
    fn forced_open_input_gate_writes_the_candidate_exactly() {
        // i = 1, f = 0 collapses the update to c = z, n = 1, h = o·z.
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let d = 5;
        let mut tape = Tape::new();
        let ones = tape.constant(&Tensor::full(vec![d], 1.0));
        let zeros = tape.constant(&Tensor::zeros(vec![d]));
        let o = tape.constant(&Tensor::from_parts(vec![d], rand_vec(&mut rng, d)));
        let z = tape.constant(&Tensor::from_parts(vec![d], rand_vec(&mut rng, d)));
        let prev = SlstmState {
            c: tape.constant(&Tensor::from_parts(vec![d], rand_vec(&mut rng, d))),
            n: tape.constant(&Tensor::from_parts(vec![d], vec![0.3; d])),
            h: tape.constant(&Tensor::zeros(vec![d])),
        };
        let next = slstm_update(&mut tape, &ones, &zeros, &o, &z, &prev);
        for e in 0..d {
            assert_eq!(next.c.data()[e], z.data()[e]);
            assert_eq!(next.n.data()[e], 1.0);
            assert_eq!(next.h.data()[e], o.data()[e] * z.data()[e]);
        }
    }

    #[test]
    fn zero_input_with_zero_history_keeps_candidate_silent() {
        // x = 0, h₀ = 0, zero biases ⇒ z = 0 and the cell only decays:
        // c₁ = f·c₀, h₁ = o·f·c₀/n₁.
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let d = 4;
        let p = SlstmParams::init(d, 2, &mut rng);
        let c0 = rand_vec(&mut rng, d);
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let mask_t = block_mask(d, 2);
        let mask = tape.constant(&mask_t);
        let state = SlstmState {
            c: tape.constant(&Tensor::from_parts(vec![d], c0.clone())),
            n: tape.constant(&Tensor::full(vec![d], 0.5)),
            h: tape.constant(&Tensor::zeros(vec![d])),
        };
        let x = tape.constant(&Tensor::zeros(vec![d]));
        let next = slstm_step(&mut tape, &tp, &mask, &state, &x);
        // biases are zero ⇒ every gate preactivation is 0: i = f = o = 1/2, z = 0
        for e in 0..d {
            let f = 0.5;
            let want_c = f * c0[e];
            let want_n = f * 0.5 + 0.5;
            assert!((next.c.data()[e] - want_c).abs() < 1e-15);
            assert!((next.n.data()[e] - want_n).abs() < 1e-15);
            let want_h = 0.5 * want_c / want_n;
            assert!((next.h.data()[e] - want_h).abs() < 1e-15);
        }
    }

    #[test]
    fn normalizer_stays_in_unit_interval_of_step_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let d = 6;
        let p = SlstmParams::init(d, 3, &mut rng);
        let x = Tensor::from_parts(vec![12, d], rand_vec(&mut rng, 12 * d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let mask_t = block_mask(d, 3);
        let mask = tape.constant(&mask_t);
        let tx = tape.leaf(&x);
        let mut state = slstm_zero_state(&mut tape, d);
        for t in 0..12 {
            let xt = tape.row(&tx, t);
            state = slstm_step(&mut tape, &tp, &mask, &state, &xt);
            for e in 0..d {
                let n = state.n.data()[e];
                assert!(n > 0.0 && n <= (t + 1) as f64, "n = {n} after {} steps", t + 1);
                assert!(state.h.data()[e].is_finite());
            }
        }
    }

    #[test]
    fn slstm_block_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (l, d, heads) = (8, 4, 2);
        let p = SlstmParams::init(d, heads, &mut rng);
        let x = Tensor::from_parts(vec![l, d], rand_vec(&mut rng, l * d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let out = slstm_block(&mut tape, &tp, &tx);

        // plain-f64 replay
        let mask = block_mask(d, heads);
        let mv = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..w.shape()[0])
                .map(|r| (0..d).map(|e| w.data()[r * d + e] * v[e]).sum())
                .collect()
        };
        let mvm = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|r| (0..d).map(|e| w.data()[r * d + e] * mask.data()[r * d + e] * v[e]).sum())
                .collect()
        };
        let mut h = vec![0.0; d];
        let mut c = vec![0.0; d];
        let mut n = vec![0.0; d];
        let mut hs = Vec::new();
        for t in 0..l {
            let xt = &x.data()[t * d..(t + 1) * d];
            let pre = |w: &Tensor, r: &Tensor, b: &Tensor| -> Vec<f64> {
                let wx = mv(w, xt);
                let rh = mvm(r, &h);
                (0..d).map(|e| wx[e] + rh[e] + b.data()[e]).collect()
            };
            let z: Vec<f64> = pre(&p.w_z, &p.r_z, &p.b_z).iter().map(|v| v.tanh()).collect();
            let i: Vec<f64> = pre(&p.w_i, &p.r_i, &p.b_i).iter().map(|v| sigmoid(*v)).collect();
            let f: Vec<f64> = pre(&p.w_f, &p.r_f, &p.b_f).iter().map(|v| sigmoid(*v)).collect();
            let o: Vec<f64> = pre(&p.w_o, &p.r_o, &p.b_o).iter().map(|v| sigmoid(*v)).collect();
            for e in 0..d {
                c[e] = f[e] * c[e] + i[e] * z[e];
                n[e] = f[e] * n[e] + i[e];
                h[e] = o[e] * c[e] / n[e].max(1e-8);
            }
            hs.push(h.clone());
        }
        let up = up_width(d);
        for t in 0..l {
            let left = mv(&p.w_up_left, &hs[t]);
            let right = mv(&p.w_up_right, &hs[t]);
            let gated: Vec<f64> =
                left.iter().zip(&right).map(|(a, b)| a * gelu(*b)).collect();
            for e in 0..d {
                let y: f64 = (0..up).map(|u| p.w_down.data()[e * up + u] * gated[u]).sum();
                let want = y + x.data()[t * d + e];
                let got = out.data()[t * d + e];
                assert!(
                    (got - want).abs() <= 1e-12,
                    "step {t} unit {e}: {got} vs oracle {want}"
                );
            }
        }
    }

    #[test]
    fn zero_projection_weights_make_the_block_an_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let (l, d) = (5, 4);
        let mut p = SlstmParams::init(d, 2, &mut rng);
        p.w_down = Tensor::zeros(vec![d, up_width(d)]);
        let x = Tensor::from_parts(vec![l, d], rand_vec(&mut rng, l * d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let out = slstm_block(&mut tape, &tp, &tx);
        assert_eq!(out.data(), x.data());

        let mut mp = MlstmParams::init(d, &mut rng);
        mp.w_down = Tensor::zeros(vec![d, up_width(d)]);
        let mut tape = Tape::new();
        let tmp = mp.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let out = mlstm_block(&mut tape, &tmp, &tx);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn length_one_block_equals_one_step_plus_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let d = 4;
        let p = SlstmParams::init(d, 2, &mut rng);
        let x = Tensor::from_parts(vec![1, d], rand_vec(&mut rng, d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let block_out = slstm_block(&mut tape, &tp, &tx);

        let mut tape2 = Tape::new();
        let tp2 = p.tracked(&mut tape2);
        let tx2 = tape2.leaf(&x);
        let mask_t = block_mask(d, 2);
        let mask = tape2.constant(&mask_t);
        let s0 = slstm_zero_state(&mut tape2, d);
        let x0 = tape2.row(&tx2, 0);
        let s1 = slstm_step(&mut tape2, &tp2, &mask, &s0, &x0);
        let hmat = tape2.stack_rows(&[s1.h]);
        let manual = projection_wrapper(
            &mut tape2,
            &hmat,
            &tx2,
            &tp2.w_up_left,
            &tp2.w_up_right,
            &tp2.w_down,
        );
        assert_eq!(block_out.data(), manual.data());
    }

    #[test]
    fn rank_one_retrieval_reads_value_times_sign() {
        // f = 0, i = 1 with |kᵀq| ≥ 1: C = v kᵀ, n = k,
        // h = o ⊙ v·(kᵀq)/|kᵀq| = o ⊙ v·sign(kᵀq).
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let d = 4;
        let mut tape = Tape::new();
        let one = tape.constant(&Tensor::full(vec![1], 1.0));
        let zero = tape.constant(&Tensor::zeros(vec![1]));
        let o = tape.constant(&Tensor::from_parts(vec![d], rand_vec(&mut rng, d)));
        let v = tape.constant(&Tensor::from_parts(vec![d], rand_vec(&mut rng, d)));
        // scale q so kᵀq is comfortably beyond the clamp
        let kv = rand_vec(&mut rng, d);
        let qv: Vec<f64> = kv.iter().map(|e| e * 3.0 / kv.iter().map(|a| a * a).sum::<f64>()).collect();
        let kq: f64 = kv.iter().zip(&qv).map(|(a, b)| a * b).sum();
        assert!(kq.abs() >= 1.0);
        let k = tape.constant(&Tensor::from_parts(vec![d], kv.clone()));
        let q = tape.constant(&Tensor::from_parts(vec![d], qv.clone()));
        let s0 = mlstm_zero_state(&mut tape, d);
        let s1 = mlstm_update(&mut tape, &one, &zero, &o, &q, &k, &v, &s0);
        for e in 0..d {
            let want = o.data()[e] * v.data()[e] * kq.signum();
            assert!(
                (s1.h.data()[e] - want).abs() <= 1e-12,
                "unit {e}: {} vs {want}",
                s1.h.data()[e]
            );
            assert_eq!(s1.n.data()[e], kv[e]);
        }
    }

    #[test]
    fn orthogonal_query_activates_the_unit_clamp() {
        let d = 3;
        let mut tape = Tape::new();
        let one = tape.constant(&Tensor::full(vec![1], 1.0));
        let zero = tape.constant(&Tensor::zeros(vec![1]));
        let o = tape.constant(&Tensor::full(vec![d], 1.0));
        let v = tape.constant(&Tensor::from_parts(vec![d], vec![2.0, -1.0, 0.5]));
        let k = tape.constant(&Tensor::from_parts(vec![d], vec![1.0, 0.0, 0.0]));
        let q = tape.constant(&Tensor::from_parts(vec![d], vec![0.0, 5.0, 0.0]));
        let s0 = mlstm_zero_state(&mut tape, d);
        let s1 = mlstm_update(&mut tape, &one, &zero, &o, &q, &k, &v, &s0);
        // n = k ⟂ q ⇒ denominator clamps to 1; C q = v·(kᵀq) = 0
        for e in 0..d {
            assert_eq!(s1.h.data()[e], 0.0);
        }
        // and with a non-orthogonal small product the clamp still pins 1:
        // |nᵀq| = 0.25 < 1
        let q2 = tape.constant(&Tensor::from_parts(vec![d], vec![0.25, 0.0, 0.0]));
        let s2 = mlstm_update(&mut tape, &one, &zero, &o, &q2, &k, &v, &s0);
        for e in 0..d {
            let want = v.data()[e] * 0.25; // C q / 1
            assert!((s2.h.data()[e] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn two_step_run_matches_matrix_update_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let d = 4;
        let p = MlstmParams::init(d, &mut rng);
        let x = Tensor::from_parts(vec![2, d], rand_vec(&mut rng, 2 * d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let mut state = mlstm_zero_state(&mut tape, d);
        let mut got_h = Vec::new();
        for t in 0..2 {
            let xt = tape.row(&tx, t);
            state = mlstm_step(&mut tape, &tp, &state, &xt);
            got_h.push(state.h.to_vec());
        }

        let mv = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..w.shape()[0])
                .map(|r| (0..d).map(|e| w.data()[r * d + e] * v[e]).sum())
                .collect()
        };
        let mut cmat = vec![0.0; d * d];
        let mut nvec = vec![0.0; d];
        for t in 0..2 {
            let xt = &x.data()[t * d..(t + 1) * d];
            let q: Vec<f64> = mv(&p.w_q, xt).iter().zip(p.b_q.data()).map(|(a, b)| a + b).collect();
            let k: Vec<f64> = mv(&p.w_k, xt)
                .iter()
                .map(|a| a / (d as f64).sqrt())
                .zip(p.b_k.data())
                .map(|(a, b)| a + b)
                .collect();
            let v: Vec<f64> = mv(&p.w_v, xt).iter().zip(p.b_v.data()).map(|(a, b)| a + b).collect();
            let i = sigmoid((0..d).map(|e| p.w_i.data()[e] * xt[e]).sum::<f64>() + p.b_i.data()[0]);
            let f = sigmoid((0..d).map(|e| p.w_f.data()[e] * xt[e]).sum::<f64>() + p.b_f.data()[0]);
            let o: Vec<f64> = mv(&p.w_o, xt)
                .iter()
                .zip(p.b_o.data())
                .map(|(a, b)| sigmoid(a + b))
                .collect();
            for r in 0..d {
                for cc in 0..d {
                    cmat[r * d + cc] = f * cmat[r * d + cc] + i * v[r] * k[cc];
                }
                nvec[r] = f * nvec[r] + i * k[r];
            }
            let cq: Vec<f64> =
                (0..d).map(|r| (0..d).map(|cc| cmat[r * d + cc] * q[cc]).sum()).collect();
            let nq: f64 = nvec.iter().zip(&q).map(|(a, b)| a * b).sum();
            let denom = nq.abs().max(1.0);
            for e in 0..d {
                let want = o[e] * cq[e] / denom;
                assert!(
                    (got_h[t][e] - want).abs() <= 1e-12,
                    "step {t} unit {e}: {} vs oracle {want}",
                    got_h[t][e]
                );
            }
        }
    }

    #[test]
    fn matrix_memory_rank_grows_at_most_one_per_step() {
        // Gaussian elimination rank with partial pivoting.
        fn rank(m: &[f64], d: usize, tol: f64) -> usize {
            let mut a = m.to_vec();
            let mut rank = 0;
            let mut row = 0;
            for col in 0..d {
                let (mut best, mut best_abs) = (row, 0.0);
                for r in row..d {
                    let v = a[r * d + col].abs();
                    if v > best_abs {
                        best = r;
                        best_abs = v;
                    }
                }
                if best_abs <= tol {
                    continue;
                }
                for c in 0..d {
                    a.swap(row * d + c, best * d + c);
                }
                for r in (row + 1)..d {
                    let factor = a[r * d + col] / a[row * d + col];
                    for c in col..d {
                        a[r * d + c] -= factor * a[row * d + c];
                    }
                }
                rank += 1;
                row += 1;
                if row == d {
                    break;
                }
            }
            rank
        }

        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let d = 6;
        let p = MlstmParams::init(d, &mut rng);
        let x = Tensor::from_parts(vec![4, d], rand_vec(&mut rng, 4 * d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let mut state = mlstm_zero_state(&mut tape, d);
        for t in 0..4 {
            let xt = tape.row(&tx, t);
            state = mlstm_step(&mut tape, &tp, &state, &xt);
            let r = rank(state.c.data(), d, 1e-9);
            assert!(r <= t + 1, "rank {r} after {} steps", t + 1);
        }
    }

    #[test]
    fn mlstm_block_matches_step_loop_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let (l, d) = (8, 3);
        let p = MlstmParams::init(d, &mut rng);
        let x = Tensor::from_parts(vec![l, d], rand_vec(&mut rng, l * d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let block_out = mlstm_block(&mut tape, &tp, &tx);

        let mut tape2 = Tape::new();
        let tp2 = p.tracked(&mut tape2);
        let tx2 = tape2.leaf(&x);
        let mut state = mlstm_zero_state(&mut tape2, d);
        let mut rows = Vec::new();
        for t in 0..l {
            let xt = tape2.row(&tx2, t);
            state = mlstm_step(&mut tape2, &tp2, &state, &xt);
            rows.push(state.h.clone());
        }
        let hmat = tape2.stack_rows(&rows);
        let manual = projection_wrapper(
            &mut tape2,
            &hmat,
            &tx2,
            &tp2.w_up_left,
            &tp2.w_up_right,
            &tp2.w_down,
        );
        assert_eq!(block_out.data(), manual.data());
    }

    #[test]
    fn off_block_recurrent_entries_receive_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let (l, d, heads) = (4, 4, 2);
        let p = SlstmParams::init(d, heads, &mut rng);
        let x = Tensor::from_parts(vec![l, d], rand_vec(&mut rng, l * d));
        let mut tape = Tape::new();
        let tp = p.tracked(&mut tape);
        let tx = tape.leaf(&x);
        let out = slstm_block(&mut tape, &tp, &tx);
        let loss = tape.sum(&out);
        let grads = tape.backward(&loss).unwrap();
        let mask = block_mask(d, heads);
        for r in [&tp.r_z, &tp.r_i, &tp.r_f, &tp.r_o] {
            let g = grads.wrt(r);
            let mut any_on_block = false;
            for (idx, m) in mask.data().iter().enumerate() {
                if *m == 0.0 {
                    assert_eq!(g[idx], 0.0, "off-block entry {idx} has gradient {}", g[idx]);
                } else if g[idx] != 0.0 {
                    any_on_block = true;
                }
            }
            assert!(any_on_block, "recurrent map received no gradient at all");
        }
    }

    #[test]
    fn both_blocks_pass_finite_difference_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let (l, d, heads) = (4, 4, 2);
        let sp = SlstmParams::init(d, heads, &mut rng);
        let mp = MlstmParams::init(d, &mut rng);
        let x = Tensor::from_parts(vec![l, d], rand_vec(&mut rng, l * d));
        let weights = rand_vec(&mut rng, l * d);
        let hstep = 1e-5;

        enum Which {
            S,
            M,
        }
        for which in [Which::S, Which::M] {
            let plain: Vec<(String, Tensor)> = match which {
                Which::S => sp.fields(),
                Which::M => mp.fields(),
            };
            let eval = |fields: &[(String, Tensor)], xv: &Tensor| -> f64 {
                let mut tape = Tape::new();
                let tx = tape.leaf(xv);
                let mut stream =
                    fields.iter().map(|(_, t)| tape.leaf(t)).collect::<Vec<_>>().into_iter();
                let out = match which {
                    Which::S => {
                        let p = SlstmParams::from_fields(&mut stream, heads);
                        slstm_block(&mut tape, &p, &tx)
                    }
                    Which::M => {
                        let p = MlstmParams::from_fields(&mut stream);
                        mlstm_block(&mut tape, &p, &tx)
                    }
                };
                out.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
            };

            let mut tape = Tape::new();
            let tx = tape.leaf(&x);
            let mut stream =
                plain.iter().map(|(_, t)| tape.leaf(t)).collect::<Vec<_>>().into_iter();
            let (out, tracked): (Tensor, Vec<Tensor>) = match which {
                Which::S => {
                    let p = SlstmParams::from_fields(&mut stream, heads);
                    let t = p.fields().into_iter().map(|(_, t)| t).collect();
                    (slstm_block(&mut tape, &p, &tx), t)
                }
                Which::M => {
                    let p = MlstmParams::from_fields(&mut stream);
                    let t = p.fields().into_iter().map(|(_, t)| t).collect();
                    (mlstm_block(&mut tape, &p, &tx), t)
                }
            };
            let tw = tape.constant(&Tensor::from_parts(vec![l, d], weights.clone()));
            let prod = tape.mul(&out, &tw);
            let loss = tape.sum(&prod);
            let grads = tape.backward(&loss).unwrap();

            let check = |analytic: f64, numeric: f64, what: &str| {
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom <= 1e-4,
                    "{what}: analytic {analytic} vs numeric {numeric}"
                );
            };

            for i in 0..x.numel() {
                let mut plus = x.to_vec();
                plus[i] += hstep;
                let mut minus = x.to_vec();
                minus[i] -= hstep;
                let fp = eval(&plain, &Tensor::from_parts(vec![l, d], plus));
                let fm = eval(&plain, &Tensor::from_parts(vec![l, d], minus));
                check(grads.wrt(&tx)[i], (fp - fm) / (2.0 * hstep), "input");
            }
            for (fi, (name, base)) in plain.iter().enumerate() {
                let count = base.numel();
                let picks: Vec<usize> =
                    if count <= 3 { (0..count).collect() } else { vec![0, count / 2, count - 1] };
                for &i in &picks {
                    let mut pv = base.to_vec();
                    pv[i] += hstep;
                    let mut fplus = plain.clone();
                    fplus[fi].1 = Tensor::from_parts(base.shape().to_vec(), pv.clone());
                    pv[i] -= 2.0 * hstep;
                    let mut fminus = plain.clone();
                    fminus[fi].1 = Tensor::from_parts(base.shape().to_vec(), pv);
                    let fp = eval(&fplus, &x);
                    let fm = eval(&fminus, &x);
                    check(
                        grads.wrt(&tracked[fi])[i],
                        (fp - fm) / (2.0 * hstep),
                        &format!("{name}[{i}]"),
                    );
                }
            }
        }
    }
}
