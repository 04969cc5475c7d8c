//! State-space sequence models: zero-order-hold discretization, the
//! time-invariant recurrent and convolutional scan forms, and the
//! input-dependent (selective) scan used inside the vision blocks.
//!
//! The time-invariant API works on a single input channel with a diagonal
//! state matrix of size `n`. The selective scan runs `d` channels at once,
//! each with its own diagonal row of `A`, while the per-step projections
//! `B_t`, `C_t` (shared across channels) and the per-channel step size
//! `Δ_t = softplus(W_Δ·x_t + Δ_bias)` are derived from the input. State
//! transitions use `Ā_t = exp(Δ_t·A)`; the input injection uses the
//! first-order rule `B̄_t = Δ_t·B_t`. With `A = −exp(A_log)` every mode
//! decays, so zero-input trajectories are non-expanding.

use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::math::{softplus, softplus_inv};
use crate::tensor::Tensor;

/// Continuous-time single-channel system: diagonal state matrix `a` and
/// input vector `b`, both of length `n`. The readout row is passed to the
/// scans separately.
#[derive(Clone, Debug)]
pub struct ContinuousSsm {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ContinuousSsm {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> ContinuousSsm {
        assert_eq!(a.len(), b.len(), "state dims differ: A has {}, B has {}", a.len(), b.len());
        ContinuousSsm { a, b }
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }
}

/// Discrete-time system produced by discretization.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
}

impl DiscreteSsm {
    /// One state update h ← Ā·h + B̄·x.
    pub fn step(&self, h: &mut [f64], x: f64) {
        for ((hv, ab), bb) in h.iter_mut().zip(&self.a_bar).zip(&self.b_bar) {
            *hv = ab * *hv + bb * x;
        }
    }
}

/// Zero-order-hold discretization: Ā = exp(Δa), B̄ = (exp(Δa) − 1)/a · b,
/// with the analytic limit Δ·b as a → 0.
pub fn discretize(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    if delta <= 0.0 {
        return Err(Error::Domain(format!("discretize: step size must be positive, got {delta}")));
    }
    let n = ssm.state_dim();
    let mut a_bar = Vec::with_capacity(n);
    let mut b_bar = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (ssm.a[i], ssm.b[i]);
        a_bar.push((delta * a).exp());
        b_bar.push(if a == 0.0 { delta * b } else { (delta * a).exp_m1() / a * b });
    }
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// First-order discretization used by the selective path: Ā = exp(Δa) but
/// B̄ = Δ·b. Provided so the time-invariant degeneration of the selective
/// scan can be expressed with the same rule.
pub fn discretize_first_order(ssm: &ContinuousSsm, delta: f64) -> Result<DiscreteSsm> {
    if delta <= 0.0 {
        return Err(Error::Domain(format!("discretize: step size must be positive, got {delta}")));
    }
    let a_bar = ssm.a.iter().map(|a| (delta * a).exp()).collect();
    let b_bar = ssm.b.iter().map(|b| delta * b).collect();
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// Runs the recurrence h_t = Ā·h_{t−1} + B̄·x_t, y_t = c·h_t from h₀ = 0.
pub fn scan_recurrent(d: &DiscreteSsm, c: &[f64], x: &[f64]) -> Vec<f64> {
    assert_eq!(
        c.len(),
        d.a_bar.len(),
        "readout width {} does not match state dim {}",
        c.len(),
        d.a_bar.len()
    );
    let mut h = vec![0.0; d.a_bar.len()];
    let mut y = Vec::with_capacity(x.len());
    for &xt in x {
        d.step(&mut h, xt);
        y.push(c.iter().zip(&h).map(|(ci, hi)| ci * hi).sum());
    }
    y
}

/// The length-L response kernel (c·B̄, c·ĀB̄, …, c·Ā^{L−1}B̄).
#[derive(Clone, Debug)]
pub struct ScanKernel {
    pub k_bar: Vec<f64>,
}

pub fn materialize_kernel(d: &DiscreteSsm, c: &[f64], len: usize) -> ScanKernel {
    assert_eq!(
        c.len(),
        d.a_bar.len(),
        "readout width {} does not match state dim {}",
        c.len(),
        d.a_bar.len()
    );
    let mut v = d.b_bar.clone();
    let mut k_bar = Vec::with_capacity(len);
    for _ in 0..len {
        k_bar.push(c.iter().zip(&v).map(|(ci, vi)| ci * vi).sum());
        for (vi, ai) in v.iter_mut().zip(&d.a_bar) {
            *vi *= ai;
        }
    }
    ScanKernel { k_bar }
}

/// Causal correlation of the input with a materialized kernel; equivalent to
/// the recurrent scan for time-invariant systems.
pub fn scan_convolutional(kernel: &ScanKernel, x: &[f64]) -> Result<Vec<f64>> {
    if kernel.k_bar.len() != x.len() {
        return Err(Error::Contract(format!(
            "scan_convolutional: kernel length {} does not match input length {}",
            kernel.k_bar.len(),
            x.len()
        )));
    }
    let l = x.len();
    let mut y = vec![0.0; l];
    for t in 0..l {
        let mut acc = 0.0;
        for s in 0..=t {
            acc += kernel.k_bar[s] * x[t - s];
        }
        y[t] = acc;
    }
    Ok(y)
}

// ---- selective (input-dependent) scan ----

/// The learned input-dependent projections of a selective scan over `d`
/// channels with state size `n`: `w_b`/`w_c` are (n,d) maps producing the
/// per-step input/readout vectors, `w_delta` is a (d,d) map and `delta_bias`
/// a (d) offset feeding softplus to produce strictly positive step sizes.
#[derive(Clone, Debug)]
pub struct SelectiveProjections {
    pub w_b: Tensor,
    pub w_c: Tensor,
    pub w_delta: Tensor,
    pub delta_bias: Tensor,
}

impl SelectiveProjections {
    /// Kaiming-uniform maps; the bias is drawn so the initial step sizes
    /// softplus(delta_bias) land log-uniformly in [1e-3, 1e-1].
    pub fn init(d: usize, n: usize, rng: &mut impl Rng) -> SelectiveProjections {
        let bound = (6.0 / d as f64).sqrt();
        let mut draw = |count: usize| -> Vec<f64> {
            (0..count).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect()
        };
        let w_b = Tensor::from_parts(vec![n, d], draw(n * d));
        let w_c = Tensor::from_parts(vec![n, d], draw(n * d));
        let w_delta = Tensor::from_parts(vec![d, d], draw(d * d));
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let delta_bias = Tensor::from_parts(
            vec![d],
            (0..d).map(|_| softplus_inv((lo + rng.gen::<f64>() * (hi - lo)).exp())).collect(),
        );
        SelectiveProjections { w_b, w_c, w_delta, delta_bias }
    }

    /// Mounts all four maps on a tape.
    pub fn tracked(&self, tape: &mut Tape) -> SelectiveProjections {
        SelectiveProjections {
            w_b: tape.leaf(&self.w_b),
            w_c: tape.leaf(&self.w_c),
            w_delta: tape.leaf(&self.w_delta),
            delta_bias: tape.leaf(&self.delta_bias),
        }
    }
}

/// Differentiable selective scan over a tracked input of shape (len,d) or
/// (batch,len,d); `a_log` is the (d,n) log-magnitude parameterization of the
/// decay modes, shared by all steps.
pub fn selective_scan(
    tape: &mut Tape,
    x: &Tensor,
    a_log: &Tensor,
    p: &SelectiveProjections,
) -> Tensor {
    tape.selective_scan(x, a_log, &p.w_b, &p.w_c, &p.w_delta, &p.delta_bias)
}

/// Per-step projected scan parameters for one sequence: `b`/`c` are (len,n)
/// and `delta` is (len,d), laid out row-major.
#[derive(Clone, Debug)]
pub struct ScanSteps {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Applies the three projections to one (len,d) sequence.
pub fn project_inputs(
    x: &[f64],
    len: usize,
    d: usize,
    n: usize,
    p: &SelectiveProjections,
) -> ScanSteps {
    assert_eq!(x.len(), len * d, "input length {} does not match {len}×{d}", x.len());
    let mut steps =
        ScanSteps { b: vec![0.0; len * n], c: vec![0.0; len * n], delta: vec![0.0; len * d] };
    project_into(
        x,
        len,
        d,
        n,
        p.w_b.data(),
        p.w_c.data(),
        p.w_delta.data(),
        p.delta_bias.data(),
        &mut steps.b,
        &mut steps.c,
        &mut steps.delta,
    );
    steps
}

/// Runs the selective recurrence on one (len,d) sequence with externally
/// supplied per-step parameters. Freezing the steps to constants makes this
/// the time-invariant model per channel.
pub fn scan_steps(x: &[f64], len: usize, d: usize, a_log: &[f64], steps: &ScanSteps) -> Vec<f64> {
    let n = a_log.len() / d;
    assert_eq!(a_log.len(), d * n, "a_log length {} is not a multiple of {d}", a_log.len());
    assert_eq!(steps.b.len(), len * n, "step b length {} != {len}×{n}", steps.b.len());
    assert_eq!(steps.c.len(), len * n, "step c length {} != {len}×{n}", steps.c.len());
    assert_eq!(steps.delta.len(), len * d, "step delta length {} != {len}×{d}", steps.delta.len());
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    let mut y = vec![0.0; len * d];
    let mut h = vec![0.0; d * n];
    let mut abar = vec![0.0; d * n];
    scan_core_one(
        x,
        len,
        d,
        n,
        &a,
        &steps.b,
        &steps.c,
        &steps.delta,
        &mut h,
        &mut abar,
        &mut y,
        None,
        None,
    );
    y
}

// ---- kernels shared with the tape operation ----

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanShape {
    pub batch: usize,
    pub len: usize,
    pub d: usize,
    pub n: usize,
}

/// Forward intermediates retained for the backward pass.
pub(crate) struct ScanSaved {
    /// States, (batch, len, d, n).
    h: Vec<f64>,
    /// Per-step transition factors exp(Δ·a), (batch, len, d, n).
    abar: Vec<f64>,
    /// Projected input vectors, (batch, len, n).
    bt: Vec<f64>,
    /// Projected readout vectors, (batch, len, n).
    ct: Vec<f64>,
    /// Step sizes after softplus, (batch, len, d).
    delta: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn project_into(
    x: &[f64],
    len: usize,
    d: usize,
    n: usize,
    w_b: &[f64],
    w_c: &[f64],
    w_delta: &[f64],
    delta_bias: &[f64],
    bt: &mut [f64],
    ct: &mut [f64],
    delta: &mut [f64],
) {
    for t in 0..len {
        let xt = &x[t * d..(t + 1) * d];
        for ni in 0..n {
            let wb_row = &w_b[ni * d..(ni + 1) * d];
            let wc_row = &w_c[ni * d..(ni + 1) * d];
            bt[t * n + ni] = xt.iter().zip(wb_row).map(|(a, b)| a * b).sum();
            ct[t * n + ni] = xt.iter().zip(wc_row).map(|(a, b)| a * b).sum();
        }
        for di in 0..d {
            let wd_row = &w_delta[di * d..(di + 1) * d];
            let u: f64 =
                xt.iter().zip(wd_row).map(|(a, b)| a * b).sum::<f64>() + delta_bias[di];
            delta[t * d + di] = softplus(u);
        }
    }
}

/// The sequential recurrence for one sequence; optionally records states and
/// transition factors into caller-provided (len,d,n) buffers.
#[allow(clippy::too_many_arguments)]
fn scan_core_one(
    x: &[f64],
    len: usize,
    d: usize,
    n: usize,
    a: &[f64],
    bt: &[f64],
    ct: &[f64],
    delta: &[f64],
    h: &mut [f64],
    abar_t: &mut [f64],
    y: &mut [f64],
    mut h_log: Option<&mut [f64]>,
    mut abar_log: Option<&mut [f64]>,
) {
    for t in 0..len {
        let xt = &x[t * d..(t + 1) * d];
        let btt = &bt[t * n..(t + 1) * n];
        let ctt = &ct[t * n..(t + 1) * n];
        for di in 0..d {
            let dt = delta[t * d + di];
            let xd = xt[di] * dt;
            let hrow = &mut h[di * n..(di + 1) * n];
            let arow = &a[di * n..(di + 1) * n];
            let abrow = &mut abar_t[di * n..(di + 1) * n];
            let mut acc = 0.0;
            for ni in 0..n {
                let ab = (dt * arow[ni]).exp();
                abrow[ni] = ab;
                hrow[ni] = ab * hrow[ni] + xd * btt[ni];
                acc += ctt[ni] * hrow[ni];
            }
            y[t * d + di] = acc;
        }
        if let Some(log) = h_log.as_deref_mut() {
            log[t * d * n..(t + 1) * d * n].copy_from_slice(h);
        }
        if let Some(log) = abar_log.as_deref_mut() {
            log[t * d * n..(t + 1) * d * n].copy_from_slice(abar_t);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_forward(
    shape: ScanShape,
    x: &[f64],
    a_log: &[f64],
    w_b: &[f64],
    w_c: &[f64],
    w_delta: &[f64],
    delta_bias: &[f64],
) -> (Vec<f64>, ScanSaved) {
    let ScanShape { batch, len, d, n } = shape;
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    let mut y = vec![0.0; batch * len * d];
    let mut saved = ScanSaved {
        h: vec![0.0; batch * len * d * n],
        abar: vec![0.0; batch * len * d * n],
        bt: vec![0.0; batch * len * n],
        ct: vec![0.0; batch * len * n],
        delta: vec![0.0; batch * len * d],
    };
    let mut h = vec![0.0; d * n];
    let mut abar = vec![0.0; d * n];
    for b in 0..batch {
        let xb = &x[b * len * d..(b + 1) * len * d];
        let (bt, ct, delta) = (
            &mut saved.bt[b * len * n..(b + 1) * len * n],
            &mut saved.ct[b * len * n..(b + 1) * len * n],
            &mut saved.delta[b * len * d..(b + 1) * len * d],
        );
        project_into(xb, len, d, n, w_b, w_c, w_delta, delta_bias, bt, ct, delta);
        h.iter_mut().for_each(|v| *v = 0.0);
        scan_core_one(
            xb,
            len,
            d,
            n,
            &a,
            bt,
            ct,
            delta,
            &mut h,
            &mut abar,
            &mut y[b * len * d..(b + 1) * len * d],
            Some(&mut saved.h[b * len * d * n..(b + 1) * len * d * n]),
            Some(&mut saved.abar[b * len * d * n..(b + 1) * len * d * n]),
        );
    }
    (y, saved)
}

pub(crate) struct ScanGrads {
    pub x: Vec<f64>,
    pub a_log: Vec<f64>,
    pub w_b: Vec<f64>,
    pub w_c: Vec<f64>,
    pub w_delta: Vec<f64>,
    pub delta_bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    shape: ScanShape,
    x: &[f64],
    a_log: &[f64],
    w_b: &[f64],
    w_c: &[f64],
    w_delta: &[f64],
    saved: &ScanSaved,
    grad_y: &[f64],
) -> ScanGrads {
    let ScanShape { batch, len, d, n } = shape;
    let a: Vec<f64> = a_log.iter().map(|v| -v.exp()).collect();
    let mut g = ScanGrads {
        x: vec![0.0; batch * len * d],
        a_log: vec![0.0; d * n],
        w_b: vec![0.0; n * d],
        w_c: vec![0.0; n * d],
        w_delta: vec![0.0; d * d],
        delta_bias: vec![0.0; d],
    };
    let mut da = vec![0.0; d * n];
    let mut lam = vec![0.0; d * n];
    let mut dbt = vec![0.0; n];
    let mut dct = vec![0.0; n];
    let mut ddelta = vec![0.0; d];
    let mut du = vec![0.0; d];
    for b in 0..batch {
        lam.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..len).rev() {
            let base = (b * len + t) * d;
            let xt = &x[base..base + d];
            let gt = &grad_y[base..base + d];
            let bt = &saved.bt[(b * len + t) * n..(b * len + t + 1) * n];
            let ct = &saved.ct[(b * len + t) * n..(b * len + t + 1) * n];
            let delta_t = &saved.delta[base..base + d];
            let ht = &saved.h[base * n..(base + d) * n];
            let abar_t = &saved.abar[base * n..(base + d) * n];
            let h_prev = if t > 0 { Some(&saved.h[(base - d) * n..base * n]) } else { None };

            dbt.iter_mut().for_each(|v| *v = 0.0);
            dct.iter_mut().for_each(|v| *v = 0.0);
            ddelta.iter_mut().for_each(|v| *v = 0.0);

            for di in 0..d {
                let gd = gt[di];
                let dt = delta_t[di];
                let xd = xt[di];
                let lrow = &mut lam[di * n..(di + 1) * n];
                let hrow = &ht[di * n..(di + 1) * n];
                let abrow = &abar_t[di * n..(di + 1) * n];
                let arow = &a[di * n..(di + 1) * n];
                let mut ddelta_d = 0.0;
                let mut dx_direct = 0.0;
                for ni in 0..n {
                    // Readout y_t = Σ c_t[n]·h_t[·,n].
                    dct[ni] += gd * hrow[ni];
                    let l = lrow[ni] + gd * ct[ni];
                    // Transition h_t = Ā_t·h_{t−1} + Δ_t·B_t·x_t.
                    let hp = match h_prev {
                        Some(hp) => hp[di * n + ni],
                        None => 0.0,
                    };
                    let through_a = l * hp * abrow[ni];
                    ddelta_d += through_a * arow[ni] + l * bt[ni] * xd;
                    da[di * n + ni] += through_a * dt;
                    dbt[ni] += l * dt * xd;
                    dx_direct += l * dt * bt[ni];
                    lrow[ni] = l * abrow[ni];
                }
                ddelta[di] = ddelta_d;
                g.x[base + di] += dx_direct;
                // Δ = softplus(u) ⇒ dΔ/du = σ(u) = 1 − exp(−Δ).
                du[di] = ddelta_d * (1.0 - (-dt).exp());
            }

            for di in 0..d {
                let dud = du[di];
                if dud != 0.0 {
                    g.delta_bias[di] += dud;
                    let wrow = &w_delta[di * d..(di + 1) * d];
                    for e in 0..d {
                        g.w_delta[di * d + e] += dud * xt[e];
                        g.x[base + e] += dud * wrow[e];
                    }
                }
            }
            for ni in 0..n {
                let (db, dc) = (dbt[ni], dct[ni]);
                let wb_row = &w_b[ni * d..(ni + 1) * d];
                let wc_row = &w_c[ni * d..(ni + 1) * d];
                for e in 0..d {
                    g.w_b[ni * d + e] += db * xt[e];
                    g.w_c[ni * d + e] += dc * xt[e];
                    g.x[base + e] += db * wb_row[e] + dc * wc_row[e];
                }
            }
        }
    }
    for i in 0..d * n {
        g.a_log[i] = da[i] * a[i];
    }
    g
}
