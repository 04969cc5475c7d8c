//! Central finite-difference verification harness: sweeps every
//! differentiable tape operation with small random instances, then probes
//! the full toy segmentation model, comparing analytic gradients against
//! (f(x+h) − f(x−h)) / 2h elementwise. Used by the `gradcheck` CLI command
//! and the acceptance suite.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::network::{Model, ModelConfig};
use crate::ssm::{selective_scan, SelectiveProjections};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn total_probes(&self) -> usize {
        self.checks.iter().map(|c| c.probes).sum()
    }

    pub fn max_rel(&self) -> f64 {
        self.checks.iter().fold(0.0, |acc, c| acc.max(c.max_rel))
    }

    pub fn passed(&self) -> bool {
        self.max_rel() <= self.tolerance
    }

    /// Aligned human-readable table with a PASS/FAIL summary line.
    pub fn render(&self) -> String {
        let name_width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(4)
            .max("TOTAL".len());
        let mut out = format!("{:<name_width$}  {:>6}  {:>12}\n", "check", "probes", "max rel err");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<name_width$}  {:>6}  {:>12.3e}\n",
                c.name, c.probes, c.max_rel
            ));
        }
        out.push_str(&format!(
            "{:<name_width$}  {:>6}  {:>12.3e}  {} (tolerance {:.0e}, {:.2}s)\n",
            "TOTAL",
            self.total_probes(),
            self.max_rel(),
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.elapsed.as_secs_f64()
        ));
        out
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

struct Harness {
    rng: ChaCha8Rng,
    checks: Vec<CheckResult>,
}

impl Harness {
    /// Uniform draw in ±[lo, hi]: magnitude bounded away from zero so kinked
    /// ops (relu, abs, clamp) are probed off their corners.
    fn signed(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let mag = self.rng.gen_range(lo..hi);
                if self.rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect()
    }

    fn uniform(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    /// Checks ∂(Σ w ⊙ f(inputs))/∂inputs against central differences on
    /// every element of every input.
    fn check(
        &mut self,
        name: &str,
        inputs: &[Tensor],
        f: &dyn Fn(&mut Tape, &[Tensor]) -> Tensor,
    ) {
        // fixed random readout weights make the loss sensitive everywhere
        let probe_out = {
            let mut tape = Tape::new();
            let mounted: Vec<Tensor> = inputs.iter().map(|t| tape.constant(t)).collect();
            f(&mut tape, &mounted)
        };
        let weights =
            Tensor::from_parts(probe_out.shape().to_vec(), self.uniform(probe_out.numel(), -1.0, 1.0));

        let eval = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let mounted: Vec<Tensor> = vals.iter().map(|t| tape.constant(t)).collect();
            let y = f(&mut tape, &mounted);
            let w = tape.constant(&weights);
            let prod = tape.mul(&y, &w);
            tape.sum(&prod).item()
        };

        let mut tape = Tape::new();
        let mounted: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let y = f(&mut tape, &mounted);
        let w = tape.constant(&weights);
        let prod = tape.mul(&y, &w);
        let loss = tape.sum(&prod);
        let grads = tape.backward(&loss).unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));

        let mut probes = 0;
        let mut max_rel: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(&mounted[i]);
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                let mut pv = input.to_vec();
                pv[j] += FD_STEP;
                plus[i] = Tensor::from_parts(input.shape().to_vec(), pv.clone());
                pv[j] -= 2.0 * FD_STEP;
                minus[i] = Tensor::from_parts(input.shape().to_vec(), pv);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                max_rel = max_rel.max(rel_err(analytic[j], numeric));
                probes += 1;
            }
        }
        self.checks.push(CheckResult { name: name.to_string(), probes, max_rel });
    }
}

fn sweep_ops(h: &mut Harness) {
    let pair = |h: &mut Harness| -> Vec<Tensor> {
        vec![
            Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.5)),
            Tensor::from_parts(vec![2, 3], h.signed(6, 0.5, 1.5)),
        ]
    };

    let two = pair(h);
    h.check("add", &two, &|t, v| t.add(&v[0], &v[1]));
    let two = pair(h);
    h.check("sub", &two, &|t, v| t.sub(&v[0], &v[1]));
    let two = pair(h);
    h.check("mul", &two, &|t, v| t.mul(&v[0], &v[1]));
    let two = pair(h);
    h.check("div", &two, &|t, v| t.div(&v[0], &v[1]));

    let one = vec![Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.5))];
    h.check("add_scalar", &one, &|t, v| t.add_scalar(&v[0], 0.7));
    let one = vec![Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.5))];
    h.check("scale", &one, &|t, v| t.scale(&v[0], -1.3));
    let one = vec![Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.5))];
    h.check("neg", &one, &|t, v| t.neg(&v[0]));

    let scaled = vec![
        Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.5)),
        Tensor::from_parts(vec![1], h.signed(1, 0.5, 1.5)),
    ];
    h.check("mul_scalar_t", &scaled, &|t, v| t.mul_scalar_t(&v[0], &v[1]));
    let scaled = vec![
        Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.5)),
        Tensor::from_parts(vec![1], h.signed(1, 0.5, 1.5)),
    ];
    h.check("div_scalar_t", &scaled, &|t, v| t.div_scalar_t(&v[0], &v[1]));

    let mm = vec![
        Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.2)),
        Tensor::from_parts(vec![3, 4], h.signed(12, 0.2, 1.2)),
    ];
    h.check("matmul", &mm, &|t, v| t.matmul(&v[0], &v[1]));
    let mv = vec![
        Tensor::from_parts(vec![3, 4], h.signed(12, 0.2, 1.2)),
        Tensor::from_parts(vec![4], h.signed(4, 0.2, 1.2)),
    ];
    h.check("matvec", &mv, &|t, v| t.matvec(&v[0], &v[1]));
    let lin = vec![
        Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.2)),
        Tensor::from_parts(vec![4, 3], h.signed(12, 0.2, 1.2)),
    ];
    h.check("linear", &lin, &|t, v| t.linear(&v[0], &v[1]));
    let ou = vec![
        Tensor::from_parts(vec![3], h.signed(3, 0.2, 1.2)),
        Tensor::from_parts(vec![4], h.signed(4, 0.2, 1.2)),
    ];
    h.check("outer", &ou, &|t, v| t.outer(&v[0], &v[1]));

    let rb = vec![
        Tensor::from_parts(vec![3, 4], h.signed(12, 0.2, 1.2)),
        Tensor::from_parts(vec![4], h.signed(4, 0.2, 1.2)),
    ];
    h.check("add_row_bias", &rb, &|t, v| t.add_row_bias(&v[0], &v[1]));
    let cb = vec![
        Tensor::from_parts(vec![2, 3, 3], h.signed(18, 0.2, 1.2)),
        Tensor::from_parts(vec![2], h.signed(2, 0.2, 1.2)),
    ];
    h.check("add_channel_bias", &cb, &|t, v| t.add_channel_bias(&v[0], &v[1]));

    for (name, f) in [
        ("sigmoid", (|t, v| t.sigmoid(&v[0])) as fn(&mut Tape, &[Tensor]) -> Tensor),
        ("tanh", |t, v| t.tanh(&v[0])),
        ("silu", |t, v| t.silu(&v[0])),
        ("gelu", |t, v| t.gelu(&v[0])),
        ("softplus", |t, v| t.softplus(&v[0])),
    ] {
        let x = vec![Tensor::from_parts(vec![2, 4], h.signed(8, 0.1, 2.0))];
        h.check(name, &x, &f);
    }

    // kinked ops: inputs kept ≥ 0.2 away from their corners
    let x = vec![Tensor::from_parts(vec![2, 4], h.signed(8, 0.2, 1.5))];
    h.check("relu", &x, &|t, v| t.relu(&v[0]));
    let x = vec![Tensor::from_parts(vec![2, 4], h.signed(8, 0.2, 1.5))];
    h.check("abs", &x, &|t, v| t.abs(&v[0]));
    let x = vec![Tensor::from_parts(vec![2, 4], h.uniform(8, 0.3, 2.0))];
    h.check("ln", &x, &|t, v| t.ln(&v[0]));
    let x = vec![Tensor::from_parts(vec![2, 4], h.signed(8, 0.75, 1.5))];
    h.check("clamp_min", &x, &|t, v| t.clamp_min(&v[0], 0.5));
    let x = vec![Tensor::from_parts(vec![2, 4], h.signed(8, 0.2, 0.6))];
    h.check("clamp", &x, &|t, v| t.clamp(&v[0], -0.8, 0.8));

    let x = vec![Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.2))];
    h.check("sum", &x, &|t, v| t.sum(&v[0]));
    let x = vec![Tensor::from_parts(vec![2, 3], h.signed(6, 0.2, 1.2))];
    h.check("mean", &x, &|t, v| t.mean(&v[0]));
    let x = vec![Tensor::from_parts(vec![2, 6], h.signed(12, 0.2, 1.2))];
    h.check("reshape", &x, &|t, v| t.reshape(&v[0], vec![3, 4]));
    let x = vec![Tensor::from_parts(vec![2, 3, 4], h.signed(24, 0.2, 1.2))];
    h.check("permute", &x, &|t, v| t.permute(&v[0], &[2, 0, 1]));
    let x = vec![Tensor::from_parts(vec![4, 3], h.signed(12, 0.2, 1.2))];
    h.check("gather_rows", &x, &|t, v| {
        t.gather_rows(&v[0], Arc::new(vec![2, 0, 3, 1]))
    });
    let x = vec![Tensor::from_parts(vec![3, 4], h.signed(12, 0.2, 1.2))];
    h.check("row", &x, &|t, v| t.row(&v[0], 1));
    let x = vec![Tensor::from_parts(vec![3, 4], h.signed(12, 0.2, 1.2))];
    h.check("stack_rows", &x, &|t, v| {
        let rows: Vec<Tensor> = (0..3).map(|r| t.row(&v[0], r)).collect();
        t.stack_rows(&rows)
    });

    let ln_in = vec![
        Tensor::from_parts(vec![3, 5], h.signed(15, 0.2, 1.5)),
        Tensor::from_parts(vec![5], h.uniform(5, 0.5, 1.5)),
        Tensor::from_parts(vec![5], h.signed(5, 0.1, 0.8)),
    ];
    h.check("layer_norm", &ln_in, &|t, v| t.layer_norm(&v[0], &v[1], &v[2], 1e-5));

    let conv = vec![
        Tensor::from_parts(vec![2, 5, 5], h.signed(50, 0.2, 1.2)),
        Tensor::from_parts(vec![3, 2, 3, 3], h.signed(54, 0.2, 1.2)),
    ];
    h.check("conv2d", &conv, &|t, v| t.conv2d(&v[0], &v[1], 1, 1, 1));
    let grouped = vec![
        Tensor::from_parts(vec![4, 4, 4], h.signed(64, 0.2, 1.2)),
        Tensor::from_parts(vec![4, 2, 2, 2], h.signed(32, 0.2, 1.2)),
    ];
    h.check("conv2d (grouped s2)", &grouped, &|t, v| t.conv2d(&v[0], &v[1], 2, 0, 2));
    let deconv = vec![
        Tensor::from_parts(vec![2, 3, 3], h.signed(18, 0.2, 1.2)),
        Tensor::from_parts(vec![2, 3, 2, 2], h.signed(24, 0.2, 1.2)),
    ];
    h.check("conv_transpose2d", &deconv, &|t, v| t.conv_transpose2d(&v[0], &v[1], 2));
    let pool = vec![Tensor::from_parts(vec![2, 4, 4], h.signed(32, 0.2, 1.2))];
    h.check("avg_pool2d", &pool, &|t, v| t.avg_pool2d(&v[0], 2));

    // fused selective scan over all six parameter tensors
    let (l, d, n) = (5, 3, 2);
    let scan_in = vec![
        Tensor::from_parts(vec![l, d], h.signed(l * d, 0.2, 1.2)),
        Tensor::from_parts(vec![d, n], h.uniform(d * n, -1.0, 0.5)),
        Tensor::from_parts(vec![n, d], h.signed(n * d, 0.2, 1.0)),
        Tensor::from_parts(vec![n, d], h.signed(n * d, 0.2, 1.0)),
        Tensor::from_parts(vec![d, d], h.signed(d * d, 0.2, 1.0)),
        Tensor::from_parts(vec![d], h.signed(d, 0.2, 1.0)),
    ];
    h.check("selective_scan", &scan_in, &|t, v| {
        let p = SelectiveProjections {
            w_b: v[2].clone(),
            w_c: v[3].clone(),
            w_delta: v[4].clone(),
            delta_bias: v[5].clone(),
        };
        selective_scan(t, &v[0], &v[1], &p)
    });
}

/// Probes the full toy segmentation model: a spread of parameter elements
/// across every registered tensor plus a patch of input pixels.
fn sweep_model(h: &mut Harness, params_per_tensor: usize, input_probes: usize) {
    let model = Model::new(ModelConfig::toy(), 20_24).expect("toy config is valid");
    let x = Tensor::from_parts(vec![1, 32, 32], h.uniform(32 * 32, 0.0, 1.0));
    let weights = Tensor::from_parts(vec![1, 32, 32], h.uniform(32 * 32, -1.0, 1.0));

    let eval = |m: &Model, input: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let mounted = m.mount(&mut tape);
        let tx = tape.constant(input);
        let y = m.forward(&mut tape, &mounted, &tx);
        let w = tape.constant(&weights);
        let prod = tape.mul(&y, &w);
        tape.sum(&prod).item()
    };

    let mut tape = Tape::new();
    let mounted = model.mount(&mut tape);
    let tx = tape.leaf(&x);
    let y = model.forward(&mut tape, &mounted, &tx);
    let w = tape.constant(&weights);
    let prod = tape.mul(&y, &w);
    let loss = tape.sum(&prod);
    let grads = tape.backward(&loss).expect("model backward");

    let mut probes = 0;
    let mut max_rel: f64 = 0.0;

    for pi in 0..model.params().len() {
        let base = model.params().value(pi).clone();
        let count = base.numel();
        for k in 0..params_per_tensor.min(count) {
            // deterministic spread over the tensor
            let j = k * count / params_per_tensor.min(count);
            let mut plus = model.clone();
            let mut v = base.to_vec();
            v[j] += FD_STEP;
            *plus.params_mut().value_mut(pi) = Tensor::from_parts(base.shape().to_vec(), v.clone());
            let mut minus = model.clone();
            v[j] -= 2.0 * FD_STEP;
            *minus.params_mut().value_mut(pi) = Tensor::from_parts(base.shape().to_vec(), v);
            let numeric = (eval(&plus, &x) - eval(&minus, &x)) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(grads.wrt(&mounted[pi])[j], numeric));
            probes += 1;
        }
    }
    h.checks.push(CheckResult {
        name: "full model: parameters".to_string(),
        probes,
        max_rel,
    });

    let mut probes = 0;
    let mut max_rel: f64 = 0.0;
    let xg = grads.wrt(&tx);
    for k in 0..input_probes {
        let j = k * x.numel() / input_probes;
        let mut v = x.to_vec();
        v[j] += FD_STEP;
        let plus = eval(&model, &Tensor::from_parts(x.shape().to_vec(), v.clone()));
        v[j] -= 2.0 * FD_STEP;
        let minus = eval(&model, &Tensor::from_parts(x.shape().to_vec(), v));
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(xg[j], numeric));
        probes += 1;
    }
    h.checks.push(CheckResult {
        name: "full model: input pixels".to_string(),
        probes,
        max_rel,
    });
}

/// Runs the complete suite: every op, then the toy model with two probes
/// per parameter tensor and a spread of input pixels.
pub fn run_gradcheck(seed: u64) -> GradcheckReport {
    let start = Instant::now();
    let mut h = Harness { rng: ChaCha8Rng::seed_from_u64(seed), checks: Vec::new() };
    sweep_ops(&mut h);
    sweep_model(&mut h, 2, 24);
    GradcheckReport {
        checks: h.checks,
        tolerance: DEFAULT_TOLERANCE,
        elapsed: start.elapsed(),
    }
}
