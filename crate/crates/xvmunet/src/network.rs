//! The full segmentation network: a patch-embedded encoder of gated
//! vision-scan stages with stride-2 downsampling, an LSTM pass (plus
//! optional scalar- and matrix-memory blocks) over the bottleneck sequence,
//! a learnable weighted fusion of the two bottleneck streams, and a decoder
//! that mirrors the encoder with transposed-conv upsampling and additive
//! skip connections, ending in a 1-channel logits head.
//!
//! All parameters live in a flat named registry (`ParamSet`); a forward pass
//! mounts them onto a tape and rebuilds the typed parameter views by index,
//! so the optimizer, checkpointing, and autodiff all see one consistent
//! ordering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vss::{vss_block, VssParams};
use crate::xlstm::{mlstm_block, slstm_block, MlstmParams, SlstmParams};

/// How the two bottleneck streams are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// α, β are learnable scalars (initialized to 0.5).
    Learned,
    /// α = β = 0.5, frozen.
    Fixed,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: (usize, usize),
    pub in_channels: usize,
    /// Channel width per encoder stage; the last entry is the bottleneck.
    pub widths: Vec<usize>,
    /// Gated vision blocks per stage.
    pub blocks: Vec<usize>,
    /// Scan state size N.
    pub state_dim: usize,
    pub use_slstm: bool,
    pub use_mlstm: bool,
    pub fusion: FusionMode,
    /// One projection set shared by all four scan directions instead of
    /// per-direction sets.
    pub share_scan_projections: bool,
    pub slstm_heads: usize,
}

impl Default for ModelConfig {
    /// Desk-scale default: 64×64 single-channel input, four stages.
    fn default() -> ModelConfig {
        ModelConfig {
            resolution: (64, 64),
            in_channels: 1,
            widths: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            state_dim: 8,
            use_slstm: true,
            use_mlstm: true,
            fusion: FusionMode::Learned,
            share_scan_projections: false,
            slstm_heads: 4,
        }
    }
}

impl ModelConfig {
    /// Minimal two-stage configuration for fast gradient checking.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            resolution: (32, 32),
            in_channels: 1,
            widths: vec![8, 16],
            blocks: vec![1, 1],
            state_dim: 4,
            use_slstm: true,
            use_mlstm: true,
            fusion: FusionMode::Learned,
            share_scan_projections: false,
            slstm_heads: 4,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        let stages = self.stages();
        if stages == 0 {
            return Err(Error::Config("widths must name at least one stage".into()));
        }
        if self.blocks.len() != stages {
            return Err(Error::Config(format!(
                "blocks has {} entries for {} stages",
                self.blocks.len(),
                stages
            )));
        }
        let divisor = 1usize << (stages + 1);
        if h == 0 || w == 0 || h % divisor != 0 || w % divisor != 0 {
            return Err(Error::Config(format!(
                "resolution {h}×{w} is not divisible by 2^(stages+1) = {divisor}"
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be ≥ 1".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be ≥ 1".into()));
        }
        if self.widths.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage widths must be ≥ 1".into()));
        }
        let bottleneck = *self.widths.last().unwrap();
        if self.use_slstm && (self.slstm_heads == 0 || bottleneck % self.slstm_heads != 0) {
            return Err(Error::Config(format!(
                "bottleneck width {bottleneck} is not divisible into {} heads",
                self.slstm_heads
            )));
        }
        Ok(())
    }

    /// (h, w, c) of every stage's feature map (before downsampling); the
    /// last entry is the bottleneck.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = self.resolution;
        h /= 4;
        w /= 4;
        let mut out = Vec::with_capacity(self.stages());
        for (s, &c) in self.widths.iter().enumerate() {
            if s > 0 {
                h /= 2;
                w /= 2;
            }
            out.push((h, w, c));
        }
        out
    }
}

// ---- parameter registry ----

/// Flat, ordered registry of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Mounts every entry on a tape as a gradient leaf, in registry order.
    pub fn mount(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| tape.leaf(t)).collect()
    }
}

// ---- bottleneck gate parameters ----

/// Plain LSTM gate maps applied to the bottleneck sequence: input maps W,
/// recurrent maps U, and biases b for the input/forget/output gates and the
/// candidate.
#[derive(Clone, Debug)]
pub struct XlstmGateParams {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
    pub w_g: Tensor,
    pub u_g: Tensor,
    pub b_g: Tensor,
}

impl XlstmGateParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> XlstmGateParams {
        let bound = (6.0 / d as f64).sqrt();
        let mut mat = || -> Tensor {
            Tensor::from_parts(
                vec![d, d],
                (0..d * d).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect(),
            )
        };
        let w_i = mat();
        let u_i = mat();
        let w_f = mat();
        let u_f = mat();
        let w_o = mat();
        let u_o = mat();
        let w_g = mat();
        let u_g = mat();
        let zero = || Tensor::zeros(vec![d]);
        XlstmGateParams {
            w_i,
            u_i,
            b_i: zero(),
            w_f,
            u_f,
            b_f: zero(),
            w_o,
            u_o,
            b_o: zero(),
            w_g,
            u_g,
            b_g: zero(),
        }
    }

    pub fn fields(&self) -> Vec<(String, Tensor)> {
        [
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("b_i", &self.b_i),
            ("w_f", &self.w_f),
            ("u_f", &self.u_f),
            ("b_f", &self.b_f),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
            ("b_o", &self.b_o),
            ("w_g", &self.w_g),
            ("u_g", &self.u_g),
            ("b_g", &self.b_g),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
    }

    pub fn from_fields(tensors: &mut impl Iterator<Item = Tensor>) -> XlstmGateParams {
        let mut next = || tensors.next().expect("gate params: field stream exhausted");
        XlstmGateParams {
            w_i: next(),
            u_i: next(),
            b_i: next(),
            w_f: next(),
            u_f: next(),
            b_f: next(),
            w_o: next(),
            u_o: next(),
            b_o: next(),
            w_g: next(),
            u_g: next(),
            b_g: next(),
        }
    }
}

/// Runs the gate recurrence over a (L,D) sequence from zero state:
/// i, f, o = σ(W·x + U·h + b), g = tanh(W_g·x + U_g·h + b_g),
/// c ← f ⊙ c + i ⊙ g, h = o ⊙ tanh(c). Returns the stacked hidden rows.
pub(crate) fn lstm_pass(tape: &mut Tape, p: &XlstmGateParams, seq: &Tensor) -> Tensor {
    let (l, d) = (seq.shape()[0], seq.shape()[1]);
    assert_eq!(
        p.w_i.shape()[1],
        d,
        "lstm_pass: params are for width {}, sequence has {d}",
        p.w_i.shape()[1]
    );
    let zeros = Tensor::zeros(vec![d]);
    let mut c = tape.constant(&zeros);
    let mut h = tape.constant(&zeros);
    let mut rows = Vec::with_capacity(l);
    for t in 0..l {
        let xt = tape.row(seq, t);
        let gate = |tape: &mut Tape, w: &Tensor, u: &Tensor, b: &Tensor| -> Tensor {
            let wx = tape.matvec(w, &xt);
            let uh = tape.matvec(u, &h);
            let s = tape.add(&wx, &uh);
            tape.add(&s, b)
        };
        let ip = gate(tape, &p.w_i, &p.u_i, &p.b_i);
        let fp = gate(tape, &p.w_f, &p.u_f, &p.b_f);
        let op = gate(tape, &p.w_o, &p.u_o, &p.b_o);
        let gp = gate(tape, &p.w_g, &p.u_g, &p.b_g);
        let i = tape.sigmoid(&ip);
        let f = tape.sigmoid(&fp);
        let o = tape.sigmoid(&op);
        let g = tape.tanh(&gp);
        let fc = tape.mul(&f, &c);
        let ig = tape.mul(&i, &g);
        c = tape.add(&fc, &ig);
        let tc = tape.tanh(&c);
        h = tape.mul(&o, &tc);
        rows.push(h.clone());
    }
    tape.stack_rows(&rows)
}

// ---- layout conversions ----

/// (h,w,c) view of a channel-first (c,h,w) map.
pub fn chw_to_hwc(tape: &mut Tape, f: &Tensor) -> Tensor {
    tape.permute(f, &[1, 2, 0])
}

/// (c,h,w) view of a channel-last (h,w,c) map.
pub fn hwc_to_chw(tape: &mut Tape, f: &Tensor) -> Tensor {
    tape.permute(f, &[2, 0, 1])
}

/// Row-major flattening of a channel-last (h,w,c) map into an (h·w, c)
/// sequence.
pub fn to_sequence(tape: &mut Tape, f: &Tensor) -> Tensor {
    let shape = f.shape();
    assert_eq!(shape.len(), 3, "to_sequence: expected (h,w,c), got {:?}", shape);
    tape.reshape(f, vec![shape[0] * shape[1], shape[2]])
}

/// Inverse of `to_sequence`; the sequence length must equal h·w.
pub fn from_sequence(tape: &mut Tape, seq: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let shape = seq.shape();
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::Contract(format!(
            "from_sequence: sequence shape {:?} does not fold into {h}×{w}",
            shape
        )));
    }
    Ok(tape.reshape(seq, vec![h, w, shape[1]]))
}

/// Weighted sum of two equal-shape feature maps: α·a + β·b, with scalar
/// (shape [1]) weights.
pub fn fuse(tape: &mut Tape, a: &Tensor, b: &Tensor, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "fuse: stream shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let wa = tape.mul_scalar_t(a, alpha);
    let wb = tape.mul_scalar_t(b, beta);
    Ok(tape.add(&wa, &wb))
}

// ---- the model ----

#[derive(Clone, Debug)]
struct Layout {
    patch: (usize, usize),
    enc: Vec<Vec<(usize, usize)>>,
    down: Vec<(usize, usize)>,
    gates: (usize, usize),
    slstm: Option<(usize, usize)>,
    mlstm: Option<(usize, usize)>,
    fusion: Option<(usize, usize)>,
    up: Vec<(usize, usize)>,
    dec: Vec<Vec<(usize, usize)>>,
    head: [usize; 6],
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

const HEAD_WIDTH: usize = 8;

fn conv_kernel(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let bound = (6.0 / (c_in * k * k) as f64).sqrt();
    Tensor::from_parts(
        vec![c_out, c_in, k, k],
        (0..c_out * c_in * k * k).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect(),
    )
}

fn deconv_kernel(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize) -> Tensor {
    let bound = (6.0 / (c_in * k * k) as f64).sqrt();
    Tensor::from_parts(
        vec![c_in, c_out, k, k],
        (0..c_in * c_out * k * k).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect(),
    )
}

impl Model {
    /// Builds a model with freshly initialized parameters drawn from a
    /// seeded stream; the draw order is fixed, so equal seeds give equal
    /// parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let stages = config.stages();
        let n = config.state_dim;
        let share = config.share_scan_projections;

        let patch_k = params.push("patch.k", conv_kernel(&mut rng, config.widths[0], config.in_channels, 4));
        let patch_b = params.push("patch.b", Tensor::zeros(vec![config.widths[0]]));

        let mut enc = Vec::with_capacity(stages);
        let mut down = Vec::with_capacity(stages.saturating_sub(1));
        for s in 0..stages {
            let c = config.widths[s];
            let mut stage_blocks = Vec::with_capacity(config.blocks[s]);
            for b in 0..config.blocks[s] {
                let vp = VssParams::init(c, n, share, &mut rng);
                let fields = vp.fields();
                let start = params.len();
                for (fname, t) in fields {
                    params.push(format!("enc{s}.blk{b}.{fname}"), t);
                }
                stage_blocks.push((start, params.len() - start));
            }
            enc.push(stage_blocks);
            if s + 1 < stages {
                let k = params.push(
                    format!("down{s}.k"),
                    conv_kernel(&mut rng, config.widths[s + 1], c, 2),
                );
                let bias = params.push(format!("down{s}.b"), Tensor::zeros(vec![config.widths[s + 1]]));
                down.push((k, bias));
            }
        }

        let d = *config.widths.last().unwrap();
        let gates_start = params.len();
        for (fname, t) in XlstmGateParams::init(d, &mut rng).fields() {
            params.push(format!("lstm.{fname}"), t);
        }
        let gates = (gates_start, params.len() - gates_start);

        let slstm = if config.use_slstm {
            let start = params.len();
            for (fname, t) in SlstmParams::init(d, config.slstm_heads, &mut rng).fields() {
                params.push(format!("slstm.{fname}"), t);
            }
            Some((start, params.len() - start))
        } else {
            None
        };
        let mlstm = if config.use_mlstm {
            let start = params.len();
            for (fname, t) in MlstmParams::init(d, &mut rng).fields() {
                params.push(format!("mlstm.{fname}"), t);
            }
            Some((start, params.len() - start))
        } else {
            None
        };

        let fusion = match config.fusion {
            FusionMode::Learned => {
                let a = params.push("fuse.alpha", Tensor::full(vec![1], 0.5));
                let b = params.push("fuse.beta", Tensor::full(vec![1], 0.5));
                Some((a, b))
            }
            FusionMode::Fixed => None,
        };

        let mut up = Vec::with_capacity(stages.saturating_sub(1));
        let mut dec = Vec::with_capacity(stages.saturating_sub(1));
        for j in 0..stages.saturating_sub(1) {
            let s = stages - 2 - j;
            let (c_in, c_out) = (config.widths[s + 1], config.widths[s]);
            let k = params.push(format!("up{s}.k"), deconv_kernel(&mut rng, c_in, c_out, 2));
            let bias = params.push(format!("up{s}.b"), Tensor::zeros(vec![c_out]));
            up.push((k, bias));
            let mut stage_blocks = Vec::with_capacity(config.blocks[s]);
            for b in 0..config.blocks[s] {
                let vp = VssParams::init(c_out, n, share, &mut rng);
                let start = params.len();
                for (fname, t) in vp.fields() {
                    params.push(format!("dec{s}.blk{b}.{fname}"), t);
                }
                stage_blocks.push((start, params.len() - start));
            }
            dec.push(stage_blocks);
        }

        let w0 = config.widths[0];
        let head = [
            params.push("head.up.k", deconv_kernel(&mut rng, w0, HEAD_WIDTH, 4)),
            params.push("head.up.b", Tensor::zeros(vec![HEAD_WIDTH])),
            params.push("head.mix.k", conv_kernel(&mut rng, HEAD_WIDTH, HEAD_WIDTH, 3)),
            params.push("head.mix.b", Tensor::zeros(vec![HEAD_WIDTH])),
            params.push("head.out.k", conv_kernel(&mut rng, 1, HEAD_WIDTH, 1)),
            params.push("head.out.b", Tensor::zeros(vec![1])),
        ];

        Ok(Model {
            config,
            params,
            layout: Layout {
                patch: (patch_k, patch_b),
                enc,
                down,
                gates,
                slstm,
                mlstm,
                fusion,
                up,
                dec,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Mounts all parameters on a tape; the result aligns with registry
    /// indices and is what the forward methods consume.
    pub fn mount(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.params.mount(tape)
    }

    fn vss_at(&self, mounted: &[Tensor], range: (usize, usize)) -> VssParams {
        let mut stream = mounted[range.0..range.0 + range.1].iter().cloned();
        VssParams::from_fields(&mut stream, self.config.share_scan_projections)
    }

    /// Patch embedding followed by the encoder stages. Returns the per-stage
    /// channel-last feature maps (before downsampling) for the skip path and
    /// the bottleneck map; the bottleneck equals the last stage entry.
    pub fn encode(&self, tape: &mut Tape, mounted: &[Tensor], x: &Tensor) -> (Vec<Tensor>, Tensor) {
        let (h, w) = self.config.resolution;
        assert_eq!(
            x.shape(),
            &[self.config.in_channels, h, w],
            "encode: input shape {:?} does not match configured {}×{h}×{w}",
            x.shape(),
            self.config.in_channels
        );
        let (pk, pb) = self.layout.patch;
        let conv = tape.conv2d(x, &mounted[pk], 4, 0, 1);
        let biased = tape.add_channel_bias(&conv, &mounted[pb]);
        let embedded = tape.relu(&biased);
        let mut f = chw_to_hwc(tape, &embedded);

        let stages = self.config.stages();
        let mut stage_maps = Vec::with_capacity(stages);
        for s in 0..stages {
            for range in &self.layout.enc[s] {
                let p = self.vss_at(mounted, *range);
                f = vss_block(tape, &f, &p);
            }
            stage_maps.push(f.clone());
            if s + 1 < stages {
                let (dk, db) = self.layout.down[s];
                let chw = hwc_to_chw(tape, &f);
                let conv = tape.conv2d(&chw, &mounted[dk], 2, 0, 1);
                let biased = tape.add_channel_bias(&conv, &mounted[db]);
                let act = tape.relu(&biased);
                f = chw_to_hwc(tape, &act);
            }
        }
        let bottleneck = stage_maps.last().unwrap().clone();
        (stage_maps, bottleneck)
    }

    /// Flattens the bottleneck map to a sequence, runs the gate recurrence
    /// and the optional scalar-/matrix-memory blocks, and folds back to a
    /// map of the same shape.
    pub fn bottleneck_pass(&self, tape: &mut Tape, mounted: &[Tensor], f: &Tensor) -> Tensor {
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let mut seq = to_sequence(tape, f);
        let (gs, gc) = self.layout.gates;
        let mut stream = mounted[gs..gs + gc].iter().cloned();
        let gates = XlstmGateParams::from_fields(&mut stream);
        seq = lstm_pass(tape, &gates, &seq);
        if let Some((start, count)) = self.layout.slstm {
            let mut stream = mounted[start..start + count].iter().cloned();
            let p = SlstmParams::from_fields(&mut stream, self.config.slstm_heads);
            seq = slstm_block(tape, &p, &seq);
        }
        if let Some((start, count)) = self.layout.mlstm {
            let mut stream = mounted[start..start + count].iter().cloned();
            let p = MlstmParams::from_fields(&mut stream);
            seq = mlstm_block(tape, &p, &seq);
        }
        from_sequence(tape, &seq, h, w).expect("bottleneck sequence length is h·w by construction")
    }

    /// The fusion weights: mounted learnable scalars, or frozen 0.5/0.5
    /// constants in fixed mode.
    pub fn fusion_weights(&self, tape: &mut Tape, mounted: &[Tensor]) -> (Tensor, Tensor) {
        match self.layout.fusion {
            Some((a, b)) => (mounted[a].clone(), mounted[b].clone()),
            None => {
                let half = Tensor::full(vec![1], 0.5);
                (tape.constant(&half), tape.constant(&half))
            }
        }
    }

    /// Decoder: per stage, 2× transposed-conv upsampling, additive skip,
    /// then the stage's vision blocks; finally the three-layer logits head.
    pub fn decode(
        &self,
        tape: &mut Tape,
        mounted: &[Tensor],
        fused: &Tensor,
        skips: &[Tensor],
    ) -> Tensor {
        self.decode_traced(tape, mounted, fused, skips).0
    }

    pub(crate) fn decode_traced(
        &self,
        tape: &mut Tape,
        mounted: &[Tensor],
        fused: &Tensor,
        skips: &[Tensor],
    ) -> (Tensor, Vec<Tensor>) {
        let stages = self.config.stages();
        let mut f = fused.clone();
        let mut trace = Vec::with_capacity(stages.saturating_sub(1));
        for j in 0..stages.saturating_sub(1) {
            let s = stages - 2 - j;
            let (uk, ub) = self.layout.up[j];
            let chw = hwc_to_chw(tape, &f);
            let upsampled = tape.conv_transpose2d(&chw, &mounted[uk], 2);
            let biased = tape.add_channel_bias(&upsampled, &mounted[ub]);
            let hwc = chw_to_hwc(tape, &biased);
            f = tape.add(&hwc, &skips[s]);
            for range in &self.layout.dec[j] {
                let p = self.vss_at(mounted, *range);
                f = vss_block(tape, &f, &p);
            }
            trace.push(f.clone());
        }
        let [upk, upb, mixk, mixb, outk, outb] = self.layout.head;
        let chw = hwc_to_chw(tape, &f);
        let up = tape.conv_transpose2d(&chw, &mounted[upk], 4);
        let up = tape.add_channel_bias(&up, &mounted[upb]);
        let up = tape.relu(&up);
        let mix = tape.conv2d(&up, &mounted[mixk], 1, 1, 1);
        let mix = tape.add_channel_bias(&mix, &mounted[mixb]);
        let mix = tape.relu(&mix);
        let out = tape.conv2d(&mix, &mounted[outk], 1, 0, 1);
        let logits = tape.add_channel_bias(&out, &mounted[outb]);
        (logits, trace)
    }

    /// Full forward pass: encode, bottleneck sequence processing, weighted
    /// fusion, decode. Input is (in_channels, H, W); output is 1×H×W logits
    /// (no sigmoid — the loss applies it).
    pub fn forward(&self, tape: &mut Tape, mounted: &[Tensor], x: &Tensor) -> Tensor {
        let (skips, bottleneck) = self.encode(tape, mounted, x);
        let processed = self.bottleneck_pass(tape, mounted, &bottleneck);
        let (alpha, beta) = self.fusion_weights(tape, mounted);
        let fused = fuse(tape, &bottleneck, &processed, &alpha, &beta)
            .expect("fusion streams share the bottleneck shape by construction");
        self.decode(tape, mounted, &fused, &skips)
    }

    /// Convenience single-input forward on a throwaway tape.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mounted = self.mount(&mut tape);
        let tx = tape.constant(x);
        self.forward(&mut tape, &mounted, &tx)
    }

    /// Registry indices of the fusion scalars, when learnable.
    pub fn fusion_indices(&self) -> Option<(usize, usize)> {
        self.layout.fusion
    }

    /// Overwrites one named parameter (checkpoint restore); the shape must
    /// match the registered tensor exactly.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("checkpoint tensor {name} has no slot in this model")))?;
        let expected = self.params.value(idx).shape();
        if expected != value.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor {name}: shape {:?} does not match model slot {:?}",
                value.shape(),
                expected
            )));
        }
        *self.params.value_mut(idx) = value.clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn stage_shapes_follow_stride_arithmetic() {
        let big = ModelConfig {
            resolution: (256, 256),
            in_channels: 3,
            widths: vec![32, 64, 128, 256],
            blocks: vec![2, 2, 2, 2],
            ..ModelConfig::default()
        };
        assert_eq!(
            big.stage_shapes(),
            vec![(64, 64, 32), (32, 32, 64), (16, 16, 128), (8, 8, 256)]
        );
        let toy = ModelConfig {
            resolution: (64, 64),
            widths: vec![8, 16],
            blocks: vec![1, 1],
            ..ModelConfig::default()
        };
        assert_eq!(toy.stage_shapes(), vec![(16, 16, 8), (8, 8, 16)]);
    }

    #[test]
    fn validate_rejects_indivisible_resolution() {
        let bad = ModelConfig { resolution: (50, 64), ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad_heads = ModelConfig { slstm_heads: 5, ..ModelConfig::default() };
        assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn sequence_flattening_is_row_major_and_roundtrips() {
        let mut tape = Tape::new();
        let f = Tensor::from_parts(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let tf = tape.leaf(&f);
        let seq = to_sequence(&mut tape, &tf);
        assert_eq!(seq.shape(), &[4, 1]);
        assert_eq!(seq.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = from_sequence(&mut tape, &seq, 2, 2).unwrap();
        assert_eq!(back.shape(), f.shape());
        assert_eq!(back.data(), f.data());

        let err = from_sequence(&mut tape, &seq, 3, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn fuse_endpoints_select_streams_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let a = Tensor::from_parts(vec![2, 3], rand_vec(&mut rng, 6));
        let b = Tensor::from_parts(vec![2, 3], rand_vec(&mut rng, 6));
        let mut tape = Tape::new();
        let (ta, tb) = (tape.leaf(&a), tape.leaf(&b));
        let one = tape.constant(&Tensor::full(vec![1], 1.0));
        let zero = tape.constant(&Tensor::zeros(vec![1]));
        let half = tape.constant(&Tensor::full(vec![1], 0.5));

        let only_a = fuse(&mut tape, &ta, &tb, &one, &zero).unwrap();
        assert_eq!(only_a.data(), a.data());
        let only_b = fuse(&mut tape, &ta, &tb, &zero, &one).unwrap();
        assert_eq!(only_b.data(), b.data());
        let same = fuse(&mut tape, &ta, &ta, &half, &half).unwrap();
        assert_eq!(same.data(), a.data());

        let c = tape.leaf(&Tensor::zeros(vec![3, 2]));
        let err = fuse(&mut tape, &ta, &c, &one, &zero).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn encoder_produces_documented_shapes_with_finite_values() {
        let cfg = ModelConfig {
            resolution: (64, 64),
            widths: vec![8, 16],
            blocks: vec![1, 1],
            state_dim: 4,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let x = Tensor::from_parts(vec![1, 64, 64], rand_vec(&mut rng, 64 * 64));
        let mut tape = Tape::new();
        let mounted = model.mount(&mut tape);
        let tx = tape.constant(&x);
        let (stages, bottleneck) = model.encode(&mut tape, &mounted, &tx);
        assert_eq!(stages.len(), 2);
        assert_eq!(stages[0].shape(), &[16, 16, 8]);
        assert_eq!(stages[1].shape(), &[8, 8, 16]);
        assert_eq!(bottleneck.shape(), &[8, 8, 16]);
        for s in &stages {
            assert!(s.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn closed_gates_silence_the_bottleneck_stream() {
        // Zero W/U everywhere, b_o very negative, b_g = 0: every hidden row
        // is o·tanh(c) with o ≈ 0.
        let cfg = ModelConfig {
            use_slstm: false,
            use_mlstm: false,
            ..ModelConfig::toy()
        };
        let mut model = Model::new(cfg, 7).unwrap();
        for i in 0..model.params().len() {
            let name = model.params().name(i).to_string();
            if let Some(field) = name.strip_prefix("lstm.") {
                let shape = model.params().value(i).shape().to_vec();
                let value = match field {
                    "b_o" => Tensor::full(shape, -40.0),
                    _ => Tensor::zeros(shape),
                };
                *model.params_mut().value_mut(i) = value;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let f = Tensor::from_parts(vec![4, 4, 16], rand_vec(&mut rng, 256));
        let mut tape = Tape::new();
        let mounted = model.mount(&mut tape);
        let tf = tape.constant(&f);
        let out = model.bottleneck_pass(&mut tape, &mounted, &tf);
        for v in out.data() {
            assert!(v.abs() <= 1e-15, "hidden output {v} not silenced");
        }
    }

    #[test]
    fn single_step_gate_pass_matches_hand_math() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let d = 6;
        let p = XlstmGateParams::init(d, &mut rng);
        let x = Tensor::from_parts(vec![1, d], rand_vec(&mut rng, d));
        let mut tape = Tape::new();
        let mut stream = p.fields().into_iter().map(|(_, t)| tape.leaf(&t)).collect::<Vec<_>>().into_iter();
        let tp = XlstmGateParams::from_fields(&mut stream);
        let tx = tape.leaf(&x);
        let out = lstm_pass(&mut tape, &tp, &tx);
        let xt = x.data();
        for e in 0..d {
            let dot = |w: &Tensor| -> f64 { (0..d).map(|j| w.data()[e * d + j] * xt[j]).sum() };
            let i = sigmoid(dot(&p.w_i));
            let f_ = sigmoid(dot(&p.w_f));
            let o = sigmoid(dot(&p.w_o));
            let g = dot(&p.w_g).tanh();
            let c = f_ * 0.0 + i * g;
            let want = o * c.tanh();
            assert!(
                (out.data()[e] - want).abs() <= 1e-12,
                "unit {e}: {} vs {want}",
                out.data()[e]
            );
        }
    }

    #[test]
    fn gate_pass_matches_scalar_loop_oracle_over_a_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let d = 5;
        let l = 16; // a 4×4 map flattened
        let p = XlstmGateParams::init(d, &mut rng);
        let x = Tensor::from_parts(vec![l, d], rand_vec(&mut rng, l * d));
        let mut tape = Tape::new();
        let mut stream = p.fields().into_iter().map(|(_, t)| tape.leaf(&t)).collect::<Vec<_>>().into_iter();
        let tp = XlstmGateParams::from_fields(&mut stream);
        let tx = tape.leaf(&x);
        let out = lstm_pass(&mut tape, &tp, &tx);

        let mv = |w: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..d).map(|r| (0..d).map(|e| w.data()[r * d + e] * v[e]).sum()).collect()
        };
        let mut c = vec![0.0; d];
        let mut h = vec![0.0; d];
        for t in 0..l {
            let xt = &x.data()[t * d..(t + 1) * d];
            let pre = |w: &Tensor, u: &Tensor, b: &Tensor| -> Vec<f64> {
                let wx = mv(w, xt);
                let uh = mv(u, &h);
                (0..d).map(|e| wx[e] + uh[e] + b.data()[e]).collect()
            };
            let i: Vec<f64> = pre(&p.w_i, &p.u_i, &p.b_i).iter().map(|v| sigmoid(*v)).collect();
            let f: Vec<f64> = pre(&p.w_f, &p.u_f, &p.b_f).iter().map(|v| sigmoid(*v)).collect();
            let o: Vec<f64> = pre(&p.w_o, &p.u_o, &p.b_o).iter().map(|v| sigmoid(*v)).collect();
            let g: Vec<f64> = pre(&p.w_g, &p.u_g, &p.b_g).iter().map(|v| v.tanh()).collect();
            for e in 0..d {
                c[e] = f[e] * c[e] + i[e] * g[e];
                h[e] = o[e] * c[e].tanh();
            }
            for e in 0..d {
                assert!(
                    (out.data()[t * d + e] - h[e]).abs() <= 1e-12,
                    "step {t} unit {e}: {} vs oracle {}",
                    out.data()[t * d + e],
                    h[e]
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_correct() {
        let model = Model::new(ModelConfig::toy(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let x = Tensor::from_parts(vec![1, 32, 32], rand_vec(&mut rng, 32 * 32));
        let a = model.infer(&x);
        let b = model.infer(&x);
        assert_eq!(a.shape(), &[1, 32, 32]);
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_eq!(a.data(), b.data(), "two identical forwards diverged");
    }

    #[test]
    fn every_cell_combination_builds_and_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let x = Tensor::from_parts(vec![1, 32, 32], rand_vec(&mut rng, 32 * 32));
        for (use_s, use_m) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = ModelConfig { use_slstm: use_s, use_mlstm: use_m, ..ModelConfig::toy() };
            let model = Model::new(cfg, 17).unwrap();
            let y = model.infer(&x);
            assert_eq!(y.shape(), &[1, 32, 32]);
            assert!(y.data().iter().all(|v| v.is_finite()), "slstm={use_s} mlstm={use_m}");
        }
    }

    #[test]
    fn plain_variant_forward_equals_manual_stage_composition() {
        let cfg = ModelConfig { use_slstm: false, use_mlstm: false, ..ModelConfig::toy() };
        let model = Model::new(cfg, 19).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(115);
        let x = Tensor::from_parts(vec![1, 32, 32], rand_vec(&mut rng, 32 * 32));

        let mut tape = Tape::new();
        let mounted = model.mount(&mut tape);
        let tx = tape.constant(&x);
        let direct = model.forward(&mut tape, &mounted, &tx);

        let mut tape2 = Tape::new();
        let mounted2 = model.mount(&mut tape2);
        let tx2 = tape2.constant(&x);
        let (skips, bottleneck) = model.encode(&mut tape2, &mounted2, &tx2);
        let processed = model.bottleneck_pass(&mut tape2, &mounted2, &bottleneck);
        let (alpha, beta) = model.fusion_weights(&mut tape2, &mounted2);
        let fused = fuse(&mut tape2, &bottleneck, &processed, &alpha, &beta).unwrap();
        let composed = model.decode(&mut tape2, &mounted2, &fused, &skips);

        assert_eq!(direct.data(), composed.data());
    }

    #[test]
    fn fusion_weights_receive_gradient() {
        let model = Model::new(ModelConfig::toy(), 23).unwrap();
        let (ai, bi) = model.fusion_indices().expect("learned fusion by default");
        let mut rng = ChaCha8Rng::seed_from_u64(117);
        let x = Tensor::from_parts(vec![1, 32, 32], rand_vec(&mut rng, 32 * 32));
        let mut tape = Tape::new();
        let mounted = model.mount(&mut tape);
        let tx = tape.constant(&x);
        let logits = model.forward(&mut tape, &mounted, &tx);
        let loss = tape.sum(&logits);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.wrt(&mounted[ai])[0] != 0.0, "no gradient reached the first fusion weight");
        assert!(grads.wrt(&mounted[bi])[0] != 0.0, "no gradient reached the second fusion weight");
    }

    #[test]
    fn zeroed_decoder_passes_skips_through_unchanged() {
        let mut model = Model::new(ModelConfig::toy(), 29).unwrap();
        // zero the upsampling path and make the decoder blocks identities
        for i in 0..model.params().len() {
            let name = model.params().name(i).to_string();
            let zero_it = name.starts_with("up")
                || (name.starts_with("dec")
                    && ["w_gate", "w_in", "dw_kernel", "w_out", "w_b", "w_c", "w_delta"]
                        .iter()
                        .any(|f| name.ends_with(f)));
            if zero_it {
                let shape = model.params().value(i).shape().to_vec();
                *model.params_mut().value_mut(i) = Tensor::zeros(shape);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(119);
        let x = Tensor::from_parts(vec![1, 32, 32], rand_vec(&mut rng, 32 * 32));
        let mut tape = Tape::new();
        let mounted = model.mount(&mut tape);
        let tx = tape.constant(&x);
        let (skips, bottleneck) = model.encode(&mut tape, &mounted, &tx);
        let processed = model.bottleneck_pass(&mut tape, &mounted, &bottleneck);
        let (alpha, beta) = model.fusion_weights(&mut tape, &mounted);
        let fused = fuse(&mut tape, &bottleneck, &processed, &alpha, &beta).unwrap();
        let (_, trace) = model.decode_traced(&mut tape, &mounted, &fused, &skips);
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].data(), skips[0].data(), "stage output is not the skip feature");
    }

    #[test]
    fn full_model_gradients_match_finite_differences_on_samples() {
        let model = Model::new(ModelConfig::toy(), 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        let x = Tensor::from_parts(vec![1, 32, 32], rand_vec(&mut rng, 32 * 32));
        let weights = rand_vec(&mut rng, 32 * 32);

        let eval = |m: &Model, xv: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let mounted = m.mount(&mut tape);
            let tx = tape.constant(xv);
            let y = m.forward(&mut tape, &mounted, &tx);
            y.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };

        let mut tape = Tape::new();
        let mounted = model.mount(&mut tape);
        let tx = tape.leaf(&x);
        let y = model.forward(&mut tape, &mounted, &tx);
        let tw = tape.constant(&Tensor::from_parts(vec![1, 32, 32], weights.clone()));
        let prod = tape.mul(&y, &tw);
        let loss = tape.sum(&prod);
        let grads = tape.backward(&loss).unwrap();

        let hstep = 1e-5;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom <= 1e-4,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
        };

        // a handful of parameter probes spread across the registry
        let total = model.params().len();
        let picks: Vec<usize> = (0..10).map(|k| k * total / 10).collect();
        for pi in picks {
            let base = model.params().value(pi).clone();
            let name = model.params().name(pi).to_string();
            let count = base.numel();
            for &i in &[0, count / 2] {
                let mut plus = model.clone();
                let mut v = base.to_vec();
                v[i] += hstep;
                *plus.params_mut().value_mut(pi) = Tensor::from_parts(base.shape().to_vec(), v.clone());
                let mut minus = model.clone();
                v[i] -= 2.0 * hstep;
                *minus.params_mut().value_mut(pi) = Tensor::from_parts(base.shape().to_vec(), v);
                let fp = eval(&plus, &x);
                let fm = eval(&minus, &x);
                check(grads.wrt(&mounted[pi])[i], (fp - fm) / (2.0 * hstep), &format!("{name}[{i}]"));
            }
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let model = Model::new(ModelConfig::default(), 37).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in model.params().iter() {
            assert!(seen.insert(name.to_string()), "duplicate parameter name {name}");
        }
        assert!(model.params().total_scalars() > 0);
    }
}
