//! Learned pipeline: training scattering matrix optimizer (TSMO) and
//! dual-attention channel estimator (DACE).
//!
//! The TSMO maps the standardized Phase-I observation (plus transmit power)
//! to raw susceptance outputs, which the differentiable converter turns into
//! feasible Phase-II scattering on the tape; Phase-II reception is then
//! simulated in-graph so the estimation loss backpropagates through the
//! whole chain into both networks. Raw TSMO outputs are interpreted as the
//! dimensionless Z0*B, which keeps the Cayley argument at unit scale.
//!
//! The DACE embeds the standardized Phase-II observation and runs two
//! attention branches: one over the 2*NU receive rows (intra-user) and one
//! over the 2*K user rows (inter-user); their features are fused and
//! projected to the real/imag parts of the cascaded channel estimate.

use crate::autodiff::{ComplexPair, NodeId, ReceptionConsts, Tape};
use crate::channel::NormStats;
use crate::cx::CMat;
use crate::physics::{
    expand_half_graph, ChannelPair, MappingP, ScatteringMatrix, SusceptanceParams, SystemConfig,
};
use crate::protocol::{decorrelate, PhaseObservation, PilotBook};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Index of a named parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors. Creation order is fixed by the model
/// constructors, which makes initialization, checkpoints, and optimizer
/// state deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Mounts every parameter onto a tape as a trainable leaf; the returned
    /// vector is indexed by [`ParamId`].
    pub fn mount(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.entries.iter().map(|(_, t)| tape.leaf_copied(t.shape(), t.data())).collect()
    }
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.uniform_in(-limit, limit)).collect())
}

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

/// Architecture widths and depths.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHyper {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_intra_layers: usize,
    pub n_inter_layers: usize,
    /// Feature-extraction FC layers in the TSMO.
    pub n_ffc: usize,
    /// Width of each TSMO FC layer.
    pub d_fc: usize,
    /// Hidden width of the shared TSMO group head.
    pub d_group: usize,
    /// Positional-encoding wavelength base.
    pub xi: f64,
}

impl ModelHyper {
    pub fn desk_scale() -> Self {
        ModelHyper {
            d_model: 32,
            d_ff: 64,
            n_heads: 2,
            n_intra_layers: 2,
            n_inter_layers: 2,
            n_ffc: 3,
            d_fc: 128,
            d_group: 128,
            xi: 1000.0,
        }
    }

    /// Full-size configuration from the reference setup; selectable but far
    /// beyond desk-scale budgets.
    pub fn paper_scale() -> Self {
        ModelHyper {
            d_model: 256,
            d_ff: 512,
            n_heads: 2,
            n_intra_layers: 3,
            n_inter_layers: 3,
            n_ffc: 3,
            d_fc: 400,
            d_group: 400,
            xi: 1000.0,
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn micro() -> Self {
        ModelHyper {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            n_intra_layers: 1,
            n_inter_layers: 1,
            n_ffc: 2,
            d_fc: 16,
            d_group: 8,
            xi: 1000.0,
        }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<(), String> {
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return Err("d_model must be even for the sinusoidal encoding".into());
        }
        if self.d_fc % cfg.groups != 0 {
            return Err(format!(
                "d_fc ({}) must be divisible by the group count ({})",
                self.d_fc, cfg.groups
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// TSMO
// ---------------------------------------------------------------------------

/// Weights of the training scattering matrix optimizer.
#[derive(Clone, Debug)]
pub struct TsmoParams {
    pub fc: Vec<(ParamId, ParamId)>,
    pub group_w1: ParamId,
    pub group_b1: ParamId,
    pub group_w2: ParamId,
    pub group_b2: ParamId,
}

impl TsmoParams {
    /// Input width: flattened standardized Phase-I observation plus P_u.
    pub fn input_len(cfg: &SystemConfig) -> usize {
        2 * cfg.nu() * cfg.users * cfg.tau1 + 1
    }

    pub fn init(store: &mut ParamStore, cfg: &SystemConfig, hyper: &ModelHyper, rng: &mut Rng) -> Self {
        let mut fc = Vec::new();
        let mut prev = Self::input_len(cfg);
        for i in 0..hyper.n_ffc {
            let w = store.add(format!("tsmo.fc{i}.w"), glorot(rng, prev, hyper.d_fc));
            let b = store.add(format!("tsmo.fc{i}.b"), Tensor::zeros(vec![hyper.d_fc]));
            fc.push((w, b));
            prev = hyper.d_fc;
        }
        let per_group = hyper.d_fc / cfg.groups;
        let out = cfg.group_half_len() * cfg.tau2;
        let group_w1 = store.add("tsmo.group.w1", glorot(rng, per_group, hyper.d_group));
        let group_b1 = store.add("tsmo.group.b1", Tensor::zeros(vec![hyper.d_group]));
        let group_w2 = store.add("tsmo.group.w2", glorot(rng, hyper.d_group, out));
        let group_b2 = store.add("tsmo.group.b2", Tensor::zeros(vec![out]));
        TsmoParams { fc, group_w1, group_b1, group_w2, group_b2 }
    }
}

/// Standardizes the transmit power against the training interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PuStandardizer {
    pub lo_dbm: f64,
    pub hi_dbm: f64,
}

impl PuStandardizer {
    pub fn standardize(&self, p_u_dbm: f64) -> f64 {
        let mean = 0.5 * (self.lo_dbm + self.hi_dbm);
        let std = (self.hi_dbm - self.lo_dbm) / 12f64.sqrt();
        if std > 0.0 {
            (p_u_dbm - mean) / std
        } else {
            0.0
        }
    }
}

/// Flattens and standardizes a Phase-I observation into the TSMO input
/// vector: [2, NU, K, tau1] row-major, then the standardized power.
pub fn tsmo_input(
    obs: &PhaseObservation,
    cfg: &SystemConfig,
    norm: &NormStats,
    pu_std: &PuStandardizer,
    p_u_dbm: f64,
) -> Vec<f64> {
    let nu = cfg.nu();
    let tau1 = obs.tau();
    let mut v = Vec::with_capacity(2 * nu * cfg.users * tau1 + 1);
    for c in 0..2 {
        for r in 0..nu {
            for k in 0..cfg.users {
                for t in 0..tau1 {
                    let z = obs.per_user[k].at(r, t);
                    let x = if c == 0 { z.re } else { z.im };
                    v.push((x - norm.pilot_mean) / norm.pilot_std);
                }
            }
        }
    }
    v.push(pu_std.standardize(p_u_dbm));
    v
}

/// TSMO forward pass: returns the raw susceptance output, an on-tape
/// M(M-bar+1)/2 x tau2 tensor interpreted as Z0*B.
pub fn tsmo_forward(
    tape: &mut Tape,
    params: &TsmoParams,
    nodes: &[NodeId],
    cfg: &SystemConfig,
    input: &[f64],
) -> NodeId {
    assert_eq!(input.len(), TsmoParams::input_len(cfg), "TSMO input width");
    let mut x = tape.constant(Tensor::new(vec![1, input.len()], input.to_vec()));
    for (w, b) in &params.fc {
        x = tape.linear(x, nodes[w.0], nodes[b.0], true);
    }
    let d_fc = tape.value(x).numel();
    let per_group = d_fc / cfg.groups;
    let mut g = tape.reshape(x, vec![cfg.groups, per_group]);
    g = tape.linear(g, nodes[params.group_w1.0], nodes[params.group_b1.0], true);
    g = tape.linear(g, nodes[params.group_w2.0], nodes[params.group_b2.0], false);
    // rows are per-group [group_half_len x tau2] blocks; stacking them keeps
    // the group-major half-vector ordering
    tape.reshape(g, vec![cfg.total_half_len(), cfg.tau2])
}

// ---------------------------------------------------------------------------
// Positional encoding and attention
// ---------------------------------------------------------------------------

/// Sinusoidal positional encoding: sin on even feature indices, cos on odd.
pub fn sinusoidal_pe(positions: usize, d_model: usize, xi: f64) -> Tensor {
    assert!(d_model % 2 == 0, "sinusoidal encoding needs an even d_model");
    Tensor::from_fn(vec![positions, d_model], |ix| {
        let (p, f) = (ix[0], ix[1]);
        let j = f / 2;
        let arg = p as f64 / xi.powf(2.0 * j as f64 / d_model as f64);
        if f % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Per-head projection weights.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

/// One pre-LN attention block: LN -> MHSA -> residual -> LN -> FF -> residual.
#[derive(Clone, Debug)]
pub struct AttnBlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub heads: Vec<HeadParams>,
    pub wo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
}

impl AttnBlockParams {
    fn init(store: &mut ParamStore, prefix: &str, hyper: &ModelHyper, rng: &mut Rng) -> Self {
        let d = hyper.d_model;
        let dk = d / hyper.n_heads;
        let ln1_gain = store.add(format!("{prefix}.ln1.g"), Tensor::new(vec![d], vec![1.0; d]));
        let ln1_bias = store.add(format!("{prefix}.ln1.b"), Tensor::zeros(vec![d]));
        let heads = (0..hyper.n_heads)
            .map(|h| HeadParams {
                wq: store.add(format!("{prefix}.h{h}.wq"), glorot(rng, d, dk)),
                wk: store.add(format!("{prefix}.h{h}.wk"), glorot(rng, d, dk)),
                wv: store.add(format!("{prefix}.h{h}.wv"), glorot(rng, d, dk)),
            })
            .collect();
        let wo = store.add(format!("{prefix}.wo"), glorot(rng, d, d));
        let ln2_gain = store.add(format!("{prefix}.ln2.g"), Tensor::new(vec![d], vec![1.0; d]));
        let ln2_bias = store.add(format!("{prefix}.ln2.b"), Tensor::zeros(vec![d]));
        let ff_w1 = store.add(format!("{prefix}.ff.w1"), glorot(rng, d, hyper.d_ff));
        let ff_b1 = store.add(format!("{prefix}.ff.b1"), Tensor::zeros(vec![hyper.d_ff]));
        let ff_w2 = store.add(format!("{prefix}.ff.w2"), glorot(rng, hyper.d_ff, d));
        let ff_b2 = store.add(format!("{prefix}.ff.b2"), Tensor::zeros(vec![d]));
        AttnBlockParams {
            ln1_gain,
            ln1_bias,
            heads,
            wo,
            ln2_gain,
            ln2_bias,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
        }
    }
}

/// Multi-head scaled dot-product self-attention over an E x d_model input.
pub fn mhsa(
    tape: &mut Tape,
    x: NodeId,
    heads: &[HeadParams],
    wo: ParamId,
    nodes: &[NodeId],
) -> NodeId {
    let d = tape.value(x).shape()[1];
    let dk = d / heads.len();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads.len());
    for h in heads {
        let q = tape.matmul(x, nodes[h.wq.0]);
        let k = tape.matmul(x, nodes[h.wk.0]);
        let v = tape.matmul(x, nodes[h.wv.0]);
        let kt = tape.transpose2(k);
        let logits = tape.matmul_scaled(q, kt, scale);
        let weights = tape.softmax_rows(logits);
        outs.push(tape.matmul(weights, v));
    }
    let cat = tape.concat(&outs, 1);
    tape.matmul(cat, nodes[wo.0])
}

/// Attention block forward: pre-LN, MHSA, residual, LN, feed-forward,
/// residual.
pub fn attention_block(
    tape: &mut Tape,
    x: NodeId,
    p: &AttnBlockParams,
    nodes: &[NodeId],
) -> NodeId {
    let ln1 = tape.layer_norm(x, nodes[p.ln1_gain.0], nodes[p.ln1_bias.0]);
    let att = mhsa(tape, ln1, &p.heads, p.wo, nodes);
    let rc1 = tape.add(att, x);
    let ln2 = tape.layer_norm(rc1, nodes[p.ln2_gain.0], nodes[p.ln2_bias.0]);
    let ff = tape.linear(ln2, nodes[p.ff_w1.0], nodes[p.ff_b1.0], true);
    let ff = tape.linear(ff, nodes[p.ff_w2.0], nodes[p.ff_b2.0], false);
    tape.add(ff, rc1)
}

// ---------------------------------------------------------------------------
// DACE
// ---------------------------------------------------------------------------

/// One attention branch: pre-normalization, down-projection, positional
/// encoding, stacked blocks, up-projection.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub pre_ln_gain: ParamId,
    pub pre_ln_bias: ParamId,
    pub down_w: ParamId,
    pub down_b: ParamId,
    /// Fixed sinusoidal encoding (not trained).
    pub pe: Tensor,
    pub blocks: Vec<AttnBlockParams>,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl BranchParams {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        positions: usize,
        feat: usize,
        layers: usize,
        hyper: &ModelHyper,
        rng: &mut Rng,
    ) -> Self {
        let d = hyper.d_model;
        let pre_ln_gain =
            store.add(format!("{prefix}.pre_ln.g"), Tensor::new(vec![feat], vec![1.0; feat]));
        let pre_ln_bias = store.add(format!("{prefix}.pre_ln.b"), Tensor::zeros(vec![feat]));
        let down_w = store.add(format!("{prefix}.down.w"), glorot(rng, feat, d));
        let down_b = store.add(format!("{prefix}.down.b"), Tensor::zeros(vec![d]));
        let pe = sinusoidal_pe(positions, d, hyper.xi);
        let blocks = (0..layers)
            .map(|l| AttnBlockParams::init(store, &format!("{prefix}.block{l}"), hyper, rng))
            .collect();
        let up_w = store.add(format!("{prefix}.up.w"), glorot(rng, d, feat));
        let up_b = store.add(format!("{prefix}.up.b"), Tensor::zeros(vec![feat]));
        BranchParams { pre_ln_gain, pre_ln_bias, down_w, down_b, pe, blocks, up_w, up_b }
    }

    /// positions x d_model features after the stacked blocks.
    fn features(&self, tape: &mut Tape, x: NodeId, nodes: &[NodeId]) -> NodeId {
        let ln = tape.layer_norm(x, nodes[self.pre_ln_gain.0], nodes[self.pre_ln_bias.0]);
        let mut h = tape.linear(ln, nodes[self.down_w.0], nodes[self.down_b.0], false);
        let pe = tape.constant(self.pe.clone());
        h = tape.add(h, pe);
        for b in &self.blocks {
            h = attention_block(tape, h, b, nodes);
        }
        h
    }

    fn up_project(&self, tape: &mut Tape, h: NodeId, nodes: &[NodeId]) -> NodeId {
        tape.linear(h, nodes[self.up_w.0], nodes[self.up_b.0], false)
    }
}

/// Weights of the dual-attention channel estimator.
#[derive(Clone, Debug)]
pub struct DaceParams {
    pub emb_w1: ParamId,
    pub emb_b1: ParamId,
    pub emb_w2: ParamId,
    pub emb_b2: ParamId,
    pub intra: BranchParams,
    pub inter: BranchParams,
    pub fuse_w1: ParamId,
    pub fuse_b1: ParamId,
    pub fuse_w2: ParamId,
    pub fuse_b2: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl DaceParams {
    pub fn init(store: &mut ParamStore, cfg: &SystemConfig, hyper: &ModelHyper, rng: &mut Rng) -> Self {
        let d = hyper.d_model;
        let nu = cfg.nu();
        let k = cfg.users;
        let h_tot = cfg.total_half_len();
        let emb_w1 = store.add("dace.emb.w1", glorot(rng, cfg.tau2, d));
        let emb_b1 = store.add("dace.emb.b1", Tensor::zeros(vec![d]));
        let emb_w2 = store.add("dace.emb.w2", glorot(rng, d, d));
        let emb_b2 = store.add("dace.emb.b2", Tensor::zeros(vec![d]));
        let intra = BranchParams::init(
            store,
            "dace.intra",
            2 * nu,
            k * d,
            hyper.n_intra_layers,
            hyper,
            rng,
        );
        let inter = BranchParams::init(
            store,
            "dace.inter",
            2 * k,
            nu * d,
            hyper.n_inter_layers,
            hyper,
            rng,
        );
        let fuse_w1 = store.add("dace.fuse.w1", glorot(rng, 2 * d, d));
        let fuse_b1 = store.add("dace.fuse.b1", Tensor::zeros(vec![d]));
        let fuse_w2 = store.add("dace.fuse.w2", glorot(rng, d, d));
        let fuse_b2 = store.add("dace.fuse.b2", Tensor::zeros(vec![d]));
        let out_w = store.add("dace.out.w", glorot(rng, d, h_tot));
        let out_b = store.add("dace.out.b", Tensor::zeros(vec![h_tot]));
        DaceParams {
            emb_w1,
            emb_b1,
            emb_w2,
            emb_b2,
            intra,
            inter,
            fuse_w1,
            fuse_b1,
            fuse_w2,
            fuse_b2,
            out_w,
            out_b,
        }
    }
}

/// DACE forward products: the estimate and the pre-fusion branch features.
pub struct DaceOutputs {
    /// [2, NU, K, M(M-bar+1)/2] real/imag estimate (normalized label scale).
    pub estimate: NodeId,
    /// [2NU, d_model] intra-user branch features.
    pub intra_features: NodeId,
    /// [2K, d_model] inter-user branch features.
    pub inter_features: NodeId,
}

/// DACE forward pass over a standardized observation node of shape
/// [2, NU, K, tau2].
pub fn dace_forward(
    tape: &mut Tape,
    params: &DaceParams,
    nodes: &[NodeId],
    cfg: &SystemConfig,
    obs: NodeId,
) -> DaceOutputs {
    let nu = cfg.nu();
    let k = cfg.users;
    let tau2 = cfg.tau2;
    let d = tape.value(nodes[params.emb_w1.0]).shape()[1];
    assert_eq!(tape.value(obs).shape(), &[2, nu, k, tau2], "DACE input shape");

    // embedding along the subframe axis, shared elsewhere
    let flat = tape.reshape(obs, vec![2 * nu * k, tau2]);
    let e = tape.linear(flat, nodes[params.emb_w1.0], nodes[params.emb_b1.0], true);
    let e = tape.linear(e, nodes[params.emb_w2.0], nodes[params.emb_b2.0], false);
    let emb = tape.reshape(e, vec![2, nu, k, d]);

    // intra-user branch over 2*NU rows
    let x_nu = tape.reshape(emb, vec![2 * nu, k * d]);
    let intra_features = params.intra.features(tape, x_nu, nodes);
    let intra_up = params.intra.up_project(tape, intra_features, nodes);
    let intra_t = tape.reshape(intra_up, vec![2, nu, k, d]);

    // inter-user branch over 2*K rows
    let swapped = tape.permute(emb, &[0, 2, 1, 3]);
    let x_k = tape.reshape(swapped, vec![2 * k, nu * d]);
    let inter_features = params.inter.features(tape, x_k, nodes);
    let inter_up = params.inter.up_project(tape, inter_features, nodes);
    let inter_4d = tape.reshape(inter_up, vec![2, k, nu, d]);
    let inter_t = tape.permute(inter_4d, &[0, 2, 1, 3]);

    // fuse along features and project to the half-vector estimate
    let cat = tape.concat(&[intra_t, inter_t], 3);
    let cat2 = tape.reshape(cat, vec![2 * nu * k, 2 * d]);
    let f = tape.linear(cat2, nodes[params.fuse_w1.0], nodes[params.fuse_b1.0], true);
    let f = tape.linear(f, nodes[params.fuse_w2.0], nodes[params.fuse_b2.0], false);
    let o = tape.linear(f, nodes[params.out_w.0], nodes[params.out_b.0], false);
    let estimate = tape.reshape(o, vec![2, nu, k, cfg.total_half_len()]);
    DaceOutputs { estimate, intra_features, inter_features }
}

// ---------------------------------------------------------------------------
// In-graph Phase-II simulation
// ---------------------------------------------------------------------------

/// Channel constants mounted on a tape for the differentiable Phase-II path.
pub struct ChannelConstants {
    /// Per group: N x M-bar complex pair.
    pub h_it: Vec<ComplexPair>,
    /// Per (user, group): M-bar x U complex pair.
    pub h_ri: Vec<Vec<ComplexPair>>,
}

pub fn mount_channel(tape: &mut Tape, ch: &ChannelPair, cfg: &SystemConfig) -> ChannelConstants {
    let mb = cfg.group_size();
    let to_pair = |tape: &mut Tape, m: &CMat| {
        let re = Tensor::new(vec![m.rows, m.cols], m.data.iter().map(|z| z.re).collect());
        let im = Tensor::new(vec![m.rows, m.cols], m.data.iter().map(|z| z.im).collect());
        let re = tape.constant(re);
        let im = tape.constant(im);
        tape.complex(re, im)
    };
    let h_it = (0..cfg.groups)
        .map(|g| {
            let block = ch.h_it.block(0, g * mb, cfg.bs_antennas, mb);
            to_pair(tape, &block)
        })
        .collect();
    let h_ri = (0..cfg.users)
        .map(|k| {
            (0..cfg.groups)
                .map(|g| {
                    let block =
                        ch.h_ri.block(g * mb, k * cfg.user_antennas, mb, cfg.user_antennas);
                    to_pair(tape, &block)
                })
                .collect()
        })
        .collect();
    ChannelConstants { h_it, h_ri }
}

/// Converts raw TSMO output into per-(subframe, group) packed scattering
/// blocks ([2, mb, mb] re/im planes) via the fused Cayley primitive.
pub fn ssc_graph(
    tape: &mut Tape,
    raw: NodeId,
    cfg: &SystemConfig,
    mapping: &MappingP,
) -> Vec<Vec<NodeId>> {
    let h = cfg.group_half_len();
    let mb = cfg.group_size();
    let p_dense = tape.constant(mapping.dense());
    (0..cfg.tau2)
        .map(|t| {
            (0..cfg.groups)
                .map(|g| {
                    let half = tape.slice(raw, &[g * h, t], &[h, 1]);
                    let scaled_b = expand_half_graph(tape, half, p_dense, mb);
                    tape.cayley(scaled_b).expect("I + jZ0 B is nonsingular for symmetric B")
                })
                .collect()
        })
        .collect()
}

/// Splits a packed [2, mb, mb] scattering node into a complex pair.
pub fn unpack_scattering(tape: &mut Tape, packed: NodeId) -> ComplexPair {
    let mb = tape.value(packed).shape()[1];
    let re = tape.slice(packed, &[0, 0, 0], &[1, mb, mb]);
    let re = tape.reshape(re, vec![mb, mb]);
    let im = tape.slice(packed, &[1, 0, 0], &[1, mb, mb]);
    let im = tape.reshape(im, vec![mb, mb]);
    tape.complex(re, im)
}

/// Builds the standardized Phase-II observation tensor [2, NU, K, tau2] on
/// the tape from in-graph scattering and constant decorrelated noise.
///
/// The decorrelated form sqrt(P_u) * sum_g H_IT,g Phi_g H_RI,k,g + N-tilde is
/// used; pilot orthogonality makes it equal to simulating and decorrelating
/// the full subframe.
pub fn phase2_observation_graph(
    tape: &mut Tape,
    ch: &ChannelPair,
    scattering: &[Vec<NodeId>],
    decorrelated_noise: &[Vec<CMat>],
    cfg: &SystemConfig,
    norm: &NormStats,
) -> NodeId {
    let consts = reception_consts(ch, decorrelated_noise, cfg, norm);
    tape.reception(scattering, consts)
}

/// Builds the constant factors of the fused reception op: per-group RIS-BS
/// blocks pre-scaled by sqrt(P_u), per-(user, group) user-RIS blocks, and
/// the decorrelated noise.
pub fn reception_consts(
    ch: &ChannelPair,
    decorrelated_noise: &[Vec<CMat>],
    cfg: &SystemConfig,
    norm: &NormStats,
) -> ReceptionConsts {
    let mb = cfg.group_size();
    let sqrt_pu = cfg.p_u.sqrt();
    let split = |m: &CMat, s: f64| -> (Vec<f64>, Vec<f64>) {
        (
            m.data.iter().map(|z| z.re * s).collect(),
            m.data.iter().map(|z| z.im * s).collect(),
        )
    };
    let mut h_it_re = Vec::with_capacity(cfg.groups);
    let mut h_it_im = Vec::with_capacity(cfg.groups);
    for g in 0..cfg.groups {
        let block = ch.h_it.block(0, g * mb, cfg.bs_antennas, mb);
        let (re, im) = split(&block, sqrt_pu);
        h_it_re.push(re);
        h_it_im.push(im);
    }
    let mut h_ri_re = Vec::with_capacity(cfg.users * cfg.groups);
    let mut h_ri_im = Vec::with_capacity(cfg.users * cfg.groups);
    for k in 0..cfg.users {
        for g in 0..cfg.groups {
            let block = ch.h_ri.block(g * mb, k * cfg.user_antennas, mb, cfg.user_antennas);
            let (re, im) = split(&block, 1.0);
            h_ri_re.push(re);
            h_ri_im.push(im);
        }
    }
    let mut noise_re = Vec::new();
    let mut noise_im = Vec::new();
    for row in decorrelated_noise {
        for nmat in row {
            let (re, im) = split(nmat, 1.0);
            noise_re.push(re);
            noise_im.push(im);
        }
    }
    ReceptionConsts {
        n_bs: cfg.bs_antennas,
        u_ant: cfg.user_antennas,
        users: cfg.users,
        groups: cfg.groups,
        group_size: mb,
        tau: decorrelated_noise.len(),
        h_it_re,
        h_it_im,
        h_ri_re,
        h_ri_im,
        noise_re,
        noise_im,
        mul: 1.0 / norm.pilot_std,
        add: -norm.pilot_mean / norm.pilot_std,
    }
}

/// Mounts an already-simulated observation as a constant standardized input
/// (the path used when no gradient must flow into Phase II).
pub fn observation_constant(
    tape: &mut Tape,
    obs: &PhaseObservation,
    cfg: &SystemConfig,
    norm: &NormStats,
) -> NodeId {
    let nu = cfg.nu();
    let tau = obs.tau();
    let t = Tensor::from_fn(vec![2, nu, cfg.users, tau], |ix| {
        let z = obs.per_user[ix[2]].at(ix[1], ix[3]);
        let x = if ix[0] == 0 { z.re } else { z.im };
        (x - norm.pilot_mean) / norm.pilot_std
    });
    tape.constant(t)
}

/// Decorrelated per-(subframe, user) noise from raw subframe noise matrices.
pub fn decorrelate_noise(
    noise: &[CMat],
    book: &PilotBook,
    cfg: &SystemConfig,
) -> Vec<Vec<CMat>> {
    noise
        .iter()
        .map(|n| (0..cfg.users).map(|k| decorrelate(n, book, k)).collect())
        .collect()
}

/// Protocol-facing form of the optimizer: maps a Phase-I observation and the
/// transmit power to the Phase-II susceptance matrix (Siemens). This is the
/// callback shape `two_phase_session` expects.
pub fn tsmo_apply(
    store: &ParamStore,
    tsmo: &TsmoParams,
    cfg: &SystemConfig,
    norm: &NormStats,
    pu_std: &PuStandardizer,
    obs: &PhaseObservation,
    p_u: f64,
) -> SusceptanceParams {
    let cfg_pu = SystemConfig { p_u, ..cfg.clone() };
    let p_u_dbm = crate::physics::watts_to_dbm(p_u);
    let input = tsmo_input(obs, &cfg_pu, norm, pu_std, p_u_dbm);
    let mut tape = Tape::new();
    let nodes = store.mount(&mut tape);
    let raw = tsmo_forward(&mut tape, tsmo, &nodes, &cfg_pu, &input);
    susceptance_from_raw(&tape, raw, cfg.z0)
}

/// Reads per-subframe scattering values off the tape (packed nodes).
pub fn extract_scattering(tape: &Tape, scats: &[Vec<NodeId>]) -> Vec<ScatteringMatrix> {
    scats
        .iter()
        .map(|row| {
            let blocks = row
                .iter()
                .map(|&packed| {
                    let v = tape.value(packed);
                    let mb = v.shape()[1];
                    let (re, im) = v.data().split_at(mb * mb);
                    CMat::from_re_im(mb, mb, re, im)
                })
                .collect();
            ScatteringMatrix { blocks }
        })
        .collect()
}

/// Reads the raw TSMO output off the tape as Siemens susceptances (divides
/// out the Z0 scaling).
pub fn susceptance_from_raw(tape: &Tape, raw: NodeId, z0: f64) -> SusceptanceParams {
    let v = tape.value(raw);
    let scaled: Vec<f64> = v.data().iter().map(|x| x / z0).collect();
    SusceptanceParams::new(Tensor::new(v.shape().to_vec(), scaled))
}

// ---------------------------------------------------------------------------
// Trained model bundle
// ---------------------------------------------------------------------------

/// Which estimator a bundle implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodTag {
    /// Joint pipeline: learned scattering plus the dual-attention estimator.
    Jtsmlcef,
    /// Ablation: dual-attention estimator with fixed random scattering.
    Dacen,
}

impl MethodTag {
    pub fn name(self) -> &'static str {
        match self {
            MethodTag::Jtsmlcef => "jtsmlcef",
            MethodTag::Dacen => "dacen",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            MethodTag::Jtsmlcef => 0,
            MethodTag::Dacen => 1,
        }
    }

    pub fn from_code(c: u32) -> Option<MethodTag> {
        match c {
            0 => Some(MethodTag::Jtsmlcef),
            1 => Some(MethodTag::Dacen),
            _ => None,
        }
    }
}

/// Everything needed to run a trained estimator: weights, the frozen Phase-I
/// scattering, normalization statistics, and the configuration snapshot.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub system: SystemConfig,
    pub hyper: ModelHyper,
    pub method: MethodTag,
    pub store: ParamStore,
    pub tsmo: Option<TsmoParams>,
    pub dace: DaceParams,
    /// Seed behind the Phase-I susceptances.
    pub phase1_seed: u64,
    /// Frozen Phase-I susceptances, width tau1.
    pub phase1_susceptance: SusceptanceParams,
    /// Fixed Phase-II susceptances for the no-TSMO ablation, width tau2.
    pub phase2_fixed: Option<SusceptanceParams>,
    pub norm: NormStats,
    pub p_u_interval_dbm: (f64, f64),
    pub train_seed: u64,
}

impl ModelBundle {
    pub fn pu_standardizer(&self) -> PuStandardizer {
        PuStandardizer { lo_dbm: self.p_u_interval_dbm.0, hi_dbm: self.p_u_interval_dbm.1 }
    }

    /// Rebuilds the parameter handles after deserialization in the same
    /// creation order used at init time. Fails if the records do not match
    /// the architecture implied by the configuration.
    pub fn rebuild_handles(
        store: &ParamStore,
        cfg: &SystemConfig,
        hyper: &ModelHyper,
        method: MethodTag,
    ) -> Result<(Option<TsmoParams>, DaceParams), String> {
        // dims must match; a scratch store recreates ids in canonical order
        let mut scratch = ParamStore::new();
        let mut rng = Rng::new(0);
        let tsmo = match method {
            MethodTag::Jtsmlcef => Some(TsmoParams::init(&mut scratch, cfg, hyper, &mut rng)),
            MethodTag::Dacen => None,
        };
        let dace = DaceParams::init(&mut scratch, cfg, hyper, &mut rng);
        if scratch.len() != store.len() {
            return Err(format!(
                "parameter record count {} does not match the architecture ({})",
                store.len(),
                scratch.len()
            ));
        }
        for (a, b) in scratch.iter().zip(store.iter()) {
            if a.0 != b.0 {
                return Err(format!("parameter record order mismatch: {} vs {}", a.0, b.0));
            }
            if a.1.shape() != b.1.shape() {
                return Err(format!("parameter shape mismatch for {}", a.0));
            }
        }
        Ok((tsmo, dace))
    }
}
