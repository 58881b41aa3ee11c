//! Plain, DMB, and MoE variants of the feed-forward and multi-head
//! attention sub-layers, shared-private reparameterization, and folding.
//!
//! A DMB weight is stored as a shared set θ_S plus N private sets θ_{P_i}
//! during training; the forward pass materializes θ_i = θ_S + θ_{P_i} for
//! every branch that actually receives positions, so gradients route
//! exactly (shared always updated, private only when selected) and
//! post-training folding is a bit-exact identity. Per-position routing
//! groups positions by branch and runs one dense matmul per nonempty
//! group, which keeps the executed multiply-accumulate count identical to
//! the analytic model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::gating::{
    gate_dmb, gate_moe, xavier_uniform, BoundGate, GateOutput, GatingError, GatingUnit, Selection,
};
use crate::tensor::{Graph, TensorId};
use crate::Real;

// ── parameter storage ────────────────────────────────────────────────

/// A named, shaped parameter block.
#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<Real>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Param {
        Param {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn xavier<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Param {
        Param {
            data: xavier_uniform(in_dim, out_dim, rng),
            shape: vec![out_dim, in_dim],
        }
    }
}

/// Which sub-layer variant a layer implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Plain,
    Dmb { branches: usize },
    Moe { branches: usize, k: usize },
}

impl LayerKind {
    pub fn branches(&self) -> usize {
        match *self {
            LayerKind::Plain => 1,
            LayerKind::Dmb { branches } | LayerKind::Moe { branches, .. } => branches,
        }
    }

    pub fn is_branched(&self) -> bool {
        !matches!(self, LayerKind::Plain)
    }
}

/// One weight matrix in its plain, shared-private, or per-branch form.
#[derive(Debug, Clone)]
pub enum Weights {
    /// Single parameter set (plain layers).
    Plain(Param),
    /// DMB training form: θ_i = θ_S + θ_{P_i} materialized on the fly.
    SharedPrivate { shared: Param, private: Vec<Param> },
    /// Independent per-branch sets: MoE experts or folded DMB branches.
    PerBranch(Vec<Param>),
}

impl Weights {
    /// Shared set zero-initialized, private sets Xavier-initialized.
    pub fn new_shared_private<R: Rng>(
        branches: usize,
        out_dim: usize,
        in_dim: usize,
        rng: &mut R,
    ) -> Weights {
        Weights::SharedPrivate {
            shared: Param::zeros(&[out_dim, in_dim]),
            private: (0..branches).map(|_| Param::xavier(out_dim, in_dim, rng)).collect(),
        }
    }

    pub fn new_experts<R: Rng>(
        branches: usize,
        out_dim: usize,
        in_dim: usize,
        rng: &mut R,
    ) -> Weights {
        Weights::PerBranch((0..branches).map(|_| Param::xavier(out_dim, in_dim, rng)).collect())
    }

    /// Materialize θ_i = θ_S + θ_{P_i} in place, discarding the shared set.
    /// Each element is a single floating-point addition, so folded forward
    /// passes are bit-exact matches of the training-mode forward.
    pub fn fold(&mut self) {
        if let Weights::SharedPrivate { shared, private } = self {
            let folded = private
                .iter()
                .map(|p| Param {
                    data: p.data.iter().zip(&shared.data).map(|(&a, &b)| a + b).collect(),
                    shape: p.shape.clone(),
                })
                .collect();
            *self = Weights::PerBranch(folded);
        }
    }

    pub fn is_folded_or_plain(&self) -> bool {
        !matches!(self, Weights::SharedPrivate { .. })
    }

    /// Visit every parameter block in a stable order with stable names.
    /// [`Weights::bind`] registers graph leaves in exactly this order.
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        match self {
            Weights::Plain(p) => f(String::from(prefix), p),
            Weights::SharedPrivate { shared, private } => {
                f(format!("{prefix}.shared"), shared);
                for (i, p) in private.iter().enumerate() {
                    f(format!("{prefix}.private{i}"), p);
                }
            }
            Weights::PerBranch(branches) => {
                for (i, p) in branches.iter().enumerate() {
                    f(format!("{prefix}.branch{i}"), p);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        match self {
            Weights::Plain(p) => f(String::from(prefix), p),
            Weights::SharedPrivate { shared, private } => {
                f(format!("{prefix}.shared"), shared);
                for (i, p) in private.iter_mut().enumerate() {
                    f(format!("{prefix}.private{i}"), p);
                }
            }
            Weights::PerBranch(branches) => {
                for (i, p) in branches.iter_mut().enumerate() {
                    f(format!("{prefix}.branch{i}"), p);
                }
            }
        }
    }

    /// Register leaves in `reg` (same order as [`Weights::visit`]).
    pub fn bind(&self, g: &mut Graph, reg: &mut Vec<TensorId>) -> BoundWeights {
        match self {
            Weights::Plain(p) => {
                let id = g.leaf(p.data.clone(), &p.shape);
                reg.push(id);
                BoundWeights::Plain(id)
            }
            Weights::SharedPrivate { shared, private } => {
                let s = g.leaf(shared.data.clone(), &shared.shape);
                reg.push(s);
                let p = private
                    .iter()
                    .map(|p| {
                        let id = g.leaf(p.data.clone(), &p.shape);
                        reg.push(id);
                        id
                    })
                    .collect();
                BoundWeights::SharedPrivate { shared: s, private: p }
            }
            Weights::PerBranch(branches) => BoundWeights::PerBranch(
                branches
                    .iter()
                    .map(|p| {
                        let id = g.leaf(p.data.clone(), &p.shape);
                        reg.push(id);
                        id
                    })
                    .collect(),
            ),
        }
    }
}

/// Graph-bound form of [`Weights`].
#[derive(Debug, Clone)]
pub enum BoundWeights {
    Plain(TensorId),
    SharedPrivate { shared: TensorId, private: Vec<TensorId> },
    PerBranch(Vec<TensorId>),
}

impl BoundWeights {
    /// The effective weight tensor of branch `i`, materializing
    /// θ_S + θ_{P_i} for the shared-private form. Only called for
    /// branches that receive positions, so unselected private sets
    /// stay out of the graph and keep exactly-zero gradients.
    pub fn branch(&self, g: &mut Graph, i: usize) -> TensorId {
        match self {
            BoundWeights::Plain(id) => {
                debug_assert_eq!(i, 0);
                *id
            }
            BoundWeights::SharedPrivate { shared, private } => g.add(*shared, private[i]),
            BoundWeights::PerBranch(branches) => branches[i],
        }
    }
}

// ── routing ──────────────────────────────────────────────────────────

/// `y = x · Wᵀ` where each row of `x` uses the branch chosen by `gate`:
/// grouped gathers, one dense matmul per nonempty branch, scatter back.
/// MoE additionally scales each routed row by its mixture weight and
/// lets the scatter accumulate the k expert contributions per row.
fn route_linear(
    g: &mut Graph,
    x: TensorId,
    w: &BoundWeights,
    gate: Option<&GateOutput>,
) -> TensorId {
    let gate = match (w, gate) {
        (BoundWeights::Plain(id), _) => {
            return g.matmul_nt(x, *id).expect("projection shape");
        }
        (_, Some(gate)) => gate,
        (_, None) => panic!("branched weights need a gate output"),
    };
    let rows = g.shape(x)[0];
    let mut parts: Vec<(TensorId, Vec<usize>)> = Vec::new();
    match &gate.selection {
        Selection::Top1(sel) => {
            debug_assert_eq!(sel.len(), rows);
            let branches = match w {
                BoundWeights::SharedPrivate { private, .. } => private.len(),
                BoundWeights::PerBranch(b) => b.len(),
                BoundWeights::Plain(_) => unreachable!(),
            };
            for b in 0..branches {
                let idx: Vec<usize> = (0..rows).filter(|&r| sel[r] == b).collect();
                if idx.is_empty() {
                    continue;
                }
                let xb = g.gather_rows(x, &idx);
                let wb = w.branch(g, b);
                let yb = g.matmul_nt(xb, wb).expect("branch projection shape");
                parts.push((yb, idx));
            }
        }
        Selection::TopK { rows_per_expert, .. } => {
            for (e, idx) in rows_per_expert.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let xb = g.gather_rows(x, idx);
                let wb = w.branch(g, e);
                let yb = g.matmul_nt(xb, wb).expect("expert projection shape");
                let elems: Vec<(usize, usize)> = idx.iter().map(|&r| (r, e)).collect();
                let mix = g.gather_elems(gate.probs, &elems);
                let yb = g.scale_rows(yb, mix);
                parts.push((yb, idx.clone()));
            }
        }
    }
    g.scatter_rows(&parts, rows)
}

/// Evaluate a layer's gate on one input matrix.
fn run_gate<R: Rng>(
    g: &mut Graph,
    gate: &BoundGate,
    kind: LayerKind,
    x: TensorId,
    training: bool,
    rng: &mut R,
) -> Result<GateOutput, GatingError> {
    match kind {
        LayerKind::Plain => unreachable!("plain layers have no gate"),
        LayerKind::Dmb { .. } => Ok(gate_dmb(g, gate, x)),
        LayerKind::Moe { .. } => gate_moe(g, gate, x, training, rng),
    }
}

// ── feed-forward sub-layer ───────────────────────────────────────────

/// Two linear layers with ReLU, in plain, DMB, or MoE form. No biases:
/// both projections are pure matrix products.
#[derive(Debug, Clone)]
pub struct FfnLayer {
    pub kind: LayerKind,
    /// `[d_f, d]` (per branch when branched).
    pub w1: Weights,
    /// `[d, d_f]` (per branch when branched).
    pub w2: Weights,
    pub gate: Option<GatingUnit>,
}

impl FfnLayer {
    pub fn new<R: Rng>(kind: LayerKind, d: usize, d_f: usize, rng: &mut R) -> FfnLayer {
        let (w1, w2, gate) = match kind {
            LayerKind::Plain => (
                Weights::Plain(Param::xavier(d_f, d, rng)),
                Weights::Plain(Param::xavier(d, d_f, rng)),
                None,
            ),
            LayerKind::Dmb { branches } => (
                Weights::new_shared_private(branches, d_f, d, rng),
                Weights::new_shared_private(branches, d, d_f, rng),
                Some(GatingUnit::new_dmb(branches, d, rng)),
            ),
            LayerKind::Moe { branches, k } => (
                Weights::new_experts(branches, d_f, d, rng),
                Weights::new_experts(branches, d, d_f, rng),
                Some(GatingUnit::new_moe(branches, d, k, rng).expect("valid top-k")),
            ),
        };
        FfnLayer { kind, w1, w2, gate }
    }

    pub fn fold(&mut self) {
        self.w1.fold();
        self.w2.fold();
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.w1.visit(&format!("{prefix}.w1"), f);
        self.w2.visit(&format!("{prefix}.w2"), f);
        if let Some(gate) = &self.gate {
            visit_gate(gate, prefix, f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.w1.visit_mut(&format!("{prefix}.w1"), f);
        self.w2.visit_mut(&format!("{prefix}.w2"), f);
        if let Some(gate) = &mut self.gate {
            visit_gate_mut(gate, prefix, f);
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Vec<TensorId>) -> BoundFfn {
        BoundFfn {
            kind: self.kind,
            w1: self.w1.bind(g, reg),
            w2: self.w2.bind(g, reg),
            gate: self.gate.as_ref().map(|gate| bind_gate(gate, g, reg)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundFfn {
    pub kind: LayerKind,
    pub w1: BoundWeights,
    pub w2: BoundWeights,
    pub gate: Option<BoundGate>,
}

impl BoundFfn {
    /// `x: [M, d]` → `[M, d]`, plus any gate evaluations for the
    /// auxiliary losses.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        x: TensorId,
        training: bool,
        rng: &mut R,
    ) -> Result<(TensorId, Vec<GateOutput>), GatingError> {
        match self.kind {
            LayerKind::Plain => {
                let h = route_linear(g, x, &self.w1, None);
                let h = g.relu(h);
                Ok((route_linear(g, h, &self.w2, None), Vec::new()))
            }
            LayerKind::Dmb { .. } => {
                // both projections of a position come from the branch its
                // gate selects, so route once and run the whole branch FFN
                // on each group
                let gate = self.gate.as_ref().expect("DMB FFN has a gate");
                let out = run_gate(g, gate, self.kind, x, training, rng)?;
                let sel = out.top1();
                let rows = g.shape(x)[0];
                let mut parts: Vec<(TensorId, Vec<usize>)> = Vec::new();
                for b in 0..gate.branches {
                    let idx: Vec<usize> = (0..rows).filter(|&r| sel[r] == b).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let xb = g.gather_rows(x, &idx);
                    let w1 = self.w1.branch(g, b);
                    let h = g.matmul_nt(xb, w1).expect("ffn w1 shape");
                    let h = g.relu(h);
                    let w2 = self.w2.branch(g, b);
                    let yb = g.matmul_nt(h, w2).expect("ffn w2 shape");
                    parts.push((yb, idx));
                }
                Ok((g.scatter_rows(&parts, rows), vec![out]))
            }
            LayerKind::Moe { .. } => {
                // whole-FFN experts: mixture weights multiply each
                // expert's final output, accumulated by the scatter
                let gate = self.gate.as_ref().expect("MoE FFN has a gate");
                let out = run_gate(g, gate, self.kind, x, training, rng)?;
                let rows = g.shape(x)[0];
                let rows_per_expert = match &out.selection {
                    Selection::TopK { rows_per_expert, .. } => rows_per_expert,
                    _ => unreachable!(),
                };
                let mut parts: Vec<(TensorId, Vec<usize>)> = Vec::new();
                for (e, idx) in rows_per_expert.iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    let xb = g.gather_rows(x, idx);
                    let w1 = self.w1.branch(g, e);
                    let h = g.matmul_nt(xb, w1).expect("ffn w1 shape");
                    let h = g.relu(h);
                    let w2 = self.w2.branch(g, e);
                    let yb = g.matmul_nt(h, w2).expect("ffn w2 shape");
                    let elems: Vec<(usize, usize)> = idx.iter().map(|&r| (r, e)).collect();
                    let mix = g.gather_elems(out.probs, &elems);
                    let yb = g.scale_rows(yb, mix);
                    parts.push((yb, idx.clone()));
                }
                Ok((g.scatter_rows(&parts, rows), vec![out]))
            }
        }
    }
}

// ── multi-head attention sub-layer ───────────────────────────────────

/// Multi-head attention in plain, DMB, or MoE form. Projections are
/// stored head-concatenated as `[d, d]` matrices; the attention softmax
/// over keys is never branched. The gate of a branched layer is
/// evaluated once per distinct input matrix: self-attention evaluates it
/// on X (shared by the Q/K/V projections) and on the concatenated head
/// outputs H; cross-attention evaluates it on the decoder queries, the
/// encoder memory (shared by K/V), and H.
#[derive(Debug, Clone)]
pub struct MhaLayer {
    pub kind: LayerKind,
    pub heads: usize,
    pub wq: Weights,
    pub wk: Weights,
    pub wv: Weights,
    pub wo: Weights,
    pub gate: Option<GatingUnit>,
}

impl MhaLayer {
    pub fn new<R: Rng>(kind: LayerKind, d: usize, heads: usize, rng: &mut R) -> MhaLayer {
        assert!(heads >= 1 && d % heads == 0, "head count must divide d");
        let make = |rng: &mut R| match kind {
            LayerKind::Plain => Weights::Plain(Param::xavier(d, d, rng)),
            LayerKind::Dmb { branches } => Weights::new_shared_private(branches, d, d, rng),
            LayerKind::Moe { branches, .. } => Weights::new_experts(branches, d, d, rng),
        };
        let wq = make(rng);
        let wk = make(rng);
        let wv = make(rng);
        let wo = make(rng);
        let gate = match kind {
            LayerKind::Plain => None,
            LayerKind::Dmb { branches } => Some(GatingUnit::new_dmb(branches, d, rng)),
            LayerKind::Moe { branches, k } => {
                Some(GatingUnit::new_moe(branches, d, k, rng).expect("valid top-k"))
            }
        };
        MhaLayer { kind, heads, wq, wk, wv, wo, gate }
    }

    pub fn fold(&mut self) {
        self.wq.fold();
        self.wk.fold();
        self.wv.fold();
        self.wo.fold();
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        if let Some(gate) = &self.gate {
            visit_gate(gate, prefix, f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        if let Some(gate) = &mut self.gate {
            visit_gate_mut(gate, prefix, f);
        }
    }

    pub fn bind(&self, g: &mut Graph, reg: &mut Vec<TensorId>) -> BoundMha {
        BoundMha {
            kind: self.kind,
            heads: self.heads,
            wq: self.wq.bind(g, reg),
            wk: self.wk.bind(g, reg),
            wv: self.wv.bind(g, reg),
            wo: self.wo.bind(g, reg),
            gate: self.gate.as_ref().map(|gate| bind_gate(gate, g, reg)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundMha {
    pub kind: LayerKind,
    pub heads: usize,
    pub wq: BoundWeights,
    pub wk: BoundWeights,
    pub wv: BoundWeights,
    pub wo: BoundWeights,
    pub gate: Option<BoundGate>,
}

impl BoundMha {
    /// `q_in: [n, d]`, `kv_in: [m, d]` → `[n, d]`. `attn_keep`, when
    /// present, is a row-major `[n, m]` mask of which keys each query may
    /// attend to (causal and/or padding), applied identically per head.
    /// Passing the same tensor as `q_in` and `kv_in` is self-attention
    /// and shares one gate evaluation across the Q/K/V projections.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        q_in: TensorId,
        kv_in: TensorId,
        attn_keep: Option<&[bool]>,
        training: bool,
        rng: &mut R,
    ) -> Result<(TensorId, Vec<GateOutput>), GatingError> {
        let mut gates = Vec::new();
        let (gate_q, gate_kv) = if let Some(gate) = &self.gate {
            let gq = run_gate(g, gate, self.kind, q_in, training, rng)?;
            if kv_in == q_in {
                (Some(gq), None)
            } else {
                let gkv = run_gate(g, gate, self.kind, kv_in, training, rng)?;
                (Some(gq), Some(gkv))
            }
        } else {
            (None, None)
        };
        let kv_gate = gate_kv.as_ref().or(gate_q.as_ref());
        let q = route_linear(g, q_in, &self.wq, gate_q.as_ref());
        let k = route_linear(g, kv_in, &self.wk, kv_gate);
        let v = route_linear(g, kv_in, &self.wv, kv_gate);

        let d = g.shape(q)[1];
        let dh = d / self.heads;
        let n = g.shape(q)[0];
        let m = g.shape(k)[0];
        if let Some(keep) = attn_keep {
            assert_eq!(keep.len(), n * m, "attention mask shape");
        }
        let inv_sqrt = 1.0 / crate::math::sqrt(dh as Real);
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_nt(qh, kh).expect("attention scores shape");
            let s = g.scale(s, inv_sqrt);
            let s = match attn_keep {
                Some(keep) => g.mask_neg_inf(s, keep),
                None => s,
            };
            let p = g.softmax_rows(s);
            ctx.push(g.matmul(p, vh).expect("attention context shape"));
        }
        let heads_out = g.concat_cols(&ctx);

        let gate_h = if let Some(gate) = &self.gate {
            Some(run_gate(g, gate, self.kind, heads_out, training, rng)?)
        } else {
            None
        };
        let out = route_linear(g, heads_out, &self.wo, gate_h.as_ref());

        gates.extend(gate_q);
        gates.extend(gate_kv);
        gates.extend(gate_h);
        Ok((out, gates))
    }
}

// ── gate parameter plumbing ──────────────────────────────────────────

fn visit_gate(gate: &GatingUnit, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
    let n = gate.branches;
    let d = gate.input_dim;
    f(
        format!("{prefix}.gate.w"),
        &Param { data: gate.weight.clone(), shape: vec![n, d] },
    );
    f(
        format!("{prefix}.gate.b"),
        &Param { data: gate.bias.clone(), shape: vec![n] },
    );
    if let Some(nw) = &gate.noise_weight {
        f(
            format!("{prefix}.gate.nw"),
            &Param { data: nw.clone(), shape: vec![n, d] },
        );
    }
}

fn visit_gate_mut(gate: &mut GatingUnit, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
    let n = gate.branches;
    let d = gate.input_dim;
    let mut w = Param { data: core::mem::take(&mut gate.weight), shape: vec![n, d] };
    f(format!("{prefix}.gate.w"), &mut w);
    gate.weight = w.data;
    let mut b = Param { data: core::mem::take(&mut gate.bias), shape: vec![n] };
    f(format!("{prefix}.gate.b"), &mut b);
    gate.bias = b.data;
    if let Some(nw) = &mut gate.noise_weight {
        let mut p = Param { data: core::mem::take(nw), shape: vec![n, d] };
        f(format!("{prefix}.gate.nw"), &mut p);
        *nw = p.data;
    }
}

fn bind_gate(gate: &GatingUnit, g: &mut Graph, reg: &mut Vec<TensorId>) -> BoundGate {
    let bound = gate.bind(g);
    reg.push(bound.weight);
    reg.push(bound.bias);
    if let Some(nw) = bound.noise_weight {
        reg.push(nw);
    }
    bound
}
