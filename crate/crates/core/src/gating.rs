//! Gating units for branched layers.
//!
//! Two modes share one parameter layout:
//!
//! - **DMB top-1**: a linear layer plus softmax produces per-position
//!   activation probabilities `a(x)`; the branch with the highest
//!   probability is activated. The binary selection is not differentiable,
//!   so the probabilities reach the training objective only through the
//!   diversity and entropy auxiliary losses.
//! - **MoE noisy top-k**: logits `W·x` get Gaussian noise scaled by
//!   `softplus(W_n·x)` during training; everything outside the top k is
//!   masked to −∞ before the softmax, and the surviving weights multiply
//!   the expert outputs (differentiable for k ≥ 2).

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::tensor::{standard_normal, Graph, TensorId};
use crate::Real;

/// How a gating unit turns probabilities into routing decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Activate exactly the highest-probability branch (binary gate).
    DmbTop1,
    /// Mix the top `k` experts with their renormalized softmax weights.
    MoeTopK { k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GatingError {
    /// Noisy top-k gating cannot train with k = 1: the gate output is
    /// constant w.r.t. its input and gradients stop flowing.
    TopKNotTrainable { k: usize },
    /// k must lie in [1, N].
    TopKOutOfRange { k: usize, branches: usize },
}

impl fmt::Display for GatingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GatingError::TopKNotTrainable { k } => {
                write!(f, "MoE gate with k={k} cannot back-propagate; use k >= 2 for training")
            }
            GatingError::TopKOutOfRange { k, branches } => {
                write!(f, "top-k {k} outside [1, {branches}]")
            }
        }
    }
}

/// Parameters of one gating unit.
#[derive(Debug, Clone)]
pub struct GatingUnit {
    pub mode: GateMode,
    /// Branch / expert count N.
    pub branches: usize,
    /// Input feature size d.
    pub input_dim: usize,
    /// Gate projection, `[N, d]`.
    pub weight: Vec<Real>,
    /// Gate bias, `[N]` (DMB only; the MoE gate is bias-free).
    pub bias: Vec<Real>,
    /// Noise projection `[N, d]`, MoE only.
    pub noise_weight: Option<Vec<Real>>,
}

impl GatingUnit {
    pub fn new_dmb<R: Rng>(branches: usize, input_dim: usize, rng: &mut R) -> Self {
        assert!(branches >= 1);
        GatingUnit {
            mode: GateMode::DmbTop1,
            branches,
            input_dim,
            weight: xavier_uniform(input_dim, branches, rng),
            // Random biases leave routing lopsided at initialization; the
            // diversity loss corrects them within the first few hundred
            // steps. Without the auxiliary losses the gate never receives
            // a gradient, so the imbalance persists and the layer
            // degenerates towards a single active branch.
            bias: (0..branches)
                .map(|_| 1.5 * standard_normal(rng))
                .collect(),
            noise_weight: None,
        }
    }

    pub fn new_moe<R: Rng>(
        branches: usize,
        input_dim: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self, GatingError> {
        if k < 1 || k > branches {
            return Err(GatingError::TopKOutOfRange { k, branches });
        }
        Ok(GatingUnit {
            mode: GateMode::MoeTopK { k },
            branches,
            input_dim,
            weight: xavier_uniform(input_dim, branches, rng),
            bias: vec![0.0; branches],
            noise_weight: Some(xavier_uniform(input_dim, branches, rng)),
        })
    }

    /// Insert the gate parameters into a graph as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundGate {
        BoundGate {
            mode: self.mode,
            branches: self.branches,
            weight: g.leaf(self.weight.clone(), &[self.branches, self.input_dim]),
            bias: g.leaf(self.bias.clone(), &[self.branches]),
            noise_weight: self
                .noise_weight
                .as_ref()
                .map(|w| g.leaf(w.clone(), &[self.branches, self.input_dim])),
        }
    }
}

/// Graph-bound gate parameters for one training/inference step.
#[derive(Debug, Clone, Copy)]
pub struct BoundGate {
    pub mode: GateMode,
    pub branches: usize,
    pub weight: TensorId,
    pub bias: TensorId,
    pub noise_weight: Option<TensorId>,
}

/// Routing decision for a batch of positions.
#[derive(Debug, Clone)]
pub enum Selection {
    /// Per-position activated branch index.
    Top1(Vec<usize>),
    /// Per-expert list of routed row indices (each row appears under
    /// exactly k experts).
    TopK { k: usize, rows_per_expert: Vec<Vec<usize>> },
}

/// Per-position activation probabilities plus the routing decision.
#[derive(Debug, Clone)]
pub struct GateOutput {
    /// `[M, N]` probabilities: `a(x)` for DMB, masked-softmax weights for
    /// MoE. Feeds the auxiliary losses; the DMB main path never reads it.
    pub probs: TensorId,
    pub selection: Selection,
}

impl GateOutput {
    /// Activated branch per position (DMB only).
    pub fn top1(&self) -> &[usize] {
        match &self.selection {
            Selection::Top1(idx) => idx,
            Selection::TopK { .. } => panic!("top1 on a top-k selection"),
        }
    }
}

/// DMB gate: `a(x) = softmax(W_g x + b_g)` per row, activate the argmax.
/// Ties break to the lowest branch index.
pub fn gate_dmb(g: &mut Graph, gate: &BoundGate, x: TensorId) -> GateOutput {
    debug_assert_eq!(gate.mode, GateMode::DmbTop1);
    let logits = g.matmul_nt(x, gate.weight).expect("gate projection");
    let logits = g.add_row(logits, gate.bias);
    let probs = g.softmax_rows(logits);
    let n = gate.branches;
    let selection = g
        .data(probs)
        .chunks(n)
        .map(argmax_lowest)
        .collect::<Vec<_>>();
    GateOutput {
        probs,
        selection: Selection::Top1(selection),
    }
}

/// MoE gate: noisy logits, keep-top-k masking to −∞, softmax. Noise is
/// applied only when `training` is true; `k = 1` is rejected during
/// training because the gate output would be constant w.r.t. its input.
pub fn gate_moe<R: Rng>(
    g: &mut Graph,
    gate: &BoundGate,
    x: TensorId,
    training: bool,
    rng: &mut R,
) -> Result<GateOutput, GatingError> {
    let k = match gate.mode {
        GateMode::MoeTopK { k } => k,
        GateMode::DmbTop1 => panic!("gate_moe on a DMB gate"),
    };
    if training && k < 2 {
        return Err(GatingError::TopKNotTrainable { k });
    }
    let mut h = g.matmul_nt(x, gate.weight).expect("gate projection");
    if training {
        let noise_w = gate.noise_weight.expect("MoE gate has noise weights");
        let raw = g.matmul_nt(x, noise_w).expect("noise projection");
        let scale = g.softplus(raw);
        let m = g.data(h).len();
        let shape = g.shape(h).to_vec();
        let eps: Vec<Real> = (0..m).map(|_| standard_normal(rng)).collect();
        let eps = g.constant(eps, &shape);
        let noise = g.mul(scale, eps);
        h = g.add(h, noise);
    }
    let n = gate.branches;
    let rows = g.data(h).len() / n;
    let mut keep = vec![false; rows * n];
    let mut rows_per_expert: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..rows {
        let row = &g.data(h)[r * n..(r + 1) * n];
        for &c in top_k_indices(row, k).iter() {
            keep[r * n + c] = true;
            rows_per_expert[c].push(r);
        }
    }
    let masked = g.mask_neg_inf(h, &keep);
    let probs = g.softmax_rows(masked);
    Ok(GateOutput {
        probs,
        selection: Selection::TopK { k, rows_per_expert },
    })
}

/// Diversity loss: squared coefficient of variation of per-branch
/// importance sums over the batch. Zero iff utilization is balanced.
pub fn diversity_loss(g: &mut Graph, probs: TensorId) -> TensorId {
    g.diversity_loss(probs)
}

/// Entropy loss: mean per-position entropy of the gate distribution.
/// Zero iff every position's gate is fully confident.
pub fn entropy_loss(g: &mut Graph, probs: TensorId) -> TensorId {
    g.entropy_loss(probs)
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the k largest elements; ties break toward lower indices.
fn top_k_indices(row: &[Real], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Xavier/Glorot uniform initialization for a `[fan_out, fan_in]` matrix.
pub fn xavier_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<Real> {
    let a = crate::math::sqrt(6.0 / (fan_in + fan_out) as Real);
    (0..fan_in * fan_out)
        .map(|_| (rng.gen::<Real>() * 2.0 - 1.0) * a)
        .collect()
}
