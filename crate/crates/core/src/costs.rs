//! Analytic parameter and Mult-Adds accounting, PTR, and int8 weight
//! quantization.
//!
//! Conventions:
//! - One Mult-Add per scalar multiply-accumulate inside a matrix
//!   product; softmax exponentials, layer norms, residual adds, and
//!   activations are not counted. Embedding lookups cost 0.
//! - The analytic count mirrors the executed forward exactly: the
//!   instrumented matmul counter and [`count_mult_adds`] must agree to
//!   the last Mult-Add for every variant ([`executed_mult_adds`] is the
//!   oracle).
//! - Parameter counts describe *deployed* storage: DMB weights are the N
//!   folded branch sets (θ_S is discarded after folding), and gate noise
//!   projections — used only by MoE training — are excluded, which makes
//!   MoE storage identical to folded DMB.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{GateTrace, ModelConfig, TransformerModel, Variant};
use crate::tensor::Graph;
use crate::Real;

/// Cost totals split by component; the parts always sum to the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Breakdown {
    pub embeddings: u64,
    pub encoder: u64,
    pub decoder: u64,
    pub output_projection: u64,
    pub gates: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.embeddings + self.encoder + self.decoder + self.output_projection + self.gates
    }
}

/// Effective matmul multiplicity of a branched sub-layer: every position
/// pays one branch under DMB top-1 and k experts under MoE.
fn multiplicity(cfg: &ModelConfig, is_mha: bool) -> u64 {
    let branched = if is_mha { cfg.branch_mha } else { cfg.branch_ffn };
    match (cfg.variant, branched) {
        (Variant::Moe, true) => cfg.top_k as u64,
        _ => 1,
    }
}

/// Deployed parameter count (see module docs for the conventions).
pub fn count_params(cfg: &ModelConfig) -> Breakdown {
    let d = cfg.d as u64;
    let d_f = cfg.d_f as u64;
    let v = cfg.vocab_size as u64;
    let n = if cfg.variant == Variant::Plain { 1 } else { cfg.branches as u64 };
    let n_mha = if cfg.branch_mha { n } else { 1 };
    let n_ffn = if cfg.branch_ffn { n } else { 1 };
    // one gate per branched sub-layer: [N, d] weight + [N] bias
    let gate = n * d + n;
    let mha_gates = u64::from(cfg.variant != Variant::Plain && cfg.branch_mha);
    let ffn_gates = u64::from(cfg.variant != Variant::Plain && cfg.branch_ffn);

    let enc_layer = n_mha * 4 * d * d + n_ffn * 2 * d * d_f + 2 * 2 * d;
    let dec_layer = n_mha * 8 * d * d + n_ffn * 2 * d * d_f + 3 * 2 * d;
    let enc_gates = (mha_gates + ffn_gates) * gate;
    let dec_gates = (2 * mha_gates + ffn_gates) * gate;

    Breakdown {
        embeddings: if cfg.tie_embeddings { v * d } else { 2 * v * d },
        encoder: cfg.enc_layers as u64 * enc_layer,
        decoder: cfg.dec_layers as u64 * dec_layer,
        output_projection: 0, // tied to (or counted with) the embedding
        gates: cfg.enc_layers as u64 * enc_gates + cfg.dec_layers as u64 * dec_gates,
    }
}

/// Analytic Mult-Adds of one teacher-forced forward pass: encode a
/// source of length `s`, decode a target of length `t`, project the `t`
/// decoder states to the vocabulary. Branched layers evaluate their gate
/// once per distinct input matrix (self-attention: the shared Q/K/V
/// input and the concatenated head outputs; cross-attention: queries,
/// memory, head outputs).
pub fn count_mult_adds(cfg: &ModelConfig, s: usize, t: usize) -> Breakdown {
    let d = cfg.d as u64;
    let d_f = cfg.d_f as u64;
    let v = cfg.vocab_size as u64;
    let (s, t) = (s as u64, t as u64);
    let k_mha = multiplicity(cfg, true);
    let k_ffn = multiplicity(cfg, false);
    let n = cfg.branches as u64;
    let mha_gated = cfg.variant != Variant::Plain && cfg.branch_mha;
    let ffn_gated = cfg.variant != Variant::Plain && cfg.branch_ffn;

    // encoder layer: Q/K/V/O projections, scores + context, FFN
    let enc_layer = k_mha * 4 * s * d * d + 2 * s * s * d + k_ffn * 2 * s * d * d_f;
    // decoder layer: self-attention, cross-attention (K/V over the
    // memory), FFN
    let dec_layer = k_mha * 4 * t * d * d
        + 2 * t * t * d
        + k_mha * (2 * t + 2 * s) * d * d
        + 2 * t * s * d
        + k_ffn * 2 * t * d * d_f;

    // gate rows per layer (one N·d product per row)
    let enc_gate_rows = if mha_gated { 2 * s } else { 0 } + if ffn_gated { s } else { 0 };
    let dec_gate_rows = if mha_gated { 2 * t + (2 * t + s) } else { 0 }
        + if ffn_gated { t } else { 0 };
    let gates = (cfg.enc_layers as u64 * enc_gate_rows + cfg.dec_layers as u64 * dec_gate_rows)
        * n
        * d;

    Breakdown {
        embeddings: 0, // lookups
        encoder: cfg.enc_layers as u64 * enc_layer,
        decoder: cfg.dec_layers as u64 * dec_layer,
        output_projection: t * d * v,
        gates,
    }
}

/// Performance-time ratio: `BLEU / √(Mult-Adds) × 10⁴`.
pub fn ptr(bleu: f64, mult_adds: u64) -> f64 {
    if mult_adds == 0 {
        return 0.0;
    }
    bleu / libm::sqrt(mult_adds as f64) * 1e4
}

/// Run one teacher-forced forward through the real model and return the
/// instrumented matmul counter (the executed-cost oracle for
/// [`count_mult_adds`]).
pub fn executed_mult_adds(model: &TransformerModel, s: usize, t: usize) -> u64 {
    let mut g = Graph::inference();
    let mut reg = Vec::new();
    let bound = model.bind(&mut g, &mut reg);
    g.reset_mult_adds();
    let tok = 4.min(model.cfg.vocab_size - 1);
    let src = alloc::vec![tok; s];
    let tgt_in = alloc::vec![tok; t];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut trace = GateTrace::new(model.cfg.gate_unit_count(), model.cfg.branches.max(1));
    let memory = bound
        .encode(&mut g, &src, false, &mut rng, &mut trace)
        .expect("valid tokens");
    bound
        .decode(&mut g, memory, &src, &tgt_in, false, &mut rng, &mut trace)
        .expect("valid tokens");
    g.mult_adds()
}

// ── int8 quantization ────────────────────────────────────────────────

/// Symmetric per-tensor absmax quantization. An all-zero tensor gets
/// scale 0 and dequantizes to zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub data: Vec<i8>,
    pub scale: Real,
}

pub fn quantize_int8(values: &[Real]) -> QuantizedTensor {
    let absmax = values.iter().fold(0.0 as Real, |m, &v| m.max(v.abs()));
    if absmax == 0.0 {
        return QuantizedTensor { data: alloc::vec![0; values.len()], scale: 0.0 };
    }
    let scale = absmax / 127.0;
    let data = values
        .iter()
        .map(|&v| {
            let q = v / scale;
            let q = if q >= 0.0 { q + 0.5 } else { q - 0.5 };
            (q as i32).clamp(-127, 127) as i8
        })
        .collect();
    QuantizedTensor { data, scale }
}

pub fn dequantize(q: &QuantizedTensor) -> Vec<Real> {
    q.data.iter().map(|&v| v as Real * q.scale).collect()
}

/// Whether a named parameter is quantized in an int8 checkpoint: weight
/// matrices only — embeddings, norms, gains, and biases stay float.
pub fn should_quantize(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && name != "emb" && name != "tgt_emb"
}
