//! Transformer encoder/decoder assembly: embeddings, sinusoidal positional
//! encoding, plain/DMB/MoE layer stacks, and the combined training loss
//! (cross-entropy plus the weighted mean of per-gate diversity and entropy
//! losses).
//!
//! Batches are processed one sentence at a time through shared bound
//! parameters, so sequences are never padded during training; `encode`
//! still accepts PAD tokens and masks them out of attention and gate
//! pooling so padded and unpadded inputs agree at real positions.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use crate::corpus::{BOS, EOS, PAD};
use crate::gating::{GateOutput, GatingError, Selection};
use crate::layers::{BoundFfn, BoundMha, FfnLayer, LayerKind, MhaLayer, Param};
use crate::tensor::{Graph, TensorId};
use crate::Real;

/// Layer-norm epsilon used everywhere.
pub const NORM_EPS: Real = 1e-6;

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Plain,
    Dmb,
    Moe,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Dmb => "dmb",
            Variant::Moe => "moe",
        })
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Hidden size d.
    pub d: usize,
    /// Feed-forward filter size d_f.
    pub d_f: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Branch / expert count N (branched variants).
    pub branches: usize,
    /// MoE top-k.
    pub top_k: usize,
    /// Auxiliary-loss weight α.
    pub alpha: Real,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    pub dropout: Real,
    pub label_smoothing: Real,
    pub max_len: usize,
    /// Ablation toggles: branch the MHA / FFN sub-layers.
    pub branch_mha: bool,
    pub branch_ffn: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    HeadsDontDivide { heads: usize, d: usize },
    TopKOutOfRange { k: usize, branches: usize },
    NoBranches,
    VocabTooSmall { vocab: usize },
    ZeroLayers,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::HeadsDontDivide { heads, d } => {
                write!(f, "head count {heads} does not divide hidden size {d}")
            }
            ConfigError::TopKOutOfRange { k, branches } => {
                write!(f, "top-k {k} outside [1, {branches}]")
            }
            ConfigError::NoBranches => write!(f, "branch count must be at least 1"),
            ConfigError::VocabTooSmall { vocab } => {
                write!(f, "vocabulary size {vocab} below the 4 reserved ids")
            }
            ConfigError::ZeroLayers => write!(f, "encoder and decoder need at least one layer"),
        }
    }
}

impl ModelConfig {
    /// Smallest config that exercises every code path; used for
    /// finite-difference checks (d=8, H=2, 1+1 layers, V=11, N=2).
    pub fn gradcheck(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            d: 8,
            d_f: 32,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            branches: 2,
            top_k: 2,
            alpha: 0.1,
            vocab_size: 11,
            tie_embeddings: true,
            dropout: 0.0,
            label_smoothing: 0.0,
            max_len: 16,
            branch_mha: true,
            branch_ffn: true,
        }
    }

    /// Desk-scale trainable preset (d=32, 2+2 layers, N=2).
    pub fn micro(variant: Variant, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant,
            d: 32,
            d_f: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            branches: 2,
            top_k: 2,
            alpha: 0.1,
            vocab_size,
            tie_embeddings: true,
            dropout: 0.0,
            label_smoothing: 0.0,
            max_len: 64,
            branch_mha: true,
            branch_ffn: true,
        }
    }

    /// d=128, d_f=512, 6+6 layers, H=8, N=4.
    pub fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            d: 128,
            d_f: 512,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            branches: 4,
            top_k: 2,
            alpha: 0.1,
            vocab_size: 36_992,
            tie_embeddings: true,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 256,
            branch_mha: true,
            branch_ffn: true,
        }
    }

    /// d=256, d_f=1024, 6+6 layers, H=8, N=4.
    pub fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            d: 256,
            d_f: 1024,
            ..ModelConfig::tiny(variant)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(ConfigError::HeadsDontDivide { heads: self.heads, d: self.d });
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(ConfigError::ZeroLayers);
        }
        if self.vocab_size < 4 {
            return Err(ConfigError::VocabTooSmall { vocab: self.vocab_size });
        }
        match self.variant {
            Variant::Plain => Ok(()),
            Variant::Dmb => {
                if self.branches == 0 {
                    Err(ConfigError::NoBranches)
                } else {
                    Ok(())
                }
            }
            Variant::Moe => {
                if self.branches == 0 {
                    Err(ConfigError::NoBranches)
                } else if self.top_k == 0 || self.top_k > self.branches {
                    Err(ConfigError::TopKOutOfRange { k: self.top_k, branches: self.branches })
                } else {
                    Ok(())
                }
            }
        }
    }

    /// The [`LayerKind`] of a sub-layer, honoring the ablation toggles.
    pub fn sublayer_kind(&self, is_mha: bool) -> LayerKind {
        let branched = if is_mha { self.branch_mha } else { self.branch_ffn };
        match (self.variant, branched) {
            (Variant::Plain, _) | (_, false) => LayerKind::Plain,
            (Variant::Dmb, true) => LayerKind::Dmb { branches: self.branches },
            (Variant::Moe, true) => LayerKind::Moe { branches: self.branches, k: self.top_k },
        }
    }

    /// Number of gating units L in Eq-28 terms: one per branched
    /// sub-layer (encoder: MHA + FFN; decoder: masked MHA + cross MHA +
    /// FFN).
    pub fn gate_unit_count(&self) -> usize {
        if self.variant == Variant::Plain {
            return 0;
        }
        let mha = usize::from(self.branch_mha);
        let ffn = usize::from(self.branch_ffn);
        self.enc_layers * (mha + ffn) + self.dec_layers * (2 * mha + ffn)
    }

    /// Gate units contributed by the encoder stack (decoder units follow).
    pub fn encoder_gate_units(&self) -> usize {
        if self.variant == Variant::Plain {
            return 0;
        }
        self.enc_layers * (usize::from(self.branch_mha) + usize::from(self.branch_ffn))
    }
}

// ── errors ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    TokenOutOfRange { token: usize, vocab: usize },
    SequenceTooLong { len: usize, max: usize },
    EmptySequence,
    Gating(GatingError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} outside vocabulary of size {vocab}")
            }
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            ModelError::EmptySequence => write!(f, "empty token sequence"),
            ModelError::Gating(e) => write!(f, "{e}"),
        }
    }
}

impl From<GatingError> for ModelError {
    fn from(e: GatingError) -> ModelError {
        ModelError::Gating(e)
    }
}

// ── layer norm ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Param,
    pub bias: Param,
}

impl Norm {
    fn new(d: usize) -> Norm {
        Norm {
            gain: Param { data: vec![1.0; d], shape: vec![d] },
            bias: Param::zeros(&[d]),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    fn bind(&self, g: &mut Graph, reg: &mut Vec<TensorId>) -> (TensorId, TensorId) {
        let gain = g.leaf(self.gain.data.clone(), &self.gain.shape);
        let bias = g.leaf(self.bias.data.clone(), &self.bias.shape);
        reg.push(gain);
        reg.push(bias);
        (gain, bias)
    }
}

// ── model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub mha: MhaLayer,
    pub norm1: Norm,
    pub ffn: FfnLayer,
    pub norm2: Norm,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_mha: MhaLayer,
    pub norm1: Norm,
    pub cross_mha: MhaLayer,
    pub norm2: Norm,
    pub ffn: FfnLayer,
    pub norm3: Norm,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub cfg: ModelConfig,
    /// Tied embedding `[V, d]`, or the source table when untied.
    pub embedding: Param,
    /// Target-side embedding when untied (also the output projection).
    pub tgt_embedding: Option<Param>,
    /// Sinusoidal positional encoding `[max_len, d]` (not trained).
    pub positional: Vec<Real>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

impl TransformerModel {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<TransformerModel, ConfigError> {
        cfg.validate()?;
        let mha_kind = cfg.sublayer_kind(true);
        let ffn_kind = cfg.sublayer_kind(false);
        let encoder = (0..cfg.enc_layers)
            .map(|_| EncoderLayer {
                mha: MhaLayer::new(mha_kind, cfg.d, cfg.heads, rng),
                norm1: Norm::new(cfg.d),
                ffn: FfnLayer::new(ffn_kind, cfg.d, cfg.d_f, rng),
                norm2: Norm::new(cfg.d),
            })
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|_| DecoderLayer {
                self_mha: MhaLayer::new(mha_kind, cfg.d, cfg.heads, rng),
                norm1: Norm::new(cfg.d),
                cross_mha: MhaLayer::new(mha_kind, cfg.d, cfg.heads, rng),
                norm2: Norm::new(cfg.d),
                ffn: FfnLayer::new(ffn_kind, cfg.d, cfg.d_f, rng),
                norm3: Norm::new(cfg.d),
            })
            .collect();
        let embedding = Param::xavier(cfg.vocab_size, cfg.d, rng);
        let tgt_embedding = if cfg.tie_embeddings {
            None
        } else {
            Some(Param::xavier(cfg.vocab_size, cfg.d, rng))
        };
        let positional = sinusoidal_table(cfg.max_len, cfg.d);
        Ok(TransformerModel { cfg, embedding, tgt_embedding, positional, encoder, decoder })
    }

    /// Fold every shared-private weight into per-branch form (inference
    /// deployment). Idempotent; no-op for plain and MoE models.
    pub fn fold(&mut self) {
        for layer in &mut self.encoder {
            layer.mha.fold();
            layer.ffn.fold();
        }
        for layer in &mut self.decoder {
            layer.self_mha.fold();
            layer.cross_mha.fold();
            layer.ffn.fold();
        }
    }

    pub fn is_folded(&self) -> bool {
        self.encoder.iter().all(|l| l.mha.wq.is_folded_or_plain() && l.ffn.w1.is_folded_or_plain())
            && self.decoder.iter().all(|l| {
                l.self_mha.wq.is_folded_or_plain()
                    && l.cross_mha.wq.is_folded_or_plain()
                    && l.ffn.w1.is_folded_or_plain()
            })
    }

    /// Visit every parameter with a stable name, in binding order.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        f(String::from("emb"), &self.embedding);
        if let Some(t) = &self.tgt_embedding {
            f(String::from("tgt_emb"), t);
        }
        for (i, l) in self.encoder.iter().enumerate() {
            l.mha.visit(&format!("enc{i}.mha"), f);
            l.norm1.visit(&format!("enc{i}.norm1"), f);
            l.ffn.visit(&format!("enc{i}.ffn"), f);
            l.norm2.visit(&format!("enc{i}.norm2"), f);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.self_mha.visit(&format!("dec{i}.self"), f);
            l.norm1.visit(&format!("dec{i}.norm1"), f);
            l.cross_mha.visit(&format!("dec{i}.cross"), f);
            l.norm2.visit(&format!("dec{i}.norm2"), f);
            l.ffn.visit(&format!("dec{i}.ffn"), f);
            l.norm3.visit(&format!("dec{i}.norm3"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        f(String::from("emb"), &mut self.embedding);
        if let Some(t) = &mut self.tgt_embedding {
            f(String::from("tgt_emb"), t);
        }
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.mha.visit_mut(&format!("enc{i}.mha"), f);
            l.norm1.visit_mut(&format!("enc{i}.norm1"), f);
            l.ffn.visit_mut(&format!("enc{i}.ffn"), f);
            l.norm2.visit_mut(&format!("enc{i}.norm2"), f);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.self_mha.visit_mut(&format!("dec{i}.self"), f);
            l.norm1.visit_mut(&format!("dec{i}.norm1"), f);
            l.cross_mha.visit_mut(&format!("dec{i}.cross"), f);
            l.norm2.visit_mut(&format!("dec{i}.norm2"), f);
            l.ffn.visit_mut(&format!("dec{i}.ffn"), f);
            l.norm3.visit_mut(&format!("dec{i}.norm3"), f);
        }
    }

    /// Total trainable parameter count (actual storage, not the analytic
    /// deployment count in `costs`).
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.data.len());
        n
    }

    /// Bind all parameters as graph leaves; `reg` receives the leaf ids
    /// in [`TransformerModel::visit`] order.
    pub fn bind(&self, g: &mut Graph, reg: &mut Vec<TensorId>) -> BoundModel {
        let emb = g.leaf(self.embedding.data.clone(), &self.embedding.shape);
        reg.push(emb);
        let tgt_emb = self.tgt_embedding.as_ref().map(|t| {
            let id = g.leaf(t.data.clone(), &t.shape);
            reg.push(id);
            id
        });
        let encoder = self
            .encoder
            .iter()
            .map(|l| BoundEncoderLayer {
                mha: l.mha.bind(g, reg),
                norm1: l.norm1.bind(g, reg),
                ffn: l.ffn.bind(g, reg),
                norm2: l.norm2.bind(g, reg),
            })
            .collect();
        let decoder = self
            .decoder
            .iter()
            .map(|l| BoundDecoderLayer {
                self_mha: l.self_mha.bind(g, reg),
                norm1: l.norm1.bind(g, reg),
                cross_mha: l.cross_mha.bind(g, reg),
                norm2: l.norm2.bind(g, reg),
                ffn: l.ffn.bind(g, reg),
                norm3: l.norm3.bind(g, reg),
            })
            .collect();
        BoundModel {
            cfg: self.cfg.clone(),
            emb,
            tgt_emb,
            positional: self.positional.clone(),
            encoder,
            decoder,
        }
    }
}

/// Standard sinusoidal positional-encoding table, row-major `[len, d]`.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<Real> {
    let mut t = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = crate::math::powf(10_000.0, 2.0 * i as Real / d as Real);
            let angle = pos as Real / rate;
            t[pos * d + 2 * i] = crate::math::sin(angle);
            t[pos * d + 2 * i + 1] = crate::math::cos(angle);
        }
    }
    t
}

// ── bound model ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BoundEncoderLayer {
    pub mha: BoundMha,
    pub norm1: (TensorId, TensorId),
    pub ffn: BoundFfn,
    pub norm2: (TensorId, TensorId),
}

#[derive(Debug, Clone)]
pub struct BoundDecoderLayer {
    pub self_mha: BoundMha,
    pub norm1: (TensorId, TensorId),
    pub cross_mha: BoundMha,
    pub norm2: (TensorId, TensorId),
    pub ffn: BoundFfn,
    pub norm3: (TensorId, TensorId),
}

/// Per-gating-unit records accumulated over a batch: pooled probability
/// tensors (padding rows excluded) and branch utilization counts.
#[derive(Debug, Clone, Default)]
pub struct GateTrace {
    pub units: Vec<UnitTrace>,
}

#[derive(Debug, Clone)]
pub struct UnitTrace {
    pub probs: Vec<TensorId>,
    pub counts: Vec<u64>,
}

impl GateTrace {
    pub fn new(units: usize, branches: usize) -> GateTrace {
        GateTrace {
            units: (0..units)
                .map(|_| UnitTrace { probs: Vec::new(), counts: vec![0; branches] })
                .collect(),
        }
    }

    /// Record one gate evaluation under unit `u`, keeping only `real`
    /// rows (all rows when `real` is `None`).
    fn record(&mut self, g: &mut Graph, u: usize, out: &GateOutput, real: Option<&[usize]>) {
        let unit = &mut self.units[u];
        let probs = match real {
            Some(rows) => g.gather_rows(out.probs, rows),
            None => out.probs,
        };
        unit.probs.push(probs);
        match &out.selection {
            Selection::Top1(sel) => match real {
                Some(rows) => {
                    for &r in rows {
                        unit.counts[sel[r]] += 1;
                    }
                }
                None => {
                    for &b in sel {
                        unit.counts[b] += 1;
                    }
                }
            },
            Selection::TopK { rows_per_expert, .. } => {
                for (e, rows) in rows_per_expert.iter().enumerate() {
                    unit.counts[e] += match real {
                        Some(keep) => rows.iter().filter(|r| keep.contains(r)).count() as u64,
                        None => rows.len() as u64,
                    };
                }
            }
        }
    }

    fn record_all(
        &mut self,
        g: &mut Graph,
        u: usize,
        outs: &[GateOutput],
        real: Option<&[usize]>,
    ) {
        for out in outs {
            self.record(g, u, out, real);
        }
    }

    /// Utilization share per branch for unit `u`.
    pub fn utilization(&self, u: usize) -> Vec<Real> {
        let total: u64 = self.units[u].counts.iter().sum();
        self.units[u]
            .counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as Real / total as Real })
            .collect()
    }
}

/// Graph-bound model for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub cfg: ModelConfig,
    pub emb: TensorId,
    pub tgt_emb: Option<TensorId>,
    positional: Vec<Real>,
    pub encoder: Vec<BoundEncoderLayer>,
    pub decoder: Vec<BoundDecoderLayer>,
}

impl BoundModel {
    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max: self.cfg.max_len });
        }
        for &t in tokens {
            if t >= self.cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: self.cfg.vocab_size });
            }
        }
        Ok(())
    }

    /// Scaled embedding lookup plus positional encoding.
    fn embed(&self, g: &mut Graph, table: TensorId, tokens: &[usize]) -> TensorId {
        let d = self.cfg.d;
        let rows = g.gather_rows(table, tokens);
        let rows = g.scale(rows, crate::math::sqrt(d as Real));
        let pe = g.constant(self.positional[..tokens.len() * d].to_vec(), &[tokens.len(), d]);
        g.add(rows, pe)
    }

    fn sublayer_finish<R: Rng>(
        &self,
        g: &mut Graph,
        x: TensorId,
        sub: TensorId,
        norm: (TensorId, TensorId),
        training: bool,
        rng: &mut R,
    ) -> TensorId {
        let sub = if training && self.cfg.dropout > 0.0 {
            g.dropout(sub, self.cfg.dropout, rng)
        } else {
            sub
        };
        let sum = g.add(x, sub);
        g.layer_norm(sum, norm.0, norm.1, NORM_EPS)
    }

    /// Encode a source sequence. PAD tokens are masked out of attention
    /// and gate pooling; outputs at real positions match the unpadded
    /// forward. Gate evaluations are appended to `trace`.
    pub fn encode<R: Rng>(
        &self,
        g: &mut Graph,
        src: &[usize],
        training: bool,
        rng: &mut R,
        trace: &mut GateTrace,
    ) -> Result<TensorId, ModelError> {
        self.check_tokens(src)?;
        let s = src.len();
        let real: Vec<usize> = (0..s).filter(|&i| src[i] != PAD).collect();
        let real = if real.len() == s { None } else { Some(real) };
        let attn_keep: Option<Vec<bool>> = real.as_ref().map(|_| {
            let mut keep = vec![false; s * s];
            for q in 0..s {
                for k in 0..s {
                    keep[q * s + k] = src[k] != PAD;
                }
            }
            keep
        });

        let mut x = self.embed(g, self.emb, src);
        let mut unit = 0;
        for layer in &self.encoder {
            let (sub, gates) =
                layer.mha.forward(g, x, x, attn_keep.as_deref(), training, rng)?;
            if layer.mha.gate.is_some() {
                trace.record_all(g, unit, &gates, real.as_deref());
                unit += 1;
            }
            x = self.sublayer_finish(g, x, sub, layer.norm1, training, rng);

            let (sub, gates) = layer.ffn.forward(g, x, training, rng)?;
            if layer.ffn.gate.is_some() {
                trace.record_all(g, unit, &gates, real.as_deref());
                unit += 1;
            }
            x = self.sublayer_finish(g, x, sub, layer.norm2, training, rng);
        }
        Ok(x)
    }

    /// Teacher-forced decoder pass: `tgt_in` (BOS-shifted) against the
    /// encoder `memory` for source `src` (needed for its padding mask).
    /// Returns `[T, V]` next-token logits.
    pub fn decode<R: Rng>(
        &self,
        g: &mut Graph,
        memory: TensorId,
        src: &[usize],
        tgt_in: &[usize],
        training: bool,
        rng: &mut R,
        trace: &mut GateTrace,
    ) -> Result<TensorId, ModelError> {
        self.check_tokens(tgt_in)?;
        let t = tgt_in.len();
        let s = src.len();
        let causal: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
        let src_padded = src.iter().any(|&tok| tok == PAD);
        let cross_keep: Option<Vec<bool>> = if src_padded {
            let mut keep = vec![false; t * s];
            for q in 0..t {
                for k in 0..s {
                    keep[q * s + k] = src[k] != PAD;
                }
            }
            Some(keep)
        } else {
            None
        };

        let table = self.tgt_emb.unwrap_or(self.emb);
        let mut x = self.embed(g, table, tgt_in);
        let mut unit = self.cfg.encoder_gate_units();
        for layer in &self.decoder {
            let (sub, gates) = layer.self_mha.forward(g, x, x, Some(&causal), training, rng)?;
            if layer.self_mha.gate.is_some() {
                trace.record_all(g, unit, &gates, None);
                unit += 1;
            }
            x = self.sublayer_finish(g, x, sub, layer.norm1, training, rng);

            let (sub, gates) =
                layer.cross_mha.forward(g, x, memory, cross_keep.as_deref(), training, rng)?;
            if layer.cross_mha.gate.is_some() {
                // the memory-side gate evaluation carries source rows;
                // drop its padded rows from pooling. Gate order is
                // [queries, memory, heads-out].
                for (gi, out) in gates.iter().enumerate() {
                    let real: Option<Vec<usize>> = if gi == 1 && src_padded {
                        Some((0..s).filter(|&i| src[i] != PAD).collect())
                    } else {
                        None
                    };
                    trace.record(g, unit, out, real.as_deref());
                }
                unit += 1;
            }
            x = self.sublayer_finish(g, x, sub, layer.norm2, training, rng);

            let (sub, gates) = layer.ffn.forward(g, x, training, rng)?;
            if layer.ffn.gate.is_some() {
                trace.record_all(g, unit, &gates, None);
                unit += 1;
            }
            x = self.sublayer_finish(g, x, sub, layer.norm3, training, rng);
        }
        let table = self.tgt_emb.unwrap_or(self.emb);
        Ok(g.matmul_nt(x, table).expect("output projection"))
    }

    /// Next-token logits for a prefix (recomputes the full prefix).
    pub fn decode_step<R: Rng>(
        &self,
        g: &mut Graph,
        memory: TensorId,
        src: &[usize],
        prefix: &[usize],
        rng: &mut R,
    ) -> Result<Vec<Real>, ModelError> {
        let mut trace = GateTrace::new(self.cfg.gate_unit_count(), self.cfg.branches.max(1));
        let logits = self.decode(g, memory, src, prefix, false, rng, &mut trace)?;
        let v = self.cfg.vocab_size;
        let t = prefix.len();
        Ok(g.data(logits)[(t - 1) * v..t * v].to_vec())
    }
}

// ── combined loss ────────────────────────────────────────────────────

/// One aligned sentence pair of raw token ids (no BOS/EOS/PAD).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Scalar breakdown of one training loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// L = L_m + α · (1/L) Σ (L_{d,i} + L_{e,i}).
    pub total: TensorId,
    pub lm: TensorId,
    /// Mean auxiliary term (1/L) Σ (L_d + L_e), when gates exist.
    pub aux: Option<TensorId>,
    /// Per-unit diversity / entropy loss values (for logging).
    pub ld: Vec<Real>,
    pub le: Vec<Real>,
    pub trace: GateTrace,
    pub target_tokens: usize,
}

impl BoundModel {
    /// Combined loss over a batch of sentence pairs. Cross-entropy is
    /// averaged over all target positions of the batch; gate probs are
    /// pooled per gating unit across the whole batch.
    pub fn total_loss<R: Rng>(
        &self,
        g: &mut Graph,
        batch: &[SentencePair],
        training: bool,
        rng: &mut R,
    ) -> Result<LossOutput, ModelError> {
        assert!(!batch.is_empty(), "empty batch");
        let mut trace = GateTrace::new(self.cfg.gate_unit_count(), self.cfg.branches.max(1));
        let mut logits_parts = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for pair in batch {
            let memory = self.encode(g, &pair.src, training, rng, &mut trace)?;
            let mut tgt_in = Vec::with_capacity(pair.tgt.len() + 1);
            tgt_in.push(BOS);
            tgt_in.extend_from_slice(&pair.tgt);
            let logits =
                self.decode(g, memory, &pair.src, &tgt_in, training, rng, &mut trace)?;
            logits_parts.push(logits);
            targets.extend_from_slice(&pair.tgt);
            targets.push(EOS);
        }
        let all_logits = if logits_parts.len() == 1 {
            logits_parts[0]
        } else {
            g.concat_rows(&logits_parts)
        };
        let lm = g
            .cross_entropy(all_logits, &targets, self.cfg.label_smoothing)
            .expect("targets in range");

        let mut ld = Vec::new();
        let mut le = Vec::new();
        let mut aux = None;
        if !trace.units.is_empty() {
            let mut sum: Option<TensorId> = None;
            for unit in &trace.units {
                let pooled = if unit.probs.len() == 1 {
                    unit.probs[0]
                } else {
                    g.concat_rows(&unit.probs)
                };
                let d = g.diversity_loss(pooled);
                let e = g.entropy_loss(pooled);
                ld.push(g.value(d));
                le.push(g.value(e));
                let u = g.add(d, e);
                sum = Some(match sum {
                    Some(s) => g.add(s, u),
                    None => u,
                });
            }
            let mean = g.scale(sum.expect("at least one unit"), 1.0 / trace.units.len() as Real);
            aux = Some(mean);
        }
        let total = match aux {
            Some(a) if self.cfg.alpha != 0.0 => {
                let scaled = g.scale(a, self.cfg.alpha);
                g.add(lm, scaled)
            }
            _ => lm,
        };
        Ok(LossOutput { total, lm, aux, ld, le, trace, target_tokens: targets.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn build(variant: Variant, seed: u64) -> TransformerModel {
        TransformerModel::new(ModelConfig::gradcheck(variant), &mut rng(seed)).unwrap()
    }

    #[test]
    fn encode_single_token_has_shape_1_d() {
        let m = build(Variant::Plain, 1);
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let b = m.bind(&mut g, &mut reg);
        let mut trace = GateTrace::new(0, 1);
        let y = b.encode(&mut g, &[5], false, &mut rng(0), &mut trace).unwrap();
        assert_eq!(g.shape(y), &[1, 8]);
    }

    #[test]
    fn gate_unit_counts_match_architecture() {
        assert_eq!(ModelConfig::tiny(Variant::Dmb).gate_unit_count(), 30);
        assert_eq!(ModelConfig::tiny(Variant::Plain).gate_unit_count(), 0);
        assert_eq!(ModelConfig::gradcheck(Variant::Dmb).gate_unit_count(), 5);
        let mut ablated = ModelConfig::tiny(Variant::Dmb);
        ablated.branch_mha = false;
        assert_eq!(ablated.gate_unit_count(), 12);
    }

    #[test]
    fn every_gate_unit_gets_records() {
        let m = build(Variant::Dmb, 2);
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let b = m.bind(&mut g, &mut reg);
        let batch = [SentencePair { src: vec![4, 5, 6], tgt: vec![6, 5, 4] }];
        let out = b.total_loss(&mut g, &batch, true, &mut rng(0)).unwrap();
        assert_eq!(out.trace.units.len(), 5);
        for (u, unit) in out.trace.units.iter().enumerate() {
            assert!(!unit.probs.is_empty(), "unit {u} recorded");
            assert!(unit.counts.iter().sum::<u64>() > 0, "unit {u} counted");
        }
        // enc MHA pools X + H, enc FFN pools once, dec self 2, cross 3, ffn 1
        let lens: Vec<usize> = out.trace.units.iter().map(|u| u.probs.len()).collect();
        assert_eq!(lens, vec![2, 1, 2, 3, 1]);
    }

    #[test]
    fn plain_loss_is_pure_cross_entropy() {
        let m = build(Variant::Plain, 3);
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let b = m.bind(&mut g, &mut reg);
        let batch = [SentencePair { src: vec![4, 5], tgt: vec![5, 4] }];
        let out = b.total_loss(&mut g, &batch, true, &mut rng(0)).unwrap();
        assert!(out.aux.is_none());
        assert_eq!(g.value(out.total), g.value(out.lm));
    }

    #[test]
    fn alpha_zero_gives_exactly_lm() {
        let mut cfg = ModelConfig::gradcheck(Variant::Dmb);
        cfg.alpha = 0.0;
        let m = TransformerModel::new(cfg, &mut rng(4)).unwrap();
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let b = m.bind(&mut g, &mut reg);
        let batch = [SentencePair { src: vec![4, 5, 6], tgt: vec![4, 5, 6] }];
        let out = b.total_loss(&mut g, &batch, true, &mut rng(0)).unwrap();
        assert_eq!(out.total, out.lm);
        assert!(out.aux.is_some(), "aux still reported for logging");
    }

    #[test]
    fn loss_decomposition_recomputes() {
        for variant in [Variant::Dmb, Variant::Moe] {
            let m = build(variant, 5);
            let mut g = Graph::new();
            let mut reg = Vec::new();
            let b = m.bind(&mut g, &mut reg);
            let batch = [
                SentencePair { src: vec![4, 5, 6, 7], tgt: vec![7, 6, 5] },
                SentencePair { src: vec![8, 9], tgt: vec![9, 8] },
            ];
            let out = b.total_loss(&mut g, &batch, true, &mut rng(0)).unwrap();
            let l_units = out.ld.len() as Real;
            let aux: Real = out
                .ld
                .iter()
                .zip(&out.le)
                .map(|(d, e)| d + e)
                .sum::<Real>()
                / l_units;
            let expect = g.value(out.lm) + 0.1 * aux;
            assert!(
                (g.value(out.total) - expect).abs() < 1e-5,
                "{variant}: {} vs {expect}",
                g.value(out.total)
            );
            assert!((g.value(out.aux.unwrap()) - aux).abs() < 1e-5);
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = build(Variant::Dmb, 6);
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let b = m.bind(&mut g, &mut reg);
        let src = [4, 5, 6];
        let mut trace = GateTrace::new(5, 2);
        let memory = b.encode(&mut g, &src, false, &mut rng(0), &mut trace).unwrap();
        let l1 = b
            .decode(&mut g, memory, &src, &[BOS, 7, 8, 9], false, &mut rng(0), &mut trace)
            .unwrap();
        let l2 = b
            .decode(&mut g, memory, &src, &[BOS, 7, 10, 4], false, &mut rng(0), &mut trace)
            .unwrap();
        // positions 0 and 1 see the same prefix; logits must agree
        let v = 11;
        assert_eq!(&g.data(l1)[..2 * v], &g.data(l2)[..2 * v]);
        assert_ne!(&g.data(l1)[2 * v..], &g.data(l2)[2 * v..]);
    }

    #[test]
    fn padding_does_not_move_real_positions() {
        for variant in [Variant::Plain, Variant::Dmb] {
            let m = build(variant, 7);
            let mut g = Graph::new();
            let mut reg = Vec::new();
            let b = m.bind(&mut g, &mut reg);
            let mut trace = GateTrace::new(b.cfg.gate_unit_count(), 2);
            let y1 = b.encode(&mut g, &[4, 5, 6], false, &mut rng(0), &mut trace).unwrap();
            let y2 = b
                .encode(&mut g, &[4, 5, 6, PAD, PAD], false, &mut rng(0), &mut trace)
                .unwrap();
            let d = 8;
            for i in 0..3 * d {
                assert!(
                    (g.data(y1)[i] - g.data(y2)[i]).abs() < 1e-5,
                    "{variant}: element {i}"
                );
            }
        }
    }

    #[test]
    fn input_validation_errors() {
        let m = build(Variant::Plain, 8);
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let b = m.bind(&mut g, &mut reg);
        let mut trace = GateTrace::new(0, 1);
        let r = &mut rng(0);
        assert_eq!(
            b.encode(&mut g, &[11], false, r, &mut trace).unwrap_err(),
            ModelError::TokenOutOfRange { token: 11, vocab: 11 }
        );
        assert_eq!(
            b.encode(&mut g, &[], false, r, &mut trace).unwrap_err(),
            ModelError::EmptySequence
        );
        let long = vec![4usize; 17];
        assert_eq!(
            b.encode(&mut g, &long, false, r, &mut trace).unwrap_err(),
            ModelError::SequenceTooLong { len: 17, max: 16 }
        );
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = ModelConfig::gradcheck(Variant::Plain);
        cfg.heads = 3;
        assert_eq!(cfg.validate().unwrap_err(), ConfigError::HeadsDontDivide { heads: 3, d: 8 });
        let mut cfg = ModelConfig::gradcheck(Variant::Moe);
        cfg.top_k = 5;
        assert_eq!(
            cfg.validate().unwrap_err(),
            ConfigError::TopKOutOfRange { k: 5, branches: 2 }
        );
        assert!(ModelConfig::tiny(Variant::Dmb).validate().is_ok());
    }

    #[test]
    fn same_seed_same_loss() {
        let run = |seed: u64| {
            let m = build(Variant::Moe, 9);
            let mut g = Graph::new();
            let mut reg = Vec::new();
            let b = m.bind(&mut g, &mut reg);
            let batch = [SentencePair { src: vec![4, 5, 6], tgt: vec![6, 5] }];
            let out = b.total_loss(&mut g, &batch, true, &mut rng(seed)).unwrap();
            g.value(out.total)
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn bind_and_visit_agree() {
        for variant in [Variant::Plain, Variant::Dmb, Variant::Moe] {
            let m = build(variant, 10);
            let mut g = Graph::new();
            let mut reg = Vec::new();
            m.bind(&mut g, &mut reg);
            let mut names = Vec::new();
            m.visit(&mut |name, p| names.push((name, p.shape.clone())));
            assert_eq!(reg.len(), names.len());
            for (id, (name, shape)) in reg.iter().zip(&names) {
                assert_eq!(g.shape(*id), &shape[..], "{name}");
            }
            // names are unique
            let mut sorted: Vec<_> = names.iter().map(|(n, _)| n.clone()).collect();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), names.len());
        }
    }

    #[test]
    fn fold_then_decode_matches_training_forward() {
        let m = build(Variant::Dmb, 11);
        let mut folded = m.clone();
        folded.fold();
        assert!(folded.is_folded() && !m.is_folded());
        let run = |m: &TransformerModel| {
            let mut g = Graph::inference();
            let mut reg = Vec::new();
            let b = m.bind(&mut g, &mut reg);
            let src = [4, 5, 6, 7];
            let mut trace = GateTrace::new(b.cfg.gate_unit_count(), 2);
            let mem = b.encode(&mut g, &src, false, &mut rng(0), &mut trace).unwrap();
            b.decode_step(&mut g, mem, &src, &[BOS, 8, 9], &mut rng(0)).unwrap()
        };
        assert_eq!(run(&m), run(&folded), "bit-exact folding through the full model");
    }

    #[test]
    fn decode_step_matches_full_recomputation() {
        let m = build(Variant::Moe, 12);
        let mut g = Graph::inference();
        let mut reg = Vec::new();
        let b = m.bind(&mut g, &mut reg);
        let src = [4, 5];
        let mut trace = GateTrace::new(b.cfg.gate_unit_count(), 2);
        let mem = b.encode(&mut g, &src, false, &mut rng(0), &mut trace).unwrap();
        let prefix = [BOS, 6, 7];
        let step = b.decode_step(&mut g, mem, &src, &prefix, &mut rng(0)).unwrap();
        let full = b
            .decode(&mut g, mem, &src, &prefix, false, &mut rng(0), &mut trace)
            .unwrap();
        let v = 11;
        for (a, b) in step.iter().zip(&g.data(full)[2 * v..]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
