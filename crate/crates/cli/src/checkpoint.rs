//! Checkpoint files: a text manifest (format version, model config,
//! tensor names/shapes/dtypes/byte offsets) followed by raw
//! little-endian tensor data in manifest order. Weights are stored as
//! 32-bit floats; int8 checkpoints store quantized weight matrices plus
//! a per-tensor scale in the manifest, keeping embeddings, norms, and
//! biases float. Folded checkpoints carry only the per-branch weights —
//! the shared set is gone after folding.

use std::fmt::Write as _;
use std::path::Path;

use dmb_core::costs::{dequantize, quantize_int8, should_quantize, QuantizedTensor};
use dmb_core::model::{ModelConfig, TransformerModel, Variant};
use dmb_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::parse_variant;
use crate::error::{CliError, Result};

const MAGIC: &str = "dmb-checkpoint v1";
const DATA_MARKER: &str = "[data]\n";

fn render_config(cfg: &ModelConfig, folded: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[config]");
    let _ = writeln!(s, "variant = {}", cfg.variant);
    let _ = writeln!(s, "d = {}", cfg.d);
    let _ = writeln!(s, "d_f = {}", cfg.d_f);
    let _ = writeln!(s, "heads = {}", cfg.heads);
    let _ = writeln!(s, "enc_layers = {}", cfg.enc_layers);
    let _ = writeln!(s, "dec_layers = {}", cfg.dec_layers);
    let _ = writeln!(s, "branches = {}", cfg.branches);
    let _ = writeln!(s, "top_k = {}", cfg.top_k);
    let _ = writeln!(s, "alpha = {}", cfg.alpha);
    let _ = writeln!(s, "vocab_size = {}", cfg.vocab_size);
    let _ = writeln!(s, "tie_embeddings = {}", cfg.tie_embeddings);
    let _ = writeln!(s, "dropout = {}", cfg.dropout);
    let _ = writeln!(s, "label_smoothing = {}", cfg.label_smoothing);
    let _ = writeln!(s, "max_len = {}", cfg.max_len);
    let _ = writeln!(s, "branch_mha = {}", cfg.branch_mha);
    let _ = writeln!(s, "branch_ffn = {}", cfg.branch_ffn);
    let _ = writeln!(s, "folded = {folded}");
    s
}

/// Serialize a model, optionally quantizing weight matrices to int8.
pub fn to_bytes(model: &TransformerModel, quantized: bool) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    header.push_str(&render_config(&model.cfg, model.is_folded()));
    header.push_str("[tensors]\n");
    let mut blob: Vec<u8> = Vec::new();
    model.visit(&mut |name, p| {
        let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        let offset = blob.len();
        if quantized && should_quantize(&name, &p.shape) {
            let q = quantize_int8(&p.data);
            let _ = writeln!(
                header,
                "{name} i8 {} @{offset} scale={}",
                shape.join("x"),
                q.scale
            );
            blob.extend(q.data.iter().map(|&v| v as u8));
        } else {
            let _ = writeln!(header, "{name} f32 {} @{offset}", shape.join("x"));
            for &v in &p.data {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    });
    let mut out = header.into_bytes();
    out.extend_from_slice(DATA_MARKER.as_bytes());
    out.extend_from_slice(&blob);
    out
}

pub fn save(model: &TransformerModel, path: &Path, quantized: bool) -> Result<()> {
    std::fs::write(path, to_bytes(model, quantized))
        .map_err(|e| CliError::Data(format!("write `{}`: {e}", path.display())))
}

struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    scale: Real,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("checkpoint `{}`: {msg}", path.display()))
}

pub fn load(path: &Path) -> Result<TransformerModel> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Data(format!("read `{}`: {e}", path.display())))?;
    from_bytes(&bytes).map_err(|e| data_err(path, e))
}

/// Parse a checkpoint, rebuilding the model (folded when the manifest
/// says so) and overwriting every parameter from the stored data.
pub fn from_bytes(bytes: &[u8]) -> std::result::Result<TransformerModel, String> {
    let marker = DATA_MARKER.as_bytes();
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or("missing [data] section")?;
    let header =
        std::str::from_utf8(&bytes[..split]).map_err(|_| "manifest is not UTF-8".to_string())?;
    let blob = &bytes[split + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(format!("bad magic, expected `{MAGIC}`"));
    }
    if lines.next() != Some("[config]") {
        return Err("expected [config]".into());
    }

    let mut cfg = ModelConfig::micro(Variant::Plain, 4);
    let mut folded = false;
    let mut entries: Vec<(String, Entry)> = Vec::new();
    let mut in_tensors = false;
    for line in lines {
        if line == "[tensors]" {
            in_tensors = true;
            continue;
        }
        if !in_tensors {
            let (key, value) = line.split_once('=').ok_or_else(|| format!("bad line `{line}`"))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<usize>().map_err(|_| format!("{key}: bad `{value}`"));
            let real = || value.parse::<Real>().map_err(|_| format!("{key}: bad `{value}`"));
            let flag = || value.parse::<bool>().map_err(|_| format!("{key}: bad `{value}`"));
            match key {
                "variant" => cfg.variant = parse_variant(value).map_err(|e| e.to_string())?,
                "d" => cfg.d = num()?,
                "d_f" => cfg.d_f = num()?,
                "heads" => cfg.heads = num()?,
                "enc_layers" => cfg.enc_layers = num()?,
                "dec_layers" => cfg.dec_layers = num()?,
                "branches" => cfg.branches = num()?,
                "top_k" => cfg.top_k = num()?,
                "alpha" => cfg.alpha = real()?,
                "vocab_size" => cfg.vocab_size = num()?,
                "tie_embeddings" => cfg.tie_embeddings = flag()?,
                "dropout" => cfg.dropout = real()?,
                "label_smoothing" => cfg.label_smoothing = real()?,
                "max_len" => cfg.max_len = num()?,
                "branch_mha" => cfg.branch_mha = flag()?,
                "branch_ffn" => cfg.branch_ffn = flag()?,
                "folded" => folded = flag()?,
                _ => return Err(format!("unknown config key `{key}`")),
            }
        } else {
            // name dtype d0xd1 @offset [scale=S]
            let mut parts = line.split_whitespace();
            let name = parts.next().ok_or("empty tensor line")?.to_string();
            let dtype = parts.next().ok_or("missing dtype")?.to_string();
            let shape: Vec<usize> = parts
                .next()
                .ok_or("missing shape")?
                .split('x')
                .map(|d| d.parse().map_err(|_| format!("{name}: bad shape")))
                .collect::<std::result::Result<_, _>>()?;
            let offset: usize = parts
                .next()
                .and_then(|o| o.strip_prefix('@'))
                .and_then(|o| o.parse().ok())
                .ok_or_else(|| format!("{name}: bad offset"))?;
            let scale: Real = match parts.next() {
                Some(s) => s
                    .strip_prefix("scale=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| format!("{name}: bad scale"))?,
                None => 0.0,
            };
            entries.push((name, Entry { dtype, shape, offset, scale }));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model =
        TransformerModel::new(cfg, &mut rng).map_err(|e| format!("invalid config: {e}"))?;
    if folded {
        model.fold();
    }

    let mut missing: Vec<String> = Vec::new();
    let mut cursor = 0usize;
    model.visit_mut(&mut |name, p| {
        let Some((_, e)) = entries.get(cursor).filter(|(n, _)| *n == name) else {
            missing.push(name);
            return;
        };
        cursor += 1;
        if e.shape != p.shape {
            missing.push(format!("{name} (shape mismatch)"));
            return;
        }
        let len = p.data.len();
        match e.dtype.as_str() {
            "f32" => {
                let Some(raw) = blob.get(e.offset..e.offset + 4 * len) else {
                    missing.push(format!("{name} (data out of range)"));
                    return;
                };
                for (v, c) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
                    *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real;
                }
            }
            "i8" => {
                let Some(raw) = blob.get(e.offset..e.offset + len) else {
                    missing.push(format!("{name} (data out of range)"));
                    return;
                };
                let q = QuantizedTensor {
                    data: raw.iter().map(|&b| b as i8).collect(),
                    scale: e.scale,
                };
                p.data = dequantize(&q);
            }
            other => missing.push(format!("{name} (unknown dtype `{other}`)")),
        }
    });
    if !missing.is_empty() {
        return Err(format!("tensors missing or mismatched: {}", missing.join(", ")));
    }
    if cursor != entries.len() {
        return Err(format!("{} extra tensor entries in manifest", entries.len() - cursor));
    }
    Ok(model)
}
