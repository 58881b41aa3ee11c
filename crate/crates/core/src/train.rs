//! Adam optimization with inverse-square-root warmup, the training loop
//! over the combined loss, and checkpoint averaging.
//!
//! The trainer owns the model exclusively: every step binds the
//! parameters into a fresh graph, runs the combined loss over one batch,
//! back-propagates, clips the global gradient norm, and applies a
//! bias-corrected Adam update in place. All IO (checkpoint files, logs)
//! happens through the per-step hook so this module stays `no_std`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::make_batches;
use crate::model::{ModelError, SentencePair, TransformerModel};
use crate::tensor::Graph;
use crate::Real;

pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.98;
pub const ADAM_EPS: Real = 1e-9;

// ── optimizer ────────────────────────────────────────────────────────

/// First/second moment accumulators, one slot per parameter block in
/// model visit order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<Real>>,
    pub v: Vec<Vec<Real>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            m: sizes.iter().map(|&s| alloc::vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| alloc::vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update on a single parameter block.
/// `state.step` must already be advanced to the current step (≥ 1).
pub fn adam_step(
    param: &mut [Real],
    grad: &[Real],
    m: &mut [Real],
    v: &mut [Real],
    step: u64,
    lr: Real,
) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - crate::math::powf(ADAM_BETA1, step as Real);
    let bc2 = 1.0 - crate::math::powf(ADAM_BETA2, step as Real);
    for i in 0..param.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (crate::math::sqrt(vhat) + ADAM_EPS);
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `lr = d^(−1/2) · min(step^(−1/2), step · warmup^(−3/2))`.
pub fn lr_schedule(step: u64, d: usize, warmup: u64) -> Real {
    debug_assert!(step >= 1 && warmup >= 1);
    let s = step as Real;
    let w = warmup as Real;
    let decay = crate::math::powf(s, -0.5);
    let ramp = s * crate::math::powf(w, -1.5);
    crate::math::powf(d as Real, -0.5) * decay.min(ramp)
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub tokens_per_batch: usize,
    pub warmup: u64,
    /// Multiplier on the schedule's learning rate.
    pub lr_scale: Real,
    /// Global-norm gradient clip threshold.
    pub clip_norm: Real,
    /// Checkpoint cadence, surfaced to the hook (the trainer itself does
    /// no IO).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 2000,
            tokens_per_batch: 2048,
            warmup: 200,
            lr_scale: 1.0,
            clip_norm: 1.0,
            checkpoint_every: 200,
            seed: 1,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Cross-entropy term.
    pub lm: Real,
    /// Mean diversity / entropy loss over gating units (0 when plain).
    pub ld: Real,
    pub le: Real,
    pub lr: Real,
    /// Branch activation share aggregated over all gating units.
    pub util: Vec<Real>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    /// A non-finite value appeared; `tensor` names the first offender.
    NonFinite { tensor: String, step: u64 },
    Model(ModelError),
    NoData,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::NonFinite { tensor, step } => {
                write!(f, "non-finite value in `{tensor}` at step {step}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::NoData => write!(f, "no training pairs"),
        }
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> TrainError {
        TrainError::Model(e)
    }
}

/// Train in place. The hook runs after every step and may stop training
/// early by returning `false` (used for checkpointing and accuracy-based
/// early stopping by the caller).
pub fn train<F>(
    model: &mut TransformerModel,
    pairs: &[SentencePair],
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<Vec<StepRecord>, TrainError>
where
    F: FnMut(&TransformerModel, &StepRecord) -> bool,
{
    if pairs.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut names: Vec<String> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    model.visit(&mut |name, p| {
        names.push(name);
        sizes.push(p.data.len());
    });
    let mut state = AdamState::new(&sizes);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut log = Vec::new();

    let mut epoch = 0u64;
    let mut batches = make_batches(pairs, cfg.tokens_per_batch, cfg.seed);
    let mut batch_ix = 0usize;
    let branches = model.cfg.branches.max(1);

    for step in 1..=cfg.steps {
        if batch_ix == batches.len() {
            epoch += 1;
            batches = make_batches(pairs, cfg.tokens_per_batch, cfg.seed.wrapping_add(epoch));
            batch_ix = 0;
        }
        let batch = &batches[batch_ix];
        batch_ix += 1;

        let mut g = Graph::new();
        let mut reg = Vec::new();
        let bound = model.bind(&mut g, &mut reg);
        let out = bound.total_loss(&mut g, &batch.pairs, true, &mut noise_rng)?;
        let loss_val = g.value(out.total);
        if !loss_val.is_finite() {
            return Err(TrainError::NonFinite { tensor: String::from("loss"), step });
        }
        g.backward(out.total).expect("scalar loss");

        // collect gradients in registry order; clip by global norm
        let mut grads: Vec<Vec<Real>> = reg.iter().map(|&id| g.grad_vec(id)).collect();
        let mut sq = 0.0;
        for (gi, grad) in grads.iter().enumerate() {
            for &v in grad {
                if !v.is_finite() {
                    return Err(TrainError::NonFinite { tensor: names[gi].clone(), step });
                }
                sq += v * v;
            }
        }
        let norm = crate::math::sqrt(sq);
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            for grad in &mut grads {
                for v in grad.iter_mut() {
                    *v *= s;
                }
            }
        }

        state.step = step;
        let lr = cfg.lr_scale * lr_schedule(step, model.cfg.d, cfg.warmup);
        let mut ix = 0;
        model.visit_mut(&mut |_, p| {
            adam_step(&mut p.data, &grads[ix], &mut state.m[ix], &mut state.v[ix], step, lr);
            ix += 1;
        });

        // aggregate utilization over all gating units
        let mut counts = alloc::vec![0u64; branches];
        for unit in &out.trace.units {
            for (b, &c) in unit.counts.iter().enumerate() {
                counts[b] += c;
            }
        }
        let total: u64 = counts.iter().sum();
        let util = counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as Real / total as Real })
            .collect();
        let units = out.ld.len().max(1) as Real;
        let record = StepRecord {
            step,
            lm: g.value(out.lm),
            ld: out.ld.iter().sum::<Real>() / units,
            le: out.le.iter().sum::<Real>() / units,
            lr,
            util,
        };
        let keep_going = hook(model, &record);
        log.push(record);
        if !keep_going {
            break;
        }
    }
    Ok(log)
}

/// Elementwise arithmetic mean of identically-shaped models (checkpoint
/// averaging; optimizer state is not part of a model).
pub fn average_models(models: &[TransformerModel]) -> TransformerModel {
    assert!(!models.is_empty());
    let mut avg = models[0].clone();
    let k = models.len() as Real;
    let mut sums: Vec<Vec<Real>> = Vec::new();
    avg.visit(&mut |_, p| sums.push(alloc::vec![0.0; p.data.len()]));
    for m in models {
        let mut ix = 0;
        m.visit(&mut |_, p| {
            for (s, &v) in sums[ix].iter_mut().zip(&p.data) {
                *s += v;
            }
            ix += 1;
        });
    }
    let mut ix = 0;
    avg.visit_mut(&mut |_, p| {
        for (dst, &s) in p.data.iter_mut().zip(&sums[ix]) {
            *dst = s / k;
        }
        ix += 1;
    });
    avg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode_pairs, gen_toy, ToyTask};
    use crate::model::{ModelConfig, Variant};
    use alloc::vec;
    use rand::SeedableRng;

    #[test]
    fn adam_zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut m = vec![0.5, 0.5];
        let mut v = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 3, 0.1);
        // mhat = βm/bc1 small but nonzero; with zero grad the update is
        // tiny relative to sqrt(vhat); check moments decayed exactly
        assert!((m[0] - 0.45).abs() < 1e-7);
        assert!((v[0] - 0.245).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let g = 0.37;
        let mut p = vec![2.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let lr = 0.01;
        adam_step(&mut p, &[g], &mut m, &mut v, 1, lr);
        // from zero state: mhat = g, vhat = g², update = −lr·g/(|g|+ε)
        let expect = 2.0 - lr * g / (g.abs() + ADAM_EPS);
        assert!((p[0] - expect).abs() < 1e-6, "{} vs {expect}", p[0]);
    }

    #[test]
    fn adam_constant_gradient_converges_to_lr_sized_signed_steps() {
        let g = -0.003;
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let lr = 0.05;
        let mut prev = p[0];
        let mut delta = 0.0;
        for step in 1..=500 {
            adam_step(&mut p, &[g], &mut m, &mut v, step, lr);
            delta = p[0] - prev;
            prev = p[0];
        }
        // steady state: update → −lr·sign(g) = +lr
        assert!((delta - lr).abs() / lr < 0.01, "delta {delta}");
    }

    #[test]
    fn lr_schedule_is_continuous_at_warmup_and_matches_arithmetic() {
        let a = lr_schedule(4000, 128, 4000);
        let b = lr_schedule(4001, 128, 4000);
        assert!((a - b).abs() / a < 1e-3, "continuity at the corner");
        // independent f64 evaluation
        let expect = (128f64).powf(-0.5) * (4000f64).powf(-0.5);
        assert!((a as f64 - expect).abs() < 1e-8);
        // decays beyond warmup, ramps before
        assert!(lr_schedule(8000, 128, 4000) < a);
        assert!(lr_schedule(2000, 128, 4000) < a);
        assert!((lr_schedule(2000, 128, 4000) / a - 0.5).abs() < 1e-5);
    }

    #[test]
    fn averaging_is_identity_on_copies_and_means_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig::gradcheck(Variant::Dmb);
        let a = TransformerModel::new(cfg.clone(), &mut rng).unwrap();
        let b = TransformerModel::new(cfg, &mut rng).unwrap();
        let same = average_models(&[a.clone(), a.clone(), a.clone()]);
        let mut ok = true;
        let mut ix = 0;
        let mut a_params = Vec::new();
        a.visit(&mut |_, p| a_params.push(p.data.clone()));
        same.visit(&mut |_, p| {
            ok &= p.data.iter().zip(&a_params[ix]).all(|(x, y)| (x - y).abs() < 1e-7);
            ix += 1;
        });
        assert!(ok);
        let mean = average_models(&[a.clone(), b.clone()]);
        let mut b_params = Vec::new();
        b.visit(&mut |_, p| b_params.push(p.data.clone()));
        let mut ix = 0;
        mean.visit(&mut |_, p| {
            for (j, &v) in p.data.iter().enumerate() {
                let expect = (a_params[ix][j] + b_params[ix][j]) / 2.0;
                assert!((v - expect).abs() < 1e-7);
            }
            ix += 1;
        });
    }

    #[test]
    fn short_training_reduces_loss_and_is_reproducible() {
        let raw = gen_toy(ToyTask::Copy, 20, (3, 6), 400, 9);
        let vocab = build_vocab(&raw, 20);
        let pairs = encode_pairs(&raw, &vocab);
        let cfg = TrainConfig {
            steps: 60,
            tokens_per_batch: 128,
            warmup: 20,
            ..TrainConfig::default()
        };
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            let mut model =
                TransformerModel::new(ModelConfig::micro(Variant::Dmb, vocab.len()), &mut rng)
                    .unwrap();
            train(&mut model, &pairs, &cfg, |_, _| true).unwrap()
        };
        let log = run();
        assert_eq!(log.len(), 60);
        let head: Real = log[..10].iter().map(|r| r.lm).sum::<Real>() / 10.0;
        let tail: Real = log[50..].iter().map(|r| r.lm).sum::<Real>() / 10.0;
        assert!(tail < head, "loss should fall: {head} -> {tail}");
        // utilization shares are a probability vector
        let u = &log.last().unwrap().util;
        assert!((u.iter().sum::<Real>() - 1.0).abs() < 1e-5);
        // bitwise reproducibility
        let log2 = run();
        assert_eq!(log, log2);
    }

    #[test]
    fn hook_can_stop_early() {
        let raw = gen_toy(ToyTask::Copy, 20, (3, 6), 100, 9);
        let vocab = build_vocab(&raw, 20);
        let pairs = encode_pairs(&raw, &vocab);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut model =
            TransformerModel::new(ModelConfig::micro(Variant::Plain, vocab.len()), &mut rng)
                .unwrap();
        let cfg = TrainConfig { steps: 50, tokens_per_batch: 64, ..TrainConfig::default() };
        let log = train(&mut model, &pairs, &cfg, |_, r| r.step < 7).unwrap();
        assert_eq!(log.len(), 7);
    }
}
