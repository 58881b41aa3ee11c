//! End-to-end gradient and folding checks on whole models: autodiff vs
//! central finite differences through the combined loss, gate-parameter
//! gradient routing, the shared/private gradient identity, and bit-exact
//! greedy decoding after folding.

use dmb_core::decode::greedy_decode;
use dmb_core::model::{ModelConfig, SentencePair, TransformerModel, Variant};
use dmb_core::tensor::Graph;
use dmb_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// one loss evaluation carries ~1e-7·|L| of f32 rounding, so a central
// difference at h=1e-3 resolves a derivative to roughly 1e-4 absolute;
// directional derivatives below the floor are checked at that precision
#[cfg(not(feature = "f64"))]
const FD_H: Real = 1e-3;
#[cfg(not(feature = "f64"))]
const FD_TOL: Real = 1e-2;
#[cfg(not(feature = "f64"))]
const FD_FLOOR: Real = 1e-1;

#[cfg(feature = "f64")]
const FD_H: Real = 1e-4;
#[cfg(feature = "f64")]
const FD_TOL: Real = 1e-5;
#[cfg(feature = "f64")]
const FD_FLOOR: Real = 1e-6;

fn batch() -> Vec<SentencePair> {
    vec![
        SentencePair { src: vec![4, 5, 6], tgt: vec![7, 8] },
        SentencePair { src: vec![9, 10], tgt: vec![6, 5, 4] },
    ]
}

/// Loss value plus the per-position routing signature (argmax of every
/// gate probability row), so probes that cross an argmax flip (a
/// nondifferentiable point of the detached selection) can be recognized
/// and skipped.
fn loss_value(model: &TransformerModel, batch: &[SentencePair]) -> (Real, Vec<usize>) {
    let mut g = Graph::inference();
    let mut reg = Vec::new();
    let bound = model.bind(&mut g, &mut reg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out = bound.total_loss(&mut g, batch, false, &mut rng).unwrap();
    let mut routing = Vec::new();
    for unit in &out.trace.units {
        for &probs in &unit.probs {
            let n = g.shape(probs)[1];
            for row in g.data(probs).chunks(n) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                routing.push(best);
            }
        }
    }
    (g.value(out.total), routing)
}

fn param_names(model: &TransformerModel) -> Vec<(String, usize)> {
    let mut names = Vec::new();
    model.visit(&mut |name, p| names.push((name, p.data.len())));
    names
}

/// Autodiff gradients of the total loss for every parameter leaf, in
/// visit order (`None` for leaves the loss never touched).
fn autodiff_grads(model: &TransformerModel, batch: &[SentencePair]) -> Vec<Option<Vec<Real>>> {
    let mut g = Graph::new();
    let mut reg = Vec::new();
    let bound = model.bind(&mut g, &mut reg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out = bound.total_loss(&mut g, batch, false, &mut rng).unwrap();
    g.backward(out.total).unwrap();
    reg.iter().map(|&id| g.grad(id).map(|s| s.to_vec())).collect()
}

fn perturbed(model: &TransformerModel, leaf: usize, dir: &[Real], h: Real) -> TransformerModel {
    let mut m = model.clone();
    let mut k = 0usize;
    m.visit_mut(&mut |_, p| {
        if k == leaf {
            for (v, d) in p.data.iter_mut().zip(dir) {
                *v += h * d;
            }
        }
        k += 1;
    });
    m
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in [Variant::Plain, Variant::Dmb] {
        let model = TransformerModel::new(ModelConfig::gradcheck(variant), &mut rng).unwrap();
        let batch = batch();
        let grads = autodiff_grads(&model, &batch);
        let names = param_names(&model);
        assert_eq!(grads.len(), names.len());

        let (_, base_routing) = loss_value(&model, &batch);
        let mut worst: Real = 0.0;
        let mut checked = 0;
        for (gi, (name, _)) in names.iter().enumerate() {
            // directional derivative along the (normalized) gradient:
            // the finite difference must reproduce the gradient norm
            let Some(grad) = &grads[gi] else { continue };
            let norm = grad.iter().map(|v| v * v).sum::<Real>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let dir: Vec<Real> = grad.iter().map(|v| v / norm).collect();
            // halve the step until the probe no longer crosses an
            // argmax flip (a nondifferentiable point of the detached
            // selection)
            let mut h = FD_H;
            let fd = loop {
                let (up, up_routing) = loss_value(&perturbed(&model, gi, &dir, h), &batch);
                let (dn, dn_routing) = loss_value(&perturbed(&model, gi, &dir, -h), &batch);
                if up_routing == base_routing && dn_routing == base_routing {
                    break (up - dn) / (2.0 * h);
                }
                h /= 2.0;
                assert!(h > FD_H / 64.0, "{variant} {name}: no flip-free step found");
            };
            let rel = (norm - fd).abs() / FD_FLOOR.max(norm + fd.abs());
            assert!(rel < FD_TOL, "{variant} {name}: ‖grad‖={norm} fd={fd} rel={rel}");
            worst = worst.max(rel);
            checked += 1;
        }
        assert!(checked > 10, "checked every participating parameter group");
        assert!(worst > 0.0, "probes exercised at least one nonzero mismatch measure");
    }
}

#[test]
fn gate_parameters_learn_only_from_the_auxiliary_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model =
        TransformerModel::new(ModelConfig::gradcheck(Variant::Dmb), &mut rng).unwrap();
    let batch = batch();
    let names = param_names(&model);

    let run = |aux: bool| -> Vec<Option<Vec<Real>>> {
        let mut g = Graph::new();
        let mut reg = Vec::new();
        let bound = model.bind(&mut g, &mut reg);
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let out = bound.total_loss(&mut g, &batch, false, &mut r).unwrap();
        g.backward(if aux { out.total } else { out.lm }).unwrap();
        reg.iter().map(|&id| g.grad(id).map(|s| s.to_vec())).collect()
    };

    let lm_only = run(false);
    let with_aux = run(true);
    let mut gate_leaves = 0;
    for (i, (name, _)) in names.iter().enumerate() {
        if !name.contains(".gate.") {
            continue;
        }
        gate_leaves += 1;
        // translation loss alone: selections are detached, so gates get
        // no gradient at all
        let zero = match &lm_only[i] {
            None => true,
            Some(g) => g.iter().all(|&v| v == 0.0),
        };
        assert!(zero, "{name} has a translation-loss gradient");
        // the auxiliary losses do reach the gate weights
        if name.ends_with(".gate.w") {
            let got = with_aux[i].as_ref().expect(name);
            assert!(got.iter().any(|&v| v != 0.0), "{name} untouched by aux losses");
        }
    }
    assert_eq!(gate_leaves, 10, "5 gating units, weight + bias each");
}

/// Returns (weights checked, private leaves with no gradient at all).
fn check_shared_private_identity(model: &TransformerModel, batch: &[SentencePair]) -> (usize, usize) {
    let grads = autodiff_grads(model, batch);
    let names = param_names(model);

    let mut checked = 0;
    let mut unrouted = 0;
    for (i, (name, len)) in names.iter().enumerate() {
        let Some(base) = name.strip_suffix(".shared") else { continue };
        let shared = grads[i].as_ref().expect("shared weight always participates");
        let mut sum = vec![0.0 as Real; *len];
        for (j, (other, _)) in names.iter().enumerate() {
            let Some(rest) = other.strip_prefix(base) else { continue };
            if !rest.starts_with(".private") {
                continue;
            }
            match &grads[j] {
                Some(g) => {
                    for (s, v) in sum.iter_mut().zip(g) {
                        *s += v;
                    }
                }
                // a branch that received no positions contributes
                // exactly nothing
                None => unrouted += 1,
            }
        }
        // vector-relative error: sub-ulp accumulation-order noise on
        // near-zero entries must not be amplified
        let mut num = 0.0 as Real;
        let mut den = 0.0 as Real;
        for (s, v) in shared.iter().zip(&sum) {
            num += (s - v) * (s - v);
            den += s * s;
        }
        let rel = (num / den.max(1e-30)).sqrt();
        assert!(rel < 1e-5, "{name}: ‖shared − Σ private‖ rel = {rel}");
        checked += 1;
    }
    (checked, unrouted)
}

#[test]
fn shared_gradient_equals_sum_of_routed_private_gradients() {
    // random micro batches: every weight satisfies the sum identity
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = TransformerModel::new(ModelConfig::micro(Variant::Dmb, 24), &mut rng).unwrap();
    let batch: Vec<SentencePair> = (0..3)
        .map(|_| SentencePair {
            src: (0..rng.gen_range(2..7)).map(|_| rng.gen_range(4..24)).collect(),
            tgt: (0..rng.gen_range(2..7)).map(|_| rng.gen_range(4..24)).collect(),
        })
        .collect();
    let (checked, _) = check_shared_private_identity(&model, &batch);
    assert!(checked > 0, "found shared/private weights");

    // a one-token pair leaves some branches without any routed
    // positions; those private sets must receive exactly no gradient
    let tiny =
        TransformerModel::new(ModelConfig::gradcheck(Variant::Dmb), &mut rng).unwrap();
    let single = vec![SentencePair { src: vec![4], tgt: vec![5] }];
    let (checked, unrouted) = check_shared_private_identity(&tiny, &single);
    assert!(checked > 0);
    assert!(unrouted > 0, "at least one branch received no positions");
}

#[test]
fn folding_is_bit_exact_over_one_hundred_random_decodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model =
        TransformerModel::new(ModelConfig::gradcheck(Variant::Dmb), &mut rng).unwrap();
    let mut folded = model.clone();
    folded.fold();
    assert!(folded.is_folded() && !model.is_folded());
    assert_eq!(model.num_params() > folded.num_params(), true);

    for _ in 0..100 {
        let src: Vec<usize> =
            (0..rng.gen_range(1..8)).map(|_| rng.gen_range(4..11)).collect();
        let a = greedy_decode(&model, &src, 12).unwrap();
        let b = greedy_decode(&folded, &src, 12).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.truncated, b.truncated);
    }
}
