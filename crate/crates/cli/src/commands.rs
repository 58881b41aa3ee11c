//! Implementations of the subcommands. All file formats live in
//! `config` and `checkpoint`; everything numeric lives in `dmb-core`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dmb_core::corpus::{build_vocab, encode_pairs, gen_toy, parse_tsv, Vocabulary, BOS};
use dmb_core::costs::{count_mult_adds, count_params, ptr, Breakdown};
use dmb_core::decode::{beam_decode, bleu, greedy_decode, SentenceDecoder};
use dmb_core::model::{GateTrace, ModelConfig, SentencePair, TransformerModel, Variant};
use dmb_core::tensor::Graph;
use dmb_core::train::{average_models, train, StepRecord, TrainError};
use dmb_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Data(format!("create `{}`: {e}", out.display())))
}

/// Echo the resolved configuration to stdout and the output directory.
pub fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = cfg.render();
    print!("{text}");
    ensure_out(out)?;
    std::fs::write(out.join("config.txt"), text)?;
    Ok(())
}

/// Materialize the corpus named by `[data]`, split off the holdout.
pub fn load_corpus(cfg: &RunConfig) -> Result<(Vocabulary, Vec<SentencePair>, Vec<SentencePair>)> {
    let raw = match &cfg.data.source {
        DataSource::Toy => gen_toy(
            cfg.data.task,
            cfg.data.vocab_size,
            (cfg.data.len_min, cfg.data.len_max),
            cfg.data.count,
            cfg.data.seed,
        ),
        DataSource::Tsv(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("corpus `{path}`: {e}")))?;
            parse_tsv(&text).map_err(|e| CliError::Data(format!("corpus `{path}`: {e}")))?
        }
    };
    if raw.len() <= cfg.data.holdout {
        return Err(CliError::Data(format!(
            "holdout {} leaves no training pairs (corpus has {})",
            cfg.data.holdout,
            raw.len()
        )));
    }
    let vocab = build_vocab(&raw, cfg.data.vocab_size);
    let pairs = encode_pairs(&raw, &vocab);
    let split = pairs.len() - cfg.data.holdout;
    let (train_pairs, holdout) = pairs.split_at(split);
    Ok((vocab, train_pairs.to_vec(), holdout.to_vec()))
}

fn log_line(r: &StepRecord) -> String {
    let util: Vec<String> = r.util.iter().map(|u| format!("{u:.4}")).collect();
    format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{}", r.step, r.lm, r.ld, r.le, r.lr, util.join("\t"))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    echo_config(cfg, out)?;
    let (vocab, pairs, _holdout) = load_corpus(cfg)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = TransformerModel::new(model_cfg, &mut rng)
        .map_err(|e| CliError::Usage(format!("invalid model config: {e}")))?;

    std::fs::write(out.join("vocab.txt"), vocab.to_lines())?;

    let mut log = String::from("step\tlm\tld\tle\tlr\tutil\n");
    let mut snapshots: Vec<TransformerModel> = Vec::new();
    let every = cfg.train.checkpoint_every.max(1);
    let out_dir = out.to_path_buf();
    let result = train(&mut model, &pairs, &cfg.train, |m, rec| {
        let _ = writeln!(log, "{}", log_line(rec));
        if rec.step % every == 0 {
            let _ = checkpoint::save(m, &out_dir.join(format!("ckpt-{}.dmb", rec.step)), false);
            snapshots.push(m.clone());
        }
        true
    });
    match result {
        Ok(_) => {}
        Err(TrainError::NonFinite { tensor, step }) => {
            return Err(CliError::Numeric(format!("non-finite `{tensor}` at step {step}")))
        }
        Err(e) => return Err(CliError::Data(e.to_string())),
    }
    std::fs::write(out.join("log.tsv"), &log)?;

    // final model averages the last checkpoints (the end-of-training
    // state counts as one when the cadence missed it)
    if snapshots.last().map(|s| s.num_params()) != Some(model.num_params())
        || snapshots.is_empty()
        || !same_params(snapshots.last().unwrap(), &model)
    {
        snapshots.push(model.clone());
    }
    let tail = snapshots.len().saturating_sub(cfg.average_last).max(0);
    let averaged = average_models(&snapshots[tail..]);
    checkpoint::save(&averaged, &out.join("model.dmb"), false)?;
    if averaged.cfg.variant == Variant::Dmb {
        let mut folded = averaged.clone();
        folded.fold();
        checkpoint::save(&folded, &out.join("model-folded.dmb"), false)?;
    }
    println!("trained {} steps; wrote {}", cfg.train.steps, out.join("model.dmb").display());
    Ok(())
}

fn same_params(a: &TransformerModel, b: &TransformerModel) -> bool {
    let mut va = Vec::new();
    let mut vb = Vec::new();
    a.visit(&mut |_, p| va.push(p.data.clone()));
    b.visit(&mut |_, p| vb.push(p.data.clone()));
    va == vb
}

fn read_lines(path: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("input `{path}`: {e}")))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn load_vocab(path: &str) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("vocabulary `{path}`: {e}")))?;
    Ok(Vocabulary::from_lines(&text))
}

/// Translate every line; order-preserving, one output line per input.
pub fn translate_lines(
    model: &TransformerModel,
    vocab: &Vocabulary,
    lines: &[String],
    beam: usize,
    lp: Real,
) -> Result<Vec<String>> {
    if beam < 1 {
        return Err(CliError::Usage(format!("beam must be ≥ 1, got {beam}")));
    }
    let max_len = model.cfg.max_len;
    let mut out = Vec::with_capacity(lines.len());
    for line in lines {
        let src = vocab.encode(line);
        let tokens = if beam == 1 {
            greedy_decode(model, &src, max_len)
        } else {
            beam_decode(model, &src, beam, lp, max_len)
        }
        .map_err(|e| CliError::Data(e.to_string()))?
        .tokens;
        out.push(vocab.decode(&tokens));
    }
    Ok(out)
}

pub fn cmd_translate(
    ckpt: &str,
    vocab_path: &str,
    input: &str,
    beam: usize,
    lp: Real,
) -> Result<()> {
    let model = checkpoint::load(Path::new(ckpt))?;
    let vocab = load_vocab(vocab_path)?;
    let lines = read_lines(input)?;
    for line in translate_lines(&model, &vocab, &lines, beam, lp)? {
        println!("{line}");
    }
    Ok(())
}

pub fn cmd_eval(
    ckpt: &str,
    vocab_path: &str,
    src_path: &str,
    ref_path: &str,
    beam: usize,
    lp: Real,
) -> Result<()> {
    let model = checkpoint::load(Path::new(ckpt))?;
    let vocab = load_vocab(vocab_path)?;
    let src = read_lines(src_path)?;
    let refs = read_lines(ref_path)?;
    if src.len() != refs.len() {
        return Err(CliError::Data(format!(
            "{} source lines but {} references",
            src.len(),
            refs.len()
        )));
    }
    let hyps = translate_lines(&model, &vocab, &src, beam, lp)?;
    let cand_tok: Vec<Vec<String>> =
        hyps.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect();
    let ref_tok: Vec<Vec<String>> =
        refs.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect();
    let score = bleu(&cand_tok, &ref_tok);
    println!("sentences\t{}", src.len());
    println!("bleu\t{score:.2}");
    Ok(())
}

/// Text + key-value cost report for one configuration.
pub fn profile_report(cfg: &ModelConfig, s: usize, t: usize, bleu_score: Option<f64>) -> String {
    let params = count_params(cfg);
    let mas = count_mult_adds(cfg, s, t);
    let fmt = |b: &Breakdown| {
        format!(
            "total={} embeddings={} encoder={} decoder={} output_projection={} gates={}",
            b.total(),
            b.embeddings,
            b.encoder,
            b.decoder,
            b.output_projection,
            b.gates
        )
    };
    let mut out = String::new();
    let _ = writeln!(out, "variant = {}", cfg.variant);
    let _ = writeln!(out, "s = {s}");
    let _ = writeln!(out, "t = {t}");
    let _ = writeln!(out, "params {}", fmt(&params));
    let _ = writeln!(out, "mult_adds {}", fmt(&mas));
    if let Some(b) = bleu_score {
        let _ = writeln!(out, "bleu = {b}");
        let _ = writeln!(out, "ptr = {:.4}", ptr(b, mas.total()));
    }
    out
}

pub fn cmd_profile(
    cfg: &ModelConfig,
    s: usize,
    t: usize,
    bleu_score: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let report = profile_report(cfg, s, t, bleu_score);
    print!("{report}");
    if let Some(dir) = out {
        ensure_out(dir)?;
        std::fs::write(dir.join("profile.txt"), &report)?;
    }
    Ok(())
}

/// Greedy-decode exactly `seq_len` tokens (EOS does not stop the clock;
/// every variant pays for the same number of steps).
pub fn decode_fixed_len(model: &TransformerModel, src: &[usize], seq_len: usize) -> Result<Duration> {
    let started = Instant::now();
    let mut dec = SentenceDecoder::new(model, src).map_err(|e| CliError::Data(e.to_string()))?;
    let mut prefix = vec![BOS];
    for _ in 0..seq_len {
        let logits = dec.step_logits(&prefix).map_err(|e| CliError::Data(e.to_string()))?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        // keep generating past EOS so every trial decodes seq_len steps
        prefix.push(if best == dmb_core::corpus::EOS { best + 1 } else { best });
    }
    Ok(started.elapsed())
}

pub struct BenchStats {
    pub trials: Vec<Duration>,
    pub median: Duration,
    pub iqr: Duration,
}

/// Median/IQR of wall-clock fixed-length greedy decodes; one warmup
/// trial is discarded.
pub fn bench_latency(model: &TransformerModel, seq_len: usize, trials: usize) -> Result<BenchStats> {
    let src: Vec<usize> = (0..seq_len).map(|i| 4 + i % (model.cfg.vocab_size - 4)).collect();
    decode_fixed_len(model, &src, seq_len)?; // warmup
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        times.push(decode_fixed_len(model, &src, seq_len)?);
    }
    let mut sorted = times.clone();
    sorted.sort();
    let median = sorted[sorted.len() / 2];
    let iqr = sorted[3 * sorted.len() / 4] - sorted[sorted.len() / 4];
    Ok(BenchStats { trials: times, median, iqr })
}

pub fn cmd_bench(model: &TransformerModel, seq_len: usize, trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(CliError::Usage("need at least one trial".into()));
    }
    let stats = bench_latency(model, seq_len, trials)?;
    println!("variant\t{}", model.cfg.variant);
    println!("seq_len\t{seq_len}");
    println!("trials\t{trials}");
    println!("median_ms\t{:.3}", stats.median.as_secs_f64() * 1e3);
    println!("iqr_ms\t{:.3}", stats.iqr.as_secs_f64() * 1e3);
    Ok(())
}

/// Encoder-side gate assignments for every input token, as TSV rows
/// `sentence_id, position, token, gate_id, branch, prob`.
pub fn gates_table(
    model: &TransformerModel,
    vocab: &Vocabulary,
    lines: &[String],
) -> Result<String> {
    if model.cfg.variant == Variant::Plain {
        return Err(CliError::Usage("plain models have no gates".into()));
    }
    let mut out = String::from("sentence_id\tposition\ttoken\tgate_id\tbranch\tprob\n");
    for (sid, line) in lines.iter().enumerate() {
        let src = vocab.encode(line);
        let mut g = Graph::inference();
        let mut reg = Vec::new();
        let bound = model.bind(&mut g, &mut reg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut trace = GateTrace::new(model.cfg.gate_unit_count(), model.cfg.branches.max(1));
        bound
            .encode(&mut g, &src, false, &mut rng, &mut trace)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let enc_units = model.cfg.encoder_gate_units();
        for (gate_id, unit) in trace.units.iter().take(enc_units).enumerate() {
            // the unit's first evaluation is over the layer input: one
            // probability row per source position
            let probs = unit.probs[0];
            let n = g.shape(probs)[1];
            for (pos, row) in g.data(probs).chunks(n).enumerate() {
                let mut branch = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[branch] {
                        branch = j;
                    }
                }
                let _ = writeln!(
                    out,
                    "{sid}\t{pos}\t{}\t{gate_id}\t{branch}\t{:.4}",
                    vocab.token(src[pos]),
                    row[branch]
                );
            }
        }
    }
    Ok(out)
}

pub fn cmd_gates(ckpt: &str, vocab_path: &str, input: &str, out: Option<&Path>) -> Result<()> {
    let model = checkpoint::load(Path::new(ckpt))?;
    let vocab = load_vocab(vocab_path)?;
    let lines = read_lines(input)?;
    let table = gates_table(&model, &vocab, &lines)?;
    match out {
        Some(dir) => {
            ensure_out(dir)?;
            let path: PathBuf = dir.join("gates.tsv");
            std::fs::write(&path, &table)?;
            println!("wrote {}", path.display());
        }
        None => print!("{table}"),
    }
    Ok(())
}
