//! Next-token pretraining of a backbone on synthetic Markov sequences.
//!
//! A temporary embedding table `lm.embed` and softmax head `lm.head` wrap
//! the backbone during pretraining and are dropped afterwards, so only
//! `backbone.*` tensors are returned. Decoder-only stacks predict every next
//! token; encoder-decoder stacks encode the first half of a sequence and
//! predict the second half with a teacher-forced causal decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::BACKBONE_PREFIX;
use crate::error::{Error, Result};
use crate::nn::graph::Graph;
use crate::nn::layers::{linear, linear_decls};
use crate::nn::params::{Init, ParamDecl, ParamStore};
use crate::nn::tape::{Mask, Var};
use crate::nn::transformer::{
    backbone_decls, run_stack, BackboneKind, StackConfig, DECODER_ONLY_PREFIX, DECODER_PREFIX, ENCODER_PREFIX,
};
use crate::training::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    /// Random order-2 transition table.
    Markov2,
    /// Every token repeats the first one.
    Repeat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyLmConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub chain: ChainKind,
    pub transition_seed: u64,
    /// Scale of the log-probabilities in the transition table; larger is
    /// more predictable.
    pub sharpness: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_sequences: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            vocab: 8,
            seq_len: 16,
            chain: ChainKind::Markov2,
            transition_seed: 11,
            sharpness: 3.0,
            steps: 150,
            batch_size: 8,
            lr: 3e-3,
            eval_sequences: 64,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self, kind: BackboneKind, stack: &StackConfig) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config("pretrain.vocab", "must be at least 2"));
        }
        let min_len = if kind == BackboneKind::EncoderDecoder { 4 } else { 2 };
        if self.seq_len < min_len {
            return Err(Error::config("pretrain.seq_len", format!("must be at least {min_len}")));
        }
        if self.seq_len > stack.max_positions {
            return Err(Error::config(
                "pretrain.seq_len",
                format!("exceeds the positional table ({})", stack.max_positions),
            ));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_sequences == 0 {
            return Err(Error::config(
                "pretrain.steps",
                "steps, batch_size, and eval_sequences must be positive",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !kind.is_pretrainable() {
            return Err(Error::config(
                "pretrain.backbone",
                "only decoder_only and encoder_decoder stacks can be pretrained",
            ));
        }
        stack.validate()
    }
}

/// Pretrained backbone plus the statistics of the run.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: ParamStore,
    /// Training cross-entropy per step (nats).
    pub losses: Vec<f64>,
    /// Cross-entropy on held-out sequences after training.
    pub final_loss: f64,
    /// Entropy of the held-out target tokens' empirical distribution.
    pub unigram_entropy: f64,
    /// Held-out next-token accuracy of the argmax prediction.
    pub accuracy: f64,
}

struct Chain {
    kind: ChainKind,
    vocab: usize,
    /// `[vocab, vocab, vocab]` cumulative probabilities.
    cdf: Vec<f64>,
}

impl Chain {
    fn new(cfg: &ToyLmConfig) -> Self {
        let v = cfg.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.transition_seed);
        let mut cdf = Vec::with_capacity(v * v * v);
        for _ in 0..v * v {
            let w: Vec<f64> = (0..v)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (cfg.sharpness * z).exp()
                })
                .collect();
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for x in w {
                acc += x / total;
                cdf.push(acc);
            }
        }
        Chain {
            kind: cfg.chain,
            vocab: v,
            cdf,
        }
    }

    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let v = self.vocab;
        let mut seq = vec![rng.random_range(0..v)];
        match self.kind {
            ChainKind::Repeat => seq.resize(len, seq[0]),
            ChainKind::Markov2 => {
                seq.push(rng.random_range(0..v));
                while seq.len() < len {
                    let (a, b) = (seq[seq.len() - 2], seq[seq.len() - 1]);
                    let row = &self.cdf[(a * v + b) * v..(a * v + b + 1) * v];
                    let u: f64 = rng.random();
                    seq.push(row.iter().position(|&c| u < c).unwrap_or(v - 1));
                }
            }
        }
        seq.truncate(len);
        seq
    }
}

/// Logits `[rows, vocab]` and targets for a batch of sequences.
fn lm_logits(
    g: &mut Graph<'_>,
    kind: BackboneKind,
    stack: &StackConfig,
    seqs: &[Vec<usize>],
) -> Result<(Var, Vec<usize>)> {
    let b = seqs.len();
    let len = seqs[0].len();
    let d = stack.d_model;
    let table = g.param("lm.embed")?;
    let embed = |g: &mut Graph<'_>, lo: usize, hi: usize| -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s[lo..hi].iter().copied()).collect();
        let e = g.embedding(table, &ids)?;
        g.reshape(e, &[b, hi - lo, d])
    };
    let (hidden, lo, hi) = match kind {
        BackboneKind::DecoderOnly => {
            let x = embed(g, 0, len - 1)?;
            (run_stack(g, DECODER_ONLY_PREFIX, x, None, stack, Mask::Causal)?, 1, len)
        }
        BackboneKind::EncoderDecoder => {
            let half = len / 2;
            let src = embed(g, 0, half)?;
            let enc = run_stack(g, ENCODER_PREFIX, src, None, stack, Mask::None)?;
            let tgt = embed(g, half - 1, len - 1)?;
            (
                run_stack(g, DECODER_PREFIX, tgt, Some(enc), stack, Mask::Causal)?,
                half,
                len,
            )
        }
        other => {
            return Err(Error::config(
                "pretrain.backbone",
                format!("{other:?} cannot be pretrained directly"),
            ))
        }
    };
    let logits = linear(g, "lm.head", hidden)?;
    let vocab = *g.shape(logits).last().expect("logits have a vocabulary axis");
    let logits = g.reshape(logits, &[b * (hi - lo), vocab])?;
    let targets = seqs.iter().flat_map(|s| s[lo..hi].iter().copied()).collect();
    Ok((logits, targets))
}

/// Pretrains a `kind` backbone with the given stack shape. Deterministic in
/// `seed`.
pub fn pretrain_toy_lm(
    cfg: &ToyLmConfig,
    kind: BackboneKind,
    stack: &StackConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate(kind, stack)?;
    let chain = Chain::new(cfg);
    let mut decls = vec![ParamDecl::new("lm.embed", &[cfg.vocab, stack.d_model], Init::Normal)];
    decls.extend(backbone_decls(kind, stack));
    decls.extend(linear_decls("lm.head", stack.d_model, cfg.vocab));
    let mut params = ParamStore::init(&decls, seed)?;

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::default();
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(1);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let seqs: Vec<Vec<usize>> = (0..cfg.batch_size)
            .map(|_| chain.sample(cfg.seq_len, &mut data_rng))
            .collect();
        let grads = {
            let mut g = Graph::new(&params);
            let (logits, targets) = lm_logits(&mut g, kind, stack, &seqs)?;
            let loss = g.cross_entropy(logits, &targets)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Training(format!("pretraining loss diverged at step {step}")));
            }
            losses.push(value);
            let grads = g.backward(loss)?;
            g.param_grads(&grads)
        };
        adam_step(&mut params, &grads, &mut state, &adam)?;
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(2);
    let seqs: Vec<Vec<usize>> = (0..cfg.eval_sequences)
        .map(|_| chain.sample(cfg.seq_len, &mut eval_rng))
        .collect();
    let mut g = Graph::new(&params);
    let (logits, targets) = lm_logits(&mut g, kind, stack, &seqs)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let final_loss = g.value(loss).data()[0];
    let lv = g.value(logits);
    let v = cfg.vocab;
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| {
            let row = &lv.data()[r * v..(r + 1) * v];
            let best = (0..v).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            best == t
        })
        .count();
    let accuracy = correct as f64 / targets.len() as f64;
    let mut counts = vec![0usize; v];
    for &t in &targets {
        counts[t] += 1;
    }
    let unigram_entropy = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / targets.len() as f64;
            -p * p.ln()
        })
        .sum::<f64>();
    if !(final_loss < unigram_entropy) {
        return Err(Error::Training(format!(
            "pretraining cross-entropy {final_loss:.4} did not drop below the unigram entropy {unigram_entropy:.4}"
        )));
    }
    params.retain_prefix(BACKBONE_PREFIX);
    Ok(PretrainOutcome {
        backbone: params,
        losses,
        final_loss,
        unigram_entropy,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_stack() -> StackConfig {
        StackConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            blocks: 1,
            max_positions: 8,
        }
    }

    #[test]
    fn repeat_chain_is_learned() {
        let cfg = ToyLmConfig {
            vocab: 2,
            seq_len: 8,
            chain: ChainKind::Repeat,
            steps: 80,
            lr: 1e-2,
            ..ToyLmConfig::default()
        };
        let out = pretrain_toy_lm(&cfg, BackboneKind::DecoderOnly, &tiny_stack(), 1).unwrap();
        assert!(out.accuracy >= 0.99, "accuracy {}", out.accuracy);
        assert!(out.backbone.names().all(|n| n.starts_with("backbone.")));
    }

    #[test]
    fn encoder_decoder_pretrains_both_stacks() {
        let cfg = ToyLmConfig {
            vocab: 2,
            seq_len: 8,
            chain: ChainKind::Repeat,
            steps: 60,
            lr: 1e-2,
            ..ToyLmConfig::default()
        };
        let out = pretrain_toy_lm(&cfg, BackboneKind::EncoderDecoder, &tiny_stack(), 2).unwrap();
        assert!(out.backbone.names().any(|n| n.starts_with("backbone.encoder")));
        assert!(out.backbone.names().any(|n| n.starts_with("backbone.decoder")));
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = ToyLmConfig {
            steps: 5,
            seq_len: 6,
            ..ToyLmConfig::default()
        };
        let run = || pretrain_toy_lm(&cfg, BackboneKind::DecoderOnly, &tiny_stack(), 3);
        match (run(), run()) {
            (Ok(a), Ok(b)) => assert!(a.backbone.bit_eq(&b.backbone)),
            (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
            _ => panic!("runs disagree"),
        }
    }

    #[test]
    fn rejects_sub_stacks() {
        let cfg = ToyLmConfig::default();
        let err = pretrain_toy_lm(&cfg, BackboneKind::EncoderOnly, &tiny_stack(), 0).unwrap_err();
        assert!(err.is_validation());
    }
}
