//! Greedy and constrained greedy decoding. The constraint is a token-set
//! mask: the per-step argmax is taken over utterance tokens, the EOS token
//! and the tokens of "not provided", with no renormalization (the argmax is
//! the same either way; recorded probabilities come from the full
//! distribution). Ties break toward the lowest token id.

use std::collections::BTreeSet;

use crate::copy::{copy_output, CopyMode};
use crate::model::{IncrementalState, Model};
use crate::templating::{ContextText, NOT_PROVIDED};
use crate::tokenizer::{TokenSeq, Vocab, EOS_ID};
use crate::{Error, Result};

/// Token ids a constrained step may emit. EOS is always present.
#[derive(Debug, Clone)]
pub struct AllowedSet {
    ids: BTreeSet<u32>,
}

impl AllowedSet {
    pub fn contains(&self, id: u32) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // EOS is always a member
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids.iter().copied()
    }
}

/// Utterance tokens plus "not provided" plus EOS.
pub fn allowed_token_set(vocab: &Vocab, utterance_tokens: &TokenSeq) -> AllowedSet {
    let mut ids: BTreeSet<u32> = utterance_tokens.ids.iter().copied().collect();
    ids.extend(vocab.encode(NOT_PROVIDED).ids);
    ids.insert(EOS_ID);
    AllowedSet { ids }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Eos,
    MaxLen,
}

/// A finished generation. `ids` are the produced tokens (including the
/// terminating EOS when one was emitted); `text` is the decoded value
/// without the EOS marker.
#[derive(Debug, Clone)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub text: String,
    pub step_probs: Vec<f64>,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub copy: CopyMode,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_len: 16,
            copy: CopyMode::Off,
        }
    }
}

/// Unconstrained greedy decoding (the ablation baseline).
pub fn greedy_decode(
    model: &Model,
    vocab: &Vocab,
    ctx: &ContextText,
    opts: DecodeOptions,
) -> Result<Generation> {
    decode_inner(model, vocab, ctx, None, opts)
}

/// Greedy decoding with the per-step argmax restricted to `allowed`.
pub fn constrained_decode(
    model: &Model,
    vocab: &Vocab,
    ctx: &ContextText,
    allowed: &AllowedSet,
    opts: DecodeOptions,
) -> Result<Generation> {
    decode_inner(model, vocab, ctx, Some(allowed), opts)
}

fn decode_inner(
    model: &Model,
    vocab: &Vocab,
    ctx: &ContextText,
    allowed: Option<&AllowedSet>,
    opts: DecodeOptions,
) -> Result<Generation> {
    let seq = vocab.encode(&ctx.text);
    if seq.is_empty() {
        return Err(Error::Decode("empty context".into()));
    }
    if seq.len() + opts.max_len > model.cfg.context_window {
        return Err(Error::Decode(format!(
            "context ({}) plus max_len ({}) exceeds the context window ({})",
            seq.len(),
            opts.max_len,
            model.cfg.context_window
        )));
    }
    let utterance_positions = seq.positions_overlapping(ctx.utterance_char_range);
    if opts.copy == CopyMode::Utterance && utterance_positions.is_empty() {
        return Err(Error::Decode("no utterance tokens to copy from".into()));
    }

    let mut inc = IncrementalState::new(model);
    let mut all_ids = seq.ids.clone();
    for &id in &seq.ids {
        inc.push(id)?;
    }

    let mut produced = Vec::new();
    let mut step_probs = Vec::new();
    let mut termination = Termination::MaxLen;
    for _ in 0..opts.max_len {
        let n = inc.len();
        let dist = match opts.copy {
            CopyMode::Off => model.vocab_distribution(inc.hidden_state(n - 1)),
            CopyMode::Utterance => {
                copy_output(model, inc.hidden_matrix(), n, &all_ids, &utterance_positions)?
                    .final_dist
            }
            CopyMode::FullContext => {
                let source: Vec<usize> = (0..n).collect();
                copy_output(model, inc.hidden_matrix(), n, &all_ids, &source)?.final_dist
            }
        };
        let chosen = argmax_allowed(&dist, allowed);
        step_probs.push(dist[chosen as usize]);
        produced.push(chosen);
        if chosen == EOS_ID {
            termination = Termination::Eos;
            break;
        }
        all_ids.push(chosen);
        inc.push(chosen)?;
    }

    let value_ids: &[u32] = match produced.last() {
        Some(&EOS_ID) => &produced[..produced.len() - 1],
        _ => &produced,
    };
    let text = vocab.decode(value_ids)?;
    Ok(Generation {
        ids: produced,
        text,
        step_probs,
        termination,
    })
}

/// Argmax over the (optionally masked) distribution; the strict `>` keeps
/// the lowest id on ties.
fn argmax_allowed(dist: &[f64], allowed: Option<&AllowedSet>) -> u32 {
    match allowed {
        None => {
            let mut best = 0u32;
            let mut best_p = f64::NEG_INFINITY;
            for (i, &p) in dist.iter().enumerate() {
                if p > best_p {
                    best_p = p;
                    best = i as u32;
                }
            }
            best
        }
        Some(set) => {
            let mut best = EOS_ID;
            let mut best_p = f64::NEG_INFINITY;
            for id in set.iter() {
                let p = dist[id as usize];
                if p > best_p {
                    best_p = p;
                    best = id;
                }
            }
            best
        }
    }
}
