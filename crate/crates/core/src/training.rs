//! Teacher-forced training. Every example yields one pair per slot key:
//! filled slots train toward their span, every other slot trains toward
//! "not provided". Loss is the mean negative log probability of the target
//! tokens only; context tokens carry no loss.

use rayon::prelude::*;

use crate::copy::{copy_attention, copy_distribution, CopyMode};
use crate::corpus::Dataset;
use crate::linalg::{axpy, dot, Mat};
use crate::model::Model;
use crate::rng::substream;
use crate::templating::{
    render_context_mode, render_target, ContextText, NameMap, TargetText, TemplateMode,
};
use crate::tokenizer::Vocab;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Explicit epoch count; `None` follows the fraction schedule.
    pub epochs: Option<usize>,
    /// Data-fraction denominator, used for the epoch schedule.
    pub fraction_denom: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub copy: CopyMode,
    pub template: TemplateMode,
    /// Keep roughly `ratio * positives` "not provided" pairs instead of all
    /// of them. `None` keeps every pair.
    pub negative_ratio: Option<f64>,
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            epochs: None,
            fraction_denom: 1,
            batch_size: 16,
            seed,
            copy: CopyMode::Utterance,
            template: TemplateMode::Natural,
            negative_ratio: None,
            clip_norm: 1.0,
        }
    }
}

/// Epoch schedule: 10 epochs on full data, 20 in the few-shot settings,
/// 40 in the extreme few-shot settings (1/32 and below, or any split with
/// fewer than 256 training examples).
pub fn epochs_for(denominator: u32, example_count: usize) -> usize {
    match denominator {
        0 | 1 => 10,
        2 | 4 | 8 | 16 if example_count >= 256 => 20,
        _ => 40,
    }
}

#[derive(Debug, Clone)]
pub struct TrainPair {
    pub slot_key: String,
    pub context: ContextText,
    pub target: TargetText,
    pub positive: bool,
}

/// One (context, target) pair per example per slot key.
pub fn build_training_pairs(dataset: &Dataset, names: &NameMap) -> Result<Vec<TrainPair>> {
    build_training_pairs_mode(dataset, names, TemplateMode::Natural)
}

pub fn build_training_pairs_mode(
    dataset: &Dataset,
    names: &NameMap,
    mode: TemplateMode,
) -> Result<Vec<TrainPair>> {
    let mut pairs = Vec::with_capacity(dataset.len() * dataset.slot_keys.len());
    for ex in &dataset.examples {
        for key in &dataset.slot_keys {
            let label = ex.label(key);
            pairs.push(TrainPair {
                slot_key: key.clone(),
                context: render_context_mode(ex, key, names, mode)?,
                target: render_target(label)?,
                positive: label.is_provided(),
            });
        }
    }
    Ok(pairs)
}

/// A pair pre-tokenized for the loss: full id sequence, context length and
/// the utterance's token positions (the copy source).
pub struct PreparedPair {
    pub ids: Vec<u32>,
    pub ctx_len: usize,
    pub source: Vec<usize>,
}

pub fn prepare_pair(vocab: &Vocab, pair: &TrainPair) -> Result<PreparedPair> {
    let ctx_seq = vocab.encode(&pair.context.text);
    if ctx_seq.is_empty() {
        return Err(Error::Validation("pair has an empty context".into()));
    }
    let ctx_len = ctx_seq.len();
    let source = ctx_seq.positions_overlapping(pair.context.utterance_char_range);
    // The leading-space convention makes encode(value) produce exactly the
    // tokens that continue the context, so the full sequence is assembled
    // from ids rather than by re-encoding a concatenated string.
    let mut ids = ctx_seq.ids;
    ids.extend(vocab.encode(pair.target.value()).ids);
    ids.push(crate::tokenizer::EOS_ID);
    Ok(PreparedPair {
        ids,
        ctx_len,
        source,
    })
}

/// Mean negative log likelihood of the target tokens, optionally
/// accumulating parameter gradients (same flat layout as `model.params`).
pub fn loss_and_grad(
    model: &Model,
    prepared: &PreparedPair,
    copy: CopyMode,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let ids = &prepared.ids;
    let n = ids.len();
    let ctx_len = prepared.ctx_len;
    let d = model.cfg.hidden_dim;
    let v = model.cfg.vocab_size;
    let m_count = (n - ctx_len) as f64;

    if copy == CopyMode::Utterance && prepared.source.is_empty() {
        return Err(Error::Model("copy training needs utterance positions".into()));
    }

    let cache = model.forward_cached(ids)?;
    let hfin = &cache.hfin;
    let layout = model.layout().clone();

    let mut dhfin = Mat::zeros(n, d);
    let mut total = 0.0;

    let full_source: Vec<usize>;
    let source: &[usize] = match copy {
        CopyMode::FullContext => {
            full_source = (0..n).collect();
            &full_source
        }
        _ => &prepared.source,
    };

    for i in ctx_len - 1..n - 1 {
        let t = ids[i + 1] as usize;
        let h_i = hfin.row(i);
        let pv = model.vocab_distribution(h_i);

        let (s, p_copy, alpha, pc_t) = if copy.enabled() {
            let step_source: &[usize] = match copy {
                CopyMode::FullContext => &source[..=i],
                _ => source,
            };
            let alpha = copy_attention(h_i, hfin, i + 1, step_source)?;
            let pc = copy_distribution(&alpha[..=i], &ids[..=i], v);
            let p = model.copy_gate(h_i);
            ((1.0 - p) * pv[t] + p * pc[t], p, Some(alpha), pc[t])
        } else {
            (pv[t], 0.0, None, 0.0)
        };

        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Diverged(format!(
                "target probability {s} at position {i}"
            )));
        }
        total += -s.ln();

        let Some(grad) = grad.as_deref_mut() else {
            continue;
        };
        let dl_ds = -1.0 / (s * m_count);

        // Vocabulary head.
        let c = dl_ds * (1.0 - p_copy) * pv[t];
        {
            let head_w = model.p(&layout.head_w);
            let gw = &mut grad[layout.head_w.clone()];
            let dh = dhfin.row_mut(i);
            for k in 0..v {
                let dlogit = c * ((k == t) as u8 as f64 - pv[k]);
                if dlogit != 0.0 {
                    axpy(&mut gw[k * d..(k + 1) * d], dlogit, h_i);
                    axpy(dh, dlogit, &head_w[k * d..(k + 1) * d]);
                }
            }
            let gb = &mut grad[layout.head_b.clone()];
            for k in 0..v {
                gb[k] += c * ((k == t) as u8 as f64 - pv[k]);
            }
        }

        if let Some(alpha) = alpha {
            // Gate.
            let dp = dl_ds * (pc_t - pv[t]);
            let da = dp * p_copy * (1.0 - p_copy);
            axpy(&mut grad[layout.copy_w.clone()], da, h_i);
            grad[layout.copy_b.clone()][0] += da;
            axpy(dhfin.row_mut(i), da, model.p(&layout.copy_w));

            // Attention: dL/d alpha_j = dl_ds * p for positions holding t.
            let step_source: &[usize] = match copy {
                CopyMode::FullContext => &source[..=i],
                _ => source,
            };
            let mut dsum = 0.0;
            for &j in step_source {
                if ids[j] as usize == t {
                    dsum += alpha[j] * dl_ds * p_copy;
                }
            }
            for &j in step_source {
                let dalpha = if ids[j] as usize == t {
                    dl_ds * p_copy
                } else {
                    0.0
                };
                let de = alpha[j] * (dalpha - dsum);
                if de != 0.0 {
                    axpy(dhfin.row_mut(i), de, hfin.row(j));
                    axpy(dhfin.row_mut(j), de, h_i);
                }
            }
        }
    }

    if let Some(grad) = grad {
        model.backward(ids, &cache, &dhfin, grad);
    }
    let loss = total / m_count;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {loss}")));
    }
    Ok(loss)
}

/// Mean per-token loss of one pair under the current parameters.
pub fn teacher_forcing_loss(
    model: &Model,
    vocab: &Vocab,
    pair: &TrainPair,
    copy: CopyMode,
) -> Result<f64> {
    let prepared = prepare_pair(vocab, pair)?;
    loss_and_grad(model, &prepared, copy, None)
}

/// AdamW with decoupled weight decay on matrix-shaped tensors only.
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    fn new(param_count: usize) -> Self {
        AdamW {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    fn update(
        &mut self,
        cfg: &TrainConfig,
        params: &mut [f64],
        grad: &[f64],
        decay: &[bool],
        frozen: &[bool],
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let lr = cfg.learning_rate;
        for i in 0..params.len() {
            if frozen[i] {
                continue;
            }
            if decay[i] {
                params[i] *= 1.0 - lr * cfg.weight_decay;
            }
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("{},{:.6}\n", i + 1, l));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Number of gradient lanes per batch. Fixed (not tied to the thread
/// count) so results are bit-identical however rayon schedules the work.
const GRAD_LANES: usize = 4;

/// Train on every (example, slot) pair of the dataset. Deterministic for a
/// fixed config: shuffling, negative subsampling and init all flow from
/// named seed streams.
pub fn train(
    model: Model,
    dataset: &Dataset,
    vocab: &Vocab,
    names: &NameMap,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    let mut pairs = build_training_pairs_mode(dataset, names, cfg.template)?;
    if let Some(ratio) = cfg.negative_ratio {
        pairs = subsample_negatives(pairs, ratio, cfg.seed);
    }
    let mut cfg = cfg.clone();
    cfg.epochs = Some(
        cfg.epochs
            .unwrap_or_else(|| epochs_for(cfg.fraction_denom, dataset.len())),
    );
    train_pairs(model, &pairs, vocab, &cfg)
}

/// Train on an explicit pair list.
pub fn train_pairs(
    mut model: Model,
    pairs: &[TrainPair],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    let prepared: Vec<PreparedPair> = pairs
        .iter()
        .map(|p| prepare_pair(vocab, p))
        .collect::<Result<_>>()?;

    let decay: Vec<bool> = {
        let mut mask = vec![false; model.param_count()];
        for (_, range, decays) in model.param_groups() {
            if decays {
                mask[range].fill(true);
            }
        }
        mask
    };
    // With the copy head disabled its weights are not part of the model
    // being trained: no gradient, no decay, bitwise untouched.
    let frozen: Vec<bool> = {
        let mut mask = vec![false; model.param_count()];
        if !cfg.copy.enabled() {
            for (name, range, _) in model.param_groups() {
                if name == "copy_w" || name == "copy_b" {
                    mask[range].fill(true);
                }
            }
        }
        mask
    };

    let mut optimizer = AdamW::new(model.param_count());
    let mut shuffle_rng = substream(cfg.seed, "shuffle");
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut lanes: Vec<Vec<f64>> = (0..GRAD_LANES)
        .map(|_| vec![0.0; model.param_count()])
        .collect();
    let mut batch_grad = vec![0.0; model.param_count()];

    let epochs = cfg
        .epochs
        .unwrap_or_else(|| epochs_for(cfg.fraction_denom, usize::MAX));
    for _epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lane_size = batch.len().div_ceil(GRAD_LANES);
            let lane_losses: Vec<Result<f64>> = lanes
                .par_iter_mut()
                .enumerate()
                .map(|(lane, grad)| {
                    grad.fill(0.0);
                    let mut loss = 0.0;
                    let lo = (lane * lane_size).min(batch.len());
                    let hi = ((lane + 1) * lane_size).min(batch.len());
                    for &idx in &batch[lo..hi] {
                        loss += loss_and_grad(&model, &prepared[idx], cfg.copy, Some(grad))?;
                    }
                    Ok(loss)
                })
                .collect();

            batch_grad.fill(0.0);
            let mut batch_loss = 0.0;
            for (lane, res) in lane_losses.into_iter().enumerate() {
                batch_loss += res?;
                axpy(&mut batch_grad, 1.0, &lanes[lane]);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in batch_grad.iter_mut() {
                *g *= scale;
            }
            clip_global_norm(&mut batch_grad, cfg.clip_norm);
            optimizer.update(cfg, &mut model.params, &batch_grad, &decay, &frozen);
            if !batch_loss.is_finite() {
                return Err(Error::Diverged("non-finite batch loss".into()));
            }
            epoch_loss += batch_loss;
        }
        history.epoch_losses.push(epoch_loss / prepared.len() as f64);
    }
    Ok((model, history))
}

fn clip_global_norm(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = dot(grad, grad).sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

fn subsample_negatives(pairs: Vec<TrainPair>, ratio: f64, seed: u64) -> Vec<TrainPair> {
    let positives = pairs.iter().filter(|p| p.positive).count();
    let keep_target = ((positives as f64 * ratio).round() as usize).max(1);
    let negatives = pairs.len() - positives;
    if negatives <= keep_target {
        return pairs;
    }
    let mut rng = substream(seed, "negatives");
    let keep_prob = keep_target as f64 / negatives as f64;
    pairs
        .into_iter()
        .filter(|p| p.positive || rng.gen_bool(keep_prob))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SlotExample, SlotLabel, SynthConfig};
    use crate::model::{init_model, ModelConfig};
    use crate::templating::default_name_map;
    use crate::tokenizer::train_bpe;
    use std::collections::BTreeMap;

    fn test_vocab() -> Vocab {
        let (train, _) = generate_synthetic(&SynthConfig::new(60, 1), 5).unwrap();
        let mut lines: Vec<String> = train.examples.iter().map(|e| e.utterance.clone()).collect();
        lines.push("not provided".into());
        lines.push("Ok, the number of people is".into());
        lines.push("What is the first name, last name, date, time?".into());
        train_bpe(lines.iter().map(|s| s.as_str()), 400).unwrap()
    }

    fn tiny_model(vocab: &Vocab, seed: u64) -> Model {
        init_model(&ModelConfig {
            layers: 1,
            heads: 2,
            hidden_dim: 16,
            context_window: 128,
            vocab_size: vocab.size(),
            seed,
        })
        .unwrap()
    }

    fn one_slot_pair(utterance: &str, value: Option<(&str, usize, usize)>) -> TrainPair {
        let mut labels = BTreeMap::new();
        if let Some((s, a, b)) = value {
            labels.insert("time".to_string(), SlotLabel::span(s, a, b));
        }
        let ex = SlotExample::new(utterance, vec![], labels.clone());
        let names = default_name_map("restaurants").unwrap();
        TrainPair {
            slot_key: "time".into(),
            context: crate::templating::render_context(&ex, "time", &names).unwrap(),
            target: render_target(ex.label("time")).unwrap(),
            positive: !labels.is_empty(),
        }
    }

    #[test]
    fn pair_counts_are_examples_times_slots() {
        let (train, _) = generate_synthetic(&SynthConfig::new(40, 1), 3).unwrap();
        let names = default_name_map("synthetic-restaurants").unwrap();
        let pairs = build_training_pairs(&train, &names).unwrap();
        assert_eq!(pairs.len(), train.len() * train.slot_keys.len());

        let empty = Dataset::new("d", vec!["time".into()], vec![]).unwrap();
        assert!(build_training_pairs(&empty, &names).unwrap().is_empty());
    }

    #[test]
    fn filled_slots_get_spans_everything_else_not_provided() {
        let mut labels = BTreeMap::new();
        labels.insert("time".to_string(), SlotLabel::span("7pm", 9, 12));
        labels.insert("people".to_string(), SlotLabel::span("9", 4, 5));
        let ex = SlotExample::new("for 9 at 7pm", vec![], labels);
        let d = Dataset::new(
            "synthetic-restaurants",
            crate::corpus::RESTAURANT_SLOT_KEYS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vec![ex],
        )
        .unwrap();
        let names = default_name_map("synthetic-restaurants").unwrap();
        let pairs = build_training_pairs(&d, &names).unwrap();
        assert_eq!(pairs.len(), 5);
        let not_provided = pairs
            .iter()
            .filter(|p| p.target.text == "not provided [EOS]")
            .count();
        assert_eq!(not_provided, 3);
    }

    #[test]
    fn uniform_model_loss_is_log_vocab_for_any_context() {
        let v = test_vocab();
        let mut m = tiny_model(&v, 0);
        m.params.fill(0.0);
        let expected = (v.size() as f64).ln();
        for utt in ["at 7pm", "we want a table at 7pm on next friday please"] {
            let pair = one_slot_pair(utt, None);
            let loss = teacher_forcing_loss(&m, &v, &pair, CopyMode::Off).unwrap();
            assert!((loss - expected).abs() < 1e-9, "{utt}: {loss} vs {expected}");
        }
    }

    #[test]
    fn certain_model_has_zero_loss() {
        let v = test_vocab();
        let mut m = tiny_model(&v, 0);
        m.params.fill(0.0);
        let head_b = m
            .param_groups()
            .into_iter()
            .find(|(n, _, _)| n == "head_b")
            .unwrap()
            .1;
        m.params[head_b.start + crate::tokenizer::EOS_ID as usize] = 1000.0;
        let pair = TrainPair {
            slot_key: "time".into(),
            context: one_slot_pair("at 7pm", None).context,
            target: TargetText {
                text: "[EOS]".into(),
            },
            positive: false,
        };
        let loss = teacher_forcing_loss(&m, &v, &pair, CopyMode::Off).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn loss_matches_bruteforce_composition() {
        let v = test_vocab();
        let m = tiny_model(&v, 9);
        let pair = one_slot_pair("table at 7pm", Some(("7pm", 9, 12)));
        for copy in [CopyMode::Off, CopyMode::Utterance, CopyMode::FullContext] {
            let loss = teacher_forcing_loss(&m, &v, &pair, copy).unwrap();

            let prepared = prepare_pair(&v, &pair).unwrap();
            let h = m.forward(&prepared.ids).unwrap();
            let mut expected = 0.0;
            let n = prepared.ids.len();
            for i in prepared.ctx_len - 1..n - 1 {
                let t = prepared.ids[i + 1] as usize;
                let pv = m.vocab_distribution(h.state(i));
                let s = match copy {
                    CopyMode::Off => pv[t],
                    _ => {
                        let src: Vec<usize> = match copy {
                            CopyMode::FullContext => (0..=i).collect(),
                            _ => prepared.source.clone(),
                        };
                        let out =
                            crate::copy::copy_output(&m, &h.states, i + 1, &prepared.ids, &src)
                                .unwrap();
                        out.final_dist[t]
                    }
                };
                expected += -s.ln();
            }
            expected /= (n - prepared.ctx_len) as f64;
            assert!(
                (loss - expected).abs() < 1e-12,
                "{copy:?}: {loss} vs {expected}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_spot_check() {
        let v = test_vocab();
        let mut m = tiny_model(&v, 7);
        let pair = one_slot_pair("table at 7pm", Some(("7pm", 9, 12)));
        let prepared = prepare_pair(&v, &pair).unwrap();

        for copy in [CopyMode::Off, CopyMode::Utterance, CopyMode::FullContext] {
            let mut grad = vec![0.0; m.param_count()];
            loss_and_grad(&m, &prepared, copy, Some(&mut grad)).unwrap();

            // A few indices from every group, plus the whole copy head.
            let mut indices: Vec<usize> = Vec::new();
            for (_, range, _) in m.param_groups() {
                let len = range.end - range.start;
                indices.push(range.start);
                indices.push(range.start + len / 2);
                indices.push(range.end - 1);
            }
            let eps = 1e-5;
            for idx in indices {
                let orig = m.params[idx];
                m.params[idx] = orig + eps;
                let plus = loss_and_grad(&m, &prepared, copy, None).unwrap();
                m.params[idx] = orig - eps;
                let minus = loss_and_grad(&m, &prepared, copy, None).unwrap();
                m.params[idx] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (grad[idx] - fd).abs() / (grad[idx].abs() + fd.abs() + 1e-10);
                assert!(
                    rel < 1e-4,
                    "{copy:?} param {idx}: analytic {} vs fd {fd}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn zero_epochs_leaves_the_model_untouched() {
        let v = test_vocab();
        let (train_d, _) = generate_synthetic(&SynthConfig::new(4, 1), 2).unwrap();
        let names = default_name_map("synthetic-restaurants").unwrap();
        let m = tiny_model(&v, 1);
        let before = m.params.clone();
        let mut cfg = TrainConfig::new(0);
        cfg.epochs = Some(0);
        let (m, history) = train(m, &train_d, &v, &names, &cfg).unwrap();
        assert_eq!(m.params, before);
        assert!(history.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let v = test_vocab();
        let (train_d, _) = generate_synthetic(&SynthConfig::new(6, 1), 2).unwrap();
        let names = default_name_map("synthetic-restaurants").unwrap();
        let mut cfg = TrainConfig::new(11);
        cfg.epochs = Some(2);
        cfg.batch_size = 4;
        let (m1, h1) = train(tiny_model(&v, 1), &train_d, &v, &names, &cfg).unwrap();
        let (m2, h2) = train(tiny_model(&v, 1), &train_d, &v, &names, &cfg).unwrap();
        assert_eq!(m1.params, m2.params);
        assert_eq!(h1.epoch_losses, h2.epoch_losses);
    }

    #[test]
    fn copy_off_training_never_touches_copy_params() {
        let v = test_vocab();
        let (train_d, _) = generate_synthetic(&SynthConfig::new(6, 1), 3).unwrap();
        let names = default_name_map("synthetic-restaurants").unwrap();
        let m = tiny_model(&v, 2);
        let groups = m.param_groups();
        let ranges: Vec<_> = groups
            .iter()
            .filter(|(n, _, _)| n == "copy_w" || n == "copy_b")
            .map(|(_, r, _)| r.clone())
            .collect();
        let before: Vec<Vec<u8>> = ranges
            .iter()
            .map(|r| m.params[r.clone()].iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let mut cfg = TrainConfig::new(0);
        cfg.epochs = Some(2);
        cfg.copy = CopyMode::Off;
        let (m, _) = train(m, &train_d, &v, &names, &cfg).unwrap();
        let after: Vec<Vec<u8>> = ranges
            .iter()
            .map(|r| m.params[r.clone()].iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_steps_decrease_the_loss() {
        let v = test_vocab();
        let (train_d, _) = generate_synthetic(&SynthConfig::new(4, 1), 4).unwrap();
        let names = default_name_map("synthetic-restaurants").unwrap();
        let mut cfg = TrainConfig::new(5);
        cfg.epochs = Some(5);
        cfg.batch_size = 64; // whole set: one step per epoch, frozen batch
        let (_, history) = train(tiny_model(&v, 3), &train_d, &v, &names, &cfg).unwrap();
        assert_eq!(history.epoch_losses.len(), 5);
        let violations = history
            .epoch_losses
            .windows(2)
            .filter(|w| w[1] >= w[0])
            .count();
        assert!(
            violations <= 1,
            "losses failed to decrease: {:?}",
            history.epoch_losses
        );
    }

    #[test]
    fn divergent_parameters_error_out() {
        let v = test_vocab();
        let mut m = tiny_model(&v, 0);
        m.params.fill(f64::INFINITY);
        let pair = one_slot_pair("at 7pm", None);
        assert!(teacher_forcing_loss(&m, &v, &pair, CopyMode::Off).is_err());
    }

    #[test]
    fn negative_subsampling_balances_classes() {
        let (train_d, _) = generate_synthetic(&SynthConfig::new(100, 1), 6).unwrap();
        let names = default_name_map("synthetic-restaurants").unwrap();
        let pairs = build_training_pairs(&train_d, &names).unwrap();
        let positives = pairs.iter().filter(|p| p.positive).count();
        let sub = subsample_negatives(pairs, 1.0, 9);
        let kept_neg = sub.iter().filter(|p| !p.positive).count();
        let kept_pos = sub.iter().filter(|p| p.positive).count();
        assert_eq!(kept_pos, positives, "positives are never dropped");
        let ratio = kept_neg as f64 / positives as f64;
        assert!((0.6..1.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn epoch_schedule_matches_the_protocol() {
        assert_eq!(epochs_for(1, 8198), 10);
        for d in [2, 4, 8, 16] {
            assert_eq!(epochs_for(d, 512), 20);
        }
        for d in [32, 64, 128] {
            assert_eq!(epochs_for(d, 512), 40);
        }
        // Below 256 examples every few-shot split is extreme.
        assert_eq!(epochs_for(16, 125), 40);
        assert_eq!(epochs_for(2, 100), 40);
    }
}
