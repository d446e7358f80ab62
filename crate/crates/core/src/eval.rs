//! End-to-end prediction and exact-match scoring.
//!
//! A prediction is counted TP when it is non-null and equals gold after
//! symmetric normalization (case-insensitive, trimmed); FP when non-null
//! and wrong or unsupported; FN when null while gold has a value. Slot F1
//! is the harmonic mean of precision and recall (percent scale) and the
//! headline number is the unweighted mean over slot keys.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::copy::CopyMode;
use crate::corpus::{split_fraction, Dataset, SlotExample};
use crate::decoding::{allowed_token_set, constrained_decode, greedy_decode, DecodeOptions};
use crate::model::{init_model, Model, ModelConfig};
use crate::postprocess::{recover, Recovery, RecoveryConfig};
use crate::templating::{
    render_context_mode, render_trivial_context, ContextText, NameMap, TemplateMode, NOT_PROVIDED,
};
use crate::tokenizer::Vocab;
use crate::training::{train, TrainConfig};
use crate::{Error, Result};

/// Inference-time switches for the full pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub copy: CopyMode,
    pub constrained: bool,
    pub recover: bool,
    pub template: TemplateMode,
    pub names: NameMap,
    pub recovery: RecoveryConfig,
    pub max_len: usize,
}

impl PipelineConfig {
    pub fn standard(names: NameMap) -> Self {
        PipelineConfig {
            copy: CopyMode::Utterance,
            constrained: true,
            recover: true,
            template: TemplateMode::Natural,
            names,
            recovery: RecoveryConfig::default(),
            max_len: 16,
        }
    }

    /// No fine-tuning: the copy head is off (it would need training), but
    /// constrained decoding and span recovery stay on.
    pub fn zero_shot(names: NameMap) -> Self {
        PipelineConfig {
            copy: CopyMode::Off,
            ..PipelineConfig::standard(names)
        }
    }
}

/// Spec'd baseline renderer: `utterance [EOS] slot_key =`.
pub fn trivial_template_render(ex: &SlotExample, slot_key: &str) -> Result<ContextText> {
    render_trivial_context(ex, slot_key)
}

/// Predict a value (or null) for every slot key of one example.
pub fn predict_slots(
    model: &Model,
    vocab: &Vocab,
    ex: &SlotExample,
    slot_keys: &[String],
    cfg: &PipelineConfig,
) -> Result<BTreeMap<String, Option<String>>> {
    let utterance_tokens = vocab.encode(&ex.utterance);
    let allowed = allowed_token_set(vocab, &utterance_tokens);
    let opts = DecodeOptions {
        max_len: cfg.max_len,
        copy: cfg.copy,
    };
    let mut out = BTreeMap::new();
    for key in slot_keys {
        let ctx = render_context_mode(ex, key, &cfg.names, cfg.template)?;
        let generation = if cfg.constrained {
            constrained_decode(model, vocab, &ctx, &allowed, opts)?
        } else {
            greedy_decode(model, vocab, &ctx, opts)?
        };
        let value = finalize_value(&generation.text, ex, &utterance_tokens, cfg);
        out.insert(key.clone(), value);
    }
    Ok(out)
}

/// Map raw generated text to the final prediction: null for empty or
/// "not provided"; with recovery on, only token-aligned spans survive (an
/// unrecoverable value becomes an abstention so non-null predictions are
/// always utterance spans); with recovery off the raw text passes through.
fn finalize_value(
    raw: &str,
    ex: &SlotExample,
    utterance_tokens: &crate::tokenizer::TokenSeq,
    cfg: &PipelineConfig,
) -> Option<String> {
    let trimmed = raw.trim();
    if trimmed.is_empty() || trimmed.eq_ignore_ascii_case(NOT_PROVIDED) {
        return None;
    }
    if cfg.recover {
        match recover(trimmed, &ex.utterance, utterance_tokens, &cfg.recovery) {
            Recovery::NotProvided | Recovery::Raw(_) => None,
            Recovery::Span(s) => Some(s),
        }
    } else {
        Some(trimmed.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Percent scale, as in the usual result tables.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SlotScore {
    fn finalize(mut self) -> Self {
        if self.tp + self.fp + self.fn_ == 0 {
            // Nothing to find and nothing predicted: vacuously perfect.
            self.precision = 100.0;
            self.recall = 100.0;
            self.f1 = 100.0;
            return self;
        }
        self.precision = ratio(self.tp, self.tp + self.fp);
        self.recall = ratio(self.tp, self.tp + self.fn_);
        self.f1 = if self.precision + self.recall == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        };
        self
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-slot scores in slot-key order.
    pub per_slot: Vec<(String, SlotScore)>,
    pub macro_f1: f64,
}

impl EvalReport {
    pub fn slot(&self, key: &str) -> Option<&SlotScore> {
        self.per_slot.iter().find(|(k, _)| k == key).map(|(_, s)| s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("slot,precision,recall,f1,tp,fp,fn\n");
        for (key, s) in &self.per_slot {
            out.push_str(&format!(
                "{key},{:.2},{:.2},{:.2},{},{},{}\n",
                s.precision, s.recall, s.f1, s.tp, s.fp, s.fn_
            ));
        }
        out.push_str(&format!("macro,,,{:.2},,,\n", self.macro_f1));
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>8} {:>8} {:>8} {:>5} {:>5} {:>5}", "slot", "P", "R", "F1", "TP", "FP", "FN")?;
        for (key, s) in &self.per_slot {
            writeln!(
                f,
                "{key:<14} {:>8.2} {:>8.2} {:>8.2} {:>5} {:>5} {:>5}",
                s.precision, s.recall, s.f1, s.tp, s.fp, s.fn_
            )?;
        }
        writeln!(f, "{:<14} {:>8} {:>8} {:>8.2}", "macro-F1", "", "", self.macro_f1)
    }
}

fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Exact-match counting over parallel prediction/gold lists.
pub fn slot_f1(
    predictions: &[BTreeMap<String, Option<String>>],
    gold: &Dataset,
) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} gold examples",
            predictions.len(),
            gold.len()
        )));
    }
    for p in predictions {
        for key in p.keys() {
            if !gold.slot_keys.contains(key) {
                return Err(Error::Validation(format!(
                    "prediction for unknown slot '{key}'"
                )));
            }
        }
    }
    let mut per_slot = Vec::with_capacity(gold.slot_keys.len());
    for key in &gold.slot_keys {
        let mut score = SlotScore::default();
        for (pred_map, ex) in predictions.iter().zip(&gold.examples) {
            let pred = pred_map.get(key).and_then(|v| v.as_ref());
            let gold_value = ex.label(key).surface();
            match (pred, gold_value) {
                (Some(p), Some(g)) if normalize(p) == normalize(g) => score.tp += 1,
                (Some(_), _) => score.fp += 1,
                (None, Some(_)) => score.fn_ += 1,
                (None, None) => {}
            }
        }
        per_slot.push((key.clone(), score.finalize()));
    }
    let macro_f1 = per_slot.iter().map(|(_, s)| s.f1).sum::<f64>() / per_slot.len().max(1) as f64;
    Ok(EvalReport { per_slot, macro_f1 })
}

/// Predict over a whole dataset (examples fan out in parallel) and score.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    dataset: &Dataset,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let predictions: Vec<BTreeMap<String, Option<String>>> = dataset
        .examples
        .par_iter()
        .map(|ex| predict_slots(model, vocab, ex, &dataset.slot_keys, cfg))
        .collect::<Result<_>>()?;
    slot_f1(&predictions, dataset)
}

// --- ablation grid ----------------------------------------------------------

pub const SPLIT_NAMES: [&str; 3] = ["full", "fewshot", "zeroshot"];

/// One grid row: the four adaptation switches and the macro-F1 per split.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub copy_enabled: bool,
    pub constrained: bool,
    pub recover: bool,
    pub trivial_template: bool,
    pub macro_f1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("copy,constrained,recover,template,full,fewshot,zeroshot\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.2},{:.2},{:.2}\n",
                onoff(r.copy_enabled),
                onoff(r.constrained),
                onoff(r.recover),
                if r.trivial_template { "trivial" } else { "natural" },
                r.macro_f1.get("full").copied().unwrap_or(f64::NAN),
                r.macro_f1.get("fewshot").copied().unwrap_or(f64::NAN),
                r.macro_f1.get("zeroshot").copied().unwrap_or(f64::NAN),
            ));
        }
        out
    }

    pub fn row(
        &self,
        copy_enabled: bool,
        constrained: bool,
        recover: bool,
        trivial_template: bool,
    ) -> Option<&AblationRow> {
        self.rows.iter().find(|r| {
            r.copy_enabled == copy_enabled
                && r.constrained == constrained
                && r.recover == recover
                && r.trivial_template == trivial_template
        })
    }
}

fn onoff(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

impl fmt::Display for AblationOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:<12} {:<8} {:<9} {:>8} {:>8} {:>9}",
            "copy", "constrained", "recover", "template", "full", "fewshot", "zeroshot"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:<12} {:<8} {:<9} {:>8.2} {:>8.2} {:>9.2}",
                onoff(r.copy_enabled),
                onoff(r.constrained),
                onoff(r.recover),
                if r.trivial_template { "trivial" } else { "natural" },
                r.macro_f1.get("full").copied().unwrap_or(f64::NAN),
                r.macro_f1.get("fewshot").copied().unwrap_or(f64::NAN),
                r.macro_f1.get("zeroshot").copied().unwrap_or(f64::NAN),
            )?;
        }
        Ok(())
    }
}

/// Inputs for the ablation matrix. Training cost dominates: one model per
/// (split, template, copy) combination, plus one untrained zero-shot model.
pub struct AblationInputs<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub vocab: &'a Vocab,
    pub names: &'a NameMap,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub fewshot_denom: u32,
}

/// Cross product of {copy} x {constrained} x {recover} x {template} over
/// the full, few-shot and zero-shot splits. Zero-shot cells always run
/// with the copy head off (an untrained copy head is meaningless), so the
/// copy switch only changes the trained columns there.
pub fn run_ablation(inputs: &AblationInputs) -> Result<AblationOutcome> {
    let fewshot = split_fraction(inputs.train, inputs.fewshot_denom, inputs.train_cfg.seed)?;
    let splits: [(&str, Option<&Dataset>); 3] = [
        ("full", Some(inputs.train)),
        ("fewshot", Some(&fewshot)),
        ("zeroshot", None),
    ];

    // Trained models per (split, trivial_template, copy).
    let mut models: BTreeMap<(String, bool, bool), Model> = BTreeMap::new();
    for (split_name, data) in &splits {
        let Some(data) = data else {
            let zero = init_model(&inputs.model_cfg)?;
            models.insert((split_name.to_string(), false, false), zero);
            continue;
        };
        for trivial in [false, true] {
            for copy in [true, false] {
                let mut cfg = inputs.train_cfg.clone();
                cfg.fraction_denom = if *split_name == "full" {
                    1
                } else {
                    inputs.fewshot_denom
                };
                cfg.copy = if copy { cfg.copy } else { CopyMode::Off };
                cfg.template = if trivial {
                    TemplateMode::Trivial
                } else {
                    TemplateMode::Natural
                };
                let model = init_model(&inputs.model_cfg)?;
                let (model, _) = train(model, data, inputs.vocab, inputs.names, &cfg)?;
                models.insert((split_name.to_string(), trivial, copy), model);
            }
        }
    }

    let mut rows = Vec::new();
    let mut eval_cache: BTreeMap<(String, bool, bool, bool, bool), f64> = BTreeMap::new();
    for trivial in [false, true] {
        for copy in [true, false] {
            for constrained in [true, false] {
                for recover in [true, false] {
                    let mut row = AblationRow {
                        copy_enabled: copy,
                        constrained,
                        recover,
                        trivial_template: trivial,
                        macro_f1: BTreeMap::new(),
                    };
                    for (split_name, _) in &splits {
                        let zero_shot = *split_name == "zeroshot";
                        let eff_copy = copy && !zero_shot;
                        let key = (
                            split_name.to_string(),
                            trivial,
                            eff_copy,
                            constrained,
                            recover,
                        );
                        let f1 = match eval_cache.get(&key) {
                            Some(&v) => v,
                            None => {
                                let model = models
                                    .get(&(split_name.to_string(), trivial && !zero_shot, eff_copy))
                                    .expect("model trained for this cell");
                                let mut cfg = PipelineConfig::standard(inputs.names.clone());
                                cfg.copy = if eff_copy {
                                    inputs.train_cfg.copy
                                } else {
                                    CopyMode::Off
                                };
                                cfg.constrained = constrained;
                                cfg.recover = recover;
                                cfg.template = if trivial {
                                    TemplateMode::Trivial
                                } else {
                                    TemplateMode::Natural
                                };
                                let report = evaluate(model, inputs.vocab, inputs.test, &cfg)?;
                                eval_cache.insert(key, report.macro_f1);
                                report.macro_f1
                            }
                        };
                        row.macro_f1.insert(split_name.to_string(), f1);
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(AblationOutcome { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SlotLabel, SynthConfig};
    use crate::templating::default_name_map;
    use crate::tokenizer::train_bpe;

    fn names() -> NameMap {
        default_name_map("synthetic-restaurants").unwrap()
    }

    fn small_world() -> (Dataset, Dataset, Vocab) {
        let (train, test) = generate_synthetic(&SynthConfig::new(30, 8), 7).unwrap();
        let mut lines: Vec<String> = train.examples.iter().map(|e| e.utterance.clone()).collect();
        lines.push("not provided".into());
        lines.push("Ok, the number of people is the first name, last name, date, time".into());
        lines.push("What is =".into());
        let vocab = train_bpe(lines.iter().map(|s| s.as_str()), 380).unwrap();
        (train, test, vocab)
    }

    fn untrained(vocab: &Vocab, seed: u64) -> Model {
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

    fn gold_with(
        utterance: &str,
        spans: &[(&str, &str, usize, usize)],
    ) -> (Dataset, SlotExample) {
        let mut labels = BTreeMap::new();
        for (key, surf, a, b) in spans {
            labels.insert(key.to_string(), SlotLabel::span(*surf, *a, *b));
        }
        let ex = SlotExample::new(utterance, vec![], labels);
        let d = Dataset::new(
            "synthetic-restaurants",
            crate::corpus::RESTAURANT_SLOT_KEYS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vec![ex.clone()],
        )
        .unwrap();
        (d, ex)
    }

    #[test]
    fn perfect_predictions_score_100() {
        let (d, _) = gold_with("table at 7pm", &[("time", "7pm", 9, 12)]);
        let mut pred = BTreeMap::new();
        for k in &d.slot_keys {
            pred.insert(k.clone(), None);
        }
        pred.insert("time".into(), Some("7PM ".to_string())); // normalization applies
        let report = slot_f1(&[pred], &d).unwrap();
        assert_eq!(report.slot("time").unwrap().f1, 100.0);
        assert_eq!(report.macro_f1, 100.0);
    }

    #[test]
    fn all_null_predictions_score_zero_on_filled_slots() {
        let (d, _) = gold_with("table at 7pm", &[("time", "7pm", 9, 12)]);
        let mut pred = BTreeMap::new();
        for k in &d.slot_keys {
            pred.insert(k.clone(), None);
        }
        let report = slot_f1(&[pred], &d).unwrap();
        let time = report.slot("time").unwrap();
        assert_eq!((time.precision, time.recall, time.f1), (0.0, 0.0, 0.0));
        assert_eq!(time.fn_, 1);
    }

    #[test]
    fn hand_counted_confusion_matches() {
        // Slot "time" over 10 examples: 3 TP, 1 FP, 2 FN, 4 true negatives.
        let mut gold_examples = Vec::new();
        let mut preds = Vec::new();
        let with_time = |v: &str| {
            let utt = format!("at {v}");
            let mut labels = BTreeMap::new();
            labels.insert("time".to_string(), SlotLabel::span(v, 3, 3 + v.len()));
            SlotExample::new(utt, vec![], labels)
        };
        let without = |i: usize| SlotExample::new(format!("hello {i}"), vec![], BTreeMap::new());
        let mut push = |ex: SlotExample, pred: Option<&str>| {
            gold_examples.push(ex);
            let mut m = BTreeMap::new();
            m.insert("time".to_string(), pred.map(|s| s.to_string()));
            preds.push(m);
        };
        push(with_time("7pm"), Some("7pm")); // TP
        push(with_time("8pm"), Some("8pm")); // TP
        push(with_time("9pm"), Some("9pm")); // TP
        push(with_time("6pm"), None); // FN
        push(with_time("5pm"), None); // FN
        push(without(1), Some("4pm")); // FP
        for i in 2..=5 {
            push(without(i), None); // true negatives
        }
        let d = Dataset::new("d", vec!["time".into()], gold_examples).unwrap();
        let report = slot_f1(&preds, &d).unwrap();
        let s = report.slot("time").unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (3, 1, 2));
        assert!((s.precision - 75.0).abs() < 1e-9);
        assert!((s.recall - 60.0).abs() < 1e-9);
        assert!((s.f1 - 2.0 * 75.0 * 60.0 / 135.0).abs() < 1e-9);
    }

    #[test]
    fn report_internal_consistency_and_permutation_invariance() {
        let (train, test, vocab) = small_world();
        let _ = train;
        let m = untrained(&vocab, 5);
        let cfg = PipelineConfig::zero_shot(names());
        let report = evaluate(&m, &vocab, &test, &cfg).unwrap();
        for (_, s) in &report.per_slot {
            if s.tp + s.fp + s.fn_ == 0 {
                continue;
            }
            let p = ratio(s.tp, s.tp + s.fp);
            let r = ratio(s.tp, s.tp + s.fn_);
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            assert!((s.f1 - f1).abs() < 1e-9);
        }
        // Macro-F1 is order-invariant in the slot keys.
        let mut shuffled = test.clone();
        shuffled.slot_keys.reverse();
        let report2 = evaluate(&m, &vocab, &shuffled, &cfg).unwrap();
        assert!((report.macro_f1 - report2.macro_f1).abs() < 1e-9);
    }

    #[test]
    fn unknown_slot_key_in_predictions_errors() {
        let (d, _) = gold_with("table at 7pm", &[("time", "7pm", 9, 12)]);
        let mut pred = BTreeMap::new();
        pred.insert("area".to_string(), Some("x".to_string()));
        assert!(slot_f1(&[pred], &d).is_err());
    }

    #[test]
    fn untrained_constrained_recovered_predictions_are_structurally_sound() {
        let (_, test, vocab) = small_world();
        let cfg = PipelineConfig::zero_shot(names());
        for seed in [1, 2] {
            let m = untrained(&vocab, seed);
            for ex in test.examples.iter().take(10) {
                let utt_tokens = vocab.encode(&ex.utterance);
                let spans = crate::postprocess::enumerate_spans(
                    &ex.utterance,
                    &utt_tokens,
                    cfg.recovery.max_span_tokens,
                );
                let preds = predict_slots(&m, &vocab, ex, &test.slot_keys, &cfg).unwrap();
                for (key, value) in preds {
                    if let Some(v) = value {
                        assert!(
                            spans.iter().any(|(surface, _)| *surface == v),
                            "slot {key}: {v:?} is not a token-aligned span of {:?}",
                            ex.utterance
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn eos_rigged_model_predicts_all_null() {
        let (_, test, vocab) = small_world();
        let mut m = untrained(&vocab, 3);
        m.params.fill(0.0);
        let head_b = m
            .param_groups()
            .into_iter()
            .find(|(n, _, _)| n == "head_b")
            .unwrap()
            .1;
        m.params[head_b.start + crate::tokenizer::EOS_ID as usize] = 50.0;
        let cfg = PipelineConfig::zero_shot(names());
        let ex = &test.examples[0];
        let preds = predict_slots(&m, &vocab, ex, &test.slot_keys, &cfg).unwrap();
        assert!(preds.values().all(|v| v.is_none()));
    }

    #[test]
    fn trivial_template_shape() {
        let (_, ex) = gold_with("table at 7pm", &[("time", "7pm", 9, 12)]);
        let ctx = trivial_template_render(&ex, "time").unwrap();
        assert_eq!(ctx.text, "table at 7pm [EOS] time =");
        assert_eq!(ctx.utterance(), "table at 7pm");
        let ctx = trivial_template_render(&ex, "first_name").unwrap();
        assert!(ctx.text.ends_with("[EOS] first_name ="));
    }

    #[test]
    fn ablation_grid_is_deterministic_and_complete() {
        let (train, test, vocab) = small_world();
        let small_train = Dataset {
            domain_name: train.domain_name.clone(),
            slot_keys: train.slot_keys.clone(),
            examples: train.examples[..16].to_vec(),
        };
        let small_test = Dataset {
            domain_name: test.domain_name.clone(),
            slot_keys: test.slot_keys.clone(),
            examples: test.examples[..4].to_vec(),
        };
        let model_cfg = ModelConfig {
            layers: 1,
            heads: 2,
            hidden_dim: 16,
            context_window: 128,
            vocab_size: vocab.size(),
            seed: 7,
        };
        let mut train_cfg = TrainConfig::new(7);
        train_cfg.epochs = Some(1);
        let inputs = AblationInputs {
            train: &small_train,
            test: &small_test,
            vocab: &vocab,
            names: &names(),
            model_cfg,
            train_cfg,
            fewshot_denom: 2,
        };
        let a = run_ablation(&inputs).unwrap();
        let b = run_ablation(&inputs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 16);
        for row in &a.rows {
            for split in SPLIT_NAMES {
                assert!(row.macro_f1.contains_key(split), "missing {split}");
            }
        }
        // Zero-shot ignores the copy switch entirely.
        let on = a.row(true, true, true, false).unwrap();
        let off = a.row(false, true, true, false).unwrap();
        assert_eq!(on.macro_f1["zeroshot"], off.macro_f1["zeroshot"]);
    }
}
