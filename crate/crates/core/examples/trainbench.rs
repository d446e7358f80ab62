// Scratch driver for calibrating the desk-scale defaults. Not part of the
// test suite.

use std::time::Instant;

use gensf_core::copy::CopyMode;
use gensf_core::corpus::{generate_synthetic, split_fraction, SynthConfig};
use gensf_core::eval::{evaluate, PipelineConfig};
use gensf_core::model::{init_model, ModelConfig};
use gensf_core::templating::default_name_map;
use gensf_core::tokenizer::{train_bpe, training_corpus_lines};
use gensf_core::training::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let hidden: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(96);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let denom: u32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1);
    let copy_on: bool = args.get(6).map(|s| s == "copy").unwrap_or(true);

    let t0 = Instant::now();
    let (train_full, test_d) = generate_synthetic(&SynthConfig::new(train_size, 500), 7).unwrap();
    let names = default_name_map("synthetic-restaurants").unwrap();
    let lines = training_corpus_lines(&train_full, &names);
    let vocab = train_bpe(lines.iter().map(|s| s.as_str()), 1283).unwrap();
    println!(
        "setup: {:.1}s vocab={} merges={}",
        t0.elapsed().as_secs_f64(),
        vocab.size(),
        vocab.merge_count()
    );

    let train_d = split_fraction(&train_full, denom, 7).unwrap();
    let mcfg = ModelConfig {
        layers,
        heads: 4,
        hidden_dim: hidden,
        context_window: 128,
        vocab_size: vocab.size(),
        seed: 7,
    };
    let model = init_model(&mcfg).unwrap();
    println!("params: {}", model.param_count());

    let mut tcfg = TrainConfig::new(7);
    tcfg.epochs = Some(epochs);
    tcfg.fraction_denom = denom;
    if let Some(bs) = args.get(7).and_then(|s| s.parse().ok()) {
        tcfg.batch_size = bs;
    }
    if !copy_on {
        tcfg.copy = CopyMode::Off;
    }
    let t1 = Instant::now();
    let (model, history) = train(model, &train_d, &vocab, &names, &tcfg).unwrap();
    let dt = t1.elapsed().as_secs_f64();
    println!(
        "train: {dt:.1}s ({} pairs x {epochs} epochs, {:.1} pairs/s) losses={:?}",
        train_d.len() * train_d.slot_keys.len(),
        (train_d.len() * train_d.slot_keys.len() * epochs) as f64 / dt,
        history.epoch_losses
    );

    let t2 = Instant::now();
    let mut pcfg = PipelineConfig::standard(names.clone());
    if !copy_on {
        pcfg.copy = CopyMode::Off;
    }
    let report = evaluate(&model, &vocab, &test_d, &pcfg).unwrap();
    println!("eval: {:.1}s", t2.elapsed().as_secs_f64());
    println!("{report}");

    // Show a few mispredictions per slot for diagnosis.
    let mut shown: std::collections::BTreeMap<&str, usize> = Default::default();
    for ex in &test_d.examples {
        let preds =
            gensf_core::eval::predict_slots(&model, &vocab, ex, &test_d.slot_keys, &pcfg).unwrap();
        for key in &test_d.slot_keys {
            let gold = ex.label(key).surface();
            let pred = preds.get(key).and_then(|v| v.as_deref());
            let ok = match (pred, gold) {
                (Some(p), Some(g)) => p.trim().eq_ignore_ascii_case(g.trim()),
                (None, None) => true,
                _ => false,
            };
            let count = shown.entry(key.as_str()).or_insert(0);
            if !ok && *count < 6 {
                *count += 1;
                println!(
                    "MISS slot={key} gold={gold:?} pred={pred:?} requested={:?} utt={:?}",
                    ex.requested_slots, ex.utterance
                );
            }
        }
    }
}
