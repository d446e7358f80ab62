//! One binary for the whole experiment lifecycle:
//! synthesize -> tokenizer train -> train -> eval / predict / ablate.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{FileConfig, OnOff, Overrides, RunConfig, TemplateArg};
use gensf_core::copy::CopyMode;
use gensf_core::corpus::{generate_synthetic, load_dataset, save_dataset, split_fraction, SynthConfig};
use gensf_core::eval::{evaluate, run_ablation, AblationInputs, PipelineConfig};
use gensf_core::model::{
    init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig,
};
use gensf_core::postprocess::RecoveryConfig;
use gensf_core::templating::{default_name_map, NameMap};
use gensf_core::tokenizer::{train_bpe, training_corpus_lines, Vocab};
use gensf_core::training::{train, TrainConfig, TrainHistory};

#[derive(Parser)]
#[command(
    name = "gensf",
    about = "Generative slot filling: synthesize data, train a small causal LM with a copy head, evaluate with constrained decoding and span recovery",
    version
)]
struct Cli {
    /// JSON config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed (overrides config file and GENSF_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test corpus.
    Synthesize(SynthesizeArgs),
    /// Tokenizer utilities.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Fine-tune a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the zero-shot preset) on a dataset.
    Eval(EvalArgs),
    /// Predict slot values for one utterance.
    Predict(PredictArgs),
    /// Run the adaptation-ablation grid.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum TokenizerCmd {
    /// Train a BPE vocabulary on a dataset.
    Train(TokenizerTrainArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Training examples to generate.
    #[arg(long)]
    train_size: Option<usize>,
    /// Test examples to generate.
    #[arg(long)]
    test_size: Option<usize>,
    /// Directory for train.jsonl / test.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TokenizerTrainArgs {
    /// Dataset to read utterances from.
    #[arg(long)]
    data: PathBuf,
    /// Total vocabulary size (specials + byte alphabet + merges).
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Name-map JSON (defaults to the dataset domain's built-in map).
    #[arg(long)]
    name_map: Option<PathBuf>,
    /// Output vocabulary file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file from `tokenizer train`.
    #[arg(long)]
    vocab: PathBuf,
    /// Keep 1/k of the training examples (k in 1,2,4,...,128).
    #[arg(long, default_value_t = 1)]
    fraction: u32,
    /// Copy head on or off.
    #[arg(long)]
    copy: Option<OnOff>,
    /// Copy attention source positions.
    #[arg(long)]
    copy_source: Option<config::CopySourceArg>,
    /// Context template shape.
    #[arg(long)]
    template: Option<TemplateArg>,
    /// Override the fraction-based epoch schedule.
    #[arg(long)]
    epochs: Option<usize>,
    /// Name-map JSON (defaults to the dataset domain's built-in map).
    #[arg(long)]
    name_map: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of per-epoch losses.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation dataset.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint (required unless --preset zeroshot).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// full/fewshot evaluate a checkpoint; zeroshot evaluates an untrained
    /// model (copy off, constraints and recovery on).
    #[arg(long, default_value = "full")]
    preset: String,
    /// Vocabulary file (zero-shot preset only).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Name-map JSON (defaults to checkpoint or domain map).
    #[arg(long)]
    name_map: Option<PathBuf>,
    #[arg(long)]
    copy: Option<OnOff>,
    #[arg(long)]
    constrained: Option<OnOff>,
    #[arg(long)]
    recover: Option<OnOff>,
    #[arg(long)]
    recover_threshold: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    template: Option<TemplateArg>,
    /// Write the report as CSV here.
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    utterance: String,
    /// Slot key to fill.
    #[arg(long)]
    slot: String,
    /// Comma-separated requested slots.
    #[arg(long)]
    requested: Option<String>,
    #[arg(long)]
    copy: Option<OnOff>,
    #[arg(long)]
    constrained: Option<OnOff>,
    #[arg(long)]
    recover: Option<OnOff>,
    #[arg(long)]
    recover_threshold: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid name (only "default" is defined).
    #[arg(long, default_value = "default")]
    grid: String,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    name_map: Option<PathBuf>,
    /// Few-shot fraction denominator for the middle column.
    #[arg(long, default_value_t = 16)]
    fewshot_denom: u32,
    /// Override the per-split epoch schedule (mainly for quick runs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Write the grid as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .downcast_ref::<gensf_core::Error>()
                .map(|e| e.category())
                .unwrap_or("runtime");
            eprintln!("error[{category}]: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synthesize(args) => synthesize(&file, cli.seed, args),
        Command::Tokenizer(TokenizerCmd::Train(args)) => tokenizer_train(&file, cli.seed, args),
        Command::Train(args) => train_cmd(&file, cli.seed, args),
        Command::Eval(args) => eval_cmd(&file, cli.seed, args),
        Command::Predict(args) => predict_cmd(&file, cli.seed, args),
        Command::Ablate(args) => ablate_cmd(&file, cli.seed, args),
    }
}

fn resolve(file: &FileConfig, ov: Overrides) -> Result<RunConfig> {
    let rc = RunConfig::resolve(file, &ov)?;
    rc.log();
    Ok(rc)
}

fn load_names(
    explicit: Option<&PathBuf>,
    domain: &str,
    fallback: Option<&NameMap>,
) -> Result<NameMap> {
    match explicit {
        Some(path) => Ok(NameMap::load(path)?),
        None => match fallback {
            Some(names) => Ok(names.clone()),
            None => Ok(default_name_map(domain)?),
        },
    }
}

fn synthesize(file: &FileConfig, seed: Option<u64>, args: SynthesizeArgs) -> Result<()> {
    let rc = resolve(
        file,
        Overrides {
            seed,
            ..Default::default()
        },
    )?;
    let mut cfg = SynthConfig::new(
        args.train_size.unwrap_or(rc.train_size),
        args.test_size.unwrap_or(rc.test_size),
    );
    cfg.domain_name = "synthetic-restaurants".into();
    let (train_d, test_d) = generate_synthetic(&cfg, rc.seed)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let train_path = args.out_dir.join("train.jsonl");
    let test_path = args.out_dir.join("test.jsonl");
    save_dataset(&train_d, &train_path)?;
    save_dataset(&test_d, &test_path)?;
    println!(
        "wrote {} ({} examples) and {} ({} examples)",
        train_path.display(),
        train_d.len(),
        test_path.display(),
        test_d.len()
    );
    Ok(())
}

fn tokenizer_train(file: &FileConfig, seed: Option<u64>, args: TokenizerTrainArgs) -> Result<()> {
    let rc = resolve(
        file,
        Overrides {
            seed,
            ..Default::default()
        },
    )?;
    let dataset = load_dataset(&args.data)?;
    let names = load_names(args.name_map.as_ref(), &dataset.domain_name, None)?;
    let lines = training_corpus_lines(&dataset, &names);
    let vocab = train_bpe(
        lines.iter().map(|s| s.as_str()),
        args.vocab_size.unwrap_or(rc.vocab_size),
    )?;
    vocab.save(&args.out)?;
    println!(
        "wrote {} ({} tokens, {} merges)",
        args.out.display(),
        vocab.size(),
        vocab.merge_count()
    );
    Ok(())
}

fn train_cmd(file: &FileConfig, seed: Option<u64>, args: TrainArgs) -> Result<()> {
    let rc = resolve(
        file,
        Overrides {
            seed,
            copy: args.copy,
            copy_source: args.copy_source,
            template: args.template,
            ..Default::default()
        },
    )?;
    let full = load_dataset(&args.data)?;
    let dataset = split_fraction(&full, args.fraction, rc.seed)?;
    let vocab = Vocab::load(&args.vocab)?;
    let names = load_names(args.name_map.as_ref(), &dataset.domain_name, None)?;

    let model_cfg = ModelConfig {
        layers: rc.layers,
        heads: rc.heads,
        hidden_dim: rc.hidden_dim,
        context_window: rc.context_window,
        vocab_size: vocab.size(),
        seed: rc.seed,
    };
    let model = init_model(&model_cfg)?;

    let mut tc = TrainConfig::new(rc.seed);
    tc.learning_rate = rc.learning_rate;
    tc.batch_size = rc.batch_size;
    tc.weight_decay = rc.weight_decay;
    tc.clip_norm = rc.clip_norm;
    tc.negative_ratio = rc.negative_ratio;
    tc.fraction_denom = args.fraction;
    tc.epochs = args.epochs.or(rc.epochs);
    tc.copy = rc.copy_mode();
    tc.template = rc.template_mode();

    eprintln!(
        "training on {} examples ({} pairs per epoch) ...",
        dataset.len(),
        dataset.len() * dataset.slot_keys.len()
    );
    let (model, history) = train(model, &dataset, &vocab, &names, &tc)?;
    report_history(&history);

    save_checkpoint(
        &Checkpoint {
            model,
            vocab,
            names,
            copy_trained: tc.copy.enabled(),
            trivial_templates: tc.template == gensf_core::templating::TemplateMode::Trivial,
        },
        &args.out,
    )?;
    println!("wrote checkpoint {}", args.out.display());
    if let Some(history_path) = args.history {
        std::fs::write(&history_path, history.to_csv())
            .with_context(|| format!("writing {}", history_path.display()))?;
        println!("wrote history {}", history_path.display());
    }
    Ok(())
}

fn report_history(history: &TrainHistory) {
    if let Some(final_loss) = history.final_loss() {
        eprintln!(
            "trained {} epochs, final mean loss {final_loss:.4}",
            history.epoch_losses.len()
        );
    }
}

fn eval_cmd(file: &FileConfig, seed: Option<u64>, args: EvalArgs) -> Result<()> {
    let rc = resolve(
        file,
        Overrides {
            seed,
            copy: args.copy,
            constrained: args.constrained,
            recover: args.recover,
            recover_threshold: args.recover_threshold,
            max_len: args.max_len,
            template: args.template,
            ..Default::default()
        },
    )?;
    let dataset = load_dataset(&args.data)?;

    let (model, vocab, names, default_copy, default_template) = match args.preset.as_str() {
        "zeroshot" => {
            let vocab_path = args
                .vocab
                .as_ref()
                .context("--vocab is required for --preset zeroshot")?;
            let vocab = Vocab::load(vocab_path)?;
            let model_cfg = ModelConfig {
                layers: rc.layers,
                heads: rc.heads,
                hidden_dim: rc.hidden_dim,
                context_window: rc.context_window,
                vocab_size: vocab.size(),
                seed: rc.seed,
            };
            let model = init_model(&model_cfg)?;
            let names = load_names(args.name_map.as_ref(), &dataset.domain_name, None)?;
            (model, vocab, names, CopyMode::Off, rc.template_mode())
        }
        "full" | "fewshot" => {
            let ckpt_path = args.checkpoint.as_ref().with_context(|| {
                format!(
                    "checkpoint not found: --checkpoint is required for --preset {}",
                    args.preset
                )
            })?;
            if !ckpt_path.exists() {
                bail!("checkpoint not found: {}", ckpt_path.display());
            }
            let ckpt = load_checkpoint(ckpt_path)?;
            let default_copy = if ckpt.copy_trained {
                CopyMode::Utterance
            } else {
                CopyMode::Off
            };
            let default_template = if ckpt.trivial_templates {
                gensf_core::templating::TemplateMode::Trivial
            } else {
                gensf_core::templating::TemplateMode::Natural
            };
            let names =
                load_names(args.name_map.as_ref(), &dataset.domain_name, Some(&ckpt.names))?;
            (ckpt.model, ckpt.vocab, names, default_copy, default_template)
        }
        other => bail!("unknown preset '{other}' (expected full, fewshot or zeroshot)"),
    };

    let mut pc = PipelineConfig::standard(names);
    pc.copy = if args.preset == "zeroshot" {
        CopyMode::Off // the zero-shot preset never uses the copy head
    } else if args.copy.is_some() {
        rc.copy_mode()
    } else {
        default_copy
    };
    pc.constrained = rc.constrained;
    pc.recover = rc.recover;
    pc.max_len = rc.max_len;
    pc.template = if args.template.is_some() {
        rc.template_mode()
    } else {
        default_template
    };
    pc.recovery = RecoveryConfig {
        threshold_ratio: rc.recover_threshold,
        max_span_tokens: rc.max_span_tokens,
    };

    let report = evaluate(&model, &vocab, &dataset, &pc)?;
    print!("{report}");
    if let Some(csv_path) = args.report_csv {
        std::fs::write(&csv_path, report.to_csv())
            .with_context(|| format!("writing {}", csv_path.display()))?;
        eprintln!("wrote report {}", csv_path.display());
    }
    Ok(())
}

fn predict_cmd(file: &FileConfig, seed: Option<u64>, args: PredictArgs) -> Result<()> {
    let rc = resolve(
        file,
        Overrides {
            seed,
            copy: args.copy,
            constrained: args.constrained,
            recover: args.recover,
            recover_threshold: args.recover_threshold,
            max_len: args.max_len,
            ..Default::default()
        },
    )?;
    if !args.checkpoint.exists() {
        bail!("checkpoint not found: {}", args.checkpoint.display());
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let requested: Vec<String> = args
        .requested
        .as_deref()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
        .unwrap_or_default();
    let ex = gensf_core::corpus::SlotExample::new(
        args.utterance.clone(),
        requested,
        Default::default(),
    );

    let mut pc = PipelineConfig::standard(ckpt.names.clone());
    pc.copy = if args.copy.is_some() {
        rc.copy_mode()
    } else if ckpt.copy_trained {
        CopyMode::Utterance
    } else {
        CopyMode::Off
    };
    pc.constrained = rc.constrained;
    pc.recover = rc.recover;
    pc.max_len = rc.max_len;
    pc.template = if ckpt.trivial_templates {
        gensf_core::templating::TemplateMode::Trivial
    } else {
        gensf_core::templating::TemplateMode::Natural
    };
    pc.recovery = RecoveryConfig {
        threshold_ratio: rc.recover_threshold,
        max_span_tokens: rc.max_span_tokens,
    };

    let ctx =
        gensf_core::templating::render_context_mode(&ex, &args.slot, &pc.names, pc.template)?;
    let slots = [args.slot.clone()];
    let preds = gensf_core::eval::predict_slots(&ckpt.model, &ckpt.vocab, &ex, &slots, &pc)?;
    println!("context: {}", ctx.text);
    match preds.get(&args.slot).and_then(|v| v.as_ref()) {
        Some(value) => println!("prediction: {value}"),
        None => println!("prediction: NULL"),
    }
    Ok(())
}

fn ablate_cmd(file: &FileConfig, seed: Option<u64>, args: AblateArgs) -> Result<()> {
    if args.grid != "default" {
        bail!("unknown grid '{}' (only 'default' exists)", args.grid);
    }
    let rc = resolve(
        file,
        Overrides {
            seed,
            ..Default::default()
        },
    )?;
    let train_d = load_dataset(&args.train_data)?;
    let test_d = load_dataset(&args.test_data)?;
    let vocab = Vocab::load(&args.vocab)?;
    let names = load_names(args.name_map.as_ref(), &train_d.domain_name, None)?;

    let model_cfg = ModelConfig {
        layers: rc.layers,
        heads: rc.heads,
        hidden_dim: rc.hidden_dim,
        context_window: rc.context_window,
        vocab_size: vocab.size(),
        seed: rc.seed,
    };
    let mut tc = TrainConfig::new(rc.seed);
    tc.learning_rate = rc.learning_rate;
    tc.batch_size = rc.batch_size;
    tc.weight_decay = rc.weight_decay;
    tc.clip_norm = rc.clip_norm;
    tc.epochs = args.epochs.or(rc.epochs);

    let outcome = run_ablation(&AblationInputs {
        train: &train_d,
        test: &test_d,
        vocab: &vocab,
        names: &names,
        model_cfg,
        train_cfg: tc,
        fewshot_denom: args.fewshot_denom,
    })?;
    print!("{outcome}");
    if let Some(out) = args.out {
        std::fs::write(&out, outcome.to_csv())
            .with_context(|| format!("writing {}", out.display()))?;
        eprintln!("wrote grid {}", out.display());
    }
    Ok(())
}
