//! The work behind each subcommand. Every command returns a [`CliError`]
//! whose variant fixes the process exit code: bad settings exit 1, failures
//! while doing the work exit 2, and a training run that hit a non-finite
//! loss exits 3.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ape_core::checkpoint;
use ape_core::data::{encode_corpus, filter_by_length, read_triplets, Triplet};
use ape_core::decoding::{translate_corpus, BeamConfig, Translation};
use ape_core::fixture;
use ape_core::metrics::score_corpus;
use ape_core::model::SharingPreset;
use ape_core::tokenizer::Vocab;
use ape_core::training::{train, TrainError, TrainEvent};
use ape_core::Model32;

use crate::config::{FileConfig, TrainSection};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, settings file, or model choice.
    Config(String),
    /// IO, data, or numeric trouble while doing the work.
    Runtime(String),
    /// Training stopped on a non-finite loss without applying an update.
    NonFiniteLoss { step: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::NonFiniteLoss { .. } => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => f.write_str(msg),
            CliError::NonFiniteLoss { step } => {
                write!(f, "loss went non-finite at step {step}; nothing was updated")
            }
        }
    }
}

impl std::error::Error for CliError {}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_err(what: &str, path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(msg) => CliError::Config(msg),
        other => CliError::Runtime(other.to_string()),
    }
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::read(p).map_err(CliError::Config),
        None => Ok(FileConfig::default()),
    }
}

/// A path that may come from a flag or from the settings file's `[data]`
/// table, but must come from somewhere.
fn required_path(
    flag: Option<&PathBuf>,
    file: Option<&PathBuf>,
    flag_name: &str,
    file_key: &str,
) -> Result<PathBuf, CliError> {
    flag.or(file).cloned().ok_or_else(|| {
        CliError::Config(format!(
            "no {flag_name} file given: pass --{flag_name} or set {file_key} under [data]"
        ))
    })
}

fn load_vocab(path: &Path) -> Result<Vocab, CliError> {
    Vocab::load(path).map_err(runtime)
}

fn load_triplets(path: &Path) -> Result<Vec<Triplet>, CliError> {
    read_triplets(path).map_err(runtime)
}

fn load_checkpoint(path: &Path) -> Result<(Model32, usize), CliError> {
    checkpoint::load::<f32>(path).map_err(|e| io_err("cannot load", path, e))
}

fn check_vocab(model: &Model32, vocab: &Vocab, path: &Path) -> Result<(), CliError> {
    if model.cfg().vocab_size != vocab.len() {
        return Err(CliError::Runtime(format!(
            "model expects a vocabulary of {} entries but {} has {}",
            model.cfg().vocab_size,
            path.display(),
            vocab.len()
        )));
    }
    Ok(())
}

/// Training triplets filtered down to what fits the model's length budget.
fn load_training_set(path: &Path, vocab: &Vocab) -> Result<Vec<Triplet>, CliError> {
    let raw = load_triplets(path)?;
    let total = raw.len();
    let kept = filter_by_length(raw, vocab);
    if kept.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: no triplet fits the length budget",
            path.display()
        )));
    }
    if kept.len() < total {
        eprintln!("dropped {} of {total} triplets for length", total - kept.len());
    }
    Ok(kept)
}

fn load_dev_set(flag: Option<&PathBuf>, file: Option<&PathBuf>) -> Result<Vec<Triplet>, CliError> {
    match flag.or(file) {
        Some(p) => load_triplets(p),
        None => Ok(Vec::new()),
    }
}

fn param_count(model: &Model32) -> usize {
    let store = model.store();
    (0..store.num_slots()).map(|i| store.slot(i).data().len()).sum()
}

/// Per-line decode problems go to stderr; the texts are returned in order.
fn report_items(outs: &[Translation]) -> (Vec<String>, usize) {
    let mut failures = 0;
    let mut texts = Vec::with_capacity(outs.len());
    for (i, t) in outs.iter().enumerate() {
        if let Some(err) = &t.error {
            failures += 1;
            eprintln!("line {}: {err}", i + 1);
        }
        for w in &t.warnings {
            eprintln!("line {}: {w}", i + 1);
        }
        texts.push(t.text.clone());
    }
    (texts, failures)
}

/// Training settings that may be given as flags; each one set overrides the
/// settings file.
#[derive(clap::Args, Debug)]
pub struct TrainOverrides {
    /// Seed for batch shuffling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed for weight initialization.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Total optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Token budget per batch.
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    /// Peak learning rate of the triangular schedule.
    #[arg(long)]
    pub peak_lr: Option<f64>,
    /// Steps spent climbing to the peak learning rate.
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Steps between development-set evaluations.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Stop as soon as the development TER falls to this value.
    #[arg(long)]
    pub stop_at_ter: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut TrainSection) {
        if let Some(v) = self.seed {
            t.config.seed = v;
        }
        if let Some(v) = self.init_seed {
            t.init_seed = v;
        }
        if let Some(v) = self.max_steps {
            t.config.max_steps = v;
        }
        if let Some(v) = self.batch_tokens {
            t.config.batch_tokens = v;
        }
        if let Some(v) = self.peak_lr {
            t.config.peak_lr = v;
        }
        if let Some(v) = self.warmup_steps {
            t.config.warmup_steps = v;
        }
        if let Some(v) = self.eval_interval {
            t.config.eval_interval = v;
        }
        if let Some(v) = self.stop_at_ter {
            t.config.stop_at_ter = Some(v);
        }
    }
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    /// TOML settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training triplets, one `source<TAB>translation<TAB>correction` per line.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Development triplets for periodic scoring.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Directory receiving last.ckpt and best.ckpt.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Decoder sharing preset: transformer, decoder-init, context-init,
    /// tied-self, tied-context, or tied-ff.
    #[arg(long)]
    pub preset: Option<String>,
    /// Start from this checkpoint's weights instead of a fresh model.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

pub fn train_cmd(args: &TrainArgs) -> Result<(), CliError> {
    let mut file = load_file_config(&args.config)?;
    if let Some(p) = &args.preset {
        file.preset = Some(p.clone());
    }
    args.overrides.apply(&mut file.train);
    file.train.config.validate().map_err(CliError::Config)?;

    let vocab_path = required_path(args.vocab.as_ref(), file.data.vocab.as_ref(), "vocab", "vocab")?;
    let train_path = required_path(args.train.as_ref(), file.data.train.as_ref(), "train", "train")?;
    let vocab = load_vocab(&vocab_path)?;

    let mut model = match &args.init_from {
        Some(ckpt) => {
            let (m, step) = load_checkpoint(ckpt)?;
            eprintln!("starting from weights saved at step {step}");
            m
        }
        None => {
            let mcfg = file.model.resolve(vocab.len()).map_err(CliError::Config)?;
            let sharing = file.preset().map_err(CliError::Config)?.config();
            Model32::build(mcfg, sharing, file.train.init_seed)
                .map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    check_vocab(&model, &vocab, &vocab_path)?;

    let kept = load_training_set(&train_path, &vocab)?;
    let dev = load_dev_set(args.dev.as_ref(), file.data.dev.as_ref())?;
    let examples = encode_corpus(&kept, &vocab, model.cfg().max_positions).map_err(runtime)?;

    fs::create_dir_all(&args.out).map_err(|e| io_err("cannot create", &args.out, e))?;
    let last_path = args.out.join("last.ckpt");
    let best_path = args.out.join("best.ckpt");
    eprintln!(
        "training {} parameters on {} triplets ({} held out for scoring)",
        param_count(&model),
        kept.len(),
        dev.len()
    );

    let mut steps_done = 0;
    let report = train(
        &mut model,
        &examples,
        &dev,
        &vocab,
        &file.train.config,
        &mut |event| {
            match event {
                TrainEvent::Step(log) => {
                    steps_done = log.step;
                    eprintln!("step {}\tloss {:.4}\tlr {:.3e}", log.step, log.loss, log.lr);
                }
                TrainEvent::Eval { log, model, is_best } => {
                    checkpoint::save(model, log.step, &last_path)?;
                    if is_best {
                        checkpoint::save(model, log.step, &best_path)?;
                    }
                    eprintln!(
                        "eval step {}\tter {:.2}\tbleu {:.2}{}",
                        log.step,
                        log.dev_ter,
                        log.dev_bleu,
                        if is_best { "\t(best)" } else { "" }
                    );
                }
                TrainEvent::Finished { model } => {
                    checkpoint::save(model, steps_done, &last_path)?;
                }
                TrainEvent::NanAbort { step } => {
                    eprintln!("loss went non-finite at step {step}; stopping");
                }
            }
            Ok(())
        },
    )
    .map_err(train_error)?;

    if let Some(step) = report.nan_step {
        return Err(CliError::NonFiniteLoss { step });
    }
    println!("steps\t{}", report.steps);
    if let Some(loss) = report.final_loss {
        println!("final_loss\t{loss:.4}");
    }
    if let Some(best) = &report.best {
        println!("best_step\t{}", best.step);
        println!("dev_ter\t{:.2}", best.dev_ter);
        println!("dev_bleu\t{:.2}", best.dev_bleu);
    }
    println!("checkpoint\t{}", last_path.display());
    Ok(())
}

/// Decode settings: the file's `[decode]` table with flags on top.
fn merge_beam(file: &FileConfig, beam: Option<usize>, max_len: Option<usize>) -> Result<BeamConfig, CliError> {
    let mut cfg = file.decode.clone();
    if let Some(b) = beam {
        cfg.beam = b;
    }
    if let Some(m) = max_len {
        cfg.max_len = m;
    }
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(CliError::Config(
            "beam width and maximum length must be positive".into(),
        ));
    }
    Ok(cfg)
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint produced by train or import-weights.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Triplets whose corrections serve as references.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Beam width.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Longest correction the decoder may emit.
    #[arg(long)]
    pub max_len: Option<usize>,
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config)?;
    let beam_cfg = merge_beam(&file, args.beam, args.max_len)?;
    let vocab_path = required_path(args.vocab.as_ref(), file.data.vocab.as_ref(), "vocab", "vocab")?;
    let data_path = required_path(args.data.as_ref(), file.data.dev.as_ref(), "data", "dev")?;
    let vocab = load_vocab(&vocab_path)?;
    let (model, step) = load_checkpoint(&args.checkpoint)?;
    check_vocab(&model, &vocab, &vocab_path)?;

    let triplets = load_triplets(&data_path)?;
    if triplets.is_empty() {
        return Err(CliError::Runtime(format!("{}: no triplets", data_path.display())));
    }
    let items: Vec<(String, String)> = triplets.iter().map(|t| (t.src.clone(), t.mt.clone())).collect();
    eprintln!("scoring {} triplets with weights from step {step}", items.len());
    let outs = translate_corpus(&model, &vocab, &items, &beam_cfg);
    let (hyps, failures) = report_items(&outs);
    if failures > 0 {
        eprintln!("{failures} of {} items failed and score as empty", outs.len());
    }
    let refs: Vec<String> = triplets.iter().map(|t| t.pe.clone()).collect();
    let scores = score_corpus(&hyps, &refs);
    println!("ter\tbleu");
    println!("{}", scores.report());
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct TranslateArgs {
    /// Checkpoint produced by train or import-weights.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Lines of `source<TAB>translation`; a third column is ignored.
    #[arg(long)]
    pub input: PathBuf,
    /// Write corrections here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// TOML settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Beam width.
    #[arg(long)]
    pub beam: Option<usize>,
    /// Longest correction the decoder may emit.
    #[arg(long)]
    pub max_len: Option<usize>,
}

pub fn translate_cmd(args: &TranslateArgs) -> Result<(), CliError> {
    let file = load_file_config(&args.config)?;
    let beam_cfg = merge_beam(&file, args.beam, args.max_len)?;
    let vocab_path = required_path(args.vocab.as_ref(), file.data.vocab.as_ref(), "vocab", "vocab")?;
    let vocab = load_vocab(&vocab_path)?;
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    check_vocab(&model, &vocab, &vocab_path)?;

    let text = fs::read_to_string(&args.input).map_err(|e| io_err("cannot read", &args.input, e))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut cols = line.split('\t');
        let (Some(src), Some(mt)) = (cols.next(), cols.next()) else {
            return Err(CliError::Runtime(format!(
                "{}:{}: expected at least two tab-separated columns",
                args.input.display(),
                i + 1
            )));
        };
        items.push((src.to_string(), mt.to_string()));
    }
    if items.is_empty() {
        return Err(CliError::Runtime(format!("{}: no input lines", args.input.display())));
    }

    let outs = translate_corpus(&model, &vocab, &items, &beam_cfg);
    let (texts, failures) = report_items(&outs);
    let mut out_text = String::new();
    for t in &texts {
        out_text.push_str(t);
        out_text.push('\n');
    }
    match &args.output {
        Some(p) => fs::write(p, &out_text).map_err(|e| io_err("cannot write", p, e))?,
        None => print!("{out_text}"),
    }
    if failures > 0 {
        eprintln!("{failures} of {} lines failed and were left empty", outs.len());
    }
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct AblateArgs {
    /// TOML settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training triplets, one `source<TAB>translation<TAB>correction` per line.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Development triplets for periodic scoring.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Also write the table here as tab-separated values.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// Trains every sharing preset under identical settings and tabulates the
/// results, least shared first. A preset that fails keeps its row and the
/// run moves on.
pub fn ablate_cmd(args: &AblateArgs) -> Result<(), CliError> {
    let mut file = load_file_config(&args.config)?;
    args.overrides.apply(&mut file.train);
    file.train.config.validate().map_err(CliError::Config)?;

    let vocab_path = required_path(args.vocab.as_ref(), file.data.vocab.as_ref(), "vocab", "vocab")?;
    let train_path = required_path(args.train.as_ref(), file.data.train.as_ref(), "train", "train")?;
    let vocab = load_vocab(&vocab_path)?;
    let mcfg = file.model.resolve(vocab.len()).map_err(CliError::Config)?;
    let kept = load_training_set(&train_path, &vocab)?;
    let dev = load_dev_set(args.dev.as_ref(), file.data.dev.as_ref())?;
    let examples = encode_corpus(&kept, &vocab, mcfg.max_positions).map_err(runtime)?;

    let mut rows = vec!["variant\tparams\tfirst_loss\tfinal_loss\tdev_ter\tdev_bleu".to_string()];
    for preset in SharingPreset::ALL {
        eprintln!("training {}", preset.name());
        match ablate_one(preset, &mcfg, &examples, &dev, &vocab, &file.train) {
            Ok(row) => rows.push(row),
            Err(e) => {
                let msg = e.to_string().replace(['\t', '\n'], " ");
                eprintln!("{} failed: {msg}", preset.name());
                rows.push(format!("{}\tFAILED: {msg}\t-\t-\t-\t-", preset.name()));
            }
        }
    }
    let table = rows.join("\n") + "\n";
    print!("{table}");
    if let Some(p) = &args.out {
        fs::write(p, &table).map_err(|e| io_err("cannot write", p, e))?;
    }
    Ok(())
}

fn ablate_one(
    preset: SharingPreset,
    mcfg: &ape_core::model::ModelConfig,
    examples: &[ape_core::data::EncodedExample],
    dev: &[Triplet],
    vocab: &Vocab,
    ts: &TrainSection,
) -> Result<String, CliError> {
    let mut model = Model32::build(mcfg.clone(), preset.config(), ts.init_seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let params = param_count(&model);
    let mut first = None;
    let report = train(&mut model, examples, dev, vocab, &ts.config, &mut |e| {
        if let TrainEvent::Step(log) = e {
            if first.is_none() {
                first = Some(log.loss);
            }
            if log.step % 50 == 0 {
                eprintln!("  step {}\tloss {:.4}", log.step, log.loss);
            }
        }
        Ok(())
    })
    .map_err(train_error)?;
    if let Some(step) = report.nan_step {
        return Err(CliError::NonFiniteLoss { step });
    }
    let fmt_loss = |l: Option<f64>| l.map_or("-".to_string(), |l| format!("{l:.4}"));
    let (ter, bleu) = match &report.best {
        Some(b) => (format!("{:.2}", b.dev_ter), format!("{:.2}", b.dev_bleu)),
        None => ("-".into(), "-".into()),
    };
    Ok(format!(
        "{}\t{params}\t{}\t{}\t{ter}\t{bleu}",
        preset.name(),
        fmt_loss(first),
        fmt_loss(report.final_loss),
    ))
}

#[derive(clap::Args, Debug)]
pub struct ImportArgs {
    /// Binary dump of named f32 tensors.
    #[arg(long)]
    pub dump: PathBuf,
    /// Lines of `external name<TAB>canonical name`.
    #[arg(long)]
    pub map: PathBuf,
    /// Vocabulary file, one token per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// TOML settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Decoder sharing preset for the built model.
    #[arg(long)]
    pub preset: Option<String>,
    /// Seed for the weights the dump does not cover.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Where to write the resulting checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

/// Builds a model whose embeddings and encoder come from an external weight
/// dump and saves it as a step-zero checkpoint.
pub fn import_weights_cmd(args: &ImportArgs) -> Result<(), CliError> {
    let mut file = load_file_config(&args.config)?;
    if let Some(p) = &args.preset {
        file.preset = Some(p.clone());
    }
    let init_seed = args.init_seed.unwrap_or(file.train.init_seed);
    let vocab_path = required_path(args.vocab.as_ref(), file.data.vocab.as_ref(), "vocab", "vocab")?;
    let vocab = load_vocab(&vocab_path)?;
    let mcfg = file.model.resolve(vocab.len()).map_err(CliError::Config)?;
    let sharing = file.preset().map_err(CliError::Config)?.config();

    let pretrained = checkpoint::import_pretrained::<f32>(&args.dump, &args.map).map_err(runtime)?;
    let n = pretrained.len();
    let model = Model32::build_with_pretrained(mcfg, sharing, init_seed, Some(&pretrained))
        .map_err(runtime)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
        }
    }
    checkpoint::save(&model, 0, &args.out).map_err(runtime)?;
    println!("imported\t{n}");
    println!("params\t{}", param_count(&model));
    println!("checkpoint\t{}", args.out.display());
    Ok(())
}

#[derive(clap::Args, Debug)]
pub struct FixtureArgs {
    /// Directory that will receive train.tsv and vocab.txt.
    #[arg(long, default_value = "fixture")]
    pub out: PathBuf,
    /// Number of triplets to generate.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Writes a small synthetic copy-and-edit corpus for smoke tests.
pub fn make_fixture_cmd(args: &FixtureArgs) -> Result<(), CliError> {
    fs::create_dir_all(&args.out).map_err(|e| io_err("cannot create", &args.out, e))?;
    let corpus = fixture::copy_edit_corpus(args.count, args.seed);
    let mut tsv = String::new();
    for t in &corpus {
        tsv.push_str(&format!("{}\t{}\t{}\n", t.src, t.mt, t.pe));
    }
    let train = args.out.join("train.tsv");
    fs::write(&train, tsv).map_err(|e| io_err("cannot write", &train, e))?;
    let vocab_path = args.out.join("vocab.txt");
    let mut vocab_text = fixture::vocab_lines().join("\n");
    vocab_text.push('\n');
    fs::write(&vocab_path, vocab_text).map_err(|e| io_err("cannot write", &vocab_path, e))?;
    println!("train\t{}", train.display());
    println!("vocab\t{}", vocab_path.display());
    Ok(())
}
