//! Command implementations behind the binary: LM pretraining, training,
//! evaluation, extraction, report rendering, and synthetic corpus
//! generation.
//!
//! Every command resolves a full `RunConfig`, works under a run directory
//! named by timestamp and config hash, and writes a manifest whose lines
//! parse back as a config file, so any recorded run can be replayed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{resolve, ConfigError, RunConfig};
use crate::data::{
    build_vocab, encode_corpus, generate_synthetic, load_jsonl, save_jsonl, Corpus, DataError,
    EncodedInstance, Label, SynthSpec, Vocab,
};
use crate::lm::{pretrain_loss, ContinuousLm, LmBinding, LmConfig, LmError, UnigramTable};
use crate::metrics::{
    auprc, comprehensiveness_with, corpus_token_prf, iou_f1, normalize_spans, selection_percentage,
    spans_to_mask, sufficiency_with,
};
use crate::model::{InfoCalModel, ModelConfig, ModelError, TaskKind};
use crate::optim::{Adam, AdamConfig};
use crate::report::{render_ansi, render_html, ReportInstance};
use crate::tape::Tape;
use crate::train::{
    extract_rationale, predict_with_mask, validation_metric, Extraction, TrainError, Trainer,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "infocal",
    about = "Rationale extraction with adversarial information calibration"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the continuous language model on a corpus
    PretrainLm(ConfigArgs),
    /// Train the selector-predictor with adversarial calibration
    Train(ConfigArgs),
    /// Evaluate a trained checkpoint: rationale and faithfulness metrics
    Eval(ConfigArgs),
    /// Dump extracted rationales for a corpus split
    Extract(ConfigArgs),
    /// Render an extraction dump as highlighted ANSI and HTML
    Report(ConfigArgs),
    /// Generate a synthetic planted-rationale corpus
    GenCorpus(ConfigArgs),
}

/// Command-line overrides; flags mirror config keys in kebab-case and win
/// over the config file.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat key = value config file (a previous run's manifest also works)
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub corpus: Option<String>,
    #[arg(long)]
    pub out_dir: Option<String>,
    #[arg(long)]
    pub lm_checkpoint: Option<String>,
    #[arg(long)]
    pub model_checkpoint: Option<String>,
    #[arg(long)]
    pub task: Option<String>,

    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub vocab_min_freq: Option<u64>,

    #[arg(long)]
    pub lambda_ib: Option<f64>,
    #[arg(long)]
    pub lambda_g: Option<f64>,
    #[arg(long)]
    pub lambda_mi: Option<f64>,
    #[arg(long)]
    pub lambda_lm: Option<f64>,
    #[arg(long)]
    pub r_select: Option<f64>,
    #[arg(long)]
    pub tau_start: Option<f64>,
    #[arg(long)]
    pub tau_end: Option<f64>,
    #[arg(long)]
    pub lr_gen: Option<f64>,
    #[arg(long)]
    pub lr_disc: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub lm_embed_dim: Option<usize>,
    #[arg(long)]
    pub lm_hidden_dim: Option<usize>,
    #[arg(long)]
    pub lm_epochs: Option<usize>,
    #[arg(long)]
    pub lm_lr: Option<f64>,
    #[arg(long)]
    pub lm_negatives: Option<usize>,
    #[arg(long)]
    pub lm_smoothing: Option<f64>,
    #[arg(long)]
    pub lm_batch_size: Option<usize>,

    #[arg(long)]
    pub disable_adv: Option<bool>,
    #[arg(long)]
    pub disable_lm: Option<bool>,
    #[arg(long)]
    pub disable_ib: Option<bool>,

    #[arg(long)]
    pub eval_split: Option<String>,
    #[arg(long)]
    pub dump: Option<String>,
    #[arg(long)]
    pub synth_preset: Option<String>,
    #[arg(long)]
    pub synth_n: Option<usize>,
    #[arg(long)]
    pub synth_noise: Option<f64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        macro_rules! put {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    kv.push((stringify!($field).to_string(), v.to_string()));
                })*
            };
        }
        put!(
            corpus, out_dir, lm_checkpoint, model_checkpoint, task, embed_dim, hidden_dim,
            vocab_min_freq, lambda_ib, lambda_g, lambda_mi, lambda_lm, r_select, tau_start,
            tau_end, lr_gen, lr_disc, batch_size, epochs, seed, lm_embed_dim, lm_hidden_dim,
            lm_epochs, lm_lr, lm_negatives, lm_smoothing, lm_batch_size, disable_adv, disable_lm,
            disable_ib, eval_split, dump, synth_preset, synth_n, synth_noise,
        );
        kv
    }

    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        resolve(self.config.as_deref(), &self.overrides())
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::PretrainLm(a) => cmd_pretrain_lm(&a.resolve()?),
        Command::Train(a) => cmd_train(&a.resolve()?),
        Command::Eval(a) => cmd_eval(&a.resolve()?),
        Command::Extract(a) => cmd_extract(&a.resolve()?),
        Command::Report(a) => cmd_report(&a.resolve()?),
        Command::GenCorpus(a) => cmd_gen_corpus(&a.resolve()?),
    }
}

// ── shared plumbing ─────────────────────────────────────────────────────────

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    Ok(())
}

/// `<out_dir>/<unix-seconds>-<confighash>`; reruns land in fresh
/// directories unless they start within the same second with the same
/// config, in which case the artifacts are rewritten with identical bytes.
fn make_run_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock before 1970")
        .as_secs();
    let dir = Path::new(&cfg.out_dir).join(format!("{ts}-{:016x}", cfg.hash()));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

fn write_manifest(
    dir: &Path,
    cfg: &RunConfig,
    extras: &[(String, String)],
) -> CliResult<()> {
    let mut text = cfg.to_kv_lines();
    let mut extras: Vec<&(String, String)> = extras.iter().collect();
    extras.sort();
    for (k, v) in extras {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_text(&dir.join("manifest.txt"), &text)
}

struct LoadedCorpus {
    corpus: Corpus,
    vocab: Vocab,
    corpus_hash: u64,
    vocab_hash: u64,
}

fn load_corpus(cfg: &RunConfig) -> CliResult<LoadedCorpus> {
    if cfg.corpus.is_empty() {
        return Err(CliError::Invalid(
            "no corpus given; pass --corpus or set corpus in the config".into(),
        ));
    }
    let (corpus, report) = load_jsonl(&cfg.corpus)?;
    for (lineno, reason) in &report.rejected {
        eprintln!("{}: line {lineno} rejected: {reason}", cfg.corpus);
    }
    if report.truncated > 0 {
        eprintln!(
            "{}: {} instance(s) truncated to the maximum length",
            cfg.corpus, report.truncated
        );
    }
    let vocab = build_vocab(&corpus, cfg.vocab_min_freq)?;
    let corpus_hash = corpus.hash();
    let vocab_hash = vocab.hash();
    Ok(LoadedCorpus {
        corpus,
        vocab,
        corpus_hash,
        vocab_hash,
    })
}

fn pick_split(corpus: &Corpus, cfg: &RunConfig) -> CliResult<Corpus> {
    let (train, dev, test) = corpus.split(cfg.seed);
    let picked = match cfg.eval_split.as_str() {
        "train" => train,
        "dev" => dev,
        "test" => test,
        "all" => corpus.clone(),
        other => {
            return Err(CliError::Invalid(format!(
                "eval_split must be train, dev, test, or all; got {other:?}"
            )))
        }
    };
    if picked.is_empty() {
        return Err(CliError::Invalid(format!(
            "split {:?} of {} is empty",
            cfg.eval_split, cfg.corpus
        )));
    }
    Ok(picked)
}

fn label_string(label: &Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Score(s) => format!("{s}"),
    }
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

// ── checkpoint layout ───────────────────────────────────────────────────────

fn lm_to_checkpoint(lm: &ContinuousLm<f32>, vocab_hash: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.push_u64("meta.vocab_hash", vocab_hash);
    ckpt.push_usize("meta.vocab_size", lm.cfg.vocab_size);
    ckpt.push_usize("meta.embed_dim", lm.cfg.embed_dim);
    ckpt.push_usize("meta.hidden_dim", lm.cfg.hidden_dim);
    ckpt.push_params(&lm.params);
    ckpt
}

fn lm_from_checkpoint(path: &str, vocab_hash: u64) -> CliResult<ContinuousLm<f32>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.verify_vocab(vocab_hash)?;
    let meta = |name: &str| {
        ckpt.get_usize(name)
            .ok_or_else(|| CheckpointError::Missing(name.into()))
    };
    let cfg = LmConfig {
        vocab_size: meta("meta.vocab_size")?,
        embed_dim: meta("meta.embed_dim")?,
        hidden_dim: meta("meta.hidden_dim")?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut lm: ContinuousLm<f32> = ContinuousLm::new(cfg, &mut rng);
    for (_, name, _) in lm.params.iter() {
        if ckpt.get(name).is_none() {
            return Err(CliError::Checkpoint(CheckpointError::Missing(name.into())));
        }
    }
    ckpt.restore_params(&mut lm.params, "lm.")?;
    Ok(lm)
}

fn model_to_checkpoint(model: &InfoCalModel<f32>, vocab_hash: u64) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.push_u64("meta.vocab_hash", vocab_hash);
    ckpt.push_usize("meta.vocab_size", model.cfg.vocab_size);
    ckpt.push_usize("meta.embed_dim", model.cfg.embed_dim);
    ckpt.push_usize("meta.hidden_dim", model.cfg.hidden_dim);
    ckpt.push_usize("meta.n_classes", model.cfg.n_classes);
    ckpt.push_usize(
        "meta.task",
        match model.cfg.task {
            TaskKind::Classification => 0,
            TaskKind::Regression => 1,
        },
    );
    ckpt.push_params(&model.gen);
    ckpt.push_params(&model.disc);
    ckpt
}

fn model_from_checkpoint(path: &str, vocab_hash: u64) -> CliResult<InfoCalModel<f32>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.verify_vocab(vocab_hash)?;
    let meta = |name: &str| {
        ckpt.get_usize(name)
            .ok_or_else(|| CheckpointError::Missing(name.into()))
    };
    let cfg = ModelConfig {
        vocab_size: meta("meta.vocab_size")?,
        embed_dim: meta("meta.embed_dim")?,
        hidden_dim: meta("meta.hidden_dim")?,
        n_classes: meta("meta.n_classes")?,
        task: match meta("meta.task")? {
            0 => TaskKind::Classification,
            1 => TaskKind::Regression,
            other => {
                return Err(CliError::Invalid(format!(
                    "checkpoint has unknown task tag {other}"
                )))
            }
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model: InfoCalModel<f32> = InfoCalModel::new(cfg, &mut rng)?;
    for (_, name, _) in model.gen.iter().chain(model.disc.iter()) {
        if ckpt.get(name).is_none() {
            return Err(CliError::Checkpoint(CheckpointError::Missing(name.into())));
        }
    }
    for prefix in ["selector.", "predictor.", "guider."] {
        ckpt.restore_params(&mut model.gen, prefix)?;
    }
    ckpt.restore_params(&mut model.disc, "discriminator.")?;
    Ok(model)
}

// ── commands ────────────────────────────────────────────────────────────────

pub fn cmd_pretrain_lm(cfg: &RunConfig) -> CliResult<()> {
    let loaded = load_corpus(cfg)?;
    let dir = make_run_dir(cfg)?;
    let (train_c, dev_c, _) = loaded.corpus.split(cfg.seed);
    let train_ids: Vec<Vec<usize>> = train_c
        .instances
        .iter()
        .map(|i| loaded.vocab.encode(&i.tokens))
        .collect();
    let dev_ids: Vec<Vec<usize>> = dev_c
        .instances
        .iter()
        .map(|i| loaded.vocab.encode(&i.tokens))
        .collect();
    let held_out = if dev_ids.is_empty() { &train_ids } else { &dev_ids };
    if train_ids.is_empty() {
        return Err(CliError::Invalid("training split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lm: ContinuousLm<f32> = ContinuousLm::new(cfg.lm_config(loaded.vocab.len()), &mut rng);
    let sampler = UnigramTable::new(loaded.vocab.counts(), cfg.lm_smoothing);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lm_lr), &lm.params);

    let mut csv = String::from("epoch,mean_loss,held_out_quasi_perplexity\n");
    let baseline = lm.quasi_perplexity(held_out)?;
    println!("epoch 0 (untrained): held-out quasi-perplexity {baseline}");
    csv.push_str(&format!("0,,{baseline}\n"));

    let mut final_ppl = baseline;
    for epoch in 1..=cfg.lm_epochs {
        let mut order: Vec<usize> = (0..train_ids.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.lm_batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| train_ids[i].as_slice()).collect();
            let mut tape: Tape<f32> = Tape::new();
            let bind = LmBinding::bind(&mut tape, &lm)?;
            let loss = pretrain_loss(&mut tape, &bind, &batch, &sampler, cfg.lm_negatives, &mut rng)?;
            total += tape.value(loss).item() as f64;
            batches += 1;
            tape.backward(loss)?;
            opt.step(&mut lm.params, &tape.param_grads());
        }
        let mean = total / batches as f64;
        final_ppl = lm.quasi_perplexity(held_out)?;
        println!("epoch {epoch}: mean loss {mean}, held-out quasi-perplexity {final_ppl}");
        csv.push_str(&format!("{epoch},{mean},{final_ppl}\n"));
    }

    let ckpt_path = if cfg.lm_checkpoint.is_empty() {
        dir.join("lm.ckpt")
    } else {
        PathBuf::from(&cfg.lm_checkpoint)
    };
    ensure_parent(&ckpt_path)?;
    lm_to_checkpoint(&lm, loaded.vocab_hash).save(&ckpt_path)?;
    write_text(&dir.join("lm_epochs.csv"), &csv)?;
    write_manifest(
        &dir,
        cfg,
        &[
            ("hash.corpus".into(), hex(loaded.corpus_hash)),
            ("hash.vocab".into(), hex(loaded.vocab_hash)),
            ("result.baseline_quasi_perplexity".into(), baseline.to_string()),
            ("result.final_quasi_perplexity".into(), final_ppl.to_string()),
            (
                "result.lm_checkpoint".into(),
                ckpt_path.display().to_string(),
            ),
        ],
    )?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let loaded = load_corpus(cfg)?;
    let dir = make_run_dir(cfg)?;
    let n_classes = match cfg.task {
        TaskKind::Classification => {
            let n = loaded.corpus.num_classes();
            if n < 2 {
                return Err(CliError::Invalid(format!(
                    "classification needs at least 2 classes, corpus has {n}"
                )));
            }
            n
        }
        TaskKind::Regression => 2,
    };
    let (train_c, dev_c, _) = loaded.corpus.split(cfg.seed);
    if dev_c.is_empty() {
        return Err(CliError::Invalid(
            "corpus too small to carve out a validation split".into(),
        ));
    }
    let train_enc = encode_corpus(&train_c, &loaded.vocab);
    let dev_enc = encode_corpus(&dev_c, &loaded.vocab);

    let needs_lm = cfg.lambda_lm > 0.0 && !cfg.disable_lm;
    let lm = if needs_lm {
        if cfg.lm_checkpoint.is_empty() {
            return Err(CliError::Invalid(
                "lambda_lm > 0 needs lm_checkpoint (run pretrain-lm first) or disable_lm = true"
                    .into(),
            ));
        }
        Some(lm_from_checkpoint(&cfg.lm_checkpoint, loaded.vocab_hash)?)
    } else {
        None
    };

    let mut trainer = Trainer::new(
        cfg.model_config(loaded.vocab.len(), n_classes),
        cfg.hyperparams(),
        cfg.flags(),
        lm.as_ref(),
        &train_enc,
    )?;

    let mut csv = String::from("epoch,L_sp,L_ib,L_guide,L_mi,L_g,L_d,L_lm,J_total,val_metric\n");
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut skipped_total = 0usize;
    let mut last_val = f64::NAN;
    for epoch in 0..cfg.epochs {
        let stats = trainer.train_epoch(&train_enc, epoch)?;
        let val = validation_metric(&trainer.model, &dev_enc)?;
        skipped_total += stats.skipped_batches;
        last_val = val;
        let m = stats.mean;
        println!(
            "epoch {epoch}: J_total {}, L_sp {}, val {}{}",
            m.j_total,
            m.l_sp,
            val,
            if stats.skipped_batches > 0 {
                format!(" ({} batch(es) skipped)", stats.skipped_batches)
            } else {
                String::new()
            }
        );
        csv.push_str(&format!(
            "{epoch},{},{},{},{},{},{},{},{},{val}\n",
            m.l_sp, m.l_ib, m.l_guide, m.l_mi, m.l_g, m.l_d, m.l_lm, m.j_total
        ));
        if best.as_ref().map_or(true, |(bv, _, _)| val > *bv) {
            best = Some((
                val,
                epoch,
                model_to_checkpoint(&trainer.model, loaded.vocab_hash),
            ));
        }
    }
    let final_ckpt = model_to_checkpoint(&trainer.model, loaded.vocab_hash);
    final_ckpt.save(dir.join("final.ckpt"))?;
    let (best_val, best_epoch, best_ckpt) = best.expect("at least one epoch");
    let best_path = dir.join("model.ckpt");
    best_ckpt.save(&best_path)?;
    if !cfg.model_checkpoint.is_empty() {
        let p = PathBuf::from(&cfg.model_checkpoint);
        ensure_parent(&p)?;
        best_ckpt.save(&p)?;
    }
    write_text(&dir.join("epochs.csv"), &csv)?;

    // Dev-set rationale quality of the best checkpoint, when gold exists.
    for prefix in ["selector.", "predictor.", "guider."] {
        best_ckpt.restore_params(&mut trainer.model.gen, prefix)?;
    }
    best_ckpt.restore_params(&mut trainer.model.disc, "discriminator.")?;
    let mut masks = Vec::new();
    let mut pairs: Vec<(Vec<crate::data::Span>, Vec<crate::data::Span>)> = Vec::new();
    for inst in &dev_enc {
        let ex = extract_rationale(&trainer.model, &inst.ids)?;
        if let Some(gold) = &inst.gold {
            pairs.push((ex.spans(), normalize_spans(gold)));
        }
        masks.push(ex.mask);
    }
    let selection = selection_percentage(&masks);

    let mut extras = vec![
        ("hash.corpus".into(), hex(loaded.corpus_hash)),
        ("hash.vocab".into(), hex(loaded.vocab_hash)),
        ("result.best_epoch".into(), best_epoch.to_string()),
        ("result.best_val_metric".into(), best_val.to_string()),
        ("result.final_val_metric".into(), last_val.to_string()),
        ("result.skipped_batches".into(), skipped_total.to_string()),
        ("result.dev_selection_pct".into(), selection.to_string()),
        (
            "result.model_checkpoint".into(),
            best_path.display().to_string(),
        ),
    ];
    if !pairs.is_empty() {
        let (p, r, f1) = corpus_token_prf(&pairs);
        extras.push(("result.dev_token_precision".into(), p.to_string()));
        extras.push(("result.dev_token_recall".into(), r.to_string()));
        extras.push(("result.dev_token_f1".into(), f1.to_string()));
    }
    write_manifest(&dir, cfg, &extras)?;
    println!(
        "best epoch {best_epoch} (val {best_val}); checkpoint {}",
        best_path.display()
    );
    Ok(())
}

/// One line per instance in the extraction dump.
#[derive(Debug, Serialize, Deserialize)]
pub struct DumpRecord {
    pub id: usize,
    pub mask: Vec<bool>,
    pub probs: Vec<f64>,
    pub prediction: String,
}

struct ExtractedSplit {
    enc: Vec<EncodedInstance>,
    model: InfoCalModel<f32>,
    extractions: Vec<Extraction>,
    records: Vec<DumpRecord>,
}

fn extract_split(cfg: &RunConfig, loaded: &LoadedCorpus) -> CliResult<ExtractedSplit> {
    if cfg.model_checkpoint.is_empty() {
        return Err(CliError::Invalid(
            "no model_checkpoint given; train first or pass --model-checkpoint".into(),
        ));
    }
    let model = model_from_checkpoint(&cfg.model_checkpoint, loaded.vocab_hash)?;
    let split = pick_split(&loaded.corpus, cfg)?;
    let enc = encode_corpus(&split, &loaded.vocab);
    let mut extractions = Vec::with_capacity(enc.len());
    let mut records = Vec::with_capacity(enc.len());
    for (id, inst) in enc.iter().enumerate() {
        let ex = extract_rationale(&model, &inst.ids)?;
        records.push(DumpRecord {
            id,
            mask: ex.mask.clone(),
            probs: ex.probs.clone(),
            prediction: match model.cfg.task {
                TaskKind::Classification => ex.predicted_class().to_string(),
                TaskKind::Regression => format!("{}", ex.dist[0]),
            },
        });
        extractions.push(ex);
    }
    Ok(ExtractedSplit {
        enc,
        model,
        extractions,
        records,
    })
}

fn dump_to_jsonl(records: &[DumpRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("dump serialization"));
        out.push('\n');
    }
    out
}

pub fn cmd_extract(cfg: &RunConfig) -> CliResult<()> {
    let loaded = load_corpus(cfg)?;
    let dir = make_run_dir(cfg)?;
    let records = extract_split(cfg, &loaded)?.records;
    let dump_path = if cfg.dump.is_empty() {
        dir.join("extractions.jsonl")
    } else {
        PathBuf::from(&cfg.dump)
    };
    ensure_parent(&dump_path)?;
    write_text(&dump_path, &dump_to_jsonl(&records))?;
    let masks: Vec<Vec<bool>> = records.iter().map(|r| r.mask.clone()).collect();
    let selection = selection_percentage(&masks);
    write_manifest(
        &dir,
        cfg,
        &[
            ("hash.corpus".into(), hex(loaded.corpus_hash)),
            ("hash.vocab".into(), hex(loaded.vocab_hash)),
            ("result.instances".into(), records.len().to_string()),
            ("result.selection_pct".into(), selection.to_string()),
            ("result.dump".into(), dump_path.display().to_string()),
        ],
    )?;
    println!(
        "extracted {} instance(s), selection {selection:.2}%, dump {}",
        records.len(),
        dump_path.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let loaded = load_corpus(cfg)?;
    let dir = make_run_dir(cfg)?;
    let ExtractedSplit {
        enc,
        model,
        extractions,
        records,
    } = extract_split(cfg, &loaded)?;

    let mut masks: Vec<Vec<bool>> = Vec::new();
    let mut pairs: Vec<(Vec<crate::data::Span>, Vec<crate::data::Span>)> = Vec::new();
    let mut pred_span_sets = Vec::new();
    let mut gold_span_sets = Vec::new();
    let mut auprcs: Vec<f64> = Vec::new();
    let mut comp_sum = 0.0;
    let mut suff_sum = 0.0;
    let mut correct = 0usize;
    let mut labeled = 0usize;

    for (inst, ex) in enc.iter().zip(&extractions) {
        if let Some(gold) = &inst.gold {
            let gold_n = normalize_spans(gold);
            pairs.push((ex.spans(), gold_n.clone()));
            pred_span_sets.push(ex.spans());
            gold_span_sets.push(gold_n.clone());
            let gold_mask = spans_to_mask(&gold_n, inst.ids.len());
            if let Some(a) = auprc(&ex.probs, &gold_mask) {
                auprcs.push(a);
            }
        }
        if model.cfg.task == TaskKind::Classification {
            let predict =
                |m: &[bool]| predict_with_mask(&model, &inst.ids, m).expect("masked prediction");
            comp_sum += comprehensiveness_with(&predict, &ex.mask);
            suff_sum += sufficiency_with(&predict, &ex.mask);
            if let Label::Class(gold) = inst.label {
                labeled += 1;
                if ex.predicted_class() == gold {
                    correct += 1;
                }
            }
        }
        masks.push(ex.mask.clone());
    }

    let n = enc.len() as f64;
    let selection = selection_percentage(&masks);
    let mut metric_rows: Vec<(String, String)> = vec![
        ("instances".into(), enc.len().to_string()),
        ("selection_pct".into(), selection.to_string()),
    ];
    let mut lines = vec![
        format!("instances            {}", enc.len()),
        format!("selection percentage {selection:.2}%"),
    ];
    if model.cfg.task == TaskKind::Classification {
        let comp = comp_sum / n;
        let suff = suff_sum / n;
        let acc = if labeled > 0 {
            correct as f64 / labeled as f64
        } else {
            f64::NAN
        };
        metric_rows.push(("accuracy".into(), acc.to_string()));
        metric_rows.push(("comprehensiveness".into(), comp.to_string()));
        metric_rows.push(("sufficiency".into(), suff.to_string()));
        lines.push(format!("accuracy             {acc:.4}"));
        lines.push(format!("comprehensiveness    {comp:.4}"));
        lines.push(format!("sufficiency          {suff:.4}"));
    }
    if pairs.is_empty() {
        lines.push("token metrics        absent (no gold rationales)".into());
        metric_rows.push(("token_metrics".into(), "absent".into()));
    } else {
        let (p, r, f1) = corpus_token_prf(&pairs);
        let iou = iou_f1(&pred_span_sets, &gold_span_sets);
        metric_rows.push(("token_precision".into(), p.to_string()));
        metric_rows.push(("token_recall".into(), r.to_string()));
        metric_rows.push(("token_f1".into(), f1.to_string()));
        metric_rows.push(("iou_f1".into(), iou.to_string()));
        lines.push(format!("token precision      {p:.4}"));
        lines.push(format!("token recall         {r:.4}"));
        lines.push(format!("token F1             {f1:.4}"));
        lines.push(format!("IOU F1               {iou:.4}"));
        if auprcs.is_empty() {
            lines.push("AUPRC                undefined (no positive tokens)".into());
            metric_rows.push(("auprc".into(), "undefined".into()));
        } else {
            let mean_auprc = auprcs.iter().sum::<f64>() / auprcs.len() as f64;
            metric_rows.push(("auprc".into(), mean_auprc.to_string()));
            lines.push(format!("AUPRC                {mean_auprc:.4}"));
        }
    }

    let report_text = lines.join("\n") + "\n";
    print!("{report_text}");
    write_text(&dir.join("report.txt"), &report_text)?;
    let mut csv = String::from("metric,value\n");
    for (k, v) in &metric_rows {
        csv.push_str(&format!("{k},{v}\n"));
    }
    write_text(&dir.join("metrics.csv"), &csv)?;
    write_text(&dir.join("extractions.jsonl"), &dump_to_jsonl(&records))?;

    let mut extras: Vec<(String, String)> = metric_rows
        .iter()
        .map(|(k, v)| (format!("result.{k}"), v.clone()))
        .collect();
    extras.push(("hash.corpus".into(), hex(loaded.corpus_hash)));
    extras.push(("hash.vocab".into(), hex(loaded.vocab_hash)));
    write_manifest(&dir, cfg, &extras)?;
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> CliResult<()> {
    if cfg.dump.is_empty() {
        return Err(CliError::Invalid(
            "no dump given; pass --dump pointing at an extraction dump".into(),
        ));
    }
    let loaded = load_corpus(cfg)?;
    let dir = make_run_dir(cfg)?;
    let split = pick_split(&loaded.corpus, cfg)?;
    let text = fs::read_to_string(&cfg.dump)
        .map_err(|e| io_err(Path::new(&cfg.dump), e))?;
    let mut instances = Vec::new();
    let mut mismatched: Vec<String> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                mismatched.push(format!("line {}: {e}", lineno + 1));
                continue;
            }
        };
        let Some(inst) = split.instances.get(rec.id) else {
            mismatched.push(format!(
                "id {} not in the {} split ({} instances)",
                rec.id,
                cfg.eval_split,
                split.len()
            ));
            continue;
        };
        if inst.tokens.len() != rec.mask.len() {
            mismatched.push(format!(
                "id {}: mask length {} vs {} tokens",
                rec.id,
                rec.mask.len(),
                inst.tokens.len()
            ));
            continue;
        }
        instances.push(ReportInstance {
            id: rec.id,
            tokens: inst.tokens.clone(),
            mask: rec.mask,
            prediction: rec.prediction,
            gold: label_string(&inst.label),
        });
    }
    for m in &mismatched {
        eprintln!("skipped: {m}");
    }
    print!("{}", render_ansi(&instances));
    let html = render_html(&instances, "Extracted rationales");
    write_text(&dir.join("report.html"), &html)?;
    write_manifest(
        &dir,
        cfg,
        &[
            ("hash.corpus".into(), hex(loaded.corpus_hash)),
            ("result.rendered".into(), instances.len().to_string()),
            ("result.skipped".into(), mismatched.len().to_string()),
        ],
    )?;
    println!(
        "rendered {} instance(s) ({} skipped) into {}",
        instances.len(),
        mismatched.len(),
        dir.join("report.html").display()
    );
    Ok(())
}

pub fn cmd_gen_corpus(cfg: &RunConfig) -> CliResult<()> {
    if cfg.corpus.is_empty() {
        return Err(CliError::Invalid(
            "corpus is the output path for gen-corpus; pass --corpus".into(),
        ));
    }
    let mut spec = SynthSpec::preset(&cfg.synth_preset, cfg.synth_n, cfg.seed)?;
    spec.noise_rate = cfg.synth_noise;
    let corpus = generate_synthetic(&spec)?;
    let path = PathBuf::from(&cfg.corpus);
    ensure_parent(&path)?;
    save_jsonl(&corpus, &path)?;
    let dir = make_run_dir(cfg)?;
    write_manifest(
        &dir,
        cfg,
        &[
            ("hash.corpus".into(), hex(corpus.hash())),
            ("result.instances".into(), corpus.len().to_string()),
            ("result.classes".into(), corpus.num_classes().to_string()),
        ],
    )?;
    println!(
        "wrote {} instance(s), {} classes, to {}",
        corpus.len(),
        corpus.num_classes(),
        path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "infocal-cli-{}-{tag}",
            std::process::id()
        ));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn fast_cfg(base: &Path) -> RunConfig {
        RunConfig {
            corpus: base.join("corpus.jsonl").display().to_string(),
            out_dir: base.join("runs").display().to_string(),
            synth_preset: "ngram".into(),
            synth_n: 60,
            embed_dim: 4,
            hidden_dim: 4,
            lm_embed_dim: 4,
            lm_hidden_dim: 4,
            lm_epochs: 1,
            epochs: 1,
            batch_size: 8,
            lambda_lm: 0.0,
            seed: 7,
            ..RunConfig::default()
        }
    }

    fn newest_run_dir(cfg: &RunConfig) -> PathBuf {
        let suffix = format!("-{:016x}", cfg.hash());
        let mut dirs: Vec<PathBuf> = fs::read_dir(&cfg.out_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.file_name().unwrap().to_string_lossy().ends_with(&suffix))
            .collect();
        dirs.sort();
        dirs.pop().expect("run directory for this config")
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn full_command_pipeline_produces_all_artifacts() {
        let base = tmp_dir("pipeline");
        let mut cfg = fast_cfg(&base);
        cmd_gen_corpus(&cfg).unwrap();

        cfg.lm_checkpoint = base.join("lm.ckpt").display().to_string();
        cmd_pretrain_lm(&cfg).unwrap();
        assert!(Path::new(&cfg.lm_checkpoint).exists());

        cfg.lambda_lm = 0.005;
        cfg.model_checkpoint = base.join("model.ckpt").display().to_string();
        cmd_train(&cfg).unwrap();
        assert!(Path::new(&cfg.model_checkpoint).exists());
        let train_dir = newest_run_dir(&cfg);
        let manifest = fs::read_to_string(train_dir.join("manifest.txt")).unwrap();
        let mut parsed = RunConfig::default();
        parsed.apply_text(&manifest).unwrap();
        assert_eq!(parsed.seed, cfg.seed, "manifest must parse as a config");
        let csv = fs::read_to_string(train_dir.join("epochs.csv")).unwrap();
        assert!(csv.starts_with(
            "epoch,L_sp,L_ib,L_guide,L_mi,L_g,L_d,L_lm,J_total,val_metric\n"
        ));
        assert!(train_dir.join("final.ckpt").exists());

        cfg.eval_split = "dev".into();
        cmd_eval(&cfg).unwrap();
        let eval_dir = newest_run_dir(&cfg);
        let report = fs::read_to_string(eval_dir.join("report.txt")).unwrap();
        assert!(report.contains("token F1"), "synthetic corpus has gold: {report}");
        assert!(report.contains("comprehensiveness"));
        assert!(eval_dir.join("extractions.jsonl").exists());
        assert!(eval_dir.join("metrics.csv").exists());

        cfg.dump = base.join("dump.jsonl").display().to_string();
        cmd_extract(&cfg).unwrap();
        assert!(Path::new(&cfg.dump).exists());

        cmd_report(&cfg).unwrap();
        let report_dir = newest_run_dir(&cfg);
        let html = fs::read_to_string(report_dir.join("report.html")).unwrap();
        crate::report::check_balanced(&html).unwrap();
    }

    #[test]
    fn eval_rejects_checkpoint_from_mismatched_corpus() {
        let base = tmp_dir("vocabmismatch");
        let mut cfg = fast_cfg(&base);
        cmd_gen_corpus(&cfg).unwrap();
        cfg.model_checkpoint = base.join("model.ckpt").display().to_string();
        cmd_train(&cfg).unwrap();

        let mut other = fast_cfg(&base);
        other.corpus = base.join("other.jsonl").display().to_string();
        other.synth_preset = "xor-pair".into();
        other.synth_n = 40;
        cmd_gen_corpus(&other).unwrap();
        other.model_checkpoint = cfg.model_checkpoint.clone();
        other.eval_split = "dev".into();
        let err = cmd_eval(&other).unwrap_err();
        assert!(
            matches!(
                err,
                CliError::Checkpoint(CheckpointError::VocabMismatch { .. })
            ),
            "got {err}"
        );
    }

    #[test]
    fn train_refuses_fluency_weight_without_language_model() {
        let base = tmp_dir("nolm");
        let mut cfg = fast_cfg(&base);
        cmd_gen_corpus(&cfg).unwrap();
        cfg.lambda_lm = 0.005;
        cfg.lm_checkpoint = String::new();
        let err = cmd_train(&cfg).unwrap_err();
        assert!(matches!(err, CliError::Invalid(_)), "got {err}");
        assert!(err.to_string().contains("pretrain-lm"));
    }

    #[test]
    fn missing_corpus_path_names_the_problem() {
        let cfg = RunConfig::default();
        let err = cmd_train(&cfg).unwrap_err();
        assert!(err.to_string().contains("corpus"));
        let mut cfg = RunConfig::default();
        cfg.corpus = "/nonexistent/never.jsonl".into();
        let err = cmd_pretrain_lm(&cfg).unwrap_err();
        assert!(err.to_string().contains("never.jsonl"));
    }

    #[test]
    fn report_lists_mismatches_and_continues() {
        let base = tmp_dir("reportmismatch");
        let mut cfg = fast_cfg(&base);
        cmd_gen_corpus(&cfg).unwrap();
        cfg.eval_split = "dev".into();
        cfg.dump = base.join("dump.jsonl").display().to_string();
        let bad = DumpRecord {
            id: 10_000,
            mask: vec![true, false],
            probs: vec![0.9, 0.1],
            prediction: "0".into(),
        };
        let good = DumpRecord {
            id: 0,
            mask: vec![],
            probs: vec![],
            prediction: "1".into(),
        };
        let mut text = serde_json::to_string(&bad).unwrap();
        text.push('\n');
        text.push_str(&serde_json::to_string(&good).unwrap());
        text.push('\n');
        fs::write(&cfg.dump, text).unwrap();
        cmd_report(&cfg).unwrap();
    }

    #[test]
    fn config_args_forward_every_override() {
        let args = ConfigArgs {
            seed: Some(42),
            lambda_ib: Some(0.5),
            disable_adv: Some(true),
            task: Some("regression".into()),
            ..ConfigArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.lambda_ib, 0.5);
        assert!(cfg.disable_adv);
        assert_eq!(cfg.task, TaskKind::Regression);
    }
}
