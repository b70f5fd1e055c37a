use std::path::{Path, PathBuf};

use a2i::cbow::{make_document_pairs, train_cbow, EmbeddingMatrix};
use a2i::classifier::{predict_batch, train_a2i, A2IConfig, A2IModel, Mode};
use a2i::eval::{
    det_curve, entropy_report, metrics, run_ablation, token_overlap_report, write_det_csv, AblationData, ScoredSet,
};
use a2i::posteriors::grammar::Grammar;
use a2i::posteriors::{load_dataset, write_posteriors, ClassCounts, ConfusionSource, Dataset, Label, Utterance};
use a2i::scenarios::{intended_grammar, sample_lines, split_stratified, synthesize_lines, unintended_grammar};
use a2i::tokenizer::{train_bpe, Tokenizer};
use a2i::{par, Execution};
use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{stream, write_json, ExperimentConfig, Provenance};
use crate::{Cli, Command, ModeArg, ModelArgs, Partition, Usage};

const EXEC: Execution = Execution::Parallel;

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut cfg = ExperimentConfig::load(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.propagate_seed();
    if let Some(n) = g.threads {
        if n == 0 {
            anyhow::bail!(Usage("--threads must be positive".into()));
        }
        par::init_threads(n)?;
    }
    let out = g.out;
    match cli.command {
        Command::BuildVocab { corpus, size } => build_vocab(cfg, corpus, size, out),
        Command::TrainCbow {
            corpus,
            vocab,
            epochs,
            dim,
            window,
        } => {
            if let Some(e) = epochs {
                cfg.cbow.epochs = e;
            }
            if let Some(d) = dim {
                cfg.cbow.dim = d;
            }
            if let Some(w) = window {
                cfg.window = w;
            }
            train_cbow_cmd(cfg, corpus, vocab, out)
        }
        Command::SynthData {
            vocab,
            embeddings,
            intended_grammar,
            unintended_grammar,
            per_class,
            ratios,
            intended_temperature,
            unintended_temperature,
        } => {
            set(&mut cfg.paths.embeddings, embeddings);
            set(&mut cfg.paths.intended_grammar, intended_grammar);
            set(&mut cfg.paths.unintended_grammar, unintended_grammar);
            if let Some(n) = per_class {
                cfg.synth.per_class = n;
            }
            if let Some(r) = ratios {
                cfg.synth.split = r;
            }
            if let Some(t) = intended_temperature {
                cfg.synth.intended.temperature = t;
            }
            if let Some(t) = unintended_temperature {
                cfg.synth.unintended.temperature = t;
            }
            synth_data(cfg, vocab, out)
        }
        Command::Train {
            manifest,
            embeddings,
            model,
        } => {
            set(&mut cfg.paths.embeddings, embeddings);
            apply_model_args(&mut cfg.model, &model);
            train(cfg, manifest, out)
        }
        Command::Eval {
            manifest,
            checkpoint,
            partition,
            tpr,
            det_csv,
        } => {
            if let Some(t) = tpr {
                cfg.tpr = t;
            }
            eval(cfg, manifest, checkpoint, partition, det_csv, out)
        }
        Command::Ablate {
            manifest,
            embeddings,
            grid,
            model,
        } => {
            set(&mut cfg.paths.embeddings, embeddings);
            apply_model_args(&mut cfg.model, &model);
            if let Some(path) = grid {
                let bytes = std::fs::read(&path).with_context(|| format!("reading grid {}", path.display()))?;
                cfg.grid = serde_json::from_slice(&bytes)
                    .map_err(a2i::Error::from)
                    .with_context(|| format!("parsing grid {}", path.display()))?;
            }
            ablate(cfg, manifest, out)
        }
        Command::Analyze {
            manifest,
            partition,
            top_k,
        } => {
            if let Some(k) = top_k {
                cfg.top_k = k;
            }
            analyze(cfg, manifest, partition, out)
        }
    }
}

fn set(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn require(slot: &mut Option<PathBuf>, flag: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    set(slot, flag);
    slot.clone().ok_or_else(|| {
        Usage(format!(
            "missing --{} (or paths.{} in --config)",
            name.replace('_', "-"),
            name
        ))
        .into()
    })
}

fn apply_model_args(m: &mut A2IConfig, a: &ModelArgs) {
    if let Some(mode) = a.mode {
        m.mode = match mode {
            ModeArg::Acoustic => Mode::Acoustic,
            ModeArg::Textual => Mode::Textual,
            ModeArg::Full => Mode::Full,
        };
    }
    if let Some(n) = a.top_n {
        m.top_n = n;
    }
    if let Some(p) = a.pos_enc {
        m.use_pos_enc = p;
    }
    if let Some(e) = a.epochs {
        m.epochs = e;
    }
    if let Some(lr) = a.lr {
        m.optimizer.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        m.batch_size = b;
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        return Err(a2i::Error::Data(format!("corpus {} has no non-empty lines", path.display())).into());
    }
    Ok(lines)
}

fn load_embeddings(
    cfg: &ExperimentConfig,
    models: &[&A2IConfig],
    vocab: &Tokenizer,
) -> Result<Option<EmbeddingMatrix>> {
    match &cfg.paths.embeddings {
        Some(p) => Ok(Some(EmbeddingMatrix::load(p, Some(&vocab.hash()))?)),
        None if models.iter().any(|m| m.mode.uses_textual()) => {
            Err(Usage("textual and full modes need --embeddings (or paths.embeddings in --config)".into()).into())
        }
        None => Ok(None),
    }
}

fn select(ds: &Dataset, p: Partition) -> Vec<Utterance> {
    match p {
        Partition::Train => ds.train.clone(),
        Partition::Validation => ds.validation.clone(),
        Partition::Eval => ds.eval.clone(),
        Partition::All => ds.all().cloned().collect(),
    }
}

fn partition_name(p: Partition) -> &'static str {
    match p {
        Partition::Train => "train",
        Partition::Validation => "validation",
        Partition::Eval => "eval",
        Partition::All => "all",
    }
}

fn build_vocab(
    mut cfg: ExperimentConfig,
    corpus: Option<PathBuf>,
    size: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let corpus = require(&mut cfg.paths.corpus, corpus, "corpus")?;
    if let Some(s) = size {
        cfg.vocab_size = s;
    }
    let out = out.unwrap_or_else(|| "vocab.json".into());
    cfg.paths.vocab = Some(out.clone());
    let lines = read_corpus(&corpus)?;
    let tok = train_bpe(lines.iter().map(String::as_str), cfg.vocab_size)?;
    ensure_parent(&out)?;
    tok.save(&out)?;
    provenance("build-vocab", &cfg).write_sidecar(&out)?;
    println!("vocabulary T={} written to {}", tok.vocab_size(), out.display());
    Ok(())
}

fn train_cbow_cmd(
    mut cfg: ExperimentConfig,
    corpus: Option<PathBuf>,
    vocab: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let corpus = require(&mut cfg.paths.corpus, corpus, "corpus")?;
    let vocab = require(&mut cfg.paths.vocab, vocab, "vocab")?;
    let out = out.unwrap_or_else(|| "embeddings.cbw".into());
    cfg.paths.embeddings = Some(out.clone());
    let tok = Tokenizer::load(&vocab)?;
    let docs: Vec<Vec<u32>> = read_corpus(&corpus)?
        .iter()
        .map(|l| tok.encode(l))
        .filter(|d| !d.is_empty())
        .collect();
    let pairs = make_document_pairs(&docs, cfg.window);
    let (model, log) = train_cbow(&pairs, tok.vocab_size(), &cfg.cbow)?;
    let emb = model.embeddings(tok.hash());
    ensure_parent(&out)?;
    emb.save(&out)?;
    provenance("train-cbow", &cfg).write_sidecar(&out)?;
    let last = log.epoch_losses.last().copied().unwrap_or(log.initial_loss);
    println!(
        "initial loss {:.4}, final loss {:.4} after {} epochs",
        log.initial_loss,
        last,
        log.epoch_losses.len()
    );
    println!("embeddings {}x{} written to {}", emb.rows(), emb.dim(), out.display());
    Ok(())
}

fn load_grammar(path: Option<&Path>, builtin: fn() -> Grammar) -> Result<Grammar> {
    match path {
        Some(p) => Ok(Grammar::load(p).with_context(|| format!("loading grammar {}", p.display()))?),
        None => Ok(builtin()),
    }
}

fn synth_data(mut cfg: ExperimentConfig, vocab: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let vocab = require(&mut cfg.paths.vocab, vocab, "vocab")?;
    cfg.synth.split.validate()?;
    cfg.synth.intended.validate()?;
    cfg.synth.unintended.validate()?;
    let dir = out.unwrap_or_else(|| "data".into());
    let tok = Tokenizer::load(&vocab)?;
    let source = match &cfg.paths.embeddings {
        Some(p) => {
            let k = cfg
                .synth
                .intended
                .confusion_size
                .max(cfg.synth.unintended.confusion_size);
            ConfusionSource::from_embeddings(&EmbeddingMatrix::load(p, Some(&tok.hash()))?, k)?
        }
        None => ConfusionSource::Uniform,
    };
    let gi = load_grammar(cfg.paths.intended_grammar.as_deref(), intended_grammar)?;
    let gu = load_grammar(cfg.paths.unintended_grammar.as_deref(), unintended_grammar)?;
    let n = cfg.synth.per_class;
    let lines_i = sample_lines(&gi, n, cfg.derived_seed(stream::SAMPLE_INTENDED));
    let lines_u = sample_lines(&gu, n, cfg.derived_seed(stream::SAMPLE_UNINTENDED));
    let mut utts = synthesize_lines(&lines_i, Label::Intended, &tok, &cfg.synth.intended, &source, EXEC)?;
    utts.extend(synthesize_lines(
        &lines_u,
        Label::Unintended,
        &tok,
        &cfg.synth.unintended,
        &source,
        EXEC,
    )?);
    let split = split_stratified(utts, cfg.synth.split, cfg.derived_seed(stream::SPLIT))?;

    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, part) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("eval", &split.eval),
    ] {
        write_posteriors(part, &dir.join(format!("{name}.ctcp")))?;
    }
    let vocab_file = std::path::absolute(&vocab).with_context(|| format!("resolving {}", vocab.display()))?;
    let manifest_path = dir.join("manifest.json");
    cfg.paths.manifest = Some(manifest_path.clone());
    let manifest = json!({
        "vocab_file": vocab_file,
        "partitions": {
            "train": ["train.ctcp"],
            "validation": ["validation.ctcp"],
            "eval": ["eval.ctcp"],
        },
        "provenance": provenance("synth-data", &cfg).to_value()?,
    });
    write_json(&manifest_path, &manifest)?;
    let ds = load_dataset(&manifest_path)?;
    println!("manifest written to {}", manifest_path.display());
    for (name, c) in ds.counts() {
        println!("{name:<10} {:>6} intended {:>6} unintended", c.intended, c.unintended);
    }
    Ok(())
}

fn provenance<'a>(command: &'a str, cfg: &'a ExperimentConfig) -> Provenance<'a> {
    Provenance {
        command,
        seed: cfg.seed,
        config: cfg,
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    provenance: Provenance<'a>,
    #[serde(flatten)]
    body: T,
}

fn train(mut cfg: ExperimentConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let manifest = require(&mut cfg.paths.manifest, manifest, "manifest")?;
    cfg.model.validate()?;
    let out = out.unwrap_or_else(|| "model.a2i".into());
    cfg.paths.checkpoint = Some(out.clone());
    let ds = load_dataset(&manifest)?;
    let emb = load_embeddings(&cfg, &[&cfg.model], &ds.vocab)?;
    let (model, log) = train_a2i(
        &ds.train,
        &ds.validation,
        &cfg.model,
        ds.vocab.vocab_size(),
        emb.as_ref(),
        EXEC,
    )?;
    ensure_parent(&out)?;
    model.save(&out)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.json");
    let log_path = PathBuf::from(log_path);
    write_json(
        &log_path,
        &Report {
            provenance: provenance("train", &cfg),
            body: json!({ "training": &log }),
        },
    )?;
    let best = &log.epochs[log.best_epoch];
    println!(
        "{}: best epoch {} of {}, validation EER {:.4}, validation loss {:.4}",
        cfg.model.label(),
        log.best_epoch + 1,
        log.epochs.len(),
        best.validation_eer,
        best.validation_loss
    );
    println!("checkpoint written to {}, log to {}", out.display(), log_path.display());
    Ok(())
}

fn eval(
    mut cfg: ExperimentConfig,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    partition: Partition,
    det_csv: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let manifest = require(&mut cfg.paths.manifest, manifest, "manifest")?;
    let checkpoint = require(&mut cfg.paths.checkpoint, checkpoint, "checkpoint")?;
    let ds = load_dataset(&manifest)?;
    let model = A2IModel::load(&checkpoint)?;
    if model.vocab_size() != ds.vocab.vocab_size() {
        return Err(a2i::Error::Data(format!(
            "checkpoint expects T={} but the dataset vocabulary has T={}",
            model.vocab_size(),
            ds.vocab.vocab_size()
        ))
        .into());
    }
    let utts = select(&ds, partition);
    let set = ScoredSet::from_utterances(predict_batch(&utts, &model, EXEC)?, &utts)?;
    let m = metrics(&set, cfg.tpr)?;
    println!(
        "{} on {} ({} utterances)",
        model.config().label(),
        partition_name(partition),
        utts.len()
    );
    println!("EER {:.4} at threshold {:.4}", m.eer.rate, m.eer.threshold);
    println!(
        "FAR {:.4} at TPR {:.4} (target {}), mitigated {:.4}, threshold {:.4}",
        m.far_at_tpr.far, m.far_at_tpr.tpr, m.far_at_tpr.target_tpr, m.far_at_tpr.mitigated, m.far_at_tpr.threshold
    );
    if let Some(path) = det_csv {
        ensure_parent(&path)?;
        write_det_csv(&det_curve(&set)?, &path)?;
    }
    if let Some(path) = out {
        write_json(
            &path,
            &Report {
                provenance: provenance("eval", &cfg),
                body: json!({
                    "checkpoint_config": model.config(),
                    "partition": partition_name(partition),
                    "counts": ClassCounts::of(&utts),
                    "metrics": m,
                }),
            },
        )?;
    }
    Ok(())
}

/// Top-N with and without PosEnc for the textual path, then the acoustic and fused systems.
fn default_grid() -> Vec<serde_json::Value> {
    let mut grid = Vec::new();
    for n in [1, 3, 5, 7, 9] {
        for pe in [false, true] {
            grid.push(json!({"mode": "textual", "top_n": n, "use_pos_enc": pe}));
        }
    }
    grid.push(json!({"mode": "acoustic"}));
    grid.push(json!({"mode": "full", "top_n": 1, "use_pos_enc": true}));
    grid
}

fn ablate(mut cfg: ExperimentConfig, manifest: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let manifest = require(&mut cfg.paths.manifest, manifest, "manifest")?;
    if cfg.grid.is_empty() {
        cfg.grid = default_grid();
    }
    let configs: Vec<A2IConfig> = cfg.grid.iter().map(|g| cfg.grid_row(g)).collect::<Result<_>>()?;
    let ds = load_dataset(&manifest)?;
    let emb = load_embeddings(&cfg, &configs.iter().collect::<Vec<_>>(), &ds.vocab)?;
    let data = AblationData {
        train: &ds.train,
        validation: &ds.validation,
        eval: &ds.eval,
        vocab_size: ds.vocab.vocab_size(),
        cbow: emb.as_ref(),
    };
    let report = run_ablation(data, &configs, EXEC)?;
    let dir = out.unwrap_or_else(|| "ablation".into());
    write_json(
        &dir.join("ablation.json"),
        &Report {
            provenance: provenance("ablate", &cfg),
            body: &report,
        },
    )?;
    let text = report.to_text();
    std::fs::write(dir.join("ablation.txt"), &text).with_context(|| format!("writing {}", dir.display()))?;
    print!("{text}");
    Ok(())
}

fn token_names(tok: &Tokenizer, ids: &[u32]) -> Vec<String> {
    ids.iter()
        .map(|&t| tok.vocab().token(t).unwrap_or("?").to_string())
        .collect()
}

fn analyze(
    mut cfg: ExperimentConfig,
    manifest: Option<PathBuf>,
    partition: Partition,
    out: Option<PathBuf>,
) -> Result<()> {
    let manifest = require(&mut cfg.paths.manifest, manifest, "manifest")?;
    let ds = load_dataset(&manifest)?;
    let utts = select(&ds, partition);
    let entropy = entropy_report(&utts)?;
    let overlap = token_overlap_report(&utts, cfg.top_k)?;
    let fmt = |e: Option<f64>| e.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("mean SoP entropy on {}", partition_name(partition));
    println!(
        "  intended   {} ({} utterances)",
        fmt(entropy.intended),
        entropy.intended_count
    );
    println!(
        "  unintended {} ({} utterances)",
        fmt(entropy.unintended),
        entropy.unintended_count
    );
    println!(
        "top-{} Top-1 tokens: {} shared, {} intended-only, {} unintended-only",
        overlap.top_k,
        overlap.common,
        overlap.intended_unique.len(),
        overlap.unintended_unique.len()
    );
    println!(
        "  intended-only:   {}",
        token_names(&ds.vocab, &overlap.intended_unique).join(" ")
    );
    println!(
        "  unintended-only: {}",
        token_names(&ds.vocab, &overlap.unintended_unique).join(" ")
    );
    if let Some(path) = out {
        write_json(
            &path,
            &Report {
                provenance: provenance("analyze", &cfg),
                body: json!({
                    "partition": partition_name(partition),
                    "entropy": entropy,
                    "overlap": overlap,
                    "intended_unique_tokens": token_names(&ds.vocab, &overlap.intended_unique),
                    "unintended_unique_tokens": token_names(&ds.vocab, &overlap.unintended_unique),
                }),
            },
        )?;
    }
    Ok(())
}
