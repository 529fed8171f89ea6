use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;

use measpipe::corpus::{load_corpus, load_documents, split_train_dev, validate_corpus, write_tsv, Corpus, CorpusError};
use measpipe::dataset::{corpus_stats, CorpusStats, DatasetStats, Preparer};
use measpipe::metrics::{score_corpus, ScoreOptions};
use measpipe::pipeline::{run_pipeline, BundleTokenizer, ModelBundle, PipelineReport};
use measpipe::textprep::{RuleSplitter, SubwordTokenizer};
use measpipe::workflow::{build_examples, build_tokenizer, train_examples, Examples, Subtask};

use crate::config::{usage, RunConfig};

pub const CONFIG_FILE: &str = "config.json";

fn cache_path(run: &Path, subtask: Subtask, part: &str) -> PathBuf {
    run.join("cache").join(format!("{}.{part}.jsonl", subtask.name()))
}

/// `<out_dir>/run-YYYYmmdd-HHMMSS`, with a numeric suffix if taken.
fn create_run_dir(out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = out_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn existing_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} does not exist or is not a directory", path.display());
    }
    Ok(())
}

/// Load a corpus, listing every validation failure on stderr.
fn load_checked(text_dir: &Path, tsv_dir: &Path) -> Result<Corpus> {
    existing_dir(text_dir, "text directory")?;
    existing_dir(tsv_dir, "annotation directory")?;
    match load_corpus(text_dir, tsv_dir) {
        Ok(c) => Ok(c),
        Err(CorpusError::Invalid(violations)) => {
            for v in &violations {
                eprintln!("invalid: {v}");
            }
            bail!("{} validation failure(s) in {}", violations.len(), tsv_dir.display())
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct SubtaskStats {
    train: DatasetStats,
    dev: DatasetStats,
}

#[derive(Serialize)]
struct PreprocessStats {
    corpus: CorpusStats,
    train: CorpusStats,
    dev: CorpusStats,
    subtasks: BTreeMap<String, SubtaskStats>,
}

fn summary(stats: &PreprocessStats) -> String {
    let c = &stats.corpus;
    let mut out = format!(
        "paragraphs {}\nannotation_sets {}\nquantities {}\nmeasured_entities {}\nmeasured_properties {}\nqualifiers {}\ntrain_paragraphs {}\ndev_paragraphs {}\n",
        c.paragraphs,
        c.annotation_sets,
        c.quantities,
        c.measured_entities,
        c.measured_properties,
        c.qualifiers,
        stats.train.paragraphs,
        stats.dev.paragraphs
    );
    for (name, s) in &stats.subtasks {
        out.push_str(&format!(
            "{name}_examples train={} dev={} unreachable={} truncated_sentences={}\n",
            s.train.examples,
            s.dev.examples,
            s.train.unreachable + s.dev.unreachable,
            s.train.truncated_sentences + s.dev.truncated_sentences
        ));
    }
    out
}

pub fn preprocess(cfg: &RunConfig) -> Result<PathBuf> {
    let text_dir = cfg.text_dir.as_deref().ok_or_else(|| usage("text_dir is not set"))?;
    let tsv_dir = cfg.tsv_dir.as_deref().ok_or_else(|| usage("tsv_dir is not set"))?;
    let corpus = load_checked(text_dir, tsv_dir)?;
    if corpus.documents.is_empty() {
        bail!("no documents in {}", text_dir.display());
    }
    let (train, dev) = split_train_dev(&corpus, cfg.split_ratio, cfg.seed)?;
    let tokenizer = build_tokenizer(
        cfg.tokenizer,
        cfg.vocab_file.as_deref(),
        train.documents.values().map(|d| d.text.as_str()),
    )?;

    let run = create_run_dir(&cfg.out_dir)?;
    cfg.save(&run.join(CONFIG_FILE))?;
    tokenizer.save(&run.join("tokenizer"))?;
    let ids = |c: &Corpus| c.documents.keys().cloned().collect::<Vec<_>>();
    write_json(
        &run.join("split.json"),
        &BTreeMap::from([("train", ids(&train)), ("dev", ids(&dev))]),
    )?;

    fs::create_dir_all(run.join("cache"))?;
    let mut subtasks = BTreeMap::new();
    for subtask in Subtask::ALL {
        let prep = Preparer {
            tokenizer: &tokenizer,
            splitter: &RuleSplitter,
            max_len: if subtask == Subtask::Modifier { cfg.modifier.max_len } else { cfg.tagger.max_len },
        };
        let (t, ts) = build_examples(subtask, &train, &prep)?;
        let (d, ds) = build_examples(subtask, &dev, &prep)?;
        t.write_jsonl(&cache_path(&run, subtask, "train"))?;
        d.write_jsonl(&cache_path(&run, subtask, "dev"))?;
        subtasks.insert(subtask.name().to_string(), SubtaskStats { train: ts, dev: ds });
    }
    let stats = PreprocessStats {
        corpus: corpus_stats(&corpus),
        train: corpus_stats(&train),
        dev: corpus_stats(&dev),
        subtasks,
    };
    write_json(&run.join("stats.json"), &stats)?;
    let text = summary(&stats);
    fs::write(run.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(run)
}

/// Configuration saved by `preprocess`, with any new overrides applied.
pub fn run_config(run: &Path) -> Result<RunConfig> {
    existing_dir(run, "run directory")?;
    let path = run.join(CONFIG_FILE);
    if !path.is_file() {
        bail!("{} has no {CONFIG_FILE}; run preprocess first", run.display());
    }
    RunConfig::load(&path)
}

pub fn train(cfg: &RunConfig, run: &Path, subtask: Subtask) -> Result<PathBuf> {
    let (train_path, dev_path) = (cache_path(run, subtask, "train"), cache_path(run, subtask, "dev"));
    for p in [&train_path, &dev_path] {
        if !p.is_file() {
            bail!("missing cache {}; run preprocess first", p.display());
        }
    }
    let train = Examples::read_jsonl(subtask, &train_path)?;
    let dev = Examples::read_jsonl(subtask, &dev_path)?;
    if train.is_empty() {
        bail!("no {subtask} training examples in {}", train_path.display());
    }
    let tokenizer = BundleTokenizer::load(&run.join("tokenizer"))?;
    let trained = train_examples(subtask, &train, &dev, &cfg.train_settings(), tokenizer.vocab_size())?;
    let dir = trained.save(subtask, run)?;
    cfg.save(&dir.parent().expect("variant dir").join(CONFIG_FILE))?;
    let losses = trained.losses();
    println!(
        "{subtask}: {} epoch(s), final train loss {:.6}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("checkpoint: {}", dir.display());
    Ok(dir)
}

pub fn predict(run: &Path, text_dir: &Path, out: &Path) -> Result<usize> {
    let bundle = ModelBundle::load(run)?;
    existing_dir(text_dir, "text directory")?;
    let mut predicted = Corpus::default();
    for doc in load_documents(text_dir)? {
        predicted.add_document(doc);
    }
    let stages = bundle.stages(&RuleSplitter);
    let mut report = PipelineReport::default();
    for (doc_id, doc) in &predicted.documents.clone() {
        let (sets, r) = run_pipeline(doc, &stages);
        report.absorb(&r);
        if !sets.is_empty() {
            predicted.annotation_sets.insert(doc_id.clone(), sets);
        }
    }
    let violations = validate_corpus(&predicted);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("invalid prediction: {v}");
        }
        bail!("{} invalid predicted annotation(s)", violations.len());
    }
    let written = write_tsv(&predicted, out)?;
    fs::write(out.join("pipeline_report.txt"), report.to_key_values())?;
    println!("{written} TSV file(s) written to {}", out.display());
    Ok(written)
}

/// `doc_id <tab or comma> subdomain` per line; `#` comments.
fn read_groups(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((doc, group)) = line.split_once(['\t', ',']) else {
            bail!("{}:{}: expected `doc_id<TAB>subdomain`", path.display(), i + 1);
        };
        out.insert(doc.trim().to_string(), group.trim().to_string());
    }
    Ok(out)
}

pub fn evaluate(pred: &Path, gold: &Path, text_dir: &Path, groups: Option<&Path>, out: &Path) -> Result<()> {
    let pred_corpus = load_checked(text_dir, pred)?;
    let gold_corpus = load_checked(text_dir, gold)?;
    let options = ScoreOptions {
        groups: groups.map(read_groups).transpose()?,
        ..ScoreOptions::default()
    };
    let report = score_corpus(&pred_corpus, &gold_corpus, &options)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let table = report.to_table();
    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("report.kv"), report.to_key_values())?;
    write_json(&out.join("report.json"), &report)?;
    if options.groups.is_some() {
        fs::write(out.join("groups.csv"), report.groups_csv())?;
    }
    print!("{table}");
    Ok(())
}

pub fn report(run: &Path) -> Result<()> {
    let cfg = run_config(run)?;
    println!("run {}", run.display());
    println!(
        "encoder {:?} hidden_size {} seed {} tokenizer {:?}",
        cfg.encoder, cfg.hidden_size, cfg.seed, cfg.tokenizer
    );
    if let Ok(s) = fs::read_to_string(run.join("summary.txt")) {
        print!("{s}");
    }
    let mut variants: Vec<PathBuf> = fs::read_dir(run)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("variant-")))
        .collect();
    variants.sort();
    for dir in variants {
        let name = dir.file_name().unwrap().to_string_lossy().trim_start_matches("variant-").to_string();
        let log_path = dir.join("training_log.json");
        if !log_path.is_file() {
            println!("{name}: no training log");
            continue;
        }
        let log = read_json(&log_path)?;
        let epochs = log["epochs"].as_array().map_or(0, Vec::len);
        let last = log["epochs"].as_array().and_then(|e| e.last());
        let dev = last.and_then(|e| {
            e.as_object()
                .and_then(|o| o.iter().find(|(k, _)| k.starts_with("dev_")).map(|(k, v)| format!(" {k} {v}")))
        });
        println!(
            "{name}: {epochs} epoch(s), best epoch {}, final train loss {}{}",
            log["best_epoch"],
            last.map_or(Value::Null, |e| e["train_loss"].clone()),
            dev.unwrap_or_default()
        );
    }
    for candidate in [run.join("predictions").join("pipeline_report.txt"), run.join("evaluation").join("report.txt")] {
        if let Ok(s) = fs::read_to_string(&candidate) {
            println!("{}:", candidate.display());
            print!("{s}");
        }
    }
    Ok(())
}
