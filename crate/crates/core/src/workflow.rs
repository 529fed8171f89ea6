//! Subtask-level training: example building, encoder construction and the
//! per-model trainers behind one interface.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::dataset::{
    modifier_examples, tagger_examples, unit_examples, DatasetStats, ModifierExample, Preparer, TaggerExample,
    UnitExample,
};
use crate::encoder::Encoder;
use crate::modcls::{
    save_modifier_model, train_modifier_classifier, ModifierError, ModifierHyperparams, ModifierModel,
    ModifierTrainingLog,
};
use crate::pipeline::{variant_dir, BundleTokenizer, ModelBundle, PipelineError};
use crate::tagheads::{save_tagger, train_tagger, TaggerError, TaggerHyperparams, TaggerModel, TaggerVariant, TrainingLog};
use crate::textprep::{BasicOptions, TextError, WhitespaceTokenizer, WordPiece};
use crate::unitdet::{
    save_unit_detector, train_unit_detector, UnitDetectorModel, UnitError, UnitHyperparams, UnitTrainingLog,
};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tagger(#[from] TaggerError),
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error(transparent)]
    Modifier(#[from] ModifierError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{subtask}: examples are for {found}")]
    WrongExamples { subtask: Subtask, found: &'static str },
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("vocabulary: {0}")]
    Vocab(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    Quantity,
    Unit,
    Modifier,
    Entity,
    Property,
    QualifierQ,
    QualifierP,
}

impl Subtask {
    pub const ALL: [Subtask; 7] = [
        Subtask::Quantity,
        Subtask::Unit,
        Subtask::Modifier,
        Subtask::Entity,
        Subtask::Property,
        Subtask::QualifierQ,
        Subtask::QualifierP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtask::Quantity => "quantity",
            Subtask::Unit => "unit",
            Subtask::Modifier => "modifier",
            Subtask::Entity => "entity",
            Subtask::Property => "property",
            Subtask::QualifierQ => "qualifier_q",
            Subtask::QualifierP => "qualifier_p",
        }
    }

    pub fn tagger_variant(self) -> Option<TaggerVariant> {
        match self {
            Subtask::Quantity => Some(TaggerVariant::Quantity),
            Subtask::Entity => Some(TaggerVariant::MeasuredEntity),
            Subtask::Property => Some(TaggerVariant::MeasuredProperty),
            Subtask::QualifierQ => Some(TaggerVariant::QualifierQ),
            Subtask::QualifierP => Some(TaggerVariant::QualifierP),
            Subtask::Unit | Subtask::Modifier => None,
        }
    }

    /// Checkpoint directory name under the run directory.
    pub fn slot(self) -> &'static str {
        match self.tagger_variant() {
            Some(v) => v.name(),
            None => self.name(),
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subtask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Subtask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Subtask::ALL.iter().map(|t| t.name()).collect();
                format!("unknown subtask {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// WordPiece with a vocabulary built from the training texts, or read
    /// from a vocab file.
    Wordpiece,
    Whitespace,
}

impl FromStr for TokenizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wordpiece" => Ok(TokenizerKind::Wordpiece),
            "whitespace" => Ok(TokenizerKind::Whitespace),
            _ => Err(format!("unknown tokenizer {s:?}")),
        }
    }
}

pub fn build_tokenizer<'a>(
    kind: TokenizerKind,
    vocab_file: Option<&Path>,
    texts: impl IntoIterator<Item = &'a str>,
) -> Result<BundleTokenizer, WorkflowError> {
    Ok(match kind {
        TokenizerKind::Whitespace => BundleTokenizer::Whitespace(WhitespaceTokenizer::default()),
        TokenizerKind::Wordpiece => {
            let options = BasicOptions::default();
            let wp = match vocab_file {
                Some(p) => WordPiece::from_vocab_file(p, options),
                None => WordPiece::from_tokens(WordPiece::build_vocab(texts, &options), options),
            }
            .map_err(|e| WorkflowError::Vocab(e.to_string()))?;
            BundleTokenizer::WordPiece(wp)
        }
    })
}

/// How to construct a fresh encoder for a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Hash { seed: u64, hidden_size: usize },
    Embedding { seed: u64, hidden_size: usize },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Hash {
            seed: 42,
            hidden_size: crate::encoder::DEFAULT_HIDDEN,
        }
    }
}

impl EncoderSpec {
    pub fn build(&self, vocab_size: usize, max_tokens: usize) -> Encoder {
        match *self {
            EncoderSpec::Hash { seed, hidden_size } => {
                let mut e = crate::encoder::HashEncoder::new(seed, hidden_size);
                e.max_tokens = e.max_tokens.max(max_tokens);
                Encoder::Hash(e)
            }
            EncoderSpec::Embedding { seed, hidden_size } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Encoder::embedding(vocab_size, hidden_size, max_tokens, &mut rng)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub encoder: EncoderSpec,
    pub tagger: TaggerHyperparams,
    pub unit: UnitHyperparams,
    pub modifier: ModifierHyperparams,
}

/// Examples of one subtask.
#[derive(Clone, Debug, PartialEq)]
pub enum Examples {
    Tagger(Vec<TaggerExample>),
    Unit(Vec<UnitExample>),
    Modifier(Vec<ModifierExample>),
}

impl Examples {
    pub fn len(&self) -> usize {
        match self {
            Examples::Tagger(v) => v.len(),
            Examples::Unit(v) => v.len(),
            Examples::Modifier(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            Examples::Tagger(_) => "a tagger",
            Examples::Unit(_) => "the unit detector",
            Examples::Modifier(_) => "the modifier classifier",
        }
    }

    /// One JSON value per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), WorkflowError> {
        let io = |source| WorkflowError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut line = |v: serde_json::Result<String>| -> Result<(), WorkflowError> {
            let s = v.map_err(|source| WorkflowError::Json {
                path: path.display().to_string(),
                line: 0,
                source,
            })?;
            writeln!(w, "{s}").map_err(io)
        };
        match self {
            Examples::Tagger(v) => v.iter().try_for_each(|e| line(serde_json::to_string(e)))?,
            Examples::Unit(v) => v.iter().try_for_each(|e| line(serde_json::to_string(e)))?,
            Examples::Modifier(v) => v.iter().try_for_each(|e| line(serde_json::to_string(e)))?,
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl(subtask: Subtask, path: &Path) -> Result<Examples, WorkflowError> {
        let name = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| WorkflowError::Io {
            path: name.clone(),
            source,
        })?;
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|source| WorkflowError::Io {
                path: name.clone(),
                source,
            })?;
        fn parse<T: serde::de::DeserializeOwned>(lines: &[String], name: &str) -> Result<Vec<T>, WorkflowError> {
            lines
                .iter()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    serde_json::from_str(l).map_err(|source| WorkflowError::Json {
                        path: name.to_string(),
                        line: i + 1,
                        source,
                    })
                })
                .collect()
        }
        Ok(match subtask {
            Subtask::Unit => Examples::Unit(parse(&lines, &name)?),
            Subtask::Modifier => Examples::Modifier(parse(&lines, &name)?),
            _ => Examples::Tagger(parse(&lines, &name)?),
        })
    }
}

pub fn build_examples(subtask: Subtask, corpus: &Corpus, prep: &Preparer) -> Result<(Examples, DatasetStats), WorkflowError> {
    Ok(match subtask {
        Subtask::Unit => {
            let (v, s) = unit_examples(corpus);
            (Examples::Unit(v), s)
        }
        Subtask::Modifier => {
            let (v, s) = modifier_examples(corpus, prep)?;
            (Examples::Modifier(v), s)
        }
        _ => {
            let variant = subtask.tagger_variant().expect("tagger subtask");
            let (v, s) = tagger_examples(corpus, variant, prep)?;
            (Examples::Tagger(v), s)
        }
    })
}

/// A trained model with its training log.
#[derive(Clone, Debug)]
pub enum Trained {
    Tagger(TaggerModel, TrainingLog),
    Unit(UnitDetectorModel, UnitTrainingLog),
    Modifier(ModifierModel, ModifierTrainingLog),
}

impl Trained {
    pub fn losses(&self) -> Vec<f64> {
        match self {
            Trained::Tagger(_, l) => l.losses(),
            Trained::Unit(_, l) => l.losses(),
            Trained::Modifier(_, l) => l.epochs.iter().map(|e| e.train_loss).collect(),
        }
    }

    /// Writes the checkpoint to `<run>/variant-<slot>/best/` and the
    /// training log beside it. Returns the checkpoint directory.
    pub fn save(&self, subtask: Subtask, run: &Path) -> Result<std::path::PathBuf, WorkflowError> {
        let dir = variant_dir(run, subtask.slot());
        let log_path = dir.parent().expect("variant dir").join("training_log.json");
        match self {
            Trained::Tagger(m, l) => {
                save_tagger(m, &dir)?;
                l.save(&log_path)?;
            }
            Trained::Unit(m, l) => {
                save_unit_detector(m, &dir)?;
                crate::tagheads::write_json(&log_path, l)?;
            }
            Trained::Modifier(m, l) => {
                save_modifier_model(m, &dir)?;
                crate::tagheads::write_json(&log_path, l)?;
            }
        }
        Ok(dir)
    }
}

/// Train one subtask. `vocab_size` sizes trainable encoders.
pub fn train_examples(
    subtask: Subtask,
    train: &Examples,
    dev: &Examples,
    settings: &TrainSettings,
    vocab_size: usize,
) -> Result<Trained, WorkflowError> {
    let wrong = |found: &Examples| WorkflowError::WrongExamples {
        subtask,
        found: found.kind(),
    };
    match (subtask.tagger_variant(), train, dev) {
        (Some(variant), Examples::Tagger(t), Examples::Tagger(d)) => {
            let encoder = settings.encoder.build(vocab_size, settings.tagger.max_len);
            let (m, l) = train_tagger(t, d, &settings.tagger, variant, encoder)?;
            Ok(Trained::Tagger(m, l))
        }
        (None, Examples::Unit(t), Examples::Unit(d)) if subtask == Subtask::Unit => {
            let (m, l) = train_unit_detector(t, d, &settings.unit)?;
            Ok(Trained::Unit(m, l))
        }
        (None, Examples::Modifier(t), Examples::Modifier(d)) if subtask == Subtask::Modifier => {
            let encoder = settings.encoder.build(vocab_size, settings.modifier.max_len);
            let (m, l) = train_modifier_classifier(t, d, &settings.modifier, encoder)?;
            Ok(Trained::Modifier(m, l))
        }
        (Some(_), Examples::Tagger(_), _) | (None, Examples::Unit(_) | Examples::Modifier(_), _) => Err(wrong(dev)),
        _ => Err(wrong(train)),
    }
}

/// Train every subtask and assemble a bundle. Property and qualifier_p
/// models are left out when the training data has no examples for them.
pub fn train_bundle(
    train: &Corpus,
    dev: &Corpus,
    tokenizer: BundleTokenizer,
    prep_splitter: &dyn crate::textprep::SentenceSplitter,
    settings: &TrainSettings,
) -> Result<(ModelBundle, Vec<(Subtask, Trained)>), WorkflowError> {
    use crate::textprep::SubwordTokenizer;
    let vocab = tokenizer.vocab_size();
    let mut trained = Vec::new();
    {
        let prep = Preparer {
            tokenizer: &tokenizer,
            splitter: prep_splitter,
            max_len: settings.tagger.max_len,
        };
        for subtask in Subtask::ALL {
            let mut prep = prep;
            if subtask == Subtask::Modifier {
                prep.max_len = settings.modifier.max_len;
            }
            let (t, _) = build_examples(subtask, train, &prep)?;
            let (d, _) = build_examples(subtask, dev, &prep)?;
            let optional = matches!(subtask, Subtask::Property | Subtask::QualifierP);
            if optional && t.is_empty() {
                continue;
            }
            trained.push((subtask, train_examples(subtask, &t, &d, settings, vocab)?));
        }
    }
    let tagger = |s: Subtask| {
        trained.iter().find_map(|(k, t)| match t {
            Trained::Tagger(m, _) if *k == s => Some(m.clone()),
            _ => None,
        })
    };
    let bundle = ModelBundle {
        quantity_tagger: tagger(Subtask::Quantity).expect("trained"),
        entity_tagger: tagger(Subtask::Entity).expect("trained"),
        property_tagger: tagger(Subtask::Property),
        qualifier_q_tagger: tagger(Subtask::QualifierQ).expect("trained"),
        qualifier_p_tagger: tagger(Subtask::QualifierP),
        unit_detector: trained
            .iter()
            .find_map(|(_, t)| match t {
                Trained::Unit(m, _) => Some(m.clone()),
                _ => None,
            })
            .expect("trained"),
        modifier_model: trained
            .iter()
            .find_map(|(_, t)| match t {
                Trained::Modifier(m, _) => Some(m.clone()),
                _ => None,
            })
            .expect("trained"),
        tokenizer,
    };
    Ok((bundle, trained))
}
