//! Question/answer corpora, the synthetic sarcasm corpus generator, and the
//! GloVe text-format embedding reader.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{normalize_tokenize, Vocab, SPECIAL_TOKENS};

const FRAMES: &str = include_str!("../data/frames.tsv");
const TOPICS: &str = include_str!("../data/topics.tsv");
const POSITIVE_VERBS: &str = include_str!("../data/positive_verbs.txt");
const FILLERS: &str = include_str!("../data/fillers.jsonl");
const SAMPLES: &str = include_str!("../data/samples.jsonl");

/// One question and the reply the bot should learn for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangePair {
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
}

impl ExchangePair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        ExchangePair {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<ExchangePair>,
    pub source_tag: String,
}

impl Corpus {
    pub fn new(pairs: Vec<ExchangePair>, source_tag: impl Into<String>) -> Self {
        Corpus {
            pairs,
            source_tag: source_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Any malformed line fails the whole load.
    #[default]
    Strict,
    /// Malformed lines are logged and skipped.
    Lenient,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    load_corpus_with(path, LoadMode::Strict)
}

pub fn load_corpus_with(path: impl AsRef<Path>, mode: LoadMode) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_pair(&line) {
            Ok(pair) => pairs.push(pair),
            Err(msg) => bad.push((line_no, msg)),
        }
    }

    if !bad.is_empty() {
        match mode {
            LoadMode::Strict => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    lines: bad,
                })
            }
            LoadMode::Lenient => {
                for (n, msg) in &bad {
                    log::warn!("{}:{n}: skipped: {msg}", path.display());
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Argument(format!("empty corpus: {}", path.display())));
    }
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Corpus::new(pairs, tag))
}

fn parse_pair(line: &str) -> std::result::Result<ExchangePair, String> {
    let pair: ExchangePair = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if normalize_tokenize(&pair.question).is_empty() {
        return Err("question is empty".into());
    }
    if normalize_tokenize(&pair.answer).is_empty() {
        return Err("answer is empty".into());
    }
    Ok(pair)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for pair in &corpus.pairs {
        let line = serde_json::to_string(pair).expect("pair serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The exchanges transcribed from the published sample conversations.
pub fn bundled_samples() -> Corpus {
    let pairs = SAMPLES
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled samples are valid"))
        .collect();
    Corpus::new(pairs, "samples")
}

/// Question frame with a `{}` slot and the positive verb its replies use.
#[derive(Debug, Clone)]
struct Frame {
    question: &'static str,
    verb: &'static str,
}

#[derive(Debug, Clone)]
struct Topic {
    name: &'static str,
    situation: &'static str,
}

fn frames() -> Vec<Frame> {
    FRAMES
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(question, verb)| Frame { question, verb })
        .collect()
}

fn topics() -> Vec<Topic> {
    TOPICS
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(name, situation)| Topic { name, situation })
        .collect()
}

fn fillers() -> Vec<ExchangePair> {
    FILLERS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled fillers are valid"))
        .collect()
}

/// Positive-sentiment openers of sarcastic replies.
pub fn positive_verbs() -> Vec<&'static str> {
    POSITIVE_VERBS.lines().filter(|l| !l.is_empty()).collect()
}

/// Negative situations the positive openers are paired with.
pub fn negative_situations() -> Vec<&'static str> {
    topics().into_iter().map(|t| t.situation).collect()
}

/// Generate a corpus of sentiment-contrast replies ("i love being ignored")
/// mixed with a quarter of plain humorous or emotional exchanges.
///
/// Each question determines its reply: the frame fixes the opener and the
/// topic fixes the negative situation, so the corpus never holds one
/// question with two answers.
pub fn generate_sarcasm_corpus(n_pairs: usize, seed: u64) -> Result<Corpus> {
    if n_pairs < 1 {
        return Err(Error::Argument("n_pairs must be at least 1".into()));
    }
    let frames = frames();
    let topics = topics();
    let fillers = fillers();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_fillers = n_pairs / 4;
    let mut is_filler: Vec<bool> = (0..n_pairs).map(|i| i < n_fillers).collect();
    is_filler.shuffle(&mut rng);

    let pairs = is_filler
        .into_iter()
        .map(|filler| {
            if filler {
                fillers[rng.gen_range(0..fillers.len())].clone()
            } else {
                let frame = &frames[rng.gen_range(0..frames.len())];
                let topic = &topics[rng.gen_range(0..topics.len())];
                ExchangePair::new(
                    frame.question.replace("{}", topic.name),
                    format!("{} {}", frame.verb, topic.situation),
                )
            }
        })
        .collect();
    Ok(Corpus::new(pairs, format!("sarcasm-gen-{seed}")))
}

/// Pretrained vectors restricted to a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f32>>,
}

/// Read GloVe text vectors for the tokens of `vocab`.
///
/// Returns the table and the fraction of non-special vocabulary tokens it
/// covers. Every line must carry exactly `embed_dim` components, whether or
/// not its token is in the vocabulary.
pub fn load_glove(
    path: impl AsRef<Path>,
    vocab: &Vocab,
    embed_dim: usize,
) -> Result<(EmbeddingTable, f64)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vectors = HashMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values = fields
            .map(|f| f.parse::<f32>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| {
                Error::Format(format!(
                    "{} line {line_no}: unparsable or non-finite component",
                    path.display()
                ))
            })?;
        if values.len() != embed_dim {
            return Err(Error::Format(format!(
                "{} line {line_no}: expected {embed_dim} components, found {}",
                path.display(),
                values.len()
            )));
        }
        if vocab.id(token).is_some() && !SPECIAL_TOKENS.contains(&token) {
            vectors.insert(token.to_string(), values);
        }
    }
    let non_special = vocab.len() - SPECIAL_TOKENS.len();
    let coverage = if non_special == 0 {
        0.0
    } else {
        vectors.len() as f64 / non_special as f64
    };
    Ok((
        EmbeddingTable {
            dim: embed_dim,
            vectors,
        },
        coverage,
    ))
}
