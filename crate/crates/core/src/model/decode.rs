use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::lstm_step;
use super::seq2seq::{encode_sequence, project};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::text::{Role, Vocab, EOS, PAD, SOS, DEFAULT_MAX_SEQ_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            max_len: DEFAULT_MAX_SEQ_LEN,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            max_len,
            ..Default::default()
        }
    }

    pub fn sample(temperature: f64, max_len: usize, seed: u64) -> Self {
        DecodeConfig {
            mode: DecodeMode::Sample,
            temperature,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be a positive number, got {}",
                self.temperature
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Never generated: padding and the start marker.
#[inline]
fn is_masked(id: usize) -> bool {
    id == PAD as usize || id == SOS as usize
}

/// Highest-scoring generatable token; ties go to the lowest id.
pub fn greedy_token(logits: &[f64]) -> u32 {
    let mut best = EOS as usize;
    for (id, &l) in logits.iter().enumerate() {
        if !is_masked(id) && l > logits[best] {
            best = id;
        }
    }
    best as u32
}

/// `softmax(logits / temperature)` with PAD and SOS forced to zero.
pub fn sampling_distribution(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    if logits.len() <= SOS as usize + 1 {
        return Err(Error::Argument("no generatable tokens".into()));
    }
    let max = logits
        .iter()
        .enumerate()
        .filter(|(id, _)| !is_masked(*id))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(id, &l)| {
            if is_masked(id) {
                0.0
            } else {
                ((l - max) / temperature).exp()
            }
        })
        .collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    Ok(p)
}

pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<u32> {
    let p = sampling_distribution(logits, temperature)?;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = EOS as usize;
    for (id, &pi) in p.iter().enumerate() {
        if pi <= 0.0 {
            continue;
        }
        cum += pi;
        last = id;
        if u < cum {
            return Ok(id as u32);
        }
    }
    // cumulative rounding left u just above the total
    Ok(last as u32)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Incremental decoder state conditioned on one encoded source.
pub struct DecodeSession<'m> {
    model: &'m ModelParams,
    h: Vec<f64>,
    c: Vec<f64>,
    logits: Vec<f64>,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m ModelParams, source: &[u32]) -> Result<Self> {
        let (h, c) = encode_sequence(source, model)?;
        Ok(DecodeSession {
            model,
            h,
            c,
            logits: vec![0.0; model.hyper.vocab_size],
        })
    }

    /// Feed `token` to the decoder and return the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<&[f64]> {
        let m = self.model;
        if token as usize >= m.hyper.vocab_size {
            return Err(Error::Argument(format!("token id {token} out of range")));
        }
        let x: Vec<f64> = m.embedding.row(token as usize).iter().map(|&v| v as f64).collect();
        let (h, c, _) = lstm_step(&x, &self.h, &self.c, &m.decoder)?;
        self.h = h;
        self.c = c;
        project(m, &self.h, &mut self.logits);
        Ok(&self.logits)
    }

    /// Run the feedback loop from SOS until EOS or `cfg.max_len` tokens.
    /// The returned ids exclude SOS and EOS.
    pub fn generate(mut self, cfg: &DecodeConfig) -> Result<Vec<u32>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut out = Vec::new();
        let mut token = SOS;
        for _ in 0..cfg.max_len {
            let logits = self.step(token)?;
            token = match cfg.mode {
                DecodeMode::Greedy => greedy_token(logits),
                DecodeMode::Sample => sample_token(logits, cfg.temperature, &mut rng)?,
            };
            if token == EOS {
                break;
            }
            out.push(token);
        }
        Ok(out)
    }
}

fn decode_with(question: &str, m: &ModelParams, vocab: &Vocab, cfg: &DecodeConfig) -> Result<String> {
    if vocab.len() != m.hyper.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            m.hyper.vocab_size
        )));
    }
    let source = vocab.encode_text(question, Role::Source, m.hyper.max_seq_len);
    let ids = DecodeSession::new(m, &source)?.generate(cfg)?;
    vocab.decode(&ids)
}

/// Reply with the most likely token at every step.
pub fn greedy_decode(question: &str, m: &ModelParams, vocab: &Vocab, cfg: &DecodeConfig) -> Result<String> {
    let cfg = DecodeConfig {
        mode: DecodeMode::Greedy,
        ..*cfg
    };
    decode_with(question, m, vocab, &cfg)
}

/// Reply by sampling each token from the temperature-scaled distribution.
pub fn sample_decode(question: &str, m: &ModelParams, vocab: &Vocab, cfg: &DecodeConfig) -> Result<String> {
    let cfg = DecodeConfig {
        mode: DecodeMode::Sample,
        ..*cfg
    };
    decode_with(question, m, vocab, &cfg)
}

pub fn reply(question: &str, m: &ModelParams, vocab: &Vocab, cfg: &DecodeConfig) -> Result<String> {
    decode_with(question, m, vocab, cfg)
}
