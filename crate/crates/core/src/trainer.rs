//! Teacher-forced mini-batch training with Adam and global-norm clipping,
//! plus the memorization and perplexity metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::export_model;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{accumulate_pair, token_nll, DecodeConfig, DecodeSession, ModelGrads, ModelParams, SeqPair, PARAM_NAMES};
use crate::tensor::Tensor2;
use crate::text::{normalize_tokenize, Role, Vocab, DEFAULT_MAX_SEQ_LEN, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Single-threaded, fixed-order gradient accumulation.
    pub deterministic: bool,
    /// Write a checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            epochs: 300,
            batch_size: 32,
            seed: 0,
            deterministic: false,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }
}

/// Right-padded mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Source ids (ending in EOS), padded with PAD to the batch maximum.
    pub source: Vec<Vec<u32>>,
    pub source_lens: Vec<usize>,
    /// Target ids (`SOS ... EOS`), padded with PAD.
    pub target: Vec<Vec<u32>>,
    /// One entry per predicted position `target[1..]`; true where the
    /// position holds a real token.
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    fn from_pairs(pairs: &[&(Vec<u32>, Vec<u32>)]) -> Self {
        let src_max = pairs.iter().map(|p| p.0.len()).max().unwrap_or(0);
        let tgt_max = pairs.iter().map(|p| p.1.len()).max().unwrap_or(0);
        let pad = |ids: &[u32], to: usize| {
            let mut v = ids.to_vec();
            v.resize(to, PAD);
            v
        };
        Batch {
            source: pairs.iter().map(|p| pad(&p.0, src_max)).collect(),
            source_lens: pairs.iter().map(|p| p.0.len()).collect(),
            target: pairs.iter().map(|p| pad(&p.1, tgt_max)).collect(),
            target_mask: pairs
                .iter()
                .map(|p| (1..tgt_max).map(|i| i < p.1.len()).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Unpadded source and target of example `i`.
    pub fn pair(&self, i: usize) -> SeqPair<'_> {
        let tgt_len = 1 + self.target_mask[i].iter().filter(|&&m| m).count();
        (&self.source[i][..self.source_lens[i]], &self.target[i][..tgt_len])
    }

    pub fn pairs(&self) -> Vec<SeqPair<'_>> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }

    pub fn token_count(&self) -> usize {
        self.target_mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Source and target ids for every pair of the corpus.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus
        .pairs
        .iter()
        .map(|p| {
            (
                vocab.encode_text(&p.question, Role::Source, max_len),
                vocab.encode_text(&p.answer, Role::Target, max_len),
            )
        })
        .collect()
}

fn batches_in_order(encoded: &[(Vec<u32>, Vec<u32>)], order: &[usize], batch_size: usize) -> Vec<Batch> {
    order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<_> = chunk.iter().map(|&i| &encoded[i]).collect();
            Batch::from_pairs(&members)
        })
        .collect()
}

/// Shuffle the corpus with `seed` and cut it into padded batches.
pub fn make_batches(corpus: &Corpus, vocab: &Vocab, batch_size: usize, seed: u64) -> Vec<Batch> {
    let encoded = encode_corpus(corpus, vocab, DEFAULT_MAX_SEQ_LEN);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batches_in_order(&encoded, &order, batch_size.max(1))
}

/// Scale all gradients by `min(1, clip_norm / ||g||)` over the global norm.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ModelGrads, clip_norm: f64) -> Result<f64> {
    if !(clip_norm > 0.0) {
        return Err(Error::Config("clip_norm must be positive".into()));
    }
    for (name, g) in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(name, "non-finite gradient"));
        }
    }
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor2>,
    pub v: Vec<Tensor2>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor2> = params
            .tensors()
            .iter()
            .map(|t| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is written unless every updated
/// value is finite.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);

    let mut staged = Vec::with_capacity(PARAM_NAMES.len());
    for (slot, (name, g)) in grads.iter().enumerate() {
        let p = params.tensors()[slot];
        if p.len() != g.len() || state.m[slot].shape() != p.shape() {
            return Err(Error::Shape {
                lhs: p.shape(),
                rhs: grads.shape(slot),
                context: "adam_step parameter vs gradient",
            });
        }
        let mut new_p = p.data().to_vec();
        let mut new_m = state.m[slot].data().to_vec();
        let mut new_v = state.v[slot].data().to_vec();
        for j in 0..g.len() {
            let m = cfg.beta1 * new_m[j] as f64 + (1.0 - cfg.beta1) * g[j];
            let v = cfg.beta2 * new_v[j] as f64 + (1.0 - cfg.beta2) * g[j] * g[j];
            let step = cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            let updated = new_p[j] as f64 - step;
            if !updated.is_finite() {
                return Err(Error::numeric(name, format!("non-finite update at index {j}")));
            }
            new_p[j] = updated as f32;
            new_m[j] = m as f32;
            new_v[j] = v as f32;
        }
        staged.push((new_p, new_m, new_v));
    }
    for (slot, (p, m, v)) in staged.into_iter().enumerate() {
        params.tensors_mut()[slot].data_mut().copy_from_slice(&p);
        state.m[slot].data_mut().copy_from_slice(&m);
        state.v[slot].data_mut().copy_from_slice(&v);
    }
    state.t = t;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Token-weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub memorization: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    /// Epochs `e` where the loss at `e + 19` exceeds the loss at `e`.
    pub rising_windows: Vec<usize>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

const LOSS_WINDOW: usize = 20;

fn rising_windows(losses: &[f64]) -> Vec<usize> {
    if losses.len() < LOSS_WINDOW {
        return Vec::new();
    }
    (0..=losses.len() - LOSS_WINDOW)
        .filter(|&e| losses[e + LOSS_WINDOW - 1] > losses[e])
        .collect()
}

fn batch_gradients(model: &ModelParams, batch: &Batch, parallel: bool) -> Result<(f64, ModelGrads)> {
    let tokens = batch.token_count();
    if tokens == 0 {
        return Err(Error::Argument("degenerate batch: no target tokens".into()));
    }
    let scale = 1.0 / tokens as f64;
    let pairs = batch.pairs();
    let (nll, grads) = if parallel {
        pairs
            .par_iter()
            .try_fold(
                || (0.0, ModelGrads::zeros_like(model)),
                |(nll, mut g), &pair| {
                    let n = accumulate_pair(model, pair, scale, &mut g)?;
                    Ok::<_, Error>((nll + n, g))
                },
            )
            .try_reduce(
                || (0.0, ModelGrads::zeros_like(model)),
                |(a, mut ga), (b, gb)| {
                    ga.add_assign(&gb);
                    Ok((a + b, ga))
                },
            )?
    } else {
        let mut g = ModelGrads::zeros_like(model);
        let mut nll = 0.0;
        for &pair in &pairs {
            nll += accumulate_pair(model, pair, scale, &mut g)?;
        }
        (nll, g)
    };
    Ok((nll * scale, grads))
}

fn write_checkpoint(model: &ModelParams, vocab: &Vocab, dir: &Path, epoch: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = format!("epoch_{epoch}.bundle");
    let path = dir.join(&name);
    export_model(model, vocab, &path)?;
    let latest = dir.join("latest");
    fs::write(&latest, &name).map_err(|e| Error::io(&latest, e))?;
    Ok(path)
}

/// Train `model` on `corpus`, returning the updated parameters.
///
/// When `checkpoint_dir` is given a bundle is written every
/// `cfg.checkpoint_every` epochs and after the final one. A non-finite loss
/// aborts training; checkpoints already on disk are left untouched.
pub fn train(
    corpus: &Corpus,
    vocab: &Vocab,
    mut model: ModelParams,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("cannot train on an empty corpus".into()));
    }
    if vocab.len() != model.hyper.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.hyper.vocab_size
        )));
    }

    let started = Instant::now();
    let encoded = encode_corpus(corpus, vocab, model.hyper.max_seq_len);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model);
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        wall_time_secs: 0.0,
        memorization: None,
        checkpoints: Vec::new(),
        rising_windows: Vec::new(),
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for batch in batches_in_order(&encoded, &order, cfg.batch_size) {
            let (loss, mut grads) = batch_gradients(&model, &batch, !cfg.deterministic)?;
            if !loss.is_finite() {
                let last = report
                    .checkpoints
                    .last()
                    .map_or("none".to_string(), |p| p.display().to_string());
                return Err(Error::numeric(
                    "loss",
                    format!("non-finite loss in epoch {epoch}; last good checkpoint: {last}"),
                ));
            }
            clip_gradients(&mut grads, cfg.clip_norm)?;
            adam_step(&mut model, &grads, &mut adam, cfg)?;
            weighted += loss * batch.token_count() as f64;
            tokens += batch.token_count();
        }
        let epoch_loss = weighted / tokens as f64;
        report.epoch_losses.push(epoch_loss);
        log::info!("epoch {epoch}/{}: loss {epoch_loss:.5}", cfg.epochs);

        if let Some(dir) = checkpoint_dir {
            if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
                report.checkpoints.push(write_checkpoint(&model, vocab, dir, epoch)?);
            }
        }
    }

    if cfg.epochs > 0 {
        report.memorization = Some(memorization_score(corpus, vocab, &model)?);
    }
    report.rising_windows = rising_windows(&report.epoch_losses);
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Fraction of pairs whose greedy reply reproduces the normalized answer
/// token for token.
pub fn memorization_score(corpus: &Corpus, vocab: &Vocab, model: &ModelParams) -> Result<f64> {
    if corpus.is_empty() {
        return Ok(0.0);
    }
    let max_len = model.hyper.max_seq_len;
    let cfg = DecodeConfig::greedy(max_len + 1);
    let mut hits = 0usize;
    for pair in &corpus.pairs {
        let source = vocab.encode_text(&pair.question, Role::Source, max_len);
        let expected = vocab.encode(&normalize_tokenize(&pair.answer), Role::Source, max_len);
        let produced = DecodeSession::new(model, &source)?.generate(&cfg)?;
        // expected ends in EOS, which generate() strips
        if produced[..] == expected[..expected.len() - 1] {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

/// `exp` of the mean per-token NLL of the answers under teacher forcing.
pub fn perplexity(corpus: &Corpus, vocab: &Vocab, model: &ModelParams) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Argument("perplexity of an empty corpus".into()));
    }
    let encoded = encode_corpus(corpus, vocab, model.hyper.max_seq_len);
    let pairs: Vec<SeqPair<'_>> = encoded.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let (nll, count) = token_nll(model, &pairs)?;
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ExchangePair;
    use crate::model::{init_model, Hyper};
    use crate::text::{EOS, SOS};

    fn corpus(pairs: &[(&str, &str)]) -> Corpus {
        Corpus::new(pairs.iter().map(|(q, a)| ExchangePair::new(*q, *a)).collect(), "t")
    }

    #[test]
    fn single_pair_batch_is_unpadded() {
        let c = corpus(&[("who are you?", "i am your father!")]);
        let v = Vocab::build(&c, 1).unwrap();
        let batches = make_batches(&c, &v, 4, 0);
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert!(!b.source[0].contains(&PAD) && !b.target[0].contains(&PAD));
        assert!(b.target_mask[0].iter().all(|&m| m));
    }

    #[test]
    fn padding_and_mask_counts() {
        let c = corpus(&[("q", "a b"), ("r", "a b c d")]);
        let v = Vocab::build(&c, 1).unwrap();
        let b = &make_batches(&c, &v, 2, 3)[0];
        let mut sums: Vec<usize> = b.target_mask.iter().map(|m| m.iter().filter(|&&x| x).count()).collect();
        sums.sort();
        assert_eq!(sums, vec![3, 5]);
        let short = b.target.iter().find(|t| t.ends_with(&[PAD, PAD])).expect("padded row");
        assert_eq!(short.len(), 6);
        assert_eq!(short.iter().filter(|&&t| t == PAD).count(), 2);
        for i in 0..2 {
            let (s, t) = b.pair(i);
            assert_eq!(*s.last().unwrap(), EOS);
            assert_eq!((t[0], *t.last().unwrap()), (SOS, EOS));
        }
    }

    #[test]
    fn batch_order_follows_seed() {
        let c = corpus(&[("a", "b"), ("c", "d"), ("e", "f"), ("g", "h"), ("i", "j")]);
        let v = Vocab::build(&c, 1).unwrap();
        assert_eq!(make_batches(&c, &v, 2, 9), make_batches(&c, &v, 2, 9));
    }

    fn grads_with(values: &[f64]) -> ModelGrads {
        let hyper = Hyper { vocab_size: 4, embed_dim: 1, hidden_dim: 1, max_seq_len: 5 };
        let mut g = ModelGrads::zeros_like(&ModelParams::zeros(hyper));
        g.slot_mut(ModelGrads::EMBEDDING).copy_from_slice(values);
        g
    }

    #[test]
    fn clipping_scales_to_norm() {
        let mut g = grads_with(&[6.0, 8.0, 0.0, 0.0]);
        let pre = clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(pre, 10.0);
        assert_eq!(g.slot(0), &[3.0, 4.0, 0.0, 0.0]);
        assert!((g.global_norm() - 5.0).abs() < 1e-5);

        let mut g = grads_with(&[0.0, 3.0, 0.0, 0.0]);
        clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(g.slot(0), &[0.0, 3.0, 0.0, 0.0]);

        let mut g = grads_with(&[f64::NAN, 0.0, 0.0, 0.0]);
        let err = clip_gradients(&mut g, 5.0).unwrap_err();
        assert!(err.to_string().contains("E"));
    }

    fn scalar_model(p: f32) -> ModelParams {
        let hyper = Hyper { vocab_size: 4, embed_dim: 1, hidden_dim: 1, max_seq_len: 5 };
        let mut m = ModelParams::zeros(hyper);
        m.embedding.data_mut()[0] = p;
        m
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = scalar_model(0.0);
        let mut state = AdamState::new(&m);
        let cfg = TrainConfig { lr: 0.1, ..Default::default() };
        adam_step(&mut m, &grads_with(&[1.0, 0.0, 0.0, 0.0]), &mut state, &cfg).unwrap();
        assert!((m.embedding.data()[0] as f64 + 0.1).abs() < 1e-6);
        assert_eq!(state.t, 1);
        // zero gradients leave the rest where they were
        assert_eq!(&m.embedding.data()[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut m = scalar_model(0.25);
        let before = m.clone();
        let mut state = AdamState::new(&m);
        let cfg = TrainConfig { lr: 0.0, ..Default::default() };
        adam_step(&mut m, &grads_with(&[3.0, -2.0, 1.0, 0.5]), &mut state, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn adam_rejects_non_finite_update() {
        let mut m = scalar_model(0.25);
        let before = m.clone();
        let mut state = AdamState::new(&m);
        let cfg = TrainConfig::default();
        let err = adam_step(&mut m, &grads_with(&[f64::INFINITY, 0.0, 0.0, 0.0]), &mut state, &cfg);
        assert!(matches!(err, Err(Error::Numeric { .. })));
        assert_eq!(m, before);
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let c = corpus(&[("a", "b")]);
        let v = Vocab::build(&c, 1).unwrap();
        let m = init_model(&v, 3, 4, 1, None).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, report) = train(&c, &v, m.clone(), &cfg, None).unwrap();
        assert_eq!(out, m);
        assert!(report.epoch_losses.is_empty() && report.checkpoints.is_empty());
        assert_eq!(report.memorization, None);
    }

    #[test]
    fn parallel_and_sequential_gradients_agree() {
        let c = corpus(&[("a b", "c d"), ("e", "f g h"), ("i j k", "l")]);
        let v = Vocab::build(&c, 1).unwrap();
        let m = init_model(&v, 3, 4, 1, None).unwrap();
        let b = &make_batches(&c, &v, 3, 0)[0];
        let (l1, g1) = batch_gradients(&m, b, false).unwrap();
        let (l2, g2) = batch_gradients(&m, b, true).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conflicting_answers_cannot_all_match() {
        let c = corpus(&[("same question", "first answer"), ("same question", "second answer")]);
        let v = Vocab::build(&c, 1).unwrap();
        let m = init_model(&v, 3, 4, 1, None).unwrap();
        let cfg = TrainConfig { epochs: 60, lr: 0.05, batch_size: 2, deterministic: true, ..Default::default() };
        let (m, _) = train(&c, &v, m, &cfg, None).unwrap();
        assert!(memorization_score(&c, &v, &m).unwrap() < 1.0);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let c = corpus(&[("a b", "c d e"), ("f", "g")]);
        let v = Vocab::build(&c, 1).unwrap();
        let mut m = init_model(&v, 3, 4, 1, None).unwrap();
        m.w_out = Tensor2::zeros(v.len(), 4);
        let ppl = perplexity(&c, &v, &m).unwrap();
        assert!((ppl - v.len() as f64).abs() / (v.len() as f64) < 1e-4);
    }

    #[test]
    fn rising_window_detection() {
        let mut losses: Vec<f64> = (0..25).map(|i| 1.0 / (i + 1) as f64).collect();
        assert!(rising_windows(&losses).is_empty());
        losses[24] = 5.0;
        assert_eq!(rising_windows(&losses), vec![5]);
    }
}
