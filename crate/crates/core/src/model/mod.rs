//! The encoder/decoder network.
//!
//! Embedding lookup feeds a single-layer encoder LSTM; its final `(h, c)`
//! seeds a single-layer decoder LSTM whose hidden states are projected to
//! vocabulary logits. There is no attention.

mod decode;
mod lstm;
mod seq2seq;

pub use decode::{
    entropy, greedy_decode, greedy_token, reply, sample_decode, sample_token,
    sampling_distribution, DecodeConfig, DecodeMode, DecodeSession,
};
pub use lstm::{lstm_backward, lstm_step, LstmCache, LstmGrads};
pub use seq2seq::{
    accumulate_pair, decode_teacher_forced, encode_sequence, loss, loss_and_grads, token_nll,
    SeqPair,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::Tensor2;
use crate::text::{Vocab, DEFAULT_MAX_SEQ_LEN};

pub const INIT_RANGE: f32 = 0.08;
pub const FORGET_BIAS: f32 = 1.0;

/// Parameter tensor names, in bundle and gradient order.
pub const PARAM_NAMES: [&str; 9] = [
    "E", "enc.W", "enc.U", "enc.b", "dec.W", "dec.U", "dec.b", "W_out", "b_out",
];

/// Weights of one LSTM layer. Gate row blocks are ordered input, forget,
/// cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h x d`
    pub w: Tensor2,
    /// `4h x h`
    pub u: Tensor2,
    /// `4h x 1`
    pub b: Tensor2,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            w: Tensor2::zeros(4 * hidden_dim, input_dim),
            u: Tensor2::zeros(4 * hidden_dim, hidden_dim),
            b: Tensor2::zeros(4 * hidden_dim, 1),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    fn check(&self, input_dim: usize, hidden_dim: usize, which: &'static str) -> Result<()> {
        let want = [
            (self.w.shape(), (4 * hidden_dim, input_dim)),
            (self.u.shape(), (4 * hidden_dim, hidden_dim)),
            (self.b.shape(), (4 * hidden_dim, 1)),
        ];
        for (got, expected) in want {
            if got != expected {
                return Err(Error::Shape {
                    lhs: got,
                    rhs: expected,
                    context: which,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    /// `V x d`
    pub embedding: Tensor2,
    pub encoder: LstmParams,
    pub decoder: LstmParams,
    /// `V x h`
    pub w_out: Tensor2,
    /// `V x 1`
    pub b_out: Tensor2,
}

impl ModelParams {
    pub fn zeros(hyper: Hyper) -> Self {
        let Hyper {
            vocab_size: v,
            embed_dim: d,
            hidden_dim: h,
            ..
        } = hyper;
        ModelParams {
            hyper,
            embedding: Tensor2::zeros(v, d),
            encoder: LstmParams::zeros(d, h),
            decoder: LstmParams::zeros(d, h),
            w_out: Tensor2::zeros(v, h),
            b_out: Tensor2::zeros(v, 1),
        }
    }

    pub fn tensors(&self) -> [&Tensor2; 9] {
        [
            &self.embedding,
            &self.encoder.w,
            &self.encoder.u,
            &self.encoder.b,
            &self.decoder.w,
            &self.decoder.u,
            &self.decoder.b,
            &self.w_out,
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor2; 9] {
        [
            &mut self.embedding,
            &mut self.encoder.w,
            &mut self.encoder.u,
            &mut self.encoder.b,
            &mut self.decoder.w,
            &mut self.decoder.u,
            &mut self.decoder.b,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Shape and finiteness check against `hyper`.
    pub fn validate(&self) -> Result<()> {
        let Hyper {
            vocab_size: v,
            embed_dim: d,
            hidden_dim: h,
            ..
        } = self.hyper;
        for (got, want, ctx) in [
            (self.embedding.shape(), (v, d), "embedding"),
            (self.w_out.shape(), (v, h), "output projection"),
            (self.b_out.shape(), (v, 1), "output bias"),
        ] {
            if got != want {
                return Err(Error::Shape {
                    lhs: got,
                    rhs: want,
                    context: ctx,
                });
            }
        }
        self.encoder.check(d, h, "encoder")?;
        self.decoder.check(d, h, "decoder")?;
        for (name, t) in PARAM_NAMES.iter().zip(self.tensors()) {
            if !t.is_finite() {
                return Err(Error::numeric(*name, "non-finite parameter"));
            }
        }
        Ok(())
    }
}

/// Fresh parameters: weights uniform in `[-0.08, 0.08]`, forget-gate biases
/// 1.0, other biases zero. Embedding rows covered by `glove` are copied from
/// it.
pub fn init_model(
    vocab: &Vocab,
    embed_dim: usize,
    hidden_dim: usize,
    seed: u64,
    glove: Option<&EmbeddingTable>,
) -> Result<ModelParams> {
    if embed_dim == 0 || hidden_dim == 0 {
        return Err(Error::Config("embedding and hidden sizes must be at least 1".into()));
    }
    if let Some(table) = glove {
        if table.dim != embed_dim {
            return Err(Error::Config(format!(
                "pretrained embeddings are {}-dimensional but the model uses {embed_dim}",
                table.dim
            )));
        }
    }
    let hyper = Hyper {
        vocab_size: vocab.len(),
        embed_dim,
        hidden_dim,
        max_seq_len: DEFAULT_MAX_SEQ_LEN,
    };
    let mut m = ModelParams::zeros(hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |t: &mut Tensor2| {
        for x in t.data_mut() {
            *x = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        }
    };
    fill(&mut m.embedding);
    fill(&mut m.encoder.w);
    fill(&mut m.encoder.u);
    fill(&mut m.decoder.w);
    fill(&mut m.decoder.u);
    fill(&mut m.w_out);
    for lstm in [&mut m.encoder, &mut m.decoder] {
        for k in hidden_dim..2 * hidden_dim {
            lstm.b.data_mut()[k] = FORGET_BIAS;
        }
    }
    if let Some(table) = glove {
        for (token, vector) in &table.vectors {
            if let Some(id) = vocab.id(token) {
                m.embedding.row_mut(id as usize).copy_from_slice(vector);
            }
        }
    }
    Ok(m)
}

/// Gradient buffers mirroring [`ModelParams`], one `f64` slot per tensor in
/// [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    slots: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl ModelGrads {
    pub const EMBEDDING: usize = 0;
    pub const ENCODER: usize = 1;
    pub const DECODER: usize = 4;
    pub const W_OUT: usize = 7;
    pub const B_OUT: usize = 8;

    pub fn zeros_like(m: &ModelParams) -> Self {
        let tensors = m.tensors();
        ModelGrads {
            slots: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            shapes: tensors.iter().map(|t| t.shape()).collect(),
        }
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.slots[i]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.slots[i]
    }

    pub fn shape(&self, i: usize) -> (usize, usize) {
        self.shapes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &[f64])> {
        PARAM_NAMES.iter().copied().zip(self.slots.iter().map(Vec::as_slice))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Vec<f64>)> {
        PARAM_NAMES.iter().copied().zip(self.slots.iter_mut())
    }

    /// Mutable views of the three tensors of one LSTM layer.
    pub(crate) fn lstm_mut(&mut self, base: usize) -> LstmGrads<'_> {
        let (_, rest) = self.slots.split_at_mut(base);
        let (w, rest) = rest.split_first_mut().expect("slot");
        let (u, rest) = rest.split_first_mut().expect("slot");
        let b = &mut rest[0];
        LstmGrads { w, u, b }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.slots.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}
