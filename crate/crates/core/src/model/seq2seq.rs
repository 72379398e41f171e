use super::lstm::{lstm_backward, lstm_step, LstmCache};
use super::{ModelGrads, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{axpy_weights, cross_entropy_row, dot, Tensor2};
use crate::text::{EOS, SOS};

/// Encoded source ids and framed target ids (`SOS ... EOS`) of one example.
pub type SeqPair<'a> = (&'a [u32], &'a [u32]);

fn embed(m: &ModelParams, id: u32) -> Result<Vec<f64>> {
    let v = m.hyper.vocab_size;
    if id as usize >= v {
        return Err(Error::Argument(format!("token id {id} out of range for vocabulary of {v}")));
    }
    Ok(m.embedding.row(id as usize).iter().map(|&x| x as f64).collect())
}

/// `W_out h + b_out` into `out`.
pub(crate) fn project(m: &ModelParams, h: &[f64], out: &mut [f64]) {
    let bias = m.b_out.data();
    for (k, o) in out.iter_mut().enumerate() {
        *o = dot(m.w_out.row(k), h) + bias[k] as f64;
    }
}

fn run_encoder(
    ids: &[u32],
    m: &ModelParams,
) -> Result<(Vec<f64>, Vec<f64>, Vec<LstmCache>)> {
    if ids.is_empty() {
        return Err(Error::Argument("source sequence is empty".into()));
    }
    let hd = m.hyper.hidden_dim;
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut caches = Vec::with_capacity(ids.len());
    for &id in ids {
        let x = embed(m, id)?;
        let (h2, c2, cache) = lstm_step(&x, &h, &c, &m.encoder)?;
        h = h2;
        c = c2;
        caches.push(cache);
    }
    Ok((h, c, caches))
}

/// Final encoder state for `ids`, starting from zeros.
pub fn encode_sequence(ids: &[u32], m: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, c, _) = run_encoder(ids, m)?;
    Ok((h, c))
}

fn check_target(target: &[u32]) -> Result<()> {
    if target.len() < 2 || target[0] != SOS || target[target.len() - 1] != EOS {
        return Err(Error::Argument(
            "target sequence must start with SOS and end with EOS".into(),
        ));
    }
    Ok(())
}

/// Decoder logits with ground-truth inputs: row `t` predicts `target[t + 1]`.
pub fn decode_teacher_forced(
    target: &[u32],
    init: (&[f64], &[f64]),
    m: &ModelParams,
) -> Result<Tensor2> {
    check_target(target)?;
    let v = m.hyper.vocab_size;
    let mut out = Tensor2::zeros(target.len() - 1, v);
    let (mut h, mut c) = (init.0.to_vec(), init.1.to_vec());
    let mut logits = vec![0.0; v];
    for (t, &id) in target[..target.len() - 1].iter().enumerate() {
        let x = embed(m, id)?;
        let (h2, c2, _) = lstm_step(&x, &h, &c, &m.decoder)?;
        h = h2;
        c = c2;
        project(m, &h, &mut logits);
        for (o, &l) in out.row_mut(t).iter_mut().zip(&logits) {
            *o = l as f32;
        }
    }
    Ok(out)
}

/// Summed negative log-likelihood of one target and its token count.
fn pair_nll(m: &ModelParams, source: &[u32], target: &[u32]) -> Result<(f64, usize)> {
    check_target(target)?;
    let (mut h, mut c, _) = run_encoder(source, m)?;
    let mut logits = vec![0.0; m.hyper.vocab_size];
    let mut nll = 0.0;
    for t in 0..target.len() - 1 {
        let x = embed(m, target[t])?;
        let (h2, c2, _) = lstm_step(&x, &h, &c, &m.decoder)?;
        h = h2;
        c = c2;
        project(m, &h, &mut logits);
        nll += cross_entropy_row(&mut logits, target_id(m, target[t + 1])?);
    }
    Ok((nll, target.len() - 1))
}

fn target_id(m: &ModelParams, id: u32) -> Result<usize> {
    if id as usize >= m.hyper.vocab_size {
        return Err(Error::Argument(format!("target id {id} out of range")));
    }
    Ok(id as usize)
}

/// Forward and backward pass for one example.
///
/// Each token's loss is weighted by `scale` before backpropagation, and the
/// resulting gradients are added into `grads`. Returns the unweighted summed
/// NLL.
pub fn accumulate_pair(
    m: &ModelParams,
    (source, target): SeqPair<'_>,
    scale: f64,
    grads: &mut ModelGrads,
) -> Result<f64> {
    check_target(target)?;
    let hd = m.hyper.hidden_dim;
    let d = m.hyper.embed_dim;
    let v = m.hyper.vocab_size;
    let (h_enc, c_enc, enc_caches) = run_encoder(source, m)?;

    let steps = target.len() - 1;
    let mut dec_caches = Vec::with_capacity(steps);
    let mut hiddens = Vec::with_capacity(steps);
    let mut dlogits = Vec::with_capacity(steps);
    let (mut h, mut c) = (h_enc, c_enc);
    let mut nll = 0.0;
    for t in 0..steps {
        let x = embed(m, target[t])?;
        let (h2, c2, cache) = lstm_step(&x, &h, &c, &m.decoder)?;
        let mut row = vec![0.0; v];
        project(m, &h2, &mut row);
        nll += cross_entropy_row(&mut row, target_id(m, target[t + 1])?);
        row.iter_mut().for_each(|g| *g *= scale);
        dlogits.push(row);
        hiddens.push(h2.clone());
        dec_caches.push(cache);
        h = h2;
        c = c2;
    }

    let mut dh = vec![0.0; hd];
    let mut dc = vec![0.0; hd];
    for t in (0..steps).rev() {
        let row = &dlogits[t];
        let hidden = &hiddens[t];
        {
            let gw = grads.slot_mut(ModelGrads::W_OUT);
            for (k, &g) in row.iter().enumerate() {
                for (slot, &hv) in gw[k * hd..(k + 1) * hd].iter_mut().zip(hidden) {
                    *slot += g * hv;
                }
            }
        }
        for (b, &g) in grads.slot_mut(ModelGrads::B_OUT).iter_mut().zip(row) {
            *b += g;
        }
        for (k, &g) in row.iter().enumerate() {
            axpy_weights(&mut dh, g, m.w_out.row(k));
        }

        let (dx, dh_prev, dc_prev) = {
            let mut lg = grads.lstm_mut(ModelGrads::DECODER);
            lstm_backward(&dh, &dc, &dec_caches[t], &m.decoder, &mut lg)
        };
        add_embedding_grad(grads, target[t], &dx, d);
        dh = dh_prev;
        dc = dc_prev;
    }

    for t in (0..source.len()).rev() {
        let (dx, dh_prev, dc_prev) = {
            let mut lg = grads.lstm_mut(ModelGrads::ENCODER);
            lstm_backward(&dh, &dc, &enc_caches[t], &m.encoder, &mut lg)
        };
        add_embedding_grad(grads, source[t], &dx, d);
        dh = dh_prev;
        dc = dc_prev;
    }
    Ok(nll)
}

fn add_embedding_grad(grads: &mut ModelGrads, id: u32, dx: &[f64], d: usize) {
    let row = &mut grads.slot_mut(ModelGrads::EMBEDDING)[id as usize * d..(id as usize + 1) * d];
    for (a, b) in row.iter_mut().zip(dx) {
        *a += b;
    }
}

fn token_count(pairs: &[SeqPair<'_>]) -> Result<usize> {
    let n: usize = pairs.iter().map(|(_, t)| t.len().saturating_sub(1)).sum();
    if n == 0 {
        return Err(Error::Argument("degenerate batch: no target tokens".into()));
    }
    Ok(n)
}

/// Token-mean cross-entropy over `pairs` and its gradient.
pub fn loss_and_grads(m: &ModelParams, pairs: &[SeqPair<'_>]) -> Result<(f64, ModelGrads)> {
    let n = token_count(pairs)?;
    let scale = 1.0 / n as f64;
    let mut grads = ModelGrads::zeros_like(m);
    let mut total = 0.0;
    for &pair in pairs {
        total += accumulate_pair(m, pair, scale, &mut grads)?;
    }
    Ok((total * scale, grads))
}

/// Token-mean cross-entropy over `pairs`.
pub fn loss(m: &ModelParams, pairs: &[SeqPair<'_>]) -> Result<f64> {
    let (total, n) = token_nll(m, pairs)?;
    Ok(total / n as f64)
}

/// Summed NLL and number of predicted tokens over `pairs`.
pub fn token_nll(m: &ModelParams, pairs: &[SeqPair<'_>]) -> Result<(f64, usize)> {
    token_count(pairs)?;
    let mut total = 0.0;
    let mut count = 0;
    for &(s, t) in pairs {
        let (nll, n) = pair_nll(m, s, t)?;
        total += nll;
        count += n;
    }
    Ok((total, count))
}
