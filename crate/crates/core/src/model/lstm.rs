use super::LstmParams;
use crate::error::{Error, Result};
use crate::tensor::{axpy, axpy_weights, dot, sigmoid};

/// Activations of one forward step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Post-activation gates `[i | f | g | o]`, length `4h`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Gradient accumulators for one layer, laid out like [`LstmParams`].
pub struct LstmGrads<'a> {
    pub w: &'a mut Vec<f64>,
    pub u: &'a mut Vec<f64>,
    pub b: &'a mut Vec<f64>,
}

pub fn lstm_step(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>, LstmCache)> {
    let hd = p.hidden_dim();
    if x.len() != p.input_dim() || h_prev.len() != hd || c_prev.len() != hd {
        return Err(Error::Shape {
            lhs: (x.len(), h_prev.len()),
            rhs: (p.input_dim(), hd),
            context: "lstm_step (input len, state len) vs (input dim, hidden dim)",
        });
    }

    let bias = p.b.data();
    let mut gates: Vec<f64> = (0..4 * hd)
        .map(|k| dot(p.w.row(k), x) + dot(p.u.row(k), h_prev) + bias[k] as f64)
        .collect();
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if (2 * hd..3 * hd).contains(&k) {
            z.tanh()
        } else {
            sigmoid(*z)
        };
    }

    let (i, rest) = gates.split_at(hd);
    let (f, rest) = rest.split_at(hd);
    let (g, o) = rest.split_at(hd);
    let mut c = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    for j in 0..hd {
        c[j] = f[j] * c_prev[j] + i[j] * g[j];
        tanh_c[j] = c[j].tanh();
        h[j] = o[j] * tanh_c[j];
    }

    let cache = LstmCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        c: c.clone(),
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Backpropagate through one step.
///
/// `dh` and `dc` are the loss gradients with respect to this step's outputs.
/// Parameter gradients are accumulated into `grads`; the return value is
/// `(dx, dh_prev, dc_prev)`.
pub fn lstm_backward(
    dh: &[f64],
    dc: &[f64],
    cache: &LstmCache,
    p: &LstmParams,
    grads: &mut LstmGrads<'_>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = p.hidden_dim();
    let d = p.input_dim();
    let (i, rest) = cache.gates.split_at(hd);
    let (f, rest) = rest.split_at(hd);
    let (g, o) = rest.split_at(hd);

    let mut dz = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for j in 0..hd {
        let tc = cache.tanh_c[j];
        let dct = dc[j] + dh[j] * o[j] * (1.0 - tc * tc);
        dz[j] = dct * g[j] * i[j] * (1.0 - i[j]);
        dz[hd + j] = dct * cache.c_prev[j] * f[j] * (1.0 - f[j]);
        dz[2 * hd + j] = dct * i[j] * (1.0 - g[j] * g[j]);
        dz[3 * hd + j] = dh[j] * tc * o[j] * (1.0 - o[j]);
        dc_prev[j] = dct * f[j];
    }

    let mut dx = vec![0.0; d];
    let mut dh_prev = vec![0.0; hd];
    for (k, &dzk) in dz.iter().enumerate() {
        if dzk == 0.0 {
            continue;
        }
        axpy(&mut grads.w[k * d..(k + 1) * d], dzk, &cache.x);
        axpy(&mut grads.u[k * hd..(k + 1) * hd], dzk, &cache.h_prev);
        grads.b[k] += dzk;
        axpy_weights(&mut dx, dzk, p.w.row(k));
        axpy_weights(&mut dh_prev, dzk, p.u.row(k));
    }
    (dx, dh_prev, dc_prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(vals: [f32; 12]) -> LstmParams {
        // 1 input, 1 hidden: W, U, b each have one row per gate.
        LstmParams {
            w: Tensor2::from_vec(4, 1, vals[0..4].to_vec()).unwrap(),
            u: Tensor2::from_vec(4, 1, vals[4..8].to_vec()).unwrap(),
            b: Tensor2::from_vec(4, 1, vals[8..12].to_vec()).unwrap(),
        }
    }

    /// Independent scalar reference cell.
    fn scalar_cell(p: [f32; 12], x: f64, h: f64, c: f64) -> (f64, f64) {
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let pre = |k: usize| p[k] as f64 * x + p[4 + k] as f64 * h + p[8 + k] as f64;
        let (i, f, g, o) = (s(pre(0)), s(pre(1)), pre(2).tanh(), s(pre(3)));
        let c2 = f * c + i * g;
        (o * c2.tanh(), c2)
    }

    #[test]
    fn zero_params_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let (h, c, _) = lstm_step(&[0.0; 3], &[0.0; 2], &[0.0; 2], &p).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_params_carry_cell() {
        let p = LstmParams::zeros(1, 1);
        let (h, c, _) = lstm_step(&[0.0], &[0.0], &[1.0], &p).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!((h[0] - 0.5 * 0.5f64.tanh()).abs() < 1e-12);
        assert!((h[0] - 0.2311).abs() < 1e-4);
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let vals: [f32; 12] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let (x, h0, c0) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0));
            let (h, c, _) = lstm_step(&[x], &[h0], &[c0], &scalar_params(vals)).unwrap();
            let (rh, rc) = scalar_cell(vals, x, h0, c0);
            assert!((h[0] - rh).abs() < 1e-6 && (c[0] - rc).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = LstmParams::zeros(3, 2);
        assert!(matches!(
            lstm_step(&[0.0; 2], &[0.0; 2], &[0.0; 2], &p),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cell_growth_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = LstmParams::zeros(4, 6);
        for t in [&mut p.w, &mut p.u, &mut p.b] {
            for v in t.data_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
        }
        let (mut h, mut c) = (vec![0.0; 6], vec![0.0; 6]);
        for _ in 0..40 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (h2, c2, _) = lstm_step(&x, &h, &c, &p).unwrap();
            for j in 0..6 {
                assert!(c2[j].abs() <= c[j].abs() + 1.0 + 1e-12);
            }
            h = h2;
            c = c2;
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = LstmParams::zeros(3, 2);
        for t in [&mut p.w, &mut p.u, &mut p.b] {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let x = vec![0.3, -0.7, 0.2];
        let h0 = vec![0.1, -0.4];
        let c0 = vec![0.5, 0.9];
        // loss = sum(h) + 2 * sum(c)
        let f = |x: &[f64], h0: &[f64], c0: &[f64]| {
            let (h, c, _) = lstm_step(x, h0, c0, &p).unwrap();
            h.iter().sum::<f64>() + 2.0 * c.iter().sum::<f64>()
        };
        let (_, _, cache) = lstm_step(&x, &h0, &c0, &p).unwrap();
        let (mut gw, mut gu, mut gb) = (vec![0.0; 24], vec![0.0; 16], vec![0.0; 8]);
        let mut grads = LstmGrads { w: &mut gw, u: &mut gu, b: &mut gb };
        let (dx, dh0, dc0) = lstm_backward(&[1.0, 1.0], &[2.0, 2.0], &cache, &p, &mut grads);

        let eps = 1e-6;
        let check = |analytic: &[f64], which: usize| {
            for k in 0..analytic.len() {
                let mut args = [x.clone(), h0.clone(), c0.clone()];
                args[which][k] += eps;
                let up = f(&args[0], &args[1], &args[2]);
                args[which][k] -= 2.0 * eps;
                let down = f(&args[0], &args[1], &args[2]);
                let fd = (up - down) / (2.0 * eps);
                assert!((fd - analytic[k]).abs() < 1e-7, "arg {which}[{k}]: {fd} vs {}", analytic[k]);
            }
        };
        check(&dx, 0);
        check(&dh0, 1);
        check(&dc0, 2);
    }
}
