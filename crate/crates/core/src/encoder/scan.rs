//! Selective scan: step-by-step recurrence (reference path) and the
//! equivalent attention-matrix form used for training.
//!
//! The recurrence is h_t = exp(delta_t * A) .* h_{t-1} + delta_t * B_t u_t^T,
//! y_t = C_t^T h_t, with diagonal A < 0 shared across channels and a scalar
//! delta per token. Unrolling gives
//!   y_t = sum_{i<=t} (C_t .* w_t) . (B_i ./ w_i) * delta_i u_i,
//! w_t = exp(A * cumsum(delta)_t, so the whole sequence output is
//! [(Q .* w)(K ./ w)^T .* M] V with Q = C, K = B, V = delta .* u and M the
//! lower-triangular mask.

use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::scalar::{Dtype, Scalar};
use crate::tensor::tape::{Tape, TensorId};

/// Reference recurrence over plain arrays. Independent of the tape path;
/// the equivalence between the two is this module's central test surface.
///
/// `u`: [T x D] tokens, `delta`: [T] positive steps, `a`: [N] negative
/// diagonal, `b`/`c`: [T x N] input-dependent projections.
pub fn selective_scan_ref<E: Scalar>(
    u: &Array<E>,
    delta: &[E],
    a: &[E],
    b: &Array<E>,
    c: &Array<E>,
) -> Result<Array<E>> {
    let (t_len, d) = u.dims2()?;
    let n = a.len();
    if delta.len() != t_len || b.dims2()? != (t_len, n) || c.dims2()? != (t_len, n) {
        return Err(Error::shape("selective_scan_ref operand shapes disagree"));
    }
    if delta.iter().any(|&x| x <= E::zero()) {
        return Err(Error::domain("delta must be strictly positive"));
    }
    let mut h = vec![E::zero(); n * d]; // [N x D]
    let mut y = vec![E::zero(); t_len * d];
    for t in 0..t_len {
        let dt = delta[t];
        for ni in 0..n {
            let decay = (dt * a[ni]).exp();
            let bn = b.at2(t, ni) * dt;
            for di in 0..d {
                h[ni * d + di] = decay * h[ni * d + di] + bn * u.at2(t, di);
            }
        }
        for di in 0..d {
            let mut acc = E::zero();
            for ni in 0..n {
                acc = acc + c.at2(t, ni) * h[ni * d + di];
            }
            y[t * d + di] = acc;
        }
    }
    Array::new(vec![t_len, d], y)
}

/// Tape-recorded attention form of the scan.
pub struct ScanOutput<E: Scalar> {
    /// [T x D] sequence output.
    pub y: TensorId,
    /// [T x T] masked attention matrix (before applying V).
    pub attn: TensorId,
    /// Value snapshot of the plain QK^T masked matrix, for the map variant.
    pub qk_attn_value: Array<E>,
}

fn log_range_limit<E: Scalar>() -> f64 {
    match E::DTYPE {
        Dtype::Real32 => 80.0,
        Dtype::Real64 => 690.0,
    }
}

/// Y = [(Q .* w)(K ./ w)^T .* M] V on the tape, with h_a = 0.
///
/// w is accumulated in log space and re-centered around the sequence
/// midpoint before exponentiation; the shift cancels in the Q/K ratio so
/// the result is algebraically unchanged while halving the exponent range.
pub fn attention_scan<E: Scalar>(
    tape: &Tape<E>,
    u: TensorId,
    delta_col: TensorId,
    a_row: TensorId,
    b_mat: TensorId,
    c_mat: TensorId,
) -> Result<ScanOutput<E>> {
    let (t_len, _d) = tape.value(u).dims2()?;
    {
        let dv = tape.value(delta_col);
        if dv.dims2()?.1 != 1 {
            return Err(Error::shape("delta must be a [T x 1] column"));
        }
        if dv.data().iter().any(|&x| x <= E::zero()) {
            return Err(Error::domain("delta must be strictly positive"));
        }
    }

    let s = tape.cumsum_rows(delta_col)?; // [T x 1]
    let logw_raw = tape.matmul(s, a_row)?; // [T x N]

    // midpoint shift: c = A * (s_1 + s_T) / 2
    let s_ends = tape.gather_rows(s, &[0, t_len - 1])?;
    let s_mid = tape.mean_axis(s_ends, 0)?; // [1]
    let s_mid = tape.reshape(s_mid, vec![1, 1])?;
    let shift = tape.matmul(s_mid, a_row)?; // [1 x N]
    let shift_row = {
        let n = tape.value(shift).numel();
        tape.reshape(shift, vec![n])?
    };
    let neg_shift = tape.neg(shift_row)?;
    let logw = tape.add_row(logw_raw, neg_shift)?;

    let max_abs = tape
        .value(logw)
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.f64().abs()));
    if max_abs > log_range_limit::<E>() {
        return Err(Error::NumericalRange(format!(
            "scan weight exponent {max_abs:.1} exceeds representable range"
        )));
    }

    let w = tape.exp(logw)?;
    let neg_logw = tape.neg(logw)?;
    let w_inv = tape.exp(neg_logw)?;

    let qw = tape.mul(c_mat, w)?;
    let k_over_w = tape.mul(b_mat, w_inv)?;
    let attn_raw = tape.matmul(qw, tape.transpose(k_over_w)?)?;
    let mask = tape.leaf(tril_mask::<E>(t_len))?;
    let attn = tape.mul(attn_raw, mask)?;

    // plain QK^T variant, values only
    let qk_attn_value = {
        let q = tape.value(c_mat);
        let k = tape.value(b_mat);
        let mut m = q.matmul(&k.transpose2()?)?;
        for i in 0..t_len {
            for j in (i + 1)..t_len {
                m.set2(i, j, E::zero());
            }
        }
        m
    };

    let delta_vec = tape.reshape(delta_col, vec![t_len])?;
    let v = tape.mul_col(u, delta_vec)?;
    let y = tape.matmul(attn, v)?;

    Ok(ScanOutput {
        y,
        attn,
        qk_attn_value,
    })
}

pub fn tril_mask<E: Scalar>(t_len: usize) -> Array<E> {
    let mut m = Array::zeros(&[t_len, t_len]);
    for i in 0..t_len {
        for j in 0..=i {
            m.set2(i, j, E::one());
        }
    }
    m
}

/// Token orderings for the 2-d multi-direction scan over a gh x gw grid.
/// Direction 0: row-major forward; 1: row-major reverse; 2: column-major
/// forward; 3: column-major reverse.
pub fn scan_permutation(direction: usize, gh: usize, gw: usize) -> Vec<usize> {
    match direction {
        0 => (0..gh * gw).collect(),
        1 => (0..gh * gw).rev().collect(),
        2 => {
            let mut p = Vec::with_capacity(gh * gw);
            for j in 0..gw {
                for i in 0..gh {
                    p.push(i * gw + j);
                }
            }
            p
        }
        3 => {
            let mut p = scan_permutation(2, gh, gw);
            p.reverse();
            p
        }
        _ => panic!("invalid scan direction {direction}"),
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        let n: usize = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run_attention_form(
        u: &Array<f64>,
        delta: &[f64],
        a: &[f64],
        b: &Array<f64>,
        c: &Array<f64>,
    ) -> Array<f64> {
        let tape = Tape::new();
        let t_len = delta.len();
        let uid = tape.leaf(u.clone()).unwrap();
        let did = tape
            .leaf(Array::new(vec![t_len, 1], delta.to_vec()).unwrap())
            .unwrap();
        let aid = tape
            .leaf(Array::new(vec![1, a.len()], a.to_vec()).unwrap())
            .unwrap();
        let bid = tape.leaf(b.clone()).unwrap();
        let cid = tape.leaf(c.clone()).unwrap();
        let out = attention_scan(&tape, uid, did, aid, bid, cid).unwrap();
        tape.value(out.y)
    }

    #[test]
    fn single_step_matches_closed_form() {
        // T = 1: y_1 = C_1 . (delta_1 B_1 u_1)
        let u = Array::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let delta = [0.7];
        let a = [-1.0, -2.0];
        let b = Array::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let c = Array::new(vec![1, 2], vec![1.1, 0.9]).unwrap();
        let y = selective_scan_ref(&u, &delta, &a, &b, &c).unwrap();
        let coeff: f64 = 0.7 * (1.1 * 0.3 + 0.9 * (-0.4));
        for (got, want) in y.data().iter().zip(u.data().iter().map(|&x| coeff * x)) {
            assert!((got - want).abs() < 1e-12);
        }
        let y2 = run_attention_form(&u, &delta, &a, &b, &c);
        for (p, q) in y.data().iter().zip(y2.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decay_limit_is_pure_accumulation() {
        // A = 0 makes exp terms 1: h_T = sum delta_i B_i u_i
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t_len = 5;
        let u = rand_arr(&mut rng, &[t_len, 2]);
        let delta: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.1..0.5)).collect();
        let a = [0.0, 0.0];
        let b = rand_arr(&mut rng, &[t_len, 2]);
        let c = rand_arr(&mut rng, &[t_len, 2]);
        let y = selective_scan_ref(&u, &delta, &a, &b, &c).unwrap();
        // final output row equals C_T . (sum_i delta_i B_i u_i^T)
        let mut h = vec![0.0; 2 * 2];
        for t in 0..t_len {
            for n in 0..2 {
                for d in 0..2 {
                    h[n * 2 + d] += delta[t] * b.at2(t, n) * u.at2(t, d);
                }
            }
        }
        for d in 0..2 {
            let want: f64 = (0..2).map(|n| c.at2(t_len - 1, n) * h[n * 2 + d]).sum();
            assert!((y.at2(t_len - 1, d) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_form_matches_recurrence_t16() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let t_len = 16;
            let n = 4;
            let d = 3;
            let u = rand_arr(&mut rng, &[t_len, d]);
            let delta: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.01..0.6)).collect();
            let a: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.2..2.0)).collect();
            let b = rand_arr(&mut rng, &[t_len, n]);
            let c = rand_arr(&mut rng, &[t_len, n]);
            let y_rec = selective_scan_ref(&u, &delta, &a, &b, &c).unwrap();
            let y_attn = run_attention_form(&u, &delta, &a, &b, &c);
            for (p, q) in y_rec.data().iter().zip(y_attn.data()) {
                assert!((p - q).abs() < 1e-10, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn attention_matrix_is_strictly_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t_len = 8;
        let tape = Tape::new();
        let u = tape.leaf(rand_arr(&mut rng, &[t_len, 2])).unwrap();
        let delta = tape
            .leaf(Array::new(vec![t_len, 1], vec![0.3; t_len]).unwrap())
            .unwrap();
        let a = tape.leaf(Array::new(vec![1, 2], vec![-1.0, -0.5]).unwrap()).unwrap();
        let b = tape.leaf(rand_arr(&mut rng, &[t_len, 2])).unwrap();
        let c = tape.leaf(rand_arr(&mut rng, &[t_len, 2])).unwrap();
        let out = attention_scan(&tape, u, delta, a, b, c).unwrap();
        let attn = tape.value(out.attn);
        for i in 0..t_len {
            for j in (i + 1)..t_len {
                assert_eq!(attn.at2(i, j), 0.0);
            }
            assert!(out.qk_attn_value.at2(i, i.min(t_len - 1)).is_finite());
        }
    }

    #[test]
    fn state_stays_bounded_over_long_sequences() {
        // delta > 0, A < 0: per-step decay <= 1, so the state cannot blow up
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t_len = 256;
        let n = 4;
        let d = 2;
        let u = rand_arr(&mut rng, &[t_len, d]);
        let delta: Vec<f64> = (0..t_len).map(|_| rng.gen_range(0.01..1.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.1..3.0)).collect();
        let b = rand_arr(&mut rng, &[t_len, n]);
        let c = rand_arr(&mut rng, &[t_len, n]);
        let y = selective_scan_ref(&u, &delta, &a, &b, &c).unwrap();
        let bound: f64 = delta
            .iter()
            .enumerate()
            .map(|(t, dt)| {
                let bnorm: f64 = (0..n).map(|ni| b.at2(t, ni).abs()).sum();
                let unorm: f64 = (0..d).map(|di| u.at2(t, di).abs()).sum();
                dt * bnorm * unorm
            })
            .sum();
        let cmax = (0..t_len)
            .flat_map(|t| (0..n).map(move |ni| (t, ni)))
            .map(|(t, ni)| c.at2(t, ni).abs())
            .fold(0.0f64, f64::max);
        for &v in y.data() {
            assert!(v.abs() <= cmax * bound + 1e-9);
        }
    }

    #[test]
    fn permutations_invert() {
        for dir in 0..4 {
            let p = scan_permutation(dir, 3, 5);
            let inv = inverse_permutation(&p);
            for k in 0..15 {
                assert_eq!(p[inv[k]], k);
            }
        }
    }

    #[test]
    fn rejects_non_positive_delta() {
        let u = Array::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = Array::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = b.clone();
        assert!(selective_scan_ref(&u, &[0.5, 0.0], &[-1.0], &b, &c).is_err());
    }
}
