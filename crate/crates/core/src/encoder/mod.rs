//! Vision state-space encoder: patch stem, stacked VSS blocks with a
//! multi-direction selective scan, 2x2 token merges between stages, and an
//! attention-map readout used by the adaptive masker.

pub mod config;
pub mod scan;

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::array::Array;
use crate::tensor::params::{init_linear, init_normal, ParamBinder, ParamSet};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::TensorId;

pub use config::EncoderConfig;
pub use scan::{
    attention_scan, inverse_permutation, scan_permutation, selective_scan_ref, tril_mask,
};

const LN_EPS: f64 = 1e-5;
const DELTA_INIT: f64 = 0.05;

/// Forward-pass products kept for the losses and the masker.
pub struct EncoderOutput<E: Scalar> {
    /// [T_final x D_last] patch tokens.
    pub tokens: TensorId,
    /// [1 x 2*D_last] summary token: per-channel token mean concatenated
    /// with per-channel cross-token std.
    pub cls: TensorId,
    /// Final token grid (rows, cols).
    pub final_grid: (usize, usize),
    /// Stem token grid (rows, cols).
    pub stem_grid: (usize, usize),
    /// Per direction, last block: (weighted attention, plain QK^T), values
    /// in permuted token order.
    pub attn_values: Vec<(Array<E>, Array<E>)>,
}

/// Parameter names are stable; the checkpoint format and the optimizer's
/// weight-decay grouping both key off them.
pub fn init_params<E: Scalar, R: Rng>(
    cfg: &EncoderConfig,
    rng: &mut R,
    trainable: bool,
) -> Result<ParamSet<E>> {
    cfg.validate()?;
    let mut p = ParamSet::new(trainable);
    let patch_px = cfg.stem_patch * cfg.stem_patch;
    let d0 = cfg.stage_dims[0];
    p.insert("enc/stem/w", init_linear(rng, patch_px, d0))?;
    p.insert("enc/stem/b", Array::zeros(&[d0]))?;
    p.insert("enc/mask_token", init_normal(rng, &[d0], 0.02))?;

    let n = cfg.state_dim;
    // softplus(bias) = DELTA_INIT at init
    let delta_bias = E::c((DELTA_INIT.exp() - 1.0).ln());
    for s in 0..cfg.stages {
        let d = cfg.stage_dims[s];
        if s > 0 {
            let prev = cfg.stage_dims[s - 1];
            p.insert(format!("enc/merge{s}/w"), init_linear(rng, 4 * prev, d))?;
            p.insert(format!("enc/merge{s}/b"), Array::zeros(&[d]))?;
        }
        for i in 0..cfg.depths[s] {
            let pre = format!("enc/s{s}/b{i}");
            p.insert(format!("{pre}/ln1/gamma"), Array::full(&[d], E::one()))?;
            p.insert(format!("{pre}/ln1/beta"), Array::zeros(&[d]))?;
            p.insert(format!("{pre}/in_proj/w"), init_linear(rng, d, d))?;
            p.insert(format!("{pre}/in_proj/b"), Array::zeros(&[d]))?;
            p.insert(format!("{pre}/delta/w"), init_linear(rng, d, 1))?;
            p.insert(format!("{pre}/delta/b"), Array::full(&[1], delta_bias))?;
            p.insert(format!("{pre}/bproj/w"), init_linear(rng, d, n))?;
            p.insert(format!("{pre}/bproj/b"), Array::zeros(&[n]))?;
            p.insert(format!("{pre}/cproj/w"), init_linear(rng, d, n))?;
            p.insert(format!("{pre}/cproj/b"), Array::zeros(&[n]))?;
            // A = -exp(a_log); init A_n = -(n + 1)
            let a_log: Vec<E> = (0..n).map(|ni| E::c(((ni + 1) as f64).ln())).collect();
            p.insert(format!("{pre}/a_log"), Array::new(vec![n], a_log)?)?;
            p.insert(format!("{pre}/out_proj/w"), init_linear(rng, d, d))?;
            p.insert(format!("{pre}/out_proj/b"), Array::zeros(&[d]))?;
            p.insert(format!("{pre}/ln2/gamma"), Array::full(&[d], E::one()))?;
            p.insert(format!("{pre}/ln2/beta"), Array::zeros(&[d]))?;
            let h = cfg.mlp_hidden(d);
            p.insert(format!("{pre}/mlp/w1"), init_linear(rng, d, h))?;
            p.insert(format!("{pre}/mlp/b1"), Array::zeros(&[h]))?;
            p.insert(format!("{pre}/mlp/w2"), init_linear(rng, h, d))?;
            p.insert(format!("{pre}/mlp/b2"), Array::zeros(&[d]))?;
        }
    }
    let dl = cfg.last_dim();
    p.insert("enc/norm/gamma", Array::full(&[dl], E::one()))?;
    p.insert("enc/norm/beta", Array::zeros(&[dl]))?;
    Ok(p)
}

/// Split a [H x W] image into row-major stem patches, pixels row-major
/// within each patch: [T x patch^2].
pub fn patchify<E: Scalar>(image: &Array<E>, patch: usize) -> Result<Array<E>> {
    let (h, w) = image.dims2()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw * patch * patch);
    for pi in 0..gh {
        for pj in 0..gw {
            for di in 0..patch {
                for dj in 0..patch {
                    out.push(image.at2(pi * patch + di, pj * patch + dj));
                }
            }
        }
    }
    Array::new(vec![gh * gw, patch * patch], out)
}

/// Fixed sinusoidal 2-d positional table, [gh*gw x dim]. Quarters of the
/// embedding hold sin/cos of the row and column coordinates.
pub fn positional_encoding<E: Scalar>(gh: usize, gw: usize, dim: usize) -> Result<Array<E>> {
    if dim % 4 != 0 {
        return Err(Error::config("positional encoding needs dim % 4 == 0"));
    }
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for i in 0..gh {
        for j in 0..gw {
            for &(coord, _) in &[(i as f64, 0), (j as f64, 1)] {
                for k in 0..quarter {
                    let freq = 10_000f64.powf(-(k as f64) / quarter as f64);
                    data.push(E::c((coord * freq).sin()));
                    data.push(E::c((coord * freq).cos()));
                }
            }
        }
    }
    Array::new(vec![gh * gw, dim], data)
}

struct BlockCtx<'a> {
    prefix: String,
    grid: (usize, usize),
    cfg: &'a EncoderConfig,
}

fn layernorm_named<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    x: TensorId,
    gamma: &str,
    beta: &str,
) -> Result<TensorId> {
    let g = bind.get(gamma)?;
    let b = bind.get(beta)?;
    bind.tape().layernorm(x, g, b, E::c(LN_EPS))
}

fn linear_named<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    x: TensorId,
    w: &str,
    b: &str,
) -> Result<TensorId> {
    let wid = bind.get(w)?;
    let bid = bind.get(b)?;
    bind.tape().linear(x, wid, bid)
}

/// One VSS block: x += SS2D(LN(x)); x += MLP(LN(x)). Returns the new token
/// matrix plus the per-direction attention snapshots.
fn vss_block<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    x: TensorId,
    ctx: &BlockCtx<'_>,
) -> Result<(TensorId, Vec<(Array<E>, Array<E>)>)> {
    let tape = bind.tape();
    let pre = &ctx.prefix;
    let (gh, gw) = ctx.grid;
    let t_len = gh * gw;

    let x1 = layernorm_named(bind, x, &format!("{pre}/ln1/gamma"), &format!("{pre}/ln1/beta"))?;
    let z = linear_named(bind, x1, &format!("{pre}/in_proj/w"), &format!("{pre}/in_proj/b"))?;
    let z = tape.silu(z)?;

    let delta = linear_named(bind, z, &format!("{pre}/delta/w"), &format!("{pre}/delta/b"))?;
    let delta = tape.softplus(delta)?; // [T x 1], strictly positive
    let b_mat = linear_named(bind, z, &format!("{pre}/bproj/w"), &format!("{pre}/bproj/b"))?;
    let c_mat = linear_named(bind, z, &format!("{pre}/cproj/w"), &format!("{pre}/cproj/b"))?;
    let a_log = bind.get(&format!("{pre}/a_log"))?;
    let a_exp = tape.exp(a_log)?;
    let a_neg = tape.neg(a_exp)?;
    let a_row = tape.reshape(a_neg, vec![1, ctx.cfg.state_dim])?;

    let mut y_sum: Option<TensorId> = None;
    let mut snaps = Vec::with_capacity(ctx.cfg.scan_directions);
    for dir in 0..ctx.cfg.scan_directions {
        let perm = scan_permutation(dir, gh, gw);
        let up = tape.gather_rows(z, &perm)?;
        let dp = tape.gather_rows(delta, &perm)?;
        let bp = tape.gather_rows(b_mat, &perm)?;
        let cp = tape.gather_rows(c_mat, &perm)?;
        let out = attention_scan(tape, up, dp, a_row, bp, cp)?;
        let y_dir = tape.gather_rows(out.y, &inverse_permutation(&perm))?;
        y_sum = Some(match y_sum {
            Some(acc) => tape.add(acc, y_dir)?,
            None => y_dir,
        });
        snaps.push((tape.value(out.attn), out.qk_attn_value));
    }
    let y = y_sum.expect("scan_directions >= 1");
    debug_assert_eq!(tape.shape(y)[0], t_len);
    let ss_out = linear_named(bind, y, &format!("{pre}/out_proj/w"), &format!("{pre}/out_proj/b"))?;
    let x = tape.add(x, ss_out)?;

    let x2 = layernorm_named(bind, x, &format!("{pre}/ln2/gamma"), &format!("{pre}/ln2/beta"))?;
    let h = linear_named(bind, x2, &format!("{pre}/mlp/w1"), &format!("{pre}/mlp/b1"))?;
    let h = tape.silu(h)?;
    let m = linear_named(bind, h, &format!("{pre}/mlp/w2"), &format!("{pre}/mlp/b2"))?;
    let x = tape.add(x, m)?;
    Ok((x, snaps))
}

/// Merge 2x2 token windows: concat the four sub-tokens and project.
fn merge_tokens<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    x: TensorId,
    grid: (usize, usize),
    stage: usize,
) -> Result<(TensorId, (usize, usize))> {
    let tape = bind.tape();
    let (gh, gw) = grid;
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::shape("token grid must be even to merge"));
    }
    let (nh, nw) = (gh / 2, gw / 2);
    let mut corners: Vec<Vec<usize>> = vec![Vec::with_capacity(nh * nw); 4];
    for i in 0..nh {
        for j in 0..nw {
            corners[0].push((2 * i) * gw + 2 * j);
            corners[1].push((2 * i) * gw + 2 * j + 1);
            corners[2].push((2 * i + 1) * gw + 2 * j);
            corners[3].push((2 * i + 1) * gw + 2 * j + 1);
        }
    }
    let gathered: Vec<TensorId> = corners
        .iter()
        .map(|idx| tape.gather_rows(x, idx))
        .collect::<Result<_>>()?;
    let cat = tape.concat(&gathered, 1)?;
    let merged = linear_named(
        bind,
        cat,
        &format!("enc/merge{stage}/w"),
        &format!("enc/merge{stage}/b"),
    )?;
    Ok((merged, (nh, nw)))
}

/// Full forward pass over one [H x W] image. A mask plan (stem-grid sized,
/// 1 = masked) replaces those stem tokens with the learned mask token before
/// positional encoding is added.
///
/// The caller owns the binder; gradients for the parameters it bound are
/// recovered afterwards with `ParamBinder::harvest`.
pub fn encode<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    cfg: &EncoderConfig,
    image: &Array<E>,
    mask: Option<&MaskPlan>,
) -> Result<EncoderOutput<E>> {
    let tape = bind.tape();
    let (h, w) = image.dims2()?;
    if h != w {
        return Err(Error::shape("encoder expects square inputs"));
    }
    cfg.validate_input_side(h)?;
    let (gh0, gw0) = (h / cfg.stem_patch, w / cfg.stem_patch);
    let t0 = gh0 * gw0;
    let d0 = cfg.stage_dims[0];

    let patches = tape.leaf(patchify(image, cfg.stem_patch)?)?;
    let mut x = linear_named(bind, patches, "enc/stem/w", "enc/stem/b")?;

    if let Some(plan) = mask {
        if plan.len() != t0 {
            return Err(Error::shape(format!(
                "mask plan covers {} patches, stem grid has {t0}",
                plan.len()
            )));
        }
        if plan.n_masked > 0 {
            let m: Vec<E> = plan.grid.iter().map(|&g| E::c(g as f64)).collect();
            let keep: Vec<E> = plan
                .grid
                .iter()
                .map(|&g| E::c(1.0 - g as f64))
                .collect();
            let keep_id = tape.leaf(Array::new(vec![t0], keep)?)?;
            let m_col = tape.leaf(Array::new(vec![t0, 1], m)?)?;
            let tok = bind.get("enc/mask_token")?;
            let tok_row = tape.reshape(tok, vec![1, d0])?;
            let fill = tape.matmul(m_col, tok_row)?;
            x = tape.add(tape.mul_col(x, keep_id)?, fill)?;
        }
    }

    let pos = tape.leaf(positional_encoding(gh0, gw0, d0)?)?;
    x = tape.add(x, pos)?;

    let mut grid = (gh0, gw0);
    let mut attn_values = Vec::new();
    for s in 0..cfg.stages {
        if s > 0 {
            let (nx, ngrid) = merge_tokens(bind, x, grid, s)?;
            x = nx;
            grid = ngrid;
        }
        for i in 0..cfg.depths[s] {
            let ctx = BlockCtx {
                prefix: format!("enc/s{s}/b{i}"),
                grid,
                cfg,
            };
            let (nx, snaps) = vss_block(bind, x, &ctx)?;
            x = nx;
            // keep only the deepest block's attention
            if s == cfg.stages - 1 && i == cfg.depths[s] - 1 {
                attn_values = snaps;
            }
        }
    }

    let tokens = layernorm_named(bind, x, "enc/norm/gamma", "enc/norm/beta")?;
    // summary token: per-channel mean and cross-token std, concatenated.
    // The std half carries texture spread that mean pooling washes out.
    let dl = cfg.last_dim();
    let mean = tape.mean_axis(tokens, 0)?;
    let centered = tape.add_row(tokens, tape.neg(mean)?)?;
    let var = tape.mean_axis(tape.mul(centered, centered)?, 0)?;
    let std = tape.sqrt(tape.add_const(var, E::c(LN_EPS))?)?;
    let cls = tape.concat(
        &[
            tape.reshape(mean, vec![1, dl])?,
            tape.reshape(std, vec![1, dl])?,
        ],
        1,
    )?;

    Ok(EncoderOutput {
        tokens,
        cls,
        final_grid: grid,
        stem_grid: (gh0, gw0),
        attn_values,
    })
}

/// Per-patch attention received, on the stem grid: mean |column| of the
/// deepest block's attention matrix, averaged over directions, unpermuted,
/// nearest-upsampled from the final grid, then min-max normalized. The flag
/// reports a constant (uninformative) map, which normalizes to uniform 0.5.
pub fn extract_attention_map<E: Scalar>(
    out: &EncoderOutput<E>,
    cfg: &EncoderConfig,
) -> Result<(Vec<f64>, bool)> {
    let (fh, fw) = out.final_grid;
    let (sh, sw) = out.stem_grid;
    let t_len = fh * fw;
    if out.attn_values.is_empty() {
        return Err(Error::shape("encoder output carries no attention snapshot"));
    }
    let mut score = vec![0.0f64; t_len];
    for (dir, (weighted, plain)) in out.attn_values.iter().enumerate() {
        let mat = if cfg.weighted_attention_map {
            weighted
        } else {
            plain
        };
        if mat.dims2()? != (t_len, t_len) {
            return Err(Error::shape("attention snapshot shape mismatch"));
        }
        let perm = scan_permutation(dir, fh, fw);
        for k in 0..t_len {
            let mut acc = 0.0;
            for i in 0..t_len {
                acc += mat.at2(i, k).f64().abs();
            }
            score[perm[k]] += acc / t_len as f64;
        }
    }
    let dirs = out.attn_values.len() as f64;
    for s in score.iter_mut() {
        *s /= dirs;
    }

    let factor = sh / fh;
    if factor * fh != sh || sw / fw * fw != sw || sw / fw != factor {
        return Err(Error::shape("stem and final grids are not nested"));
    }
    let mut up = vec![0.0f64; sh * sw];
    for i in 0..sh {
        for j in 0..sw {
            up[i * sw + j] = score[(i / factor) * fw + j / factor];
        }
    }

    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok((vec![0.5; sh * sw], true));
    }
    Ok((up.iter().map(|&v| (v - lo) / (hi - lo)).collect(), false))
}
