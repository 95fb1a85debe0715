//! Pixel reconstruction: a single linear head maps each final-stage token
//! back to its pixel footprint, and the loss is mean squared error over
//! masked pixels only. The per-patch loss map feeds the adaptive masker's
//! reconstruction-difficulty EMA.

use rand::Rng;

use crate::encoder::{patchify, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::params::{init_linear, ParamBinder, ParamSet};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::TensorId;

/// Register the reconstruction head (token dim -> pixels per final token).
pub fn add_recon_params<E: Scalar, R: Rng>(
    params: &mut ParamSet<E>,
    cfg: &EncoderConfig,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.last_dim();
    let px = cfg.total_downsample() * cfg.total_downsample();
    params.insert("rec/w", init_linear(rng, d, px))?;
    params.insert("rec/b", Array::zeros(&[px]))?;
    Ok(())
}

/// Predict pixels for every final token: [T x px].
pub fn reconstruct<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    tokens: TensorId,
) -> Result<TensorId> {
    let w = bind.get("rec/w")?;
    let b = bind.get("rec/b")?;
    bind.tape().linear(tokens, w, b)
}

/// Reassemble a [T x px] patch matrix into the [H x W] image it tiles.
pub fn assemble_image<E: Scalar>(
    patches: &Array<E>,
    grid: (usize, usize),
    patch_side: usize,
) -> Result<Array<E>> {
    let (gh, gw) = grid;
    let (t_len, px) = patches.dims2()?;
    if t_len != gh * gw || px != patch_side * patch_side {
        return Err(Error::shape("patch matrix does not tile the given grid"));
    }
    let (h, w) = (gh * patch_side, gw * patch_side);
    let mut img = Array::zeros(&[h, w]);
    for pi in 0..gh {
        for pj in 0..gw {
            let row = pi * gw + pj;
            for di in 0..patch_side {
                for dj in 0..patch_side {
                    img.set2(
                        pi * patch_side + di,
                        pj * patch_side + dj,
                        patches.at2(row, di * patch_side + dj),
                    );
                }
            }
        }
    }
    Ok(img)
}

/// Masked-pixel MSE plus the per-token loss map.
pub struct ReconLoss<E: Scalar> {
    /// Scalar tape node; exactly zero when no token is masked.
    pub loss: TensorId,
    /// True when the mask was empty and the loss is a constant zero.
    pub empty_mask: bool,
    /// Per final token: Some(mean squared error) where masked, None where
    /// visible.
    pub per_token: Vec<Option<f64>>,
    /// Marker to keep the struct generic over the tape element type.
    _marker: std::marker::PhantomData<E>,
}

/// MSE over the pixels of masked final tokens. `target` is the raw image,
/// `mask_final` the token mask on the final grid (1 = masked).
pub fn loss_recon<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    pred: TensorId,
    target: &Array<E>,
    mask_final: &[u8],
    cfg: &EncoderConfig,
) -> Result<ReconLoss<E>> {
    let tape = bind.tape();
    let patch_side = cfg.total_downsample();
    let target_patches = patchify(target, patch_side)?;
    let (t_len, px) = target_patches.dims2()?;
    if tape.value(pred).dims2()? != (t_len, px) {
        return Err(Error::shape("prediction grid does not match target"));
    }
    if mask_final.len() != t_len {
        return Err(Error::shape("final-grid mask length mismatch"));
    }
    let n_masked = mask_final.iter().filter(|&&m| m == 1).count();

    let target_id = tape.leaf(target_patches.clone())?;
    let diff = tape.sub(pred, target_id)?;
    let sq = tape.mul(diff, diff)?;

    // per-token map from values (not differentiated)
    let sq_val = tape.value(sq);
    let per_token: Vec<Option<f64>> = (0..t_len)
        .map(|t| {
            if mask_final[t] == 1 {
                let s: f64 = (0..px).map(|p| sq_val.at2(t, p).f64()).sum();
                Some(s / px as f64)
            } else {
                None
            }
        })
        .collect();

    if n_masked == 0 {
        return Ok(ReconLoss {
            loss: tape.scalar(E::zero())?,
            empty_mask: true,
            per_token,
            _marker: std::marker::PhantomData,
        });
    }

    let mask_col: Vec<E> = mask_final.iter().map(|&m| E::c(m as f64)).collect();
    let mask_id = tape.leaf(Array::new(vec![t_len], mask_col)?)?;
    let masked_sq = tape.mul_col(sq, mask_id)?;
    let total = tape.sum_all(masked_sq)?;
    let loss = tape.mul_const(total, E::c(1.0 / (n_masked * px) as f64))?;
    Ok(ReconLoss {
        loss,
        empty_mask: false,
        per_token,
        _marker: std::marker::PhantomData,
    })
}

/// Spread a per-final-token loss map onto the stem grid: every stem patch
/// inside a masked final token observes that token's loss.
pub fn per_token_to_stem_grid(
    per_token: &[Option<f64>],
    final_grid: (usize, usize),
    stem_grid: (usize, usize),
) -> Result<Vec<Option<f64>>> {
    let (fh, fw) = final_grid;
    let (sh, sw) = stem_grid;
    if per_token.len() != fh * fw || sh % fh != 0 || sw / fw != sh / fh {
        return Err(Error::shape("final grid does not nest inside stem grid"));
    }
    let factor = sh / fh;
    let mut out = vec![None; sh * sw];
    for i in 0..sh {
        for j in 0..sw {
            out[i * sw + j] = per_token[(i / factor) * fw + j / factor];
        }
    }
    Ok(out)
}
