//! Teacher-student distillation: EMA weight tracking, projection heads
//! over prototypes, teacher centering and sharpening, and the two
//! cross-entropy losses (summary-token level and masked-token level).
//!
//! The teacher is never differentiated: its outputs enter the losses as
//! plain values, and its weights move only through the EMA update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::array::Array;
use crate::tensor::params::{init_linear, ParamBinder, ParamSet};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::{Tape, TensorId};

/// Projection head geometry. The summary-token and masked-token losses use
/// separate head instances of the same geometry (their inputs differ in
/// width), distinguished by parameter-name prefix.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub prototypes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 256,
            bottleneck: 64,
            prototypes: 256,
        }
    }
}

impl HeadConfig {
    pub fn tiny() -> Self {
        HeadConfig {
            hidden: 32,
            bottleneck: 16,
            prototypes: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.bottleneck == 0 || self.prototypes < 2 {
            return Err(Error::config("projection head dims must be positive (K >= 2)"));
        }
        Ok(())
    }
}

pub fn add_head_params<E: Scalar, R: rand::Rng>(
    params: &mut ParamSet<E>,
    prefix: &str,
    d_in: usize,
    hcfg: &HeadConfig,
    rng: &mut R,
) -> Result<()> {
    hcfg.validate()?;
    params.insert(format!("{prefix}/w1"), init_linear(rng, d_in, hcfg.hidden))?;
    params.insert(format!("{prefix}/b1"), Array::zeros(&[hcfg.hidden]))?;
    params.insert(
        format!("{prefix}/w2"),
        init_linear(rng, hcfg.hidden, hcfg.bottleneck),
    )?;
    params.insert(format!("{prefix}/b2"), Array::zeros(&[hcfg.bottleneck]))?;
    params.insert(
        format!("{prefix}/proto"),
        init_linear(rng, hcfg.bottleneck, hcfg.prototypes),
    )?;
    Ok(())
}

/// MLP -> unit-norm bottleneck -> prototype logits, [rows x K].
pub fn head_forward<E: Scalar>(
    bind: &mut ParamBinder<'_, E>,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let tape = bind.tape();
    let w1 = bind.get(&format!("{prefix}/w1"))?;
    let b1 = bind.get(&format!("{prefix}/b1"))?;
    let h = tape.silu(tape.linear(x, w1, b1)?)?;
    let w2 = bind.get(&format!("{prefix}/w2"))?;
    let b2 = bind.get(&format!("{prefix}/b2"))?;
    let z = tape.linear(h, w2, b2)?;
    let z = tape.normalize_rows(z, E::c(1e-8))?;
    let proto = bind.get(&format!("{prefix}/proto"))?;
    tape.matmul(z, proto)
}

/// Running center of teacher prototype logits, subtracted before the
/// teacher softmax to discourage collapse onto one prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterState {
    pub center: Vec<f64>,
    pub decay: f64,
}

impl CenterState {
    pub fn new(k: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config("center decay must be in [0, 1)"));
        }
        Ok(CenterState {
            center: vec![0.0; k],
            decay,
        })
    }

    /// c <- m c + (1 - m) * column mean of the batch logits.
    pub fn update<E: Scalar>(&mut self, teacher_logits: &Array<E>) -> Result<()> {
        let (rows, k) = teacher_logits.dims2()?;
        if k != self.center.len() || rows == 0 {
            return Err(Error::shape("center update logits shape mismatch"));
        }
        for j in 0..k {
            let mean: f64 =
                (0..rows).map(|i| teacher_logits.at2(i, j).f64()).sum::<f64>() / rows as f64;
            self.center[j] = self.decay * self.center[j] + (1.0 - self.decay) * mean;
        }
        Ok(())
    }
}

/// Centered, sharpened teacher distribution: softmax((logits - c) / tau_t)
/// per row, computed on plain values.
pub fn teacher_probs<E: Scalar>(
    logits: &Array<E>,
    center: &CenterState,
    tau_t: f64,
) -> Result<Array<E>> {
    if tau_t <= 0.0 {
        return Err(Error::domain("teacher temperature must be positive"));
    }
    let (rows, k) = logits.dims2()?;
    if k != center.center.len() {
        return Err(Error::shape("teacher logits do not match center size"));
    }
    let mut out = Array::zeros(&[rows, k]);
    for i in 0..rows {
        let shifted: Vec<f64> = (0..k)
            .map(|j| (logits.at2(i, j).f64() - center.center[j]) / tau_t)
            .collect();
        let m = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = shifted.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..k {
            out.set2(i, j, E::c(exps[j] / z));
        }
    }
    Ok(out)
}

/// Mean cross-entropy of the student rows against fixed teacher rows:
/// -mean_i sum_k p_t[i,k] log softmax(student_i / tau_s)[k].
pub fn cross_entropy_rows<E: Scalar>(
    tape: &Tape<E>,
    student_logits: TensorId,
    teacher_probs: &Array<E>,
    tau_s: f64,
) -> Result<TensorId> {
    let (rows, k) = teacher_probs.dims2()?;
    if tape.value(student_logits).dims2()? != (rows, k) {
        return Err(Error::shape("student/teacher logit shapes disagree"));
    }
    let logp = tape.log_softmax_t(student_logits, E::c(tau_s))?;
    let pt = tape.leaf(teacher_probs.clone())?;
    let prod = tape.mul(pt, logp)?;
    let total = tape.sum_all(prod)?;
    tape.mul_const(total, E::c(-1.0 / rows as f64))
}

/// Masked-token distillation loss. Rows where `mask` is 0 contribute
/// nothing; an all-visible mask gives a constant zero and sets the flag.
pub struct MimLoss {
    pub loss: TensorId,
    pub empty_mask: bool,
    pub n_masked: usize,
}

pub fn loss_patch_mim<E: Scalar>(
    tape: &Tape<E>,
    student_logits: TensorId,
    teacher_probs_all: &Array<E>,
    mask: &[u8],
    tau_s: f64,
) -> Result<MimLoss> {
    let (rows, k) = teacher_probs_all.dims2()?;
    if tape.value(student_logits).dims2()? != (rows, k) || mask.len() != rows {
        return Err(Error::shape("masked distillation shapes disagree"));
    }
    let masked: Vec<usize> = (0..rows).filter(|&i| mask[i] == 1).collect();
    if masked.is_empty() {
        return Ok(MimLoss {
            loss: tape.scalar(E::zero())?,
            empty_mask: true,
            n_masked: 0,
        });
    }
    let student_sel = tape.gather_rows(student_logits, &masked)?;
    let mut tdata = Vec::with_capacity(masked.len() * k);
    for &i in &masked {
        for j in 0..k {
            tdata.push(teacher_probs_all.at2(i, j));
        }
    }
    let teacher_sel = Array::new(vec![masked.len(), k], tdata)?;
    let loss = cross_entropy_rows(tape, student_sel, &teacher_sel, tau_s)?;
    Ok(MimLoss {
        loss,
        empty_mask: false,
        n_masked: masked.len(),
    })
}

/// theta_t <- lambda * theta_t + (1 - lambda) * theta_s, over every shared
/// parameter name. Shapes must agree exactly.
pub fn ema_update<E: Scalar>(
    teacher: &mut ParamSet<E>,
    student: &ParamSet<E>,
    lambda: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::domain("EMA momentum must be in [0, 1]"));
    }
    if !teacher.shapes_match(student) {
        return Err(Error::shape("teacher/student parameter sets disagree"));
    }
    let lam = E::c(lambda);
    let one_m = E::c(1.0 - lambda);
    let names: Vec<String> = student.names().map(String::from).collect();
    for name in names {
        let s = student.get(&name)?.clone();
        let t = teacher.get_mut(&name)?;
        *t = t.zip_map(&s, |tv, sv| lam * tv + one_m * sv)?;
    }
    Ok(())
}

/// Mean row entropy of a probability matrix, in nats.
pub fn mean_entropy<E: Scalar>(probs: &Array<E>) -> Result<f64> {
    let (rows, k) = probs.dims2()?;
    let mut acc = 0.0;
    for i in 0..rows {
        for j in 0..k {
            let p = probs.at2(i, j).f64();
            if p > 0.0 {
                acc -= p * p.ln();
            }
        }
    }
    Ok(acc / rows as f64)
}
