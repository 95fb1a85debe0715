//! Pre-training orchestration: configuration, the four-term loss ledger,
//! optimizer and schedules, checkpointing, and the epoch loop.

pub mod ablate;
pub mod checkpoint;
pub mod looper;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::distill::{CenterState, HeadConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::masking::RecLossEma;
use crate::recon::add_recon_params;
use crate::tensor::params::ParamSet;
use crate::tensor::scalar::Scalar;

pub use looper::{pretrain, pretrain_epoch};
pub use optim::{adamw_step, clip_grad_norm, lr_schedule, OptimizerState};

/// How global-view masks are chosen; the last three exist for the mask
/// strategy ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// ALP-driven, the full method.
    SelfAdaptive,
    /// Random blockwise masks everywhere.
    RandomBlockwise,
    /// ALP with alpha forced to 0 (attention term only).
    AttentionOnly,
    /// ALP with alpha forced to 1 (reconstruction term only).
    ReconstructionOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub grad_clip: f64,
    /// Teacher / student softmax temperatures.
    pub tau_t: f64,
    pub tau_s: f64,
    /// Teacher EMA momentum.
    pub lambda: f64,
    /// Mask ratio.
    pub rat_m: f64,
    /// Easy-to-hard ALP fraction endpoints.
    pub r0: f64,
    pub r_end: f64,
    /// ALP attention/reconstruction balance endpoints.
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub center_decay: f64,
    pub rec_ema_decay: f64,
    pub seed: u64,
    /// View geometry.
    pub global_views: usize,
    pub local_views: usize,
    pub global_size: usize,
    pub local_size: usize,
    pub mask_mode: MaskMode,
    /// Loss-term toggles and (default 1.0) weights.
    pub loss_cls_on: bool,
    pub loss_patch_on: bool,
    pub loss_rec_g_on: bool,
    pub loss_rec_l_on: bool,
    pub w_cls: f64,
    pub w_patch: f64,
    pub w_rec_g: f64,
    pub w_rec_l: f64,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: 3,
            // per-image updates buy the most optimizer steps per epoch,
            // which a desk-scale corpus needs far more than gradient
            // smoothness
            batch_size: 1,
            base_lr: 5e-4,
            weight_decay: 4e-2,
            betas: (0.9, 0.999),
            grad_clip: 3.0,
            tau_t: 0.04,
            tau_s: 0.07,
            lambda: 0.996,
            rat_m: 0.8,
            r0: 0.1,
            r_end: 0.9,
            alpha_min: 0.1,
            alpha_max: 0.9,
            center_decay: 0.9,
            rec_ema_decay: 0.9,
            seed: 0,
            global_views: 2,
            local_views: 8,
            global_size: 64,
            local_size: 32,
            mask_mode: MaskMode::SelfAdaptive,
            loss_cls_on: true,
            loss_patch_on: true,
            loss_rec_g_on: true,
            loss_rec_l_on: true,
            w_cls: 1.0,
            w_patch: 1.0,
            w_rec_g: 1.0,
            w_rec_l: 1.0,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small geometry for fast tests: 16 px globals, 8 px locals.
    pub fn tiny() -> Self {
        TrainConfig {
            batch_size: 4,
            global_views: 2,
            local_views: 2,
            global_size: 16,
            local_size: 8,
            encoder: EncoderConfig::tiny(),
            head: HeadConfig::tiny(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup must be shorter than the run"));
        }
        if self.base_lr <= 0.0 || self.weight_decay < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::config("lr/wd/clip out of range"));
        }
        if self.tau_t <= 0.0 || self.tau_s <= 0.0 {
            return Err(Error::config("temperatures must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda must be in [0, 1]"));
        }
        if !(0.0 < self.rat_m && self.rat_m <= 1.0) {
            return Err(Error::config("rat_m must be in (0, 1]"));
        }
        if self.r0 > self.r_end || self.alpha_min > self.alpha_max {
            return Err(Error::config("schedule endpoints out of order"));
        }
        if self.global_views == 0 {
            return Err(Error::config("need at least one global view"));
        }
        self.encoder.validate_input_side(self.global_size)?;
        if self.local_views > 0 {
            self.encoder.validate_input_side(self.local_size)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::format(format!("config serialize: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::format(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_patch: f64,
    pub loss_recon_g: f64,
    pub loss_recon_l: f64,
    pub alpha: f64,
    pub r_t: f64,
    pub lr: f64,
    pub teacher_entropy: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,step,loss_total,loss_cls,loss_patch,loss_recon_g,loss_recon_l,alpha,r_t,lr,teacher_entropy";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch,
            self.step,
            self.loss_total,
            self.loss_cls,
            self.loss_patch,
            self.loss_recon_g,
            self.loss_recon_l,
            self.alpha,
            self.r_t,
            self.lr,
            self.teacher_entropy
        )
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Unweighted sum of the enabled loss components (weights default to 1).
pub fn total_loss(cfg: &TrainConfig, cls: f64, patch: f64, rec_g: f64, rec_l: f64) -> f64 {
    let mut total = 0.0;
    if cfg.loss_cls_on {
        total += cfg.w_cls * cls;
    }
    if cfg.loss_patch_on {
        total += cfg.w_patch * patch;
    }
    if cfg.loss_rec_g_on {
        total += cfg.w_rec_g * rec_g;
    }
    if cfg.loss_rec_l_on {
        total += cfg.w_rec_l * rec_l;
    }
    total
}

/// Everything the trainer mutates; checkpointing serializes this whole
/// struct.
pub struct TrainState<E: Scalar> {
    pub cfg: TrainConfig,
    pub student: ParamSet<E>,
    pub teacher: ParamSet<E>,
    pub opt: OptimizerState<E>,
    /// Center for the summary-token head's teacher logits.
    pub center: CenterState,
    /// Center for the masked-token head's teacher logits.
    pub center_pat: CenterState,
    pub rec_ema: RecLossEma,
    /// Next epoch to run (0-based).
    pub next_epoch: usize,
    pub global_step: u64,
}

impl<E: Scalar> TrainState<E> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::data::stream_rng(cfg.seed, 0, u64::MAX);
        let mut student = encoder::init_params::<E, _>(&cfg.encoder, &mut rng, true)?;
        crate::distill::add_head_params(
            &mut student,
            "head_cls",
            cfg.encoder.cls_dim(),
            &cfg.head,
            &mut rng,
        )?;
        crate::distill::add_head_params(
            &mut student,
            "head_pat",
            cfg.encoder.last_dim(),
            &cfg.head,
            &mut rng,
        )?;
        add_recon_params(&mut student, &cfg.encoder, &mut rng)?;
        student.zero_grads();
        // teacher starts as an exact copy and is never differentiated
        let teacher = student.clone_with_grads(false);
        let center = CenterState::new(cfg.head.prototypes, cfg.center_decay)?;
        let center_pat = CenterState::new(cfg.head.prototypes, cfg.center_decay)?;
        let rec_ema = RecLossEma::new(cfg.rec_ema_decay)?;
        Ok(TrainState {
            cfg,
            student,
            teacher,
            opt: OptimizerState::new(),
            center,
            center_pat,
            rec_ema,
            next_epoch: 0,
            global_step: 0,
        })
    }
}
