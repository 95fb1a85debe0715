//! Mask-strategy ablation grid: three masking modes crossed with
//! single-view vs multi-view training, each scored by a frozen-feature
//! linear probe. Directionality is reported, never asserted.

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::probe::{extract_features, linear_probe, ProbeConfig};
use crate::tensor::scalar::Scalar;
use crate::train::{looper, MaskMode, TrainConfig, TrainState};

/// The three masking strategies compared in the grid.
pub const GRID_MODES: [MaskMode; 3] = [
    MaskMode::RandomBlockwise,
    MaskMode::AttentionOnly,
    MaskMode::SelfAdaptive,
];

#[derive(Debug, Clone)]
pub struct AblateCell {
    pub mask_mode: MaskMode,
    pub multi_view: bool,
    /// Mean loss_total over the final epoch's batches.
    pub final_loss: f64,
    pub probe_acc_mean: f64,
    pub probe_acc_std: f64,
    pub probe_f1_mean: f64,
}

fn mode_name(mode: MaskMode) -> &'static str {
    match mode {
        MaskMode::SelfAdaptive => "self-adaptive",
        MaskMode::RandomBlockwise => "random-blockwise",
        MaskMode::AttentionOnly => "attention-only",
        MaskMode::ReconstructionOnly => "reconstruction-only",
    }
}

pub fn ablate_to_csv(cells: &[AblateCell]) -> String {
    let mut out =
        String::from("mask_mode,views,final_loss,probe_acc_mean,probe_acc_std,probe_f1_mean\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            mode_name(c.mask_mode),
            if c.multi_view { "multi" } else { "single" },
            c.final_loss,
            c.probe_acc_mean,
            c.probe_acc_std,
            c.probe_f1_mean,
        ));
    }
    out
}

/// Train one grid cell from scratch and score it with the probe.
fn run_cell<E: Scalar>(
    base: &TrainConfig,
    mode: MaskMode,
    multi_view: bool,
    corpus: &[ImageRecord],
    labels: &[bool],
    probe_cfg: &ProbeConfig,
    probe_seeds: &[u64],
) -> Result<AblateCell> {
    let mut cfg = base.clone();
    cfg.mask_mode = mode;
    if !multi_view {
        cfg.local_views = 0;
    }
    let mut state = TrainState::<E>::new(cfg)?;
    let rows = looper::pretrain(&mut state, corpus, |_, _| Ok(()))?;
    let last_epoch = rows.last().map(|r| r.epoch).unwrap_or(0);
    let final_rows: Vec<_> = rows.iter().filter(|r| r.epoch == last_epoch).collect();
    let final_loss =
        final_rows.iter().map(|r| r.loss_total).sum::<f64>() / final_rows.len().max(1) as f64;

    let images: Vec<_> = corpus.iter().map(|r| r.pixels.clone()).collect();
    let feats = extract_features(
        &state.teacher,
        &state.cfg.encoder,
        &images,
        probe_cfg.input_size,
    )?;
    let report = linear_probe(&feats, labels, probe_cfg, probe_seeds)?;
    Ok(AblateCell {
        mask_mode: mode,
        multi_view,
        final_loss,
        probe_acc_mean: report.acc_mean,
        probe_acc_std: report.acc_std,
        probe_f1_mean: report.f1_mean,
    })
}

/// The full 6-cell grid. `labels` must align with `corpus` (lesion
/// presence per image).
pub fn ablate_grid<E: Scalar>(
    base: &TrainConfig,
    corpus: &[ImageRecord],
    labels: &[bool],
    probe_cfg: &ProbeConfig,
    probe_seeds: &[u64],
) -> Result<Vec<AblateCell>> {
    if corpus.len() != labels.len() {
        return Err(Error::config("corpus/labels length mismatch"));
    }
    let mut cells = Vec::with_capacity(6);
    for &mode in &GRID_MODES {
        for &multi_view in &[false, true] {
            cells.push(run_cell::<E>(
                base,
                mode,
                multi_view,
                corpus,
                labels,
                probe_cfg,
                probe_seeds,
            )?);
        }
    }
    Ok(cells)
}
