//! The pre-training loop: per-image view construction, clean teacher
//! passes, mask building, masked student passes, the four-term loss,
//! optimization, EMA tracking, and metrics emission.
//!
//! Gradients are accumulated per student view with the batch-mean scaling
//! folded in, so memory stays bounded by one view's graph.

use crate::data::{make_views, stream_rng, Image, ImageRecord, ViewBatch};
use crate::distill::{
    cross_entropy_rows, ema_update, head_forward, loss_patch_mim, mean_entropy, teacher_probs,
};
use crate::encoder::{encode, extract_attention_map, EncoderConfig};
use crate::error::{Error, Result};
use crate::masking::{
    alpha_schedule, compute_alp, random_blockwise_mask, ratio_schedule, self_adaptive_mask,
    MaskPlan, MaskScheduleState,
};
use crate::recon::{loss_recon, per_token_to_stem_grid, reconstruct};
use crate::tensor::array::Array;
use crate::tensor::params::{ParamBinder, ParamSet};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::Tape;
use crate::train::{
    checkpoint, lr_schedule, optim, total_loss, MaskMode, MetricsRow, TrainState,
};

fn to_model<E: Scalar>(img: &Image) -> Array<E> {
    Array::new(
        img.shape().to_vec(),
        img.data().iter().map(|&v| E::c(v as f64)).collect(),
    )
    .expect("same shape")
}

/// Clean-view teacher products, all plain values.
struct TeacherView<E: Scalar> {
    /// Stem-grid attention map, normalized to [0,1].
    am: Vec<f64>,
    /// [1 x K] summary-token logits.
    cls_logits: Array<E>,
    /// [T_final x K] patch logits.
    patch_logits: Array<E>,
}

fn teacher_pass<E: Scalar>(
    teacher: &ParamSet<E>,
    enc_cfg: &EncoderConfig,
    view: &Image,
) -> Result<TeacherView<E>> {
    let tape = Tape::new();
    let mut bind = ParamBinder::new(&tape, teacher);
    let x = to_model::<E>(view);
    let out = encode(&mut bind, enc_cfg, &x, None)?;
    let (am, _constant) = extract_attention_map(&out, enc_cfg)?;
    let cls_logits = tape.value(head_forward(&mut bind, "head_cls", out.cls)?);
    let patch_logits = tape.value(head_forward(&mut bind, "head_pat", out.tokens)?);
    Ok(TeacherView {
        am,
        cls_logits,
        patch_logits,
    })
}

/// Per-image loss tally (already averaged over that image's views).
#[derive(Debug, Default, Clone, Copy)]
struct ImageLosses {
    cls: f64,
    patch: f64,
    rec_g: f64,
    rec_l: f64,
}

struct ImageOutcome<E: Scalar> {
    losses: ImageLosses,
    teacher_cls_logits: Vec<Array<E>>,
    teacher_patch_logits: Vec<Array<E>>,
    /// Per global view: stem-grid reconstruction observations.
    rec_observations: Vec<Vec<Option<f64>>>,
}

fn global_mask_plan<E: Scalar>(
    state: &TrainState<E>,
    tv: &TeacherView<E>,
    image_id: &str,
    alpha: f64,
    thr: f64,
    gh: usize,
    gw: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<MaskPlan> {
    let cfg = &state.cfg;
    if cfg.mask_mode == MaskMode::RandomBlockwise {
        return random_blockwise_mask(gh, gw, cfg.rat_m, rng);
    }
    let snapshot = state.rec_ema.snapshot(image_id);
    let alpha_eff = match cfg.mask_mode {
        MaskMode::AttentionOnly => 0.0,
        // reconstruction-difficulty weighting needs history; fall back to
        // attention until this image has been seen
        MaskMode::ReconstructionOnly => {
            if snapshot.is_some() {
                1.0
            } else {
                0.0
            }
        }
        MaskMode::SelfAdaptive => {
            if snapshot.is_some() {
                alpha
            } else {
                0.0
            }
        }
        MaskMode::RandomBlockwise => unreachable!(),
    };
    let rec = snapshot.unwrap_or_else(|| vec![0.0; gh * gw]);
    let alp = compute_alp(&tv.am, &rec, alpha_eff)?;
    self_adaptive_mask(&alp, cfg.rat_m, thr, rng)
}

#[allow(clippy::too_many_arguments)]
fn train_image<E: Scalar>(
    state: &TrainState<E>,
    record: &ImageRecord,
    index: u64,
    epoch: usize,
    grads_out: &mut ParamSet<E>,
    batch_scale: f64,
) -> Result<ImageOutcome<E>> {
    let cfg = &state.cfg;
    let enc_cfg = &cfg.encoder;
    let mut rng = stream_rng(cfg.seed, epoch as u64, index);
    let views: ViewBatch = make_views(
        &record.pixels,
        cfg.global_views,
        cfg.local_views,
        cfg.global_size,
        cfg.local_size,
        &cfg.augment,
        &mut rng,
    )?;

    let sched = MaskScheduleState {
        t: epoch,
        total: cfg.epochs,
        r0: cfg.r0,
        r_end: cfg.r_end,
        alpha_min: cfg.alpha_min,
        alpha_max: cfg.alpha_max,
    };
    let r_t = ratio_schedule(&sched);
    let alpha = alpha_schedule(&sched);
    let thr = (cfg.rat_m * r_t).min(cfg.rat_m);

    let g = cfg.global_views;
    let l = cfg.local_views;
    let gh = enc_cfg.stem_grid_side(cfg.global_size);
    let merge_factor = enc_cfg.total_downsample() / enc_cfg.stem_patch;

    // teacher on clean globals
    let teacher_views: Vec<TeacherView<E>> = views
        .global_views
        .iter()
        .map(|v| teacher_pass(&state.teacher, enc_cfg, v))
        .collect::<Result<_>>()?;

    // teacher targets with the current center
    let cls_probs: Vec<Array<E>> = teacher_views
        .iter()
        .map(|tv| teacher_probs(&tv.cls_logits, &state.center, cfg.tau_t))
        .collect::<Result<_>>()?;
    let patch_probs: Vec<Array<E>> = teacher_views
        .iter()
        .map(|tv| teacher_probs(&tv.patch_logits, &state.center_pat, cfg.tau_t))
        .collect::<Result<_>>()?;

    let mut losses = ImageLosses::default();
    let mut rec_observations = Vec::with_capacity(g);

    // masked student passes on global views
    for (gi, view) in views.global_views.iter().enumerate() {
        let plan = global_mask_plan(
            state,
            &teacher_views[gi],
            &record.id,
            alpha,
            thr,
            gh,
            gh,
            &mut rng,
        )?;
        let tape = Tape::new();
        let mut bind = ParamBinder::new(&tape, &state.student);
        let x = to_model::<E>(view);
        let out = encode(&mut bind, enc_cfg, &x, Some(&plan))?;
        let mask_final = plan.downsample(gh, gh, merge_factor)?;

        let mut view_loss = tape.scalar(E::zero())?;
        if cfg.loss_patch_on {
            let patch_logits = head_forward(&mut bind, "head_pat", out.tokens)?;
            let mim = loss_patch_mim(
                &tape,
                patch_logits,
                &patch_probs[gi],
                &mask_final,
                cfg.tau_s,
            )?;
            losses.patch += tape.value(mim.loss).scalar_value().f64() / g as f64;
            let weighted = tape.mul_const(mim.loss, E::c(cfg.w_patch / g as f64))?;
            view_loss = tape.add(view_loss, weighted)?;
        }
        if cfg.loss_rec_g_on || cfg.mask_mode != MaskMode::RandomBlockwise {
            // the reconstruction path also runs (without a loss term) when
            // the masker needs its difficulty map
            let pred = reconstruct(&mut bind, out.tokens)?;
            let rec = loss_recon(&mut bind, pred, &x, &mask_final, enc_cfg)?;
            rec_observations.push(per_token_to_stem_grid(
                &rec.per_token,
                out.final_grid,
                out.stem_grid,
            )?);
            if cfg.loss_rec_g_on {
                losses.rec_g += tape.value(rec.loss).scalar_value().f64() / g as f64;
                let weighted = tape.mul_const(rec.loss, E::c(cfg.w_rec_g / g as f64))?;
                view_loss = tape.add(view_loss, weighted)?;
            }
        }

        if tape.requires_grad(view_loss) {
            let grads = tape.backward(view_loss)?;
            bind.harvest(&grads, grads_out, E::c(batch_scale))?;
        }
    }

    // masked student passes on local views
    let lh = enc_cfg.stem_grid_side(cfg.local_size);
    for view in views.local_views.iter() {
        let plan = random_blockwise_mask(lh, lh, cfg.rat_m, &mut rng)?;
        let tape = Tape::new();
        let mut bind = ParamBinder::new(&tape, &state.student);
        let x = to_model::<E>(view);
        let out = encode(&mut bind, enc_cfg, &x, Some(&plan))?;

        let mut view_loss = tape.scalar(E::zero())?;
        if cfg.loss_cls_on {
            let cls_logits = head_forward(&mut bind, "head_cls", out.cls)?;
            let mut ce_sum = tape.scalar(E::zero())?;
            for probs in &cls_probs {
                let ce = cross_entropy_rows(&tape, cls_logits, probs, cfg.tau_s)?;
                ce_sum = tape.add(ce_sum, ce)?;
            }
            let pair_mean = tape.mul_const(ce_sum, E::c(1.0 / (g * l) as f64))?;
            losses.cls += tape.value(pair_mean).scalar_value().f64();
            let weighted = tape.mul_const(pair_mean, E::c(cfg.w_cls))?;
            view_loss = tape.add(view_loss, weighted)?;
        }
        if cfg.loss_rec_l_on {
            let mask_final = plan.downsample(lh, lh, merge_factor)?;
            let pred = reconstruct(&mut bind, out.tokens)?;
            let rec = loss_recon(&mut bind, pred, &x, &mask_final, enc_cfg)?;
            losses.rec_l += tape.value(rec.loss).scalar_value().f64() / l as f64;
            let weighted = tape.mul_const(rec.loss, E::c(cfg.w_rec_l / l as f64))?;
            view_loss = tape.add(view_loss, weighted)?;
        }

        if tape.requires_grad(view_loss) {
            let grads = tape.backward(view_loss)?;
            bind.harvest(&grads, grads_out, E::c(batch_scale))?;
        }
    }

    let (mut cls_logits, mut pat_logits) = (Vec::with_capacity(g), Vec::with_capacity(g));
    for tv in teacher_views {
        cls_logits.push(tv.cls_logits);
        pat_logits.push(tv.patch_logits);
    }
    Ok(ImageOutcome {
        losses,
        teacher_cls_logits: cls_logits,
        teacher_patch_logits: pat_logits,
        rec_observations,
    })
}

/// Collapse diagnostic: entropy of the batch-marginal teacher distribution
/// over prototypes, computed from centered logits at unit temperature (the
/// sharpened distribution is near-deterministic by design and uninformative
/// here).
fn marginal_teacher_entropy<E: Scalar>(
    logits: &[Array<E>],
    center: &crate::distill::CenterState,
) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::shape("no teacher outputs in batch"));
    }
    let k = center.center.len();
    let mut marginal = vec![0.0f64; k];
    let mut rows = 0usize;
    for arr in logits {
        let probs = teacher_probs(arr, center, 1.0)?;
        let (r, _) = probs.dims2()?;
        for i in 0..r {
            for j in 0..k {
                marginal[j] += probs.at2(i, j).f64();
            }
        }
        rows += r;
    }
    let probs = Array::<f64>::new(
        vec![1, k],
        marginal.iter().map(|&v| v / rows as f64).collect(),
    )?;
    mean_entropy(&probs)
}

/// Run the next epoch of `state` over the corpus. Emits one metrics row per
/// batch and advances `state.next_epoch`.
pub fn pretrain_epoch<E: Scalar>(
    state: &mut TrainState<E>,
    corpus: &[ImageRecord],
) -> Result<Vec<MetricsRow>> {
    if corpus.is_empty() {
        return Err(Error::config("empty corpus"));
    }
    let epoch = state.next_epoch;
    let cfg = state.cfg.clone();
    if epoch >= cfg.epochs {
        return Err(Error::config("training already finished"));
    }
    let n_batches = corpus.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.epochs as u64 * n_batches;
    let warmup_steps = cfg.warmup_epochs as u64 * n_batches;

    let sched = MaskScheduleState {
        t: epoch,
        total: cfg.epochs,
        r0: cfg.r0,
        r_end: cfg.r_end,
        alpha_min: cfg.alpha_min,
        alpha_max: cfg.alpha_max,
    };
    let (r_t, alpha) = (ratio_schedule(&sched), alpha_schedule(&sched));

    // deterministic per-epoch image order
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut shuffle_rng = stream_rng(cfg.seed, epoch as u64, u64::MAX - 1);
        order.shuffle(&mut shuffle_rng);
    }

    let mut rows = Vec::new();
    for batch in order.chunks(cfg.batch_size) {
        let lr = lr_schedule(state.global_step, total_steps, warmup_steps, cfg.base_lr);
        let batch_scale = 1.0 / batch.len() as f64;

        let mut grads = state.student.clone_with_grads(true);
        grads.zero_grads();
        let mut tally = ImageLosses::default();
        let mut teacher_logits = Vec::new();
        let mut teacher_pat_logits = Vec::new();
        let mut ema_updates: Vec<(String, Vec<Vec<Option<f64>>>)> = Vec::new();

        for &idx in batch {
            let outcome = train_image(
                state,
                &corpus[idx],
                idx as u64,
                epoch,
                &mut grads,
                batch_scale,
            )
            .map_err(|e| {
                Error::config(format!(
                    "epoch {epoch}, image {} ({}): {e}",
                    idx, corpus[idx].id
                ))
            })?;
            tally.cls += outcome.losses.cls * batch_scale;
            tally.patch += outcome.losses.patch * batch_scale;
            tally.rec_g += outcome.losses.rec_g * batch_scale;
            tally.rec_l += outcome.losses.rec_l * batch_scale;
            teacher_logits.extend(outcome.teacher_cls_logits);
            teacher_pat_logits.extend(outcome.teacher_patch_logits);
            ema_updates.push((corpus[idx].id.clone(), outcome.rec_observations));
        }

        let loss_total = total_loss(&cfg, tally.cls, tally.patch, tally.rec_g, tally.rec_l);
        if !loss_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss_total at epoch {epoch}, step {}: cls={} patch={} rec_g={} rec_l={}",
                state.global_step, tally.cls, tally.patch, tally.rec_g, tally.rec_l
            )));
        }

        // optimizer step on the accumulated batch gradient
        optim::clip_grad_norm(&mut grads, cfg.grad_clip)?;
        optim::adamw_step(
            &mut grads,
            &mut state.opt,
            lr,
            cfg.weight_decay,
            cfg.betas,
            1e-8,
        )?;
        // adamw mutated the parameter copy; adopt it as the new student
        state.student = grads;
        state.student.zero_grads();

        ema_update(&mut state.teacher, &state.student, cfg.lambda)?;

        for (id, views_obs) in &ema_updates {
            for obs in views_obs {
                state.rec_ema.update(id, obs)?;
            }
        }

        let entropy = marginal_teacher_entropy(&teacher_logits, &state.center)?;
        for arr in &teacher_logits {
            state.center.update(arr)?;
        }
        for arr in &teacher_pat_logits {
            state.center_pat.update(arr)?;
        }

        state.global_step += 1;
        rows.push(MetricsRow {
            epoch,
            step: state.global_step,
            loss_total,
            loss_cls: tally.cls,
            loss_patch: tally.patch,
            loss_recon_g: tally.rec_g,
            loss_recon_l: tally.rec_l,
            alpha,
            r_t,
            lr,
            teacher_entropy: entropy,
        });
    }

    state.next_epoch += 1;
    Ok(rows)
}

/// Run from `state.next_epoch` to the configured end. `on_epoch` fires after
/// each epoch (checkpointing hook); all metrics rows are returned.
pub fn pretrain<E: Scalar>(
    state: &mut TrainState<E>,
    corpus: &[ImageRecord],
    mut on_epoch: impl FnMut(&TrainState<E>, &[MetricsRow]) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    let mut all = Vec::new();
    while state.next_epoch < state.cfg.epochs {
        let rows = pretrain_epoch(state, corpus)?;
        on_epoch(state, &rows)?;
        all.extend(rows);
    }
    Ok(all)
}

/// Convenience used by tests and the CLI: save a checkpoint after every
/// epoch under `dir/ckpt-epoch{e}.bin`.
pub fn epoch_checkpointer<E: Scalar>(
    dir: std::path::PathBuf,
) -> impl FnMut(&TrainState<E>, &[MetricsRow]) -> Result<()> {
    move |state, _rows| {
        let path = dir.join(format!("ckpt-epoch{:03}.bin", state.next_epoch));
        checkpoint::save_state(&path, state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_speckle, SpecklePhantomSpec};
    use crate::train::{metrics_to_csv, TrainConfig};

    fn tiny_corpus(n: usize, size: usize) -> Vec<ImageRecord> {
        let spec = SpecklePhantomSpec {
            image_size: size,
            ..Default::default()
        };
        (0..n)
            .map(|i| synth_speckle(&spec, i as u64).unwrap().record)
            .collect()
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: 1.min(epochs - 1),
            ..TrainConfig::tiny()
        }
    }

    #[test]
    fn epoch_emits_rows_and_updates_state() {
        let corpus = tiny_corpus(6, 48);
        let mut state = TrainState::<f32>::new(tiny_cfg(3)).unwrap();
        let before: Vec<f32> = state.student.get("enc/stem/w").unwrap().data().to_vec();
        let rows = pretrain_epoch(&mut state, &corpus).unwrap();
        assert_eq!(rows.len(), 2); // 6 images, batch 4 -> 2 batches
        assert_eq!(state.next_epoch, 1);
        assert_eq!(state.global_step, 2);
        // warmup starts at lr 0, so step 1 leaves weights alone; step 2 must move them
        let after = state.student.get("enc/stem/w").unwrap().data();
        assert_ne!(before.as_slice(), after);
        for r in &rows {
            assert!(r.loss_total.is_finite());
            assert!(r.teacher_entropy > 0.0);
        }
    }

    #[test]
    fn loss_total_decomposes_exactly() {
        let corpus = tiny_corpus(4, 48);
        let mut state = TrainState::<f32>::new(tiny_cfg(2)).unwrap();
        let rows = pretrain(&mut state, &corpus, |_, _| Ok(())).unwrap();
        for r in &rows {
            let sum = r.loss_cls + r.loss_patch + r.loss_recon_g + r.loss_recon_l;
            assert!((r.loss_total - sum).abs() < 1e-6);
        }
    }

    #[test]
    fn disabled_terms_log_zero_and_total_matches() {
        let corpus = tiny_corpus(4, 48);
        let mut cfg = tiny_cfg(2);
        cfg.loss_rec_g_on = false;
        cfg.loss_rec_l_on = false;
        let mut state = TrainState::<f32>::new(cfg).unwrap();
        let rows = pretrain(&mut state, &corpus, |_, _| Ok(())).unwrap();
        for r in &rows {
            assert_eq!(r.loss_recon_g, 0.0);
            assert_eq!(r.loss_recon_l, 0.0);
            assert!((r.loss_total - (r.loss_cls + r.loss_patch)).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_metrics_bytes() {
        let corpus = tiny_corpus(5, 48);
        let run = || {
            let mut state = TrainState::<f32>::new(tiny_cfg(2)).unwrap();
            let rows = pretrain(&mut state, &corpus, |_, _| Ok(())).unwrap();
            metrics_to_csv(&rows)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let corpus = tiny_corpus(5, 48);
        let dir = tempfile::tempdir().unwrap();

        let mut full = TrainState::<f32>::new(tiny_cfg(3)).unwrap();
        let full_rows = pretrain(&mut full, &corpus, |_, _| Ok(())).unwrap();

        let mut first = TrainState::<f32>::new(tiny_cfg(3)).unwrap();
        let mut part_rows = Vec::new();
        while first.next_epoch < 2 {
            part_rows.extend(pretrain_epoch(&mut first, &corpus).unwrap());
        }
        let path = dir.path().join("ckpt.bin");
        checkpoint::save_state(&path, &first).unwrap();
        drop(first);

        let mut resumed = checkpoint::load_state::<f32>(&path).unwrap();
        part_rows.extend(pretrain(&mut resumed, &corpus, |_, _| Ok(())).unwrap());

        assert_eq!(metrics_to_csv(&full_rows), metrics_to_csv(&part_rows));
        for (name, arr) in full.student.iter() {
            assert_eq!(
                arr.data(),
                resumed.student.get(name).unwrap().data(),
                "student {name} diverged after resume"
            );
        }
    }

    #[test]
    fn teacher_stays_between_init_and_student() {
        // per-coordinate convex-hull invariant of the EMA trajectory
        let corpus = tiny_corpus(4, 48);
        let cfg = tiny_cfg(2);
        let init = TrainState::<f32>::new(cfg.clone()).unwrap();
        let init_vals: Vec<(String, Vec<f32>)> = init
            .student
            .iter()
            .map(|(n, a)| (n.to_string(), a.data().to_vec()))
            .collect();
        let mut state = TrainState::<f32>::new(cfg).unwrap();
        let mut mins: std::collections::HashMap<String, Vec<f32>> = init_vals
            .iter()
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        let mut maxs = mins.clone();
        for _ in 0..2 {
            pretrain_epoch(&mut state, &corpus).unwrap();
            for (name, arr) in state.student.iter() {
                let lo = mins.get_mut(name).unwrap();
                let hi = maxs.get_mut(name).unwrap();
                for (i, &v) in arr.data().iter().enumerate() {
                    lo[i] = lo[i].min(v);
                    hi[i] = hi[i].max(v);
                }
            }
        }
        for (name, arr) in state.teacher.iter() {
            let lo = &mins[name];
            let hi = &maxs[name];
            for (i, &v) in arr.data().iter().enumerate() {
                assert!(
                    v >= lo[i] - 1e-6 && v <= hi[i] + 1e-6,
                    "teacher {name}[{i}] left the hull"
                );
            }
        }
    }

    #[test]
    fn recon_only_isolates_gradients() {
        // with only the global reconstruction loss on, the projection head
        // must receive exactly zero update
        let corpus = tiny_corpus(4, 48);
        let mut cfg = tiny_cfg(2);
        cfg.loss_cls_on = false;
        cfg.loss_patch_on = false;
        cfg.loss_rec_l_on = false;
        // decoupled decay would shrink the head even with zero gradient
        cfg.weight_decay = 0.0;
        let mut state = TrainState::<f32>::new(cfg).unwrap();
        let head_before: Vec<f32> = state.student.get("head_cls/w1").unwrap().data().to_vec();
        let rec_before: Vec<f32> = state.student.get("rec/w").unwrap().data().to_vec();
        pretrain_epoch(&mut state, &corpus).unwrap();
        pretrain_epoch(&mut state, &corpus).unwrap();
        assert_eq!(
            head_before.as_slice(),
            state.student.get("head_cls/w1").unwrap().data(),
            "projection head moved without a distillation loss"
        );
        assert_ne!(
            rec_before.as_slice(),
            state.student.get("rec/w").unwrap().data(),
            "reconstruction head never moved"
        );
    }
}
