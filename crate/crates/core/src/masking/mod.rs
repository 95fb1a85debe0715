//! Mask generation: random blockwise masks for local views, self-adaptive
//! masks for global views, and the two training-time schedules (easy-to-hard
//! ALP fraction r_t and the attention/reconstruction balance alpha).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Binary per-patch mask on the stem token grid, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// 1 = masked, on the stem grid in row-major order.
    pub grid: Vec<u8>,
    pub n_masked: usize,
    /// Indices chosen by ALP ranking.
    pub alp_driven_idx: Vec<usize>,
    /// Indices chosen uniformly at random.
    pub random_idx: Vec<usize>,
}

impl MaskPlan {
    fn from_indices(n: usize, alp_idx: Vec<usize>, rand_idx: Vec<usize>) -> Self {
        let mut grid = vec![0u8; n];
        for &i in alp_idx.iter().chain(rand_idx.iter()) {
            grid[i] = 1;
        }
        let n_masked = alp_idx.len() + rand_idx.len();
        debug_assert_eq!(grid.iter().filter(|&&g| g == 1).count(), n_masked);
        MaskPlan {
            grid,
            n_masked,
            alp_driven_idx: alp_idx,
            random_idx: rand_idx,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.grid
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn all_masked(n: usize) -> Self {
        MaskPlan {
            grid: vec![1; n],
            n_masked: n,
            alp_driven_idx: Vec::new(),
            random_idx: (0..n).collect(),
        }
    }

    pub fn none_masked(n: usize) -> Self {
        MaskPlan {
            grid: vec![0; n],
            n_masked: 0,
            alp_driven_idx: Vec::new(),
            random_idx: Vec::new(),
        }
    }

    /// Downsample to a coarser token grid by majority vote within each
    /// factor x factor window; ties count as masked.
    pub fn downsample(&self, gh: usize, gw: usize, factor: usize) -> Result<Vec<u8>> {
        if gh * gw != self.grid.len() || gh % factor != 0 || gw % factor != 0 {
            return Err(Error::shape(format!(
                "mask grid {}x{} not divisible by factor {}",
                gh, gw, factor
            )));
        }
        let fh = gh / factor;
        let fw = gw / factor;
        let mut out = vec![0u8; fh * fw];
        for i in 0..fh {
            for j in 0..fw {
                let mut masked = 0usize;
                for di in 0..factor {
                    for dj in 0..factor {
                        let idx = (i * factor + di) * gw + (j * factor + dj);
                        masked += self.grid[idx] as usize;
                    }
                }
                let total = factor * factor;
                out[i * fw + j] = if 2 * masked >= total { 1 } else { 0 };
            }
        }
        Ok(out)
    }
}

/// Per-patch priority combining normalized teacher attention and normalized
/// student reconstruction-loss EMA.
#[derive(Debug, Clone)]
pub struct AlpMap {
    pub scores: Vec<f64>,
    pub alpha_used: f64,
    pub am_norm: Vec<f64>,
    pub rec_norm: Vec<f64>,
}

/// EMA of per-patch reconstruction loss, keyed by image id. Patches not yet
/// observed carry no value and adopt the first observation directly.
#[derive(Debug, Clone)]
pub struct RecLossEma {
    decay: f64,
    per_image: HashMap<String, Vec<Option<f64>>>,
}

impl RecLossEma {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config("EMA decay must be in [0, 1)"));
        }
        Ok(RecLossEma {
            decay,
            per_image: HashMap::new(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.per_image.contains_key(image_id)
    }

    /// EMA update at the observed (Some) patches only.
    pub fn update(&mut self, image_id: &str, per_patch_loss: &[Option<f64>]) -> Result<()> {
        if per_patch_loss
            .iter()
            .flatten()
            .any(|&v| v < 0.0 || !v.is_finite())
        {
            return Err(Error::domain("reconstruction loss must be finite and non-negative"));
        }
        let slot = self
            .per_image
            .entry(image_id.to_string())
            .or_insert_with(|| vec![None; per_patch_loss.len()]);
        if slot.len() != per_patch_loss.len() {
            return Err(Error::shape("per-patch loss length changed for image"));
        }
        for (s, obs) in slot.iter_mut().zip(per_patch_loss.iter()) {
            if let Some(new) = obs {
                *s = Some(match *s {
                    Some(old) => self.decay * old + (1.0 - self.decay) * new,
                    None => *new,
                });
            }
        }
        Ok(())
    }

    /// Current per-patch EMA; unobserved patches are filled with the minimum
    /// observed value so they rank lowest. None when the image was never seen.
    pub fn snapshot(&self, image_id: &str) -> Option<Vec<f64>> {
        let slot = self.per_image.get(image_id)?;
        let min_seen = slot
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let fill = if min_seen.is_finite() { min_seen } else { 0.0 };
        Some(slot.iter().map(|v| v.unwrap_or(fill)).collect())
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.per_image.keys().map(|s| s.as_str())
    }

    /// Raw entries for persistence: NaN marks an unobserved patch.
    pub fn export(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = self
            .per_image
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    v.iter().map(|o| o.unwrap_or(f64::NAN)).collect(),
                )
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import(decay: f64, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut ema = RecLossEma::new(decay)?;
        for (id, vals) in entries {
            let slot = vals
                .iter()
                .map(|&v| if v.is_nan() { None } else { Some(v) })
                .collect();
            ema.per_image.insert(id, slot);
        }
        Ok(ema)
    }
}

/// Training-time schedule state shared by r_t and alpha.
#[derive(Debug, Clone, Copy)]
pub struct MaskScheduleState {
    pub t: usize,
    pub total: usize,
    pub r0: f64,
    pub r_end: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl MaskScheduleState {
    pub fn new(t: usize, total: usize) -> Self {
        MaskScheduleState {
            t,
            total,
            r0: 0.1,
            r_end: 0.9,
            alpha_min: 0.1,
            alpha_max: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::config("schedule total must be positive"));
        }
        if self.t > self.total {
            return Err(Error::config("schedule t out of range"));
        }
        if !(0.0..=1.0).contains(&self.r0)
            || !(0.0..=1.0).contains(&self.r_end)
            || self.r0 > self.r_end
        {
            return Err(Error::config("need 0 <= r0 <= r_end <= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha_min)
            || !(0.0..=1.0).contains(&self.alpha_max)
            || self.alpha_min > self.alpha_max
        {
            return Err(Error::config("need 0 <= alpha_min <= alpha_max <= 1"));
        }
        Ok(())
    }
}

/// Linear easy-to-hard ramp of the ALP-driven mask fraction. Endpoints are
/// returned bit-exactly rather than through the interpolation arithmetic.
pub fn ratio_schedule(state: &MaskScheduleState) -> f64 {
    if state.t == 0 {
        return state.r0;
    }
    if state.t >= state.total {
        return state.r_end;
    }
    let frac = state.t as f64 / state.total as f64;
    state.r0 + frac * (state.r_end - state.r0)
}

/// Cosine ramp of alpha from alpha_min to alpha_max, endpoints bit-exact.
pub fn alpha_schedule(state: &MaskScheduleState) -> f64 {
    if state.t == 0 {
        return state.alpha_min;
    }
    if state.t >= state.total {
        return state.alpha_max;
    }
    let frac = state.t as f64 / state.total as f64;
    state.alpha_max
        - (state.alpha_max - state.alpha_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// ALP = (1 - alpha) * norm(AM) + alpha * norm(L_rec), each input
/// independently min-max normalized to [0,1] (constant input -> uniform 0.5).
pub fn compute_alp(am: &[f64], rec: &[f64], alpha: f64) -> Result<AlpMap> {
    if am.len() != rec.len() {
        return Err(Error::shape(format!(
            "attention map length {} vs rec map length {}",
            am.len(),
            rec.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain("alpha must be in [0, 1]"));
    }
    let am_norm = minmax(am);
    let rec_norm = minmax(rec);
    let scores = am_norm
        .iter()
        .zip(rec_norm.iter())
        .map(|(&a, &r)| (1.0 - alpha) * a + alpha * r)
        .collect();
    Ok(AlpMap {
        scores,
        alpha_used: alpha,
        am_norm,
        rec_norm,
    })
}

fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.5; v.len()];
    }
    v.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// Argsort descending, ties broken by lower index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Self-adaptive mask: the floor(N * thr_m) highest-ALP patches are always
/// masked; the remainder up to ceil(N * rat_m) is drawn uniformly from the
/// non-top set.
pub fn self_adaptive_mask<R: Rng>(
    alp: &AlpMap,
    rat_m: f64,
    thr_m: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let n = alp.scores.len();
    if !(0.0 < rat_m && rat_m <= 1.0) {
        return Err(Error::domain("rat_m must be in (0, 1]"));
    }
    if !(0.0..=rat_m).contains(&thr_m) {
        return Err(Error::domain("thr_m must be in [0, rat_m]"));
    }
    let n_mask = (n as f64 * rat_m).ceil() as usize;
    let top_k = (n as f64 * thr_m).floor() as usize;
    let order = argsort_desc(&alp.scores);

    if top_k >= n_mask {
        let alp_idx = order[..n_mask].to_vec();
        return Ok(MaskPlan::from_indices(n, alp_idx, Vec::new()));
    }
    let alp_idx = order[..top_k].to_vec();
    let mut non_top: Vec<usize> = order[top_k..].to_vec();
    non_top.sort_unstable();
    let need = n_mask - top_k;
    let rand_idx: Vec<usize> = non_top.choose_multiple(rng, need).copied().collect();
    Ok(MaskPlan::from_indices(n, alp_idx, rand_idx))
}

/// BEiT-style random blockwise mask with an exact-count trim.
pub fn random_blockwise_mask<R: Rng>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPlan> {
    let n = grid_h * grid_w;
    if !(0.0 < ratio && ratio <= 1.0) {
        return Err(Error::domain("mask ratio must be in (0, 1]"));
    }
    let target = (n as f64 * ratio).ceil() as usize;

    // grid too small for the minimum block: plain uniform patch mask
    if n < 4 {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(target);
        return Ok(MaskPlan::from_indices(n, Vec::new(), idx));
    }

    let max_area = (0.4 * n as f64).max(4.0);
    let mut grid = vec![0u8; n];
    let mut masked = 0usize;
    let mut attempts = 0usize;
    while masked < target {
        attempts += 1;
        if attempts > 1000 {
            // fill the remainder uniformly; keeps the exact-count contract
            let unmasked: Vec<usize> = (0..n).filter(|&i| grid[i] == 0).collect();
            for &i in unmasked.choose_multiple(rng, target - masked) {
                grid[i] = 1;
                masked += 1;
            }
            break;
        }
        let area = rng.gen_range(4.0..=max_area);
        let aspect = rng.gen_range(0.3..=(1.0 / 0.3));
        let bh = ((area * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let bw = ((area / aspect).sqrt().round() as usize).clamp(1, grid_w);
        let top = rng.gen_range(0..=(grid_h - bh));
        let left = rng.gen_range(0..=(grid_w - bw));
        for i in top..top + bh {
            for j in left..left + bw {
                let k = i * grid_w + j;
                if grid[k] == 0 {
                    grid[k] = 1;
                    masked += 1;
                }
            }
        }
    }

    // trim excess uniformly at random
    if masked > target {
        let on: Vec<usize> = (0..n).filter(|&i| grid[i] == 1).collect();
        for &i in on.choose_multiple(rng, masked - target) {
            grid[i] = 0;
        }
    }
    let idx: Vec<usize> = (0..n).filter(|&i| grid[i] == 1).collect();
    Ok(MaskPlan::from_indices(n, Vec::new(), idx))
}
