//! Frozen-feature linear probe: extract summary-token features from a
//! frozen encoder, train a logistic head with SGD + momentum, and report
//! accuracy and F1 over several seeded splits.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{bilinear_resize, stream_rng, Image};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::params::{ParamBinder, ParamSet};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::Tape;

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_frac: f64,
    /// Images are resized to this side before feature extraction.
    pub input_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            lr: 1e-3,
            momentum: 0.9,
            train_frac: 0.8,
            input_size: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Image,
    /// Lesion present.
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub f1_macro: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub per_seed: Vec<SeedResult>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,accuracy,f1_macro\n");
        for r in &self.per_seed {
            out.push_str(&format!(
                "{},{:.9e},{:.9e}\n",
                r.seed, r.accuracy, r.f1_macro
            ));
        }
        out.push_str(&format!(
            "mean,{:.9e},{:.9e}\nstd,{:.9e},{:.9e}\n",
            self.acc_mean, self.f1_mean, self.acc_std, self.f1_std
        ));
        out
    }

    pub fn to_text(&self) -> String {
        format!(
            "linear probe over {} seeds\n  accuracy: {:.4} +/- {:.4}\n  f1_macro: {:.4} +/- {:.4}\n",
            self.per_seed.len(),
            self.acc_mean,
            self.acc_std,
            self.f1_mean,
            self.f1_std
        )
    }
}

/// Frozen forward pass: summary-token features for each image, resized to
/// the probe input size. Takes the parameters immutably; nothing trains.
pub fn extract_features<E: Scalar>(
    params: &ParamSet<E>,
    enc_cfg: &EncoderConfig,
    images: &[Image],
    input_size: usize,
) -> Result<Vec<Vec<f64>>> {
    enc_cfg.validate_input_side(input_size)?;
    let mut feats = Vec::with_capacity(images.len());
    for img in images {
        let resized = bilinear_resize(img, input_size, input_size)?;
        let tape = Tape::new();
        let mut bind = ParamBinder::new(&tape, params);
        let x = crate::tensor::array::Array::new(
            resized.shape().to_vec(),
            resized.data().iter().map(|&v| E::c(v as f64)).collect(),
        )?;
        let out = encode(&mut bind, enc_cfg, &x, None)?;
        let cls = tape.value(out.cls);
        feats.push(cls.data().iter().map(|v| v.f64()).collect());
    }
    Ok(feats)
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// F1 for one class (precision/recall harmonic mean); empty denominator
/// yields 0.
pub fn f1_score(preds: &[bool], labels: &[bool], positive: bool) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fne = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        let (p, y) = (p == positive, y == positive);
        match (p, y) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
            (false, false) => {}
        }
    }
    if 2.0 * tp + fp + fne == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fne)
}

pub fn f1_macro(preds: &[bool], labels: &[bool]) -> f64 {
    0.5 * (f1_score(preds, labels, true) + f1_score(preds, labels, false))
}

pub fn accuracy(preds: &[bool], labels: &[bool]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

fn assert_both_classes(labels: &[bool], what: &str) -> Result<()> {
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::config(format!("{what} split has a single class")));
    }
    Ok(())
}

/// Logistic head trained with per-sample SGD + momentum on standardized
/// features. Returns (weights, bias).
fn train_head(
    x: &[Vec<f64>],
    y: &[bool],
    cfg: &ProbeConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let mut w = vec![0.0f64; d];
    let mut b = 0.0f64;
    let mut vw = vec![0.0f64; d];
    let mut vb = 0.0f64;
    let mut order: Vec<usize> = (0..x.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for &i in &order {
            let z: f64 = b + w.iter().zip(&x[i]).map(|(wv, xv)| wv * xv).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - if y[i] { 1.0 } else { 0.0 };
            for j in 0..d {
                vw[j] = cfg.momentum * vw[j] + err * x[i][j];
                w[j] -= cfg.lr * vw[j];
            }
            vb = cfg.momentum * vb + err;
            b -= cfg.lr * vb;
        }
    }
    (w, b)
}

fn predict(w: &[f64], b: f64, x: &[Vec<f64>]) -> Vec<bool> {
    x.iter()
        .map(|f| b + w.iter().zip(f).map(|(wv, xv)| wv * xv).sum::<f64>() > 0.0)
        .collect()
}

/// One seeded run: split, standardize on the train statistics, train the
/// head, score the held-out split.
pub fn probe_once(
    features: &[Vec<f64>],
    labels: &[bool],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<SeedResult> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::config("features/labels length mismatch or empty"));
    }
    let n = features.len();
    let mut rng = stream_rng(seed, 0, 0x70726f6265);
    // stratified split: each class contributes proportionally, so both
    // splits carry both classes whenever the class counts allow it
    let mut train_idx: Vec<usize> = Vec::new();
    let mut test_idx: Vec<usize> = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64) * cfg.train_frac).round() as usize;
        train_idx.extend(&idx[..k]);
        test_idx.extend(&idx[k..]);
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::config("train_frac leaves an empty split"));
    }
    let (train_idx, test_idx) = (train_idx.as_slice(), test_idx.as_slice());

    let y_train: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<bool> = test_idx.iter().map(|&i| labels[i]).collect();
    assert_both_classes(&y_train, "train")?;
    assert_both_classes(&y_test, "test")?;

    let d = features[0].len();
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for &i in train_idx {
        for j in 0..d {
            mean[j] += features[i][j];
        }
    }
    for m in &mut mean {
        *m /= train_idx.len() as f64;
    }
    for &i in train_idx {
        for j in 0..d {
            let c = features[i][j] - mean[j];
            var[j] += c * c;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / train_idx.len() as f64).sqrt().max(1e-8))
        .collect();
    let standardize = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                (0..d)
                    .map(|j| (features[i][j] - mean[j]) / std[j])
                    .collect()
            })
            .collect()
    };
    let x_train = standardize(train_idx);
    let x_test = standardize(test_idx);

    let (w, b) = train_head(&x_train, &y_train, cfg, &mut rng);
    let preds = predict(&w, b, &x_test);
    Ok(SeedResult {
        seed,
        accuracy: accuracy(&preds, &y_test),
        f1_macro: f1_macro(&preds, &y_test),
    })
}

/// Full report over several seeds on precomputed frozen features.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[bool],
    cfg: &ProbeConfig,
    seeds: &[u64],
) -> Result<ProbeReport> {
    if seeds.is_empty() {
        return Err(Error::config("need at least one seed"));
    }
    let per_seed: Vec<SeedResult> = seeds
        .iter()
        .map(|&s| probe_once(features, labels, cfg, s))
        .collect::<Result<_>>()?;
    let accs: Vec<f64> = per_seed.iter().map(|r| r.accuracy).collect();
    let f1s: Vec<f64> = per_seed.iter().map(|r| r.f1_macro).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    let (f1_mean, f1_std) = mean_std(&f1s);
    Ok(ProbeReport {
        per_seed,
        acc_mean,
        acc_std,
        f1_mean,
        f1_std,
    })
}
