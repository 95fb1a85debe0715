//! Data pipeline: PGM corpus ingestion, synthetic speckle-phantom
//! generation, grayscale augmentation, and global/local view construction.
//! Everything downstream consumes pixels in [0, 1]; the pipeline runs in f32.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::array::Array;

pub type Image = Array<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Corpus,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Image,
    pub source: Source,
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit)

/// Decode a binary PGM (P5) payload to [0,1] grayscale.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    // header: magic, width, height, maxval, separated by whitespace and
    // optional '#' comment lines
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::format("non-ASCII PGM header"))?
                .to_string(),
        );
    }
    if fields[0] != "P5" {
        return Err(Error::format(format!("not a binary PGM (magic {})", fields[0])));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| Error::format("bad PGM width"))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| Error::format("bad PGM height"))?;
    let maxval: usize = fields[3]
        .parse()
        .map_err(|_| Error::format("bad PGM maxval"))?;
    if maxval != 255 {
        return Err(Error::format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and payload
    if pos >= bytes.len() {
        return Err(Error::format("missing PGM payload"));
    }
    pos += 1;
    let need = w * h;
    if bytes.len() < pos + need {
        return Err(Error::format(format!(
            "PGM payload short: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let data: Vec<f32> = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Array::new(vec![h, w], data)
}

/// Encode to binary PGM; values are clamped to [0,1] and quantized to 8 bit.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = img.dims2()?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Load every `.pgm` under `dir` in lexicographic file-stem order.
/// Malformed files are skipped with a log line on stderr.
pub fn load_corpus(dir: &Path) -> Result<Vec<ImageRecord>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = std::fs::read(&path)?;
        match decode_pgm(&bytes) {
            Ok(pixels) => out.push(ImageRecord {
                id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                pixels,
                source: Source::Corpus,
            }),
            Err(e) => eprintln!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic speckle phantoms

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SpecklePhantomSpec {
    pub image_size: usize,
    pub lesion_count_max: usize,
    /// Absolute echogenicity offset of a lesion; sign is drawn per lesion.
    pub contrast_range: (f64, f64),
    /// Rayleigh scale of the multiplicative speckle.
    pub speckle_shape: f64,
    /// Fractional intensity drop from top to bottom of the image.
    pub attenuation: f64,
    pub seed: u64,
}

impl Default for SpecklePhantomSpec {
    fn default() -> Self {
        SpecklePhantomSpec {
            image_size: 128,
            lesion_count_max: 3,
            contrast_range: (0.15, 0.35),
            speckle_shape: 0.35,
            attenuation: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionMeta {
    pub cx: usize,
    pub cy: usize,
    pub rx: usize,
    pub ry: usize,
    /// Signed echogenicity offset; negative = hypoechoic.
    pub contrast: f64,
}

impl LesionMeta {
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        (
            self.cx.saturating_sub(self.rx),
            self.cy.saturating_sub(self.ry),
            self.cx + self.rx,
            self.cy + self.ry,
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub record: ImageRecord,
    pub seed: u64,
    pub lesions: Vec<LesionMeta>,
}

// kept low so the Rayleigh tail rarely clips at 1.0, which would bias
// hyperechoic lesion contrast downward
const BACKGROUND_LEVEL: f64 = 0.3;

/// Background echogenicity with vertical attenuation, before speckle.
fn background_level(spec: &SpecklePhantomSpec, y: usize) -> f64 {
    let frac = y as f64 / spec.image_size as f64;
    BACKGROUND_LEVEL * (1.0 - spec.attenuation * frac)
}

/// One deterministic phantom per (spec, index). The speckle is normalized
/// to unit mean so lesion/background contrast survives in expectation.
pub fn synth_speckle(spec: &SpecklePhantomSpec, index: u64) -> Result<SynthRecord> {
    if spec.image_size == 0 || spec.speckle_shape <= 0.0 {
        return Err(Error::config("phantom spec needs positive size and speckle shape"));
    }
    let seed = mix_seed(spec.seed, 0x5eed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size;

    let n_lesions = rng.gen_range(0..=spec.lesion_count_max);
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let rx = rng.gen_range(s / 16..=s / 6).max(1);
        let ry = rng.gen_range(s / 16..=s / 6).max(1);
        let cx = rng.gen_range(rx..s - rx);
        let cy = rng.gen_range(ry..s - ry);
        let mag = rng.gen_range(spec.contrast_range.0..=spec.contrast_range.1);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        lesions.push(LesionMeta {
            cx,
            cy,
            rx,
            ry,
            contrast: sign * mag,
        });
    }

    let speckle_mean = spec.speckle_shape * (std::f64::consts::PI / 2.0).sqrt();
    // Rayleigh(sigma) by inverse transform: sigma * sqrt(-2 ln U)
    let sigma = spec.speckle_shape;
    let rayleigh = |rng: &mut ChaCha8Rng| -> f64 {
        let u: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        sigma * (-2.0 * u.ln()).sqrt()
    };

    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let mut level = background_level(spec, y);
            for l in &lesions {
                let dx = (x as f64 - l.cx as f64) / l.rx as f64;
                let dy = (y as f64 - l.cy as f64) / l.ry as f64;
                if dx * dx + dy * dy <= 1.0 {
                    level += l.contrast;
                }
            }
            let sp = rayleigh(&mut rng) / speckle_mean;
            data.push((level * sp).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(SynthRecord {
        record: ImageRecord {
            id: format!("synth{index:05}"),
            pixels: Array::new(vec![s, s], data)?,
            source: Source::Synthetic,
        },
        seed,
        lesions,
    })
}

/// Manifest: one line per image, "id seed lesion_count x0 y0 x1 y1 ...".
pub fn manifest_line(rec: &SynthRecord) -> String {
    let mut line = format!("{} {} {}", rec.record.id, rec.seed, rec.lesions.len());
    for l in &rec.lesions {
        let (x0, y0, x1, y1) = l.bbox();
        let _ = write!(line, " {x0} {y0} {x1} {y1}");
    }
    line
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub lesion_count: usize,
    pub bboxes: Vec<(usize, usize, usize, usize)>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::format(format!("manifest line {} too short", lineno + 1)));
        }
        let parse = |t: &str| -> Result<usize> {
            t.parse()
                .map_err(|_| Error::format(format!("manifest line {}: bad number", lineno + 1)))
        };
        let lesion_count = parse(toks[2])?;
        if toks.len() != 3 + 4 * lesion_count {
            return Err(Error::format(format!(
                "manifest line {}: expected {} bbox numbers",
                lineno + 1,
                4 * lesion_count
            )));
        }
        let mut bboxes = Vec::with_capacity(lesion_count);
        for k in 0..lesion_count {
            bboxes.push((
                parse(toks[3 + 4 * k])?,
                parse(toks[4 + 4 * k])?,
                parse(toks[5 + 4 * k])?,
                parse(toks[6 + 4 * k])?,
            ));
        }
        out.push(ManifestEntry {
            id: toks[0].to_string(),
            seed: toks[1]
                .parse()
                .map_err(|_| Error::format("manifest: bad seed"))?,
            lesion_count,
            bboxes,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_jitter: f64,
    pub p_blur: f64,
    pub p_gamma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_jitter: 0.8,
            p_blur: 0.3,
            p_gamma: 0.3,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            p_flip: 0.0,
            p_jitter: 0.0,
            p_blur: 0.0,
            p_gamma: 0.0,
        }
    }
}

/// Parameters actually applied, for reproducibility records.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRecord {
    pub flip: bool,
    /// Multiplicative / additive jitter, None if skipped.
    pub jitter: Option<(f32, f32)>,
    pub blur_sigma: Option<f32>,
    pub gamma: Option<f32>,
}

pub fn hflip(img: &Image) -> Image {
    let (h, w) = img.dims2().expect("2-d image");
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set2(y, x, img.at2(y, w - 1 - x));
        }
    }
    out
}

/// Separable Gaussian blur with kernel radius ceil(2 sigma), edge clamp.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (2.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for k in -radius..=radius {
        kernel.push((-(k as f32).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let (h, w) = img.dims2().expect("2-d image");
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = Array::<f32>::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                acc += kv * img.at2(y, clamp(x as i64 + ki as i64 - radius, w));
            }
            tmp.set2(y, x, acc);
        }
    }
    let mut out = Array::<f32>::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                acc += kv * tmp.at2(clamp(y as i64 + ki as i64 - radius, h), x);
            }
            out.set2(y, x, acc);
        }
    }
    out
}

/// Flip / jitter / blur / gamma, each with its configured probability.
/// Output stays in [0,1].
pub fn augment<R: Rng>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> (Image, AugmentRecord) {
    let mut out = img.clone();
    let flip = rng.gen_bool(cfg.p_flip);
    if flip {
        out = hflip(&out);
    }
    let jitter = if rng.gen_bool(cfg.p_jitter) {
        let a = rng.gen_range(0.7..=1.3) as f32;
        let b = rng.gen_range(-0.2..=0.2) as f32;
        out = out.map(|v| (v * a + b).clamp(0.0, 1.0));
        Some((a, b))
    } else {
        None
    };
    let blur_sigma = if rng.gen_bool(cfg.p_blur) {
        let sigma = rng.gen_range(0.1..=1.0) as f32;
        out = gaussian_blur(&out, sigma);
        Some(sigma)
    } else {
        None
    };
    let gamma = if rng.gen_bool(cfg.p_gamma) {
        let g = rng.gen_range(0.7..=1.4) as f32;
        out = out.map(|v| v.max(0.0).powf(g).clamp(0.0, 1.0));
        Some(g)
    } else {
        None
    };
    (
        out,
        AugmentRecord {
            flip,
            jitter,
            blur_sigma,
            gamma,
        },
    )
}

// ---------------------------------------------------------------------------
// Views

pub fn bilinear_resize(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    let (h, w) = img.dims2()?;
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::shape("resize with empty dimension"));
    }
    let mut out = Array::<f32>::zeros(&[oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            // align-corners-false sampling
            let sy = ((oy as f32 + 0.5) * h as f32 / oh as f32 - 0.5).clamp(0.0, h as f32 - 1.0);
            let sx = ((ox as f32 + 0.5) * w as f32 / ow as f32 - 0.5).clamp(0.0, w as f32 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f32, sx - x0 as f32);
            let v = img.at2(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + img.at2(y0, x1) * (1.0 - fy) * fx
                + img.at2(y1, x0) * fy * (1.0 - fx)
                + img.at2(y1, x1) * fy * fx;
            out.set2(oy, ox, v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRecord {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Random resized crop with the given area-scale range, aspect in
/// [3/4, 4/3]. Ten attempts, then a center crop.
pub fn random_resized_crop<R: Rng>(
    img: &Image,
    scale: (f64, f64),
    out_side: usize,
    rng: &mut R,
) -> Result<(Image, CropRecord)> {
    let (h, w) = img.dims2()?;
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(0.75..=4.0 / 3.0);
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > w || ch > h {
            continue;
        }
        let x = rng.gen_range(0..=w - cw);
        let y = rng.gen_range(0..=h - ch);
        let crop = crop_image(img, x, y, cw, ch)?;
        return Ok((
            bilinear_resize(&crop, out_side, out_side)?,
            CropRecord { x, y, w: cw, h: ch },
        ));
    }
    // fallback: centered square crop
    let side = h.min(w);
    let x = (w - side) / 2;
    let y = (h - side) / 2;
    let crop = crop_image(img, x, y, side, side)?;
    Ok((
        bilinear_resize(&crop, out_side, out_side)?,
        CropRecord {
            x,
            y,
            w: side,
            h: side,
        },
    ))
}

fn crop_image(img: &Image, x: usize, y: usize, cw: usize, ch: usize) -> Result<Image> {
    let (h, w) = img.dims2()?;
    if x + cw > w || y + ch > h || cw == 0 || ch == 0 {
        return Err(Error::shape("crop outside image bounds"));
    }
    let mut out = Array::<f32>::zeros(&[ch, cw]);
    for i in 0..ch {
        for j in 0..cw {
            out.set2(i, j, img.at2(y + i, x + j));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub crop: CropRecord,
    pub aug: AugmentRecord,
}

#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub global_views: Vec<Image>,
    pub local_views: Vec<Image>,
    pub global_records: Vec<ViewRecord>,
    pub local_records: Vec<ViewRecord>,
}

pub const GLOBAL_SCALE: (f64, f64) = (0.4, 1.0);
pub const LOCAL_SCALE: (f64, f64) = (0.05, 0.4);

/// G global + L local augmented crops of one source image.
pub fn make_views<R: Rng>(
    img: &Image,
    g: usize,
    l: usize,
    s_g: usize,
    s_l: usize,
    aug_cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ViewBatch> {
    let mut batch = ViewBatch {
        global_views: Vec::with_capacity(g),
        local_views: Vec::with_capacity(l),
        global_records: Vec::with_capacity(g),
        local_records: Vec::with_capacity(l),
    };
    for _ in 0..g {
        let (crop, crec) = random_resized_crop(img, GLOBAL_SCALE, s_g, rng)?;
        let (view, arec) = augment(&crop, aug_cfg, rng);
        batch.global_views.push(view);
        batch.global_records.push(ViewRecord {
            crop: crec,
            aug: arec,
        });
    }
    for _ in 0..l {
        let (crop, crec) = random_resized_crop(img, LOCAL_SCALE, s_l, rng)?;
        let (view, arec) = augment(&crop, aug_cfg, rng);
        batch.local_views.push(view);
        batch.local_records.push(ViewRecord {
            crop: crec,
            aug: arec,
        });
    }
    Ok(batch)
}

/// Deterministic per-(seed, epoch, image) RNG stream; worker scheduling
/// cannot perturb it.
pub fn stream_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch, index))
}

/// splitmix64 over the three stream coordinates.
fn mix_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(index.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_decode_example() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
        let want = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (g, w) in img.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-6);
        }
    }

    #[test]
    fn pgm_roundtrip_byte_identical() {
        let bytes = b"P5\n3 2\n255\nabcdef".to_vec();
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(encode_pgm(&img).unwrap(), bytes);
    }

    #[test]
    fn pgm_rejects_bad_inputs() {
        assert!(decode_pgm(b"P2\n2 2\n255\nxxxx").is_err()); // ASCII variant
        assert!(decode_pgm(b"P5\n2 2\n255\nxx").is_err()); // short payload
        assert!(decode_pgm(b"P5\n2 2\n65535\nxxxx").is_err()); // 16-bit
        assert!(decode_pgm(b"P5\n2").is_err()); // truncated header
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\nab";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!(img.shape(), &[1, 2]);
    }

    #[test]
    fn corpus_loads_sorted_and_skips_malformed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.pgm"), b"P5\n1 1\n255\nx").unwrap();
        std::fs::write(dir.path().join("a.pgm"), b"P5\n1 1\n255\ny").unwrap();
        std::fs::write(dir.path().join("broken.pgm"), b"P5\n9 9\n255\nzz").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let recs = load_corpus(dir.path()).unwrap();
        let ids: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn empty_corpus_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn phantom_is_deterministic() {
        let spec = SpecklePhantomSpec::default();
        let a = synth_speckle(&spec, 7).unwrap();
        let b = synth_speckle(&spec, 7).unwrap();
        assert_eq!(a.record.pixels.data(), b.record.pixels.data());
        assert_eq!(a.lesions, b.lesions);
        let c = synth_speckle(&spec, 8).unwrap();
        assert_ne!(a.record.pixels.data(), c.record.pixels.data());
    }

    #[test]
    fn phantom_pixels_in_unit_range() {
        let spec = SpecklePhantomSpec::default();
        for idx in 0..5 {
            let rec = synth_speckle(&spec, idx).unwrap();
            for &v in rec.record.pixels.data() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn zero_contrast_means_no_visible_lesions() {
        let spec = SpecklePhantomSpec {
            contrast_range: (0.0, 0.0),
            ..Default::default()
        };
        let rec = synth_speckle(&spec, 3).unwrap();
        for l in &rec.lesions {
            assert_eq!(l.contrast, 0.0);
        }
    }

    #[test]
    fn lesion_contrast_survives_speckle_in_expectation() {
        // Monte-Carlo oracle: interior minus background mean tracks the
        // configured contrast within 10%
        let spec = SpecklePhantomSpec {
            contrast_range: (0.2, 0.2),
            attenuation: 0.0,
            ..Default::default()
        };
        let mut diffs = Vec::new();
        for idx in 0..200 {
            let rec = synth_speckle(&spec, idx).unwrap();
            if rec.lesions.len() != 1 {
                continue; // single-lesion images only, to avoid overlap bias
            }
            let l = rec.lesions[0];
            let s = spec.image_size;
            let (mut ins, mut inn, mut outs, mut outn) = (0.0f64, 0usize, 0.0f64, 0usize);
            for y in 0..s {
                for x in 0..s {
                    let dx = (x as f64 - l.cx as f64) / l.rx as f64;
                    let dy = (y as f64 - l.cy as f64) / l.ry as f64;
                    let v = rec.record.pixels.at2(y, x) as f64;
                    if dx * dx + dy * dy <= 0.8 {
                        ins += v;
                        inn += 1;
                    } else if dx * dx + dy * dy > 1.5 {
                        outs += v;
                        outn += 1;
                    }
                }
            }
            // signed so hypo- and hyperechoic lesions agree in sign
            let d = (ins / inn as f64 - outs / outn as f64) * l.contrast.signum();
            diffs.push(d);
        }
        assert!(diffs.len() > 15, "not enough single-lesion samples");
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(
            (mean - 0.2).abs() < 0.02,
            "contrast washed out: measured {mean:.3} over {} images",
            diffs.len()
        );
    }

    #[test]
    fn manifest_roundtrip() {
        let spec = SpecklePhantomSpec::default();
        let rec = synth_speckle(&spec, 1).unwrap();
        let line = manifest_line(&rec);
        let parsed = parse_manifest(&line).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].id, rec.record.id);
        assert_eq!(parsed[0].lesion_count, rec.lesions.len());
        for (b, l) in parsed[0].bboxes.iter().zip(&rec.lesions) {
            assert_eq!(*b, l.bbox());
        }
        assert!(parse_manifest("img 1 2 0 0 5 5").is_err()); // missing bbox
    }

    #[test]
    fn augment_identity_when_disabled() {
        let mut rng = stream_rng(0, 0, 0);
        let img = synth_speckle(&SpecklePhantomSpec::default(), 0)
            .unwrap()
            .record
            .pixels;
        let (out, rec) = augment(&img, &AugmentConfig::none(), &mut rng);
        assert_eq!(out.data(), img.data());
        assert_eq!(
            rec,
            AugmentRecord {
                flip: false,
                jitter: None,
                blur_sigma: None,
                gamma: None
            }
        );
    }

    #[test]
    fn flip_is_an_involution() {
        let img = synth_speckle(&SpecklePhantomSpec::default(), 2)
            .unwrap()
            .record
            .pixels;
        assert_eq!(hflip(&hflip(&img)).data(), img.data());
    }

    #[test]
    fn augment_stays_in_unit_range() {
        let cfg = AugmentConfig {
            p_flip: 1.0,
            p_jitter: 1.0,
            p_blur: 1.0,
            p_gamma: 1.0,
        };
        let img = synth_speckle(&SpecklePhantomSpec::default(), 4)
            .unwrap()
            .record
            .pixels;
        for k in 0..20 {
            let mut rng = stream_rng(9, 0, k);
            let (out, _) = augment(&img, &cfg, &mut rng);
            for &v in out.data() {
                assert!((0.0..=1.0).contains(&v), "pixel {v} escaped [0,1]");
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Array::full(&[8, 8], 0.4f32);
        let out = gaussian_blur(&img, 0.8);
        for &v in out.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_is_exact_on_constants_and_identity() {
        let img = Array::full(&[6, 6], 0.7f32);
        let up = bilinear_resize(&img, 11, 5).unwrap();
        for &v in up.data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
        let rec = synth_speckle(&SpecklePhantomSpec::default(), 5)
            .unwrap()
            .record
            .pixels;
        let same = bilinear_resize(&rec, 128, 128).unwrap();
        for (a, b) in same.data().iter().zip(rec.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn views_have_contracted_counts_and_shapes() {
        let img = synth_speckle(&SpecklePhantomSpec::default(), 6)
            .unwrap()
            .record
            .pixels;
        let mut rng = stream_rng(1, 0, 6);
        let batch = make_views(&img, 2, 8, 64, 32, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(batch.global_views.len(), 2);
        assert_eq!(batch.local_views.len(), 8);
        for v in &batch.global_views {
            assert_eq!(v.shape(), &[64, 64]);
        }
        for v in &batch.local_views {
            assert_eq!(v.shape(), &[32, 32]);
        }
    }

    #[test]
    fn view_stream_is_deterministic() {
        let img = synth_speckle(&SpecklePhantomSpec::default(), 6)
            .unwrap()
            .record
            .pixels;
        let run = || {
            let mut rng = stream_rng(42, 3, 6);
            make_views(&img, 2, 4, 64, 32, &AugmentConfig::default(), &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.global_views.iter().zip(&b.global_views) {
            assert_eq!(x.data(), y.data());
        }
        for (x, y) in a.local_records.iter().zip(&b.local_records) {
            assert_eq!(x, y);
        }
        // different epoch -> different stream
        let mut rng = stream_rng(42, 4, 6);
        let c = make_views(&img, 2, 4, 64, 32, &AugmentConfig::default(), &mut rng).unwrap();
        assert_ne!(a.global_views[0].data(), c.global_views[0].data());
    }

    #[test]
    fn tiny_image_falls_back_to_center_crop() {
        // 4x4 source: most sampled crops are degenerate at local scales, and
        // the fallback must still produce the requested output size
        let img = Array::full(&[4, 4], 0.5f32);
        let mut rng = stream_rng(0, 0, 1);
        let (view, _) = random_resized_crop(&img, (0.05, 0.4), 32, &mut rng).unwrap();
        assert_eq!(view.shape(), &[32, 32]);
    }
}
