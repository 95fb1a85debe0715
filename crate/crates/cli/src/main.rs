//! Command-line surface: synthetic corpus generation, pre-training,
//! linear probing, mask inspection, and the ablation grid.
//!
//! Every failure exits nonzero with a one-line diagnostic; output files are
//! written atomically (temp + rename) so a failed run leaves no partial
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use sonossl_core::data::{
    decode_pgm, encode_pgm, load_corpus, manifest_line, parse_manifest, synth_speckle,
    bilinear_resize, stream_rng, Image, SpecklePhantomSpec,
};
use sonossl_core::encoder::{encode, extract_attention_map};
use sonossl_core::masking::{
    alpha_schedule, compute_alp, ratio_schedule, self_adaptive_mask, MaskScheduleState,
};
use sonossl_core::probe::{extract_features, linear_probe, ProbeConfig};
use sonossl_core::tensor::params::ParamBinder;
use sonossl_core::tensor::tape::Tape;
use sonossl_core::train::ablate::{ablate_grid, ablate_to_csv};
use sonossl_core::train::checkpoint::{load_state, save_state};
use sonossl_core::train::{metrics_to_csv, pretrain, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "sonossl", about = "Ultrasound self-supervised pretraining workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic speckle-phantom corpus (PGM + manifest).
    GenSynth {
        /// TOML phantom spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Pre-train on a PGM corpus; writes checkpoints and metrics.csv.
    Pretrain {
        /// TOML training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe of frozen features on a labeled synthetic task.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with PGMs plus the generation manifest (labels).
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Where to write the CSV report (text goes to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention, reconstruction-difficulty, combined priority, and
    /// the resulting mask for one image at a simulated epoch.
    InspectMask {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch_sim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 6-cell mask-strategy x view-count grid from a TOML spec.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn gen_synth(spec: Option<PathBuf>, out: PathBuf, count: usize) -> Result<()> {
    if count == 0 {
        bail!("--count must be positive");
    }
    let spec = match spec {
        Some(p) => toml::from_str::<SpecklePhantomSpec>(&read_to_string(&p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SpecklePhantomSpec::default(),
    };
    let mut manifest = String::new();
    let mut files = Vec::with_capacity(count);
    for i in 0..count {
        let rec = synth_speckle(&spec, i as u64)?;
        manifest.push_str(&manifest_line(&rec));
        manifest.push('\n');
        files.push((
            format!("{}.pgm", rec.record.id),
            encode_pgm(&rec.record.pixels)?,
        ));
    }
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
    }
    write_atomic(&out.join("manifest.txt"), manifest.as_bytes())?;
    println!(
        "wrote {count} phantoms and manifest.txt to {}",
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    config: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let cfg = match &config {
        Some(p) => TrainConfig::from_toml(&read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let corpus = load_corpus(&data)?;
    if corpus.is_empty() {
        bail!("no PGM images under {}", data.display());
    }
    let mut state = match resume {
        Some(p) => {
            let state = load_state::<f64>(&p)?;
            if state.cfg != cfg {
                bail!("checkpoint config differs from --config; refusing to resume");
            }
            state
        }
        None => TrainState::<f64>::new(cfg.clone())?,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let ckpt_dir = out.clone();
    let rows = pretrain(&mut state, &corpus, |st, _rows| {
        let path = ckpt_dir.join(format!("ckpt-epoch{:03}.bin", st.next_epoch));
        save_state(&path, st)
    })?;
    save_state(&out.join("ckpt-final.bin"), &state)?;
    write_atomic(&out.join("metrics.csv"), metrics_to_csv(&rows).as_bytes())?;
    println!(
        "trained {} epochs ({} steps); outputs in {}",
        state.cfg.epochs,
        state.global_step,
        out.display()
    );
    Ok(())
}

fn labels_for(task: &Path, ids: &[String]) -> Result<Vec<bool>> {
    let manifest = parse_manifest(&read_to_string(&task.join("manifest.txt"))?)?;
    ids.iter()
        .map(|id| {
            manifest
                .iter()
                .find(|e| &e.id == id)
                .map(|e| e.lesion_count > 0)
                .ok_or_else(|| anyhow!("image {id} missing from manifest"))
        })
        .collect()
}

fn cmd_probe(ckpt: PathBuf, task: PathBuf, seeds: u64, out: Option<PathBuf>) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    let state = load_state::<f64>(&ckpt)?;
    let corpus = load_corpus(&task)?;
    if corpus.is_empty() {
        bail!("no PGM images under {}", task.display());
    }
    let ids: Vec<String> = corpus.iter().map(|r| r.id.clone()).collect();
    let labels = labels_for(&task, &ids)?;
    let images: Vec<Image> = corpus.into_iter().map(|r| r.pixels).collect();

    let before: Vec<Vec<u8>> = state
        .teacher
        .iter()
        .map(|(_, a)| a.data().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let probe_cfg = ProbeConfig {
        input_size: state.cfg.global_size,
        ..Default::default()
    };
    let feats = extract_features(&state.teacher, &state.cfg.encoder, &images, probe_cfg.input_size)?;
    let after: Vec<Vec<u8>> = state
        .teacher
        .iter()
        .map(|(_, a)| a.data().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    if before != after {
        bail!("encoder parameters changed during feature extraction");
    }

    let seed_list: Vec<u64> = (0..seeds).collect();
    let report = linear_probe(&feats, &labels, &probe_cfg, &seed_list)?;
    print!("{}", report.to_text());
    if let Some(path) = out {
        write_atomic(&path, report.to_csv().as_bytes())?;
    }
    Ok(())
}

fn map_to_text(map: &[f64]) -> String {
    let mut s = String::new();
    for v in map {
        s.push_str(&format!("{v:.17e}\n"));
    }
    s
}

fn map_to_pgm(map: &[f64], side: usize) -> Result<Vec<u8>> {
    let img = Image::new(
        vec![side, side],
        map.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
    )?;
    Ok(encode_pgm(&img)?)
}

fn cmd_inspect_mask(ckpt: PathBuf, image: PathBuf, epoch_sim: usize, out: PathBuf) -> Result<()> {
    let state = load_state::<f64>(&ckpt)?;
    let cfg = &state.cfg;
    if epoch_sim >= cfg.epochs {
        bail!("--epoch-sim must be below the configured {} epochs", cfg.epochs);
    }
    let raw = decode_pgm(&fs::read(&image).with_context(|| format!("reading {}", image.display()))?)?;
    let img = bilinear_resize(&raw, cfg.global_size, cfg.global_size)?;
    let image_id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();

    let side = cfg.encoder.stem_grid_side(cfg.global_size);
    let n = side * side;
    let tape = Tape::new();
    let mut bind = ParamBinder::new(&tape, &state.teacher);
    let x = sonossl_core::Array::<f64>::new(
        img.shape().to_vec(),
        img.data().iter().map(|&v| v as f64).collect(),
    )?;
    let enc_out = encode(&mut bind, &cfg.encoder, &x, None)?;
    let (am, _) = extract_attention_map(&enc_out, &cfg.encoder)?;

    let snapshot = state.rec_ema.snapshot(&image_id);
    let sched = MaskScheduleState {
        t: epoch_sim,
        total: cfg.epochs,
        r0: cfg.r0,
        r_end: cfg.r_end,
        alpha_min: cfg.alpha_min,
        alpha_max: cfg.alpha_max,
    };
    let r_t = ratio_schedule(&sched);
    let alpha_eff = if snapshot.is_some() {
        alpha_schedule(&sched)
    } else {
        0.0
    };
    let rec = snapshot.unwrap_or_else(|| vec![0.0; n]);
    let alp = compute_alp(&am, &rec, alpha_eff)?;
    let thr = cfg.rat_m * r_t;
    let mut rng = stream_rng(cfg.seed, epoch_sim as u64, 0);
    let plan = self_adaptive_mask(&alp, cfg.rat_m, thr, &mut rng)?;

    let expect = (n as f64 * cfg.rat_m).ceil() as usize;
    if plan.n_masked != expect {
        bail!("mask invariant broken: {} masked, expected {expect}", plan.n_masked);
    }

    write_atomic(&out.join("am.pgm"), &map_to_pgm(&am, side)?)?;
    write_atomic(&out.join("rec.pgm"), &map_to_pgm(&rec, side)?)?;
    write_atomic(&out.join("alp.pgm"), &map_to_pgm(&alp.scores, side)?)?;
    let mask_px: Vec<f64> = plan.grid.iter().map(|&m| m as f64).collect();
    write_atomic(&out.join("mask.pgm"), &map_to_pgm(&mask_px, side)?)?;
    // full-precision dumps so the combined map is exactly recomputable
    write_atomic(&out.join("am.txt"), map_to_text(&am).as_bytes())?;
    write_atomic(&out.join("rec.txt"), map_to_text(&rec).as_bytes())?;
    write_atomic(&out.join("alp.txt"), map_to_text(&alp.scores).as_bytes())?;

    let summary = format!(
        "image: {image_id}\ngrid: {side}x{side} ({n} patches)\nepoch_sim: {epoch_sim}\n\
         rat_m: {}\nr_t: {r_t:.6}\nalpha_used: {:.6}\nthreshold_frac: {thr:.6}\n\
         masked: {}\npriority_driven: {}\nrandom: {}\n",
        cfg.rat_m,
        alp.alpha_used,
        plan.n_masked,
        plan.alp_driven_idx.len(),
        plan.random_idx.len(),
    );
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

/// TOML grid spec for `ablate`.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    data: PathBuf,
    out: PathBuf,
    #[serde(default = "default_probe_seeds")]
    probe_seeds: u64,
    #[serde(default = "default_probe_epochs")]
    probe_epochs: usize,
    #[serde(default)]
    train: TrainConfig,
}

fn default_probe_seeds() -> u64 {
    3
}
fn default_probe_epochs() -> usize {
    50
}

fn cmd_ablate(grid: PathBuf) -> Result<()> {
    let spec: GridSpec = toml::from_str(&read_to_string(&grid)?)
        .with_context(|| format!("parsing {}", grid.display()))?;
    spec.train.validate()?;
    let corpus = load_corpus(&spec.data)?;
    if corpus.is_empty() {
        bail!("no PGM images under {}", spec.data.display());
    }
    let ids: Vec<String> = corpus.iter().map(|r| r.id.clone()).collect();
    let labels = labels_for(&spec.data, &ids)?;
    let probe_cfg = ProbeConfig {
        epochs: spec.probe_epochs,
        input_size: spec.train.global_size,
        ..Default::default()
    };
    let seeds: Vec<u64> = (0..spec.probe_seeds).collect();
    let cells = ablate_grid::<f64>(&spec.train, &corpus, &labels, &probe_cfg, &seeds)?;
    let csv = ablate_to_csv(&cells);
    write_atomic(&spec.out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenSynth { spec, out, count } => gen_synth(spec, out, count),
        Cmd::Pretrain {
            config,
            data,
            out,
            resume,
        } => cmd_pretrain(config, data, out, resume),
        Cmd::Probe {
            ckpt,
            task,
            seeds,
            out,
        } => cmd_probe(ckpt, task, seeds, out),
        Cmd::InspectMask {
            ckpt,
            image,
            epoch_sim,
            out,
        } => cmd_inspect_mask(ckpt, image, epoch_sim, out),
        Cmd::Ablate { grid } => cmd_ablate(grid),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
