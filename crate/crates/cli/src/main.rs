//! Command-line driver: dataset generation, source training, two-stage
//! adaptation, evaluation, comparison tables, and overlay rendering.
//! Every command is deterministic given its flags and writes a provenance
//! sidecar (config hash + input hashes) beside its outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rowadapt_core::adapt::{adapt_pipeline, AdaptConfig, AdaptReport};
use rowadapt_core::data::{
    load_dataset, load_model, save_model, sha256_hex, write_png, Dataset, Provenance,
};
use rowadapt_core::eval::{compare_report, mean_l1, render_overlay, EvalReport};
use rowadapt_core::net::{
    chw_to_image, image_to_chw, predict_image, train_source, KeypointNet, TrainConfig,
};
use rowadapt_core::sim::{generate_dataset, DomainAppearance, PoseRanges, DEFAULT_IMU_SIGMA};
use rowadapt_core::{CameraRig, Eye, RowGeometry};

/// Stereo rig plus row layout, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneConfig {
    rig: CameraRig,
    rows: RowGeometry,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rig: CameraRig {
                fx: 100.0,
                fy: 100.0,
                cx: 80.0,
                cy: 60.0,
                width: 160,
                height: 120,
                baseline: 0.10,
                cam_height: 0.45,
            },
            rows: RowGeometry {
                row_spacing: 0.76,
                robot_width: 0.50,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EyeArg {
    Left,
    Right,
}

impl From<EyeArg> for Eye {
    fn from(e: EyeArg) -> Eye {
        match e {
            EyeArg::Left => Eye::Left,
            EyeArg::Right => Eye::Right,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "rowadapt",
    about = "Crop-row keypoint perception: synthetic data, training, self-supervised adaptation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic stereo dataset with exact ground truth.
    Gen {
        /// Appearance preset: early_corn, late_corn_green, late_corn_brown, orchard.
        #[arg(long)]
        domain: String,
        /// Number of stereo samples.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Optional scene JSON overriding the default rig and row layout.
        #[arg(long)]
        scene: Option<PathBuf>,
        /// IMU roll noise, degrees (1 sigma).
        #[arg(long, default_value_t = DEFAULT_IMU_SIGMA.to_degrees())]
        imu_sigma_deg: f64,
    },
    /// Supervised source-domain training; writes a model artifact + loss curve.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Optional training config JSON (TrainConfig fields).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Two-stage self-supervised adaptation on an unlabeled target set.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Optional adaptation config JSON (AdaptConfig fields).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run stage 1 even if the disparity gate says no.
        #[arg(long)]
        force_stage1: bool,
        /// Never run stage 1.
        #[arg(long, conflicts_with = "force_stage1")]
        skip_stage1: bool,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        stage1_max_steps: Option<usize>,
        #[arg(long)]
        stage2_epochs: Option<usize>,
    },
    /// Per-keypoint mean L1 on a labeled set; writes a JSON report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = EyeArg::Left)]
        eye: EyeArg,
        /// Adaptation dataset whose sample ids must not overlap the labeled set.
        #[arg(long)]
        adaptation_data: Option<PathBuf>,
    },
    /// Evaluate two models on the same labeled set and tabulate reductions.
    Compare {
        #[arg(long)]
        before_model: PathBuf,
        #[arg(long)]
        after_model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for comparison.csv / comparison.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = EyeArg::Left)]
        eye: EyeArg,
    },
    /// Render prediction-vs-ground-truth overlays for the first n samples.
    Viz {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn hash_input(path: &Path) -> Result<String> {
    // datasets are identified by their manifest, plain files by their bytes
    let manifest = path.join("manifest.jsonl");
    let bytes = if manifest.is_file() {
        fs::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?
    } else {
        fs::read(path).with_context(|| format!("reading {}", path.display()))?
    };
    Ok(sha256_hex(&bytes))
}

#[derive(Serialize)]
struct ProvenanceSidecar {
    command: String,
    seed: Option<u64>,
    config_hash: String,
    inputs: Vec<(String, String)>,
}

fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

fn write_provenance(
    output: &Path,
    command: &str,
    cfg_hash: String,
    inputs: &[&Path],
    seed: Option<u64>,
) -> Result<()> {
    let mut hashed = Vec::new();
    for p in inputs {
        hashed.push((p.display().to_string(), hash_input(p)?));
    }
    let sidecar = ProvenanceSidecar {
        command: command.to_string(),
        seed,
        config_hash: cfg_hash,
        inputs: hashed,
    };
    let path = if output.extension().is_some() {
        output.with_extension(format!(
            "{}.provenance.json",
            output.extension().unwrap().to_string_lossy()
        ))
    } else {
        output.join("provenance.json")
    };
    write_json(&path, &sidecar)
}

fn load_net(path: &Path) -> Result<(KeypointNet, String)> {
    let artifact = load_model(path)?;
    let hash = hash_input(path)?;
    Ok((KeypointNet::from_artifact(&artifact)?, hash))
}

fn adaptation_ids(path: &Option<PathBuf>) -> Result<Option<BTreeSet<String>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let ds = load_dataset(p)?;
            Ok(Some(ds.records.iter().map(|r| r.id.clone()).collect()))
        }
    }
}

fn eval_report(net: &KeypointNet, hash: &str, data: &Dataset, eye: Eye) -> Result<EvalReport> {
    Ok(mean_l1(net, data, eye, None, hash)?)
}

fn cmd_gen(
    domain: &str,
    n: usize,
    seed: u64,
    out: &Path,
    scene: &Option<PathBuf>,
    imu_sigma_deg: f64,
) -> Result<()> {
    let scene_cfg: SceneConfig = match scene {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    let appearance = DomainAppearance::preset(domain)
        .with_context(|| format!("unknown --domain {domain:?} (see presets in the docs)"))?;
    let ds = generate_dataset(
        &scene_cfg.rig,
        &scene_cfg.rows,
        &appearance,
        &PoseRanges::default(),
        n,
        imu_sigma_deg.to_radians(),
        seed,
        out,
    )?;
    write_provenance(out, "gen", config_hash(&(&scene_cfg, domain, n, imu_sigma_deg))?, &[], Some(seed))?;
    println!(
        "gen: {} samples of {domain} -> {} (manifest {})",
        ds.len(),
        out.display(),
        &ds.manifest_hash()?[..12]
    );
    Ok(())
}

fn cmd_train_source(
    data: &Path,
    out: &Path,
    seed: u64,
    config: &Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    let rig = &ds.header.rig;
    let mut net = KeypointNet::new(rig.width, rig.height, seed);
    let history = train_source(&mut net, &ds, &cfg)?;
    let hash = config_hash(&cfg)?;
    let artifact = net.to_artifact(Provenance {
        stage: "source".into(),
        seed,
        config_hash: hash.clone(),
    });
    save_model(out, &artifact)?;
    let mut curve = String::from("epoch,mean_loss\n");
    for (i, l) in history.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    fs::write(out.with_extension("loss.csv"), curve)?;
    write_provenance(out, "train-source", hash, &[data], Some(seed))?;
    println!(
        "train-source: {} epochs on {} samples, final loss {:.6} -> {}",
        cfg.epochs,
        ds.len(),
        history.last().copied().unwrap_or(f32::NAN),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(
    model: &Path,
    data: &Path,
    out: &Path,
    seed: u64,
    config: &Option<PathBuf>,
    force_stage1: bool,
    skip_stage1: bool,
    iterations: Option<usize>,
    stage1_max_steps: Option<usize>,
    stage2_epochs: Option<usize>,
) -> Result<()> {
    let (mut net, _) = load_net(model)?;
    let ds = load_dataset(data)?;
    let mut cfg: AdaptConfig = match config {
        Some(p) => read_json(p)?,
        None => AdaptConfig::default(),
    };
    cfg.seed = seed;
    cfg.force_stage1 |= force_stage1;
    cfg.skip_stage1 |= skip_stage1;
    if let Some(i) = iterations {
        cfg.pseudo_iterations = i;
    }
    if let Some(s) = stage1_max_steps {
        cfg.stage1_max_steps = s;
    }
    if let Some(e) = stage2_epochs {
        cfg.stage2_epochs = e;
    }
    let report = adapt_pipeline(&ds.header.rig, &ds.header.rows, &mut net, &ds, &cfg)?;
    let hash = config_hash(&cfg)?;
    let artifact = net.to_artifact(Provenance {
        stage: "adapted".into(),
        seed,
        config_hash: hash.clone(),
    });
    save_model(out, &artifact)?;
    write_json(&out.with_extension("report.json"), &report)?;
    fs::write(out.with_extension("metrics.csv"), adapt_metrics_csv(&report))?;
    write_provenance(out, "adapt", hash, &[model, data], Some(seed))?;
    println!(
        "adapt: stage1_ran={} gate_fraction={:.3} pseudo_counts={:?} -> {}",
        report.stage1_ran,
        report.gate_fraction,
        report.pseudo_counts,
        out.display()
    );
    Ok(())
}

fn adapt_metrics_csv(report: &AdaptReport) -> String {
    let mut out = String::from("iteration,pseudo_labels\n");
    for (i, c) in report.pseudo_counts.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, c));
    }
    out.push_str("\ngroup,delta_norm\n");
    for (g, d) in &report.group_delta_norms {
        out.push_str(&format!("{g},{d}\n"));
    }
    out
}

fn cmd_eval(
    model: &Path,
    data: &Path,
    out: &Path,
    eye: Eye,
    adaptation_data: &Option<PathBuf>,
) -> Result<()> {
    let (net, hash) = load_net(model)?;
    let ds = load_dataset(data)?;
    let ids = adaptation_ids(adaptation_data)?;
    let report = mean_l1(&net, &ds, eye, ids.as_ref(), &hash)?;
    write_json(out, &report)?;
    write_provenance(out, "eval", config_hash(&(&eye,))?, &[model, data], None)?;
    println!(
        "eval: {} samples, L1 vp={:.2} li={:.2} ri={:.2} px -> {}",
        report.count, report.mean_l1[0], report.mean_l1[1], report.mean_l1[2], out.display()
    );
    Ok(())
}

fn cmd_compare(
    before_model: &Path,
    after_model: &Path,
    data: &Path,
    out: &Path,
    eye: Eye,
) -> Result<()> {
    let (before_net, before_hash) = load_net(before_model)?;
    let (after_net, after_hash) = load_net(after_model)?;
    let ds = load_dataset(data)?;
    let before = eval_report(&before_net, &before_hash, &ds, eye)?;
    let after = eval_report(&after_net, &after_hash, &ds, eye)?;
    let cmp = compare_report(&before, &after)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("comparison.csv"), cmp.to_csv())?;
    fs::write(out.join("comparison.txt"), cmp.to_text())?;
    write_provenance(
        out,
        "compare",
        config_hash(&(&eye,))?,
        &[before_model, after_model, data],
        None,
    )?;
    print!("{}", cmp.to_text());
    Ok(())
}

fn cmd_viz(model: &Path, data: &Path, out: &Path, n: usize) -> Result<()> {
    let (net, _) = load_net(model)?;
    let ds = load_dataset(data)?;
    fs::create_dir_all(out)?;
    let count = n.min(ds.len());
    for i in 0..count {
        let s = ds.load_sample(i)?;
        let img = image_to_chw(&s.left_image, s.width, s.height);
        let pred = predict_image(&net, &img)?;
        let overlay = render_overlay(&img, &pred, &s.gt_left);
        let path = out.join(format!("overlay_{}.png", ds.records[i].id));
        write_png(&path, &chw_to_image(&overlay), s.width, s.height)?;
    }
    write_provenance(out, "viz", config_hash(&n)?, &[model, data], None)?;
    println!("viz: wrote {count} overlays to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Gen {
            domain,
            n,
            seed,
            out,
            scene,
            imu_sigma_deg,
        } => cmd_gen(domain, *n, *seed, out, scene, *imu_sigma_deg),
        Cmd::TrainSource {
            data,
            out,
            seed,
            config,
            epochs,
            batch_size,
        } => cmd_train_source(data, out, *seed, config, *epochs, *batch_size),
        Cmd::Adapt {
            model,
            data,
            out,
            seed,
            config,
            force_stage1,
            skip_stage1,
            iterations,
            stage1_max_steps,
            stage2_epochs,
        } => cmd_adapt(
            model,
            data,
            out,
            *seed,
            config,
            *force_stage1,
            *skip_stage1,
            *iterations,
            *stage1_max_steps,
            *stage2_epochs,
        ),
        Cmd::Eval {
            model,
            data,
            out,
            eye,
            adaptation_data,
        } => cmd_eval(model, data, out, (*eye).into(), adaptation_data),
        Cmd::Compare {
            before_model,
            after_model,
            data,
            out,
            eye,
        } => cmd_compare(before_model, after_model, data, out, (*eye).into()),
        Cmd::Viz { model, data, out, n } => cmd_viz(model, data, out, *n),
    }
}
