//! Command-line entry point: synthetic data generation, training, evaluation,
//! attention inspection, and the gradient-check harness.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numerical
//! abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use attnpool::backbone::FeatureMap;
use attnpool::data::{self, Dataset, SyntheticSpec};
use attnpool::model::{forward_video, ModelConfig, ModelParams, VideoFrames};
use attnpool::numerics::{grad_check, GradCheckReport, Tensor};
use attnpool::rng::{derive, TAG_INIT};
use attnpool::temporal::{frame_importance, joint_softmax, Pooling};
use attnpool::training::{
    self, evaluate, load_checkpoint, save_checkpoint, total_loss, BatchItem, TrainConfig,
    LOG_HEADER,
};
use attnpool::{Error, Result};

#[derive(Parser)]
#[command(
    name = "attnpool",
    version,
    about = "Spatial-attention video classification with temporal softmax pooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-signal dataset (train and val splits).
    Synth(SynthArgs),
    /// Train a model and write checkpoint plus epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Dump attention heatmaps and per-frame CSVs for one video.
    Inspect(InspectArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthesis spec JSON (merged over the built-in default).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; receives train/ and val/ plus the spec echo.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key config overrides, e.g. --set noise=2.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (merged over the built-in default).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training split directory (holds manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Optional validation split directory.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for config echo, log CSV, and checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Attention heads (0 disables spatial attention).
    #[arg(long)]
    heads: Option<usize>,
    /// Orthogonality penalty coefficient λ.
    #[arg(long)]
    reg: Option<f64>,
    #[arg(long)]
    pooling: Option<String>,
    /// Frames sampled per clip per epoch.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Resume from a checkpoint (its embedded config is the base).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// tp, avg, max, indep, or all.
    #[arg(long, default_value = "tp")]
    pooling: String,
    /// Write eval_{pooling}.json here instead of printing to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Video id from the manifest.
    #[arg(long)]
    video: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// tiny (attention head only) or small (adds the conv backbone).
    #[arg(long, default_value = "tiny")]
    size: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Deliberately corrupt one analytic gradient (harness self-test).
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// Parse `key=value`, interpreting the value as JSON when possible and as a
/// bare string otherwise, and set it at the dotted path inside `root`.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::contract(format!("override '{spec}' is not KEY=VALUE")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split produced at least one part");
    for part in path {
        cursor = cursor
            .as_object_mut()
            .ok_or_else(|| Error::contract(format!("override path '{key}' crosses a non-object")))?
            .entry(part.to_string())
            .or_insert(serde_json::json!({}));
    }
    cursor
        .as_object_mut()
        .ok_or_else(|| Error::contract(format!("override path '{key}' crosses a non-object")))?
        .insert(last.to_string(), value);
    Ok(())
}

/// Overlay `patch` onto `base`, object keys merging recursively and
/// everything else replacing.
fn deep_merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                deep_merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Build the effective config: defaults ← optional file ← flag/dotted
/// overrides, then deserialize (unknown keys are rejected there).
fn resolve_config<T: serde::Serialize + serde::de::DeserializeOwned>(
    default: &T,
    file: Option<&Path>,
    overrides: &[(String, serde_json::Value)],
    dotted: &[String],
) -> Result<T> {
    let mut merged = serde_json::to_value(default)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let patch: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        deep_merge(&mut merged, &patch);
    }
    for (key, value) in overrides {
        apply_override(&mut merged, &format!("{key}={value}"))?;
    }
    for spec in dotted {
        apply_override(&mut merged, spec)?;
    }
    serde_json::from_value(merged).map_err(|e| Error::contract(format!("invalid config: {e}")))
}

fn write_echo<T: serde::Serialize>(dir: &Path, name: &str, config: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = serde_json::to_vec_pretty(config)?;
    bytes.push(b'\n');
    std::fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut flags = Vec::new();
    if let Some(seed) = args.seed {
        flags.push(("seed".to_string(), serde_json::json!(seed)));
    }
    let spec: SyntheticSpec = resolve_config(
        &SyntheticSpec::default(),
        args.config.as_deref(),
        &flags,
        &args.overrides,
    )?;
    spec.validate()?;
    write_echo(&args.out, "spec.json", &spec)?;
    for split in ["train", "val"] {
        let dir = args.out.join(split);
        std::fs::create_dir_all(&dir)?;
        let ds = data::generate_synthetic(&spec, split, &dir)?;
        println!("{split}: {} videos in {}", ds.len(), dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    data::load_manifest(dir)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut flags = Vec::new();
    if let Some(v) = args.seed {
        flags.push(("seed".to_string(), serde_json::json!(v)));
    }
    if let Some(v) = args.heads {
        flags.push(("model.heads".to_string(), serde_json::json!(v)));
    }
    if let Some(v) = args.reg {
        flags.push(("lambda".to_string(), serde_json::json!(v)));
    }
    if let Some(v) = &args.pooling {
        flags.push(("pooling".to_string(), serde_json::json!(v)));
    }
    if let Some(v) = args.frames {
        flags.push(("frames_per_clip".to_string(), serde_json::json!(v)));
    }
    if let Some(v) = args.epochs {
        flags.push(("epochs".to_string(), serde_json::json!(v)));
    }

    let (base, resume_state) = match &args.resume {
        Some(path) => {
            let (config, state) = load_checkpoint(path)?;
            (config, Some(state))
        }
        None => (TrainConfig::default(), None),
    };
    let config: TrainConfig = resolve_config(
        &base,
        args.config.as_deref(),
        &flags,
        &args.overrides,
    )?;
    config.validate()?;

    let train_set = load_dataset(&args.data)?;
    let val_set = args.val.as_deref().map(load_dataset).transpose()?;

    std::fs::create_dir_all(&args.out)?;
    write_echo(&args.out, "config.json", &config)?;

    let result = training::train(&train_set, val_set.as_ref(), &config, resume_state);
    let (state, logs) = match result {
        Ok(ok) => ok,
        Err(e @ Error::Numeric(_)) => {
            let path = args.out.join("abort.txt");
            std::fs::write(&path, format!("{e}\n"))?;
            eprintln!("diagnostics written to {}", path.display());
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let mut csv = String::from(LOG_HEADER);
    csv.push('\n');
    for row in &logs {
        csv.push_str(&row.to_csv_row());
        csv.push('\n');
    }
    std::fs::write(args.out.join("train_log.csv"), csv)?;
    save_checkpoint(&args.out.join("checkpoint.json"), &config, &state)?;
    if let Some(last) = logs.last() {
        println!(
            "epoch {}: train_loss {:.4}, train_acc {:.3}",
            last.epoch, last.train_loss, last.train_acc
        );
    }
    println!("checkpoint: {}", args.out.join("checkpoint.json").display());
    Ok(ExitCode::SUCCESS)
}

fn parse_poolings(raw: &str) -> Result<Vec<Pooling>> {
    if raw == "all" {
        return Ok(Pooling::ALL.to_vec());
    }
    Ok(vec![Pooling::from_str(raw)?])
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let poolings = parse_poolings(&args.pooling)?;
    let (_, state) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    for pooling in poolings {
        let report = evaluate(&dataset, &state.params, pooling)?;
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        match &args.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("eval_{pooling}.json"));
                std::fs::write(&path, json)?;
                println!("{pooling}: accuracy {:.4} → {}", report.accuracy, path.display());
            }
            None => {
                std::io::Write::write_all(&mut std::io::stdout(), &json)?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// P5 binary graymap of a heatmap already scaled so its maximum is 1.
fn write_pgm(path: &Path, heatmap: &Tensor) -> Result<()> {
    let (h, w) = (heatmap.shape()[0], heatmap.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        heatmap
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<ExitCode> {
    let (_, state) = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let sample = dataset
        .manifest
        .samples
        .iter()
        .find(|s| s.id == args.video)
        .ok_or_else(|| Error::contract(format!("video id '{}' not in manifest", args.video)))?;

    let item = training::eval_item(&dataset, sample)?;
    let out = forward_video(&state.params, &item_frames(&item))?;
    std::fs::create_dir_all(&args.out)?;

    // One graymap per (frame, head): the attention row over grid cells.
    let (gh, gw) = out.grid;
    for (f, a) in out.attention.iter().enumerate() {
        for head in 0..a.shape()[0] {
            let heat = attnpool::attention::attention_heatmap(a.row(head), gh, gw)?;
            write_pgm(&args.out.join(format!("{f}_{head}.pgm")), &heat)?;
        }
    }

    // Per-frame class probabilities (each row its own softmax).
    let names = &dataset.manifest.class_names;
    let per_frame = attnpool::numerics::stable_softmax(&out.scores, &[1])?;
    let f_total = out.scores.shape()[0];
    let e = out.scores.shape()[1];
    let mut probs = format!("frame,{}\n", names.join(","));
    for f in 0..f_total {
        let row: Vec<String> = (0..e).map(|c| per_frame.at2(f, c).to_string()).collect();
        probs.push_str(&format!("{f},{}\n", row.join(",")));
    }
    std::fs::write(args.out.join("probs.csv"), probs)?;

    // Temporal importance: the pooled marginal over frames plus the 0–100
    // display rescale.
    let joint = joint_softmax(&out.scores)?;
    let (imp, display) = frame_importance(&joint)?;
    let mut csv = String::from("frame,probability,display\n");
    for (f, (p, d)) in imp.data().iter().zip(&display).enumerate() {
        csv.push_str(&format!("{f},{p},{d}\n"));
    }
    std::fs::write(args.out.join("importance.csv"), csv)?;

    println!(
        "wrote {} heatmaps, probs.csv, importance.csv to {}",
        out.attention.len() * state.params.config.heads,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn item_frames(item: &BatchItem) -> VideoFrames<'_> {
    match item {
        BatchItem::Features(maps, _) => VideoFrames::Features(maps),
        BatchItem::Images(imgs, _) => VideoFrames::Images(imgs),
    }
}

/// In-memory batch of random descriptor grids for the gradient check.
fn gradcheck_batch(seed: u64, videos: usize, f: usize, l: usize, d: usize, e: usize) -> Vec<BatchItem> {
    let mut rng = derive(seed, &[TAG_INIT, 1]);
    (0..videos)
        .map(|i| {
            let maps = (0..f)
                .map(|_| {
                    let data = (0..l * d)
                        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
                        .collect();
                    FeatureMap::new(1, l, Tensor::new(vec![l, d], data).unwrap()).unwrap()
                })
                .collect();
            BatchItem::Features(maps, i % e)
        })
        .collect()
}

#[derive(serde::Serialize)]
struct GradcheckRun {
    lambda: f64,
    report: GradCheckReport,
}

#[derive(serde::Serialize)]
struct GradcheckOutput {
    size: String,
    pass: bool,
    runs: Vec<GradcheckRun>,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let seed = args.seed.unwrap_or(1);
    let (config, batch) = match args.size.as_str() {
        "tiny" => {
            let config = ModelConfig {
                num_classes: 4,
                descriptor_dim: 6,
                heads: 2,
                attention_units: 5,
                backbone: None,
            };
            (config, gradcheck_batch(seed, 2, 3, 4, 6, 4))
        }
        "small" => {
            let bb = attnpool::backbone::BackboneConfig {
                in_channels: 1,
                channels: [4, 4, 4, 8],
                kernel_size: 3,
            };
            let config = ModelConfig {
                num_classes: 4,
                descriptor_dim: 8,
                heads: 2,
                attention_units: 6,
                backbone: Some(bb),
            };
            let mut rng = derive(seed, &[TAG_INIT, 2]);
            let frames: Vec<Tensor> = (0..2)
                .map(|_| {
                    let data = (0..32 * 32)
                        .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
                        .collect();
                    Tensor::new(vec![1, 32, 32], data).unwrap()
                })
                .collect();
            (config, vec![BatchItem::Images(frames, 1)])
        }
        other => {
            return Err(Error::contract(format!(
                "unknown gradcheck size '{other}' (expected tiny or small)"
            )))
        }
    };

    let params = ModelParams::init(config.clone(), &mut derive(seed, &[TAG_INIT]))?;
    let named_owned: Vec<(String, Tensor)> = params
        .named()
        .iter()
        .map(|(n, t)| (n.clone(), (*t).clone()))
        .collect();
    let rebuild = make_rebuilder(&config);

    let mut runs = Vec::new();
    let mut pass = true;
    for lambda in [0.0, 1.0] {
        let inputs: Vec<Tensor> = named_owned.iter().map(|(_, t)| t.clone()).collect();
        let (_, mut analytic, _) = total_loss(&rebuild(&inputs), &batch, lambda, Pooling::Tp)?;
        if args.corrupt_gradient {
            let slot = analytic.last_mut().expect("model has parameters");
            let mut data = slot.data().to_vec();
            data[0] = data[0] * 1.01 + 1e-3;
            *slot = Tensor::new(slot.shape().to_vec(), data)?;
        }
        let report = grad_check(&named_owned, &analytic, 1e-5, 1e-4, |p| {
            total_loss(&rebuild(p), &batch, lambda, Pooling::Tp).map(|(l, _, _)| l)
        })?;
        pass &= report.pass;
        runs.push(GradcheckRun { lambda, report });
    }

    let output = GradcheckOutput {
        size: args.size.clone(),
        pass,
        runs,
    };
    println!("{}", serde_json::to_string_pretty(&output)?);
    if !pass {
        for run in &output.runs {
            let mut worst: Vec<_> = run.report.params.iter().collect();
            worst.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
            for p in worst.iter().take(3) {
                eprintln!(
                    "λ={}: {} max rel err {:.3e}",
                    run.lambda, p.name, p.max_rel_err
                );
            }
        }
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

/// Closure mapping a flat tensor list (in `named` order) back to params.
fn make_rebuilder(config: &ModelConfig) -> impl Fn(&[Tensor]) -> ModelParams + '_ {
    move |tensors: &[Tensor]| {
        let mut params = training::zero_params(config);
        for ((_, slot), t) in params.named_mut().into_iter().zip(tensors) {
            *slot = t.clone();
        }
        params
    }
}
