//! `adnet` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adnet::error::{Error, Result};
use adnet::evaluation::threshold_grid;
use adnet::experiment::*;
use adnet::supervoxel::{generate_supervoxels, SupervoxelParams};
use adnet::synth::{generate_synthetic_dataset, SyntheticSpec};
use adnet::volume::{load_volume, save_labels, save_volume};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "adnet",
    version,
    about = "Few-shot segmentation with supervoxel self-supervision"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (the synthetic seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervoxels for every RVF volume in a directory.
    Supervoxel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rho: Option<usize>,
        #[arg(long)]
        scale_k: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Writes a synthetic dataset as `images/` and `labels/` RVF files.
    Synth {
        /// Synthetic spec (JSON); defaults to the config's synthetic dataset.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Trains one model per (fold, run); writes checkpoints and logs.
    Train,
    /// Evaluates the checkpoints of a training directory.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Retrains and evaluates once per value of `rho` or `kappa`.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Mean dice over a threshold grid for the checkpoints of a training directory.
    Linesearch {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = -20.0, allow_negative_numbers = true)]
        start: f64,
        #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
        end: f64,
        #[arg(long, default_value_t = 0.5)]
        step: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    }
    let c = &cli.common;
    match cli.command {
        Command::Supervoxel {
            input,
            rho,
            scale_k,
            sigma,
        } => cmd_supervoxel(c, &input, rho, scale_k, sigma),
        Command::Synth { spec } => cmd_synth(c, spec.as_deref()),
        Command::Train => cmd_train(c),
        Command::Eval { run } => cmd_eval(c, &run),
        Command::Sweep { param, values } => cmd_sweep(c, &param, &values),
        Command::Linesearch { run, start, end, step } => cmd_linesearch(c, &run, start, end, step),
    }
}

/// `--config` (or `fallback`, or defaults) with `--seed` applied.
fn resolve_config(c: &Common, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, fallback) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(p)) if p.exists() => ExperimentConfig::load(p)?,
        _ => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_supervoxel(c: &Common, input: &Path, rho: Option<usize>, k: Option<f64>, sigma: Option<f64>) -> Result<()> {
    let cfg = resolve_config(c, None)?;
    let names = list_rvf(input)?;
    create_dir(&c.out)?;
    write_config(&c.out, &cfg)?;
    let mut volumes = Vec::new();
    for name in &names {
        let image = load_volume(&input.join(name))?;
        let base = cfg
            .supervoxel
            .unwrap_or_else(|| SupervoxelParams::for_voxels(image.len()));
        let params = SupervoxelParams {
            rho: rho.unwrap_or(base.rho),
            scale_k: k.unwrap_or(base.scale_k),
            presmooth_sigma: sigma.unwrap_or(base.presmooth_sigma),
        };
        let labels = generate_supervoxels(&image, &params)?;
        save_labels(&labels, &c.out.join(name))?;
        volumes.push(json!({ "name": name, "supervoxels": labels.max_label(), "params": params }));
    }
    let manifest = json!({ "input": input, "volumes": volumes });
    write_file(&c.out.join("manifest.json"), pretty(&manifest))?;
    println!("{} volumes -> {}", names.len(), c.out.display());
    Ok(())
}

fn cmd_synth(c: &Common, spec: Option<&Path>) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => match resolve_config(c, None)?.dataset {
            DatasetSource::Synthetic(s) => s,
            DatasetSource::Dir(_) => return Err(Error::Config("config dataset is not synthetic".into())),
        },
    };
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let data = generate_synthetic_dataset(&spec)?;
    for sub in ["images", "labels"] {
        create_dir(&c.out.join(sub))?;
    }
    for (i, (image, labels)) in data.iter().enumerate() {
        let name = format!("case_{i:03}");
        save_volume(image, &c.out.join("images").join(&name))?;
        save_labels(labels, &c.out.join("labels").join(&name))?;
    }
    write_file(&c.out.join("spec.json"), pretty(&json!(spec)))?;
    println!("{} volumes -> {}", data.len(), c.out.display());
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = resolve_config(c, None)?;
    let prepared = prepare(&cfg)?;
    let plan = plan(&cfg, &prepared)?;
    let arms = train_arms(&cfg, &prepared, &plan)?;
    write_config(&c.out, &cfg)?;
    write_training(&c.out, &cfg, &arms)?;
    write_file(&c.out.join("splits.json"), pretty(&json!(plan)))?;
    for arm in &arms {
        println!("{}: T = {}", arm.stem(), arm.model.head.threshold);
    }
    Ok(())
}

fn cmd_eval(c: &Common, run: &Path) -> Result<()> {
    let cfg = resolve_config(c, Some(&run.join("config.json")))?;
    let prepared = prepare(&cfg)?;
    let output = evaluate_checkpoints(&cfg, &prepared, run)?;
    write_config(&c.out, &cfg)?;
    write_results(&c.out, &output)?;
    print!("{}", adnet::evaluation::summary_json(&output.summary));
    Ok(())
}

fn cmd_linesearch(c: &Common, run: &Path, start: f64, end: f64, step: f64) -> Result<()> {
    let cfg = resolve_config(c, Some(&run.join("config.json")))?;
    let grid = threshold_grid(start, end, step)?;
    let prepared = prepare(&cfg)?;
    let output = evaluate_checkpoints(&cfg, &prepared, run)?;
    let curve = line_search(&output, &grid)?;
    write_config(&c.out, &cfg)?;
    write_curve(&c.out, &curve)?;
    print!("{}", adnet::evaluation::curve_csv(&curve));
    Ok(())
}

fn cmd_sweep(c: &Common, param: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Invalid("sweep needs at least one value".into()));
    }
    let base = resolve_config(c, None)?;
    let knob = sweep_registry().create(param)?;
    write_config(&c.out, &base)?;
    let mut rows = Vec::new();
    let mut shared: Option<Prepared> = None;
    for &value in values {
        let mut cfg = base.clone();
        knob.apply(&mut cfg, value)?;
        cfg.validate()?;
        // only supervoxel knobs change the prepared data
        let prepared = match (&shared, param) {
            (Some(p), "kappa") => p.clone(),
            _ => prepare(&cfg)?,
        };
        let output = run_experiment(&cfg, &prepared)?;
        let dir = c.out.join(format!("{param}_{value}"));
        write_config(&dir, &cfg)?;
        write_training(&dir, &cfg, &output.arms)?;
        write_results(&dir, &output)?;
        let counts: Vec<u32> = prepared.supervoxels.iter().map(|s| s.max_label()).collect();
        let manifest = json!({ "params": prepared.supervoxel_params, "supervoxels": counts });
        write_file(&dir.join("supervoxels.json"), pretty(&manifest))?;
        rows.push(SweepRow {
            value,
            summary: output.summary,
            supervoxel: prepared.supervoxel_params,
        });
        shared = Some(prepared);
    }
    let table = sweep_csv(knob.name(), &rows);
    write_file(&c.out.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}
