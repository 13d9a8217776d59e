//! Command-line entry point for the grounding benchmark harness.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use groundkit_core::diffkit::GradcheckConfig;
use groundkit_harness::ablate::{render_table, run_ablation};
use groundkit_harness::config::RunConfig;
use groundkit_harness::gradcheck::composite_gradcheck;
use groundkit_harness::sweep::{run_delta_sweep, write_sweep_csv};
use groundkit_harness::synthworld::{
    generate, read_dataset, write_dataset, DatasetHeader, GenConfig, SceneSample,
};
use groundkit_harness::train::{
    evaluate, evaluate_oracle, load_checkpoint, save_checkpoint, train,
};
use groundkit_harness::model::ModelSpecs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "groundkit",
    about = "Synthetic grounding benchmark: data generation, training, evaluation, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, default_value_t = 6)]
        objects: usize,
        #[arg(long, default_value_t = 4)]
        jitters: usize,
        #[arg(long, default_value_t = 8)]
        clutter: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Train a model and write a checkpoint plus a training log.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Training dataset (overrides the config's data_path).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoint.json and train_log.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write a metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output path for the metric report (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Optional config to cross-check against the checkpoint's hash.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score perfect proposal selection instead of the model, as a
        /// dataset ceiling.
        #[arg(long, default_value_t = false)]
        oracle: bool,
    },
    /// Train the five-row module ablation grid over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        /// Output path for the table (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep the positive/negative IoU threshold for the full model and
    /// an OID-only variant.
    SweepDelta {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.25, 0.5, 0.75])]
        deltas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Output directory for the report and plot CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the assembled training gradients.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArg,
        /// Deliberately corrupt one gradient; the check must then fail.
        #[arg(long, default_value_t = false)]
        corrupt: bool,
    },
}

fn load_config(arg: &ConfigArg) -> anyhow::Result<RunConfig> {
    match &arg.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_data(
    flag: &Option<PathBuf>,
    cfg: &RunConfig,
) -> anyhow::Result<(DatasetHeader, Vec<SceneSample>)> {
    let path = match (flag, &cfg.data_path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("no dataset given: pass --data or set data_path in the config"),
    };
    let (header, samples) =
        read_dataset(&path).with_context(|| format!("reading dataset {}", path.display()))?;
    eprintln!(
        "loaded {} samples from {} (seed {}, {} classes, {} colors)",
        samples.len(),
        path.display(),
        header.seed,
        header.classes,
        header.colors
    );
    Ok((header, samples))
}

fn write_json(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen {
            out,
            seed,
            scenes,
            objects,
            jitters,
            clutter,
            noise,
        } => {
            let cfg = GenConfig {
                seed,
                scenes,
                objects_per_scene: objects,
                jitters_per_object: jitters,
                clutter_per_scene: clutter,
                noise_scale: noise,
                ..GenConfig::default()
            };
            let (samples, audit) = generate(&cfg)?;
            write_dataset(&out, &DatasetHeader::from_config(&cfg), &samples)?;
            println!(
                "wrote {} samples to {} ({} unique, {} multiple, {} unidentifiable dropped)",
                audit.emitted_samples,
                out.display(),
                audit.unique_samples,
                audit.multiple_samples,
                audit.dropped_unidentifiable
            );
            println!(
                "proposal coverage: {:.4} at IoU 0.25, {:.4} at IoU 0.5",
                audit.coverage_at_025, audit.coverage_at_05
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config)?;
            let (header, samples) = load_data(&data, &cfg)?;
            let eval_samples = match &cfg.eval_data_path {
                Some(p) => Some(read_dataset(Path::new(p))?.1),
                None => None,
            };
            let outcome = train(&cfg, &header, &samples, eval_samples.as_deref())?;
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("checkpoint.json");
            save_checkpoint(&ckpt, &outcome.store, &cfg)?;
            write_json(&out.join("train_log.json"), &outcome.log.to_json())?;
            println!(
                "trained {} epochs (+{} answer epochs) in {:.1}s",
                outcome.log.epochs.len(),
                outcome.log.qa_epochs.len(),
                outcome.log.wall_clock_secs
            );
            println!("checkpoint: {}", ckpt.display());
            println!("final metrics:\n{}", outcome.log.final_metrics.to_json());
        }
        Command::Eval {
            ckpt,
            data,
            report,
            config,
            oracle,
        } => {
            let (store, cfg) = load_checkpoint(&ckpt)?;
            if let Some(path) = config {
                let supplied = RunConfig::load(&path)?;
                if supplied.integrity_hash() != cfg.integrity_hash() {
                    bail!(
                        "config {} does not match the checkpoint (hash {} vs {}); refusing to evaluate",
                        path.display(),
                        supplied.integrity_hash(),
                        cfg.integrity_hash()
                    );
                }
            }
            let (header, samples) = read_dataset(&data)?;
            let metrics = if oracle {
                evaluate_oracle(&cfg, &header, &samples)?
            } else {
                let specs = ModelSpecs::new(&cfg, header.colors);
                evaluate(&store, &specs, &cfg, &header, &samples)?
            };
            write_json(&report, &metrics.to_json())?;
            println!("{}", metrics.to_json());
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out,
        } => {
            if seeds.is_empty() {
                bail!("at least one seed is required");
            }
            let cfg = load_config(&config)?;
            let (header, samples) = load_data(&data, &cfg)?;
            let table = run_ablation(&cfg, &header, &samples, &seeds);
            write_json(&out, &serde_json::to_string_pretty(&table)?)?;
            print!("{}", render_table(&table));
            let failed: usize = table.rows.iter().map(|r| r.failures.len()).sum();
            if failed > 0 {
                eprintln!("{failed} cell(s) failed; table is partial");
            }
        }
        Command::SweepDelta {
            config,
            data,
            deltas,
            seeds,
            out,
        } => {
            if deltas.is_empty() || seeds.is_empty() {
                bail!("at least one delta and one seed are required");
            }
            let cfg = load_config(&config)?;
            let (header, samples) = load_data(&data, &cfg)?;
            let report = run_delta_sweep(&cfg, &header, &samples, &deltas, &seeds);
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("sweep.json"), &serde_json::to_string_pretty(&report)?)?;
            let files = write_sweep_csv(&out, &report)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            if let Some(m) = &report.monotonicity {
                println!("monotonicity: {}", m.note);
            }
        }
        Command::Gradcheck { config, corrupt } => {
            let cfg = load_config(&config)?;
            // A small fresh dataset is enough; the check differentiates
            // through every head on a screened batch.
            let gen = GenConfig {
                scenes: 4,
                seed: 1013,
                ..GenConfig::default()
            };
            let (samples, _) = generate(&gen)?;
            let header = DatasetHeader::from_config(&gen);
            let gc = GradcheckConfig { h: 1e-5, tol: 1e-4 };
            let report =
                composite_gradcheck(&cfg, &header, &samples, 3, 2, corrupt, &gc)?;
            println!(
                "checked {} coordinates, max relative error {:.3e} (tolerance {:.0e})",
                report.coords_checked, report.max_rel_err, report.tol
            );
            if !report.pass {
                for e in report.entries.iter().filter(|e| e.rel_err > report.tol) {
                    eprintln!(
                        "  {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
                        e.name, e.coord, e.analytic, e.numeric, e.rel_err
                    );
                }
                return Err(anyhow!("gradient check failed"));
            }
            println!("gradient check passed");
        }
    }
    Ok(())
}
