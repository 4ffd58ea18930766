use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wdsl::dropout::{count_units, street_generator_layers, table10_report, ConvLayerSpec};
use wdsl::experiments::config::architecture_arg;
use wdsl::experiments::data::{self, Bimodal2DSpec, MovingShapesSpec};
use wdsl::experiments::runner::{self, Checkpoint};
use wdsl::experiments::ExperimentConfig;
use wdsl::{Error, Result};

/// Bayesian weight-dropout forecasting with a synthetic-likelihood objective.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where outputs go (default: `runs/<config name>`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Base directory for relative dataset paths.
    #[arg(long, global = true, default_value = ".")]
    data_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate; writes metrics, calibration, samples and a checkpoint.
    Train { config: String },
    /// Re-evaluate a checkpoint.
    Eval {
        config: String,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write only the reliability table of a trained model.
    Calibrate {
        config: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Patch vs weight dropout units: `street`, a JSON layer list file, or an
    /// architecture preset/JSON together with --height/--width.
    CountUnits {
        arch: String,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Write a generated dataset as CSV: `bimodal` or `shapes`.
    GenData {
        task: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
}

fn config_for(name: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::resolve(name)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn print_metrics(rows: &[wdsl::experiments::MetricRow]) {
    for r in rows {
        let h = r.horizon.map(|h| format!(" h={h}")).unwrap_or_default();
        let k = r.k.map(|k| format!(" k={k}")).unwrap_or_default();
        println!("{:<14} {:<26}{h}{k} {:.6}", r.experiment, r.metric, r.value);
    }
}

fn layer_specs(arch: &str, height: Option<usize>, width: Option<usize>) -> Result<Vec<ConvLayerSpec>> {
    if arch == "street" {
        return Ok(street_generator_layers());
    }
    if Path::new(arch).is_file() {
        return Ok(serde_json::from_str(&std::fs::read_to_string(arch)?)?);
    }
    let (Some(h), Some(w)) = (height, width) else {
        return Err(Error::Usage("architecture counts need --height and --width".into()));
    };
    architecture_arg(arch)?.conv_layer_specs(h, w)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train { config } => {
            let cfg = config_for(config, cli.seed)?;
            let dir = out_dir(cli, &cfg);
            std::fs::create_dir_all(&dir)?;
            let out = runner::run_experiment(&cfg, &cli.data_dir, Some(&dir))?;
            print_metrics(&out.evaluation.metrics);
            println!("wrote {}", dir.display());
        }
        Cmd::Eval { config, checkpoint } => {
            let mut ckpt = Checkpoint::load(checkpoint)?;
            ckpt.config = config_for(config, cli.seed)?;
            let dir = out_dir(cli, &ckpt.config);
            let eval = runner::evaluate_checkpoint(&ckpt, &cli.data_dir)?;
            runner::write_evaluation(&dir, &eval)?;
            print_metrics(&eval.metrics);
        }
        Cmd::Calibrate { config, checkpoint } => {
            let cfg = config_for(config, cli.seed)?;
            let dir = out_dir(cli, &cfg);
            let path = checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.json"));
            let mut ckpt = Checkpoint::load(&path)?;
            ckpt.config = cfg;
            let eval = runner::evaluate_checkpoint(&ckpt, &cli.data_dir)?;
            let table = eval
                .calibration
                .ok_or_else(|| Error::Usage(format!("task `{}` has no class probabilities", ckpt.config.task.id())))?;
            std::fs::create_dir_all(&dir)?;
            runner::write_calibration(&dir.join("calibration.csv"), &table)?;
            println!("ECE {:.6} over {} entries", table.ece, table.total);
        }
        Cmd::CountUnits { arch, height, width } => {
            let specs = layer_specs(arch, *height, *width)?;
            let report = count_units(&specs)?;
            println!("{:<10} {:>14} {:>14}", "layer", "patches", "weights");
            for (name, c) in &report.layers {
                println!("{name:<10} {:>14} {:>14}", c.patch_count, c.weight_count);
            }
            println!("{:<10} {:>14} {:>14}", "total", report.total.patch_count, report.total.weight_count);
            println!("reduction  {:.4}", report.reduction());
            if arch == "street" {
                for r in table10_report().iter().filter(|r| !r.patches_match() || !r.weights_match()) {
                    println!(
                        "deviation  {}: printed {} / {}, formula {} / {}",
                        r.layer, r.printed_patches, r.printed_weights, r.computed.patch_count, r.computed.weight_count
                    );
                }
            }
        }
        Cmd::GenData { task, n } => {
            let seed = cli.seed.unwrap_or(0);
            let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("data/generated"));
            std::fs::create_dir_all(&dir)?;
            match task.as_str() {
                "bimodal" => {
                    let (x, y) = data::gen_bimodal_2d(&Bimodal2DSpec::new(*n), seed)?;
                    let mut w = csv::Writer::from_path(dir.join("bimodal.csv")).map_err(Error::from)?;
                    w.write_record(["x", "y"]).map_err(Error::from)?;
                    for (a, b) in x.data().iter().zip(y.data()) {
                        w.write_record([a.to_string(), b.to_string()]).map_err(Error::from)?;
                    }
                    w.flush()?;
                }
                "shapes" => {
                    let spec = MovingShapesSpec::default();
                    let seqs = data::gen_moving_shapes(&spec, *n, seed)?;
                    std::fs::write(dir.join("shapes.json"), serde_json::to_vec(&seqs)?)?;
                }
                other => return Err(Error::Usage(format!("unknown task `{other}` (bimodal, shapes)"))),
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
