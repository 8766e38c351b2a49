use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssm_xbar::audio::{build_dataset, synth_dataset_with, Dataset, DatasetManifest};
use ssm_xbar::crossbar::DeviceModel;
use ssm_xbar::harness::{
    export_heatmap, load_checkpoint, map_checkpoint, noise_trials, quant_sweep, run_full_pipeline, run_noise_sweep,
    train_model, unix_now, write_rows, ArtifactDir, ExperimentConfig, ProgramFile, RangeSetting, RangeMode,
    RunManifest, Seeds, MANIFEST_NAME, PROGRAM_VERSION,
};
use ssm_xbar::train::{Checkpoint, RangeChoice};
use ssm_xbar::{Error, ErrorClass, Result};

#[derive(Parser, Debug)]
#[command(name = "ssm-xbar", version, about = "Quantized S4D models on simulated memristive crossbars")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; replaces every seed stream of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts of this run.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Reduced instance counts for quick runs.
    #[arg(long, global = true)]
    ci_profile: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Prepared dataset file; otherwise the config's data section is used.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a dataset from a CSV manifest of WAV files.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "dataset.json")]
        out: String,
    },
    /// Generate the synthetic two-class dataset.
    Synth {
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long, default_value = "dataset.json")]
        out: String,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Kernel bits; 0 disables kernel quantization.
        #[arg(long)]
        bits: Option<u32>,
        /// Fixed range for A, or "dynamic".
        #[arg(long)]
        f_scale: Option<String>,
        #[arg(long, default_value = "checkpoint.json")]
        out: String,
    },
    /// Train one model per (bits, range) pair.
    SweepQuant {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',')]
        bits: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        fscales: Option<Vec<String>>,
        #[arg(long, default_value = "quant_sweep.csv")]
        out: String,
    },
    /// Map a checkpoint onto crossbar conductances.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibration data for signal ranges (training split is used).
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "program.json")]
        out: String,
    },
    /// Evaluate programmed chips on the test split.
    Deploy {
        #[arg(long)]
        program: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Write-noise sigma, µS; defaults to the config's device section.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        p_stuck: Option<f64>,
        /// Number of programmed instances.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "deploy.csv")]
        out: String,
    },
    /// Accuracy distributions over write-noise levels.
    NoiseSweep {
        /// Checkpoint per bit width, as BITS=PATH; repeatable.
        #[arg(long = "checkpoint", value_parser = parse_checkpoint_arg)]
        checkpoints: Vec<(u32, PathBuf)>,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "noise_sweep.csv")]
        out: String,
    },
    /// Data, training, mapping and deployment in one run.
    Pipeline,
    /// Conductance heatmaps with block overlays.
    ExportHeatmap {
        #[arg(long)]
        program: PathBuf,
        /// Kernel index; all kernels when omitted.
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long, default_value = "heatmap")]
        stem: String,
    },
}

fn parse_checkpoint_arg(s: &str) -> std::result::Result<(u32, PathBuf), String> {
    let (bits, path) = s.split_once('=').ok_or_else(|| format!("expected BITS=PATH, got '{s}'"))?;
    let bits = bits.trim().parse().map_err(|e| format!("bad bit width '{bits}': {e}"))?;
    Ok((bits, PathBuf::from(path)))
}

fn range_setting(s: &str) -> Result<RangeSetting> {
    Ok(match RangeChoice::parse(s)? {
        RangeChoice::Fixed(f) => RangeSetting::Value(f),
        RangeChoice::Dynamic => RangeSetting::Mode(RangeMode::Dynamic),
    })
}

fn load_data(cfg: &ExperimentConfig, arg: &DataArg) -> Result<Dataset> {
    match &arg.data {
        Some(path) => Dataset::load(path),
        None => cfg.load_dataset(),
    }
}

fn write_summary(dir: &mut ArtifactDir, name: &str, table: &ssm_xbar::harness::ResultTable) -> Result<()> {
    write_rows(dir, name, &table.summarize())
}

fn summary_name(out: &str) -> String {
    match out.strip_suffix(".csv") {
        Some(stem) => format!("{stem}_summary.csv"),
        None => format!("{out}_summary.csv"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = unix_now();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = Seeds::from_base(seed);
    }
    if cli.ci_profile {
        cfg = cfg.ci_profile();
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("cannot set up {n} threads: {e}")))?;
    }
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut dir = ArtifactDir::create(&out_dir)?;
    dir.ensure_absent(MANIFEST_NAME)?;
    let arguments: Vec<String> = std::env::args().skip(1).collect();
    let name;

    match &cli.command {
        Command::Ingest { manifest, out } => {
            name = "ingest";
            let ds = build_dataset(&DatasetManifest::from_csv(manifest)?, cfg.seeds.data)?;
            dir.write_bytes(out, ds.to_json()?.as_bytes())?;
            println!("{} train / {} test sequences, counts {:?}", ds.train.len(), ds.test.len(), ds.class_counts());
        }
        Command::Synth { per_class, out } => {
            name = "synth";
            let n = per_class.unwrap_or(cfg.data.synth_per_class);
            let ds = synth_dataset_with(&cfg.data.synth, n, cfg.seeds.data)?;
            dir.write_bytes(out, ds.to_json()?.as_bytes())?;
            println!("{} train / {} test sequences", ds.train.len(), ds.test.len());
        }
        Command::Train { data, bits, f_scale, out } => {
            name = "train";
            let mut quant = cfg.quant.clone();
            if let Some(b) = bits {
                quant.bits = *b;
            }
            if let Some(f) = f_scale {
                quant.f_scale = range_setting(f)?;
            }
            cfg.quant = quant.clone();
            cfg.validate()?;
            dir.ensure_absent(out)?;
            let ds = load_data(&cfg, data)?;
            let (params, q, report) = train_model(&cfg, &quant, &ds)?;
            dir.write_bytes(out, Checkpoint::new(&params, &q).to_json()?.as_bytes())?;
            let report_name = format!("{}.report.json", out.trim_end_matches(".json"));
            dir.write_json(&report_name, &report)?;
            println!(
                "test accuracy {:.4} (best epoch {})",
                report.final_test_accuracy, report.best_epoch
            );
        }
        Command::SweepQuant { data, bits, fscales, out } => {
            name = "sweep-quant";
            if let Some(b) = bits {
                cfg.sweep.bits = b.clone();
            }
            if let Some(f) = fscales {
                cfg.sweep.f_scales = f.iter().map(|s| range_setting(s)).collect::<Result<_>>()?;
            }
            cfg.validate()?;
            dir.ensure_absent(out)?;
            let ds = load_data(&cfg, data)?;
            let table = quant_sweep(&cfg, &ds)?;
            table.write_csv(&mut dir, out)?;
            for r in table.sorted() {
                println!("bits {:?} f_scale {}: {:.4}", r.bits, r.f_scale, r.value);
            }
        }
        Command::Map { checkpoint, data, out } => {
            name = "map";
            dir.ensure_absent(out)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let ds = load_data(&cfg, data)?;
            let plan = map_checkpoint(&cfg, &ckpt, &ds.train)?;
            for (k, p) in plan.programs.iter().enumerate() {
                let (r, c) = p.occupied_extent();
                println!("kernel {k}: w_max {:.4}, occupied {r}x{c}", p.w_max);
            }
            dir.write_json(
                out,
                &ProgramFile {
                    version: PROGRAM_VERSION,
                    plan,
                },
            )?;
        }
        Command::Deploy {
            program,
            data,
            sigma,
            p_stuck,
            seeds,
            out,
        } => {
            name = "deploy";
            dir.ensure_absent(out)?;
            let plan = ProgramFile::load(program)?.plan;
            let ds = load_data(&cfg, data)?;
            let device = DeviceModel {
                sigma_write: sigma.unwrap_or(cfg.device.sigma_write),
                p_stuck: p_stuck.unwrap_or(cfg.device.p_stuck),
                ..cfg.device
            };
            device.validate()?;
            let instances = seeds.unwrap_or(cfg.sweep.instances);
            let table = noise_trials(
                &plan,
                &device,
                &cfg.periphery,
                &[device.sigma_write],
                instances,
                cfg.seeds.device,
                "deploy",
                None,
                "program",
                &ds.test,
            )?;
            table.write_csv(&mut dir, out)?;
            write_summary(&mut dir, &summary_name(out), &table)?;
            for s in table.summarize() {
                println!(
                    "sigma {}: median {:.4} (q1 {:.4}, q3 {:.4}) over {}",
                    device.sigma_write, s.median, s.q1, s.q3, s.count
                );
            }
        }
        Command::NoiseSweep { checkpoints, data, out } => {
            name = "noise-sweep";
            dir.ensure_absent(out)?;
            let map: BTreeMap<u32, PathBuf> = checkpoints.iter().cloned().collect();
            let ds = load_data(&cfg, data)?;
            let table = run_noise_sweep(&cfg, &map, &ds)?;
            table.write_csv(&mut dir, out)?;
            write_summary(&mut dir, &summary_name(out), &table)?;
            for s in table.summarize() {
                println!(
                    "bits {:?} sigma {:?}: median {:.4} (q1 {:.4}, q3 {:.4})",
                    s.bits, s.sigma, s.median, s.q1, s.q3
                );
            }
        }
        Command::Pipeline => {
            name = "pipeline";
            let s = run_full_pipeline(&cfg, &mut dir)?;
            println!(
                "software {:.4}, ideal crossbar {:.4} (match: {}), noisy median {:.4} at sigma {}",
                s.software_accuracy,
                s.ideal_crossbar_accuracy,
                s.ideal_predictions_match,
                s.noisy_crossbar.median,
                s.noisy_crossbar.sigma
            );
        }
        Command::ExportHeatmap { program, kernel, stem } => {
            name = "export-heatmap";
            let plan = ProgramFile::load(program)?.plan;
            let indices: Vec<usize> = match kernel {
                Some(k) if *k < plan.programs.len() => vec![*k],
                Some(k) => {
                    return Err(Error::InvalidConfig(format!(
                        "kernel {k} out of range ({} kernels)",
                        plan.programs.len()
                    )))
                }
                None => (0..plan.programs.len()).collect(),
            };
            for k in indices {
                let o = export_heatmap(&plan.programs[k], &mut dir, &format!("{stem}_{k}"))?;
                println!(
                    "kernel {k}: {}x{} grid, occupied {}x{}",
                    o.rows, o.cols, o.occupied_rows, o.occupied_cols
                );
            }
        }
    }

    RunManifest::new(name, arguments, &cfg, started)?.finish(&mut dir)?;
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Runtime => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
