use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::ArtifactDir;
use super::config::{ExperimentConfig, QuantSection};
use super::results::{ResultRow, ResultTable, Stats, RESULT_VERSION};
use crate::audio::{ClassCounts, Dataset, Sequence};
use crate::crossbar::{BlockRole, ConductanceProgram, DeploymentPlan, DeviceModel, PeripheryModel};
use crate::error::{Error, Result};
use crate::quant::QuantMap;
use crate::rng::derive_seed;
use crate::ssm::ModelParams;
use crate::train::{accuracy, quantize_model, sweep_quantization, train_from, Checkpoint, TrainReport};

pub const PROGRAM_VERSION: u32 = 1;
pub const ACCURACY: &str = "test_accuracy";

/// Trains the model described by `cfg` at the quantization in `quant`.
pub fn train_model(
    cfg: &ExperimentConfig,
    quant: &QuantSection,
    dataset: &Dataset,
) -> Result<(ModelParams, QuantMap, TrainReport)> {
    let init = ModelParams::init(&cfg.model, cfg.seeds.init)?;
    let tc = cfg.train_config(quant)?;
    let (params, report) = train_from(init, dataset, &tc)?;
    Ok((params, tc.quant, report))
}

/// Bit width × dynamic range sweep, one row per trained model.
pub fn quant_sweep(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ResultTable> {
    let ranges = cfg
        .sweep
        .f_scales
        .iter()
        .map(|r| r.choice())
        .collect::<Result<Vec<_>>>()?;
    let mut tc = cfg.train_config(&cfg.quant)?;
    tc.seed = cfg.seeds.init;
    let rows = sweep_quantization(dataset, &cfg.model, &cfg.sweep.bits, &ranges, &tc)?;
    let mut table = ResultTable::default();
    for r in rows {
        table.append(ResultRow {
            version: RESULT_VERSION,
            experiment: "quant-sweep".into(),
            bits: r.bits,
            f_scale: r.f_scale,
            sigma: None,
            seed: r.seed,
            metric: ACCURACY.into(),
            value: r.accuracy,
        });
    }
    Ok(table)
}

/// On-disk form of a deployment plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramFile {
    pub version: u32,
    pub plan: DeploymentPlan,
}

impl ProgramFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        let pf: ProgramFile = serde_json::from_str(&text)?;
        if pf.version != PROGRAM_VERSION {
            return Err(Error::Dataset(format!("unsupported program version {}", pf.version)));
        }
        Ok(pf)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Checkpoint::from_json(&text)
}

/// Maps a checkpoint onto the chip, calibrating signal ranges on `calibration`.
pub fn map_checkpoint(cfg: &ExperimentConfig, ckpt: &Checkpoint, calibration: &[Sequence]) -> Result<DeploymentPlan> {
    let model = quantize_model(&ckpt.params()?, &ckpt.quant)?;
    DeploymentPlan::new(&model, &cfg.chip, calibration)
}

/// Accuracy of `instances` independently programmed chips per sigma. Chip
/// `i` uses the same device seed at every sigma.
#[allow(clippy::too_many_arguments)]
pub fn noise_trials(
    plan: &DeploymentPlan,
    device: &DeviceModel,
    periphery: &PeripheryModel,
    sigmas: &[f64],
    instances: usize,
    device_seed: u64,
    experiment: &str,
    bits: Option<u32>,
    f_scale: &str,
    data: &[Sequence],
) -> Result<ResultTable> {
    let jobs: Vec<(f64, u64)> = sigmas
        .iter()
        .flat_map(|&s| (0..instances as u64).map(move |i| (s, derive_seed(device_seed, &[i]))))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(sigma, seed)| {
            let dev = DeviceModel {
                sigma_write: sigma,
                ..*device
            };
            plan.instantiate(&dev, periphery, seed)?.evaluate(data).map(|e| e.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut table = ResultTable::default();
    for (&(sigma, seed), value) in jobs.iter().zip(values) {
        table.append(ResultRow {
            version: RESULT_VERSION,
            experiment: experiment.into(),
            bits,
            f_scale: f_scale.into(),
            sigma: Some(sigma),
            seed,
            metric: ACCURACY.into(),
            value,
        });
    }
    Ok(table)
}

/// Write-noise study over the configured bit widths and sigmas. Every
/// checkpoint is loaded before any simulation starts.
pub fn run_noise_sweep(
    cfg: &ExperimentConfig,
    checkpoints: &BTreeMap<u32, PathBuf>,
    dataset: &Dataset,
) -> Result<ResultTable> {
    let mut loaded = Vec::new();
    for &bits in &cfg.sweep.noise_bits {
        let path = checkpoints
            .get(&bits)
            .ok_or_else(|| Error::MissingArtifact(PathBuf::from(format!("<checkpoint for {bits}-bit model>"))))?;
        loaded.push((bits, load_checkpoint(path)?));
    }
    if dataset.test.is_empty() {
        return Err(Error::Dataset("noise sweep needs a test split".into()));
    }
    let mut table = ResultTable::default();
    for (bits, ckpt) in loaded {
        let plan = map_checkpoint(cfg, &ckpt, &dataset.train)?;
        let label = range_label(&ckpt.quant);
        let t = noise_trials(
            &plan,
            &cfg.device,
            &cfg.periphery,
            &cfg.sweep.sigmas,
            cfg.sweep.instances,
            cfg.seeds.device,
            "noise-sweep",
            Some(bits),
            &label,
            &dataset.test,
        )?;
        for r in t.rows() {
            table.append(r.clone());
        }
    }
    Ok(table)
}

fn range_label(q: &QuantMap) -> String {
    use crate::quant::QuantMode;
    match q.a.mode {
        QuantMode::Off => "off".into(),
        QuantMode::Dynamic => "dynamic".into(),
        QuantMode::Fixed => format!("{}", q.a.f_scale),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub sigma: f64,
    pub p_stuck: f64,
    pub instances: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub version: u32,
    pub config_hash: String,
    pub class_counts: ClassCounts,
    pub best_epoch: usize,
    pub software_accuracy: f64,
    pub ideal_crossbar_accuracy: f64,
    /// Ideal crossbar and software model agree on every test sample.
    pub ideal_predictions_match: bool,
    pub noisy_crossbar: DistributionSummary,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Data, training, mapping, ideal and noisy deployment. Artifacts written
/// before a failing stage are kept.
pub fn run_full_pipeline(cfg: &ExperimentConfig, dir: &mut ArtifactDir) -> Result<PipelineSummary> {
    for name in ["checkpoint.json", "train_report.json", "program.json", "pipeline_results.csv", "summary.json"] {
        dir.ensure_absent(name)?;
    }
    let dataset = stage("data", cfg.load_dataset())?;
    if dataset.test.is_empty() {
        return Err(Error::Dataset("pipeline needs a test split".into()).in_stage("data"));
    }

    let (params, quant, report) = stage("train", train_model(cfg, &cfg.quant, &dataset))?;
    let ckpt = Checkpoint::new(&params, &quant);
    stage("train", dir.write_bytes("checkpoint.json", ckpt.to_json()?.as_bytes()))?;
    stage("train", dir.write_json("train_report.json", &report))?;

    let plan = stage("map", map_checkpoint(cfg, &ckpt, &dataset.train))?;
    stage(
        "map",
        dir.write_json(
            "program.json",
            &ProgramFile {
                version: PROGRAM_VERSION,
                plan: plan.clone(),
            },
        ),
    )?;

    let model = quantize_model(&params, &quant)?;
    let software = stage("deploy-ideal", accuracy(&model, &dataset.test))?;
    let software_predictions = stage(
        "deploy-ideal",
        dataset.test.iter().map(|s| model.predict(&s.samples)).collect::<Result<Vec<_>>>(),
    )?;
    let ideal = stage(
        "deploy-ideal",
        plan.instantiate(&DeviceModel::ideal(), &PeripheryModel::ideal(), cfg.seeds.device)
            .and_then(|m| m.evaluate(&dataset.test)),
    )?;

    let label = range_label(&quant);
    let bits = (cfg.quant.bits > 0).then_some(cfg.quant.bits);
    let noisy = stage(
        "deploy-noisy",
        noise_trials(
            &plan,
            &cfg.device,
            &cfg.periphery,
            &[cfg.device.sigma_write],
            cfg.sweep.instances,
            cfg.seeds.device,
            "pipeline-noisy",
            bits,
            &label,
            &dataset.test,
        ),
    )?;

    let mut table = noisy.clone();
    for (experiment, value) in [("pipeline-software", software), ("pipeline-ideal", ideal.accuracy)] {
        table.append(ResultRow {
            version: RESULT_VERSION,
            experiment: experiment.into(),
            bits,
            f_scale: label.clone(),
            sigma: None,
            seed: cfg.seeds.train,
            metric: ACCURACY.into(),
            value,
        });
    }
    stage("deploy-noisy", table.write_csv(dir, "pipeline_results.csv"))?;

    let values: Vec<f64> = noisy.rows().iter().map(|r| r.value).collect();
    let s = Stats::of(&values);
    let summary = PipelineSummary {
        version: 1,
        config_hash: cfg.hash()?,
        class_counts: dataset.class_counts(),
        best_epoch: report.best_epoch,
        software_accuracy: software,
        ideal_crossbar_accuracy: ideal.accuracy,
        ideal_predictions_match: ideal.predictions == software_predictions,
        noisy_crossbar: DistributionSummary {
            sigma: cfg.device.sigma_write,
            p_stuck: cfg.device.p_stuck,
            instances: values.len(),
            min: s.min,
            q1: s.q1,
            median: s.median,
            q3: s.q3,
            max: s.max,
            mean: s.mean,
        },
    };
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayBlock {
    pub matrix: String,
    pub index: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Which cells of the heatmap grid belong to which matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapOverlay {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    pub w_max: f64,
    pub occupied_rows: usize,
    pub occupied_cols: usize,
    pub cell_counts: BTreeMap<String, usize>,
    pub blocks: Vec<OverlayBlock>,
}

pub fn heatmap_overlay(cp: &ConductanceProgram) -> HeatmapOverlay {
    let l = cp.layout;
    let mut counts: BTreeMap<String, usize> = ["A", "B", "C"].iter().map(|k| (k.to_string(), 0)).collect();
    for r in 0..l.rows {
        for c in 0..l.cols {
            let key = match l.role(r, c) {
                Some(BlockRole::A(_)) => "A",
                Some(BlockRole::B(_)) => "B",
                Some(BlockRole::C(_)) => "C",
                None => continue,
            };
            *counts.get_mut(key).expect("preset key") += 1;
        }
    }
    let mut blocks = Vec::with_capacity(3 * l.n);
    for n in 0..l.n {
        for (matrix, row0, col0) in [("A", 4 + 4 * n, 4 * n), ("B", 0, 4 * n), ("C", 4 + 4 * n, 4 * l.n)] {
            blocks.push(OverlayBlock {
                matrix: matrix.into(),
                index: n,
                row0,
                col0,
                rows: 4,
                cols: 4,
            });
        }
    }
    let (occupied_rows, occupied_cols) = cp.occupied_extent();
    HeatmapOverlay {
        version: 1,
        rows: l.rows,
        cols: l.cols,
        n: l.n,
        w_max: cp.w_max,
        occupied_rows,
        occupied_cols,
        cell_counts: counts,
        blocks,
    }
}

/// Plain grid of conductances in µS, one array row per line.
pub fn heatmap_csv(grid: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in grid {
        let line: Vec<String> = row.iter().map(|g| format!("{g}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.overlay.json`.
pub fn export_heatmap(cp: &ConductanceProgram, dir: &mut ArtifactDir, stem: &str) -> Result<HeatmapOverlay> {
    let csv_name = format!("{stem}.csv");
    let overlay_name = format!("{stem}.overlay.json");
    dir.ensure_absent(&csv_name)?;
    dir.ensure_absent(&overlay_name)?;
    let overlay = heatmap_overlay(cp);
    dir.write_bytes(&csv_name, heatmap_csv(&cp.target).as_bytes())?;
    dir.write_json(&overlay_name, &overlay)?;
    Ok(overlay)
}
