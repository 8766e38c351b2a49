//! Hybrid model: kernels on crossbar arrays, dense layers digital.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::device::{program, xbar_kernel_step, DeviceModel, PeripheryModel, XbarState};
use super::mapping::{map_kernel, ConductanceProgram, CrossbarLayout};
use crate::audio::Sequence;
use crate::error::{Error, Result};
use crate::quant::QuantMap;
use crate::rng::derive_seed;
use crate::ssm::{argmax, kernel_run_traced, DenseLayers, ModelParams, C64};
use crate::train::{quantize_model, QuantizedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Chip {
    pub arrays: usize,
}

impl Default for Chip {
    fn default() -> Self {
        Chip { arrays: 3 }
    }
}

/// Per-array signal scaling found from calibration data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalRanges {
    /// Peak of the input drive and state components.
    pub signal: f64,
    /// Peak of the output components.
    pub output: f64,
}

/// Everything needed to program a chip, independent of device randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentPlan {
    pub dense: DenseLayers,
    pub programs: Vec<ConductanceProgram>,
    pub ranges: Vec<SignalRanges>,
}

fn peak(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0f64, |m, v| m.max(v.abs()))
}

fn positive_or_one(x: f64) -> f64 {
    if x > 0.0 && x.is_finite() {
        x
    } else {
        1.0
    }
}

impl DeploymentPlan {
    /// Maps every kernel of a quantized model and calibrates its signal ranges
    /// on `calibration` inputs with the digital model.
    pub fn new(model: &QuantizedModel, chip: &Chip, calibration: &[Sequence]) -> Result<Self> {
        let h = model.discrete.len();
        if h > chip.arrays {
            return Err(Error::Capacity(format!(
                "model has {h} kernels but the chip has {} arrays",
                chip.arrays
            )));
        }
        if calibration.is_empty() {
            return Err(Error::Dataset("signal calibration needs at least one sequence".into()));
        }
        let programs = model
            .discrete
            .iter()
            .map(|dk| map_kernel(dk, &CrossbarLayout::new(dk.state_dim())?))
            .collect::<Result<Vec<_>>>()?;
        let mut ranges = vec![
            SignalRanges {
                signal: 0.0,
                output: 0.0,
            };
            h
        ];
        for seq in calibration {
            let drive = model.dense.encode(&seq.samples);
            for (k, (dk, e)) in model.discrete.iter().zip(&drive).enumerate() {
                let mut states = Vec::new();
                kernel_run_traced(dk, e, None, Some(&mut states));
                let n = dk.state_dim();
                let outputs = states.chunks(n).map(|x| {
                    x.iter().zip(&dk.c_bar).map(|(xi, ci)| ci * xi).sum::<C64>()
                });
                let r = &mut ranges[k];
                r.signal = r
                    .signal
                    .max(peak(e.iter().copied()))
                    .max(peak(states.iter().flat_map(|z| [z.re, z.im])));
                r.output = r.output.max(peak(outputs.flat_map(|z: C64| [z.re, z.im])));
            }
        }
        for r in &mut ranges {
            r.signal = positive_or_one(r.signal);
            r.output = positive_or_one(r.output);
        }
        Ok(DeploymentPlan {
            dense: model.dense.clone(),
            programs,
            ranges,
        })
    }

    /// Programs one chip. Array `k` uses a seed derived from `(seed, k)`.
    pub fn instantiate(&self, dev: &DeviceModel, periphery: &PeripheryModel, seed: u64) -> Result<DeployedModel> {
        periphery.validate()?;
        let arrays = self
            .programs
            .iter()
            .zip(&self.ranges)
            .enumerate()
            .map(|(k, (cp, r))| {
                let mut st = program(cp, dev, derive_seed(seed, &[k as u64]))?;
                st.signal_range = r.signal * periphery.headroom;
                st.output_range = r.output * periphery.headroom;
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DeployedModel {
            dense: self.dense.clone(),
            arrays,
            periphery: *periphery,
        })
    }
}

/// Quantizes `p`, maps its kernels and programs a chip.
pub fn deploy_model(
    p: &ModelParams,
    quant: &QuantMap,
    chip: &Chip,
    dev: &DeviceModel,
    periphery: &PeripheryModel,
    seed: u64,
    calibration: &[Sequence],
) -> Result<DeployedModel> {
    let model = quantize_model(p, quant)?;
    DeploymentPlan::new(&model, chip, calibration)?.instantiate(dev, periphery, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployedModel {
    pub dense: DenseLayers,
    pub arrays: Vec<XbarState>,
    pub periphery: PeripheryModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub clip_events: u64,
}

impl DeployedModel {
    /// Raw array outputs for one kernel over `drive` plus one flush step.
    /// Element `t` is `C̄x_{t-1}`, so element 0 is always zero.
    pub fn kernel_outputs(&self, k: usize, drive: &[f64]) -> (Vec<C64>, u64) {
        let mut st = self.arrays[k].clone();
        st.reset();
        st.clip_events = 0;
        let mut out: Vec<C64> = drive
            .iter()
            .map(|&e| xbar_kernel_step(&mut st, &self.periphery, e))
            .collect();
        out.push(xbar_kernel_step(&mut st, &self.periphery, 0.0));
        (out, st.clip_events)
    }

    fn scores_counted(&self, u: &[f64]) -> Result<(Vec<f64>, u64)> {
        if u.is_empty() {
            return Err(Error::InvalidConfig("input sequence is empty".into()));
        }
        if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!("non-finite input sample {bad}")));
        }
        let drive = self.dense.encode(u);
        let mut clips = 0;
        let z: Vec<Vec<f64>> = drive
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let (y, c) = self.kernel_outputs(k, e);
                clips += c;
                y[1..].iter().map(|y| y.re).collect()
            })
            .collect();
        let scores = self.dense.readout(&z).scores;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NumericDomain("crossbar outputs diverged".into()));
        }
        Ok((scores, clips))
    }

    /// Class scores, aligned with the digital model's time steps.
    pub fn scores(&self, u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.scores_counted(u)?.0)
    }

    pub fn predict(&self, u: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(u)?))
    }

    pub fn evaluate(&self, data: &[Sequence]) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::Dataset("evaluation set is empty".into()));
        }
        let results = data
            .par_iter()
            .map(|s| self.scores_counted(&s.samples).map(|(sc, c)| (argmax(&sc), c)))
            .collect::<Result<Vec<_>>>()?;
        let correct = results.iter().zip(data).filter(|((p, _), s)| *p == s.label).count();
        Ok(Evaluation {
            accuracy: correct as f64 / data.len() as f64,
            predictions: results.iter().map(|r| r.0).collect(),
            clip_events: results.iter().map(|r| r.1).sum(),
        })
    }

    pub fn stuck_count(&self) -> usize {
        self.arrays.iter().map(|a| a.stuck_devices().len()).sum()
    }

    pub fn repair_stuck(&mut self) {
        self.arrays.iter_mut().for_each(XbarState::repair_stuck);
    }
}
