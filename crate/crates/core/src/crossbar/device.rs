//! Programmed arrays: write noise, stuck devices and analog stepping.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mapping::{ConductanceProgram, CrossbarLayout, G_SPAN};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::ssm::C64;

/// Upper limit of the physical conductance range, µS.
pub const G_PHYS_MAX: f64 = 300.0;

const NOISE_STREAM: u64 = 1;
const STUCK_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceModel {
    /// Standard deviation of the write noise, µS.
    pub sigma_write: f64,
    /// Probability that a programmed device ends up stuck.
    pub p_stuck: f64,
    /// Conductance of a stuck device, µS.
    pub g_stuck: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        DeviceModel {
            sigma_write: 0.0,
            p_stuck: 0.0,
            g_stuck: G_PHYS_MAX,
        }
    }
}

impl DeviceModel {
    pub fn ideal() -> Self {
        DeviceModel::default()
    }

    pub fn with_sigma(sigma_write: f64) -> Self {
        DeviceModel {
            sigma_write,
            ..DeviceModel::default()
        }
    }

    /// Stuck probability giving two stuck devices per kernel on average.
    pub fn stuck_probability(layout: &CrossbarLayout) -> f64 {
        2.0 / layout.programmed_count() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_write.is_finite() && self.sigma_write >= 0.0) {
            return Err(Error::InvalidConfig(format!("sigma_write must be >= 0, got {}", self.sigma_write)));
        }
        if !(0.0..=1.0).contains(&self.p_stuck) {
            return Err(Error::InvalidConfig(format!("p_stuck must be in [0, 1], got {}", self.p_stuck)));
        }
        if !(0.0..=G_PHYS_MAX).contains(&self.g_stuck) {
            return Err(Error::InvalidConfig(format!(
                "g_stuck must be in [0, {G_PHYS_MAX}], got {}",
                self.g_stuck
            )));
        }
        Ok(())
    }
}

/// Converters and signal limits around the array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeripheryModel {
    /// Read voltage limit, V.
    pub v_max: f64,
    pub dac_bits: Option<u32>,
    pub adc_bits: Option<u32>,
    /// Saturate signals at `±v_max`.
    pub clip: bool,
    /// Calibrated signal peaks are multiplied by this before mapping to `v_max`.
    pub headroom: f64,
}

impl Default for PeripheryModel {
    fn default() -> Self {
        PeripheryModel {
            v_max: 0.2,
            dac_bits: None,
            adc_bits: None,
            clip: true,
            headroom: 1.25,
        }
    }
}

impl PeripheryModel {
    /// No converters and no saturation.
    pub fn ideal() -> Self {
        PeripheryModel {
            dac_bits: None,
            adc_bits: None,
            clip: false,
            ..PeripheryModel::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_max.is_finite() && self.v_max > 0.0) {
            return Err(Error::InvalidConfig(format!("v_max must be positive, got {}", self.v_max)));
        }
        for bits in [self.dac_bits, self.adc_bits].into_iter().flatten() {
            if !(2..=32).contains(&bits) {
                return Err(Error::InvalidConfig(format!("converter bits must be in 2..=32, got {bits}")));
            }
        }
        if !(self.headroom.is_finite() && self.headroom > 0.0) {
            return Err(Error::InvalidConfig(format!("headroom must be positive, got {}", self.headroom)));
        }
        Ok(())
    }

    fn convert(&self, v: f64, bits: Option<u32>, clips: &mut u64) -> f64 {
        let mut v = v;
        if self.clip && v.abs() > self.v_max {
            *clips += 1;
            v = v.clamp(-self.v_max, self.v_max);
        }
        match bits {
            Some(b) => {
                let n = f64::from(1u32 << (b - 1));
                (v * n / self.v_max).round().clamp(-n, n) * self.v_max / n
            }
            None => v,
        }
    }
}

/// One physical array after programming, plus its state voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct XbarState {
    pub layout: CrossbarLayout,
    pub w_max: f64,
    /// Weight-domain magnitude of inputs and states mapped to `v_max`.
    pub signal_range: f64,
    /// Weight-domain magnitude of the output mapped to `v_max`.
    pub output_range: f64,
    target: Vec<f64>,
    actual: Vec<f64>,
    stuck: Vec<(usize, usize)>,
    /// Programmed rows per column, ascending.
    column_rows: Vec<Vec<usize>>,
    voltages: Vec<f64>,
    /// Number of signals saturated at `±v_max` so far.
    pub clip_events: u64,
}

fn split(x: f64) -> (f64, f64) {
    (x.max(0.0), (-x).max(0.0))
}

impl XbarState {
    fn idx(&self, row: usize, col: usize) -> usize {
        row * self.layout.cols + col
    }

    pub fn actual(&self, row: usize, col: usize) -> f64 {
        self.actual[self.idx(row, col)]
    }

    pub fn target(&self, row: usize, col: usize) -> f64 {
        self.target[self.idx(row, col)]
    }

    /// Actual conductances as a `[row][col]` grid.
    pub fn actual_grid(&self) -> Vec<Vec<f64>> {
        self.actual.chunks(self.layout.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn stuck_devices(&self) -> &[(usize, usize)] {
        &self.stuck
    }

    /// Forces the given programmed devices to `g` and records them as stuck.
    pub fn inject_stuck(&mut self, devices: &[(usize, usize)], g: f64) -> Result<()> {
        for &(r, c) in devices {
            if r >= self.layout.rows || c >= self.layout.cols || self.layout.role(r, c).is_none() {
                return Err(Error::Layout(format!("device ({r}, {c}) is not programmed")));
            }
            let i = self.idx(r, c);
            self.actual[i] = g.clamp(0.0, G_PHYS_MAX);
            if !self.stuck.contains(&(r, c)) {
                self.stuck.push((r, c));
            }
        }
        self.stuck.sort_unstable();
        Ok(())
    }

    /// Rewrites every stuck device to its target conductance.
    pub fn repair_stuck(&mut self) {
        for (r, c) in std::mem::take(&mut self.stuck) {
            let i = self.idx(r, c);
            self.actual[i] = self.target[i];
        }
    }

    /// Clears the state voltages.
    pub fn reset(&mut self) {
        self.voltages.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Current state read back in weight units.
    pub fn state(&self, periphery: &PeripheryModel) -> Vec<C64> {
        let s = self.signal_range / periphery.v_max;
        self.voltages
            .chunks(4)
            .map(|v| C64::new(v[0] - v[1], v[2] - v[3]) * s)
            .collect()
    }

    fn beta(&self) -> f64 {
        self.w_max / G_SPAN
    }

    fn column_current(&self, col: usize, v: &[f64]) -> f64 {
        self.column_rows[col]
            .iter()
            .map(|&r| self.actual[r * self.layout.cols + col] * v[r])
            .sum()
    }
}

/// Writes a program into an array. Programmed devices receive clipped
/// Gaussian write noise and then independently stick with `p_stuck`.
pub fn program(cp: &ConductanceProgram, dev: &DeviceModel, seed: u64) -> Result<XbarState> {
    cp.validate()?;
    dev.validate()?;
    let layout = cp.layout;
    let mut noise_rng = seeded(derive_seed(seed, &[NOISE_STREAM]));
    let mut stuck_rng = seeded(derive_seed(seed, &[STUCK_STREAM]));
    let target: Vec<f64> = cp.target.iter().flatten().copied().collect();
    let mut actual = vec![0.0; target.len()];
    let mut stuck = Vec::new();
    let mut column_rows = vec![Vec::new(); layout.cols];
    for (r, c) in layout.programmed_devices() {
        let i = r * layout.cols + c;
        let z: f64 = noise_rng.sample(StandardNormal);
        let mut g = (target[i] + dev.sigma_write * z).clamp(0.0, G_PHYS_MAX);
        if stuck_rng.random::<f64>() < dev.p_stuck {
            g = dev.g_stuck;
            stuck.push((r, c));
        }
        actual[i] = g;
        column_rows[c].push(r);
    }
    Ok(XbarState {
        layout,
        w_max: cp.w_max,
        signal_range: 1.0,
        output_range: 1.0,
        target,
        actual,
        stuck,
        column_rows,
        voltages: vec![0.0; 4 * layout.n],
        clip_events: 0,
    })
}

/// Column currents in µA for row voltages `v` in V. Voltages beyond `v_max`
/// are clipped and counted.
pub fn xbar_vmm(state: &mut XbarState, v: &[f64], v_max: f64) -> Result<Vec<f64>> {
    if v.len() != state.layout.rows {
        return Err(Error::Layout(format!(
            "expected {} row voltages, got {}",
            state.layout.rows,
            v.len()
        )));
    }
    let mut clipped = v.to_vec();
    for x in &mut clipped {
        if x.abs() > v_max {
            state.clip_events += 1;
            *x = x.clamp(-v_max, v_max);
        }
    }
    let cols = state.layout.cols;
    let mut out = vec![0.0; cols];
    for (r, &vr) in clipped.iter().enumerate() {
        for (c, i) in out.iter_mut().enumerate() {
            *i += state.actual[r * cols + c] * vr;
        }
    }
    Ok(out)
}

/// One in-memory step: input and stored state drive the rows at once. New
/// state voltages are latched and the returned output is `C̄x` of the
/// previous step, in weight units.
pub fn xbar_kernel_step(state: &mut XbarState, periphery: &PeripheryModel, u: f64) -> C64 {
    let n = state.layout.n;
    let v_max = periphery.v_max;
    let s = v_max / state.signal_range;
    let mut clips = 0;
    let vin = periphery.convert(u * s, periphery.dac_bits, &mut clips);
    let mut rows = vec![0.0; 4 + 4 * n];
    (rows[0], rows[1]) = split(vin);
    rows[4..].copy_from_slice(&state.voltages);
    let beta = state.beta();
    let diff = |st: &XbarState, col: usize| {
        beta * (st.column_current(col, &rows) - st.column_current(col + 1, &rows))
    };
    let mut next = vec![0.0; 4 * n];
    for k in 0..n {
        let re = periphery.convert(diff(state, 4 * k), periphery.adc_bits, &mut clips);
        let im = periphery.convert(diff(state, 4 * k + 2), periphery.adc_bits, &mut clips);
        (next[4 * k], next[4 * k + 1]) = split(re);
        (next[4 * k + 2], next[4 * k + 3]) = split(im);
    }
    let out_gain = state.signal_range / state.output_range;
    let y_re = periphery.convert(diff(state, 4 * n) * out_gain, periphery.adc_bits, &mut clips);
    let y_im = periphery.convert(diff(state, 4 * n + 2) * out_gain, periphery.adc_bits, &mut clips);
    state.voltages = next;
    state.clip_events += clips;
    C64::new(y_re, y_im) * (state.output_range / v_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::mapping::map_kernel;
    use crate::ssm::{kernel_run, DiscreteKernel};

    fn kernel() -> DiscreteKernel {
        DiscreteKernel {
            a_bar: vec![C64::new(0.9, 0.2), C64::new(0.5, -0.6)],
            b_bar: vec![C64::new(0.1, 0.05), C64::new(-0.2, 0.1)],
            c_bar: vec![C64::new(1.0, -0.5), C64::new(0.3, 0.7)],
        }
    }

    fn programmed(dev: &DeviceModel, seed: u64) -> XbarState {
        let dk = kernel();
        let cp = map_kernel(&dk, &CrossbarLayout::new(2).unwrap()).unwrap();
        program(&cp, dev, seed).unwrap()
    }

    #[test]
    fn ideal_programming_matches_target() {
        let st = programmed(&DeviceModel::ideal(), 3);
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(st.actual(r, c), st.target(r, c));
            }
        }
        assert!(st.stuck_devices().is_empty());
    }

    #[test]
    fn noisy_programming_is_bounded_and_deterministic() {
        let dev = DeviceModel {
            sigma_write: 150.0,
            p_stuck: 0.05,
            ..DeviceModel::default()
        };
        let a = programmed(&dev, 11);
        let b = programmed(&dev, 11);
        assert_eq!(a, b);
        assert_ne!(a, programmed(&dev, 12));
        for r in 0..64 {
            for c in 0..64 {
                let g = a.actual(r, c);
                assert!((0.0..=G_PHYS_MAX).contains(&g));
                if a.layout.role(r, c).is_none() {
                    assert_eq!(g, 0.0);
                }
            }
        }
        for &(r, c) in a.stuck_devices() {
            assert_eq!(a.actual(r, c), dev.g_stuck);
        }
    }

    #[test]
    fn vmm_ohm_and_kirchhoff() {
        let mut st = programmed(&DeviceModel::ideal(), 0);
        assert!(xbar_vmm(&mut st, &[0.0; 64], 0.2).unwrap().iter().all(|&i| i == 0.0));
        let mut v = [0.0; 64];
        v[0] = 0.1;
        v[1] = 0.1;
        let i = xbar_vmm(&mut st, &v, 0.2).unwrap();
        assert!((i[0] - 0.1 * (st.actual(0, 0) + st.actual(1, 0))).abs() < 1e-12);
        // g⁺/g⁻ swap between the two rows, so common mode cancels
        assert!((i[0] - i[1]).abs() < 1e-12);
        v[0] = 0.5;
        xbar_vmm(&mut st, &v, 0.2).unwrap();
        assert_eq!(st.clip_events, 1);
    }

    #[test]
    fn zero_input_zero_state_gives_zero() {
        let mut st = programmed(&DeviceModel::ideal(), 0);
        let y = xbar_kernel_step(&mut st, &PeripheryModel::ideal(), 0.0);
        assert_eq!(y, C64::new(0.0, 0.0));
        assert!(st.state(&PeripheryModel::ideal()).iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn ideal_step_is_delayed_digital_step() {
        let dk = kernel();
        let mut st = programmed(&DeviceModel::ideal(), 0);
        let p = PeripheryModel::ideal();
        let u: Vec<f64> = (0..40).map(|t| (0.3 * t as f64).sin()).collect();
        let digital = kernel_run(&dk, &u).unwrap();
        let first = xbar_kernel_step(&mut st, &p, u[0]);
        assert_eq!(first, C64::new(0.0, 0.0));
        for t in 1..u.len() {
            let y = xbar_kernel_step(&mut st, &p, u[t]);
            let d = digital[t - 1];
            assert!((y - d).norm() <= 1e-9 * d.norm().max(1.0), "t={t}: {y} vs {d}");
        }
    }

    #[test]
    fn repair_restores_targets() {
        let mut st = programmed(&DeviceModel::ideal(), 0);
        let clean = st.clone();
        st.inject_stuck(&[(4, 0), (0, 5)], G_PHYS_MAX).unwrap();
        assert_eq!(st.stuck_devices().len(), 2);
        assert!(st.inject_stuck(&[(63, 63)], 300.0).is_err());
        st.repair_stuck();
        assert_eq!(st, clean);
    }

    #[test]
    fn adc_lattice() {
        let p = PeripheryModel::default();
        let mut clips = 0;
        assert_eq!(p.convert(0.3, Some(2), &mut clips), 0.2);
        assert_eq!(clips, 1);
        assert!((p.convert(0.07, Some(2), &mut clips) - 0.1).abs() < 1e-15);
    }
}
