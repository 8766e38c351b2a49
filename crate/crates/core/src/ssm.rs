//! Diagonal state-space (S4D) kernels and the single-layer classifier built
//! around them.
//!
//! A kernel is parametrized in continuous time by a diagonal complex matrix
//! `A`, an input vector `B` (fixed to ones) and a readout vector `C`, plus a
//! trainable time step `Δ = exp(log_dt)`. Zero-order hold turns it into the
//! recurrence
//!
//! ```text
//! x_t = Ā x_{t-1} + B̄ u_t,    y_t = C̄ x_t
//! ```
//!
//! with `Ā = exp(ΔA)`, `B̄ = (Ā - 1) A⁻¹ B` and `C̄ = C`. The real part of `A`
//! is stored as `-exp(rho_re)` so it stays strictly negative under training.
//!
//! The classifier is `encoder (1→H) → H kernels → mixer (H→H) → GELU →
//! mean over time → decoder (H→classes)`, consuming `Re(y)` from each kernel.

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::rng::{derive_seed, seeded};

pub type C64 = Complex64;

const LOG_DT_MIN: f64 = -6.907_755_278_982_137; // ln 0.001
const LOG_DT_MAX: f64 = -2.302_585_092_994_046; // ln 0.1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Parallel kernels per layer.
    pub h: usize,
    /// State dimension of each kernel.
    pub n: usize,
    pub n_classes: usize,
    pub sequence_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 1,
            h: 3,
            n: 14,
            n_classes: 2,
            sequence_length: 871,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers != 1 {
            return Err(Error::InvalidConfig(format!(
                "only single-layer models are supported (n_layers = {})",
                self.n_layers
            )));
        }
        if self.h == 0 || self.n == 0 {
            return Err(Error::InvalidConfig(format!(
                "H and N must be at least 1 (H = {}, N = {})",
                self.h, self.n
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least two classes, got {}",
                self.n_classes
            )));
        }
        if self.sequence_length == 0 {
            return Err(Error::InvalidConfig("sequence_length must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable continuous-time parameters of one kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub log_dt: f64,
    pub rho_re: Vec<f64>,
    pub a_im: Vec<f64>,
    pub c_re: Vec<f64>,
    pub c_im: Vec<f64>,
    pub b_re: Vec<f64>,
}

impl KernelParams {
    pub fn state_dim(&self) -> usize {
        self.rho_re.len()
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }

    pub fn a_re(&self) -> Vec<f64> {
        self.rho_re.iter().map(|r| -r.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rho_re.len();
        if n == 0 {
            return Err(Error::InvalidConfig("kernel with empty state".into()));
        }
        for (name, len) in [
            ("a_im", self.a_im.len()),
            ("c_re", self.c_re.len()),
            ("c_im", self.c_im.len()),
            ("b_re", self.b_re.len()),
        ] {
            if len != n {
                return Err(Error::InvalidConfig(format!(
                    "kernel tensor {name} has length {len}, expected {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn continuous(&self) -> ContinuousKernel {
        ContinuousKernel {
            dt: self.dt(),
            a: self
                .rho_re
                .iter()
                .zip(&self.a_im)
                .map(|(&r, &i)| C64::new(-r.exp(), i))
                .collect(),
            b: self.b_re.clone(),
            c: self
                .c_re
                .iter()
                .zip(&self.c_im)
                .map(|(&r, &i)| C64::new(r, i))
                .collect(),
        }
    }

    pub fn discretize(&self) -> Result<DiscreteKernel> {
        zoh_discretize(&self.continuous())
    }
}

/// S4D-Lin initialization: `a_n = -1/2 + iπn`, `B = 1`, `C ~ N(0, 1)` and
/// `Δ` log-uniform in `[0.001, 0.1]`.
pub fn init_kernel(n: usize, seed: u64) -> Result<KernelParams> {
    if n == 0 {
        return Err(Error::InvalidConfig("state dimension N must be at least 1".into()));
    }
    let mut rng = seeded(seed);
    let log_dt = rng.sample(Uniform::new(LOG_DT_MIN, LOG_DT_MAX).expect("valid range"));
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let c_re: Vec<f64> = (0..n).map(|_| normal()).collect();
    let c_im: Vec<f64> = (0..n).map(|_| normal()).collect();
    Ok(KernelParams {
        log_dt,
        rho_re: vec![0.5f64.ln(); n],
        a_im: (0..n).map(|k| std::f64::consts::PI * k as f64).collect(),
        c_re,
        c_im,
        b_re: vec![1.0; n],
    })
}

/// Continuous-time kernel in explicit complex form. Quantization acts on this
/// representation before discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousKernel {
    pub dt: f64,
    pub a: Vec<C64>,
    pub b: Vec<f64>,
    pub c: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteKernel {
    pub a_bar: Vec<C64>,
    pub b_bar: Vec<C64>,
    pub c_bar: Vec<C64>,
}

impl DiscreteKernel {
    pub fn state_dim(&self) -> usize {
        self.a_bar.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.a_bar.len();
        if self.b_bar.len() != n || self.c_bar.len() != n {
            return Err(Error::InvalidConfig(format!(
                "discrete kernel dimensions disagree: {} / {} / {}",
                n,
                self.b_bar.len(),
                self.c_bar.len()
            )));
        }
        Ok(())
    }
}

/// Kernel state; one complex entry per diagonal mode.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(pub Vec<C64>);

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        StateVector(vec![C64::new(0.0, 0.0); n])
    }
}

/// `exp(z) - 1` without cancellation for small `|z|`.
pub fn expm1_complex(z: C64) -> C64 {
    let half_sin = (0.5 * z.im).sin();
    C64::new(
        z.re.exp_m1() * z.im.cos() - 2.0 * half_sin * half_sin,
        z.re.exp() * z.im.sin(),
    )
}

const SERIES_CUTOFF: f64 = 1e-4;

/// ZOH of one diagonal mode with unit input weight: returns `(ā, b̄)`.
pub fn zoh_mode(a: C64, dt: f64) -> (C64, C64) {
    let z = a * dt;
    let a_bar = z.exp();
    let b_bar = if a == C64::new(0.0, 0.0) {
        C64::new(dt, 0.0)
    } else if z.norm() < SERIES_CUTOFF {
        dt * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0)))
    } else {
        expm1_complex(z) / a
    };
    (a_bar, b_bar)
}

/// Partial derivatives of one ZOH mode. The complex derivatives with respect
/// to `a` are holomorphic; the ones with respect to `dt` are ordinary.
#[derive(Debug, Clone, Copy)]
pub struct ZohPartials {
    pub a_bar: C64,
    pub b_bar: C64,
    pub da_bar_da: C64,
    pub db_bar_da: C64,
    pub da_bar_ddt: C64,
    pub db_bar_ddt: C64,
}

pub fn zoh_partials(a: C64, dt: f64) -> ZohPartials {
    let (a_bar, b_bar) = zoh_mode(a, dt);
    let z = a * dt;
    let db_bar_da = if z.norm() < SERIES_CUTOFF {
        dt * dt * (0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0)))
    } else {
        (dt * a_bar - b_bar) / a
    };
    ZohPartials {
        a_bar,
        b_bar,
        da_bar_da: dt * a_bar,
        db_bar_da,
        da_bar_ddt: a * a_bar,
        db_bar_ddt: a_bar,
    }
}

/// Zero-order-hold discretization; `C̄ = C`.
pub fn zoh_discretize(k: &ContinuousKernel) -> Result<DiscreteKernel> {
    ensure_finite(k.dt, "time step")?;
    if k.dt < 0.0 {
        return Err(Error::NumericDomain(format!("negative time step {}", k.dt)));
    }
    if k.a.len() != k.b.len() || k.a.len() != k.c.len() {
        return Err(Error::InvalidConfig("kernel tensors have mismatched lengths".into()));
    }
    let mut a_bar = Vec::with_capacity(k.a.len());
    let mut b_bar = Vec::with_capacity(k.a.len());
    for (&a, &b) in k.a.iter().zip(&k.b) {
        if !(a.re.is_finite() && a.im.is_finite() && b.is_finite()) {
            return Err(Error::NumericDomain(format!("non-finite kernel entry a = {a}, b = {b}")));
        }
        let (ab, bb) = zoh_mode(a, k.dt);
        a_bar.push(ab);
        b_bar.push(bb * b);
    }
    for c in &k.c {
        if !(c.re.is_finite() && c.im.is_finite()) {
            return Err(Error::NumericDomain(format!("non-finite readout entry {c}")));
        }
    }
    Ok(DiscreteKernel {
        a_bar,
        b_bar,
        c_bar: k.c.clone(),
    })
}

/// One recurrent step. Returns the new state and the complex output `C̄ x_t`.
pub fn kernel_step(dk: &DiscreteKernel, x_prev: &StateVector, u: f64) -> Result<(StateVector, C64)> {
    dk.check()?;
    if x_prev.0.len() != dk.state_dim() {
        return Err(Error::InvalidConfig(format!(
            "state has {} entries, kernel has {}",
            x_prev.0.len(),
            dk.state_dim()
        )));
    }
    ensure_finite(u, "kernel input")?;
    let mut x = x_prev.0.clone();
    let y = step_in_place(dk, &mut x, u, None);
    Ok((StateVector(x), y))
}

#[inline]
fn step_in_place(dk: &DiscreteKernel, x: &mut [C64], u: f64, state_q: Option<&dyn Fn(f64) -> f64>) -> C64 {
    let mut y = C64::new(0.0, 0.0);
    for n in 0..x.len() {
        let mut next = dk.a_bar[n] * x[n] + dk.b_bar[n] * u;
        if let Some(q) = state_q {
            next = C64::new(q(next.re), q(next.im));
        }
        x[n] = next;
        y += dk.c_bar[n] * next;
    }
    y
}

/// Runs the recurrence from a zero state and returns every output.
pub fn kernel_run(dk: &DiscreteKernel, u: &[f64]) -> Result<Vec<C64>> {
    dk.check()?;
    let mut x = vec![C64::new(0.0, 0.0); dk.state_dim()];
    u.iter()
        .map(|&ut| {
            ensure_finite(ut, "kernel input")?;
            Ok(step_in_place(dk, &mut x, ut, None))
        })
        .collect()
}

/// Runs the recurrence, optionally quantizing the state after each step and
/// recording every state (`L × N`, time-major) for backpropagation. Returns
/// `Re(y_t)`.
pub fn kernel_run_traced(
    dk: &DiscreteKernel,
    u: &[f64],
    state_q: Option<&dyn Fn(f64) -> f64>,
    mut record: Option<&mut Vec<C64>>,
) -> Vec<f64> {
    let n = dk.state_dim();
    let mut x = vec![C64::new(0.0, 0.0); n];
    if let Some(rec) = record.as_deref_mut() {
        rec.clear();
        rec.reserve(u.len() * n);
    }
    u.iter()
        .map(|&ut| {
            let y = step_in_place(dk, &mut x, ut, state_q);
            if let Some(rec) = record.as_deref_mut() {
                rec.extend_from_slice(&x);
            }
            y.re
        })
        .collect()
}

/// Convolution form `y_t = Σ_k (C̄ Ā^k B̄) u_{t-k}` with the kernel taps
/// materialized explicitly. Quadratic in `L`; kept as a reference for the
/// recurrent path.
pub fn kernel_conv_unroll(dk: &DiscreteKernel, u: &[f64]) -> Result<Vec<C64>> {
    dk.check()?;
    if u.is_empty() {
        return Err(Error::InvalidConfig("convolution needs at least one input sample".into()));
    }
    let l = u.len();
    let mut taps = vec![C64::new(0.0, 0.0); l];
    for n in 0..dk.state_dim() {
        let mut power = C64::new(1.0, 0.0);
        for tap in taps.iter_mut() {
            *tap += dk.c_bar[n] * power * dk.b_bar[n];
            power *= dk.a_bar[n];
        }
    }
    Ok((0..l)
        .map(|t| (0..=t).map(|k| taps[k] * u[t - k]).sum())
        .collect())
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Full parameter set of the classifier. Matrices are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder_w: Vec<f64>,
    pub encoder_b: Vec<f64>,
    pub kernels: Vec<KernelParams>,
    pub mixer_w: Vec<f64>,
    pub mixer_b: Vec<f64>,
    pub decoder_w: Vec<f64>,
    pub decoder_b: Vec<f64>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.h;
        let mut rng = seeded(derive_seed(seed, &[0x11]));
        let mut uniform = |bound: f64, count: usize| -> Vec<f64> {
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
            (0..count).map(|_| dist.sample(&mut rng)).collect()
        };
        let encoder_w = uniform(1.0, h);
        let encoder_b = uniform(1.0, h);
        let mix_bound = 1.0 / (h as f64).sqrt();
        let mixer_w = uniform(mix_bound, h * h);
        let mixer_b = uniform(mix_bound, h);
        let decoder_w = uniform(mix_bound, config.n_classes * h);
        let decoder_b = uniform(mix_bound, config.n_classes);
        let kernels = (0..h)
            .map(|k| init_kernel(config.n, derive_seed(seed, &[0x22, k as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            config: config.clone(),
            encoder_w,
            encoder_b,
            kernels,
            mixer_w,
            mixer_b,
            decoder_w,
            decoder_b,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        let (h, c) = (cfg.h, cfg.n_classes);
        let shapes = [
            ("encoder_w", self.encoder_w.len(), h),
            ("encoder_b", self.encoder_b.len(), h),
            ("mixer_w", self.mixer_w.len(), h * h),
            ("mixer_b", self.mixer_b.len(), h),
            ("decoder_w", self.decoder_w.len(), c * h),
            ("decoder_b", self.decoder_b.len(), c),
            ("kernels", self.kernels.len(), h),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::InvalidConfig(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        for k in &self.kernels {
            k.validate()?;
            if k.state_dim() != cfg.n {
                return Err(Error::InvalidConfig(format!(
                    "kernel state dimension {} does not match N = {}",
                    k.state_dim(),
                    cfg.n
                )));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars (`b_re` is fixed and excluded).
    pub fn n_trainable(&self) -> usize {
        let per_kernel: usize = self.kernels.iter().map(|k| 1 + 4 * k.state_dim()).sum();
        self.encoder_w.len()
            + self.encoder_b.len()
            + per_kernel
            + self.mixer_w.len()
            + self.mixer_b.len()
            + self.decoder_w.len()
            + self.decoder_b.len()
    }

    /// Flattens the trainable scalars in a fixed order: encoder, kernels
    /// (`log_dt, rho_re, a_im, c_re, c_im` each), mixer, decoder.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_trainable());
        out.extend_from_slice(&self.encoder_w);
        out.extend_from_slice(&self.encoder_b);
        for k in &self.kernels {
            out.push(k.log_dt);
            out.extend_from_slice(&k.rho_re);
            out.extend_from_slice(&k.a_im);
            out.extend_from_slice(&k.c_re);
            out.extend_from_slice(&k.c_im);
        }
        out.extend_from_slice(&self.mixer_w);
        out.extend_from_slice(&self.mixer_b);
        out.extend_from_slice(&self.decoder_w);
        out.extend_from_slice(&self.decoder_b);
        out
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_trainable(), "flat parameter length");
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap());
        fill(&mut self.encoder_w);
        fill(&mut self.encoder_b);
        for k in &mut self.kernels {
            fill(std::slice::from_mut(&mut k.log_dt));
            fill(&mut k.rho_re);
            fill(&mut k.a_im);
            fill(&mut k.c_re);
            fill(&mut k.c_im);
        }
        fill(&mut self.mixer_w);
        fill(&mut self.mixer_b);
        fill(&mut self.decoder_w);
        fill(&mut self.decoder_b);
    }

    pub fn dense_layers(&self) -> DenseLayers {
        DenseLayers {
            h: self.config.h,
            n_classes: self.config.n_classes,
            encoder_w: self.encoder_w.clone(),
            encoder_b: self.encoder_b.clone(),
            mixer_w: self.mixer_w.clone(),
            mixer_b: self.mixer_b.clone(),
            decoder_w: self.decoder_w.clone(),
            decoder_b: self.decoder_b.clone(),
        }
    }
}

/// The digital (non-kernel) part of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayers {
    pub h: usize,
    pub n_classes: usize,
    pub encoder_w: Vec<f64>,
    pub encoder_b: Vec<f64>,
    pub mixer_w: Vec<f64>,
    pub mixer_b: Vec<f64>,
    pub decoder_w: Vec<f64>,
    pub decoder_b: Vec<f64>,
}

/// Intermediate values of the readout path, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Readout {
    /// Mixer pre-activations, `[channel][t]`.
    pub mixed: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub scores: Vec<f64>,
}

impl DenseLayers {
    /// Encoder drive for every kernel, `[channel][t]`.
    pub fn encode(&self, u: &[f64]) -> Vec<Vec<f64>> {
        (0..self.h)
            .map(|h| u.iter().map(|&ut| self.encoder_w[h] * ut + self.encoder_b[h]).collect())
            .collect()
    }

    /// Mixer, GELU, mean pooling and decoder applied to the kernel outputs
    /// `Re(y)`, given as `[channel][t]`.
    pub fn readout(&self, z: &[Vec<f64>]) -> Readout {
        let h = self.h;
        let l = z.first().map_or(0, Vec::len);
        let mut mixed = vec![vec![0.0; l]; h];
        let mut pooled = vec![0.0; h];
        for j in 0..h {
            let row = &self.mixer_w[j * h..(j + 1) * h];
            let mut acc = 0.0;
            for t in 0..l {
                let mut m = self.mixer_b[j];
                for (w, zk) in row.iter().zip(z) {
                    m += w * zk[t];
                }
                mixed[j][t] = m;
                acc += gelu(m);
            }
            pooled[j] = acc / l as f64;
        }
        let scores = (0..self.n_classes)
            .map(|k| {
                let row = &self.decoder_w[k * h..(k + 1) * h];
                self.decoder_b[k] + row.iter().zip(&pooled).map(|(w, p)| w * p).sum::<f64>()
            })
            .collect();
        Readout {
            mixed,
            pooled,
            scores,
        }
    }
}

/// Exact floating-point forward pass; returns the class scores.
pub fn model_forward(p: &ModelParams, u: &[f64]) -> Result<Vec<f64>> {
    p.validate()?;
    if u.is_empty() {
        return Err(Error::InvalidConfig("input sequence is empty".into()));
    }
    for &ut in u {
        ensure_finite(ut, "input sample")?;
    }
    let dense = p.dense_layers();
    let kernels = p
        .kernels
        .iter()
        .map(KernelParams::discretize)
        .collect::<Result<Vec<_>>>()?;
    let drive = dense.encode(u);
    let z: Vec<Vec<f64>> = kernels
        .iter()
        .zip(&drive)
        .map(|(dk, e)| kernel_run_traced(dk, e, None, None))
        .collect();
    Ok(dense.readout(&z).scores)
}

pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best })
        .0
}
