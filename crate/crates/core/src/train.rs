//! Quantization-aware training with a straight-through estimator.
//!
//! The forward pass runs on quantized copies of the parameters; gradients are
//! computed at those quantized values and applied unchanged to the
//! full-precision shadow parameters. Backpropagation through the recurrence is
//! hand-derived. For a real loss and complex variable `w` the gradient is
//! carried as `g_w = ∂L/∂Re(w) + i ∂L/∂Im(w)`, so a product `p = a·b`
//! back-propagates as `g_a = g_p · conj(b)`.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::quant::{quantize_complex_shared, quantize_tensor, QuantMap, QuantSpec};
use crate::rng::{derive_seed, seeded};
use crate::ssm::{
    argmax, kernel_run_traced, zoh_discretize, zoh_partials, ContinuousKernel, DenseLayers, DiscreteKernel,
    KernelParams, ModelConfig, ModelParams, Readout, C64,
};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Learning rate for `Δ` and `A`; `None` uses `learning_rate`.
    #[serde(default)]
    pub ssm_learning_rate: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub cosine_decay: bool,
    #[serde(default)]
    pub quant: QuantMap,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            ssm_learning_rate: None,
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            cosine_decay: false,
            quant: QuantMap::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for lr in std::iter::once(self.learning_rate).chain(self.ssm_learning_rate) {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        self.quant.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (highest test accuracy, earliest wins).
    pub best_epoch: usize,
    pub final_test_accuracy: f64,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.seed == other.seed
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.final_test_accuracy == other.final_test_accuracy
    }
}

/// Parameters as used by the forward pass after quantization.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub dense: DenseLayers,
    pub kernels: Vec<ContinuousKernel>,
    pub discrete: Vec<DiscreteKernel>,
    pub state: QuantSpec,
    /// Raw `rho_re` per kernel, needed to chain through `Re(a) = -exp(rho)`.
    rho_re: Vec<Vec<f64>>,
}

pub fn quantize_model(p: &ModelParams, q: &QuantMap) -> Result<QuantizedModel> {
    p.validate()?;
    q.validate()?;
    let qt = |xs: &[f64], spec: &QuantSpec| quantize_tensor(xs, spec);
    let dense = DenseLayers {
        h: p.config.h,
        n_classes: p.config.n_classes,
        encoder_w: qt(&p.encoder_w, &q.encoder)?,
        encoder_b: qt(&p.encoder_b, &q.encoder)?,
        mixer_w: qt(&p.mixer_w, &q.mixer)?,
        mixer_b: qt(&p.mixer_b, &q.mixer)?,
        decoder_w: qt(&p.decoder_w, &q.decoder)?,
        decoder_b: qt(&p.decoder_b, &q.decoder)?,
    };
    let kernels = p
        .kernels
        .iter()
        .map(|k| quantize_kernel(k, q))
        .collect::<Result<Vec<_>>>()?;
    let discrete = kernels.iter().map(zoh_discretize).collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        dense,
        kernels,
        discrete,
        state: q.state,
        rho_re: p.kernels.iter().map(|k| k.rho_re.clone()).collect(),
    })
}

/// Continuous kernel with `A` and `C` on their quantization lattices. `Δ`
/// stays full precision.
pub fn quantize_kernel(k: &KernelParams, q: &QuantMap) -> Result<ContinuousKernel> {
    let (a_re, a_im) = quantize_complex_shared(&k.a_re(), &k.a_im, &q.a)?;
    let (c_re, c_im) = quantize_complex_shared(&k.c_re, &k.c_im, &q.c)?;
    Ok(ContinuousKernel {
        dt: k.dt(),
        a: a_re.iter().zip(&a_im).map(|(&r, &i)| C64::new(r, i)).collect(),
        b: k.b_re.clone(),
        c: c_re.iter().zip(&c_im).map(|(&r, &i)| C64::new(r, i)).collect(),
    })
}

/// Values retained from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub model: Arc<QuantizedModel>,
    pub u: Vec<f64>,
    /// Encoder output per kernel, `[h][t]`.
    pub drive: Vec<Vec<f64>>,
    /// Kernel states per kernel, time-major `L × N`.
    pub states: Vec<Vec<C64>>,
    /// `Re(y)` per kernel, `[h][t]`.
    pub z: Vec<Vec<f64>>,
    pub readout: Readout,
}

impl ForwardCache {
    pub fn scores(&self) -> &[f64] {
        &self.readout.scores
    }
}

impl QuantizedModel {
    fn check_input(&self, u: &[f64]) -> Result<()> {
        if u.is_empty() {
            return Err(Error::InvalidConfig("input sequence is empty".into()));
        }
        if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!("non-finite input sample {bad}")));
        }
        Ok(())
    }

    fn state_quantizer(&self) -> Option<impl Fn(f64) -> f64 + '_> {
        if self.state.is_off() {
            return None;
        }
        let spec = self.state;
        let n_levels = spec.n_levels();
        let scale = spec.effective_scale(0.0);
        Some(move |x: f64| {
            let k = (x * n_levels / scale).round().clamp(-n_levels, n_levels);
            k * scale / n_levels
        })
    }

    /// Class scores without retaining intermediates.
    pub fn scores(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_input(u)?;
        let drive = self.dense.encode(u);
        let sq = self.state_quantizer();
        let sq_ref = sq.as_ref().map(|f| f as &dyn Fn(f64) -> f64);
        let z: Vec<Vec<f64>> = self
            .discrete
            .iter()
            .zip(&drive)
            .map(|(dk, e)| kernel_run_traced(dk, e, sq_ref, None))
            .collect();
        Ok(self.dense.readout(&z).scores)
    }

    pub fn predict(&self, u: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(u)?))
    }

    pub fn forward_traced(self: &Arc<Self>, u: &[f64]) -> Result<ForwardCache> {
        self.check_input(u)?;
        let drive = self.dense.encode(u);
        let sq = self.state_quantizer();
        let sq_ref = sq.as_ref().map(|f| f as &dyn Fn(f64) -> f64);
        let mut states = Vec::with_capacity(drive.len());
        let mut z = Vec::with_capacity(drive.len());
        for (dk, e) in self.discrete.iter().zip(&drive) {
            let mut rec = Vec::new();
            z.push(kernel_run_traced(dk, e, sq_ref, Some(&mut rec)));
            states.push(rec);
        }
        let readout = self.dense.readout(&z);
        Ok(ForwardCache {
            model: Arc::clone(self),
            u: u.to_vec(),
            drive,
            states,
            z,
            readout,
        })
    }
}

/// Quantized forward pass. With every spec off this reproduces
/// [`crate::ssm::model_forward`] bit for bit.
pub fn forward_quantized(p: &ModelParams, q: &QuantMap, u: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    let model = Arc::new(quantize_model(p, q)?);
    let cache = model.forward_traced(u)?;
    Ok((cache.readout.scores.clone(), cache))
}

/// Gradients in the layout of [`ModelParams::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub flat: Vec<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|g| g.is_finite())
    }
}

pub fn softmax_cross_entropy(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - scores[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(k, e)| e / total - if k == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Cross-entropy loss and its gradient with respect to every trainable
/// parameter.
pub fn backward(cache: &ForwardCache, label: usize) -> Result<(f64, Gradients)> {
    if label >= cache.readout.scores.len() {
        return Err(Error::InvalidConfig(format!(
            "label {label} out of range for {} classes",
            cache.readout.scores.len()
        )));
    }
    let (loss, g_scores) = softmax_cross_entropy(&cache.readout.scores, label);
    let grads = backward_from_scores(cache, &g_scores);
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NumericDomain("non-finite loss or gradient".into()));
    }
    Ok((loss, grads))
}

/// Backpropagates an arbitrary gradient on the class scores.
pub fn backward_from_scores(cache: &ForwardCache, g_scores: &[f64]) -> Gradients {
    let model = &cache.model;
    let dense = &model.dense;
    let h = dense.h;
    let l = cache.u.len();
    let ro = &cache.readout;

    // decoder
    let mut g_dec_w = vec![0.0; dense.n_classes * h];
    let mut g_pooled = vec![0.0; h];
    for (k, &gs) in g_scores.iter().enumerate() {
        for j in 0..h {
            g_dec_w[k * h + j] = gs * ro.pooled[j];
            g_pooled[j] += dense.decoder_w[k * h + j] * gs;
        }
    }
    let g_dec_b = g_scores.to_vec();

    // mean pooling, GELU, mixer
    let mut g_mix_w = vec![0.0; h * h];
    let mut g_mix_b = vec![0.0; h];
    let mut g_z = vec![vec![0.0; l]; h];
    for j in 0..h {
        let scale = g_pooled[j] / l as f64;
        for t in 0..l {
            let gm = scale * crate::ssm::gelu_grad(ro.mixed[j][t]);
            g_mix_b[j] += gm;
            for k in 0..h {
                g_mix_w[j * h + k] += gm * cache.z[k][t];
                g_z[k][t] += dense.mixer_w[j * h + k] * gm;
            }
        }
    }

    // kernels
    let mut g_enc_w = vec![0.0; h];
    let mut g_enc_b = vec![0.0; h];
    let mut kernel_grads = Vec::with_capacity(h);
    for k in 0..h {
        let kg = kernel_backward(
            &model.kernels[k],
            &model.discrete[k],
            &model.rho_re[k],
            &cache.drive[k],
            &cache.states[k],
            &g_z[k],
        );
        for t in 0..l {
            g_enc_w[k] += kg.g_drive[t] * cache.u[t];
            g_enc_b[k] += kg.g_drive[t];
        }
        kernel_grads.push(kg);
    }

    let mut flat = Vec::new();
    flat.extend_from_slice(&g_enc_w);
    flat.extend_from_slice(&g_enc_b);
    for kg in &kernel_grads {
        flat.push(kg.log_dt);
        flat.extend_from_slice(&kg.rho_re);
        flat.extend_from_slice(&kg.a_im);
        flat.extend_from_slice(&kg.c_re);
        flat.extend_from_slice(&kg.c_im);
    }
    flat.extend_from_slice(&g_mix_w);
    flat.extend_from_slice(&g_mix_b);
    flat.extend_from_slice(&g_dec_w);
    flat.extend_from_slice(&g_dec_b);
    Gradients { flat }
}

struct KernelGrads {
    log_dt: f64,
    rho_re: Vec<f64>,
    a_im: Vec<f64>,
    c_re: Vec<f64>,
    c_im: Vec<f64>,
    g_drive: Vec<f64>,
}

fn kernel_backward(
    ck: &ContinuousKernel,
    dk: &DiscreteKernel,
    rho_re: &[f64],
    drive: &[f64],
    states: &[C64],
    g_z: &[f64],
) -> KernelGrads {
    let n = dk.state_dim();
    let l = drive.len();
    let zero = C64::new(0.0, 0.0);
    let mut lambda = vec![zero; n];
    let mut g_a_bar = vec![zero; n];
    let mut g_b_bar = vec![zero; n];
    let mut g_c_bar = vec![zero; n];
    let mut g_drive = vec![0.0; l];
    let c_conj: Vec<C64> = dk.c_bar.iter().map(|c| c.conj()).collect();
    let a_conj: Vec<C64> = dk.a_bar.iter().map(|a| a.conj()).collect();

    for t in (0..l).rev() {
        let x_t = &states[t * n..(t + 1) * n];
        let gz = g_z[t];
        let mut ge = 0.0;
        for i in 0..n {
            // λ_t = g_z,t conj(c̄) + conj(ā) λ_{t+1}
            let lam = c_conj[i] * gz + a_conj[i] * lambda[i];
            lambda[i] = lam;
            g_c_bar[i] += x_t[i].conj() * gz;
            if t > 0 {
                g_a_bar[i] += lam * states[(t - 1) * n + i].conj();
            }
            g_b_bar[i] += lam * drive[t];
            ge += (lam * dk.b_bar[i].conj()).re;
        }
        g_drive[t] = ge;
    }

    let mut g_dt = 0.0;
    let mut g_rho = vec![0.0; n];
    let mut g_aim = vec![0.0; n];
    for i in 0..n {
        let part = zoh_partials(ck.a[i], ck.dt);
        // b̄ = b̄_unit · b with b real
        let g_unit = g_b_bar[i] * ck.b[i];
        let g_a = g_a_bar[i] * part.da_bar_da.conj() + g_unit * part.db_bar_da.conj();
        g_dt += (g_a_bar[i].conj() * part.da_bar_ddt).re + (g_unit.conj() * part.db_bar_ddt).re;
        g_rho[i] = g_a.re * -rho_re[i].exp();
        g_aim[i] = g_a.im;
    }

    KernelGrads {
        log_dt: g_dt * ck.dt,
        rho_re: g_rho,
        a_im: g_aim,
        c_re: g_c_bar.iter().map(|g| g.re).collect(),
        c_im: g_c_bar.iter().map(|g| g.im).collect(),
        g_drive,
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grads[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr[i] * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Per-parameter learning rate in flattened order.
fn learning_rates(p: &ModelParams, cfg: &TrainConfig) -> Vec<f64> {
    let ssm = cfg.ssm_learning_rate.unwrap_or(cfg.learning_rate);
    let h = p.config.h;
    let mut lr = vec![cfg.learning_rate; 2 * h];
    for k in &p.kernels {
        let n = k.state_dim();
        lr.extend(std::iter::repeat_n(ssm, 1 + 2 * n));
        lr.extend(std::iter::repeat_n(cfg.learning_rate, 2 * n));
    }
    lr.resize(p.n_trainable(), cfg.learning_rate);
    lr
}

/// Fraction of correctly classified sequences.
pub fn accuracy(model: &QuantizedModel, data: &[Sequence]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let predictions = data
        .par_iter()
        .map(|s| model.predict(&s.samples))
        .collect::<Result<Vec<_>>>()?;
    let correct = predictions.iter().zip(data).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / data.len() as f64)
}

fn check_dataset(dataset: &Dataset, config: &ModelConfig) -> Result<()> {
    if dataset.train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut seen = vec![false; config.n_classes];
    for s in dataset.train.iter().chain(&dataset.test) {
        if s.label >= config.n_classes {
            return Err(Error::Dataset(format!(
                "{} has label {} but the model has {} classes",
                s.source_id, s.label, config.n_classes
            )));
        }
        if s.samples.len() != config.sequence_length {
            return Err(Error::Dataset(format!(
                "{} has {} samples, model expects {}",
                s.source_id,
                s.samples.len(),
                config.sequence_length
            )));
        }
    }
    for s in &dataset.train {
        seen[s.label] = true;
    }
    if seen.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::Dataset("training split needs at least two classes".into()));
    }
    Ok(())
}

/// Trains a freshly initialized model (initialization seeded by `cfg.seed`).
pub fn train(dataset: &Dataset, config: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    let init = ModelParams::init(config, cfg.seed)?;
    train_from(init, dataset, cfg)
}

/// Minibatch Adam from the given starting point. Returns the parameters of
/// the epoch with the highest test accuracy.
pub fn train_from(init: ModelParams, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    init.validate()?;
    check_dataset(dataset, &init.config)?;
    let started = Instant::now();
    let mut rng = seeded(derive_seed(cfg.seed, &[0x7a]));
    let mut params = init;
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let base_lr = learning_rates(&params, cfg);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;

    let mut report = TrainReport {
        seed: cfg.seed,
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        final_test_accuracy: f64::NAN,
        wall_clock_seconds: 0.0,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let model = Arc::new(quantize_model(&params, &cfg.quant)?);
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &dataset.train[i];
                    let cache = model.forward_traced(&s.samples)?;
                    let hit = argmax(cache.scores()) == s.label;
                    let (loss, grads) = backward(&cache, s.label)?;
                    Ok((loss, hit, grads))
                })
                .collect::<Vec<Result<_>>>();
            let mut g_sum = vec![0.0; flat.len()];
            for r in results {
                let (loss, hit, grads) = match r {
                    Ok(v) => v,
                    Err(e) => {
                        report.wall_clock_seconds = started.elapsed().as_secs_f64();
                        return Err(Error::Divergence {
                            epoch,
                            step,
                            detail: e.to_string(),
                            partial: Box::new(report),
                        });
                    }
                };
                loss_sum += loss;
                correct += usize::from(hit);
                for (acc, g) in g_sum.iter_mut().zip(&grads.flat) {
                    *acc += g;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            g_sum.iter_mut().for_each(|g| *g *= inv);
            let decay = if cfg.cosine_decay {
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
            } else {
                1.0
            };
            let lr: Vec<f64> = base_lr.iter().map(|r| r * decay).collect();
            adam.step(&mut flat, &g_sum, &lr, cfg);
            if flat.iter().any(|v| !v.is_finite()) {
                report.wall_clock_seconds = started.elapsed().as_secs_f64();
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: "parameter update produced non-finite values".into(),
                    partial: Box::new(report),
                });
            }
            params.load_flat(&flat);
            step += 1;
        }
        let test_accuracy = if dataset.test.is_empty() {
            f64::NAN
        } else {
            accuracy(&quantize_model(&params, &cfg.quant)?, &dataset.test)?
        };
        let n = dataset.train.len() as f64;
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            test_accuracy,
        });
        log::debug!(
            "epoch {epoch}: loss {:.4} train {:.3} test {:.3}",
            loss_sum / n,
            correct as f64 / n,
            test_accuracy
        );
        // NaN test accuracy (no test split) keeps the latest parameters.
        let better = match &best {
            None => true,
            Some((acc, _)) => test_accuracy > *acc || test_accuracy.is_nan(),
        };
        if better {
            best = Some((test_accuracy, params.clone()));
            report.best_epoch = epoch;
        }
    }

    let (best_acc, best_params) = best.expect("at least one epoch");
    report.final_test_accuracy = best_acc;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((best_params, report))
}

/// Dynamic-range choice for one sweep axis entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeChoice {
    Fixed(f64),
    Dynamic,
}

impl RangeChoice {
    pub fn label(&self) -> String {
        match self {
            RangeChoice::Fixed(f) => format!("{f}"),
            RangeChoice::Dynamic => "dynamic".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("dynamic") {
            return Ok(RangeChoice::Dynamic);
        }
        s.parse::<f64>()
            .ok()
            .filter(|f| f.is_finite() && *f > 0.0)
            .map(RangeChoice::Fixed)
            .ok_or_else(|| Error::InvalidConfig(format!("bad dynamic range '{s}'")))
    }

    fn tag(&self) -> u64 {
        match self {
            RangeChoice::Fixed(f) => f.to_bits(),
            RangeChoice::Dynamic => u64::MAX,
        }
    }

    pub fn quant_map(&self, bits: u32) -> QuantMap {
        match self {
            RangeChoice::Fixed(f) => QuantMap::kernel(bits, *f),
            RangeChoice::Dynamic => QuantMap::kernel_dynamic(bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// `None` marks the unquantized baseline.
    pub bits: Option<u32>,
    pub f_scale: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Trains one model per `(bits, range)` pair plus an unquantized baseline.
///
/// All runs start from the same initialization (`cfg.seed`); each run's
/// batch order comes from a stream derived from `(seed, bits, range)`. A
/// failed run is reported as NaN accuracy.
pub fn sweep_quantization(
    dataset: &Dataset,
    config: &ModelConfig,
    bits: &[u32],
    ranges: &[RangeChoice],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if bits.is_empty() || ranges.is_empty() {
        return Err(Error::InvalidConfig("sweep axes must be non-empty".into()));
    }
    cfg.validate()?;
    let init = ModelParams::init(config, cfg.seed)?;
    check_dataset(dataset, config)?;

    let mut jobs: Vec<(Option<u32>, Option<RangeChoice>)> = vec![(None, None)];
    for &b in bits {
        for &r in ranges {
            jobs.push((Some(b), Some(r)));
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(b, r)| {
            let (quant, run_seed, label) = match (b, r) {
                (Some(b), Some(r)) => (
                    r.quant_map(b),
                    derive_seed(cfg.seed, &[b as u64, r.tag()]),
                    r.label(),
                ),
                _ => (QuantMap::off(), cfg.seed, "off".to_string()),
            };
            let run_cfg = TrainConfig {
                seed: run_seed,
                quant,
                ..cfg.clone()
            };
            let accuracy = match train_from(init.clone(), dataset, &run_cfg) {
                Ok((_, report)) => report.final_test_accuracy,
                Err(e) => {
                    log::warn!("sweep run bits={b:?} range={label} failed: {e}");
                    f64::NAN
                }
            };
            SweepRow {
                bits: b,
                f_scale: label,
                seed: run_seed,
                accuracy,
            }
        })
        .collect();
    Ok(rows)
}

/// Versioned on-disk form of a trained model and its quantization map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub kernels: Vec<KernelParams>,
    pub encoder_w: Vec<f64>,
    pub encoder_b: Vec<f64>,
    pub mixer_w: Vec<f64>,
    pub mixer_b: Vec<f64>,
    pub decoder_w: Vec<f64>,
    pub decoder_b: Vec<f64>,
    pub quant: QuantMap,
}

impl Checkpoint {
    pub fn new(p: &ModelParams, quant: &QuantMap) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: p.config.clone(),
            kernels: p.kernels.clone(),
            encoder_w: p.encoder_w.clone(),
            encoder_b: p.encoder_b.clone(),
            mixer_w: p.mixer_w.clone(),
            mixer_b: p.mixer_b.clone(),
            decoder_w: p.decoder_w.clone(),
            decoder_b: p.decoder_b.clone(),
            quant: *quant,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let p = ModelParams {
            config: self.config.clone(),
            encoder_w: self.encoder_w.clone(),
            encoder_b: self.encoder_b.clone(),
            kernels: self.kernels.clone(),
            mixer_w: self.mixer_w.clone(),
            mixer_b: self.mixer_b.clone(),
            decoder_w: self.decoder_w.clone(),
            decoder_b: self.decoder_b.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.params()?;
        ck.quant.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::model_forward;

    fn tiny(h: usize, n: usize, l: usize) -> ModelParams {
        let cfg = ModelConfig {
            n_layers: 1,
            h,
            n,
            n_classes: 2,
            sequence_length: l,
        };
        ModelParams::init(&cfg, 42).unwrap()
    }

    fn input(l: usize) -> Vec<f64> {
        (0..l).map(|t| (0.7 * t as f64).sin() * 0.8 + 0.1).collect()
    }

    #[test]
    fn all_off_matches_model_forward_bitwise() {
        let p = tiny(3, 5, 20);
        let u = input(20);
        let (s, _) = forward_quantized(&p, &QuantMap::off(), &u).unwrap();
        assert_eq!(s, model_forward(&p, &u).unwrap());
    }

    #[test]
    fn huge_bit_width_is_close_to_exact() {
        let p = tiny(2, 4, 16);
        let u = input(16);
        let q = QuantMap {
            a: QuantSpec::fixed(40, 16.0),
            c: QuantSpec::fixed(40, 4.0),
            encoder: QuantSpec::dynamic(40),
            mixer: QuantSpec::dynamic(40),
            decoder: QuantSpec::dynamic(40),
            state: QuantSpec::off(),
        };
        let (s, _) = forward_quantized(&p, &q, &u).unwrap();
        let exact = model_forward(&p, &u).unwrap();
        for (a, b) in s.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_bit_forward_uses_lattice_a() {
        let p = tiny(2, 6, 8);
        let (_, cache) = forward_quantized(&p, &QuantMap::kernel(2, 1.0), &input(8)).unwrap();
        for k in &cache.model.kernels {
            for a in &k.a {
                assert!([-1.0, -0.5, 0.0].contains(&a.re), "re {}", a.re);
                assert!([0.0, 0.5, 1.0].contains(&a.im), "im {}", a.im);
            }
        }
    }

    #[test]
    fn zero_score_gradient_gives_zero_gradients() {
        let p = tiny(2, 3, 8);
        let (_, cache) = forward_quantized(&p, &QuantMap::off(), &input(8)).unwrap();
        let g = backward_from_scores(&cache, &[0.0, 0.0]);
        assert!(g.flat.iter().all(|&v| v == 0.0));
        assert_eq!(g.flat.len(), p.n_trainable());
    }

    #[test]
    fn ste_gradient_equals_gradient_at_quantized_point() {
        // With STE the gradient w.r.t. raw parameters is the gradient of the
        // unquantized model evaluated at the quantized parameter values.
        let p = tiny(1, 3, 8);
        let u = input(8);
        let q = QuantMap {
            a: QuantSpec::fixed(3, 4.0),
            ..QuantMap::off()
        };
        let (_, cache) = forward_quantized(&p, &q, &u).unwrap();
        let (_, g_ste) = backward(&cache, 1).unwrap();

        let mut at_lattice = p.clone();
        let qk = &cache.model.kernels[0];
        at_lattice.kernels[0].a_im = qk.a.iter().map(|a| a.im).collect();
        at_lattice.kernels[0].rho_re = qk.a.iter().map(|a| (-a.re).ln()).collect();
        let (_, cache2) = forward_quantized(&at_lattice, &QuantMap::off(), &u).unwrap();
        let (_, g_exact) = backward(&cache2, 1).unwrap();

        // a_im entries sit after encoder (2), log_dt (1) and rho_re (3)
        let a_im = 2 + 1 + 3;
        for i in a_im..a_im + 3 {
            assert!((g_ste.flat[i] - g_exact.flat[i]).abs() < 1e-12);
        }
        // rho gradients differ only by the raw vs lattice exp(rho) factor
        for i in 0..3 {
            let raw = -p.kernels[0].rho_re[i].exp();
            let lat = qk.a[i].re;
            let idx = 3 + i;
            assert!((g_ste.flat[idx] / raw - g_exact.flat[idx] / lat).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let (loss, g) = softmax_cross_entropy(&[1.0, 1.0], 0);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn range_choice_parsing() {
        assert_eq!(RangeChoice::parse("dynamic").unwrap(), RangeChoice::Dynamic);
        assert_eq!(RangeChoice::parse(" 3 ").unwrap(), RangeChoice::Fixed(3.0));
        assert!(RangeChoice::parse("-1").is_err());
        assert!(RangeChoice::parse("abc").is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_field_names() {
        let p = tiny(2, 3, 8);
        let ck = Checkpoint::new(&p, &QuantMap::kernel(2, 1.0));
        let text = ck.to_json().unwrap();
        for name in [
            "log_dt", "rho_re", "a_im", "c_re", "c_im", "encoder_w", "encoder_b", "mixer_w", "mixer_b", "decoder_w",
            "decoder_b", "quant",
        ] {
            assert!(text.contains(&format!("\"{name}\"")), "missing {name}");
        }
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back.params().unwrap(), p);
        assert!(Checkpoint::from_json(&text.replace("\"version\": 1", "\"version\": 9")).is_err());
    }
}
