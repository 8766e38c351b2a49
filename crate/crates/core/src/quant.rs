//! Uniform symmetric quantization with a fixed or per-tensor dynamic range.
//!
//! A spec with `bits` and range `f_scale` uses `n_levels = 2^(bits-1)` steps
//! per sign, so the lattice is `{k · f_scale / n_levels : |k| ≤ n_levels}`.
//! Values are rounded half away from zero and clamped to `±f_scale`. Two bits
//! therefore give five levels, which collapse to three on a sign-constrained
//! tensor.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Constant range shared by every element.
    Fixed,
    /// Range recomputed per tensor as `max |x|`.
    Dynamic,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSpec {
    pub bits: u32,
    pub f_scale: f64,
    pub mode: QuantMode,
}

impl QuantSpec {
    pub const fn off() -> Self {
        QuantSpec {
            bits: MAX_BITS,
            f_scale: 1.0,
            mode: QuantMode::Off,
        }
    }

    pub const fn fixed(bits: u32, f_scale: f64) -> Self {
        QuantSpec {
            bits,
            f_scale,
            mode: QuantMode::Fixed,
        }
    }

    pub const fn dynamic(bits: u32) -> Self {
        QuantSpec {
            bits,
            f_scale: 1.0,
            mode: QuantMode::Dynamic,
        }
    }

    pub fn is_off(&self) -> bool {
        self.mode == QuantMode::Off
    }

    pub fn n_levels(&self) -> f64 {
        2f64.powi(self.bits as i32 - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_off() {
            return Ok(());
        }
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "quantization bits must lie in {MIN_BITS}..={MAX_BITS}, got {}",
                self.bits
            )));
        }
        if self.mode == QuantMode::Fixed && !(self.f_scale.is_finite() && self.f_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fixed dynamic range must be positive, got {}",
                self.f_scale
            )));
        }
        Ok(())
    }

    /// Range actually used for a tensor with the given peak magnitude.
    pub fn effective_scale(&self, peak: f64) -> f64 {
        match self.mode {
            QuantMode::Dynamic if peak > 0.0 => peak,
            QuantMode::Dynamic => 1.0,
            _ => self.f_scale,
        }
    }
}

#[inline]
fn on_lattice(x: f64, n_levels: f64, f_scale: f64) -> f64 {
    let k = (x * n_levels / f_scale).round().clamp(-n_levels, n_levels);
    k * f_scale / n_levels
}

/// Quantizes one value. A dynamic spec uses `|x|` itself as the range.
pub fn quantize(x: f64, spec: &QuantSpec) -> Result<f64> {
    spec.validate()?;
    ensure_finite(x, "quantizer input")?;
    if spec.is_off() {
        return Ok(x);
    }
    Ok(on_lattice(x, spec.n_levels(), spec.effective_scale(x.abs())))
}

/// Elementwise quantization. In dynamic mode the range is `max |x|` over the
/// whole slice, falling back to 1 for an all-zero tensor.
pub fn quantize_tensor(xs: &[f64], spec: &QuantSpec) -> Result<Vec<f64>> {
    let (q, _) = quantize_tensor_with_scale(xs, spec)?;
    Ok(q)
}

/// Like [`quantize_tensor`], also returning the range that was applied.
pub fn quantize_tensor_with_scale(xs: &[f64], spec: &QuantSpec) -> Result<(Vec<f64>, f64)> {
    spec.validate()?;
    for &x in xs {
        ensure_finite(x, "quantizer input")?;
    }
    if spec.is_off() {
        return Ok((xs.to_vec(), f64::NAN));
    }
    let peak = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = spec.effective_scale(peak);
    let n_levels = spec.n_levels();
    Ok((xs.iter().map(|&x| on_lattice(x, n_levels, scale)).collect(), scale))
}

/// Quantizes the real and imaginary parts of one complex tensor with a single
/// shared range.
pub fn quantize_complex_shared(re: &[f64], im: &[f64], spec: &QuantSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let joined: Vec<f64> = re.iter().chain(im).copied().collect();
    let mut q = quantize_tensor(&joined, spec)?;
    let q_im = q.split_off(re.len());
    Ok((q, q_im))
}

/// Quantization applied to each tensor group of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantMap {
    /// Continuous state matrix `A`; real and imaginary parts share one range.
    pub a: QuantSpec,
    /// Readout `C`, shared range across real and imaginary parts.
    pub c: QuantSpec,
    pub encoder: QuantSpec,
    pub mixer: QuantSpec,
    pub decoder: QuantSpec,
    /// Kernel state after each step.
    pub state: QuantSpec,
}

impl QuantMap {
    pub const fn off() -> Self {
        QuantMap {
            a: QuantSpec::off(),
            c: QuantSpec::off(),
            encoder: QuantSpec::off(),
            mixer: QuantSpec::off(),
            decoder: QuantSpec::off(),
            state: QuantSpec::off(),
        }
    }

    /// Kernel quantized at `bits` with fixed range `a_range` on `A` and range 1
    /// on `C`; dense layers at 8-bit dynamic.
    pub const fn kernel(bits: u32, a_range: f64) -> Self {
        QuantMap {
            a: QuantSpec::fixed(bits, a_range),
            c: QuantSpec::fixed(bits, 1.0),
            ..QuantMap::digital_default()
        }
    }

    /// Same as [`QuantMap::kernel`] but with per-tensor dynamic ranges on the
    /// kernel.
    pub const fn kernel_dynamic(bits: u32) -> Self {
        QuantMap {
            a: QuantSpec::dynamic(bits),
            c: QuantSpec::dynamic(bits),
            ..QuantMap::digital_default()
        }
    }

    const fn digital_default() -> Self {
        QuantMap {
            a: QuantSpec::off(),
            c: QuantSpec::off(),
            encoder: QuantSpec::dynamic(8),
            mixer: QuantSpec::dynamic(8),
            decoder: QuantSpec::dynamic(8),
            state: QuantSpec::off(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for spec in [self.a, self.c, self.encoder, self.mixer, self.decoder, self.state] {
            spec.validate()?;
        }
        Ok(())
    }
}

impl Default for QuantMap {
    fn default() -> Self {
        QuantMap::digital_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_is_on_every_lattice() {
        for spec in [QuantSpec::fixed(2, 1.0), QuantSpec::fixed(5, 3.0), QuantSpec::dynamic(8)] {
            assert_eq!(quantize(0.0, &spec).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_bit_examples() {
        let spec = QuantSpec::fixed(2, 1.0);
        assert_eq!(spec.n_levels(), 2.0);
        assert_eq!(quantize(0.3, &spec).unwrap(), 0.5);
        assert_eq!(quantize(-0.9, &spec).unwrap(), -1.0);
        assert_eq!(quantize(-7.0, &spec).unwrap(), -1.0);
        // half away from zero
        assert_eq!(quantize(0.25, &spec).unwrap(), 0.5);
        assert_eq!(quantize(-0.25, &spec).unwrap(), -0.5);
    }

    #[test]
    fn lattice_points_are_fixed() {
        let q = quantize_tensor(&[-0.5, 0.5], &QuantSpec::fixed(2, 1.0)).unwrap();
        assert_eq!(q, vec![-0.5, 0.5]);
    }

    #[test]
    fn dynamic_matches_fixed_at_peak() {
        let xs = [0.2, -3.0, 1.7, 2.9, -0.01];
        let dynamic = quantize_tensor(&xs, &QuantSpec::dynamic(8)).unwrap();
        let fixed = quantize_tensor(&xs, &QuantSpec::fixed(8, 3.0)).unwrap();
        assert_eq!(dynamic, fixed);
    }

    #[test]
    fn dynamic_all_zero_falls_back_to_unit_range() {
        let (q, scale) = quantize_tensor_with_scale(&[0.0, 0.0], &QuantSpec::dynamic(4)).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn sign_constrained_a_is_ternary() {
        let spec = QuantSpec::fixed(2, 1.0);
        let re: Vec<f64> = (0..40).map(|k| -0.07 * k as f64).collect();
        let im: Vec<f64> = (0..40).map(|k| 0.09 * k as f64).collect();
        let (qr, qi) = quantize_complex_shared(&re, &im, &spec).unwrap();
        assert!(qr.iter().all(|v| [-1.0, -0.5, 0.0].contains(v)));
        assert!(qi.iter().all(|v| [0.0, 0.5, 1.0].contains(v)));
    }

    #[test]
    fn shared_dynamic_range_spans_both_parts() {
        let (qr, qi) = quantize_complex_shared(&[-0.5], &[4.0], &QuantSpec::dynamic(2)).unwrap();
        // range 4, step 2: -0.5 rounds to 0
        assert_eq!(qr, vec![0.0]);
        assert_eq!(qi, vec![4.0]);
    }

    #[test]
    fn errors() {
        assert!(quantize(f64::NAN, &QuantSpec::fixed(2, 1.0)).is_err());
        assert!(quantize(1.0, &QuantSpec::fixed(1, 1.0)).is_err());
        assert!(quantize(1.0, &QuantSpec::fixed(4, 0.0)).is_err());
    }

    #[test]
    fn off_is_identity() {
        assert_eq!(quantize(0.123, &QuantSpec::off()).unwrap(), 0.123);
        assert_eq!(quantize_tensor(&[1.5, -2.0], &QuantSpec::off()).unwrap(), vec![1.5, -2.0]);
    }

    fn spec_strategy() -> impl Strategy<Value = QuantSpec> {
        (2u32..10, prop_oneof![Just(1.0), Just(3.0), Just(10.0), 0.1f64..20.0])
            .prop_map(|(bits, f)| QuantSpec::fixed(bits, f))
    }

    proptest! {
        #[test]
        fn idempotent(x in -50.0f64..50.0, spec in spec_strategy()) {
            let q = quantize(x, &spec).unwrap();
            prop_assert_eq!(quantize(q, &spec).unwrap(), q);
        }

        #[test]
        fn bounded(x in -1e6f64..1e6, spec in spec_strategy()) {
            prop_assert!(quantize(x, &spec).unwrap().abs() <= spec.f_scale);
        }

        #[test]
        fn monotone(x in -50.0f64..50.0, d in 0.0f64..10.0, spec in spec_strategy()) {
            prop_assert!(quantize(x, &spec).unwrap() <= quantize(x + d, &spec).unwrap());
        }

        #[test]
        fn lattice_membership(x in -50.0f64..50.0, spec in spec_strategy()) {
            let k = quantize(x, &spec).unwrap() * spec.n_levels() / spec.f_scale;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(k.abs() <= spec.n_levels() + 1e-9);
        }

        #[test]
        fn non_positive_tensors_use_few_levels(xs in prop::collection::vec(-30.0f64..=0.0, 1..64),
                                               spec in spec_strategy()) {
            let q = quantize_tensor(&xs, &spec).unwrap();
            let mut distinct: Vec<i64> = q.iter()
                .map(|v| (v * spec.n_levels() / spec.f_scale).round() as i64)
                .collect();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert!(distinct.len() as f64 <= spec.n_levels() + 1.0);
        }
    }
}
