//! Complex kernel entries to differential conductance blocks, and the
//! placement of a whole kernel on one array.
//!
//! A complex weight `m` acting on `v` is first written as the real 2×2
//! rotation-scaling matrix, then every real weight is split into a
//! conductance pair `(g⁺, g⁻)` driven by a sign-split input `(v⁺, v⁻)`. The
//! result is one 4×4 block per entry (outputs `i_r⁺, i_r⁻, i_i⁺, i_i⁻`,
//! inputs `v_r⁺, v_r⁻, v_i⁺, v_i⁻`):
//!
//! ```text
//! | g_r⁺ g_r⁻ g_i⁻ g_i⁺ |
//! | g_r⁻ g_r⁺ g_i⁺ g_i⁻ |
//! | g_i⁺ g_i⁻ g_r⁺ g_r⁻ |
//! | g_i⁻ g_i⁺ g_r⁻ g_r⁺ |
//! ```
//!
//! On the array, rows carry input voltages and columns collect currents, so
//! blocks are stored transposed.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{DiscreteKernel, C64};

/// Lowest programmed conductance, µS.
pub const G_OFF: f64 = 7.0;
/// Highest programmed conductance, µS.
pub const G_ON: f64 = 200.0;
pub const G_SPAN: f64 = G_ON - G_OFF;
pub const ARRAY_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossbarLayout {
    pub rows: usize,
    pub cols: usize,
    /// State dimension of the kernel placed on this array.
    pub n: usize,
}

impl CrossbarLayout {
    pub fn new(n: usize) -> Result<Self> {
        let layout = CrossbarLayout {
            rows: ARRAY_SIZE,
            cols: ARRAY_SIZE,
            n,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Layout("kernel state dimension must be at least 1".into()));
        }
        if 4 + 4 * self.n > self.rows || 4 * self.n + 4 > self.cols {
            return Err(Error::Layout(format!(
                "N = {} needs a {}×{} region, array is {}×{}",
                self.n,
                4 + 4 * self.n,
                4 * self.n + 4,
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    pub fn input_rows(&self) -> Range<usize> {
        0..4
    }

    pub fn state_rows(&self) -> Range<usize> {
        4..4 + 4 * self.n
    }

    pub fn state_cols(&self) -> Range<usize> {
        0..4 * self.n
    }

    pub fn output_cols(&self) -> Range<usize> {
        4 * self.n..4 * self.n + 4
    }

    /// Which matrix a device belongs to, if any.
    pub fn role(&self, row: usize, col: usize) -> Option<BlockRole> {
        let in_state_cols = self.state_cols().contains(&col);
        if self.input_rows().contains(&row) && in_state_cols {
            return Some(BlockRole::B(col / 4));
        }
        if self.state_rows().contains(&row) {
            let n = (row - 4) / 4;
            if in_state_cols && col / 4 == n {
                return Some(BlockRole::A(n));
            }
            if self.output_cols().contains(&col) {
                return Some(BlockRole::C(n));
            }
        }
        None
    }

    /// Number of devices that carry a weight.
    pub fn programmed_count(&self) -> usize {
        3 * 16 * self.n
    }

    /// Programmed devices in row-major order.
    pub fn programmed_devices(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.role(r, c).is_some())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockRole {
    A(usize),
    B(usize),
    C(usize),
}

/// Target conductances of one array in µS, row-major `[row][col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductanceProgram {
    pub layout: CrossbarLayout,
    /// Weight magnitude mapped onto the full `G_ON - G_OFF` span.
    pub w_max: f64,
    pub target: Vec<Vec<f64>>,
}

impl ConductanceProgram {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.target[row][col]
    }

    /// Bounding box `(rows, cols)` of all nonzero devices.
    pub fn occupied_extent(&self) -> (usize, usize) {
        let mut rows = 0;
        let mut cols = 0;
        for (r, row) in self.target.iter().enumerate() {
            for (c, &g) in row.iter().enumerate() {
                if g != 0.0 {
                    rows = rows.max(r + 1);
                    cols = cols.max(c + 1);
                }
            }
        }
        (rows, cols)
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.target.len() != self.layout.rows || self.target.iter().any(|r| r.len() != self.layout.cols) {
            return Err(Error::Layout("target matrix does not match layout size".into()));
        }
        if !(self.w_max.is_finite() && self.w_max > 0.0) {
            return Err(Error::Layout(format!("w_max must be positive, got {}", self.w_max)));
        }
        for r in 0..self.layout.rows {
            for c in 0..self.layout.cols {
                let g = self.target[r][c];
                let ok = match self.layout.role(r, c) {
                    Some(_) => (G_OFF..=G_ON).contains(&g),
                    None => g == 0.0,
                };
                if !ok {
                    return Err(Error::Layout(format!("device ({r}, {c}) has invalid target {g} µS")));
                }
            }
        }
        Ok(())
    }

    /// Reads back the 4×4 block (output-major) whose top-left device on the
    /// array is `(row0, col0)`.
    pub fn block(&self, row0: usize, col0: usize) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (o, line) in out.iter_mut().enumerate() {
            for (i, g) in line.iter_mut().enumerate() {
                *g = self.target[row0 + i][col0 + o];
            }
        }
        out
    }
}

/// Real 2×2 form of complex multiplication by `m`.
pub fn expand_complex(m: C64) -> [[f64; 2]; 2] {
    [[m.re, -m.im], [m.im, m.re]]
}

/// Signed weight to a differential conductance pair `(g⁺, g⁻)` in µS.
pub fn weight_to_pair(w: f64, w_max: f64) -> Result<(f64, f64)> {
    if !(w_max.is_finite() && w_max > 0.0) {
        return Err(Error::Layout(format!("w_max must be positive, got {w_max}")));
    }
    if !w.is_finite() || w.abs() > w_max {
        return Err(Error::Range { value: w, w_max });
    }
    Ok((
        G_OFF + w.max(0.0) / w_max * G_SPAN,
        G_OFF + (-w).max(0.0) / w_max * G_SPAN,
    ))
}

/// 4×4 conductance block of one complex entry, output-major.
pub fn expand_to_block(m: C64, w_max: f64) -> Result<[[f64; 4]; 4]> {
    let (rp, rm) = weight_to_pair(m.re, w_max)?;
    let (ip, im) = weight_to_pair(m.im, w_max)?;
    Ok([
        [rp, rm, im, ip],
        [rm, rp, ip, im],
        [ip, im, rp, rm],
        [im, ip, rm, rp],
    ])
}

/// Whether an output-major block has the differential complex structure.
pub fn is_complex_block(b: &[[f64; 4]; 4]) -> bool {
    let (rp, rm, ip, im) = (b[0][0], b[0][1], b[0][3], b[0][2]);
    let expect = [
        [rp, rm, im, ip],
        [rm, rp, ip, im],
        [ip, im, rp, rm],
        [im, ip, rm, rp],
    ];
    *b == expect
}

/// Largest real or imaginary component magnitude across `Ā`, `B̄`, `C̄`.
pub fn kernel_weight_range(dk: &DiscreteKernel) -> f64 {
    dk.a_bar
        .iter()
        .chain(&dk.b_bar)
        .chain(&dk.c_bar)
        .fold(0.0f64, |m, z| m.max(z.re.abs()).max(z.im.abs()))
}

/// Places `Ā` on the diagonal blocks, `B̄` along the input rows and `C̄` in
/// the output columns. The span is set by the largest component magnitude.
pub fn map_kernel(dk: &DiscreteKernel, layout: &CrossbarLayout) -> Result<ConductanceProgram> {
    layout.validate()?;
    if dk.state_dim() != layout.n {
        return Err(Error::Layout(format!(
            "kernel has N = {}, layout expects {}",
            dk.state_dim(),
            layout.n
        )));
    }
    let range = kernel_weight_range(dk);
    if !range.is_finite() {
        return Err(Error::NumericDomain("kernel has non-finite entries".into()));
    }
    let w_max = if range > 0.0 { range } else { 1.0 };
    let mut target = vec![vec![0.0; layout.cols]; layout.rows];
    let mut place = |m: C64, row0: usize, col0: usize| -> Result<()> {
        let block = expand_to_block(m, w_max)?;
        for (o, line) in block.iter().enumerate() {
            for (i, &g) in line.iter().enumerate() {
                target[row0 + i][col0 + o] = g;
            }
        }
        Ok(())
    };
    for n in 0..layout.n {
        place(dk.a_bar[n], 4 + 4 * n, 4 * n)?;
        place(dk.b_bar[n], 0, 4 * n)?;
        place(dk.c_bar[n], 4 + 4 * n, 4 * layout.n)?;
    }
    Ok(ConductanceProgram {
        layout: *layout,
        w_max,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn complex_expansion() {
        assert_eq!(expand_complex(c(1.0, 0.0)), [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(expand_complex(c(0.0, 1.0)), [[0.0, -1.0], [1.0, 0.0]]);
        let m = c(0.3, -1.7);
        let v = c(-0.4, 0.9);
        let e = expand_complex(m);
        let p = m * v;
        assert!((e[0][0] * v.re + e[0][1] * v.im - p.re).abs() < 1e-15);
        assert!((e[1][0] * v.re + e[1][1] * v.im - p.im).abs() < 1e-15);
    }

    #[test]
    fn pair_mapping() {
        assert_eq!(weight_to_pair(0.0, 2.0).unwrap(), (7.0, 7.0));
        assert_eq!(weight_to_pair(2.0, 2.0).unwrap(), (200.0, 7.0));
        assert_eq!(weight_to_pair(-1.0, 2.0).unwrap(), (7.0, 103.5));
        assert!(matches!(weight_to_pair(2.5, 2.0), Err(Error::Range { .. })));
    }

    #[test]
    fn zero_and_full_scale_blocks() {
        assert_eq!(expand_to_block(c(0.0, 0.0), 1.0).unwrap(), [[7.0; 4]; 4]);
        let b = expand_to_block(c(3.0, 0.0), 3.0).unwrap();
        for (i, row) in b.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                assert_eq!(g, if i == j { 200.0 } else { 7.0 });
            }
        }
    }

    #[test]
    fn block_differential_readout_is_complex_product() {
        let w_max = 1.5;
        let m = c(0.8, -1.2);
        let v = c(-0.3, 0.45);
        let b = expand_to_block(m, w_max).unwrap();
        assert!(is_complex_block(&b));
        let split = |x: f64| (x.max(0.0), (-x).max(0.0));
        let (vrp, vrm) = split(v.re);
        let (vip, vim) = split(v.im);
        let vin = [vrp, vrm, vip, vim];
        let i: Vec<f64> = b.iter().map(|row| row.iter().zip(&vin).map(|(g, x)| g * x).sum()).collect();
        let scale = G_SPAN / w_max;
        let p = m * v;
        assert!((i[0] - i[1] - scale * p.re).abs() < 1e-12);
        assert!((i[2] - i[3] - scale * p.im).abs() < 1e-12);
    }

    #[test]
    fn layout_bounds() {
        assert!(CrossbarLayout::new(15).is_ok());
        assert!(CrossbarLayout::new(16).is_err());
        assert!(CrossbarLayout::new(0).is_err());
        let l = CrossbarLayout::new(14).unwrap();
        assert_eq!(l.programmed_devices().len(), l.programmed_count());
        assert_eq!(l.role(0, 0), Some(BlockRole::B(0)));
        assert_eq!(l.role(4, 0), Some(BlockRole::A(0)));
        assert_eq!(l.role(4, 4), None);
        assert_eq!(l.role(59, 56), Some(BlockRole::C(13)));
        assert_eq!(l.role(0, 56), None);
        assert_eq!(l.role(60, 0), None);
    }

    #[test]
    fn zero_kernel_maps_to_g_off() {
        let z = c(0.0, 0.0);
        let dk = DiscreteKernel {
            a_bar: vec![z],
            b_bar: vec![z],
            c_bar: vec![z],
        };
        let p = map_kernel(&dk, &CrossbarLayout::new(1).unwrap()).unwrap();
        p.validate().unwrap();
        for (r, c) in p.layout.programmed_devices() {
            assert_eq!(p.get(r, c), G_OFF);
        }
        assert_eq!(p.w_max, 1.0);
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let z = c(0.1, 0.0);
        let dk = DiscreteKernel {
            a_bar: vec![z; 2],
            b_bar: vec![z; 2],
            c_bar: vec![z; 2],
        };
        assert!(matches!(
            map_kernel(&dk, &CrossbarLayout::new(3).unwrap()),
            Err(Error::Layout(_))
        ));
    }
}
