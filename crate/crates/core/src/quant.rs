//! Learned-step-size fake quantization of the codebook.
//!
//! Each codebook row `j` has its own step `step[j]`. The integer grid is
//! `round(clip(E / step, q_min, q_max))` with round-half-away-from-zero, and
//! the dequantized table is `grid * step`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{LeReader, LeWriter, MAX_LEN};
use crate::error::{argument, Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitWidth {
    Four,
    Eight,
    Sixteen,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Four => 4,
            BitWidth::Eight => 8,
            BitWidth::Sixteen => 16,
        }
    }

    pub fn q_min(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub fn q_max(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            4 => Ok(BitWidth::Four),
            8 => Ok(BitWidth::Eight),
            16 => Ok(BitWidth::Sixteen),
            other => Err(argument(format!("unsupported bit length {other}; use 4, 8 or 16"))),
        }
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.bits() as u8
    }
}

/// Integer grid plus per-row step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCodebook {
    c: usize,
    d: usize,
    bits: BitWidth,
    grid: Vec<i32>,
    step: Vec<f64>,
}

const QCBK_MAGIC: &[u8; 8] = b"LERGQCBK";
const QCBK_VERSION: u32 = 1;

fn check_steps(step: &[f64]) -> Result<()> {
    match step.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        Some(j) => Err(argument(format!("step size {j} is {} (must be positive)", step[j]))),
        None => Ok(()),
    }
}

impl QuantizedCodebook {
    pub fn new(c: usize, d: usize, bits: BitWidth, grid: Vec<i32>, step: Vec<f64>) -> Result<Self> {
        if grid.len() != c * d {
            return Err(Error::DimensionMismatch {
                context: "quantized grid",
                expected: c * d,
                actual: grid.len(),
            });
        }
        if step.len() != c {
            return Err(Error::DimensionMismatch {
                context: "step vector",
                expected: c,
                actual: step.len(),
            });
        }
        check_steps(&step)?;
        let (lo, hi) = (bits.q_min(), bits.q_max());
        if let Some(pos) = grid.iter().position(|&g| g < lo || g > hi) {
            return Err(argument(format!("grid entry {pos} outside [{lo}, {hi}]")));
        }
        Ok(Self { c, d, bits, grid, step })
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn grid(&self) -> &[i32] {
        &self.grid
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    /// Layout: magic, version u32, c u64, d u64, b u8, step as c f32, then
    /// the grid row-major as i16 (b = 16), i8 (b = 8) or two's-complement
    /// nibbles packed low-then-high (b = 4, final high nibble zero-padded).
    ///
    /// Steps are narrowed to f32; use [`Self::with_f32_steps`] first when an
    /// exact round trip matters.
    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = LeWriter::new(w);
        w.bytes(QCBK_MAGIC)?;
        w.u32(QCBK_VERSION)?;
        w.u64(self.c as u64)?;
        w.u64(self.d as u64)?;
        w.u8(self.bits.into())?;
        for &s in &self.step {
            w.f32(s as f32)?;
        }
        match self.bits {
            BitWidth::Sixteen => {
                for &g in &self.grid {
                    w.bytes(&(g as i16).to_le_bytes())?;
                }
            }
            BitWidth::Eight => {
                for &g in &self.grid {
                    w.bytes(&[(g as i8) as u8])?;
                }
            }
            BitWidth::Four => {
                for pair in self.grid.chunks(2) {
                    let lo = (pair[0] as u8) & 0x0f;
                    let hi = pair.get(1).map_or(0, |&g| (g as u8) & 0x0f);
                    w.u8(lo | (hi << 4))?;
                }
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = LeReader::new(r, "quantized codebook");
        r.magic(QCBK_MAGIC)?;
        r.version(QCBK_VERSION)?;
        let c = r.len("c", MAX_LEN)?;
        let d = r.len("d", MAX_LEN)?;
        if c.checked_mul(d).is_none_or(|cd| cd as u64 > MAX_LEN) {
            return Err(r.format_error("c * d too large"));
        }
        let bits = BitWidth::try_from(r.u8()?).map_err(|e| r.format_error(e.to_string()))?;
        let step = (0..c).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let grid = match bits {
            BitWidth::Sixteen => {
                let mut buf = vec![0u8; 2 * c * d];
                r.fill(&mut buf)?;
                buf.chunks(2).map(|b| i16::from_le_bytes([b[0], b[1]]) as i32).collect()
            }
            BitWidth::Eight => {
                let mut buf = vec![0u8; c * d];
                r.fill(&mut buf)?;
                buf.iter().map(|&b| b as i8 as i32).collect()
            }
            BitWidth::Four => {
                let mut buf = vec![0u8; (c * d).div_ceil(2)];
                r.fill(&mut buf)?;
                let nibble = |n: u8| (((n << 4) as i8) >> 4) as i32;
                let mut grid: Vec<i32> = buf.iter().flat_map(|&b| [nibble(b & 0x0f), nibble(b >> 4)]).collect();
                grid.truncate(c * d);
                grid
            }
        };
        r.expect_eof()?;
        Self::new(c, d, bits, grid, step).map_err(|e| r.format_error(e.to_string()))
    }

    /// Rounds the steps to f32 precision and regrids the dequantized values,
    /// so that a serialized copy reads back identical.
    pub fn with_f32_steps(&self) -> Result<Self> {
        let step: Vec<f64> = self.step.iter().map(|&s| s as f32 as f64).collect();
        quantize(&dequantize(self), &step, self.bits)
    }
}

/// `round(clip(E / step, q_min, q_max))` per entry, with row-wise steps.
pub fn quantize(e: &Matrix, step: &[f64], bits: BitWidth) -> Result<QuantizedCodebook> {
    if step.len() != e.rows() {
        return Err(Error::DimensionMismatch {
            context: "step vector vs codebook rows",
            expected: e.rows(),
            actual: step.len(),
        });
    }
    check_steps(step)?;
    let (lo, hi) = (bits.q_min() as f64, bits.q_max() as f64);
    let mut grid = Vec::with_capacity(e.rows() * e.cols());
    for (j, &s) in step.iter().enumerate() {
        grid.extend(e.row(j).iter().map(|&x| (x / s).clamp(lo, hi).round() as i32));
    }
    Ok(QuantizedCodebook {
        c: e.rows(),
        d: e.cols(),
        bits,
        grid,
        step: step.to_vec(),
    })
}

/// `grid * step`, row-wise.
pub fn dequantize(q: &QuantizedCodebook) -> Matrix {
    let mut out = Matrix::zeros(q.c, q.d);
    for j in 0..q.c {
        let s = q.step[j];
        let src = &q.grid[j * q.d..(j + 1) * q.d];
        for (o, &g) in out.row_mut(j).iter_mut().zip(src) {
            *o = g as f64 * s;
        }
    }
    out
}

/// Forward pass of quantization-aware training: `dequantize(quantize(E))`.
pub fn fake_quantize(e: &Matrix, step: &[f64], bits: BitWidth) -> Result<Matrix> {
    Ok(dequantize(&quantize(e, step, bits)?))
}

/// Straight-through backward pass of [`fake_quantize`].
///
/// With `z = E / step`: the codebook gradient passes `grad_out` through
/// wherever `q_min <= z <= q_max` and is zero outside; the step gradient
/// sums `grad_out * g` over each row, where `g = round(z) - z` in range and
/// the violated clip bound outside.
pub fn qat_backward(grad_out: &Matrix, e: &Matrix, step: &[f64], bits: BitWidth) -> Result<(Matrix, Vec<f64>)> {
    if grad_out.rows() != e.rows() || grad_out.cols() != e.cols() {
        return Err(Error::DimensionMismatch {
            context: "quantization gradient",
            expected: e.rows() * e.cols(),
            actual: grad_out.rows() * grad_out.cols(),
        });
    }
    if step.len() != e.rows() {
        return Err(Error::DimensionMismatch {
            context: "step vector vs codebook rows",
            expected: e.rows(),
            actual: step.len(),
        });
    }
    let (lo, hi) = (bits.q_min() as f64, bits.q_max() as f64);
    let mut grad_e = Matrix::zeros(e.rows(), e.cols());
    let mut grad_step = vec![0.0; e.rows()];
    for j in 0..e.rows() {
        let s = step[j];
        let mut acc = 0.0;
        let ge = grad_e.row_mut(j);
        for (k, (&x, &g)) in e.row(j).iter().zip(grad_out.row(j)).enumerate() {
            let z = x / s;
            let local = if z < lo {
                lo
            } else if z > hi {
                hi
            } else {
                ge[k] = g;
                z.round() - z
            };
            acc += g * local;
        }
        grad_step[j] = acc;
    }
    Ok((grad_e, grad_step))
}

/// Step-gradient scale `1 / sqrt(c * d * q_max)` from the LSQ recipe; off by
/// default in training.
pub fn lsq_grad_scale(c: usize, d: usize, bits: BitWidth) -> f64 {
    1.0 / ((c * d) as f64 * bits.q_max() as f64).sqrt()
}

/// Step initialization `2 * mean(|E[j, :]|) / sqrt(q_max)` per row.
pub fn init_step_sizes(e: &Matrix, bits: BitWidth) -> Vec<f64> {
    let root = (bits.q_max() as f64).sqrt();
    (0..e.rows())
        .map(|j| {
            let row = e.row(j);
            let mean = row.iter().map(|x| x.abs()).sum::<f64>() / row.len().max(1) as f64;
            (2.0 * mean / root).max(MIN_STEP)
        })
        .collect()
}

/// Floor applied to step sizes so they stay strictly positive.
pub const MIN_STEP: f64 = 1e-12;

/// Byte counts of the deployable embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub codebook: u64,
    pub assignment: u64,
    pub placeholder: u64,
    pub total: u64,
}

impl StorageReport {
    pub fn total_mib(&self) -> f64 {
        self.total as f64 / (1024.0 * 1024.0)
    }
}

/// Storage of `c` quantized meta-embeddings of width `d` at `bits` each plus
/// one f32 step per row, two u32 assignment indices per entity, and `r`
/// f32 placeholder centroids with one u32 placeholder index per pruned entity.
/// `bits = 32` gives the full-precision figure.
pub fn storage_bytes(c: u64, d: u64, bits: u32, r: u64, n: u64, m: u64) -> Result<StorageReport> {
    if m > n {
        return Err(argument(format!("retained count {m} exceeds entity count {n}")));
    }
    let codebook = (c * (bits as u64 * d + 32)).div_ceil(8);
    let assignment = 8 * n;
    let placeholder = 4 * r * d + 4 * (n - m);
    Ok(StorageReport {
        codebook,
        assignment,
        placeholder,
        total: codebook + assignment + placeholder,
    })
}
