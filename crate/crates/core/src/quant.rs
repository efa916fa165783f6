//! Symmetric per-group integer quantization with FP8 scales, and the packed
//! payload layout.
//!
//! For a group `v` at bit-width `b` with `qmax = 2^(b-1) - 1`:
//!
//! ```text
//! S   = fp8(max|v| / qmax)             (S = 1 when max|v| = 0)
//! q_i = clamp(round_half_even(v_i / S), -qmax, qmax)
//! v̂_i = S * q_i
//! ```
//!
//! The FP8-rounded scale is used for quantization so the encoder and the
//! decoder always agree on `S`. Within the representable scale range every
//! element satisfies `|v_i - v̂_i| <= S / 2`.

use crate::error::{Error, Result};
use crate::fp8;
use crate::types::{check_finite, qmax, GroupAxis, KVPlane, Matrix, QuantConfig};

/// Codes and scale of one quantization group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedGroup {
    pub q: Vec<i8>,
    pub scale_fp8: u8,
}

impl QuantizedGroup {
    pub fn scale(&self) -> f64 {
        // a group built by `quantize_group` never carries the NaN pattern
        fp8::decode(self.scale_fp8).unwrap_or(f64::NAN)
    }
}

/// FP8 code of the scale for a group whose largest magnitude is `max_abs`.
///
/// The raw scale `max_abs / qmax` is rounded to the nearest FP8 value. When
/// that lands low enough that clamping `max_abs` to `qmax` would cost more
/// than half a step, the next code up is used instead. A zero group gets
/// scale 1, and a positive scale that would round to FP8 zero becomes the
/// smallest subnormal.
pub fn scale_code(max_abs: f64, bits: u8) -> Result<u8> {
    if !max_abs.is_finite() {
        return Err(Error::NonFiniteScale(max_abs));
    }
    if max_abs == 0.0 {
        return fp8::encode(1.0);
    }
    let qm = qmax(bits) as f64;
    let code = fp8::encode(max_abs / qm)?.max(1);
    if code < fp8::E4M3_MAX_CODE && max_abs > (qm + 0.5) * fp8::decode(code)? as f64 {
        return Ok(code + 1);
    }
    Ok(code)
}

#[inline]
fn quantize_value(v: f64, scale: f64, qmax: i32) -> i8 {
    let q = (v / scale).round_ties_even();
    q.clamp(-qmax as f64, qmax as f64) as i8
}

/// Quantizes one group into `out`, returning the FP8 scale code.
pub fn quantize_group_into(values: &[f64], bits: u8, out: &mut [i8]) -> Result<u8> {
    debug_assert_eq!(values.len(), out.len());
    check_finite(values)?;
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let code = scale_code(max_abs, bits)?;
    let scale = fp8::decode(code)?;
    let qm = qmax(bits);
    for (o, &v) in out.iter_mut().zip(values) {
        *o = quantize_value(v, scale, qm);
    }
    Ok(code)
}

pub fn quantize_group(values: &[f64], bits: u8) -> Result<QuantizedGroup> {
    check_bits(bits)?;
    let mut q = vec![0i8; values.len()];
    let scale_fp8 = quantize_group_into(values, bits, &mut q)?;
    Ok(QuantizedGroup { q, scale_fp8 })
}

pub fn dequantize_group(group: &QuantizedGroup) -> Vec<f64> {
    let s = group.scale();
    group.q.iter().map(|&q| s * q as f64).collect()
}

fn check_bits(bits: u8) -> Result<()> {
    if matches!(bits, 2 | 4 | 8) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("bits must be 2, 4 or 8, got {bits}")))
    }
}

/// Packs `bits`-wide two's-complement fields LSB-first within each byte.
///
/// Element `i` occupies bits `[b*i mod 8, b*i mod 8 + b)` of byte `b*i / 8`.
/// The most negative code (`-2^(b-1)`) is rejected along with anything
/// outside `±qmax`.
pub fn pack_payload(q: &[i8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let qm = qmax(bits);
    let b = bits as usize;
    let mask = ((1u16 << b) - 1) as u8;
    let mut out = vec![0u8; (q.len() * b).div_ceil(8)];
    for (i, &v) in q.iter().enumerate() {
        if (v as i32).abs() > qm {
            return Err(Error::RangeOverflow {
                value: v as i32,
                bits,
            });
        }
        let bit = b * i;
        out[bit / 8] |= ((v as u8) & mask) << (bit % 8);
    }
    Ok(out)
}

/// Inverse of [`pack_payload`], sign-extending each field.
pub fn unpack_payload(bytes: &[u8], count: usize, bits: u8) -> Result<Vec<i8>> {
    check_bits(bits)?;
    let b = bits as usize;
    let needed = (count * b).div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let mask = ((1u16 << b) - 1) as u8;
    let shift = 8 - b as u32;
    Ok((0..count)
        .map(|i| {
            let bit = b * i;
            let field = (bytes[bit / 8] >> (bit % 8)) & mask;
            ((field << shift) as i8) >> shift
        })
        .collect())
}

/// Integer codes and FP8 scales of a whole matrix, before packing.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub codes: Vec<i8>,
    pub scales: Vec<u8>,
}

/// Index of the scale governing element `(row, col)`.
#[inline]
fn group_index(row: usize, col: usize, cols: usize, group_size: usize, axis: GroupAxis) -> usize {
    match axis {
        GroupAxis::Channel => (row * cols + col) / group_size,
        GroupAxis::Token => (row / group_size) * cols + col,
    }
}

fn check_tiling(m: &Matrix, group_size: usize, axis: GroupAxis) -> Result<()> {
    let (extent, what) = match axis {
        GroupAxis::Channel => (m.cols(), "head_dim"),
        GroupAxis::Token => (m.rows(), "token count"),
    };
    if group_size == 0 || extent % group_size != 0 {
        return Err(Error::DimensionMismatch(format!(
            "group size {group_size} does not divide {what} {extent}"
        )));
    }
    Ok(())
}

/// Quantizes every group of `m` along `axis`.
///
/// Codes are always row-major. Channel-axis scales are ordered by token,
/// then channel group; token-axis scales by token group, then channel.
pub fn quantize_matrix(
    m: &Matrix,
    bits: u8,
    group_size: usize,
    axis: GroupAxis,
) -> Result<QuantizedMatrix> {
    check_bits(bits)?;
    check_tiling(m, group_size, axis)?;
    check_finite(m.as_slice())?;
    let mut codes = vec![0i8; m.rows() * m.cols()];
    let n_groups = codes.len() / group_size;
    let mut scales = Vec::with_capacity(n_groups);
    match axis {
        GroupAxis::Channel => {
            for (vals, out) in m
                .as_slice()
                .chunks_exact(group_size)
                .zip(codes.chunks_exact_mut(group_size))
            {
                scales.push(quantize_group_into(vals, bits, out)?);
            }
        }
        GroupAxis::Token => {
            let cols = m.cols();
            let mut vals = vec![0f64; group_size];
            let mut out = vec![0i8; group_size];
            for g in 0..m.rows() / group_size {
                for c in 0..cols {
                    for (t, v) in vals.iter_mut().enumerate() {
                        *v = m.row(g * group_size + t)[c];
                    }
                    scales.push(quantize_group_into(&vals, bits, &mut out)?);
                    for (t, &q) in out.iter().enumerate() {
                        codes[(g * group_size + t) * cols + c] = q;
                    }
                }
            }
        }
    }
    Ok(QuantizedMatrix { codes, scales })
}

/// Reconstructs `S * q` for every element.
pub fn dequantize_codes(
    codes: &[i8],
    scales: &[u8],
    rows: usize,
    cols: usize,
    group_size: usize,
    axis: GroupAxis,
) -> Result<Matrix> {
    if codes.len() != rows * cols || group_size == 0 || scales.len() * group_size != codes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} codes and {} scales do not describe a {rows}x{cols} plane with groups of {group_size}",
            codes.len(),
            scales.len()
        )));
    }
    let decoded = scales
        .iter()
        .map(|&s| fp8::decode(s))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Matrix::zeros(rows, cols);
    let dst = out.as_mut_slice();
    match axis {
        GroupAxis::Channel => {
            for ((d, q), s) in dst
                .chunks_exact_mut(group_size)
                .zip(codes.chunks_exact(group_size))
                .zip(&decoded)
            {
                for (x, &c) in d.iter_mut().zip(q) {
                    *x = s * c as f64;
                }
            }
        }
        GroupAxis::Token => {
            for r in 0..rows {
                for c in 0..cols {
                    let idx = r * cols + c;
                    dst[idx] = decoded[group_index(r, c, cols, group_size, axis)] * codes[idx] as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Channel-axis quantization of a plane: `(packed payload, FP8 scales)`.
pub fn quantize_plane(plane: &KVPlane, config: &QuantConfig) -> Result<(Vec<u8>, Vec<u8>)> {
    crate::types::validate_plane(plane, config)?;
    let qm = quantize_matrix(&plane.data, config.bits, config.group_size, GroupAxis::Channel)?;
    Ok((pack_payload(&qm.codes, config.bits)?, qm.scales))
}

/// Unpacks and dequantizes a packed payload.
pub fn dequantize_payload(
    payload: &[u8],
    scales: &[u8],
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    axis: GroupAxis,
) -> Result<Matrix> {
    let codes = unpack_payload(payload, rows * cols, bits)?;
    dequantize_codes(&codes, scales, rows, cols, group_size, axis)
}

/// Scale actually applied to element `(row, col)`, decoded from `scales`.
pub fn element_scale(
    scales: &[u8],
    row: usize,
    col: usize,
    cols: usize,
    group_size: usize,
    axis: GroupAxis,
) -> Result<f64> {
    fp8::decode(scales[group_index(row, col, cols, group_size, axis)])
}
