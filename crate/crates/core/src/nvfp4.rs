//! NVFP4: E2M1 element codes with per-block E4M3 scales and an FP32 global scale.
//!
//! A weight `w` in block `g` is represented as
//! `sign(w) · node · s_g · s_global` with `node` one of the eight non-negative
//! E2M1 magnitudes. All arithmetic here is `f64`; only the stored scales are
//! constrained to their storage formats.

use serde::{Deserialize, Serialize};

use crate::e4m3::{self, E4M3_MAX, E4M3_MIN_POSITIVE};
use crate::error::{FaarError, Result};
use crate::tensor::Tensor;

/// Non-negative E2M1 magnitudes. A node's index is also its 3-bit code.
pub const NODES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
pub const MAX_NODE: f64 = 6.0;
pub const DEFAULT_BLOCK_SIZE: usize = 16;

/// One 4-bit E2M1 pattern laid out `[sign | e1 | e0 | m]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Nvfp4Code(u8);

impl Nvfp4Code {
    pub const POS_ZERO: Nvfp4Code = Nvfp4Code(0);

    /// Keeps the low nibble of `bits`.
    pub fn from_bits(bits: u8) -> Self {
        Nvfp4Code(bits & 0x0f)
    }

    /// Canonical code for `±NODES[index]`; zero is always emitted as `+0`.
    pub fn from_node(index: usize, negative: bool) -> Self {
        debug_assert!(index < NODES.len());
        let sign = if negative && index != 0 { 0x08 } else { 0 };
        Nvfp4Code(sign | index as u8)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn node_index(self) -> usize {
        (self.0 & 0x07) as usize
    }

    pub fn is_negative(self) -> bool {
        self.0 & 0x08 != 0
    }

    pub fn magnitude(self) -> f64 {
        NODES[self.node_index()]
    }

    pub fn decode(self) -> f64 {
        e2m1_decode(self)
    }

    /// Same magnitude, opposite sign bit.
    pub fn negated(self) -> Self {
        Nvfp4Code(self.0 ^ 0x08)
    }
}

/// `(−1)^s · (e == 0 ? m·0.5 : 2^(e−1)·(1 + m·0.5))`
pub fn e2m1_decode(code: Nvfp4Code) -> f64 {
    let bits = code.bits();
    let sign = if bits & 0x08 != 0 { -1.0 } else { 1.0 };
    let e = ((bits >> 1) & 0x03) as i32;
    let m = (bits & 0x01) as f64;
    let mag = if e == 0 {
        m * 0.5
    } else {
        (2.0f64).powi(e - 1) * (1.0 + m * 0.5)
    };
    sign * mag
}

/// Index of the largest node `≤ mag`; 7 for `mag ≥ 6`.
pub(crate) fn lower_node_index(mag: f64) -> usize {
    debug_assert!(mag >= 0.0);
    NODES.iter().rposition(|&n| n <= mag).unwrap_or(0)
}

/// Bracketing nodes of a normalized magnitude.
///
/// A value exactly on node `n < 6` returns `(n, next)`; anything `≥ 6`
/// returns `(6, 6)`.
pub fn find_interval(mag: f64) -> Result<(f64, f64)> {
    if mag.is_nan() || mag < 0.0 {
        return Err(FaarError::NegativeMagnitude(mag));
    }
    let lo = lower_node_index(mag);
    let hi = (lo + 1).min(NODES.len() - 1);
    Ok((NODES[lo], NODES[hi]))
}

/// Round-to-nearest node index for a clamped normalized magnitude.
/// Ties go to the node whose mantissa bit is 0 (even index).
pub(crate) fn rtn_node_index(mag: f64) -> usize {
    let lo = lower_node_index(mag);
    if lo == NODES.len() - 1 {
        return lo;
    }
    // mag - lower is exact (Sterbenz, or lower == 0) and spans are powers of two.
    let twice_offset = 2.0 * (mag - NODES[lo]);
    let span = NODES[lo + 1] - NODES[lo];
    if twice_offset < span {
        lo
    } else if twice_offset > span {
        lo + 1
    } else if lo % 2 == 0 {
        lo
    } else {
        lo + 1
    }
}

/// Normalized magnitude `|w| / scale_prod`, clamped to `[0, 6]`.
#[inline]
pub fn normalized_magnitude(w: f64, scale_prod: f64) -> f64 {
    (w.abs() / scale_prod).min(MAX_NODE)
}

/// Node index `n` with `NODES[n] · scale_prod == |value|` bit-for-bit, if any.
pub fn exact_node_index(value: f64, scale_prod: f64) -> Option<usize> {
    let mag = value.abs();
    NODES.iter().position(|&n| n * scale_prod == mag)
}

/// Global and per-block scales of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub s_global: f64,
    pub s_block: Vec<f64>,
    pub block_size: usize,
}

impl ScaleSet {
    pub fn num_blocks(&self) -> usize {
        self.s_block.len()
    }

    #[inline]
    pub fn block_of(&self, index: usize) -> usize {
        index / self.block_size
    }

    /// `s_g · s_global` for the block containing element `index`.
    #[inline]
    pub fn scale_prod(&self, index: usize) -> f64 {
        self.s_block[index / self.block_size] * self.s_global
    }

    /// Checks storage representability and that the set covers `len` elements.
    pub fn validate_for(&self, len: usize) -> Result<()> {
        if self.block_size == 0 {
            return Err(FaarError::InvalidArgument("block_size must be ≥ 1".into()));
        }
        let expected = len.div_ceil(self.block_size);
        if self.s_block.len() != expected {
            return Err(FaarError::ShapeMismatch(format!(
                "{len} elements in blocks of {} need {expected} block scales, got {}",
                self.block_size,
                self.s_block.len()
            )));
        }
        if !(self.s_global.is_finite() && self.s_global > 0.0)
            || (self.s_global as f32) as f64 != self.s_global
        {
            return Err(FaarError::InvalidArgument(format!(
                "global scale {} is not a positive FP32 value",
                self.s_global
            )));
        }
        if let Some(bad) = self
            .s_block
            .iter()
            .find(|&&s| !(s > 0.0) || e4m3::e4m3_to_bits(s).is_none())
        {
            return Err(FaarError::InvalidArgument(format!(
                "block scale {bad} is not a positive E4M3 value"
            )));
        }
        Ok(())
    }
}

/// `amax / (6 · 448)` rounded to FP32; 1 for an all-zero tensor.
pub fn global_scale(amax: f64) -> Result<f64> {
    if !amax.is_finite() || amax < 0.0 {
        return Err(FaarError::InvalidArgument(format!(
            "tensor amax {amax} is not finite"
        )));
    }
    if amax == 0.0 {
        return Ok(1.0);
    }
    let s = ((amax / (MAX_NODE * E4M3_MAX)) as f32) as f64;
    if !(s.is_finite() && s > 0.0) {
        return Err(FaarError::InvalidArgument(format!(
            "tensor amax {amax} gives a global scale outside FP32 range"
        )));
    }
    Ok(s)
}

/// `e4m3_round(amax_block / (6 · s_global))`, floored to the smallest
/// positive E4M3 value.
pub fn block_scale(amax_block: f64, s_global: f64) -> f64 {
    let raw = amax_block / (MAX_NODE * s_global);
    if raw > 0.0 {
        e4m3::round_positive(raw).max(E4M3_MIN_POSITIVE)
    } else {
        E4M3_MIN_POSITIVE
    }
}

fn amax(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Scales for a flattened tensor split row-major into blocks of `block_size`
/// (the last block may be short).
pub fn compute_scales(w: &Tensor, block_size: usize) -> Result<ScaleSet> {
    compute_scales_flat(w.data(), block_size)
}

pub(crate) fn compute_scales_flat(values: &[f64], block_size: usize) -> Result<ScaleSet> {
    if values.is_empty() {
        return Err(FaarError::EmptyTensor("cannot compute scales"));
    }
    if block_size == 0 {
        return Err(FaarError::InvalidArgument("block_size must be ≥ 1".into()));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(FaarError::InvalidArgument(
            "tensor has non-finite entries".into(),
        ));
    }
    let s_global = global_scale(amax(values))?;
    let s_block = values
        .chunks(block_size)
        .map(|block| block_scale(amax(block), s_global))
        .collect();
    Ok(ScaleSet {
        s_global,
        s_block,
        block_size,
    })
}

/// Shape, one code per element (row-major) and the scales that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<Nvfp4Code>,
    scales: ScaleSet,
}

impl QuantizedTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<Nvfp4Code>, scales: ScaleSet) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || count == 0 {
            return Err(FaarError::EmptyTensor("quantized tensor"));
        }
        if count != codes.len() {
            return Err(FaarError::ShapeMismatch(format!(
                "shape {shape:?} holds {count} elements but {} codes were given",
                codes.len()
            )));
        }
        scales.validate_for(count)?;
        Ok(QuantizedTensor {
            shape,
            codes,
            scales,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[Nvfp4Code] {
        &self.codes
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Re-encodes a dequantized tensor with these scales, requiring every
    /// element to be exactly `±node · scale_prod`.
    pub fn encode_exact(values: &Tensor, scales: &ScaleSet) -> Result<Self> {
        scales.validate_for(values.len())?;
        let codes = values
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                exact_node_index(x, scales.scale_prod(i))
                    .map(|n| Nvfp4Code::from_node(n, x < 0.0))
                    .ok_or_else(|| {
                        FaarError::InvalidArgument(format!(
                            "element {i} = {x} is not on the NVFP4 grid of its block"
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        QuantizedTensor::new(values.shape().to_vec(), codes, scales.clone())
    }
}

/// Round-to-nearest quantization of `w` with precomputed scales.
pub fn quantize_rtn(w: &Tensor, scales: &ScaleSet) -> Result<QuantizedTensor> {
    scales.validate_for(w.len())?;
    let codes = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mag = normalized_magnitude(x, scales.scale_prod(i));
            Nvfp4Code::from_node(rtn_node_index(mag), x < 0.0)
        })
        .collect();
    QuantizedTensor::new(w.shape().to_vec(), codes, scales.clone())
}

/// `decode(code) · (s_g · s_global)` elementwise.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, c)| c.decode() * q.scales.scale_prod(i))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensor shape is validated")
}

/// Violation counts for an exported tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExportCheck {
    /// Dequantized values that are not `±node · scale_prod` of their block.
    pub node_violations: usize,
    /// Elements whose RTN re-encode with the same scales gives another code.
    pub reencode_violations: usize,
}

impl ExportCheck {
    pub fn is_clean(&self) -> bool {
        self.node_violations == 0 && self.reencode_violations == 0
    }
}

/// Checks that every dequantized value sits on its block's grid and that the
/// codec reproduces the stored codes from those values.
pub fn check_export(q: &QuantizedTensor) -> Result<ExportCheck> {
    let values = dequantize(q);
    let again = quantize_rtn(&values, &q.scales)?;
    let mut check = ExportCheck::default();
    for (i, (&x, c)) in values.data().iter().zip(&q.codes).enumerate() {
        if exact_node_index(x, q.scales.scale_prod(i)) != Some(c.node_index()) {
            check.node_violations += 1;
        }
        let d = again.codes[i];
        let same = d == *c || (d.node_index() == 0 && c.node_index() == 0);
        if !same {
            check.reencode_violations += 1;
        }
    }
    Ok(check)
}

/// Scales plus RTN in one call.
pub fn quantize_rtn_auto(w: &Tensor, block_size: usize) -> Result<QuantizedTensor> {
    let scales = compute_scales(w, block_size)?;
    quantize_rtn(w, &scales)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn export_check_flags_noncanonical_codes() {
        let w = Tensor::new(vec![4], vec![6.0, 1.2, -0.3, 2.6]).unwrap();
        let q = quantize_rtn_auto(&w, 16).unwrap();
        assert!(check_export(&q).unwrap().is_clean());
        // A non-canonical negative zero still decodes onto the grid.
        let mut codes = q.codes().to_vec();
        codes[2] = Nvfp4Code::from_bits(0b1000);
        let q2 = QuantizedTensor::new(q.shape().to_vec(), codes, q.scales().clone()).unwrap();
        assert!(check_export(&q2).unwrap().is_clean());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(e2m1_decode(Nvfp4Code::from_bits(0b0000)), 0.0);
        assert_eq!(e2m1_decode(Nvfp4Code::from_bits(0b0111)), 6.0);
        assert_eq!(e2m1_decode(Nvfp4Code::from_bits(0b1010)), -1.0);
        assert_eq!(e2m1_decode(Nvfp4Code::from_bits(0b1000)), 0.0);
        for i in 0..8 {
            assert_eq!(Nvfp4Code::from_node(i, false).decode(), NODES[i]);
            assert_eq!(Nvfp4Code::from_node(i, true).decode(), -NODES[i]);
        }
        assert_eq!(Nvfp4Code::from_node(0, true), Nvfp4Code::POS_ZERO);
    }

    #[test]
    fn interval_examples() {
        assert_eq!(find_interval(1.2).unwrap(), (1.0, 1.5));
        assert_eq!(find_interval(0.0).unwrap(), (0.0, 0.5));
        assert_eq!(find_interval(6.0).unwrap(), (6.0, 6.0));
        assert_eq!(find_interval(7.5).unwrap(), (6.0, 6.0));
        assert_eq!(find_interval(3.0).unwrap(), (3.0, 4.0));
        assert!(matches!(
            find_interval(-0.1),
            Err(FaarError::NegativeMagnitude(_))
        ));
    }

    #[test]
    fn rtn_examples() {
        assert_eq!(NODES[rtn_node_index(1.2)], 1.0);
        // 2.5 is equidistant from 2.0 and 3.0; 2.0 has m = 0.
        assert_eq!((2.5 - 2.0), (3.0 - 2.5));
        assert_eq!(NODES[rtn_node_index(2.5)], 2.0);
        // 3.5: 3.0 has m = 1, 4.0 has m = 0.
        assert_eq!(NODES[rtn_node_index(3.5)], 4.0);
        assert_eq!(NODES[rtn_node_index(0.25)], 0.0);
        assert_eq!(NODES[rtn_node_index(5.0)], 4.0);
        assert_eq!(NODES[rtn_node_index(normalized_magnitude(7.0, 1.0))], 6.0);
    }

    #[test]
    fn scales_single_block() {
        let w = Tensor::new(vec![3], vec![6.0, -3.0, 1.5]).unwrap();
        let s = compute_scales(&w, 16).unwrap();
        assert_eq!(s.s_global, ((6.0f64 / 2688.0) as f32) as f64);
        assert!((s.s_global - 1.0 / 448.0).abs() < 1e-7 / 448.0);
        assert_eq!(s.s_block, vec![448.0]);
        let normalized_max = 6.0 / s.scale_prod(0);
        assert!((normalized_max - 6.0).abs() < 1e-6);
    }

    #[test]
    fn scales_zero_tensor() {
        let w = Tensor::zeros(vec![40]).unwrap();
        let s = compute_scales(&w, 16).unwrap();
        assert_eq!(s.s_global, 1.0);
        assert_eq!(s.s_block, vec![E4M3_MIN_POSITIVE; 3]);
        let q = quantize_rtn(&w, &s).unwrap();
        assert!(dequantize(&q).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scales_two_blocks() {
        let mut data = vec![0.1; 32];
        data[3] = 6.0;
        data[20] = -3.0;
        let w = Tensor::new(vec![2, 16], data).unwrap();
        let s = compute_scales(&w, 16).unwrap();
        assert_eq!(s.s_block[0], 448.0);
        assert_eq!(s.s_block[1], e4m3::e4m3_round(s.s_block[0] / 2.0).unwrap());
        s.validate_for(32).unwrap();
    }

    #[test]
    fn dequantize_direct_product() {
        let scales = ScaleSet {
            s_global: 0.25,
            s_block: vec![2.0],
            block_size: 16,
        };
        let q =
            QuantizedTensor::new(vec![1], vec![Nvfp4Code::from_node(3, false)], scales).unwrap();
        assert_eq!(dequantize(&q).data(), &[0.75]);
    }

    #[test]
    fn scale_mismatch_rejected() {
        let w = Tensor::new(vec![20], vec![1.0; 20]).unwrap();
        let s = compute_scales(&Tensor::new(vec![10], vec![1.0; 10]).unwrap(), 16).unwrap();
        assert!(quantize_rtn(&w, &s).is_err());
        assert!(compute_scales(&w, 0).is_err());
    }

    #[test]
    fn partial_last_block() {
        let w = Tensor::new(vec![5, 7], (0..35).map(|i| i as f64 - 17.0).collect()).unwrap();
        let q = quantize_rtn_auto(&w, 16).unwrap();
        assert_eq!(q.scales().num_blocks(), 3);
    }

    #[test]
    fn encode_exact_roundtrip() {
        let w = Tensor::new(vec![2, 4], vec![0.3, -1.7, 2.2, 0.0, -0.01, 5.5, -6.0, 1.0]).unwrap();
        let q = quantize_rtn_auto(&w, 4).unwrap();
        let d = dequantize(&q);
        let back = QuantizedTensor::encode_exact(&d, q.scales()).unwrap();
        assert_eq!(back, q);
    }
}
