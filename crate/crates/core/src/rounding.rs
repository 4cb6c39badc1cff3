//! Learnable rounding variables over the NVFP4 grid.
//!
//! Every weight keeps the pair of nodes bracketing its normalized magnitude and
//! a continuous `v ∈ [0, 1]`. The soft quantized weight is
//! `sign · (lower + h_β(v) · span) · s_g · s_global` with
//! `h_β(v) = σ(β(v − 0.5))`. Because `span` varies across the grid, the
//! derivative with respect to `v` is proportional to the local interval width.

use serde::{Deserialize, Serialize};

use crate::error::{FaarError, Result};
use crate::nvfp4::{
    lower_node_index, normalized_magnitude, Nvfp4Code, QuantizedTensor, ScaleSet, NODES,
};
use crate::tensor::Tensor;

/// Linear annealing of the sigmoid temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub total_steps: usize,
}

impl BetaSchedule {
    pub const DEFAULT_START: f64 = 4.0;
    pub const DEFAULT_END: f64 = 40.0;

    pub fn new(beta_start: f64, beta_end: f64, total_steps: usize) -> Result<Self> {
        let s = BetaSchedule {
            beta_start,
            beta_end,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_start > 0.0 && self.beta_end >= self.beta_start && self.beta_end.is_finite())
        {
            return Err(FaarError::InvalidArgument(format!(
                "beta schedule needs beta_end ≥ beta_start > 0, got {} → {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.total_steps == 0 {
            return Err(FaarError::InvalidArgument(
                "beta schedule needs at least one step".into(),
            ));
        }
        Ok(())
    }

    pub fn beta_at(&self, step: usize) -> Result<f64> {
        beta_at(self, step)
    }
}

/// `beta_start + (beta_end − beta_start) · step / total_steps`.
pub fn beta_at(schedule: &BetaSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(FaarError::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    let t = step as f64 / schedule.total_steps as f64;
    Ok(schedule.beta_start + (schedule.beta_end - schedule.beta_start) * t)
}

/// `h_β(v) = 1 / (1 + exp(−β (v − 0.5)))`.
#[inline]
pub fn soft_round(v: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (-beta * (v - 0.5)).exp())
}

/// `dh_β/dv = β · h · (1 − h)`.
#[inline]
pub fn soft_round_slope(v: f64, beta: f64) -> f64 {
    let h = soft_round(v, beta);
    beta * h * (1.0 - h)
}

/// Rounding state for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingVars {
    shape: Vec<usize>,
    v: Vec<f64>,
    lower_idx: Vec<u8>,
    sign: Vec<f64>,
    scale_prod: Vec<f64>,
    frozen: Vec<bool>,
    scales: ScaleSet,
}

/// Builds rounding variables at the relative position of each weight inside
/// its interval. Magnitudes clamped at 6 have no interval and are frozen at
/// `v = 0`.
pub fn init_rounding_vars(w: &Tensor, scales: &ScaleSet) -> Result<RoundingVars> {
    scales.validate_for(w.len())?;
    let n = w.len();
    let mut rv = RoundingVars {
        shape: w.shape().to_vec(),
        v: Vec::with_capacity(n),
        lower_idx: Vec::with_capacity(n),
        sign: Vec::with_capacity(n),
        scale_prod: Vec::with_capacity(n),
        frozen: Vec::with_capacity(n),
        scales: scales.clone(),
    };
    for (i, &x) in w.data().iter().enumerate() {
        let sp = scales.scale_prod(i);
        let mag = normalized_magnitude(x, sp);
        let lo = lower_node_index(mag);
        let frozen = lo == NODES.len() - 1;
        let v = if frozen {
            0.0
        } else {
            (mag - NODES[lo]) / (NODES[lo + 1] - NODES[lo])
        };
        rv.v.push(v);
        rv.lower_idx.push(lo as u8);
        rv.sign.push(if x < 0.0 { -1.0 } else { 1.0 });
        rv.scale_prod.push(sp);
        rv.frozen.push(frozen);
    }
    Ok(rv)
}

impl RoundingVars {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Mutable access for optimizers. Call [`RoundingVars::clip`] after writing.
    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.v
    }

    /// Replaces `v` (e.g. from a checkpoint), clipping into `[0, 1]`.
    pub fn set_v(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.v.len() {
            return Err(FaarError::ShapeMismatch(format!(
                "{} rounding variables given for {} weights",
                v.len(),
                self.v.len()
            )));
        }
        self.v.copy_from_slice(v);
        self.clip();
        Ok(())
    }

    pub fn scales(&self) -> &ScaleSet {
        &self.scales
    }

    #[inline]
    pub fn lower(&self, i: usize) -> f64 {
        NODES[self.lower_idx[i] as usize]
    }

    #[inline]
    pub fn upper(&self, i: usize) -> f64 {
        NODES[(self.lower_idx[i] as usize + 1).min(NODES.len() - 1)]
    }

    #[inline]
    pub fn span(&self, i: usize) -> f64 {
        self.upper(i) - self.lower(i)
    }

    pub fn sign(&self, i: usize) -> f64 {
        self.sign[i]
    }

    pub fn scale_prod(&self, i: usize) -> f64 {
        self.scale_prod[i]
    }

    #[inline]
    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    /// Number of weights with a non-degenerate interval.
    pub fn num_free(&self) -> usize {
        self.frozen.iter().filter(|f| !**f).count()
    }

    /// Indices of the non-frozen weights, ascending.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.frozen[i]).collect()
    }

    /// Clamps every `v` into `[0, 1]`.
    pub fn clip(&mut self) {
        for v in &mut self.v {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Weight obtained from binary decisions (`true` = upper node).
    #[inline]
    pub fn weight_for(&self, i: usize, upper: bool) -> f64 {
        if upper && !self.frozen[i] {
            self.sign[i] * self.upper(i) * self.scale_prod[i]
        } else {
            self.sign[i] * self.lower(i) * self.scale_prod[i]
        }
    }

    /// Dequantized weights for a full decision vector.
    pub fn weights_from_decisions(&self, decisions: &[bool]) -> Vec<f64> {
        debug_assert_eq!(decisions.len(), self.len());
        decisions
            .iter()
            .enumerate()
            .map(|(i, &d)| self.weight_for(i, d))
            .collect()
    }

    /// Soft weights and their derivative with respect to `v`.
    pub fn soft_weights_with_slope(&self, beta: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let mut w = Vec::with_capacity(n);
        let mut dw = Vec::with_capacity(n);
        for i in 0..n {
            let base = self.sign[i] * self.scale_prod[i];
            if self.frozen[i] {
                w.push(base * self.lower(i));
                dw.push(0.0);
            } else {
                let h = soft_round(self.v[i], beta);
                let span = self.span(i);
                w.push(base * (self.lower(i) + h * span));
                dw.push(base * span * beta * h * (1.0 - h));
            }
        }
        (w, dw)
    }

    /// Decisions for RTN expressed in this interval layout (`true` = upper).
    pub fn rtn_decisions(&self, w: &Tensor) -> Vec<bool> {
        w.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if self.frozen[i] {
                    return false;
                }
                let mag = normalized_magnitude(x, self.scale_prod[i]);
                crate::nvfp4::rtn_node_index(mag) > self.lower_idx[i] as usize
            })
            .collect()
    }

    /// Quantized tensor for a decision vector; codes come straight from node
    /// indices so the result dequantizes to [`Self::weights_from_decisions`].
    pub fn quantized_from_decisions(&self, decisions: &[bool]) -> Result<QuantizedTensor> {
        let codes = decisions
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let idx = self.lower_idx[i] as usize + usize::from(d && !self.frozen[i]);
                Nvfp4Code::from_node(idx, self.sign[i] < 0.0)
            })
            .collect();
        QuantizedTensor::new(self.shape.clone(), codes, self.scales.clone())
    }
}

/// Soft-quantized weights at temperature `beta`.
pub fn soft_quantize(rv: &RoundingVars, beta: f64) -> Tensor {
    let (w, _) = rv.soft_weights_with_slope(beta);
    Tensor::new(rv.shape.clone(), w).expect("rounding vars keep a valid shape")
}

/// Mean of `1 − (2v − 1)²` over non-frozen weights and its gradient.
pub fn round_reg_loss(rv: &RoundingVars) -> (f64, Vec<f64>) {
    let n = rv.num_free();
    let mut grad = vec![0.0; rv.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let inv_n = 1.0 / n as f64;
    let mut sum = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        if rv.frozen[i] {
            continue;
        }
        let c = 2.0 * rv.v[i] - 1.0;
        sum += 1.0 - c * c;
        *g = -4.0 * c * inv_n;
    }
    (sum * inv_n, grad)
}

/// Returns a copy with `v` clamped into `[0, 1]`.
pub fn clip_vars(mut rv: RoundingVars) -> RoundingVars {
    rv.clip();
    rv
}

/// Threshold decisions `v ≥ 0.5` and the resulting grid weights.
pub fn harden(rv: &RoundingVars) -> (Vec<bool>, Tensor) {
    let decisions: Vec<bool> =
        rv.v.iter()
            .zip(&rv.frozen)
            .map(|(&v, &frozen)| !frozen && v >= 0.5)
            .collect();
    let w = rv.weights_from_decisions(&decisions);
    let t = Tensor::new(rv.shape.clone(), w).expect("rounding vars keep a valid shape");
    (decisions, t)
}

/// Hardened weights as a packable quantized tensor.
pub fn harden_quantized(rv: &RoundingVars) -> Result<QuantizedTensor> {
    let (decisions, _) = harden(rv);
    rv.quantized_from_decisions(&decisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvfp4::{compute_scales, dequantize, quantize_rtn};

    /// One-element vars with unit scales so normalized == raw magnitude.
    fn unit_vars(values: &[f64]) -> RoundingVars {
        let w = Tensor::new(vec![values.len()], values.to_vec()).unwrap();
        let scales = ScaleSet {
            s_global: 1.0,
            s_block: vec![1.0; values.len().div_ceil(16)],
            block_size: 16,
        };
        init_rounding_vars(&w, &scales).unwrap()
    }

    #[test]
    fn init_examples() {
        let rv = unit_vars(&[1.2, 1.0, 6.0, -7.0, 0.0]);
        assert!((rv.v()[0] - 0.4).abs() < 1e-15);
        assert_eq!((rv.lower(0), rv.upper(0)), (1.0, 1.5));
        assert_eq!(rv.v()[1], 0.0);
        assert_eq!((rv.lower(1), rv.upper(1)), (1.0, 1.5));
        assert!(rv.is_frozen(2) && rv.v()[2] == 0.0 && rv.span(2) == 0.0);
        assert!(rv.is_frozen(3) && rv.sign(3) == -1.0);
        assert_eq!((rv.lower(4), rv.upper(4)), (0.0, 0.5));
        assert_eq!(rv.num_free(), 3);
    }

    #[test]
    fn soft_round_examples() {
        assert_eq!(soft_round(0.5, 4.0), 0.5);
        assert_eq!(soft_round(0.5, 123.0), 0.5);
        // σ(1) = 1 / (1 + e⁻¹)
        assert!((soft_round(0.75, 4.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((1.0 - soft_round(0.6, 1000.0)).abs() < 1e-6);
    }

    #[test]
    fn soft_quantize_endpoints_and_midpoint() {
        let mut rv = unit_vars(&[1.25, -2.7]);
        assert_eq!(rv.v()[0], 0.5);
        let mid = soft_quantize(&rv, 4.0);
        assert_eq!(mid.data()[0], 1.25);
        rv.set_v(&[0.0, 1.0]).unwrap();
        let hard = soft_quantize(&rv, 1e4);
        assert!((hard.data()[0] - 1.0).abs() < 1e-12);
        assert!((hard.data()[1] + 3.0).abs() < 1e-12);
        let frozen = unit_vars(&[-6.5]);
        assert_eq!(soft_quantize(&frozen, 4.0).data(), &[-6.0]);
    }

    #[test]
    fn regularizer_examples() {
        let mut rv = unit_vars(&[0.1, 0.2, 0.3, 0.4]);
        rv.set_v(&[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(round_reg_loss(&rv).0, 0.0);
        let mut one = unit_vars(&[0.1]);
        one.set_v(&[0.5]).unwrap();
        assert_eq!(round_reg_loss(&one).0, 1.0);
        one.set_v(&[0.75]).unwrap();
        let (loss, grad) = round_reg_loss(&one);
        assert_eq!(loss, 0.75);
        assert_eq!(grad, vec![-2.0]);
        // frozen weights are excluded from the mean
        let mut mixed = unit_vars(&[0.1, 9.0]);
        mixed.set_v(&[0.5, 0.0]).unwrap();
        let (loss, grad) = round_reg_loss(&mixed);
        assert_eq!(loss, 1.0);
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn schedule_examples() {
        let s = BetaSchedule::new(4.0, 40.0, 100).unwrap();
        assert_eq!(beta_at(&s, 0).unwrap(), 4.0);
        assert_eq!(beta_at(&s, 100).unwrap(), 40.0);
        assert_eq!(beta_at(&s, 50).unwrap(), 22.0);
        assert!(matches!(
            beta_at(&s, 101),
            Err(FaarError::StepOutOfRange { .. })
        ));
        assert!(BetaSchedule::new(4.0, 2.0, 10).is_err());
        assert!(BetaSchedule::new(0.0, 2.0, 10).is_err());
        assert!(BetaSchedule::new(1.0, 2.0, 0).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut rv = unit_vars(&[0.1, 0.2, 0.3]);
        rv.v_mut().copy_from_slice(&[-0.2, 1.7, 0.3]);
        let rv = clip_vars(rv);
        assert_eq!(rv.v(), &[0.0, 1.0, 0.3]);
        let again = clip_vars(rv.clone());
        assert_eq!(again, rv);
    }

    #[test]
    fn harden_threshold_is_inclusive() {
        let mut rv = unit_vars(&[1.2, 1.2, 6.0]);
        rv.set_v(&[0.5, 0.49, 0.9]).unwrap();
        let (d, w) = harden(&rv);
        assert_eq!(d, vec![true, false, false]);
        assert_eq!(w.data(), &[1.5, 1.0, 6.0]);
    }

    #[test]
    fn hardened_init_matches_rtn_off_midpoints() {
        let data: Vec<f64> = (0..200)
            .map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.137)
            .collect();
        let w = Tensor::new(vec![10, 20], data).unwrap();
        let scales = compute_scales(&w, 16).unwrap();
        let rv = init_rounding_vars(&w, &scales).unwrap();
        let (_, hard) = harden(&rv);
        let rtn = dequantize(&quantize_rtn(&w, &scales).unwrap());
        for i in 0..w.len() {
            if rv.v()[i] != 0.5 {
                assert_eq!(hard.data()[i], rtn.data()[i], "element {i}");
            }
        }
        let q = harden_quantized(&rv).unwrap();
        assert_eq!(dequantize(&q), hard);
    }

    #[test]
    fn slope_scales_with_span() {
        // (0.5, 1.0) has span 0.5, (4, 6) has span 2.
        let mut rv = unit_vars(&[0.7, 4.8]);
        rv.set_v(&[0.3, 0.3]).unwrap();
        let (_, dw) = rv.soft_weights_with_slope(4.0);
        assert!((dw[1] / dw[0] - 4.0).abs() < 1e-12);
    }
}
