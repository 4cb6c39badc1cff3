//! Layer-wise rounding optimization against output reconstruction.
//!
//! For a layer `W` (out × in) and calibration inputs `X`, `X_q` the objective is
//! `‖X Wᵀ − X_q W_q(V)ᵀ‖²_F + λ_round · mean(1 − (2v − 1)²)`, minimized over
//! `V` only. `X_q` is fixed per batch since the weights never feed back into it.

use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{FaarError, Result};
use crate::nvfp4::{
    block_scale, compute_scales, global_scale, normalized_magnitude, rtn_node_index,
    DEFAULT_BLOCK_SIZE, NODES,
};
use crate::rounding::{init_rounding_vars, round_reg_loss, BetaSchedule, RoundingVars};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// A bias-free linear layer `y = x Wᵀ` with `W` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub name: String,
    weights: Tensor,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, weights: Tensor) -> Result<Self> {
        weights.dims2()?;
        if !weights.is_finite() {
            return Err(FaarError::InvalidArgument(
                "layer weights must be finite".into(),
            ));
        }
        Ok(LinearLayer {
            name: name.into(),
            weights,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Full-precision inputs and their NVFP4-quantized counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibBatch {
    x: Tensor,
    x_q: Tensor,
}

impl CalibBatch {
    /// Quantizes `x` with [`quantize_activations`].
    pub fn new(x: Tensor, block_size: usize) -> Result<Self> {
        let x_q = quantize_activations(&x, block_size)?;
        Ok(CalibBatch { x, x_q })
    }

    /// Uses `x_q` as given; `x_q == x` disables activation quantization.
    pub fn with_quantized(x: Tensor, x_q: Tensor) -> Result<Self> {
        x.dims2()?;
        if x.shape() != x_q.shape() {
            return Err(FaarError::ShapeMismatch(format!(
                "activations {:?} vs quantized {:?}",
                x.shape(),
                x_q.shape()
            )));
        }
        Ok(CalibBatch { x, x_q })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn x_q(&self) -> &Tensor {
        &self.x_q
    }

    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }
}

/// RTN NVFP4 round trip of activations. One global scale per matrix, blocks
/// of `block_size` along each row (blocks never straddle rows).
pub fn quantize_activations(x: &Tensor, block_size: usize) -> Result<Tensor> {
    if block_size == 0 {
        return Err(FaarError::InvalidArgument("block_size must be ≥ 1".into()));
    }
    if !x.is_finite() {
        return Err(FaarError::InvalidArgument(
            "activations must be finite".into(),
        ));
    }
    let cols = *x.shape().last().expect("tensors have a shape");
    let amax = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s_global = global_scale(amax)?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(cols) {
        for block in row.chunks(block_size) {
            let block_amax = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let sp = block_scale(block_amax, s_global) * s_global;
            out.extend(block.iter().map(|&v| {
                let node = NODES[rtn_node_index(normalized_magnitude(v, sp))];
                let q = node * sp;
                if v < 0.0 {
                    -q
                } else {
                    q
                }
            }));
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_round: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Set from the run-level block size.
    #[serde(skip)]
    pub block_size: usize,
    pub adam: AdamConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 500,
            learning_rate: 5e-4,
            lambda_round: 0.01,
            beta_start: BetaSchedule::DEFAULT_START,
            beta_end: BetaSchedule::DEFAULT_END,
            block_size: DEFAULT_BLOCK_SIZE,
            adam: AdamConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FaarError::Config(
                "stage1.learning_rate must be positive".into(),
            ));
        }
        if !(self.lambda_round >= 0.0 && self.lambda_round.is_finite()) {
            return Err(FaarError::Config("stage1.lambda_round must be ≥ 0".into()));
        }
        if self.block_size == 0 {
            return Err(FaarError::Config("block_size must be ≥ 1".into()));
        }
        BetaSchedule::new(self.beta_start, self.beta_end, self.steps.max(1))
            .map_err(|e| FaarError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<BetaSchedule> {
        BetaSchedule::new(self.beta_start, self.beta_end, self.steps.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1TraceRow {
    pub step: usize,
    pub mse_term: f64,
    pub reg_term: f64,
    pub beta: f64,
}

fn check_shapes(layer: &LinearLayer, batch: &CalibBatch, rv: &RoundingVars) -> Result<()> {
    let (_, cols) = batch.x.dims2()?;
    if cols != layer.in_dim() {
        return Err(FaarError::ShapeMismatch(format!(
            "calibration inputs have {cols} features, layer {} expects {}",
            layer.name,
            layer.in_dim()
        )));
    }
    if rv.shape() != layer.weights.shape() {
        return Err(FaarError::ShapeMismatch(format!(
            "rounding vars {:?} vs layer {:?}",
            rv.shape(),
            layer.weights.shape()
        )));
    }
    Ok(())
}

/// `‖X Wᵀ − X_q W_qᵀ‖²_F` evaluated straight from the residual.
pub fn reconstruction_mse(layer: &LinearLayer, batches: &[CalibBatch], w_q: &[f64]) -> f64 {
    ReconEvaluator::new(layer, batches).eval(w_q)
}

/// Reconstruction loss with the full-precision outputs cached, for evaluating
/// many candidate weight sets against one layer.
pub struct ReconEvaluator<'a> {
    out: usize,
    inp: usize,
    batches: &'a [CalibBatch],
    targets: Vec<Vec<f64>>,
}

impl<'a> ReconEvaluator<'a> {
    pub fn new(layer: &LinearLayer, batches: &'a [CalibBatch]) -> Self {
        let (out, inp) = (layer.out_dim(), layer.in_dim());
        let targets = batches
            .iter()
            .map(|b| matmul_nt(b.x.data(), b.rows(), inp, layer.weights.data(), out))
            .collect();
        ReconEvaluator {
            out,
            inp,
            batches,
            targets,
        }
    }

    pub fn eval(&self, w_q: &[f64]) -> f64 {
        self.batches
            .iter()
            .zip(&self.targets)
            .map(|(b, y)| {
                let y_q = matmul_nt(b.x_q.data(), b.rows(), self.inp, w_q, self.out);
                crate::tensor::sq_dist(y, &y_q)
            })
            .sum()
    }
}

/// Stage-1 objective at temperature `beta` for one batch.
pub fn stage1_loss(
    layer: &LinearLayer,
    batch: &CalibBatch,
    rv: &RoundingVars,
    beta: f64,
    lambda_round: f64,
) -> Result<f64> {
    check_shapes(layer, batch, rv)?;
    let (w_q, _) = rv.soft_weights_with_slope(beta);
    let mse = reconstruction_mse(layer, std::slice::from_ref(batch), &w_q);
    Ok(mse + lambda_round * round_reg_loss(rv).0)
}

/// Analytic `∂ stage1_loss / ∂v` via the batch residual.
pub fn stage1_grad(
    layer: &LinearLayer,
    batch: &CalibBatch,
    rv: &RoundingVars,
    beta: f64,
    lambda_round: f64,
) -> Result<Vec<f64>> {
    check_shapes(layer, batch, rv)?;
    let (out, inp) = (layer.out_dim(), layer.in_dim());
    let rows = batch.rows();
    let (w_q, slope) = rv.soft_weights_with_slope(beta);
    let y = matmul_nt(batch.x.data(), rows, inp, layer.weights.data(), out);
    let mut resid = matmul_nt(batch.x_q.data(), rows, inp, &w_q, out);
    for (r, y) in resid.iter_mut().zip(&y) {
        *r -= y;
    }
    // ∂MSE/∂W_q = 2 Rᵀ X_q, (out × in)
    let d_wq = matmul_tn(&resid, rows, out, batch.x_q.data(), inp);
    let (_, reg_grad) = round_reg_loss(rv);
    Ok(d_wq
        .iter()
        .zip(&slope)
        .zip(&reg_grad)
        .map(|((d, s), r)| 2.0 * d * s + lambda_round * r)
        .collect())
}

/// Quadratic form of the reconstruction loss over all calibration batches:
/// `Σ_o w_oᵀ G w_o − 2 w_o · C_o + ‖Y‖²` with `G = Σ X_qᵀX_q` and
/// `C = W Σ XᵀX_q`. Per-step cost is independent of the batch count.
pub(crate) struct LayerObjective {
    out: usize,
    inp: usize,
    gram: Vec<f64>,
    cross: Vec<f64>,
    y_norm: f64,
}

impl LayerObjective {
    pub(crate) fn new(layer: &LinearLayer, batches: &[CalibBatch]) -> Self {
        let (out, inp) = (layer.out_dim(), layer.in_dim());
        let mut gram = vec![0.0; inp * inp];
        let mut h = vec![0.0; inp * inp];
        let mut y_norm = 0.0;
        for b in batches {
            let rows = b.rows();
            let g = matmul_tn(b.x_q.data(), rows, inp, b.x_q.data(), inp);
            let hb = matmul_tn(b.x.data(), rows, inp, b.x_q.data(), inp);
            gram.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            h.iter_mut().zip(&hb).for_each(|(a, b)| *a += b);
            let y = matmul_nt(b.x.data(), rows, inp, layer.weights.data(), out);
            y_norm += y.iter().map(|v| v * v).sum::<f64>();
        }
        let cross = matmul_nn(layer.weights.data(), out, inp, &h, inp);
        LayerObjective {
            out,
            inp,
            gram,
            cross,
            y_norm,
        }
    }

    /// `(mse, reg, ∂total/∂v)`.
    pub(crate) fn eval(
        &self,
        rv: &RoundingVars,
        beta: f64,
        lambda_round: f64,
    ) -> (f64, f64, Vec<f64>) {
        let (w_q, slope) = rv.soft_weights_with_slope(beta);
        let m = matmul_nn(&w_q, self.out, self.inp, &self.gram, self.inp);
        let mut quad = 0.0;
        let mut grad = Vec::with_capacity(w_q.len());
        for i in 0..w_q.len() {
            quad += w_q[i] * (m[i] - 2.0 * self.cross[i]);
            grad.push(2.0 * (m[i] - self.cross[i]) * slope[i]);
        }
        let (reg, reg_grad) = round_reg_loss(rv);
        for (g, r) in grad.iter_mut().zip(&reg_grad) {
            *g += lambda_round * r;
        }
        ((quad + self.y_norm).max(0.0), reg, grad)
    }
}

/// Result of optimizing one layer.
#[derive(Debug, Clone)]
pub struct LayerResult {
    pub vars: RoundingVars,
    pub trace: Vec<Stage1TraceRow>,
}

/// Stage-1 optimization of one layer from the relative-position initialization.
///
/// The trace holds one row per update (evaluated before it) plus a final row
/// after the last update.
pub fn optimize_layer(
    layer: &LinearLayer,
    calib: &[CalibBatch],
    cfg: &Stage1Config,
) -> Result<LayerResult> {
    cfg.validate()?;
    let scales = compute_scales(layer.weights(), cfg.block_size)?;
    let rv = init_rounding_vars(layer.weights(), &scales)?;
    optimize_layer_from(layer, calib, cfg, rv)
}

/// Stage-1 optimization starting from existing rounding variables.
pub fn optimize_layer_from(
    layer: &LinearLayer,
    calib: &[CalibBatch],
    cfg: &Stage1Config,
    mut rv: RoundingVars,
) -> Result<LayerResult> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(FaarError::InvalidArgument(
            "calibration set is empty".into(),
        ));
    }
    for b in calib {
        check_shapes(layer, b, &rv)?;
    }
    let schedule = cfg.schedule()?;
    let objective = LayerObjective::new(layer, calib);
    let mask: Vec<bool> = rv.frozen_mask().iter().map(|f| !f).collect();
    let mut adam = Adam::new(rv.len(), cfg.learning_rate, cfg.adam);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let beta = schedule.beta_at(step.min(schedule.total_steps))?;
        let (mse, reg, grad) = objective.eval(&rv, beta, cfg.lambda_round);
        if !(mse.is_finite() && reg.is_finite()) || grad.iter().any(|g| !g.is_finite()) {
            return Err(FaarError::Diverged {
                step,
                detail: format!("layer {}: mse={mse}, reg={reg}", layer.name),
            });
        }
        trace.push(Stage1TraceRow {
            step,
            mse_term: mse,
            reg_term: reg,
            beta,
        });
        if step == cfg.steps {
            break;
        }
        adam.step(rv.v_mut(), &grad, &mask);
        rv.clip();
    }
    Ok(LayerResult { vars: rv, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nvfp4::{compute_scales, dequantize, quantize_rtn};
    use crate::rounding::harden;

    fn layer(out: usize, inp: usize, f: impl Fn(usize) -> f64) -> LinearLayer {
        LinearLayer::new(
            "t",
            Tensor::matrix(out, inp, (0..out * inp).map(f).collect()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn activations_zero_and_on_grid() {
        let z = Tensor::zeros(vec![3, 5]).unwrap();
        assert_eq!(quantize_activations(&z, 16).unwrap(), z);
        // amax = 6 · 448 · 2⁻¹⁰ gives s_global = 2⁻¹⁰ and s_g = 448 exactly.
        let s = 0.4375;
        let row: Vec<f64> = [0.0, 0.5, -1.0, 1.5, 2.0, -3.0, 4.0, 6.0]
            .iter()
            .map(|n| n * s)
            .collect();
        let x = Tensor::matrix(1, 8, row).unwrap();
        assert_eq!(quantize_activations(&x, 16).unwrap(), x);
    }

    #[test]
    fn activation_blocks_do_not_straddle_rows() {
        // Two rows of 3: with straddling blocks of 4 the small second row would
        // share a block with the large first row.
        let x = Tensor::matrix(2, 3, vec![100.0, 90.0, 80.0, 0.011, 0.013, 0.017]).unwrap();
        let q = quantize_activations(&x, 4).unwrap();
        for (a, b) in x.data()[3..].iter().zip(&q.data()[3..]) {
            assert!((a - b).abs() / a < 0.2, "{a} vs {b}");
        }
    }

    #[test]
    fn loss_zero_for_on_grid_perfect_reconstruction() {
        let l = layer(2, 2, |i| [1.0, -0.5, 3.0, 6.0][i] * 0.4375);
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.25, 4.0]).unwrap();
        let batch = CalibBatch::with_quantized(x.clone(), x).unwrap();
        let scales = compute_scales(l.weights(), 16).unwrap();
        let mut rv = init_rounding_vars(l.weights(), &scales).unwrap();
        let binary: Vec<f64> = rv.v().iter().map(|v| v.round()).collect();
        rv.set_v(&binary).unwrap();
        let (_, hard) = harden(&rv);
        assert_eq!(&hard, l.weights());
        let loss = stage1_loss(&l, &batch, &rv, 1e6, 0.01).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn zero_inputs_leave_only_regularizer() {
        let l = layer(2, 3, |i| i as f64 * 0.3 - 0.7);
        let batch = CalibBatch::new(Tensor::zeros(vec![4, 3]).unwrap(), 16).unwrap();
        let scales = compute_scales(l.weights(), 16).unwrap();
        let rv = init_rounding_vars(l.weights(), &scales).unwrap();
        let loss = stage1_loss(&l, &batch, &rv, 4.0, 0.3).unwrap();
        assert_eq!(loss, 0.3 * round_reg_loss(&rv).0);
    }

    #[test]
    fn loss_matches_straight_line_oracle_2x2() {
        // W = [[0.9, -2.2], [4.7, 0.3]], one block, unit-free hand computation.
        let w = [0.9, -2.2, 4.7, 0.3];
        let l = layer(2, 2, |i| w[i]);
        let x = [1.0, -0.5, 0.25, 2.0];
        let xq = [1.0, -0.5, 0.25, 2.0];
        let batch = CalibBatch::with_quantized(
            Tensor::matrix(2, 2, x.to_vec()).unwrap(),
            Tensor::matrix(2, 2, xq.to_vec()).unwrap(),
        )
        .unwrap();
        let scales = compute_scales(l.weights(), 16).unwrap();
        let rv = init_rounding_vars(l.weights(), &scales).unwrap();
        let beta = 7.0;
        let lambda = 0.2;

        let mut wq = [0.0; 4];
        let mut reg = 0.0;
        for k in 0..4 {
            let sp = scales.s_block[0] * scales.s_global;
            let m = (w[k] as f64).abs() / sp;
            let (lo, hi) = crate::nvfp4::find_interval(m.min(6.0)).unwrap();
            let v = rv.v()[k];
            let h = 1.0 / (1.0 + (-beta * (v - 0.5)).exp());
            wq[k] = w[k].signum() * (lo + h * (hi - lo)) * sp;
            reg += 1.0 - (2.0 * v - 1.0) * (2.0 * v - 1.0);
        }
        reg /= 4.0;
        let mut mse = 0.0;
        for b in 0..2 {
            for o in 0..2 {
                let y = x[b * 2] * w[o * 2] + x[b * 2 + 1] * w[o * 2 + 1];
                let yq = xq[b * 2] * wq[o * 2] + xq[b * 2 + 1] * wq[o * 2 + 1];
                mse += (y - yq) * (y - yq);
            }
        }
        let got = stage1_loss(&l, &batch, &rv, beta, lambda).unwrap();
        assert!((got - (mse + lambda * reg)).abs() < 1e-12);
    }

    #[test]
    fn frozen_and_flat_gradients() {
        let l = layer(1, 2, |i| [6.0, 1.2][i]);
        let batch =
            CalibBatch::new(Tensor::matrix(2, 2, vec![1.0, 0.5, -0.3, 2.0]).unwrap(), 16).unwrap();
        let scales = compute_scales(l.weights(), 16).unwrap();
        let rv = init_rounding_vars(l.weights(), &scales).unwrap();
        let g = stage1_grad(&l, &batch, &rv, 4.0, 0.1).unwrap();
        assert!(rv.is_frozen(0) || rv.v()[0] > 0.999);
        if rv.is_frozen(0) {
            assert_eq!(g[0], 0.0);
        }
        let flat = stage1_grad(&l, &batch, &rv, 0.0, 0.0).unwrap();
        assert!(flat.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gram_objective_matches_direct_route() {
        let l = layer(3, 5, |i| ((i * 7919) % 23) as f64 * 0.21 - 2.0);
        let xs: Vec<f64> = (0..20)
            .map(|i| ((i * 31) % 17) as f64 * 0.13 - 1.0)
            .collect();
        let batch = CalibBatch::new(Tensor::matrix(4, 5, xs).unwrap(), 16).unwrap();
        let scales = compute_scales(l.weights(), 16).unwrap();
        let rv = init_rounding_vars(l.weights(), &scales).unwrap();
        let obj = LayerObjective::new(&l, std::slice::from_ref(&batch));
        let (mse, reg, grad) = obj.eval(&rv, 6.0, 0.05);
        let direct = stage1_loss(&l, &batch, &rv, 6.0, 0.05).unwrap();
        assert!((mse + 0.05 * reg - direct).abs() < 1e-9 * direct.max(1.0));
        let g2 = stage1_grad(&l, &batch, &rv, 6.0, 0.05).unwrap();
        for (a, b) in grad.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn on_grid_layer_reproduces_rtn() {
        let l = layer(2, 4, |i| {
            [0.5, -1.0, 6.0, 2.0, -3.0, 0.0, 4.0, 1.5][i] * 0.4375
        });
        let batch = CalibBatch::new(
            Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 - 5.0) * 0.37).collect()).unwrap(),
            16,
        )
        .unwrap();
        let cfg = Stage1Config {
            steps: 50,
            ..Stage1Config::default()
        };
        let res = optimize_layer(&l, &[batch], &cfg).unwrap();
        let (_, hard) = harden(&res.vars);
        let scales = compute_scales(l.weights(), 16).unwrap();
        let rtn = dequantize(&quantize_rtn(l.weights(), &scales).unwrap());
        assert_eq!(hard, rtn);
        assert_eq!(res.trace.len(), 51);
    }

    #[test]
    fn empty_calibration_rejected() {
        let l = layer(1, 1, |_| 1.0);
        assert!(optimize_layer(&l, &[], &Stage1Config::default()).is_err());
    }
}
