//! Full-model alignment on a small feed-forward network.
//!
//! The teacher runs in full precision. The student uses soft-quantized weights
//! from one [`RoundingVars`] per layer and RTN-quantized activations at every
//! layer input. The objective is
//! `λ_KL · KL(P_fp ‖ P_q) + ‖H_fp − H_q‖²_F + λ_round · Σ_l reg_l`
//! where `H` is the input of the head layer (before activation quantization)
//! and `P = softmax(Z / τ)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::error::{FaarError, Result};
use crate::nvfp4::DEFAULT_BLOCK_SIZE;
use crate::rounding::{harden, round_reg_loss, BetaSchedule, RoundingVars};
use crate::stage1::{quantize_activations, LinearLayer};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

pub const DEFAULT_DIMS: [usize; 4] = [16, 32, 32, 10];
/// Floor applied to student probabilities inside the KL logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Ordered bias-free linear layers with ReLU between them; the last layer is
/// the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    layers: Vec<LinearLayer>,
}

impl MicroNet {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(FaarError::InvalidArgument(
                "a micro-network needs at least two layers".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(FaarError::ShapeMismatch(format!(
                    "layer {} outputs {} features but {} expects {}",
                    pair[0].name,
                    pair[0].out_dim(),
                    pair[1].name,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(MicroNet { layers })
    }

    /// Gaussian weights with standard deviation `1/√in` for each layer.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| {
                let (inp, out) = (d[0], d[1]);
                let normal = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("valid std");
                let w = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
                LinearLayer::new(format!("fc{l}"), Tensor::matrix(out, inp, w)?)
            })
            .collect::<Result<Vec<_>>>()?;
        MicroNet::new(layers)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("≥ 2 layers").out_dim()
    }

    /// Full-precision inputs seen by each layer on `x`.
    pub fn layer_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let weights: Vec<&[f64]> = self.layers.iter().map(|l| l.weights().data()).collect();
        let cache = run(self, x, &weights, None)?;
        Ok(cache.inputs)
    }
}

/// How the network's weights and activations are realized.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    FullPrecision,
    /// Soft-quantized weights at temperature `beta`.
    Soft {
        vars: &'a [RoundingVars],
        beta: f64,
        act_block: Option<usize>,
    },
    /// Hardened (`v ≥ 0.5`) weights.
    Hard {
        vars: &'a [RoundingVars],
        act_block: Option<usize>,
    },
    /// Explicit weights, e.g. dequantized from a packed export.
    Fixed {
        weights: &'a [Tensor],
        act_block: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Input of the head layer, before activation quantization.
    pub hidden: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

struct Cache {
    /// Input to each layer (after activation quantization when enabled).
    inputs: Vec<Tensor>,
    /// Pre-activation output of each layer; the last one is the logits.
    pre: Vec<Vec<f64>>,
    hidden: Tensor,
}

fn check_vars(net: &MicroNet, vars: &[RoundingVars]) -> Result<()> {
    if vars.len() != net.layers.len() {
        return Err(FaarError::ShapeMismatch(format!(
            "{} rounding-variable sets for {} layers",
            vars.len(),
            net.layers.len()
        )));
    }
    for (rv, layer) in vars.iter().zip(&net.layers) {
        if rv.shape() != layer.weights().shape() {
            return Err(FaarError::ShapeMismatch(format!(
                "rounding vars {:?} for layer {} of shape {:?}",
                rv.shape(),
                layer.name,
                layer.weights().shape()
            )));
        }
    }
    Ok(())
}

fn run(net: &MicroNet, x: &Tensor, weights: &[&[f64]], act_block: Option<usize>) -> Result<Cache> {
    let (rows, cols) = x.dims2()?;
    if cols != net.in_dim() {
        return Err(FaarError::ShapeMismatch(format!(
            "input has {cols} features, network expects {}",
            net.in_dim()
        )));
    }
    let last = net.layers.len() - 1;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    let mut h = x.clone();
    let mut hidden = None;
    for (l, layer) in net.layers.iter().enumerate() {
        if l == last {
            hidden = Some(h.clone());
        }
        let a = match act_block {
            Some(bs) => quantize_activations(&h, bs)?,
            None => h,
        };
        let s = matmul_nt(a.data(), rows, layer.in_dim(), weights[l], layer.out_dim());
        h = Tensor::matrix(
            rows,
            layer.out_dim(),
            s.iter().map(|&v| v.max(0.0)).collect(),
        )?;
        inputs.push(a);
        pre.push(s);
    }
    Ok(Cache {
        inputs,
        pre,
        hidden: hidden.expect("≥ 2 layers"),
    })
}

/// Row-wise `softmax(z / τ)`.
pub fn softmax_rows(z: &Tensor, tau: f64) -> Tensor {
    let cols = *z.shape().last().expect("shape");
    let mut out = Vec::with_capacity(z.len());
    for row in z.data().chunks(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
        let exps: Vec<f64> = row.iter().map(|&v| (v / tau - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::new(z.shape().to_vec(), out).expect("same shape")
}

fn finish(net: &MicroNet, cache: Cache, tau: f64) -> Result<ForwardOutput> {
    let rows = cache.hidden.shape()[0];
    let logits = Tensor::matrix(
        rows,
        net.num_classes(),
        cache.pre.last().expect("≥ 2 layers").clone(),
    )?;
    let probs = softmax_rows(&logits, tau);
    Ok(ForwardOutput {
        hidden: cache.hidden,
        logits,
        probs,
    })
}

/// Forward pass returning the last hidden state, logits and probabilities.
pub fn forward(net: &MicroNet, x: &Tensor, mode: Mode<'_>, tau: f64) -> Result<ForwardOutput> {
    if !(tau > 0.0) {
        return Err(FaarError::InvalidArgument("tau must be positive".into()));
    }
    let cache = match mode {
        Mode::FullPrecision => {
            let w: Vec<&[f64]> = net.layers.iter().map(|l| l.weights().data()).collect();
            run(net, x, &w, None)?
        }
        Mode::Soft {
            vars,
            beta,
            act_block,
        } => {
            check_vars(net, vars)?;
            let owned: Vec<Vec<f64>> = vars
                .iter()
                .map(|rv| rv.soft_weights_with_slope(beta).0)
                .collect();
            let w: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
            run(net, x, &w, act_block)?
        }
        Mode::Hard { vars, act_block } => {
            check_vars(net, vars)?;
            let owned: Vec<Tensor> = vars.iter().map(|rv| harden(rv).1).collect();
            let w: Vec<&[f64]> = owned.iter().map(Tensor::data).collect();
            run(net, x, &w, act_block)?
        }
        Mode::Fixed { weights, act_block } => {
            if weights.len() != net.layers.len()
                || weights
                    .iter()
                    .zip(&net.layers)
                    .any(|(w, l)| w.shape() != l.weights().shape())
            {
                return Err(FaarError::ShapeMismatch(
                    "explicit weights do not match the network's layers".into(),
                ));
            }
            let w: Vec<&[f64]> = weights.iter().map(Tensor::data).collect();
            run(net, x, &w, act_block)?
        }
    };
    finish(net, cache, tau)
}

fn check_distribution(p: &Tensor, which: &str) -> Result<()> {
    let cols = *p.shape().last().expect("shape");
    for (r, row) in p.data().chunks(cols).enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(FaarError::InvalidDistribution(format!(
                "{which} row {r} has a negative or non-finite entry"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FaarError::InvalidDistribution(format!(
                "{which} row {r} sums to {sum}"
            )));
        }
    }
    Ok(())
}

/// Batch mean of `Σ_c p · ln(p / max(q, 1e-12))`, with `0 · ln 0 = 0`.
pub fn kl_loss(p_fp: &Tensor, p_q: &Tensor) -> Result<f64> {
    if p_fp.shape() != p_q.shape() {
        return Err(FaarError::ShapeMismatch(format!(
            "distributions {:?} vs {:?}",
            p_fp.shape(),
            p_q.shape()
        )));
    }
    check_distribution(p_fp, "teacher")?;
    check_distribution(p_q, "student")?;
    let cols = *p_fp.shape().last().expect("shape");
    let rows = p_fp.len() / cols;
    let total: f64 = p_fp
        .data()
        .iter()
        .zip(p_q.data())
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(PROB_FLOOR)).ln())
        .sum();
    Ok((total / rows as f64).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_kl: f64,
    pub lambda_round: f64,
    pub tau: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Re-anneal from `beta_start` instead of continuing from Stage 1's end value.
    pub restart_beta: bool,
    /// Rows per update; 0 uses the whole calibration set every step.
    pub batch_size: usize,
    /// Set from the run-level block size.
    #[serde(skip)]
    pub block_size: usize,
    pub quantize_activations: bool,
    /// Set from the run-level seed; drives minibatch order.
    #[serde(skip)]
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 2500,
            learning_rate: 1e-4,
            lambda_kl: 1.0,
            lambda_round: 0.01,
            tau: 1.0,
            beta_start: BetaSchedule::DEFAULT_START,
            beta_end: BetaSchedule::DEFAULT_END,
            restart_beta: false,
            batch_size: 0,
            block_size: DEFAULT_BLOCK_SIZE,
            quantize_activations: true,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FaarError::Config(
                "stage2.learning_rate must be positive".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(FaarError::Config("stage2.tau must be positive".into()));
        }
        if !(self.lambda_kl >= 0.0 && self.lambda_round >= 0.0) {
            return Err(FaarError::Config("stage2 lambdas must be ≥ 0".into()));
        }
        if self.block_size == 0 {
            return Err(FaarError::Config("block_size must be ≥ 1".into()));
        }
        BetaSchedule::new(self.beta_start, self.beta_end, 1)
            .map_err(|e| FaarError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn act_block(&self) -> Option<usize> {
        self.quantize_activations.then_some(self.block_size)
    }

    /// Temperature schedule for Stage 2. By default it continues from
    /// `stage1_beta_end` toward `max(beta_end, stage1_beta_end)`.
    pub fn schedule(&self, stage1_beta_end: f64) -> Result<BetaSchedule> {
        let steps = self.steps.max(1);
        if self.restart_beta {
            BetaSchedule::new(self.beta_start, self.beta_end, steps)
        } else {
            BetaSchedule::new(stage1_beta_end, self.beta_end.max(stage1_beta_end), steps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub total: f64,
    pub kl: f64,
    pub mse: f64,
    /// Unweighted sum of per-layer regularizers.
    pub round: f64,
}

/// Teacher-vs-student objective with its parts.
pub fn stage2_loss(
    teacher: &ForwardOutput,
    student: &ForwardOutput,
    vars: &[RoundingVars],
    cfg: &Stage2Config,
) -> Result<Stage2Loss> {
    if teacher.hidden.shape() != student.hidden.shape() {
        return Err(FaarError::ShapeMismatch(format!(
            "hidden states {:?} vs {:?}",
            teacher.hidden.shape(),
            student.hidden.shape()
        )));
    }
    let kl = kl_loss(&teacher.probs, &student.probs)?;
    let mse = crate::tensor::sq_dist(teacher.hidden.data(), student.hidden.data());
    let round: f64 = vars.iter().map(|rv| round_reg_loss(rv).0).sum();
    Ok(Stage2Loss {
        total: cfg.lambda_kl * kl + mse + cfg.lambda_round * round,
        kl,
        mse,
        round,
    })
}

/// Exact reverse-mode gradients `∂total/∂v` per layer, with a
/// straight-through estimator for activation quantization.
pub fn backprop_stage2(
    net: &MicroNet,
    x: &Tensor,
    vars: &[RoundingVars],
    beta: f64,
    cfg: &Stage2Config,
) -> Result<(Stage2Loss, Vec<Vec<f64>>)> {
    let teacher = forward(net, x, Mode::FullPrecision, cfg.tau)?;
    loss_and_grads(net, x, &teacher, vars, beta, cfg)
}

fn loss_and_grads(
    net: &MicroNet,
    x: &Tensor,
    teacher: &ForwardOutput,
    vars: &[RoundingVars],
    beta: f64,
    cfg: &Stage2Config,
) -> Result<(Stage2Loss, Vec<Vec<f64>>)> {
    check_vars(net, vars)?;
    let rows = x.shape()[0];
    let (soft, slopes): (Vec<Vec<f64>>, Vec<Vec<f64>>) = vars
        .iter()
        .map(|rv| rv.soft_weights_with_slope(beta))
        .unzip();
    let w: Vec<&[f64]> = soft.iter().map(Vec::as_slice).collect();
    let cache = run(net, x, &w, cfg.act_block())?;
    let hidden_q = cache.hidden.clone();
    let inputs = cache.inputs;
    let pre = cache.pre;
    let student = finish(
        net,
        Cache {
            inputs: Vec::new(),
            pre: pre.clone(),
            hidden: hidden_q,
        },
        cfg.tau,
    )?;
    let loss = stage2_loss(teacher, &student, vars, cfg)?;

    let last = net.layers.len() - 1;
    // ∂(λ_KL · KL)/∂Z = λ_KL (P_q − P_fp) / (τ · rows)
    let scale = cfg.lambda_kl / (cfg.tau * rows as f64);
    let mut d_pre: Vec<f64> = student
        .probs
        .data()
        .iter()
        .zip(teacher.probs.data())
        .map(|(q, p)| scale * (q - p))
        .collect();
    let mut grads = vec![Vec::new(); net.layers.len()];
    for l in (0..=last).rev() {
        let layer = &net.layers[l];
        let (out, inp) = (layer.out_dim(), layer.in_dim());
        debug_assert_eq!(d_pre.len(), rows * out);
        let d_w = matmul_tn(&d_pre, rows, out, inputs[l].data(), inp);
        let (_, reg_grad) = round_reg_loss(&vars[l]);
        grads[l] = d_w
            .iter()
            .zip(&slopes[l])
            .zip(&reg_grad)
            .map(|((d, s), r)| d * s + cfg.lambda_round * r)
            .collect();
        if l == 0 {
            break;
        }
        // straight-through: ∂/∂h_l = ∂/∂a_l
        let mut d_h = matmul_nn(&d_pre, rows, out, w[l], inp);
        if l == last {
            for ((d, hq), hf) in d_h
                .iter_mut()
                .zip(student.hidden.data())
                .zip(teacher.hidden.data())
            {
                *d += 2.0 * (hq - hf);
            }
        }
        for (d, s) in d_h.iter_mut().zip(&pre[l - 1]) {
            if *s <= 0.0 {
                *d = 0.0;
            }
        }
        d_pre = d_h;
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) || !loss.total.is_finite() {
        return Err(FaarError::Diverged {
            step: 0,
            detail: format!("non-finite stage-2 loss or gradient: {loss:?}"),
        });
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2TraceRow {
    pub step: usize,
    pub kl: f64,
    pub mse: f64,
    pub round: f64,
    pub beta: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub vars: Vec<RoundingVars>,
    pub trace: Vec<Stage2TraceRow>,
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let cols = x.shape()[1];
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &r in idx {
        out.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::matrix(idx.len(), cols, out).expect("gathered rows")
}

/// Joint Adam updates of every layer's `v` against the teacher.
///
/// With `batch_size` 0 (or ≥ the row count) every step sees all rows;
/// otherwise rows are visited in seeded shuffled epochs. The trace has one row
/// per update, evaluated before it, plus a final row.
pub fn align_model(
    net: &MicroNet,
    mut vars: Vec<RoundingVars>,
    data: &Tensor,
    cfg: &Stage2Config,
    schedule: &BetaSchedule,
) -> Result<Stage2Result> {
    cfg.validate()?;
    schedule.validate()?;
    check_vars(net, &vars)?;
    let rows = data.dims2()?.0;
    let full_batch = cfg.batch_size == 0 || cfg.batch_size >= rows;
    let teacher_full = forward(net, data, Mode::FullPrecision, cfg.tau)?;
    let masks: Vec<Vec<bool>> = vars
        .iter()
        .map(|rv| rv.frozen_mask().iter().map(|f| !f).collect())
        .collect();
    let mut opts: Vec<Adam> = vars
        .iter()
        .map(|rv| Adam::new(rv.len(), cfg.learning_rate, cfg.adam))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows).collect();
    let mut cursor = rows;
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let beta = schedule.beta_at(step.min(schedule.total_steps))?;
        let is_final = step == cfg.steps;
        let (x, teacher) = if full_batch || is_final {
            (data.clone(), teacher_full.clone())
        } else {
            if cursor + cfg.batch_size > rows {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;
            let teacher = ForwardOutput {
                hidden: gather_rows(&teacher_full.hidden, idx),
                logits: gather_rows(&teacher_full.logits, idx),
                probs: gather_rows(&teacher_full.probs, idx),
            };
            (gather_rows(data, idx), teacher)
        };
        let (loss, grads) =
            loss_and_grads(net, &x, &teacher, &vars, beta, cfg).map_err(|e| match e {
                FaarError::Diverged { detail, .. } => FaarError::Diverged { step, detail },
                other => other,
            })?;
        trace.push(Stage2TraceRow {
            step,
            kl: loss.kl,
            mse: loss.mse,
            round: loss.round,
            beta,
            total: loss.total,
        });
        if is_final {
            break;
        }
        for ((rv, opt), (g, mask)) in vars.iter_mut().zip(&mut opts).zip(grads.iter().zip(&masks)) {
            opt.step(rv.v_mut(), g, mask);
            rv.clip();
        }
    }
    Ok(Stage2Result { vars, trace })
}

/// KL(teacher ‖ hardened student) on `x`.
pub fn hardened_kl(
    net: &MicroNet,
    x: &Tensor,
    vars: &[RoundingVars],
    tau: f64,
    act_block: Option<usize>,
) -> Result<f64> {
    let teacher = forward(net, x, Mode::FullPrecision, tau)?;
    let student = forward(net, x, Mode::Hard { vars, act_block }, tau)?;
    kl_loss(&teacher.probs, &student.probs)
}
