//! Ground truth and baselines for rounding decisions: exhaustive search over
//! all lower/upper assignments, stochastic rounding, and a strategy comparison
//! report.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FaarError, Result};
use crate::nvfp4::{compute_scales, QuantizedTensor, ScaleSet};
use crate::rounding::{init_rounding_vars, RoundingVars};
use crate::stage1::{CalibBatch, LinearLayer, ReconEvaluator};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_N: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    /// Full-length decision vector (`true` = upper); frozen weights are `false`.
    pub decisions: Vec<bool>,
    pub loss: f64,
    pub num_free: usize,
}

fn decisions_for(free: &[usize], len: usize, assignment: u64) -> Vec<bool> {
    let n = free.len();
    let mut d = vec![false; len];
    for (k, &i) in free.iter().enumerate() {
        d[i] = (assignment >> (n - 1 - k)) & 1 == 1;
    }
    d
}

/// Exhaustive minimum of the reconstruction loss over all `2^N` assignments of
/// the non-frozen weights. Assignments are numbered so that integer order is
/// lexicographic order on the decision vector; ties keep the smallest.
pub fn brute_force_optimal(
    layer: &LinearLayer,
    calib: &[CalibBatch],
    scales: &ScaleSet,
    max_n: usize,
) -> Result<BruteForceResult> {
    let rv = init_rounding_vars(layer.weights(), scales)?;
    brute_force_vars(layer, calib, &rv, max_n)
}

pub(crate) fn brute_force_vars(
    layer: &LinearLayer,
    calib: &[CalibBatch],
    rv: &RoundingVars,
    max_n: usize,
) -> Result<BruteForceResult> {
    if calib.is_empty() {
        return Err(FaarError::InvalidArgument(
            "calibration set is empty".into(),
        ));
    }
    let free = rv.free_indices();
    let n = free.len();
    if n > max_n || n > 40 {
        return Err(FaarError::TooManyWeights { n, max_n });
    }
    let eval = ReconEvaluator::new(layer, calib);
    let len = rv.len();
    let (loss, best) = (0..1u64 << n)
        .into_par_iter()
        .map(|a| {
            let w = rv.weights_from_decisions(&decisions_for(&free, len, a));
            (eval.eval(&w), a)
        })
        .reduce(
            || (f64::INFINITY, u64::MAX),
            |x, y| {
                if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) {
                    y
                } else {
                    x
                }
            },
        );
    Ok(BruteForceResult {
        decisions: decisions_for(&free, len, best),
        loss,
        num_free: n,
    })
}

/// Upper with probability equal to the relative position `v_init`.
pub fn stochastic_decisions(rv: &RoundingVars, rng: &mut impl Rng) -> Vec<bool> {
    (0..rv.len())
        .map(|i| {
            let u: f64 = rng.random();
            !rv.is_frozen(i) && u < rv.v()[i]
        })
        .collect()
}

/// One stochastic-rounding draw of `w`, unbiased in normalized space.
pub fn stochastic_round_sample(
    w: &Tensor,
    scales: &ScaleSet,
    rng: &mut impl Rng,
) -> Result<QuantizedTensor> {
    let rv = init_rounding_vars(w, scales)?;
    let d = stochastic_decisions(&rv, rng);
    rv.quantized_from_decisions(&d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub samples: usize,
}

impl StrategyRow {
    fn single(label: &str, loss: f64) -> Self {
        StrategyRow {
            label: label.into(),
            mean: loss,
            std: 0.0,
            min: loss,
            samples: 1,
        }
    }

    fn from_samples(label: &str, losses: &[f64]) -> Self {
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        let var = if losses.len() > 1 {
            losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        StrategyRow {
            label: label.into(),
            mean,
            std: var.sqrt(),
            min: losses.iter().copied().fold(f64::INFINITY, f64::min),
            samples: losses.len(),
        }
    }
}

/// Comparison of rounding strategies on one layer. Losses are the output
/// reconstruction MSE at hard decisions (no perplexity at this scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundingReport {
    pub layer: String,
    pub metric: String,
    pub num_weights: usize,
    pub num_free: usize,
    pub rtn: StrategyRow,
    pub lower: StrategyRow,
    pub upper: StrategyRow,
    pub stochastic: StrategyRow,
    /// Sample losses in draw order.
    pub stochastic_losses: Vec<f64>,
    /// Draws strictly better than RTN.
    pub stochastic_better_than_rtn: usize,
    pub optimal: Option<StrategyRow>,
    pub seeds: Vec<u64>,
}

impl RoundingReport {
    pub fn stochastic_best(&self) -> f64 {
        self.stochastic.min
    }
}

impl fmt::Display for RoundingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "layer {} ({} weights, {} free), metric: {}",
            self.layer, self.num_weights, self.num_free, self.metric
        )?;
        writeln!(f, "{:<20} {:>28}", "Rounding scheme", "Recon. MSE")?;
        writeln!(f, "{}", "-".repeat(49))?;
        writeln!(f, "{:<20} {:>28.6e}", "baseline", self.rtn.mean)?;
        writeln!(f, "{:<20} {:>28.6e}", "lower", self.lower.mean)?;
        writeln!(f, "{:<20} {:>28.6e}", "upper", self.upper.mean)?;
        writeln!(f, "{}", "-".repeat(49))?;
        let sr = format!("{:.6e} ± {:.3e}", self.stochastic.mean, self.stochastic.std);
        writeln!(f, "{:<20} {:>28}", "stochastic", sr)?;
        writeln!(
            f,
            "{:<20} {:>28.6e}",
            "stochastic (best)", self.stochastic.min
        )?;
        match &self.optimal {
            Some(o) => writeln!(f, "{:<20} {:>28.6e}", "optimal", o.mean)?,
            None => writeln!(f, "{:<20} {:>28}", "optimal", "n/a")?,
        }
        write!(
            f,
            "{} of {} stochastic draws beat the baseline",
            self.stochastic_better_than_rtn, self.stochastic.samples
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub block_size: usize,
    pub max_n: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_samples: 100,
            seed: 0,
            block_size: crate::nvfp4::DEFAULT_BLOCK_SIZE,
            max_n: DEFAULT_MAX_N,
        }
    }
}

/// Evaluates RTN, all-lower, all-upper, `n_samples` stochastic draws and, when
/// the layer is small enough, the exhaustive optimum.
pub fn compare_rounding_study(
    layer: &LinearLayer,
    calib: &[CalibBatch],
    cfg: &StudyConfig,
) -> Result<RoundingReport> {
    if cfg.n_samples == 0 {
        return Err(FaarError::InvalidArgument("n_samples must be ≥ 1".into()));
    }
    if calib.is_empty() {
        return Err(FaarError::InvalidArgument(
            "calibration set is empty".into(),
        ));
    }
    let scales = compute_scales(layer.weights(), cfg.block_size)?;
    let rv = init_rounding_vars(layer.weights(), &scales)?;
    let eval = ReconEvaluator::new(layer, calib);
    let loss_of = |d: &[bool]| eval.eval(&rv.weights_from_decisions(d));

    let rtn = loss_of(&rv.rtn_decisions(layer.weights()));
    let lower = loss_of(&vec![false; rv.len()]);
    let upper = loss_of(&vec![true; rv.len()]);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stochastic_losses: Vec<f64> = (0..cfg.n_samples)
        .map(|_| loss_of(&stochastic_decisions(&rv, &mut rng)))
        .collect();
    let better = stochastic_losses.iter().filter(|&&l| l < rtn).count();

    let optimal = if rv.num_free() <= cfg.max_n {
        let bf = brute_force_vars(layer, calib, &rv, cfg.max_n)?;
        Some(StrategyRow::single("optimal", bf.loss))
    } else {
        None
    };

    Ok(RoundingReport {
        layer: layer.name.clone(),
        metric: "output reconstruction MSE ‖XWᵀ − X_qŴᵀ‖²".into(),
        num_weights: rv.len(),
        num_free: rv.num_free(),
        rtn: StrategyRow::single("baseline", rtn),
        lower: StrategyRow::single("lower", lower),
        upper: StrategyRow::single("upper", upper),
        stochastic: StrategyRow::from_samples("stochastic", &stochastic_losses),
        stochastic_losses,
        stochastic_better_than_rtn: better,
        optimal,
        seeds: vec![cfg.seed],
    })
}
