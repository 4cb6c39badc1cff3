//! Glue for running both stages over a [`MicroNet`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::Result;
use crate::micronet::{align_model, MicroNet, Stage2Result};
use crate::nvfp4::compute_scales;
use crate::rounding::{init_rounding_vars, RoundingVars};
use crate::stage1::{optimize_layer, CalibBatch, LayerResult, Stage1Config};
use crate::tensor::Tensor;

/// `rows × cols` standard normal samples.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("non-empty")
}

/// Per-layer calibration batches: the teacher's full-precision input to each
/// layer, with RTN-quantized copies.
pub fn teacher_calibration(
    net: &MicroNet,
    data: &Tensor,
    block_size: usize,
) -> Result<Vec<CalibBatch>> {
    net.layer_inputs(data)?
        .into_iter()
        .map(|x| CalibBatch::new(x, block_size))
        .collect()
}

/// Stage 1 on every layer independently (in parallel).
pub fn run_stage1(net: &MicroNet, data: &Tensor, cfg: &Stage1Config) -> Result<Vec<LayerResult>> {
    let calib = teacher_calibration(net, data, cfg.block_size)?;
    net.layers()
        .par_iter()
        .zip(calib.par_iter())
        .map(|(layer, batch)| optimize_layer(layer, std::slice::from_ref(batch), cfg))
        .collect()
}

/// Rounding variables whose hardened weights equal RTN.
pub fn rtn_vars(net: &MicroNet, block_size: usize) -> Result<Vec<RoundingVars>> {
    net.layers()
        .iter()
        .map(|l| {
            let scales = compute_scales(l.weights(), block_size)?;
            let mut rv = init_rounding_vars(l.weights(), &scales)?;
            let v: Vec<f64> = rv
                .rtn_decisions(l.weights())
                .iter()
                .map(|&d| if d { 1.0 } else { 0.0 })
                .collect();
            rv.set_v(&v)?;
            Ok(rv)
        })
        .collect()
}

pub struct PipelineResult {
    pub stage1: Vec<LayerResult>,
    pub stage2: Stage2Result,
}

/// Stage 1 followed by Stage 2 with the configured schedules.
pub fn run_pipeline(net: &MicroNet, data: &Tensor, cfg: &RunConfig) -> Result<PipelineResult> {
    let stage1 = run_stage1(net, data, &cfg.stage1)?;
    let vars = stage1.iter().map(|r| r.vars.clone()).collect();
    let schedule = cfg.stage2.schedule(cfg.stage1.beta_end)?;
    let stage2 = align_model(net, vars, data, &cfg.stage2, &schedule)?;
    Ok(PipelineResult { stage1, stage2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::{forward, Mode};
    use crate::nvfp4::{dequantize, quantize_rtn};
    use crate::rounding::harden;

    #[test]
    fn rtn_vars_harden_to_rtn() {
        let net = MicroNet::random(&[8, 12, 4], 2).unwrap();
        let vars = rtn_vars(&net, 16).unwrap();
        for (rv, l) in vars.iter().zip(net.layers()) {
            let s = compute_scales(l.weights(), 16).unwrap();
            assert_eq!(
                harden(rv).1,
                dequantize(&quantize_rtn(l.weights(), &s).unwrap())
            );
        }
    }

    #[test]
    fn calibration_matches_teacher_inputs() {
        let net = MicroNet::random(&[8, 12, 4], 2).unwrap();
        let x = gaussian_matrix(5, 8, 1);
        let calib = teacher_calibration(&net, &x, 16).unwrap();
        assert_eq!(calib[0].x(), &x);
        let out = forward(&net, &x, Mode::FullPrecision, 1.0).unwrap();
        assert_eq!(calib[1].x(), &out.hidden);
    }
}
