//! NVFP4 quantization with format-aware adaptive rounding.
//!
//! * [`nvfp4`], [`e4m3`]: the number format (codes, scales, RTN, dequantization).
//! * [`rounding`]: learnable rounding variables, soft rounding and hardening.
//! * [`stage1`]: layer-wise reconstruction optimization.
//! * [`micronet`]: full-model alignment against a full-precision teacher.
//! * [`oracle`]: exhaustive optimum, stochastic rounding and strategy studies.
//! * [`io`], [`config`]: file formats and run configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod config;
pub mod e4m3;
pub mod error;
pub mod io;
pub mod micronet;
pub mod nvfp4;
pub mod oracle;
pub mod pipeline;
pub mod rounding;
pub mod stage1;
pub mod tensor;

pub use config::RunConfig;
pub use e4m3::{e4m3_round, E4M3_MAX, E4M3_MIN_POSITIVE};
pub use error::{FaarError, Result};
pub use micronet::{
    align_model, backprop_stage2, forward, kl_loss, stage2_loss, MicroNet, Mode, Stage2Config,
};
pub use nvfp4::{
    check_export, compute_scales, dequantize, e2m1_decode, find_interval, quantize_rtn,
    ExportCheck, Nvfp4Code, QuantizedTensor, ScaleSet, NODES,
};
pub use oracle::{
    brute_force_optimal, compare_rounding_study, stochastic_round_sample, RoundingReport,
};
pub use rounding::{
    beta_at, clip_vars, harden, init_rounding_vars, round_reg_loss, soft_quantize, soft_round,
    BetaSchedule, RoundingVars,
};
pub use stage1::{
    optimize_layer, quantize_activations, stage1_grad, stage1_loss, CalibBatch, LinearLayer,
    Stage1Config,
};
pub use tensor::Tensor;
