//! `faar` command-line front end.
//!
//! [`dispatch`] runs one invocation in-process and returns the exit code, so
//! tests can drive the tool without spawning a binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use faar_core::io::{
    load_micronet, load_packed_model, load_rounding_vars, load_tensor, pack_nvfp4, save_micronet,
    save_packed_model, save_rounding_vars, save_tensor, stage1_trace_csv, stage2_trace_csv,
    unpack_nvfp4, write_atomic, write_json,
};
use faar_core::micronet::{forward, hardened_kl, Mode};
use faar_core::oracle::{brute_force_optimal, compare_rounding_study};
use faar_core::pipeline::{gaussian_matrix, run_stage1};
use faar_core::rounding::harden_quantized;
use faar_core::stage1::ReconEvaluator;
use faar_core::{
    align_model, check_export, compute_scales, dequantize, optimize_layer, quantize_rtn,
    CalibBatch, ExportCheck, FaarError, LinearLayer, MicroNet, QuantizedTensor, Result,
    RoundingVars, RunConfig, Tensor,
};

/// Exit code for runtime failures (bad files, invalid config, ...).
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for command-line usage errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "faar",
    version,
    about = "NVFP4 quantization with format-aware adaptive rounding"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Flags override `--config`.
#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run configuration (unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "FAAR_OUT_DIR", default_value = "faar-out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Optimization steps of the stage being run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Learning rate of the stage being run.
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    lambda_round: Option<f64>,
    #[arg(long, global = true)]
    lambda_kl: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    beta_start: Option<f64>,
    #[arg(long, global = true)]
    beta_end: Option<f64>,
    #[arg(long, global = true)]
    block_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Round-to-nearest NVFP4 export of a tensor or a model.
    QuantizeRtn(Source),
    /// Layer-wise rounding optimization; writes `.rv` checkpoints and traces.
    FaarStage1 {
        #[command(flatten)]
        source: Source,
        /// Layer input activations (with --weights) or model inputs (with --model).
        #[arg(long)]
        calib: PathBuf,
    },
    /// Joint alignment of all layers against the full-precision model.
    FaarStage2 {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding one `<layer>.rv` per model layer.
        #[arg(long)]
        rv_dir: PathBuf,
        #[arg(long)]
        calib: PathBuf,
    },
    /// Threshold rounding variables at 0.5 and write packed NVFP4.
    Harden {
        #[command(flatten)]
        source: Source,
        /// Checkpoint for --weights.
        #[arg(long, conflicts_with = "model")]
        rv: Option<PathBuf>,
        /// Checkpoint directory for --model.
        #[arg(long, conflicts_with = "weights")]
        rv_dir: Option<PathBuf>,
    },
    /// Exhaustive optimal rounding of a small layer.
    Oracle {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        max_n: Option<usize>,
    },
    /// Compare RTN, lower, upper, stochastic and (small layers) optimal rounding.
    Study {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Number of stochastic draws.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        max_n: Option<usize>,
    },
    /// Reconstruction error of a packed export against the original.
    EvalRecon {
        /// Packed tensor (with --weights) or packed manifest (with --model).
        #[arg(long)]
        packed: PathBuf,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        calib: PathBuf,
    },
    /// Write a small random teacher network and calibration inputs.
    Demo {
        /// Rows of calibration data.
        #[arg(long, default_value_t = 256)]
        rows: usize,
    },
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// A single weight tensor `[out, in]`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// A model manifest.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    One,
    Two,
    Other,
}

impl Common {
    fn run_config(&self, stage: Stage) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_path(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.block_size {
            cfg.block_size = b;
        }
        match stage {
            Stage::One => {
                let s1 = &mut cfg.stage1;
                set(&mut s1.steps, self.steps);
                set(&mut s1.learning_rate, self.lr);
                set(&mut s1.lambda_round, self.lambda_round);
                set(&mut s1.beta_start, self.beta_start);
                set(&mut s1.beta_end, self.beta_end);
            }
            Stage::Two => {
                let s2 = &mut cfg.stage2;
                set(&mut s2.steps, self.steps);
                set(&mut s2.learning_rate, self.lr);
                set(&mut s2.lambda_round, self.lambda_round);
                set(&mut s2.beta_start, self.beta_start);
                set(&mut s2.beta_end, self.beta_end);
            }
            Stage::Other => {}
        }
        set(&mut cfg.stage2.lambda_kl, self.lambda_kl);
        set(&mut cfg.stage2.tau, self.tau);
        cfg.resolved()
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Errors go to stderr as one JSON object.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.render().to_string());
            return EXIT_USAGE;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            0
        }
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            EXIT_FAILURE
        }
    }
}

fn report_error(kind: &str, message: &str) {
    let v = json!({ "error": kind, "message": message.trim_end() });
    eprintln!("{v}");
}

fn run(cli: &Cli) -> Result<Value> {
    let c = &cli.common;
    match &cli.command {
        Command::QuantizeRtn(src) => quantize_rtn_cmd(c, src),
        Command::FaarStage1 { source, calib } => stage1_cmd(c, source, calib),
        Command::FaarStage2 {
            model,
            rv_dir,
            calib,
        } => stage2_cmd(c, model, rv_dir, calib),
        Command::Harden { source, rv, rv_dir } => {
            harden_cmd(c, source, rv.as_deref(), rv_dir.as_deref())
        }
        Command::Oracle {
            weights,
            calib,
            max_n,
        } => oracle_cmd(c, weights, calib, *max_n),
        Command::Study {
            weights,
            calib,
            samples,
            max_n,
        } => study_cmd(c, weights, calib, *samples, *max_n),
        Command::EvalRecon {
            packed,
            source,
            calib,
        } => eval_cmd(c, packed, source, calib),
        Command::Demo { rows } => demo_cmd(c, *rows),
    }
}

/// Creates the output directory, refuses to overwrite any input and writes the
/// resolved config.
struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
}

impl Outputs {
    fn new(common: &Common, cfg: &RunConfig, inputs: &[&Path]) -> Result<Self> {
        let dir = common.out.clone();
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let inputs = inputs
            .iter()
            .filter_map(|p| p.canonicalize().ok())
            .collect();
        let out = Outputs { dir, inputs };
        out.write("config.json", cfg.to_json_pretty().as_bytes())?;
        Ok(out)
    }

    fn path(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Ok(canon) = p.canonicalize() {
            if self.inputs.contains(&canon) {
                return Err(FaarError::InvalidArgument(format!(
                    "refusing to overwrite input file {}",
                    p.display()
                )));
            }
        }
        Ok(p)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path(name)?;
        write_atomic(&p, bytes)?;
        Ok(p)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> FaarError {
    FaarError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tensor".into())
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn load_layer(path: &Path) -> Result<LinearLayer> {
    let w = load_tensor(path)?;
    w.dims2()?;
    LinearLayer::new(stem(path), w)
}

fn load_calib(path: &Path, layer: &LinearLayer, block_size: usize) -> Result<CalibBatch> {
    let x = load_tensor(path)?;
    let (_, cols) = x.dims2()?;
    if cols != layer.in_dim() {
        return Err(FaarError::ShapeMismatch(format!(
            "calibration has {cols} features, layer {} expects {}",
            layer.name,
            layer.in_dim()
        )));
    }
    CalibBatch::new(x, block_size)
}

fn checked(q: &QuantizedTensor, name: &str) -> Result<ExportCheck> {
    let check = check_export(q)?;
    if !check.is_clean() {
        return Err(FaarError::InvalidArgument(format!(
            "export of {name} failed validation: {check:?}"
        )));
    }
    Ok(check)
}

fn quantize_rtn_cmd(c: &Common, src: &Source) -> Result<Value> {
    let cfg = c.run_config(Stage::Other)?;
    let bs = cfg.block_size;
    if let Some(w_path) = &src.weights {
        let out = Outputs::new(c, &cfg, &[w_path])?;
        let w = load_tensor(w_path)?;
        let q = quantize_rtn(&w, &compute_scales(&w, bs)?)?;
        checked(&q, &stem(w_path))?;
        let p = out.path(&format!("{}.nvf4", stem(w_path)))?;
        pack_nvfp4(&q, &p)?;
        Ok(json!({ "command": "quantize-rtn", "packed": show(&p) }))
    } else {
        let m = src.model.as_ref().expect("clap group");
        let (net, paths) = load_micronet(m)?;
        let mut inputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        inputs.push(m);
        let out = Outputs::new(c, &cfg, &inputs)?;
        let mut names = Vec::new();
        let mut qs = Vec::new();
        for l in net.layers() {
            let q = quantize_rtn(l.weights(), &compute_scales(l.weights(), bs)?)?;
            checked(&q, &l.name)?;
            names.push(l.name.clone());
            qs.push(q);
        }
        let p = out.path("packed.json")?;
        save_packed_model(&names, &qs, bs, &p)?;
        Ok(json!({ "command": "quantize-rtn", "packed": show(&p) }))
    }
}

fn stage1_cmd(c: &Common, src: &Source, calib: &Path) -> Result<Value> {
    let cfg = c.run_config(Stage::One)?;
    if let Some(w_path) = &src.weights {
        let out = Outputs::new(c, &cfg, &[w_path, calib])?;
        let layer = load_layer(w_path)?;
        let batch = load_calib(calib, &layer, cfg.block_size)?;
        let res = optimize_layer(&layer, std::slice::from_ref(&batch), &cfg.stage1)?;
        let rv_path = out.path(&format!("{}.rv", layer.name))?;
        save_rounding_vars(&res.vars, &layer.name, &show(w_path), &rv_path)?;
        let trace = out.write(
            &format!("{}.stage1.csv", layer.name),
            stage1_trace_csv(&res.trace).as_bytes(),
        )?;
        let last = res.trace.last().expect("trace");
        Ok(json!({
            "command": "faar-stage1",
            "layers": [{
                "name": layer.name,
                "rv": show(&rv_path),
                "trace": show(&trace),
                "final_mse_term": last.mse_term,
            }],
        }))
    } else {
        let m = src.model.as_ref().expect("clap group");
        let (net, paths) = load_micronet(m)?;
        let mut inputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        inputs.extend([m.as_path(), calib]);
        let out = Outputs::new(c, &cfg, &inputs)?;
        let data = load_tensor(calib)?;
        let results = run_stage1(&net, &data, &cfg.stage1)?;
        let mut layers = Vec::new();
        for ((l, res), src_path) in net.layers().iter().zip(&results).zip(&paths) {
            let rv_path = out.path(&format!("{}.rv", l.name))?;
            save_rounding_vars(&res.vars, &l.name, &show(src_path), &rv_path)?;
            let trace = out.write(
                &format!("{}.stage1.csv", l.name),
                stage1_trace_csv(&res.trace).as_bytes(),
            )?;
            layers.push(json!({
                "name": l.name,
                "rv": show(&rv_path),
                "trace": show(&trace),
                "final_mse_term": res.trace.last().expect("trace").mse_term,
            }));
        }
        Ok(json!({ "command": "faar-stage1", "layers": layers }))
    }
}

fn load_model_vars(net: &MicroNet, rv_dir: &Path) -> Result<(Vec<RoundingVars>, Vec<PathBuf>)> {
    let mut vars = Vec::new();
    let mut paths = Vec::new();
    for l in net.layers() {
        let p = rv_dir.join(format!("{}.rv", l.name));
        let (rv, meta) = load_rounding_vars(&p, l.weights())?;
        if meta.layer != l.name {
            return Err(FaarError::InvalidArgument(format!(
                "{} holds layer {:?}, expected {:?}",
                p.display(),
                meta.layer,
                l.name
            )));
        }
        vars.push(rv);
        paths.push(p);
    }
    Ok((vars, paths))
}

fn stage2_cmd(c: &Common, model: &Path, rv_dir: &Path, calib: &Path) -> Result<Value> {
    let cfg = c.run_config(Stage::Two)?;
    let (net, w_paths) = load_micronet(model)?;
    let (vars, rv_paths) = load_model_vars(&net, rv_dir)?;
    let mut inputs: Vec<&Path> = w_paths
        .iter()
        .chain(&rv_paths)
        .map(PathBuf::as_path)
        .collect();
    inputs.extend([model, calib]);
    let out = Outputs::new(c, &cfg, &inputs)?;
    let data = load_tensor(calib)?;
    let s2 = &cfg.stage2;
    let kl_before = hardened_kl(&net, &data, &vars, s2.tau, s2.act_block())?;
    let schedule = s2.schedule(cfg.stage1.beta_end)?;
    let res = align_model(&net, vars, &data, s2, &schedule)?;
    let kl_after = hardened_kl(&net, &data, &res.vars, s2.tau, s2.act_block())?;
    let mut layers = Vec::new();
    for ((l, rv), src_path) in net.layers().iter().zip(&res.vars).zip(&w_paths) {
        let p = out.path(&format!("{}.rv", l.name))?;
        save_rounding_vars(rv, &l.name, &show(src_path), &p)?;
        layers.push(show(&p));
    }
    let trace = out.write("stage2.csv", stage2_trace_csv(&res.trace).as_bytes())?;
    Ok(json!({
        "command": "faar-stage2",
        "rv": layers,
        "trace": show(&trace),
        "hardened_kl_before": kl_before,
        "hardened_kl_after": kl_after,
    }))
}

fn harden_cmd(c: &Common, src: &Source, rv: Option<&Path>, rv_dir: Option<&Path>) -> Result<Value> {
    let cfg = c.run_config(Stage::Other)?;
    if let Some(w_path) = &src.weights {
        let rv_path =
            rv.ok_or_else(|| FaarError::InvalidArgument("--weights needs --rv".into()))?;
        let out = Outputs::new(c, &cfg, &[w_path, rv_path])?;
        let w = load_tensor(w_path)?;
        let (vars, meta) = load_rounding_vars(rv_path, &w)?;
        let q = harden_quantized(&vars)?;
        let check = checked(&q, &meta.layer)?;
        let p = out.path(&format!("{}.nvf4", meta.layer))?;
        pack_nvfp4(&q, &p)?;
        Ok(json!({ "command": "harden", "packed": show(&p), "check": check }))
    } else {
        let m = src.model.as_ref().expect("clap group");
        let dir =
            rv_dir.ok_or_else(|| FaarError::InvalidArgument("--model needs --rv-dir".into()))?;
        let (net, w_paths) = load_micronet(m)?;
        let (vars, rv_paths) = load_model_vars(&net, dir)?;
        let mut inputs: Vec<&Path> = w_paths
            .iter()
            .chain(&rv_paths)
            .map(PathBuf::as_path)
            .collect();
        inputs.push(m);
        let out = Outputs::new(c, &cfg, &inputs)?;
        let mut names = Vec::new();
        let mut qs = Vec::new();
        for (l, rv) in net.layers().iter().zip(&vars) {
            let q = harden_quantized(rv)?;
            checked(&q, &l.name)?;
            names.push(l.name.clone());
            qs.push(q);
        }
        let block_size = vars[0].scales().block_size;
        let p = out.path("packed.json")?;
        save_packed_model(&names, &qs, block_size, &p)?;
        Ok(json!({ "command": "harden", "packed": show(&p), "check": ExportCheck::default() }))
    }
}

#[derive(Serialize)]
struct OracleReport {
    layer: String,
    num_weights: usize,
    num_free: usize,
    optimal_loss: f64,
    rtn_loss: f64,
    /// Upper-node decisions over the free weights, in element order.
    decisions: Vec<bool>,
}

fn oracle_cmd(c: &Common, weights: &Path, calib: &Path, max_n: Option<usize>) -> Result<Value> {
    let cfg = c.run_config(Stage::Other)?;
    let out = Outputs::new(c, &cfg, &[weights, calib])?;
    let layer = load_layer(weights)?;
    let batch = load_calib(calib, &layer, cfg.block_size)?;
    let batches = std::slice::from_ref(&batch);
    let scales = compute_scales(layer.weights(), cfg.block_size)?;
    let bf = brute_force_optimal(&layer, batches, &scales, max_n.unwrap_or(cfg.study.max_n))?;
    let rtn = dequantize(&quantize_rtn(layer.weights(), &scales)?);
    let report = OracleReport {
        layer: layer.name.clone(),
        num_weights: layer.weights().len(),
        num_free: bf.num_free,
        optimal_loss: bf.loss,
        rtn_loss: ReconEvaluator::new(&layer, batches).eval(rtn.data()),
        decisions: bf.decisions,
    };
    let p = out.path("oracle.json")?;
    write_json(&report, &p)?;
    Ok(json!({ "command": "oracle", "report": show(&p), "optimal_loss": report.optimal_loss }))
}

fn study_cmd(
    c: &Common,
    weights: &Path,
    calib: &Path,
    samples: Option<usize>,
    max_n: Option<usize>,
) -> Result<Value> {
    let mut cfg = c.run_config(Stage::Other)?;
    set(&mut cfg.study.n_samples, samples);
    set(&mut cfg.study.max_n, max_n);
    let cfg = cfg.resolved()?;
    let out = Outputs::new(c, &cfg, &[weights, calib])?;
    let layer = load_layer(weights)?;
    let batch = load_calib(calib, &layer, cfg.block_size)?;
    let report = compare_rounding_study(&layer, std::slice::from_ref(&batch), &cfg.study_config())?;
    let json_path = out.path("study.json")?;
    write_json(&report, &json_path)?;
    let text = out.write("study.txt", report.to_string().as_bytes())?;
    Ok(json!({
        "command": "study",
        "report": show(&json_path),
        "table": show(&text),
        "rtn": report.rtn.mean,
        "stochastic_best": report.stochastic_best(),
        "optimal": report.optimal.as_ref().map(|r| r.mean),
    }))
}

#[derive(Serialize)]
struct LayerEval {
    name: String,
    /// `‖XWᵀ − X_qŴᵀ‖²` on the layer's calibration inputs.
    recon_mse: f64,
    /// `‖W − Ŵ‖²`.
    weight_sq_err: f64,
}

fn layer_eval(layer: &LinearLayer, q: &QuantizedTensor, batch: &CalibBatch) -> Result<LayerEval> {
    if q.shape() != layer.weights().shape() {
        return Err(FaarError::ShapeMismatch(format!(
            "packed {:?} vs weights {:?} for {}",
            q.shape(),
            layer.weights().shape(),
            layer.name
        )));
    }
    let w_hat = dequantize(q);
    let weight_sq_err = layer
        .weights()
        .data()
        .iter()
        .zip(w_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(LayerEval {
        name: layer.name.clone(),
        recon_mse: ReconEvaluator::new(layer, std::slice::from_ref(batch)).eval(w_hat.data()),
        weight_sq_err,
    })
}

fn eval_cmd(c: &Common, packed: &Path, src: &Source, calib: &Path) -> Result<Value> {
    let cfg = c.run_config(Stage::Other)?;
    if let Some(w_path) = &src.weights {
        let out = Outputs::new(c, &cfg, &[packed, w_path, calib])?;
        let layer = load_layer(w_path)?;
        let batch = load_calib(calib, &layer, cfg.block_size)?;
        let q = unpack_nvfp4(packed)?;
        let e = layer_eval(&layer, &q, &batch)?;
        let report = json!({ "mse": e.recon_mse, "layers": [e] });
        let p = out.path("eval.json")?;
        write_json(&report, &p)?;
        Ok(json!({ "command": "eval-recon", "report": show(&p), "mse": report["mse"] }))
    } else {
        let m = src.model.as_ref().expect("clap group");
        let (net, w_paths) = load_micronet(m)?;
        let mut inputs: Vec<&Path> = w_paths.iter().map(PathBuf::as_path).collect();
        inputs.extend([m.as_path(), packed, calib]);
        let out = Outputs::new(c, &cfg, &inputs)?;
        let (_, qs) = load_packed_model(packed)?;
        if qs.len() != net.layers().len() {
            return Err(FaarError::ShapeMismatch(format!(
                "packed model has {} layers, model has {}",
                qs.len(),
                net.layers().len()
            )));
        }
        let data = load_tensor(calib)?;
        let calib_batches = faar_core::pipeline::teacher_calibration(&net, &data, cfg.block_size)?;
        let layers = net
            .layers()
            .iter()
            .zip(&qs)
            .zip(&calib_batches)
            .map(|((l, q), b)| layer_eval(l, q, b))
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<Tensor> = qs.iter().map(dequantize).collect();
        let s2 = &cfg.stage2;
        let teacher = forward(&net, &data, Mode::FullPrecision, s2.tau)?;
        let student = forward(
            &net,
            &data,
            Mode::Fixed {
                weights: &weights,
                act_block: s2.act_block(),
            },
            s2.tau,
        )?;
        let sq = |a: &Tensor, b: &Tensor| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        };
        let hidden_mse = sq(&teacher.hidden, &student.hidden);
        let report = json!({
            "mse": hidden_mse,
            "hidden_mse": hidden_mse,
            "logits_mse": sq(&teacher.logits, &student.logits),
            "kl": faar_core::kl_loss(&teacher.probs, &student.probs)?,
            "layers": layers,
        });
        let p = out.path("eval.json")?;
        write_json(&report, &p)?;
        Ok(json!({
            "command": "eval-recon",
            "report": show(&p),
            "mse": report["mse"],
            "kl": report["kl"],
        }))
    }
}

fn demo_cmd(c: &Common, rows: usize) -> Result<Value> {
    if rows == 0 {
        return Err(FaarError::InvalidArgument("--rows must be ≥ 1".into()));
    }
    let cfg = c.run_config(Stage::Other)?;
    let out = Outputs::new(c, &cfg, &[])?;
    let net = MicroNet::random(&faar_core::micronet::DEFAULT_DIMS, cfg.seed)?;
    let manifest = out.path("model.json")?;
    save_micronet(&net, &manifest)?;
    let data = gaussian_matrix(rows, net.in_dim(), cfg.seed.wrapping_add(1));
    let calib = out.path("calib.tensor")?;
    save_tensor(&data, "calib", &calib)?;
    // A layer small enough for the exhaustive oracle: 9 weights in one block,
    // one of which (the block maximum) is usually frozen.
    let tiny = gaussian_matrix(1, 9, cfg.seed.wrapping_add(2));
    let tiny_path = out.path("tiny.tensor")?;
    save_tensor(&tiny, "tiny", &tiny_path)?;
    let tiny_calib = out.path("tiny_calib.tensor")?;
    save_tensor(
        &gaussian_matrix(rows, 9, cfg.seed.wrapping_add(3)),
        "tiny_calib",
        &tiny_calib,
    )?;
    Ok(json!({
        "command": "demo",
        "model": show(&manifest),
        "calib": show(&calib),
        "tiny": show(&tiny_path),
        "tiny_calib": show(&tiny_calib),
    }))
}
