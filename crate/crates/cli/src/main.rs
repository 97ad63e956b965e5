use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use iosvd::harness::{
    calibrate, evaluate, prepare, run_prepared, sweep_csv, sweep_k, verify_suite, RunConfig,
    ToyShape,
};
use iosvd::io::{
    read_any_model, read_calibration, read_model, read_plan, read_stats, write_calibration,
    write_hybrid, write_model, write_plan, write_stats, AnyModel,
};
use iosvd::netmodel::{calibration_loss_and_gradients, Activation, Network};
use iosvd::rank_alloc::{allocate, materialize, CompressionPlan};
use iosvd::remap::{apply_remap, RemapBudget, RemapMode};
use iosvd::whiten::WhiteningMode;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const MODEL_FILE: &str = "model.iosvd";
const CALIB_FILE: &str = "calib.iosvd";
const COMPRESSED_FILE: &str = "compressed.iosvd";
const HYBRID_FILE: &str = "hybrid.iosvd";
const PLAN_FILE: &str = "plan.json";

#[derive(Parser, Debug)]
#[command(
    name = "iosvd",
    version,
    about = "Curvature-whitened low-rank compression for small networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded toy model and calibration set into a directory.
    Gen {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        shape: ShapeFlags,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate whitening statistics for every target layer.
    Calibrate {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        inputs: ModelInputs,
        /// Output stats file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Allocate ranks and write the plan and the truncated model.
    Compress {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        stats: PathBuf,
        /// Reuse an existing plan instead of allocating.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize factor rows into int8 until the byte budget is met.
    Remap {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        inputs: ModelInputs,
        /// Truncated model to remap directly (plain and loss modes).
        #[arg(long)]
        compressed: Option<PathBuf>,
        /// Stats file; required when no truncated model is given.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a candidate model against the original.
    Eval {
        #[command(flatten)]
        inputs: ModelInputs,
        /// Truncated or hybrid model file.
        #[arg(long)]
        candidate: PathBuf,
        /// Plan file whose drop history is summarized in the report.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Include wall-clock timings (makes the report nondeterministic).
        #[arg(long)]
        timings: bool,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle checks and print them as a JSON array.
    Verify {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the curvature top-K and report KL per K as CSV.
    SweepK {
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        inputs: ModelInputs,
        /// Comma-separated list of K values.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ModelInputs {
    /// Original model file.
    #[arg(long)]
    model: PathBuf,
    /// Calibration file.
    #[arg(long)]
    calib: PathBuf,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maintenance ratio: kept fraction, so 0.4 means 60% pruning.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Relative damping of the input statistic.
    #[arg(long)]
    damping_r: Option<f64>,
    /// Relative damping of the output statistic.
    #[arg(long)]
    damping_c: Option<f64>,
    #[arg(long, value_enum)]
    whitening: Option<WhiteningArg>,
    #[arg(long, value_enum)]
    remap: Option<RemapArg>,
}

#[derive(Args, Debug)]
struct ShapeFlags {
    #[arg(long, default_value_t = 48)]
    input_dim: usize,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 24)]
    vocab: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Tanh)]
    activation: ActivationArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WhiteningArg {
    None,
    Input,
    Double,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RemapArg {
    Off,
    Plain,
    Loss,
    Hq,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActivationArg {
    Tanh,
    Relu,
    Gelu,
}

impl From<WhiteningArg> for WhiteningMode {
    fn from(w: WhiteningArg) -> Self {
        match w {
            WhiteningArg::None => WhiteningMode::None,
            WhiteningArg::Input => WhiteningMode::InputOnly,
            WhiteningArg::Double => WhiteningMode::DoubleSided,
        }
    }
}

impl From<RemapArg> for RemapMode {
    fn from(r: RemapArg) -> Self {
        match r {
            RemapArg::Off => RemapMode::Off,
            RemapArg::Plain => RemapMode::Plain,
            RemapArg::Loss => RemapMode::LossAware,
            RemapArg::Hq => RemapMode::Hq,
        }
    }
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Gelu => Activation::Gelu,
        }
    }
}

/// Errors that map to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

/// Outputs were written but an invariant or budget was not met.
struct Failed(String);

type CmdResult = anyhow::Result<Result<(), Failed>>;

impl RunFlags {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| ConfigError(format!("config {}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.ratio {
            cfg.ratio = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.top_k {
            cfg.top_k = Some(v);
        }
        if let Some(v) = self.damping_r {
            cfg.damping_r = v;
        }
        if let Some(v) = self.damping_c {
            cfg.damping_c = v;
        }
        if let Some(v) = self.whitening {
            cfg.whitening = v.into();
        }
        if let Some(v) = self.remap {
            cfg.remap = v.into();
        }
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}

fn load_inputs(
    inputs: &ModelInputs,
) -> anyhow::Result<(Network, iosvd::netmodel::CalibrationBatch)> {
    let net = read_model(&inputs.model)
        .with_context(|| format!("reading model {}", inputs.model.display()))?;
    let batch = read_calibration(&inputs.calib)
        .with_context(|| format!("reading calibration {}", inputs.calib.display()))?;
    Ok((net, batch))
}

fn write_text(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn check_plan_shapes(net: &Network, plan: &CompressionPlan) -> anyhow::Result<()> {
    let targets = net.target_layers();
    if plan.layers.len() != targets.len() {
        bail!(ConfigError(format!(
            "plan has {} layers, model has {} target layers",
            plan.layers.len(),
            targets.len()
        )));
    }
    for lp in &plan.layers {
        let w = net
            .layer(lp.layer)
            .effective_weight()
            .ok_or_else(|| ConfigError(format!("plan layer {} is not linear", lp.layer)))?;
        if w.shape() != (lp.rows, lp.cols) {
            bail!(ConfigError(format!(
                "plan layer {} is {}x{}, model layer is {}x{}",
                lp.layer,
                lp.rows,
                lp.cols,
                w.rows(),
                w.cols()
            )));
        }
    }
    Ok(())
}

fn budget_check(plan: &CompressionPlan) -> Result<(), Failed> {
    if plan.budget_reached {
        Ok(())
    } else {
        Err(Failed(format!(
            "removal budget unreachable: removed {} of {} parameters",
            plan.removed_params, plan.target_removed
        )))
    }
}

fn cmd_gen(run: &RunFlags, shape: &ShapeFlags, out: &Path) -> CmdResult {
    let cfg = run.resolve()?;
    let shape = ToyShape {
        input_dim: shape.input_dim,
        hidden: shape.hidden.clone(),
        vocab_size: shape.vocab,
        tokens: shape.tokens,
        activation: shape.activation.into(),
    };
    let (net, batch) = iosvd::harness::generate_toy(cfg.seed, &shape)
        .map_err(|e| ConfigError(format!("invalid shape: {e}")))?;
    create_dir(out)?;
    write_model(&out.join(MODEL_FILE), &net)?;
    write_calibration(&out.join(CALIB_FILE), &batch)?;
    eprintln!(
        "wrote {} target layers, vocab {}, {} tokens to {}",
        net.target_layers().len(),
        net.vocab_size(),
        batch.len(),
        out.display()
    );
    Ok(Ok(()))
}

fn cmd_calibrate(run: &RunFlags, inputs: &ModelInputs, out: &Path) -> CmdResult {
    let cfg = run.resolve()?;
    let (net, batch) = load_inputs(inputs)?;
    let stats = calibrate(&net, &batch, &cfg)?;
    write_stats(out, &stats)?;
    eprintln!(
        "wrote statistics for {} layers (K = {})",
        stats.stats.len(),
        stats.top_k
    );
    Ok(Ok(()))
}

fn cmd_compress(
    run: &RunFlags,
    inputs: &ModelInputs,
    stats_path: &Path,
    plan_path: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let cfg = run.resolve()?;
    let (net, batch) = load_inputs(inputs)?;
    let stats = read_stats(stats_path)?;
    let prepared = prepare(&net, &batch, &stats.stats, cfg.whitening)?;
    let plan = match plan_path {
        Some(p) => {
            let plan = read_plan(p)?;
            check_plan_shapes(&net, &plan)?;
            plan
        }
        None => allocate(
            &prepared.factorizations,
            &prepared.whitened_grads,
            cfg.pruning_ratio(),
            cfg.eta,
        )?,
    };
    let compressed = materialize(&net, &plan, &prepared.factorizations)?;
    create_dir(out)?;
    write_plan(&out.join(PLAN_FILE), &plan)?;
    write_model(&out.join(COMPRESSED_FILE), &compressed)?;
    if plan.recount_removed() != plan.removed_params {
        return Ok(Err(Failed(format!(
            "parameter ledger {} disagrees with recount {}",
            plan.removed_params,
            plan.recount_removed()
        ))));
    }
    eprintln!(
        "removed {} of {} target parameters (target {})",
        plan.removed_params, plan.total_params, plan.target_removed
    );
    Ok(budget_check(&plan))
}

fn cmd_remap(
    run: &RunFlags,
    inputs: &ModelInputs,
    compressed_path: Option<&Path>,
    stats_path: Option<&Path>,
    out: &Path,
) -> CmdResult {
    let cfg = run.resolve()?;
    if cfg.remap == RemapMode::Off {
        bail!(ConfigError("remap needs --remap plain, loss or hq".into()));
    }
    let (net, batch) = load_inputs(inputs)?;
    match (compressed_path, cfg.remap) {
        (Some(path), RemapMode::Plain | RemapMode::LossAware) => {
            let compressed = read_model(path)?;
            let budget = RemapBudget::for_models(&net, &compressed, cfg.ratio)?;
            let grads = calibration_loss_and_gradients(&compressed, &batch)?.grads;
            let hybrid = match apply_remap(&compressed, &grads, &budget, cfg.remap) {
                Ok(h) => h,
                Err(e @ iosvd::Error::BudgetShortfall { .. }) => {
                    return Ok(Err(Failed(e.to_string())))
                }
                Err(e) => return Err(e.into()),
            };
            create_dir(out)?;
            write_hybrid(&out.join(HYBRID_FILE), &hybrid)?;
            eprintln!(
                "quantized {} rows, {} bytes (target {})",
                hybrid.quantized_row_count(),
                hybrid.byte_count(),
                budget.c_target
            );
            Ok(Ok(()))
        }
        (Some(_), _) => bail!(ConfigError(
            "hq remap recompresses from statistics; pass --stats instead of --compressed".into()
        )),
        (None, _) => {
            let stats_path = stats_path
                .ok_or_else(|| ConfigError("remap needs --compressed or --stats".into()))?;
            let stats = read_stats(stats_path)?;
            let prepared = prepare(&net, &batch, &stats.stats, cfg.whitening)?;
            let output = match run_prepared(&net, &batch, &prepared, &cfg) {
                Ok(o) => o,
                Err(e @ iosvd::Error::BudgetShortfall { .. }) => {
                    return Ok(Err(Failed(e.to_string())))
                }
                Err(e) => return Err(e.into()),
            };
            let hybrid = output.hybrid.as_ref().expect("remap mode is on");
            create_dir(out)?;
            write_plan(&out.join(PLAN_FILE), &output.plan)?;
            write_hybrid(&out.join(HYBRID_FILE), hybrid)?;
            eprintln!(
                "truncation ratio {:.2}, quantized {} rows, {} bytes",
                output.svd_ratio,
                hybrid.quantized_row_count(),
                hybrid.byte_count()
            );
            Ok(budget_check(&output.plan))
        }
    }
}

fn cmd_eval(
    inputs: &ModelInputs,
    candidate_path: &Path,
    plan_path: Option<&Path>,
    timings: bool,
    out: Option<&Path>,
) -> CmdResult {
    let start = Instant::now();
    let (net, batch) = load_inputs(inputs)?;
    let candidate = read_any_model(candidate_path)
        .with_context(|| format!("reading candidate {}", candidate_path.display()))?;
    let plan = plan_path.map(read_plan).transpose()?;
    let loaded = start.elapsed();
    let hybrid = match &candidate {
        AnyModel::Hybrid(h) => Some(h),
        AnyModel::Plain(_) => None,
    };
    let mut report = evaluate(&net, &candidate.network()?, hybrid, &batch, plan.as_ref())?;
    if timings {
        let mut t = BTreeMap::new();
        t.insert("load".to_string(), loaded.as_secs_f64() * 1e3);
        t.insert(
            "evaluate".to_string(),
            (start.elapsed() - loaded).as_secs_f64() * 1e3,
        );
        report.timings_ms = Some(t);
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_text(out, &text)?;
    if !report.totals_consistent() {
        return Ok(Err(Failed(
            "report totals disagree with per-layer entries".into(),
        )));
    }
    Ok(Ok(()))
}

fn cmd_verify(run: &RunFlags, inputs: &ModelInputs, out: Option<&Path>) -> CmdResult {
    let cfg = run.resolve()?;
    let (net, batch) = load_inputs(inputs)?;
    let reports = verify_suite(&net, &batch, &cfg)?;
    let mut text = serde_json::to_string_pretty(&reports)?;
    text.push('\n');
    write_text(out, &text)?;
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(Ok(()))
    } else {
        Ok(Err(Failed(format!(
            "oracle checks failed: {}",
            failed.join(", ")
        ))))
    }
}

fn cmd_sweep_k(
    run: &RunFlags,
    inputs: &ModelInputs,
    ks: &[usize],
    out: Option<&Path>,
) -> CmdResult {
    let cfg = run.resolve()?;
    let (net, batch) = load_inputs(inputs)?;
    let rows = sweep_k(&net, &batch, &cfg, ks)?;
    write_text(out, &sweep_csv(&rows))?;
    Ok(Ok(()))
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Gen { run, shape, out } => cmd_gen(run, shape, out),
        Command::Calibrate { run, inputs, out } => cmd_calibrate(run, inputs, out),
        Command::Compress {
            run,
            inputs,
            stats,
            plan,
            out,
        } => cmd_compress(run, inputs, stats, plan.as_deref(), out),
        Command::Remap {
            run,
            inputs,
            compressed,
            stats,
            out,
        } => cmd_remap(run, inputs, compressed.as_deref(), stats.as_deref(), out),
        Command::Eval {
            inputs,
            candidate,
            plan,
            timings,
            out,
        } => cmd_eval(inputs, candidate, plan.as_deref(), *timings, out.as_deref()),
        Command::Verify { run, inputs, out } => cmd_verify(run, inputs, out.as_deref()),
        Command::SweepK {
            run,
            inputs,
            ks,
            out,
        } => cmd_sweep_k(run, inputs, ks, out.as_deref()),
    }
}

/// Exit code 2 for I/O, format and configuration problems, 1 otherwise.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some()
        || err.downcast_ref::<std::io::Error>().is_some()
        || err.downcast_ref::<serde_json::Error>().is_some()
    {
        return 2;
    }
    match err.downcast_ref::<iosvd::Error>() {
        Some(
            iosvd::Error::Io(_)
            | iosvd::Error::Format(_)
            | iosvd::Error::InvalidParameter(_)
            | iosvd::Error::InvalidTopK { .. }
            | iosvd::Error::EmptyCalibration,
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
