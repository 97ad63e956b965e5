//! Toy generation, end-to-end pipelines, reports and paired experiments.

use crate::curvature::{collect_stats, LayerStats, DEFAULT_RELATIVE_DAMPING};
use crate::error::{Error, Result};
use crate::io::StatsFile;
use crate::linalg::{svd, Matrix};
use crate::netmodel::{
    calibration_loss, calibration_loss_and_gradients, mean_kl, softmax, Activation,
    CalibrationBatch, Layer, Network,
};
use crate::oracles::{
    curvature_reports, drop_and_remeasure, exhaustive_pool_scan, finite_diff_weight_entries,
    OracleReport,
};
use crate::rank_alloc::{
    allocate, component_scores, materialize, predicted_drop_change, whitened_gradient_with,
    CompressionPlan, LayerScores, DEFAULT_ETA,
};
use crate::remap::{
    default_remap_start, hq_compress, remap_with_backoff, HybridModel, RemapBudget, RemapMode,
    FP_BYTES,
};
use crate::whiten::{whiten_with, WhitenedFactorization, WhiteningMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Everything that parameterizes a run. Relative damping coefficients are
/// multiplied by the mean diagonal of each statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Maintenance ratio: fraction of target-layer parameters (or bytes,
    /// once remapping is on) that is kept.
    pub ratio: f64,
    pub eta: f64,
    /// `None` means `min(32, vocab)`.
    pub top_k: Option<usize>,
    pub damping_r: f64,
    pub damping_c: f64,
    pub whitening: WhiteningMode,
    pub remap: RemapMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ratio: 0.6,
            eta: DEFAULT_ETA,
            top_k: None,
            damping_r: DEFAULT_RELATIVE_DAMPING,
            damping_c: DEFAULT_RELATIVE_DAMPING,
            whitening: WhiteningMode::DoubleSided,
            remap: RemapMode::Off,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "maintenance ratio {} must lie in (0, 1)",
                self.ratio
            )));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter(format!(
                "eta {} must lie in [0, 1)",
                self.eta
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidParameter("top-k must be at least 1".into()));
        }
        for (name, v) in [("damping-r", self.damping_r), ("damping-c", self.damping_c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} {v} must be >= 0")));
            }
        }
        if self.remap == RemapMode::Hq && self.ratio >= 0.5 {
            return Err(Error::InvalidParameter(format!(
                "hq remap needs a maintenance ratio below 0.5, got {}",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn pruning_ratio(&self) -> f64 {
        1.0 - self.ratio
    }

    pub fn top_k_for(&self, vocab: usize) -> usize {
        self.top_k.unwrap_or(vocab.min(32))
    }
}

/// Shape of a generated toy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub vocab_size: usize,
    pub tokens: usize,
    pub activation: Activation,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self {
            input_dim: 48,
            hidden: vec![32, 32],
            vocab_size: 24,
            tokens: 256,
            activation: Activation::Tanh,
        }
    }
}

const SPECTRAL_DECAY: f64 = 0.6;
const HEAD_GAIN: f64 = 3.0;
const BIAS_STD: f64 = 0.1;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("finite samples")
}

/// `U diag(s) Vᵀ` with random orthonormal `U`, `V` and `s_i ∝ (i+1)^{-decay}`
/// scaled to the requested Frobenius norm.
fn spectral_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fro: f64) -> Result<Matrix> {
    let basis = svd(&gaussian(rng, rows, cols))?;
    let k = rows.min(cols);
    let raw: Vec<f64> = (0..k)
        .map(|i| ((i + 1) as f64).powf(-SPECTRAL_DECAY))
        .collect();
    let norm = raw.iter().map(|s| s * s).sum::<f64>().sqrt();
    let s: Vec<f64> = raw.iter().map(|v| v * fro / norm).collect();
    basis.u.scale_columns(&s).matmul(&basis.v.transpose())
}

/// Deterministic toy network and calibration set. Inputs have a decaying
/// covariance spectrum in a random basis; targets are sampled from the
/// network's own predictive distribution.
pub fn generate_toy(seed: u64, shape: &ToyShape) -> Result<(Network, CalibrationBatch)> {
    if shape.input_dim == 0
        || shape.vocab_size < 2
        || shape.tokens == 0
        || shape.hidden.contains(&0)
    {
        return Err(Error::InvalidParameter(format!(
            "invalid toy shape {shape:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![shape.input_dim];
    dims.extend(&shape.hidden);
    dims.push(shape.vocab_size);

    let mut layers = Vec::new();
    let mut targets = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let (inp, out) = (pair[0], pair[1]);
        let last = i + 2 == dims.len();
        let gain = if last { HEAD_GAIN } else { 1.0 };
        let w = spectral_matrix(&mut rng, out, inp, gain * (out as f64).sqrt())?;
        let bias = (0..out)
            .map(|_| BIAS_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        targets.push(layers.len());
        layers.push(Layer::linear(w, Some(bias)));
        if !last {
            layers.push(Layer::Activation(shape.activation));
        }
    }
    let net = Network::new(layers, shape.input_dim, shape.vocab_size, targets)?;

    let n = shape.input_dim;
    let q = svd(&gaussian(&mut rng, n, n))?.u;
    let raw: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let stds: Vec<f64> = raw.iter().map(|l| (l / mean).sqrt()).collect();
    let mixer = q.scale_columns(&stds);
    let z = gaussian(&mut rng, shape.tokens, n);
    let inputs = z.matmul(&mixer.transpose())?;

    let mut labels = Vec::with_capacity(shape.tokens);
    for t in 0..shape.tokens {
        let p = softmax(&net.logits(inputs.row(t))?);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = p.len() - 1;
        for (j, pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                pick = j;
                break;
            }
        }
        labels.push(pick);
    }
    Ok((net, CalibrationBatch::new(inputs, labels)?))
}

/// Calibration statistics for every target layer.
pub fn calibrate(net: &Network, batch: &CalibrationBatch, cfg: &RunConfig) -> Result<StatsFile> {
    let top_k = cfg.top_k_for(net.vocab_size());
    Ok(StatsFile {
        top_k,
        stats: collect_stats(net, batch, top_k, cfg.damping_r, cfg.damping_c)?,
    })
}

/// Factorizations and whitened gradients for one whitening mode; reused
/// across every ratio tried on the same model.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub factorizations: Vec<WhitenedFactorization>,
    pub whitened_grads: BTreeMap<usize, Matrix>,
    pub loss: f64,
}

pub fn prepare(
    net: &Network,
    batch: &CalibrationBatch,
    stats: &BTreeMap<usize, LayerStats>,
    mode: WhiteningMode,
) -> Result<Prepared> {
    let lg = calibration_loss_and_gradients(net, batch)?;
    let mut factorizations = Vec::new();
    let mut whitened_grads = BTreeMap::new();
    for &l in net.target_layers() {
        let s = stats
            .get(&l)
            .ok_or_else(|| Error::InvalidParameter(format!("no statistics for layer {l}")))?;
        let w = net.layer(l).effective_weight().expect("targets are linear");
        let f = whiten_with(mode, &w, s)?;
        whitened_grads.insert(l, whitened_gradient_with(&lg.grads[&l], &f.maps)?);
        factorizations.push(f);
    }
    Ok(Prepared {
        factorizations,
        whitened_grads,
        loss: lg.loss,
    })
}

/// Output of a full calibrate-compress-remap run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub plan: CompressionPlan,
    pub compressed: Network,
    pub hybrid: Option<HybridModel>,
    pub budget: Option<RemapBudget>,
    /// Maintenance ratio of the truncation stage.
    pub svd_ratio: f64,
}

impl PipelineOutput {
    pub fn final_network(&self) -> Result<Network> {
        match &self.hybrid {
            Some(h) => h.to_network(),
            None => Ok(self.compressed.clone()),
        }
    }
}

/// Truncation only, at `ratio`.
pub fn compress_prepared(
    net: &Network,
    prepared: &Prepared,
    ratio: f64,
    eta: f64,
) -> Result<(CompressionPlan, Network)> {
    let plan = allocate(
        &prepared.factorizations,
        &prepared.whitened_grads,
        1.0 - ratio,
        eta,
    )?;
    let compressed = materialize(net, &plan, &prepared.factorizations)?;
    Ok((plan, compressed))
}

pub fn run_pipeline(
    net: &Network,
    batch: &CalibrationBatch,
    stats: &BTreeMap<usize, LayerStats>,
    cfg: &RunConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let prepared = prepare(net, batch, stats, cfg.whitening)?;
    run_prepared(net, batch, &prepared, cfg)
}

pub fn run_prepared(
    net: &Network,
    batch: &CalibrationBatch,
    prepared: &Prepared,
    cfg: &RunConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let outcome = match cfg.remap {
        RemapMode::Off => {
            let (plan, compressed) = compress_prepared(net, prepared, cfg.ratio, cfg.eta)?;
            return Ok(PipelineOutput {
                plan,
                compressed,
                hybrid: None,
                budget: None,
                svd_ratio: cfg.ratio,
            });
        }
        RemapMode::Plain | RemapMode::LossAware => remap_with_backoff(
            net,
            batch,
            &prepared.factorizations,
            &prepared.whitened_grads,
            cfg.ratio,
            default_remap_start(cfg.ratio),
            cfg.eta,
            cfg.remap,
        )?,
        RemapMode::Hq => hq_compress(
            net,
            batch,
            &prepared.factorizations,
            &prepared.whitened_grads,
            cfg.ratio,
            cfg.eta,
        )?,
    };
    Ok(PipelineOutput {
        compressed: outcome.hybrid.base.clone(),
        plan: outcome.plan,
        hybrid: Some(outcome.hybrid),
        budget: Some(outcome.budget),
        svd_ratio: outcome.svd_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    /// `None` for a dense layer.
    pub rank: Option<usize>,
    pub params_before: u64,
    pub params_after: u64,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub quantized_rows: usize,
    /// `‖W − Ŵ‖_F / ‖W‖_F`.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropSummary {
    pub drops: usize,
    pub zero_gain_drops: usize,
    pub drops_per_layer: BTreeMap<usize, usize>,
    pub budget_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub layers: Vec<LayerReport>,
    pub params_before: u64,
    pub params_after: u64,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub calibration_loss_before: f64,
    pub calibration_loss_after: f64,
    pub kl_before: f64,
    pub kl_after: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub drop_history: Option<DropSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl Report {
    /// True when every total equals the sum of its per-layer parts.
    pub fn totals_consistent(&self) -> bool {
        let sum = |f: fn(&LayerReport) -> u64| self.layers.iter().map(f).sum::<u64>();
        self.params_before == sum(|l| l.params_before)
            && self.params_after == sum(|l| l.params_after)
            && self.bytes_before == sum(|l| l.bytes_before)
            && self.bytes_after == sum(|l| l.bytes_after)
    }
}

pub fn summarize_drops(plan: &CompressionPlan) -> DropSummary {
    let mut per_layer = BTreeMap::new();
    for d in &plan.drop_history {
        *per_layer.entry(d.layer).or_insert(0) += 1;
    }
    DropSummary {
        drops: plan.drop_history.len(),
        zero_gain_drops: plan
            .drop_history
            .iter()
            .filter(|d| d.storage_gain == 0)
            .count(),
        drops_per_layer: per_layer,
        budget_reached: plan.budget_reached,
    }
}

/// Compares `candidate` (plain or hybrid) against `original`.
pub fn evaluate(
    original: &Network,
    candidate: &Network,
    hybrid: Option<&HybridModel>,
    batch: &CalibrationBatch,
    plan: Option<&CompressionPlan>,
) -> Result<Report> {
    let mut layers = Vec::new();
    for &l in original.target_layers() {
        let w = original
            .layer(l)
            .effective_weight()
            .expect("targets are linear");
        let cand_layer = candidate.layer(l);
        let w_hat = cand_layer
            .effective_weight()
            .ok_or_else(|| Error::InvalidLayer {
                layer: l,
                reason: "candidate layer is not linear".into(),
            })?;
        let rank = match cand_layer {
            Layer::LowRank { a, .. } => Some(a.cols()),
            _ => None,
        };
        let params_before = (w.rows() * w.cols()) as u64;
        let params_after = cand_layer.weight_params() as u64;
        let hl = hybrid.and_then(|h| h.layers.iter().find(|x| x.layer == l));
        let bytes_after = hl.map_or(FP_BYTES * params_after, |x| x.byte_count);
        let norm = w.frobenius_norm();
        let diff = w.sub(&w_hat)?.frobenius_norm();
        layers.push(LayerReport {
            layer: l,
            rows: w.rows(),
            cols: w.cols(),
            rank,
            params_before,
            params_after,
            bytes_before: FP_BYTES * params_before,
            bytes_after,
            quantized_rows: hl.map_or(0, |x| x.quantized_rows.len()),
            relative_error: if norm > 0.0 { diff / norm } else { diff },
        });
    }
    Ok(Report {
        params_before: layers.iter().map(|l| l.params_before).sum(),
        params_after: layers.iter().map(|l| l.params_after).sum(),
        bytes_before: layers.iter().map(|l| l.bytes_before).sum(),
        bytes_after: layers.iter().map(|l| l.bytes_after).sum(),
        layers,
        calibration_loss_before: calibration_loss(original, batch)?,
        calibration_loss_after: calibration_loss(candidate, batch)?,
        kl_before: 0.0,
        kl_after: mean_kl(original, candidate, batch)?,
        drop_history: plan.map(summarize_drops),
        timings_ms: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub kl: f64,
    pub normalized_kl: f64,
    pub calibration_loss: f64,
}

/// Recollects statistics for each K, compresses at the configured ratio and
/// reports the final KL to the original, normalized by the best K.
pub fn sweep_k(
    net: &Network,
    batch: &CalibrationBatch,
    cfg: &RunConfig,
    ks: &[usize],
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if ks.is_empty() {
        return Err(Error::InvalidParameter("empty K list".into()));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let kcfg = RunConfig {
            top_k: Some(k),
            ..cfg.clone()
        };
        let stats = calibrate(net, batch, &kcfg)?;
        let out = run_pipeline(net, batch, &stats.stats, &kcfg)?;
        let student = out.final_network()?;
        rows.push(SweepRow {
            k,
            kl: mean_kl(net, &student, batch)?,
            normalized_kl: 0.0,
            calibration_loss: calibration_loss(&student, batch)?,
        });
    }
    let best = rows.iter().map(|r| r.kl).fold(f64::INFINITY, f64::min);
    for r in rows.iter_mut() {
        r.normalized_kl = if best > 0.0 {
            r.kl / best
        } else if r.kl == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,kl,normalized_kl,calibration_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e}\n",
            r.k, r.kl, r.normalized_kl, r.calibration_loss
        ));
    }
    out
}

/// Predicted and measured loss change for dropping the smallest-σ
/// component of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropFidelity {
    pub layer: usize,
    pub predicted: f64,
    pub actual: f64,
}

impl DropFidelity {
    pub fn relative_error(&self) -> f64 {
        (self.predicted - self.actual).abs() / self.predicted.abs().max(1e-8)
    }
}

pub fn smallest_component_fidelity(
    net: &Network,
    batch: &CalibrationBatch,
    prepared: &Prepared,
) -> Result<Vec<DropFidelity>> {
    prepared
        .factorizations
        .iter()
        .map(|f| {
            let i = f.max_rank() - 1;
            let g = &prepared.whitened_grads[&f.layer];
            Ok(DropFidelity {
                layer: f.layer,
                predicted: predicted_drop_change(f, g, i)?,
                actual: drop_and_remeasure(net, batch, f, i)?,
            })
        })
        .collect()
}

pub fn layer_scores(prepared: &Prepared) -> Result<Vec<LayerScores>> {
    prepared
        .factorizations
        .iter()
        .map(|f| {
            let (m, n) = f.shape();
            LayerScores::new(
                f.layer,
                m,
                n,
                component_scores(f, &prepared.whitened_grads[&f.layer])?,
            )
        })
        .collect()
}

/// Oracle checks on one model: curvature against explicit Jacobians,
/// sampled weight gradients against finite differences, the greedy drop
/// sequence against a rescanning replay, and the parameter ledger.
pub fn verify_suite(
    net: &Network,
    batch: &CalibrationBatch,
    cfg: &RunConfig,
) -> Result<Vec<OracleReport>> {
    cfg.validate()?;
    let stats = calibrate(net, batch, cfg)?;
    let mut reports = curvature_reports(net, batch, stats.top_k, &stats.stats, 1e-4)?;

    let grads = calibration_loss_and_gradients(net, batch)?.grads;
    for &l in net.target_layers() {
        let g = &grads[&l];
        let (m, n) = g.shape();
        let entries: Vec<(usize, usize)> =
            (0..16).map(|k| ((k * 7) % m, (k * 11 + 3) % n)).collect();
        let fd = finite_diff_weight_entries(net, batch, l, 1e-5, &entries)?;
        let mut num = 0.0;
        let mut den = 0.0;
        for (&(i, j), v) in entries.iter().zip(&fd) {
            let a = g[(i, j)];
            num += (a - v) * (a - v);
            den += a * a;
        }
        reports.push(OracleReport::new(
            format!("gradient_layer_{l}"),
            num.sqrt() / den.sqrt().max(1e-12),
            1e-5,
            format!("{} sampled entries, step 1e-5", entries.len()),
        ));
    }

    let prepared = prepare(net, batch, &stats.stats, cfg.whitening)?;
    let plan = allocate(
        &prepared.factorizations,
        &prepared.whitened_grads,
        cfg.pruning_ratio(),
        cfg.eta,
    )?;
    let scan = exhaustive_pool_scan(&layer_scores(&prepared)?, plan.target_removed, cfg.eta)?;
    let same = scan.len() == plan.drop_history.len()
        && scan.iter().zip(&plan.drop_history).all(|(a, b)| {
            a.layer == b.layer
                && a.rank_before_drop == b.rank_before_drop
                && a.score == b.score
                && a.storage_gain == b.storage_gain as u64
        });
    reports.push(OracleReport::new(
        "allocation_pool_scan",
        if same { 0.0 } else { 1.0 },
        0.0,
        format!("{} drops", plan.drop_history.len()),
    ));
    let recount = plan.recount_removed();
    reports.push(OracleReport::new(
        "parameter_ledger",
        recount.abs_diff(plan.removed_params) as f64,
        0.0,
        format!("ledger {} vs recount {recount}", plan.removed_params),
    ));
    Ok(reports)
}

/// One paired comparison; `candidate ≤ baseline` counts as a win.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub seed: u64,
    pub candidate: f64,
    pub baseline: f64,
}

impl PairedRun {
    pub fn candidate_wins(&self) -> bool {
        self.candidate <= self.baseline
    }
}

fn toy_with_stats(seed: u64, cfg: &RunConfig) -> Result<(Network, CalibrationBatch, StatsFile)> {
    let (net, batch) = generate_toy(seed, &ToyShape::default())?;
    let stats = calibrate(&net, &batch, cfg)?;
    Ok((net, batch, stats))
}

/// Mean KL to the original for double-sided versus input-only whitening at
/// the same maintenance ratio.
pub fn whitening_ablation(seed: u64, ratio: f64) -> Result<PairedRun> {
    let cfg = RunConfig {
        seed,
        ratio,
        ..RunConfig::default()
    };
    let (net, batch, stats) = toy_with_stats(seed, &cfg)?;
    let mut kl = [0.0; 2];
    for (slot, mode) in [WhiteningMode::DoubleSided, WhiteningMode::InputOnly]
        .into_iter()
        .enumerate()
    {
        let out = run_pipeline(
            &net,
            &batch,
            &stats.stats,
            &RunConfig {
                whitening: mode,
                ..cfg.clone()
            },
        )?;
        kl[slot] = mean_kl(&net, &out.compressed, &batch)?;
    }
    Ok(PairedRun {
        seed,
        candidate: kl[0],
        baseline: kl[1],
    })
}

/// Calibration loss of loss-aware versus magnitude-ordered remapping at the
/// same byte target.
pub fn remap_ablation(seed: u64, ratio: f64) -> Result<PairedRun> {
    let cfg = RunConfig {
        seed,
        ratio,
        ..RunConfig::default()
    };
    let (net, batch, stats) = toy_with_stats(seed, &cfg)?;
    let prepared = prepare(&net, &batch, &stats.stats, cfg.whitening)?;
    let mut loss = [0.0; 2];
    for (slot, mode) in [RemapMode::LossAware, RemapMode::Plain]
        .into_iter()
        .enumerate()
    {
        let out = run_prepared(
            &net,
            &batch,
            &prepared,
            &RunConfig {
                remap: mode,
                ..cfg.clone()
            },
        )?;
        loss[slot] = calibration_loss(&out.final_network()?, &batch)?;
    }
    Ok(PairedRun {
        seed,
        candidate: loss[0],
        baseline: loss[1],
    })
}

/// Calibration loss of HQ versus pure truncation at the same maintenance
/// ratio.
pub fn hq_ablation(seed: u64, ratio: f64) -> Result<PairedRun> {
    let cfg = RunConfig {
        seed,
        ratio,
        ..RunConfig::default()
    };
    let (net, batch, stats) = toy_with_stats(seed, &cfg)?;
    let prepared = prepare(&net, &batch, &stats.stats, cfg.whitening)?;
    let hq = run_prepared(
        &net,
        &batch,
        &prepared,
        &RunConfig {
            remap: RemapMode::Hq,
            ..cfg.clone()
        },
    )?;
    let plain = run_prepared(&net, &batch, &prepared, &cfg)?;
    Ok(PairedRun {
        seed,
        candidate: calibration_loss(&hq.final_network()?, &batch)?,
        baseline: calibration_loss(&plain.compressed, &batch)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape() -> ToyShape {
        ToyShape {
            input_dim: 10,
            hidden: vec![8],
            vocab_size: 6,
            tokens: 40,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn toy_is_deterministic() {
        let a = generate_toy(5, &small_shape()).unwrap();
        let b = generate_toy(5, &small_shape()).unwrap();
        assert_eq!(a, b);
        let c = generate_toy(6, &small_shape()).unwrap();
        assert_ne!(a.0, c.0);
        let loss = calibration_loss(&a.0, &a.1).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(a.0.target_layers(), &[0, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig {
            ratio: 1.0,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            remap: RemapMode::Hq,
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        assert!(RunConfig {
            top_k: Some(0),
            ..RunConfig::default()
        }
        .validate()
        .is_err());
        let parsed: RunConfig =
            serde_json::from_str(r#"{"ratio": 0.4, "whitening": "input_only"}"#).unwrap();
        assert_eq!(parsed.ratio, 0.4);
        assert_eq!(parsed.whitening, WhiteningMode::InputOnly);
        assert!(serde_json::from_str::<RunConfig>(r#"{"ratoi": 0.4}"#).is_err());
    }

    #[test]
    fn pipeline_reports_are_consistent() {
        let (net, batch) = generate_toy(1, &small_shape()).unwrap();
        let cfg = RunConfig {
            ratio: 0.5,
            ..RunConfig::default()
        };
        let stats = calibrate(&net, &batch, &cfg).unwrap();
        let out = run_pipeline(&net, &batch, &stats.stats, &cfg).unwrap();
        let report = evaluate(&net, &out.compressed, None, &batch, Some(&out.plan)).unwrap();
        assert!(report.totals_consistent());
        assert_eq!(report.params_after, out.plan.stored_params());
        let same = evaluate(&net, &net, None, &batch, None).unwrap();
        assert_eq!(same.kl_after, 0.0);
    }

    #[test]
    fn singleton_sweep_normalizes_to_one() {
        let (net, batch) = generate_toy(2, &small_shape()).unwrap();
        let rows = sweep_k(&net, &batch, &RunConfig::default(), &[3]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].normalized_kl, 1.0);
        assert!(sweep_csv(&rows).starts_with("k,kl,normalized_kl,calibration_loss\n3,"));
    }
}
