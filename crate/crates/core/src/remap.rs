//! Hybrid low-rank plus int8 storage.
//!
//! After truncation every row of every factor `A` and `D` is a candidate for
//! symmetric per-row int8 storage. Rows are scored by the first-order loss
//! change `|⟨γ, Q₈(r) − r⟩|`, with `γ` the matching row of `∂L/∂A = G D` or
//! `∂L/∂D = Gᵀ A`, and the cheapest rows are quantized until the byte budget
//! is met.
//!
//! Byte model (per target layer):
//! * full-precision parameters cost 2 bytes,
//! * a quantized row of length `r` costs `r` code bytes, a 2-byte f16 scale
//!   and a 2-byte u16 row index,
//! * dense-fallback layers cost `2mn` and never enter the candidate pool.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::netmodel::{calibration_loss_and_gradients, CalibrationBatch, Layer, Network};
use crate::rank_alloc::{allocate, materialize, CompressionPlan};
use crate::whiten::{LowRankLayer, WhitenedFactorization};
use half::f16;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Bytes per full-precision parameter.
pub const FP_BYTES: u64 = 2;
/// Per-row bookkeeping for a quantized row: f16 scale plus u16 index.
pub const QUANT_ROW_OVERHEAD: u64 = 4;
const QMAX: f64 = 127.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Factor {
    A,
    D,
}

/// Remap strategy for the hybrid stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemapMode {
    #[default]
    Off,
    /// Largest-norm rows first.
    Plain,
    /// Ascending predicted loss change.
    LossAware,
    /// SVD at twice the target ratio, then loss-aware quantization.
    Hq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedRow {
    pub layer: usize,
    pub factor: Factor,
    pub row_index: usize,
    pub codes: Vec<i8>,
    /// Exactly representable as f16.
    pub scale: f64,
    pub score: f64,
}

impl QuantizedRow {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| c as f64 * self.scale).collect()
    }

    pub fn byte_count(&self) -> u64 {
        self.codes.len() as u64 + QUANT_ROW_OVERHEAD
    }
}

/// Smallest f16 value that is `≥ x` (for `x > 0`).
fn f16_at_least(x: f64) -> Result<f16> {
    let h = f16::from_f64(x);
    if !h.is_finite() || x > f16::MAX.to_f64() {
        return Err(Error::InvalidParameter(format!(
            "row scale {x:e} exceeds the f16 range"
        )));
    }
    if h.to_f64() >= x {
        Ok(h)
    } else {
        Ok(f16::from_bits(h.to_bits() + 1))
    }
}

/// Symmetric absmax int8 quantization of one row. The scale is the smallest
/// f16 at or above `max|row| / 127`, so it is stored exactly and no code
/// exceeds 127 in magnitude. A zero row uses scale 1.
pub fn quantize_dequantize_row(row: &[f64]) -> Result<(Vec<i8>, f64, Vec<f64>)> {
    if let Some(i) = row.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    let absmax = row.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let scale = if absmax == 0.0 {
        1.0
    } else {
        f16_at_least(absmax / QMAX)?.to_f64()
    };
    let codes: Vec<i8> = row
        .iter()
        .map(|&x| (x / scale).round().clamp(-QMAX, QMAX) as i8)
        .collect();
    let dequant = codes.iter().map(|&c| c as f64 * scale).collect();
    Ok((codes, scale, dequant))
}

/// `|⟨γ, Q₈(row) − row⟩|`.
pub fn row_score(gamma: &[f64], row: &[f64]) -> Result<f64> {
    if gamma.len() != row.len() {
        return Err(Error::DimensionMismatch {
            context: "row score".into(),
            expected: row.len(),
            got: gamma.len(),
        });
    }
    let (_, _, dq) = quantize_dequantize_row(row)?;
    let delta: Vec<f64> = dq.iter().zip(row).map(|(q, r)| q - r).collect();
    Ok(dot(gamma, &delta).abs())
}

/// Bytes saved by storing a length-`r` row in int8 instead of fp16.
pub fn row_byte_saving(r: usize) -> i64 {
    r as i64 * (FP_BYTES as i64 - 1) - QUANT_ROW_OVERHEAD as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowCandidate {
    pub layer: usize,
    pub factor: Factor,
    pub row_index: usize,
    pub score: f64,
    pub byte_saving: u64,
}

impl RowCandidate {
    fn key(&self) -> (usize, Factor, usize) {
        (self.layer, self.factor, self.row_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapBudget {
    pub c_target: u64,
    pub c_svd: u64,
    pub c_rem: u64,
}

impl RemapBudget {
    pub fn new(c_target: u64, c_svd: u64) -> Self {
        Self {
            c_target,
            c_svd,
            c_rem: c_target.saturating_sub(c_svd),
        }
    }

    /// Budget for reaching maintenance ratio `target_ratio` of the original
    /// target-layer bytes, given what truncation already saved.
    pub fn for_models(original: &Network, compressed: &Network, target_ratio: f64) -> Result<Self> {
        if !(target_ratio > 0.0 && target_ratio < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "maintenance ratio {target_ratio} must lie in (0, 1)"
            )));
        }
        let baseline = baseline_bytes(original);
        let allowed = allowed_bytes(baseline, target_ratio);
        let svd_bytes = FP_BYTES * compressed.target_weight_params() as u64;
        Ok(Self::new(
            baseline - allowed,
            baseline.saturating_sub(svd_bytes),
        ))
    }
}

/// `2 · Σ mn` over target layers.
pub fn baseline_bytes(net: &Network) -> u64 {
    FP_BYTES * net.target_weight_params() as u64
}

/// `⌊ratio · baseline⌋` with a guard against rounding just below an integer.
pub fn allowed_bytes(baseline: u64, ratio: f64) -> u64 {
    let x = ratio * baseline as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 4.0 * f64::EPSILON * x.abs() {
        nearest as u64
    } else {
        x.floor() as u64
    }
}

/// Greedy budgeted selection.
///
/// Candidates are ordered by ascending score when every saving is equal and
/// by ascending score per saved byte otherwise, with ties broken by
/// `(layer, factor, row)`. Rows are taken in that order until the savings
/// cover `c_rem`. Returns the selection in pick order.
pub fn select_rows(candidates: &[RowCandidate], c_rem: u64) -> Result<Vec<RowCandidate>> {
    if c_rem == 0 {
        return Ok(Vec::new());
    }
    if let Some(c) = candidates.iter().find(|c| c.byte_saving == 0) {
        return Err(Error::InvalidParameter(format!(
            "candidate {:?} saves no bytes",
            c.key()
        )));
    }
    let available: u64 = candidates.iter().map(|c| c.byte_saving).sum();
    if available < c_rem {
        return Err(Error::BudgetShortfall {
            needed: c_rem,
            available,
        });
    }
    let uniform = candidates
        .windows(2)
        .all(|w| w[0].byte_saving == w[1].byte_saving);
    let mut order: Vec<&RowCandidate> = candidates.iter().collect();
    order.sort_by(|x, y| {
        let (kx, ky) = if uniform {
            (x.score, y.score)
        } else {
            (
                x.score / x.byte_saving as f64,
                y.score / y.byte_saving as f64,
            )
        };
        kx.total_cmp(&ky).then(x.key().cmp(&y.key()))
    });
    let mut saved = 0;
    let mut out = Vec::new();
    for c in order {
        if saved >= c_rem {
            break;
        }
        saved += c.byte_saving;
        out.push(*c);
    }
    Ok(out)
}

/// Magnitude baseline: largest-norm rows first, then `(layer, factor, row)`.
pub fn select_rows_by_magnitude(
    candidates: &[RowCandidate],
    norms: &BTreeMap<(usize, Factor, usize), f64>,
    c_rem: u64,
) -> Result<Vec<RowCandidate>> {
    if c_rem == 0 {
        return Ok(Vec::new());
    }
    let available: u64 = candidates.iter().map(|c| c.byte_saving).sum();
    if available < c_rem {
        return Err(Error::BudgetShortfall {
            needed: c_rem,
            available,
        });
    }
    let mut order: Vec<&RowCandidate> = candidates.iter().collect();
    order.sort_by(|x, y| {
        norms[&y.key()]
            .total_cmp(&norms[&x.key()])
            .then(x.key().cmp(&y.key()))
    });
    let mut saved = 0;
    let mut out = Vec::new();
    for c in order {
        if saved >= c_rem {
            break;
        }
        saved += c.byte_saving;
        out.push(*c);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum HybridPayload {
    Dense(Matrix),
    Factored(LowRankLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridLayer {
    pub layer: usize,
    pub payload: HybridPayload,
    /// Sorted by `(factor, row_index)`.
    pub quantized_rows: Vec<QuantizedRow>,
    pub byte_count: u64,
}

impl HybridLayer {
    pub fn new(
        layer: usize,
        payload: HybridPayload,
        mut quantized_rows: Vec<QuantizedRow>,
    ) -> Result<Self> {
        quantized_rows.sort_by_key(|q| (q.factor, q.row_index));
        let byte_count = match &payload {
            HybridPayload::Dense(w) => {
                if !quantized_rows.is_empty() {
                    return Err(Error::InvalidLayer {
                        layer,
                        reason: "dense layers cannot hold quantized rows".into(),
                    });
                }
                FP_BYTES * (w.rows() * w.cols()) as u64
            }
            HybridPayload::Factored(lr) => {
                let r = lr.rank() as u64;
                let rows = (lr.a.rows() + lr.d.rows()) as u64;
                let q = quantized_rows.len() as u64;
                for w in quantized_rows.windows(2) {
                    if (w[0].factor, w[0].row_index) == (w[1].factor, w[1].row_index) {
                        return Err(Error::InvalidLayer {
                            layer,
                            reason: "row quantized twice".into(),
                        });
                    }
                }
                for qr in &quantized_rows {
                    let limit = match qr.factor {
                        Factor::A => lr.a.rows(),
                        Factor::D => lr.d.rows(),
                    };
                    if qr.row_index >= limit || qr.codes.len() != lr.rank() {
                        return Err(Error::InvalidLayer {
                            layer,
                            reason: format!(
                                "quantized row {:?}/{} does not fit",
                                qr.factor, qr.row_index
                            ),
                        });
                    }
                }
                FP_BYTES * r * (rows - q) + q * (r + QUANT_ROW_OVERHEAD)
            }
        };
        Ok(Self {
            layer,
            payload,
            quantized_rows,
            byte_count,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        match &self.payload {
            HybridPayload::Dense(w) => w.shape(),
            HybridPayload::Factored(lr) => (lr.a.rows(), lr.d.rows()),
        }
    }

    /// Factors with quantized rows replaced by their dequantized values.
    pub fn effective_factors(&self) -> Option<(Matrix, Matrix)> {
        let HybridPayload::Factored(lr) = &self.payload else {
            return None;
        };
        let mut a = lr.a.clone();
        let mut d = lr.d.clone();
        for q in &self.quantized_rows {
            let target = match q.factor {
                Factor::A => &mut a,
                Factor::D => &mut d,
            };
            target.row_mut(q.row_index).copy_from_slice(&q.dequantize());
        }
        Some((a, d))
    }

    fn to_layer(&self, bias: Option<Vec<f64>>) -> Layer {
        match self.effective_factors() {
            Some((a, d)) => Layer::LowRank { a, d, bias },
            None => {
                let HybridPayload::Dense(w) = &self.payload else {
                    unreachable!()
                };
                Layer::Linear {
                    weight: w.clone(),
                    bias,
                }
            }
        }
    }
}

/// A network whose target layers are stored in hybrid form.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    /// Non-target layers and biases come from here.
    pub base: Network,
    pub layers: Vec<HybridLayer>,
}

impl HybridModel {
    pub fn byte_count(&self) -> u64 {
        self.layers.iter().map(|l| l.byte_count).sum()
    }

    pub fn quantized_row_count(&self) -> usize {
        self.layers.iter().map(|l| l.quantized_rows.len()).sum()
    }

    /// The network that the hybrid representation computes.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = self.base.clone();
        for hl in &self.layers {
            let bias = self.base.layer(hl.layer).bias().map(<[f64]>::to_vec);
            net = net.with_layer(hl.layer, hl.to_layer(bias))?;
        }
        Ok(net)
    }

    /// Wraps a compressed network with no quantized rows.
    pub fn unquantized(net: &Network) -> Result<Self> {
        let layers = net
            .target_layers()
            .iter()
            .map(|&l| HybridLayer::new(l, payload_of(net.layer(l)), Vec::new()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base: net.clone(),
            layers,
        })
    }
}

fn payload_of(layer: &Layer) -> HybridPayload {
    match layer {
        Layer::LowRank { a, d, .. } => HybridPayload::Factored(LowRankLayer {
            a: a.clone(),
            d: d.clone(),
        }),
        other => HybridPayload::Dense(other.effective_weight().expect("targets are linear")),
    }
}

/// Bytes saved if every eligible factor row were quantized.
pub fn available_savings(compressed: &Network) -> u64 {
    compressed
        .target_layers()
        .iter()
        .filter_map(|&l| match compressed.layer(l) {
            Layer::LowRank { a, d, .. } => {
                let saving = row_byte_saving(a.cols());
                (saving > 0).then(|| saving as u64 * (a.rows() + d.rows()) as u64)
            }
            _ => None,
        })
        .sum()
}

/// Every eligible factor row of the compressed network with its loss-aware
/// score. `grads` holds `∂L/∂W` at the compressed model per target layer.
pub fn row_candidates(
    compressed: &Network,
    grads: &BTreeMap<usize, Matrix>,
) -> Result<Vec<RowCandidate>> {
    let mut out = Vec::new();
    for &l in compressed.target_layers() {
        let Layer::LowRank { a, d, .. } = compressed.layer(l) else {
            continue;
        };
        let saving = row_byte_saving(a.cols());
        if saving <= 0 {
            continue;
        }
        let g = grads
            .get(&l)
            .ok_or_else(|| Error::InvalidParameter(format!("no gradient for layer {l}")))?;
        let gamma_a = g.matmul(d)?;
        let gamma_d = g.transpose().matmul(a)?;
        for (factor, m, gamma) in [(Factor::A, a, &gamma_a), (Factor::D, d, &gamma_d)] {
            for i in 0..m.rows() {
                out.push(RowCandidate {
                    layer: l,
                    factor,
                    row_index: i,
                    score: row_score(gamma.row(i), m.row(i))?,
                    byte_saving: saving as u64,
                });
            }
        }
    }
    Ok(out)
}

fn factor_row(net: &Network, layer: usize, factor: Factor, row: usize) -> &[f64] {
    match net.layer(layer) {
        Layer::LowRank { a, d, .. } => match factor {
            Factor::A => a.row(row),
            Factor::D => d.row(row),
        },
        _ => unreachable!("candidates only come from factored layers"),
    }
}

/// Quantizes the selected rows of `compressed`; all other rows are left as
/// they are.
pub fn build_hybrid(compressed: &Network, selected: &[RowCandidate]) -> Result<HybridModel> {
    let mut by_layer: BTreeMap<usize, Vec<QuantizedRow>> = BTreeMap::new();
    for c in selected {
        let (codes, scale, _) =
            quantize_dequantize_row(factor_row(compressed, c.layer, c.factor, c.row_index))?;
        by_layer.entry(c.layer).or_default().push(QuantizedRow {
            layer: c.layer,
            factor: c.factor,
            row_index: c.row_index,
            codes,
            scale,
            score: c.score,
        });
    }
    let layers = compressed
        .target_layers()
        .iter()
        .map(|&l| {
            HybridLayer::new(
                l,
                payload_of(compressed.layer(l)),
                by_layer.remove(&l).unwrap_or_default(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HybridModel {
        base: compressed.clone(),
        layers,
    })
}

/// Selects and quantizes rows to cover `budget.c_rem`.
pub fn apply_remap(
    compressed: &Network,
    grads: &BTreeMap<usize, Matrix>,
    budget: &RemapBudget,
    mode: RemapMode,
) -> Result<HybridModel> {
    let candidates = row_candidates(compressed, grads)?;
    let selected = match mode {
        RemapMode::Off => {
            if budget.c_rem > 0 {
                return Err(Error::BudgetShortfall {
                    needed: budget.c_rem,
                    available: 0,
                });
            }
            Vec::new()
        }
        RemapMode::Plain => {
            let norms = candidates
                .iter()
                .map(|c| {
                    let row = factor_row(compressed, c.layer, c.factor, c.row_index);
                    (c.key(), dot(row, row).sqrt())
                })
                .collect();
            select_rows_by_magnitude(&candidates, &norms, budget.c_rem)?
        }
        RemapMode::LossAware | RemapMode::Hq => select_rows(&candidates, budget.c_rem)?,
    };
    build_hybrid(compressed, &selected)
}

/// Result of truncating and then remapping to a byte target.
#[derive(Debug, Clone, PartialEq)]
pub struct RemapOutcome {
    pub hybrid: HybridModel,
    pub plan: CompressionPlan,
    pub budget: RemapBudget,
    /// Maintenance ratio used for the truncation stage.
    pub svd_ratio: f64,
}

/// Truncates at maintenance ratio `start_ratio` and remaps down to
/// `target_ratio`. If quantizing every eligible row still cannot meet the
/// byte target, the truncation ratio steps down by 0.01 until it can.
#[allow(clippy::too_many_arguments)]
pub fn remap_with_backoff(
    original: &Network,
    batch: &CalibrationBatch,
    factorizations: &[WhitenedFactorization],
    whitened_grads: &BTreeMap<usize, Matrix>,
    target_ratio: f64,
    start_ratio: f64,
    eta: f64,
    mode: RemapMode,
) -> Result<RemapOutcome> {
    if !(start_ratio >= target_ratio && start_ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "truncation ratio {start_ratio} must lie in [{target_ratio}, 1)"
        )));
    }
    let start_pct = (start_ratio * 100.0).round() as i64;
    let floor_pct = (target_ratio * 100.0).ceil() as i64;
    let mut last_shortfall = None;
    for pct in (floor_pct..=start_pct).rev() {
        let svd_ratio = pct as f64 / 100.0;
        let plan = allocate(factorizations, whitened_grads, 1.0 - svd_ratio, eta)?;
        if !plan.budget_reached {
            return Err(Error::InvalidParameter(format!(
                "parameter budget at ratio {svd_ratio} unreachable with eta {eta}"
            )));
        }
        let compressed = materialize(original, &plan, factorizations)?;
        let budget = RemapBudget::for_models(original, &compressed, target_ratio)?;
        let available = available_savings(&compressed);
        if mode != RemapMode::Off && available < budget.c_rem {
            last_shortfall = Some(Error::BudgetShortfall {
                needed: budget.c_rem,
                available,
            });
            continue;
        }
        let grads = calibration_loss_and_gradients(&compressed, batch)?.grads;
        match apply_remap(&compressed, &grads, &budget, mode) {
            Ok(hybrid) => {
                return Ok(RemapOutcome {
                    hybrid,
                    plan,
                    budget,
                    svd_ratio,
                })
            }
            Err(e @ Error::BudgetShortfall { .. }) => last_shortfall = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_shortfall.unwrap_or_else(|| {
        Error::InvalidParameter(format!("no truncation ratio reaches {target_ratio}"))
    }))
}

/// Half-prune plus quantize: truncation at twice the target maintenance
/// ratio, then loss-aware quantization down to the target bytes.
pub fn hq_compress(
    original: &Network,
    batch: &CalibrationBatch,
    factorizations: &[WhitenedFactorization],
    whitened_grads: &BTreeMap<usize, Matrix>,
    target_ratio: f64,
    eta: f64,
) -> Result<RemapOutcome> {
    if !(target_ratio > 0.0 && target_ratio < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "HQ needs a maintenance ratio in (0, 0.5), got {target_ratio}"
        )));
    }
    remap_with_backoff(
        original,
        batch,
        factorizations,
        whitened_grads,
        target_ratio,
        2.0 * target_ratio,
        eta,
        RemapMode::Hq,
    )
}

/// Starting truncation ratio for plain and loss-aware remap: twice the
/// target, capped halfway between the target and 1.
pub fn default_remap_start(target_ratio: f64) -> f64 {
    (2.0 * target_ratio).min((1.0 + target_ratio) / 2.0)
}
