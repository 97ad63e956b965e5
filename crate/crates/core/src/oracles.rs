//! Brute-force references for the quantities the pipeline computes cheaply.
//!
//! Each oracle evaluates its quantity directly: explicit Jacobians through
//! forward-mode tangents, finite differences, full loss re-evaluation, and
//! linear rescans of candidate pools. None of them calls the operation it
//! checks; the only shared machinery is the network forward pass.

use crate::curvature::LayerStats;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netmodel::{calibration_loss, CalibrationBatch, Layer, Network};
use crate::rank_alloc::LayerScores;
use crate::remap::RowCandidate;
use crate::whiten::WhitenedFactorization;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const MAX_ORACLE_DIM: usize = 64;
pub const MAX_ORACLE_VOCAB: usize = 32;
pub const MAX_POOL_CANDIDATES: usize = 10_000;
pub const MAX_SUBSET_CANDIDATES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub details: String,
}

impl OracleReport {
    pub fn new(
        name: impl Into<String>,
        max_rel_error: f64,
        tolerance: f64,
        details: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            max_rel_error,
            tolerance,
            pass: max_rel_error <= tolerance,
            details: details.into(),
        }
    }
}

/// Jacobian of the logits with respect to the output of `layer`, one column
/// per output unit, by pushing unit tangents forward through later layers.
pub fn explicit_logit_jacobian(net: &Network, x: &[f64], layer: usize) -> Result<Matrix> {
    let dims = net
        .layers()
        .get(layer)
        .and_then(Layer::linear_dims)
        .ok_or_else(|| Error::InvalidLayer {
            layer,
            reason: "not a linear layer".into(),
        })?;
    let trace = net.forward(x)?;
    let width = dims.0;
    let mut columns = Vec::with_capacity(width);
    for j in 0..width {
        let mut t = vec![0.0; width];
        t[j] = 1.0;
        for k in (layer + 1)..net.layers().len() {
            t = match net.layer(k) {
                Layer::Linear { weight, .. } => weight.matvec(&t)?,
                Layer::LowRank { a, d, .. } => a.matvec(&d.t_matvec(&t)?)?,
                Layer::Activation(act) => trace.layer_inputs[k]
                    .iter()
                    .zip(&t)
                    .map(|(&pre, &dt)| act.derivative(pre) * dt)
                    .collect(),
            };
        }
        columns.push(t);
    }
    Matrix::from_columns(&columns, net.vocab_size())
}

/// `mean_t J_{t,K}ᵀ (Diag(p) − p pᵀ) J_{t,K}` formed explicitly.
pub fn explicit_layer_curvature(
    net: &Network,
    batch: &CalibrationBatch,
    k: usize,
    layer: usize,
) -> Result<Matrix> {
    let (out, _) = net
        .layers()
        .get(layer)
        .and_then(Layer::linear_dims)
        .ok_or_else(|| Error::InvalidLayer {
            layer,
            reason: "not a linear layer".into(),
        })?;
    if out > MAX_ORACLE_DIM || net.vocab_size() > MAX_ORACLE_VOCAB {
        return Err(Error::SizeGuard(format!(
            "explicit curvature needs output dim <= {MAX_ORACLE_DIM} and vocab <= {MAX_ORACLE_VOCAB}, got {out} and {}",
            net.vocab_size()
        )));
    }
    if k == 0 || k > net.vocab_size() {
        return Err(Error::InvalidTopK {
            k,
            vocab: net.vocab_size(),
        });
    }
    batch.validate_for(net)?;
    let mut acc = Matrix::zeros(out, out);
    for t in 0..batch.len() {
        let x = batch.input(t);
        let z = net.logits(x)?;
        let mut idx: Vec<usize> = (0..z.len()).collect();
        idx.sort_by(|&a, &b| {
            z[b].partial_cmp(&z[a])
                .expect("finite logits")
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        let zmax = z[idx[0]];
        let e: Vec<f64> = idx.iter().map(|&i| (z[i] - zmax).exp()).collect();
        let total: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / total).collect();
        let mut h = Matrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                h.as_mut_slice()[a * k + b] = if a == b { p[a] } else { 0.0 } - p[a] * p[b];
            }
        }
        let j_full = explicit_logit_jacobian(net, x, layer)?;
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| j_full.row(i).to_vec()).collect();
        let j = Matrix::from_rows(&rows)?;
        let c_t = j.transpose().matmul(&h)?.matmul(&j)?;
        acc.add_scaled(1.0, &c_t);
    }
    Ok(acc.scale(1.0 / batch.len() as f64))
}

/// Central-difference gradient of the calibration loss with respect to
/// every entry of the effective weight of `layer`.
pub fn finite_diff_weight_gradient(
    net: &Network,
    batch: &CalibrationBatch,
    layer: usize,
    step: f64,
) -> Result<Matrix> {
    let w = effective_weight(net, layer)?;
    let entries: Vec<(usize, usize)> = (0..w.rows())
        .flat_map(|i| (0..w.cols()).map(move |j| (i, j)))
        .collect();
    let values = finite_diff_weight_entries(net, batch, layer, step, &entries)?;
    Matrix::new(w.rows(), w.cols(), values)
}

/// Central differences for selected `(row, col)` entries only.
pub fn finite_diff_weight_entries(
    net: &Network,
    batch: &CalibrationBatch,
    layer: usize,
    step: f64,
    entries: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step {step} outside [1e-6, 1e-4]"
        )));
    }
    let w = effective_weight(net, layer)?;
    let mut out = Vec::with_capacity(entries.len());
    for &(i, j) in entries {
        if i >= w.rows() || j >= w.cols() {
            return Err(Error::InvalidParameter(format!(
                "entry ({i}, {j}) outside {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        let mut plus = w.clone();
        plus.as_mut_slice()[i * w.cols() + j] += step;
        let mut minus = w.clone();
        minus.as_mut_slice()[i * w.cols() + j] -= step;
        let lp = calibration_loss(&net.with_weight(layer, plus)?, batch)?;
        let lm = calibration_loss(&net.with_weight(layer, minus)?, batch)?;
        out.push((lp - lm) / (2.0 * step));
    }
    Ok(out)
}

fn effective_weight(net: &Network, layer: usize) -> Result<Matrix> {
    net.layers()
        .get(layer)
        .and_then(Layer::effective_weight)
        .ok_or_else(|| Error::InvalidLayer {
            layer,
            reason: "not a linear layer".into(),
        })
}

/// `C^{-1/2} (Σ_{j ∉ skip} σ_j u_j v_jᵀ) R^{-1/2}`, summed term by term.
pub fn rebuild_without(f: &WhitenedFactorization, skip: Option<usize>) -> Result<Matrix> {
    let (m, n) = f.b.shape();
    let mut b = Matrix::zeros(m, n);
    for j in 0..f.svd.len() {
        if Some(j) == skip {
            continue;
        }
        let term = Matrix::outer(&f.svd.u_column(j), &f.svd.v_column(j));
        b.add_scaled(f.svd.singular_values[j], &term);
    }
    f.maps.c_inv_half.matmul(&b)?.matmul(&f.maps.r_inv_half)
}

/// Actual calibration-loss change when component `component` of the
/// whitened factorization is zeroed and the layer rebuilt, measured against
/// the loss at the original weight.
pub fn drop_and_remeasure(
    net: &Network,
    batch: &CalibrationBatch,
    f: &WhitenedFactorization,
    component: usize,
) -> Result<f64> {
    if component >= f.svd.len() {
        return Err(Error::InvalidRank {
            rank: component,
            max: f.svd.len(),
        });
    }
    let base = calibration_loss(&net.with_weight(f.layer, f.weight.clone())?, batch)?;
    let dropped = rebuild_without(f, Some(component))?;
    let after = calibration_loss(&net.with_weight(f.layer, dropped)?, batch)?;
    Ok(after - base)
}

/// One pop of the exhaustive scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanDrop {
    pub layer: usize,
    pub rank_before_drop: usize,
    pub score: f64,
    pub storage_gain: u64,
}

fn dense_or_factored(m: u64, n: u64, r: u64) -> u64 {
    if r * (m + n) <= m * n {
        r * (m + n)
    } else {
        m * n
    }
}

/// Replays greedy allocation by rescanning every eligible tail candidate
/// at each step. Storage gains come from the stored-size difference
/// `size(r) − size(r − 1)`, where size is `min`-style dense/factored
/// storage.
pub fn exhaustive_pool_scan(
    layers: &[LayerScores],
    target_removed: u64,
    eta: f64,
) -> Result<Vec<ScanDrop>> {
    let total: usize = layers.iter().map(|l| l.scores.len()).sum();
    if total > MAX_POOL_CANDIDATES {
        return Err(Error::SizeGuard(format!(
            "pool scan over {total} candidates exceeds {MAX_POOL_CANDIDATES}"
        )));
    }
    let mut ranks: Vec<usize> = layers.iter().map(|l| l.scores.len()).collect();
    let floors: Vec<usize> = layers
        .iter()
        .map(|l| {
            let rs = (l.rows * l.cols) / (l.rows + l.cols);
            (eta * rs as f64).ceil() as usize
        })
        .collect();
    let mut removed = 0u64;
    let mut out = Vec::new();
    while removed < target_removed {
        let mut best: Option<(usize, f64)> = None;
        for (i, l) in layers.iter().enumerate() {
            if ranks[i] <= floors[i] {
                continue;
            }
            let s = l.scores[ranks[i] - 1];
            let better = match best {
                None => true,
                Some((bi, bs)) => {
                    s < bs || (s == bs && (l.layer, ranks[i]) < (layers[bi].layer, ranks[bi]))
                }
            };
            if better {
                best = Some((i, s));
            }
        }
        let Some((i, s)) = best else { break };
        let (m, n, r) = (
            layers[i].rows as u64,
            layers[i].cols as u64,
            ranks[i] as u64,
        );
        let gain = dense_or_factored(m, n, r) - dense_or_factored(m, n, r - 1);
        ranks[i] -= 1;
        removed += gain;
        out.push(ScanDrop {
            layer: layers[i].layer,
            rank_before_drop: r as usize,
            score: s,
            storage_gain: gain,
        });
    }
    Ok(out)
}

/// Minimum total score over all subsets whose savings cover `c_rem`, with
/// the chosen candidate indices. `None` when no subset covers the budget.
pub fn exhaustive_subset_min(
    candidates: &[RowCandidate],
    c_rem: u64,
) -> Result<Option<(f64, Vec<usize>)>> {
    let n = candidates.len();
    if n > MAX_SUBSET_CANDIDATES {
        return Err(Error::SizeGuard(format!(
            "subset enumeration over {n} candidates exceeds {MAX_SUBSET_CANDIDATES}"
        )));
    }
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1u32 << n) {
        let mut saving = 0u64;
        let mut score = 0.0;
        for (i, c) in candidates.iter().enumerate() {
            if mask & (1 << i) != 0 {
                saving += c.byte_saving;
                score += c.score;
            }
        }
        if saving >= c_rem && best.is_none_or(|(s, _)| score < s) {
            best = Some((score, mask));
        }
    }
    Ok(best.map(|(s, mask)| (s, (0..n).filter(|i| mask & (1 << i) != 0).collect())))
}

/// Relative Frobenius error between accumulated `C` statistics and the
/// explicit curvature for each layer, as oracle reports.
pub fn curvature_reports(
    net: &Network,
    batch: &CalibrationBatch,
    k: usize,
    stats: &BTreeMap<usize, LayerStats>,
    tolerance: f64,
) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    for (&l, s) in stats {
        let explicit = explicit_layer_curvature(net, batch, k, l)?;
        let err = s.c().rel_diff(&explicit);
        out.push(OracleReport::new(
            format!("curvature_layer_{l}"),
            err,
            tolerance,
            format!(
                "K={k}, {} tokens, ‖C‖_F={:.6e}",
                batch.len(),
                explicit.frobenius_norm()
            ),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{accumulate_output_curvature, allocate_stats, kl_hessian};
    use crate::netmodel::{softmax, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, vocab: usize) -> CalibrationBatch {
        CalibrationBatch::new(
            random(rng, n, dim),
            (0..n).map(|_| rng.random_range(0..vocab)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_linear_full_support_is_mean_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 5, 3);
        let net = Network::new(vec![Layer::linear(w, None)], 3, 5, vec![0]).unwrap();
        let b = batch(&mut rng, 7, 3, 5);
        let c = explicit_layer_curvature(&net, &b, 5, 0).unwrap();
        let mut mean = Matrix::zeros(5, 5);
        for t in 0..b.len() {
            mean.add_scaled(
                1.0 / 7.0,
                &kl_hessian(&softmax(&net.logits(b.input(t)).unwrap())).unwrap(),
            );
        }
        assert!(c.rel_diff(&mean) < 1e-12);
    }

    #[test]
    fn zero_head_has_zero_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(
            vec![
                Layer::linear(random(&mut rng, 4, 3), None),
                Layer::Activation(Activation::Tanh),
                Layer::linear(Matrix::zeros(6, 4), None),
            ],
            3,
            6,
            vec![0, 2],
        )
        .unwrap();
        let b = batch(&mut rng, 5, 3, 6);
        assert_eq!(
            explicit_layer_curvature(&net, &b, 6, 0).unwrap(),
            Matrix::zeros(4, 4)
        );
    }

    #[test]
    fn matches_probe_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::new(
            vec![
                Layer::linear(random(&mut rng, 6, 4), Some(vec![0.1; 6])),
                Layer::Activation(Activation::Gelu),
                Layer::linear(random(&mut rng, 7, 6), None),
            ],
            4,
            7,
            vec![0, 2],
        )
        .unwrap();
        let b = batch(&mut rng, 9, 4, 7);
        for k in [1, 3, 7] {
            let mut stats = allocate_stats(&net);
            accumulate_output_curvature(&net, &b, k, &mut stats).unwrap();
            for (&l, s) in &stats {
                let explicit = explicit_layer_curvature(&net, &b, k, l).unwrap();
                assert!(s.c().rel_diff(&explicit) < 1e-10, "k {k} layer {l}");
            }
        }
    }

    #[test]
    fn size_guard() {
        let net = Network::new(
            vec![Layer::linear(Matrix::zeros(40, 2), None)],
            2,
            40,
            vec![0],
        )
        .unwrap();
        let b = CalibrationBatch::new(Matrix::zeros(1, 2), vec![0]).unwrap();
        assert!(matches!(
            explicit_layer_curvature(&net, &b, 3, 0),
            Err(Error::SizeGuard(_))
        ));
    }

    #[test]
    fn finite_difference_step_range() {
        let net = Network::new(
            vec![Layer::linear(Matrix::identity(2), None)],
            2,
            2,
            vec![0],
        )
        .unwrap();
        let b = CalibrationBatch::new(Matrix::identity(2), vec![0, 1]).unwrap();
        assert!(finite_diff_weight_gradient(&net, &b, 0, 1e-2).is_err());
        let g = finite_diff_weight_gradient(&net, &b, 0, 1e-5).unwrap();
        assert_eq!(g.shape(), (2, 2));
    }

    #[test]
    fn drop_zero_component_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random(&mut rng, 5, 2);
        let v = random(&mut rng, 2, 4);
        let w = u.matmul(&v).unwrap();
        let net = Network::new(vec![Layer::linear(w.clone(), None)], 4, 5, vec![0]).unwrap();
        let b = batch(&mut rng, 6, 4, 5);
        let f = crate::whiten::whiten(&w, &LayerStats::identity(0, 4, 5)).unwrap();
        let full = rebuild_without(&f, None).unwrap();
        assert!(full.max_abs_diff(&w) < 1e-8);
        let change = drop_and_remeasure(&net, &b, &f, 3).unwrap();
        assert!(change.abs() < 1e-12);
    }

    #[test]
    fn pool_scan_examples() {
        let one = vec![LayerScores::new(0, 1, 3, vec![0.5]).unwrap()];
        let seq = exhaustive_pool_scan(&one, 1, 0.0).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(
            (seq[0].layer, seq[0].rank_before_drop, seq[0].storage_gain),
            (0, 1, 3)
        );
        let tied = vec![
            LayerScores::new(0, 2, 2, vec![1.0, 1.0]).unwrap(),
            LayerScores::new(1, 2, 2, vec![1.0, 1.0]).unwrap(),
        ];
        let seq = exhaustive_pool_scan(&tied, 100, 0.0).unwrap();
        let order: Vec<(usize, usize)> =
            seq.iter().map(|d| (d.layer, d.rank_before_drop)).collect();
        assert_eq!(order, vec![(0, 2), (0, 1), (1, 2), (1, 1)]);
    }

    #[test]
    fn subset_enumeration() {
        let c = |score: f64, saving: u64| RowCandidate {
            layer: 0,
            factor: crate::remap::Factor::A,
            row_index: 0,
            score,
            byte_saving: saving,
        };
        let cs = vec![c(1.0, 1), c(3.0, 10), c(2.5, 6), c(2.0, 6)];
        let (score, idx) = exhaustive_subset_min(&cs, 10).unwrap().unwrap();
        assert_eq!(score, 3.0);
        assert_eq!(idx, vec![1]);
        assert!(exhaustive_subset_min(&cs, 100).unwrap().is_none());
    }
}
