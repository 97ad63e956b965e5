//! Heterogeneous rank allocation.
//!
//! Every whitened singular component gets a first-order score `|g σ|`, where
//! `g = u_iᵀ G̃ v_i` and `G̃ = C^{-1/2} G R^{-1/2}`. A global min-heap of
//! per-layer tail components is then drained until the parameter budget is
//! met. Storage is counted with the threshold-rank rule: factors only pay
//! off once the rank is at most `r* = ⌊mn/(m+n)⌋`.

use crate::curvature::{LayerStats, WhiteningMaps};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::netmodel::{Layer, Network};
use crate::whiten::{truncate_and_unwhiten, LowRankLayer, WhitenedFactorization};
use serde::{Deserialize, Serialize};
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

/// Default minimum-rank ratio.
pub const DEFAULT_ETA: f64 = 0.05;

/// `G̃ = C^{-1/2} G R^{-1/2}` with the maps of finalized statistics.
pub fn whitened_gradient(g: &Matrix, stats: &LayerStats) -> Result<Matrix> {
    if g.shape() != (stats.output_dim(), stats.input_dim()) {
        return Err(Error::DimensionMismatch {
            context: format!("gradient shape for layer {}", stats.layer()),
            expected: stats.output_dim() * stats.input_dim(),
            got: g.rows() * g.cols(),
        });
    }
    whitened_gradient_with(g, stats.maps()?)
}

pub fn whitened_gradient_with(g: &Matrix, maps: &WhiteningMaps) -> Result<Matrix> {
    maps.c_inv_half.matmul(g)?.matmul(&maps.r_inv_half)
}

/// `g = u_iᵀ G̃ v_i`, the directional derivative of the loss along the
/// `i`-th whitened rank-one component.
pub fn component_coefficient(f: &WhitenedFactorization, g_tilde: &Matrix, i: usize) -> Result<f64> {
    if i >= f.max_rank() {
        return Err(Error::InvalidRank {
            rank: i,
            max: f.max_rank(),
        });
    }
    let gv = g_tilde.matvec(&f.svd.v_column(i))?;
    Ok(dot(&f.svd.u_column(i), &gv))
}

/// `I = |g σ_i|`.
pub fn component_score(f: &WhitenedFactorization, g_tilde: &Matrix, i: usize) -> Result<f64> {
    Ok((component_coefficient(f, g_tilde, i)? * f.svd.singular_values[i]).abs())
}

/// Signed first-order loss change from zeroing component `i`: `−g σ_i`.
pub fn predicted_drop_change(f: &WhitenedFactorization, g_tilde: &Matrix, i: usize) -> Result<f64> {
    Ok(-component_coefficient(f, g_tilde, i)? * f.svd.singular_values[i])
}

/// Scores of every component in σ-descending order.
pub fn component_scores(f: &WhitenedFactorization, g_tilde: &Matrix) -> Result<Vec<f64>> {
    (0..f.max_rank())
        .map(|i| component_score(f, g_tilde, i))
        .collect()
}

/// `⌊mn/(m+n)⌋`, the largest rank whose factors are no larger than the
/// dense matrix.
pub fn threshold_rank(m: usize, n: usize) -> usize {
    if m == 0 || n == 0 {
        return 0;
    }
    (m * n) / (m + n)
}

/// Parameters freed by dropping the component that takes the rank from `r`
/// to `r − 1`.
pub fn storage_gain(m: usize, n: usize, r: usize) -> usize {
    let rs = threshold_rank(m, n);
    match r.cmp(&(rs + 1)) {
        Ordering::Greater => 0,
        Ordering::Equal => m * n - rs * (m + n),
        Ordering::Less => m + n,
    }
}

/// Stored weight parameters of an m×n layer kept at rank `r`.
pub fn stored_params(m: usize, n: usize, r: usize) -> usize {
    if r > threshold_rank(m, n) {
        m * n
    } else {
        r * (m + n)
    }
}

/// `⌈η r*⌉`.
pub fn min_rank(m: usize, n: usize, eta: f64) -> usize {
    (eta * threshold_rank(m, n) as f64).ceil() as usize
}

/// Parameter budget `⌈π Σ mn⌉`, robust to `π Σ mn` landing a hair above an
/// integer through floating-point rounding.
pub fn removal_target(pi: f64, total_params: u64) -> u64 {
    let x = pi * total_params as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 4.0 * f64::EPSILON * x.abs() {
        nearest.max(0.0) as u64
    } else {
        x.ceil().max(0.0) as u64
    }
}

/// A tail component waiting in the pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropCandidate {
    pub score: f64,
    pub layer: usize,
    pub rank_before_drop: usize,
    pub storage_gain: usize,
}

impl Eq for DropCandidate {}

impl Ord for DropCandidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(self.layer.cmp(&other.layer))
            .then(self.rank_before_drop.cmp(&other.rank_before_drop))
    }
}

impl PartialOrd for DropCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Component scores of one layer, σ-descending.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

impl LayerScores {
    pub fn new(layer: usize, rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != rows.min(cols) {
            return Err(Error::DimensionMismatch {
                context: format!("component scores of layer {layer}"),
                expected: rows.min(cols),
                got: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "score {i} of layer {layer} is {}",
                scores[i]
            )));
        }
        Ok(Self {
            layer,
            rows,
            cols,
            scores,
        })
    }

    /// The candidate for dropping the component at `rank − 1`.
    pub fn candidate(&self, rank: usize) -> DropCandidate {
        DropCandidate {
            score: self.scores[rank - 1],
            layer: self.layer,
            rank_before_drop: rank,
            storage_gain: storage_gain(self.rows, self.cols, rank),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub threshold_rank: usize,
    pub min_rank: usize,
    pub final_rank: usize,
    pub dense_fallback: bool,
}

impl LayerPlan {
    pub fn original_params(&self) -> usize {
        self.rows * self.cols
    }

    pub fn stored_params(&self) -> usize {
        stored_params(self.rows, self.cols, self.final_rank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub layer: usize,
    pub score: f64,
    pub rank_before_drop: usize,
    pub storage_gain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub layers: Vec<LayerPlan>,
    pub drop_history: Vec<DropRecord>,
    pub removed_params: u64,
    pub target_removed: u64,
    pub total_params: u64,
    /// False when the pool emptied before the target was met.
    pub budget_reached: bool,
}

impl CompressionPlan {
    pub fn ranks(&self) -> BTreeMap<usize, usize> {
        self.layers
            .iter()
            .map(|l| (l.layer, l.final_rank))
            .collect()
    }

    pub fn dense_fallback(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| l.dense_fallback)
            .map(|l| l.layer)
            .collect()
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// `removed_params` recomputed from final ranks alone.
    pub fn recount_removed(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| (l.original_params() - l.stored_params()) as u64)
            .sum()
    }

    pub fn stored_params(&self) -> u64 {
        self.total_params - self.removed_params
    }
}

/// Greedy allocation from precomputed scores with pruning ratio `pi`.
pub fn allocate_from_scores(layers: &[LayerScores], pi: f64, eta: f64) -> Result<CompressionPlan> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "pruning ratio {pi} must lie in (0, 1)"
        )));
    }
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidParameter(format!(
            "minimum-rank ratio {eta} must lie in [0, 1)"
        )));
    }
    let total_params: u64 = layers.iter().map(|l| (l.rows * l.cols) as u64).sum();
    let target_removed = removal_target(pi, total_params);

    let mut ranks: Vec<usize> = layers.iter().map(|l| l.scores.len()).collect();
    let mins: Vec<usize> = layers
        .iter()
        .map(|l| min_rank(l.rows, l.cols, eta))
        .collect();
    let index_of: BTreeMap<usize, usize> = layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.layer, i))
        .collect();
    if index_of.len() != layers.len() {
        return Err(Error::InvalidParameter("duplicate layer in scores".into()));
    }

    let mut heap = BinaryHeap::new();
    for (i, l) in layers.iter().enumerate() {
        if ranks[i] > mins[i] {
            heap.push(Reverse(l.candidate(ranks[i])));
        }
    }

    let mut removed: u64 = 0;
    let mut history = Vec::new();
    while removed < target_removed {
        let Some(Reverse(c)) = heap.pop() else { break };
        let i = index_of[&c.layer];
        ranks[i] -= 1;
        removed += c.storage_gain as u64;
        history.push(DropRecord {
            layer: c.layer,
            score: c.score,
            rank_before_drop: c.rank_before_drop,
            storage_gain: c.storage_gain,
        });
        if ranks[i] > mins[i] {
            heap.push(Reverse(layers[i].candidate(ranks[i])));
        }
    }

    let plans = layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let rs = threshold_rank(l.rows, l.cols);
            LayerPlan {
                layer: l.layer,
                rows: l.rows,
                cols: l.cols,
                threshold_rank: rs,
                min_rank: mins[i],
                final_rank: ranks[i],
                dense_fallback: ranks[i] > rs,
            }
        })
        .collect();
    Ok(CompressionPlan {
        layers: plans,
        drop_history: history,
        removed_params: removed,
        target_removed,
        total_params,
        budget_reached: removed >= target_removed,
    })
}

/// Scores every component and runs the greedy allocation. `gradients` are
/// already whitened and keyed by layer index.
pub fn allocate(
    factorizations: &[WhitenedFactorization],
    whitened_gradients: &BTreeMap<usize, Matrix>,
    pi: f64,
    eta: f64,
) -> Result<CompressionPlan> {
    let scores = factorizations
        .iter()
        .map(|f| {
            let g = whitened_gradients.get(&f.layer).ok_or_else(|| {
                Error::InvalidParameter(format!("no gradient for layer {}", f.layer))
            })?;
            let (m, n) = f.shape();
            LayerScores::new(f.layer, m, n, component_scores(f, g)?)
        })
        .collect::<Result<Vec<_>>>()?;
    allocate_from_scores(&scores, pi, eta)
}

/// Low-rank factors for one layer plan; `None` for dense fallback.
pub fn plan_factors(plan: &LayerPlan, f: &WhitenedFactorization) -> Result<Option<LowRankLayer>> {
    if plan.dense_fallback {
        return Ok(None);
    }
    if plan.final_rank == 0 {
        return Ok(Some(LowRankLayer::empty(plan.rows, plan.cols)));
    }
    truncate_and_unwhiten(f, plan.final_rank).map(Some)
}

/// Replaces each planned layer with its truncated factors, keeping the
/// original dense weight where the plan falls back.
pub fn materialize(
    net: &Network,
    plan: &CompressionPlan,
    factorizations: &[WhitenedFactorization],
) -> Result<Network> {
    let mut out = net.clone();
    for lp in &plan.layers {
        let f = factorizations
            .iter()
            .find(|f| f.layer == lp.layer)
            .ok_or_else(|| {
                Error::InvalidParameter(format!("no factorization for layer {}", lp.layer))
            })?;
        if let Some(lr) = plan_factors(lp, f)? {
            let bias = net.layer(lp.layer).bias().map(<[f64]>::to_vec);
            out = out.with_layer(
                lp.layer,
                Layer::LowRank {
                    a: lr.a,
                    d: lr.d,
                    bias,
                },
            )?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::LayerStats;
    use crate::whiten::whiten;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_rank(4096, 4096), 2048);
        assert_eq!(threshold_rank(3, 2), 1);
        assert_eq!(threshold_rank(1, 7), 0);
        assert_eq!(storage_gain(3, 2, 2), 1);
        assert_eq!(storage_gain(4, 4, 4), 0);
        assert_eq!(storage_gain(8, 8, 3), 16);
    }

    #[test]
    fn whitened_gradient_identity_and_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Matrix::new(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let id = LayerStats::identity(0, 4, 3);
        assert_eq!(whitened_gradient(&g, &id).unwrap(), g);
        assert_eq!(
            whitened_gradient(&Matrix::zeros(3, 4), &id).unwrap(),
            Matrix::zeros(3, 4)
        );
        let unfinalized = LayerStats::new(0, 4, 3);
        assert!(whitened_gradient(&g, &unfinalized).is_err());
    }

    fn single_layer_scores(scores: Vec<f64>, m: usize, n: usize) -> LayerScores {
        LayerScores::new(0, m, n, scores).unwrap()
    }

    #[test]
    fn single_layer_exact_drops() {
        // 8×8: r* = 4, crossing gain at r = 5 is 64 − 64 = 0.
        // 10×6: r* = 3, k = 6; gains 0,0,60−48=12,16,16,16.
        let s = single_layer_scores(vec![6.0, 5.0, 4.0, 3.0, 2.0, 1.0], 10, 6);
        // π·60 = 12 + 16 = 28 → two drops past r*+1.
        let plan = allocate_from_scores(&[s], 28.0 / 60.0, 0.0).unwrap();
        assert_eq!(plan.target_removed, 28);
        assert_eq!(plan.layers[0].final_rank, 2);
        assert_eq!(plan.removed_params, 28);
        let order: Vec<usize> = plan
            .drop_history
            .iter()
            .map(|d| d.rank_before_drop)
            .collect();
        assert_eq!(order, vec![6, 5, 4, 3]);
        assert!(plan
            .drop_history
            .windows(2)
            .all(|w| w[0].score < w[1].score));
        assert_eq!(plan.recount_removed(), plan.removed_params);
        assert!(!plan.layers[0].dense_fallback);
    }

    #[test]
    fn identical_layers_balance() {
        let scores = vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.5];
        let layers = vec![
            LayerScores::new(0, 6, 6, scores.clone()).unwrap(),
            LayerScores::new(2, 6, 6, scores).unwrap(),
        ];
        for pi in [0.1, 0.3, 0.5, 0.7] {
            let plan = allocate_from_scores(&layers, pi, 0.0).unwrap();
            let r0 = plan.layers[0].final_rank as i64;
            let r1 = plan.layers[1].final_rank as i64;
            assert!((r0 - r1).abs() <= 1, "pi {pi}");
            assert!(r0 <= r1);
            assert_eq!(plan.recount_removed(), plan.removed_params);
        }
    }

    #[test]
    fn unreachable_budget_is_flagged() {
        let layers = vec![LayerScores::new(0, 8, 8, vec![1.0; 8]).unwrap()];
        let plan = allocate_from_scores(&layers, 0.9, 0.99).unwrap();
        assert!(!plan.budget_reached);
        assert_eq!(plan.layers[0].final_rank, 4);
        assert_eq!(plan.removed_params, 0);
        assert!(allocate_from_scores(&layers, 0.0, 0.1).is_err());
        assert!(allocate_from_scores(&layers, 0.5, 1.0).is_err());
    }

    #[test]
    fn min_rank_respected() {
        let layers =
            vec![LayerScores::new(0, 12, 9, (0..9).map(|i| 9.0 - i as f64).collect()).unwrap()];
        let plan = allocate_from_scores(&layers, 0.95, 0.5).unwrap();
        assert_eq!(plan.layers[0].min_rank, 3);
        assert_eq!(plan.layers[0].final_rank, 3);
        assert!(!plan.budget_reached);
    }

    #[test]
    fn removal_target_rounding() {
        assert_eq!(removal_target(0.4, 1000), 400);
        assert_eq!(removal_target(0.1, 3), 1);
        assert_eq!(removal_target(0.7, 10), 7);
    }

    fn random_factorization(
        rng: &mut ChaCha8Rng,
        layer: usize,
        m: usize,
        n: usize,
    ) -> WhitenedFactorization {
        let w = Matrix::new(
            m,
            n,
            (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        whiten(&w, &LayerStats::identity(layer, n, m)).unwrap()
    }

    #[test]
    fn materialize_recounts_parameters() {
        use crate::netmodel::Activation;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = Matrix::new(6, 5, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w2 = Matrix::new(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let net = Network::new(
            vec![
                Layer::linear(w0.clone(), Some(vec![0.1; 6])),
                Layer::Activation(Activation::Tanh),
                Layer::linear(w2.clone(), None),
            ],
            5,
            4,
            vec![0, 2],
        )
        .unwrap();
        let fs = vec![
            whiten(&w0, &LayerStats::identity(0, 5, 6)).unwrap(),
            whiten(&w2, &LayerStats::identity(2, 6, 4)).unwrap(),
        ];
        let grads: BTreeMap<usize, Matrix> = [
            (
                0,
                Matrix::new(6, 5, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            ),
            (
                2,
                Matrix::new(4, 6, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            ),
        ]
        .into_iter()
        .collect();
        for pi in [0.05, 0.2, 0.4, 0.6, 0.8] {
            let plan = allocate(&fs, &grads, pi, 0.0).unwrap();
            let compressed = materialize(&net, &plan, &fs).unwrap();
            assert_eq!(
                compressed.target_weight_params() as u64,
                plan.total_params - plan.removed_params
            );
            assert_eq!(plan.recount_removed(), plan.removed_params);
            for lp in &plan.layers {
                let layer = compressed.layer(lp.layer);
                assert_eq!(matches!(layer, Layer::Linear { .. }), lp.dense_fallback);
                assert_eq!(layer.bias(), net.layer(lp.layer).bias());
            }
        }
    }

    #[test]
    fn zero_drop_plan_keeps_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_factorization(&mut rng, 0, 4, 4);
        let w = f.weight.clone();
        let net = Network::new(vec![Layer::linear(w, None)], 4, 4, vec![0]).unwrap();
        // 4×4: r* = 2 and the crossing gain is 16 − 2·8 = 0, so even a
        // one-parameter budget needs three drops.
        let layers = vec![LayerScores::new(0, 4, 4, vec![0.0; 4]).unwrap()];
        let plan = allocate_from_scores(&layers, 1e-9, 0.0).unwrap();
        assert_eq!(plan.target_removed, 1);
        assert_eq!(plan.layers[0].final_rank, 1);
        assert_eq!(plan.removed_params, 8);
        let zero = CompressionPlan {
            layers: vec![LayerPlan {
                final_rank: 4,
                dense_fallback: true,
                ..plan.layers[0].clone()
            }],
            drop_history: vec![],
            removed_params: 0,
            target_removed: 0,
            total_params: 16,
            budget_reached: true,
        };
        assert_eq!(materialize(&net, &zero, &[f]).unwrap(), net);
    }

    #[test]
    fn threshold_boundary_stores_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_factorization(&mut rng, 0, 6, 3);
        let lp = LayerPlan {
            layer: 0,
            rows: 6,
            cols: 3,
            threshold_rank: 2,
            min_rank: 0,
            final_rank: 2,
            dense_fallback: false,
        };
        let lr = plan_factors(&lp, &f).unwrap().unwrap();
        assert_eq!(lr.stored_params(), 18);
        assert!(lr.stored_params() <= 18);
    }
}
