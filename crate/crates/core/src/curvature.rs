//! Per-layer second-moment statistics used for whitening.
//!
//! `R` is the running mean of `x xᵀ` over layer inputs. `C` is the running
//! mean of `Jᵀ H J`, where `H = Diag(p) − p pᵀ` is the KL Hessian on the
//! top-K support and `J` maps the layer output to those logits. `C` is
//! accumulated without forming `J` or `H`: with `A = Diag(√p)(I − √p √pᵀ)`
//! we have `A Aᵀ = H`, so summing `g gᵀ` over the VJPs `g = Jᵀ A e_j` of
//! every column of `A` reproduces `Jᵀ H J` exactly.

use crate::error::{Error, Result};
use crate::linalg::{psd_inv_sqrt, psd_sqrt, Matrix};
use crate::netmodel::{top_k_support, CalibrationBatch, Network};
use std::collections::BTreeMap;

/// Relative damping used when none is configured.
pub const DEFAULT_RELATIVE_DAMPING: f64 = 1e-4;
/// Absolute lower bound on any damping value.
pub const DAMPING_FLOOR: f64 = 1e-8;

/// `C^{±1/2}` and `R^{±1/2}` of the damped statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningMaps {
    pub c_half: Matrix,
    pub c_inv_half: Matrix,
    pub r_half: Matrix,
    pub r_inv_half: Matrix,
}

impl WhiteningMaps {
    pub fn identity(output_dim: usize, input_dim: usize) -> Self {
        Self {
            c_half: Matrix::identity(output_dim),
            c_inv_half: Matrix::identity(output_dim),
            r_half: Matrix::identity(input_dim),
            r_inv_half: Matrix::identity(input_dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    layer: usize,
    r: Matrix,
    c: Matrix,
    token_count: usize,
    curvature_tokens: usize,
    lambda_r: f64,
    lambda_c: f64,
    maps: Option<WhiteningMaps>,
}

impl LayerStats {
    pub fn new(layer: usize, input_dim: usize, output_dim: usize) -> Self {
        Self {
            layer,
            r: Matrix::zeros(input_dim, input_dim),
            c: Matrix::zeros(output_dim, output_dim),
            token_count: 0,
            curvature_tokens: 0,
            lambda_r: 0.0,
            lambda_c: 0.0,
            maps: None,
        }
    }

    /// Rebuilds statistics from stored matrices (e.g. a stats file).
    pub fn from_matrices(layer: usize, r: Matrix, c: Matrix, token_count: usize) -> Result<Self> {
        for (name, m) in [("R", &r), ("C", &c)] {
            if m.rows() != m.cols() {
                return Err(Error::Format(format!(
                    "{name} of layer {layer} is not square"
                )));
            }
        }
        Ok(Self {
            layer,
            r,
            c,
            token_count,
            curvature_tokens: token_count,
            lambda_r: 0.0,
            lambda_c: 0.0,
            maps: None,
        })
    }

    /// Finalized statistics whose whitening maps are all identities.
    pub fn identity(layer: usize, input_dim: usize, output_dim: usize) -> Self {
        Self {
            layer,
            r: Matrix::identity(input_dim),
            c: Matrix::identity(output_dim),
            token_count: 0,
            curvature_tokens: 0,
            lambda_r: 0.0,
            lambda_c: 0.0,
            maps: Some(WhiteningMaps::identity(output_dim, input_dim)),
        }
    }

    /// Copy with the output-side statistics replaced by the identity, i.e.
    /// input-only whitening.
    pub fn input_only(&self) -> Self {
        let out = self.output_dim();
        let mut s = self.clone();
        s.c = Matrix::identity(out);
        s.lambda_c = 0.0;
        if let Some(maps) = s.maps.as_mut() {
            maps.c_half = Matrix::identity(out);
            maps.c_inv_half = Matrix::identity(out);
        }
        s
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn input_dim(&self) -> usize {
        self.r.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.rows()
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn lambda_r(&self) -> f64 {
        self.lambda_r
    }

    pub fn lambda_c(&self) -> f64 {
        self.lambda_c
    }

    pub fn is_finalized(&self) -> bool {
        self.maps.is_some()
    }

    pub fn maps(&self) -> Result<&WhiteningMaps> {
        self.maps.as_ref().ok_or(Error::NotFinalized(self.layer))
    }

    /// `R ← R + (x xᵀ − R) / n`.
    pub fn accumulate_input_covariance(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: format!("input covariance of layer {}", self.layer),
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        self.token_count += 1;
        let inv_n = 1.0 / self.token_count as f64;
        let n = x.len();
        let data = self.r.as_mut_slice();
        for i in 0..n {
            for j in 0..n {
                let cur = &mut data[i * n + j];
                *cur += (x[i] * x[j] - *cur) * inv_n;
            }
        }
        self.maps = None;
        Ok(())
    }

    /// Adds one token's curvature `Σ_j g_j g_jᵀ` to the running mean of `C`.
    fn accumulate_token_curvature(&mut self, probes: &[Vec<f64>]) {
        self.curvature_tokens += 1;
        let inv_n = 1.0 / self.curvature_tokens as f64;
        let n = self.output_dim();
        let mut token = Matrix::zeros(n, n);
        for g in probes {
            for (i, &gi) in g.iter().enumerate() {
                if gi == 0.0 {
                    continue;
                }
                for (dst, &gj) in token.row_mut(i).iter_mut().zip(g) {
                    *dst += gi * gj;
                }
            }
        }
        let c = self.c.as_mut_slice();
        for (cur, &t) in c.iter_mut().zip(token.as_slice()) {
            *cur += (t - *cur) * inv_n;
        }
        self.maps = None;
    }

    /// Computes the damped square roots and inverse square roots.
    pub fn finalize(&mut self, lambda_r: f64, lambda_c: f64) -> Result<()> {
        if self.token_count == 0 && self.curvature_tokens == 0 {
            return Err(Error::NoTokens(self.layer));
        }
        let r_half = psd_sqrt(&self.r, lambda_r)?;
        let r_inv_half = psd_inv_sqrt(&self.r, lambda_r)?;
        let c_half = psd_sqrt(&self.c, lambda_c)?;
        let c_inv_half = psd_inv_sqrt(&self.c, lambda_c)?;
        self.lambda_r = lambda_r;
        self.lambda_c = lambda_c;
        self.maps = Some(WhiteningMaps {
            c_half,
            c_inv_half,
            r_half,
            r_inv_half,
        });
        Ok(())
    }

    /// Finalizes with `λ = max(rel · mean diag, 1e-8)` on each side.
    pub fn finalize_relative(&mut self, rel_r: f64, rel_c: f64) -> Result<()> {
        let lr = default_damping(&self.r, rel_r);
        let lc = default_damping(&self.c, rel_c);
        self.finalize(lr, lc)
    }
}

/// `max(rel · mean diag(m), 1e-8)`.
pub fn default_damping(m: &Matrix, rel: f64) -> f64 {
    (rel * m.mean_diagonal()).max(DAMPING_FLOOR)
}

fn check_probabilities(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidProbabilities("empty".into()));
    }
    if let Some(bad) = p.iter().find(|v| v.is_nan() || **v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidProbabilities(format!(
            "entry {bad} is not a probability"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidProbabilities(format!("sums to {sum}")));
    }
    Ok(())
}

/// Hessian of `KL(p ‖ softmax(z))` at the logits of `p`: `Diag(p) − p pᵀ`.
pub fn kl_hessian(p: &[f64]) -> Result<Matrix> {
    check_probabilities(p)?;
    let mut h = Matrix::outer(p, p).scale(-1.0);
    for (i, &pi) in p.iter().enumerate() {
        h[(i, i)] += pi;
    }
    Ok(h)
}

/// `A = Diag(s)(I − s sᵀ)` with `s = √p`, so that `A Aᵀ = kl_hessian(p)`.
pub fn probe_factor(p: &[f64]) -> Result<Matrix> {
    check_probabilities(p)?;
    let s: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let k = s.len();
    let mut a = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let proj = if i == j { 1.0 } else { 0.0 } - s[i] * s[j];
            a[(i, j)] = s[i] * proj;
        }
    }
    Ok(a)
}

/// Accumulates `R` for every target layer from the layer inputs seen on the batch.
pub fn accumulate_input_covariances(
    net: &Network,
    batch: &CalibrationBatch,
    stats: &mut BTreeMap<usize, LayerStats>,
) -> Result<()> {
    batch.validate_for(net)?;
    for t in 0..batch.len() {
        let trace = net.forward(batch.input(t))?;
        for (&l, s) in stats.iter_mut() {
            s.accumulate_input_covariance(&trace.layer_inputs[l])?;
        }
    }
    Ok(())
}

/// Accumulates `C` for every target layer by sweeping the canonical probes
/// `A e_j` of the top-K KL Hessian through one reverse pass each.
pub fn accumulate_output_curvature(
    net: &Network,
    batch: &CalibrationBatch,
    k: usize,
    stats: &mut BTreeMap<usize, LayerStats>,
) -> Result<()> {
    batch.validate_for(net)?;
    if k == 0 || k > net.vocab_size() {
        return Err(Error::InvalidTopK {
            k,
            vocab: net.vocab_size(),
        });
    }
    for &l in stats.keys() {
        if !net.target_layers().contains(&l) {
            return Err(Error::InvalidLayer {
                layer: l,
                reason: "statistics allocated for a non-target layer".into(),
            });
        }
    }
    for t in 0..batch.len() {
        let trace = net.forward(batch.input(t))?;
        let support = top_k_support(&trace.logits, k)?;
        let a = probe_factor(&support.probs)?;
        let mut per_layer: BTreeMap<usize, Vec<Vec<f64>>> =
            stats.keys().map(|&l| (l, Vec::with_capacity(k))).collect();
        for j in 0..k {
            let probe = a.column(j);
            let grad = net.scatter_logit_vector(&probe, &support.indices)?;
            let mut outs = net.backward(&trace, &grad);
            for (&l, bucket) in per_layer.iter_mut() {
                bucket.push(std::mem::take(&mut outs[l]));
            }
        }
        for (l, probes) in per_layer {
            stats
                .get_mut(&l)
                .expect("keys mirror stats")
                .accumulate_token_curvature(&probes);
        }
    }
    Ok(())
}

/// Empty statistics for every target layer of `net`.
pub fn allocate_stats(net: &Network) -> BTreeMap<usize, LayerStats> {
    net.target_layers()
        .iter()
        .map(|&l| {
            let (out, inp) = net.layer(l).linear_dims().expect("targets are linear");
            (l, LayerStats::new(l, inp, out))
        })
        .collect()
}

/// Full calibration pass: accumulate `R` and `C` for every target layer and
/// finalize with relative damping.
pub fn collect_stats(
    net: &Network,
    batch: &CalibrationBatch,
    top_k: usize,
    rel_damping_r: f64,
    rel_damping_c: f64,
) -> Result<BTreeMap<usize, LayerStats>> {
    let mut stats = allocate_stats(net);
    accumulate_input_covariances(net, batch, &mut stats)?;
    accumulate_output_curvature(net, batch, top_k, &mut stats)?;
    for s in stats.values_mut() {
        s.finalize_relative(rel_damping_r, rel_damping_c)?;
    }
    Ok(stats)
}
