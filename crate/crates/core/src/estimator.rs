//! Cost, gradient and covariance estimators for `C(θ) = ‖ℒρ‖² / ‖ρ‖²`.
//!
//! With `p(x) = |ρ(x)|² / Σ|ρ|²` and the local value
//! `L(x) = Σ_{x′} ℒ_{xx′} ρ(x′)/ρ(x)`, the cost is `Σ_x p(x) |L(x)|²` and
//!
//! ```text
//! ∂_k C = 2 Re Σ_x p(x) [ L*(x) Σ_{x′} ℒ_{xx′} (ρ(x′)/ρ(x)) D_k(x′) − C D_k(x) ]
//! ```
//!
//! where `D_k = ∂_k log ρ`. Monte-Carlo batches replace `p` by importance
//! weights against the sampling density.
//!
//! [`Objective`] freezes a set of terms (samples or an enumeration) together
//! with every pair their rows touch, so the cost and gradient can be
//! re-evaluated at arbitrary parameters without resampling. The gradient is
//! accumulated in transposed form: each touched pair `x′` receives one
//! complex coefficient and `D(x′)` is evaluated once.

use std::collections::HashMap;

use faer::Mat;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ConfigurationPair, LindbladMap, SpinConfiguration};
use crate::ndo::{NdoParameters, SideTable};
use crate::sampler::SampleBatch;

const CHUNK: usize = 256;

/// Cost and gradient from one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub cost: f64,
    pub grad: Vec<f64>,
    /// Weighted variance of the local cost `|L(x)|²` over the batch.
    pub variance_of_cost: f64,
    /// `(Σw)² / Σw²`.
    pub n_effective: f64,
}

/// Hermitian covariance `S_{kk′}` of the log-derivatives.
#[derive(Clone, Debug)]
pub struct CovarianceMatrix {
    matrix: Mat<C64>,
}

impl CovarianceMatrix {
    /// Wraps a square matrix that is Hermitian to `1e−10`.
    pub fn from_matrix(matrix: Mat<C64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidConfiguration("covariance must be square".into()));
        }
        let s = Self { matrix };
        if s.hermiticity_error() > 1e-10 {
            return Err(Error::InvalidConfiguration("covariance must be Hermitian".into()));
        }
        Ok(s)
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.matrix[(i, j)]
    }

    pub fn matrix(&self) -> &Mat<C64> {
        &self.matrix
    }

    /// `Re S`, the matrix used for real parameter updates.
    pub fn real_part(&self) -> Mat<f64> {
        let p = self.dimension();
        Mat::from_fn(p, p, |i, j| self.matrix[(i, j)].re)
    }

    pub fn hermiticity_error(&self) -> f64 {
        let p = self.dimension();
        let mut worst = 0.0f64;
        for i in 0..p {
            for j in i..p {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm());
            }
        }
        worst
    }
}

fn check_finite(z: C64) -> Result<C64> {
    if z.re.is_finite() && z.im.is_finite() {
        Ok(z)
    } else {
        Err(Error::NonFiniteAmplitude)
    }
}

/// `L(x) = Σ_{x′} ℒ_{xx′} ρ(x′)/ρ(x)` for a density matrix given by its
/// logarithm element-wise.
pub fn local_value_with(map: &LindbladMap, x: &ConfigurationPair, log_rho: impl Fn(&ConfigurationPair) -> C64) -> Result<C64> {
    let lx = check_finite(log_rho(x))?;
    let mut acc = C64::new(0.0, 0.0);
    for (xp, v) in map.row(x).iter() {
        acc += v * (log_rho(xp) - lx).exp();
    }
    check_finite(acc)
}

/// `L(x)` for the network density matrix.
pub fn local_value(params: &NdoParameters, map: &LindbladMap, x: &ConfigurationPair) -> Result<C64> {
    local_value_with(map, x, |y| params.log_rho(y))
}

/// Local cost `𝒞(x) = |L(x)|²`.
pub fn local_cost(params: &NdoParameters, map: &LindbladMap, x: &ConfigurationPair) -> Result<f64> {
    Ok(local_value(params, map, x)?.norm_sqr())
}

#[derive(Clone, Copy, Debug)]
struct Term {
    node: u32,
    log_base: f64,
    start: u32,
    end: u32,
}

/// Cost and gradient on a frozen set of terms.
///
/// Each term `x` carries a log base weight `b(x)`; at parameters `θ` its
/// weight is `exp(b(x) + 2 Re log ρ_θ(x))`. Sampled terms use
/// `b = −log p̃(x)` (importance weights), enumerations use `b = 0`.
#[derive(Clone, Debug)]
pub struct Objective {
    template: NdoParameters,
    nodes: Vec<ConfigurationPair>,
    configs: Vec<SpinConfiguration>,
    sides: Vec<(u32, u32)>,
    terms: Vec<Term>,
    entries: Vec<(u32, C64)>,
    monte_carlo: bool,
}

/// Per-term quantities at one parameter point.
struct Locals {
    logs: Vec<C64>,
    /// `√w_i L_i` with the batch shift removed.
    scaled: Vec<C64>,
    weights: Vec<f64>,
    total: f64,
    shift: f64,
}

impl Objective {
    fn build(template: &NdoParameters, map: &LindbladMap, samples: &[ConfigurationPair], log_base: &[f64], monte_carlo: bool) -> Self {
        let mut index: HashMap<u64, u32> = HashMap::with_capacity(samples.len() * 4);
        let mut nodes = Vec::new();
        let mut intern = |x: &ConfigurationPair, nodes: &mut Vec<ConfigurationPair>| {
            *index.entry(x.key()).or_insert_with(|| {
                nodes.push(*x);
                (nodes.len() - 1) as u32
            })
        };
        let mut terms = Vec::with_capacity(samples.len());
        let mut entries = Vec::new();
        for (x, &b) in samples.iter().zip(log_base) {
            let node = intern(x, &mut nodes);
            let start = entries.len() as u32;
            for (xp, v) in map.row(x).iter() {
                entries.push((intern(xp, &mut nodes), *v));
            }
            terms.push(Term { node, log_base: b, start, end: entries.len() as u32 });
        }
        let mut side_index: HashMap<u32, u32> = HashMap::new();
        let mut configs = Vec::new();
        let mut side = |sigma: SpinConfiguration| {
            *side_index.entry(sigma.bits()).or_insert_with(|| {
                configs.push(sigma);
                (configs.len() - 1) as u32
            })
        };
        let sides = nodes.iter().map(|x| (side(x.row), side(x.col))).collect();
        Self { template: template.clone(), nodes, configs, sides, terms, entries, monte_carlo }
    }

    /// Importance-weighted terms from a Markov-chain (or enumerated) batch.
    pub fn from_batch(params: &NdoParameters, map: &LindbladMap, batch: &SampleBatch) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::ZeroWeightSum);
        }
        let base: Vec<f64> = (0..batch.len()).map(|i| batch.log_multiplicities()[i] - batch.log_sampling_density(i)).collect();
        let mc = batch.log_multiplicities().iter().all(|&m| m == 0.0);
        Ok(Self::build(params, map, batch.pairs(), &base, mc))
    }

    /// Exact sums over the `ΔS^z = 0` sector.
    pub fn exact(params: &NdoParameters, map: &LindbladMap) -> Self {
        let pairs: Vec<_> = ConfigurationPair::sector_zero(params.n_sites()).collect();
        Self::build(params, map, &pairs, &vec![0.0; pairs.len()], false)
    }

    /// Exact sums over all `4^N` pairs.
    pub fn all_pairs(params: &NdoParameters, map: &LindbladMap) -> Self {
        let pairs: Vec<_> = ConfigurationPair::all(params.n_sites()).collect();
        Self::build(params, map, &pairs, &vec![0.0; pairs.len()], false)
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Distinct pairs the terms and their rows touch.
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_params(&self) -> usize {
        self.template.len()
    }

    fn params_at(&self, theta: &[f64]) -> NdoParameters {
        self.template.with_values(theta.to_vec())
    }

    fn node_logs(&self, table: &SideTable) -> Result<Vec<C64>> {
        let logs: Vec<C64> = self.sides.par_iter().with_min_len(CHUNK).map(|&(r, c)| table.log_rho(r as usize, c as usize)).collect();
        if logs.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
            return Err(Error::NonFiniteAmplitude);
        }
        Ok(logs)
    }

    fn locals(&self, table: &SideTable) -> Result<Locals> {
        let logs = self.node_logs(table)?;
        let log_w: Vec<f64> = self.terms.iter().map(|t| t.log_base + 2.0 * logs[t.node as usize].re).collect();
        let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::ZeroWeightSum);
        }
        let weights: Vec<f64> = log_w.iter().map(|l| (l - shift).exp()).collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::ZeroWeightSum);
        }
        let scaled: Vec<C64> = self
            .terms
            .par_iter()
            .with_min_len(CHUNK)
            .map(|t| {
                let phase = C64::new(0.5 * (t.log_base - shift), -logs[t.node as usize].im);
                self.entries[t.start as usize..t.end as usize].iter().map(|&(n, v)| v * (logs[n as usize] + phase).exp()).sum::<C64>()
            })
            .collect();
        if scaled.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
            return Err(Error::NonFiniteAmplitude);
        }
        Ok(Locals { logs, scaled, weights, total, shift })
    }

    /// Weighted cost at `θ`.
    pub fn cost(&self, theta: &[f64]) -> Result<f64> {
        let params = self.params_at(theta);
        let loc = self.locals(&SideTable::new(&params, &self.configs))?;
        Ok(loc.scaled.iter().map(|a| a.norm_sqr()).sum::<f64>() / loc.total)
    }

    /// Weighted cost and gradient at `θ`.
    pub fn evaluate(&self, theta: &[f64]) -> Result<GradientEstimate> {
        let params = self.params_at(theta);
        let table = SideTable::new(&params, &self.configs);
        let loc = self.locals(&table)?;
        let w_total = loc.total;
        let cost = loc.scaled.iter().map(|a| a.norm_sqr()).sum::<f64>() / w_total;

        let mut coef = vec![C64::new(0.0, 0.0); self.nodes.len()];
        for (t, (a, w)) in self.terms.iter().zip(loc.scaled.iter().zip(&loc.weights)) {
            let phase = C64::new(0.5 * (t.log_base - loc.shift), -loc.logs[t.node as usize].im);
            let ac = a.conj() / w_total;
            for &(n, v) in &self.entries[t.start as usize..t.end as usize] {
                coef[n as usize] += ac * v * (loc.logs[n as usize] + phase).exp();
            }
            coef[t.node as usize] -= C64::new(cost * w / w_total, 0.0);
        }

        let grad: Vec<f64> = table.gradient_sum(&params, &self.sides, &coef).iter().map(|g| 2.0 * g).collect();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteAmplitude);
        }

        let w_sq: f64 = loc.weights.iter().map(|w| w * w).sum();
        let n_effective = w_total * w_total / w_sq;
        let variance_of_cost = loc
            .scaled
            .iter()
            .zip(&loc.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(a, w)| w / w_total * (a.norm_sqr() / w - cost).powi(2))
            .sum();
        if self.monte_carlo && n_effective < 0.1 * self.terms.len() as f64 {
            log::warn!("effective sample size {n_effective:.1} is below 10% of the batch size {}", self.terms.len());
        }
        Ok(GradientEstimate { cost, grad, variance_of_cost, n_effective })
    }

    /// Covariance of the log-derivatives over the terms, weighted as in
    /// [`Objective::cost`].
    pub fn s_matrix(&self, theta: &[f64]) -> Result<CovarianceMatrix> {
        let params = self.params_at(theta);
        let loc = self.locals(&SideTable::new(&params, &self.configs))?;
        let pairs: Vec<_> = self.terms.iter().map(|t| self.nodes[t.node as usize]).collect();
        let probs: Vec<f64> = loc.weights.iter().map(|w| w / loc.total).collect();
        Ok(covariance(&params, &pairs, &probs))
    }
}

/// `S = Σ p D* Dᵀ − (Σ p D*)(Σ p D)ᵀ` as `Oᴴ O` with rows `√p (D − D̄)`.
fn covariance(params: &NdoParameters, pairs: &[ConfigurationPair], probs: &[f64]) -> CovarianceMatrix {
    let p = params.len();
    let ds: Vec<Vec<C64>> = pairs.par_iter().with_min_len(CHUNK).map(|x| params.log_derivatives(x)).collect();
    let mut mean = vec![C64::new(0.0, 0.0); p];
    for (d, &w) in ds.iter().zip(probs) {
        for (m, dk) in mean.iter_mut().zip(d) {
            *m += w * dk;
        }
    }
    let o = Mat::<C64>::from_fn(ds.len(), p, |i, k| probs[i].sqrt() * (ds[i][k] - mean[k]));
    let s = o.adjoint() * &o;
    let matrix = Mat::from_fn(p, p, |i, j| 0.5 * (s[(i, j)] + s[(j, i)].conj()));
    CovarianceMatrix { matrix }
}

/// Weighted mean of the local cost over the batch at its own parameters.
pub fn estimate_cost(params: &NdoParameters, map: &LindbladMap, batch: &SampleBatch) -> Result<f64> {
    Objective::from_batch(params, map, batch)?.cost(params.as_slice())
}

/// Cost and gradient from the batch at its own parameters.
pub fn estimate_gradient(params: &NdoParameters, map: &LindbladMap, batch: &SampleBatch) -> Result<GradientEstimate> {
    Objective::from_batch(params, map, batch)?.evaluate(params.as_slice())
}

/// Cost and gradient from exact sums over all `4^N` pairs.
pub fn exact_gradient(params: &NdoParameters, map: &LindbladMap) -> Result<GradientEstimate> {
    Objective::all_pairs(params, map).evaluate(params.as_slice())
}

/// `S_{kk′} = ⟨w D*_k D_{k′}⟩/⟨w⟩ − ⟨w D*_k⟩⟨w D_{k′}⟩/⟨w⟩²` over the batch.
pub fn estimate_s_matrix(params: &NdoParameters, batch: &SampleBatch) -> Result<CovarianceMatrix> {
    if batch.is_empty() {
        return Err(Error::ZeroWeightSum);
    }
    let log_w: Vec<f64> = (0..batch.len()).map(|i| batch.log_multiplicities()[i] + batch.weights()[i].ln()).collect();
    let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - shift).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::ZeroWeightSum);
    }
    let probs: Vec<f64> = w.iter().map(|v| v / total).collect();
    Ok(covariance(params, batch.pairs(), &probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::exact_cost;
    use crate::model::{build_lindblad_map, ChainSpec, DriveSpec, SpinConfiguration};
    use crate::ndo::init_params;
    use crate::sampler::{sample_pairs, SamplerConfig};

    fn model_b(n: usize) -> LindbladMap {
        build_lindblad_map(&ChainSpec::new(n, 1.0, 1.0).unwrap(), &DriveSpec::model_b(n, 0.2).unwrap()).unwrap()
    }

    #[test]
    fn decay_with_identity_state() {
        let map = build_lindblad_map(&ChainSpec::single_site(), &DriveSpec::new(vec![0.0], vec![1.0]).unwrap()).unwrap();
        let up = SpinConfiguration::from_spins(&[1]).unwrap();
        let down = SpinConfiguration::from_spins(&[-1]).unwrap();
        let identity = |x: &ConfigurationPair| if x.is_diagonal() { C64::new(0.0, 0.0) } else { C64::new(f64::NEG_INFINITY, 0.0) };
        let l_up = local_value_with(&map, &ConfigurationPair::diagonal(up), identity).unwrap();
        assert!((l_up.norm_sqr() - 1.0).abs() < 1e-15);
        // (↓,↓) gains from (↑,↑) and loses nothing.
        let l_down = local_value_with(&map, &ConfigurationPair::diagonal(down), identity).unwrap();
        assert!((l_down - C64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn all_pair_cost_matches_exact_cost() {
        let map = model_b(3);
        let p = init_params(3, 1, 1, 21, 0.3).unwrap();
        let c = exact_gradient(&p, &map).unwrap().cost;
        let reference = exact_cost(&map, |x| p.log_rho(x).exp()).unwrap();
        assert!((c - reference).abs() <= 1e-12 * reference);
    }

    #[test]
    fn constant_derivatives_give_zero_covariance() {
        let p = init_params(3, 1, 1, 2, 0.2).unwrap();
        let x = ConfigurationPair::diagonal(SpinConfiguration::all_down(3));
        let s = covariance(&p, &[x; 5], &[0.2; 5]);
        assert!((0..s.dimension()).all(|i| (0..s.dimension()).all(|j| s.get(i, j).norm() < 1e-14)));
    }

    #[test]
    fn s_matrix_is_hermitian_with_real_nonnegative_diagonal() {
        let p = init_params(3, 1, 1, 2, 0.4).unwrap();
        let b = sample_pairs(&p, &SamplerConfig { n_samples: 300, seed: 4, ..SamplerConfig::default() }).unwrap();
        let s = estimate_s_matrix(&p, &b).unwrap();
        assert!(s.hermiticity_error() < 1e-10);
        for i in 0..s.dimension() {
            assert!(s.get(i, i).re >= 0.0 && s.get(i, i).im.abs() < 1e-12);
        }
    }

    #[test]
    fn mc_gradient_is_finite_and_cost_nonnegative() {
        let map = model_b(4);
        let p = init_params(4, 1, 1, 3, 0.1).unwrap();
        let b = sample_pairs(&p, &SamplerConfig { n_samples: 200, seed: 1, ..SamplerConfig::default() }).unwrap();
        let g = estimate_gradient(&p, &map, &b).unwrap();
        assert!(g.cost >= 0.0);
        assert!(g.grad.iter().all(|v| v.is_finite()));
        assert!(g.n_effective > 1.0 && g.n_effective <= 200.0 + 1e-9);
        let c = estimate_cost(&p, &map, &b).unwrap();
        assert!((c - g.cost).abs() <= 1e-14 * c.max(1.0));
    }
}
