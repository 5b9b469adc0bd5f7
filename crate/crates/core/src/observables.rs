//! Observables from diagonal samples, and the exponential extrapolation of
//! convergence series.
//!
//! For a diagonal batch drawn from `p(σ) ∝ ρ(σ, σ)`,
//!
//! ```text
//! Tr(Oρ) = Σ_σ p(σ) Σ_{σ′} O(σ, σ′) ρ(σ′, σ) / ρ(σ, σ)
//! ```
//!
//! and the inner sum is evaluated exactly over the sparse row of `O`.

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{ChainSpec, ConfigurationPair, OperatorRows, SparseOperator, SpinConfiguration};
use crate::ndo::NdoParameters;
use crate::sampler::DiagonalBatch;

/// Mean and standard error of an observable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// Imaginary part of the estimate; zero up to noise for Hermitian `O`.
    pub imaginary_residual: f64,
}

/// `σ^z` on one site, evaluated without storing a matrix.
#[derive(Clone, Copy, Debug)]
pub struct SiteMagnetization {
    n_sites: usize,
    site: usize,
}

impl SiteMagnetization {
    pub fn new(n_sites: usize, site: usize) -> Result<Self> {
        if site >= n_sites {
            return Err(Error::InvalidConfiguration(format!("site {site} outside a chain of {n_sites}")));
        }
        Ok(Self { n_sites, site })
    }
}

impl OperatorRows for SiteMagnetization {
    fn dimension(&self) -> usize {
        1 << self.n_sites
    }

    fn row_entries(&self, row: usize, out: &mut Vec<(usize, C64)>) {
        let up = row >> self.site & 1 == 1;
        out.push((row, C64::new(if up { 1.0 } else { -1.0 }, 0.0)));
    }

    fn is_hermitian_hint(&self) -> bool {
        true
    }
}

/// Bond current `i(σ⁺_j σ⁻_k − σ⁻_j σ⁺_k)`, evaluated without storing a
/// matrix.
#[derive(Clone, Copy, Debug)]
pub struct BondCurrent {
    n_sites: usize,
    j: usize,
    k: usize,
}

impl BondCurrent {
    pub fn new(n_sites: usize, j: usize, k: usize) -> Result<Self> {
        if j >= n_sites || k >= n_sites || j == k {
            return Err(Error::InvalidConfiguration(format!("bad bond ({j}, {k}) for {n_sites} sites")));
        }
        Ok(Self { n_sites, j, k })
    }
}

impl OperatorRows for BondCurrent {
    fn dimension(&self) -> usize {
        1 << self.n_sites
    }

    fn row_entries(&self, row: usize, out: &mut Vec<(usize, C64)>) {
        let (a, b) = (row >> self.j & 1, row >> self.k & 1);
        if a != b {
            let col = row ^ (1 << self.j) ^ (1 << self.k);
            // ⟨σ|σ⁺_j σ⁻_k|σ′⟩ is nonzero when σ has j up and k down.
            out.push((col, C64::new(0.0, if a == 1 { 1.0 } else { -1.0 })));
        }
    }

    fn is_hermitian_hint(&self) -> bool {
        true
    }
}

/// `σ^z_site` as a sparse matrix (zero-based site).
pub fn magnetization_op(n_sites: usize, site: usize) -> Result<SparseOperator> {
    let op = SiteMagnetization::new(n_sites, site)?;
    Ok(SparseOperator::from_row_fn(op.dimension(), |r, out| op.row_entries(r, out)))
}

/// `Î_jk = i(σ⁺_j σ⁻_k − σ⁻_j σ⁺_k)` as a sparse matrix (zero-based sites,
/// the coupling `J` omitted).
pub fn spin_current_op(chain: &ChainSpec, j: usize, k: usize) -> Result<SparseOperator> {
    let op = BondCurrent::new(chain.n_sites(), j, k)?;
    Ok(SparseOperator::from_row_fn(op.dimension(), |r, out| op.row_entries(r, out)))
}

/// Inner sums `Σ_{σ′} O(σ, σ′) ρ(σ′, σ)/ρ(σ, σ)` for every sample and operator.
fn local_values(params: &NdoParameters, ops: &[&(dyn OperatorRows + Sync)], batch: &DiagonalBatch) -> Result<Vec<Vec<C64>>> {
    let n = params.n_sites();
    for op in ops {
        if op.dimension() != 1 << n {
            return Err(Error::InvalidConfiguration("operator dimension does not match the chain".into()));
        }
    }
    batch
        .configs()
        .par_iter()
        .with_min_len(64)
        .map(|&sigma| {
            let diag = params.log_rho_diagonal(sigma);
            let mut buf = Vec::new();
            ops.iter()
                .map(|op| {
                    buf.clear();
                    op.row_entries(sigma.index(), &mut buf);
                    let mut acc = C64::new(0.0, 0.0);
                    for &(c, v) in &buf {
                        let ratio = if c == sigma.index() {
                            C64::new(1.0, 0.0)
                        } else {
                            let x = ConfigurationPair::new(SpinConfiguration::from_index(c, n)?, sigma)?;
                            (params.log_rho(&x) - diag).exp()
                        };
                        acc += v * ratio;
                    }
                    if acc.re.is_finite() && acc.im.is_finite() {
                        Ok(acc)
                    } else {
                        Err(Error::NonFiniteAmplitude)
                    }
                })
                .collect()
        })
        .collect()
}

/// Recorded samples per block in the batch-means error estimate (ten
/// thinning strides of the chain).
pub const BLOCK_SAMPLES: usize = 10;

fn reduce(values: &[C64], batch: &DiagonalBatch) -> ObservableEstimate {
    let w = batch.weights();
    let total: f64 = w.iter().sum();
    let mean: C64 = values.iter().zip(w).map(|(v, wi)| v * *wi).sum::<C64>() / total;
    let std_error = if batch.is_exact() { 0.0 } else { blocked_error(values, batch.chain_lengths()) };
    ObservableEstimate { value: mean.re, std_error, n_samples: values.len(), imaginary_residual: mean.im }
}

/// Standard error from non-overlapping block means within each chain.
fn blocked_error(values: &[C64], chain_lengths: &[usize]) -> f64 {
    let mut blocks = Vec::new();
    let mut start = 0;
    for &len in chain_lengths {
        let chain = &values[start..start + len];
        for b in chain.chunks_exact(BLOCK_SAMPLES) {
            blocks.push(b.iter().map(|v| v.re).sum::<f64>() / BLOCK_SAMPLES as f64);
        }
        start += len;
    }
    let data: Vec<f64> = if blocks.len() >= 2 { blocks } else { values.iter().map(|v| v.re).collect() };
    let m = data.len() as f64;
    if m < 2.0 {
        return f64::NAN;
    }
    let mean = data.iter().sum::<f64>() / m;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (var / m).sqrt()
}

/// `Tr(Oρ)` from a diagonal batch. Exact batches report zero error.
pub fn estimate_observable(params: &NdoParameters, obs: &(dyn OperatorRows + Sync), batch: &DiagonalBatch) -> Result<ObservableEstimate> {
    let values = local_values(params, &[obs], batch)?;
    let column: Vec<C64> = values.iter().map(|v| v[0]).collect();
    let est = reduce(&column, batch);
    if obs.is_hermitian_hint() && est.imaginary_residual.abs() > 1e-8 {
        log::debug!("imaginary residual {:e} for a Hermitian observable", est.imaginary_residual);
    }
    Ok(est)
}

/// Magnetizations, bond currents and their mean from one diagonal batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainObservables {
    pub magnetization: Vec<ObservableEstimate>,
    /// `⟨Î_{k,k+1}⟩` for `k = 0..N−1`.
    pub bond_currents: Vec<ObservableEstimate>,
    pub mean_current: ObservableEstimate,
}

/// Every site magnetization, every bond current and the mean current,
/// all evaluated on one shared batch.
pub fn chain_observables(params: &NdoParameters, batch: &DiagonalBatch) -> Result<ChainObservables> {
    let n = params.n_sites();
    let mags: Vec<SiteMagnetization> = (0..n).map(|i| SiteMagnetization::new(n, i)).collect::<Result<_>>()?;
    let bonds: Vec<BondCurrent> = (0..n.saturating_sub(1)).map(|k| BondCurrent::new(n, k, k + 1)).collect::<Result<_>>()?;
    let mut ops: Vec<&(dyn OperatorRows + Sync)> = Vec::with_capacity(2 * n);
    ops.extend(mags.iter().map(|m| m as &(dyn OperatorRows + Sync)));
    ops.extend(bonds.iter().map(|b| b as &(dyn OperatorRows + Sync)));
    let values = local_values(params, &ops, batch)?;
    let column = |j: usize| -> Vec<C64> { values.iter().map(|v| v[j]).collect() };
    let magnetization = (0..n).map(|i| reduce(&column(i), batch)).collect();
    let bond_currents = (0..bonds.len()).map(|k| reduce(&column(n + k), batch)).collect();
    let mean: Vec<C64> = values.iter().map(|v| v[n..].iter().sum::<C64>() / bonds.len().max(1) as f64).collect();
    Ok(ChainObservables { magnetization, bond_currents, mean_current: reduce(&mean, batch) })
}

/// Mean bond current `Ī = (1/(N−1)) Σ_k ⟨Î_{k,k+1}⟩` on one shared batch.
pub fn mean_current(params: &NdoParameters, chain: &ChainSpec, batch: &DiagonalBatch) -> Result<ObservableEstimate> {
    if chain.n_sites() != params.n_sites() {
        return Err(Error::InvalidConfiguration("chain and parameters disagree on N".into()));
    }
    Ok(chain_observables(params, batch)?.mean_current)
}

/// Result of fitting `I(t) = I* + C λ^t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub limit: f64,
    pub amplitude: f64,
    pub rate: f64,
    pub residual_rms: f64,
    pub limit_se: f64,
    pub amplitude_se: f64,
    pub rate_se: f64,
    /// Set for a constant series, where `λ` is unidentifiable and reported
    /// as `0.5` with `C = 0`.
    pub degenerate: bool,
    /// `y_t − I(t)` in input order.
    pub residuals: Vec<f64>,
}

const GRID_POINTS: usize = 400;

fn linear_fit(series: &[(f64, f64)], lambda: f64) -> Option<(f64, f64, f64)> {
    // Least squares for y ≈ a + c·λ^t.
    let (mut n, mut sx, mut sxx, mut sy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, y) in series {
        let x = lambda.powf(t);
        n += 1.0;
        sx += x;
        sxx += x * x;
        sy += y;
        sxy += x * y;
    }
    let det = n * sxx - sx * sx;
    if det.abs() <= 1e-14 * n * sxx.max(f64::MIN_POSITIVE) {
        return None;
    }
    let c = (n * sxy - sx * sy) / det;
    let a = (sy - c * sx) / n;
    let sse = sse(series, a, c, lambda);
    sse.is_finite().then_some((a, c, sse))
}

fn sse(series: &[(f64, f64)], a: f64, c: f64, lambda: f64) -> f64 {
    series.iter().map(|&(t, y)| (a + c * lambda.powf(t) - y).powi(2)).sum()
}

fn jtj(series: &[(f64, f64)], p: [f64; 3]) -> (Mat<f64>, Mat<f64>) {
    let [a, c, l] = p;
    let mut m = Mat::<f64>::zeros(3, 3);
    let mut g = Mat::<f64>::zeros(3, 1);
    for &(t, y) in series {
        let lt = l.powf(t);
        let j = [1.0, lt, if t == 0.0 { 0.0 } else { c * t * l.powf(t - 1.0) }];
        let r = a + c * lt - y;
        for u in 0..3 {
            g[(u, 0)] += j[u] * r;
            for v in 0..3 {
                m[(u, v)] += j[u] * j[v];
            }
        }
    }
    (m, g)
}

/// Nonlinear least squares for `I(t) = I* + C λ^t`: `λ` is seeded on a grid
/// with `1 − λ` log-spaced in `[10⁻⁶, 0.999]`, `(I*, C)` is solved linearly
/// per seed, and the best seed is refined by Levenberg–Marquardt.
pub fn fit_exponential(series: &[(f64, f64)]) -> Result<FitResult> {
    if series.len() < 10 {
        return Err(Error::InvalidConfiguration(format!("need at least 10 points, got {}", series.len())));
    }
    if series.iter().any(|(t, y)| !t.is_finite() || !y.is_finite()) {
        return Err(Error::FitDiverged);
    }
    let ys: Vec<f64> = series.iter().map(|p| p.1).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let spread = ys.iter().fold(0.0f64, |m, y| m.max((y - mean).abs()));
    if spread <= 1e-12 * mean.abs().max(1.0) {
        let residuals: Vec<f64> = ys.iter().map(|y| y - mean).collect();
        let rms = (residuals.iter().map(|r| r * r).sum::<f64>() / ys.len() as f64).sqrt();
        return Ok(FitResult {
            limit: mean,
            amplitude: 0.0,
            rate: 0.5,
            residual_rms: rms,
            limit_se: rms / (ys.len() as f64).sqrt(),
            amplitude_se: f64::NAN,
            rate_se: f64::NAN,
            degenerate: true,
            residuals,
        });
    }

    let (lo, hi) = (1e-6f64.ln(), 0.999f64.ln());
    let mut best: Option<([f64; 3], f64)> = None;
    for i in 0..GRID_POINTS {
        let u = (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp();
        let lambda = 1.0 - u;
        if let Some((a, c, s)) = linear_fit(series, lambda) {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some(([a, c, lambda], s));
            }
        }
    }
    let (mut p, mut cost) = best.ok_or(Error::FitDiverged)?;

    let mut mu = 1e-3;
    for _ in 0..500 {
        let (m, g) = jtj(series, p);
        let mut damped = m.clone();
        for u in 0..3 {
            damped[(u, u)] += mu * m[(u, u)].max(1e-300);
        }
        let step = damped.partial_piv_lu().solve(&g);
        let cand = [p[0] - step[(0, 0)], p[1] - step[(1, 0)], p[2] - step[(2, 0)]];
        let cand_cost = if cand[2] > 0.0 && cand[2] < 1.0 { sse(series, cand[0], cand[1], cand[2]) } else { f64::INFINITY };
        if cand_cost.is_finite() && cand_cost <= cost {
            let small_step = (0..3).all(|u| (cand[u] - p[u]).abs() <= 1e-15 * p[u].abs().max(1e-300));
            p = cand;
            cost = cand_cost;
            mu = (mu / 3.0).max(1e-15);
            if small_step {
                break;
            }
        } else {
            mu *= 4.0;
            if mu > 1e16 {
                break;
            }
        }
    }
    if !p.iter().all(|v| v.is_finite()) || !cost.is_finite() {
        return Err(Error::FitDiverged);
    }

    let n = series.len() as f64;
    let residuals: Vec<f64> = series.iter().map(|&(t, y)| y - (p[0] + p[1] * p[2].powf(t))).collect();
    let s2 = cost / (n - 3.0);
    let (m, _) = jtj(series, p);
    let inv = m.partial_piv_lu().solve(Mat::<f64>::identity(3, 3));
    let se = |u: usize| (s2 * inv[(u, u)]).max(0.0).sqrt();
    Ok(FitResult {
        limit: p[0],
        amplitude: p[1],
        rate: p[2],
        residual_rms: (cost / n).sqrt(),
        limit_se: se(0),
        amplitude_se: se(1),
        rate_se: se(2),
        degenerate: false,
        residuals,
    })
}

/// One histogram bin `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width histogram over the data range (the last bin is closed).
pub fn residual_histogram(residuals: &[f64], n_bins: usize) -> Vec<HistogramBin> {
    if residuals.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let lo = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = residuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let mut bins: Vec<HistogramBin> =
        (0..n_bins).map(|i| HistogramBin { lo: lo + i as f64 * width, hi: lo + (i + 1) as f64 * width, count: 0 }).collect();
    for &r in residuals {
        let i = (((r - lo) / width) as usize).min(n_bins - 1);
        bins[i].count += 1;
    }
    bins
}

fn poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Shapiro–Wilk statistic `W` and its p-value (Royston's approximation,
/// valid for `3 ≤ n ≤ 5000`).
pub fn shapiro_wilk(data: &[f64]) -> Result<(f64, f64)> {
    let n = data.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::InvalidConfiguration(format!("Shapiro-Wilk needs 3..=5000 points, got {n}")));
    }
    let mut x = data.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range.is_nan() || range <= 0.0 {
        return Err(Error::InvalidConfiguration("Shapiro-Wilk needs non-constant data".into()));
    }
    let normal = Normal::standard();
    let nf = n as f64;
    let mut a = vec![0.0; n];
    if n == 3 {
        a[0] = -std::f64::consts::FRAC_1_SQRT_2;
        a[2] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let m: Vec<f64> = (1..=n).map(|i| normal.inverse_cdf((i as f64 - 0.375) / (nf + 0.25))).collect();
        let mm: f64 = m.iter().map(|v| v * v).sum();
        let u = 1.0 / nf.sqrt();
        let an = poly(&[0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], u) + m[n - 1] / mm.sqrt();
        if n > 5 {
            let an1 = poly(&[0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], u) + m[n - 2] / mm.sqrt();
            let phi = (mm - 2.0 * m[n - 1].powi(2) - 2.0 * m[n - 2].powi(2)) / (1.0 - 2.0 * an * an - 2.0 * an1 * an1);
            for i in 2..n - 2 {
                a[i] = m[i] / phi.sqrt();
            }
            a[n - 1] = an;
            a[0] = -an;
            a[n - 2] = an1;
            a[1] = -an1;
        } else {
            let phi = (mm - 2.0 * m[n - 1].powi(2)) / (1.0 - 2.0 * an * an);
            for i in 1..n - 1 {
                a[i] = m[i] / phi.sqrt();
            }
            a[n - 1] = an;
            a[0] = -an;
        }
    }
    let mean = x.iter().sum::<f64>() / nf;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * xi).sum();
    let w = (num * num / ss).min(1.0);

    let p = if n == 3 {
        let p = 6.0 / std::f64::consts::PI * (w.sqrt().asin() - 0.75f64.sqrt().asin());
        p.max(0.0)
    } else if n <= 11 {
        let gamma = -2.273 + 0.459 * nf;
        let mu = poly(&[0.5440, -0.39978, 0.025054, -0.0006714], nf);
        let sigma = poly(&[1.3822, -0.77857, 0.062767, -0.0020322], nf).exp();
        let z = (-(gamma - (1.0 - w).ln()).ln() - mu) / sigma;
        1.0 - normal.cdf(z)
    } else {
        let ln_n = nf.ln();
        let mu = poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], ln_n);
        let sigma = poly(&[-0.4803, -0.082676, 0.0030302], ln_n).exp();
        let z = ((1.0 - w).ln() - mu) / sigma;
        1.0 - normal.cdf(z)
    };
    Ok((w, p))
}
