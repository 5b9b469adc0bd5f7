//! Parameter updates: plain gradient descent, stochastic reconfiguration,
//! and NAGD+ (backtracking Nesterov descent with belief preconditioning),
//! plus the identity warm start and noise injection.
//!
//! One NAGD+ iteration, with `P = √ŝ + ε` the belief preconditioner:
//!
//! ```text
//! y   = x_t + γ_t (x_t − x_{t−1})
//! g   = ∇f(y)
//! x⁺  = y − P⁻¹ g / L̄
//! accept once f(x⁺) ≤ f(y) + ⟨g, x⁺ − y⟩ + (L̄/2) ‖x⁺ − y‖²_P, doubling L̄ otherwise
//! ```
//!
//! `‖v‖²_P = Σ P_i v_i²` is the metric the preconditioner induces, so `x⁺` is
//! the minimizer of the quadratic upper bound. With preconditioning disabled
//! `P = 1` and the test is the ordinary descent lemma.

use faer::linalg::solvers::{Solve, SolveLstsq};
use faer::{Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::CovarianceMatrix;
use crate::model::ConfigurationPair;
use crate::ndo::NdoParameters;

/// `x − η g`.
pub fn sgd_step(x: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
    assert_eq!(x.len(), grad.len());
    x.iter().zip(grad).map(|(a, g)| a - eta * g).collect()
}

/// Stochastic reconfiguration: solves `(Re S + shift·𝟙) δ = g` and returns
/// `x − η δ`. A Cholesky factorization is tried first, a least-squares QR
/// solve second.
pub fn sr_step(x: &[f64], grad: &[f64], s: &CovarianceMatrix, eta: f64, diag_shift: f64) -> Result<Vec<f64>> {
    let p = x.len();
    assert_eq!(grad.len(), p);
    assert_eq!(s.dimension(), p);
    let mut a = s.real_part();
    for i in 0..p {
        a[(i, i)] += diag_shift;
    }
    let rhs = Mat::<f64>::from_fn(p, 1, |i, _| grad[i]);
    let finite = |m: &Mat<f64>| (0..p).all(|i| m[(i, 0)].is_finite());
    let delta = match a.llt(Side::Lower) {
        Ok(llt) => Some(llt.solve(&rhs)).filter(finite),
        Err(_) => None,
    };
    let delta = match delta {
        Some(d) => d,
        None => {
            let d = a.qr().solve_lstsq(&rhs);
            if !finite(&d) {
                return Err(Error::SingularS);
            }
            d
        }
    };
    Ok((0..p).map(|i| x[i] - eta * delta[(i, 0)]).collect())
}

/// Nesterov extrapolation coefficient `γ_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Extrapolation {
    Fixed(f64),
    /// `γ_t = t / (t + 3)`.
    Dynamic,
}

impl Extrapolation {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            Self::Fixed(g) => g,
            Self::Dynamic => t as f64 / (t as f64 + 3.0),
        }
    }
}

/// NAGD+ hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NagdConfig {
    pub extrapolation: Extrapolation,
    /// Decay of the gradient EMA.
    pub beta1: f64,
    /// Decay of the belief EMA.
    pub beta2: f64,
    pub epsilon: f64,
    pub initial_lipschitz: f64,
    pub precondition: bool,
    /// With `false`, `L̄` is never changed and the step is taken even if the
    /// descent test fails.
    pub backtracking: bool,
    pub max_lipschitz: f64,
    /// Drop the momentum whenever an accepted step raises the cost.
    #[serde(default)]
    pub adaptive_restart: bool,
}

impl Default for NagdConfig {
    fn default() -> Self {
        Self {
            extrapolation: Extrapolation::Fixed(0.9),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            initial_lipschitz: 1.0,
            precondition: true,
            backtracking: true,
            max_lipschitz: 1e12,
            adaptive_restart: false,
        }
    }
}

impl NagdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.initial_lipschitz > 0.0
            && self.max_lipschitz >= self.initial_lipschitz
            && match self.extrapolation {
                Extrapolation::Fixed(g) => (0.0..1.0).contains(&g),
                Extrapolation::Dynamic => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfiguration(format!("invalid NAGD+ settings {self:?}")))
        }
    }
}

/// Iterates, Lipschitz estimate and EMA accumulators of NAGD+.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub x: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub lipschitz: f64,
    pub m_ema: Vec<f64>,
    pub s_ema: Vec<f64>,
    pub iteration: u64,
    /// Iteration at which the momentum was last restarted.
    #[serde(default)]
    pub momentum_origin: u64,
    #[serde(default)]
    pub last_cost: Option<f64>,
}

impl OptimizerState {
    pub fn new(x: Vec<f64>, config: &NagdConfig) -> Self {
        let p = x.len();
        Self {
            x_prev: x.clone(),
            x,
            lipschitz: config.initial_lipschitz,
            m_ema: vec![0.0; p],
            s_ema: vec![0.0; p],
            iteration: 0,
            momentum_origin: 0,
            last_cost: None,
        }
    }

    /// Extrapolated point `y_t`.
    pub fn lookahead(&self, config: &NagdConfig) -> Vec<f64> {
        let g = config.extrapolation.at(self.iteration - self.momentum_origin);
        self.x.iter().zip(&self.x_prev).map(|(a, b)| a + g * (a - b)).collect()
    }

    /// Restarts the momentum at the current point.
    pub fn reset_momentum(&mut self) {
        self.x_prev.clone_from(&self.x);
        self.momentum_origin = self.iteration;
        self.last_cost = None;
    }
}

/// Per-iteration record of an NAGD+ step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `f(y_t)`.
    pub cost_at_lookahead: f64,
    /// `f(x_{t+1})`.
    pub cost: f64,
    /// Right-hand side of the descent test at the accepted step.
    pub bound: f64,
    /// `L̄` used for the accepted step.
    pub lipschitz: f64,
    pub backtracks: u32,
    /// `‖x_{t+1} − x_t‖₂`.
    pub step_norm: f64,
    pub descent_satisfied: bool,
}

/// Relative allowance for roundoff in the descent test.
const DESCENT_SLACK: f64 = 1e-12;

/// One NAGD+ iteration. `grad_fn` returns `(f(y), ∇f(y))` and `cost_fn`
/// evaluates `f`; both must use the same frozen batch.
pub fn nagd_plus_step(
    state: &mut OptimizerState,
    config: &NagdConfig,
    mut cost_fn: impl FnMut(&[f64]) -> Result<f64>,
    mut grad_fn: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<StepDiagnostics> {
    let y = state.lookahead(config);
    let (f_y, g) = grad_fn(&y)?;
    if !f_y.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAmplitude);
    }
    let t = state.iteration + 1;
    let precond: Vec<f64> = if config.precondition {
        let (b1, b2) = (config.beta1, config.beta2);
        for ((m, s), gi) in state.m_ema.iter_mut().zip(state.s_ema.iter_mut()).zip(&g) {
            *m = b1 * *m + (1.0 - b1) * gi;
            *s = b2 * *s + (1.0 - b2) * (gi - *m).powi(2) + config.epsilon;
        }
        let corr = 1.0 - b2.powi(t.min(i32::MAX as u64) as i32);
        state.s_ema.iter().map(|s| (s / corr).sqrt() + config.epsilon).collect()
    } else {
        vec![1.0; g.len()]
    };

    let mut l = state.lipschitz;
    let mut backtracks = 0u32;
    let (x_new, f_new, bound, satisfied) = loop {
        let x_new: Vec<f64> = y.iter().zip(&g).zip(&precond).map(|((yi, gi), pi)| yi - gi / (pi * l)).collect();
        // A trial point whose amplitudes overflow just fails the test.
        let f_new = match cost_fn(&x_new) {
            Err(Error::NonFiniteAmplitude | Error::ZeroWeightSum) => f64::INFINITY,
            other => other?,
        };
        let (mut lin, mut quad) = (0.0, 0.0);
        for i in 0..y.len() {
            let d = x_new[i] - y[i];
            lin += g[i] * d;
            quad += precond[i] * d * d;
        }
        let bound = f_y + lin + 0.5 * l * quad;
        let satisfied = f_new.is_finite() && f_new <= bound + DESCENT_SLACK * f_y.abs();
        if satisfied || !config.backtracking {
            break (x_new, f_new, bound, satisfied);
        }
        l *= 2.0;
        backtracks += 1;
        if l > config.max_lipschitz {
            return Err(Error::BacktrackOverflow { lipschitz: l });
        }
    };

    let step_norm = x_new.iter().zip(&state.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let used = l;
    if config.backtracking && backtracks == 0 {
        l = (l / 2.0).max(f64::MIN_POSITIVE);
    }
    state.x_prev = std::mem::replace(&mut state.x, x_new);
    state.lipschitz = l;
    state.iteration = t;
    if config.adaptive_restart && state.last_cost.is_some_and(|c| f_new > c) {
        state.reset_momentum();
    }
    state.last_cost = Some(f_new);
    Ok(StepDiagnostics { cost_at_lookahead: f_y, cost: f_new, bound, lipschitz: used, backtracks, step_norm, descent_satisfied: satisfied })
}

/// `Σ |ρ(x) − δ_{σσ′}|²` over the pairs and its gradient, with `ρ` the
/// unnormalized network output.
fn mse_terms(params: &NdoParameters, pairs: &[ConfigurationPair], grad: Option<&mut [f64]>) -> Result<f64> {
    let mut d = vec![num_complex::Complex64::new(0.0, 0.0); params.len()];
    let mut total = 0.0;
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    for x in pairs {
        let rho = params.log_rho(x).exp();
        let target = if x.is_diagonal() { 1.0 } else { 0.0 };
        let r = rho - target;
        if !r.re.is_finite() || !r.im.is_finite() {
            return Err(Error::NonFiniteAmplitude);
        }
        total += r.norm_sqr();
        if let Some(g) = grad.as_deref_mut() {
            // ∂|ρ − δ|² = 2 Re[(ρ − δ)* ρ D].
            params.log_derivatives_into(x, &mut d);
            let c = r.conj() * rho;
            for (gk, dk) in g.iter_mut().zip(&d) {
                *gk += 2.0 * (c.re * dk.re - c.im * dk.im);
            }
        }
    }
    Ok(total)
}

/// Trace of a warm start: the mean squared error before every step.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainTrace {
    pub mse: Vec<f64>,
    pub final_mse: f64,
}

/// Pair count up to which the warm start sums over every pair.
pub const PRETRAIN_FULL_SITES: usize = 6;

/// Backtracked gradient descent on `‖ρ − 𝟙‖² / 4^N`. Up to
/// [`PRETRAIN_FULL_SITES`] sites every pair enters; above, each step uses a
/// fresh uniform subsample of `subsample_size` pairs.
pub fn mse_pretrain(params: &NdoParameters, n_steps: usize, subsample_size: usize, seed: u64) -> Result<(NdoParameters, PretrainTrace)> {
    let n = params.n_sites();
    let mut current = params.clone();
    let mut trace = PretrainTrace { mse: Vec::with_capacity(n_steps), final_mse: f64::NAN };
    let full = n <= PRETRAIN_FULL_SITES;
    let all: Vec<ConfigurationPair> = if full { ConfigurationPair::all(n).collect() } else { Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lipschitz = 1.0f64;
    let scale = 1.0 / (1u64 << (2 * n)) as f64;
    let mut grad = vec![0.0; params.len()];

    let draw = |rng: &mut ChaCha8Rng| -> Vec<ConfigurationPair> {
        use rand::Rng;
        let dim = 1u64 << n;
        (0..subsample_size.max(1))
            .map(|_| {
                let r = rng.random_range(0..dim) as u32;
                let c = rng.random_range(0..dim) as u32;
                ConfigurationPair::from_dense_index(((r as usize) << n) | c as usize, n).expect("in range")
            })
            .collect()
    };

    for _ in 0..n_steps {
        let sample = if full { None } else { Some(draw(&mut rng)) };
        let pairs: &[ConfigurationPair] = sample.as_deref().unwrap_or(&all);
        let norm = if full { scale } else { 1.0 / pairs.len() as f64 };
        let f0 = norm * mse_terms(&current, pairs, Some(&mut grad))?;
        grad.iter_mut().for_each(|g| *g *= norm);
        trace.mse.push(f0);
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let mut first = true;
        loop {
            let x_new: Vec<f64> = current.as_slice().iter().zip(&grad).map(|(x, g)| x - g / lipschitz).collect();
            let cand = current.with_values(x_new);
            let f1 = mse_terms(&cand, pairs, None).map(|v| norm * v);
            if matches!(f1, Ok(v) if v <= f0 - 0.5 * g2 / lipschitz + DESCENT_SLACK * f0) {
                current = cand;
                if first {
                    lipschitz /= 2.0;
                }
                break;
            }
            first = false;
            lipschitz *= 2.0;
            if lipschitz > 1e300 {
                return Err(Error::BacktrackOverflow { lipschitz });
            }
        }
    }
    trace.final_mse = if full {
        scale * mse_terms(&current, &all, None)?
    } else {
        let sample = draw(&mut rng);
        mse_terms(&current, &sample, None)? / sample.len() as f64
    };
    Ok((current, trace))
}

/// Adds i.i.d. `N(0, scale²)` noise to every parameter.
pub fn inject_noise(params: &NdoParameters, scale: f64, seed: u64) -> Result<NdoParameters> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfiguration(format!("noise scale must be nonnegative, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(params.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("valid normal");
    let values = params.as_slice().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Ok(params.with_values(values))
}

/// Event-driven noise trigger: fires when the relative cost change over the
/// last `window` iterations is below `tolerance` while the cost exceeds
/// `factor` times the best cost seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrigger {
    pub window: usize,
    pub tolerance: f64,
    pub factor: f64,
    pub scale: f64,
    history: Vec<f64>,
    best: f64,
}

impl Default for NoiseTrigger {
    fn default() -> Self {
        Self::new(100, 1e-4, 10.0, 1e-3)
    }
}

impl NoiseTrigger {
    pub fn new(window: usize, tolerance: f64, factor: f64, scale: f64) -> Self {
        Self { window: window.max(1), tolerance, factor, scale, history: Vec::new(), best: f64::INFINITY }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records a cost; returns `true` when noise should be injected. The
    /// window restarts after firing.
    pub fn observe(&mut self, cost: f64) -> bool {
        if cost.is_finite() {
            self.best = self.best.min(cost);
        }
        self.history.push(cost);
        if self.history.len() > self.window + 1 {
            self.history.remove(0);
        }
        if self.history.len() <= self.window {
            return false;
        }
        let (old, new) = (self.history[0], cost);
        let rel = (new - old).abs() / old.abs().max(f64::MIN_POSITIVE);
        if rel < self.tolerance && cost > self.factor * self.best {
            self.history.clear();
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(a: &[f64]) -> impl Fn(&[f64]) -> f64 + '_ {
        move |x| 0.5 * x.iter().zip(a).map(|(xi, ai)| ai * xi * xi).sum::<f64>()
    }

    #[test]
    fn sgd_fixed_point_and_contraction() {
        assert_eq!(sgd_step(&[1.0, -2.0], &[0.0, 0.0], 0.05), vec![1.0, -2.0]);
        let mut x = vec![1.0, -3.0];
        for _ in 0..5 {
            let prev = x.clone();
            x = sgd_step(&x, &x.clone(), 0.1);
            for (a, b) in x.iter().zip(&prev) {
                assert!((a - 0.9 * b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn one_dimensional_backtracking_trace() {
        // f = ½·4·x², L̄ starts at 1 and must reach 4.
        let f = |x: &[f64]| 2.0 * x[0] * x[0];
        let config = NagdConfig { extrapolation: Extrapolation::Fixed(0.0), precondition: false, ..NagdConfig::default() };
        let mut state = OptimizerState::new(vec![1.0], &config);
        let d = nagd_plus_step(&mut state, &config, |x| Ok(f(x)), |x| Ok((f(x), vec![4.0 * x[0]]))).unwrap();
        assert_eq!(d.backtracks, 2);
        assert_eq!(d.lipschitz, 4.0);
        assert!(d.descent_satisfied);
        assert_eq!(state.x, vec![0.0]);
    }

    #[test]
    fn lipschitz_halves_after_immediate_success() {
        let f = |x: &[f64]| 0.5 * x[0] * x[0];
        let config =
            NagdConfig { extrapolation: Extrapolation::Fixed(0.0), precondition: false, initial_lipschitz: 8.0, ..NagdConfig::default() };
        let mut state = OptimizerState::new(vec![1.0], &config);
        let d = nagd_plus_step(&mut state, &config, |x| Ok(f(x)), |x| Ok((f(x), vec![x[0]]))).unwrap();
        assert_eq!(d.backtracks, 0);
        assert_eq!(state.lipschitz, 4.0);
    }

    #[test]
    fn reduces_to_gradient_descent() {
        let a = [1.0, 3.0, 0.5];
        let f = quad(&a);
        let config = NagdConfig {
            extrapolation: Extrapolation::Fixed(0.0),
            precondition: false,
            backtracking: false,
            initial_lipschitz: 5.0,
            ..NagdConfig::default()
        };
        let mut state = OptimizerState::new(vec![1.0, -1.0, 2.0], &config);
        let mut x = state.x.clone();
        for _ in 0..20 {
            let grad = |x: &[f64]| x.iter().zip(&a).map(|(xi, ai)| ai * xi).collect::<Vec<_>>();
            nagd_plus_step(&mut state, &config, |y| Ok(f(y)), |y| Ok((f(y), grad(y)))).unwrap();
            x = sgd_step(&x, &grad(&x), 0.2);
            for (p, q) in state.x.iter().zip(&x) {
                assert!((p - q).abs() <= 1e-12 * q.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn overflow_on_inconsistent_objective() {
        let config = NagdConfig { precondition: false, ..NagdConfig::default() };
        let mut state = OptimizerState::new(vec![1.0], &config);
        let err = nagd_plus_step(&mut state, &config, |_| Ok(f64::NAN), |_| Ok((1.0, vec![1.0]))).unwrap_err();
        assert!(matches!(err, Error::BacktrackOverflow { .. }));
    }

    #[test]
    fn sr_with_identity_is_sgd() {
        let p = 4;
        let s = CovarianceMatrix::from_matrix(Mat::<num_complex::Complex64>::identity(p, p)).unwrap();
        let x = vec![0.3, -0.2, 1.0, 2.0];
        let g = vec![0.1, 0.4, -0.5, 0.0];
        let a = sr_step(&x, &g, &s, 0.05, 0.0).unwrap();
        let b = sgd_step(&x, &g, 0.05);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn noise_trigger_fires_on_plateau_above_best() {
        let mut t = NoiseTrigger::new(5, 1e-4, 10.0, 1e-3);
        assert!(!t.observe(0.01));
        let fired: Vec<bool> = (0..7).map(|_| t.observe(1.0)).collect();
        assert_eq!(fired, vec![false, false, false, false, false, true, false]);
        let mut t = NoiseTrigger::new(5, 1e-4, 10.0, 1e-3);
        assert!((0..20).all(|_| !t.observe(1.0)));
    }

    #[test]
    fn noise_is_deterministic_and_zero_scale_is_identity() {
        let p = NdoParameters::zeros(3, 1, 1).unwrap();
        assert_eq!(inject_noise(&p, 0.0, 1).unwrap(), p);
        assert_eq!(inject_noise(&p, 0.1, 7).unwrap(), inject_noise(&p, 0.1, 7).unwrap());
        assert!(inject_noise(&p, -1.0, 7).is_err());
    }

    #[test]
    fn pretrain_zero_steps_is_identity() {
        let p = crate::ndo::init_params(2, 1, 1, 3, 0.01).unwrap();
        let (q, trace) = mse_pretrain(&p, 0, 16, 0).unwrap();
        assert_eq!(p, q);
        assert!(trace.mse.is_empty());
    }
}
