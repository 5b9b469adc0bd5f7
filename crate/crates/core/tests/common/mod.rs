//! Explicit sums over hidden and ancillary units, shared by test targets.

use ndo_ness::model::{ConfigurationPair, SpinConfiguration};
use ndo_ness::ndo::{Block, NdoParameters};
use num_complex::Complex64 as C64;

fn spins(s: SpinConfiguration) -> Vec<f64> {
    (0..s.n_sites()).map(|i| f64::from(s.spin(i))).collect()
}

fn units(count: usize) -> impl Iterator<Item = Vec<f64>> {
    (0..1usize << count).map(move |mask| (0..count).map(|j| if mask >> j & 1 == 1 { 1.0 } else { -1.0 }).collect())
}

/// `log Σ_h exp(energy)` for one real RBM with the ancilla clamped to `a`.
#[allow(clippy::too_many_arguments)]
fn log_marginal(p: &NdoParameters, b: Block, c: Block, w: Block, u: Block, d: Option<Block>, s: &[f64], a: &[f64]) -> f64 {
    let (n, m, k) = (p.n_sites(), p.alpha() * p.n_sites(), p.beta_anc() * p.n_sites());
    let (b, c, w, u) = (p.block(b), p.block(c), p.block(w), p.block(u));
    let mut base: f64 = (0..n).map(|i| b[i] * s[i]).sum();
    for q in 0..k {
        base += a[q] * ((0..n).map(|i| u[i * k + q] * s[i]).sum::<f64>() + d.map_or(0.0, |d| p.block(d)[q]));
    }
    let terms: Vec<f64> =
        units(m).map(|h| base + (0..m).map(|j| h[j] * (c[j] + (0..n).map(|i| w[i * m + j] * s[i]).sum::<f64>())).sum::<f64>()).collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
}

/// `ψ(σ, a) = √p_λ(σ, a) · exp(i φ_μ(σ, a) / 2)`.
fn amplitude(p: &NdoParameters, s: &[f64], a: &[f64]) -> C64 {
    let lp = log_marginal(
        p,
        Block::VisibleLambda,
        Block::HiddenLambda,
        Block::WeightsLambda,
        Block::AncillaWeightsLambda,
        Some(Block::AncillaBiasLambda),
        s,
        a,
    );
    let phi = log_marginal(p, Block::VisibleMu, Block::HiddenMu, Block::WeightsMu, Block::AncillaWeightsMu, None, s, a);
    C64::from_polar((0.5 * lp).exp(), 0.5 * phi)
}

/// `ρ(σ, σ′) = Σ_a ψ(σ, a) ψ*(σ′, a)`.
pub fn brute_force_rho(p: &NdoParameters, x: &ConfigurationPair) -> C64 {
    let (s, sp) = (spins(x.row), spins(x.col));
    units(p.beta_anc() * p.n_sites()).map(|a| amplitude(p, &s, &a) * amplitude(p, &sp, &a).conj()).sum()
}
