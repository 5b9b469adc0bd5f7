//! Metropolis sampling of configuration pairs from the reweighted
//! distribution `p̃(x) ∝ |ρ(x)|^{2β_rw}` on the `ΔS^z = 0` sector, and of
//! diagonal configurations from `p(σ) ∝ ρ(σ, σ)`.
//!
//! Each chain owns a ChaCha stream selected by its index, so a batch is a
//! pure function of the parameters and the sampler configuration.

use std::io::{Read, Write};

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConfigurationPair, SpinConfiguration};
use crate::ndo::NdoParameters;

/// Default reweighting exponent.
pub const DEFAULT_BETA_RW: f64 = 0.15;

/// Chain settings shared by the pair and diagonal samplers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Reweighting exponent `β_rw ∈ (0, 1]`.
    pub beta_rw: f64,
    /// Total number of recorded samples across all chains.
    pub n_samples: usize,
    /// Steps discarded per chain; `None` means `10·N²`.
    pub n_burn_in: Option<usize>,
    /// Steps between recorded samples; `None` means `N`.
    pub thinning: Option<usize>,
    pub n_chains: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { beta_rw: DEFAULT_BETA_RW, n_samples: 2000, n_burn_in: None, thinning: None, n_chains: 4, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_rw > 0.0 && self.beta_rw <= 1.0) {
            return Err(Error::InvalidConfiguration(format!("beta_rw must lie in (0, 1], got {}", self.beta_rw)));
        }
        if self.n_samples == 0 || self.n_chains == 0 {
            return Err(Error::InvalidConfiguration("n_samples and n_chains must be positive".into()));
        }
        if self.thinning == Some(0) {
            return Err(Error::InvalidConfiguration("thinning must be positive".into()));
        }
        Ok(())
    }

    pub fn burn_in(&self, n_sites: usize) -> usize {
        self.n_burn_in.unwrap_or(10 * n_sites * n_sites)
    }

    pub fn thinning(&self, n_sites: usize) -> usize {
        self.thinning.unwrap_or(n_sites).max(1)
    }

    /// Samples recorded by chain `chain`.
    fn chain_len(&self, chain: usize) -> usize {
        self.n_samples / self.n_chains + usize::from(chain < self.n_samples % self.n_chains)
    }

    fn chain_rng(&self, chain: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chain as u64);
        rng
    }
}

/// Samples of configuration pairs with cached `log ρ` at the sampling
/// parameters.
///
/// Besides Markov-chain batches, a batch can enumerate the sector exactly;
/// each entry then carries its exact probability under `p̃` as a
/// multiplicity, so weighted means become exact sums.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    n_sites: usize,
    beta_rw: f64,
    pairs: Vec<ConfigurationPair>,
    log_rho: Vec<C64>,
    log_multiplicity: Vec<f64>,
    weights: Vec<f64>,
    chain_lengths: Vec<usize>,
}

impl SampleBatch {
    fn assemble(
        n_sites: usize,
        beta_rw: f64,
        pairs: Vec<ConfigurationPair>,
        log_rho: Vec<C64>,
        log_multiplicity: Vec<f64>,
        chain_lengths: Vec<usize>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfiguration("empty sample batch".into()));
        }
        let log_w: Vec<f64> = log_rho.iter().map(|l| (2.0 - 2.0 * beta_rw) * l.re).collect();
        let weights = shifted_exp(&log_w)?;
        Ok(Self { n_sites, beta_rw, pairs, log_rho, log_multiplicity, weights, chain_lengths })
    }

    /// Every `ΔS^z = 0` pair with multiplicity `p̃(x)` (unnormalized).
    pub fn enumerate(params: &NdoParameters, beta_rw: f64) -> Result<Self> {
        if !(beta_rw > 0.0 && beta_rw <= 1.0) {
            return Err(Error::InvalidConfiguration(format!("beta_rw must lie in (0, 1], got {beta_rw}")));
        }
        let n = params.n_sites();
        let pairs: Vec<_> = ConfigurationPair::sector_zero(n).collect();
        let log_rho = eval_log_rho(params, &pairs)?;
        let log_mult = log_rho.iter().map(|l| 2.0 * beta_rw * l.re).collect();
        let len = pairs.len();
        Self::assemble(n, beta_rw, pairs, log_rho, log_mult, vec![len])
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn beta_rw(&self) -> f64 {
        self.beta_rw
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[ConfigurationPair] {
        &self.pairs
    }

    /// `log ρ` at the parameters the batch was drawn with.
    pub fn log_rho_values(&self) -> &[C64] {
        &self.log_rho
    }

    /// `|ρ(x)|^{2−2β_rw}`, shifted so the largest weight is one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Log of the per-entry multiplicity (zero for Markov-chain samples).
    pub fn log_multiplicities(&self) -> &[f64] {
        &self.log_multiplicity
    }

    /// Number of samples contributed by each chain, in chain order.
    pub fn chain_lengths(&self) -> &[usize] {
        &self.chain_lengths
    }

    /// Log of the density the pairs were drawn from, up to a constant.
    pub fn log_sampling_density(&self, i: usize) -> f64 {
        2.0 * self.beta_rw * self.log_rho[i].re
    }

    /// Writes the batch in the dump layout: the 8-byte magic `NDOBATCH`,
    /// then little-endian `u32 N`, `u32` reserved, `u64` count, and per pair
    /// `u32` row bits, `u32` column bits, `f64 Re log ρ`, `f64 Im log ρ`.
    pub fn write_dump(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BATCH_MAGIC)?;
        w.write_all(&(self.n_sites as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        w.write_all(&(self.pairs.len() as u64).to_le_bytes())?;
        for (x, l) in self.pairs.iter().zip(&self.log_rho) {
            w.write_all(&x.row.bits().to_le_bytes())?;
            w.write_all(&x.col.bits().to_le_bytes())?;
            w.write_all(&l.re.to_le_bytes())?;
            w.write_all(&l.im.to_le_bytes())?;
        }
        Ok(())
    }
}

const BATCH_MAGIC: &[u8; 8] = b"NDOBATCH";

/// Pairs and cached `log ρ` values read back from a batch dump.
pub fn read_dump(mut r: impl Read) -> Result<(usize, Vec<(ConfigurationPair, C64)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BATCH_MAGIC {
        return Err(Error::Checkpoint("not a batch dump".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8);
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        r.read_exact(&mut b4)?;
        let row = SpinConfiguration::new(u32::from_le_bytes(b4), n)?;
        r.read_exact(&mut b4)?;
        let col = SpinConfiguration::new(u32::from_le_bytes(b4), n)?;
        r.read_exact(&mut b8)?;
        let re = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let im = f64::from_le_bytes(b8);
        out.push((ConfigurationPair::new(row, col)?, C64::new(re, im)));
    }
    Ok((n, out))
}

/// Diagonal configurations for observable estimates, with per-entry weights
/// (all one for Markov-chain samples).
#[derive(Clone, Debug)]
pub struct DiagonalBatch {
    configs: Vec<SpinConfiguration>,
    weights: Vec<f64>,
    chain_lengths: Vec<usize>,
    thinning: usize,
    exact: bool,
}

impl DiagonalBatch {
    /// Every configuration weighted by `ρ(σ, σ)`.
    pub fn enumerate(params: &NdoParameters) -> Result<Self> {
        let n = params.n_sites();
        let configs: Vec<_> = SpinConfiguration::all(n).collect();
        let logs: Vec<f64> = configs.iter().map(|&s| params.log_rho_diagonal(s)).collect();
        let weights = shifted_exp(&logs)?;
        let len = configs.len();
        Ok(Self { configs, weights, chain_lengths: vec![len], thinning: 1, exact: true })
    }

    /// Unit-weight batch from explicit configurations (one chain).
    pub fn from_configs(configs: Vec<SpinConfiguration>) -> Self {
        let len = configs.len();
        Self { weights: vec![1.0; len], configs, chain_lengths: vec![len], thinning: 1, exact: false }
    }

    pub fn configs(&self) -> &[SpinConfiguration] {
        &self.configs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn chain_lengths(&self) -> &[usize] {
        &self.chain_lengths
    }

    /// Chain steps between consecutive recorded samples.
    pub fn thinning(&self) -> usize {
        self.thinning
    }

    /// Whether the batch is an exact enumeration (no statistical error).
    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// `exp(v − max v)`, rejecting non-finite input.
fn shifted_exp(log_values: &[f64]) -> Result<Vec<f64>> {
    if log_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAmplitude);
    }
    let shift = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(log_values.iter().map(|v| (v - shift).exp()).collect())
}

fn eval_log_rho(params: &NdoParameters, pairs: &[ConfigurationPair]) -> Result<Vec<C64>> {
    let out: Vec<C64> = pairs.par_iter().map(|x| params.log_rho(x)).collect();
    if out.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
        return Err(Error::NonFiniteAmplitude);
    }
    Ok(out)
}

/// Uniform unordered site pair `i < j`.
fn random_site_pair(n: usize, rng: &mut impl Rng) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i.min(j), i.max(j))
}

fn swap_move(x: &ConfigurationPair, rng: &mut impl Rng) -> ConfigurationPair {
    let n = x.n_sites();
    if n < 2 {
        return *x;
    }
    let (i, j) = random_site_pair(n, rng);
    if rng.random_bool(0.5) {
        ConfigurationPair { row: x.row.swapped(i, j), col: x.col }
    } else {
        ConfigurationPair { row: x.row, col: x.col.swapped(i, j) }
    }
}

fn correlated_flip(x: &ConfigurationPair, rng: &mut impl Rng) -> ConfigurationPair {
    let n = x.n_sites();
    let k = rng.random_range(0..n);
    let l = rng.random_range(0..n);
    if x.row.spin(k) == x.col.spin(l) {
        ConfigurationPair { row: x.row.flipped(k), col: x.col.flipped(l) }
    } else {
        *x
    }
}

/// Two-step sector-preserving proposal: a swap of two spins on one side of
/// the pair, and a correlated flip of `σ_k` and `σ′_l` applied only when
/// they are equal. The two steps run in a random order, which makes the
/// composite proposal symmetric.
pub fn propose(x: &ConfigurationPair, rng: &mut impl Rng) -> ConfigurationPair {
    debug_assert_eq!(x.delta_sz(), 0);
    let out = if rng.random_bool(0.5) { correlated_flip(&swap_move(x, rng), rng) } else { swap_move(&correlated_flip(x, rng), rng) };
    debug_assert_eq!(out.delta_sz(), 0, "proposal left the ΔSz = 0 sector");
    out
}

/// Metropolis test for `|ρ|^{2β_rw}` given cached `Re log ρ` values.
pub fn accept_log(log_re_old: f64, log_re_new: f64, beta_rw: f64, rng: &mut impl Rng) -> bool {
    let a = 2.0 * beta_rw * (log_re_new - log_re_old);
    a >= 0.0 || rng.random::<f64>() < a.exp()
}

/// Metropolis acceptance `min(1, exp(2β_rw (Re log ρ(x_new) − Re log ρ(x))))`.
pub fn accept(x: &ConfigurationPair, x_new: &ConfigurationPair, params: &NdoParameters, beta_rw: f64, rng: &mut impl Rng) -> bool {
    accept_log(params.log_rho(x).re, params.log_rho(x_new).re, beta_rw, rng)
}

fn random_diagonal(n: usize, rng: &mut impl Rng) -> ConfigurationPair {
    let bits = rng.random_range(0..(1u64 << n)) as u32;
    ConfigurationPair::diagonal(SpinConfiguration::from_bits(bits, n))
}

fn run_pair_chain(params: &NdoParameters, config: &SamplerConfig, chain: usize) -> Result<(Vec<ConfigurationPair>, Vec<C64>)> {
    let n = params.n_sites();
    let mut rng = config.chain_rng(chain);
    let len = config.chain_len(chain);
    let thin = config.thinning(n);
    let mut x = random_diagonal(n, &mut rng);
    let mut lx = params.log_rho(&x);
    let mut pairs = Vec::with_capacity(len);
    let mut logs = Vec::with_capacity(len);
    let total = config.burn_in(n) + len * thin;
    for step in 1..=total {
        let y = propose(&x, &mut rng);
        if y != x {
            let ly = params.log_rho(&y);
            if !ly.re.is_finite() || !ly.im.is_finite() {
                return Err(Error::NonFiniteAmplitude);
            }
            if accept_log(lx.re, ly.re, config.beta_rw, &mut rng) {
                x = y;
                lx = ly;
            }
        }
        if step > config.burn_in(n) && (step - config.burn_in(n)).is_multiple_of(thin) {
            pairs.push(x);
            logs.push(lx);
        }
    }
    Ok((pairs, logs))
}

/// Runs `n_chains` independent pair chains, each started at a uniformly
/// random diagonal pair, and concatenates them in chain order.
pub fn sample_pairs(params: &NdoParameters, config: &SamplerConfig) -> Result<SampleBatch> {
    config.validate()?;
    let chains: Vec<_> = (0..config.n_chains).into_par_iter().map(|c| run_pair_chain(params, config, c)).collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(config.n_samples);
    let mut logs = Vec::with_capacity(config.n_samples);
    let mut lengths = Vec::with_capacity(config.n_chains);
    for (p, l) in chains {
        lengths.push(p.len());
        pairs.extend(p);
        logs.extend(l);
    }
    let mult = vec![0.0; pairs.len()];
    SampleBatch::assemble(params.n_sites(), config.beta_rw, pairs, logs, mult, lengths)
}

fn run_diagonal_chain(params: &NdoParameters, config: &SamplerConfig, chain: usize) -> Result<Vec<SpinConfiguration>> {
    let n = params.n_sites();
    let mut rng = config.chain_rng(chain);
    let len = config.chain_len(chain);
    let thin = config.thinning(n);
    let burn = config.burn_in(n);
    let mut s = random_diagonal(n, &mut rng).row;
    let mut ls = params.log_rho_diagonal(s);
    let mut out = Vec::with_capacity(len);
    for step in 1..=burn + len * thin {
        let t = if n >= 2 && rng.random_bool(0.5) {
            let (i, j) = random_site_pair(n, &mut rng);
            s.swapped(i, j)
        } else {
            s.flipped(rng.random_range(0..n))
        };
        if t != s {
            let lt = params.log_rho_diagonal(t);
            if !lt.is_finite() {
                return Err(Error::NonFiniteAmplitude);
            }
            let a = lt - ls;
            if a >= 0.0 || rng.random::<f64>() < a.exp() {
                s = t;
                ls = lt;
            }
        }
        if step > burn && (step - burn).is_multiple_of(thin) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Metropolis chains over diagonal configurations with stationary density
/// `∝ ρ(σ, σ)`; moves are a random swap or a single flip with equal odds.
/// `beta_rw` is ignored.
pub fn sample_diagonal(params: &NdoParameters, config: &SamplerConfig) -> Result<DiagonalBatch> {
    config.validate()?;
    let chains: Vec<_> = (0..config.n_chains).into_par_iter().map(|c| run_diagonal_chain(params, config, c)).collect::<Result<_>>()?;
    let chain_lengths = chains.iter().map(Vec::len).collect();
    let configs: Vec<_> = chains.into_iter().flatten().collect();
    Ok(DiagonalBatch {
        weights: vec![1.0; configs.len()],
        configs,
        chain_lengths,
        thinning: config.thinning(params.n_sites()),
        exact: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndo::init_params;

    fn pair(row: &[i8], col: &[i8]) -> ConfigurationPair {
        ConfigurationPair::new(SpinConfiguration::from_spins(row).unwrap(), SpinConfiguration::from_spins(col).unwrap()).unwrap()
    }

    #[test]
    fn swapping_equal_spins_is_a_self_proposal() {
        let x = pair(&[1, 1], &[-1, -1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            assert_eq!(swap_move(&x, &mut rng), x);
        }
    }

    #[test]
    fn correlated_flip_on_equal_spins() {
        let x = pair(&[1, -1], &[1, -1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen_flip = false;
        for _ in 0..200 {
            let y = correlated_flip(&x, &mut rng);
            assert_eq!(y.delta_sz(), 0);
            if y == pair(&[-1, -1], &[-1, -1]) {
                seen_flip = true;
            }
        }
        assert!(seen_flip);
    }

    #[test]
    fn proposals_stay_in_sector() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = pair(&[1, -1, 1, 1, -1], &[-1, 1, 1, -1, 1]);
        for _ in 0..10_000 {
            x = propose(&x, &mut rng);
            assert_eq!(x.delta_sz(), 0);
        }
    }

    #[test]
    fn equal_amplitudes_always_accept() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| accept_log(0.3, 0.3, 0.15, &mut rng)));
        let p = NdoParameters::zeros(3, 1, 1).unwrap();
        let x = pair(&[1, -1, 1], &[1, 1, -1]);
        let y = pair(&[-1, 1, 1], &[1, -1, 1]);
        assert!(accept(&x, &y, &p, 1.0, &mut rng));
    }

    #[test]
    fn acceptance_rate_matches_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let hits = (0..n).filter(|_| accept_log(0.0, -1.0, 0.5, &mut rng)).count();
        let p = (-1.0f64).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 5.0 * se);
    }

    #[test]
    fn config_validation_and_defaults() {
        let mut c = SamplerConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.burn_in(4), 160);
        assert_eq!(c.thinning(4), 4);
        c.beta_rw = 0.0;
        assert!(c.validate().is_err());
        c.beta_rw = 1.5;
        assert!(c.validate().is_err());
        let c = SamplerConfig { n_samples: 0, ..SamplerConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn chain_lengths_sum_to_request() {
        let p = init_params(3, 1, 1, 1, 0.1).unwrap();
        let c = SamplerConfig { n_samples: 103, n_chains: 4, seed: 2, ..SamplerConfig::default() };
        let b = sample_pairs(&p, &c).unwrap();
        assert_eq!(b.len(), 103);
        assert_eq!(b.chain_lengths(), &[26, 26, 26, 25]);
        assert!(b.pairs().iter().all(|x| x.delta_sz() == 0));
        assert!(b.weights().iter().all(|w| *w > 0.0 && *w <= 1.0));
    }

    #[test]
    fn batches_are_deterministic() {
        let p = init_params(4, 1, 1, 7, 0.3).unwrap();
        let c = SamplerConfig { n_samples: 64, seed: 11, ..SamplerConfig::default() };
        let a = sample_pairs(&p, &c).unwrap();
        let b = sample_pairs(&p, &c).unwrap();
        assert_eq!(a.pairs(), b.pairs());
        let d = sample_pairs(&p, &SamplerConfig { seed: 12, ..c }).unwrap();
        assert_ne!(a.pairs(), d.pairs());
    }

    #[test]
    fn unit_beta_gives_unit_weights() {
        let p = init_params(3, 1, 1, 4, 0.5).unwrap();
        let c = SamplerConfig { beta_rw: 1.0, n_samples: 50, ..SamplerConfig::default() };
        let b = sample_pairs(&p, &c).unwrap();
        assert!(b.weights().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn dump_round_trip() {
        let p = init_params(3, 1, 1, 4, 0.5).unwrap();
        let b = sample_pairs(&p, &SamplerConfig { n_samples: 20, ..SamplerConfig::default() }).unwrap();
        let mut buf = Vec::new();
        b.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 24 * 20);
        let (n, entries) = read_dump(buf.as_slice()).unwrap();
        assert_eq!(n, 3);
        for ((x, l), (y, m)) in entries.iter().zip(b.pairs().iter().zip(b.log_rho_values())) {
            assert_eq!(x, y);
            assert_eq!(l, m);
        }
        assert!(read_dump(&b"NOTABTCH"[..]).is_err());
    }

    #[test]
    fn enumeration_batch_covers_sector() {
        let p = init_params(3, 1, 1, 4, 0.5).unwrap();
        let b = SampleBatch::enumerate(&p, 0.5).unwrap();
        assert_eq!(b.len(), 20);
        let d = DiagonalBatch::enumerate(&p).unwrap();
        assert_eq!(d.len(), 8);
        assert!(d.is_exact());
        let m = DiagonalBatch::from_configs(vec![SpinConfiguration::all_down(3); 5]);
        assert!(!m.is_exact());
    }
}
