//! XXZ chain, boundary jump operators and the Lindblad superoperator in
//! configuration-pair space.
//!
//! Configurations are stored as bitmasks: site `i` (zero-based, so site 1 of
//! the chain is bit 0) carries spin `+1` when bit `i` is set. The integer
//! value of the mask is the basis index used by every dense matrix in the
//! crate, so `|↑↓⟩` (site 1 up, site 2 down) has index 1.
//!
//! The superoperator acts on a density matrix written as `ρ(σ, σ′) = ⟨σ|ρ|σ′⟩`:
//!
//! ```text
//! (ℒρ)(σ,σ′) = −i Σ_τ H_στ ρ(τ,σ′) + i Σ_τ′ ρ(σ,τ′) H_τ′σ′
//!            + Σ_k [ (L_k ρ L_k†)(σ,σ′) − ½ {L_k†L_k, ρ}(σ,σ′) ]
//! ```
//!
//! Every row couples `(σ, σ′)` only to pairs with the same `ΔS^z`, and holds
//! `O(N)` entries.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest chain length representable by [`SpinConfiguration`].
pub const MAX_SITES: usize = 30;

/// Length and couplings of an open XXZ chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    n_sites: usize,
    coupling: f64,
    anisotropy: f64,
}

impl ChainSpec {
    pub fn new(n_sites: usize, coupling: f64, anisotropy: f64) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::InvalidChain(format!("need at least 2 sites, got {n_sites}")));
        }
        if n_sites > MAX_SITES {
            return Err(Error::InvalidChain(format!("at most {MAX_SITES} sites supported, got {n_sites}")));
        }
        if !coupling.is_finite() || !anisotropy.is_finite() {
            return Err(Error::InvalidChain("couplings must be finite".into()));
        }
        Ok(Self { n_sites, coupling, anisotropy })
    }

    /// A chain of a single site with no Hamiltonian. Only useful for
    /// checking dissipators in isolation.
    pub fn single_site() -> Self {
        Self { n_sites: 1, coupling: 0.0, anisotropy: 0.0 }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn anisotropy(&self) -> f64 {
        self.anisotropy
    }

    /// Hilbert-space dimension `2^N`.
    pub fn dimension(&self) -> usize {
        1 << self.n_sites
    }

    /// Diagonal energy `J Δ Σ_k σ_k σ_{k+1}` of a configuration.
    pub fn diagonal_energy(&self, sigma: SpinConfiguration) -> f64 {
        let aligned: i32 = (0..self.n_sites.saturating_sub(1)).map(|k| i32::from(sigma.spin(k) * sigma.spin(k + 1))).sum();
        self.coupling * self.anisotropy * f64::from(aligned)
    }
}

/// Which ladder operator a jump applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JumpKind {
    /// `σ⁺`: flips a down spin up.
    Raise,
    /// `σ⁻`: flips an up spin down.
    Lower,
}

/// A single jump operator `√rate · σ^±_site`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub site: usize,
    pub kind: JumpKind,
    pub rate: f64,
}

impl Jump {
    /// Spin value the site must carry for `L` to act on it.
    fn source_spin(&self) -> i8 {
        match self.kind {
            JumpKind::Raise => -1,
            JumpKind::Lower => 1,
        }
    }

    /// Spin value the site carries after `L` acted.
    fn target_spin(&self) -> i8 {
        -self.source_spin()
    }
}

/// Per-site pumping (`γ⁺`) and loss (`γ⁻`) rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    gamma_plus: Vec<f64>,
    gamma_minus: Vec<f64>,
}

impl DriveSpec {
    pub fn new(gamma_plus: Vec<f64>, gamma_minus: Vec<f64>) -> Result<Self> {
        if gamma_plus.len() != gamma_minus.len() {
            return Err(Error::InvalidDrive(format!("rate arrays differ in length ({} vs {})", gamma_plus.len(), gamma_minus.len())));
        }
        if gamma_plus.iter().chain(&gamma_minus).any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::InvalidDrive("rates must be finite and nonnegative".into()));
        }
        if !gamma_plus.iter().chain(&gamma_minus).any(|g| *g > 0.0) {
            return Err(Error::InvalidDrive("at least one rate must be positive".into()));
        }
        Ok(Self { gamma_plus, gamma_minus })
    }

    /// All-site dissipation with a biased boundary: bulk rates `γ`,
    /// `γ⁻₁ = γ`, `γ⁺₁ = (1+δ)γ`, and the last site mirrored
    /// (`γ^±_N = γ^∓_1`).
    pub fn model_a(n_sites: usize, gamma: f64, bias: f64) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::InvalidDrive("model A needs at least 2 sites".into()));
        }
        let mut plus = vec![gamma; n_sites];
        let mut minus = vec![gamma; n_sites];
        plus[0] = (1.0 + bias) * gamma;
        minus[0] = gamma;
        plus[n_sites - 1] = minus[0];
        minus[n_sites - 1] = plus[0];
        Self::new(plus, minus)
    }

    /// One raising jump on the first site and one lowering jump on the last.
    pub fn model_b(n_sites: usize, gamma: f64) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::InvalidDrive("model B needs at least 2 sites".into()));
        }
        let mut plus = vec![0.0; n_sites];
        let mut minus = vec![0.0; n_sites];
        plus[0] = gamma;
        minus[n_sites - 1] = gamma;
        Self::new(plus, minus)
    }

    pub fn n_sites(&self) -> usize {
        self.gamma_plus.len()
    }

    pub fn gamma_plus(&self) -> &[f64] {
        &self.gamma_plus
    }

    pub fn gamma_minus(&self) -> &[f64] {
        &self.gamma_minus
    }

    /// The jump operators with nonzero rate, ordered by site with the
    /// lowering operator first.
    pub fn jumps(&self) -> Vec<Jump> {
        let mut out = Vec::new();
        for site in 0..self.n_sites() {
            if self.gamma_minus[site] > 0.0 {
                out.push(Jump { site, kind: JumpKind::Lower, rate: self.gamma_minus[site] });
            }
            if self.gamma_plus[site] > 0.0 {
                out.push(Jump { site, kind: JumpKind::Raise, rate: self.gamma_plus[site] });
            }
        }
        out
    }
}

/// A basis configuration `σ ∈ {−1, +1}^N`, stored as a bitmask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpinConfiguration {
    bits: u32,
    n: u8,
}

impl SpinConfiguration {
    pub fn new(bits: u32, n_sites: usize) -> Result<Self> {
        if n_sites == 0 || n_sites > MAX_SITES {
            return Err(Error::InvalidConfiguration(format!("unsupported length {n_sites}")));
        }
        if u64::from(bits) >> n_sites != 0 {
            return Err(Error::InvalidConfiguration(format!("bits {bits:#b} exceed {n_sites} sites")));
        }
        Ok(Self { bits, n: n_sites as u8 })
    }

    /// Unchecked constructor for internal loops where `bits < 2^n` is known.
    #[inline]
    pub(crate) fn from_bits(bits: u32, n_sites: usize) -> Self {
        debug_assert!(u64::from(bits) >> n_sites == 0);
        Self { bits, n: n_sites as u8 }
    }

    pub fn from_spins(spins: &[i8]) -> Result<Self> {
        if spins.is_empty() || spins.len() > MAX_SITES {
            return Err(Error::InvalidConfiguration(format!("unsupported length {}", spins.len())));
        }
        let mut bits = 0u32;
        for (i, &s) in spins.iter().enumerate() {
            match s {
                1 => bits |= 1 << i,
                -1 => {}
                other => return Err(Error::InvalidConfiguration(format!("spin value {other} at site {i}"))),
            }
        }
        Ok(Self { bits, n: spins.len() as u8 })
    }

    /// Configuration for a dense basis index.
    pub fn from_index(index: usize, n_sites: usize) -> Result<Self> {
        let bits = u32::try_from(index).map_err(|_| Error::InvalidConfiguration(format!("index {index}")))?;
        Self::new(bits, n_sites)
    }

    /// The fully polarized `|↓…↓⟩` configuration (index 0).
    pub fn all_down(n_sites: usize) -> Self {
        Self::from_bits(0, n_sites)
    }

    /// Every configuration of `n_sites` spins in index order.
    pub fn all(n_sites: usize) -> impl Iterator<Item = SpinConfiguration> {
        (0..(1u32 << n_sites)).map(move |b| Self::from_bits(b, n_sites))
    }

    #[inline]
    pub fn n_sites(&self) -> usize {
        usize::from(self.n)
    }

    #[inline]
    pub fn bits(&self) -> u32 {
        self.bits
    }

    #[inline]
    pub fn index(&self) -> usize {
        self.bits as usize
    }

    #[inline]
    pub fn is_up(&self, site: usize) -> bool {
        self.bits >> site & 1 == 1
    }

    /// Spin value `±1` at a zero-based site.
    #[inline]
    pub fn spin(&self, site: usize) -> i8 {
        if self.is_up(site) {
            1
        } else {
            -1
        }
    }

    pub fn spins(&self) -> Vec<i8> {
        (0..self.n_sites()).map(|i| self.spin(i)).collect()
    }

    #[inline]
    pub fn flipped(&self, site: usize) -> Self {
        Self { bits: self.bits ^ (1 << site), n: self.n }
    }

    #[inline]
    pub fn swapped(&self, i: usize, j: usize) -> Self {
        if self.is_up(i) == self.is_up(j) {
            *self
        } else {
            Self { bits: self.bits ^ (1 << i) ^ (1 << j), n: self.n }
        }
    }

    /// Total magnetization `Σ_i σ_i`.
    #[inline]
    pub fn total_sz(&self) -> i32 {
        2 * self.bits.count_ones() as i32 - i32::from(self.n)
    }
}

impl fmt::Debug for SpinConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.n_sites()).map(|i| if self.is_up(i) { '↑' } else { '↓' }).collect();
        write!(f, "|{s}⟩")
    }
}

/// Row and column configuration `x = (σ, σ′)` of a density-matrix element.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct ConfigurationPair {
    pub row: SpinConfiguration,
    pub col: SpinConfiguration,
}

impl ConfigurationPair {
    pub fn new(row: SpinConfiguration, col: SpinConfiguration) -> Result<Self> {
        if row.n != col.n {
            return Err(Error::InvalidConfiguration(format!("pair lengths differ ({} vs {})", row.n, col.n)));
        }
        Ok(Self { row, col })
    }

    pub fn diagonal(sigma: SpinConfiguration) -> Self {
        Self { row: sigma, col: sigma }
    }

    #[inline]
    pub fn n_sites(&self) -> usize {
        self.row.n_sites()
    }

    /// Hash key packing both bitmasks.
    #[inline]
    pub fn key(&self) -> u64 {
        u64::from(self.row.bits) << 32 | u64::from(self.col.bits)
    }

    /// Row-major index `σ·2^N + σ′` into a vectorized density matrix.
    #[inline]
    pub fn dense_index(&self) -> usize {
        (self.row.index() << self.n_sites()) | self.col.index()
    }

    pub fn from_dense_index(index: usize, n_sites: usize) -> Result<Self> {
        let dim = 1usize << n_sites;
        if index >= dim * dim {
            return Err(Error::InvalidConfiguration(format!("pair index {index} out of range")));
        }
        Ok(Self {
            row: SpinConfiguration::from_bits((index >> n_sites) as u32, n_sites),
            col: SpinConfiguration::from_bits((index & (dim - 1)) as u32, n_sites),
        })
    }

    #[inline]
    pub fn is_diagonal(&self) -> bool {
        self.row == self.col
    }

    /// `(σ′, σ)`.
    #[inline]
    pub fn transposed(&self) -> Self {
        Self { row: self.col, col: self.row }
    }

    #[inline]
    pub fn delta_sz(&self) -> i32 {
        delta_sz(self)
    }

    /// Every pair of `n_sites` spins in dense-index order.
    pub fn all(n_sites: usize) -> impl Iterator<Item = ConfigurationPair> {
        let dim = 1u64 << n_sites;
        (0..dim * dim).map(move |i| Self {
            row: SpinConfiguration::from_bits((i >> n_sites) as u32, n_sites),
            col: SpinConfiguration::from_bits((i & (dim - 1)) as u32, n_sites),
        })
    }

    /// Pairs with `ΔS^z = 0`, in dense-index order.
    pub fn sector_zero(n_sites: usize) -> impl Iterator<Item = ConfigurationPair> {
        Self::all(n_sites).filter(|x| x.row.bits.count_ones() == x.col.bits.count_ones())
    }
}

/// `ΔS^z(σ, σ′) = Σ_i σ_i − Σ_i σ′_i`.
pub fn delta_sz(x: &ConfigurationPair) -> i32 {
    x.row.total_sz() - x.col.total_sz()
}

/// Row access to an operator on the `2^N` configuration space.
pub trait OperatorRows {
    fn dimension(&self) -> usize;

    /// Appends the nonzero `(column, value)` entries of `row` to `out`.
    fn row_entries(&self, row: usize, out: &mut Vec<(usize, C64)>);

    fn is_hermitian_hint(&self) -> bool {
        false
    }
}

/// Compressed-row sparse operator.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOperator {
    /// Builds an operator row by row. Duplicate columns are summed and exact
    /// zeros dropped, so every stored amplitude is nonzero.
    pub fn from_row_fn(dim: usize, mut row: impl FnMut(usize, &mut Vec<(usize, C64)>)) -> Self {
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut buf = Vec::new();
        row_ptr.push(0);
        for r in 0..dim {
            buf.clear();
            row(r, &mut buf);
            merge_entries(&mut buf, |c| *c);
            for &(c, v) in &buf {
                assert!(c < dim, "column {c} out of range");
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { dim, row_ptr, cols, vals }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_row_fn(dim, |r, out| out.push((r, C64::new(1.0, 0.0))))
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.row(r).find(|&(cc, _)| cc == c).map_or(C64::new(0.0, 0.0), |(_, v)| v)
    }

    pub fn adjoint(&self) -> Self {
        let mut rows: Vec<Vec<(usize, C64)>> = vec![Vec::new(); self.dim];
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                rows[c].push((r, v.conj()));
            }
        }
        Self::from_row_fn(self.dim, |r, out| out.extend_from_slice(&rows[r]))
    }

    /// Sparse product `self · rhs`.
    pub fn mul(&self, rhs: &SparseOperator) -> Self {
        assert_eq!(self.dim, rhs.dim);
        Self::from_row_fn(self.dim, |r, out| {
            for (k, a) in self.row(r) {
                out.extend(rhs.row(k).map(|(c, b)| (c, a * b)));
            }
        })
    }

    pub fn scaled(&self, factor: C64) -> Self {
        Self::from_row_fn(self.dim, |r, out| out.extend(self.row(r).map(|(c, v)| (c, v * factor))))
    }

    /// `self + rhs`.
    pub fn add(&self, rhs: &SparseOperator) -> Self {
        assert_eq!(self.dim, rhs.dim);
        Self::from_row_fn(self.dim, |r, out| {
            out.extend(self.row(r));
            out.extend(rhs.row(r));
        })
    }

    pub fn to_dense(&self) -> faer::Mat<C64> {
        let mut m = faer::Mat::<C64>::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// Largest `|A_rc − conj(A_cr)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.dim {
            for (c, v) in self.row(r) {
                worst = worst.max((v - self.get(c, r).conj()).norm());
            }
        }
        worst
    }
}

impl OperatorRows for SparseOperator {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn row_entries(&self, row: usize, out: &mut Vec<(usize, C64)>) {
        out.extend(self.row(row));
    }
}

/// Sorts entries by key, sums duplicates and drops exact zeros.
fn merge_entries<T: Copy, K: Ord + Copy>(entries: &mut Vec<(T, C64)>, key: impl Fn(&T) -> K) {
    entries.sort_by_key(|e| key(&e.0));
    let mut write = 0;
    for read in 0..entries.len() {
        if write > 0 && key(&entries[write - 1].0) == key(&entries[read].0) {
            let v = entries[read].1;
            entries[write - 1].1 += v;
        } else {
            entries[write] = entries[read];
            write += 1;
        }
    }
    entries.truncate(write);
    entries.retain(|e| e.1 != C64::new(0.0, 0.0));
}

/// `H = J Σ_k (σ^x_k σ^x_{k+1} + σ^y_k σ^y_{k+1} + Δ σ^z_k σ^z_{k+1})` with
/// open boundaries.
pub fn build_hamiltonian(chain: &ChainSpec) -> SparseOperator {
    let n = chain.n_sites();
    SparseOperator::from_row_fn(chain.dimension(), |r, out| {
        let sigma = SpinConfiguration::from_bits(r as u32, n);
        out.push((r, C64::new(chain.diagonal_energy(sigma), 0.0)));
        for k in 0..n.saturating_sub(1) {
            if sigma.is_up(k) != sigma.is_up(k + 1) {
                out.push((sigma.swapped(k, k + 1).index(), C64::new(2.0 * chain.coupling(), 0.0)));
            }
        }
    })
}

/// The operators `L_k` of the dissipator, one per nonzero rate.
pub fn build_jump_operators(chain: &ChainSpec, drive: &DriveSpec) -> Vec<SparseOperator> {
    drive.jumps().iter().map(|jump| jump_operator(chain.n_sites(), jump)).collect()
}

fn jump_operator(n_sites: usize, jump: &Jump) -> SparseOperator {
    let amp = C64::new(jump.rate.sqrt(), 0.0);
    SparseOperator::from_row_fn(1 << n_sites, |r, out| {
        let sigma = SpinConfiguration::from_bits(r as u32, n_sites);
        // ⟨σ|L|τ⟩ is nonzero when σ is the image of τ under the ladder operator.
        if sigma.spin(jump.site) == jump.target_spin() {
            out.push((sigma.flipped(jump.site).index(), amp));
        }
    })
}

/// One nonzero entry of a superoperator row.
pub type LindbladEntry = (ConfigurationPair, C64);

/// Sparse Lindblad superoperator with memoized row access.
///
/// Rows are computed on demand from the local structure of the chain and
/// cached behind a lock; once `cache_capacity` rows are stored, further rows
/// are computed without being retained.
pub struct LindbladMap {
    chain: ChainSpec,
    drive: DriveSpec,
    jumps: Vec<Jump>,
    cache: RwLock<HashMap<u64, Arc<[LindbladEntry]>>>,
    cache_capacity: usize,
}

impl fmt::Debug for LindbladMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LindbladMap").field("chain", &self.chain).field("drive", &self.drive).finish()
    }
}

impl Clone for LindbladMap {
    fn clone(&self) -> Self {
        Self {
            chain: self.chain,
            drive: self.drive.clone(),
            jumps: self.jumps.clone(),
            cache: RwLock::new(HashMap::new()),
            cache_capacity: self.cache_capacity,
        }
    }
}

/// Default number of memoized rows.
pub const DEFAULT_ROW_CACHE: usize = 1 << 20;

pub fn build_lindblad_map(chain: &ChainSpec, drive: &DriveSpec) -> Result<LindbladMap> {
    if drive.n_sites() != chain.n_sites() {
        return Err(Error::InvalidDrive(format!("drive has {} sites, chain has {}", drive.n_sites(), chain.n_sites())));
    }
    Ok(LindbladMap {
        chain: *chain,
        drive: drive.clone(),
        jumps: drive.jumps(),
        cache: RwLock::new(HashMap::new()),
        cache_capacity: DEFAULT_ROW_CACHE,
    })
}

/// Nonzero entries `ℒ_{xx′}` of the row belonging to `x`.
pub fn lindblad_row(map: &LindbladMap, x: &ConfigurationPair) -> Vec<LindbladEntry> {
    map.row(x).to_vec()
}

impl LindbladMap {
    pub fn chain(&self) -> &ChainSpec {
        &self.chain
    }

    pub fn drive(&self) -> &DriveSpec {
        &self.drive
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn n_sites(&self) -> usize {
        self.chain.n_sites()
    }

    pub fn with_cache_capacity(mut self, rows: usize) -> Self {
        self.cache_capacity = rows;
        self
    }

    /// Memoized row access.
    pub fn row(&self, x: &ConfigurationPair) -> Arc<[LindbladEntry]> {
        debug_assert_eq!(x.n_sites(), self.n_sites());
        let key = x.key();
        if let Some(row) = self.cache.read().expect("row cache poisoned").get(&key) {
            return Arc::clone(row);
        }
        let row: Arc<[LindbladEntry]> = self.compute_row(x).into();
        let mut cache = self.cache.write().expect("row cache poisoned");
        if cache.len() < self.cache_capacity {
            cache.insert(key, Arc::clone(&row));
        }
        row
    }

    /// Computes a row without touching the cache.
    pub fn compute_row(&self, x: &ConfigurationPair) -> Vec<LindbladEntry> {
        let n = self.n_sites();
        let (sigma, sigma_p) = (x.row, x.col);
        let hop = 2.0 * self.chain.coupling();
        let mut out: Vec<LindbladEntry> = Vec::with_capacity(2 * n + self.jumps.len() + 1);

        // −i(E(σ) − E(σ′)) from the diagonal part of the commutator.
        let mut diag = C64::new(0.0, -(self.chain.diagonal_energy(sigma) - self.chain.diagonal_energy(sigma_p)));

        if hop != 0.0 {
            for k in 0..n - 1 {
                if sigma.is_up(k) != sigma.is_up(k + 1) {
                    out.push((ConfigurationPair { row: sigma.swapped(k, k + 1), col: sigma_p }, C64::new(0.0, -hop)));
                }
                if sigma_p.is_up(k) != sigma_p.is_up(k + 1) {
                    out.push((ConfigurationPair { row: sigma, col: sigma_p.swapped(k, k + 1) }, C64::new(0.0, hop)));
                }
            }
        }

        for jump in &self.jumps {
            let site = jump.site;
            // L ρ L†: both sides must sit in the image of the ladder operator.
            if sigma.spin(site) == jump.target_spin() && sigma_p.spin(site) == jump.target_spin() {
                out.push((ConfigurationPair { row: sigma.flipped(site), col: sigma_p.flipped(site) }, C64::new(jump.rate, 0.0)));
            }
            // L†L projects onto the source spin value.
            let occupied = u8::from(sigma.spin(site) == jump.source_spin()) + u8::from(sigma_p.spin(site) == jump.source_spin());
            diag -= C64::new(0.5 * jump.rate * f64::from(occupied), 0.0);
        }
        out.push((*x, diag));
        merge_entries(&mut out, |p| p.key());
        out
    }

    /// `(ℒρ)(x)` for a density matrix given element-wise.
    pub fn apply_at(&self, x: &ConfigurationPair, rho: impl Fn(&ConfigurationPair) -> C64) -> C64 {
        self.row(x).iter().map(|(xp, v)| v * rho(xp)).sum()
    }
}
