//! Exact-diagonalization oracle for small chains.
//!
//! The superoperator is block diagonal in `ΔS^z` and a density matrix lives
//! in the `ΔS^z = 0` block, so the steady state is extracted from that block
//! alone: `Σ_k C(N,k)²` rows instead of `4^N` (924 for six sites).

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::model::{ConfigurationPair, LindbladMap, OperatorRows, SpinConfiguration};
use crate::ndo::NdoParameters;

/// Largest chain handled by the dense singular-value route.
pub const DENSE_ED_MAX_SITES: usize = 7;
/// Largest chain handled at all; chains above the dense bound use a sparse LU.
pub const ED_MAX_SITES: usize = 10;
/// Largest chain for which the full `4^N × 4^N` matrix may be assembled.
pub const FULL_SUPEROPERATOR_MAX_SITES: usize = 5;

const SINGULAR_TOL: f64 = 1e-8;
const DENSITY_TOL: f64 = 1e-8;

/// Dense `2^N × 2^N` density matrix, Hermitian with unit trace.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    n_sites: usize,
    matrix: Mat<C64>,
}

impl DensityMatrix {
    /// Wraps a matrix after checking Hermiticity and trace to `1e−8`.
    pub fn new(matrix: Mat<C64>) -> Result<Self> {
        let dim = matrix.nrows();
        if matrix.ncols() != dim || !dim.is_power_of_two() {
            return Err(Error::NotADensityMatrix(format!("shape {}×{}", dim, matrix.ncols())));
        }
        let rho = Self { n_sites: dim.trailing_zeros() as usize, matrix };
        let herm = rho.hermiticity_error();
        if herm > DENSITY_TOL {
            return Err(Error::NotADensityMatrix(format!("hermiticity error {herm:e}")));
        }
        let tr = rho.trace();
        if (tr - C64::new(1.0, 0.0)).norm() > DENSITY_TOL {
            return Err(Error::NotADensityMatrix(format!("trace {tr}")));
        }
        Ok(rho)
    }

    /// Builds `(A + A†)/2`, normalized to unit trace.
    pub fn from_unnormalized(matrix: Mat<C64>) -> Result<Self> {
        let dim = matrix.nrows();
        let mut herm = Mat::<C64>::from_fn(dim, dim, |i, j| 0.5 * (matrix[(i, j)] + matrix[(j, i)].conj()));
        let tr: f64 = (0..dim).map(|i| herm[(i, i)].re).sum();
        if tr == 0.0 || !tr.is_finite() {
            return Err(Error::ZeroState);
        }
        for j in 0..dim {
            for i in 0..dim {
                herm[(i, j)] /= tr;
            }
        }
        Self::new(herm)
    }

    /// Materializes the (unnormalized) network density matrix over all pairs
    /// and normalizes it. With `sector_only`, elements with `ΔS^z ≠ 0` are
    /// set to zero, matching a state that is sampled in the `ΔS^z = 0` sector.
    pub fn from_ndo(params: &NdoParameters, sector_only: bool) -> Result<Self> {
        let n = params.n_sites();
        let dim = 1usize << n;
        let mut logs = vec![C64::new(f64::NEG_INFINITY, 0.0); dim * dim];
        let mut shift = f64::NEG_INFINITY;
        for x in ConfigurationPair::all(n) {
            if sector_only && x.delta_sz() != 0 {
                continue;
            }
            let lr = params.log_rho(&x);
            if !lr.re.is_finite() || !lr.im.is_finite() {
                return Err(Error::NonFiniteAmplitude);
            }
            shift = shift.max(lr.re);
            logs[x.dense_index()] = lr;
        }
        let m = Mat::<C64>::from_fn(dim, dim, |i, j| {
            let lr = logs[i * dim + j];
            if lr.re == f64::NEG_INFINITY {
                C64::new(0.0, 0.0)
            } else {
                (lr - shift).exp()
            }
        });
        Self::from_unnormalized(m)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Mat<C64> {
        &self.matrix
    }

    /// `ρ(σ, σ′) = ⟨σ|ρ|σ′⟩`.
    pub fn get(&self, x: &ConfigurationPair) -> C64 {
        self.matrix[(x.row.index(), x.col.index())]
    }

    pub fn trace(&self) -> C64 {
        (0..self.dimension()).map(|i| self.matrix[(i, i)]).sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let dim = self.dimension();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in i..dim {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.matrix.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigenvalues()?.into_iter().fold(f64::INFINITY, f64::min))
    }
}

/// Full superoperator as a dense `4^N × 4^N` matrix in row-major
/// vectorization (`vec(ρ)[σ·2^N + σ′] = ρ(σ,σ′)`).
pub fn dense_superoperator(map: &LindbladMap) -> Result<Mat<C64>> {
    let n = map.n_sites();
    if n > FULL_SUPEROPERATOR_MAX_SITES {
        return Err(Error::TooLarge { n, max: FULL_SUPEROPERATOR_MAX_SITES });
    }
    let d = 1usize << (2 * n);
    let mut m = Mat::<C64>::zeros(d, d);
    for x in ConfigurationPair::all(n) {
        for (xp, v) in map.compute_row(&x) {
            m[(x.dense_index(), xp.dense_index())] = v;
        }
    }
    Ok(m)
}

/// `ΔS^z = 0` pairs and a lookup from dense pair index to position.
struct SectorIndex {
    pairs: Vec<ConfigurationPair>,
    position: Vec<u32>,
}

impl SectorIndex {
    fn new(n: usize) -> Self {
        let pairs: Vec<_> = ConfigurationPair::sector_zero(n).collect();
        let mut position = vec![u32::MAX; 1 << (2 * n)];
        for (i, x) in pairs.iter().enumerate() {
            position[x.dense_index()] = i as u32;
        }
        Self { pairs, position }
    }

    fn pos(&self, x: &ConfigurationPair) -> usize {
        let p = self.position[x.dense_index()];
        debug_assert_ne!(p, u32::MAX, "pair left the ΔSz = 0 sector");
        p as usize
    }
}

/// Dense restriction of the superoperator to the `ΔS^z = 0` sector.
pub fn sector_superoperator(map: &LindbladMap) -> Result<(Vec<ConfigurationPair>, Mat<C64>)> {
    let n = map.n_sites();
    if n > DENSE_ED_MAX_SITES {
        return Err(Error::TooLarge { n, max: DENSE_ED_MAX_SITES });
    }
    let index = SectorIndex::new(n);
    let d = index.pairs.len();
    let mut m = Mat::<C64>::zeros(d, d);
    for (i, x) in index.pairs.iter().enumerate() {
        for (xp, v) in map.compute_row(x) {
            m[(i, index.pos(&xp))] = v;
        }
    }
    Ok((index.pairs, m))
}

/// Non-equilibrium steady state `ρ₀` with `ℒ vec(ρ₀) = 0`.
///
/// Up to [`DENSE_ED_MAX_SITES`] the null vector is the right-singular vector
/// of the smallest singular value of the dense sector block, and more than
/// one singular value below `1e−8` is reported as [`Error::DegenerateNess`].
/// Larger chains (up to [`ED_MAX_SITES`]) solve the sector system with one
/// redundant population equation replaced by `Tr ρ = 1` using a sparse LU.
pub fn steady_state_ed(map: &LindbladMap) -> Result<DensityMatrix> {
    let n = map.n_sites();
    if n <= DENSE_ED_MAX_SITES {
        steady_state_dense(map)
    } else if n <= ED_MAX_SITES {
        steady_state_sparse(map)
    } else {
        Err(Error::TooLarge { n, max: ED_MAX_SITES })
    }
}

fn steady_state_dense(map: &LindbladMap) -> Result<DensityMatrix> {
    let (pairs, m) = sector_superoperator(map)?;
    let svd = m.svd().map_err(|e| Error::Linalg(format!("{e:?}")))?;
    let s = svd.S().column_vector();
    let d = pairs.len();
    let nullity = (0..d).filter(|&i| s[i].re < SINGULAR_TOL).count();
    if nullity > 1 {
        return Err(Error::DegenerateNess { nullity });
    }
    let v = svd.V().col(d - 1);
    assemble_state(map.n_sites(), &pairs, |i| v[i])
}

/// Sparse-LU steady state on the `ΔS^z = 0` sector.
pub fn steady_state_sparse(map: &LindbladMap) -> Result<DensityMatrix> {
    let n = map.n_sites();
    if n > ED_MAX_SITES {
        return Err(Error::TooLarge { n, max: ED_MAX_SITES });
    }
    let index = SectorIndex::new(n);
    let d = index.pairs.len();
    // The population equations sum to zero (trace preservation), so the row
    // of the all-down diagonal pair is replaced by the trace condition.
    let replaced = index.pos(&ConfigurationPair::diagonal(SpinConfiguration::all_down(n)));
    let mut triplets = Vec::new();
    for (i, x) in index.pairs.iter().enumerate() {
        if i == replaced {
            continue;
        }
        for (xp, v) in map.compute_row(x) {
            triplets.push(Triplet::new(i, index.pos(&xp), v));
        }
    }
    for (j, x) in index.pairs.iter().enumerate() {
        if x.is_diagonal() {
            triplets.push(Triplet::new(replaced, j, C64::new(1.0, 0.0)));
        }
    }
    let a = SparseColMat::<usize, C64>::try_new_from_triplets(d, d, &triplets).map_err(|e| Error::Linalg(format!("{e:?}")))?;
    let lu = a.sp_lu().map_err(|e| Error::Linalg(format!("{e:?}")))?;
    let mut rhs = Mat::<C64>::zeros(d, 1);
    rhs[(replaced, 0)] = C64::new(1.0, 0.0);
    let sol = lu.solve(&rhs);
    if (0..d).any(|i| !sol[(i, 0)].re.is_finite() || !sol[(i, 0)].im.is_finite()) {
        return Err(Error::DegenerateNess { nullity: 2 });
    }
    assemble_state(n, &index.pairs, |i| sol[(i, 0)])
}

fn assemble_state(n: usize, pairs: &[ConfigurationPair], value: impl Fn(usize) -> C64) -> Result<DensityMatrix> {
    let dim = 1usize << n;
    let mut m = Mat::<C64>::zeros(dim, dim);
    for (i, x) in pairs.iter().enumerate() {
        m[(x.row.index(), x.col.index())] = value(i);
    }
    // The null vector carries an arbitrary complex phase; the trace fixes it.
    let tr: C64 = (0..dim).map(|i| m[(i, i)]).sum();
    if tr.norm() == 0.0 {
        return Err(Error::ZeroState);
    }
    let phase = tr.conj() / tr.norm();
    for j in 0..dim {
        for i in 0..dim {
            m[(i, j)] *= phase;
        }
    }
    DensityMatrix::from_unnormalized(m)
}

/// `‖ℒ vec(ρ)‖₂` over all `4^N` pairs.
pub fn residual_norm(map: &LindbladMap, rho: &DensityMatrix) -> f64 {
    ConfigurationPair::all(map.n_sites())
        .map(|x| map.compute_row(&x).iter().map(|(xp, v)| v * rho.get(xp)).sum::<C64>().norm_sqr())
        .sum::<f64>()
        .sqrt()
}

fn sqrt_psd(m: &Mat<C64>) -> Result<Mat<C64>> {
    let eig = m.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
    let u = eig.U();
    let s = eig.S().column_vector();
    let dim = m.nrows();
    let scaled = Mat::<C64>::from_fn(dim, dim, |i, j| u[(i, j)] * s[j].re.max(0.0).sqrt());
    Ok(&scaled * u.adjoint())
}

/// Fidelity `Tr √(√ρ ρ₀ √ρ)`, clamped to `[0, 1]`.
pub fn fidelity(rho: &DensityMatrix, rho0: &DensityMatrix) -> Result<f64> {
    if rho.dimension() != rho0.dimension() {
        return Err(Error::NotADensityMatrix(format!("dimensions differ ({} vs {})", rho.dimension(), rho0.dimension())));
    }
    for r in [rho, rho0] {
        let herm = r.hermiticity_error();
        let tr = r.trace();
        if herm > DENSITY_TOL || (tr - C64::new(1.0, 0.0)).norm() > DENSITY_TOL {
            return Err(Error::NotADensityMatrix(format!("hermiticity {herm:e}, trace {tr}")));
        }
    }
    let root = sqrt_psd(rho.matrix())?;
    let inner = &(&root * rho0.matrix()) * &root;
    let dim = inner.nrows();
    let inner = Mat::<C64>::from_fn(dim, dim, |i, j| 0.5 * (inner[(i, j)] + inner[(j, i)].conj()));
    let eig = inner.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
    let f: f64 = eig.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok(f.clamp(0.0, 1.0))
}

/// `‖ℒρ‖² / ‖ρ‖²` with both sums running over all `4^N` pairs.
pub fn exact_cost(map: &LindbladMap, rho: impl Fn(&ConfigurationPair) -> C64) -> Result<f64> {
    let n = map.n_sites();
    let values: Vec<C64> = ConfigurationPair::all(n).map(|x| rho(&x)).collect();
    let norm: f64 = values.iter().map(|v| v.norm_sqr()).sum();
    if norm == 0.0 {
        return Err(Error::ZeroState);
    }
    let num: f64 =
        ConfigurationPair::all(n).map(|x| map.row(&x).iter().map(|(xp, v)| v * values[xp.dense_index()]).sum::<C64>().norm_sqr()).sum();
    Ok(num / norm)
}

/// `Tr(O ρ)`.
pub fn exact_expectation(rho: &DensityMatrix, obs: &impl OperatorRows) -> C64 {
    assert_eq!(obs.dimension(), rho.dimension());
    let mut buf = Vec::new();
    let mut acc = C64::new(0.0, 0.0);
    for s in 0..rho.dimension() {
        buf.clear();
        obs.row_entries(s, &mut buf);
        for &(sp, v) in &buf {
            acc += v * rho.matrix()[(sp, s)];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_lindblad_map, ChainSpec, DriveSpec, SparseOperator};

    fn single_site(plus: f64, minus: f64) -> LindbladMap {
        build_lindblad_map(&ChainSpec::single_site(), &DriveSpec::new(vec![plus], vec![minus]).unwrap()).unwrap()
    }

    fn diag(values: &[f64]) -> DensityMatrix {
        let d = values.len();
        DensityMatrix::new(Mat::<C64>::from_fn(d, d, |i, j| if i == j { C64::new(values[i], 0.0) } else { C64::new(0.0, 0.0) })).unwrap()
    }

    #[test]
    fn pure_decay_fixed_point() {
        let rho = steady_state_ed(&single_site(0.0, 1.0)).unwrap();
        assert!((rho.matrix()[(0, 0)].re - 1.0).abs() < 1e-12);
        assert!(rho.matrix()[(1, 1)].norm() < 1e-12);
        let sz = SparseOperator::from_row_fn(2, |r, out| out.push((r, C64::new(if r == 1 { 1.0 } else { -1.0 }, 0.0))));
        assert!((exact_expectation(&rho, &sz).re + 1.0).abs() < 1e-12);
        assert!((exact_expectation(&rho, &SparseOperator::identity(2)).re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_drive_gives_maximally_mixed() {
        let rho = steady_state_ed(&single_site(0.7, 0.7)).unwrap();
        for i in 0..2 {
            assert!((rho.matrix()[(i, i)].re - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_closed_forms() {
        let up = diag(&[0.0, 1.0]);
        let down = diag(&[1.0, 0.0]);
        let mixed = diag(&[0.5, 0.5]);
        assert!((fidelity(&mixed, &mixed).unwrap() - 1.0).abs() < 1e-12);
        assert!(fidelity(&up, &down).unwrap().abs() < 1e-12);
        assert!((fidelity(&mixed, &up).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((fidelity(&up, &mixed).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn not_a_density_matrix() {
        let m = Mat::<C64>::from_fn(2, 2, |i, j| if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
        assert!(matches!(DensityMatrix::new(m), Err(Error::NotADensityMatrix(_))));
    }

    #[test]
    fn identity_cost_for_pure_decay() {
        let map = single_site(0.0, 1.0);
        let c = exact_cost(&map, |x| if x.is_diagonal() { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }).unwrap();
        assert!((c - 1.0).abs() < 1e-15);
        assert!(matches!(exact_cost(&map, |_| C64::new(0.0, 0.0)), Err(Error::ZeroState)));
    }

    #[test]
    fn ness_has_zero_cost_and_residual() {
        let chain = ChainSpec::new(4, 1.0, 0.5).unwrap();
        let map = build_lindblad_map(&chain, &DriveSpec::model_b(4, 0.2).unwrap()).unwrap();
        let rho = steady_state_ed(&map).unwrap();
        assert!(residual_norm(&map, &rho) < 1e-10);
        assert!(exact_cost(&map, |x| rho.get(x)).unwrap() < 1e-18);
    }

    #[test]
    fn sparse_route_agrees_with_singular_vectors() {
        let chain = ChainSpec::new(4, 0.105, 1.0).unwrap();
        let map = build_lindblad_map(&chain, &DriveSpec::model_a(4, 0.2, 0.05).unwrap()).unwrap();
        let a = steady_state_dense(&map).unwrap();
        let b = steady_state_sparse(&map).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert!((a.matrix()[(i, j)] - b.matrix()[(i, j)]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn too_large_and_degenerate() {
        let chain = ChainSpec::new(11, 1.0, 1.0).unwrap();
        let map = build_lindblad_map(&chain, &DriveSpec::model_b(11, 0.2).unwrap()).unwrap();
        assert!(matches!(steady_state_ed(&map), Err(Error::TooLarge { .. })));
        // A single lowering jump in the middle of a chain with no hopping
        // leaves the other sites free: the nullspace is large.
        let chain = ChainSpec::new(3, 0.0, 0.0).unwrap();
        let drive = DriveSpec::new(vec![0.0; 3], vec![0.0, 1.0, 0.0]).unwrap();
        let map = build_lindblad_map(&chain, &drive).unwrap();
        assert!(matches!(steady_state_ed(&map), Err(Error::DegenerateNess { .. })));
    }

    #[test]
    fn ndo_density_matrix_is_normalized() {
        let p = crate::ndo::init_params(3, 1, 1, 1, 0.3).unwrap();
        let rho = DensityMatrix::from_ndo(&p, false).unwrap();
        assert!((rho.trace().re - 1.0).abs() < 1e-12);
        let projected = DensityMatrix::from_ndo(&p, true).unwrap();
        let x = ConfigurationPair::new(SpinConfiguration::new(1, 3).unwrap(), SpinConfiguration::new(0, 3).unwrap()).unwrap();
        assert_eq!(projected.get(&x), C64::new(0.0, 0.0));
        assert!(rho.min_eigenvalue().unwrap() > -1e-12);
    }
}
