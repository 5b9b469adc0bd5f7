//! Purified neural density operator built from two real restricted Boltzmann
//! machines, one for the amplitude (`λ`) and one for the phase (`μ`).
//!
//! With hidden units traced out and ancillas marginalized, the density matrix
//! has the closed form
//!
//! ```text
//! log ρ(σ,σ′) = Γ⁺_λ(σ,σ′) + i Γ⁻_μ(σ,σ′) + Π(σ,σ′)
//! Γ^±_X       = ½ ( Σ_j [log G(y^X_j(σ)) ± log G(y^X_j(σ′))] + Σ_i b^X_i (σ_i ± σ′_i) )
//! Π           = Σ_k log G( ½ Σ_l U^λ_lk (σ_l + σ′_l) + (i/2) Σ_l U^μ_lk (σ_l − σ′_l) + d^λ_k )
//! ```
//!
//! with `y^X_j(σ) = Σ_i W^X_ij σ_i + c^X_j` and `G(z) = 2 cosh z`.
//!
//! The flat parameter vector is laid out as `b^λ, c^λ, W^λ, d^λ, U^λ, b^μ,
//! c^μ, W^μ, U^μ`, with both weight matrices stored row-major by site. A
//! phase-net ancillary bias cancels out of `ρ` and is not allocated.

use std::io::{Read, Write};
use std::ops::Range;

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{ConfigurationPair, SpinConfiguration};

/// `log(2 cosh y)` without overflow.
#[inline]
pub fn log_2cosh(y: f64) -> f64 {
    let a = y.abs();
    a + (-2.0 * a).exp().ln_1p()
}

/// Principal-branch `log(2 cosh z)` for complex `z` without overflow.
#[inline]
pub fn log_2cosh_c(z: C64) -> C64 {
    let z = if z.re < 0.0 { -z } else { z };
    z + (C64::new(1.0, 0.0) + (-2.0 * z).exp()).ln()
}

/// `tanh z` evaluated through `e^{−2|Re z|}` so it cannot overflow.
#[inline]
pub fn tanh_c(z: C64) -> C64 {
    let (w, sign) = if z.re < 0.0 { (-z, -1.0) } else { (z, 1.0) };
    let e = (-2.0 * w).exp();
    sign * (C64::new(1.0, 0.0) - e) / (C64::new(1.0, 0.0) + e)
}

/// Number of parameters `2(N + M + N·M + N·K) + K`.
pub fn param_count(n_sites: usize, alpha: usize, beta_anc: usize) -> usize {
    NdoLayout::new(n_sites, alpha, beta_anc).total()
}

/// Named parameter blocks of the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    VisibleLambda,
    HiddenLambda,
    WeightsLambda,
    AncillaBiasLambda,
    AncillaWeightsLambda,
    VisibleMu,
    HiddenMu,
    WeightsMu,
    AncillaWeightsMu,
}

/// Offsets of the parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NdoLayout {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    b_l: usize,
    c_l: usize,
    w_l: usize,
    d_l: usize,
    u_l: usize,
    b_m: usize,
    c_m: usize,
    w_m: usize,
    u_m: usize,
    total: usize,
}

impl NdoLayout {
    pub fn new(n_sites: usize, alpha: usize, beta_anc: usize) -> Self {
        let (n, m, k) = (n_sites, alpha * n_sites, beta_anc * n_sites);
        let b_l = 0;
        let c_l = b_l + n;
        let w_l = c_l + m;
        let d_l = w_l + n * m;
        let u_l = d_l + k;
        let b_m = u_l + n * k;
        let c_m = b_m + n;
        let w_m = c_m + m;
        let u_m = w_m + n * m;
        let total = u_m + n * k;
        Self { n, m, k, b_l, c_l, w_l, d_l, u_l, b_m, c_m, w_m, u_m, total }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, block: Block) -> Range<usize> {
        let (start, len) = match block {
            Block::VisibleLambda => (self.b_l, self.n),
            Block::HiddenLambda => (self.c_l, self.m),
            Block::WeightsLambda => (self.w_l, self.n * self.m),
            Block::AncillaBiasLambda => (self.d_l, self.k),
            Block::AncillaWeightsLambda => (self.u_l, self.n * self.k),
            Block::VisibleMu => (self.b_m, self.n),
            Block::HiddenMu => (self.c_m, self.m),
            Block::WeightsMu => (self.w_m, self.n * self.m),
            Block::AncillaWeightsMu => (self.u_m, self.n * self.k),
        };
        start..start + len
    }
}

/// Parameters of both networks as one flat real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct NdoParameters {
    layout: NdoLayout,
    alpha: usize,
    beta_anc: usize,
    values: Vec<f64>,
}

impl NdoParameters {
    pub fn zeros(n_sites: usize, alpha: usize, beta_anc: usize) -> Result<Self> {
        Self::check_shape(n_sites, alpha, beta_anc)?;
        let layout = NdoLayout::new(n_sites, alpha, beta_anc);
        Ok(Self { layout, alpha, beta_anc, values: vec![0.0; layout.total()] })
    }

    pub fn from_flat(n_sites: usize, alpha: usize, beta_anc: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_shape(n_sites, alpha, beta_anc)?;
        let layout = NdoLayout::new(n_sites, alpha, beta_anc);
        if values.len() != layout.total() {
            return Err(Error::InvalidConfiguration(format!("expected {} parameters, got {}", layout.total(), values.len())));
        }
        Ok(Self { layout, alpha, beta_anc, values })
    }

    fn check_shape(n_sites: usize, alpha: usize, beta_anc: usize) -> Result<()> {
        if n_sites == 0 || alpha == 0 || beta_anc == 0 {
            return Err(Error::InvalidConfiguration(format!(
                "sites and densities must be positive (N={n_sites}, α={alpha}, β={beta_anc})"
            )));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.layout.n
    }

    pub fn alpha(&self) -> usize {
        self.alpha
    }

    pub fn beta_anc(&self) -> usize {
        self.beta_anc
    }

    pub fn layout(&self) -> &NdoLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, block: Block) -> &[f64] {
        &self.values[self.layout.range(block)]
    }

    pub fn block_mut(&mut self, block: Block) -> &mut [f64] {
        let r = self.layout.range(block);
        &mut self.values[r]
    }

    /// Copy with the flat vector replaced.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self { layout: self.layout, alpha: self.alpha, beta_anc: self.beta_anc, values }
    }

    fn hidden_field(&self, w: usize, c: usize, j: usize, spins: &[f64]) -> f64 {
        let m = self.layout.m;
        let v = &self.values;
        let mut y = v[c + j];
        for (i, s) in spins.iter().enumerate() {
            y += v[w + i * m + j] * s;
        }
        y
    }

    fn ancilla_field(&self, k: usize, sum: &[f64], diff: &[f64]) -> C64 {
        let (l, kk) = (&self.layout, self.layout.k);
        let v = &self.values;
        let mut re = v[l.d_l + k];
        let mut im = 0.0;
        for i in 0..l.n {
            re += 0.5 * v[l.u_l + i * kk + k] * sum[i];
            im += 0.5 * v[l.u_m + i * kk + k] * diff[i];
        }
        C64::new(re, im)
    }

    fn check_pair(&self, x: &ConfigurationPair) {
        assert_eq!(x.n_sites(), self.layout.n, "configuration length does not match the parameters");
    }

    /// `log ρ(σ, σ′)`.
    pub fn log_rho(&self, x: &ConfigurationPair) -> C64 {
        self.check_pair(x);
        let l = &self.layout;
        let v = &self.values;
        let s = spins_f64(x.row);
        let sp = spins_f64(x.col);
        let sum: Vec<f64> = s.iter().zip(&sp).map(|(a, b)| a + b).collect();
        let diff: Vec<f64> = s.iter().zip(&sp).map(|(a, b)| a - b).collect();

        let mut amp = 0.0;
        let mut phase = 0.0;
        for i in 0..l.n {
            amp += v[l.b_l + i] * sum[i];
            phase += v[l.b_m + i] * diff[i];
        }
        for j in 0..l.m {
            amp += log_2cosh(self.hidden_field(l.w_l, l.c_l, j, &s)) + log_2cosh(self.hidden_field(l.w_l, l.c_l, j, &sp));
            if x.row != x.col {
                phase += log_2cosh(self.hidden_field(l.w_m, l.c_m, j, &s)) - log_2cosh(self.hidden_field(l.w_m, l.c_m, j, &sp));
            }
        }
        let mut out = C64::new(0.5 * amp, 0.5 * phase);
        for k in 0..l.k {
            out += log_2cosh_c(self.ancilla_field(k, &sum, &diff));
        }
        out
    }

    /// `log ρ(σ, σ)`, which is real for every parameter set.
    pub fn log_rho_diagonal(&self, sigma: SpinConfiguration) -> f64 {
        self.log_rho(&ConfigurationPair::diagonal(sigma)).re
    }

    /// Gradient of `log ρ` with respect to the flat parameter vector.
    pub fn log_derivatives(&self, x: &ConfigurationPair) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.layout.total];
        self.log_derivatives_into(x, &mut out);
        out
    }

    /// Writes the log-derivatives into `out` (length `P`).
    pub fn log_derivatives_into(&self, x: &ConfigurationPair, out: &mut [C64]) {
        self.check_pair(x);
        let l = &self.layout;
        assert_eq!(out.len(), l.total);
        let (n, m, kk) = (l.n, l.m, l.k);
        let s = spins_f64(x.row);
        let sp = spins_f64(x.col);
        let sum: Vec<f64> = s.iter().zip(&sp).map(|(a, b)| a + b).collect();
        let diff: Vec<f64> = s.iter().zip(&sp).map(|(a, b)| a - b).collect();

        for i in 0..n {
            out[l.b_l + i] = C64::new(0.5 * sum[i], 0.0);
            out[l.b_m + i] = C64::new(0.0, 0.5 * diff[i]);
        }
        for j in 0..m {
            let t = self.hidden_field(l.w_l, l.c_l, j, &s).tanh();
            let tp = self.hidden_field(l.w_l, l.c_l, j, &sp).tanh();
            out[l.c_l + j] = C64::new(0.5 * (t + tp), 0.0);
            for i in 0..n {
                out[l.w_l + i * m + j] = C64::new(0.5 * (s[i] * t + sp[i] * tp), 0.0);
            }
            let t = self.hidden_field(l.w_m, l.c_m, j, &s).tanh();
            let tp = self.hidden_field(l.w_m, l.c_m, j, &sp).tanh();
            out[l.c_m + j] = C64::new(0.0, 0.5 * (t - tp));
            for i in 0..n {
                out[l.w_m + i * m + j] = C64::new(0.0, 0.5 * (s[i] * t - sp[i] * tp));
            }
        }
        for k in 0..kk {
            let tau = tanh_c(self.ancilla_field(k, &sum, &diff));
            out[l.d_l + k] = tau;
            for i in 0..n {
                out[l.u_l + i * kk + k] = tau * (0.5 * sum[i]);
                out[l.u_m + i * kk + k] = tau * C64::new(0.0, 0.5 * diff[i]);
            }
        }
    }
}

/// Per-configuration factors of `log ρ` at fixed parameters.
///
/// Apart from the ancilla log-cosh, every term of `log ρ(σ,σ′)` splits into
/// a row part and a column part, and the ancilla field itself is
/// `d + A(σ) + A(σ′)*` with `A(σ) = ½ U^λᵀσ + (i/2) U^μᵀσ`. Tabulating these
/// once per distinct configuration leaves `O(K)` work per pair.
#[derive(Clone, Debug)]
pub struct SideTable {
    n: usize,
    m: usize,
    k: usize,
    spins: Vec<f64>,
    amp: Vec<f64>,
    phase: Vec<f64>,
    anc: Vec<C64>,
    t_amp: Vec<f64>,
    t_phase: Vec<f64>,
    bias: Vec<f64>,
}

impl SideTable {
    /// Tabulates `configs`; pairs are then addressed by positions in that slice.
    pub fn new(params: &NdoParameters, configs: &[SpinConfiguration]) -> Self {
        let l = params.layout;
        let (n, m, k) = (l.n, l.m, l.k);
        let v = &params.values;
        let count = configs.len();
        let mut t = Self {
            n,
            m,
            k,
            spins: Vec::with_capacity(count * n),
            amp: Vec::with_capacity(count),
            phase: Vec::with_capacity(count),
            anc: Vec::with_capacity(count * k),
            t_amp: Vec::with_capacity(count * m),
            t_phase: Vec::with_capacity(count * m),
            bias: v[l.d_l..l.d_l + k].to_vec(),
        };
        for sigma in configs {
            assert_eq!(sigma.n_sites(), n, "configuration length does not match the parameters");
            let s = spins_f64(*sigma);
            let mut amp = 0.0;
            let mut phase = 0.0;
            for i in 0..n {
                amp += v[l.b_l + i] * s[i];
                phase += v[l.b_m + i] * s[i];
            }
            for j in 0..m {
                let y = params.hidden_field(l.w_l, l.c_l, j, &s);
                amp += log_2cosh(y);
                t.t_amp.push(y.tanh());
                let y = params.hidden_field(l.w_m, l.c_m, j, &s);
                phase += log_2cosh(y);
                t.t_phase.push(y.tanh());
            }
            for q in 0..k {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    re += 0.5 * v[l.u_l + i * k + q] * s[i];
                    im += 0.5 * v[l.u_m + i * k + q] * s[i];
                }
                t.anc.push(C64::new(re, im));
            }
            t.amp.push(amp);
            t.phase.push(phase);
            t.spins.extend_from_slice(&s);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.amp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amp.is_empty()
    }

    #[inline]
    fn field(&self, r: usize, c: usize, q: usize) -> C64 {
        self.bias[q] + self.anc[r * self.k + q] + self.anc[c * self.k + q].conj()
    }

    /// `log ρ` of the pair (`configs[r]`, `configs[c]`).
    pub fn log_rho(&self, r: usize, c: usize) -> C64 {
        let mut out = C64::new(0.5 * (self.amp[r] + self.amp[c]), 0.5 * (self.phase[r] - self.phase[c]));
        for q in 0..self.k {
            out += log_2cosh_c(self.field(r, c, q));
        }
        out
    }

    /// `Re Σ_x coef_x ∂log ρ(x)/∂θ` over pairs `(r, c)`, with the sum taken
    /// per configuration rather than per pair.
    pub fn gradient_sum(&self, params: &NdoParameters, pairs: &[(u32, u32)], coef: &[C64]) -> Vec<f64> {
        assert_eq!(pairs.len(), coef.len());
        let l = params.layout;
        let (n, m, k) = (self.n, self.m, self.k);
        let count = self.len();
        // Per-configuration weights of the row-separable blocks.
        let mut amp_w = vec![0.0; count];
        let mut phase_w = vec![0.0; count];
        let mut b_row = vec![C64::new(0.0, 0.0); count * k];
        let mut b_col = vec![C64::new(0.0, 0.0); count * k];
        let mut out = vec![0.0; l.total];
        for (&(r, c), &z) in pairs.iter().zip(coef) {
            if z == C64::new(0.0, 0.0) {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            amp_w[r] += z.re;
            amp_w[c] += z.re;
            phase_w[r] -= z.im;
            phase_w[c] += z.im;
            for q in 0..k {
                let zt = z * tanh_c(self.field(r, c, q));
                out[l.d_l + q] += zt.re;
                b_row[r * k + q] += zt;
                b_col[c * k + q] += zt;
            }
        }
        for a in 0..count {
            let s = &self.spins[a * n..(a + 1) * n];
            let (wa, wp) = (0.5 * amp_w[a], 0.5 * phase_w[a]);
            if wa != 0.0 || wp != 0.0 {
                let ta = &self.t_amp[a * m..(a + 1) * m];
                let tp = &self.t_phase[a * m..(a + 1) * m];
                for i in 0..n {
                    out[l.b_l + i] += wa * s[i];
                    out[l.b_m + i] += wp * s[i];
                }
                for j in 0..m {
                    out[l.c_l + j] += wa * ta[j];
                    out[l.c_m + j] += wp * tp[j];
                }
                for i in 0..n {
                    let (sa, sp) = (wa * s[i], wp * s[i]);
                    for j in 0..m {
                        out[l.w_l + i * m + j] += sa * ta[j];
                        out[l.w_m + i * m + j] += sp * tp[j];
                    }
                }
            }
            for q in 0..k {
                let (br, bc) = (b_row[a * k + q], b_col[a * k + q]);
                let re = 0.5 * (br.re + bc.re);
                let im = 0.5 * (bc.im - br.im);
                for i in 0..n {
                    out[l.u_l + i * k + q] += re * s[i];
                    out[l.u_m + i * k + q] += im * s[i];
                }
            }
        }
        out
    }
}

fn spins_f64(sigma: SpinConfiguration) -> Vec<f64> {
    (0..sigma.n_sites()).map(|i| f64::from(sigma.spin(i))).collect()
}

/// Draws every parameter i.i.d. from `N(0, stddev²)`.
pub fn init_params(n_sites: usize, alpha: usize, beta_anc: usize, seed: u64, stddev: f64) -> Result<NdoParameters> {
    if !(stddev > 0.0 && stddev.is_finite()) {
        return Err(Error::InvalidConfiguration(format!("stddev must be positive, got {stddev}")));
    }
    let mut params = NdoParameters::zeros(n_sites, alpha, beta_anc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, stddev).expect("valid normal");
    for v in params.as_mut_slice() {
        *v = normal.sample(&mut rng);
    }
    Ok(params)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"NDOCKPT1";

/// Parameters plus the run position they were saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NdoParameters,
    pub seed: u64,
    pub iteration: u64,
}

impl Checkpoint {
    /// Binary layout, all integers and floats little-endian:
    ///
    /// | offset | size | content                       |
    /// |--------|------|-------------------------------|
    /// | 0      | 8    | magic `NDOCKPT1`              |
    /// | 8      | 4    | `u32` number of sites N       |
    /// | 12     | 4    | `u32` hidden density α        |
    /// | 16     | 4    | `u32` ancilla density β       |
    /// | 20     | 4    | `u32` reserved, zero          |
    /// | 24     | 8    | `u64` seed                    |
    /// | 32     | 8    | `u64` iteration               |
    /// | 40     | 8    | `u64` parameter count P       |
    /// | 48     | 8·P  | `f64` parameters, flat layout |
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let p = &self.params;
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [p.n_sites(), p.alpha(), p.beta_anc(), 0] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.iteration.to_le_bytes())?;
        w.write_all(&(p.len() as u64).to_le_bytes())?;
        for v in p.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u32s = [0u32; 4];
        for v in &mut u32s {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let mut u64s = [0u64; 3];
        for v in &mut u64s {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = u64::from_le_bytes(b);
        }
        let [n, alpha, beta, _] = u32s.map(|v| v as usize);
        let [seed, iteration, count] = u64s;
        let expected = param_count(n, alpha, beta);
        if count as usize != expected {
            return Err(Error::Checkpoint(format!("header declares {count} parameters, shape implies {expected}")));
        }
        let mut values = Vec::with_capacity(expected);
        for _ in 0..expected {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        let params = NdoParameters::from_flat(n, alpha, beta, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self { params, seed, iteration })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
