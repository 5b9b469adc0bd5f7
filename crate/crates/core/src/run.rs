//! Run harness: configuration, training loop, artifacts on disk, resume and
//! cross-run comparison.
//!
//! A run directory holds
//!
//! | file              | content                                              |
//! |-------------------|------------------------------------------------------|
//! | `config.toml`     | the effective configuration                          |
//! | `log.csv`         | one row per iteration                                |
//! | `observables.csv` | magnetizations and bond currents every `eval_every`  |
//! | `fidelity.csv`    | fidelity against the exact steady state (oracle on)  |
//! | `reference.json`  | exact observables (oracle on)                        |
//! | `checkpoint.bin`  | parameters, see [`Checkpoint`]                       |
//! | `optimizer.json`  | optimizer and noise-trigger state for resuming       |
//! | `summary.json`    | final numbers, read back by [`compare`]              |

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Objective;
use crate::exact::{exact_expectation, fidelity, steady_state_ed, DensityMatrix, ED_MAX_SITES};
use crate::model::{build_lindblad_map, ChainSpec, DriveSpec, LindbladMap};
use crate::ndo::{init_params, Checkpoint, NdoParameters};
use crate::observables::{chain_observables, BondCurrent, ChainObservables, SiteMagnetization};
use crate::optimize::{
    inject_noise, mse_pretrain, nagd_plus_step, sgd_step, sr_step, Extrapolation, NagdConfig, NoiseTrigger, OptimizerState,
};
use crate::sampler::{sample_diagonal, sample_pairs, DiagonalBatch, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelPreset {
    /// Dissipation on every site, biased at the two ends.
    A,
    /// Injection at the first site, extraction at the last.
    B,
    /// Per-site rates from `gamma_plus` and `gamma_minus`.
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "sr")]
    Sr,
    #[serde(rename = "nagd+")]
    NagdPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtrapolationMode {
    Fixed,
    Dynamic,
}

/// Everything a run depends on. Serialized as a flat TOML table; missing
/// keys take the defaults below and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelPreset,
    pub n_sites: usize,
    /// `J`; absent means 0.105 for model A and 1 otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    pub anisotropy: f64,
    pub gamma: f64,
    /// Model A end-site bias `δ`.
    pub bias: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gamma_plus: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gamma_minus: Vec<f64>,

    pub alpha: usize,
    pub beta_anc: usize,
    pub seed: u64,
    pub init_stddev: f64,

    pub optimizer: OptimizerKind,
    /// SGD and SR step size; absent means 0.05 for SGD and 0.01 for SR.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub diag_shift: f64,
    pub extrapolation: ExtrapolationMode,
    /// Fixed extrapolation coefficient `γ_t`.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub initial_lipschitz: f64,
    pub max_lipschitz: f64,
    pub precondition: bool,
    pub backtracking: bool,
    pub adaptive_restart: bool,

    pub noise: bool,
    pub noise_window: usize,
    pub noise_tolerance: f64,
    pub noise_factor: f64,
    pub noise_scale: f64,

    pub beta_rw: f64,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_burn_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thinning: Option<usize>,
    pub n_chains: usize,
    /// Diagonal samples per observable evaluation in Monte Carlo mode.
    pub n_diagonal_samples: usize,
    /// Replace every batch by the full `ΔS^z = 0` enumeration.
    pub exact_sums: bool,

    pub max_iterations: u64,
    pub pretrain_steps: usize,
    pub pretrain_subsample: usize,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub ed_oracle: bool,
    pub output: PathBuf,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let nagd = NagdConfig::default();
        Self {
            model: ModelPreset::A,
            n_sites: 6,
            coupling: None,
            anisotropy: 1.0,
            gamma: 0.2,
            bias: 0.05,
            gamma_plus: Vec::new(),
            gamma_minus: Vec::new(),
            alpha: 1,
            beta_anc: 1,
            seed: 0,
            init_stddev: 0.1,
            optimizer: OptimizerKind::NagdPlus,
            learning_rate: None,
            diag_shift: 0.1,
            extrapolation: ExtrapolationMode::Fixed,
            momentum: 0.9,
            beta1: nagd.beta1,
            beta2: nagd.beta2,
            epsilon: nagd.epsilon,
            initial_lipschitz: nagd.initial_lipschitz,
            max_lipschitz: nagd.max_lipschitz,
            precondition: true,
            backtracking: true,
            adaptive_restart: false,
            noise: true,
            noise_window: 100,
            noise_tolerance: 1e-4,
            noise_factor: 10.0,
            noise_scale: 1e-3,
            beta_rw: 0.15,
            n_samples: 2000,
            n_burn_in: None,
            thinning: None,
            n_chains: 4,
            n_diagonal_samples: 10_000,
            exact_sums: false,
            max_iterations: 3000,
            pretrain_steps: 10,
            pretrain_subsample: 4096,
            eval_every: 100,
            checkpoint_every: 100,
            ed_oracle: true,
            output: PathBuf::from("run"),
            resume: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn coupling(&self) -> f64 {
        self.coupling.unwrap_or(match self.model {
            ModelPreset::A => 0.105,
            _ => 1.0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.optimizer {
            OptimizerKind::Sr => 0.01,
            _ => 0.05,
        })
    }

    pub fn chain(&self) -> Result<ChainSpec> {
        ChainSpec::new(self.n_sites, self.coupling(), self.anisotropy)
    }

    pub fn drive(&self) -> Result<DriveSpec> {
        match self.model {
            ModelPreset::A => DriveSpec::model_a(self.n_sites, self.gamma, self.bias),
            ModelPreset::B => DriveSpec::model_b(self.n_sites, self.gamma),
            ModelPreset::Custom => DriveSpec::new(self.gamma_plus.clone(), self.gamma_minus.clone()),
        }
    }

    pub fn nagd(&self) -> NagdConfig {
        NagdConfig {
            extrapolation: match self.extrapolation {
                ExtrapolationMode::Fixed => Extrapolation::Fixed(self.momentum),
                ExtrapolationMode::Dynamic => Extrapolation::Dynamic,
            },
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            initial_lipschitz: self.initial_lipschitz,
            precondition: self.precondition,
            backtracking: self.backtracking,
            max_lipschitz: self.max_lipschitz,
            adaptive_restart: self.adaptive_restart,
        }
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            beta_rw: self.beta_rw,
            n_samples: self.n_samples,
            n_burn_in: self.n_burn_in,
            thinning: self.thinning,
            n_chains: self.n_chains,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model != ModelPreset::Custom && !(self.gamma_plus.is_empty() && self.gamma_minus.is_empty()) {
            return bad("gamma_plus and gamma_minus are only read with model = \"custom\"".into());
        }
        if self.alpha == 0 || self.beta_anc == 0 {
            return bad("alpha and beta_anc must be positive".into());
        }
        if !(self.init_stddev > 0.0 && self.init_stddev.is_finite()) {
            return bad(format!("init_stddev must be positive, got {}", self.init_stddev));
        }
        if self.learning_rate().is_nan() || self.learning_rate() <= 0.0 || self.diag_shift.is_nan() || self.diag_shift < 0.0 {
            return bad("learning_rate must be positive and diag_shift nonnegative".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be positive".into());
        }
        if self.noise && !(self.noise_scale >= 0.0 && self.noise_tolerance >= 0.0 && self.noise_window > 0) {
            return bad("noise settings must be nonnegative with a positive window".into());
        }
        if self.n_diagonal_samples == 0 {
            return bad("n_diagonal_samples must be positive".into());
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        let chain = self.chain().map_err(wrap)?;
        let drive = self.drive().map_err(wrap)?;
        if drive.n_sites() != chain.n_sites() {
            return bad(format!("drive has {} sites, chain has {}", drive.n_sites(), chain.n_sites()));
        }
        self.nagd().validate().map_err(wrap)?;
        self.sampler(0).validate().map_err(wrap)?;
        Ok(())
    }

    /// The fields that define the physical instance.
    pub fn instance(&self) -> Instance {
        Instance {
            model: self.model,
            n_sites: self.n_sites,
            coupling: self.coupling(),
            anisotropy: self.anisotropy,
            gamma: self.gamma,
            bias: self.bias,
            gamma_plus: self.gamma_plus.clone(),
            gamma_minus: self.gamma_minus.clone(),
        }
    }
}

/// Physical instance of a run, compared by [`compare`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub model: ModelPreset,
    pub n_sites: usize,
    pub coupling: f64,
    pub anisotropy: f64,
    pub gamma: f64,
    pub bias: f64,
    #[serde(default)]
    pub gamma_plus: Vec<f64>,
    #[serde(default)]
    pub gamma_minus: Vec<f64>,
}

impl Instance {
    fn same_physics_except_length(&self, other: &Self) -> bool {
        Self { n_sites: 0, ..self.clone() } == Self { n_sites: 0, ..other.clone() }
    }
}

/// Independent RNG streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum SeedStream {
    Init = 1,
    Pretrain = 2,
    Sampler = 3,
    Diagonal = 4,
    Noise = 5,
}

/// Seed number `index` of `stream`; random access, so a resumed run draws
/// the same seeds as an uninterrupted one.
pub fn derive_seed(master: u64, stream: SeedStream, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Exact observables of the steady state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub magnetization: Vec<f64>,
    pub bond_currents: Vec<f64>,
    pub mean_current: f64,
}

impl Reference {
    pub fn from_state(rho: &DensityMatrix) -> Result<Self> {
        let n = rho.n_sites();
        let magnetization = (0..n).map(|i| Ok(exact_expectation(rho, &SiteMagnetization::new(n, i)?).re)).collect::<Result<Vec<_>>>()?;
        let bond_currents =
            (0..n - 1).map(|k| Ok(exact_expectation(rho, &BondCurrent::new(n, k, k + 1)?).re)).collect::<Result<Vec<_>>>()?;
        let mean_current = bond_currents.iter().sum::<f64>() / bond_currents.len() as f64;
        Ok(Self { magnetization, bond_currents, mean_current })
    }
}

/// Final numbers of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub instance: Instance,
    pub optimizer: OptimizerKind,
    pub exact_sums: bool,
    pub alpha: usize,
    pub beta_anc: usize,
    pub seed: u64,
    pub iterations: u64,
    pub final_cost: f64,
    pub fidelity: Option<f64>,
    pub mean_current: f64,
    pub mean_current_se: f64,
    pub i12: f64,
    pub magnetization: Vec<f64>,
    pub reference: Option<Reference>,
    pub noise_events: u64,
    pub pretrain_mse: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResumeState {
    optimizer: OptimizerState,
    trigger: NoiseTrigger,
    noise_events: u64,
    last_cost: f64,
    elapsed: f64,
    pretrain_mse: Option<f64>,
}

const LOG_HEADER: &str = "iteration,cost,lipschitz,step_norm,backtracks,n_effective,noise,wall_time";
const FIDELITY_HEADER: &str = "iteration,fidelity";

fn observables_header(n: usize) -> String {
    let mut h = String::from("iteration,mean_current,mean_current_se");
    for k in 0..n - 1 {
        let _ = write!(h, ",current_{}_{}", k + 1, k + 2);
    }
    for i in 0..n {
        let _ = write!(h, ",magnetization_{}", i + 1);
    }
    h
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Keeps the header and every row whose iteration is at most `last`.
fn truncate_csv(path: &Path, header: &str, last: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(header);
    out.push('\n');
    for line in text.lines().skip(1) {
        let it: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
        if it <= last {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn open_append(path: &Path) -> Result<fs::File> {
    Ok(fs::OpenOptions::new().append(true).create(true).open(path)?)
}

/// Paths of the artifacts inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }
    pub fn observables(&self) -> PathBuf {
        self.dir.join("observables.csv")
    }
    pub fn fidelity(&self) -> PathBuf {
        self.dir.join("fidelity.csv")
    }
    pub fn reference(&self) -> PathBuf {
        self.dir.join("reference.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    pub fn optimizer(&self) -> PathBuf {
        self.dir.join("optimizer.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

/// Observables of `params`: full enumeration with exact sums, otherwise a
/// fresh diagonal batch seeded by the iteration.
pub fn evaluate_observables(config: &RunConfig, params: &NdoParameters, iteration: u64) -> Result<ChainObservables> {
    let batch = if config.exact_sums {
        DiagonalBatch::enumerate(params)?
    } else {
        let mut sc = config.sampler(derive_seed(config.seed, SeedStream::Diagonal, iteration));
        sc.n_samples = config.n_diagonal_samples;
        sample_diagonal(params, &sc)?
    };
    chain_observables(params, &batch)
}

/// Fidelity of the sector-projected network state against `rho0`.
pub fn network_fidelity(params: &NdoParameters, rho0: &DensityMatrix) -> Result<f64> {
    fidelity(&DensityMatrix::from_ndo(params, true)?, rho0)
}

/// Trains according to `config` and writes the artifacts listed in the
/// module documentation.
pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let n = config.n_sites;
    let map = build_lindblad_map(&config.chain()?, &config.drive()?)?;
    let paths = RunPaths::new(&config.output);
    fs::create_dir_all(&paths.dir)?;
    let resuming = config.resume && paths.checkpoint().exists() && paths.optimizer().exists();
    if resuming {
        let saved = RunConfig::load(paths.config())?;
        let comparable = RunConfig { max_iterations: 0, resume: false, ..saved };
        if comparable != (RunConfig { max_iterations: 0, resume: false, ..config.clone() }) {
            return Err(Error::Config("resume requested with a configuration that differs from the saved one".into()));
        }
    }
    fs::write(paths.config(), config.to_toml()?)?;

    let rho0 = if config.ed_oracle && n <= ED_MAX_SITES { Some(steady_state_ed(&map)?) } else { None };
    let reference = rho0.as_ref().map(Reference::from_state).transpose()?;
    if let Some(r) = &reference {
        write_json(&paths.reference(), r)?;
    }

    let nagd = config.nagd();
    let (mut params, mut resume) = if resuming {
        let ck = Checkpoint::load(paths.checkpoint())?;
        let saved: ResumeState = read_json(&paths.optimizer())?;
        if ck.iteration != saved.optimizer.iteration || ck.params.n_sites() != n {
            return Err(Error::Checkpoint("checkpoint and optimizer state disagree".into()));
        }
        let it = ck.iteration;
        truncate_csv(&paths.log(), LOG_HEADER, it)?;
        truncate_csv(&paths.observables(), &observables_header(n), it)?;
        truncate_csv(&paths.fidelity(), FIDELITY_HEADER, it)?;
        (ck.params, saved)
    } else {
        let p0 = init_params(n, config.alpha, config.beta_anc, derive_seed(config.seed, SeedStream::Init, 0), config.init_stddev)?;
        let (p, trace) =
            mse_pretrain(&p0, config.pretrain_steps, config.pretrain_subsample, derive_seed(config.seed, SeedStream::Pretrain, 0))?;
        fs::write(paths.log(), format!("{LOG_HEADER}\n"))?;
        fs::write(paths.observables(), format!("{}\n", observables_header(n)))?;
        if rho0.is_some() {
            fs::write(paths.fidelity(), format!("{FIDELITY_HEADER}\n"))?;
        }
        let state = OptimizerState::new(p.as_slice().to_vec(), &nagd);
        let trigger = NoiseTrigger::new(config.noise_window, config.noise_tolerance, config.noise_factor, config.noise_scale);
        let pretrain_mse = (config.pretrain_steps > 0).then_some(trace.final_mse);
        (p, ResumeState { optimizer: state, trigger, noise_events: 0, last_cost: f64::NAN, elapsed: 0.0, pretrain_mse })
    };

    let exact_objective = config.exact_sums.then(|| Objective::exact(&params, &map));
    let mut log = open_append(&paths.log())?;
    let mut obs_file = open_append(&paths.observables())?;
    let mut fid_file = if rho0.is_some() { Some(open_append(&paths.fidelity())?) } else { None };
    let clock = Instant::now();
    let base_elapsed = resume.elapsed;
    let start = resume.optimizer.iteration;
    let mut last_obs = None;
    let mut last_fid = None;

    for it in start + 1..=config.max_iterations {
        let step = train_step(config, &map, exact_objective.as_ref(), &params, &nagd, &mut resume.optimizer, it)?;
        let mut noise = false;
        if config.noise && resume.trigger.observe(step.cost) {
            let noisy = inject_noise(
                &params.with_values(resume.optimizer.x.clone()),
                resume.trigger.scale,
                derive_seed(config.seed, SeedStream::Noise, it),
            )?;
            resume.optimizer.x = noisy.into_flat();
            resume.optimizer.reset_momentum();
            resume.noise_events += 1;
            noise = true;
        }
        params = params.with_values(resume.optimizer.x.clone());
        resume.last_cost = step.cost;
        let wall = base_elapsed + clock.elapsed().as_secs_f64();
        writeln!(
            log,
            "{it},{},{},{},{},{},{},{}",
            num(step.cost),
            num(step.lipschitz),
            num(step.step_norm),
            step.backtracks,
            num(step.n_effective),
            u8::from(noise),
            num(wall)
        )?;

        let last = it == config.max_iterations;
        if it % config.eval_every == 0 || last {
            let obs = evaluate_observables(config, &params, it)?;
            let mut row = format!("{it},{},{}", num(obs.mean_current.value), num(obs.mean_current.std_error));
            for v in obs.bond_currents.iter().chain(&obs.magnetization) {
                let _ = write!(row, ",{}", num(v.value));
            }
            writeln!(obs_file, "{row}")?;
            last_obs = Some(obs);
            if let (Some(r0), Some(f)) = (&rho0, fid_file.as_mut()) {
                let fid = network_fidelity(&params, r0)?;
                writeln!(f, "{it},{}", num(fid))?;
                last_fid = Some(fid);
            }
        }
        if it % config.checkpoint_every == 0 || last {
            log.flush()?;
            obs_file.flush()?;
            if let Some(f) = fid_file.as_mut() {
                f.flush()?;
            }
            resume.elapsed = wall;
            Checkpoint { params: params.clone(), seed: config.seed, iteration: it }.save(paths.checkpoint())?;
            write_json(&paths.optimizer(), &resume)?;
        }
        log::debug!("iteration {it}: cost {:e}, L {:e}", step.cost, step.lipschitz);
    }

    let obs = match last_obs {
        Some(o) => o,
        None => evaluate_observables(config, &params, resume.optimizer.iteration)?,
    };
    let fid = match (last_fid, &rho0) {
        (Some(f), _) => Some(f),
        (None, Some(r0)) => Some(network_fidelity(&params, r0)?),
        (None, None) => None,
    };
    let summary = RunSummary {
        instance: config.instance(),
        optimizer: config.optimizer,
        exact_sums: config.exact_sums,
        alpha: config.alpha,
        beta_anc: config.beta_anc,
        seed: config.seed,
        iterations: resume.optimizer.iteration,
        final_cost: resume.last_cost,
        fidelity: fid,
        mean_current: obs.mean_current.value,
        mean_current_se: obs.mean_current.std_error,
        i12: obs.bond_currents.first().map_or(f64::NAN, |b| b.value),
        magnetization: obs.magnetization.iter().map(|m| m.value).collect(),
        reference,
        noise_events: resume.noise_events,
        pretrain_mse: resume.pretrain_mse,
        wall_time: base_elapsed + clock.elapsed().as_secs_f64(),
    };
    write_json(&paths.summary(), &summary)?;
    Ok(summary)
}

/// Outcome of one optimizer iteration.
#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub cost: f64,
    pub lipschitz: f64,
    pub step_norm: f64,
    pub backtracks: u32,
    pub n_effective: f64,
}

fn train_step(
    config: &RunConfig,
    map: &LindbladMap,
    exact: Option<&Objective>,
    params: &NdoParameters,
    nagd: &NagdConfig,
    state: &mut OptimizerState,
    it: u64,
) -> Result<IterationRecord> {
    let at = match config.optimizer {
        OptimizerKind::NagdPlus => state.lookahead(nagd),
        _ => state.x.clone(),
    };
    let sampled;
    let objective = match exact {
        Some(o) => o,
        None => {
            let here = params.with_values(at.clone());
            let batch = sample_pairs(&here, &config.sampler(derive_seed(config.seed, SeedStream::Sampler, it)))?;
            sampled = Objective::from_batch(&here, map, &batch)?;
            &sampled
        }
    };
    match config.optimizer {
        OptimizerKind::NagdPlus => {
            let mut n_effective = f64::NAN;
            let d = nagd_plus_step(
                state,
                nagd,
                |x| objective.cost(x),
                |x| {
                    let e = objective.evaluate(x)?;
                    n_effective = e.n_effective;
                    Ok((e.cost, e.grad))
                },
            )?;
            if nagd.backtracking && !d.descent_satisfied {
                return Err(Error::BacktrackOverflow { lipschitz: d.lipschitz });
            }
            Ok(IterationRecord { cost: d.cost, lipschitz: d.lipschitz, step_norm: d.step_norm, backtracks: d.backtracks, n_effective })
        }
        kind => {
            let e = objective.evaluate(&at)?;
            let eta = config.learning_rate();
            let x_new = if kind == OptimizerKind::Sr {
                sr_step(&at, &e.grad, &objective.s_matrix(&at)?, eta, config.diag_shift)?
            } else {
                sgd_step(&at, &e.grad, eta)
            };
            if x_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteAmplitude);
            }
            let step_norm = x_new.iter().zip(&at).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            state.x_prev = std::mem::replace(&mut state.x, x_new);
            state.iteration = it;
            Ok(IterationRecord { cost: e.cost, lipschitz: 1.0 / eta, step_norm, backtracks: 0, n_effective: e.n_effective })
        }
    }
}

/// Which runs [`compare`] accepts together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompareMode {
    /// Identical physical instance, e.g. optimizer comparisons.
    SameInstance,
    /// Identical physics at possibly different chain lengths.
    LengthSweep,
    /// Anything goes.
    Mixed,
}

/// Reads `summary.json` from every directory and renders a CSV table, one
/// row per run.
pub fn compare(dirs: &[PathBuf], mode: CompareMode) -> Result<(Vec<RunSummary>, String)> {
    if dirs.is_empty() {
        return Err(Error::IncompatibleRuns("no run directories given".into()));
    }
    let summaries: Vec<RunSummary> = dirs.iter().map(|d| read_json(&RunPaths::new(d).summary())).collect::<Result<_>>()?;
    let first = &summaries[0].instance;
    for (dir, s) in dirs.iter().zip(&summaries).skip(1) {
        let ok = match mode {
            CompareMode::SameInstance => &s.instance == first,
            CompareMode::LengthSweep => s.instance.same_physics_except_length(first),
            CompareMode::Mixed => true,
        };
        if !ok {
            return Err(Error::IncompatibleRuns(format!("{} simulates {:?}, expected {:?}", dir.display(), s.instance, first)));
        }
    }
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    let mut table = String::from(
        "run,model,n_sites,optimizer,exact_sums,iterations,final_cost,fidelity,mean_current,mean_current_se,ed_mean_current,i12,ed_i12,wall_time\n",
    );
    for (dir, s) in dirs.iter().zip(&summaries) {
        let ed_mean = s.reference.as_ref().map(|r| r.mean_current);
        let ed_i12 = s.reference.as_ref().and_then(|r| r.bond_currents.first().copied());
        let _ = writeln!(
            table,
            "{},{:?},{},{},{},{},{},{},{},{},{},{},{},{}",
            dir.display(),
            s.instance.model,
            s.instance.n_sites,
            match s.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Sr => "sr",
                OptimizerKind::NagdPlus => "nagd+",
            },
            s.exact_sums,
            s.iterations,
            num(s.final_cost),
            opt(s.fidelity),
            num(s.mean_current),
            num(s.mean_current_se),
            opt(ed_mean),
            num(s.i12),
            opt(ed_i12),
            num(s.wall_time)
        );
    }
    Ok((summaries, table))
}

/// Oracle-only report: exact observables and, given a checkpoint, its
/// fidelity and network observables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub instance: Instance,
    pub reference: Reference,
    pub residual: f64,
    pub checkpoint_fidelity: Option<f64>,
    pub checkpoint_observables: Option<ChainObservables>,
}

pub fn exact_report(config: &RunConfig, checkpoint: Option<&Path>) -> Result<ExactReport> {
    config.validate()?;
    let map = build_lindblad_map(&config.chain()?, &config.drive()?)?;
    let rho0 = steady_state_ed(&map)?;
    let reference = Reference::from_state(&rho0)?;
    let residual = crate::exact::residual_norm(&map, &rho0);
    let (checkpoint_fidelity, checkpoint_observables) = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.params.n_sites() != config.n_sites {
                return Err(Error::Config(format!("checkpoint has {} sites, configuration {}", ck.params.n_sites(), config.n_sites)));
            }
            let f = network_fidelity(&ck.params, &rho0)?;
            let obs = chain_observables(&ck.params, &DiagonalBatch::enumerate(&ck.params)?)?;
            (Some(f), Some(obs))
        }
        None => (None, None),
    };
    Ok(ExactReport { instance: config.instance(), reference, residual, checkpoint_fidelity, checkpoint_observables })
}
