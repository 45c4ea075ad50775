//! Cooling schedules, trajectory datasets and thermodynamic observables.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! manifest.json                          written last; marks a complete dataset
//! observables.csv                        T,E,m,Cv,chi,n_samples
//! trajectories/traj_<i>/grid_<j>.bin     grid at schedule point j
//! trajectories/traj_<i>/cond_<j>/k_<k>.bin   k-th sample cooled from grid j to j+1
//! ```
//!
//! Grid files hold `n²` signed bytes, row-major, without a header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::lattice::{CouplingParams, SpinGrid};
use crate::montecarlo::{self, EquilibrationConfig, RngStream, Wolff};

pub const FORMAT_VERSION: u32 = 1;

/// Linearly spaced temperatures from hot to cold with their inverses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoolingSchedule {
    temperatures: Vec<f64>,
    #[serde(skip)]
    betas: Vec<f64>,
}

impl CoolingSchedule {
    /// `d + 1` evenly spaced temperatures from `t_max` down to `t_min`.
    pub fn new(t_max: f64, t_min: f64, d: usize) -> Result<Self> {
        if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs t_max > t_min > 0, got t_max = {t_max}, t_min = {t_min}"
            )));
        }
        if d == 0 {
            return Err(Error::Config("schedule needs at least one interval (d >= 1)".into()));
        }
        let temperatures = (0..=d)
            .map(|j| {
                if j == d {
                    t_min
                } else {
                    t_max + (t_min - t_max) * (j as f64) / (d as f64)
                }
            })
            .collect();
        Self::from_temperatures(temperatures)
    }

    /// Schedule from explicit, strictly decreasing temperatures.
    pub fn from_temperatures(temperatures: Vec<f64>) -> Result<Self> {
        if temperatures.is_empty() {
            return Err(Error::Config("schedule is empty".into()));
        }
        if temperatures.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config("temperatures must be positive and finite".into()));
        }
        if temperatures.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("temperatures must be strictly decreasing".into()));
        }
        let betas = temperatures.iter().map(|&t| 1.0 / t).collect();
        Ok(Self { temperatures, betas })
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Number of schedule points (`d + 1`).
    pub fn len(&self) -> usize {
        self.temperatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.temperatures.is_empty()
    }

    /// Number of transitions (`d`).
    pub fn intervals(&self) -> usize {
        self.len() - 1
    }

    pub fn t_max(&self) -> f64 {
        self.temperatures[0]
    }

    pub fn t_min(&self) -> f64 {
        *self.temperatures.last().unwrap()
    }

    /// Mean temperature spacing; zero for a single-point schedule.
    pub fn spacing(&self) -> f64 {
        if self.len() < 2 {
            0.0
        } else {
            (self.t_max() - self.t_min()) / self.intervals() as f64
        }
    }

    fn rebuild(mut self) -> Result<Self> {
        let t = std::mem::take(&mut self.temperatures);
        Self::from_temperatures(t)
    }
}

pub fn make_schedule(t_max: f64, t_min: f64, d: usize) -> Result<CoolingSchedule> {
    CoolingSchedule::new(t_max, t_min, d)
}

/// One annealing run plus, for each transition `j -> j+1`, the samples
/// obtained by cooling `grids[j]` to `beta[j+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grids: Vec<SpinGrid>,
    pub conditional: Vec<Vec<SpinGrid>>,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.grids[0].n()
    }
}

/// Per-temperature thermodynamic estimates, all per site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableRecord {
    pub temperature: f64,
    /// Mean energy.
    pub e: f64,
    /// Mean absolute magnetization.
    pub m: f64,
    /// Specific heat; absent with fewer than two samples.
    pub cv: Option<f64>,
    /// Susceptibility; absent with fewer than two samples.
    pub chi: Option<f64>,
    pub n_samples: usize,
}

/// Exact running sums of energy and absolute magnetization moments.
///
/// Integer accumulation makes the result independent of sample order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ObservableAccumulator {
    count: u64,
    sites: u64,
    energy: i128,
    energy_sq: i128,
    abs_m: i128,
    abs_m_sq: i128,
}

impl ObservableAccumulator {
    pub fn push(&mut self, g: &SpinGrid) {
        let sites = g.sites() as u64;
        debug_assert!(self.count == 0 || self.sites == sites);
        self.sites = sites;
        // J = 1, h = 0
        let h = -(g.bond_sum() as i128);
        let m = crate::lattice::magnetization(g).unsigned_abs() as i128;
        self.count += 1;
        self.energy += h;
        self.energy_sq += h * h;
        self.abs_m += m;
        self.abs_m_sq += m * m;
    }

    pub fn merge(&mut self, other: &Self) {
        if other.count == 0 {
            return;
        }
        self.sites = other.sites;
        self.count += other.count;
        self.energy += other.energy;
        self.energy_sq += other.energy_sq;
        self.abs_m += other.abs_m;
        self.abs_m_sq += other.abs_m_sq;
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }

    /// Population variance `(n Σx² − (Σx)²) / n²`, exact up to the final division.
    fn variance(count: u64, sum: i128, sum_sq: i128) -> f64 {
        let n = count as i128;
        ((n * sum_sq - sum * sum) as f64) / ((n * n) as f64)
    }

    pub fn record(&self, beta: f64) -> Result<ObservableRecord> {
        if self.count == 0 {
            return Err(Error::Config("no samples for observables".into()));
        }
        let n = self.count as f64;
        let sites = self.sites as f64;
        let (cv, chi) = if self.count >= 2 {
            let var_h = Self::variance(self.count, self.energy, self.energy_sq);
            let var_m = Self::variance(self.count, self.abs_m, self.abs_m_sq);
            (Some(beta * beta * var_h / sites), Some(beta * var_m / sites))
        } else {
            (None, None)
        };
        Ok(ObservableRecord {
            temperature: 1.0 / beta,
            e: self.energy as f64 / n / sites,
            m: self.abs_m as f64 / n / sites,
            cv,
            chi,
            n_samples: self.count as usize,
        })
    }
}

/// Observables over independent samples at inverse temperature `beta`:
/// `E = <H>/n²`, `m = <|M|>/n²`, `Cv = β² Var(H)/n²`, `χ = β Var(|M|)/n²`.
///
/// Fluctuations of the magnetization are taken about `<|M|>`; with the
/// sign-constrained sampler and samples pooled over independent runs,
/// `M` itself is bimodal below `T_c`.
pub fn compute_observables(samples: &[SpinGrid], beta: f64) -> Result<ObservableRecord> {
    if samples.is_empty() {
        return Err(Error::Config("no samples for observables".into()));
    }
    let n = samples[0].n();
    if samples.iter().any(|g| g.n() != n) {
        return Err(Error::InvalidGrid("samples have mixed lattice sizes".into()));
    }
    let mut acc = ObservableAccumulator::default();
    samples.iter().for_each(|g| acc.push(g));
    acc.record(beta)
}

/// Outcome of cooling copies of one grid.
#[derive(Debug, Clone)]
pub struct ConditionalSamples {
    pub grids: Vec<SpinGrid>,
    pub converged: Vec<bool>,
}

/// `k_count` independent sign-constrained Wolff equilibrations of copies of
/// `g` at `beta_next`; sample `k` draws from `rng.substream(k)`.
pub fn conditional_samples(
    g: &SpinGrid,
    beta_next: f64,
    k_count: usize,
    cfg: &EquilibrationConfig,
    rng: &RngStream,
) -> Result<ConditionalSamples> {
    if k_count == 0 {
        return Err(Error::Config("conditional sample count must be >= 1".into()));
    }
    let cp = CouplingParams::default();
    let mut wolff = Wolff::new();
    let mut grids = Vec::with_capacity(k_count);
    let mut converged = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut sample = g.clone();
        let mut stream = rng.substream(k as u64);
        let out = montecarlo::equilibrate_with(&mut wolff, &mut sample, beta_next, cfg, &cp, &mut stream)?;
        grids.push(sample);
        converged.push(out.converged);
    }
    Ok(ConditionalSamples { grids, converged })
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub n: usize,
    pub schedule: CoolingSchedule,
    pub n_traj: usize,
    pub k_count: usize,
    pub equilibration: EquilibrationConfig,
    pub seed: u64,
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("lattice size {} too small", self.n)));
        }
        if self.n_traj == 0 {
            return Err(Error::Config("n_traj must be >= 1".into()));
        }
        if self.k_count == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        self.equilibration.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibrationManifest {
    pub epsilon: f64,
    pub window: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n: usize,
    pub schedule: CoolingSchedule,
    #[serde(rename = "K")]
    pub k: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub equilibration: EquilibrationManifest,
    /// Equilibrations (trajectory points and conditional samples) that hit
    /// the step cap.
    pub non_converged: usize,
}

/// Summary returned by [`build_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub manifest: Manifest,
    pub observables: Vec<ObservableRecord>,
    pub equilibrations: usize,
}

impl BuildSummary {
    pub fn all_converged(&self) -> bool {
        self.manifest.non_converged == 0
    }
}

pub fn grid_path(dir: &Path, traj: usize, j: usize) -> PathBuf {
    dir.join("trajectories").join(format!("traj_{traj}")).join(format!("grid_{j}.bin"))
}

pub fn conditional_path(dir: &Path, traj: usize, j: usize, k: usize) -> PathBuf {
    dir.join("trajectories")
        .join(format!("traj_{traj}"))
        .join(format!("cond_{j}"))
        .join(format!("k_{k}.bin"))
}

pub(crate) fn write_grid(path: &Path, g: &SpinGrid) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, g.to_bytes()).at(path)
}

pub(crate) fn read_grid(path: &Path, n: usize) -> Result<SpinGrid> {
    let bytes = fs::read(path).at(path)?;
    SpinGrid::from_bytes(n, &bytes)
}

struct TrajectoryStats {
    per_temperature: Vec<ObservableAccumulator>,
    non_converged: usize,
    equilibrations: usize,
}

fn generate_one(params: &DatasetParams, dir: &Path, i: usize) -> Result<TrajectoryStats> {
    let cp = CouplingParams::default();
    let root = RngStream::new(params.seed, i as u64);
    let mut anneal_rng = root.substream(0);
    let run = montecarlo::anneal_trajectory(&params.schedule, params.n, &params.equilibration, &cp, &mut anneal_rng)?;
    let betas = params.schedule.betas();
    let mut per_temperature = vec![ObservableAccumulator::default(); betas.len()];
    let mut non_converged = run.outcomes.iter().filter(|o| !o.converged).count();
    let mut equilibrations = run.outcomes.len();
    for (j, g) in run.grids.iter().enumerate() {
        write_grid(&grid_path(dir, i, j), g)?;
        per_temperature[j].push(g);
    }
    for j in 0..params.schedule.intervals() {
        let stream = root.substream(1 + j as u64);
        let cond = conditional_samples(&run.grids[j], betas[j + 1], params.k_count, &params.equilibration, &stream)?;
        for (k, g) in cond.grids.iter().enumerate() {
            write_grid(&conditional_path(dir, i, j, k), g)?;
            per_temperature[j + 1].push(g);
        }
        non_converged += cond.converged.iter().filter(|c| !**c).count();
        equilibrations += cond.converged.len();
    }
    Ok(TrajectoryStats {
        per_temperature,
        non_converged,
        equilibrations,
    })
}

/// Generate `n_traj` annealing trajectories with conditional samples into
/// `dir`, then write `observables.csv` and finally `manifest.json`.
///
/// Trajectory `i` draws only from streams derived from `(seed, i)`, so the
/// output does not depend on the number of worker threads. Observables at
/// schedule point `j` pool the trajectory grids and the conditional samples
/// that end at `beta[j]`.
pub fn build_dataset(params: &DatasetParams, dir: &Path) -> Result<BuildSummary> {
    params.validate()?;
    fs::create_dir_all(dir).at(dir)?;
    let stats: Vec<TrajectoryStats> = (0..params.n_traj)
        .into_par_iter()
        .map(|i| generate_one(params, dir, i))
        .collect::<Result<_>>()?;

    let mut pooled = vec![ObservableAccumulator::default(); params.schedule.len()];
    let mut non_converged = 0;
    let mut equilibrations = 0;
    for s in &stats {
        for (acc, t) in pooled.iter_mut().zip(&s.per_temperature) {
            acc.merge(t);
        }
        non_converged += s.non_converged;
        equilibrations += s.equilibrations;
    }
    let observables = pooled
        .iter()
        .zip(params.schedule.betas())
        .map(|(acc, &b)| acc.record(b))
        .collect::<Result<Vec<_>>>()?;
    write_observables_csv(&dir.join("observables.csv"), &observables)?;

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        n: params.n,
        schedule: params.schedule.clone(),
        k: params.k_count,
        n_traj: params.n_traj,
        seed: params.seed,
        equilibration: EquilibrationManifest {
            epsilon: params.equilibration.epsilon,
            window: params.equilibration.window,
            max_steps: params.equilibration.max_steps,
        },
        non_converged,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").at(&path)?;
    Ok(BuildSummary {
        manifest,
        observables,
        equilibrations,
    })
}

/// Format with `digits` significant digits, fixed-point for moderate
/// magnitudes and scientific otherwise.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{:.*e}", digits - 1, x)
    }
}

pub fn write_observables_csv(path: &Path, records: &[ObservableRecord]) -> Result<()> {
    let mut out = String::from("T,E,m,Cv,chi,n_samples\n");
    let opt = |v: Option<f64>| v.map(|x| format_significant(x, 10)).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            format_significant(r.temperature, 10),
            format_significant(r.e, 10),
            format_significant(r.m, 10),
            opt(r.cv),
            opt(r.chi),
            r.n_samples
        ));
    }
    let mut f = fs::File::create(path).at(path)?;
    f.write_all(out.as_bytes()).at(path)
}

pub fn read_observables_csv(path: &Path) -> Result<Vec<ObservableRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    let bad = |line: &str| Error::Config(format!("malformed observables line `{line}` in {}", path.display()));
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        out.push(ObservableRecord {
            temperature: num(f[0])?,
            e: num(f[1])?,
            m: num(f[2])?,
            cv: opt(f[3])?,
            chi: opt(f[4])?,
            n_samples: f[5].parse().map_err(|_| bad(line))?,
        });
    }
    Ok(out)
}

/// A persisted dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).at(&path)?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported dataset format version {}",
                manifest.format_version
            )));
        }
        manifest.schedule = manifest.schedule.rebuild()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn n(&self) -> usize {
        self.manifest.n
    }

    pub fn schedule(&self) -> &CoolingSchedule {
        &self.manifest.schedule
    }

    pub fn load_trajectory(&self, i: usize) -> Result<Trajectory> {
        let n = self.n();
        let len = self.schedule().len();
        let grids = (0..len)
            .map(|j| read_grid(&grid_path(&self.dir, i, j), n))
            .collect::<Result<Vec<_>>>()?;
        let conditional = (0..len - 1)
            .map(|j| {
                (0..self.manifest.k)
                    .map(|k| read_grid(&conditional_path(&self.dir, i, j, k), n))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory { grids, conditional })
    }

    pub fn load_all(&self) -> Result<Vec<Trajectory>> {
        (0..self.manifest.n_traj).map(|i| self.load_trajectory(i)).collect()
    }

    pub fn observables(&self) -> Result<Vec<ObservableRecord>> {
        read_observables_csv(&self.dir.join("observables.csv"))
    }

    /// SHA-256 of the manifest bytes, identifying the dataset.
    pub fn fingerprint(&self) -> Result<String> {
        let path = self.dir.join("manifest.json");
        let bytes = fs::read(&path).at(&path)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Pooled per-temperature observables of trajectories (trajectory grids
/// plus conditional samples that end at each schedule point).
pub fn pooled_observables(trajectories: &[Trajectory], schedule: &CoolingSchedule) -> Result<Vec<ObservableRecord>> {
    let mut pooled = vec![ObservableAccumulator::default(); schedule.len()];
    for t in trajectories {
        if t.grids.len() != schedule.len() {
            return Err(Error::ScheduleMismatch(format!(
                "trajectory has {} grids, schedule has {} points",
                t.grids.len(),
                schedule.len()
            )));
        }
        for (j, g) in t.grids.iter().enumerate() {
            pooled[j].push(g);
        }
        for (j, cond) in t.conditional.iter().enumerate() {
            cond.iter().for_each(|g| pooled[j + 1].push(g));
        }
    }
    pooled
        .iter()
        .zip(schedule.betas())
        .map(|(acc, &b)| acc.record(b))
        .collect()
}
