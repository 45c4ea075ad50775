//! Metropolis and Wolff samplers, equilibration against the exact energy,
//! and annealing along a cooling schedule.
//!
//! All samplers work in reduced units: `beta` is the dimensionless product
//! `J / (k_B T)` with `h = 0`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::CoolingSchedule;
use crate::error::{Error, Result};
use crate::lattice::{neighbors_unchecked, CouplingParams, SpinGrid};
use crate::onsager;

/// Reproducible random stream: a ChaCha8 generator keyed by `(seed, stream)`.
///
/// Substreams derived with [`RngStream::substream`] are independent of the
/// parent and of each other, so parallel workers never share a sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream identified by `tag`; does not advance `self`.
    pub fn substream(&self, tag: u64) -> Self {
        Self::new(self.seed, splitmix64(splitmix64(self.stream) ^ tag.wrapping_add(0x9e37_79b9)))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Stopping rule for [`equilibrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibrationConfig {
    /// Relative tolerance on the per-site energy.
    pub epsilon: f64,
    /// Number of most recent samples averaged into the energy estimate.
    pub window: usize,
    /// Maximum number of Wolff steps.
    pub max_steps: usize,
}

impl Default for EquilibrationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            window: 16,
            max_steps: 50_000,
        }
    }
}

impl EquilibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.max_steps < self.window {
            return Err(Error::Config(format!(
                "max_steps {} smaller than window {}",
                self.max_steps, self.window
            )));
        }
        Ok(())
    }
}

/// Metropolis sampler with a reusable visiting-order buffer.
#[derive(Debug, Default, Clone)]
pub struct Metropolis {
    order: Vec<usize>,
}

impl Metropolis {
    pub fn new() -> Self {
        Self::default()
    }

    /// One sweep: every site is proposed once, in a fresh random order.
    /// Returns the number of accepted flips.
    pub fn sweep<R: Rng + ?Sized>(&mut self, g: &mut SpinGrid, beta: f64, rng: &mut R) -> usize {
        let n = g.n();
        let sites = g.sites();
        if self.order.len() != sites {
            self.order = (0..sites).collect();
        }
        self.order.shuffle(rng);
        // Only dE = 4 and dE = 8 (in units of J) need a random draw.
        let accept = [(-4.0 * beta).exp(), (-8.0 * beta).exp()];
        let spins = g.spins_mut();
        let mut flips = 0;
        for &i in &self.order {
            let nb = neighbors_unchecked(i, n);
            let local: i32 = nb.iter().map(|&j| spins[j] as i32).sum();
            let de = 2 * spins[i] as i32 * local;
            let ok = de <= 0 || rng.gen::<f64>() < accept[(de / 4 - 1) as usize];
            if ok {
                spins[i] = -spins[i];
                flips += 1;
            }
        }
        flips
    }
}

/// Outcome of a single Wolff move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterMove {
    /// Number of sites in the grown cluster.
    pub size: usize,
    /// Whether the cluster was flipped.
    pub accepted: bool,
    /// Change of the bond sum `sum x_i x_j` caused by the move.
    pub bond_delta: i64,
    /// Change of the total magnetization caused by the move.
    pub magnetization_delta: i64,
}

/// Wolff cluster sampler with reusable scratch space.
#[derive(Debug, Default, Clone)]
pub struct Wolff {
    stack: Vec<usize>,
    cluster: Vec<usize>,
    mark: Vec<u32>,
    epoch: u32,
}

impl Wolff {
    pub fn new() -> Self {
        Self::default()
    }

    fn reset(&mut self, sites: usize) {
        if self.mark.len() != sites {
            self.mark = vec![0; sites];
            self.epoch = 0;
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.epoch = 1;
        }
        self.stack.clear();
        self.cluster.clear();
    }

    /// Grow a cluster from a uniformly random seed; does not flip it.
    /// Returns the spin value shared by every cluster site.
    fn grow<R: Rng + ?Sized>(&mut self, g: &SpinGrid, beta: f64, rng: &mut R) -> i8 {
        let n = g.n();
        self.reset(g.sites());
        let p_add = -(-2.0 * beta).exp_m1();
        let spins = g.spins();
        let seed = rng.gen_range(0..g.sites());
        let s = spins[seed];
        self.mark[seed] = self.epoch;
        self.stack.push(seed);
        self.cluster.push(seed);
        while let Some(j) = self.stack.pop() {
            for k in neighbors_unchecked(j, n) {
                if spins[k] == s && self.mark[k] != self.epoch && rng.gen::<f64>() < p_add {
                    self.mark[k] = self.epoch;
                    self.stack.push(k);
                    self.cluster.push(k);
                }
            }
        }
        s
    }

    /// Bond-sum change from flipping the current cluster.
    fn boundary_delta(&self, g: &SpinGrid, s: i8) -> i64 {
        let n = g.n();
        let spins = g.spins();
        let mut delta = 0i64;
        for &i in &self.cluster {
            for k in neighbors_unchecked(i, n) {
                if self.mark[k] != self.epoch {
                    // bond x_i x_k flips sign
                    delta -= 2 * (s as i64) * (spins[k] as i64);
                }
            }
        }
        delta
    }

    fn flip_cluster(&self, g: &mut SpinGrid) {
        let spins = g.spins_mut();
        for &i in &self.cluster {
            spins[i] = -spins[i];
        }
    }

    /// Unconstrained Wolff move.
    pub fn step<R: Rng + ?Sized>(&mut self, g: &mut SpinGrid, beta: f64, rng: &mut R) -> ClusterMove {
        let s = self.grow(g, beta, rng);
        let bond_delta = self.boundary_delta(g, s);
        self.flip_cluster(g);
        ClusterMove {
            size: self.cluster.len(),
            accepted: true,
            bond_delta,
            magnetization_delta: -2 * s as i64 * self.cluster.len() as i64,
        }
    }

    /// Wolff move that is rejected when it would invert the sign of a
    /// nonzero total magnetization. `magnetization` must be the current `M`.
    pub fn step_sign_constrained<R: Rng + ?Sized>(
        &mut self,
        g: &mut SpinGrid,
        magnetization: i64,
        beta: f64,
        rng: &mut R,
    ) -> ClusterMove {
        let s = self.grow(g, beta, rng);
        let size = self.cluster.len();
        let dm = -2 * s as i64 * size as i64;
        let after = magnetization + dm;
        if magnetization != 0 && after != 0 && (after > 0) != (magnetization > 0) {
            return ClusterMove {
                size,
                accepted: false,
                bond_delta: 0,
                magnetization_delta: 0,
            };
        }
        let bond_delta = self.boundary_delta(g, s);
        self.flip_cluster(g);
        ClusterMove {
            size,
            accepted: true,
            bond_delta,
            magnetization_delta: dm,
        }
    }
}

pub fn metropolis_sweep<R: Rng + ?Sized>(g: &mut SpinGrid, beta: f64, rng: &mut R) -> Result<()> {
    check_beta(beta)?;
    Metropolis::new().sweep(g, beta, rng);
    Ok(())
}

pub fn wolff_step<R: Rng + ?Sized>(g: &mut SpinGrid, beta: f64, rng: &mut R) -> Result<ClusterMove> {
    check_beta(beta)?;
    Ok(Wolff::new().step(g, beta, rng))
}

pub fn wolff_step_sign_constrained<R: Rng + ?Sized>(
    g: &mut SpinGrid,
    beta: f64,
    rng: &mut R,
) -> Result<ClusterMove> {
    check_beta(beta)?;
    let m = crate::lattice::magnetization(g);
    Ok(Wolff::new().step_sign_constrained(g, m, beta, rng))
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("inverse temperature must be >= 0, got {beta}")));
    }
    Ok(())
}

/// Result of an equilibration run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibration {
    pub converged: bool,
    /// Wolff steps performed.
    pub steps: usize,
    /// Trailing-window mean energy per site at exit.
    pub energy_per_site: f64,
    /// Exact per-site energy at this temperature.
    pub exact_energy: f64,
}

impl Equilibration {
    pub fn relative_error(&self) -> f64 {
        ((self.energy_per_site - self.exact_energy) / self.exact_energy).abs()
    }
}

/// Run sign-constrained Wolff moves until the trailing-window mean energy
/// per site is within `cfg.epsilon` (relative) of the exact value, or until
/// `cfg.max_steps` moves have been made. The starting state counts as the
/// first sample of the window.
pub fn equilibrate<R: Rng + ?Sized>(
    g: &mut SpinGrid,
    beta: f64,
    cfg: &EquilibrationConfig,
    cp: &CouplingParams<f64>,
    rng: &mut R,
) -> Result<Equilibration> {
    let mut wolff = Wolff::new();
    equilibrate_with(&mut wolff, g, beta, cfg, cp, rng)
}

pub(crate) fn equilibrate_with<R: Rng + ?Sized>(
    wolff: &mut Wolff,
    g: &mut SpinGrid,
    beta: f64,
    cfg: &EquilibrationConfig,
    cp: &CouplingParams<f64>,
    rng: &mut R,
) -> Result<Equilibration> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("inverse temperature must be > 0, got {beta}")));
    }
    if cp.j != 1.0 || cp.h != 0.0 {
        return Err(Error::Domain("equilibration supports only J = 1, h = 0".into()));
    }
    cfg.validate()?;
    let exact = onsager::internal_energy_exact(beta, 1.0)?;
    let sites = g.sites() as f64;
    let mut bonds = g.bond_sum();
    let mut m = crate::lattice::magnetization(g);

    let mut ring = vec![0i64; cfg.window];
    let mut ring_sum = 0i64;
    let mut filled = 0usize;
    let mut steps = 0usize;
    loop {
        let slot = (steps) % cfg.window;
        if filled == cfg.window {
            ring_sum -= ring[slot];
        } else {
            filled += 1;
        }
        ring[slot] = bonds;
        ring_sum += bonds;
        if filled == cfg.window {
            let e = -(ring_sum as f64) / (cfg.window as f64 * sites);
            let converged = ((e - exact) / exact).abs() < cfg.epsilon;
            if converged || steps >= cfg.max_steps {
                return Ok(Equilibration {
                    converged,
                    steps,
                    energy_per_site: e,
                    exact_energy: exact,
                });
            }
        }
        let mv = wolff.step_sign_constrained(g, m, beta, rng);
        bonds += mv.bond_delta;
        m += mv.magnetization_delta;
        steps += 1;
    }
}

/// Grids recorded along one annealing run.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnealRun {
    pub grids: Vec<SpinGrid>,
    pub outcomes: Vec<Equilibration>,
}

impl AnnealRun {
    pub fn all_converged(&self) -> bool {
        self.outcomes.iter().all(|o| o.converged)
    }
}

/// Start from independent uniform spins and equilibrate at each schedule
/// point in turn, carrying the grid forward.
pub fn anneal_trajectory<R: Rng + ?Sized>(
    schedule: &CoolingSchedule,
    n: usize,
    cfg: &EquilibrationConfig,
    cp: &CouplingParams<f64>,
    rng: &mut R,
) -> Result<AnnealRun> {
    let mut g = SpinGrid::random(n, rng);
    let mut wolff = Wolff::new();
    let mut grids = Vec::with_capacity(schedule.len());
    let mut outcomes = Vec::with_capacity(schedule.len());
    for &beta in schedule.betas() {
        outcomes.push(equilibrate_with(&mut wolff, &mut g, beta, cfg, cp, rng)?);
        grids.push(g.clone());
    }
    Ok(AnnealRun { grids, outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{hamiltonian, magnetization};

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map({ let mut r = RngStream::new(7, 3); move |_| r.next_u64() }).collect();
        let b: Vec<u64> = (0..4).map({ let mut r = RngStream::new(7, 3); move |_| r.next_u64() }).collect();
        let c: Vec<u64> = (0..4).map({ let mut r = RngStream::new(7, 4); move |_| r.next_u64() }).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let p = RngStream::new(7, 3);
        assert_eq!(p.substream(1).stream(), p.substream(1).stream());
        assert_ne!(p.substream(1).stream(), p.substream(2).stream());
    }

    #[test]
    fn cold_metropolis_keeps_ground_state() {
        let mut g = SpinGrid::all_up(8);
        let mut rng = RngStream::new(1, 0);
        metropolis_sweep(&mut g, 1e6, &mut rng).unwrap();
        assert_eq!(g, SpinGrid::all_up(8));
    }

    #[test]
    fn infinite_temperature_metropolis_flips_every_site_once() {
        let mut rng = RngStream::new(2, 0);
        let start = SpinGrid::random(6, &mut rng);
        let mut g = start.clone();
        let flips = Metropolis::new().sweep(&mut g, 0.0, &mut rng);
        assert_eq!(flips, 36);
        let inverted: Vec<i8> = start.spins().iter().map(|&s| -s).collect();
        assert_eq!(g.spins(), inverted.as_slice());
    }

    #[test]
    fn wolff_limits() {
        let mut rng = RngStream::new(3, 0);
        let mut g = SpinGrid::random(6, &mut rng);
        for _ in 0..50 {
            let mv = wolff_step(&mut g, 0.0, &mut rng).unwrap();
            assert_eq!(mv.size, 1);
        }
        let mut up = SpinGrid::all_up(6);
        let mv = wolff_step(&mut up, 1e6, &mut rng).unwrap();
        assert_eq!(mv.size, 36);
        assert_eq!(up, SpinGrid::all_down(6));
    }

    #[test]
    fn move_bookkeeping_matches_recompute() {
        let mut rng = RngStream::new(4, 0);
        let mut g = SpinGrid::random(8, &mut rng);
        let c = CouplingParams::<f64>::default();
        let mut wolff = Wolff::new();
        for _ in 0..200 {
            let before = (g.bond_sum(), magnetization(&g));
            let mv = wolff.step(&mut g, 0.4, &mut rng);
            assert_eq!(g.bond_sum() - before.0, mv.bond_delta);
            assert_eq!(magnetization(&g) - before.1, mv.magnetization_delta);
        }
        assert!(hamiltonian(&g, &c).is_finite());
    }

    #[test]
    fn flipped_clusters_share_one_sign() {
        let mut rng = RngStream::new(5, 0);
        let mut g = SpinGrid::random(10, &mut rng);
        let mut wolff = Wolff::new();
        for _ in 0..200 {
            let before = g.clone();
            wolff.step(&mut g, 0.44, &mut rng);
            let changed: Vec<i8> = (0..g.sites())
                .filter(|&i| before.spin(i) != g.spin(i))
                .map(|i| before.spin(i))
                .collect();
            assert!(changed.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn sign_constraint_rejects_full_inversion() {
        let mut rng = RngStream::new(6, 0);
        let mut up = SpinGrid::all_up(6);
        let mv = wolff_step_sign_constrained(&mut up, 1e6, &mut rng).unwrap();
        assert!(!mv.accepted);
        assert_eq!(up, SpinGrid::all_up(6));
    }

    #[test]
    fn sign_constraint_accepts_from_zero_magnetization() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..20 {
            // columns of alternating sign: M = 0
            let spins = (0..36).map(|i| if (i % 6) < 3 { 1 } else { -1 }).collect();
            let mut g = SpinGrid::from_spins(6, spins).unwrap();
            let mv = wolff_step_sign_constrained(&mut g, 1e6, &mut rng).unwrap();
            assert!(mv.accepted);
        }
    }

    #[test]
    fn sign_never_inverts_in_long_run() {
        let mut rng = RngStream::new(8, 0);
        let mut g = SpinGrid::all_up(16);
        let mut m = magnetization(&g);
        let mut wolff = Wolff::new();
        for _ in 0..100_000 {
            let mv = wolff.step_sign_constrained(&mut g, m, 0.6, &mut rng);
            m += mv.magnetization_delta;
            assert!(m >= 0, "magnetization became negative");
        }
        assert_eq!(m, magnetization(&g));
    }

    #[test]
    fn cold_start_converges_immediately() {
        let mut g = SpinGrid::all_up(16);
        let mut rng = RngStream::new(9, 0);
        let cfg = EquilibrationConfig { window: 1, ..Default::default() };
        let out = equilibrate(&mut g, 1.0, &cfg, &CouplingParams::default(), &mut rng).unwrap();
        assert!(out.converged);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn tight_tolerance_hits_step_cap() {
        let mut rng = RngStream::new(10, 0);
        let mut g = SpinGrid::random(16, &mut rng);
        let cfg = EquilibrationConfig { epsilon: 1e-9, window: 4, max_steps: 10 };
        let out = equilibrate(&mut g, 0.3, &cfg, &CouplingParams::default(), &mut rng).unwrap();
        assert!(!out.converged);
        assert_eq!(out.steps, 10);
    }

    #[test]
    fn equilibrate_validates_inputs() {
        let mut g = SpinGrid::all_up(4);
        let mut rng = RngStream::new(0, 0);
        let cp = CouplingParams::default();
        assert!(equilibrate(&mut g, 0.0, &EquilibrationConfig::default(), &cp, &mut rng).is_err());
        let bad = EquilibrationConfig { window: 0, ..Default::default() };
        assert!(equilibrate(&mut g, 0.5, &bad, &cp, &mut rng).is_err());
        let bad = EquilibrationConfig { max_steps: 2, window: 3, ..Default::default() };
        assert!(equilibrate(&mut g, 0.5, &bad, &cp, &mut rng).is_err());
    }

    #[test]
    fn equilibrated_energy_matches_exact_at_t3() {
        let mut rng = RngStream::new(11, 0);
        let mut g = SpinGrid::random(32, &mut rng);
        let cfg = EquilibrationConfig { max_steps: 20_000, ..Default::default() };
        let out = equilibrate(&mut g, 1.0 / 3.0, &cfg, &CouplingParams::default(), &mut rng).unwrap();
        assert!(out.converged);
        let e = hamiltonian(&g, &CouplingParams::<f64>::default()) / 1024.0;
        assert!(((e - out.exact_energy) / out.exact_energy).abs() < 0.05 + 0.05);
        assert!(out.relative_error() < 0.05);
    }

    #[test]
    fn single_step_schedule_gives_two_grids_and_is_deterministic() {
        let schedule = CoolingSchedule::new(5.0, 1.0, 1).unwrap();
        let cfg = EquilibrationConfig::default();
        let cp = CouplingParams::default();
        let a = anneal_trajectory(&schedule, 8, &cfg, &cp, &mut RngStream::new(12, 0)).unwrap();
        let b = anneal_trajectory(&schedule, 8, &cfg, &cp, &mut RngStream::new(12, 0)).unwrap();
        assert_eq!(a.grids.len(), 2);
        assert_eq!(a, b);
    }
}
