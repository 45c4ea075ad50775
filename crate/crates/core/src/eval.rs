//! Evaluation protocol: the Metropolis baseline, observable deltas against
//! ground truth, critical-temperature estimation and timing.

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::dataset::{format_significant, CoolingSchedule, ObservableAccumulator, ObservableRecord};
use crate::error::{Error, IoContext, Result};
use crate::lattice::SpinGrid;
use crate::montecarlo::Metropolis;

/// Autoregressive Metropolis cooling: the grid at `beta_j` is the previous
/// one after exactly `steps_per_temp` sweeps at `beta_j`. No equilibration test.
pub fn baseline_mc15<R: Rng + ?Sized>(
    x0: &SpinGrid,
    schedule: &CoolingSchedule,
    steps_per_temp: usize,
    rng: &mut R,
) -> Vec<SpinGrid> {
    let mut sampler = Metropolis::new();
    let mut grids = Vec::with_capacity(schedule.len());
    grids.push(x0.clone());
    for &beta in &schedule.betas()[1..] {
        let mut g = grids.last().expect("non-empty").clone();
        for _ in 0..steps_per_temp {
            sampler.sweep(&mut g, beta, rng);
        }
        grids.push(g);
    }
    grids
}

/// Per-temperature observables of predicted trajectories, one grid per
/// trajectory and schedule point.
pub fn trajectory_observables(trajectories: &[Vec<SpinGrid>], schedule: &CoolingSchedule) -> Result<Vec<ObservableRecord>> {
    if trajectories.is_empty() {
        return Err(Error::Config("no trajectories to evaluate".into()));
    }
    let mut acc = vec![ObservableAccumulator::default(); schedule.len()];
    for t in trajectories {
        if t.len() != schedule.len() {
            return Err(Error::ScheduleMismatch(format!(
                "trajectory has {} grids, schedule has {} points",
                t.len(),
                schedule.len()
            )));
        }
        for (a, g) in acc.iter_mut().zip(t) {
            a.push(g);
        }
    }
    acc.iter().zip(schedule.betas()).map(|(a, &b)| a.record(b)).collect()
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Signed deltas `predicted - ground truth` per schedule point, aggregated
/// over the schedule. Points where either side lacks a fluctuation
/// estimate are left out of the `Cv` and `chi` aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableDeltas {
    pub per_point_e: Vec<f64>,
    pub per_point_m: Vec<f64>,
    pub de: MeanStd,
    pub dm: MeanStd,
    pub dcv: MeanStd,
    pub dchi: MeanStd,
}

impl ObservableDeltas {
    /// Schedule average of `|ΔE|`.
    pub fn mean_abs_e(&self) -> f64 {
        mean_abs(&self.per_point_e)
    }

    /// Schedule average of `|Δm|`.
    pub fn mean_abs_m(&self) -> f64 {
        mean_abs(&self.per_point_m)
    }
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

pub fn compare_records(predicted: &[ObservableRecord], gt: &[ObservableRecord]) -> Result<ObservableDeltas> {
    if predicted.len() != gt.len() {
        return Err(Error::ScheduleMismatch(format!(
            "{} predicted points vs {} ground-truth points",
            predicted.len(),
            gt.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Config("no schedule points to compare".into()));
    }
    for (p, g) in predicted.iter().zip(gt) {
        if (p.temperature - g.temperature).abs() > 1e-9 * g.temperature.abs().max(1.0) {
            return Err(Error::ScheduleMismatch(format!(
                "temperature {} does not match {}",
                p.temperature, g.temperature
            )));
        }
    }
    let diff = |f: fn(&ObservableRecord) -> Option<f64>| -> Vec<f64> {
        predicted
            .iter()
            .zip(gt)
            .filter_map(|(p, g)| Some(f(p)? - f(g)?))
            .collect()
    };
    let per_point_e = diff(|r| Some(r.e));
    let per_point_m = diff(|r| Some(r.m));
    Ok(ObservableDeltas {
        de: MeanStd::of(&per_point_e),
        dm: MeanStd::of(&per_point_m),
        dcv: MeanStd::of(&diff(|r| r.cv)),
        dchi: MeanStd::of(&diff(|r| r.chi)),
        per_point_e,
        per_point_m,
    })
}

/// Deltas of predicted trajectories against ground-truth observables.
pub fn compare_observables(
    predicted: &[Vec<SpinGrid>],
    gt: &[ObservableRecord],
    schedule: &CoolingSchedule,
) -> Result<ObservableDeltas> {
    compare_records(&trajectory_observables(predicted, schedule)?, gt)
}

/// Susceptibility-peak estimate of the critical temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcEstimate {
    pub temperature: f64,
    pub uncertainty: f64,
    pub index: usize,
}

/// Temperature of the `chi` maximum with one local schedule spacing as
/// uncertainty. A maximum at either end of the sampled range (flat or
/// monotone `chi`) is reported as [`Error::NoPeak`].
pub fn estimate_tc(records: &[ObservableRecord]) -> Result<TcEstimate> {
    let chi: Vec<f64> = records.iter().filter_map(|r| r.chi).collect();
    if chi.len() != records.len() || chi.len() < 5 {
        return Err(Error::Config(format!(
            "need chi at >= 5 schedule points, have {}",
            chi.len()
        )));
    }
    if chi.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("non-finite susceptibility".into()));
    }
    let mut index = 0;
    for (i, &c) in chi.iter().enumerate() {
        if c > chi[index] {
            index = i;
        }
    }
    if index == 0 || index + 1 == chi.len() {
        return Err(Error::NoPeak(format!(
            "maximum at the end of the range (T = {})",
            records[index].temperature
        )));
    }
    let t = |i: usize| records[i].temperature;
    let uncertainty = (t(index - 1) - t(index)).abs().max((t(index) - t(index + 1)).abs());
    Ok(TcEstimate {
        temperature: t(index),
        uncertainty,
        index,
    })
}

/// Wall-clock seconds of `reps` calls of `run`, as mean ± std.
pub fn timing_harness<F: FnMut() -> Result<()>>(reps: usize, mut run: F) -> Result<MeanStd> {
    if reps < 3 {
        return Err(Error::Config("timing needs at least 3 repetitions".into()));
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(MeanStd::of(&times))
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub n: usize,
    pub deltas: ObservableDeltas,
    pub time: MeanStd,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const REPORT_HEADER: &str =
    "method,n,dE_mean,dE_std,dm_mean,dm_std,dcv_mean,dcv_std,dchi_mean,dchi_std,time_mean,time_std";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let f = |x: f64| format_significant(x, 8);
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let d = &r.deltas;
            let cells = [d.de, d.dm, d.dcv, d.dchi, r.time]
                .iter()
                .flat_map(|m| [f(m.mean), f(m.std)])
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&format!("{},{},{}\n", r.method, r.n, cells));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).at(path)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>4}  {:>19}  {:>19}  {:>19}  {:>19}  {:>19}",
            "method", "n", "dE", "dm", "dCv", "dchi", "time (s)"
        )?;
        for r in &self.rows {
            let d = &r.deltas;
            writeln!(
                f,
                "{:<8} {:>4}  {:>19}  {:>19}  {:>19}  {:>19}  {:>19}",
                r.method,
                r.n,
                d.de.to_string(),
                d.dm.to_string(),
                d.dcv.to_string(),
                d.dchi.to_string(),
                r.time.to_string()
            )?;
        }
        Ok(())
    }
}
