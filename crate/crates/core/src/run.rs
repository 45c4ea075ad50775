//! Resolved run configuration and the command implementations behind the
//! binary's subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    self, build_dataset, format_significant, CoolingSchedule, Dataset, DatasetParams, ObservableRecord,
};
use crate::error::{Error, IoContext, Result};
use crate::eval::{self, EvalReport, EvalRow, MeanStd};
use crate::flow::{self, Decoder, FlowHyper, ModelBundle, Stage, TrainLog};
use crate::lattice::{CouplingParams, SpinGrid};
use crate::montecarlo::{self, EquilibrationConfig, RngStream};
use crate::onsager::{self, AnisotropicCouplings};

/// Every key accepted in a config file, in output order.
pub const KEYS: &[&str] = &[
    "n",
    "t_max",
    "t_min",
    "d",
    "k",
    "n_traj",
    "seed",
    "epsilon",
    "window",
    "max_steps",
    "latent",
    "sigma",
    "lambda",
    "lr",
    "epochs",
    "encoder_epochs",
    "field_epochs",
    "projector_epochs",
    "batch_size",
    "encoder_hidden",
    "field_hidden",
    "projector_hidden",
    "data",
    "models",
    "out",
    "predicted",
    "decoder",
    "stage",
    "p",
    "points",
    "temps",
    "reps",
    "threads",
    "force",
];

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderChoice {
    Ptheta,
    Mh10,
    Mh15,
    Mc15,
}

impl DecoderChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ptheta" => Ok(Self::Ptheta),
            "mh10" => Ok(Self::Mh10),
            "mh15" => Ok(Self::Mh15),
            "mc15" => Ok(Self::Mc15),
            other => Err(Error::Config(format!(
                "unknown decoder `{other}` (expected ptheta, mh10, mh15 or mc15)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ptheta => "ptheta",
            Self::Mh10 => "mh10",
            Self::Mh15 => "mh15",
            Self::Mc15 => "mc15",
        }
    }

    /// Pipeline decoder, or `None` for the model-free baseline.
    pub fn decoder(self) -> Option<Decoder> {
        match self {
            Self::Ptheta => Some(Decoder::Learned),
            Self::Mh10 => Some(Decoder::Refine(10)),
            Self::Mh15 => Some(Decoder::Refine(15)),
            Self::Mc15 => None,
        }
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub t_max: f64,
    pub t_min: f64,
    pub d: usize,
    pub k: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub equilibration: EquilibrationConfig,
    pub hyper: FlowHyper,
    pub data: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub predicted: Vec<PathBuf>,
    pub decoder: Option<String>,
    pub stage: Option<String>,
    pub p: usize,
    pub points: usize,
    pub temps: Vec<f64>,
    pub reps: usize,
    pub threads: Option<usize>,
    pub force: bool,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Resolve from a key map, filling defaults. Unknown keys are rejected.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        fn or<T: std::str::FromStr>(map: &BTreeMap<String, String>, k: &str, default: T) -> Result<T> {
            map.get(k).map(|v| parse_value(k, v)).unwrap_or(Ok(default))
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let get_ref = map;
        let n = or(get_ref, "n", 32usize)?;
        let defaults = FlowHyper::for_lattice(n);
        let epochs: Option<usize> = get("epochs").map(|v| parse_value("epochs", v)).transpose()?;
        let stage_epochs = |k: &str, default: usize| or(get_ref, k, epochs.unwrap_or(default));
        let hidden = |k: &str, default: &[usize]| -> Result<Vec<usize>> {
            get(k).map(|v| parse_list(k, v)).unwrap_or_else(|| Ok(default.to_vec()))
        };
        let path = |k: &str| get(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        let latent = or(get_ref, "latent", 0usize)?;
        let hyper = FlowHyper {
            latent_dim: if latent == 0 { defaults.latent_dim } else { latent },
            sigma: or(get_ref, "sigma", defaults.sigma)?,
            lambda: or(get_ref, "lambda", defaults.lambda)?,
            lr: or(get_ref, "lr", defaults.lr)?,
            encoder_epochs: stage_epochs("encoder_epochs", defaults.encoder_epochs)?,
            field_epochs: stage_epochs("field_epochs", defaults.field_epochs)?,
            projector_epochs: stage_epochs("projector_epochs", defaults.projector_epochs)?,
            batch_size: or(get_ref, "batch_size", defaults.batch_size)?,
            encoder_hidden: hidden("encoder_hidden", &defaults.encoder_hidden)?,
            field_hidden: hidden("field_hidden", &defaults.field_hidden)?,
            projector_hidden: hidden("projector_hidden", &defaults.projector_hidden)?,
            seed: or(get_ref, "seed", 0u64)?,
        };
        let eq = EquilibrationConfig::default();
        let cfg = RunConfig {
            n,
            t_max: or(get_ref, "t_max", 5.0)?,
            t_min: or(get_ref, "t_min", 1.0)?,
            d: or(get_ref, "d", 20usize)?,
            k: or(get_ref, "k", 40usize)?,
            n_traj: or(get_ref, "n_traj", 8usize)?,
            seed: hyper.seed,
            equilibration: EquilibrationConfig {
                epsilon: or(get_ref, "epsilon", eq.epsilon)?,
                window: or(get_ref, "window", eq.window)?,
                max_steps: or(get_ref, "max_steps", eq.max_steps)?,
            },
            hyper,
            data: path("data"),
            models: path("models"),
            out: path("out"),
            predicted: get("predicted")
                .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect())
                .unwrap_or_default(),
            decoder: get("decoder").map(String::from),
            stage: get("stage").map(String::from),
            p: or(get_ref, "p", 64usize)?,
            points: or(get_ref, "points", 41usize)?,
            temps: get("temps").map(|v| parse_list("temps", v)).transpose()?.unwrap_or_default(),
            reps: or(get_ref, "reps", 3usize)?,
            threads: get("threads").map(|v| parse_value("threads", v)).transpose()?,
            force: or(get_ref, "force", false)?,
        };
        cfg.hyper.validate()?;
        cfg.equilibration.validate()?;
        Ok(cfg)
    }

    /// Config file text followed by flag overrides.
    pub fn resolve(file_text: Option<&str>, flags: &BTreeMap<String, String>) -> Result<Self> {
        let mut map = match file_text {
            Some(t) => parse_config(t)?,
            None => BTreeMap::new(),
        };
        map.extend(flags.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self::from_map(&map)
    }

    /// Every setting as `key=value` lines; parsing them back gives an equal config.
    pub fn to_config_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let h = &self.hyper;
        let mut entries: Vec<(&str, String)> = vec![
            ("n", self.n.to_string()),
            ("t_max", self.t_max.to_string()),
            ("t_min", self.t_min.to_string()),
            ("d", self.d.to_string()),
            ("k", self.k.to_string()),
            ("n_traj", self.n_traj.to_string()),
            ("seed", self.seed.to_string()),
            ("epsilon", self.equilibration.epsilon.to_string()),
            ("window", self.equilibration.window.to_string()),
            ("max_steps", self.equilibration.max_steps.to_string()),
            ("latent", h.latent_dim.to_string()),
            ("sigma", h.sigma.to_string()),
            ("lambda", h.lambda.to_string()),
            ("lr", h.lr.to_string()),
            ("encoder_epochs", h.encoder_epochs.to_string()),
            ("field_epochs", h.field_epochs.to_string()),
            ("projector_epochs", h.projector_epochs.to_string()),
            ("batch_size", h.batch_size.to_string()),
            ("encoder_hidden", join(&h.encoder_hidden)),
            ("field_hidden", join(&h.field_hidden)),
            ("projector_hidden", join(&h.projector_hidden)),
            ("data", path(&self.data)),
            ("models", path(&self.models)),
            ("out", path(&self.out)),
            (
                "predicted",
                self.predicted.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            ("decoder", self.decoder.clone().unwrap_or_default()),
            ("stage", self.stage.clone().unwrap_or_default()),
            ("p", self.p.to_string()),
            ("points", self.points.to_string()),
            ("temps", join(&self.temps)),
            ("reps", self.reps.to_string()),
            ("force", self.force.to_string()),
        ];
        if let Some(t) = self.threads {
            entries.push(("threads", t.to_string()));
        }
        let mut out = String::new();
        for (k, v) in entries {
            if v.is_empty() {
                continue;
            }
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn schedule(&self) -> Result<CoolingSchedule> {
        dataset::make_schedule(self.t_max, self.t_min, self.d)
    }

    fn require(&self, p: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        p.clone().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
    }

    pub fn out_path(&self) -> Result<PathBuf> {
        self.require(&self.out, "out")
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        self.require(&self.data, "data")
    }

    pub fn models_path(&self) -> Result<PathBuf> {
        self.require(&self.models, "models")
    }
}

/// Refuse to touch an existing non-empty target unless forced; with force,
/// remove it so the new output is not mixed with old files.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).at(dir)?.next().is_some();
        if occupied {
            if !force {
                return Err(Error::Exists { path: dir.to_path_buf() });
            }
            fs::remove_dir_all(dir).at(dir)?;
        }
    }
    fs::create_dir_all(dir).at(dir)
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists { path: path.to_path_buf() });
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    Ok(())
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("config.resolved");
    fs::write(&path, cfg.to_config_text()).at(&path)
}

/// Build a ground-truth dataset into `--out`.
pub fn cmd_gen_data(cfg: &RunConfig, log: &mut dyn Write) -> Result<bool> {
    let out = cfg.out_path()?;
    prepare_dir(&out, cfg.force)?;
    let params = DatasetParams {
        n: cfg.n,
        schedule: cfg.schedule()?,
        n_traj: cfg.n_traj,
        k_count: cfg.k,
        equilibration: cfg.equilibration.clone(),
        seed: cfg.seed,
    };
    let summary = build_dataset(&params, &out)?;
    write_resolved(&out, cfg)?;
    let _ = writeln!(
        log,
        "generated {} trajectories of {}x{} over {} temperatures; {}/{} equilibrations converged",
        cfg.n_traj,
        cfg.n,
        cfg.n,
        params.schedule.len(),
        summary.equilibrations - summary.manifest.non_converged,
        summary.equilibrations
    );
    Ok(summary.all_converged())
}

/// Train one stage into `--models` from the dataset at `--data`.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn Write) -> Result<()> {
    let stage = Stage::parse(cfg.stage.as_deref().ok_or_else(|| Error::Usage("--stage is required".into()))?)?;
    let models = cfg.models.clone().or_else(|| cfg.out.clone()).ok_or_else(|| Error::Usage("--models is required".into()))?;
    let ds = Dataset::open(&cfg.data_path()?)?;
    let fingerprint = ds.fingerprint()?;
    let sidecar = ModelBundle::sidecar_path(&models, stage);
    if sidecar.exists() && !cfg.force {
        return Err(Error::Exists { path: sidecar });
    }
    let n = ds.n();
    let mut hyper = cfg.hyper.clone();
    if cfg.n != n {
        // latent size follows the dataset's lattice unless set explicitly
        if hyper.latent_dim == FlowHyper::for_lattice(cfg.n).latent_dim {
            hyper.latent_dim = FlowHyper::for_lattice(n).latent_dim;
        }
    }
    let trajectories = ds.load_all()?;
    let started = Instant::now();
    let (bundle, train_log): (ModelBundle, TrainLog) = match stage {
        Stage::Encoder => {
            let grids = flow::all_grids(&trajectories);
            let fit = flow::train_encoder(&grids, &hyper)?;
            let acc = flow::reconstruction_accuracy(&fit.encoder, &fit.inverse_map, &grids)?;
            let _ = writeln!(log, "encoder: training sign agreement {acc:.4}");
            let b = ModelBundle::new(n, hyper, fit.encoder)?.with_inverse_map(fit.inverse_map)?;
            (b, fit.log)
        }
        Stage::Field | Stage::Projector => {
            let enc = ModelBundle::read_record(&models, Stage::Encoder)?
                .ok_or_else(|| Error::MissingStage("encoder".into()))?;
            if enc.dataset_fingerprint != fingerprint {
                return Err(Error::Config("encoder was trained on a different dataset".into()));
            }
            let mut b = ModelBundle::load(&models)?;
            // stage hyperparameters come from this run, the latent layout from the encoder
            let latent = b.hyper.latent_dim;
            let encoder_hidden = b.hyper.encoder_hidden.clone();
            b.hyper = FlowHyper {
                latent_dim: latent,
                encoder_hidden,
                ..hyper
            };
            if stage == Stage::Field {
                let set = flow::field_set(&b.encoder, &trajectories, ds.schedule())?;
                let fit = flow::train_field(&set, &b.hyper)?;
                (b.with_field(fit.net)?, fit.log)
            } else {
                let set = flow::projector_set(&b.encoder, &trajectories, ds.schedule())?;
                let fit = flow::train_projector(&set, &b.hyper)?;
                (b.with_projector(fit.net)?, fit.log)
            }
        }
    };
    bundle.save_stage(&models, stage, &fingerprint, &train_log)?;
    let losses = &train_log.losses;
    let _ = writeln!(
        log,
        "{}: {} epochs in {:.1}s, loss {} -> {}",
        stage.name(),
        losses.len(),
        started.elapsed().as_secs_f64(),
        losses.first().map(|l| format_significant(*l, 6)).unwrap_or_else(|| "-".into()),
        losses.last().map(|l| format_significant(*l, 6)).unwrap_or_else(|| "-".into()),
    );
    Ok(())
}

/// Metadata stored with sampled trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub decoder: DecoderChoice,
    pub n: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub schedule: CoolingSchedule,
    pub dataset_fingerprint: String,
}

/// Starting grid `i`: a random grid from `(seed, i)` equilibrated at `beta`.
pub fn equilibrated_start(n: usize, beta: f64, cfg: &EquilibrationConfig, seed: u64, i: usize) -> Result<SpinGrid> {
    let mut rng = RngStream::new(seed, i as u64).substream(0);
    let mut g = SpinGrid::random(n, &mut rng);
    montecarlo::equilibrate(&mut g, beta, cfg, &CouplingParams::default(), &mut rng)?;
    Ok(g)
}

/// One predicted trajectory from start `i`, drawing from `(seed, i)`.
pub fn sample_one(
    choice: DecoderChoice,
    bundle: Option<&ModelBundle>,
    x0: &SpinGrid,
    schedule: &CoolingSchedule,
    seed: u64,
    i: usize,
) -> Result<Vec<SpinGrid>> {
    let mut rng = RngStream::new(seed, i as u64).substream(1);
    match choice.decoder() {
        None => Ok(eval::baseline_mc15(x0, schedule, 15, &mut rng)),
        Some(d) => {
            let b = bundle.ok_or_else(|| Error::MissingStage("encoder".into()))?;
            flow::generate_trajectory(b, x0, schedule, d, &mut rng)
        }
    }
}

/// Sample `--n-traj` predicted trajectories with `--decoder` into `--out`.
pub fn cmd_sample(cfg: &RunConfig, log: &mut dyn Write) -> Result<()> {
    let choice = DecoderChoice::parse(cfg.decoder.as_deref().ok_or_else(|| Error::Usage("--decoder is required".into()))?)?;
    let out = cfg.out_path()?;
    let ds = Dataset::open(&cfg.data_path()?)?;
    let schedule = ds.schedule().clone();
    let n = ds.n();
    let bundle = match choice {
        DecoderChoice::Mc15 => None,
        _ => {
            let b = ModelBundle::load(&cfg.models_path()?)?;
            if b.n != n {
                return Err(Error::DimensionMismatch { expected: n, got: b.n });
            }
            Some(b)
        }
    };
    prepare_dir(&out, cfg.force)?;
    let beta0 = schedule.betas()[0];
    let started = Instant::now();
    let trajectories: Vec<Vec<SpinGrid>> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| {
            let x0 = equilibrated_start(n, beta0, &cfg.equilibration, cfg.seed, i)?;
            sample_one(choice, bundle.as_ref(), &x0, &schedule, cfg.seed, i)
        })
        .collect::<Result<_>>()?;
    let elapsed = started.elapsed().as_secs_f64();
    for (i, t) in trajectories.iter().enumerate() {
        for (j, g) in t.iter().enumerate() {
            dataset::write_grid(&dataset::grid_path(&out, i, j), g)?;
        }
    }
    let records = eval::trajectory_observables(&trajectories, &schedule)?;
    dataset::write_observables_csv(&out.join("observables.csv"), &records)?;
    let manifest = SampleManifest {
        decoder: choice,
        n,
        n_traj: cfg.n_traj,
        seed: cfg.seed,
        schedule,
        dataset_fingerprint: ds.fingerprint()?,
    };
    let path = out.join("sample.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").at(&path)?;
    write_resolved(&out, cfg)?;
    let _ = writeln!(
        log,
        "sampled {} {} trajectories in {:.2}s; final |m| = {:.4}",
        cfg.n_traj,
        choice.name(),
        elapsed,
        records.last().map(|r| r.m).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Sampled trajectories read back from a `sample` output directory.
pub fn load_samples(dir: &Path) -> Result<(SampleManifest, Vec<Vec<SpinGrid>>)> {
    let path = dir.join("sample.json");
    let manifest: SampleManifest = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
    let schedule = CoolingSchedule::from_temperatures(manifest.schedule.temperatures().to_vec())?;
    let trajectories = (0..manifest.n_traj)
        .map(|i| {
            (0..schedule.len())
                .map(|j| dataset::read_grid(&dataset::grid_path(dir, i, j), manifest.n))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok((SampleManifest { schedule, ..manifest }, trajectories))
}

/// Exact analytic curves over the schedule range.
pub fn onsager_rows(temps: &[f64], p: usize) -> Result<Vec<[f64; 5]>> {
    temps
        .iter()
        .map(|&t| {
            let beta = 1.0 / t;
            let c = AnisotropicCouplings::isotropic(beta)?;
            Ok([
                t,
                onsager::internal_energy_exact(beta, 1.0)?,
                onsager::free_energy_integral(&c, t)?,
                onsager::free_energy_finite(&c, t, p)?,
                onsager::singular_free_energy(&c, t)?,
            ])
        })
        .collect()
}

/// Temperatures swept by `onsager`: `--temps` if given, else `--points`
/// evenly spaced values from `t_max` to `t_min`.
pub fn onsager_temperatures(cfg: &RunConfig) -> Result<Vec<f64>> {
    if !cfg.temps.is_empty() {
        if cfg.temps.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        return Ok(cfg.temps.clone());
    }
    match cfg.points {
        0 => Err(Error::Config("--points must be >= 1".into())),
        1 => Ok(vec![cfg.t_max]),
        k => Ok(CoolingSchedule::new(cfg.t_max, cfg.t_min, k - 1)?.temperatures().to_vec()),
    }
}

pub fn cmd_onsager(cfg: &RunConfig, log: &mut dyn Write) -> Result<()> {
    let out = cfg.out_path()?;
    prepare_file(&out, cfg.force)?;
    let rows = onsager_rows(&onsager_temperatures(cfg)?, cfg.p)?;
    let mut text = String::from("T,u_exact,f_integral,f_finite,f_singular\n");
    for r in &rows {
        let cells: Vec<String> = r.iter().map(|x| format_significant(*x, 12)).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(&out, text).at(&out)?;
    let _ = writeln!(log, "wrote {} rows (p = {}) to {}", rows.len(), cfg.p, out.display());
    Ok(())
}

fn time_method(
    choice: Option<DecoderChoice>,
    bundle: Option<&ModelBundle>,
    cfg: &RunConfig,
    schedule: &CoolingSchedule,
    n: usize,
) -> Result<MeanStd> {
    let beta0 = schedule.betas()[0];
    let starts: Vec<SpinGrid> = (0..cfg.reps)
        .map(|i| equilibrated_start(n, beta0, &cfg.equilibration, cfg.seed ^ 0x7469_6d65, i))
        .collect::<Result<_>>()?;
    let mut i = 0;
    eval::timing_harness(cfg.reps, || {
        let r = match choice {
            None => {
                let mut rng = RngStream::new(cfg.seed ^ 0x6774, i as u64);
                montecarlo::anneal_trajectory(schedule, n, &cfg.equilibration, &CouplingParams::default(), &mut rng)
                    .map(|_| ())
            }
            Some(c) => sample_one(c, bundle, &starts[i], schedule, cfg.seed, i).map(|_| ()),
        };
        i += 1;
        r
    })
}

/// Compare each `--predicted` directory with the ground truth at `--data`
/// and write `report.csv` to `--out`. Timings use `--reps` fresh
/// trajectories per method and need `--models` for the learned decoders.
pub fn cmd_evaluate(cfg: &RunConfig, log: &mut dyn Write) -> Result<EvalReport> {
    let out = cfg.out_path()?;
    let ds = Dataset::open(&cfg.data_path()?)?;
    if cfg.predicted.is_empty() {
        return Err(Error::Usage("--predicted is required".into()));
    }
    prepare_file(&out, cfg.force)?;
    let gt: Vec<ObservableRecord> = ds.observables()?;
    let schedule = ds.schedule().clone();
    let n = ds.n();
    let bundle = cfg.models.as_ref().map(|m| ModelBundle::load(m)).transpose()?;
    let nan = MeanStd {
        mean: f64::NAN,
        std: f64::NAN,
    };
    let mut report = EvalReport::default();
    report.rows.push(EvalRow {
        method: "gt".into(),
        n,
        deltas: eval::compare_records(&gt, &gt)?,
        time: time_method(None, None, cfg, &schedule, n)?,
    });
    for dir in &cfg.predicted {
        let (manifest, trajectories) = load_samples(dir)?;
        if manifest.n != n {
            return Err(Error::DimensionMismatch { expected: n, got: manifest.n });
        }
        let deltas = eval::compare_observables(&trajectories, &gt, &schedule)?;
        let time = match (manifest.decoder, &bundle) {
            (DecoderChoice::Mc15, _) => time_method(Some(DecoderChoice::Mc15), None, cfg, &schedule, n)?,
            (c, Some(b)) => time_method(Some(c), Some(b), cfg, &schedule, n)?,
            (_, None) => nan,
        };
        report.rows.push(EvalRow {
            method: manifest.decoder.name().into(),
            n,
            deltas,
            time,
        });
    }
    report.write_csv(&out)?;
    let _ = write!(log, "{report}");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_follow_the_lattice() {
        let cfg = RunConfig::from_map(&BTreeMap::new()).unwrap();
        assert_eq!((cfg.n, cfg.d, cfg.k, cfg.n_traj), (32, 20, 40, 8));
        assert_eq!(cfg.hyper.latent_dim, 256);
        let cfg = RunConfig::from_map(&flags(&[("n", "16")])).unwrap();
        assert_eq!(cfg.hyper.latent_dim, 64);
    }

    #[test]
    fn flags_override_file_values() {
        let file = "n = 16\nseed=3 # comment\n\nsigma=2.5\n";
        let cfg = RunConfig::resolve(Some(file), &flags(&[("seed", "9")])).unwrap();
        assert_eq!(cfg.n, 16);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.hyper.seed, 9);
        assert_eq!(cfg.hyper.sigma, 2.5);
    }

    #[test]
    fn config_text_round_trips() {
        let cfg = RunConfig::from_map(&flags(&[
            ("n", "8"),
            ("epochs", "3"),
            ("field_hidden", "4,5"),
            ("temps", "2.269,3"),
            ("predicted", "a,b"),
            ("out", "x"),
            ("threads", "2"),
        ]))
        .unwrap();
        assert_eq!(cfg.hyper.encoder_epochs, 3);
        assert_eq!(cfg.hyper.field_hidden, vec![4, 5]);
        let back = RunConfig::resolve(Some(&cfg.to_config_text()), &BTreeMap::new()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_config_is_rejected() {
        assert!(parse_config("n 32").is_err());
        assert!(parse_config("bogus=1").is_err());
        assert!(RunConfig::from_map(&flags(&[("n", "abc")])).is_err());
        assert!(RunConfig::from_map(&flags(&[("sigma", "0")])).is_err());
    }

    #[test]
    fn decoder_tags_parse() {
        for d in ["ptheta", "mh10", "mh15", "mc15"] {
            assert_eq!(DecoderChoice::parse(d).unwrap().name(), d);
        }
        assert!(DecoderChoice::parse("mh20").is_err());
    }

    #[test]
    fn onsager_sweep_has_requested_rows() {
        let cfg = RunConfig::from_map(&flags(&[("points", "7")])).unwrap();
        let temps = onsager_temperatures(&cfg).unwrap();
        assert_eq!(temps.len(), 7);
        assert_eq!((temps[0], temps[6]), (5.0, 1.0));
        let rows = onsager_rows(&[2.0 / (1.0 + 2f64.sqrt()).ln()], 16).unwrap();
        assert!((rows[0][1] + 2f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn existing_output_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep"), "x").unwrap();
        assert!(matches!(prepare_dir(dir.path(), false), Err(Error::Exists { .. })));
        prepare_dir(dir.path(), true).unwrap();
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
        let file = dir.path().join("f.csv");
        prepare_file(&file, false).unwrap();
        fs::write(&file, "x").unwrap();
        assert!(prepare_file(&file, false).is_err());
        prepare_file(&file, true).unwrap();
    }
}
