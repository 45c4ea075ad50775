use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isingflow::run::{self, RunConfig};
use isingflow::Error;

#[derive(Parser)]
#[command(name = "isingflow", version, about = "2D Ising cooling data, exact analytics and a latent thermal flow")]
struct Cli {
    /// `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate annealing trajectories and conditional samples.
    GenData(Opts),
    /// Train one pipeline stage (encoder, field or projector).
    Train(Opts),
    /// Generate predicted trajectories with a decoder.
    Sample(Opts),
    /// Tabulate exact energies and free energies.
    Onsager(Opts),
    /// Compare predicted trajectories against ground truth.
    Evaluate(Opts),
}

#[derive(Args, Default)]
struct Opts {
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    t_max: Option<String>,
    #[arg(long)]
    t_min: Option<String>,
    /// Number of schedule intervals.
    #[arg(long)]
    d: Option<String>,
    /// Conditional samples per schedule point.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    n_traj: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    latent: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Epochs for every stage unless set per stage.
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    encoder_epochs: Option<String>,
    #[arg(long)]
    field_epochs: Option<String>,
    #[arg(long)]
    projector_epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    encoder_hidden: Option<String>,
    #[arg(long)]
    field_hidden: Option<String>,
    #[arg(long)]
    projector_hidden: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Comma-separated sample directories.
    #[arg(long)]
    predicted: Option<String>,
    /// ptheta, mh10, mh15 or mc15.
    #[arg(long)]
    decoder: Option<String>,
    /// encoder, field or projector.
    #[arg(long)]
    stage: Option<String>,
    /// Transfer-matrix size for the finite free energy.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    points: Option<String>,
    /// Comma-separated temperatures.
    #[arg(long)]
    temps: Option<String>,
    #[arg(long)]
    reps: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    force: bool,
}

impl Opts {
    fn to_map(&self) -> BTreeMap<String, String> {
        let fields = [
            ("n", &self.n),
            ("t_max", &self.t_max),
            ("t_min", &self.t_min),
            ("d", &self.d),
            ("k", &self.k),
            ("n_traj", &self.n_traj),
            ("seed", &self.seed),
            ("epsilon", &self.epsilon),
            ("window", &self.window),
            ("max_steps", &self.max_steps),
            ("latent", &self.latent),
            ("sigma", &self.sigma),
            ("lambda", &self.lambda),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("encoder_epochs", &self.encoder_epochs),
            ("field_epochs", &self.field_epochs),
            ("projector_epochs", &self.projector_epochs),
            ("batch_size", &self.batch_size),
            ("encoder_hidden", &self.encoder_hidden),
            ("field_hidden", &self.field_hidden),
            ("projector_hidden", &self.projector_hidden),
            ("data", &self.data),
            ("models", &self.models),
            ("out", &self.out),
            ("predicted", &self.predicted),
            ("decoder", &self.decoder),
            ("stage", &self.stage),
            ("p", &self.p),
            ("points", &self.points),
            ("temps", &self.temps),
            ("reps", &self.reps),
            ("threads", &self.threads),
        ];
        let mut map: BTreeMap<String, String> = fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        if self.force {
            map.insert("force".into(), "true".into());
        }
        map
    }
}

fn execute(cli: Cli) -> isingflow::Result<bool> {
    let (opts, name) = match &cli.command {
        Command::GenData(o) => (o, "gen-data"),
        Command::Train(o) => (o, "train"),
        Command::Sample(o) => (o, "sample"),
        Command::Onsager(o) => (o, "onsager"),
        Command::Evaluate(o) => (o, "evaluate"),
    };
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|source| Error::Io {
            path: p.clone(),
            source,
        })?),
        None => None,
    };
    let cfg = RunConfig::resolve(text.as_deref(), &opts.to_map())?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut log = std::io::stderr();
    let resolved = cfg.to_config_text().replace('\n', " ");
    eprintln!("isingflow {name}: {}", resolved.trim_end());
    match cli.command {
        Command::GenData(_) => run::cmd_gen_data(&cfg, &mut log),
        Command::Train(_) => run::cmd_train(&cfg, &mut log).map(|_| true),
        Command::Sample(_) => run::cmd_sample(&cfg, &mut log).map(|_| true),
        Command::Onsager(_) => run::cmd_onsager(&cfg, &mut log).map(|_| true),
        Command::Evaluate(_) => run::cmd_evaluate(&cfg, &mut std::io::stdout()).map(|_| true),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some equilibrations hit the step cap");
            ExitCode::from(1)
        }
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
