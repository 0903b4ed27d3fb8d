//! Command-line front end. [`run`] parses arguments, dispatches and returns
//! the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | usage or validation error |
//! | 2 | no feasible exploration rate |
//! | 3 | numerical, solver or file failure |
//! | 4 | training failed |

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg;
use crate::model::{build_mode_set, ModeSet, PlantModel, PlantSpec, Switch};
use crate::rl::{self, CertifiedEpsilon, InputMode, OptimizerKind, QNetworkGreedy, TrainConfig, WeightsMeta};
use crate::sim::{
    self, Always, CostSpec, CostWeights, EpsilonGreedy, InitialBox, NetworkConfig, RngStreams, RoundRobin,
    SchedulingPolicy, UniformRandom,
};
use crate::stability::{self, EpsilonSearch, Feasibility, StabilityCertificate};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;

pub const DEFAULT_DELTA: f64 = 0.8;
pub const DEFAULT_SEED: u64 = 12345;
pub const DEFAULT_HORIZON: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const POLICY_NAMES: &str = "egreedy, round-robin, round-robin:1,0,-1, random, always:+1, always:0, always:-1, dqn:<weights-file>";

#[derive(Debug, Parser)]
#[command(name = "muxncs", version, about = "Certified epsilon-greedy scheduling for a multiplexed networked control loop")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find the smallest certified exploration rate and write certificate.json.
    Analyze(AnalyzeArgs),
    /// Certified exploration rate over a grid of success probabilities.
    Sweep(SweepArgs),
    /// Monte-Carlo rollouts of one policy; writes trace.csv and decay.csv.
    Simulate(SimulateArgs),
    /// Train a Q-network scheduler; writes weights.json and reward_curve.csv.
    Train(TrainArgs),
    /// Average reward of several policies on paired episodes; writes compare.csv.
    Compare(CompareArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON plant file with A, B, C, K; overrides the config's plant.
    #[arg(long)]
    pub plant: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Transmission penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Check this exploration rate instead of searching.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Success probabilities; defaults to 0.1, 0.2, ..., 1.0.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub deltas: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value = "egreedy")]
    pub policy: String,
    /// Exploiting policy wrapped by egreedy.
    #[arg(long, default_value = "always:0")]
    pub exploiter: String,
    /// Exploration rate for egreedy; certified if omitted.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub runs: usize,
    /// Common initial plant state, comma separated; defaults to 10 in every coordinate.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InputArg {
    State,
    Augmented,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// certificate.json from `analyze`.
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Train with --epsilon even though no certificate backs it.
    #[arg(long)]
    pub uncertified: bool,
    #[arg(long, default_value_t = 800)]
    pub episodes: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub sync_period: usize,
    #[arg(long, default_value_t = 1000)]
    pub replay: usize,
    #[arg(long, value_delimiter = ',', default_value = "1024,256")]
    pub hidden: Vec<usize>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    /// Rescale gradients whose global norm exceeds this; 0 disables.
    #[arg(long, default_value_t = rl::DEFAULT_CLIP_NORM)]
    pub clip_norm: f64,
    /// Q-network features: the full augmented state, or the plant state alone.
    #[arg(long, value_enum, default_value_t = InputArg::Augmented)]
    pub input: InputArg,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// At least two policies.
    #[arg(long, num_args = 1.., required = true)]
    pub policy: Vec<String>,
    #[arg(long, default_value = "always:0")]
    pub exploiter: String,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub episodes: usize,
}

/// JSON run configuration; every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub plant: Option<PlantSpec>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub cost: Option<CostSpec>,
    pub horizon: Option<usize>,
    pub seed: Option<u64>,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Domain(_) | Error::Parse(_) => EXIT_USAGE,
            Error::Numerical(_) | Error::NonMonotone { .. } | Error::Io { .. } => EXIT_NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Inputs shared by every command after merging flags over the config file.
#[derive(Debug, Clone)]
pub struct Settings {
    pub plant: PlantModel,
    pub modes: ModeSet,
    pub delta: f64,
    pub epsilon: Option<f64>,
    pub weights: CostWeights,
    pub network: NetworkConfig,
    pub out: PathBuf,
}

impl Settings {
    pub fn resolve(common: &CommonArgs) -> CliResult<Self> {
        let config: RunConfig = match &common.config {
            Some(path) => read_json(path)?,
            None => RunConfig::default(),
        };
        let plant = match (&common.plant, &config.plant) {
            (Some(path), _) => read_json::<PlantSpec>(path)?.build()?,
            (None, Some(spec)) => spec.build()?,
            (None, None) => PlantModel::reference(),
        };
        let delta = common.delta.or(config.delta).unwrap_or(DEFAULT_DELTA);
        let mut weights = match &config.cost {
            Some(spec) => spec.build()?,
            None => CostWeights::identity(plant.state_dim(), plant.input_dim()),
        };
        if let Some(lambda) = common.lambda {
            weights = weights.with_lambda(lambda)?;
        }
        let network = NetworkConfig::new(
            delta,
            common.seed.or(config.seed).unwrap_or(DEFAULT_SEED),
            common.horizon.or(config.horizon).unwrap_or(DEFAULT_HORIZON),
        )?;
        Ok(Self {
            modes: build_mode_set(&plant),
            plant,
            delta,
            epsilon: config.epsilon,
            weights,
            network,
            out: common.out.clone(),
        })
    }

    fn output(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        Ok(self.out.join(name))
    }

    /// `explicit`, else the configured ε, else the certified ε̄ at this δ.
    pub fn epsilon_or_certified(&self, explicit: Option<f64>) -> CliResult<f64> {
        if let Some(eps) = explicit.or(self.epsilon) {
            if !(0.0..=1.0).contains(&eps) {
                return Err(CliError::usage(format!("epsilon {eps} outside [0, 1]")));
            }
            return Ok(eps);
        }
        match stability::find_epsilon_bar(self.delta, &self.modes, DEFAULT_TOLERANCE)? {
            EpsilonSearch::Certified { epsilon_bar, .. } => Ok(epsilon_bar),
            EpsilonSearch::NoFeasibleEpsilon { best_margin } => Err(CliError {
                code: EXIT_INFEASIBLE,
                message: format!(
                    "no exploration rate is certified at delta = {} (best margin {best_margin:e}); pass --epsilon",
                    self.delta
                ),
            }),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())).into())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Run metadata kept apart from the deterministic artifacts.
fn write_meta(settings: &Settings, command: &str, started: Instant) -> CliResult<()> {
    let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let meta = serde_json::json!({
        "command": command,
        "unix_time": unix_time,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "seed": settings.network.seed(),
        "delta": settings.delta,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&settings.output(&format!("{command}.meta.json"))?, &meta)
}

/// certificate.json contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub status: String,
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margins: Option<[f64; 3]>,
    #[serde(rename = "V", skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_margin: Option<f64>,
}

impl CertificateReport {
    pub fn certified(cert: &StabilityCertificate) -> Self {
        Self {
            status: "certified".into(),
            delta: cert.delta,
            epsilon_bar: Some(cert.epsilon),
            margins: Some(cert.margins),
            v: Some(linalg::to_rows(&cert.v)),
            best_margin: None,
        }
    }

    pub fn to_certificate(&self) -> crate::Result<StabilityCertificate> {
        match (&self.status[..], self.epsilon_bar, self.margins, &self.v) {
            ("certified", Some(epsilon), Some(margins), Some(v)) => Ok(StabilityCertificate {
                v: linalg::from_rows(v, "V")?,
                margins,
                epsilon,
                delta: self.delta,
            }),
            _ => Err(Error::Parse(format!(
                "certificate report has status {:?} and no complete certificate",
                self.status
            ))),
        }
    }
}

/// Parses a policy name. `epsilon` is only called for `egreedy`.
pub fn parse_policy(
    name: &str,
    plant: &PlantModel,
    exploiter: &str,
    epsilon: &mut dyn FnMut() -> CliResult<f64>,
) -> CliResult<Box<dyn SchedulingPolicy>> {
    let unknown = || CliError::usage(format!("unknown policy {name:?}; valid policies: {POLICY_NAMES}"));
    Ok(match name {
        "egreedy" => {
            if exploiter == "egreedy" {
                return Err(CliError::usage("egreedy cannot wrap itself"));
            }
            let inner = parse_policy(exploiter, plant, "always:0", epsilon)?;
            Box::new(EpsilonGreedy::new(epsilon()?, inner))
        }
        "round-robin" => Box::new(RoundRobin::alternating()),
        "round-robin:1,0,-1" => Box::new(RoundRobin::three_phase()),
        "random" => Box::new(UniformRandom),
        "always:+1" | "always:1" => Box::new(Always(Switch::Control)),
        "always:0" => Box::new(Always(Switch::Silent)),
        "always:-1" => Box::new(Always(Switch::Observe)),
        _ => {
            let path = name.strip_prefix("dqn:").ok_or_else(unknown)?;
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let (net, meta) = rl::load_weights(BufReader::new(file))?;
            let expected = meta.input.dim(plant.state_dim(), plant.input_dim());
            if net.input_dim() != expected {
                return Err(CliError::usage(format!(
                    "{path}: network takes {} inputs, the plant provides {expected}",
                    net.input_dim()
                )));
            }
            Box::new(QNetworkGreedy::new(net, meta.input))
        }
    })
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<i32> {
    let started = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let (report, code) = match args.epsilon.or(s.epsilon) {
        Some(eps) => match stability::lmi_feasible(s.delta, eps, &s.modes)? {
            Feasibility::Certified(cert) => (CertificateReport::certified(&cert), EXIT_OK),
            Feasibility::Infeasible { best_margin } => (infeasible_report(s.delta, best_margin), EXIT_INFEASIBLE),
        },
        None => match stability::find_epsilon_bar(s.delta, &s.modes, args.tol)? {
            EpsilonSearch::Certified { certificate, .. } => (CertificateReport::certified(&certificate), EXIT_OK),
            EpsilonSearch::NoFeasibleEpsilon { best_margin } => {
                (infeasible_report(s.delta, best_margin), EXIT_INFEASIBLE)
            }
        },
    };
    let path = s.output("certificate.json")?;
    write_json(&path, &report)?;
    match report.epsilon_bar {
        Some(eps) => println!("delta={} epsilon_bar={eps} certified -> {}", s.delta, path.display()),
        None => println!("delta={} no feasible epsilon -> {}", s.delta, path.display()),
    }
    write_meta(&s, "analyze", started)?;
    Ok(code)
}

fn infeasible_report(delta: f64, best_margin: f64) -> CertificateReport {
    CertificateReport {
        status: "no_feasible_epsilon".into(),
        delta,
        epsilon_bar: None,
        margins: None,
        v: None,
        best_margin: Some(best_margin),
    }
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<i32> {
    let started = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let grid = args
        .deltas
        .clone()
        .unwrap_or_else(|| crate::markov::CHECK_DELTAS.to_vec());
    if grid.is_empty() {
        return Err(CliError::usage("delta grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(CliError::usage(format!("delta {bad} outside (0, 1]")));
    }
    if !(args.tol > 0.0) {
        return Err(CliError::usage(format!("tolerance {} must be positive", args.tol)));
    }
    let rows = stability::sweep_delta(&grid, &s.modes, args.tol);
    let path = s.output("sweep.csv")?;
    stability::write_sweep_csv(&rows, create(&path)?)?;
    for row in &rows {
        match row.epsilon_bar() {
            Some(e) => println!("delta={} epsilon_bar={e}", row.delta),
            None => println!("delta={} {}", row.delta, row.status()),
        }
    }
    write_meta(&s, "sweep", started)?;
    let failed = rows.iter().any(|r| r.outcome.is_err());
    Ok(if failed { EXIT_NUMERICAL } else { EXIT_OK })
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<i32> {
    let started = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let mut eps = || s.epsilon_or_certified(args.epsilon);
    let policy = parse_policy(&args.policy, &s.plant, &args.exploiter, &mut eps)?;
    if args.runs < sim::MIN_DECAY_RUNS {
        return Err(CliError::usage(format!("--runs must be at least {}", sim::MIN_DECAY_RUNS)));
    }
    let n = s.plant.state_dim();
    let x0 = match &args.x0 {
        Some(v) if v.len() != n => {
            return Err(CliError::usage(format!("--x0 has {} entries, the plant has {n} states", v.len())))
        }
        Some(v) => DVector::from_column_slice(v),
        None => DVector::from_element(n, 10.0),
    };

    let mut first = policy.clone();
    let mut streams = RngStreams::new(s.network.seed(), 0);
    let trace = sim::simulate_with_streams(&s.plant, first.as_mut(), &s.network, &s.weights, &x0, &mut streams)?;
    sim::write_trace_csv(&trace, create(&s.output("trace.csv")?)?)?;

    if x0.iter().all(|v| *v == 0.0) {
        // Every mode is linear, so ζ stays at the origin and there is no rate to fit.
        let estimate = sim::DecayEstimate {
            zeta_const: f64::NAN,
            xi: f64::NAN,
            r_squared: f64::NAN,
            mean_zeta_sq: vec![0.0; s.network.horizon() + 1],
            runs: args.runs,
            diverged: 0,
        };
        sim::write_decay_csv(&estimate, create(&s.output("decay.csv")?)?)?;
        println!("policy={} zero initial state, nothing to fit", policy.name());
        write_meta(&s, "simulate", started)?;
        return Ok(EXIT_OK);
    }
    let estimate = sim::monte_carlo_decay(&s.plant, policy.as_ref(), &s.network, &x0, args.runs)?;
    sim::write_decay_csv(&estimate, create(&s.output("decay.csv")?)?)?;
    println!(
        "policy={} zeta_bar={} xi={} r_squared={} diverged={}/{}",
        policy.name(),
        estimate.zeta_const,
        estimate.xi,
        estimate.r_squared,
        estimate.diverged,
        estimate.runs
    );
    write_meta(&s, "simulate", started)?;
    Ok(EXIT_OK)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<i32> {
    let started = Instant::now();
    let s = Settings::resolve(&args.common)?;
    let exploration = match (&args.certificate, args.epsilon.or(s.epsilon), args.uncertified) {
        (Some(path), None, _) => {
            let cert = read_json::<CertificateReport>(path)?.to_certificate()?;
            cert.verify(&s.modes)?;
            CertifiedEpsilon::from_certificate(cert)
        }
        (Some(_), Some(_), _) => {
            return Err(CliError::usage("give either --certificate or --epsilon, not both"));
        }
        (None, Some(eps), true) => CertifiedEpsilon::uncertified(eps)?,
        (None, _, _) => {
            return Err(CliError::usage(
                "training requires a certified exploration rate: pass --certificate <certificate.json> \
                 from `analyze`, or --epsilon <value> together with --uncertified to bypass the check",
            ))
        }
    };
    let epsilon = exploration.epsilon();
    let mut cfg = TrainConfig::new(exploration);
    cfg.episodes = args.episodes;
    cfg.batch_size = args.batch_size;
    cfg.learning_rate = args.lr;
    cfg.target_sync_period = args.sync_period;
    cfg.replay_capacity = args.replay;
    cfg.hidden = args.hidden.clone();
    cfg.clip_norm = (args.clip_norm != 0.0).then_some(args.clip_norm);
    cfg.optimizer = match args.optimizer {
        OptimizerArg::Sgd => OptimizerKind::Sgd,
        OptimizerArg::Adam => OptimizerKind::Adam,
    };
    cfg.input = match args.input {
        InputArg::State => InputMode::State,
        InputArg::Augmented => InputMode::Augmented,
    };

    let outcome = rl::train(&s.plant, &s.network, &s.weights, &cfg).map_err(|e| match e {
        Error::Numerical(msg) => CliError {
            code: EXIT_TRAINING,
            message: format!("training aborted: {msg}"),
        },
        other => other.into(),
    })?;
    let meta = WeightsMeta {
        epsilon,
        delta: s.delta,
        seed: s.network.seed(),
        input: cfg.input,
    };
    let weights_path = s.output("weights.json")?;
    let mut w = create(&weights_path)?;
    rl::save_weights(&outcome.network, meta, &mut w)?;
    w.flush().map_err(|e| Error::io(&weights_path, e))?;
    rl::write_reward_curve(&outcome.episode_rewards, create(&s.output("reward_curve.csv")?)?)?;

    let avg = rl::moving_average(&outcome.episode_rewards, rl::CURVE_WINDOW);
    if let (Some(first), Some(last)) = (avg.first(), avg.last()) {
        println!("episodes={} first_reward={first} final_moving_avg={last}", avg.len());
    } else {
        println!("episodes=0");
    }
    println!("weights -> {}", weights_path.display());
    write_meta(&s, "train", started)?;
    if outcome.failed {
        eprintln!("error: training failed: more than half of the last episodes diverged");
        return Ok(EXIT_TRAINING);
    }
    Ok(EXIT_OK)
}

pub fn cmd_compare(args: &CompareArgs) -> CliResult<i32> {
    let started = Instant::now();
    let s = Settings::resolve(&args.common)?;
    if args.policy.len() < 2 {
        return Err(CliError::usage("compare needs at least two policies"));
    }
    if args.episodes == 0 {
        return Err(CliError::usage("--episodes must be positive"));
    }
    let mut eps = || s.epsilon_or_certified(args.epsilon);
    let policies = args
        .policy
        .iter()
        .map(|name| parse_policy(name, &s.plant, &args.exploiter, &mut eps).map(|p| (name.clone(), p)))
        .collect::<CliResult<Vec<_>>>()?;

    let path = s.output("compare.csv")?;
    let mut w = csv::Writer::from_writer(create(&path)?);
    let csv_err = |e: csv::Error| CliError::from(Error::Parse(format!("csv: {e}")));
    w.write_record(["policy", "avg_reward", "stderr", "episodes"]).map_err(csv_err)?;
    for (name, policy) in &policies {
        let summary = sim::average_reward(
            &s.plant,
            policy.as_ref(),
            &s.network,
            &s.weights,
            args.episodes,
            InitialBox::default(),
        )?;
        println!("{name}: {} ± {}", summary.mean, summary.stderr);
        let label = if name.starts_with("dqn:") { "dqn" } else { name.as_str() };
        w.write_record([
            label.to_string(),
            summary.mean.to_string(),
            summary.stderr.to_string(),
            summary.episodes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_meta(&s, "compare", started)?;
    Ok(EXIT_OK)
}

/// Honors `MUXNCS_THREADS` for the global rayon pool.
fn configure_threads() -> CliResult<()> {
    if let Ok(value) = std::env::var("MUXNCS_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| CliError::usage(format!("MUXNCS_THREADS={value:?} is not a positive integer")))?;
        // Fails only if a pool already exists, in which case it stays as is.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> CliResult<i32> {
    configure_threads()?;
    match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
