//! Command-line front end: argument parsing, config resolution, artifact
//! files and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{baseline_evaluate, clean_accuracy, BaselineClassifier};
use crate::channel::{sir_at, sir_trace, slot_sir_summary, write_sir_csv, ChannelParams, SymbolSequence};
use crate::data::{toy_split, Dataset, ToyConfig};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::oracle::{write_curve_csv, CurveMetadata};
use crate::pipeline::{
    point_seed, surrogate_fidelity, sweep, train_baseline, validate_physics, write_metrics_csv, ExperimentConfig,
    FidelityConfig, PhysicsConfig, PointResult,
};
use crate::surrogate::{fit_channel, write_pairs_csv, ChannelSurrogate};
use crate::transceiver::{evaluate_accuracy, report_bcr, train_end_to_end, InputShape, Link, SemanticModel};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TOLERANCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "molsem", version, about = "Semantic transmission over a diffusive molecular channel")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// `scenario1`, `scenario2`, `both`, or a scenario TOML file.
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// TOML file overriding any run setting.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Molecule budget; a comma-separated list for `sweep`.
    #[arg(long = "n-m", global = true, value_delimiter = ',')]
    pub n_m: Vec<u64>,
    /// Worker threads for particle shards and evaluation trials.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Re-run exactly the configuration recorded in a run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Particle simulation against the closed-form capture probability.
    ValidatePhysics,
    /// SIR trace of five consecutive ones.
    SimSir {
        /// Time step of the trace (s).
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Writes the toy train/test datasets.
    GenData,
    /// Simulates channel pairs and fits the mixture surrogate.
    FitChannel,
    /// Trains the semantic model through a surrogate, plus the baseline classifier.
    Train {
        /// Directory holding `train.msds`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        surrogate: Option<PathBuf>,
    },
    /// Scores trained models through the channel simulator.
    Eval {
        /// Directory holding `test.msds`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Accuracy against molecule budget for both methods.
    Sweep {
        /// Directory holding `train.msds` and `test.msds`; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ValidatePhysics => "validate-physics",
            Command::SimSir { .. } => "sim-sir",
            Command::GenData => "gen-data",
            Command::FitChannel => "fit-channel",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SirConfig {
    pub dt: f64,
    pub symbols: Vec<f64>,
}

impl Default for SirConfig {
    fn default() -> Self {
        SirConfig {
            dt: 0.01,
            symbols: vec![1.0; 5],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub data: Option<PathBuf>,
    pub surrogate: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

/// Every setting of a run, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub scenario: Option<String>,
    /// Resolved channels; filled from `scenario` and `n_m` when empty.
    pub channels: Vec<ChannelParams>,
    pub physics: PhysicsConfig,
    pub sir: SirConfig,
    pub data: ToyConfig,
    pub experiment: ExperimentConfig,
    pub fidelity: FidelityConfig,
    pub sweep_n_m: Vec<u64>,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            seed: 1,
            threads: 1,
            scenario: None,
            channels: Vec::new(),
            physics: PhysicsConfig::default(),
            sir: SirConfig::default(),
            data: ToyConfig::default(),
            experiment: ExperimentConfig::default(),
            fidelity: FidelityConfig::default(),
            sweep_n_m: vec![100, 200, 400, 700, 1000, 2000, 4000, 12000, 20000],
            inputs: Inputs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// Git-style object hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: content_hash(&bytes),
    })
}

/// What a command reports back to the process.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    /// Set when a checked quantity is outside its tolerance.
    pub tolerance_breach: Option<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownScenario(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn default_scenario(command: &Command) -> &'static str {
    match command {
        Command::ValidatePhysics | Command::SimSir { .. } => "both",
        _ => "scenario1",
    }
}

fn resolve_channels(scenario: &str, n_m: Option<u64>) -> Result<Vec<ChannelParams>> {
    let base = match scenario {
        "both" => vec![ChannelParams::scenario1(), ChannelParams::scenario2()],
        "scenario1" | "scenario2" => vec![ChannelParams::named(scenario)?],
        path if Path::new(path).is_file() => vec![ChannelParams::from_file(Path::new(path))?],
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    Ok(base.into_iter().map(|p| if let Some(n) = n_m { p.with_n_m(n) } else { p }).collect())
}

/// Builds the full configuration from defaults, `--config`, and flags, or
/// from a manifest.
pub fn resolve(cli: &Cli) -> Result<(RunConfig, PathBuf)> {
    let c = &cli.common;
    let name = cli.command.name();
    let out_flag = c.out.clone();
    if let Some(path) = &c.manifest {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.command != name {
            return Err(Error::Config(format!("manifest records `{}`, not `{name}`", m.command)));
        }
        let mut cfg = m.config;
        if let Some(t) = c.threads {
            cfg.threads = t;
        }
        let out = out_flag.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
        return Ok((cfg, out));
    }

    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    cfg.command = name.to_string();
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads {
        cfg.threads = t;
    }
    if cfg.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    if c.scenario.is_some() {
        cfg.scenario = c.scenario.clone();
    }
    let is_sweep = matches!(cli.command, Command::Sweep { .. });
    if is_sweep && !c.n_m.is_empty() {
        cfg.sweep_n_m = c.n_m.clone();
    }
    if !is_sweep && c.n_m.len() > 1 {
        return Err(Error::Config(format!("`{name}` takes a single --n-m value")));
    }
    let n_m = if is_sweep { None } else { c.n_m.first().copied() };
    if cfg.channels.is_empty() || c.scenario.is_some() {
        let scenario = cfg.scenario.clone().unwrap_or_else(|| default_scenario(&cli.command).to_string());
        cfg.channels = resolve_channels(&scenario, n_m)?;
        cfg.scenario = Some(scenario);
    } else if let Some(n) = n_m {
        cfg.channels = cfg.channels.into_iter().map(|p| p.with_n_m(n)).collect();
    }
    for p in &cfg.channels {
        p.validate()?;
    }
    match &cli.command {
        Command::SimSir { dt: Some(dt) } => cfg.sir.dt = *dt,
        Command::Train { data, surrogate } => {
            cfg.inputs.data = data.clone().or(cfg.inputs.data);
            cfg.inputs.surrogate = surrogate.clone().or(cfg.inputs.surrogate);
        }
        Command::Eval { data, model, classifier } => {
            cfg.inputs.data = data.clone().or(cfg.inputs.data);
            cfg.inputs.model = model.clone().or(cfg.inputs.model);
            cfg.inputs.classifier = classifier.clone().or(cfg.inputs.classifier);
        }
        Command::Sweep { data } => cfg.inputs.data = data.clone().or(cfg.inputs.data),
        _ => {}
    }
    Ok((cfg, out_flag.unwrap_or_else(|| PathBuf::from("out"))))
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let (cfg, out) = resolve(cli)?;
    // A pool may already exist when commands run in-process back to back.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| execute(&cfg, &out))
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| Error::io(self.path(name), e))?;
        self.write(name, &buf)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        self.write(name, format!("{text}\n").as_bytes())
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(path.to_path_buf());
        Ok(bytes)
    }

    fn checkpoint(&mut self, path: &Option<PathBuf>, what: &str) -> Result<Checkpoint> {
        let path = path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing --{what} checkpoint path")))?;
        Checkpoint::from_bytes(&self.input(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn dataset(&mut self, file: &str) -> Result<Dataset> {
        let dir = self
            .cfg
            .inputs
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("missing --data directory".into()))?;
        let path = dir.join(file);
        Dataset::from_bytes(&self.input(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn single_channel(&self) -> Result<&ChannelParams> {
        match self.cfg.channels.as_slice() {
            [p] => Ok(p),
            _ => Err(Error::Config(format!("`{}` needs exactly one scenario", self.cfg.command))),
        }
    }
}

fn execute(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut run = Run {
        cfg,
        out,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let breach = match cfg.command.as_str() {
        "validate-physics" => cmd_validate_physics(&mut run)?,
        "sim-sir" => cmd_sim_sir(&mut run)?,
        "gen-data" => cmd_gen_data(&mut run)?,
        "fit-channel" => cmd_fit_channel(&mut run)?,
        "train" => cmd_train(&mut run)?,
        "eval" => cmd_eval(&mut run)?,
        "sweep" => cmd_sweep(&mut run)?,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    let manifest = Manifest {
        tool: "molsem".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cfg.command.clone(),
        config: cfg.clone(),
        inputs: run.inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs: run.outputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
    };
    let outputs = run.outputs.clone();
    let manifest_path = run.write_json(&format!("{}.manifest.json", cfg.command), &manifest)?;
    Ok(Outcome {
        outputs,
        manifest: manifest_path,
        tolerance_breach: breach,
    })
}

fn cmd_validate_physics(run: &mut Run) -> Result<Option<String>> {
    let mut breaches = Vec::new();
    for p in &run.cfg.channels {
        let report = validate_physics(run.cfg.seed, p, &run.cfg.physics)?;
        run.write_with(&format!("physics_{}.csv", p.name), |w| write_curve_csv(w, &report.curve))?;
        #[derive(Serialize)]
        struct Summary<'a> {
            #[serde(flatten)]
            meta: CurveMetadata<'a>,
            tolerance: f64,
            min_analytic: f64,
            checked: usize,
            passed: bool,
        }
        run.write_json(
            &format!("physics_{}.json", p.name),
            &Summary {
                meta: CurveMetadata::new(&report.sim, p),
                tolerance: run.cfg.physics.tolerance,
                min_analytic: run.cfg.physics.min_analytic,
                checked: report.checked,
                passed: report.passed(),
            },
        )?;
        for c in &report.curve {
            let flag = if c.p_analytic < run.cfg.physics.min_analytic {
                "skip"
            } else if c.rel_err <= run.cfg.physics.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            eprintln!(
                "{} t={:.6} empirical={:.6} analytic={:.6} rel_err={:.4} {flag}",
                p.name, c.t, c.p_empirical, c.p_analytic, c.rel_err
            );
        }
        breaches.extend(report.breaches.iter().map(|c| format!("{} t={} rel_err={:.4}", p.name, c.t, c.rel_err)));
    }
    Ok((!breaches.is_empty()).then(|| format!("relative error above tolerance: {}", breaches.join("; "))))
}

fn cmd_sim_sir(run: &mut Run) -> Result<Option<String>> {
    let w = SymbolSequence::new(run.cfg.sir.symbols.clone())?;
    for p in &run.cfg.channels {
        let trace = sir_trace(p, &w, run.cfg.sir.dt)?;
        run.write_with(&format!("sir_{}.csv", p.name), |out| write_sir_csv(out, &trace))?;
        let slots = slot_sir_summary(p, &w, &trace)?;
        let quiet = p.clone().with_sigma_n(0.0);
        let t_obs = p.observation_time();
        let quiet_sir: Vec<f64> = (0..w.len()).map(|j| sir_at(&quiet, &w, j, t_obs)).collect::<Result<_>>()?;
        run.write_with(&format!("sir_{}_slots.csv", p.name), |out| {
            writeln!(out, "slot,sir_at_observation,sir_max,sir_at_observation_noiseless")?;
            for (s, q) in slots.iter().zip(&quiet_sir) {
                writeln!(out, "{},{},{},{}", s.slot, s.at_observation, s.max, q)?;
            }
            Ok(())
        })?;
        let last = slots.last().map_or(0.0, |s| s.at_observation);
        eprintln!("{}: {} points, final-slot SIR at observation {:.3}", p.name, trace.len(), last);
    }
    Ok(None)
}

fn cmd_gen_data(run: &mut Run) -> Result<Option<String>> {
    let (train, test) = toy_split(run.cfg.seed, &run.cfg.data)?;
    run.write("train.msds", &train.to_bytes())?;
    run.write("test.msds", &test.to_bytes())?;
    eprintln!("{} train / {} test images", train.len(), test.len());
    Ok(None)
}

fn cmd_fit_channel(run: &mut Run) -> Result<Option<String>> {
    let p = run.single_channel()?.clone();
    let seed = point_seed(run.cfg.seed, p.n_m);
    let fit = fit_channel(seed, &p, &run.cfg.experiment.surrogate)?;
    let all: Vec<_> = fit.validation_pairs.iter().chain(&fit.train_pairs).copied().collect();
    run.write_with("pairs.csv", |w| write_pairs_csv(w, &all))?;
    run.write("surrogate.ck", &fit.surrogate.to_checkpoint().to_bytes())?;
    run.write_with("surrogate_history.csv", |w| {
        writeln!(w, "epoch,train_nll,validation_nll")?;
        for h in &fit.history {
            writeln!(w, "{},{},{}", h.epoch, h.train, h.validation)?;
        }
        Ok(())
    })?;
    let report = surrogate_fidelity(seed, &p, &fit, &run.cfg.fidelity)?;
    run.write_with("surrogate_fidelity.csv", |w| {
        writeln!(w, "bucket,w_low,w_high,sim_mean,surrogate_mean,rel_err,sim_variance,surrogate_variance")?;
        for b in &report.buckets {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                b.bucket, b.w_low, b.w_high, b.sim_mean, b.surrogate_mean, b.rel_err, b.sim_variance, b.surrogate_variance
            )?;
        }
        Ok(())
    })?;
    eprintln!(
        "held-out NLL {:.4} (moment-matched Gaussian {:.4}); worst bucket mean error {:.2}%",
        report.surrogate_nll,
        report.gaussian_nll,
        100.0 * report.max_mean_rel_err()
    );
    Ok(None)
}

fn cmd_train(run: &mut Run) -> Result<Option<String>> {
    let ck = run.checkpoint(&run.cfg.inputs.surrogate.clone(), "surrogate")?;
    let surrogate = ChannelSurrogate::from_checkpoint(&ck)?;
    let train = run.dataset("train.msds")?;
    let exp = &run.cfg.experiment;
    let n_m = surrogate.channel.as_ref().map_or(0, |c| c.n_m);
    let seed = point_seed(run.cfg.seed, n_m);
    let outcome = train_end_to_end(seed, &train, &surrogate, &exp.train)?;
    let clf = train_baseline(run.cfg.seed, &train, exp)?;
    run.write("model.ck", &outcome.model.to_checkpoint().to_bytes())?;
    run.write("classifier.ck", &clf.to_checkpoint().to_bytes())?;
    run.write_with("training_history.csv", |w| {
        writeln!(w, "epoch,train_loss,train_accuracy,validation_loss,validation_accuracy")?;
        for h in &outcome.history {
            writeln!(
                w,
                "{},{},{},{},{}",
                h.epoch, h.train_loss, h.train_accuracy, h.validation_loss, h.validation_accuracy
            )?;
        }
        Ok(())
    })?;
    let last = outcome.history.last().expect("history has the initial entry");
    eprintln!(
        "trained {} epochs; validation accuracy {:.3}; BCR {}",
        last.epoch,
        last.validation_accuracy,
        report_bcr(outcome.model.k, InputShape::of(&train))
    );
    Ok(None)
}

fn cmd_eval(run: &mut Run) -> Result<Option<String>> {
    let p = run.single_channel()?.clone();
    let model = SemanticModel::from_checkpoint(&run.checkpoint(&run.cfg.inputs.model.clone(), "model")?)?;
    let clf = match run.cfg.inputs.classifier.clone() {
        Some(path) => Some(BaselineClassifier::from_checkpoint(&run.checkpoint(&Some(path), "classifier")?)?),
        None => None,
    };
    let test = run.dataset("test.msds")?;
    let seed = point_seed(run.cfg.seed, p.n_m);
    let trials = run.cfg.experiment.n_trials;
    let semantic = evaluate_accuracy(seed, &model, Link::Simulator(&p), &test, trials)?;
    let mut rows = Vec::new();
    let baseline = match &clf {
        Some(c) => {
            let a = baseline_evaluate(seed, c, &p, &test, trials)?;
            eprintln!("baseline clean-reconstruction accuracy {:.3}", clean_accuracy(c, &test)?.accuracy);
            Some(a)
        }
        None => None,
    };
    run.write_with("metrics.csv", |w| {
        writeln!(w, "n_m,method,accuracy,ci_low,ci_high")?;
        rows.push(("semantic", semantic));
        rows.extend(baseline.map(|b| ("baseline", b)));
        for (m, a) in &rows {
            writeln!(w, "{},{m},{},{},{}", p.n_m, a.accuracy, a.ci_low, a.ci_high)?;
        }
        Ok(())
    })?;
    for (m, a) in &rows {
        eprintln!("{m}: {:.3} [{:.3}, {:.3}]", a.accuracy, a.ci_low, a.ci_high);
    }
    Ok(None)
}

fn cmd_sweep(run: &mut Run) -> Result<Option<String>> {
    let p = run.single_channel()?.clone();
    let (train, test) = if run.cfg.inputs.data.is_some() {
        (run.dataset("train.msds")?, run.dataset("test.msds")?)
    } else {
        toy_split(run.cfg.seed, &run.cfg.data)?
    };
    let rows: Vec<PointResult> = sweep(run.cfg.seed, &p, &run.cfg.sweep_n_m, &train, &test, &run.cfg.experiment)?;
    run.write_with("metrics.csv", |w| write_metrics_csv(w, &rows))?;
    for r in &rows {
        eprintln!("n_m={} semantic {:.3} baseline {:.3}", r.n_m, r.semantic.accuracy, r.baseline.accuracy);
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("molsem").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn git_style_hash() {
        // `git hash-object --object-format=sha256` of an empty file.
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn defaults_and_overrides() {
        let (cfg, out) = resolve(&parse(&["validate-physics"])).unwrap();
        assert_eq!(cfg.channels.len(), 2);
        assert_eq!(out, PathBuf::from("out"));
        let (cfg, _) = resolve(&parse(&["fit-channel", "--n-m", "4000", "--seed", "9"])).unwrap();
        assert_eq!(cfg.channels.len(), 1);
        assert_eq!(cfg.channels[0].n_m, 4000);
        assert_eq!(cfg.seed, 9);
        let (cfg, _) = resolve(&parse(&["sweep", "--n-m", "100,2000"])).unwrap();
        assert_eq!(cfg.sweep_n_m, vec![100, 2000]);
        assert_eq!(cfg.channels[0].n_m, 20_000);
        assert!(matches!(
            resolve(&parse(&["eval", "--n-m", "1,2"])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_scenario_is_a_usage_error() {
        let e = resolve(&parse(&["sim-sir", "--scenario", "scenario9"])).unwrap_err();
        assert!(matches!(e, Error::UnknownScenario(_)));
        assert_eq!(exit_code(&e), EXIT_USAGE);
    }

    #[test]
    fn config_file_and_scenario_file() {
        let dir = tempfile::tempdir().unwrap();
        let scen = dir.path().join("s.toml");
        let mut p = ChannelParams::scenario1();
        p.name = "mine".into();
        p.sigma_n = 3.0;
        fs::write(&scen, p.to_toml()).unwrap();
        let conf = dir.path().join("run.toml");
        fs::write(&conf, "seed = 42\n[sir]\ndt = 0.5\n[experiment]\nn_trials = 7\n").unwrap();
        let (cfg, _) = resolve(&parse(&[
            "sim-sir",
            "--config",
            conf.to_str().unwrap(),
            "--scenario",
            scen.to_str().unwrap(),
        ]))
        .unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.sir.dt, 0.5);
        assert_eq!(cfg.experiment.n_trials, 7);
        assert_eq!(cfg.experiment.train, Default::default());
        assert_eq!(cfg.channels, vec![p]);
        fs::write(&conf, "[experiment.codec]\nds = 2\n").unwrap();
        assert!(matches!(
            resolve(&parse(&["sim-sir", "--config", conf.to_str().unwrap()])),
            Err(Error::Config(_))
        ));
        fs::write(&conf, "seed = \"x\"").unwrap();
        assert!(matches!(
            resolve(&parse(&["sim-sir", "--config", conf.to_str().unwrap()])),
            Err(Error::Config(_))
        ));
    }
}
