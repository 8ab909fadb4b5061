//! Command-line surface: run configuration (JSON file plus flag overrides),
//! subcommand dispatch, and deterministic CSV/JSON serialization of
//! trajectories, maps, scans, and cycle searches.
//!
//! Identical resolved configs write byte-identical CSV on one platform;
//! every run also emits a manifest whose embedded config can be fed back
//! through `--config` to reproduce the outputs.

use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bifurcation::{
    attractor_classify, default_probe_states, equilibrium_spectrum, hopf_scan, lyapunov_l1,
    ScanParam,
};
use crate::cycle::{classify_j3, default_section, find_singular_cycle, SectionJ1};
use crate::entry_exit::{sir_exit_point, sirws_exit_point};
use crate::error::{Error, Result};
use crate::maps::pi1_map;
use crate::model::{ModelKind, ModelParams, SystemState, TimeFrame};
use crate::orbit::{
    integrate, peak_sequences, singular_orbit, CrossingDirection, EventSpec, IntegratorConfig,
    OrbitSegment,
};

/// Fully resolved run description; serializable so a manifest can replay it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub params: ModelParams,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub threads: Option<usize>,
    pub command: CommandConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum CommandConfig {
    Simulate(SimulateOpts),
    EntryExit(EntryExitOpts),
    Peaks(PeaksOpts),
    SingularOrbit(SingularOrbitOpts),
    ClassifyJ3(ClassifyJ3Opts),
    FindCycle(FindCycleOpts),
    HopfScan(HopfScanOpts),
    ClassifyAttractor(ClassifyAttractorOpts),
    Sweep(SweepOpts),
}

impl CommandConfig {
    fn name(&self) -> &'static str {
        match self {
            CommandConfig::Simulate(_) => "simulate",
            CommandConfig::EntryExit(_) => "entry-exit",
            CommandConfig::Peaks(_) => "peaks",
            CommandConfig::SingularOrbit(_) => "singular-orbit",
            CommandConfig::ClassifyJ3(_) => "classify-j3",
            CommandConfig::FindCycle(_) => "find-cycle",
            CommandConfig::HopfScan(_) => "hopf-scan",
            CommandConfig::ClassifyAttractor(_) => "classify-attractor",
            CommandConfig::Sweep(_) => "sweep",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct SimulateOpts {
    /// Initial susceptible fraction.
    #[arg(long)]
    pub s0: Option<f64>,
    /// Initial infected fraction.
    #[arg(long)]
    pub i0: Option<f64>,
    /// Initial weakly-immune fraction (SIRWS).
    #[arg(long)]
    pub w0: Option<f64>,
    /// Integration frame: fast or slow.
    #[arg(long)]
    pub frame: Option<TimeFrame>,
    /// Integration horizon in the chosen frame.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long)]
    pub abs_tol: Option<f64>,
    #[arg(long)]
    pub max_step: Option<f64>,
    /// I level below which the logarithmic chart is used.
    #[arg(long)]
    pub log_switch_threshold: Option<f64>,
    /// Record crossings of this I level (any direction).
    #[arg(long)]
    pub event_i_level: Option<f64>,
    /// Record crossings of this S level (any direction).
    #[arg(long)]
    pub event_s_level: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct EntryExitOpts {
    /// Landing point (SIR/SIRS); exit solves the explicit root equation.
    #[arg(long)]
    pub p0: Option<f64>,
    /// Launch point; the landing point is computed first when given.
    #[arg(long)]
    pub s0: Option<f64>,
    /// Uniform p0 grid (SIR/SIRS): start.
    #[arg(long)]
    pub p0_from: Option<f64>,
    /// Uniform p0 grid: end.
    #[arg(long)]
    pub p0_to: Option<f64>,
    /// Uniform p0 grid: number of points.
    #[arg(long)]
    pub p0_steps: Option<usize>,
    /// SIRWS entry S on the critical manifold.
    #[arg(long)]
    pub s_inf: Option<f64>,
    /// SIRWS entry W on the critical manifold.
    #[arg(long)]
    pub w_inf: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct PeaksOpts {
    #[arg(long)]
    pub s0: Option<f64>,
    /// Number of map iterations.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct SingularOrbitOpts {
    #[arg(long)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub loops: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ClassifyJ3Opts {
    /// Section S coordinate; defaults to the singular-attractor launch point.
    #[arg(long)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub w_lo: Option<f64>,
    #[arg(long)]
    pub w_hi: Option<f64>,
    #[arg(long)]
    pub grid_n: Option<usize>,
    /// Birth/death rates to classify; defaults to the configured xi.
    #[arg(long = "xi-value")]
    #[serde(default)]
    pub xi_values: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct FindCycleOpts {
    #[arg(long)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub w_lo: Option<f64>,
    #[arg(long)]
    pub w_hi: Option<f64>,
    #[arg(long)]
    pub xi_lo: Option<f64>,
    #[arg(long)]
    pub xi_hi: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct HopfScanOpts {
    /// Parameter axis: beta, gamma, xi, kappa, nu, delta, epsilon.
    #[arg(long)]
    pub param: Option<ScanParam>,
    #[arg(long)]
    pub from: Option<f64>,
    #[arg(long)]
    pub to: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ClassifyAttractorOpts {
    /// Initial conditions as "s,i" or "s,i,w"; repeatable. Defaults to a
    /// near-equilibrium probe plus a far one.
    #[arg(long = "ic")]
    #[serde(default)]
    pub ics: Vec<String>,
    /// Slow-time horizon.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub transient_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct SweepOpts {
    #[arg(long)]
    pub param: Option<ScanParam>,
    #[arg(long)]
    pub from: Option<f64>,
    #[arg(long)]
    pub to: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// What to evaluate per grid point: spectrum or attractor.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub transient_fraction: Option<f64>,
}

/// Command-line interface. Flags override config-file values; the
/// subcommand on the command line selects what runs.
#[derive(Debug, Parser)]
#[command(
    name = "fastslow-epi",
    version,
    about = "Fast-slow SIR/SIRS/SIRWS epidemic models: maps, orbits, and scans"
)]
pub struct Cli {
    /// JSON run configuration (a previous run's manifest also works).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model kind: sir, sirs, or sirws.
    #[arg(long, global = true)]
    pub model: Option<ModelKind>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub xi: Option<f64>,
    #[arg(long, global = true)]
    pub kappa: Option<f64>,
    #[arg(long, global = true)]
    pub nu: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Time-scale ratio.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Output directory for CSV files and the manifest.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweep/scan fan-out (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Option<CliCommand>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Integrate a trajectory and dump time,S,I[,W],event rows.
    Simulate(SimulateOpts),
    /// Entry-exit maps: explicit SIR/SIRS exit roots or SIRWS exit times.
    EntryExit(EntryExitOpts),
    /// Monotone excursion-peak sequences S_k, P_k.
    Peaks(PeaksOpts),
    /// Piecewise fast/slow singular orbit segments.
    SingularOrbit(SingularOrbitOpts),
    /// Position of the candidate-map image relative to the section.
    ClassifyJ3(ClassifyJ3Opts),
    /// Bracketing search for a singular-cycle parameter value.
    FindCycle(FindCycleOpts),
    /// One-parameter Hopf scan of the endemic equilibrium.
    HopfScan(HopfScanOpts),
    /// Simulation-based attractor label at the configured parameters.
    ClassifyAttractor(ClassifyAttractorOpts),
    /// Generic one-parameter grid runner.
    Sweep(SweepOpts),
}

impl From<CliCommand> for CommandConfig {
    fn from(c: CliCommand) -> Self {
        match c {
            CliCommand::Simulate(o) => CommandConfig::Simulate(o),
            CliCommand::EntryExit(o) => CommandConfig::EntryExit(o),
            CliCommand::Peaks(o) => CommandConfig::Peaks(o),
            CliCommand::SingularOrbit(o) => CommandConfig::SingularOrbit(o),
            CliCommand::ClassifyJ3(o) => CommandConfig::ClassifyJ3(o),
            CliCommand::FindCycle(o) => CommandConfig::FindCycle(o),
            CliCommand::HopfScan(o) => CommandConfig::HopfScan(o),
            CliCommand::ClassifyAttractor(o) => CommandConfig::ClassifyAttractor(o),
            CliCommand::Sweep(o) => CommandConfig::Sweep(o),
        }
    }
}

/// Entry point used by the binary: parse, run, map errors to exit codes
/// (0 success, 2 config, 3 numerical).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Some(n) = cfg.threads {
        // a new pool per process; repeated initialization in tests is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    execute(&cfg)
}

fn resolve_config(cli: Cli) -> Result<RunConfig> {
    let file_cfg: Option<RunConfig> = match &cli.config {
        None => None,
        Some(path) => Some(load_config(path)?),
    };

    let model = cli
        .model
        .or(file_cfg.as_ref().map(|c| c.model))
        .ok_or_else(|| Error::Config("no model given (use --model or a config file)".into()))?;

    let mut params = file_cfg
        .as_ref()
        .map(|c| c.params)
        .unwrap_or(ModelParams { beta: 0.0, gamma: 0.0, xi: 0.0, kappa: 0.0, nu: 0.0, delta: 0.0, epsilon: 1.0 });
    if let Some(v) = cli.beta {
        params.beta = v;
    }
    if let Some(v) = cli.gamma {
        params.gamma = v;
    }
    if let Some(v) = cli.xi {
        params.xi = v;
    }
    if let Some(v) = cli.kappa {
        params.kappa = v;
    }
    if let Some(v) = cli.nu {
        params.nu = v;
    }
    if let Some(v) = cli.delta {
        params.delta = v;
    }
    if let Some(v) = cli.epsilon {
        params.epsilon = v;
    }
    params
        .validate(model)
        .map_err(|e| Error::Config(e.to_string()))?;

    let command = match (cli.command, file_cfg.as_ref().map(|c| c.command.clone())) {
        (Some(c), Some(file_cmd)) => merge_commands(c.into(), file_cmd),
        (Some(c), None) => c.into(),
        (None, Some(f)) => f,
        (None, None) => {
            return Err(Error::Config(
                "no command given (use a subcommand or a config file)".into(),
            ))
        }
    };

    Ok(RunConfig {
        model,
        params,
        out_dir: cli
            .out
            .or(file_cfg.as_ref().map(|c| c.out_dir.clone()))
            .unwrap_or_else(default_out_dir),
        threads: cli.threads.or(file_cfg.as_ref().and_then(|c| c.threads)),
        command,
    })
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // a manifest wraps the config under "config"
    let cfg_value = match value.get("config") {
        Some(inner) if inner.get("model").is_some() => inner.clone(),
        _ => value,
    };
    serde_json::from_value(cfg_value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// CLI flags override file values field-by-field when the same subcommand
/// appears in both places; a different file command is replaced outright.
fn merge_commands(cli: CommandConfig, file: CommandConfig) -> CommandConfig {
    macro_rules! merge_opt {
        ($c:expr, $f:expr; $($field:ident),+) => {{
            let mut out = $f.clone();
            $(if $c.$field.is_some() { out.$field = $c.$field.clone(); })+
            out
        }};
    }
    match (cli, file) {
        (CommandConfig::Simulate(c), CommandConfig::Simulate(f)) => CommandConfig::Simulate(
            merge_opt!(c, f; s0, i0, w0, frame, horizon, rel_tol, abs_tol, max_step,
                       log_switch_threshold, event_i_level, event_s_level),
        ),
        (CommandConfig::EntryExit(c), CommandConfig::EntryExit(f)) => CommandConfig::EntryExit(
            merge_opt!(c, f; p0, s0, p0_from, p0_to, p0_steps, s_inf, w_inf),
        ),
        (CommandConfig::Peaks(c), CommandConfig::Peaks(f)) => {
            CommandConfig::Peaks(merge_opt!(c, f; s0, n))
        }
        (CommandConfig::SingularOrbit(c), CommandConfig::SingularOrbit(f)) => {
            CommandConfig::SingularOrbit(merge_opt!(c, f; s0, loops))
        }
        (CommandConfig::ClassifyJ3(c), CommandConfig::ClassifyJ3(f)) => {
            let mut out = merge_opt!(c, f; s0, w_lo, w_hi, grid_n);
            if !c.xi_values.is_empty() {
                out.xi_values = c.xi_values;
            }
            CommandConfig::ClassifyJ3(out)
        }
        (CommandConfig::FindCycle(c), CommandConfig::FindCycle(f)) => {
            CommandConfig::FindCycle(merge_opt!(c, f; s0, w_lo, w_hi, xi_lo, xi_hi))
        }
        (CommandConfig::HopfScan(c), CommandConfig::HopfScan(f)) => {
            CommandConfig::HopfScan(merge_opt!(c, f; param, from, to, steps))
        }
        (CommandConfig::ClassifyAttractor(c), CommandConfig::ClassifyAttractor(f)) => {
            let mut out = merge_opt!(c, f; horizon, transient_fraction);
            if !c.ics.is_empty() {
                out.ics = c.ics;
            }
            CommandConfig::ClassifyAttractor(out)
        }
        (CommandConfig::Sweep(c), CommandConfig::Sweep(f)) => CommandConfig::Sweep(
            merge_opt!(c, f; param, from, to, steps, task, horizon, transient_fraction),
        ),
        // different subcommands: the command line wins
        (c, _) => c,
    }
}

/// Run one resolved configuration: write the command's CSV outputs plus a
/// JSON manifest into the output directory.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let start = Instant::now();
    let (outputs, summary) = dispatch(cfg)?;
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": cfg.command.name(),
        "config": cfg,
        "wall_clock_seconds": start.elapsed().as_secs_f64(),
        "summary": summary,
        "outputs": outputs,
    });
    let path = cfg.out_dir.join("manifest.json");
    let mut f = BufWriter::new(fs::File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    f.write_all(b"\n")?;
    Ok(())
}

fn dispatch(cfg: &RunConfig) -> Result<(Vec<String>, Value)> {
    match &cfg.command {
        CommandConfig::Simulate(o) => cmd_simulate(cfg, o),
        CommandConfig::EntryExit(o) => cmd_entry_exit(cfg, o),
        CommandConfig::Peaks(o) => cmd_peaks(cfg, o),
        CommandConfig::SingularOrbit(o) => cmd_singular_orbit(cfg, o),
        CommandConfig::ClassifyJ3(o) => cmd_classify_j3(cfg, o),
        CommandConfig::FindCycle(o) => cmd_find_cycle(cfg, o),
        CommandConfig::HopfScan(o) => cmd_hopf_scan(cfg, o),
        CommandConfig::ClassifyAttractor(o) => cmd_classify_attractor(cfg, o),
        CommandConfig::Sweep(o) => cmd_sweep(cfg, o),
    }
}

struct Csv {
    out: BufWriter<fs::File>,
    name: String,
}

impl Csv {
    fn create(dir: &Path, name: &str, header: &str) -> Result<Self> {
        let path = dir.join(name);
        let mut out = BufWriter::new(fs::File::create(&path)?);
        writeln!(out, "{header}")?;
        Ok(Self { out, name: name.to_string() })
    }

    fn row(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.out, "{}", cells.join(","))?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn cmd_simulate(cfg: &RunConfig, o: &SimulateOpts) -> Result<(Vec<String>, Value)> {
    let kind = cfg.model;
    let x0 = SystemState {
        s: o.s0.unwrap_or(0.9),
        i: o.i0.unwrap_or(1e-4),
        w: o.w0.unwrap_or(0.0),
    };
    let frame = o.frame.unwrap_or(TimeFrame::Fast);
    let icfg = IntegratorConfig {
        rel_tol: o.rel_tol.unwrap_or(1e-8),
        abs_tol: o.abs_tol.unwrap_or(1e-10),
        max_step: o.max_step.unwrap_or(f64::INFINITY),
        horizon: o.horizon.unwrap_or(100.0),
        log_switch_threshold: o.log_switch_threshold,
    };
    let mut events = Vec::new();
    if let Some(level) = o.event_i_level {
        events.push(EventSpec::i_crossing(level, CrossingDirection::Any));
    }
    if let Some(level) = o.event_s_level {
        events.push(EventSpec::s_crossing(level, CrossingDirection::Any));
    }
    let traj = integrate(kind, &cfg.params, x0, frame, &icfg, &events)?;

    let time_col = match frame {
        TimeFrame::Fast => "t_fast",
        TimeFrame::Slow => "t_slow",
    };
    let header = if kind.has_w() {
        format!("{time_col},S,I,W,event")
    } else {
        format!("{time_col},S,I,event")
    };
    let mut csv = Csv::create(&cfg.out_dir, "simulate.csv", &header)?;
    // merge samples and located events in time order
    let mut ev_iter = traj.events.iter().peekable();
    for (t, x) in traj.times.iter().zip(&traj.states) {
        while let Some(ev) = ev_iter.peek() {
            if ev.time < *t {
                write_state_row(&mut csv, kind, ev.time, &ev.state, event_label(&ev.spec))?;
                ev_iter.next();
            } else {
                break;
            }
        }
        write_state_row(&mut csv, kind, *t, x, String::new())?;
    }
    for ev in ev_iter {
        write_state_row(&mut csv, kind, ev.time, &ev.state, event_label(&ev.spec))?;
    }
    let summary = json!({
        "samples": traj.times.len(),
        "events": traj.events.len(),
        "final_time": traj.last_time(),
        "final_state": traj.last_state(),
    });
    Ok((vec![csv.name], summary))
}

fn event_label(spec: &EventSpec) -> String {
    use crate::orbit::EventKind::*;
    let kind = match spec.kind {
        ICrossing { .. } => "i-crossing",
        SCrossing { .. } => "s-crossing",
        NullclineCrossing => "nullcline",
        TubeExit { .. } => "tube-exit",
    };
    kind.to_string()
}

fn write_state_row(
    csv: &mut Csv,
    kind: ModelKind,
    t: f64,
    x: &SystemState,
    event: String,
) -> Result<()> {
    if kind.has_w() {
        csv.row(&[num(t), num(x.s), num(x.i), num(x.w), event])
    } else {
        csv.row(&[num(t), num(x.s), num(x.i), event])
    }
}

fn cmd_entry_exit(cfg: &RunConfig, o: &EntryExitOpts) -> Result<(Vec<String>, Value)> {
    let p = &cfg.params;
    match cfg.model {
        ModelKind::Sir | ModelKind::Sirs => {
            let mut rows: Vec<f64> = Vec::new();
            if let (Some(a), Some(b), Some(n)) = (o.p0_from, o.p0_to, o.p0_steps) {
                if n < 2 {
                    return Err(Error::Config("p0_steps must be at least 2".into()));
                }
                for k in 0..n {
                    rows.push(a + (b - a) * (k as f64) / ((n - 1) as f64));
                }
            } else if let Some(p0) = o.p0 {
                rows.push(p0);
            } else if let Some(s0) = o.s0 {
                rows.push(pi1_map(p, s0, 0.0)?);
            } else {
                return Err(Error::Config(
                    "entry-exit needs --p0, --s0, or a --p0-from/--p0-to/--p0-steps grid".into(),
                ));
            }
            let mut csv = Csv::create(&cfg.out_dir, "entry_exit.csv", "p0,exit_s,residual")?;
            let mut last = None;
            for p0 in &rows {
                let s1 = sir_exit_point(p, *p0)?;
                let turn = 1.0 / p.r0();
                let residual =
                    (s1 - p0 + (1.0 - turn) * ((1.0 - s1) / (1.0 - p0)).ln()).abs();
                csv.row(&[num(*p0), num(s1), num(residual)])?;
                last = Some((s1, residual));
            }
            let summary = json!({ "rows": rows.len(), "last_exit": last.map(|v| v.0) });
            Ok((vec![csv.name], summary))
        }
        ModelKind::Sirws => {
            let s_inf = o.s_inf.ok_or_else(|| {
                Error::Config("entry-exit for sirws needs --s-inf and --w-inf".into())
            })?;
            let w_inf = o.w_inf.ok_or_else(|| {
                Error::Config("entry-exit for sirws needs --s-inf and --w-inf".into())
            })?;
            let sol = sirws_exit_point(p, s_inf, w_inf)?;
            let mut csv = Csv::create(
                &cfg.out_dir,
                "entry_exit.csv",
                "s_inf,w_inf,exit_time_slow,exit_s,exit_w,residual",
            )?;
            csv.row(&[
                num(s_inf),
                num(w_inf),
                num(sol.exit_time.unwrap_or(f64::NAN)),
                num(sol.exit.s),
                num(sol.exit.w),
                num(sol.residual),
            ])?;
            let summary = json!({
                "exit_time": sol.exit_time,
                "exit": { "s": sol.exit.s, "w": sol.exit.w },
                "residual": sol.residual,
            });
            Ok((vec![csv.name], summary))
        }
    }
}

fn cmd_peaks(cfg: &RunConfig, o: &PeaksOpts) -> Result<(Vec<String>, Value)> {
    let s0 = o.s0.unwrap_or(0.9);
    let n = o.n.unwrap_or(50);
    let (s_seq, p_seq) = peak_sequences(&cfg.params, s0, n)?;
    let mut csv = Csv::create(&cfg.out_dir, "peaks.csv", "k,s_k,p_k")?;
    for (k, (s, pp)) in s_seq.iter().zip(&p_seq).enumerate() {
        csv.row(&[k.to_string(), num(*s), num(*pp)])?;
    }
    let turn = 1.0 / cfg.params.r0();
    let summary = json!({
        "iterations": n,
        "turning_point": turn,
        "final_s_gap": s_seq.last().unwrap() - turn,
        "final_p_gap": turn - p_seq.last().unwrap(),
    });
    Ok((vec![csv.name], summary))
}

fn cmd_singular_orbit(cfg: &RunConfig, o: &SingularOrbitOpts) -> Result<(Vec<String>, Value)> {
    let s0 = o.s0.unwrap_or(0.9);
    let loops = o.loops.unwrap_or(2);
    let orbit = singular_orbit(&cfg.params, s0, loops)?;
    let mut csv = Csv::create(
        &cfg.out_dir,
        "singular_orbit.csv",
        "segment,type,s_start,s_end,gamma_level,duration_slow",
    )?;
    for (k, seg) in orbit.segments.iter().enumerate() {
        match *seg {
            OrbitSegment::Fast { s_start, s_end, level } => csv.row(&[
                k.to_string(),
                "fast".into(),
                num(s_start),
                num(s_end),
                num(level.0),
                String::new(),
            ])?,
            OrbitSegment::Slow { s_start, s_end, duration } => csv.row(&[
                k.to_string(),
                "slow".into(),
                num(s_start),
                num(s_end),
                String::new(),
                num(duration),
            ])?,
        }
    }
    let total_slow: f64 = orbit
        .segments
        .iter()
        .map(|s| match s {
            OrbitSegment::Slow { duration, .. } => *duration,
            _ => 0.0,
        })
        .sum();
    let summary = json!({ "segments": orbit.segments.len(), "total_slow_time": total_slow });
    Ok((vec![csv.name], summary))
}

fn section_from(cfg: &RunConfig, s0: Option<f64>, w_lo: Option<f64>, w_hi: Option<f64>) -> Result<SectionJ1> {
    match s0 {
        Some(s0) => match (w_lo, w_hi) {
            (Some(lo), Some(hi)) => SectionJ1::new(&cfg.params, s0, lo, hi),
            _ => SectionJ1::spanning(&cfg.params, s0),
        },
        None => default_section(&cfg.params),
    }
}

fn cmd_classify_j3(cfg: &RunConfig, o: &ClassifyJ3Opts) -> Result<(Vec<String>, Value)> {
    if cfg.model != ModelKind::Sirws {
        return Err(Error::Config("classify-j3 applies to the sirws model".into()));
    }
    let j1 = section_from(cfg, o.s0, o.w_lo, o.w_hi)?;
    let grid_n = o.grid_n.unwrap_or(32);
    let xis = if o.xi_values.is_empty() {
        vec![cfg.params.xi]
    } else {
        o.xi_values.clone()
    };
    let mut csv = Csv::create(
        &cfg.out_dir,
        "classify_j3.csv",
        "xi,position,s0,w_lo,w_hi,d_first,d_last",
    )?;
    let mut samples_csv =
        Csv::create(&cfg.out_dir, "classify_j3_samples.csv", "xi,w,s_exit,w_exit")?;
    let mut labels = Vec::new();
    for xi in &xis {
        let p = ModelParams { xi: *xi, ..cfg.params };
        let class = classify_j3(&p, &j1, grid_n)?;
        let d_first = class.samples.first().unwrap().s_exit - j1.s0;
        let d_last = class.samples.last().unwrap().s_exit - j1.s0;
        csv.row(&[
            num(*xi),
            class.position.to_string(),
            num(j1.s0),
            num(j1.w_lo),
            num(j1.w_hi),
            num(d_first),
            num(d_last),
        ])?;
        for s in &class.samples {
            samples_csv.row(&[num(*xi), num(s.w), num(s.s_exit), num(s.w_exit)])?;
        }
        labels.push(json!({ "xi": xi, "position": class.position.to_string() }));
    }
    let summary = json!({ "section_s0": j1.s0, "labels": labels });
    Ok((vec![csv.name, samples_csv.name], summary))
}

fn cmd_find_cycle(cfg: &RunConfig, o: &FindCycleOpts) -> Result<(Vec<String>, Value)> {
    if cfg.model != ModelKind::Sirws {
        return Err(Error::Config("find-cycle applies to the sirws model".into()));
    }
    let j1 = section_from(cfg, o.s0, o.w_lo, o.w_hi)?;
    let bracket = (o.xi_lo.unwrap_or(0.01), o.xi_hi.unwrap_or(0.015));
    let res = find_singular_cycle(&cfg.params, &j1, bracket)?;
    let mut csv = Csv::create(
        &cfg.out_dir,
        "find_cycle.csv",
        "xi_star,w_star,s0,residual_s,residual_w,class_lo,class_hi",
    )?;
    csv.row(&[
        num(res.xi_star),
        num(res.w_star),
        num(j1.s0),
        num(res.residual_s),
        num(res.residual_w),
        res.bracket_positions.0.to_string(),
        res.bracket_positions.1.to_string(),
    ])?;
    let summary = json!({
        "xi_star": res.xi_star,
        "w_star": res.w_star,
        "residuals": [res.residual_s, res.residual_w],
    });
    Ok((vec![csv.name], summary))
}

fn cmd_hopf_scan(cfg: &RunConfig, o: &HopfScanOpts) -> Result<(Vec<String>, Value)> {
    let param = o.param.unwrap_or(ScanParam::Nu);
    let range = (o.from.unwrap_or(0.5), o.to.unwrap_or(200.0));
    let steps = o.steps.unwrap_or(64);
    let scan = hopf_scan(cfg.model, &cfg.params, param, range, steps)?;
    let mut csv = Csv::create(
        &cfg.out_dir,
        "hopf_scan.csv",
        "param,re_lambda,im_lambda,flag",
    )?;
    for k in 0..steps {
        let v = range.0 + (range.1 - range.0) * (k as f64) / ((steps - 1) as f64);
        let p = param.apply(&cfg.params, v);
        match equilibrium_spectrum(cfg.model, &p) {
            Ok(eigs) => {
                let lead = eigs
                    .iter()
                    .find(|e| e.im > 0.0)
                    .copied()
                    .unwrap_or(eigs[0]);
                csv.row(&[num(v), num(lead.re), num(lead.im), String::new()])?;
            }
            Err(_) => csv.row(&[num(v), String::new(), String::new(), "no-equilibrium".into()])?,
        }
    }
    for pt in &scan.points {
        csv.row(&[
            num(pt.value),
            num(pt.eigenvalue.re),
            num(pt.eigenvalue.im),
            "hopf".into(),
        ])?;
    }
    for (a, b) in &scan.undecided {
        csv.row(&[num(0.5 * (a + b)), String::new(), String::new(), "undecided".into()])?;
    }
    let summary = json!({
        "param": param.name(),
        "hopf_points": scan.points.iter().map(|p| p.value).collect::<Vec<_>>(),
        "undecided": scan.undecided,
    });
    Ok((vec![csv.name], summary))
}

fn parse_ic(kind: ModelKind, text: &str) -> Result<SystemState> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad initial condition `{text}`: {e}")))
        })
        .collect::<Result<_>>()?;
    match (kind.has_w(), parts.len()) {
        (false, 2) => Ok(SystemState::planar(parts[0], parts[1])),
        (true, 3) => Ok(SystemState::sirws(parts[0], parts[1], parts[2])),
        _ => Err(Error::Config(format!(
            "initial condition `{text}` has the wrong arity for {}",
            kind.name()
        ))),
    }
}

fn cmd_classify_attractor(
    cfg: &RunConfig,
    o: &ClassifyAttractorOpts,
) -> Result<(Vec<String>, Value)> {
    let ics = if o.ics.is_empty() {
        default_probe_states(cfg.model, &cfg.params)?
    } else {
        o.ics
            .iter()
            .map(|t| parse_ic(cfg.model, t))
            .collect::<Result<Vec<_>>>()?
    };
    let horizon = o.horizon.unwrap_or(1000.0);
    let transient = o.transient_fraction.unwrap_or(0.5);
    let label = attractor_classify(cfg.model, &cfg.params, &ics, horizon, transient)?;
    let mut csv = Csv::create(
        &cfg.out_dir,
        "classify_attractor.csv",
        "ic,s0,i0,w0,amplitude,tag",
    )?;
    for (k, e) in label.evidence.iter().enumerate() {
        csv.row(&[
            k.to_string(),
            num(e.initial.s),
            num(e.initial.i),
            num(e.initial.w),
            num(e.amplitude),
            e.tag.to_string(),
        ])?;
    }
    csv.row(&[
        "-1".into(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        label.tag.to_string(),
    ])?;
    let summary = json!({
        "tag": label.tag.to_string(),
        "amplitudes": label.evidence.iter().map(|e| e.amplitude).collect::<Vec<_>>(),
    });
    Ok((vec![csv.name], summary))
}

fn cmd_sweep(cfg: &RunConfig, o: &SweepOpts) -> Result<(Vec<String>, Value)> {
    use rayon::prelude::*;
    let param = o.param.unwrap_or(ScanParam::Nu);
    let (from, to) = (
        o.from.ok_or_else(|| Error::Config("sweep needs --from".into()))?,
        o.to.ok_or_else(|| Error::Config("sweep needs --to".into()))?,
    );
    let steps = o.steps.unwrap_or(32);
    if steps < 2 {
        return Err(Error::Config("sweep needs at least 2 steps".into()));
    }
    let task = o.task.clone().unwrap_or_else(|| "spectrum".into());
    let grid: Vec<f64> = (0..steps)
        .map(|k| from + (to - from) * (k as f64) / ((steps - 1) as f64))
        .collect();
    match task.as_str() {
        "spectrum" => {
            let rows: Vec<(f64, Result<Vec<num_complex::Complex64>>)> = grid
                .par_iter()
                .map(|&v| (v, equilibrium_spectrum(cfg.model, &param.apply(&cfg.params, v))))
                .collect();
            let dim = cfg.model.dim();
            let header = match dim {
                2 => "param,re1,im1,re2,im2".to_string(),
                _ => "param,re1,im1,re2,im2,re3,im3".to_string(),
            };
            let mut csv = Csv::create(&cfg.out_dir, "sweep.csv", &header)?;
            let mut failures = 0usize;
            for (v, res) in rows {
                match res {
                    Ok(eigs) => {
                        let mut cells = vec![num(v)];
                        for e in eigs.iter().take(dim) {
                            cells.push(num(e.re));
                            cells.push(num(e.im));
                        }
                        csv.row(&cells)?;
                    }
                    Err(_) => {
                        failures += 1;
                        let empties = 2 * dim;
                        let mut cells = vec![num(v)];
                        cells.extend(std::iter::repeat(String::new()).take(empties));
                        csv.row(&cells)?;
                    }
                }
            }
            let summary = json!({ "task": "spectrum", "rows": grid.len(), "failures": failures });
            Ok((vec![csv.name], summary))
        }
        "attractor" => {
            let horizon = o.horizon.unwrap_or(1000.0);
            let transient = o.transient_fraction.unwrap_or(0.5);
            let rows: Vec<(f64, Result<crate::bifurcation::AttractorLabel>)> = grid
                .par_iter()
                .map(|&v| {
                    let p = param.apply(&cfg.params, v);
                    let label = default_probe_states(cfg.model, &p)
                        .and_then(|ics| attractor_classify(cfg.model, &p, &ics, horizon, transient));
                    (v, label)
                })
                .collect();
            let mut csv = Csv::create(&cfg.out_dir, "sweep.csv", "param,tag,amp_near,amp_far")?;
            let mut tags = Vec::new();
            for (v, res) in rows {
                match res {
                    Ok(label) => {
                        let a0 = label.evidence.first().map(|e| e.amplitude).unwrap_or(f64::NAN);
                        let a1 = label.evidence.get(1).map(|e| e.amplitude).unwrap_or(f64::NAN);
                        csv.row(&[num(v), label.tag.to_string(), num(a0), num(a1)])?;
                        tags.push(json!({ "param": v, "tag": label.tag.to_string() }));
                    }
                    Err(_) => {
                        csv.row(&[num(v), "UNDECIDED".into(), String::new(), String::new()])?;
                        tags.push(json!({ "param": v, "tag": "UNDECIDED" }));
                    }
                }
            }
            let summary = json!({ "task": "attractor", "labels": tags });
            Ok((vec![csv.name], summary))
        }
        other => Err(Error::Config(format!("unknown sweep task `{other}`"))),
    }
}

/// Evaluate the SIR Lyapunov value along stored trajectory states; exposed
/// for reporting and tests.
pub fn lyapunov_along(p: &ModelParams, states: &[SystemState]) -> Result<Vec<f64>> {
    states.iter().map(|x| lyapunov_l1(p, x.s, x.i)).collect()
}
