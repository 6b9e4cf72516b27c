mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use knobtune_core::adapters::{self, ExecManipulator, ExecWorkload, TemplateSpec, TrajectoryStore};
use knobtune_core::analysis::{self, summarize_report};
use knobtune_core::harness::{self, run_tuning, SystemManipulator, TestPlan, WorkloadGenerator};
use knobtune_core::search::{best_so_far, LhsSearch, RandomSearch, Rrs};
use knobtune_core::synth::{self, SyntheticSurface, CATALOG, DEFAULT_GRID_CAP};
use knobtune_core::{
    Direction, HarnessError, Objective, ParameterSpace, RrsParams, Strategy, TuningReport,
};

use config::{Algo, RunConfig, SutConfig};

const EFFECTIVE_CONFIG: &str = "run.json";
const DEFAULT_OBJECTIVE: &str = "throughput";

#[derive(Parser)]
#[command(name = "knobtune", version, about = "Budget-limited configuration tuning for software systems")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tune a system within a test budget.
    Tune(TuneArgs),
    /// Exact grid optimum of a catalog surface.
    Oracle(OracleArgs),
    /// Best-so-far curve and improvement table of a trajectory.
    Report(ReportArgs),
    /// Order two tuned systems by their best objective.
    Compare {
        /// Report of system A (report.json or its run directory).
        a: PathBuf,
        /// Report of system B.
        b: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Find the system or combination that limits performance.
    Bottleneck {
        /// Candidates as ID=REPORT; ids joining systems with '+' are combinations.
        #[arg(required = true, num_args = 2..)]
        candidates: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// List the synthetic surface catalog.
    Surfaces {
        /// Write the space file of this surface.
        #[arg(long, requires = "out")]
        export: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TuneArgs {
    /// Run config file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of tests, baseline included.
    #[arg(long)]
    budget: Option<u64>,
    /// PRNG seed; a fresh one is drawn and recorded when absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    algo: Option<Algo>,
    /// Workload runs per test; the median is kept.
    #[arg(long)]
    repeats: Option<u32>,
    /// Output directory.
    #[arg(long, env = "KNOBTUNE_OUT")]
    out: Option<PathBuf>,
    /// Continue the run recorded in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct OracleArgs {
    surface: String,
    /// Grid points per real dimension.
    #[arg(long)]
    res: Option<usize>,
    /// Largest grid to enumerate.
    #[arg(long, default_value_t = DEFAULT_GRID_CAP)]
    cap: u64,
    /// Also write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// trajectory.jsonl or the run directory holding it.
    trajectory: PathBuf,
    /// Objective metric name, when no report.json sits next to the trajectory.
    #[arg(long)]
    objective: Option<String>,
    /// Metrics where lower is better (repeatable).
    #[arg(long)]
    minimize: Vec<String>,
    /// Best-so-far CSV path [default: best_so_far.csv next to the trajectory].
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Improvement table CSV path.
    #[arg(long)]
    table: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.cmd {
        Cmd::Tune(args) => tune(args),
        Cmd::Oracle(args) => oracle(args),
        Cmd::Report(args) => report(args),
        Cmd::Compare { a, b, json } => compare(&a, &b, json),
        Cmd::Bottleneck { candidates, json } => bottleneck(&candidates, json),
        Cmd::Surfaces { export, out } => surfaces(export, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

// ---------------------------------------------------------------------------
// tune
// ---------------------------------------------------------------------------

/// Flags over environment over config file. On resume the recorded
/// effective config is the base.
fn effective_config(args: &TuneArgs) -> Result<RunConfig> {
    let from_file = args.config.as_deref().map(RunConfig::load).transpose()?;
    let mut cfg = if args.resume {
        let out = args
            .out
            .clone()
            .or_else(|| from_file.as_ref().and_then(|c| c.output_dir.clone()))
            .context("--resume needs --out or a config with output_dir")?;
        let recorded = out.join(EFFECTIVE_CONFIG);
        if recorded.is_file() {
            RunConfig::load(&recorded)?
        } else {
            from_file.context("no recorded run config to resume; pass --config")?
        }
    } else {
        from_file.context("tune needs --config")?
    };
    if let Some(b) = args.budget {
        cfg.budget = Some(b);
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(a) = args.algo {
        if a != cfg.optimizer.algo {
            cfg.optimizer.algo = a;
            cfg.optimizer.params = serde_json::json!({});
        }
    }
    if let Some(r) = args.repeats {
        cfg.repeats = Some(r);
    }
    if let Some(o) = &args.out {
        cfg.output_dir = Some(std::path::absolute(o)?);
    }
    ensure!(cfg.budget.is_some_and(|b| b > 0), "budget must be given and at least 1");
    ensure!(cfg.repeats.unwrap_or(1) > 0, "repeats must be at least 1");
    cfg.output_dir.get_or_insert_with(|| PathBuf::from("knobtune-out"));
    cfg.seed.get_or_insert_with(rand::random);
    cfg.objective.get_or_insert_with(|| Objective::maximize(DEFAULT_OBJECTIVE));
    Ok(cfg)
}

struct Sut {
    space: ParameterSpace,
    manipulator: Box<dyn SystemManipulator>,
    workload: Box<dyn WorkloadGenerator>,
    ready_timeout: Duration,
}

fn build_sut(cfg: &RunConfig, objective: &Objective) -> Result<Sut> {
    match &cfg.sut {
        SutConfig::Synthetic {
            surface,
            noise,
            noise_seed,
        } => {
            let mut surface = SyntheticSurface::by_id(surface)?;
            if *noise > 0.0 {
                surface = surface.with_noise(*noise, *noise_seed);
            }
            let space = surface.space().clone();
            let (m, w) = harness::synthetic_sut(surface, objective.key.clone());
            Ok(Sut {
                space,
                manipulator: Box::new(m),
                workload: Box::new(w),
                ready_timeout: Duration::from_secs_f64(cfg.ready_timeout_secs.unwrap_or(0.0)),
            })
        }
        SutConfig::Exec(exec) => {
            let space_path = cfg.space.as_ref().context("exec SUTs need a space file")?;
            let space = ParameterSpace::load(space_path)?;
            let mut m = ExecManipulator::new(space.clone());
            if let Some(t) = &exec.template {
                let text = fs::read_to_string(&t.path).with_context(|| format!("reading {}", t.path.display()))?;
                m = m.template(
                    TemplateSpec::parse(&text, &t.output, &t.renderers, &space)
                        .with_context(|| format!("template {}", t.path.display()))?,
                );
            }
            if let Some(c) = &exec.restart {
                m = m.restart_cmd(c.clone());
            }
            if let Some(c) = &exec.ready {
                m = m.ready_cmd(c.clone());
            }
            if let Some(c) = &exec.teardown {
                m = m.teardown_cmd(c.clone());
            }
            ensure!(
                exec.parser.rules.iter().any(|r| r.name == objective.key),
                "parser has no rule for objective {:?}",
                objective.key
            );
            let w = ExecWorkload::new(exec.workload.clone(), &exec.parser)?;
            Ok(Sut {
                space,
                manipulator: Box::new(m),
                workload: Box::new(w),
                ready_timeout: Duration::from_secs_f64(cfg.ready_timeout_secs.unwrap_or(120.0)),
            })
        }
    }
}

fn build_strategy(cfg: &RunConfig, space: &ParameterSpace, seed: u64) -> Result<Box<dyn Strategy>> {
    let params = cfg.optimizer.params.clone();
    Ok(match cfg.optimizer.algo {
        Algo::Rrs => {
            let p: RrsParams = serde_json::from_value(params).context("optimizer.params for rrs")?;
            Box::new(Rrs::new(space.dim(), p, seed)?)
        }
        Algo::Random => {
            ensure!(
                params.as_object().is_none_or(|o| o.is_empty()),
                "random search takes no optimizer.params"
            );
            Box::new(RandomSearch::new(space.dim(), seed))
        }
        Algo::Lhs => {
            #[derive(serde::Deserialize)]
            #[serde(deny_unknown_fields)]
            struct LhsParams {
                m: Option<usize>,
            }
            let p: LhsParams = serde_json::from_value(params).context("optimizer.params for lhs")?;
            let m = p.m.unwrap_or(cfg.budget.unwrap_or(1) as usize);
            Box::new(LhsSearch::new(space.clone(), m, seed)?)
        }
    })
}

fn tune(args: TuneArgs) -> Result<()> {
    let cfg = effective_config(&args)?;
    let (budget, seed) = (cfg.budget.unwrap_or(1), cfg.seed.unwrap_or(0));
    let objective = cfg.objective.clone().unwrap_or_else(|| Objective::maximize(DEFAULT_OBJECTIVE));
    let out = cfg.output_dir.clone().unwrap_or_default();
    let mut sut = build_sut(&cfg, &objective)?;
    let space = sut.space.clone();
    let baseline = match &cfg.baseline {
        Some(map) => space.setting_from_json(map)?,
        None => space
            .defaults()
            .context("no baseline given and not every parameter declares a default")?,
    };
    let mut strategy = build_strategy(&cfg, &space, seed)?;

    let (mut store, prior) = if args.resume {
        let (store, rec) = TrajectoryStore::resume(&out)?;
        if rec.dropped_tail {
            warn!("dropped an incomplete trailing record");
        }
        ensure!(
            rec.samples.len() as u64 <= budget,
            "trajectory already holds {} tests, more than the budget {budget}",
            rec.samples.len()
        );
        eprintln!("resuming after {} tests", rec.samples.len());
        (store, rec.samples)
    } else {
        (TrajectoryStore::create(&out)?, Vec::new())
    };
    let cfg_json = serde_json::to_value(&cfg)?;
    fs::write(out.join(EFFECTIVE_CONFIG), serde_json::to_string_pretty(&cfg_json)? + "\n")
        .with_context(|| format!("writing {}", out.join(EFFECTIVE_CONFIG).display()))?;
    info!("seed {seed}, budget {budget}, output {}", out.display());

    let plan = TestPlan {
        objective,
        repeats: cfg.repeats.unwrap_or(1),
        ready_timeout: sut.ready_timeout,
    };
    let result = run_tuning(
        &space,
        strategy.as_mut(),
        sut.manipulator.as_mut(),
        sut.workload.as_mut(),
        &plan,
        budget,
        &baseline,
        seed,
        Some(&mut store),
        prior,
    );
    match result {
        Ok(mut report) => {
            report.config = Some(cfg_json);
            store.write_report(&report, &space)?;
            print_outcome(&report, &space, &out);
            Ok(())
        }
        Err(HarnessError::Aborted { cause, mut partial }) => {
            partial.config = Some(cfg_json);
            store.write_report(&partial, &space)?;
            bail!("{cause}; partial results after {} tests in {}", partial.consumed(), out.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn print_outcome(report: &TuningReport, space: &ParameterSpace, out: &Path) {
    let dir = report.objective.direction;
    let raw = |m: Option<f64>| m.map(|m| dir.normalize(m));
    println!("tests: {} of {}", report.consumed(), report.budget);
    println!("seed: {}", report.seed);
    if let Some(b) = raw(report.baseline.metric) {
        println!("baseline {}: {b}", report.objective.key);
    }
    if let Some(b) = raw(report.best.metric) {
        println!("best {}: {b} (test {})", report.objective.key, report.best.test_index);
    }
    for (name, v) in space.names().zip(report.best.setting.values()) {
        println!("  {name} = {v}");
    }
    match report.improvement_ratio {
        Some(r) => println!("improvement ratio: {r:.4}"),
        None => println!("improvement ratio: undefined"),
    }
    println!("results: {}", out.display());
}

// ---------------------------------------------------------------------------
// oracle / surfaces
// ---------------------------------------------------------------------------

fn oracle(args: OracleArgs) -> Result<()> {
    let surface = SyntheticSurface::by_id(&args.surface)?;
    let res = args.res.unwrap_or_else(|| surface.default_resolution());
    let r = synth::brute_force(&surface, res, args.cap)?;
    let setting = surface.space().setting_to_json(&r.best_setting);
    let json = serde_json::json!({
        "format_version": 1,
        "surface": surface.id(),
        "best_value": r.best_value,
        "best_setting": setting,
        "resolution": r.resolution,
        "evaluations": r.evaluations,
        "grid_slack": surface.grid_slack(res),
    });
    println!("surface: {}", surface.id());
    println!("best value: {}", r.best_value);
    for (name, v) in surface.space().names().zip(r.best_setting.values()) {
        println!("  {name} = {v}");
    }
    println!("grid: {:?} ({} evaluations)", r.resolution, r.evaluations);
    if let Some(path) = args.out {
        fs::write(&path, serde_json::to_string_pretty(&json)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn surfaces(export: Option<String>, out: Option<PathBuf>) -> Result<()> {
    if let (Some(id), Some(out)) = (export, out) {
        let s = SyntheticSurface::by_id(&id)?;
        fs::write(&out, serde_json::to_string_pretty(&s.space().to_json())? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
        return Ok(());
    }
    for id in CATALOG {
        let s = SyntheticSurface::by_id(id)?;
        println!(
            "{:<18} {} knobs, default {:>10}  {}",
            id,
            s.space().dim(),
            s.value(&s.default_setting()),
            s.description()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report / compare / bottleneck
// ---------------------------------------------------------------------------

fn trajectory_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(TrajectoryStore::TRAJECTORY)
    } else {
        p.to_path_buf()
    }
}

fn load_report(p: &Path) -> Result<TuningReport> {
    let path = if p.is_dir() { p.join(TrajectoryStore::REPORT) } else { p.to_path_buf() };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid report {}", path.display()))
}

fn report(args: ReportArgs) -> Result<()> {
    let path = trajectory_path(&args.trajectory);
    let rec = adapters::load_trajectory(&path)?;
    if rec.dropped_tail {
        eprintln!("warning: {} is corrupt; reporting its longest valid prefix", path.display());
    }
    ensure!(!rec.samples.is_empty(), "{} holds no tests", path.display());
    let dir = path.parent().unwrap_or(Path::new("."));

    let sibling = load_report(&dir.join(TrajectoryStore::REPORT)).ok();
    let objective = match (&args.objective, &sibling) {
        (Some(key), _) => Objective {
            key: key.clone(),
            direction: if args.minimize.contains(key) {
                Direction::Minimize
            } else {
                Direction::Maximize
            },
        },
        (None, Some(r)) => r.objective.clone(),
        (None, None) => Objective::maximize(DEFAULT_OBJECTIVE),
    };

    let curve = best_so_far(&rec.samples);
    let csv_path = args.csv.unwrap_or_else(|| dir.join("best_so_far.csv"));
    let mut text = String::from("test_index,best\n");
    for (i, b) in &curve {
        text.push_str(&format!("{i},{}\n", b.map(|b| b.to_string()).unwrap_or_default()));
    }
    fs::write(&csv_path, &text).with_context(|| format!("writing {}", csv_path.display()))?;
    print!("{text}");

    let baseline = rec.samples[0].clone();
    let best = rec
        .samples
        .iter()
        .fold(&rec.samples[0], |b, s| match (s.metric, b.metric) {
            (Some(x), Some(y)) if x > y => s,
            (Some(_), None) => s,
            _ => b,
        })
        .clone();
    let synthetic = TuningReport {
        format_version: knobtune_core::search::REPORT_FORMAT_VERSION,
        algo: String::new(),
        params: serde_json::Value::Null,
        seed: 0,
        budget: rec.samples.len() as u64,
        objective,
        baseline,
        best,
        improvement_ratio: None,
        termination: knobtune_core::search::Termination::BudgetExhausted,
        resumed_from: 0,
        trajectory: Vec::new(),
        config: None,
    };
    let directions: BTreeMap<String, Direction> =
        args.minimize.iter().map(|k| (k.clone(), Direction::Minimize)).collect();
    let summary = summarize_report(&synthetic, &directions)?;
    println!();
    print!("{}", summary.render_text());
    if let Some(t) = args.table {
        let f = fs::File::create(&t).with_context(|| format!("writing {}", t.display()))?;
        summary.write_csv(f)?;
    }
    Ok(())
}

fn compare(a: &Path, b: &Path, json: bool) -> Result<()> {
    let c = analysis::compare(&load_report(a)?, &load_report(b)?)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&c)?);
    } else {
        print!("{}", c.render_text());
    }
    Ok(())
}

fn bottleneck(candidates: &[String], json: bool) -> Result<()> {
    let loaded = candidates
        .iter()
        .map(|c| {
            let (id, path) = c.split_once('=').with_context(|| format!("expected ID=REPORT, got {c:?}"))?;
            Ok((id.to_string(), load_report(Path::new(path))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let v = analysis::identify_bottleneck(&loaded)?;
    let mut stdout = std::io::stdout().lock();
    if json {
        writeln!(stdout, "{}", serde_json::to_string_pretty(&v)?)?;
    } else {
        write!(stdout, "{}", v.render_text())?;
    }
    Ok(())
}
