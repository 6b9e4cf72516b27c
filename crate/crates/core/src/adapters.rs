//! Adapters to real systems: config-file templates, external commands,
//! metric extraction from output, and on-disk trajectory persistence.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::AdapterError;
use crate::harness::{MetricBundle, StepError, SystemManipulator, WorkloadGenerator};
use crate::search::{Sample, TuningReport};
use crate::space::{ConfigSetting, ParameterSpace, Value};

pub const TRAJECTORY_FORMAT_VERSION: u64 = 1;

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// How a parameter value is written into a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Renderer {
    /// `Display` of the value.
    Plain,
    /// Numbers with a fixed count of decimals.
    Fixed(usize),
    /// Booleans as custom literals.
    Literals { on: String, off: String },
}

impl TryFrom<String> for Renderer {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "plain" {
            return Ok(Renderer::Plain);
        }
        if let Some(n) = s.strip_prefix("fixed-") {
            return n
                .parse()
                .map(Renderer::Fixed)
                .map_err(|_| format!("bad decimal count in {s:?}"));
        }
        if let Some(rest) = s.strip_prefix("bool:") {
            if let Some((on, off)) = rest.split_once('/') {
                return Ok(Renderer::Literals {
                    on: on.into(),
                    off: off.into(),
                });
            }
        }
        Err(format!("unknown renderer {s:?}; use plain, fixed-N or bool:ON/OFF"))
    }
}

impl From<Renderer> for String {
    fn from(r: Renderer) -> String {
        match r {
            Renderer::Plain => "plain".into(),
            Renderer::Fixed(n) => format!("fixed-{n}"),
            Renderer::Literals { on, off } => format!("bool:{on}/{off}"),
        }
    }
}

impl Renderer {
    pub fn render(&self, value: &Value) -> String {
        match (self, value) {
            (Renderer::Fixed(n), v) if v.as_f64().is_some() => {
                format!("{:.*}", n, v.as_f64().unwrap_or_default())
            }
            (Renderer::Literals { on, .. }, Value::Bool(true)) => on.clone(),
            (Renderer::Literals { off, .. }, Value::Bool(false)) => off.clone(),
            (_, v) => v.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Text(String),
    Param(usize),
}

/// A parsed config-file template. `{name}` is replaced by the value of
/// parameter `name`; `{{` and `}}` produce literal braces.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSpec {
    pieces: Vec<Piece>,
    renderers: Vec<Renderer>,
    output: PathBuf,
}

impl TemplateSpec {
    pub fn parse(
        text: &str,
        output: impl Into<PathBuf>,
        renderers: &BTreeMap<String, Renderer>,
        space: &ParameterSpace,
    ) -> Result<Self, AdapterError> {
        let mut pieces = Vec::new();
        let mut lit = String::new();
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    lit.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    lit.push('}');
                    i += 2;
                }
                b'{' => {
                    let end = text[i + 1..]
                        .find(['}', '{'])
                        .map(|e| e + i + 1)
                        .filter(|&e| bytes[e] == b'}')
                        .ok_or(AdapterError::UnbalancedBrace(i))?;
                    let name = text[i + 1..end].trim();
                    let idx = space
                        .index_of(name)
                        .ok_or_else(|| AdapterError::UnknownPlaceholder(name.to_string()))?;
                    if !lit.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut lit)));
                    }
                    pieces.push(Piece::Param(idx));
                    i = end + 1;
                }
                b'}' => return Err(AdapterError::UnbalancedBrace(i)),
                _ => {
                    let ch = text[i..].chars().next().unwrap_or_default();
                    lit.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !lit.is_empty() {
            pieces.push(Piece::Text(lit));
        }
        for name in renderers.keys() {
            if space.index_of(name).is_none() {
                return Err(AdapterError::UnknownPlaceholder(name.clone()));
            }
        }
        let renderers = space
            .names()
            .map(|n| renderers.get(n).cloned().unwrap_or(Renderer::Plain))
            .collect();
        Ok(Self {
            pieces,
            renderers,
            output: output.into(),
        })
    }

    pub fn output(&self) -> &Path {
        &self.output
    }

    pub fn render(&self, setting: &ConfigSetting) -> Result<String, AdapterError> {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Param(i) => {
                    let v = setting
                        .values()
                        .get(*i)
                        .ok_or_else(|| AdapterError::MissingValue(format!("#{i}")))?;
                    out.push_str(&self.renderers[*i].render(v));
                }
            }
        }
        Ok(out)
    }

    /// Renders fully, then writes the output file.
    pub fn write(&self, setting: &ConfigSetting) -> Result<(), AdapterError> {
        let text = self.render(setting)?;
        fs::write(&self.output, text).map_err(|e| AdapterError::io(&self.output, e))
    }
}

/// One-shot rendering of `template` for `setting`.
pub fn render_config(
    template: &str,
    space: &ParameterSpace,
    renderers: &BTreeMap<String, Renderer>,
    setting: &ConfigSetting,
) -> Result<String, AdapterError> {
    TemplateSpec::parse(template, PathBuf::new(), renderers, space)?.render(setting)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn default_timeout() -> f64 {
    60.0
}

/// An external command. `timeout_secs` bounds its wall time; on expiry the
/// whole process group is killed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub cwd: Option<PathBuf>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl CommandSpec {
    /// `sh -c script`.
    pub fn shell(script: impl Into<String>) -> Self {
        Self {
            program: "sh".into(),
            args: vec!["-c".into(), script.into()],
            cwd: None,
            env: BTreeMap::new(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn with_timeout(mut self, secs: f64) -> Self {
        self.timeout_secs = secs;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepStatus {
    Ok,
    Failed { code: Option<i32> },
    TimedOut,
    SpawnFailed(String),
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub status: StepStatus,
    pub stdout: String,
    pub stderr: String,
    pub duration: Duration,
}

impl StepResult {
    pub fn is_ok(&self) -> bool {
        self.status == StepStatus::Ok
    }

    /// Maps a non-ok status onto a step error; `what` names the step.
    pub fn into_step_error(self, what: &str) -> Result<StepResult, StepError> {
        match &self.status {
            StepStatus::Ok => Ok(self),
            StepStatus::TimedOut => Err(StepError::Timeout(what.into())),
            StepStatus::Failed { code } => Err(StepError::Failed(format!(
                "{what} exited with {}: {}",
                code.map_or("signal".into(), |c| c.to_string()),
                self.stderr.trim()
            ))),
            StepStatus::SpawnFailed(e) => Err(StepError::Failed(format!("{what}: {e}"))),
        }
    }
}

fn drain<R: Read + Send + 'static>(r: Option<R>) -> Option<thread::JoinHandle<String>> {
    r.map(|mut r| {
        thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = r.read_to_end(&mut buf);
            String::from_utf8_lossy(&buf).into_owned()
        })
    })
}

/// Runs `cmd` with `extra_env`, capturing stdout and stderr.
pub fn exec_step(cmd: &CommandSpec, extra_env: &BTreeMap<String, String>) -> StepResult {
    let started = Instant::now();
    let mut command = Command::new(&cmd.program);
    command
        .args(&cmd.args)
        .envs(&cmd.env)
        .envs(extra_env)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    if let Some(dir) = &cmd.cwd {
        command.current_dir(dir);
    }
    let mut child = match command.spawn() {
        Ok(c) => c,
        Err(e) => {
            return StepResult {
                status: StepStatus::SpawnFailed(format!("{}: {e}", cmd.program)),
                stdout: String::new(),
                stderr: String::new(),
                duration: started.elapsed(),
            }
        }
    };
    let out = drain(child.stdout.take());
    let err = drain(child.stderr.take());
    let timeout = Duration::from_secs_f64(cmd.timeout_secs.max(0.0));
    let status = match child.wait_timeout(timeout) {
        Ok(Some(s)) if s.success() => StepStatus::Ok,
        Ok(Some(s)) => StepStatus::Failed { code: s.code() },
        Ok(None) => {
            // SAFETY: kill(2) on our own child's process group.
            unsafe {
                libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
            }
            let _ = child.wait();
            StepStatus::TimedOut
        }
        Err(e) => StepStatus::SpawnFailed(e.to_string()),
    };
    let join = |h: Option<thread::JoinHandle<String>>| h.and_then(|h| h.join().ok()).unwrap_or_default();
    let result = StepResult {
        status,
        stdout: join(out),
        stderr: join(err),
        duration: started.elapsed(),
    };
    debug!("{} finished: {:?} in {:?}", cmd.program, result.status, result.duration);
    result
}

// ---------------------------------------------------------------------------
// Metric parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum MetricSource {
    #[default]
    Stdout,
    File {
        path: PathBuf,
    },
}

/// `pattern` is matched against each output line and must have exactly one
/// capture group holding the number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricRule {
    pub name: String,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricParserSpec {
    #[serde(default)]
    pub source: MetricSource,
    pub rules: Vec<MetricRule>,
}

/// Compiled [`MetricParserSpec`].
#[derive(Debug, Clone)]
pub struct MetricParser {
    source: MetricSource,
    rules: Vec<(String, Regex)>,
}

impl MetricParser {
    pub fn new(spec: &MetricParserSpec) -> Result<Self, AdapterError> {
        let rules = spec
            .rules
            .iter()
            .map(|r| {
                let re = Regex::new(&r.pattern).map_err(|e| AdapterError::BadRule {
                    name: r.name.clone(),
                    reason: e.to_string(),
                })?;
                if re.captures_len() != 2 {
                    return Err(AdapterError::BadRule {
                        name: r.name.clone(),
                        reason: format!("needs exactly one capture group, has {}", re.captures_len() - 1),
                    });
                }
                Ok((r.name.clone(), re))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            source: spec.source.clone(),
            rules,
        })
    }

    pub fn source(&self) -> &MetricSource {
        &self.source
    }

    /// Extracts every rule that matches exactly one line. A rule matching
    /// several lines is an error; one matching none is left out.
    pub fn parse(&self, output: &str) -> Result<MetricBundle, AdapterError> {
        let mut bundle = MetricBundle::new();
        for (name, re) in &self.rules {
            let hits: Vec<(&str, &str)> = output
                .lines()
                .filter_map(|line| re.captures(line).and_then(|c| c.get(1)).map(|m| (line, m.as_str())))
                .collect();
            match hits.as_slice() {
                [] => {}
                [(line, text)] => {
                    let v: f64 = text.trim().parse().map_err(|_| AdapterError::Unparsable {
                        name: name.clone(),
                        line: line.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(AdapterError::Unparsable {
                            name: name.clone(),
                            line: line.to_string(),
                        });
                    }
                    bundle.insert(name.clone(), v);
                }
                _ => {
                    return Err(AdapterError::Ambiguous {
                        name: name.clone(),
                        count: hits.len(),
                    })
                }
            }
        }
        Ok(bundle)
    }
}

/// Parses `output` and requires `objective` to be present.
pub fn parse_metrics(
    output: &str,
    spec: &MetricParserSpec,
    objective: &str,
) -> Result<MetricBundle, AdapterError> {
    let bundle = MetricParser::new(spec)?.parse(output)?;
    if bundle.get(objective).is_none() {
        return Err(AdapterError::MissingObjective(objective.into()));
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Command-driven SUT
// ---------------------------------------------------------------------------

/// Exposes each parameter as `KNOBTUNE_PARAM_<NAME>` to the commands.
fn setting_env(space: &ParameterSpace, setting: &ConfigSetting) -> BTreeMap<String, String> {
    space
        .names()
        .zip(setting.values())
        .map(|(n, v)| (format!("KNOBTUNE_PARAM_{}", n.to_uppercase().replace(|c: char| !c.is_ascii_alphanumeric(), "_")), v.to_string()))
        .collect()
}

/// Applies settings by rendering a template and running shell commands.
pub struct ExecManipulator {
    space: ParameterSpace,
    template: Option<TemplateSpec>,
    restart: Option<CommandSpec>,
    ready: Option<CommandSpec>,
    teardown: Option<CommandSpec>,
    env: BTreeMap<String, String>,
}

impl ExecManipulator {
    pub fn new(space: ParameterSpace) -> Self {
        Self {
            space,
            template: None,
            restart: None,
            ready: None,
            teardown: None,
            env: BTreeMap::new(),
        }
    }

    pub fn template(mut self, t: TemplateSpec) -> Self {
        self.template = Some(t);
        self
    }

    pub fn restart_cmd(mut self, c: CommandSpec) -> Self {
        self.restart = Some(c);
        self
    }

    pub fn ready_cmd(mut self, c: CommandSpec) -> Self {
        self.ready = Some(c);
        self
    }

    pub fn teardown_cmd(mut self, c: CommandSpec) -> Self {
        self.teardown = Some(c);
        self
    }
}

impl SystemManipulator for ExecManipulator {
    fn apply(&mut self, setting: &ConfigSetting) -> Result<(), StepError> {
        if let Err(v) = self.space.validate(setting) {
            let msg = v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Err(StepError::Rejected(msg));
        }
        if let Some(t) = &self.template {
            t.write(setting).map_err(|e| match e {
                AdapterError::Io { .. } => StepError::Fatal(e.to_string()),
                e => StepError::Failed(e.to_string()),
            })?;
        }
        self.env = setting_env(&self.space, setting);
        Ok(())
    }

    fn restart(&mut self) -> Result<(), StepError> {
        if let Some(c) = &self.restart {
            exec_step(c, &self.env).into_step_error("restart")?;
        }
        Ok(())
    }

    fn await_ready(&mut self, timeout: Duration) -> Result<(), StepError> {
        if let Some(c) = &self.ready {
            let mut c = c.clone();
            if !timeout.is_zero() {
                c.timeout_secs = timeout.as_secs_f64();
            }
            exec_step(&c, &self.env).into_step_error("readiness check")?;
        }
        Ok(())
    }

    fn teardown(&mut self) -> Result<(), StepError> {
        if let Some(c) = &self.teardown {
            exec_step(c, &self.env).into_step_error("teardown")?;
        }
        Ok(())
    }
}

/// Runs a load command and parses its metrics.
pub struct ExecWorkload {
    command: CommandSpec,
    parser: MetricParser,
}

impl ExecWorkload {
    pub fn new(command: CommandSpec, parser: &MetricParserSpec) -> Result<Self, AdapterError> {
        Ok(Self {
            command,
            parser: MetricParser::new(parser)?,
        })
    }
}

impl WorkloadGenerator for ExecWorkload {
    fn run(&mut self) -> Result<MetricBundle, StepError> {
        let result = exec_step(&self.command, &BTreeMap::new()).into_step_error("workload")?;
        let text = match self.parser.source() {
            MetricSource::Stdout => result.stdout,
            MetricSource::File { path } => {
                fs::read_to_string(path).map_err(|e| StepError::Failed(format!("{}: {e}", path.display())))?
            }
        };
        self.parser.parse(&text).map_err(|e| StepError::Failed(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Trajectory persistence
// ---------------------------------------------------------------------------

/// Tests recovered from a trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    pub samples: Vec<Sample>,
    /// A partially written final record was discarded.
    pub dropped_tail: bool,
}

/// Output directory of a tuning run. Every completed test is appended to
/// `trajectory.jsonl` and synced before the next one starts.
pub struct TrajectoryStore {
    dir: PathBuf,
    file: File,
}

impl TrajectoryStore {
    pub const TRAJECTORY: &'static str = "trajectory.jsonl";
    pub const REPORT: &'static str = "report.json";
    pub const CSV: &'static str = "trajectory.csv";

    /// Opens `dir` for a fresh run, discarding any previous trajectory.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, AdapterError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| AdapterError::io(&dir, e))?;
        let path = dir.join(Self::TRAJECTORY);
        let file = File::create(&path).map_err(|e| AdapterError::io(&path, e))?;
        Ok(Self { dir, file })
    }

    /// Opens `dir` to continue a run, returning the longest valid prefix of
    /// its trajectory. A corrupt final record is dropped with a warning;
    /// corruption anywhere else is an error.
    pub fn resume(dir: impl Into<PathBuf>) -> Result<(Self, Recovered), AdapterError> {
        let dir = dir.into();
        let path = dir.join(Self::TRAJECTORY);
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .map_err(|e| AdapterError::io(&path, e))?;
        let (samples, valid_len, dropped_tail) = read_records(&mut file, &path, false)?;
        if dropped_tail {
            warn!("{}: discarding incomplete final record", path.display());
        }
        file.set_len(valid_len).map_err(|e| AdapterError::io(&path, e))?;
        file.seek(std::io::SeekFrom::End(0)).map_err(|e| AdapterError::io(&path, e))?;
        Ok((Self { dir, file }, Recovered { samples, dropped_tail }))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, sample: &Sample) -> Result<(), AdapterError> {
        let mut record = serde_json::to_value(sample)?;
        if let serde_json::Value::Object(map) = &mut record {
            map.insert("format_version".into(), TRAJECTORY_FORMAT_VERSION.into());
        }
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        let path = self.dir.join(Self::TRAJECTORY);
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| AdapterError::io(&path, e))
    }

    /// Writes `report.json` and `trajectory.csv`.
    pub fn write_report(&self, report: &TuningReport, space: &ParameterSpace) -> Result<(), AdapterError> {
        let path = self.dir.join(Self::REPORT);
        let text = serde_json::to_string_pretty(report)?;
        fs::write(&path, text + "\n").map_err(|e| AdapterError::io(&path, e))?;
        let path = self.dir.join(Self::CSV);
        let file = File::create(&path).map_err(|e| AdapterError::io(&path, e))?;
        write_trajectory_csv(&report.trajectory, space, file)
    }
}

/// Reads records; returns them, the byte length of the valid prefix, and
/// whether a trailing record was dropped.
fn read_records(file: &mut File, path: &Path, lenient: bool) -> Result<(Vec<Sample>, u64, bool), AdapterError> {
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    let mut offset = 0u64;
    loop {
        let mut line = Vec::new();
        let n = reader.read_until(b'\n', &mut line).map_err(|e| AdapterError::io(path, e))?;
        if n == 0 {
            break;
        }
        raw.push((offset, line));
        offset += n as u64;
    }
    let total = raw.len();
    let mut samples = Vec::with_capacity(total);
    for (i, (start, line)) in raw.into_iter().enumerate() {
        let complete = line.ends_with(b"\n");
        match decode_record(&line, samples.len() as u64) {
            Ok(s) if complete => samples.push(s),
            Ok(_) => return Ok((samples, start, true)),
            Err(reason) if lenient || i + 1 == total => {
                warn!("{}: record {}: {reason}", path.display(), i + 1);
                return Ok((samples, start, true));
            }
            Err(reason) => return Err(AdapterError::CorruptRecord { line: i + 1, reason }),
        }
    }
    Ok((samples, offset, false))
}

fn decode_record(line: &[u8], expected_index: u64) -> Result<Sample, String> {
    let mut v: serde_json::Value = serde_json::from_slice(line).map_err(|e| e.to_string())?;
    let map = v.as_object_mut().ok_or("not a JSON object")?;
    match map.remove("format_version").and_then(|f| f.as_u64()) {
        Some(TRAJECTORY_FORMAT_VERSION) => {}
        Some(other) => return Err(format!("unsupported format_version {other}")),
        None => return Err("missing format_version".into()),
    }
    let sample: Sample = serde_json::from_value(v).map_err(|e| e.to_string())?;
    if sample.test_index != expected_index {
        return Err(format!("test_index {} where {expected_index} was expected", sample.test_index));
    }
    Ok(sample)
}

/// Loads the longest valid prefix of a trajectory file, read-only. Unlike
/// [`TrajectoryStore::resume`], corruption before the last record only
/// truncates the result (with a warning).
pub fn load_trajectory(path: &Path) -> Result<Recovered, AdapterError> {
    let mut file = File::open(path).map_err(|e| AdapterError::io(path, e))?;
    let (samples, _, dropped_tail) = read_records(&mut file, path, true)?;
    Ok(Recovered { samples, dropped_tail })
}

/// `test_index, phase, <parameter values...>, metric`; failed tests leave
/// the metric empty.
pub fn write_trajectory_csv<W: Write>(
    samples: &[Sample],
    space: &ParameterSpace,
    out: W,
) -> Result<(), AdapterError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["test_index".to_string(), "phase".to_string()];
    header.extend(space.names().map(String::from));
    header.push("metric".into());
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.test_index.to_string(), s.phase.to_string()];
        row.extend(s.setting.values().iter().map(ToString::to_string));
        row.push(s.metric.map(|m| m.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| AdapterError::io("<csv>", e))?;
    Ok(())
}
