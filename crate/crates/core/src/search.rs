//! Budget-aware search strategies over the unit hypercube.
//!
//! A [`Strategy`] is a propose/observe state machine. The [`Driver`] owns the
//! test budget: it evaluates the baseline first, then alternates
//! `propose` → evaluate → `observe` until exactly `budget` evaluations have
//! been spent. Three strategies share the contract:
//!
//! * [`Rrs`]: recursive random search. Exploration walks an LHS design of
//!   `n_explore` points over the whole cube; exploitation samples uniformly in
//!   a shrinking box around the current center and falls back to a fresh
//!   exploration once the box is smaller than `rho_min`.
//! * [`RandomSearch`]: i.i.d. uniform points.
//! * [`LhsSearch`]: successive LHS designs of size `m`; on fully discrete
//!   spaces with `m` covering the whole grid it enumerates every setting once.
//!
//! Metrics are maximized. Failed evaluations carry no metric, consume budget
//! and never become the best sample.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::SearchError;
use crate::rng::{derive_seed, seeded_rng, TuneRng};
use crate::sampling::{self, point_in_box};
use crate::space::{clip_box, ConfigSetting, ParameterSpace, UnitBox, UnitPoint};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "seed-baseline")]
    Baseline,
    #[serde(rename = "explore")]
    Explore,
    #[serde(rename = "exploit")]
    Exploit,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Baseline => "seed-baseline",
            Phase::Explore => "explore",
            Phase::Exploit => "exploit",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

impl Direction {
    /// Maps a raw metric onto the maximized scale.
    pub fn normalize(self, raw: f64) -> f64 {
        match self {
            Direction::Maximize => raw,
            Direction::Minimize => -raw,
        }
    }
}

/// Which metric is tuned, and in which direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub key: String,
    #[serde(default)]
    pub direction: Direction,
}

impl Objective {
    pub fn maximize(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            direction: Direction::Maximize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStatus {
    Ok,
    Failed,
}

/// One consumed test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub test_index: u64,
    pub phase: Phase,
    pub status: TestStatus,
    pub point: UnitPoint,
    pub setting: ConfigSetting,
    /// Objective on the maximized scale; absent for failed tests.
    pub metric: Option<f64>,
    /// All aggregated metrics of the test, raw direction.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

impl Sample {
    fn beats(&self, other: &Sample) -> bool {
        match (self.metric, other.metric) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    BudgetExhausted,
    UserStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub format_version: u32,
    pub algo: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub budget: u64,
    pub objective: Objective,
    pub baseline: Sample,
    pub best: Sample,
    /// `best.metric / baseline.metric`, defined when the baseline metric is
    /// positive.
    pub improvement_ratio: Option<f64>,
    pub termination: Termination,
    /// Number of tests taken over from a persisted trajectory.
    #[serde(default)]
    pub resumed_from: u64,
    pub trajectory: Vec<Sample>,
    /// Effective run configuration, when tuning was launched from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl TuningReport {
    pub fn consumed(&self) -> u64 {
        self.trajectory.len() as u64
    }

    /// `(test_index, best metric so far)` for every test. Failed tests repeat
    /// the previous best.
    pub fn best_so_far(&self) -> Vec<(u64, Option<f64>)> {
        best_so_far(&self.trajectory)
    }
}

pub fn best_so_far(trajectory: &[Sample]) -> Vec<(u64, Option<f64>)> {
    let mut best: Option<f64> = None;
    trajectory
        .iter()
        .map(|s| {
            if let Some(m) = s.metric {
                best = Some(best.map_or(m, |b| b.max(m)));
            }
            (s.test_index, best)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Strategy contract
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub point: UnitPoint,
    pub phase: Phase,
}

/// Propose/observe contract shared by all search strategies. Calls must
/// strictly alternate, one observe per proposal.
pub trait Strategy {
    fn name(&self) -> &'static str;

    /// Echo of the strategy's parameters for reports.
    fn params_json(&self) -> serde_json::Value;

    fn propose(&mut self) -> Result<Proposal, SearchError>;

    /// Feeds back the outcome for the last proposed point.
    fn observe(&mut self, point: &UnitPoint, metric: Option<f64>) -> Result<(), SearchError>;

    /// Called once with the evaluated baseline before the first proposal.
    fn observe_baseline(&mut self, _point: &UnitPoint, _metric: f64) {}
}

fn take_pending(pending: &mut Option<UnitPoint>, point: &UnitPoint) -> Result<(), SearchError> {
    match pending.take() {
        None => Err(SearchError::NoPendingProposal),
        Some(p) if &p == point => Ok(()),
        Some(p) => {
            *pending = Some(p);
            Err(SearchError::PointMismatch)
        }
    }
}

// ---------------------------------------------------------------------------
// Recursive random search
// ---------------------------------------------------------------------------

fn default_p_explore() -> f64 {
    0.99
}
fn default_r_percentile() -> f64 {
    0.1
}
fn default_exploit_count() -> u32 {
    8
}
fn default_shrink() -> f64 {
    0.5
}
fn default_r0() -> f64 {
    0.25
}
fn default_rho_min() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RrsParams {
    /// Confidence that the exploration phase hits the top `r_percentile`.
    #[serde(default = "default_p_explore")]
    pub p_explore: f64,
    #[serde(default = "default_r_percentile")]
    pub r_percentile: f64,
    /// Non-improving exploitation samples tolerated before shrinking.
    #[serde(default = "default_exploit_count")]
    pub exploit_count: u32,
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "default_rho_min")]
    pub rho_min: f64,
    /// Jump into exploitation as soon as an exploration sample beats the
    /// current threshold.
    #[serde(default = "default_true")]
    pub early_jump: bool,
    /// Reset the threshold from every completed exploration phase; when
    /// false the first estimate is kept for the whole run.
    #[serde(default = "default_true")]
    pub reestimate_threshold: bool,
}

impl Default for RrsParams {
    fn default() -> Self {
        Self {
            p_explore: default_p_explore(),
            r_percentile: default_r_percentile(),
            exploit_count: default_exploit_count(),
            shrink: default_shrink(),
            r0: default_r0(),
            rho_min: default_rho_min(),
            early_jump: true,
            reestimate_threshold: true,
        }
    }
}

impl RrsParams {
    pub fn validate(&self) -> Result<(), SearchError> {
        let open_unit = |name: &'static str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(SearchError::InvalidParams {
                    name,
                    reason: format!("{v} not in (0, 1)"),
                })
            }
        };
        open_unit("p_explore", self.p_explore)?;
        open_unit("r_percentile", self.r_percentile)?;
        open_unit("shrink", self.shrink)?;
        if self.exploit_count == 0 {
            return Err(SearchError::InvalidParams {
                name: "exploit_count",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.r0 > 0.0 && self.r0 <= 1.0) {
            return Err(SearchError::InvalidParams {
                name: "r0",
                reason: format!("{} not in (0, 1]", self.r0),
            });
        }
        if !(self.rho_min > 0.0 && self.rho_min < self.r0) {
            return Err(SearchError::InvalidParams {
                name: "rho_min",
                reason: format!("{} not in (0, r0)", self.rho_min),
            });
        }
        Ok(())
    }

    /// Exploration sample count: `ceil(ln(1 - p) / ln(1 - r))`.
    pub fn n_explore(&self) -> usize {
        let n = ((1.0 - self.p_explore).ln() / (1.0 - self.r_percentile).ln()).ceil();
        (n as usize).max(1)
    }

    /// Upper bound on evaluations spent in one exploitation episode without
    /// improvement before exploration resumes.
    pub fn max_stall(&self) -> u64 {
        let shrinks = (self.rho_min / self.r0).ln() / self.shrink.ln();
        self.exploit_count as u64 * shrinks.ceil() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RrsPhase {
    Exploring {
        design: Vec<UnitPoint>,
        collected: usize,
        best: Option<(UnitPoint, f64)>,
    },
    Exploiting {
        center: UnitPoint,
        center_metric: f64,
        radius: f64,
        since_improve: u32,
    },
}

/// Recursive random search with LHS-driven exploration.
#[derive(Debug, Clone)]
pub struct Rrs {
    params: RrsParams,
    dim: usize,
    seed: u64,
    episode: u64,
    phase: RrsPhase,
    threshold: Option<f64>,
    rng: TuneRng,
    pending: Option<UnitPoint>,
}

/// Stream id of the exploitation sampler; exploration designs use the
/// episode number.
const EXPLOIT_STREAM: u64 = u64::MAX;

impl Rrs {
    pub fn new(dim: usize, params: RrsParams, seed: u64) -> Result<Self, SearchError> {
        params.validate()?;
        let phase = Self::exploration(dim, params.n_explore(), seed, 0)?;
        Ok(Self {
            params,
            dim,
            seed,
            episode: 0,
            phase,
            threshold: None,
            rng: seeded_rng(derive_seed(seed, EXPLOIT_STREAM)),
            pending: None,
        })
    }

    fn exploration(dim: usize, n: usize, seed: u64, episode: u64) -> Result<RrsPhase, SearchError> {
        let design = sampling::lhs(dim, n, derive_seed(seed, episode))?;
        Ok(RrsPhase::Exploring {
            design: design.into_points(),
            collected: 0,
            best: None,
        })
    }

    pub fn params(&self) -> &RrsParams {
        &self.params
    }

    pub fn phase(&self) -> &RrsPhase {
        &self.phase
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    /// Number of exploration phases started so far, minus one.
    pub fn episode(&self) -> u64 {
        self.episode
    }

    fn restart(&mut self) -> Result<(), SearchError> {
        self.episode += 1;
        self.phase = Self::exploration(self.dim, self.params.n_explore(), self.seed, self.episode)?;
        Ok(())
    }

    fn exploit_at(&mut self, center: UnitPoint, metric: f64) {
        self.phase = RrsPhase::Exploiting {
            center,
            center_metric: metric,
            radius: self.params.r0,
            since_improve: 0,
        };
    }

    /// Puts the search directly into exploitation. Intended for tests and
    /// warm starts.
    pub fn set_exploiting(&mut self, center: UnitPoint, center_metric: f64, radius: f64) {
        self.phase = RrsPhase::Exploiting {
            center,
            center_metric,
            radius,
            since_improve: 0,
        };
    }

    pub fn exploit_box(&self) -> Option<UnitBox> {
        match &self.phase {
            RrsPhase::Exploiting { center, radius, .. } => clip_box(center, *radius).ok(),
            RrsPhase::Exploring { .. } => None,
        }
    }
}

impl Strategy for Rrs {
    fn name(&self) -> &'static str {
        "rrs"
    }

    fn params_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.params).unwrap_or_default();
        if let Some(obj) = v.as_object_mut() {
            obj.insert("n_explore".into(), self.params.n_explore().into());
        }
        v
    }

    fn propose(&mut self) -> Result<Proposal, SearchError> {
        let proposal = match &self.phase {
            RrsPhase::Exploring {
                design, collected, ..
            } => Proposal {
                point: design[*collected].clone(),
                phase: Phase::Explore,
            },
            RrsPhase::Exploiting { center, radius, .. } => {
                let b = clip_box(center, *radius)?;
                Proposal {
                    point: point_in_box(&b, &mut self.rng)?,
                    phase: Phase::Exploit,
                }
            }
        };
        self.pending = Some(proposal.point.clone());
        Ok(proposal)
    }

    fn observe(&mut self, point: &UnitPoint, metric: Option<f64>) -> Result<(), SearchError> {
        take_pending(&mut self.pending, point)?;
        match &mut self.phase {
            RrsPhase::Exploring {
                design,
                collected,
                best,
            } => {
                *collected += 1;
                if let Some(y) = metric {
                    if best.as_ref().is_none_or(|(_, b)| y > *b) {
                        *best = Some((point.clone(), y));
                    }
                    if self.params.early_jump && self.threshold.is_some_and(|t| y > t) {
                        self.exploit_at(point.clone(), y);
                        return Ok(());
                    }
                }
                if *collected == design.len() {
                    match best.take() {
                        Some((center, y)) => {
                            if self.params.reestimate_threshold || self.threshold.is_none() {
                                self.threshold = Some(y);
                            }
                            self.exploit_at(center, y);
                        }
                        None => self.restart()?,
                    }
                }
            }
            RrsPhase::Exploiting {
                center,
                center_metric,
                radius,
                since_improve,
            } => match metric {
                Some(y) if y > *center_metric => {
                    *center = point.clone();
                    *center_metric = y;
                    *since_improve = 0;
                }
                _ => {
                    *since_improve += 1;
                    if *since_improve >= self.params.exploit_count {
                        *radius *= self.params.shrink;
                        *since_improve = 0;
                        if *radius < self.params.rho_min {
                            self.restart()?;
                        }
                    }
                }
            },
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pure random and pure LHS strategies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RandomSearch {
    dim: usize,
    rng: TuneRng,
    pending: Option<UnitPoint>,
}

impl RandomSearch {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            rng: seeded_rng(seed),
            pending: None,
        }
    }
}

impl Strategy for RandomSearch {
    fn name(&self) -> &'static str {
        "random"
    }

    fn params_json(&self) -> serde_json::Value {
        serde_json::json!({})
    }

    fn propose(&mut self) -> Result<Proposal, SearchError> {
        let point = point_in_box(&UnitBox::full(self.dim), &mut self.rng)?;
        self.pending = Some(point.clone());
        Ok(Proposal {
            point,
            phase: Phase::Explore,
        })
    }

    fn observe(&mut self, point: &UnitPoint, _metric: Option<f64>) -> Result<(), SearchError> {
        take_pending(&mut self.pending, point)
    }
}

/// Successive LHS designs of size `m`.
///
/// When every dimension of the space is discrete and `m` is at least the
/// number of distinct settings, the design is an LHS over the flattened
/// settings grid: every setting is proposed exactly once, in random order,
/// skipping the baseline.
#[derive(Debug, Clone)]
pub struct LhsSearch {
    space: ParameterSpace,
    m: usize,
    seed: u64,
    round: u64,
    queue: Vec<UnitPoint>,
    next: usize,
    exhaustive: bool,
    baseline: Option<UnitPoint>,
    pending: Option<UnitPoint>,
}

impl LhsSearch {
    pub fn new(space: ParameterSpace, m: usize, seed: u64) -> Result<Self, SearchError> {
        if m == 0 {
            return Err(SearchError::InvalidParams {
                name: "m",
                reason: "design size must be at least 1".into(),
            });
        }
        let exhaustive = space.discrete_size().is_some_and(|n| n as usize <= m);
        Ok(Self {
            space,
            m,
            seed,
            round: 0,
            queue: Vec::new(),
            next: 0,
            exhaustive,
            baseline: None,
            pending: None,
        })
    }

    pub fn is_exhaustive(&self) -> bool {
        self.exhaustive
    }

    fn refill(&mut self) -> Result<(), SearchError> {
        let seed = derive_seed(self.seed, self.round);
        self.round += 1;
        self.next = 0;
        self.queue = if self.exhaustive {
            self.grid_design(seed)?
        } else {
            sampling::lhs(self.space.dim(), self.m, seed)?.into_points()
        };
        Ok(())
    }

    fn grid_design(&self, seed: u64) -> Result<Vec<UnitPoint>, SearchError> {
        let size = self.space.discrete_size().unwrap_or(1) as usize;
        let flat = sampling::lhs(1, size, seed)?;
        let mut out = Vec::with_capacity(size);
        for p in flat.points() {
            let index = ((p.coords()[0] * size as f64).floor() as usize).min(size - 1);
            let point = self.grid_point(index)?;
            if self.baseline.as_ref() != Some(&point) {
                out.push(point);
            }
        }
        Ok(out)
    }

    /// Mixed-radix decoding of a flat grid index, last dimension fastest.
    fn grid_point(&self, mut index: usize) -> Result<UnitPoint, SearchError> {
        let params = self.space.params();
        let mut values = vec![None; params.len()];
        for (slot, p) in values.iter_mut().zip(params).rev() {
            let k = p.kind().levels().unwrap_or(1) as usize;
            *slot = Some(p.value_at_level((index % k) as u64));
            index /= k;
        }
        let setting = ConfigSetting::new(values.into_iter().flatten().collect());
        Ok(self.space.to_unit(&setting)?)
    }
}

impl Strategy for LhsSearch {
    fn name(&self) -> &'static str {
        "lhs"
    }

    fn params_json(&self) -> serde_json::Value {
        serde_json::json!({ "m": self.m, "exhaustive": self.exhaustive })
    }

    fn propose(&mut self) -> Result<Proposal, SearchError> {
        if self.next >= self.queue.len() {
            self.refill()?;
            if self.queue.is_empty() {
                // Only the baseline exists; propose it again.
                self.baseline = None;
                self.refill()?;
            }
        }
        let point = self.queue[self.next].clone();
        self.next += 1;
        self.pending = Some(point.clone());
        Ok(Proposal {
            point,
            phase: Phase::Explore,
        })
    }

    fn observe(&mut self, point: &UnitPoint, _metric: Option<f64>) -> Result<(), SearchError> {
        take_pending(&mut self.pending, point)
    }

    fn observe_baseline(&mut self, point: &UnitPoint, _metric: f64) {
        self.baseline = Some(point.clone());
    }
}

// ---------------------------------------------------------------------------
// Budget driver
// ---------------------------------------------------------------------------

/// Result of evaluating one setting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    /// Objective on the maximized scale; `None` marks a failed test.
    pub metric: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl Evaluation {
    pub fn ok(metric: f64) -> Self {
        Self {
            metric: Some(metric),
            ..Self::default()
        }
    }

    pub fn failed(reason: impl Into<String>) -> Self {
        Self {
            metric: None,
            metrics: BTreeMap::new(),
            error: Some(reason.into()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DriveError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("tuning aborted: {cause}")]
    Aborted {
        cause: E,
        /// Report over the tests completed before the abort.
        partial: Option<Box<TuningReport>>,
    },
}

/// Runs a strategy against an evaluator until the budget is spent.
pub struct Driver<'a> {
    space: &'a ParameterSpace,
    budget: u64,
    baseline: ConfigSetting,
    objective: Objective,
    seed: u64,
    prior: Vec<Sample>,
    stop: Option<&'a AtomicBool>,
}

impl<'a> Driver<'a> {
    pub fn new(space: &'a ParameterSpace, budget: u64, baseline: ConfigSetting, seed: u64) -> Self {
        Self {
            space,
            budget,
            baseline,
            objective: Objective::maximize("objective"),
            seed,
            prior: Vec::new(),
            stop: None,
        }
    }

    pub fn objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    /// Continues from a persisted trajectory prefix. The prefix is replayed
    /// through the strategy; it must match what the strategy proposes.
    pub fn resume_from(mut self, prior: Vec<Sample>) -> Self {
        self.prior = prior;
        self
    }

    /// Flag checked before every test; once set the run ends as user-stop.
    pub fn stop_flag(mut self, flag: &'a AtomicBool) -> Self {
        self.stop = Some(flag);
        self
    }

    pub fn run<E>(
        self,
        strategy: &mut dyn Strategy,
        evaluate: &mut dyn FnMut(&ConfigSetting) -> Result<Evaluation, E>,
        record: &mut dyn FnMut(&Sample) -> Result<(), E>,
    ) -> Result<TuningReport, DriveError<E>>
    where
        E: std::error::Error + 'static,
    {
        if self.budget == 0 {
            return Err(SearchError::ZeroBudget.into());
        }
        let baseline_point = self.space.to_unit(&self.baseline).map_err(SearchError::from)?;
        let mut trajectory: Vec<Sample> = Vec::with_capacity(self.budget as usize);
        let mut prior = self.prior.into_iter();
        let resumed_from = prior.len() as u64;

        // Baseline: replayed or evaluated, always test 0.
        let baseline = match prior.next() {
            Some(s) => {
                if s.phase != Phase::Baseline || s.test_index != 0 || s.point != baseline_point {
                    return Err(SearchError::ResumeDiverged { index: 0 }.into());
                }
                s
            }
            None => {
                let eval = match evaluate(&self.baseline) {
                    Ok(e) => e,
                    Err(cause) => return Err(DriveError::Aborted { cause, partial: None }),
                };
                let sample = make_sample(0, Phase::Baseline, baseline_point.clone(), self.baseline.clone(), eval.clone());
                if sample.metric.is_none() {
                    return Err(SearchError::BaselineFailed(
                        eval.error.unwrap_or_else(|| "no objective value".into()),
                    )
                    .into());
                }
                if let Err(cause) = record(&sample) {
                    return Err(DriveError::Aborted { cause, partial: None });
                }
                sample
            }
        };
        let Some(baseline_metric) = baseline.metric else {
            return Err(SearchError::BaselineFailed("persisted baseline has no metric".into()).into());
        };
        strategy.observe_baseline(&baseline.point, baseline_metric);
        trajectory.push(baseline);

        for s in prior {
            let index = trajectory.len();
            let proposal = strategy.propose()?;
            if s.test_index != index as u64 || proposal.point != s.point || proposal.phase != s.phase {
                return Err(SearchError::ResumeDiverged { index }.into());
            }
            strategy.observe(&s.point, s.metric)?;
            trajectory.push(s);
        }

        let mut termination = Termination::BudgetExhausted;
        let mut abort = None;
        while (trajectory.len() as u64) < self.budget {
            if self.stop.is_some_and(|f| f.load(Ordering::SeqCst)) {
                termination = Termination::UserStop;
                break;
            }
            let proposal = strategy.propose()?;
            let setting = self.space.from_unit(&proposal.point).map_err(SearchError::from)?;
            let eval = match evaluate(&setting) {
                Ok(e) => e,
                Err(cause) => {
                    abort = Some(cause);
                    break;
                }
            };
            let sample = make_sample(trajectory.len() as u64, proposal.phase, proposal.point, setting, eval);
            if let Err(cause) = record(&sample) {
                abort = Some(cause);
                break;
            }
            strategy.observe(&sample.point, sample.metric)?;
            trajectory.push(sample);
        }
        if abort.is_some() {
            termination = Termination::UserStop;
        }

        let report = build_report(
            strategy,
            self.seed,
            self.budget,
            self.objective,
            trajectory,
            termination,
            resumed_from,
        );
        match abort {
            Some(cause) => Err(DriveError::Aborted {
                cause,
                partial: Some(Box::new(report)),
            }),
            None => Ok(report),
        }
    }
}

fn make_sample(
    test_index: u64,
    phase: Phase,
    point: UnitPoint,
    setting: ConfigSetting,
    eval: Evaluation,
) -> Sample {
    let metric = eval.metric.filter(|m| m.is_finite());
    Sample {
        test_index,
        phase,
        status: if metric.is_some() {
            TestStatus::Ok
        } else {
            TestStatus::Failed
        },
        point,
        setting,
        metric,
        metrics: eval.metrics,
    }
}

fn build_report(
    strategy: &dyn Strategy,
    seed: u64,
    budget: u64,
    objective: Objective,
    trajectory: Vec<Sample>,
    termination: Termination,
    resumed_from: u64,
) -> TuningReport {
    let baseline = trajectory[0].clone();
    // Earliest sample wins ties.
    let best = trajectory
        .iter()
        .fold(&trajectory[0], |best, s| if s.beats(best) { s } else { best })
        .clone();
    let improvement_ratio = match (best.metric, baseline.metric) {
        (Some(b), Some(d)) if d > 0.0 => Some(b / d),
        _ => None,
    };
    TuningReport {
        format_version: REPORT_FORMAT_VERSION,
        algo: strategy.name().to_string(),
        params: strategy.params_json(),
        seed,
        budget,
        objective,
        baseline,
        best,
        improvement_ratio,
        termination,
        resumed_from,
        trajectory,
        config: None,
    }
}

/// Tunes a closure-backed objective with RRS. Evaluator errors on search
/// samples are recorded as failed tests; an error on the baseline is fatal.
pub fn rrs_tune<E, F>(
    mut evaluate: F,
    space: &ParameterSpace,
    budget: u64,
    baseline: &ConfigSetting,
    params: RrsParams,
    seed: u64,
) -> Result<TuningReport, SearchError>
where
    F: FnMut(&ConfigSetting) -> Result<f64, E>,
    E: fmt::Display,
{
    let mut strategy = Rrs::new(space.dim(), params, seed)?;
    let mut eval = |s: &ConfigSetting| -> Result<Evaluation, std::convert::Infallible> {
        Ok(match evaluate(s) {
            Ok(y) => Evaluation::ok(y),
            Err(e) => Evaluation::failed(e.to_string()),
        })
    };
    let mut record = |_: &Sample| Ok(());
    Driver::new(space, budget, baseline.clone(), seed)
        .run(&mut strategy, &mut eval, &mut record)
        .map_err(|e| match e {
            DriveError::Search(e) => e,
            DriveError::Aborted { cause, .. } => match cause {},
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{Parameter, Value};

    fn unit(coords: &[f64]) -> UnitPoint {
        UnitPoint::new(coords.to_vec()).unwrap()
    }

    /// Independent evaluation of ceil(ln(1-p)/ln(1-r)): the smallest n with
    /// (1-r)^n <= 1-p, found by repeated multiplication.
    fn n_explore_oracle(p: f64, r: f64) -> usize {
        let mut n = 0;
        let mut miss = 1.0f64;
        while miss > 1.0 - p + 1e-15 {
            miss *= 1.0 - r;
            n += 1;
        }
        n.max(1)
    }

    #[test]
    fn n_explore_examples() {
        let mk = |p, r| RrsParams {
            p_explore: p,
            r_percentile: r,
            ..RrsParams::default()
        };
        assert_eq!(n_explore_oracle(0.99, 0.1), 44);
        assert_eq!(mk(0.99, 0.1).n_explore(), 44);
        assert_eq!(n_explore_oracle(0.95, 0.05), 59);
        assert_eq!(mk(0.95, 0.05).n_explore(), 59);
        assert_eq!(mk(0.5, 0.5).n_explore(), 1);
        assert_eq!(RrsParams::default().n_explore(), 44);
    }

    #[test]
    fn params_validation() {
        assert!(RrsParams::default().validate().is_ok());
        let bad = [
            RrsParams { p_explore: 1.0, ..Default::default() },
            RrsParams { r_percentile: 0.0, ..Default::default() },
            RrsParams { exploit_count: 0, ..Default::default() },
            RrsParams { shrink: 1.0, ..Default::default() },
            RrsParams { r0: 1.5, ..Default::default() },
            RrsParams { rho_min: 0.3, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn fresh_state_proposes_first_lhs_point() {
        let mut rrs = Rrs::new(3, RrsParams::default(), 17).unwrap();
        let design = sampling::lhs(3, 44, derive_seed(17, 0)).unwrap();
        let p = rrs.propose().unwrap();
        assert_eq!(p.phase, Phase::Explore);
        assert_eq!(&p.point, &design.points()[0]);
    }

    #[test]
    fn exploit_proposal_is_contained_and_deterministic() {
        let mut rrs = Rrs::new(2, RrsParams::default(), 3).unwrap();
        rrs.set_exploiting(unit(&[0.5, 0.5]), 1.0, 0.2);
        let mut twin = rrs.clone();
        let a = rrs.propose().unwrap();
        let b = twin.propose().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.phase, Phase::Exploit);
        for &c in a.point.coords() {
            assert!((0.3 - 1e-12..=0.7 + 1e-12).contains(&c));
        }
    }

    #[test]
    fn recenter_on_improvement() {
        let mut rrs = Rrs::new(2, RrsParams::default(), 3).unwrap();
        rrs.set_exploiting(unit(&[0.5, 0.5]), 1.0, 0.2);
        let p = rrs.propose().unwrap().point;
        rrs.observe(&p, Some(2.0)).unwrap();
        match rrs.phase() {
            RrsPhase::Exploiting { center, center_metric, radius, since_improve } => {
                assert_eq!(center, &p);
                assert_eq!(*center_metric, 2.0);
                assert_eq!(*radius, 0.2);
                assert_eq!(*since_improve, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shrink_after_l_failures() {
        let params = RrsParams { exploit_count: 8, shrink: 0.5, ..Default::default() };
        let mut rrs = Rrs::new(2, params, 3).unwrap();
        rrs.set_exploiting(unit(&[0.5, 0.5]), 1.0, 0.2);
        for _ in 0..8 {
            let p = rrs.propose().unwrap().point;
            rrs.observe(&p, Some(0.0)).unwrap();
        }
        match rrs.phase() {
            RrsPhase::Exploiting { radius, since_improve, .. } => {
                assert!((radius - 0.1).abs() < 1e-15);
                assert_eq!(*since_improve, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn restart_below_rho_min() {
        let params = RrsParams { exploit_count: 1, shrink: 0.5, rho_min: 0.015, ..Default::default() };
        let mut rrs = Rrs::new(1, params, 3).unwrap();
        rrs.set_exploiting(unit(&[0.5]), 1.0, 0.02);
        let p = rrs.propose().unwrap().point;
        rrs.observe(&p, None).unwrap();
        match rrs.phase() {
            RrsPhase::Exploring { collected, best, .. } => {
                assert_eq!(*collected, 0);
                assert!(best.is_none());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(rrs.episode(), 1);
    }

    #[test]
    fn exploration_completes_into_exploitation_at_best() {
        let params = RrsParams { p_explore: 0.5, r_percentile: 0.2, ..Default::default() };
        let n = params.n_explore();
        assert_eq!(n, 4);
        let mut rrs = Rrs::new(1, params, 9).unwrap();
        let mut best = (None, f64::MIN);
        for i in 0..n {
            let p = rrs.propose().unwrap().point;
            let y = [3.0, 7.0, 5.0, 1.0][i];
            if y > best.1 {
                best = (Some(p.clone()), y);
            }
            rrs.observe(&p, Some(y)).unwrap();
        }
        assert_eq!(rrs.threshold(), Some(7.0));
        match rrs.phase() {
            RrsPhase::Exploiting { center, center_metric, radius, .. } => {
                assert_eq!(Some(center.clone()), best.0);
                assert_eq!(*center_metric, 7.0);
                assert_eq!(*radius, 0.25);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn early_jump_when_threshold_beaten() {
        let params = RrsParams { p_explore: 0.5, r_percentile: 0.2, exploit_count: 1, rho_min: 0.2, ..Default::default() };
        let mut rrs = Rrs::new(1, params.clone(), 9).unwrap();
        // First exploration: threshold becomes 5.
        for _ in 0..4 {
            let p = rrs.propose().unwrap().point;
            rrs.observe(&p, Some(5.0)).unwrap();
        }
        // One failure shrinks 0.25 -> 0.125 < 0.2: restart.
        let p = rrs.propose().unwrap().point;
        rrs.observe(&p, Some(0.0)).unwrap();
        assert!(matches!(rrs.phase(), RrsPhase::Exploring { .. }));
        let p = rrs.propose().unwrap().point;
        rrs.observe(&p, Some(4.0)).unwrap();
        assert!(matches!(rrs.phase(), RrsPhase::Exploring { collected: 1, .. }));
        let p = rrs.propose().unwrap().point;
        rrs.observe(&p, Some(6.0)).unwrap();
        assert!(matches!(rrs.phase(), RrsPhase::Exploiting { center_metric, .. } if *center_metric == 6.0));

        let mut no_jump = Rrs::new(1, RrsParams { early_jump: false, ..params }, 9).unwrap();
        for _ in 0..4 {
            let p = no_jump.propose().unwrap().point;
            no_jump.observe(&p, Some(5.0)).unwrap();
        }
        let p = no_jump.propose().unwrap().point;
        no_jump.observe(&p, Some(0.0)).unwrap();
        let p = no_jump.propose().unwrap().point;
        no_jump.observe(&p, Some(6.0)).unwrap();
        assert!(matches!(no_jump.phase(), RrsPhase::Exploring { collected: 1, .. }));
    }

    #[test]
    fn observe_checks_protocol() {
        let mut rrs = Rrs::new(1, RrsParams::default(), 1).unwrap();
        assert!(matches!(rrs.observe(&unit(&[0.5]), Some(1.0)), Err(SearchError::NoPendingProposal)));
        let p = rrs.propose().unwrap().point;
        let other = unit(&[if p.coords()[0] > 0.5 { 0.1 } else { 0.9 }]);
        assert!(matches!(rrs.observe(&other, Some(1.0)), Err(SearchError::PointMismatch)));
        rrs.observe(&p, Some(1.0)).unwrap();
    }

    #[test]
    fn restart_reachability_bound() {
        let params = RrsParams::default();
        assert_eq!(params.max_stall(), 40);
        let mut rrs = Rrs::new(2, params.clone(), 5).unwrap();
        rrs.set_exploiting(unit(&[0.5, 0.5]), 10.0, params.r0);
        let mut steps = 0;
        while matches!(rrs.phase(), RrsPhase::Exploiting { .. }) {
            let p = rrs.propose().unwrap().point;
            rrs.observe(&p, Some(0.0)).unwrap();
            steps += 1;
            assert!(steps <= params.max_stall());
        }
        assert_eq!(steps, params.max_stall());
    }

    fn quad_space() -> ParameterSpace {
        ParameterSpace::new(vec![Parameter::real("x", 0.0, 10.0).unwrap()]).unwrap()
    }

    fn quad(s: &ConfigSetting) -> Result<f64, String> {
        let x = s.values()[0].as_f64().unwrap();
        Ok(-(x - 3.0) * (x - 3.0))
    }

    #[test]
    fn rrs_tune_finds_quadratic_optimum() {
        // Grid oracle: 10^4 + 1 points over [0, 10].
        let (x_star, f_star) = (0..=10_000)
            .map(|i| i as f64 * 10.0 / 10_000.0)
            .map(|x| (x, -(x - 3.0) * (x - 3.0)))
            .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
        assert!((x_star - 3.0).abs() < 1e-9 && f_star == 0.0);

        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        for seed in 0..5 {
            let report = rrs_tune(quad, &space, 200, &baseline, RrsParams::default(), seed).unwrap();
            let x = report.best.setting.values()[0].as_f64().unwrap();
            assert!((x - x_star).abs() <= 0.1, "seed {seed}: x = {x}");
            assert_eq!(report.trajectory.len(), 200);
            assert!(report.best.metric.unwrap() <= f_star);
        }
    }

    #[test]
    fn budget_one_is_baseline_only() {
        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        let report = rrs_tune(quad, &space, 1, &baseline, RrsParams::default(), 1).unwrap();
        assert_eq!(report.trajectory.len(), 1);
        assert_eq!(report.best, report.baseline);
        assert_eq!(report.baseline.phase, Phase::Baseline);
        assert!(report.improvement_ratio.is_none());
    }

    #[test]
    fn failed_samples_consume_budget() {
        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        let mut calls = 0;
        let eval = |s: &ConfigSetting| {
            calls += 1;
            let x = s.values()[0].as_f64().unwrap();
            if x > 5.0 { Err("crashed".to_string()) } else { quad(s) }
        };
        let report = rrs_tune(eval, &space, 60, &baseline, RrsParams::default(), 2).unwrap();
        assert_eq!(calls, 60);
        let failed = report.trajectory.iter().filter(|s| s.status == TestStatus::Failed).count();
        assert!(failed > 0);
        assert!(report.trajectory.iter().filter(|s| s.metric.is_none()).all(|s| s.status == TestStatus::Failed));
        assert!(report.best.metric.is_some());
    }

    #[test]
    fn baseline_failure_is_fatal() {
        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        let err = rrs_tune(|_| Err::<f64, _>("down"), &space, 10, &baseline, RrsParams::default(), 2)
            .unwrap_err();
        assert!(matches!(err, SearchError::BaselineFailed(ref m) if m == "down"));
    }

    #[test]
    fn ties_keep_earliest_sample() {
        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        let report = rrs_tune(|_| Ok::<_, String>(1.0), &space, 30, &baseline, RrsParams::default(), 2).unwrap();
        assert_eq!(report.best.test_index, 0);
        assert_eq!(report.improvement_ratio, Some(1.0));
    }

    #[test]
    fn random_and_lhs_spend_exact_budget() {
        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        let mut count = 0;
        let mut eval = |s: &ConfigSetting| -> Result<Evaluation, std::convert::Infallible> {
            count += 1;
            Ok(Evaluation::ok(quad(s).unwrap()))
        };
        let mut rnd = RandomSearch::new(1, 4);
        let r = Driver::new(&space, 25, baseline.clone(), 4)
            .run(&mut rnd, &mut eval, &mut |_| Ok(()))
            .unwrap();
        assert_eq!(r.trajectory.len(), 25);
        assert_eq!(count, 25);

        let mut lhs = LhsSearch::new(space.clone(), 25, 4).unwrap();
        let r = Driver::new(&space, 26, baseline, 4)
            .run(&mut lhs, &mut |s| Ok::<_, std::convert::Infallible>(Evaluation::ok(quad(s).unwrap())), &mut |_| Ok(()))
            .unwrap();
        let pts: Vec<UnitPoint> = r.trajectory[1..].iter().map(|s| s.point.clone()).collect();
        assert_eq!(pts.len(), 25);
        assert_eq!(sampling::stratification_violations(&pts), 0);
    }

    #[test]
    fn exhaustive_lhs_enumerates_grid() {
        let space = ParameterSpace::new(vec![
            Parameter::int("n", 0, 3).unwrap(),
            Parameter::enumeration("c", ["a", "b", "c"]).unwrap(),
            Parameter::boolean("b").unwrap(),
        ])
        .unwrap();
        let size = space.discrete_size().unwrap();
        assert_eq!(size, 24);
        let baseline = ConfigSetting::new(vec![Value::Int(1), Value::Label("b".into()), Value::Bool(false)]);
        let mut lhs = LhsSearch::new(space.clone(), size as usize, 8).unwrap();
        assert!(lhs.is_exhaustive());
        let r = Driver::new(&space, size, baseline, 8)
            .run(&mut lhs, &mut |_| Ok::<_, std::convert::Infallible>(Evaluation::ok(0.0)), &mut |_| Ok(()))
            .unwrap();
        let mut seen: Vec<String> = r.trajectory.iter().map(|s| format!("{:?}", s.setting)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len() as u64, size);
    }

    #[test]
    fn report_json_round_trip() {
        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        let report = rrs_tune(quad, &space, 20, &baseline, RrsParams::default(), 1).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let back: TuningReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.trajectory.len(), 20);
        assert_eq!(back.best.metric, report.best.metric);
        assert_eq!(back.trajectory[3].point, report.trajectory[3].point);
    }

    #[test]
    fn best_so_far_is_monotone() {
        let space = quad_space();
        let baseline = ConfigSetting::new(vec![Value::Real(0.0)]);
        let report = rrs_tune(quad, &space, 80, &baseline, RrsParams::default(), 6).unwrap();
        let curve = report.best_so_far();
        assert!(curve.windows(2).all(|w| w[1].1 >= w[0].1));
        assert_eq!(curve.last().unwrap().1, report.best.metric);
    }
}
