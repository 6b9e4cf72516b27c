//! Test execution: a [`SystemManipulator`] puts a setting into effect and a
//! [`WorkloadGenerator`] measures it. [`evaluate`] performs one budgeted test
//! and [`run_tuning`] drives a [`Strategy`] over a whole budget, persisting
//! each test as it completes.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::adapters::TrajectoryStore;
use crate::error::HarnessError;
use crate::search::{DriveError, Driver, Evaluation, Objective, Sample, Strategy, TuningReport};
use crate::space::{ConfigSetting, ParameterSpace};
use crate::synth::SyntheticSurface;

/// Failure of one manipulator or workload step.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StepError {
    /// The SUT refused the setting.
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("failed: {0}")]
    Failed(String),
    /// Unrecoverable; aborts the tuning run.
    #[error("fatal: {0}")]
    Fatal(String),
}

/// Controls the system under tune.
pub trait SystemManipulator {
    fn apply(&mut self, setting: &ConfigSetting) -> Result<(), StepError>;
    fn restart(&mut self) -> Result<(), StepError>;
    fn await_ready(&mut self, timeout: Duration) -> Result<(), StepError>;
    fn teardown(&mut self) -> Result<(), StepError>;
}

/// Applies load to the system and reports what it measured.
pub trait WorkloadGenerator {
    fn run(&mut self) -> Result<MetricBundle, StepError>;
}

/// Named metric values of one workload run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricBundle {
    values: BTreeMap<String, f64>,
}

impl MetricBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a metric; non-finite values are dropped.
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        if value.is_finite() {
            self.values.insert(key.into(), value);
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: f64) -> Self {
        self.insert(key, value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn values(&self) -> &BTreeMap<String, f64> {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Objective on the maximized scale.
    pub fn objective_value(&self, objective: &Objective) -> Option<f64> {
        self.get(&objective.key).map(|v| objective.direction.normalize(v))
    }
}

impl From<BTreeMap<String, f64>> for MetricBundle {
    fn from(values: BTreeMap<String, f64>) -> Self {
        let mut b = MetricBundle::new();
        for (k, v) in values {
            b.insert(k, v);
        }
        b
    }
}

/// Test allowance of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TuningBudget {
    max_tests: u64,
    consumed: u64,
}

impl TuningBudget {
    pub fn new(max_tests: u64) -> Self {
        Self {
            max_tests,
            consumed: 0,
        }
    }

    pub fn max_tests(&self) -> u64 {
        self.max_tests
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn remaining(&self) -> u64 {
        self.max_tests - self.consumed
    }

    pub fn consume(&mut self) -> Result<(), HarnessError> {
        if self.consumed >= self.max_tests {
            return Err(HarnessError::BudgetExhausted(self.max_tests));
        }
        self.consumed += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeStatus {
    Ok,
    Failed,
}

/// Result of one budgeted test.
#[derive(Debug, Clone, PartialEq)]
pub struct TestOutcome {
    pub setting: ConfigSetting,
    pub repeats: Vec<MetricBundle>,
    /// Median objective over successful repeats, maximized scale.
    pub aggregated: Option<f64>,
    /// Per-metric medians over successful repeats, raw direction.
    pub aggregated_metrics: BTreeMap<String, f64>,
    pub status: OutcomeStatus,
    pub duration: Duration,
    pub error: Option<String>,
}

impl TestOutcome {
    fn failed(setting: &ConfigSetting, started: Instant, error: String) -> Self {
        Self {
            setting: setting.clone(),
            repeats: Vec::new(),
            aggregated: None,
            aggregated_metrics: BTreeMap::new(),
            status: OutcomeStatus::Failed,
            duration: started.elapsed(),
            error: Some(error),
        }
    }

    pub fn to_evaluation(&self) -> Evaluation {
        Evaluation {
            metric: self.aggregated,
            metrics: self.aggregated_metrics.clone(),
            error: self.error.clone(),
        }
    }
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Test knobs shared by every evaluation of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPlan {
    pub objective: Objective,
    pub repeats: u32,
    pub ready_timeout: Duration,
}

impl TestPlan {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            repeats: 1,
            ready_timeout: Duration::ZERO,
        }
    }
}

/// One test: apply, restart, wait for readiness, then run the workload
/// `repeats` times. Consumes exactly one budget unit. Only
/// [`StepError::Fatal`] is returned as an error; every other failure yields
/// a failed outcome.
pub fn evaluate(
    setting: &ConfigSetting,
    manipulator: &mut dyn SystemManipulator,
    workload: &mut dyn WorkloadGenerator,
    plan: &TestPlan,
    budget: &mut TuningBudget,
) -> Result<TestOutcome, HarnessError> {
    budget.consume()?;
    let started = Instant::now();
    let prepared = manipulator
        .apply(setting)
        .and_then(|_| manipulator.restart())
        .and_then(|_| manipulator.await_ready(plan.ready_timeout));
    match prepared {
        Err(StepError::Fatal(m)) => return Err(HarnessError::Fatal(m)),
        Err(e) => return Ok(TestOutcome::failed(setting, started, e.to_string())),
        Ok(()) => {}
    }

    let mut repeats = Vec::with_capacity(plan.repeats as usize);
    let mut last_error = None;
    for _ in 0..plan.repeats.max(1) {
        match workload.run() {
            Ok(bundle) if bundle.objective_value(&plan.objective).is_some() => repeats.push(bundle),
            Ok(_) => last_error = Some(format!("objective {:?} missing", plan.objective.key)),
            Err(StepError::Fatal(m)) => return Err(HarnessError::Fatal(m)),
            Err(e) => last_error = Some(e.to_string()),
        }
    }
    if repeats.is_empty() {
        return Ok(TestOutcome::failed(
            setting,
            started,
            last_error.unwrap_or_else(|| "no workload runs".into()),
        ));
    }

    let mut objective: Vec<f64> = repeats
        .iter()
        .filter_map(|b| b.objective_value(&plan.objective))
        .collect();
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for b in &repeats {
        for (k, v) in b.values() {
            per_metric.entry(k.clone()).or_default().push(*v);
        }
    }
    let aggregated_metrics = per_metric
        .into_iter()
        .filter_map(|(k, mut vs)| median(&mut vs).map(|m| (k, m)))
        .collect();
    Ok(TestOutcome {
        setting: setting.clone(),
        aggregated: median(&mut objective),
        aggregated_metrics,
        repeats,
        status: OutcomeStatus::Ok,
        duration: started.elapsed(),
        error: None,
    })
}

/// Drives `strategy` until `max_tests` tests have been spent, counting any
/// `prior` tests recovered from `store`. Each completed test is appended to
/// the store before the strategy observes it; the final report is written
/// there too. A fatal manipulator error aborts with a partial report.
#[allow(clippy::too_many_arguments)]
pub fn run_tuning(
    space: &ParameterSpace,
    strategy: &mut dyn Strategy,
    manipulator: &mut dyn SystemManipulator,
    workload: &mut dyn WorkloadGenerator,
    plan: &TestPlan,
    max_tests: u64,
    baseline: &ConfigSetting,
    seed: u64,
    mut store: Option<&mut TrajectoryStore>,
    prior: Vec<Sample>,
) -> Result<TuningReport, HarnessError> {
    let mut budget = TuningBudget::new(max_tests);
    for _ in 0..prior.len() {
        budget.consume()?;
    }
    if !prior.is_empty() {
        info!("resuming after {} recorded tests", prior.len());
    }

    let mut eval = |s: &ConfigSetting| -> Result<Evaluation, HarnessError> {
        let outcome = evaluate(s, manipulator, workload, plan, &mut budget)?;
        if let Some(e) = &outcome.error {
            warn!("test {} failed: {e}", budget.consumed() - 1);
        }
        Ok(outcome.to_evaluation())
    };
    let mut record = |sample: &Sample| -> Result<(), HarnessError> {
        if let Some(store) = store.as_deref_mut() {
            store.append(sample)?;
        }
        Ok(())
    };
    let result = Driver::new(space, max_tests, baseline.clone(), seed)
        .objective(plan.objective.clone())
        .resume_from(prior)
        .run(strategy, &mut eval, &mut record);

    let report = match result {
        Ok(report) => report,
        Err(DriveError::Search(e)) => return Err(e.into()),
        Err(DriveError::Aborted { cause, partial }) => {
            let _ = manipulator.teardown();
            return match partial {
                Some(report) => {
                    if let Some(store) = store {
                        store.write_report(&report, space)?;
                    }
                    Err(HarnessError::Aborted {
                        cause: cause.to_string(),
                        partial: report,
                    })
                }
                None => Err(cause),
            };
        }
    };
    if let Err(e) = manipulator.teardown() {
        warn!("teardown: {e}");
    }
    if let Some(store) = store {
        store.write_report(&report, space)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Synthetic system under tune
// ---------------------------------------------------------------------------

/// Manipulator half of a synthetic SUT. Rejects settings outside the
/// surface's space.
pub struct SyntheticManipulator {
    space: ParameterSpace,
    applied: Arc<Mutex<Option<ConfigSetting>>>,
}

/// Workload half of a synthetic SUT: reports the surface value of the
/// applied setting under `metric`.
pub struct SyntheticWorkload {
    surface: SyntheticSurface,
    metric: String,
    applied: Arc<Mutex<Option<ConfigSetting>>>,
    draws: u64,
}

/// Builds a manipulator/workload pair sharing the applied setting.
pub fn synthetic_sut(
    surface: SyntheticSurface,
    metric: impl Into<String>,
) -> (SyntheticManipulator, SyntheticWorkload) {
    let applied = Arc::new(Mutex::new(None));
    (
        SyntheticManipulator {
            space: surface.space().clone(),
            applied: Arc::clone(&applied),
        },
        SyntheticWorkload {
            surface,
            metric: metric.into(),
            applied,
            draws: 0,
        },
    )
}

impl SystemManipulator for SyntheticManipulator {
    fn apply(&mut self, setting: &ConfigSetting) -> Result<(), StepError> {
        if let Err(v) = self.space.validate(setting) {
            let msg = v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
            return Err(StepError::Rejected(msg));
        }
        *self.applied.lock().map_err(|_| StepError::Fatal("poisoned".into()))? = Some(setting.clone());
        Ok(())
    }

    fn restart(&mut self) -> Result<(), StepError> {
        Ok(())
    }

    fn await_ready(&mut self, _timeout: Duration) -> Result<(), StepError> {
        Ok(())
    }

    fn teardown(&mut self) -> Result<(), StepError> {
        Ok(())
    }
}

impl WorkloadGenerator for SyntheticWorkload {
    fn run(&mut self) -> Result<MetricBundle, StepError> {
        let applied = self.applied.lock().map_err(|_| StepError::Fatal("poisoned".into()))?;
        let setting = applied
            .as_ref()
            .ok_or_else(|| StepError::Failed("no setting applied".into()))?;
        let value = self.surface.noisy_value(setting, self.draws);
        self.draws += 1;
        Ok(MetricBundle::new().with(self.metric.clone(), value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::{Direction, RandomSearch, Rrs, RrsParams};
    use crate::space::{Parameter, Value};

    struct Scripted {
        runs: Vec<Result<MetricBundle, StepError>>,
    }

    impl WorkloadGenerator for Scripted {
        fn run(&mut self) -> Result<MetricBundle, StepError> {
            self.runs.remove(0)
        }
    }

    struct Healthy;

    impl SystemManipulator for Healthy {
        fn apply(&mut self, _: &ConfigSetting) -> Result<(), StepError> {
            Ok(())
        }
        fn restart(&mut self) -> Result<(), StepError> {
            Ok(())
        }
        fn await_ready(&mut self, _: Duration) -> Result<(), StepError> {
            Ok(())
        }
        fn teardown(&mut self) -> Result<(), StepError> {
            Ok(())
        }
    }

    fn tp(v: f64) -> Result<MetricBundle, StepError> {
        Ok(MetricBundle::new().with("tp", v))
    }

    fn setting() -> ConfigSetting {
        ConfigSetting::new(vec![Value::Real(1.0)])
    }

    #[test]
    fn single_run_passes_through() {
        let mut budget = TuningBudget::new(3);
        let plan = TestPlan::new(Objective::maximize("tp"));
        let out = evaluate(&setting(), &mut Healthy, &mut Scripted { runs: vec![tp(42.0)] }, &plan, &mut budget).unwrap();
        assert_eq!(out.status, OutcomeStatus::Ok);
        assert_eq!(out.aggregated, Some(42.0));
        assert_eq!(budget.consumed(), 1);
    }

    #[test]
    fn repeats_aggregate_by_median_and_cost_one_test() {
        let mut budget = TuningBudget::new(3);
        let plan = TestPlan { repeats: 3, ..TestPlan::new(Objective::maximize("tp")) };
        let mut w = Scripted { runs: vec![tp(10.0), tp(14.0), tp(12.0)] };
        let out = evaluate(&setting(), &mut Healthy, &mut w, &plan, &mut budget).unwrap();
        assert_eq!(out.aggregated, Some(12.0));
        assert_eq!(out.repeats.len(), 3);
        assert_eq!(budget.consumed(), 1);
    }

    #[test]
    fn minimize_is_negated() {
        let mut budget = TuningBudget::new(1);
        let plan = TestPlan::new(Objective { key: "lat".into(), direction: Direction::Minimize });
        let mut w = Scripted { runs: vec![Ok(MetricBundle::new().with("lat", 5.0))] };
        let out = evaluate(&setting(), &mut Healthy, &mut w, &plan, &mut budget).unwrap();
        assert_eq!(out.aggregated, Some(-5.0));
        assert_eq!(out.aggregated_metrics["lat"], 5.0);
    }

    #[test]
    fn rejected_setting_fails_and_consumes_budget() {
        let surface = SyntheticSurface::quad1d();
        let (mut m, mut w) = synthetic_sut(surface, "tp");
        let mut budget = TuningBudget::new(2);
        let plan = TestPlan::new(Objective::maximize("tp"));
        let out = evaluate(&ConfigSetting::new(vec![Value::Real(99.0)]), &mut m, &mut w, &plan, &mut budget).unwrap();
        assert_eq!(out.status, OutcomeStatus::Failed);
        assert!(out.error.unwrap().contains("out-of-range"));
        assert_eq!(budget.consumed(), 1);
    }

    #[test]
    fn partial_run_failures_and_all_failed() {
        let mut budget = TuningBudget::new(2);
        let plan = TestPlan { repeats: 3, ..TestPlan::new(Objective::maximize("tp")) };
        let mut w = Scripted {
            runs: vec![Err(StepError::Failed("x".into())), tp(7.0), Ok(MetricBundle::new())],
        };
        let out = evaluate(&setting(), &mut Healthy, &mut w, &plan, &mut budget).unwrap();
        assert_eq!(out.aggregated, Some(7.0));

        let mut w = Scripted {
            runs: vec![Err(StepError::Timeout("slow".into())); 3],
        };
        let out = evaluate(&setting(), &mut Healthy, &mut w, &plan, &mut budget).unwrap();
        assert_eq!(out.status, OutcomeStatus::Failed);
        assert!(matches!(
            evaluate(&setting(), &mut Healthy, &mut w, &plan, &mut budget),
            Err(HarnessError::BudgetExhausted(2))
        ));
    }

    #[test]
    fn fatal_step_is_an_error() {
        let mut budget = TuningBudget::new(2);
        let plan = TestPlan::new(Objective::maximize("tp"));
        let mut w = Scripted { runs: vec![Err(StepError::Fatal("gone".into()))] };
        assert!(matches!(
            evaluate(&setting(), &mut Healthy, &mut w, &plan, &mut budget),
            Err(HarnessError::Fatal(_))
        ));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn random_run_spends_exact_budget() {
        let surface = SyntheticSurface::quad1d();
        let space = surface.space().clone();
        let baseline = surface.default_setting();
        let (mut m, mut w) = synthetic_sut(surface, "tp");
        let plan = TestPlan::new(Objective::maximize("tp"));
        let mut strategy = RandomSearch::new(1, 3);
        let r = run_tuning(&space, &mut strategy, &mut m, &mut w, &plan, 10, &baseline, 3, None, vec![]).unwrap();
        assert_eq!(r.trajectory.len(), 10);
        assert_eq!(w.draws, 10);
    }

    #[test]
    fn rrs_on_bumpy_dominates_baseline() {
        let surface = SyntheticSurface::bumpy();
        let space = surface.space().clone();
        let baseline = surface.default_setting();
        let (mut m, mut w) = synthetic_sut(surface, "tp");
        let plan = TestPlan::new(Objective::maximize("tp"));
        let mut strategy = Rrs::new(3, RrsParams::default(), 1).unwrap();
        let r = run_tuning(&space, &mut strategy, &mut m, &mut w, &plan, 120, &baseline, 1, None, vec![]).unwrap();
        assert!(r.best.metric >= r.baseline.metric);
    }

    struct DiesAfter(u32);

    impl SystemManipulator for DiesAfter {
        fn apply(&mut self, _: &ConfigSetting) -> Result<(), StepError> {
            if self.0 == 0 {
                return Err(StepError::Fatal("host unreachable".into()));
            }
            self.0 -= 1;
            Ok(())
        }
        fn restart(&mut self) -> Result<(), StepError> {
            Ok(())
        }
        fn await_ready(&mut self, _: Duration) -> Result<(), StepError> {
            Ok(())
        }
        fn teardown(&mut self) -> Result<(), StepError> {
            Ok(())
        }
    }

    struct Const;

    impl WorkloadGenerator for Const {
        fn run(&mut self) -> Result<MetricBundle, StepError> {
            tp(1.0)
        }
    }

    #[test]
    fn fatal_error_returns_partial_report() {
        let space = ParameterSpace::new(vec![Parameter::real("x", 0.0, 1.0).unwrap()]).unwrap();
        let plan = TestPlan::new(Objective::maximize("tp"));
        let mut strategy = RandomSearch::new(1, 0);
        let err = run_tuning(&space, &mut strategy, &mut DiesAfter(4), &mut Const, &plan, 10, &setting_half(), 0, None, vec![])
            .unwrap_err();
        match err {
            HarnessError::Aborted { partial, .. } => {
                assert_eq!(partial.trajectory.len(), 4);
                assert_eq!(partial.termination, crate::search::Termination::UserStop);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn setting_half() -> ConfigSetting {
        ConfigSetting::new(vec![Value::Real(0.5)])
    }

    #[test]
    fn direction_normalization_picks_same_setting() {
        // Exhaustive check on a small discrete space: maximizing the negated
        // cost picks the argmin of the cost.
        let space = ParameterSpace::new(vec![
            Parameter::int("a", 0, 5).unwrap(),
            Parameter::enumeration("b", ["x", "y", "z"]).unwrap(),
        ])
        .unwrap();
        let cost = |s: &ConfigSetting| {
            let a = s.values()[0].as_f64().unwrap();
            let b = match &s.values()[1] {
                Value::Label(l) if l == "y" => 0.5,
                _ => 2.0,
            };
            (a - 3.0).powi(2) + b
        };
        let mut all = Vec::new();
        for a in 0..=5 {
            for b in ["x", "y", "z"] {
                all.push(ConfigSetting::new(vec![Value::Int(a), Value::Label(b.into())]));
            }
        }
        assert_eq!(all.len() as u64, space.discrete_size().unwrap());
        let argmin = all.iter().min_by(|x, y| cost(x).total_cmp(&cost(y))).unwrap().clone();
        let objective = Objective { key: "cost".into(), direction: Direction::Minimize };
        let argmax_neg = all
            .iter()
            .max_by(|x, y| {
                let bx = MetricBundle::new().with("cost", cost(x));
                let by = MetricBundle::new().with("cost", cost(y));
                bx.objective_value(&objective).unwrap().total_cmp(&by.objective_value(&objective).unwrap())
            })
            .unwrap()
            .clone();
        assert_eq!(argmin, argmax_neg);
    }
}
