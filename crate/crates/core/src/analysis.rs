//! Reading tuning results: default-vs-tuned improvement tables, equal-budget
//! comparison of two tuned systems, and bottleneck identification across
//! systems and their combinations.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{AdapterError, AnalysisError};
use crate::harness::MetricBundle;
use crate::search::{Direction, TuningReport};

/// Rounds half away from zero to `decimals` places.
pub fn round_half_up(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    // The relative nudge keeps values such as 1.005 (stored as 1.00499..)
    // on the side their decimal spelling suggests.
    let scaled = x.abs() * scale * (1.0 + 4.0 * f64::EPSILON);
    x.signum() * (scaled + 0.5).floor() / scale
}

/// Signed percentage with two decimals, e.g. `+4.09%`.
pub fn format_percent(pct: f64) -> String {
    let r = round_half_up(pct, 2);
    if r == 0.0 {
        "0.00%".into()
    } else {
        format!("{r:+.2}%")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub metric: String,
    pub direction: Direction,
    pub default: f64,
    pub tuned: f64,
    /// `(tuned - default) / default` in percent; absent when the default is 0.
    pub change_pct: Option<f64>,
    /// The tuned value is better than the default in the metric's direction.
    pub improved: bool,
}

impl ImprovementRow {
    pub fn display_change(&self) -> String {
        self.change_pct.map_or_else(|| "undefined".into(), format_percent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementSummary {
    pub rows: Vec<ImprovementRow>,
}

/// Per-metric change from `default` to `tuned`. Metrics missing from
/// `directions` are treated as maximize. Only keys present in both bundles
/// are reported.
pub fn summarize(
    default: &MetricBundle,
    tuned: &MetricBundle,
    directions: &BTreeMap<String, Direction>,
) -> Result<ImprovementSummary, AnalysisError> {
    let mut rows = Vec::new();
    for (key, &d) in default.values() {
        let Some(t) = tuned.get(key) else { continue };
        let direction = directions.get(key).copied().unwrap_or_default();
        let change_pct = (d != 0.0).then(|| (t - d) / d * 100.0);
        rows.push(ImprovementRow {
            metric: key.clone(),
            direction,
            default: d,
            tuned: t,
            change_pct,
            improved: direction.normalize(t) > direction.normalize(d),
        });
    }
    if rows.is_empty() {
        let key = default.values().keys().chain(tuned.values().keys()).next();
        return Err(AnalysisError::MissingMetric(key.cloned().unwrap_or_default()));
    }
    Ok(ImprovementSummary { rows })
}

/// Baseline vs best test of a report. Without recorded metric maps the
/// objective alone is summarized.
pub fn summarize_report(
    report: &TuningReport,
    directions: &BTreeMap<String, Direction>,
) -> Result<ImprovementSummary, AnalysisError> {
    let mut directions = directions.clone();
    directions
        .entry(report.objective.key.clone())
        .or_insert(report.objective.direction);
    let bundle = |s: &crate::search::Sample| {
        let mut b = MetricBundle::from(s.metrics.clone());
        if b.get(&report.objective.key).is_none() {
            if let Some(m) = s.metric {
                b.insert(report.objective.key.clone(), report.objective.direction.normalize(m));
            }
        }
        b
    };
    summarize(&bundle(&report.baseline), &bundle(&report.best), &directions)
}

impl ImprovementSummary {
    pub fn render_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
        let v = self
            .rows
            .iter()
            .flat_map(|r| [r.default.to_string().len(), r.tuned.to_string().len()])
            .max()
            .unwrap_or(7)
            .max(7);
        let mut out = format!("{:<w$}  {:>v$}  {:>v$}  {:>11}\n", "metric", "default", "tuned", "improvement");
        for r in &self.rows {
            let arrow = if r.improved { " (better)" } else { "" };
            let _ = writeln!(
                out,
                "{:<w$}  {:>v$}  {:>v$}  {:>11}{arrow}",
                r.metric,
                r.default,
                r.tuned,
                r.display_change()
            );
        }
        out
    }

    /// `metric,default,tuned,improvement`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AdapterError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "default", "tuned", "improvement"])?;
        for r in &self.rows {
            w.write_record([r.metric.clone(), r.default.to_string(), r.tuned.to_string(), r.display_change()])?;
        }
        w.flush().map_err(|e| AdapterError::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareOrder {
    ABetter,
    BBetter,
    Tie,
}

impl fmt::Display for CompareOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompareOrder::ABetter => "A > B",
            CompareOrder::BBetter => "B > A",
            CompareOrder::Tie => "A = B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub order: CompareOrder,
    pub objective: String,
    pub budget: u64,
    /// Tuned-best objective, raw direction.
    pub best_a: f64,
    pub best_b: f64,
    pub summary_a: ImprovementSummary,
    pub summary_b: ImprovementSummary,
}

fn check_comparable(a: &TuningReport, b: &TuningReport) -> Result<(), AnalysisError> {
    if a.objective != b.objective {
        return Err(AnalysisError::ObjectiveMismatch {
            a: format!("{} ({:?})", a.objective.key, a.objective.direction),
            b: format!("{} ({:?})", b.objective.key, b.objective.direction),
        });
    }
    if a.budget != b.budget {
        return Err(AnalysisError::BudgetMismatch { a: a.budget, b: b.budget });
    }
    Ok(())
}

fn best_raw(r: &TuningReport) -> Result<f64, AnalysisError> {
    r.best
        .metric
        .map(|m| r.objective.direction.normalize(m))
        .ok_or_else(|| AnalysisError::MissingMetric(r.objective.key.clone()))
}

/// Orders two tuned systems by their best objective. Both must have been
/// tuned for the same objective under the same budget.
pub fn compare(a: &TuningReport, b: &TuningReport) -> Result<Comparison, AnalysisError> {
    check_comparable(a, b)?;
    let (best_a, best_b) = (best_raw(a)?, best_raw(b)?);
    let d = a.objective.direction;
    let order = match d.normalize(best_a).total_cmp(&d.normalize(best_b)) {
        Ordering::Greater => CompareOrder::ABetter,
        Ordering::Less => CompareOrder::BBetter,
        Ordering::Equal => CompareOrder::Tie,
    };
    let none = BTreeMap::new();
    Ok(Comparison {
        order,
        objective: a.objective.key.clone(),
        budget: a.budget,
        best_a,
        best_b,
        summary_a: summarize_report(a, &none)?,
        summary_b: summarize_report(b, &none)?,
    })
}

impl Comparison {
    pub fn render_text(&self) -> String {
        format!(
            "objective {} at budget {}\nA best: {}\nB best: {}\nverdict: {}\n",
            self.objective, self.budget, self.best_a, self.best_b, self.order
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateBest {
    pub id: String,
    /// Tuned-best objective, raw direction.
    pub best: f64,
    pub combination: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckVerdict {
    pub candidates: Vec<CandidateBest>,
    /// Every candidate attaining the worst tuned-best value.
    pub bottleneck: Vec<String>,
    /// A combination of systems is among the bottleneck candidates.
    pub interaction: bool,
    pub rule: String,
}

/// Candidate ids joining several systems with `+` denote combinations.
pub fn is_combination(id: &str) -> bool {
    id.contains('+')
}

/// The candidate whose tuned-best performance is worst is the bottleneck.
/// Ties are all reported.
pub fn identify_bottleneck(candidates: &[(String, TuningReport)]) -> Result<BottleneckVerdict, AnalysisError> {
    if candidates.len() < 2 {
        return Err(AnalysisError::TooFewCandidates(candidates.len()));
    }
    let first = &candidates[0].1;
    for (_, r) in &candidates[1..] {
        check_comparable(first, r)?;
    }
    let direction = first.objective.direction;
    let bests = candidates
        .iter()
        .map(|(id, r)| {
            Ok(CandidateBest {
                id: id.clone(),
                best: best_raw(r)?,
                combination: is_combination(id),
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let worst = bests
        .iter()
        .map(|c| direction.normalize(c.best))
        .fold(f64::INFINITY, f64::min);
    let bottleneck: Vec<String> = bests
        .iter()
        .filter(|c| direction.normalize(c.best) == worst)
        .map(|c| c.id.clone())
        .collect();
    let interaction = bottleneck.iter().any(|id| is_combination(id));
    Ok(BottleneckVerdict {
        candidates: bests,
        bottleneck,
        interaction,
        rule: format!("worst tuned-best {} at equal budget {}", first.objective.key, first.budget),
    })
}

impl BottleneckVerdict {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.candidates {
            let _ = writeln!(out, "{:<24} best {}", c.id, c.best);
        }
        let _ = writeln!(out, "bottleneck: {}", self.bottleneck.join(", "));
        if self.interaction {
            out.push_str("interaction: the limit comes from systems working together\n");
        }
        let _ = writeln!(out, "rule: {}", self.rule);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::{Objective, Phase, Sample, Termination, TestStatus};
    use crate::space::{ConfigSetting, UnitPoint, Value};
    use proptest::prelude::*;

    fn bundle(pairs: &[(&str, f64)]) -> MetricBundle {
        let mut b = MetricBundle::new();
        for (k, v) in pairs {
            b.insert(*k, *v);
        }
        b
    }

    fn minimize(keys: &[&str]) -> BTreeMap<String, Direction> {
        keys.iter().map(|k| (k.to_string(), Direction::Minimize)).collect()
    }

    #[test]
    fn table_fixture_changes() {
        let default = bundle(&[("txns", 978.0), ("failed", 165.0), ("errors", 37.0)]);
        let tuned = bundle(&[("txns", 1018.0), ("failed", 144.0), ("errors", 34.0)]);
        let s = summarize(&default, &tuned, &minimize(&["failed", "errors"])).unwrap();
        let by = |k: &str| s.rows.iter().find(|r| r.metric == k).unwrap().clone();
        // Oracle: the percent change written out by hand.
        assert_eq!(by("txns").display_change(), "+4.09%");
        assert!(by("txns").improved);
        assert_eq!(by("failed").display_change(), "-12.73%");
        assert!(by("failed").improved);
        assert_eq!(by("errors").display_change(), "-8.11%");
        assert!(by("errors").improved);
    }

    #[test]
    fn unchanged_and_zero_default() {
        let s = summarize(&bundle(&[("m", 5.0)]), &bundle(&[("m", 5.0)]), &BTreeMap::new()).unwrap();
        assert_eq!(s.rows[0].display_change(), "0.00%");
        assert!(!s.rows[0].improved);
        let s = summarize(&bundle(&[("m", 0.0)]), &bundle(&[("m", 3.0)]), &BTreeMap::new()).unwrap();
        assert_eq!(s.rows[0].change_pct, None);
        assert_eq!(s.rows[0].display_change(), "undefined");
    }

    #[test]
    fn no_shared_metric_is_an_error() {
        assert!(summarize(&bundle(&[("a", 1.0)]), &bundle(&[("b", 1.0)]), &BTreeMap::new()).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_up(1.005, 2), 1.01);
        assert_eq!(round_half_up(-1.005, 2), -1.01);
        assert_eq!(round_half_up(2.344, 2), 2.34);
        assert_eq!(format_percent(-0.001), "0.00%");
    }

    #[test]
    fn summary_swap_changes_reference() {
        // a -> b is (b-a)/a, b -> a is (a-b)/b: the products relate by -a/b.
        let (a, b) = (978.0, 1018.0);
        let fwd = summarize(&bundle(&[("m", a)]), &bundle(&[("m", b)]), &BTreeMap::new()).unwrap();
        let back = summarize(&bundle(&[("m", b)]), &bundle(&[("m", a)]), &BTreeMap::new()).unwrap();
        let f = fwd.rows[0].change_pct.unwrap();
        let r = back.rows[0].change_pct.unwrap();
        assert!((f * a + r * b).abs() < 1e-9);
        assert!(fwd.rows[0].improved && !back.rows[0].improved);
    }

    #[test]
    fn csv_layout() {
        let s = summarize(&bundle(&[("txns", 978.0)]), &bundle(&[("txns", 1018.0)]), &BTreeMap::new()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,default,tuned,improvement\ntxns,978,1018,+4.09%\n");
    }

    pub(crate) fn report(best: f64, budget: u64, key: &str) -> TuningReport {
        let sample = |i: u64, m: f64| Sample {
            test_index: i,
            phase: if i == 0 { Phase::Baseline } else { Phase::Explore },
            status: TestStatus::Ok,
            point: UnitPoint::new(vec![0.5]).unwrap(),
            setting: ConfigSetting::new(vec![Value::Real(0.5)]),
            metric: Some(m),
            metrics: BTreeMap::new(),
        };
        let baseline = sample(0, best.min(100.0));
        let top = sample(1, best);
        TuningReport {
            format_version: 1,
            algo: "rrs".into(),
            params: serde_json::Value::Null,
            seed: 0,
            budget,
            objective: Objective::maximize(key),
            baseline: baseline.clone(),
            best: top.clone(),
            improvement_ratio: None,
            termination: Termination::BudgetExhausted,
            resumed_from: 0,
            trajectory: vec![baseline, top],
            config: None,
        }
    }

    #[test]
    fn compare_examples() {
        let c = compare(&report(118184.0, 100, "tp"), &report(9815.0, 100, "tp")).unwrap();
        assert_eq!(c.order, CompareOrder::ABetter);
        let c = compare(&report(5.0, 100, "tp"), &report(5.0, 100, "tp")).unwrap();
        assert_eq!(c.order, CompareOrder::Tie);
        assert!(matches!(
            compare(&report(1.0, 100, "tp"), &report(1.0, 50, "tp")),
            Err(AnalysisError::BudgetMismatch { a: 100, b: 50 })
        ));
        assert!(matches!(
            compare(&report(1.0, 100, "tp"), &report(1.0, 100, "lat")),
            Err(AnalysisError::ObjectiveMismatch { .. })
        ));
    }

    #[test]
    fn bottleneck_examples() {
        let v = identify_bottleneck(&[
            ("backend".into(), report(163.0, 100, "tp")),
            ("frontend+backend".into(), report(100.0, 100, "tp")),
        ])
        .unwrap();
        assert_eq!(v.bottleneck, vec!["frontend+backend"]);
        assert!(v.interaction);

        let v = identify_bottleneck(&[
            ("A".into(), report(50.0, 100, "tp")),
            ("B".into(), report(80.0, 100, "tp")),
            ("A+B".into(), report(50.0, 100, "tp")),
        ])
        .unwrap();
        assert_eq!(v.bottleneck, vec!["A", "A+B"]);

        assert!(matches!(
            identify_bottleneck(&[("A".into(), report(1.0, 100, "tp"))]),
            Err(AnalysisError::TooFewCandidates(1))
        ));
        assert!(matches!(
            identify_bottleneck(&[("A".into(), report(1.0, 100, "tp")), ("B".into(), report(1.0, 100, "x"))]),
            Err(AnalysisError::ObjectiveMismatch { .. })
        ));
    }

    fn scaled(r: &TuningReport, c: f64) -> TuningReport {
        let mut r = r.clone();
        r.best.metric = r.best.metric.map(|m| m * c);
        r
    }

    proptest! {
        #[test]
        fn verdicts_are_scale_invariant(
            bests in prop::collection::vec(1u32..200, 2..6),
            c in 0.01f64..1000.0,
        ) {
            let cands: Vec<(String, TuningReport)> = bests
                .iter()
                .enumerate()
                .map(|(i, b)| (format!("s{i}"), report(*b as f64, 50, "tp")))
                .collect();
            let v = identify_bottleneck(&cands).unwrap();
            let min = bests.iter().min().unwrap();
            let expected: Vec<String> = bests.iter().enumerate().filter(|(_, b)| *b == min).map(|(i, _)| format!("s{i}")).collect();
            prop_assert_eq!(&v.bottleneck, &expected);
            let scaled_cands: Vec<_> = cands.iter().map(|(id, r)| (id.clone(), scaled(r, c))).collect();
            prop_assert_eq!(identify_bottleneck(&scaled_cands).unwrap().bottleneck, v.bottleneck);

            let o = compare(&cands[0].1, &cands[1].1).unwrap().order;
            prop_assert_eq!(compare(&scaled(&cands[0].1, c), &scaled(&cands[1].1, c)).unwrap().order, o);
        }
    }
}
