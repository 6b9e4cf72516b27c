use std::fs::{self, OpenOptions};
use std::io::Write;

use knobtune_core::adapters::{load_trajectory, TrajectoryStore};
use knobtune_core::harness::{run_tuning, synthetic_sut, TestPlan};
use knobtune_core::search::{RandomSearch, Rrs, Sample};
use knobtune_core::synth::SyntheticSurface;
use knobtune_core::{AdapterError, Objective, RrsParams};

fn run_random(budget: u64, seed: u64) -> Vec<Sample> {
    let surface = SyntheticSurface::bumpy();
    let space = surface.space().clone();
    let baseline = surface.default_setting();
    let (mut m, mut w) = synthetic_sut(surface, "tp");
    let mut s = RandomSearch::new(space.dim(), seed);
    run_tuning(&space, &mut s, &mut m, &mut w, &TestPlan::new(Objective::maximize("tp")), budget, &baseline, seed, None, vec![])
        .unwrap()
        .trajectory
}

fn persist(samples: &[Sample]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut store = TrajectoryStore::create(dir.path()).unwrap();
    for s in samples {
        store.append(s).unwrap();
    }
    dir
}

#[test]
fn five_records_resume_as_five() {
    let t = run_random(5, 1);
    let dir = persist(&t);
    let (_, rec) = TrajectoryStore::resume(dir.path()).unwrap();
    assert_eq!(rec.samples.len(), 5);
    assert!(!rec.dropped_tail);
    assert_eq!(rec.samples, t);
}

#[test]
fn truncated_tail_is_dropped() {
    let t = run_random(5, 2);
    let dir = persist(&t);
    let path = dir.path().join(TrajectoryStore::TRAJECTORY);
    let len = fs::metadata(&path).unwrap().len();
    OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 7).unwrap();

    let (mut store, rec) = TrajectoryStore::resume(dir.path()).unwrap();
    assert_eq!(rec.samples.len(), 4);
    assert!(rec.dropped_tail);
    // The partial record is cut away so appends continue a clean log.
    store.append(&t[4]).unwrap();
    let (_, rec) = TrajectoryStore::resume(dir.path()).unwrap();
    assert_eq!(rec.samples, t);
}

#[test]
fn empty_store_resumes_empty() {
    let dir = tempfile::tempdir().unwrap();
    TrajectoryStore::create(dir.path()).unwrap();
    let (_, rec) = TrajectoryStore::resume(dir.path()).unwrap();
    assert!(rec.samples.is_empty());
}

#[test]
fn earlier_corruption_is_fatal_for_resume() {
    let t = run_random(4, 3);
    let dir = persist(&t);
    let path = dir.path().join(TrajectoryStore::TRAJECTORY);
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "{\"garbage\": true}";
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(matches!(
        TrajectoryStore::resume(dir.path()),
        Err(AdapterError::CorruptRecord { line: 2, .. })
    ));
    // Read-only loading still yields the valid prefix.
    let rec = load_trajectory(&path).unwrap();
    assert_eq!(rec.samples.len(), 1);
    assert!(rec.dropped_tail);
}

#[test]
fn records_carry_format_version() {
    let dir = persist(&run_random(2, 4));
    let text = fs::read_to_string(dir.path().join(TrajectoryStore::TRAJECTORY)).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["format_version"], 1);
    }
}

#[test]
fn round_trip_reproduces_trajectory_exactly() {
    for seed in 0..5 {
        let t = run_random(30, seed);
        let dir = persist(&t);
        let (_, rec) = TrajectoryStore::resume(dir.path()).unwrap();
        assert_eq!(rec.samples, t, "seed {seed}");
    }
}

#[test]
fn unsupported_record_version_is_rejected() {
    let dir = persist(&run_random(2, 5));
    let path = dir.path().join(TrajectoryStore::TRAJECTORY);
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    writeln!(f, "{{\"format_version\": 9}}").unwrap();
    let (_, rec) = TrajectoryStore::resume(dir.path()).unwrap();
    assert_eq!(rec.samples.len(), 2);
    assert!(rec.dropped_tail);
}

#[test]
fn resume_sixty_then_forty_more() {
    let surface = SyntheticSurface::bumpy();
    let space = surface.space().clone();
    let baseline = surface.default_setting();
    let plan = TestPlan::new(Objective::maximize("tp"));
    let dir = tempfile::tempdir().unwrap();

    // Full uninterrupted run for reference.
    let (mut m, mut w) = synthetic_sut(surface.clone(), "tp");
    let mut s = Rrs::new(space.dim(), RrsParams::default(), 9).unwrap();
    let full = run_tuning(&space, &mut s, &mut m, &mut w, &plan, 100, &baseline, 9, None, vec![]).unwrap();

    // First 60 tests persisted.
    let mut store = TrajectoryStore::create(dir.path()).unwrap();
    let (mut m, mut w) = synthetic_sut(surface.clone(), "tp");
    let mut s = Rrs::new(space.dim(), RrsParams::default(), 9).unwrap();
    run_tuning(&space, &mut s, &mut m, &mut w, &plan, 60, &baseline, 9, Some(&mut store), vec![]).unwrap();
    drop(store);

    let (mut store, rec) = TrajectoryStore::resume(dir.path()).unwrap();
    assert_eq!(rec.samples.len(), 60);
    let (mut m, mut w) = synthetic_sut(surface, "tp");
    let mut s = Rrs::new(space.dim(), RrsParams::default(), 9).unwrap();
    let resumed = run_tuning(&space, &mut s, &mut m, &mut w, &plan, 100, &baseline, 9, Some(&mut store), rec.samples).unwrap();
    assert_eq!(resumed.resumed_from, 60);
    assert_eq!(resumed.trajectory.len(), 100);
    assert_eq!(resumed.trajectory, full.trajectory);
    assert!(dir.path().join(TrajectoryStore::REPORT).is_file());
    let csv = fs::read_to_string(dir.path().join(TrajectoryStore::CSV)).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert!(csv.starts_with("test_index,phase,max_threads,accept_count,jvm_tuned,metric\n"));
}
