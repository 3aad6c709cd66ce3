use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use ndarray::Array2;
use streamtomo::distributor::RowPartition;
use streamtomo::engine::{lane_parallel_sirt, EngineConfig, WorkerState};
use streamtomo::geometry::{SinogramWindow, Tomogram};
use streamtomo::pipeline::{run_pipeline, RunConfig, Scene};
use streamtomo::projector::{Projector, ScaleCache, SirtConfig};

fn small_run(out: &std::path::Path) -> RunConfig {
    RunConfig {
        size: 64,
        rows: 4,
        rotations: 6,
        per_rotation: 16,
        window: 16,
        iterations: 4,
        noise_i0: Some(1e5),
        seed: 9,
        snapshot_every: Some(0),
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn lane_counts_agree() {
    let n = 64;
    let angles: Vec<f64> = (0..16).map(|k| k as f64 * 0.19).collect();
    let p = Projector::new(n, n, 1.0).unwrap();
    let phantom = Array2::from_shape_fn((n, n), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0);
    let window = SinogramWindow::from_rows(0, &angles, &p.forward_project(&phantom, &angles).unwrap()).unwrap();
    let scales = p.compute_scales(&angles).unwrap();
    let cfg = SirtConfig::with_iterations(10);
    let start = Tomogram::zeros(0, n);
    let one = lane_parallel_sirt(&p, &start, &window, &scales, &cfg, 1);
    for lanes in [2, 4, 8] {
        let many = lane_parallel_sirt(&p, &start, &window, &scales, &cfg, lanes);
        let diff = (&one.values - &many.values).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-5, "{lanes} lanes differ by {diff}");
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut finals = Vec::new();
    for workers in [1, 2, 4] {
        let cfg = RunConfig {
            workers,
            ..small_run(&dir.path().join(format!("p{workers}")))
        };
        let summary = run_pipeline(&cfg).unwrap();
        assert_eq!(summary.events.len(), 4 * 6);
        finals.push(summary.final_tomograms);
    }
    assert_eq!(finals[0], finals[1]);
    assert_eq!(finals[0], finals[2]);
}

#[test]
fn warm_start_beats_cold_start_and_quality_grows() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig {
        rows: 1,
        rotations: 20,
        iterations: 10,
        ..small_run(dir.path())
    };
    let warm = run_pipeline(&RunConfig {
        out: dir.path().join("warm"),
        ..base.clone()
    })
    .unwrap();
    let cold = run_pipeline(&RunConfig {
        out: dir.path().join("cold"),
        warm_start: false,
        ..base
    })
    .unwrap();
    let warm_final = warm.final_ssim()[&0];
    let cold_final = cold.final_ssim()[&0];
    assert!(warm_final > cold_final, "warm {warm_final} vs cold {cold_final}");

    let by_update: HashMap<u64, f64> = warm
        .quality()
        .iter()
        .map(|q| (q.update_index, q.ssim_conventional))
        .collect();
    assert!(by_update[&20] > by_update[&5]);
}

fn checksum(t: &Tomogram) -> u64 {
    let mut h = DefaultHasher::new();
    for v in t.values.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

#[test]
fn readers_never_observe_torn_snapshots() {
    let cfg = RunConfig {
        size: 32,
        rows: 1,
        rotations: 40,
        per_rotation: 4,
        window: 4,
        iterations: 2,
        ground_truth: false,
        ..RunConfig::default()
    };
    let scene = Scene::from_config(&cfg).unwrap();
    let frames = scene.frames(&cfg.noise()).unwrap();
    let mut state = WorkerState::new(
        RowPartition {
            worker_id: 0,
            row_start: 0,
            row_count: 1,
        },
        scene.projector().unwrap(),
        EngineConfig::new(4, 2, 1),
        Arc::new(ScaleCache::new(8)),
        Instant::now(),
    )
    .unwrap();
    let cell = state.snapshot_cell(0).unwrap();
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..3)
        .map(|_| {
            let cell = cell.clone();
            let done = Arc::clone(&done);
            thread::spawn(move || {
                let mut seen = Vec::new();
                while !done.load(Ordering::Acquire) {
                    if let Some(t) = cell.latest() {
                        seen.push((t.update_count, checksum(&t)));
                    }
                    thread::yield_now();
                }
                seen
            })
        })
        .collect();

    let mut published = HashMap::new();
    for frame in &frames {
        for event in state.push_projection(frame).unwrap() {
            let snap = state.snapshot(event.slice_id).unwrap();
            assert_eq!(snap.update_count, event.update_index);
            published.insert(snap.update_count, checksum(&snap));
        }
    }
    done.store(true, Ordering::Release);
    assert_eq!(published.len(), 40);
    for reader in readers {
        let seen = reader.join().unwrap();
        for pair in seen.windows(2) {
            assert!(pair[0].0 <= pair[1].0, "update counts went backwards");
        }
        for (count, sum) in seen {
            assert_eq!(published.get(&count), Some(&sum), "torn read at update {count}");
        }
    }
}
