use mprf::formats;
use mprf::harness::config::{Config, IndexKind};
use mprf::harness::pipeline::{closures_csv, retrievals_csv, run_frames, run_manifest};
use mprf::pose::RerankMode;
use mprf::synth::{SynthConfig, SynthWorld};

fn world() -> SynthWorld {
    SynthWorld::generate(SynthConfig {
        frames: 96,
        seed: 21,
        ..Default::default()
    })
}

#[test]
fn in_memory_and_on_disk_runs_agree() {
    let w = world();
    let cfg = w.pipeline_config();
    let mem = run_frames(&cfg, &w.intrinsics, w.frame_data(), Vec::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = w.write(dir.path()).unwrap();
    let manifest = mprf::harness::manifest::Manifest::load(&manifest).unwrap();
    let disk = run_manifest(&manifest, &Config::load(&config).unwrap()).unwrap();
    // Binary files hold f32 payloads, so only the structure must agree exactly.
    let ids = |o: &mprf::harness::pipeline::PipelineOutput| o.closures().map(|c| (c.query_id, c.candidate_id)).collect::<Vec<_>>();
    let agree = ids(&mem).iter().zip(ids(&disk)).filter(|(a, b)| **a == *b).count();
    assert!(!ids(&mem).is_empty());
    assert!(agree as f64 >= 0.95 * ids(&mem).len() as f64);
}

#[test]
fn thread_count_does_not_change_results() {
    let w = world();
    let mut cfg = w.pipeline_config();
    cfg.pipeline.threads = 1;
    let one = run_frames(&cfg, &w.intrinsics, w.frame_data(), Vec::new()).unwrap();
    cfg.pipeline.threads = 4;
    let four = run_frames(&cfg, &w.intrinsics, w.frame_data(), Vec::new()).unwrap();
    assert_eq!(closures_csv(&one), closures_csv(&four));
    assert_eq!(retrievals_csv(&one), retrievals_csv(&four));
}

#[test]
fn alternative_modes_still_close_loops() {
    let w = world();
    for tweak in [
        |c: &mut Config| c.pipeline.rerank = RerankMode::Inliers,
        |c: &mut Config| c.retrieval.mode = IndexKind::InvertedFile,
        |c: &mut Config| c.icp.enabled = true,
    ] {
        let mut cfg = w.pipeline_config();
        tweak(&mut cfg);
        let out = run_frames(&cfg, &w.intrinsics, w.frame_data(), Vec::new()).unwrap();
        let report = out.report.unwrap();
        assert!(report.precision_at[&1] >= 0.9, "{cfg:?}");
        assert!(report.poses_estimated > 0);
    }
}

#[test]
fn manifest_and_config_round_trip_through_files() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = w.write(dir.path()).unwrap();
    let m = mprf::harness::manifest::Manifest::load(&manifest).unwrap();
    assert_eq!(m.frames.len(), 96);
    assert_eq!(Config::load(&config).unwrap(), w.pipeline_config());
    let traj = formats::read_trajectory(dir.path().join(mprf::synth::TRAJECTORY_FILE)).unwrap();
    assert_eq!(traj.len(), 96);
    assert!(traj[10].pose.max_abs_diff(&w.frames[10].pose) < 1e-9);
}
