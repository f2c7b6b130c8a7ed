use distillkit::bench::{cwd_spatial_scaling, measure, run, synthetic_scene, BenchOp, BenchOptions};
use distillkit::deteval::{evaluate, EvalConfig};

#[test]
fn every_op_reports_positive_timings() {
    let opts = BenchOptions {
        warmup: 1,
        runs: 5,
        dims: [1, 8, 16, 16],
        boxes: 200,
        ..BenchOptions::default()
    };
    for op in [BenchOp::Cwd, BenchOp::Mgd, BenchOp::Eval] {
        let s = run(op, &opts).unwrap();
        assert_eq!(s.runs, 5);
        assert_eq!(s.samples_ms.len(), 5);
        assert!(s.samples_ms.iter().all(|&t| t > 0.0), "{op}: {:?}", s.samples_ms);
        assert!(s.std_ms.is_finite() && s.std_ms >= 0.0);
        assert!(s.p50_ms <= s.p95_ms);
        let lo = s.samples_ms.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.samples_ms.iter().cloned().fold(0.0, f64::max);
        assert!(lo <= s.mean_ms && s.mean_ms <= hi);
    }
}

#[test]
fn bad_requests_are_rejected() {
    assert!(measure(0, 1, || Ok(())).is_err());
    let opts = BenchOptions {
        dims: [1, 0, 4, 4],
        ..BenchOptions::default()
    };
    assert!(run(BenchOp::Cwd, &opts).is_err());
    assert!("conv".parse::<BenchOp>().is_err());
    assert_eq!("eval".parse::<BenchOp>().unwrap(), BenchOp::Eval);
}

#[test]
fn synthetic_scene_is_deterministic_and_sized() {
    let (d1, g1) = synthetic_scene(3, 400);
    let (d2, g2) = synthetic_scene(3, 400);
    assert_eq!((&d1, &g1), (&d2, &g2));
    assert_eq!(g1.len(), 400);
    let r = evaluate(&d1, &g1, &EvalConfig::default()).unwrap();
    assert!(r.map50 > 0.5);
}

#[test]
fn cwd_time_grows_with_spatial_size() {
    // four times the cells should cost well over twice the time
    let ratio = cwd_spatial_scaling([1, 16, 32, 32], 3, 15).unwrap();
    assert!(ratio >= 2.0, "ratio {ratio}");
}
