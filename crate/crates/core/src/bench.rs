//! Wall-clock microbenchmarks for the loss kernels and the evaluator.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cwd::{cwd_loss, CwdConfig};
use crate::deteval::{evaluate, BBox, Detection, EvalConfig, GroundTruthBox};
use crate::error::{invalid, Result};
use crate::mask::sample_batch_mask;
use crate::mgd::{mgd_loss, MgdConfig, DEFAULT_MASK_RATIO};
use crate::rng::Rng;
use crate::stats::summarize;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchOp {
    Cwd,
    Mgd,
    Eval,
}

impl FromStr for BenchOp {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cwd" => Ok(Self::Cwd),
            "mgd" => Ok(Self::Mgd),
            "eval" => Ok(Self::Eval),
            other => Err(invalid(format!("unknown bench op {other:?}; expected cwd, mgd or eval"))),
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cwd => "cwd",
            Self::Mgd => "mgd",
            Self::Eval => "eval",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
    /// Feature shape (n, c, h, w) for the loss workloads.
    pub dims: [usize; 4],
    /// Ground-truth box count for the eval workload.
    pub boxes: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 3,
            runs: 10,
            seed: 0,
            dims: [1, 16, 32, 32],
            boxes: 1000,
        }
    }
}

/// Latency summary in milliseconds. Warmup iterations are not included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub runs: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `f` `runs` times after `warmup` untimed calls.
pub fn measure(warmup: usize, runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<BenchStats> {
    if runs < 2 {
        return Err(invalid(format!("need at least 2 timed runs for a spread, got {runs}")));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let summary = summarize(&samples)?;
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchStats {
        runs,
        warmup,
        mean_ms: summary.mean,
        std_ms: summary.std,
        p50_ms: percentile(&sorted, 50.0),
        p95_ms: percentile(&sorted, 95.0),
        samples_ms: samples,
    })
}

/// Random scene with `boxes` ground-truth boxes over 4 classes and 10 images.
/// Detections are jittered copies of most boxes plus some pure false
/// positives.
pub fn synthetic_scene(seed: u64, boxes: usize) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let mut rng = Rng::new(seed);
    let mut gts = Vec::with_capacity(boxes);
    let mut dets = Vec::with_capacity(boxes + boxes / 4);
    let random_box = |rng: &mut Rng| {
        BBox::new(
            rng.uniform_range(0.0, 600.0),
            rng.uniform_range(0.0, 600.0),
            rng.uniform_range(8.0, 80.0),
            rng.uniform_range(8.0, 80.0),
        )
    };
    for i in 0..boxes {
        let image_id = format!("img{}", i % 10);
        let class_id = (rng.next_u64() % 4) as i64;
        let bbox = random_box(&mut rng);
        if rng.uniform() < 0.85 {
            let j = |rng: &mut Rng, s: f64| rng.uniform_range(-0.1, 0.1) * s;
            let jittered = BBox::new(
                bbox.x + j(&mut rng, bbox.w),
                bbox.y + j(&mut rng, bbox.h),
                bbox.w * (1.0 + j(&mut rng, 1.0)),
                bbox.h * (1.0 + j(&mut rng, 1.0)),
            );
            dets.push(Detection {
                image_id: image_id.clone(),
                class_id,
                bbox: jittered,
                score: rng.uniform(),
            });
        }
        if i % 4 == 0 {
            dets.push(Detection {
                image_id: image_id.clone(),
                class_id: (rng.next_u64() % 4) as i64,
                bbox: random_box(&mut rng),
                score: rng.uniform() * 0.6,
            });
        }
        gts.push(GroundTruthBox { image_id, class_id, bbox });
    }
    (dets, gts)
}

pub fn run(op: BenchOp, opts: &BenchOptions) -> Result<BenchStats> {
    let [n, c, h, w] = opts.dims;
    if [n, c, h, w].contains(&0) {
        return Err(invalid("bench dimensions must be positive"));
    }
    let mut rng = Rng::new(opts.seed);
    match op {
        BenchOp::Cwd => {
            let teacher = Tensor4::random_normal(opts.dims, &mut rng, 1.0);
            let student = Tensor4::random_normal(opts.dims, &mut rng, 1.0);
            let cfg = CwdConfig::new(4.0);
            measure(opts.warmup, opts.runs, || {
                black_box(cwd_loss(black_box(&teacher), black_box(&student), &cfg)?);
                Ok(())
            })
        }
        BenchOp::Mgd => {
            let teacher = Tensor4::random_normal(opts.dims, &mut rng, 1.0);
            let student = Tensor4::random_normal(opts.dims, &mut rng, 1.0);
            let cfg = MgdConfig::init(c, c, DEFAULT_MASK_RATIO, 2e-5, &mut rng)?;
            let mask = sample_batch_mask(&mut rng, n, h, w, cfg.mask_ratio)?;
            measure(opts.warmup, opts.runs, || {
                black_box(mgd_loss(black_box(&teacher), black_box(&student), &mask, &cfg)?);
                Ok(())
            })
        }
        BenchOp::Eval => {
            let (dets, gts) = synthetic_scene(opts.seed, opts.boxes);
            let cfg = EvalConfig::default();
            measure(opts.warmup, opts.runs, || {
                black_box(evaluate(black_box(&dets), black_box(&gts), &cfg)?);
                Ok(())
            })
        }
    }
}

/// Median `cwd_loss` time at `2h × 2w` divided by the median at `h × w`.
/// The work is linear in the spatial size, so this should be near 4.
pub fn cwd_spatial_scaling(dims: [usize; 4], warmup: usize, runs: usize) -> Result<f64> {
    let [n, c, h, w] = dims;
    let opts = |dims| BenchOptions {
        warmup,
        runs,
        dims,
        ..BenchOptions::default()
    };
    let small = run(BenchOp::Cwd, &opts([n, c, h, w]))?;
    let large = run(BenchOp::Cwd, &opts([n, c, 2 * h, 2 * w]))?;
    Ok(large.p50_ms / small.p50_ms)
}
