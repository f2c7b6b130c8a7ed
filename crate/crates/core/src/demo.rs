//! Desk-scale distillation runs on synthetic features.
//!
//! A fixed random conv stack applied to seeded noise plays the teacher; a
//! different, narrower stack over the same noise plays the student. MGD
//! runs train the alignment and projector; CWD runs train the student
//! activations (and the alignment, when channel counts differ) directly.
//! Both use plain SGD.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_forward, ConvLayer};
use crate::cwd::{cwd_backward, CwdConfig};
use crate::error::{invalid, Error, Result};
use crate::mgd::{mgd_train_step, MgdConfig};
use crate::rng::Rng;
use crate::tensor::{spatial_softmax, Tensor4};

/// Seed of the reference scenarios.
pub const FIXTURE_SEED: u64 = 6;

/// Trailing steps averaged into the reported final loss.
pub const FINAL_WINDOW: usize = 10;
const NOISE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Cwd { temperature: f64 },
    Mgd { mask_ratio: f64, loss_weight: f64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Cwd { .. } => "cwd",
            Method::Mgd { .. } => "mgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Output of the student feature generator.
    Generated,
    /// An exact copy of the teacher features (needs equal channel counts).
    CopyTeacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoScenario {
    pub seed: u64,
    pub batch: usize,
    pub teacher_channels: usize,
    pub student_channels: usize,
    pub height: usize,
    pub width: usize,
    pub method: Method,
    pub steps: usize,
    pub lr: f64,
    pub student_init: StudentInit,
}

impl DemoScenario {
    /// The reference MGD scenario: 1×4×4×8×8, mask ratio 0.5, 200 steps at lr 1e-3.
    pub fn mgd_fixture(seed: u64) -> Self {
        Self {
            seed,
            batch: 1,
            teacher_channels: 4,
            student_channels: 4,
            height: 8,
            width: 8,
            method: Method::Mgd {
                mask_ratio: 0.5,
                loss_weight: 2e-5,
            },
            steps: 200,
            lr: 1e-3,
            student_init: StudentInit::Generated,
        }
    }

    pub fn cwd_fixture(seed: u64, temperature: f64) -> Self {
        Self {
            seed,
            batch: 1,
            teacher_channels: 4,
            student_channels: 4,
            height: 8,
            width: 8,
            method: Method::Cwd { temperature },
            steps: 200,
            lr: 1.0,
            student_init: StudentInit::Generated,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("a demo needs at least one step"));
        }
        if [self.batch, self.teacher_channels, self.student_channels, self.height, self.width].contains(&0) {
            return Err(invalid("all demo dimensions must be positive"));
        }
        if self.student_channels > self.teacher_channels {
            return Err(invalid("student may not have more channels than the teacher"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("learning rate must be non-negative"));
        }
        if self.student_init == StudentInit::CopyTeacher && self.student_channels != self.teacher_channels {
            return Err(invalid("copying the teacher needs equal channel counts"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub scenario: DemoScenario,
    pub status: Status,
    /// Loss at every completed step, before that step's update.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    /// Mean of the last [`FINAL_WINDOW`] losses.
    pub final_loss: f64,
    pub ratio: f64,
    /// L1 distance between teacher and student attention maps.
    pub attention_l1_before: f64,
    pub attention_l1_after: f64,
    pub wall_time_ms: f64,
}

/// Per-channel spatial attention map of one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub batch: usize,
    pub channel: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AttentionMap {
    /// Binary greymap (P5), intensities scaled so the largest value is 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.values.iter().fold(0.0f32, |m, &v| m.max(v));
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }
}

pub fn attention_map(x: &Tensor4, temperature: f64) -> Result<Vec<AttentionMap>> {
    let p = spatial_softmax(x, temperature)?;
    let mut maps = Vec::with_capacity(x.batch() * x.channels());
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            maps.push(AttentionMap {
                batch: n,
                channel: c,
                height: x.height(),
                width: x.width(),
                values: p.plane(n, c).to_vec(),
            });
        }
    }
    Ok(maps)
}

struct Features {
    teacher: Tensor4,
    student: Tensor4,
}

fn relu(x: &Tensor4) -> Result<Tensor4> {
    x.map(|v| v.max(0.0))
}

/// Gaussian noise drawn on a 4× coarser grid and upsampled by nearest
/// neighbour, so neighbouring cells are correlated like real feature maps.
fn smooth_noise(dims: [usize; 4], rng: &mut Rng) -> Result<Tensor4> {
    let [n, c, h, w] = dims;
    let coarse = Tensor4::random_normal([n, c, h.div_ceil(4), w.div_ceil(4)], rng, 1.0);
    Ok(Tensor4::from_fn(dims, |ni, ci, y, x| coarse.get(ni, ci, y / 4, x / 4)))
}

fn synthesize(scn: &DemoScenario, root: &Rng) -> Result<Features> {
    let dims = |c| [scn.batch, c, scn.height, scn.width];
    let noise = smooth_noise(dims(NOISE_CHANNELS), &mut root.fork(0))?;

    let mut rng = root.fork(2);
    let s1 = ConvLayer::init_uniform(NOISE_CHANNELS, scn.student_channels, 3, &mut rng)?;
    let generated = relu(&conv2d_forward(&noise, &s1)?)?;

    // The teacher is a deeper function of the same signal, so a student-side
    // generator can in principle recover it.
    let mut rng = root.fork(1);
    let t1 = ConvLayer::init_uniform(scn.student_channels, scn.teacher_channels, 3, &mut rng)?;
    let t2 = ConvLayer::init_uniform(scn.teacher_channels, scn.teacher_channels, 3, &mut rng)?;
    let teacher = relu(&conv2d_forward(&relu(&conv2d_forward(&generated, &t1)?)?, &t2)?)?;

    let student = match scn.student_init {
        StudentInit::CopyTeacher => teacher.clone(),
        StudentInit::Generated => generated,
    };
    Ok(Features { teacher, student })
}

fn attention_l1(teacher: &Tensor4, student: &Tensor4, temperature: f64) -> Result<f64> {
    spatial_softmax(teacher, temperature)?.l1_distance(&spatial_softmax(student, temperature)?)
}

/// What the student side looks like in teacher channel space.
fn student_view(student: &Tensor4, cwd: Option<&CwdConfig>, mgd: Option<&MgdConfig>) -> Result<Tensor4> {
    if let Some(cfg) = mgd {
        // unmasked reconstruction
        let aligned = match &cfg.align {
            Some(a) => conv2d_forward(student, a)?,
            None => student.clone(),
        };
        let hidden = relu(&conv2d_forward(&aligned, &cfg.projector.first)?)?;
        return conv2d_forward(&hidden, &cfg.projector.second);
    }
    match cwd.and_then(|c| c.align.as_ref()) {
        Some(a) => conv2d_forward(student, a),
        None => Ok(student.clone()),
    }
}

/// Post-training view and its attention distance. Parameters that are finite
/// but large enough to overflow the forward pass count as divergence; the map
/// is then reported as zeros and the distance as NaN.
fn view_after(teacher: &Tensor4, view: Result<Tensor4>, temperature: f64, status: &mut Status) -> Result<(Tensor4, f64)> {
    match view.and_then(|v| attention_l1(teacher, &v, temperature).map(|d| (v, d))) {
        Ok(pair) => Ok(pair),
        Err(e) if is_divergence(&e) => {
            *status = Status::Diverged;
            Ok((Tensor4::zeros(teacher.dims()), f64::NAN))
        }
        Err(e) => Err(e),
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

fn summarize(scn: &DemoScenario, losses: Vec<f64>, status: Status, l1: (f64, f64), started: Instant) -> TrajectoryReport {
    let initial_loss = losses.first().copied().unwrap_or(f64::NAN);
    let window = &losses[losses.len().saturating_sub(FINAL_WINDOW)..];
    let final_loss = if window.is_empty() {
        f64::NAN
    } else {
        window.iter().sum::<f64>() / window.len() as f64
    };
    let ratio = if initial_loss > 0.0 { final_loss / initial_loss } else if final_loss == 0.0 { 0.0 } else { f64::INFINITY };
    TrajectoryReport {
        scenario: scn.clone(),
        status,
        losses,
        initial_loss,
        final_loss,
        ratio,
        attention_l1_before: l1.0,
        attention_l1_after: l1.1,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// A finished run plus the feature maps it compared, in teacher channel
/// space.
#[derive(Clone, Debug)]
pub struct DemoRun {
    pub report: TrajectoryReport,
    pub teacher: Tensor4,
    pub student_before: Tensor4,
    pub student_after: Tensor4,
    /// Temperature used for the attention maps.
    pub map_temperature: f64,
}

/// Runs a scenario. Divergence (a non-finite loss or parameter) ends the
/// run early with [`Status::Diverged`] rather than an error.
pub fn run_demo(scn: &DemoScenario) -> Result<TrajectoryReport> {
    Ok(run_demo_full(scn)?.report)
}

pub fn run_demo_full(scn: &DemoScenario) -> Result<DemoRun> {
    scn.validate()?;
    let started = Instant::now();
    let root = Rng::new(scn.seed);
    let Features { teacher, student } = synthesize(scn, &root)?;
    let mut init_rng = root.fork(3);
    let mut mask_rng = root.fork(4);
    let mut losses = Vec::with_capacity(scn.steps);
    let mut status = Status::Completed;

    match scn.method {
        Method::Mgd { mask_ratio, loss_weight } => {
            let mut cfg = MgdConfig::init(scn.teacher_channels, scn.student_channels, mask_ratio, loss_weight, &mut init_rng)?;
            let view_t = 1.0;
            let student_before = student_view(&student, None, Some(&cfg))?;
            let before = attention_l1(&teacher, &student_before, view_t)?;
            for _ in 0..scn.steps {
                match mgd_train_step(&teacher, &student, &cfg, &mut mask_rng, scn.lr) {
                    Ok(step) if step.loss.is_finite() => {
                        losses.push(step.loss);
                        cfg = step.config;
                    }
                    Ok(_) => {
                        status = Status::Diverged;
                        break;
                    }
                    Err(e) if is_divergence(&e) => {
                        status = Status::Diverged;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let (student_after, after) = view_after(&teacher, student_view(&student, None, Some(&cfg)), view_t, &mut status)?;
            Ok(DemoRun {
                report: summarize(scn, losses, status, (before, after), started),
                teacher,
                student_before,
                student_after,
                map_temperature: view_t,
            })
        }
        Method::Cwd { temperature } => {
            let mut cfg = CwdConfig::new(temperature);
            if scn.student_channels != scn.teacher_channels {
                cfg.align = Some(ConvLayer::init_uniform(scn.student_channels, scn.teacher_channels, 1, &mut init_rng)?);
            }
            let mut student = student;
            let student_before = student_view(&student, Some(&cfg), None)?;
            let before = attention_l1(&teacher, &student_before, temperature)?;
            let step = -(scn.lr as f32);
            for _ in 0..scn.steps {
                let outcome = cwd_backward(&teacher, &student, &cfg).and_then(|g| {
                    let next_student = student.axpy(step, &g.grad_student)?;
                    let next_align = match (&cfg.align, &g.grad_align) {
                        (Some(a), Some(ga)) => Some(a.axpy(step, ga)?),
                        _ => None,
                    };
                    Ok((g.loss.loss, next_student, next_align))
                });
                match outcome {
                    Ok((loss, s, a)) if loss.is_finite() => {
                        losses.push(loss);
                        student = s;
                        cfg.align = a;
                    }
                    Ok(_) => {
                        status = Status::Diverged;
                        break;
                    }
                    Err(e) if is_divergence(&e) => {
                        status = Status::Diverged;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let (student_after, after) =
                view_after(&teacher, student_view(&student, Some(&cfg), None), temperature, &mut status)?;
            Ok(DemoRun {
                report: summarize(scn, losses, status, (before, after), started),
                teacher,
                student_before,
                student_after,
                map_temperature: temperature,
            })
        }
    }
}

/// One `{"step": i, "loss": x}` line per step. Contains no timings, so
/// equal seeds give byte-identical files.
pub fn trajectory_jsonl(report: &TrajectoryReport) -> String {
    let mut out = String::new();
    for (step, loss) in report.losses.iter().enumerate() {
        out.push_str(&serde_json::json!({ "step": step, "loss": loss }).to_string());
        out.push('\n');
    }
    out
}

/// Writes `trajectory.jsonl`, `summary.json` and attention greymaps
/// (teacher, student before and after training) for batch item 0.
pub fn write_outputs(dir: impl AsRef<Path>, run: &DemoRun) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trajectory.jsonl"), trajectory_jsonl(&run.report))?;
    let summary = serde_json::to_string_pretty(&run.report).expect("report serializes");
    fs::write(dir.join("summary.json"), summary)?;
    for (name, tensor) in [
        ("teacher", &run.teacher),
        ("student_before", &run.student_before),
        ("student_after", &run.student_after),
    ] {
        for map in attention_map(tensor, run.map_temperature)?.iter().filter(|m| m.batch == 0) {
            fs::write(dir.join(format!("{name}_c{}.pgm", map.channel)), map.to_pgm())?;
        }
    }
    Ok(())
}
