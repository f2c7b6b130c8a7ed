//! Central finite-difference checks of the analytic gradients.
//!
//! Each perturbation is applied to the `f32` value and the step actually
//! realised after rounding is used as the divisor. Losses are evaluated
//! with `f64` intermediates throughout.

use serde::Serialize;

use crate::conv::{self, ConvLayer};
use crate::cwd::{cwd_backward, cwd_loss, CwdConfig};
use crate::error::{invalid, Result};
use crate::mask::sample_mask;
use crate::mgd::{mgd_backward, mgd_loss, projector_preactivations, MgdConfig};
use crate::rng::Rng;
use crate::tensor::Tensor4;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Gradient magnitudes below this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-4;
/// Instances whose ReLU pre-activations come closer than this to zero are
/// redrawn: a finite-difference step that crosses the kink is meaningless.
pub const KINK_MARGIN: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Conv,
    Cwd,
    Mgd,
}

impl std::str::FromStr for Target {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Self::Conv),
            "cwd" => Ok(Self::Cwd),
            "mgd" => Ok(Self::Mgd),
            other => Err(invalid(format!("unknown gradcheck target `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Temperatures cycled through by CWD trials.
    pub temperatures: Vec<f64>,
    /// Negative control: perturbs the analytic gradient before comparing.
    pub inject_fault: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            temperatures: vec![1.0, 2.0, 3.0, 4.0],
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockError {
    pub block: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trial {
    pub index: usize,
    pub description: String,
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub target: Target,
    pub trials: Vec<Trial>,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Central difference of `loss` with respect to `values[i]`, restoring the
/// value afterwards.
fn central_difference(
    values: &mut [f32],
    i: usize,
    step: f64,
    mut loss: impl FnMut(&[f32]) -> Result<f64>,
) -> Result<f64> {
    let orig = values[i];
    let plus = (orig as f64 + step) as f32;
    let minus = (orig as f64 - step) as f32;
    values[i] = plus;
    let lp = loss(values)?;
    values[i] = minus;
    let lm = loss(values)?;
    values[i] = orig;
    Ok((lp - lm) / (plus as f64 - minus as f64))
}

/// Compares an analytic gradient with finite differences over a flat
/// parameter vector.
fn compare_block(
    name: &str,
    params: &[f32],
    analytic: &[f32],
    step: f64,
    mut loss: impl FnMut(&[f32]) -> Result<f64>,
) -> Result<BlockError> {
    let mut values = params.to_vec();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = central_difference(&mut values, i, step, &mut loss)?;
        worst = worst.max(relative_error(a as f64, numeric));
    }
    Ok(BlockError {
        block: name.to_string(),
        elements: analytic.len(),
        max_rel_error: worst,
    })
}

fn layer_params(layer: &ConvLayer) -> Vec<f32> {
    (0..layer.param_count()).map(|i| layer.param(i)).collect()
}

fn with_params(layer: &ConvLayer, params: &[f32]) -> ConvLayer {
    let mut l = layer.clone();
    for (i, &v) in params.iter().enumerate() {
        l.set_param(i, v);
    }
    l
}

fn corrupt(values: &[f32], inject: bool) -> Vec<f32> {
    if inject {
        values.iter().map(|v| v * 1.05 + 1e-3).collect()
    } else {
        values.to_vec()
    }
}

fn tensor_with(dims: [usize; 4], data: &[f32]) -> Result<Tensor4> {
    Tensor4::new(dims, data.to_vec())
}

fn conv_trial(rng: &mut Rng, opts: &Options, index: usize) -> Result<Trial> {
    let kernel = if index.is_multiple_of(2) { 3 } else { 1 };
    let cin = 1 + index % 3;
    let cout = 1 + (index / 2) % 3;
    let dims = [1 + index % 2, cin, 3 + index % 3, 3 + (index / 3) % 3];
    let x = Tensor4::random_normal(dims, rng, 1.0);
    let layer = ConvLayer::init_uniform(cin, cout, kernel, rng)?;
    let out_dims = [dims[0], cout, dims[2], dims[3]];
    // scalar loss = <conv(x), r> for a fixed random r
    let r = Tensor4::random_normal(out_dims, rng, 1.0).to_f64();
    let project = |out: Vec<f64>| out.iter().zip(&r).map(|(o, w)| o * w).sum::<f64>();

    let grad_out = Tensor4::from_f64(out_dims, &r)?;
    let (gx, gl) = conv::conv2d_backward(&x, &layer, &grad_out)?;

    let input_block = compare_block(
        "input",
        x.data(),
        &corrupt(gx.data(), opts.inject_fault),
        opts.step,
        |v| Ok(project(conv::forward_f64(&tensor_with(dims, v)?.to_f64(), dims, &layer))),
    )?;
    let param_block = compare_block(
        "layer",
        &layer_params(&layer),
        &corrupt(&layer_params(&gl), opts.inject_fault),
        opts.step,
        |v| Ok(project(conv::forward_f64(&x.to_f64(), dims, &with_params(&layer, v)))),
    )?;
    finish(
        index,
        format!("conv {kernel}x{kernel} {cin}->{cout} input {dims:?}"),
        vec![input_block, param_block],
    )
}

fn cwd_trial(rng: &mut Rng, opts: &Options, index: usize) -> Result<Trial> {
    let temperature = opts.temperatures[index % opts.temperatures.len()];
    let with_align = index % 5 == 4;
    let dims_t = [2, 4, 5, 5];
    let dims_s = if with_align { [2, 3, 5, 5] } else { dims_t };
    let teacher = Tensor4::random_normal(dims_t, rng, 1.5);
    let student = Tensor4::random_normal(dims_s, rng, 1.5);
    let mut cfg = CwdConfig::new(temperature);
    if with_align {
        cfg.align = Some(ConvLayer::init_uniform(3, 4, 1, rng)?);
    }
    let grads = cwd_backward(&teacher, &student, &cfg)?;
    let mut blocks = vec![compare_block(
        "student",
        student.data(),
        &corrupt(grads.grad_student.data(), opts.inject_fault),
        opts.step,
        |v| Ok(cwd_loss(&teacher, &tensor_with(dims_s, v)?, &cfg)?.loss),
    )?];
    if let (Some(align), Some(ga)) = (&cfg.align, &grads.grad_align) {
        blocks.push(compare_block(
            "align",
            &layer_params(align),
            &corrupt(&layer_params(ga), opts.inject_fault),
            opts.step,
            |v| {
                let c = CwdConfig {
                    align: Some(with_params(align, v)),
                    ..cfg.clone()
                };
                Ok(cwd_loss(&teacher, &student, &c)?.loss)
            },
        )?);
    }
    finish(
        index,
        format!("cwd T={temperature} teacher {dims_t:?} student {dims_s:?}"),
        blocks,
    )
}

/// Draws an MGD instance whose projector pre-activations all clear
/// [`KINK_MARGIN`].
pub fn kink_free_mgd_instance(
    rng: &mut Rng,
    dims_t: [usize; 4],
    student_channels: usize,
) -> Result<(Tensor4, Tensor4, Tensor4, MgdConfig)> {
    let dims_s = [dims_t[0], student_channels, dims_t[2], dims_t[3]];
    for _ in 0..1000 {
        let teacher = Tensor4::random_normal(dims_t, rng, 1.0);
        let student = Tensor4::random_normal(dims_s, rng, 1.0);
        let mask = sample_mask(rng, dims_t[2], dims_t[3], 0.5)?;
        let mut cfg = MgdConfig::init(dims_t[1], student_channels, 0.5, 2e-5, rng)?;
        if cfg.align.is_none() && index_parity(rng) {
            cfg.align = Some(ConvLayer::init_uniform(student_channels, dims_t[1], 1, rng)?);
        }
        let pre = projector_preactivations(&teacher, &student, &mask, &cfg)?;
        if pre.iter().all(|v| v.abs() >= KINK_MARGIN) {
            return Ok((teacher, student, mask, cfg));
        }
    }
    Err(invalid("could not draw a kink-free MGD instance"))
}

fn index_parity(rng: &mut Rng) -> bool {
    rng.next_u64() & 1 == 1
}

fn mgd_trial(rng: &mut Rng, opts: &Options, index: usize) -> Result<Trial> {
    let dims_t = [1, 2, 4, 4];
    let student_channels = if index % 3 == 2 { 3 } else { 2 };
    let (teacher, student, mask, cfg) = kink_free_mgd_instance(rng, dims_t, student_channels)?;
    let dims_s = student.dims();
    let grads = mgd_backward(&teacher, &student, &mask, &cfg)?;
    let mut blocks = vec![compare_block(
        "student",
        student.data(),
        &corrupt(grads.grad_student.data(), opts.inject_fault),
        opts.step,
        |v| mgd_loss(&teacher, &tensor_with(dims_s, v)?, &mask, &cfg),
    )?];
    if let (Some(align), Some(ga)) = (&cfg.align, &grads.grad_align) {
        blocks.push(compare_block(
            "align",
            &layer_params(align),
            &corrupt(&layer_params(ga), opts.inject_fault),
            opts.step,
            |v| {
                let c = MgdConfig {
                    align: Some(with_params(align, v)),
                    ..cfg.clone()
                };
                mgd_loss(&teacher, &student, &mask, &c)
            },
        )?);
    }
    blocks.push(compare_block(
        "projector.conv1",
        &layer_params(&cfg.projector.first),
        &corrupt(&layer_params(&grads.grad_projector.first), opts.inject_fault),
        opts.step,
        |v| {
            let mut c = cfg.clone();
            c.projector.first = with_params(&cfg.projector.first, v);
            mgd_loss(&teacher, &student, &mask, &c)
        },
    )?);
    blocks.push(compare_block(
        "projector.conv2",
        &layer_params(&cfg.projector.second),
        &corrupt(&layer_params(&grads.grad_projector.second), opts.inject_fault),
        opts.step,
        |v| {
            let mut c = cfg.clone();
            c.projector.second = with_params(&cfg.projector.second, v);
            mgd_loss(&teacher, &student, &mask, &c)
        },
    )?);
    finish(
        index,
        format!(
            "mgd teacher {dims_t:?} student {dims_s:?} align={}",
            cfg.align.is_some()
        ),
        blocks,
    )
}

fn finish(index: usize, description: String, blocks: Vec<BlockError>) -> Result<Trial> {
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(Trial {
        index,
        description,
        blocks,
        max_rel_error,
    })
}

pub fn run(target: Target, opts: &Options) -> Result<Report> {
    if opts.trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    if opts.temperatures.is_empty() {
        return Err(invalid("temperature list must not be empty"));
    }
    let root = Rng::new(opts.seed);
    let trials = (0..opts.trials)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            match target {
                Target::Conv => conv_trial(&mut rng, opts, i),
                Target::Cwd => cwd_trial(&mut rng, opts, i),
                Target::Mgd => mgd_trial(&mut rng, opts, i),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = trials.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(Report {
        target,
        passed: max_rel_error < opts.tolerance,
        trials,
        tolerance: opts.tolerance,
        max_rel_error,
    })
}
