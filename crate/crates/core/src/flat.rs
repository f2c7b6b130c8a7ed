//! Flat-array entry points for foreign callers.
//!
//! Tensors cross the boundary as `(dims, &[f32])` in `(n, c, h, w)` row-major
//! order, MGD parameters as one contiguous blob, and detections as loosely
//! typed records. Nothing is retained between calls; every function delegates
//! to the typed API, so results are bit-identical to it.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::conv::ConvLayer;
use crate::cwd::{cwd_backward, CwdConfig};
use crate::deteval::io::{check_detection, check_ground_truth};
use crate::deteval::{evaluate, ClassId, EvalConfig, EvalResult};
use crate::error::{mismatch, Error, Result};
use crate::mask::sample_batch_mask;
use crate::mgd::{mgd_backward, MgdConfig, Projector};
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Borrowed tensor: shape plus a contiguous buffer owned by the caller.
#[derive(Clone, Copy, Debug)]
pub struct ArrayView<'a> {
    dims: [usize; 4],
    data: &'a [f32],
}

impl<'a> ArrayView<'a> {
    pub fn new(dims: [usize; 4], data: &'a [f32]) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(mismatch(format!(
                "buffer of {} values does not match dims {dims:?} ({expected} values)",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn data(&self) -> &'a [f32] {
        self.data
    }

    pub fn to_tensor(&self) -> Result<Tensor4> {
        Tensor4::new(self.dims, self.data.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatCwd {
    /// `T² · Σ KL`.
    pub loss: f64,
    /// `feature_weight · loss`, the term added to the task loss.
    pub weighted_loss: f64,
    /// Gradient of `loss` with respect to the student, same layout as the input.
    pub grad: Vec<f32>,
}

/// CWD loss and student gradient. Channel counts must match, since there is
/// no alignment layer at this boundary.
pub fn cwd(teacher: ArrayView, student: ArrayView, temperature: f64, feature_weight: f64) -> Result<FlatCwd> {
    let cfg = CwdConfig {
        feature_weight,
        ..CwdConfig::new(temperature)
    };
    cfg.validate()?;
    let g = cwd_backward(&teacher.to_tensor()?, &student.to_tensor()?, &cfg)?;
    Ok(FlatCwd {
        loss: g.loss.loss,
        weighted_loss: feature_weight * g.loss.loss,
        grad: g.grad_student.into_data(),
    })
}

/// Length of the parameter blob for the given channel counts: alignment
/// (only when they differ) followed by both projector convolutions, each as
/// weights then biases.
pub fn mgd_param_len(teacher_channels: usize, student_channels: usize) -> usize {
    let tc = teacher_channels;
    let align = if tc != student_channels { tc * student_channels + tc } else { 0 };
    align + 2 * (tc * tc * 9 + tc)
}

fn layers(cfg: &MgdConfig) -> Vec<&ConvLayer> {
    cfg.align.iter().chain([&cfg.projector.first, &cfg.projector.second]).collect()
}

fn flatten(layers: &[&ConvLayer]) -> Vec<f32> {
    layers
        .iter()
        .flat_map(|l| l.weight().iter().chain(l.bias()).copied())
        .collect()
}

pub fn mgd_param_blob(cfg: &MgdConfig) -> Vec<f32> {
    flatten(&layers(cfg))
}

pub fn mgd_config_from_blob(
    teacher_channels: usize,
    student_channels: usize,
    mask_ratio: f64,
    loss_weight: f64,
    blob: &[f32],
) -> Result<MgdConfig> {
    let expected = mgd_param_len(teacher_channels, student_channels);
    if blob.len() != expected {
        return Err(mismatch(format!(
            "parameter blob needs {expected} values for {student_channels}→{teacher_channels} channels, got {}",
            blob.len()
        )));
    }
    let mut rest = blob;
    let mut take = |inp: usize, out: usize, k: usize| {
        let nw = out * inp * k * k;
        let (w, tail) = rest.split_at(nw);
        let (b, tail) = tail.split_at(out);
        rest = tail;
        ConvLayer::new(inp, out, k, w.to_vec(), b.to_vec())
    };
    let tc = teacher_channels;
    let align = if tc != student_channels { Some(take(student_channels, tc, 1)?) } else { None };
    let first = take(tc, tc, 3)?;
    let second = take(tc, tc, 3)?;
    let cfg = MgdConfig {
        mask_ratio,
        loss_weight,
        align,
        projector: Projector { first, second },
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlatMgd {
    /// Raw sum of squared reconstruction residuals.
    pub loss: f64,
    /// `loss_weight · loss`.
    pub weighted_loss: f64,
    /// Gradient of `loss` in parameter-blob layout.
    pub grad_params: Vec<f32>,
    pub grad_student: Vec<f32>,
}

/// MGD loss and gradients. The mask is drawn from `mask_seed`, so equal
/// arguments always give equal results.
pub fn mgd(
    teacher: ArrayView,
    student: ArrayView,
    mask_seed: u64,
    mask_ratio: f64,
    loss_weight: f64,
    params: &[f32],
) -> Result<FlatMgd> {
    let [n, tc, h, w] = teacher.dims();
    let sc = student.dims()[1];
    let cfg = mgd_config_from_blob(tc, sc, mask_ratio, loss_weight, params)?;
    let mask = sample_batch_mask(&mut Rng::new(mask_seed), n, h, w, mask_ratio)?;
    let g = mgd_backward(&teacher.to_tensor()?, &student.to_tensor()?, &mask, &cfg)?;
    let grad_layers: Vec<&ConvLayer> = g
        .grad_align
        .iter()
        .chain([&g.grad_projector.first, &g.grad_projector.second])
        .collect();
    Ok(FlatMgd {
        loss: g.loss,
        weighted_loss: loss_weight * g.loss,
        grad_params: flatten(&grad_layers),
        grad_student: g.grad_student.into_data(),
    })
}

fn parse_records<T: DeserializeOwned>(
    records: &[Value],
    what: &str,
    check: impl Fn(&T) -> Result<()>,
) -> Result<Vec<T>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let parse_error = |message: String| Error::Parse {
                line: i + 1,
                message: format!("{what} record: {message}"),
            };
            let record = T::deserialize(r).map_err(|e| parse_error(e.to_string()))?;
            check(&record).map_err(|e| parse_error(e.to_string()))?;
            Ok(record)
        })
        .collect()
}

/// Evaluates detection and ground-truth records (objects with `image_id`,
/// `class_id`, `bbox` and, for detections, `score`). Parse errors report the
/// 1-based record index as the line.
pub fn evaluate_records(
    detections: &[Value],
    ground_truth: &[Value],
    excluded_class_ids: &[ClassId],
    ap50_only: bool,
) -> Result<EvalResult> {
    let dets = parse_records(detections, "detection", check_detection)?;
    let gts = parse_records(ground_truth, "ground-truth", check_ground_truth)?;
    let base = if ap50_only { EvalConfig::ap50() } else { EvalConfig::default() };
    let cfg = EvalConfig {
        excluded_class_ids: excluded_class_ids.iter().copied().collect::<BTreeSet<_>>(),
        ..base
    };
    evaluate(&dets, &gts, &cfg)
}
