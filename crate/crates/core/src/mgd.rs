//! Masked generative distillation.
//!
//! A random spatial mask drops student feature cells, an optional 1×1
//! alignment maps the student onto the teacher's channels, and a
//! conv3×3 → ReLU → conv3×3 projector has to regenerate the full teacher
//! feature map. The loss is the raw sum of squared residuals.
//!
//! Note the mask ratio here and the channel-wise feature weight in
//! [`crate::cwd`] are two different hyperparameters even though both are
//! commonly written λ.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvLayer};
use crate::error::{ensure_finite, invalid, mismatch, Error, Result};
use crate::mask::sample_batch_mask;
use crate::rng::Rng;
use crate::tenfile::{self, BundleEntry};
use crate::tensor::Tensor4;

pub const DEFAULT_MASK_RATIO: f64 = 0.5;

/// Two channel-preserving 3×3 convolutions with a ReLU between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

impl Projector {
    pub fn init(channels: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            first: ConvLayer::init_uniform(channels, channels, 3, rng)?,
            second: ConvLayer::init_uniform(channels, channels, 3, rng)?,
        })
    }

    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            first: ConvLayer::identity(channels, 3)?,
            second: ConvLayer::identity(channels, 3)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgdConfig {
    /// Probability that a spatial cell is dropped.
    pub mask_ratio: f64,
    /// Weight of the reconstruction term in the total objective.
    pub loss_weight: f64,
    pub align: Option<ConvLayer>,
    pub projector: Projector,
}

impl MgdConfig {
    /// Freshly initialised parameters. An alignment layer is created only
    /// when the channel counts differ.
    pub fn init(
        teacher_channels: usize,
        student_channels: usize,
        mask_ratio: f64,
        loss_weight: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let align = if teacher_channels != student_channels {
            Some(ConvLayer::init_uniform(student_channels, teacher_channels, 1, rng)?)
        } else {
            None
        };
        let cfg = Self {
            mask_ratio,
            loss_weight,
            align,
            projector: Projector::init(teacher_channels, rng)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn teacher_channels(&self) -> usize {
        self.projector.second.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(invalid(format!("mask ratio must lie in [0, 1], got {}", self.mask_ratio)));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(invalid("loss weight must be a non-negative finite number"));
        }
        let c = self.projector.first.in_channels();
        for stage in [&self.projector.first, &self.projector.second] {
            if stage.kernel() != 3 || stage.in_channels() != c || stage.out_channels() != c {
                return Err(invalid("projector stages must be channel-preserving 3×3 convolutions"));
            }
        }
        if let Some(align) = &self.align {
            if align.kernel() != 1 {
                return Err(invalid("channel alignment must be a 1×1 convolution"));
            }
            if align.out_channels() != c {
                return Err(mismatch(format!(
                    "alignment outputs {} channels, projector expects {c}",
                    align.out_channels()
                )));
            }
        }
        Ok(())
    }

    /// Parameters in checkpoint order: alignment (if any), then projector.
    pub fn to_bundle(&self) -> Vec<BundleEntry> {
        let mut layers = Vec::new();
        if let Some(align) = &self.align {
            layers.push(("align", align));
        }
        layers.push(("projector.conv1", &self.projector.first));
        layers.push(("projector.conv2", &self.projector.second));
        layers
            .into_iter()
            .flat_map(|(role, layer)| {
                [
                    BundleEntry {
                        name: format!("{role}.weight"),
                        role: role.to_string(),
                        tensor: layer.weight_as_tensor(),
                    },
                    BundleEntry {
                        name: format!("{role}.bias"),
                        role: role.to_string(),
                        tensor: layer.bias_as_tensor(),
                    },
                ]
            })
            .collect()
    }

    /// Rebuilds parameters from bundle entries; hyperparameters are supplied
    /// by the caller since checkpoints carry tensors only.
    pub fn from_bundle(entries: &[BundleEntry], mask_ratio: f64, loss_weight: f64) -> Result<Self> {
        let layers: Vec<ConvLayer> = entries
            .chunks(2)
            .map(|pair| match pair {
                [w, b] => ConvLayer::from_tensors(&w.tensor, &b.tensor),
                _ => Err(Error::Format("weight without matching bias".into())),
            })
            .collect::<Result<_>>()?;
        let (align, first, second) = match layers.len() {
            2 => (None, layers[0].clone(), layers[1].clone()),
            3 => (Some(layers[0].clone()), layers[1].clone(), layers[2].clone()),
            n => return Err(Error::Format(format!("expected 2 or 3 layers, found {n}"))),
        };
        let cfg = Self {
            mask_ratio,
            loss_weight,
            align,
            projector: Projector { first, second },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        tenfile::save_bundle(dir, &self.to_bundle())
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>, mask_ratio: f64, loss_weight: f64) -> Result<Self> {
        Self::from_bundle(&tenfile::load_bundle(dir)?, mask_ratio, loss_weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MgdGradients {
    pub loss: f64,
    pub grad_student: Tensor4,
    pub grad_align: Option<ConvLayer>,
    pub grad_projector: Projector,
}

struct Forward {
    dims_teacher: [usize; 4],
    masked: Vec<f64>,
    hidden: Vec<f64>,
    activated: Vec<f64>,
    residual: Vec<f64>,
    loss: f64,
}

fn check_inputs(teacher: &Tensor4, student: &Tensor4, mask: &Tensor4, cfg: &MgdConfig) -> Result<()> {
    cfg.validate()?;
    let [tn, tc, th, tw] = teacher.dims();
    let [sn, sc, sh, sw] = student.dims();
    if (tn, th, tw) != (sn, sh, sw) {
        return Err(mismatch(format!(
            "teacher {:?} and student {:?} differ outside the channel axis",
            teacher.dims(),
            student.dims()
        )));
    }
    let aligned_channels = match &cfg.align {
        Some(align) => {
            if align.in_channels() != sc {
                return Err(mismatch(format!(
                    "alignment expects {} student channels, got {sc}",
                    align.in_channels()
                )));
            }
            align.out_channels()
        }
        None => sc,
    };
    if aligned_channels != tc || cfg.teacher_channels() != tc {
        return Err(mismatch(format!(
            "aligned student has {aligned_channels} channels, projector {}, teacher {tc}",
            cfg.teacher_channels()
        )));
    }
    let [mn, mc, mh, mw] = mask.dims();
    if mc != 1 || (mh, mw) != (th, tw) || (mn != 1 && mn != tn) {
        return Err(mismatch(format!(
            "mask dims {:?} must be (1 or {tn}, 1, {th}, {tw})",
            mask.dims()
        )));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("mask values must be 0 or 1"));
    }
    Ok(())
}

/// Multiplies every channel of `x` by the broadcast spatial mask.
fn apply_mask(x: &mut [f64], dims: [usize; 4], mask: &Tensor4) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    for ni in 0..n {
        let m = mask.plane(if mask.batch() == 1 { 0 } else { ni }, 0);
        for ci in 0..c {
            let dst = &mut x[(ni * c + ci) * plane..][..plane];
            for (d, &mv) in dst.iter_mut().zip(m) {
                *d *= mv as f64;
            }
        }
    }
}

fn forward(teacher: &Tensor4, student: &Tensor4, mask: &Tensor4, cfg: &MgdConfig) -> Result<Forward> {
    check_inputs(teacher, student, mask, cfg)?;
    let dims_teacher = teacher.dims();
    let mut masked = match &cfg.align {
        Some(align) => conv::forward_f64(&student.to_f64(), student.dims(), align),
        None => student.to_f64(),
    };
    apply_mask(&mut masked, dims_teacher, mask);
    let hidden = conv::forward_f64(&masked, dims_teacher, &cfg.projector.first);
    let activated: Vec<f64> = hidden.iter().map(|&v| v.max(0.0)).collect();
    let output = conv::forward_f64(&activated, dims_teacher, &cfg.projector.second);
    let residual: Vec<f64> = teacher
        .data()
        .iter()
        .zip(&output)
        .map(|(&t, &o)| o - t as f64)
        .collect();
    let loss = residual.iter().map(|r| r * r).sum();
    Ok(Forward {
        dims_teacher,
        masked,
        hidden,
        activated,
        residual,
        loss,
    })
}

/// `Σ (teacher − G(align(student) ⊙ mask))²` over batch, channels and cells.
///
/// `mask` has dims `(1, 1, h, w)` (shared by the whole batch) or
/// `(n, 1, h, w)`, and is broadcast over channels.
pub fn mgd_loss(teacher: &Tensor4, student: &Tensor4, mask: &Tensor4, cfg: &MgdConfig) -> Result<f64> {
    Ok(forward(teacher, student, mask, cfg)?.loss)
}

/// Pre-activation values of the projector's first stage. Used by gradient
/// checks to stay away from the ReLU kink.
pub fn projector_preactivations(
    teacher: &Tensor4,
    student: &Tensor4,
    mask: &Tensor4,
    cfg: &MgdConfig,
) -> Result<Vec<f64>> {
    Ok(forward(teacher, student, mask, cfg)?.hidden)
}

pub fn mgd_backward(
    teacher: &Tensor4,
    student: &Tensor4,
    mask: &Tensor4,
    cfg: &MgdConfig,
) -> Result<MgdGradients> {
    let fwd = forward(teacher, student, mask, cfg)?;
    let dims = fwd.dims_teacher;
    let grad_out: Vec<f64> = fwd.residual.iter().map(|r| 2.0 * r).collect();

    let (w2, b2) = conv::backward_params_f64(&fwd.activated, dims, &grad_out, &cfg.projector.second);
    let mut grad_hidden = conv::backward_input_f64(&grad_out, dims, &cfg.projector.second);
    // ReLU subgradient is 0 at 0
    for (g, &h) in grad_hidden.iter_mut().zip(&fwd.hidden) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    let (w1, b1) = conv::backward_params_f64(&fwd.masked, dims, &grad_hidden, &cfg.projector.first);
    let mut grad_aligned = conv::backward_input_f64(&grad_hidden, dims, &cfg.projector.first);
    apply_mask(&mut grad_aligned, dims, mask);

    let (grad_student, grad_align) = match &cfg.align {
        Some(align) => {
            let gx = conv::backward_input_f64(&grad_aligned, student.dims(), align);
            let (gw, gb) =
                conv::backward_params_f64(&student.to_f64(), student.dims(), &grad_aligned, align);
            (gx, Some(ConvLayer::from_f64_parts(align, &gw, &gb)?))
        }
        None => (grad_aligned, None),
    };

    Ok(MgdGradients {
        loss: fwd.loss,
        grad_student: Tensor4::from_f64(student.dims(), &grad_student)?,
        grad_align,
        grad_projector: Projector {
            first: ConvLayer::from_f64_parts(&cfg.projector.first, &w1, &b1)?,
            second: ConvLayer::from_f64_parts(&cfg.projector.second, &w2, &b2)?,
        },
    })
}

/// `task_loss + loss_weight · mgd_loss`.
pub fn mgd_total(task_loss: f64, mgd_loss: f64, cfg: &MgdConfig) -> Result<f64> {
    ensure_finite("task loss", task_loss)?;
    ensure_finite("MGD loss", mgd_loss)?;
    cfg.validate()?;
    Ok(task_loss + cfg.loss_weight * mgd_loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MgdStep {
    /// Parameters after the update.
    pub config: MgdConfig,
    /// Loss under the pre-update parameters and this step's mask.
    pub loss: f64,
}

/// One plain-SGD step on the alignment and projector parameters with a
/// freshly sampled `(n, 1, h, w)` mask. Student features are left alone.
pub fn mgd_train_step(
    teacher: &Tensor4,
    student: &Tensor4,
    cfg: &MgdConfig,
    rng: &mut Rng,
    lr: f64,
) -> Result<MgdStep> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    let mask = sample_batch_mask(rng, teacher.batch(), teacher.height(), teacher.width(), cfg.mask_ratio)?;
    let grads = mgd_backward(teacher, student, &mask, cfg)?;
    if lr == 0.0 {
        return Ok(MgdStep {
            config: cfg.clone(),
            loss: grads.loss,
        });
    }
    let step = -(lr as f32);
    let align = match (&cfg.align, &grads.grad_align) {
        (Some(a), Some(g)) => Some(a.axpy(step, g)?),
        _ => None,
    };
    let config = MgdConfig {
        mask_ratio: cfg.mask_ratio,
        loss_weight: cfg.loss_weight,
        align,
        projector: Projector {
            first: cfg.projector.first.axpy(step, &grads.grad_projector.first)?,
            second: cfg.projector.second.axpy(step, &grads.grad_projector.second)?,
        },
    };
    Ok(MgdStep {
        config,
        loss: grads.loss,
    })
}
