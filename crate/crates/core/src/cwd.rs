//! Channel-wise distillation.
//!
//! Every channel's activation map is turned into a distribution over
//! spatial cells by a temperature-scaled softmax, and the student is pulled
//! towards the teacher with `T² · Σ_c KL(teacher_c ‖ student_c)`. When the
//! student has a different channel count, a trainable 1×1 convolution maps
//! it onto the teacher's channels first.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvLayer};
use crate::error::{ensure_finite, invalid, mismatch, Result};
use crate::tensor::Tensor4;

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_FEATURE_WEIGHT: f64 = 50.0;
pub const DEFAULT_LOGIT_WEIGHT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwdConfig {
    pub temperature: f64,
    /// Weight of the feature term in the total objective.
    pub feature_weight: f64,
    /// Weight of the optional softened-logit term; zero disables it.
    pub logit_weight: f64,
    /// 1×1 student→teacher channel alignment. Required exactly when the
    /// channel counts differ.
    pub align: Option<ConvLayer>,
}

impl CwdConfig {
    pub fn new(temperature: f64) -> Self {
        Self {
            temperature,
            feature_weight: DEFAULT_FEATURE_WEIGHT,
            logit_weight: DEFAULT_LOGIT_WEIGHT,
            align: None,
        }
    }

    pub fn with_align(mut self, align: ConvLayer) -> Self {
        self.align = Some(align);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.feature_weight >= 0.0 && self.feature_weight.is_finite()) {
            return Err(invalid("feature weight must be a non-negative finite number"));
        }
        if !(self.logit_weight >= 0.0 && self.logit_weight.is_finite()) {
            return Err(invalid("logit weight must be a non-negative finite number"));
        }
        if let Some(align) = &self.align {
            if align.kernel() != 1 {
                return Err(invalid("channel alignment must be a 1×1 convolution"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CwdLoss {
    /// `T² · Σ per_channel`.
    pub loss: f64,
    /// KL divergence of each teacher channel, summed over the batch.
    pub per_channel: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CwdGradients {
    pub loss: CwdLoss,
    /// Gradient with respect to the raw (pre-alignment) student tensor.
    pub grad_student: Tensor4,
    pub grad_align: Option<ConvLayer>,
}

/// Validates shapes and returns the aligned student logits in `f64`.
fn aligned_student(teacher: &Tensor4, student: &Tensor4, cfg: &CwdConfig) -> Result<Vec<f64>> {
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
    if teacher.is_empty() {
        return Err(invalid("empty feature tensors"));
    }
    match &cfg.align {
        None if sc != tc => Err(mismatch(format!(
            "student has {sc} channels, teacher {tc}, and no alignment layer is configured"
        ))),
        None => Ok(student.to_f64()),
        Some(_) if sc == tc => Err(invalid(
            "alignment layer configured although student and teacher channel counts agree",
        )),
        Some(align) => {
            if align.in_channels() != sc || align.out_channels() != tc {
                return Err(mismatch(format!(
                    "alignment maps {}→{} channels, need {sc}→{tc}",
                    align.in_channels(),
                    align.out_channels()
                )));
            }
            Ok(conv::forward_f64(&student.to_f64(), student.dims(), align))
        }
    }
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let exps: Vec<f64> = logits.iter().map(|&v| (v / temperature - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `KL(p ‖ q)` with both sides clamped at [`PROB_FLOOR`] inside the log.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum()
}

fn plane_kls(teacher: &Tensor4, student: &[f64], temperature: f64) -> Vec<f64> {
    let plane = teacher.plane_len();
    let teacher = teacher.to_f64();
    teacher
        .par_chunks(plane)
        .zip(student.par_chunks(plane))
        .map(|(t, s)| kl(&softmax(t, temperature), &softmax(s, temperature)))
        .collect()
}

fn collect_loss(kls: &[f64], channels: usize, temperature: f64) -> CwdLoss {
    let mut per_channel = vec![0.0; channels];
    for (i, v) in kls.iter().enumerate() {
        per_channel[i % channels] += v;
    }
    let loss = temperature * temperature * per_channel.iter().sum::<f64>();
    CwdLoss { loss, per_channel }
}

pub fn cwd_loss(teacher: &Tensor4, student: &Tensor4, cfg: &CwdConfig) -> Result<CwdLoss> {
    let s = aligned_student(teacher, student, cfg)?;
    let kls = plane_kls(teacher, &s, cfg.temperature);
    Ok(collect_loss(&kls, teacher.channels(), cfg.temperature))
}

/// Loss plus gradients for the student tensor and, when present, the
/// alignment layer.
pub fn cwd_backward(teacher: &Tensor4, student: &Tensor4, cfg: &CwdConfig) -> Result<CwdGradients> {
    let s = aligned_student(teacher, student, cfg)?;
    let t = cfg.temperature;
    let plane = teacher.plane_len();
    let teacher_f = teacher.to_f64();
    let mut grad = vec![0.0f64; s.len()];
    let kls: Vec<f64> = grad
        .par_chunks_mut(plane)
        .zip(teacher_f.par_chunks(plane).zip(s.par_chunks(plane)))
        .map(|(g, (tp, sp))| {
            let pt = softmax(tp, t);
            let ps = softmax(sp, t);
            // d/dz of T²·KL through softmax(z / T) is T·(p_s − p_t)
            for ((gi, &a), &b) in g.iter_mut().zip(&ps).zip(&pt) {
                *gi = t * (a - b);
            }
            kl(&pt, &ps)
        })
        .collect();
    let loss = collect_loss(&kls, teacher.channels(), t);

    let (grad_student, grad_align) = match &cfg.align {
        None => (Tensor4::from_f64(student.dims(), &grad)?, None),
        Some(align) => {
            let gx = conv::backward_input_f64(&grad, student.dims(), align);
            let (gw, gb) = conv::backward_params_f64(&student.to_f64(), student.dims(), &grad, align);
            (
                Tensor4::from_f64(student.dims(), &gx)?,
                Some(ConvLayer::from_f64_parts(align, &gw, &gb)?),
            )
        }
    };
    Ok(CwdGradients {
        loss,
        grad_student,
        grad_align,
    })
}

pub fn cwd_grad_student(teacher: &Tensor4, student: &Tensor4, cfg: &CwdConfig) -> Result<Tensor4> {
    Ok(cwd_backward(teacher, student, cfg)?.grad_student)
}

/// `task_loss + feature_weight · feature_loss`. With several distilled
/// layers, pass the sum of their losses; the weight is applied once.
pub fn cwd_total(task_loss: f64, feature_loss: f64, cfg: &CwdConfig) -> Result<f64> {
    ensure_finite("task loss", task_loss)?;
    ensure_finite("feature loss", feature_loss)?;
    cfg.validate()?;
    Ok(task_loss + cfg.feature_weight * feature_loss)
}

/// [`cwd_total`] plus `logit_weight · logit_loss`.
pub fn cwd_total_with_logits(
    task_loss: f64,
    feature_loss: f64,
    logit_loss: f64,
    cfg: &CwdConfig,
) -> Result<f64> {
    ensure_finite("logit loss", logit_loss)?;
    let base = cwd_total(task_loss, feature_loss, cfg)?;
    if cfg.logit_weight == 0.0 {
        return Ok(base);
    }
    Ok(base + cfg.logit_weight * logit_loss)
}

/// Softened-logit distillation: `T² · KL(softmax(t/T) ‖ softmax(s/T))`.
pub fn logit_kd_loss(teacher_logits: &[f32], student_logits: &[f32], temperature: f64) -> Result<f64> {
    if teacher_logits.len() != student_logits.len() {
        return Err(mismatch(format!(
            "teacher has {} logits, student {}",
            teacher_logits.len(),
            student_logits.len()
        )));
    }
    if teacher_logits.is_empty() {
        return Err(invalid("logit vectors must not be empty"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    if teacher_logits.iter().chain(student_logits).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite logit"));
    }
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let pt = softmax(&to64(teacher_logits), temperature);
    let ps = softmax(&to64(student_logits), temperature);
    Ok(temperature * temperature * kl(&pt, &ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    // (1/3)·ln(2/3) + (2/3)·ln(4/3), evaluated by hand
    const HAND_KL: f64 = 0.056633;

    fn pair(t: &[f32], s: &[f32]) -> (Tensor4, Tensor4) {
        let dims = [1, 1, 1, t.len()];
        (Tensor4::new(dims, t.to_vec()).unwrap(), Tensor4::new(dims, s.to_vec()).unwrap())
    }

    #[test]
    fn identical_features_have_zero_loss() {
        let mut rng = Rng::new(1);
        let x = Tensor4::random_normal([2, 3, 4, 4], &mut rng, 2.0);
        for t in [1.0, 2.0, 3.0, 4.0] {
            let l = cwd_loss(&x, &x, &CwdConfig::new(t)).unwrap();
            assert!(l.loss.abs() < 1e-7);
        }
    }

    #[test]
    fn hand_oracle_case() {
        let (t, s) = pair(&[0.0, 2f32.ln()], &[0.0, 0.0]);
        let l = cwd_loss(&t, &s, &CwdConfig::new(1.0)).unwrap();
        assert!((l.loss - HAND_KL).abs() < 1e-5, "{}", l.loss);
        assert_eq!(l.per_channel.len(), 1);
    }

    #[test]
    fn temperature_squared_factor() {
        let (t, s) = pair(&[0.0, 2.0 * 2f32.ln()], &[0.0, 0.0]);
        let l = cwd_loss(&t, &s, &CwdConfig::new(2.0)).unwrap();
        assert!((l.loss - 4.0 * HAND_KL).abs() < 4e-5, "{}", l.loss);
    }

    #[test]
    fn per_channel_sums_to_loss() {
        let mut rng = Rng::new(2);
        let t = Tensor4::random_normal([2, 4, 3, 3], &mut rng, 1.0);
        let s = Tensor4::random_normal([2, 4, 3, 3], &mut rng, 1.0);
        let cfg = CwdConfig::new(3.0);
        let l = cwd_loss(&t, &s, &cfg).unwrap();
        let summed: f64 = l.per_channel.iter().sum::<f64>() * 9.0;
        assert!((summed - l.loss).abs() < 1e-5);
    }

    #[test]
    fn gradient_vanishes_at_teacher_and_planes_sum_to_zero() {
        let mut rng = Rng::new(3);
        let t = Tensor4::random_normal([1, 3, 4, 4], &mut rng, 1.0);
        let g = cwd_grad_student(&t, &t, &CwdConfig::new(2.0)).unwrap();
        assert!(g.max_abs() < 1e-7);

        let s = Tensor4::random_normal([1, 3, 4, 4], &mut rng, 1.0);
        let g = cwd_grad_student(&t, &s, &CwdConfig::new(2.0)).unwrap();
        for c in 0..3 {
            let sum: f64 = g.plane(0, c).iter().map(|&v| v as f64).sum();
            assert!(sum.abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_requires_alignment() {
        let mut rng = Rng::new(4);
        let t = Tensor4::random_normal([1, 4, 3, 3], &mut rng, 1.0);
        let s = Tensor4::random_normal([1, 2, 3, 3], &mut rng, 1.0);
        assert!(cwd_loss(&t, &s, &CwdConfig::new(1.0)).is_err());
        let align = ConvLayer::init_uniform(2, 4, 1, &mut rng).unwrap();
        let cfg = CwdConfig::new(1.0).with_align(align.clone());
        assert!(cwd_loss(&t, &s, &cfg).unwrap().loss >= 0.0);
        // alignment with equal channel counts is a configuration error
        let cfg = CwdConfig::new(1.0).with_align(ConvLayer::identity(4, 1).unwrap());
        assert!(cwd_loss(&t, &t, &cfg).is_err());
        // spatial mismatch
        let s = Tensor4::random_normal([1, 4, 3, 2], &mut rng, 1.0);
        assert!(cwd_loss(&t, &s, &CwdConfig::new(1.0)).is_err());
    }

    #[test]
    fn invalid_config() {
        let x = Tensor4::zeros([1, 1, 2, 2]);
        for cfg in [
            CwdConfig::new(0.0),
            CwdConfig { feature_weight: -1.0, ..CwdConfig::new(1.0) },
            CwdConfig { logit_weight: f64::NAN, ..CwdConfig::new(1.0) },
        ] {
            assert!(cwd_loss(&x, &x, &cfg).is_err());
        }
    }

    #[test]
    fn totals() {
        let cfg = CwdConfig::new(1.0);
        assert_eq!(cwd_total(1.0, 0.02, &cfg).unwrap(), 2.0);
        assert_eq!(cwd_total(1.3, 0.0, &cfg).unwrap(), 1.3);
        assert_eq!(cwd_total(0.0, 1.0, &cfg).unwrap(), 50.0);
        assert!(cwd_total(f64::NAN, 1.0, &cfg).is_err());

        let off = CwdConfig { logit_weight: 0.0, ..cfg.clone() };
        assert_eq!(cwd_total_with_logits(1.0, 0.02, 7.0, &off).unwrap(), 2.0);
        assert_eq!(cwd_total_with_logits(1.0, 0.02, 1.0, &cfg).unwrap(), 5.0);
    }

    #[test]
    fn logit_kd() {
        assert_eq!(logit_kd_loss(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2.0).unwrap(), 0.0);
        let l = logit_kd_loss(&[0.0, 2f32.ln()], &[0.0, 0.0], 1.0).unwrap();
        assert!((l - HAND_KL).abs() < 1e-5);
        assert!(logit_kd_loss(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(logit_kd_loss(&[], &[], 1.0).is_err());
        // a constant shift induces the same softened distribution
        assert!(logit_kd_loss(&[0.0, 1.0], &[5.0, 6.0], 3.0).unwrap() < 1e-12);
    }
}
