//! Independent reference implementations used as test oracles. Everything
//! here is written from the definitions, in f64, without calling the code
//! under test.
#![allow(dead_code)]

use distillkit::deteval::{BBox, Detection, GroundTruthBox};
use distillkit::Rng;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + h;
            let up = f(&v);
            v[i] = x[i] - h;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ---------------------------------------------------------------- CWD ----

/// `T² Σ_{n,c} KL(softmax(t/T) ‖ softmax(s/T))` over spatial planes.
pub fn cwd_oracle(teacher: &[f64], student: &[f64], planes: usize, temperature: f64) -> f64 {
    let len = teacher.len() / planes;
    let softmax = |x: &[f64]| {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| ((v - m) / temperature).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for p in 0..planes {
        let pt = softmax(&teacher[p * len..][..len]);
        let ps = softmax(&student[p * len..][..len]);
        for (a, b) in pt.iter().zip(&ps) {
            total += a * (a.max(1e-12).ln() - b.max(1e-12).ln());
        }
    }
    temperature * temperature * total
}

// --------------------------------------------------------------- conv ----

/// Stride-1 correlation with zero padding `k / 2`. `w` is `(out, in, k, k)`.
pub fn conv_oracle(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], out_c: usize, k: usize) -> Vec<f64> {
    let [n, in_c, h, wd] = dims;
    let pad = (k / 2) as isize;
    let mut y = vec![0.0; n * out_c * h * wd];
    for ni in 0..n {
        for o in 0..out_c {
            for r in 0..h {
                for c in 0..wd {
                    let mut acc = b[o];
                    for i in 0..in_c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = r as isize + ky as isize - pad;
                                let xx = c as isize + kx as isize - pad;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * in_c + i) * k + ky) * k + kx]
                                    * x[((ni * in_c + i) * h + yy as usize) * wd + xx as usize];
                            }
                        }
                    }
                    y[((ni * out_c + o) * h + r) * wd + c] = acc;
                }
            }
        }
    }
    y
}

// ---------------------------------------------------------------- MGD ----

#[derive(Clone, Debug)]
pub struct OracleLayer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub out_c: usize,
    pub k: usize,
}

impl OracleLayer {
    pub fn from(layer: &distillkit::ConvLayer) -> Self {
        Self {
            w: to_f64(layer.weight()),
            b: to_f64(layer.bias()),
            out_c: layer.out_channels(),
            k: layer.kernel(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.w.iter().chain(&self.b).copied().collect()
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        let (w, b) = p.split_at(self.w.len());
        Self {
            w: w.to_vec(),
            b: b.to_vec(),
            ..self.clone()
        }
    }

    pub fn apply(&self, x: &[f64], dims: [usize; 4]) -> Vec<f64> {
        conv_oracle(x, dims, &self.w, &self.b, self.out_c, self.k)
    }
}

pub struct MgdOracle {
    pub loss: f64,
    pub preactivations: Vec<f64>,
}

/// mask → align → conv → ReLU → conv → residual → square → sum, spelled out.
/// `mask` is `(mask_batch, 1, h, w)` with `mask_batch` 1 or `n`.
pub fn mgd_oracle(
    teacher: &[f64],
    student: &[f64],
    student_dims: [usize; 4],
    mask: &[f64],
    align: Option<&OracleLayer>,
    conv1: &OracleLayer,
    conv2: &OracleLayer,
) -> MgdOracle {
    let [n, _, h, w] = student_dims;
    let (aligned, c) = match align {
        Some(a) => (a.apply(student, student_dims), a.out_c),
        None => (student.to_vec(), student_dims[1]),
    };
    let mask_batch = mask.len() / (h * w);
    let mut masked = aligned;
    for ni in 0..n {
        for ci in 0..c {
            for cell in 0..h * w {
                let m = mask[(if mask_batch == 1 { 0 } else { ni }) * h * w + cell];
                masked[(ni * c + ci) * h * w + cell] *= m;
            }
        }
    }
    let dims = [n, c, h, w];
    let pre = conv1.apply(&masked, dims);
    let act: Vec<f64> = pre.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let out = conv2.apply(&act, dims);
    let loss = out.iter().zip(teacher).map(|(o, t)| (o - t) * (o - t)).sum();
    MgdOracle {
        loss,
        preactivations: pre,
    }
}

// ------------------------------------------------------------ matching ----

pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let x1 = a.x.max(b.x);
    let y1 = a.y.max(b.y);
    let x2 = (a.x + a.w).min(b.x + b.w);
    let y2 = (a.y + a.h).min(b.y + b.h);
    let inter = if x2 > x1 && y2 > y1 { (x2 - x1) * (y2 - y1) } else { 0.0 };
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Detection indices by descending score, stable on ties.
pub fn ranked(dets: &[&Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // insertion sort: obviously stable
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j - 1]].score < dets[idx[j]].score {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

/// Every injective partial assignment of ranked detections to ground truth
/// with IoU ≥ `thr` on each matched pair, then keeps those consistent with
/// the greedy rule: each detection, in rank order, takes the best (highest
/// IoU, lowest index on ties) still-free box if one qualifies, and nothing
/// otherwise. Returns all consistent assignments (the rule admits exactly
/// one).
pub fn brute_force_matchings(dets: &[&Detection], gts: &[&GroundTruthBox], thr: f64) -> Vec<Vec<Option<usize>>> {
    let order = ranked(dets);
    let iou = |d: usize, g: usize| -> f64 {
        if dets[d].image_id != gts[g].image_id {
            0.0
        } else {
            iou_oracle(&dets[d].bbox, &gts[g].bbox)
        }
    };
    let mut all = Vec::new();
    let mut current = vec![None; order.len()];
    fn rec(
        pos: usize,
        order: &[usize],
        n_gt: usize,
        thr: f64,
        iou: &dyn Fn(usize, usize) -> f64,
        current: &mut Vec<Option<usize>>,
        all: &mut Vec<Vec<Option<usize>>>,
    ) {
        if pos == order.len() {
            all.push(current.clone());
            return;
        }
        current[pos] = None;
        rec(pos + 1, order, n_gt, thr, iou, current, all);
        for g in 0..n_gt {
            if current[..pos].contains(&Some(g)) || iou(order[pos], g) < thr {
                continue;
            }
            current[pos] = Some(g);
            rec(pos + 1, order, n_gt, thr, iou, current, all);
            current[pos] = None;
        }
    }
    rec(0, &order, gts.len(), thr, &iou, &mut current, &mut all);

    all.into_iter()
        .filter(|assign| {
            (0..order.len()).all(|pos| {
                let free = |g: &usize| !assign[..pos].contains(&Some(*g));
                let candidates: Vec<usize> = (0..gts.len()).filter(free).filter(|&g| iou(order[pos], g) >= thr).collect();
                let best = candidates
                    .iter()
                    .copied()
                    .fold(None::<usize>, |b, g| match b {
                        Some(bg) if iou(order[pos], bg) >= iou(order[pos], g) => Some(bg),
                        _ => Some(g),
                    });
                assign[pos] == best
            })
        })
        .collect()
}

/// Interpolated AP straight from the definition: for each recall level
/// `k/100`, the best precision at any rank whose recall reaches it.
pub fn ap_oracle(tp_in_rank_order: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..=100usize {
        let mut best = 0.0f64;
        let mut tp = 0usize;
        for (i, &hit) in tp_in_rank_order.iter().enumerate() {
            tp += hit as usize;
            // recall ≥ k/100 compared exactly in integers
            if tp * 100 >= k * total_gt {
                best = best.max(tp as f64 / (i + 1) as f64);
            }
        }
        sum += best;
    }
    sum / 101.0
}

pub struct ClassOracle {
    pub class_id: i64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Per-class AP and counts at one threshold, matching image by image with
/// the brute-force matcher and ranking all of the class's detections
/// together.
pub fn evaluate_oracle(dets: &[Detection], gts: &[GroundTruthBox], thr: f64) -> Vec<ClassOracle> {
    let mut classes: Vec<i64> = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).collect();
    classes.sort();
    classes.dedup();
    classes
        .into_iter()
        .map(|class_id| {
            let cd: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
            let cg: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.class_id == class_id).collect();
            let mut images: Vec<&str> = cd.iter().map(|d| d.image_id.as_str()).collect();
            images.sort();
            images.dedup();
            // hit flag per detection, indexed like `cd`
            let mut hit = vec![false; cd.len()];
            for img in images {
                let idx: Vec<usize> = (0..cd.len()).filter(|&i| cd[i].image_id == img).collect();
                let sub: Vec<&Detection> = idx.iter().map(|&i| cd[i]).collect();
                let sub_gt: Vec<&GroundTruthBox> = cg.iter().copied().filter(|g| g.image_id == img).collect();
                let found = brute_force_matchings(&sub, &sub_gt, thr);
                assert_eq!(found.len(), 1, "greedy rule must admit exactly one matching");
                let order = ranked(&sub);
                for (pos, m) in found[0].iter().enumerate() {
                    hit[idx[order[pos]]] = m.is_some();
                }
            }
            let flags: Vec<bool> = ranked(&cd).into_iter().map(|i| hit[i]).collect();
            let tp = flags.iter().filter(|&&f| f).count();
            ClassOracle {
                class_id,
                ap: ap_oracle(&flags, cg.len()),
                tp,
                fp: cd.len() - tp,
                fn_: cg.len() - tp,
            }
        })
        .collect()
}

/// Small random scene: up to `max_per_class` boxes per class and image,
/// detections mostly jittered copies of ground truth, scores on a coarse
/// grid so ties occur.
pub fn random_scene(rng: &mut Rng, classes: i64, images: usize, max_per_class: usize) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for img in 0..images {
        let image_id = format!("im{img}");
        for class_id in 0..classes {
            let n_gt = (rng.next_u64() % (max_per_class as u64 + 1)) as usize;
            let n_det = (rng.next_u64() % (max_per_class as u64 + 1)) as usize;
            let mut boxes = Vec::new();
            for _ in 0..n_gt {
                let b = BBox::new(
                    rng.uniform_range(0.0, 40.0),
                    rng.uniform_range(0.0, 40.0),
                    rng.uniform_range(4.0, 20.0),
                    rng.uniform_range(4.0, 20.0),
                );
                boxes.push(b);
                gts.push(GroundTruthBox {
                    image_id: image_id.clone(),
                    class_id,
                    bbox: b,
                });
            }
            for _ in 0..n_det {
                let bbox = if !boxes.is_empty() && rng.uniform() < 0.75 {
                    let g = boxes[(rng.next_u64() % boxes.len() as u64) as usize];
                    let j = 0.35;
                    BBox::new(
                        g.x + rng.uniform_range(-j, j) * g.w,
                        g.y + rng.uniform_range(-j, j) * g.h,
                        g.w * (1.0 + rng.uniform_range(-j, j)),
                        g.h * (1.0 + rng.uniform_range(-j, j)),
                    )
                } else {
                    BBox::new(
                        rng.uniform_range(0.0, 40.0),
                        rng.uniform_range(0.0, 40.0),
                        rng.uniform_range(4.0, 20.0),
                        rng.uniform_range(4.0, 20.0),
                    )
                };
                dets.push(Detection {
                    image_id: image_id.clone(),
                    class_id,
                    bbox,
                    score: (rng.next_u64() % 10) as f64 / 10.0,
                });
            }
        }
    }
    (dets, gts)
}

// -------------------------------------------------------------- stats ----

/// Exact two-sided Wilcoxon p by listing all 2^n sign patterns of the
/// ranks of `|d|` (average ranks on ties, zeros removed).
pub fn wilcoxon_oracle(d: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let stat = |signs: &dyn Fn(usize) -> bool| {
        let plus: f64 = (0..n).filter(|&i| signs(i)).map(|i| ranks[i]).sum();
        let minus: f64 = (0..n).filter(|&i| !signs(i)).map(|i| ranks[i]).sum();
        plus.min(minus)
    };
    let observed = stat(&|i| d[i] > 0.0);
    let total = 1u64 << n;
    let extreme = (0..total)
        .filter(|mask| stat(&|i| mask >> i & 1 == 1) <= observed + 1e-9)
        .count();
    (observed, extreme as f64 / total as f64)
}

fn factorial(n: u64) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Γ(ν/2) for integer ν, exactly via factorials and √π.
fn gamma_half(nu: u64) -> f64 {
    if nu.is_multiple_of(2) {
        factorial(nu / 2 - 1)
    } else {
        let m = (nu - 1) / 2;
        factorial(2 * m) / (4f64.powi(m as i32) * factorial(m)) * std::f64::consts::PI.sqrt()
    }
}

/// Two-sided Student-t p by Simpson quadrature of the density on [0, |t|].
pub fn t_two_sided_oracle(t: f64, df: u64) -> f64 {
    let nu = df as f64;
    let c = gamma_half(df + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half(df));
    let density = |x: f64| c * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let steps = 20_000;
    let h = t.abs() / steps as f64;
    let mut s = density(0.0) + density(t.abs());
    for i in 1..steps {
        s += density(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}
