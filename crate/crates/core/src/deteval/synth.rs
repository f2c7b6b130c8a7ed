//! Synthetic detection scenes with a prescribed average precision.
//!
//! A class gets `num_gt` ground-truth boxes laid out on a grid in one image.
//! Detections are ranked as `k` exact hits, then `f` misses placed away from
//! every ground truth, then the remaining hits. Under 101-point
//! interpolation this yields
//! `AP = (k + 1 + (num_gt − k) · num_gt / (num_gt + f)) / 101`
//! when `num_gt` is 100, so searching over `(k, f)` reaches any target AP
//! in `(0.5, 1]` to within about 1e-4. Exact hits overlap with IoU 1, so the
//! AP is the same at every threshold.

use super::{average_precision, pr_curve, BBox, ClassId, Detection, GroundTruthBox};

pub const NUM_GT: usize = 100;
const MAX_MISSES: usize = 400;

#[derive(Clone, Debug)]
pub struct CraftedClass {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
    pub hits_before_misses: usize,
    pub misses: usize,
    /// AP the crafted ranking produces.
    pub expected_ap: f64,
}

fn ranking(k: usize, f: usize) -> Vec<bool> {
    let mut flags = vec![true; k];
    flags.extend(std::iter::repeat_n(false, f));
    flags.extend(std::iter::repeat_n(true, NUM_GT - k));
    flags
}

fn closed_form_ap(k: usize, f: usize) -> f64 {
    let n = NUM_GT as f64;
    (k as f64 + 1.0 + (NUM_GT - k) as f64 * n / (n + f as f64)) / 101.0
}

/// Picks `(k, f)` whose ranking's AP is closest to `target`; the returned AP
/// is recomputed through the interpolation itself.
pub fn solve_ranking(target: f64) -> (usize, usize, f64) {
    let mut best = (NUM_GT, 0, 1.0);
    for k in 0..=NUM_GT {
        for f in 0..=MAX_MISSES {
            let ap = closed_form_ap(k, f);
            if (ap - target).abs() < (best.2 - target).abs() {
                best = (k, f, ap);
            }
        }
    }
    let (k, f, _) = best;
    (k, f, average_precision(&pr_curve(&ranking(k, f), NUM_GT)))
}

/// Builds a scene for one class whose AP lands as close as possible to
/// `target_ap`.
pub fn craft_class(class_id: ClassId, target_ap: f64, image_id: &str) -> CraftedClass {
    let (k, f, expected_ap) = solve_ranking(target_ap);
    let flags = ranking(k, f);
    let gt_box = |i: usize| BBox::new((i % 10) as f64 * 20.0, (i / 10) as f64 * 20.0, 10.0, 10.0);
    let ground_truth = (0..NUM_GT)
        .map(|i| GroundTruthBox {
            image_id: image_id.to_string(),
            class_id,
            bbox: gt_box(i),
        })
        .collect();
    let total = flags.len();
    let mut next_gt = 0;
    let mut next_miss = 0;
    let detections = flags
        .iter()
        .enumerate()
        .map(|(rank, &hit)| {
            let bbox = if hit {
                next_gt += 1;
                gt_box(next_gt - 1)
            } else {
                next_miss += 1;
                BBox::new(1000.0 + 20.0 * next_miss as f64, 1000.0, 10.0, 10.0)
            };
            Detection {
                image_id: image_id.to_string(),
                class_id,
                bbox,
                score: 1.0 - (rank + 1) as f64 / (total + 2) as f64,
            }
        })
        .collect();
    CraftedClass {
        detections,
        ground_truth,
        hits_before_misses: k,
        misses: f,
        expected_ap,
    }
}
