//! Detection metrics (IoU, mAP@.5 with all-point interpolated AP), parameter
//! counting, and the finite-difference gradient checker shared by the module
//! test suites.

use crate::boxes::{BBox, Detection, GroundTruthBox};
use crate::error::{FuseError, Result};
use crate::nn::ParamMap;
use crate::tensor::{no_grad, Tensor};

/// Intersection-over-union of two boxes; degenerate (zero-area) boxes yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// One point of a precision-recall curve.
#[derive(Clone, Copy, Debug)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Matching outcome for a full evaluation split at IoU 0.5.
#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    /// (class, image index, detection index, is true positive), in the global
    /// confidence-sorted order used for matching.
    pub flags: Vec<(usize, usize, usize, bool)>,
    /// Per-class PR curve (classes with ground truth only).
    pub pr_curves: Vec<(usize, Vec<PrPoint>)>,
    /// Per-class average precision.
    pub ap_per_class: Vec<(usize, f64)>,
    pub map: f64,
}

/// mAP@.5 over a split: greedy confidence-ordered matching against the
/// highest-IoU unmatched ground truth of the same class, then all-point
/// interpolated AP averaged over classes present in the ground truth.
pub fn map50(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthBox>],
    class_count: usize,
) -> Result<MatchResult> {
    if detections.len() != ground_truth.len() {
        return Err(FuseError::ShapeMismatch(format!(
            "detections for {} images vs ground truth for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    for dets in detections {
        for d in dets {
            if d.class_id >= class_count {
                return Err(FuseError::InvalidConfig(format!(
                    "detection class id {} out of range (classes: {class_count})",
                    d.class_id
                )));
            }
        }
    }
    for gts in ground_truth {
        for g in gts {
            if g.class_id >= class_count {
                return Err(FuseError::InvalidConfig(format!(
                    "ground-truth class id {} out of range (classes: {class_count})",
                    g.class_id
                )));
            }
        }
    }

    let mut result = MatchResult::default();
    let mut ap_sum = 0.0;
    let mut classes_with_gt = 0usize;

    for class in 0..class_count {
        let gt_count: usize = ground_truth
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == class).count())
            .sum();
        if gt_count == 0 {
            continue;
        }
        classes_with_gt += 1;

        // (confidence, image, det index) sorted by confidence desc, ties by
        // (image, det index) ascending.
        let mut preds: Vec<(f64, usize, usize)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                if d.class_id == class {
                    preds.push((d.confidence, img, di));
                }
            }
        }
        preds.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut matched: Vec<Vec<bool>> = ground_truth
            .iter()
            .map(|g| vec![false; g.len()])
            .collect();
        let mut curve = Vec::with_capacity(preds.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(_, img, di) in &preds {
            let det = &detections[img][di];
            // Highest IoU, then lowest ground-truth index.
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in ground_truth[img].iter().enumerate() {
                if g.class_id != class || matched[img][gi] {
                    continue;
                }
                let v = iou(&det.bbox, &g.bbox());
                if v >= 0.5 && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            let is_tp = if let Some((_, gi)) = best {
                matched[img][gi] = true;
                tp += 1;
                true
            } else {
                fp += 1;
                false
            };
            result.flags.push((class, img, di, is_tp));
            curve.push(PrPoint {
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / gt_count as f64,
            });
        }

        let ap = average_precision(&curve);
        ap_sum += ap;
        result.pr_curves.push((class, curve));
        result.ap_per_class.push((class, ap));
    }

    result.map = if classes_with_gt == 0 {
        0.0
    } else {
        ap_sum / classes_with_gt as f64
    };
    Ok(result)
}

/// All-point interpolated AP: area under the precision envelope of the PR
/// curve. `curve` must be in prediction order (non-decreasing recall).
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut recalls = vec![0.0];
    let mut precisions = vec![0.0]; // placeholder, replaced by envelope
    for p in curve {
        recalls.push(p.recall);
        precisions.push(p.precision);
    }
    // Precision envelope from the right.
    for i in (0..precisions.len() - 1).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..recalls.len() {
        ap += (recalls[i] - recalls[i - 1]) * precisions[i];
    }
    ap
}

/// Total scalar parameter count across all named arrays.
pub fn count_params(params: &ParamMap) -> usize {
    params.count_scalars()
}

/// Renders a side-by-side RGB | IR panel with boxes drawn on both halves:
/// true-positive predictions green, false positives red, missed ground
/// truths yellow. Returns a (3, H, 2W + 4) image in [0, 1].
pub fn render_overlay(
    rgb: &crate::tensor::Data,
    ir: &crate::tensor::Data,
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
) -> crate::tensor::Data {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let gap = 4usize;
    let mut canvas = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3, h, 2 * w + gap]), 1.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                canvas[[c, y, x]] = rgb[[c, y, x]];
                canvas[[c, y, w + gap + x]] = ir[[0, y, x]];
            }
        }
    }

    // Greedy matching at IoU 0.5 to classify predictions and misses.
    let class_count = detections
        .iter()
        .map(|d| d.class_id + 1)
        .chain(ground_truth.iter().map(|g| g.class_id + 1))
        .max()
        .unwrap_or(1);
    let result = map50(&[detections.to_vec()], &[ground_truth.to_vec()], class_count)
        .expect("consistent ids");
    let mut matched_gt = vec![false; ground_truth.len()];
    for (class, _, di, is_tp) in &result.flags {
        if *is_tp {
            // Re-derive which ground truth this hit (highest IoU of its class).
            let det = &detections[*di];
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in ground_truth.iter().enumerate() {
                if g.class_id != *class || matched_gt[gi] {
                    continue;
                }
                let v = iou(&det.bbox, &g.bbox());
                if v >= 0.5 && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            if let Some((_, gi)) = best {
                matched_gt[gi] = true;
            }
        }
    }

    let mut draw = |b: &BBox, color: [f64; 3]| {
        let x1 = ((b.x1 * w as f64) as usize).min(w - 1);
        let x2 = ((b.x2 * w as f64) as usize).min(w - 1);
        let y1 = ((b.y1 * h as f64) as usize).min(h - 1);
        let y2 = ((b.y2 * h as f64) as usize).min(h - 1);
        for panel in [0usize, w + gap] {
            for x in x1..=x2 {
                for c in 0..3 {
                    canvas[[c, y1, panel + x]] = color[c];
                    canvas[[c, y2, panel + x]] = color[c];
                }
            }
            for y in y1..=y2 {
                for c in 0..3 {
                    canvas[[c, y, panel + x1]] = color[c];
                    canvas[[c, y, panel + x2]] = color[c];
                }
            }
        }
    };

    let tp_flags: std::collections::HashMap<usize, bool> = result
        .flags
        .iter()
        .map(|(_, _, di, is_tp)| (*di, *is_tp))
        .collect();
    for (di, det) in detections.iter().enumerate() {
        let color = if tp_flags.get(&di).copied().unwrap_or(false) {
            [0.1, 0.9, 0.1]
        } else {
            [0.95, 0.1, 0.1]
        };
        draw(&det.bbox, color);
    }
    for (gi, g) in ground_truth.iter().enumerate() {
        if !matched_gt[gi] {
            draw(&g.bbox(), [0.95, 0.9, 0.1]);
        }
    }
    canvas
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when the analytic gradient contained a non-finite entry.
    pub non_finite_at: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn assert_pass(&self) {
        assert!(
            self.pass,
            "gradient check failed: max relative error {:.3e} (tolerance {:.1e}), worst at {:?}, non-finite at {:?}",
            self.max_rel_err, self.tolerance, self.worst, self.non_finite_at
        );
    }
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// finite differences of size `step`, elementwise over every input.
///
/// Relative error uses `|a - n| / max(|a|, |n|)` and ignores elements where
/// both magnitudes are below 1e-8.
pub fn grad_check(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    grad_check_impl(f, inputs, step, tolerance, None)
}

/// Like [`grad_check`] but probes at most `max_per_input` deterministically
/// sampled elements per input, for operations too large to sweep fully.
pub fn grad_check_sampled(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
    max_per_input: usize,
) -> GradCheckReport {
    grad_check_impl(f, inputs, step, tolerance, Some(max_per_input))
}

fn grad_check_impl(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[Tensor],
    step: f64,
    tolerance: f64,
    max_per_input: Option<usize>,
) -> GradCheckReport {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs);
    loss.backward();
    let analytic: Vec<_> = inputs.iter().map(|t| t.grad()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        tolerance,
        pass: true,
        non_finite_at: None,
    };

    for (ii, t) in inputs.iter().enumerate() {
        let a = match &analytic[ii] {
            Some(a) => a.clone(),
            None => ndarray::ArrayD::zeros(t.value().raw_dim()),
        };
        if let Some(pos) = a.iter().position(|v| !v.is_finite()) {
            report.non_finite_at = Some((ii, pos));
            report.pass = false;
            return report;
        }
        let n_elems = t.len();
        let indices: Vec<usize> = match max_per_input {
            Some(m) if n_elems > m => {
                // Deterministic stride sampling covering the whole range.
                let stride = n_elems / m;
                (0..m).map(|k| (k * stride + k * 7919 % stride.max(1)).min(n_elems - 1)).collect()
            }
            _ => (0..n_elems).collect(),
        };
        let a_slice: Vec<f64> = a.iter().cloned().collect();
        for &ei in &indices {
            let orig = {
                let v = t.value();
                v.as_slice().map(|s| s[ei]).unwrap_or_else(|| *v.iter().nth(ei).expect("element"))
            };
            let set = |val: f64| {
                t.update_value(|d| match d.as_slice_mut() {
                    Some(s) => s[ei] = val,
                    None => *d.iter_mut().nth(ei).expect("element") = val,
                });
            };
            set(orig + step);
            let plus = no_grad(|| f(inputs).item());
            set(orig - step);
            let minus = no_grad(|| f(inputs).item());
            set(orig);

            let numeric = (plus - minus) / (2.0 * step);
            let aval = a_slice[ei];
            let denom = aval.abs().max(numeric.abs());
            if denom < 1e-8 {
                continue;
            }
            let rel = (aval - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ii, ei));
            }
        }
    }
    report.pass = report.max_rel_err < tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn det(class_id: usize, confidence: f64, b: BBox) -> Detection {
        Detection { class_id, confidence, bbox: b }
    }

    fn unit_square(x: f64, y: f64) -> BBox {
        BBox { x1: x, y1: y, x2: x + 1.0, y2: y + 1.0 }
    }

    #[test]
    fn iou_identical_boxes_is_one() {
        let b = BBox { x1: 0.1, y1: 0.2, x2: 0.5, y2: 0.6 };
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes_is_zero() {
        let a = BBox { x1: 0.0, y1: 0.0, x2: 0.2, y2: 0.2 };
        let b = BBox { x1: 0.5, y1: 0.5, x2: 0.9, y2: 0.9 };
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_offset_unit_squares() {
        // Unit squares offset by (0.5, 0): intersection 0.5, union 1.5.
        let a = unit_square(0.0, 0.0);
        let b = unit_square(0.5, 0.0);
        let v = iou(&a, &b);
        assert!((v - 0.5 / 1.5).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn iou_degenerate_box_is_zero() {
        let a = BBox { x1: 0.3, y1: 0.3, x2: 0.3, y2: 0.7 };
        let b = unit_square(0.0, 0.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&b, &a), 0.0);
    }

    /// Brute-force AP oracle: enumerates the PR curve directly from a
    /// TP/FP sequence and integrates the precision envelope numerically on a
    /// dense recall grid.
    fn ap_oracle(tp_flags: &[bool], gt_count: usize) -> f64 {
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for &f in tp_flags {
            if f {
                tp += 1
            } else {
                fp += 1
            }
            points.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
        }
        let grid = 2_000_000usize;
        let mut sum = 0.0;
        for i in 0..grid {
            let r = (i as f64 + 0.5) / grid as f64;
            let env = points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            sum += env;
        }
        sum / grid as f64
    }

    #[test]
    fn map50_hand_built_three_prediction_case() {
        // 1 class, 2 ground truths, predictions: conf .9 TP, .8 FP, .7 TP.
        let gts = vec![vec![
            GroundTruthBox { class_id: 0, cx: 0.25, cy: 0.25, w: 0.2, h: 0.2 },
            GroundTruthBox { class_id: 0, cx: 0.75, cy: 0.75, w: 0.2, h: 0.2 },
        ]];
        let dets = vec![vec![
            det(0, 0.9, BBox::from_cxcywh(0.25, 0.25, 0.2, 0.2)),
            det(0, 0.8, BBox::from_cxcywh(0.5, 0.25, 0.2, 0.2)),
            det(0, 0.7, BBox::from_cxcywh(0.75, 0.75, 0.2, 0.2)),
        ]];
        let r = map50(&dets, &gts, 1).unwrap();
        // Precision points (1, 1/2, 2/3), recall (1/2, 1/2, 1):
        // AP = 0.5*1 + 0.5*(2/3).
        let expected = 0.5 + 0.5 * (2.0 / 3.0);
        assert!((r.map - expected).abs() < 1e-12, "got {}", r.map);
        let oracle = ap_oracle(&[true, false, true], 2);
        assert!((r.map - oracle).abs() < 1e-5, "oracle {oracle}, got {}", r.map);
    }

    #[test]
    fn map50_perfect_predictions() {
        let gts = vec![vec![
            GroundTruthBox { class_id: 0, cx: 0.3, cy: 0.3, w: 0.2, h: 0.2 },
            GroundTruthBox { class_id: 1, cx: 0.7, cy: 0.7, w: 0.2, h: 0.2 },
        ]];
        let dets = vec![vec![
            det(0, 1.0, BBox::from_cxcywh(0.3, 0.3, 0.2, 0.2)),
            det(1, 1.0, BBox::from_cxcywh(0.7, 0.7, 0.2, 0.2)),
        ]];
        let r = map50(&dets, &gts, 2).unwrap();
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn map50_no_predictions_is_zero() {
        let gts = vec![vec![GroundTruthBox { class_id: 0, cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 }]];
        let dets = vec![vec![]];
        let r = map50(&dets, &gts, 1).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn map50_rejects_out_of_range_class() {
        let gts = vec![vec![GroundTruthBox { class_id: 3, cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 }]];
        let dets = vec![vec![]];
        assert!(map50(&dets, &gts, 2).is_err());
    }

    #[test]
    fn map50_deleting_true_positive_does_not_increase() {
        let gts = vec![vec![
            GroundTruthBox { class_id: 0, cx: 0.25, cy: 0.25, w: 0.2, h: 0.2 },
            GroundTruthBox { class_id: 0, cx: 0.75, cy: 0.75, w: 0.2, h: 0.2 },
        ]];
        let full = vec![vec![
            det(0, 0.9, BBox::from_cxcywh(0.25, 0.25, 0.2, 0.2)),
            det(0, 0.8, BBox::from_cxcywh(0.5, 0.25, 0.2, 0.2)),
            det(0, 0.7, BBox::from_cxcywh(0.75, 0.75, 0.2, 0.2)),
        ]];
        let reduced = vec![vec![full[0][0], full[0][1]]];
        let m_full = map50(&full, &gts, 1).unwrap().map;
        let m_reduced = map50(&reduced, &gts, 1).unwrap().map;
        assert!(m_reduced <= m_full + 1e-12);
    }

    #[test]
    fn grad_check_identity() {
        let x = Tensor::new(ArrayD::from_elem(IxDyn(&[3]), 1.0), true);
        let r = grad_check(|ins| ins[0].sum_all(), &[x], 1e-4, 1e-6);
        r.assert_pass();
        assert!(r.max_rel_err < 1e-10);
    }

    #[test]
    fn grad_check_scalar_square() {
        let x = Tensor::new(ArrayD::from_elem(IxDyn(&[1]), 3.0), true);
        let r = grad_check(|ins| ins[0].square().sum_all(), &[x.clone()], 1e-4, 1e-6);
        r.assert_pass();
        // Analytic gradient at x=3 is 6; central differences agree closely.
        let g = x.grad().unwrap();
        assert!((g[[0]] - 6.0).abs() < 1e-12);
        assert!(r.max_rel_err < 1e-8);
    }
}
