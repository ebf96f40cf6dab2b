//! Desk-scale detection head and metric: a per-position affine head over
//! aggregated query features, a cross-entropy + L1 detection loss, and
//! single-threshold VOC-style mean average precision.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{row_softmax_value, Tape, Var};
use crate::backends::BoundingBox;
use crate::error::{CoreError, Result};
use crate::init::{tensor_rng, xavier_uniform};

pub const DEFAULT_CLASS_WEIGHT: f64 = 1.0;
pub const DEFAULT_BOX_WEIGHT: f64 = 5.0;

/// One scored detection. `category` is an episode slot index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub category: usize,
    pub score: f64,
}

/// Ground-truth box for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image: usize,
    pub bbox: BoundingBox,
    pub category: usize,
}

/// Per-position classification and regression targets at stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTargets {
    /// Label per position in `[0, C]`; C is the background slot.
    pub labels: Vec<usize>,
    pub box_targets: Array2<f64>,
    pub foreground: Vec<bool>,
    pub num_slots: usize,
}

/// Assigns each feature-map cell whose center falls inside a ground-truth box
/// to that box's slot; overlaps resolve to the smallest box (ties to the
/// lower box index). Errors if any box covers no cell center.
pub fn build_position_targets(
    height: usize,
    width: usize,
    boxes: &[(BoundingBox, usize)],
    num_slots: usize,
) -> Result<PositionTargets> {
    let hw = height * width;
    let mut labels = vec![num_slots; hw];
    let mut box_targets = Array2::zeros((hw, 4));
    let mut foreground = vec![false; hw];
    let mut covered = vec![false; boxes.len()];
    let mut chosen: Vec<Option<usize>> = vec![None; hw];
    for (bi, (b, slot)) in boxes.iter().enumerate() {
        if *slot >= num_slots {
            return Err(CoreError::Validation(format!(
                "slot {slot} out of range {num_slots}"
            )));
        }
        for r in 0..height {
            for c in 0..width {
                let y = (r as f64 + 0.5) / height as f64;
                let x = (c as f64 + 0.5) / width as f64;
                if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
                    covered[bi] = true;
                    let pos = r * width + c;
                    let replace = match chosen[pos] {
                        None => true,
                        Some(prev) => b.area() < boxes[prev].0.area(),
                    };
                    if replace {
                        chosen[pos] = Some(bi);
                        labels[pos] = *slot;
                        foreground[pos] = true;
                        box_targets[(pos, 0)] = b.x0;
                        box_targets[(pos, 1)] = b.y0;
                        box_targets[(pos, 2)] = b.x1;
                        box_targets[(pos, 3)] = b.y1;
                    }
                }
            }
        }
    }
    if let Some(i) = covered.iter().position(|c| !c) {
        return Err(CoreError::Validation(format!(
            "ground-truth box {i} covers no position at the feature-map stride"
        )));
    }
    Ok(PositionTargets {
        labels,
        box_targets,
        foreground,
        num_slots,
    })
}

/// Two affine projections over aggregated features: class logits and box
/// coordinates per position.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub class_w: Array2<f64>,
    pub class_b: Array2<f64>,
    pub box_w: Array2<f64>,
    pub box_b: Array2<f64>,
}

impl DetectionHead {
    pub fn init(d: usize, num_slots: usize, master_seed: u64, prefix: &str) -> Self {
        DetectionHead {
            class_w: xavier_uniform(
                &mut tensor_rng(master_seed, &format!("{prefix}.class_w")),
                d,
                num_slots + 1,
            ),
            class_b: Array2::zeros((1, num_slots + 1)),
            box_w: xavier_uniform(
                &mut tensor_rng(master_seed, &format!("{prefix}.box_w")),
                d,
                4,
            ),
            box_b: Array2::from_elem((1, 4), 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub class_w: Var,
    pub class_b: Var,
    pub box_w: Var,
    pub box_b: Var,
}

pub fn bind_head(tape: &mut Tape, head: &DetectionHead) -> HeadVars {
    HeadVars {
        class_w: tape.leaf(head.class_w.clone()),
        class_b: tape.leaf(head.class_b.clone()),
        box_w: tape.leaf(head.box_w.clone()),
        box_b: tape.leaf(head.box_b.clone()),
    }
}

pub fn head_forward_graph(tape: &mut Tape, hv: &HeadVars, aggregated: Var) -> (Var, Var) {
    let cl = tape.matmul(aggregated, hv.class_w);
    let cl = tape.add_row(cl, hv.class_b);
    let bx = tape.matmul(aggregated, hv.box_w);
    let bx = tape.add_row(bx, hv.box_b);
    (cl, bx)
}

/// Plain-matrix head forward: `(class logits, box coordinates)`.
pub fn head_forward(
    head: &DetectionHead,
    aggregated: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if aggregated.ncols() != head.class_w.nrows() {
        return Err(CoreError::Shape(format!(
            "head_forward: feature dim {} vs head {}",
            aggregated.ncols(),
            head.class_w.nrows()
        )));
    }
    let mut tape = Tape::new();
    let hv = bind_head(&mut tape, head);
    let agg = tape.leaf(aggregated.clone());
    let (cl, bx) = head_forward_graph(&mut tape, &hv, agg);
    Ok((tape.value(cl).clone(), tape.value(bx).clone()))
}

/// Cross-entropy over positions plus weighted L1 on foreground boxes.
pub fn detection_loss_graph(
    tape: &mut Tape,
    class_logits: Var,
    box_pred: Var,
    targets: &PositionTargets,
    class_weight: f64,
    box_weight: f64,
) -> Var {
    let ce = tape.softmax_ce_sum(class_logits, targets.labels.clone());
    let ce = tape.scale(ce, class_weight);
    let l1 = tape.l1_masked_sum(box_pred, targets.box_targets.clone(), targets.foreground.clone());
    let l1 = tape.scale(l1, box_weight);
    tape.add(ce, l1)
}

/// Plain-matrix detection loss (class weight 1.0, box weight 5.0 by default).
pub fn detection_loss(
    class_logits: &Array2<f64>,
    box_pred: &Array2<f64>,
    targets: &PositionTargets,
    class_weight: f64,
    box_weight: f64,
) -> Result<f64> {
    let hw = targets.labels.len();
    if class_logits.nrows() != hw || box_pred.nrows() != hw {
        return Err(CoreError::Shape(format!(
            "detection_loss: predictions for {} positions, targets for {hw}",
            class_logits.nrows()
        )));
    }
    if class_logits.ncols() != targets.num_slots + 1 {
        return Err(CoreError::Shape(format!(
            "detection_loss: {} classes vs {} slots + background",
            class_logits.ncols(),
            targets.num_slots
        )));
    }
    let mut tape = Tape::new();
    let cl = tape.leaf(class_logits.clone());
    let bx = tape.leaf(box_pred.clone());
    let loss = detection_loss_graph(&mut tape, cl, bx, targets, class_weight, box_weight);
    Ok(tape.value(loss)[(0, 0)])
}

/// Intersection over union of two normalized boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Turns per-position predictions into scored detections: positions whose
/// argmax class is a foreground slot emit a candidate, then greedy
/// score-ordered suppression drops same-class duplicates above `suppress_iou`.
pub fn extract_detections(
    class_logits: &Array2<f64>,
    box_pred: &Array2<f64>,
    image: usize,
    num_slots: usize,
    score_threshold: f64,
    suppress_iou: f64,
) -> Vec<Detection> {
    let probs = row_softmax_value(class_logits);
    let mut candidates = Vec::new();
    for pos in 0..probs.nrows() {
        let mut best = 0usize;
        for c in 1..probs.ncols() {
            if probs[(pos, c)] > probs[(pos, best)] {
                best = c;
            }
        }
        if best >= num_slots {
            continue; // background
        }
        let score = probs[(pos, best)];
        if score < score_threshold {
            continue;
        }
        let (x0, y0, x1, y1) = (
            box_pred[(pos, 0)].clamp(0.0, 1.0),
            box_pred[(pos, 1)].clamp(0.0, 1.0),
            box_pred[(pos, 2)].clamp(0.0, 1.0),
            box_pred[(pos, 3)].clamp(0.0, 1.0),
        );
        let Ok(bbox) = BoundingBox::new(x0, y0, x1, y1) else {
            continue;
        };
        candidates.push(Detection {
            image,
            bbox,
            category: best,
            score,
        });
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for cand in candidates {
        let duplicate = kept
            .iter()
            .any(|k| k.category == cand.category && iou(&k.bbox, &cand.bbox) > suppress_iou);
        if !duplicate {
            kept.push(cand);
        }
    }
    kept
}

fn average_precision(
    dets: &[&Detection],
    gts: &[&GroundTruthBox],
    iou_threshold: f64,
) -> f64 {
    let n_gt = gts.len();
    if n_gt == 0 {
        return 0.0;
    }
    if dets.is_empty() {
        return 0.0;
    }
    // Descending score, ties broken by lower detection index (stable sort
    // over the already index-ordered slice).
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut matched = vec![false; n_gt];
    let mut recalls = Vec::with_capacity(dets.len());
    let mut precisions = Vec::with_capacity(dets.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &di in &order {
        let det = dets[di];
        // Best unmatched ground truth in the same image; IoU ties keep the
        // lower ground-truth index.
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.image != det.image {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((gi, v));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recalls.push(tp as f64 / n_gt as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    // Monotone precision envelope, integrated over recall.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        ap += (recalls[i] - prev_recall) * precisions[i];
        prev_recall = recalls[i];
    }
    ap
}

/// Per-category average precision at one IoU threshold, for every category
/// present in the ground truth.
pub fn per_category_ap(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_threshold: f64,
) -> Result<Vec<(usize, f64)>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(CoreError::Precondition(format!(
            "iou_threshold must be in (0,1), got {iou_threshold}"
        )));
    }
    if ground_truth.is_empty() {
        return Err(CoreError::Validation(
            "mAP undefined: no ground truth for any category".into(),
        ));
    }
    let categories: BTreeSet<usize> = ground_truth.iter().map(|g| g.category).collect();
    let mut out = Vec::with_capacity(categories.len());
    for cat in categories {
        let dets: Vec<&Detection> = detections.iter().filter(|d| d.category == cat).collect();
        let gts: Vec<&GroundTruthBox> =
            ground_truth.iter().filter(|g| g.category == cat).collect();
        out.push((cat, average_precision(&dets, &gts, iou_threshold)));
    }
    Ok(out)
}

/// Mean over categories present in the ground truth of the per-category AP.
pub fn compute_map(
    detections: &[Detection],
    ground_truth: &[GroundTruthBox],
    iou_threshold: f64,
) -> Result<f64> {
    let aps = per_category_ap(detections, ground_truth, iou_threshold)?;
    Ok(aps.iter().map(|(_, ap)| ap).sum::<f64>() / aps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(image: usize, b: BoundingBox, category: usize, score: f64) -> Detection {
        Detection {
            image,
            bbox: b,
            category,
            score,
        }
    }

    fn gt(image: usize, b: BoundingBox, category: usize) -> GroundTruthBox {
        GroundTruthBox {
            image,
            bbox: b,
            category,
        }
    }

    #[test]
    fn zero_weights_give_uniform_class_probabilities() {
        let d = 6;
        let head = DetectionHead {
            class_w: Array2::zeros((d, 4)),
            class_b: Array2::zeros((1, 4)),
            box_w: Array2::zeros((d, 4)),
            box_b: Array2::zeros((1, 4)),
        };
        let agg = Array2::from_elem((5, d), 0.3);
        let (cl, _) = head_forward(&head, &agg).unwrap();
        let probs = row_softmax_value(&cl);
        for v in probs.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn pointwise_head_maps_identical_rows_identically() {
        let head = DetectionHead::init(8, 3, 7, "head");
        let mut agg = Array2::zeros((4, 8));
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let row: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        for i in 0..4 {
            for j in 0..8 {
                agg[(i, j)] = row[j];
            }
        }
        let (cl, bx) = head_forward(&head, &agg).unwrap();
        for i in 1..4 {
            assert_eq!(cl.row(0), cl.row(i));
            assert_eq!(bx.row(0), bx.row(i));
        }
    }

    #[test]
    fn head_matches_affine_oracle() {
        let head = DetectionHead::init(8, 2, 9, "head");
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let agg = Array2::from_shape_fn((6, 8), |_| r.gen_range(-1.0..1.0));
        let (cl, bx) = head_forward(&head, &agg).unwrap();
        let expect_cl = agg.dot(&head.class_w) + &head.class_b;
        let expect_bx = agg.dot(&head.box_w) + &head.box_b;
        for (a, b) in cl.iter().zip(expect_cl.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in bx.iter().zip(expect_bx.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn simple_targets() -> PositionTargets {
        build_position_targets(2, 2, &[(bb(0.0, 0.0, 0.5, 0.5), 0)], 2).unwrap()
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let targets = simple_targets();
        let mut logits = Array2::from_elem((4, 3), -1000.0);
        for (pos, &label) in targets.labels.iter().enumerate() {
            logits[(pos, label)] = 1000.0;
        }
        let box_pred = targets.box_targets.clone();
        let loss = detection_loss(&logits, &box_pred, &targets, 1.0, 5.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_class_predictions_hit_closed_form() {
        let targets = build_position_targets(2, 2, &[(bb(0.0, 0.0, 0.6, 0.6), 0)], 2).unwrap();
        // Uniform logits; zero out the box term by matching targets.
        let logits = Array2::zeros((4, 3));
        let box_pred = targets.box_targets.clone();
        let loss = detection_loss(&logits, &box_pred, &targets, 1.0, 5.0).unwrap();
        let expect = 4.0 * 3f64.ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn box_term_is_linear_in_its_weight() {
        let targets = simple_targets();
        let logits = Array2::zeros((4, 3));
        let mut box_pred = targets.box_targets.clone();
        box_pred += 0.1;
        let base = detection_loss(&logits, &box_pred, &targets, 0.0, 5.0).unwrap();
        let doubled = detection_loss(&logits, &box_pred, &targets, 0.0, 10.0).unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn uncovered_box_is_rejected() {
        // A sliver between cell centers covers no center at 2x2 stride.
        let r = build_position_targets(2, 2, &[(bb(0.3, 0.3, 0.45, 0.45), 0)], 1);
        assert!(r.is_err());
    }

    #[test]
    fn smallest_box_wins_overlap() {
        let targets = build_position_targets(
            1,
            1,
            &[(bb(0.0, 0.0, 1.0, 1.0), 0), (bb(0.25, 0.25, 0.75, 0.75), 1)],
            2,
        )
        .unwrap();
        assert_eq!(targets.labels, vec![1]);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![gt(0, bb(0.1, 0.1, 0.4, 0.4), 0), gt(0, bb(0.5, 0.5, 0.9, 0.9), 1)];
        let dets = vec![
            det(0, bb(0.1, 0.1, 0.4, 0.4), 0, 1.0),
            det(0, bb(0.5, 0.5, 0.9, 0.9), 1, 1.0),
        ];
        assert_eq!(compute_map(&dets, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![gt(0, bb(0.1, 0.1, 0.4, 0.4), 0)];
        assert_eq!(compute_map(&[], &gts, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn empty_ground_truth_is_error() {
        assert!(compute_map(&[], &[], 0.5).is_err());
    }

    #[test]
    fn late_false_positive_keeps_full_ap() {
        // TP at score 0.9 reaches recall 1 before the score-0.8 FP.
        let gts = vec![gt(0, bb(0.2, 0.2, 0.6, 0.6), 0)];
        let dets = vec![
            det(0, bb(0.2, 0.2, 0.6, 0.6), 0, 0.9),
            det(0, bb(0.7, 0.7, 0.9, 0.9), 0, 0.8),
        ];
        assert_eq!(compute_map(&dets, &gts, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn map_invariant_under_monotone_score_transform_and_order() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let (dets, gts) = random_case(&mut r);
            if gts.is_empty() {
                continue;
            }
            let base = compute_map(&dets, &gts, 0.5).unwrap();
            let squashed: Vec<Detection> = dets
                .iter()
                .map(|d| Detection {
                    score: 1.0 / (1.0 + (-3.0 * d.score - 0.7).exp()),
                    ..d.clone()
                })
                .collect();
            assert_eq!(compute_map(&squashed, &gts, 0.5).unwrap(), base);
            let mut reversed = dets.clone();
            reversed.reverse();
            // Scores in random_case are distinct with probability 1.
            assert_eq!(compute_map(&reversed, &gts, 0.5).unwrap(), base);
        }
    }

    fn random_case(r: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthBox>) {
        let n_gt = r.gen_range(1..=5);
        let n_det = r.gen_range(0..=5);
        let mut gts = Vec::new();
        let rand_box = |r: &mut ChaCha8Rng| {
            let x0: f64 = r.gen_range(0.0..0.6);
            let y0: f64 = r.gen_range(0.0..0.6);
            bb(x0, y0, x0 + r.gen_range(0.1..0.4), y0 + r.gen_range(0.1..0.4))
        };
        for _ in 0..n_gt {
            let b = rand_box(r);
            gts.push(gt(r.gen_range(0..2), b, r.gen_range(0..3)));
        }
        let mut dets = Vec::new();
        for _ in 0..n_det {
            // Half the detections perturb a ground truth, half are random.
            let b = if r.gen_bool(0.5) && !gts.is_empty() {
                let g = &gts[r.gen_range(0..gts.len())];
                let dx: f64 = r.gen_range(-0.05..0.05);
                bb(
                    (g.bbox.x0 + dx).clamp(0.0, 0.8),
                    (g.bbox.y0 + dx).clamp(0.0, 0.8),
                    (g.bbox.x1 + dx).clamp(0.1, 1.0).max(g.bbox.x0 + dx + 0.05),
                    (g.bbox.y1 + dx).clamp(0.1, 1.0).max(g.bbox.y0 + dx + 0.05),
                )
            } else {
                rand_box(r)
            };
            dets.push(det(r.gen_range(0..2), b, r.gen_range(0..3), r.gen()));
        }
        (dets, gts)
    }

    /// Independent re-implementation used as the matching/AP oracle.
    fn brute_force_map(dets: &[Detection], gts: &[GroundTruthBox], thr: f64) -> f64 {
        let cats: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
        let mut total = 0.0;
        for cat in &cats {
            let cd: Vec<&Detection> = dets.iter().filter(|d| d.category == *cat).collect();
            let cg: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.category == *cat).collect();
            // Sort by score descending via repeated max extraction.
            let mut remaining: Vec<usize> = (0..cd.len()).collect();
            let mut order = Vec::new();
            while !remaining.is_empty() {
                let mut best = 0;
                for (i, &idx) in remaining.iter().enumerate() {
                    let better = cd[idx].score > cd[remaining[best]].score
                        || (cd[idx].score == cd[remaining[best]].score
                            && idx < remaining[best]);
                    if better {
                        best = i;
                    }
                }
                order.push(remaining.remove(best));
            }
            let mut used = vec![false; cg.len()];
            let mut flags = Vec::new();
            for &di in &order {
                let mut pick: Option<usize> = None;
                let mut pick_iou = -1.0;
                for (gi, g) in cg.iter().enumerate() {
                    if used[gi] || g.image != cd[di].image {
                        continue;
                    }
                    let v = iou(&cd[di].bbox, &g.bbox);
                    if v >= thr && v > pick_iou {
                        pick = Some(gi);
                        pick_iou = v;
                    }
                }
                if let Some(gi) = pick {
                    used[gi] = true;
                    flags.push(true);
                } else {
                    flags.push(false);
                }
            }
            // PR curve + envelope, written independently.
            let mut ap = 0.0;
            let mut best_prec_at = vec![];
            let (mut tp, mut fp) = (0.0, 0.0);
            for f in &flags {
                if *f {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                best_prec_at.push((tp / cg.len() as f64, tp / (tp + fp)));
            }
            let mut prev_r = 0.0;
            for i in 0..best_prec_at.len() {
                let r_i = best_prec_at[i].0;
                let env = best_prec_at[i..]
                    .iter()
                    .map(|p| p.1)
                    .fold(f64::NEG_INFINITY, f64::max);
                ap += (r_i - prev_r) * env;
                prev_r = r_i;
            }
            total += ap;
        }
        total / cats.len() as f64
    }

    #[test]
    fn map_matches_bruteforce_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (dets, gts) = random_case(&mut r);
            let ours = compute_map(&dets, &gts, 0.5).unwrap();
            let oracle = brute_force_map(&dets, &gts, 0.5);
            assert_eq!(ours, oracle);
        }
    }

    #[test]
    fn extraction_dedups_per_category() {
        // Two positions predicting the same box for the same class collapse
        // to one detection.
        let logits = {
            let mut m = Array2::from_elem((2, 2), -5.0);
            m[(0, 0)] = 5.0;
            m[(1, 0)] = 4.0;
            m
        };
        let mut box_pred = Array2::zeros((2, 4));
        for i in 0..2 {
            box_pred[(i, 0)] = 0.1;
            box_pred[(i, 1)] = 0.1;
            box_pred[(i, 2)] = 0.5;
            box_pred[(i, 3)] = 0.5;
        }
        let dets = extract_detections(&logits, &box_pred, 0, 1, 0.05, 0.5);
        assert_eq!(dets.len(), 1);
        assert!(dets[0].score > 0.9);
    }
}
