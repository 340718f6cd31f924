//! Per-pixel dense baseline: overlap-based target assignment, its loss, and
//! the greedy rotated-IoU NMS it needs at inference.

use std::cmp::Ordering;

use odgcnn_autodiff::{Tape, Var};

use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_bev, Detection, LabeledBox, BOX_CODE};

/// Weight of no-object pixels in [`dense_loss`].
pub const DEFAULT_NEG_WEIGHT: f64 = 0.05;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.5;

/// For every pixel (row-major over `spec`), the target whose BEV footprint
/// covers the pixel center; the nearest center wins when several do.
pub fn assign_overlap(targets: &[LabeledBox], spec: &GridSpec) -> Vec<Option<usize>> {
    let footprints: Vec<_> = targets.iter().map(|t| t.bbox.bev()).collect();
    let mut out = Vec::with_capacity(spec.cells());
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (x, y) = spec.cell_center(c, r);
            let mut best: Option<(f64, usize)> = None;
            for (k, f) in footprints.iter().enumerate() {
                if f.contains([x, y]) {
                    let d = (f.center[0] - x).hypot(f.center[1] - y);
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, k));
                    }
                }
            }
            out.push(best.map(|b| b.1));
        }
    }
    out
}

/// `Σ_assigned [−log p̂(c) + L1] + γ_neg · Σ_empty −log p̂(∅)` over pixels.
pub fn dense_loss(
    tape: &Tape,
    probs: Var,
    boxes: Var,
    assignment: &[Option<usize>],
    targets: &[LabeledBox],
    neg_weight: f64,
) -> Result<Var> {
    let shape = tape.shape(probs);
    let (n, c1) = (shape[0], shape[1]);
    if assignment.len() != n {
        return Err(Error::Shape(format!("{} pixel assignments for {n} pixels", assignment.len())));
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (px, a) in assignment.iter().enumerate() {
        match a {
            Some(t) => pos.push((px, *t)),
            None => neg.push(px),
        }
    }
    let mut total: Option<Var> = None;
    let mut add = |v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v)?,
        });
        Ok(())
    };
    if !neg.is_empty() {
        let nlp = tape.neg_log_prob(tape.gather_rows(probs, &neg)?, &vec![c1 - 1; neg.len()])?;
        add(tape.scale(tape.sum_all(nlp), neg_weight))?;
    }
    if !pos.is_empty() {
        let rows: Vec<usize> = pos.iter().map(|p| p.0).collect();
        let classes: Vec<usize> = pos.iter().map(|p| targets[p.1].class).collect();
        add(tape.sum_all(tape.neg_log_prob(tape.gather_rows(probs, &rows)?, &classes)?))?;
        let codes: Vec<f64> = pos.iter().flat_map(|p| targets[p.1].bbox.encode()).collect();
        let target = tape.constant(vec![rows.len(), BOX_CODE], codes)?;
        add(tape.l1(tape.gather_rows(boxes, &rows)?, target)?)?;
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(vec![1], vec![0.0])?),
    }
}

/// Indices sorted by descending score, lower index first on ties.
fn by_score(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score()
            .partial_cmp(&dets[a].score())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// The `k` highest-scoring detections, in descending score order.
pub fn top_k(dets: &[Detection], k: usize) -> Vec<Detection> {
    by_score(dets).into_iter().take(k).map(|i| dets[i].clone()).collect()
}

/// Class-agnostic greedy NMS. Detections below `score_floor` are dropped; a
/// detection is suppressed when its IoU with a kept one exceeds `threshold`.
/// The result is in descending score order.
pub fn nms(dets: &[Detection], threshold: f64, score_floor: f64) -> Vec<Detection> {
    let mut kept: Vec<&Detection> = Vec::new();
    for i in by_score(dets) {
        let d = &dets[i];
        if d.score() < score_floor {
            continue;
        }
        let fp = d.bbox.bev();
        if kept.iter().all(|k| rotated_iou_bev(&k.bbox.bev(), &fp) <= threshold) {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}
