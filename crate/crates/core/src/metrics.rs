//! Center-distance detection metrics: per-class AP over distance thresholds,
//! true-positive errors, and the NDS composite.

use std::fmt::Write as _;

use crate::geometry::{aligned_iou_3d, yaw_distance, Box9, Detection, LabeledBox};

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

/// Greedy matching result for one class in one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CenterMatch {
    pub tp: Vec<bool>,
    /// `(prediction, target)` index pairs for the true positives.
    pub pairs: Vec<(usize, usize)>,
}

fn bev_distance(a: &Box9, b: &Box9) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

/// `preds` must already be in descending score order. Each prediction takes
/// the nearest unmatched target strictly closer than `threshold`.
pub fn match_by_center(preds: &[Box9], targets: &[Box9], threshold: f64) -> CenterMatch {
    let mut taken = vec![false; targets.len()];
    let mut out = CenterMatch::default();
    for (i, p) in preds.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, t) in targets.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = bev_distance(p, t);
            if d < threshold && best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        match best {
            Some((_, j)) => {
                taken[j] = true;
                out.tp.push(true);
                out.pairs.push((i, j));
            }
            None => out.tp.push(false),
        }
    }
    out
}

/// Area under the precision envelope sampled at 101 recall points, keeping
/// only recall above 0.1 and precision above 0.1, normalized so a perfect
/// detector scores 1.
pub fn average_precision(scores: &[f64], tp: &[bool], n_targets: usize) -> f64 {
    assert_eq!(scores.len(), tp.len());
    if n_targets == 0 || scores.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        hits += tp[i] as usize;
        recall.push(hits as f64 / n_targets as f64);
        precision.push(hits as f64 / (rank + 1) as f64);
    }
    // Envelope: best precision at any recall >= r.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let step = 1.0 / (RECALL_POINTS - 1) as f64;
    let mut area = 0.0;
    let mut cursor = 0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 * step;
        if r <= MIN_RECALL + 1e-12 {
            continue;
        }
        while cursor < recall.len() && recall[cursor] < r - 1e-12 {
            cursor += 1;
        }
        let p = if cursor < recall.len() { precision[cursor] } else { 0.0 };
        area += (p - MIN_PRECISION).max(0.0) * step;
    }
    (area / ((1.0 - MIN_RECALL) * (1.0 - MIN_PRECISION))).clamp(0.0, 1.0)
}

/// Mean translation, scale, orientation and velocity errors over matched
/// `(prediction, target)` pairs; all 1 when there are none.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.ate, self.ase, self.aoe, self.ave]
    }
}

pub fn tp_errors(pairs: &[(Box9, Box9)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mut e = [0.0; 4];
    for (p, t) in pairs {
        e[0] += bev_distance(p, t);
        e[1] += 1.0 - aligned_iou_3d(p, t);
        e[2] += yaw_distance(p.yaw, t.yaw);
        e[3] += (p.velocity[0] - t.velocity[0]).hypot(p.velocity[1] - t.velocity[1]);
    }
    TpErrors {
        ate: e[0] / n,
        ase: e[1] / n,
        aoe: e[2] / n,
        ave: e[3] / n,
    }
}

/// `(5·mAP + Σ (1 − min(1, err))) / 9`.
pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    let tp: f64 = errors.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 9.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `ap[c][t]` for class `c` at `DISTANCE_THRESHOLDS[t]`.
    pub ap: Vec<[f64; 4]>,
    pub class_errors: Vec<TpErrors>,
    pub map: f64,
    pub errors: TpErrors,
    pub nds: f64,
    pub detections: usize,
}

/// Scores detections against ground truth over a set of scenes. Each
/// detection counts for its highest-probability real class.
pub fn evaluate(preds: &[Vec<Detection>], targets: &[Vec<LabeledBox>], class_names: &[String]) -> MetricsReport {
    assert_eq!(preds.len(), targets.len());
    let nc = class_names.len();
    let mut ap = Vec::with_capacity(nc);
    let mut class_errors = Vec::with_capacity(nc);
    for c in 0..nc {
        let mut row = [0.0; 4];
        let n_targets: usize = targets.iter().map(|t| t.iter().filter(|b| b.class == c).count()).sum();
        let mut tp_pairs = Vec::new();
        for (k, &thr) in DISTANCE_THRESHOLDS.iter().enumerate() {
            let mut scores = Vec::new();
            let mut tp = Vec::new();
            for (scene_preds, scene_targets) in preds.iter().zip(targets) {
                let mut mine: Vec<&Detection> = scene_preds.iter().filter(|d| d.label() == c).collect();
                mine.sort_by(|a, b| b.score().total_cmp(&a.score()));
                let gt: Vec<Box9> = scene_targets.iter().filter(|b| b.class == c).map(|b| b.bbox).collect();
                let boxes: Vec<Box9> = mine.iter().map(|d| d.bbox).collect();
                let m = match_by_center(&boxes, &gt, thr);
                scores.extend(mine.iter().map(|d| d.score()));
                tp.extend(m.tp);
                if thr == TP_THRESHOLD {
                    tp_pairs.extend(m.pairs.iter().map(|&(i, j)| (boxes[i], gt[j])));
                }
            }
            row[k] = average_precision(&scores, &tp, n_targets);
        }
        ap.push(row);
        class_errors.push(tp_errors(&tp_pairs));
    }
    let map = if nc == 0 {
        0.0
    } else {
        ap.iter().flat_map(|r| r.iter()).sum::<f64>() / (nc * DISTANCE_THRESHOLDS.len()) as f64
    };
    let mean = |f: fn(&TpErrors) -> f64| {
        if nc == 0 {
            1.0
        } else {
            class_errors.iter().map(f).sum::<f64>() / nc as f64
        }
    };
    let errors = TpErrors {
        ate: mean(|e| e.ate),
        ase: mean(|e| e.ase),
        aoe: mean(|e| e.aoe),
        ave: mean(|e| e.ave),
    };
    MetricsReport {
        class_names: class_names.to_vec(),
        nds: nds(map, &errors),
        ap,
        class_errors,
        map,
        errors,
        detections: preds.iter().map(Vec::len).sum(),
    }
}

impl MetricsReport {
    /// `key=value` lines, 6 decimals, each key prefixed by `prefix`.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: f64| {
            let _ = writeln!(s, "{prefix}{k}={v:.6}");
        };
        put("nds", self.nds);
        put("map", self.map);
        put("mate", self.errors.ate);
        put("mase", self.errors.ase);
        put("maoe", self.errors.aoe);
        put("mave", self.errors.ave);
        for (c, name) in self.class_names.iter().enumerate() {
            for (t, thr) in DISTANCE_THRESHOLDS.iter().enumerate() {
                put(&format!("ap.{name}.{thr:.1}"), self.ap[c][t]);
            }
        }
        let _ = writeln!(s, "{prefix}detections={}", self.detections);
        s
    }

    /// CSV rows `variant,class,threshold,ap` (no header).
    pub fn csv_rows(&self, variant: &str) -> String {
        let mut s = String::new();
        for (c, name) in self.class_names.iter().enumerate() {
            for (t, thr) in DISTANCE_THRESHOLDS.iter().enumerate() {
                let _ = writeln!(s, "{variant},{name},{thr:.1},{:.6}", self.ap[c][t]);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(x: f64) -> Box9 {
        Box9 {
            center: [x, 0.0, 0.5],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            velocity: [0.0; 2],
        }
    }

    #[test]
    fn center_matching_examples() {
        assert_eq!(match_by_center(&[at(0.0)], &[at(0.0)], 0.5).tp, vec![true]);
        assert_eq!(match_by_center(&[at(0.0), at(0.1)], &[at(0.0)], 0.5).tp, vec![true, false]);
        assert_eq!(match_by_center(&[at(1.0)], &[at(0.0)], 1.0).tp, vec![false]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8], &[true, true], 2), 1.0);
        assert_eq!(average_precision(&[], &[], 3), 0.0);
        assert_eq!(average_precision(&[0.9], &[true], 0), 0.0);
        // Precision 1 up to recall 0.5, then 0: recall points 0.11..=0.50.
        let ap = average_precision(&[0.9, 0.8], &[true, false], 2);
        assert!((ap - 40.0 * 0.9 * 0.01 / 0.81).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn nds_examples() {
        let zero = TpErrors {
            ate: 0.0,
            ase: 0.0,
            aoe: 0.0,
            ave: 0.0,
        };
        assert!((nds(1.0, &zero) - 1.0).abs() < 1e-15);
        assert_eq!(nds(0.0, &TpErrors::WORST), 0.0);
        let e = TpErrors { ate: 0.5, ..zero };
        assert!((nds(0.5, &e) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tp_error_examples() {
        let t = at(0.0);
        assert_eq!(tp_errors(&[(t, t)]).as_array(), [0.0; 4]);
        assert!((tp_errors(&[(at(0.3), t)]).ate - 0.3).abs() < 1e-12);
        let mut y = t;
        y.yaw = 1.5 * std::f64::consts::PI;
        assert!((tp_errors(&[(y, t)]).aoe - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(tp_errors(&[]), TpErrors::WORST);
    }
}
