//! Bipartite matching between a prediction set and a padded target set, and
//! the set-to-set supervised and distillation losses built on it.

use std::cmp::Ordering;

use odgcnn_autodiff::{Tape, Var, PROB_FLOOR};

use crate::error::{Error, Result};
use crate::geometry::{LabeledBox, BOX_CODE};

/// Largest size accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX: usize = 8;

/// Square cost matrix; entry `(j, i)` is the cost of giving target `j` to
/// prediction `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Matching(format!(
                "cost matrix of size {n} needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Matching("cost matrix rows must all have length n".into()));
        }
        Self::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.data[j * self.n + i]
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(Error::Matching(format!(
                "non-finite cost {} at ({}, {})",
                self.data[k],
                k / self.n,
                k % self.n
            ))),
            None => Ok(()),
        }
    }
}

/// `pred_of_target[j]` is the prediction assigned to target `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub pred_of_target: Vec<usize>,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            pred_of_target: (0..n).collect(),
        }
    }

    /// Left-to-right sum of the assigned costs.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        let mut acc = 0.0;
        for (j, &i) in self.pred_of_target.iter().enumerate() {
            acc += cost.get(j, i);
        }
        acc
    }
}

/// Minimum-cost perfect matching. Among optimal matchings the
/// lexicographically smallest `pred_of_target` is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    let n = cost.n;
    if n == 0 {
        return Ok(Assignment::identity(0));
    }
    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for r in 1..=n {
        row_of[0] = r;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    let mut owner = vec![0usize; n];
    for c in 1..=n {
        col_of[row_of[c] - 1] = c - 1;
        owner[c - 1] = row_of[c] - 1;
    }
    let scale = cost.data.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-10 * scale;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|r| {
            (0..n)
                .filter(|&c| (cost.get(r, c) - u[r + 1] - v[c + 1]).abs() <= tol)
                .collect()
        })
        .collect();
    lexicographic_refine(&tight, &mut col_of, &mut owner);
    Ok(Assignment { pred_of_target: col_of })
}

/// Rewrites a perfect matching inside the `tight` graph into the
/// lexicographically smallest perfect matching of that graph.
fn lexicographic_refine(tight: &[Vec<usize>], col_of: &mut [usize], owner: &mut [usize]) {
    let n = col_of.len();
    let mut fixed = vec![false; n];
    for j in 0..n {
        for &i in &tight[j] {
            if fixed[i] {
                continue;
            }
            if col_of[j] == i {
                break;
            }
            // Give `i` to `j`, then re-home its previous row through an
            // alternating path ending at `j`'s old column.
            let freed = col_of[j];
            let displaced = owner[i];
            let mut visited = vec![false; n];
            visited[i] = true;
            if augment(displaced, freed, j, tight, &fixed, &mut visited, col_of, owner) {
                col_of[j] = i;
                owner[i] = j;
                break;
            }
        }
        fixed[col_of[j]] = true;
    }
}

#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    target: usize,
    skip_row: usize,
    tight: &[Vec<usize>],
    fixed: &[bool],
    visited: &mut [bool],
    col_of: &mut [usize],
    owner: &mut [usize],
) -> bool {
    for &c in &tight[row] {
        if fixed[c] || visited[c] {
            continue;
        }
        visited[c] = true;
        let ok = c == target || {
            let next = owner[c];
            next != skip_row && augment(next, target, skip_row, tight, fixed, visited, col_of, owner)
        };
        if ok {
            col_of[row] = c;
            owner[c] = row;
            return true;
        }
    }
    false
}

/// Exhaustive search over all permutations in lexicographic order, keeping
/// the first strictly cheaper one. Test oracle for [`hungarian`].
pub fn brute_force_match(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    let n = cost.n;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Matching(format!(
            "brute force supports at most {BRUTE_FORCE_MAX} rows, got {n}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    enumerate(cost, &mut current, &mut used, &mut best);
    Ok(Assignment {
        pred_of_target: best.map(|b| b.1).unwrap_or_default(),
    })
}

fn enumerate(cost: &CostMatrix, current: &mut Vec<usize>, used: &mut [bool], best: &mut Option<(f64, Vec<usize>)>) {
    if current.len() == cost.n {
        let a = Assignment {
            pred_of_target: current.clone(),
        };
        let total = a.total(cost);
        if best.as_ref().map_or(true, |(b, _)| total < *b) {
            *best = Some((total, a.pred_of_target));
        }
        return;
    }
    for i in 0..cost.n {
        if !used[i] {
            used[i] = true;
            current.push(i);
            enumerate(cost, current, used, best);
            current.pop();
            used[i] = false;
        }
    }
}

/// How the no-object indicator enters the matching cost and loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Indicator {
    /// Class term for every target, box term for real targets only.
    Detr,
    /// The indicator polarity exactly as printed: box term on padding rows
    /// (against a zero code), probability term on padding rows only.
    Literal,
}

/// One target row: class index (`C` is no-object) and an optional box code.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetRow {
    pub class: usize,
    pub code: Option<[f64; BOX_CODE]>,
}

/// Ground truth padded with no-object rows up to `m`.
pub fn pad_targets(boxes: &[LabeledBox], num_classes: usize, m: usize) -> Result<Vec<TargetRow>> {
    if boxes.len() > m {
        return Err(Error::Matching(format!("{} targets exceed the {m} prediction slots", boxes.len())));
    }
    if let Some(b) = boxes.iter().find(|b| b.class >= num_classes) {
        return Err(Error::Matching(format!("target class {} out of range for {num_classes} classes", b.class)));
    }
    let mut rows: Vec<TargetRow> = boxes
        .iter()
        .map(|b| TargetRow {
            class: b.class,
            code: Some(b.bbox.encode()),
        })
        .collect();
    rows.resize(
        m,
        TargetRow {
            class: num_classes,
            code: None,
        },
    );
    Ok(rows)
}

/// Plain values of a prediction set: `[M, C + 1]` probabilities and
/// `[M, BOX_CODE]` box codes.
#[derive(Clone, Debug, PartialEq)]
pub struct SetValues {
    pub probs: Vec<f64>,
    pub boxes: Vec<f64>,
    pub classes_with_empty: usize,
}

impl SetValues {
    pub fn from_tape(tape: &Tape, probs: Var, boxes: Var) -> Self {
        let classes_with_empty = *tape.shape(probs).last().expect("rank >= 1");
        Self {
            probs: tape.to_vec(probs),
            boxes: tape.to_vec(boxes),
            classes_with_empty,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.classes_with_empty
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes_with_empty..(i + 1) * self.classes_with_empty]
    }

    pub fn box_row(&self, i: usize) -> &[f64] {
        &self.boxes[i * BOX_CODE..(i + 1) * BOX_CODE]
    }

    /// Reorders predictions: row `r` of the result is row `perm[r]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            probs: perm.iter().flat_map(|&i| self.prob_row(i).to_vec()).collect(),
            boxes: perm.iter().flat_map(|&i| self.box_row(i).to_vec()).collect(),
            classes_with_empty: self.classes_with_empty,
        }
    }
}

fn l1_code(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn check_sizes(targets: usize, preds: &SetValues) -> Result<()> {
    if targets != preds.len() {
        return Err(Error::Matching(format!(
            "{targets} targets against {} predictions",
            preds.len()
        )));
    }
    Ok(())
}

/// Supervised matching cost.
pub fn match_cost(targets: &[TargetRow], preds: &SetValues, indicator: Indicator) -> Result<CostMatrix> {
    check_sizes(targets.len(), preds)?;
    let empty = preds.classes_with_empty - 1;
    let n = targets.len();
    let zero = [0.0; BOX_CODE];
    let mut data = Vec::with_capacity(n * n);
    for t in targets {
        for i in 0..n {
            let p = preds.prob_row(i)[t.class];
            let c = match (indicator, t.class == empty) {
                (Indicator::Detr, true) => 0.0,
                (Indicator::Detr, false) => -p + l1_code(t.code.as_ref().expect("real target has a box"), preds.box_row(i)),
                (Indicator::Literal, true) => -p + l1_code(t.code.as_ref().unwrap_or(&zero), preds.box_row(i)),
                (Indicator::Literal, false) => 0.0,
            };
            data.push(c);
        }
    }
    CostMatrix::new(n, data)
}

/// Teacher outputs as distillation targets: the argmax class over all
/// `C + 1` entries (lowest index on ties) and the teacher's box code.
pub fn distill_targets(teacher: &SetValues) -> Vec<TargetRow> {
    (0..teacher.len())
        .map(|j| {
            let row = teacher.prob_row(j);
            let mut best = 0;
            for (c, p) in row.iter().enumerate() {
                if *p > row[best] {
                    best = c;
                }
            }
            let mut code = [0.0; BOX_CODE];
            code.copy_from_slice(teacher.box_row(j));
            TargetRow {
                class: best,
                code: Some(code),
            }
        })
        .collect()
}

fn distill_cost(targets: &[TargetRow], student: &SetValues) -> Result<CostMatrix> {
    check_sizes(targets.len(), student)?;
    let n = targets.len();
    let mut data = Vec::with_capacity(n * n);
    for t in targets {
        let code = t.code.as_ref().expect("teacher rows carry boxes");
        for i in 0..n {
            let p = student.prob_row(i)[t.class].max(PROB_FLOOR);
            data.push(-p.ln() + l1_code(code, student.box_row(i)));
        }
    }
    CostMatrix::new(n, data)
}

pub fn distill_match(teacher: &SetValues, student: &SetValues) -> Result<Assignment> {
    hungarian(&distill_cost(&distill_targets(teacher), student)?)
}

fn cmp_slices(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

/// Matched `(target, prediction)` pairs in an order that depends only on
/// their values, so the loss sums identically under any relabeling.
fn canonical_pairs(targets: &[TargetRow], preds: &SetValues, sigma: &Assignment) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = sigma.pred_of_target.iter().copied().enumerate().collect();
    pairs.sort_by(|&(ja, ia), &(jb, ib)| {
        let (ta, tb) = (&targets[ja], &targets[jb]);
        ta.class
            .cmp(&tb.class)
            .then_with(|| match (&ta.code, &tb.code) {
                (Some(a), Some(b)) => cmp_slices(a, b),
                (a, b) => a.is_some().cmp(&b.is_some()),
            })
            .then_with(|| cmp_slices(preds.prob_row(ia), preds.prob_row(ib)))
            .then_with(|| cmp_slices(preds.box_row(ia), preds.box_row(ib)))
    });
    pairs
}

/// `Σ −log p̂(c) + Σ L1` over matched pairs; `boxed` selects which pairs
/// carry the box term.
fn matched_loss(
    tape: &Tape,
    targets: &[TargetRow],
    probs: Var,
    boxes: Var,
    sigma: &Assignment,
    boxed: impl Fn(&TargetRow) -> bool,
) -> Result<Var> {
    let values = SetValues::from_tape(tape, probs, boxes);
    if sigma.pred_of_target.len() != targets.len() || targets.len() != values.len() {
        return Err(Error::Matching(format!(
            "assignment of size {} for {} targets and {} predictions",
            sigma.pred_of_target.len(),
            targets.len(),
            values.len()
        )));
    }
    if targets.is_empty() {
        return Ok(tape.constant(vec![1], vec![0.0])?);
    }
    let pairs = canonical_pairs(targets, &values, sigma);
    let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let classes: Vec<usize> = pairs.iter().map(|p| targets[p.0].class).collect();
    let cls = tape.sum_all(tape.neg_log_prob(tape.gather_rows(probs, &preds)?, &classes)?);
    let zero = [0.0; BOX_CODE];
    let (rows, codes): (Vec<usize>, Vec<f64>) = pairs
        .iter()
        .filter(|(j, _)| boxed(&targets[*j]))
        .map(|&(j, i)| (i, targets[j].code.unwrap_or(zero)))
        .fold((Vec::new(), Vec::new()), |(mut r, mut c), (i, code)| {
            r.push(i);
            c.extend_from_slice(&code);
            (r, c)
        });
    if rows.is_empty() {
        return Ok(cls);
    }
    let target = tape.constant(vec![rows.len(), BOX_CODE], codes)?;
    let reg = tape.l1(tape.gather_rows(boxes, &rows)?, target)?;
    Ok(tape.add(cls, reg)?)
}

/// Supervised set-to-set loss for a given matching.
pub fn set_loss(
    tape: &Tape,
    targets: &[TargetRow],
    probs: Var,
    boxes: Var,
    sigma: &Assignment,
    indicator: Indicator,
) -> Result<Var> {
    let empty = *tape.shape(probs).last().expect("rank >= 1") - 1;
    match indicator {
        Indicator::Detr => matched_loss(tape, targets, probs, boxes, sigma, |t| t.class != empty),
        Indicator::Literal => matched_loss(tape, targets, probs, boxes, sigma, |t| t.class == empty),
    }
}

/// Matches and evaluates the supervised loss in one call.
pub fn supervised_loss(
    tape: &Tape,
    targets: &[TargetRow],
    probs: Var,
    boxes: Var,
    indicator: Indicator,
) -> Result<(Var, Assignment)> {
    let values = SetValues::from_tape(tape, probs, boxes);
    let sigma = hungarian(&match_cost(targets, &values, indicator)?)?;
    Ok((set_loss(tape, targets, probs, boxes, &sigma, indicator)?, sigma))
}

/// Distillation loss for a given matching. With `mask_empty`, pairs whose
/// teacher class is no-object keep only the class term.
pub fn distill_loss(
    tape: &Tape,
    teacher: &SetValues,
    probs: Var,
    boxes: Var,
    sigma: &Assignment,
    mask_empty: bool,
) -> Result<Var> {
    let targets = distill_targets(teacher);
    let empty = teacher.classes_with_empty - 1;
    matched_loss(tape, &targets, probs, boxes, sigma, |t| !(mask_empty && t.class == empty))
}

/// Matches against the teacher and evaluates the distillation loss.
pub fn distillation(tape: &Tape, teacher: &SetValues, probs: Var, boxes: Var, mask_empty: bool) -> Result<(Var, Assignment)> {
    let student = SetValues::from_tape(tape, probs, boxes);
    let sigma = distill_match(teacher, &student)?;
    Ok((distill_loss(tape, teacher, probs, boxes, &sigma, mask_empty)?, sigma))
}

/// `α·sup + β·distill`.
pub fn combined_loss(tape: &Tape, sup: Var, distill: Var, alpha: f64, beta: f64) -> Result<Var> {
    Ok(tape.add(tape.scale(sup, alpha), tape.scale(distill, beta))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let h = hungarian(&c).unwrap();
        assert_eq!(h.pred_of_target, vec![1, 0]);
        assert_eq!(h.total(&c), 4.0);
        assert_eq!(brute_force_match(&c).unwrap().total(&c), 4.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = CostMatrix::new(4, vec![0.0; 16]).unwrap();
        assert_eq!(hungarian(&c).unwrap(), Assignment::identity(4));
        // Rows 0 and 2 are interchangeable: [1, 0, 2] and [2, 0, 1] both cost 2.
        let c = CostMatrix::from_rows(&[vec![5.0, 1.0, 1.0], vec![0.0, 5.0, 5.0], vec![5.0, 1.0, 1.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pred_of_target, vec![1, 0, 2]);
        assert_eq!(brute_force_match(&c).unwrap().pred_of_target, vec![1, 0, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        let c = CostMatrix::new(2, vec![0.0, f64::NAN, 1.0, 1.0]).unwrap();
        assert!(hungarian(&c).is_err());
        assert!(brute_force_match(&CostMatrix::new(9, vec![0.0; 81]).unwrap()).is_err());
        assert!(CostMatrix::new(2, vec![0.0; 3]).is_err());
    }
}
