use odgcnn::geometry::BOX_CODE;
use odgcnn::matcher::{
    brute_force_match, combined_loss, distill_loss, distill_match, distillation, hungarian, match_cost, set_loss,
    supervised_loss, Assignment, CostMatrix, Indicator, SetValues, TargetRow,
};
use odgcnn::oracle::matching_oracle;
use odgcnn_autodiff::check::{central_difference, relative_error, FD_STEP};
use odgcnn_autodiff::Tape;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1: usize = 4;

fn random_set(m: usize, rng: &mut impl Rng) -> SetValues {
    let mut probs = Vec::new();
    for _ in 0..m {
        let raw: Vec<f64> = (0..C1).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|r| r / s));
    }
    SetValues {
        probs,
        boxes: (0..m * BOX_CODE).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        classes_with_empty: C1,
    }
}

fn random_targets(m: usize, real: usize, rng: &mut impl Rng) -> Vec<TargetRow> {
    (0..m)
        .map(|j| {
            if j < real {
                let mut code = [0.0; BOX_CODE];
                code.iter_mut().for_each(|c| *c = rng.gen_range(-2.0..2.0));
                TargetRow {
                    class: rng.gen_range(0..C1 - 1),
                    code: Some(code),
                }
            } else {
                TargetRow {
                    class: C1 - 1,
                    code: None,
                }
            }
        })
        .collect()
}

fn sup(targets: &[TargetRow], s: &SetValues, ind: Indicator) -> f64 {
    let tape = Tape::new();
    let p = tape.constant(vec![s.len(), C1], s.probs.clone()).unwrap();
    let b = tape.constant(vec![s.len(), BOX_CODE], s.boxes.clone()).unwrap();
    tape.scalar(supervised_loss(&tape, targets, p, b, ind).unwrap().0)
}

fn dist(teacher: &SetValues, s: &SetValues, mask: bool) -> f64 {
    let tape = Tape::new();
    let p = tape.constant(vec![s.len(), C1], s.probs.clone()).unwrap();
    let b = tape.constant(vec![s.len(), BOX_CODE], s.boxes.clone()).unwrap();
    tape.scalar(distillation(&tape, teacher, p, b, mask).unwrap().0)
}

#[test]
fn hungarian_matches_brute_force_on_7x7() {
    let r = matching_oracle(3, &[7], 200).unwrap();
    assert_eq!(r[0].total_mismatches, 0);
}

#[test]
fn hungarian_matches_brute_force_on_5x5() {
    let r = matching_oracle(5, &[5], 500).unwrap();
    assert_eq!(r[0].total_mismatches, 0);
    assert_eq!(r[0].assignment_mismatches, 0);
}

#[test]
fn small_examples() {
    let diag = CostMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
    assert_eq!(hungarian(&diag).unwrap(), Assignment::identity(3));
    let one = CostMatrix::from_rows(&[vec![5.0]]).unwrap();
    assert_eq!(brute_force_match(&one).unwrap().pred_of_target, vec![0]);
    let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
    assert_eq!(brute_force_match(&c).unwrap().total(&c), 4.0);
}

#[test]
fn cost_entries_follow_the_indicator() {
    let mut s = random_set(2, &mut ChaCha8Rng::seed_from_u64(1));
    let mut code = [0.0; BOX_CODE];
    code.copy_from_slice(s.box_row(0));
    s.probs[..C1].copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
    let t = vec![
        TargetRow {
            class: 1,
            code: Some(code),
        },
        TargetRow {
            class: C1 - 1,
            code: None,
        },
    ];
    let c = match_cost(&t, &s, Indicator::Detr).unwrap();
    assert_eq!(c.get(0, 0), -1.0);
    assert_eq!((c.get(1, 0), c.get(1, 1)), (0.0, 0.0));
    let lit = match_cost(&t, &s, Indicator::Literal).unwrap();
    assert_eq!(lit.get(0, 0), 0.0);
    let zero_l1: f64 = s.box_row(1).iter().map(|v| v.abs()).sum();
    assert_eq!(lit.get(1, 1), -s.prob_row(1)[C1 - 1] + zero_l1);
}

#[test]
fn perfect_predictions_cost_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = random_targets(4, 2, &mut rng);
    let mut s = random_set(4, &mut rng);
    for (j, row) in t.iter().enumerate() {
        let mut p = [0.0; C1];
        p[row.class] = 1.0;
        s.probs[j * C1..(j + 1) * C1].copy_from_slice(&p);
        if let Some(code) = row.code {
            s.boxes[j * BOX_CODE..(j + 1) * BOX_CODE].copy_from_slice(&code);
        }
    }
    assert_eq!(sup(&t, &s, Indicator::Detr), 0.0);
    assert_eq!(dist(&s, &s, false), 0.0);

    // Lowering a matched prediction's correct-class probability raises the loss.
    let mut worse = s.clone();
    worse.probs[0 * C1 + t[0].class] = 0.7;
    worse.probs[0 * C1 + (t[0].class + 1) % C1] = 0.3;
    assert!(sup(&t, &worse, Indicator::Detr) > 0.0);
}

#[test]
fn uniform_class_term() {
    let t = vec![TargetRow {
        class: 0,
        code: Some([0.0; BOX_CODE]),
    }];
    let tape = Tape::new();
    let p = tape.constant(vec![1, C1], vec![0.25; C1]).unwrap();
    let b = tape.constant(vec![1, BOX_CODE], vec![0.0; BOX_CODE]).unwrap();
    let l = set_loss(&tape, &t, p, b, &Assignment::identity(1), Indicator::Detr).unwrap();
    assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn distill_matching_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let teacher = random_set(6, &mut rng);
    let own = distill_match(&teacher, &teacher).unwrap();
    let c: f64 = (0..6)
        .map(|j| {
            let row = teacher.prob_row(j);
            -row.iter().cloned().fold(f64::MIN, f64::max).ln()
        })
        .sum();
    let tape = Tape::new();
    let p = tape.constant(vec![6, C1], teacher.probs.clone()).unwrap();
    let b = tape.constant(vec![6, BOX_CODE], teacher.boxes.clone()).unwrap();
    let l = distill_loss(&tape, &teacher, p, b, &Assignment::identity(6), false).unwrap();
    assert!((tape.scalar(l) - c).abs() < 1e-12);
    let ident = distill_loss(&tape, &teacher, p, b, &own, false).unwrap();
    assert!(tape.scalar(ident) <= tape.scalar(l));

    let mut far = random_set(2, &mut rng);
    far.boxes[0] = -50.0;
    far.boxes[BOX_CODE] = 50.0;
    let swapped = far.permuted(&[1, 0]);
    assert_eq!(distill_match(&far, &swapped).unwrap().pred_of_target, vec![1, 0]);
}

#[test]
fn masked_empty_teacher_leaves_class_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut teacher = random_set(3, &mut rng);
    for j in 0..3 {
        teacher.probs[j * C1..(j + 1) * C1].copy_from_slice(&[0.1, 0.1, 0.1, 0.7]);
    }
    let student = random_set(3, &mut rng);
    let masked = dist(&teacher, &student, true);
    let sigma = distill_match(&teacher, &student).unwrap();
    let cls: f64 = sigma.pred_of_target.iter().map(|&i| -student.prob_row(i)[C1 - 1].ln()).sum();
    assert!((masked - cls).abs() < 1e-12);
}

#[test]
fn combined_gradient_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = random_targets(5, 3, &mut rng);
    let teacher = random_set(5, &mut rng);
    let s = random_set(5, &mut rng);
    let (alpha, beta) = (0.7, 1.3);
    let build = |x: &[f64], which: u8| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let p = tape.constant(vec![5, C1], s.probs.clone()).unwrap();
        let b = tape.leaf(&odgcnn_autodiff::Tensor::new(vec![5, BOX_CODE], x.to_vec()).unwrap().with_grad());
        let (ls, _) = supervised_loss(&tape, &t, p, b, Indicator::Detr).unwrap();
        let (ld, _) = distillation(&tape, &teacher, p, b, false).unwrap();
        let out = match which {
            0 => ls,
            1 => ld,
            _ => combined_loss(&tape, ls, ld, alpha, beta).unwrap(),
        };
        let g = tape.backward(out).unwrap().get_or_zero(b);
        (tape.scalar(out), g)
    };
    let x = s.boxes.clone();
    let (_, gs) = build(&x, 0);
    let (_, gd) = build(&x, 1);
    let (_, gc) = build(&x, 2);
    let lin: Vec<f64> = gs.iter().zip(&gd).map(|(a, b)| alpha * a + beta * b).collect();
    assert!(relative_error(&gc, &lin) < 1e-12);
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = central_difference(|v| build(v, 2).0, &x, &coords, FD_STEP);
    assert!(relative_error(&gc, &numeric) < 1e-6);

    let tape = Tape::new();
    let a = tape.constant(vec![1], vec![2.0]).unwrap();
    let b = tape.constant(vec![1], vec![3.0]).unwrap();
    assert_eq!(tape.scalar(combined_loss(&tape, a, b, 1.0, 1.0).unwrap()), 5.0);
    assert_eq!(tape.scalar(combined_loss(&tape, a, b, 1.0, 0.0).unwrap()), 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_is_optimal(n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = odgcnn::oracle::random_cost(n, &mut rng);
        let h = hungarian(&c).unwrap();
        let b = brute_force_match(&c).unwrap();
        prop_assert_eq!(h.total(&c), b.total(&c));
    }

    #[test]
    fn losses_ignore_set_order(seed in any::<u64>(), real in 0usize..=6, literal in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 6;
        let ind = if literal { Indicator::Literal } else { Indicator::Detr };
        let t = random_targets(m, real, &mut rng);
        let s = random_set(m, &mut rng);
        let teacher = random_set(m, &mut rng);
        let base_sup = sup(&t, &s, ind);
        let base_dist = dist(&teacher, &s, real % 2 == 0);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let mut tperm: Vec<usize> = (0..m).collect();
        tperm.shuffle(&mut rng);
        let t2: Vec<TargetRow> = tperm.iter().map(|&j| t[j].clone()).collect();
        let s2 = s.permuted(&perm);
        if literal {
            // Real targets cost nothing here, so only the optimal total is order-free.
            let a = match_cost(&t, &s, ind).unwrap();
            let b = match_cost(&t2, &s2, ind).unwrap();
            let (ta, tb) = (hungarian(&a).unwrap().total(&a), hungarian(&b).unwrap().total(&b));
            prop_assert!((ta - tb).abs() < 1e-9);
        } else {
            prop_assert_eq!(sup(&t2, &s2, ind).to_bits(), base_sup.to_bits());
        }
        prop_assert_eq!(dist(&teacher.permuted(&tperm), &s.permuted(&perm), real % 2 == 0).to_bits(), base_dist.to_bits());
    }
}
