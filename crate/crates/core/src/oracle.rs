//! Independent checks behind `odgcnn verify`: brute-force matching,
//! Monte-Carlo IoU, and finite differences through the whole model.

use odgcnn_autodiff::check::{central_difference, relative_error};
use odgcnn_autodiff::{ParamRegistry, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{monte_carlo_iou, rotated_iou_bev, RotatedBoxBev};
use crate::matcher::{
    brute_force_match, hungarian, pad_targets, set_loss, supervised_loss, Assignment, CostMatrix, Indicator,
};
use crate::model::{forward_with, init_params, GraphSource, KnnGraph, ModelConfig};
use crate::scene::{sample_scene, Scene, SceneConfig};

/// Random square cost matrix. Every third matrix draws small integers so
/// that ties are common.
pub fn random_cost(n: usize, rng: &mut impl Rng) -> CostMatrix {
    let ties = rng.gen_range(0..3) == 0;
    let data = (0..n * n)
        .map(|_| {
            if ties {
                rng.gen_range(0..4) as f64
            } else {
                rng.gen_range(-10.0..10.0)
            }
        })
        .collect();
    CostMatrix::new(n, data).expect("finite square data")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingOutcome {
    pub size: usize,
    pub trials: usize,
    pub total_mismatches: usize,
    pub assignment_mismatches: usize,
}

/// Compares `hungarian` with brute force on `trials` matrices per size.
pub fn matching_oracle(seed: u64, sizes: &[usize], trials: usize) -> Result<Vec<MatchingOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &n in sizes {
        let mut o = MatchingOutcome {
            size: n,
            trials,
            total_mismatches: 0,
            assignment_mismatches: 0,
        };
        for _ in 0..trials {
            let c = random_cost(n, &mut rng);
            let h = hungarian(&c)?;
            let b = brute_force_match(&c)?;
            o.total_mismatches += (h.total(&c) != b.total(&c)) as usize;
            o.assignment_mismatches += (h != b) as usize;
        }
        out.push(o);
    }
    Ok(out)
}

/// A random rotated footprint near the origin, sized like the scene priors.
pub fn random_footprint(rng: &mut impl Rng) -> RotatedBoxBev {
    RotatedBoxBev {
        center: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
        width: rng.gen_range(0.3..3.0),
        length: rng.gen_range(0.3..5.0),
        yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    }
}

/// `(exact, monte_carlo)` IoU for `pairs` random footprint pairs.
pub fn iou_oracle(seed: u64, pairs: usize, samples: usize) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pairs)
        .map(|_| {
            let a = random_footprint(&mut rng);
            let b = random_footprint(&mut rng);
            (rotated_iou_bev(&a, &b), monte_carlo_iou(&a, &b, samples, &mut rng))
        })
        .collect()
}

/// A two-object scene with light clutter.
pub fn two_object_scene(seed: u64) -> Result<Scene> {
    let cfg = SceneConfig {
        objects: (2, 2),
        clutter_points: 100,
        seed,
        ..SceneConfig::default()
    };
    sample_scene(&cfg, seed)
}

#[derive(Clone, Debug)]
pub struct ComposedCheck {
    pub rel_err: f64,
    pub coords: usize,
    /// Largest finite-difference gradient magnitude over the sampling-offset weights.
    pub offset_grad: f64,
}

/// Finite-difference step for the whole model. The conv stack has enough
/// ReLU kinks that a 1e-5 step often straddles one.
pub const COMPOSED_STEP: f64 = 1e-7;

/// Set loss with the kNN graphs and the matching held at `graphs` and `sigma`.
fn set_loss_value(
    cfg: &ModelConfig,
    reg: &ParamRegistry,
    scene: &Scene,
    graphs: &[KnnGraph],
    sigma: &Assignment,
) -> Result<f64> {
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let f = forward_with(&tape, &p, cfg, &scene.cloud, &mut GraphSource::replay(graphs.to_vec()))?;
    let targets = pad_targets(&scene.boxes, cfg.num_classes, cfg.queries)?;
    Ok(tape.scalar(set_loss(&tape, &targets, f.probs, f.boxes, sigma, Indicator::Detr)?))
}

/// Backprop through the full model and set loss against central differences
/// on `per_tensor` random coordinates of every parameter tensor.
///
/// The kNN graphs and the Hungarian matching are discrete choices; the
/// differences are taken with both held at their values at the base point,
/// so they measure the same smooth piece the backward pass differentiates.
pub fn composed_gradcheck(seed: u64, per_tensor: usize) -> Result<ComposedCheck> {
    let cfg = ModelConfig::default();
    let mut reg = init_params(&cfg, seed)?;
    let scene = two_object_scene(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Biases start at zero, which leaves F^d exactly 0 away from points and
    // parks EdgeConv ReLUs on their kink. Check at a generic point instead.
    for (name, t) in reg.iter_mut() {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }

    let tape = Tape::new();
    let p = reg.bind(&tape);
    let mut source = GraphSource::record();
    let f = forward_with(&tape, &p, &cfg, &scene.cloud, &mut source)?;
    let graphs = source.into_graphs();
    let targets = pad_targets(&scene.boxes, cfg.num_classes, cfg.queries)?;
    let (loss, sigma) = supervised_loss(&tape, &targets, f.probs, f.boxes, Indicator::Detr)?;
    let grads = tape.backward(loss)?;

    let mut picks: Vec<(String, usize)> = Vec::new();
    for (name, t) in reg.iter() {
        for i in rand::seq::index::sample(&mut rng, t.len(), per_tensor.min(t.len())) {
            picks.push((name.clone(), i));
        }
    }
    let mut analytic = Vec::with_capacity(picks.len());
    for (name, i) in &picks {
        analytic.push(grads.get_or_zero(p.var(name)?)[*i]);
    }
    let x0: Vec<f64> = picks
        .iter()
        .map(|(name, i)| reg.get(name).map(|t| t.data()[*i]))
        .collect::<std::result::Result<_, _>>()?;
    let mut probe = reg.clone();
    let mut failure = None;
    let numeric = central_difference(
        |x| {
            for ((name, i), v) in picks.iter().zip(x) {
                probe.get_mut(name).expect("known tensor").data_mut()[*i] = *v;
            }
            match set_loss_value(&cfg, &probe, &scene, &graphs, &sigma) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &x0,
        &(0..picks.len()).collect::<Vec<_>>(),
        COMPOSED_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let offset_grad = picks
        .iter()
        .zip(&numeric)
        .filter(|((name, _), _)| name.contains(".nbr."))
        .map(|(_, g)| g.abs())
        .fold(0.0, f64::max);
    Ok(ComposedCheck {
        rel_err: relative_error(&analytic, &numeric),
        coords: picks.len(),
        offset_grad,
    })
}
