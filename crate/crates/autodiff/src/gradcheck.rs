//! Finite-difference checks for every tape primitive.
//!
//! Each case builds a (generally non-scalar) output from random leaves; the
//! output is reduced to a scalar with fixed random weights so that every
//! output element contributes a distinct cotangent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::check::{central_difference, relative_error, FD_STEP};
use crate::error::Result;
use crate::tape::{ConvGeometry, SampleFrame, Tape, Var};
use crate::tensor::Tensor;

type Build = fn(&Tape, &[Var]) -> Result<Var>;

pub struct GradCase {
    pub name: &'static str,
    inputs: Vec<(Vec<usize>, (f64, f64))>,
    build: Build,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: &'static str,
    pub rel_err: f64,
    pub coords: usize,
}

fn case(name: &'static str, inputs: &[(&[usize], (f64, f64))], build: Build) -> GradCase {
    GradCase {
        name,
        inputs: inputs.iter().map(|(s, r)| (s.to_vec(), *r)).collect(),
        build,
    }
}

const U: (f64, f64) = (-1.0, 1.0);

/// One case per primitive, plus a few composite graphs.
pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        case("matmul", &[(&[2, 3], U), (&[3, 4], U)], |t, v| t.matmul(v[0], v[1])),
        case("add", &[(&[5], U), (&[5], U)], |t, v| t.add(v[0], v[1])),
        case("sub", &[(&[5], U), (&[5], U)], |t, v| t.sub(v[0], v[1])),
        case("mul", &[(&[5], U), (&[5], U)], |t, v| t.mul(v[0], v[1])),
        case("add_bias", &[(&[3, 4], U), (&[4], U)], |t, v| t.add_bias(v[0], v[1])),
        case("scale", &[(&[5], U)], |t, v| Ok(t.scale(v[0], -2.5))),
        case("add_scalar", &[(&[5], U)], |t, v| Ok(t.add_scalar(v[0], 0.7))),
        case("relu", &[(&[5], U)], |t, v| Ok(t.relu(v[0]))),
        case("sigmoid", &[(&[5], (-3.0, 3.0))], |t, v| Ok(t.sigmoid(v[0]))),
        case("exp", &[(&[5], U)], |t, v| Ok(t.exp(v[0]))),
        case("softmax_lastaxis", &[(&[2, 5], (-2.0, 2.0))], |t, v| t.softmax_lastaxis(v[0])),
        case("max_lastaxis", &[(&[3, 5], U)], |t, v| Ok(t.max_lastaxis(v[0]).0)),
        case("segment_max_rows", &[(&[6, 3], U)], |t, v| {
            t.segment_max_rows(v[0], &[0, 2, 2, 6])
        }),
        case("concat_lastaxis", &[(&[2, 3], U), (&[2, 2], U)], |t, v| {
            t.concat_lastaxis(v[0], v[1])
        }),
        case("gather_rows", &[(&[4, 3], U)], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
        case("scatter_rows", &[(&[3, 2], U)], |t, v| t.scatter_rows(v[0], &[4, 0, 2], 5)),
        case("slice_cols", &[(&[3, 5], U)], |t, v| t.slice_cols(v[0], 1, 3)),
        case("transpose", &[(&[2, 5], U)], |t, v| t.transpose(v[0])),
        case("reshape", &[(&[2, 6], U)], |t, v| t.reshape(v[0], &[3, 4])),
        case("scale_rows", &[(&[4, 3], U), (&[4], U)], |t, v| t.scale_rows(v[0], v[1])),
        case("sum_row_groups", &[(&[6, 2], U)], |t, v| t.sum_row_groups(v[0], 3)),
        case("sum_all", &[(&[5], U)], |t, v| Ok(t.sum_all(v[0]))),
        case("l1", &[(&[5], U), (&[5], U)], |t, v| t.l1(v[0], v[1])),
        case("neg_log_prob", &[(&[3, 4], (-2.0, 2.0))], |t, v| {
            let p = t.softmax_lastaxis(v[0])?;
            t.neg_log_prob(p, &[0, 3, 1])
        }),
        case("conv2d", &[(&[5, 4, 2], U), (&[18, 3], U), (&[3], U)], |t, v| {
            let g = ConvGeometry {
                kernel: 3,
                stride: 1,
                padding: 1,
            };
            t.conv2d(v[0], v[1], v[2], g)
        }),
        case("conv2d_stride2", &[(&[6, 4, 2], U), (&[18, 3], U), (&[3], U)], |t, v| {
            let g = ConvGeometry {
                kernel: 3,
                stride: 2,
                padding: 1,
            };
            t.conv2d(v[0], v[1], v[2], g)
        }),
        case("bilinear_sample", &[(&[4, 5, 3], U), (&[5, 2], (0.3, 1.9))], |t, v| {
            let frame = SampleFrame {
                origin_x: -0.5,
                origin_y: -0.25,
                cell: 0.5,
            };
            t.bilinear_sample(v[0], v[1], frame)
        }),
        case("composite_attention", &[(&[5], U), (&[5], U)], |t, v| {
            let col = t.reshape(v[0], &[5, 1])?;
            let row = t.reshape(v[1], &[1, 5])?;
            let outer = t.matmul(col, row)?;
            let att = t.softmax_lastaxis(outer)?;
            let (mx, _) = t.max_lastaxis(att);
            let y = t.exp(v[1]);
            let z = t.mul(mx, y)?;
            let s = t.sigmoid(z);
            t.l1(s, v[0])
        }),
        case("composite_mlp", &[(&[5], U), (&[5], U)], |t, v| {
            let x = t.reshape(v[0], &[1, 5])?;
            let w = t.concat_lastaxis(t.reshape(v[1], &[5, 1])?, t.reshape(v[0], &[5, 1])?)?;
            let h = t.relu(t.add_scalar(t.matmul(x, w)?, 0.1));
            let h2 = t.concat_lastaxis(h, t.slice_cols(x, 0, 2)?)?;
            let p = t.softmax_lastaxis(h2)?;
            t.neg_log_prob(p, &[2])
        }),
        case("composite_edges", &[(&[5], U), (&[5], U)], |t, v| {
            let x = t.reshape(t.concat_lastaxis(v[0], v[1])?, &[5, 2])?;
            let g = t.gather_rows(x, &[0, 1, 1, 2, 2, 3, 3, 4, 4, 0])?;
            let e = t.sub(g, t.gather_rows(x, &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4])?)?;
            let e = t.mul(e, e)?;
            let m = t.segment_max_rows(e, &[0, 2, 4, 6, 8, 10])?;
            let w = t.sigmoid(t.slice_cols(m, 0, 1)?);
            t.sum_row_groups(t.scale_rows(m, w)?, 5)
        }),
    ]
}

fn eval(case: &GradCase, inputs: &[Tensor], weights: Option<&[f64]>) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = (case.build)(&tape, &vars)?;
    let shape = tape.shape(out);
    let w = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; shape.iter().product()],
    };
    let wv = tape.constant(shape, w)?;
    let loss = tape.sum_all(tape.mul(out, wv)?);
    let grads = tape.backward(loss)?;
    let g = vars.iter().map(|&v| grads.get_or_zero(v)).collect();
    Ok((tape.scalar(loss), g))
}

fn output_len(case: &GradCase, inputs: &[Tensor]) -> Result<usize> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = (case.build)(&tape, &vars)?;
    Ok(tape.shape(out).iter().product())
}

/// Runs one case with inputs drawn from `rng`.
pub fn run_case(case: &GradCase, rng: &mut impl Rng) -> Result<GradCheck> {
    let inputs: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|(shape, (lo, hi))| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(*lo..*hi)).collect();
            Tensor::new(shape.clone(), data).map(Tensor::with_grad)
        })
        .collect::<Result<_>>()?;
    let n_out = output_len(case, &inputs)?;
    let weights: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, analytic) = eval(case, &inputs, Some(&weights))?;
    let analytic: Vec<f64> = analytic.concat();

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let coords: Vec<usize> = (0..flat.len()).collect();
    let numeric = central_difference(
        |x| {
            let mut off = 0;
            let probe: Vec<Tensor> = inputs
                .iter()
                .zip(&sizes)
                .map(|(t, &n)| {
                    let data = x[off..off + n].to_vec();
                    off += n;
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                })
                .collect();
            eval(case, &probe, Some(&weights)).expect("case evaluates").0
        },
        &flat,
        &coords,
        FD_STEP,
    );
    Ok(GradCheck {
        name: case.name,
        rel_err: relative_error(&analytic, &numeric),
        coords: coords.len(),
    })
}

/// Runs every case `trials` times and keeps the worst error per case.
pub fn primitive_report(seed: u64, trials: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .iter()
        .map(|c| {
            let mut worst = GradCheck {
                name: c.name,
                rel_err: 0.0,
                coords: 0,
            };
            for _ in 0..trials.max(1) {
                let r = run_case(c, &mut rng)?;
                if r.rel_err >= worst.rel_err {
                    worst = r;
                }
            }
            Ok(worst)
        })
        .collect()
}
