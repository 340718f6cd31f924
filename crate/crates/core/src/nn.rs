//! Linear layers over the tape and parameter initialization.

use odgcnn_autodiff::{Bound, ParamRegistry, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Inserts `{prefix}.w` `[fan_in, fan_out]` (uniform, He-scaled by `gain`) and
/// a zero `{prefix}.b`.
pub fn init_linear(reg: &mut ParamRegistry, prefix: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    reg.insert(format!("{prefix}.w"), Tensor::new(vec![fan_in, fan_out], w).expect("nonzero dims"));
    reg.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn linear(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    Ok(tape.add_bias(tape.matmul(x, w)?, b)?)
}

/// `Linear → ReLU → Linear`.
pub fn mlp2(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.relu(linear(tape, p, &format!("{prefix}.0"), x)?);
    linear(tape, p, &format!("{prefix}.1"), h)
}

pub fn init_mlp2(reg: &mut ParamRegistry, prefix: &str, dims: [usize; 3], rng: &mut ChaCha8Rng) {
    init_linear(reg, &format!("{prefix}.0"), dims[0], dims[1], 1.0, rng);
    init_linear(reg, &format!("{prefix}.1"), dims[1], dims[2], 0.5, rng);
}
