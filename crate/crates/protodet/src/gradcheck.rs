//! Central finite-difference verification of tape gradients.
//!
//! Used by the unit tests, the acceptance suite, and the `gradcheck` CLI
//! command. The oracle path (scalar re-evaluation under perturbed inputs)
//! never touches the adjoint code it checks.

use rand::RngExt;
use rand_chacha::ChaCha12Rng;

use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error gate for a passing gradient.
pub const FD_TOLERANCE: f64 = 1e-4;

fn eval_loss<F>(inputs: &[Tensor], build: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    build(&tape, &vars).value().item()
}

/// Checks every coordinate of every input; returns the worst relative error.
pub fn check_grad_fn<F>(inputs: &[Tensor], build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |i| (ti, i)))
        .collect();
    check_coords(inputs, &build, &coords)
}

/// Checks `samples` randomly chosen coordinates; returns the worst relative error.
pub fn check_grad_fn_sampled<F>(
    inputs: &[Tensor],
    build: F,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut coords = Vec::with_capacity(samples);
    for _ in 0..samples {
        let ti = rng.random_range(0..inputs.len());
        let i = rng.random_range(0..inputs[ti].numel());
        coords.push((ti, i));
    }
    check_coords(inputs, &build, &coords)
}

fn check_coords<F>(inputs: &[Tensor], build: &F, coords: &[(usize, usize)]) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    // Analytic gradients once.
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars);
    tape.backward(loss).expect("backward in gradcheck");
    let grads: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let mut worst = 0.0f64;
    for &(ti, i) in coords {
        let ad = grads[ti].data()[i];

        let mut plus = inputs.to_vec();
        plus[ti].data_mut()[i] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[ti].data_mut()[i] -= FD_STEP;
        let fd = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * FD_STEP);

        let rel = (ad - fd).abs() / (fd.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
