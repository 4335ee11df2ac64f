//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Real, Tensor};

/// Step used for central differences.
pub const FD_EPS: Real = 1e-5;
/// Denominator floor so near-zero gradients do not inflate relative error.
pub const FD_FLOOR: Real = 1e-3;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Worst relative error across all sampled coordinates.
    pub max_rel_err: Real,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compares analytic gradients of `build` against central finite differences.
///
/// `build` must record one forward pass on the given tape from leaves it
/// creates out of `inputs` (in order) and return the scalar loss variable.
/// Every input is treated as a gradient sink. Up to `samples_per_tensor`
/// coordinates are probed per input, chosen by a seeded generator so runs
/// are reproducible.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    samples_per_tensor: usize,
    seed: u64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Shape("gradient check needs a scalar loss".into()));
        }
        tape.backward(loss)?;
        vars.iter()
            .map(|&v| tape.grad(v))
            .collect::<Result<Vec<Tensor>>>()?
    };

    let eval = |perturbed: &[Tensor]| -> Result<Real> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let coords: Vec<usize> = if n <= samples_per_tensor {
            (0..n).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..n)).collect()
        };
        for ci in coords {
            let original = work[ti].data[ci];
            work[ti].data[ci] = original + FD_EPS;
            let up = eval(&work)?;
            work[ti].data[ci] = original - FD_EPS;
            let down = eval(&work)?;
            work[ti].data[ci] = original;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let exact = analytic[ti].data[ci];
            let denom = math::abs(exact).max(math::abs(numeric)).max(FD_FLOOR);
            let rel = math::abs(exact - numeric) / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
