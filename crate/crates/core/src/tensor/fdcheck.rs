//! Central-finite-difference verification of tape gradients.

use super::{rel_err, NodeId, Scalar, Tape, Tensor};
use crate::error::TensorError;
use rand::seq::SliceRandom;
use rand::SeedableRng;

/// A scalar-valued computation expressed against tape leaves, re-run
/// several times by the checker: once for analytic gradients and twice
/// per probed coordinate for central differences.
pub trait ScalarFn<T: Scalar> {
    fn eval(&mut self, tape: &mut Tape<T>, leaves: &[NodeId]) -> Result<NodeId, TensorError>;
}

impl<T: Scalar, F> ScalarFn<T> for F
where
    F: FnMut(&mut Tape<T>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    fn eval(&mut self, tape: &mut Tape<T>, leaves: &[NodeId]) -> Result<NodeId, TensorError> {
        self(tape, leaves)
    }
}

fn forward_value<T: Scalar>(
    f: &mut dyn ScalarFn<T>,
    inputs: &[Tensor<T>],
) -> Result<T, TensorError> {
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f.eval(&mut tape, &leaves)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(tape.value(out).item())
}

fn analytic_grads<T: Scalar>(
    f: &mut dyn ScalarFn<T>,
    inputs: &[Tensor<T>],
) -> Result<Vec<Vec<T>>, TensorError> {
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f.eval(&mut tape, &leaves)?;
    tape.backward(out)?;
    Ok(leaves
        .iter()
        .map(|&l| tape.grad(l).expect("leaf requires grad").to_vec())
        .collect())
}

/// Compares tape gradients against central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` on every coordinate of every
/// input. Returns the worst relative error, with the denominator
/// floored at `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T: Scalar>(
    f: &mut dyn ScalarFn<T>,
    inputs: &[Tensor<T>],
    eps: f64,
) -> Result<f64, TensorError> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_coords(f, inputs, eps, &coords)
}

/// Same check restricted to `num_coords` coordinates sampled without
/// replacement (seeded), for models too large to sweep exhaustively.
pub fn finite_diff_check_sampled<T: Scalar>(
    f: &mut dyn ScalarFn<T>,
    inputs: &[Tensor<T>],
    eps: f64,
    num_coords: usize,
    seed: u64,
) -> Result<f64, TensorError> {
    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(num_coords);
    check_coords(f, inputs, eps, &coords)
}

fn check_coords<T: Scalar>(
    f: &mut dyn ScalarFn<T>,
    inputs: &[Tensor<T>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64, TensorError> {
    if eps <= 0.0 {
        return Err(TensorError::invalid("finite_diff_check", "eps must be positive"));
    }
    let grads = analytic_grads(f, inputs)?;
    let epst = T::from_f64(eps);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + epst;
        let plus = forward_value(f, &work)?.to_f64();
        work[i].data_mut()[j] = orig - epst;
        let minus = forward_value(f, &work)?.to_f64();
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[i][j].to_f64();
        worst = worst.max(rel_err(analytic, numeric));
    }
    Ok(worst)
}
