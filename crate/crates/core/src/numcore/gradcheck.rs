//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::numcore::{Rng, Tape, Tensor, Var};

/// Default perturbation for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over all input elements of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_sampled(f, inputs, eps, None)
}

/// Like [`grad_check`], but when `sample` is given only `per_input` randomly
/// chosen elements of each input are perturbed.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, sample: Option<(usize, &mut Rng)>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t)).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect::<Vec<_>>()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(&t.clone().with_requires_grad(false))).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut picks: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    if let Some((per_input, rng)) = sample {
        for p in picks.iter_mut() {
            rng.shuffle(p);
            p.truncate(per_input);
        }
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, elems) in picks.iter().enumerate() {
        for &j in elems {
            let orig = work[i].values()[j];
            let wrap = |e: Error| Error::GradCheck {
                input: i,
                element: j,
                source: Box::new(e),
            };
            work[i].values_mut()[j] = orig + eps;
            let plus = eval(&work).map_err(wrap)?;
            work[i].values_mut()[j] = orig - eps;
            let minus = eval(&work).map_err(wrap)?;
            work[i].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
