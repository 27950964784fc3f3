use super::schedule::DiffusionSchedule;
use crate::error::{Error, Result};

/// `I_t = I_nd + ᾱ_t·I_res + β̄_t·ε`.
pub fn forward_sample(i_nd: &[f64], i_res: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Vec<f64> {
    let (a, b) = (sched.alpha_bar[t], sched.beta_bar[t]);
    i_nd.iter()
        .zip(i_res)
        .zip(eps)
        .map(|((n, r), e)| n + a * r + b * e)
        .collect()
}

/// Noise implied by a residual estimate: `(I_t − I_ld + (1 − ᾱ_t)·Î_res) / β̄_t`.
pub fn estimate_noise(i_t: &[f64], i_ld: &[f64], i_res_hat: &[f64], t: usize, sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    let b = sched.beta_bar[t];
    if b == 0.0 {
        return Err(Error::invalid(format!("noise is not identifiable at t = {t} (zero noise scale)")));
    }
    let a = sched.alpha_bar[t];
    Ok(i_t
        .iter()
        .zip(i_ld)
        .zip(i_res_hat)
        .map(|((x, l), r)| (x - l + (1.0 - a) * r) / b)
        .collect())
}

/// Deterministic jump to `t_next`: `I_ld − (1 − ᾱ_{t'})·Î_res + β̄_{t'}·ε̂`.
///
/// `eps_hat` may be `None` only when `β̄_{t'} = 0`. `i_t` and `t` do not enter
/// the update beyond their use in computing `eps_hat`.
pub fn ddim_step(
    _i_t: &[f64],
    t: usize,
    t_next: usize,
    i_res_hat: &[f64],
    eps_hat: Option<&[f64]>,
    sched: &DiffusionSchedule,
    i_ld: &[f64],
) -> Result<Vec<f64>> {
    if t_next >= t {
        return Err(Error::invalid(format!("step must go backward ({t} -> {t_next})")));
    }
    let (a, b) = (sched.alpha_bar[t_next], sched.beta_bar[t_next]);
    let base = i_ld.iter().zip(i_res_hat).map(|(l, r)| l - (1.0 - a) * r);
    match eps_hat {
        _ if b == 0.0 => Ok(base.collect()),
        Some(e) => Ok(base.zip(e).map(|(x, e)| x + b * e).collect()),
        None => Err(Error::invalid("noise estimate required for a noisy target step")),
    }
}
