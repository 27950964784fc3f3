//! Dose score and the three contrastive/regression objectives.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::Var;

/// Two-way softmax of `e_d·e_clean` against `e_d·e_noisy`.
pub fn dose_score(e_d: &[f64], e_clean: &[f64], e_noisy: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (c, n) = (dot(e_d, e_clean), dot(e_d, e_noisy));
    // logistic in the difference; the smaller score is taken as 1 - larger
    // (exact for values in [1/2, 1]) so swapped anchors sum to exactly 1
    let big = 1.0 / (1.0 + (-(c - n).abs()).exp());
    if c >= n {
        big
    } else {
        1.0 - big
    }
}

/// Dose scores for a batch of embeddings `e_d` (n×d) given anchors (2×d:
/// clean row, then noisy row). Returns an n-vector.
pub fn dose_score_var<'t>(e_d: Var<'t>, anchors: Var<'t>) -> Result<Var<'t>> {
    let n = e_d.shape()[0];
    let logits = e_d.matmul(anchors.transpose_2d()?)?;
    let probs = logits.softmax_last_dim()?;
    let idx: Rc<[usize]> = (0..n).map(|i| 2 * i).collect();
    probs.gather(idx, vec![n])
}

/// Mean squared error between predicted scores and dose fractions.
pub fn loss_dose<'t>(y_hat: Var<'t>, y_d: &[f64]) -> Result<Var<'t>> {
    let target = y_hat.tape().constant(vec![y_d.len()], y_d.to_vec())?;
    let diff = y_hat.sub(target)?;
    diff.mul(diff)?.mean()
}

fn similarity<'t>(e: Var<'t>, tau: f64) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    e.matmul(e.transpose_2d()?)?.scale(1.0 / tau)
}

/// Ranking contrastive loss over 2N embeddings with dose labels.
///
/// For every ordered pair `(i, j)`, `j ≠ i`, the denominator runs over
/// `S_ij = {k ≠ i : |y_i − y_k| ≥ |y_i − y_j|}`; the result is averaged over
/// the `2N(2N−1)` pairs.
pub fn loss_rank<'t>(e: Var<'t>, labels: &[f64], tau: f64) -> Result<Var<'t>> {
    let m = e.shape()[0];
    if labels.len() != m || m < 2 {
        return Err(Error::Shape { op: "loss_rank", shapes: vec![e.shape(), vec![labels.len()]] });
    }
    let logits = similarity(e, tau)?;
    let exp = logits.exp()?;
    let pairs = m * (m - 1);
    let mut num_idx = Vec::with_capacity(pairs);
    let mut den_idx = Vec::with_capacity(pairs * m);
    let mut mask = Vec::with_capacity(pairs * m);
    for i in 0..m {
        for j in (0..m).filter(|&j| j != i) {
            num_idx.push(i * m + j);
            let dij = (labels[i] - labels[j]).abs();
            for k in 0..m {
                den_idx.push(i * m + k);
                let keep = k != i && (labels[i] - labels[k]).abs() >= dij;
                mask.push(if keep { 1.0 } else { 0.0 });
            }
        }
    }
    let tape = e.tape();
    let mask = tape.constant(vec![pairs, m], mask)?;
    let den = exp.gather(den_idx.into(), vec![pairs, m])?.mul(mask)?.sum_last_dim()?.log()?;
    let num = logits.gather(num_idx.into(), vec![pairs])?;
    den.sub(num)?.sum()?.scale(1.0 / pairs as f64)
}

/// Supervised contrastive anatomy loss, summed over anchors, with the anchor
/// itself excluded from both its positives and its denominator.
pub fn loss_anatomy<'t>(e: Var<'t>, labels: &[usize], tau: f64) -> Result<Var<'t>> {
    let m = e.shape()[0];
    if labels.len() != m {
        return Err(Error::Shape { op: "loss_anatomy", shapes: vec![e.shape(), vec![labels.len()]] });
    }
    let mut pos = vec![0.0; m * m];
    let mut others = vec![0.0; m * m];
    for i in 0..m {
        let count = (0..m).filter(|&p| p != i && labels[p] == labels[i]).count();
        if count == 0 {
            return Err(Error::NoPositive(i));
        }
        for j in (0..m).filter(|&j| j != i) {
            others[i * m + j] = 1.0;
            if labels[j] == labels[i] {
                pos[i * m + j] = 1.0 / count as f64;
            }
        }
    }
    let tape = e.tape();
    let logits = similarity(e, tau)?;
    let log_z = logits
        .exp()?
        .mul(tape.constant(vec![m, m], others)?)?
        .sum_last_dim()?
        .log()?;
    let pos_mean = logits.mul(tape.constant(vec![m, m], pos)?)?.sum_last_dim()?;
    log_z.sub(pos_mean)?.sum()
}
