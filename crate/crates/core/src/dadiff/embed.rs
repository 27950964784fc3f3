/// Sinusoidal timestep features: `dim/2` sines then `dim/2` cosines at
/// frequencies `10000^(-k/(dim/2))`.
pub fn timestep_embed(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64).ln() * k as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step() {
        let e = timestep_embed(0, 8);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
    }

    #[test]
    fn norm_is_constant_and_steps_distinct() {
        let all: Vec<Vec<f64>> = (0..=1000).map(|t| timestep_embed(t, 32)).collect();
        for e in &all {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 4.0).abs() < 1e-9);
        }
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-9, "{i} vs {j}");
            }
        }
    }
}
