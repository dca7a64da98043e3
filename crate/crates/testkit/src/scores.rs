//! Inception Score written as explicit double loops over samples and classes.

/// `exp(mean_i KL(p_i ‖ p̄))` per split, then mean and population std.
/// Splits are contiguous; the final split takes the remainder.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> (f64, f64) {
    let n = probs.len();
    let size = n / splits;
    let mut scores = Vec::new();
    for s in 0..splits {
        let start = s * size;
        let end = if s + 1 == splits { n } else { start + size };
        let part = &probs[start..end];
        let k = part[0].len();
        let mut marginal = vec![0.0; k];
        for p in part {
            for j in 0..k {
                marginal[j] += p[j] / part.len() as f64;
            }
        }
        let mut kl_sum = 0.0;
        for p in part {
            for j in 0..k {
                if p[j] > 0.0 {
                    kl_sum += p[j] * (p[j].ln() - marginal[j].ln());
                }
            }
        }
        scores.push((kl_sum / part.len() as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    (mean, var.sqrt())
}
