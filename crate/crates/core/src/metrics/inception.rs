//! Inception Score over class-probability rows.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const DEFAULT_SPLITS: usize = 10;
/// Tolerance on row sums of a probability matrix.
pub const ROW_SUM_TOL: f64 = 1e-6;

pub fn check_distributions(probs: &DMatrix<f64>) -> Result<()> {
    for (i, row) in probs.row_iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!("row {i} has a negative or non-finite probability")));
        }
        let s = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidArgument(format!("row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Split boundaries: `splits` equal chunks of `n / splits` rows, the last
/// absorbing the remainder.
pub fn split_ranges(n: usize, splits: usize) -> Vec<std::ops::Range<usize>> {
    let size = n / splits;
    (0..splits).map(|s| s * size..if s + 1 == splits { n } else { (s + 1) * size }).collect()
}

fn split_score(probs: &DMatrix<f64>, rows: std::ops::Range<usize>) -> f64 {
    let block = probs.rows(rows.start, rows.len());
    let marginal = block.row_mean();
    let kl_mean = block
        .row_iter()
        .map(|row| {
            row.iter().zip(marginal.iter()).filter(|(&p, _)| p > 0.0).map(|(&p, &q)| p * (p / q).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / rows.len() as f64;
    kl_mean.exp()
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per split; returns (mean, population std).
pub fn inception_score(probs: &DMatrix<f64>, splits: usize) -> Result<(f64, f64)> {
    if splits == 0 {
        return Err(Error::InvalidArgument("inception score needs at least one split".into()));
    }
    if probs.nrows() < splits {
        return Err(Error::InvalidArgument(format!(
            "inception score needs at least {splits} rows for {splits} splits, got {}",
            probs.nrows()
        )));
    }
    check_distributions(probs)?;
    let scores: Vec<f64> = split_ranges(probs.nrows(), splits).into_iter().map(|r| split_score(probs, r)).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_score_one() {
        let p = DMatrix::from_element(40, 5, 0.2);
        let (m, s) = inception_score(&p, 4).unwrap();
        assert!((m - 1.0).abs() < 1e-9);
        assert!(s.abs() < 1e-9);
    }

    #[test]
    fn distinct_one_hots_score_k() {
        let p = DMatrix::<f64>::identity(10, 10);
        let (m, _) = inception_score(&p, 1).unwrap();
        assert!((m - 10.0).abs() < 1e-9);
    }

    #[test]
    fn remainder_goes_to_last_split() {
        let r = split_ranges(23, 4);
        assert_eq!(r, vec![0..5, 5..10, 10..15, 15..23]);
    }

    #[test]
    fn rejects_invalid_input() {
        assert!(inception_score(&DMatrix::from_element(3, 2, 0.5), 4).is_err());
        assert!(inception_score(&DMatrix::from_element(4, 2, 0.6), 2).is_err());
        let mut neg = DMatrix::from_element(4, 2, 0.5);
        neg[(0, 0)] = -0.5;
        neg[(0, 1)] = 1.5;
        assert!(inception_score(&neg, 2).is_err());
        assert!(inception_score(&DMatrix::from_element(4, 2, 0.5), 0).is_err());
    }
}
