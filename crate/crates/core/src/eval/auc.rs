//! Rank-based ROC AUC with mid-rank tie handling.
//!
//! The statistic is the Mann–Whitney U of the mismatched (positive) scores,
//! kept in doubled integer form so that ties contribute exact halves and the
//! result equals the pairwise count `(wins + ties / 2) / (n_pos · n_neg)`
//! bit for bit.

use super::EvalError;
use crate::manifest::Label;

/// Probability that a random mismatched pair scores above a random matched
/// pair; ties count one half. Scores are `p_mismatch`-like: higher means more
/// confidently mismatched.
pub fn auc(scored: &[(Label, f64)]) -> Result<f64, EvalError> {
    if let Some(i) = scored.iter().position(|(_, s)| s.is_nan()) {
        return Err(EvalError::InvalidScore(format!("NaN score at index {i}")));
    }
    let n_pos = scored.iter().filter(|(l, _)| *l == Label::Mismatch).count() as u128;
    let n_neg = scored.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].1.total_cmp(&scored[b].1));

    // sum over positives of twice their 1-based mid-rank
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scored[order[j]].1 == scored[order[i]].1 {
            j += 1;
        }
        let positives = order[i..j]
            .iter()
            .filter(|&&k| scored[k].0 == Label::Mismatch)
            .count() as u128;
        // ranks i+1..=j share the mid-rank (i + 1 + j) / 2
        rank_sum2 += positives * (i as u128 + 1 + j as u128);
        i = j;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Match as M, Mismatch as X};

    #[test]
    fn perfect_separation() {
        assert_eq!(auc(&[(X, 0.9), (X, 0.8), (M, 0.3)]).unwrap(), 1.0);
        assert_eq!(auc(&[(X, 0.1), (M, 0.8)]).unwrap(), 0.0);
    }

    #[test]
    fn tie_example() {
        // pairs: (.6,.6)=.5 (.6,.4)=1 (.4,.6)=0 (.4,.4)=.5
        assert_eq!(auc(&[(X, 0.6), (X, 0.4), (M, 0.6), (M, 0.4)]).unwrap(), 0.5);
    }

    #[test]
    fn all_equal() {
        assert_eq!(
            auc(&[(X, 0.3), (M, 0.3), (M, 0.3), (X, 0.3), (X, 0.3)]).unwrap(),
            0.5
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            auc(&[(X, 0.1), (X, 0.2)]),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(auc(&[]), Err(EvalError::SingleClass)));
        assert!(matches!(
            auc(&[(X, f64::NAN), (M, 0.2)]),
            Err(EvalError::InvalidScore(_))
        ));
    }
}
