//! Rank statistics used to judge distillation quality.

use crate::error::{DdlError, Result};
use crate::scalar::Scalar;

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DdlError::Domain("correlation needs two equal-length lists of length >= 2".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(DdlError::Domain("correlation of a constant list".into()));
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn matches_closed_form_without_ties() {
        // 1 - 6 sum d^2 / (n (n^2 - 1))
        let a = [0.3, 1.2, -0.5, 2.2, 0.9, 1.7];
        let b = [1.0, 0.1, 0.4, 3.0, 2.0, 2.5];
        let (ra, rb) = (average_ranks(&a), average_ranks(&b));
        let n = a.len() as f64;
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
        let closed = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((spearman(&a, &b).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn monotone_transform_is_perfect() {
        let a = [0.1, 0.5, 0.2, 0.9];
        let b: Vec<f64> = a.iter().map(|x: &f64| x.exp()).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }
}
