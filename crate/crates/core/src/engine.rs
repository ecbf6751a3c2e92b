//! Per-element discriminability from class centroids.
//!
//! An element's raw discriminability is the cosine similarity to its own
//! class centroid divided by the cosine similarity to the closest other
//! centroid. Raw values are z-scored over the whole corpus (population
//! statistics) and squashed with the logistic function into the D-score.

use crate::data::{Corpus, DiscriminabilityRecord};
use crate::error::{DdlError, Result};
use crate::scalar::{dot, logistic, norm, Scalar};

/// Guard on the hardest-negative similarity in the ratio.
pub const EPSILON_DEN: f64 = 1e-12;
/// Below this standard deviation every normalized score is 0.5.
pub const EPSILON_SIGMA: f64 = 1e-12;
const MIN_CENTROID_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidTable<T> {
    centroids: Vec<Vec<T>>,
    counts: Vec<usize>,
}

impl<T: Scalar> CentroidTable<T> {
    pub fn centroids(&self) -> &[Vec<T>] {
        &self.centroids
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn k_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid(&self, class: usize) -> &[T] {
        &self.centroids[class]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats<T> {
    pub mu: T,
    pub sigma: T,
}

impl<T: Scalar> NormalizationStats<T> {
    /// True when the spread is too small to standardize.
    pub fn is_degenerate(&self) -> bool {
        self.sigma.as_f64() < EPSILON_SIGMA
    }

    /// Pre-sigmoid value of a raw ratio; zero in the degenerate case.
    pub fn z(&self, raw: T) -> T {
        if self.is_degenerate() {
            T::zero()
        } else {
            (raw - self.mu) / self.sigma
        }
    }
}

pub fn compute_centroids<T: Scalar>(corpus: &Corpus<T>) -> Result<CentroidTable<T>> {
    if !corpus.is_fully_labeled() {
        return Err(DdlError::LabelsRequired(
            "centroids need a class label on every element".into(),
        ));
    }
    let k = corpus.k_classes();
    let d = corpus.d_emb();
    let mut sums = vec![vec![T::zero(); d]; k];
    let mut counts = vec![0usize; k];
    for e in corpus.elements() {
        let label = e.class_label.expect("checked fully labeled");
        counts[label] += 1;
        for (s, &v) in sums[label].iter_mut().zip(&e.embedding) {
            *s += v;
        }
    }
    for (m, (sum, &count)) in sums.iter_mut().zip(&counts).enumerate() {
        if count == 0 {
            return Err(DdlError::MissingClass(m));
        }
        let n = T::of(count as f64);
        sum.iter_mut().for_each(|v| *v /= n);
        if norm(sum).as_f64() <= MIN_CENTROID_NORM {
            return Err(DdlError::DegenerateClass(m));
        }
    }
    Ok(CentroidTable {
        centroids: sums,
        counts,
    })
}

pub fn cosine_similarity<T: Scalar>(f: &[T], c: &[T]) -> Result<T> {
    if f.len() != c.len() {
        return Err(DdlError::Domain(format!(
            "cosine similarity of vectors with lengths {} and {}",
            f.len(),
            c.len()
        )));
    }
    let (nf, nc) = (norm(f), norm(c));
    if nf.as_f64() <= 0.0 || nc.as_f64() <= 0.0 {
        return Err(DdlError::Domain("cosine similarity of a zero-norm vector".into()));
    }
    let cos = dot(f, c) / (nf * nc);
    Ok(cos.max(-T::one()).min(T::one()))
}

/// Own-class similarity over hardest-negative similarity.
///
/// A negative denominator is legal and flips the sign of the ratio.
pub fn raw_ratio<T: Scalar>(f: &[T], label: usize, table: &CentroidTable<T>) -> Result<T> {
    let k = table.k_classes();
    if k < 2 {
        return Err(DdlError::Precondition(format!(
            "discriminability needs at least 2 classes, got {k}"
        )));
    }
    if label >= k {
        return Err(DdlError::Domain(format!("label {label} outside [0, {k})")));
    }
    let positive = cosine_similarity(f, table.centroid(label))?;
    let mut hardest = T::neg_infinity();
    for (n, c) in table.centroids().iter().enumerate() {
        if n != label {
            hardest = hardest.max(cosine_similarity(f, c)?);
        }
    }
    ratio_of(positive, hardest)
}

pub(crate) fn ratio_of<T: Scalar>(positive: T, hardest_negative: T) -> Result<T> {
    if hardest_negative.abs().as_f64() < EPSILON_DEN {
        return Err(DdlError::NearSingularRatio {
            value: hardest_negative.as_f64(),
        });
    }
    Ok(positive / hardest_negative)
}

/// Population mean and standard deviation of the raw ratios.
pub fn normalization_stats<T: Scalar>(raw: &[T]) -> Result<NormalizationStats<T>> {
    if raw.is_empty() {
        return Err(DdlError::Precondition("cannot normalize an empty score list".into()));
    }
    let n = T::of(raw.len() as f64);
    let mu = raw.iter().copied().sum::<T>() / n;
    let var = raw.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
    Ok(NormalizationStats {
        mu,
        sigma: var.sqrt(),
    })
}

pub fn normalize_scores<T: Scalar>(raw: &[T]) -> Result<(Vec<T>, NormalizationStats<T>)> {
    let stats = normalization_stats(raw)?;
    let scores = raw.iter().map(|&x| logistic(stats.z(x))).collect();
    Ok((scores, stats))
}

/// Centroids, ratios and normalization over a fully labeled corpus.
pub fn score_corpus<T: Scalar>(corpus: &Corpus<T>) -> Result<Vec<DiscriminabilityRecord<T>>> {
    if !corpus.is_fully_labeled() {
        return Err(DdlError::LabelsRequired(
            "every element needs a class label to be scored".into(),
        ));
    }
    if corpus.k_classes() < 2 {
        return Err(DdlError::Precondition(format!(
            "discriminability needs at least 2 classes, got {}",
            corpus.k_classes()
        )));
    }
    let table = compute_centroids(corpus)?;
    let raw = corpus
        .elements()
        .iter()
        .map(|e| raw_ratio(&e.embedding, e.class_label.expect("labeled"), &table))
        .collect::<Result<Vec<T>>>()?;
    let (scores, stats) = normalize_scores(&raw)?;
    log::debug!(
        "scored {} elements: mu={} sigma={}",
        raw.len(),
        stats.mu,
        stats.sigma
    );
    Ok(corpus
        .elements()
        .iter()
        .zip(raw.into_iter().zip(scores))
        .map(|(e, (d_raw, d_score))| DiscriminabilityRecord {
            element_id: e.element_id.clone(),
            d_raw,
            d_score,
            d_hat: None,
        })
        .collect())
}
