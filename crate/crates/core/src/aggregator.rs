//! Group representation from predicted discriminability.
//!
//! `ddl` keeps elements whose predicted score exceeds the threshold,
//! min-max rescales the survivors' scores onto [0, 1] and takes the
//! weighted mean of their embeddings. `ddl_no_rescale` weights survivors by
//! the raw prediction instead. `average` and `top1` are the usual baselines.
//!
//! The rescale gives the lowest-scoring survivor weight exactly 0, so with
//! two or more distinct scores that element never contributes.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::data::{fmt_real, Corpus};
use crate::distiller::Regressor;
use crate::error::{DdlError, Result};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f64 = 0.15;
const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Ddl,
    DdlNoRescale,
    Average,
    Top1,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Average,
        Strategy::Top1,
        Strategy::DdlNoRescale,
        Strategy::Ddl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ddl => "ddl",
            Strategy::DdlNoRescale => "ddl_no_rescale",
            Strategy::Average => "average",
            Strategy::Top1 => "top1",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = DdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddl" => Ok(Strategy::Ddl),
            "ddl_no_rescale" => Ok(Strategy::DdlNoRescale),
            "average" => Ok(Strategy::Average),
            "top1" => Ok(Strategy::Top1),
            other => Err(DdlError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationPolicy {
    pub strategy: Strategy,
    /// Survival threshold on the predicted score, in [0, 1].
    pub threshold: f64,
    /// Groups with fewer survivors keep their top-scoring elements instead.
    pub min_survivors: usize,
}

impl AggregationPolicy {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            threshold: DEFAULT_THRESHOLD,
            min_survivors: 1,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(DdlError::Config(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        if self.min_survivors == 0 {
            return Err(DdlError::Config("min_survivors must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self::new(Strategy::Ddl)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRepresentation<T> {
    pub group_id: String,
    pub feature: Vec<T>,
    /// Elements that contributed (survivors).
    pub used_count: usize,
    pub total_count: usize,
    /// One weight per survivor, in group order.
    pub weights: Vec<T>,
}

fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Indices with score strictly above `t`, in order; the argmax when none survive.
pub fn filter_by_score<T: Scalar>(scores: &[T], t: f64) -> Vec<usize> {
    filter_with_minimum(scores, t, 1)
}

fn filter_with_minimum<T: Scalar>(scores: &[T], t: f64, min_survivors: usize) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let t = T::of(t);
    let kept: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > t).collect();
    let want = min_survivors.min(scores.len());
    if kept.len() >= want {
        return kept;
    }
    if want == 1 {
        return vec![argmax(scores)];
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: earlier elements win ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut top: Vec<usize> = order.into_iter().take(want).collect();
    top.sort_unstable();
    top
}

/// Affine min-max map onto [0, 1]; all ones when the range is degenerate.
pub fn rescale<T: Scalar>(scores: &[T]) -> Vec<T> {
    let Some(&first) = scores.first() else {
        return Vec::new();
    };
    let (lo, hi) = scores
        .iter()
        .fold((first, first), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if (hi - lo).as_f64() < DEGENERATE_RANGE {
        return vec![T::one(); scores.len()];
    }
    let slope = T::one() / (hi - lo);
    let offset = T::one() - slope * hi;
    scores
        .iter()
        .map(|&s| {
            if s == hi {
                T::one()
            } else if s == lo {
                T::zero()
            } else {
                slope * s + offset
            }
        })
        .collect()
}

/// Normalized weighted mean `sum w_i f_i / sum w_i`.
pub fn aggregate<T: Scalar>(features: &[&[T]], weights: &[T]) -> Result<Vec<T>> {
    if features.is_empty() || features.len() != weights.len() {
        return Err(DdlError::Domain(format!(
            "{} features with {} weights",
            features.len(),
            weights.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(DdlError::Domain("features have differing lengths".into()));
    }
    if weights.iter().any(|w| *w < T::zero() || !w.is_finite()) {
        return Err(DdlError::Domain("weights must be finite and nonnegative".into()));
    }
    let total: T = weights.iter().copied().sum();
    if total <= T::zero() {
        return Err(DdlError::Domain("weights sum to zero".into()));
    }
    let mut out = vec![T::zero(); d];
    for (f, &w) in features.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(*f) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Survivor indices and weights for one group given its predicted scores.
pub fn select_and_weight<T: Scalar>(scores: &[T], policy: &AggregationPolicy) -> (Vec<usize>, Vec<T>) {
    match policy.strategy {
        Strategy::Average => ((0..scores.len()).collect(), vec![T::one(); scores.len()]),
        Strategy::Top1 => (vec![argmax(scores)], vec![T::one()]),
        Strategy::Ddl | Strategy::DdlNoRescale => {
            let kept = filter_with_minimum(scores, policy.threshold, policy.min_survivors);
            let kept_scores: Vec<T> = kept.iter().map(|&i| scores[i]).collect();
            let weights = if policy.strategy == Strategy::Ddl {
                rescale(&kept_scores)
            } else {
                kept_scores
            };
            (kept, weights)
        }
    }
}

/// Pools a group whose predicted scores are already known.
pub fn represent_group_with_scores<T: Scalar>(
    group_id: &str,
    embeddings: &[&[T]],
    scores: &[T],
    policy: &AggregationPolicy,
) -> Result<GroupRepresentation<T>> {
    policy.validate()?;
    if embeddings.is_empty() {
        return Err(DdlError::Precondition(format!("group {group_id} is empty")));
    }
    if embeddings.len() != scores.len() {
        return Err(DdlError::Domain(format!(
            "group {group_id}: {} embeddings with {} scores",
            embeddings.len(),
            scores.len()
        )));
    }
    let (kept, weights) = select_and_weight(scores, policy);
    let features: Vec<&[T]> = kept.iter().map(|&i| embeddings[i]).collect();
    let feature = aggregate(&features, &weights)?;
    Ok(GroupRepresentation {
        group_id: group_id.to_string(),
        feature,
        used_count: kept.len(),
        total_count: embeddings.len(),
        weights,
    })
}

/// Predicts every member's score from its raw input, then pools.
///
/// `members` holds `(raw_input, embedding)` pairs. Baseline strategies
/// still query the model so that `top1` can pick its element.
pub fn represent_group<T: Scalar>(
    group_id: &str,
    members: &[(&[T], &[T])],
    model: &Regressor<T>,
    policy: &AggregationPolicy,
) -> Result<GroupRepresentation<T>> {
    let scores = match policy.strategy {
        Strategy::Average => vec![T::one(); members.len()],
        _ => members
            .iter()
            .map(|(raw, _)| model.predict(raw))
            .collect::<Result<Vec<T>>>()?,
    };
    let embeddings: Vec<&[T]> = members.iter().map(|&(_, e)| e).collect();
    represent_group_with_scores(group_id, &embeddings, &scores, policy)
}

/// One representation per group, in order of first appearance.
pub fn represent_corpus<T: Scalar>(
    corpus: &Corpus<T>,
    model: &Regressor<T>,
    policy: &AggregationPolicy,
) -> Result<Vec<GroupRepresentation<T>>> {
    corpus
        .groups()
        .iter()
        .map(|g| {
            let members: Vec<(&[T], &[T])> = g
                .members
                .iter()
                .map(|e| (e.raw_input.as_slice(), e.embedding.as_slice()))
                .collect();
            represent_group(g.group_id, &members, model, policy)
        })
        .collect()
}

/// Elements whose embedding must be extracted (survivors) versus all elements.
pub fn count_base_evaluations<T: Scalar>(
    groups: &[Vec<&[T]>],
    model: &Regressor<T>,
    policy: &AggregationPolicy,
) -> Result<(usize, usize)> {
    policy.validate()?;
    let mut used = 0;
    let mut total = 0;
    for raws in groups {
        total += raws.len();
        if raws.is_empty() {
            continue;
        }
        used += match policy.strategy {
            Strategy::Average => raws.len(),
            Strategy::Top1 => 1,
            Strategy::Ddl | Strategy::DdlNoRescale => {
                let scores = raws
                    .iter()
                    .map(|r| model.predict(r))
                    .collect::<Result<Vec<T>>>()?;
                filter_with_minimum(&scores, policy.threshold, policy.min_survivors).len()
            }
        };
    }
    Ok((used, total))
}

/// Raw inputs of every group in a corpus, for [`count_base_evaluations`].
pub fn corpus_raw_groups<T: Scalar>(corpus: &Corpus<T>) -> Vec<Vec<&[T]>> {
    corpus
        .groups()
        .iter()
        .map(|g| g.members.iter().map(|e| e.raw_input.as_slice()).collect())
        .collect()
}

/// Writes `group_id,n,total,f_0..f_{d-1}`.
pub fn write_groups_csv<T: Scalar, W: Write>(groups: &[GroupRepresentation<T>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = groups.first().map_or(0, |g| g.feature.len());
    let mut header = vec!["group_id".to_string(), "n".into(), "total".into()];
    header.extend((0..d).map(|i| format!("f_{i}")));
    w.write_record(&header)?;
    for g in groups {
        let mut row = vec![g.group_id.clone(), g.used_count.to_string(), g.total_count.to_string()];
        row.extend(g.feature.iter().map(|v| fmt_real(v.as_f64())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a group CSV back; weights are not stored and come back empty.
pub fn read_groups_csv<T: Scalar, R: Read>(reader: R) -> Result<Vec<GroupRepresentation<T>>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = r.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    let d = names.len().saturating_sub(3);
    let expected: Vec<String> = ["group_id", "n", "total"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..d).map(|i| format!("f_{i}")))
        .collect();
    if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(DdlError::Schema("group header must be group_id,n,total,f_0..".into()));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != names.len() {
            return Err(DdlError::Schema(format!("line {line}: expected {} fields", names.len())));
        }
        let int = |s: &str| {
            s.parse::<usize>().map_err(|_| DdlError::Parse {
                line,
                message: format!("{s:?} is not a count"),
            })
        };
        let feature = row
            .iter()
            .skip(3)
            .map(|s| {
                s.parse::<f64>().map(T::of).map_err(|_| DdlError::Parse {
                    line,
                    message: format!("{s:?} is not a real"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        out.push(GroupRepresentation {
            group_id: row[0].to_string(),
            used_count: int(&row[1])?,
            total_count: int(&row[2])?,
            feature,
            weights: Vec::new(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_examples() {
        assert_eq!(filter_by_score(&[0.1, 0.2, 0.3], 0.15), vec![1, 2]);
        assert_eq!(filter_by_score(&[0.1, 0.12, 0.05], 0.15), vec![1]);
        assert_eq!(filter_by_score(&[0.1, 0.2, 0.3], 0.0), vec![0, 1, 2]);
        // strictly greater
        assert_eq!(filter_by_score(&[0.15, 0.2], 0.15), vec![1]);
    }

    #[test]
    fn min_survivors_keeps_top_scores() {
        let kept = filter_with_minimum(&[0.1, 0.4, 0.05, 0.3], 0.35, 2);
        assert_eq!(kept, vec![1, 3]);
    }

    #[test]
    fn rescale_examples() {
        let r = rescale(&[0.2, 0.5, 0.8f64]);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 0.5).abs() < 1e-15);
        assert_eq!(r[2], 1.0);
        assert_eq!(rescale(&[0.4f64]), vec![1.0]);
        assert_eq!(rescale(&[0.4f64, 0.4]), vec![1.0, 1.0]);
        assert_eq!(rescale(&[0.3f64, 0.9]), vec![0.0, 1.0]);
    }

    #[test]
    fn aggregate_examples() {
        let f1 = [1.0, 0.0];
        let f2 = [0.0, 1.0];
        assert_eq!(aggregate(&[&f1[..], &f2[..]], &[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(aggregate(&[&f1[..], &f2[..]], &[2.0, 2.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(aggregate(&[&f1[..]], &[0.3]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            aggregate(&[&f1[..], &f2[..]], &[0.0, 0.0]),
            Err(DdlError::Domain(_))
        ));
    }

    #[test]
    fn strategies_on_scored_group() {
        let e = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let embs: Vec<&[f64]> = e.iter().map(|x| &x[..]).collect();
        let scores = [0.3, 0.9, 0.1];

        let avg = represent_group_with_scores("g", &embs[..2], &scores[..2], &AggregationPolicy::new(Strategy::Average)).unwrap();
        assert_eq!(avg.feature, vec![0.5, 0.5]);
        assert_eq!(avg.used_count, 2);

        let top = represent_group_with_scores("g", &embs, &scores, &AggregationPolicy::new(Strategy::Top1)).unwrap();
        assert_eq!(top.feature, vec![0.0, 1.0]);
        assert_eq!(top.used_count, 1);

        let ddl = represent_group_with_scores("g", &embs, &scores, &AggregationPolicy::new(Strategy::Ddl)).unwrap();
        // survivors 0 and 1; rescaled weights 0 and 1
        assert_eq!(ddl.used_count, 2);
        assert_eq!(ddl.weights, vec![0.0, 1.0]);
        assert_eq!(ddl.feature, vec![0.0, 1.0]);

        let raw = represent_group_with_scores("g", &embs, &scores, &AggregationPolicy::new(Strategy::DdlNoRescale)).unwrap();
        assert_eq!(raw.weights, vec![0.3, 0.9]);
        assert!((raw.feature[0] - 0.25).abs() < 1e-15);
        assert!((raw.feature[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn equal_scores_reduce_to_average() {
        let e = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let embs: Vec<&[f64]> = e.iter().map(|x| &x[..]).collect();
        let scores = [0.6; 3];
        let ddl = represent_group_with_scores("g", &embs, &scores, &AggregationPolicy::new(Strategy::Ddl)).unwrap();
        let avg = represent_group_with_scores("g", &embs, &scores, &AggregationPolicy::new(Strategy::Average)).unwrap();
        assert_eq!(ddl.feature, avg.feature);
    }

    #[test]
    fn threshold_out_of_range_rejected() {
        let p = AggregationPolicy::new(Strategy::Ddl).with_threshold(1.5);
        assert!(p.validate().is_err());
    }

    #[test]
    fn group_csv_round_trip() {
        let g = GroupRepresentation {
            group_id: "g1".to_string(),
            feature: vec![0.25, -1.5],
            used_count: 2,
            total_count: 3,
            weights: vec![0.0, 1.0],
        };
        let mut buf = Vec::new();
        write_groups_csv(std::slice::from_ref(&g), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("group_id,n,total,f_0,f_1\n"));
        let back: Vec<GroupRepresentation<f64>> = read_groups_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0].feature, g.feature);
        assert_eq!(back[0].used_count, 2);
    }
}
