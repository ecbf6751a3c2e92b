//! Set-to-set verification and identification metrics.
//!
//! Verification accepts a pair when its similarity is `>= threshold`.
//! Identification ranks the gallery by descending similarity; equal
//! similarities keep gallery order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::aggregator::{corpus_raw_groups, count_base_evaluations, represent_corpus, AggregationPolicy, GroupRepresentation};
use crate::data::{fmt_real, Corpus};
use crate::distiller::Regressor;
use crate::engine::cosine_similarity;
use crate::error::{DdlError, Result};
use crate::scalar::Scalar;

pub const TIE_BREAK: &str = "stable-gallery-order";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub group_a: String,
    pub group_b: String,
    pub is_same: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<Pair>,
}

impl PairList {
    /// Every unordered pair of distinct groups, labeled by class equality.
    pub fn all_pairs(groups: &[(String, usize)]) -> Self {
        let mut pairs = Vec::new();
        for (i, (a, la)) in groups.iter().enumerate() {
            for (b, lb) in &groups[i + 1..] {
                pairs.push(Pair {
                    group_a: a.clone(),
                    group_b: b.clone(),
                    is_same: la == lb,
                });
            }
        }
        Self { pairs }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["group_a", "group_b", "is_same"] {
            return Err(DdlError::Schema("pair header must be group_a,group_b,is_same".into()));
        }
        let mut pairs = Vec::new();
        for row in r.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let is_same = match row[2].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(DdlError::Parse {
                        line,
                        message: format!("is_same {other:?} is not a boolean"),
                    })
                }
            };
            pairs.push(Pair {
                group_a: row[0].to_string(),
                group_b: row[1].to_string(),
                is_same,
            });
        }
        Ok(Self { pairs })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["group_a", "group_b", "is_same"])?;
        for p in &self.pairs {
            w.write_record([p.group_a.as_str(), p.group_b.as_str(), if p.is_same { "1" } else { "0" }])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Genuine and impostor similarities, resolving ids against `groups`.
    pub fn score<T: Scalar>(&self, groups: &[GroupRepresentation<T>]) -> Result<(Vec<T>, Vec<T>)> {
        let index: HashMap<&str, &GroupRepresentation<T>> =
            groups.iter().map(|g| (g.group_id.as_str(), g)).collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| DdlError::Protocol(format!("pair references unknown group {id}")))
        };
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for p in &self.pairs {
            let s = pair_similarity(lookup(&p.group_a)?, lookup(&p.group_b)?)?;
            if p.is_same {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
        Ok((genuine, impostor))
    }
}

pub fn pair_similarity<T: Scalar>(a: &GroupRepresentation<T>, b: &GroupRepresentation<T>) -> Result<T> {
    cosine_similarity(&a.feature, &b.feature)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TarAtFar {
    pub far_target: f64,
    /// Acceptance threshold; `+inf` when no observed score meets the target.
    pub threshold: f64,
    pub tar: f64,
    pub achieved_far: f64,
    /// False when the target is below one impostor's worth of FAR.
    pub reachable: bool,
}

fn sorted_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    let mut v: Vec<f64> = xs.iter().map(|x| x.as_f64()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Count of sorted values `>= threshold`.
fn count_at_least(sorted: &[f64], threshold: f64) -> usize {
    sorted.len() - sorted.partition_point(|&x| x < threshold)
}

/// Smallest observed score whose false-accept rate is at most each target.
pub fn tar_at_far<T: Scalar>(genuine: &[T], impostor: &[T], far_levels: &[f64]) -> Result<Vec<TarAtFar>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(DdlError::Precondition("need genuine and impostor scores".into()));
    }
    let gen = sorted_f64(genuine);
    let imp = sorted_f64(impostor);
    let mut candidates: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let (n_gen, n_imp) = (gen.len() as f64, imp.len() as f64);
    far_levels
        .iter()
        .map(|&phi| {
            if !(phi > 0.0 && phi <= 1.0) {
                return Err(DdlError::Precondition(format!("FAR level {phi} outside (0, 1]")));
            }
            // FAR is nonincreasing in the threshold
            let first_ok = candidates
                .partition_point(|&c| count_at_least(&imp, c) as f64 / n_imp > phi);
            let (threshold, tar, far) = match candidates.get(first_ok) {
                Some(&c) => (
                    c,
                    count_at_least(&gen, c) as f64 / n_gen,
                    count_at_least(&imp, c) as f64 / n_imp,
                ),
                None => (f64::INFINITY, 0.0, 0.0),
            };
            Ok(TarAtFar {
                far_target: phi,
                threshold,
                tar,
                achieved_far: far,
                reachable: phi * n_imp >= 1.0,
            })
        })
        .collect()
}

/// `(far, tar)` points from the strictest threshold to the loosest, starting at (0, 0).
pub fn roc_curve<T: Scalar>(genuine: &[T], impostor: &[T]) -> Vec<(f64, f64)> {
    let gen = sorted_f64(genuine);
    let imp = sorted_f64(impostor);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut roc = vec![(0.0, 0.0)];
    for t in thresholds {
        roc.push((
            count_at_least(&imp, t) as f64 / imp.len().max(1) as f64,
            count_at_least(&gen, t) as f64 / gen.len().max(1) as f64,
        ));
    }
    roc
}

/// Best `(accuracy, threshold)` over midpoints of the sorted unique scores
/// plus one threshold below and one above every score; ties keep the lowest.
pub fn verification_accuracy<T: Scalar>(genuine: &[T], impostor: &[T]) -> Result<(f64, f64)> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(DdlError::Precondition("need genuine and impostor scores".into()));
    }
    let gen = sorted_f64(genuine);
    let imp = sorted_f64(impostor);
    let mut unique: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut candidates = Vec::with_capacity(unique.len() + 1);
    candidates.push(unique[0] - 1.0);
    candidates.extend(unique.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(unique[unique.len() - 1] + 1.0);
    let total = (gen.len() + imp.len()) as f64;
    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for t in candidates {
        let tp = count_at_least(&gen, t);
        let tn = imp.len() - count_at_least(&imp, t);
        let acc = (tp + tn) as f64 / total;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(best)
}

/// CMC per rank and mean average precision.
///
/// `cmc[r]` is the fraction of queries whose first correct match is within
/// rank `r + 1`; the curve has one entry per gallery item.
pub fn cmc_map<T: Scalar>(queries: &[(&[T], usize)], gallery: &[(&[T], usize)]) -> Result<(Vec<f64>, f64)> {
    if queries.is_empty() || gallery.is_empty() {
        return Err(DdlError::Precondition("need queries and a gallery".into()));
    }
    let mut first_hits = vec![0usize; gallery.len()];
    let mut ap_sum = 0.0;
    for (qi, &(q, label)) in queries.iter().enumerate() {
        if !gallery.iter().any(|&(_, l)| l == label) {
            return Err(DdlError::Protocol(format!(
                "query {qi} has label {label} absent from the gallery"
            )));
        }
        let sims = gallery
            .iter()
            .map(|&(g, _)| cosine_similarity(q, g).map(|s| s.as_f64()))
            .collect::<Result<Vec<f64>>>()?;
        let mut order: Vec<usize> = (0..gallery.len()).collect();
        // numeric order so that -0.0 and 0.0 tie
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank, &g) in order.iter().enumerate() {
            if gallery[g].1 == label {
                if hits == 0 {
                    first_hits[rank] += 1;
                }
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += precision_sum / hits as f64;
    }
    let nq = queries.len() as f64;
    let mut cumulative = 0usize;
    let cmc = first_hits
        .iter()
        .map(|&h| {
            cumulative += h;
            cumulative as f64 / nq
        })
        .collect();
    Ok((cmc, ap_sum / nq))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub roc: Vec<(f64, f64)>,
    pub tar_at_far: Vec<TarAtFar>,
    pub best_accuracy: f64,
    pub accuracy_threshold: f64,
    /// Empty when the protocol has no identification split.
    pub cmc: Vec<f64>,
    pub map: Option<f64>,
    pub tie_break: &'static str,
}

impl EvalReport {
    pub fn tar_at(&self, far: f64) -> Option<f64> {
        self.tar_at_far
            .iter()
            .find(|t| (t.far_target - far).abs() <= 1e-15 * far.max(1.0))
            .map(|t| t.tar)
    }

    pub fn write_roc_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["far", "tar"])?;
        for &(far, tar) in &self.roc {
            w.write_record([fmt_real(far), fmt_real(tar)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Query/gallery split over group indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentificationSplit {
    pub queries: Vec<(usize, usize)>,
    pub gallery: Vec<(usize, usize)>,
}

impl IdentificationSplit {
    /// First group of each class is a query, the rest form the gallery.
    /// Classes with a single group contribute only to the gallery.
    pub fn first_group_as_query(labels: &[usize]) -> Self {
        let mut count: HashMap<usize, usize> = HashMap::new();
        for &l in labels {
            *count.entry(l).or_default() += 1;
        }
        let mut seen = HashMap::new();
        let mut split = Self::default();
        for (i, &l) in labels.iter().enumerate() {
            let first = seen.insert(l, ()).is_none();
            if first && count[&l] > 1 {
                split.queries.push((i, l));
            } else {
                split.gallery.push((i, l));
            }
        }
        split
    }
}

pub fn evaluate<T: Scalar>(
    groups: &[GroupRepresentation<T>],
    pairs: &PairList,
    far_levels: &[f64],
    identification: Option<&IdentificationSplit>,
) -> Result<EvalReport> {
    let (genuine, impostor) = pairs.score(groups)?;
    let tar = tar_at_far(&genuine, &impostor, far_levels)?;
    let (best_accuracy, accuracy_threshold) = verification_accuracy(&genuine, &impostor)?;
    let (cmc, map) = match identification {
        Some(split) if !split.queries.is_empty() => {
            let feat = |&(i, l): &(usize, usize)| (groups[i].feature.as_slice(), l);
            let q: Vec<_> = split.queries.iter().map(feat).collect();
            let g: Vec<_> = split.gallery.iter().map(feat).collect();
            let (cmc, map) = cmc_map(&q, &g)?;
            (cmc, Some(map))
        }
        _ => (Vec::new(), None),
    };
    Ok(EvalReport {
        roc: roc_curve(&genuine, &impostor),
        tar_at_far: tar,
        best_accuracy,
        accuracy_threshold,
        cmc,
        map,
        tie_break: TIE_BREAK,
    })
}

#[derive(Debug, Clone)]
pub struct Protocol {
    pub far_levels: Vec<f64>,
    /// Defaults to every pair of groups when absent.
    pub pairs: Option<PairList>,
    pub identification: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            far_levels: vec![1e-3, 1e-2, 1e-1],
            pairs: None,
            identification: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StrategyRow {
    pub policy: AggregationPolicy,
    pub report: EvalReport,
    pub used: usize,
    pub total: usize,
}

/// Group labels of a fully labeled corpus, in group order.
pub fn group_labels<T: Scalar>(corpus: &Corpus<T>) -> Result<Vec<(String, usize)>> {
    corpus
        .groups()
        .iter()
        .map(|g| {
            let label = g.class_label().ok_or_else(|| {
                DdlError::LabelsRequired(format!("group {} has no class label", g.group_id))
            })?;
            if g.members.iter().any(|e| e.class_label != Some(label)) {
                return Err(DdlError::Protocol(format!("group {} mixes classes", g.group_id)));
            }
            Ok((g.group_id.to_string(), label))
        })
        .collect()
}

/// Runs every policy over the same corpus and protocol.
pub fn compare_strategies<T: Scalar>(
    corpus: &Corpus<T>,
    model: &Regressor<T>,
    policies: &[AggregationPolicy],
    protocol: &Protocol,
) -> Result<Vec<StrategyRow>> {
    let labels = group_labels(corpus)?;
    let pairs = match &protocol.pairs {
        Some(p) => p.clone(),
        None => PairList::all_pairs(&labels),
    };
    let split = protocol.identification.then(|| {
        let ls: Vec<usize> = labels.iter().map(|(_, l)| *l).collect();
        IdentificationSplit::first_group_as_query(&ls)
    });
    let raw_groups = corpus_raw_groups(corpus);
    policies
        .iter()
        .map(|policy| {
            let groups = represent_corpus(corpus, model, policy)?;
            let report = evaluate(&groups, &pairs, &protocol.far_levels, split.as_ref())?;
            let (used, total) = count_base_evaluations(&raw_groups, model, policy)?;
            log::info!("{}: accuracy {:.4}", policy.strategy, report.best_accuracy);
            Ok(StrategyRow {
                policy: *policy,
                report,
                used,
                total,
            })
        })
        .collect()
}

const CMC_RANKS: [usize; 3] = [1, 5, 20];

fn comparison_columns(rows: &[StrategyRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let far_levels: Vec<f64> = rows
        .first()
        .map(|r| r.report.tar_at_far.iter().map(|t| t.far_target).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = ["strategy", "threshold", "used", "total", "accuracy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(far_levels.iter().map(|f| format!("tar@far={f:e}")));
    header.push("map".into());
    header.extend(CMC_RANKS.iter().map(|r| format!("cmc@{r}")));
    let body = rows
        .iter()
        .map(|row| {
            let mut cells = vec![
                row.policy.strategy.name().to_string(),
                format!("{}", row.policy.threshold),
                row.used.to_string(),
                row.total.to_string(),
                format!("{:.6}", row.report.best_accuracy),
            ];
            cells.extend(row.report.tar_at_far.iter().map(|t| {
                if t.reachable {
                    format!("{:.6}", t.tar)
                } else {
                    format!("{:.6}*", t.tar)
                }
            }));
            cells.push(row.report.map.map_or("".into(), |m| format!("{m:.6}")));
            cells.extend(CMC_RANKS.iter().map(|&r| {
                row.report
                    .cmc
                    .get(r - 1)
                    .or(row.report.cmc.last())
                    .map_or("".into(), |c| format!("{c:.6}"))
            }));
            cells
        })
        .collect();
    (header, body)
}

pub fn write_comparison_csv<W: Write>(rows: &[StrategyRow], writer: W) -> Result<()> {
    let (header, body) = comparison_columns(rows);
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&header)?;
    for cells in body {
        w.write_record(cells.iter().map(|c| c.trim_end_matches('*')))?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table; `*` marks FAR targets below one impostor.
pub fn format_comparison_table(rows: &[StrategyRow]) -> String {
    let (header, body) = comparison_columns(rows);
    let widths: Vec<usize> = (0..header.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header);
    for cells in &body {
        line(cells);
    }
    let _ = writeln!(out, "ties: {TIE_BREAK}");
    out
}

/// Single-report CSV: one `metric,value` row per scalar.
pub fn write_report_csv<W: Write>(report: &EvalReport, writer: W) -> Result<()> {
    let mut rows: BTreeMap<String, String> = BTreeMap::new();
    rows.insert("accuracy".into(), fmt_real(report.best_accuracy));
    rows.insert("accuracy_threshold".into(), fmt_real(report.accuracy_threshold));
    for t in &report.tar_at_far {
        rows.insert(format!("tar@far={:e}", t.far_target), fmt_real(t.tar));
        rows.insert(format!("threshold@far={:e}", t.far_target), fmt_real(t.threshold));
        rows.insert(format!("reachable@far={:e}", t.far_target), t.reachable.to_string());
    }
    if let Some(m) = report.map {
        rows.insert("map".into(), fmt_real(m));
    }
    for (i, c) in report.cmc.iter().enumerate() {
        rows.insert(format!("cmc@{:04}", i + 1), fmt_real(*c));
    }
    rows.insert("tie_break".into(), report.tie_break.into());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v])?;
    }
    w.flush()?;
    Ok(())
}
