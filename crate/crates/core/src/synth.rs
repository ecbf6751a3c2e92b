//! Seeded synthetic corpora with known per-element corruption.
//!
//! Class centers lie on a sphere of radius `centroid_scale`. Each center is
//! the normalized blend `shared_weight * u + (1 - shared_weight) * v_k` of a
//! direction `u` common to all classes and a class direction `v_k`; the
//! directions are orthonormal whenever `k_classes + 1 <= d_emb`. An element is
//! its class center plus isotropic Gaussian noise whose per-coordinate
//! standard deviation is the element's noise level.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{fmt_real, Corpus, ElementRecord};
use crate::error::{DdlError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub k_classes: usize,
    pub elements_per_class: usize,
    pub groups_per_class: usize,
    pub d_emb: usize,
    /// Either `d_emb` (raw input is the embedding) or `2 * d_emb` (embedding
    /// followed by an independently corrupted copy of the center).
    pub d_raw: usize,
    pub centroid_scale: f64,
    pub shared_weight: f64,
    /// `noise_levels[0]` is the clean level; corrupted elements draw
    /// uniformly from the rest.
    pub noise_levels: Vec<f64>,
    pub corruption_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k_classes: 10,
            elements_per_class: 200,
            groups_per_class: 50,
            d_emb: 16,
            d_raw: 16,
            centroid_scale: 2.5,
            shared_weight: 0.2,
            noise_levels: vec![0.1, 2.0],
            corruption_prob: 0.4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Default layout with both noise levels below the class separation.
    pub fn low_noise() -> Self {
        Self {
            noise_levels: vec![0.1, 0.3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DdlError::Config(m.to_string()));
        if self.k_classes < 2 {
            return fail("k_classes must be at least 2");
        }
        if self.elements_per_class == 0 || self.d_emb == 0 {
            return fail("elements_per_class and d_emb must be positive");
        }
        if self.groups_per_class == 0 || self.groups_per_class > self.elements_per_class {
            return fail("groups_per_class must be in 1..=elements_per_class");
        }
        if self.d_raw != self.d_emb && self.d_raw != 2 * self.d_emb {
            return fail("d_raw must equal d_emb or 2 * d_emb");
        }
        if !(self.centroid_scale > 0.0 && self.centroid_scale.is_finite()) {
            return fail("centroid_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.shared_weight) {
            return fail("shared_weight must be in [0, 1)");
        }
        if self.noise_levels.is_empty() {
            return fail("noise_levels must not be empty");
        }
        if self.noise_levels.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return fail("noise levels must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return fail("corruption_prob must be in [0, 1]");
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `count` unit vectors, orthonormal when `count <= d`.
fn directions(rng: &mut ChaCha8Rng, count: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(rng, d);
        if count <= d {
            for b in &out {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        if normalize(&mut v) > 1e-8 {
            out.push(v);
        }
    }
    out
}

/// Class centers of `config`, drawn first from the seeded stream.
fn class_centers(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Vec<Vec<f64>> {
    let dirs = directions(rng, config.k_classes + 1, config.d_emb);
    let (u, rest) = dirs.split_first().expect("at least one direction");
    let w = config.shared_weight;
    rest.iter()
        .map(|v| {
            let mut c: Vec<f64> = u.iter().zip(v).map(|(a, b)| w * a + (1.0 - w) * b).collect();
            normalize(&mut c);
            c.iter_mut().for_each(|x| *x *= config.centroid_scale);
            c
        })
        .collect()
}

pub fn element_id(class: usize, j: usize) -> String {
    format!("c{class:03}_e{j:04}")
}

pub fn group_id(class: usize, g: usize) -> String {
    format!("c{class:03}_g{g:03}")
}

/// Generates a labeled corpus and each element's noise level, in corpus order.
///
/// Element `j` of class `k` joins group `j % groups_per_class` of that class.
pub fn generate<T: Scalar>(config: &SynthConfig) -> Result<(Corpus<T>, Vec<f64>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let centers = class_centers(&mut rng, config);
    let (clean, corrupt) = config.noise_levels.split_first().expect("validated non-empty");
    let total = config.k_classes * config.elements_per_class;
    let mut elements = Vec::with_capacity(total);
    let mut levels = Vec::with_capacity(total);
    let corrupted_sample = |c: &[f64], level: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        c.iter().map(|&x| x + level * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    for (k, center) in centers.iter().enumerate() {
        for j in 0..config.elements_per_class {
            let draw: f64 = rng.random();
            let level = if draw < config.corruption_prob && !corrupt.is_empty() {
                corrupt[rng.random_range(0..corrupt.len())]
            } else {
                *clean
            };
            let embedding = corrupted_sample(center, level, &mut rng);
            let mut raw_input = embedding.clone();
            if config.d_raw == 2 * config.d_emb {
                raw_input.extend(corrupted_sample(center, level, &mut rng));
            }
            elements.push(ElementRecord {
                element_id: element_id(k, j),
                group_id: group_id(k, j % config.groups_per_class),
                class_label: Some(k),
                raw_input: raw_input.into_iter().map(T::of).collect(),
                embedding: embedding.into_iter().map(T::of).collect(),
            });
            levels.push(level);
        }
    }
    let corpus = Corpus::with_classes(elements, config.k_classes)?;
    Ok((corpus, levels))
}

/// Whether the `g`-th group of a class falls in a held-out share of `fraction`.
pub fn is_held_out(g: usize, fraction: f64) -> bool {
    ((g + 1) as f64 * fraction).floor() > (g as f64 * fraction).floor()
}

/// Splits by whole groups into `(train, test)`.
///
/// Groups are indexed within their class in order of first appearance, and
/// group `g` goes to the test side when [`is_held_out`] says so. Unlabeled
/// groups are indexed together as one class.
pub fn split_holdout<T: Scalar>(corpus: &Corpus<T>, fraction: f64) -> Result<(Corpus<T>, Corpus<T>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(DdlError::Config("holdout fraction must be in (0, 1)".into()));
    }
    let mut per_class: HashMap<Option<usize>, usize> = HashMap::new();
    let mut test_groups: HashMap<String, bool> = HashMap::new();
    for g in corpus.groups() {
        let idx = per_class.entry(g.class_label()).or_default();
        test_groups.insert(g.group_id.to_string(), is_held_out(*idx, fraction));
        *idx += 1;
    }
    let held = test_groups.values().filter(|&&t| t).count();
    if held == 0 || held == test_groups.len() {
        return Err(DdlError::Protocol(format!(
            "holdout fraction {fraction} leaves one side of the split empty"
        )));
    }
    let train = corpus.filter(|e| !test_groups[&e.group_id])?;
    let test = corpus.filter(|e| test_groups[&e.group_id])?;
    Ok((train, test))
}

pub fn write_ground_truth<T: Scalar, W: Write>(corpus: &Corpus<T>, levels: &[f64], writer: W) -> Result<()> {
    if levels.len() != corpus.len() {
        return Err(DdlError::Domain(format!(
            "{} noise levels for {} elements",
            levels.len(),
            corpus.len()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["element_id", "noise_level"])?;
    for (e, l) in corpus.elements().iter().zip(levels) {
        w.write_record([e.element_id.clone(), fmt_real(*l)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_ground_truth<T: Scalar>(corpus: &Corpus<T>, levels: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_ground_truth(corpus, levels, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::score_corpus;

    fn small() -> SynthConfig {
        SynthConfig {
            k_classes: 3,
            elements_per_class: 12,
            groups_per_class: 3,
            d_emb: 6,
            d_raw: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn layout_and_ids() {
        let (c, levels) = generate::<f64>(&small()).unwrap();
        assert_eq!(c.len(), 36);
        assert_eq!(levels.len(), 36);
        assert_eq!(c.groups().len(), 9);
        let e = &c.elements()[13];
        assert_eq!(e.element_id, "c001_e0001");
        assert_eq!(e.group_id, "c001_g001");
        assert_eq!(e.raw_input, e.embedding);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate::<f64>(&small()).unwrap();
        let b = generate::<f64>(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate::<f64>(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn centers_sit_on_the_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small();
        let centers = class_centers(&mut rng, &cfg);
        for c in &centers {
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - cfg.centroid_scale).abs() < 1e-12);
        }
        // equal pairwise cosine w^2 / (w^2 + (1-w)^2) for orthonormal directions
        let w = cfg.shared_weight;
        let expect = w * w / (w * w + (1.0 - w) * (1.0 - w));
        let dot: f64 = centers[0].iter().zip(&centers[1]).map(|(a, b)| a * b).sum();
        assert!((dot / cfg.centroid_scale.powi(2) - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_gives_constant_scores() {
        let cfg = SynthConfig { noise_levels: vec![0.0], ..small() };
        let (c, _) = generate::<f64>(&cfg).unwrap();
        let scores = score_corpus(&c).unwrap();
        assert!(scores.iter().all(|r| r.d_score == 0.5));
    }

    #[test]
    fn doubled_raw_input() {
        let cfg = SynthConfig { d_raw: 12, ..small() };
        let (c, _) = generate::<f64>(&cfg).unwrap();
        let e = &c.elements()[0];
        assert_eq!(e.raw_input.len(), 12);
        assert_eq!(&e.raw_input[..6], e.embedding.as_slice());
        assert!(generate::<f64>(&SynthConfig { d_raw: 7, ..small() }).is_err());
    }

    #[test]
    fn noisier_elements_score_lower() {
        let (c, levels) = generate::<f64>(&SynthConfig::default()).unwrap();
        let scores = score_corpus(&c).unwrap();
        let mean = |lvl: f64| {
            let v: Vec<f64> = scores
                .iter()
                .zip(&levels)
                .filter(|(_, l)| **l == lvl)
                .map(|(r, _)| r.d_score)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(2.0) < mean(0.1));
    }

    #[test]
    fn holdout_takes_every_fifth_group() {
        assert_eq!((0..10).filter(|&g| is_held_out(g, 0.2)).collect::<Vec<_>>(), vec![4, 9]);
        let (c, _) = generate::<f64>(&SynthConfig::default()).unwrap();
        let (train, test) = split_holdout(&c, 0.2).unwrap();
        assert_eq!(train.len(), 1600);
        assert_eq!(test.len(), 400);
        assert!(test.elements().iter().all(|e| e.group_id.ends_with('4') || e.group_id.ends_with('9')));
    }
}
