//! Mixture expansion at session start and agglomerative reduction after
//! training.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{ClassId, ClassMixture, ModelBank};
use crate::vmf::{self, normalize, sample_uniform, UnitVector};

/// Components added per incoming class.
pub const DEFAULT_EXPANSION: usize = 30;

/// Reduction settings. Distance between components is `1 - cos`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub delta: f64,
    pub min_components: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self { delta: 0.7, min_components: 1 }
    }
}

impl ReductionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 2.0) {
            return Err(Error::Config(format!("delta must be in (0, 2), got {}", self.delta)));
        }
        if self.min_components == 0 {
            return Err(Error::Config("min_components must be >= 1".into()));
        }
        Ok(())
    }
}

/// Count and vector sum of the unit features assigned to a component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub count: usize,
    pub sum: Vec<f64>,
}

impl ComponentStats {
    pub fn empty(dim: usize) -> Self {
        Self { count: 0, sum: vec![0.0; dim] }
    }

    pub fn add(&mut self, v: &UnitVector) {
        self.count += 1;
        for (s, x) in self.sum.iter_mut().zip(v.as_slice()) {
            *s += x;
        }
    }
}

/// Per class, stats for every component in index order.
pub type StatsTable = BTreeMap<ClassId, Vec<ComponentStats>>;

/// Empty stats for every component of `bank`.
pub fn empty_stats(bank: &ModelBank) -> StatsTable {
    bank.mixtures()
        .map(|m| (m.class_id, vec![ComponentStats::empty(bank.dim()); m.num_components()]))
        .collect()
}

/// Adds `m` uniformly drawn components to each incoming class, creating
/// mixtures for classes not yet in the bank.
pub fn expand<R: Rng + ?Sized>(
    bank: &mut ModelBank,
    incoming: &BTreeSet<ClassId>,
    m: usize,
    rng: &mut R,
) -> Result<()> {
    if m == 0 {
        return Err(Error::Config("expansion size m must be >= 1".into()));
    }
    let d = bank.dim();
    for &class in incoming {
        let fresh: Vec<UnitVector> = (0..m).map(|_| sample_uniform(d, rng)).collect();
        if bank.contains(class) {
            let mix = bank.mixture_mut(class)?;
            for u in fresh {
                mix.push_mean(u);
            }
        } else {
            bank.insert(ClassMixture::new(class, fresh))?;
        }
    }
    Ok(())
}

/// Merges two clusters: the new mean is the normalized average of all
/// member features.
pub fn merge_pair(a: &ComponentStats, b: &ComponentStats) -> Result<(UnitVector, ComponentStats)> {
    let n = a.count + b.count;
    if n == 0 {
        return Err(Error::Domain("cannot merge two empty components".into()));
    }
    let sum: Vec<f64> = a.sum.iter().zip(&b.sum).map(|(x, y)| x + y).collect();
    if vmf::norm(&sum) < vmf::MIN_NORM {
        return Err(Error::DegenerateMerge);
    }
    let avg: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mean = normalize(&avg).map_err(|_| Error::DegenerateMerge)?;
    Ok((mean, ComponentStats { count: n, sum }))
}

/// Reduction outcome for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReduction {
    pub class_id: ClassId,
    pub before: usize,
    pub after: usize,
    /// Original component index to output component index.
    pub merge_map: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub classes: Vec<ClassReduction>,
}

impl ReductionReport {
    /// One line per class: `class c: K before -> K after map [..]`.
    pub fn lines(&self) -> Vec<String> {
        self.classes
            .iter()
            .map(|c| format!("class {}: {} -> {} map {:?}", c.class_id, c.before, c.after, c.merge_map))
            .collect()
    }
}

struct Cluster {
    mean: UnitVector,
    stats: ComponentStats,
    members: Vec<usize>,
}

/// Drops empty components, then repeatedly merges the closest pair of
/// components within each class while its distance is below `delta`.
pub fn reduce(bank: &ModelBank, stats: &StatsTable, cfg: &ReductionConfig) -> Result<(ModelBank, ReductionReport)> {
    cfg.validate()?;
    let mut out = bank.clone();
    let mut report = ReductionReport::default();
    for mix in bank.mixtures() {
        let class = mix.class_id;
        let cs = stats
            .get(&class)
            .filter(|s| s.len() == mix.num_components())
            .ok_or_else(|| Error::Config(format!("component stats do not cover class {class}")))?;
        let (means, merge_map) = reduce_class(mix.means(), cs, cfg)?;
        report.classes.push(ClassReduction {
            class_id: class,
            before: mix.num_components(),
            after: means.len(),
            merge_map,
        });
        out.mixture_mut(class)?.set_means(means);
    }
    Ok((out, report))
}

fn reduce_class(
    means: &[UnitVector],
    stats: &[ComponentStats],
    cfg: &ReductionConfig,
) -> Result<(Vec<UnitVector>, Vec<usize>)> {
    let mut clusters: Vec<Cluster> = means
        .iter()
        .zip(stats)
        .enumerate()
        .filter(|(_, (_, s))| s.count > 0)
        .map(|(i, (m, s))| Cluster { mean: m.clone(), stats: s.clone(), members: vec![i] })
        .collect();
    if clusters.is_empty() {
        let mut keep = 0;
        for (i, s) in stats.iter().enumerate() {
            if s.count > stats[keep].count {
                keep = i;
            }
        }
        return Ok((vec![means[keep].clone()], vec![0; means.len()]));
    }

    while clusters.len() > cfg.min_components {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..clusters.len() {
            for j in (i + 1)..clusters.len() {
                let dist = 1.0 - clusters[i].mean.dot(clusters[j].mean.as_slice());
                if best.map_or(true, |(_, _, b)| dist < b) {
                    best = Some((i, j, dist));
                }
            }
        }
        match best {
            Some((i, j, dist)) if dist < cfg.delta => {
                let removed = clusters.remove(j);
                let (mean, st) = merge_pair(&clusters[i].stats, &removed.stats)?;
                let target = &mut clusters[i];
                target.mean = mean;
                target.stats = st;
                target.members.extend(removed.members);
            }
            _ => break,
        }
    }

    let mut map = vec![usize::MAX; means.len()];
    for (out, c) in clusters.iter().enumerate() {
        for &i in &c.members {
            map[i] = out;
        }
    }
    // dropped empty components join the nearest surviving one
    for (i, slot) in map.iter_mut().enumerate() {
        if *slot == usize::MAX {
            let mut best = 0;
            let mut best_dot = f64::NEG_INFINITY;
            for (o, c) in clusters.iter().enumerate() {
                let s = c.mean.dot(means[i].as_slice());
                if s > best_dot {
                    best_dot = s;
                    best = o;
                }
            }
            *slot = best;
        }
    }
    Ok((clusters.into_iter().map(|c| c.mean).collect(), map))
}
