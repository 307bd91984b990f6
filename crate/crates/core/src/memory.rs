//! Bi-level balanced replay memory: the budget is split evenly over
//! classes, then each class quota evenly over that class's components.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{ClassId, ModelBank};
use crate::streams::{Example, ExampleId};
use crate::trainer::AssignmentTable;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRecord {
    pub id: ExampleId,
    pub class: ClassId,
    /// Component the example was assigned to when it was selected.
    pub component: usize,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemoryStatus {
    Ok,
    /// Fewer slots than classes; some classes got no exemplar.
    InsufficientBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    pub budget: usize,
    pub records: Vec<MemoryRecord>,
    pub status: MemoryStatus,
}

impl MemoryBuffer {
    pub fn empty(budget: usize) -> Self {
        Self { budget, records: Vec::new(), status: MemoryStatus::Ok }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.records
            .iter()
            .map(|r| Example { id: r.id, class: r.class, input: r.input.clone() })
            .collect()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.class).or_insert(0) += 1;
        }
        m
    }

    /// Selected count per component of each class; components with no
    /// exemplar are reported as zero when `bank` is given.
    pub fn component_counts(&self, bank: &ModelBank) -> BTreeMap<ClassId, Vec<usize>> {
        let mut m: BTreeMap<ClassId, Vec<usize>> =
            bank.mixtures().map(|mx| (mx.class_id, vec![0; mx.num_components()])).collect();
        for r in &self.records {
            if let Some(v) = m.get_mut(&r.class) {
                if r.component < v.len() {
                    v[r.component] += 1;
                }
            }
        }
        m
    }
}

/// Splits `total` into `parts` near-equal integer quotas; the remainder
/// goes one each to the first `total % parts` positions of `order`.
fn split_quota(total: usize, parts: usize, order: &[usize]) -> Vec<usize> {
    let mut q = vec![total / parts; parts];
    for &i in order.iter().take(total % parts) {
        q[i] += 1;
    }
    q
}

/// Builds the next memory from the full training data of a session.
pub fn select_memory<R: Rng + ?Sized>(
    bank: &ModelBank,
    dataset: &[Example],
    assignments: &AssignmentTable,
    budget: usize,
    rng: &mut R,
) -> Result<MemoryBuffer> {
    if bank.is_empty() {
        return Err(Error::EmptyModel);
    }
    // candidates[class][component] = indices into dataset, ascending id
    let mut candidates: BTreeMap<ClassId, Vec<Vec<usize>>> =
        bank.mixtures().map(|m| (m.class_id, vec![Vec::new(); m.num_components()])).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset[i].id);
    for i in order {
        let ex = &dataset[i];
        let comps = candidates.get_mut(&ex.class).ok_or(Error::UnknownClass(ex.class))?;
        let k = assignments
            .get(ex.id)
            .ok_or_else(|| Error::Domain(format!("example {} has no component assignment", ex.id)))?;
        if k >= comps.len() {
            return Err(Error::Domain(format!("assignment {k} out of range for class {}", ex.class)));
        }
        comps[k].push(i);
    }

    let n_classes = candidates.len();
    let status = if budget < n_classes { MemoryStatus::InsufficientBudget } else { MemoryStatus::Ok };
    let class_order: Vec<usize> = (0..n_classes).collect();
    let class_quota = split_quota(budget, n_classes, &class_order);

    let mut records = Vec::new();
    for ((class, comps), quota) in candidates.iter().zip(class_quota) {
        let k = comps.len();
        if quota == 0 || k == 0 {
            continue;
        }
        let mut by_size: Vec<usize> = (0..k).collect();
        by_size.sort_by(|&a, &b| comps[b].len().cmp(&comps[a].len()).then(a.cmp(&b)));
        let comp_quota = split_quota(quota, k, &by_size);
        let mut take: Vec<usize> = comp_quota.iter().zip(comps).map(|(q, c)| (*q).min(c.len())).collect();
        let mut shortfall: usize = comp_quota.iter().zip(&take).map(|(q, t)| q - t).sum();
        while shortfall > 0 {
            let mut best: Option<(usize, usize)> = None;
            for (i, c) in comps.iter().enumerate() {
                let room = c.len() - take[i];
                if room > 0 && best.is_none_or(|(_, r)| room > r) {
                    best = Some((i, room));
                }
            }
            match best {
                Some((i, _)) => {
                    take[i] += 1;
                    shortfall -= 1;
                }
                None => break,
            }
        }
        for (component, (cands, &n)) in comps.iter().zip(&take).enumerate() {
            let mut picked = rand::seq::index::sample(rng, cands.len(), n).into_vec();
            picked.sort_unstable();
            for p in picked {
                let ex = &dataset[cands[p]];
                records.push(MemoryRecord { id: ex.id, class: *class, component, input: ex.input.clone() });
            }
        }
    }
    Ok(MemoryBuffer { budget, records, status })
}
