//! Accuracy, forgetting and domain purity.

use std::collections::BTreeMap;

use crate::backbone::{forward, BackboneParams};
use crate::error::{Error, Result};
use crate::mixture::{ClassId, ModelBank};
use crate::streams::{DomainId, DomainLedger, Example};
use crate::trainer::AssignmentTable;

/// `acc[i][j]`: accuracy (%) after session `i` on the eval pool of session `j <= i`.
pub type AccuracyMatrix = Vec<Vec<f64>>;

/// Predicted class of each example, in input order.
pub fn predictions(bank: &ModelBank, params: &BackboneParams, data: &[Example]) -> Result<Vec<ClassId>> {
    data.iter().map(|ex| bank.predict(&forward(params, &ex.input)?)).collect()
}

/// Top-1 accuracy in percent.
pub fn accuracy(bank: &ModelBank, params: &BackboneParams, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("accuracy of an empty evaluation pool".into()));
    }
    let preds = predictions(bank, params, data)?;
    let hits = preds.iter().zip(data).filter(|(p, ex)| **p == ex.class).count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// Mean change of accuracy on the previous session's pool after each new
/// session. Negative values mean forgetting; `None` for fewer than two sessions.
pub fn forgetting(acc: &AccuracyMatrix) -> Option<f64> {
    let n = acc.len();
    if n < 2 {
        return None;
    }
    let sum: f64 = (1..n).map(|i| acc[i][i - 1] - acc[i - 1][i - 1]).sum();
    Some(sum / (n - 1) as f64)
}

/// Per-component majority-domain fraction, size-weighted within a class and
/// averaged over classes. Needs a domain label for every example.
pub fn purity(assignments: &AssignmentTable, data: &[Example], ledger: &DomainLedger) -> Result<f64> {
    // class -> component -> domain -> count
    let mut tally: BTreeMap<ClassId, BTreeMap<usize, BTreeMap<DomainId, usize>>> = BTreeMap::new();
    for ex in data {
        let k = assignments
            .get(ex.id)
            .ok_or_else(|| Error::Domain(format!("example {} has no component assignment", ex.id)))?;
        let d = ledger.domain(ex.id).ok_or(Error::PurityUnavailable(ex.id))?;
        *tally.entry(ex.class).or_default().entry(k).or_default().entry(d).or_insert(0) += 1;
    }
    if tally.is_empty() {
        return Err(Error::Domain("purity of an empty dataset".into()));
    }
    let per_class: Vec<f64> = tally
        .values()
        .map(|comps| {
            let total: usize = comps.values().flat_map(|d| d.values()).sum();
            let majority: usize = comps.values().map(|d| d.values().copied().max().unwrap_or(0)).sum();
            majority as f64 / total as f64
        })
        .collect();
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(rows: &[(u64, ClassId, usize, DomainId)]) -> (AssignmentTable, Vec<Example>, DomainLedger) {
        let mut a = AssignmentTable::default();
        let mut l = DomainLedger::default();
        let mut data = Vec::new();
        for &(id, c, k, d) in rows {
            a.insert(id, k);
            l.insert(id, Some(d));
            data.push(Example { id, class: c, input: vec![1.0, 0.0] });
        }
        (a, data, l)
    }

    #[test]
    fn purity_examples() {
        let (a, d, l) = setup(&[(0, 0, 0, 0), (1, 0, 0, 0), (2, 0, 1, 1), (3, 0, 1, 1)]);
        assert_eq!(purity(&a, &d, &l).unwrap(), 1.0);
        let (a, d, l) = setup(&[(0, 0, 0, 0), (1, 0, 0, 1), (2, 0, 0, 0), (3, 0, 0, 1)]);
        assert_eq!(purity(&a, &d, &l).unwrap(), 0.5);
        // class 0: 3/4, class 1: 1
        let (a, d, l) = setup(&[(0, 0, 0, 0), (1, 0, 0, 0), (2, 0, 0, 1), (3, 0, 1, 2), (4, 1, 0, 5)]);
        assert_eq!(purity(&a, &d, &l).unwrap(), 0.875);
    }

    #[test]
    fn purity_needs_labels() {
        let (a, d, mut l) = setup(&[(0, 0, 0, 0), (1, 0, 0, 0)]);
        l.insert(1, None);
        assert!(matches!(purity(&a, &d, &l), Err(Error::PurityUnavailable(1))));
    }

    #[test]
    fn forgetting_examples() {
        assert_eq!(forgetting(&vec![vec![90.0]]), None);
        let acc = vec![vec![90.0], vec![80.0, 70.0], vec![60.0, 65.0, 50.0]];
        // (80 - 90 + 65 - 70) / 2
        assert_eq!(forgetting(&acc), Some(-7.5));
    }
}
