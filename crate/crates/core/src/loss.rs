//! Training objective: inter-class and intra-class classification,
//! intra-class distillation against the previous session's model, and the
//! component regularizer. Values and gradients with respect to the unit
//! feature and every raw mean coordinate are produced together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{log_sum_exp, ClassId, ModelBank};
use crate::vmf::dot;

/// Coefficients of the current M-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub eta: f64,
}

/// Unweighted loss terms. `inter`, `intra` and `distill` are batch means
/// (or sums, depending on the caller).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub inter: f64,
    pub intra: f64,
    pub distill: f64,
    pub reg: f64,
}

impl LossBreakdown {
    pub fn clf(&self, lambda: f64) -> f64 {
        self.inter + lambda * self.intra
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        self.clf(w.lambda) + w.beta * self.distill + w.eta * self.reg
    }
}

/// Log component posteriors of the frozen previous-session model for one
/// input: for every class the old model knew, `log P_old(z | y = c, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPosterior {
    pub classes: Vec<(ClassId, Vec<f64>)>,
}

/// One training input with its fixed hard assignment.
#[derive(Debug, Clone, Copy)]
pub struct LossExample<'a> {
    pub input: &'a [f64],
    pub class: ClassId,
    pub component: usize,
    pub teacher: Option<&'a TeacherPosterior>,
}

/// Raw (not necessarily unit) mean coordinates of a bank, class-major in
/// ascending class id order.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTable {
    pub dim: usize,
    pub kappa: f64,
    pub classes: Vec<ClassId>,
    /// Per class, `K x d` row-major.
    pub means: Vec<Vec<f64>>,
}

impl From<&ModelBank> for MeanTable {
    fn from(bank: &ModelBank) -> Self {
        let classes: Vec<ClassId> = bank.classes().collect();
        let means = bank
            .mixtures()
            .map(|m| m.means().iter().flat_map(|u| u.as_slice().iter().copied()).collect())
            .collect();
        Self { dim: bank.dim(), kappa: bank.kappa(), classes, means }
    }
}

impl MeanTable {
    pub fn class_index(&self, class: ClassId) -> Result<usize> {
        self.classes.binary_search(&class).map_err(|_| Error::UnknownClass(class))
    }

    pub fn num_components(&self, ci: usize) -> usize {
        self.means[ci].len() / self.dim
    }

    pub fn mean(&self, ci: usize, k: usize) -> &[f64] {
        &self.means[ci][k * self.dim..(k + 1) * self.dim]
    }

    pub fn zeros_like(&self) -> Vec<(ClassId, Vec<f64>)> {
        self.classes.iter().zip(&self.means).map(|(c, m)| (*c, vec![0.0; m.len()])).collect()
    }
}

pub(crate) struct ExampleTerms {
    pub inter: f64,
    pub intra: f64,
    pub distill: f64,
    pub d_feature: Vec<f64>,
}

/// Per-example loss terms; adds the weighted mean gradients into
/// `mean_grad` and returns the weighted gradient wrt the unit feature.
pub(crate) fn example_terms(
    table: &MeanTable,
    feature: &[f64],
    ex: &LossExample<'_>,
    w: &LossWeights,
    mean_grad: &mut [(ClassId, Vec<f64>)],
) -> Result<ExampleTerms> {
    let kappa = table.kappa;
    let y = table.class_index(ex.class)?;
    let ky = table.num_components(y);
    if ex.component >= ky {
        return Err(Error::Domain(format!(
            "assignment {} out of range for class {} with {} components",
            ex.component, ex.class, ky
        )));
    }
    // scaled scores s[c][k] and their gradient buffer
    let scores: Vec<Vec<f64>> = (0..table.classes.len())
        .map(|ci| (0..table.num_components(ci)).map(|k| kappa * dot(table.mean(ci, k), feature)).collect())
        .collect();
    let mut d_scores: Vec<Vec<f64>> = scores.iter().map(|s| vec![0.0; s.len()]).collect();
    let class_lse: Vec<f64> = scores.iter().map(|s| log_sum_exp(s)).collect();
    let class_log: Vec<f64> =
        class_lse.iter().zip(&scores).map(|(l, s)| l - (s.len() as f64).ln()).collect();
    let all = log_sum_exp(&class_log);

    let inter = -(class_log[y] - all);
    for (ci, s) in scores.iter().enumerate() {
        let pc = (class_log[ci] - all).exp() - if ci == y { 1.0 } else { 0.0 };
        for (k, sk) in s.iter().enumerate() {
            d_scores[ci][k] += pc * (sk - class_lse[ci]).exp();
        }
    }

    let intra = -(scores[y][ex.component] - class_lse[y]);
    if w.lambda != 0.0 {
        for (k, sk) in scores[y].iter().enumerate() {
            let ind = if k == ex.component { 1.0 } else { 0.0 };
            d_scores[y][k] += w.lambda * ((sk - class_lse[y]).exp() - ind);
        }
    }

    let mut distill = 0.0;
    if let Some(teacher) = ex.teacher {
        let nc = teacher.classes.len() as f64;
        for (class, old_log) in &teacher.classes {
            let ci = table.class_index(*class).map_err(|_| Error::ModelRegression(*class))?;
            let k_old = old_log.len();
            if k_old > scores[ci].len() {
                return Err(Error::ModelRegression(*class));
            }
            // current posterior restricted to inherited components
            let inherited = &scores[ci][..k_old];
            let lse = log_sum_exp(inherited);
            let logr: Vec<f64> = inherited.iter().map(|s| s - lse).collect();
            let kl: f64 = logr.iter().zip(old_log).map(|(lr, lq)| lr.exp() * (lr - lq)).sum();
            distill += kl / nc;
            if w.beta != 0.0 {
                for k in 0..k_old {
                    let r = logr[k].exp();
                    d_scores[ci][k] += w.beta / nc * r * ((logr[k] - old_log[k]) - kl);
                }
            }
        }
    }

    for (term, v) in [("inter", inter), ("intra", intra), ("distill", distill)] {
        if !v.is_finite() {
            return Err(Error::Numerical { term });
        }
    }

    let d = table.dim;
    let mut d_feature = vec![0.0; d];
    for (ci, ds) in d_scores.iter().enumerate() {
        let g = &mut mean_grad[ci].1;
        for (k, &dsk) in ds.iter().enumerate() {
            if dsk == 0.0 {
                continue;
            }
            let mean = table.mean(ci, k);
            for j in 0..d {
                d_feature[j] += dsk * kappa * mean[j];
                g[k * d + j] += dsk * kappa * feature[j];
            }
        }
    }
    Ok(ExampleTerms { inter, intra, distill, d_feature })
}

/// Component regularizer and its gradient wrt each raw mean.
pub fn reg_loss_and_grad(table: &MeanTable) -> (f64, Vec<(ClassId, Vec<f64>)>) {
    let mut grad = table.zeros_like();
    if table.classes.is_empty() {
        return (0.0, grad);
    }
    let nc = table.classes.len() as f64;
    let d = table.dim;
    let mut total = 0.0;
    for ci in 0..table.classes.len() {
        let k = table.num_components(ci);
        if k < 2 {
            continue;
        }
        let wpair = 1.0 / (k * (k - 1)) as f64 / nc;
        let mut sum = vec![0.0; d];
        for i in 0..k {
            for (s, m) in sum.iter_mut().zip(table.mean(ci, i)) {
                *s += m;
            }
        }
        for i in 0..k {
            let mi = table.mean(ci, i);
            for j in (i + 1)..k {
                total -= wpair * dot(mi, table.mean(ci, j));
            }
            let g = &mut grad[ci].1[i * d..(i + 1) * d];
            for ((gj, s), m) in g.iter_mut().zip(&sum).zip(mi) {
                *gj = -wpair * (s - m);
            }
        }
    }
    (total, grad)
}

/// Component regularizer of a bank.
pub fn reg_loss(bank: &ModelBank) -> f64 {
    reg_loss_and_grad(&MeanTable::from(bank)).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::ClassMixture;
    use crate::vmf::normalize;
    use approx::assert_relative_eq;

    fn bank(classes: &[(ClassId, Vec<Vec<f64>>)]) -> ModelBank {
        let d = classes[0].1[0].len();
        let mut b = ModelBank::new(d, 1.0).unwrap();
        for (c, ms) in classes {
            b.insert(ClassMixture::new(*c, ms.iter().map(|m| normalize(m).unwrap()).collect())).unwrap();
        }
        b
    }

    #[test]
    fn reg_examples() {
        let b = bank(&[(0, vec![vec![1.0, 0.0]]), (1, vec![vec![0.0, 1.0]])]);
        assert_eq!(reg_loss(&b), 0.0);
        let b = bank(&[(0, vec![vec![1.0, 0.0], vec![0.0, 1.0]])]);
        assert_eq!(reg_loss(&b), 0.0);
        let b = bank(&[(0, vec![vec![1.0, 0.0], vec![1.0, 0.0]])]);
        assert_relative_eq!(reg_loss(&b), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn reg_is_bounded_per_class() {
        let b = bank(&[(0, vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]])]);
        let r = reg_loss(&b);
        assert!((-0.5..=0.5).contains(&r));
    }

    #[test]
    fn assignment_out_of_range_is_an_error() {
        let b = bank(&[(0, vec![vec![1.0, 0.0]])]);
        let t = MeanTable::from(&b);
        let mut g = t.zeros_like();
        let ex = LossExample { input: &[1.0, 0.0], class: 0, component: 1, teacher: None };
        let w = LossWeights { lambda: 0.1, beta: 1.0, eta: 0.1 };
        assert!(example_terms(&t, &[1.0, 0.0], &ex, &w, &mut g).is_err());
    }
}
