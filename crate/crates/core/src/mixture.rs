//! Per-class vMF mixtures with a shared concentration and uniform
//! component prior.
//!
//! Two class decision paths exist. [`ModelBank::predict`] takes the class
//! of the single closest component (max-pooling), while
//! [`ModelBank::class_posterior`] averages exponentiated scores over each
//! class's components (mean-pooling). The posterior is what the training
//! loss uses; prediction uses the closest component. They can disagree.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vmf::UnitVector;

pub type ClassId = u32;

/// Default shared concentration.
pub const DEFAULT_KAPPA: f64 = 16.0;

/// `log(sum(exp(xs)))` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs` computed from log-space, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
}

/// One class's mixture: `K_y` component means, prior fixed to `1/K_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture {
    pub class_id: ClassId,
    means: Vec<UnitVector>,
}

impl ClassMixture {
    pub fn new(class_id: ClassId, means: Vec<UnitVector>) -> Self {
        Self { class_id, means }
    }

    pub fn means(&self) -> &[UnitVector] {
        &self.means
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn push_mean(&mut self, mean: UnitVector) {
        self.means.push(mean);
    }

    pub fn set_means(&mut self, means: Vec<UnitVector>) {
        self.means = means;
    }

    pub fn set_mean(&mut self, k: usize, mean: UnitVector) {
        self.means[k] = mean;
    }

    /// Dot product of `v` with every component mean.
    pub fn dots(&self, v: &[f64]) -> Vec<f64> {
        self.means.iter().map(|m| m.dot(v)).collect()
    }

    /// Index of the closest mean, lowest index on ties.
    pub fn closest(&self, v: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, m) in self.means.iter().enumerate() {
            let s = m.dot(v);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        best.map(|(k, _)| k)
    }

    /// `log(1/K sum_k exp(kappa * <mu_k, v>))`.
    pub fn log_score(&self, v: &[f64], kappa: f64) -> f64 {
        let scaled: Vec<f64> = self.means.iter().map(|m| kappa * m.dot(v)).collect();
        log_sum_exp(&scaled) - (self.means.len() as f64).ln()
    }
}

/// All class mixtures observed so far, sharing dimension and `kappa`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBank {
    dim: usize,
    kappa: f64,
    mixtures: BTreeMap<ClassId, ClassMixture>,
}

impl ModelBank {
    pub fn new(dim: usize, kappa: f64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Domain(format!("feature dimension must be >= 2, got {dim}")));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::Domain(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        Ok(Self { dim, kappa, mixtures: BTreeMap::new() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn is_empty(&self) -> bool {
        self.mixtures.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.mixtures.len()
    }

    /// Class ids in ascending order.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.mixtures.keys().copied()
    }

    pub fn mixtures(&self) -> impl Iterator<Item = &ClassMixture> {
        self.mixtures.values()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.mixtures.contains_key(&class)
    }

    pub fn mixture(&self, class: ClassId) -> Result<&ClassMixture> {
        self.mixtures.get(&class).ok_or(Error::UnknownClass(class))
    }

    pub fn mixture_mut(&mut self, class: ClassId) -> Result<&mut ClassMixture> {
        self.mixtures.get_mut(&class).ok_or(Error::UnknownClass(class))
    }

    /// Per-class component counts.
    pub fn component_counts(&self) -> BTreeMap<ClassId, usize> {
        self.mixtures.iter().map(|(c, m)| (*c, m.num_components())).collect()
    }

    /// Inserts or replaces a class mixture.
    pub fn insert(&mut self, mixture: ClassMixture) -> Result<()> {
        for m in mixture.means() {
            self.check_dim(m.dim())?;
        }
        self.mixtures.insert(mixture.class_id, mixture);
        Ok(())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim {
            return Err(Error::Dimension { expected: self.dim, actual: d });
        }
        Ok(())
    }

    /// Softmax over `kappa * <mu_{y,k}, v>` for one class.
    pub fn component_posterior(&self, class: ClassId, v: &UnitVector) -> Result<Vec<f64>> {
        self.check_dim(v.dim())?;
        let mix = self.mixture(class)?;
        let mut s: Vec<f64> = mix.dots(v.as_slice()).into_iter().map(|x| self.kappa * x).collect();
        softmax_in_place(&mut s);
        Ok(s)
    }

    /// Hard assignment to the closest component within `class`.
    pub fn assign_component(&self, class: ClassId, v: &UnitVector) -> Result<usize> {
        self.check_dim(v.dim())?;
        let mix = self.mixture(class)?;
        mix.closest(v.as_slice()).ok_or(Error::EmptyModel)
    }

    /// Posterior over classes under a uniform class prior, in ascending
    /// class id order.
    pub fn class_posterior(&self, v: &UnitVector) -> Result<Vec<(ClassId, f64)>> {
        self.check_dim(v.dim())?;
        if self.mixtures.is_empty() {
            return Err(Error::EmptyModel);
        }
        let mut scores: Vec<f64> =
            self.mixtures.values().map(|m| m.log_score(v.as_slice(), self.kappa)).collect();
        softmax_in_place(&mut scores);
        Ok(self.mixtures.keys().copied().zip(scores).collect())
    }

    /// Class of the closest component over all classes; ties go to the
    /// lowest class id.
    pub fn predict(&self, v: &UnitVector) -> Result<ClassId> {
        self.check_dim(v.dim())?;
        let mut best: Option<(ClassId, f64)> = None;
        for (c, m) in &self.mixtures {
            for mean in m.means() {
                let s = mean.dot(v.as_slice());
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((*c, s));
                }
            }
        }
        best.map(|(c, _)| c).ok_or(Error::EmptyModel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vmf::{normalize, sample_uniform};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn u(v: &[f64]) -> UnitVector {
        normalize(v).unwrap()
    }

    fn two_axis_bank(kappa: f64) -> ModelBank {
        let mut b = ModelBank::new(2, kappa).unwrap();
        b.insert(ClassMixture::new(0, vec![u(&[1.0, 0.0]), u(&[0.0, 1.0])])).unwrap();
        b
    }

    #[test]
    fn component_posterior_examples() {
        let mut b = ModelBank::new(2, 16.0).unwrap();
        b.insert(ClassMixture::new(3, vec![u(&[1.0, 1.0])])).unwrap();
        assert_eq!(b.component_posterior(3, &u(&[0.2, 1.0])).unwrap(), vec![1.0]);

        let b1 = two_axis_bank(1.0);
        let p = b1.component_posterior(0, &u(&[1.0, 0.0])).unwrap();
        let e = std::f64::consts::E;
        assert_relative_eq!(p[0], e / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(p[1], 1.0 / (e + 1.0), epsilon = 1e-12);

        let b16 = two_axis_bank(16.0);
        let h = 0.5f64.sqrt();
        let p = b16.component_posterior(0, &u(&[h, h])).unwrap();
        assert_relative_eq!(p[0], 0.5, epsilon = 1e-12);
        assert!(matches!(b16.component_posterior(9, &u(&[h, h])), Err(Error::UnknownClass(9))));
    }

    #[test]
    fn assign_component_examples() {
        let b = two_axis_bank(16.0);
        assert_eq!(b.assign_component(0, &u(&[0.6, 0.8])).unwrap(), 1);
        let h = 0.5f64.sqrt();
        assert_eq!(b.assign_component(0, &u(&[h, h])).unwrap(), 0);
        assert!(b.assign_component(1, &u(&[h, h])).is_err());
    }

    #[test]
    fn class_posterior_examples() {
        let e = std::f64::consts::E;
        let mut b = ModelBank::new(2, 1.0).unwrap();
        b.insert(ClassMixture::new(0, vec![u(&[1.0, 0.0])])).unwrap();
        assert_eq!(b.class_posterior(&u(&[0.0, 1.0])).unwrap(), vec![(0, 1.0)]);
        b.insert(ClassMixture::new(1, vec![u(&[0.0, 1.0])])).unwrap();
        let p = b.class_posterior(&u(&[1.0, 0.0])).unwrap();
        assert_relative_eq!(p[0].1, e / (e + 1.0), epsilon = 1e-12);

        let mu = u(&[0.3, 0.4]);
        let mut b = ModelBank::new(2, 16.0).unwrap();
        b.insert(ClassMixture::new(0, vec![mu.clone(), mu.clone()])).unwrap();
        b.insert(ClassMixture::new(1, vec![mu.clone()])).unwrap();
        let p = b.class_posterior(&u(&[1.0, -0.2])).unwrap();
        assert_relative_eq!(p[0].1, 0.5, epsilon = 1e-12);
        assert_relative_eq!(p[1].1, 0.5, epsilon = 1e-12);

        let empty = ModelBank::new(2, 1.0).unwrap();
        assert_eq!(empty.class_posterior(&mu), Err(Error::EmptyModel));
        assert_eq!(empty.predict(&mu), Err(Error::EmptyModel));
    }

    #[test]
    fn predict_examples() {
        let mut b = ModelBank::new(3, 16.0).unwrap();
        b.insert(ClassMixture::new(4, vec![u(&[1.0, 0.0, 0.0])])).unwrap();
        b.insert(ClassMixture::new(7, vec![u(&[0.0, 1.0, 0.0]), u(&[0.0, 0.0, 1.0])])).unwrap();
        assert_eq!(b.predict(&u(&[0.0, 0.0, 1.0])).unwrap(), 7);
        // exact tie between class 4 and 7
        assert_eq!(b.predict(&u(&[1.0, 1.0, 0.0])).unwrap(), 4);
    }

    #[test]
    fn predict_ignores_kappa_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = ModelBank::new(5, 1.0).unwrap();
        for c in 0..3 {
            b.insert(ClassMixture::new(c, (0..4).map(|_| sample_uniform(5, &mut rng)).collect())).unwrap();
        }
        let mut b2 = b.clone();
        b2.kappa = 100.0;
        for _ in 0..200 {
            let v = sample_uniform(5, &mut rng);
            assert_eq!(b.predict(&v).unwrap(), b2.predict(&v).unwrap());
        }
    }

    #[test]
    fn predict_and_mean_pooled_posterior_can_disagree() {
        // class 0 has one very close mean plus a far one; class 1 has two
        // moderately close means
        let mut b = ModelBank::new(2, 4.0).unwrap();
        b.insert(ClassMixture::new(0, vec![u(&[1.0, 0.0]), u(&[-1.0, 0.0])])).unwrap();
        b.insert(ClassMixture::new(1, vec![u(&[0.9, 0.3]), u(&[0.9, -0.3])])).unwrap();
        let v = u(&[1.0, 0.0]);
        assert_eq!(b.predict(&v).unwrap(), 0);
        let p = b.class_posterior(&v).unwrap();
        assert!(p[1].1 > p[0].1);
    }
}
