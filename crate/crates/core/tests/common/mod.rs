#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use vmfcl::backbone::{loss_and_grad_table, BackboneParams, Gradient};
use vmfcl::loss::{LossBreakdown, LossExample, LossWeights, MeanTable, TeacherPosterior};
use vmfcl::memory::MemoryBuffer;
use vmfcl::mixture::{ClassId, ClassMixture, ModelBank};
use vmfcl::streams::Example;
use vmfcl::structure::{ComponentStats, StatsTable};
use vmfcl::trainer::AssignmentTable;
use vmfcl::vmf::{normalize, vmf_log_density, UnitVector, VmfParams};

pub fn gaussian<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_unit<R: Rng>(d: usize, rng: &mut R) -> UnitVector {
    normalize(&gaussian(d, rng)).unwrap()
}

// ---------------------------------------------------------------------------
// finite differences

pub struct Draw {
    pub params: BackboneParams,
    pub table: MeanTable,
    pub inputs: Vec<Vec<f64>>,
    pub classes: Vec<ClassId>,
    pub components: Vec<usize>,
    pub teachers: Vec<Option<TeacherPosterior>>,
}

impl Draw {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let input = rng.random_range(2..=5);
        let hidden = rng.random_range(2..=6);
        let out = rng.random_range(2..=4);
        let mut params = BackboneParams::mlp(input, &[hidden], out, rng);
        for l in params.layers_mut() {
            l.bias.iter_mut().for_each(|b| *b = 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
        let n_classes = rng.random_range(1..=3);
        let class_ids: Vec<ClassId> = (0..n_classes).map(|c| 2 * c as ClassId + 1).collect();
        let ks: Vec<usize> = (0..n_classes).map(|_| rng.random_range(1..=3)).collect();
        // raw means off the unit sphere exercise the normalization chain rule
        let means = ks
            .iter()
            .map(|&k| {
                (0..k)
                    .flat_map(|_| {
                        let scale = rng.random_range(0.5..2.0);
                        let u = random_unit(out, rng);
                        u.into_inner().into_iter().map(move |x| x * scale).collect::<Vec<_>>()
                    })
                    .collect()
            })
            .collect();
        let kappa = [1.0, 4.0, 16.0][rng.random_range(0..3)];
        let table = MeanTable { dim: out, kappa, classes: class_ids.clone(), means };
        let n = rng.random_range(1..=4);
        let mut inputs = Vec::new();
        let mut classes = Vec::new();
        let mut components = Vec::new();
        let mut teachers = Vec::new();
        for _ in 0..n {
            inputs.push(gaussian(input, rng));
            let ci = rng.random_range(0..n_classes);
            classes.push(class_ids[ci]);
            components.push(rng.random_range(0..ks[ci]));
            let teacher = rng.random_bool(0.7).then(|| {
                let mut classes = Vec::new();
                for (&c, &k) in class_ids.iter().zip(&ks) {
                    if rng.random_bool(0.8) {
                        let k_old = rng.random_range(1..=k);
                        let mut logits = gaussian(k_old, rng);
                        let lse = vmfcl::mixture::log_sum_exp(&logits);
                        logits.iter_mut().for_each(|x| *x -= lse);
                        classes.push((c, logits));
                    }
                }
                TeacherPosterior { classes }
            });
            teachers.push(teacher);
        }
        Self { params, table, inputs, classes, components, teachers }
    }

    pub fn batch(&self) -> Vec<LossExample<'_>> {
        (0..self.inputs.len())
            .map(|i| LossExample {
                input: &self.inputs[i],
                class: self.classes[i],
                component: self.components[i],
                teacher: self.teachers[i].as_ref(),
            })
            .collect()
    }

    fn eval(&self, params: &BackboneParams, table: &MeanTable, w: &LossWeights) -> (LossBreakdown, f64, Gradient) {
        let r = loss_and_grad_table(params, table, &self.batch(), w).unwrap();
        (r.loss, r.total, r.grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Inter,
    Intra,
    Distill,
    Reg,
    Combined,
}

pub const TERMS: [Term; 5] = [Term::Inter, Term::Intra, Term::Distill, Term::Reg, Term::Combined];

fn term_value(t: Term, loss: &LossBreakdown, total: f64) -> f64 {
    match t {
        Term::Inter => loss.inter,
        Term::Intra => loss.intra,
        Term::Distill => loss.distill,
        Term::Reg => loss.reg,
        Term::Combined => total,
    }
}

fn flat(g: &Gradient) -> Vec<f64> {
    let mut v = g.backbone.flatten();
    for (_, m) in &g.means {
        v.extend_from_slice(m);
    }
    v
}

const ZERO: LossWeights = LossWeights { lambda: 0.0, beta: 0.0, eta: 0.0 };

/// Analytic gradient of one term. Single terms are isolated as the
/// difference between unit weight and zero weight.
fn analytic(d: &Draw, t: Term, combined: &LossWeights) -> Vec<f64> {
    let base = flat(&d.eval(&d.params, &d.table, &ZERO).2);
    let with = |w: LossWeights| flat(&d.eval(&d.params, &d.table, &w).2);
    match t {
        Term::Inter => base,
        Term::Intra => sub(&with(LossWeights { lambda: 1.0, ..ZERO }), &base),
        Term::Distill => sub(&with(LossWeights { beta: 1.0, ..ZERO }), &base),
        Term::Reg => sub(&with(LossWeights { eta: 1.0, ..ZERO }), &base),
        Term::Combined => with(*combined),
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Central differences with step `h` over every backbone and raw mean
/// coordinate, in the same order as the flattened analytic gradient.
fn numeric(d: &Draw, t: Term, w: &LossWeights, h: f64) -> Vec<f64> {
    let f = |p: &BackboneParams, m: &MeanTable| {
        let (loss, total, _) = d.eval(p, m, w);
        term_value(t, &loss, total)
    };
    let mut out = Vec::new();
    let n_layers = d.params.layers().len();
    for li in 0..n_layers {
        let nw = d.params.layers()[li].weight.len();
        let nb = d.params.layers()[li].bias.len();
        for j in 0..nw + nb {
            let mut plus = d.params.clone();
            let mut minus = d.params.clone();
            let bump = |p: &mut BackboneParams, dx: f64| {
                let l = &mut p.layers_mut()[li];
                if j < nw {
                    l.weight[j] += dx;
                } else {
                    l.bias[j - nw] += dx;
                }
            };
            bump(&mut plus, h);
            bump(&mut minus, -h);
            out.push((f(&plus, &d.table) - f(&minus, &d.table)) / (2.0 * h));
        }
    }
    for ci in 0..d.table.means.len() {
        for j in 0..d.table.means[ci].len() {
            let mut plus = d.table.clone();
            let mut minus = d.table.clone();
            plus.means[ci][j] += h;
            minus.means[ci][j] -= h;
            out.push((f(&d.params, &plus) - f(&d.params, &minus)) / (2.0 * h));
        }
    }
    out
}

/// Largest per-coordinate relative error; magnitudes below `floor` are
/// compared against `floor`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences at step 1e-5 resolve about 1e-10 in absolute terms,
/// so coordinates smaller than this are judged against it.
pub const FD_FLOOR: f64 = 1e-5;

pub fn gradient_error(d: &Draw, t: Term, combined: &LossWeights, h: f64) -> f64 {
    let w = match t {
        Term::Combined => *combined,
        _ => ZERO,
    };
    max_rel_error(&analytic(d, t, combined), &numeric(d, t, &w, h), FD_FLOOR)
}

// ---------------------------------------------------------------------------
// brute-force oracles

pub fn random_bank<R: Rng>(rng: &mut R, d: usize, kappa: f64, max_classes: usize, max_k: usize) -> ModelBank {
    let mut bank = ModelBank::new(d, kappa).unwrap();
    let n = rng.random_range(1..=max_classes);
    let mut ids: Vec<ClassId> = (0..20).collect();
    for _ in 0..n {
        let c = ids.remove(rng.random_range(0..ids.len()));
        let k = rng.random_range(1..=max_k);
        let mut means: Vec<UnitVector> = Vec::new();
        for _ in 0..k {
            // occasional duplicates produce exact ties
            if !means.is_empty() && rng.random_bool(0.15) {
                let j = rng.random_range(0..means.len());
                means.push(means[j].clone());
            } else {
                means.push(random_unit(d, rng));
            }
        }
        bank.insert(ClassMixture::new(c, means)).unwrap();
    }
    bank
}

pub fn oracle_assign(bank: &ModelBank, class: ClassId, v: &UnitVector) -> usize {
    let mix = bank.mixture(class).unwrap();
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (k, m) in mix.means().iter().enumerate() {
        let s: f64 = m.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a * b).sum();
        if s > best_dot {
            best_dot = s;
            best = k;
        }
    }
    best
}

/// Highest vMF log-density over every component of every class.
pub fn oracle_predict(bank: &ModelBank, v: &UnitVector) -> ClassId {
    let kappa = bank.kappa().max(1e-3);
    let mut best: Option<(ClassId, f64)> = None;
    for c in bank.classes() {
        for m in bank.mixture(c).unwrap().means() {
            let p = VmfParams::new(m.clone(), kappa).unwrap();
            let ld = vmf_log_density(v, &p).unwrap();
            if best.is_none_or(|(_, b)| ld > b) {
                best = Some((c, ld));
            }
        }
    }
    best.unwrap().0
}

pub struct OracleReduction {
    pub means: Vec<Vec<f64>>,
    pub map: Vec<usize>,
}

/// Agglomerative merge over alive flags instead of a shrinking list.
pub fn oracle_reduce(means: &[UnitVector], stats: &[ComponentStats], delta: f64, min_k: usize) -> OracleReduction {
    let k = means.len();
    let mut alive: Vec<bool> = stats.iter().map(|s| s.count > 0).collect();
    if !alive.iter().any(|&a| a) {
        return OracleReduction { means: vec![means[0].as_slice().to_vec()], map: vec![0; k] };
    }
    let mut mean: Vec<Vec<f64>> = means.iter().map(|m| m.as_slice().to_vec()).collect();
    let mut count: Vec<usize> = stats.iter().map(|s| s.count).collect();
    let mut sum: Vec<Vec<f64>> = stats.iter().map(|s| s.sum.clone()).collect();
    let mut owner: Vec<usize> = (0..k).collect();
    loop {
        let n_alive = alive.iter().filter(|&&a| a).count();
        if n_alive <= min_k {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..k {
            for j in i + 1..k {
                if alive[i] && alive[j] {
                    let dist = 1.0 - mean[i].iter().zip(&mean[j]).map(|(a, b)| a * b).sum::<f64>();
                    if best.is_none_or(|(_, _, b)| dist < b) {
                        best = Some((i, j, dist));
                    }
                }
            }
        }
        let Some((i, j, dist)) = best else { break };
        if dist >= delta {
            break;
        }
        alive[j] = false;
        count[i] += count[j];
        let sj = sum[j].clone();
        sum[i].iter_mut().zip(&sj).for_each(|(a, b)| *a += b);
        let n = count[i] as f64;
        let avg: Vec<f64> = sum[i].iter().map(|x| x / n).collect();
        let r = avg.iter().map(|x| x * x).sum::<f64>().sqrt();
        mean[i] = avg.iter().map(|x| x / r).collect();
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }
    let survivors: Vec<usize> = (0..k).filter(|&i| alive[i]).collect();
    let pos = |i: usize| survivors.iter().position(|&s| s == i).unwrap();
    let map = (0..k)
        .map(|i| {
            if stats[i].count > 0 {
                pos(owner[i])
            } else {
                let mut best = survivors[0];
                let mut best_dot = f64::NEG_INFINITY;
                for &s in &survivors {
                    let dot: f64 = mean[s].iter().zip(means[i].as_slice()).map(|(a, b)| a * b).sum();
                    if dot > best_dot {
                        best_dot = dot;
                        best = s;
                    }
                }
                pos(best)
            }
        })
        .collect();
    OracleReduction { means: survivors.iter().map(|&s| mean[s].clone()).collect(), map }
}

pub fn random_stats<R: Rng>(rng: &mut R, bank: &ModelBank, max_count: usize) -> StatsTable {
    bank.mixtures()
        .map(|m| {
            let st = m
                .means()
                .iter()
                .map(|mu| {
                    let count = if rng.random_bool(0.2) { 0 } else { rng.random_range(1..=max_count) };
                    // member features scattered around the mean
                    let mut s = ComponentStats::empty(bank.dim());
                    for _ in 0..count {
                        let noisy: Vec<f64> =
                            mu.as_slice().iter().map(|x| x + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                        s.add(&normalize(&noisy).unwrap());
                    }
                    s
                })
                .collect();
            (m.class_id, st)
        })
        .collect()
}

/// Expected per-class and per-component exemplar counts.
pub fn oracle_memory_counts(
    bank: &ModelBank,
    data: &[Example],
    asg: &AssignmentTable,
    budget: usize,
) -> BTreeMap<ClassId, Vec<usize>> {
    let classes: Vec<ClassId> = bank.classes().collect();
    let mut avail: BTreeMap<ClassId, Vec<usize>> =
        bank.mixtures().map(|m| (m.class_id, vec![0; m.num_components()])).collect();
    for ex in data {
        avail.get_mut(&ex.class).unwrap()[asg.get(ex.id).unwrap()] += 1;
    }
    let mut out = BTreeMap::new();
    for (ci, c) in classes.iter().enumerate() {
        let quota = budget / classes.len() + usize::from(ci < budget % classes.len());
        let n = &avail[c];
        let k = n.len();
        let mut take = vec![quota / k; k];
        let mut rank: Vec<usize> = (0..k).collect();
        rank.sort_by_key(|&i| (std::cmp::Reverse(n[i]), i));
        for &i in rank.iter().take(quota % k) {
            take[i] += 1;
        }
        let mut spare = 0;
        for i in 0..k {
            if take[i] > n[i] {
                spare += take[i] - n[i];
                take[i] = n[i];
            }
        }
        while spare > 0 {
            let room: Vec<usize> = (0..k).map(|i| n[i] - take[i]).collect();
            let max = *room.iter().max().unwrap();
            if max == 0 {
                break;
            }
            let i = room.iter().position(|&r| r == max).unwrap();
            take[i] += 1;
            spare -= 1;
        }
        out.insert(*c, take);
    }
    out
}

pub fn memory_counts(mem: &MemoryBuffer, bank: &ModelBank) -> BTreeMap<ClassId, Vec<usize>> {
    mem.component_counts(bank)
}
