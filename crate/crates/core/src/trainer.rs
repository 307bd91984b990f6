//! Per-session hard-EM training: expand, then per epoch an E-step that
//! fixes component assignments followed by mini-batch M-steps on the
//! overall loss, then reduce and re-assign.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, forward, mean_step, sgd_step, BackboneParams};
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, LossExample, LossWeights, MeanTable, TeacherPosterior};
use crate::memory::MemoryBuffer;
use crate::mixture::{softmax_in_place, ClassId, ModelBank};
use crate::streams::{Example, ExampleId, SessionDataset};
use crate::structure::{self, empty_stats, ReductionConfig, ReductionReport, StatsTable};

pub use crate::loss::reg_loss;

/// M-step hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_max: f64,
    pub lambda_warmup_epochs: usize,
    pub beta: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_max: 0.1,
            lambda_warmup_epochs: 10,
            beta: 1.0,
            eta: 0.1,
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            weight_decay: 0.0005,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [self.lambda_max, self.beta, self.eta, self.lr, self.weight_decay];
        if coeffs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::Config("loss coefficients must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Step decay: x0.1 at 60% and again at 85% of the epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = self.epochs as f64;
        let mut lr = self.lr;
        for milestone in [0.6 * e, 0.85 * e] {
            if epoch as f64 >= milestone.floor() && milestone.floor() > 0.0 {
                lr *= 0.1;
            }
        }
        lr
    }
}

/// Linear ramp from 0 to `lambda_max` over the warm-up epochs.
pub fn lambda_at(epoch: usize, cfg: &LossConfig) -> f64 {
    if cfg.lambda_warmup_epochs == 0 {
        return cfg.lambda_max;
    }
    (cfg.lambda_max * epoch as f64 / cfg.lambda_warmup_epochs as f64).min(cfg.lambda_max)
}

/// Hard component assignment of every training example.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentTable(BTreeMap<ExampleId, usize>);

impl AssignmentTable {
    pub fn get(&self, id: ExampleId) -> Option<usize> {
        self.0.get(&id).copied()
    }

    pub fn insert(&mut self, id: ExampleId, component: usize) {
        self.0.insert(id, component);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ExampleId, usize)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }
}

/// Backbone plus mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: BackboneParams,
    pub bank: ModelBank,
}

/// Frozen model from the end of the previous session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSnapshot {
    backbone: BackboneParams,
    bank: ModelBank,
}

impl SessionSnapshot {
    pub fn of(state: &ModelState) -> Self {
        Self { backbone: state.backbone.clone(), bank: state.bank.clone() }
    }

    pub fn bank(&self) -> &ModelBank {
        &self.bank
    }

    pub fn backbone(&self) -> &BackboneParams {
        &self.backbone
    }

    /// Old-model log component posteriors for every class it knew, or
    /// `None` when it knew none.
    pub fn teacher(&self, input: &[f64]) -> Result<Option<TeacherPosterior>> {
        if self.bank.is_empty() {
            return Ok(None);
        }
        let v = forward(&self.backbone, input)?;
        let kappa = self.bank.kappa();
        let classes = self
            .bank
            .mixtures()
            .map(|m| {
                let mut s: Vec<f64> = m.dots(v.as_slice()).into_iter().map(|x| kappa * x).collect();
                softmax_in_place(&mut s);
                (m.class_id, s.into_iter().map(f64::ln).collect())
            })
            .collect();
        Ok(Some(TeacherPosterior { classes }))
    }
}

/// Assigns each example to the closest component of its own class.
pub fn e_step(bank: &ModelBank, params: &BackboneParams, dataset: &[Example]) -> Result<AssignmentTable> {
    let mut t = AssignmentTable::default();
    for ex in dataset {
        let v = forward(params, &ex.input)?;
        t.insert(ex.id, bank.assign_component(ex.class, &v)?);
    }
    Ok(t)
}

fn loss_examples<'a>(
    batch: &'a [Example],
    assignments: &AssignmentTable,
    teachers: Option<&'a [Option<TeacherPosterior>]>,
) -> Result<Vec<LossExample<'a>>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let component = assignments
                .get(ex.id)
                .ok_or_else(|| Error::Domain(format!("example {} has no component assignment", ex.id)))?;
            Ok(LossExample {
                input: &ex.input,
                class: ex.class,
                component,
                teacher: teachers.and_then(|t| t[i].as_ref()),
            })
        })
        .collect()
}

fn terms(
    bank: &ModelBank,
    params: &BackboneParams,
    snapshot: Option<&SessionSnapshot>,
    batch: &[Example],
    assignments: &AssignmentTable,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("loss over an empty batch".into()));
    }
    let teachers = match snapshot {
        Some(s) => Some(batch.iter().map(|e| s.teacher(&e.input)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let examples = loss_examples(batch, assignments, teachers.as_deref())?;
    let zero = LossWeights { lambda: 0.0, beta: 0.0, eta: 0.0 };
    let out = backbone::loss_and_grad(params, bank, &examples, &zero)?;
    Ok(out.loss)
}

/// `inter + lambda * intra`, both batch means.
pub fn clf_loss(
    bank: &ModelBank,
    params: &BackboneParams,
    batch: &[Example],
    assignments: &AssignmentTable,
    lambda: f64,
) -> Result<f64> {
    Ok(terms(bank, params, None, batch, assignments)?.clf(lambda))
}

/// Intra-class distillation against `snapshot`; zero without one.
pub fn distill_loss(
    bank: &ModelBank,
    params: &BackboneParams,
    snapshot: Option<&SessionSnapshot>,
    batch: &[Example],
) -> Result<f64> {
    let Some(snapshot) = snapshot else { return Ok(0.0) };
    // assignments do not enter the distillation term
    let mut asg = AssignmentTable::default();
    for ex in batch {
        asg.insert(ex.id, 0);
    }
    Ok(terms(bank, params, Some(snapshot), batch, &asg)?.distill)
}

/// `clf + beta * distill + eta * reg`.
pub fn overall_loss(
    bank: &ModelBank,
    params: &BackboneParams,
    snapshot: Option<&SessionSnapshot>,
    batch: &[Example],
    assignments: &AssignmentTable,
    weights: &LossWeights,
) -> Result<f64> {
    Ok(terms(bank, params, snapshot, batch, assignments)?.total(weights))
}

/// How the mixture structure changes over a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StructurePolicy {
    /// Add `m` components per incoming class, reduce after training.
    ExpandReduce { m: usize, reduction: ReductionConfig },
    /// One component per class, never expanded or reduced.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub structure: StructurePolicy,
    /// Uses zero learning rate for the backbone.
    pub freeze_backbone: bool,
}

impl TrainConfig {
    /// Effective loss weights at `epoch`.
    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        match self.structure {
            StructurePolicy::Fixed => LossWeights { lambda: 0.0, beta: 0.0, eta: 0.0 },
            StructurePolicy::ExpandReduce { .. } => {
                LossWeights { lambda: lambda_at(epoch, &self.loss), beta: self.loss.beta, eta: self.loss.eta }
            }
        }
    }
}

/// Epoch summary: batch-averaged loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub total: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {} lambda {:.4} lr {:.6} inter {:.6} intra {:.6} distill {:.6} reg {:.6} total {:.6}",
            self.epoch,
            self.lambda,
            self.lr,
            self.loss.inter,
            self.loss.intra,
            self.loss.distill,
            self.loss.reg,
            self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub state: ModelState,
    /// Assignments under the final (reduced) model.
    pub assignments: AssignmentTable,
    /// Stats the reduction consumed.
    pub stats: StatsTable,
    pub reduction: ReductionReport,
    pub epochs: Vec<EpochLog>,
}

/// Per-component counts and feature sums under `assignments`.
pub fn component_stats(
    bank: &ModelBank,
    params: &BackboneParams,
    data: &[Example],
    assignments: &AssignmentTable,
) -> Result<StatsTable> {
    let mut stats = empty_stats(bank);
    for ex in data {
        let k = assignments
            .get(ex.id)
            .ok_or_else(|| Error::Domain(format!("example {} has no component assignment", ex.id)))?;
        let v = forward(params, &ex.input)?;
        let cs = stats.get_mut(&ex.class).ok_or(Error::UnknownClass(ex.class))?;
        cs[k].add(&v);
    }
    Ok(stats)
}

/// Runs one session. `state` is left untouched; on error nothing of the
/// session survives.
pub fn train_session(
    state: &ModelState,
    incoming: &SessionDataset,
    memory: &MemoryBuffer,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SessionOutcome> {
    if incoming.examples.is_empty() {
        return Err(Error::Config(format!("session {} has no incoming data", incoming.session)));
    }
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snapshot = SessionSnapshot::of(state);
    let mut work = state.clone();

    let mut data: Vec<Example> = incoming.examples.clone();
    data.extend(memory.examples());
    let mut ids = BTreeSet::new();
    for ex in &data {
        if !ids.insert(ex.id) {
            return Err(Error::Config(format!("example id {} appears twice in the session data", ex.id)));
        }
    }

    let incoming_classes = incoming.classes();
    match cfg.structure {
        StructurePolicy::ExpandReduce { m, .. } => {
            structure::expand(&mut work.bank, &incoming_classes, m, &mut rng)?;
        }
        StructurePolicy::Fixed => {
            let fresh: BTreeSet<ClassId> =
                incoming_classes.iter().copied().filter(|c| !work.bank.contains(*c)).collect();
            structure::expand(&mut work.bank, &fresh, 1, &mut rng)?;
        }
    }

    let teachers: Vec<Option<TeacherPosterior>> =
        data.iter().map(|e| snapshot.teacher(&e.input)).collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.loss.epochs);
    for epoch in 0..cfg.loss.epochs {
        let assignments = e_step(&work.bank, &work.backbone, &data)?;
        let weights = cfg.weights_at(epoch);
        let lr = cfg.loss.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut acc = LossBreakdown::default();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.loss.batch_size) {
            let batch: Vec<LossExample<'_>> = chunk
                .iter()
                .map(|&i| LossExample {
                    input: &data[i].input,
                    class: data[i].class,
                    component: assignments.get(data[i].id).expect("e-step covers all data"),
                    teacher: teachers[i].as_ref(),
                })
                .collect();
            let table = MeanTable::from(&work.bank);
            let step = backbone::loss_and_grad_table(&work.backbone, &table, &batch, &weights)?;
            if !cfg.freeze_backbone {
                sgd_step(&mut work.backbone, &step.grad.backbone, lr, cfg.loss.weight_decay);
                if !work.backbone.is_finite() {
                    return Err(Error::Numerical { term: "backbone update" });
                }
            }
            mean_step(&mut work.bank, &step.grad.means, lr)?;
            acc.inter += step.loss.inter;
            acc.intra += step.loss.intra;
            acc.distill += step.loss.distill;
            acc.reg += step.loss.reg;
            total += step.total;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let loss = LossBreakdown {
            inter: acc.inter / nb,
            intra: acc.intra / nb,
            distill: acc.distill / nb,
            reg: acc.reg / nb,
        };
        epochs.push(EpochLog { epoch, lambda: weights.lambda, lr, loss, total: total / nb });
    }

    let assignments = e_step(&work.bank, &work.backbone, &data)?;
    let stats = component_stats(&work.bank, &work.backbone, &data, &assignments)?;
    let reduction = match cfg.structure {
        StructurePolicy::ExpandReduce { reduction, .. } => {
            let (bank, report) = structure::reduce(&work.bank, &stats, &reduction)?;
            work.bank = bank;
            report
        }
        StructurePolicy::Fixed => ReductionReport::default(),
    };
    let assignments = e_step(&work.bank, &work.backbone, &data)?;
    Ok(SessionOutcome { state: work, assignments, stats, reduction, epochs })
}
