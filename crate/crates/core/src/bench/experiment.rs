//! Session-by-session experiment driver and its JSON report.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{BackboneKind, DataSource, Method, RunConfig};
use super::metrics::{accuracy, forgetting, predictions, purity, AccuracyMatrix};
use crate::backbone::BackboneParams;
use crate::checkpoint::write_checkpoint;
use crate::error::{Error, Result};
use crate::memory::{select_memory, MemoryBuffer, MemoryStatus};
use crate::mixture::{ClassId, ModelBank};
use crate::streams::{
    generate_synthetic, make_splits, read_stream, write_stream, DomainLedger, Example, Pool, Role, SplitMode,
    StreamRecord,
};
use crate::trainer::{train_session, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorySummary {
    pub size: usize,
    pub status: MemoryStatus,
    pub class_counts: BTreeMap<ClassId, usize>,
    pub component_counts: BTreeMap<ClassId, Vec<usize>>,
}

impl MemorySummary {
    fn of(mem: &MemoryBuffer, bank: &ModelBank) -> Self {
        Self {
            size: mem.len(),
            status: mem.status,
            class_counts: mem.class_counts(),
            component_counts: mem.component_counts(bank),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionReport {
    pub complete: bool,
    pub error: Option<String>,
    pub method: Method,
    pub split: SplitMode,
    pub seed: u64,
    pub session_seeds: Vec<u64>,
    /// Accuracy (%) after each session on everything seen so far.
    pub per_session_acc: Vec<f64>,
    pub avg_inc_acc: f64,
    pub final_acc: f64,
    pub forgetting: Option<f64>,
    pub accuracy_matrix: AccuracyMatrix,
    pub purity_per_session: Vec<Option<f64>>,
    pub mean_purity: Option<f64>,
    pub components_per_class: Vec<BTreeMap<ClassId, usize>>,
    pub memory: Vec<MemorySummary>,
    /// Final accuracy (%) per `class/domain` cell of the evaluation pool.
    pub per_domain_acc: BTreeMap<String, f64>,
    pub config_echo: RunConfig,
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: SessionReport,
    pub state: Option<ModelState>,
    pub log: Vec<String>,
    pub session_seconds: Vec<f64>,
}

fn load_pool(data: &DataSource) -> Result<Pool> {
    match data {
        DataSource::Synthetic(s) => Ok(generate_synthetic(s)?.pool),
        DataSource::Vmfs { train, test } => {
            let (d1, train) = read_stream(train)?;
            let (d2, test) = read_stream(test)?;
            if d1 != d2 {
                return Err(Error::Dimension { expected: d1, actual: d2 });
            }
            Ok(Pool { dim: d1, train, test })
        }
    }
}

fn initial_state(cfg: &RunConfig, dim: usize, rng: &mut ChaCha8Rng) -> Result<ModelState> {
    let backbone = match cfg.model.backbone {
        BackboneKind::Identity => BackboneParams::identity(dim),
        BackboneKind::Mlp => {
            let hidden: Vec<usize> = if cfg.model.hidden == 0 { vec![] } else { vec![cfg.model.hidden] };
            BackboneParams::mlp(dim, &hidden, dim, rng)
        }
    };
    Ok(ModelState { backbone, bank: ModelBank::new(dim, cfg.model.kappa)? })
}

fn cell_name(class: ClassId, ledger: &DomainLedger, id: u64) -> String {
    match ledger.domain(id) {
        Some(d) => format!("{class}/{d}"),
        None => format!("{class}/-"),
    }
}

fn per_domain(state: &ModelState, pool: &[Example], ledger: &DomainLedger) -> Result<BTreeMap<String, f64>> {
    let preds = predictions(&state.bank, &state.backbone, pool)?;
    let mut cells: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, ex) in preds.iter().zip(pool) {
        let c = cells.entry(cell_name(ex.class, ledger, ex.id)).or_default();
        c.0 += usize::from(*p == ex.class);
        c.1 += 1;
    }
    Ok(cells.into_iter().map(|(k, (h, n))| (k, 100.0 * h as f64 / n as f64)).collect())
}

fn memory_records(mem: &MemoryBuffer, ledger: &DomainLedger) -> Vec<StreamRecord> {
    mem.records
        .iter()
        .map(|r| StreamRecord {
            id: r.id,
            class: r.class,
            domain: ledger.domain(r.id),
            role: Role::Memory,
            input: r.input.iter().map(|&x| x as f32).collect(),
        })
        .collect()
}

struct Sink<'a> {
    out: Option<&'a Path>,
    log_file: Option<File>,
    lines: Vec<String>,
}

impl Sink<'_> {
    fn line(&mut self, s: String) -> Result<()> {
        log::debug!("{s}");
        if let Some(f) = &mut self.log_file {
            writeln!(f, "{s}")?;
        }
        self.lines.push(s);
        Ok(())
    }
}

/// Runs every session of `cfg`. Configuration problems are returned as
/// errors; a failure inside a session yields a report with
/// `complete = false` covering the sessions that finished.
///
/// With `out`, writes `train.log`, `memory_s{t}.vmfs`, `session_{t}.vmfb`,
/// `report.json` and `timing.json` there.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let pool = load_pool(&cfg.data)?;
    let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split_seed: u64 = seeder.random();
    let init_seed: u64 = seeder.random();
    let session_seeds: Vec<u64> = (0..cfg.sessions).map(|_| seeder.random()).collect();
    let splits = make_splits(&pool, cfg.split, cfg.sessions, split_seed)?;
    let mut state = initial_state(cfg, pool.dim, &mut ChaCha8Rng::seed_from_u64(init_seed))?;
    let train_cfg = cfg.train_config();

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut sink = Sink {
        out,
        log_file: out.map(|d| File::create(d.join("train.log"))).transpose()?,
        lines: Vec::new(),
    };

    let mut report = SessionReport {
        complete: false,
        error: None,
        method: cfg.method,
        split: cfg.split,
        seed: cfg.seed,
        session_seeds: session_seeds.clone(),
        per_session_acc: Vec::new(),
        avg_inc_acc: 0.0,
        final_acc: 0.0,
        forgetting: None,
        accuracy_matrix: Vec::new(),
        purity_per_session: Vec::new(),
        mean_purity: None,
        components_per_class: Vec::new(),
        memory: Vec::new(),
        per_domain_acc: BTreeMap::new(),
        config_echo: cfg.clone(),
    };
    let mut memory = MemoryBuffer::empty(cfg.memory_budget);
    let mut eval_pools: Vec<Vec<Example>> = Vec::new();
    let mut seconds = Vec::new();

    let mut failure: Option<Error> = None;
    for (t, split) in splits.sessions.iter().enumerate() {
        let started = Instant::now();
        let result = run_session(cfg, &mut sink, t, split, &splits.ledger, &state, &memory, &train_cfg, session_seeds[t]);
        let (next, next_memory, purity_t) = match result {
            Ok(v) => v,
            Err(e) => {
                sink.line(format!("session {t} aborted: {e}"))?;
                failure = Some(e);
                break;
            }
        };
        state = next;
        memory = next_memory;
        let mut pool_t = eval_pools.last().cloned().unwrap_or_default();
        pool_t.extend(split.test.iter().cloned());
        eval_pools.push(pool_t);
        let row: Result<Vec<f64>> =
            eval_pools.iter().map(|p| accuracy(&state.bank, &state.backbone, p)).collect();
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        sink.line(format!("session {t} accuracy {:.4}", row[t]))?;
        report.per_session_acc.push(row[t]);
        report.accuracy_matrix.push(row);
        report.purity_per_session.push(purity_t);
        report.components_per_class.push(state.bank.component_counts());
        report.memory.push(MemorySummary::of(&memory, &state.bank));
        seconds.push(started.elapsed().as_secs_f64());
    }

    let done = report.per_session_acc.len();
    if done > 0 {
        report.final_acc = report.per_session_acc[done - 1];
        report.avg_inc_acc = report.per_session_acc.iter().sum::<f64>() / done as f64;
        report.forgetting = forgetting(&report.accuracy_matrix);
        let ps: Option<Vec<f64>> = report.purity_per_session.iter().copied().collect();
        report.mean_purity = ps.map(|v| v.iter().sum::<f64>() / v.len() as f64);
        report.per_domain_acc = per_domain(&state, &eval_pools[done - 1], &splits.ledger)?;
    }
    match failure {
        Some(e) => report.error = Some(e.to_string()),
        None => report.complete = true,
    }

    if let Some(dir) = sink.out {
        std::fs::write(dir.join("report.json"), report.to_json())?;
        let timing = serde_json::json!({ "session_seconds": seconds, "total_seconds": seconds.iter().sum::<f64>() });
        std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing).expect("json"))?;
    }
    let state = report.complete.then_some(state);
    Ok(RunOutcome { report, state, log: sink.lines, session_seconds: seconds })
}

#[allow(clippy::too_many_arguments)]
fn run_session(
    cfg: &RunConfig,
    sink: &mut Sink<'_>,
    t: usize,
    split: &crate::streams::SessionSplit,
    ledger: &DomainLedger,
    state: &ModelState,
    memory: &MemoryBuffer,
    train_cfg: &crate::trainer::TrainConfig,
    seed: u64,
) -> Result<(ModelState, MemoryBuffer, Option<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_seed: u64 = rng.random();
    sink.line(format!("session {t} train {} memory {}", split.train.examples.len(), memory.len()))?;
    let outcome = train_session(state, &split.train, memory, train_cfg, train_seed)?;
    for e in &outcome.epochs {
        sink.line(format!("session {t} {}", e.line()))?;
    }
    for l in outcome.reduction.lines() {
        sink.line(format!("session {t} {l}"))?;
    }
    let mut data = split.train.examples.clone();
    data.extend(memory.examples());
    let purity_t = match purity(&outcome.assignments, &data, ledger) {
        Ok(p) => Some(p),
        Err(Error::PurityUnavailable(_)) => None,
        Err(e) => return Err(e),
    };
    let next_memory = select_memory(&outcome.state.bank, &data, &outcome.assignments, cfg.memory_budget, &mut rng)?;
    if next_memory.status == MemoryStatus::InsufficientBudget {
        sink.line(format!("session {t} memory budget {} below class count", cfg.memory_budget))?;
    }
    if let Some(dir) = sink.out {
        write_stream(&dir.join(format!("memory_s{t}.vmfs")), outcome.state.bank.dim(), &memory_records(&next_memory, ledger))?;
        write_checkpoint(&dir.join(format!("session_{t}.vmfb")), &outcome.state.bank, Some(&outcome.state.backbone))?;
    }
    Ok((outcome.state, next_memory, purity_t))
}
