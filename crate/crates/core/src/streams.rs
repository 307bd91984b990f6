//! Session data: the VMFS feature-stream file format, synthetic vMF
//! pools with known domain centers, and NC / ND / NCD split planning.
//!
//! Domain labels never reach training code. [`Example`] carries no domain;
//! labels live in a [`DomainLedger`] that only evaluation reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::ClassId;
use crate::vmf::{normalize, sample_uniform, sample_vmf, UnitVector, VmfParams};

pub type ExampleId = u64;
pub type DomainId = u32;

pub const STREAM_MAGIC: &[u8; 4] = b"VMFS";
pub const STREAM_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Train = 0,
    Test = 1,
    Memory = 2,
}

impl Role {
    fn from_u8(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Train),
            1 => Some(Role::Test),
            2 => Some(Role::Memory),
            _ => None,
        }
    }
}

/// One record of a feature stream, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub id: ExampleId,
    pub class: ClassId,
    pub domain: Option<DomainId>,
    pub role: Role,
    pub input: Vec<f32>,
}

impl StreamRecord {
    pub fn example(&self) -> Example {
        Example { id: self.id, class: self.class, input: self.input.iter().map(|&x| x as f64).collect() }
    }
}

/// A labeled input as seen by training and memory selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: ExampleId,
    pub class: ClassId,
    pub input: Vec<f64>,
}

/// Hidden domain labels, keyed by example id. Evaluation only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainLedger(BTreeMap<ExampleId, Option<DomainId>>);

impl DomainLedger {
    pub fn insert(&mut self, id: ExampleId, domain: Option<DomainId>) {
        self.0.insert(id, domain);
    }

    pub fn domain(&self, id: ExampleId) -> Option<DomainId> {
        self.0.get(&id).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Training data of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub session: usize,
    pub examples: Vec<Example>,
}

impl SessionDataset {
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.examples.iter().map(|e| e.class).collect()
    }
}

// ---------------------------------------------------------------------------
// VMFS files

fn write_record(out: &mut Vec<u8>, r: &StreamRecord) {
    out.extend_from_slice(&r.id.to_le_bytes());
    out.extend_from_slice(&r.class.to_le_bytes());
    let dom: i32 = r.domain.map(|d| d as i32).unwrap_or(-1);
    out.extend_from_slice(&dom.to_le_bytes());
    out.push(r.role as u8);
    for x in &r.input {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes records to VMFS bytes.
pub fn encode_stream(dim: usize, records: &[StreamRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * record_len(dim));
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.input.len() != dim {
            return Err(Error::Dimension { expected: dim, actual: r.input.len() });
        }
        if let Some(d) = r.domain {
            if d > i32::MAX as u32 {
                return Err(Error::Domain(format!("domain id {d} does not fit the file format")));
            }
        }
        write_record(&mut out, r);
    }
    Ok(out)
}

fn record_len(dim: usize) -> usize {
    8 + 4 + 4 + 1 + 4 * dim
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

/// Parses VMFS bytes into `(dim, records)`.
pub fn decode_stream(bytes: &[u8]) -> Result<(usize, Vec<StreamRecord>)> {
    let perr = |offset: usize, message: String| Error::Parse { offset: offset as u64, message };
    if bytes.len() < 4 || &bytes[..4] != STREAM_MAGIC {
        return Err(perr(0, "bad magic, expected \"VMFS\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(perr(bytes.len(), "truncated header".into()));
    }
    let version = le_u32(bytes, 4);
    if version != STREAM_VERSION {
        return Err(perr(4, format!("unsupported version {version}, expected {STREAM_VERSION}")));
    }
    let dim = le_u32(bytes, 8) as usize;
    let count = le_u64(bytes, 12);
    let rlen = record_len(dim);
    let body = bytes.len() - HEADER_LEN;
    let present = (body / rlen) as u64;
    if present != count || body % rlen != 0 {
        let offset = HEADER_LEN + (present.min(count) as usize) * rlen;
        return Err(perr(
            offset,
            format!(
                "record count mismatch: header declares {count}, file holds {present} complete records{}",
                if body % rlen != 0 { " and a truncated trailing record" } else { "" }
            ),
        ));
    }
    let mut records = Vec::with_capacity(count as usize);
    let mut at = HEADER_LEN;
    for _ in 0..count {
        let id = le_u64(bytes, at);
        let class = le_u32(bytes, at + 8);
        let dom = le_u32(bytes, at + 12) as i32;
        let domain = match dom {
            -1 => None,
            d if d >= 0 => Some(d as u32),
            d => return Err(perr(at + 12, format!("invalid domain id {d}"))),
        };
        let role = Role::from_u8(bytes[at + 16]).ok_or_else(|| perr(at + 16, format!("invalid role {}", bytes[at + 16])))?;
        let input = (0..dim)
            .map(|j| {
                let p = at + 17 + 4 * j;
                f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap())
            })
            .collect();
        records.push(StreamRecord { id, class, domain, role, input });
        at += rlen;
    }
    Ok((dim, records))
}

pub fn write_stream(path: &Path, dim: usize, records: &[StreamRecord]) -> Result<()> {
    let bytes = encode_stream(dim, records)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_stream(path: &Path) -> Result<(usize, Vec<StreamRecord>)> {
    decode_stream(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Pools

/// Labeled train and test records with a shared input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub dim: usize,
    pub train: Vec<StreamRecord>,
    pub test: Vec<StreamRecord>,
}

impl Pool {
    /// Builds a pool from records of a mixed-role stream; memory records
    /// are ignored.
    pub fn from_records(dim: usize, records: Vec<StreamRecord>) -> Self {
        let (train, rest): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.role == Role::Train);
        let test = rest.into_iter().filter(|r| r.role == Role::Test).collect();
        Self { dim, train, test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub domains_per_class: usize,
    pub dim: usize,
    pub kappa_true: f64,
    pub train_per_pair: usize,
    pub test_per_pair: usize,
    pub min_separation_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            domains_per_class: 3,
            dim: 16,
            kappa_true: 50.0,
            train_per_pair: 200,
            test_per_pair: 40,
            min_separation_deg: 60.0,
            seed: 1993,
        }
    }
}

/// Rejection attempts allowed per center.
pub const CENTER_RETRIES: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPool {
    pub pool: Pool,
    pub centers: BTreeMap<(ClassId, DomainId), UnitVector>,
}

/// Draws one vMF cluster per (class, domain) with pairwise center angles
/// of at least `min_separation_deg`, then independent train and test
/// samples. Inputs are stored as `f32` so they survive a file round trip.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthPool> {
    if cfg.num_classes == 0 || cfg.domains_per_class == 0 {
        return Err(Error::Config("synthetic pool needs at least one class and domain".into()));
    }
    if cfg.dim < 2 {
        return Err(Error::Config("synthetic dim must be >= 2".into()));
    }
    if !(cfg.kappa_true > 0.0) {
        return Err(Error::Config("kappa_true must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_cos = cfg.min_separation_deg.to_radians().cos();
    let mut centers = BTreeMap::new();
    let mut placed: Vec<UnitVector> = Vec::new();
    for c in 0..cfg.num_classes as ClassId {
        for z in 0..cfg.domains_per_class as DomainId {
            let mut attempt = 0;
            let center = loop {
                let mut cand = sample_uniform(cfg.dim, &mut rng);
                // right angles are almost never hit by chance: draw from the
                // orthogonal complement of the centers placed so far
                if min_cos <= 1e-12 && placed.len() < cfg.dim {
                    let mut g = cand.into_inner();
                    for p in &placed {
                        let d = p.dot(&g);
                        g.iter_mut().zip(p.as_slice()).for_each(|(x, y)| *x -= d * y);
                    }
                    match normalize(&g) {
                        Ok(u) => cand = u,
                        Err(_) => continue,
                    }
                }
                if placed.iter().all(|p| p.dot(cand.as_slice()) <= min_cos + 1e-12) {
                    break cand;
                }
                attempt += 1;
                if attempt >= CENTER_RETRIES {
                    return Err(Error::Config(format!(
                        "could not place {} centers {}° apart in dimension {} after {} retries",
                        cfg.num_classes * cfg.domains_per_class,
                        cfg.min_separation_deg,
                        cfg.dim,
                        CENTER_RETRIES
                    )));
                }
            };
            placed.push(center.clone());
            centers.insert((c, z), center);
        }
    }
    let mut next_id: ExampleId = 0;
    let mut draw = |role: Role, per_pair: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for ((c, z), center) in &centers {
            let p = VmfParams { mean: center.clone(), kappa: cfg.kappa_true };
            for _ in 0..per_pair {
                let v = sample_vmf(&p, rng);
                out.push(StreamRecord {
                    id: next_id,
                    class: *c,
                    domain: Some(*z),
                    role,
                    input: v.as_slice().iter().map(|&x| x as f32).collect(),
                });
                next_id += 1;
            }
        }
        out
    };
    let train = draw(Role::Train, cfg.train_per_pair, &mut rng);
    let test = draw(Role::Test, cfg.test_per_pair, &mut rng);
    Ok(SynthPool { pool: Pool { dim: cfg.dim, train, test }, centers })
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    /// New classes only.
    NC,
    /// New domains of every class, one per session.
    ND,
    /// New classes and/or new domains.
    NCD,
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NC" => Ok(SplitMode::NC),
            "ND" => Ok(SplitMode::ND),
            "NCD" => Ok(SplitMode::NCD),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SplitMode::NC => "NC",
            SplitMode::ND => "ND",
            SplitMode::NCD => "NCD",
        };
        f.write_str(s)
    }
}

/// Domain key used for grouping; records without a label form one group.
pub type PairKey = (ClassId, Option<DomainId>);

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub sessions: Vec<Vec<PairKey>>,
}

impl SplitPlan {
    /// Number of classes first seen in each session.
    pub fn new_class_counts(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        self.sessions
            .iter()
            .map(|pairs| {
                let fresh: BTreeSet<ClassId> = pairs.iter().map(|p| p.0).filter(|c| !seen.contains(c)).collect();
                seen.extend(fresh.iter().copied());
                fresh.len()
            })
            .collect()
    }
}

/// Data of one planned session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSplit {
    pub train: SessionDataset,
    /// Test examples of the pairs introduced in this session.
    pub test: Vec<Example>,
    pub pairs: Vec<PairKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub plan: SplitPlan,
    pub sessions: Vec<SessionSplit>,
    pub ledger: DomainLedger,
}

fn grid(pool: &Pool) -> BTreeMap<ClassId, Vec<Option<DomainId>>> {
    let mut g: BTreeMap<ClassId, BTreeSet<Option<DomainId>>> = BTreeMap::new();
    for r in &pool.train {
        g.entry(r.class).or_default().insert(r.domain);
    }
    g.into_iter().map(|(c, ds)| (c, ds.into_iter().collect())).collect()
}

/// Plans sessions over the pool's (class, domain) grid and materializes
/// each session's train and test data.
pub fn make_splits(pool: &Pool, mode: SplitMode, num_sessions: usize, seed: u64) -> Result<Splits> {
    if num_sessions == 0 {
        return Err(Error::Config("num_sessions must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid(pool);
    if g.is_empty() {
        return Err(Error::Config("pool has no training records".into()));
    }
    let mut classes: Vec<ClassId> = g.keys().copied().collect();
    classes.shuffle(&mut rng);
    let mut domains: BTreeMap<ClassId, Vec<Option<DomainId>>> = g.clone();
    for ds in domains.values_mut() {
        ds.shuffle(&mut rng);
    }
    let mut sessions: Vec<Vec<PairKey>> = vec![Vec::new(); num_sessions];
    match mode {
        SplitMode::NC => {
            if classes.len() < num_sessions {
                return Err(Error::Config(format!(
                    "NC needs at least one fresh class per session: {} classes for {} sessions",
                    classes.len(),
                    num_sessions
                )));
            }
            let base = classes.len() / num_sessions;
            let extra = classes.len() % num_sessions;
            let mut it = classes.iter();
            for (t, s) in sessions.iter_mut().enumerate() {
                let take = base + usize::from(t < extra);
                for c in it.by_ref().take(take) {
                    s.extend(domains[c].iter().map(|d| (*c, *d)));
                }
            }
        }
        SplitMode::ND => {
            for c in &classes {
                if domains[c].len() != num_sessions {
                    return Err(Error::Config(format!(
                        "ND needs exactly one new domain per class per session: class {c} has {} domains for {} sessions",
                        domains[c].len(),
                        num_sessions
                    )));
                }
            }
            for c in &classes {
                for (t, d) in domains[c].iter().enumerate() {
                    sessions[t].push((*c, *d));
                }
            }
        }
        SplitMode::NCD => {
            let max_domains = domains.values().map(Vec::len).max().unwrap_or(1);
            if max_domains > num_sessions {
                return Err(Error::Config(format!(
                    "NCD places one domain per class per session: {max_domains} domains need at least that many sessions, got {num_sessions}"
                )));
            }
            // every class must be introduced early enough to show all its domains
            let last_intro = num_sessions - max_domains;
            let mut remaining = classes.len();
            let mut it = classes.iter();
            for t in 0..=last_intro {
                let take = if t == last_intro { remaining } else { remaining.div_ceil(2) };
                remaining -= take;
                for c in it.by_ref().take(take) {
                    for (k, d) in domains[c].iter().enumerate() {
                        sessions[t + k].push((*c, *d));
                    }
                }
            }
        }
    }
    for s in &mut sessions {
        s.sort();
    }
    let plan = SplitPlan { mode, sessions };
    materialize(pool, plan)
}

fn materialize(pool: &Pool, plan: SplitPlan) -> Result<Splits> {
    let mut when: BTreeMap<PairKey, usize> = BTreeMap::new();
    for (t, pairs) in plan.sessions.iter().enumerate() {
        for p in pairs {
            when.insert(*p, t);
        }
    }
    let n = plan.sessions.len();
    let mut train: Vec<Vec<Example>> = vec![Vec::new(); n];
    let mut test: Vec<Vec<Example>> = vec![Vec::new(); n];
    let mut ledger = DomainLedger::default();
    let mut ids = BTreeSet::new();
    for (records, dest) in [(&pool.train, &mut train), (&pool.test, &mut test)] {
        for r in records {
            if !ids.insert(r.id) {
                return Err(Error::Config(format!("duplicate example id {}", r.id)));
            }
            if r.input.len() != pool.dim {
                return Err(Error::Dimension { expected: pool.dim, actual: r.input.len() });
            }
            ledger.insert(r.id, r.domain);
            // test pairs without training data never get evaluated
            if let Some(&t) = when.get(&(r.class, r.domain)) {
                dest[t].push(r.example());
            }
        }
    }
    let sessions = plan
        .sessions
        .iter()
        .enumerate()
        .map(|(t, pairs)| {
            let mut tr = std::mem::take(&mut train[t]);
            let mut te = std::mem::take(&mut test[t]);
            tr.sort_by_key(|e| e.id);
            te.sort_by_key(|e| e.id);
            SessionSplit { train: SessionDataset { session: t, examples: tr }, test: te, pairs: pairs.clone() }
        })
        .collect();
    Ok(Splits { plan, sessions, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(classes: usize, domains: usize) -> SynthConfig {
        SynthConfig {
            num_classes: classes,
            domains_per_class: domains,
            dim: 8,
            kappa_true: 50.0,
            train_per_pair: 10,
            test_per_pair: 3,
            min_separation_deg: 30.0,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_counts() {
        let mut cfg = small_cfg(2, 2);
        cfg.train_per_pair = 200;
        let p = generate_synthetic(&cfg).unwrap();
        assert_eq!(p.pool.train.len(), 800);
        for c in 0..2 {
            for z in 0..2 {
                let n = p.pool.train.iter().filter(|r| r.class == c && r.domain == Some(z)).count();
                assert_eq!(n, 200);
            }
        }
    }

    #[test]
    fn synthetic_concentration_limit() {
        let mut cfg = small_cfg(1, 1);
        cfg.kappa_true = 1e6;
        cfg.dim = 16;
        let p = generate_synthetic(&cfg).unwrap();
        let center = &p.centers[&(0, 0)];
        for r in &p.pool.train {
            let x: Vec<f64> = r.input.iter().map(|&v| v as f64).collect();
            let cosv = center.dot(&x) / crate::vmf::norm(&x);
            assert!(cosv.clamp(-1.0, 1.0).acos() < 1e-2);
        }
    }

    #[test]
    fn synthetic_separation_unsatisfiable() {
        let mut cfg = small_cfg(3, 2);
        cfg.dim = 2;
        cfg.min_separation_deg = 120.0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = small_cfg(3, 2);
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn nc_split() {
        let p = generate_synthetic(&small_cfg(4, 1)).unwrap();
        let s = make_splits(&p.pool, SplitMode::NC, 2, 1).unwrap();
        assert_eq!(s.plan.new_class_counts(), vec![2, 2]);
        let a: BTreeSet<_> = s.plan.sessions[0].iter().map(|p| p.0).collect();
        let b: BTreeSet<_> = s.plan.sessions[1].iter().map(|p| p.0).collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn nd_split() {
        let p = generate_synthetic(&small_cfg(3, 4)).unwrap();
        let s = make_splits(&p.pool, SplitMode::ND, 4, 1).unwrap();
        let mut seen: BTreeSet<PairKey> = BTreeSet::new();
        for pairs in &s.plan.sessions {
            let classes: BTreeSet<_> = pairs.iter().map(|p| p.0).collect();
            assert_eq!(classes.len(), 3);
            assert_eq!(pairs.len(), 3);
            for p in pairs {
                assert!(seen.insert(*p));
            }
        }
        assert!(make_splits(&p.pool, SplitMode::ND, 3, 1).is_err());
    }

    #[test]
    fn ncd_split_covers_each_pair_once() {
        let p = generate_synthetic(&small_cfg(5, 2)).unwrap();
        let s = make_splits(&p.pool, SplitMode::NCD, 4, 3).unwrap();
        let mut all: Vec<PairKey> = s.plan.sessions.iter().flatten().copied().collect();
        all.sort();
        let mut expect: Vec<PairKey> = (0..5).flat_map(|c| (0..2).map(move |z| (c, Some(z)))).collect();
        expect.sort();
        assert_eq!(all, expect);
        let counts = s.plan.new_class_counts();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
        assert_eq!(counts.iter().sum::<usize>(), 5);
        assert!(make_splits(&p.pool, SplitMode::NCD, 1, 3).is_err());
    }

    #[test]
    fn session_union_reconstructs_pool() {
        let p = generate_synthetic(&small_cfg(4, 3)).unwrap();
        for (mode, n) in [(SplitMode::NC, 2), (SplitMode::ND, 3), (SplitMode::NCD, 4)] {
            let s = make_splits(&p.pool, mode, n, 9).unwrap();
            let mut ids: Vec<u64> =
                s.sessions.iter().flat_map(|x| x.train.examples.iter().chain(&x.test).map(|e| e.id)).collect();
            ids.sort();
            let mut want: Vec<u64> = p.pool.train.iter().chain(&p.pool.test).map(|r| r.id).collect();
            want.sort();
            assert_eq!(ids, want, "{mode}");
        }
    }

    #[test]
    fn stream_errors() {
        let recs = vec![StreamRecord { id: 1, class: 2, domain: None, role: Role::Memory, input: vec![0.5, -1.25] }];
        let bytes = encode_stream(2, &recs).unwrap();
        assert_eq!(decode_stream(&bytes).unwrap(), (2, recs.clone()));

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_stream(&bad), Err(Error::Parse { offset: 0, .. })));

        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(decode_stream(&ver), Err(Error::Parse { offset: 4, .. })));

        let mut more = bytes.clone();
        more[12] = 3;
        match decode_stream(&more) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("declares 3") && message.contains("holds 1")),
            other => panic!("{other:?}"),
        }
        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(decode_stream(truncated), Err(Error::Parse { offset: 20, .. })));
    }
}
