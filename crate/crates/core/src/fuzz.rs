//! Seeded trace generation, differential execution and shrinking.
//!
//! Every generated trace is run on the machine backed by the incremental
//! kernel. The kernel operations it issues are then replayed in lockstep on
//! a fresh kernel and on the reference oracle, comparing verdicts and
//! auditing invariants after every step. A second, end-to-end pass runs the
//! whole trace on a machine backed by the oracle.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{BorrowKind, CapId, CapabilityModel, Kernel, KernelConfig, KernelFault, OpOutcome};
use crate::machine::{DiagnosticKind, Machine, MachineConfig, MachineError, Mode, OnViolation, StepResult};
use crate::oracle::{check_exclusive_access, check_well_nested_map, AccessLog, OracleState};
use crate::trace::{AllocKind, Instr, Reg, TraceProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Li,
    Mv,
    Add,
    Addi,
    Alloc,
    Borrow,
    Drop,
    Ld,
    Sd,
}

impl Opcode {
    pub const ALL: [Opcode; 9] = [
        Opcode::Li,
        Opcode::Mv,
        Opcode::Add,
        Opcode::Addi,
        Opcode::Alloc,
        Opcode::Borrow,
        Opcode::Drop,
        Opcode::Ld,
        Opcode::Sd,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FuzzConfigError {
    #[error("every opcode weight is zero")]
    NoPositiveWeight,
    #[error("address pool is empty")]
    EmptyAddressPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub seed: u64,
    pub events_per_trace: usize,
    pub trace_count: usize,
    pub op_weights: BTreeMap<Opcode, u32>,
    pub kernel: KernelConfig,
    /// Allocation bases; allocations land at small offsets from these so
    /// that roots overlap now and then.
    pub address_pool: Vec<u64>,
    pub mode: Mode,
    pub pool_size: usize,
    /// Audit shadow refcounts every this many machine steps (and at the end
    /// of every trace).
    pub audit_interval: u64,
    /// Also run each trace on a machine backed by the oracle.
    pub end_to_end: bool,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: usize,
    #[serde(skip)]
    pub fault: Option<KernelFault>,
}

pub fn default_op_weights() -> BTreeMap<Opcode, u32> {
    BTreeMap::from([
        (Opcode::Li, 5),
        (Opcode::Mv, 4),
        (Opcode::Add, 6),
        (Opcode::Addi, 4),
        (Opcode::Alloc, 10),
        (Opcode::Borrow, 20),
        (Opcode::Drop, 5),
        (Opcode::Ld, 18),
        (Opcode::Sd, 22),
    ])
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            seed: 0,
            events_per_trace: 128,
            trace_count: 10_000,
            op_weights: default_op_weights(),
            kernel: KernelConfig::default(),
            address_pool: vec![0x1000, 0x2000, 0x3000, 0x4000],
            mode: Mode::Compat,
            pool_size: crate::machine::DEFAULT_POOL_SIZE,
            audit_interval: 1000,
            end_to_end: true,
            jobs: 0,
            fault: None,
        }
    }
}

impl FuzzConfig {
    pub fn validate(&self) -> Result<(), FuzzConfigError> {
        if self.op_weights.values().all(|&w| w == 0) {
            return Err(FuzzConfigError::NoPositiveWeight);
        }
        if self.address_pool.is_empty() {
            return Err(FuzzConfigError::EmptyAddressPool);
        }
        Ok(())
    }

    pub fn machine_config(&self) -> MachineConfig {
        MachineConfig {
            kernel: self.kernel,
            mode: self.mode,
            on_violation: OnViolation::Continue,
            pool_size: self.pool_size,
            ..MachineConfig::default()
        }
    }

    fn kernel(&self) -> Kernel {
        let mut k = Kernel::new(self.kernel);
        if let Some(f) = self.fault {
            k.inject_fault(f);
        }
        k
    }

    /// Seed of trace `index`, derived so neighbouring traces are unrelated.
    pub fn trace_seed(&self, index: u64) -> u64 {
        let mut z = self.seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

// ---------------------------------------------------------------------------
// Generation

struct Generator<'a> {
    cfg: &'a FuzzConfig,
    rng: ChaCha8Rng,
    machine: Machine,
    /// Registers that most recently received a fresh capability.
    recent: Vec<Reg>,
    ops: Vec<Opcode>,
    weights: Vec<u32>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a FuzzConfig, seed: u64) -> Self {
        let (ops, weights) = cfg.op_weights.iter().map(|(&o, &w)| (o, w)).unzip();
        Generator {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            machine: Machine::with_model(cfg.machine_config(), Kernel::new(cfg.kernel)),
            recent: Vec::new(),
            ops,
            weights,
        }
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.gen_bool(p)
    }

    fn any_reg(&mut self) -> Reg {
        Reg(self.rng.gen_range(1..16))
    }

    fn pointer_regs(&self) -> Vec<Reg> {
        (1..crate::trace::NUM_REGS)
            .map(Reg)
            .filter(|&r| !self.machine.reg(r).provenance.is_empty())
            .collect()
    }

    fn pointer_reg(&mut self) -> Option<Reg> {
        while let Some(&r) = self.recent.last() {
            if self.machine.reg(r).provenance.is_empty() {
                self.recent.pop();
            } else {
                break;
            }
        }
        if let Some(&r) = self.recent.last() {
            if self.chance(0.5) {
                return Some(r);
            }
        }
        self.pointer_regs().choose(&mut self.rng).copied()
    }

    fn base_reg(&mut self) -> Reg {
        match self.pointer_reg() {
            Some(r) if self.rng.gen_bool(0.9) => r,
            _ => self.any_reg(),
        }
    }

    fn pool_address(&mut self) -> u64 {
        let base = *self.cfg.address_pool.choose(&mut self.rng).expect("validated");
        base + 8 * self.rng.gen_range(0..8)
    }

    /// Bounds of one capability `reg` may point through.
    fn bounds_of(&mut self, reg: Reg) -> Option<(u64, u64)> {
        let prov = self.machine.reg(reg).provenance.clone();
        let id = *prov.choose(&mut self.rng)?;
        self.machine.model().get(id).map(|c| (c.lo, c.hi))
    }

    fn instr(&mut self) -> Instr {
        let op = self.ops[rand::distributions::WeightedIndex::new(&self.weights)
            .expect("validated")
            .sample(&mut self.rng)];
        match op {
            Opcode::Li => {
                let imm = if self.chance(0.5) {
                    self.rng.gen_range(-64..64)
                } else {
                    self.pool_address() as i64
                };
                Instr::Li {
                    rd: self.any_reg(),
                    imm,
                }
            }
            Opcode::Mv => {
                let rs = self.base_reg();
                Instr::Mv { rd: self.any_reg(), rs }
            }
            Opcode::Add => {
                let rs1 = self.base_reg();
                let rs2 = if self.chance(0.6) {
                    self.base_reg()
                } else {
                    self.any_reg()
                };
                Instr::Add {
                    rd: self.any_reg(),
                    rs1,
                    rs2,
                }
            }
            Opcode::Addi => {
                let rs = self.base_reg();
                let imm = 8 * self.rng.gen_range(-4..5);
                Instr::Addi {
                    rd: self.any_reg(),
                    rs,
                    imm,
                }
            }
            Opcode::Alloc => self.alloc(),
            Opcode::Borrow => match self.pointer_reg() {
                Some(rs) => self.borrow(rs),
                None => self.alloc(),
            },
            Opcode::Drop => {
                let rs = match self.pointer_reg() {
                    Some(r) if self.chance(0.85) => r,
                    _ => self.any_reg(),
                };
                Instr::Drop { rs }
            }
            Opcode::Ld | Opcode::Sd => {
                let base = self.base_reg();
                let width = *[8u8, 8, 8, 4, 2, 1].choose(&mut self.rng).expect("non-empty");
                let addr = self.access_address(base, u64::from(width));
                let off = addr.wrapping_sub(self.machine.reg(base).value) as i64;
                if op == Opcode::Ld {
                    Instr::Ld {
                        rd: self.any_reg(),
                        off,
                        rs: base,
                        width,
                    }
                } else {
                    let rs2 = match self.rng.gen_range(0..10) {
                        0..=3 => self.pointer_reg().unwrap_or(Reg::ZERO),
                        4 => Reg::ZERO,
                        _ => self.any_reg(),
                    };
                    Instr::Sd {
                        rs2,
                        off,
                        rs1: base,
                        width,
                    }
                }
            }
        }
    }

    fn alloc(&mut self) -> Instr {
        let kind = match self.rng.gen_range(0..20) {
            0..=2 => Some(AllocKind::Cell),
            3 => Some(AllocKind::Ref),
            _ => None,
        };
        Instr::Alloc {
            rd: self.any_reg(),
            addr: self.pool_address(),
            len: *[8u64, 16, 32, 64].choose(&mut self.rng).expect("non-empty"),
            kind,
        }
    }

    fn borrow(&mut self, rs: Reg) -> Instr {
        let kind = match self.rng.gen_range(0..100) {
            0..=29 => BorrowKind::Mut,
            30..=59 => BorrowKind::Imm,
            60..=74 => BorrowKind::RawMut,
            75..=84 => BorrowKind::RawImm,
            _ => BorrowKind::Cell,
        };
        let bounds = match (self.bounds_of(rs), self.rng.gen_range(0..20)) {
            (Some(_), 0..=8) | (None, _) => None,
            (Some((lo, hi)), 9..=17) => {
                let words = (hi - lo) / 8;
                if words == 0 {
                    Some((lo, hi))
                } else {
                    let a = self.rng.gen_range(0..words);
                    let b = self.rng.gen_range(a + 1..=words);
                    Some((lo + 8 * a, lo + 8 * b))
                }
            }
            (Some((lo, hi)), _) => Some(if self.chance(0.5) {
                (lo, hi + 8)
            } else {
                (lo.saturating_sub(8), hi)
            }),
        };
        Instr::Borrow {
            rd: self.any_reg(),
            rs,
            kind,
            bounds: bounds.filter(|(lo, hi)| lo < hi),
        }
    }

    fn access_address(&mut self, base: Reg, width: u64) -> u64 {
        let value = self.machine.reg(base).value;
        let Some((lo, hi)) = self.bounds_of(base) else {
            return value.wrapping_add(8 * self.rng.gen_range(0..4));
        };
        let addr = if self.chance(0.9) {
            let span = (hi - lo).saturating_sub(width);
            lo + self.rng.gen_range(0..=span)
        } else if self.chance(0.5) {
            hi.saturating_sub(width / 2)
        } else {
            hi
        };
        // mostly aligned, so 8-byte stores become spills
        if self.chance(0.85) {
            addr - addr % width
        } else {
            addr
        }
    }

    fn push(&mut self, instr: Instr, index: usize) -> bool {
        match self.machine.exec(index, &instr) {
            Ok(StepResult::Ok | StepResult::Violation(_)) => {
                if let Instr::Alloc { rd, .. } | Instr::Borrow { rd, .. } = instr {
                    if !self.machine.reg(rd).provenance.is_empty() {
                        self.recent.push(rd);
                    }
                }
                true
            }
            Ok(StepResult::Halt) => true,
            Err(_) => false,
        }
    }
}

/// Generates trace `index` of the corpus described by `config`.
///
/// Generation is a pure function of `(config, index)`. Operands are picked
/// from the live state of a machine that executes the trace as it is built,
/// so most accesses go through live capabilities near their bounds.
pub fn generate(config: &FuzzConfig, index: u64) -> TraceProgram {
    generate_with_len(config, index, config.events_per_trace)
}

pub fn generate_with_len(config: &FuzzConfig, index: u64, events: usize) -> TraceProgram {
    config.validate().expect("invalid fuzz config");
    let mut g = Generator::new(config, config.trace_seed(index));
    let mut instrs = Vec::with_capacity(events);
    let mut failures = 0;
    while instrs.len() < events {
        let instr = g.instr();
        if g.push(instr, instrs.len()) {
            instrs.push(instr);
        } else {
            // the machine refused (pool exhausted); free something instead
            failures += 1;
            assert!(failures < 1000, "generator cannot make progress");
        }
    }
    TraceProgram::from_instrs(instrs)
}

// ---------------------------------------------------------------------------
// Differential checking

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingKind {
    VerdictMismatch,
    PermissionMapMismatch,
    WellNested,
    ExclusiveAccess,
    WorkBound,
    Refcount,
    RecycledSlot,
    EndToEnd,
    MachineError,
}

impl fmt::Display for FindingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializes");
        f.write_str(s.as_str().expect("string"))
    }
}

/// One discrepancy or invariant breach found while checking a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    /// Index into the kernel-operation stream (or event index for
    /// machine-level findings).
    pub step: Option<usize>,
    pub kernel_verdict: Option<String>,
    pub oracle_verdict: Option<String>,
    pub detail: String,
}

impl Finding {
    fn new(kind: FindingKind, step: Option<usize>, detail: impl Into<String>) -> Self {
        Finding {
            kind,
            step,
            kernel_verdict: None,
            oracle_verdict: None,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub seed: u64,
    pub trace_index: u64,
    pub finding: Finding,
    pub trace: TraceProgram,
    pub shrunk: TraceProgram,
}

/// Per-trace counters that feed the aggregate report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStats {
    pub events: u64,
    pub kernel_ops: u64,
    /// Event verdicts: `ok` or a violation kind name.
    pub verdicts: BTreeMap<String, u64>,
    pub rejected: bool,
    pub caps_created: u64,
    pub caps_invalidated: u64,
    pub refcount_audits: u64,
    pub well_nested_checks: u64,
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub finding: Option<Finding>,
    pub stats: TraceStats,
}

/// Runs every differential check on one program; returns the first finding.
pub fn check_program(config: &FuzzConfig, program: &TraceProgram) -> CheckResult {
    let mut stats = TraceStats::default();
    let finding = check_inner(config, program, &mut stats);
    CheckResult { finding, stats }
}

fn check_inner(config: &FuzzConfig, program: &TraceProgram, stats: &mut TraceStats) -> Option<Finding> {
    let mconfig = config.machine_config();
    let mut machine = Machine::with_model(mconfig, config.kernel());
    let mut violations = Vec::new();
    for (i, instr) in program.instrs().enumerate() {
        stats.events += 1;
        match machine.exec(i, instr) {
            Ok(StepResult::Violation(v)) => {
                *stats.verdicts.entry(v.kind.to_string()).or_insert(0) += 1;
                violations.push(v);
            }
            Ok(StepResult::Ok) => {}
            Ok(StepResult::Halt) => break,
            Err(e) => return Some(Finding::new(FindingKind::MachineError, Some(i), e.to_string())),
        }
        if config.audit_interval > 0 && machine.steps().is_multiple_of(config.audit_interval) {
            stats.refcount_audits += 1;
            if let Some(f) = refcount_finding(&machine, Some(i)) {
                return Some(f);
            }
        }
    }
    let ambiguous: HashSet<usize> = machine
        .diagnostics()
        .iter()
        .filter(|d| matches!(d.kind, DiagnosticKind::ProvenanceAmbiguous { .. }))
        .map(|d| d.event_index)
        .collect();
    let mut noted = 0;
    for &i in &ambiguous {
        if !violations.iter().any(|v| v.event_index == i) {
            noted += 1;
        }
    }
    if noted > 0 {
        *stats.verdicts.entry("provenance-ambiguous".into()).or_insert(0) += noted;
    }
    let ok_events = stats.events - violations.len() as u64 - noted;
    *stats.verdicts.entry("ok".into()).or_insert(0) += ok_events;
    stats.rejected = !violations.is_empty();
    stats.caps_created = machine.stats().caps_created;
    stats.caps_invalidated = machine.stats().caps_invalidated;
    stats.kernel_ops = machine.ops().len() as u64;

    stats.refcount_audits += 1;
    if let Some(f) = refcount_finding(&machine, None) {
        return Some(f);
    }
    let recycled = machine.audit_recycled();
    if !recycled.is_empty() {
        return Some(Finding::new(
            FindingKind::RecycledSlot,
            None,
            format!("recycled capabilities still live or referenced: {recycled:?}"),
        ));
    }

    if let Some(f) = replay(config, &machine, stats) {
        return Some(f);
    }
    if let Some(f) = work_bound(&machine) {
        return Some(f);
    }
    let log = AccessLog::from_ops(machine.ops().iter().map(|r| (&r.op, &r.verdict)));
    let pairs = check_exclusive_access(&log, config.kernel);
    if let Some(&(t1, t2)) = pairs.first() {
        return Some(Finding::new(
            FindingKind::ExclusiveAccess,
            Some(t2 as usize),
            format!(
                "conflicting accesses at kernel steps {t1} and {t2} ({} pairs)",
                pairs.len()
            ),
        ));
    }
    if config.end_to_end {
        return end_to_end(config, program, &machine);
    }
    None
}

fn refcount_finding<M: CapabilityModel>(machine: &Machine<M>, step: Option<usize>) -> Option<Finding> {
    let mismatches = machine.audit_refcounts();
    let first = mismatches.first()?;
    Some(Finding::new(
        FindingKind::Refcount,
        step,
        format!(
            "capability {} has refcount {} but {} shadow references",
            first.cap, first.recorded, first.actual
        ),
    ))
}

/// Replays the machine's kernel-op stream on a fresh kernel and on the
/// oracle in lockstep.
fn replay(config: &FuzzConfig, machine: &Machine, stats: &mut TraceStats) -> Option<Finding> {
    let mut kernel = config.kernel();
    let mut oracle = OracleState::new(config.kernel);
    for (step, record) in machine.ops().iter().enumerate() {
        let kv = kernel.apply(record.op);
        let ov = oracle.apply(record.op);
        if kv != ov || kv != record.verdict {
            return Some(Finding {
                kind: FindingKind::VerdictMismatch,
                step: Some(step),
                kernel_verdict: Some(format!("{kv:?}")),
                oracle_verdict: Some(format!("{ov:?}")),
                detail: format!("{} at event {}", record.op, record.event_index),
            });
        }
        stats.well_nested_checks += 1;
        let broken = check_well_nested_map(&kernel.snapshot());
        if !broken.is_empty() {
            return Some(Finding::new(
                FindingKind::WellNested,
                Some(step),
                format!(
                    "after {}: capabilities {broken:?} outlive or exceed their parents",
                    record.op
                ),
            ));
        }
    }
    let (k, o) = (kernel.snapshot(), oracle.snapshot());
    if k != o {
        let diff = k
            .iter()
            .find(|(id, c)| o.get(id) != Some(c))
            .map(|(id, c)| format!("capability {id}: kernel {c:?}, oracle {:?}", o.get(id)))
            .unwrap_or_else(|| "capability sets differ".into());
        return Some(Finding::new(FindingKind::PermissionMapMismatch, None, diff));
    }
    None
}

fn work_bound(machine: &Machine) -> Option<Finding> {
    let mut seen = HashSet::new();
    let mut created = 0u64;
    let mut invalidated = 0u64;
    for (step, record) in machine.ops().iter().enumerate() {
        match &record.verdict {
            Ok(OpOutcome::Created(_)) => created += 1,
            Ok(OpOutcome::Revoked(ids)) => {
                for &id in ids {
                    invalidated += 1;
                    if !seen.insert(id) {
                        return Some(Finding::new(
                            FindingKind::WorkBound,
                            Some(step),
                            format!("capability {id} invalidated twice"),
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    (invalidated > created).then(|| {
        Finding::new(
            FindingKind::WorkBound,
            None,
            format!("{invalidated} invalidations for {created} creations"),
        )
    })
}

fn end_to_end(config: &FuzzConfig, program: &TraceProgram, kernel_machine: &Machine) -> Option<Finding> {
    let mut naive = Machine::with_model(config.machine_config(), OracleState::new(config.kernel));
    for (i, instr) in program.instrs().enumerate() {
        match naive.exec(i, instr) {
            Ok(StepResult::Halt) => break,
            Ok(_) => {}
            Err(MachineError::PoolExhausted { .. }) | Err(MachineError::Malformed { .. }) => {
                return Some(Finding::new(FindingKind::EndToEnd, Some(i), "oracle machine failed"));
            }
        }
    }
    let (a, b) = (kernel_machine.ops(), naive.ops());
    if let Some(step) = (0..a.len().max(b.len())).find(|&i| a.get(i) != b.get(i)) {
        return Some(Finding {
            kind: FindingKind::EndToEnd,
            step: Some(step),
            kernel_verdict: a.get(step).map(|r| format!("{} -> {:?}", r.op, r.verdict)),
            oracle_verdict: b.get(step).map(|r| format!("{} -> {:?}", r.op, r.verdict)),
            detail: "kernel-operation streams diverge".into(),
        });
    }
    if kernel_machine.registers() != naive.registers() {
        return Some(Finding::new(FindingKind::EndToEnd, None, "final registers differ"));
    }
    if kernel_machine.diagnostics() != naive.diagnostics() {
        return Some(Finding::new(FindingKind::EndToEnd, None, "diagnostics differ"));
    }
    if kernel_machine.model().snapshot() != naive.model().snapshot() {
        return Some(Finding::new(
            FindingKind::EndToEnd,
            None,
            "final capability maps differ",
        ));
    }
    None
}

// ---------------------------------------------------------------------------
// Shrinking

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("the predicate does not hold on the input trace")]
pub struct PredicateFalse;

/// Greedy minimization: chunked event deletion, then per-event operand
/// simplification, repeated to a fixed point. The result always satisfies
/// `predicate`. Comments and expectations are dropped.
pub fn shrink(
    trace: &TraceProgram,
    mut predicate: impl FnMut(&TraceProgram) -> bool,
) -> Result<TraceProgram, PredicateFalse> {
    let mut best: Vec<Instr> = trace.instrs().copied().collect();
    let mut holds = |instrs: &[Instr]| predicate(&TraceProgram::from_instrs(instrs.iter().copied()));
    if !holds(&best) {
        return Err(PredicateFalse);
    }
    loop {
        let mut progress = false;
        let mut chunk = best.len().div_ceil(2).max(1);
        loop {
            let mut start = 0;
            while start < best.len() {
                let end = (start + chunk).min(best.len());
                let candidate: Vec<Instr> = best[..start].iter().chain(&best[end..]).copied().collect();
                if holds(&candidate) {
                    best = candidate;
                    progress = true;
                } else {
                    start = end;
                }
            }
            if chunk == 1 {
                break;
            }
            chunk /= 2;
        }
        for i in 0..best.len() {
            for simpler in simplifications(&best[i]) {
                let mut candidate = best.clone();
                candidate[i] = simpler;
                if holds(&candidate) {
                    best = candidate;
                    progress = true;
                    break;
                }
            }
        }
        if !progress {
            return Ok(TraceProgram::from_instrs(best));
        }
    }
}

/// Strictly simpler variants of an instruction, simplest first.
fn simplifications(instr: &Instr) -> Vec<Instr> {
    let mut out = Vec::new();
    match *instr {
        Instr::Li { rd, imm } if imm != 0 => out.push(Instr::Li { rd, imm: 0 }),
        Instr::Add { rd, rs1, rs2 } => {
            out.push(Instr::Mv { rd, rs: rs1 });
            out.push(Instr::Mv { rd, rs: rs2 });
        }
        Instr::Addi { rd, rs, imm } if imm != 0 => out.push(Instr::Mv { rd, rs }),
        Instr::Alloc {
            rd,
            addr,
            len,
            kind: Some(_),
        } => out.push(Instr::Alloc {
            rd,
            addr,
            len,
            kind: None,
        }),
        Instr::Borrow {
            rd,
            rs,
            kind,
            bounds: Some(_),
        } => out.push(Instr::Borrow {
            rd,
            rs,
            kind,
            bounds: None,
        }),
        Instr::Sd { rs2, off, rs1, width } if rs2 != Reg::ZERO => out.push(Instr::Sd {
            rs2: Reg::ZERO,
            off,
            rs1,
            width,
        }),
        _ => {}
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus runs

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub traces: u64,
    pub events: u64,
    pub kernel_ops: u64,
    pub traces_with_rejection: u64,
    pub verdicts: BTreeMap<String, u64>,
    pub caps_created: u64,
    pub caps_invalidated: u64,
    pub refcount_audits: u64,
    pub well_nested_checks: u64,
    pub discrepancies: Vec<Discrepancy>,
}

impl FuzzReport {
    pub fn is_clean(&self) -> bool {
        self.discrepancies.is_empty()
    }

    /// Fraction of traces with at least one rejected event.
    pub fn rejection_rate(&self) -> f64 {
        if self.traces == 0 {
            0.0
        } else {
            self.traces_with_rejection as f64 / self.traces as f64
        }
    }

    fn absorb(&mut self, stats: &TraceStats) {
        self.traces += 1;
        self.events += stats.events;
        self.kernel_ops += stats.kernel_ops;
        self.traces_with_rejection += u64::from(stats.rejected);
        for (k, v) in &stats.verdicts {
            *self.verdicts.entry(k.clone()).or_insert(0) += v;
        }
        self.caps_created += stats.caps_created;
        self.caps_invalidated += stats.caps_invalidated;
        self.refcount_audits += stats.refcount_audits;
        self.well_nested_checks += stats.well_nested_checks;
    }
}

/// Generates, checks and (on failure) shrinks one trace.
pub fn run_trace(config: &FuzzConfig, index: u64) -> (TraceStats, Option<Discrepancy>) {
    let trace = generate(config, index);
    let result = check_program(config, &trace);
    let discrepancy = result.finding.map(|finding| {
        let kind = finding.kind;
        let shrunk = shrink(&trace, |t| {
            check_program(config, t).finding.is_some_and(|f| f.kind == kind)
        })
        .expect("the generated trace fails");
        Discrepancy {
            seed: config.seed,
            trace_index: index,
            finding,
            trace,
            shrunk,
        }
    });
    (result.stats, discrepancy)
}

/// Runs the whole corpus, in parallel when `config.jobs != 1`. The report
/// does not depend on the number of workers.
pub fn run_differential(config: &FuzzConfig) -> FuzzReport {
    config.validate().expect("invalid fuzz config");
    let indices = 0..config.trace_count as u64;
    let results: Vec<(TraceStats, Option<Discrepancy>)> = if config.jobs == 1 {
        indices.map(|i| run_trace(config, i)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .expect("thread pool");
        pool.install(|| indices.into_par_iter().map(|i| run_trace(config, i)).collect())
    };
    let mut report = FuzzReport {
        seed: config.seed,
        ..FuzzReport::default()
    };
    for (stats, discrepancy) in results {
        report.absorb(&stats);
        report.discrepancies.extend(discrepancy);
    }
    report
}

/// Whether a capability id shows up as invalidated more than once in a
/// verdict stream. Exposed for the throughput and work-bound checks.
pub fn repeated_invalidations<'a>(verdicts: impl IntoIterator<Item = &'a OpOutcome>) -> Vec<CapId> {
    let mut seen = HashSet::new();
    let mut repeated = Vec::new();
    for outcome in verdicts {
        if let OpOutcome::Revoked(ids) = outcome {
            for &id in ids {
                if !seen.insert(id) {
                    repeated.push(id);
                }
            }
        }
    }
    repeated
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{parse, serialize};

    fn small(traces: usize, events: usize) -> FuzzConfig {
        FuzzConfig {
            seed: 7,
            trace_count: traces,
            events_per_trace: events,
            ..FuzzConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = FuzzConfig {
            seed: 1,
            events_per_trace: 16,
            ..FuzzConfig::default()
        };
        assert_eq!(generate(&cfg, 0), generate(&cfg, 0));
        assert_eq!(generate(&cfg, 0).len(), 16);
        assert_ne!(generate(&cfg, 0), generate(&cfg, 1));
    }

    #[test]
    fn generated_traces_round_trip() {
        let cfg = small(1, 64);
        for i in 0..20 {
            let t = generate(&cfg, i);
            assert_eq!(parse(&serialize(&t)).unwrap(), t);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FuzzConfig::default();
        cfg.op_weights.values_mut().for_each(|w| *w = 0);
        assert_eq!(cfg.validate(), Err(FuzzConfigError::NoPositiveWeight));
        let cfg = FuzzConfig {
            address_pool: vec![],
            ..FuzzConfig::default()
        };
        assert_eq!(cfg.validate(), Err(FuzzConfigError::EmptyAddressPool));
    }

    #[test]
    fn small_corpus_is_clean() {
        let report = run_differential(&small(200, 64));
        assert!(report.is_clean(), "{:#?}", report.discrepancies.first());
        assert_eq!(report.traces, 200);
    }

    #[test]
    fn report_is_independent_of_jobs() {
        let mut cfg = small(40, 32);
        cfg.jobs = 1;
        let a = run_differential(&cfg);
        cfg.jobs = 3;
        assert_eq!(a, run_differential(&cfg));
    }

    #[test]
    fn injected_fault_is_caught_and_shrunk() {
        let mut cfg = small(300, 128);
        cfg.fault = Some(KernelFault::SkipDisconnect);
        let report = run_differential(&cfg);
        let d = report.discrepancies.first().expect("fault detected");
        assert!(d.shrunk.len() <= d.trace.len());
        let replay = check_program(&cfg, &d.shrunk);
        assert_eq!(replay.finding.map(|f| f.kind), Some(d.finding.kind));
    }

    #[test]
    fn shrink_rejects_false_predicate() {
        let t = TraceProgram::from_instrs([Instr::Halt]);
        assert_eq!(shrink(&t, |_| false), Err(PredicateFalse));
    }

    #[test]
    fn shrink_keeps_minimal_trace() {
        let t = parse("alloc r1, 0x1000, 8\ndrop r1\n").unwrap();
        let pred = |p: &TraceProgram| p.len() == 2;
        assert_eq!(shrink(&t, pred).unwrap(), t);
    }

    #[test]
    fn shrink_finds_core() {
        let t = parse("li r5, 3\nalloc r1, 0x1000, 8\nli r6, 4\ndrop r1\nmv r7, r6\nsd r0, 0(r1), 8\nhalt").unwrap();
        let cfg = FuzzConfig::default();
        let pred = |p: &TraceProgram| {
            let mut m = Machine::new(cfg.machine_config());
            m.run(p)
                .unwrap()
                .violations
                .iter()
                .any(|v| v.kind == crate::machine::ViolationKind::InvalidCapabilityStore)
        };
        let shrunk = shrink(&t, pred).unwrap();
        assert_eq!(serialize(&shrunk), "alloc r1, 0x1000, 8\ndrop r1\nsd r0, 0(r1), 8\n");
    }
}
