//! Register/memory machine that executes traces against a capability model.
//!
//! Values carry a provenance list of capability ids. Capability metadata
//! lives out of band: 8-byte aligned shadow slots hold the provenance of
//! the last capability-bearing word written there, and a fixed-size
//! metadata pool accounts for per-capability storage with reference counts.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    BorrowKind, CapId, Capability, CapabilityModel, Kernel, KernelConfig, KernelError, KernelOp, OpOutcome, Permission,
    Verdict,
};
use crate::trace::{AllocKind, Instr, Reg, TraceProgram, NUM_REGS};

pub const SLOT_BYTES: u64 = 8;
pub const DEFAULT_POOL_SIZE: usize = 65536;
pub const DEFAULT_PROVENANCE_BOUND: usize = 8;

/// Catalog of reportable violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    InvalidCapabilityLoad,
    InvalidCapabilityStore,
    PermissionStore,
    OutOfBoundsLoad,
    OutOfBoundsStore,
    BorrowFromInvalid,
    BorrowMutFromRo,
    BoundsNotSubset,
    DropInvalid,
    UntrackedAccess,
    ProvenanceAmbiguous,
}

impl ViolationKind {
    pub const ALL: [ViolationKind; 11] = [
        ViolationKind::InvalidCapabilityLoad,
        ViolationKind::InvalidCapabilityStore,
        ViolationKind::PermissionStore,
        ViolationKind::OutOfBoundsLoad,
        ViolationKind::OutOfBoundsStore,
        ViolationKind::BorrowFromInvalid,
        ViolationKind::BorrowMutFromRo,
        ViolationKind::BoundsNotSubset,
        ViolationKind::DropInvalid,
        ViolationKind::UntrackedAccess,
        ViolationKind::ProvenanceAmbiguous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::InvalidCapabilityLoad => "invalid-capability-load",
            ViolationKind::InvalidCapabilityStore => "invalid-capability-store",
            ViolationKind::PermissionStore => "permission-store",
            ViolationKind::OutOfBoundsLoad => "out-of-bounds-load",
            ViolationKind::OutOfBoundsStore => "out-of-bounds-store",
            ViolationKind::BorrowFromInvalid => "borrow-from-invalid",
            ViolationKind::BorrowMutFromRo => "borrow-mut-from-ro",
            ViolationKind::BoundsNotSubset => "bounds-not-subset",
            ViolationKind::DropInvalid => "drop-invalid",
            ViolationKind::UntrackedAccess => "untracked-access",
            ViolationKind::ProvenanceAmbiguous => "provenance-ambiguous",
        }
    }

    fn from_kernel(e: KernelError) -> Option<Self> {
        Some(match e {
            KernelError::BorrowFromInvalid => ViolationKind::BorrowFromInvalid,
            KernelError::BorrowMutFromRo => ViolationKind::BorrowMutFromRo,
            KernelError::BoundsNotSubset => ViolationKind::BoundsNotSubset,
            KernelError::DropInvalid => ViolationKind::DropInvalid,
            KernelError::InvalidCapLoad => ViolationKind::InvalidCapabilityLoad,
            KernelError::InvalidCapStore => ViolationKind::InvalidCapabilityStore,
            KernelError::PermissionStore => ViolationKind::PermissionStore,
            KernelError::OutOfBoundsLoad => ViolationKind::OutOfBoundsLoad,
            KernelError::OutOfBoundsStore => ViolationKind::OutOfBoundsStore,
            KernelError::EmptyRange
            | KernelError::UnknownCap(_)
            | KernelError::ZeroWidth
            | KernelError::AddressOverflow => return None,
        })
    }
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown violation kind `{0}`")]
pub struct UnknownViolationKind(pub String);

impl FromStr for ViolationKind {
    type Err = UnknownViolationKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ViolationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownViolationKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Capability-less accesses are allowed outside live allocations.
    #[default]
    Compat,
    /// Every capability-less access is a violation.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnViolation {
    #[default]
    Halt,
    /// Skip the faulting event, strip the offending register's provenance
    /// and keep going.
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub kernel: KernelConfig,
    pub mode: Mode,
    pub on_violation: OnViolation,
    pub pool_size: usize,
    pub provenance_bound: usize,
    /// Treat ambiguous provenance resolution as a violation.
    pub ambiguity_fatal: bool,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            kernel: KernelConfig::default(),
            mode: Mode::Compat,
            on_violation: OnViolation::Halt,
            pool_size: DEFAULT_POOL_SIZE,
            provenance_bound: DEFAULT_PROVENANCE_BOUND,
            ambiguity_fatal: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Register {
    pub value: u64,
    pub provenance: Vec<CapId>,
}

impl Register {
    pub fn data(value: u64) -> Self {
        Register {
            value,
            provenance: Vec::new(),
        }
    }

    pub fn is_plain_data(&self) -> bool {
        self.provenance.is_empty()
    }
}

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

/// Sparse little-endian byte memory; untouched bytes read as zero.
#[derive(Debug, Clone, Default)]
pub struct DataMemory {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE]>>,
}

impl DataMemory {
    pub fn read_byte(&self, addr: u64) -> u8 {
        self.pages
            .get(&(addr >> PAGE_BITS))
            .map_or(0, |p| p[(addr as usize) & (PAGE_SIZE - 1)])
    }

    pub fn write_byte(&mut self, addr: u64, byte: u8) {
        let page = self
            .pages
            .entry(addr >> PAGE_BITS)
            .or_insert_with(|| Box::new([0; PAGE_SIZE]));
        page[(addr as usize) & (PAGE_SIZE - 1)] = byte;
    }

    pub fn read(&self, addr: u64, width: u64) -> u64 {
        (0..width).fold(0u64, |acc, i| {
            acc | (u64::from(self.read_byte(addr.wrapping_add(i))) << (8 * i))
        })
    }

    pub fn write(&mut self, addr: u64, width: u64, value: u64) {
        for i in 0..width {
            self.write_byte(addr.wrapping_add(i), (value >> (8 * i)) as u8);
        }
    }
}

/// Provenance lists keyed by 8-byte aligned address.
#[derive(Debug, Clone, Default)]
pub struct ShadowMemory {
    slots: HashMap<u64, Vec<CapId>>,
}

impl ShadowMemory {
    pub fn get(&self, slot: u64) -> Option<&[CapId]> {
        self.slots.get(&slot).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[CapId])> {
        self.slots.iter().map(|(&a, v)| (a, v.as_slice()))
    }
}

/// Fixed number of physical metadata slots plus per-capability refcounts.
#[derive(Debug, Clone)]
pub struct MetadataPool {
    capacity: usize,
    slot_of: HashMap<CapId, usize>,
    free: Vec<usize>,
    next_fresh: usize,
    refcount: HashMap<CapId, u32>,
    recycled: Vec<CapId>,
}

impl MetadataPool {
    pub fn new(capacity: usize) -> Self {
        MetadataPool {
            capacity,
            slot_of: HashMap::new(),
            free: Vec::new(),
            next_fresh: 0,
            refcount: HashMap::new(),
            recycled: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn in_use(&self) -> usize {
        self.slot_of.len()
    }

    /// Slots that can be handed out without reclaiming.
    pub fn available(&self) -> usize {
        self.free.len() + (self.capacity - self.next_fresh)
    }

    fn assign(&mut self, id: CapId) {
        let slot = self.free.pop().unwrap_or_else(|| {
            self.next_fresh += 1;
            self.next_fresh - 1
        });
        debug_assert!(slot < self.capacity);
        self.slot_of.insert(id, slot);
    }

    fn release(&mut self, id: CapId) {
        if let Some(slot) = self.slot_of.remove(&id) {
            self.free.push(slot);
            self.refcount.remove(&id);
            self.recycled.push(id);
        }
    }

    pub fn slot(&self, id: CapId) -> Option<usize> {
        self.slot_of.get(&id).copied()
    }

    pub fn refcount(&self, id: CapId) -> u32 {
        self.refcount.get(&id).copied().unwrap_or(0)
    }

    /// Capabilities whose slots have been recycled, in recycling order.
    pub fn recycled(&self) -> &[CapId] {
        &self.recycled
    }

    fn incr(&mut self, id: CapId) {
        *self.refcount.entry(id).or_insert(0) += 1;
    }

    fn decr(&mut self, id: CapId) {
        if let Some(n) = self.refcount.get_mut(&id) {
            *n -= 1;
            if *n == 0 {
                self.refcount.remove(&id);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeRow {
    pub cap: CapId,
    pub parent: Option<CapId>,
    pub lo: u64,
    pub hi: u64,
    pub perm: Permission,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub event_index: usize,
    pub kind: ViolationKind,
    pub cap: Option<CapId>,
    /// Root-to-leaf chain ending at `cap`.
    pub parents: Vec<CapId>,
    pub addr: Option<u64>,
    pub width: Option<u64>,
    pub message: String,
    /// The borrow tree containing `cap`, when capture is enabled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree: Option<Vec<TreeRow>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DiagnosticKind {
    ProvenanceAmbiguous { chosen: CapId, candidates: Vec<CapId> },
    ProvenanceTruncated { dropped: Vec<CapId> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub event_index: usize,
    #[serde(flatten)]
    pub kind: DiagnosticKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    Ok,
    Halt,
    Violation(ViolationReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("event {event_index}: metadata pool of {capacity} slots exhausted and nothing is reclaimable")]
    PoolExhausted { event_index: usize, capacity: usize },
    #[error("event {event_index}: malformed kernel request: {error}")]
    Malformed { event_index: usize, error: KernelError },
}

/// A kernel operation the machine issued, with its verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRecord {
    pub event_index: usize,
    pub op: KernelOp,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineStats {
    pub caps_created: u64,
    pub caps_invalidated: u64,
    pub caps_demoted: u64,
    pub reclaim_runs: u64,
    pub slots_recycled: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefcountMismatch {
    pub cap: CapId,
    pub recorded: u32,
    pub actual: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub violations: Vec<ViolationReport>,
    pub events_executed: usize,
    pub halted: bool,
}

impl RunOutcome {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

enum Resolved {
    Cap(CapId),
    Untracked,
}

/// Early exit from an event: either a report or a hard machine error.
enum Fault {
    Violation(Box<ViolationReport>, Option<Reg>),
    Error(MachineError),
}

impl From<MachineError> for Fault {
    fn from(e: MachineError) -> Self {
        Fault::Error(e)
    }
}

pub struct Machine<M: CapabilityModel = Kernel> {
    config: MachineConfig,
    regs: Vec<Register>,
    memory: DataMemory,
    shadow: ShadowMemory,
    pool: MetadataPool,
    model: M,
    step: u64,
    event_index: usize,
    ops: Vec<OpRecord>,
    diagnostics: Vec<Diagnostic>,
    stats: MachineStats,
    capture_trees: bool,
    record_ops: bool,
}

impl Machine<Kernel> {
    pub fn new(config: MachineConfig) -> Self {
        Machine::with_model(config, Kernel::new(config.kernel))
    }
}

impl<M: CapabilityModel> Machine<M> {
    pub fn with_model(config: MachineConfig, model: M) -> Self {
        Machine {
            config,
            regs: vec![Register::default(); NUM_REGS as usize],
            memory: DataMemory::default(),
            shadow: ShadowMemory::default(),
            pool: MetadataPool::new(config.pool_size),
            model,
            step: 0,
            event_index: 0,
            ops: Vec::new(),
            diagnostics: Vec::new(),
            stats: MachineStats::default(),
            capture_trees: false,
            record_ops: true,
        }
    }

    /// Attach the containing borrow tree to every report.
    pub fn capture_trees(&mut self, on: bool) {
        self.capture_trees = on;
    }

    /// Stop keeping the kernel-op log (for very long runs).
    pub fn record_ops(&mut self, on: bool) {
        self.record_ops = on;
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn reg(&self, r: Reg) -> &Register {
        &self.regs[r.index()]
    }

    pub fn registers(&self) -> &[Register] {
        &self.regs
    }

    pub fn memory(&self) -> &DataMemory {
        &self.memory
    }

    pub fn shadow(&self) -> &ShadowMemory {
        &self.shadow
    }

    pub fn pool(&self) -> &MetadataPool {
        &self.pool
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn ops(&self) -> &[OpRecord] {
        &self.ops
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn stats(&self) -> MachineStats {
        self.stats
    }

    fn set_reg(&mut self, r: Reg, value: Register) {
        if r != Reg::ZERO {
            self.regs[r.index()] = value;
        }
    }

    /// Runs every event until `halt`, the end of the program, or (in halt
    /// mode) the first violation.
    pub fn run(&mut self, program: &TraceProgram) -> Result<RunOutcome, MachineError> {
        let mut violations = Vec::new();
        let mut executed = 0;
        let mut halted = false;
        for (index, event) in program.events.iter().enumerate() {
            executed += 1;
            match self.exec(index, &event.instr)? {
                StepResult::Ok => {}
                StepResult::Halt => {
                    halted = true;
                    break;
                }
                StepResult::Violation(report) => {
                    violations.push(report);
                    if self.config.on_violation == OnViolation::Halt {
                        halted = true;
                        break;
                    }
                }
            }
        }
        Ok(RunOutcome {
            violations,
            events_executed: executed,
            halted,
        })
    }

    /// Executes one instruction.
    pub fn exec(&mut self, event_index: usize, instr: &Instr) -> Result<StepResult, MachineError> {
        self.step += 1;
        self.event_index = event_index;
        match self.exec_inner(instr) {
            Ok(r) => Ok(r),
            Err(Fault::Error(e)) => Err(e),
            Err(Fault::Violation(report, culprit)) => {
                if self.config.on_violation == OnViolation::Continue {
                    if let Some(r) = culprit {
                        if r != Reg::ZERO {
                            self.regs[r.index()].provenance.clear();
                        }
                    }
                }
                Ok(StepResult::Violation(*report))
            }
        }
    }

    fn exec_inner(&mut self, instr: &Instr) -> Result<StepResult, Fault> {
        // reserve metadata up front so a full pool fails before any effect
        let needed = match instr {
            Instr::Alloc {
                kind: Some(AllocKind::Cell),
                ..
            } => 2,
            Instr::Alloc { .. } | Instr::Borrow { .. } => 1,
            _ => 0,
        };
        self.ensure_slots(needed)?;
        match *instr {
            Instr::Li { rd, imm } => self.set_reg(rd, Register::data(imm as u64)),
            Instr::Mv { rd, rs } => {
                let v = self.regs[rs.index()].clone();
                self.set_reg(rd, v);
            }
            Instr::Addi { rd, rs, imm } => {
                let src = &self.regs[rs.index()];
                let v = Register {
                    value: src.value.wrapping_add(imm as u64),
                    provenance: src.provenance.clone(),
                };
                self.set_reg(rd, v);
            }
            Instr::Add { rd, rs1, rs2 } => {
                let a = &self.regs[rs1.index()];
                let b = &self.regs[rs2.index()];
                let value = a.value.wrapping_add(b.value);
                let provenance = self.merge_provenance(&a.provenance.clone(), &b.provenance.clone());
                self.set_reg(rd, Register { value, provenance });
            }
            Instr::Alloc { rd, addr, len, kind } => self.exec_alloc(rd, addr, len, kind)?,
            Instr::Borrow { rd, rs, kind, bounds } => self.exec_borrow(rd, rs, kind, bounds)?,
            Instr::Drop { rs } => self.exec_drop(rs)?,
            Instr::Ld { rd, off, rs, width } => self.exec_load(rd, off, rs, u64::from(width))?,
            Instr::Sd { rs2, off, rs1, width } => self.exec_store(rs2, off, rs1, u64::from(width))?,
            Instr::Halt => return Ok(StepResult::Halt),
        }
        Ok(StepResult::Ok)
    }

    /// Union of two provenance lists, deduplicated and capped at the
    /// configured bound. When over the bound the oldest ids are dropped.
    fn merge_provenance(&mut self, a: &[CapId], b: &[CapId]) -> Vec<CapId> {
        let mut merged: Vec<CapId> = a.iter().chain(b).copied().collect();
        merged.sort_unstable();
        merged.dedup();
        let bound = self.config.provenance_bound.max(1);
        if merged.len() > bound {
            let dropped: Vec<CapId> = merged.drain(..merged.len() - bound).collect();
            self.diagnostics.push(Diagnostic {
                event_index: self.event_index,
                kind: DiagnosticKind::ProvenanceTruncated { dropped },
            });
        }
        merged
    }

    fn issue(&mut self, op: KernelOp) -> Verdict {
        let verdict = self.model.apply(op);
        match &verdict {
            Ok(OpOutcome::Created(_)) => self.stats.caps_created += 1,
            Ok(OpOutcome::Revoked(ids)) => self.stats.caps_invalidated += ids.len() as u64,
            Ok(OpOutcome::Demoted(ids)) => self.stats.caps_demoted += ids.len() as u64,
            Err(_) => {}
        }
        if self.record_ops {
            self.ops.push(OpRecord {
                event_index: self.event_index,
                op,
                verdict: verdict.clone(),
            });
        }
        verdict
    }

    fn kernel_fault(
        &self,
        e: KernelError,
        cap: Option<CapId>,
        addr: Option<u64>,
        width: Option<u64>,
        culprit: Option<Reg>,
    ) -> Fault {
        match ViolationKind::from_kernel(e) {
            Some(kind) => Fault::Violation(Box::new(self.report(kind, cap, addr, width, e.to_string())), culprit),
            None => Fault::Error(MachineError::Malformed {
                event_index: self.event_index,
                error: e,
            }),
        }
    }

    fn report(
        &self,
        kind: ViolationKind,
        cap: Option<CapId>,
        addr: Option<u64>,
        width: Option<u64>,
        message: String,
    ) -> ViolationReport {
        let parents = cap.map(|c| self.model.parent_chain(c)).unwrap_or_default();
        let tree = match (self.capture_trees, parents.first()) {
            (true, Some(&root)) => Some(self.tree_rows(root)),
            _ => None,
        };
        ViolationReport {
            event_index: self.event_index,
            kind,
            cap,
            parents,
            addr,
            width,
            message,
            tree,
        }
    }

    fn tree_rows(&self, root: CapId) -> Vec<TreeRow> {
        let snapshot = self.model.snapshot();
        let mut in_tree = HashSet::from([root]);
        let mut rows = Vec::new();
        // ids are assigned in creation order, so parents precede children
        for (&id, cap) in &snapshot {
            let member = id == root || cap.parent.is_some_and(|p| in_tree.contains(&p));
            if member {
                in_tree.insert(id);
                rows.push(TreeRow {
                    cap: id,
                    parent: cap.parent,
                    lo: cap.lo,
                    hi: cap.hi,
                    perm: cap.perm,
                });
            }
        }
        rows
    }

    /// Makes room in the metadata pool for `n` more capabilities.
    fn ensure_slots(&mut self, n: usize) -> Result<(), MachineError> {
        if self.pool.available() >= n {
            return Ok(());
        }
        self.reclaim_metadata();
        if self.pool.available() >= n {
            Ok(())
        } else {
            Err(MachineError::PoolExhausted {
                event_index: self.event_index,
                capacity: self.pool.capacity,
            })
        }
    }

    /// Returns the slots of every capability that is invalid, referenced by
    /// no shadow slot and held in no register to the free list.
    pub fn reclaim_metadata(&mut self) -> usize {
        self.stats.reclaim_runs += 1;
        let in_regs: HashSet<CapId> = self.regs.iter().flat_map(|r| r.provenance.iter().copied()).collect();
        let mut eligible: Vec<CapId> = self
            .pool
            .slot_of
            .keys()
            .copied()
            .filter(|&id| {
                self.pool.refcount(id) == 0
                    && !in_regs.contains(&id)
                    && self.model.capability(id).is_none_or(|c| c.perm == Permission::Na)
            })
            .collect();
        eligible.sort_unstable();
        for &id in &eligible {
            self.pool.release(id);
        }
        self.stats.slots_recycled += eligible.len() as u64;
        eligible.len()
    }

    fn created(&mut self, verdict: &Verdict) -> Option<CapId> {
        match verdict {
            Ok(OpOutcome::Created(id)) => {
                self.pool.assign(*id);
                Some(*id)
            }
            _ => None,
        }
    }

    fn exec_alloc(&mut self, rd: Reg, addr: u64, len: u64, kind: Option<AllocKind>) -> Result<(), Fault> {
        let hi = addr.checked_add(len).ok_or(MachineError::Malformed {
            event_index: self.event_index,
            error: KernelError::AddressOverflow,
        })?;
        let verdict = self.issue(KernelOp::Alloc { lo: addr, hi });
        let root = match self.created(&verdict) {
            Some(id) => id,
            None => {
                let e = verdict.expect_err("alloc either creates or fails");
                return Err(self.kernel_fault(e, None, Some(addr), Some(len), None));
            }
        };
        let cap = match kind {
            Some(AllocKind::Cell) => {
                let verdict = self.issue(KernelOp::Borrow {
                    src: root,
                    kind: BorrowKind::Cell,
                    lo: addr,
                    hi,
                });
                match self.created(&verdict) {
                    Some(id) => id,
                    None => {
                        let e = verdict.expect_err("borrow either creates or fails");
                        return Err(self.kernel_fault(e, Some(root), Some(addr), Some(len), None));
                    }
                }
            }
            Some(AllocKind::Ref) | None => root,
        };
        self.set_reg(
            rd,
            Register {
                value: addr,
                provenance: vec![cap],
            },
        );
        Ok(())
    }

    fn exec_borrow(&mut self, rd: Reg, rs: Reg, kind: BorrowKind, bounds: Option<(u64, u64)>) -> Result<(), Fault> {
        let value = self.regs[rs.index()].value;
        let probe = match bounds {
            Some((lo, hi)) if lo < hi => (lo, hi),
            Some((lo, _)) => (lo, lo.saturating_add(1)),
            None => (value, value.saturating_add(1)),
        };
        let src = match self.resolve(rs, probe.0, probe.1)? {
            Resolved::Cap(id) => id,
            Resolved::Untracked => {
                // borrowing through a foreign pointer yields another foreign pointer
                self.set_reg(rd, Register::data(value));
                return Ok(());
            }
        };
        let (lo, hi) = match bounds {
            Some(b) => b,
            None => {
                let c = self.model.capability(src).expect("resolved capability exists");
                (c.lo, c.hi)
            }
        };
        let verdict = self.issue(KernelOp::Borrow { src, kind, lo, hi });
        match self.created(&verdict) {
            Some(id) => {
                self.set_reg(
                    rd,
                    Register {
                        value,
                        provenance: vec![id],
                    },
                );
                Ok(())
            }
            None => {
                let e = verdict.expect_err("borrow either creates or fails");
                Err(self.kernel_fault(e, Some(src), Some(lo), Some(hi.wrapping_sub(lo)), Some(rs)))
            }
        }
    }

    fn exec_drop(&mut self, rs: Reg) -> Result<(), Fault> {
        let value = self.regs[rs.index()].value;
        let cap = match self.resolve(rs, value, value.saturating_add(1))? {
            Resolved::Cap(id) => id,
            Resolved::Untracked => return Ok(()),
        };
        let verdict = self.issue(KernelOp::Drop { cap });
        match verdict {
            Ok(_) => Ok(()),
            Err(e) => Err(self.kernel_fault(e, Some(cap), Some(value), None, Some(rs))),
        }
    }

    fn access_target(&mut self, base: Reg, off: i64, width: u64, store: bool) -> Result<(u64, Option<CapId>), Fault> {
        let addr = self.regs[base.index()].value.wrapping_add(off as u64);
        if addr.checked_add(width).is_none() {
            let kind = if store {
                ViolationKind::OutOfBoundsStore
            } else {
                ViolationKind::OutOfBoundsLoad
            };
            let cap = self.regs[base.index()].provenance.last().copied();
            let report = self.report(
                kind,
                cap,
                Some(addr),
                Some(width),
                "access wraps the address space".into(),
            );
            return Err(Fault::Violation(Box::new(report), Some(base)));
        }
        let cap = match self.resolve(base, addr, addr + width)? {
            Resolved::Cap(id) => Some(id),
            Resolved::Untracked => None,
        };
        if let Some(cap) = cap {
            let op = if store {
                KernelOp::Store { cap, addr, width }
            } else {
                KernelOp::Load { cap, addr, width }
            };
            if let Err(e) = self.issue(op) {
                return Err(self.kernel_fault(e, Some(cap), Some(addr), Some(width), Some(base)));
            }
        }
        Ok((addr, cap))
    }

    fn exec_load(&mut self, rd: Reg, off: i64, rs: Reg, width: u64) -> Result<(), Fault> {
        let (addr, _) = self.access_target(rs, off, width, false)?;
        let value = self.memory.read(addr, width);
        let provenance = if width == SLOT_BYTES && addr % SLOT_BYTES == 0 {
            self.shadow.get(addr).map(<[CapId]>::to_vec).unwrap_or_default()
        } else {
            Vec::new()
        };
        self.set_reg(rd, Register { value, provenance });
        Ok(())
    }

    fn exec_store(&mut self, rs2: Reg, off: i64, rs1: Reg, width: u64) -> Result<(), Fault> {
        let (addr, _) = self.access_target(rs1, off, width, true)?;
        let src = self.regs[rs2.index()].clone();
        self.memory.write(addr, width, src.value);
        if width == SLOT_BYTES && addr % SLOT_BYTES == 0 {
            self.write_shadow(addr, src.provenance);
        } else {
            let mut slot = addr - addr % SLOT_BYTES;
            while slot < addr + width {
                self.write_shadow(slot, Vec::new());
                match slot.checked_add(SLOT_BYTES) {
                    Some(next) => slot = next,
                    None => break,
                }
            }
        }
        Ok(())
    }

    fn write_shadow(&mut self, slot: u64, provenance: Vec<CapId>) {
        let old = if provenance.is_empty() {
            self.shadow.slots.remove(&slot)
        } else {
            for &id in &provenance {
                self.pool.incr(id);
            }
            self.shadow.slots.insert(slot, provenance)
        };
        for id in old.unwrap_or_default() {
            self.pool.decr(id);
        }
    }

    fn untracked(&self, reg: Reg, lo: u64, hi: u64) -> Result<Resolved, Fault> {
        let live = self.model.overlaps_live_allocation(lo, hi);
        if self.config.mode == Mode::Strict || live {
            let why = if live {
                "no capability covers an access into a live allocation"
            } else {
                "no capability covers the access"
            };
            let report = self.report(
                ViolationKind::UntrackedAccess,
                None,
                Some(lo),
                Some(hi - lo),
                format!("{reg}: {why}"),
            );
            return Err(Fault::Violation(Box::new(report), None));
        }
        Ok(Resolved::Untracked)
    }

    /// Picks the capability `reg` uses for `[addr, addr + width)`.
    ///
    /// `Ok(None)` means the access proceeds unchecked (compat mode outside
    /// any live allocation).
    pub fn resolve_provenance(
        &mut self,
        reg: Reg,
        addr: u64,
        width: u64,
    ) -> Result<Option<CapId>, Box<ViolationReport>> {
        let hi = addr.saturating_add(width.max(1));
        match self.resolve(reg, addr, hi) {
            Ok(Resolved::Cap(id)) => Ok(Some(id)),
            Ok(Resolved::Untracked) => Ok(None),
            Err(Fault::Violation(report, _)) => Err(report),
            Err(Fault::Error(e)) => unreachable!("resolution raises no machine errors: {e}"),
        }
    }

    /// A single-entry list is used as is, so the kernel can report bounds
    /// violations. Longer lists keep the entries whose bounds contain the
    /// range, preferring valid ones and then the newest.
    fn resolve(&mut self, reg: Reg, lo: u64, hi: u64) -> Result<Resolved, Fault> {
        let prov = &self.regs[reg.index()].provenance;
        match prov.len() {
            0 => return self.untracked(reg, lo, hi),
            1 => return Ok(Resolved::Cap(prov[0])),
            _ => {}
        }
        let containing: Vec<(CapId, Capability)> = prov
            .iter()
            .filter_map(|&id| self.model.capability(id).map(|c| (id, c)))
            .filter(|(_, c)| c.lo <= lo && hi <= c.hi)
            .collect();
        if containing.is_empty() {
            return self.untracked(reg, lo, hi);
        }
        let valid: Vec<CapId> = containing
            .iter()
            .filter(|(_, c)| c.perm.is_valid())
            .map(|&(id, _)| id)
            .collect();
        let chosen = match valid.iter().max() {
            Some(&id) => id,
            None => containing.iter().map(|&(id, _)| id).max().expect("non-empty"),
        };
        if reg != Reg::ZERO {
            self.regs[reg.index()].provenance = vec![chosen];
        }
        if valid.len() > 1 {
            self.diagnostics.push(Diagnostic {
                event_index: self.event_index,
                kind: DiagnosticKind::ProvenanceAmbiguous {
                    chosen,
                    candidates: valid.clone(),
                },
            });
            if self.config.ambiguity_fatal {
                let report = self.report(
                    ViolationKind::ProvenanceAmbiguous,
                    Some(chosen),
                    Some(lo),
                    Some(hi - lo),
                    format!("{reg}: {} valid capabilities cover the access", valid.len()),
                );
                return Err(Fault::Violation(Box::new(report), Some(reg)));
            }
        }
        Ok(Resolved::Cap(chosen))
    }

    /// Recounts shadow references and compares them with the pool's counts.
    pub fn audit_refcounts(&self) -> Vec<RefcountMismatch> {
        let mut actual: BTreeMap<CapId, u32> = BTreeMap::new();
        for (_, ids) in self.shadow.iter() {
            for &id in ids {
                *actual.entry(id).or_insert(0) += 1;
            }
        }
        let mut ids: Vec<CapId> = actual.keys().copied().collect();
        ids.extend(self.pool.refcount.keys().copied());
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter_map(|cap| {
                let recorded = self.pool.refcount(cap);
                let actual = actual.get(&cap).copied().unwrap_or(0);
                (recorded != actual).then_some(RefcountMismatch { cap, recorded, actual })
            })
            .collect()
    }

    /// Recycled capabilities that are still valid or still referenced.
    pub fn audit_recycled(&self) -> Vec<CapId> {
        let in_regs: HashSet<CapId> = self.regs.iter().flat_map(|r| r.provenance.iter().copied()).collect();
        let in_shadow: HashSet<CapId> = self.shadow.iter().flat_map(|(_, ids)| ids.iter().copied()).collect();
        self.pool
            .recycled
            .iter()
            .copied()
            .filter(|id| {
                in_regs.contains(id)
                    || in_shadow.contains(id)
                    || self.model.capability(*id).is_some_and(|c| c.perm.is_valid())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse;

    fn machine() -> Machine {
        Machine::new(MachineConfig::default())
    }

    fn run(text: &str, config: MachineConfig) -> (Machine, RunOutcome) {
        let program = parse(text).unwrap();
        let mut m = Machine::new(config);
        let out = m.run(&program).unwrap();
        (m, out)
    }

    #[test]
    fn plain_arithmetic() {
        let (m, out) = run("li r1, 5\nadd r2, r1, r1", MachineConfig::default());
        assert!(out.is_clean());
        assert_eq!(*m.reg(Reg(2)), Register::data(10));
    }

    #[test]
    fn r0_is_hardwired() {
        let (m, _) = run("li r0, 5\nalloc r0, 0x1000, 8", MachineConfig::default());
        assert_eq!(*m.reg(Reg(0)), Register::default());
    }

    #[test]
    fn mv_copies_provenance() {
        let (m, _) = run("alloc r1, 0x1000, 8\nmv r2, r1", MachineConfig::default());
        assert_eq!(m.reg(Reg(2)), m.reg(Reg(1)));
        assert_eq!(m.reg(Reg(2)).provenance, vec![CapId(1)]);
    }

    #[test]
    fn nested_mut_chain_machine() {
        let text =
            "alloc r1, 0x1000, 8\nborrow r2, r1, mut\nborrow r3, r2, mut\nsd r0, 0(r2), 8\nsd r0, 0(r3), 8\nhalt";
        let (m, out) = run(text, MachineConfig::default());
        assert_eq!(out.violations.len(), 1);
        let v = &out.violations[0];
        assert_eq!(v.kind, ViolationKind::InvalidCapabilityStore);
        assert_eq!(v.event_index, 4);
        assert_eq!(v.cap, Some(CapId(3)));
        assert_eq!(v.parents, vec![CapId(1), CapId(2), CapId(3)]);
        assert_eq!(m.model().get(CapId(1)).unwrap().perm, Permission::Rw);
        assert_eq!(m.model().get(CapId(2)).unwrap().perm, Permission::Rw);
    }

    #[test]
    fn spill_round_trip_and_refcounts() {
        let text = "alloc r1, 0x1000, 8\nalloc r2, 0x2000, 16\nsd r1, 0(r2), 8\nld r3, 0(r2), 8";
        let (mut m, out) = run(text, MachineConfig::default());
        assert!(out.is_clean());
        assert_eq!(m.reg(Reg(3)).provenance, vec![CapId(1)]);
        assert_eq!(m.reg(Reg(3)).value, 0x1000);
        assert_eq!(m.pool().refcount(CapId(1)), 1);
        assert!(m.audit_refcounts().is_empty());
        // overwrite with plain data
        m.exec(
            4,
            &Instr::Sd {
                rs2: Reg(0),
                off: 0,
                rs1: Reg(2),
                width: 8,
            },
        )
        .unwrap();
        assert_eq!(m.pool().refcount(CapId(1)), 0);
        assert!(m.shadow().is_empty());
        assert!(m.audit_refcounts().is_empty());
    }

    #[test]
    fn partial_write_clears_shadow() {
        let text = "alloc r1, 0x1000, 8\nalloc r2, 0x2000, 16\nsd r1, 8(r2), 8\nsd r0, 12(r2), 1\nld r3, 8(r2), 8";
        let (m, out) = run(text, MachineConfig::default());
        assert!(out.is_clean());
        assert!(m.reg(Reg(3)).is_plain_data());
        assert_eq!(m.pool().refcount(CapId(1)), 0);
    }

    #[test]
    fn narrow_load_carries_no_provenance() {
        let text = "alloc r1, 0x1000, 8\nalloc r2, 0x2000, 16\nsd r1, 0(r2), 8\nld r3, 0(r2), 4";
        let (m, _) = run(text, MachineConfig::default());
        assert_eq!(m.reg(Reg(3)).value, 0x1000);
        assert!(m.reg(Reg(3)).is_plain_data());
    }

    #[test]
    fn data_is_little_endian() {
        let text = "alloc r1, 0x1000, 8\nli r2, 0x1122334455667788\nsd r2, 0(r1), 8\nld r3, 2(r1), 2\nld r4, 0(r1), 1";
        let (m, out) = run(text, MachineConfig::default());
        assert!(out.is_clean());
        assert_eq!(m.reg(Reg(3)).value, 0x5566);
        assert_eq!(m.reg(Reg(4)).value, 0x88);
    }

    #[test]
    fn resolution_by_bounds() {
        let text = "alloc r1, 0x1000, 8\nalloc r2, 0x2000, 16\nadd r3, r1, r2";
        let (mut m, _) = run(text, MachineConfig::default());
        assert_eq!(m.reg(Reg(3)).provenance, vec![CapId(1), CapId(2)]);
        assert_eq!(m.resolve_provenance(Reg(3), 0x2004, 4), Ok(Some(CapId(2))));
        assert_eq!(m.reg(Reg(3)).provenance, vec![CapId(2)]);
        assert!(m.diagnostics().is_empty());
    }

    #[test]
    fn empty_provenance_untracked_region_is_permitted_in_compat() {
        let (m, out) = run(
            "li r1, 0x9000\nsd r1, 0(r1), 8\nld r2, 0(r1), 8",
            MachineConfig::default(),
        );
        assert!(out.is_clean());
        assert_eq!(m.reg(Reg(2)).value, 0x9000);
        assert!(m.ops().is_empty());
    }

    #[test]
    fn untracked_access_into_live_allocation() {
        let (_, out) = run(
            "alloc r1, 0x1000, 8\nli r2, 0x1004\nld r3, 0(r2), 4",
            MachineConfig::default(),
        );
        assert_eq!(out.violations[0].kind, ViolationKind::UntrackedAccess);
    }

    #[test]
    fn strict_mode_rejects_every_untracked_access() {
        let config = MachineConfig {
            mode: Mode::Strict,
            ..MachineConfig::default()
        };
        let (_, out) = run("li r1, 0x9000\nsd r1, 0(r1), 8", config);
        assert_eq!(out.violations[0].kind, ViolationKind::UntrackedAccess);
    }

    #[test]
    fn nested_ambiguity_picks_newest_and_reports() {
        let text = "alloc r1, 0x1000, 8\nborrow r2, r1, imm\nadd r3, r1, r2\naddi r3, r3, -0x1000\nld r4, 0(r3), 8";
        let (m, out) = run(text, MachineConfig::default());
        assert!(out.is_clean());
        assert_eq!(
            m.diagnostics(),
            &[Diagnostic {
                event_index: 4,
                kind: DiagnosticKind::ProvenanceAmbiguous {
                    chosen: CapId(2),
                    candidates: vec![CapId(1), CapId(2)]
                }
            }]
        );
        // the chosen capability passes: a load through the RO child is fine
        assert_eq!(m.reg(Reg(3)).provenance, vec![CapId(2)]);
        let fatal = MachineConfig {
            ambiguity_fatal: true,
            ..MachineConfig::default()
        };
        let (_, out) = run(text, fatal);
        assert_eq!(out.violations[0].kind, ViolationKind::ProvenanceAmbiguous);
    }

    #[test]
    fn single_provenance_reports_out_of_bounds() {
        let (_, out) = run("alloc r1, 0x1000, 8\nld r2, 8(r1), 8", MachineConfig::default());
        assert_eq!(out.violations[0].kind, ViolationKind::OutOfBoundsLoad);
        let (_, out) = run("alloc r1, 0x1000, 8\nsd r2, 4(r1), 8", MachineConfig::default());
        assert_eq!(out.violations[0].kind, ViolationKind::OutOfBoundsStore);
    }

    #[test]
    fn provenance_bound_drops_oldest() {
        let config = MachineConfig {
            provenance_bound: 2,
            ..MachineConfig::default()
        };
        let text = "alloc r1, 0x1000, 8\nalloc r2, 0x2000, 8\nalloc r3, 0x3000, 8\nadd r4, r1, r2\nadd r4, r4, r3";
        let (m, _) = run(text, config);
        assert_eq!(m.reg(Reg(4)).provenance, vec![CapId(2), CapId(3)]);
        assert!(matches!(
            &m.diagnostics()[0].kind,
            DiagnosticKind::ProvenanceTruncated { dropped } if dropped == &vec![CapId(1)]
        ));
    }

    #[test]
    fn continue_mode_strips_and_keeps_going() {
        let config = MachineConfig {
            on_violation: OnViolation::Continue,
            ..MachineConfig::default()
        };
        let text =
            "alloc r1, 0x1000, 8\ndrop r1\nsd r0, 0(r1), 8\nsd r0, 0(r1), 8\nalloc r2, 0x2000, 8\nsd r0, 0(r2), 8";
        let (m, out) = run(text, config);
        assert_eq!(out.violations.len(), 1);
        assert_eq!(out.violations[0].kind, ViolationKind::InvalidCapabilityStore);
        // the retry goes through a stripped register into freed memory,
        // which compat mode treats as foreign
        assert_eq!(out.events_executed, 6);
        assert!(m.reg(Reg(1)).is_plain_data());
    }

    #[test]
    fn alloc_cell_hands_out_cell_capability() {
        let (m, _) = run("alloc r1, 0x1000, 8, kind=cell", MachineConfig::default());
        assert_eq!(m.reg(Reg(1)).provenance, vec![CapId(2)]);
        let c = m.model().get(CapId(2)).unwrap();
        assert_eq!((c.tag, c.parent), (crate::kernel::CapTag::Cell, Some(CapId(1))));
        assert_eq!(m.ops().len(), 2);
    }

    #[test]
    fn borrow_partial_bounds_keeps_cursor() {
        let (m, out) = run(
            "alloc r1, 0x1000, 16\nborrow r2, r1, imm, 0x1008, 0x1010",
            MachineConfig::default(),
        );
        assert!(out.is_clean());
        assert_eq!(m.reg(Reg(2)).value, 0x1000);
        let c = m.model().get(CapId(2)).unwrap();
        assert_eq!((c.lo, c.hi), (0x1008, 0x1010));
    }

    #[test]
    fn pool_reclaims_dropped_slots() {
        let config = MachineConfig {
            pool_size: 2,
            ..MachineConfig::default()
        };
        let text =
            "alloc r1, 0x1000, 8\ndrop r1\nalloc r2, 0x2000, 8\ndrop r2\nli r1, 0\nli r2, 0\nalloc r3, 0x3000, 8";
        let (m, out) = run(text, config);
        assert!(out.is_clean());
        assert_eq!(m.stats().slots_recycled, 2);
        assert_eq!(m.pool().recycled(), &[CapId(1), CapId(2)]);
        assert!(m.audit_recycled().is_empty());
        // recycled ids stay NA in the model
        assert_eq!(m.model().get(CapId(1)).unwrap().perm, Permission::Na);
    }

    #[test]
    fn pool_guards_registers_and_shadow() {
        let config = MachineConfig {
            pool_size: 3,
            ..MachineConfig::default()
        };
        // cap 1 spilled into cap 2's memory, cap 3 held in a register, both dropped
        let text = "alloc r1, 0x1000, 8\nalloc r2, 0x2000, 8\nsd r1, 0(r2), 8\ndrop r1\nli r1, 0\nalloc r3, 0x3000, 8\ndrop r3";
        let program = parse(text).unwrap();
        let mut m = Machine::new(config);
        assert!(m.run(&program).unwrap().is_clean());
        assert_eq!(m.reclaim_metadata(), 0);
        let err = m
            .exec(
                7,
                &Instr::Alloc {
                    rd: Reg(4),
                    addr: 0x4000,
                    len: 8,
                    kind: None,
                },
            )
            .unwrap_err();
        assert!(matches!(err, MachineError::PoolExhausted { capacity: 3, .. }));
        // overwrite the register holding cap 3: now it is reclaimable
        m.exec(8, &Instr::Li { rd: Reg(3), imm: 0 }).unwrap();
        assert_eq!(m.reclaim_metadata(), 1);
        assert_eq!(m.pool().recycled(), &[CapId(3)]);
    }

    #[test]
    fn violation_kind_names_round_trip() {
        for kind in ViolationKind::ALL {
            assert_eq!(kind.as_str().parse::<ViolationKind>().unwrap(), kind);
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.as_str()));
        }
    }

    #[test]
    fn report_captures_tree() {
        let program = parse("alloc r1, 0x1000, 8\nborrow r2, r1, mut\ndrop r1\nsd r0, 0(r2), 8").unwrap();
        let mut m = machine();
        m.capture_trees(true);
        let out = m.run(&program).unwrap();
        let tree = out.violations[0].tree.as_ref().unwrap();
        assert_eq!(tree.len(), 2);
        assert!(tree.iter().all(|r| r.perm == Permission::Na));
    }
}
