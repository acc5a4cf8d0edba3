//! Capability state, borrow forest and the revoke-on-use transitions.
//!
//! The kernel is a pure state machine. Every capability ever created stays
//! in the map (so snapshots can report revoked ids), but only valid
//! capabilities stay *connected*: once a subtree is invalidated it is
//! detached from its parent's child list and from the root index and is
//! never traversed again.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Access permission carried by a capability. `Na` marks a revoked capability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Permission {
    #[serde(rename = "RW")]
    Rw,
    #[serde(rename = "RO")]
    Ro,
    #[serde(rename = "NA")]
    Na,
}

impl Permission {
    pub fn is_valid(self) -> bool {
        self != Permission::Na
    }

    /// Whether moving from `self` to `next` only ever drops rights.
    pub fn allows_transition_to(self, next: Permission) -> bool {
        matches!(
            (self, next),
            (Permission::Rw, _) | (Permission::Ro, Permission::Ro | Permission::Na) | (Permission::Na, Permission::Na)
        )
    }
}

impl fmt::Display for Permission {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Permission::Rw => "RW",
            Permission::Ro => "RO",
            Permission::Na => "NA",
        })
    }
}

/// What kind of Rust pointer a capability stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapTag {
    #[default]
    Ref,
    RawPtr,
    Cell,
}

impl fmt::Display for CapTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CapTag::Ref => "ref",
            CapTag::RawPtr => "raw",
            CapTag::Cell => "cell",
        })
    }
}

/// Capability identifier. Allocated from 1 upwards and never reused; 0 is
/// reserved as the null parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapId(pub u64);

impl CapId {
    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for CapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    /// Inclusive lower bound.
    pub lo: u64,
    /// Exclusive upper bound.
    pub hi: u64,
    pub perm: Permission,
    pub parent: Option<CapId>,
    pub tag: CapTag,
}

impl Capability {
    pub fn contains(&self, lo: u64, hi: u64) -> bool {
        self.lo <= lo && lo < hi && hi <= self.hi
    }

    pub fn overlaps(&self, lo: u64, hi: u64) -> bool {
        self.lo < hi && lo < self.hi
    }

    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }
}

/// The flavour of a borrow instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BorrowKind {
    Mut,
    Imm,
    RawMut,
    RawImm,
    Cell,
}

impl BorrowKind {
    pub const ALL: [BorrowKind; 5] = [
        BorrowKind::Mut,
        BorrowKind::Imm,
        BorrowKind::RawMut,
        BorrowKind::RawImm,
        BorrowKind::Cell,
    ];

    pub fn needs_write(self) -> bool {
        matches!(self, BorrowKind::Mut | BorrowKind::RawMut | BorrowKind::Cell)
    }

    pub fn perm(self) -> Permission {
        if self.needs_write() {
            Permission::Rw
        } else {
            Permission::Ro
        }
    }

    pub fn tag(self) -> CapTag {
        match self {
            BorrowKind::Mut | BorrowKind::Imm => CapTag::Ref,
            BorrowKind::RawMut | BorrowKind::RawImm => CapTag::RawPtr,
            BorrowKind::Cell => CapTag::Cell,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BorrowKind::Mut => "mut",
            BorrowKind::Imm => "imm",
            BorrowKind::RawMut => "raw-mut",
            BorrowKind::RawImm => "raw-imm",
            BorrowKind::Cell => "cell",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        BorrowKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for BorrowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which Rust-specific relaxations of the exclusiveness rule are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelConfig {
    pub raw_pointer_relaxation: bool,
    pub cell_relaxation: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            raw_pointer_relaxation: true,
            cell_relaxation: true,
        }
    }
}

impl KernelConfig {
    /// No relaxations: the bare instruction rules.
    pub const STRICT: KernelConfig = KernelConfig {
        raw_pointer_relaxation: false,
        cell_relaxation: false,
    };

    /// The four flag combinations, in a fixed order.
    pub fn all_combinations() -> [KernelConfig; 4] {
        [
            KernelConfig::STRICT,
            KernelConfig {
                raw_pointer_relaxation: true,
                cell_relaxation: false,
            },
            KernelConfig {
                raw_pointer_relaxation: false,
                cell_relaxation: true,
            },
            KernelConfig::default(),
        ]
    }
}

impl fmt::Display for KernelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "raw-relax={} cell-relax={}",
            if self.raw_pointer_relaxation { "on" } else { "off" },
            if self.cell_relaxation { "on" } else { "off" }
        )
    }
}

/// A failed precondition. The first four variants are malformed requests
/// rather than rule violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
pub enum KernelError {
    #[error("empty address range")]
    EmptyRange,
    #[error("unknown capability {0}")]
    UnknownCap(CapId),
    #[error("zero-width access")]
    ZeroWidth,
    #[error("access range overflows the address space")]
    AddressOverflow,
    #[error("borrow from an invalid capability")]
    BorrowFromInvalid,
    #[error("mutable borrow from a read-only capability")]
    BorrowMutFromRo,
    #[error("borrowed bounds are not a subset of the source bounds")]
    BoundsNotSubset,
    #[error("drop of an invalid capability")]
    DropInvalid,
    #[error("load through an invalid capability")]
    InvalidCapLoad,
    #[error("store through an invalid capability")]
    InvalidCapStore,
    #[error("store through a read-only capability")]
    PermissionStore,
    #[error("load outside capability bounds")]
    OutOfBoundsLoad,
    #[error("store outside capability bounds")]
    OutOfBoundsStore,
}

impl KernelError {
    pub fn is_malformed(self) -> bool {
        matches!(
            self,
            KernelError::EmptyRange
                | KernelError::UnknownCap(_)
                | KernelError::ZeroWidth
                | KernelError::AddressOverflow
        )
    }
}

/// Result of a successful transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpOutcome {
    Created(CapId),
    /// Capabilities that went from valid to `NA`, sorted by id.
    Revoked(Vec<CapId>),
    /// Capabilities that went from `RW` to `RO`, sorted by id.
    Demoted(Vec<CapId>),
}

/// A kernel-level operation, post provenance resolution. This is the stream
/// the machine issues and the oracle replays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelOp {
    Alloc {
        lo: u64,
        hi: u64,
    },
    Borrow {
        src: CapId,
        kind: BorrowKind,
        lo: u64,
        hi: u64,
    },
    Drop {
        cap: CapId,
    },
    Load {
        cap: CapId,
        addr: u64,
        width: u64,
    },
    Store {
        cap: CapId,
        addr: u64,
        width: u64,
    },
}

impl fmt::Display for KernelOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            KernelOp::Alloc { lo, hi } => write!(f, "alloc({lo:#x}, {hi:#x})"),
            KernelOp::Borrow { src, kind, lo, hi } => write!(f, "borrow({src}, {kind}, {lo:#x}, {hi:#x})"),
            KernelOp::Drop { cap } => write!(f, "drop({cap})"),
            KernelOp::Load { cap, addr, width } => write!(f, "load({cap}, {addr:#x}, {width})"),
            KernelOp::Store { cap, addr, width } => write!(f, "store({cap}, {addr:#x}, {width})"),
        }
    }
}

pub type Verdict = Result<OpOutcome, KernelError>;

/// Common surface of the incremental kernel and the naive oracle, so the
/// abstract machine can run on either.
pub trait CapabilityModel {
    fn alloc(&mut self, lo: u64, hi: u64) -> Result<CapId, KernelError>;
    fn borrow(&mut self, src: CapId, kind: BorrowKind, lo: u64, hi: u64) -> Result<CapId, KernelError>;
    fn drop_cap(&mut self, cap: CapId) -> Result<Vec<CapId>, KernelError>;
    fn access_load(&mut self, cap: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError>;
    fn access_store(&mut self, cap: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError>;
    fn capability(&self, cap: CapId) -> Option<Capability>;
    /// Whether `[lo, hi)` intersects the bounds of any valid root.
    fn overlaps_live_allocation(&self, lo: u64, hi: u64) -> bool;
    fn snapshot(&self) -> BTreeMap<CapId, Capability>;

    fn apply(&mut self, op: KernelOp) -> Verdict {
        match op {
            KernelOp::Alloc { lo, hi } => self.alloc(lo, hi).map(OpOutcome::Created),
            KernelOp::Borrow { src, kind, lo, hi } => self.borrow(src, kind, lo, hi).map(OpOutcome::Created),
            KernelOp::Drop { cap } => self.drop_cap(cap).map(OpOutcome::Revoked),
            KernelOp::Load { cap, addr, width } => self.access_load(cap, addr, width).map(OpOutcome::Demoted),
            KernelOp::Store { cap, addr, width } => self.access_store(cap, addr, width).map(OpOutcome::Revoked),
        }
    }

    /// Root-to-leaf chain of ids ending at `cap`.
    fn parent_chain(&self, cap: CapId) -> Vec<CapId> {
        let mut chain = vec![cap];
        let mut cur = cap;
        while let Some(parent) = self.capability(cur).and_then(|c| c.parent) {
            chain.push(parent);
            cur = parent;
        }
        chain.reverse();
        chain
    }
}

/// Computes `[addr, addr + width)`, rejecting zero widths and wraparound.
pub fn access_range(addr: u64, width: u64) -> Result<(u64, u64), KernelError> {
    if width == 0 {
        return Err(KernelError::ZeroWidth);
    }
    addr.checked_add(width)
        .map(|hi| (addr, hi))
        .ok_or(KernelError::AddressOverflow)
}

/// Deliberate bugs for mutation testing of the differential harness.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFault {
    /// Invalidated subtrees stay attached to the forest indexes.
    SkipDisconnect,
}

#[derive(Debug, Clone)]
struct Node {
    cap: Capability,
    children: Vec<CapId>,
}

/// Valid roots ordered by lower bound. Roots may overlap each other, so a
/// query scans back by the longest root ever inserted.
#[derive(Debug, Clone, Default)]
struct RootIndex {
    by_lo: BTreeMap<(u64, CapId), u64>,
    max_len: u64,
}

impl RootIndex {
    fn insert(&mut self, id: CapId, lo: u64, hi: u64) {
        self.max_len = self.max_len.max(hi - lo);
        self.by_lo.insert((lo, id), hi);
    }

    fn remove(&mut self, id: CapId, lo: u64) {
        self.by_lo.remove(&(lo, id));
    }

    fn overlapping(&self, lo: u64, hi: u64) -> impl Iterator<Item = CapId> + '_ {
        let start = lo.saturating_sub(self.max_len);
        self.by_lo
            .range((start, CapId(0))..(hi, CapId(0)))
            .filter(move |(_, &root_hi)| root_hi > lo)
            .map(|(&(_, id), _)| id)
    }
}

/// The capability map with its derived indexes.
#[derive(Debug, Clone)]
pub struct Kernel {
    config: KernelConfig,
    nodes: Vec<Node>,
    roots: RootIndex,
    fault: Option<KernelFault>,
}

impl Kernel {
    pub fn new(config: KernelConfig) -> Self {
        Kernel {
            config,
            nodes: Vec::new(),
            roots: RootIndex::default(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: KernelFault) {
        self.fault = Some(fault);
    }

    pub fn config(&self) -> KernelConfig {
        self.config
    }

    /// Number of capabilities ever created.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: CapId) -> Option<&Capability> {
        self.node(id).map(|n| &n.cap)
    }

    /// Ids of the connected children of `id`.
    pub fn children(&self, id: CapId) -> &[CapId] {
        self.node(id).map(|n| n.children.as_slice()).unwrap_or(&[])
    }

    fn node(&self, id: CapId) -> Option<&Node> {
        let idx = usize::try_from(id.0).ok()?.checked_sub(1)?;
        self.nodes.get(idx)
    }

    fn node_mut(&mut self, id: CapId) -> &mut Node {
        &mut self.nodes[id.0 as usize - 1]
    }

    fn lookup(&self, id: CapId) -> Result<Capability, KernelError> {
        self.get(id).copied().ok_or(KernelError::UnknownCap(id))
    }

    fn insert(&mut self, cap: Capability) -> CapId {
        let id = CapId(self.nodes.len() as u64 + 1);
        self.nodes.push(Node {
            cap,
            children: Vec::new(),
        });
        match cap.parent {
            Some(parent) => self.node_mut(parent).children.push(id),
            None => self.roots.insert(id, cap.lo, cap.hi),
        }
        id
    }

    pub fn alloc(&mut self, lo: u64, hi: u64) -> Result<CapId, KernelError> {
        if lo >= hi {
            return Err(KernelError::EmptyRange);
        }
        Ok(self.insert(Capability {
            lo,
            hi,
            perm: Permission::Rw,
            parent: None,
            tag: CapTag::Ref,
        }))
    }

    /// Derives a new capability from `src`. Nothing is invalidated here;
    /// conflicts are resolved lazily at the next memory access.
    pub fn borrow(&mut self, src: CapId, kind: BorrowKind, lo: u64, hi: u64) -> Result<CapId, KernelError> {
        let parent = self.lookup(src)?;
        if !parent.perm.is_valid() {
            return Err(KernelError::BorrowFromInvalid);
        }
        if kind.needs_write() && parent.perm != Permission::Rw {
            return Err(KernelError::BorrowMutFromRo);
        }
        if !parent.contains(lo, hi) {
            return Err(KernelError::BoundsNotSubset);
        }
        Ok(self.insert(Capability {
            lo,
            hi,
            perm: kind.perm(),
            parent: Some(src),
            tag: kind.tag(),
        }))
    }

    /// Invalidates the whole borrow tree containing `id`.
    pub fn drop_cap(&mut self, id: CapId) -> Result<Vec<CapId>, KernelError> {
        let cap = self.lookup(id)?;
        if !cap.perm.is_valid() {
            return Err(KernelError::DropInvalid);
        }
        let root = self.root_of(id);
        let mut revoked = self.revoke_subtree(root);
        revoked.sort_unstable();
        Ok(revoked)
    }

    pub fn access_store(&mut self, id: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError> {
        let (lo, hi) = access_range(addr, width)?;
        let cap = self.lookup(id)?;
        match cap.perm {
            Permission::Na => return Err(KernelError::InvalidCapStore),
            Permission::Ro => return Err(KernelError::PermissionStore),
            Permission::Rw => {}
        }
        if !cap.contains(lo, hi) {
            return Err(KernelError::OutOfBoundsStore);
        }
        let conflicts = self.conflicts(id, lo, hi);
        let mut revoked = Vec::new();
        for c in conflicts {
            revoked.extend(self.revoke_subtree(c));
        }
        revoked.sort_unstable();
        Ok(revoked)
    }

    pub fn access_load(&mut self, id: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError> {
        let (lo, hi) = access_range(addr, width)?;
        let cap = self.lookup(id)?;
        if !cap.perm.is_valid() {
            return Err(KernelError::InvalidCapLoad);
        }
        if !cap.contains(lo, hi) {
            return Err(KernelError::OutOfBoundsLoad);
        }
        let conflicts = self.conflicts(id, lo, hi);
        let mut demoted = Vec::new();
        for c in conflicts {
            self.demote_subtree(c, &mut demoted);
        }
        demoted.sort_unstable();
        Ok(demoted)
    }

    pub fn snapshot(&self) -> BTreeMap<CapId, Capability> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (CapId(i as u64 + 1), n.cap))
            .collect()
    }

    pub fn root_of(&self, id: CapId) -> CapId {
        let mut cur = id;
        while let Some(parent) = self.nodes[cur.0 as usize - 1].cap.parent {
            cur = parent;
        }
        cur
    }

    /// Ancestor chain of `id`, including `id` itself, leaf first.
    fn ancestors(&self, id: CapId) -> Vec<CapId> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(parent) = self.nodes[cur.0 as usize - 1].cap.parent {
            out.push(parent);
            cur = parent;
        }
        out
    }

    /// Minimal set of subtree roots whose subtrees must be revoked or
    /// demoted for an access through `accessor` to `[lo, hi)`.
    ///
    /// Walks the connected trees of overlapping roots. A node that does not
    /// overlap is pruned with its subtree (children lie within its bounds).
    fn conflicts(&self, accessor: CapId, lo: u64, hi: u64) -> Vec<CapId> {
        let ancestors = self.ancestors(accessor);
        let mut stack: Vec<CapId> = self.roots.overlapping(lo, hi).collect();
        let mut out = Vec::new();
        while let Some(j) = stack.pop() {
            let node = &self.nodes[j.0 as usize - 1];
            if !node.cap.overlaps(lo, hi) {
                continue;
            }
            if ancestors.contains(&j) || self.exempt(&ancestors, j) {
                stack.extend_from_slice(&node.children);
            } else {
                out.push(j);
            }
        }
        out
    }

    /// Rust-specific exemptions for a conflicting candidate `j`, given the
    /// accessor's ancestor chain.
    fn exempt(&self, accessor_ancestors: &[CapId], j: CapId) -> bool {
        let cap = &self.nodes[j.0 as usize - 1].cap;
        if self.config.raw_pointer_relaxation && cap.tag == CapTag::RawPtr {
            if let Some(parent) = cap.parent {
                if accessor_ancestors.contains(&parent) {
                    return true;
                }
            }
        }
        if self.config.cell_relaxation {
            let cell_ancestors = accessor_ancestors
                .iter()
                .filter(|&&u| self.nodes[u.0 as usize - 1].cap.tag == CapTag::Cell);
            let candidate_ancestors = self.ancestors(j);
            for &u in cell_ancestors {
                if !candidate_ancestors.contains(&u) {
                    return true;
                }
            }
        }
        false
    }

    /// Marks the connected subtree at `top` as `NA` and detaches it.
    /// Connected nodes are valid, so every visited node is newly revoked.
    fn revoke_subtree(&mut self, top: CapId) -> Vec<CapId> {
        let skip_disconnect = self.fault == Some(KernelFault::SkipDisconnect);
        if !skip_disconnect {
            let cap = self.nodes[top.0 as usize - 1].cap;
            match cap.parent {
                Some(parent) => self.node_mut(parent).children.retain(|&c| c != top),
                None => self.roots.remove(top, cap.lo),
            }
        }
        let mut revoked = Vec::new();
        let mut stack = vec![top];
        while let Some(id) = stack.pop() {
            let node = self.node_mut(id);
            node.cap.perm = Permission::Na;
            if skip_disconnect {
                stack.extend_from_slice(&node.children);
            } else {
                stack.append(&mut node.children);
            }
            revoked.push(id);
        }
        revoked
    }

    fn demote_subtree(&mut self, top: CapId, demoted: &mut Vec<CapId>) {
        let mut stack = vec![top];
        while let Some(id) = stack.pop() {
            let node = self.node_mut(id);
            if node.cap.perm == Permission::Rw {
                node.cap.perm = Permission::Ro;
                demoted.push(id);
            }
            stack.extend_from_slice(&node.children);
        }
    }
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::new(KernelConfig::default())
    }
}

impl CapabilityModel for Kernel {
    fn alloc(&mut self, lo: u64, hi: u64) -> Result<CapId, KernelError> {
        Kernel::alloc(self, lo, hi)
    }

    fn borrow(&mut self, src: CapId, kind: BorrowKind, lo: u64, hi: u64) -> Result<CapId, KernelError> {
        Kernel::borrow(self, src, kind, lo, hi)
    }

    fn drop_cap(&mut self, cap: CapId) -> Result<Vec<CapId>, KernelError> {
        Kernel::drop_cap(self, cap)
    }

    fn access_load(&mut self, cap: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError> {
        Kernel::access_load(self, cap, addr, width)
    }

    fn access_store(&mut self, cap: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError> {
        Kernel::access_store(self, cap, addr, width)
    }

    fn capability(&self, cap: CapId) -> Option<Capability> {
        self.get(cap).copied()
    }

    fn overlaps_live_allocation(&self, lo: u64, hi: u64) -> bool {
        self.roots.overlapping(lo, hi).next().is_some()
    }

    fn snapshot(&self) -> BTreeMap<CapId, Capability> {
        Kernel::snapshot(self)
    }
}
