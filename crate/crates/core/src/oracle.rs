//! Naive reference semantics and post-hoc invariant checkers.
//!
//! Everything here is recomputed from the flat capability map on every
//! call: children by full scan, derived sets by recursion over those scans,
//! overlap sets by full scan, ancestors and roots by parent walks. No index
//! is kept and revoked capabilities are never detached. This is slow on
//! purpose; its value is that it shares no bookkeeping with [`Kernel`].
//!
//! [`Kernel`]: crate::kernel::Kernel

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::kernel::{
    access_range, BorrowKind, CapId, CapTag, Capability, CapabilityModel, KernelConfig, KernelError, KernelOp,
    OpOutcome, Permission, Verdict,
};

/// Flat capability map. Revoked entries are kept forever.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleState {
    pub config: KernelConfig,
    pub caps: BTreeMap<CapId, Capability>,
}

type IdSet = BTreeSet<CapId>;

impl OracleState {
    pub fn new(config: KernelConfig) -> Self {
        OracleState {
            config,
            caps: BTreeMap::new(),
        }
    }

    /// Builds a state from an existing map, e.g. a kernel snapshot.
    pub fn from_map(config: KernelConfig, caps: BTreeMap<CapId, Capability>) -> Self {
        OracleState { config, caps }
    }

    fn fresh_id(&self) -> CapId {
        CapId(self.caps.keys().next_back().map_or(0, |c| c.0) + 1)
    }

    /// Children of `i`, by full scan.
    pub fn children(&self, i: CapId) -> IdSet {
        self.caps
            .iter()
            .filter(|(_, c)| c.parent == Some(i))
            .map(|(&id, _)| id)
            .collect()
    }

    /// `i` together with everything in its borrow subtree.
    pub fn derived(&self, i: CapId) -> IdSet {
        let mut out = IdSet::new();
        out.insert(i);
        for child in self.children(i) {
            out.extend(self.derived(child));
        }
        out
    }

    pub fn derived_all(&self, set: &IdSet) -> IdSet {
        set.iter().flat_map(|&i| self.derived(i)).collect()
    }

    /// Every capability whose bounds intersect `[lo, hi)`, valid or not.
    pub fn overlapping(&self, lo: u64, hi: u64) -> IdSet {
        self.caps
            .iter()
            .filter(|(_, c)| c.lo < hi && lo < c.hi)
            .map(|(&id, _)| id)
            .collect()
    }

    /// `i` and all of its ancestors.
    pub fn ancestors(&self, i: CapId) -> IdSet {
        let mut out = IdSet::new();
        out.insert(i);
        if let Some(parent) = self.caps[&i].parent {
            out.extend(self.ancestors(parent));
        }
        out
    }

    pub fn root(&self, i: CapId) -> CapId {
        match self.caps[&i].parent {
            None => i,
            Some(parent) => self.root(parent),
        }
    }

    fn is_exempt(&self, accessor: CapId, candidate: CapId) -> bool {
        exempt_by_policy(self.config, &self.caps, accessor, candidate)
    }

    /// Overlapping non-ancestors of `accessor`, minus policy exemptions.
    pub fn conflict_set(&self, accessor: CapId, lo: u64, hi: u64) -> IdSet {
        let ancestors = self.ancestors(accessor);
        self.overlapping(lo, hi)
            .into_iter()
            .filter(|j| !ancestors.contains(j))
            .filter(|&j| !self.is_exempt(accessor, j))
            .collect()
    }

    /// Sets every member of `set` to `NA`; returns the ones that were valid.
    fn revoke(&mut self, set: &IdSet) -> Vec<CapId> {
        let mut changed = Vec::new();
        for i in set {
            let cap = self.caps.get_mut(i).expect("member of map");
            if cap.perm != Permission::Na {
                changed.push(*i);
            }
            cap.perm = Permission::Na;
        }
        changed
    }

    /// Demotes `RW` members of `set` to `RO`; everything else is kept.
    fn revoke_read(&mut self, set: &IdSet) -> Vec<CapId> {
        let mut changed = Vec::new();
        for i in set {
            let cap = self.caps.get_mut(i).expect("member of map");
            if cap.perm == Permission::Rw {
                cap.perm = Permission::Ro;
                changed.push(*i);
            }
        }
        changed
    }

    fn get(&self, i: CapId) -> Result<Capability, KernelError> {
        self.caps.get(&i).copied().ok_or(KernelError::UnknownCap(i))
    }
}

/// The exemption predicate shared by the oracle and the exclusive-access
/// checker, evaluated over a plain map.
fn exempt_by_policy(
    config: KernelConfig,
    caps: &BTreeMap<CapId, Capability>,
    accessor: CapId,
    candidate: CapId,
) -> bool {
    let ancestors_of = |mut i: CapId| {
        let mut out = vec![i];
        while let Some(p) = caps[&i].parent {
            out.push(p);
            i = p;
        }
        out
    };
    let accessor_ancestors = ancestors_of(accessor);
    let cand = caps[&candidate];
    if config.raw_pointer_relaxation && cand.tag == CapTag::RawPtr {
        if let Some(parent) = cand.parent {
            if accessor_ancestors.contains(&parent) {
                return true;
            }
        }
    }
    if config.cell_relaxation {
        let candidate_ancestors = ancestors_of(candidate);
        if accessor_ancestors
            .iter()
            .any(|u| caps[u].tag == CapTag::Cell && !candidate_ancestors.contains(u))
        {
            return true;
        }
    }
    false
}

impl CapabilityModel for OracleState {
    fn alloc(&mut self, lo: u64, hi: u64) -> Result<CapId, KernelError> {
        if lo >= hi {
            return Err(KernelError::EmptyRange);
        }
        let id = self.fresh_id();
        self.caps.insert(
            id,
            Capability {
                lo,
                hi,
                perm: Permission::Rw,
                parent: None,
                tag: CapTag::Ref,
            },
        );
        Ok(id)
    }

    fn borrow(&mut self, src: CapId, kind: BorrowKind, lo: u64, hi: u64) -> Result<CapId, KernelError> {
        let c = self.get(src)?;
        if c.perm == Permission::Na {
            return Err(KernelError::BorrowFromInvalid);
        }
        if kind.needs_write() && c.perm != Permission::Rw {
            return Err(KernelError::BorrowMutFromRo);
        }
        if !(c.lo <= lo && lo < hi && hi <= c.hi) {
            return Err(KernelError::BoundsNotSubset);
        }
        let id = self.fresh_id();
        self.caps.insert(
            id,
            Capability {
                lo,
                hi,
                perm: kind.perm(),
                parent: Some(src),
                tag: kind.tag(),
            },
        );
        Ok(id)
    }

    fn drop_cap(&mut self, cap: CapId) -> Result<Vec<CapId>, KernelError> {
        let c = self.get(cap)?;
        if c.perm == Permission::Na {
            return Err(KernelError::DropInvalid);
        }
        let root = self.root(cap);
        let mut set = self.derived(root);
        set.insert(root);
        Ok(self.revoke(&set))
    }

    fn access_load(&mut self, cap: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError> {
        let (lo, hi) = access_range(addr, width)?;
        let c = self.get(cap)?;
        if c.perm == Permission::Na {
            return Err(KernelError::InvalidCapLoad);
        }
        if !(c.lo <= lo && hi <= c.hi) {
            return Err(KernelError::OutOfBoundsLoad);
        }
        let s = self.conflict_set(cap, lo, hi);
        let d = self.derived_all(&s);
        Ok(self.revoke_read(&d))
    }

    fn access_store(&mut self, cap: CapId, addr: u64, width: u64) -> Result<Vec<CapId>, KernelError> {
        let (lo, hi) = access_range(addr, width)?;
        let c = self.get(cap)?;
        match c.perm {
            Permission::Na => return Err(KernelError::InvalidCapStore),
            Permission::Ro => return Err(KernelError::PermissionStore),
            Permission::Rw => {}
        }
        if !(c.lo <= lo && hi <= c.hi) {
            return Err(KernelError::OutOfBoundsStore);
        }
        let s = self.conflict_set(cap, lo, hi);
        let d = self.derived_all(&s);
        Ok(self.revoke(&d))
    }

    fn capability(&self, cap: CapId) -> Option<Capability> {
        self.caps.get(&cap).copied()
    }

    fn overlaps_live_allocation(&self, lo: u64, hi: u64) -> bool {
        self.caps
            .values()
            .any(|c| c.parent.is_none() && c.perm != Permission::Na && c.lo < hi && lo < c.hi)
    }

    fn snapshot(&self) -> BTreeMap<CapId, Capability> {
        self.caps.clone()
    }
}

/// Verdict classes used when comparing verdict streams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleVerdict {
    Ok(OpOutcome),
    Violation(KernelError),
    MalformedEvent,
}

impl From<Verdict> for OracleVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Ok(outcome) => OracleVerdict::Ok(outcome),
            Err(e) if e.is_malformed() => OracleVerdict::MalformedEvent,
            Err(e) => OracleVerdict::Violation(e),
        }
    }
}

/// One transition of the reference semantics.
pub fn oracle_step(mut state: OracleState, op: KernelOp) -> (OracleState, OracleVerdict) {
    let verdict = state.apply(op).into();
    (state, verdict)
}

/// Valid capabilities whose parent is invalid. Empty means borrows are
/// well nested.
pub fn check_well_nested(state: &OracleState) -> Vec<CapId> {
    check_well_nested_map(&state.caps)
}

pub fn check_well_nested_map(caps: &BTreeMap<CapId, Capability>) -> Vec<CapId> {
    caps.iter()
        .filter(|(_, c)| c.perm != Permission::Na)
        .filter(|(_, c)| match c.parent {
            None => false,
            Some(p) => caps.get(&p).is_none_or(|pc| pc.perm == Permission::Na),
        })
        .map(|(&id, _)| id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessOp {
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub step: u64,
    pub op: AccessOp,
    pub cap: CapId,
    pub lo: u64,
    pub hi: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateRecord {
    pub step: u64,
    pub cap: CapId,
    pub capability: Capability,
}

/// Evidence for exclusive-access checking: every creation, invalidation
/// and capability-checked access of a run, stamped with the kernel-op step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLog {
    pub creations: Vec<CreateRecord>,
    pub invalidations: Vec<(u64, CapId)>,
    pub accesses: Vec<AccessRecord>,
}

impl AccessLog {
    /// Builds the log from a kernel-operation stream and its verdicts.
    pub fn from_ops<'a>(ops: impl IntoIterator<Item = (&'a KernelOp, &'a Verdict)>) -> Self {
        let mut log = AccessLog::default();
        for (step, (op, verdict)) in ops.into_iter().enumerate() {
            let step = step as u64;
            match (*op, verdict) {
                (KernelOp::Alloc { lo, hi }, Ok(OpOutcome::Created(cap))) => log.creations.push(CreateRecord {
                    step,
                    cap: *cap,
                    capability: Capability {
                        lo,
                        hi,
                        perm: Permission::Rw,
                        parent: None,
                        tag: CapTag::Ref,
                    },
                }),
                (KernelOp::Borrow { src, kind, lo, hi }, Ok(OpOutcome::Created(cap))) => {
                    log.creations.push(CreateRecord {
                        step,
                        cap: *cap,
                        capability: Capability {
                            lo,
                            hi,
                            perm: kind.perm(),
                            parent: Some(src),
                            tag: kind.tag(),
                        },
                    })
                }
                (KernelOp::Load { cap, addr, width }, v) | (KernelOp::Store { cap, addr, width }, v) => {
                    let op = if matches!(op, KernelOp::Load { .. }) {
                        AccessOp::Load
                    } else {
                        AccessOp::Store
                    };
                    if let Ok((lo, hi)) = access_range(addr, width) {
                        log.accesses.push(AccessRecord {
                            step,
                            op,
                            cap,
                            lo,
                            hi,
                            ok: v.is_ok(),
                        });
                    }
                    if let Ok(OpOutcome::Revoked(ids)) = v {
                        log.invalidations.extend(ids.iter().map(|&i| (step, i)));
                    }
                }
                (KernelOp::Drop { .. }, Ok(OpOutcome::Revoked(ids))) => {
                    log.invalidations.extend(ids.iter().map(|&i| (step, i)));
                }
                _ => {}
            }
        }
        log
    }

    /// Step at which each capability was created and, if ever, invalidated,
    /// plus its immutable fields. Reconstructed by replaying the log.
    fn lifetimes(&self) -> BTreeMap<CapId, Lifetime> {
        let mut out: BTreeMap<CapId, Lifetime> = self
            .creations
            .iter()
            .map(|c| {
                (
                    c.cap,
                    Lifetime {
                        created: c.step,
                        invalidated: None,
                        cap: c.capability,
                    },
                )
            })
            .collect();
        for &(step, id) in &self.invalidations {
            if let Some(l) = out.get_mut(&id) {
                l.invalidated.get_or_insert(step);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Lifetime {
    created: u64,
    invalidated: Option<u64>,
    cap: Capability,
}

impl Lifetime {
    /// Valid immediately before `t1` and immediately before `t2`.
    fn spans(&self, t1: u64, t2: u64) -> bool {
        self.created < t1 && self.invalidated.is_none_or(|s| s >= t2)
    }
}

/// Pairs of access steps `(t1, t2)` that break exclusive access.
///
/// A pair is reported when, for some capability `c` valid before both
/// steps, `t1` goes through a capability outside `c`'s subtree, `t2` goes
/// through one inside it, the two ranges alias, and either `t1` is a store
/// or `t2` is a store. Only successful accesses count. A `t1` accessor that
/// the active relaxation policy exempts `c` from does not count.
pub fn check_exclusive_access(log: &AccessLog, config: KernelConfig) -> Vec<(u64, u64)> {
    let lifetimes = log.lifetimes();
    let caps: BTreeMap<CapId, Capability> = lifetimes.iter().map(|(&id, l)| (id, l.cap)).collect();
    let chain = |mut i: CapId| {
        let mut out = vec![i];
        while let Some(p) = caps.get(&i).and_then(|c| c.parent) {
            out.push(p);
            i = p;
        }
        out
    };
    let ok: Vec<&AccessRecord> = log
        .accesses
        .iter()
        .filter(|a| a.ok && caps.contains_key(&a.cap))
        .collect();
    let mut pairs = Vec::new();
    for (j, second) in ok.iter().enumerate() {
        let inside_chain = chain(second.cap);
        for first in &ok[..j] {
            if first.step >= second.step {
                continue;
            }
            if first.op == AccessOp::Load && second.op == AccessOp::Load {
                continue;
            }
            if !(first.lo < second.hi && second.lo < first.hi) {
                continue;
            }
            let outside_chain = chain(first.cap);
            let hit = inside_chain.iter().any(|c| {
                lifetimes[c].spans(first.step, second.step)
                    && !outside_chain.contains(c)
                    && !exempt_by_policy(config, &caps, first.cap, *c)
            });
            if hit {
                pairs.push((first.step, second.step));
            }
        }
    }
    pairs
}
