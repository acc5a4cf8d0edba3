//! Property tests: kernel against oracle on arbitrary operation streams,
//! and parse/serialize round trips.

use std::collections::HashSet;

use capsim_core::kernel::{BorrowKind, CapId, CapabilityModel, Kernel, KernelConfig, KernelOp, OpOutcome, Permission};
use capsim_core::machine::ViolationKind;
use capsim_core::oracle::{check_well_nested, OracleState};
use capsim_core::trace::{parse, serialize, AllocKind, Expectation, Instr, Reg, TraceEvent, TraceProgram};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = KernelConfig> {
    (any::<bool>(), any::<bool>()).prop_map(|(r, c)| KernelConfig {
        raw_pointer_relaxation: r,
        cell_relaxation: c,
    })
}

fn borrow_kind() -> impl Strategy<Value = BorrowKind> {
    prop::sample::select(BorrowKind::ALL.to_vec())
}

/// Operations over a small address window and a small id space, so that
/// overlaps, stale ids and unknown ids are all common.
fn op() -> impl Strategy<Value = KernelOp> {
    let addr = (0u64..12).prop_map(|w| 0x100 + 4 * w);
    let cap = (1u64..24).prop_map(CapId);
    prop_oneof![
        2 => (addr.clone(), 1u64..40).prop_map(|(lo, len)| KernelOp::Alloc { lo, hi: lo + len }),
        5 => (cap.clone(), borrow_kind(), addr.clone(), 0u64..24).prop_map(|(src, kind, lo, len)| KernelOp::Borrow {
            src,
            kind,
            lo,
            hi: lo + len
        }),
        1 => cap.clone().prop_map(|cap| KernelOp::Drop { cap }),
        4 => (cap.clone(), addr.clone(), prop::sample::select(vec![0u64, 1, 4, 8]))
            .prop_map(|(cap, addr, width)| KernelOp::Load { cap, addr, width }),
        4 => (cap, addr, prop::sample::select(vec![0u64, 1, 4, 8]))
            .prop_map(|(cap, addr, width)| KernelOp::Store { cap, addr, width }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn kernel_matches_oracle(cfg in config(), ops in prop::collection::vec(op(), 1..80)) {
        let mut kernel = Kernel::new(cfg);
        let mut oracle = OracleState::new(cfg);
        let mut revoked = HashSet::new();
        let mut created = 0usize;
        for op in ops {
            let before = kernel.snapshot();
            let kv = kernel.apply(op);
            let ov = oracle.apply(op);
            prop_assert_eq!(&kv, &ov, "verdicts differ on {}", op);
            prop_assert_eq!(kernel.snapshot(), oracle.snapshot());
            prop_assert!(check_well_nested(&oracle).is_empty());
            // permissions only ever move towards NA
            for (id, cap) in kernel.snapshot() {
                if let Some(old) = before.get(&id) {
                    prop_assert!(old.perm.allows_transition_to(cap.perm));
                }
            }
            match kv {
                Ok(OpOutcome::Created(_)) => created += 1,
                Ok(OpOutcome::Revoked(ids)) => {
                    for id in ids {
                        prop_assert!(revoked.insert(id), "{} revoked twice", id);
                        prop_assert_eq!(kernel.get(id).unwrap().perm, Permission::Na);
                    }
                }
                _ => {}
            }
        }
        prop_assert!(revoked.len() <= created);
    }
}

fn reg() -> impl Strategy<Value = Reg> {
    (0u8..32).prop_map(Reg)
}

fn imm() -> impl Strategy<Value = i64> {
    prop_oneof![-5000i64..5000, -(1i64 << 62)..(1i64 << 62)]
}

fn width() -> impl Strategy<Value = u8> {
    prop::sample::select(vec![1u8, 2, 4, 8])
}

fn instr() -> impl Strategy<Value = Instr> {
    let alloc_kind = prop::option::of(prop_oneof![Just(AllocKind::Ref), Just(AllocKind::Cell)]);
    let bounds = prop::option::of((0u64..1 << 40, 1u64..1 << 20).prop_map(|(lo, len)| (lo, lo + len)));
    prop_oneof![
        (reg(), imm()).prop_map(|(rd, imm)| Instr::Li { rd, imm }),
        (reg(), reg()).prop_map(|(rd, rs)| Instr::Mv { rd, rs }),
        (reg(), reg(), reg()).prop_map(|(rd, rs1, rs2)| Instr::Add { rd, rs1, rs2 }),
        (reg(), reg(), imm()).prop_map(|(rd, rs, imm)| Instr::Addi { rd, rs, imm }),
        (reg(), 0u64..1 << 48, 1u64..1 << 16, alloc_kind).prop_map(|(rd, addr, len, kind)| Instr::Alloc {
            rd,
            addr,
            len,
            kind
        }),
        (reg(), reg(), borrow_kind(), bounds).prop_map(|(rd, rs, kind, bounds)| Instr::Borrow { rd, rs, kind, bounds }),
        reg().prop_map(|rs| Instr::Drop { rs }),
        (reg(), imm(), reg(), width()).prop_map(|(rd, off, rs, width)| Instr::Ld { rd, off, rs, width }),
        (reg(), imm(), reg(), width()).prop_map(|(rs2, off, rs1, width)| Instr::Sd { rs2, off, rs1, width }),
        Just(Instr::Halt),
    ]
}

fn expectation() -> impl Strategy<Value = Option<Expectation>> {
    prop::option::of(prop_oneof![
        Just(Expectation::Ok),
        prop::sample::select(ViolationKind::ALL.to_vec()).prop_map(Expectation::Violation),
    ])
}

fn comment() -> impl Strategy<Value = String> {
    "( [a-z0-9.,:()-]{1,10}){0,3}"
}

fn program() -> impl Strategy<Value = TraceProgram> {
    let event =
        (instr(), expectation(), prop::collection::vec(comment(), 0..2)).prop_map(|(instr, expect, comments)| {
            TraceEvent {
                instr,
                expect,
                comments,
            }
        });
    (
        prop::collection::vec(event, 0..40),
        prop::collection::vec(comment(), 0..2),
    )
        .prop_map(|(events, trailing)| TraceProgram {
            events,
            lines: Vec::new(),
            trailing_comments: trailing,
        })
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(p in program()) {
        let text = serialize(&p);
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(serialize(&back), text);
    }
}

#[test]
fn scenario_files_are_canonical() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cap") {
            let text = std::fs::read_to_string(&path).unwrap();
            let program = parse(&text).unwrap();
            assert_eq!(serialize(&program), text, "{} is not canonical", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 11);
}
