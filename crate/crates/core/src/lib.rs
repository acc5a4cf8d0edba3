//! Revoke-on-use capability simulator.
//!
//! * [`kernel`]: capability map, borrow forest and the six transitions.
//! * [`oracle`]: naive reference semantics and invariant checkers.
//! * [`machine`]: register machine with shadow capability metadata.
//! * [`trace`]: the `.cap` text format.
//! * [`fuzz`]: seeded trace generation, differential runs and shrinking.
//! * [`report`]: text and JSON reports.

pub mod fuzz;
pub mod kernel;
pub mod machine;
pub mod oracle;
pub mod report;
pub mod trace;

pub use kernel::{
    BorrowKind, CapId, CapTag, Capability, CapabilityModel, Kernel, KernelConfig, KernelError, Permission,
};
pub use machine::{Machine, MachineConfig, Mode, OnViolation, ViolationKind, ViolationReport};
pub use oracle::{check_exclusive_access, check_well_nested, oracle_step, OracleState};
pub use trace::{parse, serialize, TraceProgram};
