//! The shipped scenario corpus, run through the library on both capability
//! models under every relaxation setting.

use std::path::{Path, PathBuf};

use capsim_core::kernel::{CapabilityModel, Kernel, KernelConfig};
use capsim_core::machine::{Machine, MachineConfig, OnViolation, RunOutcome, ViolationKind};
use capsim_core::oracle::OracleState;
use capsim_core::report::check_expectations;
use capsim_core::trace::{parse, TraceProgram};

fn corpus() -> Vec<(PathBuf, TraceProgram)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cap"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let program = parse(&std::fs::read_to_string(&p).unwrap()).unwrap();
            (p, program)
        })
        .collect()
}

fn config(kernel: KernelConfig) -> MachineConfig {
    MachineConfig {
        kernel,
        on_violation: OnViolation::Continue,
        ..MachineConfig::default()
    }
}

fn run<M: CapabilityModel>(m: &mut Machine<M>, p: &TraceProgram) -> RunOutcome {
    m.run(p).unwrap()
}

#[test]
fn expectations_hold_with_default_relaxations() {
    for (path, program) in corpus() {
        let mut m = Machine::new(config(KernelConfig::default()));
        let out = run(&mut m, &program);
        let mismatches = check_expectations(&program, &out, m.diagnostics());
        assert!(mismatches.is_empty(), "{}: {mismatches:?}", path.display());
    }
}

#[test]
fn kernel_and_oracle_machines_agree() {
    for kernel in KernelConfig::all_combinations() {
        for (path, program) in corpus() {
            let mut a = Machine::new(config(kernel));
            let mut b = Machine::with_model(config(kernel), OracleState::new(kernel));
            assert_eq!(
                run(&mut a, &program),
                run(&mut b, &program),
                "{} [{kernel}]",
                path.display()
            );
            assert_eq!(a.ops(), b.ops());
            assert_eq!(a.model().snapshot(), b.model().snapshot());
        }
    }
}

fn kinds(name: &str, kernel: KernelConfig) -> Vec<ViolationKind> {
    let (_, program) = corpus()
        .into_iter()
        .find(|(p, _)| p.file_name().unwrap() == name)
        .unwrap();
    let mut m = Machine::with_model(config(kernel), Kernel::new(kernel));
    run(&mut m, &program).violations.iter().map(|v| v.kind).collect()
}

#[test]
fn relaxation_controls_flip() {
    let no_raw = KernelConfig {
        raw_pointer_relaxation: false,
        ..KernelConfig::default()
    };
    let no_cell = KernelConfig {
        cell_relaxation: false,
        ..KernelConfig::default()
    };
    assert!(kinds("raw_interleave.cap", KernelConfig::default()).is_empty());
    assert_eq!(
        kinds("raw_interleave.cap", no_raw).first(),
        Some(&ViolationKind::InvalidCapabilityStore)
    );
    assert!(kinds("raw_interleave.cap", no_cell).is_empty());
    assert!(kinds("cell_siblings.cap", KernelConfig::default()).is_empty());
    assert_eq!(
        kinds("cell_siblings.cap", no_cell).first(),
        Some(&ViolationKind::InvalidCapabilityStore)
    );
    assert!(kinds("cell_siblings.cap", no_raw).is_empty());
}

#[test]
fn bug_patterns_are_caught_without_relaxations_too() {
    for name in [
        "fig3.cap",
        "uaf.cap",
        "generator.cap",
        "mozjpeg.cap",
        "vorbis.cap",
        "overlap_copy.cap",
    ] {
        assert!(!kinds(name, KernelConfig::STRICT).is_empty(), "{name}");
    }
}
