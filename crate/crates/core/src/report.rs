//! Run summaries, expectation checking and the text/JSON report formats.

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::machine::{Diagnostic, DiagnosticKind, MachineStats, RunOutcome, ViolationKind, ViolationReport};
use crate::trace::{Expectation, TraceProgram};

/// Version of the JSON report layout. Keys are only ever added.
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonViolation {
    #[serde(flatten)]
    pub report: ViolationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonStats {
    pub caps_created: u64,
    pub caps_invalidated: u64,
    pub caps_demoted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub version: u32,
    pub trace: String,
    pub events: usize,
    pub violations: Vec<JsonViolation>,
    pub stats: JsonStats,
    pub diagnostics: Vec<Diagnostic>,
    pub wall_time_ms: f64,
}

/// Everything a front end needs to print about one trace run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub trace: String,
    pub events: usize,
    pub events_executed: usize,
    pub violations: Vec<ViolationReport>,
    pub diagnostics: Vec<Diagnostic>,
    pub stats: MachineStats,
    pub wall_time: Duration,
    lines: Vec<usize>,
}

impl RunSummary {
    pub fn new(
        trace: impl Into<String>,
        program: &TraceProgram,
        outcome: RunOutcome,
        diagnostics: &[Diagnostic],
        stats: MachineStats,
        wall_time: Duration,
    ) -> Self {
        RunSummary {
            trace: trace.into(),
            events: program.len(),
            events_executed: outcome.events_executed,
            violations: outcome.violations,
            diagnostics: diagnostics.to_vec(),
            stats,
            wall_time,
            lines: program.lines.clone(),
        }
    }

    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn line_of(&self, event_index: usize) -> Option<usize> {
        self.lines.get(event_index).copied()
    }

    pub fn to_json(&self) -> JsonReport {
        JsonReport {
            version: REPORT_VERSION,
            trace: self.trace.clone(),
            events: self.events,
            violations: self
                .violations
                .iter()
                .map(|v| JsonViolation {
                    report: v.clone(),
                    line: self.line_of(v.event_index),
                })
                .collect(),
            stats: JsonStats {
                caps_created: self.stats.caps_created,
                caps_invalidated: self.stats.caps_invalidated,
                caps_demoted: self.stats.caps_demoted,
            },
            diagnostics: self.diagnostics.clone(),
            wall_time_ms: self.wall_time.as_secs_f64() * 1e3,
        }
    }

    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let verdict = match self.violations.len() {
            0 => "ok".to_string(),
            1 => "1 violation".to_string(),
            n => format!("{n} violations"),
        };
        let _ = writeln!(
            out,
            "{}: {verdict} ({} of {} events, {} capabilities created, {} invalidated)",
            self.trace, self.events_executed, self.events, self.stats.caps_created, self.stats.caps_invalidated
        );
        for v in &self.violations {
            out.push_str(&render_violation(v, self.line_of(v.event_index)));
        }
        for d in &self.diagnostics {
            let where_ = match self.line_of(d.event_index) {
                Some(line) => format!("event {} (line {line})", d.event_index),
                None => format!("event {}", d.event_index),
            };
            match &d.kind {
                DiagnosticKind::ProvenanceAmbiguous { chosen, candidates } => {
                    let _ = writeln!(
                        out,
                        "  note: {where_}: provenance ambiguous between {}, chose {chosen}",
                        join_ids(candidates, ", ")
                    );
                }
                DiagnosticKind::ProvenanceTruncated { dropped } => {
                    let _ = writeln!(
                        out,
                        "  note: {where_}: provenance list over bound, dropped {}",
                        join_ids(dropped, ", ")
                    );
                }
            }
        }
        out
    }
}

fn join_ids<T: std::fmt::Display>(ids: &[T], sep: &str) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

/// Multi-line description of one violation, with its parent chain and
/// (when captured) the borrow tree it belongs to.
pub fn render_violation(v: &ViolationReport, line: Option<usize>) -> String {
    let mut out = String::new();
    let at = match line {
        Some(line) => format!("event {} (line {line})", v.event_index),
        None => format!("event {}", v.event_index),
    };
    let _ = writeln!(out, "  {at}: {}", v.kind);
    let _ = writeln!(out, "    {}", v.message);
    if let Some(cap) = v.cap {
        let _ = writeln!(
            out,
            "    capability {cap}, parent chain {}",
            join_ids(&v.parents, " -> ")
        );
    }
    match (v.addr, v.width) {
        (Some(addr), Some(width)) => {
            let _ = writeln!(
                out,
                "    range {addr:#x}..{:#x} ({width} bytes)",
                addr.wrapping_add(width)
            );
        }
        (Some(addr), None) => {
            let _ = writeln!(out, "    address {addr:#x}");
        }
        _ => {}
    }
    if let Some(tree) = &v.tree {
        let _ = writeln!(out, "    borrow tree:");
        for row in tree {
            let parent = row.parent.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "      {:>4}  parent {:>4}  {:#x}..{:#x}  {}",
                row.cap, parent, row.lo, row.hi, row.perm
            );
        }
    }
    out
}

/// What actually happened at an event, in `expect` vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observed {
    Ok,
    Violation(ViolationKind),
    NotExecuted,
}

impl std::fmt::Display for Observed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observed::Ok => f.write_str("ok"),
            Observed::Violation(kind) => write!(f, "violation {kind}"),
            Observed::NotExecuted => f.write_str("not executed"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub event_index: usize,
    pub line: Option<usize>,
    pub expected: Expectation,
    pub observed: Observed,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: ")?,
            None => write!(f, "event {}: ", self.event_index)?,
        }
        write!(f, "{}, observed {}", self.expected, self.observed)
    }
}

/// Observed verdict of every event. An ambiguity diagnostic counts as a
/// `provenance-ambiguous` observation when no violation was raised there.
pub fn observed_verdicts(events: usize, outcome: &RunOutcome, diagnostics: &[Diagnostic]) -> Vec<Observed> {
    let mut observed = vec![Observed::NotExecuted; events];
    for slot in observed.iter_mut().take(outcome.events_executed) {
        *slot = Observed::Ok;
    }
    for d in diagnostics {
        if matches!(d.kind, DiagnosticKind::ProvenanceAmbiguous { .. }) {
            observed[d.event_index] = Observed::Violation(ViolationKind::ProvenanceAmbiguous);
        }
    }
    for v in &outcome.violations {
        observed[v.event_index] = Observed::Violation(v.kind);
    }
    observed
}

/// Matches every `expect` directive in `program` against the run.
pub fn check_expectations(program: &TraceProgram, outcome: &RunOutcome, diagnostics: &[Diagnostic]) -> Vec<Mismatch> {
    let observed = observed_verdicts(program.len(), outcome, diagnostics);
    program
        .events
        .iter()
        .enumerate()
        .filter_map(|(i, event)| {
            let expected = event.expect?;
            let matches = match (expected, observed[i]) {
                (Expectation::Ok, Observed::Ok) => true,
                (Expectation::Ok, Observed::Violation(ViolationKind::ProvenanceAmbiguous)) => {
                    // a non-fatal ambiguity note does not fail the event
                    !outcome.violations.iter().any(|v| v.event_index == i)
                }
                (Expectation::Violation(want), Observed::Violation(got)) => want == got,
                _ => false,
            };
            (!matches).then_some(Mismatch {
                event_index: i,
                line: program.line_of(i),
                expected,
                observed: observed[i],
            })
        })
        .collect()
}
