use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AllocId, DetectorMode};
use crate::kir::InstrId;

/// Thread `thread` of block `block`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ThreadId {
    pub block: u32,
    pub thread: u32,
}

impl ThreadId {
    pub fn new(block: u32, thread: u32) -> Self {
        ThreadId { block, thread }
    }
}

impl fmt::Display for ThreadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}^{}", self.thread, self.block)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Free,
    Alloc,
}

impl AccessKind {
    pub fn name(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Free => "free",
            AccessKind::Alloc => "alloc",
        }
    }
}

#[allow(non_camel_case_types, clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BugClass {
    BO,
    OOB_RW,
    UAF,
    UAS,
    IF,
    DF,
    Uninit,
}

impl BugClass {
    pub const ALL: [BugClass; 7] = [
        BugClass::BO,
        BugClass::OOB_RW,
        BugClass::UAF,
        BugClass::UAS,
        BugClass::IF,
        BugClass::DF,
        BugClass::Uninit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BugClass::BO => "BO",
            BugClass::OOB_RW => "OOB_RW",
            BugClass::UAF => "UAF",
            BugClass::UAS => "UAS",
            BugClass::IF => "IF",
            BugClass::DF => "DF",
            BugClass::Uninit => "uninit",
        }
    }

    pub fn is_spatial(self) -> bool {
        matches!(self, BugClass::BO | BugClass::OOB_RW)
    }

    /// Whether a report of class `self` counts as detecting a declared bug
    /// of class `declared`. A buffer overflow report is accepted for an
    /// arbitrary read/write, never the other way round.
    pub fn satisfies(self, declared: BugClass) -> bool {
        self == declared || (declared == BugClass::OOB_RW && self == BugClass::BO)
    }
}

impl fmt::Display for BugClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One memory event of an execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccessRecord {
    pub thread: ThreadId,
    pub instr_id: InstrId,
    pub kind: AccessKind,
    /// Allocation the base pointer derives from.
    pub buffer: Option<AllocId>,
    /// Element offset from the allocation base.
    pub index: i64,
    pub byte_addr: u64,
    /// Introduced by lowering rather than present in the kernel.
    pub compiler_induced: bool,
}

impl AccessRecord {
    pub fn line(&self) -> String {
        format!(
            "{} {} {} @{:#x} buf={} idx={}{}",
            self.thread,
            self.instr_id,
            self.kind.name(),
            self.byte_addr,
            self.buffer.map(|b| b.0 as i64).unwrap_or(-1),
            self.index,
            if self.compiler_induced { " compiler" } else { "" }
        )
    }
}

/// Owning or nearest allocation and the signed byte distance from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocContext {
    pub alloc: Option<AllocId>,
    pub distance: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReport {
    pub class: BugClass,
    pub access: AccessRecord,
    pub context: AllocContext,
    pub detector: DetectorMode,
}

impl BugReport {
    pub fn dedup_key(&self) -> (InstrId, BugClass) {
        (self.access.instr_id, self.class)
    }

    /// One line of JSON with stable field names.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "class": self.class.name(),
            "instr": self.access.instr_id.0,
            "block": self.access.thread.block,
            "thread": self.access.thread.thread,
            "kind": self.access.kind.name(),
            "address": self.access.byte_addr,
            "alloc": self.context.alloc.map(|a| a.0),
            "distance": self.context.distance,
            "detector": self.detector.name(),
        })
        .to_string()
    }
}
