//! Memory-safety benchmark corpus: 100 generated kernels covering spatial
//! and temporal bugs across global, local and shared memory, each with a
//! patched twin, plus a scorer that builds a per-row detection matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::analyze;
use crate::exec::{Arg, ExecConfig, ExecResult, Inputs};
use crate::fuzz::InputLayout;
use crate::kir::{parse_kernel, GridConfig, Kernel};
use crate::pact::{lower, run_lowered_with, Schedule};
use crate::refsim::run_reference;
use crate::sanrt::{BugClass, DetectorMode, Policy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis1 {
    Spatial,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Global,
    Local,
    Shared,
    IntraAllocation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocKind {
    Host,
    Device,
    IntraFrameStatic,
    IntraFrameDynamic,
    InterFrameStatic,
    InterFrameDynamic,
    BeyondLocalStatic,
    BeyondLocalDynamic,
    Static,
    Dynamic,
    /// Sub-objects of a global buffer.
    Global,
    /// Sub-objects of a stack array.
    Local,
    /// Sub-objects of a shared array.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adjacency {
    Adjacent,
    NonAdjacent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    Immediate,
    Delayed,
}

/// How an invalid free goes wrong.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeKind {
    /// Pointer into the middle of a live allocation.
    Interior,
    /// Released through the other heap API.
    AllocatorMismatch,
    /// Pointer derived from one allocation that lands on another's base.
    ForeignBase,
}

/// Per-detector verdicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    pub redzone: bool,
    pub exact: bool,
}

impl Expected {
    pub fn for_mode(&self, mode: DetectorMode) -> bool {
        match mode {
            DetectorMode::Redzone => self.redzone,
            DetectorMode::Exact => self.exact,
            DetectorMode::Reference => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseDescriptor {
    pub id: String,
    pub axis1: Axis1,
    pub region: Region,
    pub alloc: AllocKind,
    pub class: BugClass,
    pub adjacency: Option<Adjacency>,
    pub timing: Option<Timing>,
    pub variant: String,
    /// The overflow stays inside the last, partially used shadow granule.
    pub granule_slack: bool,
    pub free_kind: Option<FreeKind>,
    pub expected: Expected,
}

impl CaseDescriptor {
    pub fn row(&self) -> RowKey {
        RowKey {
            axis1: self.axis1,
            region: self.region,
            alloc: self.alloc,
            class: self.class,
        }
    }
}

/// Detector verdicts that follow from the detector rules alone: the redzone
/// detector sees only poisoned granules, so it misses anything landing in
/// addressable memory (far overflows, partial-granule slack, reused chunks,
/// frees of another live base or through the wrong API). The exact detector
/// tracks each pointer's allocation but not dynamic shared carve-outs.
pub fn derive_expected(d: &CaseDescriptor) -> Expected {
    let redzone = match d.class {
        BugClass::BO => !d.granule_slack,
        BugClass::OOB_RW => false,
        BugClass::UAF | BugClass::UAS => d.timing == Some(Timing::Immediate),
        BugClass::IF => d.free_kind == Some(FreeKind::Interior),
        BugClass::DF | BugClass::Uninit => true,
    };
    let exact = !(d.region == Region::Shared && d.alloc == AllocKind::Dynamic && d.class == BugClass::OOB_RW);
    Expected { redzone, exact }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub axis1: Axis1,
    pub region: Region,
    pub alloc: AllocKind,
    pub class: BugClass,
}

impl RowKey {
    pub fn label(&self) -> String {
        let s = |v: &dyn erased::Name| v.name();
        format!("{}/{}/{}/{}", s(&self.axis1), s(&self.region), s(&self.alloc), self.class.name())
    }
}

mod erased {
    pub trait Name {
        fn name(&self) -> String;
    }
    impl<T: serde::Serialize> Name for T {
        fn name(&self) -> String {
            serde_json::to_value(self)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default()
        }
    }
}

/// One row of the published coverage table: case count and the detected
/// counts reported for the redzone-style and bounds-tracking tools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub key: RowKey,
    pub count: u32,
    pub published_redzone: u32,
    pub published_exact: u32,
}

const fn row(axis1: Axis1, region: Region, alloc: AllocKind, class: BugClass, count: u32, rz: u32, ex: u32) -> TableRow {
    TableRow {
        key: RowKey {
            axis1,
            region,
            alloc,
            class,
        },
        count,
        published_redzone: rz,
        published_exact: ex,
    }
}

use AllocKind as A;
use Axis1::{Spatial, Temporal};
use BugClass::{BO, DF, IF, OOB_RW as RW, UAF, UAS};
use Region::{Global, IntraAllocation, Local, Shared};

pub const TABLE: [TableRow; 34] = [
    row(Spatial, Global, A::Host, BO, 4, 4, 4),
    row(Spatial, Global, A::Host, RW, 4, 0, 4),
    row(Spatial, Global, A::Device, BO, 4, 4, 4),
    row(Spatial, Global, A::Device, RW, 4, 0, 4),
    row(Spatial, Local, A::IntraFrameStatic, BO, 3, 3, 3),
    row(Spatial, Local, A::IntraFrameStatic, RW, 3, 0, 3),
    row(Spatial, Local, A::IntraFrameDynamic, BO, 3, 3, 3),
    row(Spatial, Local, A::IntraFrameDynamic, RW, 3, 0, 3),
    row(Spatial, Local, A::InterFrameStatic, BO, 2, 2, 2),
    row(Spatial, Local, A::InterFrameStatic, RW, 2, 0, 2),
    row(Spatial, Local, A::InterFrameDynamic, BO, 2, 2, 2),
    row(Spatial, Local, A::InterFrameDynamic, RW, 2, 0, 2),
    row(Spatial, Local, A::BeyondLocalStatic, BO, 2, 2, 2),
    row(Spatial, Local, A::BeyondLocalStatic, RW, 2, 0, 2),
    row(Spatial, Local, A::BeyondLocalDynamic, BO, 2, 2, 2),
    row(Spatial, Local, A::BeyondLocalDynamic, RW, 2, 0, 2),
    row(Spatial, Shared, A::Static, BO, 7, 7, 7),
    row(Spatial, Shared, A::Static, RW, 7, 0, 7),
    row(Spatial, Shared, A::Dynamic, BO, 7, 5, 7),
    row(Spatial, Shared, A::Dynamic, RW, 7, 0, 0),
    row(Spatial, IntraAllocation, A::Global, BO, 2, 2, 2),
    row(Spatial, IntraAllocation, A::Global, RW, 2, 0, 2),
    row(Spatial, IntraAllocation, A::Local, BO, 2, 2, 2),
    row(Spatial, IntraAllocation, A::Local, RW, 2, 0, 2),
    row(Spatial, IntraAllocation, A::Shared, BO, 2, 2, 2),
    row(Spatial, IntraAllocation, A::Shared, RW, 2, 0, 2),
    row(Temporal, Global, A::Host, UAF, 2, 1, 1),
    row(Temporal, Global, A::Host, IF, 3, 1, 3),
    row(Temporal, Global, A::Host, DF, 1, 1, 1),
    row(Temporal, Global, A::Device, UAF, 2, 1, 1),
    row(Temporal, Global, A::Device, IF, 3, 1, 3),
    row(Temporal, Global, A::Device, DF, 1, 1, 1),
    row(Temporal, Local, A::Static, UAS, 2, 1, 2),
    row(Temporal, Local, A::Dynamic, UAS, 2, 1, 2),
];

/// A generated kernel with its launch and arguments.
#[derive(Clone, Debug)]
pub struct Program {
    pub source: String,
    pub kernel: Kernel,
    pub grid: GridConfig,
    pub inputs: Inputs,
}

#[derive(Clone, Debug)]
pub struct GmsCase {
    pub desc: CaseDescriptor,
    pub buggy: Program,
    pub patched: Program,
}

#[derive(Default)]
struct Builder {
    params: Vec<(String, Arg)>,
    shared: Vec<String>,
    body: Vec<String>,
    grid: Option<GridConfig>,
}

impl Builder {
    fn buf(&mut self, decl: &str, arg: Arg) -> &mut Self {
        self.params.push((decl.to_string(), arg));
        self
    }

    fn int(&mut self, name: &str, v: i64) -> &mut Self {
        self.params.push((format!("{name}: i32"), Arg::Int(v)));
        self
    }

    fn shared(&mut self, decl: String) -> &mut Self {
        self.shared.push(decl);
        self
    }

    fn line(&mut self, s: impl Into<String>) -> &mut Self {
        self.body.push(s.into());
        self
    }

    fn lines<I: IntoIterator<Item = S>, S: Into<String>>(&mut self, it: I) -> &mut Self {
        for s in it {
            self.body.push(s.into());
        }
        self
    }

    fn grid(&mut self, g: GridConfig) -> &mut Self {
        self.grid = Some(g);
        self
    }

    fn build(&self, name: &str) -> Program {
        let params: Vec<&str> = self.params.iter().map(|(d, _)| d.as_str()).collect();
        let mut src = format!("kernel {name}({})\n", params.join(", "));
        for s in &self.shared {
            let _ = writeln!(src, "  shared {s}");
        }
        for l in &self.body {
            let _ = writeln!(src, "  {l}");
        }
        let kernel = parse_kernel(&src).unwrap_or_else(|e| panic!("generated kernel does not parse: {e}\n{src}"));
        Program {
            source: src,
            kernel,
            grid: self.grid.unwrap_or(GridConfig::new(1, 1)),
            inputs: Inputs::new(self.params.iter().map(|(_, a)| a.clone()).collect()),
        }
    }
}

fn zeros(n: i64) -> Arg {
    Arg::zeros(crate::kir::ScalarType::I32, n as usize)
}

/// Variant names per row, in generation order.
fn variants(r: &RowKey) -> &'static [&'static str] {
    match (r.axis1, r.region, r.alloc, r.class) {
        (Spatial, Global, A::Host, BO) => &["write_end", "read_end", "write_before", "thread_end"],
        (Spatial, Global, A::Host, _) => &["write_host", "read_host", "write_device", "write_local"],
        (Spatial, Global, A::Device, BO) => &["write_end", "read_end", "write_before", "read_before"],
        (Spatial, Global, A::Device, _) => &["write_device", "read_device", "write_host", "write_local"],
        (Spatial, Local, A::IntraFrameStatic | A::IntraFrameDynamic, BO) => &["write_end", "read_end", "write_before"],
        (Spatial, Local, A::IntraFrameStatic | A::IntraFrameDynamic, _) => &["write_same", "read_same", "write_other"],
        (Spatial, Local, A::InterFrameStatic | A::InterFrameDynamic, BO) => &["write_before", "read_before"],
        (Spatial, Local, A::InterFrameStatic | A::InterFrameDynamic, _) => &["write_outer", "read_outer"],
        (Spatial, Local, _, BO) => &["write_end_wide", "read_past_end"],
        (Spatial, Local, _, _) => &["write_host", "read_device"],
        (Spatial, Shared, A::Static, BO) => &[
            "write_end",
            "read_end",
            "write_before",
            "read_before",
            "thread_end",
            "write_next",
            "write_end_wide",
        ],
        (Spatial, Shared, A::Static, _) => &[
            "write_shared",
            "read_shared",
            "write_local",
            "write_host",
            "write_device",
            "thread_shared",
            "read_far",
        ],
        (Spatial, Shared, A::Dynamic, BO) => &[
            "write_end",
            "read_end",
            "write_before",
            "read_before",
            "write_last",
            "slack_write",
            "slack_read",
        ],
        (Spatial, Shared, A::Dynamic, _) => &[
            "write_a_c",
            "read_a_c",
            "write_c_a",
            "read_c_a",
            "thread_a_c",
            "write_b_d",
            "read_d_b",
        ],
        (Spatial, IntraAllocation, _, BO) => &["write_last_field", "read_last_field"],
        (Spatial, IntraAllocation, _, _) => &["write_across", "read_across"],
        (Temporal, Global, _, UAF) => &["immediate", "delayed"],
        (Temporal, Global, _, IF) => &["interior", "allocator_mismatch", "foreign_base"],
        (Temporal, Global, _, _) => &["double_free"],
        (Temporal, _, _, _) => &["immediate", "delayed"],
        _ => &[],
    }
}

fn pick(bug: bool, bad: i64, good: i64) -> i64 {
    if bug {
        bad
    } else {
        good
    }
}

/// Stores through `base` at the element offset that reaches `target`
/// (buggy) or at `good` (patched).
fn reach(b: &mut Builder, bug: bool, base: &str, target: &str, good: i64, read: bool) {
    let idx = if bug {
        b.line(format!("d = sub {target} {base}"));
        "d".to_string()
    } else {
        good.to_string()
    };
    if read {
        b.line(format!("v = load {base}[{idx}]"));
        b.line("store o[0] v");
    } else {
        b.line(format!("store {base}[{idx}] 7"));
    }
}

fn access(b: &mut Builder, base: &str, idx: i64, read: bool) {
    if read {
        b.line(format!("v = load {base}[{idx}]"));
        b.line("store o[0] v");
    } else {
        b.line(format!("store {base}[{idx}] 7"));
    }
}

fn build_case(r: &RowKey, variant: &str, bug: bool, n: i64) -> Program {
    let mut b = Builder::default();
    let read = variant.starts_with("read");
    let name = "gms";
    match (r.axis1, r.region, r.alloc) {
        (Spatial, Global, A::Host) => {
            b.buf("g: *global_host i32", zeros(n))
                .buf("h: *global_host i32", zeros(n))
                .buf("o: *global_host i32", zeros(n));
            match variant {
                "write_end" | "read_end" => access(&mut b, "g", pick(bug, n, n - 1), read),
                "write_before" => access(&mut b, "g", pick(bug, -1, 0), false),
                "thread_end" => {
                    b.grid(GridConfig::new(1, n as u32))
                        .line(format!("i = add threadIdx.x {}", pick(bug, 1, 0)))
                        .line("store g[i] 7");
                }
                "write_host" | "read_host" => reach(&mut b, bug, "g", "h", 1, read),
                "write_device" => {
                    b.line("p = malloc device i32 16").line("store p[0] 1");
                    reach(&mut b, bug, "g", "p", 0, false);
                    b.line("free device p");
                }
                _ => {
                    b.line("a = alloca i32 4");
                    reach(&mut b, bug, "g", "a", 0, false);
                }
            }
        }
        (Spatial, Global, A::Device) => {
            b.buf("g: *global_host i32", zeros(n)).buf("o: *global_host i32", zeros(n));
            b.line(format!("p = malloc device i32 {}", 4 * n))
                .line(format!("q = malloc device i32 {}", 4 * n));
            match variant {
                "write_end" | "read_end" => access(&mut b, "p", pick(bug, n, n - 1), read),
                "write_before" | "read_before" => access(&mut b, "p", pick(bug, -1, 0), read),
                "write_device" | "read_device" => reach(&mut b, bug, "p", "q", 1, read),
                "write_host" => reach(&mut b, bug, "p", "g", 0, false),
                _ => {
                    b.line("a = alloca i32 4");
                    reach(&mut b, bug, "p", "a", 0, false);
                }
            }
            b.line("free device q").line("free device p");
        }
        (Spatial, Local, kind) => {
            b.buf("g: *global_host i32", zeros(n)).buf("o: *global_host i32", zeros(n)).int("m", n);
            let dynamic = matches!(kind, A::IntraFrameDynamic | A::InterFrameDynamic | A::BeyondLocalDynamic);
            let (own, other) = if dynamic {
                ("m".to_string(), n.to_string())
            } else {
                (n.to_string(), "m".to_string())
            };
            match kind {
                A::IntraFrameStatic | A::IntraFrameDynamic => {
                    b.line(format!("a = alloca i32 {own}"))
                        .line(format!("b = alloca i32 {own}"))
                        .line(format!("c = alloca i32 {other}"));
                    match variant {
                        "write_end" | "read_end" => access(&mut b, "a", pick(bug, n, n - 1), read),
                        "write_before" => access(&mut b, "a", pick(bug, -1, 0), false),
                        "write_same" | "read_same" => reach(&mut b, bug, "a", "b", 1, read),
                        _ => reach(&mut b, bug, "a", "c", 0, false),
                    }
                }
                A::InterFrameStatic | A::InterFrameDynamic => {
                    b.line(format!("a = alloca i32 {own}"))
                        .line("store a[0] 1")
                        .line("enter")
                        .line(format!("b = alloca i32 {own}"));
                    match variant {
                        "write_before" | "read_before" => access(&mut b, "b", pick(bug, -1, 0), read),
                        _ => reach(&mut b, bug, "b", "a", 0, read),
                    }
                    b.line("leave");
                }
                _ => match variant {
                    "write_end_wide" => {
                        b.line(format!("a = alloca f64 {own}"))
                            .line(format!("store a[{}] 7.0", pick(bug, n, n - 1)));
                    }
                    "read_past_end" => {
                        b.line(format!("a = alloca i32 {own}"));
                        access(&mut b, "a", pick(bug, n + 1, n - 1), true);
                    }
                    "write_host" => {
                        b.line(format!("a = alloca i32 {own}"));
                        reach(&mut b, bug, "a", "g", 0, false);
                    }
                    _ => {
                        b.line(format!("a = alloca i32 {own}")).line("p = malloc device i32 16");
                        reach(&mut b, bug, "a", "p", 0, true);
                        b.line("free device p");
                    }
                },
            }
        }
        (Spatial, Shared, A::Static) => {
            b.buf("g: *global_host i32", zeros(n)).buf("o: *global_host i32", zeros(n));
            b.shared(format!("s: [{n}] i32"));
            match variant {
                "write_end" | "read_end" => access(&mut b, "s", pick(bug, n, n - 1), read),
                "write_before" | "read_before" => access(&mut b, "s", pick(bug, -1, 0), read),
                "thread_end" => {
                    b.grid(GridConfig::new(1, n as u32))
                        .line(format!("i = add threadIdx.x {}", pick(bug, 1, 0)))
                        .line("store s[i] 7");
                }
                "write_next" => {
                    b.shared(format!("t: [{n}] i32"));
                    access(&mut b, "s", pick(bug, n + 1, n - 1), false);
                }
                "write_end_wide" => {
                    b.shared(format!("w: [{n}] f64"));
                    b.line(format!("store w[{}] 7.0", pick(bug, n, n - 1)));
                }
                "write_shared" | "read_shared" => {
                    b.shared(format!("t: [{n}] i32"));
                    reach(&mut b, bug, "s", "t", 1, read);
                }
                "write_local" => {
                    b.line("a = alloca i32 4");
                    reach(&mut b, bug, "s", "a", 0, false);
                }
                "write_host" => reach(&mut b, bug, "s", "g", 0, false),
                "write_device" => {
                    b.line("p = malloc device i32 16");
                    reach(&mut b, bug, "s", "p", 0, false);
                    b.line("free device p");
                }
                "thread_shared" => {
                    b.shared(format!("t: [{n}] i32")).grid(GridConfig::new(1, 4));
                    if bug {
                        b.lines(["d = sub t s", "e = add d threadIdx.x", "store s[e] 7"]);
                    } else {
                        b.line("store s[threadIdx.x] 7");
                    }
                }
                _ => {
                    b.shared(format!("t: [{n}] i32")).shared(format!("u: [{n}] i32"));
                    reach(&mut b, bug, "s", "u", 2, true);
                }
            }
        }
        (Spatial, Shared, _) => {
            b.buf("o: *global_host i32", zeros(n));
            let bytes = |elems: i64| GridConfig::new(1, 1).with_dyn_shared(4 * elems as u64);
            match variant {
                "write_end" | "read_end" | "write_before" | "read_before" => {
                    b.shared(format!("s: dynamic [{n}] i32")).grid(bytes(n));
                    let idx = if variant.ends_with("end") {
                        pick(bug, n, n - 1)
                    } else {
                        pick(bug, -1, 0)
                    };
                    access(&mut b, "s", idx, read);
                }
                "write_last" => {
                    b.shared(format!("sa: dynamic [{n}] i32"))
                        .shared(format!("sb: dynamic [{n}] i32"))
                        .grid(bytes(2 * n));
                    access(&mut b, "sb", pick(bug, n, n - 1), false);
                }
                "slack_write" => {
                    let k = n + 1;
                    b.shared(format!("s: dynamic [{k}] i32")).grid(bytes(k));
                    access(&mut b, "s", pick(bug, k, k - 1), false);
                }
                "slack_read" => {
                    let k = n + 1;
                    b.shared("sa: dynamic [4] i32".to_string())
                        .shared(format!("sb: dynamic [{k}] i32"))
                        .grid(bytes(4 + k));
                    access(&mut b, "sb", pick(bug, k, k - 1), true);
                }
                _ => {
                    for s in ["sa", "sb", "sc", "sd"] {
                        b.shared(format!("{s}: dynamic [{n}] i32"));
                    }
                    b.grid(bytes(4 * n));
                    match variant {
                        "write_a_c" | "read_a_c" => access(&mut b, "sa", pick(bug, 2 * n, n - 1), read),
                        "write_c_a" | "read_c_a" => access(&mut b, "sc", pick(bug, -2 * n, 0), read),
                        "thread_a_c" => {
                            b.grid(GridConfig::new(1, 4).with_dyn_shared(16 * n as u64))
                                .line(format!("i = add threadIdx.x {}", pick(bug, 2 * n, 0)))
                                .line("store sa[i] 7");
                        }
                        "write_b_d" => access(&mut b, "sb", pick(bug, 2 * n, 0), false),
                        _ => access(&mut b, "sd", pick(bug, -2 * n, 0), true),
                    }
                }
            }
        }
        (Spatial, IntraAllocation, kind) => {
            let fields = format!("{{4, {n}}}");
            match kind {
                A::Global => {
                    b.buf(&format!("g: *global_host i32 {fields}"), zeros(4 + n));
                }
                A::Local => {
                    b.line(format!("g = alloca i32 {} {fields}", 4 + n));
                }
                _ => {
                    b.shared(format!("g: [{}] i32 {fields}", 4 + n));
                }
            }
            b.buf("o: *global_host i32", zeros(n));
            b.line("f0 = field g 0").line("f1 = field g 1");
            if r.class == BO {
                access(&mut b, "f1", pick(bug, n, n - 1), read);
            } else {
                access(&mut b, "f0", pick(bug, 8, 3), read);
            }
        }
        (Temporal, Global, kind) => {
            let api = if kind == A::Host { "host" } else { "device" };
            let other = if kind == A::Host { "device" } else { "host" };
            let sz = 4 * n;
            b.buf("o: *global_host i32", zeros(n));
            b.line(format!("p = malloc {api} i32 {sz}")).line("store p[0] 1");
            match variant {
                "immediate" => {
                    if bug {
                        b.lines([format!("free {api} p"), "v = load p[0]".into(), "store o[0] v".into()]);
                    } else {
                        b.lines(["v = load p[0]".into(), "store o[0] v".into(), format!("free {api} p")]);
                    }
                }
                "delayed" => {
                    if !bug {
                        b.line("v = load p[0]").line("store o[0] v");
                    }
                    b.lines([
                        format!("free {api} p"),
                        format!("big = malloc {api} i32 300000"),
                        format!("free {api} big"),
                        format!("q = malloc {api} i32 {sz}"),
                        "store q[0] 2".into(),
                    ]);
                    if bug {
                        b.line("v = load p[0]").line("store o[0] v");
                    }
                    b.line(format!("free {api} q"));
                }
                "interior" => {
                    b.line("r = add p 1");
                    b.line(format!("free {api} {}", if bug { "r" } else { "p" }));
                }
                "allocator_mismatch" => {
                    b.line(format!("free {} p", if bug { other } else { api }));
                }
                "foreign_base" => {
                    b.line(format!("q = malloc {api} i32 {sz}"));
                    if bug {
                        b.lines(["d = sub q p".into(), "r = add p d".into(), format!("free {api} r")]);
                    } else {
                        b.line(format!("free {api} q"));
                    }
                    b.line(format!("free {api} p"));
                }
                _ => {
                    b.line(format!("free {api} p"));
                    if bug {
                        b.line(format!("free {api} p"));
                    }
                }
            }
        }
        (Temporal, _, kind) => {
            b.buf("o: *global_host i32", zeros(n)).int("m", n);
            let count = if kind == A::Dynamic { "m".to_string() } else { n.to_string() };
            b.line("enter").line(format!("a = alloca i32 {count}")).line("store a[0] 1");
            if !bug {
                b.line("v = load a[0]").line("store o[0] v");
            }
            b.line("leave");
            if variant == "delayed" {
                b.line("enter").line(format!("b = alloca i32 {count}")).line("store b[0] 2");
            }
            if bug {
                b.line("v = load a[0]").line("store o[0] v");
            }
            if variant == "delayed" {
                b.line("leave");
            }
        }
        _ => unreachable!("no such row"),
    }
    b.build(name)
}

fn descriptor(id: String, r: &RowKey, variant: &str) -> CaseDescriptor {
    let adjacency = match r.class {
        BO => Some(Adjacency::Adjacent),
        RW => Some(Adjacency::NonAdjacent),
        _ => None,
    };
    let timing = match (r.class, variant) {
        (UAF | UAS, "delayed") => Some(Timing::Delayed),
        (UAF | UAS, _) => Some(Timing::Immediate),
        _ => None,
    };
    let free_kind = match variant {
        "interior" => Some(FreeKind::Interior),
        "allocator_mismatch" => Some(FreeKind::AllocatorMismatch),
        "foreign_base" => Some(FreeKind::ForeignBase),
        _ => None,
    };
    let mut d = CaseDescriptor {
        id,
        axis1: r.axis1,
        region: r.region,
        alloc: r.alloc,
        class: r.class,
        adjacency,
        timing,
        variant: variant.to_string(),
        granule_slack: variant.starts_with("slack"),
        free_kind,
        expected: Expected {
            redzone: false,
            exact: false,
        },
    };
    d.expected = derive_expected(&d);
    d
}

/// Generates the 100 cases. Buffer sizes vary with `seed`.
pub fn generate(seed: u64) -> Vec<GmsCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in &TABLE {
        let names = variants(&t.key);
        assert_eq!(names.len() as u32, t.count, "variant list for {}", t.key.label());
        for v in names {
            let n = 2 * rng.gen_range(4..=16i64);
            let id = format!("{:03}_{}_{}", out.len(), t.key.label().replace('/', "_"), v);
            out.push(GmsCase {
                desc: descriptor(id, &t.key, v),
                buggy: build_case(&t.key, v, true, n),
                patched: build_case(&t.key, v, false, n),
            });
        }
    }
    out
}

/// Runs a program lowered over its full schedule in audit mode.
pub fn run_program(p: &Program, mode: DetectorMode) -> ExecResult {
    let lowered = lower(&p.kernel, &analyze(&p.kernel)).expect("generated kernels lower");
    run_lowered_with(&lowered, p.grid, &p.inputs, &Schedule::All, ExecConfig::new(mode, Policy::Audit))
}

pub fn detects(r: &ExecResult, declared: BugClass) -> bool {
    r.reports.iter().any(|rep| rep.class.satisfies(declared))
}

/// Checks a case against the reference interpreter: the buggy kernel must
/// report the declared class and the patched twin nothing.
pub fn validate_case(c: &GmsCase) -> Result<(), String> {
    let b = run_reference(&c.buggy.kernel, c.buggy.grid, &c.buggy.inputs);
    if !detects(&b, c.desc.class) {
        return Err(format!("{}: reference misses {:?}: {:?}", c.desc.id, c.desc.class, b.reports));
    }
    let p = run_reference(&c.patched.kernel, c.patched.grid, &c.patched.inputs);
    if !p.reports.is_empty() || p.error.is_some() {
        return Err(format!("{}: patched twin reports {:?} {:?}", c.desc.id, p.reports, p.error));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub total: u32,
    pub detected: u32,
    pub expected: u32,
    pub published: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub detector: String,
    pub rows: Vec<MatrixRow>,
    pub total: u32,
    pub detected: u32,
    pub expected: u32,
    pub published: u32,
    /// Cases whose verdict differs from the derived expectation.
    pub mismatches: Vec<String>,
    /// Patched twins that produced any report.
    pub false_positives: Vec<String>,
}

impl Matrix {
    pub fn text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!("detector: {}\n", self.detector);
        let _ = writeln!(s, "{:<w$}  {:>5}  {:>8}  {:>8}  {:>5}", "row", "tests", "detected", "expected", "published");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>5}  {:>8}  {:>8}  {:>5}", r.label, r.total, r.detected, r.expected, r.published);
        }
        let _ = writeln!(s, "{:<w$}  {:>5}  {:>8}  {:>8}  {:>5}", "total", self.total, self.detected, self.expected, self.published);
        s
    }
}

/// Scores every buggy case and patched twin under `mode`.
pub fn score(mode: DetectorMode, cases: &[GmsCase]) -> Matrix {
    let mut rows: Vec<MatrixRow> = Vec::new();
    let mut m = Matrix {
        detector: mode.name().to_string(),
        rows: Vec::new(),
        total: 0,
        detected: 0,
        expected: 0,
        published: 0,
        mismatches: Vec::new(),
        false_positives: Vec::new(),
    };
    for t in &TABLE {
        rows.push(MatrixRow {
            label: t.key.label(),
            total: 0,
            detected: 0,
            expected: 0,
            published: match mode {
                DetectorMode::Redzone => t.published_redzone,
                DetectorMode::Exact => t.published_exact,
                DetectorMode::Reference => t.count,
            },
        });
    }
    for c in cases {
        let i = TABLE.iter().position(|t| t.key == c.desc.row()).expect("row exists");
        let hit = detects(&run_program(&c.buggy, mode), c.desc.class);
        let want = c.desc.expected.for_mode(mode);
        rows[i].total += 1;
        rows[i].detected += hit as u32;
        rows[i].expected += want as u32;
        if hit != want {
            m.mismatches.push(c.desc.id.clone());
        }
        if !run_program(&c.patched, mode).reports.is_empty() {
            m.false_positives.push(c.desc.id.clone());
        }
    }
    m.total = rows.iter().map(|r| r.total).sum();
    m.detected = rows.iter().map(|r| r.detected).sum();
    m.expected = rows.iter().map(|r| r.expected).sum();
    m.published = rows.iter().map(|r| r.published).sum();
    m.rows = rows;
    m
}

/// Writes `cases/<id>.kir`, `cases/<id>.patched.kir`, `cases/<id>.bin` and
/// `manifest.jsonl` under `dir`.
pub fn emit(dir: &Path, cases: &[GmsCase]) -> std::io::Result<()> {
    let cdir = dir.join("cases");
    fs::create_dir_all(&cdir)?;
    let mut manifest = String::new();
    for c in cases {
        let id = &c.desc.id;
        fs::write(cdir.join(format!("{id}.kir")), &c.buggy.source)?;
        fs::write(cdir.join(format!("{id}.patched.kir")), &c.patched.source)?;
        let blob = InputLayout::for_kernel(&c.buggy.kernel).encode(&c.buggy.inputs);
        fs::write(cdir.join(format!("{id}.bin")), blob)?;
        let line = serde_json::json!({
            "descriptor": c.desc,
            "grid": {
                "blocks": c.buggy.grid.blocks,
                "threads": c.buggy.grid.threads,
                "dyn_shared_bytes": c.buggy.grid.dyn_shared_bytes,
            },
        });
        let _ = writeln!(manifest, "{line}");
    }
    fs::write(dir.join("manifest.jsonl"), manifest)
}
