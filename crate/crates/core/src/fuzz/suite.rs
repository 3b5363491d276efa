//! Ten small kernels whose single bug is reachable only through the input
//! blob, used to measure discovery rate and triage.

use crate::exec::{Arg, Inputs};
use crate::kir::{parse_kernel, GridConfig, Kernel};
use crate::sanrt::BugClass;

use super::{DedupKey, FuzzError, GridSpec, Harness, HarnessConfig, InputLayout};

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub source: &'static str,
    pub grid: GridSpec,
    /// Buffers padded to a minimum so only the seeded bug is reachable.
    pub min_elems: Vec<(&'static str, u32)>,
    pub seed_args: Vec<Arg>,
    pub expected: DedupKey,
}

impl SuiteCase {
    pub fn kernel(&self) -> Kernel {
        parse_kernel(self.source).expect("suite kernels parse")
    }

    pub fn layout(&self) -> InputLayout {
        let mut l = InputLayout::for_kernel(&self.kernel());
        for (name, n) in &self.min_elems {
            l = l.with_min_elems(name, *n);
        }
        l
    }

    pub fn seed(&self) -> Vec<u8> {
        self.layout().encode(&Inputs::new(self.seed_args.clone()))
    }

    pub fn harness(&self, cfg: HarnessConfig) -> Result<Harness, FuzzError> {
        Harness::new(&self.kernel(), self.layout(), self.grid.clone(), cfg)
    }
}

fn empty() -> Arg {
    Arg::Buffer(Vec::new())
}

fn fixed(b: u32, t: u32) -> GridSpec {
    GridSpec::Fixed(GridConfig::new(b, t))
}

/// The seeded suite. Grids assume the default `max_blocks` of 64.
pub fn seeded_suite() -> Vec<SuiteCase> {
    vec![
        SuiteCase {
            name: "oob_index",
            source: "kernel oob_index(c: *global_host i32, x: i32)
                       store c[x] 1",
            grid: fixed(1, 1),
            min_elems: vec![("c", 16)],
            seed_args: vec![empty(), Arg::Int(0)],
            expected: DedupKey::for_report(0, BugClass::BO),
        },
        SuiteCase {
            name: "oob_read",
            source: "kernel oob_read(a: *global_host f32, out: *global_host f32, x: i32)
                       j = add x 3
                       v = load a[j]
                       store out[threadIdx.x] v",
            grid: fixed(1, 4),
            min_elems: vec![("a", 16), ("out", 4)],
            seed_args: vec![empty(), empty(), Arg::Int(0)],
            expected: DedupKey::for_report(1, BugClass::BO),
        },
        SuiteCase {
            name: "thread_offset",
            source: "kernel thread_offset(c: *global_host i32, off: i32)
                       id = add (mul blockIdx.x blockDim.x) threadIdx.x
                       j = add id off
                       store c[j] id",
            grid: fixed(2, 32),
            min_elems: vec![("c", 64)],
            seed_args: vec![empty(), Arg::Int(0)],
            expected: DedupKey::for_report(2, BugClass::BO),
        },
        SuiteCase {
            name: "guarded_bound",
            source: "kernel guarded_bound(c: *global_host f32, n: i32)
                       id = add (mul blockIdx.x blockDim.x) threadIdx.x
                       br (lt id n) body done
                     body:
                       store c[id] 1.0
                       jmp done
                     done:
                       return",
            grid: fixed(4, 16),
            min_elems: vec![("c", 32)],
            seed_args: vec![empty(), Arg::Int(32)],
            expected: DedupKey::for_report(1, BugClass::BO),
        },
        SuiteCase {
            name: "device_alloc",
            source: "kernel device_alloc(out: *global_host i32, n: i32)
                       p = malloc device i32 n
                       store p[threadIdx.x] 1
                       v = load p[threadIdx.x]
                       store out[threadIdx.x] v
                       free device p",
            grid: fixed(1, 8),
            min_elems: vec![("out", 8)],
            seed_args: vec![empty(), Arg::Int(32)],
            expected: DedupKey::for_report(1, BugClass::BO),
        },
        SuiteCase {
            name: "host_alloc",
            source: "kernel host_alloc(n: i32)
                       sz = mul n 1048576
                       p = malloc host i32 (add sz 16)
                       store p[0] 1
                       free host p",
            grid: fixed(1, 4),
            min_elems: vec![],
            seed_args: vec![Arg::Int(1)],
            expected: DedupKey::new("host_alloc", "out_of_memory"),
        },
        SuiteCase {
            name: "zero_grid",
            source: "kernel zero_grid(c: *global_host i32, n: i32)
                       id = add (mul blockIdx.x blockDim.x) threadIdx.x
                       br (lt id n) body done
                     body:
                       store c[id] 1
                       jmp done
                     done:
                       return",
            grid: GridSpec::CeilDiv {
                param: "n".into(),
                threads: 8,
                dyn_shared_bytes: 0,
            },
            min_elems: vec![("c", 64 * 8)],
            seed_args: vec![empty(), Arg::Int(8)],
            expected: DedupKey::new("launch", "invalid_configuration"),
        },
        SuiteCase {
            name: "shared_index",
            source: "kernel shared_index(out: *global_host i32, k: i32)
                       shared s: [32] i32
                       j = add threadIdx.x k
                       store s[j] 1
                       barrier
                       v = load s[threadIdx.x]
                       store out[threadIdx.x] v",
            grid: fixed(1, 32),
            min_elems: vec![("out", 32)],
            seed_args: vec![empty(), Arg::Int(0)],
            expected: DedupKey::for_report(1, BugClass::BO),
        },
        SuiteCase {
            name: "use_after_free",
            source: "kernel use_after_free(out: *global_host i32, f: i32)
                       p = malloc device i32 16
                       store p[0] 7
                       br (lt f 0) early late
                     early:
                       free device p
                       v = load p[0]
                       store out[threadIdx.x] v
                       jmp done
                     late:
                       w = load p[0]
                       store out[threadIdx.x] w
                       free device p
                       jmp done
                     done:
                       return",
            grid: fixed(1, 4),
            min_elems: vec![("out", 4)],
            seed_args: vec![empty(), Arg::Int(1)],
            expected: DedupKey::for_report(3, BugClass::UAF),
        },
        SuiteCase {
            name: "spin_hang",
            source: "kernel spin_hang(n: i32)
                       cnt = alloca i32 1
                       store cnt[0] 0
                       jmp top
                     top:
                       v = load cnt[0]
                       br (eq v n) done body
                     body:
                       u = add v 1
                       store cnt[0] u
                       jmp top
                     done:
                       return",
            grid: fixed(1, 1),
            min_elems: vec![],
            seed_args: vec![Arg::Int(4)],
            expected: DedupKey::new("kernel", "hang"),
        },
    ]
}
