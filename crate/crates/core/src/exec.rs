//! Interpreter core shared by the reference simulator and lowered-program
//! execution: compiled code form, per-thread state and the launch
//! environment that owns the sanitizer runtime.

use std::collections::BTreeSet;
use std::time::Instant;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::kir::cfg::BitSet;
use crate::kir::{
    BinOp, Expr, GridConfig, GridError, HeapApi, InstrId, InstrKind, Intrinsic, Kernel, MathFn,
    MemorySpace, ParamKind, ScalarType, Terminator,
};
use crate::sanrt::{
    encode, AccessKind, AccessRecord, Allocator, BugClass, BugReport, DetectorMode, FreeOutcome,
    Policy, Ptr, Runtime, SanConfig, SanError, SegKey, ThreadId, Value,
};

/// Step cost of a math-library call; every other instruction costs 1.
pub const MATH_COST: u64 = 4;
/// Default per-thread step budget.
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
/// Size of the edge-coverage map.
pub const MAP_SIZE: usize = 1 << 16;

/// Marker id for accesses introduced by lowering.
pub const COMPILER_INSTR: InstrId = InstrId(u32::MAX);

/// Contents of one kernel argument.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arg {
    Int(i64),
    Float(f64),
    /// Raw little-endian buffer contents; the element count is
    /// `bytes.len() / elem size`.
    Buffer(Vec<u8>),
}

impl Arg {
    pub fn f32s(v: &[f32]) -> Arg {
        Arg::Buffer(v.iter().flat_map(|x| x.to_le_bytes()).collect())
    }

    pub fn i32s(v: &[i32]) -> Arg {
        Arg::Buffer(v.iter().flat_map(|x| x.to_le_bytes()).collect())
    }

    pub fn zeros(elem: ScalarType, n: usize) -> Arg {
        Arg::Buffer(vec![0; n * elem.size() as usize])
    }
}

/// Kernel arguments in parameter order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    pub args: Vec<Arg>,
}

impl Inputs {
    pub fn new(args: Vec<Arg>) -> Self {
        Inputs { args }
    }
}

/// Decodes a little-endian buffer into f32 values.
pub fn as_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn as_i32s(bytes: &[u8]) -> Vec<i32> {
    bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    InvalidConfiguration(#[from] GridError),
    #[error("inputs do not match the kernel parameters: {0}")]
    BadInputs(String),
    #[error("thread {thread} exceeded the step budget of {budget}")]
    NonTermination { thread: ThreadId, budget: u64 },
    #[error("execution exceeded its wall-clock timeout")]
    Timeout,
    #[error(transparent)]
    OutOfMemory(#[from] SanError),
    #[error("execution aborted on the first sanitizer report")]
    Aborted,
    #[error("threads of block {0} disagree on the next barrier phase")]
    DivergentPhases(u32),
    #[error("internal interpreter error: {0}")]
    Internal(String),
}

/// Execution knobs.
#[derive(Clone, Copy, Debug)]
pub struct ExecConfig {
    pub san: SanConfig,
    pub mode: DetectorMode,
    pub policy: Policy,
    pub step_budget: u64,
    pub deadline: Option<Instant>,
    pub record_trace: bool,
    pub collect_edges: bool,
}

impl ExecConfig {
    pub fn new(mode: DetectorMode, policy: Policy) -> Self {
        ExecConfig {
            san: SanConfig::default(),
            mode,
            policy,
            step_budget: DEFAULT_STEP_BUDGET,
            deadline: None,
            record_trace: true,
            collect_edges: false,
        }
    }

    pub fn reference() -> Self {
        ExecConfig::new(DetectorMode::Reference, Policy::Audit)
    }
}

// ---------------------------------------------------------------- code form

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum CExpr {
    Int(i64),
    Float(f64),
    Local(u32),
    Param(u32),
    Shared(u32),
    Intr(Intrinsic),
    Bin(BinOp, Box<CExpr>, Box<CExpr>),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Arith { dst: u32, op: BinOp, l: CExpr, r: CExpr },
    Math { dst: u32, f: MathFn, src: CExpr },
    Load { dst: u32, base: CExpr, idx: CExpr },
    Store { base: CExpr, idx: CExpr, val: CExpr },
    Alloca { dst: u32, elem: ScalarType, count: CExpr, fields: Vec<u32>, space: MemorySpace },
    Malloc { dst: u32, api: HeapApi, elem: ScalarType, size: CExpr },
    Free { ptr: CExpr, api: HeapApi },
    Field { dst: u32, base: CExpr, k: u32 },
    Enter,
    Leave,
    Barrier,
    PromoLoad { dst: u32, promo: u32 },
    PromoStore { src: u32, promo: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct COp {
    pub op: Op,
    pub id: InstrId,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum CTerm {
    /// `site` is the original block index, for branch-edge coverage.
    Br { cond: CExpr, t: usize, e: usize, site: u32 },
    Jmp(usize),
    Ret,
    Next(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct CBlock {
    pub ops: Vec<COp>,
    pub term: CTerm,
    /// Coverage site id of this block.
    pub site: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Code {
    pub blocks: Vec<CBlock>,
    pub entry: usize,
}

/// Name resolution for one kernel: every local gets a dense slot.
#[derive(Clone, Debug)]
pub(crate) struct Names {
    pub locals: FxHashMap<String, u32>,
    pub params: FxHashMap<String, u32>,
    pub shared: FxHashMap<String, u32>,
    pub max_instr: u32,
}

impl Names {
    pub fn new(k: &Kernel) -> Self {
        let mut locals = FxHashMap::default();
        for i in k.instrs() {
            if let Some(d) = i.kind.dst() {
                let n = locals.len() as u32;
                locals.entry(d.to_string()).or_insert(n);
            }
        }
        let params = k
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i as u32))
            .collect();
        let shared = k
            .shared
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i as u32))
            .collect();
        let max_instr = k.instrs().map(|i| i.id.0).max().unwrap_or(0);
        Names {
            locals,
            params,
            shared,
            max_instr,
        }
    }

    pub fn nlocals(&self) -> usize {
        self.locals.len()
    }

    pub fn local(&self, name: &str) -> u32 {
        self.locals[name]
    }

    pub fn expr(&self, e: &Expr) -> CExpr {
        match e {
            Expr::Int(v) => CExpr::Int(*v),
            Expr::Float(v) => CExpr::Float(*v),
            Expr::Intr(i) => CExpr::Intr(*i),
            Expr::Var(v) => {
                if let Some(&s) = self.locals.get(v) {
                    CExpr::Local(s)
                } else if let Some(&p) = self.params.get(v) {
                    CExpr::Param(p)
                } else {
                    CExpr::Shared(self.shared[v])
                }
            }
            Expr::Bin(op, l, r) => CExpr::Bin(*op, Box::new(self.expr(l)), Box::new(self.expr(r))),
        }
    }

    pub fn op(&self, kind: &InstrKind) -> Op {
        let var = |s: &str| self.expr(&Expr::Var(s.to_string()));
        match kind {
            InstrKind::Arith { dst, op, lhs, rhs } => Op::Arith {
                dst: self.local(dst),
                op: *op,
                l: self.expr(lhs),
                r: self.expr(rhs),
            },
            InstrKind::Math { dst, func, src } => Op::Math {
                dst: self.local(dst),
                f: *func,
                src: self.expr(src),
            },
            InstrKind::Load { dst, base, index } => Op::Load {
                dst: self.local(dst),
                base: var(base),
                idx: self.expr(index),
            },
            InstrKind::Store { base, index, value } => Op::Store {
                base: var(base),
                idx: self.expr(index),
                val: self.expr(value),
            },
            InstrKind::Alloca {
                dst,
                elem,
                count,
                fields,
            } => Op::Alloca {
                dst: self.local(dst),
                elem: *elem,
                count: self.expr(count),
                fields: fields.clone(),
                space: if matches!(count, Expr::Int(_)) {
                    MemorySpace::LocalStatic
                } else {
                    MemorySpace::LocalDynamic
                },
            },
            InstrKind::Malloc {
                dst,
                api,
                elem,
                size,
            } => Op::Malloc {
                dst: self.local(dst),
                api: *api,
                elem: *elem,
                size: self.expr(size),
            },
            InstrKind::Free { ptr, api } => Op::Free {
                ptr: self.expr(ptr),
                api: *api,
            },
            InstrKind::Field { dst, base, field } => Op::Field {
                dst: self.local(dst),
                base: var(base),
                k: *field,
            },
            InstrKind::Enter => Op::Enter,
            InstrKind::Leave => Op::Leave,
            InstrKind::Barrier => Op::Barrier,
        }
    }
}

/// Hash used for coverage site ids.
pub(crate) fn site_id(block: usize, start: usize) -> u32 {
    let x = (block as u32).wrapping_mul(0x9E37_79B1) ^ (start as u32).wrapping_mul(0x85EB_CA6B);
    (x ^ (x >> 15)) & (MAP_SIZE as u32 - 1)
}

/// Compiles the kernel as-is: barriers stay as stopping instructions.
pub(crate) fn compile_kernel(k: &Kernel, names: &Names) -> Code {
    let index: FxHashMap<&str, usize> = k
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| (b.label.as_str(), i))
        .collect();
    let blocks = k
        .blocks
        .iter()
        .enumerate()
        .map(|(bi, b)| CBlock {
            ops: b
                .instrs
                .iter()
                .map(|i| COp {
                    op: names.op(&i.kind),
                    id: i.id,
                })
                .collect(),
            term: match &b.term {
                Terminator::Branch {
                    cond,
                    then_label,
                    else_label,
                } => CTerm::Br {
                    cond: names.expr(cond),
                    t: index[then_label.as_str()],
                    e: index[else_label.as_str()],
                    site: bi as u32,
                },
                Terminator::Jump(l) => CTerm::Jmp(index[l.as_str()]),
                Terminator::Return => CTerm::Ret,
            },
            site: site_id(bi, 0),
        })
        .collect();
    Code {
        blocks,
        entry: index[k.entry.as_str()],
    }
}

// ------------------------------------------------------------ execution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stop {
    Barrier,
    Next(usize),
    Return,
}

#[derive(Clone, Debug)]
pub(crate) struct ThreadState {
    pub id: ThreadId,
    pub block: usize,
    pub ip: usize,
    pub locals: Vec<Value>,
    pub steps: u64,
    prev_site: u32,
    started: bool,
}

impl ThreadState {
    pub fn new(id: ThreadId, code: &Code, nlocals: usize) -> Self {
        ThreadState {
            id,
            block: code.entry,
            ip: 0,
            locals: vec![Value::Undef; nlocals],
            steps: 0,
            prev_site: 0,
            started: false,
        }
    }
}

/// Everything an execution produces.
#[derive(Clone, Debug, Default)]
pub struct ExecResult {
    /// Final contents of each buffer parameter, in parameter order
    /// (scalar parameters get an empty vector).
    pub memory: Vec<Vec<u8>>,
    pub trace: Vec<AccessRecord>,
    pub reports: Vec<BugReport>,
    pub steps: u64,
    pub error: Option<ExecError>,
    /// Original memory-access instruction ids executed at least once.
    pub covered: BTreeSet<InstrId>,
    /// (original block index, taken-successor) pairs of executed branches.
    pub branch_edges: BTreeSet<(u32, u8)>,
    pub edges: Option<Box<[u8]>>,
}

impl ExecResult {
    /// The (thread, instruction, class) set of all reports.
    pub fn bug_set(&self) -> BTreeSet<(ThreadId, InstrId, BugClass)> {
        self.reports
            .iter()
            .map(|r| (r.access.thread, r.access.instr_id, r.class))
            .collect()
    }

    pub fn bug_threads(&self) -> BTreeSet<ThreadId> {
        self.reports.iter().map(|r| r.access.thread).collect()
    }

    /// Multiset of (instr, byte address, kind) over original load/store
    /// records, as a sorted vector.
    pub fn original_accesses(&self) -> Vec<(InstrId, u64, AccessKind)> {
        let mut v: Vec<_> = self
            .trace
            .iter()
            .filter(|r| !r.compiler_induced && matches!(r.kind, AccessKind::Read | AccessKind::Write))
            .map(|r| (r.instr_id, r.byte_addr, r.kind))
            .collect();
        v.sort();
        v
    }

    pub fn trace_text(&self) -> String {
        let mut s = String::new();
        for r in &self.trace {
            s.push_str(&r.line());
            s.push('\n');
        }
        s
    }
}

/// Launch environment: memory, arguments and the result being built.
pub(crate) struct Env {
    pub rt: Runtime,
    pub cfg: ExecConfig,
    pub grid: GridConfig,
    pub params: Vec<Value>,
    param_elems: Vec<Option<(ScalarType, u64)>>,
    pub shared: Vec<Value>,
    shared_decls: Vec<(ScalarType, CExpr, bool, Vec<u32>)>,
    pub promo: Vec<Vec<Value>>,
    promo_ptrs: Vec<Ptr>,
    pub out: ExecResult,
    edges: Option<Box<[u8]>>,
    covered: BitSet,
    branch_edges: FxHashSet<(u32, u8)>,
    ticks: u64,
    cur_block: u32,
}

impl Env {
    pub fn new(k: &Kernel, names: &Names, grid: GridConfig, inputs: &Inputs, cfg: ExecConfig) -> Result<Env, ExecError> {
        grid.check()?;
        if inputs.args.len() != k.params.len() {
            return Err(ExecError::BadInputs(format!(
                "expected {} arguments, got {}",
                k.params.len(),
                inputs.args.len()
            )));
        }
        let mut rt = Runtime::new(cfg.san, cfg.mode);
        let mut params = Vec::new();
        let mut param_elems = Vec::new();
        for (p, a) in k.params.iter().zip(&inputs.args) {
            match (&p.kind, a) {
                (ParamKind::Scalar(t), Arg::Int(v)) => {
                    params.push(if t.is_float() { Value::Float(*v as f64) } else { Value::Int(*v) });
                    param_elems.push(None);
                }
                (ParamKind::Scalar(t), Arg::Float(v)) => {
                    params.push(if t.is_float() { Value::Float(*v) } else { Value::Int(*v as i64) });
                    param_elems.push(None);
                }
                (ParamKind::Buffer { space, elem, fields }, Arg::Buffer(bytes)) => {
                    let n = bytes.len() as u64 / elem.size();
                    let size = n * elem.size();
                    let ptr = rt.alloc(size, *space, Allocator::HostApi, SegKey::Host, *elem, fields)?;
                    rt.data.write(ptr.addr, &bytes[..size as usize]);
                    params.push(Value::Ptr(ptr));
                    param_elems.push(Some((*elem, size)));
                }
                _ => return Err(ExecError::BadInputs(format!("argument {} has the wrong kind", p.name))),
            }
        }
        let shared_decls = k
            .shared
            .iter()
            .map(|s| (s.elem, names.expr(&s.count), s.dynamic, s.fields.clone()))
            .collect();
        let edges = cfg.collect_edges.then(|| vec![0u8; MAP_SIZE].into_boxed_slice());
        Ok(Env {
            rt,
            cfg,
            grid,
            params,
            param_elems,
            shared: Vec::new(),
            shared_decls,
            promo: Vec::new(),
            promo_ptrs: Vec::new(),
            out: ExecResult::default(),
            edges,
            covered: BitSet::new(names.max_instr as usize + 1),
            branch_edges: FxHashSet::default(),
            ticks: 0,
            cur_block: 0,
        })
    }

    fn launch_value(&self, e: &CExpr) -> i64 {
        // Shared sizes depend only on scalar params and launch dimensions.
        let dummy = ThreadState {
            id: ThreadId::new(self.cur_block, 0),
            block: 0,
            ip: 0,
            locals: Vec::new(),
            steps: 0,
            prev_site: 0,
            started: true,
        };
        self.eval(e, &dummy).map(|v| v.as_int()).unwrap_or(0)
    }

    /// Allocates the block's shared arrays.
    pub fn begin_block(&mut self, j: u32) -> Result<(), ExecError> {
        self.cur_block = j;
        self.shared.clear();
        let mut region: Option<Ptr> = None;
        let mut offset = 0u64;
        for i in 0..self.shared_decls.len() {
            let (elem, count, dynamic, fields) = self.shared_decls[i].clone();
            let n = self.launch_value(&count).max(0) as u64;
            let ptr = if dynamic {
                let base = match region {
                    Some(r) => r,
                    None => {
                        let r = self.rt.alloc(
                            self.grid.dyn_shared_bytes,
                            MemorySpace::SharedDynamic,
                            Allocator::Shared,
                            SegKey::Shared,
                            elem,
                            &[],
                        )?;
                        region = Some(r);
                        r
                    }
                };
                let len = n * elem.size();
                let p = self.rt.carve_out(Ptr { elem, ..base }, offset, len);
                offset += len;
                p
            } else {
                self.rt.alloc(
                    n * elem.size(),
                    MemorySpace::SharedStatic,
                    Allocator::Shared,
                    SegKey::Shared,
                    elem,
                    &fields,
                )?
            };
            self.shared.push(Value::Ptr(ptr));
        }
        Ok(())
    }

    pub fn covered(&self) -> &BitSet {
        &self.covered
    }

    pub fn branch_edge_count(&self) -> usize {
        self.branch_edges.len()
    }

    pub fn end_block(&mut self) {
        self.rt.end_block();
    }

    /// Registers `n` promoted arrays of length T for a task.
    pub fn begin_task(&mut self, n: usize) -> Result<(), ExecError> {
        let t = self.grid.threads as usize;
        self.promo = vec![vec![Value::Undef; t]; n];
        self.promo_ptrs.clear();
        for _ in 0..n {
            let p = self.rt.alloc(
                t as u64 * 8,
                MemorySpace::LocalStatic,
                Allocator::Compiler,
                SegKey::Compiler,
                ScalarType::I64,
                &[],
            )?;
            self.promo_ptrs.push(p);
        }
        Ok(())
    }

    pub fn end_task(&mut self) {
        self.rt.end_task();
        self.promo.clear();
    }

    pub fn thread_exit(&mut self, tid: u32) {
        self.rt.thread_exit(tid);
    }

    fn intrinsic(&self, i: Intrinsic, th: &ThreadState) -> i64 {
        match i {
            Intrinsic::ThreadIdx => th.id.thread as i64,
            Intrinsic::BlockIdx => th.id.block as i64,
            Intrinsic::BlockDim => self.grid.threads as i64,
            Intrinsic::GridDim => self.grid.blocks as i64,
        }
    }

    fn eval(&self, e: &CExpr, th: &ThreadState) -> Result<Value, ExecError> {
        Ok(match e {
            CExpr::Int(v) => Value::Int(*v),
            CExpr::Float(v) => Value::Float(*v),
            CExpr::Local(s) => match th.locals[*s as usize] {
                Value::Undef => {
                    return Err(ExecError::Internal(format!("read of undefined local slot {s} in {}", th.id)))
                }
                v => v,
            },
            CExpr::Param(p) => self.params[*p as usize],
            CExpr::Shared(s) => self.shared[*s as usize],
            CExpr::Intr(i) => Value::Int(self.intrinsic(*i, th)),
            CExpr::Bin(op, l, r) => binop(*op, self.eval(l, th)?, self.eval(r, th)?),
        })
    }

    fn tick(&mut self, th: &mut ThreadState, cost: u64) -> Result<(), ExecError> {
        th.steps += cost;
        self.out.steps += cost;
        if th.steps > self.cfg.step_budget {
            return Err(ExecError::NonTermination {
                thread: th.id,
                budget: self.cfg.step_budget,
            });
        }
        self.ticks += 1;
        if self.ticks & 0xFFF == 0 {
            if let Some(d) = self.cfg.deadline {
                if Instant::now() > d {
                    return Err(ExecError::Timeout);
                }
            }
        }
        Ok(())
    }

    /// Charges loop overhead (one step per thread-loop iteration).
    pub fn charge(&mut self, th: &mut ThreadState, cost: u64) -> Result<(), ExecError> {
        self.tick(th, cost)
    }

    fn enter_site(&mut self, th: &mut ThreadState, site: u32) {
        if let Some(map) = self.edges.as_mut() {
            let idx = ((th.prev_site >> 1) ^ site) as usize & (MAP_SIZE - 1);
            map[idx] = map[idx].saturating_add(1);
        }
        th.prev_site = site;
    }

    fn record(&mut self, rec: AccessRecord) {
        if self.cfg.record_trace {
            self.out.trace.push(rec);
        }
    }

    fn report(&mut self, class: BugClass, rec: AccessRecord, ctx: crate::sanrt::AllocContext) -> Result<(), ExecError> {
        self.out.reports.push(BugReport {
            class,
            access: rec,
            context: ctx,
            detector: self.cfg.mode,
        });
        if self.cfg.policy == Policy::Abort {
            return Err(ExecError::Aborted);
        }
        Ok(())
    }

    fn pointer(&self, v: Value, th: &ThreadState) -> Result<Ptr, ExecError> {
        match v {
            Value::Ptr(p) => Ok(p),
            other => Err(ExecError::Internal(format!("{other:?} used as a pointer in {}", th.id))),
        }
    }

    fn access_record(&self, th: &ThreadState, id: InstrId, kind: AccessKind, p: &Ptr) -> AccessRecord {
        let (buffer, index) = match p.prov {
            Some(prov) => {
                let a = self.rt.allocation(prov.alloc);
                let diff = p.addr as i128 - a.base as i128;
                (Some(prov.alloc), (diff / p.elem.size() as i128) as i64)
            }
            None => (None, 0),
        };
        AccessRecord {
            thread: th.id,
            instr_id: id,
            kind,
            buffer,
            index,
            byte_addr: p.addr,
            compiler_induced: id == COMPILER_INSTR,
        }
    }

    /// Runs `th` until it reaches a barrier, a phase transition or returns.
    pub fn run(&mut self, code: &Code, th: &mut ThreadState) -> Result<Stop, ExecError> {
        if !th.started {
            th.started = true;
            let site = code.blocks[th.block].site;
            self.enter_site(th, site);
        }
        loop {
            let blk = &code.blocks[th.block];
            while th.ip < blk.ops.len() {
                let cop = &blk.ops[th.ip];
                th.ip += 1;
                if self.step(cop, th)? {
                    return Ok(Stop::Barrier);
                }
            }
            self.tick(th, 1)?;
            let next = match &blk.term {
                CTerm::Br { cond, t, e, site } => {
                    let taken = self.eval(cond, th)?.truthy();
                    self.branch_edges.insert((*site, taken as u8));
                    if taken {
                        *t
                    } else {
                        *e
                    }
                }
                CTerm::Jmp(t) => *t,
                CTerm::Ret => return Ok(Stop::Return),
                CTerm::Next(k) => return Ok(Stop::Next(*k)),
            };
            th.block = next;
            th.ip = 0;
            let site = code.blocks[next].site;
            self.enter_site(th, site);
        }
    }

    /// Executes one op; returns true when the thread must stop at a barrier.
    fn step(&mut self, cop: &COp, th: &mut ThreadState) -> Result<bool, ExecError> {
        let cost = if matches!(cop.op, Op::Math { .. }) { MATH_COST } else { 1 };
        self.tick(th, cost)?;
        match &cop.op {
            Op::Arith { dst, op, l, r } => {
                let v = binop(*op, self.eval(l, th)?, self.eval(r, th)?);
                th.locals[*dst as usize] = v;
            }
            Op::Math { dst, f, src } => {
                let x = self.eval(src, th)?.as_float();
                th.locals[*dst as usize] = Value::Float(f.apply(x));
            }
            Op::Load { dst, base, idx } => {
                let p = self.pointer(self.eval(base, th)?, th)?;
                let i = self.eval(idx, th)?.as_int();
                let q = p.offset_elems(i);
                let rec = self.access_record(th, cop.id, AccessKind::Read, &q);
                self.record(rec);
                self.covered.insert(cop.id.0 as usize);
                let v = match self.rt.check_access(&q, q.elem.size()) {
                    Some((class, ctx)) => {
                        self.report(class, rec, ctx)?;
                        poison(q.elem)
                    }
                    None => self.rt.read_value(q.addr, q.elem),
                };
                th.locals[*dst as usize] = v;
            }
            Op::Store { base, idx, val } => {
                let p = self.pointer(self.eval(base, th)?, th)?;
                let i = self.eval(idx, th)?.as_int();
                let v = self.eval(val, th)?;
                let q = p.offset_elems(i);
                let rec = self.access_record(th, cop.id, AccessKind::Write, &q);
                self.record(rec);
                self.covered.insert(cop.id.0 as usize);
                match self.rt.check_access(&q, q.elem.size()) {
                    Some((class, ctx)) => self.report(class, rec, ctx)?,
                    None => self.rt.write_value(q.addr, q.elem, v),
                }
            }
            Op::Alloca {
                dst,
                elem,
                count,
                fields,
                space,
            } => {
                let n = self.eval(count, th)?.as_int();
                let size = (n as u64).checked_mul(elem.size()).ok_or(SanError::OutOfMemory {
                    requested: u64::MAX,
                    segment: "stack",
                })?;
                let p = self
                    .rt
                    .alloc(size, *space, Allocator::Stack, SegKey::Stack(th.id.thread), *elem, fields)?;
                let rec = self.access_record(th, cop.id, AccessKind::Alloc, &p);
                self.record(rec);
                th.locals[*dst as usize] = Value::Ptr(p);
            }
            Op::Malloc { dst, api, elem, size } => {
                let n = self.eval(size, th)?.as_int() as u64;
                let (space, key) = match api {
                    HeapApi::Host => (MemorySpace::GlobalHost, SegKey::Host),
                    HeapApi::Device => (
                        MemorySpace::GlobalDevice,
                        SegKey::Device(th.id.block as u64 * self.grid.threads as u64 + th.id.thread as u64),
                    ),
                };
                let p = match self.rt.alloc(n, space, Allocator::from_api(*api), key, *elem, &[]) {
                    Ok(p) => p,
                    Err(e) if *api == HeapApi::Host => return Err(e.into()),
                    // In-kernel malloc reports failure with a null pointer.
                    Err(_) => Ptr {
                        addr: 0,
                        elem: *elem,
                        prov: None,
                    },
                };
                let rec = self.access_record(th, cop.id, AccessKind::Alloc, &p);
                self.record(rec);
                th.locals[*dst as usize] = Value::Ptr(p);
            }
            Op::Free { ptr, api } => {
                let p = self.pointer(self.eval(ptr, th)?, th)?;
                let rec = self.access_record(th, cop.id, AccessKind::Free, &p);
                match self.rt.free(p, *api) {
                    FreeOutcome::Freed(_) => self.record(rec),
                    FreeOutcome::Ignored => {}
                    FreeOutcome::Bug(class, alloc) => {
                        self.record(rec);
                        let ctx = crate::sanrt::AllocContext {
                            alloc,
                            distance: alloc
                                .map(|a| p.addr as i64 - self.rt.allocation(a).base as i64)
                                .unwrap_or(i64::MAX),
                        };
                        self.report(class, rec, ctx)?;
                    }
                }
            }
            Op::Field { dst, base, k } => {
                let p = self.pointer(self.eval(base, th)?, th)?;
                th.locals[*dst as usize] = Value::Ptr(self.rt.field(p, *k));
            }
            Op::Enter => self.rt.push_frame(th.id.thread),
            Op::Leave => self.rt.pop_frame(th.id.thread),
            Op::Barrier => return Ok(true),
            Op::PromoLoad { dst, promo } => {
                let tid = th.id.thread;
                self.promo_access(th, *promo, AccessKind::Read)?;
                th.locals[*dst as usize] = self.promo[*promo as usize][tid as usize];
            }
            Op::PromoStore { src, promo } => {
                let tid = th.id.thread;
                self.promo_access(th, *promo, AccessKind::Write)?;
                self.promo[*promo as usize][tid as usize] = th.locals[*src as usize];
            }
        }
        Ok(false)
    }

    fn promo_access(&mut self, th: &ThreadState, promo: u32, kind: AccessKind) -> Result<(), ExecError> {
        let p = self.promo_ptrs[promo as usize].offset_elems(th.id.thread as i64);
        let rec = self.access_record(th, COMPILER_INSTR, kind, &p);
        self.record(rec);
        if let Some((class, ctx)) = self.rt.check_access(&p, 8) {
            self.report(class, rec, ctx)?;
        }
        Ok(())
    }

    /// Finalizes the result, reading back every buffer parameter.
    pub fn finish(mut self, error: Option<ExecError>) -> ExecResult {
        let mut memory = Vec::new();
        for (v, pe) in self.params.iter().zip(&self.param_elems) {
            match (v, pe) {
                (Value::Ptr(p), Some((_, size))) => {
                    let mut buf = vec![0u8; *size as usize];
                    self.rt.data.read(p.addr, &mut buf);
                    memory.push(buf);
                }
                _ => memory.push(Vec::new()),
            }
        }
        self.out.memory = memory;
        self.out.error = error;
        self.out.covered = self.covered.iter().map(|i| InstrId(i as u32)).collect();
        self.out.branch_edges = self.branch_edges.into_iter().collect();
        self.out.edges = self.edges;
        self.out
    }
}

fn poison(elem: ScalarType) -> Value {
    if elem.is_float() {
        Value::Float(0.0)
    } else {
        Value::Int(0)
    }
}

/// Binary operator semantics. Integer division by zero yields 0.
pub fn binop(op: BinOp, a: Value, b: Value) -> Value {
    use Value::*;
    match (a, b) {
        (Ptr(p), Int(k)) if op == BinOp::Add => return Ptr(p.offset_elems(k)),
        (Int(k), Ptr(p)) if op == BinOp::Add => return Ptr(p.offset_elems(k)),
        (Ptr(p), Int(k)) if op == BinOp::Sub => return Ptr(p.offset_elems(k.wrapping_neg())),
        (Ptr(p), Ptr(q)) => {
            return Int(match op {
                BinOp::Sub => (p.addr.wrapping_sub(q.addr) as i64) / p.elem.size() as i64,
                BinOp::Eq => (p.addr == q.addr) as i64,
                BinOp::Ne => (p.addr != q.addr) as i64,
                _ => 0,
            })
        }
        _ => {}
    }
    if let (Int(x), Int(y)) = (a, b) {
        return Int(int_op(op, x, y));
    }
    let (x, y) = (a.as_float(), b.as_float());
    match op {
        BinOp::Add => Float(x + y),
        BinOp::Sub => Float(x - y),
        BinOp::Mul => Float(x * y),
        BinOp::Div => Float(x / y),
        BinOp::Rem => Float(x % y),
        BinOp::Min => Float(x.min(y)),
        BinOp::Max => Float(x.max(y)),
        BinOp::Eq => Int((x == y) as i64),
        BinOp::Ne => Int((x != y) as i64),
        BinOp::Lt => Int((x < y) as i64),
        BinOp::Le => Int((x <= y) as i64),
        BinOp::Gt => Int((x > y) as i64),
        BinOp::Ge => Int((x >= y) as i64),
        BinOp::And | BinOp::Or | BinOp::Xor | BinOp::Shl | BinOp::Shr => {
            Int(int_op(op, a.as_int(), b.as_int()))
        }
    }
}

pub fn int_op(op: BinOp, x: i64, y: i64) -> i64 {
    match op {
        BinOp::Add => x.wrapping_add(y),
        BinOp::Sub => x.wrapping_sub(y),
        BinOp::Mul => x.wrapping_mul(y),
        BinOp::Div => {
            if y == 0 {
                0
            } else {
                x.wrapping_div(y)
            }
        }
        BinOp::Rem => {
            if y == 0 {
                0
            } else {
                x.wrapping_rem(y)
            }
        }
        BinOp::And => x & y,
        BinOp::Or => x | y,
        BinOp::Xor => x ^ y,
        BinOp::Shl => x.wrapping_shl((y & 63) as u32),
        BinOp::Shr => x.wrapping_shr((y & 63) as u32),
        BinOp::Eq => (x == y) as i64,
        BinOp::Ne => (x != y) as i64,
        BinOp::Lt => (x < y) as i64,
        BinOp::Le => (x <= y) as i64,
        BinOp::Gt => (x > y) as i64,
        BinOp::Ge => (x >= y) as i64,
        BinOp::Min => x.min(y),
        BinOp::Max => x.max(y),
    }
}

/// Encodes scalar arguments the same way buffers are stored.
pub fn encode_scalar(t: ScalarType, v: Value) -> Vec<u8> {
    encode(t, v)[..t.size() as usize].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn division_by_zero_is_zero() {
        assert_eq!(int_op(BinOp::Div, 7, 0), 0);
        assert_eq!(int_op(BinOp::Rem, 7, 0), 0);
        assert_eq!(int_op(BinOp::Div, i64::MIN, -1), i64::MIN);
    }

    #[test]
    fn pointer_arithmetic_scales_by_element() {
        let p = Ptr {
            addr: 100,
            elem: ScalarType::F64,
            prov: None,
        };
        match binop(BinOp::Add, Value::Ptr(p), Value::Int(2)) {
            Value::Ptr(q) => assert_eq!(q.addr, 116),
            v => panic!("{v:?}"),
        }
        let q = Ptr { addr: 132, ..p };
        assert_eq!(binop(BinOp::Sub, Value::Ptr(q), Value::Ptr(p)), Value::Int(4));
    }

    #[test]
    fn mixed_arithmetic_promotes_to_float() {
        assert_eq!(binop(BinOp::Add, Value::Int(1), Value::Float(0.5)), Value::Float(1.5));
        assert_eq!(binop(BinOp::Lt, Value::Int(1), Value::Float(1.5)), Value::Int(1));
    }
}
