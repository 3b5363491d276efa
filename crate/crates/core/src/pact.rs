//! Lowering of kernels into task programs: one task per block, one loop over
//! threads per barrier phase, and locals live across a barrier promoted to
//! per-thread arrays. When only corner threads need to run, the thread index
//! becomes a task argument instead of a loop.

use std::collections::BTreeSet;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::affine::{AffineSummary, Plan};
use crate::exec::{
    site_id, CBlock, COp, CTerm, Code, Env, ExecConfig, ExecError, ExecResult, Inputs, Names, Op, Stop,
    ThreadState, COMPILER_INSTR,
};
use crate::kir::cfg::{variant_controlled_blocks, Cfg};
use crate::kir::{print_expr, GridConfig, Instr, InstrId, InstrKind, Kernel, Terminator};
use crate::kir::print::{print_instr_line, print_param_list, print_shared};
use crate::sanrt::ThreadId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PactError {
    #[error("barrier @{0} is under thread-divergent control flow")]
    UnsupportedBarrierPlacement(InstrId),
}

/// How threads of a task are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LowerMode {
    /// A loop over all thread indices per barrier phase.
    Loops,
    /// The thread index is a task argument; barriers are dropped.
    ExposedTid,
}

/// Instruction of a lowered phase body.
#[derive(Clone, Debug, PartialEq)]
pub enum LInstr {
    Orig(Instr),
    /// `x = x_arr[tid]`
    PromoLoad(String),
    /// `x_arr[tid] = x`
    PromoStore(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LTerm {
    /// Original terminator with labels renamed to segment labels.
    Orig(Terminator),
    /// End of this thread's phase; it resumes in phase `k`.
    Next(usize),
}

/// Straight-line piece of an original block inside one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub label: String,
    pub block: usize,
    pub start: usize,
    pub body: Vec<LInstr>,
    pub term: LTerm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseLoop {
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct LoweredProgram {
    pub kernel: Kernel,
    pub summary: AffineSummary,
    pub mode: LowerMode,
    pub phases: Vec<PhaseLoop>,
    /// Locals promoted to per-thread arrays, in slot order.
    pub promoted: Vec<String>,
    names: Names,
    codes: Vec<Code>,
}

impl LoweredProgram {
    pub fn exposed_tid(&self) -> bool {
        self.mode == LowerMode::ExposedTid
    }

    pub fn memory_access_ids(&self) -> Vec<InstrId> {
        self.kernel.memory_access_ids()
    }

    /// Textual form: the kernel dialect extended with phase loops.
    pub fn print(&self) -> String {
        let k = &self.kernel;
        let task = if self.exposed_tid() { "task(bid, tid)" } else { "task(bid)" };
        let mut s = format!("lowered {}({}) {task} {{\n", k.name, print_param_list(k));
        for d in &k.shared {
            s.push_str(&format!("  {}\n", print_shared(d)));
        }
        for p in &self.promoted {
            s.push_str(&format!("  promote {p}[blockDim.x]\n"));
        }
        let with_id = !k.has_sequential_ids();
        for (n, ph) in self.phases.iter().enumerate() {
            if self.exposed_tid() {
                s.push_str(&format!("  phase {n}:\n"));
            } else {
                s.push_str(&format!("  phase {n} loop tid:\n"));
            }
            for seg in &ph.segments {
                s.push_str(&format!("  {}:\n", seg.label));
                for i in &seg.body {
                    let line = match i {
                        LInstr::Orig(i) => print_instr_line(i, with_id),
                        LInstr::PromoLoad(x) => format!("promote.load {x}"),
                        LInstr::PromoStore(x) => format!("promote.store {x}"),
                    };
                    s.push_str(&format!("    {line}\n"));
                }
                let t = match &seg.term {
                    LTerm::Next(k) => format!("next {k}"),
                    LTerm::Orig(Terminator::Return) => "return".to_string(),
                    LTerm::Orig(Terminator::Jump(l)) => format!("jmp {l}"),
                    LTerm::Orig(Terminator::Branch {
                        cond,
                        then_label,
                        else_label,
                    }) => format!("br {} {then_label} {else_label}", print_expr(cond)),
                };
                s.push_str(&format!("    {t}\n"));
            }
        }
        s.push_str("}\n");
        s
    }
}

/// Lowers with thread loops, or with an exposed thread index when the
/// summary says the corner threads suffice.
pub fn lower(k: &Kernel, s: &AffineSummary) -> Result<LoweredProgram, PactError> {
    let mode = if s.is_affine() && !s.is_guarded() {
        LowerMode::ExposedTid
    } else {
        LowerMode::Loops
    };
    lower_with_mode(k, s, mode)
}

pub fn lower_with_mode(k: &Kernel, s: &AffineSummary, mode: LowerMode) -> Result<LoweredProgram, PactError> {
    let cfg = Cfg::new(k);
    let controlled = variant_controlled_blocks(k, &cfg);
    for (b, c) in k.blocks.iter().zip(&controlled) {
        if *c {
            if let Some(i) = b.instrs.iter().find(|i| matches!(i.kind, InstrKind::Barrier)) {
                return Err(PactError::UnsupportedBarrierPlacement(i.id));
            }
        }
    }
    let names = Names::new(k);
    let exposed = mode == LowerMode::ExposedTid;

    // Phase entries: kernel entry, then the point after each barrier.
    let mut entries: Vec<(usize, usize)> = vec![(cfg.entry, 0)];
    if !exposed {
        for (bi, b) in k.blocks.iter().enumerate() {
            for (ii, i) in b.instrs.iter().enumerate() {
                if matches!(i.kind, InstrKind::Barrier) {
                    entries.push((bi, ii + 1));
                }
            }
        }
    }
    let phase_of: FxHashMap<(usize, usize), usize> = entries.iter().enumerate().map(|(p, e)| (*e, p)).collect();

    let promoted: Vec<String> = if exposed {
        Vec::new()
    } else {
        let live = live_at(k, &cfg, &names, &entries[1..]);
        let mut v: Vec<String> = live.into_iter().collect();
        v.sort_by_key(|x| names.local(x));
        v
    };
    let promo_set: FxHashSet<&str> = promoted.iter().map(String::as_str).collect();

    let mut phases = Vec::new();
    for &(eb, es) in &entries {
        let mut segs: Vec<Segment> = Vec::new();
        let mut seen: FxHashMap<(usize, usize), usize> = FxHashMap::default();
        let mut queue = vec![(eb, es)];
        seen.insert((eb, es), 0);
        let label_of = |b: usize, s: usize| {
            if s == 0 {
                k.blocks[b].label.clone()
            } else {
                format!("{}.{s}", k.blocks[b].label)
            }
        };
        let mut qi = 0;
        while qi < queue.len() {
            let (b, s) = queue[qi];
            qi += 1;
            let blk = &k.blocks[b];
            let mut body = Vec::new();
            let mut term = None;
            for i in &blk.instrs[s..] {
                if matches!(i.kind, InstrKind::Barrier) {
                    if exposed {
                        continue;
                    }
                    let pos = blk.instrs.iter().position(|x| x.id == i.id).unwrap();
                    term = Some(LTerm::Next(phase_of[&(b, pos + 1)]));
                    break;
                }
                body.push(LInstr::Orig(i.clone()));
                if let Some(d) = i.kind.dst() {
                    if promo_set.contains(d) {
                        body.push(LInstr::PromoStore(d.to_string()));
                    }
                }
            }
            let term = match term {
                Some(t) => t,
                None => {
                    let mut t = blk.term.clone();
                    let mut visit = |l: &mut String| {
                        let succ = cfg.index[l.as_str()];
                        if !seen.contains_key(&(succ, 0)) {
                            seen.insert((succ, 0), seen.len());
                            queue.push((succ, 0));
                        }
                        *l = label_of(succ, 0);
                    };
                    match &mut t {
                        Terminator::Branch {
                            then_label,
                            else_label,
                            ..
                        } => {
                            visit(then_label);
                            visit(else_label);
                        }
                        Terminator::Jump(l) => visit(l),
                        Terminator::Return => {}
                    }
                    LTerm::Orig(t)
                }
            };
            segs.push(Segment {
                label: label_of(b, s),
                block: b,
                start: s,
                body,
                term,
            });
        }
        // Reload promoted locals this phase reads.
        let mut used: BTreeSet<u32> = BTreeSet::new();
        for seg in &segs {
            for i in &seg.body {
                if let LInstr::Orig(i) = i {
                    for u in i.kind.uses() {
                        if promo_set.contains(u) {
                            used.insert(names.local(u));
                        }
                    }
                }
            }
            if let LTerm::Orig(Terminator::Branch { cond, .. }) = &seg.term {
                for u in cond.vars() {
                    if promo_set.contains(u) {
                        used.insert(names.local(u));
                    }
                }
            }
        }
        let loads: Vec<LInstr> = promoted
            .iter()
            .filter(|p| used.contains(&names.local(p)))
            .map(|p| LInstr::PromoLoad(p.clone()))
            .collect();
        segs[0].body.splice(0..0, loads);
        phases.push(PhaseLoop { segments: segs });
    }

    let codes = phases.iter().map(|p| compile_phase(p, &names, &promoted)).collect();
    Ok(LoweredProgram {
        kernel: k.clone(),
        summary: s.clone(),
        mode,
        phases,
        promoted,
        names,
        codes,
    })
}

/// Locals live at any of the given (block, instruction) points.
fn live_at(k: &Kernel, cfg: &Cfg, names: &Names, points: &[(usize, usize)]) -> FxHashSet<String> {
    let n = k.blocks.len();
    let is_local = |v: &str| names.locals.contains_key(v);
    let mut live_in: Vec<FxHashSet<String>> = vec![FxHashSet::default(); n];
    let mut result: FxHashSet<String> = FxHashSet::default();
    let mut changed = true;
    while changed {
        changed = false;
        for b in (0..n).rev() {
            let mut live: FxHashSet<String> = FxHashSet::default();
            for &s in &cfg.succs[b] {
                live.extend(live_in[s].iter().cloned());
            }
            if let Terminator::Branch { cond, .. } = &k.blocks[b].term {
                live.extend(cond.vars().into_iter().filter(|v| is_local(v)).map(str::to_string));
            }
            let instrs = &k.blocks[b].instrs;
            for ii in (0..=instrs.len()).rev() {
                if points.contains(&(b, ii)) {
                    result.extend(live.iter().cloned());
                }
                if ii == 0 {
                    break;
                }
                let i = &instrs[ii - 1];
                if let Some(d) = i.kind.dst() {
                    live.remove(d);
                }
                live.extend(i.kind.uses().into_iter().filter(|v| is_local(v)).map(str::to_string));
            }
            if live != live_in[b] {
                live_in[b] = live;
                changed = true;
            }
        }
    }
    result
}

fn compile_phase(p: &PhaseLoop, names: &Names, promoted: &[String]) -> Code {
    let index: FxHashMap<&str, usize> = p
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| (s.label.as_str(), i))
        .collect();
    let promo = |x: &str| promoted.iter().position(|p| p == x).unwrap() as u32;
    let blocks = p
        .segments
        .iter()
        .map(|seg| CBlock {
            ops: seg
                .body
                .iter()
                .map(|i| match i {
                    LInstr::Orig(i) => COp {
                        op: names.op(&i.kind),
                        id: i.id,
                    },
                    LInstr::PromoLoad(x) => COp {
                        op: Op::PromoLoad {
                            dst: names.local(x),
                            promo: promo(x),
                        },
                        id: COMPILER_INSTR,
                    },
                    LInstr::PromoStore(x) => COp {
                        op: Op::PromoStore {
                            src: names.local(x),
                            promo: promo(x),
                        },
                        id: COMPILER_INSTR,
                    },
                })
                .collect(),
            term: match &seg.term {
                LTerm::Next(k) => CTerm::Next(*k),
                LTerm::Orig(Terminator::Return) => CTerm::Ret,
                LTerm::Orig(Terminator::Jump(l)) => CTerm::Jmp(index[l.as_str()]),
                LTerm::Orig(Terminator::Branch {
                    cond,
                    then_label,
                    else_label,
                }) => CTerm::Br {
                    cond: names.expr(cond),
                    t: index[then_label.as_str()],
                    e: index[else_label.as_str()],
                    site: seg.block as u32,
                },
            },
            site: site_id(seg.block, seg.start),
        })
        .collect();
    Code { blocks, entry: 0 }
}

/// Which part of the grid to execute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Schedule {
    All,
    Blocks(Vec<u32>),
    /// Individual threads; only meaningful with an exposed thread index.
    Threads(Vec<ThreadId>),
}

impl Schedule {
    pub fn from_plan(plan: &Plan) -> Schedule {
        match plan {
            Plan::BoundaryThreads(t) => Schedule::Threads(t.clone()),
            _ => Schedule::All,
        }
    }
}

/// An in-progress execution of a lowered program, driven task by task.
pub struct LoweredRun<'p> {
    prog: &'p LoweredProgram,
    env: Env,
    grid: GridConfig,
    steps: Vec<u64>,
    pub thread_instances: u64,
}

impl<'p> LoweredRun<'p> {
    pub fn new(prog: &'p LoweredProgram, grid: GridConfig, inputs: &Inputs, cfg: ExecConfig) -> Result<Self, ExecError> {
        let env = Env::new(&prog.kernel, &prog.names, grid, inputs, cfg)?;
        Ok(LoweredRun {
            prog,
            env,
            grid,
            steps: vec![0; grid.threads as usize],
            thread_instances: 0,
        })
    }

    pub fn report_count(&self) -> usize {
        self.env.out.reports.len()
    }

    pub fn steps(&self) -> u64 {
        self.env.out.steps
    }

    pub fn covered(&self) -> &crate::kir::cfg::BitSet {
        self.env.covered()
    }

    pub fn branch_edge_count(&self) -> usize {
        self.env.branch_edge_count()
    }

    fn thread(&self, j: u32, i: u32, phase: usize) -> ThreadState {
        let mut th = ThreadState::new(ThreadId::new(j, i), &self.prog.codes[phase], self.prog.names.nlocals());
        th.steps = self.steps[i as usize];
        th
    }

    /// Runs one task: every thread of block `j` through all phases.
    pub fn run_block(&mut self, j: u32) -> Result<(), ExecError> {
        let all: Vec<u32> = (0..self.grid.threads).collect();
        self.run_task(j, &all)
    }

    /// Runs the given threads of block `j`.
    pub fn run_task(&mut self, j: u32, tids: &[u32]) -> Result<(), ExecError> {
        self.steps.iter_mut().for_each(|s| *s = 0);
        self.env.begin_block(j)?;
        self.env.begin_task(self.prog.promoted.len())?;
        let r = self.task_body(j, tids);
        self.env.end_task();
        self.env.end_block();
        r
    }

    fn task_body(&mut self, j: u32, tids: &[u32]) -> Result<(), ExecError> {
        let exposed = self.prog.exposed_tid();
        let mut pending: Vec<Option<usize>> = vec![Some(0); tids.len()];
        loop {
            let Some(first) = pending.iter().flatten().next().copied() else {
                return Ok(());
            };
            for (n, &tid) in tids.iter().enumerate() {
                if pending[n] != Some(first) {
                    continue;
                }
                let mut th = self.thread(j, tid, first);
                if !exposed {
                    self.env.charge(&mut th, 1)?;
                }
                self.thread_instances += 1;
                let stop = self.env.run(&self.prog.codes[first], &mut th);
                self.steps[tid as usize] = th.steps;
                match stop? {
                    Stop::Next(k) => pending[n] = Some(k),
                    Stop::Return => {
                        pending[n] = None;
                        self.env.thread_exit(tid);
                    }
                    Stop::Barrier => return Err(ExecError::Internal("barrier inside a lowered phase".into())),
                }
            }
        }
    }

    pub fn finish(self, error: Option<ExecError>) -> ExecResult {
        self.env.finish(error)
    }
}

/// Executes the scheduled tasks in ascending block order.
pub fn run_lowered(p: &LoweredProgram, g: GridConfig, inputs: &Inputs, schedule: &Schedule) -> ExecResult {
    run_lowered_with(p, g, inputs, schedule, ExecConfig::reference())
}

pub fn run_lowered_with(
    p: &LoweredProgram,
    g: GridConfig,
    inputs: &Inputs,
    schedule: &Schedule,
    cfg: ExecConfig,
) -> ExecResult {
    let mut run = match LoweredRun::new(p, g, inputs, cfg) {
        Ok(r) => r,
        Err(e) => {
            return ExecResult {
                error: Some(e),
                ..ExecResult::default()
            }
        }
    };
    let err = run_schedule(&mut run, g, schedule).err();
    run.finish(err)
}

fn run_schedule(run: &mut LoweredRun<'_>, g: GridConfig, schedule: &Schedule) -> Result<(), ExecError> {
    match schedule {
        Schedule::All => {
            for j in 0..g.blocks {
                run.run_block(j)?;
            }
        }
        Schedule::Blocks(bs) => {
            for &j in bs.iter().filter(|&&j| j < g.blocks) {
                run.run_block(j)?;
            }
        }
        Schedule::Threads(ts) => {
            let mut by_block: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
            for t in ts.iter().filter(|t| t.block < g.blocks && t.thread < g.threads) {
                by_block.entry(t.block).or_default().push(t.thread);
            }
            for (j, mut tids) in by_block {
                tids.sort();
                tids.dedup();
                run.run_task(j, &tids)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::analyze;
    use crate::exec::{as_f32s, Arg};
    use crate::kir::{parse_kernel, ScalarType};
    use crate::refsim::run_reference;

    pub(crate) const VADD_SHARED: &str = "kernel vecAdd(a: *global_host f32, b: *global_host f32, c: *global_host f32)
          shared s_a: [blockDim.x] f32
          shared s_b: [blockDim.x] f32
          id = add (mul blockIdx.x blockDim.x) threadIdx.x
          x = load a[id]
          store s_a[threadIdx.x] x
          y = load b[id]
          store s_b[threadIdx.x] y
          barrier
          u = load s_a[threadIdx.x]
          v = load s_b[threadIdx.x]
          w = add u v
          store c[id] w";

    fn inputs() -> Inputs {
        let a: Vec<f32> = (1..=8).map(|x| x as f32).collect();
        Inputs::new(vec![Arg::f32s(&a), Arg::f32s(&a), Arg::zeros(ScalarType::F32, 8)])
    }

    #[test]
    fn shared_vecadd_lowers_to_two_phases_promoting_id() {
        let k = parse_kernel(VADD_SHARED).unwrap();
        let p = lower_with_mode(&k, &analyze(&k), LowerMode::Loops).unwrap();
        assert_eq!(p.phases.len(), 2);
        assert_eq!(p.promoted, vec!["id".to_string()]);
        let g = GridConfig::new(2, 4);
        let r = run_lowered(&p, g, &inputs(), &Schedule::All);
        let o = run_reference(&k, g, &inputs());
        assert!(r.error.is_none(), "{:?}", r.error);
        assert_eq!(as_f32s(&r.memory[2]), vec![2., 4., 6., 8., 10., 12., 14., 16.]);
        assert_eq!(r.memory, o.memory);
        assert_eq!(r.original_accesses(), o.original_accesses());
        assert!(r.trace.iter().any(|t| t.compiler_induced));
        let text = p.print();
        assert!(text.contains("phase 1 loop tid:"), "{text}");
        assert!(text.contains("promote.store id"), "{text}");
    }

    #[test]
    fn barrier_free_kernel_has_one_phase() {
        let k = parse_kernel("kernel k(c: *global_host i32)\n store c[threadIdx.x] 1").unwrap();
        let p = lower_with_mode(&k, &analyze(&k), LowerMode::Loops).unwrap();
        assert_eq!(p.phases.len(), 1);
        assert!(p.promoted.is_empty());
    }

    #[test]
    fn exposed_tid_runs_only_corner_threads() {
        let k = parse_kernel("kernel k(c: *global_host i32)\n i = sub threadIdx.x 1\n store c[i] 1").unwrap();
        let s = analyze(&k);
        let p = lower(&k, &s).unwrap();
        assert!(p.exposed_tid());
        let g = GridConfig::new(4, 8);
        let r = run_lowered(
            &p,
            g,
            &Inputs::new(vec![Arg::zeros(ScalarType::I32, 8)]),
            &Schedule::Threads(vec![ThreadId::new(0, 0)]),
        );
        assert_eq!(r.bug_threads().into_iter().collect::<Vec<_>>(), vec![ThreadId::new(0, 0)]);
    }

    #[test]
    fn barriers_under_uniform_branch_round_trip() {
        let k = parse_kernel(
            "kernel unibar(c: *global_host i32, n: i32)
               shared s: [blockDim.x] i32
               g = add (mul blockIdx.x blockDim.x) threadIdx.x
               br (gt n 0) body done
             body:
               store s[threadIdx.x] n
               barrier
               r = rem (add threadIdx.x 1) blockDim.x
               v = load s[r]
               store c[g] v
               barrier
               w = add v g
               store s[r] w
               jmp done
             done:
               return",
        )
        .unwrap();
        let p = lower_with_mode(&k, &analyze(&k), LowerMode::Loops).unwrap();
        assert_eq!(p.phases.len(), 3);
        let g = GridConfig::new(2, 4);
        let inp = Inputs::new(vec![Arg::zeros(ScalarType::I32, 8), Arg::Int(3)]);
        let r = run_lowered(&p, g, &inp, &Schedule::All);
        let o = run_reference(&k, g, &inp);
        assert!(r.error.is_none(), "{:?}", r.error);
        assert_eq!(r.memory, o.memory);
        assert_eq!(r.original_accesses(), o.original_accesses());
    }
}
