//! Partial representative execution: runs only the blocks (or threads) of a
//! lowered program that can expose a memory bug, following the head/tail
//! block schedule with coverage-based early exit.

use serde::{Deserialize, Serialize};

use crate::affine::{select_representative_threads, Plan};
use crate::exec::{ExecConfig, ExecError, ExecResult, Inputs};
use crate::kir::{GridConfig, Terminator};
use crate::pact::{LoweredProgram, LoweredRun};
use crate::sanrt::ThreadId;

#[derive(Clone, Copy, Debug)]
pub struct PrexOptions {
    pub exec: ExecConfig,
    /// Also require every branch edge to be taken before stopping early.
    pub require_branch_edges: bool,
}

impl Default for PrexOptions {
    fn default() -> Self {
        PrexOptions {
            exec: ExecConfig::reference(),
            require_branch_edges: false,
        }
    }
}

/// Work and outcome of one partial execution.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PrexStats {
    pub plan: String,
    pub blocks_executed: u32,
    /// Head/tail iterations (guarded plans only).
    pub iterations: u32,
    pub covered_fraction: f64,
    pub thread_instances: u64,
    pub steps: u64,
    pub bug_count: usize,
}

impl PrexStats {
    pub fn line(&self) -> String {
        format!(
            "plan={} blocks_executed={} iterations={} covered={:.3} thread_instances={} steps={} bugs={}",
            self.plan,
            self.blocks_executed,
            self.iterations,
            self.covered_fraction,
            self.thread_instances,
            self.steps,
            self.bug_count
        )
    }
}

#[derive(Clone, Debug)]
pub struct PrexOutcome {
    pub stats: PrexStats,
    pub result: ExecResult,
}

impl PrexOutcome {
    pub fn has_bug(&self) -> bool {
        !self.result.reports.is_empty()
    }
}

struct Cursor<'a, 'p> {
    run: &'a mut LoweredRun<'p>,
    access_ids: Vec<usize>,
    branch_edges: usize,
    require_edges: bool,
}

impl Cursor<'_, '_> {
    fn fraction(&self) -> f64 {
        if self.access_ids.is_empty() {
            return 1.0;
        }
        let c = self.run.covered();
        let hit = self.access_ids.iter().filter(|&&i| i < c.len() && c.contains(i)).count();
        hit as f64 / self.access_ids.len() as f64
    }

    fn saturated(&self) -> bool {
        self.fraction() >= 1.0 && (!self.require_edges || self.run.branch_edge_count() >= self.branch_edges)
    }
}

/// Executes `p` according to the plan its affine summary yields for `g`.
pub fn prex_execute(p: &LoweredProgram, g: GridConfig, inputs: &Inputs, opts: &PrexOptions) -> PrexOutcome {
    let plan = select_representative_threads(&p.summary, g);
    prex_execute_plan(p, g, inputs, opts, &plan)
}

pub fn prex_execute_plan(
    p: &LoweredProgram,
    g: GridConfig,
    inputs: &Inputs,
    opts: &PrexOptions,
    plan: &Plan,
) -> PrexOutcome {
    let mut stats = PrexStats {
        plan: plan.name().to_string(),
        blocks_executed: 0,
        iterations: 0,
        covered_fraction: 0.0,
        thread_instances: 0,
        steps: 0,
        bug_count: 0,
    };
    let mut run = match LoweredRun::new(p, g, inputs, opts.exec) {
        Ok(r) => r,
        Err(e) => {
            return PrexOutcome {
                stats,
                result: ExecResult {
                    error: Some(e),
                    ..ExecResult::default()
                },
            }
        }
    };
    let branch_edges = 2 * p
        .kernel
        .blocks
        .iter()
        .filter(|b| matches!(b.term, Terminator::Branch { .. }))
        .count();
    let mut cur = Cursor {
        run: &mut run,
        access_ids: p.memory_access_ids().iter().map(|i| i.0 as usize).collect(),
        branch_edges,
        require_edges: opts.require_branch_edges,
    };
    let err = drive(&mut cur, g, plan, &mut stats).err();
    stats.covered_fraction = cur.fraction();
    stats.thread_instances = run.thread_instances;
    stats.steps = run.steps();
    let result = run.finish(err);
    stats.bug_count = result.reports.len();
    PrexOutcome { stats, result }
}

fn drive(cur: &mut Cursor<'_, '_>, g: GridConfig, plan: &Plan, stats: &mut PrexStats) -> Result<(), ExecError> {
    match plan {
        Plan::All => {
            for j in 0..g.blocks {
                stats.blocks_executed += 1;
                cur.run.run_block(j)?;
            }
        }
        Plan::BoundaryThreads(threads) => {
            let mut blocks: Vec<u32> = threads.iter().map(|t| t.block).collect();
            blocks.dedup();
            for j in blocks {
                let tids: Vec<u32> = threads
                    .iter()
                    .filter(|t: &&ThreadId| t.block == j)
                    .map(|t| t.thread)
                    .collect();
                stats.blocks_executed += 1;
                cur.run.run_task(j, &tids)?;
            }
        }
        Plan::BoundaryBlocksAllThreads => {
            let mut head: i64 = 0;
            let mut tail: i64 = g.blocks as i64 - 1;
            while head <= tail {
                // The vacuous case (no accesses) still runs one iteration.
                if stats.iterations > 0 && cur.saturated() || cur.run.report_count() > 0 {
                    break;
                }
                stats.iterations += 1;
                stats.blocks_executed += 1;
                cur.run.run_block(head as u32)?;
                if tail != head {
                    stats.blocks_executed += 1;
                    cur.run.run_block(tail as u32)?;
                }
                head += 1;
                tail -= 1;
            }
        }
    }
    Ok(())
}

/// Number of head/tail iterations the schedule needs before block `k`
/// has run, for a grid of `b` blocks.
pub fn iterations_to_reach(k: u32, b: u32) -> u32 {
    (k + 1).min(b - k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::analyze;
    use crate::exec::Arg;
    use crate::kir::{parse_kernel, ScalarType};
    use crate::pact::{lower, lower_with_mode, LowerMode};
    use crate::sanrt::Policy;

    const GUARDED: &str = "kernel guarded(a: *global_host f32, b: *global_host f32, c: *global_host f32, n: i32)
          id = add (mul blockIdx.x blockDim.x) threadIdx.x
          br (lt id n) body done
        body:
          j = add id 1
          x = load a[j]
          y = load b[j]
          s = add x y
          store c[j] s
          jmp done
        done:
          return";

    fn guarded_inputs(len: usize, n: i64) -> Inputs {
        Inputs::new(vec![
            Arg::zeros(ScalarType::F32, len),
            Arg::zeros(ScalarType::F32, len),
            Arg::zeros(ScalarType::F32, len),
            Arg::Int(n),
        ])
    }

    #[test]
    fn guarded_kernel_finds_bug_in_first_iteration() {
        let k = parse_kernel(GUARDED).unwrap();
        let s = analyze(&k);
        assert!(s.is_guarded());
        let p = lower(&k, &s).unwrap();
        let (b, t) = (8u32, 4u32);
        let n = (b * t - 1) as i64;
        let out = prex_execute(&p, GridConfig::new(b, t), &guarded_inputs(n as usize, n), &PrexOptions::default());
        assert!(out.has_bug());
        assert_eq!(out.stats.blocks_executed, 2);
        assert_eq!(out.stats.iterations, 1);
        let bug = out.result.reports[0].access.thread;
        assert_eq!(bug, ThreadId::new(b - 1, t - 2));
    }

    #[test]
    fn single_block_runs_once() {
        let k = parse_kernel(GUARDED).unwrap();
        let p = lower(&k, &analyze(&k)).unwrap();
        let out = prex_execute(&p, GridConfig::new(1, 4), &guarded_inputs(8, 4), &PrexOptions::default());
        assert_eq!(out.stats.blocks_executed, 1);
        assert_eq!(out.stats.thread_instances, 4);
    }

    #[test]
    fn non_affine_kernel_runs_every_block() {
        let k = parse_kernel(
            "kernel ind(a: *global_host i32, c: *global_host i32)
               t = load a[threadIdx.x]
               store c[t] 1",
        )
        .unwrap();
        let p = lower(&k, &analyze(&k)).unwrap();
        let inp = Inputs::new(vec![Arg::zeros(ScalarType::I32, 4), Arg::zeros(ScalarType::I32, 4)]);
        let out = prex_execute(&p, GridConfig::new(8, 4), &inp, &PrexOptions::default());
        assert_eq!(out.stats.plan, "all");
        assert_eq!(out.stats.blocks_executed, 8);
    }

    #[test]
    fn unguarded_affine_runs_four_thread_instances() {
        let k = parse_kernel(
            "kernel v(a: *global_host f32)
               id = add (mul blockIdx.x blockDim.x) threadIdx.x
               store a[id] 1.0",
        )
        .unwrap();
        let p = lower(&k, &analyze(&k)).unwrap();
        let inp = Inputs::new(vec![Arg::zeros(ScalarType::F32, 128 * 64)]);
        let out = prex_execute(&p, GridConfig::new(128, 64), &inp, &PrexOptions::default());
        assert_eq!(out.stats.thread_instances, 4);
        assert_eq!(out.stats.blocks_executed, 2);
        assert!(!out.has_bug());
        let full = lower_with_mode(&k, &analyze(&k), LowerMode::Loops).unwrap();
        let base = prex_execute_plan(&full, GridConfig::new(128, 64), &inp, &PrexOptions::default(), &Plan::All);
        assert!(base.stats.steps >= 32 * out.stats.steps);
    }

    #[test]
    fn abort_policy_stops_at_first_report() {
        let k = parse_kernel(GUARDED).unwrap();
        let p = lower(&k, &analyze(&k)).unwrap();
        let opts = PrexOptions {
            exec: ExecConfig::new(crate::sanrt::DetectorMode::Exact, Policy::Abort),
            ..PrexOptions::default()
        };
        let out = prex_execute(&p, GridConfig::new(8, 4), &guarded_inputs(31, 31), &opts);
        assert_eq!(out.result.reports.len(), 1);
        assert_eq!(out.result.error, Some(ExecError::Aborted));
    }
}
