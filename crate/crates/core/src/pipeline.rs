//! End-to-end compile pipeline (prune, analyze, lower) and the throughput
//! benchmark built on it.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::affine::{analyze, AffineSummary, Plan};
use crate::axiprune::{axiprune, PruneReport};
use crate::exec::{ExecConfig, Inputs};
use crate::kir::{GridConfig, Kernel};
use crate::pact::{lower, lower_with_mode, LowerMode, LoweredProgram, PactError};
use crate::prex::{prex_execute, prex_execute_plan, PrexOptions, PrexOutcome};

/// Optimization switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub prex: bool,
    pub axiprune: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            prex: true,
            axiprune: true,
        }
    }
}

/// Everything the compile step produces for one kernel.
#[derive(Clone, Debug)]
pub struct Compiled {
    pub options: PipelineOptions,
    pub original: Kernel,
    /// Present when pruning ran.
    pub prune_report: Option<PruneReport>,
    pub summary: AffineSummary,
    pub lowered: LoweredProgram,
}

pub fn compile(k: &Kernel, options: PipelineOptions) -> Result<Compiled, PactError> {
    let (kernel, prune_report) = if options.axiprune {
        let (pk, r) = axiprune(k);
        (pk, Some(r))
    } else {
        (k.clone(), None)
    };
    let summary = analyze(&kernel);
    let lowered = if options.prex {
        lower(&kernel, &summary)?
    } else {
        lower_with_mode(&kernel, &summary, LowerMode::Loops)?
    };
    Ok(Compiled {
        options,
        original: k.clone(),
        prune_report,
        summary,
        lowered,
    })
}

impl Compiled {
    /// The schedule the executor will follow for `g`.
    pub fn plan(&self, g: GridConfig) -> Plan {
        if self.options.prex {
            crate::affine::select_representative_threads(&self.summary, g)
        } else {
            Plan::All
        }
    }

    pub fn execute(&self, g: GridConfig, inputs: &Inputs, exec: ExecConfig) -> PrexOutcome {
        let opts = PrexOptions {
            exec,
            ..PrexOptions::default()
        };
        if self.options.prex {
            prex_execute(&self.lowered, g, inputs, &opts)
        } else {
            prex_execute_plan(&self.lowered, g, inputs, &opts, &Plan::All)
        }
    }
}

/// One configuration of a benchmark run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchRow {
    pub config: String,
    pub steps: u64,
    pub thread_instances: u64,
    pub blocks_executed: u32,
    pub execs_per_sec: f64,
    /// Baseline steps divided by this row's steps.
    pub step_ratio: f64,
    pub wall_ratio: f64,
}

impl BenchRow {
    pub fn line(&self) -> String {
        format!(
            "config={} steps={} thread_instances={} blocks_executed={} execs_per_sec={:.1} step_ratio={:.3} wall_ratio={:.3}",
            self.config,
            self.steps,
            self.thread_instances,
            self.blocks_executed,
            self.execs_per_sec,
            self.step_ratio,
            self.wall_ratio
        )
    }
}

pub const BENCH_CONFIGS: [(&str, PipelineOptions); 3] = [
    (
        "baseline",
        PipelineOptions {
            prex: false,
            axiprune: false,
        },
    ),
    (
        "prex",
        PipelineOptions {
            prex: true,
            axiprune: false,
        },
    ),
    (
        "prex+axiprune",
        PipelineOptions {
            prex: true,
            axiprune: true,
        },
    ),
];

/// Runs the kernel `reps` times under each benchmark configuration. Step
/// counts come from a single run since they are deterministic.
pub fn bench(k: &Kernel, g: GridConfig, inputs: &Inputs, exec: ExecConfig, reps: u32) -> Result<Vec<BenchRow>, PactError> {
    let reps = reps.max(1);
    let mut rows: Vec<BenchRow> = Vec::new();
    for (name, options) in BENCH_CONFIGS {
        let c = compile(k, options)?;
        let first = c.execute(g, inputs, exec);
        let start = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(c.execute(g, inputs, exec));
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        rows.push(BenchRow {
            config: name.to_string(),
            steps: first.stats.steps,
            thread_instances: first.stats.thread_instances,
            blocks_executed: first.stats.blocks_executed,
            execs_per_sec: reps as f64 / secs,
            step_ratio: 1.0,
            wall_ratio: 1.0,
        });
    }
    let (base_steps, base_eps) = (rows[0].steps.max(1) as f64, rows[0].execs_per_sec);
    for r in &mut rows {
        r.step_ratio = base_steps / r.steps.max(1) as f64;
        r.wall_ratio = r.execs_per_sec / base_eps;
    }
    Ok(rows)
}
