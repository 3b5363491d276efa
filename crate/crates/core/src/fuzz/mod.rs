//! Coverage-guided greybox fuzzing of lowered kernels: blob decoding,
//! havoc mutation, bucketed edge coverage, energy-weighted scheduling and
//! crash triage.

mod coverage;
mod input;
mod mutate;
pub mod suite;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{ExecConfig, ExecError, ExecResult, COMPILER_INSTR, DEFAULT_STEP_BUDGET};
use crate::kir::Kernel;
use crate::pact::PactError;
use crate::pipeline::{compile, Compiled, PipelineOptions};
use crate::sanrt::{BugClass, DetectorMode, Policy};

pub use coverage::{bucket, CoverageMap, TraceCoverage};
pub use input::{GridSpec, InputLayout, Slot, MAX_BUFFER_BYTES};
pub use mutate::{apply, havoc, mutate, MutOp, MutStep, Provenance, MAX_INPUT_BYTES};

#[derive(Debug, thiserror::Error)]
pub enum FuzzError {
    #[error("campaign needs at least one seed")]
    NoSeeds,
    #[error("seed {seed} failed to execute: {reason}")]
    HarnessSetup { seed: usize, reason: String },
    #[error(transparent)]
    Compile(#[from] PactError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    KernelCrash,
    HostCrash,
    Hang,
}

impl FindingKind {
    pub fn name(self) -> &'static str {
        match self {
            FindingKind::KernelCrash => "kernel_crash",
            FindingKind::HostCrash => "host_crash",
            FindingKind::Hang => "hang",
        }
    }
}

/// Triage key: where the crash happened and a coarse class. Spatial
/// classes collapse so one faulty index yields one finding whatever
/// distance it strays.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DedupKey {
    pub site: String,
    pub class: String,
}

impl DedupKey {
    pub fn new(site: impl Into<String>, class: impl Into<String>) -> Self {
        DedupKey {
            site: site.into(),
            class: class.into(),
        }
    }

    pub fn for_report(instr: u32, class: BugClass) -> Self {
        let site = if instr == COMPILER_INSTR.0 {
            "compiler".to_string()
        } else {
            format!("@{instr}")
        };
        DedupKey::new(site, coarse_class(class))
    }

    /// File-name friendly form.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.site.replace('@', "i"), self.class)
    }
}

impl fmt::Display for DedupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.site, self.class)
    }
}

pub fn coarse_class(c: BugClass) -> &'static str {
    if c.is_spatial() {
        "spatial"
    } else {
        c.name()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bug {
    pub kind: FindingKind,
    pub key: DedupKey,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Bug(Bug),
    /// The input could not be run for reasons unrelated to the kernel.
    SetupError(String),
}

#[derive(Clone, Debug)]
pub struct Execution {
    pub outcome: Outcome,
    pub coverage: TraceCoverage,
    pub steps: u64,
}

/// Anything that runs a byte string deterministically.
pub trait Target: Sync {
    fn execute(&self, bytes: &[u8]) -> Execution;
}

/// Classifies a finished execution.
pub fn classify(r: &ExecResult) -> Outcome {
    if let Some(rep) = r.reports.first() {
        return Outcome::Bug(Bug {
            kind: FindingKind::KernelCrash,
            key: DedupKey::for_report(rep.access.instr_id.0, rep.class),
            detail: format!("{} by thread {} at index {}", rep.class.name(), rep.access.thread, rep.access.index),
        });
    }
    let bug = |kind, site: &str, class: &str, e: &ExecError| {
        Outcome::Bug(Bug {
            kind,
            key: DedupKey::new(site, class),
            detail: e.to_string(),
        })
    };
    match &r.error {
        None | Some(ExecError::Aborted) => Outcome::Ok,
        Some(e @ ExecError::InvalidConfiguration(_)) => bug(FindingKind::HostCrash, "launch", "invalid_configuration", e),
        Some(e @ ExecError::OutOfMemory(_)) => bug(FindingKind::HostCrash, "host_alloc", "out_of_memory", e),
        Some(e @ (ExecError::NonTermination { .. } | ExecError::Timeout)) => bug(FindingKind::Hang, "kernel", "hang", e),
        Some(e @ ExecError::DivergentPhases(_)) => bug(FindingKind::KernelCrash, "barrier", "divergent_phases", e),
        Some(e @ (ExecError::BadInputs(_) | ExecError::Internal(_))) => Outcome::SetupError(e.to_string()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub mode: DetectorMode,
    /// Per-execution wall-clock limit; exceeding it is a hang.
    pub timeout: Duration,
    pub step_budget: u64,
    pub max_blocks: u32,
    pub pipeline: PipelineOptions,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            mode: DetectorMode::Exact,
            timeout: Duration::from_secs(10),
            step_budget: DEFAULT_STEP_BUDGET,
            max_blocks: 64,
            pipeline: PipelineOptions::default(),
        }
    }
}

/// A compiled kernel plus the recipe for turning blobs into launches.
#[derive(Clone, Debug)]
pub struct Harness {
    pub compiled: Compiled,
    pub layout: InputLayout,
    pub grid: GridSpec,
    pub cfg: HarnessConfig,
}

impl Harness {
    pub fn new(k: &Kernel, layout: InputLayout, grid: GridSpec, cfg: HarnessConfig) -> Result<Self, FuzzError> {
        Ok(Harness {
            compiled: compile(k, cfg.pipeline)?,
            layout,
            grid,
            cfg,
        })
    }

    /// Runs one blob under the abort policy and returns the raw result.
    pub fn run(&self, bytes: &[u8]) -> ExecResult {
        let inputs = self.layout.decode(bytes);
        let g = self.grid.resolve(&self.layout, &inputs, self.cfg.max_blocks);
        let mut exec = ExecConfig::new(self.cfg.mode, Policy::Abort);
        exec.step_budget = self.cfg.step_budget;
        exec.deadline = Some(Instant::now() + self.cfg.timeout);
        exec.record_trace = false;
        exec.collect_edges = true;
        self.compiled.execute(g, &inputs, exec).result
    }
}

impl Target for Harness {
    fn execute(&self, bytes: &[u8]) -> Execution {
        let r = self.run(bytes);
        Execution {
            outcome: classify(&r),
            coverage: TraceCoverage {
                edges: r.edges.clone().unwrap_or_default(),
                accesses: r.covered.iter().map(|i| i.0).collect(),
            },
            steps: r.steps,
        }
    }
}

/// A corpus member or candidate input.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: u64,
    pub bytes: Vec<u8>,
    pub provenance: Provenance,
    /// Length of the provenance chain; seeds have depth 1.
    pub depth: u32,
    /// Children of this member that were admitted.
    pub new_events: u64,
    /// Children of this member that were executed.
    pub execs: u64,
}

impl TestCase {
    pub fn seed(id: u64, bytes: Vec<u8>) -> Self {
        TestCase {
            id,
            bytes,
            depth: 1,
            ..TestCase::default()
        }
    }

    /// Scheduling weight: 100 times the admission rate of its children,
    /// at least 1.
    pub fn energy(&self) -> f64 {
        (100.0 * self.new_events as f64 / self.execs.max(1) as f64).max(1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub key: DedupKey,
    pub detail: String,
    pub reproducer: TestCase,
    /// Execution count at which it was first seen.
    pub found_at: u64,
}

/// Re-executes a finding's reproducer and checks it triggers the same key.
pub fn reproduce<T: Target + ?Sized>(target: &T, f: &Finding) -> bool {
    matches!(target.execute(&f.reproducer.bytes).outcome, Outcome::Bug(b) if b.key == f.key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub seed: u64,
    pub budget_execs: u64,
    pub budget_time: Option<Duration>,
    pub workers: usize,
    /// Stop right after the first finding.
    pub stop_on_finding: bool,
    /// Candidates generated per scheduling round. Results are processed in
    /// generation order, so the outcome does not depend on `workers`.
    pub batch: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 0,
            budget_execs: 100_000,
            budget_time: None,
            workers: 1,
            stop_on_finding: false,
            batch: 32,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CampaignState {
    pub corpus: Vec<TestCase>,
    pub findings: Vec<Finding>,
    pub coverage: CoverageMap,
    pub execs: u64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub execs: u64,
    pub execs_per_sec: f64,
    pub corpus_size: usize,
    pub findings: usize,
    pub kernel_crashes: usize,
    pub host_crashes: usize,
    pub hangs: usize,
    pub max_depth: u32,
    pub edges: usize,
    pub elapsed_ms: u128,
}

impl CampaignStats {
    /// `name value` lines.
    pub fn lines(&self) -> String {
        format!(
            "execs {}\nexecs_per_sec {:.1}\ncorpus_size {}\nfindings {}\nkernel_crashes {}\nhost_crashes {}\nhangs {}\nmax_depth {}\nedges {}\nelapsed_ms {}\n",
            self.execs,
            self.execs_per_sec,
            self.corpus_size,
            self.findings,
            self.kernel_crashes,
            self.host_crashes,
            self.hangs,
            self.max_depth,
            self.edges,
            self.elapsed_ms
        )
    }
}

impl CampaignState {
    pub fn execs_per_sec(&self) -> f64 {
        self.execs as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }

    pub fn max_depth(&self) -> u32 {
        self.corpus
            .iter()
            .map(|c| c.depth)
            .chain(self.findings.iter().map(|f| f.reproducer.depth))
            .max()
            .unwrap_or(0)
    }

    pub fn finding_keys(&self) -> BTreeSet<DedupKey> {
        self.findings.iter().map(|f| f.key.clone()).collect()
    }

    pub fn stats(&self) -> CampaignStats {
        let count = |k| self.findings.iter().filter(|f| f.kind == k).count();
        CampaignStats {
            execs: self.execs,
            execs_per_sec: self.execs_per_sec(),
            corpus_size: self.corpus.len(),
            findings: self.findings.len(),
            kernel_crashes: count(FindingKind::KernelCrash),
            host_crashes: count(FindingKind::HostCrash),
            hangs: count(FindingKind::Hang),
            max_depth: self.max_depth(),
            edges: self.coverage.edges_hit(),
            elapsed_ms: self.elapsed.as_millis(),
        }
    }

    /// Writes `corpus/`, `findings/crashes/`, `findings/hangs/`,
    /// `findings/findings.jsonl` and `stats` under `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), FuzzError> {
        let corpus = dir.join("corpus");
        let crashes = dir.join("findings").join("crashes");
        let hangs = dir.join("findings").join("hangs");
        for d in [&corpus, &crashes, &hangs] {
            fs::create_dir_all(d)?;
        }
        for c in &self.corpus {
            fs::write(corpus.join(format!("id_{:06}", c.id)), &c.bytes)?;
        }
        let mut index = fs::File::create(dir.join("findings").join("findings.jsonl"))?;
        for (i, f) in self.findings.iter().enumerate() {
            let sub = if f.kind == FindingKind::Hang { &hangs } else { &crashes };
            let name = format!("id_{:06}_{}", i, f.key.slug());
            fs::write(sub.join(&name), &f.reproducer.bytes)?;
            let line = serde_json::json!({
                "file": name,
                "kind": f.kind,
                "site": f.key.site,
                "class": f.key.class,
                "detail": f.detail,
                "found_at": f.found_at,
                "depth": f.reproducer.depth,
                "provenance": f.reproducer.provenance,
            });
            writeln!(index, "{line}")?;
        }
        fs::write(dir.join("stats"), self.stats().lines())?;
        Ok(())
    }
}

/// A running campaign.
pub struct Campaign<'t, T: Target + ?Sized> {
    target: &'t T,
    cfg: CampaignConfig,
    rng: ChaCha8Rng,
    start: Instant,
    next_id: u64,
    pub state: CampaignState,
}

impl<'t, T: Target + ?Sized> Campaign<'t, T> {
    /// Executes the seeds and admits them all into the corpus.
    pub fn new(target: &'t T, seeds: &[Vec<u8>], cfg: CampaignConfig) -> Result<Self, FuzzError> {
        if seeds.is_empty() {
            return Err(FuzzError::NoSeeds);
        }
        let mut c = Campaign {
            target,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            start: Instant::now(),
            next_id: 0,
            state: CampaignState::default(),
        };
        for (i, s) in seeds.iter().enumerate() {
            let tc = TestCase::seed(c.next_id, s.clone());
            c.next_id += 1;
            let ex = target.execute(&tc.bytes);
            c.state.execs += 1;
            match ex.outcome {
                Outcome::SetupError(reason) => return Err(FuzzError::HarnessSetup { seed: i, reason }),
                Outcome::Bug(b) => c.record(b, tc.clone()),
                Outcome::Ok => {
                    c.state.coverage.merge_trace(&ex.coverage);
                }
            }
            c.state.corpus.push(tc);
        }
        c.state.elapsed = c.start.elapsed();
        Ok(c)
    }

    fn record(&mut self, b: Bug, tc: TestCase) {
        if self.state.findings.iter().any(|f| f.key == b.key) {
            return;
        }
        self.state.findings.push(Finding {
            kind: b.kind,
            key: b.key,
            detail: b.detail,
            reproducer: tc,
            found_at: self.state.execs,
        });
    }

    pub fn is_done(&self) -> bool {
        self.state.execs >= self.cfg.budget_execs
            || self.cfg.budget_time.is_some_and(|t| self.start.elapsed() >= t)
            || (self.cfg.stop_on_finding && !self.state.findings.is_empty())
    }

    fn pick(&mut self) -> usize {
        let total: f64 = self.state.corpus.iter().map(TestCase::energy).sum();
        let mut r = self.rng.gen::<f64>() * total;
        for (i, c) in self.state.corpus.iter().enumerate() {
            r -= c.energy();
            if r < 0.0 {
                return i;
            }
        }
        self.state.corpus.len() - 1
    }

    fn run_batch(&self, cands: &[TestCase]) -> Vec<Execution> {
        let workers = self.cfg.workers.max(1).min(cands.len().max(1));
        let chunk = cands.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = cands
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|c| self.target.execute(&c.bytes)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }

    /// Runs one scheduling round; returns false once the campaign is over.
    pub fn step(&mut self) -> bool {
        if self.is_done() {
            return false;
        }
        let n = (self.cfg.batch.max(1) as u64).min(self.cfg.budget_execs - self.state.execs) as usize;
        let mut parents = Vec::with_capacity(n);
        let mut cands = Vec::with_capacity(n);
        for _ in 0..n {
            let p = self.pick();
            cands.push(havoc(&self.state.corpus[p], &mut self.rng, &self.state.corpus));
            parents.push(p);
        }
        // A single worker executes lazily so an early stop skips the rest.
        let mut results = if self.cfg.workers > 1 {
            self.run_batch(&cands).into_iter().map(Some).collect()
        } else {
            vec![None; cands.len()]
        };
        for (k, (p, mut cand)) in parents.into_iter().zip(cands).enumerate() {
            let ex = match results[k].take() {
                Some(ex) => ex,
                None => self.target.execute(&cand.bytes),
            };
            self.state.execs += 1;
            self.state.corpus[p].execs += 1;
            match ex.outcome {
                Outcome::Bug(b) => {
                    cand.id = self.next_id;
                    self.next_id += 1;
                    self.record(b, cand);
                    if self.cfg.stop_on_finding {
                        break;
                    }
                }
                Outcome::Ok => {
                    if self.state.coverage.merge_trace(&ex.coverage) {
                        cand.id = self.next_id;
                        self.next_id += 1;
                        self.state.corpus[p].new_events += 1;
                        self.state.corpus.push(cand);
                    }
                }
                Outcome::SetupError(_) => {}
            }
        }
        self.state.elapsed = self.start.elapsed();
        !self.is_done()
    }

    pub fn run(mut self) -> CampaignState {
        while self.step() {}
        self.state.elapsed = self.start.elapsed();
        self.state
    }
}

/// Runs a whole campaign.
pub fn fuzz_loop<T: Target + ?Sized>(target: &T, seeds: &[Vec<u8>], cfg: CampaignConfig) -> Result<CampaignState, FuzzError> {
    Ok(Campaign::new(target, seeds, cfg)?.run())
}
