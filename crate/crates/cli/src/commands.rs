//! Subcommand implementations. Each returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use spmdfuzz::affine::AffineStatus;
use spmdfuzz::exec::{Arg, ExecConfig, ExecError, Inputs};
use spmdfuzz::fuzz::{fuzz_loop, CampaignConfig, GridSpec, Harness, HarnessConfig, InputLayout, Slot};
use spmdfuzz::gmsbench;
use spmdfuzz::kir::{parse_kernel, GridConfig, Kernel};
use spmdfuzz::pipeline::{self, PipelineOptions};
use spmdfuzz::sanrt::{DetectorMode, Policy};

use crate::config::{self, Settings};
use crate::{Cli, CliError, Command, EXIT_BUG};

pub fn dispatch(cli: Cli) -> Result<u8, CliError> {
    let file = match &cli.config {
        Some(p) => config::load(p)?,
        None => Default::default(),
    };
    let s = Settings::resolve(&file, &cli.flags.pairs())?;
    match cli.cmd {
        Command::Compile {
            kernel,
            dump_affine,
            emit_lowered,
            dump_prune_report,
        } => compile(&s, &kernel, dump_affine, emit_lowered, dump_prune_report),
        Command::Run { kernel, input, min_elems } => run(&s, &kernel, input.as_deref(), &min_elems),
        Command::Fuzz {
            kernel,
            seed_input,
            min_elems,
            grid_param,
        } => fuzz(&s, &kernel, &seed_input, &min_elems, grid_param),
        Command::Bench { kernel, input, min_elems } => bench(&s, &kernel, input.as_deref(), &min_elems),
        Command::Gms => gms(&s),
    }
}

fn read_kernel(path: &Path) -> Result<Kernel, CliError> {
    let src = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(parse_kernel(&src)?)
}

fn options(s: &Settings) -> PipelineOptions {
    PipelineOptions {
        prex: s.prex,
        axiprune: s.axiprune,
    }
}

fn grid(s: &Settings) -> Result<GridConfig, CliError> {
    let g = GridConfig::new(s.blocks, s.threads).with_dyn_shared(s.dyn_shared);
    g.check()?;
    Ok(g)
}

fn out_dir(s: &Settings, default: &str) -> PathBuf {
    s.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn layout(k: &Kernel, min_elems: &[String]) -> Result<InputLayout, CliError> {
    let mut l = InputLayout::for_kernel(k);
    for spec in min_elems {
        let (name, n) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--min-elems expects NAME=ELEMS, got {spec}")))?;
        let n: u32 = n.parse().map_err(|_| CliError::Usage(format!("--min-elems: invalid count {n}")))?;
        if !l.names.iter().any(|x| x == name) {
            return Err(CliError::Usage(format!("--min-elems: kernel has no parameter {name}")));
        }
        l = l.with_min_elems(name, n);
    }
    Ok(l)
}

/// Integer scalars equal to the thread count and zero-filled buffers of
/// one element per thread.
fn default_inputs(l: &InputLayout, g: GridConfig) -> Inputs {
    let n = g.total_threads();
    let mut inputs = l.decode(&[]);
    for (slot, arg) in l.slots.iter().zip(inputs.args.iter_mut()) {
        match (slot, arg) {
            (Slot::Scalar(t), a) if !t.is_float() => *a = Arg::Int(n as i64),
            (Slot::Buffer { elem, .. }, Arg::Buffer(b)) => {
                let len = b.len().max(n as usize * elem.size() as usize);
                b.resize(len, 0);
            }
            _ => {}
        }
    }
    inputs
}

fn read_inputs(l: &InputLayout, g: GridConfig, path: Option<&Path>) -> Result<Inputs, CliError> {
    match path {
        Some(p) => Ok(l.decode(&fs::read(p)?)),
        None => Ok(default_inputs(l, g)),
    }
}

fn compile(s: &Settings, path: &Path, dump_affine: bool, emit_lowered: bool, dump_prune: bool) -> Result<u8, CliError> {
    let k = read_kernel(path)?;
    let c = pipeline::compile(&k, options(s))?;
    if let AffineStatus::NonAffine { reasons } = &c.summary.status {
        if s.prex {
            let why: Vec<String> = reasons.iter().map(|(i, c)| format!("@{i} {}", c.name())).collect();
            eprintln!("warning: kernel {} is not affine ({}); PREX falls back to plan=all", k.name, why.join(", "));
        }
    }
    let lowered = c.lowered.print();
    let affine = c.summary.dump();
    let prune = match &c.prune_report {
        Some(r) => r.dump(),
        None => "axiprune disabled\n".to_string(),
    };
    let dir = out_dir(s, "spmdfuzz-out");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("lowered.kir"), &lowered)?;
    fs::write(dir.join("affine.txt"), &affine)?;
    fs::write(dir.join("prune.txt"), &prune)?;
    if emit_lowered {
        print!("{lowered}");
    }
    if dump_affine {
        print!("{affine}");
    }
    if dump_prune {
        print!("{prune}");
    }
    Ok(0)
}

fn run(s: &Settings, path: &Path, input: Option<&Path>, min_elems: &[String]) -> Result<u8, CliError> {
    let k = read_kernel(path)?;
    let g = grid(s)?;
    let l = layout(&k, min_elems)?;
    let inputs = read_inputs(&l, g, input)?;
    let c = pipeline::compile(&k, options(s))?;
    let mut exec = ExecConfig::new(s.mode, Policy::Audit);
    exec.deadline = Some(Instant::now() + s.timeout);
    exec.record_trace = false;
    let out = c.execute(g, &inputs, exec);
    for r in &out.result.reports {
        if s.jsonl {
            println!("{}", r.to_json_line());
        } else {
            println!("{}: {}", r.class, r.access.line());
        }
    }
    let error = out.result.error.as_ref();
    if s.jsonl {
        println!(
            "{}",
            json!({"stats": out.stats, "error": error.map(|e| e.to_string())})
        );
    } else {
        println!("{}", out.stats.line());
        if let Some(e) = error {
            println!("error: {e}");
        }
    }
    match error {
        Some(ExecError::InvalidConfiguration(e)) => Err(CliError::Grid(e.clone())),
        Some(ExecError::BadInputs(m)) => Err(CliError::Validation(m.clone())),
        Some(ExecError::Internal(m)) => Err(CliError::Internal(m.clone())),
        Some(_) => Ok(EXIT_BUG),
        None if out.has_bug() => Ok(EXIT_BUG),
        None => Ok(0),
    }
}

fn fuzz(s: &Settings, path: &Path, seeds: &[PathBuf], min_elems: &[String], grid_param: Option<String>) -> Result<u8, CliError> {
    let k = read_kernel(path)?;
    let g = grid(s)?;
    let l = layout(&k, min_elems)?;
    let spec = match grid_param {
        Some(param) => {
            if !l.names.contains(&param) {
                return Err(CliError::Usage(format!("--grid-param: kernel has no parameter {param}")));
            }
            GridSpec::CeilDiv {
                param,
                threads: s.threads,
                dyn_shared_bytes: s.dyn_shared,
            }
        }
        None => GridSpec::Fixed(g),
    };
    let mut blobs = Vec::new();
    for p in seeds {
        blobs.push(fs::read(p)?);
    }
    if blobs.is_empty() {
        blobs.push(l.encode(&default_inputs(&l, g)));
    }
    let cfg = HarnessConfig {
        mode: s.mode,
        timeout: s.timeout,
        max_blocks: s.max_blocks,
        pipeline: options(s),
        ..HarnessConfig::default()
    };
    let h = Harness::new(&k, l, spec, cfg)?;
    let campaign = CampaignConfig {
        seed: s.seed,
        budget_execs: s.budget,
        budget_time: s.time,
        workers: s.workers.max(1),
        ..CampaignConfig::default()
    };
    let state = fuzz_loop(&h, &blobs, campaign)?;
    state.write_dir(&out_dir(s, "campaign"))?;
    let stats = state.stats();
    if s.jsonl {
        println!("{}", json!({ "stats": stats }));
        for f in &state.findings {
            println!(
                "{}",
                json!({"kind": f.kind.name(), "key": f.key.to_string(), "detail": f.detail, "found_at": f.found_at})
            );
        }
    } else {
        print!("{}", stats.lines());
        for f in &state.findings {
            println!("finding {} {} at exec {}: {}", f.kind.name(), f.key, f.found_at, f.detail);
        }
    }
    Ok(if state.findings.is_empty() { 0 } else { EXIT_BUG })
}

fn bench(s: &Settings, path: &Path, input: Option<&Path>, min_elems: &[String]) -> Result<u8, CliError> {
    let k = read_kernel(path)?;
    let g = grid(s)?;
    let l = layout(&k, min_elems)?;
    let inputs = read_inputs(&l, g, input)?;
    let mut exec = ExecConfig::new(s.mode, Policy::Audit);
    exec.record_trace = false;
    for row in pipeline::bench(&k, g, &inputs, exec, s.reps)? {
        if s.jsonl {
            println!("{}", serde_json::to_string(&row).map_err(|e| CliError::Internal(e.to_string()))?);
        } else {
            println!("{}", row.line());
        }
    }
    Ok(0)
}

fn gms(s: &Settings) -> Result<u8, CliError> {
    let cases = gmsbench::generate(s.seed);
    let matrices: Vec<gmsbench::Matrix> = [DetectorMode::Redzone, DetectorMode::Exact]
        .into_iter()
        .map(|m| gmsbench::score(m, &cases))
        .collect();
    for m in &matrices {
        if s.jsonl {
            println!("{}", serde_json::to_string(m).map_err(|e| CliError::Internal(e.to_string()))?);
        } else {
            print!("{}", m.text());
            println!("mismatches {}\nfalse_positives {}\n", m.mismatches.len(), m.false_positives.len());
        }
    }
    if let Some(dir) = &s.out {
        gmsbench::emit(dir, &cases)?;
        let text = serde_json::to_string_pretty(&matrices).map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(dir.join("matrix.json"), text + "\n")?;
    }
    Ok(0)
}
