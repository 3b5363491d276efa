mod common;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::time::{Duration, Instant};

use spmdfuzz::affine::{analyze, corner_threads};
use spmdfuzz::axiprune::axiprune;
use spmdfuzz::exec::{Arg, ExecConfig, ExecResult, Inputs};
use spmdfuzz::fuzz::suite::seeded_suite;
use spmdfuzz::fuzz::{fuzz_loop, reproduce, CampaignConfig, HarnessConfig};
use spmdfuzz::gmsbench::{generate, score, validate_case, TABLE};
use spmdfuzz::kir::{parse_kernel, GridConfig, InstrId, Kernel, ScalarType};
use spmdfuzz::pact::{lower, lower_with_mode, run_lowered, LowerMode, Schedule};
use spmdfuzz::pipeline::bench;
use spmdfuzz::prex::{prex_execute, PrexOptions};
use spmdfuzz::refsim::run_reference;
use spmdfuzz::sanrt::{BugClass, DetectorMode};

use common::{affine_case, phased_case};

/// Writes the verdict line past the test harness's output capture.
fn verdict(id: u32, name: &str, ok: bool, detail: &str, t: Instant) {
    let line = format!(
        "criterion {id} {name}: {} ({detail}; {:.1}s)\n",
        if ok { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

#[test]
fn c1_boundary_threads_expose_every_affine_bug() {
    let t = Instant::now();
    let (mut runs, mut buggy, mut missed) = (0, 0, Vec::new());
    for seed in 0..1000 {
        let c = affine_case(seed);
        let s = analyze(&c.kernel);
        assert!(s.is_affine() && !s.is_guarded(), "seed {seed}");
        let corners: BTreeSet<_> = corner_threads(c.grid).into_iter().collect();
        for inp in &c.inputs {
            runs += 1;
            let bt = run_reference(&c.kernel, c.grid, inp).bug_threads();
            if !bt.is_empty() {
                buggy += 1;
                if bt.is_disjoint(&corners) {
                    missed.push(seed);
                }
            }
        }
    }
    let ok = missed.is_empty() && t.elapsed() < Duration::from_secs(120);
    verdict(1, "boundary-thread theorem", ok, &format!("1000 kernels, {runs} runs, {buggy} buggy, {} missed", missed.len()), t);
    assert!(ok, "missed seeds {missed:?}");
}

#[test]
fn c2_lowered_execution_refines_reference() {
    let t = Instant::now();
    let mut bad = Vec::new();
    for seed in 0..500u64 {
        let c = phased_case(seed, (seed % 4) as usize, 2);
        let s = analyze(&c.kernel);
        let p = lower_with_mode(&c.kernel, &s, LowerMode::Loops).unwrap();
        // The exposed-index form drops barriers, so only addresses must agree.
        let exposed = lower(&c.kernel, &s).unwrap();
        for inp in &c.inputs {
            let o = run_reference(&c.kernel, c.grid, inp);
            let l = run_lowered(&p, c.grid, inp, &Schedule::All);
            let e = run_lowered(&exposed, c.grid, inp, &Schedule::All);
            if o.memory != l.memory || o.original_accesses() != l.original_accesses() || l.error.is_some() {
                bad.push(seed);
            }
            if s.is_affine() && o.original_accesses() != e.original_accesses() {
                bad.push(seed);
            }
        }
    }
    let ok = bad.is_empty() && t.elapsed() < Duration::from_secs(300);
    verdict(2, "lowering refinement", ok, &format!("500 kernels with 0-3 barriers, {} mismatches", bad.len()), t);
    assert!(ok, "{bad:?}");
}

fn index_bugs(r: &ExecResult) -> BTreeSet<(u32, u32, InstrId, BugClass)> {
    r.bug_set()
        .into_iter()
        .filter(|(_, _, c)| matches!(c, BugClass::BO | BugClass::OOB_RW))
        .map(|(th, i, c)| (th.block, th.thread, i, c))
        .collect()
}

#[test]
fn c3_pruning_preserves_accesses_and_index_bugs() {
    let t = Instant::now();
    let (mut bad, mut pruned) = (Vec::new(), 0);
    for seed in 0..500u64 {
        let c = phased_case(seed, (seed % 4) as usize, 4);
        let (k2, rep) = axiprune(&c.kernel);
        pruned += !rep.is_empty() as u32;
        for inp in &c.inputs {
            let a = run_reference(&c.kernel, c.grid, inp);
            let b = run_reference(&k2, c.grid, inp);
            if a.original_accesses() != b.original_accesses() || index_bugs(&a) != index_bugs(&b) {
                bad.push(seed);
            }
        }
    }
    let ok = bad.is_empty();
    verdict(3, "pruning preservation", ok, &format!("500 kernels x 4 inputs, {pruned} pruned, {} mismatches", bad.len()), t);
    assert!(ok, "{bad:?}");
}

const EP: &str = "kernel ep(a: *global_host f32, o: *global_host f32)
    id = add (mul blockIdx.x blockDim.x) threadIdx.x
    x = load a[id]
    e = exp x
    store o[id] e";

const STAGED: &str = "kernel staged(a: *global_host f32, c: *global_host f32, n: i32)
    shared s: [blockDim.x] f32
    t = add (mul blockIdx.x blockDim.x) threadIdx.x
    x = load a[t]
    r = sqrt x
    store s[threadIdx.x] r
    barrier
    tr = sub n (add t 1)
    v = load s[threadIdx.x]
    e = exp x
    br (gt e 2.0) hot done
  hot:
    store c[tr] v
    jmp done
  done:
    return";

const SAXPY_SIN: &str = "kernel ss(a: *global_host f32, b: *global_host f32, o: *global_host f32, n: i32)
    id = add (mul blockIdx.x blockDim.x) threadIdx.x
    br (lt id n) body done
  body:
    x = load a[id]
    y = load b[id]
    ax = mul x 2.5
    s = add ax y
    q = sin s
    d = sub s 1.0
    m = mul d d
    r = add m q
    store o[id] r
    jmp done
  done:
    return";

const POLY: &str = "kernel poly(a: *global_host f32, o: *global_host f32)
    id = add (mul blockIdx.x blockDim.x) threadIdx.x
    x = load a[id]
    x2 = mul x x
    x3 = mul x2 x
    p1 = mul x3 0.5
    p2 = add p1 x2
    p3 = sub p2 x
    p4 = add p3 1.0
    c = cos x
    r = add p4 c
    store o[id] r";

fn f32_inputs(bufs: usize, len: usize, scalars: &[i64]) -> Inputs {
    let mut v: Vec<Arg> = (0..bufs)
        .map(|i| Arg::Buffer((0..len).flat_map(|j| (((i + j) % 7) as f32 * 0.25).to_le_bytes()).collect()))
        .collect();
    v.extend(scalars.iter().map(|&s| Arg::Int(s)));
    Inputs::new(v)
}

fn steps(k: &Kernel, g: GridConfig, inp: &Inputs) -> u64 {
    run_reference(k, g, inp).steps
}

#[test]
fn c4_pruning_reduces_work() {
    let t = Instant::now();
    let g = GridConfig::new(4, 32);
    let n = 128;
    let suite: [(&str, &str, Inputs); 4] = [
        ("ep", EP, f32_inputs(2, n, &[])),
        ("staged", STAGED, f32_inputs(2, n, &[n as i64])),
        ("saxpy_sin", SAXPY_SIN, f32_inputs(3, n, &[n as i64])),
        ("poly", POLY, f32_inputs(2, n, &[])),
    ];
    let mut reductions = Vec::new();
    let mut detail = String::new();
    for (name, src, inp) in &suite {
        let k = parse_kernel(src).unwrap();
        let (p, _) = axiprune(&k);
        let (before, after) = (steps(&k, g, inp), steps(&p, g, inp));
        let red = 1.0 - after as f64 / before as f64;
        detail.push_str(&format!("{name} {:.0}%, ", red * 100.0));
        reductions.push(red);
    }
    let mean = reductions.iter().sum::<f64>() / reductions.len() as f64;
    let staged = parse_kernel(STAGED).unwrap();
    let phases_before = lower(&staged, &analyze(&staged)).unwrap().phases.len();
    let staged_pruned = axiprune(&staged).0;
    let phases_after = lower(&staged_pruned, &analyze(&staged_pruned)).unwrap().phases.len();
    let ok = reductions[0] >= 0.20 && (0.15..=0.60).contains(&mean) && phases_before == 2 && phases_after == 1;
    detail.push_str(&format!("mean {:.0}%, staged phases {phases_before}->{phases_after}", mean * 100.0));
    verdict(4, "pruning cost reduction", ok, &detail, t);
    assert!(ok, "{detail}");
}

#[test]
fn c5_partial_execution_work_bound() {
    let t = Instant::now();
    let affine = parse_kernel(
        "kernel scale(a: *global_host f32, o: *global_host f32)
           id = add (mul blockIdx.x blockDim.x) threadIdx.x
           x = load a[id]
           y = mul x 2.0
           store o[id] y",
    )
    .unwrap();
    let indirect = parse_kernel(
        "kernel gather(idx: *global_host i32, a: *global_host f32, o: *global_host f32)
           id = add (mul blockIdx.x blockDim.x) threadIdx.x
           i = load idx[id]
           x = load a[i]
           store o[id] x",
    )
    .unwrap();
    let heavy = parse_kernel(
        "kernel heavy(a: *global_host f32, o: *global_host f32)
           id = add (mul blockIdx.x blockDim.x) threadIdx.x
           x = load a[id]
           e1 = exp x
           e2 = sin e1
           e3 = cos e2
           e4 = sqrt e3
           e5 = exp e4
           e6 = sin e5
           e7 = cos e6
           e8 = exp e7
           store o[id] e8",
    )
    .unwrap();
    let exec = ExecConfig::reference();

    let g = GridConfig::new(128, 64);
    let n = 128 * 64;
    let rows = bench(&affine, g, &f32_inputs(2, n, &[]), exec, 1).unwrap();
    let prex = &rows[1];
    let affine_ok = prex.thread_instances == 4 && prex.blocks_executed <= 2 && prex.step_ratio >= 32.0;

    let perm: Vec<u8> = (0..n as i32).flat_map(|i| ((i * 37) % n as i32).to_le_bytes()).collect();
    let gather_in = Inputs::new(vec![Arg::Buffer(perm), Arg::zeros(ScalarType::F32, n), Arg::zeros(ScalarType::F32, n)]);
    let rows_ind = bench(&indirect, g, &gather_in, exec, 1).unwrap();
    let ind_ratio = rows_ind[1].step_ratio;
    let indirect_ok = (0.95..=1.05).contains(&ind_ratio);

    let gb = GridConfig::new(512, 64);
    let rows_heavy = bench(&heavy, gb, &f32_inputs(2, 512 * 64, &[]), exec, 1).unwrap();
    let best = rows_heavy[2].step_ratio;
    let heavy_ok = best >= 150.0;

    let ok = affine_ok && indirect_ok && heavy_ok;
    verdict(
        5,
        "partial execution work bound",
        ok,
        &format!(
            "affine: {} thread instances, {} blocks, ratio {:.0}x; indirect ratio {:.3}; best case prex+prune {:.0}x",
            prex.thread_instances, prex.blocks_executed, prex.step_ratio, ind_ratio, best
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn c6_memory_safety_matrix() {
    let t = Instant::now();
    let cases = generate(0);
    let counts_ok = cases.len() == 100
        && TABLE
            .iter()
            .all(|row| cases.iter().filter(|c| c.desc.row() == row.key).count() as u32 == row.count);
    let oracle_ok = cases.iter().all(|c| validate_case(c).is_ok());
    let ex = score(DetectorMode::Exact, &cases);
    let rz = score(DetectorMode::Redzone, &cases);
    let pattern_ok = ex.mismatches.is_empty() && rz.mismatches.is_empty();
    let twins_ok = ex.false_positives.is_empty() && rz.false_positives.is_empty();
    let ok = counts_ok
        && oracle_ok
        && pattern_ok
        && twins_ok
        && ex.detected >= 91
        && (44..=52).contains(&rz.detected)
        && t.elapsed() < Duration::from_secs(600);
    verdict(
        6,
        "memory-safety matrix",
        ok,
        &format!(
            "exact {}/100, redzone {}/100, pattern mismatches {}, twin reports {}",
            ex.detected,
            rz.detected,
            ex.mismatches.len() + rz.mismatches.len(),
            ex.false_positives.len() + rz.false_positives.len()
        ),
        t,
    );
    assert!(ok, "{}\n{}", ex.text(), rz.text());
}

#[test]
fn c7_fuzzer_finds_seeded_bugs() {
    let t = Instant::now();
    let suite = seeded_suite();
    let harnesses: Vec<_> = suite.iter().map(|c| c.harness(HarnessConfig::default()).unwrap()).collect();
    let (mut hits, mut worst, mut dedup_ok, mut repro_ok) = (0, usize::MAX, true, true);
    for seed in 0..20 {
        let mut found = 0;
        for (case, h) in suite.iter().zip(&harnesses) {
            let cfg = CampaignConfig {
                seed,
                budget_execs: 100_000,
                stop_on_finding: true,
                ..CampaignConfig::default()
            };
            let st = fuzz_loop(h, &[case.seed()], cfg).unwrap();
            let keys = st.finding_keys();
            dedup_ok &= keys.len() == st.findings.len();
            if keys.contains(&case.expected) {
                found += 1;
            }
            repro_ok &= st.findings.iter().all(|f| reproduce(h, f));
        }
        hits += found;
        worst = worst.min(found);
    }
    let rate = hits as f64 / 200.0;
    let ok = worst >= 9 && rate >= 0.95 && dedup_ok && repro_ok;
    verdict(
        7,
        "fuzzer discovery",
        ok,
        &format!("{hits}/200 found, worst seed {worst}/10, dedup {dedup_ok}, reproducible {repro_ok}"),
        t,
    );
    assert!(ok);
}

/// Head/tail schedule written out directly: run the head and tail blocks,
/// stop once a bug was seen or every access instruction has run.
fn alg1_iterations(block_cover: &[BTreeSet<InstrId>], block_bug: &[bool], accesses: &BTreeSet<InstrId>) -> u32 {
    let (mut head, mut tail) = (0i64, block_cover.len() as i64 - 1);
    let mut covered = BTreeSet::new();
    let (mut found, mut iters) = (false, 0);
    while head <= tail {
        iters += 1;
        for j in [head, tail] {
            covered.extend(block_cover[j as usize].iter().copied());
            found |= block_bug[j as usize];
        }
        if found || accesses.is_subset(&covered) {
            break;
        }
        head += 1;
        tail -= 1;
    }
    iters
}

#[test]
fn c8_head_tail_schedule_matches_direct_transcription() {
    let t = Instant::now();
    let k = parse_kernel(
        "kernel window(c: *global_host i32, lo: i32, n: i32)
           id = add (mul blockIdx.x blockDim.x) threadIdx.x
           br (and (ge id lo) (lt id n)) body done
         body:
           store c[id] 1
           jmp done
         done:
           return",
    )
    .unwrap();
    let s = analyze(&k);
    assert!(s.is_affine() && s.is_guarded());
    let p = lower(&k, &s).unwrap();
    let accesses: BTreeSet<InstrId> = k.memory_access_ids().into_iter().collect();
    let (mut checked, mut bad) = (0, Vec::new());
    for b in 1..=16u32 {
        for thr in [1u32, 8, 32] {
            for kb in 0..b {
                let g = GridConfig::new(b, thr);
                let lo = (kb * thr) as i64;
                let inp = Inputs::new(vec![Arg::zeros(ScalarType::I32, lo as usize), Arg::Int(lo), Arg::Int(lo + thr as i64)]);
                let full = run_reference(&k, g, &inp);
                let mut cover = vec![BTreeSet::new(); b as usize];
                let mut bug = vec![false; b as usize];
                for r in &full.trace {
                    cover[r.thread.block as usize].insert(r.instr_id);
                }
                for r in &full.reports {
                    cover[r.access.thread.block as usize].insert(r.access.instr_id);
                    bug[r.access.thread.block as usize] = true;
                }
                let want = alg1_iterations(&cover, &bug, &accesses);
                let got = prex_execute(&p, g, &inp, &PrexOptions::default());
                checked += 1;
                if got.stats.iterations != want || want != (kb + 1).min(b - kb) || !got.has_bug() {
                    bad.push((b, thr, kb, got.stats.iterations, want));
                }
            }
        }
    }
    let ok = bad.is_empty();
    verdict(8, "head/tail schedule conformance", ok, &format!("{checked} placements, {} disagreements", bad.len()), t);
    assert!(ok, "{bad:?}");
}
