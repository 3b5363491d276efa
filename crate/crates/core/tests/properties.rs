mod common;

use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::Rng;
use spmdfuzz::affine::{analyze, corner_threads, Bindings};
use spmdfuzz::axiprune::axiprune;
use spmdfuzz::exec::{ExecConfig, ExecResult};
use spmdfuzz::fuzz::{CoverageMap, TraceCoverage};
use spmdfuzz::gmsbench::{generate, run_program};
use spmdfuzz::kir::{parse_kernel, print_kernel};
use spmdfuzz::pact::{lower, lower_with_mode, run_lowered, LowerMode, Schedule};
use spmdfuzz::prex::{prex_execute, PrexOptions};
use spmdfuzz::refsim::run_reference;
use spmdfuzz::sanrt::{BugClass, DetectorMode, Policy};

use common::{affine_case, concrete_indices, phased_case};

fn index_bugs(r: &ExecResult) -> BTreeSet<String> {
    r.bug_set()
        .into_iter()
        .filter(|(_, _, c)| matches!(c, BugClass::BO | BugClass::OOB_RW))
        .map(|b| format!("{b:?}"))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn printed_kernels_parse_back_identically(seed in any::<u64>(), barriers in 0usize..=3) {
        for k in [affine_case(seed).kernel, phased_case(seed, barriers, 0).kernel] {
            let text = print_kernel(&k);
            let again = parse_kernel(&text).unwrap();
            prop_assert_eq!(&again, &k);
            prop_assert_eq!(print_kernel(&again), text);
        }
    }

    #[test]
    fn rejection_is_stable(seed in any::<u64>(), cut in any::<prop::sample::Index>(), junk in "[ @:\\[\\](a-z0-9]{1,3}") {
        let src = phased_case(seed, 1, 0).source;
        let at = cut.index(src.len());
        let broken = format!("{}{}{}", &src[..at], junk, &src[at..]);
        let a = parse_kernel(&broken).err();
        let b = parse_kernel(&broken).err();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn affine_rows_evaluate_like_the_index(seed in any::<u64>()) {
        let c = affine_case(seed);
        let s = analyze(&c.kernel);
        prop_assert!(s.is_affine() && !s.is_guarded(), "{}", s.dump());
        let accesses = c.kernel.memory_access_ids().len();
        prop_assert!(!s.rows().is_empty() && s.rows().len() <= accesses);
        let mut r = common::rng(seed ^ 0x5eed);
        for row in s.rows() {
            for _ in 0..1000 {
                let (tid, bid) = (r.gen_range(-64..64i64), r.gen_range(-64..64i64));
                let (bdim, gdim, p) = (r.gen_range(1..64i64), r.gen_range(1..64i64), r.gen_range(-100..100i64));
                let params: HashMap<String, i64> = [("p".to_string(), p)].into();
                let b = Bindings { params: params.clone().into_iter().collect(), block_dim: bdim, grid_dim: gdim };
                let want = concrete_indices(&c.kernel, &params, tid, bid, bdim, gdim);
                let got = row.eval(tid, bid, &b);
                for id in &row.instr_ids {
                    let w = want.iter().find(|(i, _)| *i == id.0).unwrap().1;
                    prop_assert_eq!(got, w, "row {} instr {}", row.eval(0, 0, &b), id);
                }
            }
        }
    }

    #[test]
    fn reference_runs_are_deterministic(seed in any::<u64>(), barriers in 0usize..=3) {
        let c = phased_case(seed, barriers, 1);
        let a = run_reference(&c.kernel, c.grid, &c.inputs[0]);
        let b = run_reference(&c.kernel, c.grid, &c.inputs[0]);
        prop_assert_eq!(a.trace_text(), b.trace_text());
        prop_assert_eq!(a.bug_set(), b.bug_set());
        prop_assert_eq!(a.memory, b.memory);
    }

    #[test]
    fn lowering_refines_the_reference(seed in any::<u64>(), barriers in 0usize..=3) {
        let c = phased_case(seed, barriers, 2);
        let s = analyze(&c.kernel);
        let p = lower_with_mode(&c.kernel, &s, LowerMode::Loops).unwrap();
        prop_assert_eq!(p.phases.len(), barriers + 1);
        let exposed = lower(&c.kernel, &s).unwrap();
        for inp in &c.inputs {
            let o = run_reference(&c.kernel, c.grid, inp);
            let l = run_lowered(&p, c.grid, inp, &Schedule::All);
            prop_assert!(o.error.is_none() && l.error.is_none());
            prop_assert_eq!(&l.memory, &o.memory, "{}", c.source);
            prop_assert_eq!(l.original_accesses(), o.original_accesses());
            if s.is_affine() {
                let e = run_lowered(&exposed, c.grid, inp, &Schedule::All);
                prop_assert_eq!(e.original_accesses(), o.original_accesses());
            }
        }
    }

    #[test]
    fn pruning_preserves_addresses_and_index_bugs(seed in any::<u64>(), barriers in 0usize..=3) {
        let c = phased_case(seed, barriers, 4);
        let (pruned, _) = axiprune(&c.kernel);
        for inp in &c.inputs {
            let o = run_reference(&c.kernel, c.grid, inp);
            let q = run_reference(&pruned, c.grid, inp);
            prop_assert_eq!(o.original_accesses(), q.original_accesses(), "{}", c.source);
            prop_assert_eq!(index_bugs(&o), index_bugs(&q));
            prop_assert!(q.steps <= o.steps);
        }
    }

    #[test]
    fn partial_execution_finds_bugs_iff_reference_does(seed in any::<u64>()) {
        let c = affine_case(seed);
        let p = lower(&c.kernel, &analyze(&c.kernel)).unwrap();
        for inp in &c.inputs {
            let full = run_reference(&c.kernel, c.grid, inp);
            let a = prex_execute(&p, c.grid, inp, &PrexOptions::default());
            let b = prex_execute(&p, c.grid, inp, &PrexOptions::default());
            prop_assert_eq!(a.has_bug(), !full.reports.is_empty());
            prop_assert!(a.stats.blocks_executed <= c.grid.blocks.min(2));
            prop_assert_eq!(a.stats.thread_instances, corner_threads(c.grid).len() as u64);
            prop_assert_eq!(&a.stats, &b.stats);
        }
    }

    #[test]
    fn coverage_merge_is_a_semilattice(xs in prop::collection::vec((0usize..64, any::<u8>()), 0..16),
                                       ys in prop::collection::vec((0usize..64, any::<u8>()), 0..16),
                                       zs in prop::collection::vec((0usize..64, any::<u8>()), 0..16)) {
        let map = |v: &[(usize, u8)]| {
            let mut edges = vec![0u8; spmdfuzz::exec::MAP_SIZE];
            for &(i, c) in v {
                edges[i] = c;
            }
            CoverageMap::from_trace(&TraceCoverage { edges: edges.into_boxed_slice(), accesses: v.iter().map(|p| p.0 as u32).collect() })
        };
        let (a, b, c) = (map(&xs), map(&ys), map(&zs));
        let join = |x: &CoverageMap, y: &CoverageMap| { let mut m = x.clone(); m.merge(y); m };
        prop_assert_eq!(join(&a, &b), join(&b, &a));
        prop_assert_eq!(join(&join(&a, &b), &c), join(&a, &join(&b, &c)));
        prop_assert_eq!(join(&a, &a), a.clone());
    }
}

#[test]
fn redzone_spatial_reports_are_a_subset_of_exact() {
    let spatial = |r: &ExecResult| -> BTreeSet<_> {
        r.reports
            .iter()
            .filter(|x| matches!(x.class, BugClass::BO | BugClass::OOB_RW))
            .map(|x| (x.access.thread, x.access.instr_id, x.access.byte_addr))
            .collect()
    };
    for c in generate(9) {
        let rz = spatial(&run_program(&c.buggy, DetectorMode::Redzone));
        let ex = spatial(&run_program(&c.buggy, DetectorMode::Exact));
        assert!(rz.is_subset(&ex), "{}", c.desc.id);
    }
    for seed in 0..200 {
        let c = phased_case(seed, 2, 1);
        let run = |mode| {
            let p = lower(&c.kernel, &analyze(&c.kernel)).unwrap();
            spmdfuzz::pact::run_lowered_with(&p, c.grid, &c.inputs[0], &Schedule::All, ExecConfig::new(mode, Policy::Audit))
        };
        assert!(spatial(&run(DetectorMode::Redzone)).is_subset(&spatial(&run(DetectorMode::Exact))));
    }
}
