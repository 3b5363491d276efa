use std::time::{Duration, Instant};

use spmdfuzz::fuzz::suite::seeded_suite;
use spmdfuzz::fuzz::{
    fuzz_loop, reproduce, Campaign, CampaignConfig, DedupKey, Execution, FindingKind, FuzzError, GridSpec, Harness,
    HarnessConfig, InputLayout, Outcome, Target, TraceCoverage,
};
use spmdfuzz::kir::{parse_kernel, GridConfig};
use spmdfuzz::sanrt::BugClass;

fn index_harness() -> Harness {
    let k = parse_kernel("kernel idx(c: *global_host i32, x: i32)\n store c[x] 1").unwrap();
    let layout = InputLayout::for_kernel(&k).with_min_elems("c", 16);
    Harness::new(&k, layout, GridSpec::Fixed(GridConfig::new(1, 1)), HarnessConfig::default()).unwrap()
}

fn index_seed() -> Vec<u8> {
    let mut b = 0i32.to_le_bytes().to_vec();
    b.extend_from_slice(&0u32.to_le_bytes());
    b
}

#[test]
fn input_controlled_index_is_found_for_every_seed() {
    let h = index_harness();
    let expected = DedupKey::for_report(0, BugClass::BO);
    for seed in 0..20 {
        let cfg = CampaignConfig {
            seed,
            budget_execs: 100_000,
            stop_on_finding: true,
            ..CampaignConfig::default()
        };
        let st = fuzz_loop(&h, &[index_seed()], cfg).unwrap();
        assert_eq!(st.finding_keys().into_iter().collect::<Vec<_>>(), vec![expected.clone()], "seed {seed}");
        assert_eq!(st.findings[0].kind, FindingKind::KernelCrash);
    }
}

#[test]
fn crashes_at_one_site_collapse_to_one_finding() {
    let h = index_harness();
    let cfg = CampaignConfig {
        seed: 7,
        budget_execs: 3_000,
        ..CampaignConfig::default()
    };
    let st = fuzz_loop(&h, &[index_seed()], cfg).unwrap();
    assert_eq!(st.execs, 3_000);
    assert_eq!(st.findings.len(), 1);
    for f in &st.findings {
        assert!(reproduce(&h, f));
    }
}

#[test]
fn crash_free_constant_kernel_keeps_seed_corpus() {
    let k = parse_kernel("kernel konst(c: *global_host i32)\n store c[0] 1").unwrap();
    let layout = InputLayout::for_kernel(&k).with_min_elems("c", 1);
    let h = Harness::new(&k, layout, GridSpec::Fixed(GridConfig::new(2, 2)), HarnessConfig::default()).unwrap();
    let cfg = CampaignConfig {
        budget_execs: 2_000,
        ..CampaignConfig::default()
    };
    let st = fuzz_loop(&h, &[vec![0, 0, 0, 0]], cfg).unwrap();
    assert!(st.findings.is_empty());
    assert_eq!(st.corpus.len(), 1);
}

#[test]
fn coverage_never_shrinks() {
    let case = seeded_suite().into_iter().find(|c| c.name == "guarded_bound").unwrap();
    let h = case.harness(HarnessConfig::default()).unwrap();
    let cfg = CampaignConfig {
        seed: 3,
        budget_execs: 2_000,
        batch: 16,
        ..CampaignConfig::default()
    };
    let mut c = Campaign::new(&h, &[case.seed()], cfg).unwrap();
    let mut prev = c.state.coverage.clone();
    while c.step() {
        assert!(prev.is_subset(&c.state.coverage));
        assert!(prev.nonzero_buckets() <= c.state.coverage.nonzero_buckets());
        prev = c.state.coverage.clone();
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let case = seeded_suite().into_iter().find(|c| c.name == "use_after_free").unwrap();
    let h = case.harness(HarnessConfig::default()).unwrap();
    let run = |workers| {
        let cfg = CampaignConfig {
            seed: 11,
            budget_execs: 1_500,
            workers,
            ..CampaignConfig::default()
        };
        fuzz_loop(&h, &[case.seed()], cfg).unwrap()
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.corpus, b.corpus);
    assert_eq!(a.findings, b.findings);
    assert_eq!(a.coverage, b.coverage);
}

#[test]
fn reported_throughput_matches_stopwatch() {
    let h = index_harness();
    let cfg = CampaignConfig {
        budget_execs: u64::MAX,
        budget_time: Some(Duration::from_millis(1500)),
        ..CampaignConfig::default()
    };
    let t = Instant::now();
    let st = fuzz_loop(&h, &[index_seed()], cfg).unwrap();
    let wall = t.elapsed().as_secs_f64();
    let external = st.execs as f64 / wall;
    let rel = (st.execs_per_sec() - external).abs() / external;
    assert!(rel <= 0.05, "reported {} vs {}", st.execs_per_sec(), external);
}

struct Broken;

impl Target for Broken {
    fn execute(&self, _: &[u8]) -> Execution {
        Execution {
            outcome: Outcome::SetupError("no device".into()),
            coverage: TraceCoverage::default(),
            steps: 0,
        }
    }
}

#[test]
fn failing_seed_is_a_setup_error() {
    let e = fuzz_loop(&Broken, &[vec![1]], CampaignConfig::default()).err().unwrap();
    assert!(matches!(e, FuzzError::HarnessSetup { seed: 0, .. }));
    assert!(matches!(fuzz_loop(&Broken, &[], CampaignConfig::default()), Err(FuzzError::NoSeeds)));
}

#[test]
fn zero_grid_is_a_host_crash_not_a_panic() {
    let case = seeded_suite().into_iter().find(|c| c.name == "zero_grid").unwrap();
    let h = case.harness(HarnessConfig::default()).unwrap();
    match h.execute(&[0u8; 8]).outcome {
        Outcome::Bug(b) => {
            assert_eq!(b.kind, FindingKind::HostCrash);
            assert_eq!(b.key, DedupKey::new("launch", "invalid_configuration"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn campaign_directory_layout() {
    let h = index_harness();
    let cfg = CampaignConfig {
        budget_execs: 500,
        ..CampaignConfig::default()
    };
    let st = fuzz_loop(&h, &[index_seed()], cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    st.write_dir(dir.path()).unwrap();
    assert!(dir.path().join("corpus").join("id_000000").is_file());
    assert!(dir.path().join("findings").join("hangs").is_dir());
    let crashes: Vec<_> = std::fs::read_dir(dir.path().join("findings").join("crashes")).unwrap().collect();
    assert_eq!(crashes.len(), st.findings.len());
    let stats = std::fs::read_to_string(dir.path().join("stats")).unwrap();
    for key in ["execs ", "execs_per_sec ", "corpus_size ", "findings ", "max_depth "] {
        assert!(stats.lines().any(|l| l.starts_with(key)), "{key}");
    }
}
