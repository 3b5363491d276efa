//! Reference interpreter: executes the original kernel with explicit
//! threads and barriers under the reference detector. Its bug set is the
//! ground truth the fuzzing pipeline is compared against.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::exec::{compile_kernel, Env, ExecConfig, ExecError, ExecResult, Inputs, Names, Stop, ThreadState};
use crate::kir::{GridConfig, Kernel};
use crate::sanrt::ThreadId;

/// Options for a reference run.
#[derive(Clone, Copy, Debug)]
pub struct RefOptions {
    pub exec: ExecConfig,
    /// Shuffle the order threads run in within each barrier phase.
    pub shuffle_seed: Option<u64>,
}

impl Default for RefOptions {
    fn default() -> Self {
        RefOptions {
            exec: ExecConfig::reference(),
            shuffle_seed: None,
        }
    }
}

/// Runs the kernel under the reference detector in audit mode.
pub fn run_reference(k: &Kernel, grid: GridConfig, inputs: &Inputs) -> ExecResult {
    run_reference_with(k, grid, inputs, &RefOptions::default())
}

pub fn run_reference_with(k: &Kernel, grid: GridConfig, inputs: &Inputs, opts: &RefOptions) -> ExecResult {
    let names = Names::new(k);
    let code = compile_kernel(k, &names);
    let mut env = match Env::new(k, &names, grid, inputs, opts.exec) {
        Ok(e) => e,
        Err(e) => {
            return ExecResult {
                error: Some(e),
                ..ExecResult::default()
            }
        }
    };
    let mut rng = opts.shuffle_seed.map(ChaCha8Rng::seed_from_u64);
    let err = run_blocks(&mut env, &code, &names, grid, rng.as_mut()).err();
    env.finish(err)
}

fn run_blocks(
    env: &mut Env,
    code: &crate::exec::Code,
    names: &Names,
    grid: GridConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(), ExecError> {
    let t = grid.threads;
    for j in 0..grid.blocks {
        env.begin_block(j)?;
        let mut threads: Vec<ThreadState> = (0..t)
            .map(|i| ThreadState::new(ThreadId::new(j, i), code, names.nlocals()))
            .collect();
        let mut done = vec![false; t as usize];
        let mut order: Vec<usize> = (0..t as usize).collect();
        let mut remaining = t as usize;
        while remaining > 0 {
            if let Some(r) = rng.as_deref_mut() {
                order.shuffle(r);
            }
            for &i in &order {
                if done[i] {
                    continue;
                }
                match env.run(code, &mut threads[i])? {
                    Stop::Barrier => {}
                    Stop::Return => {
                        done[i] = true;
                        remaining -= 1;
                        env.thread_exit(i as u32);
                    }
                    Stop::Next(_) => return Err(ExecError::Internal("phase transition in original code".into())),
                }
            }
        }
        env.end_block();
    }
    Ok(())
}

/// Threads that trigger at least one reference report.
pub fn bug_threads(k: &Kernel, grid: GridConfig, inputs: &Inputs) -> BTreeSet<ThreadId> {
    run_reference(k, grid, inputs).bug_threads()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{as_f32s, as_i32s, Arg};
    use crate::kir::parse_kernel;
    use crate::sanrt::BugClass;

    #[test]
    fn vector_add_computes_sum() {
        let k = parse_kernel(
            "kernel vadd(a: *global_host f32, b: *global_host f32, c: *global_host f32, n: i32) {
               id = add (mul blockIdx.x blockDim.x) threadIdx.x
               br (lt id n) body done
             body:
               x = load a[id]; y = load b[id]; s = add x y
               store c[id] s
               jmp done
             done:
               return
             }",
        )
        .unwrap();
        let inputs = Inputs::new(vec![
            Arg::f32s(&[1.0, 2.0, 3.0, 4.0]),
            Arg::f32s(&[10.0, 20.0, 30.0, 40.0]),
            Arg::zeros(crate::kir::ScalarType::F32, 4),
            Arg::Int(4),
        ]);
        let r = run_reference(&k, GridConfig::new(2, 2), &inputs);
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.reports.is_empty());
        assert_eq!(as_f32s(&r.memory[2]), vec![11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn barrier_orders_shared_exchange() {
        let k = parse_kernel(
            "kernel rot(out: *global_host i32) {
               shared s: [blockDim.x] i32
               store s[threadIdx.x] threadIdx.x
               barrier
               n = rem (add threadIdx.x 1) blockDim.x
               v = load s[n]
               g = add (mul blockIdx.x blockDim.x) threadIdx.x
               store out[g] v
             }",
        )
        .unwrap();
        let inputs = Inputs::new(vec![Arg::zeros(crate::kir::ScalarType::I32, 8)]);
        for seed in [None, Some(1), Some(2)] {
            let opts = RefOptions {
                shuffle_seed: seed,
                ..RefOptions::default()
            };
            let r = run_reference_with(&k, GridConfig::new(2, 4), &inputs, &opts);
            assert!(r.reports.is_empty(), "{:?}", r.reports);
            assert_eq!(as_i32s(&r.memory[0]), vec![1, 2, 3, 0, 1, 2, 3, 0]);
        }
    }

    #[test]
    fn off_by_one_reports_only_last_thread() {
        let k = parse_kernel(
            "kernel obo(a: *global_host f32, n: i32) {
               id = add (mul blockIdx.x blockDim.x) threadIdx.x
               br (le id n) body done
             body:
               store a[id] 1.0
               jmp done
             done:
               return
             }",
        )
        .unwrap();
        let inputs = Inputs::new(vec![Arg::zeros(crate::kir::ScalarType::F32, 6), Arg::Int(6)]);
        let r = run_reference(&k, GridConfig::new(2, 4), &inputs);
        let bugs: Vec<_> = r.bug_set().into_iter().collect();
        assert_eq!(bugs.len(), 1);
        assert_eq!(bugs[0].0, ThreadId::new(1, 2));
        assert_eq!(bugs[0].2, BugClass::BO);
    }

    #[test]
    fn runaway_loop_is_non_termination() {
        let k = parse_kernel(
            "kernel spin() {
             top:
               jmp top
             }",
        )
        .unwrap();
        let r = run_reference(&k, GridConfig::new(1, 1), &Inputs::default());
        assert!(matches!(r.error, Some(ExecError::NonTermination { .. })));
    }
}
