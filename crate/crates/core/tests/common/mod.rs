//! Random kernel generators shared by the property and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spmdfuzz::exec::{Arg, Inputs};
use spmdfuzz::kir::{parse_kernel, BinOp, Expr, GridConfig, InstrKind, Intrinsic, Kernel, ScalarType};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct Case {
    pub source: String,
    pub kernel: Kernel,
    pub grid: GridConfig,
    pub inputs: Vec<Inputs>,
}

fn parse(src: String) -> Kernel {
    parse_kernel(&src).unwrap_or_else(|e| panic!("{e}\n{src}"))
}

fn i32_buf(r: &mut ChaCha8Rng, n: usize, lo: i32, hi: i32) -> Arg {
    Arg::Buffer((0..n).flat_map(|_| r.gen_range(lo..=hi).to_le_bytes()).collect())
}

fn f32_buf(r: &mut ChaCha8Rng, n: usize) -> Arg {
    Arg::Buffer((0..n).flat_map(|_| r.gen_range(-2.0f32..2.0).to_le_bytes()).collect())
}

/// A thread-invariant coefficient: a literal, the parameter `p`, or a dim.
fn coeff(r: &mut ChaCha8Rng) -> String {
    match r.gen_range(0..10) {
        0 => "p".into(),
        1 => "blockDim.x".into(),
        2 => "(sub 0 p)".into(),
        _ => r.gen_range(-3i64..=3).to_string(),
    }
}

/// Straight-line kernel whose 1 to 3 accesses each index a buffer with
/// `m * threadIdx + n * blockIdx + c` for random invariant `m`, `n`, `c`.
/// Grids are in [1, 32]^2 and buffer lengths are random.
pub fn affine_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let b = r.gen_range(1..=32u32);
    let t = r.gen_range(1..=32u32);
    let mut src = String::from("kernel aff(c0: *global_host i32, c1: *global_host i32, out: *global_host i32, p: i32)\n");
    let accesses = r.gen_range(1..=3);
    for a in 0..accesses {
        let (m, n, c) = (coeff(&mut r), coeff(&mut r), coeff(&mut r));
        let buf = if r.gen_bool(0.5) { "c0" } else { "c1" };
        match r.gen_range(0..3) {
            0 => {
                let _ = writeln!(src, "  tm{a} = mul threadIdx.x {m}");
                let _ = writeln!(src, "  bn{a} = mul {n} blockIdx.x");
                let _ = writeln!(src, "  s{a} = add tm{a} bn{a}");
                let _ = writeln!(src, "  i{a} = add s{a} {c}");
            }
            1 => {
                let _ = writeln!(src, "  s{a} = add (mul threadIdx.x {m}) (mul blockIdx.x {n})");
                let _ = writeln!(src, "  i{a} = sub s{a} (sub 0 {c})");
            }
            _ => {
                let _ = writeln!(src, "  q{a} = add {c} (mul {m} threadIdx.x)");
                let _ = writeln!(src, "  i{a} = add (mul (add blockIdx.x 0) {n}) q{a}");
            }
        }
        if r.gen_bool(0.5) {
            let _ = writeln!(src, "  store {buf}[i{a}] {a}");
        } else {
            let _ = writeln!(src, "  v{a} = load {buf}[i{a}]");
        }
    }
    let total = (b * t) as usize;
    let mut inputs = Vec::new();
    for _ in 0..2 {
        let l0 = r.gen_range(0..=2 * total + 4);
        let l1 = r.gen_range(0..=2 * total + 4);
        inputs.push(Inputs::new(vec![
            i32_buf(&mut r, l0, 0, 9),
            i32_buf(&mut r, l1, 0, 9),
            Arg::zeros(ScalarType::I32, 1),
            Arg::Int(r.gen_range(-3..=3)),
        ]));
    }
    Case {
        kernel: parse(src.clone()),
        source: src,
        grid: GridConfig::new(b, t),
        inputs,
    }
}

/// Race-free kernel with `barriers` barrier-separated phases. Each phase
/// does integer and float math, may branch on data, publishes a value
/// through shared memory and reads a permuted neighbour's value from the
/// previous phase. The final store may be guarded and its index may depend
/// on a shared value, a loaded value or a float math result.
pub fn phased_case(seed: u64, barriers: usize, inputs_per_case: usize) -> Case {
    let mut r = rng(seed);
    let b = r.gen_range(1..=4u32);
    let t = r.gen_range(1..=12u32);
    let total = (b * t) as usize;
    let mut src = String::from(
        "kernel ph(a: *global_host i32, f: *global_host f32, o: *global_host i32, k: i32, n: i32)\n",
    );
    if barriers > 0 {
        let _ = writeln!(src, "  shared s0: [{t}] i32");
        let _ = writeln!(src, "  shared s1: [{t}] i32");
    }
    push(&mut src, "gid = add (mul blockIdx.x blockDim.x) threadIdx.x".into());
    push(&mut src, "x = load a[gid]".into());
    push(&mut src, "fx = load f[gid]".into());
    let mut val = "x".to_string();
    let mut fval = "fx".to_string();
    let mut label = 0;
    let ops = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Xor, BinOp::Min, BinOp::Max, BinOp::Div, BinOp::Rem];
    let math = ["exp", "sin", "cos", "sqrt", "log"];
    for p in 0..=barriers {
        if p > 0 {
            let prev = (p - 1) % 2;
            let perm = match r.gen_range(0..3) {
                0 => "threadIdx.x".to_string(),
                1 => "(sub (sub blockDim.x 1) threadIdx.x)".to_string(),
                _ => format!("(rem (add threadIdx.x {}) blockDim.x)", r.gen_range(0..4)),
            };
            push(&mut src, format!("z{p} = load s{prev}[{perm}]"));
            push(&mut src, format!("w{p} = add z{p} {val}"));
            val = format!("w{p}");
        }
        for q in 0..r.gen_range(0..3) {
            let op = ops.choose(&mut r).unwrap().name();
            push(&mut src, format!("t{p}_{q} = {op} {val} {}", r.gen_range(-3..=5)));
            val = format!("t{p}_{q}");
        }
        for q in 0..r.gen_range(0..3) {
            let m = math.choose(&mut r).unwrap();
            push(&mut src, format!("m{p}_{q} = {m} {fval}"));
            fval = format!("m{p}_{q}");
        }
        if r.gen_bool(0.3) {
            let (then, els, join) = (label, label + 1, label + 2);
            label += 3;
            let cond = if r.gen_bool(0.5) {
                format!("(lt {fval} 0.5)")
            } else {
                format!("(lt {val} {})", r.gen_range(0..5))
            };
            push(&mut src, format!("br {cond} L{then} L{els}"));
            src.push_str(&format!("L{then}:\n"));
            src.push_str(&format!("  store f[gid] {fval}\n  jmp L{join}\nL{els}:\n"));
            src.push_str(&format!("  store f[gid] 1.5\n  jmp L{join}\nL{join}:\n"));
        } else if r.gen_bool(0.5) {
            src.push_str(&format!("  store f[gid] {fval}\n"));
        }
        if p < barriers {
            src.push_str(&format!("  store s{}[threadIdx.x] {val}\n  barrier\n", p % 2));
        }
    }
    let idx = match r.gen_range(0..5) {
        0 => "(add gid k)".to_string(),
        1 => format!("(add gid (and {val} 1))"),
        2 => format!("(add gid (lt {fval} 0.0))"),
        _ => "gid".to_string(),
    };
    if r.gen_bool(0.5) {
        src.push_str(&format!("  br (lt gid n) G{label} E{label}\nG{label}:\n"));
        src.push_str(&format!("  store o[{idx}] {val}\n  jmp E{label}\nE{label}:\n  return\n"));
    } else {
        src.push_str(&format!("  store o[{idx}] {val}\n"));
    }
    let mut inputs = Vec::new();
    for _ in 0..inputs_per_case {
        let la = total;
        let lo = total.saturating_sub(r.gen_range(0..=2));
        inputs.push(Inputs::new(vec![
            i32_buf(&mut r, la, -4, 8),
            f32_buf(&mut r, total),
            Arg::zeros(ScalarType::I32, lo),
            Arg::Int(r.gen_range(-1..=1)),
            Arg::Int(r.gen_range(0..=total as i64 + 1)),
        ]));
    }
    Case {
        kernel: parse(src.clone()),
        source: src,
        grid: GridConfig::new(b, t),
        inputs,
    }
}

fn push(src: &mut String, s: String) {
    src.push_str("  ");
    src.push_str(&s);
    src.push('\n');
}

/// Evaluates an integer index expression with the local environment
/// `env`, independently of the crate's interpreter.
pub fn eval(e: &Expr, env: &HashMap<String, i64>, tid: i64, bid: i64, bdim: i64, gdim: i64) -> i64 {
    match e {
        Expr::Int(v) => *v,
        Expr::Float(_) => panic!("float in index"),
        Expr::Var(v) => env[v.as_str()],
        Expr::Intr(i) => match i {
            Intrinsic::ThreadIdx => tid,
            Intrinsic::BlockIdx => bid,
            Intrinsic::BlockDim => bdim,
            Intrinsic::GridDim => gdim,
        },
        Expr::Bin(op, l, rr) => {
            let (x, y) = (eval(l, env, tid, bid, bdim, gdim), eval(rr, env, tid, bid, bdim, gdim));
            match op {
                BinOp::Add => x.wrapping_add(y),
                BinOp::Sub => x.wrapping_sub(y),
                BinOp::Mul => x.wrapping_mul(y),
                _ => panic!("unexpected op {op:?}"),
            }
        }
    }
}

/// Runs the straight-line integer prefix of `k` and returns the index of
/// every load and store keyed by instruction id.
pub fn concrete_indices(k: &Kernel, params: &HashMap<String, i64>, tid: i64, bid: i64, bdim: i64, gdim: i64) -> Vec<(u32, i64)> {
    let mut env = params.clone();
    let mut out = Vec::new();
    for ins in k.instrs() {
        match &ins.kind {
            InstrKind::Arith { dst, op, lhs, rhs } => {
                let v = eval(&Expr::bin(*op, lhs.clone(), rhs.clone()), &env, tid, bid, bdim, gdim);
                env.insert(dst.clone(), v);
            }
            InstrKind::Load { dst, index, .. } => {
                out.push((ins.id.0, eval(index, &env, tid, bid, bdim, gdim)));
                env.insert(dst.clone(), 0);
            }
            InstrKind::Store { index, .. } => out.push((ins.id.0, eval(index, &env, tid, bid, bdim, gdim))),
            _ => {}
        }
    }
    out
}
