//! Static affine access analysis. A kernel is affine when every memory
//! index is `m * threadIdx + n * blockIdx + c` with thread-invariant `m`,
//! `n` and `c`. For such kernels without thread-variant guards, executing
//! the four corner threads of the grid finds a bug whenever any thread does.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::kir::cfg::{variant_controlled_blocks, Cfg};
use crate::kir::{BinOp, Expr, GridConfig, InstrId, InstrKind, Intrinsic, Kernel, ParamKind};
use crate::sanrt::ThreadId;

/// Thread-invariant symbol.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Atom {
    BlockDim,
    GridDim,
    Param(String),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::BlockDim => f.write_str("blockDim.x"),
            Atom::GridDim => f.write_str("gridDim.x"),
            Atom::Param(p) => f.write_str(p),
        }
    }
}

/// Polynomial over thread-invariant atoms with wrapping integer
/// coefficients, kept in canonical form (no zero terms).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InvariantExpr {
    terms: BTreeMap<Vec<Atom>, i64>,
}

/// Values for the atoms of an [`InvariantExpr`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    pub params: FxHashMap<String, i64>,
    pub block_dim: i64,
    pub grid_dim: i64,
}

impl InvariantExpr {
    pub fn constant(v: i64) -> Self {
        let mut e = InvariantExpr::default();
        e.add_term(Vec::new(), v);
        e
    }

    pub fn atom(a: Atom) -> Self {
        let mut e = InvariantExpr::default();
        e.add_term(vec![a], 1);
        e
    }

    fn add_term(&mut self, mono: Vec<Atom>, coef: i64) {
        let c = self.terms.entry(mono.clone()).or_insert(0);
        *c = c.wrapping_add(coef);
        if *c == 0 {
            self.terms.remove(&mono);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn as_constant(&self) -> Option<i64> {
        match self.terms.len() {
            0 => Some(0),
            1 => self.terms.get(&Vec::new()).copied(),
            _ => None,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut r = self.clone();
        for (m, c) in &o.terms {
            r.add_term(m.clone(), *c);
        }
        r
    }

    pub fn neg(&self) -> Self {
        InvariantExpr {
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c.wrapping_neg())).collect(),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.neg())
    }

    pub fn mul(&self, o: &Self) -> Self {
        let mut r = InvariantExpr::default();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &o.terms {
                let mut m: Vec<Atom> = m1.iter().chain(m2).cloned().collect();
                m.sort();
                r.add_term(m, c1.wrapping_mul(*c2));
            }
        }
        r
    }

    pub fn eval(&self, b: &Bindings) -> i64 {
        self.terms.iter().fold(0i64, |acc, (m, c)| {
            let v = m.iter().fold(*c, |p, a| {
                p.wrapping_mul(match a {
                    Atom::BlockDim => b.block_dim,
                    Atom::GridDim => b.grid_dim,
                    Atom::Param(n) => b.params.get(n).copied().unwrap_or(0),
                })
            });
            acc.wrapping_add(v)
        })
    }
}

impl fmt::Display for InvariantExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        // Higher-degree terms first, constant last.
        let mut terms: Vec<_> = self.terms.iter().collect();
        terms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)));
        for (n, (mono, &coef)) in terms.into_iter().enumerate() {
            let mag = coef.unsigned_abs();
            if n == 0 {
                if coef < 0 {
                    f.write_str("-")?;
                }
            } else {
                f.write_str(if coef < 0 { " - " } else { " + " })?;
            }
            let atoms: Vec<String> = mono.iter().map(|a| a.to_string()).collect();
            if mono.is_empty() {
                write!(f, "{mag}")?;
            } else if mag == 1 {
                f.write_str(&atoms.join("*"))?;
            } else {
                write!(f, "{mag}*{}", atoms.join("*"))?;
            }
        }
        Ok(())
    }
}

/// `m * threadIdx + n * blockIdx + c`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
struct Lin {
    m: InvariantExpr,
    n: InvariantExpr,
    c: InvariantExpr,
}

impl Lin {
    fn constant(e: InvariantExpr) -> Self {
        Lin {
            c: e,
            ..Lin::default()
        }
    }

    fn is_invariant(&self) -> bool {
        self.m.is_zero() && self.n.is_zero()
    }

    fn add(&self, o: &Lin) -> Lin {
        Lin {
            m: self.m.add(&o.m),
            n: self.n.add(&o.n),
            c: self.c.add(&o.c),
        }
    }

    fn neg(&self) -> Lin {
        Lin {
            m: self.m.neg(),
            n: self.n.neg(),
            c: self.c.neg(),
        }
    }

    fn scale(&self, k: &InvariantExpr) -> Lin {
        Lin {
            m: self.m.mul(k),
            n: self.n.mul(k),
            c: self.c.mul(k),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    IndirectLoad,
    Nonlinear,
    MathDependent,
}

impl Cause {
    pub fn name(self) -> &'static str {
        match self {
            Cause::IndirectLoad => "indirect_load",
            Cause::Nonlinear => "nonlinear",
            Cause::MathDependent => "math_dependent",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineRow {
    /// threadIdx coefficient.
    pub m: InvariantExpr,
    /// blockIdx coefficient.
    pub n: InvariantExpr,
    pub c: InvariantExpr,
    pub instr_ids: BTreeSet<InstrId>,
}

impl AffineRow {
    pub fn eval(&self, tid: i64, bid: i64, b: &Bindings) -> i64 {
        self.m
            .eval(b)
            .wrapping_mul(tid)
            .wrapping_add(self.n.eval(b).wrapping_mul(bid))
            .wrapping_add(self.c.eval(b))
    }

    fn key(&self) -> String {
        format!("{}|{}|{}", self.m, self.n, self.c)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffineStatus {
    Affine { rows: Vec<AffineRow>, guarded: bool },
    NonAffine { reasons: Vec<(InstrId, Cause)> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffineSummary {
    pub kernel: String,
    pub status: AffineStatus,
}

impl AffineSummary {
    pub fn is_affine(&self) -> bool {
        matches!(self.status, AffineStatus::Affine { .. })
    }

    pub fn is_guarded(&self) -> bool {
        matches!(self.status, AffineStatus::Affine { guarded: true, .. })
    }

    pub fn rows(&self) -> &[AffineRow] {
        match &self.status {
            AffineStatus::Affine { rows, .. } => rows,
            AffineStatus::NonAffine { .. } => &[],
        }
    }

    /// Line-oriented rendering for goldens and `--dump-affine`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        match &self.status {
            AffineStatus::Affine { rows, guarded } => {
                s.push_str(&format!("kernel {}: affine guarded={guarded}\n", self.kernel));
                for (i, r) in rows.iter().enumerate() {
                    let ids: Vec<String> = r.instr_ids.iter().map(|i| i.to_string()).collect();
                    s.push_str(&format!(
                        "  row {i}: m={} n={} c={} ids=[{}]\n",
                        r.m,
                        r.n,
                        r.c,
                        ids.join(", ")
                    ));
                }
                let t: Vec<String> = rows.iter().map(|r| format!("[{}, {}]", r.m, r.n)).collect();
                let b: Vec<String> = rows.iter().map(|r| r.c.to_string()).collect();
                s.push_str(&format!("  T = [{}]\n", t.join(", ")));
                s.push_str(&format!("  b = [{}]\n", b.join(", ")));
            }
            AffineStatus::NonAffine { reasons } => {
                s.push_str(&format!("kernel {}: non_affine\n", self.kernel));
                for (id, c) in reasons {
                    s.push_str(&format!("  @{id} {}\n", c.name()));
                }
            }
        }
        s
    }
}

struct Normalizer<'k> {
    k: &'k Kernel,
    defs: FxHashMap<&'k str, &'k InstrKind>,
    memo: FxHashMap<String, Result<Lin, Cause>>,
}

impl<'k> Normalizer<'k> {
    fn new(k: &'k Kernel) -> Self {
        let defs = k
            .instrs()
            .filter_map(|i| i.kind.dst().map(|d| (d, &i.kind)))
            .collect();
        Normalizer {
            k,
            defs,
            memo: FxHashMap::default(),
        }
    }

    fn is_ptr(&self, name: &str) -> bool {
        if self.k.shared_decl(name).is_some() {
            return true;
        }
        if let Some(p) = self.k.param(name) {
            return p.is_buffer();
        }
        match self.defs.get(name) {
            Some(InstrKind::Alloca { .. } | InstrKind::Malloc { .. } | InstrKind::Field { .. }) => true,
            Some(InstrKind::Arith { op, lhs, rhs, .. }) => {
                let l = self.expr_is_ptr(lhs);
                let r = self.expr_is_ptr(rhs);
                match op {
                    BinOp::Add => l != r,
                    BinOp::Sub => l && !r,
                    _ => false,
                }
            }
            _ => false,
        }
    }

    fn expr_is_ptr(&self, e: &Expr) -> bool {
        match e {
            Expr::Var(v) => self.is_ptr(v),
            Expr::Bin(op, l, r) => {
                let (l, r) = (self.expr_is_ptr(l), self.expr_is_ptr(r));
                match op {
                    BinOp::Add => l != r,
                    BinOp::Sub => l && !r,
                    _ => false,
                }
            }
            _ => false,
        }
    }

    fn binop(&mut self, op: BinOp, l: &Expr, r: &Expr) -> Result<Lin, Cause> {
        let a = self.expr(l);
        let b = self.expr(r);
        let (a, b) = (a?, b?);
        match op {
            BinOp::Add => Ok(a.add(&b)),
            BinOp::Sub => Ok(a.add(&b.neg())),
            BinOp::Mul if a.is_invariant() => Ok(b.scale(&a.c)),
            BinOp::Mul if b.is_invariant() => Ok(a.scale(&b.c)),
            _ => Err(Cause::Nonlinear),
        }
    }

    fn expr(&mut self, e: &Expr) -> Result<Lin, Cause> {
        match e {
            Expr::Int(v) => Ok(Lin::constant(InvariantExpr::constant(*v))),
            Expr::Float(_) => Err(Cause::Nonlinear),
            Expr::Intr(Intrinsic::ThreadIdx) => Ok(Lin {
                m: InvariantExpr::constant(1),
                ..Lin::default()
            }),
            Expr::Intr(Intrinsic::BlockIdx) => Ok(Lin {
                n: InvariantExpr::constant(1),
                ..Lin::default()
            }),
            Expr::Intr(Intrinsic::BlockDim) => Ok(Lin::constant(InvariantExpr::atom(Atom::BlockDim))),
            Expr::Intr(Intrinsic::GridDim) => Ok(Lin::constant(InvariantExpr::atom(Atom::GridDim))),
            Expr::Var(v) => self.var(v),
            Expr::Bin(op, l, r) => self.binop(*op, l, r),
        }
    }

    fn var(&mut self, v: &str) -> Result<Lin, Cause> {
        if let Some(p) = self.k.param(v) {
            return match p.kind {
                ParamKind::Scalar(t) if !t.is_float() => {
                    Ok(Lin::constant(InvariantExpr::atom(Atom::Param(v.to_string()))))
                }
                _ => Err(Cause::Nonlinear),
            };
        }
        if let Some(r) = self.memo.get(v) {
            return r.clone();
        }
        let r = match self.defs.get(v).copied() {
            Some(InstrKind::Arith { op, lhs, rhs, .. }) => {
                if self.is_ptr(v) || (self.expr_is_ptr(lhs) && self.expr_is_ptr(rhs)) {
                    Err(Cause::Nonlinear)
                } else {
                    self.binop(*op, lhs, rhs)
                }
            }
            Some(InstrKind::Load { .. }) => Err(Cause::IndirectLoad),
            Some(InstrKind::Math { .. }) => Err(Cause::MathDependent),
            _ => Err(Cause::Nonlinear),
        };
        self.memo.insert(v.to_string(), r.clone());
        r
    }

    /// Element offset of pointer `name` from the object it points into.
    fn base_offset(&mut self, name: &str) -> Result<Lin, Cause> {
        match self.defs.get(name).copied() {
            Some(InstrKind::Arith { op, lhs, rhs, .. }) => {
                let (ptr, off, neg) = if self.expr_is_ptr(lhs) {
                    (lhs, rhs, *op == BinOp::Sub)
                } else {
                    (rhs, lhs, false)
                };
                let base = match ptr {
                    Expr::Var(p) => self.base_offset(p)?,
                    _ => return Err(Cause::Nonlinear),
                };
                let o = self.expr(off)?;
                Ok(base.add(&if neg { o.neg() } else { o }))
            }
            _ => Ok(Lin::default()),
        }
    }
}

/// Classifies the kernel and builds its affine rows.
pub fn analyze(k: &Kernel) -> AffineSummary {
    let mut norm = Normalizer::new(k);
    let mut rows: Vec<AffineRow> = Vec::new();
    let mut by_key: FxHashMap<String, usize> = FxHashMap::default();
    let mut reasons = Vec::new();
    for ins in k.instrs() {
        let lin = match &ins.kind {
            InstrKind::Load { base, index, .. } | InstrKind::Store { base, index, .. } => {
                let off = norm.base_offset(base);
                let idx = norm.expr(index);
                off.and_then(|o| idx.map(|i| o.add(&i)))
            }
            // Allocation sizes must be uniform across threads.
            InstrKind::Alloca { count: e, .. } | InstrKind::Malloc { size: e, .. } => {
                match norm.expr(e) {
                    Ok(l) if l.is_invariant() => continue,
                    Ok(_) => Err(Cause::Nonlinear),
                    Err(c) => Err(c),
                }
            }
            _ => continue,
        };
        match lin {
            Ok(l) => {
                let row = AffineRow {
                    m: l.m,
                    n: l.n,
                    c: l.c,
                    instr_ids: BTreeSet::from([ins.id]),
                };
                match by_key.get(&row.key()) {
                    Some(&at) => {
                        rows[at].instr_ids.insert(ins.id);
                    }
                    None => {
                        by_key.insert(row.key(), rows.len());
                        rows.push(row);
                    }
                }
            }
            Err(c) => reasons.push((ins.id, c)),
        }
    }
    let status = if reasons.is_empty() {
        rows.sort_by_key(|r| r.instr_ids.iter().next().copied());
        AffineStatus::Affine {
            rows,
            guarded: is_guarded(k),
        }
    } else {
        reasons.sort();
        AffineStatus::NonAffine { reasons }
    };
    AffineSummary {
        kernel: k.name.clone(),
        status,
    }
}

/// Whether any memory operation sits under a thread-variant branch.
pub fn is_guarded(k: &Kernel) -> bool {
    let cfg = Cfg::new(k);
    let controlled = variant_controlled_blocks(k, &cfg);
    k.blocks.iter().zip(controlled).any(|(b, c)| {
        c && b.instrs.iter().any(|i| {
            matches!(
                i.kind,
                InstrKind::Load { .. }
                    | InstrKind::Store { .. }
                    | InstrKind::Alloca { .. }
                    | InstrKind::Malloc { .. }
                    | InstrKind::Free { .. }
            )
        })
    })
}

/// Which threads partial execution has to run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plan {
    /// Only these corner threads.
    BoundaryThreads(Vec<ThreadId>),
    /// All threads of the first and last blocks, expanding inward.
    BoundaryBlocksAllThreads,
    All,
}

impl Plan {
    pub fn name(&self) -> &'static str {
        match self {
            Plan::BoundaryThreads(_) => "boundary_threads",
            Plan::BoundaryBlocksAllThreads => "boundary_blocks_all_threads",
            Plan::All => "all",
        }
    }
}

/// The (deduplicated) corner threads of a grid.
pub fn corner_threads(g: GridConfig) -> Vec<ThreadId> {
    let (b, t) = (g.blocks.max(1) - 1, g.threads.max(1) - 1);
    let set: BTreeSet<ThreadId> = [(0, 0), (0, t), (b, 0), (b, t)]
        .into_iter()
        .map(|(j, i)| ThreadId::new(j, i))
        .collect();
    set.into_iter().collect()
}

pub fn select_representative_threads(s: &AffineSummary, g: GridConfig) -> Plan {
    match &s.status {
        AffineStatus::Affine { guarded: false, .. } => Plan::BoundaryThreads(corner_threads(g)),
        AffineStatus::Affine { guarded: true, .. } => Plan::BoundaryBlocksAllThreads,
        AffineStatus::NonAffine { .. } => Plan::All,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kir::parse_kernel;

    #[test]
    fn invariant_expr_prints_canonically() {
        let n = InvariantExpr::atom(Atom::Param("n".into()));
        let bd = InvariantExpr::atom(Atom::BlockDim);
        let e = n.mul(&bd).add(&InvariantExpr::constant(-3)).add(&bd.mul(&InvariantExpr::constant(2)));
        assert_eq!(e.to_string(), "blockDim.x*n + 2*blockDim.x - 3");
        assert_eq!(e.sub(&e).to_string(), "0");
        assert_eq!(bd.neg().to_string(), "-blockDim.x");
    }

    #[test]
    fn pointer_offset_base_is_folded_into_row() {
        let k = parse_kernel(
            "kernel k(a: *global_host f32)
               p = add a 3
               store p[threadIdx.x] 1.0",
        )
        .unwrap();
        let s = analyze(&k);
        assert_eq!(s.rows().len(), 1);
        assert_eq!(s.rows()[0].c.to_string(), "3");
    }

    #[test]
    fn division_is_nonlinear() {
        let k = parse_kernel(
            "kernel k(a: *global_host f32)
               i = div threadIdx.x 2
               store a[i] 1.0",
        )
        .unwrap();
        match analyze(&k).status {
            AffineStatus::NonAffine { reasons } => assert_eq!(reasons, vec![(InstrId(1), Cause::Nonlinear)]),
            s => panic!("{s:?}"),
        }
    }

    #[test]
    fn math_result_is_math_dependent() {
        let k = parse_kernel(
            "kernel k(a: *global_host f32)
               e = exp 1.0
               store a[e] 1.0",
        )
        .unwrap();
        match analyze(&k).status {
            AffineStatus::NonAffine { reasons } => assert_eq!(reasons[0].1, Cause::MathDependent),
            s => panic!("{s:?}"),
        }
    }

    #[test]
    fn corners_deduplicate_on_tiny_grids() {
        assert_eq!(corner_threads(GridConfig::new(1, 1)), vec![ThreadId::new(0, 0)]);
        assert_eq!(corner_threads(GridConfig::new(2, 4)).len(), 4);
    }
}
