//! Access-index preserving pruning: drops barriers and math calls whose
//! results can never influence a branch or a memory address.

use std::collections::BTreeMap;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};

use crate::kir::{Expr, InstrId, InstrKind, Kernel, ParamKind, Terminator};

/// How far shared-memory taint propagates for barrier elimination.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaintMode {
    /// Shared values and everything computed from them.
    #[default]
    Transitive,
    /// Only loads from shared arrays used directly in a branch or index.
    VariableOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainReason {
    UsedInBranch,
    UsedAsIndex,
}

impl RetainReason {
    pub fn name(self) -> &'static str {
        match self {
            RetainReason::UsedInBranch => "used_in_branch",
            RetainReason::UsedAsIndex => "used_as_index",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    pub barriers_removed: Vec<InstrId>,
    pub math_removed: Vec<InstrId>,
    pub math_retained: BTreeMap<InstrId, RetainReason>,
}

impl PruneReport {
    pub fn is_empty(&self) -> bool {
        self.barriers_removed.is_empty() && self.math_removed.is_empty()
    }

    pub fn dump(&self) -> String {
        let ids = |v: &[InstrId]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = format!(
            "barriers_removed {} [{}]\nmath_removed {} [{}]\n",
            self.barriers_removed.len(),
            ids(&self.barriers_removed),
            self.math_removed.len(),
            ids(&self.math_removed)
        );
        for (id, r) in &self.math_retained {
            s.push_str(&format!("retained @{id} {}\n", r.name()));
        }
        s
    }
}

/// The object a pointer derives from.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Root {
    Param(String),
    Shared(String),
    Alloc(String),
}

struct Slicer<'k> {
    k: &'k Kernel,
    defs: FxHashMap<&'k str, &'k InstrKind>,
    stores: FxHashMap<Root, Vec<&'k Expr>>,
}

/// Locals in a backward slice plus the buffers it loads from.
#[derive(Default)]
struct Slice {
    locals: FxHashSet<String>,
    loaded: FxHashSet<Root>,
}

impl<'k> Slicer<'k> {
    fn new(k: &'k Kernel) -> Self {
        let defs = k
            .instrs()
            .filter_map(|i| i.kind.dst().map(|d| (d, &i.kind)))
            .collect();
        let mut s = Slicer {
            k,
            defs,
            stores: FxHashMap::default(),
        };
        for i in k.instrs() {
            if let InstrKind::Store { base, value, .. } = &i.kind {
                if let Some(r) = s.root(base) {
                    s.stores.entry(r).or_default().push(value);
                }
            }
        }
        s
    }

    fn root(&self, name: &str) -> Option<Root> {
        if self.k.shared_decl(name).is_some() {
            return Some(Root::Shared(name.to_string()));
        }
        if self.k.param(name).is_some() {
            return Some(Root::Param(name.to_string()));
        }
        match self.defs.get(name)? {
            InstrKind::Alloca { .. } | InstrKind::Malloc { .. } => Some(Root::Alloc(name.to_string())),
            InstrKind::Field { base, .. } => self.root(base),
            InstrKind::Arith { lhs, rhs, .. } => [lhs, rhs].into_iter().find_map(|e| match e {
                Expr::Var(v) => self.root(v),
                _ => None,
            }),
            _ => None,
        }
    }

    fn slice(&self, seeds: Vec<String>) -> Slice {
        let mut out = Slice::default();
        let mut work = seeds;
        while let Some(v) = work.pop() {
            if !self.defs.contains_key(v.as_str()) || !out.locals.insert(v.clone()) {
                continue;
            }
            let def = self.defs[v.as_str()];
            work.extend(def.uses().into_iter().map(str::to_string));
            if let InstrKind::Load { base, .. } = def {
                if let Some(r) = self.root(base) {
                    if out.loaded.insert(r.clone()) {
                        for e in self.stores.get(&r).into_iter().flatten() {
                            work.extend(e.vars().into_iter().map(str::to_string));
                        }
                    }
                }
            }
        }
        out
    }

    fn branch_seeds(&self) -> Vec<String> {
        let mut seeds = Vec::new();
        for b in &self.k.blocks {
            if let Terminator::Branch { cond, .. } = &b.term {
                seeds.extend(cond.vars().into_iter().map(str::to_string));
            }
        }
        seeds
    }

    fn index_seeds(&self) -> Vec<String> {
        let mut seeds: Vec<String> = Vec::new();
        let mut push = |e: &Expr| seeds.extend(e.vars().into_iter().map(str::to_string));
        for i in self.k.instrs() {
            match &i.kind {
                InstrKind::Load { base, index, .. } | InstrKind::Store { base, index, .. } => {
                    push(&Expr::var(base.as_str()));
                    push(index);
                }
                InstrKind::Alloca { count: e, .. }
                | InstrKind::Malloc { size: e, .. }
                | InstrKind::Free { ptr: e, .. } => push(e),
                InstrKind::Field { base, .. } => push(&Expr::var(base.as_str())),
                _ => {}
            }
        }
        seeds
    }

    /// Loads whose result feeds a branch or index directly.
    fn direct_loads(&self) -> FxHashSet<Root> {
        let mut seeds = self.branch_seeds();
        seeds.extend(self.index_seeds());
        seeds
            .iter()
            .filter_map(|v| match self.defs.get(v.as_str()) {
                Some(InstrKind::Load { base, .. }) => self.root(base),
                _ => None,
            })
            .collect()
    }
}

/// Whether removing every barrier could change some memory address: a
/// relevant value is read from memory another thread of the block may write
/// before the barrier, or the kernel frees memory (lifetimes would shift).
fn barriers_matter(k: &Kernel, mode: TaintMode) -> bool {
    let s = Slicer::new(k);
    let loaded = match mode {
        TaintMode::Transitive => {
            let mut seeds = s.branch_seeds();
            seeds.extend(s.index_seeds());
            s.slice(seeds).loaded
        }
        TaintMode::VariableOnly => s.direct_loads(),
    };
    let written_global = |r: &Root| match r {
        Root::Param(p) => {
            s.stores.contains_key(r)
                && matches!(k.param(p).map(|p| &p.kind), Some(ParamKind::Buffer { .. }))
        }
        _ => false,
    };
    let frees = k.instrs().any(|i| matches!(i.kind, InstrKind::Free { .. }));
    frees
        || loaded
            .iter()
            .any(|r| matches!(r, Root::Shared(_)) || written_global(r))
}

/// Removes all barriers when none of them can affect an address.
pub fn barrier_elimination(k: &Kernel) -> Kernel {
    barrier_elimination_with(k, TaintMode::Transitive).0
}

pub fn barrier_elimination_with(k: &Kernel, mode: TaintMode) -> (Kernel, Vec<InstrId>) {
    if k.barrier_count() == 0 || barriers_matter(k, mode) {
        return (k.clone(), Vec::new());
    }
    let mut out = k.clone();
    let mut removed = Vec::new();
    for b in &mut out.blocks {
        b.instrs.retain(|i| {
            let barrier = matches!(i.kind, InstrKind::Barrier);
            if barrier {
                removed.push(i.id);
            }
            !barrier
        });
    }
    (out, removed)
}

/// Removes math calls outside every branch and index slice, forwarding
/// their input to all uses.
pub fn math_elimination(k: &Kernel) -> (Kernel, PruneReport) {
    let s = Slicer::new(k);
    let branch = s.slice(s.branch_seeds()).locals;
    let index = s.slice(s.index_seeds()).locals;
    let mut report = PruneReport::default();
    let mut out = k.clone();
    let maths: Vec<(InstrId, String)> = k
        .instrs()
        .filter_map(|i| match &i.kind {
            InstrKind::Math { dst, .. } => Some((i.id, dst.clone())),
            _ => None,
        })
        .collect();
    for (id, dst) in maths {
        if branch.contains(&dst) {
            report.math_retained.insert(id, RetainReason::UsedInBranch);
            continue;
        }
        if index.contains(&dst) {
            report.math_retained.insert(id, RetainReason::UsedAsIndex);
            continue;
        }
        // Current input, after earlier rewrites.
        let input = out
            .instrs()
            .find(|i| i.id == id)
            .and_then(|i| match &i.kind {
                InstrKind::Math { src, .. } => Some(src.clone()),
                _ => None,
            })
            .expect("math instruction present");
        for b in &mut out.blocks {
            b.instrs.retain(|i| i.id != id);
            for i in &mut b.instrs {
                for e in i.kind.exprs_mut() {
                    e.substitute(&dst, &input);
                }
            }
            if let Terminator::Branch { cond, .. } = &mut b.term {
                cond.substitute(&dst, &input);
            }
        }
        report.math_removed.push(id);
    }
    (out, report)
}

/// Barrier elimination followed by math elimination.
pub fn axiprune(k: &Kernel) -> (Kernel, PruneReport) {
    axiprune_with(k, TaintMode::Transitive)
}

pub fn axiprune_with(k: &Kernel, mode: TaintMode) -> (Kernel, PruneReport) {
    let (k1, barriers) = barrier_elimination_with(k, mode);
    let (k2, mut report) = math_elimination(&k1);
    report.barriers_removed = barriers;
    (k2, report)
}
