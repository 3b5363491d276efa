//! Control-flow analyses over a kernel's basic blocks: dominators,
//! post-dominators, control dependence, reducibility and thread variance.

use rustc_hash::{FxHashMap, FxHashSet};

use super::{Expr, InstrKind, Kernel, Terminator};

/// A small dense bitset.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct BitSet {
    words: Vec<u64>,
    len: usize,
}

impl BitSet {
    pub fn new(len: usize) -> Self {
        BitSet {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut s = BitSet::new(len);
        for i in 0..len {
            s.insert(i);
        }
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    pub fn insert(&mut self, i: usize) -> bool {
        let (w, b) = (i / 64, i % 64);
        let was = self.words[w] & (1 << b) != 0;
        self.words[w] |= 1 << b;
        !was
    }

    pub fn remove(&mut self, i: usize) {
        self.words[i / 64] &= !(1 << (i % 64));
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// In-place intersection; returns whether anything changed.
    pub fn intersect_with(&mut self, other: &BitSet) -> bool {
        let mut changed = false;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            let n = *a & *b;
            changed |= n != *a;
            *a = n;
        }
        changed
    }

    /// In-place union; returns whether anything changed.
    pub fn union_with(&mut self, other: &BitSet) -> bool {
        let mut changed = false;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            let n = *a | *b;
            changed |= n != *a;
            *a = n;
        }
        changed
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|i| self.contains(*i))
    }
}

/// Block-level control-flow graph with label indices resolved.
#[derive(Clone, Debug)]
pub struct Cfg {
    pub labels: Vec<String>,
    pub index: FxHashMap<String, usize>,
    pub succs: Vec<Vec<usize>>,
    pub preds: Vec<Vec<usize>>,
    pub entry: usize,
}

impl Cfg {
    /// Builds the graph. Unknown labels are skipped; the validator reports them.
    pub fn new(k: &Kernel) -> Self {
        let labels: Vec<String> = k.blocks.iter().map(|b| b.label.clone()).collect();
        let mut index = FxHashMap::default();
        for (i, l) in labels.iter().enumerate() {
            index.entry(l.clone()).or_insert(i);
        }
        let n = labels.len();
        let mut succs = vec![Vec::new(); n];
        let mut preds = vec![Vec::new(); n];
        for (i, b) in k.blocks.iter().enumerate() {
            for s in b.term.successors() {
                if let Some(&j) = index.get(s) {
                    succs[i].push(j);
                    if !preds[j].contains(&i) {
                        preds[j].push(i);
                    }
                }
            }
        }
        let entry = index.get(&k.entry).copied().unwrap_or(0);
        Cfg {
            labels,
            index,
            succs,
            preds,
            entry,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn reachable(&self) -> BitSet {
        let mut seen = BitSet::new(self.len());
        if self.is_empty() {
            return seen;
        }
        let mut stack = vec![self.entry];
        seen.insert(self.entry);
        while let Some(b) = stack.pop() {
            for &s in &self.succs[b] {
                if seen.insert(s) {
                    stack.push(s);
                }
            }
        }
        seen
    }

    /// `dom[b]` is the set of blocks dominating `b` (including `b`).
    /// Unreachable blocks are dominated by everything.
    pub fn dominators(&self) -> Vec<BitSet> {
        let n = self.len();
        let mut dom = vec![BitSet::full(n); n];
        if n == 0 {
            return dom;
        }
        dom[self.entry] = BitSet::new(n);
        dom[self.entry].insert(self.entry);
        let order = self.reverse_postorder();
        let mut changed = true;
        while changed {
            changed = false;
            for &b in &order {
                if b == self.entry {
                    continue;
                }
                let mut acc = BitSet::full(n);
                for &p in &self.preds[b] {
                    acc.intersect_with(&dom[p]);
                }
                acc.insert(b);
                if acc != dom[b] {
                    dom[b] = acc;
                    changed = true;
                }
            }
        }
        dom
    }

    /// `pdom[b]` is the set of blocks post-dominating `b`, computed against a
    /// virtual exit joined by every returning block. Blocks that cannot reach
    /// an exit are post-dominated by everything.
    pub fn post_dominators(&self, k: &Kernel) -> Vec<BitSet> {
        let n = self.len();
        let exits: Vec<usize> = (0..n)
            .filter(|&i| matches!(k.blocks[i].term, Terminator::Return))
            .collect();
        let mut pdom = vec![BitSet::full(n); n];
        for &e in &exits {
            pdom[e] = BitSet::new(n);
            pdom[e].insert(e);
        }
        let mut changed = true;
        while changed {
            changed = false;
            for b in (0..n).rev() {
                if exits.contains(&b) {
                    continue;
                }
                let mut acc = BitSet::full(n);
                for &s in &self.succs[b] {
                    acc.intersect_with(&pdom[s]);
                }
                acc.insert(b);
                if acc != pdom[b] {
                    pdom[b] = acc;
                    changed = true;
                }
            }
        }
        pdom
    }

    /// `cd[y]` holds every branching block `x` that `y` is directly control
    /// dependent on: `y` post-dominates a successor of `x` but does not
    /// strictly post-dominate `x`.
    pub fn control_dependence(&self, k: &Kernel) -> Vec<BitSet> {
        let n = self.len();
        let pdom = self.post_dominators(k);
        let mut cd = vec![BitSet::new(n); n];
        for x in 0..n {
            if self.succs[x].len() < 2 {
                continue;
            }
            for &s in &self.succs[x] {
                for (y, cdy) in cd.iter_mut().enumerate() {
                    let strictly_pdoms_x = y != x && pdom[x].contains(y);
                    if pdom[s].contains(y) && !strictly_pdoms_x {
                        cdy.insert(x);
                    }
                }
            }
        }
        cd
    }

    /// Transitive closure of [`Cfg::control_dependence`].
    pub fn transitive_control_dependence(&self, k: &Kernel) -> Vec<BitSet> {
        let mut cd = self.control_dependence(k);
        let mut changed = true;
        while changed {
            changed = false;
            for y in 0..cd.len() {
                let direct: Vec<usize> = cd[y].iter().collect();
                for x in direct {
                    if x == y {
                        continue;
                    }
                    let up = cd[x].clone();
                    changed |= cd[y].union_with(&up);
                }
            }
        }
        cd
    }

    pub fn reverse_postorder(&self) -> Vec<usize> {
        let n = self.len();
        let mut order = Vec::with_capacity(n);
        if n == 0 {
            return order;
        }
        let mut seen = vec![false; n];
        let mut stack: Vec<(usize, usize)> = vec![(self.entry, 0)];
        seen[self.entry] = true;
        while let Some((b, i)) = stack.pop() {
            if i < self.succs[b].len() {
                stack.push((b, i + 1));
                let s = self.succs[b][i];
                if !seen[s] {
                    seen[s] = true;
                    stack.push((s, 0));
                }
            } else {
                order.push(b);
            }
        }
        order.reverse();
        order
    }

    /// A CFG is reducible iff every retreating edge of a depth-first walk
    /// targets a block that dominates its source.
    pub fn is_reducible(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return true;
        }
        let dom = self.dominators();
        let mut on_stack = vec![false; n];
        let mut seen = vec![false; n];
        let mut stack: Vec<(usize, usize)> = vec![(self.entry, 0)];
        seen[self.entry] = true;
        on_stack[self.entry] = true;
        while let Some((b, i)) = stack.pop() {
            if i < self.succs[b].len() {
                stack.push((b, i + 1));
                let s = self.succs[b][i];
                if on_stack[s] {
                    if !dom[b].contains(s) {
                        return false;
                    }
                } else if !seen[s] {
                    seen[s] = true;
                    on_stack[s] = true;
                    stack.push((s, 0));
                }
            } else {
                on_stack[b] = false;
            }
        }
        true
    }
}

/// Locals whose value may differ between threads: anything derived from
/// threadIdx/blockIdx, loaded from memory, or produced by an allocation.
pub fn thread_variant_locals(k: &Kernel) -> FxHashSet<String> {
    let mut variant: FxHashSet<String> = FxHashSet::default();
    let mut changed = true;
    while changed {
        changed = false;
        for ins in k.instrs() {
            let Some(dst) = ins.kind.dst() else { continue };
            if variant.contains(dst) {
                continue;
            }
            let v = match &ins.kind {
                InstrKind::Load { .. } | InstrKind::Alloca { .. } | InstrKind::Malloc { .. } => {
                    true
                }
                InstrKind::Field { base, .. } => variant.contains(base),
                other => other
                    .exprs()
                    .iter()
                    .any(|e| expr_is_variant(e, &variant)),
            };
            if v {
                variant.insert(dst.to_string());
                changed = true;
            }
        }
    }
    variant
}

pub fn expr_is_variant(e: &Expr, variant: &FxHashSet<String>) -> bool {
    if e.mentions_intrinsic(|i| i.is_thread_variant()) {
        return true;
    }
    let mut hit = false;
    e.for_each_var(&mut |v| hit |= variant.contains(v));
    hit
}

/// For every block, whether it is (transitively) control dependent on a
/// branch with a thread-variant condition.
pub fn variant_controlled_blocks(k: &Kernel, cfg: &Cfg) -> Vec<bool> {
    let variant = thread_variant_locals(k);
    let tcd = cfg.transitive_control_dependence(k);
    let variant_branch: Vec<bool> = k
        .blocks
        .iter()
        .map(|b| match &b.term {
            Terminator::Branch { cond, .. } => expr_is_variant(cond, &variant),
            _ => false,
        })
        .collect();
    tcd.iter()
        .map(|deps| deps.iter().any(|x| variant_branch[x]))
        .collect()
}
