//! Kernel validation: names, labels, def-before-use, light type checking,
//! reducibility and barrier placement.

use rustc_hash::{FxHashMap, FxHashSet};

use super::cfg::{variant_controlled_blocks, Cfg};
use super::{
    BinOp, Expr, InstrKind, Kernel, KirError, ParamKind, Rule, ScalarType, Terminator,
};

/// Static kind of a value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ValueKind {
    Int,
    Float,
    Ptr(ScalarType),
}

impl ValueKind {
    fn numeric(self) -> bool {
        !matches!(self, ValueKind::Ptr(_))
    }
}

struct Checker<'k> {
    k: &'k Kernel,
    kinds: FxHashMap<&'k str, ValueKind>,
    fields: FxHashMap<&'k str, usize>,
}

fn err(rule: Rule, loc: impl Into<String>) -> KirError {
    KirError::validation(rule, loc)
}

impl<'k> Checker<'k> {
    fn expr(&self, e: &Expr, loc: &str) -> Result<ValueKind, KirError> {
        Ok(match e {
            Expr::Int(_) | Expr::Intr(_) => ValueKind::Int,
            Expr::Float(_) => ValueKind::Float,
            Expr::Var(v) => match self.kinds.get(v.as_str()) {
                Some(k) => *k,
                None => return Err(err(Rule::UnknownName, format!("{loc} ({v})"))),
            },
            Expr::Bin(op, l, r) => {
                let a = self.expr(l, loc)?;
                let b = self.expr(r, loc)?;
                binop_kind(*op, a, b).ok_or_else(|| err(Rule::TypeMismatch, format!("{loc} ({})", op.name())))?
            }
        })
    }

    fn numeric(&self, e: &Expr, loc: &str) -> Result<(), KirError> {
        if self.expr(e, loc)?.numeric() {
            Ok(())
        } else {
            Err(err(Rule::TypeMismatch, format!("{loc} (expected a number)")))
        }
    }

    fn pointer(&self, name: &str, loc: &str) -> Result<ScalarType, KirError> {
        match self.kinds.get(name) {
            Some(ValueKind::Ptr(t)) => Ok(*t),
            Some(_) => Err(err(Rule::TypeMismatch, format!("{loc} ({name} is not a pointer)"))),
            None => Err(err(Rule::UnknownName, format!("{loc} ({name})"))),
        }
    }
}

pub(crate) fn binop_kind(op: BinOp, a: ValueKind, b: ValueKind) -> Option<ValueKind> {
    use ValueKind::*;
    match (a, b) {
        (Ptr(t), Int) if matches!(op, BinOp::Add | BinOp::Sub) => Some(Ptr(t)),
        (Int, Ptr(t)) if op == BinOp::Add => Some(Ptr(t)),
        (Ptr(_), Ptr(_)) if op == BinOp::Sub => Some(Int),
        (Ptr(_), Ptr(_)) if matches!(op, BinOp::Eq | BinOp::Ne) => Some(Int),
        (Ptr(_), _) | (_, Ptr(_)) => None,
        _ if op.is_comparison() => Some(Int),
        (Int, Int) => Some(Int),
        _ if matches!(op, BinOp::And | BinOp::Or | BinOp::Xor | BinOp::Shl | BinOp::Shr) => None,
        _ => Some(Float),
    }
}

/// Checks every kernel invariant; parse_kernel calls this on its output.
pub fn validate(k: &Kernel) -> Result<(), KirError> {
    if k.blocks.is_empty() {
        return Err(err(Rule::EmptyKernel, &k.name));
    }
    if k.entry != k.blocks[0].label {
        return Err(err(Rule::UnknownLabel, format!("entry {}", k.entry)));
    }
    // labels
    let mut labels = FxHashSet::default();
    for b in &k.blocks {
        if !labels.insert(b.label.as_str()) {
            return Err(err(Rule::DuplicateLabel, &b.label));
        }
    }
    for b in &k.blocks {
        for s in b.term.successors() {
            if !labels.contains(s) {
                return Err(err(Rule::UnknownLabel, format!("{} -> {s}", b.label)));
            }
        }
    }

    // names
    let mut c = Checker {
        k,
        kinds: FxHashMap::default(),
        fields: FxHashMap::default(),
    };
    let mut seen_ids = FxHashSet::default();
    for p in &k.params {
        let kind = match &p.kind {
            ParamKind::Buffer { space, elem, fields } => {
                if !space.is_global() {
                    return Err(err(Rule::BadParam, format!("{} must point to global memory", p.name)));
                }
                c.fields.insert(&p.name, fields.len());
                ValueKind::Ptr(*elem)
            }
            ParamKind::Scalar(t) if t.is_float() => ValueKind::Float,
            ParamKind::Scalar(_) => ValueKind::Int,
        };
        if c.kinds.insert(&p.name, kind).is_some() {
            return Err(err(Rule::DuplicateName, &p.name));
        }
    }
    for s in &k.shared {
        if c.kinds.insert(&s.name, ValueKind::Ptr(s.elem)).is_some() {
            return Err(err(Rule::DuplicateName, &s.name));
        }
        c.fields.insert(&s.name, s.fields.len());
    }
    // Shared counts may only mention scalar params and launch dimensions.
    for s in &k.shared {
        let loc = format!("shared {}", s.name);
        if s.count.mentions_intrinsic(|i| i.is_thread_variant()) {
            return Err(err(Rule::BadShared, loc));
        }
        for v in s.count.vars() {
            match k.param(v) {
                Some(p) if !p.is_buffer() => {}
                _ => return Err(err(Rule::BadShared, format!("{loc} ({v})"))),
            }
        }
        if c.expr(&s.count, &loc)? != ValueKind::Int {
            return Err(err(Rule::TypeMismatch, loc));
        }
        if !s.fields.is_empty() && s.dynamic {
            return Err(err(Rule::BadShared, format!("{loc} (dynamic arrays cannot declare fields)")));
        }
    }
    let mut def_site: FxHashMap<&str, (usize, usize)> = FxHashMap::default();
    for (bi, b) in k.blocks.iter().enumerate() {
        for (ii, ins) in b.instrs.iter().enumerate() {
            if !seen_ids.insert(ins.id) {
                return Err(err(Rule::DuplicateName, format!("instruction id {}", ins.id)));
            }
            if let Some(d) = ins.kind.dst() {
                if c.kinds.contains_key(d) || def_site.contains_key(d) {
                    return Err(err(Rule::DuplicateName, format!("{}:{} ({d})", b.label, ii)));
                }
                def_site.insert(d, (bi, ii));
            }
        }
    }

    let cfg = Cfg::new(k);
    if !cfg.is_reducible() {
        return Err(err(Rule::IrreducibleCfg, &k.name));
    }
    let dom = cfg.dominators();
    let reach = cfg.reachable();

    // Types are assigned in reverse postorder; with dominance-checked uses
    // every operand's kind is known before it is needed.
    let order = cfg.reverse_postorder();
    for &bi in &order {
        let b = &k.blocks[bi];
        for (ii, ins) in b.instrs.iter().enumerate() {
            let loc = format!("{}:{} (instr {})", b.label, ii, ins.id);
            for u in ins.kind.uses() {
                check_use(&c, &def_site, &dom, u, bi, ii, &loc)?;
            }
            let kind = type_instr(&c, &ins.kind, &loc)?;
            if let (Some(d), Some(kind)) = (ins.kind.dst(), kind) {
                c.kinds.insert(d, kind);
            }
            match &ins.kind {
                InstrKind::Field { base, field, .. } => {
                    let n = c.fields.get(base.as_str()).copied().unwrap_or(0);
                    if *field as usize >= n {
                        return Err(err(Rule::BadField, format!("{loc} ({base}.{field})")));
                    }
                }
                InstrKind::Alloca { dst, fields, .. } => {
                    c.fields.insert(dst, fields.len());
                }
                _ => {}
            }
        }
        let loc = format!("{} (terminator)", b.label);
        if let Terminator::Branch { cond, .. } = &b.term {
            for u in cond.vars() {
                check_use(&c, &def_site, &dom, u, bi, b.instrs.len(), &loc)?;
            }
            c.numeric(cond, &loc)?;
        }
    }
    // Unreachable blocks still need their names to resolve.
    for (bi, b) in k.blocks.iter().enumerate() {
        if reach.contains(bi) {
            continue;
        }
        for ins in &b.instrs {
            for u in ins.kind.uses() {
                if !c.kinds.contains_key(u) {
                    return Err(err(Rule::UnknownName, format!("{} ({u})", b.label)));
                }
            }
        }
    }

    // Barriers must not sit under thread-variant control flow.
    let controlled = variant_controlled_blocks(k, &cfg);
    for (bi, b) in k.blocks.iter().enumerate() {
        if !controlled[bi] {
            continue;
        }
        if let Some(ins) = b.instrs.iter().find(|i| matches!(i.kind, InstrKind::Barrier)) {
            return Err(err(Rule::DivergentBarrier, format!("{} (instr {})", b.label, ins.id)));
        }
    }
    Ok(())
}

fn check_use(
    c: &Checker<'_>,
    def_site: &FxHashMap<&str, (usize, usize)>,
    dom: &[super::cfg::BitSet],
    name: &str,
    bi: usize,
    ii: usize,
    loc: &str,
) -> Result<(), KirError> {
    if c.k.param(name).is_some() || c.k.shared_decl(name).is_some() {
        return Ok(());
    }
    match def_site.get(name) {
        None => Err(err(Rule::UnknownName, format!("{loc} ({name})"))),
        Some(&(db, di)) => {
            let ok = if db == bi { di < ii } else { dom[bi].contains(db) };
            if ok {
                Ok(())
            } else {
                Err(err(Rule::UseBeforeDef, format!("{loc} ({name})")))
            }
        }
    }
}

fn type_instr(c: &Checker<'_>, i: &InstrKind, loc: &str) -> Result<Option<ValueKind>, KirError> {
    let index_ok = |e: &Expr| -> Result<(), KirError> { c.numeric(e, loc) };
    Ok(match i {
        InstrKind::Arith { op, lhs, rhs, .. } => {
            let a = c.expr(lhs, loc)?;
            let b = c.expr(rhs, loc)?;
            Some(binop_kind(*op, a, b).ok_or_else(|| err(Rule::TypeMismatch, format!("{loc} ({})", op.name())))?)
        }
        InstrKind::Math { src, .. } => {
            c.numeric(src, loc)?;
            Some(ValueKind::Float)
        }
        InstrKind::Load { base, index, .. } => {
            let t = c.pointer(base, loc)?;
            index_ok(index)?;
            Some(if t.is_float() { ValueKind::Float } else { ValueKind::Int })
        }
        InstrKind::Store { base, index, value } => {
            c.pointer(base, loc)?;
            index_ok(index)?;
            c.numeric(value, loc)?;
            None
        }
        InstrKind::Alloca { elem, count, .. } => {
            index_ok(count)?;
            Some(ValueKind::Ptr(*elem))
        }
        InstrKind::Malloc { elem, size, .. } => {
            index_ok(size)?;
            Some(ValueKind::Ptr(*elem))
        }
        InstrKind::Free { ptr, .. } => match c.expr(ptr, loc)? {
            ValueKind::Ptr(_) => None,
            _ => return Err(err(Rule::TypeMismatch, format!("{loc} (free of a non-pointer)"))),
        },
        InstrKind::Field { base, .. } => Some(ValueKind::Ptr(c.pointer(base, loc)?)),
        InstrKind::Enter | InstrKind::Leave | InstrKind::Barrier => None,
    })
}

#[cfg(test)]
mod tests {
    use crate::kir::{parse_kernel, KirError, Rule};

    fn rule_of(src: &str) -> Rule {
        match parse_kernel(src).unwrap_err() {
            KirError::Validation { rule, .. } => rule,
            e => panic!("expected validation error, got {e}"),
        }
    }

    #[test]
    fn divergent_barrier_rejected() {
        let r = rule_of(
            "kernel k(n: i32)
entry:
  br (lt threadIdx.x n) a b
a:
  barrier
  jmp b
b:
  return",
        );
        assert_eq!(r, Rule::DivergentBarrier);
    }

    #[test]
    fn uniform_barrier_accepted() {
        parse_kernel(
            "kernel k(n: i32)
entry:
  br (lt 3 n) a b
a:
  barrier
  jmp b
b:
  return",
        )
        .unwrap();
    }

    #[test]
    fn unknown_label_and_use_before_def() {
        assert_eq!(rule_of("kernel k()\n jmp nowhere"), Rule::UnknownLabel);
        assert_eq!(
            rule_of(
                "kernel k(c: *global_host i32)
entry:
  br 1 a b
a:
  x = add 1 2
  jmp b
b:
  store c[x] 1
  return"
            ),
            Rule::UseBeforeDef
        );
    }

    #[test]
    fn irreducible_rejected() {
        let r = rule_of(
            "kernel k(n: i32)
entry:
  br n a b
a:
  jmp b
b:
  jmp a",
        );
        assert_eq!(r, Rule::IrreducibleCfg);
    }

    #[test]
    fn type_errors() {
        assert_eq!(rule_of("kernel k(n: i32)\n x = load n[0]\n return"), Rule::TypeMismatch);
        assert_eq!(rule_of("kernel k(a: *global_host f32)\n x = mul a 2\n return"), Rule::TypeMismatch);
        assert_eq!(rule_of("kernel k(a: *local_static f32)\n return"), Rule::BadParam);
        assert_eq!(rule_of("kernel k(a: *global_host f32)\n x = field a 0\n return"), Rule::BadField);
    }

    #[test]
    fn duplicate_definition_rejected() {
        assert_eq!(rule_of("kernel k()\n x = add 1 2\n x = add 1 3\n return"), Rule::DuplicateName);
    }
}
