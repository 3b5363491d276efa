//! Pretty printer producing text that [`super::parse_kernel`] reads back to
//! a structurally identical kernel.

use std::fmt::Write;

use super::{Expr, Instr, InstrKind, Kernel, ParamKind, SharedDecl, Terminator};

pub fn print_expr(e: &Expr) -> String {
    let mut s = String::new();
    write_expr(&mut s, e, true);
    s
}

fn write_expr(out: &mut String, e: &Expr, parens: bool) {
    match e {
        Expr::Int(v) => write!(out, "{v}").unwrap(),
        Expr::Float(v) => write!(out, "{v:?}").unwrap(),
        Expr::Var(v) => out.push_str(v),
        Expr::Intr(i) => out.push_str(i.name()),
        Expr::Bin(op, l, r) => {
            if parens {
                out.push('(');
            }
            out.push_str(op.name());
            out.push(' ');
            write_expr(out, l, true);
            out.push(' ');
            write_expr(out, r, true);
            if parens {
                out.push(')');
            }
        }
    }
}

/// Bracketed index: a top-level binary op is written without parentheses.
fn index(e: &Expr) -> String {
    let mut s = String::new();
    write_expr(&mut s, e, false);
    s
}

fn fields(f: &[u32]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        let parts: Vec<String> = f.iter().map(|x| x.to_string()).collect();
        format!(" {{{}}}", parts.join(", "))
    }
}

pub fn print_instr(i: &InstrKind) -> String {
    match i {
        InstrKind::Arith { dst, op, lhs, rhs } => {
            format!("{dst} = {} {} {}", op.name(), print_expr(lhs), print_expr(rhs))
        }
        InstrKind::Math { dst, func, src } => format!("{dst} = {} {}", func.name(), print_expr(src)),
        InstrKind::Load { dst, base, index: ix } => format!("{dst} = load {base}[{}]", index(ix)),
        InstrKind::Store {
            base,
            index: ix,
            value,
        } => format!("store {base}[{}] {}", index(ix), print_expr(value)),
        InstrKind::Alloca {
            dst,
            elem,
            count,
            fields: f,
        } => format!("{dst} = alloca {elem} {}{}", print_expr(count), fields(f)),
        InstrKind::Malloc {
            dst,
            api,
            elem,
            size,
        } => format!("{dst} = malloc {} {elem} {}", api.name(), print_expr(size)),
        InstrKind::Free { ptr, api } => format!("free {} {}", api.name(), print_expr(ptr)),
        InstrKind::Field { dst, base, field } => format!("{dst} = field {base} {field}"),
        InstrKind::Enter => "enter".into(),
        InstrKind::Leave => "leave".into(),
        InstrKind::Barrier => "barrier".into(),
    }
}

pub fn print_terminator(t: &Terminator) -> String {
    match t {
        Terminator::Branch {
            cond,
            then_label,
            else_label,
        } => format!("br {} {then_label} {else_label}", print_expr(cond)),
        Terminator::Jump(l) => format!("jmp {l}"),
        Terminator::Return => "return".into(),
    }
}

pub(crate) fn print_param_list(k: &Kernel) -> String {
    let ps: Vec<String> = k
        .params
        .iter()
        .map(|p| match &p.kind {
            ParamKind::Buffer {
                space,
                elem,
                fields: f,
            } => format!("{}: *{space} {elem}{}", p.name, fields(f)),
            ParamKind::Scalar(t) => format!("{}: {t}", p.name),
        })
        .collect();
    ps.join(", ")
}

pub(crate) fn print_shared(s: &SharedDecl) -> String {
    format!(
        "shared {}: {}[{}] {}{}",
        s.name,
        if s.dynamic { "dynamic " } else { "" },
        index(&s.count),
        s.elem,
        fields(&s.fields)
    )
}

pub(crate) fn print_instr_line(i: &Instr, with_id: bool) -> String {
    if with_id {
        format!("@{} {}", i.id, print_instr(&i.kind))
    } else {
        print_instr(&i.kind)
    }
}

pub fn print_kernel(k: &Kernel) -> String {
    let mut out = String::new();
    writeln!(out, "kernel {}({})", k.name, print_param_list(k)).unwrap();
    for s in &k.shared {
        writeln!(out, "{}", print_shared(s)).unwrap();
    }
    let with_ids = !k.has_sequential_ids();
    for b in &k.blocks {
        writeln!(out, "{}:", b.label).unwrap();
        for i in &b.instrs {
            writeln!(out, "  {}", print_instr_line(i, with_ids)).unwrap();
        }
        writeln!(out, "  {}", print_terminator(&b.term)).unwrap();
    }
    out
}
