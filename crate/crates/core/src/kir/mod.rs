//! The kernel IR: a small, line-oriented SPMD language with labelled basic
//! blocks, explicit memory spaces and 1-D thread/block intrinsics.
//!
//! Kernels are produced by [`parse_kernel`], which runs the validator, and
//! rendered back to text by [`print_kernel`]. Every other stage of the
//! pipeline consumes the immutable [`Kernel`] value.

pub mod cfg;
mod parse;
pub(crate) mod print;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::parse_kernel;
pub use print::{print_expr, print_instr, print_kernel, print_terminator};
pub use validate::{validate, ValueKind};

/// Scalar element types. Pointers are opaque handles carrying one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScalarType {
    I32,
    I64,
    F32,
    F64,
}

impl ScalarType {
    pub fn size(self) -> u64 {
        match self {
            ScalarType::I32 | ScalarType::F32 => 4,
            ScalarType::I64 | ScalarType::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }

    pub fn name(self) -> &'static str {
        match self {
            ScalarType::I32 => "i32",
            ScalarType::I64 => "i64",
            ScalarType::F32 => "f32",
            ScalarType::F64 => "f64",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "i32" => ScalarType::I32,
            "i64" => ScalarType::I64,
            "f32" => ScalarType::F32,
            "f64" => ScalarType::F64,
            _ => return None,
        })
    }
}

impl fmt::Display for ScalarType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The memory-space taxonomy. Closed: every allocation belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorySpace {
    GlobalHost,
    GlobalDevice,
    LocalStatic,
    LocalDynamic,
    SharedStatic,
    SharedDynamic,
}

impl MemorySpace {
    pub const ALL: [MemorySpace; 6] = [
        MemorySpace::GlobalHost,
        MemorySpace::GlobalDevice,
        MemorySpace::LocalStatic,
        MemorySpace::LocalDynamic,
        MemorySpace::SharedStatic,
        MemorySpace::SharedDynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MemorySpace::GlobalHost => "global_host",
            MemorySpace::GlobalDevice => "global_device",
            MemorySpace::LocalStatic => "local_static",
            MemorySpace::LocalDynamic => "local_dynamic",
            MemorySpace::SharedStatic => "shared_static",
            MemorySpace::SharedDynamic => "shared_dynamic",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        MemorySpace::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_global(self) -> bool {
        matches!(self, MemorySpace::GlobalHost | MemorySpace::GlobalDevice)
    }
}

impl fmt::Display for MemorySpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which allocation API a heap operation goes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeapApi {
    /// Emulated host runtime allocation (`cudaMalloc` / `cudaFree`).
    Host,
    /// In-kernel `malloc` / `free`.
    Device,
}

impl HeapApi {
    pub fn name(self) -> &'static str {
        match self {
            HeapApi::Host => "host",
            HeapApi::Device => "device",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    /// A pointer to global memory. `fields` optionally splits the allocation
    /// into consecutive sub-objects (element counts).
    Buffer {
        space: MemorySpace,
        elem: ScalarType,
        fields: Vec<u32>,
    },
    Scalar(ScalarType),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
}

impl Param {
    pub fn is_buffer(&self) -> bool {
        matches!(self.kind, ParamKind::Buffer { .. })
    }
}

/// A block-level shared array. Dynamic declarations are carve-outs of the
/// single launch-sized dynamic shared region, laid out in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedDecl {
    pub name: String,
    pub elem: ScalarType,
    pub count: Expr,
    pub dynamic: bool,
    pub fields: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intrinsic {
    ThreadIdx,
    BlockIdx,
    BlockDim,
    GridDim,
}

impl Intrinsic {
    pub fn name(self) -> &'static str {
        match self {
            Intrinsic::ThreadIdx => "threadIdx.x",
            Intrinsic::BlockIdx => "blockIdx.x",
            Intrinsic::BlockDim => "blockDim.x",
            Intrinsic::GridDim => "gridDim.x",
        }
    }

    /// threadIdx and blockIdx differ between threads; the dims do not.
    pub fn is_thread_variant(self) -> bool {
        matches!(self, Intrinsic::ThreadIdx | Intrinsic::BlockIdx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Min,
    Max,
}

impl BinOp {
    pub const ALL: [BinOp; 18] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Div,
        BinOp::Rem,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Eq,
        BinOp::Ne,
        BinOp::Lt,
        BinOp::Le,
        BinOp::Gt,
        BinOp::Ge,
        BinOp::Min,
        BinOp::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
            BinOp::Rem => "rem",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Eq => "eq",
            BinOp::Ne => "ne",
            BinOp::Lt => "lt",
            BinOp::Le => "le",
            BinOp::Gt => "gt",
            BinOp::Ge => "ge",
            BinOp::Min => "min",
            BinOp::Max => "max",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        BinOp::ALL.into_iter().find(|op| op.name() == s)
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            BinOp::Eq | BinOp::Ne | BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MathFn {
    Sqrt,
    Exp,
    Log,
    Sin,
    Cos,
}

impl MathFn {
    pub const ALL: [MathFn; 5] = [MathFn::Sqrt, MathFn::Exp, MathFn::Log, MathFn::Sin, MathFn::Cos];

    pub fn name(self) -> &'static str {
        match self {
            MathFn::Sqrt => "sqrt",
            MathFn::Exp => "exp",
            MathFn::Log => "log",
            MathFn::Sin => "sin",
            MathFn::Cos => "cos",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        MathFn::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            MathFn::Sqrt => x.sqrt(),
            MathFn::Exp => x.exp(),
            MathFn::Log => x.ln(),
            MathFn::Sin => x.sin(),
            MathFn::Cos => x.cos(),
        }
    }
}

/// Expression trees used for operands, indices and sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Int(i64),
    Float(f64),
    /// A local, parameter or shared-array name.
    Var(String),
    Intr(Intrinsic),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Self {
        Expr::Var(name.into())
    }

    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Bin(op, Box::new(lhs), Box::new(rhs))
    }

    /// Calls `f` on every variable name referenced by the expression.
    pub fn for_each_var<'a>(&'a self, f: &mut impl FnMut(&'a str)) {
        match self {
            Expr::Var(v) => f(v),
            Expr::Bin(_, l, r) => {
                l.for_each_var(f);
                r.for_each_var(f);
            }
            Expr::Int(_) | Expr::Float(_) | Expr::Intr(_) => {}
        }
    }

    pub fn vars(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.for_each_var(&mut |v| out.push(v));
        out
    }

    pub fn mentions_intrinsic(&self, pred: impl Fn(Intrinsic) -> bool + Copy) -> bool {
        match self {
            Expr::Intr(i) => pred(*i),
            Expr::Bin(_, l, r) => l.mentions_intrinsic(pred) || r.mentions_intrinsic(pred),
            _ => false,
        }
    }

    /// Replaces every occurrence of variable `name` with `with`.
    pub fn substitute(&mut self, name: &str, with: &Expr) {
        match self {
            Expr::Var(v) if v == name => *self = with.clone(),
            Expr::Bin(_, l, r) => {
                l.substitute(name, with);
                r.substitute(name, with);
            }
            _ => {}
        }
    }
}

/// Original-instruction identifier, stable across transformations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstrId(pub u32);

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InstrKind {
    Arith {
        dst: String,
        op: BinOp,
        lhs: Expr,
        rhs: Expr,
    },
    Math {
        dst: String,
        func: MathFn,
        src: Expr,
    },
    Load {
        dst: String,
        base: String,
        index: Expr,
    },
    Store {
        base: String,
        index: Expr,
        value: Expr,
    },
    /// Stack array of `count` elements in the thread's current frame.
    Alloca {
        dst: String,
        elem: ScalarType,
        count: Expr,
        fields: Vec<u32>,
    },
    /// Heap allocation of `size` bytes.
    Malloc {
        dst: String,
        api: HeapApi,
        elem: ScalarType,
        size: Expr,
    },
    Free {
        ptr: Expr,
        api: HeapApi,
    },
    /// Pointer to declared sub-object `field` of `base`.
    Field {
        dst: String,
        base: String,
        field: u32,
    },
    /// Opens a nested stack frame (a call boundary).
    Enter,
    /// Closes the innermost frame; its stack arrays go out of scope.
    Leave,
    Barrier,
}

impl InstrKind {
    pub fn dst(&self) -> Option<&str> {
        match self {
            InstrKind::Arith { dst, .. }
            | InstrKind::Math { dst, .. }
            | InstrKind::Load { dst, .. }
            | InstrKind::Alloca { dst, .. }
            | InstrKind::Malloc { dst, .. }
            | InstrKind::Field { dst, .. } => Some(dst),
            _ => None,
        }
    }

    pub fn is_memory_access(&self) -> bool {
        matches!(self, InstrKind::Load { .. } | InstrKind::Store { .. })
    }

    /// Every expression operand, in source order.
    pub fn exprs(&self) -> Vec<&Expr> {
        match self {
            InstrKind::Arith { lhs, rhs, .. } => vec![lhs, rhs],
            InstrKind::Math { src, .. } => vec![src],
            InstrKind::Load { index, .. } => vec![index],
            InstrKind::Store { index, value, .. } => vec![index, value],
            InstrKind::Alloca { count, .. } => vec![count],
            InstrKind::Malloc { size, .. } => vec![size],
            InstrKind::Free { ptr, .. } => vec![ptr],
            _ => vec![],
        }
    }

    pub fn exprs_mut(&mut self) -> Vec<&mut Expr> {
        match self {
            InstrKind::Arith { lhs, rhs, .. } => vec![lhs, rhs],
            InstrKind::Math { src, .. } => vec![src],
            InstrKind::Load { index, .. } => vec![index],
            InstrKind::Store { index, value, .. } => vec![index, value],
            InstrKind::Alloca { count, .. } => vec![count],
            InstrKind::Malloc { size, .. } => vec![size],
            InstrKind::Free { ptr, .. } => vec![ptr],
            _ => vec![],
        }
    }

    /// Names read by this instruction, including load/store/field bases.
    pub fn uses(&self) -> Vec<&str> {
        let mut out = Vec::new();
        match self {
            InstrKind::Load { base, .. }
            | InstrKind::Store { base, .. }
            | InstrKind::Field { base, .. } => out.push(base.as_str()),
            _ => {}
        }
        for e in self.exprs() {
            e.for_each_var(&mut |v| out.push(v));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instr {
    pub id: InstrId,
    pub kind: InstrKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Terminator {
    Branch {
        cond: Expr,
        then_label: String,
        else_label: String,
    },
    Jump(String),
    Return,
}

impl Terminator {
    pub fn successors(&self) -> Vec<&str> {
        match self {
            Terminator::Branch {
                then_label,
                else_label,
                ..
            } => vec![then_label, else_label],
            Terminator::Jump(l) => vec![l],
            Terminator::Return => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub label: String,
    pub instrs: Vec<Instr>,
    pub term: Terminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub name: String,
    pub params: Vec<Param>,
    pub shared: Vec<SharedDecl>,
    pub blocks: Vec<BasicBlock>,
    pub entry: String,
}

impl Kernel {
    pub fn instrs(&self) -> impl Iterator<Item = &Instr> {
        self.blocks.iter().flat_map(|b| b.instrs.iter())
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instrs.len()).sum()
    }

    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn shared_decl(&self, name: &str) -> Option<&SharedDecl> {
        self.shared.iter().find(|s| s.name == name)
    }

    pub fn barrier_count(&self) -> usize {
        self.instrs()
            .filter(|i| matches!(i.kind, InstrKind::Barrier))
            .count()
    }

    /// Ids of every load/store, in program order.
    pub fn memory_access_ids(&self) -> Vec<InstrId> {
        self.instrs()
            .filter(|i| i.kind.is_memory_access())
            .map(|i| i.id)
            .collect()
    }

    /// Whether instruction ids are exactly 0, 1, 2, ... in program order.
    pub fn has_sequential_ids(&self) -> bool {
        self.instrs().enumerate().all(|(n, i)| i.id.0 as usize == n)
    }

    /// The defining instruction of local `name`, if any.
    pub fn def_of(&self, name: &str) -> Option<&Instr> {
        self.instrs().find(|i| i.kind.dst() == Some(name))
    }
}

/// Number of load/store instructions; allocation and free are not counted.
pub fn count_memory_accesses(k: &Kernel) -> usize {
    k.instrs().filter(|i| i.kind.is_memory_access()).count()
}

/// 1-D launch geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridConfig {
    pub blocks: u32,
    pub threads: u32,
    pub dyn_shared_bytes: u64,
}

impl GridConfig {
    pub fn new(blocks: u32, threads: u32) -> Self {
        GridConfig {
            blocks,
            threads,
            dyn_shared_bytes: 0,
        }
    }

    pub fn with_dyn_shared(mut self, bytes: u64) -> Self {
        self.dyn_shared_bytes = bytes;
        self
    }

    /// Rejects empty grids so no later stage divides by a zero dimension.
    pub fn check(&self) -> Result<(), GridError> {
        if self.blocks == 0 {
            return Err(GridError::ZeroDimension("blocks"));
        }
        if self.threads == 0 {
            return Err(GridError::ZeroDimension("threads"));
        }
        Ok(())
    }

    pub fn total_threads(&self) -> u64 {
        self.blocks as u64 * self.threads as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("invalid launch configuration: zero {0}")]
    ZeroDimension(&'static str),
}

/// Validation rules a parsed kernel can violate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateLabel,
    UnknownLabel,
    DuplicateName,
    UnknownName,
    UseBeforeDef,
    MultiDimIntrinsic,
    DivergentBarrier,
    IrreducibleCfg,
    TypeMismatch,
    BadParam,
    BadShared,
    BadField,
    EmptyKernel,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::DuplicateLabel => "duplicate_label",
            Rule::UnknownLabel => "unknown_label",
            Rule::DuplicateName => "duplicate_name",
            Rule::UnknownName => "unknown_name",
            Rule::UseBeforeDef => "use_before_def",
            Rule::MultiDimIntrinsic => "multi_dim_intrinsic",
            Rule::DivergentBarrier => "divergent_barrier",
            Rule::IrreducibleCfg => "irreducible_cfg",
            Rule::TypeMismatch => "type_mismatch",
            Rule::BadParam => "bad_param",
            Rule::BadShared => "bad_shared",
            Rule::BadField => "bad_field",
            Rule::EmptyKernel => "empty_kernel",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KirError {
    #[error("{line}:{col}: syntax error: expected {expected}")]
    Syntax {
        line: usize,
        col: usize,
        expected: String,
    },
    #[error("validation error [{rule}] at {location}")]
    Validation { rule: Rule, location: String },
}

impl KirError {
    pub fn validation(rule: Rule, location: impl Into<String>) -> Self {
        KirError::Validation {
            rule,
            location: location.into(),
        }
    }

    pub fn is_syntax(&self) -> bool {
        matches!(self, KirError::Syntax { .. })
    }
}
