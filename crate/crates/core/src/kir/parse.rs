//! Lexer and recursive-descent parser for the textual kernel format.

use super::{
    validate, BasicBlock, BinOp, Expr, HeapApi, Instr, InstrId, InstrKind, Intrinsic, Kernel,
    KirError, MathFn, MemorySpace, Param, ParamKind, Rule, ScalarType, SharedDecl, Terminator,
};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Sym(char),
    Newline,
    Eof,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, KirError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let push = |out: &mut Vec<Token>, tok| out.push(Token { tok, line: tl, col: tc });
        match c {
            '\n' => {
                push(&mut out, Tok::Newline);
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            ' ' | '\t' | '\r' => {}
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            ';' => push(&mut out, Tok::Newline),
            '(' | ')' | '[' | ']' | '{' | '}' | ':' | ',' | '*' | '=' | '@' => {
                push(&mut out, Tok::Sym(c))
            }
            _ if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) => {
                let start = i;
                i += 1;
                let mut is_float = false;
                while i < chars.len() {
                    let d = chars[i];
                    if d.is_ascii_digit() {
                        i += 1;
                    } else if d == '.' && !is_float && chars.get(i + 1).is_some_and(|e| e.is_ascii_digit()) {
                        is_float = true;
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && (chars.get(i + 1).is_some_and(|e| e.is_ascii_digit())
                            || (matches!(chars.get(i + 1), Some('-') | Some('+'))
                                && chars.get(i + 2).is_some_and(|e| e.is_ascii_digit())))
                    {
                        is_float = true;
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let tok = if is_float {
                    text.parse::<f64>().ok().map(Tok::Float)
                } else {
                    text.parse::<i64>().ok().map(Tok::Int)
                };
                let Some(tok) = tok else {
                    return Err(KirError::Syntax {
                        line: tl,
                        col: tc,
                        expected: "a literal that fits in 64 bits".into(),
                    });
                };
                push(&mut out, tok);
                col += i - start;
                continue;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() {
                    let d = chars[i];
                    if d.is_ascii_alphanumeric() || d == '_' {
                        i += 1;
                    } else if d == '.'
                        && chars
                            .get(i + 1)
                            .is_some_and(|e| e.is_ascii_alphabetic() || *e == '_')
                    {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                push(&mut out, Tok::Ident(text));
                col += i - start;
                continue;
            }
            _ => {
                return Err(KirError::Syntax {
                    line,
                    col,
                    expected: format!("a token, found {c:?}"),
                })
            }
        }
        i += 1;
        col += 1;
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    braced: bool,
    next_id: u32,
}

const INSTR_KEYWORDS: &[&str] = &[
    "store", "free", "barrier", "enter", "leave", "br", "branch", "jmp", "jump", "return", "shared",
];

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, n: usize) -> &Tok {
        let i = (self.pos + n).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, expected: impl Into<String>) -> Result<T, KirError> {
        let t = &self.toks[self.pos];
        Err(KirError::Syntax {
            line: t.line,
            col: t.col,
            expected: expected.into(),
        })
    }

    fn location(&self) -> String {
        let t = &self.toks[self.pos];
        format!("{}:{}", t.line, t.col)
    }

    fn is_sym(&self, c: char) -> bool {
        *self.peek() == Tok::Sym(c)
    }

    fn eat_sym(&mut self, c: char) -> bool {
        if self.is_sym(c) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, c: char) -> Result<(), KirError> {
        if self.eat_sym(c) {
            Ok(())
        } else {
            self.err(format!("'{c}'"))
        }
    }

    fn is_ident(&self, s: &str) -> bool {
        matches!(self.peek(), Tok::Ident(x) if x == s)
    }

    fn eat_ident(&mut self, s: &str) -> bool {
        if self.is_ident(s) {
            self.bump();
            true
        } else {
            false
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, KirError> {
        match self.peek().clone() {
            Tok::Ident(s) if !s.contains('.') => {
                self.bump();
                Ok(s)
            }
            _ => self.err(what),
        }
    }

    fn skip_newlines(&mut self) {
        while *self.peek() == Tok::Newline {
            self.bump();
        }
    }

    fn at_body_end(&self) -> bool {
        *self.peek() == Tok::Eof || (self.braced && self.is_sym('}'))
    }

    fn end_of_statement(&mut self) -> Result<(), KirError> {
        match self.peek() {
            Tok::Newline => {
                self.bump();
                Ok(())
            }
            Tok::Eof => Ok(()),
            Tok::Sym('}') if self.braced => Ok(()),
            _ => self.err("end of line"),
        }
    }

    fn scalar_type(&mut self) -> Result<ScalarType, KirError> {
        if let Tok::Ident(s) = self.peek() {
            if let Some(t) = ScalarType::from_name(s) {
                self.bump();
                return Ok(t);
            }
        }
        self.err("a scalar type (i32, i64, f32, f64)")
    }

    fn fields(&mut self) -> Result<Vec<u32>, KirError> {
        let mut out = Vec::new();
        if !self.eat_sym('{') {
            return Ok(out);
        }
        loop {
            match self.peek().clone() {
                Tok::Int(v) if v > 0 && v <= u32::MAX as i64 => {
                    self.bump();
                    out.push(v as u32);
                }
                _ => return self.err("a positive field element count"),
            }
            if self.eat_sym('}') {
                return Ok(out);
            }
            self.expect_sym(',')?;
        }
    }

    fn heap_api(&mut self) -> Option<HeapApi> {
        if self.eat_ident("host") {
            Some(HeapApi::Host)
        } else if self.eat_ident("device") {
            Some(HeapApi::Device)
        } else {
            None
        }
    }

    fn intrinsic(&self, name: &str) -> Result<Option<Intrinsic>, KirError> {
        let Some((head, dim)) = name.split_once('.') else {
            return Ok(None);
        };
        let intr = match head {
            "threadIdx" => Intrinsic::ThreadIdx,
            "blockIdx" => Intrinsic::BlockIdx,
            "blockDim" => Intrinsic::BlockDim,
            "gridDim" => Intrinsic::GridDim,
            _ => return self.err("an identifier"),
        };
        match dim {
            "x" => Ok(Some(intr)),
            "y" | "z" => Err(KirError::validation(Rule::MultiDimIntrinsic, format!("{} ({name})", self.location()))),
            _ => self.err("an intrinsic dimension .x"),
        }
    }

    fn atom(&mut self) -> Result<Expr, KirError> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.bump();
                Ok(Expr::Int(v))
            }
            Tok::Float(v) => {
                self.bump();
                Ok(Expr::Float(v))
            }
            Tok::Ident(name) => {
                if let Some(i) = self.intrinsic(&name)? {
                    self.bump();
                    return Ok(Expr::Intr(i));
                }
                self.bump();
                Ok(Expr::Var(name))
            }
            Tok::Sym('(') => {
                self.bump();
                let e = self.prefix_or_expr(')')?;
                self.expect_sym(')')?;
                Ok(e)
            }
            _ => self.err("an operand"),
        }
    }

    /// Either `op a b` or a single operand, up to (not including) `close`.
    fn prefix_or_expr(&mut self, close: char) -> Result<Expr, KirError> {
        if let Tok::Ident(name) = self.peek().clone() {
            if let Some(op) = BinOp::from_name(&name) {
                if *self.peek_at(1) != Tok::Sym(close) {
                    self.bump();
                    let l = self.atom()?;
                    let r = self.atom()?;
                    return Ok(Expr::bin(op, l, r));
                }
            }
        }
        self.atom()
    }

    fn indexed(&mut self) -> Result<(String, Expr), KirError> {
        let base = self.ident("a buffer name")?;
        self.expect_sym('[')?;
        let idx = self.prefix_or_expr(']')?;
        self.expect_sym(']')?;
        Ok((base, idx))
    }

    fn param(&mut self) -> Result<Param, KirError> {
        let name = self.ident("a parameter name")?;
        self.expect_sym(':')?;
        if self.eat_sym('*') {
            let space = match self.peek().clone() {
                Tok::Ident(s) => MemorySpace::from_name(&s),
                _ => None,
            };
            let Some(space) = space else {
                return self.err("a memory space");
            };
            self.bump();
            let elem = self.scalar_type()?;
            let fields = self.fields()?;
            Ok(Param {
                name,
                kind: ParamKind::Buffer { space, elem, fields },
            })
        } else {
            let t = self.scalar_type()?;
            Ok(Param {
                name,
                kind: ParamKind::Scalar(t),
            })
        }
    }

    fn shared(&mut self) -> Result<SharedDecl, KirError> {
        let name = self.ident("a shared array name")?;
        self.expect_sym(':')?;
        let dynamic = self.eat_ident("dynamic");
        self.expect_sym('[')?;
        let count = self.prefix_or_expr(']')?;
        self.expect_sym(']')?;
        let elem = self.scalar_type()?;
        let fields = self.fields()?;
        Ok(SharedDecl {
            name,
            elem,
            count,
            dynamic,
            fields,
        })
    }

    fn label_name(&mut self) -> Result<String, KirError> {
        self.ident("a block label")
    }

    fn terminator(&mut self) -> Result<Option<Terminator>, KirError> {
        let Tok::Ident(kw) = self.peek().clone() else {
            return Ok(None);
        };
        let t = match kw.as_str() {
            "br" | "branch" => {
                self.bump();
                let cond = self.atom()?;
                let then_label = self.label_name()?;
                let else_label = self.label_name()?;
                Terminator::Branch {
                    cond,
                    then_label,
                    else_label,
                }
            }
            "jmp" | "jump" => {
                self.bump();
                Terminator::Jump(self.label_name()?)
            }
            "return" => {
                self.bump();
                Terminator::Return
            }
            _ => return Ok(None),
        };
        Ok(Some(t))
    }

    fn instruction(&mut self) -> Result<InstrKind, KirError> {
        let Tok::Ident(kw) = self.peek().clone() else {
            return self.err("an instruction");
        };
        match kw.as_str() {
            "store" => {
                self.bump();
                let (base, index) = self.indexed()?;
                let value = self.atom()?;
                Ok(InstrKind::Store { base, index, value })
            }
            "free" => {
                self.bump();
                let api = self.heap_api().unwrap_or(HeapApi::Device);
                let ptr = self.atom()?;
                Ok(InstrKind::Free { ptr, api })
            }
            "barrier" => {
                self.bump();
                Ok(InstrKind::Barrier)
            }
            "enter" => {
                self.bump();
                Ok(InstrKind::Enter)
            }
            "leave" => {
                self.bump();
                Ok(InstrKind::Leave)
            }
            _ => {
                let dst = self.ident("an instruction")?;
                self.expect_sym('=')?;
                self.rhs(dst)
            }
        }
    }

    fn rhs(&mut self, dst: String) -> Result<InstrKind, KirError> {
        let Tok::Ident(op) = self.peek().clone() else {
            return self.err("an operation");
        };
        if let Some(bop) = BinOp::from_name(&op) {
            self.bump();
            let lhs = self.atom()?;
            let rhs = self.atom()?;
            return Ok(InstrKind::Arith {
                dst,
                op: bop,
                lhs,
                rhs,
            });
        }
        if let Some(func) = MathFn::from_name(&op) {
            self.bump();
            let src = self.atom()?;
            return Ok(InstrKind::Math { dst, func, src });
        }
        match op.as_str() {
            "load" => {
                self.bump();
                let (base, index) = self.indexed()?;
                Ok(InstrKind::Load { dst, base, index })
            }
            "alloca" => {
                self.bump();
                let elem = self.scalar_type()?;
                let count = self.atom()?;
                let fields = self.fields()?;
                Ok(InstrKind::Alloca {
                    dst,
                    elem,
                    count,
                    fields,
                })
            }
            "malloc" => {
                self.bump();
                let api = self.heap_api().unwrap_or(HeapApi::Device);
                let elem = self.scalar_type()?;
                let size = self.atom()?;
                Ok(InstrKind::Malloc {
                    dst,
                    api,
                    elem,
                    size,
                })
            }
            "field" => {
                self.bump();
                let base = self.ident("a buffer name")?;
                match self.bump() {
                    Tok::Int(v) if v >= 0 && v <= u32::MAX as i64 => Ok(InstrKind::Field {
                        dst,
                        base,
                        field: v as u32,
                    }),
                    _ => {
                        self.pos -= 1;
                        self.err("a field index")
                    }
                }
            }
            _ => self.err("an operation"),
        }
    }

    fn kernel(&mut self) -> Result<Kernel, KirError> {
        self.skip_newlines();
        if !self.eat_ident("kernel") {
            return self.err("'kernel'");
        }
        let name = self.ident("a kernel name")?;
        self.expect_sym('(')?;
        let mut params = Vec::new();
        if !self.eat_sym(')') {
            loop {
                params.push(self.param()?);
                if self.eat_sym(')') {
                    break;
                }
                self.expect_sym(',')?;
            }
        }
        self.braced = self.eat_sym('{');
        if !self.at_body_end() && *self.peek() != Tok::Newline && !self.braced {
            return self.err("end of line");
        }
        self.skip_newlines();

        let mut shared = Vec::new();
        while self.is_ident("shared") {
            self.bump();
            shared.push(self.shared()?);
            self.end_of_statement()?;
            self.skip_newlines();
        }

        let mut blocks: Vec<BasicBlock> = Vec::new();
        let mut cur: Option<(String, Vec<Instr>)> = None;
        loop {
            self.skip_newlines();
            if self.at_body_end() {
                break;
            }
            // label?
            if let Tok::Ident(l) = self.peek().clone() {
                if *self.peek_at(1) == Tok::Sym(':') && !l.contains('.') && !INSTR_KEYWORDS.contains(&l.as_str()) {
                    self.bump();
                    self.bump();
                    if let Some((label, instrs)) = cur.take() {
                        // fall through into the new block
                        blocks.push(BasicBlock {
                            label,
                            instrs,
                            term: Terminator::Jump(l.clone()),
                        });
                    }
                    cur = Some((l, Vec::new()));
                    self.end_of_statement()?;
                    continue;
                }
            }
            if self.is_ident("shared") {
                return self.err("shared declarations before the first block");
            }
            let (label, instrs) = cur.get_or_insert_with(|| ("entry".to_string(), Vec::new()));
            if let Some(term) = self.terminator()? {
                let label = std::mem::take(label);
                let instrs = std::mem::take(instrs);
                blocks.push(BasicBlock { label, instrs, term });
                cur = None;
                self.end_of_statement()?;
                continue;
            }
            let explicit = if self.eat_sym('@') {
                match self.bump() {
                    Tok::Int(v) if v >= 0 && v <= u32::MAX as i64 => Some(v as u32),
                    _ => {
                        self.pos -= 1;
                        return self.err("an instruction id");
                    }
                }
            } else {
                None
            };
            let kind = self.instruction()?;
            let id = explicit.unwrap_or(self.next_id);
            self.next_id = id + 1;
            instrs.push(Instr { id: InstrId(id), kind });
            self.end_of_statement()?;
        }
        if let Some((label, instrs)) = cur.take() {
            blocks.push(BasicBlock {
                label,
                instrs,
                term: Terminator::Return,
            });
        }
        if self.braced {
            self.expect_sym('}')?;
        }
        self.skip_newlines();
        if *self.peek() != Tok::Eof {
            return self.err("end of input");
        }
        if blocks.is_empty() {
            blocks.push(BasicBlock {
                label: "entry".into(),
                instrs: Vec::new(),
                term: Terminator::Return,
            });
        }
        let entry = blocks[0].label.clone();
        Ok(Kernel {
            name,
            params,
            shared,
            blocks,
            entry,
        })
    }
}

/// Parses and validates a kernel.
pub fn parse_kernel(source: &str) -> Result<Kernel, KirError> {
    let toks = lex(source)?;
    let mut p = Parser {
        toks,
        pos: 0,
        braced: false,
        next_id: 0,
    };
    let k = p.kernel()?;
    validate(&k)?;
    Ok(k)
}
