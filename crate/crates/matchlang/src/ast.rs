//! Syntax tree and canonical pretty-printer.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Or,
    And,
    Eq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Or => "||",
            BinOp::And => "&&",
            BinOp::Eq => "==",
            BinOp::NotEq => "!=",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

/// Builtin functions. The language has no user-defined functions, so calls
/// are resolved to this set at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Lowercase,
    Contains,
    Length,
    Split,
    FindKeys,
    Lookup,
    ToNumber,
}

impl Builtin {
    pub fn name(self) -> &'static str {
        match self {
            Builtin::Lowercase => "lowercase",
            Builtin::Contains => "contains",
            Builtin::Length => "length",
            Builtin::Split => "split",
            Builtin::FindKeys => "find_keys",
            Builtin::Lookup => "lookup",
            Builtin::ToNumber => "to_number",
        }
    }

    pub fn from_name(name: &str) -> Option<Builtin> {
        Some(match name {
            "lowercase" => Builtin::Lowercase,
            "contains" => Builtin::Contains,
            "length" => Builtin::Length,
            "split" => Builtin::Split,
            "find_keys" => Builtin::FindKeys,
            "lookup" => Builtin::Lookup,
            "to_number" => Builtin::ToNumber,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Lowercase | Builtin::Length => 1,
            Builtin::Contains | Builtin::Split | Builtin::FindKeys | Builtin::ToNumber => 2,
            Builtin::Lookup => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Bool(bool),
    Num(f64),
    Str(String),
    /// Map literal with string keys and numeric values; source order preserved.
    MapLit(Vec<(String, f64)>),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Index(Box<Expr>, Box<Expr>),
    Call(Builtin, Vec<Expr>),
}

/// A parsed program: zero or more `let` bindings followed by one expression.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub lets: Vec<(String, Expr)>,
    pub body: Expr,
}

fn write_str_lit(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for ch in s.chars() {
        match ch {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            '\n' => f.write_str("\\n")?,
            '\t' => f.write_str("\\t")?,
            _ => write!(f, "{ch}")?,
        }
    }
    f.write_str("\"")
}

fn write_num(f: &mut fmt::Formatter<'_>, n: f64) -> fmt::Result {
    // Rust's f64 Display emits the shortest form that reparses exactly.
    write!(f, "{n}")
}

impl fmt::Display for Expr {
    // Fully parenthesized so the output reparses to the same tree regardless
    // of precedence.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Bool(b) => write!(f, "{b}"),
            Expr::Num(n) => write_num(f, *n),
            Expr::Str(s) => write_str_lit(f, s),
            Expr::MapLit(entries) => {
                f.write_str("{")?;
                for (i, (k, v)) in entries.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write_str_lit(f, k)?;
                    f.write_str(": ")?;
                    write_num(f, *v)?;
                }
                f.write_str("}")
            }
            Expr::Var(name) => f.write_str(name),
            Expr::Unary(op, inner) => {
                let sym = match op {
                    UnaryOp::Not => "!",
                    UnaryOp::Neg => "-",
                };
                write!(f, "({sym}{inner})")
            }
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Index(base, idx) => write!(f, "{base}[{idx}]"),
            Expr::Call(b, args) => {
                write!(f, "{}(", b.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, expr) in &self.lets {
            writeln!(f, "let {name} = {expr};")?;
        }
        write!(f, "{}", self.body)
    }
}
