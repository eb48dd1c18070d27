//! Recursive-descent parser with parse-time scope and arity checking.
//!
//! Grammar:
//!
//! ```text
//! program    := letBinding* expression
//! letBinding := "let" IDENT "=" expression ";"
//! expression := orExpr
//! orExpr     := andExpr ("||" andExpr)*
//! andExpr    := eqExpr ("&&" eqExpr)*
//! eqExpr     := cmpExpr (("==" | "!=") cmpExpr)*
//! cmpExpr    := addExpr (("<" | "<=" | ">" | ">=") addExpr)*
//! addExpr    := mulExpr (("+" | "-") mulExpr)*
//! mulExpr    := unary (("*" | "/") unary)*
//! unary      := ("!" | "-") unary | postfix
//! postfix    := primary ("[" expression "]")*
//! primary    := "true" | "false" | NUMBER | STRING | mapLit
//!             | IDENT | BUILTIN "(" (expression ("," expression)*)? ")"
//!             | "(" expression ")"
//! mapLit     := "{" (STRING ":" ["-"] NUMBER ("," STRING ":" ["-"] NUMBER)*)? "}"
//! ```
//!
//! Identifiers must be `publication` or a name bound by an earlier `let`;
//! anything else is a parse error, so unknown names are rejected before a
//! subscription is ever stored.

use crate::ast::{BinOp, Builtin, Expr, Program, UnaryOp};
use crate::token::{lex, Spanned, Tok};
use crate::ParseError;

/// The variable every program may reference: the publication payload text.
pub const PUBLICATION_VAR: &str = "publication";

struct Parser {
    toks: Vec<Spanned>,
    at: usize,
    scope: Vec<String>,
}

pub fn parse(text: &str) -> Result<Program, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser {
        toks,
        at: 0,
        scope: vec![PUBLICATION_VAR.to_string()],
    };
    let prog = p.program()?;
    if p.peek().tok != Tok::Eof {
        return Err(p.err_here("expected end of program"));
    }
    Ok(prog)
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.at]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn err_here(&self, msg: impl Into<String>) -> ParseError {
        ParseError::new(msg, self.peek().pos)
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), ParseError> {
        if &self.peek().tok == want {
            self.next();
            Ok(())
        } else {
            Err(self.err_here(format!("expected {what}")))
        }
    }

    fn program(&mut self) -> Result<Program, ParseError> {
        let mut lets = Vec::new();
        while self.peek().tok == Tok::Let {
            self.next();
            let name = match self.next() {
                Spanned { tok: Tok::Ident(n), .. } => n,
                other => return Err(ParseError::new("expected binding name", other.pos)),
            };
            self.expect(&Tok::Eq, "'='")?;
            let expr = self.expression()?;
            self.expect(&Tok::Semi, "';'")?;
            self.scope.push(name.clone());
            lets.push((name, expr));
        }
        let body = self.expression()?;
        Ok(Program { lets, body })
    }

    fn expression(&mut self) -> Result<Expr, ParseError> {
        self.binary_level(0)
    }

    // Levels from loosest to tightest binding.
    fn binary_level(&mut self, level: usize) -> Result<Expr, ParseError> {
        const LEVELS: [&[(Tok, BinOp)]; 6] = [
            &[(Tok::OrOr, BinOp::Or)],
            &[(Tok::AndAnd, BinOp::And)],
            &[(Tok::EqEq, BinOp::Eq), (Tok::NotEq, BinOp::NotEq)],
            &[
                (Tok::Le, BinOp::Le),
                (Tok::Lt, BinOp::Lt),
                (Tok::Ge, BinOp::Ge),
                (Tok::Gt, BinOp::Gt),
            ],
            &[(Tok::Plus, BinOp::Add), (Tok::Minus, BinOp::Sub)],
            &[(Tok::Star, BinOp::Mul), (Tok::Slash, BinOp::Div)],
        ];
        if level == LEVELS.len() {
            return self.unary();
        }
        let mut lhs = self.binary_level(level + 1)?;
        'outer: loop {
            for (tok, op) in LEVELS[level] {
                if &self.peek().tok == tok {
                    self.next();
                    let rhs = self.binary_level(level + 1)?;
                    lhs = Expr::Binary(*op, Box::new(lhs), Box::new(rhs));
                    continue 'outer;
                }
            }
            return Ok(lhs);
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek().tok {
            Tok::Bang => {
                self.next();
                Ok(Expr::Unary(UnaryOp::Not, Box::new(self.unary()?)))
            }
            Tok::Minus => {
                self.next();
                Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.unary()?)))
            }
            _ => self.postfix(),
        }
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut expr = self.primary()?;
        while self.peek().tok == Tok::LBracket {
            self.next();
            let idx = self.expression()?;
            self.expect(&Tok::RBracket, "']'")?;
            expr = Expr::Index(Box::new(expr), Box::new(idx));
        }
        Ok(expr)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let spanned = self.peek().clone();
        match spanned.tok {
            Tok::True => {
                self.next();
                Ok(Expr::Bool(true))
            }
            Tok::False => {
                self.next();
                Ok(Expr::Bool(false))
            }
            Tok::Num(n) => {
                self.next();
                Ok(Expr::Num(n))
            }
            Tok::Str(ref s) => {
                let s = s.clone();
                self.next();
                Ok(Expr::Str(s))
            }
            Tok::LParen => {
                self.next();
                let e = self.expression()?;
                self.expect(&Tok::RParen, "')'")?;
                Ok(e)
            }
            Tok::LBrace => self.map_literal(),
            Tok::Ident(ref name) => {
                let name = name.clone();
                self.next();
                if self.peek().tok == Tok::LParen {
                    let Some(builtin) = Builtin::from_name(&name) else {
                        return Err(ParseError::new(
                            format!("unknown function '{name}'"),
                            spanned.pos,
                        ));
                    };
                    self.next();
                    let mut args = Vec::new();
                    if self.peek().tok != Tok::RParen {
                        loop {
                            args.push(self.expression()?);
                            if self.peek().tok == Tok::Comma {
                                self.next();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(&Tok::RParen, "')'")?;
                    if args.len() != builtin.arity() {
                        return Err(ParseError::new(
                            format!(
                                "{} takes {} argument(s), got {}",
                                builtin.name(),
                                builtin.arity(),
                                args.len()
                            ),
                            spanned.pos,
                        ));
                    }
                    Ok(Expr::Call(builtin, args))
                } else {
                    if !self.scope.iter().any(|n| n == &name) {
                        return Err(ParseError::new(
                            format!("unknown identifier '{name}'"),
                            spanned.pos,
                        ));
                    }
                    Ok(Expr::Var(name))
                }
            }
            _ => Err(self.err_here("expected expression")),
        }
    }

    fn map_literal(&mut self) -> Result<Expr, ParseError> {
        self.expect(&Tok::LBrace, "'{'")?;
        let mut entries: Vec<(String, f64)> = Vec::new();
        if self.peek().tok != Tok::RBrace {
            loop {
                let key_span = self.next();
                let key = match key_span.tok {
                    Tok::Str(s) => s,
                    _ => return Err(ParseError::new("expected string key", key_span.pos)),
                };
                if entries.iter().any(|(k, _)| k == &key) {
                    return Err(ParseError::new(
                        format!("duplicate map key \"{key}\""),
                        key_span.pos,
                    ));
                }
                self.expect(&Tok::Colon, "':'")?;
                let neg = if self.peek().tok == Tok::Minus {
                    self.next();
                    true
                } else {
                    false
                };
                let val_span = self.next();
                let val = match val_span.tok {
                    Tok::Num(n) => {
                        if neg {
                            -n
                        } else {
                            n
                        }
                    }
                    _ => return Err(ParseError::new("expected numeric value", val_span.pos)),
                };
                entries.push((key, val));
                if self.peek().tok == Tok::Comma {
                    self.next();
                } else {
                    break;
                }
            }
        }
        self.expect(&Tok::RBrace, "'}'")?;
        Ok(Expr::MapLit(entries))
    }
}
