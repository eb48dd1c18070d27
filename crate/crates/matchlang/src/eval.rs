//! Bounded evaluator.
//!
//! Evaluation is pure: the only inputs are the parsed program and the
//! publication text, and the only effect is the returned value. The grammar
//! has no loops or recursion, so every program terminates; the step budget
//! exists to bound builtin cost on very large strings.

use std::collections::BTreeMap;

use crate::ast::{BinOp, Builtin, Expr, Program, UnaryOp};
use crate::{EvalError, EvalLimits};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Num(f64),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Num(_) => "number",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }
}

struct Evaluator<'a> {
    limits: &'a EvalLimits,
    steps: u64,
    env: Vec<(String, Value)>,
}

/// Evaluate a program against a publication payload. The final value must be
/// a boolean.
pub fn evaluate(prog: &Program, publication: &str, limits: &EvalLimits) -> Result<bool, EvalError> {
    evaluate_counted(prog, publication, limits).map(|(b, _)| b)
}

/// Step count of a successful run under the default limits. Used to calibrate
/// `max_steps`.
pub fn step_count(prog: &Program, publication: &str) -> Result<u64, EvalError> {
    evaluate_counted(prog, publication, &EvalLimits::default()).map(|(_, steps)| steps)
}

pub fn evaluate_counted(
    prog: &Program,
    publication: &str,
    limits: &EvalLimits,
) -> Result<(bool, u64), EvalError> {
    let mut ev = Evaluator {
        limits,
        steps: 0,
        env: vec![(
            crate::parser::PUBLICATION_VAR.to_string(),
            Value::Str(publication.to_string()),
        )],
    };
    for (name, expr) in &prog.lets {
        let v = ev.eval(expr)?;
        ev.env.push((name.clone(), v));
    }
    match ev.eval(&prog.body)? {
        Value::Bool(b) => Ok((b, ev.steps)),
        other => Err(EvalError::Type(format!(
            "program must evaluate to a boolean, got {}",
            other.type_name()
        ))),
    }
}

impl Evaluator<'_> {
    fn charge(&mut self, cost: u64) -> Result<(), EvalError> {
        self.steps = self.steps.saturating_add(cost);
        if self.steps > self.limits.max_steps {
            Err(EvalError::StepBudgetExceeded)
        } else {
            Ok(())
        }
    }

    /// Builtins cost one step per 16 bytes of string input they scan.
    fn charge_bytes(&mut self, bytes: usize) -> Result<(), EvalError> {
        self.charge(1 + bytes as u64 / 16)
    }

    fn check_string(&self, s: String) -> Result<Value, EvalError> {
        if s.len() > self.limits.max_string_bytes {
            Err(EvalError::StringTooLarge {
                bytes: s.len(),
                limit: self.limits.max_string_bytes,
            })
        } else {
            Ok(Value::Str(s))
        }
    }

    fn eval(&mut self, expr: &Expr) -> Result<Value, EvalError> {
        self.charge(1)?;
        match expr {
            Expr::Bool(b) => Ok(Value::Bool(*b)),
            Expr::Num(n) => Ok(Value::Num(*n)),
            Expr::Str(s) => Ok(Value::Str(s.clone())),
            Expr::MapLit(entries) => Ok(Value::Map(
                entries
                    .iter()
                    .map(|(k, v)| (k.clone(), Value::Num(*v)))
                    .collect(),
            )),
            Expr::Var(name) => {
                // Later bindings shadow earlier ones.
                let found = self.env.iter().rev().find(|(n, _)| n == name);
                match found {
                    Some((_, v)) => Ok(v.clone()),
                    None => Err(EvalError::Type(format!("unbound identifier '{name}'"))),
                }
            }
            Expr::Unary(op, inner) => {
                let v = self.eval(inner)?;
                match (op, v) {
                    (UnaryOp::Not, Value::Bool(b)) => Ok(Value::Bool(!b)),
                    (UnaryOp::Neg, Value::Num(n)) => Ok(Value::Num(-n)),
                    (op, v) => Err(EvalError::Type(format!(
                        "operator {op:?} not defined on {}",
                        v.type_name()
                    ))),
                }
            }
            Expr::Binary(op, l, r) => self.eval_binary(*op, l, r),
            Expr::Index(base, idx) => {
                let base = self.eval(base)?;
                let idx = self.eval(idx)?;
                match (base, idx) {
                    (Value::List(items), Value::Num(n)) => {
                        if n.fract() != 0.0 || n < 0.0 || n >= items.len() as f64 {
                            Err(EvalError::IndexOutOfRange {
                                index: n,
                                len: items.len(),
                            })
                        } else {
                            Ok(items[n as usize].clone())
                        }
                    }
                    (base, idx) => Err(EvalError::Type(format!(
                        "cannot index {} with {}",
                        base.type_name(),
                        idx.type_name()
                    ))),
                }
            }
            Expr::Call(builtin, args) => self.eval_call(*builtin, args),
        }
    }

    fn eval_binary(&mut self, op: BinOp, l: &Expr, r: &Expr) -> Result<Value, EvalError> {
        // Short-circuit boolean operators.
        if matches!(op, BinOp::And | BinOp::Or) {
            let lv = match self.eval(l)? {
                Value::Bool(b) => b,
                other => {
                    return Err(EvalError::Type(format!(
                        "{} requires boolean operands, got {}",
                        op.symbol(),
                        other.type_name()
                    )))
                }
            };
            match (op, lv) {
                (BinOp::And, false) => return Ok(Value::Bool(false)),
                (BinOp::Or, true) => return Ok(Value::Bool(true)),
                _ => {}
            }
            return match self.eval(r)? {
                Value::Bool(b) => Ok(Value::Bool(b)),
                other => Err(EvalError::Type(format!(
                    "{} requires boolean operands, got {}",
                    op.symbol(),
                    other.type_name()
                ))),
            };
        }

        let lv = self.eval(l)?;
        let rv = self.eval(r)?;
        match op {
            // Equality is total: values of different types are unequal.
            BinOp::Eq => Ok(Value::Bool(lv == rv)),
            BinOp::NotEq => Ok(Value::Bool(lv != rv)),
            BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge => {
                let ord = match (&lv, &rv) {
                    (Value::Num(a), Value::Num(b)) => a.partial_cmp(b),
                    (Value::Str(a), Value::Str(b)) => Some(a.as_bytes().cmp(b.as_bytes())),
                    _ => {
                        return Err(EvalError::Type(format!(
                            "cannot order {} against {}",
                            lv.type_name(),
                            rv.type_name()
                        )))
                    }
                };
                let Some(ord) = ord else {
                    // NaN comparisons are false, like IEEE.
                    return Ok(Value::Bool(false));
                };
                let b = match op {
                    BinOp::Lt => ord.is_lt(),
                    BinOp::Le => ord.is_le(),
                    BinOp::Gt => ord.is_gt(),
                    BinOp::Ge => ord.is_ge(),
                    _ => unreachable!(),
                };
                Ok(Value::Bool(b))
            }
            BinOp::Add => match (lv, rv) {
                (Value::Num(a), Value::Num(b)) => Ok(Value::Num(a + b)),
                (Value::Str(a), Value::Str(b)) => {
                    self.charge_bytes(a.len() + b.len())?;
                    self.check_string(a + &b)
                }
                (lv, rv) => Err(EvalError::Type(format!(
                    "+ not defined on {} and {}",
                    lv.type_name(),
                    rv.type_name()
                ))),
            },
            BinOp::Sub | BinOp::Mul | BinOp::Div => match (lv, rv) {
                (Value::Num(a), Value::Num(b)) => Ok(Value::Num(match op {
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    _ => unreachable!(),
                })),
                (lv, rv) => Err(EvalError::Type(format!(
                    "{} not defined on {} and {}",
                    op.symbol(),
                    lv.type_name(),
                    rv.type_name()
                ))),
            },
            BinOp::And | BinOp::Or => unreachable!("handled above"),
        }
    }

    fn eval_call(&mut self, builtin: Builtin, args: &[Expr]) -> Result<Value, EvalError> {
        let mut vals = Vec::with_capacity(args.len());
        for a in args {
            vals.push(self.eval(a)?);
        }
        match builtin {
            Builtin::Lowercase => match &vals[0] {
                Value::Str(s) => {
                    self.charge_bytes(s.len())?;
                    self.check_string(s.to_lowercase())
                }
                v => Err(type_err(builtin, "a string", v)),
            },
            Builtin::Contains => match (&vals[0], &vals[1]) {
                (Value::Str(s), Value::Str(sub)) => {
                    self.charge_bytes(s.len())?;
                    Ok(Value::Bool(s.contains(sub.as_str())))
                }
                _ => Err(type_err(builtin, "two strings", &vals[0])),
            },
            Builtin::Length => {
                let n = match &vals[0] {
                    Value::Str(s) => s.len(),
                    Value::List(items) => items.len(),
                    Value::Map(m) => m.len(),
                    v => return Err(type_err(builtin, "a string, list, or map", v)),
                };
                Ok(Value::Num(n as f64))
            }
            Builtin::Split => match (&vals[0], &vals[1]) {
                (Value::Str(s), Value::Str(sep)) => {
                    if sep.is_empty() {
                        return Err(EvalError::Type("split separator must be non-empty".into()));
                    }
                    self.charge_bytes(s.len())?;
                    Ok(Value::List(
                        s.split(sep.as_str())
                            .map(|part| Value::Str(part.to_string()))
                            .collect(),
                    ))
                }
                _ => Err(type_err(builtin, "two strings", &vals[0])),
            },
            Builtin::FindKeys => match (&vals[0], &vals[1]) {
                (Value::Str(s), Value::Map(m)) => {
                    self.charge_bytes(s.len().saturating_mul(m.len().max(1)))?;
                    let haystack = s.to_lowercase();
                    // BTreeMap iteration gives map-key sorted order.
                    let found: Vec<Value> = m
                        .keys()
                        .filter(|k| haystack.contains(&k.to_lowercase()))
                        .map(|k| Value::Str(k.clone()))
                        .collect();
                    Ok(Value::List(found))
                }
                _ => Err(type_err(builtin, "a string and a map", &vals[0])),
            },
            Builtin::Lookup => match &vals[0] {
                Value::Map(m) => {
                    let key = match &vals[1] {
                        Value::Str(k) => k,
                        v => return Err(type_err(builtin, "a string key", v)),
                    };
                    Ok(m.get(key).cloned().unwrap_or_else(|| vals[2].clone()))
                }
                v => Err(type_err(builtin, "a map", v)),
            },
            Builtin::ToNumber => match &vals[0] {
                Value::Num(n) => Ok(Value::Num(*n)),
                Value::Str(s) => {
                    self.charge_bytes(s.len())?;
                    match s.trim().parse::<f64>() {
                        Ok(n) => Ok(Value::Num(n)),
                        Err(_) => Ok(vals[1].clone()),
                    }
                }
                v => Err(type_err(builtin, "a string or number", v)),
            },
        }
    }
}

fn type_err(builtin: Builtin, expected: &str, got: &Value) -> EvalError {
    EvalError::Type(format!(
        "{} expects {expected}, got {}",
        builtin.name(),
        got.type_name()
    ))
}
