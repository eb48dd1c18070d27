//! Tokenizer for the matching-function language.

use crate::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Num(f64),
    Str(String),
    Let,
    True,
    False,
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Semi,
    Eq,
    AndAnd,
    OrOr,
    Bang,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

/// Source position, 1-based line and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone)]
pub struct Spanned {
    pub tok: Tok,
    pub pos: Pos,
}

pub fn lex(text: &str) -> Result<Vec<Spanned>, ParseError> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    let mut line: u32 = 1;
    let mut col: u32 = 1;

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if let Some((_, ch)) = c {
                if ch == '\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
            }
            c
        }};
    }

    loop {
        let pos = Pos { line, col };
        let Some(&(_, c)) = chars.peek() else {
            out.push(Spanned { tok: Tok::Eof, pos });
            return Ok(out);
        };
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '(' => {
                bump!();
                out.push(Spanned { tok: Tok::LParen, pos });
            }
            ')' => {
                bump!();
                out.push(Spanned { tok: Tok::RParen, pos });
            }
            '{' => {
                bump!();
                out.push(Spanned { tok: Tok::LBrace, pos });
            }
            '}' => {
                bump!();
                out.push(Spanned { tok: Tok::RBrace, pos });
            }
            '[' => {
                bump!();
                out.push(Spanned { tok: Tok::LBracket, pos });
            }
            ']' => {
                bump!();
                out.push(Spanned { tok: Tok::RBracket, pos });
            }
            ',' => {
                bump!();
                out.push(Spanned { tok: Tok::Comma, pos });
            }
            ':' => {
                bump!();
                out.push(Spanned { tok: Tok::Colon, pos });
            }
            ';' => {
                bump!();
                out.push(Spanned { tok: Tok::Semi, pos });
            }
            '+' => {
                bump!();
                out.push(Spanned { tok: Tok::Plus, pos });
            }
            '-' => {
                bump!();
                out.push(Spanned { tok: Tok::Minus, pos });
            }
            '*' => {
                bump!();
                out.push(Spanned { tok: Tok::Star, pos });
            }
            '/' => {
                bump!();
                out.push(Spanned { tok: Tok::Slash, pos });
            }
            '!' => {
                bump!();
                if matches!(chars.peek(), Some((_, '='))) {
                    bump!();
                    out.push(Spanned { tok: Tok::NotEq, pos });
                } else {
                    out.push(Spanned { tok: Tok::Bang, pos });
                }
            }
            '=' => {
                bump!();
                if matches!(chars.peek(), Some((_, '='))) {
                    bump!();
                    out.push(Spanned { tok: Tok::EqEq, pos });
                } else {
                    out.push(Spanned { tok: Tok::Eq, pos });
                }
            }
            '<' => {
                bump!();
                if matches!(chars.peek(), Some((_, '='))) {
                    bump!();
                    out.push(Spanned { tok: Tok::Le, pos });
                } else {
                    out.push(Spanned { tok: Tok::Lt, pos });
                }
            }
            '>' => {
                bump!();
                if matches!(chars.peek(), Some((_, '='))) {
                    bump!();
                    out.push(Spanned { tok: Tok::Ge, pos });
                } else {
                    out.push(Spanned { tok: Tok::Gt, pos });
                }
            }
            '&' => {
                bump!();
                if matches!(chars.peek(), Some((_, '&'))) {
                    bump!();
                    out.push(Spanned { tok: Tok::AndAnd, pos });
                } else {
                    return Err(ParseError::new("expected '&&'", pos));
                }
            }
            '|' => {
                bump!();
                if matches!(chars.peek(), Some((_, '|'))) {
                    bump!();
                    out.push(Spanned { tok: Tok::OrOr, pos });
                } else {
                    return Err(ParseError::new("expected '||'", pos));
                }
            }
            '"' => {
                bump!();
                let mut s = String::new();
                loop {
                    match bump!() {
                        Some((_, '"')) => break,
                        Some((_, '\\')) => match bump!() {
                            Some((_, '"')) => s.push('"'),
                            Some((_, '\\')) => s.push('\\'),
                            Some((_, 'n')) => s.push('\n'),
                            Some((_, 't')) => s.push('\t'),
                            Some((_, other)) => {
                                return Err(ParseError::new(
                                    format!("unknown escape '\\{other}'"),
                                    pos,
                                ))
                            }
                            None => {
                                return Err(ParseError::new("unterminated string literal", pos))
                            }
                        },
                        Some((_, ch)) => s.push(ch),
                        None => return Err(ParseError::new("unterminated string literal", pos)),
                    }
                }
                out.push(Spanned { tok: Tok::Str(s), pos });
            }
            '0'..='9' => {
                let mut s = String::new();
                while let Some(&(_, ch)) = chars.peek() {
                    if ch.is_ascii_digit() || ch == '.' {
                        s.push(ch);
                        bump!();
                    } else if (ch == 'e' || ch == 'E') && !s.contains('e') && !s.contains('E') {
                        s.push(ch);
                        bump!();
                        if let Some(&(_, sign @ ('+' | '-'))) = chars.peek() {
                            s.push(sign);
                            bump!();
                        }
                    } else {
                        break;
                    }
                }
                let n: f64 = s
                    .parse()
                    .map_err(|_| ParseError::new(format!("invalid number literal '{s}'"), pos))?;
                out.push(Spanned { tok: Tok::Num(n), pos });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&(_, ch)) = chars.peek() {
                    if ch.is_ascii_alphanumeric() || ch == '_' {
                        s.push(ch);
                        bump!();
                    } else {
                        break;
                    }
                }
                let tok = match s.as_str() {
                    "let" => Tok::Let,
                    "true" => Tok::True,
                    "false" => Tok::False,
                    _ => Tok::Ident(s),
                };
                out.push(Spanned { tok, pos });
            }
            other => {
                return Err(ParseError::new(format!("unexpected character '{other}'"), pos));
            }
        }
    }
}
