//! Hand-written lexer and recursive-descent parser for the query grammar.

use super::{CmpOp, Predicate, TagQuery, Test};
use crate::error::{Error, Result};
use crate::store::TagValue;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Int(i64),
    Float(f64),
    Op(CmpOp),
    LBrace,
    RBrace,
    Comma,
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | ':' | '/' | '-')
}

/// Whether `s` can appear as a tag name in query text.
pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(is_ident_start) && chars.all(is_ident_char)
}

fn syntax(offset: usize, expected: &[&str]) -> Error {
    Error::Syntax {
        offset,
        expected: expected.iter().map(|s| s.to_string()).collect(),
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek_char()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn tokens(mut self) -> Result<Vec<Token>> {
        let mut out = Vec::new();
        loop {
            while self.peek_char().is_some_and(char::is_whitespace) {
                self.bump();
            }
            let start = self.pos;
            let Some(c) = self.bump() else {
                out.push(Token {
                    tok: Tok::Eof,
                    offset: start,
                });
                return Ok(out);
            };
            let tok = match c {
                '{' => Tok::LBrace,
                '}' => Tok::RBrace,
                ',' => Tok::Comma,
                '=' => Tok::Op(CmpOp::Eq),
                '≠' => Tok::Op(CmpOp::Ne),
                '≤' => Tok::Op(CmpOp::Le),
                '≥' => Tok::Op(CmpOp::Ge),
                '!' => {
                    if self.peek_char() == Some('=') {
                        self.bump();
                        Tok::Op(CmpOp::Ne)
                    } else {
                        return Err(syntax(self.pos, &["'='"]));
                    }
                }
                '<' | '>' => {
                    let eq = self.peek_char() == Some('=');
                    if eq {
                        self.bump();
                    }
                    Tok::Op(match (c, eq) {
                        ('<', false) => CmpOp::Lt,
                        ('<', true) => CmpOp::Le,
                        ('>', false) => CmpOp::Gt,
                        _ => CmpOp::Ge,
                    })
                }
                '"' => Tok::Str(self.string()?),
                c if c == '-' || c.is_ascii_digit() => self.number(start)?,
                c if is_ident_start(c) => {
                    while self.peek_char().is_some_and(is_ident_char) {
                        self.bump();
                    }
                    Tok::Word(self.src[start..self.pos].to_owned())
                }
                _ => {
                    return Err(syntax(
                        start,
                        &["identifier", "operator", "literal", "'{'", "'}'", "','"],
                    ))
                }
            };
            out.push(Token { tok, offset: start });
        }
    }

    fn string(&mut self) -> Result<String> {
        let mut s = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return Err(syntax(at, &["'\"'"])),
                Some('"') => return Ok(s),
                Some('\\') => match self.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('r') => s.push('\r'),
                    Some('t') => s.push('\t'),
                    Some('u') => {
                        if self.bump() != Some('{') {
                            return Err(syntax(at + 2, &["'{'"]));
                        }
                        let hex_start = self.pos;
                        while self.peek_char().is_some_and(|c| c.is_ascii_hexdigit()) {
                            self.bump();
                        }
                        let hex = &self.src[hex_start..self.pos];
                        if self.bump() != Some('}') {
                            return Err(syntax(self.pos, &["'}'"]));
                        }
                        let ch = u32::from_str_radix(hex, 16)
                            .ok()
                            .and_then(char::from_u32)
                            .ok_or_else(|| syntax(hex_start, &["unicode scalar value"]))?;
                        s.push(ch);
                    }
                    _ => return Err(syntax(at, &["escape sequence"])),
                },
                Some(c) => s.push(c),
            }
        }
    }

    fn digits(&mut self) -> usize {
        let start = self.pos;
        while self.peek_char().is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
        }
        self.pos - start
    }

    fn number(&mut self, start: usize) -> Result<Tok> {
        // The leading '-' or first digit has been consumed.
        let first = &self.src[start..self.pos];
        if first == "-" && self.digits() == 0 {
            return Err(syntax(self.pos, &["digit"]));
        }
        self.digits();
        let mut is_float = false;
        if self.peek_char() == Some('.') {
            self.bump();
            is_float = true;
            if self.digits() == 0 {
                return Err(syntax(self.pos, &["digit"]));
            }
            if matches!(self.peek_char(), Some('e' | 'E')) {
                self.bump();
                if matches!(self.peek_char(), Some('+' | '-')) {
                    self.bump();
                }
                if self.digits() == 0 {
                    return Err(syntax(self.pos, &["digit"]));
                }
            }
        }
        let text = &self.src[start..self.pos];
        if is_float {
            let f: f64 = text
                .parse()
                .map_err(|_| syntax(start, &["float literal"]))?;
            if !f.is_finite() {
                return Err(syntax(start, &["finite float literal"]));
            }
            Ok(Tok::Float(f))
        } else {
            text.parse()
                .map(Tok::Int)
                .map_err(|_| syntax(start, &["64-bit integer"]))
        }
    }
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn query(&mut self) -> Result<TagQuery> {
        let mut preds = Vec::new();
        if self.peek().tok == Tok::Eof {
            return Ok(TagQuery::default());
        }
        loop {
            preds.push(self.predicate()?);
            let t = self.next();
            match t.tok {
                Tok::Eof => break,
                Tok::Word(w) if w == "AND" => continue,
                _ => return Err(syntax(t.offset, &["AND", "end of input"])),
            }
        }
        Ok(TagQuery { predicates: preds })
    }

    fn predicate(&mut self) -> Result<Predicate> {
        let t = self.next();
        let Tok::Word(tag) = t.tok else {
            return Err(syntax(t.offset, &["identifier"]));
        };
        let t = self.next();
        match t.tok {
            Tok::Op(op) => {
                let value = self.literal()?.1;
                Ok(Predicate {
                    tag,
                    test: Test::Cmp(op, value),
                })
            }
            Tok::Word(w) if w == "IN" => {
                let t = self.next();
                if t.tok != Tok::LBrace {
                    return Err(syntax(t.offset, &["'{'"]));
                }
                let (_, first) = self.literal()?;
                let variant = first.variant();
                let mut set = vec![first];
                loop {
                    let t = self.next();
                    match t.tok {
                        Tok::RBrace => break,
                        Tok::Comma => {
                            let (at, v) = self.literal()?;
                            if v.variant() != variant {
                                return Err(Error::MixedVariantSet { offset: at });
                            }
                            set.push(v);
                        }
                        _ => return Err(syntax(t.offset, &["','", "'}'"])),
                    }
                }
                Ok(Predicate {
                    tag,
                    test: Test::In(set),
                })
            }
            _ => Err(syntax(
                t.offset,
                &["=", "!=", "<", "<=", ">", ">=", "IN"],
            )),
        }
    }

    fn literal(&mut self) -> Result<(usize, TagValue)> {
        let t = self.next();
        let v = match t.tok {
            Tok::Str(s) => TagValue::Str(s),
            Tok::Int(i) => TagValue::Int(i),
            Tok::Float(f) => TagValue::Float(f),
            Tok::Word(w) if w == "true" => TagValue::Bool(true),
            Tok::Word(w) if w == "false" => TagValue::Bool(false),
            _ => {
                return Err(syntax(
                    t.offset,
                    &["string", "integer", "float", "true", "false"],
                ))
            }
        };
        Ok((t.offset, v))
    }
}

/// Parses query text. Errors carry the byte offset of the offending token.
pub fn parse(src: &str) -> Result<TagQuery> {
    let toks = Lexer { src, pos: 0 }.tokens()?;
    Parser { toks, pos: 0 }.query()
}
