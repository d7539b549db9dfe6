//! Declarative tag queries.
//!
//! A query is a conjunction of predicates over document tags:
//!
//! ```text
//! query   := ε | pred ( "AND" pred )*
//! pred    := ident op literal | ident "IN" "{" literal ( "," literal )* "}"
//! op      := "=" | "!=" | "<" | "<=" | ">" | ">="      (also ≠ ≤ ≥)
//! literal := "quoted string" | integer | float | true | false
//! ```
//!
//! Floats must contain a `.`; `1` is an integer and `1.0` a float, and the
//! two never compare with each other. A predicate on a tag the document does
//! not carry is false.

mod parse;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::store::{TagMap, TagValue, Variant};

pub use parse::parse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: std::cmp::Ordering) -> bool {
        use std::cmp::Ordering::*;
        match self {
            CmpOp::Eq => ord == Equal,
            CmpOp::Ne => ord != Equal,
            CmpOp::Lt => ord == Less,
            CmpOp::Le => ord != Greater,
            CmpOp::Gt => ord == Greater,
            CmpOp::Ge => ord != Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Test {
    Cmp(CmpOp, TagValue),
    /// Non-empty, single-variant value set.
    In(Vec<TagValue>),
}

impl Test {
    pub fn variant(&self) -> Variant {
        match self {
            Test::Cmp(_, v) => v.variant(),
            Test::In(vs) => vs[0].variant(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub tag: String,
    pub test: Test,
}

impl Predicate {
    pub fn cmp(tag: impl Into<String>, op: CmpOp, value: impl Into<TagValue>) -> Self {
        Predicate {
            tag: tag.into(),
            test: Test::Cmp(op, value.into()),
        }
    }

    pub fn is_in(tag: impl Into<String>, values: Vec<TagValue>) -> Self {
        Predicate {
            tag: tag.into(),
            test: Test::In(values),
        }
    }

    fn type_check(&self, value: &TagValue) -> Result<()> {
        let expected = self.test.variant();
        if value.variant() == expected {
            Ok(())
        } else {
            Err(self.mismatch(value.variant()))
        }
    }

    pub(crate) fn mismatch(&self, found: Variant) -> Error {
        Error::TypeMismatch {
            tag: self.tag.clone(),
            expected: self.test.variant().name().to_owned(),
            found: found.name().to_owned(),
        }
    }

    /// Evaluates against a value already known to have the right variant.
    pub fn matches_value(&self, value: &TagValue) -> bool {
        match &self.test {
            Test::Cmp(op, lit) => value
                .partial_cmp_same(lit)
                .is_some_and(|ord| op.holds(ord)),
            Test::In(set) => set
                .iter()
                .any(|lit| value.partial_cmp_same(lit) == Some(std::cmp::Ordering::Equal)),
        }
    }
}

/// A conjunction of predicates; the empty conjunction matches everything.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TagQuery {
    pub predicates: Vec<Predicate>,
}

impl TagQuery {
    pub fn match_all() -> Self {
        TagQuery::default()
    }

    pub fn new(predicates: Vec<Predicate>) -> Result<Self> {
        let q = TagQuery { predicates };
        q.validate()?;
        Ok(q)
    }

    pub fn and(mut self, p: Predicate) -> Self {
        self.predicates.push(p);
        self
    }

    pub fn is_match_all(&self) -> bool {
        self.predicates.is_empty()
    }

    /// Structural validity: renderable tag names, non-empty single-variant
    /// IN sets and finite floats.
    pub fn validate(&self) -> Result<()> {
        for p in &self.predicates {
            if !parse::is_ident(&p.tag) {
                return Err(Error::InvalidArgument(format!(
                    "tag name {:?} is not addressable by a query",
                    p.tag
                )));
            }
            let values: &[TagValue] = match &p.test {
                Test::Cmp(_, v) => std::slice::from_ref(v),
                Test::In(vs) => {
                    if vs.is_empty() {
                        return Err(Error::InvalidArgument(format!(
                            "empty IN set on `{}`",
                            p.tag
                        )));
                    }
                    if vs.iter().any(|v| v.variant() != vs[0].variant()) {
                        return Err(Error::MixedVariantSet { offset: 0 });
                    }
                    vs
                }
            };
            if values
                .iter()
                .any(|v| matches!(v, TagValue::Float(f) if !f.is_finite()))
            {
                return Err(Error::InvalidArgument(format!(
                    "non-finite float literal on `{}`",
                    p.tag
                )));
            }
        }
        Ok(())
    }

    /// True iff every predicate holds. Type mismatches are checked across all
    /// predicates before any result is produced.
    pub fn evaluate(&self, tags: &TagMap) -> Result<bool> {
        for p in &self.predicates {
            if let Some(v) = tags.get(&p.tag) {
                p.type_check(v)?;
            }
        }
        Ok(self
            .predicates
            .iter()
            .all(|p| tags.get(&p.tag).is_some_and(|v| p.matches_value(v))))
    }

    /// Canonical text form; `parse(render(q)) == q`.
    pub fn render(&self) -> String {
        self.to_string()
    }
}

/// Free-function form of [`TagQuery::evaluate`].
pub fn evaluate(q: &TagQuery, tags: &TagMap) -> Result<bool> {
    q.evaluate(tags)
}

pub fn render(q: &TagQuery) -> String {
    q.render()
}

fn render_literal(v: &TagValue, out: &mut String) {
    use std::fmt::Write;
    match v {
        TagValue::Str(s) => {
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    c if c.is_control() => {
                        let _ = write!(out, "\\u{{{:x}}}", c as u32);
                    }
                    c => out.push(c),
                }
            }
            out.push('"');
        }
        TagValue::Int(i) => {
            let _ = write!(out, "{i}");
        }
        TagValue::Float(f) => {
            // Debug formatting is the shortest representation that
            // round-trips; it may omit the '.' in exponent form.
            let s = format!("{f:?}");
            if s.contains('.') {
                out.push_str(&s);
            } else if let Some(e) = s.find('e') {
                out.push_str(&s[..e]);
                out.push_str(".0");
                out.push_str(&s[e..]);
            } else {
                out.push_str(&s);
                out.push_str(".0");
            }
        }
        TagValue::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
    }
}

impl fmt::Display for TagQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for (i, p) in self.predicates.iter().enumerate() {
            if i > 0 {
                out.push_str(" AND ");
            }
            out.push_str(&p.tag);
            match &p.test {
                Test::Cmp(op, v) => {
                    out.push(' ');
                    out.push_str(op.symbol());
                    out.push(' ');
                    render_literal(v, &mut out);
                }
                Test::In(vs) => {
                    out.push_str(" IN {");
                    for (j, v) in vs.iter().enumerate() {
                        if j > 0 {
                            out.push_str(", ");
                        }
                        render_literal(v, &mut out);
                    }
                    out.push('}');
                }
            }
        }
        f.write_str(&out)
    }
}

impl std::str::FromStr for TagQuery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse(s)
    }
}

// Queries travel as their canonical text in JSON documents.
impl Serialize for TagQuery {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.render())
    }
}

impl<'de> Deserialize<'de> for TagQuery {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }
}
