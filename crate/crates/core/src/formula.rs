//! R-style model formulas: parsing, canonical rendering and the admissible
//! candidate set for constrained forward search.
//!
//! Supported grammar (a strict subset of R):
//!
//! ```text
//! formula := ident '~' rhs
//! rhs     := item ('+' item)*
//! item    := '1' | ident | ident ':' ident | ident '*' ident
//!          | 's(' ident ')' | '(' gexpr '|' ident ')'
//! gexpr   := gitem ('+' gitem)*        gitem := '0' | '1' | ident
//! ```
//!
//! `(a + b | g)` decomposes into `(1|g)`, `(a|g)`, `(b|g)`; a leading `0`
//! inside the group expression drops the implied group intercept.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::family::Family;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormulaErrorKind {
    Syntax,
    UnknownConstruct,
    DuplicateResponse,
    Invalid,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("formula {kind:?} at byte {offset}: {message}")]
pub struct FormulaError {
    pub kind: FormulaErrorKind,
    pub offset: usize,
    pub message: String,
}

impl FormulaError {
    fn new(kind: FormulaErrorKind, offset: usize, message: impl Into<String>) -> Self {
        Self {
            kind,
            offset,
            message: message.into(),
        }
    }
}

/// One additive model component, selected as a unit during search.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Intercept,
    /// A population effect; `partner` makes it the interaction `var:partner`.
    Population { var: String, partner: Option<String> },
    GroupIntercept { factor: String },
    GroupSlope { var: String, factor: String },
    Smooth { var: String },
}

impl Term {
    pub fn population(var: &str) -> Self {
        Term::Population {
            var: var.to_string(),
            partner: None,
        }
    }

    pub fn interaction(a: &str, b: &str) -> Self {
        Term::Population {
            var: a.to_string(),
            partner: Some(b.to_string()),
        }
    }

    pub fn group_intercept(factor: &str) -> Self {
        Term::GroupIntercept {
            factor: factor.to_string(),
        }
    }

    pub fn group_slope(var: &str, factor: &str) -> Self {
        Term::GroupSlope {
            var: var.to_string(),
            factor: factor.to_string(),
        }
    }

    pub fn smooth(var: &str) -> Self {
        Term::Smooth {
            var: var.to_string(),
        }
    }

    /// Canonical id: `1`, `x1`, `x1:x2`, `(1|g)`, `(x1|g)`, `s(x1)`.
    pub fn id(&self) -> String {
        match self {
            Term::Intercept => "1".to_string(),
            Term::Population { var, partner: None } => var.clone(),
            Term::Population {
                var,
                partner: Some(b),
            } => format!("{var}:{b}"),
            Term::GroupIntercept { factor } => format!("(1|{factor})"),
            Term::GroupSlope { var, factor } => format!("({var}|{factor})"),
            Term::Smooth { var } => format!("s({var})"),
        }
    }

    pub fn grouping_factor(&self) -> Option<&str> {
        match self {
            Term::GroupIntercept { factor } | Term::GroupSlope { factor, .. } => Some(factor),
            _ => None,
        }
    }

    pub fn is_group(&self) -> bool {
        self.grouping_factor().is_some()
    }

    /// Variables read from the data (excluding grouping factors).
    pub fn variables(&self) -> Vec<&str> {
        match self {
            Term::Intercept | Term::GroupIntercept { .. } => vec![],
            Term::Population { var, partner } => {
                let mut v = vec![var.as_str()];
                if let Some(b) = partner {
                    v.push(b);
                }
                v
            }
            Term::GroupSlope { var, .. } | Term::Smooth { var } => vec![var],
        }
    }

    /// Duplicate detection treats `a:b` and `b:a` as the same term.
    fn key(&self) -> Term {
        match self {
            Term::Population {
                var,
                partner: Some(b),
            } if b < var => Term::interaction(b, var),
            t => t.clone(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Term {
    type Err = FormulaError;

    /// Parses a canonical id exactly; `(x|g)` is a single slope term here.
    fn from_str(s: &str) -> Result<Self, FormulaError> {
        let mut p = Parser::new(s);
        let term = p.canonical_term()?;
        p.expect_end()?;
        Ok(term)
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A parsed model: response, flattened term set (global intercept implicit)
/// and observation family.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelFormula {
    pub response: String,
    /// Non-intercept terms in order of first appearance.
    pub terms: Vec<Term>,
    pub family: Family,
}

impl ModelFormula {
    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    /// The global intercept is always part of the model.
    pub fn has_intercept(&self) -> bool {
        true
    }

    pub fn contains(&self, term: &Term) -> bool {
        self.terms.iter().any(|t| t.key() == term.key())
    }

    /// Renders `response ~ rhs` for an arbitrary term subset; group terms of
    /// the same factor are merged, using `0 +` when `(1|g)` is absent.
    pub fn render_terms(response: &str, terms: &[Term]) -> String {
        let mut items: Vec<String> = Vec::new();
        let mut seen_factors: Vec<&str> = Vec::new();
        for t in terms {
            match t {
                Term::Intercept => {}
                Term::GroupIntercept { factor } | Term::GroupSlope { factor, .. } => {
                    if seen_factors.contains(&factor.as_str()) {
                        continue;
                    }
                    seen_factors.push(factor);
                    let has_int = terms.contains(&Term::group_intercept(factor));
                    let mut parts: Vec<String> = Vec::new();
                    if !has_int {
                        parts.push("0".into());
                    }
                    for s in terms {
                        if let Term::GroupSlope { var, factor: f2 } = s {
                            if f2 == factor {
                                parts.push(var.clone());
                            }
                        }
                    }
                    if parts.is_empty() {
                        parts.push("1".into());
                    }
                    items.push(format!("({} | {factor})", parts.join(" + ")));
                }
                other => items.push(other.id()),
            }
        }
        if items.is_empty() {
            items.push("1".into());
        }
        format!("{response} ~ {}", items.join(" + "))
    }

    pub fn render(&self) -> String {
        Self::render_terms(&self.response, &self.terms)
    }

    fn validate(&self, text_len: usize) -> Result<(), FormulaError> {
        let has_main = |v: &str| {
            self.terms
                .iter()
                .any(|t| *t == Term::population(v) || *t == Term::smooth(v))
        };
        for t in &self.terms {
            if t.variables().contains(&self.response.as_str())
                || t.grouping_factor() == Some(self.response.as_str())
            {
                return Err(FormulaError::new(
                    FormulaErrorKind::Invalid,
                    text_len,
                    format!("response `{}` used as a predictor in `{t}`", self.response),
                ));
            }
            match t {
                Term::GroupSlope { var, .. } if !has_main(var) => {
                    return Err(FormulaError::new(
                        FormulaErrorKind::Invalid,
                        text_len,
                        format!("group slope `{t}` needs `{var}` as a population or smooth term"),
                    ));
                }
                Term::Population {
                    var,
                    partner: Some(b),
                } => {
                    let present = |v: &str| self.terms.contains(&Term::population(v));
                    if !present(var) || !present(b) {
                        return Err(FormulaError::new(
                            FormulaErrorKind::Invalid,
                            text_len,
                            format!("interaction `{t}` needs both main effects"),
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl FromStr for ModelFormula {
    type Err = FormulaError;

    fn from_str(s: &str) -> Result<Self, FormulaError> {
        parse_formula(s)
    }
}

/// Parses a formula into its flattened term set. The family defaults to
/// Gaussian; set another with [`ModelFormula::with_family`].
pub fn parse_formula(text: &str) -> Result<ModelFormula, FormulaError> {
    if text.trim().is_empty() {
        return Err(FormulaError::new(FormulaErrorKind::Syntax, 0, "empty formula"));
    }
    let mut p = Parser::new(text);
    let response = p.ident()?;
    p.expect(Tok::Tilde)?;
    let mut raw: Vec<Term> = Vec::new();
    loop {
        p.item(&mut raw)?;
        match p.peek()? {
            (Tok::Plus, _) => {
                p.bump()?;
            }
            (Tok::End, _) => break,
            (Tok::Tilde, at) => {
                return Err(FormulaError::new(
                    FormulaErrorKind::DuplicateResponse,
                    at,
                    "a formula has exactly one `~`",
                ))
            }
            (t, at) => {
                return Err(FormulaError::new(
                    FormulaErrorKind::Syntax,
                    at,
                    format!("expected `+` or end of formula, found {t:?}"),
                ))
            }
        }
    }
    let mut seen = HashSet::new();
    let terms: Vec<Term> = raw
        .into_iter()
        .filter(|t| *t != Term::Intercept && seen.insert(t.key()))
        .collect();
    let formula = ModelFormula {
        response,
        terms,
        family: Family::Gaussian,
    };
    formula.validate(text.len())?;
    Ok(formula)
}

/// Terms of `full` not yet in `current` that may enter next: a group slope
/// needs its population (or smooth) counterpart, an interaction needs both
/// main effects, and group intercepts are always admissible.
pub fn candidate_terms(current: &[Term], full: &ModelFormula) -> Vec<Term> {
    let has = |t: &Term| current.iter().any(|c| c.key() == t.key());
    full.terms
        .iter()
        .filter(|t| !has(t))
        .filter(|t| admissible(t, current))
        .cloned()
        .collect()
}

/// Whether `term` may be added to `current` under the search restrictions.
pub fn admissible(term: &Term, current: &[Term]) -> bool {
    let has = |t: Term| current.contains(&t);
    match term {
        Term::Intercept | Term::GroupIntercept { .. } | Term::Smooth { .. } => true,
        Term::Population { partner: None, .. } => true,
        Term::Population {
            var,
            partner: Some(b),
        } => has(Term::population(var)) && has(Term::population(b)),
        Term::GroupSlope { var, .. } => has(Term::population(var)) || has(Term::smooth(var)),
    }
}

/// Whether every prefix of `order` respects [`admissible`].
pub fn is_admissible_sequence(order: &[Term]) -> bool {
    (0..order.len()).all(|k| admissible(&order[k], &order[..k]))
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(String),
    Tilde,
    Plus,
    Colon,
    Star,
    LParen,
    RParen,
    Bar,
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    /// Next token and its byte offset, without consuming it.
    fn peek(&mut self) -> Result<(Tok, usize), FormulaError> {
        let save = self.pos;
        let r = self.bump();
        self.pos = save;
        r
    }

    fn bump(&mut self) -> Result<(Tok, usize), FormulaError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let Some(c) = rest.chars().next() else {
            return Ok((Tok::End, start));
        };
        let single = match c {
            '~' => Some(Tok::Tilde),
            '+' => Some(Tok::Plus),
            ':' => Some(Tok::Colon),
            '*' => Some(Tok::Star),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '|' => Some(Tok::Bar),
            _ => None,
        };
        if let Some(t) = single {
            self.pos += 1;
            return Ok((t, start));
        }
        if c.is_ascii_digit() {
            let len = rest
                .find(|ch: char| !(ch.is_ascii_digit() || ch == '.'))
                .unwrap_or(rest.len());
            self.pos += len;
            return Ok((Tok::Num(rest[..len].to_string()), start));
        }
        if c.is_alphabetic() || c == '_' || c == '.' {
            let len = rest
                .find(|ch: char| !(ch.is_alphanumeric() || ch == '_' || ch == '.'))
                .unwrap_or(rest.len());
            self.pos += len;
            return Ok((Tok::Ident(rest[..len].to_string()), start));
        }
        let kind = if "-/^%,=".contains(c) {
            FormulaErrorKind::UnknownConstruct
        } else {
            FormulaErrorKind::Syntax
        };
        Err(FormulaError::new(kind, start, format!("unexpected character `{c}`")))
    }

    fn expect(&mut self, want: Tok) -> Result<usize, FormulaError> {
        let (t, at) = self.bump()?;
        if t == want {
            Ok(at)
        } else {
            Err(FormulaError::new(
                FormulaErrorKind::Syntax,
                at,
                format!("expected {want:?}, found {t:?}"),
            ))
        }
    }

    fn expect_end(&mut self) -> Result<(), FormulaError> {
        self.expect(Tok::End).map(|_| ())
    }

    fn ident(&mut self) -> Result<String, FormulaError> {
        match self.bump()? {
            (Tok::Ident(s), _) => Ok(s),
            (t, at) => Err(FormulaError::new(
                FormulaErrorKind::Syntax,
                at,
                format!("expected a variable name, found {t:?}"),
            )),
        }
    }

    /// One additive item of the right-hand side, possibly several terms.
    fn item(&mut self, out: &mut Vec<Term>) -> Result<(), FormulaError> {
        match self.bump()? {
            (Tok::Num(n), at) => {
                if n == "1" {
                    out.push(Term::Intercept);
                    Ok(())
                } else {
                    Err(FormulaError::new(
                        FormulaErrorKind::UnknownConstruct,
                        at,
                        format!("only `1` may appear as a number, found `{n}`"),
                    ))
                }
            }
            (Tok::LParen, _) => self.group(out),
            (Tok::Ident(name), at) => {
                if let (Tok::LParen, lp) = self.peek()? {
                    if name != "s" {
                        return Err(FormulaError::new(
                            FormulaErrorKind::UnknownConstruct,
                            at,
                            format!("unsupported function `{name}(...)`"),
                        ));
                    }
                    self.bump()?;
                    let var = self.ident()?;
                    match self.bump()? {
                        (Tok::RParen, _) => {}
                        (_, at) => {
                            return Err(FormulaError::new(
                                FormulaErrorKind::UnknownConstruct,
                                at.max(lp),
                                "smooth terms take exactly one variable",
                            ))
                        }
                    }
                    out.push(Term::smooth(&var));
                    return Ok(());
                }
                match self.peek()? {
                    (Tok::Colon, _) | (Tok::Star, _) => {
                        let (op, _) = self.bump()?;
                        let b = self.ident()?;
                        if let (Tok::Colon | Tok::Star, at) = self.peek()? {
                            return Err(FormulaError::new(
                                FormulaErrorKind::UnknownConstruct,
                                at,
                                "only two-way interactions are supported",
                            ));
                        }
                        if op == Tok::Star {
                            out.push(Term::population(&name));
                            out.push(Term::population(&b));
                        }
                        out.push(Term::interaction(&name, &b));
                    }
                    _ => out.push(Term::population(&name)),
                }
                Ok(())
            }
            (Tok::End, at) => Err(FormulaError::new(
                FormulaErrorKind::Syntax,
                at,
                "unexpected end of formula",
            )),
            (t, at) => Err(FormulaError::new(
                FormulaErrorKind::Syntax,
                at,
                format!("unexpected {t:?}"),
            )),
        }
    }

    /// `( gexpr | factor )`, after the opening parenthesis.
    fn group(&mut self, out: &mut Vec<Term>) -> Result<(), FormulaError> {
        let mut intercept = true;
        let mut slopes: Vec<String> = Vec::new();
        loop {
            match self.bump()? {
                (Tok::Num(n), at) => match n.as_str() {
                    "1" => intercept = true,
                    "0" => intercept = false,
                    _ => {
                        return Err(FormulaError::new(
                            FormulaErrorKind::UnknownConstruct,
                            at,
                            format!("unexpected number `{n}` in group term"),
                        ))
                    }
                },
                (Tok::Ident(v), _) => {
                    if let (Tok::Colon | Tok::Star | Tok::LParen, at) = self.peek()? {
                        return Err(FormulaError::new(
                            FormulaErrorKind::UnknownConstruct,
                            at,
                            "group terms accept plain variables only",
                        ));
                    }
                    slopes.push(v);
                }
                (t, at) => {
                    return Err(FormulaError::new(
                        FormulaErrorKind::Syntax,
                        at,
                        format!("expected a group-term variable, found {t:?}"),
                    ))
                }
            }
            match self.bump()? {
                (Tok::Plus, _) => continue,
                (Tok::Bar, at) => {
                    if let (Tok::Bar, _) = self.peek()? {
                        return Err(FormulaError::new(
                            FormulaErrorKind::UnknownConstruct,
                            at,
                            "`||` is not supported",
                        ));
                    }
                    break;
                }
                (t, at) => {
                    return Err(FormulaError::new(
                        FormulaErrorKind::Syntax,
                        at,
                        format!("expected `+` or `|` in group term, found {t:?}"),
                    ))
                }
            }
        }
        let factor = self.ident()?;
        match self.bump()? {
            (Tok::RParen, _) => {}
            (t, at) => {
                return Err(FormulaError::new(
                    FormulaErrorKind::Syntax,
                    at,
                    format!("expected `)` after grouping factor, found {t:?}"),
                ))
            }
        }
        if intercept {
            out.push(Term::group_intercept(&factor));
        }
        for v in slopes {
            out.push(Term::group_slope(&v, &factor));
        }
        Ok(())
    }

    /// A single canonical term id.
    fn canonical_term(&mut self) -> Result<Term, FormulaError> {
        match self.bump()? {
            (Tok::Num(n), _) if n == "1" => Ok(Term::Intercept),
            (Tok::LParen, _) => {
                let inner = match self.bump()? {
                    (Tok::Num(n), _) if n == "1" => None,
                    (Tok::Ident(v), _) => Some(v),
                    (t, at) => {
                        return Err(FormulaError::new(
                            FormulaErrorKind::Syntax,
                            at,
                            format!("bad group term id near {t:?}"),
                        ))
                    }
                };
                self.expect(Tok::Bar)?;
                let factor = self.ident()?;
                self.expect(Tok::RParen)?;
                Ok(match inner {
                    None => Term::group_intercept(&factor),
                    Some(v) => Term::group_slope(&v, &factor),
                })
            }
            (Tok::Ident(name), _) => {
                if name == "s" {
                    if let (Tok::LParen, _) = self.peek()? {
                        self.bump()?;
                        let v = self.ident()?;
                        self.expect(Tok::RParen)?;
                        return Ok(Term::smooth(&v));
                    }
                }
                if let (Tok::Colon, _) = self.peek()? {
                    self.bump()?;
                    let b = self.ident()?;
                    return Ok(Term::interaction(&name, &b));
                }
                Ok(Term::population(&name))
            }
            (t, at) => Err(FormulaError::new(
                FormulaErrorKind::Syntax,
                at,
                format!("bad term id near {t:?}"),
            )),
        }
    }
}
