//! Branch predicates (`var OP literal`) and `${var}` templates.

use std::cmp::Ordering;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    // Two-character operators first so `<=` is not read as `<`.
    const TOKENS: [(&'static str, CompareOp); 6] = [
        ("==", CompareOp::Eq),
        ("!=", CompareOp::Ne),
        ("<=", CompareOp::Le),
        (">=", CompareOp::Ge),
        ("<", CompareOp::Lt),
        (">", CompareOp::Gt),
    ];

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CompareOp::Eq => ord == Ordering::Equal,
            CompareOp::Ne => ord != Ordering::Equal,
            CompareOp::Lt => ord == Ordering::Less,
            CompareOp::Le => ord != Ordering::Greater,
            CompareOp::Gt => ord == Ordering::Greater,
            CompareOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub var: String,
    pub op: CompareOp,
    pub literal: String,
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
}

impl Predicate {
    pub fn parse(src: &str) -> Result<Predicate, String> {
        let (at, token, op) = CompareOp::TOKENS
            .iter()
            .filter_map(|(tok, op)| src.find(tok).map(|i| (i, *tok, *op)))
            .min_by_key(|(i, tok, _)| (*i, std::cmp::Reverse(tok.len())))
            .ok_or_else(|| format!("no comparison operator in `{src}`"))?;
        let var = src[..at].trim();
        if !is_identifier(var) {
            return Err(format!("`{var}` is not a variable name"));
        }
        let mut literal = src[at + token.len()..].trim();
        if literal.len() >= 2 && literal.starts_with('"') && literal.ends_with('"') {
            literal = &literal[1..literal.len() - 1];
        }
        Ok(Predicate {
            var: var.to_string(),
            op,
            literal: literal.to_string(),
        })
    }

    pub fn eval(&self, vars: &BTreeMap<String, String>) -> Result<bool, String> {
        let value = vars
            .get(&self.var)
            .ok_or_else(|| format!("variable `{}` is unset", self.var))?;
        let ord = match (decimal(value), decimal(&self.literal)) {
            (Some(a), Some(b)) => a.partial_cmp(&b).unwrap_or(Ordering::Equal),
            _ => value.as_str().cmp(self.literal.as_str()),
        };
        Ok(self.op.holds(ord))
    }
}

/// Parses `[+-]digits[.digits]`; anything else is not a number.
fn decimal(s: &str) -> Option<f64> {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (int, frac) = digits.split_once('.').unwrap_or((digits, "0"));
    let ok = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    (ok(int) && ok(frac)).then(|| s.parse().ok()).flatten()
}

enum Piece<'a> {
    Text(&'a str),
    Var(&'a str),
}

fn pieces(template: &str) -> Result<Vec<Piece<'_>>, String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("${") {
        out.push(Piece::Text(&rest[..start]));
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| format!("unterminated `${{` in template `{template}`"))?;
        let name = after[..end].trim();
        if !is_identifier(name) {
            return Err(format!("`{name}` is not a variable name"));
        }
        out.push(Piece::Var(name));
        rest = &after[end + 1..];
    }
    out.push(Piece::Text(rest));
    Ok(out)
}

/// Variable names referenced by a template, in order of appearance.
pub fn template_vars(template: &str) -> Result<Vec<String>, String> {
    Ok(pieces(template)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Var(v) => Some(v.to_string()),
            Piece::Text(_) => None,
        })
        .collect())
}

pub fn render(template: &str, vars: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    for p in pieces(template)? {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Var(v) => out.push_str(vars.get(v).ok_or_else(|| format!("variable `{v}` is unset"))?),
        }
    }
    Ok(out)
}
