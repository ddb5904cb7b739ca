use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::ledger::Endorsement;

use super::TxFlowError;

/// Boolean expression over organization names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EndorsementPolicy {
    Org(String),
    And(Vec<EndorsementPolicy>),
    Or(Vec<EndorsementPolicy>),
    OutOf(usize, Vec<EndorsementPolicy>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid endorsement policy at byte {pos}: {reason}")]
pub struct PolicyParseError {
    pub pos: usize,
    pub reason: String,
}

impl EndorsementPolicy {
    /// `OUTOF(2, members...)`, or everyone when there are fewer than two.
    pub fn default_for<I, S>(members: I) -> EndorsementPolicy
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let leaves: Vec<_> = members.into_iter().map(|m| EndorsementPolicy::Org(m.into())).collect();
        let n = leaves.len().min(2);
        EndorsementPolicy::OutOf(n, leaves)
    }

    pub fn org(name: impl Into<String>) -> Self {
        EndorsementPolicy::Org(name.into())
    }

    /// Structural well-formedness: every gate has children, `1 <= n <= len`.
    pub fn check(&self) -> Result<(), String> {
        match self {
            EndorsementPolicy::Org(name) if name.is_empty() => Err("empty org name".into()),
            EndorsementPolicy::Org(_) => Ok(()),
            EndorsementPolicy::And(c) | EndorsementPolicy::Or(c) if c.is_empty() => {
                Err("gate without operands".into())
            }
            EndorsementPolicy::OutOf(n, c) if *n == 0 || *n > c.len() => {
                Err(format!("OUTOF threshold {n} outside 1..={}", c.len()))
            }
            EndorsementPolicy::And(c) | EndorsementPolicy::Or(c) | EndorsementPolicy::OutOf(_, c) => {
                c.iter().try_for_each(|p| p.check())
            }
        }
    }

    pub fn orgs(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_orgs(&mut out);
        out
    }

    fn collect_orgs(&self, out: &mut BTreeSet<String>) {
        match self {
            EndorsementPolicy::Org(o) => {
                out.insert(o.clone());
            }
            EndorsementPolicy::And(c) | EndorsementPolicy::Or(c) | EndorsementPolicy::OutOf(_, c) => {
                c.iter().for_each(|p| p.collect_orgs(out))
            }
        }
    }

    pub fn is_satisfied_by<S: AsRef<str>>(&self, orgs: &BTreeSet<S>) -> bool
    where
        S: Ord,
    {
        self.eval(&|name| orgs.iter().any(|o| o.as_ref() == name))
    }

    fn eval(&self, has: &dyn Fn(&str) -> bool) -> bool {
        match self {
            EndorsementPolicy::Org(o) => has(o),
            EndorsementPolicy::And(c) => c.iter().all(|p| p.eval(has)),
            EndorsementPolicy::Or(c) => c.iter().any(|p| p.eval(has)),
            EndorsementPolicy::OutOf(n, c) => c.iter().filter(|p| p.eval(has)).count() >= *n,
        }
    }
}

/// Whether the orgs behind `endorsements` satisfy `policy`. The endorsements
/// must already be individually verified and agree on one read/write set.
pub fn check_policy(policy: &EndorsementPolicy, endorsements: &[Endorsement]) -> Result<bool, TxFlowError> {
    if let Some(first) = endorsements.first() {
        if endorsements.iter().any(|e| e.rw_set_hash != first.rw_set_hash) {
            return Err(TxFlowError::MixedReadWriteSets);
        }
    }
    let orgs: BTreeSet<&str> = endorsements.iter().map(|e| e.endorser.org.as_str()).collect();
    Ok(policy.is_satisfied_by(&orgs))
}

impl fmt::Display for EndorsementPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |f: &mut fmt::Formatter<'_>, items: &[EndorsementPolicy]| -> fmt::Result {
            for (i, p) in items.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{p}")?;
            }
            f.write_str(")")
        };
        match self {
            EndorsementPolicy::Org(o) => f.write_str(o),
            EndorsementPolicy::And(c) => {
                f.write_str("AND(")?;
                list(f, c)
            }
            EndorsementPolicy::Or(c) => {
                f.write_str("OR(")?;
                list(f, c)
            }
            EndorsementPolicy::OutOf(n, c) => {
                write!(f, "OUTOF({n},")?;
                list(f, c)
            }
        }
    }
}

impl FromStr for EndorsementPolicy {
    type Err = PolicyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parser = Parser { src: s.as_bytes(), pos: 0 };
        let policy = parser.expr()?;
        parser.skip_ws();
        if parser.pos != s.len() {
            return Err(parser.error("trailing input"));
        }
        policy.check().map_err(|reason| PolicyParseError { pos: 0, reason })?;
        Ok(policy)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, reason: &str) -> PolicyParseError {
        PolicyParseError {
            pos: self.pos,
            reason: reason.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.src.get(self.pos).is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn ident(&mut self) -> Result<String, PolicyParseError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .src
            .get(self.pos)
            .is_some_and(|b| b.is_ascii_alphanumeric() || b"_-.@".contains(b))
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a name"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn eat(&mut self, byte: u8) -> bool {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&byte) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<EndorsementPolicy, PolicyParseError> {
        let name = self.ident()?;
        if !self.eat(b'(') {
            return Ok(EndorsementPolicy::Org(name));
        }
        let op = name.to_ascii_uppercase();
        let threshold = if op == "OUTOF" {
            let n = self.ident()?;
            let n: usize = n.parse().map_err(|_| self.error("OUTOF needs a numeric threshold"))?;
            if !self.eat(b',') {
                return Err(self.error("expected ','"));
            }
            Some(n)
        } else if op == "AND" || op == "OR" {
            None
        } else {
            return Err(self.error("unknown operator"));
        };
        let mut children = vec![self.expr()?];
        while self.eat(b',') {
            children.push(self.expr()?);
        }
        if !self.eat(b')') {
            return Err(self.error("expected ')'"));
        }
        Ok(match (op.as_str(), threshold) {
            ("AND", _) => EndorsementPolicy::And(children),
            ("OR", _) => EndorsementPolicy::Or(children),
            (_, Some(n)) => EndorsementPolicy::OutOf(n, children),
            _ => unreachable!(),
        })
    }
}
