//! Decision-list interpreter for learned rule-sets, with justification trees.
//!
//! Class rules are tried in order and the first one whose body holds decides
//! the class. `not abN` holds when every rule defining `abN` fails (negation
//! as failure); no firing rule means the image is left unclassified.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarization::TableRow;
use crate::rules::{Head, Literal, Pred, Rule, RuleSet};
use crate::{Error, Result};

/// Query form accepted alongside facts.
pub const QUERY: &str = "?-target(img, X).";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSet {
    pub image_id: String,
    /// Filters whose binarized value is 1.
    pub facts: BTreeSet<usize>,
}

impl FactSet {
    pub fn new(image_id: impl Into<String>, facts: impl IntoIterator<Item = usize>) -> Self {
        FactSet {
            image_id: image_id.into(),
            facts: facts.into_iter().collect(),
        }
    }

    pub fn from_row(row: &TableRow) -> Self {
        let facts = row.features.iter().enumerate().filter(|(_, &v)| v == 1).map(|(j, _)| j);
        FactSet::new(row.id.clone(), facts)
    }

    pub fn from_bits(image_id: impl Into<String>, bits: &[u8]) -> Self {
        FactSet::new(image_id, bits.iter().enumerate().filter(|(_, &v)| v == 1).map(|(j, _)| j))
    }

    pub fn contains(&self, filter: usize) -> bool {
        self.facts.contains(&filter)
    }

    /// One `NNN(img).` line per fact, followed by the query.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.facts {
            let _ = writeln!(out, "{f}(img).");
        }
        out.push_str(QUERY);
        out.push('\n');
        out
    }

    pub fn parse(image_id: &str, text: &str) -> Result<Self> {
        let mut facts = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('%') || line.starts_with("?-") {
                continue;
            }
            let id = line
                .strip_suffix("(img).")
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::parse(image_id, i + 1, format!("expected 'NNN(img).', found '{line}'")))?;
            facts.insert(id);
        }
        Ok(FactSet::new(image_id, facts))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        FactSet::parse(&id, &text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::parse(path.display().to_string(), line, message),
            other => other,
        })
    }
}

/// Why a body literal holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Support {
    /// Positive filter literal backed by a fact.
    Fact { literal: String, filter: usize },
    /// Negated filter literal whose fact is absent.
    NoFact { literal: String, filter: usize },
    /// Positive ab literal with the rule that derives it.
    Derived { literal: String, proof: Box<Justification> },
    /// Negated ab literal: every defining rule fails.
    Refuted { literal: String, failures: Vec<Failure> },
}

/// A defining rule that does not fire, with its first failing literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rule: String,
    pub literal: String,
    pub reason: FailReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FailReason {
    MissingFact { filter: usize },
    PresentFact { filter: usize },
    /// Negated ab literal whose ab predicate holds.
    Derived { proof: Box<Justification> },
    /// Positive ab literal whose defining rules all fail.
    Refuted { failures: Vec<Failure> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Justification {
    pub rule: String,
    pub head: Head,
    pub children: Vec<Support>,
}

impl Justification {
    pub fn class(&self) -> Option<&str> {
        match &self.head {
            Head::Class(c) => Some(c),
            Head::Ab(_) => None,
        }
    }

    /// Nesting depth; a bodiless rule has depth 1.
    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(support_depth).max().unwrap_or(0)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        render_just(self, 0, &mut out);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Re-checks every leaf against `facts` and every rule against `rs`;
    /// returns the class the tree derives when it is consistent.
    pub fn replay(&self, rs: &RuleSet, facts: &FactSet) -> Option<String> {
        let class = self.class()?.to_string();
        let rule = rs.class_rules.iter().find(|r| rs.render_rule(r) == self.rule)?;
        replay_rule(rs, facts, rule, self).then_some(class)
    }
}

fn support_depth(s: &Support) -> usize {
    match s {
        Support::Fact { .. } | Support::NoFact { .. } => 1,
        Support::Derived { proof, .. } => 1 + proof.depth(),
        Support::Refuted { failures, .. } => 1 + failures.iter().map(failure_depth).max().unwrap_or(0),
    }
}

fn failure_depth(f: &Failure) -> usize {
    match &f.reason {
        FailReason::MissingFact { .. } | FailReason::PresentFact { .. } => 1,
        FailReason::Derived { proof } => 1 + proof.depth(),
        FailReason::Refuted { failures } => 1 + failures.iter().map(failure_depth).max().unwrap_or(0),
    }
}

fn pad(out: &mut String, depth: usize) {
    out.extend(std::iter::repeat_n("  ", depth));
}

fn render_just(j: &Justification, depth: usize, out: &mut String) {
    pad(out, depth);
    let _ = writeln!(out, "{}", j.rule);
    for s in &j.children {
        pad(out, depth + 1);
        match s {
            Support::Fact { literal, filter } => {
                let _ = writeln!(out, "{literal}: fact {filter}(img)");
            }
            Support::NoFact { literal, filter } => {
                let _ = writeln!(out, "{literal}: no fact {filter}(img)");
            }
            Support::Derived { literal, proof } => {
                let _ = writeln!(out, "{literal}: derived by");
                render_just(proof, depth + 2, out);
            }
            Support::Refuted { literal, failures } => {
                let _ = writeln!(out, "{literal}: every defining rule fails");
                for f in failures {
                    render_failure(f, depth + 2, out);
                }
            }
        }
    }
}

fn render_failure(f: &Failure, depth: usize, out: &mut String) {
    pad(out, depth);
    let _ = write!(out, "{} fails at {}: ", f.rule, f.literal);
    match &f.reason {
        FailReason::MissingFact { filter } => {
            let _ = writeln!(out, "no fact {filter}(img)");
        }
        FailReason::PresentFact { filter } => {
            let _ = writeln!(out, "fact {filter}(img) holds");
        }
        FailReason::Derived { proof } => {
            let _ = writeln!(out, "derived by");
            render_just(proof, depth + 1, out);
        }
        FailReason::Refuted { failures } => {
            let _ = writeln!(out, "every defining rule fails");
            for g in failures {
                render_failure(g, depth + 1, out);
            }
        }
    }
}

/// Evaluates a validated rule-set against fact sets.
pub struct Interpreter<'a> {
    rs: &'a RuleSet,
}

impl<'a> Interpreter<'a> {
    pub fn new(rs: &'a RuleSet) -> Result<Self> {
        rs.validate()?;
        Ok(Interpreter { rs })
    }

    fn ab_holds(&self, id: usize, facts: &FactSet) -> bool {
        self.rs.ab_definitions(id).any(|r| self.fires(r, facts))
    }

    fn literal_holds(&self, l: &Literal, facts: &FactSet) -> bool {
        let v = match l.pred {
            Pred::Filter(f) => facts.contains(f),
            Pred::Ab(id) => self.ab_holds(id, facts),
        };
        v != l.negated
    }

    fn fires(&self, r: &Rule, facts: &FactSet) -> bool {
        r.body.iter().all(|l| self.literal_holds(l, facts))
    }

    /// Index of the first class rule that fires.
    pub fn fired_rule(&self, facts: &FactSet) -> Option<usize> {
        self.rs.class_rules.iter().position(|r| self.fires(r, facts))
    }

    /// Class name of the first firing rule; `None` is an abstention.
    pub fn classify(&self, facts: &FactSet) -> Option<&'a str> {
        self.fired_rule(facts).map(|i| match &self.rs.class_rules[i].head {
            Head::Class(c) => c.as_str(),
            Head::Ab(_) => unreachable!("class rules have class heads"),
        })
    }

    pub fn justify(&self, facts: &FactSet) -> Option<Justification> {
        let i = self.fired_rule(facts)?;
        Some(self.prove(&self.rs.class_rules[i], facts))
    }

    fn literal_text(&self, l: &Literal) -> String {
        self.rs.render_literal(l)
    }

    /// Proof of a rule known to fire.
    fn prove(&self, r: &Rule, facts: &FactSet) -> Justification {
        let children = r
            .body
            .iter()
            .map(|l| {
                let literal = self.literal_text(l);
                match (l.pred, l.negated) {
                    (Pred::Filter(filter), false) => Support::Fact { literal, filter },
                    (Pred::Filter(filter), true) => Support::NoFact { literal, filter },
                    (Pred::Ab(id), false) => {
                        let r = self.rs.ab_definitions(id).find(|r| self.fires(r, facts)).expect("literal holds");
                        Support::Derived {
                            literal,
                            proof: Box::new(self.prove(r, facts)),
                        }
                    }
                    (Pred::Ab(id), true) => Support::Refuted {
                        literal,
                        failures: self.refute(id, facts),
                    },
                }
            })
            .collect();
        Justification {
            rule: self.rs.render_rule(r),
            head: r.head.clone(),
            children,
        }
    }

    /// Failure records for every rule defining `ab{id}`, all known to fail.
    fn refute(&self, id: usize, facts: &FactSet) -> Vec<Failure> {
        self.rs
            .ab_definitions(id)
            .map(|r| {
                let l = r.body.iter().find(|l| !self.literal_holds(l, facts)).expect("rule fails");
                let reason = match (l.pred, l.negated) {
                    (Pred::Filter(filter), false) => FailReason::MissingFact { filter },
                    (Pred::Filter(filter), true) => FailReason::PresentFact { filter },
                    (Pred::Ab(inner), false) => FailReason::Refuted {
                        failures: self.refute(inner, facts),
                    },
                    (Pred::Ab(inner), true) => {
                        let r = self.rs.ab_definitions(inner).find(|r| self.fires(r, facts)).expect("ab holds");
                        FailReason::Derived {
                            proof: Box::new(self.prove(r, facts)),
                        }
                    }
                };
                Failure {
                    rule: self.rs.render_rule(r),
                    literal: self.literal_text(l),
                    reason,
                }
            })
            .collect()
    }
}

fn replay_rule(rs: &RuleSet, facts: &FactSet, rule: &Rule, j: &Justification) -> bool {
    if rs.render_rule(rule) != j.rule || rule.body.len() != j.children.len() {
        return false;
    }
    rule.body.iter().zip(&j.children).all(|(l, s)| match (l.pred, l.negated, s) {
        (Pred::Filter(f), false, Support::Fact { filter, .. }) => f == *filter && facts.contains(f),
        (Pred::Filter(f), true, Support::NoFact { filter, .. }) => f == *filter && !facts.contains(f),
        (Pred::Ab(id), false, Support::Derived { proof, .. }) => replay_ab(rs, facts, id, proof),
        (Pred::Ab(id), true, Support::Refuted { failures, .. }) => replay_refuted(rs, facts, id, failures),
        _ => false,
    })
}

fn replay_ab(rs: &RuleSet, facts: &FactSet, id: usize, proof: &Justification) -> bool {
    proof.head == Head::Ab(id) && rs.ab_definitions(id).any(|r| replay_rule(rs, facts, r, proof))
}

fn replay_refuted(rs: &RuleSet, facts: &FactSet, id: usize, failures: &[Failure]) -> bool {
    let defs: Vec<&Rule> = rs.ab_definitions(id).collect();
    defs.len() == failures.len()
        && defs.iter().zip(failures).all(|(r, f)| {
            rs.render_rule(r) == f.rule
                && r.body.iter().any(|l| match (l.pred, l.negated, &f.reason) {
                    (Pred::Filter(x), false, FailReason::MissingFact { filter }) => x == *filter && !facts.contains(x),
                    (Pred::Filter(x), true, FailReason::PresentFact { filter }) => x == *filter && facts.contains(x),
                    (Pred::Ab(inner), false, FailReason::Refuted { failures }) => {
                        replay_refuted(rs, facts, inner, failures)
                    }
                    (Pred::Ab(inner), true, FailReason::Derived { proof }) => replay_ab(rs, facts, inner, proof),
                    _ => false,
                })
        })
}

/// Validates `rs` and classifies one fact set.
pub fn classify(rs: &RuleSet, facts: &FactSet) -> Result<Option<String>> {
    Ok(Interpreter::new(rs)?.classify(facts).map(str::to_string))
}

pub fn justify(rs: &RuleSet, facts: &FactSet) -> Result<Option<Justification>> {
    Ok(Interpreter::new(rs)?.justify(facts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::parse_program;

    const PROGRAM: &str = "target(X,'A') :- 0(X), not ab1(X).\ntarget(X,'B') :- 1(X).\nab1(X) :- 2(X).\n";

    #[test]
    fn empty_ruleset_abstains() {
        let rs = RuleSet::default();
        assert_eq!(classify(&rs, &FactSet::new("i", [1, 2])).unwrap(), None);
        assert!(justify(&rs, &FactSet::new("i", [])).unwrap().is_none());
    }

    #[test]
    fn decision_list_order() {
        let rs = parse_program(PROGRAM, None).unwrap();
        let it = Interpreter::new(&rs).unwrap();
        assert_eq!(it.classify(&FactSet::new("i", [0, 1])), Some("A"));
        assert_eq!(it.classify(&FactSet::new("i", [0, 1, 2])), Some("B"));
        assert_eq!(it.classify(&FactSet::new("i", [0, 2])), None);
    }

    #[test]
    fn bodiless_rule_has_no_children() {
        let rs = parse_program("target(X,'A').", None).unwrap();
        let j = justify(&rs, &FactSet::new("i", [])).unwrap().unwrap();
        assert!(j.children.is_empty());
        assert_eq!(j.depth(), 1);
    }

    #[test]
    fn failure_witness_names_unmet_literal() {
        let rs = parse_program(PROGRAM, None).unwrap();
        let facts = FactSet::new("img", [0]);
        let j = justify(&rs, &facts).unwrap().unwrap();
        match &j.children[1] {
            Support::Refuted { literal, failures } => {
                assert_eq!(literal, "not ab1(X)");
                assert_eq!(failures[0].literal, "2(X)");
                assert_eq!(failures[0].reason, FailReason::MissingFact { filter: 2 });
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(j.replay(&rs, &facts).as_deref(), Some("A"));
        assert_eq!(j.replay(&rs, &FactSet::new("img", [0, 2])), None);
        let text = j.render_text();
        assert!(text.contains("ab1(X) :- 2(X). fails at 2(X): no fact 2(img)"), "{text}");
        assert!(j.to_json().unwrap().contains("\"refuted\""));
    }

    #[test]
    fn labelled_justification() {
        let rs = parse_program(PROGRAM, None).unwrap();
        let labelled = rs.with_labels([(0, "wall3_cabinet2".to_string())].into());
        let j = justify(&labelled, &FactSet::new("img", [0])).unwrap().unwrap();
        assert!(j.render_text().contains("'wall3_cabinet2'(X): fact 0(img)"));
    }

    #[test]
    fn facts_text_round_trip() {
        let f = FactSet::new("img", [145, 134]);
        let text = f.render();
        assert_eq!(text, "134(img).\n145(img).\n?-target(img, X).\n");
        assert_eq!(FactSet::parse("img", &text).unwrap(), f);
        assert!(FactSet::parse("img", "12(img)\n").is_err());
    }

    #[test]
    fn rejects_unstratified() {
        let rs = parse_program("target(X,'A') :- not ab1(X).\nab1(X) :- not ab1(X).", None).unwrap();
        assert!(classify(&rs, &FactSet::new("i", [])).is_err());
    }
}
