//! Rule-sets as ordered, stratified logic programs over filter predicates.
//!
//! Class rules form a decision list with heads `target(X,'class')`. Their
//! bodies may negate `abN` predicates, each defined by one or more exception
//! rules. Text form, one rule per line:
//!
//! ```text
//! target(X,'circle') :- 3(X), not ab1(X).
//! ab1(X) :- 5(X).
//! ```

mod fold;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use fold::{fold_sem, fold_sem_with, FoldConfig, FoldOutcome, DEFAULT_RATIO, DEFAULT_TAIL, MAX_EXCEPTION_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pred {
    Filter(usize),
    Ab(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Literal {
    pub pred: Pred,
    pub negated: bool,
}

impl Literal {
    pub fn pos(pred: Pred) -> Self {
        Literal { pred, negated: false }
    }

    pub fn neg(pred: Pred) -> Self {
        Literal { pred, negated: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    Class(String),
    Ab(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub head: Head,
    pub body: Vec<Literal>,
    /// Positives and negatives covered when the rule was accepted.
    pub tp: usize,
    pub fp: usize,
}

impl Rule {
    pub fn new(head: Head, body: Vec<Literal>) -> Self {
        Rule { head, body, tp: 0, fp: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub class_rules: Vec<Rule>,
    pub ab_rules: Vec<Rule>,
    pub ratio: f64,
    pub tail: f64,
    /// Concept names substituted for filter ids when rendering.
    #[serde(default)]
    pub labels: BTreeMap<usize, String>,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            class_rules: Vec::new(),
            ab_rules: Vec::new(),
            ratio: fold::DEFAULT_RATIO,
            tail: fold::DEFAULT_TAIL,
            labels: BTreeMap::new(),
        }
    }
}

impl RuleSet {
    pub fn is_empty(&self) -> bool {
        self.class_rules.is_empty() && self.ab_rules.is_empty()
    }

    /// Rules defining `ab{id}`, in emission order.
    pub fn ab_definitions(&self, id: usize) -> impl Iterator<Item = &Rule> {
        self.ab_rules.iter().filter(move |r| r.head == Head::Ab(id))
    }

    pub fn filters(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .class_rules
            .iter()
            .chain(&self.ab_rules)
            .flat_map(|r| &r.body)
            .filter_map(|l| match l.pred {
                Pred::Filter(f) => Some(f),
                Pred::Ab(_) => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Structural checks: no repeated predicate within a body, every
    /// referenced ab predicate defined, and stratification.
    pub fn validate(&self) -> Result<()> {
        for r in self.class_rules.iter().chain(&self.ab_rules) {
            let mut seen = Vec::with_capacity(r.body.len());
            for l in &r.body {
                if seen.contains(&l.pred) {
                    return Err(Error::InvalidArgument(format!(
                        "predicate {} repeated in body of {}",
                        self.pred_text(l.pred),
                        self.head_text(&r.head)
                    )));
                }
                seen.push(l.pred);
                if let Pred::Ab(id) = l.pred {
                    if self.ab_definitions(id).next().is_none() {
                        return Err(Error::InvalidArgument(format!("ab{id} is referenced but never defined")));
                    }
                }
            }
        }
        validate_stratification(self).map_err(|c| Error::NotStratified(c.to_string()))
    }

    fn pred_text(&self, p: Pred) -> String {
        match p {
            Pred::Filter(f) => match self.labels.get(&f) {
                Some(label) => format!("'{label}'"),
                None => f.to_string(),
            },
            Pred::Ab(id) => format!("ab{id}"),
        }
    }

    fn head_text(&self, h: &Head) -> String {
        match h {
            Head::Class(c) => format!("target(X,'{c}')"),
            Head::Ab(id) => format!("ab{id}(X)"),
        }
    }

    pub fn render_literal(&self, l: &Literal) -> String {
        let neg = if l.negated { "not " } else { "" };
        format!("{neg}{}(X)", self.pred_text(l.pred))
    }

    pub fn render_rule(&self, r: &Rule) -> String {
        let mut s = self.head_text(&r.head);
        if !r.body.is_empty() {
            let body: Vec<String> = r.body.iter().map(|l| self.render_literal(l)).collect();
            s.push_str(" :- ");
            s.push_str(&body.join(", "));
        }
        s.push('.');
        s
    }

    /// Program text: class rules in decision-list order, then ab rules.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in self.class_rules.iter().chain(&self.ab_rules) {
            out.push_str(&self.render_rule(r));
            out.push('\n');
        }
        out
    }

    /// Copy whose filter predicates render as the given concept names.
    pub fn with_labels(&self, labels: BTreeMap<usize, String>) -> RuleSet {
        RuleSet {
            labels,
            ..self.clone()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, labels: Option<&BTreeMap<usize, String>>) -> Result<RuleSet> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_program(&text, labels).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::parse(path.display().to_string(), line, message),
            other => other,
        })
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Predicate count of the program: every head plus every body literal.
pub fn ruleset_size(rs: &RuleSet) -> usize {
    rs.class_rules
        .iter()
        .chain(&rs.ab_rules)
        .map(|r| 1 + r.body.len())
        .sum()
}

/// Parses program text. `labels` maps filter ids to concept names and is
/// needed only when the program uses quoted concept predicates. Blank lines
/// and `%` comments are ignored.
pub fn parse_program(text: &str, labels: Option<&BTreeMap<usize, String>>) -> Result<RuleSet> {
    let by_name: HashMap<&str, usize> = labels
        .into_iter()
        .flatten()
        .map(|(&f, name)| (name.as_str(), f))
        .collect();
    let mut rs = RuleSet {
        labels: labels.cloned().unwrap_or_default(),
        ..RuleSet::default()
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let err = |m: &str| Error::parse("<rules>", i + 1, format!("{m}: {line}"));
        let line = line.strip_suffix('.').ok_or_else(|| err("missing final '.'"))?;
        let (head, body) = match line.split_once(" :- ") {
            Some((h, b)) => (h, Some(b)),
            None => (line, None),
        };
        let head = parse_head(head).ok_or_else(|| err("bad head"))?;
        let mut lits = Vec::new();
        for lit in body.into_iter().flat_map(|b| b.split(", ")) {
            let (negated, atom) = match lit.strip_prefix("not ") {
                Some(a) => (true, a),
                None => (false, lit),
            };
            let name = atom.strip_suffix("(X)").ok_or_else(|| err("literal must end in (X)"))?;
            let pred = parse_pred(name, &by_name).ok_or_else(|| err("unknown predicate"))?;
            lits.push(Literal { pred, negated });
        }
        let rule = Rule::new(head, lits);
        match rule.head {
            Head::Class(_) => rs.class_rules.push(rule),
            Head::Ab(_) => rs.ab_rules.push(rule),
        }
    }
    Ok(rs)
}

fn parse_head(s: &str) -> Option<Head> {
    if let Some(rest) = s.strip_prefix("target(X,'") {
        let name = rest.strip_suffix("')")?;
        return (!name.is_empty() && !name.contains('\'')).then(|| Head::Class(name.to_string()));
    }
    let id = s.strip_prefix("ab")?.strip_suffix("(X)")?;
    id.parse().ok().map(Head::Ab)
}

fn parse_pred(s: &str, by_name: &HashMap<&str, usize>) -> Option<Pred> {
    if let Some(quoted) = s.strip_prefix('\'').and_then(|q| q.strip_suffix('\'')) {
        return by_name.get(quoted).map(|&f| Pred::Filter(f));
    }
    if let Some(id) = s.strip_prefix("ab") {
        return id.parse().ok().map(Pred::Ab);
    }
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) {
        return s.parse().ok().map(Pred::Filter);
    }
    None
}

/// A cycle in the predicate dependency graph that passes through negation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleReport {
    pub cycle: Vec<String>,
}

impl fmt::Display for CycleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.cycle.join(" -> "))
    }
}

/// Rejects programs where some predicate depends negatively on itself.
pub fn validate_stratification(rs: &RuleSet) -> std::result::Result<(), CycleReport> {
    let mut g: DiGraph<String, bool> = DiGraph::new();
    let mut nodes: HashMap<String, NodeIndex> = HashMap::new();
    let mut node = |g: &mut DiGraph<String, bool>, name: String| {
        *nodes.entry(name.clone()).or_insert_with(|| g.add_node(name))
    };
    for r in rs.class_rules.iter().chain(&rs.ab_rules) {
        let head = match &r.head {
            Head::Class(_) => "target".to_string(),
            Head::Ab(id) => format!("ab{id}"),
        };
        let h = node(&mut g, head);
        for l in &r.body {
            let b = node(&mut g, rs.pred_text(l.pred));
            g.add_edge(h, b, l.negated);
        }
    }
    for scc in tarjan_scc(&g) {
        for &a in &scc {
            for e in g.edges(a) {
                use petgraph::visit::EdgeRef;
                if *e.weight() && scc.contains(&e.target()) {
                    let back = path_within(&g, &scc, e.target(), a);
                    let mut cycle: Vec<String> = std::iter::once(a)
                        .chain(back)
                        .map(|n| g[n].clone())
                        .collect();
                    cycle.dedup();
                    return Err(CycleReport { cycle });
                }
            }
        }
    }
    Ok(())
}

/// Nodes on a shortest path `from ..= to` that stays inside `scc`.
fn path_within(g: &DiGraph<String, bool>, scc: &[NodeIndex], from: NodeIndex, to: NodeIndex) -> Vec<NodeIndex> {
    let mut prev: HashMap<NodeIndex, NodeIndex> = HashMap::new();
    let mut queue = std::collections::VecDeque::from([from]);
    let mut seen = vec![from];
    while let Some(n) = queue.pop_front() {
        if n == to {
            break;
        }
        for m in g.neighbors(n) {
            if scc.contains(&m) && !seen.contains(&m) {
                seen.push(m);
                prev.insert(m, n);
                queue.push_back(m);
            }
        }
    }
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        match prev.get(&cur) {
            Some(&p) => {
                path.push(p);
                cur = p;
            }
            None => break,
        }
    }
    path.reverse();
    path
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "target(X,'A') :- 0(X), not ab1(X).\nab1(X) :- 1(X).\n";

    #[test]
    fn size_counts_heads_and_literals() {
        assert_eq!(ruleset_size(&RuleSet::default()), 0);
        let rs = parse_program(SAMPLE, None).unwrap();
        assert_eq!(ruleset_size(&rs), 5);
    }

    #[test]
    fn text_round_trip() {
        let rs = parse_program(SAMPLE, None).unwrap();
        assert_eq!(rs.render(), SAMPLE);
        assert!(rs.validate().is_ok());
        let bodiless = parse_program("target(X,'A').", None).unwrap();
        assert_eq!(bodiless.class_rules[0].body, vec![]);
    }

    #[test]
    fn labelled_round_trip() {
        let rs = parse_program(SAMPLE, None).unwrap();
        let labels = BTreeMap::from([(0, "wall3_cabinet2".to_string())]);
        let text = rs.with_labels(labels.clone()).render();
        assert!(text.starts_with("target(X,'A') :- 'wall3_cabinet2'(X), not ab1(X)."));
        let back = parse_program(&text, Some(&labels)).unwrap();
        assert_eq!(back.class_rules, rs.class_rules);
        assert!(parse_program(&text, None).is_err());
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = parse_program("target(X,'A').\ntarget(X,'B') :- q(X).", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_program("target(X,'A')", None).is_err());
    }

    #[test]
    fn negative_cycle_reported() {
        let rs = parse_program("ab1(X) :- not ab2(X).\nab2(X) :- not ab1(X).", None).unwrap();
        let c = validate_stratification(&rs).unwrap_err();
        assert!(c.cycle.contains(&"ab1".to_string()) && c.cycle.contains(&"ab2".to_string()), "{c}");
        let self_loop = parse_program("ab1(X) :- 3(X), not ab1(X).", None).unwrap();
        assert!(validate_stratification(&self_loop).is_err());
    }

    #[test]
    fn positive_cycle_is_stratified() {
        let rs = parse_program("ab1(X) :- ab2(X).\nab2(X) :- ab1(X).\ntarget(X,'A') :- not ab1(X).", None).unwrap();
        assert!(validate_stratification(&rs).is_ok());
    }

    #[test]
    fn undefined_ab_rejected() {
        let rs = parse_program("target(X,'A') :- not ab4(X).", None).unwrap();
        assert!(rs.validate().is_err());
    }
}
