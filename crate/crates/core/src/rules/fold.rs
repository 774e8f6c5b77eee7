//! FOLD-SE-M style sequential covering over a binarization table.
//!
//! Each step takes the most frequent class among the rows not yet covered,
//! learns one default rule for it against every row of the other classes,
//! and removes whatever the rule covers. Literals are added greedily by
//! information gain until the false positives fall within `ratio` of the
//! true positives; the remaining false positives become exceptions, learned
//! by the same procedure with positives and negatives swapped.

use log::debug;

use super::{Head, Literal, Pred, Rule, RuleSet};
use crate::binarization::{BinarizationTable, TableRow};
use crate::{Error, Result};

pub const DEFAULT_RATIO: f64 = 0.8;
pub const DEFAULT_TAIL: f64 = 5e-3;
pub const MAX_EXCEPTION_DEPTH: usize = 3;

const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldConfig {
    pub ratio: f64,
    /// Minimum rule coverage as a fraction of all training rows.
    pub tail: f64,
    pub max_depth: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig {
            ratio: DEFAULT_RATIO,
            tail: DEFAULT_TAIL,
            max_depth: MAX_EXCEPTION_DEPTH,
        }
    }
}

impl FoldConfig {
    pub fn new(ratio: f64, tail: f64) -> Self {
        FoldConfig {
            ratio,
            tail,
            ..FoldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::InvalidArgument(format!("ratio must lie in [0, 1], got {}", self.ratio)));
        }
        if !(self.tail >= 0.0 && self.tail.is_finite()) {
            return Err(Error::InvalidArgument(format!("tail must be >= 0, got {}", self.tail)));
        }
        Ok(())
    }
}

struct Learned {
    body: Vec<Literal>,
    exceptions: Vec<Learned>,
    tp: usize,
    fp: usize,
}

struct Learner<'a> {
    rows: &'a [TableRow],
    num_features: usize,
    cfg: FoldConfig,
    min_cover: usize,
}

fn entropy(a: usize, b: usize) -> f64 {
    let n = (a + b) as f64;
    [a, b]
        .iter()
        .filter(|&&x| x > 0)
        .map(|&x| {
            let p = x as f64 / n;
            -p * p.log2()
        })
        .sum()
}

impl Learner<'_> {
    fn holds(&self, i: usize, lit: &Literal) -> bool {
        match lit.pred {
            Pred::Filter(f) => (self.rows[i].features[f] == 1) != lit.negated,
            Pred::Ab(_) => unreachable!("learned bodies hold filter literals only"),
        }
    }

    fn covers(&self, r: &Learned, i: usize) -> bool {
        r.body.iter().all(|l| self.holds(i, l)) && !r.exceptions.iter().any(|e| self.covers(e, i))
    }

    fn count(&self, r: &Learned, idx: &[usize]) -> usize {
        idx.iter().filter(|&&i| self.covers(r, i)).count()
    }

    fn within_ratio(&self, fp: usize, tp: usize) -> bool {
        fp as f64 <= self.cfg.ratio * tp as f64
    }

    /// Highest information-gain literal over unused filters. Equal gains keep
    /// the earlier candidate: positive literals first, then lower filter ids.
    fn best_literal(&self, pos: &[usize], neg: &[usize], used: &[usize]) -> Option<Literal> {
        let total = pos.len() + neg.len();
        let parent = entropy(pos.len(), neg.len());
        let mut best: Option<(f64, Literal)> = None;
        for negated in [false, true] {
            for f in (0..self.num_features).filter(|f| !used.contains(f)) {
                let lit = Literal {
                    pred: Pred::Filter(f),
                    negated,
                };
                let tp = pos.iter().filter(|&&i| self.holds(i, &lit)).count();
                let fp = neg.iter().filter(|&&i| self.holds(i, &lit)).count();
                let (fn_, tn) = (pos.len() - tp, neg.len() - fp);
                if tp == 0 || tp + tn < fp + fn_ {
                    continue;
                }
                let covered = (tp + fp) as f64 / total as f64;
                let gain = parent - covered * entropy(tp, fp) - (1.0 - covered) * entropy(fn_, tn);
                if gain > GAIN_EPS && best.is_none_or(|(g, _)| gain > g + GAIN_EPS) {
                    best = Some((gain, lit));
                }
            }
        }
        best.map(|(_, l)| l)
    }

    fn learn_rule(&self, pos: &[usize], neg: &[usize], depth: usize, excluded: &[usize]) -> Option<Learned> {
        let mut body: Vec<Literal> = Vec::new();
        let (mut p, mut n) = (pos.to_vec(), neg.to_vec());
        let mut used = excluded.to_vec();
        while !self.within_ratio(n.len(), p.len()) {
            let Some(lit) = self.best_literal(&p, &n, &used) else {
                break;
            };
            p.retain(|&i| self.holds(i, &lit));
            n.retain(|&i| self.holds(i, &lit));
            if let Pred::Filter(f) = lit.pred {
                used.push(f);
            }
            body.push(lit);
        }
        if p.is_empty() {
            return None;
        }
        let exceptions = if !n.is_empty() && depth < self.cfg.max_depth {
            self.cover(&n, &p, depth + 1, &used)
        } else {
            Vec::new()
        };
        let mut rule = Learned {
            body,
            exceptions,
            tp: 0,
            fp: 0,
        };
        let (mut tp, mut fp) = (self.count(&rule, pos), self.count(&rule, neg));
        if (tp == 0 || !self.within_ratio(fp, tp)) && !rule.exceptions.is_empty() {
            rule.exceptions.clear();
            (tp, fp) = (self.count(&rule, pos), self.count(&rule, neg));
        }
        if tp == 0 || !self.within_ratio(fp, tp) {
            return None;
        }
        rule.tp = tp;
        rule.fp = fp;
        Some(rule)
    }

    /// Sequential covering of `pos` against `neg`, used for exception groups.
    fn cover(&self, pos: &[usize], neg: &[usize], depth: usize, excluded: &[usize]) -> Vec<Learned> {
        let mut rules = Vec::new();
        let mut remaining = pos.to_vec();
        while !remaining.is_empty() {
            let Some(r) = self.learn_rule(&remaining, neg, depth, excluded) else {
                break;
            };
            if r.tp < self.min_cover {
                break;
            }
            remaining.retain(|&i| !self.covers(&r, i));
            rules.push(r);
        }
        rules
    }
}

/// Result of learning, including the training rows no class rule covers.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub rules: RuleSet,
    pub uncovered: Vec<String>,
}

fn emit(l: Learned, head: Head, next_ab: &mut usize, ab_rules: &mut Vec<Rule>) -> Rule {
    let mut body = l.body;
    if !l.exceptions.is_empty() {
        *next_ab += 1;
        let id = *next_ab;
        body.push(Literal::neg(Pred::Ab(id)));
        for e in l.exceptions {
            let r = emit(e, Head::Ab(id), next_ab, ab_rules);
            ab_rules.push(r);
        }
    }
    Rule {
        head,
        body,
        tp: l.tp,
        fp: l.fp,
    }
}

pub fn fold_sem(table: &BinarizationTable, ratio: f64, tail: f64) -> Result<RuleSet> {
    fold_sem_with(table, &FoldConfig::new(ratio, tail)).map(|o| o.rules)
}

pub fn fold_sem_with(table: &BinarizationTable, cfg: &FoldConfig) -> Result<FoldOutcome> {
    cfg.validate()?;
    table.validate()?;
    if table.is_empty() {
        return Err(Error::InvalidArgument("cannot learn rules from an empty table".into()));
    }
    let n = table.len();
    let learner = Learner {
        rows: &table.rows,
        num_features: table.num_features,
        cfg: *cfg,
        min_cover: (cfg.tail * n as f64).ceil() as usize,
    };
    let classes = table.class_names.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut exhausted = vec![false; classes];
    let mut learned: Vec<(usize, Learned)> = Vec::new();
    loop {
        let mut counts = vec![0usize; classes];
        for &i in &remaining {
            counts[table.rows[i].label] += 1;
        }
        let next = (0..classes)
            .filter(|&c| !exhausted[c] && counts[c] > 0)
            .max_by(|&a, &b| {
                counts[a]
                    .cmp(&counts[b])
                    .then_with(|| table.class_names[b].cmp(&table.class_names[a]))
            });
        let Some(c) = next else {
            break;
        };
        let pos: Vec<usize> = remaining.iter().copied().filter(|&i| table.rows[i].label == c).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| table.rows[i].label != c).collect();
        match learner.learn_rule(&pos, &neg, 0, &[]) {
            Some(mut r) if r.tp >= learner.min_cover => {
                let covered: Vec<usize> = remaining.iter().copied().filter(|&i| learner.covers(&r, i)).collect();
                r.tp = covered.iter().filter(|&&i| table.rows[i].label == c).count();
                r.fp = covered.len() - r.tp;
                remaining.retain(|i| !covered.contains(i));
                debug!("rule for {} covers {} rows ({} fp)", table.class_names[c], covered.len(), r.fp);
                learned.push((c, r));
            }
            _ => exhausted[c] = true,
        }
    }
    let mut next_ab = 0;
    let mut ab_rules = Vec::new();
    let class_rules = learned
        .into_iter()
        .map(|(c, r)| emit(r, Head::Class(table.class_names[c].clone()), &mut next_ab, &mut ab_rules))
        .collect();
    ab_rules.sort_by_key(|r| match r.head {
        Head::Ab(id) => id,
        Head::Class(_) => 0,
    });
    let rules = RuleSet {
        class_rules,
        ab_rules,
        ratio: cfg.ratio,
        tail: cfg.tail,
        ..RuleSet::default()
    };
    let uncovered = remaining.iter().map(|&i| table.rows[i].id.clone()).collect();
    Ok(FoldOutcome { rules, uncovered })
}
