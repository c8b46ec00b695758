//! Multi-label metrics: micro/macro precision, recall and F1, Hamming loss,
//! and micro-F1 restricted to label frequency groups.
//!
//! Conventions: a precision or recall whose denominator is zero counts as 0,
//! F1 is `2PR / (P + R)` and 0 when `P + R = 0`. Macro averages run over all
//! classes, including classes absent from the gold labels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelVec;
use crate::error::{DennError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
    pub num_samples: usize,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Counts restricted to the classes in `classes`.
    pub fn restrict(&self, classes: &[usize]) -> ConfusionCounts {
        ConfusionCounts {
            tp: classes.iter().map(|&c| self.tp[c]).collect(),
            fp: classes.iter().map(|&c| self.fp[c]).collect(),
            fn_: classes.iter().map(|&c| self.fn_[c]).collect(),
            num_samples: self.num_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn prf(tp: u64, fp: u64, fn_: u64) -> Prf {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

pub fn confusion(gold: &[LabelVec], pred: &[LabelVec]) -> Result<ConfusionCounts> {
    if gold.len() != pred.len() {
        return Err(DennError::dims(format!(
            "{} gold rows vs {} predicted rows",
            gold.len(),
            pred.len()
        )));
    }
    let c = gold.first().map_or(0, |g| g.len());
    let mut counts = ConfusionCounts {
        tp: vec![0; c],
        fp: vec![0; c],
        fn_: vec![0; c],
        num_samples: gold.len(),
    };
    for (row, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != c || p.len() != c {
            return Err(DennError::dims(format!("row {row}: label width differs from {c}")));
        }
        for (k, (&gb, &pb)) in g.bits().iter().zip(p.bits()).enumerate() {
            match (gb, pb) {
                (true, true) => counts.tp[k] += 1,
                (false, true) => counts.fp[k] += 1,
                (true, false) => counts.fn_[k] += 1,
                (false, false) => {}
            }
        }
    }
    Ok(counts)
}

pub fn micro_prf(counts: &ConfusionCounts) -> Prf {
    let tp = counts.tp.iter().sum();
    let fp = counts.fp.iter().sum();
    let fn_ = counts.fn_.iter().sum();
    prf(tp, fp, fn_)
}

pub fn macro_prf(counts: &ConfusionCounts) -> Prf {
    let c = counts.num_classes();
    if c == 0 {
        return prf(0, 0, 0);
    }
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let s = prf(counts.tp[k], counts.fp[k], counts.fn_[k]);
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    let n = c as f64;
    Prf {
        precision: p / n,
        recall: r / n,
        f1: f / n,
    }
}

/// Fraction of wrong (sample, label) decisions.
pub fn hamming_loss(counts: &ConfusionCounts) -> f64 {
    let cells = counts.num_samples * counts.num_classes();
    if cells == 0 {
        return 0.0;
    }
    let wrong: u64 = counts.fp.iter().chain(&counts.fn_).sum();
    wrong as f64 / cells as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub group: usize,
    pub num_labels: usize,
    pub micro_f1: f64,
    /// Set when the group has neither gold positives nor predictions; its F1
    /// is then reported as 0.
    pub empty: bool,
}

/// Micro-F1 per group; `groups[label]` is the label's group.
pub fn group_report(counts: &ConfusionCounts, groups: &[usize]) -> Result<Vec<GroupScore>> {
    if groups.len() != counts.num_classes() {
        return Err(DennError::dims(format!(
            "group map covers {} labels, counts cover {}",
            groups.len(),
            counts.num_classes()
        )));
    }
    let num_groups = groups.iter().max().map_or(0, |g| g + 1);
    Ok((0..num_groups)
        .map(|g| {
            let members: Vec<usize> = (0..groups.len()).filter(|&c| groups[c] == g).collect();
            let sub = counts.restrict(&members);
            let activity: u64 = sub.tp.iter().chain(&sub.fp).chain(&sub.fn_).sum();
            GroupScore {
                group: g,
                num_labels: members.len(),
                micro_f1: micro_prf(&sub).f1,
                empty: activity == 0,
            }
        })
        .collect())
}

/// Everything reported by `denn eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_samples: usize,
    pub num_classes: usize,
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
    /// Mean of micro-F1 and macro-F1.
    pub avg_f1: f64,
    pub hamming_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub groups: Option<Vec<GroupScore>>,
}

impl MetricsReport {
    pub fn new(counts: &ConfusionCounts, groups: Option<&[usize]>) -> Result<Self> {
        let micro = micro_prf(counts);
        let macro_ = macro_prf(counts);
        Ok(MetricsReport {
            num_samples: counts.num_samples,
            num_classes: counts.num_classes(),
            micro,
            macro_,
            avg_f1: (micro.f1 + macro_.f1) / 2.0,
            hamming_loss: hamming_loss(counts),
            groups: groups.map(|g| group_report(counts, g)).transpose()?,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |x: f64| 100.0 * x;
        let _ = writeln!(s, "samples: {}  classes: {}", self.num_samples, self.num_classes);
        let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}", "", "P", "R", "F1");
        for (name, m) in [("micro", self.micro), ("macro", self.macro_)] {
            let _ = writeln!(
                s,
                "{:<8}{:>10.2}{:>10.2}{:>10.2}",
                name,
                pct(m.precision),
                pct(m.recall),
                pct(m.f1)
            );
        }
        let _ = writeln!(s, "avg F1: {:.2}  hamming loss: {:.4}", pct(self.avg_f1), self.hamming_loss);
        if let Some(groups) = &self.groups {
            let _ = writeln!(s, "{:<8}{:>8}{:>12}", "group", "labels", "micro F1");
            for g in groups {
                let flag = if g.empty { "  (no gold, no predictions)" } else { "" };
                let _ = writeln!(
                    s,
                    "{:<8}{:>8}{:>12.2}{flag}",
                    g.group + 1,
                    g.num_labels,
                    pct(g.micro_f1)
                );
            }
        }
        s
    }
}
