//! Accuracy metrics and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::CandidateMatrix;
use crate::error::{Error, Result};

/// Train-count cutoffs: many > 100, 20 ≤ medium ≤ 100, few < 20.
pub const MANY_THRESHOLD: usize = 100;
pub const FEW_THRESHOLD: usize = 20;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::shape("accuracy of an empty prediction set"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy of each class over its evaluation rows; `None` for classes absent
/// from `labels`.
pub fn per_class_accuracy(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Option<f64>>> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; k];
    let mut total = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= k {
            return Err(Error::shape(format!("label {y} out of range for K={k}")));
        }
        total[y] += 1;
        hits[y] += usize::from(p == y);
    }
    Ok(hits
        .iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shot {
    Many,
    Medium,
    Few,
}

pub fn shot_of(train_count: usize, thresholds: (usize, usize)) -> Shot {
    if train_count > thresholds.0 {
        Shot::Many
    } else if train_count >= thresholds.1 {
        Shot::Medium
    } else {
        Shot::Few
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShotAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Per-bucket mean of per-class accuracy. Classes without evaluation rows and
/// empty buckets are skipped.
pub fn shot_accuracy(
    preds: &[usize],
    labels: &[usize],
    train_counts: &[usize],
    thresholds: (usize, usize),
) -> Result<ShotAccuracy> {
    let per_class = per_class_accuracy(preds, labels, train_counts.len())?;
    let mut sums = [(0.0, 0usize); 3];
    for (acc, &count) in per_class.iter().zip(train_counts) {
        if let Some(a) = acc {
            let slot = &mut sums[shot_of(count, thresholds) as usize];
            slot.0 += a;
            slot.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(ShotAccuracy {
        many: mean(sums[0]),
        medium: mean(sums[1]),
        few: mean(sums[2]),
    })
}

/// Covering rate (prediction inside S_i) and, given oracle labels, oracle accuracy.
pub fn covering_oracle(
    preds: &[usize],
    candidates: &CandidateMatrix,
    labels: Option<&[usize]>,
) -> Result<(f64, Option<f64>)> {
    if preds.len() != candidates.n() {
        return Err(Error::shape(format!(
            "{} predictions for {} candidate rows",
            preds.len(),
            candidates.n()
        )));
    }
    if preds.is_empty() {
        return Err(Error::shape("covering rate of an empty prediction set"));
    }
    let covered = preds
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p < candidates.k() && candidates.contains(i, p))
        .count();
    let oa = labels.map(|y| accuracy(preds, y)).transpose()?;
    Ok((covered as f64 / preds.len() as f64, oa))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricBlock {
    pub overall_acc: f64,
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
    pub covering_rate: Option<f64>,
    pub oracle_acc: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

impl MetricBlock {
    /// Metrics on an evaluation split; shot buckets need training class counts,
    /// CR/OA need candidate sets for the split.
    pub fn compute(
        preds: &[usize],
        labels: &[usize],
        k: usize,
        train_counts: Option<&[usize]>,
        candidates: Option<&CandidateMatrix>,
    ) -> Result<Self> {
        let overall_acc = accuracy(preds, labels)?;
        let per_class = per_class_accuracy(preds, labels, k)?;
        let shots = match train_counts {
            Some(c) if c.len() == k && c.iter().any(|&n| n > 0) => {
                shot_accuracy(preds, labels, c, (MANY_THRESHOLD, FEW_THRESHOLD))?
            }
            Some(c) if c.len() != k => {
                return Err(Error::shape(format!("{} class counts for K={k}", c.len())))
            }
            _ => ShotAccuracy::default(),
        };
        let (covering_rate, oracle_acc) = match candidates {
            Some(c) => {
                let (cr, oa) = covering_oracle(preds, c, Some(labels))?;
                (Some(cr), oa)
            }
            None => (None, None),
        };
        Ok(Self {
            overall_acc,
            many_acc: shots.many,
            medium_acc: shots.medium,
            few_acc: shots.few,
            covering_rate,
            oracle_acc,
            per_class,
        })
    }

    /// Flat `key=value` lines; absent values are omitted.
    pub fn to_report(&self) -> String {
        let mut out = String::new();
        let mut put = |key: &str, v: Option<f64>| {
            if let Some(v) = v {
                writeln!(out, "{key}={v:.6}").unwrap();
            }
        };
        put("overall_acc", Some(self.overall_acc));
        put("many_acc", self.many_acc);
        put("medium_acc", self.medium_acc);
        put("few_acc", self.few_acc);
        put("covering_rate", self.covering_rate);
        put("oracle_acc", self.oracle_acc);
        out
    }

    /// `class,accuracy` CSV; classes without evaluation rows get an empty cell.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,accuracy\n");
        for (j, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => writeln!(out, "{j},{a:.6}").unwrap(),
                None => writeln!(out, "{j},").unwrap(),
            }
        }
        out
    }

    pub fn write(&self, report: impl AsRef<Path>, csv: Option<&Path>) -> Result<()> {
        let report = report.as_ref();
        fs::write(report, self.to_report()).map_err(|source| Error::Io {
            path: report.to_path_buf(),
            source,
        })?;
        if let Some(csv) = csv {
            fs::write(csv, self.per_class_csv()).map_err(|source| Error::Io {
                path: csv.to_path_buf(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Parses a `key=value` report back into pairs, skipping blank lines.
pub fn parse_report(text: &str) -> Result<Vec<(String, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::config(format!("report line without '=': {l:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("report value for {k:?} is not a number")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}
