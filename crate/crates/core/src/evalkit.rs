//! Single-label (SA), two-label (TA) and confident two-label (TCA) accuracy.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

/// Both top-2 probabilities must reach this for a confident two-label hit.
pub const CONFIDENCE: f32 = 0.5;

/// Indices of the two largest entries, larger first; ties go to the lower index.
pub fn top2(probs: &[f32]) -> Result<(usize, usize)> {
    if probs.len() < 2 {
        return Err(Error::Contract(format!("top-2 needs at least 2 classes, got {}", probs.len())));
    }
    let (mut a, mut b) = if probs[1] > probs[0] { (1, 0) } else { (0, 1) };
    for (i, &p) in probs.iter().enumerate().skip(2) {
        if p > probs[a] {
            b = a;
            a = i;
        } else if p > probs[b] {
            b = i;
        }
    }
    Ok((a, b))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(probs: &[f32]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best })
}

pub fn score_single(probs: &[f32], label: usize) -> Result<bool> {
    if label >= probs.len() {
        return Err(Error::Contract(format!("label {label} out of range for {} classes", probs.len())));
    }
    Ok(argmax(probs) == label)
}

/// `(two-label hit, confident two-label hit)` for a pair with distinct labels.
pub fn score_pair(probs: &[f32], truth: (usize, usize)) -> Result<(bool, bool)> {
    let (y1, y2) = truth;
    if y1 == y2 {
        return Err(Error::Contract(format!("pair labels must differ, got {{{y1}, {y2}}}")));
    }
    if y1.max(y2) >= probs.len() {
        return Err(Error::Contract(format!("pair label out of range for {} classes", probs.len())));
    }
    let (a, b) = top2(probs)?;
    let hit = (a == y1 && b == y2) || (a == y2 && b == y1);
    Ok((hit, hit && probs[a] >= CONFIDENCE && probs[b] >= CONFIDENCE))
}

/// Exact hit counts; adding records merges them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsRecord {
    pub sa_correct: usize,
    pub sa_total: usize,
    pub ta_correct: usize,
    pub ta_total: usize,
    pub tca_correct: usize,
}

fn rate(correct: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

impl MetricsRecord {
    pub fn push_single(&mut self, hit: bool) {
        self.sa_total += 1;
        self.sa_correct += usize::from(hit);
    }

    pub fn push_pair(&mut self, (ta, tca): (bool, bool)) {
        debug_assert!(ta || !tca);
        self.ta_total += 1;
        self.ta_correct += usize::from(ta);
        self.tca_correct += usize::from(tca);
    }

    pub fn sa(&self) -> Option<f64> {
        rate(self.sa_correct, self.sa_total)
    }

    pub fn ta(&self) -> Option<f64> {
        rate(self.ta_correct, self.ta_total)
    }

    pub fn tca(&self) -> Option<f64> {
        rate(self.tca_correct, self.ta_total)
    }
}

impl Add for MetricsRecord {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for MetricsRecord {
    fn add_assign(&mut self, rhs: Self) {
        self.sa_correct += rhs.sa_correct;
        self.sa_total += rhs.sa_total;
        self.ta_correct += rhs.ta_correct;
        self.ta_total += rhs.ta_total;
        self.tca_correct += rhs.tca_correct;
    }
}

impl std::iter::Sum for MetricsRecord {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// A rate as a percentage with two decimals, or `-` when undefined.
pub fn percent(rate: Option<f64>) -> String {
    rate.map_or_else(|| "-".to_string(), |r| format!("{:.2}", 100.0 * r))
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SA {}% ({}/{})  TA {}% ({}/{})  TCA {}% ({}/{})",
            percent(self.sa()),
            self.sa_correct,
            self.sa_total,
            percent(self.ta()),
            self.ta_correct,
            self.ta_total,
            percent(self.tca()),
            self.tca_correct,
            self.ta_total
        )
    }
}

/// Header of the metrics CSV.
pub const CSV_HEADER: &str = "step,epoch,sa,ta,tca";

/// One metrics CSV row; rates are fractions, empty when undefined.
pub fn csv_row(step: u64, epoch: usize, m: &MetricsRecord) -> String {
    let cell = |r: Option<f64>| r.map_or_else(String::new, |r| format!("{r:.6}"));
    format!("{step},{epoch},{},{},{}", cell(m.sa()), cell(m.ta()), cell(m.tca()))
}

/// A parsed metrics CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsvRow {
    pub step: u64,
    pub epoch: usize,
    pub sa: Option<f64>,
    pub ta: Option<f64>,
    pub tca: Option<f64>,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Data(format!("metrics CSV must start with '{CSV_HEADER}'")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Data(format!("bad metrics row '{line}'"));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad())
                }
            };
            Ok(CsvRow {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                sa: opt(f[2])?,
                ta: opt(f[3])?,
                tca: opt(f[4])?,
            })
        })
        .collect()
}
