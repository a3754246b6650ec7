use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, MASK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionLabel {
    Original,
    Masked,
    Replaced,
    Misplaced,
}

impl CorruptionLabel {
    pub const ALL: [CorruptionLabel; 4] = [
        CorruptionLabel::Original,
        CorruptionLabel::Masked,
        CorruptionLabel::Replaced,
        CorruptionLabel::Misplaced,
    ];

    pub fn is_original(self) -> bool {
        self == CorruptionLabel::Original
    }

    pub fn name(self) -> &'static str {
        match self {
            CorruptionLabel::Original => "original",
            CorruptionLabel::Masked => "masked",
            CorruptionLabel::Replaced => "replaced",
            CorruptionLabel::Misplaced => "misplaced",
        }
    }

    fn code(self) -> char {
        match self {
            CorruptionLabel::Original => 'O',
            CorruptionLabel::Masked => 'M',
            CorruptionLabel::Replaced => 'R',
            CorruptionLabel::Misplaced => 'P',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'O' => CorruptionLabel::Original,
            'M' => CorruptionLabel::Masked,
            'R' => CorruptionLabel::Replaced,
            'P' => CorruptionLabel::Misplaced,
            _ => return None,
        })
    }
}

/// A corrupted sequence with per-position labels and the map back to the
/// original. `align[i]` is the original index range that corrupted position
/// `i` stands for; it has length one except for span masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionRecord {
    pub corrupted: TokenSeq,
    pub labels: Vec<CorruptionLabel>,
    pub align: Vec<Range<usize>>,
    pub original: TokenSeq,
}

impl CorruptionRecord {
    pub fn identity(seq: &TokenSeq) -> Self {
        Self {
            corrupted: seq.clone(),
            labels: vec![CorruptionLabel::Original; seq.len()],
            align: (0..seq.len()).map(|i| i..i + 1).collect(),
            original: seq.clone(),
        }
    }

    pub fn positions_with(&self, label: CorruptionLabel) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    /// Label of the corrupted position that covers each original position.
    pub fn original_labels(&self) -> Vec<CorruptionLabel> {
        let mut out = vec![CorruptionLabel::Original; self.original.len()];
        for (i, r) in self.align.iter().enumerate() {
            for j in r.clone() {
                out[j] = self.labels[i];
            }
        }
        out
    }

    /// For each original position, the corrupted position covering it.
    pub fn inverse_align(&self) -> Vec<usize> {
        let mut out = vec![0; self.original.len()];
        for (i, r) in self.align.iter().enumerate() {
            for j in r.clone() {
                out[j] = i;
            }
        }
        out
    }

    /// Word index (within the original) of every original position.
    fn original_word_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.original.len()];
        for (w, r) in self.original.words().enumerate() {
            for j in r {
                out[j] = w;
            }
        }
        out
    }

    /// Checks the record's structural invariants: totality of `align`,
    /// bijectivity for non-span records, MASK under every Masked label, and
    /// `Original ⇔ same token ∧ not displaced`.
    pub fn check_consistency(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        let n = self.corrupted.len();
        if self.labels.len() != n || self.align.len() != n {
            return fail(format!("labels/align cover {}/{} of {n} positions", self.labels.len(), self.align.len()));
        }
        let mut covered = vec![0usize; self.original.len()];
        for r in &self.align {
            if r.is_empty() || r.end > self.original.len() {
                return fail(format!("alignment {r:?} outside original of length {}", self.original.len()));
            }
            for j in r.clone() {
                covered[j] += 1;
            }
        }
        if covered.iter().any(|&c| c != 1) {
            return fail("alignment does not partition the original".into());
        }
        let word_of = self.original_word_of();
        let mut corrupted_word_of = vec![0; n];
        for (w, r) in self.corrupted.words().enumerate() {
            for i in r {
                corrupted_word_of[i] = w;
            }
        }
        for i in 0..n {
            let label = self.labels[i];
            let src = self.align[i].clone();
            if label == CorruptionLabel::Masked && self.corrupted.ids[i] != MASK {
                return fail(format!("position {i} is Masked but holds id {}", self.corrupted.ids[i]));
            }
            let spans = src.len() > 1;
            let same_token = !spans && self.corrupted.ids[i] == self.original.ids[src.start];
            let displaced = !spans && self.word_displaced(i, &word_of, &corrupted_word_of);
            let should_be_original = same_token && !displaced;
            if label.is_original() != should_be_original {
                return fail(format!(
                    "position {i}: label {label:?} but same_token={same_token} displaced={displaced}"
                ));
            }
        }
        Ok(())
    }

    fn word_displaced(&self, i: usize, word_of: &[usize], corrupted_word_of: &[usize]) -> bool {
        // Span collapses shift later word indices; compare against the number of
        // words lost to spans that precede this position in the original.
        let orig_word = word_of[self.align[i].start];
        let lost: usize = self
            .align
            .iter()
            .filter(|r| r.len() > 1 && r.end <= self.align[i].start)
            .map(|r| {
                let first = word_of[r.start];
                let last = word_of[r.end - 1];
                last - first
            })
            .sum();
        corrupted_word_of[i] + lost != orig_word
    }

    /// Tab-separated dump: original ids, corrupted ids, label codes, alignment.
    pub fn to_dump_line(&self) -> String {
        let ids = |s: &TokenSeq| s.ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        let labels: String = self.labels.iter().map(|l| l.code()).collect();
        let align = self
            .align
            .iter()
            .map(|r| if r.len() == 1 { r.start.to_string() } else { format!("{}-{}", r.start, r.end) })
            .collect::<Vec<_>>()
            .join(" ");
        format!("{}\t{}\t{}\t{}", ids(&self.original), ids(&self.corrupted), labels, align)
    }

    /// Parses a dump line; word grouping is not part of the dump, so both
    /// sequences come back with one group per unit.
    pub fn from_dump_line(line: &str, lang: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed dump line `{line}`"));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad());
        }
        let ids = |f: &str| -> Result<Vec<u32>> {
            f.split_whitespace().map(|t| t.parse().map_err(|_| bad())).collect()
        };
        let seq = |ids: Vec<u32>| TokenSeq { word_starts: (0..ids.len()).collect(), ids, lang: lang.to_string() };
        let labels = fields[2]
            .chars()
            .map(|c| CorruptionLabel::from_code(c).ok_or_else(bad))
            .collect::<Result<Vec<_>>>()?;
        let align = fields[3]
            .split_whitespace()
            .map(|t| -> Result<Range<usize>> {
                match t.split_once('-') {
                    Some((a, b)) => Ok(a.parse().map_err(|_| bad())?..b.parse().map_err(|_| bad())?),
                    None => {
                        let s: usize = t.parse().map_err(|_| bad())?;
                        Ok(s..s + 1)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { original: seq(ids(fields[0])?), corrupted: seq(ids(fields[1])?), labels, align })
    }
}
