//! Tab-separated question-pair datasets.
//!
//! A file either starts with a header naming at least the columns
//! `question1`, `question2` and `is_duplicate` (any order, extra columns
//! ignored), or has no header and exactly those three columns in that order.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipelines::QuestionPair;

/// Standard split sizes for the validation and test sets, with half positives.
pub const STRICT_SPLIT_SIZE: usize = 10_000;

/// At most this many offending lines are quoted in an error message.
const MAX_REPORTED_LINES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Labelled question pairs, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pairs: Vec<QuestionPair>,
    split: Split,
    counts: [usize; 2],
}

impl Dataset {
    /// Every pair must carry a label.
    pub fn new(pairs: Vec<QuestionPair>, split: Split) -> Result<Self> {
        let mut counts = [0usize; 2];
        for (i, p) in pairs.iter().enumerate() {
            match p.label {
                Some(l @ (0 | 1)) => counts[l as usize] += 1,
                Some(l) => return Err(Error::data(format!("pair {i}: label {l} is not 0 or 1"))),
                None => return Err(Error::data(format!("pair {i} has no label"))),
            }
        }
        Ok(Self { pairs, split, counts })
    }

    pub fn pairs(&self) -> &[QuestionPair] {
        &self.pairs
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `[negatives, positives]`.
    pub fn class_counts(&self) -> [usize; 2] {
        self.counts
    }

    pub fn labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| p.label.unwrap_or(0)).collect()
    }

    /// First `n` pairs (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let pairs = self.pairs[..n.min(self.len())].to_vec();
        Self::new(pairs, self.split).expect("subset of a valid dataset")
    }
}

struct Columns {
    a: usize,
    b: usize,
    label: usize,
    width: usize,
}

fn detect_header(fields: &[&str]) -> Option<Columns> {
    let find = |name: &str| fields.iter().position(|f| f.trim().eq_ignore_ascii_case(name));
    Some(Columns {
        a: find("question1")?,
        b: find("question2")?,
        label: find("is_duplicate")?,
        width: fields.len(),
    })
}

/// Parses a question-pair TSV file. All malformed rows are reported together,
/// by 1-based line number.
pub fn load_pairs_tsv(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs_tsv(&text, split).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_pairs_tsv(text: &str, split: Split) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)));
    let mut pairs = Vec::new();
    let mut bad: Vec<String> = Vec::new();
    let mut bad_count = 0usize;

    let mut columns = Columns {
        a: 0,
        b: 1,
        label: 2,
        width: 3,
    };
    let mut pending_first = None;
    if let Some((n, first)) = lines.next() {
        let fields: Vec<&str> = first.split('\t').collect();
        match detect_header(&fields) {
            Some(c) => columns = c,
            None => pending_first = Some((n, first)),
        }
    }

    for (n, line) in pending_first.into_iter().chain(lines) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let problem = if fields.len() != columns.width {
            Some(format!("expected {} columns, found {}", columns.width, fields.len()))
        } else {
            match fields[columns.label].trim() {
                "0" | "1" => None,
                other => Some(format!("label {other:?} is not 0 or 1")),
            }
        };
        match problem {
            Some(p) => {
                bad_count += 1;
                if bad.len() < MAX_REPORTED_LINES {
                    bad.push(format!("line {n}: {p}"));
                }
            }
            None => {
                let label = (fields[columns.label].trim() == "1") as u8;
                pairs.push(QuestionPair {
                    question_a: fields[columns.a].to_string(),
                    question_b: fields[columns.b].to_string(),
                    label: Some(label),
                });
            }
        }
    }
    if bad_count > 0 {
        let more = bad_count.saturating_sub(bad.len());
        let tail = if more > 0 {
            format!("; and {more} more")
        } else {
            String::new()
        };
        return Err(Error::data(format!(
            "{bad_count} malformed rows: {}{tail}",
            bad.join("; ")
        )));
    }
    Dataset::new(pairs, split)
}

/// Loads `train.tsv`, `dev.tsv` and `test.tsv` from `dir`. With `strict`, the
/// validation and test sets must each hold 10 000 pairs, half of them positive.
pub fn load_standard_splits(dir: impl AsRef<Path>, strict: bool) -> Result<(Dataset, Dataset, Dataset)> {
    let dir = dir.as_ref();
    let load = |file: &str, split| {
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::data(format!("missing split file {}", path.display())));
        }
        load_pairs_tsv(path, split)
    };
    let train = load("train.tsv", Split::Train)?;
    let dev = load("dev.tsv", Split::Validation)?;
    let test = load("test.tsv", Split::Test)?;
    if strict {
        for (name, d) in [("dev.tsv", &dev), ("test.tsv", &test)] {
            let [neg, pos] = d.class_counts();
            if d.len() != STRICT_SPLIT_SIZE || pos != STRICT_SPLIT_SIZE / 2 {
                return Err(Error::data(format!(
                    "{name}: strict split needs {} pairs with {} positives, found {} with {pos} positives ({neg} negatives)",
                    STRICT_SPLIT_SIZE,
                    STRICT_SPLIT_SIZE / 2,
                    d.len()
                )));
            }
        }
    }
    Ok((train, dev, test))
}
