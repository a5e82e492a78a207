//! Text labels file: one `<index>,<class>[,poison]` line per example.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    /// Class of example `i`.
    pub labels: Vec<usize>,
    /// Present when at least one line carries the `poison` marker.
    pub poison: Option<Vec<bool>>,
}

impl LabelTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, usize, bool)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::invalid(format!("labels line {}: {m}", lineno + 1));
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if !(2..=3).contains(&cols.len()) {
                return Err(err(format!("expected 2 or 3 columns, found {}", cols.len())));
            }
            let index = cols[0].parse::<usize>().map_err(|_| err(format!("bad index `{}`", cols[0])))?;
            let class = cols[1].parse::<usize>().map_err(|_| err(format!("bad class `{}`", cols[1])))?;
            let poison = match cols.get(2) {
                None => false,
                Some(&"poison") => true,
                Some(other) => return Err(err(format!("third column must be `poison`, found `{other}`"))),
            };
            entries.push((index, class, poison));
        }
        let n = entries.len();
        let mut labels = vec![usize::MAX; n];
        let mut poison = vec![false; n];
        for &(index, class, p) in &entries {
            if index >= n {
                return Err(Error::invalid(format!("labels: index {index} out of range for {n} lines")));
            }
            if labels[index] != usize::MAX {
                return Err(Error::invalid(format!("labels: index {index} appears twice")));
            }
            labels[index] = class;
            poison[index] = p;
        }
        let any_poison = poison.iter().any(|&p| p);
        Ok(Self { labels, poison: any_poison.then_some(poison) })
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, &c) in self.labels.iter().enumerate() {
            let marker = if self.poison.as_ref().is_some_and(|p| p[i]) { ",poison" } else { "" };
            let _ = writeln!(out, "{i},{c}{marker}");
        }
        out
    }
}
