use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialKey {
    Target,
    Nontarget,
    Unknown,
}

impl fmt::Display for TrialKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialKey::Target => "target",
            TrialKey::Nontarget => "nontarget",
            TrialKey::Unknown => "unknown",
        })
    }
}

impl FromStr for TrialKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" | "tgt" => Ok(TrialKey::Target),
            "nontarget" | "nontgt" | "imp" => Ok(TrialKey::Nontarget),
            "unknown" | "-" => Ok(TrialKey::Unknown),
            other => Err(Error::InvalidArgument(format!("unknown trial key {other:?}"))),
        }
    }
}

/// An unscored trial: an enrollment/test pair with optional key and side information.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub enroll_id: String,
    pub test_id: String,
    pub key: TrialKey,
    pub partition: Option<String>,
    pub qm: Option<Vec<f64>>,
}

impl Trial {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, key: TrialKey) -> Self {
        Self {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            key,
            partition: None,
            qm: None,
        }
    }

    pub fn with_partition(mut self, partition: impl Into<String>) -> Self {
        self.partition = Some(partition.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
    pub key: TrialKey,
    pub partition: Option<String>,
    pub qm: Option<Vec<f64>>,
}

impl TrialRecord {
    pub fn from_trial(trial: &Trial, score: f64) -> Self {
        Self {
            enroll_id: trial.enroll_id.clone(),
            test_id: trial.test_id.clone(),
            score,
            key: trial.key,
            partition: trial.partition.clone(),
            qm: trial.qm.clone(),
        }
    }
}

/// Scored trials in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialScores {
    pub records: Vec<TrialRecord>,
}

impl TrialScores {
    pub fn new(records: Vec<TrialRecord>) -> Result<Self> {
        if let Some((i, r)) = records.iter().enumerate().find(|(_, r)| !r.score.is_finite()) {
            return Err(Error::format(
                "score list",
                i + 1,
                format!("non-finite score for {} {}", r.enroll_id, r.test_id),
            ));
        }
        Ok(Self { records })
    }

    /// Builds keyed scores directly from target and nontarget score lists.
    pub fn from_split(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let rec = |i: usize, s: f64, key| TrialRecord {
            enroll_id: format!("e{i}"),
            test_id: format!("t{i}"),
            score: s,
            key,
            partition: None,
            qm: None,
        };
        let mut records: Vec<_> = targets.iter().enumerate().map(|(i, &s)| rec(i, s, TrialKey::Target)).collect();
        let off = records.len();
        records.extend(nontargets.iter().enumerate().map(|(i, &s)| rec(off + i, s, TrialKey::Nontarget)));
        Self::new(records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    /// Target and nontarget scores; unknown-key trials are skipped.
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut tar = Vec::new();
        let mut non = Vec::new();
        for r in &self.records {
            match r.key {
                TrialKey::Target => tar.push(r.score),
                TrialKey::Nontarget => non.push(r.score),
                TrialKey::Unknown => {}
            }
        }
        (tar, non)
    }

    /// Records grouped by partition (absent partition under `None`), in first-appearance order.
    pub fn by_partition(&self) -> Vec<(Option<String>, TrialScores)> {
        let mut groups: Vec<(Option<String>, TrialScores)> = Vec::new();
        let mut pos: HashMap<Option<String>, usize> = HashMap::new();
        for r in &self.records {
            let g = *pos.entry(r.partition.clone()).or_insert_with(|| {
                groups.push((r.partition.clone(), TrialScores::default()));
                groups.len() - 1
            });
            groups[g].1.records.push(r.clone());
        }
        groups
    }

    /// Returns a copy with every score replaced through `f`.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> TrialScores {
        TrialScores {
            records: self
                .records
                .iter()
                .map(|r| TrialRecord { score: f(r.score), ..r.clone() })
                .collect(),
        }
    }

    /// Attaches keys, partitions and QM from `trials`, matched by (enroll, test) id pair.
    pub fn attach_keys(&self, trials: &[Trial]) -> Result<TrialScores> {
        let lookup: HashMap<(&str, &str), &Trial> = trials
            .iter()
            .map(|t| ((t.enroll_id.as_str(), t.test_id.as_str()), t))
            .collect();
        let records = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let t = lookup.get(&(r.enroll_id.as_str(), r.test_id.as_str())).ok_or_else(|| {
                    Error::UnknownId {
                        line: i + 1,
                        id: format!("{} {}", r.enroll_id, r.test_id),
                    }
                })?;
                Ok(TrialRecord {
                    key: t.key,
                    partition: t.partition.clone(),
                    qm: t.qm.clone().or_else(|| r.qm.clone()),
                    ..r.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TrialScores::new(records)
    }
}

/// Reads a trial/key list: `enroll<TAB>test[<TAB>key[<TAB>partition]]`.
pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text)
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 4 {
            return Err(Error::format("key file", i + 1, format!("expected 2-4 tab-separated columns, got {}", cols.len())));
        }
        let key = match cols.get(2) {
            Some(k) => k.parse().map_err(|e: Error| Error::format("key file", i + 1, e.to_string()))?,
            None => TrialKey::Unknown,
        };
        let mut t = Trial::new(cols[0], cols[1], key);
        t.partition = cols.get(3).filter(|p| !p.is_empty()).map(|p| p.to_string());
        out.push(t);
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        out.push_str(&format!("{}\t{}\t{}", t.enroll_id, t.test_id, t.key));
        if let Some(p) = &t.partition {
            out.push('\t');
            out.push_str(p);
        }
        out.push('\n');
    }
    out
}

pub fn write_trials(trials: &[Trial], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_trials(trials)).map_err(|e| Error::io(path, e))
}

/// Reads a score file `enroll<TAB>test<TAB>score`; keys are left unknown.
pub fn read_scores(path: impl AsRef<Path>) -> Result<TrialScores> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

pub fn parse_scores(text: &str) -> Result<TrialScores> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format("score file", i + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let score: f64 = cols[2]
            .parse()
            .map_err(|_| Error::format("score file", i + 1, format!("bad score {:?}", cols[2])))?;
        records.push(TrialRecord {
            enroll_id: cols[0].to_string(),
            test_id: cols[1].to_string(),
            score,
            key: TrialKey::Unknown,
            partition: None,
            qm: None,
        });
    }
    TrialScores::new(records)
}

/// Shortest round-trip decimal representation per score.
pub fn format_scores(scores: &TrialScores) -> String {
    let mut out = String::with_capacity(scores.len() * 32);
    for r in &scores.records {
        out.push_str(&format!("{}\t{}\t{}\n", r.enroll_id, r.test_id, r.score));
    }
    out
}

pub fn write_scores(scores: &TrialScores, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_scores(scores)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_file_parses_optional_columns() {
        let t = parse_trials("a\tb\ttarget\tcts\nc\td\tnontarget\ne\tf\n").unwrap();
        assert_eq!(t[0].partition.as_deref(), Some("cts"));
        assert_eq!(t[1].key, TrialKey::Nontarget);
        assert_eq!(t[2].key, TrialKey::Unknown);
        assert_eq!(parse_trials(&format_trials(&t)).unwrap(), t);
    }

    #[test]
    fn bad_key_reports_line() {
        match parse_trials("a\tb\ttarget\nc\td\tmaybe\n") {
            Err(Error::Format { record: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scores_roundtrip_exactly() {
        let s = TrialScores::from_split(&[0.1 + 0.2, -1e-300], &[std::f64::consts::PI]).unwrap();
        let back = parse_scores(&format_scores(&s)).unwrap();
        for (a, b) in s.records.iter().zip(&back.records) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn attach_keys_unknown_pair() {
        let s = parse_scores("a\tb\t1.0\n").unwrap();
        assert!(matches!(s.attach_keys(&[]), Err(Error::UnknownId { line: 1, .. })));
    }
}
