//! Stage-one match proposals: the neighborhood-consensus correlation
//! matcher, the oracle matcher and file-based external proposals.

mod nc;
mod oracle;

pub use nc::{fit_nc_matcher, nc_match, NcConfig, NcMatcher, NcOutput};
pub use oracle::{oracle_match, OracleConfig};

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Match;
use crate::matchfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalSource {
    Nc,
    Oracle,
    External,
}

/// Where a run takes its proposals from, as written on the command line:
/// `nc`, `oracle` or `external:<path>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProposalSpec {
    Nc,
    Oracle,
    External(PathBuf),
}

impl ProposalSpec {
    pub fn source(&self) -> ProposalSource {
        match self {
            ProposalSpec::Nc => ProposalSource::Nc,
            ProposalSpec::Oracle => ProposalSource::Oracle,
            ProposalSpec::External(_) => ProposalSource::External,
        }
    }
}

impl FromStr for ProposalSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nc" => Ok(ProposalSpec::Nc),
            "oracle" => Ok(ProposalSpec::Oracle),
            _ => match s.strip_prefix("external:") {
                Some(p) if !p.is_empty() => Ok(ProposalSpec::External(PathBuf::from(p))),
                _ => Err(Error::Config(format!(
                    "unknown proposal source '{s}' (expected nc, oracle or external:<path>)"
                ))),
            },
        }
    }
}

/// A patch-level candidate match with an optional score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchProposal {
    pub m: Match,
    pub score: Option<f64>,
}

impl MatchProposal {
    pub fn new(m: Match, score: Option<f64>) -> Self {
        Self { m, score }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<MatchProposal>,
    pub source: ProposalSource,
    /// Downscale factor of the grid the proposals were produced on.
    pub downscale: usize,
    /// For expanded sets, the index of each proposal's parent in the set it
    /// was expanded from.
    pub parents: Option<Vec<usize>>,
}

impl ProposalSet {
    pub fn new(proposals: Vec<MatchProposal>, source: ProposalSource, downscale: usize) -> Self {
        Self {
            proposals,
            source,
            downscale,
            parents: None,
        }
    }

    pub fn from_matches(matches: &[Match], source: ProposalSource) -> Self {
        Self::new(
            matches.iter().map(|&m| MatchProposal::new(m, None)).collect(),
            source,
            1,
        )
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn matches(&self) -> Vec<Match> {
        self.proposals.iter().map(|p| p.m).collect()
    }

    /// Keeps proposals at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            proposals: indices.iter().map(|&i| self.proposals[i]).collect(),
            source: self.source,
            downscale: self.downscale,
            parents: self
                .parents
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }
}

/// Reads proposals from a match file (`x_a y_a x_b y_b [score ...]`). For
/// refined-match files the fine confidence becomes the score.
pub fn load_external_proposals(path: impl AsRef<Path>) -> Result<ProposalSet> {
    let rows = matchfile::read_match_file(path)?;
    Ok(ProposalSet::new(
        rows.into_iter()
            .map(|r| MatchProposal::new(r.m, r.extra.first().copied()))
            .collect(),
        ProposalSource::External,
        1,
    ))
}

pub fn write_proposals(path: impl AsRef<Path>, set: &ProposalSet) -> Result<()> {
    let rows: Vec<matchfile::MatchRow> = set
        .proposals
        .iter()
        .map(|p| matchfile::MatchRow {
            m: p.m,
            extra: p.score.into_iter().collect(),
        })
        .collect();
    matchfile::write_match_file(path, "x_a y_a x_b y_b score", &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn proposal_specs_parse() {
        assert_eq!("nc".parse::<ProposalSpec>().unwrap(), ProposalSpec::Nc);
        assert_eq!(
            "external:a/b.txt".parse::<ProposalSpec>().unwrap(),
            ProposalSpec::External("a/b.txt".into())
        );
        assert!("external:".parse::<ProposalSpec>().is_err());
        assert!("sift".parse::<ProposalSpec>().is_err());
    }

    #[test]
    fn three_line_file() {
        let f = write("# comment\n1 2 3 4 0.5\n5 6 7 8\n\n9.5 10 11 12 1\n");
        let set = load_external_proposals(f.path()).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.source, ProposalSource::External);
        assert_eq!(set.proposals[0].score, Some(0.5));
        assert_eq!(set.proposals[1].score, None);
        assert_eq!(set.proposals[2].m, Match::new(9.5, 10.0, 11.0, 12.0));
    }

    #[test]
    fn empty_file_gives_empty_set() {
        let f = write("");
        assert!(load_external_proposals(f.path()).unwrap().is_empty());
    }

    #[test]
    fn nan_coordinate_names_the_line() {
        let f = write("1 2 3 4\n1 NaN 3 4\n");
        match load_external_proposals(f.path()) {
            Err(crate::Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trip_through_writer() {
        let set = ProposalSet::new(
            vec![
                MatchProposal::new(Match::new(0.25, 1.0, 2.0, 3.0), Some(0.75)),
                MatchProposal::new(Match::new(4.0, 5.0, 6.0, 7.125), None),
            ],
            ProposalSource::Oracle,
            1,
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.txt");
        write_proposals(&p, &set).unwrap();
        let back = load_external_proposals(&p).unwrap();
        assert_eq!(back.proposals, set.proposals);
    }
}
