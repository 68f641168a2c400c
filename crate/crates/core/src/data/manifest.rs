use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{filter_labels, Emotion, LabelDecision, RejectReason};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MocapPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<PathBuf>,
}

impl MocapPaths {
    pub fn complete(&self) -> bool {
        self.face.is_some() && self.hand.is_some() && self.rotation.is_some()
    }
}

/// One manifest record. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub session: u8,
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Emotion>,
    #[serde(default)]
    pub votes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav: Option<PathBuf>,
    #[serde(default)]
    pub transcript: String,
    #[serde(default)]
    pub mocap: MocapPaths,
    #[serde(default)]
    pub start: f64,
    #[serde(default)]
    pub finish: f64,
}

impl Utterance {
    pub fn has_mocap(&self) -> bool {
        self.mocap.complete()
    }

    /// The label after applying the vote rule to `votes` (or the stored
    /// label when there are no votes).
    fn decide(&self) -> std::result::Result<LabelDecision, String> {
        if self.votes.is_empty() {
            return Ok(match self.label {
                Some(e) => LabelDecision::Accept(e),
                None => LabelDecision::Reject(RejectReason::NoVotes),
            });
        }
        let d = filter_labels(&self.votes);
        match (self.label, d.label()) {
            (Some(stored), Some(voted)) if stored != voted => Err(format!(
                "stored label {stored} disagrees with votes ({voted})"
            )),
            (Some(stored), None) => Err(format!("stored label {stored} but votes are rejected")),
            _ => Ok(d),
        }
    }
}

/// Accepted utterances plus rejection counts.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub root: PathBuf,
    pub utterances: Vec<Utterance>,
    pub rejected: BTreeMap<RejectReason, usize>,
}

impl Corpus {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn sessions(&self) -> Vec<u8> {
        let mut s: Vec<u8> = self.utterances.iter().map(|u| u.session).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

/// Reads a JSON-lines manifest, applying the vote rule to every record.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut corpus = Corpus {
        root,
        ..Corpus::default()
    };
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let mut u: Utterance = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if !(1..=5).contains(&u.session) {
            return Err(parse(format!("session {} outside 1..=5", u.session)));
        }
        if !seen.insert(u.id.clone()) {
            return Err(parse(format!("duplicate id {}", u.id)));
        }
        match u.decide().map_err(parse)? {
            LabelDecision::Accept(e) => {
                u.label = Some(e);
                corpus.utterances.push(u);
            }
            LabelDecision::Reject(r) => *corpus.rejected.entry(r).or_default() += 1,
        }
    }
    Ok(corpus)
}

pub fn write_manifest(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let mut out = Vec::new();
    for u in utterances {
        serde_json::to_writer(&mut out, u).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filters_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"id":"a","session":1,"speaker":"Ses01F","votes":["anger","anger","neutral"]}"#,
                "\n",
                r#"{"id":"b","session":2,"speaker":"Ses02M","votes":["fear","fear","anger"]}"#,
                "\n\n",
                r#"{"id":"c","session":3,"speaker":"Ses03M","label":"sadness"}"#,
                "\n",
            ),
        )
        .unwrap();
        let c = load_manifest(&path).unwrap();
        assert_eq!(c.utterances.len(), 2);
        assert_eq!(c.utterances[0].label, Some(Emotion::Anger));
        assert_eq!(c.rejected[&RejectReason::OutOfSet], 1);
        assert_eq!(c.sessions(), vec![1, 3]);
    }

    #[test]
    fn reports_line_of_bad_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"session\":1,\"speaker\":\"x\",\"label\":\"anger\"}\n{\"id\":\"a\"\n").unwrap();
        match load_manifest(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
