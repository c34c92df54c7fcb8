use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Author {
    #[serde(default)]
    pub name: String,
    pub affiliations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    pub venue: String,
    pub year: i64,
    #[serde(default)]
    pub title: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    pub authors: Vec<Author>,
}

impl PaperRecord {
    pub fn validate(&self) -> Result<()> {
        if self.authors.is_empty() {
            return Err(Error::InvalidArgument(format!("paper `{}` has no authors", self.id)));
        }
        if let Some(a) = self.authors.iter().find(|a| a.affiliations.is_empty()) {
            return Err(Error::InvalidArgument(format!("paper `{}`: author `{}` has no affiliation", self.id, a.name)));
        }
        Ok(())
    }

    /// Title and abstract joined by a blank line.
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.title, self.abstract_text)
    }
}

/// Reads one JSON record per non-blank line.
pub fn read_records_jsonl<R: Read>(source: R) -> Result<Vec<PaperRecord>> {
    let mut out = Vec::new();
    for (k, line) in std::io::BufReader::new(source).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PaperRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse { row: k + 1, message: e.to_string() })?;
        rec.validate().map_err(|e| Error::Parse { row: k + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records_jsonl<W: Write>(records: &[PaperRecord], mut sink: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    Ok(())
}

/// Lowercased, trimmed organisation name used for matching.
pub fn normalize_name(s: &str) -> String {
    s.trim().to_lowercase()
}

/// A named set of organisations. `aliases` maps alternative spellings or
/// subsidiaries onto canonical members.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDefinition {
    pub name: String,
    pub members: BTreeSet<String>,
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

impl GroupDefinition {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidArgument("group name is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.members {
            if !seen.insert(normalize_name(m)) {
                return Err(Error::InvalidArgument(format!("group `{}`: duplicate member `{m}`", self.name)));
            }
        }
        if let Some((a, c)) = self.aliases.iter().find(|(_, c)| !self.members.contains(*c)) {
            return Err(Error::InvalidArgument(format!(
                "group `{}`: alias `{a}` points to `{c}`, which is not a member",
                self.name
            )));
        }
        Ok(())
    }

    /// Canonical member an affiliation string resolves to, if any.
    pub fn resolve(&self, affiliation: &str) -> Option<&str> {
        let key = normalize_name(affiliation);
        self.members
            .iter()
            .find(|m| normalize_name(m) == key)
            .or_else(|| self.aliases.iter().find(|(a, _)| normalize_name(a) == key).map(|(_, c)| c))
            .map(String::as_str)
    }

    pub fn matches(&self, affiliation: &str) -> bool {
        self.resolve(affiliation).is_some()
    }

    /// Whether any author of the paper is affiliated with the group.
    pub fn includes_paper(&self, paper: &PaperRecord) -> bool {
        paper.authors.iter().flat_map(|a| &a.affiliations).any(|aff| self.matches(aff))
    }
}

/// Reads either one group object or an array of groups.
pub fn read_groups_json<R: Read>(source: R) -> Result<Vec<GroupDefinition>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(GroupDefinition),
        Many(Vec<GroupDefinition>),
    }
    let groups = match serde_json::from_reader(source)? {
        OneOrMany::One(g) => vec![g],
        OneOrMany::Many(v) => v,
    };
    let mut names = BTreeSet::new();
    for g in &groups {
        g.validate()?;
        if !names.insert(g.name.clone()) {
            return Err(Error::InvalidArgument(format!("duplicate group `{}`", g.name)));
        }
    }
    Ok(groups)
}
