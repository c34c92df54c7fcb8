use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::sync::OnceLock;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use super::records::{GroupDefinition, PaperRecord};
use crate::error::{Error, Result};
use crate::fmt::float17;

const STOPWORDS: &str = include_str!("../../data/stopwords.txt");

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

/// Stemmed unigrams followed by `_`-joined bigrams of adjacent tokens that
/// survived stopword removal.
pub fn preprocess_text(document: &str) -> Vec<String> {
    let stemmer = Stemmer::create(Algorithm::English);
    let lower = document.to_lowercase();
    let tokens: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !stopwords().contains(t))
        .map(|t| stemmer.stem(t).into_owned())
        .collect();
    let bigrams: Vec<String> = tokens.windows(2).map(|w| format!("{}_{}", w[0], w[1])).collect();
    tokens.into_iter().chain(bigrams).collect()
}

/// Normalized TF-IDF scores of one group; non-negative and summing to one
/// unless every term of the group occurs in every document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfProfile {
    pub venue: String,
    pub group: String,
    pub n_documents: usize,
    pub scores: BTreeMap<String, f64>,
}

/// Group profiles from pre-tokenised documents. `members[g]` lists the
/// documents of group `g`; IDF is taken over all `documents`.
pub fn tfidf_profiles(
    venue: &str,
    documents: &[Vec<String>],
    groups: &[(String, Vec<usize>)],
) -> Result<Vec<TfidfProfile>> {
    if let Some((name, _)) = groups.iter().find(|(_, m)| m.is_empty()) {
        return Err(Error::EmptyGroup(name.clone()));
    }
    let n = documents.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in documents {
        let uniq: HashSet<&str> = doc.iter().map(String::as_str).collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let per_doc: Vec<HashMap<&str, f64>> = documents
        .iter()
        .map(|doc| {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for t in doc {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
            let total = doc.len() as f64;
            counts
                .into_iter()
                .map(|(t, c)| (t, c as f64 / total * (n / df[t] as f64).ln()))
                .collect()
        })
        .collect();
    groups
        .iter()
        .map(|(name, members)| {
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            for &d in members {
                for (t, v) in &per_doc[d] {
                    *sums.entry((*t).to_string()).or_insert(0.0) += v;
                }
            }
            let total: f64 = sums.values().sum();
            if total > 0.0 {
                sums.values_mut().for_each(|v| *v /= total);
            }
            Ok(TfidfProfile { venue: venue.to_string(), group: name.clone(), n_documents: members.len(), scores: sums })
        })
        .collect()
}

/// Per-venue group profiles. A paper belongs to every group with at least
/// one affiliated author.
pub fn tfidf_group_scores(records: &[PaperRecord], groups: &[GroupDefinition]) -> Result<Vec<TfidfProfile>> {
    let mut by_venue: BTreeMap<&str, Vec<&PaperRecord>> = BTreeMap::new();
    for r in records {
        by_venue.entry(r.venue.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (venue, papers) in by_venue {
        let docs: Vec<Vec<String>> = papers.iter().map(|p| preprocess_text(&p.text())).collect();
        let members: Vec<(String, Vec<usize>)> = groups
            .iter()
            .map(|g| {
                let idx = papers.iter().enumerate().filter(|(_, p)| g.includes_paper(p)).map(|(k, _)| k).collect();
                (g.name.clone(), idx)
            })
            .collect();
        let profiles = tfidf_profiles(venue, &docs, &members).map_err(|e| match e {
            Error::EmptyGroup(name) => Error::EmptyGroup(format!("{name}` at venue `{venue}")),
            e => e,
        })?;
        out.extend(profiles);
    }
    Ok(out)
}

/// Splits records into those before `year` and those from `year` on.
pub fn split_by_year(records: &[PaperRecord], year: i64) -> (Vec<PaperRecord>, Vec<PaperRecord>) {
    records.iter().cloned().partition(|r| r.year < year)
}

/// CSV `venue,group,term,score`, with an extra leading `label` column when
/// given.
pub fn write_profiles_csv<W: Write>(profiles: &[(Option<String>, TfidfProfile)], sink: W) -> Result<()> {
    let labelled = profiles.iter().any(|(l, _)| l.is_some());
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["venue", "group", "term", "score"];
    if labelled {
        header.insert(0, "label");
    }
    w.write_record(&header)?;
    for (label, p) in profiles {
        for (term, score) in &p.scores {
            let mut row = vec![p.venue.clone(), p.group.clone(), term.clone(), float17(*score)];
            if labelled {
                row.insert(0, label.clone().unwrap_or_default());
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
