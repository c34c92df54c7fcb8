use std::collections::BTreeMap;
use std::io::Write;

use super::records::{GroupDefinition, PaperRecord};
use crate::error::Result;
use crate::fmt::float17;

/// Bucket for affiliations that match no group.
pub const OTHER: &str = "other";

/// `(venue, year)` cell key.
pub type Cell = (String, i64);

fn cell(p: &PaperRecord) -> Cell {
    (p.venue.clone(), p.year)
}

/// Papers per cell with at least one author affiliated with `group`; every
/// cell holding a paper is present, possibly with count 0.
pub fn count_simple(records: &[PaperRecord], group: &GroupDefinition) -> BTreeMap<Cell, u64> {
    let mut table = BTreeMap::new();
    for p in records {
        *table.entry(cell(p)).or_insert(0) += u64::from(group.includes_paper(p));
    }
    table
}

pub fn count_total(records: &[PaperRecord]) -> BTreeMap<Cell, u64> {
    let mut table = BTreeMap::new();
    for p in records {
        *table.entry(cell(p)).or_insert(0) += 1;
    }
    table
}

/// Fractional credit of one paper: each author carries `1 / n_authors`,
/// split evenly over that author's affiliations. An affiliation goes to the
/// first group that lists it, otherwise to [`OTHER`].
pub fn paper_weights(paper: &PaperRecord, groups: &[GroupDefinition]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let n_authors = paper.authors.len() as f64;
    for author in &paper.authors {
        if author.affiliations.is_empty() {
            *out.entry(OTHER.to_string()).or_insert(0.0) += 1.0 / n_authors;
            continue;
        }
        let w = 1.0 / (n_authors * author.affiliations.len() as f64);
        for aff in &author.affiliations {
            let name = groups.iter().find(|g| g.matches(aff)).map_or(OTHER, |g| g.name.as_str());
            *out.entry(name.to_string()).or_insert(0.0) += w;
        }
    }
    out
}

/// Fractional counts per group (plus [`OTHER`]) and cell. Every group has a
/// row for every cell holding a paper.
pub fn count_weighted(
    records: &[PaperRecord],
    groups: &[GroupDefinition],
) -> BTreeMap<String, BTreeMap<Cell, f64>> {
    let mut tables: BTreeMap<String, BTreeMap<Cell, f64>> = BTreeMap::new();
    let cells: Vec<Cell> = count_total(records).into_keys().collect();
    for name in groups.iter().map(|g| g.name.as_str()).chain([OTHER]) {
        tables.insert(name.to_string(), cells.iter().map(|c| (c.clone(), 0.0)).collect());
    }
    for p in records {
        for (name, w) in paper_weights(p, groups) {
            *tables.get_mut(&name).expect("every group has a table").get_mut(&cell(p)).expect("cell exists") += w;
        }
    }
    tables
}

/// Share of a cell's papers with at least one author in `group`.
pub fn share_series(records: &[PaperRecord], group: &GroupDefinition) -> BTreeMap<Cell, f64> {
    let totals = count_total(records);
    count_simple(records, group)
        .into_iter()
        .filter_map(|(c, n)| {
            let total = totals[&c];
            (total > 0).then(|| (c, n as f64 / total as f64))
        })
        .collect()
}

/// CSV `group,venue,year,value` for integer tables.
pub fn write_counts_csv<W: Write>(tables: &[(String, BTreeMap<Cell, u64>)], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["group", "venue", "year", "value"])?;
    for (g, t) in tables {
        for ((venue, year), v) in t {
            w.write_record([g.as_str(), venue, &year.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// CSV `group,venue,year,value` for fractional tables.
pub fn write_fractions_csv<W: Write>(tables: &[(String, BTreeMap<Cell, f64>)], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["group", "venue", "year", "value"])?;
    for (g, t) in tables {
        for ((venue, year), v) in t {
            w.write_record([g.as_str(), venue, &year.to_string(), &float17(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}
