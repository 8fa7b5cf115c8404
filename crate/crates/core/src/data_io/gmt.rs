//! Gene sets in GMT form: `name<TAB>description<TAB>gene<TAB>gene...`.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use crate::error::{PearlError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneSet {
    pub name: String,
    pub description: String,
    pub genes: BTreeSet<String>,
}

/// Named gene sets in file order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GeneSetCollection {
    pub sets: Vec<GeneSet>,
}

impl GeneSetCollection {
    pub fn new(sets: Vec<GeneSet>) -> Result<Self> {
        let mut names = HashSet::new();
        for s in &sets {
            if s.genes.is_empty() {
                return Err(PearlError::InvalidValue(format!("gene set `{}` is empty", s.name)));
            }
            if !names.insert(s.name.as_str()) {
                return Err(PearlError::Duplicate {
                    kind: "gene set",
                    id: s.name.clone(),
                });
            }
        }
        Ok(Self { sets })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedGmt {
    pub collection: GeneSetCollection,
    /// Gene symbols dropped because they repeated within their own line.
    pub duplicate_genes: usize,
}

pub fn parse_gmt(bytes: &[u8]) -> Result<ParsedGmt> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| PearlError::parse("gmt", 0, format!("input is not UTF-8: {e}")))?;
    let mut sets = Vec::new();
    let mut names = HashSet::new();
    let mut duplicate_genes = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 3 {
            return Err(PearlError::parse(
                "gmt",
                line_no,
                format!("expected at least 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let name = fields[0].to_string();
        if name.is_empty() {
            return Err(PearlError::parse("gmt", line_no, "empty gene set name"));
        }
        let mut genes = BTreeSet::new();
        for g in fields[2..].iter().filter(|g| !g.is_empty()) {
            if !genes.insert(g.to_string()) {
                duplicate_genes += 1;
            }
        }
        if genes.is_empty() {
            return Err(PearlError::parse("gmt", line_no, format!("gene set `{name}` lists no genes")));
        }
        if !names.insert(name.clone()) {
            return Err(PearlError::Duplicate {
                kind: "gene set",
                id: name,
            });
        }
        sets.push(GeneSet {
            name,
            description: fields[1].to_string(),
            genes,
        });
    }
    if duplicate_genes > 0 {
        log::warn!("gmt: dropped {duplicate_genes} repeated gene symbols");
    }
    Ok(ParsedGmt {
        collection: GeneSetCollection { sets },
        duplicate_genes,
    })
}

pub fn read_gmt(path: &Path) -> Result<ParsedGmt> {
    let bytes = std::fs::read(path).map_err(|e| PearlError::io(path, e))?;
    parse_gmt(&bytes)
}

pub fn gmt_string(c: &GeneSetCollection) -> String {
    let mut out = String::new();
    for s in &c.sets {
        out.push_str(&s.name);
        out.push('\t');
        out.push_str(&s.description);
        for g in &s.genes {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
    }
    out
}

pub fn write_gmt(c: &GeneSetCollection, path: &Path) -> Result<()> {
    std::fs::write(path, gmt_string(c)).map_err(|e| PearlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_set_two_genes() {
        let p = parse_gmt(b"PATH_A\tdesc\tTP53\tBRCA1\n").unwrap();
        assert_eq!(p.collection.len(), 1);
        assert_eq!(p.collection.sets[0].genes.len(), 2);
        assert_eq!(p.duplicate_genes, 0);
    }

    #[test]
    fn repeated_gene_is_deduplicated() {
        let p = parse_gmt(b"PATH_A\tdesc\tTP53\tTP53\n").unwrap();
        assert_eq!(p.collection.sets[0].genes.len(), 1);
        assert_eq!(p.duplicate_genes, 1);
    }

    #[test]
    fn too_few_fields_reports_line() {
        let err = parse_gmt(b"PATH_A\tdesc\n").unwrap_err();
        assert!(matches!(err, PearlError::Parse { line: 1, .. }), "{err}");
        let err = parse_gmt(b"A\td\tX\n\nB\td\n").unwrap_err();
        assert!(matches!(err, PearlError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_name_is_an_error() {
        let err = parse_gmt(b"A\td\tX\nA\td\tY\n").unwrap_err();
        assert!(matches!(err, PearlError::Duplicate { .. }));
    }

    #[test]
    fn symbols_are_trimmed_case_sensitive() {
        let p = parse_gmt(b"A\td\t tp53 \tTP53\t\n").unwrap();
        let genes: Vec<&str> = p.collection.sets[0].genes.iter().map(String::as_str).collect();
        assert_eq!(genes, vec!["TP53", "tp53"]);
    }

    #[test]
    fn invalid_utf8_is_rejected() {
        assert!(parse_gmt(&[0xff, 0xfe, b'\t']).is_err());
    }
}
