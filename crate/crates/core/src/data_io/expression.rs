//! Sparse spots x genes expression matrices and their TSV encodings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PearlError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    RawCounts,
    NormalizedLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionFormat {
    DenseTsv,
    SparseTripletTsv,
}

/// Sparse expression matrix stored row-compressed by spot. Zero values are
/// never stored; column indices within a row are strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    spot_ids: Vec<String>,
    gene_ids: Vec<String>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    value_kind: ValueKind,
}

fn check_unique(ids: &[String], kind: &'static str) -> Result<()> {
    let mut seen = HashMap::with_capacity(ids.len());
    for id in ids {
        if seen.insert(id.as_str(), ()).is_some() {
            return Err(PearlError::Duplicate {
                kind,
                id: id.clone(),
            });
        }
    }
    Ok(())
}

impl ExpressionMatrix {
    /// Builds a matrix from `(spot, gene, value)` triplets in any order.
    /// Zero values are dropped; duplicate positions are an error.
    pub fn from_triplets(
        spot_ids: Vec<String>,
        gene_ids: Vec<String>,
        mut triplets: Vec<(usize, usize, f64)>,
        value_kind: ValueKind,
    ) -> Result<Self> {
        check_unique(&spot_ids, "spot id")?;
        check_unique(&gene_ids, "gene id")?;
        for &(s, g, v) in &triplets {
            if s >= spot_ids.len() || g >= gene_ids.len() {
                return Err(PearlError::InvalidValue(format!(
                    "entry ({s}, {g}) outside a {}x{} matrix",
                    spot_ids.len(),
                    gene_ids.len()
                )));
            }
            if !v.is_finite() {
                return Err(PearlError::InvalidValue(format!(
                    "non-finite value for spot `{}`, gene `{}`",
                    spot_ids[s], gene_ids[g]
                )));
            }
            if value_kind == ValueKind::RawCounts && v < 0.0 {
                return Err(PearlError::InvalidValue(format!(
                    "negative count {v} for spot `{}`, gene `{}`",
                    spot_ids[s], gene_ids[g]
                )));
            }
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(PearlError::Duplicate {
                    kind: "matrix entry",
                    id: format!("{}/{}", spot_ids[w[0].0], gene_ids[w[0].1]),
                });
            }
        }
        let mut row_ptr = vec![0; spot_ids.len() + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for (s, g, v) in triplets {
            if v == 0.0 {
                continue;
            }
            row_ptr[s + 1] += 1;
            col_idx.push(g);
            values.push(v);
        }
        for i in 0..spot_ids.len() {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            spot_ids,
            gene_ids,
            row_ptr,
            col_idx,
            values,
            value_kind,
        })
    }

    /// Builds a matrix from a row-major dense buffer.
    pub fn from_dense(
        spot_ids: Vec<String>,
        gene_ids: Vec<String>,
        dense: &[f64],
        value_kind: ValueKind,
    ) -> Result<Self> {
        let n_genes = gene_ids.len();
        if dense.len() != spot_ids.len() * n_genes {
            return Err(PearlError::InvalidValue(format!(
                "dense buffer of {} values for a {}x{} matrix",
                dense.len(),
                spot_ids.len(),
                n_genes
            )));
        }
        let triplets = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i / n_genes, i % n_genes, v))
            .collect();
        Self::from_triplets(spot_ids, gene_ids, triplets, value_kind)
    }

    pub fn empty(value_kind: ValueKind) -> Self {
        Self {
            spot_ids: Vec::new(),
            gene_ids: Vec::new(),
            row_ptr: vec![0],
            col_idx: Vec::new(),
            values: Vec::new(),
            value_kind,
        }
    }

    pub fn n_spots(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    /// Number of stored (nonzero) entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn spot_ids(&self) -> &[String] {
        &self.spot_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn value_kind(&self) -> ValueKind {
        self.value_kind
    }

    /// Relabels the value kind, e.g. after reading back a normalized matrix.
    pub fn with_value_kind(mut self, kind: ValueKind) -> Result<Self> {
        if kind == ValueKind::RawCounts && self.values.iter().any(|&v| v < 0.0) {
            return Err(PearlError::InvalidValue(
                "raw counts cannot hold negative values".into(),
            ));
        }
        self.value_kind = kind;
        Ok(self)
    }

    /// Gene indices and values stored for one spot.
    pub fn row(&self, spot: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[spot]..self.row_ptr[spot + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn dense_row(&self, spot: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_genes()];
        let (cols, vals) = self.row(spot);
        for (&c, &v) in cols.iter().zip(vals) {
            out[c] = v;
        }
        out
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_spots() * self.n_genes());
        for s in 0..self.n_spots() {
            out.extend(self.dense_row(s));
        }
        out
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_spots()).flat_map(move |s| {
            let (cols, vals) = self.row(s);
            cols.iter().zip(vals).map(move |(&g, &v)| (s, g, v))
        })
    }

    pub fn spot_index(&self) -> HashMap<&str, usize> {
        self.spot_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// Number of spots with a stored (nonzero) value, per gene.
    pub fn detection_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_genes()];
        for &g in &self.col_idx {
            counts[g] += 1;
        }
        counts
    }

    /// Keeps the listed genes, in the listed order.
    pub fn select_genes(&self, genes: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.n_genes()];
        for (new, &old) in genes.iter().enumerate() {
            if old >= self.n_genes() {
                return Err(PearlError::InvalidValue(format!("gene index {old} out of range")));
            }
            remap[old] = new;
        }
        let gene_ids = genes.iter().map(|&g| self.gene_ids[g].clone()).collect();
        let triplets = self
            .triplets()
            .filter(|&(_, g, _)| remap[g] != usize::MAX)
            .map(|(s, g, v)| (s, remap[g], v))
            .collect();
        Self::from_triplets(self.spot_ids.clone(), gene_ids, triplets, self.value_kind)
    }

    /// Keeps the listed spots, in the listed order.
    pub fn select_spots(&self, spots: &[usize]) -> Result<Self> {
        let mut triplets = Vec::new();
        let mut spot_ids = Vec::with_capacity(spots.len());
        for (new, &old) in spots.iter().enumerate() {
            spot_ids.push(self.spot_ids[old].clone());
            let (cols, vals) = self.row(old);
            triplets.extend(cols.iter().zip(vals).map(|(&g, &v)| (new, g, v)));
        }
        Self::from_triplets(spot_ids, self.gene_ids.clone(), triplets, self.value_kind)
    }
}

fn parse_value(text: &str, what: &str, line: usize) -> Result<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| PearlError::parse(what, line, format!("not a number: `{text}`")))?;
    if !v.is_finite() {
        return Err(PearlError::parse(what, line, format!("non-finite value `{text}`")));
    }
    if v < 0.0 {
        return Err(PearlError::parse(what, line, format!("negative value {v}")));
    }
    Ok(v)
}

/// Dense TSV: a header of gene ids (optionally preceded by a label for the
/// spot column), then one row per spot starting with the spot id.
pub fn parse_dense_tsv(text: &str) -> Result<ExpressionMatrix> {
    const WHAT: &str = "dense expression";
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(ExpressionMatrix::empty(ValueKind::RawCounts));
    };
    let header: Vec<String> = header.split('\t').map(|s| s.trim().to_string()).collect();
    let rows: Vec<(usize, &str)> = lines.collect();
    let width = rows
        .first()
        .map(|(_, l)| l.split('\t').count())
        .unwrap_or(header.len() + 1);
    let gene_ids: Vec<String> = if width == header.len() {
        header[1..].to_vec()
    } else if width == header.len() + 1 {
        header
    } else {
        return Err(PearlError::parse(
            WHAT,
            rows[0].0 + 1,
            format!("{} fields but the header names {} columns", width, header.len()),
        ));
    };
    let mut spot_ids = Vec::with_capacity(rows.len());
    let mut triplets = Vec::new();
    for (s, (idx, line)) in rows.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != gene_ids.len() + 1 {
            return Err(PearlError::parse(
                WHAT,
                idx + 1,
                format!("expected {} fields, found {}", gene_ids.len() + 1, fields.len()),
            ));
        }
        spot_ids.push(fields[0].trim().to_string());
        for (g, f) in fields[1..].iter().enumerate() {
            let v = parse_value(f, WHAT, idx + 1)?;
            if v != 0.0 {
                triplets.push((s, g, v));
            }
        }
    }
    ExpressionMatrix::from_triplets(spot_ids, gene_ids, triplets, ValueKind::RawCounts)
}

/// Sparse triplet TSV with header `spot\tgene\tvalue`. Spot and gene order
/// follow first appearance. Zero-valued rows register ids without storing a
/// value.
pub fn parse_triplet_tsv(text: &str) -> Result<ExpressionMatrix> {
    const WHAT: &str = "triplet expression";
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((hidx, header)) = lines.next() else {
        return Ok(ExpressionMatrix::empty(ValueKind::RawCounts));
    };
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    if cols != ["spot", "gene", "value"] {
        return Err(PearlError::parse(
            WHAT,
            hidx + 1,
            "header must be `spot<TAB>gene<TAB>value`",
        ));
    }
    let mut spots: HashMap<String, usize> = HashMap::new();
    let mut genes: HashMap<String, usize> = HashMap::new();
    let mut spot_ids = Vec::new();
    let mut gene_ids = Vec::new();
    let mut triplets = Vec::new();
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(PearlError::parse(
                WHAT,
                idx + 1,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let spot = fields[0].trim();
        let gene = fields[1].trim();
        if spot.is_empty() || gene.is_empty() {
            return Err(PearlError::parse(WHAT, idx + 1, "empty spot or gene id"));
        }
        let v = parse_value(fields[2], WHAT, idx + 1)?;
        let s = *spots.entry(spot.to_string()).or_insert_with(|| {
            spot_ids.push(spot.to_string());
            spot_ids.len() - 1
        });
        let g = *genes.entry(gene.to_string()).or_insert_with(|| {
            gene_ids.push(gene.to_string());
            gene_ids.len() - 1
        });
        triplets.push((s, g, v));
    }
    // duplicates must be caught even when the repeated value is zero
    let mut keys: Vec<(usize, usize)> = triplets.iter().map(|&(s, g, _)| (s, g)).collect();
    keys.sort_unstable();
    if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
        return Err(PearlError::Duplicate {
            kind: "matrix entry",
            id: format!("{}/{}", spot_ids[w[0].0], gene_ids[w[0].1]),
        });
    }
    ExpressionMatrix::from_triplets(spot_ids, gene_ids, triplets, ValueKind::RawCounts)
}

pub fn parse_expression_text(text: &str, format: ExpressionFormat) -> Result<ExpressionMatrix> {
    match format {
        ExpressionFormat::DenseTsv => parse_dense_tsv(text),
        ExpressionFormat::SparseTripletTsv => parse_triplet_tsv(text),
    }
}

/// Reads an expression file. The result is labelled as raw counts.
pub fn parse_expression(path: &Path, format: ExpressionFormat) -> Result<ExpressionMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| PearlError::io(path, e))?;
    parse_expression_text(&text, format)
}

pub fn dense_tsv_string(m: &ExpressionMatrix) -> String {
    let mut out = String::from("spot_id");
    for g in m.gene_ids() {
        out.push('\t');
        out.push_str(g);
    }
    out.push('\n');
    for s in 0..m.n_spots() {
        out.push_str(&m.spot_ids()[s]);
        for v in m.dense_row(s) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Triplet encoding. Spots or genes without any stored value get one
/// explicit zero row so that their ids survive a round trip.
pub fn triplet_tsv_string(m: &ExpressionMatrix) -> String {
    let mut out = String::from("spot\tgene\tvalue\n");
    if m.n_genes() == 0 {
        return out;
    }
    let mut gene_seen = vec![false; m.n_genes()];
    for s in 0..m.n_spots() {
        let (cols, vals) = m.row(s);
        let sid = &m.spot_ids()[s];
        if cols.is_empty() {
            let _ = writeln!(out, "{sid}\t{}\t0", m.gene_ids()[0]);
            gene_seen[0] = true;
        }
        for (&g, &v) in cols.iter().zip(vals) {
            gene_seen[g] = true;
            let _ = writeln!(out, "{sid}\t{}\t{v}", m.gene_ids()[g]);
        }
    }
    if let Some(first_spot) = m.spot_ids().first() {
        for (g, seen) in gene_seen.iter().enumerate() {
            if !seen {
                let _ = writeln!(out, "{first_spot}\t{}\t0", m.gene_ids()[g]);
            }
        }
    }
    out
}

pub fn write_expression(m: &ExpressionMatrix, path: &Path, format: ExpressionFormat) -> Result<()> {
    let text = match format {
        ExpressionFormat::DenseTsv => dense_tsv_string(m),
        ExpressionFormat::SparseTripletTsv => triplet_tsv_string(m),
    };
    std::fs::write(path, text).map_err(|e| PearlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_zeros_are_not_stored() {
        let m = parse_dense_tsv("spot_id\tg1\tg2\ns1\t0\t3\ns2\t1\t0\n").unwrap();
        assert_eq!(m.n_spots(), 2);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.value_kind(), ValueKind::RawCounts);
        assert_eq!(m.dense_row(0), vec![0.0, 3.0]);
    }

    #[test]
    fn dense_header_without_spot_label() {
        let m = parse_dense_tsv("g1\tg2\ns1\t0\t3\n").unwrap();
        assert_eq!(m.gene_ids(), &["g1", "g2"]);
    }

    #[test]
    fn negative_triplet_is_rejected() {
        let err = parse_triplet_tsv("spot\tgene\tvalue\ns1\tg1\t-2\n").unwrap_err();
        assert!(matches!(err, PearlError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_input_gives_empty_matrix() {
        for f in [ExpressionFormat::DenseTsv, ExpressionFormat::SparseTripletTsv] {
            let m = parse_expression_text("", f).unwrap();
            assert_eq!(m.n_spots(), 0);
            assert_eq!(m.n_genes(), 0);
        }
    }

    #[test]
    fn duplicate_triplets_are_rejected() {
        let err = parse_triplet_tsv("spot\tgene\tvalue\ns1\tg1\t2\ns1\tg1\t0\n").unwrap_err();
        assert!(matches!(err, PearlError::Duplicate { .. }));
    }

    #[test]
    fn malformed_triplet_row_reports_line() {
        let err = parse_triplet_tsv("spot\tgene\tvalue\ns1\tg1\n").unwrap_err();
        assert!(matches!(err, PearlError::Parse { line: 2, .. }));
    }

    #[test]
    fn triplet_round_trip_keeps_empty_spots_and_genes() {
        let m = ExpressionMatrix::from_dense(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
            &[0.0, 0.0, 0.0, 1.5, 0.0, 0.0],
            ValueKind::RawCounts,
        )
        .unwrap();
        let back = parse_triplet_tsv(&triplet_tsv_string(&m)).unwrap();
        assert_eq!(back.spot_ids(), m.spot_ids());
        assert_eq!(back.to_dense(), m.to_dense());
        let mut genes = back.gene_ids().to_vec();
        genes.sort();
        assert_eq!(genes, vec!["x", "y", "z"]);
    }

    #[test]
    fn select_genes_reorders_columns() {
        let m = ExpressionMatrix::from_dense(
            vec!["a".into()],
            vec!["x".into(), "y".into()],
            &[1.0, 2.0],
            ValueKind::RawCounts,
        )
        .unwrap();
        let s = m.select_genes(&[1, 0]).unwrap();
        assert_eq!(s.gene_ids(), &["y", "x"]);
        assert_eq!(s.dense_row(0), vec![2.0, 1.0]);
    }
}
