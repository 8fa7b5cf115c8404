//! Dense labelled tables (`row_id<TAB>col...`) and the CSV formats for spot
//! geometry and survival outcomes.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use pearl_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PearlError, Result};

/// Row-major real matrix with string labels on both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTable {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl DenseTable {
    pub fn new(row_ids: Vec<String>, col_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != row_ids.len() * col_ids.len() {
            return Err(PearlError::InvalidValue(format!(
                "{} values for a {}x{} table",
                values.len(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &row_ids {
            if !seen.insert(r.as_str()) {
                return Err(PearlError::Duplicate {
                    kind: "row id",
                    id: r.clone(),
                });
            }
        }
        Ok(Self {
            row_ids,
            col_ids,
            values,
        })
    }

    pub fn from_tensor(row_ids: Vec<String>, col_ids: Vec<String>, t: &Tensor) -> Result<Self> {
        Self::new(row_ids, col_ids, t.data().to_vec())
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.n_cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.n_rows(), self.n_cols(), self.values.clone()).expect("validated shape")
    }

    pub fn row_index(&self) -> HashMap<&str, usize> {
        self.row_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// Rows for the given ids, in that order.
    pub fn select_rows_by_id(&self, ids: &[String]) -> Result<Tensor> {
        let index = self.row_index();
        let mut out = Vec::with_capacity(ids.len() * self.n_cols());
        for id in ids {
            let r = index.get(id.as_str()).ok_or_else(|| {
                PearlError::InvalidValue(format!("row `{id}` missing from table"))
            })?;
            out.extend_from_slice(self.row(*r));
        }
        Ok(Tensor::new(ids.len(), self.n_cols(), out)?)
    }

    pub fn to_tsv(&self, corner: &str) -> String {
        let mut out = String::from(corner);
        for c in &self.col_ids {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for r in 0..self.n_rows() {
            out.push_str(&self.row_ids[r]);
            for v in self.row(r) {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str, what: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Self::new(Vec::new(), Vec::new(), Vec::new());
        };
        let col_ids: Vec<String> = header
            .split('\t')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let mut row_ids = Vec::new();
        let mut values = Vec::new();
        for (idx, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != col_ids.len() + 1 {
                return Err(PearlError::parse(
                    what,
                    idx + 1,
                    format!("expected {} fields, found {}", col_ids.len() + 1, fields.len()),
                ));
            }
            row_ids.push(fields[0].trim().to_string());
            for f in &fields[1..] {
                let v: f64 = f.trim().parse().map_err(|_| {
                    PearlError::parse(what, idx + 1, format!("not a number: `{f}`"))
                })?;
                if !v.is_finite() {
                    return Err(PearlError::parse(what, idx + 1, "non-finite value"));
                }
                values.push(v);
            }
        }
        Self::new(row_ids, col_ids, values)
    }

    pub fn read(path: &Path, what: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PearlError::io(path, e))?;
        Self::parse_tsv(&text, what)
    }

    pub fn write(&self, path: &Path, corner: &str) -> Result<()> {
        std::fs::write(path, self.to_tsv(corner)).map_err(|e| PearlError::io(path, e))
    }
}

/// Per-spot image feature vectors, one row per spot.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMatrix {
    pub spot_ids: Vec<String>,
    pub features: Tensor,
}

impl PatchFeatureMatrix {
    pub fn new(spot_ids: Vec<String>, features: Tensor) -> Result<Self> {
        if features.rows() != spot_ids.len() {
            return Err(PearlError::InvalidValue(format!(
                "{} feature rows for {} spots",
                features.rows(),
                spot_ids.len()
            )));
        }
        if features.cols() == 0 && !spot_ids.is_empty() {
            return Err(PearlError::InvalidValue("feature dimension must be positive".into()));
        }
        if !features.all_finite() {
            return Err(PearlError::InvalidValue("non-finite patch feature".into()));
        }
        Ok(Self { spot_ids, features })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn to_table(&self) -> DenseTable {
        let cols = (0..self.dim()).map(|i| format!("f{i}")).collect();
        DenseTable::from_tensor(self.spot_ids.clone(), cols, &self.features).expect("valid")
    }

    pub fn from_table(t: DenseTable) -> Result<Self> {
        let features = t.to_tensor();
        Self::new(t.row_ids, features)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_table(DenseTable::read(path, "patch features")?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path, "spot_id")
    }
}

/// Position of one spot: raw coordinates plus integer grid indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotGeometry {
    pub spot_id: String,
    pub slide_id: String,
    pub x: f64,
    pub y: f64,
    pub array_row: i64,
    pub array_col: i64,
}

fn csv_err(what: &str, e: csv::Error) -> PearlError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    PearlError::parse(what, line, e.to_string())
}

pub fn parse_geometry_csv(text: &str) -> Result<Vec<SpotGeometry>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| csv_err("coordinates", e))?.clone();
    let expected = ["spot_id", "slide_id", "x", "y", "array_row", "array_col"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(PearlError::parse(
            "coordinates",
            1,
            "header must be spot_id,slide_id,x,y,array_row,array_col",
        ));
    }
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut cells = HashSet::new();
    for rec in reader.deserialize::<SpotGeometry>() {
        let g = rec.map_err(|e| csv_err("coordinates", e))?;
        if !g.x.is_finite() || !g.y.is_finite() {
            return Err(PearlError::InvalidValue(format!(
                "non-finite coordinate for spot `{}`",
                g.spot_id
            )));
        }
        if !ids.insert(g.spot_id.clone()) {
            return Err(PearlError::Duplicate {
                kind: "spot id",
                id: g.spot_id,
            });
        }
        if !cells.insert((g.slide_id.clone(), g.array_row, g.array_col)) {
            return Err(PearlError::Duplicate {
                kind: "grid position",
                id: format!("{}:{},{}", g.slide_id, g.array_row, g.array_col),
            });
        }
        out.push(g);
    }
    Ok(out)
}

pub fn read_geometry(path: &Path) -> Result<Vec<SpotGeometry>> {
    let text = std::fs::read_to_string(path).map_err(|e| PearlError::io(path, e))?;
    parse_geometry_csv(&text)
}

pub fn geometry_csv_string(geom: &[SpotGeometry]) -> String {
    let mut out = String::from("spot_id,slide_id,x,y,array_row,array_col\n");
    for g in geom {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            g.spot_id, g.slide_id, g.x, g.y, g.array_row, g.array_col
        );
    }
    out
}

pub fn write_geometry(geom: &[SpotGeometry], path: &Path) -> Result<()> {
    std::fs::write(path, geometry_csv_string(geom)).map_err(|e| PearlError::io(path, e))
}

/// One subject's outcome and the slides whose spots describe it.
#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRecord {
    pub subject_id: String,
    pub time: f64,
    pub event: bool,
    pub slide_ids: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurvivalTable {
    pub rows: Vec<SurvivalRecord>,
}

impl SurvivalTable {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.event).collect()
    }
}

fn parse_event(text: &str) -> Option<bool> {
    match text.to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

pub fn parse_survival_csv(text: &str) -> Result<SurvivalTable> {
    const WHAT: &str = "survival";
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| csv_err(WHAT, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["subject_id", "time", "event", "slide_ids"] {
        return Err(PearlError::parse(WHAT, 1, "header must be subject_id,time,event,slide_ids"));
    }
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(WHAT, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 4 {
            return Err(PearlError::parse(WHAT, line, "expected 4 fields"));
        }
        let time: f64 = rec[1]
            .parse()
            .map_err(|_| PearlError::parse(WHAT, line, format!("bad time `{}`", &rec[1])))?;
        if !(time > 0.0 && time.is_finite()) {
            return Err(PearlError::parse(WHAT, line, "time must be positive"));
        }
        let event = parse_event(&rec[2])
            .ok_or_else(|| PearlError::parse(WHAT, line, format!("bad event `{}`", &rec[2])))?;
        let slide_ids: Vec<String> = rec[3]
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if slide_ids.is_empty() {
            return Err(PearlError::parse(WHAT, line, "subject lists no slides"));
        }
        if !ids.insert(rec[0].to_string()) {
            return Err(PearlError::Duplicate {
                kind: "subject id",
                id: rec[0].to_string(),
            });
        }
        rows.push(SurvivalRecord {
            subject_id: rec[0].to_string(),
            time,
            event,
            slide_ids,
        });
    }
    Ok(SurvivalTable { rows })
}

pub fn read_survival(path: &Path) -> Result<SurvivalTable> {
    let text = std::fs::read_to_string(path).map_err(|e| PearlError::io(path, e))?;
    parse_survival_csv(&text)
}

pub fn survival_csv_string(t: &SurvivalTable) -> String {
    let mut out = String::from("subject_id,time,event,slide_ids\n");
    for r in &t.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.subject_id,
            r.time,
            u8::from(r.event),
            r.slide_ids.join(";")
        );
    }
    out
}

pub fn write_survival(t: &SurvivalTable, path: &Path) -> Result<()> {
    std::fs::write(path, survival_csv_string(t)).map_err(|e| PearlError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_duplicate_grid_cell() {
        let text = "spot_id,slide_id,x,y,array_row,array_col\na,s1,0,0,1,1\nb,s1,5,5,1,1\n";
        assert!(matches!(
            parse_geometry_csv(text).unwrap_err(),
            PearlError::Duplicate { .. }
        ));
        let ok = "spot_id,slide_id,x,y,array_row,array_col\na,s1,0,0,1,1\nb,s2,5,5,1,1\n";
        assert_eq!(parse_geometry_csv(ok).unwrap().len(), 2);
    }

    #[test]
    fn survival_parses_semicolon_slides() {
        let t = parse_survival_csv("subject_id,time,event,slide_ids\np1,2.5,1,s1;s2\np2,3,0,s3\n")
            .unwrap();
        assert_eq!(t.rows[0].slide_ids, vec!["s1", "s2"]);
        assert!(t.rows[0].event);
        assert!(!t.rows[1].event);
        let back = parse_survival_csv(&survival_csv_string(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn survival_rejects_non_positive_time() {
        assert!(parse_survival_csv("subject_id,time,event,slide_ids\np1,0,1,s1\n").is_err());
    }

    #[test]
    fn dense_table_round_trip() {
        let t = DenseTable::new(
            vec!["a".into(), "b".into()],
            vec!["x".into()],
            vec![0.1, -3e-7],
        )
        .unwrap();
        assert_eq!(DenseTable::parse_tsv(&t.to_tsv("id"), "t").unwrap(), t);
    }
}
