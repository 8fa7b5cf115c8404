//! Prediction quality metrics and cluster agreement.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use pearl_autodiff::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PearlError, Result};

/// Sample Pearson correlation; `None` when either input has zero variance.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    if pred.len() != truth.len() {
        return Err(PearlError::InvalidValue(format!(
            "pcc inputs have lengths {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(PearlError::InsufficientData("pcc needs at least 2 values".into()));
    }
    let mp = pred.iter().sum::<f64>() / n as f64;
    let mt = truth.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in pred.iter().zip(truth) {
        let (dx, dy) = (x - mp, y - mt);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_names: Vec<String>,
    /// Correlation across spots for each target; `None` if undefined.
    pub per_target_pcc: Vec<Option<f64>>,
    /// Mean over targets with a defined correlation.
    pub mean_pcc: Option<f64>,
    pub mse: f64,
    pub mae: f64,
    pub n_spots: usize,
    pub n_targets: usize,
    pub n_undefined_pcc: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `target,pcc` rows; undefined correlations are left empty.
    pub fn pcc_csv(&self) -> String {
        let mut out = String::from("target,pcc\n");
        for (name, v) in self.target_names.iter().zip(&self.per_target_pcc) {
            let _ = writeln!(out, "{name},{}", v.map_or(String::new(), |v| v.to_string()));
        }
        out
    }

    pub fn write(&self, json: &Path, csv: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?).map_err(|e| PearlError::io(json, e))?;
        std::fs::write(csv, self.pcc_csv()).map_err(|e| PearlError::io(csv, e))
    }
}

/// Per-target correlation plus MSE and MAE over all entries.
pub fn evaluate_expression(pred: &Tensor, truth: &Tensor, target_names: &[String]) -> Result<EvalReport> {
    if pred.shape() != truth.shape() {
        return Err(PearlError::InvalidValue(format!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        )));
    }
    let [n, t] = pred.shape();
    if target_names.len() != t {
        return Err(PearlError::InvalidValue(format!(
            "{} target names for {t} columns",
            target_names.len()
        )));
    }
    let pt = pred.transpose();
    let tt = truth.transpose();
    let per_target: Vec<Option<f64>> = (0..t)
        .into_par_iter()
        .map(|j| pcc(pt.row(j), tt.row(j)))
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = per_target.iter().flatten().copied().collect();
    let mean_pcc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let count = (n * t) as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in pred.data().iter().zip(truth.data()) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    Ok(EvalReport {
        target_names: target_names.to_vec(),
        n_undefined_pcc: t - defined.len(),
        per_target_pcc: per_target,
        mean_pcc,
        mse: se / count,
        mae: ae / count,
        n_spots: n,
        n_targets: t,
    })
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table. Returns 1 when both
/// labelings are trivially identical (the index is 0/0).
pub fn ari(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PearlError::InvalidValue(format!(
            "label vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut table: HashMap<(i64, i64), f64> = HashMap::new();
    let mut rows: HashMap<i64, f64> = HashMap::new();
    let mut cols: HashMap<i64, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let sorted_sum = |m: &mut dyn Iterator<Item = f64>| {
        let mut v: Vec<f64> = m.map(choose2).collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>()
    };
    let index = sorted_sum(&mut table.values().copied());
    let sa = sorted_sum(&mut rows.values().copied());
    let sb = sorted_sum(&mut cols.values().copied());
    let total = choose2(a.len() as f64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max - expected == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
