//! Gene filtering, library-size normalization, grid smoothing and
//! highly-variable-gene selection, applied in that order.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{ExpressionMatrix, SpotGeometry, ValueKind};
use crate::error::{PearlError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub min_spots_per_gene: usize,
    pub target_sum: f64,
    pub top_hvg: usize,
    pub smoothing_enabled: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_spots_per_gene: 1000,
            target_sum: 10_000.0,
            top_hvg: 1000,
            smoothing_enabled: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_sum > 0.0 && self.target_sum.is_finite()) {
            return Err(PearlError::Config("target_sum must be positive".into()));
        }
        if self.top_hvg == 0 {
            return Err(PearlError::Config("top_hvg must be at least 1".into()));
        }
        Ok(())
    }
}

fn require_kind(m: &ExpressionMatrix, kind: ValueKind, op: &str) -> Result<()> {
    if m.value_kind() != kind {
        return Err(PearlError::InvalidValue(format!(
            "{op} expects {kind:?} values, got {:?}",
            m.value_kind()
        )));
    }
    Ok(())
}

/// Keeps genes detected (nonzero) in at least `min_spots` spots.
pub fn filter_genes(m: &ExpressionMatrix, min_spots: usize) -> Result<ExpressionMatrix> {
    require_kind(m, ValueKind::RawCounts, "filter_genes")?;
    let keep: Vec<usize> = m
        .detection_counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= min_spots)
        .map(|(g, _)| g)
        .collect();
    m.select_genes(&keep)
}

/// Scales each spot to `target_sum` total counts, then applies `ln(1 + v)`.
/// Spots with zero total stay all-zero.
pub fn normalize_and_log(m: &ExpressionMatrix, target_sum: f64) -> Result<ExpressionMatrix> {
    require_kind(m, ValueKind::RawCounts, "normalize_and_log")?;
    if !(target_sum > 0.0 && target_sum.is_finite()) {
        return Err(PearlError::InvalidValue("target_sum must be positive".into()));
    }
    let mut triplets = Vec::with_capacity(m.nnz());
    for s in 0..m.n_spots() {
        let (cols, vals) = m.row(s);
        let total: f64 = vals.iter().sum();
        if total == 0.0 {
            continue;
        }
        for (&g, &v) in cols.iter().zip(vals) {
            triplets.push((s, g, (v * target_sum / total).ln_1p()));
        }
    }
    ExpressionMatrix::from_triplets(
        m.spot_ids().to_vec(),
        m.gene_ids().to_vec(),
        triplets,
        ValueKind::NormalizedLog,
    )
}

/// For each spot, the indices of itself and its grid neighbours (Chebyshev
/// distance 1 on the same slide), self first.
pub fn neighborhoods(m: &ExpressionMatrix, geom: &[SpotGeometry]) -> Result<Vec<Vec<usize>>> {
    let by_id: HashMap<&str, &SpotGeometry> =
        geom.iter().map(|g| (g.spot_id.as_str(), g)).collect();
    let mut cell: HashMap<(&str, i64, i64), usize> = HashMap::with_capacity(m.n_spots());
    let mut pos = Vec::with_capacity(m.n_spots());
    for (s, id) in m.spot_ids().iter().enumerate() {
        let g = by_id
            .get(id.as_str())
            .ok_or_else(|| PearlError::InvalidValue(format!("spot `{id}` has no coordinates")))?;
        let key = (g.slide_id.as_str(), g.array_row, g.array_col);
        if cell.insert(key, s).is_some() {
            return Err(PearlError::Duplicate {
                kind: "grid position",
                id: format!("{}:{},{}", g.slide_id, g.array_row, g.array_col),
            });
        }
        pos.push(key);
    }
    Ok(pos
        .iter()
        .enumerate()
        .map(|(s, &(slide, r, c))| {
            let mut nb = vec![s];
            for dr in -1..=1 {
                for dc in -1..=1 {
                    if (dr, dc) == (0, 0) {
                        continue;
                    }
                    if let Some(&j) = cell.get(&(slide, r + dr, c + dc)) {
                        nb.push(j);
                    }
                }
            }
            nb
        })
        .collect())
}

/// Replaces each spot's profile by the mean over its grid neighbourhood.
/// Results are clamped to the neighbourhood's range so that rounding never
/// moves a value outside the inputs it averages.
pub fn smooth_8neighbor(m: &ExpressionMatrix, geom: &[SpotGeometry]) -> Result<ExpressionMatrix> {
    require_kind(m, ValueKind::NormalizedLog, "smooth_8neighbor")?;
    let hoods = neighborhoods(m, geom)?;
    let n_genes = m.n_genes();
    let rows: Vec<Vec<(usize, f64)>> = hoods
        .par_iter()
        .map(|nb| {
            // Per gene: (stored count, sum, min, max) over the neighbourhood.
            let mut acc: HashMap<usize, (usize, f64, f64, f64)> = HashMap::new();
            for &j in nb {
                let (cols, vals) = m.row(j);
                for (&g, &v) in cols.iter().zip(vals) {
                    let e = acc.entry(g).or_insert((0, 0.0, v, v));
                    e.0 += 1;
                    e.1 += v;
                    e.2 = e.2.min(v);
                    e.3 = e.3.max(v);
                }
            }
            let k = nb.len();
            let mut out: Vec<(usize, f64)> = acc
                .into_iter()
                .map(|(g, (cnt, sum, mut lo, mut hi))| {
                    if cnt < k {
                        lo = lo.min(0.0);
                        hi = hi.max(0.0);
                    }
                    (g, (sum / k as f64).clamp(lo, hi))
                })
                .collect();
            out.sort_unstable_by_key(|e| e.0);
            debug_assert!(out.iter().all(|e| e.0 < n_genes));
            out
        })
        .collect();
    let triplets = rows
        .into_iter()
        .enumerate()
        .flat_map(|(s, r)| r.into_iter().map(move |(g, v)| (s, g, v)))
        .collect();
    ExpressionMatrix::from_triplets(
        m.spot_ids().to_vec(),
        m.gene_ids().to_vec(),
        triplets,
        m.value_kind(),
    )
}

/// Sample variance (n - 1 denominator) of every gene across spots,
/// counting unstored entries as zeros. Zero for fewer than two spots.
pub fn gene_variances(m: &ExpressionMatrix) -> Vec<f64> {
    let n = m.n_spots();
    let g = m.n_genes();
    if n < 2 {
        return vec![0.0; g];
    }
    let mut sum = vec![0.0; g];
    let mut cnt = vec![0usize; g];
    for s in 0..n {
        let (cols, vals) = m.row(s);
        for (&j, &v) in cols.iter().zip(vals) {
            sum[j] += v;
            cnt[j] += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut ss = vec![0.0; g];
    for s in 0..n {
        let (cols, vals) = m.row(s);
        for (&j, &v) in cols.iter().zip(vals) {
            ss[j] += (v - mean[j]).powi(2);
        }
    }
    (0..g)
        .map(|j| (ss[j] + (n - cnt[j]) as f64 * mean[j] * mean[j]) / (n - 1) as f64)
        .collect()
}

/// Keeps the `top` genes of largest variance, ordered by descending
/// variance with ties broken by gene id.
pub fn select_hvg(m: &ExpressionMatrix, top: usize) -> Result<(ExpressionMatrix, Vec<String>)> {
    require_kind(m, ValueKind::NormalizedLog, "select_hvg")?;
    if top > m.n_genes() {
        return Err(PearlError::InvalidValue(format!(
            "requested {top} highly variable genes but only {} genes remain",
            m.n_genes()
        )));
    }
    let var = gene_variances(m);
    let ids = m.gene_ids();
    let mut order: Vec<usize> = (0..m.n_genes()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then_with(|| ids[a].cmp(&ids[b])));
    order.truncate(top);
    let names = order.iter().map(|&g| ids[g].clone()).collect();
    Ok((m.select_genes(&order)?, names))
}

#[derive(Clone, Debug)]
pub struct PreprocessOutput {
    /// Normalized (and smoothed, if enabled) matrix over all filtered genes;
    /// pathway scoring runs on this.
    pub normalized: ExpressionMatrix,
    /// `normalized` restricted to the selected genes.
    pub hvg: ExpressionMatrix,
    pub hvg_genes: Vec<String>,
}

pub fn run_pipeline(
    raw: &ExpressionMatrix,
    geom: &[SpotGeometry],
    config: &PreprocessConfig,
) -> Result<PreprocessOutput> {
    config.validate()?;
    let filtered = filter_genes(raw, config.min_spots_per_gene)?;
    log::info!(
        "preprocess: kept {} of {} genes detected in >= {} spots",
        filtered.n_genes(),
        raw.n_genes(),
        config.min_spots_per_gene
    );
    let mut normalized = normalize_and_log(&filtered, config.target_sum)?;
    if config.smoothing_enabled {
        normalized = smooth_8neighbor(&normalized, geom)?;
    }
    let (hvg, hvg_genes) = select_hvg(&normalized, config.top_hvg)?;
    Ok(PreprocessOutput {
        normalized,
        hvg,
        hvg_genes,
    })
}
