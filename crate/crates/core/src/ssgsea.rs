//! Single-sample pathway activity: rank-weighted running-sum enrichment
//! scores, normalized by the mean absolute score of random gene sets of the
//! same size.

use std::collections::BTreeMap;
use std::path::Path;

use pearl_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{DenseTable, ExpressionMatrix, GeneSetCollection, ValueKind};
use crate::error::{PearlError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsgseaConfig {
    pub weight_exponent: f64,
    pub null_sets: usize,
    pub rng_seed: u64,
    pub epsilon: f64,
}

impl Default for SsgseaConfig {
    fn default() -> Self {
        Self {
            weight_exponent: 0.75,
            null_sets: 100,
            rng_seed: 0,
            epsilon: 1e-12,
        }
    }
}

impl SsgseaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight_exponent.is_finite() && self.weight_exponent >= 0.0) {
            return Err(PearlError::Config("weight_exponent must be finite and >= 0".into()));
        }
        if self.null_sets == 0 {
            return Err(PearlError::Config("null_sets must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(PearlError::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Genes of one spot in descending expression order.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Gene indices, highest expression first; ties by ascending index.
    pub order: Vec<usize>,
    /// Rank weight per position: `N, N - 1, ..., 1`.
    pub weights: Vec<f64>,
    /// Rank weight per gene index.
    pub weight_of_gene: Vec<f64>,
}

pub fn rank_genes(values: &[f64]) -> Ranking {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let weights: Vec<f64> = (0..n).map(|j| (n - j) as f64).collect();
    let mut weight_of_gene = vec![0.0; n];
    for (j, &g) in order.iter().enumerate() {
        weight_of_gene[g] = weights[j];
    }
    Ranking {
        order,
        weights,
        weight_of_gene,
    }
}

/// A pathway resolved to gene indices of the matrix being scored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexedSet {
    pub name: String,
    pub members: Vec<usize>,
}

/// Running-sum enrichment score of `set` in `ranking`.
///
/// Because the weight of a gene equals its rank weight `r = N - j + 1`, the
/// running sums collapse to
/// `sum_in r^(a+1) / sum_in r^a - (N(N+1)/2 - sum_in r) / (N - n)`,
/// evaluated here with one final division.
pub fn enrichment_score(ranking: &Ranking, set: &IndexedSet, alpha: f64) -> Result<f64> {
    let n = ranking.order.len();
    let k = set.members.len();
    if k == 0 {
        return Err(PearlError::MissingPathwayGenes {
            pathway: set.name.clone(),
        });
    }
    if k >= n {
        return Err(PearlError::DegeneratePathway {
            pathway: set.name.clone(),
        });
    }
    Ok(es_unchecked(&ranking.weight_of_gene, &set.members, alpha))
}

fn es_unchecked(weight_of_gene: &[f64], members: &[usize], alpha: f64) -> f64 {
    let n = weight_of_gene.len();
    let (mut s_a, mut s_a1, mut s_r) = (0.0, 0.0, 0.0);
    for &g in members {
        let r = weight_of_gene[g];
        let ra = if alpha == 1.0 { r } else { r.powf(alpha) };
        s_a += ra;
        s_a1 += ra * r;
        s_r += r;
    }
    let n_out = (n - members.len()) as f64;
    let total = (n * (n + 1)) as f64 / 2.0;
    (s_a1 * n_out - (total - s_r) * s_a) / (s_a * n_out)
}

/// The `m` random gene sets of size `size` over `n_genes` genes. Draws come
/// from a ChaCha stream keyed by `(seed, size)`, so every pathway of the same
/// size in every spot shares them.
pub fn null_gene_sets(seed: u64, n_genes: usize, size: usize, m: usize) -> Vec<Vec<usize>> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(size as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..m)
        .map(|_| rand::seq::index::sample(&mut rng, n_genes, size).into_vec())
        .collect()
}

/// `es / max(mean |null|, eps)`.
pub fn nes_from_null(es: f64, null_es: &[f64], epsilon: f64) -> f64 {
    if es == 0.0 {
        return 0.0;
    }
    let mean = null_es.iter().map(|v| v.abs()).sum::<f64>() / null_es.len() as f64;
    es / mean.max(epsilon)
}

/// Normalized enrichment of one pathway in one spot.
pub fn nes(values: &[f64], set: &IndexedSet, config: &SsgseaConfig) -> Result<f64> {
    let ranking = rank_genes(values);
    let es = enrichment_score(&ranking, set, config.weight_exponent)?;
    let nulls = null_gene_sets(config.rng_seed, values.len(), set.members.len(), config.null_sets);
    let null_es: Vec<f64> = nulls
        .iter()
        .map(|s| es_unchecked(&ranking.weight_of_gene, s, config.weight_exponent))
        .collect();
    Ok(nes_from_null(es, &null_es, config.epsilon))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathwayScoreMatrix {
    pub spot_ids: Vec<String>,
    pub pathway_names: Vec<String>,
    /// Spots by pathways.
    pub scores: Tensor,
}

impl PathwayScoreMatrix {
    pub fn n_pathways(&self) -> usize {
        self.pathway_names.len()
    }

    pub fn to_table(&self) -> DenseTable {
        DenseTable::from_tensor(self.spot_ids.clone(), self.pathway_names.clone(), &self.scores)
            .expect("consistent dimensions")
    }

    pub fn from_table(t: DenseTable) -> Self {
        let scores = t.to_tensor();
        Self {
            spot_ids: t.row_ids,
            pathway_names: t.col_ids,
            scores,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::from_table(DenseTable::read(path, "pathway scores")?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_table().write(path, "spot_id")
    }
}

#[derive(Clone, Debug)]
pub struct ScoreOutput {
    pub matrix: PathwayScoreMatrix,
    /// Pathways with no measured genes, left out of the matrix.
    pub dropped: Vec<String>,
}

/// Scores every pathway in every spot.
///
/// Genes are processed in lexicographic id order, both for rank tie-breaking
/// and for null-set indexing, so the result does not depend on the column
/// order of `m`.
pub fn score_matrix(
    m: &ExpressionMatrix,
    sets: &GeneSetCollection,
    config: &SsgseaConfig,
) -> Result<ScoreOutput> {
    config.validate()?;
    if m.value_kind() != ValueKind::NormalizedLog {
        return Err(PearlError::InvalidValue(
            "pathway scoring expects normalized_log values".into(),
        ));
    }
    let n = m.n_genes();
    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&a, &b| m.gene_ids()[a].cmp(&m.gene_ids()[b]));
    let mut position = vec![0; n];
    for (c, &g) in canonical.iter().enumerate() {
        position[g] = c;
    }
    let by_id: std::collections::HashMap<&str, usize> = canonical
        .iter()
        .enumerate()
        .map(|(c, &g)| (m.gene_ids()[g].as_str(), c))
        .collect();

    let mut indexed = Vec::new();
    let mut dropped = Vec::new();
    for s in &sets.sets {
        let mut members: Vec<usize> = s
            .genes
            .iter()
            .filter_map(|g| by_id.get(g.as_str()).copied())
            .collect();
        members.sort_unstable();
        if members.is_empty() {
            log::warn!("pathway `{}` has no measured genes; dropped", s.name);
            dropped.push(s.name.clone());
            continue;
        }
        if members.len() >= n {
            return Err(PearlError::DegeneratePathway {
                pathway: s.name.clone(),
            });
        }
        indexed.push(IndexedSet {
            name: s.name.clone(),
            members,
        });
    }
    if indexed.is_empty() {
        return Err(PearlError::NoPathways);
    }

    let mut nulls: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for s in &indexed {
        let k = s.members.len();
        nulls
            .entry(k)
            .or_insert_with(|| null_gene_sets(config.rng_seed, n, k, config.null_sets));
    }

    let alpha = config.weight_exponent;
    let rows: Vec<Vec<f64>> = (0..m.n_spots())
        .into_par_iter()
        .map(|spot| {
            let mut values = vec![0.0; n];
            let (cols, vals) = m.row(spot);
            for (&g, &v) in cols.iter().zip(vals) {
                values[position[g]] = v;
            }
            let ranking = rank_genes(&values);
            let null_mean: BTreeMap<usize, Vec<f64>> = nulls
                .iter()
                .map(|(&k, draws)| {
                    let es = draws
                        .iter()
                        .map(|d| es_unchecked(&ranking.weight_of_gene, d, alpha))
                        .collect();
                    (k, es)
                })
                .collect();
            indexed
                .iter()
                .map(|s| {
                    let es = es_unchecked(&ranking.weight_of_gene, &s.members, alpha);
                    nes_from_null(es, &null_mean[&s.members.len()], config.epsilon)
                })
                .collect()
        })
        .collect();

    let p = indexed.len();
    let mut data = Vec::with_capacity(rows.len() * p);
    for r in rows {
        data.extend(r);
    }
    let scores = Tensor::new(m.n_spots(), p, data)?;
    if !scores.all_finite() {
        return Err(PearlError::InvalidValue("non-finite pathway score".into()));
    }
    Ok(ScoreOutput {
        matrix: PathwayScoreMatrix {
            spot_ids: m.spot_ids().to_vec(),
            pathway_names: indexed.into_iter().map(|s| s.name).collect(),
            scores,
        },
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(members: &[usize]) -> IndexedSet {
        IndexedSet {
            name: "p".into(),
            members: members.to_vec(),
        }
    }

    #[test]
    fn ranking_ties_by_index() {
        let r = rank_genes(&[5.0, 5.0]);
        assert_eq!(r.order, vec![0, 1]);
        let r = rank_genes(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(r.order, vec![0, 1, 2, 3]);
        assert_eq!(r.weights, vec![4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn two_gene_case() {
        let r = rank_genes(&[2.0, 1.0]);
        assert_eq!(enrichment_score(&r, &set(&[0]), 1.0).unwrap(), 1.0);
    }

    #[test]
    fn errors_for_empty_and_full_sets() {
        let r = rank_genes(&[2.0, 1.0]);
        assert!(matches!(
            enrichment_score(&r, &set(&[]), 1.0),
            Err(PearlError::MissingPathwayGenes { .. })
        ));
        assert!(matches!(
            enrichment_score(&r, &set(&[0, 1]), 1.0),
            Err(PearlError::DegeneratePathway { .. })
        ));
    }

    #[test]
    fn zero_es_gives_zero_nes() {
        assert_eq!(nes_from_null(0.0, &[0.0, 0.0], 1e-12), 0.0);
        assert_eq!(nes_from_null(1.0, &[0.0], 1e-12), 1e12);
    }

    #[test]
    fn null_sets_are_distinct_in_range() {
        for s in null_gene_sets(3, 10, 4, 20) {
            let mut v = s.clone();
            v.sort_unstable();
            v.dedup();
            assert_eq!(v.len(), 4);
            assert!(v.iter().all(|&g| g < 10));
        }
        assert_eq!(null_gene_sets(3, 10, 4, 5), null_gene_sets(3, 10, 4, 5));
        assert_ne!(null_gene_sets(3, 10, 4, 5), null_gene_sets(4, 10, 4, 5));
    }
}
