//! Seeded synthetic spatial datasets with planted pathway structure, and
//! survival cohorts with a planted risk score.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use pearl_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data_io::{
    DenseTable, ExpressionMatrix, GeneSet, GeneSetCollection, PatchFeatureMatrix, SpotGeometry,
    SurvivalRecord, SurvivalTable, ValueKind,
};
use crate::error::{PearlError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_slides: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub n_genes: usize,
    pub n_pathways: usize,
    pub genes_per_pathway: usize,
    /// Standard deviation of the log-normal noise on expression rates.
    pub noise_sigma: f64,
    /// Coupling between latent activity and image features, in `[0, 1]`.
    pub coupling: f64,
    pub image_dim: usize,
    /// Mean count of a gene at zero pathway activity.
    pub base_count: f64,
    /// Log-fold change per unit of pathway activity.
    pub effect: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_slides: 56,
            grid_rows: 6,
            grid_cols: 6,
            n_genes: 200,
            n_pathways: 20,
            genes_per_pathway: 8,
            noise_sigma: 0.1,
            coupling: 0.95,
            image_dim: 32,
            base_count: 8.0,
            effect: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn n_spots(&self) -> usize {
        self.n_slides * self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(PearlError::Config("coupling must lie in [0, 1]".into()));
        }
        if self.n_genes < self.n_pathways * self.genes_per_pathway {
            return Err(PearlError::Config(format!(
                "{} genes cannot hold {} disjoint pathways of {} genes",
                self.n_genes, self.n_pathways, self.genes_per_pathway
            )));
        }
        if self.genes_per_pathway == 0 || self.n_pathways == 0 || self.image_dim == 0 {
            return Err(PearlError::Config("pathway and feature sizes must be positive".into()));
        }
        if self.n_slides == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(PearlError::Config("grid must be non-empty".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.base_count > 0.0 && self.effect.is_finite()) {
            return Err(PearlError::Config("invalid noise, base count or effect".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub expression: ExpressionMatrix,
    pub geometry: Vec<SpotGeometry>,
    pub gene_sets: GeneSetCollection,
    pub features: PatchFeatureMatrix,
    /// Planted activity per spot and pathway, standardized per slide.
    pub latent: Tensor,
}

fn gene_id(j: usize) -> String {
    format!("GENE{j:04}")
}

/// A smooth field on the grid: a sum of three plane cosines with
/// wavelengths between 8 and 20 spots, standardized to mean 0, sd 1.
fn cosine_field(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let wavelength = rng.random_range(8.0..20.0);
            let angle = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            let k = 2.0 * PI / wavelength;
            (k * angle.cos(), k * angle.sin(), phase, amp)
        })
        .collect();
    let mut v: Vec<f64> = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            waves
                .iter()
                .map(|&(kr, kc, ph, a)| a * (kr * r + kc * c + ph).cos())
                .sum()
        })
        .collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    v
}

pub fn gen_st_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (p, g, d) = (cfg.n_pathways, cfg.n_genes, cfg.image_dim);
    let per_slide = cfg.grid_rows * cfg.grid_cols;
    let n = cfg.n_spots();

    let sets = (0..p)
        .map(|k| GeneSet {
            name: format!("PATHWAY_{k:02}"),
            description: "synthetic".into(),
            genes: (k * cfg.genes_per_pathway..(k + 1) * cfg.genes_per_pathway)
                .map(gene_id)
                .collect::<BTreeSet<_>>(),
        })
        .collect();
    let gene_sets = GeneSetCollection::new(sets)?;

    let base: Vec<f64> = (0..g)
        .map(|_| (cfg.base_count * rng.random_range(0.5..2.0)).ln())
        .collect();
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let map: Vec<f64> = (0..p * d)
        .map(|_| unit.sample(&mut rng) / (p as f64).sqrt())
        .collect();

    let mut latent = vec![0.0; n * p];
    let mut geometry = Vec::with_capacity(n);
    for s in 0..cfg.n_slides {
        let fields: Vec<Vec<f64>> = (0..p)
            .map(|_| cosine_field(cfg.grid_rows, cfg.grid_cols, &mut rng))
            .collect();
        for i in 0..per_slide {
            let spot = s * per_slide + i;
            for k in 0..p {
                latent[spot * p + k] = fields[k][i];
            }
            let (r, c) = (i / cfg.grid_cols, i % cfg.grid_cols);
            geometry.push(SpotGeometry {
                spot_id: format!("slide{s}_r{r:02}_c{c:02}"),
                slide_id: format!("slide{s}"),
                x: c as f64 * 100.0,
                y: r as f64 * 100.0,
                array_row: r as i64,
                array_col: c as i64,
            });
        }
    }

    let mut triplets = Vec::new();
    let mut features = Vec::with_capacity(n * d);
    for spot in 0..n {
        let a = &latent[spot * p..(spot + 1) * p];
        for j in 0..g {
            let pathway = j / cfg.genes_per_pathway;
            let mut log_rate = base[j];
            if pathway < p {
                log_rate += cfg.effect * a[pathway];
            }
            if cfg.noise_sigma > 0.0 {
                log_rate += cfg.noise_sigma * unit.sample(&mut rng);
            }
            let count = Poisson::new(log_rate.exp())
                .map_err(|e| PearlError::InvalidValue(format!("poisson rate: {e}")))?
                .sample(&mut rng);
            if count > 0.0 {
                triplets.push((spot, j, count));
            }
        }
        for f in 0..d {
            let signal: f64 = (0..p).map(|k| a[k] * map[k * d + f]).sum();
            let noise = if cfg.coupling < 1.0 { unit.sample(&mut rng) } else { 0.0 };
            features.push(cfg.coupling * signal + (1.0 - cfg.coupling) * noise);
        }
    }
    let spot_ids: Vec<String> = geometry.iter().map(|g| g.spot_id.clone()).collect();
    let expression = ExpressionMatrix::from_triplets(
        spot_ids.clone(),
        (0..g).map(gene_id).collect(),
        triplets,
        ValueKind::RawCounts,
    )?;
    let features = PatchFeatureMatrix::new(spot_ids, Tensor::new(n, d, features)?)?;
    Ok(SynthDataset {
        expression,
        geometry,
        gene_sets,
        features,
        latent: Tensor::new(n, p, latent)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    pub seed: u64,
    pub n_subjects: usize,
    /// Target fraction of censored subjects, in `[0, 1)`.
    pub censor_rate: f64,
    pub spots_per_subject: usize,
    pub embed_dim: usize,
    /// Standard deviation of the planted log-hazard.
    pub risk_sd: f64,
    /// Standard deviation of per-spot embedding noise.
    pub embed_noise: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subjects: 200,
            censor_rate: 0.3,
            spots_per_subject: 12,
            embed_dim: 256,
            risk_sd: 5.0,
            embed_noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalCohort {
    pub table: SurvivalTable,
    /// Per-spot embeddings; row ids are spot ids.
    pub embeddings: DenseTable,
    /// Slide of each embedding row.
    pub spot_slides: Vec<String>,
    pub planted_risk: Vec<f64>,
}

/// Subjects with one slide each. Spot embeddings carry the planted risk
/// along a fixed direction; event times are exponential with rate
/// `exp(risk)`, censored by independent exponential times.
pub fn gen_survival_cohort(cfg: &CohortConfig) -> Result<SurvivalCohort> {
    if !(0.0..1.0).contains(&cfg.censor_rate) {
        return Err(PearlError::Config("censor_rate must lie in [0, 1)".into()));
    }
    if cfg.n_subjects < 2 || cfg.spots_per_subject == 0 || cfg.embed_dim == 0 {
        return Err(PearlError::Config("cohort needs >= 2 subjects with spots".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut direction: Vec<f64> = (0..cfg.embed_dim).map(|_| unit.sample(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let risk: Vec<f64> = (0..cfg.n_subjects)
        .map(|_| cfg.risk_sd * unit.sample(&mut rng))
        .collect();
    let mut sorted = risk.clone();
    sorted.sort_by(f64::total_cmp);
    let median_rate = sorted[sorted.len() / 2].exp();
    let censor = (cfg.censor_rate > 0.0).then(|| {
        Exp::new(cfg.censor_rate / (1.0 - cfg.censor_rate) * median_rate).expect("positive rate")
    });

    let mut rows = Vec::with_capacity(cfg.n_subjects);
    let mut spot_ids = Vec::new();
    let mut spot_slides = Vec::new();
    let mut values = Vec::new();
    for (i, &r) in risk.iter().enumerate() {
        let t = Exp::new(r.exp()).expect("positive rate").sample(&mut rng);
        let (time, event) = match &censor {
            Some(c) => {
                let ct = c.sample(&mut rng);
                if ct < t {
                    (ct, false)
                } else {
                    (t, true)
                }
            }
            None => (t, true),
        };
        let slide = format!("subject{i:04}_slide");
        for m in 0..cfg.spots_per_subject {
            spot_ids.push(format!("subject{i:04}_spot{m:03}"));
            spot_slides.push(slide.clone());
            let scale = r / cfg.risk_sd;
            values.extend(
                direction
                    .iter()
                    .map(|&u| scale * u + cfg.embed_noise * unit.sample(&mut rng)),
            );
        }
        rows.push(SurvivalRecord {
            subject_id: format!("subject{i:04}"),
            time: time.max(f64::MIN_POSITIVE),
            event,
            slide_ids: vec![slide],
        });
    }
    let cols = (0..cfg.embed_dim).map(|k| format!("e{k}")).collect();
    Ok(SurvivalCohort {
        table: SurvivalTable { rows },
        embeddings: DenseTable::new(spot_ids, cols, values)?,
        spot_slides,
        planted_risk: risk,
    })
}
