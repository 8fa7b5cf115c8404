//! End-to-end assembly of training data and slide-level cross-validation.

use std::collections::HashMap;

use pearl_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{ExpressionMatrix, GeneSetCollection, PatchFeatureMatrix, SpotGeometry};
use crate::encoders::{ModelConfig, PearlModel};
use crate::error::{PearlError, Result};
use crate::metrics::{evaluate_expression, EvalReport};
use crate::preprocess::{run_pipeline, PreprocessConfig};
use crate::ssgsea::{score_matrix, SsgseaConfig};
use crate::trainer::{retrieval_top1, train_stage1, train_stage2, TrainConfig, TrainReport, TrainingSet};

/// Preprocessed, scored and aligned data ready for training.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub set: TrainingSet,
    pub pathway_names: Vec<String>,
    pub gene_names: Vec<String>,
    pub dropped_pathways: Vec<String>,
}

/// Aligns geometry and features to the expression spots, preprocesses the
/// expression, and scores pathways on the normalized matrix.
pub fn prepare(
    raw: &ExpressionMatrix,
    geometry: &[SpotGeometry],
    sets: &GeneSetCollection,
    features: &PatchFeatureMatrix,
    pp: &PreprocessConfig,
    ss: &SsgseaConfig,
) -> Result<PreparedData> {
    let out = run_pipeline(raw, geometry, pp)?;
    let scored = score_matrix(&out.normalized, sets, ss)?;
    let geo: HashMap<&str, &SpotGeometry> = geometry.iter().map(|g| (g.spot_id.as_str(), g)).collect();
    let feat_index: HashMap<&str, usize> = features
        .spot_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let spot_ids = raw.spot_ids().to_vec();
    let mut slide_ids = Vec::with_capacity(spot_ids.len());
    let mut coords = Vec::with_capacity(spot_ids.len());
    let mut rows = Vec::with_capacity(spot_ids.len());
    for id in &spot_ids {
        let g = geo
            .get(id.as_str())
            .ok_or_else(|| PearlError::InvalidValue(format!("spot `{id}` has no coordinates")))?;
        slide_ids.push(g.slide_id.clone());
        coords.push([g.x, g.y]);
        rows.push(
            *feat_index
                .get(id.as_str())
                .ok_or_else(|| PearlError::InvalidValue(format!("spot `{id}` has no image features")))?,
        );
    }
    let genes = Tensor::new(out.hvg.n_spots(), out.hvg.n_genes(), out.hvg.to_dense())?;
    let set = TrainingSet::new(
        spot_ids,
        slide_ids,
        coords,
        scored.matrix.scores,
        features.features.select_rows(&rows),
        genes,
    )?;
    Ok(PreparedData {
        set,
        pathway_names: scored.matrix.pathway_names,
        gene_names: out.hvg_genes,
        dropped_pathways: scored.dropped,
    })
}

/// Assigns slides to `k` folds: sorted slide ids are shuffled with `seed`
/// and dealt round-robin.
pub fn slide_folds(slide_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let mut slides: Vec<String> = slide_ids.to_vec();
    slides.sort_unstable();
    slides.dedup();
    if k < 2 || k > slides.len() {
        return Err(PearlError::Config(format!(
            "{k} folds requested for {} slides; need 2 <= folds <= slides",
            slides.len()
        )));
    }
    slides.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in slides.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_slides: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub stage1: TrainReport,
    pub stage2: TrainReport,
    pub retrieval_top1: f64,
    pub pathway: EvalReport,
    pub gene: EvalReport,
}

/// Trains both stages on `train` and evaluates image-only predictions on
/// `test`.
pub fn run_fold(
    data: &PreparedData,
    train: &[usize],
    test: &[usize],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(PearlModel, FoldReport)> {
    let tr = data.set.subset(train);
    let te = data.set.subset(test);
    let cfg = model_cfg.with_dims(data.pathway_names.len(), data.gene_names.len(), data.set.features.cols());
    let mut model = PearlModel::new(cfg, seed)?;
    model.metadata.pathway_names = data.pathway_names.clone();
    model.metadata.gene_names = data.gene_names.clone();
    let stage1 = train_stage1(&mut model, &tr, train_cfg)?;
    let stage2 = train_stage2(&mut model, &tr, train_cfg)?;
    let retrieval = if te.len() >= 2 {
        retrieval_top1(&model, &te, train_cfg.batch_size, train_cfg.seed)?
    } else {
        f64::NAN
    };
    let (yp, yg) = model.predict(&te.features)?;
    let pathway = evaluate_expression(&yp, &te.scores, &data.pathway_names)?;
    let gene = evaluate_expression(&yg, &te.genes, &data.gene_names)?;
    let mut test_slides: Vec<String> = te.slide_ids.clone();
    test_slides.sort_unstable();
    test_slides.dedup();
    Ok((
        model,
        FoldReport {
            fold: 0,
            test_slides,
            n_train: tr.len(),
            n_test: te.len(),
            stage1,
            stage2,
            retrieval_top1: retrieval,
            pathway,
            gene,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub pathway_pcc: MeanStd,
    pub pathway_mse: MeanStd,
    pub pathway_mae: MeanStd,
    pub gene_pcc: MeanStd,
    pub gene_mse: MeanStd,
    pub gene_mae: MeanStd,
    pub retrieval_top1: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub aggregate: CvAggregate,
}

pub fn aggregate(folds: &[FoldReport]) -> CvAggregate {
    let col = |f: &dyn Fn(&FoldReport) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
    CvAggregate {
        pathway_pcc: col(&|r| r.pathway.mean_pcc.unwrap_or(f64::NAN)),
        pathway_mse: col(&|r| r.pathway.mse),
        pathway_mae: col(&|r| r.pathway.mae),
        gene_pcc: col(&|r| r.gene.mean_pcc.unwrap_or(f64::NAN)),
        gene_mse: col(&|r| r.gene.mse),
        gene_mae: col(&|r| r.gene.mae),
        retrieval_top1: col(&|r| r.retrieval_top1),
    }
}

/// Runs fold `i` of the slide-disjoint `k`-fold split. Fold `i` seeds its
/// model and training with `seed + i` and `train_cfg.seed + i`.
pub fn run_cv_fold(
    data: &PreparedData,
    k: usize,
    i: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<FoldReport> {
    let folds = slide_folds(&data.set.slide_ids, k, seed)?;
    let test_slides = folds
        .get(i)
        .ok_or_else(|| PearlError::Config(format!("fold {i} out of range for {k} folds")))?;
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..data.set.len()).partition(|&j| test_slides.contains(&data.set.slide_ids[j]));
    log::info!("fold {i}: {} train spots, {} test spots", train.len(), test.len());
    let fold_cfg = TrainConfig {
        seed: train_cfg.seed.wrapping_add(i as u64),
        ..train_cfg.clone()
    };
    let (_, mut report) = run_fold(data, &train, &test, model_cfg, &fold_cfg, seed.wrapping_add(i as u64))?;
    report.fold = i;
    Ok(report)
}

pub fn report_from_folds(folds: Vec<FoldReport>) -> CvReport {
    let aggregate = aggregate(&folds);
    CvReport { folds, aggregate }
}

/// Slide-disjoint k-fold cross-validation, folds run in order.
pub fn run_cv(
    data: &PreparedData,
    k: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<CvReport> {
    let reports = (0..k)
        .map(|i| run_cv_fold(data, k, i, model_cfg, train_cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_folds(reports))
}
