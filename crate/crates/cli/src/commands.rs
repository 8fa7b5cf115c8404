use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{Context, Result};
use clap::Args;
use pearl_autodiff::Tensor;
use pearl_core::config::{DataPaths, RunConfig};
use pearl_core::cv::{report_from_folds, run_cv_fold, FoldReport};
use pearl_core::data_io::{
    read_geometry, read_survival, write_expression, write_geometry, write_gmt, write_survival,
    DenseTable, ExpressionFormat, PatchFeatureMatrix, SpotGeometry, ValueKind,
};
use pearl_core::encoders::{ModelConfig, PearlModel};
use pearl_core::gradcheck::run_suite;
use pearl_core::metrics::evaluate_expression;
use pearl_core::preprocess::{run_pipeline, PreprocessConfig};
use pearl_core::ssgsea::{score_matrix, SsgseaConfig};
use pearl_core::survival::{c_index, train_cox, Cohort, CoxHead, CoxHeadConfig, CoxTrainConfig};
use pearl_core::synthgen::{gen_st_dataset, gen_survival_cohort, CohortConfig, SynthConfig};
use pearl_core::trainer::{train_stage1, train_stage2, TrainConfig};
use serde::de::DeserializeOwned;

use crate::Common;

/// Failures that originate in the driver rather than the library.
#[derive(Debug)]
pub enum CliError {
    GradcheckFailed(Vec<String>),
    FoldProcess { fold: usize, status: String },
    Mismatch(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::GradcheckFailed(_) => "gradcheck_failed",
            CliError::FoldProcess { .. } => "fold_process",
            CliError::Mismatch(_) => "mismatch",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::GradcheckFailed(names) => write!(f, "gradient check failed for {}", names.join(", ")),
            CliError::FoldProcess { fold, status } => write!(f, "fold {fold} process failed: {status}"),
            CliError::Mismatch(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Args)]
pub struct ConfigArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Generate a survival cohort instead of a spatial dataset.
    #[arg(long)]
    pub cohort: bool,
    /// JSON file with generator parameters; unspecified fields use defaults.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Image-pathway coupling in [0, 1].
    #[arg(long)]
    pub coupling: Option<f64>,
    /// Number of slides in a spatial dataset.
    #[arg(long)]
    pub slides: Option<usize>,
    /// Number of subjects in a survival cohort.
    #[arg(long)]
    pub subjects: Option<usize>,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Normalized expression (sparse triplet TSV) from `preprocess`;
    /// recomputed from the configured inputs when absent.
    #[arg(long)]
    pub normalized: Option<PathBuf>,
}

#[derive(Args)]
pub struct HeadsArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Stage-1 checkpoint base path.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained model checkpoint base path.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Patch feature TSV.
    #[arg(long)]
    pub features: PathBuf,
    /// Also write the image embeddings.
    #[arg(long)]
    pub emit_embeddings: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Predicted values TSV (spots by targets).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth TSV covering the predicted spots and targets.
    #[arg(long)]
    pub truth: PathBuf,
    /// Prefix of the report files.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Args)]
pub struct SurvivalArgs {
    /// Spot embeddings TSV.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Survival CSV.
    #[arg(long)]
    pub survival: PathBuf,
    /// Coordinates CSV mapping spots to slides.
    #[arg(long)]
    pub coordinates: PathBuf,
    /// JSON file with training parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Args)]
pub struct SurvivalEvalArgs {
    /// Cox head checkpoint base path.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub survival: PathBuf,
    #[arg(long)]
    pub coordinates: PathBuf,
}

#[derive(Args)]
pub struct CvArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Run only this fold and write its report.
    #[arg(long, conflicts_with = "processes")]
    pub fold: Option<usize>,
    /// Run each fold in its own process, all at once.
    #[arg(long)]
    pub processes: bool,
}

fn load_config(path: &Path, common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| pearl_core::PearlError::Config(format!("{}: {e}", path.display())).into())
}

fn write_text(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    write_text(path, lines.iter().map(|l| format!("{l}\n")).collect::<String>())
}

pub fn synth(common: &Common, a: SynthArgs) -> Result<()> {
    let out = &common.out_dir;
    if a.cohort {
        let mut cfg: CohortConfig = match &a.params {
            Some(p) => read_json(p)?,
            None => CohortConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(n) = a.subjects {
            cfg.n_subjects = n;
        }
        let c = gen_survival_cohort(&cfg)?;
        let geometry = (0..c.embeddings.n_rows())
            .map(|i| SpotGeometry {
                spot_id: c.embeddings.row_ids[i].clone(),
                slide_id: c.spot_slides[i].clone(),
                x: i as f64,
                y: 0.0,
                array_row: 0,
                array_col: i as i64,
            })
            .collect::<Vec<_>>();
        write_survival(&c.table, &out.join("survival.csv"))?;
        c.embeddings.write(&out.join("embeddings.tsv"), "spot_id")?;
        write_geometry(&geometry, &out.join("coordinates.csv"))?;
        let risk = DenseTable::new(
            c.table.rows.iter().map(|r| r.subject_id.clone()).collect(),
            vec!["planted_risk".into()],
            c.planted_risk.clone(),
        )?;
        risk.write(&out.join("planted_risk.tsv"), "subject_id")?;
        log::info!("wrote a cohort of {} subjects to {}", c.table.rows.len(), out.display());
        return Ok(());
    }

    let mut cfg: SynthConfig = match &a.params {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.coupling {
        cfg.coupling = r;
    }
    if let Some(n) = a.slides {
        cfg.n_slides = n;
    }
    let ds = gen_st_dataset(&cfg)?;
    write_expression(&ds.expression, &out.join("expression.tsv"), ExpressionFormat::SparseTripletTsv)?;
    write_geometry(&ds.geometry, &out.join("coordinates.csv"))?;
    write_gmt(&ds.gene_sets, &out.join("gene_sets.gmt"))?;
    ds.features.write(&out.join("features.tsv"))?;
    let latent = DenseTable::from_tensor(
        ds.expression.spot_ids().to_vec(),
        ds.gene_sets.sets.iter().map(|s| s.name.clone()).collect(),
        &ds.latent,
    )?;
    latent.write(&out.join("latent.tsv"), "spot_id")?;

    let run = RunConfig {
        seed: cfg.seed,
        paths: DataPaths {
            expression: "expression.tsv".into(),
            expression_format: ExpressionFormat::SparseTripletTsv,
            gene_sets: "gene_sets.gmt".into(),
            coordinates: "coordinates.csv".into(),
            features: "features.tsv".into(),
        },
        preprocess: PreprocessConfig {
            min_spots_per_gene: PreprocessConfig::default().min_spots_per_gene.min(cfg.n_spots()),
            top_hvg: 100.min(cfg.n_genes),
            ..PreprocessConfig::default()
        },
        ssgsea: SsgseaConfig::default(),
        train: TrainConfig {
            seed: cfg.seed,
            ..TrainConfig::default()
        },
        model: ModelConfig::new(0, 0, 0),
    };
    write_text(&out.join("config.json"), run.to_json()? + "\n")?;
    log::info!("wrote {} spots on {} slides to {}", cfg.n_spots(), cfg.n_slides, out.display());
    Ok(())
}

pub fn preprocess(common: &Common, a: ConfigArgs) -> Result<()> {
    let cfg = load_config(&a.config, common)?;
    let inputs = cfg.read_inputs()?;
    let out = run_pipeline(&inputs.expression, &inputs.geometry, &cfg.preprocess)?;
    let dir = &common.out_dir;
    write_expression(&out.normalized, &dir.join("normalized.tsv"), ExpressionFormat::SparseTripletTsv)?;
    write_expression(&out.hvg, &dir.join("hvg.tsv"), ExpressionFormat::DenseTsv)?;
    write_lines(&dir.join("hvg_genes.txt"), &out.hvg_genes)?;
    Ok(())
}

pub fn score_pathways(common: &Common, a: ScoreArgs) -> Result<()> {
    let cfg = load_config(&a.config, common)?;
    let inputs = cfg.read_inputs()?;
    let normalized = match &a.normalized {
        Some(p) => pearl_core::data_io::parse_expression(p, ExpressionFormat::SparseTripletTsv)?
            .with_value_kind(ValueKind::NormalizedLog)?,
        None => run_pipeline(&inputs.expression, &inputs.geometry, &cfg.preprocess)?.normalized,
    };
    let scored = score_matrix(&normalized, &inputs.gene_sets, &cfg.ssgsea)?;
    scored.matrix.write(&common.out_dir.join("pathway_scores.tsv"))?;
    write_lines(&common.out_dir.join("dropped_pathways.txt"), &scored.dropped)?;
    Ok(())
}

pub fn train_contrastive(common: &Common, a: ConfigArgs) -> Result<()> {
    let cfg = load_config(&a.config, common)?;
    let data = cfg.prepare()?;
    let model_cfg = cfg
        .model
        .with_dims(data.pathway_names.len(), data.gene_names.len(), data.set.features.cols());
    let mut model = PearlModel::new(model_cfg, cfg.seed)?;
    model.metadata.pathway_names = data.pathway_names.clone();
    model.metadata.gene_names = data.gene_names.clone();
    let report = train_stage1(&mut model, &data.set, &cfg.train)?;
    model.save(&common.out_dir.join("stage1"))?;
    report.write_csv(&common.out_dir.join("stage1_curve.csv"))?;
    log::info!("stage 1 best validation loss {} at epoch {}", report.best_loss, report.best_epoch);
    Ok(())
}

pub fn train_heads(common: &Common, a: HeadsArgs) -> Result<()> {
    let cfg = load_config(&a.config, common)?;
    let data = cfg.prepare()?;
    let mut model = PearlModel::load(&a.checkpoint)?;
    let want = (data.pathway_names.len(), data.gene_names.len(), data.set.features.cols());
    let have = (model.config.n_pathways, model.config.n_genes, model.config.image_dim);
    if want != have {
        return Err(CliError::Mismatch(format!(
            "checkpoint dimensions {have:?} (pathways, genes, image) differ from the data {want:?}"
        ))
        .into());
    }
    let report = train_stage2(&mut model, &data.set, &cfg.train)?;
    model.save(&common.out_dir.join("model"))?;
    report.write_csv(&common.out_dir.join("stage2_curve.csv"))?;
    log::info!("stage 2 best validation loss {} at epoch {}", report.best_loss, report.best_epoch);
    Ok(())
}

fn names_or_default(names: &[String], n: usize, prefix: &str) -> Vec<String> {
    if names.len() == n {
        names.to_vec()
    } else {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }
}

pub fn predict(common: &Common, a: PredictArgs) -> Result<()> {
    let model = PearlModel::load(&a.checkpoint)?;
    let features = PatchFeatureMatrix::read(&a.features)?;
    let h = model.forward_images(&features.features)?;
    let (yp, yg) = model.forward_heads(&h)?;
    let ids = features.spot_ids.clone();
    let md = &model.metadata;
    let dir = &common.out_dir;
    DenseTable::from_tensor(ids.clone(), names_or_default(&md.pathway_names, yp.cols(), "pathway_"), &yp)?
        .write(&dir.join("pred_pathways.tsv"), "spot_id")?;
    DenseTable::from_tensor(ids.clone(), names_or_default(&md.gene_names, yg.cols(), "gene_"), &yg)?
        .write(&dir.join("pred_genes.tsv"), "spot_id")?;
    if a.emit_embeddings {
        let cols = (0..h.cols()).map(|i| format!("e{i}")).collect();
        DenseTable::from_tensor(ids, cols, &h)?.write(&dir.join("embeddings.tsv"), "spot_id")?;
    }
    Ok(())
}

pub fn evaluate(common: &Common, a: EvaluateArgs) -> Result<()> {
    let pred = DenseTable::read(&a.pred, "predictions")?;
    let truth = DenseTable::read(&a.truth, "ground truth")?;
    let rows = truth.select_rows_by_id(&pred.row_ids)?;
    let cols = pred
        .col_ids
        .iter()
        .map(|c| {
            truth
                .col_ids
                .iter()
                .position(|t| t == c)
                .ok_or_else(|| CliError::Mismatch(format!("target `{c}` missing from the ground truth")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let values = (0..rows.rows())
        .flat_map(|r| cols.iter().map(move |&c| (r, c)))
        .map(|(r, c)| rows.get(r, c))
        .collect();
    let aligned = Tensor::new(rows.rows(), cols.len(), values)?;
    let report = evaluate_expression(&pred.to_tensor(), &aligned, &pred.col_ids)?;
    report.write(
        &common.out_dir.join(format!("{}.json", a.name)),
        &common.out_dir.join(format!("{}_pcc.csv", a.name)),
    )?;
    Ok(())
}

fn load_cohort(embeddings: &Path, survival: &Path, coordinates: &Path) -> Result<Cohort> {
    let emb = DenseTable::read(embeddings, "embeddings")?;
    let table = read_survival(survival)?;
    let geometry = read_geometry(coordinates)?;
    let slide_of: std::collections::HashMap<&str, &str> =
        geometry.iter().map(|g| (g.spot_id.as_str(), g.slide_id.as_str())).collect();
    let spot_slides = emb
        .row_ids
        .iter()
        .map(|id| {
            slide_of
                .get(id.as_str())
                .map(|s| s.to_string())
                .ok_or_else(|| CliError::Mismatch(format!("spot `{id}` has no slide in the coordinates")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Cohort::assemble(&table, &emb, &spot_slides)?)
}

pub fn survival_train(common: &Common, a: SurvivalArgs) -> Result<()> {
    let cohort = load_cohort(&a.embeddings, &a.survival, &a.coordinates)?;
    let mut cfg: CoxTrainConfig = match &a.params {
        Some(p) => read_json(p)?,
        None => CoxTrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let dim = cohort.bags.first().map_or(0, |b| b.cols());
    let mut head = CoxHead::new(CoxHeadConfig::new(dim), cfg.seed)?;
    let curve = train_cox(&mut head, &cohort, &cfg)?;
    head.save(&common.out_dir.join("cox_head"))?;
    let csv: String = std::iter::once("epoch,loss\n".to_string())
        .chain(curve.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    write_text(&common.out_dir.join("cox_curve.csv"), csv)?;
    log::info!("final cox loss {}", curve.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

pub fn survival_eval(common: &Common, a: SurvivalEvalArgs) -> Result<()> {
    let head = CoxHead::load(&a.checkpoint)?;
    let cohort = load_cohort(&a.embeddings, &a.survival, &a.coordinates)?;
    let risks = head.predict(&cohort.bags)?;
    let ci = c_index(&risks, &cohort.times, &cohort.events)?;
    write_json(
        &common.out_dir.join("survival_eval.json"),
        &serde_json::json!({ "c_index": ci, "n_subjects": cohort.len() }),
    )?;
    let csv: String = std::iter::once("subject_id,risk\n".to_string())
        .chain(cohort.subject_ids.iter().zip(&risks).map(|(s, r)| format!("{s},{r}\n")))
        .collect();
    write_text(&common.out_dir.join("risks.csv"), csv)?;
    Ok(())
}

pub fn gradcheck(common: &Common) -> Result<()> {
    let results = run_suite(common.seed.unwrap_or(0))?;
    write_json(&common.out_dir.join("gradcheck.json"), &results)?;
    for r in &results {
        log::info!("{}: max relative error {:.3e} over {} entries", r.name, r.max_rel_error, r.n_checked);
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed).into())
    }
}

fn fold_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("fold_{i}.json"))
}

pub fn run_cv(common: &Common, a: CvArgs) -> Result<()> {
    let cfg = load_config(&a.config, common)?;
    let dir = &common.out_dir;
    if a.processes {
        return run_cv_processes(common, &a, &cfg);
    }
    let data = cfg.prepare()?;
    if let Some(i) = a.fold {
        let report = run_cv_fold(&data, a.folds, i, &cfg.model, &cfg.train, cfg.seed)?;
        return write_json(&fold_path(dir, i), &report);
    }
    let mut folds = Vec::with_capacity(a.folds);
    for i in 0..a.folds {
        let report = run_cv_fold(&data, a.folds, i, &cfg.model, &cfg.train, cfg.seed)?;
        write_json(&fold_path(dir, i), &report)?;
        folds.push(report);
    }
    write_cv_report(dir, folds)
}

fn write_cv_report(dir: &Path, folds: Vec<FoldReport>) -> Result<()> {
    let report = report_from_folds(folds);
    let a = &report.aggregate;
    log::info!(
        "pathway PCC {:.4} ± {:.4}, gene PCC {:.4} ± {:.4}",
        a.pathway_pcc.mean,
        a.pathway_pcc.std,
        a.gene_pcc.mean,
        a.gene_pcc.std
    );
    write_json(&dir.join("aggregate.json"), &report.aggregate)?;
    write_json(&dir.join("cv_report.json"), &report)
}

/// Launches one child `run-cv --fold i` per fold and aggregates their
/// reports.
fn run_cv_processes(common: &Common, a: &CvArgs, cfg: &RunConfig) -> Result<()> {
    let exe = std::env::current_exe()?;
    let dir = &common.out_dir;
    let children = (0..a.folds)
        .map(|i| {
            let mut cmd = Command::new(&exe);
            cmd.arg("run-cv")
                .arg("--config")
                .arg(&a.config)
                .arg("--folds")
                .arg(a.folds.to_string())
                .arg("--fold")
                .arg(i.to_string())
                .arg("--seed")
                .arg(cfg.seed.to_string())
                .arg("--out-dir")
                .arg(dir);
            if let Some(t) = common.threads {
                cmd.arg("--threads").arg(t.to_string());
            }
            cmd.spawn().with_context(|| format!("starting fold {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut folds = Vec::with_capacity(a.folds);
    for (i, mut child) in children.into_iter().enumerate() {
        let status = child.wait()?;
        if !status.success() {
            return Err(CliError::FoldProcess {
                fold: i,
                status: status.to_string(),
            }
            .into());
        }
        folds.push(read_json::<FoldReport>(&fold_path(dir, i))?);
    }
    write_cv_report(dir, folds)
}
