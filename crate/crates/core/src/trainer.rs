//! Contrastive pretraining of the two encoders and supervised training of
//! the prediction heads on frozen image embeddings.

use std::fmt::Write as _;
use std::path::Path;

use pearl_autodiff::{AdamW, AdamWConfig, Graph, NodeId, ParamId, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{CoordNormalizer, PearlModel};
use crate::error::{PearlError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
}

mod defaults {
    pub fn batch_size() -> usize {
        256
    }
    pub fn max_epochs() -> usize {
        100
    }
    pub fn patience() -> usize {
        15
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn weight_decay() -> f64 {
        1e-3
    }
    pub fn val_fraction() -> f64 {
        0.1
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: defaults::batch_size(),
            max_epochs: defaults::max_epochs(),
            patience: defaults::patience(),
            lr: defaults::lr(),
            weight_decay: defaults::weight_decay(),
            seed: 0,
            val_fraction: defaults::val_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(PearlError::Config("train.batch_size must be at least 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(PearlError::Config("train.max_epochs must be positive".into()));
        }
        if self.patience == 0 {
            return Err(PearlError::Config("train.patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(PearlError::Config("train.lr must be positive, weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(PearlError::Config("train.val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Aligned per-spot arrays for training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub spot_ids: Vec<String>,
    pub slide_ids: Vec<String>,
    /// Raw `(x, y)` positions.
    pub coords: Vec<[f64; 2]>,
    /// Pathway activity scores, spots by pathways; also the pathway target.
    pub scores: Tensor,
    pub features: Tensor,
    /// Gene expression target, spots by genes.
    pub genes: Tensor,
}

impl TrainingSet {
    pub fn new(
        spot_ids: Vec<String>,
        slide_ids: Vec<String>,
        coords: Vec<[f64; 2]>,
        scores: Tensor,
        features: Tensor,
        genes: Tensor,
    ) -> Result<Self> {
        let n = spot_ids.len();
        if slide_ids.len() != n
            || coords.len() != n
            || scores.rows() != n
            || features.rows() != n
            || genes.rows() != n
        {
            return Err(PearlError::InvalidValue(
                "training arrays disagree on the number of spots".into(),
            ));
        }
        Ok(Self {
            spot_ids,
            slide_ids,
            coords,
            scores,
            features,
            genes,
        })
    }

    pub fn len(&self) -> usize {
        self.spot_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spot_ids.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            spot_ids: idx.iter().map(|&i| self.spot_ids[i].clone()).collect(),
            slide_ids: idx.iter().map(|&i| self.slide_ids[i].clone()).collect(),
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            scores: self.scores.select_rows(idx),
            features: self.features.select_rows(idx),
            genes: self.genes.select_rows(idx),
        }
    }
}

/// Splits spot indices into `(train, validation)`, taking the same fraction
/// from every slide.
pub fn stratified_split(slide_ids: &[String], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut slides: Vec<&str> = slide_ids.iter().map(String::as_str).collect();
    slides.sort_unstable();
    slides.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in slides {
        let mut idx: Vec<usize> = (0..slide_ids.len()).filter(|&i| slide_ids[i] == s).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Shuffled training batches of exactly `b` spots; the remainder is dropped
/// unless it is the only batch.
pub fn training_batches(indices: &[usize], b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    if idx.len() < b {
        return if idx.is_empty() { Vec::new() } else { vec![idx] };
    }
    idx.chunks_exact(b).map(<[usize]>::to_vec).collect()
}

/// Consecutive evaluation chunks of size `b`; a single leftover spot joins
/// the previous chunk so every chunk has at least two.
pub fn eval_batches(indices: &[usize], b: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = indices.chunks(b).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().map_or(false, |c| c.len() == 1) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

/// Evaluation chunks over a seeded shuffle of `indices`, so spots share a
/// batch the way they do in training.
pub fn shuffled_eval_batches(indices: &[usize], b: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    eval_batches(&idx, b)
}

/// Symmetric cross-entropy over cosine similarities scaled by
/// `exp(-log_temperature)`.
pub fn contrastive_loss(
    g: &mut Graph,
    h_image: NodeId,
    h_path: NodeId,
    log_temperature: NodeId,
) -> Result<NodeId> {
    let n = g.value(h_image).rows();
    if n < 2 {
        return Err(PearlError::InsufficientData(format!(
            "contrastive loss needs at least 2 pairs, got {n}"
        )));
    }
    let a = g.l2_normalize_rows(h_image);
    let b = g.l2_normalize_rows(h_path);
    let bt = g.transpose(b);
    let sim = g.matmul(a, bt)?;
    let neg = g.scale(log_temperature, -1.0);
    let inv_t = g.exp(neg);
    let logits = g.mul_scalar(sim, inv_t)?;
    let rows = g.cross_entropy_diag(logits)?;
    let lt = g.transpose(logits);
    let cols = g.cross_entropy_diag(lt)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, 0.5))
}

/// Loss per epoch; `val_loss` is absent when no validation split is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for r in &self.curve {
            let val = r.val_loss.map_or(String::new(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, val);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| PearlError::io(path, e))
    }
}

/// One optimization problem over a subset of the model parameters.
trait Objective {
    const STAGE: &'static str;
    fn params(&self, model: &PearlModel) -> Vec<ParamId>;
    fn loss(&self, model: &PearlModel, g: &mut Graph, batch: &[usize], trainable: &[ParamId])
        -> Result<(NodeId, pearl_autodiff::Binding)>;
}

struct Contrastive<'a> {
    data: &'a TrainingSet,
    coords: Tensor,
}

impl Objective for Contrastive<'_> {
    const STAGE: &'static str = "stage1";

    fn params(&self, model: &PearlModel) -> Vec<ParamId> {
        model.stage1_params()
    }

    fn loss(
        &self,
        model: &PearlModel,
        g: &mut Graph,
        batch: &[usize],
        trainable: &[ParamId],
    ) -> Result<(NodeId, pearl_autodiff::Binding)> {
        let b = model.store.bind(g, |id| trainable.binary_search(&id).is_ok());
        let x = g.input(self.data.scores.select_rows(batch));
        let c = g.input(self.coords.select_rows(batch));
        let f = g.input(self.data.features.select_rows(batch));
        let hp = model.encode_pathways(g, &b, x, c)?;
        let hi = model.encode_images(g, &b, f)?;
        let loss = contrastive_loss(g, hi, hp, b.node(model.log_temperature))?;
        Ok((loss, b))
    }
}

struct Supervised<'a> {
    data: &'a TrainingSet,
    h_image: Tensor,
}

impl Objective for Supervised<'_> {
    const STAGE: &'static str = "stage2";

    fn params(&self, model: &PearlModel) -> Vec<ParamId> {
        model.stage2_params()
    }

    fn loss(
        &self,
        model: &PearlModel,
        g: &mut Graph,
        batch: &[usize],
        trainable: &[ParamId],
    ) -> Result<(NodeId, pearl_autodiff::Binding)> {
        let b = model.store.bind(g, |id| trainable.binary_search(&id).is_ok());
        let h = g.input(self.h_image.select_rows(batch));
        let (yp, yg) = model.predict_heads(g, &b, h)?;
        let tp = g.input(self.data.scores.select_rows(batch));
        let tg = g.input(self.data.genes.select_rows(batch));
        let lp = g.mse(yp, tp)?;
        let lg = g.mse(yg, tg)?;
        Ok((g.add(lp, lg)?, b))
    }
}

fn eval_loss<O: Objective>(obj: &O, model: &PearlModel, chunks: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for c in chunks {
        let mut g = Graph::new();
        let (loss, _) = obj.loss(model, &mut g, c, &[])?;
        total += g.value(loss).data()[0] * c.len() as f64;
        n += c.len();
    }
    Ok(total / n as f64)
}

fn fit<O: Objective>(
    obj: &O,
    model: &mut PearlModel,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    min_batch: usize,
) -> Result<TrainReport> {
    if train.len() < min_batch {
        return Err(PearlError::InsufficientData(format!(
            "{}: {} training spots, need at least {min_batch}",
            O::STAGE,
            train.len()
        )));
    }
    let val_chunks = shuffled_eval_batches(val, cfg.batch_size, cfg.seed);
    if val_chunks.iter().any(|c| c.len() < min_batch) {
        return Err(PearlError::InsufficientData(format!(
            "{}: validation split of {} spots is too small",
            O::STAGE,
            val.len()
        )));
    }
    let ids = obj.params(model);
    let shapes: Vec<[usize; 2]> = ids.iter().map(|&i| model.store.get(i).shape()).collect();
    let mut opt = AdamW::new(cfg.adamw(), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stage_salt(O::STAGE));
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let batches = training_batches(train, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::new();
            let (loss, binding) = obj.loss(model, &mut g, batch, &ids)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(PearlError::NonFiniteLoss {
                    stage: O::STAGE,
                    epoch,
                    batch: bi,
                });
            }
            total += value;
            g.backward(loss)?;
            let grads = model.store.collect_grads(&g, &binding, &ids);
            let mut params = model.store.tensors_mut_for(&ids);
            opt.step(&mut params, &grads)?;
            for p in params {
                p.round_to_f32();
            }
            model.clamp_temperature();
        }
        let train_loss = total / batches.len() as f64;
        let val_loss = if val_chunks.is_empty() {
            None
        } else {
            Some(eval_loss(obj, model, &val_chunks)?)
        };
        if let Some(v) = val_loss.filter(|v| !v.is_finite()) {
            log::error!("{}: validation loss {v} at epoch {epoch}", O::STAGE);
            return Err(PearlError::NonFiniteLoss {
                stage: O::STAGE,
                epoch,
                batch: 0,
            });
        }
        log::info!(
            "{} epoch {epoch}: train {train_loss:.6} val {}",
            O::STAGE,
            val_loss.map_or("-".into(), |v| format!("{v:.6}"))
        );
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        let monitored = val_loss.unwrap_or(train_loss);
        if best.as_ref().map_or(true, |b| monitored < b.0) {
            let snapshot = ids.iter().map(|&i| model.store.get(i).clone()).collect();
            best = Some((monitored, epoch, snapshot));
            since_best = 0;
        } else {
            since_best += 1;
            if val_loss.is_some() && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_loss, best_epoch, snapshot) = best.expect("at least one epoch");
    for (&id, t) in ids.iter().zip(snapshot) {
        *model.store.get_mut(id) = t;
    }
    Ok(TrainReport {
        stage: O::STAGE.into(),
        curve,
        best_epoch,
        best_loss,
        stopped_early,
    })
}

fn stage_salt(stage: &str) -> u64 {
    match stage {
        "stage1" => 0x5EED_0001,
        _ => 0x5EED_0002,
    }
}

/// Fits the coordinate normalizer on `data`, stores it in the model, and
/// returns normalized coordinates.
pub fn fit_normalizer(model: &mut PearlModel, data: &TrainingSet) -> Result<Tensor> {
    let norm = CoordNormalizer::fit(&data.coords)?;
    let t = norm.transform(&data.coords);
    model.metadata.coord_normalizer = Some(norm);
    Ok(t)
}

fn normalized_coords(model: &PearlModel, data: &TrainingSet) -> Result<Tensor> {
    let norm = model.metadata.coord_normalizer.as_ref().ok_or_else(|| {
        PearlError::InvalidValue("model has no fitted coordinate normalizer".into())
    })?;
    Ok(norm.transform(&data.coords))
}

/// Contrastive pretraining of the encoders, the positional MLP and the
/// temperature. The coordinate normalizer is fitted on `data`.
pub fn train_stage1(model: &mut PearlModel, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let coords = fit_normalizer(model, data)?;
    let (train, val) = stratified_split(&data.slide_ids, cfg.val_fraction, cfg.seed);
    let obj = Contrastive { data, coords };
    fit(&obj, model, &train, &val, cfg, 2)
}

/// Trains only the prediction heads on image embeddings from the frozen
/// image projection. Each head's output bias starts at the training-split
/// target mean so optimization is spent on the spatial signal.
pub fn train_stage2(model: &mut PearlModel, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.scores.cols() != model.config.n_pathways || data.genes.cols() != model.config.n_genes {
        return Err(PearlError::InvalidValue(format!(
            "targets are {}x{} pathways/genes, model predicts {}x{}",
            data.scores.cols(),
            data.genes.cols(),
            model.config.n_pathways,
            model.config.n_genes
        )));
    }
    let h_image = model.forward_images(&data.features)?;
    let (train, val) = stratified_split(&data.slide_ids, cfg.val_fraction, cfg.seed);
    if !train.is_empty() {
        *model.store.get_mut(model.f_path.output.bias) = column_means(&data.scores, &train);
        *model.store.get_mut(model.f_gene.output.bias) = column_means(&data.genes, &train);
    }
    let obj = Supervised { data, h_image };
    fit(&obj, model, &train, &val, cfg, 1)
}

/// Per-column mean over the listed rows, as a `1 x cols` row rounded to
/// parameter precision.
fn column_means(t: &Tensor, rows: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for &r in rows {
        for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    for o in out.data_mut() {
        *o /= rows.len() as f64;
    }
    out.round_to_f32();
    out
}

/// Mean stage-1 loss over shuffled evaluation chunks of `data`.
pub fn contrastive_eval_loss(model: &PearlModel, data: &TrainingSet, batch_size: usize, seed: u64) -> Result<f64> {
    let coords = normalized_coords(model, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    eval_loss(&Contrastive { data, coords }, model, &shuffled_eval_batches(&all, batch_size, seed))
}

/// Mean stage-2 loss over shuffled evaluation chunks of `data`.
pub fn supervised_eval_loss(model: &PearlModel, data: &TrainingSet, batch_size: usize, seed: u64) -> Result<f64> {
    let h_image = model.forward_images(&data.features)?;
    let all: Vec<usize> = (0..data.len()).collect();
    eval_loss(&Supervised { data, h_image }, model, &shuffled_eval_batches(&all, batch_size, seed))
}

/// Fraction of spots whose image embedding is most similar to its own
/// pathway embedding within its batch of [`shuffled_eval_batches`].
pub fn retrieval_top1(model: &PearlModel, data: &TrainingSet, batch_size: usize, seed: u64) -> Result<f64> {
    let coords = normalized_coords(model, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut hits = 0;
    for chunk in shuffled_eval_batches(&all, batch_size, seed) {
        let hp = model.forward_pathways(&data.scores.select_rows(&chunk), &coords.select_rows(&chunk))?;
        let hi = model.forward_images(&data.features.select_rows(&chunk))?;
        let mut g = Graph::new();
        let a = g.input(hi);
        let b = g.input(hp);
        let a = g.l2_normalize_rows(a);
        let b = g.l2_normalize_rows(b);
        let bt = g.transpose(b);
        let s = g.matmul(a, bt)?;
        let s = g.value(s);
        for i in 0..chunk.len() {
            let row = s.row(i);
            let arg = (0..row.len())
                .fold(0, |best, j| if row[j] > row[best] { j } else { best });
            if arg == i {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
