//! Attention-pooled slide embeddings, the Cox partial likelihood and the
//! concordance index.

use std::collections::HashMap;
use std::path::Path;

use pearl_autodiff::{
    Activation, AdamW, AdamWConfig, Binding, CustomOp, Graph, Linear, Mlp, NodeId, ParamStore,
    Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, DenseTable, ParamSpec,
    SurvivalTable, CHECKPOINT_FORMAT_VERSION,
};
use crate::error::{PearlError, Result};

const CHECKPOINT_KIND: &str = "cox_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoxHeadConfig {
    pub embed_dim: usize,
    #[serde(default = "default_attn_hidden")]
    pub attn_hidden: usize,
}

fn default_attn_hidden() -> usize {
    128
}

impl CoxHeadConfig {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            attn_hidden: default_attn_hidden(),
        }
    }
}

/// Tanh attention pooling over a bag of spot embeddings followed by a
/// linear risk score.
#[derive(Clone, Debug, PartialEq)]
pub struct CoxHead {
    pub config: CoxHeadConfig,
    pub store: ParamStore,
    pub attention: Mlp,
    pub risk: Linear,
    pub seed: u64,
}

impl CoxHead {
    pub fn new(config: CoxHeadConfig, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.attn_hidden == 0 {
            return Err(PearlError::Config("cox head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let attention = Mlp::new(
            &mut store,
            "attention",
            [config.embed_dim, config.attn_hidden, 1],
            Activation::Tanh,
            &mut rng,
        );
        let risk = Linear::new(&mut store, "risk", config.embed_dim, 1, &mut rng);
        Ok(Self {
            config,
            store,
            attention,
            risk,
            seed,
        })
    }

    /// Attention-weighted mean of the rows of `spots` (`M x d`), as `1 x d`.
    pub fn pool_slide(&self, g: &mut Graph, b: &Binding, spots: NodeId) -> Result<NodeId> {
        let [m, d] = g.value(spots).shape();
        if m == 0 || d != self.config.embed_dim {
            return Err(PearlError::InvalidValue(format!(
                "bag of shape {:?}, expected at least one row of width {}",
                [m, d],
                self.config.embed_dim
            )));
        }
        let logits = self.attention.forward(g, b, spots)?;
        let lt = g.transpose(logits);
        let w = g.softmax_rows(lt);
        Ok(g.matmul(w, spots)?)
    }

    /// Risk scores for each bag, as an `n x 1` node.
    pub fn risks(&self, g: &mut Graph, b: &Binding, bags: &[Tensor]) -> Result<NodeId> {
        let pooled = bags
            .iter()
            .map(|t| {
                let x = g.input(t.clone());
                self.pool_slide(g, b, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let stacked = g.concat_rows(&pooled)?;
        Ok(self.risk.forward(g, b, stacked)?)
    }

    pub fn predict(&self, bags: &[Tensor]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| false);
        let r = self.risks(&mut g, &b, bags)?;
        Ok(g.value(r).data().to_vec())
    }

    pub fn pooled(&self, bag: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, |_| false);
        let x = g.input(bag.clone());
        let p = self.pool_slide(&mut g, &b, x)?;
        Ok(g.value(p).data().to_vec())
    }

    fn specs(&self) -> Vec<ParamSpec> {
        self.store
            .iter()
            .map(|(n, t)| ParamSpec {
                name: n.to_string(),
                shape: t.shape(),
            })
            .collect()
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let ck = Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_FORMAT_VERSION,
                kind: CHECKPOINT_KIND.into(),
                seed: self.seed,
                hyperparameters: serde_json::to_value(&self.config)?,
                params: self.specs(),
                metadata: serde_json::Value::Null,
            },
            tensors: self.store.tensors().to_vec(),
        };
        save_checkpoint(&ck, base)
    }

    pub fn load(base: &Path) -> Result<Self> {
        let ck = load_checkpoint(base, |m| {
            if m.kind != CHECKPOINT_KIND {
                return Err(PearlError::CheckpointShape(format!(
                    "checkpoint kind `{}` is not `{CHECKPOINT_KIND}`",
                    m.kind
                )));
            }
            let cfg: CoxHeadConfig = serde_json::from_value(m.hyperparameters.clone())
                .map_err(|e| PearlError::CheckpointShape(format!("hyperparameters: {e}")))?;
            Ok(CoxHead::new(cfg, 0)?.specs())
        })?;
        let cfg: CoxHeadConfig = serde_json::from_value(ck.manifest.hyperparameters)?;
        let mut head = CoxHead::new(cfg, ck.manifest.seed)?;
        head.store
            .load_values(ck.tensors)
            .map_err(|e| PearlError::CheckpointShape(e.to_string()))?;
        Ok(head)
    }
}

fn check_survival_inputs(n: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if times.len() != n || events.len() != n {
        return Err(PearlError::InvalidValue(format!(
            "{n} risks, {} times, {} events",
            times.len(),
            events.len()
        )));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(PearlError::InvalidValue("non-finite survival time".into()));
    }
    Ok(())
}

/// Negative log partial likelihood with Breslow ties, averaged over events:
/// `-(1/E) sum_{i: event} [r_i - ln sum_{j: t_j >= t_i} exp(r_j)]`.
pub fn cox_nll(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_survival_inputs(risks.len(), times, events)?;
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(PearlError::InsufficientData("cox loss needs at least one event".into()));
    }
    let shift = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for i in (0..risks.len()).filter(|&i| events[i]) {
        let s: f64 = (0..risks.len())
            .filter(|&j| times[j] >= times[i])
            .map(|j| (risks[j] - shift).exp())
            .sum();
        total += risks[i] - shift - s.ln();
    }
    Ok(-total / n_events as f64)
}

struct CoxOp {
    times: Vec<f64>,
    events: Vec<bool>,
}

impl CustomOp for CoxOp {
    fn name(&self) -> &str {
        "cox_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Tensor> {
        let x = inputs[0];
        let r = x.data();
        let n = r.len();
        let n_events = self.events.iter().filter(|&&e| e).count() as f64;
        let shift = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = r.iter().map(|v| (v - shift).exp()).collect();
        let mut grad = vec![0.0; n];
        for i in (0..n).filter(|&i| self.events[i]) {
            let risk_set: Vec<usize> = (0..n).filter(|&j| self.times[j] >= self.times[i]).collect();
            let s: f64 = risk_set.iter().map(|&j| w[j]).sum();
            grad[i] -= 1.0;
            for j in risk_set {
                grad[j] += w[j] / s;
            }
        }
        let scale = grad_output.data()[0] / n_events;
        let data = grad.into_iter().map(|v| v * scale).collect();
        vec![Tensor::new(x.rows(), x.cols(), data).expect("same shape")]
    }
}

/// [`cox_nll`] as a graph node over a risk vector (`n x 1` or `1 x n`).
pub fn cox_loss(g: &mut Graph, risks: NodeId, times: &[f64], events: &[bool]) -> Result<NodeId> {
    let value = cox_nll(g.value(risks).data(), times, events)?;
    if times.len() < 2 {
        return Err(PearlError::InsufficientData("cox loss needs at least 2 subjects".into()));
    }
    let op = CoxOp {
        times: times.to_vec(),
        events: events.to_vec(),
    };
    Ok(g.custom(&[risks], Tensor::scalar(value), Box::new(op)))
}

/// Harrell's concordance: over pairs with `t_i < t_j` and an event at `i`,
/// the fraction where `risk_i > risk_j`, counting ties as one half.
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_survival_inputs(risks.len(), times, events)?;
    let (mut score, mut pairs) = (0.0, 0u64);
    for i in (0..risks.len()).filter(|&i| events[i]) {
        for j in 0..risks.len() {
            if times[i] < times[j] {
                pairs += 1;
                if risks[i] > risks[j] {
                    score += 1.0;
                } else if risks[i] == risks[j] {
                    score += 0.5;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(PearlError::InsufficientData("no comparable pairs".into()));
    }
    Ok(score / pairs as f64)
}

/// Subjects with the spot embeddings of all their slides.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub subject_ids: Vec<String>,
    pub bags: Vec<Tensor>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl Cohort {
    /// Groups embedding rows by slide (`spot_slides[i]` is the slide of row
    /// `i`) and collects each subject's slides into one bag.
    pub fn assemble(table: &SurvivalTable, embeddings: &DenseTable, spot_slides: &[String]) -> Result<Self> {
        if spot_slides.len() != embeddings.n_rows() {
            return Err(PearlError::InvalidValue("one slide id per embedding row required".into()));
        }
        let mut by_slide: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, s) in spot_slides.iter().enumerate() {
            by_slide.entry(s.as_str()).or_default().push(i);
        }
        let full = embeddings.to_tensor();
        let mut cohort = Cohort {
            subject_ids: Vec::new(),
            bags: Vec::new(),
            times: Vec::new(),
            events: Vec::new(),
        };
        for r in &table.rows {
            let mut rows = Vec::new();
            for s in &r.slide_ids {
                rows.extend(by_slide.get(s.as_str()).into_iter().flatten().copied());
            }
            if rows.is_empty() {
                log::warn!("subject `{}` has no embedded spots; skipped", r.subject_id);
                continue;
            }
            cohort.subject_ids.push(r.subject_id.clone());
            cohort.bags.push(full.select_rows(&rows));
            cohort.times.push(r.time);
            cohort.events.push(r.event);
        }
        Ok(cohort)
    }

    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            bags: idx.iter().map(|&i| self.bags[i].clone()).collect(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoxTrainConfig {
    #[serde(default = "cox_defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "cox_defaults::lr")]
    pub lr: f64,
    #[serde(default = "cox_defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

mod cox_defaults {
    pub fn epochs() -> usize {
        200
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn weight_decay() -> f64 {
        1e-3
    }
}

impl Default for CoxTrainConfig {
    fn default() -> Self {
        Self {
            epochs: cox_defaults::epochs(),
            lr: cox_defaults::lr(),
            weight_decay: cox_defaults::weight_decay(),
            seed: 0,
        }
    }
}

/// Full-cohort gradient steps on the Cox loss; returns the loss per epoch.
pub fn train_cox(head: &mut CoxHead, cohort: &Cohort, cfg: &CoxTrainConfig) -> Result<Vec<f64>> {
    if cohort.len() < 2 {
        return Err(PearlError::InsufficientData("cox training needs at least 2 subjects".into()));
    }
    let ids: Vec<_> = head.store.ids().collect();
    let shapes: Vec<[usize; 2]> = ids.iter().map(|&i| head.store.get(i).shape()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &shapes,
    );
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let b = head.store.bind(&mut g, |_| true);
        let r = head.risks(&mut g, &b, &cohort.bags)?;
        let loss = cox_loss(&mut g, r, &cohort.times, &cohort.events)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(PearlError::NonFiniteLoss {
                stage: "cox",
                epoch,
                batch: 0,
            });
        }
        curve.push(value);
        g.backward(loss)?;
        let grads = head.store.collect_grads(&g, &b, &ids);
        let mut params = head.store.tensors_mut_for(&ids);
        opt.step(&mut params, &grads)?;
        for p in params {
            p.round_to_f32();
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_subjects_equal_risk() {
        let l = cox_nll(&[0.3, 0.3], &[1.0, 2.0], &[true, false]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(cox_nll(&[0.0, 0.0], &[1.0, 2.0], &[false, false]).is_err());
    }

    #[test]
    fn concordance_extremes() {
        let t = [1.0, 2.0, 3.0];
        let e = [true, true, true];
        assert_eq!(c_index(&[3.0, 2.0, 1.0], &t, &e).unwrap(), 1.0);
        assert_eq!(c_index(&[1.0, 1.0, 1.0], &t, &e).unwrap(), 0.5);
        assert!(c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]).is_err());
    }
}
