//! The two-branch model: a transformer over pathway-score tokens with
//! positional encodings, an image-feature projection, a learnable
//! temperature and two prediction heads on the image embedding.

use std::path::Path;

use pearl_autodiff::{Activation, Binding, Graph, Linear, Mlp, NodeId, ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ParamSpec,
    CHECKPOINT_FORMAT_VERSION,
};
use crate::error::{PearlError, Result};

pub const MIN_TEMPERATURE: f64 = 1e-3;
pub const MAX_TEMPERATURE: f64 = 100.0;
const CHECKPOINT_KIND: &str = "pearl_model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Data dimensions; filled in from the data when left at zero in a
    /// run configuration.
    #[serde(default)]
    pub n_pathways: usize,
    #[serde(default)]
    pub n_genes: usize,
    #[serde(default)]
    pub image_dim: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(default = "defaults::d_k")]
    pub d_k: usize,
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::proj_hidden")]
    pub proj_hidden: usize,
    #[serde(default = "defaults::pos_hidden")]
    pub pos_hidden: usize,
    #[serde(default = "defaults::ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "defaults::head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "defaults::temperature")]
    pub init_temperature: f64,
    #[serde(default = "defaults::ln_eps")]
    pub layer_norm_eps: f64,
}

mod defaults {
    pub fn heads() -> usize {
        8
    }
    pub fn d_k() -> usize {
        64
    }
    pub fn layers() -> usize {
        2
    }
    pub fn embed_dim() -> usize {
        256
    }
    pub fn proj_hidden() -> usize {
        512
    }
    pub fn pos_hidden() -> usize {
        128
    }
    pub fn ffn_mult() -> usize {
        2
    }
    pub fn head_hidden() -> usize {
        512
    }
    pub fn temperature() -> f64 {
        0.07
    }
    pub fn ln_eps() -> f64 {
        1e-5
    }
}

impl ModelConfig {
    /// Default architecture for the given data dimensions.
    pub fn new(n_pathways: usize, n_genes: usize, image_dim: usize) -> Self {
        Self {
            n_pathways,
            n_genes,
            image_dim,
            heads: defaults::heads(),
            d_k: defaults::d_k(),
            layers: defaults::layers(),
            embed_dim: defaults::embed_dim(),
            proj_hidden: defaults::proj_hidden(),
            pos_hidden: defaults::pos_hidden(),
            ffn_mult: defaults::ffn_mult(),
            head_hidden: defaults::head_hidden(),
            init_temperature: defaults::temperature(),
            layer_norm_eps: defaults::ln_eps(),
        }
    }

    pub fn with_dims(&self, n_pathways: usize, n_genes: usize, image_dim: usize) -> Self {
        Self {
            n_pathways,
            n_genes,
            image_dim,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_pathways", self.n_pathways),
            ("n_genes", self.n_genes),
            ("image_dim", self.image_dim),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("embed_dim", self.embed_dim),
            ("proj_hidden", self.proj_hidden),
            ("pos_hidden", self.pos_hidden),
            ("ffn_mult", self.ffn_mult),
            ("head_hidden", self.head_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(PearlError::Config(format!("model.{name} must be positive")));
            }
        }
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.init_temperature) {
            return Err(PearlError::Config(format!(
                "model.init_temperature must lie in [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(PearlError::Config("model.layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-axis standardization of raw spot coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordNormalizer {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl CoordNormalizer {
    /// Mean and sample standard deviation (n - 1) per axis over all spots.
    pub fn fit(coords: &[[f64; 2]]) -> Result<Self> {
        let n = coords.len();
        if n < 2 {
            return Err(PearlError::InsufficientData(format!(
                "coordinate normalizer needs at least 2 spots, got {n}"
            )));
        }
        let mut mean = [0.0; 2];
        let mut std = [0.0; 2];
        for axis in 0..2 {
            let m = coords.iter().map(|c| c[axis]).sum::<f64>() / n as f64;
            let ss: f64 = coords.iter().map(|c| (c[axis] - m).powi(2)).sum();
            let s = (ss / (n - 1) as f64).sqrt();
            if !(s > 0.0 && s.is_finite()) {
                return Err(PearlError::InvalidValue(format!(
                    "coordinate axis {axis} has zero variance"
                )));
            }
            mean[axis] = m;
            std[axis] = s;
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, c: [f64; 2]) -> [f64; 2] {
        [
            (c[0] - self.mean[0]) / self.std[0],
            (c[1] - self.mean[1]) / self.std[1],
        ]
    }

    pub fn transform(&self, coords: &[[f64; 2]]) -> Tensor {
        let data = coords.iter().flat_map(|&c| self.apply(c)).collect();
        Tensor::new(coords.len(), 2, data).expect("two columns")
    }
}

/// Post-norm transformer block over spot tokens of width `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: Linear,
    pub ln1: [ParamId; 2],
    pub ffn: Mlp,
    pub ln2: [ParamId; 2],
    d_k: usize,
    eps: f64,
}

impl TransformerLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = cfg.n_pathways;
        let per_head = |kind: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            (0..cfg.heads)
                .map(|h| {
                    store.add(
                        format!("{name}.attn.{kind}.{h}"),
                        pearl_autodiff::nn::xavier_uniform(p, cfg.d_k, rng),
                    )
                })
                .collect::<Vec<_>>()
        };
        let w_q = per_head("q", store, rng);
        let w_k = per_head("k", store, rng);
        let w_v = per_head("v", store, rng);
        let w_o = Linear::new(store, &format!("{name}.attn.out"), cfg.heads * cfg.d_k, p, rng);
        let ln1 = [
            store.add(format!("{name}.ln1.gain"), Tensor::ones(1, p)),
            store.add(format!("{name}.ln1.bias"), Tensor::zeros(1, p)),
        ];
        let ffn = Mlp::new(
            store,
            &format!("{name}.ffn"),
            [p, cfg.ffn_mult * p, p],
            Activation::Gelu,
            rng,
        );
        let ln2 = [
            store.add(format!("{name}.ln2.gain"), Tensor::ones(1, p)),
            store.add(format!("{name}.ln2.bias"), Tensor::zeros(1, p)),
        ];
        Self {
            w_q,
            w_k,
            w_v,
            w_o,
            ln1,
            ffn,
            ln2,
            d_k: cfg.d_k,
            eps: cfg.layer_norm_eps,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.w_q.len());
        for h in 0..self.w_q.len() {
            let q = g.matmul(x, b.node(self.w_q[h]))?;
            let k = g.matmul(x, b.node(self.w_k[h]))?;
            let v = g.matmul(x, b.node(self.w_v[h]))?;
            let kt = g.transpose(k);
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            heads.push(g.matmul(attn, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        let mhsa = self.w_o.forward(g, b, cat)?;
        let r1 = g.add(x, mhsa)?;
        let h1 = g.layer_norm(r1, b.node(self.ln1[0]), b.node(self.ln1[1]), self.eps)?;
        let f = self.ffn.forward(g, b, h1)?;
        let r2 = g.add(h1, f)?;
        Ok(g.layer_norm(r2, b.node(self.ln2[0]), b.node(self.ln2[1]), self.eps)?)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.w_q.iter().chain(&self.w_k).chain(&self.w_v).copied().collect();
        v.extend(self.w_o.params());
        v.extend(self.ln1);
        v.extend(self.ffn.params());
        v.extend(self.ln2);
        v
    }
}

/// Information carried alongside the weights so a checkpoint is usable on
/// its own for prediction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub coord_normalizer: Option<CoordNormalizer>,
    #[serde(default)]
    pub pathway_names: Vec<String>,
    #[serde(default)]
    pub gene_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PearlModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub phi: Mlp,
    pub layers: Vec<TransformerLayer>,
    pub path_proj: Mlp,
    pub image_proj: Mlp,
    pub log_temperature: ParamId,
    pub f_path: Mlp,
    pub f_gene: Mlp,
    pub metadata: ModelMetadata,
    pub seed: u64,
}

impl PearlModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let p = c.n_pathways;
        let phi = Mlp::new(&mut store, "phi", [2, c.pos_hidden, p], Activation::Gelu, &mut rng);
        let layers = (0..c.layers)
            .map(|l| TransformerLayer::new(&mut store, &format!("encoder.{l}"), c, &mut rng))
            .collect();
        let path_proj = Mlp::new(
            &mut store,
            "path_proj",
            [p, c.proj_hidden, c.embed_dim],
            Activation::Gelu,
            &mut rng,
        );
        let image_proj = Mlp::new(
            &mut store,
            "image_proj",
            [c.image_dim, c.proj_hidden, c.embed_dim],
            Activation::Gelu,
            &mut rng,
        );
        let log_temperature = store.add(
            "log_temperature",
            Tensor::scalar(c.init_temperature.ln() as f32 as f64),
        );
        let f_path = Mlp::new(
            &mut store,
            "f_path",
            [c.embed_dim, c.head_hidden, p],
            Activation::Gelu,
            &mut rng,
        );
        let f_gene = Mlp::new(
            &mut store,
            "f_gene",
            [c.embed_dim, c.head_hidden, c.n_genes],
            Activation::Gelu,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            phi,
            layers,
            path_proj,
            image_proj,
            log_temperature,
            f_path,
            f_gene,
            metadata: ModelMetadata::default(),
            seed,
        })
    }

    /// Parameters optimized in contrastive pretraining, ascending.
    pub fn stage1_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.phi.params().to_vec();
        for l in &self.layers {
            v.extend(l.params());
        }
        v.extend(self.path_proj.params());
        v.extend(self.image_proj.params());
        v.push(self.log_temperature);
        v.sort_unstable();
        v
    }

    /// Parameters of the two prediction heads, ascending.
    pub fn stage2_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.f_path.params().to_vec();
        v.extend(self.f_gene.params());
        v.sort_unstable();
        v
    }

    pub fn temperature(&self) -> f64 {
        self.store.get(self.log_temperature).data()[0].exp()
    }

    /// Keeps the temperature within its allowed range.
    pub fn clamp_temperature(&mut self) {
        let lo = (MIN_TEMPERATURE.ln() as f32) as f64;
        let hi = (MAX_TEMPERATURE.ln() as f32) as f64;
        let t = self.store.get_mut(self.log_temperature);
        let v = t.data()[0].clamp(lo, hi);
        t.data_mut()[0] = v;
    }

    /// `H_path` for a batch of spots: `X + phi(C)` through the transformer,
    /// then the pathway projection.
    pub fn encode_pathways(
        &self,
        g: &mut Graph,
        b: &Binding,
        scores: NodeId,
        coords: NodeId,
    ) -> Result<NodeId> {
        let [n, p] = g.value(scores).shape();
        if p != self.config.n_pathways || g.value(coords).shape() != [n, 2] || n == 0 {
            return Err(PearlError::InvalidValue(format!(
                "pathway encoder expects {}-column scores and matching 2-column coordinates, got {:?} and {:?}",
                self.config.n_pathways,
                g.value(scores).shape(),
                g.value(coords).shape()
            )));
        }
        let pos = self.phi.forward(g, b, coords)?;
        let mut h = g.add(scores, pos)?;
        for layer in &self.layers {
            h = layer.forward(g, b, h)?;
        }
        Ok(self.path_proj.forward(g, b, h)?)
    }

    pub fn encode_images(&self, g: &mut Graph, b: &Binding, features: NodeId) -> Result<NodeId> {
        let d = g.value(features).cols();
        if d != self.config.image_dim {
            return Err(PearlError::InvalidValue(format!(
                "image features have {d} columns, model expects {}",
                self.config.image_dim
            )));
        }
        Ok(self.image_proj.forward(g, b, features)?)
    }

    pub fn predict_heads(
        &self,
        g: &mut Graph,
        b: &Binding,
        h_image: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let path = self.f_path.forward(g, b, h_image)?;
        let gene = self.f_gene.forward(g, b, h_image)?;
        Ok((path, gene))
    }

    fn constant_binding(&self, g: &mut Graph) -> Binding {
        self.store.bind(g, |_| false)
    }

    pub fn forward_pathways(&self, scores: &Tensor, coords_norm: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.constant_binding(&mut g);
        let x = g.input(scores.clone());
        let c = g.input(coords_norm.clone());
        let out = self.encode_pathways(&mut g, &b, x, c)?;
        Ok(g.value(out).clone())
    }

    pub fn forward_images(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.constant_binding(&mut g);
        let f = g.input(features.clone());
        let out = self.encode_images(&mut g, &b, f)?;
        Ok(g.value(out).clone())
    }

    /// Heads applied to precomputed image embeddings.
    pub fn forward_heads(&self, h_image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let b = self.constant_binding(&mut g);
        let h = g.input(h_image.clone());
        let (p, q) = self.predict_heads(&mut g, &b, h)?;
        Ok((g.value(p).clone(), g.value(q).clone()))
    }

    /// Image-only inference: `(y_path, y_gene)` from patch features.
    pub fn predict(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_heads(&self.forward_images(features)?)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.store
            .iter()
            .map(|(name, t)| ParamSpec {
                name: name.to_string(),
                shape: t.shape(),
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_FORMAT_VERSION,
                kind: CHECKPOINT_KIND.into(),
                seed: self.seed,
                hyperparameters: serde_json::to_value(&self.config)?,
                params: self.param_specs(),
                metadata: serde_json::to_value(&self.metadata)?,
            },
            tensors: self.store.tensors().to_vec(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.manifest.hyperparameters.clone())?;
        let mut model = Self::new(config, ck.manifest.seed)?;
        if model.param_specs() != ck.manifest.params {
            return Err(PearlError::CheckpointShape(
                "parameters do not match the model hyperparameters".into(),
            ));
        }
        model
            .store
            .load_values(ck.tensors)
            .map_err(|e| PearlError::CheckpointShape(e.to_string()))?;
        if !ck.manifest.metadata.is_null() {
            model.metadata = serde_json::from_value(ck.manifest.metadata)?;
        }
        Ok(model)
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, base)
    }

    pub fn load(base: &Path) -> Result<Self> {
        let ck = load_checkpoint(base, expected_specs)?;
        Self::from_checkpoint(ck)
    }
}

/// Parameter list implied by a manifest's hyperparameters.
pub fn expected_specs(manifest: &CheckpointManifest) -> Result<Vec<ParamSpec>> {
    if manifest.kind != CHECKPOINT_KIND {
        return Err(PearlError::CheckpointShape(format!(
            "checkpoint kind `{}` is not `{CHECKPOINT_KIND}`",
            manifest.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(manifest.hyperparameters.clone())
        .map_err(|e| PearlError::CheckpointShape(format!("hyperparameters: {e}")))?;
    Ok(PearlModel::new(config, 0)?.param_specs())
}
