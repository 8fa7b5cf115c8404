//! Finite-difference checks of every differentiable operation the models
//! use, from single kernels up to the full contrastive objective of a tiny
//! model.

use pearl_autodiff::{gradcheck, Binding, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{ModelConfig, PearlModel};
use crate::error::Result;
use crate::survival::cox_loss;
use crate::trainer::contrastive_loss;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub passed: bool,
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

type LossFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> pearl_autodiff::Result<NodeId>>;

/// Reduces a matrix output to a scalar through a fixed random target.
fn probe(target: Tensor, op: impl Fn(&mut Graph, &[NodeId]) -> pearl_autodiff::Result<NodeId> + 'static) -> LossFn {
    Box::new(move |g, ids| {
        let out = op(g, ids)?;
        let t = g.input(target.clone());
        g.mse(out, t)
    })
}

/// A small model with every dimension distinct, so shape mistakes surface.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        heads: 2,
        d_k: 3,
        layers: 2,
        embed_dim: 5,
        proj_hidden: 6,
        pos_hidden: 7,
        ffn_mult: 2,
        head_hidden: 6,
        ..ModelConfig::new(4, 3, 3)
    }
}

fn model_case(name: &str, seed: u64, stage1: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = PearlModel::new(tiny_model_config(), seed)?;
    let b = 3;
    let x = random(b, 4, &mut rng);
    let c = random(b, 2, &mut rng);
    let f = random(b, 3, &mut rng);
    let yp = random(b, 4, &mut rng);
    let yg = random(b, 3, &mut rng);
    let ids = if stage1 { model.stage1_params() } else { model.stage2_params() };
    let inputs: Vec<Tensor> = ids.iter().map(|&i| model.store.get(i).clone()).collect();
    let m = model.clone();
    let run = move |g: &mut Graph, leaves: &[NodeId]| -> pearl_autodiff::Result<NodeId> {
        let constants = m.store.bind(g, |_| false);
        let mut nodes: Vec<NodeId> = m.store.ids().map(|i| constants.node(i)).collect();
        for (&id, &leaf) in ids.iter().zip(leaves) {
            nodes[id.index()] = leaf;
        }
        let bind = Binding::from_nodes(nodes);
        let to_ad = |e: crate::PearlError| pearl_autodiff::AutodiffError::InvalidArgument(e.to_string());
        let fi = g.input(f.clone());
        let hi = m.encode_images(g, &bind, fi).map_err(to_ad)?;
        if stage1 {
            let xi = g.input(x.clone());
            let ci = g.input(c.clone());
            let hp = m.encode_pathways(g, &bind, xi, ci).map_err(to_ad)?;
            contrastive_loss(g, hi, hp, bind.node(m.log_temperature)).map_err(to_ad)
        } else {
            let (p, q) = m.predict_heads(g, &bind, hi).map_err(to_ad)?;
            let tp = g.input(yp.clone());
            let tq = g.input(yg.clone());
            let lp = g.mse(p, tp)?;
            let lq = g.mse(q, tq)?;
            g.add(lp, lq)
        }
    };
    let r = gradcheck(run, &inputs, STEP)?;
    Ok(CheckResult {
        name: name.into(),
        max_rel_error: r.max_rel_error,
        n_checked: r.n_checked,
        passed: r.passes(TOLERANCE),
    })
}

/// Runs every check; the result is deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&str, LossFn, Vec<Tensor>)> = Vec::new();

    let t = random(3, 2, &mut rng);
    cases.push((
        "matmul",
        probe(t, |g, x| g.matmul(x[0], x[1])),
        vec![random(3, 4, &mut rng), random(4, 2, &mut rng)],
    ));
    let t = random(3, 5, &mut rng);
    cases.push((
        "softmax_rows",
        probe(t, |g, x| Ok(g.softmax_rows(x[0]))),
        vec![random(3, 5, &mut rng)],
    ));
    let t = random(4, 6, &mut rng);
    cases.push((
        "layer_norm",
        probe(t, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        vec![random(4, 6, &mut rng), random(1, 6, &mut rng), random(1, 6, &mut rng)],
    ));
    let t = random(3, 4, &mut rng);
    cases.push((
        "gelu",
        probe(t, |g, x| Ok(g.gelu(x[0]))),
        vec![random(3, 4, &mut rng)],
    ));
    let t = random(3, 4, &mut rng);
    cases.push((
        "l2_normalize_rows",
        probe(t, |g, x| Ok(g.l2_normalize_rows(x[0]))),
        vec![random(3, 4, &mut rng)],
    ));
    cases.push((
        "cross_entropy_diag",
        Box::new(|g, x| g.cross_entropy_diag(x[0])),
        vec![random(5, 5, &mut rng)],
    ));
    cases.push((
        "mse",
        Box::new(|g, x| g.mse(x[0], x[1])),
        vec![random(3, 4, &mut rng), random(3, 4, &mut rng)],
    ));
    cases.push((
        "contrastive_loss",
        Box::new(|g, x| {
            contrastive_loss(g, x[0], x[1], x[2])
                .map_err(|e| pearl_autodiff::AutodiffError::InvalidArgument(e.to_string()))
        }),
        vec![random(4, 6, &mut rng), random(4, 6, &mut rng), Tensor::scalar(0.07f64.ln())],
    ));
    // one tied event time and one censored subject
    let times = vec![2.0, 1.0, 2.0, 3.0, 0.5, 4.0];
    let events = vec![true, true, true, false, false, true];
    cases.push((
        "cox_loss",
        Box::new(move |g, x| {
            cox_loss(g, x[0], &times, &events)
                .map_err(|e| pearl_autodiff::AutodiffError::InvalidArgument(e.to_string()))
        }),
        vec![random(6, 1, &mut rng)],
    ));

    let mut out = Vec::new();
    for (name, f, inputs) in cases {
        let r = gradcheck(f, &inputs, STEP)?;
        out.push(CheckResult {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            n_checked: r.n_checked,
            passed: r.passes(TOLERANCE),
        });
    }
    out.push(model_case("stage1_objective", seed, true)?);
    out.push(model_case("stage2_objective", seed, false)?);
    Ok(out)
}
