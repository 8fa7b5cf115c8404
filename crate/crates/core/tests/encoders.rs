use pearl_autodiff::Tensor;
use pearl_core::data_io::{checkpoint_paths, CheckpointManifest};
use pearl_core::encoders::{CoordNormalizer, ModelConfig, PearlModel};
use pearl_core::PearlError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn to_m(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn add_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| r.iter().zip(&b[0]).map(|(x, y)| x + y).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn map(a: &M, f: impl Fn(f64) -> f64) -> M {
    a.iter().map(|r| r.iter().map(|&x| f(x)).collect()).collect()
}

fn softmax(a: &M) -> M {
    a.iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn layer_norm(a: &M, gain: &M, bias: &M) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + 1e-5).sqrt() * gain[0][j] + bias[0][j])
                .collect()
        })
        .collect()
}

fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn p(model: &PearlModel, name: &str) -> M {
    let (_, t) = model.store.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("{name}"));
    to_m(t)
}

fn mlp(model: &PearlModel, name: &str, x: &M) -> M {
    let h = add_bias(&mm(x, &p(model, &format!("{name}.0.weight"))), &p(model, &format!("{name}.0.bias")));
    let h = map(&h, gelu);
    add_bias(&mm(&h, &p(model, &format!("{name}.1.weight"))), &p(model, &format!("{name}.1.bias")))
}

/// Pathway encoder written out step by step from named parameters.
fn oracle_encode(model: &PearlModel, x: &M, c: &M) -> M {
    let cfg = &model.config;
    let mut h = add(x, &mlp(model, "phi", c));
    for l in 0..cfg.layers {
        let pre = format!("encoder.{l}");
        let mut heads: Vec<M> = Vec::new();
        for k in 0..cfg.heads {
            let q = mm(&h, &p(model, &format!("{pre}.attn.q.{k}")));
            let kk = mm(&h, &p(model, &format!("{pre}.attn.k.{k}")));
            let v = mm(&h, &p(model, &format!("{pre}.attn.v.{k}")));
            let s = map(&mm(&q, &transpose(&kk)), |z| z / (cfg.d_k as f64).sqrt());
            heads.push(mm(&softmax(&s), &v));
        }
        let cat: M = (0..h.len()).map(|i| heads.iter().flat_map(|hd| hd[i].clone()).collect()).collect();
        let o = add_bias(&mm(&cat, &p(model, &format!("{pre}.attn.out.weight"))), &p(model, &format!("{pre}.attn.out.bias")));
        let h1 = layer_norm(&add(&h, &o), &p(model, &format!("{pre}.ln1.gain")), &p(model, &format!("{pre}.ln1.bias")));
        let f = mlp(model, &format!("{pre}.ffn"), &h1);
        h = layer_norm(&add(&h1, &f), &p(model, &format!("{pre}.ln2.gain")), &p(model, &format!("{pre}.ln2.bias")));
    }
    mlp(model, "path_proj", &h)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        heads: 1,
        d_k: 2,
        embed_dim: 6,
        proj_hidden: 5,
        pos_hidden: 3,
        head_hidden: 4,
        ..ModelConfig::new(4, 3, 5)
    }
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &Tensor, b: &M, tol: f64) {
    for (r, row) in b.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((a.get(r, c) - v).abs() <= tol, "[{r},{c}] {} vs {v}", a.get(r, c));
        }
    }
}

#[test]
fn pathway_encoder_matches_hand_trace() {
    let model = PearlModel::new(small_config(), 3).unwrap();
    let x = random(5, 4, 1);
    let c = random(5, 2, 2);
    let got = model.forward_pathways(&x, &c).unwrap();
    assert_eq!(got.shape(), [5, 6]);
    assert_close(&got, &oracle_encode(&model, &to_m(&x), &to_m(&c)), 1e-5);
}

#[test]
fn default_architecture_matches_hand_trace() {
    let model = PearlModel::new(ModelConfig::new(4, 3, 5), 9).unwrap();
    let x = random(3, 4, 4);
    let c = random(3, 2, 5);
    let got = model.forward_pathways(&x, &c).unwrap();
    assert_eq!(got.shape(), [3, 256]);
    assert_close(&got, &oracle_encode(&model, &to_m(&x), &to_m(&c)), 1e-5);
}

#[test]
fn single_token_attention_is_value_path() {
    let model = PearlModel::new(small_config(), 4).unwrap();
    let x = random(1, 4, 6);
    let c = random(1, 2, 7);
    // with one token the attention weight is 1, so MHSA reduces to V W_O
    let h0 = add(&to_m(&x), &mlp(&model, "phi", &to_m(&c)));
    let v = mm(&h0, &p(&model, "encoder.0.attn.v.0"));
    let o = add_bias(&mm(&v, &p(&model, "encoder.0.attn.out.weight")), &p(&model, "encoder.0.attn.out.bias"));
    let h1 = layer_norm(&add(&h0, &o), &p(&model, "encoder.0.ln1.gain"), &p(&model, "encoder.0.ln1.bias"));
    let f = mlp(&model, "encoder.0.ffn", &h1);
    let mut h = layer_norm(&add(&h1, &f), &p(&model, "encoder.0.ln2.gain"), &p(&model, "encoder.0.ln2.bias"));
    let v = mm(&h, &p(&model, "encoder.1.attn.v.0"));
    let o = add_bias(&mm(&v, &p(&model, "encoder.1.attn.out.weight")), &p(&model, "encoder.1.attn.out.bias"));
    let h1 = layer_norm(&add(&h, &o), &p(&model, "encoder.1.ln1.gain"), &p(&model, "encoder.1.ln1.bias"));
    let f = mlp(&model, "encoder.1.ffn", &h1);
    h = layer_norm(&add(&h1, &f), &p(&model, "encoder.1.ln2.gain"), &p(&model, "encoder.1.ln2.bias"));
    let want = mlp(&model, "path_proj", &h);
    assert_close(&model.forward_pathways(&x, &c).unwrap(), &want, 1e-12);
}

#[test]
fn heads_match_hand_trace() {
    let model = PearlModel::new(small_config(), 5).unwrap();
    let h = random(2, 6, 8);
    let (yp, yg) = model.forward_heads(&h).unwrap();
    assert_close(&yp, &mlp(&model, "f_path", &to_m(&h)), 1e-6);
    assert_close(&yg, &mlp(&model, "f_gene", &to_m(&h)), 1e-6);
    let f = random(1, 5, 9);
    let (a, b) = model.predict(&f).unwrap();
    assert_eq!((a.shape(), b.shape()), ([1, 4], [1, 3]));
    assert_eq!(model.predict(&f).unwrap(), (a, b));
}

#[test]
fn image_projection_zero_weights_give_zero() {
    let mut model = PearlModel::new(small_config(), 6).unwrap();
    for id in model.image_proj.params() {
        model.store.get_mut(id).fill(0.0);
    }
    let out = model.forward_images(&random(3, 5, 1)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    assert!(model.forward_images(&random(3, 4, 1)).is_err());
}

#[test]
fn image_rows_are_independent() {
    let model = PearlModel::new(small_config(), 7).unwrap();
    let f = random(4, 5, 2);
    let base = model.forward_images(&f).unwrap();
    let mut g = f.clone();
    g.set(2, 1, 5.0);
    let changed = model.forward_images(&g).unwrap();
    for r in 0..4 {
        assert_eq!(base.row(r) == changed.row(r), r != 2);
    }
    let dup = Tensor::from_rows(&[f.row(0).to_vec(), f.row(0).to_vec()]).unwrap();
    let out = model.forward_images(&dup).unwrap();
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn coordinate_translation_does_not_change_outputs() {
    let model = PearlModel::new(small_config(), 8).unwrap();
    let raw: Vec<[f64; 2]> = (0..6).map(|i| [i as f64 * 3.0, (i * i) as f64]).collect();
    let shifted: Vec<[f64; 2]> = raw.iter().map(|c| [c[0] + 250.0, c[1] - 1000.0]).collect();
    let a = CoordNormalizer::fit(&raw).unwrap();
    let b = CoordNormalizer::fit(&shifted).unwrap();
    let ca = a.transform(&raw);
    let cb = b.transform(&shifted);
    assert!(ca.max_abs_diff(&cb) < 1e-12);
    let x = random(6, 4, 3);
    let ya = model.forward_pathways(&x, &ca).unwrap();
    let yb = model.forward_pathways(&x, &cb).unwrap();
    assert!(ya.max_abs_diff(&yb) < 1e-9);
}

#[test]
fn temperature_is_clamped() {
    let mut model = PearlModel::new(small_config(), 1).unwrap();
    model.store.get_mut(model.log_temperature).data_mut()[0] = -50.0;
    model.clamp_temperature();
    assert!((model.temperature() - 1e-3).abs() < 1e-9);
    model.store.get_mut(model.log_temperature).data_mut()[0] = 50.0;
    model.clamp_temperature();
    assert!((model.temperature() - 100.0).abs() < 1e-4);
    assert!(model.temperature() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = PearlModel::new(small_config(), 11).unwrap();
    model.metadata.coord_normalizer = Some(CoordNormalizer::fit(&[[0.0, 1.0], [2.0, 5.0]]).unwrap());
    model.metadata.pathway_names = vec!["a".into(); 4];
    let base = dir.path().join("model");
    model.save(&base).unwrap();
    let back = PearlModel::load(&base).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.metadata, model.metadata);
    for (a, b) in back.store.tensors().iter().zip(model.store.tensors()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn checkpoint_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("m");
    let model = PearlModel::new(ModelConfig { d_k: 32, ..small_config() }, 1).unwrap();
    model.save(&base).unwrap();
    let (mpath, bpath) = checkpoint_paths(&base);
    let original: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();

    // hyperparameters claim d_k = 64 but parameters were saved for 32
    let mut m = original.clone();
    m.hyperparameters["d_k"] = serde_json::json!(64);
    std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
    let err = PearlModel::load(&base).unwrap_err();
    assert!(matches!(err, PearlError::CheckpointShape(_)), "{err}");

    let mut m = original.clone();
    m.format_version = 2;
    std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(PearlModel::load(&base).unwrap_err(), PearlError::CheckpointVersion { .. }));

    std::fs::write(&mpath, serde_json::to_string(&original).unwrap()).unwrap();
    let blob = std::fs::read(&bpath).unwrap();
    std::fs::write(&bpath, &blob[..blob.len() - 4]).unwrap();
    assert!(matches!(PearlModel::load(&base).unwrap_err(), PearlError::CheckpointTruncated { .. }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn token_permutation_permutes_rows(seed in any::<u64>(), n in 2usize..6) {
        let model = PearlModel::new(small_config(), seed).unwrap();
        let x = random(n, 4, seed ^ 1);
        let c = random(n, 2, seed ^ 2);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let base = model.forward_pathways(&x, &c).unwrap();
        let permuted = model.forward_pathways(&x.select_rows(&perm), &c.select_rows(&perm)).unwrap();
        prop_assert!(permuted.max_abs_diff(&base.select_rows(&perm)) < 1e-12);
    }
}
