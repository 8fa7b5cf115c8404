use pearl_autodiff::{Graph, Tensor};
use pearl_core::encoders::{ModelConfig, PearlModel};
use pearl_core::gradcheck::tiny_model_config;
use pearl_core::trainer::{
    contrastive_loss, eval_batches, stratified_split, supervised_eval_loss, train_stage1,
    train_stage2, training_batches, TrainConfig, TrainingSet,
};
use pearl_core::PearlError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Spots on `slides` square-ish grids with random inputs and targets.
fn random_set(n: usize, slides: usize, dims: [usize; 3], seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [p, g, d] = dims;
    TrainingSet::new(
        (0..n).map(|i| format!("spot{i}")).collect(),
        (0..n).map(|i| format!("slide{}", i % slides)).collect(),
        (0..n).map(|i| [(i % 17) as f64, (i / 17) as f64]).collect(),
        random(n, p, &mut rng),
        random(n, d, &mut rng),
        random(n, g, &mut rng),
    )
    .unwrap()
}

fn loss_value(hi: &Tensor, hp: &Tensor, log_tau: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.input(hi.clone());
    let b = g.input(hp.clone());
    let t = g.input(Tensor::scalar(log_tau));
    let l = contrastive_loss(&mut g, a, b, t).unwrap();
    g.value(l).data()[0]
}

/// Symmetric InfoNCE written out with explicit loops.
fn contrastive_oracle(hi: &Tensor, hp: &Tensor, tau: f64) -> f64 {
    let n = hi.rows();
    let unit = |t: &Tensor, i: usize| {
        let r = t.row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    let s: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let a = unit(hi, i);
            (0..n)
                .map(|j| a.iter().zip(unit(hp, j)).map(|(x, y)| x * y).sum::<f64>() / tau)
                .collect()
        })
        .collect();
    let (mut rows, mut cols) = (0.0, 0.0);
    for i in 0..n {
        let lse_r = s[i].iter().map(|v| v.exp()).sum::<f64>().ln();
        let lse_c = (0..n).map(|j| s[j][i].exp()).sum::<f64>().ln();
        rows += lse_r - s[i][i];
        cols += lse_c - s[i][i];
    }
    0.5 * (rows + cols) / n as f64
}

#[test]
fn identical_embeddings_give_ln_n() {
    for n in [2, 4, 16] {
        let same = Tensor::new(n, 3, [0.3, -1.0, 2.0].repeat(n)).unwrap();
        let l = loss_value(&same, &same, 0.07f64.ln());
        assert!((l - (n as f64).ln()).abs() < 1e-6, "n={n}: {l}");
    }
}

#[test]
fn orthonormal_pairs_at_small_temperature_give_near_zero_loss() {
    let mut eye = Tensor::zeros(4, 4);
    for i in 0..4 {
        eye.set(i, i, 1.0);
    }
    assert!(loss_value(&eye, &eye, 0.01f64.ln()) < 1e-30);
}

#[test]
fn matches_oracle_and_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let hi = random(4, 6, &mut rng);
        let hp = random(4, 6, &mut rng);
        let tau: f64 = rng.random_range(0.05..1.0);
        let got = loss_value(&hi, &hp, tau.ln());
        assert!((got - contrastive_oracle(&hi, &hp, tau)).abs() < 1e-6);
        assert!((got - loss_value(&hp, &hi, tau.ln())).abs() < 1e-12);
    }
}

#[test]
fn single_row_batch_is_an_error() {
    let mut g = Graph::new();
    let a = g.input(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap());
    let t = g.input(Tensor::scalar(0.0));
    assert!(contrastive_loss(&mut g, a, a, t).is_err());
}

#[test]
fn split_and_batch_rules() {
    let slides: Vec<String> = (0..50).map(|i| format!("s{}", i % 2)).collect();
    let (train, val) = stratified_split(&slides, 0.1, 3);
    // 25 spots per slide, 2.5 rounds to 3
    assert_eq!((train.len(), val.len()), (44, 6));
    let per = |idx: &[usize], s: &str| idx.iter().filter(|&&i| slides[i] == s).count();
    assert_eq!((per(&val, "s0"), per(&val, "s1")), (3, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = training_batches(&train, 20, &mut rng);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![20, 20]);
    let solo = training_batches(&train[..7], 20, &mut rng);
    assert_eq!(solo.len(), 1);
    let idx: Vec<usize> = (0..9).collect();
    assert_eq!(eval_batches(&idx, 4).iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
    assert_eq!(eval_batches(&idx, 3).iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3]);
}

#[test]
fn first_epoch_loss_is_near_ln_batch() {
    let dims = [20, 10, 32];
    let data = random_set(600, 3, dims, 5);
    let mut model = PearlModel::new(ModelConfig::new(dims[0], dims[1], dims[2]), 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let report = train_stage1(&mut model, &data, &cfg).unwrap();
    let first = report.curve[0].train_loss;
    let ln_b = 256f64.ln();
    assert!((first - ln_b).abs() / ln_b < 0.1, "{first}");
}

#[test]
fn stage2_leaves_backbone_untouched() {
    let data = random_set(60, 2, [4, 3, 3], 7);
    let mut model = PearlModel::new(tiny_model_config(), 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 5,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    train_stage1(&mut model, &data, &cfg).unwrap();
    let before = model.clone();
    train_stage2(&mut model, &data, &cfg).unwrap();
    for id in before.stage1_params() {
        assert_eq!(before.store.get(id), model.store.get(id), "{}", model.store.name(id));
    }
    let heads_moved = model
        .stage2_params()
        .iter()
        .any(|&id| before.store.get(id) != model.store.get(id));
    assert!(heads_moved);
}

#[test]
fn constant_targets_are_learned() {
    let mut data = random_set(80, 2, [4, 3, 3], 9);
    data.scores = Tensor::new(80, 4, vec![0.7; 320]).unwrap();
    data.genes = Tensor::new(80, 3, vec![-1.25; 240]).unwrap();
    let mut model = PearlModel::new(tiny_model_config(), 4).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 50,
        patience: 50,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let report = train_stage2(&mut model, &data, &cfg).unwrap();
    assert!(report.best_loss < 1e-4, "{}", report.best_loss);
    let (yp, yg) = model.predict(&data.features).unwrap();
    assert!(yp.data().iter().all(|v| (v - 0.7).abs() < 0.02));
    assert!(yg.data().iter().all(|v| (v + 1.25).abs() < 0.02));
}

#[test]
fn supervised_loss_is_sum_of_target_mses() {
    let data = random_set(40, 2, [4, 3, 3], 11);
    let model = PearlModel::new(tiny_model_config(), 6).unwrap();
    let l = supervised_eval_loss(&model, &data, 16, 0).unwrap();
    let (yp, yg) = model.predict(&data.features).unwrap();
    let mse = |a: &Tensor, b: &Tensor| {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
    };
    let want = mse(&yp, &data.scores) + mse(&yg, &data.genes);
    assert!((l - want).abs() < 1e-12, "{l} vs {want}");
}

#[test]
fn early_stopping_restores_best_parameters() {
    let data = random_set(120, 2, [4, 3, 3], 13);
    let mut model = PearlModel::new(tiny_model_config(), 8).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        max_epochs: 200,
        patience: 3,
        lr: 0.05,
        ..TrainConfig::default()
    };
    let report = train_stage2(&mut model, &data, &cfg).unwrap();
    assert!(report.stopped_early);
    let last = report.curve.last().unwrap();
    assert_eq!(last.epoch, report.best_epoch + cfg.patience);
    assert!(last.val_loss.unwrap() >= report.best_loss);
    let (_, val) = stratified_split(&data.slide_ids, cfg.val_fraction, cfg.seed);
    let restored = supervised_eval_loss(&model, &data.subset(&val), cfg.batch_size, 0).unwrap();
    assert!((restored - report.best_loss).abs() < 1e-12, "{restored} vs {}", report.best_loss);
}

#[test]
fn non_finite_input_aborts_with_location() {
    let mut data = random_set(40, 2, [4, 3, 3], 15);
    data.genes.set(3, 1, f64::NAN);
    let mut model = PearlModel::new(tiny_model_config(), 1).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    match train_stage2(&mut model, &data, &cfg) {
        Err(PearlError::NonFiniteLoss { stage, epoch, .. }) => {
            assert_eq!((stage, epoch), ("stage2", 0));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
