use std::collections::BTreeSet;

use pearl_core::data_io::{ExpressionMatrix, GeneSet, GeneSetCollection, ValueKind};
use pearl_core::ssgsea::{
    enrichment_score, nes, null_gene_sets, rank_genes, score_matrix, IndexedSet, SsgseaConfig,
};
use pearl_core::PearlError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Running-sum enrichment, step by step over ranked positions.
fn running_sum_es(values: &[f64], set: &[usize], alpha: f64) -> f64 {
    let n = values.len();
    // selection sort: repeatedly take the largest remaining, lowest index on ties
    let mut used = vec![false; n];
    let mut order = Vec::new();
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for g in 0..n {
            if used[g] {
                continue;
            }
            match best {
                Some(b) if values[g] <= values[b] => {}
                _ => best = Some(g),
            }
        }
        used[best.unwrap()] = true;
        order.push(best.unwrap());
    }
    let weight = |j: usize| (n - j) as f64;
    let in_set = |g: usize| set.contains(&g);
    let denom_in: f64 = (0..n)
        .filter(|&j| in_set(order[j]))
        .map(|j| weight(j).powf(alpha))
        .sum();
    let denom_out = (n - set.len()) as f64;
    let mut es = 0.0;
    let (mut cum_in, mut cum_out) = (0.0, 0.0);
    for j in 0..n {
        if in_set(order[j]) {
            cum_in += weight(j).powf(alpha);
        } else {
            cum_out += 1.0;
        }
        es += cum_in / denom_in - cum_out / denom_out;
    }
    es
}

fn oracle_scores(
    ids: &[String],
    dense: &[Vec<f64>],
    sets: &[(String, Vec<String>)],
    cfg: &SsgseaConfig,
) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut canon: Vec<String> = ids.to_vec();
    canon.sort();
    let col = |id: &str| ids.iter().position(|g| g == id).unwrap();
    let mut kept = Vec::new();
    let mut resolved = Vec::new();
    for (name, genes) in sets {
        let members: Vec<usize> = canon
            .iter()
            .enumerate()
            .filter(|(_, g)| genes.contains(g))
            .map(|(i, _)| i)
            .collect();
        if !members.is_empty() {
            kept.push(name.clone());
            resolved.push(members);
        }
    }
    let rows = dense
        .iter()
        .map(|row| {
            let v: Vec<f64> = canon.iter().map(|g| row[col(g)]).collect();
            resolved
                .iter()
                .map(|members| {
                    let es = running_sum_es(&v, members, cfg.weight_exponent);
                    let nulls = null_gene_sets(cfg.rng_seed, v.len(), members.len(), cfg.null_sets);
                    let mean = nulls
                        .iter()
                        .map(|s| running_sum_es(&v, s, cfg.weight_exponent).abs())
                        .sum::<f64>()
                        / nulls.len() as f64;
                    if es == 0.0 {
                        0.0
                    } else {
                        es / mean.max(cfg.epsilon)
                    }
                })
                .collect()
        })
        .collect();
    (rows, kept)
}

fn collection(sets: &[(String, Vec<String>)]) -> GeneSetCollection {
    GeneSetCollection::new(
        sets.iter()
            .map(|(n, g)| GeneSet {
                name: n.clone(),
                description: String::new(),
                genes: g.iter().cloned().collect::<BTreeSet<_>>(),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn hand_case_four_genes() {
    let r = rank_genes(&[4.0, 3.0, 2.0, 1.0]);
    let set = IndexedSet {
        name: "p".into(),
        members: vec![0, 2],
    };
    assert_eq!(enrichment_score(&r, &set, 1.0).unwrap(), 4.0 / 3.0);
}

#[test]
fn closed_form_matches_running_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(2..30);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
        let k = rng.random_range(1..n);
        let members = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let alpha = [0.0, 0.75, 1.0, 2.0][rng.random_range(0..4)];
        let set = IndexedSet {
            name: "p".into(),
            members: members.clone(),
        };
        let got = enrichment_score(&rank_genes(&v), &set, alpha).unwrap();
        let want = running_sum_es(&v, &members, alpha);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn single_null_set_normalizes_by_its_score() {
    let v = [0.5, 2.0, 1.0, 3.0, 0.0, 1.5];
    let cfg = SsgseaConfig {
        null_sets: 1,
        rng_seed: 9,
        ..SsgseaConfig::default()
    };
    let set = IndexedSet {
        name: "p".into(),
        members: vec![1, 3],
    };
    let es = running_sum_es(&v, &[1, 3], 0.75);
    let null = &null_gene_sets(9, 6, 2, 1)[0];
    let es0 = running_sum_es(&v, null, 0.75).abs();
    let got = nes(&v, &set, &cfg).unwrap();
    assert!((got - es / es0).abs() < 1e-12);
}

#[test]
fn matrix_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n_genes = rng.random_range(3..=20);
        let n_spots = rng.random_range(1..=4);
        let ids: Vec<String> = (0..n_genes).map(|i| format!("G{}", (i * 7) % 23)).collect();
        let dense: Vec<Vec<f64>> = (0..n_spots)
            .map(|_| {
                (0..n_genes)
                    .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..5.0) })
                    .collect()
            })
            .collect();
        let n_sets = rng.random_range(1..=5);
        let sets: Vec<(String, Vec<String>)> = (0..n_sets)
            .map(|p| {
                let k = rng.random_range(1..n_genes);
                let mut genes: Vec<String> = rand::seq::index::sample(&mut rng, n_genes, k)
                    .into_iter()
                    .map(|i| ids[i].clone())
                    .collect();
                if p == 0 {
                    genes.push("UNMEASURED".into());
                }
                (format!("P{p}"), genes)
            })
            .collect();
        let cfg = SsgseaConfig {
            rng_seed: rng.random(),
            null_sets: rng.random_range(1..=20),
            ..SsgseaConfig::default()
        };
        let flat: Vec<f64> = dense.iter().flatten().copied().collect();
        let spot_ids = (0..n_spots).map(|i| format!("s{i}")).collect();
        let m = ExpressionMatrix::from_dense(spot_ids, ids.clone(), &flat, ValueKind::NormalizedLog)
            .unwrap();
        let out = score_matrix(&m, &collection(&sets), &cfg).unwrap();
        let (want, kept) = oracle_scores(&ids, &dense, &sets, &cfg);
        assert_eq!(out.matrix.pathway_names, kept);
        for (s, row) in want.iter().enumerate() {
            for (p, w) in row.iter().enumerate() {
                let got = out.matrix.scores.get(s, p);
                assert!((got - w).abs() <= 1e-12, "spot {s} pathway {p}: {got} vs {w}");
            }
        }
    }
}

#[test]
fn unmeasured_pathway_is_dropped_and_reported() {
    let m = ExpressionMatrix::from_dense(
        vec!["s".into()],
        vec!["a".into(), "b".into(), "c".into()],
        &[1.0, 2.0, 3.0],
        ValueKind::NormalizedLog,
    )
    .unwrap();
    let sets = collection(&[
        ("keep".into(), vec!["a".into()]),
        ("gone".into(), vec!["z".into()]),
    ]);
    let out = score_matrix(&m, &sets, &SsgseaConfig::default()).unwrap();
    assert_eq!(out.dropped, vec!["gone"]);
    assert_eq!(out.matrix.pathway_names, vec!["keep"]);

    let none = collection(&[("gone".into(), vec!["z".into()])]);
    assert!(matches!(
        score_matrix(&m, &none, &SsgseaConfig::default()),
        Err(PearlError::NoPathways)
    ));
    let all = collection(&[("all".into(), vec!["a".into(), "b".into(), "c".into()])]);
    assert!(matches!(
        score_matrix(&m, &all, &SsgseaConfig::default()),
        Err(PearlError::DegeneratePathway { .. })
    ));
}

#[test]
fn raw_counts_are_rejected() {
    let m = ExpressionMatrix::from_dense(
        vec!["s".into()],
        vec!["a".into(), "b".into()],
        &[1.0, 2.0],
        ValueKind::RawCounts,
    )
    .unwrap();
    let sets = collection(&[("p".into(), vec!["a".into()])]);
    assert!(score_matrix(&m, &sets, &SsgseaConfig::default()).is_err());
}

#[test]
fn nes_magnitude_of_random_sets_is_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 200;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
    let cfg = SsgseaConfig {
        rng_seed: 4,
        ..SsgseaConfig::default()
    };
    let trials = 300;
    let mut total = 0.0;
    for _ in 0..trials {
        let k = 20;
        let set = IndexedSet {
            name: "p".into(),
            members: rand::seq::index::sample(&mut rng, n, k).into_vec(),
        };
        total += nes(&v, &set, &cfg).unwrap().abs();
    }
    let mean = total / trials as f64;
    assert!((0.5..=2.0).contains(&mean), "mean |NES| = {mean}");
}

fn small_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (3usize..12, 1usize..4).prop_flat_map(|(g, s)| {
        (Just(g), Just(s), prop::collection::vec(0.0f64..6.0, g * s))
    })
}

proptest! {
    #[test]
    fn gene_permutation_leaves_scores_unchanged(
        (n_genes, n_spots, flat) in small_matrix(),
        shuffle_seed in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..n_genes).map(|i| format!("g{i}")).collect();
        let sets = collection(&[
            ("a".into(), vec!["g0".into(), "g2".into()]),
            ("b".into(), vec!["g1".into()]),
        ]);
        let cfg = SsgseaConfig { rng_seed: seed, null_sets: 10, ..SsgseaConfig::default() };
        let spot_ids: Vec<String> = (0..n_spots).map(|i| format!("s{i}")).collect();
        let m = ExpressionMatrix::from_dense(spot_ids.clone(), ids.clone(), &flat, ValueKind::NormalizedLog).unwrap();
        let mut perm: Vec<usize> = (0..n_genes).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let permuted = m.select_genes(&perm).unwrap();
        let a = score_matrix(&m, &sets, &cfg).unwrap().matrix;
        let b = score_matrix(&permuted, &sets, &cfg).unwrap().matrix;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn scores_are_finite_and_deterministic((n_genes, n_spots, flat) in small_matrix()) {
        let ids: Vec<String> = (0..n_genes).map(|i| format!("g{i}")).collect();
        let spot_ids: Vec<String> = (0..n_spots).map(|i| format!("s{i}")).collect();
        let m = ExpressionMatrix::from_dense(spot_ids, ids, &flat, ValueKind::NormalizedLog).unwrap();
        let sets = collection(&[("a".into(), vec!["g0".into(), "g1".into()])]);
        let cfg = SsgseaConfig { null_sets: 5, ..SsgseaConfig::default() };
        let a = score_matrix(&m, &sets, &cfg).unwrap().matrix;
        prop_assert!(a.scores.all_finite());
        prop_assert_eq!(a, score_matrix(&m, &sets, &cfg).unwrap().matrix);
    }
}

fn es_of(values: &[f64], members: &[usize], alpha: f64) -> f64 {
    let set = IndexedSet {
        name: "p".into(),
        members: members.to_vec(),
    };
    enrichment_score(&rank_genes(values), &set, alpha).unwrap()
}

#[test]
fn raising_member_genes_can_lower_weighted_es() {
    // Raising every member moves gene 4 from 1st to 2nd rank position, which
    // shrinks its share of the rank-weighted member mass.
    let before = [44.0, 79.0, 21.0, 43.0, 98.0, 63.0, 97.0, 4.0];
    let mut after = before;
    for g in [4, 6, 7] {
        after[g] += 27.0;
    }
    assert!(es_of(&after, &[4, 6, 7], 0.75) < es_of(&before, &[4, 6, 7], 0.75));
    assert!(es_of(&after, &[4, 6, 7], 0.0) > es_of(&before, &[4, 6, 7], 0.0));
}

proptest! {
    #[test]
    fn unweighted_es_responds_monotonically(
        base in prop::collection::btree_set(0u32..200, 3..12),
        pick in any::<u64>(),
        c in 1u32..100,
    ) {
        let values: Vec<f64> = base.iter().map(|&v| f64::from(v)).collect();
        let n = values.len();
        let mut rng = ChaCha8Rng::seed_from_u64(pick);
        let k = rng.random_range(1..n);
        let members = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let mut shifted = values.clone();
        for &g in &members {
            shifted[g] += f64::from(c);
        }
        let mut sorted = shifted.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        prop_assert!(es_of(&shifted, &members, 0.0) >= es_of(&values, &members, 0.0) - 1e-12);
    }
}
