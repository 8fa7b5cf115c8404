use std::collections::BTreeSet;

use pearl_autodiff::Tensor;
use pearl_core::data_io::{
    checkpoint_paths, decode_checkpoint, dense_tsv_string, encode_blob, geometry_csv_string,
    gmt_string, load_checkpoint, parse_dense_tsv, parse_geometry_csv, parse_gmt,
    parse_survival_csv, parse_triplet_tsv, save_checkpoint, survival_csv_string,
    triplet_tsv_string, Checkpoint, CheckpointManifest, DenseTable, ExpressionMatrix, GeneSet,
    GeneSetCollection, ParamSpec, SpotGeometry, SurvivalRecord, SurvivalTable, ValueKind,
    CHECKPOINT_FORMAT_VERSION,
};
use proptest::prelude::*;

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn matrix() -> impl Strategy<Value = ExpressionMatrix> {
    (1usize..6, 1usize..6).prop_flat_map(|(s, g)| {
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..50.0, (1u32..20).prop_map(f64::from)], s * g)
            .prop_map(move |vals| {
                let trip = vals
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| (k / g, k % g, v))
                    .collect();
                ExpressionMatrix::from_triplets(ids("s", s), ids("g", g), trip, ValueKind::RawCounts)
                    .unwrap()
            })
    })
}

#[test]
fn gmt_examples() {
    let p = parse_gmt(b"PATH_A\tdesc\tTP53\tBRCA1\n").unwrap();
    assert_eq!(p.collection.len(), 1);
    assert_eq!(p.collection.sets[0].genes.len(), 2);
    let p = parse_gmt(b"PATH_A\tdesc\tTP53\tTP53\n").unwrap();
    assert_eq!(p.collection.sets[0].genes.len(), 1);
    assert_eq!(p.duplicate_genes, 1);
    let err = parse_gmt(b"PATH_A\tdesc\n").unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
    assert!(parse_gmt(b"A\td\tX\nA\td\tY\n").is_err());
    assert!(parse_gmt(b"A\td\t\xff\n").is_err());
}

#[test]
fn expression_examples() {
    let m = parse_dense_tsv("spot\tg1\tg2\ns1\t0\t3\ns2\t1\t0\n").unwrap();
    assert_eq!(m.nnz(), 2);
    assert_eq!(m.value_kind(), ValueKind::RawCounts);
    assert!(parse_triplet_tsv("spot\tgene\tvalue\ns1\tg1\t-2\n").is_err());
    assert_eq!(parse_triplet_tsv("").unwrap().n_spots(), 0);
    assert_eq!(parse_dense_tsv("").unwrap().n_spots(), 0);
    assert!(parse_triplet_tsv("spot\tgene\tvalue\ns1\tg1\t2\ns1\tg1\t0\n").is_err());
}

#[test]
fn geometry_and_survival_round_trip() {
    let geom = vec![
        SpotGeometry {
            spot_id: "a".into(),
            slide_id: "s1".into(),
            x: 10.5,
            y: -3.25,
            array_row: 0,
            array_col: 1,
        },
        SpotGeometry {
            spot_id: "b".into(),
            slide_id: "s1".into(),
            x: 0.1,
            y: 1e-7,
            array_row: 1,
            array_col: 1,
        },
    ];
    let text = geometry_csv_string(&geom);
    assert!(text.starts_with("spot_id,slide_id,x,y,array_row,array_col\n"));
    assert_eq!(parse_geometry_csv(&text).unwrap(), geom);
    let mut dup = geom.clone();
    dup[1].array_row = 0;
    assert!(parse_geometry_csv(&geometry_csv_string(&dup)).is_err());

    let table = SurvivalTable {
        rows: vec![
            SurvivalRecord {
                subject_id: "p1".into(),
                time: 12.5,
                event: true,
                slide_ids: vec!["s1".into(), "s2".into()],
            },
            SurvivalRecord {
                subject_id: "p2".into(),
                time: 0.3,
                event: false,
                slide_ids: vec!["s3".into()],
            },
        ],
    };
    let text = survival_csv_string(&table);
    assert_eq!(parse_survival_csv(&text).unwrap(), table);
    assert!(parse_survival_csv("subject_id,time,event,slide_ids\np,0,1,s\n").is_err());
}

fn manifest(params: Vec<ParamSpec>) -> CheckpointManifest {
    CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: "test".into(),
        seed: 3,
        hyperparameters: serde_json::json!({"width": 2}),
        params,
        metadata: serde_json::Value::Null,
    }
}

#[test]
fn checkpoint_errors_have_distinct_codes() {
    let specs = vec![ParamSpec {
        name: "w".into(),
        shape: [2, 2],
    }];
    let t = vec![Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
    let blob = encode_blob(&t);
    let expected = specs.clone();
    let ok = decode_checkpoint(manifest(specs.clone()), &blob, |_| Ok(expected.clone())).unwrap();
    assert_eq!(ok.tensors, t);

    let truncated = decode_checkpoint(manifest(specs.clone()), &blob[..blob.len() - 4], |_| Ok(expected.clone()));
    let mut long = blob.clone();
    long.extend_from_slice(&[0; 4]);
    let trailing = decode_checkpoint(manifest(specs.clone()), &long, |_| Ok(expected.clone()));
    let mut old = manifest(specs.clone());
    old.format_version = 99;
    let version = decode_checkpoint(old, &blob, |_| Ok(expected.clone()));
    let other = vec![ParamSpec {
        name: "w".into(),
        shape: [2, 3],
    }];
    let shape = decode_checkpoint(manifest(specs), &blob, |_| Ok(other.clone()));
    let codes: BTreeSet<&str> = [truncated, trailing, version, shape]
        .iter()
        .map(|r| r.as_ref().unwrap_err().code())
        .collect();
    assert_eq!(codes.len(), 4, "{codes:?}");
}

#[test]
fn checkpoint_paths_strip_known_suffixes() {
    let a = checkpoint_paths(std::path::Path::new("dir/model"));
    let b = checkpoint_paths(std::path::Path::new("dir/model.manifest.json"));
    let c = checkpoint_paths(std::path::Path::new("dir/model.params.bin"));
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(a.0.to_string_lossy().ends_with("model.manifest.json"));
    assert!(a.1.to_string_lossy().ends_with("model.params.bin"));
}

proptest! {
    #[test]
    fn dense_tsv_round_trip(m in matrix()) {
        let back = parse_dense_tsv(&dense_tsv_string(&m)).unwrap();
        prop_assert_eq!(&back, &m);
    }

    #[test]
    fn triplet_tsv_is_a_fixed_point(m in matrix()) {
        let once = parse_triplet_tsv(&triplet_tsv_string(&m)).unwrap();
        let twice = parse_triplet_tsv(&triplet_tsv_string(&once)).unwrap();
        prop_assert_eq!(&once, &twice);
        // same values under the id permutation
        for (s, sid) in m.spot_ids().iter().enumerate() {
            let s2 = once.spot_ids().iter().position(|x| x == sid).unwrap();
            for (g, gid) in m.gene_ids().iter().enumerate() {
                let g2 = once.gene_ids().iter().position(|x| x == gid).unwrap();
                prop_assert_eq!(m.dense_row(s)[g], once.dense_row(s2)[g2]);
            }
        }
    }

    #[test]
    fn gmt_round_trip(sets in prop::collection::vec(prop::collection::btree_set("[A-Z]{1,3}[0-9]?", 1..6), 1..5)) {
        let coll = GeneSetCollection::new(
            sets.into_iter()
                .enumerate()
                .map(|(i, genes)| GeneSet { name: format!("SET_{i}"), description: "d".into(), genes })
                .collect(),
        ).unwrap();
        let back = parse_gmt(gmt_string(&coll).as_bytes()).unwrap();
        prop_assert_eq!(back.collection, coll);
        prop_assert_eq!(back.duplicate_genes, 0);
    }

    #[test]
    fn dense_table_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 6)) {
        let t = DenseTable::new(ids("r", 3), ids("c", 2), vals).unwrap();
        let back = DenseTable::parse_tsv(&t.to_tsv("id"), "table").unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(vals in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 6)) {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let specs = vec![
            ParamSpec { name: "a".into(), shape: [2, 2] },
            ParamSpec { name: "b".into(), shape: [1, 2] },
        ];
        let data: Vec<f64> = vals.iter().map(|&v| f64::from(v)).collect();
        let ck = Checkpoint {
            manifest: manifest(specs.clone()),
            tensors: vec![
                Tensor::new(2, 2, data[..4].to_vec()).unwrap(),
                Tensor::new(1, 2, data[4..].to_vec()).unwrap(),
            ],
        };
        save_checkpoint(&ck, &base).unwrap();
        let back = load_checkpoint(&base, |_| Ok(specs.clone())).unwrap();
        for (a, b) in back.tensors.iter().zip(&ck.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        prop_assert_eq!(back.manifest, ck.manifest);
    }
}
