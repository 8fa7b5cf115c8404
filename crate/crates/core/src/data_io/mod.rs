//! Readers and writers for every on-disk format.

pub mod checkpoint;
pub mod expression;
pub mod gmt;
pub mod tables;

pub use checkpoint::{
    checkpoint_paths, decode_checkpoint, encode_blob, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointManifest, ParamSpec, CHECKPOINT_FORMAT_VERSION,
};
pub use expression::{
    dense_tsv_string, parse_dense_tsv, parse_expression, parse_expression_text, parse_triplet_tsv,
    triplet_tsv_string, write_expression, ExpressionFormat, ExpressionMatrix,
    ValueKind,
};
pub use gmt::{gmt_string, parse_gmt, read_gmt, write_gmt, GeneSet, GeneSetCollection, ParsedGmt};
pub use tables::{
    geometry_csv_string, parse_geometry_csv, parse_survival_csv, read_geometry, read_survival,
    survival_csv_string, write_geometry, write_survival, DenseTable, PatchFeatureMatrix,
    SpotGeometry, SurvivalRecord, SurvivalTable,
};
