//! Bit-exact persistence of the shared checkpoint (`FTCK`) and per-task mask
//! bundles (`FTMK`), and the compressed-row engine for masked inference.

mod bundle;
mod checkpoint;
mod sparse;
mod wire;

pub use bundle::{
    decode_bundle, encode_bundle, load_bundle, pack_bits, save_bundle, unpack_bits, BundleMeta,
    MaskBundle, BUNDLE_MAGIC, BUNDLE_VERSION,
};
pub use checkpoint::{
    checkpoint_crc, checkpoint_size, decode_checkpoint, encode_checkpoint, load_checkpoint,
    quantize_f32, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use sparse::{
    dense_to_sparse, sparse_encode, sparse_matmul, sparse_matvec, to_sparse, SparseMatrix,
    SparseModel, SparseOutput,
};
