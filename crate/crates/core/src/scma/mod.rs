//! Sparse code multiple access: factor graph, codebooks, DD-grid
//! allocation, the message passing decoder and codebook distances.

mod codebook;
mod graph;
mod metrics;
mod mpa;

pub use codebook::{
    bit_errors, codebook_from_json, codebook_to_json, encode_frame, load_codebook, AllocatedFrame,
    IndexMatrix, ScmaCodebookSet, ScmaSystem,
};
pub use graph::FactorGraph;
pub use metrics::{codebook_metrics, CodebookMetrics, MAX_TUPLES};
pub use mpa::{
    decode_frame, decode_frame_with_sigma2, mpa_decode, posterior_moments, select_codewords,
    FrameDecode, LikelihoodScale, MessageDomain, MpaConfig, MpaDecoder, MpaWorkspace, PosteriorSet,
};
