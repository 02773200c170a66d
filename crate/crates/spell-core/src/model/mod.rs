//! The two-layer, three-stream graph network over fused audio-visual
//! node features.
//!
//! Per node, a fusion front-end projects the 4-d spatial box through a
//! bare linear layer, concatenates it with the visual embedding, passes
//! visual and audio each through linear + batch-norm + ReLU, and adds the
//! two. The graph head then runs, per stream (forward / undirected /
//! backward edges), an edge-convolution layer, a weight-shared
//! aggregate-and-transform middle layer, and a per-stream
//! aggregate-to-scalar output layer; the three stream logits are added and
//! squashed by a sigmoid into a per-node speaking probability.

mod config;
mod conv;
mod net;
mod params;

pub use config::ModelConfig;
pub use conv::{
    agg_dst_to_src, agg_src_to_dst, edge_rows_sum_by_dst, edge_rows_sum_by_src, gather_by_dst,
    maxpool_in_neighbors, INCEPTION_WIDTHS,
};
pub use net::{
    backward, edge_conv_aggregate, forward_eval, forward_eval_stream_logits, forward_train,
    sage_aggregate, GraphView, NodeBatch, SpellCache,
};
pub use params::{
    config_from_shapes, EdgeConvParams, GraphHead, Head, SharedLayer, SpellParams, Stream,
    TensorShape,
};
