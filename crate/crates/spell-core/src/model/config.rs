//! Model hyperparameters.

use crate::error::{Result, SpellError};

/// Structural hyperparameters of the network. [`Default`] gives the
/// standard configuration: 512-d visual and audio embeddings, a 4-d box
/// projected to 64, 64 graph filters and a 64-wide edge MLP hidden layer,
/// spatial features on, all three streams, plain (non-inception) middle
/// layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Box feature width (centre x/y, width, height).
    pub spatial_dim: usize,
    /// Output width of the bare spatial projection.
    pub spatial_proj_dim: usize,
    /// Node feature width inside the graph head.
    pub filter_dim: usize,
    /// Hidden width of the two-layer edge MLP.
    pub edge_mlp_hidden: usize,
    /// Concatenate the projected box onto the visual embedding.
    pub use_spatial: bool,
    /// `false` replaces the graph head with a per-node linear classifier
    /// (the no-graph baseline).
    pub use_graph: bool,
    /// `true` runs forward + undirected + backward streams; `false` keeps
    /// only the undirected stream.
    pub bidirectional: bool,
    /// Replace the plain weight-shared middle layer with the inception
    /// variant (three parallel aggregate-transform branches plus a 1-hop
    /// maxpool, concatenated and projected back to `filter_dim`).
    pub inception_layer2: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual_dim: 512,
            audio_dim: 512,
            spatial_dim: 4,
            spatial_proj_dim: 64,
            filter_dim: 64,
            edge_mlp_hidden: 64,
            use_spatial: true,
            use_graph: true,
            bidirectional: true,
            inception_layer2: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("visual_dim", self.visual_dim),
            ("audio_dim", self.audio_dim),
            ("filter_dim", self.filter_dim),
            ("edge_mlp_hidden", self.edge_mlp_hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(SpellError::validation(format!("{name} must be positive, got 0")));
            }
        }
        if self.use_spatial && (self.spatial_dim == 0 || self.spatial_proj_dim == 0) {
            return Err(SpellError::validation(
                "spatial_dim and spatial_proj_dim must be positive when use_spatial is set",
            ));
        }
        if self.inception_layer2 && !self.use_graph {
            return Err(SpellError::validation(
                "inception_layer2 requires the graph head",
            ));
        }
        Ok(())
    }

    /// Input width of the visual branch: embedding plus projected box.
    pub fn visual_in_dim(&self) -> usize {
        if self.use_spatial {
            self.visual_dim + self.spatial_proj_dim
        } else {
            self.visual_dim
        }
    }

    /// Per-node input feature width (visual + audio + spatial as stored).
    pub fn node_feature_dim(&self) -> usize {
        self.visual_dim + self.audio_dim + self.spatial_dim
    }

    /// Number of trainable scalars (weights, biases, batch-norm affine
    /// parameters; running statistics are state, not parameters).
    pub fn param_count(&self) -> usize {
        let f = self.filter_dim;
        let h = self.edge_mlp_hidden;
        let linear = |d_in: usize, d_out: usize| d_in * d_out + d_out;
        let bn = |d: usize| 2 * d;

        let mut total = 0;
        if self.use_spatial {
            total += linear(self.spatial_dim, self.spatial_proj_dim);
        }
        total += linear(self.visual_in_dim(), f) + bn(f);
        total += linear(self.audio_dim, f) + bn(f);
        if self.use_graph {
            let streams = if self.bidirectional { 3 } else { 1 };
            // Edge conv: two-layer MLP on [x_dst | x_src] plus batch norm.
            total += streams * (linear(2 * f, h) + linear(h, f) + bn(f));
            // Weight-shared middle layer.
            if self.inception_layer2 {
                let widths: usize = super::conv::INCEPTION_WIDTHS.iter().sum();
                for w in super::conv::INCEPTION_WIDTHS {
                    total += linear(f, w);
                }
                total += linear(widths + f, f) + bn(f);
            } else {
                total += linear(f, f) + bn(f);
            }
            // Per-stream scalar output layers.
            total += streams * linear(f, 1);
        } else {
            total += linear(f, 1);
        }
        total
    }
}
