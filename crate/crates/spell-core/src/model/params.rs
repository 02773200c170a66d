//! Parameter containers, seeded initialisation and traversal.
//!
//! Tensor names follow the layer numbering of the architecture table the
//! network implements: `l04` spatial projection, `l06`/`l07` visual and
//! audio fusion branches, `l09`/`l10`/`l11` per-stream edge convolutions
//! (forward / undirected / backward), `l12` the weight-shared middle
//! layer, `l15`/`l16`/`l17` the per-stream output layers, and
//! `baseline_head` the no-graph per-node classifier. Checkpoints are keyed
//! by these names, and the full model configuration can be recovered from
//! which names are present plus their shapes.

use super::config::ModelConfig;
use super::conv::INCEPTION_WIDTHS;
use crate::error::{Result, SpellError};
use crate::graph::EdgeVariant;
use crate::tensor::{BatchNorm, LinearLayer, ParamTensor, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Edge convolution: two-layer MLP `g` on `[x_dst | x_src]` followed by
/// sum aggregation over in-edges, batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct EdgeConvParams<T> {
    /// `2 * filter_dim -> edge_mlp_hidden`; the top `filter_dim` rows act
    /// on the destination features, the bottom rows on the source.
    pub g1: LinearLayer<T>,
    /// `edge_mlp_hidden -> filter_dim`.
    pub g2: LinearLayer<T>,
    pub bn: BatchNorm<T>,
}

/// Weight-shared middle layer, applied once per stream with that stream's
/// edges.
#[derive(Clone, Debug)]
pub enum SharedLayer<T> {
    /// Aggregate-then-transform: sum in-neighbours, linear, BN, ReLU.
    Sage { lin: LinearLayer<T>, bn: BatchNorm<T> },
    /// Inception variant: three aggregate-transform branches of fixed
    /// widths plus a 1-hop maxpool of the input, concatenated and
    /// projected back to `filter_dim`.
    Inception {
        branches: Vec<LinearLayer<T>>,
        proj: LinearLayer<T>,
        bn: BatchNorm<T>,
    },
}

impl<T: Real> SharedLayer<T> {
    pub fn bn(&mut self) -> &mut BatchNorm<T> {
        match self {
            SharedLayer::Sage { bn, .. } => bn,
            SharedLayer::Inception { bn, .. } => bn,
        }
    }
}

/// One stream: its edge variant, edge convolution and scalar output layer.
#[derive(Clone, Debug)]
pub struct Stream<T> {
    pub variant: EdgeVariant,
    pub conv: EdgeConvParams<T>,
    /// Aggregate-to-scalar output layer (`filter_dim -> 1`, no BN, no
    /// activation before the final sigmoid).
    pub head: LinearLayer<T>,
}

#[derive(Clone, Debug)]
pub struct GraphHead<T> {
    /// `[Forward, Undirected, Backward]`, or just `[Undirected]` when the
    /// model is not bidirectional.
    pub streams: Vec<Stream<T>>,
    pub shared: SharedLayer<T>,
}

#[derive(Clone, Debug)]
pub enum Head<T> {
    Graph(GraphHead<T>),
    /// No-graph baseline: per-node linear classifier on the fused features.
    PerNode(LinearLayer<T>),
}

/// All trainable state of the network plus its configuration.
#[derive(Clone, Debug)]
pub struct SpellParams<T> {
    pub config: ModelConfig,
    /// Bare linear box projection (`l04`); absent without spatial features.
    pub spatial_proj: Option<LinearLayer<T>>,
    pub visual: LinearLayer<T>,
    pub visual_bn: BatchNorm<T>,
    pub audio: LinearLayer<T>,
    pub audio_bn: BatchNorm<T>,
    pub head: Head<T>,
}

/// Layer-name prefix for a stream's edge convolution.
fn conv_prefix(variant: EdgeVariant) -> &'static str {
    match variant {
        EdgeVariant::Forward => "l09",
        EdgeVariant::Undirected => "l10",
        EdgeVariant::Backward => "l11",
    }
}

/// Layer-name prefix for a stream's output layer.
fn head_prefix(variant: EdgeVariant) -> &'static str {
    match variant {
        EdgeVariant::Forward => "l15",
        EdgeVariant::Undirected => "l16",
        EdgeVariant::Backward => "l17",
    }
}

impl<T: Real> SpellParams<T> {
    /// Seeded initialisation: weights uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero, batch-norm
    /// gamma 1 / beta 0 with running mean 0 / variance 1. The same seed
    /// always reproduces the same parameters; layers draw from the RNG in
    /// a fixed order.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.filter_dim;
        let h = config.edge_mlp_hidden;

        let spatial_proj = if config.use_spatial {
            Some(LinearLayer::new("l04", config.spatial_dim, config.spatial_proj_dim, &mut rng))
        } else {
            None
        };
        let visual = LinearLayer::new("l06", config.visual_in_dim(), f, &mut rng);
        let visual_bn = BatchNorm::new("l06.bn", f);
        let audio = LinearLayer::new("l07", config.audio_dim, f, &mut rng);
        let audio_bn = BatchNorm::new("l07.bn", f);

        let head = if config.use_graph {
            let variants: &[EdgeVariant] = if config.bidirectional {
                &[EdgeVariant::Forward, EdgeVariant::Undirected, EdgeVariant::Backward]
            } else {
                &[EdgeVariant::Undirected]
            };
            let mut convs = Vec::new();
            for &v in variants {
                let p = conv_prefix(v);
                convs.push((
                    v,
                    EdgeConvParams {
                        g1: LinearLayer::new(&format!("{p}.g1"), 2 * f, h, &mut rng),
                        g2: LinearLayer::new(&format!("{p}.g2"), h, f, &mut rng),
                        bn: BatchNorm::new(&format!("{p}.bn"), f),
                    },
                ));
            }
            let shared = if config.inception_layer2 {
                let branches = INCEPTION_WIDTHS
                    .iter()
                    .map(|&w| LinearLayer::new(&format!("l12.b{w}"), f, w, &mut rng))
                    .collect();
                let widths: usize = INCEPTION_WIDTHS.iter().sum();
                SharedLayer::Inception {
                    branches,
                    proj: LinearLayer::new("l12.proj", widths + f, f, &mut rng),
                    bn: BatchNorm::new("l12.bn", f),
                }
            } else {
                SharedLayer::Sage {
                    lin: LinearLayer::new("l12", f, f, &mut rng),
                    bn: BatchNorm::new("l12.bn", f),
                }
            };
            let streams = convs
                .into_iter()
                .map(|(v, conv)| Stream {
                    variant: v,
                    conv,
                    head: LinearLayer::new(head_prefix(v), f, 1, &mut rng),
                })
                .collect();
            Head::Graph(GraphHead { streams, shared })
        } else {
            Head::PerNode(LinearLayer::new("baseline_head", f, 1, &mut rng))
        };

        Ok(SpellParams {
            config,
            spatial_proj,
            visual,
            visual_bn,
            audio,
            audio_bn,
            head,
        })
    }

    /// Visits every trainable tensor in a fixed order (the optimiser's
    /// slot order and the checkpoint writer both rely on it being stable).
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut ParamTensor<T>)) {
        let linear = |l: &mut LinearLayer<T>, f: &mut dyn FnMut(&mut ParamTensor<T>)| {
            f(&mut l.w);
            f(&mut l.b);
        };
        if let Some(sp) = &mut self.spatial_proj {
            linear(sp, f);
        }
        linear(&mut self.visual, f);
        f(&mut self.visual_bn.gamma);
        f(&mut self.visual_bn.beta);
        linear(&mut self.audio, f);
        f(&mut self.audio_bn.gamma);
        f(&mut self.audio_bn.beta);
        match &mut self.head {
            Head::PerNode(l) => linear(l, f),
            Head::Graph(gh) => {
                for s in &mut gh.streams {
                    linear(&mut s.conv.g1, f);
                    linear(&mut s.conv.g2, f);
                    f(&mut s.conv.bn.gamma);
                    f(&mut s.conv.bn.beta);
                }
                match &mut gh.shared {
                    SharedLayer::Sage { lin, bn } => {
                        linear(lin, f);
                        f(&mut bn.gamma);
                        f(&mut bn.beta);
                    }
                    SharedLayer::Inception { branches, proj, bn } => {
                        for b in branches {
                            linear(b, f);
                        }
                        linear(proj, f);
                        f(&mut bn.gamma);
                        f(&mut bn.beta);
                    }
                }
                for s in &mut gh.streams {
                    linear(&mut s.head, f);
                }
            }
        }
    }

    /// Immutable twin of [`for_each_param_mut`].
    ///
    /// [`for_each_param_mut`]: SpellParams::for_each_param_mut
    pub fn for_each_param(&self, f: &mut dyn FnMut(&ParamTensor<T>)) {
        // Safety of the cast-free trick: the mutable visitor never
        // restructures, so cloning the traversal logic is the simplest
        // honest implementation.
        let linear = |l: &LinearLayer<T>, f: &mut dyn FnMut(&ParamTensor<T>)| {
            f(&l.w);
            f(&l.b);
        };
        if let Some(sp) = &self.spatial_proj {
            linear(sp, f);
        }
        linear(&self.visual, f);
        f(&self.visual_bn.gamma);
        f(&self.visual_bn.beta);
        linear(&self.audio, f);
        f(&self.audio_bn.gamma);
        f(&self.audio_bn.beta);
        match &self.head {
            Head::PerNode(l) => linear(l, f),
            Head::Graph(gh) => {
                for s in &gh.streams {
                    linear(&s.conv.g1, f);
                    linear(&s.conv.g2, f);
                    f(&s.conv.bn.gamma);
                    f(&s.conv.bn.beta);
                }
                match &gh.shared {
                    SharedLayer::Sage { lin, bn } => {
                        linear(lin, f);
                        f(&bn.gamma);
                        f(&bn.beta);
                    }
                    SharedLayer::Inception { branches, proj, bn } => {
                        for b in branches {
                            linear(b, f);
                        }
                        linear(proj, f);
                        f(&bn.gamma);
                        f(&bn.beta);
                    }
                }
                for s in &gh.streams {
                    linear(&s.head, f);
                }
            }
        }
    }

    /// Visits batch-norm running statistics (state saved in checkpoints
    /// but not touched by the optimiser).
    pub fn for_each_state(&self, f: &mut dyn FnMut(&str, &[T])) {
        let bn = |b: &BatchNorm<T>, name: &str, f: &mut dyn FnMut(&str, &[T])| {
            f(&format!("{name}.running_mean"), &b.running_mean);
            f(&format!("{name}.running_var"), &b.running_var);
        };
        bn(&self.visual_bn, "l06.bn", f);
        bn(&self.audio_bn, "l07.bn", f);
        if let Head::Graph(gh) = &self.head {
            for s in &gh.streams {
                bn(&s.conv.bn, &format!("{}.bn", conv_prefix(s.variant)), f);
            }
            match &gh.shared {
                SharedLayer::Sage { bn: b, .. } | SharedLayer::Inception { bn: b, .. } => {
                    bn(b, "l12.bn", f)
                }
            }
        }
    }

    /// Mutable access to a running-statistics vector by checkpoint name.
    pub fn state_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        let (prefix, which) = name.rsplit_once('.')?;
        let (bn_name, field_is_mean) = match which {
            "running_mean" => (prefix, true),
            "running_var" => (prefix, false),
            _ => return None,
        };
        let bn: &mut BatchNorm<T> = match bn_name {
            "l06.bn" => &mut self.visual_bn,
            "l07.bn" => &mut self.audio_bn,
            "l12.bn" => match &mut self.head {
                Head::Graph(gh) => gh.shared.bn(),
                Head::PerNode(_) => return None,
            },
            other => match &mut self.head {
                Head::Graph(gh) => {
                    let variant = match other {
                        "l09.bn" => EdgeVariant::Forward,
                        "l10.bn" => EdgeVariant::Undirected,
                        "l11.bn" => EdgeVariant::Backward,
                        _ => return None,
                    };
                    let s = gh.streams.iter_mut().find(|s| s.variant == variant)?;
                    &mut s.conv.bn
                }
                Head::PerNode(_) => return None,
            },
        };
        Some(if field_is_mean { &mut bn.running_mean } else { &mut bn.running_var })
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.for_each_param(&mut |p| total += p.numel());
        total
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |p| p.zero_grad());
    }

    /// Cast every tensor (values and running statistics) to another float
    /// width. Gradients are reset.
    pub fn cast<U: Real>(&self) -> SpellParams<U> {
        let lin = |l: &LinearLayer<T>| -> LinearLayer<U> {
            let mut out = LinearLayer::new_zeroed(l.d_in(), l.d_out(), &l.w.name, &l.b.name);
            out.w.value = l.w.value.cast();
            out.b.value = l.b.value.cast();
            out
        };
        let bn = |b: &BatchNorm<T>| -> BatchNorm<U> {
            let name = b.gamma.name.trim_end_matches(".gamma").to_string();
            let mut out: BatchNorm<U> = BatchNorm::new(&name, b.dim());
            out.gamma.value = b.gamma.value.cast();
            out.beta.value = b.beta.value.cast();
            out.running_mean = b.running_mean.iter().map(|&v| U::from_f64(v.as_f64())).collect();
            out.running_var = b.running_var.iter().map(|&v| U::from_f64(v.as_f64())).collect();
            out
        };
        SpellParams {
            config: self.config.clone(),
            spatial_proj: self.spatial_proj.as_ref().map(&lin),
            visual: lin(&self.visual),
            visual_bn: bn(&self.visual_bn),
            audio: lin(&self.audio),
            audio_bn: bn(&self.audio_bn),
            head: match &self.head {
                Head::PerNode(l) => Head::PerNode(lin(l)),
                Head::Graph(gh) => Head::Graph(GraphHead {
                    streams: gh
                        .streams
                        .iter()
                        .map(|s| Stream {
                            variant: s.variant,
                            conv: EdgeConvParams {
                                g1: lin(&s.conv.g1),
                                g2: lin(&s.conv.g2),
                                bn: bn(&s.conv.bn),
                            },
                            head: lin(&s.head),
                        })
                        .collect(),
                    shared: match &gh.shared {
                        SharedLayer::Sage { lin: l, bn: b } => {
                            SharedLayer::Sage { lin: lin(l), bn: bn(b) }
                        }
                        SharedLayer::Inception { branches, proj, bn: b } => {
                            SharedLayer::Inception {
                                branches: branches.iter().map(&lin).collect(),
                                proj: lin(proj),
                                bn: bn(b),
                            }
                        }
                    },
                }),
            },
        }
    }
}

/// Shape record of one checkpoint tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorShape {
    pub name: String,
    pub dims: Vec<usize>,
}

/// Recovers the [`ModelConfig`] from the tensor names and shapes stored in
/// a checkpoint. The layer naming is injective over configurations, so no
/// side metadata is needed.
pub fn config_from_shapes(shapes: &[TensorShape]) -> Result<ModelConfig> {
    let dims = |name: &str| -> Option<&[usize]> {
        shapes.iter().find(|s| s.name == name).map(|s| s.dims.as_slice())
    };
    let two_dims = |name: &str| -> Result<(usize, usize)> {
        match dims(name) {
            Some([r, c]) => Ok((*r, *c)),
            Some(other) => Err(SpellError::validation(format!(
                "tensor '{name}' has rank {} where a matrix was expected",
                other.len()
            ))),
            None => Err(SpellError::validation(format!("checkpoint is missing tensor '{name}'"))),
        }
    };

    let use_spatial = dims("l04.weight").is_some();
    let use_graph = dims("baseline_head.weight").is_none();
    // Without a graph head there are no streams either way; canonicalise
    // to the default so headless checkpoints round-trip.
    let bidirectional = !use_graph || dims("l09.g1.weight").is_some();
    let inception_layer2 = dims("l12.proj.weight").is_some();

    let (visual_in, filter_dim) = two_dims("l06.weight")?;
    let (audio_dim, _) = two_dims("l07.weight")?;
    let (spatial_dim, spatial_proj_dim) = if use_spatial {
        two_dims("l04.weight")?
    } else {
        (4, 64) // unused; keep the standard widths for round-tripping
    };
    let visual_dim = if use_spatial {
        visual_in.checked_sub(spatial_proj_dim).ok_or_else(|| {
            SpellError::validation("l06 input narrower than the spatial projection")
        })?
    } else {
        visual_in
    };
    let edge_mlp_hidden = if use_graph {
        two_dims("l10.g1.weight")?.1
    } else {
        64 // unused without the graph head
    };

    let config = ModelConfig {
        visual_dim,
        audio_dim,
        spatial_dim,
        spatial_proj_dim,
        filter_dim,
        edge_mlp_hidden,
        use_spatial,
        use_graph,
        bidirectional,
        inception_layer2,
    };
    config.validate()?;
    Ok(config)
}
