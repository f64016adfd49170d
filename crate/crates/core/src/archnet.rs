//! The shared residual feature extractor and the three classifier heads.
//!
//! Extractor: a stride-2 3x3 stem to 16 channels, then three stages of
//! residual blocks (3 basic blocks at 16 channels; a down-sample block and
//! 2 basic blocks at 32; a down-sample block and 2 basic blocks at 64).
//! Every convolution is bias-free and followed by an affine batch norm.
//! A `[c, h, w]` image leaves the extractor as `[64, ceil(h/8), ceil(w/8)]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{BnMode, Float, Graph, ParamId, ParamStore, RunningStats, Tensor, Var};
use crate::capsule::{capsule_lengths, capsules_from_feature_map, FcCapsuleLayer, PsCapsuleLayer, Routed};
use crate::error::{Error, Result};

/// Channels of the extractor's stem and three stages.
pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
/// Basic blocks per stage, after the stage's down-sample block (if any).
const STAGE_BASIC_BLOCKS: [usize; 3] = [3, 2, 2];
/// Channels of the extractor output.
pub const FEATURE_CHANNELS: usize = 64;
/// Dimension of the low-level capsules cut from the feature map.
pub const LOW_CAPSULE_DIM: usize = 32;
/// Dimension of the class capsules.
pub const HIGH_CAPSULE_DIM: usize = 8;
/// Spatial size the FC and CNN heads pool to.
pub const POOLED: usize = 4;
/// Width of the CNN head's hidden layer.
pub const CNN_HIDDEN: usize = 256;
/// Smallest input side the extractor accepts.
pub const MIN_INPUT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Ps,
    Fc,
    Cnn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Ps, HeadKind::Fc, HeadKind::Cnn];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Ps => "ps",
            HeadKind::Fc => "fc",
            HeadKind::Cnn => "cnn",
        }
    }

    pub fn is_capsule(self) -> bool {
        !matches!(self, HeadKind::Cnn)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            HeadKind::Ps => 0,
            HeadKind::Fc => 1,
            HeadKind::Cnn => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        HeadKind::ALL.into_iter().find(|h| h.code() == code)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ps" => Ok(HeadKind::Ps),
            "fc" => Ok(HeadKind::Fc),
            "cnn" => Ok(HeadKind::Cnn),
            other => Err(Error::Config(format!("unknown head '{other}' (expected ps, fc or cnn)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub in_channels: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn new(head: HeadKind, in_channels: usize, classes: usize) -> Result<Self> {
        if !matches!(in_channels, 1 | 3) {
            return Err(Error::Config(format!("unsupported input channel count {in_channels}")));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(ModelConfig {
            head,
            in_channels,
            classes,
        })
    }
}

/// Bias-free convolution followed by an affine batch norm.
#[derive(Clone, Copy, Debug)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
    stride: usize,
    padding: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        stats: &mut Vec<(String, RunningStats<T>)>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.conv.weight"),
            Tensor::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
        );
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(&[out_ch], T::one()));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[out_ch]));
        stats.push((format!("{name}.bn"), RunningStats::new(out_ch)));
        ConvBn {
            weight,
            gamma,
            beta,
            stats: stats.len() - 1,
            stride,
            padding: kernel / 2,
        }
    }

    fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stats: &mut [(String, RunningStats<T>)],
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(y, gamma, beta, &mut stats[self.stats].1, mode)
    }
}

/// Two 3x3 conv-BN layers with a residual shortcut; the shortcut is a
/// strided 1x1 conv-BN when the block down-samples.
#[derive(Clone, Debug)]
struct ResidualBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stats: &mut [(String, RunningStats<T>)],
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        let h = self.first.forward(g, store, stats, x, mode)?;
        let h = g.relu(h)?;
        let h = self.second.forward(g, store, stats, h, mode)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(g, store, stats, x, mode)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        g.relu(sum)
    }
}

#[derive(Clone, Debug)]
struct Extractor {
    stem: ConvBn,
    blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
enum Head {
    Ps(PsCapsuleLayer),
    Fc(FcCapsuleLayer),
    Cnn {
        hidden_w: ParamId,
        hidden_b: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
}

/// Everything a forward pass exposes to training, evaluation and visualization.
pub struct Forward<T> {
    /// Class probabilities `[B, q]`: capsule lengths or sigmoid outputs.
    pub probs: Var,
    /// Routing output for capsule heads.
    pub routing: Option<Routed<T>>,
    /// Output of the stem (first conv, BN, ReLU), `[B, 16, h/2, w/2]`.
    pub stem: Var,
    /// Extractor output, `[B, 64, H, W]`.
    pub features: Var,
    /// What the classifier head actually consumed: the capsules `[B, N, 32]`
    /// for capsule heads, the flattened pooled map for the CNN head.
    pub head_input: Var,
}

/// Extractor plus one classifier head, with its parameters and BN statistics.
#[derive(Clone, Debug)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub bn_stats: Vec<(String, RunningStats<T>)>,
    /// Routing iterations used by capsule heads.
    pub routing_iters: usize,
    extractor: Extractor,
    head: Head,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stats = Vec::new();

        let stem = ConvBn::new(&mut store, &mut stats, "stem", config.in_channels, STAGE_CHANNELS[0], 3, 2, &mut rng);
        let mut blocks = Vec::new();
        let mut channels = STAGE_CHANNELS[0];
        for (stage, (&width, &basic)) in STAGE_CHANNELS.iter().zip(&STAGE_BASIC_BLOCKS).enumerate() {
            let mut index = 0;
            if width != channels {
                let name = format!("layer{}.{index}", stage + 1);
                blocks.push(ResidualBlock {
                    first: ConvBn::new(&mut store, &mut stats, &format!("{name}.a"), channels, width, 3, 2, &mut rng),
                    second: ConvBn::new(&mut store, &mut stats, &format!("{name}.b"), width, width, 3, 1, &mut rng),
                    shortcut: Some(ConvBn::new(&mut store, &mut stats, &format!("{name}.down"), channels, width, 1, 2, &mut rng)),
                });
                index += 1;
                channels = width;
            }
            for _ in 0..basic {
                let name = format!("layer{}.{index}", stage + 1);
                blocks.push(ResidualBlock {
                    first: ConvBn::new(&mut store, &mut stats, &format!("{name}.a"), width, width, 3, 1, &mut rng),
                    second: ConvBn::new(&mut store, &mut stats, &format!("{name}.b"), width, width, 3, 1, &mut rng),
                    shortcut: None,
                });
                index += 1;
            }
        }

        let q = config.classes;
        let head = match config.head {
            HeadKind::Ps => Head::Ps(PsCapsuleLayer::new(&mut store, "head.caps", q, LOW_CAPSULE_DIM, HIGH_CAPSULE_DIM, &mut rng)),
            HeadKind::Fc => {
                let low = (FEATURE_CHANNELS / LOW_CAPSULE_DIM) * POOLED * POOLED;
                Head::Fc(FcCapsuleLayer::new(&mut store, "head.caps", low, q, LOW_CAPSULE_DIM, HIGH_CAPSULE_DIM, &mut rng))
            }
            HeadKind::Cnn => {
                let flat = FEATURE_CHANNELS * POOLED * POOLED;
                let b1 = 1.0 / (flat as f64).sqrt();
                let b2 = 1.0 / (CNN_HIDDEN as f64).sqrt();
                Head::Cnn {
                    hidden_w: store.add("head.fc1.weight", Tensor::uniform(&[CNN_HIDDEN, flat], b1, &mut rng)),
                    hidden_b: store.add("head.fc1.bias", Tensor::uniform(&[CNN_HIDDEN], b1, &mut rng)),
                    out_w: store.add("head.fc2.weight", Tensor::uniform(&[q, CNN_HIDDEN], b2, &mut rng)),
                    out_b: store.add("head.fc2.bias", Tensor::uniform(&[q], b2, &mut rng)),
                }
            }
        };

        Model {
            config,
            store,
            bn_stats: stats,
            routing_iters: 3,
            extractor: Extractor { stem, blocks },
            head,
        }
    }

    /// Number of trainable scalars. BN running statistics are not counted.
    pub fn count_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Trainable scalars per layer, in construction order.
    pub fn census(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter() {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            match rows.last_mut() {
                Some((name, count)) if name == layer => *count += p.numel(),
                _ => rows.push((layer.to_string(), p.numel())),
            }
        }
        rows
    }

    /// Number of residual blocks with an identity shortcut and with a projection.
    pub fn block_counts(&self) -> (usize, usize) {
        let down = self.extractor.blocks.iter().filter(|b| b.shortcut.is_some()).count();
        (self.extractor.blocks.len() - down, down)
    }

    /// Whether the head averages the feature map down to a fixed size.
    pub fn head_pools(&self) -> bool {
        !matches!(self.head, Head::Ps(_))
    }

    /// Extractor only: `[B, c, h, w] -> (stem output, [B, 64, ceil(h/8), ceil(w/8)])`.
    pub fn forward_extractor(&mut self, g: &mut Graph<T>, x: Var, mode: BnMode) -> Result<(Var, Var)> {
        match *g.shape(x) {
            [_, c, h, w] if c == self.config.in_channels && h >= MIN_INPUT && w >= MIN_INPUT => {}
            ref s => {
                return Err(Error::shape(
                    "forward_extractor",
                    format!(
                        "expected [B, {}, >={MIN_INPUT}, >={MIN_INPUT}], got {s:?}",
                        self.config.in_channels
                    ),
                ))
            }
        }
        let Model {
            store,
            bn_stats,
            extractor,
            ..
        } = self;
        let stem = extractor.stem.forward(g, store, bn_stats, x, mode)?;
        let stem = g.relu(stem)?;
        let mut h = stem;
        for block in &extractor.blocks {
            h = block.forward(g, store, bn_stats, h, mode)?;
        }
        Ok((stem, h))
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: BnMode) -> Result<Forward<T>> {
        let (stem, features) = self.forward_extractor(g, x, mode)?;
        let store = &self.store;
        let iters = self.routing_iters;
        let (probs, routing, head_input) = match &self.head {
            Head::Ps(layer) => {
                let caps = capsules_from_feature_map(g, features, LOW_CAPSULE_DIM)?;
                let routed = layer.forward(g, store, caps, iters)?;
                (capsule_lengths(g, routed.capsules)?, Some(routed), caps)
            }
            Head::Fc(layer) => {
                let pooled = g.adaptive_avg_pool2d(features, POOLED, POOLED)?;
                let caps = capsules_from_feature_map(g, pooled, LOW_CAPSULE_DIM)?;
                let routed = layer.forward(g, store, caps, iters)?;
                (capsule_lengths(g, routed.capsules)?, Some(routed), caps)
            }
            Head::Cnn {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            } => {
                let pooled = g.adaptive_avg_pool2d(features, POOLED, POOLED)?;
                let batch = g.shape(pooled)[0];
                let flat = g.reshape(pooled, &[batch, FEATURE_CHANNELS * POOLED * POOLED])?;
                let (w1, b1) = (g.param(store, *hidden_w), g.param(store, *hidden_b));
                let hidden = g.linear(flat, w1, b1)?;
                let hidden = g.relu(hidden)?;
                let (w2, b2) = (g.param(store, *out_w), g.param(store, *out_b));
                let logits = g.linear(hidden, w2, b2)?;
                (g.sigmoid(logits)?, None, flat)
            }
        };
        Ok(Forward {
            probs,
            routing,
            stem,
            features,
            head_input,
        })
    }

    /// Converts parameters and statistics to another float type.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store.add(p.name.clone(), p.value.cast());
        }
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect();
        Model {
            config: self.config,
            store,
            bn_stats: self
                .bn_stats
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                            momentum: s.momentum,
                            eps: s.eps,
                        },
                    )
                })
                .collect(),
            routing_iters: self.routing_iters,
            extractor: self.extractor.clone(),
            head: self.head.clone(),
        }
    }
}

/// Parameter count of the extractor alone.
pub fn extractor_parameters(in_channels: usize) -> usize {
    let conv_bn = |i: usize, o: usize, k: usize| i * o * k * k + 2 * o;
    let mut total = conv_bn(in_channels, STAGE_CHANNELS[0], 3);
    let mut ch = STAGE_CHANNELS[0];
    for (&w, &basic) in STAGE_CHANNELS.iter().zip(&STAGE_BASIC_BLOCKS) {
        if w != ch {
            total += conv_bn(ch, w, 3) + conv_bn(w, w, 3) + conv_bn(ch, w, 1);
            ch = w;
        }
        total += basic * 2 * conv_bn(w, w, 3);
    }
    total
}

/// Parameter count of a classifier head for `classes` outputs.
pub fn head_parameters(head: HeadKind, classes: usize) -> usize {
    match head {
        HeadKind::Ps => classes * LOW_CAPSULE_DIM * HIGH_CAPSULE_DIM,
        HeadKind::Fc => {
            classes * (FEATURE_CHANNELS / LOW_CAPSULE_DIM) * POOLED * POOLED * LOW_CAPSULE_DIM * HIGH_CAPSULE_DIM
        }
        HeadKind::Cnn => {
            let flat = FEATURE_CHANNELS * POOLED * POOLED;
            flat * CNN_HIDDEN + CNN_HIDDEN + CNN_HIDDEN * classes + classes
        }
    }
}
