//! Overlays for one input: ProbAM of the extractor's last feature map
//! (capsule heads only) and the first-layer channel-sum map.

use crate::archnet::{Model, FEATURE_CHANNELS, LOW_CAPSULE_DIM, POOLED};
use crate::backend::{BnMode, Graph, Tensor};
use crate::dataio::{sample_rng, Pipeline, PipelineMode};
use crate::error::Result;
use crate::probam::{conv1_map, overlay, probam_map, resize, MapGeometry, RgbImage};

/// Opacity of the colour map over the input.
pub const OVERLAY_ALPHA: f32 = 0.5;

pub struct Rendered {
    pub probs: Vec<f32>,
    /// `None` for the CNN head, which has no routing coefficients.
    pub probam: Option<RgbImage>,
    pub conv1: RgbImage,
}

/// Runs `raw` (a `[c, h, w]` image in `[0, 1]`) through the model in eval mode
/// and renders both maps over it.
pub fn render(model: &mut Model<f32>, pipeline: &Pipeline, raw: &[f32], shape: [usize; 3]) -> Result<Rendered> {
    let [c, h, w] = shape;
    let mut eval = pipeline.clone();
    eval.mode = PipelineMode::Eval;
    let input = eval.apply(raw, shape, &mut sample_rng(0, 0, 0));
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, c, h, w], input)?);
    let out = model.forward(&mut g, x, BnMode::Eval)?;
    let probs = g.value(out.probs).data().to_vec();

    let stem = g.value(out.stem);
    let s = stem.shape();
    let conv1 = resize(&conv1_map(stem.data(), [s[1], s[2], s[3]])?, h, w)?;
    let conv1 = overlay(&conv1, raw, shape, OVERLAY_ALPHA)?;

    let probam = match &out.routing {
        Some(routed) => {
            // FC capsules come from the pooled map, PS capsules from the full one.
            let f = g.shape(out.features);
            let (mh, mw) = if model.head_pools() { (POOLED, POOLED) } else { (f[2], f[3]) };
            let geo = MapGeometry {
                channels: FEATURE_CHANNELS,
                height: mh,
                width: mw,
                capsule_dim: LOW_CAPSULE_DIM,
            };
            let map = probam_map(&routed.trace(&g), 0, geo)?;
            Some(overlay(&resize(&map, h, w)?, raw, shape, OVERLAY_ALPHA)?)
        }
        None => None,
    };
    Ok(Rendered { probs, probam, conv1 })
}
