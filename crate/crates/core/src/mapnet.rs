//! Context encoders and the three map representations.

use crate::envgen::Observation;
use crate::error::{Error, Result};
use crate::geometry::{EnvironmentExtent, PlanarPose};
use crate::model::{apply_stack, MapKind, ModelConfig, CNN1, MIX};
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

/// A context image and its viewpoint in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextObservation {
    pub image: Tensor,
    pub pose: PlanarPose,
}

impl ContextObservation {
    pub fn from_observation(obs: &Observation, extent: &EnvironmentExtent) -> Self {
        ContextObservation { image: obs.image.to_tensor(), pose: obs.pose.normalize(extent) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MapEntry {
    pub embedding: Var,
    pub viewpoint: PlanarPose,
    /// The viewpoint as a `[3]` graph node.
    pub viewpoint_var: Var,
}

/// One embedding per context, in context order.
#[derive(Clone, Debug)]
pub struct ViewEmbeddingMap {
    pub entries: Vec<MapEntry>,
}

impl ViewEmbeddingMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Element-wise mean of per-context feature images.
#[derive(Clone, Copy, Debug)]
pub struct LatentImageMap {
    pub features: Var,
}

/// Mean of per-context feature vectors.
#[derive(Clone, Copy, Debug)]
pub struct LatentVectorMap {
    pub features: Var,
}

#[derive(Clone, Debug)]
pub enum Map {
    View(ViewEmbeddingMap),
    Image(LatentImageMap),
    Vector(LatentVectorMap),
}

pub(crate) fn pose_var(g: &mut Graph, pose: &PlanarPose) -> Result<Var> {
    g.constant(Tensor::vector(pose.to_array().to_vec()))
}

pub(crate) fn encode4_var(g: &mut Graph, pose: &PlanarPose) -> Result<Var> {
    g.constant(Tensor::vector(pose.encode4().to_vec()))
}

/// CNN1: image `H_img × W_img × 3` to an embedding `H × W × D`.
pub fn encode_context(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let expected = [cfg.image.height, cfg.image.width, 3];
    if g.value(image).shape() != expected {
        return Err(Error::shape("encode_context", format!("image {:?}, config expects {expected:?}", g.value(image).shape())));
    }
    apply_stack(g, params, "cnn1", &CNN1, 0, image, |_| None)
}

fn check_nonempty(contexts: &[ContextObservation]) -> Result<()> {
    if contexts.is_empty() {
        return Err(Error::Invalid("a map needs at least one context".into()));
    }
    Ok(())
}

pub fn build_map(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, contexts: &[ContextObservation]) -> Result<ViewEmbeddingMap> {
    check_nonempty(contexts)?;
    let mut entries = Vec::with_capacity(contexts.len());
    for ctx in contexts {
        let image = g.constant(ctx.image.clone())?;
        let embedding = encode_context(g, params, cfg, image)?;
        let viewpoint_var = pose_var(g, &ctx.pose)?;
        entries.push(MapEntry { embedding, viewpoint: ctx.pose, viewpoint_var });
    }
    Ok(ViewEmbeddingMap { entries })
}

fn mean(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / parts.len() as f64)
}

/// Per-context features for the latent-image map: CNN1, then a mixing conv
/// over the features concatenated with the tiled pose encoding.
pub fn latent_image_features(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, ctx: &ContextObservation) -> Result<Var> {
    let emb = cfg.embedding();
    let image = g.constant(ctx.image.clone())?;
    let f = encode_context(g, params, cfg, image)?;
    let enc = encode4_var(g, &ctx.pose)?;
    let tiled = g.tile(enc, emb.h, emb.w)?;
    // the mixing kernel is stored split by input block; this equals one conv
    // over the channel concatenation [features ‖ pose]
    let wf = g.param(params, "mix.w_feat")?;
    let wp = g.param(params, "mix.w_pose")?;
    let b = g.param(params, "mix.b")?;
    let a = g.conv2d(f, wf, Some(b), MIX.stride)?;
    let p = g.conv2d(tiled, wp, None, MIX.stride)?;
    let s = g.add(a, p)?;
    g.relu(s)
}

pub fn build_latent_image_map(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, contexts: &[ContextObservation]) -> Result<LatentImageMap> {
    check_nonempty(contexts)?;
    let parts = contexts.iter().map(|c| latent_image_features(g, params, cfg, c)).collect::<Result<Vec<_>>>()?;
    Ok(LatentImageMap { features: mean(g, &parts)? })
}

/// Per-context vector: CNN1, flatten, append the pose encoding, dense + relu.
pub fn latent_vector_features(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, ctx: &ContextObservation) -> Result<Var> {
    let image = g.constant(ctx.image.clone())?;
    let f = encode_context(g, params, cfg, image)?;
    let flat = g.flatten(f)?;
    let enc = encode4_var(g, &ctx.pose)?;
    let x = g.concat(&[flat, enc])?;
    let w = g.param(params, "vec.w")?;
    let b = g.param(params, "vec.b")?;
    let y = g.dense(x, w, Some(b))?;
    g.relu(y)
}

pub fn build_latent_vector_map(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, contexts: &[ContextObservation]) -> Result<LatentVectorMap> {
    check_nonempty(contexts)?;
    let parts = contexts.iter().map(|c| latent_vector_features(g, params, cfg, c)).collect::<Result<Vec<_>>>()?;
    Ok(LatentVectorMap { features: mean(g, &parts)? })
}

/// Builds whichever map the configured variant uses.
pub fn build(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, contexts: &[ContextObservation]) -> Result<Map> {
    Ok(match cfg.variant.map {
        MapKind::ViewEmbedding => Map::View(build_map(g, params, cfg, contexts)?),
        MapKind::LatentImage => Map::Image(build_latent_image_map(g, params, cfg, contexts)?),
        MapKind::LatentVector => Map::Vector(build_latent_vector_map(g, params, cfg, contexts)?),
    })
}
