//! Egocentric spatial attention over a view-embedding map.
//!
//! For a candidate pose every viewpoint is re-expressed in the candidate's
//! frame, turned into a view key together with its embedding, and matched
//! against the query key. The readout is the weighted sum of
//! `[CNN4(V_i) ‖ k_i]`.

use crate::error::{Error, Result};
use crate::mapnet::ViewEmbeddingMap;
use crate::model::{apply_stack, AttentionNorm, ModelConfig, CNN2, CNN3, CNN4};
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

/// Per-entry values that do not depend on the candidate pose.
#[derive(Clone, Copy, Debug)]
pub struct PreparedEntry {
    /// First CNN2 layer applied to the embedding block, bias included.
    pub embedding_part: Var,
    /// CNN4 features of the embedding.
    pub features: Var,
    pub viewpoint: Var,
}

#[derive(Clone, Debug)]
pub struct PreparedAttention {
    pub entries: Vec<PreparedEntry>,
    pub query_key: Var,
    /// `[0, 0, 0]`, the frame used when viewpoints are fed in absolute coordinates.
    origin: Var,
}

/// Attention output for one candidate.
#[derive(Clone, Copy, Debug)]
pub struct Readout {
    /// `H × W × (64c + 32c)`.
    pub features: Var,
    /// `[N_c]` attention weights.
    pub weights: Var,
}

fn pose_part(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, rel4: Var) -> Result<Var> {
    let emb = cfg.embedding();
    let tiled = g.tile(rel4, emb.h, emb.w)?;
    let wp = g.param(params, "cnn2.0.w_pose")?;
    g.conv2d(tiled, wp, None, CNN2[0].stride)
}

fn embedding_part(g: &mut Graph, params: &ParameterStore, v: Var) -> Result<Var> {
    let wf = g.param(params, "cnn2.0.w_feat")?;
    let b = g.param(params, "cnn2.0.b")?;
    g.conv2d(v, wf, Some(b), CNN2[0].stride)
}

fn finish_key(g: &mut Graph, params: &ParameterStore, emb_part: Var, pose_part: Var) -> Result<Var> {
    let s = g.add(emb_part, pose_part)?;
    let h = g.relu(s)?;
    apply_stack(g, params, "cnn2", &CNN2, 1, h, |_| None)
}

/// CNN2 over `[V ‖ tile(rel4)]`, where `rel4` is the `[4]` encoding of the
/// egocentric viewpoint. The first layer's kernel is stored split by input
/// block, which equals a single conv over the concatenation.
pub fn view_key(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, v: Var, rel4: Var) -> Result<Var> {
    let a = embedding_part(g, params, v)?;
    let p = pose_part(g, params, cfg, rel4)?;
    finish_key(g, params, a, p)
}

/// CNN3 over the query image.
pub fn query_key(g: &mut Graph, params: &ParameterStore, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let expected = [cfg.image.height, cfg.image.width, 3];
    if g.value(image).shape() != expected {
        return Err(Error::shape("query_key", format!("image {:?}, config expects {expected:?}", g.value(image).shape())));
    }
    apply_stack(g, params, "cnn3", &CNN3, 0, image, |_| None)
}

/// CNN4 over an embedding.
pub fn map_features(g: &mut Graph, params: &ParameterStore, v: Var) -> Result<Var> {
    apply_stack(g, params, "cnn4", &CNN4, 0, v, |_| None)
}

/// Computes everything about the map and query that the candidate does not affect.
pub fn prepare(g: &mut Graph, params: &ParameterStore, map: &ViewEmbeddingMap, query_key: Var) -> Result<PreparedAttention> {
    if map.is_empty() {
        return Err(Error::Invalid("attention over an empty map".into()));
    }
    let mut entries = Vec::with_capacity(map.len());
    for e in &map.entries {
        entries.push(PreparedEntry {
            embedding_part: embedding_part(g, params, e.embedding)?,
            features: map_features(g, params, e.embedding)?,
            viewpoint: e.viewpoint_var,
        });
    }
    let origin = g.constant(Tensor::zeros(&[3]))?;
    Ok(PreparedAttention { entries, query_key, origin })
}

/// Reads the map from `candidate` (a `[3]` pose node in normalized units).
/// With egocentric transforms disabled the viewpoints are encoded in absolute
/// coordinates and the candidate is ignored.
pub fn attend_prepared(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    prep: &PreparedAttention,
    candidate: Var,
) -> Result<Readout> {
    let frame = if cfg.variant.egocentric { candidate } else { prep.origin };
    let mut keys = Vec::with_capacity(prep.entries.len());
    let mut logits = Vec::with_capacity(prep.entries.len());
    let key_len = g.value(prep.query_key).len() as f64;
    for e in &prep.entries {
        let rel4 = g.egocentric_encode(e.viewpoint, frame)?;
        let p = pose_part(g, params, cfg, rel4)?;
        let k = finish_key(g, params, e.embedding_part, p)?;
        if g.value(k).len() as f64 != key_len {
            return Err(Error::shape("attend", "view key and query key differ in size"));
        }
        if cfg.variant.attention {
            let d = g.dot(k, prep.query_key)?;
            logits.push(match cfg.attention_norm {
                AttentionNorm::ScaledSoftmax => g.scale(d, 1.0 / key_len.sqrt())?,
                AttentionNorm::Raw => d,
            });
        }
        keys.push(k);
    }
    let n = prep.entries.len();
    let weights = if !cfg.variant.attention {
        g.constant(Tensor::filled(&[n], 1.0 / n as f64))?
    } else {
        let l = g.stack(&logits)?;
        match cfg.attention_norm {
            AttentionNorm::ScaledSoftmax => g.softmax(l)?,
            AttentionNorm::Raw => l,
        }
    };
    let mut acc = None;
    for (i, (e, k)) in prep.entries.iter().zip(&keys).enumerate() {
        let cat = g.concat(&[e.features, *k])?;
        let w = g.select(weights, i)?;
        let term = g.scale_by(cat, w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(Readout { features: acc.expect("nonempty map"), weights })
}

/// One-shot attention: query key, preparation and readout for a single candidate.
pub fn attend(
    g: &mut Graph,
    params: &ParameterStore,
    cfg: &ModelConfig,
    map: &ViewEmbeddingMap,
    query_image: Var,
    candidate: Var,
) -> Result<Readout> {
    let qk = query_key(g, params, cfg, query_image)?;
    let prep = prepare(g, params, map, qk)?;
    attend_prepared(g, params, cfg, &prep, candidate)
}
