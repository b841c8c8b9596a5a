//! Model configuration, the variant matrix, layer stacks and parameter declaration.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::envgen::ImageSpec;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{glorot_uniform, Graph, ParameterStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    ViewEmbedding,
    LatentImage,
    LatentVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    ParticleFilter,
    Regression,
}

/// A trainable pipeline: map representation, localization head, and the two
/// ablation switches of the view-embedding map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub map: MapKind,
    pub head: Head,
    pub attention: bool,
    pub egocentric: bool,
}

impl Variant {
    pub const ALL: [&'static str; 9] = [
        "dmn-pf",
        "regression",
        "latent-image-pf",
        "latent-image-regression",
        "latent-vector-pf",
        "latent-vector-regression",
        "no-attention",
        "no-egocentric",
        "no-both",
    ];

    pub fn dmn() -> Self {
        Variant { map: MapKind::ViewEmbedding, head: Head::ParticleFilter, attention: true, egocentric: true }
    }

    pub fn name(&self) -> &'static str {
        use {Head::*, MapKind::*};
        match (self.map, self.head, self.attention, self.egocentric) {
            (ViewEmbedding, ParticleFilter, true, true) => "dmn-pf",
            (ViewEmbedding, Regression, true, true) => "regression",
            (LatentImage, ParticleFilter, ..) => "latent-image-pf",
            (LatentImage, Regression, ..) => "latent-image-regression",
            (LatentVector, ParticleFilter, ..) => "latent-vector-pf",
            (LatentVector, Regression, ..) => "latent-vector-regression",
            (ViewEmbedding, ParticleFilter, false, true) => "no-attention",
            (ViewEmbedding, ParticleFilter, true, false) => "no-egocentric",
            (ViewEmbedding, ParticleFilter, false, false) => "no-both",
            (ViewEmbedding, Regression, false, true) => "regression-no-attention",
            (ViewEmbedding, Regression, true, false) => "regression-no-egocentric",
            (ViewEmbedding, Regression, false, false) => "regression-no-both",
        }
    }

    pub fn is_regression(&self) -> bool {
        self.head == Head::Regression
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use {Head::*, MapKind::*};
        let v = |map, head, attention, egocentric| Variant { map, head, attention, egocentric };
        Ok(match s {
            "dmn-pf" | "dmn" => v(ViewEmbedding, ParticleFilter, true, true),
            "regression" => v(ViewEmbedding, Regression, true, true),
            "latent-image-pf" => v(LatentImage, ParticleFilter, true, true),
            "latent-image-regression" => v(LatentImage, Regression, true, true),
            "latent-vector-pf" => v(LatentVector, ParticleFilter, true, true),
            "latent-vector-regression" => v(LatentVector, Regression, true, true),
            "no-attention" => v(ViewEmbedding, ParticleFilter, false, true),
            "no-egocentric" => v(ViewEmbedding, ParticleFilter, true, false),
            "no-both" => v(ViewEmbedding, ParticleFilter, false, false),
            other => {
                return Err(Error::Config(format!("unknown variant `{other}`; expected one of {}", Variant::ALL.join(", "))))
            }
        })
    }
}

/// How attention logits become weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionNorm {
    /// softmax(⟨k_i, q⟩ / sqrt(|k|))
    ScaledSoftmax,
    /// raw scalar products used directly as weights
    Raw,
}

impl FromStr for AttentionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttentionNorm::ScaledSoftmax),
            "raw" => Ok(AttentionNorm::Raw),
            other => Err(Error::Config(format!("unknown attention_norm `{other}` (softmax|raw)"))),
        }
    }
}

impl fmt::Display for AttentionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionNorm::ScaledSoftmax => "softmax",
            AttentionNorm::Raw => "raw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image: ImageSpec,
    /// Multiplier on every convolutional and dense width (1.0 = full widths).
    pub channel_scale: f64,
    pub variant: Variant,
    pub attention_norm: AttentionNorm,
    /// CNN5's last two layers reuse CNN4's weights.
    pub share_cnn4_cnn5: bool,
    /// Final relu on the log-likelihood output.
    pub final_relu: bool,
    /// Length of the latent-vector map; 0 selects the parameter-parity length.
    pub latent_vector_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: ImageSpec::default(),
            channel_scale: 0.25,
            variant: Variant::dmn(),
            attention_norm: AttentionNorm::ScaledSoftmax,
            share_cnn4_cnn5: false,
            final_relu: false,
            latent_vector_len: 0,
        }
    }
}

/// Extents of a view embedding: a quarter of the image in each direction, `D` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

const fn conv(filters: usize, kernel: usize, stride: usize, relu: bool) -> ConvSpec {
    ConvSpec { filters, kernel, stride, relu }
}

pub const CNN1: [ConvSpec; 4] = [conv(32, 2, 2, true), conv(32, 3, 1, true), conv(64, 2, 2, true), conv(64, 3, 1, true)];
pub const CNN2: [ConvSpec; 2] = [conv(64, 3, 1, true), conv(32, 3, 1, false)];
pub const CNN3: [ConvSpec; 6] = [
    conv(32, 2, 2, true),
    conv(32, 3, 1, true),
    conv(64, 2, 2, true),
    conv(32, 3, 1, true),
    conv(64, 3, 1, true),
    conv(32, 3, 1, false),
];
pub const CNN4: [ConvSpec; 2] = [conv(128, 3, 1, true), conv(64, 3, 1, true)];
pub const CNN5: [ConvSpec; 6] = [
    conv(32, 2, 2, true),
    conv(32, 3, 1, true),
    conv(64, 2, 2, true),
    conv(64, 3, 1, true),
    conv(128, 3, 1, true),
    conv(64, 3, 1, true),
];
pub const CNN6: [ConvSpec; 3] = [conv(64, 3, 1, true), conv(64, 3, 1, true), conv(64, 3, 1, true)];
pub const FC1_HIDDEN: usize = 512;
/// Mixing layer of the latent-image map.
pub const MIX: ConvSpec = conv(64, 3, 1, true);

impl ModelConfig {
    /// Filters for a layer that has `full_width` filters at scale 1.
    pub fn width(&self, full_width: usize) -> usize {
        ((full_width as f64 * self.channel_scale).round() as usize).max(1)
    }

    pub fn embedding(&self) -> EmbeddingSpec {
        EmbeddingSpec {
            h: self.image.height.div_ceil(2).div_ceil(2),
            w: self.image.width.div_ceil(2).div_ceil(2),
            d: self.width(64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channel_scale > 0.0 && self.channel_scale.is_finite()) {
            return Err(Error::Config(format!("channel_scale must be positive, got {}", self.channel_scale)));
        }
        if self.embedding().d < 4 {
            return Err(Error::Config(format!("embedding depth {} < 4; raise channel_scale", self.embedding().d)));
        }
        if self.image.height == 0 || self.image.width == 0 {
            return Err(Error::Config("image extents must be positive".into()));
        }
        Ok(())
    }

    pub fn key_channels(&self) -> usize {
        self.width(32)
    }

    /// Channels of the attention readout: CNN4 output concatenated with the view key.
    pub fn readout_channels(&self) -> usize {
        self.width(64) + self.key_channels()
    }

    pub fn head_outputs(&self) -> usize {
        if self.variant.is_regression() {
            3
        } else {
            1
        }
    }

    /// Latent-vector length, solving for parameter parity with the view-embedding pipeline when unset.
    pub fn latent_len(&self) -> usize {
        if self.latent_vector_len > 0 {
            return self.latent_vector_len;
        }
        let target = declared_shapes(&ModelConfig { variant: Variant { map: MapKind::ViewEmbedding, ..self.variant }, ..*self }, 0)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum::<usize>();
        let count = |len| declared_shapes(self, len).iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>();
        let per_unit = count(2) - count(1);
        let fixed = count(1) - per_unit;
        (target.saturating_sub(fixed) as f64 / per_unit as f64).round().max(1.0) as usize
    }
}

/// Parameter names and shapes for a configuration. `latent` overrides the
/// latent-vector length (used when solving for parity).
fn declared_shapes(cfg: &ModelConfig, latent: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let emb = cfg.embedding();
    let w = |n| cfg.width(n);
    let stack = |out: &mut Vec<(String, Vec<usize>)>, name: &str, specs: &[ConvSpec], mut cin: usize, skip_first: bool| {
        for (i, s) in specs.iter().enumerate() {
            let cout = w(s.filters);
            if !(skip_first && i == 0) {
                out.push((format!("{name}.{i}.w"), vec![s.kernel, s.kernel, cin, cout]));
                out.push((format!("{name}.{i}.b"), vec![cout]));
            }
            cin = cout;
        }
    };
    stack(&mut out, "cnn1", &CNN1, 3, false);
    let v = cfg.variant;
    let map_channels = match v.map {
        MapKind::ViewEmbedding => {
            let c0 = w(CNN2[0].filters);
            out.push(("cnn2.0.w_feat".into(), vec![3, 3, emb.d, c0]));
            out.push(("cnn2.0.w_pose".into(), vec![3, 3, 4, c0]));
            out.push(("cnn2.0.b".into(), vec![c0]));
            stack(&mut out, "cnn2", &CNN2, c0, true);
            stack(&mut out, "cnn3", &CNN3, 3, false);
            stack(&mut out, "cnn4", &CNN4, emb.d, false);
            cfg.readout_channels()
        }
        MapKind::LatentImage => {
            let c = w(MIX.filters);
            out.push(("mix.w_feat".into(), vec![3, 3, emb.d, c]));
            out.push(("mix.w_pose".into(), vec![3, 3, 4, c]));
            out.push(("mix.b".into(), vec![c]));
            c
        }
        MapKind::LatentVector => {
            let len = if latent > 0 { latent } else { cfg.latent_len() };
            out.push(("vec.w".into(), vec![emb.h * emb.w * emb.d + 4, len]));
            out.push(("vec.b".into(), vec![len]));
            len
        }
    };
    let cnn5: &[ConvSpec] = if cfg.share_cnn4_cnn5 && v.map == MapKind::ViewEmbedding { &CNN5[..4] } else { &CNN5 };
    stack(&mut out, "cnn5", cnn5, 3, false);
    let c6 = w(CNN6[0].filters);
    out.push(("cnn6.0.w_map".into(), vec![3, 3, map_channels, c6]));
    out.push(("cnn6.0.w_query".into(), vec![3, 3, w(CNN5[5].filters), c6]));
    if !v.egocentric || v.map != MapKind::ViewEmbedding {
        out.push(("cnn6.0.w_pose".into(), vec![3, 3, 4, c6]));
    }
    out.push(("cnn6.0.b".into(), vec![c6]));
    stack(&mut out, "cnn6", &CNN6, c6, true);
    let hidden = w(FC1_HIDDEN);
    out.push(("fc1.0.w".into(), vec![emb.h * emb.w * c6, hidden]));
    out.push(("fc1.0.b".into(), vec![hidden]));
    out.push(("fc1.1.w".into(), vec![hidden, cfg.head_outputs()]));
    out.push(("fc1.1.b".into(), vec![cfg.head_outputs()]));
    out
}

/// Fan-in/fan-out of a declared weight, `None` for biases.
fn fans(name: &str, shape: &[usize]) -> Option<(usize, usize)> {
    if name.ends_with(".b") {
        return None;
    }
    match *shape {
        [k, k2, cin, cout] => Some((k * k2 * cin, k * k2 * cout)),
        [n, m] => Some((n, m)),
        _ => None,
    }
}

/// Fresh parameters: fan-scaled uniform weights, zero biases. Deterministic in `seed`.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut r = rng::stream(seed, rng::INIT);
    let mut store = ParameterStore::new();
    for (name, shape) in declared_shapes(cfg, 0) {
        let t = match fans(&name, &shape) {
            Some((fi, fo)) => glorot_uniform(&shape, fi, fo, &mut r),
            None => Tensor::zeros(&shape),
        };
        store.insert(name, t)?;
    }
    Ok(store)
}

/// Checks that `store` holds exactly the parameters `cfg` declares, with matching shapes.
pub fn check_parameters(cfg: &ModelConfig, store: &ParameterStore) -> Result<()> {
    let shapes = declared_shapes(cfg, 0);
    for (name, shape) in &shapes {
        match store.get(name) {
            None => return Err(Error::Incompatible(format!("missing parameter `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Incompatible(format!("`{name}` has shape {:?}, config expects {shape:?}", t.shape())))
            }
            _ => {}
        }
    }
    if store.len() != shapes.len() {
        return Err(Error::Incompatible(format!("checkpoint has {} parameters, config declares {}", store.len(), shapes.len())));
    }
    Ok(())
}

/// Parameter prefixes that make up the map encoder.
pub fn map_encoder_prefixes(cfg: &ModelConfig) -> &'static [&'static str] {
    match cfg.variant.map {
        MapKind::ViewEmbedding => &["cnn1."],
        MapKind::LatentImage => &["cnn1.", "mix."],
        MapKind::LatentVector => &["cnn1.", "vec."],
    }
}

/// Applies layers `from..` of a conv stack. Layer `i` uses parameters `{prefix}.{i}.w/b`
/// unless `rename` maps it elsewhere.
pub fn apply_stack(
    g: &mut Graph,
    params: &ParameterStore,
    prefix: &str,
    specs: &[ConvSpec],
    from: usize,
    input: Var,
    rename: impl Fn(usize) -> Option<String>,
) -> Result<Var> {
    let mut x = input;
    for (i, s) in specs.iter().enumerate().skip(from) {
        let base = rename(i).unwrap_or_else(|| format!("{prefix}.{i}"));
        let w = g.param(params, &format!("{base}.w"))?;
        let b = g.param(params, &format!("{base}.b"))?;
        x = g.conv2d(x, w, Some(b), s.stride)?;
        if s.relu {
            x = g.relu(x)?;
        }
    }
    Ok(x)
}

/// Random fill used by tests and diagnostics that need non-trivial biases.
pub fn jitter_biases(store: &mut ParameterStore, seed: u64, scale: f64) {
    let mut r = rng::stream(seed, rng::INIT + 100);
    store.map_values(|name, t| {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    });
}
