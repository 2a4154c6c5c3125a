//! Backbone `f` plus two-layer projection head `g`, with the embedding
//! L2-normalized once at the head's exit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Image, ImageShape};
use crate::error::{Error, Result};
use crate::nn::{dot, l2_norm, BackboneArch, BackboneTrace, Dense};

pub const EMBED_DIM: usize = 128;

/// Norms below this are treated as this value when normalizing.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub backbone: BackboneArch,
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl EncoderArch {
    /// Reference conv backbone for `shape` with a 128-d head.
    pub fn reference(shape: ImageShape, width: usize) -> Self {
        let backbone = BackboneArch::reference(shape.channels, shape.height, shape.width, width);
        let hidden = backbone.feature_dim().max(32);
        Self {
            backbone,
            head_hidden: hidden,
            embed_dim: EMBED_DIM,
        }
    }

    fn head_layers(&self) -> (Dense, Dense) {
        (
            Dense {
                inputs: self.backbone.feature_dim(),
                outputs: self.head_hidden,
            },
            Dense {
                inputs: self.head_hidden,
                outputs: self.embed_dim,
            },
        )
    }

    pub fn head_params(&self) -> usize {
        let (a, b) = self.head_layers();
        a.num_params() + b.num_params()
    }
}

/// Parameters of one encoder (query or key). Also used as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    pub backbone: Vec<f64>,
    pub head: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    backbone: BackboneTrace,
    features: Vec<f64>,
    hidden: Vec<f64>,
    raw: Vec<f64>,
    embedding: Vec<f64>,
}

impl EncoderTrace {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
}

impl EncoderParams {
    pub fn init(arch: EncoderArch, rng: &mut impl Rng) -> Self {
        let backbone = arch.backbone.init(rng);
        let (l1, l2) = arch.head_layers();
        let mut head = l1.init(rng, 2.0);
        head.extend(l2.init(rng, 1.0));
        Self { arch, backbone, head }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            backbone: vec![0.0; self.backbone.len()],
            head: vec![0.0; self.head.len()],
        }
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.backbone.len() == other.backbone.len()
            && self.head.len() == other.head.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.backbone.iter().chain(&self.head)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone.iter_mut().chain(self.head.iter_mut())
    }

    pub fn input_shape(&self) -> ImageShape {
        let b = &self.arch.backbone;
        ImageShape::new(b.height, b.width, b.in_channels)
    }

    fn prepare<'a>(&self, image: &'a Image) -> Result<std::borrow::Cow<'a, [f64]>> {
        prepare_input(&self.arch.backbone, image)
    }

    /// Backbone features `f(x)`.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        let input = self.prepare(image)?;
        Ok(self.arch.backbone.forward(&self.backbone, &input, None))
    }

    fn head_forward(&self, features: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (l1, l2) = self.arch.head_layers();
        let (p1, p2) = self.head.split_at(l1.num_params());
        let mut hidden = l1.forward(p1, features);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let raw = l2.forward(p2, &hidden);
        (hidden, raw)
    }

    /// Unit-norm embedding `g(f(x)) / ‖g(f(x))‖`.
    pub fn embed_one(&self, image: &Image) -> Result<Vec<f64>> {
        let features = self.features(image)?;
        let (_, raw) = self.head_forward(&features);
        Ok(normalize(&raw))
    }

    pub fn embed(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.embed_one(im)).collect()
    }

    pub fn forward_traced(&self, image: &Image) -> Result<EncoderTrace> {
        let input = self.prepare(image)?;
        let mut backbone = BackboneTrace::default();
        let features = self
            .arch
            .backbone
            .forward(&self.backbone, &input, Some(&mut backbone));
        let (hidden, raw) = self.head_forward(&features);
        let embedding = normalize(&raw);
        Ok(EncoderTrace {
            backbone,
            features,
            hidden,
            raw,
            embedding,
        })
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(embedding).
    pub fn backward(&self, trace: &EncoderTrace, d_embedding: &[f64], grads: &mut EncoderParams) {
        let norm = l2_norm(&trace.raw).max(NORM_FLOOR);
        let z = &trace.embedding;
        let proj = dot(z, d_embedding);
        let d_raw: Vec<f64> = d_embedding
            .iter()
            .zip(z)
            .map(|(d, zi)| (d - zi * proj) / norm)
            .collect();

        let (l1, l2) = self.arch.head_layers();
        let (p1, p2) = self.head.split_at(l1.num_params());
        let (g1, g2) = grads.head.split_at_mut(l1.num_params());
        let mut d_hidden = l2.backward(p2, &trace.hidden, &d_raw, g2);
        for (d, h) in d_hidden.iter_mut().zip(&trace.hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        let d_features = l1.backward(p1, &trace.features, &d_hidden, g1);
        self.arch
            .backbone
            .backward(&self.backbone, &trace.backbone, &d_features, &mut grads.backbone, false);
    }
}

/// Checks `image` against the backbone input shape, replicating a single
/// channel when the backbone expects more.
pub(crate) fn prepare_input<'a>(arch: &BackboneArch, image: &'a Image) -> Result<std::borrow::Cow<'a, [f64]>> {
    let want = ImageShape::new(arch.height, arch.width, arch.in_channels);
    if (image.shape.height, image.shape.width) != (want.height, want.width)
        || (image.shape.channels != want.channels && image.shape.channels != 1)
    {
        return Err(Error::ShapeMismatch {
            expected: (want.height, want.width, want.channels),
            got: (image.shape.height, image.shape.width, image.shape.channels),
        });
    }
    if image.shape.channels == want.channels {
        Ok(std::borrow::Cow::Borrowed(&image.data))
    } else {
        Ok(std::borrow::Cow::Owned(image.with_channels(want.channels)?.data))
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v).max(NORM_FLOOR);
    v.iter().map(|x| x / n).collect()
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every parameter.
pub fn momentum_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config("trainer.momentum", format!("{m} not in [0, 1]")));
    }
    if !key.same_structure(query) {
        return Err(Error::StructureMismatch);
    }
    for (k, q) in key.iter_mut().zip(query.iter()) {
        *k = m * *k + (1.0 - m) * q;
    }
    Ok(())
}
