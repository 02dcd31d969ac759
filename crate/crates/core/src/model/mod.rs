//! A small text-conditioned query segmenter.
//!
//! Data flow for a batch of `B` letterboxed images and concept embeddings:
//!
//! * stem: 2x2 patches -> linear -> ReLU, giving pixel features at half the
//!   canvas resolution (the mask resolution);
//! * patch embedding: 8x8 groups of stem features -> linear, plus a learned
//!   position embedding, on a grid of `canvas / 16` cells;
//! * encoder: twelve pre-norm blocks; blocks 4, 8 and 12 mix tokens with
//!   self-attention, the others with a depthwise 3x3 filter;
//! * text conditioning: the concept embedding is projected and used to
//!   modulate the encoder features feature-wise, `F * (1 + m)`;
//! * decoder: learned queries (shifted by a text projection) cross-attend
//!   to the modulated features, then self-attend;
//! * heads: a class logit scored by dot product against the projected text,
//!   a presence logit, a sigmoid box, and a mask embedding that is dotted
//!   with per-pixel embeddings from a light pixel decoder.

pub mod checkpoint;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::corpus::Raster;
use crate::geometry::{Grid, NormBox, ScoreMap};
use crate::inference::Segmenter;
use crate::objective::graph::resize_bilinear;
use crate::objective::{clamp_prob, sigmoid};
use crate::rng::{derive_seed, fnv1a, Stream};
use crate::{Error, Result};

/// Encoder blocks that use self-attention instead of the depthwise mixer.
const ATTENTION_BLOCKS: [usize; 3] = [4, 8, 12];
const LN_EPS: f64 = 1e-5;
/// Canvas pixels per token side, and stem cells per token side.
const PATCH: usize = 16;
const CELLS: usize = PATCH / 2;

/// One decoder query's outputs, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction {
    pub class_logit: f64,
    pub presence_logit: f64,
    pub bbox: NormBox,
    /// Mask logits at the model's mask resolution.
    pub mask_logits: ScoreMap,
}

fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

impl QueryPrediction {
    /// Builds a prediction from probabilities (mostly useful in tests).
    pub fn from_probs(p_cls: f64, p_pres: f64, bbox: NormBox, mask_logits: ScoreMap) -> Self {
        QueryPrediction {
            class_logit: logit(p_cls),
            presence_logit: logit(p_pres),
            bbox,
            mask_logits,
        }
    }

    pub fn class_prob(&self) -> f64 {
        sigmoid(self.class_logit)
    }

    pub fn presence_prob(&self) -> f64 {
        sigmoid(self.presence_logit)
    }

    /// `sigmoid(class) * sigmoid(presence)`.
    pub fn confidence(&self) -> f64 {
        self.class_prob() * self.presence_prob()
    }
}

/// Unit-norm text embedding of a concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedding {
    pub vector: Vec<f64>,
}

/// Deterministic stand-in text encoder: the FNV-1a hash of the concept seeds
/// a SplitMix64 stream, `dim` standard normals are drawn and the vector is
/// normalized.
pub fn embed_concept(concept: &str, dim: usize) -> Result<ConceptEmbedding> {
    if concept.is_empty() {
        return Err(Error::Validation("cannot embed an empty concept".into()));
    }
    if dim == 0 {
        return Err(Error::Validation("embedding dimension must be positive".into()));
    }
    let mut stream = Stream::new(fnv1a(concept));
    let raw: Vec<f64> = (0..dim).map(|_| stream.normal()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ConceptEmbedding {
        vector: raw.into_iter().map(|v| v / norm).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of decoder queries.
    pub n_q: usize,
    pub embed_dim: usize,
    pub text_dim: usize,
    pub stem_dim: usize,
    pub mask_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_layers: usize,
    /// Side of the square letterbox canvas; must be a multiple of 16.
    pub canvas: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_q: 200,
            embed_dim: 48,
            text_dim: 64,
            stem_dim: 16,
            mask_dim: 16,
            heads: 4,
            encoder_depth: 12,
            decoder_layers: 2,
            canvas: 1008,
        }
    }
}

impl ModelConfig {
    /// The desk-scale configuration used by the synthetic overfit run.
    pub fn toy() -> Self {
        ModelConfig {
            n_q: 20,
            canvas: 128,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_q == 0 {
            return bad("n_q must be at least 1".into());
        }
        if self.canvas == 0 || self.canvas % PATCH != 0 {
            return bad(format!("canvas must be a positive multiple of {PATCH}, got {}", self.canvas));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.encoder_depth != 12 {
            return bad(format!(
                "encoder_depth must be 12 (one block per decayed layer), got {}",
                self.encoder_depth
            ));
        }
        if [self.embed_dim, self.text_dim, self.stem_dim, self.mask_dim, self.decoder_layers]
            .contains(&0)
        {
            return bad("model dimensions must be positive".into());
        }
        Ok(())
    }

    /// Side of the mask-logit grid.
    pub fn mask_size(&self) -> usize {
        self.canvas / 2
    }

    /// Side of the encoder token grid.
    pub fn grid_size(&self) -> usize {
        self.canvas / PATCH
    }
}

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Decoder, segmentation head and dot-product scoring.
    DecoderSegDot,
    VisionBackbone,
    LanguageBackbone,
    GeometryPrompt,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::DecoderSegDot,
        ParamGroup::VisionBackbone,
        ParamGroup::LanguageBackbone,
        ParamGroup::GeometryPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::DecoderSegDot => "decoder_seg_dot",
            ParamGroup::VisionBackbone => "vision_backbone",
            ParamGroup::LanguageBackbone => "language_backbone",
            ParamGroup::GeometryPrompt => "geometry_prompt",
        }
    }
}

/// A trainable tensor with its group and, for the vision backbone, its
/// layer index in `1..=12`.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub group: ParamGroup,
    pub layer: Option<usize>,
}

struct Builder {
    params: Vec<Param>,
    seed: u64,
    dtype: DType,
    device: Device,
    group: ParamGroup,
    layer: Option<usize>,
}

enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

impl Builder {
    fn scope(&mut self, group: ParamGroup, layer: Option<usize>) {
        self.group = group;
        self.layer = layer;
    }

    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let mut s = Stream::new(derive_seed(self.seed, fnv1a(name)));
                (0..n).map(|_| s.normal() * std).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.push(Param {
            name: name.to_string(),
            var,
            group: self.group,
            layer: self.layer,
        });
        Ok(out)
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(&format!("{name}.weight"), &[output, input], Init::Normal(1.0 / (input as f64).sqrt()))?,
            b: self.tensor(&format!("{name}.bias"), &[output], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            g: self.tensor(&format!("{name}.gain"), &[dim], Init::Ones)?,
            b: self.tensor(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    fn attention(&mut self, name: &str, dim: usize, heads: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), dim, dim)?,
            k: self.linear(&format!("{name}.k"), dim, dim)?,
            v: self.linear(&format!("{name}.v"), dim, dim)?,
            o: self.linear(&format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize) -> Result<Mlp> {
        Ok(Mlp {
            fc1: self.linear(&format!("{name}.fc1"), input, hidden)?,
            fc2: self.linear(&format!("{name}.fc2"), hidden, output)?,
        })
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("linear input has a feature dim");
        let rows = x.elem_count() / input;
        let y = x.reshape((rows, input))?.matmul(&self.w.t()?)?.broadcast_add(&self.b)?;
        let mut out = dims;
        *out.last_mut().expect("non-empty") = self.w.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    g: Tensor,
    b: Tensor,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let num = x.broadcast_sub(&max)?.exp()?;
    let den = num.sum_keepdim(D::Minus1)?;
    Ok(num.broadcast_div(&den)?)
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    /// Multi-head attention of `query` (B, Tq, D) over `key`/`value` (B, Tk, D).
    fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let tk = key.dim(1)?;
        let hd = d / self.heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            Ok(x.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, tq)?;
        let k = split(self.k.forward(key)?, tk)?;
        let v = split(self.v.forward(value)?, tk)?;
        let scores = q.matmul(&k.t()?)?.affine(1.0 / (hd as f64).sqrt(), 0.0)?;
        let mixed = softmax_last(&scores)?.matmul(&v)?;
        let merged = mixed.transpose(1, 2)?.reshape((b, tq, d))?;
        self.o.forward(&merged)
    }
}

#[derive(Debug, Clone)]
enum Mixer {
    /// Depthwise 3x3 filter: weights (9, D) in row-major tap order, bias (D).
    Depthwise { w: Tensor, b: Tensor },
    Attention(Attention),
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm1: LayerNorm,
    mixer: Mixer,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl EncoderBlock {
    fn forward(&self, x: &Tensor, grid: usize) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let mixed = match &self.mixer {
            Mixer::Attention(attn) => attn.forward(&h, &h, &h)?,
            Mixer::Depthwise { w, b } => {
                let (bs, _, d) = h.dims3()?;
                let padded = h
                    .reshape((bs, grid, grid, d))?
                    .pad_with_zeros(1, 1, 1)?
                    .pad_with_zeros(2, 1, 1)?;
                let mut acc = b.reshape((1, 1, 1, d))?.broadcast_as((bs, grid, grid, d))?;
                for tap in 0..9 {
                    let shifted = padded.narrow(1, tap / 3, grid)?.narrow(2, tap % 3, grid)?;
                    acc = (acc + shifted.broadcast_mul(&w.get(tap)?)?)?;
                }
                acc.reshape((bs, grid * grid, d))?
            }
        };
        let x = (x + mixed)?;
        let out = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + out)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_cross: LayerNorm,
    cross: Attention,
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

/// Raw head outputs of a batch; the training loss consumes these directly.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// (B, Nq)
    pub class_logits: Tensor,
    /// (B, Nq)
    pub presence_logits: Tensor,
    /// (B, Nq, 4), center-size in (0, 1)
    pub boxes: Tensor,
    /// (B, Nq, h, w)
    pub mask_logits: Tensor,
    /// (B)
    pub global_presence_logits: Tensor,
}

impl ModelOutput {
    /// Whether every output head is free of NaN and infinity.
    pub fn is_finite(&self) -> Result<bool> {
        for t in [
            &self.class_logits,
            &self.presence_logits,
            &self.boxes,
            &self.mask_logits,
            &self.global_presence_logits,
        ] {
            let sum = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
            if !sum.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Detaches the batch into per-image query predictions.
    pub fn to_predictions(&self) -> Result<Vec<Vec<QueryPrediction>>> {
        let f64s = |t: &Tensor| -> Result<Vec<f64>> {
            Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
        };
        let (b, n_q, h, w) = self.mask_logits.dims4()?;
        let cls = f64s(&self.class_logits)?;
        let pres = f64s(&self.presence_logits)?;
        let boxes = f64s(&self.boxes)?;
        let masks = f64s(&self.mask_logits)?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut row = Vec::with_capacity(n_q);
            for q in 0..n_q {
                let k = i * n_q + q;
                let bx = &boxes[k * 4..k * 4 + 4];
                row.push(QueryPrediction {
                    class_logit: cls[k],
                    presence_logit: pres[k],
                    bbox: NormBox::new(bx[0], bx[1], bx[2], bx[3]),
                    mask_logits: Grid::from_vec(h, w, masks[k * h * w..(k + 1) * h * w].to_vec())?,
                });
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// The stand-in segmenter.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    params: Vec<Param>,
    dtype: DType,
    device: Device,
    // Vision backbone.
    stem: Linear,
    patch: Linear,
    pos: Tensor,
    blocks: Vec<EncoderBlock>,
    enc_norm: LayerNorm,
    // Language projection.
    lang: Linear,
    modulate: Linear,
    // Decoder, heads and pixel decoder.
    queries: Tensor,
    query_text: Linear,
    pos_dec: Tensor,
    layers: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    cls_proj: Linear,
    score_proj: Linear,
    cls_bias: Tensor,
    presence: Linear,
    box_head: Mlp,
    mask_head: Mlp,
    pix_feat: Linear,
    pix_stem: Linear,
    pix_out: Linear,
    global_presence: Linear,
}

impl ToyModel {
    /// Builds a model with parameters drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.embed_dim;
        let tokens = c.grid_size() * c.grid_size();
        let mut b = Builder {
            params: Vec::new(),
            seed,
            dtype,
            device: device.clone(),
            group: ParamGroup::VisionBackbone,
            layer: Some(1),
        };

        // The stem and patch embedding sit below block 1 and share its rate.
        let stem = b.linear("vision.stem", 12, c.stem_dim)?;
        let patch = b.linear("vision.patch", CELLS * CELLS * c.stem_dim, d)?;
        let pos = b.tensor("vision.pos", &[tokens, d], Init::Normal(0.02))?;
        let mut blocks = Vec::with_capacity(c.encoder_depth);
        for l in 1..=c.encoder_depth {
            b.scope(ParamGroup::VisionBackbone, Some(l));
            let name = format!("vision.block{l:02}");
            let mixer = if ATTENTION_BLOCKS.contains(&l) {
                Mixer::Attention(b.attention(&format!("{name}.attn"), d, c.heads)?)
            } else {
                Mixer::Depthwise {
                    w: b.tensor(&format!("{name}.dw.weight"), &[9, d], Init::Normal(1.0 / 3.0))?,
                    b: b.tensor(&format!("{name}.dw.bias"), &[d], Init::Zeros)?,
                }
            };
            blocks.push(EncoderBlock {
                norm1: b.norm(&format!("{name}.norm1"), d)?,
                mixer,
                norm2: b.norm(&format!("{name}.norm2"), d)?,
                mlp: b.mlp(&format!("{name}.mlp"), d, 2 * d, d)?,
            });
        }
        let enc_norm = b.norm("vision.block12.out_norm", d)?;

        b.scope(ParamGroup::LanguageBackbone, None);
        let lang = b.linear("language.proj", c.text_dim, d)?;
        let modulate = b.linear("language.modulate", d, d)?;

        b.scope(ParamGroup::GeometryPrompt, None);
        // Point/box prompt embedding. Text-only training never feeds it.
        b.linear("geometry.box_embed", 4, d)?;
        b.tensor("geometry.point_embed", &[2, d], Init::Normal(0.02))?;

        b.scope(ParamGroup::DecoderSegDot, None);
        let queries = b.tensor("decoder.queries", &[c.n_q, d], Init::Normal(1.0))?;
        let query_text = b.linear("decoder.query_text", d, d)?;
        let pos_dec = b.tensor("decoder.pos", &[tokens, d], Init::Normal(0.02))?;
        let mut layers = Vec::with_capacity(c.decoder_layers);
        for i in 0..c.decoder_layers {
            let name = format!("decoder.layer{i}");
            layers.push(DecoderLayer {
                norm_cross: b.norm(&format!("{name}.norm_cross"), d)?,
                cross: b.attention(&format!("{name}.cross"), d, c.heads)?,
                norm_self: b.norm(&format!("{name}.norm_self"), d)?,
                self_attn: b.attention(&format!("{name}.self"), d, c.heads)?,
                norm_mlp: b.norm(&format!("{name}.norm_mlp"), d)?,
                mlp: b.mlp(&format!("{name}.mlp"), d, 2 * d, d)?,
            });
        }
        let dec_norm = b.norm("decoder.out_norm", d)?;
        let cls_proj = b.linear("head.cls_proj", d, d)?;
        let score_proj = b.linear("head.score_proj", d, d)?;
        let cls_bias = b.tensor("head.cls_bias", &[1], Init::Const(-2.0))?;
        let presence = b.linear("head.presence", d, 1)?;
        let box_head = b.mlp("head.box", d, d, 4)?;
        let mask_head = b.mlp("head.mask", d, d, c.mask_dim)?;
        let pix_feat = b.linear("pixel.feat", d, c.mask_dim)?;
        let pix_stem = b.linear("pixel.stem", c.stem_dim, c.mask_dim)?;
        let pix_out = b.linear("pixel.out", c.mask_dim, c.mask_dim)?;
        let global_presence = b.linear("head.global_presence", d, 1)?;

        let model = ToyModel {
            config,
            params: b.params,
            dtype,
            device: device.clone(),
            stem,
            patch,
            pos,
            blocks,
            enc_norm,
            lang,
            modulate,
            queries,
            query_text,
            pos_dec,
            layers,
            dec_norm,
            cls_proj,
            score_proj,
            cls_bias,
            presence,
            box_head,
            mask_head,
            pix_feat,
            pix_stem,
            pix_out,
            global_presence,
        };
        model.check_groups()?;
        Ok(model)
    }

    fn check_groups(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                return Err(Error::Validation(format!("parameter {} registered twice", p.name)));
            }
            let layered = p.group == ParamGroup::VisionBackbone;
            let valid_layer = matches!(p.layer, Some(l) if (1..=self.config.encoder_depth).contains(&l));
            if layered != p.layer.is_some() || (layered && !valid_layer) {
                return Err(Error::Validation(format!(
                    "parameter {} has an inconsistent group/layer assignment",
                    p.name
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All trainable parameters in registration order.
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// Parameter names grouped by learning-rate group.
    pub fn parameter_groups(&self) -> Vec<(ParamGroup, Vec<&Param>)> {
        ParamGroup::ALL
            .iter()
            .map(|&g| (g, self.params.iter().filter(|p| p.group == g).collect()))
            .collect()
    }

    /// Distinct layer indices exposed by the vision backbone, ascending.
    pub fn vision_layers(&self) -> Vec<usize> {
        let set: std::collections::BTreeSet<usize> = self.params.iter().filter_map(|p| p.layer).collect();
        set.into_iter().collect()
    }

    /// Stacks letterboxed rasters into a (B, H, W, 3) tensor.
    pub fn image_batch(&self, images: &[&Raster]) -> Result<Tensor> {
        let side = self.config.canvas;
        let mut data = Vec::with_capacity(images.len() * side * side * 3);
        for img in images {
            if (img.height(), img.width()) != (side, side) {
                return Err(Error::Validation(format!(
                    "image is {}x{}, expected the {side}x{side} canvas",
                    img.height(),
                    img.width()
                )));
            }
            data.extend_from_slice(img.pixels());
        }
        Ok(Tensor::from_vec(data, (images.len(), side, side, 3), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Stacks concept embeddings into a (B, text_dim) tensor.
    pub fn text_batch(&self, embeddings: &[&ConceptEmbedding]) -> Result<Tensor> {
        let dim = self.config.text_dim;
        let mut data = Vec::with_capacity(embeddings.len() * dim);
        for e in embeddings {
            if e.vector.len() != dim {
                return Err(Error::Validation(format!(
                    "concept embedding has dimension {}, model expects {dim}",
                    e.vector.len()
                )));
            }
            data.extend_from_slice(&e.vector);
        }
        Ok(Tensor::from_vec(data, (embeddings.len(), dim), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Runs the network on images (B, H, W, 3) and text (B, text_dim).
    pub fn forward(&self, images: &Tensor, text: &Tensor) -> Result<ModelOutput> {
        let c = &self.config;
        let (bs, h, w, ch) = images.dims4()?;
        if (h, w, ch) != (c.canvas, c.canvas, 3) {
            return Err(Error::Validation(format!(
                "image batch has shape {:?}, expected (B, {side}, {side}, 3)",
                images.dims(),
                side = c.canvas
            )));
        }
        if text.dims() != [bs, c.text_dim] {
            return Err(Error::Validation(format!(
                "text batch has shape {:?}, expected ({bs}, {})",
                text.dims(),
                c.text_dim
            )));
        }
        let d = c.embed_dim;
        let m = c.mask_size();
        let g = c.grid_size();

        // Stem at mask resolution.
        let patches = images
            .reshape((bs, m, 2, m, 2, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((bs, m * m, 12))?;
        let stem = self.stem.forward(&patches)?.relu()?; // (B, m*m, Cs)

        // Patch embedding onto the token grid.
        let tokens = stem
            .reshape((bs, g, CELLS, g, CELLS, c.stem_dim))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((bs, g * g, CELLS * CELLS * c.stem_dim))?;
        let mut x = self.patch.forward(&tokens)?.broadcast_add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x, g)?;
        }
        let feats = self.enc_norm.forward(&x)?; // (B, g*g, D)

        // Text conditioning.
        let t = self.lang.forward(text)?; // (B, D)
        let modulation = self.modulate.forward(&t)?.affine(1.0, 1.0)?.unsqueeze(1)?;
        let fmod = feats.broadcast_mul(&modulation)?;

        // Decoder.
        let keys = fmod.broadcast_add(&self.pos_dec)?;
        let mut hq = self
            .queries
            .unsqueeze(0)?
            .broadcast_add(&self.query_text.forward(&t)?.unsqueeze(1)?)?;
        for layer in &self.layers {
            let q = layer.norm_cross.forward(&hq)?;
            hq = (&hq + layer.cross.forward(&q, &keys, &fmod)?)?;
            let q = layer.norm_self.forward(&hq)?;
            hq = (&hq + layer.self_attn.forward(&q, &q, &q)?)?;
            hq = (&hq + layer.mlp.forward(&layer.norm_mlp.forward(&hq)?)?)?;
        }
        let hq = self.dec_norm.forward(&hq)?; // (B, Nq, D)

        // Heads.
        let score = self.score_proj.forward(&t)?.unsqueeze(1)?;
        let class_logits = self
            .cls_proj
            .forward(&hq)?
            .broadcast_mul(&score)?
            .sum(D::Minus1)?
            .affine(1.0 / (d as f64).sqrt(), 0.0)?
            .broadcast_add(&self.cls_bias)?;
        let presence_logits = self.presence.forward(&hq)?.squeeze(D::Minus1)?;
        let boxes = candle_nn::ops::sigmoid(&self.box_head.forward(&hq)?)?;

        // Pixel decoder: upsampled text-modulated features plus stem detail.
        let coarse = self
            .pix_feat
            .forward(&fmod)? // (B, g*g, Cm)
            .transpose(1, 2)?
            .reshape((bs * c.mask_dim, g, g))?;
        let up = resize_bilinear(&coarse, m, m)?
            .reshape((bs, c.mask_dim, m * m))?
            .transpose(1, 2)?;
        let pixels = self.pix_out.forward(&(up + self.pix_stem.forward(&stem)?)?.relu()?)?; // (B, m*m, Cm)
        let embed = self.mask_head.forward(&hq)?; // (B, Nq, Cm)
        let mask_logits = embed
            .matmul(&pixels.transpose(1, 2)?)?
            .reshape((bs, c.n_q, m, m))?;

        let global_presence_logits = self
            .global_presence
            .forward(&fmod.mean(1)?)?
            .squeeze(D::Minus1)?;

        Ok(ModelOutput {
            class_logits,
            presence_logits,
            boxes,
            mask_logits,
            global_presence_logits,
        })
    }

    /// Overwrites parameter values by name (used when loading checkpoints).
    pub fn load_values(&self, values: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for p in &self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| Error::Validation(format!("checkpoint is missing parameter {}", p.name)))?;
            if v.dims() != p.var.dims() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?} in the checkpoint, expected {:?}",
                    p.name,
                    v.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&v.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

impl Segmenter for ToyModel {
    fn canvas(&self) -> usize {
        self.config.canvas
    }

    fn predict(&self, image: &Raster, concepts: &[String]) -> Result<Vec<Vec<QueryPrediction>>> {
        if concepts.is_empty() {
            return Ok(Vec::new());
        }
        let embeddings = concepts
            .iter()
            .map(|c| embed_concept(c, self.config.text_dim))
            .collect::<Result<Vec<_>>>()?;
        let images = self.image_batch(&vec![image; concepts.len()])?;
        let text = self.text_batch(&embeddings.iter().collect::<Vec<_>>())?;
        self.forward(&images, &text)?.to_predictions()
    }
}
