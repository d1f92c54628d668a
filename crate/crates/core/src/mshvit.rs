//! One multi-scale hybrid stream: backbone, a tokenizer and transformer at
//! stage 3 and stage 4, the top-down cross-scale link, and the classifier.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::backbone::{Backbone, BackboneConfig, TAP_STAGES};
use crate::encoder::{
    build_encoder_input, classification_head, cross_scale_connect, AttentionMap, CrossScaleMode, Encoder,
    EncoderConfig,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{
    condense_tokens, cosine_similarity, linear_embed, patchify, sinkhorn_assign, TokenSequence, TokenizerConfig,
    TokenizerKind,
};

pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig::default(),
            num_classes: NUM_CLASSES,
        }
    }
}

/// Token counts along one stage of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    /// Patch tokens entering the tokenizer (after any token-mode injection).
    pub patch_tokens: usize,
    /// Tokens after the tokenizer.
    pub tokens: usize,
    /// Encoder sequence length including the class slot and injected tokens.
    pub sequence: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be positive".into()));
        }
        let t = &self.tokenizer;
        if !(t.epsilon > 0.0) || t.iterations == 0 {
            return Err(Error::Config(
                "tokenizer.epsilon must be positive and tokenizer.iterations at least 1".into(),
            ));
        }
        for stage in TAP_STAGES {
            let (_, h, w) = self.backbone.tap_shape(stage);
            if t.patch_size == 0 || h % t.patch_size != 0 || w % t.patch_size != 0 {
                return Err(Error::Config(format!(
                    "tokenizer.patch_size {} does not tile the {h}x{w} stage-{stage} map",
                    t.patch_size
                )));
            }
        }
        for stage in TAP_STAGES {
            let layout = self.stage_layout(stage);
            if t.kind == TokenizerKind::Sinkhorn && t.clusters(stage) >= layout.patch_tokens {
                return Err(Error::Config(format!(
                    "stage {stage}: {} clusters must be fewer than {} patch tokens",
                    t.clusters(stage),
                    layout.patch_tokens
                )));
            }
            if t.kind == TokenizerKind::Sinkhorn && t.clusters(stage) == 0 {
                return Err(Error::Config(format!("stage {stage}: cluster count must be positive")));
            }
        }
        Ok(())
    }

    fn raw_patch_tokens(&self, stage: usize) -> usize {
        let (_, h, w) = self.backbone.tap_shape(stage);
        let p = self.tokenizer.patch_size.max(1);
        (h / p) * (w / p)
    }

    pub fn stage_layout(&self, stage: usize) -> StageLayout {
        let tokenize = |n: usize, stage: usize| match self.tokenizer.kind {
            TokenizerKind::Sinkhorn => self.tokenizer.clusters(stage),
            TokenizerKind::Patch => n,
        };
        let n3 = self.raw_patch_tokens(3);
        let t3 = tokenize(n3, 3);
        let s3 = 1 + t3;
        if stage == 3 {
            return StageLayout {
                patch_tokens: n3,
                tokens: t3,
                sequence: s3,
            };
        }
        let mode = self.encoder.cross_scale;
        let n4 = self.raw_patch_tokens(4) + if mode == CrossScaleMode::Token { n3 } else { 0 };
        let t4 = tokenize(n4, 4);
        let extra = match mode {
            CrossScaleMode::SinkhornToken => t3,
            CrossScaleMode::Embedding => s3,
            CrossScaleMode::None | CrossScaleMode::Token => 0,
        };
        StageLayout {
            patch_tokens: n4,
            tokens: t4,
            sequence: 1 + t4 + extra,
        }
    }

    /// Width of a raw patch token at `stage`.
    pub fn patch_dim(&self, stage: usize) -> usize {
        let (c, _, _) = self.backbone.tap_shape(stage);
        c * self.tokenizer.patch_size * self.tokenizer.patch_size
    }
}

#[derive(Debug, Clone)]
struct StageParams {
    embed: ParamId,
    centers: Option<ParamId>,
    cls: ParamId,
    pos: ParamId,
    encoder: Encoder,
}

impl StageParams {
    fn new<R: Rng>(cfg: &ModelConfig, stage: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = cfg.encoder.dim;
        let din = cfg.patch_dim(stage);
        let layout = cfg.stage_layout(stage);
        let prefix = format!("stage{stage}");
        let mut embed_t = Tensor::xavier_uniform(&[d, din], din, d, rng);
        if cfg.tokenizer.kind == TokenizerKind::Sinkhorn {
            // condensation sums N/K patches per token; scale by K/N to keep token magnitude at unit order
            let f = cfg.tokenizer.clusters(stage) as f64 / layout.patch_tokens as f64;
            embed_t = embed_t.map(|x| x * f);
        }
        let embed = store.add(format!("{prefix}.embed"), embed_t);
        let centers = (cfg.tokenizer.kind == TokenizerKind::Sinkhorn).then(|| {
            let k = cfg.tokenizer.clusters(stage);
            store.add(format!("{prefix}.centers"), Tensor::xavier_uniform(&[d, k], d, k, rng))
        });
        let cls = store.add(format!("{prefix}.cls"), Tensor::xavier_uniform(&[d, 1], d, d, rng));
        let pos = store.add(
            format!("{prefix}.pos"),
            Tensor::xavier_uniform(&[d, layout.sequence], d, d, rng),
        );
        let encoder = Encoder::new(&cfg.encoder, stage, store, &format!("{prefix}.encoder"), rng)?;
        Ok(Self {
            embed,
            centers,
            cls,
            pos,
            encoder,
        })
    }
}

/// Forward products of one stream.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    /// `C×1`
    pub logits: Var,
    /// `C×1`, sigmoid of the logits.
    pub probs: Var,
    /// Per-layer attention maps keyed by stage.
    pub attention: BTreeMap<usize, Vec<AttentionMap>>,
}

/// Parameter layout of a stream. The same layout describes every
/// [`ParamStore`] built by [`StreamArch::new`] with the same config.
#[derive(Debug, Clone)]
pub struct StreamArch {
    cfg: ModelConfig,
    backbone: Backbone,
    stage3: StageParams,
    stage4: StageParams,
    cross: Option<ParamId>,
    head_w: ParamId,
    head_b: ParamId,
}

impl StreamArch {
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(&cfg.backbone, store, "backbone", rng)?;
        let stage3 = StageParams::new(cfg, 3, store, rng)?;
        let stage4 = StageParams::new(cfg, 4, store, rng)?;
        let d = cfg.encoder.dim;
        let cross = (cfg.encoder.cross_scale != CrossScaleMode::None)
            .then(|| store.add("cross_scale.projection", Tensor::xavier_uniform(&[d, d], d, d, rng)));
        let c = cfg.num_classes;
        // zero head: every class starts at probability 0.5
        let head_w = store.add("head.weight", Tensor::zeros(&[c, d]));
        let head_b = store.add("head.bias", Tensor::zeros(&[c, 1]));
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            stage3,
            stage4,
            cross,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tokenize(&self, g: &mut Graph, params: &Bound, stage: &StageParams, tokens: TokenSequence) -> Result<TokenSequence> {
        match stage.centers {
            Some(centers) => {
                let v = cosine_similarity(g, tokens, params.var(centers))?;
                let q = sinkhorn_assign(g, v, self.cfg.tokenizer.epsilon, self.cfg.tokenizer.iterations)?;
                condense_tokens(g, tokens, q)
            }
            None => Ok(tokens),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &Bound, image: Var) -> Result<StreamOutput> {
        let p = self.cfg.tokenizer.patch_size;
        let mode = self.cfg.encoder.cross_scale;
        let pyramid = self.backbone.forward(g, params, image)?;

        let raw3 = patchify(g, pyramid.tap(3)?, p, 3)?;
        let tp3 = linear_embed(g, raw3, params.var(self.stage3.embed))?;
        let ts3 = self.tokenize(g, params, &self.stage3, tp3)?;
        let z3 = build_encoder_input(g, ts3, params.var(self.stage3.cls), params.var(self.stage3.pos))?;
        let (zl3, maps3) = self.stage3.encoder.forward(g, params, z3)?;

        let raw4 = patchify(g, pyramid.tap(4)?, p, 4)?;
        let mut tp4 = linear_embed(g, raw4, params.var(self.stage4.embed))?;
        let cross = self.cross.map(|id| params.var(id));
        if let (CrossScaleMode::Token, Some(proj)) = (mode, cross) {
            tp4 = cross_scale_connect(g, tp4, tp3.tokens, proj)?;
        }
        let mut ts4 = self.tokenize(g, params, &self.stage4, tp4)?;
        match (mode, cross) {
            (CrossScaleMode::SinkhornToken, Some(proj)) => ts4 = cross_scale_connect(g, ts4, ts3.tokens, proj)?,
            (CrossScaleMode::Embedding, Some(proj)) => ts4 = cross_scale_connect(g, ts4, zl3, proj)?,
            _ => {}
        }
        let z4 = build_encoder_input(g, ts4, params.var(self.stage4.cls), params.var(self.stage4.pos))?;
        let (zl4, maps4) = self.stage4.encoder.forward(g, params, z4)?;

        let z_cls = g.slice_cols(zl4, 0, 1)?;
        let logits = classification_head(g, z_cls, params.var(self.head_w), params.var(self.head_b))?;
        let probs = g.sigmoid(logits);
        let mut attention = BTreeMap::new();
        attention.insert(3, maps3);
        attention.insert(4, maps4);
        Ok(StreamOutput {
            logits,
            probs,
            attention,
        })
    }

    /// Class probabilities for one image without recording gradients.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params = store.bind(&mut g, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &params, x)?;
        Ok(g.value(out.probs).data().to_vec())
    }
}
