//! Transformer encoder over `[class ⊕ tokens] + positional encoding`, with
//! attention maps exposed per layer.

use rand::Rng;

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

/// Where stage-3 features are injected into the stage-4 token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossScaleMode {
    None,
    /// Linearly embedded patch tokens, before condensation.
    Token,
    /// Condensed (Sinkhorn) tokens.
    SinkhornToken,
    /// Final encoder output `Z_L`.
    Embedding,
}

impl CrossScaleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "token" => Ok(Self::Token),
            "sinkhorn-token" => Ok(Self::SinkhornToken),
            "embedding" => Ok(Self::Embedding),
            other => Err(Error::Config(format!(
                "unknown cross-scale mode {other:?} (expected none, token, sinkhorn-token or embedding)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Token => "token",
            Self::SinkhornToken => "sinkhorn-token",
            Self::Embedding => "embedding",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub cross_scale: CrossScaleMode,
    /// Per-token scale-shift normalisation before each sublayer.
    pub norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 2,
            dim: 32,
            ffn_dim: 64,
            cross_scale: CrossScaleMode::Embedding,
            norm: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder.dim {} must be a positive multiple of encoder.heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("encoder.ffn_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Post-softmax attention weights of one layer, one `M×M` map per head
/// (row = query).
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub heads: Vec<Var>,
    pub layer: usize,
    pub stage: usize,
}

impl AttentionMap {
    /// Materialised `heads×M×M` weights.
    pub fn weights(&self, g: &Graph) -> Tensor {
        let m = g.shape(self.heads[0])[0];
        let data = self
            .heads
            .iter()
            .flat_map(|&h| g.value(h).data().iter().copied())
            .collect();
        Tensor::new(&[self.heads.len(), m, m], data).expect("heads share one shape")
    }

    /// Differentiable mean over heads.
    pub fn head_mean(&self, g: &mut Graph) -> Result<Var> {
        let mut acc = self.heads[0];
        for &h in &self.heads[1..] {
            acc = g.add(acc, h)?;
        }
        Ok(g.scale(acc, 1.0 / self.heads.len() as f64))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderInput {
    /// `D×(N+1)`, column 0 is the class slot.
    pub z0: Var,
}

/// `Z_0 = [x_cls ⊕ tokens] + E_pos`, column-wise.
pub fn build_encoder_input(g: &mut Graph, tokens: TokenSequence, cls: Var, pos: Var) -> Result<EncoderInput> {
    let (d, n) = (tokens.dim(g), tokens.len(g));
    if g.shape(cls) != [d, 1] {
        return Err(Error::dim(format!(
            "class token {:?} does not match token width {d}",
            g.shape(cls)
        )));
    }
    if g.shape(pos) != [d, n + 1] {
        return Err(Error::dim(format!(
            "positional encoding {:?} does not match sequence [{d}, {}]",
            g.shape(pos),
            n + 1
        )));
    }
    let seq = g.concat_cols(&[cls, tokens.tokens])?;
    Ok(EncoderInput { z0: g.add(seq, pos)? })
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm: Option<[ParamId; 4]>,
}

impl LayerParams {
    pub fn new<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let (d, f) = (cfg.dim, cfg.ffn_dim);
        let mut square = |name: &str, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Tensor::xavier_uniform(&[d, d], d, d, rng))
        };
        let wq = square("wq", rng);
        let wk = square("wk", rng);
        let wv = square("wv", rng);
        let wo = square("wo", rng);
        let w1 = store.add(format!("{prefix}.w1"), Tensor::xavier_uniform(&[f, d], d, f, rng));
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[f, 1]));
        let w2 = store.add(format!("{prefix}.w2"), Tensor::xavier_uniform(&[d, f], f, d, rng));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[d, 1]));
        let norm = cfg.norm.then(|| {
            [
                store.add(format!("{prefix}.norm1.scale"), Tensor::full(&[d, 1], 1.0)),
                store.add(format!("{prefix}.norm1.shift"), Tensor::zeros(&[d, 1])),
                store.add(format!("{prefix}.norm2.scale"), Tensor::full(&[d, 1], 1.0)),
                store.add(format!("{prefix}.norm2.shift"), Tensor::zeros(&[d, 1])),
            ]
        });
        Self { wq, wk, wv, wo, w1, b1, w2, b2, norm }
    }
}

/// Normalise every token (column) to zero mean and unit variance, then apply
/// a learned per-feature scale and shift.
fn scale_shift_norm(g: &mut Graph, z: Var, scale: Var, shift: Var) -> Result<Var> {
    let d = g.shape(z)[0] as f64;
    let sum = g.sum_axis(z, 0)?;
    let mean = g.scale(sum, 1.0 / d);
    let centered = g.sub(z, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.sum_axis(sq, 0)?;
    let var = g.scale(var, 1.0 / d);
    let var = g.add_scalar(var, 1e-5);
    // sqrt via exp(ln(x)/2)
    let ln = g.ln(var);
    let half = g.scale(ln, 0.5);
    let std = g.exp(half);
    let normed = g.div(centered, std)?;
    let scaled = g.mul(normed, scale)?;
    g.add(scaled, shift)
}

/// Multi-head self-attention with a residual connection.
pub fn mhsa_layer(
    g: &mut Graph,
    z: Var,
    layer: &LayerParams,
    params: &Bound,
    cfg: &EncoderConfig,
) -> Result<(Var, Vec<Var>)> {
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[0] != cfg.dim {
        return Err(Error::dim(format!(
            "attention input {s:?} does not have {} rows",
            cfg.dim
        )));
    }
    if !cfg.dim.is_multiple_of(cfg.heads) {
        return Err(Error::dim(format!("dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
    }
    let x = match layer.norm {
        Some([scale, shift, _, _]) => scale_shift_norm(g, z, params.var(scale), params.var(shift))?,
        None => z,
    };
    let q = g.matmul(params.var(layer.wq), x)?;
    let k = g.matmul(params.var(layer.wk), x)?;
    let v = g.matmul(params.var(layer.wv), x)?;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut outputs = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.slice_rows(q, h * dh, dh)?;
        let kh = g.slice_rows(k, h * dh, dh)?;
        let vh = g.slice_rows(v, h * dh, dh)?;
        let qt = g.transpose(qh)?;
        let scores = g.matmul(qt, kh)?;
        let scores = g.scale(scores, inv_sqrt);
        let attn = g.softmax(scores, 1)?;
        let at = g.transpose(attn)?;
        outputs.push(g.matmul(vh, at)?);
        maps.push(attn);
    }
    let heads = g.concat_rows(&outputs)?;
    let projected = g.matmul(params.var(layer.wo), heads)?;
    Ok((g.add(z, projected)?, maps))
}

/// Position-wise two-layer ReLU network with a residual connection.
pub fn feed_forward(g: &mut Graph, z: Var, layer: &LayerParams, params: &Bound) -> Result<Var> {
    let x = match layer.norm {
        Some([_, _, scale, shift]) => scale_shift_norm(g, z, params.var(scale), params.var(shift))?,
        None => z,
    };
    let h = g.matmul(params.var(layer.w1), x)?;
    let h = g.add(h, params.var(layer.b1))?;
    let h = g.relu(h);
    let o = g.matmul(params.var(layer.w2), h)?;
    let o = g.add(o, params.var(layer.b2))?;
    g.add(z, o)
}

/// One transformer stage: its layers and the stage index reported on its maps.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<LayerParams>,
    pub stage: usize,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, stage: usize, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth)
            .map(|l| LayerParams::new(cfg, store, &format!("{prefix}.layer{l}"), rng))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            stage,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &Bound, input: EncoderInput) -> Result<(Var, Vec<AttentionMap>)> {
        let mut z = input.z0;
        let mut maps = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (attended, heads) = mhsa_layer(g, z, layer, params, &self.cfg)?;
            z = feed_forward(g, attended, layer, params)?;
            maps.push(AttentionMap {
                heads,
                layer: i,
                stage: self.stage,
            });
        }
        Ok((z, maps))
    }
}

/// Top-down injection: project `lower` (`D×k`, any stage-3 representation)
/// with a learned `D×D` map and append it to the stage-4 token sequence.
pub fn cross_scale_connect(g: &mut Graph, upper: TokenSequence, lower: Var, projection: Var) -> Result<TokenSequence> {
    let (d, ls, ps) = (upper.dim(g), g.shape(lower).to_vec(), g.shape(projection).to_vec());
    if ps.len() != 2 || ps[0] != d || ls.len() != 2 || ps[1] != ls[0] {
        return Err(Error::dim(format!(
            "cross-scale projection {ps:?} cannot map {ls:?} into width {d}"
        )));
    }
    let injected = g.matmul(projection, lower)?;
    Ok(TokenSequence {
        tokens: g.concat_cols(&[upper.tokens, injected])?,
        stage: upper.stage,
    })
}

/// Linear classifier on the class-token embedding, returning `C×1` logits.
pub fn classification_head(g: &mut Graph, z_cls: Var, weight: Var, bias: Var) -> Result<Var> {
    let h = g.matmul(weight, z_cls)?;
    g.add(h, bias)
}
