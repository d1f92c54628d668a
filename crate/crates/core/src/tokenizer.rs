//! Patch tokens from feature maps, and Sinkhorn condensation into cluster
//! tokens.
//!
//! Tokens are stored column-wise: a sequence of `N` tokens of width `D` is a
//! `D×N` tensor.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    Patch,
    Sinkhorn,
}

impl TokenizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Self::Patch),
            "sinkhorn" => Ok(Self::Sinkhorn),
            other => Err(Error::Config(format!(
                "unknown tokenizer kind {other:?} (expected patch or sinkhorn)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Patch => "patch",
            Self::Sinkhorn => "sinkhorn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    pub patch_size: usize,
    /// Cluster count for the stage-3 and stage-4 tokenizers.
    pub clusters_stage3: usize,
    pub clusters_stage4: usize,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            kind: TokenizerKind::Sinkhorn,
            patch_size: 1,
            clusters_stage3: 16,
            clusters_stage4: 8,
            epsilon: 0.05,
            iterations: 3,
        }
    }
}

impl TokenizerConfig {
    pub fn clusters(&self, stage: usize) -> usize {
        if stage == 3 {
            self.clusters_stage3
        } else {
            self.clusters_stage4
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    /// `D×N`
    pub tokens: Var,
    pub stage: usize,
}

impl TokenSequence {
    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.tokens)[0]
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.tokens)[1]
    }
}

/// Soft assignment `Q` (`K×N`) of tokens to clusters.
#[derive(Debug, Clone, Copy)]
pub struct AssignmentMatrix {
    pub q: Var,
}

impl AssignmentMatrix {
    /// (max |column sum − 1|, max |row sum − N/K|)
    pub fn marginal_errors(&self, g: &Graph) -> (f64, f64) {
        marginal_errors(g.value(self.q).data(), g.shape(self.q)[0], g.shape(self.q)[1])
    }
}

pub(crate) fn marginal_errors(q: &[f64], k: usize, n: usize) -> (f64, f64) {
    let row_target = n as f64 / k as f64;
    let mut col_err: f64 = 0.0;
    for j in 0..n {
        let s: f64 = (0..k).map(|i| q[i * n + j]).sum();
        col_err = col_err.max((s - 1.0).abs());
    }
    let mut row_err: f64 = 0.0;
    for i in 0..k {
        let s: f64 = q[i * n..(i + 1) * n].iter().sum();
        row_err = row_err.max((s - row_target).abs());
    }
    (col_err, row_err)
}

/// Split `C×H×W` into non-overlapping `P×P` patches; each token is the
/// row-major flattening of its `C×P×P` block, tokens in row-major patch order.
pub fn patchify(g: &mut Graph, feature_map: Var, patch: usize, stage: usize) -> Result<TokenSequence> {
    let s = g.shape(feature_map).to_vec();
    if s.len() != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::dim(format!("patch size {patch} does not tile feature map {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h / patch, w / patch);
    let d = c * patch * patch;
    let n = ph * pw;
    let mut indices = vec![0usize; d * n];
    for py in 0..ph {
        for px in 0..pw {
            let token = py * pw + px;
            for ch in 0..c {
                for i in 0..patch {
                    for j in 0..patch {
                        let row = (ch * patch + i) * patch + j;
                        indices[row * n + token] = (ch * h + py * patch + i) * w + px * patch + j;
                    }
                }
            }
        }
    }
    let tokens = g.gather(feature_map, indices, &[d, n])?;
    Ok(TokenSequence { tokens, stage })
}

/// Per-token linear projection `projection[D'×D] · tokens[D×N]`.
pub fn linear_embed(g: &mut Graph, tokens: TokenSequence, projection: Var) -> Result<TokenSequence> {
    let (ps, d) = (g.shape(projection).to_vec(), tokens.dim(g));
    if ps.len() != 2 || ps[1] != d {
        return Err(Error::dim(format!(
            "projection {ps:?} cannot embed tokens of width {d}"
        )));
    }
    Ok(TokenSequence {
        tokens: g.matmul(projection, tokens.tokens)?,
        stage: tokens.stage,
    })
}

/// Cosine similarity between every cluster center and every token, `K×N`.
pub fn cosine_similarity(g: &mut Graph, tokens: TokenSequence, centers: Var) -> Result<Var> {
    g.cosine_similarity(centers, tokens.tokens)
}

/// Entropic balanced assignment computed in the log domain.
///
/// Starting from `log Q = V/ε`, each iteration rescales rows toward `N/K`
/// then columns toward 1, so after the final step the column sums are exact.
pub fn sinkhorn_assign(g: &mut Graph, similarity: Var, epsilon: f64, iterations: usize) -> Result<AssignmentMatrix> {
    if !(epsilon > 0.0) || iterations == 0 {
        return Err(Error::Contract(format!(
            "sinkhorn needs epsilon > 0 and at least one iteration (got {epsilon}, {iterations})"
        )));
    }
    let s = g.shape(similarity).to_vec();
    if s.len() != 2 {
        return Err(Error::dim(format!("similarity must be K×N, got {s:?}")));
    }
    if !g.value(similarity).is_finite() {
        return Err(Error::Contract("sinkhorn similarity contains non-finite values".into()));
    }
    let (k, n) = (s[0], s[1]);
    let log_row_target = (n as f64 / k as f64).ln();

    let log_kernel = g.scale(similarity, 1.0 / epsilon);
    let mut col_pot: Option<Var> = None;
    let mut row_pot = None;
    for _ in 0..iterations {
        let shifted = match col_pot {
            Some(c) => g.add(log_kernel, c)?,
            None => log_kernel,
        };
        let lse = g.log_sum_exp(shifted, 1)?;
        let neg = g.scale(lse, -1.0);
        let f = g.add_scalar(neg, log_row_target);
        let shifted = g.add(log_kernel, f)?;
        let lse = g.log_sum_exp(shifted, 0)?;
        col_pot = Some(g.scale(lse, -1.0));
        row_pot = Some(f);
    }
    let (f, c) = (row_pot.expect("iterations >= 1"), col_pot.expect("iterations >= 1"));
    let log_q = g.add(log_kernel, f)?;
    let log_q = g.add(log_q, c)?;
    Ok(AssignmentMatrix { q: g.exp(log_q) })
}

/// `T_s = T_p · Qᵀ`, giving `K` condensed tokens of width `D`.
pub fn condense_tokens(g: &mut Graph, tokens: TokenSequence, assignment: AssignmentMatrix) -> Result<TokenSequence> {
    let (qs, n) = (g.shape(assignment.q).to_vec(), tokens.len(g));
    if qs.len() != 2 || qs[1] != n {
        return Err(Error::dim(format!(
            "assignment {qs:?} does not cover {n} tokens"
        )));
    }
    let qt = g.transpose(assignment.q)?;
    Ok(TokenSequence {
        tokens: g.matmul(tokens.tokens, qt)?,
        stage: tokens.stage,
    })
}
