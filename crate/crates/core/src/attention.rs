//! Topic-aware attention: three mechanisms scoring history utterances
//! against a factoid's topic embedding, the semantic feature-interaction
//! matrix, and the aggregation into per-factoid pair representations.
//!
//! Attention vectors are 1×N rows over the N history utterances. Scores
//! pass through a single stable softmax by default; `strict` composes an
//! explicit exp first (same argmax, overflow-prone) for fidelity
//! experiments.

use crate::model::{ModelError, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// 2H×1 weight scoring [utterance-topic ; factoid-topic] pairs.
    pub w_d: ParamId,
    /// H×H bilinear interaction matrix.
    pub w_b: ParamId,
    /// H×1 weight over the elementwise utterance/factoid topic product.
    pub w_o: ParamId,
    /// H×H semantic interaction matrix.
    pub w_f: ParamId,
    /// Scalar interaction bias.
    pub b_f: ParamId,
    /// 1×H output gate of the feature interaction.
    pub v_f: ParamId,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, hidden: usize) -> Result<Self, ModelError> {
        Ok(AttentionParams {
            w_d: store.register_linear("attention.w_d", 2 * hidden, 1)?,
            w_b: store.register_linear("attention.w_b", hidden, hidden)?,
            w_o: store.register_linear("attention.w_o", hidden, 1)?,
            w_f: store.register_linear("attention.w_f", hidden, hidden)?,
            b_f: store.register_zeros("attention.b_f", vec![1])?,
            v_f: store.register_linear("attention.v_f", 1, hidden)?,
        })
    }
}

/// Which attention mechanisms feed the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    /// Ablation: all three slots replaced by uniform weights.
    Uniform,
    DotOnly,
    BilinearOnly,
    OuterOnly,
}

/// Feature-interaction realization (the dimensionally literal scalar-gate
/// form versus the rank-preserving elementwise form).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureInteraction {
    Literal,
    Elementwise,
}

impl std::str::FromStr for FeatureInteraction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "literal" => Ok(FeatureInteraction::Literal),
            "elementwise" => Ok(FeatureInteraction::Elementwise),
            other => Err(format!("unknown feature interaction variant `{other}`")),
        }
    }
}

/// Turn an N×1 score column into a 1×N probability row.
fn normalize(
    tape: &mut Tape,
    scores: NodeId,
    strict: bool,
    mask: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let row = tape.transpose(scores)?;
    let row = if strict { tape.exp(row)? } else { row };
    let out = match mask {
        Some(m) => tape.masked_softmax(row, m)?,
        None => tape.softmax(row, 1)?,
    };
    Ok(out)
}

/// Concatenation-based scoring: `[t_u^j ; t_k] · w_d` per utterance row.
pub fn dot_attention(
    tape: &mut Tape,
    t_u: NodeId,
    t_k: NodeId,
    w_d: NodeId,
    strict: bool,
    mask: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let n = tape.shape(t_u)[0];
    let rep = tape.repeat_rows(t_k, n)?;
    let cat = tape.concat_cols(&[t_u, rep])?;
    let scores = tape.matmul(cat, w_d)?;
    normalize(tape, scores, strict, mask)
}

/// Bilinear scoring with a precomputed `t_u · W_b` (N×H).
pub fn bilinear_attention_pre(
    tape: &mut Tape,
    tw: NodeId,
    t_k: NodeId,
    strict: bool,
    mask: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let tk_col = tape.transpose(t_k)?;
    let scores = tape.matmul(tw, tk_col)?;
    normalize(tape, scores, strict, mask)
}

/// Bilinear scoring: `t_u^j W_b t_k^T` per utterance row.
pub fn bilinear_attention(
    tape: &mut Tape,
    t_u: NodeId,
    t_k: NodeId,
    w_b: NodeId,
    strict: bool,
    mask: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let tw = tape.matmul(t_u, w_b)?;
    bilinear_attention_pre(tape, tw, t_k, strict, mask)
}

/// Elementwise-product scoring: `w_o · (t_u^j ⊙ t_k)` per utterance row.
/// This is the scalar realization of the outer-product form constrained
/// to a diagonal interaction.
pub fn outer_attention(
    tape: &mut Tape,
    t_u: NodeId,
    t_k: NodeId,
    w_o: NodeId,
    strict: bool,
    mask: Option<&[bool]>,
) -> Result<NodeId, ModelError> {
    let n = tape.shape(t_u)[0];
    let rep = tape.repeat_rows(t_k, n)?;
    let prod = tape.mul(t_u, rep)?;
    let scores = tape.matmul(prod, w_o)?;
    normalize(tape, scores, strict, mask)
}

/// Feature interaction with a precomputed `s_u · W_f` (N×H) and, for the
/// elementwise variant, a precomputed `v_f` broadcast (N×H).
pub fn feature_interaction_pre(
    tape: &mut Tape,
    sw: NodeId,
    s_k: NodeId,
    b_f: NodeId,
    v_f: NodeId,
    v_f_rep: Option<NodeId>,
    variant: FeatureInteraction,
) -> Result<NodeId, ModelError> {
    let n = tape.shape(sw)[0];
    match variant {
        FeatureInteraction::Literal => {
            // Scalar gate per utterance scales v_f: every row of the
            // result is parallel to v_f.
            let sk_col = tape.transpose(s_k)?;
            let scores = tape.matmul(sw, sk_col)?;
            let scores = tape.add_scalar_node(scores, b_f)?;
            let gate = tape.tanh(scores)?;
            Ok(tape.matmul(gate, v_f)?)
        }
        FeatureInteraction::Elementwise => {
            let rep = tape.repeat_rows(s_k, n)?;
            let prod = tape.mul(sw, rep)?;
            let prod = tape.add_scalar_node(prod, b_f)?;
            let act = tape.tanh(prod)?;
            let v_rep = match v_f_rep {
                Some(v) => v,
                None => tape.repeat_rows(v_f, n)?,
            };
            Ok(tape.mul(act, v_rep)?)
        }
    }
}

/// Feature interaction matrix F_i (N×H) between utterance semantics and
/// one factoid's semantic embedding.
#[allow(clippy::too_many_arguments)]
pub fn feature_interaction(
    tape: &mut Tape,
    s_u: NodeId,
    s_k: NodeId,
    w_f: NodeId,
    b_f: NodeId,
    v_f: NodeId,
    variant: FeatureInteraction,
) -> Result<NodeId, ModelError> {
    let sw = tape.matmul(s_u, w_f)?;
    feature_interaction_pre(tape, sw, s_k, b_f, v_f, None, variant)
}

/// Aggregate one factoid's pair representation:
/// `k_i = [A_d F_i ; A_b F_i ; A_o F_i]` as a 1×3H row.
pub fn aggregate(
    tape: &mut Tape,
    a_d: NodeId,
    a_b: NodeId,
    a_o: NodeId,
    f_i: NodeId,
) -> Result<NodeId, ModelError> {
    let d = tape.matmul(a_d, f_i)?;
    let b = tape.matmul(a_b, f_i)?;
    let o = tape.matmul(a_o, f_i)?;
    Ok(tape.concat_cols(&[d, b, o])?)
}
