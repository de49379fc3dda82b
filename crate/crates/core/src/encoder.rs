//! Utterance/factoid encoder producing semantic and topic embeddings.
//!
//! The default is a small transformer encoder; a BiLSTM variant is kept
//! behind a switch for the recurrent-encoder ablation. Both read a
//! pseudo-token id sequence and return the final state at the CLS
//! position as the sequence embedding.

use crate::model::{Forward, ModelConfig, ModelError, ParamId, ParamStore};
use crate::tensor::NodeId;

/// Semantic and topic id sequences for one utterance or factoid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequencePair {
    pub semantic: Vec<usize>,
    pub topic: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Transformer,
    BiLstm,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// Key projections carry no bias: a constant added to every key
    /// shifts each attention row uniformly and cancels in the softmax.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// One direction of the BiLSTM: input, recurrent, and bias weights for
/// the four gates (i, f, o, g) stacked along the output axis.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_ln: Option<(ParamId, ParamId)>,
    pub lstm: Option<(LstmDirection, LstmDirection)>,
    pub kind: EncoderKind,
    pub hidden: usize,
    pub n_heads: usize,
}

impl EncoderParams {
    /// Register all encoder tensors under `prefix`. The token embedding
    /// table is shared with the decoder's input and output layers.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let h = cfg.hidden;
        if h % cfg.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden size {h} not divisible by {} heads",
                cfg.n_heads
            )));
        }
        let tok_emb = store.register_embedding(&format!("{prefix}.tok_emb"), vocab_size, h)?;
        let pos_emb =
            store.register_embedding(&format!("{prefix}.pos_emb"), cfg.max_sentence_length, h)?;

        match cfg.encoder_kind {
            EncoderKind::Transformer => {
                let ffn = h * cfg.ffn_multiplier;
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for l in 0..cfg.n_layers {
                    let p = format!("{prefix}.layer{l}");
                    layers.push(LayerParams {
                        wq: store.register_linear(&format!("{p}.wq"), h, h)?,
                        bq: store.register_zeros(&format!("{p}.bq"), vec![1, h])?,
                        wk: store.register_linear(&format!("{p}.wk"), h, h)?,
                        wv: store.register_linear(&format!("{p}.wv"), h, h)?,
                        bv: store.register_zeros(&format!("{p}.bv"), vec![1, h])?,
                        wo: store.register_linear(&format!("{p}.wo"), h, h)?,
                        bo: store.register_zeros(&format!("{p}.bo"), vec![1, h])?,
                        ln1_g: store.register_ones(&format!("{p}.ln1_g"), vec![h])?,
                        ln1_b: store.register_zeros(&format!("{p}.ln1_b"), vec![h])?,
                        w1: store.register_linear(&format!("{p}.w1"), h, ffn)?,
                        b1: store.register_zeros(&format!("{p}.b1"), vec![1, ffn])?,
                        w2: store.register_linear(&format!("{p}.w2"), ffn, h)?,
                        b2: store.register_zeros(&format!("{p}.b2"), vec![1, h])?,
                        ln2_g: store.register_ones(&format!("{p}.ln2_g"), vec![h])?,
                        ln2_b: store.register_zeros(&format!("{p}.ln2_b"), vec![h])?,
                    });
                }
                let final_ln = if cfg.n_layers > 0 {
                    Some((
                        store.register_ones(&format!("{prefix}.final_ln_g"), vec![h])?,
                        store.register_zeros(&format!("{prefix}.final_ln_b"), vec![h])?,
                    ))
                } else {
                    None
                };
                Ok(EncoderParams {
                    tok_emb,
                    pos_emb,
                    layers,
                    final_ln,
                    lstm: None,
                    kind: EncoderKind::Transformer,
                    hidden: h,
                    n_heads: cfg.n_heads,
                })
            }
            EncoderKind::BiLstm => {
                if h % 2 != 0 {
                    return Err(ModelError::Config(format!(
                        "hidden size {h} must be even for the BiLSTM encoder"
                    )));
                }
                let q = h / 2;
                let dir = |store: &mut ParamStore,
                               name: &str|
                 -> Result<LstmDirection, ModelError> {
                    Ok(LstmDirection {
                        wx: store.register_linear(&format!("{prefix}.{name}.wx"), h, 4 * q)?,
                        wh: store.register_linear(&format!("{prefix}.{name}.wh"), q, 4 * q)?,
                        b: store.register_zeros(&format!("{prefix}.{name}.b"), vec![1, 4 * q])?,
                    })
                };
                let fwd = dir(store, "lstm_fwd")?;
                let bwd = dir(store, "lstm_bwd")?;
                Ok(EncoderParams {
                    tok_emb,
                    pos_emb,
                    layers: Vec::new(),
                    final_ln: None,
                    lstm: Some((fwd, bwd)),
                    kind: EncoderKind::BiLstm,
                    hidden: h,
                    n_heads: cfg.n_heads,
                })
            }
        }
    }
}

/// Multi-head self-attention over `x` (L×H).
#[allow(clippy::too_many_arguments)]
fn self_attention(
    fwd: &mut Forward,
    x: NodeId,
    layer: &LayerParams,
    n_heads: usize,
) -> Result<NodeId, ModelError> {
    let l = fwd.tape.shape(x)[0];
    let h = fwd.tape.shape(x)[1];
    let dk = h / n_heads;
    let wq = fwd.bind.node(layer.wq);
    let bq = fwd.bind.node(layer.bq);
    let wk = fwd.bind.node(layer.wk);
    let wv = fwd.bind.node(layer.wv);
    let bv = fwd.bind.node(layer.bv);
    let wo = fwd.bind.node(layer.wo);
    let bo = fwd.bind.node(layer.bo);

    let q = fwd.tape.matmul(x, wq)?;
    let q = fwd.tape.add_row(q, bq)?;
    let k = fwd.tape.matmul(x, wk)?;
    let v = fwd.tape.matmul(x, wv)?;
    let v = fwd.tape.add_row(v, bv)?;

    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qs = fwd.tape.slice_cols(q, head * dk, (head + 1) * dk)?;
        let ks = fwd.tape.slice_cols(k, head * dk, (head + 1) * dk)?;
        let vs = fwd.tape.slice_cols(v, head * dk, (head + 1) * dk)?;
        let kt = fwd.tape.transpose(ks)?;
        let scores = fwd.tape.matmul(qs, kt)?;
        let scores = fwd.tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let probs = fwd.tape.softmax(scores, 1)?;
        heads.push(fwd.tape.matmul(probs, vs)?);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        fwd.tape.concat_cols(&heads)?
    };
    let _ = l;
    let out = fwd.tape.matmul(concat, wo)?;
    Ok(fwd.tape.add_row(out, bo)?)
}

/// Embed token ids and add positional rows.
fn embed(fwd: &mut Forward, enc: &EncoderParams, ids: &[usize]) -> Result<NodeId, ModelError> {
    let tok = fwd.bind.node(enc.tok_emb);
    let pos = fwd.bind.node(enc.pos_emb);
    let x = fwd.tape.embedding_lookup(tok, ids)?;
    let p = fwd.tape.slice_rows(pos, 0, ids.len())?;
    Ok(fwd.tape.add(x, p)?)
}

fn transformer_states(
    fwd: &mut Forward,
    enc: &EncoderParams,
    ids: &[usize],
    site: &str,
) -> Result<NodeId, ModelError> {
    let mut x = embed(fwd, enc, ids)?;
    for (l, layer) in enc.layers.iter().enumerate() {
        let g = fwd.bind.node(layer.ln1_g);
        let b = fwd.bind.node(layer.ln1_b);
        let normed = fwd.tape.layer_norm(x, g, b, 1e-5)?;
        let attn = self_attention(fwd, normed, layer, enc.n_heads)?;
        let attn = fwd.maybe_dropout(attn, &format!("{site}.layer{l}.attn"))?;
        x = fwd.tape.add(x, attn)?;

        let g = fwd.bind.node(layer.ln2_g);
        let b = fwd.bind.node(layer.ln2_b);
        let normed = fwd.tape.layer_norm(x, g, b, 1e-5)?;
        let w1 = fwd.bind.node(layer.w1);
        let b1 = fwd.bind.node(layer.b1);
        let h1 = fwd.tape.matmul(normed, w1)?;
        let h1 = fwd.tape.add_row(h1, b1)?;
        let h1 = fwd.tape.relu(h1)?;
        let w2 = fwd.bind.node(layer.w2);
        let b2 = fwd.bind.node(layer.b2);
        let h2 = fwd.tape.matmul(h1, w2)?;
        let h2 = fwd.tape.add_row(h2, b2)?;
        let h2 = fwd.maybe_dropout(h2, &format!("{site}.layer{l}.ffn"))?;
        x = fwd.tape.add(x, h2)?;
    }
    if let Some((g, b)) = enc.final_ln {
        let g = fwd.bind.node(g);
        let b = fwd.bind.node(b);
        x = fwd.tape.layer_norm(x, g, b, 1e-5)?;
    }
    Ok(x)
}

/// One LSTM sweep; returns the hidden state at each position (each 1×q).
fn lstm_sweep(
    fwd: &mut Forward,
    x: NodeId,
    dir: &LstmDirection,
    reverse: bool,
) -> Result<Vec<NodeId>, ModelError> {
    let l = fwd.tape.shape(x)[0];
    let wx = fwd.bind.node(dir.wx);
    let wh = fwd.bind.node(dir.wh);
    let b = fwd.bind.node(dir.b);
    let q = fwd.tape.shape(wh)[0];
    let mut h = fwd.tape.constant(vec![0.0; q], vec![1, q])?;
    let mut c = fwd.tape.constant(vec![0.0; q], vec![1, q])?;
    let mut states = vec![h; l];
    let order: Vec<usize> = if reverse {
        (0..l).rev().collect()
    } else {
        (0..l).collect()
    };
    for t in order {
        let xt = fwd.tape.slice_rows(x, t, t + 1)?;
        let gx = fwd.tape.matmul(xt, wx)?;
        let gh = fwd.tape.matmul(h, wh)?;
        let gates = fwd.tape.add(gx, gh)?;
        let gates = fwd.tape.add_row(gates, b)?;
        let i = fwd.tape.slice_cols(gates, 0, q)?;
        let i = fwd.tape.sigmoid(i)?;
        let f = fwd.tape.slice_cols(gates, q, 2 * q)?;
        let f = fwd.tape.sigmoid(f)?;
        let o = fwd.tape.slice_cols(gates, 2 * q, 3 * q)?;
        let o = fwd.tape.sigmoid(o)?;
        let cand = fwd.tape.slice_cols(gates, 3 * q, 4 * q)?;
        let cand = fwd.tape.tanh(cand)?;
        let fc = fwd.tape.mul(f, c)?;
        let ic = fwd.tape.mul(i, cand)?;
        c = fwd.tape.add(fc, ic)?;
        let ct = fwd.tape.tanh(c)?;
        h = fwd.tape.mul(o, ct)?;
        states[t] = h;
    }
    Ok(states)
}

/// Full-sequence states (L×H) for either encoder kind.
pub fn encode_states(
    fwd: &mut Forward,
    enc: &EncoderParams,
    ids: &[usize],
    site: &str,
) -> Result<NodeId, ModelError> {
    match enc.kind {
        EncoderKind::Transformer => transformer_states(fwd, enc, ids, site),
        EncoderKind::BiLstm => {
            let x = embed(fwd, enc, ids)?;
            let (f_dir, b_dir) = enc.lstm.clone().expect("bilstm params");
            let fwd_states = lstm_sweep(fwd, x, &f_dir, false)?;
            let bwd_states = lstm_sweep(fwd, x, &b_dir, true)?;
            let mut rows = Vec::with_capacity(ids.len());
            for t in 0..ids.len() {
                rows.push(fwd.tape.concat_cols(&[fwd_states[t], bwd_states[t]])?);
            }
            Ok(fwd.tape.concat_rows(&rows)?)
        }
    }
}

/// Encode a sequence and return the CLS-position state (1×H).
pub fn encode(
    fwd: &mut Forward,
    enc: &EncoderParams,
    ids: &[usize],
    site: &str,
) -> Result<NodeId, ModelError> {
    if ids.is_empty() {
        return Err(ModelError::Config("cannot encode an empty sequence".into()));
    }
    let states = encode_states(fwd, enc, ids, site)?;
    Ok(fwd.tape.slice_rows(states, 0, 1)?)
}
