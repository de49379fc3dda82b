//! Response generation: CNN fusion of the selected span and an
//! autoregressive decoder with cross-attention over the span columns.
//!
//! The decoder input at position 0 is the fusion embedding added to the
//! BOS embedding; position t consumes the embedding of token t-1. The
//! output layer is tied to the encoder's token embedding table.

use crate::model::{Forward, ModelConfig, ModelError, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape, TensorError};

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub sq: ParamId,
    pub sbq: ParamId,
    pub sk: ParamId,
    pub sv: ParamId,
    pub sbv: ParamId,
    pub so: ParamId,
    pub sbo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub cq: ParamId,
    pub cbq: ParamId,
    pub ck: ParamId,
    pub cv: ParamId,
    pub cbv: ParamId,
    pub co: ParamId,
    pub cbo: ParamId,
    pub ln3_g: ParamId,
    pub ln3_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    /// Three conv stages over the factoid axis, channel plan
    /// 3H → 2H → H → H, kernel 3 each, pool kernel 3 between stages.
    pub conv_w: [ParamId; 3],
    pub conv_b: [ParamId; 3],
    /// Projection applied after global average pooling.
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    /// Projects span pair-representations (3H) into decoder space (H)
    /// for cross-attention keys/values.
    pub span_w: ParamId,
    pub span_b: ParamId,
    pub dec_pos: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub hidden: usize,
    pub n_heads: usize,
    pub max_decode_len: usize,
}

impl GeneratorParams {
    pub fn register(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        n_decoder_layers: usize,
    ) -> Result<Self, ModelError> {
        let h = cfg.hidden;
        let plan = [(3 * h, 2 * h), (2 * h, h), (h, h)];
        let mut conv_w = Vec::with_capacity(3);
        let mut conv_b = Vec::with_capacity(3);
        for (i, (c_in, c_out)) in plan.iter().enumerate() {
            conv_w.push(store.register_conv(&format!("generator.conv{i}.w"), *c_out, *c_in, 3)?);
            conv_b.push(store.register_zeros(&format!("generator.conv{i}.b"), vec![*c_out])?);
        }
        let ffn = h * cfg.ffn_multiplier;
        let mut layers = Vec::with_capacity(n_decoder_layers);
        for l in 0..n_decoder_layers {
            let p = format!("generator.layer{l}");
            layers.push(DecoderLayerParams {
                ln1_g: store.register_ones(&format!("{p}.ln1_g"), vec![h])?,
                ln1_b: store.register_zeros(&format!("{p}.ln1_b"), vec![h])?,
                sq: store.register_linear(&format!("{p}.sq"), h, h)?,
                sbq: store.register_zeros(&format!("{p}.sbq"), vec![1, h])?,
                sk: store.register_linear(&format!("{p}.sk"), h, h)?,
                sv: store.register_linear(&format!("{p}.sv"), h, h)?,
                sbv: store.register_zeros(&format!("{p}.sbv"), vec![1, h])?,
                so: store.register_linear(&format!("{p}.so"), h, h)?,
                sbo: store.register_zeros(&format!("{p}.sbo"), vec![1, h])?,
                ln2_g: store.register_ones(&format!("{p}.ln2_g"), vec![h])?,
                ln2_b: store.register_zeros(&format!("{p}.ln2_b"), vec![h])?,
                cq: store.register_linear(&format!("{p}.cq"), h, h)?,
                cbq: store.register_zeros(&format!("{p}.cbq"), vec![1, h])?,
                ck: store.register_linear(&format!("{p}.ck"), h, h)?,
                cv: store.register_linear(&format!("{p}.cv"), h, h)?,
                cbv: store.register_zeros(&format!("{p}.cbv"), vec![1, h])?,
                co: store.register_linear(&format!("{p}.co"), h, h)?,
                cbo: store.register_zeros(&format!("{p}.cbo"), vec![1, h])?,
                ln3_g: store.register_ones(&format!("{p}.ln3_g"), vec![h])?,
                ln3_b: store.register_zeros(&format!("{p}.ln3_b"), vec![h])?,
                w1: store.register_linear(&format!("{p}.w1"), h, ffn)?,
                b1: store.register_zeros(&format!("{p}.b1"), vec![1, ffn])?,
                w2: store.register_linear(&format!("{p}.w2"), ffn, h)?,
                b2: store.register_zeros(&format!("{p}.b2"), vec![1, h])?,
            });
        }
        Ok(GeneratorParams {
            conv_w: [conv_w[0], conv_w[1], conv_w[2]],
            conv_b: [conv_b[0], conv_b[1], conv_b[2]],
            fuse_w: store.register_linear("generator.fuse_w", h, h)?,
            fuse_b: store.register_zeros("generator.fuse_b", vec![1, h])?,
            span_w: store.register_linear("generator.span_w", 3 * h, h)?,
            span_b: store.register_zeros("generator.span_b", vec![1, h])?,
            dec_pos: store.register_embedding("generator.dec_pos", cfg.max_decode_len, h)?,
            layers,
            final_ln_g: store.register_ones("generator.final_ln_g", vec![h])?,
            final_ln_b: store.register_zeros("generator.final_ln_b", vec![h])?,
            w_v: store.register_linear("generator.w_v", h, h)?,
            b_v: store.register_zeros("generator.b_v", vec![1])?,
            hidden: h,
            n_heads: cfg.n_heads,
            max_decode_len: cfg.max_decode_len,
        })
    }
}

/// Span fusion over explicit weight nodes; see [`fuse_span`].
pub fn fuse_span_raw(
    tape: &mut Tape,
    k_span_rows: NodeId,
    conv_w: &[NodeId; 3],
    conv_b: &[NodeId; 3],
    fuse_w: NodeId,
    fuse_b: NodeId,
) -> Result<NodeId, ModelError> {
    let mut x = tape.transpose(k_span_rows)?; // channels (3H) × width
    for i in 0..3 {
        x = tape.conv1d(x, conv_w[i], conv_b[i])?;
        x = tape.relu(x)?;
        x = tape.maxpool1d(x, 3)?;
    }
    let pooled = tape.row_mean(x)?; // H×1
    let pooled = tape.transpose(pooled)?; // 1×H
    let f = tape.matmul(pooled, fuse_w)?;
    Ok(tape.add_row(f, fuse_b)?)
}

/// Fuse the selected span's pair representations (W rows × 3H) into a
/// single 1×H embedding: three conv+pool stages over the factoid axis,
/// global average, then a linear projection.
pub fn fuse_span(
    fwd: &mut Forward,
    gen: &GeneratorParams,
    k_span_rows: NodeId,
) -> Result<NodeId, ModelError> {
    let conv_w = [
        fwd.bind.node(gen.conv_w[0]),
        fwd.bind.node(gen.conv_w[1]),
        fwd.bind.node(gen.conv_w[2]),
    ];
    let conv_b = [
        fwd.bind.node(gen.conv_b[0]),
        fwd.bind.node(gen.conv_b[1]),
        fwd.bind.node(gen.conv_b[2]),
    ];
    let fuse_w = fwd.bind.node(gen.fuse_w);
    let fuse_b = fwd.bind.node(gen.fuse_b);
    fuse_span_raw(fwd.tape, k_span_rows, &conv_w, &conv_b, fuse_w, fuse_b)
}

/// Project span rows (W×3H) into decoder space (W×H) for cross-attention.
pub fn project_span(
    fwd: &mut Forward,
    gen: &GeneratorParams,
    k_span_rows: NodeId,
) -> Result<NodeId, ModelError> {
    let w = fwd.bind.node(gen.span_w);
    let b = fwd.bind.node(gen.span_b);
    let proj = fwd.tape.matmul(k_span_rows, w)?;
    Ok(fwd.tape.add_row(proj, b)?)
}

/// Multi-head attention where queries come from `x` and keys/values from
/// `memory`. A causal mask applies when `memory` is `x` itself.
#[allow(clippy::too_many_arguments)]
fn attention_block(
    fwd: &mut Forward,
    x: NodeId,
    memory: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    n_heads: usize,
    causal: bool,
) -> Result<NodeId, ModelError> {
    let h = fwd.tape.shape(x)[1];
    let rows = fwd.tape.shape(x)[0];
    let mem_rows = fwd.tape.shape(memory)[0];
    let dk = h / n_heads;
    let q = fwd.tape.matmul(x, wq)?;
    let q = fwd.tape.add_row(q, bq)?;
    let k = fwd.tape.matmul(memory, wk)?;
    let v = fwd.tape.matmul(memory, wv)?;
    let v = fwd.tape.add_row(v, bv)?;

    let mask: Option<Vec<bool>> = causal.then(|| {
        let mut m = vec![false; rows * mem_rows];
        for i in 0..rows {
            for j in 0..=i.min(mem_rows - 1) {
                m[i * mem_rows + j] = true;
            }
        }
        m
    });

    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qs = fwd.tape.slice_cols(q, head * dk, (head + 1) * dk)?;
        let ks = fwd.tape.slice_cols(k, head * dk, (head + 1) * dk)?;
        let vs = fwd.tape.slice_cols(v, head * dk, (head + 1) * dk)?;
        let kt = fwd.tape.transpose(ks)?;
        let scores = fwd.tape.matmul(qs, kt)?;
        let scores = fwd.tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let probs = match &mask {
            Some(m) => fwd.tape.masked_softmax(scores, m)?,
            None => fwd.tape.softmax(scores, 1)?,
        };
        heads.push(fwd.tape.matmul(probs, vs)?);
    }
    let concat = if heads.len() == 1 {
        heads[0]
    } else {
        fwd.tape.concat_cols(&heads)?
    };
    let out = fwd.tape.matmul(concat, wo)?;
    Ok(fwd.tape.add_row(out, bo)?)
}

/// Run the decoder over input ids `[BOS, w_1, .., w_{T-1}]`, returning
/// the final hidden states (T×H). The fusion embedding is added to the
/// BOS row, realizing the "initial hidden state" role.
pub fn decoder_states(
    fwd: &mut Forward,
    gen: &GeneratorParams,
    tok_emb: NodeId,
    f: NodeId,
    span_h: NodeId,
    input_ids: &[usize],
    site: &str,
) -> Result<NodeId, ModelError> {
    let t = input_ids.len();
    if t == 0 {
        return Err(ModelError::Config("decoder needs at least one input".into()));
    }
    if t > gen.max_decode_len {
        return Err(ModelError::Tensor(TensorError::IndexOutOfRange {
            op: "decoder_states",
            index: t,
            size: gen.max_decode_len,
        }));
    }
    let emb = fwd.tape.embedding_lookup(tok_emb, input_ids)?;
    let dec_pos = fwd.bind.node(gen.dec_pos);
    let pos = fwd.tape.slice_rows(dec_pos, 0, t)?;
    let mut x = fwd.tape.add(emb, pos)?;
    // Add f to the first row only.
    let f_pad = if t == 1 {
        f
    } else {
        let h = gen.hidden;
        let zeros = fwd.tape.constant(vec![0.0; (t - 1) * h], vec![t - 1, h])?;
        fwd.tape.concat_rows(&[f, zeros])?
    };
    x = fwd.tape.add(x, f_pad)?;

    for (l, layer) in gen.layers.iter().enumerate() {
        let g = fwd.bind.node(layer.ln1_g);
        let b = fwd.bind.node(layer.ln1_b);
        let normed = fwd.tape.layer_norm(x, g, b, 1e-5)?;
        let self_attn = attention_block(
            fwd,
            normed,
            normed,
            fwd.bind.node(layer.sq),
            fwd.bind.node(layer.sbq),
            fwd.bind.node(layer.sk),
            fwd.bind.node(layer.sv),
            fwd.bind.node(layer.sbv),
            fwd.bind.node(layer.so),
            fwd.bind.node(layer.sbo),
            gen.n_heads,
            true,
        )?;
        let self_attn = fwd.maybe_dropout(self_attn, &format!("{site}.layer{l}.self"))?;
        x = fwd.tape.add(x, self_attn)?;

        let g = fwd.bind.node(layer.ln2_g);
        let b = fwd.bind.node(layer.ln2_b);
        let normed = fwd.tape.layer_norm(x, g, b, 1e-5)?;
        let cross = attention_block(
            fwd,
            normed,
            span_h,
            fwd.bind.node(layer.cq),
            fwd.bind.node(layer.cbq),
            fwd.bind.node(layer.ck),
            fwd.bind.node(layer.cv),
            fwd.bind.node(layer.cbv),
            fwd.bind.node(layer.co),
            fwd.bind.node(layer.cbo),
            gen.n_heads,
            false,
        )?;
        let cross = fwd.maybe_dropout(cross, &format!("{site}.layer{l}.cross"))?;
        x = fwd.tape.add(x, cross)?;

        let g = fwd.bind.node(layer.ln3_g);
        let b = fwd.bind.node(layer.ln3_b);
        let normed = fwd.tape.layer_norm(x, g, b, 1e-5)?;
        let h1 = fwd.tape.matmul(normed, fwd.bind.node(layer.w1))?;
        let h1 = fwd.tape.add_row(h1, fwd.bind.node(layer.b1))?;
        let h1 = fwd.tape.relu(h1)?;
        let h2 = fwd.tape.matmul(h1, fwd.bind.node(layer.w2))?;
        let h2 = fwd.tape.add_row(h2, fwd.bind.node(layer.b2))?;
        let h2 = fwd.maybe_dropout(h2, &format!("{site}.layer{l}.ffn"))?;
        x = fwd.tape.add(x, h2)?;
    }
    let g = fwd.bind.node(gen.final_ln_g);
    let b = fwd.bind.node(gen.final_ln_b);
    Ok(fwd.tape.layer_norm(x, g, b, 1e-5)?)
}

/// Vocabulary distributions for each state row:
/// `p_v = softmax(h · W_v · Eᵀ + b_v)` with the tied embedding table E.
pub fn vocab_distributions(
    fwd: &mut Forward,
    gen: &GeneratorParams,
    tok_emb: NodeId,
    states: NodeId,
) -> Result<NodeId, ModelError> {
    let w_v = fwd.bind.node(gen.w_v);
    let b_v = fwd.bind.node(gen.b_v);
    let hw = fwd.tape.matmul(states, w_v)?;
    let emb_t = fwd.tape.transpose(tok_emb)?;
    let logits = fwd.tape.matmul(hw, emb_t)?;
    let logits = fwd.tape.add_scalar_node(logits, b_v)?;
    Ok(fwd.tape.softmax(logits, 1)?)
}

/// Teacher-forced step distributions (T×|V|) for a gold sequence
/// `[y_1, .., y_T]` (EOS last): row t scores y_{t+1}.
pub fn teacher_forced_distributions(
    fwd: &mut Forward,
    gen: &GeneratorParams,
    tok_emb: NodeId,
    f: NodeId,
    span_h: NodeId,
    gold: &[usize],
    bos: usize,
    site: &str,
) -> Result<NodeId, ModelError> {
    if gold.is_empty() {
        return Err(ModelError::Config("gold response must be non-empty".into()));
    }
    let mut input_ids = Vec::with_capacity(gold.len());
    input_ids.push(bos);
    input_ids.extend_from_slice(&gold[..gold.len() - 1]);
    let states = decoder_states(fwd, gen, tok_emb, f, span_h, &input_ids, site)?;
    vocab_distributions(fwd, gen, tok_emb, states)
}

/// Incremental decoding state: the generated ids so far.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub generated: Vec<usize>,
    pub max_len: usize,
}

impl DecodeState {
    pub fn new(max_len: usize) -> Self {
        DecodeState {
            generated: Vec::new(),
            max_len,
        }
    }
}

/// One decoding step: recompute the prefix `[BOS] ++ generated` and
/// return the last hidden state (1×H) and its vocabulary distribution.
pub fn decode_step(
    fwd: &mut Forward,
    gen: &GeneratorParams,
    tok_emb: NodeId,
    f: NodeId,
    span_h: NodeId,
    bos: usize,
    state: &DecodeState,
) -> Result<(NodeId, NodeId), ModelError> {
    if state.generated.len() >= state.max_len {
        return Err(ModelError::Config(format!(
            "decode state exhausted at {} tokens",
            state.max_len
        )));
    }
    let mut input_ids = Vec::with_capacity(state.generated.len() + 1);
    input_ids.push(bos);
    input_ids.extend_from_slice(&state.generated);
    let states = decoder_states(fwd, gen, tok_emb, f, span_h, &input_ids, "decode")?;
    let t = input_ids.len();
    let h_t = fwd.tape.slice_rows(states, t - 1, t)?;
    let p_v = vocab_distributions(fwd, gen, tok_emb, h_t)?;
    Ok((h_t, p_v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// A finished generation: tokens (EOS stripped), summed log-probability,
/// and the length-normalized score used for ranking hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct GenOutcome {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

fn normalized(log_prob: f64, steps: usize) -> f64 {
    log_prob / steps.max(1) as f64
}

/// Autoregressive generation from the fusion embedding and span memory.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    fwd: &mut Forward,
    gen: &GeneratorParams,
    tok_emb: NodeId,
    f: NodeId,
    span_h: NodeId,
    bos: usize,
    eos: usize,
    max_len: usize,
    strategy: DecodeStrategy,
) -> Result<GenOutcome, ModelError> {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut state = DecodeState::new(max_len);
            let mut log_prob = 0.0;
            let mut steps = 0;
            loop {
                let (_, p_v) = decode_step(fwd, gen, tok_emb, f, span_h, bos, &state)?;
                let probs = fwd.tape.data(p_v);
                let (tok, p) = probs
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |best, (i, p)| {
                        if p > best.1 {
                            (i, p)
                        } else {
                            best
                        }
                    });
                log_prob += p.max(1e-300).ln();
                steps += 1;
                if tok == eos {
                    break;
                }
                state.generated.push(tok);
                if state.generated.len() >= max_len {
                    break;
                }
            }
            Ok(GenOutcome {
                tokens: state.generated,
                log_prob,
                score: normalized(log_prob, steps),
            })
        }
        DecodeStrategy::Beam(k) => {
            if k == 0 {
                return Err(ModelError::Config("beam width must be at least 1".into()));
            }
            #[derive(Clone)]
            struct Hyp {
                ids: Vec<usize>,
                log_prob: f64,
            }
            let mut active = vec![Hyp {
                ids: Vec::new(),
                log_prob: 0.0,
            }];
            let mut finished: Vec<GenOutcome> = Vec::new();
            for _ in 0..max_len {
                if active.is_empty() {
                    break;
                }
                let mut candidates: Vec<Hyp> = Vec::new();
                for hyp in &active {
                    let state = DecodeState {
                        generated: hyp.ids.clone(),
                        max_len,
                    };
                    let (_, p_v) = decode_step(fwd, gen, tok_emb, f, span_h, bos, &state)?;
                    let probs = fwd.tape.data(p_v).to_vec();
                    for (tok, p) in probs.into_iter().enumerate() {
                        let mut ids = hyp.ids.clone();
                        ids.push(tok);
                        candidates.push(Hyp {
                            ids,
                            log_prob: hyp.log_prob + p.max(1e-300).ln(),
                        });
                    }
                }
                candidates.sort_by(|a, b| {
                    b.log_prob
                        .partial_cmp(&a.log_prob)
                        .unwrap()
                        .then_with(|| a.ids.cmp(&b.ids))
                });
                candidates.truncate(k);
                active = Vec::new();
                for hyp in candidates {
                    let steps = hyp.ids.len();
                    if *hyp.ids.last().expect("non-empty") == eos {
                        let mut tokens = hyp.ids;
                        tokens.pop();
                        finished.push(GenOutcome {
                            tokens,
                            log_prob: hyp.log_prob,
                            score: normalized(hyp.log_prob, steps),
                        });
                    } else if steps >= max_len {
                        finished.push(GenOutcome {
                            tokens: hyp.ids,
                            log_prob: hyp.log_prob,
                            score: normalized(hyp.log_prob, steps),
                        });
                    } else {
                        active.push(hyp);
                    }
                }
            }
            for hyp in active {
                let steps = hyp.ids.len();
                finished.push(GenOutcome {
                    tokens: hyp.ids,
                    log_prob: hyp.log_prob,
                    score: normalized(hyp.log_prob, steps),
                });
            }
            finished.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| a.tokens.cmp(&b.tokens))
            });
            finished.into_iter().next().ok_or_else(|| {
                ModelError::Config("beam search produced no hypotheses".into())
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Forward, ModelConfig, ParamStore};
    use crate::tensor::Tape;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.hidden = 6;
        cfg.n_heads = 2;
        cfg.ffn_multiplier = 2;
        cfg.max_decode_len = 8;
        cfg
    }

    fn setup(seed: u64, vocab_size: usize) -> (ParamStore, GeneratorParams, crate::model::ParamId) {
        let mut store = ParamStore::new(seed);
        let tok_emb = store
            .register_embedding("tok_emb", vocab_size, 6)
            .unwrap();
        let gen = GeneratorParams::register(&mut store, &tiny_cfg(), 1).unwrap();
        (store, gen, tok_emb)
    }

    // ── fusion ──────────────────────────────────────────────────────

    #[test]
    fn width_one_span_fuses_to_h_vector() {
        let (store, gen, _) = setup(1, 12);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let span = fwd
            .tape
            .constant((0..18).map(|i| 0.1 * i as f64 - 0.9).collect(), vec![1, 18])
            .unwrap();
        let f = fuse_span(&mut fwd, &gen, span).unwrap();
        assert_eq!(tape.shape(f), &[1, 6]);
        assert!(tape.data(f).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_span_with_zero_biases_fuses_to_zero() {
        // Conv and projection biases are zero-initialized, so an all-zero
        // span stays zero through conv, relu, pool, mean, and projection.
        let (store, gen, _) = setup(2, 12);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let span = fwd.tape.constant(vec![0.0; 3 * 18], vec![3, 18]).unwrap();
        let f = fuse_span(&mut fwd, &gen, span).unwrap();
        assert!(tape.data(f).iter().all(|&v| v == 0.0));
    }

    fn naive_conv(x: &[f64], c_in: usize, len: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
        let k = 3;
        let pad = 1;
        let mut out = vec![0.0; c_out * len];
        for o in 0..c_out {
            for l in 0..len {
                let mut s = b[o];
                for c in 0..c_in {
                    for t in 0..k {
                        let src = (l + t) as isize - pad as isize;
                        if src < 0 || src as usize >= len {
                            continue;
                        }
                        s += w[(o * c_in + c) * k + t] * x[c * len + src as usize];
                    }
                }
                out[o * len + l] = s;
            }
        }
        out
    }

    fn naive_pool(x: &[f64], c: usize, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; c * len];
        for ch in 0..c {
            for l in 0..len {
                let lo = l.saturating_sub(1);
                let hi = (l + 2).min(len);
                out[ch * len + l] = x[ch * len + lo..ch * len + hi]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        out
    }

    #[test]
    fn fusion_matches_loop_oracle() {
        let (store, gen, _) = setup(3, 12);
        let h = 6;
        let width = 4;
        let span_data: Vec<f64> = (0..width * 3 * h).map(|i| (i as f64 * 0.37).sin()).collect();

        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let span = fwd
            .tape
            .constant(span_data.clone(), vec![width, 3 * h])
            .unwrap();
        let f = fuse_span(&mut fwd, &gen, span).unwrap();
        let got = tape.data(f).to_vec();

        // Oracle: transpose, three conv/relu/pool stages, mean, proj.
        let mut x = vec![0.0; 3 * h * width];
        for r in 0..width {
            for c in 0..3 * h {
                x[c * width + r] = span_data[r * 3 * h + c];
            }
        }
        let plan = [(3 * h, 2 * h), (2 * h, h), (h, h)];
        let mut channels = 3 * h;
        for (i, (c_in, c_out)) in plan.iter().enumerate() {
            assert_eq!(channels, *c_in);
            let w = store.data(gen.conv_w[i]);
            let b = store.data(gen.conv_b[i]);
            x = naive_conv(&x, *c_in, width, w, b, *c_out);
            for v in x.iter_mut() {
                *v = v.max(0.0);
            }
            x = naive_pool(&x, *c_out, width);
            channels = *c_out;
        }
        let mut pooled = vec![0.0; h];
        for c in 0..h {
            pooled[c] = x[c * width..(c + 1) * width].iter().sum::<f64>() / width as f64;
        }
        let fw = store.data(gen.fuse_w);
        let fb = store.data(gen.fuse_b);
        let mut expected = vec![0.0; h];
        for j in 0..h {
            for i in 0..h {
                expected[j] += pooled[i] * fw[i * h + j];
            }
            expected[j] += fb[j];
        }
        for (g, e) in got.iter().zip(&expected) {
            assert!(close(*g, *e, 1e-10), "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn fusion_is_not_order_invariant() {
        // Convolution is positional: a reversed span may fuse differently.
        let (store, gen, _) = setup(4, 12);
        let h = 6;
        let width = 3;
        let data: Vec<f64> = (0..width * 3 * h).map(|i| (i as f64 * 0.61).cos()).collect();
        let mut reversed = vec![0.0; data.len()];
        for r in 0..width {
            reversed[r * 3 * h..(r + 1) * 3 * h]
                .copy_from_slice(&data[(width - 1 - r) * 3 * h..(width - r) * 3 * h]);
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let a = fwd.tape.constant(data, vec![width, 3 * h]).unwrap();
        let b = fwd.tape.constant(reversed, vec![width, 3 * h]).unwrap();
        let fa = fuse_span(&mut fwd, &gen, a).unwrap();
        let fb = fuse_span(&mut fwd, &gen, b).unwrap();
        assert_ne!(tape.data(fa), tape.data(fb));
    }

    // ── decoding ────────────────────────────────────────────────────

    fn span_memory(fwd: &mut Forward, gen: &GeneratorParams, se331: u64) -> (NodeId, NodeId) {
        let h = 6;
        let data: Vec<f64> = (0..2 * 3 * h)
            .map(|i| ((i as f64) * 0.23 + se331 as f64).sin() * 0.5)
            .collect();
        let span = fwd.tape.constant(data, vec![2, 3 * h]).unwrap();
        let f = fuse_span(fwd, gen, span).unwrap();
        let mem = project_span(fwd, gen, span).unwrap();
        (f, mem)
    }

    #[test]
    fn step_distributions_sum_to_one() {
        let (store, gen, tok_emb) = setup(5, 12);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let (f, mem) = span_memory(&mut fwd, &gen, 5);
        let emb = fwd.bind.node(tok_emb);
        let state = DecodeState::new(8);
        let (_, p_v) = decode_step(&mut fwd, &gen, emb, f, mem, 6, &state).unwrap();
        let sum: f64 = tape.data(p_v).iter().sum();
        assert!(close(sum, 1.0, 1e-12));
        assert!(tape.data(p_v).iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn zero_output_projection_gives_uniform_vocabulary() {
        let (mut store, gen, tok_emb) = setup(6, 12);
        // Zero W_v makes logits equal b_v everywhere.
        let wv = gen.w_v;
        for v in store.data_mut(wv).iter_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let (f, mem) = span_memory(&mut fwd, &gen, 6);
        let emb = fwd.bind.node(tok_emb);
        let state = DecodeState::new(8);
        let (_, p_v) = decode_step(&mut fwd, &gen, emb, f, mem, 6, &state).unwrap();
        for &p in tape.data(p_v) {
            assert!(close(p, 1.0 / 12.0, 1e-12));
        }
    }

    #[test]
    fn identical_states_give_identical_outputs_in_eval() {
        let (store, gen, tok_emb) = setup(7, 12);
        let run = || -> Vec<f64> {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape).unwrap();
            let mut fwd = Forward::eval(&mut tape, &bind);
            let (f, mem) = span_memory(&mut fwd, &gen, 7);
            let emb = fwd.bind.node(tok_emb);
            let state = DecodeState {
                generated: vec![9, 10],
                max_len: 8,
            };
            let (_, p_v) = decode_step(&mut fwd, &gen, emb, f, mem, 6, &state).unwrap();
            tape.data(p_v).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exhausted_state_errors() {
        let (store, gen, tok_emb) = setup(8, 12);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let (f, mem) = span_memory(&mut fwd, &gen, 8);
        let emb = fwd.bind.node(tok_emb);
        let state = DecodeState {
            generated: vec![9; 8],
            max_len: 8,
        };
        assert!(decode_step(&mut fwd, &gen, emb, f, mem, 6, &state).is_err());
    }

    #[test]
    fn greedy_equals_beam_one() {
        for seed in [9u64, 10, 11] {
            let (store, gen, tok_emb) = setup(seed, 12);
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape).unwrap();
            let mut fwd = Forward::eval(&mut tape, &bind);
            let (f, mem) = span_memory(&mut fwd, &gen, seed);
            let emb = fwd.bind.node(tok_emb);
            let greedy = generate(
                &mut fwd, &gen, emb, f, mem, 6, 7, 6, DecodeStrategy::Greedy,
            )
            .unwrap();
            let beam1 = generate(
                &mut fwd, &gen, emb, f, mem, 6, 7, 6, DecodeStrategy::Beam(1),
            )
            .unwrap();
            assert_eq!(greedy.tokens, beam1.tokens, "seed {seed}");
            assert!(close(greedy.score, beam1.score, 1e-12));
        }
    }

    #[test]
    fn beam_three_at_least_matches_greedy_and_exhaustive_is_optimal() {
        // 5-token vocabulary, 4-step horizon: sequence space is small
        // enough to enumerate every hypothesis exactly.
        let vocab = 5;
        let eos = 1;
        let max_len = 4;
        let (store, gen, tok_emb) = setup(12, vocab);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape).unwrap();
        let mut fwd = Forward::eval(&mut tape, &bind);
        let (f, mem) = span_memory(&mut fwd, &gen, 12);
        let emb = fwd.bind.node(tok_emb);

        let greedy = generate(
            &mut fwd, &gen, emb, f, mem, 6 % vocab, eos, max_len, DecodeStrategy::Greedy,
        )
        .unwrap();
        let beam3 = generate(
            &mut fwd, &gen, emb, f, mem, 6 % vocab, eos, max_len, DecodeStrategy::Beam(3),
        )
        .unwrap();
        assert!(
            beam3.score >= greedy.score - 1e-12,
            "beam(3) {} < greedy {}",
            beam3.score,
            greedy.score
        );

        // Exhaustive oracle: score every terminated-or-max-length id
        // sequence by chaining step distributions.
        let bos = 6 % vocab;
        let mut best_score = f64::NEG_INFINITY;
        let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        while let Some((prefix, logp)) = stack.pop() {
            let state = DecodeState {
                generated: prefix.clone(),
                max_len,
            };
            let (_, p_v) = decode_step(&mut fwd, &gen, emb, f, mem, bos, &state).unwrap();
            let probs = fwd.tape.data(p_v).to_vec();
            for (tok, p) in probs.iter().enumerate() {
                let lp = logp + p.max(1e-300).ln();
                let len = prefix.len() + 1;
                if tok == eos || len >= max_len {
                    best_score = best_score.max(lp / len as f64);
                } else {
                    let mut next = prefix.clone();
                    next.push(tok);
                    stack.push((next, lp));
                }
            }
        }
        // A beam wide enough to hold every live hypothesis is exhaustive.
        let beam_all = generate(
            &mut fwd, &gen, emb, f, mem, bos, eos, max_len,
            DecodeStrategy::Beam(vocab.pow(max_len as u32)),
        )
        .unwrap();
        assert!(
            close(beam_all.score, best_score, 1e-9),
            "exhaustive beam {} vs oracle {}",
            beam_all.score,
            best_score
        );
        assert!(beam3.score <= best_score + 1e-12);
    }

    #[test]
    fn teacher_forced_likelihood_is_independent_of_decoding() {
        let (store, gen, tok_emb) = setup(13, 12);
        let gold = vec![9usize, 10, 7];
        let tf = |store: &ParamStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape).unwrap();
            let mut fwd = Forward::eval(&mut tape, &bind);
            let (f, mem) = span_memory(&mut fwd, &gen, 13);
            let emb = fwd.bind.node(tok_emb);
            let d = teacher_forced_distributions(&mut fwd, &gen, emb, f, mem, &gold, 6, "d")
                .unwrap();
            tape.data(d).to_vec()
        };
        let before = tf(&store);
        // Running generation does not touch parameters or teacher forcing.
        {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape).unwrap();
            let mut fwd = Forward::eval(&mut tape, &bind);
            let (f, mem) = span_memory(&mut fwd, &gen, 13);
            let emb = fwd.bind.node(tok_emb);
            generate(&mut fwd, &gen, emb, f, mem, 6, 7, 6, DecodeStrategy::Beam(2)).unwrap();
        }
        let after = tf(&store);
        assert_eq!(before, after);
    }
}
