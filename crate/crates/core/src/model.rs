//! Parameter store, model configuration, and the assembled end-to-end
//! network: encode history and knowledge, build the topic-aware pair
//! matrix, predict spans, and generate responses.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{self, AttentionMode, AttentionParams, FeatureInteraction};
use crate::corpus::{
    build_sequences, Corpus, CorpusError, Mode, Role, Span, Turn, Vocabulary,
};
use crate::encoder::{self, EncoderKind, EncoderParams, SequencePair};
use crate::generator::{self, DecodeStrategy, GeneratorParams};
use crate::rng;
use crate::selector::{self, SelectorParams};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: L_s={loss_s}, L_g={loss_g}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        loss_s: f64,
        loss_g: f64,
    },
}

/// Handle to a registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

/// All trainable tensors, in registration order. Initialization draws
/// from a per-parameter named stream so values depend only on the seed
/// and the parameter name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    fn register(
        &mut self,
        name: &str,
        data: Vec<f64>,
        shape: Vec<usize>,
    ) -> Result<ParamId, ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::Config(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(ModelError::Tensor(TensorError::DataLength {
                len: data.len(),
                shape,
            }));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            data,
            shape,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    fn init_rng(&self, name: &str) -> ChaCha8Rng {
        rng::stream(self.seed, &format!("init.{name}"))
    }

    pub fn register_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId, ModelError> {
        let numel: usize = shape.iter().product();
        self.register(name, vec![0.0; numel], shape)
    }

    pub fn register_ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId, ModelError> {
        let numel: usize = shape.iter().product();
        self.register(name, vec![1.0; numel], shape)
    }

    /// Xavier-uniform matrix for a linear map `rows → cols`.
    pub fn register_linear(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId, ModelError> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = self.init_rng(name);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, data, vec![rows, cols])
    }

    /// Embedding table with a small uniform init.
    pub fn register_embedding(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<ParamId, ModelError> {
        let mut rng = self.init_rng(name);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-0.1..0.1)).collect();
        self.register(name, data, vec![rows, cols])
    }

    /// Conv kernel [c_out, c_in, k] with fan-based uniform init.
    pub fn register_conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) -> Result<ParamId, ModelError> {
        let bound = (6.0 / ((c_in * k) + (c_out * k)) as f64).sqrt();
        let mut rng = self.init_rng(name);
        let data: Vec<f64> = (0..c_out * c_in * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, data, vec![c_out, c_in, k])
    }

    /// Insert every parameter as a gradient-tracked leaf on a tape.
    pub fn bind(&self, tape: &mut Tape) -> Result<Binding, ModelError> {
        let mut nodes = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let t = Tensor::new(e.data.clone(), e.shape.clone(), true)?;
            nodes.push(tape.leaf(t));
        }
        Ok(Binding { nodes })
    }

    /// Snapshot of all parameter data, aligned with registration order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.data.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<(), ModelError> {
        if snapshot.len() != self.entries.len() {
            return Err(ModelError::Config(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            if e.data.len() != s.len() {
                return Err(ModelError::Config(format!(
                    "snapshot length mismatch for `{}`",
                    e.name
                )));
            }
            e.data.copy_from_slice(s);
        }
        Ok(())
    }
}

/// Tape nodes for every parameter of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    /// Wrap externally created leaves (used by gradient checking, where
    /// the checker owns the tensors).
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Binding { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Per-site dropout RNG streams, derived lazily from the run seed.
#[derive(Debug)]
pub struct DropoutStreams {
    seed: u64,
    streams: HashMap<String, ChaCha8Rng>,
}

impl DropoutStreams {
    pub fn new(seed: u64) -> Self {
        DropoutStreams {
            seed,
            streams: HashMap::new(),
        }
    }

    pub fn rng(&mut self, site: &str) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams
            .entry(site.to_string())
            .or_insert_with(|| rng::stream(seed, &format!("dropout.{site}")))
    }
}

/// Mutable context threaded through a forward pass: the tape, the
/// parameter binding, and (in train mode) dropout streams.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub bind: &'a Binding,
    dropout: Option<(&'a mut DropoutStreams, f64)>,
}

impl<'a> Forward<'a> {
    pub fn eval(tape: &'a mut Tape, bind: &'a Binding) -> Self {
        Forward {
            tape,
            bind,
            dropout: None,
        }
    }

    pub fn train(
        tape: &'a mut Tape,
        bind: &'a Binding,
        streams: &'a mut DropoutStreams,
        p: f64,
    ) -> Self {
        Forward {
            tape,
            bind,
            dropout: Some((streams, p)),
        }
    }

    /// Apply dropout in train mode; identity in eval mode.
    pub fn maybe_dropout(&mut self, x: NodeId, site: &str) -> Result<NodeId, ModelError> {
        match self.dropout.as_mut() {
            Some((streams, p)) if *p > 0.0 => {
                let p = *p;
                Ok(self.tape.dropout(x, p, streams.rng(site))?)
            }
            _ => Ok(x),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub n_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub ffn_multiplier: usize,
    pub max_sentence_length: usize,
    pub max_turns: usize,
    pub max_factoids: usize,
    pub max_decode_len: usize,
    pub max_span: usize,
    pub encoder_kind: EncoderKind,
    pub separate_topic_encoder: bool,
    pub attention_mode: AttentionMode,
    pub feature_interaction: FeatureInteraction,
    pub strict_softmax_exp: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 64,
            n_layers: 2,
            n_decoder_layers: 2,
            n_heads: 4,
            ffn_multiplier: 2,
            max_sentence_length: 50,
            max_turns: 15,
            max_factoids: 64,
            max_decode_len: 50,
            max_span: 5,
            encoder_kind: EncoderKind::Transformer,
            separate_topic_encoder: false,
            attention_mode: AttentionMode::Full,
            feature_interaction: FeatureInteraction::Elementwise,
            strict_softmax_exp: false,
        }
    }

    /// Full-scale configuration mirroring the published hyperparameters
    /// (hidden size 768, kernel sizes 3). Training at this scale from
    /// scratch is documented as out of scope.
    pub fn paper() -> Self {
        ModelConfig {
            hidden: 768,
            n_layers: 6,
            n_decoder_layers: 6,
            n_heads: 12,
            ffn_multiplier: 4,
            max_sentence_length: 50,
            max_turns: 15,
            max_factoids: 512,
            max_decode_len: 50,
            max_span: 5,
            encoder_kind: EncoderKind::Transformer,
            separate_topic_encoder: false,
            attention_mode: AttentionMode::Full,
            feature_interaction: FeatureInteraction::Elementwise,
            strict_softmax_exp: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.hidden % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden {} must be a positive multiple of n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.max_span == 0 {
            return Err(ModelError::Config("max_span must be at least 1".into()));
        }
        if self.max_sentence_length < 8 {
            return Err(ModelError::Config(
                "max_sentence_length must leave room for pseudo-tokens".into(),
            ));
        }
        Ok(())
    }
}

/// The assembled model: all parameters plus the vocabulary they are
/// tied to.
#[derive(Debug, Clone)]
pub struct TargModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub topic_encoder: Option<EncoderParams>,
    pub attention: AttentionParams,
    pub selector: SelectorParams,
    pub generator: GeneratorParams,
}

impl TargModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let encoder = EncoderParams::register(&mut store, "encoder", vocab.len(), &config)?;
        let topic_encoder = if config.separate_topic_encoder {
            Some(EncoderParams::register(
                &mut store,
                "topic_encoder",
                vocab.len(),
                &config,
            )?)
        } else {
            None
        };
        let attention = AttentionParams::register(&mut store, config.hidden)?;
        let selector = SelectorParams::register(&mut store, config.hidden, config.max_factoids)?;
        let generator = GeneratorParams::register(&mut store, &config, config.n_decoder_layers)?;
        Ok(TargModel {
            config,
            vocab,
            store,
            encoder,
            topic_encoder,
            attention,
            selector,
            generator,
        })
    }

    fn topic_encoder(&self) -> &EncoderParams {
        self.topic_encoder.as_ref().unwrap_or(&self.encoder)
    }

    /// Encode a list of sequence pairs into semantic and topic embedding
    /// matrices (rows × H).
    pub fn encode_pairs(
        &self,
        fwd: &mut Forward,
        pairs: &[SequencePair],
        site: &str,
    ) -> Result<(NodeId, NodeId), ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::Config(format!(
                "{site}: nothing to encode"
            )));
        }
        let mut sem_rows = Vec::with_capacity(pairs.len());
        let mut top_rows = Vec::with_capacity(pairs.len());
        for pair in pairs {
            sem_rows.push(encoder::encode(
                fwd,
                &self.encoder,
                &pair.semantic,
                &format!("{site}.sem"),
            )?);
            top_rows.push(encoder::encode(
                fwd,
                self.topic_encoder(),
                &pair.topic,
                &format!("{site}.topic"),
            )?);
        }
        let s = fwd.tape.concat_rows(&sem_rows)?;
        let t = fwd.tape.concat_rows(&top_rows)?;
        Ok((s, t))
    }

    /// Encode the dialogue history. An empty history is replaced by one
    /// reserved BOS row so downstream softmaxes stay well defined.
    pub fn encode_history(
        &self,
        fwd: &mut Forward,
        history: &[SequencePair],
    ) -> Result<(NodeId, NodeId), ModelError> {
        let fallback;
        let items = if history.is_empty() {
            fallback = [bos_history_row(&self.vocab)?];
            &fallback[..]
        } else {
            history
        };
        self.encode_pairs(fwd, items, "history")
    }

    /// Encode the factoid bank (pseudo-factoid first).
    pub fn encode_factoids(
        &self,
        fwd: &mut Forward,
        factoids: &[SequencePair],
    ) -> Result<(NodeId, NodeId), ModelError> {
        self.encode_pairs(fwd, factoids, "factoid")
    }

    /// Topic-aware pair representations for all factoids: K as M rows of
    /// 3H values, plus the per-factoid attention triples.
    pub fn topic_aware_matrix(
        &self,
        fwd: &mut Forward,
        s_u: NodeId,
        t_u: NodeId,
        s_k: NodeId,
        t_k: NodeId,
    ) -> Result<TopicAwareMatrix, ModelError> {
        let n = fwd.tape.shape(s_u)[0];
        let m = fwd.tape.shape(s_k)[0];
        let strict = self.config.strict_softmax_exp;
        let mode = self.config.attention_mode;

        let w_d = fwd.bind.node(self.attention.w_d);
        let w_b = fwd.bind.node(self.attention.w_b);
        let w_o = fwd.bind.node(self.attention.w_o);
        let w_f = fwd.bind.node(self.attention.w_f);
        let b_f = fwd.bind.node(self.attention.b_f);
        let v_f = fwd.bind.node(self.attention.v_f);

        // Hoisted factoid-independent products.
        let tw = fwd.tape.matmul(t_u, w_b)?;
        let sw = fwd.tape.matmul(s_u, w_f)?;
        let v_f_rep = if self.config.feature_interaction == FeatureInteraction::Elementwise {
            Some(fwd.tape.repeat_rows(v_f, n)?)
        } else {
            None
        };
        let uniform = if mode == AttentionMode::Uniform {
            Some(
                fwd.tape
                    .constant(vec![1.0 / n as f64; n], vec![1, n])?,
            )
        } else {
            None
        };

        let mut k_rows = Vec::with_capacity(m);
        let mut triples = Vec::with_capacity(m);
        for i in 0..m {
            let t_k_i = fwd.tape.slice_rows(t_k, i, i + 1)?;
            let s_k_i = fwd.tape.slice_rows(s_k, i, i + 1)?;
            let (a_d, a_b, a_o) = match mode {
                AttentionMode::Uniform => {
                    let u = uniform.expect("uniform row");
                    (u, u, u)
                }
                AttentionMode::Full => (
                    attention::dot_attention(fwd.tape, t_u, t_k_i, w_d, strict, None)?,
                    attention::bilinear_attention_pre(fwd.tape, tw, t_k_i, strict, None)?,
                    attention::outer_attention(fwd.tape, t_u, t_k_i, w_o, strict, None)?,
                ),
                AttentionMode::DotOnly => {
                    let a = attention::dot_attention(fwd.tape, t_u, t_k_i, w_d, strict, None)?;
                    (a, a, a)
                }
                AttentionMode::BilinearOnly => {
                    let a =
                        attention::bilinear_attention_pre(fwd.tape, tw, t_k_i, strict, None)?;
                    (a, a, a)
                }
                AttentionMode::OuterOnly => {
                    let a = attention::outer_attention(fwd.tape, t_u, t_k_i, w_o, strict, None)?;
                    (a, a, a)
                }
            };
            let f_i = attention::feature_interaction_pre(
                fwd.tape,
                sw,
                s_k_i,
                b_f,
                v_f,
                v_f_rep,
                self.config.feature_interaction,
            )?;
            k_rows.push(attention::aggregate(fwd.tape, a_d, a_b, a_o, f_i)?);
            triples.push([a_d, a_b, a_o]);
        }
        Ok(TopicAwareMatrix {
            k_rows: fwd.tape.concat_rows(&k_rows)?,
            attention: triples,
        })
    }

    /// Span distributions from the pair matrix.
    pub fn span_distributions(
        &self,
        fwd: &mut Forward,
        k: &TopicAwareMatrix,
    ) -> Result<(NodeId, NodeId), ModelError> {
        selector::predict_span_distributions(
            fwd.tape,
            k.k_rows,
            fwd.bind.node(self.selector.w_s),
            fwd.bind.node(self.selector.b_s),
            fwd.bind.node(self.selector.w_e),
            fwd.bind.node(self.selector.b_e),
            None,
        )
    }

    /// Fusion embedding and projected span memory for a chosen span.
    pub fn span_features(
        &self,
        fwd: &mut Forward,
        k: &TopicAwareMatrix,
        span: Span,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let rows = fwd.tape.slice_rows(k.k_rows, span.start, span.end + 1)?;
        let f = generator::fuse_span(fwd, &self.generator, rows)?;
        let mem = generator::project_span(fwd, &self.generator, rows)?;
        Ok((f, mem))
    }
}

/// Pair-representation matrix plus retained attention rows for
/// inspection and export.
pub struct TopicAwareMatrix {
    /// M×3H; row i is the pair representation of factoid i.
    pub k_rows: NodeId,
    /// Per factoid: [dot, bilinear, outer] attention rows (each 1×N).
    pub attention: Vec<[NodeId; 3]>,
}

/// Reserved single-row history used when a turn has no preceding
/// utterances.
pub fn bos_history_row(vocab: &Vocabulary) -> Result<SequencePair, ModelError> {
    let pos = vocab.pos_id(1)?;
    Ok(SequencePair {
        semantic: vec![
            Vocabulary::CLS,
            Vocabulary::BOS,
            Vocabulary::SEP,
            Vocabulary::USER,
            Vocabulary::SEP,
        ],
        topic: vec![
            Vocabulary::CLS,
            Vocabulary::BOS,
            Vocabulary::SEP,
            Vocabulary::USER,
            Vocabulary::SEP,
            pos,
            Vocabulary::SEP,
        ],
    })
}

/// Sequence pairs for every global factoid position (pseudo-factoid at
/// index 0).
pub fn factoid_sequences(
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_sentence_length: usize,
) -> Result<Vec<SequencePair>, ModelError> {
    let mut out = Vec::with_capacity(corpus.m_total());
    for global in 0..corpus.m_total() {
        let (semantic, topic) = build_sequences(
            vocab,
            corpus.factoid_text(global),
            corpus.factoid_topic(global),
            Mode::Klg,
            0,
            max_sentence_length,
        )?;
        out.push(SequencePair { semantic, topic });
    }
    Ok(out)
}

/// Sequence pairs for a dialogue history slice (turns before the turn at
/// `turn_index`), windowed to the most recent `max_turns` utterances.
/// Positions count back from the current turn: the most recent utterance
/// gets position 1.
pub fn history_sequences(
    turns: &[Turn],
    turn_index: usize,
    vocab: &Vocabulary,
    max_sentence_length: usize,
) -> Result<Vec<SequencePair>, ModelError> {
    let window_start = turn_index.saturating_sub(vocab.max_turns());
    let mut out = Vec::with_capacity(turn_index - window_start);
    for j in window_start..turn_index {
        let turn = &turns[j];
        let mode = match turn.role {
            Role::User => Mode::User,
            Role::System => Mode::Sys,
        };
        let posit = turn_index - j;
        let (semantic, topic) =
            build_sequences(vocab, &turn.text, &turn.topic, mode, posit, max_sentence_length)?;
        out.push(SequencePair { semantic, topic });
    }
    Ok(out)
}

/// A full per-turn prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub span: Span,
    pub span_score: f64,
    pub ranking: Vec<(usize, f64)>,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    pub response_ids: Vec<usize>,
    /// Per factoid: [dot, bilinear, outer] attention weights over the
    /// history utterances. Populated when requested.
    pub attention: Vec<[Vec<f64>; 3]>,
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub strategy: DecodeStrategy,
    pub generate: bool,
    pub keep_attention: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            strategy: DecodeStrategy::Greedy,
            generate: true,
            keep_attention: false,
        }
    }
}

/// Run the full pipeline in eval mode for a batch of histories sharing
/// one factoid bank. The generator consumes the *predicted* span.
pub fn predict_batch(
    model: &TargModel,
    histories: &[Vec<SequencePair>],
    factoids: &[SequencePair],
    opts: &PredictOptions,
) -> Result<Vec<Prediction>, ModelError> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape)?;
    let mut fwd = Forward::eval(&mut tape, &bind);
    let (s_k, t_k) = model.encode_factoids(&mut fwd, factoids)?;

    let mut out = Vec::with_capacity(histories.len());
    for history in histories {
        let (s_u, t_u) = model.encode_history(&mut fwd, history)?;
        let k = model.topic_aware_matrix(&mut fwd, s_u, t_u, s_k, t_k)?;
        let (ps_node, pe_node) = model.span_distributions(&mut fwd, &k)?;
        let p_start = fwd.tape.data(ps_node).to_vec();
        let p_end = fwd.tape.data(pe_node).to_vec();
        let decoded = selector::decode_span(&p_start, &p_end, model.config.max_span);
        let ranking = selector::rank_factoids(&p_start, &p_end, model.config.max_span);

        let response_ids = if opts.generate {
            let (f, mem) = model.span_features(&mut fwd, &k, decoded.span)?;
            let tok_emb = fwd.bind.node(model.encoder.tok_emb);
            generator::generate(
                &mut fwd,
                &model.generator,
                tok_emb,
                f,
                mem,
                Vocabulary::BOS,
                Vocabulary::EOS,
                model.config.max_decode_len,
                opts.strategy,
            )?
            .tokens
        } else {
            Vec::new()
        };

        let attention = if opts.keep_attention {
            k.attention
                .iter()
                .map(|[d, b, o]| {
                    [
                        fwd.tape.data(*d).to_vec(),
                        fwd.tape.data(*b).to_vec(),
                        fwd.tape.data(*o).to_vec(),
                    ]
                })
                .collect()
        } else {
            Vec::new()
        };

        out.push(Prediction {
            span: decoded.span,
            span_score: decoded.score,
            ranking,
            p_start,
            p_end,
            response_ids,
            attention,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};

    fn tiny_model(seed: u64) -> (TargModel, Corpus) {
        let cfg = SyntheticConfig {
            topics: 2,
            factoids_per_topic: 2,
            n_dialogues: 3,
            turns_per_dialogue: 3,
            shift_prob: 0.5,
            ungrounded_prob: 0.2,
            wide_span_prob: 0.2,
            seed,
        };
        let (corpus, _) = generate_synthetic(&cfg).unwrap();
        let vocab = Vocabulary::build(&corpus, 15);
        let mut mc = ModelConfig::desk();
        mc.hidden = 16;
        mc.n_layers = 1;
        mc.n_decoder_layers = 1;
        mc.n_heads = 2;
        mc.max_factoids = 16;
        let model = TargModel::new(mc, vocab, seed).unwrap();
        (model, corpus)
    }

    #[test]
    fn shared_encoder_is_the_default() {
        let (model, _) = tiny_model(3);
        assert!(model.topic_encoder.is_none());
        let mut cfg = model.config.clone();
        cfg.separate_topic_encoder = true;
        let m2 = TargModel::new(cfg, model.vocab.clone(), 3).unwrap();
        assert!(m2.topic_encoder.is_some());
        assert!(m2.store.len() > model.store.len());
    }

    #[test]
    fn predict_batch_produces_valid_spans_and_rankings() {
        let (model, corpus) = tiny_model(4);
        let factoids =
            factoid_sequences(&corpus, &model.vocab, model.config.max_sentence_length).unwrap();
        let dlg = &corpus.dialogues[0];
        let history =
            history_sequences(&dlg.turns, 1, &model.vocab, model.config.max_sentence_length)
                .unwrap();
        let preds = predict_batch(
            &model,
            &[history],
            &factoids,
            &PredictOptions {
                keep_attention: true,
                ..PredictOptions::default()
            },
        )
        .unwrap();
        assert_eq!(preds.len(), 1);
        let p = &preds[0];
        let m = corpus.m_total();
        assert!(p.span.end < m);
        assert!(p.span.width() <= model.config.max_span);
        let sum_s: f64 = p.p_start.iter().sum();
        assert!((sum_s - 1.0).abs() < 1e-9);
        assert_eq!(p.attention.len(), m);
        // Pseudo-factoid excluded from rankings.
        assert!(!p.ranking.iter().any(|&(i, _)| i == 0));
    }

    #[test]
    fn empty_history_uses_reserved_row() {
        let (model, corpus) = tiny_model(5);
        let factoids =
            factoid_sequences(&corpus, &model.vocab, model.config.max_sentence_length).unwrap();
        let preds = predict_batch(
            &model,
            &[Vec::new()],
            &factoids,
            &PredictOptions::default(),
        )
        .unwrap();
        assert_eq!(preds.len(), 1);
    }

    #[test]
    fn predictions_are_deterministic() {
        let (model, corpus) = tiny_model(6);
        let factoids =
            factoid_sequences(&corpus, &model.vocab, model.config.max_sentence_length).unwrap();
        let dlg = &corpus.dialogues[1];
        let history =
            history_sequences(&dlg.turns, 3, &model.vocab, model.config.max_sentence_length)
                .unwrap();
        let a = predict_batch(&model, &[history.clone()], &factoids, &PredictOptions::default())
            .unwrap();
        let b = predict_batch(&model, &[history], &factoids, &PredictOptions::default())
            .unwrap();
        assert_eq!(a[0].span, b[0].span);
        assert_eq!(a[0].response_ids, b[0].response_ids);
        assert_eq!(a[0].p_start, b[0].p_start);
    }

    #[test]
    fn history_positions_count_back_from_current_turn() {
        let (model, corpus) = tiny_model(7);
        let dlg = &corpus.dialogues[0];
        let seqs =
            history_sequences(&dlg.turns, 3, &model.vocab, model.config.max_sentence_length)
                .unwrap();
        assert_eq!(seqs.len(), 3);
        // Most recent utterance (index 2) has position 1.
        let pos_token_of = |sp: &SequencePair| sp.topic[sp.topic.len() - 2];
        assert_eq!(pos_token_of(&seqs[2]), model.vocab.pos_id(1).unwrap());
        assert_eq!(pos_token_of(&seqs[0]), model.vocab.pos_id(3).unwrap());
    }
}
