//! Joint optimization of the selection and generation losses with Adam,
//! plus the ablation switches.

use rand::seq::SliceRandom;

use crate::attention::{AttentionMode, FeatureInteraction};
use crate::corpus::{Corpus, Role, Span, Vocabulary};
use crate::encoder::{EncoderKind, SequencePair};
use crate::generator::{self, DecodeStrategy};
use crate::metrics;
use crate::model::{
    bos_history_row, factoid_sequences, history_sequences, predict_batch, DropoutStreams,
    Forward, ModelConfig, ModelError, ParamStore, PredictOptions, TargModel,
};
use crate::rng;
use crate::tensor::{NodeId, Tape};

/// Probability floor applied before taking logs of gold probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoTopicAttention,
    DotOnly,
    BilinearOnly,
    OuterOnly,
    BilstmEncoder,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoTopicAttention,
        Ablation::DotOnly,
        Ablation::BilinearOnly,
        Ablation::OuterOnly,
        Ablation::BilstmEncoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTopicAttention => "no_topic_attention",
            Ablation::DotOnly => "dot_only",
            Ablation::BilinearOnly => "bilinear_only",
            Ablation::OuterOnly => "outer_only",
            Ablation::BilstmEncoder => "bilstm_encoder",
        }
    }

    /// Apply this ablation to a base model configuration.
    pub fn apply(&self, config: &mut ModelConfig) {
        match self {
            Ablation::Full => {}
            Ablation::NoTopicAttention => config.attention_mode = AttentionMode::Uniform,
            Ablation::DotOnly => config.attention_mode = AttentionMode::DotOnly,
            Ablation::BilinearOnly => config.attention_mode = AttentionMode::BilinearOnly,
            Ablation::OuterOnly => config.attention_mode = AttentionMode::OuterOnly,
            Ablation::BilstmEncoder => config.encoder_kind = EncoderKind::BiLstm,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ablation::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Balance coefficient weighting selection vs generation loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub feature_interaction: FeatureInteraction,
    /// Evaluate on dev and track the best checkpoint each epoch.
    pub eval_each_epoch: bool,
}

impl TrainConfig {
    /// Desk-scale defaults. The published full-scale learning rate (3e-5)
    /// is tuned for fine-tuning a large pre-trained model; training from
    /// scratch at desk scale wants a larger step.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lambda: 0.5,
            learning_rate: 1e-3,
            batch_size: 8,
            dropout: 0.1,
            epochs: 10,
            seed,
            ablation: Ablation::Full,
            feature_interaction: FeatureInteraction::Elementwise,
            eval_each_epoch: true,
        }
    }

    /// Full-scale optimization constants.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            ..TrainConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ModelError::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(ModelError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One system turn to learn from.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub history: Vec<SequencePair>,
    pub gold_span: Span,
    /// Gold response ids, EOS-terminated.
    pub gold_response: Vec<usize>,
    pub gold_response_tokens: Vec<String>,
}

/// Build one example per system turn. Ungrounded turns carry the
/// pseudo-factoid span (0, 0).
pub fn build_examples(
    corpus: &Corpus,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<TrainingExample>, ModelError> {
    let m_total = corpus.m_total();
    if m_total > config.max_factoids {
        return Err(ModelError::Config(format!(
            "corpus has {m_total} factoid positions, selector capacity is {}",
            config.max_factoids
        )));
    }
    let mut out = Vec::new();
    for dlg in &corpus.dialogues {
        for (t, turn) in dlg.turns.iter().enumerate() {
            if turn.role != Role::System {
                continue;
            }
            let gold_span = corpus.gold_span(turn);
            if gold_span.end >= m_total {
                return Err(ModelError::Config(format!(
                    "dialogue `{}`: gold span end {} out of range",
                    dlg.id, gold_span.end
                )));
            }
            let mut history =
                history_sequences(&dlg.turns, t, vocab, config.max_sentence_length)?;
            if history.is_empty() {
                history.push(bos_history_row(vocab)?);
            }
            let mut gold_response = vocab.encode_text(&turn.text);
            gold_response.truncate(config.max_decode_len - 1);
            gold_response.push(Vocabulary::EOS);
            out.push(TrainingExample {
                dialogue_id: dlg.id.clone(),
                turn_index: t,
                history,
                gold_span,
                gold_response,
                gold_response_tokens: crate::corpus::tokenize(&turn.text),
            });
        }
    }
    Ok(out)
}

/// Negative log-likelihood of the gold span under the predicted start
/// and end distributions. Returns the scalar node and how many gold
/// probabilities hit the clamp floor.
pub fn selection_loss(
    tape: &mut Tape,
    p_start: NodeId,
    p_end: NodeId,
    gold: Span,
) -> Result<(NodeId, usize), ModelError> {
    let (ls, c1) = tape.pick_log(p_start, gold.start, PROB_FLOOR)?;
    let (le, c2) = tape.pick_log(p_end, gold.end, PROB_FLOOR)?;
    let sum = tape.add(ls, le)?;
    let loss = tape.neg(sum)?;
    Ok((loss, usize::from(c1) + usize::from(c2)))
}

/// Mean negative log-likelihood per gold token under the teacher-forced
/// step distributions (rows of `dists`).
pub fn generation_loss(
    tape: &mut Tape,
    dists: NodeId,
    gold: &[usize],
) -> Result<(NodeId, usize), ModelError> {
    if gold.is_empty() {
        return Err(ModelError::Config("gold response must be non-empty".into()));
    }
    let v = tape.shape(dists)[1];
    let mut clamps = 0;
    let mut terms = Vec::with_capacity(gold.len());
    for (t, &tok) in gold.iter().enumerate() {
        let (lp, clamped) = tape.pick_log(dists, t * v + tok, PROB_FLOOR)?;
        clamps += usize::from(clamped);
        terms.push(lp);
    }
    let stacked = tape.concat_rows(&terms)?;
    let mean = tape.mean(stacked)?;
    let loss = tape.neg(mean)?;
    Ok((loss, clamps))
}

/// Adam optimizer state over a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: store
                .entries()
                .iter()
                .map(|e| (vec![0.0; e.data.len()], vec![0.0; e.data.len()]))
                .collect(),
        }
    }

    /// Apply one update from per-parameter gradients (aligned with the
    /// store's registration order).
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[&[f64]]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (idx, grad) in grads.iter().enumerate() {
            let (m, v) = &mut self.moments[idx];
            let data = store.data_mut(crate::model::ParamId(idx));
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Losses and diagnostics from one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub loss_s: f64,
    pub loss_g: f64,
    pub clamped: usize,
}

/// Forward/backward over one batch and one Adam update. The generator is
/// teacher-forced on gold spans.
pub fn joint_step(
    model: &mut TargModel,
    factoids: &[SequencePair],
    batch: &[&TrainingExample],
    config: &TrainConfig,
    adam: &mut Adam,
    streams: &mut DropoutStreams,
) -> Result<StepStats, ModelError> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape)?;
    let mut fwd = Forward::train(&mut tape, &bind, streams, config.dropout);

    let (s_k, t_k) = model.encode_factoids(&mut fwd, factoids)?;
    let tok_emb = fwd.bind.node(model.encoder.tok_emb);

    let mut sel_losses = Vec::with_capacity(batch.len());
    let mut gen_losses = Vec::with_capacity(batch.len());
    let mut clamped = 0;
    for ex in batch {
        let (s_u, t_u) = model.encode_history(&mut fwd, &ex.history)?;
        let k = model.topic_aware_matrix(&mut fwd, s_u, t_u, s_k, t_k)?;
        let (p_s, p_e) = model.span_distributions(&mut fwd, &k)?;
        let (l_s, c) = selection_loss(fwd.tape, p_s, p_e, ex.gold_span)?;
        clamped += c;
        sel_losses.push(l_s);

        let (f, mem) = model.span_features(&mut fwd, &k, ex.gold_span)?;
        let dists = generator::teacher_forced_distributions(
            &mut fwd,
            &model.generator,
            tok_emb,
            f,
            mem,
            &ex.gold_response,
            Vocabulary::BOS,
            "decoder",
        )?;
        let (l_g, c) = generation_loss(fwd.tape, dists, &ex.gold_response)?;
        clamped += c;
        gen_losses.push(l_g);
    }

    let sel_stack = tape.concat_rows(&sel_losses)?;
    let loss_s = tape.mean(sel_stack)?;
    let gen_stack = tape.concat_rows(&gen_losses)?;
    let loss_g = tape.mean(gen_stack)?;
    let weighted_s = tape.scale(loss_s, config.lambda)?;
    let weighted_g = tape.scale(loss_g, 1.0 - config.lambda)?;
    let loss = tape.add(weighted_s, weighted_g)?;

    let stats = StepStats {
        loss: tape.data(loss)[0],
        loss_s: tape.data(loss_s)[0],
        loss_g: tape.data(loss_g)[0],
        clamped,
    };
    if !stats.loss.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            epoch: 0,
            step: 0,
            loss_s: stats.loss_s,
            loss_g: stats.loss_g,
        });
    }

    tape.backward(loss)?;
    let grads: Vec<&[f64]> = bind
        .nodes()
        .iter()
        .map(|&n| tape.grad(n).expect("parameter gradient"))
        .collect();
    adam.apply(&mut model.store, &grads);
    Ok(stats)
}

/// Dev-set metrics tracked per epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct DevMetrics {
    pub em: f64,
    pub token_f1: f64,
    pub bleu4: f64,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub loss_s: f64,
    pub loss_g: f64,
    pub dev: Option<DevMetrics>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_em: f64,
    /// Snapshot of the best-dev parameters (final parameters stay in the
    /// model).
    pub best_params: Vec<Vec<f64>>,
    pub clamp_warnings: usize,
}

/// Evaluate EM / token-F1 / BLEU-4 of greedy predictions on a corpus.
pub fn evaluate_dev(
    model: &TargModel,
    corpus: &Corpus,
    factoids: &[SequencePair],
    examples: &[TrainingExample],
) -> Result<DevMetrics, ModelError> {
    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut count = 0.0f64;
    let mut candidates = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    let opts = PredictOptions {
        strategy: DecodeStrategy::Greedy,
        generate: true,
        keep_attention: false,
    };
    for chunk in examples.chunks(32) {
        let histories: Vec<Vec<SequencePair>> =
            chunk.iter().map(|ex| ex.history.clone()).collect();
        let preds = predict_batch(model, &histories, factoids, &opts)?;
        for (ex, pred) in chunk.iter().zip(&preds) {
            em_sum += metrics::exact_match(pred.span, ex.gold_span);
            let pred_tokens = corpus.span_tokens(pred.span);
            let gold_tokens = corpus.span_tokens(ex.gold_span);
            f1_sum += metrics::token_f1(&pred_tokens, &gold_tokens);
            count += 1.0;
            candidates.push(model.vocab.decode(&pred.response_ids));
            references.push(ex.gold_response_tokens.clone());
        }
    }
    let bleu4 = metrics::bleu_corpus(&candidates, &references, 4, true).unwrap_or(0.0);
    Ok(DevMetrics {
        em: em_sum / count.max(1.0),
        token_f1: f1_sum / count.max(1.0),
        bleu4,
    })
}

/// Full training loop: shuffled batches, Adam, per-epoch dev evaluation,
/// best-checkpoint tracking. Deterministic under `config.seed`.
pub fn train(
    model: &mut TargModel,
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    config: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    let factoids = factoid_sequences(
        train_corpus,
        &model.vocab,
        model.config.max_sentence_length,
    )?;
    let examples = build_examples(train_corpus, &model.vocab, &model.config)?;
    if examples.is_empty() {
        return Err(ModelError::Config("no system turns to train on".into()));
    }
    let dev_examples = build_examples(dev_corpus, &model.vocab, &model.config)?;

    let mut adam = Adam::new(config.learning_rate, &model.store);
    let mut streams = DropoutStreams::new(config.seed);
    let mut shuffle_rng = rng::stream(config.seed, "shuffle");

    let mut outcome = TrainOutcome {
        logs: Vec::with_capacity(config.epochs),
        best_epoch: 0,
        best_dev_em: f64::NEG_INFINITY,
        best_params: model.store.snapshot(),
        clamp_warnings: 0,
    };

    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch_ids in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> =
                batch_ids.iter().map(|&i| &examples[i]).collect();
            let stats = joint_step(model, &factoids, &batch, config, &mut adam, &mut streams)
                .map_err(|e| match e {
                    ModelError::NonFiniteLoss { loss_s, loss_g, .. } => {
                        ModelError::NonFiniteLoss {
                            epoch,
                            step: steps,
                            loss_s,
                            loss_g,
                        }
                    }
                    other => other,
                })?;
            sums.0 += stats.loss;
            sums.1 += stats.loss_s;
            sums.2 += stats.loss_g;
            outcome.clamp_warnings += stats.clamped;
            steps += 1;
        }

        let dev = if config.eval_each_epoch {
            Some(evaluate_dev(model, dev_corpus, &factoids, &dev_examples)?)
        } else {
            None
        };
        if let Some(d) = dev {
            if d.em > outcome.best_dev_em {
                outcome.best_dev_em = d.em;
                outcome.best_epoch = epoch;
                outcome.best_params = model.store.snapshot();
            }
        }
        let log = EpochLog {
            epoch,
            loss: sums.0 / steps as f64,
            loss_s: sums.1 / steps as f64,
            loss_g: sums.2 / steps as f64,
            dev,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&log);
        }
        outcome.logs.push(log);
    }
    if outcome.best_dev_em == f64::NEG_INFINITY {
        outcome.best_params = model.store.snapshot();
        outcome.best_dev_em = 0.0;
    }
    Ok(outcome)
}
