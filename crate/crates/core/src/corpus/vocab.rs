//! Whole-word tokenizer, vocabulary with reserved pseudo-tokens, and the
//! pseudo-token sequence construction feeding the encoder.

use std::collections::HashMap;

use super::{Corpus, CorpusError, PSEUDO_FACTOID_TEXT, PSEUDO_TOPIC};

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Whether a piece of text marks a system utterance, user utterance,
/// or factoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    User,
    Sys,
    Klg,
}

impl Mode {
    pub fn token_id(self) -> usize {
        match self {
            Mode::User => Vocabulary::USER,
            Mode::Sys => Vocabulary::SYS,
            Mode::Klg => Vocabulary::KLG,
        }
    }
}

/// Token → id map with a fixed reserved prefix:
/// PAD, CLS, SEP, USER, SYS, KLG, BOS, EOS, UNK, then one position token
/// per history slot 0..=max_turns, then corpus tokens in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    max_turns: usize,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const CLS: usize = 1;
    pub const SEP: usize = 2;
    pub const USER: usize = 3;
    pub const SYS: usize = 4;
    pub const KLG: usize = 5;
    pub const BOS: usize = 6;
    pub const EOS: usize = 7;
    pub const UNK: usize = 8;
    const FIRST_POS: usize = 9;

    fn reserved(max_turns: usize) -> Vec<String> {
        let mut tokens: Vec<String> = [
            "[pad]", "[cls]", "[sep]", "[user]", "[sys]", "[klg]", "[bos]", "[eos]", "[unk]",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for p in 0..=max_turns {
            tokens.push(format!("[pos_{p}]"));
        }
        tokens
    }

    /// Build from a corpus in deterministic first-seen order: pseudo
    /// entries first, then documents (title, factoid text, factoid topic),
    /// then dialogue turns.
    pub fn build(corpus: &Corpus, max_turns: usize) -> Self {
        let mut tokens = Self::reserved(max_turns);
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let add_text = |text: &str, tokens: &mut Vec<String>, index: &mut HashMap<_, _>| {
            for tok in tokenize(text) {
                if !index.contains_key(&tok) {
                    index.insert(tok.clone(), tokens.len());
                    tokens.push(tok);
                }
            }
        };
        add_text(PSEUDO_FACTOID_TEXT, &mut tokens, &mut index);
        add_text(PSEUDO_TOPIC, &mut tokens, &mut index);
        for doc in &corpus.documents {
            add_text(&doc.title, &mut tokens, &mut index);
            for f in &doc.factoids {
                add_text(&f.text, &mut tokens, &mut index);
                add_text(&f.topic, &mut tokens, &mut index);
            }
        }
        for dlg in &corpus.dialogues {
            for turn in &dlg.turns {
                add_text(&turn.text, &mut tokens, &mut index);
            }
        }
        Vocabulary {
            tokens,
            index,
            max_turns,
        }
    }

    /// Rebuild from a serialized token list (checkpoint load). The
    /// reserved prefix must be intact.
    pub fn from_tokens(tokens: Vec<String>, max_turns: usize) -> Result<Self, CorpusError> {
        let reserved = Self::reserved(max_turns);
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(CorpusError::Generation(
                "vocabulary is missing its reserved token prefix".into(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            tokens,
            index,
            max_turns,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_turns(&self) -> usize {
        self.max_turns
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("[unk]")
    }

    /// Id of a token; unknown tokens map to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    /// Position pseudo-token id for history slot `posit`.
    pub fn pos_id(&self, posit: usize) -> Result<usize, CorpusError> {
        if posit > self.max_turns {
            return Err(CorpusError::PositTooLarge {
                posit,
                max: self.max_turns,
            });
        }
        Ok(Self::FIRST_POS + posit)
    }

    /// Tokenize and map a text to ids (unknowns become UNK).
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Decode generated ids back to a token string, skipping control ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= Self::FIRST_POS + self.max_turns + 1 || id == Self::UNK)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    /// FNV-1a fingerprint over the token list; stable across runs.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Build the encoder input id sequences for a text and its topic.
///
/// Semantic: `[CLS] tokens.. [SEP] [MODE] [SEP]`, truncated so the total
/// length never exceeds `max_sentence_length`.
/// Topic: `[CLS] topic-tokens.. [SEP] [MODE] [SEP] [POS_posit] [SEP]`.
/// Factoids use posit 0; history utterances use their position slot.
pub fn build_sequences(
    vocab: &Vocabulary,
    text: &str,
    topic: &str,
    mode: Mode,
    posit: usize,
    max_sentence_length: usize,
) -> Result<(Vec<usize>, Vec<usize>), CorpusError> {
    let pos = vocab.pos_id(posit)?;

    let body_budget = max_sentence_length.saturating_sub(4);
    let mut semantic = Vec::with_capacity(max_sentence_length);
    semantic.push(Vocabulary::CLS);
    let mut body = vocab.encode_text(text);
    body.truncate(body_budget);
    semantic.extend(body);
    semantic.extend([Vocabulary::SEP, mode.token_id(), Vocabulary::SEP]);

    let topic_budget = max_sentence_length.saturating_sub(6);
    let mut topic_seq = Vec::with_capacity(max_sentence_length);
    topic_seq.push(Vocabulary::CLS);
    let mut topic_body = vocab.encode_text(topic);
    topic_body.truncate(topic_budget);
    topic_seq.extend(topic_body);
    topic_seq.extend([
        Vocabulary::SEP,
        mode.token_id(),
        Vocabulary::SEP,
        pos,
        Vocabulary::SEP,
    ]);

    Ok((semantic, topic_seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, Document, Factoid, Role, Turn};

    fn tiny_corpus() -> Corpus {
        Corpus::new(
            vec![Document {
                doc_id: "d".into(),
                title: "guide".into(),
                factoids: vec![Factoid {
                    id: "f0".into(),
                    text: "hello there world".into(),
                    topic: "guide".into(),
                    doc_id: "d".into(),
                    position_in_doc: 0,
                }],
            }],
            vec![Dialogue {
                id: "dlg".into(),
                turns: vec![
                    Turn {
                        role: Role::User,
                        text: "hello there".into(),
                        grounding: None,
                        topic: String::new(),
                    },
                    Turn {
                        role: Role::System,
                        text: "fresh words appear".into(),
                        grounding: None,
                        topic: String::new(),
                    },
                ],
            }],
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, there-World!  42"),
            vec!["hello", "there", "world", "42"]
        );
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocabulary::build(&tiny_corpus(), 15);
        assert_eq!(v.id("[cls]"), Vocabulary::CLS);
        assert_eq!(v.id("[eos]"), Vocabulary::EOS);
        assert_eq!(v.pos_id(0).unwrap(), 9);
        assert_eq!(v.pos_id(15).unwrap(), 24);
        assert!(v.pos_id(16).is_err());
        assert_eq!(v.id("never-seen-token"), Vocabulary::UNK);

        let rebuilt = Vocabulary::from_tokens(v.tokens().to_vec(), 15).unwrap();
        assert_eq!(rebuilt, v);
        assert_eq!(rebuilt.fingerprint(), v.fingerprint());
    }

    #[test]
    fn sequences_match_expected_layout() {
        let v = Vocabulary::build(&tiny_corpus(), 15);
        let (sem, top) =
            build_sequences(&v, "hello there", "guide", Mode::User, 2, 50).unwrap();
        assert_eq!(sem[0], Vocabulary::CLS);
        assert_eq!(sem[sem.len() - 3], Vocabulary::SEP);
        assert_eq!(sem[sem.len() - 2], Vocabulary::USER);
        assert_eq!(sem[sem.len() - 1], Vocabulary::SEP);
        assert_eq!(sem.len(), 2 + 4);

        // Topic sequence ends [POS_2] [SEP].
        assert_eq!(top[top.len() - 2], v.pos_id(2).unwrap());
        assert_eq!(top[top.len() - 1], Vocabulary::SEP);
    }

    #[test]
    fn factoid_topic_sequence_uses_pos_zero() {
        let v = Vocabulary::build(&tiny_corpus(), 15);
        let (_, top) =
            build_sequences(&v, "hello there world", "guide", Mode::Klg, 0, 50).unwrap();
        assert_eq!(top[top.len() - 2], v.pos_id(0).unwrap());
    }

    #[test]
    fn long_text_is_truncated_with_pseudo_tokens_intact() {
        let v = Vocabulary::build(&tiny_corpus(), 15);
        let long: String = (0..60).map(|i| format!("w{i} ")).collect();
        let (sem, _) = build_sequences(&v, &long, "guide", Mode::Sys, 1, 50).unwrap();
        assert_eq!(sem.len(), 50);
        assert_eq!(sem[0], Vocabulary::CLS);
        assert_eq!(
            &sem[47..],
            &[Vocabulary::SEP, Vocabulary::SYS, Vocabulary::SEP]
        );
    }
}
