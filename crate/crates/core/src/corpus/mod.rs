//! Data model for documents, factoids, dialogues, and topics.
//!
//! Knowledge is a list of documents, each holding an ordered sequence of
//! factoids. For selection, all factoids are concatenated into a single
//! global sequence with a reserved "non-relevant" pseudo-factoid at
//! index 0, so an ungrounded turn is a first-class span (0, 0).

mod synthetic;
mod vocab;

pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticStats};
pub use vocab::{build_sequences, tokenize, Mode, Vocabulary};

use std::collections::{HashMap, HashSet};
use thiserror::Error;

/// Reserved topic assigned to ungrounded turns and the pseudo-factoid.
pub const PSEUDO_TOPIC: &str = "non-relevant";
/// Reserved text of the pseudo-factoid at global index 0.
pub const PSEUDO_FACTOID_TEXT: &str = "non-relevant";

#[derive(Debug, Clone, Error)]
pub enum CorpusError {
    #[error("duplicate factoid id `{id}`")]
    DuplicateFactoidId { id: String },
    #[error("factoid `{id}`: {message}")]
    InvalidFactoid { id: String, message: String },
    #[error("dialogue `{id}`: {message}")]
    InvalidDialogue { id: String, message: String },
    #[error(
        "dialogue `{dialogue_id}`: grounding {start}..={end} out of range \
         for document `{doc_id}`"
    )]
    GroundingOutOfRange {
        dialogue_id: String,
        doc_id: String,
        start: usize,
        end: usize,
    },
    #[error("dialogue `{dialogue_id}` references unknown document `{doc_id}`")]
    UnknownDocument {
        dialogue_id: String,
        doc_id: String,
    },
    #[error("turn position {posit} exceeds the maximum of {max} history turns")]
    PositTooLarge { posit: usize, max: usize },
    #[error("word pool collision on `{word}`")]
    PoolCollision { word: String },
    #[error("synthetic generation: {0}")]
    Generation(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factoid {
    pub id: String,
    pub text: String,
    pub topic: String,
    pub doc_id: String,
    pub position_in_doc: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub factoids: Vec<Factoid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    User,
    System,
}

/// Document-local grounding annotation, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
}

/// A contiguous factoid-index span over the global sequence
/// (pseudo-factoid at 0). `(0, 0)` denotes "no knowledge".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_ungrounded(&self) -> bool {
        self.start == 0 && self.end == 0
    }

    /// Global indices in the span that refer to real factoids (not the
    /// pseudo-factoid). Empty for (0, 0).
    pub fn factoid_indices(&self) -> impl Iterator<Item = usize> {
        self.start.max(1)..=self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    pub grounding: Option<Grounding>,
    /// Derived: the grounded factoid's topic, or the pseudo-topic.
    pub topic: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub dialogues: Vec<Dialogue>,
    /// doc_id → offset of its first factoid in the global sequence.
    doc_offsets: HashMap<String, usize>,
    factoid_total: usize,
}

impl Corpus {
    /// Assemble a corpus, derive turn topics, and validate every invariant.
    /// Turn topics supplied by the caller are overwritten by the derived
    /// value (grounded factoid's topic, or the pseudo-topic).
    pub fn new(
        documents: Vec<Document>,
        mut dialogues: Vec<Dialogue>,
    ) -> Result<Self, CorpusError> {
        let mut seen_ids = HashSet::new();
        let mut doc_offsets = HashMap::new();
        let mut offset = 1; // global index 0 is the pseudo-factoid
        for doc in &documents {
            doc_offsets.insert(doc.doc_id.clone(), offset);
            for (pos, f) in doc.factoids.iter().enumerate() {
                if !seen_ids.insert(f.id.clone()) {
                    return Err(CorpusError::DuplicateFactoidId { id: f.id.clone() });
                }
                if f.text.trim().is_empty() {
                    return Err(CorpusError::InvalidFactoid {
                        id: f.id.clone(),
                        message: "empty text".into(),
                    });
                }
                if f.topic.trim().is_empty() {
                    return Err(CorpusError::InvalidFactoid {
                        id: f.id.clone(),
                        message: "empty topic".into(),
                    });
                }
                if f.doc_id != doc.doc_id || f.position_in_doc != pos {
                    return Err(CorpusError::InvalidFactoid {
                        id: f.id.clone(),
                        message: format!(
                            "doc/position mismatch: expected {}#{pos}, got {}#{}",
                            doc.doc_id, f.doc_id, f.position_in_doc
                        ),
                    });
                }
            }
            offset += doc.factoids.len();
        }
        let factoid_total = offset - 1;

        for dlg in &mut dialogues {
            if dlg.turns.is_empty() {
                return Err(CorpusError::InvalidDialogue {
                    id: dlg.id.clone(),
                    message: "no turns".into(),
                });
            }
            for (i, turn) in dlg.turns.iter_mut().enumerate() {
                let expected = if i % 2 == 0 { Role::User } else { Role::System };
                if turn.role != expected {
                    return Err(CorpusError::InvalidDialogue {
                        id: dlg.id.clone(),
                        message: format!(
                            "turn {i} must alternate user/system starting with user"
                        ),
                    });
                }
                match &turn.grounding {
                    None => turn.topic = PSEUDO_TOPIC.to_string(),
                    Some(g) => {
                        let doc = documents
                            .iter()
                            .find(|d| d.doc_id == g.doc_id)
                            .ok_or_else(|| CorpusError::UnknownDocument {
                                dialogue_id: dlg.id.clone(),
                                doc_id: g.doc_id.clone(),
                            })?;
                        if g.start > g.end || g.end >= doc.factoids.len() {
                            return Err(CorpusError::GroundingOutOfRange {
                                dialogue_id: dlg.id.clone(),
                                doc_id: g.doc_id.clone(),
                                start: g.start,
                                end: g.end,
                            });
                        }
                        turn.topic = doc.factoids[g.start].topic.clone();
                    }
                }
            }
        }

        Ok(Corpus {
            documents,
            dialogues,
            doc_offsets,
            factoid_total,
        })
    }

    /// Number of global factoid positions including the pseudo-factoid.
    pub fn m_total(&self) -> usize {
        self.factoid_total + 1
    }

    /// Global factoid index of a document-local position.
    pub fn global_index(&self, doc_id: &str, pos: usize) -> Option<usize> {
        self.doc_offsets.get(doc_id).map(|off| off + pos)
    }

    /// Resolve a grounding annotation to a global span.
    pub fn global_span(&self, g: &Grounding) -> Option<Span> {
        let off = *self.doc_offsets.get(&g.doc_id)?;
        Some(Span::new(off + g.start, off + g.end))
    }

    /// Gold span of a turn: the resolved grounding, or (0, 0) if ungrounded.
    pub fn gold_span(&self, turn: &Turn) -> Span {
        turn.grounding
            .as_ref()
            .and_then(|g| self.global_span(g))
            .unwrap_or(Span::new(0, 0))
    }

    /// Factoid at a global index; `None` for the pseudo-factoid slot.
    pub fn factoid_at(&self, global: usize) -> Option<&Factoid> {
        if global == 0 {
            return None;
        }
        let mut idx = global - 1;
        for doc in &self.documents {
            if idx < doc.factoids.len() {
                return Some(&doc.factoids[idx]);
            }
            idx -= doc.factoids.len();
        }
        None
    }

    /// Text of a global factoid position (pseudo-factoid included).
    pub fn factoid_text(&self, global: usize) -> &str {
        self.factoid_at(global)
            .map(|f| f.text.as_str())
            .unwrap_or(PSEUDO_FACTOID_TEXT)
    }

    /// Topic of a global factoid position (pseudo-factoid included).
    pub fn factoid_topic(&self, global: usize) -> &str {
        self.factoid_at(global)
            .map(|f| f.topic.as_str())
            .unwrap_or(PSEUDO_TOPIC)
    }

    /// Bag of tokens covered by a span (for token-level F1).
    pub fn span_tokens(&self, span: Span) -> Vec<String> {
        let mut toks = Vec::new();
        for i in span.start..=span.end {
            toks.extend(tokenize(self.factoid_text(i)));
        }
        toks
    }

    /// Split off the last `n_dev` dialogues into a second corpus sharing
    /// the same documents (and therefore the same global factoid indices).
    pub fn split_off_dev(mut self, n_dev: usize) -> Result<(Corpus, Corpus), CorpusError> {
        if n_dev >= self.dialogues.len() {
            return Err(CorpusError::Generation(format!(
                "cannot hold out {n_dev} of {} dialogues",
                self.dialogues.len()
            )));
        }
        let dev_dialogues = self
            .dialogues
            .split_off(self.dialogues.len() - n_dev);
        let dev = Corpus {
            documents: self.documents.clone(),
            dialogues: dev_dialogues,
            doc_offsets: self.doc_offsets.clone(),
            factoid_total: self.factoid_total,
        };
        Ok((self, dev))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize, factoids: usize) -> Document {
        let doc_id = format!("doc-{n}");
        Document {
            doc_id: doc_id.clone(),
            title: format!("title{n}"),
            factoids: (0..factoids)
                .map(|i| Factoid {
                    id: format!("f-{n}-{i}"),
                    text: format!("text {n} {i}"),
                    topic: format!("topic{n}"),
                    doc_id: doc_id.clone(),
                    position_in_doc: i,
                })
                .collect(),
        }
    }

    fn two_turns(grounding: Option<Grounding>) -> Vec<Turn> {
        vec![
            Turn {
                role: Role::User,
                text: "hello there".into(),
                grounding: grounding.clone(),
                topic: String::new(),
            },
            Turn {
                role: Role::System,
                text: "general reply".into(),
                grounding,
                topic: String::new(),
            },
        ]
    }

    #[test]
    fn minimal_corpus_counts_pseudo_factoid() {
        let corpus = Corpus::new(
            vec![doc(0, 1)],
            vec![Dialogue {
                id: "d0".into(),
                turns: two_turns(None),
            }],
        )
        .unwrap();
        assert_eq!(corpus.m_total(), 2);
        assert_eq!(corpus.dialogues[0].turns[0].topic, PSEUDO_TOPIC);
    }

    #[test]
    fn reversed_grounding_is_rejected() {
        let err = Corpus::new(
            vec![doc(0, 3)],
            vec![Dialogue {
                id: "d0".into(),
                turns: two_turns(Some(Grounding {
                    doc_id: "doc-0".into(),
                    start: 2,
                    end: 1,
                })),
            }],
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::GroundingOutOfRange { .. }));
    }

    #[test]
    fn duplicate_factoid_id_is_rejected() {
        let mut d = doc(0, 2);
        d.factoids[1].id = d.factoids[0].id.clone();
        let err = Corpus::new(vec![d], vec![]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateFactoidId { .. }));
    }

    #[test]
    fn grounded_turn_inherits_factoid_topic() {
        let corpus = Corpus::new(
            vec![doc(0, 2), doc(1, 2)],
            vec![Dialogue {
                id: "d0".into(),
                turns: two_turns(Some(Grounding {
                    doc_id: "doc-1".into(),
                    start: 1,
                    end: 1,
                })),
            }],
        )
        .unwrap();
        assert_eq!(corpus.dialogues[0].turns[0].topic, "topic1");
        // Global index: pseudo(0), doc-0 at 1..=2, doc-1 at 3..=4.
        let span = corpus.gold_span(&corpus.dialogues[0].turns[1]);
        assert_eq!(span, Span::new(4, 4));
        assert_eq!(corpus.factoid_at(4).unwrap().id, "f-1-1");
    }

    #[test]
    fn alternation_is_enforced() {
        let turns = vec![Turn {
            role: Role::System,
            text: "backwards".into(),
            grounding: None,
            topic: String::new(),
        }];
        let err = Corpus::new(
            vec![doc(0, 1)],
            vec![Dialogue {
                id: "d0".into(),
                turns,
            }],
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::InvalidDialogue { .. }));
    }
}
