//! Seeded synthetic topic-shift corpus generator.
//!
//! Each topic owns a disjoint pool of invented words; factoids are
//! templated sentences over their topic's pool; dialogues walk topics
//! with a per-exchange shift probability. The generator tracks the gold
//! knowledge-change statistics as it emits turns so analysis code can be
//! checked against exact counts.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    Corpus, CorpusError, Dialogue, Document, Factoid, Grounding, Role, Span, Turn,
};
use crate::rng;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub factoids_per_topic: usize,
    pub n_dialogues: usize,
    /// User/system exchanges per dialogue (each contributes two turns).
    pub turns_per_dialogue: usize,
    /// Probability that an exchange moves to a different topic.
    pub shift_prob: f64,
    /// Probability that an exchange is ungrounded chit-chat.
    pub ungrounded_prob: f64,
    /// Probability that a grounded exchange spans two adjacent factoids.
    pub wide_span_prob: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(
        topics: usize,
        factoids_per_topic: usize,
        n_dialogues: usize,
        turns_per_dialogue: usize,
        shift_prob: f64,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            topics,
            factoids_per_topic,
            n_dialogues,
            turns_per_dialogue,
            shift_prob,
            ungrounded_prob: 0.15,
            wide_span_prob: 0.1,
            seed,
        }
    }
}

/// Ground-truth statistics accumulated while generating.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticStats {
    pub dialogues: usize,
    pub knowledge_changes: usize,
    pub grounded_system_turns: usize,
    /// Sum of grounded span widths over grounded system turns.
    pub factoid_positions: usize,
}

impl SyntheticStats {
    pub fn mean_changes_per_dialogue(&self) -> f64 {
        if self.dialogues == 0 {
            0.0
        } else {
            self.knowledge_changes as f64 / self.dialogues as f64
        }
    }

    pub fn mean_factoids_per_turn(&self) -> f64 {
        if self.grounded_system_turns == 0 {
            0.0
        } else {
            self.factoid_positions as f64 / self.grounded_system_turns as f64
        }
    }
}

const GLUE: &[&str] = &[
    "the", "a", "to", "me", "about", "tell", "what", "how", "does", "work", "involves",
    "requires", "covers", "you", "should", "review", "and", "also", "check", "for", "with",
    "is", "linked", "here", "more", "on", "plan", "thanks", "lot", "okay", "thank", "that",
    "helpful", "are", "welcome", "glad", "help", "no", "problem", "at", "all",
];

const USER_TEMPLATES: &[&str] = &[
    "tell me about the {1} {2}",
    "what about the {1} {2}",
    "how does the {1} {2} work",
];

const FACTOID_TEMPLATES: &[&str] = &[
    "the {1} {2} involves the {3}",
    "a {1} {2} requires the {3}",
    "the {1} {2} covers the {3}",
];

const SYSTEM_TEMPLATES: &[&str] = &[
    "you should review the {1} {2} and the {3}",
    "check the {1} {2} for the {3}",
    "the {1} {2} is linked to the {3} here",
];

const CHITCHAT_USER: &[&str] = &["thanks a lot", "okay thank you", "that is helpful thanks"];
const CHITCHAT_SYSTEM: &str = "you are welcome glad to help";

fn fill(template: &str, kws: &[&str]) -> String {
    template
        .replace("{1}", kws[0])
        .replace("{2}", kws[1])
        .replace("{3}", kws[2])
}

/// Draw a fresh pseudo-word, disjoint from everything drawn before.
fn make_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Result<String, CorpusError> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr",
        "gl", "kr", "pl", "tr",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    for _ in 0..10_000 {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if used.insert(w.clone()) {
            return Ok(w);
        }
    }
    Err(CorpusError::PoolCollision {
        word: "word space exhausted".into(),
    })
}

/// Generate a deterministic synthetic corpus plus its gold statistics.
pub fn generate_synthetic(
    config: &SyntheticConfig,
) -> Result<(Corpus, SyntheticStats), CorpusError> {
    if config.topics < 1
        || config.factoids_per_topic < 1
        || config.n_dialogues < 1
        || config.turns_per_dialogue < 1
    {
        return Err(CorpusError::Generation(
            "all synthetic counts must be at least 1".into(),
        ));
    }
    for (name, p) in [
        ("shift_prob", config.shift_prob),
        ("ungrounded_prob", config.ungrounded_prob),
        ("wide_span_prob", config.wide_span_prob),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(CorpusError::Generation(format!(
                "{name} {p} outside [0, 1]"
            )));
        }
    }

    let mut word_rng = rng::stream(config.seed, "synthetic.words");
    let mut used: BTreeSet<String> = GLUE.iter().map(|s| s.to_string()).collect();
    used.insert("non".into());
    used.insert("relevant".into());

    // Topic pools: one topic word plus three keywords per factoid.
    let mut topic_words = Vec::with_capacity(config.topics);
    let mut keyword_sets: Vec<Vec<[String; 3]>> = Vec::with_capacity(config.topics);
    for _ in 0..config.topics {
        topic_words.push(make_word(&mut word_rng, &mut used)?);
        let mut per_factoid = Vec::with_capacity(config.factoids_per_topic);
        for _ in 0..config.factoids_per_topic {
            per_factoid.push([
                make_word(&mut word_rng, &mut used)?,
                make_word(&mut word_rng, &mut used)?,
                make_word(&mut word_rng, &mut used)?,
            ]);
        }
        keyword_sets.push(per_factoid);
    }

    // Disjointness is guaranteed by the shared `used` set; verify anyway
    // so a refactor cannot silently break the property.
    let mut seen = BTreeSet::new();
    for (t, kws) in keyword_sets.iter().enumerate() {
        if !seen.insert(topic_words[t].clone()) {
            return Err(CorpusError::PoolCollision {
                word: topic_words[t].clone(),
            });
        }
        for set in kws.iter() {
            for w in set.iter() {
                if !seen.insert(w.clone()) {
                    return Err(CorpusError::PoolCollision { word: w.clone() });
                }
            }
        }
    }

    let mut tmpl_rng = rng::stream(config.seed, "synthetic.templates");
    let mut documents = Vec::with_capacity(config.topics);
    // Fixed per-factoid templates make gold responses a deterministic
    // function of the grounded span.
    let mut system_templates: Vec<Vec<&str>> = Vec::with_capacity(config.topics);
    for (t, topic) in topic_words.iter().enumerate() {
        let doc_id = format!("doc-{t}");
        let mut factoids = Vec::with_capacity(config.factoids_per_topic);
        let mut sys_tmpl = Vec::with_capacity(config.factoids_per_topic);
        for (i, kws) in keyword_sets[t].iter().enumerate() {
            let template = FACTOID_TEMPLATES[tmpl_rng.gen_range(0..FACTOID_TEMPLATES.len())];
            let kw_refs: Vec<&str> = kws.iter().map(String::as_str).collect();
            factoids.push(Factoid {
                id: format!("f-{t}-{i}"),
                text: fill(template, &kw_refs),
                topic: topic.clone(),
                doc_id: doc_id.clone(),
                position_in_doc: i,
            });
            sys_tmpl.push(SYSTEM_TEMPLATES[tmpl_rng.gen_range(0..SYSTEM_TEMPLATES.len())]);
        }
        system_templates.push(sys_tmpl);
        documents.push(Document {
            doc_id,
            title: topic.clone(),
            factoids,
        });
    }

    let system_text = |topic: usize, span_lo: usize, span_hi: usize| -> String {
        let kws: Vec<&str> = keyword_sets[topic][span_lo]
            .iter()
            .map(String::as_str)
            .collect();
        let base = fill(system_templates[topic][span_lo], &kws);
        if span_hi > span_lo {
            let kws2 = &keyword_sets[topic][span_hi];
            format!("{base} and also the {} {}", kws2[0], kws2[1])
        } else {
            base
        }
    };
    let user_text = |rng: &mut ChaCha8Rng, topic: usize, lo: usize, hi: usize| -> String {
        let kws = &keyword_sets[topic][lo];
        let base = fill(
            USER_TEMPLATES[rng.gen_range(0..USER_TEMPLATES.len())],
            &[&kws[0], &kws[1], &kws[2]],
        );
        if hi > lo {
            let kws2 = &keyword_sets[topic][hi];
            format!("{base} and the {} {}", kws2[0], kws2[1])
        } else {
            base
        }
    };

    let mut dlg_rng = rng::stream(config.seed, "synthetic.dialogues");
    let mut dialogues = Vec::with_capacity(config.n_dialogues);
    let mut stats = SyntheticStats {
        dialogues: config.n_dialogues,
        ..SyntheticStats::default()
    };

    for d in 0..config.n_dialogues {
        let mut turns = Vec::with_capacity(config.turns_per_dialogue * 2);
        let mut topic = dlg_rng.gen_range(0..config.topics);
        let mut prev_span: Option<Span> = None;
        for exchange in 0..config.turns_per_dialogue {
            if dlg_rng.gen::<f64>() < config.ungrounded_prob {
                let user = CHITCHAT_USER[dlg_rng.gen_range(0..CHITCHAT_USER.len())];
                turns.push(Turn {
                    role: Role::User,
                    text: user.into(),
                    grounding: None,
                    topic: String::new(),
                });
                turns.push(Turn {
                    role: Role::System,
                    text: CHITCHAT_SYSTEM.into(),
                    grounding: None,
                    topic: String::new(),
                });
                continue;
            }
            if exchange > 0 && config.topics > 1 && dlg_rng.gen::<f64>() < config.shift_prob {
                let mut next = dlg_rng.gen_range(0..config.topics - 1);
                if next >= topic {
                    next += 1;
                }
                topic = next;
            }
            let lo = dlg_rng.gen_range(0..config.factoids_per_topic);
            let hi = if lo + 1 < config.factoids_per_topic
                && dlg_rng.gen::<f64>() < config.wide_span_prob
            {
                lo + 1
            } else {
                lo
            };
            let grounding = Grounding {
                doc_id: format!("doc-{topic}"),
                start: lo,
                end: hi,
            };
            turns.push(Turn {
                role: Role::User,
                text: user_text(&mut dlg_rng, topic, lo, hi),
                grounding: Some(grounding.clone()),
                topic: String::new(),
            });
            turns.push(Turn {
                role: Role::System,
                text: system_text(topic, lo, hi),
                grounding: Some(grounding),
                topic: String::new(),
            });

            // Global span for statistics: documents are laid out in order,
            // each `factoids_per_topic` wide, after the pseudo slot.
            let span = Span::new(
                1 + topic * config.factoids_per_topic + lo,
                1 + topic * config.factoids_per_topic + hi,
            );
            if let Some(prev) = prev_span {
                if prev != span {
                    stats.knowledge_changes += 1;
                }
            }
            prev_span = Some(span);
            stats.grounded_system_turns += 1;
            stats.factoid_positions += span.width();
        }
        dialogues.push(Dialogue {
            id: format!("dlg-{d}"),
            turns,
        });
    }

    let corpus = Corpus::new(documents, dialogues)?;
    Ok((corpus, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(shift: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            topics: 5,
            factoids_per_topic: 3,
            n_dialogues: 20,
            turns_per_dialogue: 5,
            shift_prob: shift,
            ungrounded_prob: 0.0,
            wide_span_prob: 0.0,
            seed,
        }
    }

    fn topics_in_dialogue(corpus: &Corpus, dlg: &Dialogue) -> usize {
        let mut topics: Vec<&str> = dlg
            .turns
            .iter()
            .filter(|t| t.grounding.is_some())
            .map(|t| t.topic.as_str())
            .collect();
        topics.dedup();
        let set: std::collections::BTreeSet<&str> = topics.iter().copied().collect();
        let _ = corpus;
        set.len()
    }

    #[test]
    fn zero_shift_stays_on_one_topic() {
        let (corpus, _) = generate_synthetic(&config(0.0, 3)).unwrap();
        for dlg in &corpus.dialogues {
            assert_eq!(topics_in_dialogue(&corpus, dlg), 1);
        }
    }

    #[test]
    fn full_shift_changes_knowledge_every_exchange() {
        // 5 exchanges, shift_prob 1, >=5 topics: every consecutive pair of
        // grounded system turns differs -> 4 changes per dialogue.
        let (corpus, stats) = generate_synthetic(&config(1.0, 4)).unwrap();
        assert_eq!(
            stats.knowledge_changes,
            4 * corpus.dialogues.len(),
            "{stats:?}"
        );
        assert!((stats.mean_changes_per_dialogue() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (a, sa) = generate_synthetic(&config(0.4, 7)).unwrap();
        let (b, sb) = generate_synthetic(&config(0.4, 7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let (c, _) = generate_synthetic(&config(0.4, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mean_topic_count_is_monotone_in_shift_prob() {
        let mut means = Vec::new();
        for &shift in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut total = 0.0;
            let mut count = 0.0;
            for seed in 0..4 {
                let (corpus, _) = generate_synthetic(&config(shift, seed)).unwrap();
                for dlg in &corpus.dialogues {
                    total += topics_in_dialogue(&corpus, dlg) as f64;
                    count += 1.0;
                }
            }
            means.push(total / count);
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "not monotone: {means:?}");
        }
    }

    #[test]
    fn grounded_turn_topics_match_factoid_topics() {
        let mut cfg = config(0.5, 11);
        cfg.ungrounded_prob = 0.3;
        cfg.wide_span_prob = 0.2;
        let (corpus, _) = generate_synthetic(&cfg).unwrap();
        for dlg in &corpus.dialogues {
            for turn in &dlg.turns {
                match &turn.grounding {
                    Some(g) => {
                        let span = corpus.global_span(g).unwrap();
                        assert_eq!(turn.topic, corpus.factoid_topic(span.start));
                    }
                    None => assert_eq!(turn.topic, super::super::PSEUDO_TOPIC),
                }
            }
        }
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        let mut cfg = config(1.5, 0);
        assert!(generate_synthetic(&cfg).is_err());
        cfg.shift_prob = 0.5;
        cfg.ungrounded_prob = -0.1;
        assert!(generate_synthetic(&cfg).is_err());
    }
}
