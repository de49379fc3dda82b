//! Evaluation measures: exact match, token-level F1, MRR@5, Recall@5,
//! BLEU-X, ROUGE-1/2/L, and the knowledge-change analysis.

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::Span;

#[derive(Debug, Clone, Error)]
pub enum MetricsError {
    #[error("empty candidate corpus")]
    EmptyCandidates,
    #[error("candidate/reference count mismatch: {candidates} vs {references}")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("empty reference")]
    EmptyReference,
}

/// 1 iff the span pair is identical. Ungrounded gold turns carry the
/// pseudo-factoid span (0, 0), so "correctly predicted no knowledge"
/// scores 1.
pub fn exact_match(pred: Span, gold: Span) -> f64 {
    if pred == gold {
        1.0
    } else {
        0.0
    }
}

fn counts<'a>(tokens: &'a [String]) -> HashMap<&'a str, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t.as_str()).or_insert(0) += 1;
    }
    map
}

/// Bag-of-tokens F1 between predicted and gold token multisets.
/// Both empty → 1; exactly one empty → 0.
pub fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let pc = counts(pred);
    let gc = counts(gold);
    let overlap: usize = pc
        .iter()
        .map(|(tok, &c)| c.min(*gc.get(tok).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Reciprocal rank of the first gold factoid within the top five of the
/// ranking; 0 when none appears. `None` when the gold set is empty (the
/// turn is excluded from averages).
pub fn mrr_at_5(ranking: &[usize], gold: &[usize]) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    for (i, item) in ranking.iter().take(5).enumerate() {
        if gold.contains(item) {
            return Some(1.0 / (i + 1) as f64);
        }
    }
    Some(0.0)
}

/// Fraction of gold factoids present in the top five of the ranking.
/// `None` when the gold set is empty.
pub fn recall_at_5(ranking: &[usize], gold: &[usize]) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let hits = gold
        .iter()
        .filter(|g| ranking.iter().take(5).any(|r| r == *g))
        .count();
    Some(hits as f64 / gold.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus-level BLEU-X: clipped modified n-gram precision with uniform
/// weights over orders 1..=X and the brevity penalty `exp(1 - r/c)` for
/// short candidates. With `smooth`, zero precisions are replaced by 1e-9
/// instead of collapsing the geometric mean to zero.
pub fn bleu_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
    smooth: bool,
) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let cc = ngram_counts(cand, n);
            let rc = ngram_counts(reference, n);
            for (gram, &c) in &cc {
                matched[n - 1] += c.min(*rc.get(gram).unwrap_or(&0));
                total[n - 1] += c;
            }
        }
    }
    // Orders where the candidate corpus has no n-grams at all (every
    // sentence shorter than n) are skipped rather than scored as zero.
    let active: Vec<usize> = (0..max_n).filter(|&n| total[n] > 0).collect();
    if active.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for &n in &active {
        let p = matched[n] as f64 / total[n] as f64;
        let p = if p == 0.0 {
            if smooth {
                1e-9
            } else {
                return Ok(0.0);
            }
        } else {
            p
        };
        log_sum += p.ln() / active.len() as f64;
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Per-sentence ROUGE as F1: clipped n-gram overlap for ROUGE-1/2,
/// longest common subsequence for ROUGE-L.
pub fn rouge(
    candidate: &[String],
    reference: &[String],
    variant: RougeVariant,
) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    let (overlap, cand_total, ref_total) = match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let cc = ngram_counts(candidate, n);
            let rc = ngram_counts(reference, n);
            let overlap: usize = cc
                .iter()
                .map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0)))
                .sum();
            let cand_total: usize = cc.values().sum();
            let ref_total: usize = rc.values().sum();
            (overlap, cand_total, ref_total)
        }
        RougeVariant::L => (
            lcs_len(candidate, reference),
            candidate.len(),
            reference.len(),
        ),
    };
    if overlap == 0 || cand_total == 0 || ref_total == 0 {
        return Ok(0.0);
    }
    let p = overlap as f64 / cand_total as f64;
    let r = overlap as f64 / ref_total as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Macro-averaged ROUGE over sentence pairs.
pub fn rouge_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    variant: RougeVariant,
) -> Result<f64, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge(c, r, variant)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// Knowledge-change statistics over per-turn spans.
///
/// A turn is grounded when its span covers at least one real factoid
/// (index ≥ 1). A change is counted between consecutive grounded turns
/// with different effective spans; ungrounded turns neither change nor
/// extend runs. Factoids per turn is the mean effective width over
/// grounded turns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChangeStats {
    pub dialogues: usize,
    pub changes: usize,
    pub grounded_turns: usize,
    pub factoid_positions: usize,
}

impl ChangeStats {
    pub fn mean_changes_per_dialogue(&self) -> f64 {
        if self.dialogues == 0 {
            0.0
        } else {
            self.changes as f64 / self.dialogues as f64
        }
    }

    pub fn mean_factoids_per_turn(&self) -> f64 {
        if self.grounded_turns == 0 {
            0.0
        } else {
            self.factoid_positions as f64 / self.grounded_turns as f64
        }
    }
}

fn effective(span: Span) -> Option<(usize, usize)> {
    let lo = span.start.max(1);
    if span.end < lo {
        None
    } else {
        Some((lo, span.end))
    }
}

/// Compute change statistics from per-dialogue lists of system-turn
/// spans (gold or predicted).
pub fn knowledge_change_stats(dialogue_spans: &[Vec<Span>]) -> ChangeStats {
    let mut stats = ChangeStats {
        dialogues: dialogue_spans.len(),
        ..ChangeStats::default()
    };
    for spans in dialogue_spans {
        let mut prev: Option<(usize, usize)> = None;
        for &span in spans {
            let Some(eff) = effective(span) else {
                continue;
            };
            if let Some(p) = prev {
                if p != eff {
                    stats.changes += 1;
                }
            }
            prev = Some(eff);
            stats.grounded_turns += 1;
            stats.factoid_positions += eff.1 - eff.0 + 1;
        }
    }
    stats
}

/// One evaluated turn, grouped per dialogue for change analysis.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub gold_span: Span,
    pub pred_span: Span,
    pub gold_span_tokens: Vec<String>,
    pub pred_span_tokens: Vec<String>,
    /// Predicted factoid ranking (global indices, pseudo excluded).
    pub ranking: Vec<usize>,
    pub gold_response: Vec<String>,
    pub pred_response: Vec<String>,
}

/// The full metric report.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub em: f64,
    pub token_f1: f64,
    pub mrr_at_5: f64,
    pub recall_at_5: f64,
    /// BLEU-1..BLEU-4 with zero-precision smoothing.
    pub bleu: [f64; 4],
    /// BLEU-1..BLEU-4 without smoothing.
    pub bleu_unsmoothed: [f64; 4],
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub gold_changes_per_dialogue: f64,
    pub pred_changes_per_dialogue: f64,
    pub gold_factoids_per_turn: f64,
    pub pred_factoids_per_turn: f64,
    pub turns: usize,
    /// Turns with no gold factoids, excluded from MRR/Recall averages.
    pub ranking_excluded: usize,
}

/// Aggregate instances (grouped by dialogue) into a report.
pub fn build_report(dialogues: &[Vec<EvalInstance>]) -> Result<MetricsReport, MetricsError> {
    let mut report = MetricsReport::default();
    let mut em_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut mrr_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut ranked = 0usize;
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    let mut gold_spans = Vec::new();
    let mut pred_spans = Vec::new();
    for dlg in dialogues {
        let mut gold_row = Vec::with_capacity(dlg.len());
        let mut pred_row = Vec::with_capacity(dlg.len());
        for inst in dlg {
            report.turns += 1;
            em_sum += exact_match(inst.pred_span, inst.gold_span);
            f1_sum += token_f1(&inst.pred_span_tokens, &inst.gold_span_tokens);
            let gold_factoids: Vec<usize> = inst.gold_span.factoid_indices().collect();
            match mrr_at_5(&inst.ranking, &gold_factoids) {
                Some(v) => {
                    mrr_sum += v;
                    recall_sum += recall_at_5(&inst.ranking, &gold_factoids).unwrap_or(0.0);
                    ranked += 1;
                }
                None => report.ranking_excluded += 1,
            }
            candidates.push(inst.pred_response.clone());
            references.push(inst.gold_response.clone());
            gold_row.push(inst.gold_span);
            pred_row.push(inst.pred_span);
        }
        gold_spans.push(gold_row);
        pred_spans.push(pred_row);
    }
    if report.turns == 0 {
        return Err(MetricsError::EmptyCandidates);
    }
    let n = report.turns as f64;
    report.em = em_sum / n;
    report.token_f1 = f1_sum / n;
    report.mrr_at_5 = if ranked > 0 {
        mrr_sum / ranked as f64
    } else {
        0.0
    };
    report.recall_at_5 = if ranked > 0 {
        recall_sum / ranked as f64
    } else {
        0.0
    };
    for x in 1..=4 {
        report.bleu[x - 1] = bleu_corpus(&candidates, &references, x, true)?;
        report.bleu_unsmoothed[x - 1] = bleu_corpus(&candidates, &references, x, false)?;
    }
    report.rouge_1 = rouge_corpus(&candidates, &references, RougeVariant::One)?;
    report.rouge_2 = rouge_corpus(&candidates, &references, RougeVariant::Two)?;
    report.rouge_l = rouge_corpus(&candidates, &references, RougeVariant::L)?;
    let gold_stats = knowledge_change_stats(&gold_spans);
    let pred_stats = knowledge_change_stats(&pred_spans);
    report.gold_changes_per_dialogue = gold_stats.mean_changes_per_dialogue();
    report.pred_changes_per_dialogue = pred_stats.mean_changes_per_dialogue();
    report.gold_factoids_per_turn = gold_stats.mean_factoids_per_turn();
    report.pred_factoids_per_turn = pred_stats.mean_factoids_per_turn();
    Ok(report)
}
