//! Grounding-span prediction over the concatenated factoid sequence,
//! span decoding, and the derived factoid ranking.

use crate::corpus::Span;
use crate::model::{ModelError, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape, TensorError};

#[derive(Debug, Clone)]
pub struct SelectorParams {
    /// 3H×1 start scorer.
    pub w_s: ParamId,
    /// Start bias, sized to the configured maximum factoid count.
    pub b_s: ParamId,
    /// 3H×1 end scorer.
    pub w_e: ParamId,
    pub b_e: ParamId,
    pub capacity: usize,
}

impl SelectorParams {
    pub fn register(
        store: &mut ParamStore,
        hidden: usize,
        max_factoids: usize,
    ) -> Result<Self, ModelError> {
        Ok(SelectorParams {
            w_s: store.register_linear("selector.w_s", 3 * hidden, 1)?,
            b_s: store.register_zeros("selector.b_s", vec![1, max_factoids])?,
            w_e: store.register_linear("selector.w_e", 3 * hidden, 1)?,
            b_e: store.register_zeros("selector.b_e", vec![1, max_factoids])?,
            capacity: max_factoids,
        })
    }
}

/// Start/end probability rows (each 1×M) over the factoid sequence.
///
/// `k_rows` holds the pair representations as M rows of 3H values (the
/// transpose of the 3H×M matrix view). The bias vectors are sliced to
/// the first M entries; `mask`, when given, zeroes padded positions.
#[allow(clippy::too_many_arguments)]
pub fn predict_span_distributions(
    tape: &mut Tape,
    k_rows: NodeId,
    w_s: NodeId,
    b_s: NodeId,
    w_e: NodeId,
    b_e: NodeId,
    mask: Option<&[bool]>,
) -> Result<(NodeId, NodeId), ModelError> {
    let m = tape.shape(k_rows)[0];
    let capacity = tape.shape(b_s)[1];
    if m > capacity {
        return Err(ModelError::Tensor(TensorError::IndexOutOfRange {
            op: "predict_span_distributions",
            index: m,
            size: capacity,
        }));
    }
    let mut side = |w: NodeId, b: NodeId| -> Result<NodeId, ModelError> {
        let logits = tape.matmul(k_rows, w)?;
        let logits = tape.transpose(logits)?;
        let bias = tape.slice_cols(b, 0, m)?;
        let logits = tape.add(logits, bias)?;
        let p = match mask {
            Some(mk) => tape.masked_softmax(logits, mk)?,
            None => tape.softmax(logits, 1)?,
        };
        Ok(p)
    };
    let p_start = side(w_s, b_s)?;
    let p_end = side(w_e, b_e)?;
    Ok((p_start, p_end))
}

/// Decoded span with its probability score.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPrediction {
    pub span: Span,
    pub score: f64,
}

/// Argmax of `p_start[s] * p_end[e]` over spans with `s <= e` and width
/// at most `max_span`. Ties break toward the smaller start, then the
/// smaller end.
pub fn decode_span(p_start: &[f64], p_end: &[f64], max_span: usize) -> SpanPrediction {
    let m = p_start.len().min(p_end.len());
    let mut best = SpanPrediction {
        span: Span::new(0, 0),
        score: f64::NEG_INFINITY,
    };
    for s in 0..m {
        let hi = (s + max_span).min(m);
        for e in s..hi {
            let score = p_start[s] * p_end[e];
            if score > best.score {
                best = SpanPrediction {
                    span: Span::new(s, e),
                    score,
                };
            }
        }
    }
    best
}

/// Rank real factoids (pseudo-factoid excluded) by total probability mass
/// of the spans covering them: `score(m) = Σ_{s<=m<=e, width<=max_span}
/// p_start[s]·p_end[e]`. Descending, stable by index.
pub fn rank_factoids(p_start: &[f64], p_end: &[f64], max_span: usize) -> Vec<(usize, f64)> {
    let m = p_start.len().min(p_end.len());
    let mut scores = vec![0.0f64; m];
    for s in 0..m {
        let hi = (s + max_span).min(m);
        for e in s..hi {
            let mass = p_start[s] * p_end[e];
            for pos in scores.iter_mut().take(e + 1).skip(s) {
                *pos += mass;
            }
        }
    }
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().skip(1).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_selector_gives_uniform_distributions() {
        let mut tape = Tape::new();
        let k = tape.constant(vec![0.5; 4 * 6], vec![4, 6]).unwrap();
        let w = tape.constant(vec![0.0; 6], vec![6, 1]).unwrap();
        let b = tape.constant(vec![0.0; 8], vec![1, 8]).unwrap();
        let (ps, pe) = predict_span_distributions(&mut tape, k, w, b, w, b, None).unwrap();
        for &v in tape.data(ps).iter().chain(tape.data(pe)) {
            assert!(close(v, 0.25, 1e-15));
        }
    }

    #[test]
    fn distributions_match_per_column_loop_oracle() {
        let mut tape = Tape::new();
        let (m, d3) = (3, 6);
        let k_data: Vec<f64> = (0..m * d3).map(|i| 0.17 * i as f64 - 1.1).collect();
        let ws_data: Vec<f64> = (0..d3).map(|i| 0.23 * i as f64 - 0.4).collect();
        let bs_data = vec![0.3, -0.2, 0.5, 0.0, 0.0];
        let k = tape.constant(k_data.clone(), vec![m, d3]).unwrap();
        let w = tape.constant(ws_data.clone(), vec![d3, 1]).unwrap();
        let b = tape.constant(bs_data.clone(), vec![1, 5]).unwrap();
        let (ps, _) = predict_span_distributions(&mut tape, k, w, b, w, b, None).unwrap();

        // Oracle: logit_m = W · K[:, m] + b[m], then softmax by hand.
        let mut logits = vec![0.0; m];
        for col in 0..m {
            for j in 0..d3 {
                logits[col] += ws_data[j] * k_data[col * d3 + j];
            }
            logits[col] += bs_data[col];
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        for (got, lg) in tape.data(ps).iter().zip(&logits) {
            assert!(close(*got, (lg - mx).exp() / denom, 1e-12));
        }
    }

    #[test]
    fn permuting_columns_permutes_distributions() {
        let perm = [2usize, 0, 1];
        let (m, d3) = (3, 6);
        let k_data: Vec<f64> = (0..m * d3).map(|i| (i as f64) * 0.31 - 2.0).collect();
        let b_data = vec![0.4, -0.6, 0.1];
        let w_data: Vec<f64> = (0..d3).map(|i| 0.11 * i as f64 - 0.3).collect();

        let run = |k_data: &[f64], b_data: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let k = tape.constant(k_data.to_vec(), vec![m, d3]).unwrap();
            let w = tape.constant(w_data.clone(), vec![d3, 1]).unwrap();
            let b = tape.constant(b_data.to_vec(), vec![1, m]).unwrap();
            let (ps, _) =
                predict_span_distributions(&mut tape, k, w, b, w, b, None).unwrap();
            tape.data(ps).to_vec()
        };

        let base = run(&k_data, &b_data);
        let mut k_perm = vec![0.0; m * d3];
        let mut b_perm = vec![0.0; m];
        for (new, &old) in perm.iter().enumerate() {
            k_perm[new * d3..(new + 1) * d3].copy_from_slice(&k_data[old * d3..(old + 1) * d3]);
            b_perm[new] = b_data[old];
        }
        let permuted = run(&k_perm, &b_perm);
        for (new, &old) in perm.iter().enumerate() {
            assert!(close(permuted[new], base[old], 1e-12));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let k = tape.constant(vec![0.0; 12], vec![3, 4]).unwrap();
        let w = tape.constant(vec![0.0; 6], vec![6, 1]).unwrap();
        let b = tape.constant(vec![0.0; 8], vec![1, 8]).unwrap();
        assert!(predict_span_distributions(&mut tape, k, w, b, w, b, None).is_err());
    }

    #[test]
    fn capacity_overflow_is_reported() {
        let mut tape = Tape::new();
        let k = tape.constant(vec![0.0; 5 * 6], vec![5, 6]).unwrap();
        let w = tape.constant(vec![0.0; 6], vec![6, 1]).unwrap();
        let b = tape.constant(vec![0.0; 3], vec![1, 3]).unwrap();
        assert!(predict_span_distributions(&mut tape, k, w, b, w, b, None).is_err());
    }

    #[test]
    fn decode_one_hot() {
        let mut p = vec![0.0; 5];
        p[2] = 1.0;
        let pred = decode_span(&p, &p, 5);
        assert_eq!(pred.span, Span::new(2, 2));
        assert!(close(pred.score, 1.0, 1e-15));
    }

    #[test]
    fn decode_hand_case() {
        let p_start = [0.6, 0.4, 0.0];
        let p_end = [0.0, 0.1, 0.9];
        let pred = decode_span(&p_start, &p_end, 5);
        assert_eq!(pred.span, Span::new(0, 2));
        assert!(close(pred.score, 0.54, 1e-12));
    }

    #[test]
    fn decode_breaks_ties_toward_smallest() {
        let p = [0.25; 4];
        let pred = decode_span(&p, &p, 5);
        assert_eq!(pred.span, Span::new(0, 0));
    }

    #[test]
    fn decode_respects_max_span() {
        let p_start = [1.0, 0.0, 0.0, 0.0];
        let p_end = [0.0, 0.0, 0.0, 1.0];
        let pred = decode_span(&p_start, &p_end, 2);
        assert!(pred.span.width() <= 2);
    }

    #[test]
    fn rank_one_hot_puts_factoid_first_with_score_one() {
        let mut p = vec![0.0; 5];
        p[3] = 1.0;
        let ranked = rank_factoids(&p, &p, 5);
        assert_eq!(ranked[0].0, 3);
        assert!(close(ranked[0].1, 1.0, 1e-15));
        assert!(!ranked.iter().any(|&(i, _)| i == 0));
    }

    #[test]
    fn rank_matches_exhaustive_span_enumeration() {
        let p_start = [0.1, 0.3, 0.4, 0.2];
        let p_end = [0.2, 0.2, 0.1, 0.5];
        let max_span = 3;
        let ranked = rank_factoids(&p_start, &p_end, max_span);

        let mut oracle = vec![0.0; 4];
        for s in 0..4 {
            for e in s..4 {
                if e - s + 1 > max_span {
                    continue;
                }
                for (m, o) in oracle.iter_mut().enumerate() {
                    if s <= m && m <= e {
                        *o += p_start[s] * p_end[e];
                    }
                }
            }
        }
        for &(idx, score) in &ranked {
            assert!(close(score, oracle[idx], 1e-12), "factoid {idx}");
            assert!((0.0..=1.0).contains(&score));
        }
        // Descending order.
        for w in ranked.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }
}
