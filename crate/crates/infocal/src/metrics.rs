//! Rationale evaluation: token precision/recall/F1, span-level IOU F1 at the
//! 0.5 threshold, AUPRC by threshold sweep, and the faithfulness pair
//! comprehensiveness/sufficiency.
//!
//! All routines are pure. Span sets are normalized to sorted maximal runs
//! (overlapping and adjacent spans merge), so metric values depend only on
//! the selected token set, never on how a caller happened to carve it up.

use crate::data::Span;

/// Sorted, merged, empty-free canonical form of a span list.
pub fn normalize_spans(spans: &[Span]) -> Vec<Span> {
    let mut spans: Vec<Span> = spans.iter().copied().filter(|s| !s.is_empty()).collect();
    spans.sort();
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

pub fn mask_to_spans(mask: &[bool]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut run_start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                out.push(Span::new(s, i));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        out.push(Span::new(s, mask.len()));
    }
    out
}

pub fn spans_to_mask(spans: &[Span], len: usize) -> Vec<bool> {
    let mut mask = vec![false; len];
    for s in spans {
        for slot in mask.iter_mut().take(s.end.min(len)).skip(s.start) {
            *slot = true;
        }
    }
    mask
}

/// Number of maximal contiguous selected runs.
pub fn segment_count(mask: &[bool]) -> usize {
    mask_to_spans(mask).len()
}

fn token_count(spans: &[Span]) -> usize {
    normalize_spans(spans).iter().map(|s| s.len()).sum()
}

fn intersection_count(pred: &[Span], gold: &[Span]) -> usize {
    let pred = normalize_spans(pred);
    let gold = normalize_spans(gold);
    let mut total = 0;
    for p in &pred {
        for g in &gold {
            let lo = p.start.max(g.start);
            let hi = p.end.min(g.end);
            total += hi.saturating_sub(lo);
        }
    }
    total
}

/// Token-level (precision, recall, F1).
///
/// Degenerate cases: both sets empty gives P=1, otherwise an empty prediction
/// gives P=0; an empty gold set gives R=1; F1 is 0 whenever P+R=0.
pub fn token_prf(pred: &[Span], gold: &[Span]) -> (f64, f64, f64) {
    let np = token_count(pred);
    let ng = token_count(gold);
    let inter = intersection_count(pred, gold) as f64;
    let p = if np == 0 {
        if ng == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        inter / np as f64
    };
    let r = if ng == 0 { 1.0 } else { inter / ng as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Micro-aggregated token PRF over many (pred, gold) pairs: token counts are
/// pooled across instances before the quotients.
pub fn corpus_token_prf(pairs: &[(Vec<Span>, Vec<Span>)]) -> (f64, f64, f64) {
    let mut np = 0usize;
    let mut ng = 0usize;
    let mut inter = 0usize;
    for (pred, gold) in pairs {
        np += token_count(pred);
        ng += token_count(gold);
        inter += intersection_count(pred, gold);
    }
    let p = if np == 0 {
        if ng == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        inter as f64 / np as f64
    };
    let r = if ng == 0 { 1.0 } else { inter as f64 / ng as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

pub fn iou(a: Span, b: Span) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn kuhn_augment(
    u: usize,
    adj: &[Vec<usize>],
    visited: &mut [bool],
    match_right: &mut [usize],
) -> bool {
    for &v in &adj[u] {
        if !visited[v] {
            visited[v] = true;
            if match_right[v] == usize::MAX
                || kuhn_augment(match_right[v], adj, visited, match_right)
            {
                match_right[v] = u;
                return true;
            }
        }
    }
    false
}

/// Size of the largest one-to-one matching between predicted and gold spans
/// among pairs with IOU at or above the threshold.
fn matched_span_count(pred: &[Span], gold: &[Span], threshold: f64) -> usize {
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            gold.iter()
                .enumerate()
                .filter(|(_, g)| iou(*p, **g) >= threshold)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let mut match_right = vec![usize::MAX; gold.len()];
    let mut total = 0;
    for u in 0..adj.len() {
        let mut visited = vec![false; gold.len()];
        if kuhn_augment(u, &adj, &mut visited, &mut match_right) {
            total += 1;
        }
    }
    total
}

/// Span-level F1 where a predicted span counts as a true positive iff it can
/// be matched one-to-one to a gold span with IOU >= 0.5.
pub fn iou_f1(pred: &[Vec<Span>], gold: &[Vec<Span>]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "per-instance span lists must align");
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        let p = normalize_spans(p);
        let g = normalize_spans(g);
        tp += matched_span_count(&p, &g, 0.5);
        n_pred += p.len();
        n_gold += g.len();
    }
    let precision = if n_pred == 0 {
        if n_gold == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp as f64 / n_pred as f64
    };
    let recall = if n_gold == 0 {
        1.0
    } else {
        tp as f64 / n_gold as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Area under the precision-recall curve by step-wise summation over every
/// distinct score threshold. `None` when gold has no positives.
pub fn auprc(scores: &[f64], gold: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), gold.len(), "scores and gold must align");
    let n_pos = gold.iter().filter(|&&g| g).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0usize;
    let mut taken = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if gold[order[j]] {
                tp += 1;
            }
            taken += 1;
            j += 1;
        }
        let precision = tp as f64 / taken as f64;
        let recall = tp as f64 / n_pos as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Some(area)
}

/// Comprehensiveness: probability of the model's predicted class (the class
/// it assigns from the rationale, which is the prediction the system actually
/// emits) on the full input, minus its probability once the rationale tokens
/// are masked out. `predict` maps a keep-mask to a class distribution.
pub fn comprehensiveness_with<F>(predict: F, mask: &[bool]) -> f64
where
    F: Fn(&[bool]) -> Vec<f64>,
{
    let y = argmax(&predict(mask));
    let full = vec![true; mask.len()];
    let p_full = predict(&full);
    let complement: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let p_without = predict(&complement);
    p_full[y] - p_without[y]
}

/// Sufficiency: probability of the model's predicted class on the full input
/// minus its probability on the rationale tokens alone. Near zero or negative
/// when the rationale by itself already supports the prediction.
pub fn sufficiency_with<F>(predict: F, mask: &[bool]) -> f64
where
    F: Fn(&[bool]) -> Vec<f64>,
{
    let p_only = predict(mask);
    let y = argmax(&p_only);
    let full = vec![true; mask.len()];
    let p_full = predict(&full);
    p_full[y] - p_only[y]
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Micro token-count percentage of selected tokens over a corpus.
pub fn selection_percentage(masks: &[Vec<bool>]) -> f64 {
    let total: usize = masks.iter().map(|m| m.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let selected: usize = masks
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count())
        .sum();
    100.0 * selected as f64 / total as f64
}
