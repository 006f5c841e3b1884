//! Continuous-form language model and the rationale fluency regularizer.
//!
//! A strictly causal recurrent encoder produces hidden states h_i that see
//! only x_<i; a bilinear form against an output embedding turns them into
//! quasi-probabilities sigma(h_i' M e_i) in (0,1). The model pretrains with
//! negative sampling and is frozen afterwards. The regularizer
//!
//! ```text
//! L_lm = -sum_i m_{i-1} * log sigma(h_i' M (m_i e_i)),  m_0 := 1
//! ```
//!
//! scores a relaxed selection mask: dropping a token inside a selected run
//! costs more than extending the run, which is what pushes rationales toward
//! contiguous spans. `theorem1_check` verifies that ordering exhaustively on
//! small inputs.

use rand::Rng;
use thiserror::Error;

use crate::nn::{register_gru, uniform_init, xavier, GruCell, GruKeys, ParamSet};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("language model requires a non-empty sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty corpus")]
    EmptyCorpus,
}

pub type LmResult<T> = Result<T, LmError>;

#[derive(Debug, Clone)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LmKeys {
    pub embed: usize,
    pub gru: GruKeys,
    pub h0: usize,
    pub out_embed: usize,
    pub bilinear: usize,
}

pub struct ContinuousLm<S: Scalar> {
    pub cfg: LmConfig,
    pub params: ParamSet<S>,
    pub keys: LmKeys,
}

impl<S: Scalar> ContinuousLm<S> {
    pub fn new(cfg: LmConfig, rng: &mut impl Rng) -> ContinuousLm<S> {
        let mut params: ParamSet<S> = ParamSet::new();
        let embed = params.insert(
            "lm.embed",
            uniform_init(cfg.vocab_size, cfg.embed_dim, 0.1, rng),
        );
        let gru = register_gru(&mut params, "lm.gru", cfg.embed_dim, cfg.hidden_dim, rng);
        let h0 = params.insert("lm.h0", Tensor::zeros(vec![1, cfg.hidden_dim]));
        let out_embed = params.insert(
            "lm.out_embed",
            uniform_init(cfg.vocab_size, cfg.embed_dim, 0.1, rng),
        );
        let bilinear = params.insert("lm.bilinear", xavier(cfg.hidden_dim, cfg.embed_dim, rng));
        ContinuousLm {
            cfg,
            params,
            keys: LmKeys {
                embed,
                gru,
                h0,
                out_embed,
                bilinear,
            },
        }
    }

    pub fn cast<T: Scalar>(&self) -> ContinuousLm<T> {
        ContinuousLm {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            keys: self.keys,
        }
    }

    /// Per-position bilinear scores of the true next tokens, plain values.
    pub fn score_values(&self, ids: &[usize]) -> LmResult<Vec<f64>> {
        let mut tape: Tape<S> = Tape::new();
        let bind = LmBinding::bind_frozen(&mut tape, self);
        let (_, scores) = bind.forward_scores(&mut tape, ids)?;
        Ok(tape.value(scores).data().iter().map(|s| s.to_f64()).collect())
    }

    /// exp(mean per-token negative log quasi-probability) with all-ones
    /// masks. Quasi-probabilities are unnormalized, so this is a
    /// quasi-perplexity: comparable across checkpoints, not across models
    /// with real softmax outputs.
    pub fn quasi_perplexity(&self, corpus: &[Vec<usize>]) -> LmResult<f64> {
        let mut total = 0.0;
        let mut positions = 0usize;
        for ids in corpus {
            if ids.is_empty() {
                continue;
            }
            for s in self.score_values(ids)? {
                total += -sigmoid_f64(s).ln();
                positions += 1;
            }
        }
        if positions == 0 {
            return Err(LmError::EmptyCorpus);
        }
        Ok((total / positions as f64).exp())
    }
}

pub struct LmBinding {
    pub embed: Var,
    pub gru: GruCell,
    pub h0: Var,
    pub out_embed: Var,
    pub bilinear: Var,
}

impl LmBinding {
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, lm: &ContinuousLm<S>) -> LmResult<LmBinding> {
        let ps = &lm.params;
        Ok(LmBinding {
            embed: ps.bind(tape, lm.keys.embed)?,
            gru: GruCell::bind(tape, ps, &lm.keys.gru)?,
            h0: ps.bind(tape, lm.keys.h0)?,
            out_embed: ps.bind(tape, lm.keys.out_embed)?,
            bilinear: ps.bind(tape, lm.keys.bilinear)?,
        })
    }

    pub fn bind_frozen<S: Scalar>(tape: &mut Tape<S>, lm: &ContinuousLm<S>) -> LmBinding {
        let ps = &lm.params;
        LmBinding {
            embed: ps.bind_frozen(tape, lm.keys.embed),
            gru: GruCell::bind_frozen(tape, ps, &lm.keys.gru),
            h0: ps.bind_frozen(tape, lm.keys.h0),
            out_embed: ps.bind_frozen(tape, lm.keys.out_embed),
            bilinear: ps.bind_frozen(tape, lm.keys.bilinear),
        }
    }

    /// Causal hidden states `[n, H]`: row i depends on ids[..i] only; the
    /// first row is the learned initial state.
    pub fn hidden_states<S: Scalar>(&self, tape: &mut Tape<S>, ids: &[usize]) -> LmResult<Var> {
        if ids.is_empty() {
            return Err(LmError::EmptySequence);
        }
        let mut h = self.h0;
        let mut states = Vec::with_capacity(ids.len());
        states.push(h);
        for &id in &ids[..ids.len() - 1] {
            let x = tape.gather_rows(self.embed, &[id])?;
            h = self.gru.step(tape, x, h)?;
            states.push(h);
        }
        Ok(tape.concat(0, &states)?)
    }

    /// Returns (H*M `[n, E]`, true-token scores `[n, 1]`). The first output
    /// lets callers score alternative targets against the same prefixes.
    pub fn forward_scores<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        ids: &[usize],
    ) -> LmResult<(Var, Var)> {
        let states = self.hidden_states(tape, ids)?;
        let hm = tape.matmul(states, self.bilinear)?;
        let scores = self.scores_against(tape, hm, ids)?;
        Ok((hm, scores))
    }

    /// Row-wise bilinear scores of `target_ids` against precomputed `hm`.
    pub fn scores_against<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        hm: Var,
        target_ids: &[usize],
    ) -> LmResult<Var> {
        let targets = tape.gather_rows(self.out_embed, target_ids)?;
        let prods = tape.mul(hm, targets)?;
        let e = tape.value(prods).cols();
        let ones = tape.constant(Tensor::new(vec![e, 1], vec![S::ONE; e]));
        Ok(tape.matmul(prods, ones)?)
    }
}

/// Quasi-probability of a mask-scaled token: sigma(m * s).
pub fn quasi_prob(score: f64, mask: f64) -> f64 {
    sigmoid_f64(mask * score)
}

pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unigram negative-sampling distribution with an optional smoothing
/// exponent. Zero counts are floored to one so every token keeps mass.
pub struct UnigramTable {
    probs: Vec<f64>,
    cum: Vec<f64>,
}

impl UnigramTable {
    pub fn new(counts: &[u64], smoothing: f64) -> UnigramTable {
        assert!(!counts.is_empty(), "empty vocabulary");
        let weights: Vec<f64> = counts
            .iter()
            .map(|&c| (c.max(1) as f64).powf(smoothing))
            .collect();
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut cum = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cum.push(acc);
        }
        *cum.last_mut().unwrap() = 1.0;
        UnigramTable { probs, cum }
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs[id]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        match self.cum.binary_search_by(|c| c.total_cmp(&u)) {
            Ok(i) => (i + 1).min(self.cum.len() - 1),
            Err(i) => i,
        }
    }
}

/// Negative-sampling pretraining loss, mean per position:
/// -[log sigma(s_pos) + mean_k log sigma(-s_neg)].
pub fn pretrain_loss<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &LmBinding,
    batch: &[&[usize]],
    sampler: &UnigramTable,
    k: usize,
    rng: &mut impl Rng,
) -> LmResult<Var> {
    assert!(k >= 1, "need at least one negative per position");
    let seqs: Vec<&&[usize]> = batch.iter().filter(|ids| !ids.is_empty()).collect();
    if seqs.is_empty() {
        return Err(LmError::EmptyBatch);
    }
    let mut terms = Vec::new();
    let mut positions = 0usize;
    for ids in seqs {
        let n = ids.len();
        positions += n;
        let (hm, pos_scores) = bind.forward_scores(tape, ids)?;
        let pos_p = tape.sigmoid(pos_scores);
        let pos_lp = tape.log(pos_p);
        terms.push(tape.sum(pos_lp));
        for _ in 0..k {
            let neg_ids: Vec<usize> = (0..n).map(|_| sampler.sample(rng)).collect();
            let neg_scores = bind.scores_against(tape, hm, &neg_ids)?;
            let flipped = tape.scale(neg_scores, -1.0)?;
            let neg_p = tape.sigmoid(flipped);
            let neg_lp = tape.log(neg_p);
            let s = tape.sum(neg_lp);
            terms.push(tape.scale(s, 1.0 / k as f64)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, -1.0 / positions as f64)?)
}

/// The fluency regularizer on tape, differentiable in the masks (and, when
/// the binding is trainable, in the LM parameters):
/// L_lm = -sum_i m_{i-1} log sigma(m_i s_i), with m_0 := 1.
pub fn lm_regularizer<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &LmBinding,
    ids: &[usize],
    masks: Var,
) -> LmResult<Var> {
    let (_, scores) = bind.forward_scores(tape, ids)?;
    lm_regularizer_from_scores(tape, scores, masks)
}

/// Same regularizer over precomputed per-position scores; training caches
/// the frozen LM's scores once per instance and reuses them every epoch.
pub fn lm_regularizer_cached<S: Scalar>(
    tape: &mut Tape<S>,
    scores: &[f64],
    masks: Var,
) -> LmResult<Var> {
    let s = tape.constant(Tensor::new(
        vec![scores.len(), 1],
        scores.iter().map(|&v| S::from_f64(v)).collect(),
    ));
    lm_regularizer_from_scores(tape, s, masks)
}

fn lm_regularizer_from_scores<S: Scalar>(
    tape: &mut Tape<S>,
    scores: Var,
    masks: Var,
) -> LmResult<Var> {
    let n = tape.value(scores).rows();
    if n == 0 {
        return Err(LmError::EmptySequence);
    }
    assert_eq!(tape.value(masks).rows(), n, "mask length mismatch");
    let scaled = tape.mul(masks, scores)?;
    let p = tape.sigmoid(scaled);
    let lp = tape.log(p);
    let one = tape.constant(Tensor::new(vec![1, 1], vec![S::ONE]));
    let weights = if n > 1 {
        let prev_ids: Vec<usize> = (0..n - 1).collect();
        let prev = tape.gather_rows(masks, &prev_ids)?;
        tape.concat(0, &[one, prev])?
    } else {
        one
    };
    let weighted = tape.mul(weights, lp)?;
    let s = tape.sum(weighted);
    Ok(tape.scale(s, -1.0)?)
}

/// Plain-float regularizer value for exhaustive enumeration.
pub fn lm_nll_masks(scores: &[f64], masks: &[f64]) -> f64 {
    assert_eq!(scores.len(), masks.len());
    let mut loss = 0.0;
    let mut w = 1.0;
    for (&s, &m) in scores.iter().zip(masks) {
        loss -= w * sigmoid_f64(m * s).ln();
        w = m;
    }
    loss
}

#[derive(Debug, Clone)]
pub struct OrderingViolation {
    pub consecutive: Vec<usize>,
    pub scattered: Vec<usize>,
    pub l_consecutive: f64,
    pub l_scattered: f64,
}

/// Outcome of the contiguity-ordering check.
#[derive(Debug, Clone)]
pub enum TheoremReport {
    PremisesNotSatisfied { reason: String },
    Verified {
        configurations: usize,
        comparisons: usize,
        violations: Vec<OrderingViolation>,
    },
}

impl TheoremReport {
    pub fn ok(&self) -> bool {
        matches!(
            self,
            TheoremReport::Verified { violations, .. } if violations.is_empty()
        )
    }
}

/// Exhaustively verify that, under the premise bounds, every single-block
/// selection of k tokens scores strictly below every fragmented selection of
/// k tokens.
///
/// Premises checked before any verdict (relaxed mask values are taken as
/// m_hi = 1 - eps/2 for selected and m_lo = eps/2 for skipped):
/// 1. 0 < eps < 0.5, so selected and skipped mask values are separated;
/// 2. skipped-token quasi-probabilities lie pairwise within eps;
/// 3. every token's selected quasi-probability reaches the floor delta;
/// 4. delta exceeds every skipped quasi-probability.
///
/// Comparisons are restricted to selections agreeing on whether the first
/// and last positions are selected. The sequence edges are genuinely
/// special: position 1 always carries weight m_0 = 1 and position n has no
/// successor, so selections touching an edge trade different terms and the
/// ordering claim does not cross those boundaries.
pub fn theorem1_check(scores: &[f64], eps: f64, delta: f64, k: usize) -> TheoremReport {
    let n = scores.len();
    if !(eps > 0.0 && eps < 0.5) {
        return TheoremReport::PremisesNotSatisfied {
            reason: format!("eps must lie strictly inside (0, 0.5), got {eps}"),
        };
    }
    if n == 0 || k == 0 || k > n {
        return TheoremReport::PremisesNotSatisfied {
            reason: format!("need 1 <= k <= n, got k={k}, n={n}"),
        };
    }
    let m_hi = 1.0 - eps / 2.0;
    let m_lo = eps / 2.0;
    let selected_probs: Vec<f64> = scores.iter().map(|&s| quasi_prob(s, m_hi)).collect();
    let skipped_probs: Vec<f64> = scores.iter().map(|&s| quasi_prob(s, m_lo)).collect();
    let q_min = skipped_probs.iter().cloned().fold(f64::INFINITY, f64::min);
    let q_max = skipped_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if q_max - q_min > eps {
        return TheoremReport::PremisesNotSatisfied {
            reason: format!(
                "skipped-token probabilities spread {:.4} exceeds eps {eps}",
                q_max - q_min
            ),
        };
    }
    if let Some(p) = selected_probs.iter().find(|&&p| p < delta) {
        return TheoremReport::PremisesNotSatisfied {
            reason: format!("selected probability {p:.4} below the floor delta {delta}"),
        };
    }
    if delta <= q_max {
        return TheoremReport::PremisesNotSatisfied {
            reason: format!(
                "delta {delta} does not exceed the largest skipped probability {q_max:.4}"
            ),
        };
    }

    let mut strata: Vec<Vec<(Vec<usize>, usize, f64)>> = vec![Vec::new(); 4];
    let mut configurations = 0usize;
    let mut selection = Vec::with_capacity(k);
    enumerate_selections(n, k, 0, &mut selection, &mut |sel| {
        configurations += 1;
        let mut masks = vec![m_lo; n];
        for &i in sel {
            masks[i] = m_hi;
        }
        let l = lm_nll_masks(scores, &masks);
        let segments = count_segments(sel);
        let stratum =
            (sel.contains(&0) as usize) * 2 + (sel.contains(&(n - 1)) as usize);
        strata[stratum].push((sel.to_vec(), segments, l));
    });

    let mut comparisons = 0usize;
    let mut violations = Vec::new();
    for group in &strata {
        for (consec_sel, g1, l1) in group.iter().filter(|(_, g, _)| *g == 1) {
            let _ = g1;
            for (scat_sel, _, l2) in group.iter().filter(|(_, g, _)| *g > 1) {
                comparisons += 1;
                if *l1 >= *l2 {
                    violations.push(OrderingViolation {
                        consecutive: consec_sel.clone(),
                        scattered: scat_sel.clone(),
                        l_consecutive: *l1,
                        l_scattered: *l2,
                    });
                }
            }
        }
    }
    TheoremReport::Verified {
        configurations,
        comparisons,
        violations,
    }
}

fn enumerate_selections(
    n: usize,
    k: usize,
    start: usize,
    current: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if current.len() == k {
        visit(current);
        return;
    }
    let remaining = k - current.len();
    for i in start..=n.saturating_sub(remaining) {
        current.push(i);
        enumerate_selections(n, k, i + 1, current, visit);
        current.pop();
    }
}

fn count_segments(sorted_selection: &[usize]) -> usize {
    let mut segments = 0;
    let mut prev = usize::MAX - 1;
    for &i in sorted_selection {
        if i != prev + 1 {
            segments += 1;
        }
        prev = i;
    }
    segments
}
