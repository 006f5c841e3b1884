//! Loss composition, the alternating generator/discriminator optimization,
//! and rationale extraction at inference time.
//!
//! Each batch runs two tapes. The generator tape computes
//!
//! ```text
//! J = L_sp + lambda_ib*L_ib + (lambda_g*L_g + L_guide + lambda_mi*L_mi)
//!     + lambda_lm*L_lm
//! ```
//!
//! with the discriminator bound frozen, so adversarial gradients reach the
//! selector and predictor but never the discriminator. The discriminator
//! tape then scores detached copies of the same features, so its update
//! cannot reach the generator. Both losses are evaluated before either
//! update is applied.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{EncodedInstance, Label, Span};
use crate::lm::{lm_regularizer_cached, ContinuousLm, LmError};
use crate::metrics::mask_to_spans;
use crate::model::{
    binarize_probs, loss_g, loss_ib, loss_mi, mask_var, prediction_loss, DiscBinding, GenBinding,
    IbPrior, InfoCalModel, ModelConfig, ModelError, TaskKind,
};
use crate::nn::ParamSet;
use crate::optim::{Adam, AdamConfig, StepOutcome};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tape(#[from] crate::tape::TapeError),
    #[error("invalid hyperparameters: {0}")]
    BadHyperparams(String),
    #[error("lambda_lm > 0 requires a pretrained language model")]
    MissingLm,
    #[error("corpus is empty")]
    EmptyCorpus,
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub lambda_ib: f64,
    pub lambda_g: f64,
    pub lambda_mi: f64,
    pub lambda_lm: f64,
    /// Target selection rate; the sparsity prior is (1 - r, r).
    pub r_select: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda_ib: 0.0003,
            lambda_g: 1.0,
            lambda_mi: 0.1,
            lambda_lm: 0.005,
            r_select: 0.2,
            tau_start: 0.5,
            tau_end: 0.5,
            lr_gen: 1e-3,
            lr_disc: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |msg: String| Err(TrainError::BadHyperparams(msg));
        for (name, v) in [
            ("lambda_ib", self.lambda_ib),
            ("lambda_g", self.lambda_g),
            ("lambda_mi", self.lambda_mi),
            ("lambda_lm", self.lambda_lm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.r_select > 0.0 && self.r_select < 1.0) {
            return bad(format!("r_select must lie in (0, 1), got {}", self.r_select));
        }
        if !(self.tau_start > 0.0) || !(self.tau_end > 0.0) {
            return bad(format!(
                "temperatures must be positive, got {} -> {}",
                self.tau_start, self.tau_end
            ));
        }
        if !(self.lr_gen > 0.0) || !(self.lr_disc > 0.0) {
            return bad(format!(
                "learning rates must be positive, got gen {} disc {}",
                self.lr_gen, self.lr_disc
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Mask temperature for a 0-based epoch: linear from start to end.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_start;
        }
        let t = (epoch.min(self.epochs - 1)) as f64 / (self.epochs - 1) as f64;
        self.tau_start + (self.tau_end - self.tau_start) * t
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    /// Zero the adversarial weight and never update the discriminator. The
    /// guider prediction loss and its compression term remain active.
    pub disable_adv: bool,
    /// Drop the fluency regularizer.
    pub disable_lm: bool,
    /// Zero the sparsity-prior weight.
    pub disable_ib: bool,
}

impl AblationFlags {
    /// Loss weights after applying the switches.
    pub fn effective(&self, hp: &Hyperparams) -> EffectiveWeights {
        EffectiveWeights {
            lambda_ib: if self.disable_ib { 0.0 } else { hp.lambda_ib },
            lambda_g: if self.disable_adv { 0.0 } else { hp.lambda_g },
            lambda_mi: hp.lambda_mi,
            lambda_lm: if self.disable_lm { 0.0 } else { hp.lambda_lm },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EffectiveWeights {
    pub lambda_ib: f64,
    pub lambda_g: f64,
    pub lambda_mi: f64,
    pub lambda_lm: f64,
}

/// Batch-mean loss components. Disabled terms are recorded as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_sp: f64,
    pub l_ib: f64,
    pub l_guide: f64,
    pub l_mi: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_lm: f64,
    pub j_total: f64,
}

impl LossBreakdown {
    /// Rebuild the total from the logged components with the weights the
    /// trainer actually used; must match `j_total` to 1e-6.
    pub fn recomposed(&self, hp: &Hyperparams, flags: AblationFlags) -> f64 {
        let w = flags.effective(hp);
        self.l_sp
            + w.lambda_ib * self.l_ib
            + (w.lambda_g * self.l_g + self.l_guide + w.lambda_mi * self.l_mi)
            + w.lambda_lm * self.l_lm
    }

    fn is_finite(&self) -> bool {
        [
            self.l_sp, self.l_ib, self.l_guide, self.l_mi, self.l_g, self.l_d, self.l_lm,
            self.j_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &LossBreakdown) {
        self.l_sp += other.l_sp;
        self.l_ib += other.l_ib;
        self.l_guide += other.l_guide;
        self.l_mi += other.l_mi;
        self.l_g += other.l_g;
        self.l_d += other.l_d;
        self.l_lm += other.l_lm;
        self.j_total += other.j_total;
    }

    fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            l_sp: self.l_sp * c,
            l_ib: self.l_ib * c,
            l_guide: self.l_guide * c,
            l_mi: self.l_mi * c,
            l_g: self.l_g * c,
            l_d: self.l_d * c,
            l_lm: self.l_lm * c,
            j_total: self.j_total * c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub batches: usize,
    pub skipped_batches: usize,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val: f64,
}

pub struct Trainer {
    pub model: InfoCalModel<f32>,
    pub hp: Hyperparams,
    pub flags: AblationFlags,
    pub prior: IbPrior,
    opt_gen: Adam<f32>,
    opt_disc: Adam<f32>,
    rng: ChaCha8Rng,
    lm_scores: Option<Vec<Vec<f64>>>,
}

impl Trainer {
    /// `lm_scores[i]` must align with `train[i]`; scores come from the frozen
    /// language model once, not per epoch.
    pub fn new(
        cfg: ModelConfig,
        hp: Hyperparams,
        flags: AblationFlags,
        lm: Option<&ContinuousLm<f32>>,
        train: &[EncodedInstance],
    ) -> TrainResult<Trainer> {
        hp.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let needs_lm = hp.lambda_lm > 0.0 && !flags.disable_lm;
        let lm_scores = match (needs_lm, lm) {
            (false, _) => None,
            (true, None) => return Err(TrainError::MissingLm),
            (true, Some(lm)) => {
                let mut all = Vec::with_capacity(train.len());
                for inst in train {
                    all.push(lm.score_values(&inst.ids)?);
                }
                Some(all)
            }
        };
        let prior = IbPrior::select_rate(hp.r_select)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let model: InfoCalModel<f32> = InfoCalModel::new(cfg, &mut rng)?;
        let opt_gen = Adam::new(AdamConfig::with_lr(hp.lr_gen), &model.gen);
        let opt_disc = Adam::new(AdamConfig::with_lr(hp.lr_disc), &model.disc);
        Ok(Trainer {
            model,
            hp,
            flags,
            prior,
            opt_gen,
            opt_disc,
            rng,
            lm_scores,
        })
    }

    /// One optimization step on the given training indices. Returns the
    /// breakdown, or None when a non-finite loss made the batch skip with no
    /// parameter touched.
    pub fn train_batch(
        &mut self,
        train: &[EncodedInstance],
        idxs: &[usize],
        tau: f64,
    ) -> TrainResult<Option<LossBreakdown>> {
        assert!(!idxs.is_empty(), "empty batch");
        let w = self.flags.effective(&self.hp);
        let task = self.model.cfg.task;

        let mut tape: Tape<f32> = Tape::new();
        let gen = GenBinding::bind(&mut tape, &self.model)?;
        let disc_frozen = DiscBinding::bind_frozen(&mut tape, &self.model);

        let mut sp_terms = Vec::new();
        let mut ib_terms = Vec::new();
        let mut guide_terms = Vec::new();
        let mut mi_terms = Vec::new();
        let mut g_terms = Vec::new();
        let mut lm_terms = Vec::new();
        let mut fake_feats: Vec<Tensor<f32>> = Vec::new();
        let mut real_feats: Vec<Tensor<f32>> = Vec::new();

        for &i in idxs {
            let inst = &train[i];
            let sel = gen.select(&mut tape, &inst.ids, tau, &mut self.rng)?;
            let pred = gen.predict(&mut tape, &inst.ids, sel.masks, task)?;
            sp_terms.push(prediction_loss(&mut tape, pred.dist, inst.label, task)?);
            ib_terms.push(loss_ib(&mut tape, sel.probs, self.prior)?);
            let gd = gen.guide(&mut tape, &inst.ids, task, &mut self.rng)?;
            guide_terms.push(prediction_loss(&mut tape, gd.dist, inst.label, task)?);
            mi_terms.push(loss_mi(&mut tape, gd.mu, gd.sigma)?);
            if !self.flags.disable_adv {
                let d_fake = disc_frozen.apply(&mut tape, pred.feature)?;
                g_terms.push(loss_g(&mut tape, d_fake)?);
                fake_feats.push(tape.value(pred.feature).clone());
                real_feats.push(tape.value(gd.z).clone());
            }
            if let Some(scores) = &self.lm_scores {
                lm_terms.push(lm_regularizer_cached(&mut tape, &scores[i], sel.masks)?);
            }
        }

        let l_sp = batch_mean(&mut tape, &sp_terms)?;
        let l_ib = batch_mean(&mut tape, &ib_terms)?;
        let l_guide = batch_mean(&mut tape, &guide_terms)?;
        let l_mi = batch_mean(&mut tape, &mi_terms)?;
        let l_g = if g_terms.is_empty() {
            None
        } else {
            Some(batch_mean(&mut tape, &g_terms)?)
        };
        let l_lm = if lm_terms.is_empty() {
            None
        } else {
            Some(batch_mean(&mut tape, &lm_terms)?)
        };

        let mut j = tape.add(l_sp, l_guide)?;
        if w.lambda_ib > 0.0 {
            let t = tape.scale(l_ib, w.lambda_ib)?;
            j = tape.add(j, t)?;
        }
        if w.lambda_mi > 0.0 {
            let t = tape.scale(l_mi, w.lambda_mi)?;
            j = tape.add(j, t)?;
        }
        if let (Some(lg), true) = (l_g, w.lambda_g > 0.0) {
            let t = tape.scale(lg, w.lambda_g)?;
            j = tape.add(j, t)?;
        }
        if let (Some(llm), true) = (l_lm, w.lambda_lm > 0.0) {
            let t = tape.scale(llm, w.lambda_lm)?;
            j = tape.add(j, t)?;
        }

        let scalar = |tape: &Tape<f32>, v: Var| tape.value(v).item() as f64;
        let mut breakdown = LossBreakdown {
            l_sp: scalar(&tape, l_sp),
            l_ib: scalar(&tape, l_ib),
            l_guide: scalar(&tape, l_guide),
            l_mi: scalar(&tape, l_mi),
            l_g: l_g.map_or(0.0, |v| scalar(&tape, v)),
            l_d: 0.0,
            l_lm: l_lm.map_or(0.0, |v| scalar(&tape, v)),
            j_total: scalar(&tape, j),
        };

        // Discriminator loss on detached features, evaluated before any
        // update so both sides see the same state.
        let mut disc_tape: Tape<f32> = Tape::new();
        let mut d_loss = None;
        if !self.flags.disable_adv {
            let disc = DiscBinding::bind(&mut disc_tape, &self.model)?;
            let mut d_terms = Vec::new();
            for (fake, real) in fake_feats.iter().zip(&real_feats) {
                let zf = disc_tape.constant(fake.clone());
                let zr = disc_tape.constant(real.clone());
                let d_fake = disc.apply(&mut disc_tape, zf)?;
                let d_real = disc.apply(&mut disc_tape, zr)?;
                d_terms.push(crate::model::loss_d(&mut disc_tape, d_real, d_fake)?);
            }
            let ld = batch_mean(&mut disc_tape, &d_terms)?;
            breakdown.l_d = disc_tape.value(ld).item() as f64;
            d_loss = Some(ld);
        }

        if !breakdown.is_finite() {
            return Ok(None);
        }

        tape.backward(j)?;
        let gen_outcome = self.opt_gen.step(&mut self.model.gen, &tape.param_grads());
        if gen_outcome == StepOutcome::SkippedNonFinite {
            return Ok(None);
        }
        if let Some(ld) = d_loss {
            disc_tape.backward(ld)?;
            self.opt_disc
                .step(&mut self.model.disc, &disc_tape.param_grads());
        }
        Ok(Some(breakdown))
    }

    /// One shuffled pass over the corpus. Skipped batches are counted, not
    /// averaged.
    pub fn train_epoch(
        &mut self,
        train: &[EncodedInstance],
        epoch: usize,
    ) -> TrainResult<EpochStats> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let tau = self.hp.tau_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossBreakdown::default();
        let mut batches = 0usize;
        let mut skipped = 0usize;
        for chunk in order.chunks(self.hp.batch_size) {
            match self.train_batch(train, chunk, tau)? {
                Some(b) => {
                    sum.add_assign(&b);
                    batches += 1;
                }
                None => skipped += 1,
            }
        }
        let mean = if batches > 0 {
            sum.scaled(1.0 / batches as f64)
        } else {
            LossBreakdown::default()
        };
        Ok(EpochStats {
            epoch,
            mean,
            batches,
            skipped_batches: skipped,
            val_metric: None,
        })
    }

    /// Full training loop with best-checkpoint selection on the validation
    /// metric; the model ends at the best epoch's parameters.
    pub fn fit(
        &mut self,
        train: &[EncodedInstance],
        dev: &[EncodedInstance],
    ) -> TrainResult<FitReport> {
        let mut epochs = Vec::with_capacity(self.hp.epochs);
        let mut best: Option<(usize, f64, Snapshot)> = None;
        for epoch in 0..self.hp.epochs {
            let mut stats = self.train_epoch(train, epoch)?;
            let val = validation_metric(&self.model, dev)?;
            stats.val_metric = Some(val);
            epochs.push(stats);
            let improved = match &best {
                None => true,
                Some((_, best_val, _)) => val > *best_val,
            };
            if improved {
                best = Some((epoch, val, snapshot(&self.model)));
            }
        }
        let (best_epoch, best_val, snap) = best.expect("at least one epoch");
        restore(&mut self.model, &snap);
        Ok(FitReport {
            epochs,
            best_epoch,
            best_val,
        })
    }
}

fn batch_mean(tape: &mut Tape<f32>, terms: &[Var]) -> TrainResult<Var> {
    assert!(!terms.is_empty());
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / terms.len() as f64)?)
}

type Snapshot = (Vec<(String, Tensor<f32>)>, Vec<(String, Tensor<f32>)>);

fn snapshot(model: &InfoCalModel<f32>) -> Snapshot {
    let dump = |ps: &ParamSet<f32>| {
        ps.iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect()
    };
    (dump(&model.gen), dump(&model.disc))
}

fn restore(model: &mut InfoCalModel<f32>, snap: &Snapshot) {
    model.gen.load_values(&snap.0).expect("snapshot layout");
    model.disc.load_values(&snap.1).expect("snapshot layout");
}

/// Deterministic inference: selection probabilities, the thresholded mask,
/// and the prediction made from that mask.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
    /// Class distribution, or a single regression score.
    pub dist: Vec<f64>,
}

impl Extraction {
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.dist.iter().enumerate() {
            if *v > self.dist[best] {
                best = i;
            }
        }
        best
    }

    pub fn spans(&self) -> Vec<Span> {
        mask_to_spans(&self.mask)
    }
}

pub fn extract_rationale(
    model: &InfoCalModel<f32>,
    ids: &[usize],
) -> Result<Extraction, ModelError> {
    let mut tape: Tape<f32> = Tape::new();
    let gen = GenBinding::bind_frozen(&mut tape, model);
    let probs = gen.selector_probs(&mut tape, ids)?;
    let probs_v: Vec<f64> = tape.value(probs).data().iter().map(|p| *p as f64).collect();
    let mask = binarize_probs(tape.value(probs));
    let mv = mask_var(&mut tape, &mask);
    let pred = gen.predict(&mut tape, ids, mv, model.cfg.task)?;
    let dist: Vec<f64> = tape
        .value(pred.dist)
        .data()
        .iter()
        .map(|p| *p as f64)
        .collect();
    Ok(Extraction {
        probs: probs_v,
        mask,
        dist,
    })
}

/// Prediction distribution under an arbitrary keep-mask, for the
/// faithfulness metrics.
pub fn predict_with_mask(
    model: &InfoCalModel<f32>,
    ids: &[usize],
    mask: &[bool],
) -> Result<Vec<f64>, ModelError> {
    assert_eq!(ids.len(), mask.len(), "mask length mismatch");
    let mut tape: Tape<f32> = Tape::new();
    let gen = GenBinding::bind_frozen(&mut tape, model);
    let mv = mask_var(&mut tape, mask);
    let pred = gen.predict(&mut tape, ids, mv, model.cfg.task)?;
    Ok(tape
        .value(pred.dist)
        .data()
        .iter()
        .map(|p| *p as f64)
        .collect())
}

/// Dev-set accuracy for classification, negative mean squared error for
/// regression. Higher is better in both modes.
pub fn validation_metric(
    model: &InfoCalModel<f32>,
    dev: &[EncodedInstance],
) -> TrainResult<f64> {
    if dev.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    match model.cfg.task {
        TaskKind::Classification => {
            let mut correct = 0usize;
            for inst in dev {
                let Label::Class(gold) = inst.label else {
                    return Err(TrainError::Model(ModelError::ScoreLabelInClassification));
                };
                let ex = extract_rationale(model, &inst.ids)?;
                if ex.predicted_class() == gold {
                    correct += 1;
                }
            }
            Ok(correct as f64 / dev.len() as f64)
        }
        TaskKind::Regression => {
            let mut sse = 0.0;
            for inst in dev {
                let ex = extract_rationale(model, &inst.ids)?;
                let err = ex.dist[0] - inst.label.as_score();
                sse += err * err;
            }
            Ok(-sse / dev.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::lm::LmConfig;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embed_dim: 6,
            hidden_dim: 5,
            n_classes: 2,
            task: TaskKind::Classification,
        }
    }

    fn tiny_instances(n: usize, len: usize, vocab: usize) -> Vec<EncodedInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (0..n)
            .map(|i| EncodedInstance {
                ids: (0..len).map(|_| rng.gen_range(2..vocab)).collect(),
                label: Label::Class(i % 2),
                gold: None,
            })
            .collect()
    }

    fn tiny_lm(vocab: usize) -> ContinuousLm<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        ContinuousLm::new(
            LmConfig {
                vocab_size: vocab,
                embed_dim: 4,
                hidden_dim: 3,
            },
            &mut rng,
        )
    }

    use rand::Rng;

    #[test]
    fn breakdown_recomposes_to_j_total_on_random_batches() {
        let hp = Hyperparams {
            lambda_ib: 0.05,
            lambda_g: 1.0,
            lambda_mi: 0.5,
            lambda_lm: 0.01,
            batch_size: 4,
            epochs: 1,
            ..Hyperparams::default()
        };
        let train = tiny_instances(12, 7, 20);
        let lm = tiny_lm(20);
        let mut tr = Trainer::new(
            tiny_cfg(20),
            hp.clone(),
            AblationFlags::default(),
            Some(&lm),
            &train,
        )
        .unwrap();
        for chunk in [&[0usize, 1, 2, 3][..], &[4, 5, 6][..], &[7, 8, 9, 10, 11][..]] {
            let b = tr.train_batch(&train, chunk, 0.5).unwrap().unwrap();
            let diff = (b.j_total - b.recomposed(&hp, AblationFlags::default())).abs();
            assert!(diff < 1e-6, "recomposition off by {diff}");
            assert!(b.l_d.is_finite());
        }
    }

    #[test]
    fn all_zero_weights_reduce_j_to_sp_plus_guide() {
        let hp = Hyperparams {
            lambda_ib: 0.0,
            lambda_g: 0.0,
            lambda_mi: 0.0,
            lambda_lm: 0.0,
            batch_size: 4,
            epochs: 1,
            ..Hyperparams::default()
        };
        let train = tiny_instances(4, 6, 20);
        let mut tr =
            Trainer::new(tiny_cfg(20), hp, AblationFlags::default(), None, &train).unwrap();
        let b = tr.train_batch(&train, &[0, 1, 2, 3], 0.5).unwrap().unwrap();
        let diff = (b.j_total - (b.l_sp + b.l_guide)).abs();
        assert!(diff < 1e-6, "expected J = L_sp + L_guide, off by {diff}");
    }

    #[test]
    fn disable_adv_keeps_discriminator_bit_identical() {
        let hp = Hyperparams {
            batch_size: 4,
            epochs: 1,
            lambda_lm: 0.0,
            ..Hyperparams::default()
        };
        let train = tiny_instances(8, 6, 20);
        let flags = AblationFlags {
            disable_adv: true,
            ..AblationFlags::default()
        };
        let mut tr = Trainer::new(tiny_cfg(20), hp, flags, None, &train).unwrap();
        let before: Vec<Vec<u32>> = tr
            .model
            .disc
            .iter()
            .map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let gen_before: Vec<f32> = tr.model.gen.get(0).data().to_vec();
        let stats = tr.train_epoch(&train, 0).unwrap();
        assert!(stats.batches > 0);
        assert_eq!(stats.mean.l_g, 0.0);
        assert_eq!(stats.mean.l_d, 0.0);
        assert!(stats.mean.l_guide > 0.0, "guider loss stays active");
        let after: Vec<Vec<u32>> = tr
            .model
            .disc
            .iter()
            .map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "discriminator must not move");
        assert_ne!(
            gen_before,
            tr.model.gen.get(0).data().to_vec(),
            "generator must move"
        );
    }

    #[test]
    fn same_seed_produces_identical_logs_and_parameters() {
        let spec = SynthSpec::preset("ngram", 40, 11).unwrap();
        let mut spec = spec;
        spec.n_instances = 16;
        spec.min_len = 8;
        spec.max_len = 12;
        let corpus = generate_synthetic(&spec).unwrap();
        let vocab = crate::data::build_vocab(&corpus, 1).unwrap();
        let train = crate::data::encode_corpus(&corpus, &vocab);

        let run = || {
            let hp = Hyperparams {
                batch_size: 4,
                epochs: 2,
                lambda_lm: 0.0,
                seed: 5,
                ..Hyperparams::default()
            };
            let mut tr = Trainer::new(
                tiny_cfg(vocab.len()),
                hp,
                AblationFlags::default(),
                None,
                &train,
            )
            .unwrap();
            let mut logs = Vec::new();
            for epoch in 0..2 {
                logs.push(tr.train_epoch(&train, epoch).unwrap());
            }
            let params: Vec<Vec<u32>> = tr
                .model
                .gen
                .iter()
                .chain(tr.model.disc.iter())
                .map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect())
                .collect();
            (logs, params)
        };
        let (logs_a, params_a) = run();
        let (logs_b, params_b) = run();
        assert_eq!(params_a, params_b, "parameters must be bit-identical");
        for (a, b) in logs_a.iter().zip(&logs_b) {
            assert_eq!(a.mean, b.mean);
            assert_eq!(a.batches, b.batches);
            assert_eq!(a.skipped_batches, b.skipped_batches);
        }
    }

    #[test]
    fn non_finite_loss_skips_batch_without_touching_parameters() {
        let hp = Hyperparams {
            batch_size: 2,
            epochs: 1,
            lambda_lm: 0.01,
            ..Hyperparams::default()
        };
        let train = tiny_instances(2, 5, 20);
        let lm = tiny_lm(20);
        let mut tr = Trainer::new(
            tiny_cfg(20),
            hp,
            AblationFlags::default(),
            Some(&lm),
            &train,
        )
        .unwrap();
        tr.lm_scores = Some(vec![vec![f64::NAN; 5], vec![f64::NAN; 5]]);
        let before: Vec<Vec<u32>> = tr
            .model
            .gen
            .iter()
            .map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let out = tr.train_batch(&train, &[0, 1], 0.5).unwrap();
        assert!(out.is_none(), "batch must be skipped");
        let after: Vec<Vec<u32>> = tr
            .model
            .gen
            .iter()
            .map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);

        let stats = tr.train_epoch(&train, 0).unwrap();
        assert_eq!(stats.batches, 0);
        assert_eq!(stats.skipped_batches, 1);
    }

    #[test]
    fn missing_language_model_is_rejected_when_weight_is_positive() {
        let hp = Hyperparams {
            lambda_lm: 0.005,
            ..Hyperparams::default()
        };
        let train = tiny_instances(2, 5, 20);
        let err = Trainer::new(tiny_cfg(20), hp, AblationFlags::default(), None, &train)
            .err()
            .expect("must reject");
        assert!(matches!(err, TrainError::MissingLm));

        let hp = Hyperparams {
            lambda_lm: 0.005,
            ..Hyperparams::default()
        };
        let flags = AblationFlags {
            disable_lm: true,
            ..AblationFlags::default()
        };
        assert!(Trainer::new(tiny_cfg(20), hp, flags, None, &train).is_ok());
    }

    #[test]
    fn extraction_thresholds_probabilities_at_one_half() {
        let train = tiny_instances(2, 6, 20);
        let hp = Hyperparams {
            lambda_lm: 0.0,
            ..Hyperparams::default()
        };
        let tr = Trainer::new(tiny_cfg(20), hp, AblationFlags::default(), None, &train).unwrap();
        let ex = extract_rationale(&tr.model, &train[0].ids).unwrap();
        assert_eq!(ex.probs.len(), 6);
        assert_eq!(ex.dist.len(), 2);
        for (p, m) in ex.probs.iter().zip(&ex.mask) {
            assert_eq!(*m, *p >= 0.5);
        }
        let sum: f64 = ex.dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-4);

        let full = predict_with_mask(&tr.model, &train[0].ids, &vec![true; 6]).unwrap();
        assert_eq!(full.len(), 2);
    }

    #[test]
    fn objective_trends_down_on_planted_synthetic_task() {
        let mut spec = SynthSpec::preset("ngram", 60, 3).unwrap();
        spec.min_len = 8;
        spec.max_len = 12;
        spec.vocab_size = 30;
        let corpus = generate_synthetic(&spec).unwrap();
        let vocab = crate::data::build_vocab(&corpus, 1).unwrap();
        let train = crate::data::encode_corpus(&corpus, &vocab);
        let hp = Hyperparams {
            batch_size: 8,
            epochs: 5,
            lambda_lm: 0.0,
            lr_gen: 3e-3,
            seed: 1,
            ..Hyperparams::default()
        };
        let mut tr = Trainer::new(
            tiny_cfg(vocab.len()),
            hp,
            AblationFlags::default(),
            None,
            &train,
        )
        .unwrap();
        let mut first = 0.0;
        let mut last = 0.0;
        for epoch in 0..5 {
            let stats = tr.train_epoch(&train, epoch).unwrap();
            if epoch == 0 {
                first = stats.mean.j_total;
            }
            last = stats.mean.j_total;
        }
        assert!(
            last < first,
            "objective should fall: first {first}, last {last}"
        );
    }

    #[test]
    fn fit_restores_the_best_validation_checkpoint() {
        let mut spec = SynthSpec::preset("ngram", 50, 7).unwrap();
        spec.min_len = 8;
        spec.max_len = 10;
        spec.vocab_size = 30;
        let corpus = generate_synthetic(&spec).unwrap();
        let vocab = crate::data::build_vocab(&corpus, 1).unwrap();
        let all = crate::data::encode_corpus(&corpus, &vocab);
        let (dev, train) = all.split_at(10);
        let hp = Hyperparams {
            batch_size: 8,
            epochs: 3,
            lambda_lm: 0.0,
            seed: 2,
            ..Hyperparams::default()
        };
        let mut tr = Trainer::new(
            tiny_cfg(vocab.len()),
            hp,
            AblationFlags::default(),
            None,
            train,
        )
        .unwrap();
        let report = tr.fit(train, dev).unwrap();
        assert_eq!(report.epochs.len(), 3);
        let best_logged = report.epochs[report.best_epoch].val_metric.unwrap();
        assert_eq!(best_logged, report.best_val);
        for e in &report.epochs {
            assert!(e.val_metric.unwrap() <= report.best_val);
        }
        let val_now = validation_metric(&tr.model, dev).unwrap();
        assert_eq!(
            val_now, report.best_val,
            "restored model must reproduce the best validation metric"
        );
    }

    #[test]
    fn tau_schedule_interpolates_linearly() {
        let hp = Hyperparams {
            tau_start: 1.0,
            tau_end: 0.2,
            epochs: 5,
            ..Hyperparams::default()
        };
        assert!((hp.tau_at(0) - 1.0).abs() < 1e-12);
        assert!((hp.tau_at(4) - 0.2).abs() < 1e-12);
        assert!((hp.tau_at(2) - 0.6).abs() < 1e-12);
        let constant = Hyperparams {
            epochs: 1,
            ..Hyperparams::default()
        };
        assert_eq!(constant.tau_at(0), constant.tau_start);
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        let train = tiny_instances(2, 5, 20);
        for hp in [
            Hyperparams { lambda_ib: -0.1, ..Hyperparams::default() },
            Hyperparams { r_select: 0.0, ..Hyperparams::default() },
            Hyperparams { r_select: 1.0, ..Hyperparams::default() },
            Hyperparams { tau_start: 0.0, ..Hyperparams::default() },
            Hyperparams { lr_gen: 0.0, ..Hyperparams::default() },
            Hyperparams { batch_size: 0, ..Hyperparams::default() },
            Hyperparams { epochs: 0, ..Hyperparams::default() },
        ] {
            let mut hp = hp;
            hp.lambda_lm = 0.0;
            assert!(
                Trainer::new(tiny_cfg(20), hp, AblationFlags::default(), None, &train).is_err()
            );
        }
    }
}
