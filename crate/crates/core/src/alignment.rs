//! Aligning the rewriter to the predictor: classifier-supervised target
//! distribution over candidates, the policy's own distribution, KL(p_lm || p_csc)
//! and the mixed objective with the rewriter's likelihood loss.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ehr::{FeatureCatalog, PatientEhr, Rewrite};
use crate::error::{Error, Result};
use crate::math::softmax;
use crate::predictor::PredictorModel;
use crate::rewriter::policy::{accumulate_logprob_gradient, mask_logprob, mle_loss_and_gradient};
use crate::rewriter::{MaskExample, PolicyGradient, PreparedEhr, RewriterPolicy};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Temperature of the classifier-supervised target distribution.
    pub tau: f64,
    /// Temperature applied to rewrite log-probabilities.
    pub kappa: f64,
    /// Weight of the likelihood loss; `1 - lambda_mix` weights the KL term.
    pub lambda_mix: f64,
    pub n_i: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub learning_rate: f64,
    /// Patient groups (and likelihood pairs) per step.
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            tau: 0.1,
            kappa: 0.01,
            lambda_mix: 0.25,
            n_i: 8,
            max_steps: 400,
            eval_every: 100,
            learning_rate: 0.01,
            batch_size: 16,
            rng_seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", "must be positive"));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::config("kappa", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_mix) {
            return Err(Error::config("lambda_mix", "must lie in [0, 1]"));
        }
        if self.n_i == 0 {
            return Err(Error::config("n_i", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Probability of `label` given the predictor's probability of the positive class.
pub fn true_label_proba(p_positive: f64, label: u8) -> f64 {
    if label == 1 {
        p_positive
    } else {
        1.0 - p_positive
    }
}

/// Softmax over candidates of the predictor's true-label probability divided by `tau`.
pub fn csc_distribution(predictor: &PredictorModel, candidate_texts: &[String], true_label: u8, tau: f64) -> Vec<f64> {
    let scores: Vec<f64> = candidate_texts
        .iter()
        .map(|t| true_label_proba(predictor.predict_proba(t), true_label))
        .collect();
    softmax(&scores, tau)
}

/// Softmax over candidates of their rewrite log-probability divided by `kappa`.
pub fn lm_distribution(
    policy: &RewriterPolicy,
    ehr: &PatientEhr,
    candidates: &[Rewrite],
    catalog: &FeatureCatalog,
    kappa: f64,
) -> Result<Vec<f64>> {
    let prepared = PreparedEhr::new(ehr, catalog)?;
    let logits = policy.logits(&prepared);
    let logprobs = candidates
        .iter()
        .map(|c| Ok(mask_logprob(&logits, &c.mask(ehr)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&logprobs, kappa))
}

/// KL(p_lm || p_csc), clamped at zero against rounding.
pub fn kl_loss(p_lm: &[f64], p_csc: &[f64]) -> f64 {
    let kl: f64 = p_lm
        .iter()
        .zip(p_csc)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, c)| p * (p.ln() - c.ln()))
        .sum();
    kl.max(0.0)
}

pub fn total_loss(llm_loss: f64, kl: f64, lambda_mix: f64) -> f64 {
    lambda_mix * llm_loss + (1.0 - lambda_mix) * kl
}

/// One patient's candidate group with its frozen classifier target.
#[derive(Clone, Debug)]
pub struct AlignGroup {
    pub prepared: PreparedEhr,
    pub masks: Vec<Vec<bool>>,
    pub csc: Vec<f64>,
}

impl AlignGroup {
    /// `csc_scores` are the predictor's true-label probabilities per candidate.
    pub fn new(
        ehr: &PatientEhr,
        candidates: &[Rewrite],
        csc_scores: &[f64],
        catalog: &FeatureCatalog,
        tau: f64,
    ) -> Result<Self> {
        Ok(AlignGroup {
            prepared: PreparedEhr::new(ehr, catalog)?,
            masks: candidates.iter().map(|c| c.mask(ehr)).collect::<Result<_>>()?,
            csc: softmax(csc_scores, tau),
        })
    }

    pub fn lm_distribution(&self, policy: &RewriterPolicy, kappa: f64) -> Vec<f64> {
        let logits = policy.logits(&self.prepared);
        let lp: Vec<f64> = self.masks.iter().map(|m| mask_logprob(&logits, m)).collect();
        softmax(&lp, kappa)
    }

    /// KL of this group and `d KL / d theta` added to `grad` with weight `weight`.
    fn kl_and_gradient(&self, policy: &RewriterPolicy, kappa: f64, weight: f64, grad: &mut PolicyGradient) -> f64 {
        let p = self.lm_distribution(policy, kappa);
        let kl = kl_loss(&p, &self.csc);
        // d KL / d a_j = p_j (ln p_j - ln c_j - KL), a_j = logprob_j / kappa
        for ((mask, &pj), &cj) in self.masks.iter().zip(&p).zip(&self.csc) {
            if pj == 0.0 {
                continue;
            }
            let d_a = pj * (pj.ln() - cj.ln() - kl);
            accumulate_logprob_gradient(policy, &self.prepared, mask, weight * d_a / kappa, grad);
        }
        kl
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total_loss: f64,
    pub llm_loss: f64,
    pub kl_loss: f64,
}

/// Mixed objective on one batch (mean KL over groups, mean per-tuple
/// likelihood loss over pairs) and its gradient with respect to the policy.
pub fn alignment_loss_and_gradient(
    policy: &RewriterPolicy,
    groups: &[&AlignGroup],
    llm_pairs: &[&MaskExample],
    config: &AlignmentConfig,
) -> (LossParts, PolicyGradient) {
    let lambda = config.lambda_mix;
    let mut grad = PolicyGradient::default();
    let mut kl = 0.0;
    if lambda < 1.0 && !groups.is_empty() {
        let w = (1.0 - lambda) / groups.len() as f64;
        for g in groups {
            kl += g.kl_and_gradient(policy, config.kappa, w, &mut grad);
        }
        kl /= groups.len() as f64;
    }
    let mut llm = 0.0;
    if lambda > 0.0 && !llm_pairs.is_empty() {
        let (l, g) = mle_loss_and_gradient(policy, llm_pairs);
        llm = l;
        grad.add_scaled(&g, lambda);
    }
    (
        LossParts {
            total_loss: total_loss(llm, kl, lambda),
            llm_loss: llm,
            kl_loss: kl,
        },
        grad,
    )
}

/// Scores a policy checkpoint; higher is better.
pub type PolicyEvaluator<'a> = &'a mut dyn FnMut(&RewriterPolicy) -> Result<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub total_loss: f64,
    pub llm_loss: f64,
    pub kl_loss: f64,
    pub val_auroc: Option<f64>,
}

pub fn write_log(path: impl AsRef<Path>, log: &[TrainLogEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in log {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Cycles through `n` items in seeded shuffled epochs; full batches keep the
/// natural order so the gradient sums are order-stable.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    label: &'static str,
}

impl Batcher {
    fn new(n: usize, seed: u64, label: &'static str) -> Self {
        Batcher {
            order: (0..n).collect(),
            pos: n,
            epoch: 0,
            seed,
            label,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let n = self.order.len();
        if n == 0 {
            return Vec::new();
        }
        if size >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == n {
                let mut rng = seed::rng(seed::derive_index(self.seed, self.label, self.epoch));
                self.order.shuffle(&mut rng);
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Gradient descent on the mixed objective, updating the policy only.
///
/// `evaluate` (validation AUROC of ensemble inference) is called at step 0,
/// every `eval_every` steps and after the last step; the best-scoring policy
/// is returned, the earliest on ties. Without an evaluator the final policy is
/// returned.
pub fn kl_train(
    policy: &RewriterPolicy,
    groups: &[AlignGroup],
    llm_pairs: &[MaskExample],
    config: &AlignmentConfig,
    mut evaluate: Option<PolicyEvaluator<'_>>,
) -> Result<(RewriterPolicy, Vec<TrainLogEntry>)> {
    config.validate()?;
    let mut current = policy.clone();
    let mut log = Vec::new();
    if config.max_steps == 0 {
        return Ok((current, log));
    }
    let mut group_batches = Batcher::new(groups.len(), config.rng_seed, "align-groups");
    let mut pair_batches = Batcher::new(llm_pairs.len(), config.rng_seed, "align-pairs");
    let mut best: Option<(f64, RewriterPolicy)> = None;
    let mut consider = |step: usize, policy: &RewriterPolicy, parts: LossParts, log: &mut Vec<TrainLogEntry>| -> Result<()> {
        let val_auroc = match evaluate.as_mut() {
            Some(f) => Some(f(policy)?),
            None => None,
        };
        if let Some(a) = val_auroc {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, policy.clone()));
            }
        }
        log.push(TrainLogEntry {
            step,
            total_loss: parts.total_loss,
            llm_loss: parts.llm_loss,
            kl_loss: parts.kl_loss,
            val_auroc,
        });
        Ok(())
    };
    for step in 0..config.max_steps {
        let g_idx = group_batches.next(config.batch_size);
        let p_idx = pair_batches.next(config.batch_size);
        let g: Vec<&AlignGroup> = g_idx.iter().map(|&i| &groups[i]).collect();
        let p: Vec<&MaskExample> = p_idx.iter().map(|&i| &llm_pairs[i]).collect();
        let (parts, grad) = alignment_loss_and_gradient(&current, &g, &p, config);
        if !parts.total_loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: format!("alignment step {step}"),
            });
        }
        if step == 0 {
            consider(0, &current, parts, &mut log)?;
        } else if step % config.eval_every == 0 {
            consider(step, &current, parts, &mut log)?;
        }
        current.step(&grad, config.learning_rate);
    }
    if !current.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "alignment final policy".into(),
        });
    }
    let all_groups: Vec<&AlignGroup> = groups.iter().collect();
    let all_pairs: Vec<&MaskExample> = llm_pairs.iter().collect();
    let (parts, _) = alignment_loss_and_gradient(&current, &all_groups, &all_pairs, config);
    consider(config.max_steps, &current, parts, &mut log)?;
    let result = match best {
        Some((auroc, p)) => {
            log::info!("alignment: best validation AUROC {auroc:.4}");
            p
        }
        None => current,
    };
    Ok((result, log))
}
