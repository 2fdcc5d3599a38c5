//! Alignment objectives and training loops: the per-segment DPO loss and
//! its batch form, the token-level KL constraint, whole-response DPO, and
//! the PPO baseline (GAE, clipped objective, value fitting).

use crate::corpus::Document;
use crate::policy::model::ModelDims;
use crate::policy::optim::AdamW;
use crate::policy::sample::SamplerConfig;
use crate::policy::{
    eval_segment, Gradients, PolicyError, PolicyParams, SegmentEval,
};
use crate::sampling::{
    ppo_rollout, PreferencePair, ResponsePairSet, SampledDataset, SamplingContext, SamplingError,
    Trajectory,
};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// How the trained model's output format is kept intact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FormatControl {
    /// Full-parameter updates, no constraint.
    None,
    /// Full-parameter updates plus the token-level KL penalty.
    #[default]
    Tkld,
    /// Low-rank adapters on the attention projections; the base is frozen.
    LowRank,
}

impl std::fmt::Display for FormatControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatControl::None => write!(f, "none"),
            FormatControl::Tkld => write!(f, "tkld"),
            FormatControl::LowRank => write!(f, "low_rank"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Sensitivity to implicit reward differences in the preference loss.
    pub beta: f64,
    /// Weight of the token-level KL constraint.
    pub lambda_tkld: f64,
    /// PPO clipping half-width.
    pub clip_epsilon: f64,
    /// Reward discount.
    pub gamma: f64,
    /// Advantage interpolation between one-step residuals (0) and full
    /// returns (1).
    pub gae_lambda: f64,
    pub epochs: usize,
    /// Batch size in lines.
    pub batch_lines: usize,
    pub lr: f64,
    pub format_control: FormatControl,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub ppo_rounds: usize,
    pub ppo_policy_epochs: usize,
    /// PPO policy learning rate. Clipped-surrogate updates tolerate far
    /// smaller steps than the preference losses before format collapse.
    pub ppo_lr: f64,
    pub value_lr: f64,
    pub value_epochs: usize,
    /// Early-stop threshold on the mean approximate KL to the rollout
    /// policy during PPO updates.
    pub kl_guard: f64,
    /// Center and scale advantages across each rollout batch before the
    /// policy epochs. Without this, the uniformly negative rewards of early
    /// rounds push down every sampled continuation and collapse the format.
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lambda_tkld: 1e-4,
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            batch_lines: 64,
            lr: 1e-3,
            format_control: FormatControl::default(),
            lora_rank: 16,
            lora_alpha: 32.0,
            ppo_rounds: 8,
            ppo_policy_epochs: 4,
            ppo_lr: 1e-4,
            value_lr: 1e-2,
            value_epochs: 25,
            kl_guard: 0.05,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub pairs: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ln(1 + e^x), stable.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// A generic preference contrast: chosen vs rejected continuation of a
/// shared prefix. Segment pairs and whole-response pairs both reduce to it.
struct ContrastItem<'a> {
    prefix: &'a [u32],
    chosen: &'a [u32],
    rejected: &'a [u32],
}

struct ContrastEval {
    loss: f64,
    /// d loss / d logp_theta(chosen), i.e. -beta * sigma(-s).
    coef_chosen: f64,
    chosen_eval: SegmentEval,
    rejected_eval: SegmentEval,
    ref_chosen: SegmentEval,
}

/// Forward both continuations under policy and reference and evaluate
/// -ln sigma(beta * contrast).
fn eval_contrast(
    policy: &PolicyParams,
    w_pol: &[f64],
    reference: &PolicyParams,
    w_ref: &[f64],
    item: &ContrastItem,
    beta: f64,
) -> Result<ContrastEval, AlignError> {
    let chosen_eval = eval_segment(policy, w_pol, item.prefix, item.chosen)?;
    let rejected_eval = eval_segment(policy, w_pol, item.prefix, item.rejected)?;
    let ref_chosen = eval_segment(reference, w_ref, item.prefix, item.chosen)?;
    let ref_rejected = eval_segment(reference, w_ref, item.prefix, item.rejected)?;
    let s = beta
        * ((chosen_eval.logp - ref_chosen.logp) - (rejected_eval.logp - ref_rejected.logp));
    Ok(ContrastEval {
        loss: softplus(-s),
        coef_chosen: -beta * sigmoid(-s),
        chosen_eval,
        rejected_eval,
        ref_chosen,
    })
}

/// Token-level KL rows for the chosen continuation, as extra logit
/// gradients scaled by `coef`. Returns (sum of per-position KL, dlogits).
fn tkld_rows(
    eval: &SegmentEval,
    ref_eval: &SegmentEval,
    coef: f64,
) -> (f64, Vec<(usize, Vec<f64>)>) {
    let mut total = 0.0;
    let mut rows = Vec::with_capacity(eval.steps().len());
    for ((pos, p, _), (_, q, _)) in eval.steps().iter().zip(ref_eval.steps()) {
        let mut kl = 0.0;
        let mut logdiff = vec![0.0; p.len()];
        for i in 0..p.len() {
            let lp = p[i].max(f64::MIN_POSITIVE).ln();
            let lq = q[i].max(f64::MIN_POSITIVE).ln();
            logdiff[i] = lp - lq;
            kl += p[i] * logdiff[i];
        }
        total += kl;
        let row: Vec<f64> = (0..p.len())
            .map(|i| coef * p[i] * (logdiff[i] - kl))
            .collect();
        rows.push((*pos, row));
    }
    (total, rows)
}

/// The preference loss for a single line:
/// -ln sigma(beta [ (log pi_t(c|p) - log pi_r(c|p)) - (log pi_t(r|p) - log pi_r(r|p)) ]).
pub fn dpo_segment_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    beta: f64,
) -> Result<(f64, Gradients), AlignError> {
    let w_pol = policy.materialized();
    let w_ref = reference.materialized();
    let item = ContrastItem {
        prefix: &pair.prefix,
        chosen: &pair.chosen.tokens,
        rejected: &pair.rejected.tokens,
    };
    let ce = eval_contrast(policy, &w_pol, reference, &w_ref, &item, beta)?;
    let mut grad = Gradients::zeros_like(policy);
    let g_c = ce.chosen_eval.backward_scaled(policy, &w_pol, ce.coef_chosen, &[]);
    let g_r = ce
        .rejected_eval
        .backward_scaled(policy, &w_pol, -ce.coef_chosen, &[]);
    grad.axpy(1.0, &g_c);
    grad.axpy(1.0, &g_r);
    Ok((ce.loss, grad))
}

/// Batch preference loss: mean of per-line DPO losses, each conditioned on
/// its own chosen prefix.
pub fn sspo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    cfg: &LossConfig,
) -> Result<(f64, Gradients), AlignError> {
    if pairs.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    let w_pol = policy.materialized();
    let w_ref = reference.materialized();
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = Gradients::zeros_like(policy);
    let mut loss = 0.0;
    for pair in pairs {
        let item = ContrastItem {
            prefix: &pair.prefix,
            chosen: &pair.chosen.tokens,
            rejected: &pair.rejected.tokens,
        };
        let ce = eval_contrast(policy, &w_pol, reference, &w_ref, &item, cfg.beta)?;
        loss += scale * ce.loss;
        grad.axpy(
            scale,
            &ce.chosen_eval
                .backward_scaled(policy, &w_pol, ce.coef_chosen, &[]),
        );
        grad.axpy(
            scale,
            &ce.rejected_eval
                .backward_scaled(policy, &w_pol, -ce.coef_chosen, &[]),
        );
    }
    Ok((loss, grad))
}

/// Token-level KL penalty: lambda times the mean over batch items of the
/// summed full-vocabulary KL(pi_theta || pi_ref) at every segment position.
/// Exactly zero when the two models' distributions coincide.
pub fn tkld_penalty(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[(Vec<u32>, Vec<u32>)],
    lambda: f64,
) -> Result<(f64, Gradients), AlignError> {
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    let w_pol = policy.materialized();
    let w_ref = reference.materialized();
    let scale = lambda / batch.len() as f64;
    let mut grad = Gradients::zeros_like(policy);
    let mut total = 0.0;
    for (prefix, segment) in batch {
        if segment.is_empty() {
            continue;
        }
        let pol_eval = eval_segment(policy, &w_pol, prefix, segment)?;
        let ref_eval = eval_segment(reference, &w_ref, prefix, segment)?;
        let (kl_sum, rows) = tkld_rows(&pol_eval, &ref_eval, scale);
        debug_assert!(kl_sum > -1e-12, "KL must be non-negative, got {kl_sum}");
        total += scale * kl_sum;
        grad.axpy(1.0, &pol_eval.backward_scaled(policy, &w_pol, 0.0, &rows));
    }
    Ok((total, grad))
}

// ---------------------------------------------------------------------------
// PPO pieces.
// ---------------------------------------------------------------------------

/// Scalar value head over prefix features: a single hidden layer MLP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueModel {
    pub in_dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl ValueModel {
    pub fn init(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = hidden * in_dim + hidden + hidden + 1;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        // Zero output layer: V starts at 0 everywhere.
        for p in params[hidden * in_dim + hidden..].iter_mut() {
            *p = 0.0;
        }
        Self {
            in_dim,
            hidden,
            params,
        }
    }

    pub fn for_policy(dims: &ModelDims, seed: u64) -> Self {
        Self::init(dims.d_model, 32, seed)
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (h, d) = (self.hidden, self.in_dim);
        let w1 = &self.params[..h * d];
        let b1 = &self.params[h * d..h * d + h];
        let w2 = &self.params[h * d + h..h * d + 2 * h];
        let b2 = self.params[h * d + 2 * h];
        (w1, b1, w2, b2)
    }

    pub fn value(&self, features: &[f64]) -> f64 {
        let (w1, b1, w2, b2) = self.split();
        let (h, d) = (self.hidden, self.in_dim);
        let mut out = b2;
        for j in 0..h {
            let pre = b1[j]
                + w1[j * d..(j + 1) * d]
                    .iter()
                    .zip(features)
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
            out += w2[j] * pre * sigmoid(pre);
        }
        out
    }

    /// Accumulate d(value)/d(params) * coef into `grad`.
    pub fn grad_acc(&self, features: &[f64], coef: f64, grad: &mut [f64]) {
        let (w1, b1, w2, _) = self.split();
        let (h, d) = (self.hidden, self.in_dim);
        for j in 0..h {
            let pre = b1[j]
                + w1[j * d..(j + 1) * d]
                    .iter()
                    .zip(features)
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
            let s = sigmoid(pre);
            let act = pre * s;
            let dact = s * (1.0 + pre * (1.0 - s));
            let up = coef * w2[j] * dact;
            for i in 0..d {
                grad[j * d + i] += up * features[i];
            }
            grad[h * d + j] += up;
            grad[h * d + h + j] += coef * act;
        }
        grad[h * d + 2 * h] += coef;
    }
}

/// Center and scale advantages to zero mean and unit variance across a
/// rollout batch (trainer-level detail; the GAE values themselves follow
/// the exact recursion).
pub fn normalize_advantages(trajs: &mut [Trajectory]) {
    let all: Vec<f64> = trajs
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| s.advantage))
        .collect();
    if all.len() < 2 {
        return;
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len() as f64;
    let std = var.sqrt().max(1e-8);
    for t in trajs.iter_mut() {
        for s in t.steps.iter_mut() {
            s.advantage = (s.advantage - mean) / std;
        }
    }
}

/// Fill TD residuals and generalized advantages in place. The value past
/// the final step is zero.
pub fn gae_advantages(traj: &mut Trajectory, gamma: f64, gae_lambda: f64) {
    let n = traj.steps.len();
    let mut next_adv = 0.0;
    for i in (0..n).rev() {
        let v_next = if i + 1 < n { traj.steps[i + 1].value } else { 0.0 };
        let delta = traj.steps[i].reward + gamma * v_next - traj.steps[i].value;
        traj.steps[i].delta = delta;
        next_adv = delta + gamma * gae_lambda * next_adv;
        traj.steps[i].advantage = next_adv;
        traj.steps[i].value_target = next_adv + traj.steps[i].value;
    }
}

/// Clipped surrogate objective over trajectories, averaged per document:
/// -(1/|T|) sum_tau sum_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i).
/// Also returns the mean approximate KL to the rollout policy.
pub fn ppo_clip_loss(
    policy: &PolicyParams,
    trajectories: &[Trajectory],
    epsilon: f64,
) -> Result<(f64, Gradients, f64), AlignError> {
    if trajectories.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    let w = policy.materialized();
    let scale = 1.0 / trajectories.len() as f64;
    let mut grad = Gradients::zeros_like(policy);
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut steps = 0usize;
    for traj in trajectories {
        for step in &traj.steps {
            let prefix = &traj.tokens[..step.prefix_len];
            let eval = eval_segment(policy, &w, prefix, &step.action)?;
            let log_ratio = eval.logp - step.old_logp;
            let ratio = log_ratio.exp();
            kl_sum += ratio - 1.0 - log_ratio;
            steps += 1;
            let a = step.advantage;
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
            if unclipped <= clipped {
                loss -= scale * unclipped;
                // d(-rho A)/d theta = -A rho dlogp
                grad.axpy(1.0, &eval.backward_scaled(policy, &w, -scale * a * ratio, &[]));
            } else {
                loss -= scale * clipped;
                // Clipped branch is constant in theta.
            }
        }
    }
    Ok((loss, grad, kl_sum / steps.max(1) as f64))
}

/// Mean squared error between current values and the GAE targets
/// (advantage + rollout value, held constant).
pub fn value_loss(value: &ValueModel, trajectories: &[Trajectory]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; value.params.len()];
    let mut loss = 0.0;
    let count: usize = trajectories.iter().map(|t| t.steps.len()).sum();
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    for traj in trajectories {
        for step in &traj.steps {
            let target = step.value_target;
            let v = value.value(&step.features);
            loss += scale * (v - target) * (v - target);
            value.grad_acc(&step.features, scale * 2.0 * (v - target), &mut grad);
        }
    }
    (loss, grad)
}

// ---------------------------------------------------------------------------
// Trainers.
// ---------------------------------------------------------------------------

/// Shared batched-contrast trainer behind the segment and whole-response
/// DPO entry points.
#[allow(clippy::too_many_arguments)]
fn train_contrast(
    sft: &PolicyParams,
    items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)>,
    cfg: &LossConfig,
    stage: &str,
    batch_items: usize,
    use_format_control: bool,
    epoch_dir: Option<&Path>,
) -> Result<(PolicyParams, TrainReport), AlignError> {
    let mut policy = sft.clone();
    let mut report = TrainReport {
        pairs: items.len(),
        ..TrainReport::default()
    };
    if cfg.epochs == 0 || items.is_empty() {
        return Ok((policy, report));
    }
    if use_format_control && cfg.format_control == FormatControl::LowRank {
        policy.attach_adapters(cfg.lora_rank, cfg.lora_alpha, cfg.seed);
    }
    policy.lineage.push(format!("{stage}:{}", cfg.seed));
    let reference = sft;
    let w_ref = reference.materialized();
    let tkld = use_format_control && cfg.format_control == FormatControl::Tkld;

    let mut opt = AdamW::new(policy.trainable().len(), cfg.lr);
    let mut last_good = policy.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64 + 1));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        for batch in order.chunks(batch_items.max(1)) {
            let w_pol = policy.materialized().into_owned();
            let scale = 1.0 / batch.len() as f64;
            // Fixed-size chunks keep the reduction order stable at any
            // worker count.
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_chunks(8)
                .map(|chunk| -> Result<Vec<(f64, Vec<f64>)>, AlignError> {
                    chunk
                        .iter()
                        .map(|&idx| {
                            let (prefix, chosen, rejected) = &items[idx];
                            let item = ContrastItem {
                                prefix,
                                chosen,
                                rejected,
                            };
                            let ce =
                                eval_contrast(&policy, &w_pol, reference, &w_ref, &item, cfg.beta)?;
                            let mut loss = ce.loss;
                            let extra = if tkld {
                                let ref_eval = &ce.ref_chosen;
                                let (kl_sum, rows) =
                                    tkld_rows(&ce.chosen_eval, ref_eval, cfg.lambda_tkld);
                                loss += cfg.lambda_tkld * kl_sum;
                                rows
                            } else {
                                Vec::new()
                            };
                            let mut g = ce.chosen_eval.backward_scaled(
                                &policy,
                                &w_pol,
                                ce.coef_chosen,
                                &extra,
                            );
                            let g_r = ce.rejected_eval.backward_scaled(
                                &policy,
                                &w_pol,
                                -ce.coef_chosen,
                                &[],
                            );
                            for (a, b) in g.iter_mut().zip(&g_r) {
                                *a += b;
                            }
                            Ok((loss, g))
                        })
                        .collect()
                })
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .flatten()
                .collect();

            let mut grad = vec![0.0; policy.trainable().len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(AlignError::Policy(PolicyError::Diverged {
                    stage: stage.into(),
                    epoch,
                    last_good: Box::new(last_good),
                }));
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(policy.trainable_mut(), &grad);
            epoch_loss += batch_loss;
            epoch_items += batch.len();
        }
        report
            .epoch_losses
            .push(epoch_loss / epoch_items.max(1) as f64);
        last_good = policy.clone();
        if let Some(dir) = epoch_dir {
            crate::policy::checkpoint::save(
                &dir.join(format!("{stage}_epoch{:02}.ckpt.json", epoch + 1)),
                &policy,
            )?;
        }
    }
    Ok((policy, report))
}

/// Segment-supervised preference training: per-line DPO under chosen
/// prefixes, with the configured format control. The reference stays
/// frozen at the SFT weights.
pub fn train_sspo(
    sft: &PolicyParams,
    sampled: &SampledDataset,
    query_docs: &[Document],
    cfg: &LossConfig,
    epoch_dir: Option<&Path>,
) -> Result<(PolicyParams, TrainReport), AlignError> {
    let pairs = sampled.retained_pairs(&sft.vocab, query_docs);
    let items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)> = pairs
        .into_iter()
        .map(|p| (p.prefix, p.chosen.tokens, p.rejected.tokens))
        .collect();
    train_contrast(sft, items, cfg, "sspo", cfg.batch_lines, true, epoch_dir)
}

/// Vanilla whole-response DPO over coarse- or fine-sampled pairs. Full
/// parameter updates; batch size is interpreted in lines.
pub fn train_dpo_vanilla(
    sft: &PolicyParams,
    pairs: &ResponsePairSet,
    cfg: &LossConfig,
    epoch_dir: Option<&Path>,
) -> Result<(PolicyParams, TrainReport), AlignError> {
    let items: Vec<(Vec<u32>, Vec<u32>, Vec<u32>)> = pairs
        .pairs
        .iter()
        .map(|p| {
            (
                p.prompt.clone(),
                p.chosen_tokens.clone(),
                p.rejected_tokens.clone(),
            )
        })
        .collect();
    // A whole response covers about one document's worth of lines.
    let lines_per_item = items
        .first()
        .map(|(_, c, _)| c.iter().filter(|&&t| t == sft.vocab.newline()).count().max(1))
        .unwrap_or(1);
    let batch_items = (cfg.batch_lines / lines_per_item).max(1);
    let mut cfg_full = cfg.clone();
    cfg_full.format_control = FormatControl::None;
    train_contrast(sft, items, &cfg_full, "dpo", batch_items, false, epoch_dir)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoRoundStats {
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_kl: f64,
    pub policy_epochs_run: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PpoReport {
    pub rounds: Vec<PpoRoundStats>,
}

/// Advantage-based PPO: rollout, GAE, clipped policy updates with a KL
/// guard against the rollout policy, then value fitting, for a fixed number
/// of rounds.
pub fn train_ppo(
    sft: &PolicyParams,
    query: &[Document],
    sampler_cfg: &SamplerConfig,
    ctx: &SamplingContext,
    cfg: &LossConfig,
) -> Result<(PolicyParams, ValueModel, PpoReport), AlignError> {
    let mut policy = sft.clone();
    let mut value = ValueModel::for_policy(&policy.dims, cfg.seed);
    let mut report = PpoReport::default();
    if cfg.ppo_rounds == 0 || query.is_empty() {
        return Ok((policy, value, report));
    }
    policy.lineage.push(format!("ppo:{}", cfg.seed));

    let lines_per_doc = query.iter().map(|d| d.lines.len()).max().unwrap_or(1);
    let batch_docs = (cfg.batch_lines / lines_per_doc.max(1)).max(1);
    let mut opt = AdamW::new(policy.trainable().len(), cfg.ppo_lr);
    let mut value_opt = AdamW::new(value.params.len(), cfg.value_lr);

    for round in 0..cfg.ppo_rounds {
        let seed = crate::sampling::stream_seed(cfg.seed, &[round as u64, 0xba5e]);
        let mut trajs = ppo_rollout(
            &policy,
            query,
            sampler_cfg,
            ctx,
            |f| value.value(f),
            seed,
        )?;
        for traj in trajs.iter_mut() {
            gae_advantages(traj, cfg.gamma, cfg.gae_lambda);
        }
        if cfg.normalize_advantages {
            // Value targets were fixed at GAE time; only the policy's
            // advantages are rescaled.
            normalize_advantages(&mut trajs);
        }
        let mean_reward = {
            let (sum, n) = trajs
                .iter()
                .flat_map(|t| t.steps.iter().map(|s| s.reward))
                .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
            sum / n.max(1) as f64
        };

        let mut order: Vec<usize> = (0..trajs.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1));
        let mut policy_loss_last = 0.0;
        let mut kl_last = 0.0;
        let mut epochs_run = 0usize;
        'epochs: for _epoch in 0..cfg.ppo_policy_epochs {
            order.shuffle(&mut rng);
            let mut kl_acc = 0.0;
            let mut kl_batches = 0usize;
            for chunk in order.chunks(batch_docs) {
                let batch: Vec<Trajectory> =
                    chunk.iter().map(|&i| trajs[i].clone()).collect();
                let (loss, grad, kl) = ppo_clip_loss(&policy, &batch, cfg.clip_epsilon)?;
                if !loss.is_finite() {
                    return Err(AlignError::Policy(PolicyError::Diverged {
                        stage: "ppo".into(),
                        epoch: round,
                        last_good: Box::new(policy.clone()),
                    }));
                }
                opt.step(policy.trainable_mut(), &grad.values);
                policy_loss_last = loss;
                kl_acc += kl;
                kl_batches += 1;
            }
            epochs_run += 1;
            kl_last = kl_acc / kl_batches.max(1) as f64;
            if kl_last > cfg.kl_guard {
                break 'epochs;
            }
        }

        let mut vloss_last = 0.0;
        for _ in 0..cfg.value_epochs {
            let (vloss, vgrad) = value_loss(&value, &trajs);
            if !vloss.is_finite() {
                return Err(AlignError::Policy(PolicyError::Diverged {
                    stage: "ppo-value".into(),
                    epoch: round,
                    last_good: Box::new(policy.clone()),
                }));
            }
            value_opt.step(&mut value.params, &vgrad);
            vloss_last = vloss;
        }

        report.rounds.push(PpoRoundStats {
            mean_reward,
            policy_loss: policy_loss_last,
            value_loss: vloss_last,
            mean_kl: kl_last,
            policy_epochs_run: epochs_run,
        });
    }
    Ok((policy, value, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::policy::vocab::Vocabulary;
    use crate::policy::{segment_logprob, PolicyParams};
    use crate::sampling::{CandidateInfo, TrajectoryStep};

    fn tiny_policy(seed: u64) -> PolicyParams {
        let vocab = Vocabulary::new((0..8).map(|i| format!("a{i:02}")));
        let dims = ModelDims {
            vocab: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            max_context: 64,
        };
        PolicyParams::init(vocab, dims, seed).unwrap()
    }

    fn make_pair(prefix: Vec<u32>, chosen: Vec<u32>, rejected: Vec<u32>) -> PreferencePair {
        let info = |tokens: Vec<u32>| CandidateInfo {
            text: format!("{tokens:?}"),
            tokens,
            duration: 1.0,
            quality: 100.0,
            penalty: 0.1,
        };
        PreferencePair {
            prompt_id: "doc".into(),
            line_index: 0,
            prefix,
            chosen: info(chosen),
            rejected: info(rejected),
            penalty_gap: 0.2,
        }
    }

    #[test]
    fn zero_contrast_loss_is_ln2() {
        let p = tiny_policy(1);
        let pair = make_pair(vec![1, 2], vec![3, 4], vec![5]);
        let (loss, _) = dpo_segment_loss(&p, &p, &pair, 0.5).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        let (loss_b, _) = sspo_loss(&p, &p, &[pair.clone(), pair], &LossConfig::default()).unwrap();
        assert!((loss_b - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tkld_is_exactly_zero_at_reference() {
        let p = tiny_policy(2);
        let batch = vec![(vec![1u32, 2], vec![3u32, 4, 5])];
        let (loss, grad) = tkld_penalty(&p, &p, &batch, 1e-4).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn tkld_positive_and_grad_checks_when_models_differ() {
        let p = tiny_policy(3);
        let mut q = tiny_policy(4);
        q.lineage = p.lineage.clone();
        let batch = vec![(vec![1u32, 2], vec![3u32, 4])];
        let (loss, grad) = tkld_penalty(&p, &q, &batch, 1.0).unwrap();
        assert!(loss > 0.0);
        let f = |x: &[f64]| {
            let mut pp = p.clone();
            pp.base.copy_from_slice(x);
            tkld_penalty(&pp, &q, &batch, 1.0).unwrap().0
        };
        gradcheck::check_against_fd(&f, &p.base, &grad.values, 25, 1e-4, 31).unwrap();
    }

    #[test]
    fn dpo_grad_matches_finite_differences() {
        let policy = tiny_policy(5);
        let reference = tiny_policy(6);
        let pair = make_pair(vec![1, 2, 7], vec![3, 4], vec![5, 0]);
        let (_, grad) = dpo_segment_loss(&policy, &reference, &pair, 0.7).unwrap();
        let f = |x: &[f64]| {
            let mut p = policy.clone();
            p.base.copy_from_slice(x);
            dpo_segment_loss(&p, &reference, &pair, 0.7).unwrap().0
        };
        gradcheck::check_against_fd(&f, &policy.base, &grad.values, 30, 1e-4, 32).unwrap();
    }

    #[test]
    fn dpo_gradient_pushes_chosen_up_at_reference() {
        // One plain gradient step must increase the chosen log-probability
        // and decrease the rejected one.
        let p = tiny_policy(7);
        let pair = make_pair(vec![1, 2], vec![3, 4], vec![5, 6]);
        let (_, grad) = dpo_segment_loss(&p, &p, &pair, 0.5).unwrap();
        let mut stepped = p.clone();
        let eta = 1e-3;
        for (w, g) in stepped.base.iter_mut().zip(&grad.values) {
            *w -= eta * g;
        }
        let lp_c_before = segment_logprob(&p, &pair.prefix, &pair.chosen.tokens).unwrap();
        let lp_r_before = segment_logprob(&p, &pair.prefix, &pair.rejected.tokens).unwrap();
        let lp_c_after = segment_logprob(&stepped, &pair.prefix, &pair.chosen.tokens).unwrap();
        let lp_r_after = segment_logprob(&stepped, &pair.prefix, &pair.rejected.tokens).unwrap();
        assert!(lp_c_after > lp_c_before);
        assert!(lp_r_after < lp_r_before);
    }

    #[test]
    fn one_descent_step_decreases_pair_loss() {
        let policy = tiny_policy(8);
        let reference = tiny_policy(9);
        let pair = make_pair(vec![2, 1], vec![4], vec![6, 3]);
        let (loss0, grad) = dpo_segment_loss(&policy, &reference, &pair, 0.5).unwrap();
        let mut improved = false;
        for eta in [1e-2, 1e-3, 1e-4, 1e-5] {
            let mut stepped = policy.clone();
            for (w, g) in stepped.base.iter_mut().zip(&grad.values) {
                *w -= eta * g;
            }
            let (loss1, _) = dpo_segment_loss(&stepped, &reference, &pair, 0.5).unwrap();
            if loss1 < loss0 {
                improved = true;
                break;
            }
        }
        assert!(improved, "no step size decreased the loss");
    }

    #[test]
    fn beta_scales_the_presigmoid_argument() {
        // With a fixed small contrast, doubling beta doubles the argument:
        // loss = softplus(-s), so s = -ln(e^loss - 1) recovers s.
        let policy = tiny_policy(10);
        let reference = tiny_policy(11);
        let pair = make_pair(vec![1, 5], vec![2], vec![7]);
        let s_of = |beta: f64| {
            let (loss, _) = dpo_segment_loss(&policy, &reference, &pair, beta).unwrap();
            -(loss.exp() - 1.0).ln()
        };
        let s1 = s_of(0.3);
        let s2 = s_of(0.6);
        assert!((s2 - 2.0 * s1).abs() < 1e-6, "s1 {s1} s2 {s2}");
    }

    fn toy_trajectory(rewards: &[f64], values: &[f64]) -> Trajectory {
        let steps = rewards
            .iter()
            .zip(values)
            .enumerate()
            .map(|(i, (&r, &v))| TrajectoryStep {
                line_index: i,
                prefix_len: 2,
                action: vec![],
                reward: r,
                value: v,
                features: vec![0.0; 4],
                old_logp: 0.0,
                delta: 0.0,
                advantage: 0.0,
                value_target: 0.0,
            })
            .collect();
        Trajectory {
            prompt_id: "t".into(),
            tokens: vec![1, 2],
            steps,
        }
    }

    /// O(n^2) summation oracle: A_i = sum_l (gamma*lambda)^l delta_{i+l}.
    fn gae_bruteforce(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
        let n = rewards.len();
        let mut deltas = vec![0.0; n];
        for i in 0..n {
            let v_next = if i + 1 < n { values[i + 1] } else { 0.0 };
            deltas[i] = rewards[i] + gamma * v_next - values[i];
        }
        (0..n)
            .map(|i| {
                (0..n - i)
                    .map(|l| (gamma * lam).powi(l as i32) * deltas[i + l])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_matches_bruteforce_on_random_trajectories() {
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        for _ in 0..100 {
            let n = rng.gen_range(1..12);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gamma = rng.gen_range(0.5..1.0);
            let lam = rng.gen_range(0.0..1.0);
            let mut traj = toy_trajectory(&rewards, &values);
            gae_advantages(&mut traj, gamma, lam);
            let expect = gae_bruteforce(&rewards, &values, gamma, lam);
            for (step, e) in traj.steps.iter().zip(&expect) {
                assert!((step.advantage - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gae_telescopes_at_gamma_lambda_one() {
        // gamma = lambda = 1: A_i = sum_{j>=i} r_j - V_i.
        let rewards = [0.5, -0.3, 1.2, 0.1];
        let values = [0.2, -0.1, 0.4, 0.0];
        let mut traj = toy_trajectory(&rewards, &values);
        gae_advantages(&mut traj, 1.0, 1.0);
        for i in 0..rewards.len() {
            let expect: f64 = rewards[i..].iter().sum::<f64>() - values[i];
            assert!((traj.steps[i].advantage - expect).abs() < 1e-12);
        }
        // All-zero rewards and values give zero advantages.
        let mut z = toy_trajectory(&[0.0; 3], &[0.0; 3]);
        gae_advantages(&mut z, 0.9, 0.9);
        assert!(z.steps.iter().all(|s| s.advantage == 0.0));
    }

    #[test]
    fn ppo_loss_at_old_policy_is_minus_advantage_sum() {
        let policy = tiny_policy(12);
        // Build a trajectory whose old_logp matches the current policy.
        let prefix = vec![1u32, 2];
        let action = vec![3u32, 4];
        let logp = segment_logprob(&policy, &prefix, &action).unwrap();
        let mut traj = toy_trajectory(&[0.0, 0.0], &[0.0, 0.0]);
        traj.tokens = vec![1, 2];
        for (i, step) in traj.steps.iter_mut().enumerate() {
            step.prefix_len = 2;
            step.action = action.clone();
            step.old_logp = logp;
            step.advantage = 0.3 * (i as f64 + 1.0);
        }
        let (loss, _, kl) = ppo_clip_loss(&policy, &[traj.clone()], 0.2).unwrap();
        let a_sum: f64 = traj.steps.iter().map(|s| s.advantage).sum();
        assert!((loss + a_sum).abs() < 1e-9);
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn ppo_clipped_branch_value() {
        // rho = 1.5, eps = 0.2, A > 0: the clipped branch is active and the
        // per-step term is 1.2 * A.
        let policy = tiny_policy(13);
        let prefix = vec![1u32, 2];
        let action = vec![3u32];
        let logp = segment_logprob(&policy, &prefix, &action).unwrap();
        let mut traj = toy_trajectory(&[0.0], &[0.0]);
        traj.tokens = prefix.clone();
        traj.steps[0].action = action;
        traj.steps[0].old_logp = logp - 1.5f64.ln(); // rho = 1.5
        traj.steps[0].advantage = 0.7;
        let (loss, grad, _) = ppo_clip_loss(&policy, &[traj.clone()], 0.2).unwrap();
        assert!((loss + 1.2 * 0.7).abs() < 1e-9);
        // Clipped branch: no gradient flows.
        assert!(grad.values.iter().all(|g| *g == 0.0));

        // A < 0 with rho large: min takes the unclipped branch.
        let mut t2 = traj.clone();
        t2.steps[0].advantage = -0.7;
        let (loss2, grad2, _) = ppo_clip_loss(&policy, &[t2], 0.2).unwrap();
        assert!((loss2 - 1.5 * 0.7).abs() < 1e-9);
        assert!(grad2.values.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn ppo_grad_matches_finite_differences() {
        let policy = tiny_policy(14);
        let prefix = vec![1u32, 6];
        let action = vec![2u32, 5];
        let logp = segment_logprob(&policy, &prefix, &action).unwrap();
        let mut traj = toy_trajectory(&[0.0], &[0.0]);
        traj.tokens = prefix.clone();
        traj.steps[0].action = action;
        traj.steps[0].old_logp = logp + 0.05; // rho slightly below 1
        traj.steps[0].advantage = 0.9;
        let (_, grad, _) = ppo_clip_loss(&policy, &[traj.clone()], 0.2).unwrap();
        let f = |x: &[f64]| {
            let mut p = policy.clone();
            p.base.copy_from_slice(x);
            ppo_clip_loss(&p, &[traj.clone()], 0.2).unwrap().0
        };
        gradcheck::check_against_fd(&f, &policy.base, &grad.values, 25, 1e-4, 33).unwrap();
    }

    #[test]
    fn value_loss_identities_and_grad() {
        let value = ValueModel::init(4, 6, 3);
        // A = 0 everywhere: loss 0 at the rollout value function.
        let mut traj = toy_trajectory(&[0.0, 0.0], &[0.0, 0.0]);
        for step in traj.steps.iter_mut() {
            step.value = value.value(&step.features);
            step.value_target = step.value; // A = 0
        }
        let (loss, _) = value_loss(&value, &[traj.clone()]);
        assert!(loss.abs() < 1e-18);

        // Single step, A = 0.3: loss 0.09 at the current parameters.
        let mut t1 = toy_trajectory(&[0.0], &[0.0]);
        t1.steps[0].value = value.value(&t1.steps[0].features);
        t1.steps[0].advantage = 0.3;
        t1.steps[0].value_target = t1.steps[0].value + 0.3;
        let (loss1, grad) = value_loss(&value, &[t1.clone()]);
        assert!((loss1 - 0.09).abs() < 1e-12);

        let f = |x: &[f64]| {
            let mut v = value.clone();
            v.params.copy_from_slice(x);
            value_loss(&v, &[t1.clone()]).0
        };
        gradcheck::check_against_fd(&f, &value.params, &grad, 20, 1e-4, 34).unwrap();
    }

    /// The whole-sequence contrast equals the sum of per-segment contrasts
    /// when each response conditions on its own prefix, and differs from
    /// the shared-chosen-prefix sum the segment loss uses.
    #[test]
    fn decomposition_identity_three_segments() {
        let policy = tiny_policy(15);
        let mut reference = tiny_policy(16);
        reference.lineage = policy.lineage.clone();
        let x = vec![1u32, 2];
        let yw: [Vec<u32>; 3] = [vec![3, 4], vec![5], vec![6, 7]];
        let yl: [Vec<u32>; 3] = [vec![4], vec![0, 2], vec![7]];

        let contrast = |params: &PolicyParams, prefix: &[u32], seg: &[u32]| {
            segment_logprob(params, prefix, seg).unwrap()
        };
        let full = |segs: &[Vec<u32>; 3]| -> f64 {
            let y: Vec<u32> = segs.iter().flatten().copied().collect();
            contrast(&policy, &x, &y) - contrast(&reference, &x, &y)
        };
        let lhs = full(&yw) - full(&yl);

        // Mixed prefixes: each sequence extends its own earlier segments.
        let mut rhs = 0.0;
        let mut pw = x.clone();
        let mut pl = x.clone();
        for i in 0..3 {
            rhs += contrast(&policy, &pw, &yw[i]) - contrast(&reference, &pw, &yw[i]);
            rhs -= contrast(&policy, &pl, &yl[i]) - contrast(&reference, &pl, &yl[i]);
            pw.extend_from_slice(&yw[i]);
            pl.extend_from_slice(&yl[i]);
        }
        assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");

        // Shared chosen prefix for both sides (the segment-supervised sum):
        // not the same quantity as the whole-sequence contrast.
        let mut shared = 0.0;
        let mut p = x.clone();
        for i in 0..3 {
            shared += contrast(&policy, &p, &yw[i]) - contrast(&reference, &p, &yw[i]);
            shared -= contrast(&policy, &p, &yl[i]) - contrast(&reference, &p, &yl[i]);
            p.extend_from_slice(&yw[i]);
        }
        assert!(
            (shared - lhs).abs() > 1e-6,
            "shared-prefix sum coincidentally equals the mixed contrast"
        );
    }

    #[test]
    fn trainers_leave_reference_untouched_and_adapters_freeze_base() {
        let policy = tiny_policy(17);
        let pair = make_pair(vec![1, 2], vec![3], vec![4]);
        let sampled = SampledDataset::default();
        let _ = sampled;
        let cfg = LossConfig {
            epochs: 2,
            batch_lines: 2,
            lr: 1e-2,
            format_control: FormatControl::LowRank,
            lora_rank: 2,
            lora_alpha: 4.0,
            ..LossConfig::default()
        };
        let items = vec![
            (pair.prefix.clone(), pair.chosen.tokens.clone(), pair.rejected.tokens.clone());
            3
        ];
        let ref_bits_before = policy.base.clone();
        let (trained, report) =
            train_contrast(&policy, items, &cfg, "sspo", 2, true, None).unwrap();
        assert_eq!(policy.base, ref_bits_before, "reference mutated");
        assert_eq!(trained.base, policy.base, "adapter training touched base");
        assert!(trained.adapters.is_some());
        assert_eq!(report.epoch_losses.len(), 2);
        assert!(report.epoch_losses[0].is_finite());

        // Full-parameter mode moves the base.
        let cfg_full = LossConfig {
            format_control: FormatControl::None,
            ..cfg
        };
        let items = vec![(pair.prefix.clone(), pair.chosen.tokens.clone(), pair.rejected.tokens.clone())];
        let (trained_full, _) =
            train_contrast(&policy, items, &cfg_full, "sspo", 2, true, None).unwrap();
        assert_ne!(trained_full.base, policy.base);
    }

    #[test]
    fn zero_epochs_and_zero_rounds_are_noops() {
        let policy = tiny_policy(18);
        let cfg = LossConfig {
            epochs: 0,
            ..LossConfig::default()
        };
        let (out, _) = train_contrast(&policy, vec![], &cfg, "sspo", 4, true, None).unwrap();
        assert_eq!(out.base, policy.base);
    }
}
