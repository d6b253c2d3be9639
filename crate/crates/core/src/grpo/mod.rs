//! Group-relative advantages, counterfactual gene-grounding rewards,
//! token-level advantage assembly and the clipped policy objective.

pub mod task;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Trajectory;
use crate::policy::{PolicyError, ToyPolicy};
use crate::scalar::{clip, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToolTokenMode {
    /// Tool-call tokens carry `w_tool_token · r_tool` as is.
    RawShaping,
    /// `r_tool` is normalized within the prompt group first.
    GroupNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvantageConfig {
    pub group_size: usize,
    pub epsilon_norm: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub w_tool_token: f64,
    pub w_gene: f64,
    /// Attention-shaping slot; must stay 0.
    pub w_attn: f64,
    pub tool_token_mode: ToolTokenMode,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        AdvantageConfig {
            group_size: 4,
            epsilon_norm: 1e-4,
            clip_eps: 0.2,
            kl_beta: 0.0,
            w_tool_token: 1.0,
            w_gene: 0.5,
            w_attn: 0.0,
            tool_token_mode: ToolTokenMode::RawShaping,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if self.epsilon_norm.is_nan() || self.epsilon_norm <= 0.0 {
            return bad("epsilon_norm must be positive".into());
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta must be finite and non-negative".into());
        }
        if !(self.w_tool_token.is_finite() && self.w_gene.is_finite()) {
            return bad("token weights must be finite".into());
        }
        if self.w_attn != 0.0 {
            return bad(format!("attention reward weight must be 0, got {}", self.w_attn));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneGroundingConfig {
    pub cap: f64,
    /// Gate by `max(r_corr, 0)`; when off the raw `r_corr` scales the gap.
    pub positive_gate: bool,
}

impl Default for GeneGroundingConfig {
    fn default() -> Self {
        GeneGroundingConfig { cap: 5.0, positive_gate: true }
    }
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("{len} rewards cannot be split into groups of {group}")]
    GroupSize { len: usize, group: usize },
    #[error("per-token values have length {got}, trajectory has {expected} tokens")]
    MaskMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at step {0}")]
    Divergence(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GroupStats<T> {
    pub mean: T,
    /// Population standard deviation.
    pub std: T,
}

pub fn group_stats<T: Scalar>(rewards: &[T]) -> GroupStats<T> {
    let n = T::lit(rewards.len() as f64);
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    GroupStats { mean, std: var.sqrt() }
}

/// `(R_j − μ_G) / (σ_G + eps)` within consecutive groups of `group`.
pub fn group_advantages<T: Scalar>(rewards: &[T], group: usize, eps: T) -> Result<Vec<T>, GrpoError> {
    if group == 0 || !rewards.len().is_multiple_of(group) {
        return Err(GrpoError::GroupSize { len: rewards.len(), group });
    }
    let mut out = Vec::with_capacity(rewards.len());
    for g in rewards.chunks(group) {
        let s = group_stats(g);
        out.extend(g.iter().map(|&r| (r - s.mean) / (s.std + eps)));
    }
    Ok(out)
}

/// Per-trajectory value placed on tool-call tokens, before `w_tool_token`.
pub fn tool_token_values(r_tool: &[f64], cfg: &AdvantageConfig) -> Result<Vec<f64>, GrpoError> {
    match cfg.tool_token_mode {
        ToolTokenMode::RawShaping => Ok(r_tool.to_vec()),
        ToolTokenMode::GroupNormalized => group_advantages(r_tool, cfg.group_size, cfg.epsilon_norm),
    }
}

/// Gated, clipped gene gaps: `gate(r_corr) · clip(Δ_t, −cap, cap)` on answer
/// tokens, 0 elsewhere.
pub fn gene_values_from_deltas<T: Scalar>(
    deltas: &[T],
    answer: &[bool],
    r_corr: T,
    cfg: &GeneGroundingConfig,
) -> Vec<T> {
    let gate = if cfg.positive_gate { r_corr.max(T::zero()) } else { r_corr };
    let cap = T::lit(cfg.cap);
    deltas
        .iter()
        .zip(answer)
        .map(|(&d, &a)| if a && gate != T::zero() { gate * clip(d, -cap, cap) } else { T::zero() })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneGrounding {
    /// Reward per token (0 off the answer span).
    pub values: Vec<f64>,
    /// Raw gap `log π(y|c,g) − log π(y|c,0)` per token (0 off the answer span).
    pub deltas: Vec<f64>,
}

impl GeneGrounding {
    /// Mean clipped gap over answer tokens; `None` without answer tokens.
    pub fn mean_clipped_delta(&self, answer: &[bool], cap: f64) -> Option<f64> {
        let v: Vec<f64> =
            self.deltas.iter().zip(answer).filter(|(_, &a)| a).map(|(&d, _)| d.clamp(-cap, cap)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Two teacher-forced passes over the same tokens, with the trajectory's gene
/// and with the zero vector.
pub fn gene_grounding_rewards<T: Scalar>(
    policy: &ToyPolicy<T>,
    traj: &Trajectory,
    r_corr: f64,
    cfg: &GeneGroundingConfig,
) -> Result<GeneGrounding, GrpoError> {
    let tokens = traj.token_stream();
    let mask = traj.build_policy_mask();
    let positions: Vec<usize> = (0..tokens.len()).filter(|&t| mask.answer[t]).collect();
    let gene: Vec<T> = traj.gene.iter().map(|&x| T::lit(x)).collect();
    let zero = vec![T::zero(); gene.len()];
    let with_gene = policy.teacher_forced(&tokens, &positions, &gene)?;
    let without = policy.teacher_forced(&tokens, &positions, &zero)?;
    let mut deltas = vec![0.0; tokens.len()];
    for (k, &t) in positions.iter().enumerate() {
        deltas[t] = (with_gene[k] - without[k]).to_f64_lossy();
    }
    let values = gene_values_from_deltas(&deltas, &mask.answer, r_corr, cfg);
    Ok(GeneGrounding { values, deltas })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenAdvantages {
    pub total: Vec<f64>,
    pub sequence: Vec<f64>,
    pub tool: Vec<f64>,
    pub gene: Vec<f64>,
}

/// `A_t = A·1[answer] + w_tool·tool_value·1[tool call] + w_gene·gene_t·1[answer]`.
pub fn assemble_token_advantages(
    traj: &Trajectory,
    seq_adv: f64,
    tool_value: f64,
    gene_vals: &[f64],
    cfg: &AdvantageConfig,
) -> Result<TokenAdvantages, GrpoError> {
    let mask = traj.build_policy_mask();
    let n = mask.policy.len();
    if gene_vals.len() != n {
        return Err(GrpoError::MaskMismatch { expected: n, got: gene_vals.len() });
    }
    let mut adv =
        TokenAdvantages { total: vec![0.0; n], sequence: vec![0.0; n], tool: vec![0.0; n], gene: vec![0.0; n] };
    for t in 0..n {
        if !mask.policy[t] {
            continue;
        }
        if mask.answer[t] {
            adv.sequence[t] = seq_adv;
            adv.gene[t] = cfg.w_gene * gene_vals[t];
        }
        if mask.tool_call[t] {
            adv.tool[t] = cfg.w_tool_token * tool_value;
        }
        adv.total[t] = adv.sequence[t] + adv.tool[t] + adv.gene[t];
    }
    Ok(adv)
}

#[derive(Debug)]
pub struct LossOutput<T> {
    /// Token-averaged loss of this sequence.
    pub loss: f64,
    pub grad: ToyPolicy<T>,
    pub valid_tokens: usize,
    pub clipped_tokens: usize,
    /// Number of exact KL evaluations performed.
    pub kl_evaluations: usize,
}

/// Clipped surrogate (plus optional exact KL to `reference`) averaged over
/// the policy-mask tokens of one trajectory, with its gradient.
pub fn grpo_loss_and_grad<T: Scalar>(
    policy: &ToyPolicy<T>,
    old_logprobs: &[f64],
    traj: &Trajectory,
    adv: &TokenAdvantages,
    cfg: &AdvantageConfig,
    reference: Option<&ToyPolicy<T>>,
) -> Result<LossOutput<T>, GrpoError> {
    let tokens = traj.token_stream();
    let mask = traj.build_policy_mask();
    let n = tokens.len();
    for len in [old_logprobs.len(), adv.total.len()] {
        if len != n {
            return Err(GrpoError::MaskMismatch { expected: n, got: len });
        }
    }
    let use_kl = cfg.kl_beta > 0.0;
    if use_kl && reference.is_none() {
        return Err(GrpoError::Config("kl_beta > 0 needs a reference policy".into()));
    }
    let gene: Vec<T> = traj.gene.iter().map(|&x| T::lit(x)).collect();
    let mut grad = policy.zeros_like();
    let valid: Vec<usize> = (0..n).filter(|&t| mask.policy[t]).collect();
    let mut out = LossOutput {
        loss: 0.0,
        grad: policy.zeros_like(),
        valid_tokens: valid.len(),
        clipped_tokens: 0,
        kl_evaluations: 0,
    };
    if valid.is_empty() {
        return Ok(out);
    }
    let inv_n = T::lit(1.0 / valid.len() as f64);
    let eps = T::lit(cfg.clip_eps);
    let beta = T::lit(cfg.kl_beta);
    let mut loss = T::zero();
    for &t in &valid {
        let ctx = &tokens[..t];
        let y = tokens[t];
        let lp = policy.next_logprobs(ctx, &gene)?;
        let a = T::lit(adv.total[t]);
        let rho = (lp[y as usize] - T::lit(old_logprobs[t])).exp();
        let unclipped = rho * a;
        let clipped = clip(rho, T::one() - eps, T::one() + eps) * a;
        loss -= unclipped.min(clipped) * inv_n;
        let clip_active = (a > T::zero() && rho > T::one() + eps) || (a < T::zero() && rho < T::one() - eps);
        if clip_active {
            out.clipped_tokens += 1;
        } else if a != T::zero() {
            policy.accumulate_grad_logprob(ctx, &gene, y, -(a * rho) * inv_n, &mut grad)?;
        }
        if use_kl {
            let q = reference.expect("checked above").next_logprobs(ctx, &gene)?;
            let kl: T = lp.iter().zip(&q).map(|(&l, &r)| l.exp() * (l - r)).sum();
            let dlogits: Vec<T> = lp.iter().zip(&q).map(|(&l, &r)| l.exp() * (l - r - kl)).collect();
            policy.accumulate_vjp(ctx, &gene, &dlogits, beta * inv_n, &mut grad);
            loss += beta * kl * inv_n;
            out.kl_evaluations += 1;
        }
    }
    out.loss = loss.to_f64_lossy();
    out.grad = grad;
    Ok(out)
}

/// Exact categorical KL(p‖q) from log-probabilities.
pub fn categorical_kl<T: Scalar>(logp: &[T], logq: &[T]) -> T {
    logp.iter().zip(logq).map(|(&l, &r)| l.exp() * (l - r)).sum()
}
